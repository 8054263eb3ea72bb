mod common;

use saliency_rank::config::HeadKind;

fn assert_passed(reports: &[saliency_rank::numerics::GradCheckReport]) {
    for r in reports {
        assert!(r.passed(), "{}: max rel err {:.3e} over {} elements", r.op, r.max_rel_err, r.checked);
    }
}

#[test]
fn elementwise_and_structural_ops() {
    let r = common::op_suite().unwrap();
    assert!(r.len() >= 30);
    assert_passed(&r);
}

#[test]
fn parameterized_layers() {
    assert_passed(&common::layer_suite().unwrap());
}

#[test]
fn transformer_end_to_end() {
    assert_passed(&[common::dpt_check().unwrap()]);
}

#[test]
fn mask_kernels() {
    assert_passed(&[common::mask_kernel_check().unwrap()]);
}

#[test]
fn total_loss_wrt_transformer_input() {
    for head in [HeadKind::Partition, HeadKind::Sorting] {
        let r = common::total_loss_check(head).unwrap();
        assert!(r.checked <= 1000);
        assert_passed(&[r]);
    }
}
