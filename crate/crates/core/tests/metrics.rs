mod common;

use saliency_rank::data_synth::{generate_scene, GenConfig};
use saliency_rank::eval::evaluate_passthrough;
use saliency_rank::mask::BinaryMask;
use saliency_rank::metrics::{evaluate_image, mae, pearson_oracle, spearman_oracle, RankedMask};

#[test]
fn correlations_match_textbook_oracles() {
    let c = common::compare_correlations(1000, 17);
    assert_eq!(c.definedness_mismatches, 0);
    assert!(c.max_diff < 1e-9, "max diff {}", c.max_diff);
}

#[test]
fn library_oracles_agree_with_test_oracles() {
    for seed in 0..200 {
        let (a, b) = common::random_rank_pair(seed);
        let pairs = [
            (spearman_oracle(&a, &b), common::spearman_textbook(&a, &b)),
            (pearson_oracle(&a, &b), common::pearson_textbook(&a, &b)),
        ];
        for (x, y) in pairs {
            match (x, y) {
                (Some(x), Some(y)) => assert!((x - y).abs() < 1e-9),
                (None, None) => {}
                other => panic!("seed {seed}: {other:?}"),
            }
        }
    }
}

#[test]
fn mae_of_identical_renderings_is_zero() {
    let s = generate_scene(&GenConfig::default(), 3).unwrap();
    let v: Vec<RankedMask> = s.instances.iter().map(|i| RankedMask { mask: &i.mask, rank: i.rank }).collect();
    assert_eq!(mae(&v, &v, 3, (64, 64)), 0.0);
}

#[test]
fn passthrough_is_perfect() {
    let samples: Vec<_> = (0..50).map(|i| generate_scene(&GenConfig::default(), 1000 + i).unwrap()).collect();
    let r = evaluate_passthrough(&samples, 3, true).unwrap();
    assert_eq!((r.mae, r.sor, r.sa_sor, r.sor_normalized), (0.0, Some(1.0), Some(1.0), Some(1.0)));
    assert_eq!(r.confusion.iter().enumerate().map(|(i, row)| row[i]).sum::<u64>(), r.confusion.iter().flatten().sum::<u64>());
}

#[test]
fn reversed_ranks_give_negative_sor() {
    let a = BinaryMask::from_fn(8, 8, |y, _| y < 2);
    let b = BinaryMask::from_fn(8, 8, |y, _| y >= 6);
    let gts = [RankedMask { mask: &a, rank: 1 }, RankedMask { mask: &b, rank: 2 }];
    let preds = [RankedMask { mask: &a, rank: 2 }, RankedMask { mask: &b, rank: 1 }];
    let m = evaluate_image(&preds, &gts, 2, (8, 8)).unwrap();
    assert_eq!(m.sor, Some(-1.0));
    assert!(m.mae > 0.0);
}

#[test]
fn report_json_has_documented_fields() {
    let samples: Vec<_> = (0..5).map(|i| generate_scene(&GenConfig::default(), i).unwrap()).collect();
    let v = serde_json::to_value(evaluate_passthrough(&samples, 3, false).unwrap()).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(
        keys,
        ["confusion", "images_evaluated", "images_excluded_sasor", "images_excluded_sor", "mae", "sa_sor", "sor"]
    );
}
