//! Training targets and losses.
//!
//! A positive cell of rank `r` is supervised with the boolean vector
//! `[r ≤ n]` for `n = 1..N`; background cells with all-false. The partition
//! branch uses focal loss, the mask branch dice loss on positive cells at
//! mask-feature resolution.

use crate::config::{FocalParams, LossWeights, MASK_STRIDE};
use crate::data_synth::SceneSample;
use crate::error::{Error, Result};
use crate::heads::assign_targets;
use crate::mask::{BinaryMask, SoftMask};
use crate::numerics::{Tape, Tensor, Var};

pub const FOCAL_EPS: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;

/// Entry `n` (0-based) is true iff `rank ≤ n + 1`.
pub fn encode_partition_gt(rank: usize, n: usize) -> Result<Vec<bool>> {
    if rank == 0 || rank > n {
        return Err(Error::Data(format!("rank {rank} outside 1..={n}")));
    }
    Ok((1..=n).map(|k| rank <= k).collect())
}

/// Scalar focal loss of one probability, with the same clamping as
/// [`focal_loss`].
pub fn focal_value(p: f64, target: bool, f: &FocalParams) -> f64 {
    let p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    let (pt, at) = if target { (p, f.alpha) } else { (1.0 - p, 1.0 - f.alpha) };
    -at * (1.0 - pt).powf(f.gamma) * pt.ln()
}

/// Mean focal loss over every element of `pred` against 0/1 `target`.
pub fn focal_loss<'t>(pred: Var<'t>, target: &Tensor, f: &FocalParams) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(Error::dim("focal_loss", &pred.shape(), target.shape()));
    }
    let tape = pred.tape();
    let p = pred.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    // p_t = p·(2t−1) + (1−t)
    let sign = tape.constant(target.map(|t| 2.0 * t - 1.0));
    let offset = tape.constant(target.map(|t| 1.0 - t));
    let pt = p.mul(sign)?.add(offset)?;
    let alpha = tape.constant(target.map(|t| if t > 0.5 { f.alpha } else { 1.0 - f.alpha }));
    let modulator = if f.gamma == 0.0 { None } else { Some(pt.one_minus().powf(f.gamma)) };
    let mut per = pt.ln().mul(alpha)?;
    if let Some(m) = modulator {
        per = per.mul(m)?;
    }
    Ok(per.mean().scale(-1.0))
}

/// `1 − (2Σpt + ε) / (Σp² + Σt² + ε)` for a single mask pair.
pub fn dice_value(pred: &SoftMask, target: &BinaryMask) -> Result<f64> {
    if (pred.height, pred.width) != (target.height, target.width) {
        return Err(Error::dim("dice_loss", &[pred.height, pred.width], &[target.height, target.width]));
    }
    let (mut pt, mut pp, mut tt) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.data.iter().zip(&target.data) {
        let t = t as u8 as f64;
        pt += p * t;
        pp += p * p;
        tt += t * t;
    }
    Ok(1.0 - (2.0 * pt + DICE_SMOOTH) / (pp + tt + DICE_SMOOTH))
}

/// Dice loss of `[R×h×w]` probabilities against 0/1 targets, averaged over `R`.
pub fn dice_loss<'t>(pred: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    let shape = pred.shape();
    if shape != target.shape() || shape.is_empty() {
        return Err(Error::dim("dice_loss", &shape, target.shape()));
    }
    let tape = pred.tape();
    let r = shape[0];
    let plane: usize = shape[1..].iter().product();
    let ones = tape.constant(Tensor::ones(&[plane, 1]));
    let t = tape.constant(target.clone());
    let row_sum = |v: Var<'t>| v.reshape(&[r, plane])?.matmul(ones);
    let inter = row_sum(pred.mul(t)?)?;
    let pp = row_sum(pred.square())?;
    let tt: Vec<f64> = (0..r)
        .map(|i| target.data()[i * plane..(i + 1) * plane].iter().map(|v| v * v).sum())
        .collect();
    let denom = pp.add(tape.constant(Tensor::new(vec![r, 1], tt)?))?.add_scalar(DICE_SMOOTH);
    let coeff = inter.scale(2.0).add_scalar(DICE_SMOOTH).mul(denom.powf(-1.0))?;
    Ok(coeff.one_minus().mean())
}

/// Average-pools a binary mask by `factor` and keeps cells at least half covered.
pub fn downsample_mask(m: &BinaryMask, factor: usize) -> BinaryMask {
    let (h, w) = (m.height / factor, m.width / factor);
    let half = (factor * factor) as f64 / 2.0;
    BinaryMask::from_fn(h, w, |y, x| {
        let mut count = 0usize;
        for dy in 0..factor {
            for dx in 0..factor {
                count += m.get(y * factor + dy, x * factor + dx) as usize;
            }
        }
        count as f64 >= half
    })
}

/// Per-sample supervision aligned with the cell enumeration.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTargets {
    /// Instance index per cell.
    pub labels: Vec<Option<usize>>,
    /// `[K×N]` 0/1 partition targets.
    pub partition: Tensor,
    /// Cell rows with an assigned instance, ascending.
    pub positive_rows: Vec<usize>,
    /// Rank of the instance at each positive row.
    pub positive_ranks: Vec<usize>,
    /// `[R×H/4×W/4]` downsampled instance masks for the positive rows.
    pub masks: Option<Tensor>,
}

pub fn build_targets(sample: &SceneSample, sides: &[usize], n: usize) -> Result<SampleTargets> {
    let labels = assign_targets(sample, sides)?;
    let k = labels.len();
    let mut partition = vec![0.0; k * n];
    let mut positive_rows = Vec::new();
    let mut positive_ranks = Vec::new();
    let mut mask_data = Vec::new();
    let (hm, wm) = (sample.height() / MASK_STRIDE, sample.width() / MASK_STRIDE);
    for (row, label) in labels.iter().enumerate() {
        let Some(i) = *label else { continue };
        let inst = &sample.instances[i];
        for (j, b) in encode_partition_gt(inst.rank, n)?.into_iter().enumerate() {
            partition[row * n + j] = b as u8 as f64;
        }
        positive_rows.push(row);
        positive_ranks.push(inst.rank);
        let small = downsample_mask(&inst.mask, MASK_STRIDE);
        mask_data.extend(small.data.iter().map(|&b| b as u8 as f64));
    }
    let masks = if positive_rows.is_empty() {
        None
    } else {
        Some(Tensor::new(vec![positive_rows.len(), hm, wm], mask_data)?)
    };
    Ok(SampleTargets {
        labels,
        partition: Tensor::new(vec![k, n], partition)?,
        positive_rows,
        positive_ranks,
        masks,
    })
}

pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub partition: Var<'t>,
    pub mask: Var<'t>,
}

/// `λ_p · Σ_n focal_n + λ_m · dice`, where `focal_n` is the mean over cells
/// of head `n` and dice is averaged over positive cells. `mask_probs` holds
/// the predicted masks of the positive rows; without positives the mask
/// term is zero.
pub fn total_loss<'t>(
    tape: &'t Tape,
    partition: Var<'t>,
    mask_probs: Option<Var<'t>>,
    targets: &SampleTargets,
    weights: &LossWeights,
    focal: &FocalParams,
) -> Result<LossTerms<'t>> {
    let n = partition.shape().get(1).copied().unwrap_or(1) as f64;
    let part = focal_loss(partition, &targets.partition, focal)?.scale(n);
    let mask = match (mask_probs, &targets.masks) {
        (Some(p), Some(t)) => dice_loss(p, t)?,
        (None, None) => tape.constant(Tensor::scalar(0.0)),
        _ => {
            return Err(Error::Alignment {
                what: "predicted vs target positive masks",
                left: mask_probs.is_some() as usize,
                right: targets.masks.is_some() as usize,
            })
        }
    };
    let total = part.scale(weights.partition).add(mask.scale(weights.mask))?;
    Ok(LossTerms {
        total,
        partition: part,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_examples() {
        let b = |v: &[u8]| v.iter().map(|&x| x == 1).collect::<Vec<_>>();
        assert_eq!(encode_partition_gt(1, 5).unwrap(), b(&[1, 1, 1, 1, 1]));
        assert_eq!(encode_partition_gt(3, 5).unwrap(), b(&[0, 0, 1, 1, 1]));
        assert_eq!(encode_partition_gt(5, 5).unwrap(), b(&[0, 0, 0, 0, 1]));
        assert!(encode_partition_gt(0, 5).is_err());
        assert!(encode_partition_gt(6, 5).is_err());
    }

    #[test]
    fn focal_examples() {
        let f = FocalParams::default();
        assert!(focal_value(1.0 - FOCAL_EPS, true, &f) < 1e-12);
        let v = focal_value(0.5, true, &f);
        assert!((v - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        let ce = FocalParams { alpha: 1.0, gamma: 0.0 };
        assert!((focal_value(0.5, true, &ce) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn focal_tensor_matches_scalar() {
        let f = FocalParams::default();
        let tape = Tape::new();
        let p = [0.1, 0.5, 0.9, 0.3];
        let t = [1.0, 0.0, 1.0, 0.0];
        let v = focal_loss(tape.var(Tensor::new(vec![2, 2], p.to_vec()).unwrap()), &Tensor::new(vec![2, 2], t.to_vec()).unwrap(), &f)
            .unwrap()
            .item();
        let want: f64 = p.iter().zip(&t).map(|(&p, &t)| focal_value(p, t > 0.5, &f)).sum::<f64>() / 4.0;
        assert!((v - want).abs() < 1e-14);
    }

    #[test]
    fn dice_examples() {
        let t = BinaryMask::from_fn(1, 4, |_, x| x < 2);
        let exact = SoftMask::new(1, 4, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(dice_value(&exact, &t).unwrap().abs() < 1e-15);
        // area 2 vs area 2 with one shared pixel: 1 − (2+1)/(2+2+1)
        let half = SoftMask::new(1, 4, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((dice_value(&half, &t).unwrap() - 0.4).abs() < 1e-15);
        let big_t = BinaryMask::from_fn(40, 40, |_, x| x < 20);
        let big_p = SoftMask::new(40, 40, (0..1600).map(|i| if i % 40 >= 20 { 1.0 } else { 0.0 }).collect()).unwrap();
        assert!(dice_value(&big_p, &big_t).unwrap() > 0.999);
        assert!(dice_value(&half, &BinaryMask::empty(2, 2)).is_err());
    }

    #[test]
    fn dice_tensor_matches_scalar() {
        let tape = Tape::new();
        let p = vec![0.2, 0.9, 0.4, 0.1, 0.7, 0.6, 0.0, 1.0];
        let t = vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let v = dice_loss(tape.var(Tensor::new(vec![2, 2, 2], p.clone()).unwrap()), &Tensor::new(vec![2, 2, 2], t.clone()).unwrap())
            .unwrap()
            .item();
        let want: f64 = (0..2)
            .map(|r| {
                let sp = SoftMask::new(2, 2, p[r * 4..r * 4 + 4].to_vec()).unwrap();
                let bt = BinaryMask { height: 2, width: 2, data: t[r * 4..r * 4 + 4].iter().map(|&v| v > 0.5).collect() };
                dice_value(&sp, &bt).unwrap()
            })
            .sum::<f64>()
            / 2.0;
        assert!((v - want).abs() < 1e-14);
    }

    #[test]
    fn downsample_half_coverage() {
        let m = BinaryMask::from_fn(8, 8, |y, x| y < 4 && x < 2);
        let d = downsample_mask(&m, 4);
        assert_eq!(d.data, vec![true, false, false, false]);
        let m = BinaryMask::from_fn(8, 8, |y, x| y < 4 && x < 1);
        assert!(downsample_mask(&m, 4).is_empty());
    }

    #[test]
    fn mask_weight_zero_leaves_partition_term() {
        let tape = Tape::new();
        let targets = SampleTargets {
            labels: vec![Some(0), None],
            partition: Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap(),
            positive_rows: vec![0],
            positive_ranks: vec![1],
            masks: Some(Tensor::ones(&[1, 2, 2])),
        };
        let p = tape.var(Tensor::new(vec![2, 2], vec![0.6, 0.7, 0.2, 0.1]).unwrap());
        let m = tape.var(Tensor::full(&[1, 2, 2], 0.3));
        let w = LossWeights { partition: 1.0, mask: 0.0 };
        let terms = total_loss(&tape, p, Some(m), &targets, &w, &FocalParams::default()).unwrap();
        assert_eq!(terms.total.item(), terms.partition.item());
        assert!(terms.mask.item() > 0.0);
    }

    proptest! {
        #[test]
        fn encoding_is_monotone(n in 1usize..=16, r in 1usize..=16) {
            prop_assume!(r <= n);
            let v = encode_partition_gt(r, n).unwrap();
            prop_assert!(v.windows(2).all(|w| !w[0] || w[1]));
            prop_assert_eq!(v.iter().filter(|&&b| b).count(), n - r + 1);
        }

        #[test]
        fn focal_nonnegative(p in 0.0f64..=1.0, t in any::<bool>(), a in 0.0f64..=1.0, g in 0.0f64..5.0) {
            let f = FocalParams { alpha: a, gamma: g };
            prop_assert!(focal_value(p, t, &f) >= 0.0);
        }

        #[test]
        fn dice_in_unit_interval(bits in prop::collection::vec(any::<bool>(), 16), probs in prop::collection::vec(0.0f64..=1.0, 16)) {
            let t = BinaryMask { height: 4, width: 4, data: bits };
            let p = SoftMask::new(4, 4, probs).unwrap();
            let d = dice_value(&p, &t).unwrap();
            prop_assert!((0.0..1.0).contains(&d));
        }
    }
}
