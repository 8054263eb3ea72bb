//! Ranking-by-sorting baseline: each cell classifies itself into rank
//! `1..N` or background, and ranks are read off the argmax classes.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::heads::{per_cell_conv, CellOrigin, PRIOR_PROBABILITY};
use crate::mask::{mask_iou, BinaryMask, SoftMask};
use crate::numerics::{Conv2d, ParamStore, Tape, Tensor, Var};
use crate::p2r::RankedInstance;
use crate::pyramid::PyramidFeatures;

/// A `3×3, E→N+1` conv shared by all scales, followed by a softmax.
/// Class `c < N` is rank `c + 1`; class `N` is background.
#[derive(Clone, Debug)]
pub struct SortingHead {
    pub conv: Conv2d,
    pub n: usize,
}

impl SortingHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let conv = Conv2d::new(store, "sorting.head", cfg.channels, cfg.n + 1, 3, 1, true, rng);
        store.tensor_mut(conv.weight).data_mut().iter_mut().for_each(|w| *w *= 0.1);
        // background starts at 1 − π, matching the partition heads' prior
        let bg = ((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY * cfg.n as f64).ln();
        store.tensor_mut(conv.bias.expect("bias")).data_mut()[cfg.n] = bg;
        Self { conv, n: cfg.n }
    }

    /// `[K×(N+1)]` class probabilities.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, f: &PyramidFeatures<'t>) -> Result<Var<'t>> {
        per_cell_conv(tape, store, std::slice::from_ref(&self.conv), f)?.softmax(1)
    }
}

/// One-hot `[K×(N+1)]` class targets from per-cell ranks (`None` = background).
pub fn class_targets(cell_ranks: &[Option<usize>], n: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[cell_ranks.len(), n + 1]);
    for (k, r) in cell_ranks.iter().enumerate() {
        let class = match *r {
            Some(r) if (1..=n).contains(&r) => r - 1,
            Some(r) => return Err(Error::Data(format!("rank {r} outside 1..={n}"))),
            None => n,
        };
        t.set(&[k, class], 1.0);
    }
    Ok(t)
}

/// Mean cross-entropy over cells.
pub fn cross_entropy<'t>(probs: Var<'t>, one_hot: &Tensor) -> Result<Var<'t>> {
    if probs.shape() != one_hot.shape() {
        return Err(Error::dim("cross_entropy", &probs.shape(), one_hot.shape()));
    }
    let k = probs.shape()[0] as f64;
    let picked = probs.clamp(1e-12, 1.0).ln().mul(probs.tape().constant(one_hot.clone()))?;
    Ok(picked.sum().scale(-1.0 / k))
}

/// Argmax class per cell with its confidence; ties go to the lower class.
pub fn argmax_classes(scores: &Tensor) -> Vec<(usize, f64)> {
    let c = scores.shape()[1];
    scores
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        })
        .collect()
}

/// Non-background cells in descending confidence (then ascending row) each
/// claim their class's rank; a claim is dropped when the rank is taken or
/// the mask overlaps a kept instance above `nms_iou`.
pub fn sort_to_ranks(
    scores: &Tensor,
    masks: &[SoftMask],
    origins: &[CellOrigin],
    nms_iou: f64,
    binarize_at: f64,
) -> Result<Vec<RankedInstance>> {
    if scores.ndim() != 2 || scores.shape()[0] != masks.len() || masks.len() != origins.len() {
        return Err(Error::Alignment {
            what: "rank scores vs masks",
            left: scores.shape()[0],
            right: masks.len(),
        });
    }
    let n = scores.shape()[1] - 1;
    let mut cands: Vec<(usize, usize, f64)> = argmax_classes(scores)
        .into_iter()
        .enumerate()
        .filter(|&(_, (c, _))| c < n)
        .map(|(k, (c, conf))| (k, c, conf))
        .collect();
    cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let mut taken = vec![false; n];
    let mut kept: Vec<RankedInstance> = Vec::new();
    for (k, c, conf) in cands {
        if taken[c] {
            continue;
        }
        let mask: BinaryMask = masks[k].binarize(binarize_at);
        let mut suppressed = false;
        for r in &kept {
            if mask_iou(&r.mask, &mask)? > nms_iou {
                suppressed = true;
                break;
            }
        }
        if suppressed {
            continue;
        }
        taken[c] = true;
        kept.push(RankedInstance {
            mask,
            rank: c + 1,
            score: conf,
            origin: origins[k],
        });
    }
    kept.sort_by_key(|r| r.rank);
    Ok(kept)
}
