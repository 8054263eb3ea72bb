//! Instance matching, SOR, SA-SOR, MAE and the rank confusion matrix.
//!
//! SA-SOR correlates, over every ground-truth instance, the GT saliency
//! value `N − r + 1` with the value of the matched prediction, or 0 when the
//! instance was missed. MAE compares maps where a rank-`r` instance is
//! painted `(N − r + 1) / N` on a zero background.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mask::{mask_iou, BinaryMask};

pub const MATCH_IOU: f64 = 0.5;

/// A mask with its rank; 1 is the most salient.
#[derive(Clone, Copy, Debug)]
pub struct RankedMask<'a> {
    pub mask: &'a BinaryMask,
    pub rank: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    /// `(gt index, pred index, IoU)`
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
}

/// Greedy one-to-one matching by descending IoU among pairs at or above
/// `threshold`; equal IoUs resolve by `(gt, pred)` index.
pub fn match_instances(preds: &[&BinaryMask], gts: &[&BinaryMask], threshold: f64) -> Result<MatchResult> {
    let mut candidates = Vec::new();
    for (g, gm) in gts.iter().enumerate() {
        for (p, pm) in preds.iter().enumerate() {
            let iou = mask_iou(gm, pm)?;
            if iou >= threshold && iou > 0.0 {
                candidates.push((g, p, iou));
            }
        }
    }
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut gt_used = vec![false; gts.len()];
    let mut pred_used = vec![false; preds.len()];
    let mut pairs = Vec::new();
    for (g, p, iou) in candidates {
        if !gt_used[g] && !pred_used[p] {
            gt_used[g] = true;
            pred_used[p] = true;
            pairs.push((g, p, iou));
        }
    }
    pairs.sort_by_key(|&(g, p, _)| (g, p));
    Ok(MatchResult {
        pairs,
        unmatched_gt: (0..gts.len()).filter(|&g| !gt_used[g]).collect(),
        unmatched_pred: (0..preds.len()).filter(|&p| !pred_used[p]).collect(),
    })
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation; `None` for fewer than two points or a constant side.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let (mx, my) = (xs.iter().sum::<f64>() / n as f64, ys.iter().sum::<f64>() / n as f64);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() {
        return None;
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Spearman ρ between GT and predicted ranks over matched pairs.
pub fn sor(m: &MatchResult, preds: &[RankedMask], gts: &[RankedMask]) -> Option<f64> {
    let g: Vec<f64> = m.pairs.iter().map(|&(gi, _, _)| gts[gi].rank as f64).collect();
    let p: Vec<f64> = m.pairs.iter().map(|&(_, pi, _)| preds[pi].rank as f64).collect();
    spearman(&g, &p)
}

/// Saliency value of a rank: `N − r + 1`.
pub fn rank_value(rank: usize, n: usize) -> f64 {
    (n + 1).saturating_sub(rank) as f64
}

/// GT and predicted saliency values over all GT instances, misses at 0.
pub fn sa_sor_vectors(m: &MatchResult, preds: &[RankedMask], gts: &[RankedMask], n: usize) -> (Vec<f64>, Vec<f64>) {
    let g: Vec<f64> = gts.iter().map(|g| rank_value(g.rank, n)).collect();
    let mut p = vec![0.0; gts.len()];
    for &(gi, pi, _) in &m.pairs {
        p[gi] = rank_value(preds[pi].rank, n);
    }
    (g, p)
}

pub fn sa_sor(m: &MatchResult, preds: &[RankedMask], gts: &[RankedMask], n: usize) -> Option<f64> {
    let (g, p) = sa_sor_vectors(m, preds, gts, n);
    pearson(&g, &p)
}

/// Saliency map with rank-`r` pixels at `(N − r + 1)/N`, overlaps taking the max.
pub fn render(instances: &[RankedMask], n: usize, height: usize, width: usize) -> Vec<f64> {
    let mut map = vec![0.0; height * width];
    for inst in instances {
        let v = rank_value(inst.rank, n) / n as f64;
        for (px, &on) in map.iter_mut().zip(&inst.mask.data) {
            if on && v > *px {
                *px = v;
            }
        }
    }
    map
}

pub fn mae(preds: &[RankedMask], gts: &[RankedMask], n: usize, canvas: (usize, usize)) -> f64 {
    let a = render(preds, n, canvas.0, canvas.1);
    let b = render(gts, n, canvas.0, canvas.1);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n: usize,
    /// `counts[g-1][p-1]`: GT rank `g` predicted as rank `p`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn add(&mut self, gt_rank: usize, pred_rank: usize) {
        if (1..=self.n).contains(&gt_rank) && (1..=self.n).contains(&pred_rank) {
            self.counts[gt_rank - 1][pred_rank - 1] += 1;
        }
    }

    pub fn diagonal(&self) -> u64 {
        (0..self.n).map(|i| self.counts[i][i]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// Per-image scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub sor: Option<f64>,
    pub sa_sor: Option<f64>,
    pub mae: f64,
    /// Matched `(gt rank, pred rank)`.
    pub rank_pairs: Vec<(usize, usize)>,
}

pub fn evaluate_image(preds: &[RankedMask], gts: &[RankedMask], n: usize, canvas: (usize, usize)) -> Result<ImageMetrics> {
    let pm: Vec<&BinaryMask> = preds.iter().map(|p| p.mask).collect();
    let gm: Vec<&BinaryMask> = gts.iter().map(|g| g.mask).collect();
    let m = match_instances(&pm, &gm, MATCH_IOU)?;
    Ok(ImageMetrics {
        sor: sor(&m, preds, gts),
        sa_sor: sa_sor(&m, preds, gts, n),
        mae: mae(preds, gts, n, canvas),
        rank_pairs: m.pairs.iter().map(|&(g, p, _)| (gts[g].rank, preds[p].rank)).collect(),
    })
}

/// Dataset-level report. Undefined correlations serialize as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub sa_sor: Option<f64>,
    pub sor: Option<f64>,
    /// `(ρ + 1) / 2`, present only when requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sor_normalized: Option<f64>,
    pub images_evaluated: usize,
    pub images_excluded_sor: usize,
    pub images_excluded_sasor: usize,
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    mae_sum: f64,
    sor: Vec<f64>,
    sa_sor: Vec<f64>,
    images: usize,
    excluded_sor: usize,
    excluded_sasor: usize,
    confusion: ConfusionMatrix,
}

impl MetricAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            mae_sum: 0.0,
            sor: Vec::new(),
            sa_sor: Vec::new(),
            images: 0,
            excluded_sor: 0,
            excluded_sasor: 0,
            confusion: ConfusionMatrix::new(n),
        }
    }

    pub fn push(&mut self, m: &ImageMetrics) {
        self.images += 1;
        self.mae_sum += m.mae;
        match m.sor {
            Some(v) => self.sor.push(v),
            None => self.excluded_sor += 1,
        }
        match m.sa_sor {
            Some(v) => self.sa_sor.push(v),
            None => self.excluded_sasor += 1,
        }
        for &(g, p) in &m.rank_pairs {
            self.confusion.add(g, p);
        }
    }

    pub fn confusion(&self) -> &ConfusionMatrix {
        &self.confusion
    }

    pub fn finish(&self, normalize_sor: bool) -> MetricReport {
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let sor = mean(&self.sor);
        MetricReport {
            mae: if self.images == 0 { 0.0 } else { self.mae_sum / self.images as f64 },
            sa_sor: mean(&self.sa_sor),
            sor,
            sor_normalized: if normalize_sor { sor.map(|r| (r + 1.0) / 2.0) } else { None },
            images_evaluated: self.images,
            images_excluded_sor: self.excluded_sor,
            images_excluded_sasor: self.excluded_sasor,
            confusion: self.confusion.counts.clone(),
        }
    }
}

/// Textbook Spearman: per-element average rank by counting, then Pearson.
pub fn spearman_oracle(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&a| {
                let less = v.iter().filter(|&&b| b < a).count() as f64;
                let equal = v.iter().filter(|&&b| b == a).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    };
    pearson_oracle(&rank(xs), &rank(ys))
}

/// Textbook Pearson: `cov(x, y) / (σ_x σ_y)` with population moments.
pub fn pearson_oracle(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    if xs.len() < 2 || xs.len() != ys.len() {
        return None;
    }
    let ex = xs.iter().sum::<f64>() / n;
    let ey = ys.iter().sum::<f64>() / n;
    let cov = xs.iter().zip(ys).map(|(x, y)| (x - ex) * (y - ey)).sum::<f64>() / n;
    let vx = xs.iter().map(|x| (x - ex).powi(2)).sum::<f64>() / n;
    let vy = ys.iter().map(|y| (y - ey).powi(2)).sum::<f64>() / n;
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx.sqrt() * vy.sqrt()))
}
