//! Partition-to-rank inference.
//!
//! Rows of the partition matrix are paired with their masks, rows with no
//! partition probability above the objectness floor are dropped, rows whose
//! thresholded partition indicators are not monotone are discarded, and
//! ranks are then read column by column: rank `n` goes to the live candidate
//! with the largest `v_n`, followed by mask NMS.

use crate::error::{Error, Result};
use crate::heads::{CellOrigin, PartitionMatrix};
use crate::mask::{mask_iou, BinaryMask, SoftMask};

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceCandidate {
    pub mask: SoftMask,
    pub partition: Vec<f64>,
    pub origin: CellOrigin,
    /// Row in the partition matrix; breaks argmax ties.
    pub row: usize,
    pub alive: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedInstance {
    pub mask: BinaryMask,
    pub rank: usize,
    pub score: f64,
    pub origin: CellOrigin,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct P2rParams {
    pub n: usize,
    pub threshold: f64,
    pub nms_iou: f64,
    pub binarize: f64,
    pub objectness_floor: f64,
}

impl Default for P2rParams {
    fn default() -> Self {
        Self {
            n: 5,
            threshold: 0.3,
            nms_iou: 0.5,
            binarize: 0.5,
            objectness_floor: 0.1,
        }
    }
}

pub fn binarize(m: &SoftMask, threshold: f64) -> BinaryMask {
    m.binarize(threshold)
}

pub fn associate(masks: Vec<SoftMask>, p: &PartitionMatrix, objectness_floor: f64) -> Result<Vec<InstanceCandidate>> {
    if masks.len() != p.rows() {
        return Err(Error::Alignment {
            what: "masks vs partition rows",
            left: masks.len(),
            right: p.rows(),
        });
    }
    Ok(masks
        .into_iter()
        .enumerate()
        .filter(|(k, _)| p.row(*k).iter().any(|&v| v >= objectness_floor))
        .map(|(k, mask)| InstanceCandidate {
            mask,
            partition: p.row(k).to_vec(),
            origin: p.origins[k],
            row: k,
            alive: true,
        })
        .collect())
}

/// True when some `j < i` has `v_j ≥ t` while `v_i < t`.
pub fn is_ambiguous(v: &[f64], t: f64) -> bool {
    let mut seen_above = false;
    for &x in v {
        if x >= t {
            seen_above = true;
        } else if seen_above {
            return true;
        }
    }
    false
}

pub fn alleviate(cands: Vec<InstanceCandidate>, t: f64) -> Vec<InstanceCandidate> {
    cands.into_iter().filter(|c| !is_ambiguous(&c.partition, t)).collect()
}

pub fn select_ranks(cands: &[InstanceCandidate], n: usize, t: f64, nms_iou: f64, binarize_at: f64) -> Vec<RankedInstance> {
    let binary: Vec<BinaryMask> = cands.iter().map(|c| c.mask.binarize(binarize_at)).collect();
    let mut alive: Vec<bool> = cands.iter().map(|c| c.alive).collect();
    let mut out = Vec::new();
    for col in 0..n {
        let best = (0..cands.len())
            .filter(|&i| alive[i])
            .max_by(|&a, &b| {
                cands[a].partition[col]
                    .total_cmp(&cands[b].partition[col])
                    .then(cands[b].row.cmp(&cands[a].row))
            });
        let Some(best) = best else { break };
        let score = cands[best].partition[col];
        if score < t {
            break;
        }
        alive[best] = false;
        for i in 0..cands.len() {
            if alive[i] && mask_iou(&binary[best], &binary[i]).unwrap_or(0.0) > nms_iou {
                alive[i] = false;
            }
        }
        out.push(RankedInstance {
            mask: binary[best].clone(),
            rank: col + 1,
            score,
            origin: cands[best].origin,
        });
    }
    out
}

/// Full inference from masks and the partition matrix.
pub fn p2r(masks: Vec<SoftMask>, p: &PartitionMatrix, params: &P2rParams) -> Result<Vec<RankedInstance>> {
    let cands = alleviate(associate(masks, p, params.objectness_floor)?, params.threshold);
    Ok(select_ranks(&cands, params.n, params.threshold, params.nms_iou, params.binarize))
}

/// Literal nested-loop re-implementation of alleviation plus selection,
/// kept independent of the production code for equivalence testing.
pub fn p2r_reference(cands: &[InstanceCandidate], n: usize, t: f64, nms_iou: f64, binarize_at: f64) -> Vec<RankedInstance> {
    let m = cands.len();
    let mut keep = vec![true; m];
    for c in 0..m {
        let v = &cands[c].partition;
        for i in 0..v.len() {
            for j in 0..i {
                if v[j] >= t && v[i] < t {
                    keep[c] = false;
                }
            }
        }
        if !cands[c].alive {
            keep[c] = false;
        }
    }
    let mut masks = Vec::new();
    for c in cands {
        let mut bits = Vec::new();
        for &v in &c.mask.data {
            bits.push(v >= binarize_at);
        }
        masks.push(bits);
    }
    let iou = |a: &Vec<bool>, b: &Vec<bool>| {
        let mut inter = 0.0;
        let mut union = 0.0;
        for p in 0..a.len() {
            if a[p] && b[p] {
                inter += 1.0;
            }
            if a[p] || b[p] {
                union += 1.0;
            }
        }
        if union == 0.0 {
            0.0
        } else {
            inter / union
        }
    };
    let mut result = Vec::new();
    let mut stopped = false;
    for col in 0..n {
        if stopped {
            continue;
        }
        let mut best: Option<usize> = None;
        for c in 0..m {
            if !keep[c] {
                continue;
            }
            match best {
                None => best = Some(c),
                Some(b) => {
                    let (vc, vb) = (cands[c].partition[col], cands[b].partition[col]);
                    if vc > vb || (vc == vb && cands[c].row < cands[b].row) {
                        best = Some(c);
                    }
                }
            }
        }
        match best {
            None => stopped = true,
            Some(b) if cands[b].partition[col] < t => stopped = true,
            Some(b) => {
                keep[b] = false;
                for c in 0..m {
                    if keep[c] && iou(&masks[b], &masks[c]) > nms_iou {
                        keep[c] = false;
                    }
                }
                result.push(RankedInstance {
                    mask: BinaryMask {
                        height: cands[b].mask.height,
                        width: cands[b].mask.width,
                        data: masks[b].clone(),
                    },
                    rank: col + 1,
                    score: cands[b].partition[col],
                    origin: cands[b].origin,
                });
            }
        }
    }
    result
}
