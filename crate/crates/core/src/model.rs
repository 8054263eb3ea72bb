//! The full network: encoder, positional encoding, dense pyramid
//! transformer, a ranking head and the mask branch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baseline::{class_targets, cross_entropy, sort_to_ranks, SortingHead};
use crate::config::{FocalParams, HeadKind, LossWeights, ModelConfig};
use crate::data_synth::SceneSample;
use crate::dpt::{Dpt, DptConfig};
use crate::error::Result;
use crate::heads::{cell_origins, soft_masks_from_logits, MaskBranch, MaskOutputs, PartitionHeads, PartitionMatrix};
use crate::losses::{build_targets, dice_loss, focal_loss, LossTerms, SampleTargets};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::p2r::{p2r, P2rParams, RankedInstance};
use crate::pyramid::{Encoder, PositionalEncoding, PyramidFeatures};

#[derive(Clone, Debug)]
pub enum RankHead {
    Partition(PartitionHeads),
    Sorting(SortingHead),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    encoder: Encoder,
    pe: PositionalEncoding,
    dpt: Dpt,
    head: RankHead,
    mask: MaskBranch,
}

pub struct ForwardOutputs<'t> {
    /// `[K×N]` partition probabilities or `[K×(N+1)]` class probabilities.
    pub head: Var<'t>,
    pub masks: MaskOutputs<'t>,
}

impl Model {
    /// Parameters are drawn from a ChaCha8 stream seeded by `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, cfg, &mut rng)?;
        let pe = PositionalEncoding::new(&mut store, cfg)?;
        let dpt_cfg = DptConfig::from(cfg);
        dpt_cfg.validate()?;
        let dpt = Dpt::new(&mut store, &dpt_cfg, &mut rng)?;
        let head = match cfg.head {
            HeadKind::Partition => RankHead::Partition(PartitionHeads::new(&mut store, cfg, &mut rng)),
            HeadKind::Sorting => RankHead::Sorting(SortingHead::new(&mut store, cfg, &mut rng)),
        };
        let mask = MaskBranch::new(&mut store, cfg, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            pe,
            dpt,
            head,
            mask,
        })
    }

    pub fn head(&self) -> &RankHead {
        &self.head
    }

    /// Transformer input (encoder grids plus positional encoding) and the
    /// raw encoder stages.
    pub fn encode<'t>(&self, tape: &'t Tape, image: Var<'t>) -> Result<(PyramidFeatures<'t>, Vec<Var<'t>>)> {
        let enc = self.encoder.encode(tape, &self.store, image)?;
        Ok((self.pe.apply(tape, &self.store, &enc.pyramid)?, enc.stages))
    }

    pub fn transform<'t>(&self, tape: &'t Tape, p: &PyramidFeatures<'t>) -> Result<PyramidFeatures<'t>> {
        self.dpt.forward(tape, &self.store, p)
    }

    /// Pyramid after the transformer plus the raw encoder stages.
    pub fn trunk<'t>(&self, tape: &'t Tape, image: Var<'t>) -> Result<(PyramidFeatures<'t>, Vec<Var<'t>>)> {
        let (p, stages) = self.encode(tape, image)?;
        Ok((self.transform(tape, &p)?, stages))
    }

    pub fn heads_from<'t>(
        &self,
        tape: &'t Tape,
        f: &PyramidFeatures<'t>,
        image: Var<'t>,
        stages: &[Var<'t>],
    ) -> Result<ForwardOutputs<'t>> {
        let head = match &self.head {
            RankHead::Partition(h) => h.forward(tape, &self.store, f)?,
            RankHead::Sorting(h) => h.forward(tape, &self.store, f)?,
        };
        Ok(ForwardOutputs {
            head,
            masks: self.mask.forward(tape, &self.store, f, image, stages)?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, image: &Tensor) -> Result<ForwardOutputs<'t>> {
        let image = tape.constant(image.clone());
        let (f, stages) = self.trunk(tape, image)?;
        self.heads_from(tape, &f, image, &stages)
    }

    pub fn targets(&self, sample: &SceneSample) -> Result<SampleTargets> {
        build_targets(sample, &self.cfg.grid_sides, self.cfg.n)
    }

    /// Ranking loss plus dice on the positive cells' masks.
    pub fn loss_from<'t>(
        &self,
        tape: &'t Tape,
        out: &ForwardOutputs<'t>,
        targets: &SampleTargets,
        weights: &LossWeights,
        focal: &FocalParams,
    ) -> Result<LossTerms<'t>> {
        let rank = match &self.head {
            RankHead::Partition(_) => focal_loss(out.head, &targets.partition, focal)?.scale(self.cfg.n as f64),
            RankHead::Sorting(_) => {
                let mut cell_ranks = vec![None; targets.labels.len()];
                for (&row, &r) in targets.positive_rows.iter().zip(&targets.positive_ranks) {
                    cell_ranks[row] = Some(r);
                }
                cross_entropy(out.head, &class_targets(&cell_ranks, self.cfg.n)?)?
            }
        };
        let mask = match &targets.masks {
            Some(t) => dice_loss(out.masks.logits(&targets.positive_rows)?.sigmoid(), t)?,
            None => tape.constant(Tensor::scalar(0.0)),
        };
        Ok(LossTerms {
            total: rank.scale(weights.partition).add(mask.scale(weights.mask))?,
            partition: rank,
            mask,
        })
    }

    pub fn loss<'t>(
        &self,
        tape: &'t Tape,
        sample: &SceneSample,
        targets: &SampleTargets,
        weights: &LossWeights,
        focal: &FocalParams,
    ) -> Result<LossTerms<'t>> {
        let out = self.forward(tape, &sample.image)?;
        self.loss_from(tape, &out, targets, weights, focal)
    }

    pub fn p2r_params(&self) -> P2rParams {
        P2rParams {
            n: self.cfg.n,
            threshold: self.cfg.partition_threshold,
            nms_iou: self.cfg.nms_iou,
            binarize: self.cfg.binarize_threshold,
            objectness_floor: self.cfg.objectness_floor,
        }
    }

    /// Ranked instances for one `[3×H×W]` image.
    pub fn predict(&self, image: &Tensor) -> Result<Vec<RankedInstance>> {
        let tape = Tape::new();
        let out = self.forward(&tape, image)?;
        let size = (image.shape()[1], image.shape()[2]);
        let origins = cell_origins(&self.cfg.grid_sides);
        let k = origins.len();
        let probs = out.head.value();
        match &self.head {
            RankHead::Partition(_) => {
                let p = PartitionMatrix::from_tensor(&probs, origins)?;
                // only rows that can survive association need full-size masks
                let rows: Vec<usize> = (0..k)
                    .filter(|&r| p.row(r).iter().any(|&v| v >= self.cfg.objectness_floor))
                    .collect();
                if rows.is_empty() {
                    return Ok(Vec::new());
                }
                let sub_probs: Vec<f64> = rows.iter().flat_map(|&r| p.row(r).to_vec()).collect();
                let sub = PartitionMatrix::new(p.n, sub_probs, rows.iter().map(|&r| p.origins[r]).collect())?;
                let masks = soft_masks_from_logits(&out.masks.logits(&rows)?.value(), size)?;
                // the filtered rows keep their relative order, so argmax ties
                // resolve as on the full matrix
                p2r(masks, &sub, &self.p2r_params())
            }
            RankHead::Sorting(_) => {
                let n = self.cfg.n;
                let rows: Vec<usize> = (0..k)
                    .filter(|&r| {
                        let row = &probs.data()[r * (n + 1)..(r + 1) * (n + 1)];
                        row[..n].iter().any(|&v| v > row[n])
                    })
                    .collect();
                let sub: Vec<f64> = rows
                    .iter()
                    .flat_map(|&r| probs.data()[r * (n + 1)..(r + 1) * (n + 1)].to_vec())
                    .collect();
                if rows.is_empty() {
                    return Ok(Vec::new());
                }
                let sub = Tensor::new(vec![rows.len(), n + 1], sub)?;
                let masks = soft_masks_from_logits(&out.masks.logits(&rows)?.value(), size)?;
                let o: Vec<_> = rows.iter().map(|&r| origins[r]).collect();
                sort_to_ranks(&sub, &masks, &o, self.cfg.nms_iou, self.cfg.binarize_threshold)
            }
        }
    }
}
