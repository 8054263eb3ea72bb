//! Partition heads, the dynamic-convolution mask branch and per-cell target
//! assignment.
//!
//! Cells are enumerated scale-major (finest grid first), then row-major
//! within a grid: row `k` of every per-cell output belongs to
//! [`cell_origins`]`[k]`.

use rand::Rng;

use crate::config::{ModelConfig, ENCODER_STAGES, MASK_STRIDE};
use crate::data_synth::SceneSample;
use crate::error::{Error, Result};
use crate::mask::SoftMask;
use crate::numerics::{concat, Conv2d, GroupNorm, ParamStore, Tape, Tensor, Var};
use crate::pyramid::{Encoder, PyramidFeatures};

/// Smallest instance size (√area, pixels) covered by the finest grid.
pub const MIN_OBJECT_SIDE: f64 = 8.0;
/// Initial positive rate of the partition heads; sets their bias.
pub const PRIOR_PROBABILITY: f64 = 0.01;
const FUSION_WIDTH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellOrigin {
    pub scale: usize,
    pub x: usize,
    pub y: usize,
}

pub fn cell_origins(sides: &[usize]) -> Vec<CellOrigin> {
    sides
        .iter()
        .enumerate()
        .flat_map(|(scale, &s)| (0..s * s).map(move |i| CellOrigin { scale, x: i % s, y: i / s }))
        .collect()
}

/// Row index of a cell in the scale-major, row-major enumeration.
pub fn cell_index(sides: &[usize], origin: CellOrigin) -> usize {
    let offset: usize = sides[..origin.scale].iter().map(|s| s * s).sum();
    offset + origin.y * sides[origin.scale] + origin.x
}

/// `K×N` partition probabilities with the origin of every row.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionMatrix {
    pub n: usize,
    pub probs: Vec<f64>,
    pub origins: Vec<CellOrigin>,
}

impl PartitionMatrix {
    pub fn new(n: usize, probs: Vec<f64>, origins: Vec<CellOrigin>) -> Result<Self> {
        if probs.len() != n * origins.len() {
            return Err(Error::dim("partition matrix", &[origins.len(), n], &[probs.len()]));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Data("partition probabilities must lie in [0,1]".into()));
        }
        Ok(Self { n, probs, origins })
    }

    pub fn from_tensor(t: &Tensor, origins: Vec<CellOrigin>) -> Result<Self> {
        if t.ndim() != 2 || t.shape()[0] != origins.len() {
            return Err(Error::dim("partition matrix", t.shape(), &[origins.len()]));
        }
        Self::new(t.shape()[1], t.data().to_vec(), origins)
    }

    pub fn rows(&self) -> usize {
        self.origins.len()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.probs[k * self.n..(k + 1) * self.n]
    }
}

/// Runs a conv shared by all scales on every grid and gathers the outputs
/// into `[K×C_out]` in cell order.
pub(crate) fn per_cell_conv<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    convs: &[Conv2d],
    f: &PyramidFeatures<'t>,
) -> Result<Var<'t>> {
    let mut per_scale = Vec::with_capacity(f.len());
    for g in &f.grids {
        let outs = convs
            .iter()
            .map(|c| c.forward(tape, store, g.data))
            .collect::<Result<Vec<_>>>()?;
        let y = if outs.len() == 1 { outs[0] } else { concat(&outs, 0)? };
        let c = y.shape()[0];
        per_scale.push(y.reshape(&[c, g.side * g.side])?);
    }
    let all = if per_scale.len() == 1 { per_scale[0] } else { concat(&per_scale, 1)? };
    all.permute(&[1, 0])
}

/// N independent `3×3, E→1` convolutions, each shared across scales.
#[derive(Clone, Debug)]
pub struct PartitionHeads {
    pub heads: Vec<Conv2d>,
}

impl PartitionHeads {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let prior_bias = -((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY).ln();
        let heads = (0..cfg.n)
            .map(|i| {
                let conv = Conv2d::new(store, &format!("partition.head{i}"), cfg.channels, 1, 3, 1, true, rng);
                store.tensor_mut(conv.weight).data_mut().iter_mut().for_each(|w| *w *= 0.1);
                store.tensor_mut(conv.bias.expect("bias")).data_mut()[0] = prior_bias;
                conv
            })
            .collect();
        Self { heads }
    }

    /// `[K×N]` probabilities.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, f: &PyramidFeatures<'t>) -> Result<Var<'t>> {
        Ok(per_cell_conv(tape, store, &self.heads, f)?.sigmoid())
    }
}

pub fn partition_forward<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    heads: &PartitionHeads,
    f: &PyramidFeatures<'t>,
) -> Result<PartitionMatrix> {
    let v = heads.forward(tape, store, f)?;
    PartitionMatrix::from_tensor(&v.value(), cell_origins(&f.sides()))
}

/// Global mask features and the per-cell dynamic kernel head.
///
/// The global map is built at `1/MASK_STRIDE` resolution from the image and
/// all encoder stages (each resized bilinearly), fused by
/// `1×1 conv → GN → ReLU → 1×1 conv` into `D` channels.
#[derive(Clone, Debug)]
pub struct MaskBranch {
    fuse_in: Conv2d,
    fuse_gn: GroupNorm,
    fuse_out: Conv2d,
    kernel_head: Conv2d,
    pub dim: usize,
}

/// On-tape mask branch outputs.
pub struct MaskOutputs<'t> {
    /// `[K×D]` dynamic kernels in cell order.
    pub kernels: Var<'t>,
    /// `[D×H_m×W_m]` global feature map.
    pub features: Var<'t>,
}

impl MaskBranch {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let widths = Encoder::stage_widths(cfg);
        let c_in = 3 + widths.iter().take(ENCODER_STAGES).sum::<usize>();
        let groups = if FUSION_WIDTH.is_multiple_of(cfg.gn_groups) { cfg.gn_groups } else { 1 };
        Ok(Self {
            fuse_in: Conv2d::new(store, "mask.fuse_in", c_in, FUSION_WIDTH, 1, 1, true, rng),
            fuse_gn: GroupNorm::new(store, "mask.fuse_gn", FUSION_WIDTH, groups)?,
            fuse_out: Conv2d::new(store, "mask.fuse_out", FUSION_WIDTH, cfg.mask_dim, 1, 1, true, rng),
            kernel_head: Conv2d::new(store, "mask.kernel", cfg.channels, cfg.mask_dim, 3, 1, true, rng),
            dim: cfg.mask_dim,
        })
    }

    pub fn global_features<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        image: Var<'t>,
        stages: &[Var<'t>],
    ) -> Result<Var<'t>> {
        let shape = image.shape();
        let target = (shape[1] / MASK_STRIDE, shape[2] / MASK_STRIDE);
        let mut parts = vec![image.interpolate(target)?];
        for s in stages {
            parts.push(s.interpolate(target)?);
        }
        let x = concat(&parts, 0)?;
        let x = self.fuse_in.forward(tape, store, x)?;
        let x = self.fuse_gn.forward(tape, store, x)?.relu();
        self.fuse_out.forward(tape, store, x)
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        f: &PyramidFeatures<'t>,
        image: Var<'t>,
        stages: &[Var<'t>],
    ) -> Result<MaskOutputs<'t>> {
        Ok(MaskOutputs {
            kernels: per_cell_conv(tape, store, std::slice::from_ref(&self.kernel_head), f)?,
            features: self.global_features(tape, store, image, stages)?,
        })
    }
}

impl<'t> MaskOutputs<'t> {
    /// Mask logits `[R×H_m×W_m]` for the selected cell rows.
    pub fn logits(&self, rows: &[usize]) -> Result<Var<'t>> {
        let fs = self.features.shape();
        let (d, h, w) = (fs[0], fs[1], fs[2]);
        let k = self.kernels.index_rows(rows)?;
        k.matmul(self.features.reshape(&[d, h * w])?)?.reshape(&[rows.len(), h, w])
    }

    /// One soft mask per cell, resampled to `size` before the sigmoid.
    pub fn soft_masks(&self, size: (usize, usize)) -> Result<Vec<SoftMask>> {
        let rows: Vec<usize> = (0..self.kernels.shape()[0]).collect();
        soft_masks_from_logits(&self.logits(&rows)?.value(), size)
    }
}

/// Upsamples `[K×h×w]` logits and applies the sigmoid per pixel.
pub fn soft_masks_from_logits(logits: &Tensor, size: (usize, usize)) -> Result<Vec<SoftMask>> {
    let tape = Tape::new();
    let up = tape.constant(logits.clone()).interpolate(size)?.sigmoid().value();
    let plane = size.0 * size.1;
    (0..logits.shape()[0])
        .map(|k| SoftMask::new(size.0, size.1, up.data()[k * plane..(k + 1) * plane].to_vec()))
        .collect()
}

pub fn mask_forward<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    branch: &MaskBranch,
    f: &PyramidFeatures<'t>,
    image: Var<'t>,
    stages: &[Var<'t>],
) -> Result<Vec<SoftMask>> {
    let shape = image.shape();
    branch.forward(tape, store, f, image, stages)?.soft_masks((shape[1], shape[2]))
}

/// √area boundaries `[8·(side/8)^(i/S)]`, `i = 0..=S`, finest scale first.
pub fn scale_edges(num_scales: usize, image_side: usize) -> Vec<f64> {
    let ratio = (image_side as f64 / MIN_OBJECT_SIDE).max(1.0);
    (0..=num_scales)
        .map(|i| MIN_OBJECT_SIDE * ratio.powf(i as f64 / num_scales as f64))
        .collect()
}

/// Scale whose √area range contains `size`; out-of-range sizes clamp.
pub fn scale_for_size(edges: &[f64], size: f64) -> usize {
    let s = edges.len() - 1;
    (1..s).take_while(|&i| size >= edges[i]).count().min(s - 1)
}

/// Cell along one axis containing `coord`; a coordinate on a boundary goes
/// to the lower cell.
pub fn cell_for_coord(coord: f64, extent: usize, side: usize) -> usize {
    let cell = extent as f64 / side as f64;
    ((coord / cell).ceil() as isize - 1).clamp(0, side as isize - 1) as usize
}

/// Instance index positive at every cell, or `None` for background.
///
/// When two instances claim one cell the larger keeps it.
pub fn assign_targets(sample: &SceneSample, sides: &[usize]) -> Result<Vec<Option<usize>>> {
    let (h, w) = (sample.height(), sample.width());
    let edges = scale_edges(sides.len(), h.min(w));
    let k: usize = sides.iter().map(|s| s * s).sum();
    let mut labels: Vec<Option<usize>> = vec![None; k];
    for (i, inst) in sample.instances.iter().enumerate() {
        let area = inst.mask.area();
        let (cx, cy) = inst
            .mask
            .centroid()
            .ok_or_else(|| Error::Data(format!("instance {i} has an empty mask")))?;
        let scale = scale_for_size(&edges, (area as f64).sqrt());
        let side = sides[scale];
        let origin = CellOrigin {
            scale,
            x: cell_for_coord(cx, w, side),
            y: cell_for_coord(cy, h, side),
        };
        let slot = &mut labels[cell_index(sides, origin)];
        match *slot {
            Some(j) if sample.instances[j].mask.area() >= area => {}
            _ => *slot = Some(i),
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::Instance;
    use crate::mask::BinaryMask;
    use crate::pyramid::{FeatureGrid, PyramidFeatures};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_pyramid<'t>(tape: &'t Tape, sides: &[usize], e: usize, seed: u64) -> PyramidFeatures<'t> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grids = sides
            .iter()
            .enumerate()
            .map(|(i, &s)| FeatureGrid {
                scale_index: i,
                side: s,
                channels: e,
                data: tape.var(Tensor::randn(&[e, s, s], 1.0, &mut rng)),
            })
            .collect();
        PyramidFeatures::new(grids).unwrap()
    }

    fn cfg(sides: Vec<usize>, n: usize, e: usize) -> ModelConfig {
        ModelConfig {
            n,
            channels: e,
            grid_sides: sides,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn origins_round_trip() {
        let sides = [4, 2, 1];
        let o = cell_origins(&sides);
        assert_eq!(o.len(), 21);
        assert_eq!(o[5], CellOrigin { scale: 0, x: 1, y: 1 });
        assert_eq!(o[16], CellOrigin { scale: 1, x: 0, y: 0 });
        for (k, &c) in o.iter().enumerate() {
            assert_eq!(cell_index(&sides, c), k);
        }
    }

    #[test]
    fn partition_shapes_and_range() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = cfg(vec![4, 2], 5, 8);
        let heads = PartitionHeads::new(&mut store, &c, &mut rng);
        let tape = Tape::new();
        let f = random_pyramid(&tape, &[4, 2], 8, 1);
        let p = partition_forward(&tape, &store, &heads, &f).unwrap();
        assert_eq!((p.rows(), p.n), (20, 5));
        assert!(p.probs.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_heads_give_half() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let heads = PartitionHeads::new(&mut store, &cfg(vec![3], 2, 4), &mut rng);
        store.iter_mut().for_each(|p| p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let tape = Tape::new();
        let f = random_pyramid(&tape, &[3], 4, 2);
        let p = partition_forward(&tape, &store, &heads, &f).unwrap();
        assert!(p.probs.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn heads_are_independent() {
        // perturbing head 1 only moves column 1
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let heads = PartitionHeads::new(&mut store, &cfg(vec![3], 3, 4), &mut rng);
        let tape = Tape::new();
        let f = random_pyramid(&tape, &[3], 4, 4);
        let before = partition_forward(&tape, &store, &heads, &f).unwrap();
        store.tensor_mut(heads.heads[1].bias.unwrap()).data_mut()[0] += 1.0;
        let after = partition_forward(&tape, &store, &heads, &f).unwrap();
        for k in 0..9 {
            assert_eq!(before.row(k)[0], after.row(k)[0]);
            assert_eq!(before.row(k)[2], after.row(k)[2]);
            assert!(after.row(k)[1] > before.row(k)[1]);
        }
    }

    #[test]
    fn per_cell_rows_follow_origins() {
        // kernel head = identity on channel 0 picks each cell's own value
        let mut store = ParamStore::new();
        let conv = Conv2d {
            weight: store.register("w", {
                let mut t = Tensor::zeros(&[1, 2, 3, 3]);
                t.set(&[0, 0, 1, 1], 1.0);
                t
            }),
            bias: None,
            stride: 1,
            padding: 1,
        };
        let tape = Tape::new();
        let sides = [3, 2];
        let grids = sides
            .iter()
            .enumerate()
            .map(|(i, &s)| FeatureGrid {
                scale_index: i,
                side: s,
                channels: 2,
                data: tape.constant(Tensor::from_fn(&[2, s, s], |j| {
                    let (y, x) = ((j / s) % s, j % s);
                    (i * 100 + y * 10 + x) as f64
                })),
            })
            .collect();
        let f = PyramidFeatures::new(grids).unwrap();
        let out = per_cell_conv(&tape, &store, &[conv], &f).unwrap().value();
        for (k, o) in cell_origins(&sides).iter().enumerate() {
            assert_eq!(out.data()[k], (o.scale * 100 + o.y * 10 + o.x) as f64);
        }
    }

    fn mask_setup(seed: u64) -> (ParamStore, MaskBranch, ModelConfig) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg(vec![4, 2], 3, 8);
        let b = MaskBranch::new(&mut store, &c, &mut rng).unwrap();
        (store, b, c)
    }

    fn fake_stages<'t>(tape: &'t Tape, c: &ModelConfig, side: usize, seed: u64) -> Vec<Var<'t>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Encoder::stage_widths(c)
            .iter()
            .enumerate()
            .map(|(i, &w)| tape.constant(Tensor::randn(&[w, side >> (i + 1), side >> (i + 1)], 1.0, &mut rng)))
            .collect()
    }

    #[test]
    fn mask_count_matches_partition_rows() {
        let (store, branch, c) = mask_setup(5);
        let tape = Tape::new();
        let f = random_pyramid(&tape, &[4, 2], 8, 6);
        let image = tape.constant(Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let stages = fake_stages(&tape, &c, 32, 7);
        let masks = mask_forward(&tape, &store, &branch, &f, image, &stages).unwrap();
        assert_eq!(masks.len(), 20);
        assert!(masks.iter().all(|m| (m.height, m.width) == (32, 32)));
        assert!(masks.iter().flat_map(|m| &m.data).all(|&v| (0.0..=1.0).contains(&v)));
        let out = branch.forward(&tape, &store, &f, image, &stages).unwrap();
        assert_eq!(out.features.shape(), vec![8, 8, 8]);
        assert_eq!(out.kernels.shape(), vec![20, 8]);
    }

    #[test]
    fn zero_kernel_gives_uniform_half() {
        let (mut store, branch, c) = mask_setup(8);
        let kw = branch.kernel_head.weight;
        store.tensor_mut(kw).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let tape = Tape::new();
        let f = random_pyramid(&tape, &[4, 2], 8, 9);
        let image = tape.constant(Tensor::full(&[3, 32, 32], 0.3));
        let stages = fake_stages(&tape, &c, 32, 10);
        let masks = mask_forward(&tape, &store, &branch, &f, image, &stages).unwrap();
        assert!(masks.iter().flat_map(|m| &m.data).all(|&v| v == 0.5));
    }

    fn sample_with(masks: Vec<BinaryMask>) -> SceneSample {
        let (h, w) = (masks[0].height, masks[0].width);
        SceneSample {
            seed: 0,
            image: Tensor::zeros(&[3, h, w]),
            instances: masks
                .into_iter()
                .enumerate()
                .map(|(i, mask)| Instance { mask, rank: i + 1 })
                .collect(),
        }
    }

    fn rect(y0: usize, x0: usize, hh: usize, ww: usize) -> BinaryMask {
        BinaryMask::from_fn(64, 64, |y, x| (y0..y0 + hh).contains(&y) && (x0..x0 + ww).contains(&x))
    }

    #[test]
    fn scale_edges_log_even() {
        let e = scale_edges(3, 64);
        for (a, b) in e.iter().zip([8.0, 16.0, 32.0, 64.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(scale_for_size(&e, 5.0), 0);
        assert_eq!(scale_for_size(&e, 16.0), 1);
        assert_eq!(scale_for_size(&e, 40.0), 2);
        assert_eq!(scale_for_size(&e, 90.0), 2);
    }

    #[test]
    fn single_centred_instance() {
        // √area = 20 lies in [16, 32): scale 1 (side 6)
        let s = sample_with(vec![rect(22, 22, 20, 20)]);
        let sides = [8, 6, 4];
        let labels = assign_targets(&s, &sides).unwrap();
        let pos: Vec<usize> = (0..labels.len()).filter(|&k| labels[k].is_some()).collect();
        assert_eq!(pos.len(), 1);
        // centroid 32.0 on a 64/6 grid: ceil(32/10.667) - 1 = 2
        assert_eq!(cell_origins(&sides)[pos[0]], CellOrigin { scale: 1, x: 2, y: 2 });
    }

    #[test]
    fn two_instances_two_cells() {
        let s = sample_with(vec![rect(2, 2, 12, 12), rect(30, 30, 30, 30)]);
        let sides = [8, 6, 4];
        let labels = assign_targets(&s, &sides).unwrap();
        let o = cell_origins(&sides);
        let pos: Vec<(usize, CellOrigin)> =
            labels.iter().enumerate().filter_map(|(k, l)| l.map(|i| (i, o[k]))).collect();
        assert_eq!(pos.len(), 2);
        assert_eq!(pos[0], (0, CellOrigin { scale: 0, x: 0, y: 0 }));
        assert_eq!(pos[1].0, 1);
        assert_eq!(pos[1].1.scale, 1);
    }

    #[test]
    fn boundary_centroid_goes_to_lower_cell() {
        // an 8×8 square at (4,4) has centroid (8.0, 8.0), on the first boundary of an 8-px grid
        let s = sample_with(vec![rect(4, 4, 8, 8)]);
        let sides = [8, 6, 4];
        let labels = assign_targets(&s, &sides).unwrap();
        let k = labels.iter().position(|l| l.is_some()).unwrap();
        assert_eq!(cell_origins(&sides)[k], CellOrigin { scale: 0, x: 0, y: 0 });
        assert_eq!(cell_for_coord(8.0, 64, 8), 0);
        assert_eq!(cell_for_coord(8.5, 64, 8), 1);
        assert_eq!(cell_for_coord(0.5, 64, 8), 0);
        assert_eq!(cell_for_coord(63.5, 64, 8), 7);
    }

    #[test]
    fn conflict_keeps_larger_instance() {
        // a 14-px bar (centroid 7, 7.5) and a 36-px square (centroid 3, 3) share cell (0,0)
        let s = sample_with(vec![rect(7, 0, 1, 14), rect(0, 0, 6, 6)]);
        let labels = assign_targets(&s, &[8, 6, 4]).unwrap();
        let owners: Vec<usize> = labels.iter().flatten().copied().collect();
        assert_eq!(owners, vec![1]);
        let s = sample_with(vec![rect(0, 0, 6, 6), rect(7, 0, 1, 14)]);
        let owners: Vec<usize> = assign_targets(&s, &[8, 6, 4]).unwrap().iter().flatten().copied().collect();
        assert_eq!(owners, vec![0]);
    }

    #[test]
    fn empty_instance_is_error() {
        let s = sample_with(vec![BinaryMask::empty(64, 64)]);
        assert!(matches!(assign_targets(&s, &[8, 6, 4]), Err(Error::Data(_))));
    }
}
