//! Dense pyramid transformer.
//!
//! Each layer mixes features in three routes: attention along every row and
//! then every column of each grid, attention across scales at matching
//! locations (grids are bilinearly brought to the largest size and back),
//! and a residual `conv → LeakyReLU → conv` block. Group normalization
//! follows each route. Convolution and normalization weights are shared by
//! all scales; the three attention routes have separate weights.
//!
//! Scoring every pair of cells across all scales would cost `(S·H·W)²`
//! query–key products per layer; the three routes together cost
//! `S·H·W² + S·H²·W + S²·H·W`. [`count_attention_pairs`] evaluates both
//! counts and [`instrumented_pair_counts`] measures them on real forward
//! passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{concat, Conv2d, GroupNorm, Mhsa, PairCounter, ParamStore, Tape, Tensor, Var};
use crate::pyramid::PyramidFeatures;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DptConfig {
    pub layers: usize,
    pub conv_layers: usize,
    pub heads: usize,
    pub channels: usize,
    pub gn_groups: usize,
}

impl DptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads {} must divide channels {}",
                self.heads, self.channels
            )));
        }
        if self.gn_groups == 0 || !self.channels.is_multiple_of(self.gn_groups) {
            return Err(Error::Config(format!(
                "gn_groups {} must divide channels {}",
                self.gn_groups, self.channels
            )));
        }
        Ok(())
    }
}

impl From<&ModelConfig> for DptConfig {
    fn from(c: &ModelConfig) -> Self {
        Self {
            layers: c.dpt_layers,
            conv_layers: c.conv_layers,
            heads: c.heads,
            channels: c.channels,
            gn_groups: c.gn_groups,
        }
    }
}

fn each<'t>(
    grids: &[Var<'t>],
    f: impl Fn(Var<'t>) -> Result<Var<'t>>,
) -> Result<Vec<Var<'t>>> {
    grids.iter().map(|&g| f(g)).collect()
}

/// Harmonization: `ReLU(GN(Conv3×3(·)))`, repeated `conv_layers` times.
#[derive(Clone, Debug)]
pub struct Cgr {
    blocks: Vec<(Conv2d, GroupNorm)>,
}

impl Cgr {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &DptConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.conv_layers)
            .map(|i| {
                let e = cfg.channels;
                Ok((
                    Conv2d::new(store, &format!("cgr{i}.conv"), e, e, 3, 1, true, rng),
                    GroupNorm::new(store, &format!("cgr{i}.gn"), e, cfg.gn_groups)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        p: &PyramidFeatures<'t>,
    ) -> Result<PyramidFeatures<'t>> {
        let mut grids = p.vars();
        for (conv, gn) in &self.blocks {
            grids = each(&grids, |g| {
                Ok(gn.forward(tape, store, conv.forward(tape, store, g)?)?.relu())
            })?;
        }
        p.with_vars(grids)
    }
}

/// Which axis a sequence runs along in an `[E×H×W]` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Row,
    Column,
}

/// One transformer layer: row/column attention, cross-scale attention, CLCG.
#[derive(Clone, Debug)]
pub struct DptLayer {
    pub row: Mhsa,
    pub column: Mhsa,
    pub gn_axial: GroupNorm,
    pub cross: Mhsa,
    pub gn_cross: GroupNorm,
    pub clcg_conv1: Conv2d,
    pub clcg_conv2: Conv2d,
    pub gn_clcg: GroupNorm,
}

impl DptLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &DptConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (e, g, h) = (cfg.channels, cfg.gn_groups, cfg.heads);
        Ok(Self {
            row: Mhsa::new(store, &format!("{name}.row"), e, h, rng)?,
            column: Mhsa::new(store, &format!("{name}.column"), e, h, rng)?,
            gn_axial: GroupNorm::new(store, &format!("{name}.gn_axial"), e, g)?,
            cross: Mhsa::new(store, &format!("{name}.cross"), e, h, rng)?,
            gn_cross: GroupNorm::new(store, &format!("{name}.gn_cross"), e, g)?,
            clcg_conv1: Conv2d::new(store, &format!("{name}.clcg1"), e, e, 3, 1, true, rng),
            clcg_conv2: Conv2d::new(store, &format!("{name}.clcg2"), e, e, 3, 1, true, rng),
            gn_clcg: GroupNorm::new(store, &format!("{name}.gn_clcg"), e, g)?,
        })
    }

    /// `x + MHSA(x)` with sequences along `axis` of an `[E×H×W]` grid.
    pub fn axial_pass<'t>(
        tape: &'t Tape,
        store: &ParamStore,
        mhsa: &Mhsa,
        axis: Axis,
        x: Var<'t>,
    ) -> Result<Var<'t>> {
        // rows: batch over H, sequence over W; columns: batch over W, sequence over H
        let (to_seq, from_seq): (&[usize], &[usize]) = match axis {
            Axis::Row => (&[1, 2, 0], &[2, 0, 1]),
            Axis::Column => (&[2, 1, 0], &[2, 1, 0]),
        };
        let attended = mhsa.forward(tape, store, x.permute(to_seq)?)?.permute(from_seq)?;
        attended.add(x)
    }

    /// Row pass, column pass, then group norm (`F'`).
    pub fn row_column<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let r = Self::axial_pass(tape, store, &self.row, Axis::Row, x)?;
        let rc = Self::axial_pass(tape, store, &self.column, Axis::Column, r)?;
        self.gn_axial.forward(tape, store, rc)
    }

    /// Attention over the scale axis at each location of the largest grid,
    /// restored to every grid's own size, plus residual and group norm (`F''`).
    pub fn cross_scale<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        grids: &[Var<'t>],
    ) -> Result<Vec<Var<'t>>> {
        let shapes: Vec<Vec<usize>> = grids.iter().map(|g| g.shape()).collect();
        let first = shapes
            .first()
            .ok_or_else(|| Error::Config("cross-scale attention needs at least one scale".into()))?;
        let e = first[0];
        let th = shapes.iter().map(|s| s[1]).max().unwrap_or(1);
        let tw = shapes.iter().map(|s| s[2]).max().unwrap_or(1);
        let locations = th * tw;
        let stacked = grids
            .iter()
            .map(|&g| g.interpolate((th, tw))?.reshape(&[1, e, locations]))
            .collect::<Result<Vec<_>>>()?;
        // [S, E, P] → [P, S, E]: one length-S sequence per location
        let seq = concat(&stacked, 0)?.permute(&[2, 0, 1])?;
        let attended = self.cross.forward(tape, store, seq)?.permute(&[1, 2, 0])?;
        grids
            .iter()
            .zip(&shapes)
            .enumerate()
            .map(|(i, (&g, s))| {
                let back = attended
                    .narrow0(i, 1)?
                    .reshape(&[e, th, tw])?
                    .interpolate((s[1], s[2]))?;
                self.gn_cross.forward(tape, store, back.add(g)?)
            })
            .collect()
    }

    /// `GN(Conv(LeakyReLU(Conv(x))) + x)`
    pub fn clcg<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.clcg_conv1.forward(tape, store, x)?.leaky_relu(LEAKY_SLOPE);
        let h = self.clcg_conv2.forward(tape, store, h)?;
        self.gn_clcg.forward(tape, store, h.add(x)?)
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, grids: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let axial = each(grids, |g| self.row_column(tape, store, g))?;
        let crossed = self.cross_scale(tape, store, &axial)?;
        each(&crossed, |g| self.clcg(tape, store, g))
    }
}

#[derive(Clone, Debug)]
pub struct Dpt {
    pub layers: Vec<DptLayer>,
}

impl Dpt {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &DptConfig, rng: &mut R) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|i| DptLayer::new(store, &format!("dpt{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Applies every layer in sequence; zero layers is the identity.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        p: &PyramidFeatures<'t>,
    ) -> Result<PyramidFeatures<'t>> {
        let mut grids = p.vars();
        for layer in &self.layers {
            grids = layer.forward(tape, store, &grids)?;
        }
        p.with_vars(grids)
    }
}

/// Baseline: a single attention over the concatenation of every cell of
/// every scale, with residual and group norm.
#[derive(Clone, Debug)]
pub struct AllScaleAttention {
    pub mhsa: Mhsa,
    pub gn: GroupNorm,
}

impl AllScaleAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &DptConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            mhsa: Mhsa::new(store, "all_scale", cfg.channels, cfg.heads, rng)?,
            gn: GroupNorm::new(store, "all_scale.gn", cfg.channels, cfg.gn_groups)?,
        })
    }

    /// Number of tokens the attention sees.
    pub fn sequence_length(grids: &[Var<'_>]) -> usize {
        grids.iter().map(|g| g.shape()[1] * g.shape()[2]).sum()
    }

    pub fn forward_grids<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        grids: &[Var<'t>],
    ) -> Result<Vec<Var<'t>>> {
        let shapes: Vec<Vec<usize>> = grids.iter().map(|g| g.shape()).collect();
        let tokens = grids
            .iter()
            .zip(&shapes)
            .map(|(&g, s)| g.reshape(&[s[0], s[1] * s[2]])?.permute(&[1, 0]))
            .collect::<Result<Vec<_>>>()?;
        let seq = concat(&tokens, 0)?;
        let mixed = self.mhsa.forward(tape, store, seq)?.add(seq)?;
        let mut offset = 0;
        shapes
            .iter()
            .map(|s| {
                let n = s[1] * s[2];
                let part = mixed.narrow0(offset, n)?.permute(&[1, 0])?.reshape(s)?;
                offset += n;
                self.gn.forward(tape, store, part)
            })
            .collect()
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        p: &PyramidFeatures<'t>,
    ) -> Result<PyramidFeatures<'t>> {
        let out = self.forward_grids(tape, store, &p.vars())?;
        p.with_vars(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCountReport {
    pub s: u64,
    pub h: u64,
    pub w: u64,
    pub dpt_pairs: u64,
    pub all_scale_pairs: u64,
}

impl PairCountReport {
    pub fn ratio(&self) -> f64 {
        self.dpt_pairs as f64 / self.all_scale_pairs as f64
    }
}

/// Query–key pairs scored per layer by the three routes and by all-scale attention.
pub fn count_attention_pairs(s: u64, h: u64, w: u64) -> Result<PairCountReport> {
    if s == 0 || h == 0 || w == 0 {
        return Err(Error::Config("S, H and W must be at least 1".into()));
    }
    Ok(PairCountReport {
        s,
        h,
        w,
        dpt_pairs: s * h * w * w + s * h * h * w + s * s * h * w,
        all_scale_pairs: (s * h * w).pow(2),
    })
}

/// Runs one row/column + cross-scale pass and one all-scale pass over `s`
/// random `h×w` grids, counting scored query–key pairs.
pub fn instrumented_pair_counts(s: usize, h: usize, w: usize, seed: u64) -> Result<(u64, u64)> {
    let cfg = DptConfig {
        layers: 1,
        conv_layers: 0,
        heads: 1,
        channels: 4,
        gn_groups: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = DptLayer::new(&mut store, "probe", &cfg, &mut rng)?;
    let all = AllScaleAttention::new(&mut store, &cfg, &mut rng)?;
    let tape = Tape::new();
    let grids: Vec<Var<'_>> = (0..s)
        .map(|_| tape.constant(Tensor::randn(&[cfg.channels, h, w], 1.0, &mut rng)))
        .collect();

    let counter = PairCounter::start();
    layer.forward(&tape, &store, &grids)?;
    let dpt = counter.count();
    drop(counter);

    let counter = PairCounter::start();
    all.forward_grids(&tape, &store, &grids)?;
    Ok((dpt, counter.count()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layers::GN_EPS;

    fn cfg(e: usize) -> DptConfig {
        DptConfig {
            layers: 2,
            conv_layers: 2,
            heads: 2,
            channels: e,
            gn_groups: 2,
        }
    }

    fn rand_grid<'t>(tape: &'t Tape, e: usize, h: usize, w: usize, seed: u64) -> Var<'t> {
        tape.constant(Tensor::randn(&[e, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)))
    }

    fn zero_params(store: &mut ParamStore, prefix: &str) {
        for p in store.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.tensor.data_mut().fill(0.0);
        }
    }

    #[test]
    fn pair_count_examples() {
        let r = count_attention_pairs(2, 4, 4).unwrap();
        assert_eq!((r.dpt_pairs, r.all_scale_pairs), (320, 1024));
        assert_eq!(r.ratio(), 0.3125);
        let r = count_attention_pairs(1, 1, 1).unwrap();
        assert_eq!((r.dpt_pairs, r.all_scale_pairs), (3, 1));
        let r = count_attention_pairs(5, 12, 12).unwrap();
        // 5·12·144·2 + 25·144 = 17_280 + 3_600
        assert_eq!((r.dpt_pairs, r.all_scale_pairs), (20_880, 518_400));
        assert!(count_attention_pairs(0, 1, 1).is_err());
    }

    #[test]
    fn instrumented_counts_small_cases() {
        assert_eq!(instrumented_pair_counts(2, 4, 4, 0).unwrap(), (320, 1024));
        assert_eq!(instrumented_pair_counts(3, 2, 5, 0).unwrap(), {
            let r = count_attention_pairs(3, 2, 5).unwrap();
            (r.dpt_pairs, r.all_scale_pairs)
        });
    }

    #[test]
    fn cgr_preserves_shapes_and_zero_weights_give_zero() {
        let mut store = ParamStore::new();
        let c = cfg(8);
        let cgr = Cgr::new(&mut store, &c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tape = Tape::new();
        let p = PyramidFeatures::from_vars(&[rand_grid(&tape, 8, 5, 5, 1), rand_grid(&tape, 8, 3, 3, 2)]).unwrap();
        let out = cgr.forward(&tape, &store, &p).unwrap();
        assert_eq!(out.sides(), vec![5, 3]);
        assert_eq!(out.grids[0].data.shape(), vec![8, 5, 5]);

        zero_params(&mut store, "cgr");
        // zero conv output is constant, so GN yields beta = 0 regardless of gamma
        let out = cgr.forward(&tape, &store, &p).unwrap();
        assert!(out.vars().iter().all(|v| v.value().data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn row_column_singleton_grid() {
        let mut store = ParamStore::new();
        let layer = DptLayer::new(&mut store, "l", &cfg(4), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let tape = Tape::new();
        let x = rand_grid(&tape, 4, 1, 1, 5);
        let out = layer.row_column(&tape, &store, x).unwrap().value();

        // a length-1 sequence attends only to itself with weight 1
        let single = |input: &[f64], mhsa: &Mhsa| -> Vec<f64> {
            let (wv, bv) = mhsa.value_projection();
            let (wo, bo) = mhsa.output_projection();
            let affine = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
                (0..4).map(|j| b.data()[j] + (0..4).map(|i| x[i] * w.get(&[i, j])).sum::<f64>()).collect()
            };
            let v = affine(input, store.tensor(wv), store.tensor(bv));
            let o = affine(&v, store.tensor(wo), store.tensor(bo));
            input.iter().zip(o).map(|(a, b)| a + b).collect()
        };
        let r = single(x.value().data(), &layer.row);
        let rc = single(&r, &layer.column);
        // GN with 2 groups of 2 channels over one pixel
        let mut expected = vec![0.0; 4];
        for g in 0..2 {
            let seg = &rc[2 * g..2 * g + 2];
            let mean = (seg[0] + seg[1]) / 2.0;
            let var = ((seg[0] - mean).powi(2) + (seg[1] - mean).powi(2)) / 2.0;
            for c in 0..2 {
                expected[2 * g + c] = (seg[c] - mean) / (var + GN_EPS).sqrt();
            }
        }
        for (a, b) in out.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn row_column_preserves_shape() {
        let mut store = ParamStore::new();
        let layer = DptLayer::new(&mut store, "l", &cfg(8), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let tape = Tape::new();
        let out = layer.row_column(&tape, &store, rand_grid(&tape, 8, 6, 6, 1)).unwrap();
        assert_eq!(out.shape(), vec![8, 6, 6]);
    }

    #[test]
    fn transposed_grid_with_swapped_routes_transposes_output() {
        let mut store = ParamStore::new();
        let layer = DptLayer::new(&mut store, "l", &cfg(4), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let tape = Tape::new();
        let x = rand_grid(&tape, 4, 3, 3, 13);
        let reference = layer.row_column(&tape, &store, x).unwrap().permute(&[0, 2, 1]).unwrap();

        let xt = x.permute(&[0, 2, 1]).unwrap();
        // column weights along rows first, then row weights along columns
        let first = DptLayer::axial_pass(&tape, &store, &layer.row, Axis::Column, xt).unwrap();
        let second = DptLayer::axial_pass(&tape, &store, &layer.column, Axis::Row, first).unwrap();
        let mirrored = layer.gn_axial.forward(&tape, &store, second).unwrap();
        assert!(mirrored.value().max_abs_diff(&reference.value()) < 1e-12);
    }

    #[test]
    fn cross_scale_single_scale_and_shapes() {
        let mut store = ParamStore::new();
        let layer = DptLayer::new(&mut store, "l", &cfg(4), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let tape = Tape::new();
        let out = layer
            .cross_scale(&tape, &store, &[rand_grid(&tape, 4, 4, 4, 1), rand_grid(&tape, 4, 2, 2, 2)])
            .unwrap();
        assert_eq!(out[0].shape(), vec![4, 4, 4]);
        assert_eq!(out[1].shape(), vec![4, 2, 2]);

        // S = 1: each location is a length-1 sequence
        let x = rand_grid(&tape, 4, 3, 3, 4);
        let out = layer.cross_scale(&tape, &store, &[x]).unwrap()[0];
        let seq = x.reshape(&[1, 4, 9]).unwrap().permute(&[2, 0, 1]).unwrap();
        let (wv, bv) = layer.cross.value_projection();
        let (wo, bo) = layer.cross.output_projection();
        let v = seq.linear(tape.param(&store, wv), Some(tape.param(&store, bv))).unwrap();
        let o = v.linear(tape.param(&store, wo), Some(tape.param(&store, bo))).unwrap();
        let back = o.permute(&[1, 2, 0]).unwrap().reshape(&[4, 3, 3]).unwrap();
        let expected = layer.gn_cross.forward(&tape, &store, back.add(x).unwrap()).unwrap();
        assert!(out.value().max_abs_diff(&expected.value()) < 1e-12);
    }

    #[test]
    fn cross_scale_is_equivariant_to_scale_order() {
        let mut store = ParamStore::new();
        let layer = DptLayer::new(&mut store, "l", &cfg(4), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let tape = Tape::new();
        let grids: Vec<_> = (0..3).map(|i| rand_grid(&tape, 4, 3, 3, 20 + i)).collect();
        let out = layer.cross_scale(&tape, &store, &grids).unwrap();
        let perm = [2, 0, 1];
        let permuted: Vec<_> = perm.iter().map(|&i| grids[i]).collect();
        let out_p = layer.cross_scale(&tape, &store, &permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!(out_p[k].value().max_abs_diff(&out[i].value()) < 1e-12);
        }
    }

    #[test]
    fn clcg_zero_convs_leave_normalized_residual() {
        let mut store = ParamStore::new();
        let layer = DptLayer::new(&mut store, "l", &cfg(4), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        zero_params(&mut store, "l.clcg");
        let tape = Tape::new();
        let x = rand_grid(&tape, 4, 5, 5, 1);
        let out = layer.clcg(&tape, &store, x).unwrap();
        let expected = layer.gn_clcg.forward(&tape, &store, x).unwrap();
        assert!(out.value().max_abs_diff(&expected.value()) < 1e-15);
    }

    #[test]
    fn dpt_forward_shapes_and_identity() {
        let c = DptConfig { layers: 3, ..cfg(16) };
        let mut store = ParamStore::new();
        let dpt = Dpt::new(&mut store, &c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tape = Tape::new();
        let vars: Vec<_> = [8, 6, 4].iter().enumerate().map(|(i, &s)| rand_grid(&tape, 16, s, s, i as u64)).collect();
        let p = PyramidFeatures::from_vars(&vars).unwrap();
        let out = dpt.forward(&tape, &store, &p).unwrap();
        assert_eq!(out.sides(), vec![8, 6, 4]);
        assert!(out.vars().iter().all(|v| v.shape()[0] == 16 && v.value().is_finite()));

        let empty = Dpt::new(&mut ParamStore::new(), &DptConfig { layers: 0, ..c }, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let same = empty.forward(&tape, &store, &p).unwrap();
        for (a, b) in same.vars().iter().zip(&vars) {
            assert_eq!(*a.value(), *b.value());
        }
    }

    #[test]
    fn dpt_has_global_receptive_field() {
        let c = DptConfig { layers: 3, ..cfg(16) };
        let mut store = ParamStore::new();
        let dpt = Dpt::new(&mut store, &c, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let run = |bump: f64| {
            let tape = Tape::new();
            let mut coarse = Tensor::randn(&[16, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
            coarse.data_mut()[0] += bump;
            let vars = vec![
                tape.constant(Tensor::randn(&[16, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1))),
                tape.constant(Tensor::randn(&[16, 6, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(3))),
                tape.constant(coarse),
            ];
            let p = PyramidFeatures::from_vars(&vars).unwrap();
            let out = dpt.forward(&tape, &store, &p).unwrap();
            // far corner of the finest grid
            let fine = out.grids[0].data.value();
            (0..16).map(|ch| fine.get(&[ch, 7, 7])).collect::<Vec<_>>()
        };
        let (a, b) = (run(0.0), run(1.0));
        let change: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        assert!(change > 1e-6, "change {change}");
    }

    #[test]
    fn all_scale_sequence_and_shapes() {
        let c = cfg(4);
        let mut store = ParamStore::new();
        let all = AllScaleAttention::new(&mut store, &c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tape = Tape::new();
        let vars = vec![rand_grid(&tape, 4, 4, 4, 0), rand_grid(&tape, 4, 2, 2, 1)];
        assert_eq!(AllScaleAttention::sequence_length(&vars), 20);
        let counter = PairCounter::start();
        let out = all.forward(&tape, &store, &PyramidFeatures::from_vars(&vars).unwrap()).unwrap();
        assert_eq!(counter.count(), 400);
        assert_eq!(out.sides(), vec![4, 2]);
    }
}
