//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use saliency_rank::config::{FocalParams, LossWeights, ModelConfig};
use saliency_rank::data_synth::{generate_scene, GenConfig};
use saliency_rank::dpt::{Dpt, DptConfig};
use saliency_rank::model::Model;
use saliency_rank::numerics::gradcheck::project;
use saliency_rank::numerics::{concat, grad_check, Conv2d, GradCheckReport, GroupNorm, Mhsa, ParamStore, Tensor};
use saliency_rank::pyramid::PyramidFeatures;
use saliency_rank::Result;

pub const GRAD_TOL: f64 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `±[0.1, 1]`, away from the kinks of piecewise ops.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.1..1.0);
        if r.random_bool(0.5) { m } else { -m }
    })
}

pub fn positive(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 0.2, 2.0, &mut rng(seed))
}

pub fn normal(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Every differentiable op checked against central differences.
pub fn op_suite() -> Result<Vec<GradCheckReport>> {
    let t = GRAD_TOL;
    let mut r = Vec::new();
    let (a, b) = (normal(&[3, 4], 1), normal(&[3, 4], 2));
    r.push(grad_check("add", |_, v| project(v[0].add(v[1])?, 9), &[a.clone(), b.clone()], t)?);
    r.push(grad_check("sub", |_, v| project(v[0].sub(v[1])?, 9), &[a.clone(), b.clone()], t)?);
    r.push(grad_check("mul", |_, v| project(v[0].mul(v[1])?, 9), &[a.clone(), b.clone()], t)?);
    r.push(grad_check("scale", |_, v| project(v[0].scale(-1.7), 9), std::slice::from_ref(&a), t)?);
    r.push(grad_check("add_scalar", |_, v| project(v[0].add_scalar(0.3), 9), std::slice::from_ref(&a), t)?);
    r.push(grad_check("one_minus", |_, v| project(v[0].one_minus(), 9), std::slice::from_ref(&a), t)?);
    r.push(grad_check("square", |_, v| project(v[0].square(), 9), std::slice::from_ref(&a), t)?);
    r.push(grad_check("powf", |_, v| project(v[0].powf(2.5), 9), &[positive(&[3, 4], 3)], t)?);
    r.push(grad_check("ln", |_, v| project(v[0].ln(), 9), &[positive(&[3, 4], 4)], t)?);
    r.push(grad_check("exp", |_, v| project(v[0].exp(), 9), std::slice::from_ref(&a), t)?);
    r.push(grad_check("clamp", |_, v| project(v[0].clamp(-0.5, 0.55), 9), &[away_from_zero(&[3, 4], 5)], t)?);
    r.push(grad_check("sigmoid", |_, v| project(v[0].sigmoid(), 9), std::slice::from_ref(&a), t)?);
    r.push(grad_check("relu", |_, v| project(v[0].relu(), 9), &[away_from_zero(&[3, 4], 6)], t)?);
    r.push(grad_check("leaky_relu", |_, v| project(v[0].leaky_relu(0.01), 9), &[away_from_zero(&[3, 4], 7)], t)?);
    r.push(grad_check("sum", |_, v| Ok(v[0].sum()), std::slice::from_ref(&a), t)?);
    r.push(grad_check("mean", |_, v| Ok(v[0].mean()), std::slice::from_ref(&a), t)?);
    r.push(grad_check("reshape", |_, v| project(v[0].reshape(&[2, 6])?, 9), std::slice::from_ref(&a), t)?);
    let c3 = normal(&[2, 3, 4], 8);
    r.push(grad_check("permute", |_, v| project(v[0].permute(&[2, 0, 1])?, 9), std::slice::from_ref(&c3), t)?);
    r.push(grad_check("narrow0", |_, v| project(v[0].narrow0(1, 2)?, 9), std::slice::from_ref(&a), t)?);
    r.push(grad_check("index_rows", |_, v| project(v[0].index_rows(&[2, 0, 2])?, 9), std::slice::from_ref(&a), t)?);
    r.push(grad_check("concat", |_, v| project(concat(&[v[0], v[1]], 1)?, 9), &[a.clone(), normal(&[3, 2], 10)], t)?);
    r.push(grad_check("matmul", |_, v| project(v[0].matmul(v[1])?, 9), &[a.clone(), normal(&[4, 5], 11)], t)?);
    r.push(grad_check("add_row_bias", |_, v| project(v[0].add_row_bias(v[1])?, 9), &[a.clone(), normal(&[4], 12)], t)?);
    r.push(grad_check("add_channel_bias", |_, v| project(v[0].add_channel_bias(v[1])?, 9), &[c3.clone(), normal(&[2], 13)], t)?);
    r.push(grad_check(
        "linear",
        |_, v| project(v[0].linear(v[1], Some(v[2]))?, 9),
        &[c3.clone(), normal(&[4, 3], 14), normal(&[3], 15)],
        t,
    )?);
    r.push(grad_check("softmax", |_, v| project(v[0].softmax(1)?, 9), std::slice::from_ref(&a), t)?);
    let img = normal(&[2, 5, 6], 16);
    for stride in [1, 2] {
        r.push(grad_check(
            &format!("conv2d/stride{stride}"),
            |_, v| project(v[0].conv2d(v[1], Some(v[2]), stride, 1)?, 9),
            &[img.clone(), normal(&[3, 2, 3, 3], 17), normal(&[3], 18)],
            t,
        )?);
    }
    r.push(grad_check(
        "group_norm",
        |_, v| project(v[0].group_norm(2, v[1], v[2], 1e-5)?, 9),
        &[normal(&[4, 3, 3], 19), normal(&[4], 20), normal(&[4], 21)],
        t,
    )?);
    r.push(grad_check("interpolate/up", |_, v| project(v[0].interpolate((7, 5))?, 9), &[normal(&[2, 3, 4], 22)], t)?);
    r.push(grad_check("interpolate/down", |_, v| project(v[0].interpolate((2, 3))?, 9), &[normal(&[2, 5, 6], 23)], t)?);
    r.push(grad_check(
        "attention",
        |_, v| project(v[0].attention(v[1], v[2], 2)?, 9),
        &[normal(&[2, 3, 4], 24), normal(&[2, 3, 4], 25), normal(&[2, 3, 4], 26)],
        t,
    )?);
    Ok(r)
}

/// Layers with parameters held in a store, checked w.r.t. their input.
pub fn layer_suite() -> Result<Vec<GradCheckReport>> {
    let mut store = ParamStore::new();
    let mut g = rng(30);
    let conv = Conv2d::new(&mut store, "c", 2, 4, 3, 1, true, &mut g);
    let gn = GroupNorm::new(&mut store, "g", 4, 2)?;
    let mhsa = Mhsa::new(&mut store, "m", 4, 2, &mut g)?;
    Ok(vec![
        grad_check("Conv2d", |tape, v| project(conv.forward(tape, &store, v[0])?, 9), &[normal(&[2, 4, 4], 31)], GRAD_TOL)?,
        grad_check("GroupNorm", |tape, v| project(gn.forward(tape, &store, v[0])?, 9), &[normal(&[4, 3, 3], 32)], GRAD_TOL)?,
        grad_check("Mhsa", |tape, v| project(mhsa.forward(tape, &store, v[0])?, 9), &[normal(&[2, 5, 4], 33)], GRAD_TOL)?,
    ])
}

/// Transformer forward w.r.t. its 2-scale input at E = 8.
pub fn dpt_check() -> Result<GradCheckReport> {
    let cfg = DptConfig {
        layers: 1,
        conv_layers: 1,
        heads: 2,
        channels: 8,
        gn_groups: 2,
    };
    let mut store = ParamStore::new();
    let dpt = Dpt::new(&mut store, &cfg, &mut rng(40))?;
    grad_check(
        "dpt_forward",
        |tape, v| {
            let out = dpt.forward(tape, &store, &PyramidFeatures::from_vars(v)?)?;
            let parts: Vec<_> = out.vars().into_iter().map(|x| x.reshape(&[x.value().len()])).collect::<Result<_>>()?;
            project(concat(&parts, 0)?, 41)
        },
        &[normal(&[8, 4, 4], 42), normal(&[8, 2, 2], 43)],
        GRAD_TOL,
    )
}

/// Small full model for end-to-end checks: 2 scales, E = 8.
pub fn tiny_model(head: saliency_rank::config::HeadKind) -> Result<Model> {
    let cfg = ModelConfig {
        channels: 8,
        grid_sides: vec![4, 2],
        encoder_width: 8,
        heads: 2,
        gn_groups: 2,
        dpt_layers: 1,
        conv_layers: 1,
        mask_dim: 4,
        head,
        ..ModelConfig::toy()
    };
    Model::new(&cfg, 50)
}

/// Total loss (ranking focal + dice) w.r.t. the transformer input on one
/// synthetic image.
pub fn total_loss_check(head: saliency_rank::config::HeadKind) -> Result<GradCheckReport> {
    let model = tiny_model(head)?;
    let gen = GenConfig {
        canvas: 32,
        min_size: 8,
        max_size: 14,
        min_instances: 2,
        ..GenConfig::default()
    };
    let sample = generate_scene(&gen, 51)?;
    let targets = model.targets(&sample)?;
    let inputs: Vec<Tensor> = {
        let tape = saliency_rank::numerics::Tape::new();
        let (p, _) = model.encode(&tape, tape.constant(sample.image.clone()))?;
        p.vars().iter().map(|v| (*v.value()).clone()).collect()
    };
    grad_check(
        &format!("total_loss/{head}"),
        |tape, v| {
            let image = tape.constant(sample.image.clone());
            let (p, stages) = model.encode(tape, image)?;
            let f = model.transform(tape, &p.with_vars(v.to_vec())?)?;
            let out = model.heads_from(tape, &f, image, &stages)?;
            Ok(model.loss_from(tape, &out, &targets, &LossWeights::default(), &FocalParams::default())?.total)
        },
        &inputs,
        GRAD_TOL,
    )
}

/// Mask logits `kernels · features` w.r.t. both the dynamic kernels and
/// the global feature map.
pub fn mask_kernel_check() -> Result<GradCheckReport> {
    grad_check(
        "mask_kernels",
        |_, v| {
            let feats = v[1].reshape(&[4, 36])?;
            let probs = v[0].index_rows(&[1, 3])?.matmul(feats)?.sigmoid();
            project(probs, 60)
        },
        &[normal(&[5, 4], 61), normal(&[4, 6, 6], 62)],
        GRAD_TOL,
    )
}

/// Everything the gradient criterion covers.
pub fn full_gradient_suite() -> Result<Vec<GradCheckReport>> {
    use saliency_rank::config::HeadKind;
    let mut r = op_suite()?;
    r.extend(layer_suite()?);
    r.push(dpt_check()?);
    r.push(mask_kernel_check()?);
    r.push(total_loss_check(HeadKind::Partition)?);
    r.push(total_loss_check(HeadKind::Sorting)?);
    Ok(r)
}

// ---- partition-to-rank ----------------------------------------------------

use saliency_rank::heads::{cell_origins, PartitionMatrix};
use saliency_rank::mask::SoftMask;
use saliency_rank::p2r::{is_ambiguous, InstanceCandidate};

/// A random P2R input: up to `max_cands` 8×8 soft masks drawn as noisy
/// rectangles (so NMS has overlaps to resolve) and an `[M×n]` partition
/// matrix mixing monotone, ambiguous and tied rows.
pub fn random_p2r_case(seed: u64, max_cands: usize, n: usize) -> (Vec<SoftMask>, PartitionMatrix) {
    let mut r = rng(seed);
    let m = r.random_range(0..=max_cands);
    let mut masks = Vec::with_capacity(m);
    let mut probs = Vec::with_capacity(m * n);
    let levels = [0.05, 0.2, 0.3, 0.5, 0.7, 0.9];
    for _ in 0..m {
        let (x0, y0) = (r.random_range(0..6), r.random_range(0..6));
        let (w, h) = (r.random_range(2..=8 - x0), r.random_range(2..=8 - y0));
        let data = (0..64)
            .map(|i| {
                let (y, x) = (i / 8, i % 8);
                let inside = x >= x0 && x < x0 + w && y >= y0 && y < y0 + h;
                let base: f64 = if inside { 0.8 } else { 0.1 };
                (base + r.random_range(-0.1..0.1)).clamp(0.0, 1.0)
            })
            .collect();
        masks.push(SoftMask::new(8, 8, data).expect("8x8"));
        match r.random_range(0..3) {
            // monotone: a rank's prefix of low values then high values
            0 => {
                let start = r.random_range(0..=n);
                let mut v: Vec<f64> = (0..n).map(|i| if i < start { r.random_range(0.0..0.3) } else { r.random_range(0.3..1.0) }).collect();
                v.iter_mut().skip(start).fold(0.0, |acc: f64, x| {
                    *x = x.max(acc);
                    *x
                });
                probs.extend(v);
            }
            // coarse levels so equal values (ties) are common
            1 => probs.extend((0..n).map(|_| levels[r.random_range(0..levels.len())])),
            _ => probs.extend((0..n).map(|_| r.random_range(0.0..1.0))),
        }
    }
    let origins = cell_origins(&vec![1; m]);
    (masks, PartitionMatrix::new(n, probs, origins).expect("shape"))
}

/// Candidates built directly from a case, without going through `associate`.
pub fn candidates(masks: &[SoftMask], p: &PartitionMatrix) -> Vec<InstanceCandidate> {
    masks
        .iter()
        .enumerate()
        .map(|(k, m)| InstanceCandidate {
            mask: m.clone(),
            partition: p.row(k).to_vec(),
            origin: p.origins[k],
            row: k,
            alive: true,
        })
        .collect()
}

pub struct AlleviationStats {
    pub vectors: usize,
    pub survivors: usize,
    pub discarded: usize,
    pub violations: usize,
}

/// Checks that survivors are monotone once thresholded and discards carry a
/// witnessing pair `j < i` with `v_j ≥ t > v_i`.
pub fn alleviation_invariant(count: usize, n: usize, t: f64, seed: u64) -> AlleviationStats {
    let mut r = rng(seed);
    let mut s = AlleviationStats {
        vectors: count,
        survivors: 0,
        discarded: 0,
        violations: 0,
    };
    for _ in 0..count {
        let v: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let ind: Vec<bool> = v.iter().map(|&x| x >= t).collect();
        let witness = (0..n).any(|i| (0..i).any(|j| v[j] >= t && v[i] < t));
        if is_ambiguous(&v, t) {
            s.discarded += 1;
            if !witness {
                s.violations += 1;
            }
        } else {
            s.survivors += 1;
            // survivor indicator must never fall from true back to false
            if ind.windows(2).any(|w| w[0] && !w[1]) {
                s.violations += 1;
            }
        }
    }
    s
}

// ---- metric oracles ----------------------------------------------------

/// Average ranks by counting: `#smaller + (#equal + 1) / 2`.
pub fn ranks_by_counting(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let less = xs.iter().filter(|&&y| y < x).count() as f64;
            let eq = xs.iter().filter(|&&y| y == x).count() as f64;
            less + (eq + 1.0) / 2.0
        })
        .collect()
}

/// Textbook sample correlation from centred sums.
pub fn pearson_textbook(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if xs.len() < 2 || sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

pub fn spearman_textbook(xs: &[f64], ys: &[f64]) -> Option<f64> {
    pearson_textbook(&ranks_by_counting(xs), &ranks_by_counting(ys))
}

/// Random integer rank vectors of length 2..=8 with frequent ties.
pub fn random_rank_pair(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let len = r.random_range(2..=8);
    let hi = r.random_range(1..=5);
    let mut draw = || (0..len).map(|_| r.random_range(0..=hi) as f64).collect::<Vec<_>>();
    (draw(), draw())
}

pub struct OracleComparison {
    pub cases: usize,
    pub max_diff: f64,
    pub definedness_mismatches: usize,
}

pub fn compare_correlations(cases: usize, seed: u64) -> OracleComparison {
    use saliency_rank::metrics::{pearson, spearman};
    let mut out = OracleComparison {
        cases,
        max_diff: 0.0,
        definedness_mismatches: 0,
    };
    for i in 0..cases as u64 {
        let (a, b) = random_rank_pair(seed.wrapping_add(i));
        for (got, want) in [(spearman(&a, &b), spearman_textbook(&a, &b)), (pearson(&a, &b), pearson_textbook(&a, &b))] {
            match (got, want) {
                (Some(g), Some(w)) => out.max_diff = out.max_diff.max((g - w).abs()),
                (None, None) => {}
                _ => out.definedness_mismatches += 1,
            }
        }
    }
    out
}

// ---- synthetic data ----------------------------------------------------

use saliency_rank::data_synth::SceneSample;

/// Recomputes every instance's score straight from the pixels and returns
/// the implied ranks (descending score).
pub fn recompute_ranks(s: &SceneSample) -> Vec<usize> {
    let (h, w) = (s.height(), s.width());
    let px = |c: usize, y: usize, x: usize| s.image.data()[(c * h + y) * w + x];
    let in_any = |y: usize, x: usize| s.instances.iter().any(|i| i.mask.data[y * w + x]);
    let mut bg = [0.0; 3];
    let mut nbg = 0.0;
    for y in 0..h {
        for x in 0..w {
            if !in_any(y, x) {
                for (c, b) in bg.iter_mut().enumerate() {
                    *b += px(c, y, x);
                }
                nbg += 1.0;
            }
        }
    }
    let scores: Vec<f64> = s
        .instances
        .iter()
        .map(|inst| {
            let (mut sum, mut n, mut sx, mut sy) = ([0.0; 3], 0.0, 0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    if inst.mask.data[y * w + x] {
                        for (c, v) in sum.iter_mut().enumerate() {
                            *v += px(c, y, x);
                        }
                        n += 1.0;
                        sx += x as f64 + 0.5;
                        sy += y as f64 + 0.5;
                    }
                }
            }
            let contrast = ((0..3).map(|c| (sum[c] / n - bg[c] / nbg).powi(2)).sum::<f64>() / 3.0).sqrt();
            let area = n / (h * w) as f64;
            let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
            let d = ((sx / n - cx).powi(2) + (sy / n - cy).powi(2)).sqrt();
            contrast * area * (1.0 - d / (cx * cx + cy * cy).sqrt())
        })
        .collect();
    scores
        .iter()
        .map(|&v| 1 + scores.iter().filter(|&&u| u > v).count())
        .collect()
}

/// Pairwise disjointness, bounds, rank prefix and non-empty masks.
pub fn scene_is_valid(s: &SceneSample, n: usize) -> bool {
    let (h, w) = (s.height(), s.width());
    let k = s.instances.len();
    let mut ranks: Vec<usize> = s.instances.iter().map(|i| i.rank).collect();
    ranks.sort_unstable();
    let prefix = ranks == (1..=k).collect::<Vec<_>>() && k <= n;
    let shaped = s.instances.iter().all(|i| i.mask.height == h && i.mask.width == w && !i.mask.is_empty());
    let disjoint = (0..h * w).all(|p| s.instances.iter().filter(|i| i.mask.data[p]).count() <= 1);
    let in_range = s.image.data().iter().all(|v| (0.0..=1.0).contains(v));
    prefix && shaped && disjoint && in_range
}

// ---- training ------------------------------------------------------------

use saliency_rank::config::TrainConfig;
use saliency_rank::train::overfit;

/// Loss trajectory of the toy preset overfitting one fixed image.
pub fn overfit_curve(steps: usize) -> Result<Vec<f64>> {
    let sample = generate_scene(&GenConfig::default(), 2024)?;
    overfit(&TrainConfig::toy(), &[sample], steps)
}

/// Relative drop from the first to the last value.
pub fn relative_drop(curve: &[f64]) -> f64 {
    1.0 - curve[curve.len() - 1] / curve[0]
}
