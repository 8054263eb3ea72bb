//! Synthetic scenes with deterministic saliency ranks, and their on-disk format.
//!
//! A scene is a textured grey background with `K` flat-coloured rectangles
//! or ellipses that do not touch. Each instance gets a saliency score
//!
//! ```text
//! score = contrast × area × proximity
//! contrast  = ‖mean RGB inside the mask − mean RGB of the background‖₂ / √3
//! area      = mask pixels / canvas pixels
//! proximity = 1 − ‖centroid − canvas centre‖₂ / (half canvas diagonal)
//! ```
//!
//! where the background is every pixel outside all masks. Rank 1 is the
//! highest score. Everything in the formula is measured from the stored
//! image and masks, so ranks can be re-derived from a saved sample.
//!
//! Layout: `manifest.json` plus `samples/<id>.json`. A sample holds its seed,
//! the image as base64 little-endian `f32` RGB triplets in row-major pixel
//! order (or as nested `[row][col][channel]` arrays), and per instance a
//! run-length encoding (alternating runs starting with background) and rank.

use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::numerics::Tensor;

pub const DATASET_VERSION: &str = "srank-dataset/1";
const MAX_LAYOUT_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub mask: BinaryMask,
    /// 1 is the most salient.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    /// `[3×H×W]`, values in `[0,1]`, each exactly representable as `f32`.
    pub image: Tensor,
    pub instances: Vec<Instance>,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub canvas: usize,
    pub n: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Minimum gap in pixels between instance bounding boxes.
    pub margin: usize,
    /// Adjacent scores must differ by at least this factor.
    pub min_score_ratio: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            canvas: 64,
            n: 3,
            min_instances: 1,
            max_instances: 3,
            min_size: 12,
            max_size: 30,
            margin: 3,
            min_score_ratio: 1.5,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas < 32 {
            return Err(Error::Config(format!("canvas must be at least 32, got {}", self.canvas)));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances || self.max_instances > self.n {
            return Err(Error::Config(format!(
                "instance count range {}..={} must be non-empty and within n = {}",
                self.min_instances, self.max_instances, self.n
            )));
        }
        if self.min_size < 2 || self.min_size > self.max_size || self.max_size + 2 * self.margin > self.canvas {
            return Err(Error::Config("instance size range does not fit the canvas".into()));
        }
        if self.min_score_ratio < 1.0 {
            return Err(Error::Config("min_score_ratio must be at least 1".into()));
        }
        Ok(())
    }
}

/// Saturated, mutually distinct instance colours.
const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.12, 0.10],
    [0.10, 0.75, 0.15],
    [0.12, 0.20, 0.92],
    [0.95, 0.85, 0.10],
    [0.85, 0.15, 0.85],
    [0.10, 0.85, 0.85],
    [0.98, 0.55, 0.05],
    [0.05, 0.05, 0.05],
];

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, Debug)]
struct Placement {
    shape: Shape,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

impl Placement {
    fn contains(&self, y: usize, x: usize) -> bool {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.w || y >= self.y0 + self.h {
            return false;
        }
        match self.shape {
            Shape::Rect => true,
            Shape::Ellipse => {
                let dx = (x as f64 + 0.5 - self.x0 as f64 - self.w as f64 / 2.0) / (self.w as f64 / 2.0);
                let dy = (y as f64 + 0.5 - self.y0 as f64 - self.h as f64 / 2.0) / (self.h as f64 / 2.0);
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    fn separated(&self, other: &Placement, margin: usize) -> bool {
        self.x0 >= other.x0 + other.w + margin
            || other.x0 >= self.x0 + self.w + margin
            || self.y0 >= other.y0 + other.h + margin
            || other.y0 >= self.y0 + self.h + margin
    }
}

/// Contrast, area and proximity terms of one instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaliencyTerms {
    pub contrast: f64,
    pub area: f64,
    pub proximity: f64,
}

impl SaliencyTerms {
    pub fn score(&self) -> f64 {
        self.contrast * self.area * self.proximity
    }
}

/// Measures the score terms of every mask against the given image.
pub fn saliency_terms(image: &Tensor, masks: &[&BinaryMask]) -> Result<Vec<SaliencyTerms>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut background = [0.0; 3];
    let mut bg_count = 0usize;
    for p in 0..plane {
        if masks.iter().all(|m| !m.data[p]) {
            for (c, b) in background.iter_mut().enumerate() {
                *b += image.data()[c * plane + p];
            }
            bg_count += 1;
        }
    }
    if bg_count == 0 {
        return Err(Error::Data("scene has no background pixels".into()));
    }
    background.iter_mut().for_each(|b| *b /= bg_count as f64);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let half_diag = (cx * cx + cy * cy).sqrt();
    masks
        .iter()
        .map(|m| {
            let area_px = m.area();
            if area_px == 0 {
                return Err(Error::Data("instance mask is empty".into()));
            }
            let mut mean = [0.0; 3];
            for p in (0..plane).filter(|&p| m.data[p]) {
                for (c, v) in mean.iter_mut().enumerate() {
                    *v += image.data()[c * plane + p];
                }
            }
            let dist2: f64 = mean
                .iter()
                .zip(&background)
                .map(|(m, b)| (m / area_px as f64 - b).powi(2))
                .sum();
            let (mx, my) = m.centroid().expect("non-empty");
            Ok(SaliencyTerms {
                contrast: (dist2 / 3.0).sqrt(),
                area: area_px as f64 / plane as f64,
                proximity: 1.0 - ((mx - cx).powi(2) + (my - cy).powi(2)).sqrt() / half_diag,
            })
        })
        .collect()
}

/// Ranks (1 = highest score) from scores; ties go to the lower index.
pub fn ranks_from_scores(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; scores.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

fn to_f32(v: f64) -> f64 {
    v as f32 as f64
}

pub fn generate_scene(cfg: &GenConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.canvas;
    let plane = s * s;

    // textured background: grey level, a diagonal grating and per-pixel noise
    let grey = rng.random_range(0.42..0.58);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.03..0.03));
    let (fx, fy, phase) = (
        rng.random_range(0.2..0.6),
        rng.random_range(0.2..0.6),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let mut image = vec![0.0; 3 * plane];
    for p in 0..plane {
        let (y, x) = ((p / s) as f64, (p % s) as f64);
        let wave = 0.05 * (fx * x + fy * y + phase).sin();
        for (c, t) in tint.iter().enumerate() {
            let noise = rng.random_range(-0.03..0.03);
            image[c * plane + p] = to_f32((grey + t + wave + noise).clamp(0.0, 1.0));
        }
    }

    let k = rng.random_range(cfg.min_instances..=cfg.max_instances);
    for _attempt in 0..MAX_LAYOUT_ATTEMPTS {
        let Some(placements) = place(cfg, k, &mut rng) else { continue };
        let mut palette: Vec<usize> = (0..PALETTE.len()).collect();
        let mut colors = Vec::with_capacity(k);
        for _ in 0..k {
            let pick = palette.swap_remove(rng.random_range(0..palette.len()));
            let base = PALETTE[pick];
            colors.push(base.map(|v| to_f32((v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0))));
        }
        let masks: Vec<BinaryMask> = placements
            .iter()
            .map(|pl| BinaryMask::from_fn(s, s, |y, x| pl.contains(y, x)))
            .collect();
        let mut img = image.clone();
        for (m, color) in masks.iter().zip(&colors) {
            for p in (0..plane).filter(|&p| m.data[p]) {
                for (c, v) in color.iter().enumerate() {
                    img[c * plane + p] = *v;
                }
            }
        }
        let img = Tensor::new(vec![3, s, s], img)?;
        let refs: Vec<&BinaryMask> = masks.iter().collect();
        let scores: Vec<f64> = saliency_terms(&img, &refs)?.iter().map(SaliencyTerms::score).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if sorted.windows(2).any(|w| w[0] < w[1] * cfg.min_score_ratio) || sorted.iter().any(|&v| v <= 0.0) {
            continue;
        }
        let ranks = ranks_from_scores(&scores);
        let instances = masks
            .into_iter()
            .zip(ranks)
            .map(|(mask, rank)| Instance { mask, rank })
            .collect();
        return Ok(SceneSample {
            seed,
            image: img,
            instances,
        });
    }
    Err(Error::Generation {
        seed,
        reason: format!("no valid layout of {k} instances after {MAX_LAYOUT_ATTEMPTS} attempts"),
    })
}

fn place(cfg: &GenConfig, k: usize, rng: &mut ChaCha8Rng) -> Option<Vec<Placement>> {
    let mut placed: Vec<Placement> = Vec::with_capacity(k);
    for _ in 0..k {
        let candidate = (0..MAX_LAYOUT_ATTEMPTS).find_map(|_| {
            let w = rng.random_range(cfg.min_size..=cfg.max_size);
            let h = rng.random_range(cfg.min_size..=cfg.max_size);
            let shape = if rng.random_bool(0.5) { Shape::Rect } else { Shape::Ellipse };
            let x0 = rng.random_range(cfg.margin..=cfg.canvas - cfg.margin - w);
            let y0 = rng.random_range(cfg.margin..=cfg.canvas - cfg.margin - h);
            let p = Placement { shape, x0, y0, w, h };
            placed.iter().all(|q| p.separated(q, cfg.margin)).then_some(p)
        })?;
        placed.push(candidate);
    }
    Some(placed)
}

/// Seed of the `index`-th sample generated from a dataset seed.
pub fn sample_seed(dataset_seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = dataset_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRef {
    pub id: String,
    pub file: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub n: usize,
    pub canvas: [usize; 2],
    pub count: usize,
    pub samples: Vec<SampleRef>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ImageEncoding {
    #[default]
    Base64F32,
    Nested,
}

/// Generates `train + test` scenes with seeds derived from `seed`.
pub fn generate_dataset(cfg: &GenConfig, train: usize, test: usize, seed: u64) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(train + test);
    for i in 0..train + test {
        samples.push(generate_scene(cfg, sample_seed(seed, i as u64))?);
    }
    let test_samples = samples.split_off(train);
    let refs = (0..train + test)
        .map(|i| SampleRef {
            id: format!("{i:06}"),
            file: format!("samples/{i:06}.json"),
            split: if i < train { Split::Train } else { Split::Test },
        })
        .collect();
    Ok(Dataset {
        manifest: DatasetManifest {
            version: DATASET_VERSION.into(),
            n: cfg.n,
            canvas: [cfg.canvas, cfg.canvas],
            count: train + test,
            samples: refs,
        },
        train: samples,
        test: test_samples,
    })
}

fn sample_json(s: &SceneSample, encoding: ImageEncoding) -> Value {
    let (h, w) = (s.height(), s.width());
    let plane = h * w;
    let image = match encoding {
        ImageEncoding::Base64F32 => {
            let mut bytes = Vec::with_capacity(plane * 12);
            for p in 0..plane {
                for c in 0..3 {
                    bytes.extend_from_slice(&(s.image.data()[c * plane + p] as f32).to_le_bytes());
                }
            }
            Value::String(B64.encode(bytes))
        }
        ImageEncoding::Nested => Value::Array(
            (0..h)
                .map(|y| {
                    Value::Array(
                        (0..w)
                            .map(|x| json!((0..3).map(|c| s.image.data()[c * plane + y * w + x] as f32).collect::<Vec<f32>>()))
                            .collect(),
                    )
                })
                .collect(),
        ),
    };
    json!({
        "seed": s.seed,
        "image": image,
        "instances": s.instances.iter().map(|i| json!({"rle": i.mask.to_rle(), "rank": i.rank})).collect::<Vec<_>>(),
    })
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    // serde_json's map is ordered by key, so output is byte-stable
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(ds: &Dataset, dir: &Path, encoding: ImageEncoding) -> Result<()> {
    let samples_dir = dir.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let all = ds.train.iter().chain(&ds.test);
    if ds.manifest.samples.len() != ds.train.len() + ds.test.len() {
        return Err(Error::Alignment {
            what: "manifest entries vs samples",
            left: ds.manifest.samples.len(),
            right: ds.train.len() + ds.test.len(),
        });
    }
    for (r, s) in ds.manifest.samples.iter().zip(all) {
        write_json(&dir.join(&r.file), &sample_json(s, encoding))?;
    }
    write_json(&dir.join("manifest.json"), &serde_json::to_value(&ds.manifest)?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstance {
    rle: Vec<usize>,
    rank: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSample {
    seed: u64,
    image: Value,
    instances: Vec<RawInstance>,
}

fn load_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn decode_image(path: &Path, value: &Value, h: usize, w: usize) -> Result<Tensor> {
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    match value {
        Value::String(s) => {
            let bytes = B64.decode(s).map_err(|e| load_error(path, format!("bad base64 image: {e}")))?;
            if bytes.len() != plane * 12 {
                return Err(load_error(path, format!("image has {} bytes, expected {}", bytes.len(), plane * 12)));
            }
            for (i, chunk) in bytes.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                data[(i % 3) * plane + i / 3] = v as f64;
            }
        }
        Value::Array(rows) => {
            let bad = || load_error(path, "nested image has the wrong shape");
            if rows.len() != h {
                return Err(bad());
            }
            for (y, row) in rows.iter().enumerate() {
                let row = row.as_array().filter(|r| r.len() == w).ok_or_else(bad)?;
                for (x, px) in row.iter().enumerate() {
                    let px = px.as_array().filter(|p| p.len() == 3).ok_or_else(bad)?;
                    for (c, v) in px.iter().enumerate() {
                        data[c * plane + y * w + x] = v.as_f64().ok_or_else(bad)? as f32 as f64;
                    }
                }
            }
        }
        _ => return Err(load_error(path, "image must be a base64 string or nested arrays")),
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn load_sample(path: &Path, h: usize, w: usize) -> Result<SceneSample> {
    let text = fs::read_to_string(path).map_err(|e| load_error(path, e.to_string()))?;
    let raw: RawSample = serde_json::from_str(&text).map_err(|e| load_error(path, e.to_string()))?;
    let image = decode_image(path, &raw.image, h, w)?;
    let instances = raw
        .instances
        .into_iter()
        .map(|ri| {
            let mask = BinaryMask::from_rle(h, w, &ri.rle).map_err(|e| load_error(path, e.to_string()))?;
            Ok(Instance { mask, rank: ri.rank })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneSample {
        seed: raw.seed,
        image,
        instances,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| load_error(&manifest_path, e.to_string()))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| load_error(&manifest_path, e.to_string()))?;
    if manifest.version != DATASET_VERSION {
        return Err(load_error(&manifest_path, format!("unsupported version {}", manifest.version)));
    }
    if manifest.count != manifest.samples.len() {
        return Err(load_error(
            &manifest_path,
            format!("count {} but {} sample entries", manifest.count, manifest.samples.len()),
        ));
    }
    let samples_dir = dir.join("samples");
    let present = fs::read_dir(&samples_dir)
        .map_err(|e| load_error(&samples_dir, e.to_string()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
        .count();
    if present != manifest.count {
        return Err(load_error(
            &samples_dir,
            format!("manifest lists {} samples but {present} files are present", manifest.count),
        ));
    }
    let [h, w] = manifest.canvas;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in &manifest.samples {
        let path: PathBuf = dir.join(&r.file);
        let sample = load_sample(&path, h, w)?;
        match r.split {
            Split::Train => train.push(sample),
            Split::Test => test.push(sample),
        }
    }
    Ok(Dataset { manifest, train, test })
}
