//! Python bindings. Images and masks cross the boundary as flat row-major
//! lists with explicit shapes; structured results come back as dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use saliency_rank::config::{FocalParams, TrainConfig};
use saliency_rank::data_synth::{self, GenConfig, ImageEncoding, SceneSample};
use saliency_rank::heads::{cell_origins, PartitionMatrix};
use saliency_rank::mask::{BinaryMask, SoftMask};
use saliency_rank::metrics::{self, RankedMask};
use saliency_rank::numerics::Tensor;
use saliency_rank::p2r::{self as p2r_mod, P2rParams, RankedInstance};
use saliency_rank::train::{Checkpoint, Trainer};
use saliency_rank::{dpt, eval, losses, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Load { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn train_config(json: Option<&str>) -> PyResult<TrainConfig> {
    match json {
        Some(s) => serde_json::from_str(s).map_err(json_err),
        None => Ok(TrainConfig::toy()),
    }
}

/// A generated scene: `image` is `[3, H, W]` flattened, masks are `[H, W]` flattened.
#[pyclass(name = "Scene", frozen, get_all)]
struct PyScene {
    seed: u64,
    height: usize,
    width: usize,
    image: Vec<f64>,
    masks: Vec<Vec<bool>>,
    ranks: Vec<usize>,
}

impl From<&SceneSample> for PyScene {
    fn from(s: &SceneSample) -> Self {
        Self {
            seed: s.seed,
            height: s.height(),
            width: s.width(),
            image: s.image.data().to_vec(),
            masks: s.instances.iter().map(|i| i.mask.data.clone()).collect(),
            ranks: s.instances.iter().map(|i| i.rank).collect(),
        }
    }
}

#[pymethods]
impl PyScene {
    fn __repr__(&self) -> String {
        format!("Scene(seed={}, {}x{}, instances={})", self.seed, self.height, self.width, self.ranks.len())
    }
}

fn instances_to_py<'py>(py: Python<'py>, r: &[RankedInstance]) -> PyResult<Vec<Bound<'py, PyDict>>> {
    r.iter()
        .map(|i| {
            let d = PyDict::new(py);
            d.set_item("rank", i.rank)?;
            d.set_item("score", i.score)?;
            d.set_item("mask", i.mask.data.clone())?;
            d.set_item("origin", (i.origin.scale, i.origin.x, i.origin.y))?;
            Ok(d)
        })
        .collect()
}

/// Generates one synthetic scene with the default generator settings.
#[pyfunction]
#[pyo3(signature = (seed, n=3, canvas=64))]
fn generate_scene(seed: u64, n: usize, canvas: usize) -> PyResult<PyScene> {
    let cfg = GenConfig {
        n,
        canvas,
        max_instances: GenConfig::default().max_instances.min(n),
        ..GenConfig::default()
    };
    Ok(PyScene::from(&data_synth::generate_scene(&cfg, seed).map_err(to_py)?))
}

/// Writes a dataset directory and returns the sample count.
#[pyfunction]
#[pyo3(signature = (out_dir, train=200, test=50, seed=0, n=3, nested=false))]
fn generate_dataset(out_dir: PathBuf, train: usize, test: usize, seed: u64, n: usize, nested: bool) -> PyResult<usize> {
    let cfg = GenConfig {
        n,
        max_instances: GenConfig::default().max_instances.min(n),
        ..GenConfig::default()
    };
    let ds = data_synth::generate_dataset(&cfg, train, test, seed).map_err(to_py)?;
    let enc = if nested { ImageEncoding::Nested } else { ImageEncoding::Base64F32 };
    data_synth::save_dataset(&ds, &out_dir, enc).map_err(to_py)?;
    Ok(ds.manifest.count)
}

/// Loads a dataset directory as `(train, test)` scene lists.
#[pyfunction]
fn load_dataset(dir: PathBuf) -> PyResult<(Vec<PyScene>, Vec<PyScene>)> {
    let ds = data_synth::load_dataset(&dir).map_err(to_py)?;
    Ok((ds.train.iter().map(PyScene::from).collect(), ds.test.iter().map(PyScene::from).collect()))
}

#[pyfunction]
fn encode_partition_gt(rank: usize, n: usize) -> PyResult<Vec<bool>> {
    losses::encode_partition_gt(rank, n).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (p, target, alpha=0.25, gamma=2.0))]
fn focal_value(p: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    losses::focal_value(p, target, &FocalParams { alpha, gamma })
}

/// Analytic pair counts for S scales of H×W as a dict.
#[pyfunction]
fn count_attention_pairs<'py>(py: Python<'py>, s: u64, h: u64, w: u64) -> PyResult<Bound<'py, PyDict>> {
    let r = dpt::count_attention_pairs(s, h, w).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("dpt_pairs", r.dpt_pairs)?;
    d.set_item("all_scale_pairs", r.all_scale_pairs)?;
    d.set_item("ratio", r.ratio())?;
    Ok(d)
}

#[pyfunction]
fn spearman(xs: Vec<f64>, ys: Vec<f64>) -> Option<f64> {
    metrics::spearman(&xs, &ys)
}

#[pyfunction]
fn pearson(xs: Vec<f64>, ys: Vec<f64>) -> Option<f64> {
    metrics::pearson(&xs, &ys)
}

fn binary_masks(masks: Vec<Vec<bool>>, h: usize, w: usize) -> PyResult<Vec<BinaryMask>> {
    masks
        .into_iter()
        .map(|data| {
            if data.len() != h * w {
                return Err(PyValueError::new_err(format!("mask has {} pixels, expected {}", data.len(), h * w)));
            }
            Ok(BinaryMask { height: h, width: w, data })
        })
        .collect()
}

/// SOR, SA-SOR and MAE for one image; masks are flattened `[H, W]` booleans.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn evaluate_image<'py>(
    py: Python<'py>,
    pred_masks: Vec<Vec<bool>>,
    pred_ranks: Vec<usize>,
    gt_masks: Vec<Vec<bool>>,
    gt_ranks: Vec<usize>,
    n: usize,
    height: usize,
    width: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let pm = binary_masks(pred_masks, height, width)?;
    let gm = binary_masks(gt_masks, height, width)?;
    if pm.len() != pred_ranks.len() || gm.len() != gt_ranks.len() {
        return Err(PyValueError::new_err("each mask needs exactly one rank"));
    }
    let pv: Vec<RankedMask> = pm.iter().zip(&pred_ranks).map(|(m, &rank)| RankedMask { mask: m, rank }).collect();
    let gv: Vec<RankedMask> = gm.iter().zip(&gt_ranks).map(|(m, &rank)| RankedMask { mask: m, rank }).collect();
    let r = metrics::evaluate_image(&pv, &gv, n, (height, width)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("sor", r.sor)?;
    d.set_item("sa_sor", r.sa_sor)?;
    d.set_item("mae", r.mae)?;
    Ok(d)
}

/// Partition-to-rank inference. `partition` is `K` rows of `N` probabilities,
/// `masks` is `K` flattened `[H, W]` soft masks, one per cell of `grid_sides`.
#[pyfunction]
#[pyo3(signature = (masks, partition, height, width, grid_sides, threshold=0.3, nms_iou=0.5, binarize=0.5, objectness_floor=0.1))]
#[allow(clippy::too_many_arguments)]
fn p2r<'py>(
    py: Python<'py>,
    masks: Vec<Vec<f64>>,
    partition: Vec<Vec<f64>>,
    height: usize,
    width: usize,
    grid_sides: Vec<usize>,
    threshold: f64,
    nms_iou: f64,
    binarize: f64,
    objectness_floor: f64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let n = partition.first().map_or(0, Vec::len);
    if partition.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("partition rows differ in length"));
    }
    let p = PartitionMatrix::new(n, partition.concat(), cell_origins(&grid_sides)).map_err(to_py)?;
    let soft = masks
        .into_iter()
        .map(|m| SoftMask::new(height, width, m))
        .collect::<Result<Vec<_>, _>>()
        .map_err(to_py)?;
    let params = P2rParams {
        n,
        threshold,
        nms_iou,
        binarize,
        objectness_floor,
    };
    let r = p2r_mod::p2r(soft, &p, &params).map_err(to_py)?;
    instances_to_py(py, &r)
}

/// A network built from a training config JSON (toy preset when omitted).
#[pyclass(name = "Model")]
struct PyModel {
    inner: saliency_rank::model::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config_json=None, seed=0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg = train_config(config_json)?;
        Ok(Self {
            inner: saliency_rank::model::Model::new(&cfg.model, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_checkpoint(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(to_py)?;
        Ok(Self {
            inner: ck.model().map_err(to_py)?,
        })
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.store.iter().map(|(_, p)| p.tensor.len()).sum()
    }

    /// Ranked instances for a flattened `[3, H, W]` image.
    fn predict<'py>(&self, py: Python<'py>, image: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let t = Tensor::new(vec![3, height, width], image).map_err(to_py)?;
        let r = self.inner.predict(&t).map_err(to_py)?;
        instances_to_py(py, &r)
    }

    /// Metric report JSON over the test split of a dataset directory.
    #[pyo3(signature = (data_dir, normalize_sor=false))]
    fn evaluate(&self, data_dir: PathBuf, normalize_sor: bool) -> PyResult<String> {
        let ds = data_synth::load_dataset(&data_dir).map_err(to_py)?;
        let r = eval::evaluate(&self.inner, &ds.test, normalize_sor).map_err(to_py)?;
        serde_json::to_string(&r).map_err(json_err)
    }
}

/// Trains on a dataset directory; returns the per-epoch total losses and
/// writes a checkpoint when `checkpoint` is given.
#[pyfunction]
#[pyo3(signature = (data_dir, config_json=None, epochs=None, seed=None, checkpoint=None))]
fn train(
    data_dir: PathBuf,
    config_json: Option<&str>,
    epochs: Option<usize>,
    seed: Option<u64>,
    checkpoint: Option<PathBuf>,
) -> PyResult<Vec<f64>> {
    let mut cfg = train_config(config_json)?;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds = data_synth::load_dataset(&data_dir).map_err(to_py)?;
    let mut t = Trainer::new(&cfg).map_err(to_py)?;
    t.fit(&ds.train, |_| {}).map_err(to_py)?;
    if let Some(p) = checkpoint {
        t.checkpoint().save(&p).map_err(to_py)?;
    }
    Ok(t.log.iter().map(|e| e.total).collect())
}

/// The toy training preset as JSON.
#[pyfunction]
fn toy_config() -> PyResult<String> {
    serde_json::to_string(&TrainConfig::toy()).map_err(json_err)
}

#[pymodule]
#[pyo3(name = "saliency_rank")]
fn saliency_rank_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(encode_partition_gt, m)?)?;
    m.add_function(wrap_pyfunction!(focal_value, m)?)?;
    m.add_function(wrap_pyfunction!(count_attention_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_image, m)?)?;
    m.add_function(wrap_pyfunction!(p2r, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(toy_config, m)?)?;
    Ok(())
}
