//! Test-split evaluation.

use std::thread;

use serde::{Deserialize, Serialize};

use crate::config::{HeadKind, TrainConfig};
use crate::data_synth::SceneSample;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_image, ImageMetrics, MetricAccumulator, MetricReport, RankedMask};
use crate::model::Model;
use crate::train::Trainer;

fn check_split(samples: &[SceneSample], n: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    if let Some(r) = samples.iter().flat_map(|s| &s.instances).map(|i| i.rank).find(|&r| r > n) {
        return Err(Error::Config(format!("dataset has rank {r} but the model predicts N = {n}")));
    }
    Ok(())
}

fn gt_view(s: &SceneSample) -> Vec<RankedMask<'_>> {
    s.instances.iter().map(|i| RankedMask { mask: &i.mask, rank: i.rank }).collect()
}

fn score_sample(model: &Model, s: &SceneSample) -> Result<ImageMetrics> {
    let preds = model.predict(&s.image)?;
    let pv: Vec<RankedMask> = preds.iter().map(|p| RankedMask { mask: &p.mask, rank: p.rank }).collect();
    evaluate_image(&pv, &gt_view(s), model.cfg.n, (s.height(), s.width()))
}

/// Runs the model on every sample. Images are scored on worker threads and
/// aggregated in sample order, so the report does not depend on the thread
/// count.
pub fn evaluate(model: &Model, samples: &[SceneSample], normalize_sor: bool) -> Result<MetricReport> {
    check_split(samples, model.cfg.n)?;
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(samples.len());
    let chunk = samples.len().div_ceil(workers);
    let per_image: Vec<ImageMetrics> = thread::scope(|sc| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| sc.spawn(move || part.iter().map(|s| score_sample(model, s)).collect::<Result<Vec<_>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    let mut acc = MetricAccumulator::new(model.cfg.n);
    for m in &per_image {
        acc.push(m);
    }
    Ok(acc.finish(normalize_sor))
}

/// Scores the ground truth against itself; a harness check.
pub fn evaluate_passthrough(samples: &[SceneSample], n: usize, normalize_sor: bool) -> Result<MetricReport> {
    check_split(samples, n)?;
    let mut acc = MetricAccumulator::new(n);
    for s in samples {
        let g = gt_view(s);
        acc.push(&evaluate_image(&g, &g, n, (s.height(), s.width()))?);
    }
    Ok(acc.finish(normalize_sor))
}

/// One trained head in the paradigm ablation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRun {
    pub head: HeadKind,
    pub seed: u64,
    pub config_hash: String,
    pub report: MetricReport,
}

/// `partition − sorting` for each metric; `None` when either side is undefined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricDeltas {
    pub mae: f64,
    pub sa_sor: Option<f64>,
    pub sor: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationSeed {
    pub seed: u64,
    /// Hash of the configuration with the head field removed; equal for both runs.
    pub shared_config_hash: String,
    pub partition: AblationRun,
    pub sorting: AblationRun,
    pub delta: MetricDeltas,
}

/// Means over seeds; a metric's mean skips seeds where it is undefined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub mae: f64,
    pub sa_sor: Option<f64>,
    pub sor: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<AblationSeed>,
    pub mean_partition: MetricMeans,
    pub mean_sorting: MetricMeans,
    pub mean_delta: MetricDeltas,
}

fn shared_hash(cfg: &TrainConfig) -> String {
    let mut c = cfg.clone();
    c.model.head = HeadKind::Partition;
    c.hash()
}

fn opt_sub(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

fn opt_mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn means<'a>(reports: impl Iterator<Item = &'a MetricReport> + Clone) -> MetricMeans {
    let k = reports.clone().count().max(1) as f64;
    MetricMeans {
        mae: reports.clone().map(|r| r.mae).sum::<f64>() / k,
        sa_sor: opt_mean(reports.clone().map(|r| r.sa_sor)),
        sor: opt_mean(reports.map(|r| r.sor)),
    }
}

/// Trains one model with `cfg` (head and seed overridden) and evaluates it.
pub fn train_and_evaluate(
    cfg: &TrainConfig,
    head: HeadKind,
    seed: u64,
    train: &[SceneSample],
    test: &[SceneSample],
    normalize_sor: bool,
) -> Result<AblationRun> {
    let mut c = cfg.clone();
    c.model.head = head;
    c.seed = seed;
    let mut t = Trainer::new(&c)?;
    t.fit(train, |_| {})?;
    Ok(AblationRun {
        head,
        seed,
        config_hash: c.hash(),
        report: evaluate(&t.model, test, normalize_sor)?,
    })
}

/// Trains the partition and sorting heads under identical trunk, schedule
/// and seed for every seed in `seeds`. `on_run` sees each finished run.
pub fn ablate(
    cfg: &TrainConfig,
    train: &[SceneSample],
    test: &[SceneSample],
    seeds: &[u64],
    mut on_run: impl FnMut(&AblationRun),
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        let partition = train_and_evaluate(cfg, HeadKind::Partition, seed, train, test, false)?;
        on_run(&partition);
        let sorting = train_and_evaluate(cfg, HeadKind::Sorting, seed, train, test, false)?;
        on_run(&sorting);
        let (p, s) = (&partition.report, &sorting.report);
        rows.push(AblationSeed {
            seed,
            shared_config_hash: shared_hash(&c),
            delta: MetricDeltas {
                mae: p.mae - s.mae,
                sa_sor: opt_sub(p.sa_sor, s.sa_sor),
                sor: opt_sub(p.sor, s.sor),
            },
            partition,
            sorting,
        });
    }
    let mean_partition = means(rows.iter().map(|r| &r.partition.report));
    let mean_sorting = means(rows.iter().map(|r| &r.sorting.report));
    Ok(AblationReport {
        mean_delta: MetricDeltas {
            mae: mean_partition.mae - mean_sorting.mae,
            sa_sor: opt_sub(mean_partition.sa_sor, mean_sorting.sa_sor),
            sor: opt_sub(mean_partition.sor, mean_sorting.sor),
        },
        mean_partition,
        mean_sorting,
        seeds: rows,
    })
}
