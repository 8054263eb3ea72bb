use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use saliency_rank::config::{HeadKind, TrainConfig};
use saliency_rank::data_synth::{generate_dataset, load_dataset, save_dataset, GenConfig, ImageEncoding};
use saliency_rank::dpt::{count_attention_pairs, instrumented_pair_counts};
use saliency_rank::eval::{ablate, evaluate, evaluate_passthrough};
use saliency_rank::train::{write_log, Checkpoint, Trainer, LOG_HEADER};
use saliency_rank::{Error, Result};

#[derive(Parser)]
#[command(name = "srank", version, about = "Partition-based saliency ranking on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model and write a checkpoint plus a CSV loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split and print the metric JSON.
    Eval(EvalArgs),
    /// Print analytic and instrumented attention pair counts as CSV.
    BenchAttention(BenchArgs),
    /// Train both head types per seed and report the metric deltas.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Encoding {
    Base64,
    Nested,
}

#[derive(Args)]
struct GenArgs {
    /// Generator config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    canvas: Option<usize>,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Encoding::Base64)]
    encoding: Encoding,
    #[arg(long)]
    out: PathBuf,
}

/// Training configuration: toy preset, then the JSON file, then `--set`, then flags.
#[derive(Args)]
struct ConfigArgs {
    /// JSON config; nested objects or flat dotted keys, merged over the toy preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one field, e.g. `--set model.n=5` or `--set loss.partition=1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    head: Option<HeadKind>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint; its config must hash identically.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "gt_passthrough")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Score the ground truth against itself instead of running a model.
    #[arg(long)]
    gt_passthrough: bool,
    /// Also report SOR mapped to [0,1] as (ρ+1)/2.
    #[arg(long)]
    normalize_sor: bool,
    /// Accepted for interface uniformity; evaluation is deterministic.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "1..=5")]
    scales: String,
    #[arg(long, default_value = "1..=8")]
    heights: String,
    #[arg(long, default_value = "1..=8")]
    widths: String,
    /// Skip the instrumented forward passes and print analytic counts only.
    #[arg(long)]
    analytic_only: bool,
    /// Seed for the instrumented layers' parameters.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Seeds to train; defaults to the base seed and the next two.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.into(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Load {
        path: path.into(),
        reason: e.to_string(),
    })
}

/// Sets `key` (dotted path) in `target`, creating intermediate objects.
fn set_path(target: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = target;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert((*p).into(), value);
            return Ok(());
        }
        cur = obj.entry(*p).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn merge(base: &mut Value, overlay: Value) -> Result<()> {
    let Value::Object(map) = overlay else {
        return Err(Error::Config("config file must hold a JSON object".into()));
    };
    for (k, v) in map {
        match (base.get_mut(&k), v) {
            (Some(b @ Value::Object(_)), v @ Value::Object(_)) => merge(b, v)?,
            (_, v) => set_path(base, &k, v)?,
        }
    }
    Ok(())
}

/// Parses `VALUE` as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()))
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut v = serde_json::to_value(TrainConfig::toy())?;
        if let Some(p) = &self.config {
            merge(&mut v, read_json(p)?)?;
        }
        for kv in &self.set {
            let (k, raw) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            set_path(&mut v, k, parse_value(raw))?;
        }
        let mut cfg: TrainConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(h) = self.head {
            cfg.model.head = h;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn pretty(v: &impl serde::Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&serde_json::to_value(v)?)?;
    s.push('\n');
    Ok(s)
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let mut v = serde_json::to_value(GenConfig::default())?;
    if let Some(p) = &a.config {
        merge(&mut v, read_json(p)?)?;
    }
    let mut cfg: GenConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(n) = a.n {
        cfg.n = n;
        cfg.max_instances = cfg.max_instances.min(n);
    }
    if let Some(c) = a.canvas {
        cfg.canvas = c;
    }
    let ds = generate_dataset(&cfg, a.train, a.test, a.seed)?;
    let enc = match a.encoding {
        Encoding::Base64 => ImageEncoding::Base64F32,
        Encoding::Nested => ImageEncoding::Nested,
    };
    save_dataset(&ds, &a.out, enc)?;
    eprintln!("wrote {} samples to {}", ds.manifest.count, a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let ds = load_dataset(&a.data)?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(&cfg, &Checkpoint::load(p)?)?,
        None => Trainer::new(&cfg)?,
    };
    create_dir(&a.out)?;
    write_text(&a.out.join("config.json"), &pretty(&cfg)?)?;
    eprintln!("{LOG_HEADER}");
    trainer.fit(&ds.train, |e| eprintln!("{}", e.csv_row()))?;
    let ck = a.out.join("checkpoint.json");
    trainer.checkpoint().save(&ck)?;
    write_log(&a.out.join("train_log.csv"), &trainer.log)?;
    eprintln!("checkpoint written to {}", ck.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let report = if a.gt_passthrough {
        evaluate_passthrough(&ds.test, ds.manifest.n, a.normalize_sor)?
    } else {
        let path = a.checkpoint.as_ref().expect("clap enforces --checkpoint");
        let ck = Checkpoint::load(path)?;
        if ck.config.model.n != ds.manifest.n {
            return Err(Error::Config(format!(
                "checkpoint {} predicts N = {} but dataset {} has N = {}",
                path.display(),
                ck.config.model.n,
                a.data.display(),
                ds.manifest.n
            )));
        }
        evaluate(&ck.model()?, &ds.test, a.normalize_sor)?
    };
    let text = pretty(&report)?;
    if let Some(out) = &a.out {
        write_text(out, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn parse_range(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("expected N or A..=B, got {s:?}"));
    match s.split_once("..=") {
        Some((lo, hi)) => {
            let (lo, hi): (u64, u64) = (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?);
            if lo > hi {
                return Err(bad());
            }
            Ok((lo..=hi).collect())
        }
        None => Ok(vec![s.trim().parse().map_err(|_| bad())?]),
    }
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    println!("S,H,W,dpt_pairs,all_scale_pairs,ratio");
    for s in parse_range(&a.scales)? {
        for h in parse_range(&a.heights)? {
            for w in parse_range(&a.widths)? {
                let r = count_attention_pairs(s, h, w)?;
                if !a.analytic_only {
                    let (dpt, all) = instrumented_pair_counts(s as usize, h as usize, w as usize, a.seed)?;
                    if (dpt, all) != (r.dpt_pairs, r.all_scale_pairs) {
                        return Err(Error::Data(format!(
                            "instrumented counts ({dpt}, {all}) differ from analytic ({}, {}) at S={s} H={h} W={w}",
                            r.dpt_pairs, r.all_scale_pairs
                        )));
                    }
                }
                println!("{s},{h},{w},{},{},{}", r.dpt_pairs, r.all_scale_pairs, r.ratio());
            }
        }
    }
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let ds = load_dataset(&a.data)?;
    let seeds = if a.seeds.is_empty() {
        vec![cfg.seed, cfg.seed + 1, cfg.seed + 2]
    } else {
        a.seeds.clone()
    };
    create_dir(&a.out)?;
    let report = ablate(&cfg, &ds.train, &ds.test, &seeds, |r| {
        eprintln!("seed {} {}: sor {:?} sa_sor {:?} mae {:.4}", r.seed, r.head, r.report.sor, r.report.sa_sor, r.report.mae)
    })?;
    let text = pretty(&report)?;
    write_text(&a.out.join("ablation.json"), &text)?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::BenchAttention(a) => cmd_bench(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
