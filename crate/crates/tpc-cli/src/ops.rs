//! Command implementations behind the thin clap layer in `main`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use tpc_core::metrics::{
    self, bench_throughput, cls_only_after, count_flops, count_flops_dense, count_params,
    events_from_records, MetricsRow, TraceEvent,
};
use tpc_core::model::{Model, ModelConfig, ModelVariant};
use tpc_core::train::checkpoint::Checkpoint;
use tpc_core::train::{RunConfig, TrainError, Trainer};

use crate::config::ConfigError;
use crate::svg;

/// Error carrying its process exit code: 2 usage/config, 3 numeric, 1 rest.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numeric(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) | CliError::Runtime(m) => {
                write!(f, "{m}")
            }
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Write `manifest.json`: resolved config, seed, and a content hash of the
/// binary's version string, enough to reproduce the run.
pub fn write_manifest(out: &Path, cfg: &RunConfig, seed: u64) -> Result<(), CliError> {
    let version = env!("CARGO_PKG_VERSION");
    let manifest = serde_json::json!({
        "config": cfg,
        "seed": seed,
        "version": version,
        "version_hash": format!("{:016x}", fnv1a(version.as_bytes())),
    });
    fs::create_dir_all(out)?;
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?,
    )?;
    Ok(())
}

fn numeric_failure(out: &Path, err: TrainError) -> CliError {
    if let TrainError::NonFinite { ref records, .. } = err {
        let dump = out.join("nan_dump.txt");
        let mut text = format!("{err}\n\n");
        for r in records {
            text.push_str(&format!("{r:?}\n"));
        }
        let _ = fs::write(&dump, text);
        return CliError::Numeric(format!("{err}; break records dumped to {}", dump.display()));
    }
    CliError::Runtime(err.to_string())
}

pub fn cmd_train(cfg: RunConfig, seed: u64, out: &Path, plots: bool) -> Result<(), CliError> {
    write_manifest(out, &cfg, seed)?;
    let trace_every = cfg.trace_every;
    let checkpoint_every = cfg.checkpoint_every;
    let delta = cfg.model.tpc.delta;
    let halt_mode = cfg.model.tpc.halt_mode;

    let mut trainer =
        Trainer::new(cfg, seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut metrics_file = fs::File::create(out.join("metrics.csv"))?;
    metrics::write_metrics_header(&mut metrics_file)?;
    let mut losses = Vec::new();
    let mut trace_events: Vec<TraceEvent> = Vec::new();

    let total = trainer.total_steps();
    for _ in 0..total {
        let outcome = match trainer.step() {
            Ok(o) => o,
            Err(e) => return Err(numeric_failure(out, e)),
        };
        metrics::write_metrics_row(
            &mut metrics_file,
            &MetricsRow {
                step: outcome.step,
                task: outcome.breakdown.task,
                ponder: outcome.breakdown.ponder,
                distribution: outcome.breakdown.distribution,
                final_loss: outcome.breakdown.final_loss,
                mean_depth: outcome.mean_depth,
                active_tokens_mean: outcome.active_tokens_mean,
                lr: outcome.lr,
            },
        )?;
        losses.push(outcome.breakdown.final_loss);
        if trace_every > 0 && outcome.step % trace_every as u64 == 0 {
            trace_events.extend(events_from_records(
                outcome.step,
                &outcome.records,
                delta,
                halt_mode,
            ));
        }
        if checkpoint_every > 0 && trainer.step_index() % checkpoint_every as u64 == 0 {
            save_checkpoint(&trainer.checkpoint(), &out.join(format!(
                "ckpt_{:06}.tpck",
                trainer.step_index()
            )))?;
        }
    }
    save_checkpoint(&trainer.checkpoint(), &out.join("final.tpck"))?;

    if !trace_events.is_empty() {
        let mut f = fs::File::create(out.join("trace.csv"))?;
        metrics::emit_trace(&trace_events, &mut f)?;
    }
    if plots {
        fs::write(out.join("loss.svg"), svg::line_chart("final loss", &losses))?;
        let eval = trainer
            .evaluate()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let labels: Vec<String> = (1..=eval.active_tokens_per_layer.len())
            .map(|l| l.to_string())
            .collect();
        fs::write(
            out.join("depth.svg"),
            svg::histogram("mean active tokens per layer", &labels, &eval.active_tokens_per_layer),
        )?;
    }
    let eval = trainer
        .evaluate()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "trained {total} steps; eval top1 {:.4} top5 {:.4} mean_depth {:.3}",
        eval.top1, eval.top5, eval.mean_depth
    );
    Ok(())
}

fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CliError> {
    let mut f = fs::File::create(path)?;
    ckpt.save(&mut f)
        .map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn cmd_eval(checkpoint: &Path, cfg: RunConfig) -> Result<(), CliError> {
    let mut f = fs::File::open(checkpoint)
        .map_err(|e| CliError::Usage(format!("{}: {e}", checkpoint.display())))?;
    let ckpt = Checkpoint::load(&mut f).map_err(|e| CliError::Usage(e.to_string()))?;
    let model = Model::from_params(ckpt.config, ckpt.params)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let (_, eval_set) = cfg
        .data
        .load_split()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let m = tpc_core::train::evaluate(&model, &eval_set)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "{}",
        serde_json::json!({
            "top1": m.top1,
            "top5": m.top5,
            "mean_depth": m.mean_depth,
            "active_tokens_per_layer": m.active_tokens_per_layer,
            "flops_per_image": m.flops_per_image,
        })
    );
    Ok(())
}

pub fn cmd_bench(
    cfg: RunConfig,
    seed: u64,
    reps: usize,
    warmup: usize,
    full_layers: Option<usize>,
) -> Result<(), CliError> {
    let model = Model::new(cfg.model.clone(), seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let c = &model.config;
    let image = vec![0.5; c.channels * c.image_size * c.image_size];
    let full = full_layers.unwrap_or(c.depth / 2);
    let dense_masks = cls_only_after(c.depth, c.tokens(), c.depth);
    let tpc_masks = cls_only_after(c.depth, c.tokens(), full);

    let dense = bench_throughput(&model, &image, &dense_masks, reps, warmup)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let tpc = bench_throughput(&model, &image, &tpc_masks, reps, warmup)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("threads: {}", metrics::max_threads());
    println!(
        "dense:      {:>9.2} img/s  p50 {:.2} ms  p95 {:.2} ms",
        dense.images_per_sec, dense.p50_ms, dense.p95_ms
    );
    println!(
        "tpc (L/2~{full}): {:>7.2} img/s  p50 {:.2} ms  p95 {:.2} ms",
        tpc.images_per_sec, tpc.p50_ms, tpc.p95_ms
    );
    println!(
        "speedup: {:.2}x",
        tpc.images_per_sec / dense.images_per_sec
    );
    Ok(())
}

pub fn cmd_trace(cfg: RunConfig, seed: u64, steps: usize, out: &Path) -> Result<(), CliError> {
    write_manifest(out, &cfg, seed)?;
    let delta = cfg.model.tpc.delta;
    let halt_mode = cfg.model.tpc.halt_mode;
    let mut trainer = Trainer::new(cfg, seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut events = Vec::new();
    for _ in 0..steps.min(trainer.total_steps()) {
        let outcome = match trainer.step() {
            Ok(o) => o,
            Err(e) => return Err(numeric_failure(out, e)),
        };
        events.extend(events_from_records(outcome.step, &outcome.records, delta, halt_mode));
    }
    let path = out.join("trace.csv");
    let mut f = fs::File::create(&path)?;
    metrics::emit_trace(&events, &mut f)?;
    println!("{} events -> {}", events.len(), path.display());
    Ok(())
}

pub fn cmd_flops(
    preset: Option<&str>,
    cfg: Option<RunConfig>,
    schedule: Option<&Path>,
) -> Result<(), CliError> {
    let model_cfg: ModelConfig = match (preset, cfg) {
        (Some(name), _) => ModelConfig::preset(name).map_err(|e| CliError::Usage(e.to_string()))?,
        (None, Some(c)) => c.model,
        (None, None) => return Err(CliError::Usage("flops needs --preset or --config".into())),
    };
    let active: Vec<usize> = match schedule {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let counts: Vec<usize> = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            if counts.len() != model_cfg.depth {
                return Err(CliError::Usage(format!(
                    "schedule has {} entries for depth {}",
                    counts.len(),
                    model_cfg.depth
                )));
            }
            counts
        }
        None => vec![model_cfg.tokens(); model_cfg.depth],
    };
    let ledger = if model_cfg.variant == ModelVariant::Tpc {
        count_flops(&model_cfg, &active)
    } else {
        count_flops_dense(&model_cfg)
    };
    println!(
        "params: {:.2} M ({})",
        count_params(&model_cfg) as f64 / 1e6,
        count_params(&model_cfg)
    );
    println!("dense:  {:.3} GFLOPs (x2 convention: {:.3} G)",
        ledger.dense_gflops(), 2.0 * ledger.dense_gflops());
    println!("path:   {:.3} GFLOPs", ledger.gflops());
    println!("layer,attention,mlp,gates,selection,total");
    for (l, e) in ledger.per_layer.iter().enumerate() {
        println!(
            "{},{},{},{},{},{}",
            l + 1,
            e.attention,
            e.mlp,
            e.gates,
            e.selection,
            e.total()
        );
    }
    Ok(())
}

pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

pub fn parse_axis(s: &str) -> Result<SweepAxis, CliError> {
    let (key, vals) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("axis '{s}' is not key=v1,v2,...")))?;
    let values: Vec<String> = vals.split(',').map(str::to_string).collect();
    if values.is_empty() || values.iter().any(|v| v.is_empty()) {
        return Err(CliError::Usage(format!("axis '{s}' has empty values")));
    }
    Ok(SweepAxis { key: key.to_string(), values })
}

pub fn cmd_sweep(
    config_path: Option<&Path>,
    overrides: &[String],
    axis: &SweepAxis,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    let mut summary = fs::File::create(out.join("sweep.csv"))?;
    writeln!(summary, "{},top1,mean_depth,gflops,status", axis.key)?;
    for value in &axis.values {
        let mut all = overrides.to_vec();
        all.push(format!("{}={}", axis.key, value));
        let row = run_sweep_point(config_path, &all, seed);
        match row {
            Ok((top1, depth, gflops)) => {
                writeln!(summary, "{value},{top1},{depth},{gflops},ok")?;
                println!("{} = {value}: top1 {top1:.4}, mean depth {depth:.3}", axis.key);
            }
            Err(e) => {
                writeln!(summary, "{value},,,,failed")?;
                eprintln!("{} = {value}: failed: {e}", axis.key);
            }
        }
    }
    println!("summary -> {}", out.join("sweep.csv").display());
    Ok(())
}

fn run_sweep_point(
    config_path: Option<&Path>,
    overrides: &[String],
    seed: u64,
) -> Result<(f64, f64, f64), CliError> {
    let cfg = crate::config::load_config(config_path, overrides)?;
    let model_cfg = cfg.model.clone();
    let mut trainer = Trainer::new(cfg, seed).map_err(|e| CliError::Usage(e.to_string()))?;
    for _ in 0..trainer.total_steps() {
        trainer.step().map_err(|e| CliError::Numeric(e.to_string()))?;
    }
    let m = trainer
        .evaluate()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let active: Vec<usize> = m
        .active_tokens_per_layer
        .iter()
        .map(|&a| a.round() as usize)
        .collect();
    let gflops = count_flops(&model_cfg, &active).gflops();
    Ok((m.top1, m.mean_depth, gflops))
}
