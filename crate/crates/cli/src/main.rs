//! `difflab`: train, sample, distil, evaluate and compare small diffusion models.

mod config;
mod plot;

use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use difflab::checkpoint::Checkpoint;
use difflab::checks;
use difflab::data::{read_points_csv, write_points_csv, Split};
use difflab::denoiser::DenoiserModel;
use difflab::diffusion::{ancestral_sample_traced, Parameterization};
use difflab::experiment::{
    distill_chain, run_compare, sample_checkpoint, sample_raw, time_sampling, write_chain_csv, write_compare_csv, Evaluator,
};
use difflab::rng::Rng;
use difflab::training::{train, LogRecord, RunLog, TrainMode, TrainObserver};
use serde_json::json;

use crate::config::{LoadedConfig, RunConfig};

const TIMING_REPS: usize = 5;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<difflab::Error> for CliError {
    fn from(e: difflab::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "difflab", version, about = "Desk-scale diffusion model experiments")]
struct Cli {
    /// Worker threads for evaluation and comparison grids.
    #[arg(long, global = true, env = "DIFFLAB_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run-config TOML file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to `out_dir` from the config, then `runs/<command>`).
    #[arg(long, env = "DIFFLAB_OUT")]
    out: Option<PathBuf>,
    /// Model to load; the teacher for distill runs.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model as configured (gradient, generator or distill mode).
    Train {
        #[command(flatten)]
        common: Common,
        /// Also write the training set to data/ (points CSV or raw image container).
        #[arg(long)]
        write_data: bool,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Number of samples.
        #[arg(short = 'n', long, default_value_t = 1000)]
        n: usize,
        /// Also dump every reverse step to trajectory.csv.
        #[arg(long)]
        trajectory: bool,
    },
    /// Distil a teacher checkpoint down to `[distill] target_steps`, round by round.
    DistillChain(Common),
    /// Evaluate a checkpoint, or a samples CSV, against the configured dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Points CSV to evaluate instead of sampling a checkpoint.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Train and evaluate every (parameterization, steps) cell.
    Compare(Common),
    /// Render SVG plots from CSV outputs.
    Plot {
        /// CSV files written by the other commands.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Training points drawn behind sample scatters.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for the SVG files (default `runs/plot`).
        #[arg(long, env = "DIFFLAB_OUT")]
        out: Option<PathBuf>,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(3)
        }
    }
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::Train { common, write_data } => cmd_train(&common, write_data),
        Command::Sample { common, n, trajectory } => cmd_sample(&common, n, trajectory),
        Command::DistillChain(c) => cmd_distill_chain(&c),
        Command::Eval { common, samples } => cmd_eval(&common, samples.as_deref()),
        Command::Compare(c) => cmd_compare(&c),
        Command::Plot { inputs, data, out } => {
            let out = out.unwrap_or_else(|| PathBuf::from("runs/plot"));
            fs::create_dir_all(&out)?;
            for f in plot::render_all(&inputs, data.as_deref(), &out)? {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Selftest => cmd_selftest(),
    }
}

fn load_config(c: &Common) -> CliResult<LoadedConfig> {
    let path = c
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let mut loaded = RunConfig::load(path)?;
    if let Some(seed) = c.seed {
        loaded.config.train.seed = seed;
    }
    Ok(loaded)
}

fn out_dir(c: &Common, cfg: Option<&RunConfig>, command: &str) -> CliResult<PathBuf> {
    let dir = c
        .out
        .clone()
        .or_else(|| cfg.and_then(|r| r.out_dir.clone()))
        .unwrap_or_else(|| Path::new("runs").join(command));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| {
        CliError::Usage(format!("{}: {e}", path.display()))
    })?))
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_manifest(dir: &Path, command: &str, cfg: Option<&LoadedConfig>, seed: u64, extra: serde_json::Value) -> CliResult {
    let manifest = json!({
        "tool": "difflab",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "config_path": cfg.map(|c| c.path.display().to_string()),
        "config_sha256": cfg.map(|c| c.sha256.clone()),
        "config": cfg.map(|c| &c.config),
        "details": extra,
    });
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))?;
    Ok(())
}

/// Writes periodic checkpoints and streams the log to stdout.
struct DiskObserver {
    dir: PathBuf,
    error: Option<CliError>,
}

impl TrainObserver for DiskObserver {
    fn on_log(&mut self, r: &LogRecord) {
        println!(
            "step {:>7}  recon {:.6}  ssim {:.6}  |g| {:.4}  {:.1}s",
            r.step, r.loss_recon, r.loss_ssim, r.grad_norm, r.seconds
        );
    }

    fn on_checkpoint(&mut self, step: usize, ckpt: &Checkpoint) {
        let path = self.dir.join(format!("step_{step:07}.ckpt"));
        if let Err(e) = ckpt.save(&path) {
            self.error.get_or_insert(CliError::Usage(format!("{}: {e}", path.display())));
        }
    }
}

fn write_log(dir: &Path, log: &RunLog) -> CliResult {
    log.write_csv(create(&dir.join("train_log.csv"))?)?;
    Ok(())
}

fn cmd_train(c: &Common, write_data: bool) -> CliResult {
    let loaded = load_config(c)?;
    let cfg = &loaded.config;
    let mut tc = cfg.train_config();
    if tc.mode == TrainMode::Distill {
        if let Some(p) = &c.checkpoint {
            tc.teacher = Some(p.clone());
        }
        let teacher = tc
            .teacher
            .as_ref()
            .ok_or_else(|| CliError::Usage("distill mode needs a teacher: set [train] teacher or pass --checkpoint".into()))?;
        load_checkpoint(teacher)?;
    }
    let dir = out_dir(c, Some(cfg), "train")?;
    if write_data {
        let data_dir = dir.join("data");
        fs::create_dir_all(&data_dir)?;
        let ds = cfg.dataset.generate(Split::Train)?;
        match ds.image_shape {
            Some(_) => ds.write_images_raw(&data_dir.join("train.f64"))?,
            None => ds.write_points_csv(create(&data_dir.join("train.csv"))?)?,
        }
    }
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let mut obs = DiskObserver {
        dir: ckpt_dir,
        error: None,
    };
    match train(&tc, &mut obs) {
        Ok(out) => {
            if let Some(e) = obs.error {
                return Err(e);
            }
            out.checkpoint.save(dir.join("checkpoint.ckpt"))?;
            write_log(&dir, &out.log)?;
            write_manifest(
                &dir,
                "train",
                Some(&loaded),
                tc.seed,
                json!({ "mode": tc.mode, "steps": out.checkpoint.noise_schedule()?.steps(), "teacher": tc.teacher }),
            )?;
            println!("wrote {}", dir.join("checkpoint.ckpt").display());
            Ok(())
        }
        Err(difflab::Error::NonFiniteLoss { step, last_good }) => {
            let path = dir.join("last_good.ckpt");
            Checkpoint::new(*last_good, tc.schedule.clone(), tc.seed).save(&path)?;
            Err(CliError::Numerical(format!(
                "non-finite loss at step {step}; last good parameters saved to {}",
                path.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_sample(c: &Common, n: usize, trajectory: bool) -> CliResult {
    let path = c
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("--checkpoint is required".into()))?;
    let ckpt = load_checkpoint(path)?;
    let loaded = c.config.as_ref().map(|_| load_config(c)).transpose()?;
    let seed = c.seed.unwrap_or(0);
    let dir = out_dir(c, loaded.as_ref().map(|l| &l.config), "sample")?;
    let data = match &loaded {
        Some(l) => {
            ckpt.expect_dims(l.config.dataset.dim(), 0)?;
            Some(l.config.dataset.with_samples(1).generate(Split::Train)?)
        }
        None => None,
    };
    let d = ckpt.model.config.input_dim;
    let samples = if n == 0 {
        difflab::tensor::Tensor::zeros(&[0, d])
    } else {
        match &data {
            Some(ds) => sample_checkpoint(&ckpt, ds, n, seed)?,
            None => sample_raw(&ckpt, n, seed)?,
        }
    };
    write_points_csv(&samples, None, create(&dir.join("samples.csv"))?)?;
    if trajectory && n > 0 {
        let s = ckpt.noise_schedule()?;
        let mut rng = Rng::substream(seed, 0x7472_616a);
        let tr = ancestral_sample_traced(
            &ckpt.model,
            ckpt.model.parameterization,
            &s,
            &[n, d],
            &DenoiserModel::no_condition(n),
            &mut rng,
        )?;
        tr.write_csv(create(&dir.join("trajectory.csv"))?)?;
    }
    let per_sample = time_sampling(&ckpt, TIMING_REPS)?;
    let steps = ckpt.noise_schedule()?.steps();
    let timing = json!({
        "steps": steps,
        "batch_size": 1,
        "repetitions": TIMING_REPS,
        "warmup": 1,
        "median_seconds_per_sample": per_sample,
    });
    fs::write(dir.join("timing.json"), serde_json::to_vec_pretty(&timing).expect("timing serializes"))?;
    write_manifest(
        &dir,
        "sample",
        loaded.as_ref(),
        seed,
        json!({ "checkpoint": path, "n": n, "steps": steps, "parameterization": ckpt.model.parameterization }),
    )?;
    println!("{n} samples, {steps} steps, {:.1} us per sample", per_sample * 1e6);
    Ok(())
}

fn cmd_distill_chain(c: &Common) -> CliResult {
    let loaded = load_config(c)?;
    let cfg = &loaded.config;
    let teacher_path = c
        .checkpoint
        .clone()
        .or_else(|| cfg.train.teacher.clone())
        .ok_or_else(|| CliError::Usage("distill-chain needs --checkpoint (or [train] teacher)".into()))?;
    let teacher = load_checkpoint(&teacher_path)?;
    if teacher.model.parameterization != Parameterization::DataPrediction {
        return Err(CliError::Usage(format!(
            "distillation needs a data-prediction teacher; {} is {}",
            teacher_path.display(),
            teacher.model.parameterization
        )));
    }
    let mut tc = cfg.train_config();
    tc.mode = TrainMode::Distill;
    tc.teacher = Some(teacher_path.clone());
    let dir = out_dir(c, Some(cfg), "distill-chain")?;
    let ev = Evaluator::new(&cfg.dataset, &cfg.eval)?;
    let rounds = distill_chain(&teacher, cfg.distill.target_steps, &tc, &ev, &mut ())?;
    for r in &rounds {
        r.checkpoint.save(dir.join(format!("round_{}_T{}.ckpt", r.round, r.steps)))?;
        println!(
            "round {}  T={:<3} JS {:.5}  NDB {}  ED {:.5}",
            r.round,
            r.steps,
            r.report.js,
            r.report.ndb,
            r.report.energy_distance.unwrap_or(f64::NAN)
        );
    }
    write_chain_csv(&rounds, create(&dir.join("chain_metrics.csv"))?)?;
    write_manifest(
        &dir,
        "distill-chain",
        Some(&loaded),
        tc.seed,
        json!({ "teacher": teacher_path, "target_steps": cfg.distill.target_steps, "rounds": rounds.len() - 1 }),
    )?;
    Ok(())
}

fn cmd_eval(c: &Common, samples: Option<&Path>) -> CliResult {
    let loaded = load_config(c)?;
    let cfg = &loaded.config;
    let dir = out_dir(c, Some(cfg), "eval")?;
    let ev = Evaluator::new(&cfg.dataset, &cfg.eval)?;
    let seed = c.seed.unwrap_or(cfg.eval.seed);
    let (report, source) = match (samples, &c.checkpoint) {
        (Some(p), _) => {
            let x = read_points_csv(p).map_err(|e| CliError::Usage(e.to_string()))?;
            if x.rows() == 0 {
                return Err(CliError::Usage(format!("{}: no samples", p.display())));
            }
            (ev.evaluate(&x)?, p.display().to_string())
        }
        (None, Some(p)) => {
            let ckpt = load_checkpoint(p)?;
            ckpt.expect_dims(cfg.dataset.dim(), 0)?;
            let (report, _) = ev.evaluate_checkpoint(&ckpt, seed)?;
            let curve = ev.per_step_energy(&ckpt, cfg.eval.samples.min(2000), seed)?;
            let mut w = csv::Writer::from_writer(create(&dir.join("per_step.csv"))?);
            w.write_record(["t", "energy_distance"]).map_err(to_usage)?;
            for (t, e) in curve {
                w.serialize((t, e)).map_err(to_usage)?;
            }
            w.flush()?;
            (report, p.display().to_string())
        }
        (None, None) => return Err(CliError::Usage("eval needs --checkpoint or --samples".into())),
    };
    report.write_csv(create(&dir.join("metrics.csv"))?)?;
    report.write_bins_csv(create(&dir.join("bins.csv"))?)?;
    write_manifest(&dir, "eval", Some(&loaded), seed, json!({ "source": source }))?;
    println!(
        "JS {:.5}  NDB {}/{}  ED {:.5}",
        report.js,
        report.ndb,
        report.k(),
        report.energy_distance.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn to_usage(e: csv::Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn cmd_compare(c: &Common) -> CliResult {
    let loaded = load_config(c)?;
    let cfg = &loaded.config;
    let dir = out_dir(c, Some(cfg), "compare")?;
    let ev = Evaluator::new(&cfg.dataset, &cfg.eval)?;
    let base = cfg.train_config();
    let rows = run_compare(&base, &cfg.compare, &ev);
    for r in &rows {
        let cell = dir.join(format!("{}_T{}", r.parameterization, r.steps));
        match &r.outcome {
            Ok(res) => {
                fs::create_dir_all(&cell)?;
                res.checkpoint.save(cell.join("checkpoint.ckpt"))?;
                println!(
                    "{:<20} T={:<3} JS {:.5}  NDB {}  ED {:.5}",
                    r.parameterization.to_string(),
                    r.steps,
                    res.report.js,
                    res.report.ndb,
                    res.report.energy_distance.unwrap_or(f64::NAN)
                );
            }
            Err(e) => println!("{:<20} T={:<3} failed: {e}", r.parameterization.to_string(), r.steps),
        }
    }
    write_compare_csv(&rows, create(&dir.join("compare.csv"))?)?;
    write_manifest(&dir, "compare", Some(&loaded), base.seed, json!({ "cells": rows.len() }))?;
    Ok(())
}

fn cmd_selftest() -> CliResult {
    let results = checks::invariant_suite();
    let failed = results.iter().filter(|c| !c.passed).count();
    for c in &results {
        println!("{c}");
    }
    println!("{}/{} checks passed", results.len() - failed, results.len());
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("{failed} self-test check(s) failed")))
    }
}
