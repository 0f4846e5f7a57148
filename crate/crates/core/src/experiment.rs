//! Experiment drivers shared by the CLI and the acceptance suite: sample
//! evaluation, the parameterization-by-steps comparison grid, distillation
//! chains and sampling-time measurement.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{mixture_centers, Dataset, DatasetSpec, Split};
use crate::denoiser::DenoiserModel;
use crate::diffusion::{ancestral_sample, ancestral_sample_traced, csv_err, Parameterization};
use crate::distill::halving_chain;
use crate::error::{Error, Result};
use crate::metrics::{energy_distance, evaluate, fit_bins, fit_bins_from, BinModel, MetricsReport, REPORT_HEADER};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::training::{train, TrainConfig, TrainMode, TrainObserver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BinStrategy {
    /// One bin per mixture mode, k-means started at the mode centres.
    ModeCenters,
    KMeans { k: usize },
}

fn default_eval_samples() -> usize {
    4000
}

fn default_reference() -> usize {
    2000
}

fn default_alpha() -> f64 {
    crate::metrics::DEFAULT_ALPHA
}

fn default_bins() -> BinStrategy {
    BinStrategy::ModeCenters
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Generated samples per evaluation.
    #[serde(default = "default_eval_samples")]
    pub samples: usize,
    /// Held-out samples used for energy distance.
    #[serde(default = "default_reference")]
    pub reference: usize,
    #[serde(default = "default_bins")]
    pub bins: BinStrategy,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: default_eval_samples(),
            reference: default_reference(),
            bins: default_bins(),
            alpha: default_alpha(),
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.reference == 0 {
            return Err(Error::config("eval.samples and eval.reference must be >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("eval.alpha must be in (0, 1), got {}", self.alpha)));
        }
        if let BinStrategy::KMeans { k } = self.bins {
            if k < 2 {
                return Err(Error::config("eval.bins.k must be >= 2"));
            }
        }
        Ok(())
    }
}

/// Bins fitted on the training split plus a held-out reference set.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub bins: BinModel,
    pub train: Dataset,
    pub reference: Tensor,
    pub cfg: EvalConfig,
}

impl Evaluator {
    pub fn new(dataset: &DatasetSpec, cfg: &EvalConfig) -> Result<Self> {
        cfg.validate()?;
        let train = dataset.generate(Split::Train)?;
        let reference = dataset.with_samples(cfg.reference).generate(Split::Eval)?.samples;
        let bins = match (cfg.bins, dataset) {
            (BinStrategy::ModeCenters, DatasetSpec::GaussianMixture2d(m)) => {
                let init: Vec<Vec<f64>> = mixture_centers(m.modes, m.radius).iter().map(|c| c.to_vec()).collect();
                fit_bins_from(&train.samples, Tensor::from_rows(&init)?)?
            }
            (BinStrategy::ModeCenters, _) => fit_bins(&train.samples, 50, cfg.seed)?,
            (BinStrategy::KMeans { k }, _) => fit_bins(&train.samples, k, cfg.seed)?,
        };
        Ok(Self {
            bins,
            train,
            reference,
            cfg: cfg.clone(),
        })
    }

    /// Metrics of samples given in data space.
    pub fn evaluate(&self, samples: &Tensor) -> Result<MetricsReport> {
        evaluate(&self.bins, &self.reference, samples, self.cfg.alpha)
    }

    /// Draws `cfg.samples` samples from `ckpt` and evaluates them.
    pub fn evaluate_checkpoint(&self, ckpt: &Checkpoint, seed: u64) -> Result<(MetricsReport, Tensor)> {
        let samples = sample_checkpoint(ckpt, &self.train, self.cfg.samples, seed)?;
        Ok((self.evaluate(&samples)?, samples))
    }

    /// Energy distance of each reverse step's clean-data estimate to the
    /// reference set, in reverse order (`t = T` first).
    pub fn per_step_energy(&self, ckpt: &Checkpoint, n: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
        let s = ckpt.noise_schedule()?;
        let d = ckpt.model.config.input_dim;
        let mut rng = Rng::substream(seed, 0x0074_7261_6365);
        let tr = ancestral_sample_traced(
            &ckpt.model,
            ckpt.model.parameterization,
            &s,
            &[n, d],
            &DenoiserModel::no_condition(n),
            &mut rng,
        )?;
        tr.steps
            .iter()
            .map(|st| {
                let x0 = self.train.from_model_space(&st.x0_pred);
                Ok((st.t, energy_distance(&self.reference, &x0)?))
            })
            .collect()
    }
}

/// `n` ancestral samples from `ckpt` in the model's own space.
pub fn sample_raw(ckpt: &Checkpoint, n: usize, seed: u64) -> Result<Tensor> {
    let s = ckpt.noise_schedule()?;
    let d = ckpt.model.config.input_dim;
    let mut rng = Rng::substream(seed, 0x7361_6d70_6c65);
    ancestral_sample(
        &ckpt.model,
        ckpt.model.parameterization,
        &s,
        &[n, d],
        &DenoiserModel::no_condition(n),
        &mut rng,
    )
}

/// `n` ancestral samples from `ckpt`, mapped back to the space of `data`.
pub fn sample_checkpoint(ckpt: &Checkpoint, data: &Dataset, n: usize, seed: u64) -> Result<Tensor> {
    Ok(data.from_model_space(&sample_raw(ckpt, n, seed)?))
}

/// Median wall-clock seconds of one batch-1 ancestral sample, over `reps`
/// timed runs after one warmup.
pub fn time_sampling(ckpt: &Checkpoint, reps: usize) -> Result<f64> {
    let s = ckpt.noise_schedule()?;
    let d = ckpt.model.config.input_dim;
    let cond = DenoiserModel::no_condition(1);
    let mut rng = Rng::seed(0);
    let mut run = || ancestral_sample(&ckpt.model, ckpt.model.parameterization, &s, &[1, d], &cond, &mut rng);
    run()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        run()?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

fn default_step_counts() -> Vec<usize> {
    vec![2, 4, 8, 16, 32, 64]
}

fn default_params() -> Vec<Parameterization> {
    vec![Parameterization::EpsilonPrediction, Parameterization::DataPrediction]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    #[serde(default = "default_step_counts")]
    pub steps: Vec<usize>,
    #[serde(default = "default_params")]
    pub parameterizations: Vec<Parameterization>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            steps: default_step_counts(),
            parameterizations: default_params(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub parameterization: Parameterization,
    pub steps: usize,
    pub outcome: std::result::Result<CellResult, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub report: MetricsReport,
    pub final_loss: f64,
    pub train_seconds: f64,
    pub checkpoint: Checkpoint,
}

fn mode_for(p: Parameterization) -> TrainMode {
    match p {
        Parameterization::EpsilonPrediction => TrainMode::Gradient,
        Parameterization::DataPrediction => TrainMode::Generator,
    }
}

/// Trains and evaluates one (parameterization, steps) cell on `base`'s schedule family.
pub fn run_cell(
    base: &TrainConfig,
    evaluator: &Evaluator,
    param: Parameterization,
    steps: usize,
    observer: &mut dyn TrainObserver,
) -> Result<CellResult> {
    let mut cfg = base.clone();
    cfg.mode = mode_for(param);
    cfg.schedule = base.schedule.with_steps(steps)?;
    cfg.teacher = None;
    let start = Instant::now();
    let out = train(&cfg, observer)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let (report, _) = evaluator.evaluate_checkpoint(&out.checkpoint, evaluator.cfg.seed)?;
    Ok(CellResult {
        report,
        final_loss: out.log.records.last().map_or(f64::NAN, |r| r.loss_recon),
        train_seconds,
        checkpoint: out.checkpoint,
    })
}

/// Every (parameterization, steps) cell with the same data, seed and
/// budget, run across the rayon pool. Failures are recorded per row and
/// the grid continues; rows come back in grid order.
pub fn run_compare(base: &TrainConfig, grid: &CompareConfig, evaluator: &Evaluator) -> Vec<CompareRow> {
    let cells: Vec<(Parameterization, usize)> = grid
        .parameterizations
        .iter()
        .flat_map(|&p| grid.steps.iter().map(move |&t| (p, t)))
        .collect();
    cells
        .into_par_iter()
        .map(|(p, steps)| CompareRow {
            parameterization: p,
            steps,
            outcome: run_cell(base, evaluator, p, steps, &mut ()).map_err(|e| e.to_string()),
        })
        .collect()
}

pub fn write_compare_csv(rows: &[CompareRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["parameterization", "steps", "status", "final_loss", "train_seconds"];
    header.extend(REPORT_HEADER);
    out.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.parameterization.to_string(), r.steps.to_string()];
        match &r.outcome {
            Ok(c) => {
                rec.extend(["ok".to_string(), c.final_loss.to_string(), c.train_seconds.to_string()]);
                rec.extend(c.report.csv_fields());
            }
            Err(e) => {
                rec.push(format!("error: {e}"));
                rec.extend(std::iter::repeat_n(String::new(), 2 + REPORT_HEADER.len()));
            }
        }
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ChainRound {
    /// 0 is the teacher itself.
    pub round: usize,
    pub steps: usize,
    pub checkpoint: Checkpoint,
    pub report: MetricsReport,
}

/// Distils `teacher` down to `target_steps`, evaluating the teacher and every student.
pub fn distill_chain(
    teacher: &Checkpoint,
    target_steps: usize,
    cfg: &TrainConfig,
    evaluator: &Evaluator,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<ChainRound>> {
    let students = halving_chain(teacher, target_steps, cfg, observer)?;
    std::iter::once(teacher.clone())
        .chain(students)
        .enumerate()
        .map(|(round, checkpoint)| {
            let (report, _) = evaluator.evaluate_checkpoint(&checkpoint, evaluator.cfg.seed)?;
            Ok(ChainRound {
                round,
                steps: checkpoint.noise_schedule()?.steps(),
                checkpoint,
                report,
            })
        })
        .collect()
}

pub fn write_chain_csv(rounds: &[ChainRound], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["round", "steps"];
    header.extend(REPORT_HEADER);
    out.write_record(&header).map_err(csv_err)?;
    for r in rounds {
        let mut rec = vec![r.round.to_string(), r.steps.to_string()];
        rec.extend(r.report.csv_fields());
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MixtureSpec;
    use crate::schedule::ScheduleSpec;

    fn mixture() -> DatasetSpec {
        DatasetSpec::GaussianMixture2d(MixtureSpec {
            modes: 4,
            radius: 2.0,
            std: 0.05,
            samples: 256,
            seed: 1,
        })
    }

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::new(TrainMode::Generator, ScheduleSpec::default_linear(4), mixture());
        cfg.denoiser.hidden_dims = vec![16];
        cfg.denoiser.time_embed_dim = 4;
        cfg.steps = 3;
        cfg.batch_size = 8;
        cfg
    }

    fn tiny_eval() -> EvalConfig {
        EvalConfig {
            samples: 64,
            reference: 64,
            ..EvalConfig::default()
        }
    }

    #[test]
    fn training_data_against_itself_is_clean() {
        let ev = Evaluator::new(&mixture().with_samples(10_000), &EvalConfig::default()).unwrap();
        let r = ev.evaluate(&ev.train.samples).unwrap();
        assert_eq!(r.ndb, 0);
        assert!(r.js < 1e-12);
        assert_eq!(ev.bins.k(), 4);
    }

    #[test]
    fn compare_grid_has_one_row_per_cell() {
        let ev = Evaluator::new(&mixture(), &tiny_eval()).unwrap();
        let grid = CompareConfig {
            steps: vec![2, 4],
            parameterizations: default_params(),
        };
        let rows = run_compare(&tiny_cfg(), &grid, &ev);
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.outcome.is_ok()));
        let mut buf = Vec::new();
        write_compare_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().skip(1).all(|l| !l.contains(",,")));
    }

    #[test]
    fn failed_cells_are_recorded() {
        let ev = Evaluator::new(&mixture(), &tiny_eval()).unwrap();
        let mut cfg = tiny_cfg();
        cfg.schedule = ScheduleSpec::linear(4, 0.1, 1.5);
        let grid = CompareConfig {
            steps: vec![2],
            parameterizations: vec![Parameterization::DataPrediction],
        };
        let rows = run_compare(&cfg, &grid, &ev);
        assert!(rows[0].outcome.is_err());
        let mut buf = Vec::new();
        write_compare_csv(&rows, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("error:"));
    }

    #[test]
    fn chain_evaluates_teacher_and_students() {
        let ev = Evaluator::new(&mixture(), &tiny_eval()).unwrap();
        let mut cfg = tiny_cfg();
        cfg.schedule = ScheduleSpec::default_linear(8);
        let teacher = train(&cfg, &mut ()).unwrap().checkpoint;
        cfg.mode = TrainMode::Distill;
        let rounds = distill_chain(&teacher, 2, &cfg, &ev, &mut ()).unwrap();
        assert_eq!(rounds.iter().map(|r| r.steps).collect::<Vec<_>>(), vec![8, 4, 2]);
        let mut buf = Vec::new();
        write_chain_csv(&rounds, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }

    #[test]
    fn sampling_time_is_positive() {
        let ckpt = train(&tiny_cfg(), &mut ()).unwrap().checkpoint;
        assert!(time_sampling(&ckpt, 3).unwrap() > 0.0);
    }

    #[test]
    fn per_step_curve_covers_every_step() {
        let ev = Evaluator::new(&mixture(), &tiny_eval()).unwrap();
        let ckpt = train(&tiny_cfg(), &mut ()).unwrap().checkpoint;
        let curve = ev.per_step_energy(&ckpt, 32, 0).unwrap();
        assert_eq!(curve.iter().map(|c| c.0).collect::<Vec<_>>(), vec![4, 3, 2, 1]);
    }
}
