//! Training loops for noise-prediction, data-prediction and distilled
//! students, with CSV run logs and periodic checkpoint hooks.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, DatasetSpec, Split};
use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::diffusion::{csv_err, Parameterization};
use crate::distill::{distill_targets, student_from, DistillPlan};
use crate::error::{Error, Result};
use crate::losses::{mse_on, ssim_loss_on, LossWeights, SsimConfig};
use crate::rng::Rng;
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Noise prediction.
    Gradient,
    /// Clean-data prediction.
    Generator,
    Distill,
}

impl TrainMode {
    pub fn parameterization(self) -> Parameterization {
        match self {
            TrainMode::Gradient => Parameterization::EpsilonPrediction,
            TrainMode::Generator | TrainMode::Distill => Parameterization::DataPrediction,
        }
    }
}

fn default_batch() -> usize {
    64
}

fn default_steps() -> usize {
    20_000
}

fn default_lr() -> f64 {
    AdamConfig::default().lr
}

fn default_interval() -> usize {
    1_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub schedule: ScheduleSpec,
    pub denoiser: DenoiserConfig,
    pub dataset: DatasetSpec,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_interval")]
    pub log_interval: usize,
    #[serde(default = "default_interval")]
    pub checkpoint_interval: usize,
    /// Teacher checkpoint for `mode = distill`.
    #[serde(default)]
    pub teacher: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, schedule: ScheduleSpec, dataset: DatasetSpec) -> Self {
        Self {
            mode,
            schedule,
            denoiser: DenoiserConfig::toy(dataset.dim()),
            dataset,
            batch_size: default_batch(),
            steps: default_steps(),
            learning_rate: default_lr(),
            weights: LossWeights::default(),
            seed: 0,
            log_interval: default_interval(),
            checkpoint_interval: default_interval(),
            teacher: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.log_interval == 0 || self.checkpoint_interval == 0 {
            return Err(Error::config("log_interval and checkpoint_interval must be >= 1"));
        }
        if self.mode == TrainMode::Distill && self.teacher.is_none() {
            return Err(Error::config("mode = distill needs a teacher checkpoint"));
        }
        self.weights.validate()?;
        self.dataset.validate()?;
        self.denoiser.validate()?;
        if self.mode != TrainMode::Distill {
            NoiseSchedule::build(&self.schedule)?;
            if self.denoiser.input_dim != self.dataset.dim() {
                return Err(Error::config(format!(
                    "denoiser input_dim {} does not match dataset dimension {}",
                    self.denoiser.input_dim,
                    self.dataset.dim()
                )));
            }
        }
        if self.denoiser.condition_dim != 0 {
            return Err(Error::config("the synthetic datasets carry no conditioning; set condition_dim = 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss_recon: f64,
    pub loss_ssim: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    /// CSV with header `step,loss_recon,loss_ssim,grad_norm,seconds`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "loss_recon", "loss_ssim", "grad_norm", "seconds"])
            .map_err(csv_err)?;
        for r in &self.records {
            out.serialize((r.step, r.loss_recon, r.loss_ssim, r.grad_norm, r.seconds))
                .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Hooks called from the training thread.
pub trait TrainObserver {
    fn on_log(&mut self, _record: &LogRecord) {}
    fn on_checkpoint(&mut self, _step: usize, _checkpoint: &Checkpoint) {}
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: RunLog,
}

impl TrainOutcome {
    pub fn model(&self) -> &DenoiserModel {
        &self.checkpoint.model
    }
}

enum Targets<'a> {
    Eps,
    X0,
    Teacher {
        model: &'a DenoiserModel,
        schedule: &'a NoiseSchedule,
        plan: DistillPlan,
    },
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    /// Schedule on the student's (trained model's) own time axis.
    schedule: &'a NoiseSchedule,
    schedule_spec: ScheduleSpec,
    /// Teacher-scale steps per student step.
    step_scale: usize,
    targets: Targets<'a>,
    data: Dataset,
}

fn per_row(steps: &[usize], d: usize, f: impl Fn(usize) -> f64) -> Tensor {
    let mut out = Vec::with_capacity(steps.len() * d);
    for &t in steps {
        out.extend(std::iter::repeat_n(f(t), d));
    }
    Tensor::new(vec![steps.len(), d], out).expect("row coefficients match the batch")
}

impl Loop<'_> {
    fn run(&self, mut model: DenoiserModel, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
        let cfg = self.cfg;
        let mut rng = Rng::substream(cfg.seed, 0x0062_6174_6368);
        let adam_cfg = AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(adam_cfg, &model.params);
        let x_all = self.data.model_space();
        let n = self.data.len();
        let d = self.data.dim();
        let image = self.data.image_shape.filter(|_| cfg.weights.w_ssim > 0.0);
        let ssim_cfg = SsimConfig::default();
        let big_t = self.schedule.steps();
        let start = Instant::now();
        let mut log = RunLog::default();

        for step in 1..=cfg.steps {
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(n)).collect();
            let x0 = x_all.select_rows(&idx);
            let steps: Vec<usize> = (0..cfg.batch_size).map(|_| 1 + rng.below(big_t)).collect();
            let eps = rng.normal_tensor(&[cfg.batch_size, d]);
            let a = per_row(&steps, d, |t| self.schedule.alpha(t));
            let g = per_row(&steps, d, |t| self.schedule.sigma(t));
            let x_t = a.mul(&x0)?.add(&g.mul(&eps)?)?;
            let cond = DenoiserModel::no_condition(cfg.batch_size);

            let target = match &self.targets {
                Targets::Eps => eps.clone(),
                Targets::X0 => x0.clone(),
                Targets::Teacher {
                    model: teacher,
                    schedule,
                    plan,
                } => {
                    let teacher_steps: Vec<usize> = steps.iter().map(|t| t * self.step_scale).collect();
                    distill_targets(teacher, &x_t, &teacher_steps, &cond, schedule, plan)?
                }
            };

            let tape = Tape::new();
            let params: Vec<Var<'_>> = model.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
            let xv = tape.constant(x_t.clone());
            let cv = tape.constant(cond);
            let out = model.forward_on(&tape, &params, xv, &steps, cv)?;
            let recon = mse_on(out, tape.constant(target.clone()))?;
            let mut loss = recon.scale(cfg.weights.w_recon)?;
            let mut ssim_value = 0.0;
            if let Some((h, w)) = image {
                let (pred_x0, ref_x0) = match self.targets {
                    Targets::Eps => {
                        // x0 = x_t / alpha - (sigma / alpha) * eps_hat
                        let inv_a = per_row(&steps, d, |t| 1.0 / self.schedule.alpha(t));
                        let k = tape.constant(g.mul(&inv_a)?);
                        let base = tape.constant(x_t.mul(&inv_a)?);
                        (base.sub(out.mul(k)?)?, x0.clone())
                    }
                    _ => (out, target.clone()),
                };
                let half = tape.constant(Tensor::full(&[cfg.batch_size, d], 0.5));
                let p01 = pred_x0.scale(0.5)?.add(half)?;
                let r01 = tape.constant(ref_x0.map(|v| 0.5 * v + 0.5));
                let ls = ssim_loss_on(p01, r01, h, w, &ssim_cfg)?;
                ssim_value = ls.value().item()?;
                loss = loss.add(ls.scale(cfg.weights.w_ssim)?)?;
            }
            let loss_value = loss.value().item()?;
            let recon_value = recon.value().item()?;
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    last_good: Box::new(model),
                });
            }
            let grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = params.iter().map(|&p| grads.wrt(p)).collect();
            drop(tape);
            let grad_norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            if !grad_norm.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    last_good: Box::new(model),
                });
            }
            adam.step(&mut model.params, &grads)?;

            if step % cfg.log_interval == 0 || step == cfg.steps {
                let rec = LogRecord {
                    step,
                    loss_recon: recon_value,
                    loss_ssim: ssim_value,
                    grad_norm,
                    seconds: start.elapsed().as_secs_f64(),
                };
                observer.on_log(&rec);
                log.records.push(rec);
            }
            if step % cfg.checkpoint_interval == 0 && step != cfg.steps {
                observer.on_checkpoint(step, &self.checkpoint(model.clone()));
            }
        }
        let checkpoint = self.checkpoint(model);
        observer.on_checkpoint(cfg.steps, &checkpoint);
        Ok(TrainOutcome { checkpoint, log })
    }

    fn checkpoint(&self, model: DenoiserModel) -> Checkpoint {
        Checkpoint::new(model, self.schedule_spec.clone(), self.cfg.seed)
    }
}

fn fresh(cfg: &TrainConfig, mode: TrainMode, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    if cfg.mode != mode {
        return Err(Error::config(format!(
            "config mode is {:?}, expected {mode:?}",
            cfg.mode
        )));
    }
    cfg.validate()?;
    let schedule = NoiseSchedule::build(&cfg.schedule)?;
    let mut init_rng = Rng::substream(cfg.seed, 0x696e_6974);
    let model = DenoiserModel::new(cfg.denoiser.clone(), mode.parameterization(), &mut init_rng)?;
    let lp = Loop {
        cfg,
        schedule: &schedule,
        schedule_spec: cfg.schedule.clone(),
        step_scale: 1,
        targets: if mode == TrainMode::Gradient { Targets::Eps } else { Targets::X0 },
        data: cfg.dataset.generate(Split::Train)?,
    };
    lp.run(model, observer)
}

/// Noise-prediction training: minimise `|eps_hat(x_t, t) - eps|^2` with
/// `t ~ Unif{1..T}`, plus SSIM on the implied `x0` for image data.
pub fn train_gradient(cfg: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    fresh(cfg, TrainMode::Gradient, observer)
}

/// Data-prediction training: minimise `|x0_hat(x_t, t) - x0|^2`, plus SSIM for image data.
pub fn train_generator(cfg: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    fresh(cfg, TrainMode::Generator, observer)
}

/// Distils `teacher` into a student with half its steps. The student starts
/// as an exact copy and regresses on two-step teacher targets at
/// `t ~ 2 * Unif{1..T/2}`. `cfg.schedule`, `cfg.denoiser` and `cfg.teacher`
/// are ignored in favour of the teacher checkpoint.
pub fn train_distilled(
    cfg: &TrainConfig,
    teacher: &Checkpoint,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.mode = TrainMode::Distill;
    cfg.teacher.get_or_insert_with(|| PathBuf::from("<in memory>"));
    cfg.validate()?;
    if teacher.model.parameterization != Parameterization::DataPrediction {
        return Err(Error::config(format!(
            "distillation needs a data-prediction teacher, got {}",
            teacher.model.parameterization
        )));
    }
    teacher.expect_dims(cfg.dataset.dim(), 0)?;
    let teacher_schedule = teacher.noise_schedule()?;
    let plan = DistillPlan::halving(&teacher_schedule)?;
    let student_schedule = teacher_schedule.strided(plan.stride())?;
    let lp = Loop {
        cfg: &cfg,
        schedule: &student_schedule,
        schedule_spec: student_schedule.spec().clone(),
        step_scale: plan.stride(),
        targets: Targets::Teacher {
            model: &teacher.model,
            schedule: &teacher_schedule,
            plan,
        },
        data: cfg.dataset.generate(Split::Train)?,
    };
    lp.run(student_from(&teacher.model), observer)
}

/// Dispatches on `cfg.mode`, loading the teacher from disk for distillation.
pub fn train(cfg: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    match cfg.mode {
        TrainMode::Gradient => train_gradient(cfg, observer),
        TrainMode::Generator => train_generator(cfg, observer),
        TrainMode::Distill => {
            cfg.validate()?;
            let path = cfg.teacher.as_ref().expect("validated");
            let teacher = Checkpoint::load(path)?;
            train_distilled(cfg, &teacher, observer)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{MixtureSpec, SpectrogramSpec};
    use crate::losses::loss_x0;

    fn point_dataset() -> DatasetSpec {
        DatasetSpec::GaussianMixture2d(MixtureSpec {
            modes: 1,
            radius: 1.0,
            std: 0.0,
            samples: 16,
            seed: 1,
        })
    }

    fn small(mode: TrainMode, t: usize, steps: usize) -> TrainConfig {
        let mut cfg = TrainConfig::new(mode, ScheduleSpec::default_linear(t), point_dataset());
        cfg.denoiser.hidden_dims = vec![32, 32];
        cfg.denoiser.time_embed_dim = 8;
        cfg.steps = steps;
        cfg.batch_size = 32;
        cfg.learning_rate = 1e-3;
        cfg.log_interval = 1;
        cfg
    }

    #[test]
    fn zero_budget_returns_initial_model() {
        let cfg = small(TrainMode::Generator, 4, 0);
        let out = train_generator(&cfg, &mut ()).unwrap();
        let init = DenoiserModel::new(
            cfg.denoiser.clone(),
            Parameterization::DataPrediction,
            &mut Rng::substream(cfg.seed, 0x696e_6974),
        )
        .unwrap();
        assert_eq!(out.checkpoint.model, init);
        assert!(out.log.records.is_empty());
    }

    #[test]
    fn loss_curve_is_reproducible() {
        let cfg = small(TrainMode::Gradient, 4, 20);
        let strip = |log: &RunLog| -> Vec<(f64, f64)> {
            log.records.iter().map(|r| (r.loss_recon, r.grad_norm)).collect()
        };
        let a = train_gradient(&cfg, &mut ()).unwrap();
        let b = train_gradient(&cfg, &mut ()).unwrap();
        assert_eq!(strip(&a.log), strip(&b.log));
        assert_eq!(a.checkpoint.model, b.checkpoint.model);
        assert!(a.log.records.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn eps_loss_drops_on_a_single_point() {
        // With beta_1 = 1e-4 the eps target is a 100x-steep function of x_t;
        // a moderate first step keeps the regression well conditioned.
        let mut cfg = small(TrainMode::Gradient, 2, 2000);
        cfg.schedule = ScheduleSpec::linear(2, 0.1, 0.5);
        cfg.learning_rate = 2e-3;
        let out = train_gradient(&cfg, &mut ()).unwrap();
        let first = out.log.records[0].loss_recon;
        let tail: f64 = out.log.records[1900..].iter().map(|r| r.loss_recon).sum::<f64>() / 100.0;
        assert!(tail < 0.05 * first, "first {first}, tail {tail}");
        assert_eq!(out.model().parameterization, Parameterization::EpsilonPrediction);
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let cfg = small(TrainMode::Gradient, 2, 1);
        assert!(matches!(train_generator(&cfg, &mut ()), Err(Error::Config(_))));
    }

    #[test]
    fn distill_mode_needs_teacher() {
        let cfg = small(TrainMode::Distill, 2, 1);
        assert!(matches!(train(&cfg, &mut ()), Err(Error::Config(_))));
    }

    #[test]
    fn gradient_teacher_is_rejected() {
        let teacher = train_gradient(&small(TrainMode::Gradient, 4, 2), &mut ()).unwrap();
        let err = train_distilled(&small(TrainMode::Distill, 4, 2), &teacher.checkpoint, &mut ()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn distilled_student_uses_halved_schedule() {
        let teacher = train_generator(&small(TrainMode::Generator, 4, 30), &mut ()).unwrap();
        let mut cfg = small(TrainMode::Distill, 4, 0);
        let s0 = train_distilled(&cfg, &teacher.checkpoint, &mut ()).unwrap();
        assert_eq!(s0.model().params, teacher.model().params);
        assert_eq!(s0.model().time_stride, 2);
        let sched = s0.checkpoint.noise_schedule().unwrap();
        let tsched = teacher.checkpoint.noise_schedule().unwrap();
        assert_eq!(sched.steps(), 2);
        assert!((sched.alpha(1) - tsched.alpha(2)).abs() < 1e-12);
        cfg.steps = 5;
        let s1 = train_distilled(&cfg, &teacher.checkpoint, &mut ()).unwrap();
        assert_ne!(s1.model().params, teacher.model().params);
    }

    #[test]
    fn oracle_teacher_distill_loss_equals_generator_loss() {
        // Single-point data with a teacher fixed at that point: the distill
        // target is the data itself, so both losses coincide at step 1.
        let gen_cfg = small(TrainMode::Generator, 4, 1);
        let mut teacher = DenoiserModel::new(
            gen_cfg.denoiser.clone(),
            Parameterization::DataPrediction,
            &mut Rng::seed(0),
        )
        .unwrap();
        let last = teacher.params.len() - 1;
        teacher.params[last].value = Tensor::vector(vec![1.0, 0.0]);
        let ckpt = Checkpoint::new(teacher.clone(), gen_cfg.schedule.clone(), 0);
        let s = ckpt.noise_schedule().unwrap();
        let plan = DistillPlan::halving(&s).unwrap();
        let x = Rng::seed(4).normal_tensor(&[6, 2]);
        let target = distill_targets(&teacher, &x, &[2, 4, 2, 4, 4, 2], &DenoiserModel::no_condition(6), &s, &plan).unwrap();
        let truth = Tensor::from_rows(&vec![vec![1.0, 0.0]; 6]).unwrap();
        assert!(loss_x0(&target, &truth).unwrap() < 1e-20);

        let d = train_distilled(&small(TrainMode::Distill, 4, 1), &ckpt, &mut ()).unwrap();
        let student_t = student_from(&teacher);
        let pred = student_t.forward(&truth, 1, &DenoiserModel::no_condition(6)).unwrap();
        assert!(loss_x0(&pred, &truth).unwrap() < 1e-20);
        assert!(d.log.records[0].loss_recon < 1e-20);
    }

    #[test]
    fn image_training_logs_ssim() {
        let ds = DatasetSpec::ToySpectrogram(SpectrogramSpec {
            height: 8,
            width: 8,
            harmonics: 2,
            decay: 0.6,
            noise_std: 0.01,
            samples: 8,
            seed: 2,
        });
        for mode in [TrainMode::Gradient, TrainMode::Generator] {
            let mut cfg = TrainConfig::new(mode, ScheduleSpec::default_linear(4), ds.clone());
            cfg.denoiser.hidden_dims = vec![16];
            cfg.denoiser.time_embed_dim = 4;
            cfg.steps = 3;
            cfg.batch_size = 4;
            cfg.log_interval = 1;
            let out = train(&cfg, &mut ()).unwrap();
            assert!(out.log.records.iter().all(|r| r.loss_ssim > 0.0 && r.loss_ssim <= 2.0));
        }
    }

    #[test]
    fn only_recon_and_ssim_terms_exist() {
        let header = {
            let mut buf = Vec::new();
            RunLog::default().write_csv(&mut buf).unwrap();
            String::from_utf8(buf).unwrap()
        };
        assert_eq!(header.trim(), "step,loss_recon,loss_ssim,grad_norm,seconds");
    }

    #[test]
    fn nan_loss_aborts_with_last_good() {
        let mut cfg = small(TrainMode::Generator, 4, 5);
        cfg.learning_rate = 1e300;
        match train_generator(&cfg, &mut ()) {
            Err(Error::NonFiniteLoss { step, last_good }) => {
                assert!(step > 1);
                assert!(last_good.params.iter().all(|p| p.value.is_finite()));
            }
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }
}
