//! Progressive distillation: the two-step teacher target and the halving chain.

use crate::checkpoint::Checkpoint;
use crate::denoiser::DenoiserModel;
use crate::diffusion::implied_x0;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::training::{train_distilled, TrainConfig, TrainObserver};

/// Denominators below this make the distillation target ill-conditioned.
pub const DEGENERACY_EPS: f64 = 1e-12;

/// One halving round: a `teacher_steps`-step teacher and a student with half as many.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DistillPlan {
    teacher_steps: usize,
    student_steps: usize,
}

impl DistillPlan {
    pub const STRIDE: usize = 2;

    pub fn new(teacher_steps: usize, student_steps: usize) -> Result<Self> {
        if student_steps == 0 || teacher_steps != Self::STRIDE * student_steps {
            return Err(Error::config(format!(
                "a distillation round halves the step count; got {teacher_steps} -> {student_steps}"
            )));
        }
        Ok(Self {
            teacher_steps,
            student_steps,
        })
    }

    /// Plan whose teacher runs on `s`.
    pub fn halving(s: &NoiseSchedule) -> Result<Self> {
        Self::new(s.steps(), s.steps() / Self::STRIDE)
    }

    pub fn teacher_steps(&self) -> usize {
        self.teacher_steps
    }

    pub fn student_steps(&self) -> usize {
        self.student_steps
    }

    pub fn stride(&self) -> usize {
        Self::STRIDE
    }
}

/// `x_next[i] = a[i] * x0[i] + r[i] * (x[i] - b[i] * x0[i])` row by row.
fn rowwise_ddim(x: &Tensor, x0: &Tensor, a_next: &[f64], ratio: &[f64], a_t: &[f64]) -> Tensor {
    let d = x.row_len();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        let (xr, x0r) = (x.row(i), x0.row(i));
        out.extend(
            xr.iter()
                .zip(x0r)
                .map(|(&xt, &p)| a_next[i] * p + ratio[i] * (xt - a_t[i] * p)),
        );
    }
    Tensor::new(vec![x.rows(), d], out).expect("row-wise DDIM keeps the input shape")
}

fn implied_rows(
    teacher: &DenoiserModel,
    x: &Tensor,
    steps: &[usize],
    c: &Tensor,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    let out = teacher.forward_steps(x, steps, c)?;
    if !out.is_finite() {
        return Err(Error::NonFinite("teacher output during distillation".into()));
    }
    if steps.iter().all(|&t| t == steps[0]) {
        return implied_x0(teacher.parameterization, x, out, steps[0], s);
    }
    let mut rows = Vec::with_capacity(out.len());
    for (i, &t) in steps.iter().enumerate() {
        let xi = Tensor::new(vec![1, x.row_len()], x.row(i).to_vec())?;
        let oi = Tensor::new(vec![1, x.row_len()], out.row(i).to_vec())?;
        rows.extend_from_slice(implied_x0(teacher.parameterization, &xi, oi, t, s)?.data());
    }
    Tensor::new(x.shape().to_vec(), rows)
}

/// Distillation targets for a batch whose row `i` sits at teacher step `steps[i]`.
///
/// Two teacher DDIM steps `t -> t-1 -> t-2` give `x''`; the returned `x0`
/// makes a single DDIM jump `t -> t-2` from `x_t` land exactly on `x''`.
pub fn distill_targets(
    teacher: &DenoiserModel,
    x_t: &Tensor,
    steps: &[usize],
    c: &Tensor,
    s: &NoiseSchedule,
    plan: &DistillPlan,
) -> Result<Tensor> {
    if s.steps() != plan.teacher_steps {
        return Err(Error::contract(format!(
            "plan expects a {}-step teacher schedule, got T = {}",
            plan.teacher_steps,
            s.steps()
        )));
    }
    let stride = plan.stride();
    for &t in steps {
        if t == 0 || t % stride != 0 || t > s.steps() {
            return Err(Error::contract(format!(
                "distillation step t = {t} must be a positive multiple of {stride} up to {}",
                s.steps()
            )));
        }
    }
    if steps.len() != x_t.rows() {
        return Err(Error::shape(format!("{} steps for a batch of {}", steps.len(), x_t.rows())));
    }
    let mid: Vec<usize> = steps.iter().map(|t| t - stride / 2).collect();
    let end: Vec<usize> = steps.iter().map(|t| t - stride).collect();

    let alpha = |v: &[usize]| -> Vec<f64> { v.iter().map(|&t| s.alpha(t)).collect() };
    let ratio = |from: &[usize], to: &[usize]| -> Vec<f64> {
        from.iter().zip(to).map(|(&a, &b)| s.sigma(b) / s.sigma(a)).collect()
    };

    let x0_a = implied_rows(teacher, x_t, steps, c, s)?;
    let x_mid = rowwise_ddim(x_t, &x0_a, &alpha(&mid), &ratio(steps, &mid), &alpha(steps));
    let x0_b = implied_rows(teacher, &x_mid, &mid, c, s)?;
    let x_end = rowwise_ddim(&x_mid, &x0_b, &alpha(&end), &ratio(&mid, &end), &alpha(&mid));

    let d = x_t.row_len();
    let mut out = Vec::with_capacity(x_t.len());
    for (i, &t) in steps.iter().enumerate() {
        let r = s.sigma(end[i]) / s.sigma(t);
        let denom = s.alpha(end[i]) - r * s.alpha(t);
        if denom.abs() < DEGENERACY_EPS {
            return Err(Error::Degenerate(format!(
                "distillation denominator {denom:e} at t = {t}"
            )));
        }
        out.extend(
            x_end
                .row(i)
                .iter()
                .zip(x_t.row(i))
                .map(|(&xe, &xt)| (xe - r * xt) / denom),
        );
    }
    Tensor::new(vec![x_t.rows(), d], out)
}

/// [`distill_targets`] with every row at the same step `t`.
pub fn distill_target(
    teacher: &DenoiserModel,
    x_t: &Tensor,
    t: usize,
    c: &Tensor,
    s: &NoiseSchedule,
    plan: &DistillPlan,
) -> Result<Tensor> {
    distill_targets(teacher, x_t, &vec![t; x_t.rows()], c, s, plan)
}

/// A student that starts as an exact copy of `teacher` on the halved time axis.
pub fn student_from(teacher: &DenoiserModel) -> DenoiserModel {
    let mut student = teacher.clone();
    student.time_stride *= DistillPlan::STRIDE;
    student
}

/// Number of halving rounds from `from` steps down to `to`.
pub fn halving_rounds(from: usize, to: usize) -> Result<usize> {
    if to == 0 || from < to || !from.is_multiple_of(to) || !(from / to).is_power_of_two() {
        return Err(Error::config(format!(
            "cannot halve {from} steps down to {to}: the ratio must be a power of two"
        )));
    }
    Ok((from / to).trailing_zeros() as usize)
}

/// Repeatedly distills `teacher` until it takes `target_steps` steps. Each
/// student starts as a copy of its teacher and teaches the next round.
/// Returns the checkpoint of every round, empty if no halving is needed.
pub fn halving_chain(
    teacher: &Checkpoint,
    target_steps: usize,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<Checkpoint>> {
    let rounds = halving_rounds(teacher.noise_schedule()?.steps(), target_steps)?;
    let mut out: Vec<Checkpoint> = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let current = out.last().unwrap_or(teacher);
        let mut round_cfg = cfg.clone();
        round_cfg.seed = cfg.seed.wrapping_add(round as u64);
        let student = train_distilled(&round_cfg, current, observer)?;
        out.push(student.checkpoint);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::diffusion::{ddim_step, Parameterization};
    use crate::rng::Rng;
    use crate::schedule::ScheduleSpec;

    fn random_teacher(rng: &mut Rng, dim: usize) -> DenoiserModel {
        let cfg = DenoiserConfig {
            hidden_dims: vec![16, 16],
            time_embed_dim: 8,
            ..DenoiserConfig::toy(dim)
        };
        let mut m = DenoiserModel::new(cfg, Parameterization::DataPrediction, rng).unwrap();
        for p in &mut m.params {
            p.value = rng.normal_tensor(p.value.shape()).scale(0.5);
        }
        m
    }

    fn sched(t: usize) -> NoiseSchedule {
        NoiseSchedule::build(&ScheduleSpec::linear(t, 0.05, 0.4)).unwrap()
    }

    #[test]
    fn plan_invariants() {
        assert!(DistillPlan::new(4, 2).is_ok());
        assert!(DistillPlan::new(4, 3).is_err());
        assert!(DistillPlan::new(0, 0).is_err());
        assert_eq!(DistillPlan::new(2, 1).unwrap().stride(), 2);
    }

    #[test]
    fn one_student_step_matches_two_teacher_steps() {
        let mut rng = Rng::seed(11);
        let s = sched(8);
        let plan = DistillPlan::halving(&s).unwrap();
        for _ in 0..10 {
            let teacher = random_teacher(&mut rng, 3);
            let x = rng.normal_tensor(&[4, 3]);
            let c = DenoiserModel::no_condition(4);
            let t = 2 * (1 + rng.below(4));
            let target = distill_target(&teacher, &x, t, &c, &s, &plan).unwrap();
            let x1 = ddim_step(&x, &teacher.forward(&x, t, &c).unwrap(), t, t - 1, &s).unwrap();
            let x2 = ddim_step(&x1, &teacher.forward(&x1, t - 1, &c).unwrap(), t - 1, t - 2, &s).unwrap();
            let student = ddim_step(&x, &target, t, t - 2, &s).unwrap();
            assert!(student.sub(&x2).unwrap().max_abs() < 1e-9);
        }
    }

    #[test]
    fn perfect_teacher_is_a_fixed_point() {
        let mut rng = Rng::seed(2);
        let s = sched(4);
        let plan = DistillPlan::halving(&s).unwrap();
        let mut teacher = random_teacher(&mut rng, 2);
        // A zero net predicts x0 = 0 everywhere, so the target must be 0 too.
        for p in &mut teacher.params {
            p.value = Tensor::zeros(p.value.shape());
        }
        let x = rng.normal_tensor(&[5, 2]);
        for t in [2, 4] {
            let target = distill_target(&teacher, &x, t, &DenoiserModel::no_condition(5), &s, &plan).unwrap();
            assert!(target.max_abs() < 1e-12);
        }
    }

    #[test]
    fn last_round_returns_x_double_prime() {
        let mut rng = Rng::seed(5);
        let s = sched(4);
        let plan = DistillPlan::halving(&s).unwrap();
        let teacher = random_teacher(&mut rng, 2);
        let x = rng.normal_tensor(&[3, 2]);
        let c = DenoiserModel::no_condition(3);
        let target = distill_target(&teacher, &x, 2, &c, &s, &plan).unwrap();
        let x1 = ddim_step(&x, &teacher.forward(&x, 2, &c).unwrap(), 2, 1, &s).unwrap();
        let x2 = ddim_step(&x1, &teacher.forward(&x1, 1, &c).unwrap(), 1, 0, &s).unwrap();
        assert!(target.sub(&x2).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn mixed_steps_match_per_row_targets() {
        let mut rng = Rng::seed(9);
        let s = sched(8);
        let plan = DistillPlan::halving(&s).unwrap();
        let teacher = random_teacher(&mut rng, 2);
        let x = rng.normal_tensor(&[3, 2]);
        let steps = [2, 8, 4];
        let all = distill_targets(&teacher, &x, &steps, &DenoiserModel::no_condition(3), &s, &plan).unwrap();
        for (i, &t) in steps.iter().enumerate() {
            let xi = Tensor::new(vec![1, 2], x.row(i).to_vec()).unwrap();
            let one = distill_target(&teacher, &xi, t, &DenoiserModel::no_condition(1), &s, &plan).unwrap();
            assert!((one.row(0)[0] - all.row(i)[0]).abs() < 1e-14);
            assert!((one.row(0)[1] - all.row(i)[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn odd_step_is_a_contract_error() {
        let mut rng = Rng::seed(1);
        let s = sched(4);
        let plan = DistillPlan::halving(&s).unwrap();
        let teacher = random_teacher(&mut rng, 2);
        let x = rng.normal_tensor(&[1, 2]);
        let err = distill_target(&teacher, &x, 3, &DenoiserModel::no_condition(1), &s, &plan).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn degenerate_denominator_is_reported() {
        // alpha collapses so the denominator of the target vanishes.
        let s = NoiseSchedule::build(&ScheduleSpec::explicit(vec![1.0 - 1e-15, 1.0 - 1e-15, 0.5, 0.5])).unwrap();
        let plan = DistillPlan::halving(&s).unwrap();
        let mut rng = Rng::seed(3);
        let teacher = random_teacher(&mut rng, 2);
        let x = rng.normal_tensor(&[1, 2]);
        let err = distill_target(&teacher, &x, 4, &DenoiserModel::no_condition(1), &s, &plan).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)), "{err}");
    }

    #[test]
    fn student_copies_teacher() {
        let mut rng = Rng::seed(4);
        let teacher = random_teacher(&mut rng, 2);
        let student = student_from(&teacher);
        assert_eq!(student.params, teacher.params);
        assert_eq!(student.time_stride, 2);
    }

    #[test]
    fn round_counts() {
        assert_eq!(halving_rounds(4, 2).unwrap(), 1);
        assert_eq!(halving_rounds(16, 2).unwrap(), 3);
        assert_eq!(halving_rounds(4, 4).unwrap(), 0);
        assert!(halving_rounds(12, 2).is_err());
        assert!(halving_rounds(2, 4).is_err());
    }
}
