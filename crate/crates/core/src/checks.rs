//! Self-contained numerical checks of the core invariants, each against an
//! independent oracle. The CLI `selftest` and the acceptance suite run them.

use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::data::{DatasetSpec, MixtureSpec, Split};
use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::diffusion::{ddim_step, iterate_chain, posterior, Langevin, Parameterization};
use crate::distill::{distill_target, DistillPlan};
use crate::error::Result;
use crate::experiment::time_sampling;
use crate::losses::{loss_eps, loss_score_matching, mse_on, ssim, ssim_loss_on, SsimConfig};
use crate::metrics::{fit_bins, ndb_js, BinModel, DEFAULT_ALPHA};
use crate::rng::Rng;
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {} ({:.2}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.detail
        )
    }
}

/// Runs `body`, turning an error into a failed check.
pub fn run_check(name: &'static str, body: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = match body() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    Check {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn families(t: usize) -> [ScheduleSpec; 3] {
    [
        ScheduleSpec::default_linear(t),
        ScheduleSpec::paper_cosine(t),
        ScheduleSpec::alphabar_cosine(t, 0.008),
    ]
}

/// `alpha^2 + sigma^2 = 1` and `alpha_t = alpha_{t-1} sqrt(1 - beta_t)`.
pub fn schedule_identities() -> Check {
    run_check("schedule identities", || {
        let mut worst: f64 = 0.0;
        for t_max in [2, 4, 8, 64] {
            for spec in families(t_max) {
                let s = NoiseSchedule::build(&spec)?;
                for t in 0..=t_max {
                    worst = worst.max((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs());
                    if t > 0 {
                        let b = s.beta(t).expect("t >= 1 has a beta");
                        worst = worst.max((s.alpha(t) - s.alpha(t - 1) * (1.0 - b).sqrt()).abs());
                    }
                }
            }
        }
        Ok((worst <= 1e-12, format!("max deviation {worst:.2e} (tol 1e-12)")))
    })
}

/// Iterated one-step chain against the closed-form marginal.
pub fn forward_chain_consistency() -> Check {
    run_check("forward-chain consistency", || {
        let s = NoiseSchedule::build(&ScheduleSpec::default_linear(4))?;
        let n = 100_000;
        let x0v = 1.5;
        let x0 = Tensor::full(&[n, 1], x0v);
        let mut rng = Rng::seed(20);
        let mut ok = true;
        let mut parts = Vec::new();
        for t in 1..=4 {
            let x = iterate_chain(&x0, t, &s, &mut rng)?;
            let mean = x.mean();
            let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = s.sigma(t) / (n as f64).sqrt();
            let z = (mean - s.alpha(t) * x0v) / se;
            let rel = var / s.sigma(t).powi(2) - 1.0;
            ok &= z.abs() <= 3.0 && rel.abs() <= 0.05;
            parts.push(format!("t={t}: z={z:+.2} var {rel:+.3}"));
        }
        Ok((ok, parts.join("; ")))
    })
}

/// Posterior moments against grid quadrature of
/// `q(x_t | x_{t-1}) q(x_{t-1} | x_0)` in `x_{t-1}`.
pub fn posterior_bayes_oracle() -> Check {
    run_check("posterior Bayes oracle", || {
        let s = NoiseSchedule::build(&ScheduleSpec::default_linear(4))?;
        let (x0v, xtv) = (0.8, -0.3);
        let mut worst: f64 = 0.0;
        for t in 1..=4 {
            let post = posterior(&Tensor::vector(vec![xtv]), &Tensor::vector(vec![x0v]), t, &s)?;
            let (mean, var) = (post.mean.data()[0], post.variance);
            let (qm, qv) = if t == 1 {
                // sigma_0 = 0: the prior on x_0 is a point mass at x0.
                (x0v, 0.0)
            } else {
                let b = s.beta(t).expect("t >= 1");
                let (pm, ps) = (s.alpha(t - 1) * x0v, s.sigma(t - 1));
                let n = 40_001;
                let (lo, hi) = (pm - 12.0 * ps, pm + 12.0 * ps);
                let h = (hi - lo) / (n - 1) as f64;
                let mut w = Vec::with_capacity(n);
                for i in 0..n {
                    let y = lo + h * i as f64;
                    let lik = -(xtv - (1.0 - b).sqrt() * y).powi(2) / (2.0 * b);
                    let prior = -(y - pm).powi(2) / (2.0 * ps * ps);
                    w.push((y, (lik + prior).exp()));
                }
                let z: f64 = w.iter().map(|p| p.1).sum();
                let m: f64 = w.iter().map(|p| p.0 * p.1).sum::<f64>() / z;
                let v: f64 = w.iter().map(|p| (p.0 - m).powi(2) * p.1).sum::<f64>() / z;
                (m, v)
            };
            worst = worst.max((mean - qm).abs()).max((var - qv).abs());
        }
        Ok((worst <= 1e-3, format!("max deviation {worst:.2e} (tol 1e-3)")))
    })
}

fn random_model(rng: &mut Rng, dim: usize, hidden: Vec<usize>, embed: usize, scale: f64) -> Result<DenoiserModel> {
    let cfg = DenoiserConfig {
        hidden_dims: hidden,
        time_embed_dim: embed,
        ..DenoiserConfig::toy(dim)
    };
    let mut m = DenoiserModel::new(cfg, Parameterization::DataPrediction, rng)?;
    for p in &mut m.params {
        p.value = rng.normal_tensor(p.value.shape()).scale(scale);
    }
    Ok(m)
}

/// One student DDIM step with the distillation target lands on the
/// teacher's two-step rollout.
pub fn distill_matching_identity() -> Check {
    run_check("distill-target matching identity", || {
        let mut rng = Rng::seed(4);
        let schedules = [
            NoiseSchedule::build(&ScheduleSpec::default_linear(8))?,
            NoiseSchedule::build(&ScheduleSpec::alphabar_cosine(8, 0.008))?,
        ];
        let mut worst: f64 = 0.0;
        for trial in 0..100 {
            let s = &schedules[trial % 2];
            let plan = DistillPlan::halving(s)?;
            let teacher = random_model(&mut rng, 3, vec![16, 16], 8, 0.5)?;
            let x = rng.normal_tensor(&[4, 3]);
            let c = DenoiserModel::no_condition(4);
            let t = 2 * (1 + rng.below(4));
            let target = distill_target(&teacher, &x, t, &c, s, &plan)?;
            let x1 = ddim_step(&x, &teacher.forward(&x, t, &c)?, t, t - 1, s)?;
            let x2 = ddim_step(&x1, &teacher.forward(&x1, t - 1, &c)?, t - 1, t - 2, s)?;
            let student = ddim_step(&x, &target, t, t - 2, s)?;
            worst = worst.max(student.sub(&x2)?.max_abs());
        }
        Ok((worst <= 1e-9, format!("max |student - teacher| {worst:.2e} over 100 teachers (tol 1e-9)")))
    })
}

/// `t -> t' -> t''` equals `t -> t''` for a fixed clean estimate.
pub fn ddim_semigroup() -> Check {
    run_check("DDIM semigroup", || {
        let mut rng = Rng::seed(5);
        let s = NoiseSchedule::build(&ScheduleSpec::alphabar_cosine(16, 0.008))?;
        let mut worst: f64 = 0.0;
        for _ in 0..500 {
            let t = 2 + rng.below(15);
            let t1 = 1 + rng.below(t - 1);
            let t2 = rng.below(t1);
            let x = rng.normal_tensor(&[3, 2]);
            let x0 = rng.normal_tensor(&[3, 2]);
            let two = ddim_step(&ddim_step(&x, &x0, t, t1, &s)?, &x0, t1, t2, &s)?;
            let one = ddim_step(&x, &x0, t, t2, &s)?;
            worst = worst.max(two.sub(&one)?.max_abs());
        }
        Ok((worst <= 1e-12, format!("max deviation {worst:.2e} (tol 1e-12)")))
    })
}

fn composite_loss<'t>(
    model: &DenoiserModel,
    tape: &'t Tape,
    params: &[Var<'t>],
    x_t: &Tensor,
    steps: &[usize],
    target: &Tensor,
    img: (usize, usize),
) -> Result<Var<'t>> {
    let n = x_t.rows();
    let out = model.forward_on(
        tape,
        params,
        tape.constant(x_t.clone()),
        steps,
        tape.constant(DenoiserModel::no_condition(n)),
    )?;
    let recon = mse_on(out, tape.constant(target.clone()))?;
    let half = tape.constant(Tensor::full(x_t.shape(), 0.5));
    let pred01 = out.scale(0.5)?.add(half)?;
    let ref01 = tape.constant(target.map(|v| 0.5 * v + 0.5));
    let ls = ssim_loss_on(pred01, ref01, img.0, img.1, &SsimConfig::default())?;
    recon.add(ls.scale(0.7)?)
}

/// Tape gradient of denoiser + MSE + SSIM against central differences.
pub fn gradient_correctness() -> Check {
    run_check("gradient correctness", || {
        let mut rng = Rng::seed(6);
        let img = (8, 8);
        let d = img.0 * img.1;
        let mut model = random_model(&mut rng, d, vec![12, 12], 8, 0.3)?;
        let x_t = rng.normal_tensor(&[3, d]);
        let target = rng.normal_tensor(&[3, d]).scale(0.5);
        let steps = [1, 3, 4];
        let value = |m: &DenoiserModel| -> Result<f64> {
            let tape = Tape::new();
            let p: Vec<Var<'_>> = m.params.iter().map(|q| tape.constant(q.value.clone())).collect();
            let v = composite_loss(m, &tape, &p, &x_t, &steps, &target, img)?.value().item()?;
            Ok(v)
        };
        let analytic: Vec<Tensor> = {
            let tape = Tape::new();
            let p: Vec<Var<'_>> = model.params.iter().map(|q| tape.leaf(q.value.clone())).collect();
            let loss = composite_loss(&model, &tape, &p, &x_t, &steps, &target, img)?;
            let g = tape.backward(loss)?;
            p.iter().map(|&v| g.wrt(v)).collect()
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let pi = rng.below(model.params.len());
            let ci = rng.below(model.params[pi].value.len());
            let orig = model.params[pi].value.data()[ci];
            model.params[pi].value.data_mut()[ci] = orig + h;
            let up = value(&model)?;
            model.params[pi].value.data_mut()[ci] = orig - h;
            let down = value(&model)?;
            model.params[pi].value.data_mut()[ci] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[pi].data()[ci];
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        Ok((worst < 1e-4, format!("max relative error {worst:.2e} on 50 coordinates (tol 1e-4)")))
    })
}

/// Score matching with `s = -eps_hat / sigma_t` equals the eps loss over `sigma_t^2`.
pub fn score_eps_equivalence() -> Check {
    run_check("score/eps loss equivalence", || {
        let mut rng = Rng::seed(7);
        let mut worst: f64 = 0.0;
        for spec in families(8) {
            let s = NoiseSchedule::build(&spec)?;
            for t in 1..=8 {
                let eps = rng.normal_tensor(&[5, 3]);
                let eps_hat = rng.normal_tensor(&[5, 3]);
                let score = eps_hat.scale(-1.0 / s.sigma(t));
                let lhs = loss_score_matching(&score, &eps, t, &s)?;
                let rhs = loss_eps(&eps_hat, &eps)? / s.sigma(t).powi(2);
                worst = worst.max((lhs - rhs).abs() / rhs.abs().max(1.0));
            }
        }
        Ok((worst <= 1e-10, format!("max deviation {worst:.2e} (tol 1e-10)")))
    })
}

/// Identity, symmetry and the constant-image closed form.
pub fn ssim_contract() -> Check {
    run_check("SSIM contract", || {
        let cfg = SsimConfig::default();
        let mut rng = Rng::seed(8);
        let mut ok = true;
        let mut asym: f64 = 0.0;
        for _ in 0..20 {
            let a = Tensor::new(vec![10, 9], (0..90).map(|_| rng.uniform()).collect())?;
            let b = Tensor::new(vec![10, 9], (0..90).map(|_| rng.uniform()).collect())?;
            ok &= ssim(&a, &a, &cfg)? == 1.0;
            asym = asym.max((ssim(&a, &b, &cfg)? - ssim(&b, &a, &cfg)?).abs());
        }
        let (p, q) = (0.3, 0.7);
        let closed = (2.0 * p * q + cfg.c1) / (p * p + q * q + cfg.c1);
        let got = ssim(&Tensor::full(&[8, 8], p), &Tensor::full(&[8, 8], q), &cfg)?;
        let dev = (got - closed).abs();
        ok &= asym <= 1e-12 && dev <= 1e-9;
        Ok((
            ok,
            format!("ssim(x,x)==1 exact; asymmetry {asym:.2e}; constant-image {got:.6} vs {closed:.6}"),
        ))
    })
}

/// Langevin on a Gaussian score against the AR(1) stationary law of the
/// discretised chain.
pub fn langevin_stationary() -> Check {
    run_check("Langevin stationary check", || {
        let (mu, v, eta) = (1.25, 0.5, 0.01);
        let chains = 2000;
        let a = 1.0 - eta / (2.0 * v);
        let stationary = eta / (1.0 - a * a);
        let mut rng = Rng::seed(9);
        let x = Langevin::new(eta, 10_000).run(
            |x: &Tensor| x.map(|xi| -(xi - mu) / v),
            &Tensor::full(&[chains, 1], -3.0),
            &mut rng,
        )?;
        let m = x.mean();
        let var = x.data().iter().map(|xi| (xi - m).powi(2)).sum::<f64>() / (chains - 1) as f64;
        let rel = var / stationary - 1.0;
        Ok((
            (m - mu).abs() <= 0.05 && rel.abs() <= 0.10,
            format!("mean {m:.4} (mu {mu}), variance {var:.4} vs {stationary:.4} ({rel:+.3})"),
        ))
    })
}

/// Median batch-1 sampling time grows with the step count.
pub fn sampling_cost_monotone() -> Check {
    run_check("sampling cost monotonicity", || {
        let mut rng = Rng::seed(12);
        let model = random_model(&mut rng, 2, vec![128; 3], 32, 0.1)?;
        let mut times = Vec::new();
        for t in [2, 4, 8, 16] {
            let ckpt = Checkpoint::new(model.clone(), ScheduleSpec::alphabar_cosine(t, 0.008), 0);
            times.push((t, time_sampling(&ckpt, 5)?));
        }
        let ok = times.windows(2).all(|w| w[1].1 > w[0].1);
        let detail = times
            .iter()
            .map(|(t, s)| format!("T={t}: {:.1}us", s * 1e6))
            .collect::<Vec<_>>()
            .join(", ");
        Ok((ok, detail))
    })
}

/// NDB and JS between independent draws of the same distribution.
pub fn metrics_null_calibration() -> Check {
    run_check("metrics null calibration", || {
        let k = 10;
        let n = 10_000;
        let trials = 100;
        let spec = |seed| {
            DatasetSpec::GaussianMixture2d(MixtureSpec {
                modes: 8,
                radius: 2.0,
                std: 0.3,
                samples: n,
                seed,
            })
        };
        let fitted = fit_bins(&spec(1000).generate(Split::Train)?.samples, k, 0)?;
        let mut ndbs = Vec::with_capacity(trials);
        let mut js_max: f64 = 0.0;
        for trial in 0..trials as u64 {
            let train = spec(trial).generate(Split::Train)?.samples;
            let gen = spec(trial).generate(Split::Eval)?.samples;
            let counts = fitted.histogram(&train)?;
            let bins = BinModel {
                centroids: fitted.centroids.clone(),
                proportions: counts.iter().map(|&c| c as f64 / n as f64).collect(),
                train_count: n,
            };
            let r = ndb_js(&bins, &gen, DEFAULT_ALPHA)?;
            ndbs.push(r.ndb as f64);
            js_max = js_max.max(r.js);
        }
        let mean = ndbs.iter().sum::<f64>() / trials as f64;
        let sd = (ndbs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt();
        let se = sd / (trials as f64).sqrt();
        let expected = DEFAULT_ALPHA * k as f64;
        let ok = (mean - expected).abs() <= 2.0 * se && js_max < 0.01;
        Ok((
            ok,
            format!("mean NDB {mean:.3} (expected {expected}, 2 SE = {:.3}); max JS {js_max:.2e}", 2.0 * se),
        ))
    })
}

/// Every fast check (everything except the training experiments).
pub fn invariant_suite() -> Vec<Check> {
    vec![
        schedule_identities(),
        forward_chain_consistency(),
        posterior_bayes_oracle(),
        distill_matching_identity(),
        ddim_semigroup(),
        gradient_correctness(),
        score_eps_equivalence(),
        ssim_contract(),
        langevin_stationary(),
        sampling_cost_monotone(),
        metrics_null_calibration(),
    ]
}
