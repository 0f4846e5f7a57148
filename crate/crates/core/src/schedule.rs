//! Discrete noise schedules.
//!
//! For per-step variances `beta[1..=T]` the signal and noise amplitudes are
//! `alpha[t] = prod_{i<=t} sqrt(1 - beta[i])` and `sigma[t] = sqrt(1 - alpha[t]^2)`,
//! with the boundary `alpha[0] = 1`, `sigma[0] = 0`.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.6;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
const ALPHABAR_BETA_CLIP: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `beta` evenly spaced from `beta_min` to `beta_max`.
    Linear,
    /// `beta_t = cos(0.5 pi t / (T + 1))`, decreasing in `t`.
    PaperCosine,
    /// Squared-cosine cumulative signal with offset `s`; `beta` from consecutive ratios.
    AlphabarCosine,
    /// Betas listed verbatim. Used for strided (distilled) schedules.
    Explicit,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub betas: Option<Vec<f64>>,
}

/// Serializable `{kind, T, params}` descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(default)]
    pub params: ScheduleParams,
}

impl ScheduleSpec {
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps,
            params: ScheduleParams {
                beta_min: Some(beta_min),
                beta_max: Some(beta_max),
                ..Default::default()
            },
        }
    }

    pub fn default_linear(steps: usize) -> Self {
        Self::linear(steps, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
    }

    pub fn paper_cosine(steps: usize) -> Self {
        Self {
            kind: ScheduleKind::PaperCosine,
            steps,
            params: ScheduleParams::default(),
        }
    }

    pub fn alphabar_cosine(steps: usize, s: f64) -> Self {
        Self {
            kind: ScheduleKind::AlphabarCosine,
            steps,
            params: ScheduleParams {
                s: Some(s),
                ..Default::default()
            },
        }
    }

    pub fn explicit(betas: Vec<f64>) -> Self {
        Self {
            kind: ScheduleKind::Explicit,
            steps: betas.len(),
            params: ScheduleParams {
                betas: Some(betas),
                ..Default::default()
            },
        }
    }

    /// Same family with a different step count. Explicit schedules cannot be resized.
    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        if self.kind == ScheduleKind::Explicit {
            return Err(Error::config("an explicit schedule has a fixed step count"));
        }
        Ok(Self {
            steps,
            ..self.clone()
        })
    }

    fn betas(&self) -> Result<Vec<f64>> {
        let t_max = self.steps;
        if t_max < 1 {
            return Err(Error::config("schedule needs T >= 1"));
        }
        let p = &self.params;
        let reject = |name: &str, present: bool| {
            if present {
                Err(Error::config(format!(
                    "schedule parameter `{name}` does not apply to kind {:?}",
                    self.kind
                )))
            } else {
                Ok(())
            }
        };
        let betas = match self.kind {
            ScheduleKind::Linear => {
                reject("s", p.s.is_some())?;
                reject("betas", p.betas.is_some())?;
                let lo = p.beta_min.unwrap_or(DEFAULT_BETA_MIN);
                let hi = p.beta_max.unwrap_or(DEFAULT_BETA_MAX);
                // numpy.linspace convention: a single step takes `lo`
                if t_max == 1 {
                    vec![lo]
                } else {
                    (0..t_max)
                        .map(|i| lo + (hi - lo) * i as f64 / (t_max - 1) as f64)
                        .collect()
                }
            }
            ScheduleKind::PaperCosine => {
                reject("beta_min", p.beta_min.is_some())?;
                reject("beta_max", p.beta_max.is_some())?;
                reject("s", p.s.is_some())?;
                reject("betas", p.betas.is_some())?;
                (1..=t_max)
                    .map(|t| (FRAC_PI_2 * t as f64 / (t_max + 1) as f64).cos())
                    .collect()
            }
            ScheduleKind::AlphabarCosine => {
                reject("beta_min", p.beta_min.is_some())?;
                reject("beta_max", p.beta_max.is_some())?;
                reject("betas", p.betas.is_some())?;
                let s = p.s.unwrap_or(DEFAULT_COSINE_OFFSET);
                if !(s >= 0.0) {
                    return Err(Error::config(format!("cosine offset s = {s} must be >= 0")));
                }
                let f = |t: usize| {
                    let u = (t as f64 / t_max as f64 + s) / (1.0 + s);
                    (u * FRAC_PI_2).cos().powi(2)
                };
                (1..=t_max)
                    .map(|t| (1.0 - f(t) / f(t - 1)).min(ALPHABAR_BETA_CLIP))
                    .collect()
            }
            ScheduleKind::Explicit => {
                reject("beta_min", p.beta_min.is_some())?;
                reject("beta_max", p.beta_max.is_some())?;
                reject("s", p.s.is_some())?;
                let b = p
                    .betas
                    .clone()
                    .ok_or_else(|| Error::config("explicit schedule requires `betas`"))?;
                if b.len() != t_max {
                    return Err(Error::config(format!(
                        "explicit schedule lists {} betas but T = {t_max}",
                        b.len()
                    )));
                }
                b
            }
        };
        Ok(betas)
    }
}

/// Constants at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConstants {
    pub alpha: f64,
    pub sigma: f64,
    /// Absent at `t = 0`.
    pub beta: Option<f64>,
}

/// Precomputed `beta`, `alpha`, `sigma` for steps `0..=T`. Immutable.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    /// Index 0 is a placeholder; steps are 1-based.
    beta: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(spec: &ScheduleSpec) -> Result<Self> {
        let betas = spec.betas()?;
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Schedule { t: i + 1, beta: b });
            }
        }
        let mut beta = Vec::with_capacity(betas.len() + 1);
        let mut alpha = Vec::with_capacity(betas.len() + 1);
        beta.push(0.0);
        alpha.push(1.0);
        for &b in &betas {
            beta.push(b);
            alpha.push(alpha.last().unwrap() * (1.0 - b).sqrt());
        }
        let sigma = alpha.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect();
        Ok(Self {
            spec: spec.clone(),
            beta,
            alpha,
            sigma,
        })
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            Err(Error::Index {
                index: t,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn lookup(&self, t: usize) -> Result<StepConstants> {
        self.check(t)?;
        Ok(StepConstants {
            alpha: self.alpha[t],
            sigma: self.sigma[t],
            beta: (t > 0).then(|| self.beta[t]),
        })
    }

    /// Panics when `t > T`; use [`lookup`](Self::lookup) for checked access.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn beta(&self, t: usize) -> Option<f64> {
        (t > 0).then(|| self.beta[t])
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// Schedule over steps `{stride, 2·stride, …, T}` reindexed to `1..=T/stride`.
    pub fn strided(&self, stride: usize) -> Result<Self> {
        if stride == 0 || !self.steps().is_multiple_of(stride) {
            return Err(Error::config(format!(
                "stride {stride} does not divide T = {}",
                self.steps()
            )));
        }
        if stride == 1 {
            return Ok(self.clone());
        }
        let betas = (1..=self.steps() / stride)
            .map(|k| {
                let r = self.alpha[k * stride] / self.alpha[(k - 1) * stride];
                1.0 - r * r
            })
            .collect();
        Self::build(&ScheduleSpec::explicit(betas))
    }
}
