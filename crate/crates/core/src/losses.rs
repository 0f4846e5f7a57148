//! Training objectives: noise-space and data-space MSE, the denoising
//! score-matching form, and a differentiable windowed SSIM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{CustomOp, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_recon: f64,
    pub w_ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_recon: 1.0,
            w_ssim: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_recon >= 0.0 && self.w_ssim >= 0.0) {
            return Err(Error::config(format!(
                "loss weights must be >= 0, got recon {} / ssim {}",
                self.w_recon, self.w_ssim
            )));
        }
        Ok(())
    }
}

/// Mean squared error.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.same_shape(target, "mse")?;
    let n = pred.len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Noise-space objective `mean |eps_pred - eps|^2`.
pub fn loss_eps(eps_pred: &Tensor, eps_true: &Tensor) -> Result<f64> {
    mse(eps_pred, eps_true)
}

/// Data-space objective `mean |x0_pred - target|^2`; the target is the clean
/// sample or a distillation target.
pub fn loss_x0(x0_pred: &Tensor, target: &Tensor) -> Result<f64> {
    mse(x0_pred, target)
}

/// Denoising score matching against the kernel score `-eps / sigma_t`.
pub fn loss_score_matching(
    score_pred: &Tensor,
    eps_true: &Tensor,
    t: usize,
    s: &NoiseSchedule,
) -> Result<f64> {
    let c = s.lookup(t)?;
    if t == 0 {
        return Err(Error::contract("score matching is undefined at t = 0"));
    }
    let target = eps_true.scale(-1.0 / c.sigma);
    mse(score_pred, &target)
}

/// MSE on the tape. Pass the target as a constant to stop its gradient.
pub fn mse_on<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    pred.sub(target)?.square()?.mean()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimConfig {
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    /// 7x7 uniform window, dynamic range 1.
    fn default() -> Self {
        Self {
            window: 7,
            c1: 0.01f64.powi(2),
            c2: 0.03f64.powi(2),
        }
    }
}

fn check_ssim(h: usize, w: usize, cfg: &SsimConfig) -> Result<()> {
    if cfg.window == 0 || cfg.window > h.min(w) {
        return Err(Error::config(format!(
            "SSIM window {} does not fit a {h}x{w} image",
            cfg.window
        )));
    }
    if !(cfg.c1 > 0.0 && cfg.c2 > 0.0) {
        return Err(Error::config("SSIM stabilizers c1, c2 must be > 0"));
    }
    Ok(())
}

/// Mean SSIM over all `window x window` positions of two `h x w` row-major
/// images, and optionally its gradient with respect to both images.
fn ssim_core(
    a: &[f64],
    b: &[f64],
    h: usize,
    w: usize,
    cfg: &SsimConfig,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> f64 {
    let k = cfg.window;
    let n = (k * k) as f64;
    let positions = ((h - k + 1) * (w - k + 1)) as f64;
    let mut total = 0.0;
    let mut grads = grads;
    for r0 in 0..=h - k {
        for c0 in 0..=w - k {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + k {
                for c in c0..c0 + k {
                    let (x, y) = (a[r * w + c], b[r * w + c]);
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            let a1 = 2.0 * ma * mb + cfg.c1;
            let a2 = 2.0 * cov + cfg.c2;
            let b1 = ma * ma + mb * mb + cfg.c1;
            let b2 = va + vb + cfg.c2;
            let s = a1 * a2 / (b1 * b2);
            total += s;

            if let Some((ga, gb)) = grads.as_mut() {
                let scale = 2.0 / (n * positions);
                let den = b1 * b2;
                for r in r0..r0 + k {
                    for c in c0..c0 + k {
                        let i = r * w + c;
                        let (da, db) = (a[i] - ma, b[i] - mb);
                        ga[i] += scale * ((mb * a2 + a1 * db) / den - s * (ma / b1 + da / b2));
                        gb[i] += scale * ((ma * a2 + a1 * da) / den - s * (mb / b1 + db / b2));
                    }
                }
            }
        }
    }
    total / positions
}

/// SSIM of two 2-D images with values in `[0, 1]`.
pub fn ssim(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    a.same_shape(b, "ssim")?;
    let (h, w) = a.dims2()?;
    check_ssim(h, w, cfg)?;
    Ok(ssim_core(a.data(), b.data(), h, w, cfg, None))
}

pub fn loss_ssim(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    Ok(1.0 - ssim(a, b, cfg)?)
}

struct SsimLossOp {
    height: usize,
    width: usize,
    cfg: SsimConfig,
}

impl CustomOp for SsimLossOp {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        let g = grad_output.data()[0];
        let rows = a.rows();
        let px = self.height * self.width;
        let mut ga = vec![0.0; a.len()];
        let mut gb = vec![0.0; b.len()];
        for i in 0..rows {
            let span = i * px..(i + 1) * px;
            ssim_core(
                &a.data()[span.clone()],
                &b.data()[span.clone()],
                self.height,
                self.width,
                &self.cfg,
                Some((&mut ga[span.clone()], &mut gb[span])),
            );
        }
        // loss = 1 - mean_i ssim_i
        let k = -g / rows as f64;
        vec![
            Tensor::new(a.shape().to_vec(), ga.into_iter().map(|v| k * v).collect()).unwrap(),
            Tensor::new(b.shape().to_vec(), gb.into_iter().map(|v| k * v).collect()).unwrap(),
        ]
    }
}

/// `1 - mean_i SSIM(pred_i, target_i)` over a batch of flattened images `[B, h*w]`.
pub fn ssim_loss_on<'t>(
    pred: Var<'t>,
    target: Var<'t>,
    height: usize,
    width: usize,
    cfg: &SsimConfig,
) -> Result<Var<'t>> {
    check_ssim(height, width, cfg)?;
    let value = {
        let (a, b) = (pred.value(), target.value());
        a.same_shape(&b, "ssim loss")?;
        let (rows, cols) = a.dims2()?;
        if cols != height * width {
            return Err(Error::shape(format!(
                "rows of {cols} pixels are not {height}x{width} images"
            )));
        }
        let px = height * width;
        let total: f64 = (0..rows)
            .map(|i| {
                let span = i * px..(i + 1) * px;
                ssim_core(&a.data()[span.clone()], &b.data()[span], height, width, cfg, None)
            })
            .sum();
        Tensor::scalar(1.0 - total / rows as f64)
    };
    Ok(pred.tape().custom(
        &[pred, target],
        value,
        SsimLossOp {
            height,
            width,
            cfg: *cfg,
        },
    ))
}
