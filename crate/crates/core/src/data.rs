//! Seeded synthetic datasets: a 2-D Gaussian mixture on a circle and toy
//! spectrogram-like images made of horizontal harmonic bands.

use std::f64::consts::TAU;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::csv_err;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub modes: usize,
    pub radius: f64,
    pub std: f64,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrogramSpec {
    pub height: usize,
    pub width: usize,
    pub harmonics: usize,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    pub samples: usize,
    pub seed: u64,
}

fn default_decay() -> f64 {
    0.6
}

fn default_noise() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    #[serde(rename = "gaussian-mixture-2d")]
    GaussianMixture2d(MixtureSpec),
    ToySpectrogram(SpectrogramSpec),
}

/// Which seed-derived substream a dataset is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn label(self) -> u64 {
        match self {
            Split::Train => 0x0074_7261_696e,
            Split::Eval => 0x6576_616c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, d]`; images are flattened row-major with values in `[0, 1]`.
    pub samples: Tensor,
    /// Mode index for the mixture, fundamental row for spectrograms.
    pub labels: Vec<usize>,
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.row_len()
    }

    /// Samples in the space the diffusion model works in: images move to `[-1, 1]`.
    pub fn model_space(&self) -> Tensor {
        match self.image_shape {
            Some(_) => self.samples.map(|v| 2.0 * v - 1.0),
            None => self.samples.clone(),
        }
    }

    /// Inverse of [`model_space`](Self::model_space) for generated samples.
    pub fn from_model_space(&self, x: &Tensor) -> Tensor {
        match self.image_shape {
            Some(_) => x.map(|v| 0.5 * (v + 1.0)),
            None => x.clone(),
        }
    }

    /// CSV with header `x0,…,x{d-1},label`.
    pub fn write_points_csv(&self, w: impl Write) -> Result<()> {
        write_points_csv(&self.samples, Some(&self.labels), w)
    }

    /// Raw little-endian `f64` pixels plus a `<path>.json` sidecar `{"shape":[n,h,w],"dtype":"f64-le"}`.
    pub fn write_images_raw(&self, path: &Path) -> Result<()> {
        let (h, w) = self
            .image_shape
            .ok_or_else(|| Error::config("dataset does not hold images"))?;
        let mut bytes = Vec::with_capacity(self.samples.len() * 8);
        for v in self.samples.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes)?;
        let sidecar = serde_json::json!({ "shape": [self.len(), h, w], "dtype": "f64-le" });
        let mut side = path.as_os_str().to_owned();
        side.push(".json");
        fs::write(side, serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::Io(e.into()))?)?;
        Ok(())
    }
}

pub fn write_points_csv(samples: &Tensor, labels: Option<&[usize]>, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let d = samples.row_len();
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    out.write_record(&header).map_err(csv_err)?;
    for i in 0..samples.rows() {
        let mut rec: Vec<String> = samples.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(l) = labels {
            rec.push(l[i].to_string());
        }
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads the `x*` columns of a points CSV. An empty file body gives `[0, d]`.
pub fn read_points_csv(path: &Path) -> Result<Tensor> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with('x') && h[1..].parse::<usize>().is_ok())
        .map(|(i, _)| i)
        .collect();
    if cols.is_empty() {
        return Err(Error::config(format!("{}: no x0, x1, … columns", path.display())));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        for &c in &cols {
            let field = rec.get(c).unwrap_or("");
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::config(format!("{}: row {}: `{field}` is not a number", path.display(), rows + 1))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Tensor::new(vec![rows, cols.len()], data)
}

impl DatasetSpec {
    pub fn samples(&self) -> usize {
        match self {
            DatasetSpec::GaussianMixture2d(m) => m.samples,
            DatasetSpec::ToySpectrogram(s) => s.samples,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            DatasetSpec::GaussianMixture2d(m) => m.seed,
            DatasetSpec::ToySpectrogram(s) => s.seed,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::GaussianMixture2d(_) => 2,
            DatasetSpec::ToySpectrogram(s) => s.height * s.width,
        }
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        match self {
            DatasetSpec::GaussianMixture2d(_) => None,
            DatasetSpec::ToySpectrogram(s) => Some((s.height, s.width)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples() == 0 {
            return Err(Error::config("dataset needs at least one sample"));
        }
        match self {
            DatasetSpec::GaussianMixture2d(m) => {
                if m.modes == 0 {
                    return Err(Error::config("mixture needs at least one mode"));
                }
                if !(m.std >= 0.0) || !m.radius.is_finite() {
                    return Err(Error::config("mixture radius must be finite and std >= 0"));
                }
            }
            DatasetSpec::ToySpectrogram(s) => {
                if s.height < 8 || s.width < 8 {
                    return Err(Error::config(format!(
                        "toy spectrograms need at least 8x8 pixels, got {}x{}",
                        s.height, s.width
                    )));
                }
                if s.harmonics >= s.height {
                    return Err(Error::config("more harmonics than rows"));
                }
                if !(s.noise_std >= 0.0) || !(s.decay > 0.0) {
                    return Err(Error::config("noise_std must be >= 0 and decay > 0"));
                }
            }
        }
        Ok(())
    }

    /// Same spec with a different sample count.
    pub fn with_samples(&self, n: usize) -> Self {
        let mut out = self.clone();
        match &mut out {
            DatasetSpec::GaussianMixture2d(m) => m.samples = n,
            DatasetSpec::ToySpectrogram(s) => s.samples = n,
        }
        out
    }

    pub fn generate(&self, split: Split) -> Result<Dataset> {
        self.validate()?;
        let mut rng = Rng::substream(self.seed(), split.label());
        Ok(match self {
            DatasetSpec::GaussianMixture2d(m) => gen_mixture(m, &mut rng),
            DatasetSpec::ToySpectrogram(s) => gen_toy_spectrogram(s, &mut rng),
        })
    }
}

/// Mode centres evenly spaced on the circle of radius `radius`.
pub fn mixture_centers(modes: usize, radius: f64) -> Vec<[f64; 2]> {
    (0..modes)
        .map(|k| {
            let a = TAU * k as f64 / modes as f64;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

pub fn gen_mixture(spec: &MixtureSpec, rng: &mut Rng) -> Dataset {
    let centers = mixture_centers(spec.modes, spec.radius);
    let mut data = Vec::with_capacity(spec.samples * 2);
    let mut labels = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let k = rng.below(spec.modes);
        labels.push(k);
        data.push(centers[k][0] + spec.std * rng.normal());
        data.push(centers[k][1] + spec.std * rng.normal());
    }
    Dataset {
        samples: Tensor::from_parts(vec![spec.samples, 2], data),
        labels,
        image_shape: None,
    }
}

/// Allowed fundamental rows: every harmonic `f0 * k` stays inside the image.
pub fn fundamental_rows(spec: &SpectrogramSpec) -> std::ops::RangeInclusive<usize> {
    if spec.harmonics == 0 {
        return 1..=1;
    }
    1..=(spec.height - 1) / spec.harmonics
}

pub fn gen_toy_spectrogram(spec: &SpectrogramSpec, rng: &mut Rng) -> Dataset {
    let (h, w) = (spec.height, spec.width);
    let rows = fundamental_rows(spec);
    let span = rows.end() - rows.start() + 1;
    let mut data = Vec::with_capacity(spec.samples * h * w);
    let mut labels = Vec::with_capacity(spec.samples);
    let mut img = vec![0.0; h * w];
    for _ in 0..spec.samples {
        let f0 = rows.start() + rng.below(span);
        labels.push(f0);
        let phase = TAU * rng.uniform();
        let cycles = 1.0 + rng.uniform();
        img.iter_mut().for_each(|v| *v = 0.0);
        for k in 1..=spec.harmonics {
            let centre = (f0 * k) as f64;
            let amp = spec.decay.powi(k as i32 - 1);
            for r in 0..h {
                let d = r as f64 - centre;
                let profile = (-d * d / (2.0 * 0.6 * 0.6)).exp();
                if profile < 1e-6 {
                    continue;
                }
                for c in 0..w {
                    let env = 0.6 + 0.4 * (TAU * cycles * c as f64 / w as f64 + phase).sin();
                    img[r * w + c] += amp * profile * env;
                }
            }
        }
        if spec.noise_std > 0.0 {
            img.iter_mut().for_each(|v| *v += spec.noise_std * rng.normal());
        }
        let lo = img.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > 1e-12 {
            data.extend(img.iter().map(|v| (v - lo) / (hi - lo)));
        } else {
            data.extend(std::iter::repeat_n(0.0, h * w));
        }
    }
    Dataset {
        samples: Tensor::from_parts(vec![spec.samples, h * w], data),
        labels,
        image_shape: Some((h, w)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn mixture(modes: usize, std: f64, n: usize, seed: u64) -> DatasetSpec {
        DatasetSpec::GaussianMixture2d(MixtureSpec {
            modes,
            radius: 2.0,
            std,
            samples: n,
            seed,
        })
    }

    fn spectro(harmonics: usize, noise: f64, n: usize) -> SpectrogramSpec {
        SpectrogramSpec {
            height: 16,
            width: 12,
            harmonics,
            decay: 0.6,
            noise_std: noise,
            samples: n,
            seed: 5,
        }
    }

    #[test]
    fn mode_means_match_circle() {
        let n = 16_000;
        let ds = mixture(8, 0.05, n, 3).generate(Split::Train).unwrap();
        let centers = mixture_centers(8, 2.0);
        let mut sums = [[0.0; 2]; 8];
        let mut counts = [0usize; 8];
        for i in 0..n {
            let k = ds.labels[i];
            counts[k] += 1;
            sums[k][0] += ds.samples.row(i)[0];
            sums[k][1] += ds.samples.row(i)[1];
        }
        for k in 0..8 {
            let tol = 3.0 * 0.05 / (counts[k] as f64).sqrt();
            for d in 0..2 {
                assert!((sums[k][d] / counts[k] as f64 - centers[k][d]).abs() < tol);
            }
        }
    }

    #[test]
    fn single_noiseless_mode_is_constant() {
        let ds = mixture(1, 0.0, 50, 1).generate(Split::Train).unwrap();
        assert!((0..50).all(|i| ds.samples.row(i) == [2.0, 0.0]));
    }

    #[test]
    fn generation_is_deterministic_and_splits_differ() {
        let spec = mixture(8, 0.1, 100, 9);
        let a = spec.generate(Split::Train).unwrap();
        assert_eq!(a, spec.generate(Split::Train).unwrap());
        assert_ne!(a.samples, spec.generate(Split::Eval).unwrap().samples);
    }

    #[test]
    fn blank_spectrogram() {
        let ds = gen_toy_spectrogram(&spectro(0, 0.0, 3), &mut Rng::seed(1));
        assert!(ds.samples.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spectrogram_range() {
        let ds = gen_toy_spectrogram(&spectro(3, 0.05, 40), &mut Rng::seed(1));
        assert!(ds.samples.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(ds.dim(), 16 * 12);
        let back = ds.from_model_space(&ds.model_space());
        assert!(back.sub(&ds.samples).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn fundamental_rows_are_uniform() {
        let spec = spectro(3, 0.0, 10_000);
        let ds = gen_toy_spectrogram(&spec, &mut Rng::seed(77));
        let rows = fundamental_rows(&spec);
        let k = rows.end() - rows.start() + 1;
        let mut counts = vec![0usize; k];
        for &l in &ds.labels {
            counts[l - rows.start()] += 1;
        }
        let e = 10_000.0 / k as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        let p = 1.0 - ChiSquared::new((k - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2}, p {p}");
    }

    #[test]
    fn small_images_rejected() {
        let mut s = spectro(2, 0.0, 1);
        s.height = 6;
        assert!(DatasetSpec::ToySpectrogram(s).validate().is_err());
    }

    #[test]
    fn spec_parses_from_tagged_json() {
        let spec: DatasetSpec = serde_json::from_str(
            r#"{"kind":"gaussian-mixture-2d","modes":8,"radius":2.0,"std":0.05,"samples":10,"seed":1}"#,
        )
        .unwrap();
        assert_eq!(spec, mixture(8, 0.05, 10, 1));
        let bad = serde_json::from_str::<DatasetSpec>(
            r#"{"kind":"gaussian-mixture-2d","modes":8,"radius":2.0,"std":0.05,"samples":10,"seed":1,"extra":1}"#,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn points_csv_round_trip() {
        let ds = mixture(4, 0.1, 5, 2).generate(Split::Train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pts.csv");
        ds.write_points_csv(fs::File::create(&p).unwrap()).unwrap();
        let back = read_points_csv(&p).unwrap();
        assert_eq!(back, ds.samples);
    }
}
