//! Sample-quality metrics: k-means bins, NDB with a pooled two-proportion
//! z-test, Jensen-Shannon divergence of bin histograms and energy distance.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::diffusion::csv_err;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinModel {
    pub centroids: Tensor,
    pub proportions: Vec<f64>,
    pub train_count: usize,
}

impl BinModel {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn assign(&self, samples: &Tensor) -> Result<Vec<usize>> {
        if samples.row_len() != self.centroids.row_len() {
            return Err(Error::shape(format!(
                "samples have dimension {}, bins were fitted in {}",
                samples.row_len(),
                self.centroids.row_len()
            )));
        }
        Ok(assign(samples, &self.centroids))
    }

    /// Bin counts of `samples`.
    pub fn histogram(&self, samples: &Tensor) -> Result<Vec<usize>> {
        let mut counts = vec![0; self.k()];
        for b in self.assign(samples)? {
            counts[b] += 1;
        }
        Ok(counts)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(x, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(samples: &Tensor, centroids: &Tensor) -> Vec<usize> {
    (0..samples.rows())
        .into_par_iter()
        .map(|i| nearest(samples.row(i), centroids).0)
        .collect()
}

fn kmeans_pp(x: &Tensor, k: usize, rng: &mut Rng) -> Tensor {
    let n = x.rows();
    let mut chosen = vec![rng.below(n)];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.uniform() * total;
            let mut pick = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.below(n)
        };
        chosen.push(next);
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    x.select_rows(&chosen)
}

/// Lloyd iterations from `init`, reseeding empty clusters at the point
/// farthest from its centroid.
pub fn kmeans(x: &Tensor, init: Tensor) -> Result<Tensor> {
    let (k, d) = init.dims2()?;
    if x.row_len() != d {
        return Err(Error::shape(format!("data dim {} vs centroid dim {d}", x.row_len())));
    }
    let n = x.rows();
    let mut centroids = init;
    for _ in 0..KMEANS_MAX_ITER {
        let labels = assign(x, &centroids);
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums[l * d..(l + 1) * d].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| !taken[i])
                .map(|i| (i, sq_dist(x.row(i), centroids.row(labels[i]))))
                .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
                .0;
            taken[far] = true;
            sums[c * d..(c + 1) * d].copy_from_slice(x.row(far));
            counts[c] = 1;
        }
        for c in 0..k {
            for s in &mut sums[c * d..(c + 1) * d] {
                *s /= counts[c] as f64;
            }
        }
        let next = Tensor::new(vec![k, d], sums)?;
        let shift = (0..k)
            .map(|c| sq_dist(next.row(c), centroids.row(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < KMEANS_TOL {
            break;
        }
    }
    Ok(centroids)
}

fn bins_from(train: &Tensor, centroids: Tensor) -> BinModel {
    let mut counts = vec![0usize; centroids.rows()];
    for b in assign(train, &centroids) {
        counts[b] += 1;
    }
    let n = train.rows();
    BinModel {
        proportions: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        centroids,
        train_count: n,
    }
}

/// k-means++ seeded k-means on `train`, then bin proportions.
pub fn fit_bins(train: &Tensor, k: usize, seed: u64) -> Result<BinModel> {
    if k < 2 {
        return Err(Error::config(format!("need at least 2 bins, got {k}")));
    }
    if train.rows() < k {
        return Err(Error::config(format!("{} training samples for {k} bins", train.rows())));
    }
    let mut rng = Rng::substream(seed, 0x6b6d_6561_6e73);
    let init = kmeans_pp(train, k, &mut rng);
    let centroids = kmeans(train, init)?;
    Ok(bins_from(train, centroids))
}

/// k-means on `train` started from caller-supplied centroids.
pub fn fit_bins_from(train: &Tensor, init: Tensor) -> Result<BinModel> {
    if init.rows() < 2 || train.rows() < init.rows() {
        return Err(Error::config(format!(
            "{} initial centroids for {} samples",
            init.rows(),
            train.rows()
        )));
    }
    let centroids = kmeans(train, init)?;
    Ok(bins_from(train, centroids))
}

/// Jensen-Shannon divergence in nats between two histograms (normalised here).
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::shape(format!("histograms of length {} and {}", p.len(), q.len())));
    }
    let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    if !(sp > 0.0 && sq > 0.0) {
        return Err(Error::contract("histograms need positive mass"));
    }
    let kl_half = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let js: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (a / sp, b / sq);
            let m = 0.5 * (a + b);
            0.5 * kl_half(a, m) + 0.5 * kl_half(b, m)
        })
        .sum();
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub bin: usize,
    pub p_train: f64,
    pub p_gen: f64,
    pub z: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ndb: usize,
    pub ndb_fraction: f64,
    pub js: f64,
    pub energy_distance: Option<f64>,
    pub alpha: f64,
    pub n_train: usize,
    pub n_gen: usize,
    pub bins: Vec<BinStat>,
}

pub const REPORT_HEADER: [&str; 8] = [
    "ndb",
    "ndb_fraction",
    "js",
    "energy_distance",
    "k",
    "alpha",
    "n_train",
    "n_gen",
];

impl MetricsReport {
    pub fn k(&self) -> usize {
        self.bins.len()
    }

    /// Values in [`REPORT_HEADER`] order.
    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.ndb.to_string(),
            self.ndb_fraction.to_string(),
            self.js.to_string(),
            self.energy_distance.map(|e| e.to_string()).unwrap_or_default(),
            self.k().to_string(),
            self.alpha.to_string(),
            self.n_train.to_string(),
            self.n_gen.to_string(),
        ]
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(REPORT_HEADER).map_err(csv_err)?;
        out.write_record(self.csv_fields()).map_err(csv_err)?;
        out.flush()?;
        Ok(())
    }

    /// One row per bin: `bin,p_train,p_gen,z,significant`.
    pub fn write_bins_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["bin", "p_train", "p_gen", "z", "significant"])
            .map_err(csv_err)?;
        for b in &self.bins {
            out.serialize((b.bin, b.p_train, b.p_gen, b.z, b.significant))
                .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Pooled two-proportion z statistic of `c1/n1` against `c2/n2`.
pub fn two_proportion_z(c1: usize, n1: usize, c2: usize, n2: usize) -> f64 {
    let (p1, p2) = (c1 as f64 / n1 as f64, c2 as f64 / n2 as f64);
    let pooled = (c1 + c2) as f64 / (n1 + n2) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    if se > 0.0 {
        (p2 - p1) / se
    } else {
        0.0
    }
}

/// Bins `generated` and tests every bin against the training proportions.
pub fn ndb_js(bins: &BinModel, generated: &Tensor, alpha: f64) -> Result<MetricsReport> {
    if generated.rows() == 0 {
        return Err(Error::contract("need at least one generated sample"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("significance level must be in (0, 1), got {alpha}")));
    }
    let counts = bins.histogram(generated)?;
    let n_gen = generated.rows();
    let n_train = bins.train_count;
    let crit = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
    let stats: Vec<BinStat> = (0..bins.k())
        .map(|b| {
            let c_train = (bins.proportions[b] * n_train as f64).round() as usize;
            let z = two_proportion_z(c_train, n_train, counts[b], n_gen);
            BinStat {
                bin: b,
                p_train: bins.proportions[b],
                p_gen: counts[b] as f64 / n_gen as f64,
                z,
                significant: z.abs() > crit,
            }
        })
        .collect();
    let ndb = stats.iter().filter(|s| s.significant).count();
    let p_gen: Vec<f64> = stats.iter().map(|s| s.p_gen).collect();
    Ok(MetricsReport {
        ndb,
        ndb_fraction: ndb as f64 / bins.k() as f64,
        js: js_divergence(&bins.proportions, &p_gen)?,
        energy_distance: None,
        alpha,
        n_train,
        n_gen,
        bins: stats,
    })
}

fn mean_pairwise(a: &Tensor, b: &Tensor) -> f64 {
    let total: f64 = (0..a.rows())
        .into_par_iter()
        .map(|i| {
            let x = a.row(i);
            (0..b.rows()).map(|j| sq_dist(x, b.row(j)).sqrt()).sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    total / (a.rows() * b.rows()) as f64
}

/// `2 E|A - B| - E|A - A'| - E|B - B'|` over all pairs (V-statistic).
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::contract("energy distance needs nonempty sample sets"));
    }
    if a.row_len() != b.row_len() {
        return Err(Error::shape(format!("dims {} and {}", a.row_len(), b.row_len())));
    }
    let e = 2.0 * mean_pairwise(a, b) - mean_pairwise(a, a) - mean_pairwise(b, b);
    Ok(e.max(0.0))
}

/// NDB/JS against `bins` plus energy distance against `reference`.
pub fn evaluate(bins: &BinModel, reference: &Tensor, generated: &Tensor, alpha: f64) -> Result<MetricsReport> {
    let mut report = ndb_js(bins, generated, alpha)?;
    report.energy_distance = Some(energy_distance(reference, generated)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn blobs(n: usize, seed: u64) -> Tensor {
        let mut rng = Rng::seed(seed);
        let mut d = Vec::new();
        for i in 0..n {
            let cx = if i % 2 == 0 { -5.0 } else { 5.0 };
            d.push(cx + 0.1 * rng.normal());
            d.push(0.1 * rng.normal());
        }
        Tensor::new(vec![n, 2], d).unwrap()
    }

    #[test]
    fn js_closed_form() {
        // 0.5 * [0.5 ln(2/3) + 0.5 ln 2] + 0.5 * ln(4/3)
        let js = js_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        let oracle = 0.25 * (2.0f64 / 3.0).ln() + 0.25 * 2f64.ln() + 0.5 * (4.0f64 / 3.0).ln();
        assert!((js - oracle).abs() < 1e-15);
        assert!((js - 0.215762).abs() < 1e-6);
        assert!((js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn two_blobs_split_evenly() {
        let bins = fit_bins(&blobs(1000, 1), 2, 3).unwrap();
        for p in &bins.proportions {
            assert!((p - 0.5).abs() < 1e-12);
        }
        let s: f64 = bins.proportions.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_bin_per_sample() {
        let x = blobs(12, 2);
        let bins = fit_bins(&x, 12, 0).unwrap();
        assert!(bins.proportions.iter().all(|&p| (p - 1.0 / 12.0).abs() < 1e-15));
    }

    #[test]
    fn duplicates_force_a_reseed() {
        // Two distinct points, three copies each; a bad start leaves a cluster empty.
        let x = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![9.0, 0.0],
        ])
        .unwrap();
        let init = Tensor::from_rows(&[vec![0.0, 0.0], vec![100.0, 0.0], vec![200.0, 0.0]]).unwrap();
        let bins = fit_bins_from(&x, init).unwrap();
        assert!(bins.proportions.iter().all(|&p| p > 0.0), "{:?}", bins.proportions);
    }

    #[test]
    fn fitting_is_deterministic() {
        let x = blobs(300, 5);
        assert_eq!(fit_bins(&x, 4, 9).unwrap(), fit_bins(&x, 4, 9).unwrap());
    }

    #[test]
    fn identical_histograms_give_zero() {
        let x = blobs(400, 7);
        let bins = fit_bins(&x, 4, 1).unwrap();
        let r = ndb_js(&bins, &x, DEFAULT_ALPHA).unwrap();
        assert_eq!(r.ndb, 0);
        assert!(r.js.abs() < 1e-15);
    }

    #[test]
    fn collapsed_generator_is_flagged() {
        let x = blobs(2000, 8);
        let bins = fit_bins(&x, 2, 1).unwrap();
        let gen = Tensor::from_rows(&vec![vec![-5.0, 0.0]; 500]).unwrap();
        let r = ndb_js(&bins, &gen, DEFAULT_ALPHA).unwrap();
        assert_eq!(r.ndb, 2);
        assert!((r.js - 0.215762).abs() < 1e-6);
    }

    #[test]
    fn null_draws_rarely_flag_bins() {
        let bins = fit_bins(&blobs(10_000, 11), 10, 0).unwrap();
        let r = ndb_js(&bins, &blobs(10_000, 12), DEFAULT_ALPHA).unwrap();
        assert!(r.ndb <= 3, "ndb {}", r.ndb);
        assert!(r.js < 0.01);
    }

    fn energy_oracle(a: &Tensor, b: &Tensor) -> f64 {
        let mean = |p: &Tensor, q: &Tensor| {
            let mut s = 0.0;
            for i in 0..p.rows() {
                for j in 0..q.rows() {
                    let mut d2 = 0.0;
                    for k in 0..p.row_len() {
                        d2 += (p.row(i)[k] - q.row(j)[k]).powi(2);
                    }
                    s += d2.sqrt();
                }
            }
            s / (p.rows() * q.rows()) as f64
        };
        2.0 * mean(a, b) - mean(a, a) - mean(b, b)
    }

    #[test]
    fn energy_distance_matches_loop_oracle() {
        let mut rng = Rng::seed(3);
        let a = rng.normal_tensor(&[37, 3]);
        let b = rng.normal_tensor(&[23, 3]).map(|v| v + 0.5);
        let e = energy_distance(&a, &b).unwrap();
        assert!((e - energy_oracle(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn energy_distance_point_masses() {
        let a = Tensor::from_rows(&vec![vec![0.0, 0.0]; 3]).unwrap();
        let b = Tensor::from_rows(&vec![vec![3.0, 4.0]; 2]).unwrap();
        assert!((energy_distance(&a, &b).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn report_csv_shape() {
        let x = blobs(100, 1);
        let bins = fit_bins(&x, 2, 1).unwrap();
        let r = evaluate(&bins, &x, &x, DEFAULT_ALPHA).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("ndb,ndb_fraction,js,energy_distance"));
        let mut buf = Vec::new();
        r.write_bins_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }

    proptest! {
        #[test]
        fn js_is_bounded_and_symmetric(p in prop::collection::vec(0.0f64..1.0, 2..8), seed in 0u64..1000) {
            let mut rng = Rng::seed(seed);
            let q: Vec<f64> = p.iter().map(|_| rng.uniform()).collect();
            prop_assume!(p.iter().sum::<f64>() > 1e-6 && q.iter().sum::<f64>() > 1e-6);
            let a = js_divergence(&p, &q).unwrap();
            let b = js_divergence(&q, &p).unwrap();
            prop_assert!((0.0..=std::f64::consts::LN_2).contains(&a));
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(js_divergence(&p, &p).unwrap().abs() < 1e-12);
        }

        #[test]
        fn energy_distance_is_nonnegative(seed in 0u64..500, shift in -2.0f64..2.0) {
            let mut rng = Rng::seed(seed);
            let a = rng.normal_tensor(&[12, 2]);
            let b = rng.normal_tensor(&[9, 2]).map(|v| v * 1.5 + shift);
            prop_assert!(energy_distance(&a, &b).unwrap() >= 0.0);
        }
    }
}
