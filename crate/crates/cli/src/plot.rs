//! SVG plots from the CSV files the other commands write. The plot kind is
//! chosen from the header.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::CliError;

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self, CliError> {
        let bad = |e: csv::Error| CliError::Usage(format!("{}: {e}", path.display()));
        let mut rdr = csv::Reader::from_path(path).map_err(bad)?;
        let header = rdr.headers().map_err(bad)?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            rows.push(rec.map_err(bad)?.iter().map(str::to_string).collect());
        }
        if rows.is_empty() {
            return Err(CliError::Usage(format!("{}: CSV has no data rows", path.display())));
        }
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn has(&self, names: &[&str]) -> bool {
        names.iter().all(|n| self.col(n).is_some())
    }

    /// Numeric column; rows with an empty field are skipped.
    fn numbers(&self, name: &str, path: &Path) -> Result<Vec<Option<f64>>, CliError> {
        let c = self.col(name).expect("caller checked the column");
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let f = r.get(c).map(String::as_str).unwrap_or("");
                if f.is_empty() {
                    return Ok(None);
                }
                f.parse().map(Some).map_err(|_| {
                    CliError::Usage(format!("{}: row {}: `{name}` = `{f}` is not a number", path.display(), i + 1))
                })
            })
            .collect()
    }
}

fn plot_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(format!("plot: {e}"))
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

fn line_chart(out: &Path, title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<(), CliError> {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let root = SVGBackend::new(out, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    if series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

fn scatter(out: &Path, title: &str, points: &[(f64, f64)], data: Option<&[(f64, f64)]>) -> Result<(), CliError> {
    let all = || points.iter().chain(data.unwrap_or(&[]));
    let (x0, x1) = bounds(all().map(|p| p.0));
    let (y0, y1) = bounds(all().map(|p| p.1));
    let root = SVGBackend::new(out, (600, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart.configure_mesh().draw().map_err(plot_err)?;
    if let Some(d) = data {
        chart
            .draw_series(d.iter().map(|&p| Circle::new(p, 1, RGBColor(150, 150, 150).filled())))
            .map_err(plot_err)?;
    }
    chart
        .draw_series(points.iter().map(|&p| Circle::new(p, 1, BLUE.mix(0.6).filled())))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn pairs(xs: &[Option<f64>], ys: &[Option<f64>]) -> Vec<(f64, f64)> {
    xs.iter()
        .zip(ys)
        .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
        .collect()
}

fn points_of(t: &Table, path: &Path) -> Result<Vec<(f64, f64)>, CliError> {
    Ok(pairs(&t.numbers("x0", path)?, &t.numbers("x1", path)?))
}

/// Renders one plot per input and returns the files written.
pub fn render_all(inputs: &[PathBuf], data: Option<&Path>, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let background = match data {
        Some(p) => {
            let t = Table::read(p)?;
            if !t.has(&["x0", "x1"]) {
                return Err(CliError::Usage(format!("{}: --data needs x0,x1 columns", p.display())));
            }
            Some(points_of(&t, p)?)
        }
        None => None,
    };
    let mut written = Vec::new();
    for path in inputs {
        let t = Table::read(path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
        let target = out.join(format!("{stem}.svg"));
        if t.has(&["step", "loss_recon"]) {
            let step = t.numbers("step", path)?;
            let mut series = vec![("loss_recon".to_string(), pairs(&step, &t.numbers("loss_recon", path)?))];
            let ssim = pairs(&step, &t.numbers("loss_ssim", path)?);
            if ssim.iter().any(|p| p.1 != 0.0) {
                series.push(("loss_ssim".to_string(), ssim));
            }
            line_chart(&target, "Training loss", "step", "loss", &series)?;
        } else if t.has(&["parameterization", "steps", "js"]) {
            let c = t.col("parameterization").expect("checked");
            let steps = t.numbers("steps", path)?;
            let js = t.numbers("js", path)?;
            let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for (i, r) in t.rows.iter().enumerate() {
                if let (Some(s), Some(j)) = (steps[i], js[i]) {
                    groups.entry(r[c].clone()).or_default().push((s.log2(), j));
                }
            }
            let series: Vec<_> = groups.into_iter().collect();
            line_chart(&target, "JS divergence by step count", "log2(steps)", "JS", &series)?;
        } else if t.has(&["round", "steps", "js"]) {
            let round = t.numbers("round", path)?;
            let mut series = vec![("js".to_string(), pairs(&round, &t.numbers("js", path)?))];
            if t.has(&["energy_distance"]) {
                series.push(("energy distance".to_string(), pairs(&round, &t.numbers("energy_distance", path)?)));
            }
            line_chart(&target, "Distillation rounds", "round", "metric", &series)?;
        } else if t.has(&["t", "energy_distance"]) {
            let ts = t.numbers("t", path)?;
            let n = ts.len();
            let iter: Vec<Option<f64>> = (1..=n).map(|i| Some(i as f64)).collect();
            let series = vec![("energy distance".to_string(), pairs(&iter, &t.numbers("energy_distance", path)?))];
            line_chart(&target, "Quality after each reverse step", "iteration", "energy distance", &series)?;
        } else if t.has(&["x0", "x1"]) && !t.has(&["kind"]) {
            scatter(&target, stem, &points_of(&t, path)?, background.as_deref())?;
        } else {
            return Err(CliError::Usage(format!(
                "{}: unrecognised columns {:?}",
                path.display(),
                t.header
            )));
        }
        written.push(target);
    }
    Ok(written)
}
