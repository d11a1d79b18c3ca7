use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use plotters::coord::Shift;
use plotters::prelude::*;

use radarflow::harness::{read_metrics, MetricsRow};
use radarflow::io::{load_dataset, load_reconstructions};

use crate::Figure;

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

type Canvas<'a> = DrawingArea<SVGBackend<'a>, Shift>;

pub fn run(out_dir: &Path, figure: &Figure) -> Result<()> {
    let target = |given: &Option<PathBuf>, default: &str| -> Result<PathBuf> {
        let p = given.clone().unwrap_or_else(|| out_dir.join(default));
        crate::create_parent(&p)?;
        Ok(p)
    };
    let written = match figure {
        Figure::Training { metrics, out } => {
            let rows = read_rows(metrics)?;
            let stem = metrics.file_stem().and_then(|s| s.to_str()).unwrap_or("training");
            let p = target(out, &format!("{}.svg", stem.trim_end_matches(".metrics")))?;
            training(&rows, &p)?;
            p
        }
        Figure::Sweep { sweep: csv, out } => {
            let p = target(out, "sweep.svg")?;
            sweep(&read_rows(csv)?, &p)?;
            p
        }
        Figure::Uncertainty { curves, out } => {
            let p = target(out, "uncertainty.svg")?;
            uncertainty(curves, &p)?;
            p
        }
        Figure::Fields { data, sequence, frame, reconstructions, out } => {
            let p = target(out, &format!("fields-{sequence}-{frame}.svg"))?;
            fields(data, *sequence, *frame, reconstructions.as_deref(), &p)?;
            p
        }
    };
    println!("wrote {}", written.display());
    Ok(())
}

fn read_rows(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let rows = read_metrics(file).with_context(|| format!("reading {}", path.display()))?;
    if rows.is_empty() {
        bail!("{} holds no rows", path.display());
    }
    Ok(rows)
}

fn bounds(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.into_iter().filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn line_panel(area: &Canvas<'_>, title: &str, x_label: &str, y_label: &str, series: &[Series], log_y: bool) -> Result<()> {
    let xs = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let mut chart = ChartBuilder::on(area);
    chart.caption(title, ("sans-serif", 18)).margin(10).x_label_area_size(35).y_label_area_size(60);
    if log_y {
        let ys: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).filter(|v| *v > 0.0).collect();
        let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if lo.is_finite() { (lo / 2.0, hi * 2.0) } else { (1e-6, 1.0) };
        let mut c = chart.build_cartesian_2d(xs.0..xs.1, (lo..hi).log_scale())?;
        c.configure_mesh().x_desc(x_label).y_desc(y_label).draw()?;
        for (i, s) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<_> = s.points.iter().copied().filter(|p| p.1 > 0.0).collect();
            c.draw_series(LineSeries::new(pts, color.stroke_width(2)))?
                .label(s.label.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
        c.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    } else {
        let ys = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
        let mut c = chart.build_cartesian_2d(xs.0..xs.1, ys.0..ys.1)?;
        c.configure_mesh().x_desc(x_label).y_desc(y_label).draw()?;
        for (i, s) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            c.draw_series(LineSeries::new(s.points.clone(), color.stroke_width(2)))?
                .label(s.label.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
        c.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    }
    Ok(())
}

/// Per-epoch means of a per-batch column.
fn per_epoch(rows: &[MetricsRow], f: impl Fn(&MetricsRow) -> Option<f64>) -> Vec<(f64, f64)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in rows {
        if let Some(v) = f(r) {
            let e = acc.entry(r.epoch).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(e, (s, n))| (e as f64, s / n as f64)).collect()
}

fn training(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (1200, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    let (left, right) = root.split_horizontally(600);
    let losses = [
        Series { label: "L_recons".into(), points: per_epoch(rows, |r| r.l_recons) },
        Series { label: "L_physics".into(), points: per_epoch(rows, |r| r.l_physics) },
    ];
    let losses: Vec<Series> = losses.into_iter().filter(|s| !s.points.is_empty()).collect();
    line_panel(&left, &format!("{} losses", rows[0].run_id), "epoch", "loss", &losses, true)?;
    let errors = [
        Series { label: "RMSE_v".into(), points: per_epoch(rows, |r| Some(r.rmse_v)) },
        Series { label: "RMSE_q".into(), points: per_epoch(rows, |r| r.rmse_q) },
    ];
    let errors: Vec<Series> = errors.into_iter().filter(|s| !s.points.is_empty()).collect();
    line_panel(&right, "training RMSE", "epoch", "RMSE", &errors, false)?;
    root.present()?;
    Ok(())
}

/// Mean over seeds per (method, n_train), with mean ± sd as extra lines.
fn sweep(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let ranges: Vec<String> = rows.iter().map(|r| r.d.clone()).fold(Vec::new(), |mut v, d| {
        if !v.contains(&d) {
            v.push(d);
        }
        v
    });
    let root = SVGBackend::new(path, (500 * ranges.len() as u32, 900)).into_drawing_area();
    root.fill(&WHITE)?;
    let columns = root.split_evenly((2, ranges.len()));
    for (j, d) in ranges.iter().enumerate() {
        for (i, (name, get)) in
            [("RMSE_v", (|r: &MetricsRow| Some(r.rmse_v)) as fn(&MetricsRow) -> Option<f64>), ("RMSE_q", |r: &MetricsRow| r.rmse_q)]
                .into_iter()
                .enumerate()
        {
            let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
            for r in rows.iter().filter(|r| &r.d == d) {
                if let Some(v) = get(r) {
                    groups.entry((r.method.name().to_string(), r.n_train)).or_default().push(v);
                }
            }
            let mut series: BTreeMap<String, [Vec<(f64, f64)>; 3]> = BTreeMap::new();
            for ((m, n), vals) in groups {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let sd = if vals.len() > 1 {
                    (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
                } else {
                    0.0
                };
                let e = series.entry(m).or_default();
                e[0].push((n as f64, mean));
                e[1].push((n as f64, mean - sd));
                e[2].push((n as f64, mean + sd));
            }
            let mut lines = Vec::new();
            for (m, [mean, lo, hi]) in series {
                lines.push(Series { label: m.clone(), points: mean });
                lines.push(Series { label: format!("{m} -sd"), points: lo });
                lines.push(Series { label: format!("{m} +sd"), points: hi });
            }
            line_panel(&columns[i * ranges.len() + j], &format!("{name}, d = {d}"), "training sequences", name, &lines, false)?;
        }
    }
    root.present()?;
    Ok(())
}

fn uncertainty(curves: &Path, path: &Path) -> Result<()> {
    let mut reader = csv::Reader::from_path(curves).with_context(|| format!("opening {}", curves.display()))?;
    let mut cols: [Vec<(f64, f64)>; 4] = Default::default();
    for rec in reader.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec.iter().map(|s| s.parse::<f64>()).collect::<std::result::Result<_, _>>().context("parsing curves")?;
        if vals.len() != 5 {
            bail!("expected 5 columns (t, std_v, std_q, rmse_v, rmse_q), found {}", vals.len());
        }
        for c in 0..4 {
            cols[c].push((vals[0], vals[c + 1]));
        }
    }
    let [sv, sq, rv, rq] = cols;
    let root = SVGBackend::new(path, (1200, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    let (left, right) = root.split_horizontally(600);
    line_panel(
        &left,
        "velocity",
        "t",
        "normalized units",
        &[Series { label: "posterior std".into(), points: sv }, Series { label: "RMSE".into(), points: rv }],
        false,
    )?;
    line_panel(
        &right,
        "log-density",
        "t",
        "normalized units",
        &[Series { label: "posterior std".into(), points: sq }, Series { label: "RMSE".into(), points: rq }],
        false,
    )?;
    root.present()?;
    Ok(())
}

/// Diverging blue-white-red map of `v` in `[-1, 1]`.
fn color(v: f64) -> RGBColor {
    let t = v.clamp(-1.0, 1.0);
    let mix = |a: f64, b: f64, w: f64| (a + (b - a) * w).round() as u8;
    if t < 0.0 {
        let w = -t;
        RGBColor(mix(255.0, 33.0, w), mix(255.0, 102.0, w), mix(255.0, 172.0, w))
    } else {
        RGBColor(mix(255.0, 178.0, t), mix(255.0, 24.0, t), mix(255.0, 43.0, t))
    }
}

fn heatmap(area: &Canvas<'_>, title: &str, values: &[f32], k: usize, l: usize, scale: f64) -> Result<()> {
    let mut chart = ChartBuilder::on(area).caption(title, ("sans-serif", 16)).margin(8).build_cartesian_2d(0..l, 0..k)?;
    chart.configure_mesh().disable_mesh().disable_axes().draw()?;
    chart.draw_series((0..k).flat_map(|i| (0..l).map(move |j| (i, j))).map(|(i, j)| {
        let v = values[i * l + j] as f64 / scale;
        Rectangle::new([(j, i), (j + 1, i + 1)], color(v).filled())
    }))?;
    Ok(())
}

fn fields(data: &Path, sequence: usize, frame: usize, recon: Option<&Path>, path: &Path) -> Result<()> {
    let ds = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    if sequence >= ds.sequences.len() || frame >= ds.config.simulation.frames {
        bail!("sequence {sequence} frame {frame} is outside the dataset");
    }
    let truth = ds.truth::<f64>(sequence)?;
    let f = &truth.frames()[frame];
    let to32 = |xs: &[f64]| xs.iter().map(|x| *x as f32).collect::<Vec<_>>();
    let mut panels: Vec<(String, Vec<f32>, f64)> = vec![
        ("truth vx".into(), to32(f.velocity.vx()), 0.5),
        ("truth vy".into(), to32(f.velocity.vy()), 0.5),
        ("truth q".into(), to32(f.scalar.values()), 1.0),
    ];
    if let Some(p) = recon {
        let r = load_reconstructions(p).with_context(|| format!("loading {}", p.display()))?;
        let idx = r
            .header
            .sequences
            .iter()
            .position(|s| *s == sequence)
            .with_context(|| format!("sequence {sequence} is not in {}", p.display()))?;
        let cells = r.header.geometry.cells();
        let base = frame * r.header.channels * cells;
        let arr = &r.data[idx];
        let names = ["vx", "vy", "q"];
        for c in 0..r.header.channels {
            let scale = if c < 2 { 0.5 } else { 1.0 };
            panels.push((format!("{} {}", r.header.method, names[c]), arr[base + c * cells..base + (c + 1) * cells].to_vec(), scale));
        }
    }
    let cols = 3;
    let rows = panels.len().div_ceil(cols);
    let root = SVGBackend::new(path, (330 * cols as u32, 340 * rows as u32)).into_drawing_area();
    root.fill(&WHITE)?;
    let areas = root.split_evenly((rows, cols));
    for ((title, values, scale), area) in panels.iter().zip(&areas) {
        heatmap(area, title, values, ds.geometry.k, ds.geometry.l, *scale)?;
    }
    root.present()?;
    Ok(())
}
