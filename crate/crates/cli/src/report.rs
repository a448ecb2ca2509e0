//! CSV tables and SVG plots from a metrics file.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use plotters::prelude::*;
use rfcast_core::train::{EvalReport, StepRecord};
use serde::Deserialize;

#[derive(Deserialize)]
struct History {
    steps: Vec<StepRecord>,
}

pub fn write(metrics: &Path, history: Option<&Path>, out: &Path) -> Result<()> {
    let text = fs::read_to_string(metrics).with_context(|| format!("reading {}", metrics.display()))?;
    let rep: EvalReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", metrics.display()))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut w = csv::Writer::from_path(out.join("thresholds.csv"))?;
    w.write_record(["threshold", "csi", "hss", "tp", "fp", "fn", "tn", "persistence_csi", "persistence_hss"])?;
    for (m, p) in rep.model.per_threshold.iter().zip(&rep.persistence.per_threshold) {
        let t = m.table;
        w.write_record([
            m.threshold.to_string(),
            m.csi.to_string(),
            m.hss.to_string(),
            t.tp.to_string(),
            t.fp.to_string(),
            t.fn_.to_string(),
            t.tn.to_string(),
            p.csi.to_string(),
            p.hss.to_string(),
        ])?;
    }
    w.flush()?;

    let lt = &rep.model.lead_time;
    let pl = &rep.persistence.lead_time;
    let mut w = csv::Writer::from_path(out.join("lead_time.csv"))?;
    w.write_record(["lead", "minutes", "csi_m", "hss", "mse", "persistence_csi_m", "persistence_hss", "persistence_mse"])?;
    for i in 0..lt.csi_m.len() {
        w.write_record([
            (i + 1).to_string(),
            ((i + 1) as f64 * rep.cadence_minutes).to_string(),
            lt.csi_m[i].to_string(),
            lt.hss[i].to_string(),
            lt.mse[i].to_string(),
            pl.csi_m[i].to_string(),
            pl.hss[i].to_string(),
            pl.mse[i].to_string(),
        ])?;
    }
    w.flush()?;

    let minutes: Vec<f64> = (1..=lt.csi_m.len()).map(|i| i as f64 * rep.cadence_minutes).collect();
    for (name, model, base) in [("csi_m", &lt.csi_m, &pl.csi_m), ("hss", &lt.hss, &pl.hss), ("mse", &lt.mse, &pl.mse)] {
        let series = [("model", zip(&minutes, model)), ("persistence", zip(&minutes, base))];
        line_plot(&out.join(format!("lead_{name}.svg")), &format!("{} vs lead time", name.to_uppercase()), "lead (min)", name, &series)?;
    }

    if let Some(h) = history {
        let text = fs::read_to_string(h).with_context(|| format!("reading {}", h.display()))?;
        let hist: History = serde_json::from_str(&text).with_context(|| format!("parsing {}", h.display()))?;
        let pts: Vec<(f64, f64)> = hist.steps.iter().map(|r| (r.step as f64, r.loss)).collect();
        line_plot(&out.join("loss.svg"), "training loss", "step", "rf loss", &[("loss", pts)])?;
    }

    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&rep)?)?;
    log::info!("report written to {}", out.display());
    Ok(())
}

fn zip(x: &[f64], y: &[f64]) -> Vec<(f64, f64)> {
    x.iter().copied().zip(y.iter().copied()).collect()
}

fn line_plot(path: &Path, title: &str, xlabel: &str, ylabel: &str, series: &[(&str, Vec<(f64, f64)>)]) -> Result<()> {
    let all = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = ((y1 - y0) * 0.05).max(1e-9);
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1.max(x0 + 1e-9), (y0 - pad)..(y1 + pad))?;
    chart.configure_mesh().x_desc(xlabel).y_desc(ylabel).draw()?;
    let colors = [BLUE, RED, GREEN, BLACK];
    for (i, (name, pts)) in series.iter().enumerate() {
        let c = colors[i % colors.len()];
        chart.draw_series(LineSeries::new(pts.iter().copied(), c.stroke_width(2)))?.label(*name).legend(move |(x, y)| {
            PathElement::new(vec![(x, y), (x + 18, y)], c.stroke_width(2))
        });
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    root.present()?;
    Ok(())
}
