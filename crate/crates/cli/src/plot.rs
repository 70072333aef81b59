use std::path::{Path, PathBuf};

use perceptlab::trainer::read_history;
use perceptlab::Error;
use plotters::prelude::*;

use crate::CliError;

fn draw_err(e: impl std::fmt::Display) -> CliError {
    CliError::Core(Error::Data(format!("plot: {e}")))
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let span = (hi - lo).abs().max(1e-9);
    (lo - 0.05 * span, hi + 0.05 * span)
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if lo.is_finite() {
        padded(lo, hi)
    } else {
        (0.0, 1.0)
    }
}

/// Training loss and validation metric per epoch, one panel each.
pub fn curves(history: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let records = read_history(history)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{}: empty history", history.display())).into());
    }
    let path = out.join("curves.svg");
    draw_curves(&records, &path)?;
    Ok(path)
}

fn draw_curves(records: &[perceptlab::trainer::EpochRecord], path: &Path) -> Result<(), CliError> {
    let root = SVGBackend::new(path, (900, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let panels = root.split_evenly((1, 2));
    let last = records.last().map_or(1, |r| r.epoch) as f64;
    let series = [
        (
            "train loss",
            records.iter().map(|r| (r.epoch as f64, r.train_loss)).collect::<Vec<_>>(),
            RED,
        ),
        (
            "validation metric",
            records.iter().map(|r| (r.epoch as f64, r.val_metric)).collect::<Vec<_>>(),
            BLUE,
        ),
    ];
    for (panel, (name, points, colour)) in panels.iter().zip(series) {
        let (lo, hi) = range(points.iter().map(|p| p.1));
        let mut chart = ChartBuilder::on(panel)
            .caption(name, ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(1.0..last.max(1.5), lo..hi)
            .map_err(draw_err)?;
        chart
            .configure_mesh()
            .x_desc("epoch")
            .draw()
            .map_err(draw_err)?;
        chart
            .draw_series(LineSeries::new(points.iter().copied(), &colour))
            .map_err(draw_err)?;
        chart
            .draw_series(points.iter().map(|&p| Circle::new(p, 3, colour.filled())))
            .map_err(draw_err)?;
    }
    root.present().map_err(draw_err)
}

/// Prediction against label for a regression `predictions.csv`.
pub fn scatter(predictions: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let rows: Vec<ScatterRow> = csv::Reader::from_path(predictions)
        .map_err(Error::from)?
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| {
            Error::Data(format!(
                "{}: expected regression columns `label,prediction` ({e})",
                predictions.display()
            ))
        })?;
    let path = out.join("scatter.svg");
    draw_scatter(&rows, &path)?;
    Ok(path)
}

#[derive(serde::Deserialize)]
struct ScatterRow {
    label: f64,
    prediction: f64,
}

fn draw_scatter(rows: &[ScatterRow], path: &Path) -> Result<(), CliError> {
    let root = SVGBackend::new(path, (500, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let (xl, xh) = range(rows.iter().map(|r| r.label));
    let (yl, yh) = range(rows.iter().map(|r| r.prediction));
    let mut chart = ChartBuilder::on(&root)
        .caption("prediction vs target", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(xl..xh, yl..yh)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("target")
        .y_desc("prediction")
        .draw()
        .map_err(draw_err)?;
    chart
        .draw_series(
            rows.iter()
                .map(|r| Circle::new((r.label, r.prediction), 3, BLUE.mix(0.6).filled())),
        )
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}
