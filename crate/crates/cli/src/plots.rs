use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use tumorseg::pipeline::IterationSummary;
use tumorseg::{Error, Result};

pub const DSC_PLOT: &str = "dsc_curve.svg";
pub const GROWTH_PLOT: &str = "labeled_growth.svg";

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Validation(format!("cannot draw {}: {e}", path.display()))
}

/// Writes both plots under `<run>/plots/` and returns their paths.
pub fn render_all(run_dir: &Path, history: &[IterationSummary]) -> Result<Vec<PathBuf>> {
    let dir = run_dir.join("plots");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let dsc = dir.join(DSC_PLOT);
    let growth = dir.join(GROWTH_PLOT);
    dsc_curve(&dsc, history)?;
    labeled_growth(&growth, history)?;
    Ok(vec![dsc, growth])
}

/// Validation and test DSC of each iteration's segmenter.
pub fn dsc_curve(path: &Path, history: &[IterationSummary]) -> Result<()> {
    let val: Vec<(f64, f64)> = history
        .iter()
        .filter_map(|h| h.val_dsc.map(|v| (h.iteration as f64, v)))
        .collect();
    let test: Vec<(f64, f64)> = history
        .iter()
        .filter_map(|h| h.test.as_ref().map(|t| (h.iteration as f64, t.summary.dsc.mean)))
        .collect();
    let lo = val
        .iter()
        .chain(&test)
        .map(|p| p.1)
        .fold(1.0f64, f64::min)
        .min(0.95);
    let y_lo = ((lo - 0.05).max(0.0) * 20.0).floor() / 20.0;
    draw(path, "DSC per iteration", "DSC", history.len(), y_lo..1.0, &[("validation", &val, BLUE), ("test", &test, RED)])
}

/// Labeled set size (original plus pseudo-labeled) at each iteration.
pub fn labeled_growth(path: &Path, history: &[IterationSummary]) -> Result<()> {
    let total: Vec<(f64, f64)> = history.iter().map(|h| (h.iteration as f64, h.labeled as f64)).collect();
    let pseudo: Vec<(f64, f64)> = history
        .iter()
        .map(|h| (h.iteration as f64, h.pseudo_labeled as f64))
        .collect();
    let hi = total.iter().map(|p| p.1).fold(1.0, f64::max) * 1.1;
    draw(
        path,
        "Labeled set growth",
        "slices",
        history.len(),
        0.0..hi,
        &[("labeled", &total, BLUE), ("pseudo-labeled", &pseudo, GREEN)],
    )
}

fn draw(
    path: &Path,
    title: &str,
    y_label: &str,
    iterations: usize,
    y: std::ops::Range<f64>,
    series: &[(&str, &[(f64, f64)], RGBColor)],
) -> Result<()> {
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let x_hi = iterations.max(1) as f64 + 0.5;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(0.5..x_hi, y)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .y_desc(y_label)
        .x_labels(iterations.clamp(1, 20))
        .x_label_formatter(&|v| format!("{v:.0}"))
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (name, points, color) in series {
        let color = *color;
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(path, e))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| plot_err(path, e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}
