//! SVG line plots of a metric against the number of examples.

use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;

pub struct Series {
    pub name: String,
    /// (n, mean, std)
    pub points: Vec<(usize, f64, f64)>,
}

pub fn metric_vs_n(path: &Path, title: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let all: Vec<&(usize, f64, f64)> = series.iter().flat_map(|s| &s.points).filter(|p| p.1.is_finite()).collect();
    if all.is_empty() {
        return Err(anyhow!("nothing to plot"));
    }
    let x_max = all.iter().map(|p| p.0).max().unwrap_or(1).max(1) as f64;
    let lo = all.iter().map(|p| p.1 - p.2.max(0.0)).fold(f64::INFINITY, f64::min);
    let hi = all.iter().map(|p| p.1 + p.2.max(0.0)).fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.1).max(0.02);

    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(14)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..x_max * 1.02, (lo - pad)..(hi + pad))
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .configure_mesh()
        .x_desc("n")
        .y_desc(y_label)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    for (i, s) in series.iter().enumerate() {
        let colour = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = s
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|p| (p.0 as f64, p.1))
            .collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), colour.stroke_width(2)))
            .map_err(|e| anyhow!("{e}"))?
            .label(s.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], colour.stroke_width(2)));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, colour.filled())))
            .map_err(|e| anyhow!("{e}"))?;
        chart
            .draw_series(s.points.iter().filter(|p| p.1.is_finite() && p.2 > 0.0).map(|&(n, m, sd)| {
                PathElement::new(vec![(n as f64, m - sd), (n as f64, m + sd)], colour.stroke_width(1))
            }))
            .map_err(|e| anyhow!("{e}"))?;
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}
