//! Static SVG figures.

use crate::Failure;
use plotters::prelude::*;
use std::path::Path;

const SIZE: (u32, u32) = (640, 480);
const COLORS: [RGBColor; 5] = [BLUE, RED, GREEN, MAGENTA, CYAN];

fn fail(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::usage(format!("cannot draw {}: {e}", path.display()))
}

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Line chart over fixed axis ranges.
pub fn lines(
    path: &Path,
    title: &str,
    axes: (&str, &str),
    x_range: std::ops::Range<f64>,
    y_range: std::ops::Range<f64>,
    series: &[Series<'_>],
) -> Result<(), Failure> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| fail(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x_range, y_range)
        .map_err(|e| fail(path, e))?;
    chart
        .configure_mesh()
        .x_desc(axes.0)
        .y_desc(axes.1)
        .draw()
        .map_err(|e| fail(path, e))?;
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| fail(path, e))?
            .label(s.label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    if series.len() > 1 || series.first().is_some_and(|s| !s.label.is_empty()) {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| fail(path, e))?;
    }
    root.present().map_err(|e| fail(path, e))
}

/// One bar per label, side by side for each metric panel.
pub fn bars(path: &Path, title: &str, labels: &[String], panels: &[(&str, Vec<f64>)]) -> Result<(), Failure> {
    let root = SVGBackend::new(path, (360 * panels.len() as u32, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| fail(path, e))?;
    let root = root.titled(title, ("sans-serif", 22)).map_err(|e| fail(path, e))?;
    for (area, (name, values)) in root.split_evenly((1, panels.len())).iter().zip(panels) {
        let top = values.iter().copied().fold(0.0f64, f64::max).max(1e-3) * 1.15;
        let mut chart = ChartBuilder::on(area)
            .caption(*name, ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(60)
            .y_label_area_size(50)
            .build_cartesian_2d((0..labels.len() - 1).into_segmented(), 0.0..top)
            .map_err(|e| fail(path, e))?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(labels.len())
            .x_label_formatter(&|v| match v {
                SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
                _ => String::new(),
            })
            .draw()
            .map_err(|e| fail(path, e))?;
        chart
            .draw_series(
                Histogram::vertical(&chart)
                    .style(BLUE.mix(0.7).filled())
                    .margin(8)
                    .data(values.iter().enumerate().map(|(i, v)| (i, *v))),
            )
            .map_err(|e| fail(path, e))?;
    }
    root.present().map_err(|e| fail(path, e))
}
