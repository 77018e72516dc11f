//! Loss-curve rendering.

use std::path::Path;

use penh_core::trainer::LogRow;
use plotters::prelude::*;

pub fn loss_curve(rows: &[LogRow], path: &Path) -> Result<(), String> {
    if rows.is_empty() {
        return Ok(());
    }
    type Series = (&'static str, fn(&LogRow) -> f64, RGBColor);
    let series: [Series; 3] = [
        ("l_p", |r| r.l_p, RED),
        ("l_r", |r| r.l_r, BLUE),
        ("l_rfl", |r| r.l_rfl, GREEN),
    ];
    let last = rows.last().map_or(1, |r| r.step).max(1);
    let first = rows[0].step.min(last - 1);
    let y_max = rows
        .iter()
        .flat_map(|r| series.iter().map(move |(_, f, _)| f(r)))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-6)
        * 1.05;

    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    let err = |e: &dyn std::fmt::Display| format!("cannot draw {}: {e}", path.display());
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(first..last, 0.0..y_max)
        .map_err(|e| err(&e))?;
    chart.configure_mesh().x_desc("step").y_desc("loss").draw().map_err(|e| err(&e))?;
    for (name, f, color) in series {
        chart
            .draw_series(LineSeries::new(rows.iter().map(|r| (r.step, f(r))), color))
            .map_err(|e| err(&e))?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart.configure_series_labels().border_style(BLACK).draw().map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))
}
