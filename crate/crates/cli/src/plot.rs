//! Static SVG figures: trajectory overlays, acceleration curves and gate
//! charts.

use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;
use trajimit::policy::RolloutResult;

fn err(e: impl std::fmt::Display) -> anyhow::Error {
    anyhow!("plotting failed: {e}")
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let pad = ((hi - lo) * 0.05).max(0.5);
    (lo - pad, hi + pad)
}

/// Positions of every agent for one sample; modelled roles are coloured and
/// switch to a thick line once generation starts.
pub fn trajectories(path: &Path, r: &RolloutResult, agents: &[String], sample: usize) -> Result<()> {
    let scene = &r.scene[sample];
    let all = scene.iter().flatten();
    let (x0, x1) = all.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[0]), b.max(p[0])));
    let (y0, y1) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[1]), b.max(p[1])));
    let ((x0, x1), (y0, y1)) = (padded(x0, x1), padded(y0, y1));
    let root = SVGBackend::new(path, (800, 700)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(15)
        .caption(format!("{} sample {sample}", r.window_id), ("sans-serif", 20))
        .x_label_area_size(35)
        .y_label_area_size(45)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(err)?;
    chart.configure_mesh().x_desc("x (m)").y_desc("y (m)").draw().map_err(err)?;
    for (k, id) in agents.iter().enumerate() {
        let track: Vec<(f64, f64)> = scene.iter().map(|f| (f[k][0], f[k][1])).collect();
        match r.slots.iter().position(|&s| s == k) {
            Some(role) => {
                let color = Palette99::pick(role).to_rgba();
                let burn = r.burn_in.min(track.len());
                chart.draw_series(LineSeries::new(track[..burn].to_vec(), color.stroke_width(1))).map_err(err)?;
                chart
                    .draw_series(LineSeries::new(track[burn.saturating_sub(1)..].to_vec(), color.stroke_width(3)))
                    .map_err(err)?
                    .label(id.clone())
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(3)));
            }
            None => {
                chart.draw_series(LineSeries::new(track, RGBColor(150, 150, 150).stroke_width(1))).map_err(err)?;
            }
        }
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

/// `‖acc‖` over time for each modelled role.
pub fn accelerations(path: &Path, r: &RolloutResult, sample: usize) -> Result<()> {
    let acc = &r.accelerations[sample];
    let frames = acc.len();
    let top = acc.iter().flatten().map(|a| a[0].hypot(a[1])).fold(0.0, f64::max).max(1e-6);
    let root = SVGBackend::new(path, (900, 450)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(15)
        .caption("acceleration norm", ("sans-serif", 20))
        .x_label_area_size(35)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..(frames as f64 * r.dt), 0.0..top * 1.05)
        .map_err(err)?;
    chart.configure_mesh().x_desc("time (s)").y_desc("|a| (m/s²)").draw().map_err(err)?;
    for k in 0..r.slots.len() {
        let color = Palette99::pick(k).to_rgba();
        let line: Vec<(f64, f64)> = acc.iter().enumerate().map(|(t, f)| (t as f64 * r.dt, f[k][0].hypot(f[k][1]))).collect();
        chart
            .draw_series(LineSeries::new(line, color.stroke_width(2)))
            .map_err(err)?
            .label(format!("role {k}"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    let burn = r.burn_in as f64 * r.dt;
    chart.draw_series(LineSeries::new(vec![(burn, 0.0), (burn, top * 1.05)], BLACK.stroke_width(1))).map_err(err)?;
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

/// Gate sequence of one role: a filled cell for every active agent at every
/// predicted frame.
pub fn gates(path: &Path, r: &RolloutResult, agents: &[String], sample: usize, role: usize) -> Result<()> {
    let log = &r.gates[sample];
    let n_agents = agents.len();
    let steps = log.len();
    let root = SVGBackend::new(path, (900, 60 + 30 * n_agents as u32)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(15)
        .caption(format!("observation gates, role {role}"), ("sans-serif", 20))
        .x_label_area_size(30)
        .y_label_area_size(60)
        .build_cartesian_2d(1..steps + 1, 0..n_agents)
        .map_err(err)?;
    let labels = agents.to_vec();
    chart
        .configure_mesh()
        .disable_mesh()
        .x_desc("frame")
        .y_labels(n_agents)
        .y_label_formatter(&|j| labels.get(*j).cloned().unwrap_or_default())
        .draw()
        .map_err(err)?;
    let color = Palette99::pick(role).to_rgba();
    let cells = log.iter().enumerate().flat_map(|(i, frame)| {
        frame[role].iter().enumerate().filter(|(_, &b)| b > 0.5).map(move |(j, _)| (i + 1, j))
    });
    chart
        .draw_series(cells.map(|(t, j)| Rectangle::new([(t, j), (t + 1, j + 1)], color.filled())))
        .map_err(err)?;
    chart
        .draw_series(LineSeries::new(vec![(r.burn_in, 0), (r.burn_in, n_agents)], BLACK.stroke_width(1)))
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}
