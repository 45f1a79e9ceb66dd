//! Hand-rolled SVG emitters for the analysis figures: velocity quiver,
//! scalar heatmap with minima-line overlay, and NODF bars.
//!
//! Plots are conveniences; the CSV dumps are the contract. Masked cells
//! render as gaps, never as zeros. Output strings are deterministic.

use std::fmt::Write as _;

use crate::plane::{MinimaLine, PlaneField};

const MARGIN: f64 = 40.0;
const PLOT: f64 = 480.0;

fn header(width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    )
}

fn axes(buf: &mut String, x_label: &str, y_label: &str) {
    let x0 = MARGIN;
    let y0 = MARGIN + PLOT;
    let x1 = MARGIN + PLOT;
    let y1 = MARGIN;
    let _ = writeln!(
        buf,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"14\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"14\" y=\"{}\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{y_label}</text>",
        MARGIN + PLOT / 2.0,
        MARGIN + PLOT + 32.0,
        MARGIN + PLOT / 2.0,
        MARGIN + PLOT / 2.0,
    );
}

/// Map grid coordinates into plot pixels (y axis points up).
fn to_px(field: &PlaneField, x: f64, y: f64) -> (f64, f64) {
    let g = &field.grid;
    let fx = (x - g.x_min) / (g.x_max - g.x_min);
    let fy = (y - g.y_min) / (g.y_max - g.y_min);
    (MARGIN + fx * PLOT, MARGIN + (1.0 - fy) * PLOT)
}

/// Five-stop blue-to-yellow color ramp over [0, 1].
fn ramp(t: f64) -> String {
    let stops = [
        (68u8, 1u8, 84u8),
        (59, 82, 139),
        (33, 145, 140),
        (94, 201, 98),
        (253, 231, 37),
    ];
    let t = t.clamp(0.0, 1.0) * (stops.len() - 1) as f64;
    let i = (t as usize).min(stops.len() - 2);
    let f = t - i as f64;
    let lerp = |a: u8, b: u8| -> u8 { (a as f64 + (b as f64 - a as f64) * f).round() as u8 };
    let (r, g, b) = (
        lerp(stops[i].0, stops[i + 1].0),
        lerp(stops[i].1, stops[i + 1].1),
        lerp(stops[i].2, stops[i + 1].2),
    );
    format!("rgb({r},{g},{b})")
}

/// Quiver plot of the velocity field: one arrow per populated cell, scaled
/// so the longest arrow spans about 0.9 cell diagonals.
pub fn quiver_svg(field: &PlaneField, x_label: &str, y_label: &str) -> String {
    let g = &field.grid;
    let mut buf = header(MARGIN * 2.0 + PLOT, MARGIN * 2.0 + PLOT);
    axes(&mut buf, x_label, y_label);

    let mut max_len = 0.0f64;
    for i in 0..g.nx {
        for j in 0..g.ny {
            let (vx, vy) = (field.vx[[i, j]], field.vy[[i, j]]);
            if !vx.is_nan() && !vy.is_nan() {
                max_len = max_len.max((vx * vx + vy * vy).sqrt());
            }
        }
    }
    if max_len == 0.0 {
        max_len = 1.0;
    }
    let cell_px = PLOT / g.nx.max(g.ny) as f64;
    let scale = 0.9 * cell_px / max_len;

    for i in 0..g.nx {
        for j in 0..g.ny {
            let (vx, vy) = (field.vx[[i, j]], field.vy[[i, j]]);
            if vx.is_nan() || vy.is_nan() {
                continue; // masked cells are gaps
            }
            let (cx, cy) = to_px(field, g.x_center(i), g.y_center(j));
            let dx = vx * scale;
            let dy = -vy * scale;
            let (tx, ty) = (cx + dx, cy + dy);
            let angle = dy.atan2(dx);
            let ah = 3.0;
            let (lx, ly) = (
                tx - ah * (angle - 0.5).cos(),
                ty - ah * (angle - 0.5).sin(),
            );
            let (rx, ry) = (
                tx - ah * (angle + 0.5).cos(),
                ty - ah * (angle + 0.5).sin(),
            );
            let _ = writeln!(
                buf,
                "<line x1=\"{cx:.2}\" y1=\"{cy:.2}\" x2=\"{tx:.2}\" y2=\"{ty:.2}\" stroke=\"#1f3a93\" stroke-width=\"1.2\"/>\n\
                 <polygon points=\"{tx:.2},{ty:.2} {lx:.2},{ly:.2} {rx:.2},{ry:.2}\" fill=\"#1f3a93\"/>"
            );
        }
    }
    buf.push_str("</svg>\n");
    buf
}

/// Heatmap of the scalar field with an optional minima-line overlay (line
/// plus error bars).
pub fn heatmap_svg(
    field: &PlaneField,
    line: Option<&MinimaLine>,
    x_label: &str,
    y_label: &str,
) -> String {
    let g = &field.grid;
    let mut buf = header(MARGIN * 2.0 + PLOT, MARGIN * 2.0 + PLOT);
    axes(&mut buf, x_label, y_label);

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in field.scalar.iter() {
        if !v.is_nan() {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    let span = (hi - lo).max(1e-12);
    let w = PLOT / g.nx as f64;
    let h = PLOT / g.ny as f64;
    for i in 0..g.nx {
        for j in 0..g.ny {
            let v = field.scalar[[i, j]];
            if v.is_nan() {
                continue;
            }
            let (px, py) = to_px(field, g.x_center(i), g.y_center(j));
            let color = ramp((v - lo) / span);
            let _ = writeln!(
                buf,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" fill=\"{color}\"/>",
                px - w / 2.0,
                py - h / 2.0,
            );
        }
    }

    if let Some(line) = line {
        let mut path = String::new();
        let mut pen_down = false;
        for (xc, yc) in line.x.iter().zip(line.y.iter()) {
            match yc {
                Some(y) => {
                    let (px, py) = to_px(field, *xc, *y);
                    let _ = write!(path, "{}{px:.2},{py:.2} ", if pen_down { "L" } else { "M" });
                    pen_down = true;
                }
                None => pen_down = false, // gap in the line
            }
        }
        let _ = writeln!(
            buf,
            "<path d=\"{}\" fill=\"none\" stroke=\"#f5c518\" stroke-width=\"2.5\"/>",
            path.trim_end()
        );
        for ((xc, yc), se) in line.x.iter().zip(line.y.iter()).zip(line.stderr.iter()) {
            if let (Some(y), Some(se)) = (yc, se) {
                let (px, p_lo) = to_px(field, *xc, y - se);
                let (_, p_hi) = to_px(field, *xc, y + se);
                let _ = writeln!(
                    buf,
                    "<line x1=\"{px:.2}\" y1=\"{p_lo:.2}\" x2=\"{px:.2}\" y2=\"{p_hi:.2}\" stroke=\"#f5c518\" stroke-width=\"1\"/>"
                );
            }
        }
    }
    buf.push_str("</svg>\n");
    buf
}

/// Grouped bar chart of NODF values, one group per dataset.
pub fn bars_svg(groups: &[(String, Vec<f64>)], y_label: &str) -> String {
    let width = MARGIN * 2.0 + PLOT;
    let mut buf = header(width, MARGIN * 2.0 + PLOT);
    axes(&mut buf, "dataset", y_label);
    let hi = groups
        .iter()
        .flat_map(|(_, vs)| vs.iter())
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        .max(1e-12);
    let group_w = PLOT / groups.len().max(1) as f64;
    for (gi, (label, values)) in groups.iter().enumerate() {
        let bar_w = (group_w * 0.8) / values.len().max(1) as f64;
        for (bi, v) in values.iter().enumerate() {
            let x = MARGIN + gi as f64 * group_w + group_w * 0.1 + bi as f64 * bar_w;
            let h = (v / hi).clamp(0.0, 1.0) * PLOT;
            let y = MARGIN + PLOT - h;
            let _ = writeln!(
                buf,
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"#33919c\" stroke=\"#1b4e54\"/>",
                bar_w * 0.92
            );
        }
        let _ = writeln!(
            buf,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">{label}</text>",
            MARGIN + gi as f64 * group_w + group_w / 2.0,
            MARGIN + PLOT + 16.0,
        );
    }
    buf.push_str("</svg>\n");
    buf
}
