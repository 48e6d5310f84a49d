// SPDX-License-Identifier: MIT OR Apache-2.0

//! Standalone SVG heatmaps of AIE grids, written by hand.

use std::fmt::Write;

use anyhow::{bail, Result};
use kloc::model::Site;
use kloc::trace::{Bucket, TraceGrid};

const CELL_W: f64 = 44.0;
const CELL_H: f64 = 24.0;
const LEFT: f64 = 130.0;
const TOP: f64 = 48.0;
const LEGEND_H: f64 = 70.0;

fn site_color(site: Site) -> (u8, u8, u8) {
    match site {
        Site::MlpOut => (0x1b, 0x7a, 0x3e),
        Site::AttnOut => (0xb2, 0x1f, 0x1f),
        _ => (0x4b, 0x2a, 0x8c),
    }
}

/// Linear blend from white (`t = 0`) to the site color (`t = 1`).
fn blend(site: Site, t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let (r, g, b) = site_color(site);
    let mix = |c: u8| (255.0 + (c as f64 - 255.0) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(r), mix(g), mix(b))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders one rectangle per present (bucket, layer) cell, colored on a
/// min-max scale whose endpoints are printed beneath the grid.
pub fn emit_heatmap_svg(grid: &TraceGrid, title: &str) -> Result<String> {
    let rows: Vec<(Bucket, &Vec<f64>)> = Bucket::ALL
        .iter()
        .filter_map(|&b| {
            grid.values
                .get(b.index())
                .and_then(|v| v.as_ref())
                .map(|v| (b, v))
        })
        .collect();
    if rows.is_empty() || grid.n_layers == 0 {
        bail!("cannot draw an empty trace grid");
    }
    if let Some((b, _)) = rows.iter().find(|(_, v)| v.len() != grid.n_layers) {
        bail!(
            "bucket {} does not have {} layers",
            b.as_str(),
            grid.n_layers
        );
    }
    let values = || rows.iter().flat_map(|(_, v)| v.iter().copied());
    if values().any(|x| !x.is_finite()) {
        bail!("trace grid holds non-finite values");
    }
    let (lo, hi) = values().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
        (a.min(x), b.max(x))
    });
    let flat = hi == lo;
    let width = LEFT + CELL_W * grid.n_layers as f64 + 20.0;
    let height = TOP + CELL_H * rows.len() as f64 + LEGEND_H;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(
        s,
        r##"<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text class="title" x="{LEFT}" y="20" font-size="13">{}</text>"#,
        escape(title)
    );
    for (i, (bucket, v)) in rows.iter().enumerate() {
        let y = TOP + CELL_H * i as f64;
        let _ = writeln!(
            s,
            r#"<text class="row-label" x="{}" y="{}" font-size="11" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            y + CELL_H * 0.65,
            bucket.as_str()
        );
        for (layer, &x) in v.iter().enumerate() {
            let t = if flat { 0.5 } else { (x - lo) / (hi - lo) };
            let cx = LEFT + CELL_W * layer as f64;
            let fill = blend(grid.site, t);
            let ink = if t > 0.6 { "#ffffff" } else { "#000000" };
            let _ = writeln!(
                s,
                r##"<rect class="cell" data-bucket="{}" data-layer="{layer}" data-value="{x}" x="{cx}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{fill}" stroke="#cccccc" stroke-width="0.5"/>"##,
                bucket.as_str()
            );
            let _ = writeln!(
                s,
                r#"<text class="value" x="{}" y="{}" font-size="8" text-anchor="middle" fill="{ink}">{x:.3}</text>"#,
                cx + CELL_W / 2.0,
                y + CELL_H * 0.62
            );
        }
    }
    let axis_y = TOP + CELL_H * rows.len() as f64;
    for layer in 0..grid.n_layers {
        let _ = writeln!(
            s,
            r#"<text class="col-label" x="{}" y="{}" font-size="11" text-anchor="middle">{layer}</text>"#,
            LEFT + CELL_W * (layer as f64 + 0.5),
            axis_y + 14.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text class="axis" x="{}" y="{}" font-size="11" text-anchor="middle">layer</text>"#,
        LEFT + CELL_W * grid.n_layers as f64 / 2.0,
        axis_y + 28.0
    );
    let ly = axis_y + 38.0;
    let steps = 10;
    let sw = (CELL_W * grid.n_layers as f64).min(200.0) / steps as f64;
    for k in 0..steps {
        let t = if flat {
            0.5
        } else {
            (k as f64 + 0.5) / steps as f64
        };
        let _ = writeln!(
            s,
            r#"<rect class="legend" x="{}" y="{ly}" width="{sw}" height="10" fill="{}"/>"#,
            LEFT + sw * k as f64,
            blend(grid.site, t)
        );
    }
    let _ = writeln!(
        s,
        r#"<text class="scale-min" x="{}" y="{}" font-size="10" text-anchor="end">{lo:.4}</text>"#,
        LEFT - 4.0,
        ly + 9.0
    );
    let _ = writeln!(
        s,
        r#"<text class="scale-max" x="{}" y="{}" font-size="10">{hi:.4}</text>"#,
        LEFT + sw * steps as f64 + 4.0,
        ly + 9.0
    );
    if flat {
        let _ = writeln!(
            s,
            r##"<text class="warning" x="{LEFT}" y="{}" font-size="10" fill="#b00000">warning: every cell equals {lo:.4}; the color scale is flat</text>"##,
            ly + 26.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// The color a value receives on a given scale, as drawn by
/// [`emit_heatmap_svg`].
pub fn scale_color(site: Site, value: f64, lo: f64, hi: f64) -> String {
    if hi == lo {
        blend(site, 0.5)
    } else {
        blend(site, (value - lo) / (hi - lo))
    }
}
