//! Line plots of sweep results as standalone SVG.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nerfattack_core::{Error, Result};

use crate::sweep::{SweepKind, SweepResult};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 55.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn series_label(kind: SweepKind, series: usize) -> String {
    match kind {
        SweepKind::Views => format!("S = {series}"),
        SweepKind::Patch => format!("{series}x{series} px patch"),
    }
}

/// Rounds a positive span to 1, 2 or 5 times a power of ten.
fn nice_step(span: f64, ticks: f64) -> f64 {
    let raw = span / ticks;
    let mag = 10f64.powf(raw.log10().floor());
    let m = raw / mag;
    mag * if m <= 1.0 {
        1.0
    } else if m <= 2.0 {
        2.0
    } else if m <= 5.0 {
        5.0
    } else {
        10.0
    }
}

/// Mean distance against attacked-view count, one polyline per series with
/// +-1 std error bars.
pub fn render_svg(result: &SweepResult) -> Result<String> {
    let groups = result.by_series();
    if groups.is_empty() {
        return Err(Error::Contract("cannot plot an empty sweep grid".into()));
    }
    let ks = result.cells.iter().map(|c| c.k as f64);
    let (mut k_lo, mut k_hi) = ks.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), k| (a.min(k), b.max(k)));
    if k_lo == k_hi {
        k_lo -= 1.0;
        k_hi += 1.0;
    }
    let y_top = result.cells.iter().map(|c| c.mean_distance + c.std_distance).fold(0.0, f64::max);
    let y_step = nice_step(if y_top > 0.0 { y_top } else { 1.0 }, 5.0);
    let y_hi = (y_top / y_step).ceil().max(1.0) * y_step;

    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let x = |k: f64| LEFT + (k - k_lo) / (k_hi - k_lo) * pw;
    let y = |v: f64| TOP + ph - v.clamp(0.0, y_hi) / y_hi * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    if let Some(p) = &result.provenance {
        let _ = writeln!(
            s,
            "<desc>seed={} config_sha256={} commit={}</desc>",
            p.seed,
            escape(&p.config_hash),
            escape(p.commit.as_deref().unwrap_or("unknown"))
        );
    }
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<g class="axes" stroke="black" fill="none">"#);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/>"#, TOP + ph, LEFT + pw, TOP + ph);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.2}"/>"#, TOP + ph);
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g class="ticks" font-size="10">"#);
    for k in (k_lo.ceil() as i64)..=(k_hi.floor() as i64) {
        let xx = x(k as f64);
        let _ = writeln!(
            s,
            r#"<line x1="{xx:.2}" y1="{:.2}" x2="{xx:.2}" y2="{:.2}" stroke="black"/>"#,
            TOP + ph,
            TOP + ph + 4.0
        );
        let _ = writeln!(s, r#"<text x="{xx:.2}" y="{:.2}" text-anchor="middle">{k}</text>"#, TOP + ph + 16.0);
    }
    let n_y = (y_hi / y_step).round() as usize;
    for i in 0..=n_y {
        let v = i as f64 * y_step;
        let yy = y(v);
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{yy:.2}" x2="{LEFT}" y2="{yy:.2}" stroke="black"/>"#, LEFT - 4.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 7.0,
            yy + 3.5,
            fmt_tick(v, y_step)
        );
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(
        s,
        r#"<text class="xlabel" x="{:.2}" y="{:.2}" text-anchor="middle">attacked source views (count)</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text class="ylabel" transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">mean per-pixel RGB l2 distance (intensity in [0, 1])</text>"#,
        TOP + ph / 2.0
    );

    for (i, (series, cells)) in groups.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<g class="series" stroke="{color}">"#);
        for c in cells {
            let xx = x(c.k as f64);
            let (lo, hi) = (y(c.mean_distance - c.std_distance), y(c.mean_distance + c.std_distance));
            let _ = writeln!(s, r#"<line class="errorbar" x1="{xx:.2}" y1="{lo:.2}" x2="{xx:.2}" y2="{hi:.2}"/>"#);
        }
        let pts: Vec<String> =
            cells.iter().map(|c| format!("{:.2},{:.2}", x(c.k as f64), y(c.mean_distance))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(s, "</g>");
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let _ = writeln!(
            s,
            r#"<g class="legend-entry"><line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text></g>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&series_label(result.kind, *series))
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn fmt_tick(v: f64, step: f64) -> String {
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    format!("{v:.decimals$}")
}

pub fn plot_svg(result: &SweepResult, path: &Path) -> Result<()> {
    let text = render_svg(result)?;
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}
