//! Plain-text SVG heatmap of a sweep over `(a, b)`.

use std::fmt::Write;

const CELL: f64 = 28.0;
const MARGIN: f64 = 48.0;

/// Linear ramp from pale to dark blue; `None` is drawn grey.
fn colour(v: Option<f64>) -> String {
    let Some(v) = v else {
        return "#bdbdbd".into();
    };
    let t = v.clamp(0.0, 1.0);
    let lerp = |lo: f64, hi: f64| (lo + (hi - lo) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(247.0, 8.0), lerp(251.0, 48.0), lerp(255.0, 107.0))
}

/// Piecewise-linear position of `v` along a sorted grid, in cell units.
fn grid_pos(grid: &[f64], v: f64) -> Option<f64> {
    if grid.len() < 2 || v < grid[0] || v > grid[grid.len() - 1] {
        return None;
    }
    let i = grid.windows(2).position(|w| v <= w[1]).expect("v inside the grid");
    let (lo, hi) = (grid[i], grid[i + 1]);
    let frac = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    Some(i as f64 + frac + 0.5)
}

/// Heatmap with `b` along x and `a` along y (growing upwards). `value(i, j)`
/// is the cell at `a[i]`, `b[j]`. The curve `√a − √b = √K` is overlaid when
/// the grids are sorted.
pub fn heatmap(a: &[f64], b: &[f64], k: usize, value: impl Fn(usize, usize) -> Option<f64>) -> String {
    let w = MARGIN * 2.0 + CELL * b.len() as f64;
    let h = MARGIN * 2.0 + CELL * a.len() as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="10">"#);
    let y_of = |row: f64| h - MARGIN - row * CELL;
    for (i, av) in a.iter().enumerate() {
        for (j, _) in b.iter().enumerate() {
            let v = value(i, j);
            let x = MARGIN + j as f64 * CELL;
            let y = y_of(i as f64 + 1.0);
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"><title>a={av} b={} ami={}</title></rect>"#,
                colour(v),
                b[j],
                v.map_or("skipped".to_string(), |v| format!("{v:.3}"))
            );
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{av}</text>"#, MARGIN - 4.0, y_of(i as f64 + 0.5) + 3.0);
    }
    for (j, bv) in b.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{bv}</text>"#, MARGIN + (j as f64 + 0.5) * CELL, h - MARGIN + 14.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">b</text>"#, w / 2.0, h - 8.0);
    let _ = writeln!(s, r#"<text x="12" y="{}" text-anchor="middle">a</text>"#, h / 2.0);
    let sorted = |g: &[f64]| g.windows(2).all(|p| p[0] < p[1]);
    if sorted(a) && sorted(b) && b.len() > 1 {
        let sk = (k as f64).sqrt();
        let (b0, b1) = (b[0], b[b.len() - 1]);
        let pts: Vec<String> = (0..=200)
            .filter_map(|t| {
                let bv = b0 + (b1 - b0) * t as f64 / 200.0;
                let av = (bv.sqrt() + sk).powi(2);
                let x = grid_pos(b, bv)?;
                let y = grid_pos(a, av)?;
                Some(format!("{:.2},{:.2}", MARGIN + x * CELL, y_of(y)))
            })
            .collect();
        if pts.len() > 1 {
            let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#d62728" stroke-width="2"/>"##, pts.join(" "));
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_and_curve_are_emitted() {
        let a = [2.0, 4.0, 8.0, 16.0];
        let b = [0.0, 1.0, 2.0, 4.0];
        let svg = heatmap(&a, &b, 2, |i, j| if i == 0 && j == 3 { None } else { Some((i * j) as f64 / 9.0) });
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 16);
        assert_eq!(svg.matches("#bdbdbd").count(), 1);
        assert!(svg.contains("<polyline"));
        assert_eq!(colour(Some(0.0)), "#f7fbff");
        assert_eq!(colour(Some(1.0)), "#08306b");
    }

    #[test]
    fn grid_positions_interpolate() {
        let g = [0.0, 1.0, 3.0];
        assert_eq!(grid_pos(&g, 0.0), Some(0.5));
        assert_eq!(grid_pos(&g, 2.0), Some(2.0));
        assert_eq!(grid_pos(&g, 3.5), None);
    }
}
