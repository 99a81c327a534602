//! Minimal SVG heatmap of a `t × x` field.

use std::fmt::Write;

/// Viridis sampled at nine stops.
const STOPS: [(u8, u8, u8); 9] = [
    (68, 1, 84),
    (71, 44, 122),
    (59, 81, 139),
    (44, 113, 142),
    (33, 144, 141),
    (39, 173, 129),
    (92, 200, 99),
    (170, 220, 50),
    (253, 231, 37),
];

fn color(s: f64) -> String {
    let s = if s.is_finite() { s.clamp(0.0, 1.0) } else { 0.0 };
    let pos = s * (STOPS.len() - 1) as f64;
    let k = (pos.floor() as usize).min(STOPS.len() - 2);
    let w = pos - k as f64;
    let mix = |a: u8, b: u8| (a as f64 * (1.0 - w) + b as f64 * w).round() as u8;
    let (a, b) = (STOPS[k], STOPS[k + 1]);
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

pub struct Heatmap<'a> {
    pub title: &'a str,
    /// Colour-bar label including units.
    pub unit: &'a str,
    pub t: &'a [f64],
    pub x: &'a [f64],
    /// Row-major `t × x`, already in display units.
    pub values: &'a [f64],
}

const MAX_COLS: usize = 150;
const MAX_ROWS: usize = 150;

impl Heatmap<'_> {
    /// Time runs left to right, position bottom to top.
    pub fn render(&self) -> String {
        let (nt, nx) = (self.t.len(), self.x.len());
        let (lo, hi) = self.values.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let ct = nt.min(MAX_COLS);
        let cx = nx.min(MAX_ROWS);
        let (left, top, w, h) = (70.0, 40.0, 600.0, 360.0);
        let (cw, ch) = (w / ct as f64, h / cx as f64);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="12">"#,
            left + w + 110.0,
            top + h + 60.0
        );
        let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, left + w / 2.0, self.title);
        for i in 0..ct {
            let k = i * (nt - 1) / (ct - 1).max(1);
            for j in 0..cx {
                let jj = j * (nx - 1) / (cx - 1).max(1);
                let v = self.values[k * nx + jj];
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                    left + i as f64 * cw,
                    top + h - (j + 1) as f64 * ch,
                    cw + 0.05,
                    ch + 0.05,
                    color((v - lo) / span)
                );
            }
        }
        let (t0, t1) = (self.t[0], self.t[nt - 1]);
        let (x0, x1) = (self.x[0], self.x[nx - 1]);
        for f in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{:.0}</text>"#, left + f * w, top + h + 16.0, t0 + f * (t1 - t0));
            let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.0}</text>"#, left - 6.0, top + h - f * h + 4.0, x0 + f * (x1 - x0));
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">time t [s]</text>"#, left + w / 2.0, top + h + 36.0);
        let _ = writeln!(
            s,
            r#"<text x="20" y="{}" text-anchor="middle" transform="rotate(-90 20 {})">position x [m]</text>"#,
            top + h / 2.0,
            top + h / 2.0
        );
        let bx = left + w + 20.0;
        for i in 0..50 {
            let f = i as f64 / 49.0;
            let _ = writeln!(s, r#"<rect x="{bx}" y="{:.2}" width="16" height="{:.2}" fill="{}"/>"#, top + h - (i + 1) as f64 * h / 50.0, h / 50.0 + 0.05, color(f));
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}">{:.2}</text>"#, bx + 20.0, top + 10.0, hi);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{:.2}</text>"#, bx + 20.0, top + h, lo);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, bx, top + h + 36.0, self.unit);
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(color(0.0), "#440154");
        assert_eq!(color(1.0), "#fde725");
        assert_eq!(color(f64::NAN), "#440154");
    }

    #[test]
    fn renders_one_rect_per_cell_plus_colour_bar() {
        let t = [0.0, 1.0, 2.0];
        let x = [0.0, 10.0];
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let svg = Heatmap { title: "rho", unit: "veh/km", t: &t, x: &x, values: &v }.render();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 6 + 50);
        assert!(svg.contains("time t [s]") && svg.contains("veh/km"));
    }
}
