//! SVG panels: the heading-up crop with plan nodes, ground truth and prediction.

use std::fmt::Write;

use gridplan::dataset::Sample;
use gridplan::geo::{LocalPoint, Trajectory};
use gridplan::planner::{CODE_CROSSING, CODE_FUTURE, CODE_PAD, CODE_PAST, CODE_STOP_OR_SIGNAL};

const PANEL_PX: usize = 512;

struct Frame {
    side: f64,
    resolution: f64,
}

impl Frame {
    /// Ego-frame point to SVG user units (one unit per crop cell, +x up).
    fn map(&self, p: LocalPoint) -> (f64, f64) {
        let h = self.side / 2.0;
        (h - p.y * self.resolution + 0.5, h - p.x * self.resolution + 0.5)
    }
}

fn hex(px: [f32; 3]) -> String {
    let b = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", b(px[0]), b(px[1]), b(px[2]))
}

fn polyline(out: &mut String, f: &Frame, pts: &[LocalPoint], style: &str) {
    if pts.is_empty() {
        return;
    }
    let coords: Vec<String> = pts
        .iter()
        .map(|&p| {
            let (u, v) = f.map(p);
            format!("{u:.3},{v:.3}")
        })
        .collect();
    let _ = writeln!(out, "  <polyline points=\"{}\" fill=\"none\" {style}/>", coords.join(" "));
}

/// Render one sample. `pred` is drawn solid over the dashed ground truth.
pub fn render(sample: &Sample, pred: Option<&Trajectory>) -> String {
    let side = sample.scene.side();
    let f = Frame {
        side: side as f64,
        resolution: sample.scene.spec.resolution,
    };
    let unit = (side as f64 / 128.0).max(0.25);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PANEL_PX}\" height=\"{PANEL_PX}\" viewBox=\"0 0 {side} {side}\">"
    );
    s.push_str("  <g shape-rendering=\"crispEdges\">\n");
    for r in 0..side {
        let mut c = 0;
        while c < side {
            let color = hex(sample.scene.pixel(r, c));
            let start = c;
            while c < side && hex(sample.scene.pixel(r, c)) == color {
                c += 1;
            }
            let _ = writeln!(
                s,
                "    <rect x=\"{start}\" y=\"{r}\" width=\"{}\" height=\"1\" fill=\"{color}\"/>",
                c - start
            );
        }
    }
    s.push_str("  </g>\n");

    let g = unit * 1.5;
    for row in &sample.plan.rows {
        let code = row[2];
        if code == CODE_PAD {
            continue;
        }
        let (u, v) = f.map(LocalPoint::new(row[0], row[1]));
        let glyph = if code == CODE_PAST {
            format!("<circle cx=\"{u:.3}\" cy=\"{v:.3}\" r=\"{g:.3}\" fill=\"#9e9e9e\"/>")
        } else if code == CODE_FUTURE {
            format!("<circle cx=\"{u:.3}\" cy=\"{v:.3}\" r=\"{g:.3}\" fill=\"#1e88e5\"/>")
        } else if code == CODE_STOP_OR_SIGNAL {
            format!(
                "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"#e53935\"/>",
                u - g,
                v - g,
                2.0 * g,
                2.0 * g
            )
        } else if code == CODE_CROSSING {
            format!(
                "<polygon points=\"{:.3},{:.3} {:.3},{:.3} {:.3},{:.3}\" fill=\"#fb8c00\"/>",
                u,
                v - g,
                u - g,
                v + g,
                u + g,
                v + g
            )
        } else {
            format!("<circle cx=\"{u:.3}\" cy=\"{v:.3}\" r=\"{g:.3}\" fill=\"none\" stroke=\"#000000\"/>")
        };
        let _ = writeln!(s, "  {glyph}");
    }

    let w = unit * 0.8;
    polyline(
        &mut s,
        &f,
        &sample.gt.waypoints,
        &format!("stroke=\"#000000\" stroke-width=\"{w:.3}\" stroke-dasharray=\"{:.3},{:.3}\"", 3.0 * w, 2.0 * w),
    );
    if let Some(p) = pred {
        polyline(&mut s, &f, &p.waypoints, &format!("stroke=\"#d81b60\" stroke-width=\"{w:.3}\""));
    }

    let (u, v) = f.map(LocalPoint::new(0.0, 0.0));
    let e = unit * 2.5;
    let _ = writeln!(
        s,
        "  <polygon points=\"{:.3},{:.3} {:.3},{:.3} {:.3},{:.3}\" fill=\"#ffffff\" stroke=\"#000000\" stroke-width=\"{:.3}\"/>",
        u,
        v - e,
        u - e * 0.6,
        v + e * 0.6,
        u + e * 0.6,
        v + e * 0.6,
        unit * 0.3
    );
    s.push_str("</svg>\n");
    s
}
