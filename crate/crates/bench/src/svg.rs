//! Minimal SVG writer for top-down scenario drawings. Geometry is emitted in
//! meters under one flipping transform, so y points up as in the workspace.

use std::fmt::Write as _;

use dlon_core::scenario::Scenario;
use dlon_core::se2::Pose2;

const PX_PER_M: f64 = 600.0;
const MARGIN_PX: f64 = 20.0;
pub const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Canvas {
    body: String,
    width: f64,
    height: f64,
    x0: f64,
    y0: f64,
    desc: String,
}

fn stroke(color: &str, width: f64) -> String {
    format!(r#"fill="none" stroke="{color}" stroke-width="{width}" vector-effect="non-scaling-stroke""#)
}

impl Canvas {
    /// A canvas covering the scenario workspace; `desc` ends up in `<desc>`.
    pub fn new(scenario: &Scenario, desc: &str) -> Self {
        let w = &scenario.workspace;
        let mut c = Self {
            body: String::new(),
            width: (w.x_max - w.x_min) * PX_PER_M + 2.0 * MARGIN_PX,
            height: (w.y_max - w.y_min) * PX_PER_M + 2.0 * MARGIN_PX,
            x0: w.x_min,
            y0: w.y_min,
            desc: desc.to_string(),
        };
        let _ = writeln!(
            c.body,
            r#"<rect x="{}" y="{}" width="{}" height="{}" {}/>"#,
            w.x_min,
            w.y_min,
            w.x_max - w.x_min,
            w.y_max - w.y_min,
            stroke("#000", 1.5)
        );
        for o in &scenario.obstacles {
            let _ = writeln!(c.body, r##"<circle cx="{}" cy="{}" r="{}" fill="#888"/>"##, o.center[0], o.center[1], o.radius);
            let _ = writeln!(
                c.body,
                r#"<circle cx="{}" cy="{}" r="{}" {} stroke-dasharray="3 3"/>"#,
                o.center[0],
                o.center[1],
                scenario.safety_radius(o),
                stroke("#888", 1.0)
            );
        }
        for (t, g) in scenario.goals().iter().enumerate() {
            c.pose_marker(g, PALETTE[t % PALETTE.len()], true);
        }
        c
    }

    /// Circle with a heading tick; hollow for goals.
    pub fn pose_marker(&mut self, p: &Pose2, color: &str, hollow: bool) {
        let r = 0.012;
        let fill = if hollow { "none".to_string() } else { color.to_string() };
        let _ = writeln!(
            self.body,
            r#"<circle cx="{}" cy="{}" r="{r}" fill="{fill}" stroke="{color}" stroke-width="1.5" vector-effect="non-scaling-stroke"/>"#,
            p.x, p.y
        );
        let (s, c) = p.theta.sin_cos();
        let _ = writeln!(
            self.body,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" {}/>"#,
            p.x,
            p.y,
            p.x + 2.5 * r * c,
            p.y + 2.5 * r * s,
            stroke(color, 1.5)
        );
    }

    pub fn polyline(&mut self, points: &[[f64; 2]], color: &str, width: f64) {
        if points.is_empty() {
            return;
        }
        let pts: Vec<String> = points.iter().map(|p| format!("{},{}", p[0], p[1])).collect();
        let _ = writeln!(self.body, r#"<polyline points="{}" {}/>"#, pts.join(" "), stroke(color, width));
    }

    pub fn segment(&mut self, a: [f64; 2], b: [f64; 2], color: &str, width: f64) {
        self.polyline(&[a, b], color, width);
    }

    pub fn finish(self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {:.0} {:.0}">"#,
            self.width, self.height, self.width, self.height
        );
        let _ = writeln!(s, "<desc>{}</desc>", escape(&self.desc));
        let _ = writeln!(
            s,
            r#"<g transform="translate({} {}) scale({PX_PER_M} {}) translate({} {})">"#,
            MARGIN_PX,
            self.height - MARGIN_PX,
            -PX_PER_M,
            -self.x0,
            -self.y0
        );
        s.push_str(&self.body);
        s.push_str("</g>\n</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use dlon_core::scenario::{Obstacle, Receptacle, Workspace};

    #[test]
    fn document_is_well_formed() {
        let sc = Scenario {
            workspace: Workspace { x_min: 0.0, x_max: 1.0, y_min: 0.0, y_max: 0.5 },
            obstacles: vec![Obstacle { center: [0.5, 0.2], radius: 0.05 }],
            receptacles: vec![Receptacle { pose: Pose2::new(0.2, 0.2, 0.0), insertion_offset: Pose2::identity() }],
            terminal_radius: 0.02,
            clearance: 0.01,
        };
        let mut c = Canvas::new(&sc, "seed=1 <a&b>");
        c.polyline(&[[0.1, 0.1], [0.2, 0.3]], PALETTE[0], 2.0);
        c.polyline(&[], PALETTE[0], 2.0);
        let s = c.finish();
        assert!(s.starts_with("<svg xmlns=\"http://www.w3.org/2000/svg\""));
        assert!(s.trim_end().ends_with("</svg>"));
        assert!(s.contains("seed=1 &lt;a&amp;b&gt;"));
        assert_eq!(s.matches("<polyline").count(), 1);
        assert_eq!(s.matches("<g ").count(), s.matches("</g>").count());
    }
}
