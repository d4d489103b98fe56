//! Bird's-eye SVG traces: route, agent paths, and expert / predicted /
//! rollout trajectories for one episode.

use std::fmt::Write as _;

use crate::world::scenario::ScenarioScript;
use crate::world::{EpisodeLog, Trajectory};

pub struct TraceStyle {
    pub color: &'static str,
    pub width: f64,
    pub dash: Option<&'static str>,
}

pub const ROUTE_STYLE: TraceStyle = TraceStyle { color: "#b0b0b0", width: 3.5, dash: None };
pub const EXPERT_STYLE: TraceStyle = TraceStyle { color: "#2e8b57", width: 1.2, dash: None };
pub const POLICY_STYLE: TraceStyle = TraceStyle { color: "#1f77b4", width: 1.2, dash: None };
pub const ROLLOUT_STYLE: TraceStyle = TraceStyle { color: "#9467bd", width: 1.0, dash: Some("3,2") };
pub const AGENT_STYLE: TraceStyle = TraceStyle { color: "#ff8c00", width: 0.8, dash: Some("2,2") };

/// Named trajectory layered onto the scene.
pub struct Layer<'a> {
    pub label: &'a str,
    pub trajectory: &'a Trajectory,
    pub style: TraceStyle,
}

fn polyline(out: &mut String, pts: &[(f64, f64)], style: &TraceStyle) {
    if pts.len() < 2 {
        return;
    }
    let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{x:.2},{:.2}", -y)).collect();
    let dash = style.dash.map(|d| format!(" stroke-dasharray=\"{d}\"")).unwrap_or_default();
    let _ = writeln!(
        out,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"{}\"{} />",
        coords.join(" "),
        style.color,
        style.width,
        dash
    );
}

/// Render one episode scene. Y points up in world space, so it is negated
/// into SVG coordinates.
pub fn render_scene(script: &ScenarioScript, log: Option<&EpisodeLog>, layers: &[Layer]) -> String {
    // bounds from the route plus margins
    let (mut min_x, mut max_x, mut min_y, mut max_y) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    let mut grow = |x: f64, y: f64| {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(-y);
        max_y = max_y.max(-y);
    };
    for &(x, y) in &script.route.points {
        grow(x, y);
    }
    for l in layers {
        for &(x, y) in &l.trajectory.waypoints {
            grow(x, y);
        }
    }
    let margin = 12.0;
    let (w, h) = (max_x - min_x + 2.0 * margin, max_y - min_y + 2.0 * margin);

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"{:.1} {:.1} {:.1} {:.1}\">",
        min_x - margin,
        min_y - margin,
        w,
        h
    );
    let _ = writeln!(out, "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{w:.1}\" height=\"{h:.1}\" fill=\"#fbfbf8\"/>", min_x - margin, min_y - margin);

    polyline(&mut out, &script.route.points, &ROUTE_STYLE);
    for agent in &script.agents {
        polyline(&mut out, &agent.path, &AGENT_STYLE);
    }
    if let Some(log) = log {
        let driven: Vec<(f64, f64)> = log.steps.iter().map(|s| (s.ego.x, s.ego.y)).collect();
        polyline(&mut out, &driven, &POLICY_STYLE);
        for inf in &log.infractions {
            if let Some(step) = log.steps.iter().find(|s| s.step == inf.step) {
                let _ = writeln!(
                    out,
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.2\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.2\"/>",
                    step.ego.x, -step.ego.y
                );
            }
        }
    }
    for layer in layers {
        polyline(&mut out, &layer.trajectory.waypoints, &layer.style);
    }

    // legend
    let mut ly = min_y - margin + 6.0;
    for (label, color) in layers
        .iter()
        .map(|l| (l.label, l.style.color))
        .chain(std::iter::once(("route", ROUTE_STYLE.color)))
    {
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{ly:.1}\" font-size=\"4.5\" fill=\"{color}\">{label}</text>",
            min_x - margin + 4.0
        );
        ly += 6.0;
    }
    out.push_str("</svg>\n");
    out
}
