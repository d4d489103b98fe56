//! Exact 2D safety geometry: oriented boxes, separating-axis overlap, and
//! swept time-to-collision over linearly interpolated trajectories.

use serde::{Deserialize, Serialize};

/// Time-to-collision values are capped here; an uncapped infinity would
/// poison reward averages downstream.
pub const TTC_CAP: f64 = 10.0;

/// Substep used when sweeping boxes along interpolated trajectories.
pub const TTC_SUBSTEP: f64 = 0.05;

/// Waypoint period of every trajectory in this crate (2 Hz).
pub const WAYPOINT_DT: f64 = 0.5;

/// Oriented bounding box: center, half-extents derived from length/width,
/// and a heading in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obb {
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub heading: f64,
}

impl Obb {
    pub fn new(cx: f64, cy: f64, length: f64, width: f64, heading: f64) -> Self {
        assert!(length > 0.0 && width > 0.0, "obb extents must be positive");
        Obb { cx, cy, length, width, heading }
    }

    pub fn at(&self, cx: f64, cy: f64) -> Self {
        Obb { cx, cy, ..*self }
    }

    pub fn with_heading(&self, heading: f64) -> Self {
        Obb { heading, ..*self }
    }

    /// Local axes: longitudinal and lateral unit vectors.
    pub fn axes(&self) -> [(f64, f64); 2] {
        let (s, c) = self.heading.sin_cos();
        [(c, s), (-s, c)]
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        let [ax, ay] = self.axes();
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        let mut out = [(0.0, 0.0); 4];
        for (i, (sl, sw)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0)]
            .iter()
            .enumerate()
        {
            out[i] = (
                self.cx + sl * hl * ax.0 + sw * hw * ay.0,
                self.cy + sl * hl * ax.1 + sw * hw * ay.1,
            );
        }
        out
    }

    pub fn half_diagonal(&self) -> f64 {
        0.5 * (self.length * self.length + self.width * self.width).sqrt()
    }

    /// Does the point lie inside (or on) this box?
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let [lon, lat] = self.axes();
        let u = dx * lon.0 + dy * lon.1;
        let v = dx * lat.0 + dy * lat.1;
        u.abs() <= 0.5 * self.length + 1e-12 && v.abs() <= 0.5 * self.width + 1e-12
    }
}

fn project_gap(a: &Obb, b: &Obb, axis: (f64, f64)) -> f64 {
    let ra = 0.5 * a.length * (axis.0 * a.axes()[0].0 + axis.1 * a.axes()[0].1).abs()
        + 0.5 * a.width * (axis.0 * a.axes()[1].0 + axis.1 * a.axes()[1].1).abs();
    let rb = 0.5 * b.length * (axis.0 * b.axes()[0].0 + axis.1 * b.axes()[0].1).abs()
        + 0.5 * b.width * (axis.0 * b.axes()[1].0 + axis.1 * b.axes()[1].1).abs();
    let d = ((b.cx - a.cx) * axis.0 + (b.cy - a.cy) * axis.1).abs();
    d - (ra + rb)
}

/// Signed separation between two boxes: the largest projected gap over the
/// four face axes. Negative when the boxes intersect; for disjoint boxes it
/// is the standard separating-axis surrogate for clearance.
pub fn obb_separation(a: &Obb, b: &Obb) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for axis in a.axes().into_iter().chain(b.axes()) {
        best = best.max(project_gap(a, b, axis));
    }
    best
}

/// Separating-axis intersection test over the four face axes.
pub fn obb_overlap(a: &Obb, b: &Obb) -> bool {
    obb_separation(a, b) <= 0.0
}

/// Pose of a box swept along a waypoint trajectory. Position interpolates
/// linearly between waypoints; heading follows the segment direction and
/// falls back to the previous heading on degenerate segments.
pub fn swept_pose(
    waypoints: &[(f64, f64)],
    base_heading: f64,
    t: f64,
) -> ((f64, f64), f64) {
    assert!(!waypoints.is_empty());
    if waypoints.len() == 1 {
        return (waypoints[0], base_heading);
    }
    let last = (waypoints.len() - 1) as f64 * WAYPOINT_DT;
    let t = t.clamp(0.0, last);
    let seg = ((t / WAYPOINT_DT) as usize).min(waypoints.len() - 2);
    let frac = t / WAYPOINT_DT - seg as f64;
    let (x0, y0) = waypoints[seg];
    let (x1, y1) = waypoints[seg + 1];
    let pos = (x0 + frac * (x1 - x0), y0 + frac * (y1 - y0));
    // heading from the first non-degenerate segment at or before `seg`
    let mut heading = base_heading;
    for s in (0..=seg).rev() {
        let (ax, ay) = waypoints[s];
        let (bx, by) = waypoints[s + 1];
        let (dx, dy) = (bx - ax, by - ay);
        if dx * dx + dy * dy > 1e-12 {
            heading = dy.atan2(dx);
            break;
        }
    }
    (pos, heading)
}

/// Earliest time at which the swept boxes intersect, scanning the given
/// substep grid. Returns `TTC_CAP` when they never do.
pub fn swept_ttc(
    ego_traj: &[(f64, f64)],
    agent_traj: &[(f64, f64)],
    ego_box: &Obb,
    agent_box: &Obb,
    substep: f64,
) -> f64 {
    assert_eq!(
        ego_traj.len(),
        agent_traj.len(),
        "swept_ttc: trajectories must share a length"
    );
    assert!(!ego_traj.is_empty());
    let horizon = (ego_traj.len() - 1) as f64 * WAYPOINT_DT;
    let steps = (horizon / substep).round() as usize;
    for k in 0..=steps {
        let t = (k as f64 * substep).min(horizon);
        let (ep, eh) = swept_pose(ego_traj, ego_box.heading, t);
        let (ap, ah) = swept_pose(agent_traj, agent_box.heading, t);
        let e = ego_box.at(ep.0, ep.1).with_heading(eh);
        let a = agent_box.at(ap.0, ap.1).with_heading(ah);
        if obb_overlap(&e, &a) {
            return t.min(TTC_CAP);
        }
    }
    TTC_CAP
}

/// Time-to-collision at the standard 0.05 s substep, capped at 10 s.
pub fn exact_ttc(
    ego_traj: &[(f64, f64)],
    agent_traj: &[(f64, f64)],
    ego_box: &Obb,
    agent_box: &Obb,
) -> f64 {
    swept_ttc(ego_traj, agent_traj, ego_box, agent_box, TTC_SUBSTEP)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes_overlap() {
        let b = Obb::new(1.0, 2.0, 4.0, 2.0, 0.3);
        assert!(obb_overlap(&b, &b));
    }

    #[test]
    fn distant_boxes_disjoint() {
        // centers farther apart than the sum of half-diagonals
        let a = Obb::new(0.0, 0.0, 4.0, 2.0, 0.7);
        let b = Obb::new(10.0, 0.0, 4.0, 2.0, -0.4);
        assert!(a.half_diagonal() + b.half_diagonal() < 10.0);
        assert!(!obb_overlap(&a, &b));
    }

    #[test]
    fn separation_sign_tracks_overlap() {
        let a = Obb::new(0.0, 0.0, 4.0, 2.0, 0.0);
        let close = Obb::new(3.0, 0.0, 4.0, 2.0, 0.0); // touching band
        let far = Obb::new(6.0, 0.0, 4.0, 2.0, 0.0);
        assert!(obb_separation(&a, &close) <= 1e-12);
        assert!((obb_separation(&a, &far) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ttc_immediate_overlap_is_zero() {
        let b = Obb::new(0.0, 0.0, 4.0, 2.0, 0.0);
        let ego = vec![(0.0, 0.0); 8];
        let agent = vec![(1.0, 0.0); 8];
        assert_eq!(exact_ttc(&ego, &agent, &b, &b), 0.0);
    }

    #[test]
    fn ttc_parallel_lanes_capped() {
        let b = Obb::new(0.0, 0.0, 4.0, 2.0, 0.0);
        let ego: Vec<_> = (0..8).map(|i| (i as f64 * 5.0, 0.0)).collect();
        let agent: Vec<_> = (0..8).map(|i| (i as f64 * 5.0, 10.0)).collect();
        assert_eq!(exact_ttc(&ego, &agent, &b, &b), TTC_CAP);
    }

    #[test]
    fn ttc_head_on_closing() {
        // Head-on closing speed 10 m/s, initial edge gap 20 m -> 2.0 s.
        // Box length 4 -> edge gap 20 means centers 24 apart.
        let b = Obb::new(0.0, 0.0, 4.0, 2.0, 0.0);
        let n = 9;
        let ego: Vec<_> = (0..n).map(|i| (i as f64 * 0.5 * 5.0, 0.0)).collect();
        let agent: Vec<_> = (0..n).map(|i| (24.0 - i as f64 * 0.5 * 5.0, 0.0)).collect();
        let t = exact_ttc(&ego, &agent, &b, &b);
        // fine-substep oracle
        let oracle = swept_ttc(&ego, &agent, &b, &b, 0.005);
        assert!((t - 2.0).abs() <= TTC_SUBSTEP + 1e-9, "ttc {t}");
        assert!((t - oracle).abs() <= TTC_SUBSTEP + 1e-9);
    }
}
