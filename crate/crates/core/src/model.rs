//! Physical model of the MEC testbed: nodes, links, the utilization-to-power
//! curve, and the delay/energy formulas behind the reward.

use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("{what} = {value} is outside [0, 1]")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("zero {0} allocation for a task that needs it")]
    ZeroAllocation(&'static str),
    #[error("invalid power curve: {0}")]
    InvalidCurve(String),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("power curve csv line {line}: {message}")]
    CurveParse { line: usize, message: String },
    #[error("reading power curve: {0}")]
    Io(String),
}

/// Piecewise-linear map from CPU utilization to node power (watts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct PowerCurve {
    points: Vec<(f64, f64)>,
}

impl TryFrom<Vec<(f64, f64)>> for PowerCurve {
    type Error = ModelError;

    fn try_from(points: Vec<(f64, f64)>) -> Result<Self, Self::Error> {
        Self::new(points)
    }
}

impl From<PowerCurve> for Vec<(f64, f64)> {
    fn from(c: PowerCurve) -> Self {
        c.points
    }
}

impl PowerCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidCurve(m.to_string()));
        if points.len() < 2 {
            return bad("need at least two points");
        }
        if points.iter().any(|(u, p)| !u.is_finite() || !p.is_finite()) {
            return bad("non-finite value");
        }
        if points[0].0 != 0.0 {
            return bad("first point must be at utilization 0");
        }
        if points[points.len() - 1].0 != 1.0 {
            return bad("last point must be at utilization 1");
        }
        if points[0].1 <= 0.0 {
            return bad("idle power must be positive");
        }
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return bad("utilization must be strictly increasing");
            }
            if w[1].1 < w[0].1 {
                return bad("power must be non-decreasing");
            }
        }
        Ok(Self { points })
    }

    /// The default placeholder curve: 100 W idle, 200 W at full load.
    pub fn linear(idle: f64, max: f64) -> Result<Self, ModelError> {
        Self::new(vec![(0.0, idle), (1.0, max)])
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn idle(&self) -> f64 {
        self.points[0].1
    }

    pub fn max(&self) -> f64 {
        self.points[self.points.len() - 1].1
    }

    pub fn power(&self, utilization: f64) -> Result<f64, ModelError> {
        if !(0.0..=1.0).contains(&utilization) {
            return Err(ModelError::OutOfRange { what: "utilization", value: utilization });
        }
        Ok(self.eval(utilization))
    }

    /// Interpolates without range checks; input is clamped to [0, 1].
    pub(crate) fn eval(&self, utilization: f64) -> f64 {
        let u = utilization.clamp(0.0, 1.0);
        let i = self.points.partition_point(|&(x, _)| x <= u);
        if i == 0 {
            return self.points[0].1;
        }
        if i >= self.points.len() {
            return self.max();
        }
        let (x0, y0) = self.points[i - 1];
        let (x1, y1) = self.points[i];
        y0 + (y1 - y0) * (u - x0) / (x1 - x0)
    }

    /// Smallest secant slope `(P(u) - P(0)) / u` over `u` in (0, 1]. Every
    /// unit of utilization-seconds costs at least this much dynamic energy.
    pub fn min_dynamic_slope(&self) -> f64 {
        let idle = self.idle();
        let first = &self.points[1];
        // Limit u -> 0 is the first segment's slope, which equals its secant.
        let mut slope = (first.1 - idle) / first.0;
        for &(u, p) in &self.points[1..] {
            slope = slope.min((p - idle) / u);
        }
        slope
    }

    /// Reads a two-column `utilization,power` CSV. A header row is optional.
    pub fn from_csv_path(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        Self::from_csv_str(&text)
    }

    pub fn from_csv_str(text: &str) -> Result<Self, ModelError> {
        let mut points = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let row = raw.trim();
            if row.is_empty() {
                continue;
            }
            let cols: Vec<&str> = row.split(',').map(str::trim).collect();
            if cols.len() != 2 {
                return Err(ModelError::CurveParse {
                    line,
                    message: format!("expected 2 columns, got {}", cols.len()),
                });
            }
            match (cols[0].parse::<f64>(), cols[1].parse::<f64>()) {
                (Ok(u), Ok(p)) => points.push((u, p)),
                _ if points.is_empty() && idx == 0 => continue, // header
                _ => {
                    return Err(ModelError::CurveParse {
                        line,
                        message: format!("not numeric: {row:?}"),
                    })
                }
            }
        }
        Self::new(points)
    }
}

pub type NodeId = usize;
pub type LinkId = usize;
pub type SliceId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: NodeId,
    #[serde(default = "default_cores")]
    pub cpu_cores: u32,
    pub power_curve: PowerCurve,
}

fn default_cores() -> u32 {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub id: LinkId,
    pub endpoints: (NodeId, NodeId),
    /// Gigabits per second.
    #[serde(default = "default_capacity")]
    pub capacity_gbps: f64,
}

fn default_capacity() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
}

impl Topology {
    /// Three sites, four cores each, fully meshed with 10 Gb/s links.
    pub fn three_site_default() -> Self {
        let curve = PowerCurve::linear(100.0, 200.0).expect("valid default curve");
        let nodes = (0..3)
            .map(|id| NodeSpec { id, cpu_cores: 4, power_curve: curve.clone() })
            .collect();
        let links = [(0, 1), (0, 2), (1, 2)]
            .into_iter()
            .enumerate()
            .map(|(id, endpoints)| LinkSpec { id, endpoints, capacity_gbps: 10.0 })
            .collect();
        Self { nodes, links }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidTopology(m));
        if self.nodes.is_empty() {
            return bad("no nodes".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return bad(format!("node ids must be 0..n in order, found {} at {i}", n.id));
            }
            if n.cpu_cores == 0 {
                return bad(format!("node {i} has zero cores"));
            }
        }
        for (i, l) in self.links.iter().enumerate() {
            if l.id != i {
                return bad(format!("link ids must be 0..n in order, found {} at {i}", l.id));
            }
            let (a, b) = l.endpoints;
            if a == b {
                return bad(format!("link {i} connects node {a} to itself"));
            }
            if a >= self.nodes.len() || b >= self.nodes.len() {
                return bad(format!("link {i} references a missing node"));
            }
            if !(l.capacity_gbps > 0.0 && l.capacity_gbps.is_finite()) {
                return bad(format!("link {i} capacity must be positive"));
            }
        }
        if !self.is_connected() {
            return bad("graph is not connected".into());
        }
        Ok(())
    }

    fn is_connected(&self) -> bool {
        let n = self.nodes.len();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for l in &self.links {
                let (a, b) = l.endpoints;
                let next = if a == v { b } else if b == v { a } else { continue };
                if !seen[next] {
                    seen[next] = true;
                    stack.push(next);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// One unit of slice work: compute on the slice's node, then ship the
/// result over the slice's link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: u64,
    pub slice_id: SliceId,
    pub node_id: NodeId,
    pub link_id: LinkId,
    pub arrival: f64,
    /// Core-seconds.
    pub cpu_work: f64,
    /// Gigabits.
    pub data_volume: f64,
    pub demand_fraction: f64,
}

pub fn power(node: &NodeSpec, utilization: f64) -> Result<f64, ModelError> {
    node.power_curve.power(utilization)
}

/// Service time with fixed allocations: compute then transmit.
pub fn task_delay(task: &Task, cpu_alloc: f64, bw_alloc: f64) -> Result<f64, ModelError> {
    if cpu_alloc <= 0.0 {
        return Err(ModelError::ZeroAllocation("cpu"));
    }
    let transmit = if task.data_volume > 0.0 {
        if bw_alloc <= 0.0 {
            return Err(ModelError::ZeroAllocation("bandwidth"));
        }
        task.data_volume / bw_alloc
    } else {
        0.0
    };
    Ok(task.cpu_work / cpu_alloc + transmit)
}

/// Energy charged to one slice over `interval` seconds: an equal share of
/// idle power across active slices plus dynamic power in proportion to the
/// slice's share of utilization.
pub fn attribute_energy(
    node: &NodeSpec,
    interval: f64,
    total_util: f64,
    slice_util: f64,
    active_slices: usize,
) -> Result<f64, ModelError> {
    check_fraction("total_util", total_util)?;
    check_fraction("slice_util", slice_util)?;
    if slice_util > total_util {
        return Err(ModelError::OutOfRange { what: "slice_util above total_util", value: slice_util });
    }
    if active_slices == 0 {
        return Err(ModelError::OutOfRange { what: "active_slices", value: 0.0 });
    }
    Ok(attribute_unchecked(&node.power_curve, interval, total_util, slice_util, active_slices))
}

pub(crate) fn attribute_unchecked(
    curve: &PowerCurve,
    interval: f64,
    total_util: f64,
    slice_util: f64,
    active_slices: usize,
) -> f64 {
    let idle = curve.idle();
    let dynamic = if total_util > 0.0 {
        (curve.eval(total_util) - idle) * (slice_util / total_util).min(1.0)
    } else {
        0.0
    };
    interval * (idle / active_slices as f64 + dynamic)
}

fn check_fraction(what: &'static str, v: f64) -> Result<(), ModelError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(ModelError::OutOfRange { what, value: v })
    }
}

/// Normalizers for a task's reward terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minima {
    pub delay: f64,
    pub energy: f64,
}

/// Lower bounds on a task's realized delay and attributed energy.
///
/// The delay bound is service with the whole node and the whole link. The
/// energy bound charges that service time at the smallest possible idle
/// share (every co-located slice active) plus the least dynamic energy any
/// utilization level can spend on the task's CPU work.
pub fn minima(task: &Task, topology: &Topology, colocated_slices: usize) -> Minima {
    let node = &topology.nodes[task.node_id];
    let link = &topology.links[task.link_id];
    let cores = node.cpu_cores as f64;
    let delay = task.cpu_work / cores + task.data_volume / link.capacity_gbps;
    let curve = &node.power_curve;
    let idle_share = attribute_unchecked(curve, delay, 0.0, 0.0, colocated_slices.max(1));
    let dynamic = curve.min_dynamic_slope() * task.cpu_work / cores;
    Minima { delay, energy: idle_share + dynamic }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn node(points: Vec<(f64, f64)>) -> NodeSpec {
        NodeSpec { id: 0, cpu_cores: 4, power_curve: PowerCurve::new(points).unwrap() }
    }

    fn task(work: f64, volume: f64) -> Task {
        Task {
            id: 0,
            slice_id: 0,
            node_id: 0,
            link_id: 0,
            arrival: 0.0,
            cpu_work: work,
            data_volume: volume,
            demand_fraction: 0.3,
        }
    }

    #[test]
    fn power_endpoints_and_interpolation() {
        let n = node(vec![(0.0, 100.0), (1.0, 200.0)]);
        assert_eq!(power(&n, 0.0).unwrap(), 100.0);
        assert_eq!(power(&n, 1.0).unwrap(), 200.0);
        assert_eq!(power(&n, 0.25).unwrap(), 125.0);
        assert!(matches!(power(&n, 1.5), Err(ModelError::OutOfRange { .. })));
        assert!(matches!(power(&n, -0.1), Err(ModelError::OutOfRange { .. })));
    }

    #[test]
    fn multi_segment_curve() {
        let n = node(vec![(0.0, 80.0), (0.5, 150.0), (1.0, 170.0)]);
        assert_eq!(power(&n, 0.25).unwrap(), 115.0);
        assert_eq!(power(&n, 0.5).unwrap(), 150.0);
        assert_eq!(power(&n, 0.75).unwrap(), 160.0);
        // Concave: the full-load secant is the flattest.
        assert!((n.power_curve.min_dynamic_slope() - 90.0).abs() < 1e-12);
    }

    #[test]
    fn curve_validation() {
        assert!(PowerCurve::new(vec![(0.0, 100.0)]).is_err());
        assert!(PowerCurve::new(vec![(0.1, 100.0), (1.0, 200.0)]).is_err());
        assert!(PowerCurve::new(vec![(0.0, 100.0), (0.9, 200.0)]).is_err());
        assert!(PowerCurve::new(vec![(0.0, 100.0), (0.5, 90.0), (1.0, 200.0)]).is_err());
        assert!(PowerCurve::new(vec![(0.0, 100.0), (0.5, 150.0), (0.5, 160.0), (1.0, 200.0)]).is_err());
        assert!(PowerCurve::new(vec![(0.0, 0.0), (1.0, 200.0)]).is_err());
    }

    #[test]
    fn curve_csv_with_and_without_header() {
        let a = PowerCurve::from_csv_str("utilization,power\n0,100\n0.5,160\n1,200\n").unwrap();
        let b = PowerCurve::from_csv_str("0,100\n0.5,160\n1,200").unwrap();
        assert_eq!(a, b);
        let err = PowerCurve::from_csv_str("0,100\nx,5\n1,200").unwrap_err();
        assert!(matches!(err, ModelError::CurveParse { line: 2, .. }));
        assert!(PowerCurve::from_csv_str("0,100\n0.5\n1,200").is_err());
    }

    #[test]
    fn delay_examples() {
        assert_eq!(task_delay(&task(4.0, 0.0), 4.0, 0.0).unwrap(), 1.0);
        assert_eq!(task_delay(&task(4.0, 10.0), 2.0, 10.0).unwrap(), 3.0);
        let full = task_delay(&task(4.0, 0.0), 4.0, 1.0).unwrap();
        let half = task_delay(&task(4.0, 0.0), 2.0, 1.0).unwrap();
        assert_eq!(half, 2.0 * full);
        assert_eq!(task_delay(&task(4.0, 1.0), 0.0, 1.0), Err(ModelError::ZeroAllocation("cpu")));
        assert_eq!(
            task_delay(&task(4.0, 1.0), 1.0, 0.0),
            Err(ModelError::ZeroAllocation("bandwidth"))
        );
    }

    #[test]
    fn attribution_examples() {
        let n = node(vec![(0.0, 100.0), (1.0, 200.0)]);
        // Sole occupant gets the whole node power.
        assert_eq!(attribute_energy(&n, 2.0, 0.6, 0.6, 1).unwrap(), 2.0 * 160.0);
        // Idle share only.
        assert_eq!(attribute_energy(&n, 1.0, 0.5, 0.0, 2).unwrap(), 50.0);
        // Two slices at 0.25 each: 50 + (150 - 100) * 0.5 = 75 J each.
        let each = attribute_energy(&n, 1.0, 0.5, 0.25, 2).unwrap();
        assert_eq!(each, 75.0);
        // Nothing left unattributed: both shares add up to P(0.5) * 1 s.
        assert_eq!(2.0 * each, power(&n, 0.5).unwrap());
        assert!(attribute_energy(&n, 1.0, 0.2, 0.3, 1).is_err());
        assert!(attribute_energy(&n, 1.0, 0.2, 0.1, 0).is_err());
    }

    #[test]
    fn minima_for_full_node() {
        let topo = Topology::three_site_default();
        let m = minima(&task(4.0, 0.0), &topo, 1);
        assert_eq!(m.delay, 1.0);
        // Sole occupant at full load for 1 s on the linear curve.
        assert_eq!(m.energy, 200.0);
    }

    #[test]
    fn minima_bound_random_allocations() {
        use rand::Rng;
        let topo = Topology::three_site_default();
        let t = task(1.2, 3.0);
        let m = minima(&t, &topo, 3);
        let mut rng = crate::sim::SeededRng::new(5, 0).rng();
        for _ in 0..1000 {
            let cpu = rng.random_range(1e-3..=4.0);
            let bw = rng.random_range(1e-3..=10.0);
            assert!(m.delay <= task_delay(&t, cpu, bw).unwrap());
        }
    }

    /// Brute force over co-scheduling scenarios: the task holds CPU share
    /// `f` and link share `g` while `k` slices are active; its attributed
    /// energy must never fall below the computed minimum.
    #[test]
    fn energy_minimum_is_a_lower_bound() {
        let curves = [
            vec![(0.0, 100.0), (1.0, 200.0)],
            vec![(0.0, 80.0), (0.5, 150.0), (1.0, 170.0)],
            vec![(0.0, 60.0), (0.3, 70.0), (0.7, 120.0), (1.0, 250.0)],
        ];
        let t = task(1.2, 3.0);
        for pts in curves {
            let n = node(pts);
            let topo = Topology { nodes: vec![n.clone()], links: vec![LinkSpec { id: 0, endpoints: (0, 1), capacity_gbps: 10.0 }] };
            let colocated = 3;
            let m = minima(&t, &topo, colocated);
            let grid: [f64; 7] = [0.05, 0.1, 0.25, 1.0 / 3.0, 0.5, 0.75, 1.0];
            for &f in &grid {
                for &g in &grid {
                    for k in 1..=colocated {
                        for &others in &[0.0, 0.2, 0.5] {
                            let total = (f + others).min(1.0);
                            let own = f.min(total);
                            let compute = t.cpu_work / (f * 4.0);
                            let transmit = t.data_volume / (g * 10.0);
                            let e_compute = attribute_energy(&n, compute, total, own, k).unwrap();
                            let e_transmit =
                                attribute_energy(&n, transmit, others.min(1.0), 0.0, k).unwrap();
                            let realized = e_compute + e_transmit;
                            assert!(
                                m.energy <= realized * (1.0 + 1e-12),
                                "f={f} g={g} k={k}: {} > {realized}",
                                m.energy
                            );
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn power_is_monotone(mut mids in proptest::collection::vec((0.01f64..0.99, 0.0f64..50.0), 0..5),
                             a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            mids.sort_by(|x, y| x.0.total_cmp(&y.0));
            mids.dedup_by(|x, y| (x.0 - y.0).abs() < 1e-6);
            let mut pts = vec![(0.0, 50.0)];
            let mut level = 50.0;
            for (u, inc) in mids {
                level += inc;
                pts.push((u, level));
            }
            pts.push((1.0, level + 10.0));
            let curve = PowerCurve::new(pts).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(curve.power(lo).unwrap() <= curve.power(hi).unwrap());
        }

        #[test]
        fn delay_strictly_decreasing(cpu in 0.1f64..4.0, bw in 0.1f64..10.0, d in 0.01f64..1.0) {
            let t = task(2.0, 5.0);
            let base = task_delay(&t, cpu, bw).unwrap();
            prop_assert!(task_delay(&t, cpu + d, bw).unwrap() < base);
            prop_assert!(task_delay(&t, cpu, bw + d).unwrap() < base);
        }
    }
}
