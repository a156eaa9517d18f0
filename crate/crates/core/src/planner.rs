//! Shortest routes over the road graph and the ego-frame plan matrix.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::geo::{LocalPoint, Pose2D};
use crate::osm::{Element, NodeId, RoadGraph};

pub const DEFAULT_MATCH_DIST_M: f64 = 30.0;
/// Element nodes that are not on a way attach to the nearest route node
/// within this radius.
pub const ELEMENT_ASSOC_RADIUS_M: f64 = 5.0;

pub const CODE_PAD: f64 = 0.0;
pub const CODE_PAST: f64 = 1.0;
pub const CODE_FUTURE: f64 = 2.0;
pub const CODE_STOP_OR_SIGNAL: f64 = 3.0;
pub const CODE_CROSSING: f64 = 4.0;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("no route from {src} to {dst}")]
    NoRoute { src: NodeId, dst: NodeId },
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("no local position for node {0}")]
    MissingPosition(NodeId),
    #[error("route is empty")]
    EmptyRoute,
    #[error("off route: nearest node is {distance:.2} m away (limit {max_dist} m)")]
    OffRoute { distance: f64, max_dist: f64 },
    #[error("route has a single node; heading is undefined")]
    DegenerateRoute,
    #[error("index {idx} outside route of length {len}")]
    IndexOutOfRange { idx: usize, len: usize },
    #[error("unknown plan variant {0:?} (expected PF, STPF or STCPF)")]
    UnknownVariant(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub node_ids: Vec<NodeId>,
    pub cumulative_cost: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    PF,
    #[default]
    STPF,
    STCPF,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::PF, Variant::STPF, Variant::STCPF];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::PF => "PF",
            Variant::STPF => "STPF",
            Variant::STCPF => "STCPF",
        }
    }

    /// Feature code override for a node carrying `element`, if any.
    pub fn code_for(self, element: Element) -> Option<f64> {
        match (self, element) {
            (Variant::PF, _) | (_, Element::None) => None,
            (_, Element::StopSign | Element::TrafficSignal) => Some(CODE_STOP_OR_SIGNAL),
            (Variant::STPF, Element::Crossing) => None,
            (Variant::STCPF, Element::Crossing) => Some(CODE_CROSSING),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = PlanError;
    fn from_str(s: &str) -> Result<Self, PlanError> {
        match s.to_ascii_uppercase().as_str() {
            "PF" => Ok(Variant::PF),
            "STPF" => Ok(Variant::STPF),
            "STCPF" => Ok(Variant::STCPF),
            _ => Err(PlanError::UnknownVariant(s.to_string())),
        }
    }
}

/// The (P+F)x3 plan matrix; rows are `[p_x, p_y, f]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanGraph {
    pub variant: Variant,
    pub rows: Vec<[f64; 3]>,
}

impl PlanGraph {
    pub fn padded(variant: Variant, n: usize) -> Self {
        Self {
            variant,
            rows: vec![[0.0; 3]; n],
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }

    /// Re-express the non-padding rows, given in `from`, in frame `to`.
    pub fn reframed(&self, from: &Pose2D, to: &Pose2D) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                if r[2] == CODE_PAD {
                    return *r;
                }
                let q = to.to_local(from.to_parent(LocalPoint::new(r[0], r[1])));
                [q.x, q.y, r[2]]
            })
            .collect();
        Self {
            variant: self.variant,
            rows,
        }
    }

    pub fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| json!([sig9(r[0]), sig9(r[1]), sig9(r[2])]))
            .collect();
        json!({ "variant": self.variant.as_str(), "rows": rows })
    }

    pub fn from_json(v: &Value) -> Option<Self> {
        let variant = v.get("variant")?.as_str()?.parse().ok()?;
        let rows = v
            .get("rows")?
            .as_array()?
            .iter()
            .map(|r| {
                let a = r.as_array()?;
                if a.len() != 3 {
                    return None;
                }
                Some([a[0].as_f64()?, a[1].as_f64()?, a[2].as_f64()?])
            })
            .collect::<Option<Vec<_>>>()?;
        Some(Self { variant, rows })
    }
}

/// Round to nine significant digits.
pub fn sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

#[derive(Clone, Copy, PartialEq)]
struct Cost(f64);

impl Eq for Cost {}

impl PartialOrd for Cost {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cost {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Dijkstra over edge weights. Among equal-cost predecessors the one with
/// the smaller id wins, so results do not depend on insertion order.
pub fn shortest_route(g: &RoadGraph, src: NodeId, dst: NodeId) -> Result<Route, PlanError> {
    for id in [src, dst] {
        if !g.contains(id) {
            return Err(PlanError::UnknownNode(id));
        }
    }
    let mut dist: BTreeMap<NodeId, f64> = BTreeMap::new();
    let mut prev: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    let mut done: HashSet<NodeId> = HashSet::new();
    let mut heap = BinaryHeap::new();
    dist.insert(src, 0.0);
    heap.push(Reverse((Cost(0.0), src)));
    while let Some(Reverse((Cost(d), u))) = heap.pop() {
        if !done.insert(u) {
            continue;
        }
        if u == dst {
            break;
        }
        for &(v, w) in g.neighbors(u) {
            if done.contains(&v) {
                continue;
            }
            let nd = d + w;
            let better = match dist.get(&v) {
                None => true,
                Some(&old) => nd < old || (nd == old && prev.get(&v).is_some_and(|&p| u < p)),
            };
            if better {
                dist.insert(v, nd);
                prev.insert(v, u);
                heap.push(Reverse((Cost(nd), v)));
            }
        }
    }
    if !done.contains(&dst) {
        return Err(PlanError::NoRoute { src, dst });
    }
    let mut path = vec![dst];
    while let Some(&p) = prev.get(path.last().unwrap()) {
        if *path.last().unwrap() == src {
            break;
        }
        path.push(p);
    }
    path.reverse();
    Ok(Route {
        node_ids: path,
        cumulative_cost: dist[&dst],
    })
}

fn position(positions: &BTreeMap<NodeId, LocalPoint>, id: NodeId) -> Result<LocalPoint, PlanError> {
    positions
        .get(&id)
        .copied()
        .ok_or(PlanError::MissingPosition(id))
}

/// Index of the route node closest to `gps`; ties go to the smaller index.
pub fn match_waypoint(
    route: &Route,
    positions: &BTreeMap<NodeId, LocalPoint>,
    gps: LocalPoint,
    max_dist: f64,
) -> Result<usize, PlanError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &id) in route.node_ids.iter().enumerate() {
        let d = position(positions, id)?.distance(gps);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    let (idx, d) = best.ok_or(PlanError::EmptyRoute)?;
    if d > max_dist {
        return Err(PlanError::OffRoute {
            distance: d,
            max_dist,
        });
    }
    Ok(idx)
}

/// Heading of the route at `idx`, taken toward the next node, or from the
/// previous node at the last index.
pub fn estimate_heading(
    route: &Route,
    positions: &BTreeMap<NodeId, LocalPoint>,
    idx: usize,
) -> Result<f64, PlanError> {
    let n = route.node_ids.len();
    if n < 2 {
        return Err(PlanError::DegenerateRoute);
    }
    if idx >= n {
        return Err(PlanError::IndexOutOfRange { idx, len: n });
    }
    let (a, b) = if idx + 1 < n { (idx, idx + 1) } else { (idx - 1, idx) };
    let d = position(positions, route.node_ids[b])? - position(positions, route.node_ids[a])?;
    Ok(crate::geo::normalize_angle(d.y.atan2(d.x)))
}

/// Element attached to each route node: its own tag, else the nearest
/// off-way element node within [`ELEMENT_ASSOC_RADIUS_M`].
pub fn route_elements(
    route: &Route,
    g: &RoadGraph,
    positions: &BTreeMap<NodeId, LocalPoint>,
) -> Result<Vec<Vec<Element>>, PlanError> {
    let mut out: Vec<Vec<Element>> = route
        .node_ids
        .iter()
        .map(|id| {
            g.nodes
                .get(id)
                .map(|n| n.element)
                .filter(|e| *e != Element::None)
                .into_iter()
                .collect()
        })
        .collect();
    let route_pos: Vec<LocalPoint> = route
        .node_ids
        .iter()
        .map(|&id| position(positions, id))
        .collect::<Result<_, _>>()?;
    for (id, node) in &g.nodes {
        if node.element == Element::None || g.adjacency.contains_key(id) {
            continue;
        }
        let Some(p) = positions.get(id) else { continue };
        let mut best: Option<(usize, f64)> = None;
        for (i, q) in route_pos.iter().enumerate() {
            let d = p.distance(*q);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, d)) = best {
            if d <= ELEMENT_ASSOC_RADIUS_M {
                out[i].push(node.element);
            }
        }
    }
    Ok(out)
}

/// Feature code for one row under `variant`; stop/signal outranks crossing.
fn row_code(base: f64, elements: &[Element], variant: Variant) -> f64 {
    let mut code = base;
    for &e in elements {
        match variant.code_for(e) {
            Some(c) if c == CODE_STOP_OR_SIGNAL => return c,
            Some(c) => code = c,
            None => {}
        }
    }
    code
}

#[allow(clippy::too_many_arguments)]
pub fn build_plan_graph(
    route: &Route,
    g: &RoadGraph,
    positions: &BTreeMap<NodeId, LocalPoint>,
    idx: usize,
    heading: f64,
    variant: Variant,
    p: usize,
    f: usize,
) -> Result<PlanGraph, PlanError> {
    let n = route.node_ids.len();
    if idx >= n {
        return Err(PlanError::IndexOutOfRange { idx, len: n });
    }
    let elements = route_elements(route, g, positions)?;
    let anchor = position(positions, route.node_ids[idx])?;
    let frame = Pose2D {
        position: anchor,
        heading,
    };
    let mut rows = vec![[CODE_PAD; 3]; p + f];
    for (r, row) in rows.iter_mut().enumerate() {
        let (k, base) = if r < p {
            (idx as isize - p as isize + r as isize, CODE_PAST)
        } else {
            ((idx + r - p) as isize, CODE_FUTURE)
        };
        if k < 0 || k as usize >= n {
            continue;
        }
        let k = k as usize;
        let q = frame.to_local(position(positions, route.node_ids[k])?);
        *row = [q.x, q.y, row_code(base, &elements[k], variant)];
    }
    Ok(PlanGraph { variant, rows })
}

/// Settings for the match, heading and window steps.
#[derive(Clone, Copy, Debug)]
pub struct PlanSettings {
    pub variant: Variant,
    pub past: usize,
    pub future: usize,
    pub max_match_dist: f64,
}

impl Default for PlanSettings {
    fn default() -> Self {
        Self {
            variant: Variant::STPF,
            past: 20,
            future: 20,
            max_match_dist: DEFAULT_MATCH_DIST_M,
        }
    }
}

/// Match `gps` on `route`, estimate the heading there and build the plan.
/// Returns the plan and the frame it is expressed in.
pub fn plan_at(
    route: &Route,
    g: &RoadGraph,
    positions: &BTreeMap<NodeId, LocalPoint>,
    gps: LocalPoint,
    s: &PlanSettings,
) -> Result<(PlanGraph, Pose2D), PlanError> {
    let idx = match_waypoint(route, positions, gps, s.max_match_dist)?;
    let heading = estimate_heading(route, positions, idx)?;
    let plan = build_plan_graph(route, g, positions, idx, heading, s.variant, s.past, s.future)?;
    let frame = Pose2D {
        position: positions[&route.node_ids[idx]],
        heading,
    };
    Ok((plan, frame))
}
