//! OSM XML (v0.6) ingestion into a weighted road graph.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::geo::{haversine_m, wgs84_to_local, GeoError, GeoPoint, LocalPoint};

pub type NodeId = i64;

#[derive(Debug, Error)]
pub enum OsmError {
    #[error("malformed XML at byte {offset}: {message}")]
    Xml { offset: u64, message: String },
    #[error("way {way} references unknown node {node}")]
    UnresolvedNode { way: NodeId, node: NodeId },
    #[error("way {way} has fewer than two nodes")]
    ShortWay { way: NodeId },
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Point features that the plan encoder distinguishes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Element {
    #[default]
    None,
    StopSign,
    TrafficSignal,
    Crossing,
}

impl Element {
    pub fn as_str(self) -> &'static str {
        match self {
            Element::None => "none",
            Element::StopSign => "stop_sign",
            Element::TrafficSignal => "traffic_signal",
            Element::Crossing => "crossing",
        }
    }

    fn from_tags(tags: &[(String, String)]) -> Element {
        let mut crossing = false;
        for (k, v) in tags {
            match (k.as_str(), v.as_str()) {
                ("highway", "stop") => return Element::StopSign,
                ("highway", "traffic_signals") => return Element::TrafficSignal,
                ("highway", "crossing") | ("crossing", _) => crossing = true,
                _ => {}
            }
        }
        if crossing {
            Element::Crossing
        } else {
            Element::None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OsmNode {
    pub id: NodeId,
    pub location: GeoPoint,
    pub element: Element,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OsmWay {
    pub id: NodeId,
    pub node_ids: Vec<NodeId>,
    pub oneway: bool,
    pub road_class: String,
}

#[derive(Clone, Copy, Debug)]
pub struct GraphOptions {
    /// When false, oneway tags are ignored and every edge is bidirectional.
    pub respect_oneway: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            respect_oneway: true,
        }
    }
}

/// Weighted directed graph over OSM nodes. Adjacency lists are sorted by
/// neighbor id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoadGraph {
    pub nodes: BTreeMap<NodeId, OsmNode>,
    pub adjacency: BTreeMap<NodeId, Vec<(NodeId, f64)>>,
}

fn xml_err(offset: u64, e: impl std::fmt::Display) -> OsmError {
    OsmError::Xml {
        offset,
        message: e.to_string(),
    }
}

fn attrs(e: &BytesStart, offset: u64) -> Result<BTreeMap<String, String>, OsmError> {
    let mut out = BTreeMap::new();
    for a in e.attributes() {
        let a = a.map_err(|err| xml_err(offset, err))?;
        let key = String::from_utf8_lossy(a.key.as_ref()).into_owned();
        let value = a.unescape_value().map_err(|err| xml_err(offset, err))?;
        out.insert(key, value.into_owned());
    }
    Ok(out)
}

fn required<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
    tag: &str,
    offset: u64,
) -> Result<T, OsmError> {
    let raw = map
        .get(key)
        .ok_or_else(|| xml_err(offset, format!("<{tag}> missing attribute {key}")))?;
    raw.parse()
        .map_err(|_| xml_err(offset, format!("<{tag}> attribute {key}={raw:?} is not a number")))
}

enum Open {
    Node {
        id: NodeId,
        location: GeoPoint,
        tags: Vec<(String, String)>,
    },
    Way {
        id: NodeId,
        refs: Vec<NodeId>,
        tags: Vec<(String, String)>,
    },
    Other,
}

/// Parse an OSM XML document. Ways without a `highway` tag are dropped.
pub fn parse_osm(document: &[u8]) -> Result<(Vec<OsmNode>, Vec<OsmWay>), OsmError> {
    let mut reader = Reader::from_reader(document);
    let mut buf = Vec::new();
    let mut nodes = Vec::new();
    let mut raw_ways = Vec::new();
    let mut stack: Vec<Open> = Vec::new();

    loop {
        let offset = reader.buffer_position();
        let event = reader
            .read_event_into(&mut buf)
            .map_err(|e| xml_err(reader.error_position(), e))?;
        let (start, empty) = match &event {
            Event::Start(e) => (Some(e), false),
            Event::Empty(e) => (Some(e), true),
            Event::End(_) => {
                match stack.pop() {
                    Some(Open::Node { id, location, tags }) => nodes.push(OsmNode {
                        id,
                        location,
                        element: Element::from_tags(&tags),
                    }),
                    Some(Open::Way { id, refs, tags }) => raw_ways.push((id, refs, tags)),
                    Some(Open::Other) => {}
                    None => return Err(xml_err(offset, "unbalanced end tag")),
                }
                buf.clear();
                continue;
            }
            Event::Eof => break,
            _ => (None, false),
        };
        if let Some(e) = start {
            let open = match e.name().as_ref() {
                b"node" => {
                    let a = attrs(e, offset)?;
                    let id = required(&a, "id", "node", offset)?;
                    let lat = required(&a, "lat", "node", offset)?;
                    let lon = required(&a, "lon", "node", offset)?;
                    Open::Node {
                        id,
                        location: GeoPoint::new(lat, lon)?,
                        tags: Vec::new(),
                    }
                }
                b"way" => {
                    let a = attrs(e, offset)?;
                    Open::Way {
                        id: required(&a, "id", "way", offset)?,
                        refs: Vec::new(),
                        tags: Vec::new(),
                    }
                }
                b"tag" => {
                    let a = attrs(e, offset)?;
                    let k = a.get("k").cloned().unwrap_or_default();
                    let v = a.get("v").cloned().unwrap_or_default();
                    match stack.last_mut() {
                        Some(Open::Node { tags, .. }) | Some(Open::Way { tags, .. }) => {
                            tags.push((k, v))
                        }
                        _ => {}
                    }
                    Open::Other
                }
                b"nd" => {
                    let a = attrs(e, offset)?;
                    let r = required(&a, "ref", "nd", offset)?;
                    if let Some(Open::Way { refs, .. }) = stack.last_mut() {
                        refs.push(r);
                    }
                    Open::Other
                }
                _ => Open::Other,
            };
            if empty {
                match open {
                    Open::Node { id, location, tags } => nodes.push(OsmNode {
                        id,
                        location,
                        element: Element::from_tags(&tags),
                    }),
                    Open::Way { id, refs, tags } => raw_ways.push((id, refs, tags)),
                    Open::Other => {}
                }
            } else {
                stack.push(open);
            }
        }
        buf.clear();
    }
    if !stack.is_empty() {
        return Err(xml_err(reader.buffer_position(), "document ended inside an open element"));
    }

    let mut seen = std::collections::BTreeSet::new();
    for n in &nodes {
        if !seen.insert(n.id) {
            return Err(OsmError::DuplicateNode(n.id));
        }
    }

    let mut ways = Vec::new();
    for (id, mut refs, tags) in raw_ways {
        let Some(road_class) = tags.iter().find(|(k, _)| k == "highway").map(|(_, v)| v.clone())
        else {
            continue;
        };
        if let Some(&missing) = refs.iter().find(|r| !seen.contains(r)) {
            return Err(OsmError::UnresolvedNode { way: id, node: missing });
        }
        if refs.len() < 2 {
            return Err(OsmError::ShortWay { way: id });
        }
        let oneway_tag = tags.iter().find(|(k, _)| k == "oneway").map(|(_, v)| v.as_str());
        let oneway = match oneway_tag {
            Some("yes" | "true" | "1") => true,
            Some("-1" | "reverse") => {
                refs.reverse();
                true
            }
            _ => false,
        };
        ways.push(OsmWay {
            id,
            node_ids: refs,
            oneway,
            road_class,
        });
    }
    Ok((nodes, ways))
}

pub fn parse_osm_file(path: &Path) -> Result<(Vec<OsmNode>, Vec<OsmWay>), OsmError> {
    let bytes = std::fs::read(path).map_err(|source| OsmError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_osm(&bytes)
}

pub fn build_road_graph(nodes: &[OsmNode], ways: &[OsmWay]) -> RoadGraph {
    build_road_graph_with(nodes, ways, GraphOptions::default())
}

pub fn build_road_graph_with(nodes: &[OsmNode], ways: &[OsmWay], opts: GraphOptions) -> RoadGraph {
    let node_map: BTreeMap<NodeId, OsmNode> = nodes.iter().map(|n| (n.id, n.clone())).collect();
    let mut adjacency: BTreeMap<NodeId, Vec<(NodeId, f64)>> = BTreeMap::new();
    for way in ways {
        for &id in &way.node_ids {
            adjacency.entry(id).or_default();
        }
        for pair in way.node_ids.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (Some(na), Some(nb)) = (node_map.get(&a), node_map.get(&b)) else {
                log::warn!("way {}: edge {a}-{b} references a missing node, dropped", way.id);
                continue;
            };
            let w = haversine_m(na.location, nb.location);
            if a == b || w <= 0.0 {
                log::warn!("way {}: zero-length edge {a}-{b} dropped", way.id);
                continue;
            }
            add_edge(&mut adjacency, a, b, w);
            if !(way.oneway && opts.respect_oneway) {
                add_edge(&mut adjacency, b, a, w);
            }
        }
    }
    for list in adjacency.values_mut() {
        list.sort_by(|x, y| x.0.cmp(&y.0));
    }
    RoadGraph {
        nodes: node_map,
        adjacency,
    }
}

/// Parallel edges between the same pair keep the smaller weight.
fn add_edge(adj: &mut BTreeMap<NodeId, Vec<(NodeId, f64)>>, a: NodeId, b: NodeId, w: f64) {
    let list = adj.entry(a).or_default();
    match list.iter_mut().find(|(n, _)| *n == b) {
        Some(e) => e.1 = e.1.min(w),
        None => list.push((b, w)),
    }
}

impl RoadGraph {
    pub fn neighbors(&self, id: NodeId) -> &[(NodeId, f64)] {
        self.adjacency.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.values().map(Vec::len).sum()
    }

    pub fn total_weight(&self) -> f64 {
        self.adjacency.values().flatten().map(|(_, w)| w).sum()
    }

    /// Project every node into a local metric frame about `origin`.
    pub fn project(&self, origin: GeoPoint) -> Result<BTreeMap<NodeId, LocalPoint>, GeoError> {
        self.nodes
            .iter()
            .map(|(&id, n)| Ok((id, wgs84_to_local(origin, n.location)?)))
            .collect()
    }

    /// Mean of all node coordinates, a convenient projection origin.
    pub fn centroid(&self) -> Option<GeoPoint> {
        if self.nodes.is_empty() {
            return None;
        }
        let n = self.nodes.len() as f64;
        let (lat, lon) = self
            .nodes
            .values()
            .fold((0.0, 0.0), |(a, b), p| (a + p.location.lat, b + p.location.lon));
        Some(GeoPoint {
            lat: lat / n,
            lon: lon / n,
        })
    }
}

/// Canonical JSON dump (keys sorted, nodes and adjacency ordered by id).
pub fn canonical_json(graph: &RoadGraph, ways: &[OsmWay]) -> Value {
    let nodes: Vec<Value> = graph
        .nodes
        .values()
        .map(|n| {
            json!({
                "element": n.element.as_str(),
                "id": n.id,
                "lat": n.location.lat,
                "lon": n.location.lon,
            })
        })
        .collect();
    let mut sorted_ways: Vec<&OsmWay> = ways.iter().collect();
    sorted_ways.sort_by_key(|w| w.id);
    let ways: Vec<Value> = sorted_ways
        .iter()
        .map(|w| {
            json!({
                "id": w.id,
                "node_ids": w.node_ids,
                "oneway": w.oneway,
                "road_class": w.road_class,
            })
        })
        .collect();
    let adjacency: Vec<Value> = graph
        .adjacency
        .iter()
        .map(|(id, edges)| {
            let edges: Vec<Value> = edges.iter().map(|(n, w)| json!([n, w])).collect();
            json!({ "edges": edges, "id": id })
        })
        .collect();
    json!({ "adjacency": adjacency, "nodes": nodes, "ways": ways })
}

/// Serialize nodes and ways back to OSM XML. Coordinates use the shortest
/// representation that parses back to the same `f64`.
pub fn write_osm(nodes: &[OsmNode], ways: &[OsmWay]) -> String {
    let mut s = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<osm version=\"0.6\" generator=\"gridplan\">\n");
    for n in nodes {
        let tag = match n.element {
            Element::None => None,
            Element::StopSign => Some(("highway", "stop")),
            Element::TrafficSignal => Some(("highway", "traffic_signals")),
            Element::Crossing => Some(("highway", "crossing")),
        };
        match tag {
            None => {
                let _ = writeln!(s, "  <node id=\"{}\" lat=\"{:?}\" lon=\"{:?}\"/>", n.id, n.location.lat, n.location.lon);
            }
            Some((k, v)) => {
                let _ = writeln!(s, "  <node id=\"{}\" lat=\"{:?}\" lon=\"{:?}\">", n.id, n.location.lat, n.location.lon);
                let _ = writeln!(s, "    <tag k=\"{k}\" v=\"{v}\"/>");
                s.push_str("  </node>\n");
            }
        }
    }
    for w in ways {
        let _ = writeln!(s, "  <way id=\"{}\">", w.id);
        for r in &w.node_ids {
            let _ = writeln!(s, "    <nd ref=\"{r}\"/>");
        }
        let _ = writeln!(s, "    <tag k=\"highway\" v=\"{}\"/>", escape(&w.road_class));
        if w.oneway {
            s.push_str("    <tag k=\"oneway\" v=\"yes\"/>\n");
        }
        s.push_str("  </way>\n");
    }
    s.push_str("</osm>\n");
    s
}

fn escape(v: &str) -> String {
    quick_xml::escape::escape(v).into_owned()
}
