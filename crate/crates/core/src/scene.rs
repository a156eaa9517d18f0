//! Semantic grids, ego-centric crops and synthetic scenario maps.
//!
//! Rasters use one convention everywhere: cell `(r, c)` sits at the
//! grid-frame point `(-r/D, -c/D)`, so rows advance along -x (image up is
//! +x) and columns along -y (image left is +y). A grid's `origin` pose places
//! cell (0,0) and this frame inside the map frame. An ego crop is then just a
//! grid whose origin is `(L/2/D, L/2/D, 0)` in the ego frame.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{local_to_wgs84, GeoPoint, LocalPoint, Pose2D};
use crate::osm::{build_road_graph, Element, NodeId, OsmNode, OsmWay, RoadGraph};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid class code {0}")]
    InvalidClass(u8),
    #[error("color ({0}, {1}, {2}) is not in the palette")]
    InvalidColor(f32, f32, f32),
    #[error("invalid grid spec: {0}")]
    Spec(String),
    #[error("grid file: {0}")]
    Format(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Class {
    Unknown = 0,
    Road = 1,
    LaneMarking = 2,
    Crosswalk = 3,
    Sidewalk = 4,
    Vegetation = 5,
}

impl Class {
    pub const ALL: [Class; 6] = [
        Class::Unknown,
        Class::Road,
        Class::LaneMarking,
        Class::Crosswalk,
        Class::Sidewalk,
        Class::Vegetation,
    ];

    pub fn from_code(code: u8) -> Result<Class, SceneError> {
        Class::ALL
            .get(code as usize)
            .copied()
            .ok_or(SceneError::InvalidClass(code))
    }

    pub fn color(self) -> [f32; 3] {
        PALETTE[self as usize]
    }

    /// Cells a compliant trajectory must never touch.
    pub fn is_off_road(self) -> bool {
        matches!(self, Class::Sidewalk | Class::Vegetation)
    }
}

/// RGB in [0,1], indexed by class code.
pub const PALETTE: [[f32; 3]; 6] = [
    [0.0, 0.0, 0.0],
    [0.5, 0.5, 0.5],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.5, 0.0],
];

pub fn encode_classes(classes: &[u8]) -> Result<Vec<f32>, SceneError> {
    let mut out = Vec::with_capacity(classes.len() * 3);
    for &c in classes {
        out.extend_from_slice(&Class::from_code(c)?.color());
    }
    Ok(out)
}

pub fn decode_colors(data: &[f32]) -> Result<Vec<u8>, SceneError> {
    data.chunks_exact(3)
        .map(|px| {
            PALETTE
                .iter()
                .position(|p| p[..] == px[..])
                .map(|i| i as u8)
                .ok_or(SceneError::InvalidColor(px[0], px[1], px[2]))
        })
        .collect()
}

/// Crop geometry: `side == 2 * resolution * horizon`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Pixels per meter (D).
    pub resolution: f64,
    /// Meters from the ego to the crop edge (L_max).
    pub horizon: f64,
    /// Pixels per side (L).
    pub side: usize,
}

impl GridSpec {
    pub fn new(resolution: f64, horizon: f64) -> Result<Self, SceneError> {
        let l = 2.0 * resolution * horizon;
        if !(resolution > 0.0 && horizon > 0.0) || (l - l.round()).abs() > 1e-9 || l < 2.0 {
            return Err(SceneError::Spec(format!(
                "2 * D * L_max must be a positive integer, got D={resolution}, L_max={horizon}"
            )));
        }
        Ok(Self {
            resolution,
            horizon,
            side: l.round() as usize,
        })
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let expect = GridSpec::new(self.resolution, self.horizon)?;
        if expect.side != self.side {
            return Err(SceneError::Spec(format!(
                "side {} does not equal 2*D*L_max = {}",
                self.side, expect.side
            )));
        }
        Ok(())
    }

    /// Pose of crop cell (0,0) in the ego frame.
    pub fn crop_origin(&self) -> Pose2D {
        let h = self.side as f64 / 2.0 / self.resolution;
        Pose2D::new(h, h, 0.0)
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::new(2.0, 100.0).expect("default grid spec")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticGrid {
    pub width: usize,
    pub height: usize,
    /// Cells per meter.
    pub resolution: f64,
    /// Pose of cell (0,0) and the raster frame in the map frame.
    pub origin: Pose2D,
    /// Row-major class codes.
    pub classes: Vec<u8>,
}

impl SemanticGrid {
    pub fn filled(width: usize, height: usize, resolution: f64, origin: Pose2D, class: Class) -> Self {
        Self {
            width,
            height,
            resolution,
            origin,
            classes: vec![class as u8; width * height],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> Class {
        Class::ALL[self.classes[r * self.width + c] as usize]
    }

    pub fn set(&mut self, r: usize, c: usize, class: Class) {
        self.classes[r * self.width + c] = class as u8;
    }

    /// Map-frame center of cell `(r, c)`.
    pub fn cell_center(&self, r: usize, c: usize) -> LocalPoint {
        let d = self.resolution;
        self.origin
            .to_parent(LocalPoint::new(-(r as f64) / d, -(c as f64) / d))
    }

    /// Nearest cell to a map-frame point, if inside the grid.
    pub fn cell_of(&self, p: LocalPoint) -> Option<(usize, usize)> {
        let g = self.origin.to_local(p);
        let r = (-g.x * self.resolution).round();
        let c = (-g.y * self.resolution).round();
        if r < 0.0 || c < 0.0 || r >= self.height as f64 || c >= self.width as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    /// Class at a map-frame point; Unknown outside the grid.
    pub fn class_at(&self, p: LocalPoint) -> Class {
        self.cell_of(p)
            .map(|(r, c)| self.get(r, c))
            .unwrap_or(Class::Unknown)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.classes.len() != self.width * self.height {
            return Err(SceneError::Format(format!(
                "{} class codes for a {}x{} grid",
                self.classes.len(),
                self.width,
                self.height
            )));
        }
        if let Some(&bad) = self.classes.iter().find(|&&c| c as usize >= Class::ALL.len()) {
            return Err(SceneError::InvalidClass(bad));
        }
        Ok(())
    }
}

pub const SGRD_MAGIC: &[u8; 4] = b"SGRD";
pub const SGRD_VERSION: u16 = 1;
const SGRD_HEADER: usize = 4 + 2 + 4 + 4 + 4 + 24;

/// `SGRD | version u16 | width u32 | height u32 | D f32 | origin x,y,heading f64 | u8 codes`,
/// all little-endian.
pub fn encode_grid(grid: &SemanticGrid) -> Vec<u8> {
    let mut buf = Vec::with_capacity(SGRD_HEADER + grid.classes.len());
    buf.extend_from_slice(SGRD_MAGIC);
    buf.extend_from_slice(&SGRD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(grid.width as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.height as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.resolution as f32).to_le_bytes());
    for v in [grid.origin.position.x, grid.origin.position.y, grid.origin.heading] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&grid.classes);
    buf
}

pub fn decode_grid(bytes: &[u8]) -> Result<SemanticGrid, SceneError> {
    if bytes.len() < SGRD_HEADER {
        return Err(SceneError::Format("file shorter than header".into()));
    }
    if &bytes[..4] != SGRD_MAGIC {
        return Err(SceneError::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != SGRD_VERSION {
        return Err(SceneError::Format(format!("unsupported version {version}")));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let f64_at = |i: usize| f64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
    let width = u32_at(6);
    let height = u32_at(10);
    let resolution = f64::from(f32::from_le_bytes(bytes[14..18].try_into().unwrap()));
    let origin = Pose2D {
        position: LocalPoint::new(f64_at(18), f64_at(26)),
        heading: f64_at(34),
    };
    let expected = width
        .checked_mul(height)
        .ok_or_else(|| SceneError::Format("grid dimensions overflow".into()))?;
    if bytes.len() - SGRD_HEADER != expected {
        return Err(SceneError::Format(format!(
            "expected {expected} class bytes, found {}",
            bytes.len() - SGRD_HEADER
        )));
    }
    let grid = SemanticGrid {
        width,
        height,
        resolution,
        origin,
        classes: bytes[SGRD_HEADER..].to_vec(),
    };
    grid.validate()?;
    Ok(grid)
}

pub fn save_grid(path: &Path, grid: &SemanticGrid) -> Result<(), SceneError> {
    std::fs::write(path, encode_grid(grid))?;
    Ok(())
}

pub fn load_grid(path: &Path) -> Result<SemanticGrid, SceneError> {
    decode_grid(&std::fs::read(path)?)
}

/// Ego-centric crop `m_s`, stored HWC as palette colors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneCrop {
    pub spec: GridSpec,
    pub data: Vec<f32>,
}

impl SceneCrop {
    pub fn from_classes(spec: GridSpec, classes: &[u8]) -> Result<Self, SceneError> {
        if classes.len() != spec.side * spec.side {
            return Err(SceneError::Spec(format!(
                "{} classes for a {}x{} crop",
                classes.len(),
                spec.side,
                spec.side
            )));
        }
        Ok(Self {
            spec,
            data: encode_classes(classes)?,
        })
    }

    pub fn side(&self) -> usize {
        self.spec.side
    }

    pub fn pixel(&self, r: usize, c: usize) -> [f32; 3] {
        let i = (r * self.spec.side + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Class codes, when every pixel is a palette color.
    pub fn classes(&self) -> Option<Vec<u8>> {
        decode_colors(&self.data).ok()
    }

    /// The crop as a grid in the ego frame, if it decodes to classes.
    pub fn as_grid(&self) -> Option<SemanticGrid> {
        Some(SemanticGrid {
            width: self.spec.side,
            height: self.spec.side,
            resolution: self.spec.resolution,
            origin: self.spec.crop_origin(),
            classes: self.classes()?,
        })
    }

    /// Channel-first copy for the scene encoder.
    pub fn to_chw(&self) -> Vec<f64> {
        let n = self.spec.side * self.spec.side;
        let mut out = vec![0.0; 3 * n];
        for i in 0..n {
            for ch in 0..3 {
                out[ch * n + i] = f64::from(self.data[i * 3 + ch]);
            }
        }
        out
    }
}

/// Class codes of the ego crop; see [`crop_ego`].
pub fn crop_classes(map: &SemanticGrid, ego: &Pose2D, spec: &GridSpec) -> Vec<u8> {
    let l = spec.side;
    let half = l as f64 / 2.0;
    let (s, c) = ego.heading.sin_cos();
    let mut out = Vec::with_capacity(l * l);
    for r in 0..l {
        let x = (half - r as f64) / spec.resolution;
        for col in 0..l {
            let y = (half - col as f64) / spec.resolution;
            let p = LocalPoint::new(
                ego.position.x + c * x - s * y,
                ego.position.y + s * x + c * y,
            );
            out.push(map.class_at(p) as u8);
        }
    }
    out
}

/// Heading-up crop around `ego`: output cell `(r, c)` shows the map class
/// at ego-frame point `((L/2 - r)/D, (L/2 - c)/D)`, nearest neighbor.
pub fn crop_ego(map: &SemanticGrid, ego: &Pose2D, spec: &GridSpec) -> SceneCrop {
    let classes = crop_classes(map, ego, spec);
    SceneCrop {
        spec: *spec,
        data: encode_classes(&classes).expect("grid holds valid classes"),
    }
}

// ---------------------------------------------------------------------------
// Scenario synthesis

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Control {
    #[default]
    None,
    Stop,
    Signal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadSpec {
    pub centerline: Vec<[f64; 2]>,
    #[serde(default = "default_road_width")]
    pub width: f64,
    #[serde(default)]
    pub oneway: bool,
    #[serde(default = "default_road_class")]
    pub road_class: String,
    /// Extra crosswalk bands, as arc lengths along the centerline.
    #[serde(default)]
    pub crosswalks: Vec<f64>,
    /// Extra point elements, as arc lengths along the centerline.
    #[serde(default)]
    pub elements: Vec<ElementSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElementSpec {
    pub arc: f64,
    pub kind: Element,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntersectionSpec {
    pub center: [f64; 2],
    #[serde(default)]
    pub control: Control,
    #[serde(default = "default_true")]
    pub crosswalks: bool,
    #[serde(default = "default_curb_radius")]
    pub curb_radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteSpec {
    #[serde(default)]
    pub name: String,
    /// Points snapped to the nearest graph node; consecutive pairs are
    /// joined by shortest routes.
    pub via: Vec<[f64; 2]>,
    /// Range of lane arc length where ego poses are drawn.
    pub ego_arc: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    #[serde(default = "default_geo_origin")]
    pub geo_origin: GeoPoint,
    /// Map cells per meter.
    #[serde(default = "default_map_resolution")]
    pub resolution: f64,
    /// Extra meters of vegetation around the road network.
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_lane_width")]
    pub lane_width: f64,
    #[serde(default = "default_sidewalk_width")]
    pub sidewalk_width: f64,
    #[serde(default = "default_node_spacing")]
    pub node_spacing: f64,
    /// Standard deviation of seeded noise added to OSM node coordinates.
    #[serde(default)]
    pub osm_jitter: f64,
    pub roads: Vec<RoadSpec>,
    #[serde(default)]
    pub intersections: Vec<IntersectionSpec>,
    #[serde(default)]
    pub routes: Vec<RouteSpec>,
}

fn default_road_width() -> f64 {
    7.0
}
fn default_road_class() -> String {
    "residential".into()
}
fn default_true() -> bool {
    true
}
fn default_curb_radius() -> f64 {
    6.0
}
fn default_geo_origin() -> GeoPoint {
    GeoPoint {
        lat: 32.8801,
        lon: -117.2340,
    }
}
fn default_map_resolution() -> f64 {
    2.0
}
fn default_margin() -> f64 {
    40.0
}
fn default_lane_width() -> f64 {
    3.5
}
fn default_sidewalk_width() -> f64 {
    2.0
}
fn default_node_spacing() -> f64 {
    5.0
}

/// Crosswalk band center and stop line distance from an intersection center.
pub const CROSSWALK_OFFSET_M: f64 = 10.0;
pub const CONTROL_OFFSET_M: f64 = 15.0;
pub const CROSSWALK_BAND_M: f64 = 3.0;
pub const LANE_MARK_WIDTH_M: f64 = 0.15;

impl ScenarioSpec {
    pub const PRESETS: [&'static str; 4] = ["straight", "four_way", "three_way", "u_turn"];

    fn base(name: &str, roads: Vec<RoadSpec>) -> Self {
        Self {
            name: name.into(),
            geo_origin: default_geo_origin(),
            resolution: default_map_resolution(),
            margin: default_margin(),
            lane_width: default_lane_width(),
            sidewalk_width: default_sidewalk_width(),
            node_spacing: default_node_spacing(),
            osm_jitter: 0.0,
            roads,
            intersections: Vec::new(),
            routes: Vec::new(),
        }
    }

    fn road(a: [f64; 2], b: [f64; 2]) -> RoadSpec {
        RoadSpec {
            centerline: vec![a, b],
            width: default_road_width(),
            oneway: false,
            road_class: default_road_class(),
            crosswalks: Vec::new(),
            elements: Vec::new(),
        }
    }

    fn route(name: &str, via: &[[f64; 2]], ego_arc: [f64; 2]) -> RouteSpec {
        RouteSpec {
            name: name.into(),
            via: via.to_vec(),
            ego_arc,
        }
    }

    /// Built-in scenarios. Approach arms are 100 m long and ego poses are
    /// drawn 8 to 22 m before the junction so every horizon spans the
    /// maneuver.
    pub fn preset(name: &str) -> Option<ScenarioSpec> {
        const W: [f64; 2] = [-100.0, 0.0];
        const E: [f64; 2] = [100.0, 0.0];
        const N: [f64; 2] = [0.0, 100.0];
        const S: [f64; 2] = [0.0, -100.0];
        const C: [f64; 2] = [0.0, 0.0];
        let near = [78.0, 92.0];
        let four_way = |name: &str, control: Control| {
            let mut s = Self::base(name, vec![Self::road(W, E), Self::road(S, N)]);
            s.intersections.push(IntersectionSpec {
                center: C,
                control,
                crosswalks: true,
                curb_radius: default_curb_radius(),
            });
            s
        };
        let spec = match name {
            "straight" => {
                let mut s = Self::base(name, vec![Self::road(W, E)]);
                s.routes.push(Self::route("straight", &[W, E], [10.0, 150.0]));
                s
            }
            "four_way" => {
                let mut s = four_way(name, Control::Stop);
                s.routes = vec![
                    Self::route("straight", &[W, E], near),
                    Self::route("left", &[W, N], near),
                    Self::route("right", &[W, S], near),
                    Self::route("u_turn", &[W, C, W], near),
                ];
                s
            }
            "three_way" => {
                let mut s = Self::base(name, vec![Self::road(W, E), Self::road(C, N)]);
                s.intersections.push(IntersectionSpec {
                    center: C,
                    control: Control::Signal,
                    crosswalks: true,
                    curb_radius: default_curb_radius(),
                });
                s.routes = vec![
                    Self::route("straight", &[W, E], near),
                    Self::route("left", &[W, N], near),
                    Self::route("right", &[N, W], near),
                ];
                s
            }
            "u_turn" => {
                let mut s = four_way(name, Control::None);
                s.routes = vec![Self::route("u_turn", &[W, C, W], near)];
                s
            }
            _ => return None,
        };
        Some(spec)
    }

    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let s: ScenarioSpec =
            serde_json::from_str(text).map_err(|e| SceneError::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Scenario(format!("{}: {m}", self.name)));
        if self.roads.is_empty() {
            return bad("no roads".into());
        }
        if !(self.resolution > 0.0 && self.node_spacing > 0.0 && self.lane_width > 0.0) {
            return bad("resolution, node_spacing and lane_width must be positive".into());
        }
        for (i, r) in self.roads.iter().enumerate() {
            if r.centerline.len() < 2 || r.width <= 0.0 {
                return bad(format!("road {i} needs two points and a positive width"));
            }
        }
        self.geo_origin.validate().map_err(|e| SceneError::Scenario(e.to_string()))?;
        Ok(())
    }
}

fn pt(p: [f64; 2]) -> LocalPoint {
    LocalPoint::new(p[0], p[1])
}

/// Distance from `p` to a polyline and the arc length of the closest point.
pub fn project_onto(line: &[LocalPoint], p: LocalPoint) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0);
    let mut acc = 0.0;
    for w in line.windows(2) {
        let d = w[1] - w[0];
        let len2 = d.x * d.x + d.y * d.y;
        let t = if len2 > 0.0 {
            (((p - w[0]).x * d.x + (p - w[0]).y * d.y) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let dist = p.distance(w[0].lerp(w[1], t));
        if dist < best.0 {
            best = (dist, acc + t * len2.sqrt());
        }
        acc += len2.sqrt();
    }
    best
}

/// Map, graph and ground-truth geometry of a synthesized scenario.
#[derive(Clone, Debug)]
pub struct SynthesizedScene {
    pub spec: ScenarioSpec,
    pub grid: SemanticGrid,
    pub graph: RoadGraph,
    pub nodes: Vec<OsmNode>,
    pub ways: Vec<OsmWay>,
    /// Exact map-frame node positions (before any OSM jitter).
    pub true_positions: BTreeMap<NodeId, LocalPoint>,
}

struct Band {
    road: usize,
    arc: f64,
}

/// Rasterize a scenario and build its road graph.
///
/// Layers are painted in this order, each overwriting the previous one:
/// vegetation, sidewalks, road surface (roads and junction plazas), lane
/// markings, crosswalk bands. Within a layer the later road wins.
pub fn synthesize_map(spec: &ScenarioSpec, seed: u64) -> Result<SynthesizedScene, SceneError> {
    spec.validate()?;
    let lines: Vec<Vec<LocalPoint>> = spec
        .roads
        .iter()
        .map(|r| r.centerline.iter().copied().map(pt).collect())
        .collect();
    let lengths: Vec<f64> = lines.iter().map(|l| crate::geo::polyline_length(l)).collect();

    // junction geometry: which roads pass through each center and at what arc
    let mut bands: Vec<Band> = Vec::new();
    let mut element_arcs: Vec<Vec<(f64, Element)>> = spec
        .roads
        .iter()
        .map(|r| r.elements.iter().map(|e| (e.arc, e.kind)).collect())
        .collect();
    for (i, r) in spec.roads.iter().enumerate() {
        for &a in &r.crosswalks {
            bands.push(Band { road: i, arc: a });
            element_arcs[i].push((a, Element::Crossing));
        }
    }
    let mut plazas: Vec<(LocalPoint, f64)> = Vec::new();
    for js in &spec.intersections {
        let center = pt(js.center);
        let mut radius: f64 = 0.0;
        for (i, line) in lines.iter().enumerate() {
            let (d, s0) = project_onto(line, center);
            if d > 0.5 {
                continue;
            }
            radius = radius.max(spec.roads[i].width / 2.0 + js.curb_radius);
            for sign in [-1.0, 1.0] {
                let cw = s0 + sign * CROSSWALK_OFFSET_M;
                if js.crosswalks && (0.0..=lengths[i]).contains(&cw) {
                    bands.push(Band { road: i, arc: cw });
                    element_arcs[i].push((cw, Element::Crossing));
                }
                let stop = s0 + sign * CONTROL_OFFSET_M;
                let kind = match js.control {
                    Control::None => None,
                    Control::Stop => Some(Element::StopSign),
                    Control::Signal => Some(Element::TrafficSignal),
                };
                if let (Some(kind), true) = (kind, (0.0..=lengths[i]).contains(&stop)) {
                    element_arcs[i].push((stop, kind));
                }
            }
        }
        if radius > 0.0 {
            plazas.push((center, radius));
        } else {
            return Err(SceneError::Scenario(format!(
                "{}: intersection at ({}, {}) lies on no road",
                spec.name, js.center[0], js.center[1]
            )));
        }
    }

    // raster extent
    let mut lo = LocalPoint::new(f64::INFINITY, f64::INFINITY);
    let mut hi = LocalPoint::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (line, r) in lines.iter().zip(&spec.roads) {
        let pad = r.width / 2.0 + spec.sidewalk_width + spec.margin;
        for p in line {
            lo = LocalPoint::new(lo.x.min(p.x - pad), lo.y.min(p.y - pad));
            hi = LocalPoint::new(hi.x.max(p.x + pad), hi.y.max(p.y + pad));
        }
    }
    let d = spec.resolution;
    let width = ((hi.x - lo.x) * d).ceil() as usize + 1;
    let height = ((hi.y - lo.y) * d).ceil() as usize + 1;
    // north-up raster: cell (0,0) at the north-west corner, image up = +y
    let origin = Pose2D::new(lo.x, hi.y, PI / 2.0);
    let mut grid = SemanticGrid::filled(width, height, d, origin, Class::Vegetation);
    let cell = 1.0 / d;
    let mark_half = LANE_MARK_WIDTH_M / 2.0 + cell / 2.0;

    for r in 0..height {
        for c in 0..width {
            // exact center without trig noise: east with columns, south with rows
            let p = LocalPoint::new(lo.x + c as f64 * cell, hi.y - r as f64 * cell);
            let proj: Vec<(f64, f64)> = lines.iter().map(|l| project_onto(l, p)).collect();
            let in_plaza = plazas.iter().any(|(ctr, rad)| p.distance(*ctr) <= *rad);
            let mut class = Class::Vegetation;
            for (i, rs) in spec.roads.iter().enumerate() {
                if proj[i].0 <= rs.width / 2.0 + spec.sidewalk_width {
                    class = Class::Sidewalk;
                }
            }
            if plazas
                .iter()
                .any(|(ctr, rad)| p.distance(*ctr) <= rad + spec.sidewalk_width)
            {
                class = Class::Sidewalk;
            }
            for (i, rs) in spec.roads.iter().enumerate() {
                if proj[i].0 <= rs.width / 2.0 {
                    class = Class::Road;
                }
            }
            if in_plaza {
                class = Class::Road;
            }
            for (i, rs) in spec.roads.iter().enumerate() {
                if !rs.oneway && !in_plaza && proj[i].0 <= mark_half {
                    class = Class::LaneMarking;
                }
            }
            for b in &bands {
                let (dist, s) = proj[b.road];
                if dist <= spec.roads[b.road].width / 2.0 && (s - b.arc).abs() <= CROSSWALK_BAND_M / 2.0 {
                    class = Class::Crosswalk;
                }
            }
            grid.set(r, c, class);
        }
    }

    // graph: nodes every `node_spacing` along each centerline plus element
    // arcs; coincident nodes of different roads are merged
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, spec.osm_jitter.max(0.0)).expect("finite jitter");
    let mut true_positions: BTreeMap<NodeId, LocalPoint> = BTreeMap::new();
    let mut node_elements: BTreeMap<NodeId, Element> = BTreeMap::new();
    let mut ways = Vec::new();
    let mut next_id: NodeId = 1;
    for (i, (line, rs)) in lines.iter().zip(&spec.roads).enumerate() {
        let len = lengths[i];
        let mut arcs: Vec<f64> = Vec::new();
        let steps = (len / spec.node_spacing + 1e-9).floor() as usize;
        arcs.extend((0..=steps).map(|k| k as f64 * spec.node_spacing));
        arcs.push(len);
        arcs.extend(element_arcs[i].iter().map(|e| e.0).filter(|a| (0.0..=len).contains(a)));
        arcs.sort_by(f64::total_cmp);
        arcs.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
        let mut ids = Vec::with_capacity(arcs.len());
        for &s in &arcs {
            let p = crate::geo::point_at_arc(line, s);
            let id = match true_positions.iter().find(|(_, q)| q.distance(p) < 1e-3) {
                Some((&id, _)) => id,
                None => {
                    let id = next_id;
                    next_id += 1;
                    true_positions.insert(id, p);
                    id
                }
            };
            for (a, kind) in &element_arcs[i] {
                if (a - s).abs() < 1e-6 {
                    let e = node_elements.entry(id).or_default();
                    // stop and signal outrank crossing on a shared node
                    if *e == Element::None || *e == Element::Crossing {
                        *e = *kind;
                    }
                }
            }
            ids.push(id);
        }
        ways.push(OsmWay {
            id: i as NodeId + 1,
            node_ids: ids,
            oneway: rs.oneway,
            road_class: rs.road_class.clone(),
        });
    }
    let nodes: Vec<OsmNode> = true_positions
        .iter()
        .map(|(&id, &p)| {
            let noisy = if spec.osm_jitter > 0.0 {
                p + LocalPoint::new(jitter.sample(&mut rng), jitter.sample(&mut rng))
            } else {
                p
            };
            OsmNode {
                id,
                location: local_to_wgs84(spec.geo_origin, noisy),
                element: node_elements.get(&id).copied().unwrap_or_default(),
            }
        })
        .collect();
    let graph = build_road_graph(&nodes, &ways);
    Ok(SynthesizedScene {
        spec: spec.clone(),
        grid,
        graph,
        nodes,
        ways,
        true_positions,
    })
}
