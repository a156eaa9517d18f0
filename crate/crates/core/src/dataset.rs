//! Samples, the TNDS container, synthetic generation and the importer for
//! externally published data.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::geo::{
    local_to_wgs84, point_at_arc, to_ego_frame, GeoError, GeoPoint, LocalPoint, Pose2D, Trajectory,
};
use crate::metrics;
use crate::model::ModelConfig;
use crate::osm::NodeId;
use crate::planner::{plan_at, shortest_route, PlanError, PlanGraph, PlanSettings, Route, Variant};
use crate::scene::{
    crop_ego, decode_grid, encode_grid, synthesize_map, GridSpec, RouteSpec, ScenarioSpec, SceneCrop, SceneError,
    SemanticGrid, SynthesizedScene, PALETTE,
};

pub const TNDS_MAGIC: &[u8; 4] = b"TNDS";
pub const TNDS_VERSION: u16 = 1;

/// Unix time of the first synthetic sample.
const SYNTH_EPOCH: f64 = 1_600_000_000.0;
/// Seconds between consecutive synthetic samples.
const SYNTH_PERIOD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset file: {0}")]
    Codec(String),
    #[error("unsupported dataset version {0}")]
    Version(u16),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("sample {sample}: {message}")]
    Import { sample: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("scenario {scenario}: generated trajectory leaves the drivable area")]
    NonCompliant { scenario: String },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One training or evaluation example. Plan, scene and gt share the ego frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub plan: PlanGraph,
    pub scene: SceneCrop,
    pub gt: Trajectory,
    pub ego_map_pose: Pose2D,
    pub ego_global: GeoPoint,
    pub timestamp: f64,
    pub imu: Option<Vec<f64>>,
    /// Index into [`Dataset::maps`], when the map is carried.
    pub map_id: Option<u32>,
    /// Fields we carry but never read.
    pub aux: BTreeMap<String, Vec<u8>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" | "training" => Ok(Split::Train),
            "test" | "testing" => Ok(Split::Test),
            other => Err(DatasetError::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { seed: u64, scenarios: Vec<String> },
    External { path: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub provenance: Provenance,
    pub samples: Vec<Sample>,
    /// Full semantic maps referenced by [`Sample::map_id`].
    pub maps: Vec<SemanticGrid>,
}

/// Shape shared by every sample of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleShape {
    pub horizon: usize,
    pub plan_rows: usize,
    pub side: usize,
}

impl Sample {
    pub fn shape(&self) -> SampleShape {
        SampleShape {
            horizon: self.gt.len(),
            plan_rows: self.plan.rows.len(),
            side: self.scene.spec.side,
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Check that all samples agree on shape and that map references resolve.
    pub fn validate(&self) -> Result<Option<SampleShape>, DatasetError> {
        let mut shape = None;
        for (i, s) in self.samples.iter().enumerate() {
            let sh = s.shape();
            if s.scene.data.len() != sh.side * sh.side * 3 {
                return Err(DatasetError::Invalid(format!("sample {i}: scene data length")));
            }
            match shape {
                None => shape = Some(sh),
                Some(first) if first != sh => {
                    return Err(DatasetError::Invalid(format!(
                        "sample {i} has shape {sh:?}, sample 0 has {first:?}"
                    )))
                }
                _ => {}
            }
            if let Some(id) = s.map_id {
                if id as usize >= self.maps.len() {
                    return Err(DatasetError::Invalid(format!(
                        "sample {i} references map {id} of {}",
                        self.maps.len()
                    )));
                }
            }
        }
        Ok(shape)
    }

    /// Grid against which DAC is scored, with the frame `pred` must be
    /// mapped through: the full map with the ego pose, else the crop itself.
    pub fn dac_grid<'a>(&'a self, sample: &Sample) -> Option<(std::borrow::Cow<'a, SemanticGrid>, Pose2D)> {
        if let Some(map) = sample.map_id.and_then(|i| self.maps.get(i as usize)) {
            return Some((std::borrow::Cow::Borrowed(map), sample.ego_map_pose));
        }
        sample
            .scene
            .as_grid()
            .map(|g| (std::borrow::Cow::Owned(g), Pose2D::default()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(TNDS_MAGIC);
        w.u16(TNDS_VERSION);
        let header = json!({ "split": self.split, "provenance": self.provenance }).to_string();
        w.blob(header.as_bytes());
        w.u32(self.maps.len() as u32);
        for m in &self.maps {
            w.blob(&encode_grid(m));
        }
        w.u32(self.samples.len() as u32);
        for s in &self.samples {
            w.blob(&encode_sample(s));
        }
        let crc = crc32fast::hash(&w.buf);
        w.u32(crc);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        if bytes.len() < 10 || &bytes[..4] != TNDS_MAGIC {
            return Err(DatasetError::Codec("not a TNDS file".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != TNDS_VERSION {
            return Err(DatasetError::Version(version));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(DatasetError::Checksum { stored, computed });
        }
        let mut r = Reader::new(&body[6..]);
        let header: Value = serde_json::from_slice(r.blob()?)
            .map_err(|e| DatasetError::Codec(format!("header: {e}")))?;
        let split = serde_json::from_value(header["split"].clone())
            .map_err(|e| DatasetError::Codec(format!("split: {e}")))?;
        let provenance = serde_json::from_value(header["provenance"].clone())
            .map_err(|e| DatasetError::Codec(format!("provenance: {e}")))?;
        let n_maps = r.u32()? as usize;
        let mut maps = Vec::with_capacity(n_maps.min(1024));
        for _ in 0..n_maps {
            maps.push(decode_grid(r.blob()?)?);
        }
        let n = r.u32()? as usize;
        let mut samples = Vec::with_capacity(n.min(1 << 16));
        for i in 0..n {
            let rec = r.blob()?;
            samples.push(
                decode_sample(rec).map_err(|e| DatasetError::Codec(format!("sample {i}: {e}")))?,
            );
        }
        if !r.is_done() {
            return Err(DatasetError::Codec("trailing bytes".into()));
        }
        let ds = Dataset {
            split,
            provenance,
            samples,
            maps,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

// ---------------------------------------------------------------------------
// Binary record codec

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn blob(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.bytes(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        if self.buf.len() - self.pos < n {
            return Err(DatasetError::Codec(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, DatasetError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
    fn f32(&mut self) -> Result<f32, DatasetError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
    fn f64(&mut self) -> Result<f64, DatasetError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
    fn blob(&mut self) -> Result<&'a [u8], DatasetError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn encode_sample(s: &Sample) -> Vec<u8> {
    let mut w = Writer::default();
    let variant = Variant::ALL
        .iter()
        .position(|v| *v == s.plan.variant)
        .expect("known variant");
    w.u8(variant as u8);
    w.u32(s.plan.rows.len() as u32);
    for v in s.plan.rows.iter().flatten() {
        w.f64(*v);
    }
    w.f64(s.scene.spec.resolution);
    w.f64(s.scene.spec.horizon);
    w.u32(s.scene.spec.side as u32);
    w.u32(s.scene.data.len() as u32);
    for v in &s.scene.data {
        w.bytes(&v.to_le_bytes());
    }
    w.u32(s.gt.len() as u32);
    for p in &s.gt.waypoints {
        w.f64(p.x);
        w.f64(p.y);
    }
    w.f64(s.ego_map_pose.position.x);
    w.f64(s.ego_map_pose.position.y);
    w.f64(s.ego_map_pose.heading);
    w.f64(s.ego_global.lat);
    w.f64(s.ego_global.lon);
    w.f64(s.timestamp);
    match &s.imu {
        Some(v) => {
            w.u8(1);
            w.u32(v.len() as u32);
            for x in v {
                w.f64(*x);
            }
        }
        None => w.u8(0),
    }
    match s.map_id {
        Some(id) => {
            w.u8(1);
            w.u32(id);
        }
        None => w.u8(0),
    }
    w.u32(s.aux.len() as u32);
    for (k, v) in &s.aux {
        w.blob(k.as_bytes());
        w.blob(v);
    }
    w.buf
}

fn decode_sample(bytes: &[u8]) -> Result<Sample, DatasetError> {
    let mut r = Reader::new(bytes);
    let variant = *Variant::ALL
        .get(r.u8()? as usize)
        .ok_or_else(|| DatasetError::Codec("bad variant".into()))?;
    let n = r.u32()? as usize;
    let mut rows = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        rows.push([r.f64()?, r.f64()?, r.f64()?]);
    }
    let resolution = r.f64()?;
    let horizon = r.f64()?;
    let side = r.u32()? as usize;
    let len = r.u32()? as usize;
    let mut data = Vec::with_capacity(len.min(1 << 22));
    for _ in 0..len {
        data.push(r.f32()?);
    }
    let h = r.u32()? as usize;
    let mut gt = Vec::with_capacity(h.min(4096));
    for _ in 0..h {
        gt.push(LocalPoint::new(r.f64()?, r.f64()?));
    }
    let ego_map_pose = Pose2D {
        position: LocalPoint::new(r.f64()?, r.f64()?),
        heading: r.f64()?,
    };
    let ego_global = GeoPoint {
        lat: r.f64()?,
        lon: r.f64()?,
    };
    let timestamp = r.f64()?;
    let imu = match r.u8()? {
        0 => None,
        _ => {
            let n = r.u32()? as usize;
            let mut v = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                v.push(r.f64()?);
            }
            Some(v)
        }
    };
    let map_id = match r.u8()? {
        0 => None,
        _ => Some(r.u32()?),
    };
    let n_aux = r.u32()? as usize;
    let mut aux = BTreeMap::new();
    for _ in 0..n_aux {
        let k = String::from_utf8(r.blob()?.to_vec())
            .map_err(|_| DatasetError::Codec("aux key is not UTF-8".into()))?;
        aux.insert(k, r.blob()?.to_vec());
    }
    if !r.is_done() {
        return Err(DatasetError::Codec("trailing bytes in record".into()));
    }
    Ok(Sample {
        plan: PlanGraph { variant, rows },
        scene: SceneCrop {
            spec: GridSpec {
                resolution,
                horizon,
                side,
            },
            data,
        },
        gt: Trajectory::new(gt),
        ego_map_pose,
        ego_global,
        timestamp,
        imu,
        map_id,
        aux,
    })
}

// ---------------------------------------------------------------------------
// Synthetic generation

/// Settings for [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub horizon: usize,
    pub spacing: f64,
    pub past: usize,
    pub future: usize,
    pub grid: GridSpec,
    pub variant: Variant,
    /// Standard deviation of the ego position noise, meters.
    pub pos_sigma: f64,
    /// Standard deviation of the ego heading noise, degrees.
    pub heading_sigma_deg: f64,
    pub split: Split,
    /// Scenarios synthesized concurrently.
    pub threads: usize,
}

impl SynthConfig {
    pub fn for_model(c: &ModelConfig) -> Self {
        Self {
            horizon: c.horizon,
            spacing: c.spacing,
            past: c.past,
            future: c.future,
            grid: c.grid,
            variant: c.variant,
            pos_sigma: 0.5,
            heading_sigma_deg: 2.0,
            split: Split::Train,
            threads: 1,
        }
    }

    /// Length of lane that must remain ahead of the ego.
    pub fn required_ahead(&self) -> f64 {
        self.spacing * self.horizon as f64
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::for_model(&ModelConfig::default())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthReport {
    pub generated: usize,
    /// Draws dropped because less than `H * spacing` of lane remained ahead.
    pub skipped_short: usize,
    /// `(scenario, generated, skipped)`
    pub per_scenario: Vec<(String, usize, usize)>,
}

/// Lane centerline offset `offset` meters to the right of `pts`, smoothed.
///
/// Corners use a miter join clamped to three times the offset; a near
/// reversal is routed around the node through an apex ahead of it.
pub fn lane_path(pts: &[LocalPoint], offset: f64) -> Vec<LocalPoint> {
    let mut p: Vec<LocalPoint> = Vec::with_capacity(pts.len());
    for &q in pts {
        if p.last().is_none_or(|l: &LocalPoint| l.distance(q) > 1e-9) {
            p.push(q);
        }
    }
    if p.len() < 2 {
        return p;
    }
    let unit = |d: LocalPoint| d.scale(1.0 / d.norm());
    let right = |d: LocalPoint| LocalPoint::new(d.y, -d.x);
    let mut out = Vec::with_capacity(p.len() + 4);
    out.push(p[0] + right(unit(p[1] - p[0])).scale(offset));
    for i in 1..p.len() - 1 {
        let d1 = unit(p[i] - p[i - 1]);
        let d2 = unit(p[i + 1] - p[i]);
        let dot = d1.x * d2.x + d1.y * d2.y;
        if dot < -0.9 {
            out.push(p[i] + right(d1).scale(offset));
            out.push(p[i] + d1.scale(offset));
            out.push(p[i] + right(d2).scale(offset));
        } else {
            let m = (right(d1) + right(d2)).scale(offset / (1.0 + dot));
            let m = if m.norm() > 3.0 * offset {
                m.scale(3.0 * offset / m.norm())
            } else {
                m
            };
            out.push(p[i] + m);
        }
    }
    let n = p.len();
    out.push(p[n - 1] + right(unit(p[n - 1] - p[n - 2])).scale(offset));
    chaikin(&out, 3)
}

/// Corner cutting that keeps both end points.
fn chaikin(pts: &[LocalPoint], iterations: usize) -> Vec<LocalPoint> {
    let mut cur = pts.to_vec();
    for _ in 0..iterations {
        if cur.len() < 3 {
            break;
        }
        let mut next = Vec::with_capacity(cur.len() * 2);
        next.push(cur[0]);
        for w in cur.windows(2) {
            next.push(w[0].lerp(w[1], 0.25));
            next.push(w[0].lerp(w[1], 0.75));
        }
        next.push(*cur.last().expect("non-empty"));
        cur = next;
    }
    cur
}

fn nearest_node(positions: &BTreeMap<NodeId, LocalPoint>, p: LocalPoint) -> Option<NodeId> {
    let mut best: Option<(NodeId, f64)> = None;
    for (&id, q) in positions {
        let d = q.distance(p);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((id, d));
        }
    }
    best.map(|b| b.0)
}

/// Join shortest routes between consecutive via points.
fn route_through(scene: &SynthesizedScene, via: &[LocalPoint]) -> Result<Route, DatasetError> {
    let ids: Vec<NodeId> = via
        .iter()
        .map(|&p| {
            nearest_node(&scene.true_positions, p)
                .ok_or_else(|| DatasetError::Invalid("scenario has no graph nodes".into()))
        })
        .collect::<Result<_, _>>()?;
    let mut node_ids: Vec<NodeId> = vec![ids[0]];
    let mut cumulative_cost = 0.0;
    for w in ids.windows(2) {
        let r = shortest_route(&scene.graph, w[0], w[1])?;
        node_ids.extend(&r.node_ids[1..]);
        cumulative_cost += r.cumulative_cost;
    }
    Ok(Route {
        node_ids,
        cumulative_cost,
    })
}

struct PreparedRoute {
    route: Route,
    lane: Vec<LocalPoint>,
    /// Cumulative arc length at each lane vertex.
    arcs: Vec<f64>,
    ego_arc: [f64; 2],
}

fn prepare_route(scene: &SynthesizedScene, spec: &RouteSpec) -> Result<PreparedRoute, DatasetError> {
    let via: Vec<LocalPoint> = spec.via.iter().map(|v| LocalPoint::new(v[0], v[1])).collect();
    if via.len() < 2 {
        return Err(DatasetError::Invalid(format!("route {:?} needs two via points", spec.name)));
    }
    let route = route_through(scene, &via)?;
    let pts: Vec<LocalPoint> = route
        .node_ids
        .iter()
        .map(|id| scene.true_positions[id])
        .collect();
    let lane = lane_path(&pts, scene.spec.lane_width / 2.0);
    let mut arcs = Vec::with_capacity(lane.len());
    let mut acc = 0.0;
    arcs.push(0.0);
    for w in lane.windows(2) {
        acc += w[0].distance(w[1]);
        arcs.push(acc);
    }
    Ok(PreparedRoute {
        route,
        lane,
        arcs,
        ego_arc: spec.ego_arc,
    })
}

/// Routes between two random dead ends, for scenarios that list none.
fn random_route_spec(scene: &SynthesizedScene, rng: &mut impl Rng, cfg: &SynthConfig) -> RouteSpec {
    let leaves: Vec<NodeId> = scene
        .graph
        .adjacency
        .iter()
        .filter(|(_, n)| n.len() == 1)
        .map(|(&id, _)| id)
        .collect();
    let pool: Vec<NodeId> = if leaves.len() >= 2 {
        leaves
    } else {
        scene.graph.adjacency.keys().copied().collect()
    };
    let a = pool[rng.random_range(0..pool.len())];
    let mut b = pool[rng.random_range(0..pool.len())];
    if a == b && pool.len() > 1 {
        b = pool[(pool.iter().position(|&x| x == a).expect("member") + 1) % pool.len()];
    }
    let pa = scene.true_positions[&a];
    let pb = scene.true_positions[&b];
    RouteSpec {
        name: "random".into(),
        via: vec![[pa.x, pa.y], [pb.x, pb.y]],
        ego_arc: [0.0, (pa.distance(pb) - cfg.required_ahead()).max(0.0)],
    }
}

struct ScenarioOutput {
    samples: Vec<Sample>,
    map: SemanticGrid,
    skipped: usize,
}

fn generate_scenario(
    spec: &ScenarioSpec,
    index: usize,
    count: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<ScenarioOutput, DatasetError> {
    let scene = synthesize_map(spec, seed.wrapping_add(index as u64))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let route_specs: Vec<RouteSpec> = if spec.routes.is_empty() {
        vec![random_route_spec(&scene, &mut rng, cfg)]
    } else {
        spec.routes.clone()
    };
    let routes: Vec<PreparedRoute> = route_specs
        .iter()
        .map(|r| prepare_route(&scene, r))
        .collect::<Result<_, _>>()?;
    let osm_positions = scene.graph.project(spec.geo_origin)?;
    let settings = PlanSettings {
        variant: cfg.variant,
        past: cfg.past,
        future: cfg.future,
        ..PlanSettings::default()
    };
    let pos_noise = Normal::new(0.0, cfg.pos_sigma.max(0.0)).expect("finite sigma");
    let heading_sigma = cfg.heading_sigma_deg.max(0.0).to_radians();
    let heading_noise = Normal::new(0.0, heading_sigma).expect("finite sigma");
    let clamp3 = |v: f64, s: f64| v.clamp(-3.0 * s, 3.0 * s);

    let mut samples = Vec::with_capacity(count);
    let mut skipped = 0;
    for k in 0..count {
        let pr = &routes[k % routes.len()];
        let total = *pr.arcs.last().expect("non-empty lane");
        let [lo, hi] = pr.ego_arc;
        let s_e = if hi > lo { rng.random_range(lo..hi) } else { lo };
        // draw the noise unconditionally so skips do not shift later samples
        let dx = clamp3(pos_noise.sample(&mut rng), cfg.pos_sigma);
        let dy = clamp3(pos_noise.sample(&mut rng), cfg.pos_sigma);
        let dh = clamp3(heading_noise.sample(&mut rng), heading_sigma);
        if total - s_e < cfg.required_ahead() + cfg.spacing {
            skipped += 1;
            continue;
        }
        let on_lane = point_at_arc(&pr.lane, s_e);
        let a = point_at_arc(&pr.lane, (s_e - 0.5).max(0.0));
        let b = point_at_arc(&pr.lane, s_e + 0.5);
        let lane_heading = (b.y - a.y).atan2(b.x - a.x);
        let ego = Pose2D::new(on_lane.x + dx, on_lane.y + dy, lane_heading + dh);

        let mut raw = vec![ego.position];
        raw.extend(
            pr.lane
                .iter()
                .zip(&pr.arcs)
                .filter(|(_, &s)| s >= s_e + cfg.spacing)
                .map(|(p, _)| *p),
        );
        let map_gt = crate::geo::interpolate_trajectory(&raw, cfg.spacing, cfg.horizon)?;
        if !metrics::dac(&map_gt, &scene.grid, cfg.horizon) {
            return Err(DatasetError::NonCompliant {
                scenario: spec.name.clone(),
            });
        }
        let gt = Trajectory::new(to_ego_frame(&ego, &map_gt.waypoints));

        let (plan, frame) = plan_at(&pr.route, &scene.graph, &osm_positions, ego.position, &settings)?;
        let plan = plan.reframed(&frame, &ego);
        let scene_crop = crop_ego(&scene.grid, &ego, &cfg.grid);
        samples.push(Sample {
            plan,
            scene: scene_crop,
            gt,
            ego_map_pose: ego,
            ego_global: local_to_wgs84(spec.geo_origin, ego.position),
            timestamp: 0.0,
            imu: None,
            map_id: Some(index as u32),
            aux: BTreeMap::new(),
        });
    }
    Ok(ScenarioOutput {
        samples,
        map: scene.grid,
        skipped,
    })
}

/// Draw `samples_per_scenario` samples from each scenario. Routes listed in a
/// scenario are used in turn; a scenario without routes gets one between two
/// random dead ends. Output depends only on the inputs and `seed`.
pub fn generate_synthetic(
    scenarios: &[ScenarioSpec],
    samples_per_scenario: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<(Dataset, SynthReport), DatasetError> {
    if scenarios.is_empty() {
        return Err(DatasetError::Invalid("no scenarios given".into()));
    }
    cfg.grid.validate()?;
    if cfg.horizon == 0 || !(cfg.spacing > 0.0) {
        return Err(DatasetError::Invalid("horizon and spacing must be positive".into()));
    }
    let threads = cfg.threads.max(1);
    let outputs: Vec<Result<ScenarioOutput, DatasetError>> = if threads == 1 {
        scenarios
            .iter()
            .enumerate()
            .map(|(i, s)| generate_scenario(s, i, samples_per_scenario, seed, cfg))
            .collect()
    } else {
        let mut slots: Vec<Option<Result<ScenarioOutput, DatasetError>>> =
            (0..scenarios.len()).map(|_| None).collect();
        let chunk = scenarios.len().div_ceil(threads);
        std::thread::scope(|scope| {
            for (ci, slot_chunk) in slots.chunks_mut(chunk).enumerate() {
                scope.spawn(move || {
                    for (j, slot) in slot_chunk.iter_mut().enumerate() {
                        let i = ci * chunk + j;
                        *slot = Some(generate_scenario(&scenarios[i], i, samples_per_scenario, seed, cfg));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every slot filled")).collect()
    };

    let mut report = SynthReport::default();
    let mut samples = Vec::new();
    let mut maps = Vec::with_capacity(scenarios.len());
    for (spec, out) in scenarios.iter().zip(outputs) {
        let out = out?;
        report.generated += out.samples.len();
        report.skipped_short += out.skipped;
        report
            .per_scenario
            .push((spec.name.clone(), out.samples.len(), out.skipped));
        samples.extend(out.samples);
        maps.push(out.map);
    }
    for (i, s) in samples.iter_mut().enumerate() {
        s.timestamp = SYNTH_EPOCH + SYNTH_PERIOD * i as f64;
    }
    let ds = Dataset {
        split: cfg.split,
        provenance: Provenance::Synthetic {
            seed,
            scenarios: scenarios.iter().map(|s| s.name.clone()).collect(),
        },
        samples,
        maps,
    };
    Ok((ds, report))
}

// ---------------------------------------------------------------------------
// Published layout

/// Settings for [`import_published`].
#[derive(Clone, Debug, PartialEq)]
pub struct ImportOptions {
    /// Scene pixels per meter.
    pub resolution: f64,
    pub horizon: usize,
    pub plan_rows: usize,
    /// Used when a sample does not name its variant.
    pub variant: Variant,
}

impl ImportOptions {
    pub fn for_model(c: &ModelConfig) -> Self {
        Self {
            resolution: c.grid.resolution,
            horizon: c.horizon,
            plan_rows: c.plan_rows(),
            variant: c.variant,
        }
    }
}

impl Default for ImportOptions {
    fn default() -> Self {
        Self::for_model(&ModelConfig::default())
    }
}

const PLAN_KEYS: &[&str] = &["global_plan", "plan", "plan_graph", "route"];
const GT_KEYS: &[&str] = &["trajectory", "gt", "ground_truth", "groundtruth", "future", "waypoints"];
const POSE_KEYS: &[&str] = &["ego_pose", "ego_map_pose", "pose", "localization"];
const GPS_KEYS: &[&str] = &["gps", "ego_global", "global_pose", "latlon"];
const TIME_KEYS: &[&str] = &["timestamp", "stamp", "unix_time", "time"];
const IMU_KEYS: &[&str] = &["imu"];
const SCENE_KEYS: &[&str] = &["scene", "scene_image", "semantic_map", "image"];
const VARIANT_KEYS: &[&str] = &["variant"];

fn take_field(obj: &mut Map<String, Value>, keys: &[&str]) -> Option<Value> {
    keys.iter().find_map(|k| obj.remove(*k))
}

fn as_pair(v: &Value, a: &[&str], b: &[&str]) -> Option<(f64, f64)> {
    match v {
        Value::Array(xs) if xs.len() >= 2 => Some((xs[0].as_f64()?, xs[1].as_f64()?)),
        Value::Object(o) => {
            let x = a.iter().find_map(|k| o.get(*k)?.as_f64())?;
            let y = b.iter().find_map(|k| o.get(*k)?.as_f64())?;
            Some((x, y))
        }
        _ => None,
    }
}

fn parse_plan_rows(v: &Value) -> Option<Vec<[f64; 3]>> {
    let rows = match v {
        Value::Object(o) => o.get("rows")?,
        other => other,
    };
    rows.as_array()?
        .iter()
        .map(|r| match r {
            Value::Array(a) if a.len() == 3 => Some([a[0].as_f64()?, a[1].as_f64()?, a[2].as_f64()?]),
            Value::Object(o) => {
                let (x, y) = as_pair(r, &["x"], &["y"])?;
                let f = ["f", "code", "feature"].iter().find_map(|k| o.get(*k)?.as_f64())?;
                Some([x, y, f])
            }
            _ => None,
        })
        .collect()
}

fn load_scene_png(path: &Path, resolution: f64) -> Result<SceneCrop, String> {
    let img = image::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != h || w == 0 {
        return Err(format!("scene image is {w}x{h}, expected a square"));
    }
    let spec = GridSpec {
        resolution,
        horizon: w as f64 / (2.0 * resolution),
        side: w,
    };
    // single-channel images carry class codes
    if let image::DynamicImage::ImageLuma8(gray) = &img {
        let codes = gray.as_raw();
        if codes.iter().all(|&c| (c as usize) < PALETTE.len()) {
            return SceneCrop::from_classes(spec, codes).map_err(|e| e.to_string());
        }
    }
    let rgb = img.to_rgb8();
    let mut data = Vec::with_capacity(w * w * 3);
    for px in rgb.pixels() {
        let snapped = PALETTE.iter().find(|pal| {
            pal.iter()
                .zip(px.0)
                .all(|(p, c)| (f32::from(c) - p * 255.0).abs() <= 1.0)
        });
        match snapped {
            Some(pal) => data.extend_from_slice(pal),
            None => data.extend(px.0.iter().map(|&c| f32::from(c) / 255.0)),
        }
    }
    Ok(SceneCrop { spec, data })
}

fn import_one(json_path: &Path, png: Option<PathBuf>, opts: &ImportOptions) -> Result<Sample, DatasetError> {
    let name = json_path
        .parent()
        .filter(|_| json_path.file_stem().is_some_and(|s| s == "sample" || s == "meta"))
        .and_then(|p| p.file_name())
        .or_else(|| json_path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let fail = |m: String| DatasetError::Import {
        sample: name.clone(),
        message: m,
    };
    let text = std::fs::read_to_string(json_path).map_err(|e| fail(e.to_string()))?;
    let mut obj = match serde_json::from_str::<Value>(&text).map_err(|e| fail(e.to_string()))? {
        Value::Object(o) => o,
        _ => return Err(fail("top level is not an object".into())),
    };

    let variant = match take_field(&mut obj, VARIANT_KEYS) {
        Some(v) => v
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail("unknown variant".into()))?,
        None => opts.variant,
    };
    let plan_v = take_field(&mut obj, PLAN_KEYS).ok_or_else(|| fail("missing global plan".into()))?;
    let mut rows = parse_plan_rows(&plan_v).ok_or_else(|| fail("plan rows must be [x, y, f] triples".into()))?;
    if rows.len() > opts.plan_rows {
        return Err(fail(format!("plan has {} rows, expected {}", rows.len(), opts.plan_rows)));
    }
    rows.resize(opts.plan_rows, [0.0; 3]);

    let gt_v = take_field(&mut obj, GT_KEYS).ok_or_else(|| fail("missing ground-truth trajectory".into()))?;
    let gt: Vec<LocalPoint> = gt_v
        .as_array()
        .ok_or_else(|| fail("trajectory is not a list".into()))?
        .iter()
        .map(|p| as_pair(p, &["x"], &["y"]).map(|(x, y)| LocalPoint::new(x, y)))
        .collect::<Option<_>>()
        .ok_or_else(|| fail("trajectory points must be [x, y]".into()))?;
    if gt.len() != opts.horizon {
        return Err(fail(format!("trajectory has {} points, expected {}", gt.len(), opts.horizon)));
    }

    let timestamp = take_field(&mut obj, TIME_KEYS)
        .and_then(|v| v.as_f64())
        .ok_or_else(|| fail("missing timestamp".into()))?;

    let ego_map_pose = match take_field(&mut obj, POSE_KEYS) {
        None => Pose2D::default(),
        Some(v) => {
            let (x, y) = as_pair(&v, &["x"], &["y"]).ok_or_else(|| fail("bad ego pose".into()))?;
            let h = match &v {
                Value::Array(a) => a.get(2).and_then(|h| h.as_f64()),
                Value::Object(o) => ["heading", "yaw", "theta"].iter().find_map(|k| o.get(*k)?.as_f64()),
                _ => None,
            }
            .unwrap_or(0.0);
            Pose2D::new(x, y, h)
        }
    };
    let ego_global = match take_field(&mut obj, GPS_KEYS) {
        None => GeoPoint { lat: 0.0, lon: 0.0 },
        Some(v) => {
            let (lat, lon) = as_pair(&v, &["lat", "latitude"], &["lon", "lng", "longitude"])
                .ok_or_else(|| fail("bad GPS fix".into()))?;
            GeoPoint { lat, lon }
        }
    };

    let mut aux = BTreeMap::new();
    let imu = match take_field(&mut obj, IMU_KEYS) {
        None => None,
        Some(v) => match v.as_array().and_then(|a| a.iter().map(|x| x.as_f64()).collect::<Option<Vec<_>>>()) {
            Some(vals) => Some(vals),
            None => {
                aux.insert("imu".to_string(), v.to_string().into_bytes());
                None
            }
        },
    };
    let scene_path = match take_field(&mut obj, SCENE_KEYS) {
        Some(Value::String(rel)) => Some(json_path.parent().unwrap_or(Path::new(".")).join(rel)),
        Some(_) => return Err(fail("scene must be an image path".into())),
        None => png,
    }
    .ok_or_else(|| fail("missing scene image".into()))?;
    let scene = load_scene_png(&scene_path, opts.resolution).map_err(fail)?;

    for (k, v) in obj {
        aux.insert(k, v.to_string().into_bytes());
    }
    Ok(Sample {
        plan: PlanGraph { variant, rows },
        scene,
        gt: Trajectory::new(gt),
        ego_map_pose,
        ego_global,
        timestamp,
        imu,
        map_id: None,
        aux,
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    v.sort();
    Ok(v)
}

fn has_ext(p: &Path, ext: &str) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

/// Import one split of a directory in the published layout.
///
/// The split lives in `root/<split>/` (or `root/<split>ing/`), falling back
/// to `root` itself. Each sample is either a directory holding one JSON
/// file and one PNG scene, or a `<name>.json` file next to `<name>.png`.
pub fn import_published(root: &Path, split: Split, opts: &ImportOptions) -> Result<Dataset, DatasetError> {
    let candidates = [
        root.join(split.as_str()),
        root.join(format!("{}ing", split.as_str())),
        root.join(split.as_str().to_uppercase()),
    ];
    let dir = candidates
        .iter()
        .find(|p| p.is_dir())
        .cloned()
        .unwrap_or_else(|| root.to_path_buf());
    if !dir.is_dir() {
        return Err(DatasetError::Import {
            sample: String::new(),
            message: format!("{} is not a directory", dir.display()),
        });
    }
    let mut samples = Vec::new();
    for entry in sorted_entries(&dir)? {
        if entry.is_dir() {
            let files = sorted_entries(&entry)?;
            let json_file = files.iter().find(|p| has_ext(p, "json"));
            let png = files.iter().find(|p| has_ext(p, "png")).cloned();
            match json_file {
                Some(j) => samples.push(import_one(j, png, opts)?),
                None => continue,
            }
        } else if has_ext(&entry, "json") {
            let png = entry.with_extension("png");
            samples.push(import_one(&entry, png.is_file().then_some(png), opts)?);
        }
    }
    if samples.is_empty() {
        return Err(DatasetError::Import {
            sample: String::new(),
            message: format!("no samples under {}", dir.display()),
        });
    }
    let ds = Dataset {
        split,
        provenance: Provenance::External {
            path: root.display().to_string(),
        },
        samples,
        maps: Vec::new(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Write a dataset in the layout [`import_published`] reads.
pub fn export_published(ds: &Dataset, root: &Path) -> Result<(), DatasetError> {
    let dir = root.join(ds.split.as_str());
    std::fs::create_dir_all(&dir)?;
    for (i, s) in ds.samples.iter().enumerate() {
        let sd = dir.join(format!("{i:06}"));
        std::fs::create_dir_all(&sd)?;
        let side = s.scene.spec.side as u32;
        let bytes: Vec<u8> = s
            .scene
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(side, side, bytes)
            .ok_or_else(|| DatasetError::Invalid(format!("sample {i}: scene size")))?;
        img.save(sd.join("scene.png"))
            .map_err(|e| DatasetError::Invalid(format!("sample {i}: {e}")))?;
        let mut meta = json!({
            "variant": s.plan.variant.as_str(),
            "global_plan": s.plan.rows,
            "trajectory": s.gt.waypoints.iter().map(|p| [p.x, p.y]).collect::<Vec<_>>(),
            "ego_pose": [s.ego_map_pose.position.x, s.ego_map_pose.position.y, s.ego_map_pose.heading],
            "gps": { "lat": s.ego_global.lat, "lon": s.ego_global.lon },
            "timestamp": s.timestamp,
            "scene": "scene.png",
        });
        if let Some(imu) = &s.imu {
            meta["imu"] = json!(imu);
        }
        std::fs::write(sd.join("sample.json"), serde_json::to_string_pretty(&meta).expect("json"))?;
    }
    Ok(())
}
