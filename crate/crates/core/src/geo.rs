//! Coordinate frames, projections and trajectory resampling.
//!
//! Headings are counter-clockwise radians with 0 along +x. In the ego frame
//! +x points forward and +y to the left.

use std::f64::consts::PI;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Equatorial radius used by the local equirectangular projection.
pub const EQUATORIAL_RADIUS_M: f64 = 6_378_137.0;
/// Mean Earth radius used for great-circle distances.
pub const MEAN_RADIUS_M: f64 = 6_371_008.8;

#[derive(Debug, Error, PartialEq)]
pub enum GeoError {
    #[error("coordinate out of range: lat {lat}, lon {lon}")]
    OutOfRange { lat: f64, lon: f64 },
    #[error("point is {delta_deg:.3} degrees from the projection origin (limit 1)")]
    TooFarFromOrigin { delta_deg: f64 },
    #[error("trajectory needs {required:.3} m of arc length but only {available:.3} m is available")]
    InsufficientLength { available: f64, required: f64 },
    #[error("trajectory needs at least two points, got {0}")]
    TooFewPoints(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        let p = Self { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(GeoError::OutOfRange {
                lat: self.lat,
                lon: self.lon,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalPoint {
    pub x: f64,
    pub y: f64,
}

impl LocalPoint {
    pub const ORIGIN: LocalPoint = LocalPoint { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: LocalPoint) -> f64 {
        (self - other).norm()
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s)
    }

    /// Counter-clockwise rotation by `angle` radians.
    pub fn rotate(self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn lerp(self, other: LocalPoint, t: f64) -> Self {
        Self::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }
}

impl Add for LocalPoint {
    type Output = LocalPoint;
    fn add(self, o: LocalPoint) -> LocalPoint {
        LocalPoint::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for LocalPoint {
    type Output = LocalPoint;
    fn sub(self, o: LocalPoint) -> LocalPoint {
        LocalPoint::new(self.x - o.x, self.y - o.y)
    }
}

/// Wrap an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub position: LocalPoint,
    pub heading: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            position: LocalPoint::new(x, y),
            heading: normalize_angle(heading),
        }
    }

    /// Map a point given in this pose's frame back into the parent frame.
    pub fn to_parent(&self, p: LocalPoint) -> LocalPoint {
        self.position + p.rotate(self.heading)
    }

    /// Express a parent-frame point in this pose's frame.
    pub fn to_local(&self, p: LocalPoint) -> LocalPoint {
        (p - self.position).rotate(-self.heading)
    }
}

/// Ordered ego-frame waypoints, nearest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<LocalPoint>,
}

impl Trajectory {
    pub fn new(waypoints: Vec<LocalPoint>) -> Self {
        Self { waypoints }
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn last(&self) -> Option<LocalPoint> {
        self.waypoints.last().copied()
    }
}

/// Equirectangular projection of `p` about `origin`, in meters east/north.
pub fn wgs84_to_local(origin: GeoPoint, p: GeoPoint) -> Result<LocalPoint, GeoError> {
    origin.validate()?;
    p.validate()?;
    let delta = (p.lat - origin.lat).abs().max((p.lon - origin.lon).abs());
    if delta >= 1.0 {
        return Err(GeoError::TooFarFromOrigin { delta_deg: delta });
    }
    let k = PI / 180.0 * EQUATORIAL_RADIUS_M;
    Ok(LocalPoint::new(
        (p.lon - origin.lon) * k * (origin.lat * PI / 180.0).cos(),
        (p.lat - origin.lat) * k,
    ))
}

/// Inverse of [`wgs84_to_local`].
pub fn local_to_wgs84(origin: GeoPoint, q: LocalPoint) -> GeoPoint {
    let k = PI / 180.0 * EQUATORIAL_RADIUS_M;
    GeoPoint {
        lat: origin.lat + q.y / k,
        lon: origin.lon + q.x / (k * (origin.lat * PI / 180.0).cos()),
    }
}

/// Great-circle distance in meters.
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let (la1, la2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = la2 - la1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + la1.cos() * la2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * MEAN_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Express `pts` in the frame of `ego`: translate by `-ego.position`, then
/// rotate by `-ego.heading`.
pub fn to_ego_frame(ego: &Pose2D, pts: &[LocalPoint]) -> Vec<LocalPoint> {
    pts.iter().map(|&p| ego.to_local(p)).collect()
}

/// Inverse of [`to_ego_frame`].
pub fn from_ego_frame(ego: &Pose2D, pts: &[LocalPoint]) -> Vec<LocalPoint> {
    pts.iter().map(|&p| ego.to_parent(p)).collect()
}

/// Total arc length of a polyline.
pub fn polyline_length(pts: &[LocalPoint]) -> f64 {
    pts.windows(2).map(|w| w[0].distance(w[1])).sum()
}

/// Point at arc length `s` along a polyline (clamped to its ends).
pub fn point_at_arc(pts: &[LocalPoint], s: f64) -> LocalPoint {
    let mut remaining = s.max(0.0);
    for w in pts.windows(2) {
        let seg = w[0].distance(w[1]);
        if remaining <= seg && seg > 0.0 {
            return w[0].lerp(w[1], remaining / seg);
        }
        remaining -= seg;
    }
    *pts.last().expect("empty polyline")
}

/// Resample `raw` at arc lengths `spacing, 2*spacing, ..., count*spacing`
/// along the piecewise-linear curve through it. The start point itself is
/// not part of the output.
pub fn interpolate_trajectory(
    raw: &[LocalPoint],
    spacing: f64,
    count: usize,
) -> Result<Trajectory, GeoError> {
    if raw.len() < 2 {
        return Err(GeoError::TooFewPoints(raw.len()));
    }
    let required = spacing * count as f64;
    let available = polyline_length(raw);
    if available + 1e-9 < required {
        return Err(GeoError::InsufficientLength {
            available,
            required,
        });
    }
    let mut out = Vec::with_capacity(count);
    let mut seg = 0;
    let mut seg_start = 0.0;
    for i in 1..=count {
        let target = spacing * i as f64;
        loop {
            let len = raw[seg].distance(raw[seg + 1]);
            if target <= seg_start + len || seg + 2 == raw.len() {
                let t = if len > 0.0 {
                    ((target - seg_start) / len).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                out.push(raw[seg].lerp(raw[seg + 1], t));
                break;
            }
            seg_start += len;
            seg += 1;
        }
    }
    Ok(Trajectory::new(out))
}
