//! Route-conditioned trajectory generation on semantic grids.

pub mod dataset;
pub mod geo;
pub mod metrics;
pub mod model;
pub mod osm;
pub mod planner;
pub mod scene;
