//! Two-level segmentation: coarse color clusters, then a scale-conditioned
//! affinity field inside one cluster.

pub mod coarse;
pub mod affinity;
pub mod masks;
