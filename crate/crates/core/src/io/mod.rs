//! Files and run plumbing: pixmaps, configuration, the toy corpus and the
//! style metric.

pub mod config;
pub mod corpus;
pub mod metric;
pub mod ppm;
