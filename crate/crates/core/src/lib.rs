//! Mirrored transformer for controlled trace generation, controlled caption
//! generation and joint caption + trace generation, together with the
//! trace-to-box encoding pipeline, the local bipartite matching (LBM)
//! trace distance and standard caption metrics.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod lbm;
pub mod metrics;
pub mod model;
pub mod trace;
pub mod training;
