pub mod adapter;
pub mod curation;
pub mod eval;
pub mod geometry;
pub mod metrics;
pub mod nwt;
pub mod raster;
pub mod rollout;
pub mod scenarios;
pub mod worldsim;
