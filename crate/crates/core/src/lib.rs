pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod dsp;
pub mod eval;
pub mod fixtures;
pub mod model;
pub mod nets;
pub mod train;
