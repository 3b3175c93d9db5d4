pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod dmg;
pub mod error;
pub mod gradsuite;
pub mod io;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod real;
pub mod resample;
pub mod synth;
pub mod trainer;
pub mod ssrc;
