//! Multi-view surface reconstruction on a sparse SDF grid with a decoupled
//! appearance model: per-tile tri-plane spatial features, spherical-harmonic
//! light-field probes at tile corners and a tiny Fresnel-aware decoder.

pub mod appearance;
pub mod camera;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod grid;
pub mod imaging;
pub mod io;
pub mod mesh;
pub mod optim;
pub mod pipeline;
pub mod render;
pub mod sh;
pub mod synth;

pub use error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
