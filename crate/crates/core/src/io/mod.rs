//! Datasets, checkpoints and mesh files.

pub mod checkpoint;
pub mod dataset;
pub mod mesh_io;

pub use checkpoint::Checkpoint;
pub use dataset::{load_cameras, Dataset};
pub use mesh_io::{read_points_ply, write_mesh, write_obj, write_ply, write_points_ply};
