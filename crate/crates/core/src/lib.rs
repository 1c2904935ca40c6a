//! Quadratic surfel primitives, geodesic density and a differentiable
//! tile rasterizer.

pub mod bounds;
pub mod camera;
pub mod dual;
pub mod error;
pub mod geodesic;
pub mod geometry;
pub mod intersect;
pub mod io;
pub mod losses;
pub mod maps;
pub mod primitive;
pub mod raster;
pub mod registry;
pub mod sh;

pub use error::{QgsError, Result};

#[cfg(feature = "oracles")]
pub mod oracles;
