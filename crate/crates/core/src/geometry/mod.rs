//! Analytic SDFs, surface sampling, grids, marching cubes, Chamfer / IoU
//! metrics and contact detection.

mod contact;
mod grid;
mod mc_tables;
mod mesh;
mod metrics;
mod part;
pub mod vec3;

pub use contact::{contact_regions, ContactSet};
pub use grid::{grid_point, grid_spacing, iou_grid, sdf_to_grid, sdf_to_grid_adaptive, Bounds, SdfGrid, GRID_MAGIC};
pub use mesh::{marching_cubes, Mesh, MIN_TRIANGLE_AREA};
pub use metrics::{chamfer_distance, mean_nearest_distance, KdTree};
pub use part::{ellipsoid_area, ellipsoid_sdf_local, AnalyticPart, CapPlane, PartKind};
pub use vec3::{Mat3, Point};

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("invalid part: {0}")]
    InvalidPart(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
