//! Synthetic driving scenes, their rasterization and persistence.

pub mod dataset;
pub mod generate;
pub mod raster;
pub mod types;

pub use dataset::{dataset_read, dataset_write};
pub use generate::{ego_boxes, generate_dataset, generate_scene, SceneGenConfig};
pub use raster::{rasterize_bev, BevGrid, GridConfig};
pub use types::*;
