//! Synthetic linear face model, orthographic SH renderer, Gaussian blur,
//! and the motion / illumination guidance images built on them.

pub mod blur;
pub mod error;
pub mod geometry;
pub mod guidance;
pub mod image;
pub mod model;
pub mod raster;
pub mod sh;

pub use blur::gaussian_blur;
pub use error::{Error, Result};
pub use geometry::{project_orthographic, synthesize_geometry, Geometry, Projected};
pub use guidance::{
    apply_condition_dropout, apply_lips_mask, render_illumination_guidance,
    render_motion_guidance, GuidanceConfig, GuidanceImage, GuidanceKind, LipsRegion,
};
pub use image::{Image, Mask};
pub use model::{Camera, FaceModel, FaceParams, Lighting, SyntheticModelSpec};
pub use raster::{rasterize, render_face, RenderOutput, Scene};
pub use sh::{sh_basis, shade};
