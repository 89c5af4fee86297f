//! HDR-consistent Gaussian splatting at desk scale.
//!
//! A scene of 3D Gaussians carries linear-radiance colors; each camera view
//! owns an exposure gain and a tone-curve exponent. Rendering composites
//! radiance front to back, then maps through the per-view photometric chain.
//! Training fits colors, opacities, exposures, and tone exponents jointly
//! against LDR observations while geometry stays fixed.

pub mod cli;
pub mod config;
pub mod datagen;
pub mod image;
pub mod img_io;
pub mod losses;
pub mod metrics;
pub mod optimizer;
pub mod photometric;
pub mod rasterizer;
pub mod scene;
pub mod ssim;

pub use image::ImageBuf;
pub use scene::{CameraIntrinsics, CameraPose, CameraView, Gaussian, Scene};
