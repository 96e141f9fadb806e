//! Layered semitransparent mesh scenes built from calibrated stereo pairs.

pub mod aggregate;
pub mod archive;
pub mod camera;
pub mod coalesce;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod meshing;
pub mod occlusion;
pub mod pipeline;
pub mod predict;
pub mod psv;
pub mod render;
pub mod scalar;
pub mod scenegen;
pub mod texture;

pub use error::{Error, Result};
pub use scalar::Real;

pub use archive::{export_scene, import_scene};
pub use pipeline::{build_scene, BuildConfig};

pub type Image = image::ImageBuffer<f64>;
pub type Image32 = image::ImageBuffer<f32>;
pub type Intrinsics = camera::CameraIntrinsics<f64>;
pub type Intrinsics32 = camera::CameraIntrinsics<f32>;
pub type Pose = camera::RigidPose<f64>;
pub type Pose32 = camera::RigidPose<f32>;
pub type Rig = camera::CameraRig<f64>;
pub type Rig32 = camera::CameraRig<f32>;
pub type DepthLayers = aggregate::DepthLayerSet<f64>;
pub type DepthLayers32 = aggregate::DepthLayerSet<f32>;
pub type Scene = texture::TexturedScene<f64>;
pub type Scene32 = texture::TexturedScene<f32>;
