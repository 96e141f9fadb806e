//! Stereo pair to textured layered mesh scene.

use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate, AggregateOptions, BetaVolume, DepthLayerSet, GeometryScheme, SoftAverage};
use crate::camera::CameraRig;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::meshing::{mesh_layers, Diagonal};
use crate::predict::{
    predict_coloring_oracle, predict_coloring_passthrough, predict_geometry_constant, predict_geometry_oracle, predict_geometry_photoconsistency,
    ColoringPredictor, GeometryPredictor, PhotoOptions,
};
use crate::psv::{build_psv, place_planes, PlaneStack};
use crate::scalar::Real;
use crate::texture::{blend_textures, unproject_side_onto_layers, ColoringScheme, TexturedScene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub planes: usize,
    pub layers: usize,
    pub scheme: GeometryScheme,
    pub coloring: ColoringScheme,
    pub geometry_predictor: GeometryPredictor,
    pub coloring_predictor: ColoringPredictor,
    pub soft_average: SoftAverage,
    pub diagonal: Diagonal,
    pub temperature: f64,
    pub radius: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        let photo = PhotoOptions::default();
        Self {
            planes: 32,
            layers: 4,
            scheme: GeometryScheme::Bi,
            coloring: ColoringScheme::Rsbg,
            geometry_predictor: GeometryPredictor::Photo,
            coloring_predictor: ColoringPredictor::Passthrough,
            soft_average: SoftAverage::Depth,
            diagonal: Diagonal::Main,
            temperature: photo.temperature,
            radius: photo.radius,
        }
    }
}

impl BuildConfig {
    pub fn photo(&self) -> PhotoOptions {
        PhotoOptions { temperature: self.temperature, radius: self.radius }
    }
}

/// Ground truth the oracle predictors copy from.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleInputs<'a, T> {
    pub depths: Option<&'a DepthLayerSet<T>>,
    pub textures: Option<&'a [ImageBuffer<T>]>,
}

#[derive(Debug, Clone)]
pub struct BuildOutput<T> {
    pub scene: TexturedScene<T>,
    pub planes: PlaneStack<T>,
    pub beta: BetaVolume<T>,
    pub depths: DepthLayerSet<T>,
    /// Pixels where no plane had a valid side sample.
    pub all_invalid: usize,
}

/// Runs the whole build at the reference resolution (one mesh vertex per pixel).
pub fn build_scene<T: Real>(
    reference: &ImageBuffer<T>,
    side: &ImageBuffer<T>,
    rig: &CameraRig<T>,
    depth_range: (T, T),
    cfg: &BuildConfig,
    oracle: OracleInputs<'_, T>,
) -> Result<BuildOutput<T>> {
    let size = (reference.height(), reference.width());
    if size != (rig.reference.height, rig.reference.width) {
        return Err(Error::ShapeMismatch(format!("reference image {}x{} does not match the camera", size.0, size.1)));
    }
    let planes = place_planes(depth_range.0, depth_range.1, cfg.planes)?;
    let psv = build_psv(reference, side, rig, &planes)?;
    let photo = cfg.photo();
    let (beta, all_invalid) = match cfg.geometry_predictor {
        GeometryPredictor::Photo => {
            let p = predict_geometry_photoconsistency(&psv, cfg.scheme, cfg.layers, &photo)?;
            (p.beta, p.all_invalid)
        }
        GeometryPredictor::Constant => (predict_geometry_constant(&planes, size, cfg.scheme, cfg.layers)?, 0),
        GeometryPredictor::Oracle => {
            let gt = oracle.depths.ok_or_else(|| Error::InvalidScene("oracle geometry needs ground-truth depths".into()))?;
            if gt.layers() != cfg.layers {
                return Err(Error::ShapeMismatch(format!("{} ground-truth layers, {} requested", gt.layers(), cfg.layers)));
            }
            (predict_geometry_oracle(gt, &planes, cfg.scheme, cfg.soft_average)?, 0)
        }
    };
    let depths = aggregate(&beta, &planes, AggregateOptions { layers: cfg.layers, soft_average: cfg.soft_average })?;
    let meshes = mesh_layers(&depths, &rig.reference, cfg.diagonal);
    let coloring = match cfg.coloring_predictor {
        ColoringPredictor::Oracle => {
            let gt = oracle.textures.ok_or_else(|| Error::InvalidScene("oracle coloring needs ground-truth textures".into()))?;
            predict_coloring_oracle(gt)?
        }
        ColoringPredictor::Passthrough => predict_coloring_passthrough(&psv, &depths, cfg.coloring, &photo)?,
    };
    let side_layers = if coloring.scheme() == ColoringScheme::Rsbg { unproject_side_onto_layers(side, rig, &meshes) } else { Vec::new() };
    let scene = blend_textures(&coloring, reference, &side_layers, &meshes)?;
    Ok(BuildOutput { scene, planes, beta, depths, all_invalid })
}
