//! Per-layer RGBA textures: side-view unprojection, blending schemes, opacity.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{project, CameraRig};
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Mask};
use crate::meshing::LayeredMeshSet;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColoringScheme {
    /// Reference, unprojected side view and background.
    Rsbg,
    /// Reference and background.
    Rbg,
    /// Colors emitted directly.
    Raw,
}

impl fmt::Display for ColoringScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rsbg => "rsbg",
            Self::Rbg => "rbg",
            Self::Raw => "raw",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColorPayload<T> {
    /// Mixture logits `[layer][y][x][reference, side, background]`.
    Rsbg { background: ImageBuffer<T>, weights: Vec<T> },
    /// Mixture logits `[layer][y][x][reference, background]`.
    Rbg { background: ImageBuffer<T>, weights: Vec<T> },
    Raw { colors: Vec<ImageBuffer<T>> },
}

/// Coloring-predictor output; weights are unnormalized logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ColoringOutput<T> {
    height: usize,
    width: usize,
    layers: usize,
    payload: ColorPayload<T>,
    alphas: Vec<ImageBuffer<T>>,
}

impl<T: Real> ColoringOutput<T> {
    pub fn new(height: usize, width: usize, layers: usize, payload: ColorPayload<T>, alphas: Vec<ImageBuffer<T>>) -> Result<Self> {
        let out = Self { height, width, layers, payload, alphas };
        out.validate()?;
        Ok(out)
    }

    fn mismatch(&self, detail: String) -> Error {
        Error::SchemeShapeMismatch { scheme: self.scheme().to_string(), detail }
    }

    fn validate(&self) -> Result<()> {
        let (h, w, l) = (self.height, self.width, self.layers);
        let rgb_ok = |img: &ImageBuffer<T>| img.height() == h && img.width() == w && img.channels() == 3;
        match &self.payload {
            ColorPayload::Rsbg { background, weights } | ColorPayload::Rbg { background, weights } => {
                let k = self.mixture_size();
                if !rgb_ok(background) {
                    return Err(self.mismatch("background must be HxWx3".into()));
                }
                if weights.len() != l * h * w * k {
                    return Err(self.mismatch(format!("expected {} weights, got {}", l * h * w * k, weights.len())));
                }
                if weights.iter().any(|v| v.is_nan()) {
                    return Err(self.mismatch("NaN weight".into()));
                }
            }
            ColorPayload::Raw { colors } => {
                if colors.len() != l || !colors.iter().all(rgb_ok) {
                    return Err(self.mismatch(format!("expected {l} HxWx3 color layers")));
                }
            }
        }
        if self.alphas.len() != l || !self.alphas.iter().all(|a| a.height() == h && a.width() == w && a.channels() == 1) {
            return Err(self.mismatch(format!("expected {l} HxW alpha maps")));
        }
        if let Some(bad) = self.alphas.iter().flat_map(|a| a.data()).find(|a| !(**a >= T::zero() && **a <= T::one())) {
            return Err(Error::AlphaOutOfRange(bad.as_f64()));
        }
        Ok(())
    }

    pub fn scheme(&self) -> ColoringScheme {
        match self.payload {
            ColorPayload::Rsbg { .. } => ColoringScheme::Rsbg,
            ColorPayload::Rbg { .. } => ColoringScheme::Rbg,
            ColorPayload::Raw { .. } => ColoringScheme::Raw,
        }
    }

    fn mixture_size(&self) -> usize {
        match self.payload {
            ColorPayload::Rsbg { .. } => 3,
            ColorPayload::Rbg { .. } => 2,
            ColorPayload::Raw { .. } => 0,
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }
    pub fn payload(&self) -> &ColorPayload<T> {
        &self.payload
    }
    pub fn alphas(&self) -> &[ImageBuffer<T>] {
        &self.alphas
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnprojectedLayer<T> {
    pub image: ImageBuffer<T>,
    pub valid: Mask,
}

/// Unprojects the side view onto every layer, sampled on the reference `H x W` grid.
pub fn unproject_side_onto_layers<T: Real>(
    side: &ImageBuffer<T>,
    rig: &CameraRig<T>,
    meshes: &LayeredMeshSet<T>,
) -> Vec<UnprojectedLayer<T>> {
    let (h, w) = (rig.reference.height, rig.reference.width);
    (0..meshes.layer_count())
        .into_par_iter()
        .map(|l| {
            let mut image = ImageBuffer::zeros(h, w, side.channels());
            let mut valid = Mask::new(h, w, false);
            for y in 0..h {
                for x in 0..w {
                    let (px, py) = (T::from_usize_lossy(x), T::from_usize_lossy(y));
                    let depth = meshes.depth_at_pixel(l, px, py);
                    let world = rig.reference.ray(px, py) * depth;
                    let Ok(q) = project(rig.side.pose.transform(world), &rig.side.intrinsics) else { continue };
                    let ok = side.sample_snapped_into(q[0], q[1], T::geometric_tolerance(), image.pixel_mut(y, x));
                    valid.set(y, x, ok);
                }
            }
            UnprojectedLayer { image, valid }
        })
        .collect()
}

/// Mesh layers with straight-alpha RGBA textures (`H x W x 4` each).
#[derive(Debug, Clone, PartialEq)]
pub struct TexturedScene<T> {
    pub meshes: LayeredMeshSet<T>,
    pub textures: Vec<ImageBuffer<T>>,
}

impl<T: Real> TexturedScene<T> {
    pub fn new(meshes: LayeredMeshSet<T>, textures: Vec<ImageBuffer<T>>) -> Result<Self> {
        if meshes.layer_count() == 0 {
            return Err(Error::InvalidScene("scene has no layers".into()));
        }
        if textures.len() != meshes.layer_count() {
            return Err(Error::InvalidScene(format!("{} textures for {} layers", textures.len(), meshes.layer_count())));
        }
        let first = &textures[0];
        for t in &textures {
            if t.channels() != 4 || t.height() != first.height() || t.width() != first.width() {
                return Err(Error::InvalidScene("textures must share one HxWx4 shape".into()));
            }
        }
        if let Some(bad) = textures.iter().flat_map(|t| t.data()).find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::InvalidScene(format!("texture value {bad} outside [0, 1]")));
        }
        Ok(Self { meshes, textures })
    }

    pub fn layer_count(&self) -> usize {
        self.textures.len()
    }

    pub fn texture_size(&self) -> (usize, usize) {
        (self.textures[0].height(), self.textures[0].width())
    }
}

fn softmax_masked<T: Real>(logits: &[T], enabled: &[bool], out: &mut [T]) {
    let m = logits.iter().zip(enabled).filter(|(_, &e)| e).map(|(&z, _)| z).fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for ((o, &z), &e) in out.iter_mut().zip(logits).zip(enabled) {
        *o = if e { (z - m).exp() } else { T::zero() };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Normalized mixture weights for one texel; invalid side samples get weight 0.
pub fn mixture_weights<T: Real>(logits: &[T], side_valid: bool) -> Vec<T> {
    let enabled: Vec<bool> = if logits.len() == 3 { vec![true, side_valid, true] } else { vec![true; logits.len()] };
    let mut out = vec![T::zero(); logits.len()];
    softmax_masked(logits, &enabled, &mut out);
    out
}

/// Assembles per-layer RGBA textures from a coloring output.
///
/// `side` is only read by the RSBg scheme and must then hold one entry per layer.
pub fn blend_textures<T: Real>(
    coloring: &ColoringOutput<T>,
    reference: &ImageBuffer<T>,
    side: &[UnprojectedLayer<T>],
    meshes: &LayeredMeshSet<T>,
) -> Result<TexturedScene<T>> {
    let (h, w, l) = (coloring.height, coloring.width, coloring.layers);
    if meshes.layer_count() != l {
        return Err(coloring.mismatch(format!("{l} coloring layers for {} meshes", meshes.layer_count())));
    }
    if reference.height() != h || reference.width() != w || reference.channels() != 3 {
        return Err(coloring.mismatch("reference view must be HxWx3".into()));
    }
    if coloring.scheme() == ColoringScheme::Rsbg
        && (side.len() != l || side.iter().any(|s| s.image.height() != h || s.image.width() != w || s.image.channels() != 3))
    {
        return Err(coloring.mismatch(format!("RSBg needs {l} unprojected HxWx3 side layers")));
    }
    let textures = (0..l)
        .into_par_iter()
        .map(|layer| {
            let alpha = &coloring.alphas[layer];
            let mut tex = ImageBuffer::zeros(h, w, 4);
            let mut wbuf = [T::zero(); 3];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let out = tex.pixel_mut(y, x);
                    match &coloring.payload {
                        ColorPayload::Rsbg { background, weights } => {
                            let valid = side[layer].valid.get(y, x);
                            let base = (layer * h * w + i) * 3;
                            softmax_masked(&weights[base..base + 3], &[true, valid, true], &mut wbuf);
                            let s = side[layer].image.pixel(y, x);
                            for c in 0..3 {
                                let sv = if valid { s[c] } else { T::zero() };
                                out[c] = wbuf[0] * reference.get(y, x, c) + wbuf[1] * sv + wbuf[2] * background.get(y, x, c);
                            }
                        }
                        ColorPayload::Rbg { background, weights } => {
                            let base = (layer * h * w + i) * 2;
                            softmax_masked(&weights[base..base + 2], &[true, true], &mut wbuf[..2]);
                            for c in 0..3 {
                                out[c] = wbuf[0] * reference.get(y, x, c) + wbuf[1] * background.get(y, x, c);
                            }
                        }
                        ColorPayload::Raw { colors } => {
                            for c in 0..3 {
                                out[c] = colors[layer].get(y, x, c).max(T::zero()).min(T::one());
                            }
                        }
                    }
                    // convex mixtures of [0,1] inputs can exceed 1 by an ulp
                    for v in out[..3].iter_mut() {
                        *v = v.max(T::zero()).min(T::one());
                    }
                    out[3] = alpha.get(y, x, 0);
                }
            }
            tex
        })
        .collect();
    TexturedScene::new(meshes.clone(), textures)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerOpacity {
    pub layer: usize,
    pub mean_alpha: f64,
    pub redundant: bool,
}

/// Default mean-opacity threshold below which a layer is reported redundant.
pub const REDUNDANT_ALPHA_THRESHOLD: f64 = 1e-3;

/// Mean opacity of every layer; layers under `threshold` are flagged redundant.
pub fn zero_out_check<T: Real>(scene: &TexturedScene<T>, threshold: f64) -> Vec<LayerOpacity> {
    scene
        .textures
        .iter()
        .enumerate()
        .map(|(layer, tex)| {
            let n = tex.height() * tex.width();
            let sum: f64 = tex.data().chunks_exact(4).map(|p| p[3].as_f64()).sum();
            let mean_alpha = sum / n as f64;
            LayerOpacity { layer, mean_alpha, redundant: mean_alpha < threshold }
        })
        .collect()
}
