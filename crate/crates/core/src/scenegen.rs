//! Deterministic synthetic layered scenes with analytic ground truth.
//!
//! Every layer has an inverse depth that is affine in normalized reference
//! coordinates (a plane in 3D), optionally plus a low-frequency wave. Cameras
//! share the reference intrinsics and differ by a translation in the image
//! plane, so the pixel displacement of a surface point is `f·t/z` and flows on
//! planar layers are affine maps of pixel coordinates.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::DepthLayerSet;
use crate::camera::{Camera, CameraIntrinsics, CameraRig, RigidPose};
use crate::coalesce::MultiPlaneImage;
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Mask};
use crate::io;
use crate::linalg::Vec3;
use crate::meshing::{mesh_layers, Diagonal};
use crate::occlusion::{write_flow_pfm, FlowDirection, FlowField};
use crate::psv::PlaneStack;
use crate::render::{render, Composite, RenderOptions};
use crate::texture::TexturedScene;

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Constant,
    Tilted,
    Wavy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternKind {
    Checker,
    Gradient,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub layers: usize,
    pub height: usize,
    pub width: usize,
    /// Side camera center is `(baseline, 0, 0)` in the reference frame.
    pub baseline: f64,
    /// Novel camera center `(x, y)` in the reference frame (z = 0).
    pub novel_center: [f64; 2],
    pub depth_near: f64,
    pub depth_far: f64,
    pub shape: ShapeKind,
    pub patterns: Vec<PatternKind>,
    /// Opaque shapes cut into every layer except the last.
    pub cutouts: usize,
    /// Alpha inside the cutouts.
    pub opacity: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            layers: 3,
            height: 128,
            width: 128,
            baseline: 0.1,
            novel_center: [-0.2, 0.0],
            depth_near: 1.0,
            depth_far: 20.0,
            shape: ShapeKind::Tilted,
            patterns: vec![PatternKind::Checker, PatternKind::Noise, PatternKind::Gradient],
            cutouts: 3,
            opacity: 1.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.layers == 0 {
            return bad("at least one layer is required".into());
        }
        if self.height < 2 || self.width < 2 {
            return bad(format!("resolution {}x{} is too small", self.height, self.width));
        }
        if !(self.baseline.is_finite() && self.novel_center.iter().all(|v| v.is_finite())) {
            return bad("camera offsets must be finite".into());
        }
        if !(self.depth_near > 0.0 && self.depth_far > self.depth_near && self.depth_far.is_finite()) {
            return bad(format!("invalid depth range [{}, {}]", self.depth_near, self.depth_far));
        }
        if self.patterns.is_empty() {
            return bad("pattern set is empty".into());
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return bad(format!("opacity {} outside (0, 1]", self.opacity));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics<f64> {
        CameraIntrinsics::centered(self.width as f64, self.width, self.height).expect("validated spec")
    }

    pub fn rig(&self) -> CameraRig<f64> {
        let k = self.intrinsics();
        let side = Camera::new(k, RigidPose::from_translation(Vec3::new(-self.baseline, 0.0, 0.0)));
        let novel = Camera::new(k, RigidPose::from_translation(Vec3::new(-self.novel_center[0], -self.novel_center[1], 0.0)));
        CameraRig::new(k, side, novel).expect("translation-only rig")
    }
}

/// `ρ(u, v) = a + b·u + c·v + amp·sin(2π(fu·u + fv·v) + phase)` with `u, v` normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseDepth {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub amp: f64,
    pub fu: f64,
    pub fv: f64,
    pub phase: f64,
}

impl InverseDepth {
    pub fn constant(depth: f64) -> Self {
        Self { a: 1.0 / depth, b: 0.0, c: 0.0, amp: 0.0, fu: 0.0, fv: 0.0, phase: 0.0 }
    }

    #[inline]
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        let mut r = self.a + self.b * u + self.c * v;
        if self.amp != 0.0 {
            r += self.amp * (2.0 * PI * (self.fu * u + self.fv * v) + self.phase).sin();
        }
        r
    }

    /// `(∂ρ/∂u, ∂ρ/∂v)`.
    #[inline]
    pub fn grad(&self, u: f64, v: f64) -> [f64; 2] {
        let k = if self.amp != 0.0 { self.amp * 2.0 * PI * (2.0 * PI * (self.fu * u + self.fv * v) + self.phase).cos() } else { 0.0 };
        [self.b + k * self.fu, self.c + k * self.fv]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Pattern {
    Checker { period: f64, offset: [f64; 2], colors: [[f64; 3]; 2] },
    Gradient { origin: [f64; 2], direction: [f64; 2], length: f64, colors: [[f64; 3]; 2] },
    /// Sum of sinusoids: `(kx, ky, phase, per-channel amplitude)` in cycles per pixel.
    Noise { base: [f64; 3], waves: Vec<([f64; 3], [f64; 3])> },
}

impl Pattern {
    pub fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let c = match self {
            Pattern::Checker { period, offset, colors } => {
                let cell = ((x + offset[0]) / period).floor() + ((y + offset[1]) / period).floor();
                colors[(cell.rem_euclid(2.0)) as usize]
            }
            Pattern::Gradient { origin, direction, length, colors } => {
                let t = (((x - origin[0]) * direction[0] + (y - origin[1]) * direction[1]) / length).clamp(0.0, 1.0);
                std::array::from_fn(|i| colors[0][i] * (1.0 - t) + colors[1][i] * t)
            }
            Pattern::Noise { base, waves } => {
                let mut c = *base;
                for (k, amp) in waves {
                    let s = (2.0 * PI * (k[0] * x + k[1] * y) + k[2]).sin();
                    for i in 0..3 {
                        c[i] += amp[i] * s;
                    }
                }
                c
            }
        };
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Cutout {
    Disk { center: [f64; 2], radius: f64 },
    Rect { min: [f64; 2], max: [f64; 2] },
}

impl Cutout {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Cutout::Disk { center, radius } => (x - center[0]).powi(2) + (y - center[1]).powi(2) <= radius * radius,
            Cutout::Rect { min, max } => x >= min[0] && x <= max[0] && y >= min[1] && y <= max[1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerModel {
    pub inverse_depth: InverseDepth,
    pub pattern: Pattern,
    /// Empty means the layer is opaque everywhere.
    pub cutouts: Vec<Cutout>,
    pub opacity: f64,
}

impl LayerModel {
    pub fn alpha(&self, x: f64, y: f64) -> f64 {
        if self.cutouts.is_empty() {
            return 1.0;
        }
        if self.cutouts.iter().any(|c| c.contains(x, y)) {
            self.opacity
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub rig: CameraRig<f64>,
    /// Front to back.
    pub layers: Vec<LayerModel>,
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(0.1..0.9))
}

fn random_pattern(kind: PatternKind, rng: &mut ChaCha8Rng) -> Pattern {
    match kind {
        PatternKind::Checker => {
            let a = random_color(rng);
            // keep the two colors apart so the pattern is never flat
            let b = a.map(|v| if v > 0.5 { v - rng.random_range(0.3..0.4) } else { v + rng.random_range(0.3..0.4) });
            Pattern::Checker { period: rng.random_range(5.0..12.0), offset: [rng.random_range(0.0..12.0), rng.random_range(0.0..12.0)], colors: [a, b] }
        }
        PatternKind::Gradient => {
            let th: f64 = rng.random_range(0.0..2.0 * PI);
            Pattern::Gradient {
                origin: [rng.random_range(0.0..32.0), rng.random_range(0.0..32.0)],
                direction: [th.cos(), th.sin()],
                length: rng.random_range(40.0..160.0),
                colors: [random_color(rng), random_color(rng)],
            }
        }
        PatternKind::Noise => {
            let waves = (0..6)
                .map(|_| {
                    let f: f64 = rng.random_range(1.0 / 20.0..1.0 / 5.0);
                    let th: f64 = rng.random_range(0.0..PI);
                    ([f * th.cos(), f * th.sin(), rng.random_range(0.0..2.0 * PI)], std::array::from_fn(|_| rng.random_range(0.03..0.08)))
                })
                .collect();
            Pattern::Noise { base: std::array::from_fn(|_| rng.random_range(0.35..0.65)), waves }
        }
    }
}

/// Random scene from `(seed, spec)`; identical inputs give identical scenes.
pub fn generate(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (rho_max, rho_min) = (1.0 / spec.depth_near, 1.0 / spec.depth_far);
    let band = (rho_max - rho_min) / spec.layers as f64;
    let (h, w) = (spec.height as f64, spec.width as f64);
    let layers = (0..spec.layers)
        .map(|i| {
            let half = band / 2.0;
            let center = rho_max - (i as f64 + 0.5) * band;
            let mut inv = InverseDepth { a: center, b: 0.0, c: 0.0, amp: 0.0, fu: 0.0, fv: 0.0, phase: 0.0 };
            if spec.shape != ShapeKind::Constant {
                inv.b = rng.random_range(-0.6..0.6) * half;
                inv.c = rng.random_range(-0.6..0.6) * half;
            }
            if spec.shape == ShapeKind::Wavy {
                inv.amp = 0.25 * half;
                inv.fu = rng.random_range(0.5..1.5);
                inv.fv = rng.random_range(0.5..1.5);
                inv.phase = rng.random_range(0.0..2.0 * PI);
            }
            let kind = spec.patterns[i % spec.patterns.len()];
            let pattern = random_pattern(kind, &mut rng);
            let cutouts = if i + 1 == spec.layers {
                Vec::new()
            } else {
                (0..spec.cutouts)
                    .map(|_| {
                        let center = [rng.random_range(0.15..0.85) * w, rng.random_range(0.15..0.85) * h];
                        let size = rng.random_range(0.1..0.22) * w.min(h);
                        if rng.random::<bool>() {
                            Cutout::Disk { center, radius: size }
                        } else {
                            Cutout::Rect { min: [center[0] - size, center[1] - size * 0.7], max: [center[0] + size, center[1] + size * 0.7] }
                        }
                    })
                    .collect()
            };
            LayerModel { inverse_depth: inv, pattern, cutouts, opacity: spec.opacity }
        })
        .collect();
    Ok(SyntheticScene { rig: spec.rig(), spec: spec.clone(), layers })
}

/// Dense correspondences between the reference view and a translated view.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    /// On the target grid, pointing into the reference image.
    pub flow_rt: FlowField<f64>,
    /// On the reference grid, pointing into the target image.
    pub flow_tr: FlowField<f64>,
    /// Reference pixels whose visible surface is hidden or out of frame in the target.
    pub occluded_reference: Mask,
    /// Target pixels whose visible surface is not visible in the reference.
    pub disoccluded_target: Mask,
    /// Reference pixels whose flow lands among four target pixels that all see the same layer.
    pub covisible_reference: Mask,
    /// Visible-surface depth on the target grid (0 where nothing is hit).
    pub depth_target: ImageBuffer<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub reference: ImageBuffer<f64>,
    pub side: ImageBuffer<f64>,
    pub novel: ImageBuffer<f64>,
    /// Analytic reference composite.
    pub composite: ImageBuffer<f64>,
    pub depths: DepthLayerSet<f64>,
    pub textures: Vec<ImageBuffer<f64>>,
    pub depth_reference: ImageBuffer<f64>,
    pub novel_correspondence: Correspondence,
}

impl SyntheticScene {
    /// Scene from explicit layers; camera placement still comes from `spec`.
    pub fn from_layers(spec: SceneSpec, layers: Vec<LayerModel>) -> Result<Self> {
        let spec = SceneSpec { layers: layers.len(), ..spec };
        spec.validate()?;
        Ok(Self { rig: spec.rig(), spec, layers })
    }

    fn k(&self) -> &CameraIntrinsics<f64> {
        &self.rig.reference
    }

    #[inline]
    fn normalized(&self, x: f64, y: f64) -> (f64, f64) {
        let k = self.k();
        ((x - k.cx) / k.fx, (y - k.cy) / k.fy)
    }

    pub fn inverse_depth(&self, layer: usize, x: f64, y: f64) -> f64 {
        let (u, v) = self.normalized(x, y);
        self.layers[layer].inverse_depth.eval(u, v)
    }

    pub fn depth(&self, layer: usize, x: f64, y: f64) -> f64 {
        1.0 / self.inverse_depth(layer, x, y)
    }

    fn in_frame(&self, p: [f64; 2]) -> bool {
        let tol = 1e-9;
        p[0] >= -tol && p[1] >= -tol && p[0] <= (self.spec.width - 1) as f64 + tol && p[1] <= (self.spec.height - 1) as f64 + tol
    }

    /// Translation of a camera whose center is `center` (pose maps reference to camera coordinates).
    fn pose_translation(center: [f64; 2]) -> [f64; 2] {
        [-center[0], -center[1]]
    }

    /// Target pixel of reference pixel `p` on `layer` for a camera with pose translation `t`.
    pub fn forward_map(&self, layer: usize, t: [f64; 2], p: [f64; 2]) -> [f64; 2] {
        let k = self.k();
        let rho = self.inverse_depth(layer, p[0], p[1]);
        [p[0] + k.fx * t[0] * rho, p[1] + k.fy * t[1] * rho]
    }

    /// Reference pixel where the target ray through `q` meets `layer`, if inside the reference frame.
    pub fn intersect(&self, layer: usize, t: [f64; 2], q: [f64; 2]) -> Option<[f64; 2]> {
        let k = *self.k();
        let inv = &self.layers[layer].inverse_depth;
        let mut p = q;
        // Newton on p + f·t·ρ(p) = q; one step is exact for planar layers
        for _ in 0..60 {
            let (u, v) = self.normalized(p[0], p[1]);
            let rho = inv.eval(u, v);
            let g = inv.grad(u, v);
            let (sx, sy) = (k.fx * t[0], k.fy * t[1]);
            let r = [p[0] + sx * rho - q[0], p[1] + sy * rho - q[1]];
            let j = [[1.0 + sx * g[0] / k.fx, sx * g[1] / k.fy], [sy * g[0] / k.fx, 1.0 + sy * g[1] / k.fy]];
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            if det.abs() < 1e-12 {
                return None;
            }
            let d = [(j[1][1] * r[0] - j[0][1] * r[1]) / det, (j[0][0] * r[1] - j[1][0] * r[0]) / det];
            p = [p[0] - d[0], p[1] - d[1]];
            if d[0].abs() + d[1].abs() < 1e-13 {
                break;
            }
        }
        let (u, v) = self.normalized(p[0], p[1]);
        let r = self.forward_map(layer, t, p);
        if (r[0] - q[0]).abs() + (r[1] - q[1]).abs() > 1e-9 || inv.eval(u, v) <= 0.0 {
            return None;
        }
        self.in_frame(p).then_some(p)
    }

    /// First layer at reference coordinate `p` with alpha at least 0.5.
    pub fn visible_layer(&self, p: [f64; 2]) -> Option<usize> {
        self.layers.iter().position(|l| l.alpha(p[0], p[1]) >= 0.5)
    }

    /// First layer hit by the target ray through `q` with alpha at least 0.5.
    pub fn visible_from(&self, t: [f64; 2], q: [f64; 2]) -> Option<(usize, [f64; 2])> {
        (0..self.layers.len()).find_map(|i| {
            let p = self.intersect(i, t, q)?;
            (self.layers[i].alpha(p[0], p[1]) >= 0.5).then_some((i, p))
        })
    }

    pub fn depths(&self) -> DepthLayerSet<f64> {
        let (h, w) = (self.spec.height, self.spec.width);
        let mut data = Vec::with_capacity(self.layers.len() * h * w);
        for l in 0..self.layers.len() {
            for y in 0..h {
                for x in 0..w {
                    data.push(self.depth(l, x as f64, y as f64));
                }
            }
        }
        DepthLayerSet::new(self.layers.len(), h, w, data).expect("positive depths")
    }

    pub fn textures(&self) -> Vec<ImageBuffer<f64>> {
        let (h, w) = (self.spec.height, self.spec.width);
        self.layers
            .iter()
            .map(|l| {
                ImageBuffer::from_fn(h, w, 4, |y, x, c| {
                    let (xf, yf) = (x as f64, y as f64);
                    if c == 3 {
                        l.alpha(xf, yf)
                    } else {
                        l.pattern.color(xf, yf)[c]
                    }
                })
            })
            .collect()
    }

    /// Ground-truth layers as a renderable scene (one vertex per pixel).
    pub fn textured_scene(&self) -> TexturedScene<f64> {
        TexturedScene::new(mesh_layers(&self.depths(), self.k(), Diagonal::Main), self.textures()).expect("valid ground truth")
    }

    /// Composite of the exact layer intersections for a translated camera,
    /// with bilinear texture lookup; independent of the rasterizer.
    pub fn raycast_view(&self, center: [f64; 2]) -> (ImageBuffer<f64>, ImageBuffer<f64>) {
        let t = Self::pose_translation(center);
        let textures = self.textures();
        let (h, w) = (self.spec.height, self.spec.width);
        let pixels: Vec<Composite<f64>> = (0..h * w)
            .into_par_iter()
            .map(|i| {
                let q = [(i % w) as f64, (i / w) as f64];
                let mut acc = Composite::default();
                let mut s = [0.0; 4];
                for (l, tex) in textures.iter().enumerate() {
                    if let Some(p) = self.intersect(l, t, q) {
                        tex.sample_clamped_into(p[0], p[1], &mut s);
                        acc.push([s[0], s[1], s[2]], s[3]);
                    }
                }
                acc
            })
            .collect();
        let color = ImageBuffer::from_fn(h, w, 3, |y, x, c| pixels[y * w + x].color[c]);
        let alpha = ImageBuffer::from_fn(h, w, 1, |y, x, _| pixels[y * w + x].alpha());
        (color, alpha)
    }

    pub fn correspondence(&self, center: [f64; 2]) -> Correspondence {
        let t = Self::pose_translation(center);
        let (h, w) = (self.spec.height, self.spec.width);
        let target: Vec<Option<(usize, [f64; 2])>> =
            (0..h * w).into_par_iter().map(|i| self.visible_from(t, [(i % w) as f64, (i / w) as f64])).collect();
        let mut rt = ImageBuffer::zeros(h, w, 2);
        let mut rt_valid = Mask::new(h, w, false);
        let mut disoccluded = Mask::new(h, w, false);
        let mut depth_target = ImageBuffer::zeros(h, w, 1);
        for (i, hit) in target.iter().enumerate() {
            let (y, x) = (i / w, i % w);
            match hit {
                Some((l, p)) => {
                    rt.pixel_mut(y, x).copy_from_slice(p);
                    rt_valid.set(y, x, true);
                    disoccluded.set(y, x, self.visible_layer(*p) != Some(*l));
                    depth_target.set(y, x, 0, self.depth(*l, p[0], p[1]));
                }
                None => disoccluded.set(y, x, true),
            }
        }
        let mut tr = ImageBuffer::zeros(h, w, 2);
        let mut occluded = Mask::new(h, w, false);
        let mut covisible = Mask::new(h, w, false);
        let (wm, hm) = ((w - 1) as f64, (h - 1) as f64);
        for y in 0..h {
            for x in 0..w {
                let p = [x as f64, y as f64];
                let Some(l) = self.visible_layer(p) else {
                    occluded.set(y, x, true);
                    continue;
                };
                let q = self.forward_map(l, t, p);
                tr.pixel_mut(y, x).copy_from_slice(&q);
                let inside = q[0] >= 0.0 && q[1] >= 0.0 && q[0] <= wm && q[1] <= hm;
                let seen = inside && self.visible_from(t, q).map(|v| v.0) == Some(l);
                occluded.set(y, x, !seen);
                if seen {
                    let (x0, y0) = (q[0].floor() as usize, q[1].floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                    let same = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)].iter().all(|&(yy, xx)| target[yy * w + xx].map(|v| v.0) == Some(l));
                    covisible.set(y, x, same);
                }
            }
        }
        Correspondence {
            flow_rt: FlowField::new(rt, rt_valid, FlowDirection::Backward).expect("finite"),
            flow_tr: FlowField::new(tr, Mask::new(h, w, true), FlowDirection::Backward).expect("finite"),
            occluded_reference: occluded,
            disoccluded_target: disoccluded,
            covisible_reference: covisible,
            depth_target,
        }
    }

    /// Analytic over-composite of the layers at integer reference pixels.
    pub fn composite(&self) -> ImageBuffer<f64> {
        let (h, w) = (self.spec.height, self.spec.width);
        ImageBuffer::from_fn(h, w, 3, |y, x, c| {
            let mut acc = Composite::default();
            for l in &self.layers {
                acc.push(l.pattern.color(x as f64, y as f64), l.alpha(x as f64, y as f64));
            }
            acc.color[c]
        })
    }

    pub fn ground_truth(&self) -> Result<GroundTruth> {
        let scene = self.textured_scene();
        let size = (self.spec.height, self.spec.width);
        let opts = RenderOptions::default();
        let view = |cam: &Camera<f64>| render(&scene, cam, size, &opts).map(|o| o.color);
        let reference = view(&self.rig.reference_camera())?;
        let side = view(&self.rig.side)?;
        let novel = view(&self.rig.novel)?;
        let depths = self.depths();
        let depth_reference = ImageBuffer::from_fn(size.0, size.1, 1, |y, x, _| {
            self.visible_layer([x as f64, y as f64]).map_or(0.0, |l| depths.get(l, y, x))
        });
        Ok(GroundTruth {
            reference,
            side,
            novel,
            composite: self.composite(),
            textures: scene.textures,
            depths,
            depth_reference,
            novel_correspondence: self.correspondence(self.spec.novel_center),
        })
    }

    /// Splats every layer onto the nearest of `planes` (over-compositing collisions).
    pub fn to_mpi(&self, planes: &PlaneStack<f64>) -> Result<MultiPlaneImage<f64>> {
        let (h, w) = (self.spec.height, self.spec.width);
        let textures = self.textures();
        let d = planes.depths();
        let mut rgba = vec![ImageBuffer::zeros(h, w, 4); d.len()];
        let mut acc = vec![Composite::default(); d.len() * h * w];
        for (l, tex) in textures.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let z = self.depth(l, x as f64, y as f64);
                    let k = (0..d.len()).min_by(|&a, &b| (d[a] - z).abs().total_cmp(&(d[b] - z).abs())).expect("planes");
                    let px = tex.pixel(y, x);
                    acc[(k * h + y) * w + x].push([px[0], px[1], px[2]], px[3]);
                }
            }
        }
        for (k, img) in rgba.iter_mut().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let a = &acc[(k * h + y) * w + x];
                    let alpha = a.alpha();
                    let out = img.pixel_mut(y, x);
                    for c in 0..3 {
                        out[c] = if alpha > 0.0 { (a.color[c] / alpha).min(1.0) } else { 0.0 };
                    }
                    out[3] = alpha;
                }
            }
        }
        MultiPlaneImage::new(planes.clone(), rgba)
    }
}

fn mask_image(m: &Mask) -> ImageBuffer<f64> {
    ImageBuffer::from_fn(m.height(), m.width(), 1, |y, x, _| if m.get(y, x) { 1.0 } else { 0.0 })
}

pub fn cameras_text(rig: &CameraRig<f64>) -> String {
    let mut s = String::from("# name fx fy cx cy width height r11 r12 r13 t1 r21 r22 r23 t2 r31 r32 r33 t3\n");
    let k = &rig.reference;
    for (name, cam) in [("reference", rig.reference_camera()), ("side", rig.side), ("novel", rig.novel)] {
        let k = if name == "reference" { k } else { &cam.intrinsics };
        s.push_str(&format!("{name} {:?} {:?} {:?} {:?} {} {}", k.fx, k.fy, k.cx, k.cy, k.width, k.height));
        for v in cam.pose.to_3x4() {
            s.push_str(&format!(" {v:?}"));
        }
        s.push('\n');
    }
    s
}

pub fn parse_cameras(text: &str) -> Result<CameraRig<f64>> {
    let mut cams = std::collections::HashMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let mut it = line.split_whitespace();
        let name = it.next().unwrap_or_default().to_string();
        let nums: Vec<&str> = it.collect();
        if nums.len() != 18 {
            return Err(Error::Format(format!("camera line for '{name}' needs 18 numbers, found {}", nums.len())));
        }
        let f = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("bad number '{s}': {e}")));
        let u = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("bad size '{s}': {e}")));
        let k = CameraIntrinsics::new(f(nums[0])?, f(nums[1])?, f(nums[2])?, f(nums[3])?, u(nums[4])?, u(nums[5])?)?;
        let m: Vec<f64> = nums[6..].iter().map(|s| f(s)).collect::<Result<_>>()?;
        cams.insert(name, Camera::new(k, RigidPose::from_3x4(&m)?));
    }
    let get = |n: &str| cams.get(n).copied().ok_or_else(|| Error::Format(format!("missing camera '{n}'")));
    CameraRig::new(get("reference")?.intrinsics, get("side")?, get("novel")?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub layers: usize,
    pub depth_near: f64,
    pub depth_far: f64,
    pub spec: SceneSpec,
    pub scene: Vec<LayerModel>,
}

/// A scene bundle directory as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub manifest: BundleManifest,
    pub rig: CameraRig<f64>,
    pub reference: ImageBuffer<f64>,
    pub side: ImageBuffer<f64>,
    pub novel: ImageBuffer<f64>,
    pub gt_depths: DepthLayerSet<f64>,
    pub gt_textures: Vec<ImageBuffer<f64>>,
}

/// Writes views (PPM), depths and flows (PFM), cameras, labels (PGM) and `scene.json`.
pub fn write_bundle(dir: impl AsRef<Path>, scene: &SyntheticScene, gt: &GroundTruth) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    io::write_ppm(dir.join("reference.ppm"), &gt.reference)?;
    io::write_ppm(dir.join("side.ppm"), &gt.side)?;
    io::write_ppm(dir.join("novel.ppm"), &gt.novel)?;
    io::write_ppm(dir.join("composite.ppm"), &gt.composite)?;
    io::write_pfm(dir.join("depth_reference.pfm"), &gt.depth_reference)?;
    io::write_pfm(dir.join("depth_novel.pfm"), &gt.novel_correspondence.depth_target)?;
    write_flow_pfm(dir.join("flow_rn.pfm"), &gt.novel_correspondence.flow_rt)?;
    write_flow_pfm(dir.join("flow_nr.pfm"), &gt.novel_correspondence.flow_tr)?;
    io::write_pgm(dir.join("occluded_reference.pgm"), &mask_image(&gt.novel_correspondence.occluded_reference))?;
    io::write_pgm(dir.join("disoccluded_novel.pgm"), &mask_image(&gt.novel_correspondence.disoccluded_target))?;
    io::write_pgm(dir.join("covisible_reference.pgm"), &mask_image(&gt.novel_correspondence.covisible_reference))?;
    fs::write(dir.join("cameras.txt"), cameras_text(&scene.rig))?;
    let (h, w) = (scene.spec.height, scene.spec.width);
    for (l, tex) in gt.textures.iter().enumerate() {
        let depth = ImageBuffer::from_vec(h, w, 1, gt.depths.layer(l).to_vec())?;
        io::write_pfm(dir.join(format!("gt_depth_{l}.pfm")), &depth)?;
        io::write_pfm(dir.join(format!("gt_color_{l}.pfm")), &tex.select_channels(&[0, 1, 2]))?;
        io::write_pfm(dir.join(format!("gt_alpha_{l}.pfm")), &tex.select_channels(&[3]))?;
    }
    let manifest = BundleManifest {
        version: BUNDLE_VERSION,
        height: h,
        width: w,
        layers: scene.layers.len(),
        depth_near: scene.spec.depth_near,
        depth_far: scene.spec.depth_far,
        spec: scene.spec.clone(),
        scene: scene.layers.clone(),
    };
    fs::write(dir.join("scene.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

impl Bundle {
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: BundleManifest = serde_json::from_slice(&fs::read(dir.join("scene.json"))?)?;
        if manifest.version != BUNDLE_VERSION {
            return Err(Error::Format(format!("unsupported bundle version {}", manifest.version)));
        }
        let rig = parse_cameras(&fs::read_to_string(dir.join("cameras.txt"))?)?;
        let (h, w) = (manifest.height, manifest.width);
        let mut depth_data = Vec::with_capacity(manifest.layers * h * w);
        let mut gt_textures = Vec::with_capacity(manifest.layers);
        for l in 0..manifest.layers {
            let d: ImageBuffer<f64> = io::read_pfm(dir.join(format!("gt_depth_{l}.pfm")))?;
            let c: ImageBuffer<f64> = io::read_pfm(dir.join(format!("gt_color_{l}.pfm")))?;
            let a: ImageBuffer<f64> = io::read_pfm(dir.join(format!("gt_alpha_{l}.pfm")))?;
            if d.height() != h || d.width() != w || c.channels() != 3 || a.channels() != 1 {
                return Err(Error::Format(format!("ground-truth layer {l} has the wrong shape")));
            }
            depth_data.extend_from_slice(d.data());
            gt_textures.push(ImageBuffer::from_fn(h, w, 4, |y, x, ch| if ch == 3 { a.get(y, x, 0) } else { c.get(y, x, ch) }));
        }
        Ok(Self {
            rig,
            reference: io::read_ppm(dir.join("reference.ppm"))?,
            side: io::read_ppm(dir.join("side.ppm"))?,
            novel: io::read_ppm(dir.join("novel.ppm"))?,
            gt_depths: DepthLayerSet::new(manifest.layers, h, w, depth_data)?,
            gt_textures,
            manifest,
        })
    }
}
