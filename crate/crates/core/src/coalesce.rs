//! Merging a multiplane image into fewer deformable layers.
//!
//! Depths: over-composite plane depths within each group with plane alphas as
//! opacities. Textures: Monte-Carlo average of per-ray color and transmittance
//! over jittered rays through every texel, in log-transmittance space.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate_gc, BetaVolume, DepthLayerSet};
use crate::archive::ManifestIntrinsics;
use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::io;
use crate::meshing::{mesh_layers, Diagonal};
use crate::psv::PlaneStack;
use crate::render::Composite;
use crate::scalar::Real;
use crate::texture::TexturedScene;

/// Fronto-parallel RGBA planes (straight alpha), nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiPlaneImage<T> {
    pub planes: PlaneStack<T>,
    pub rgba: Vec<ImageBuffer<T>>,
}

impl<T: Real> MultiPlaneImage<T> {
    pub fn new(planes: PlaneStack<T>, rgba: Vec<ImageBuffer<T>>) -> Result<Self> {
        if rgba.len() != planes.len() {
            return Err(Error::ShapeMismatch(format!("{} images for {} planes", rgba.len(), planes.len())));
        }
        let first = &rgba[0];
        for img in &rgba {
            if img.channels() != 4 || img.height() != first.height() || img.width() != first.width() {
                return Err(Error::ShapeMismatch("plane images must share one HxWx4 shape".into()));
            }
            if let Some(v) = img.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
                return Err(Error::AlphaOutOfRange(v.as_f64()));
            }
        }
        Ok(Self { planes, rgba })
    }

    pub fn height(&self) -> usize {
        self.rgba[0].height()
    }

    pub fn width(&self) -> usize {
        self.rgba[0].width()
    }

    /// Each plane as a constant-depth layer with a full-resolution grid.
    pub fn to_scene(&self, k_ref: &CameraIntrinsics<T>) -> Result<TexturedScene<T>> {
        let depths = DepthLayerSet::constant(self.planes.len(), self.height(), self.width(), self.planes.depths())?;
        TexturedScene::new(mesh_layers(&depths, k_ref, Diagonal::Main), self.rgba.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RayModel {
    /// Ray from the jittered image-plane point `q` through the texel.
    #[default]
    ThroughTexel,
    /// Ray from the camera center through `q`.
    CameraCenter,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoalesceConfig {
    pub layers: usize,
    /// Jitter standard deviation in pixels.
    pub sigma: f64,
    pub samples: usize,
    pub seed: u64,
    /// Lower clamp for per-ray transmittance.
    pub alpha_floor: f64,
    pub ray_model: RayModel,
}

impl Default for CoalesceConfig {
    fn default() -> Self {
        Self { layers: 4, sigma: 1.0, samples: 64, seed: 0, alpha_floor: 1e-6, ray_model: RayModel::ThroughTexel }
    }
}

impl CoalesceConfig {
    pub fn validate(&self, planes: usize) -> Result<()> {
        if self.layers == 0 || planes % self.layers != 0 {
            return Err(Error::IndivisibleGroups { planes, layers: self.layers });
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidSpec(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.samples == 0 {
            return Err(Error::InvalidSpec("sample count must be at least 1".into()));
        }
        if !(self.alpha_floor > 0.0 && self.alpha_floor < 1.0) {
            return Err(Error::InvalidSpec(format!("alpha floor must lie in (0, 1), got {}", self.alpha_floor)));
        }
        Ok(())
    }
}

/// Group-wise depth composite with plane alphas as opacities.
pub fn merge_depths<T: Real>(mpi: &MultiPlaneImage<T>, layers: usize) -> Result<DepthLayerSet<T>> {
    let (h, w, p) = (mpi.height(), mpi.width(), mpi.planes.len());
    let mut data = Vec::with_capacity(h * w * p);
    for i in 0..h * w {
        for img in &mpi.rgba {
            data.push(img.data()[i * 4 + 3]);
        }
    }
    aggregate_gc(&BetaVolume::gc(h, w, p, data)?, &mpi.planes, layers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeResult<T> {
    pub scene: TexturedScene<T>,
    /// Texels where every ray was fully transparent; set to color 0, alpha 0.
    pub degenerate_texels: usize,
}

/// Per-ray straight color and clamped transmittance over a group's planes (edge-clamped lookups).
fn trace<T: Real>(mpi: &MultiPlaneImage<T>, group: std::ops::Range<usize>, at: impl Fn(T) -> [T; 2], floor: T) -> ([T; 3], T) {
    let mut acc = Composite::default();
    let mut s = [T::zero(); 4];
    for p in group {
        let px = at(mpi.planes.depths()[p]);
        mpi.rgba[p].sample_clamped_into(px[0], px[1], &mut s);
        acc.push([s[0], s[1], s[2]], s[3]);
    }
    let opacity = T::one() - acc.transmittance;
    let color = if opacity > T::zero() { acc.color.map(|c| (c / opacity).min(T::one())) } else { [T::zero(); 3] };
    (color, acc.transmittance.max(floor).min(T::one()))
}

/// Monte-Carlo texture merge onto `layers` (normally from [`merge_depths`]).
pub fn merge_textures<T: Real>(
    mpi: &MultiPlaneImage<T>,
    layers: &DepthLayerSet<T>,
    k_ref: &CameraIntrinsics<T>,
    cfg: &CoalesceConfig,
) -> Result<MergeResult<T>> {
    cfg.validate(mpi.planes.len())?;
    if layers.layers() != cfg.layers {
        return Err(Error::ShapeMismatch(format!("{} depth layers for {} target layers", layers.layers(), cfg.layers)));
    }
    if k_ref.width != mpi.width() || k_ref.height != mpi.height() {
        return Err(Error::ShapeMismatch("intrinsics do not match the plane images".into()));
    }
    let meshes = mesh_layers(layers, k_ref, Diagonal::Main);
    let (h, w) = (mpi.height(), mpi.width());
    let group = mpi.planes.len() / cfg.layers;
    let floor = T::lit(cfg.alpha_floor);
    let sigma = cfg.sigma;
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let one = T::one();

    let texels: Vec<([T; 4], bool)> = (0..cfg.layers * h * w)
        .into_par_iter()
        .map(|idx| {
            let l = idx / (h * w);
            let (y, x) = ((idx / w) % h, idx % w);
            let planes = l * group..(l + 1) * group;
            let (px, py) = (T::from_usize_lossy(x), T::from_usize_lossy(y));
            let texel = k_ref.ray(px, py) * meshes.depth_at_pixel(l, px, py);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ idx as u64);
            let (mut lambda, mut log_sq, mut color) = (T::zero(), T::zero(), [T::zero(); 3]);
            for _ in 0..cfg.samples {
                let (dx, dy): (f64, f64) = (normal.sample(&mut rng), normal.sample(&mut rng));
                let weight = T::lit(norm * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
                let (qx, qy) = (px + T::lit(dx), py + T::lit(dy));
                let literal = cfg.ray_model == RayModel::ThroughTexel && (texel.z - one).abs() > T::lit(1e-9);
                let (c, tr) = if literal {
                    // origin on the z = 1 plane, so plane z = d is reached at s = (d − 1) / (t_z − 1)
                    let origin = k_ref.ray(qx, qy);
                    trace(mpi, planes.clone(), |d| {
                        let s = (d - one) / (texel.z - one);
                        let p = origin + (texel - origin) * s;
                        [k_ref.fx * p.x / p.z + k_ref.cx, k_ref.fy * p.y / p.z + k_ref.cy]
                    }, floor)
                } else {
                    trace(mpi, planes.clone(), |_| [qx, qy], floor)
                };
                let log_t = tr.ln();
                lambda += weight * log_t;
                log_sq += weight * log_t * log_t;
                for ch in 0..3 {
                    color[ch] += weight * c[ch] * log_t;
                }
            }
            if lambda == T::zero() || !lambda.is_finite() {
                return ([T::zero(); 4], true);
            }
            let transmittance = (log_sq / lambda).exp().max(floor).min(one);
            let c = color.map(|v| (v / lambda).max(T::zero()).min(one));
            ([c[0], c[1], c[2], one - transmittance], false)
        })
        .collect();

    let mut textures = vec![ImageBuffer::zeros(h, w, 4); cfg.layers];
    let mut degenerate_texels = 0;
    for (idx, (rgba, degenerate)) in texels.into_iter().enumerate() {
        let l = idx / (h * w);
        textures[l].pixel_mut((idx / w) % h, idx % w).copy_from_slice(&rgba);
        degenerate_texels += degenerate as usize;
    }
    Ok(MergeResult { scene: TexturedScene::new(meshes, textures)?, degenerate_texels })
}

/// [`merge_depths`] followed by [`merge_textures`].
pub fn coalesce<T: Real>(mpi: &MultiPlaneImage<T>, k_ref: &CameraIntrinsics<T>, cfg: &CoalesceConfig) -> Result<MergeResult<T>> {
    cfg.validate(mpi.planes.len())?;
    let depths = merge_depths(mpi, cfg.layers)?;
    merge_textures(mpi, &depths, k_ref, cfg)
}

pub const MPI_VERSION: u32 = 1;

/// `mpi.json` of an MPI bundle directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpiManifest {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub intrinsics: ManifestIntrinsics,
    /// Plane depths, nearest first.
    pub depths: Vec<f64>,
    /// Per plane `[color, alpha]` file names (PPM/PFM color, PGM/PFM alpha).
    pub planes: Vec<[String; 2]>,
}

/// Writes `mpi.json` plus `plane_NN_color.pfm` / `plane_NN_alpha.pfm`.
pub fn write_mpi_bundle<T: Real>(dir: impl AsRef<Path>, mpi: &MultiPlaneImage<T>, k: &CameraIntrinsics<T>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut planes = Vec::with_capacity(mpi.planes.len());
    for (p, img) in mpi.rgba.iter().enumerate() {
        let names = [format!("plane_{p:02}_color.pfm"), format!("plane_{p:02}_alpha.pfm")];
        io::write_pfm(dir.join(&names[0]), &img.select_channels(&[0, 1, 2]))?;
        io::write_pfm(dir.join(&names[1]), &img.select_channels(&[3]))?;
        planes.push(names);
    }
    let manifest = MpiManifest {
        version: MPI_VERSION,
        height: mpi.height(),
        width: mpi.width(),
        intrinsics: ManifestIntrinsics::from(k),
        depths: mpi.planes.depths().iter().map(|d| d.as_f64()).collect(),
        planes,
    };
    fs::write(dir.join("mpi.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_mpi_bundle<T: Real>(dir: impl AsRef<Path>) -> Result<(MultiPlaneImage<T>, CameraIntrinsics<T>)> {
    let dir = dir.as_ref();
    let m: MpiManifest = serde_json::from_slice(&fs::read(dir.join("mpi.json"))?)?;
    if m.version != MPI_VERSION {
        return Err(Error::Format(format!("unsupported MPI bundle version {}", m.version)));
    }
    if m.planes.len() != m.depths.len() {
        return Err(Error::Format(format!("{} plane files for {} depths", m.planes.len(), m.depths.len())));
    }
    let mut rgba = Vec::with_capacity(m.planes.len());
    for [color, alpha] in &m.planes {
        let c: ImageBuffer<T> = io::read_image(dir.join(color))?;
        let a: ImageBuffer<T> = io::read_image(dir.join(alpha))?;
        if c.channels() != 3 || a.channels() != 1 || (c.height(), c.width()) != (m.height, m.width) || (a.height(), a.width()) != (m.height, m.width) {
            return Err(Error::Format(format!("plane {color} / {alpha} does not match {}x{}", m.height, m.width)));
        }
        rgba.push(ImageBuffer::from_fn(m.height, m.width, 4, |y, x, ch| if ch == 3 { a.get(y, x, 0) } else { c.get(y, x, ch) }));
    }
    let planes = PlaneStack::new(m.depths.iter().map(|&d| T::lit(d)).collect())?;
    Ok((MultiPlaneImage::new(planes, rgba)?, m.intrinsics.to_intrinsics()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Camera;
    use crate::psv::place_planes;
    use crate::render::{render, RenderOptions};
    use proptest::prelude::*;

    fn k(w: usize, h: usize) -> CameraIntrinsics<f64> {
        CameraIntrinsics::centered(w as f64, w, h).unwrap()
    }

    fn mpi_with(depths: Vec<f64>, h: usize, w: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> MultiPlaneImage<f64> {
        let n = depths.len();
        let rgba = (0..n).map(|p| ImageBuffer::from_fn(h, w, 4, |y, x, c| f(p, y, x, c))).collect();
        MultiPlaneImage::new(PlaneStack::new(depths).unwrap(), rgba).unwrap()
    }

    #[test]
    fn merge_depth_examples() {
        let alphas = [0.5, 0.9, 0.25, 0.3];
        let mpi = mpi_with(vec![1.0, 2.0, 4.0, 8.0], 1, 1, |p, _, _, c| if c == 3 { alphas[p] } else { 0.0 });
        assert_eq!(merge_depths(&mpi, 2).unwrap().data(), &[1.5, 7.0]);
        assert_eq!(merge_depths(&mpi, 4).unwrap().data(), &[1.0, 2.0, 4.0, 8.0]);
        let clear = mpi_with(vec![1.0, 2.0, 4.0, 8.0], 1, 1, |_, _, _, _| 0.0);
        assert_eq!(merge_depths(&clear, 2).unwrap().data(), &[2.0, 8.0]);
        assert!(matches!(merge_depths(&mpi, 3), Err(Error::IndivisibleGroups { .. })));
    }

    #[test]
    fn mpi_bundle_roundtrip() {
        let mpi = mpi_with(vec![1.5, 3.0, 7.0], 5, 4, |p, y, x, c| ((p * 5 + y * 3 + x + c * 7) % 11) as f64 / 10.0);
        let dir = tempfile::tempdir().unwrap();
        write_mpi_bundle(dir.path(), &mpi, &k(4, 5)).unwrap();
        let (back, kb) = read_mpi_bundle::<f64>(dir.path()).unwrap();
        assert_eq!(kb, k(4, 5));
        assert_eq!(back.planes.depths(), mpi.planes.depths());
        for (a, b) in back.rgba.iter().zip(&mpi.rgba) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn constant_field_is_a_fixed_point() {
        let c = [0.2, 0.7, 0.4];
        let mpi = mpi_with(vec![2.0, 3.0, 5.0, 9.0], 6, 6, |p, _, _, ch| match (p % 2, ch) {
            (0, 3) => 0.5,
            (1, 3) => 0.0,
            (_, ch) => c[ch],
        });
        let cfg = CoalesceConfig { layers: 2, samples: 16, ..Default::default() };
        let r = coalesce(&mpi, &k(6, 6), &cfg).unwrap();
        assert_eq!(r.degenerate_texels, 0);
        for t in &r.scene.textures {
            for px in t.data().chunks(4) {
                for ch in 0..3 {
                    assert!((px[ch] - c[ch]).abs() < 1e-9);
                }
                assert!((px[3] - 0.5).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn transparent_group_is_degenerate() {
        let mpi = mpi_with(vec![2.0, 3.0, 5.0, 9.0], 4, 4, |p, _, _, ch| if ch == 3 && p >= 2 { 1.0 } else { 0.3 * (ch != 3) as u8 as f64 });
        let r = coalesce(&mpi, &k(4, 4), &CoalesceConfig { layers: 2, samples: 4, ..Default::default() }).unwrap();
        assert_eq!(r.degenerate_texels, 16);
        assert!(r.scene.textures[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_plane_groups_reproduce_source() {
        let (h, w) = (12, 12);
        let planes = place_planes(2.0, 10.0, 4).unwrap();
        let mpi = MultiPlaneImage::new(
            planes.clone(),
            (0..4).map(|p| ImageBuffer::from_fn(h, w, 4, |y, x, c| if c == 3 { [0.3, 0.6, 0.8, 1.0][p] } else { ((x + 2 * y + p + c) % 5) as f64 / 4.0 })).collect(),
        )
        .unwrap();
        let kk = k(w, h);
        let cfg = CoalesceConfig { layers: 4, sigma: 1e-4, samples: 1, ..Default::default() };
        let merged = coalesce(&mpi, &kk, &cfg).unwrap().scene;
        let cam = Camera::reference(kk);
        let a = render(&merged, &cam, (h, w), &RenderOptions::default()).unwrap();
        let b = render(&mpi.to_scene(&kk).unwrap(), &cam, (h, w), &RenderOptions::default()).unwrap();
        let diff: f64 = a.color.data().iter().zip(b.color.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.color.data().len() as f64;
        assert!(diff < 1e-3, "{diff}");
    }

    #[test]
    fn seed_fixes_output() {
        let mpi = mpi_with(vec![2.0, 3.0, 5.0, 9.0], 5, 5, |p, y, x, c| ((p + y * 3 + x * 5 + c) % 7) as f64 / 6.0);
        let cfg = CoalesceConfig { layers: 2, samples: 8, seed: 7, ..Default::default() };
        let a = coalesce(&mpi, &k(5, 5), &cfg).unwrap();
        assert_eq!(a, coalesce(&mpi, &k(5, 5), &cfg).unwrap());
        let other = coalesce(&mpi, &k(5, 5), &CoalesceConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.scene.textures, other.scene.textures);
    }

    #[test]
    fn config_validation() {
        let ok = CoalesceConfig::default();
        assert!(ok.validate(32).is_ok());
        assert!(CoalesceConfig { sigma: 0.0, ..ok }.validate(32).is_err());
        assert!(CoalesceConfig { samples: 0, ..ok }.validate(32).is_err());
        assert!(CoalesceConfig { alpha_floor: 1.0, ..ok }.validate(32).is_err());
        assert!(CoalesceConfig { layers: 5, ..ok }.validate(32).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn merged_values_stay_in_bounds(seed in 0u64..10_000, ray in prop::bool::ANY) {
            let mpi = mpi_with(vec![2.0, 3.0, 5.0, 9.0], 5, 5, |p, y, x, c| (((p * 13 + y * 7 + x * 3 + c) as u64 ^ seed) % 11) as f64 / 10.0);
            let cfg = CoalesceConfig {
                layers: 2, samples: 6, seed,
                ray_model: if ray { RayModel::ThroughTexel } else { RayModel::CameraCenter },
                ..Default::default()
            };
            let r = coalesce(&mpi, &k(5, 5), &cfg).unwrap();
            for t in &r.scene.textures {
                for px in t.data().chunks(4) {
                    prop_assert!(px.iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0));
                }
            }
        }
    }
}
