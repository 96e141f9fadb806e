//! `.lms` scene archives: a directory holding `manifest.json`, `depths.bin` and `textures.bin`.
//!
//! Depths are float32 little-endian, layer-major then row-major over the vertex grid.
//! Textures are 8-bit straight-alpha RGBA, layer-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::DepthLayerSet;
use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::io::{dequantize_u8, quantize_u8};
use crate::meshing::{mesh_layers, Diagonal};
use crate::scalar::Real;
use crate::texture::TexturedScene;

pub const FORMAT_NAME: &str = "lms";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEPTHS_FILE: &str = "depths.bin";
pub const TEXTURES_FILE: &str = "textures.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSize {
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifestIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> From<&CameraIntrinsics<T>> for ManifestIntrinsics {
    fn from(k: &CameraIntrinsics<T>) -> Self {
        Self { fx: k.fx.as_f64(), fy: k.fy.as_f64(), cx: k.cx.as_f64(), cy: k.cy.as_f64(), width: k.width, height: k.height }
    }
}

impl ManifestIntrinsics {
    pub fn to_intrinsics<T: Real>(&self) -> Result<CameraIntrinsics<T>> {
        CameraIntrinsics::new(T::lit(self.fx), T::lit(self.fy), T::lit(self.cx), T::lit(self.cy), self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferDescriptor {
    pub name: String,
    pub uri: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_length: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub layers: usize,
    pub grid: GridSize,
    pub texture: GridSize,
    pub intrinsics: ManifestIntrinsics,
    pub diagonal: Diagonal,
    /// Smallest and largest stored vertex depth.
    pub depth_range: [f64; 2],
    pub buffers: Vec<BufferDescriptor>,
}

impl Manifest {
    fn buffer(&self, name: &str) -> Result<&BufferDescriptor> {
        self.buffers.iter().find(|b| b.name == name).ok_or_else(|| Error::Format(format!("manifest has no `{name}` buffer")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT_NAME {
            return Err(Error::Format(format!("format `{}` is not `{FORMAT_NAME}`", self.format)));
        }
        if self.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {}", self.version)));
        }
        if self.layers == 0 {
            return Err(Error::InvalidScene("archive has no layers".into()));
        }
        let depths = self.buffer("depths")?;
        let want = self.layers * self.grid.height * self.grid.width * 4;
        if depths.dtype != "float32le" || depths.byte_length != want {
            return Err(Error::Format(format!("depths buffer must be float32le with {want} bytes, manifest says {} / {}", depths.dtype, depths.byte_length)));
        }
        let textures = self.buffer("textures")?;
        let want = self.layers * self.texture.height * self.texture.width * 4;
        if textures.dtype != "uint8" || textures.byte_length != want {
            return Err(Error::Format(format!("textures buffer must be uint8 with {want} bytes, manifest says {} / {}", textures.dtype, textures.byte_length)));
        }
        Ok(())
    }
}

/// Everything an archive holds, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveBytes {
    pub manifest: Manifest,
    /// Serialized `manifest.json`.
    pub manifest_json: Vec<u8>,
    pub depths: Vec<u8>,
    pub textures: Vec<u8>,
}

impl ArchiveBytes {
    /// SHA-256 of the serialized manifest, lowercase hex.
    pub fn manifest_hash(&self) -> String {
        sha256_hex(&self.manifest_json)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_scene<T: Real>(scene: &TexturedScene<T>) -> Result<ArchiveBytes> {
    let meshes = &scene.meshes;
    let layers = scene.layer_count();
    if layers == 0 || meshes.layer_count() != layers {
        return Err(Error::InvalidScene(format!("{} meshes, {} textures", meshes.layer_count(), layers)));
    }
    let mut depths = Vec::with_capacity(layers * meshes.vertex_count() * 4);
    let (mut near, mut far) = (f64::INFINITY, f64::NEG_INFINITY);
    for layer in &meshes.layers {
        for &d in &layer.depths {
            let d = d.as_f64() as f32;
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::InvalidScene(format!("vertex depth {d} is not positive and finite")));
            }
            near = near.min(f64::from(d));
            far = far.max(f64::from(d));
            depths.extend_from_slice(&d.to_le_bytes());
        }
    }
    let (th, tw) = scene.texture_size();
    let textures: Vec<u8> = scene.textures.iter().flat_map(|t| t.data().iter().map(|&v| quantize_u8(v))).collect();
    let k = &meshes.intrinsics;
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        layers,
        grid: GridSize { height: meshes.grid_height, width: meshes.grid_width },
        texture: GridSize { height: th, width: tw },
        intrinsics: ManifestIntrinsics::from(k),
        diagonal: meshes.diagonal,
        depth_range: [near, far],
        buffers: vec![
            BufferDescriptor {
                name: "depths".into(),
                uri: DEPTHS_FILE.into(),
                dtype: "float32le".into(),
                shape: vec![layers, meshes.grid_height, meshes.grid_width],
                byte_length: depths.len(),
                sha256: sha256_hex(&depths),
            },
            BufferDescriptor {
                name: "textures".into(),
                uri: TEXTURES_FILE.into(),
                dtype: "uint8".into(),
                shape: vec![layers, th, tw, 4],
                byte_length: textures.len(),
                sha256: sha256_hex(&textures),
            },
        ],
    };
    let mut manifest_json = serde_json::to_vec_pretty(&manifest)?;
    manifest_json.push(b'\n');
    Ok(ArchiveBytes { manifest, manifest_json, depths, textures })
}

pub fn decode_scene<T: Real>(manifest_json: &[u8], depths: &[u8], textures: &[u8]) -> Result<TexturedScene<T>> {
    let manifest: Manifest = serde_json::from_slice(manifest_json)?;
    manifest.validate()?;
    for (name, bytes) in [("depths", depths), ("textures", textures)] {
        let desc = manifest.buffer(name)?;
        if bytes.len() != desc.byte_length {
            return Err(Error::Format(format!("{name} buffer has {} bytes, manifest says {}", bytes.len(), desc.byte_length)));
        }
        if sha256_hex(bytes) != desc.sha256 {
            return Err(Error::Format(format!("{name} buffer checksum mismatch")));
        }
    }
    let k = manifest.intrinsics.to_intrinsics()?;
    let values: Vec<T> = depths.chunks_exact(4).map(|c| T::lit(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))).collect();
    let grid = DepthLayerSet::new(manifest.layers, manifest.grid.height, manifest.grid.width, values)?;
    let meshes = mesh_layers(&grid, &k, manifest.diagonal);
    let texel_bytes = manifest.texture.height * manifest.texture.width * 4;
    let tex = textures
        .chunks_exact(texel_bytes)
        .map(|c| ImageBuffer::from_vec(manifest.texture.height, manifest.texture.width, 4, c.iter().map(|&b| dequantize_u8(b)).collect()))
        .collect::<Result<Vec<_>>>()?;
    TexturedScene::new(meshes, tex)
}

/// Writes the archive directory, creating it if needed. Returns the manifest hash.
pub fn export_scene<T: Real>(scene: &TexturedScene<T>, path: &Path) -> Result<String> {
    let bytes = encode_scene(scene)?;
    fs::create_dir_all(path)?;
    fs::write(path.join(DEPTHS_FILE), &bytes.depths)?;
    fs::write(path.join(TEXTURES_FILE), &bytes.textures)?;
    fs::write(path.join(MANIFEST_FILE), &bytes.manifest_json)?;
    Ok(bytes.manifest_hash())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(path.join(MANIFEST_FILE))?)?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn import_scene<T: Real>(path: &Path) -> Result<TexturedScene<T>> {
    let manifest_json = fs::read(path.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_json)?;
    manifest.validate()?;
    let depths = fs::read(path.join(&manifest.buffer("depths")?.uri))?;
    let textures = fs::read(path.join(&manifest.buffer("textures")?.uri))?;
    decode_scene(&manifest_json, &depths, &textures)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> TexturedScene<f64> {
        let k = CameraIntrinsics::centered(16.0, 16, 12).unwrap();
        let data = (0..2 * 4 * 5).map(|i| 1.0 + 0.25 * f64::from(i as u8) / 3.0).collect();
        let depths = DepthLayerSet::new(2, 4, 5, data).unwrap();
        let textures = (0..2)
            .map(|l| ImageBuffer::from_fn(12, 16, 4, |y, x, c| ((l * 7 + y * 3 + x * 5 + c * 11) % 17) as f64 / 16.0))
            .collect();
        TexturedScene::new(mesh_layers(&depths, &k, Diagonal::Main), textures).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let s = scene();
        let hash = export_scene(&s, dir.path()).unwrap();
        let back: TexturedScene<f64> = import_scene(dir.path()).unwrap();
        for (a, b) in s.meshes.layers.iter().zip(&back.meshes.layers) {
            for (x, y) in a.depths.iter().zip(&b.depths) {
                assert_eq!((*x as f32).to_bits(), (*y as f32).to_bits());
            }
        }
        for (a, b) in s.textures.iter().zip(&back.textures) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| quantize_u8(*x) == quantize_u8(*y)));
        }
        let again = encode_scene(&back).unwrap();
        assert_eq!(again.manifest_hash(), hash);
        assert_eq!(again.depths, fs::read(dir.path().join(DEPTHS_FILE)).unwrap());
        assert_eq!(again.textures, fs::read(dir.path().join(TEXTURES_FILE)).unwrap());
    }

    #[test]
    fn f32_and_f64_scenes_share_a_hash() {
        let s = scene();
        let bytes = encode_scene(&s).unwrap();
        let back: TexturedScene<f32> = decode_scene(&bytes.manifest_json, &bytes.depths, &bytes.textures).unwrap();
        assert_eq!(encode_scene(&back).unwrap().manifest_hash(), bytes.manifest_hash());
    }

    #[test]
    fn manifest_hash_is_frozen() {
        assert_eq!(encode_scene(&scene()).unwrap().manifest_hash(), "3d93f93c70337f6439804610f1bb399ae50434d1697fce6761d0dfd820c4b0cb");
    }

    #[test]
    fn zero_layers_rejected() {
        let mut s = scene();
        s.textures.clear();
        s.meshes.layers.clear();
        assert!(matches!(encode_scene(&s), Err(Error::InvalidScene(_))));
    }

    #[test]
    fn corrupted_buffer_rejected() {
        let b = encode_scene(&scene()).unwrap();
        let mut depths = b.depths.clone();
        depths[0] ^= 1;
        assert!(matches!(decode_scene::<f64>(&b.manifest_json, &depths, &b.textures), Err(Error::Format(_))));
        assert!(matches!(decode_scene::<f64>(&b.manifest_json, &b.depths[4..], &b.textures), Err(Error::Format(_))));
    }
}
