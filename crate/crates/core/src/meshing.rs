//! Layer depth grids to triangle meshes with a fixed six-neighbor connectivity.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::aggregate::DepthLayerSet;
use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::linalg::Vec3;
use crate::scalar::Real;

/// Which diagonal splits each grid quad.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Diagonal {
    /// Top-left to bottom-right.
    #[default]
    Main,
    /// Top-right to bottom-left.
    Anti,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMesh<T> {
    pub index: usize,
    /// Per-vertex depth (z in the reference frame), row-major over the grid.
    pub depths: Vec<T>,
    /// Per-vertex reference-frame position.
    pub vertices: Vec<Vec3<T>>,
}

/// `L` meshes sharing one vertex grid and connectivity, front to back by index.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredMeshSet<T> {
    pub intrinsics: CameraIntrinsics<T>,
    pub grid_height: usize,
    pub grid_width: usize,
    pub diagonal: Diagonal,
    /// Reference-image pixel each vertex ray passes through; also the texture coordinate.
    pub ray_pixels: Vec<[T; 2]>,
    rays: Vec<Vec3<T>>,
    pub triangles: Vec<[u32; 3]>,
    pub layers: Vec<LayerMesh<T>>,
}

/// Reference-image coordinate of grid index `i` on an axis with `grid` samples over `image` pixels.
#[inline]
pub fn grid_to_image<T: Real>(i: usize, grid: usize, image: usize) -> T {
    let half = T::lit(0.5);
    (T::from_usize_lossy(i) + half) * T::from_usize_lossy(image) / T::from_usize_lossy(grid) - half
}

/// Inverse of [`grid_to_image`] for continuous coordinates.
#[inline]
pub fn image_to_grid<T: Real>(v: T, grid: usize, image: usize) -> T {
    let half = T::lit(0.5);
    (v + half) * T::from_usize_lossy(grid) / T::from_usize_lossy(image) - half
}

/// Quad-split triangles for an `h x w` grid, counter-clockwise in image coordinates.
pub fn grid_triangles(h: usize, w: usize, diagonal: Diagonal) -> Vec<[u32; 3]> {
    let mut tris = Vec::with_capacity(2 * h.saturating_sub(1) * w.saturating_sub(1));
    let id = |r: usize, c: usize| (r * w + c) as u32;
    for r in 0..h.saturating_sub(1) {
        for c in 0..w.saturating_sub(1) {
            let (tl, tr, bl, br) = (id(r, c), id(r, c + 1), id(r + 1, c), id(r + 1, c + 1));
            match diagonal {
                Diagonal::Main => {
                    tris.push([tl, tr, br]);
                    tris.push([tl, br, bl]);
                }
                Diagonal::Anti => {
                    tris.push([tl, tr, bl]);
                    tris.push([tr, br, bl]);
                }
            }
        }
    }
    tris
}

impl<T: Real> LayeredMeshSet<T> {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.grid_height * self.grid_width
    }

    /// Unit-z ray through each vertex's ray pixel.
    pub fn rays(&self) -> &[Vec3<T>] {
        &self.rays
    }

    /// Moves one vertex along its ray.
    pub fn set_vertex_depth(&mut self, layer: usize, vertex: usize, depth: T) {
        let l = &mut self.layers[layer];
        l.depths[vertex] = depth;
        l.vertices[vertex] = self.rays[vertex] * depth;
    }

    pub fn depth_layers(&self) -> DepthLayerSet<T> {
        let data = self.layers.iter().flat_map(|l| l.depths.iter().copied()).collect();
        DepthLayerSet::new(self.layers.len(), self.grid_height, self.grid_width, data).expect("mesh depths are valid")
    }

    /// Depth of layer `l` bilinearly interpolated at reference pixel `(x, y)`.
    pub fn depth_at_pixel(&self, l: usize, x: T, y: T) -> T {
        let gx = image_to_grid(x, self.grid_width, self.intrinsics.width);
        let gy = image_to_grid(y, self.grid_height, self.intrinsics.height);
        let (x0, x1, fx) = crate::image::axis_cell(gx, self.grid_width);
        let (y0, y1, fy) = crate::image::axis_cell(gy, self.grid_height);
        let d = &self.layers[l].depths;
        let w = self.grid_width;
        let one = T::one();
        (one - fy) * ((one - fx) * d[y0 * w + x0] + fx * d[y0 * w + x1]) + fy * ((one - fx) * d[y1 * w + x0] + fx * d[y1 * w + x1])
    }
}

/// Builds one mesh per depth layer; vertex `(r, c)` is the backprojection of
/// its grid ray pixel at the layer depth.
pub fn mesh_layers<T: Real>(depths: &DepthLayerSet<T>, k_ref: &CameraIntrinsics<T>, diagonal: Diagonal) -> LayeredMeshSet<T> {
    let (h, w) = (depths.height(), depths.width());
    let mut ray_pixels = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            ray_pixels.push([grid_to_image(c, w, k_ref.width), grid_to_image(r, h, k_ref.height)]);
        }
    }
    let rays: Vec<Vec3<T>> = ray_pixels.iter().map(|p| k_ref.ray(p[0], p[1])).collect();
    let layers = (0..depths.layers())
        .map(|l| {
            let d = depths.layer(l).to_vec();
            let vertices = d.iter().zip(&rays).map(|(&z, &ray)| ray * z).collect();
            LayerMesh { index: l, depths: d, vertices }
        })
        .collect();
    LayeredMeshSet {
        intrinsics: *k_ref,
        grid_height: h,
        grid_width: w,
        diagonal,
        ray_pixels,
        rays,
        triangles: grid_triangles(h, w, diagonal),
        layers,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceRow {
    pub layer: usize,
    pub x: f64,
    pub depth: f64,
    pub alpha: f64,
}

/// Vertex depth and opacity along grid row `row` for every layer.
///
/// `textures` are per-layer images whose last channel is opacity.
pub fn slice<T: Real>(meshes: &LayeredMeshSet<T>, textures: &[ImageBuffer<T>], row: usize) -> Result<Vec<SliceRow>> {
    if row >= meshes.grid_height {
        return Err(Error::RowOutOfRange { row, height: meshes.grid_height });
    }
    if textures.len() != meshes.layers.len() {
        return Err(Error::ShapeMismatch(format!("{} textures for {} layers", textures.len(), meshes.layers.len())));
    }
    let mut rows = Vec::with_capacity(meshes.layers.len() * meshes.grid_width);
    for (l, layer) in meshes.layers.iter().enumerate() {
        let tex = &textures[l];
        let mut px = vec![T::zero(); tex.channels()];
        for c in 0..meshes.grid_width {
            let v = row * meshes.grid_width + c;
            let [x, y] = meshes.ray_pixels[v];
            tex.sample_clamped_into(x, y, &mut px);
            rows.push(SliceRow {
                layer: l,
                x: x.as_f64(),
                depth: layer.depths[v].as_f64(),
                alpha: px[tex.channels() - 1].as_f64(),
            });
        }
    }
    Ok(rows)
}

pub fn slice_csv(rows: &[SliceRow]) -> String {
    let mut s = String::from("layer,x,depth,alpha\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.layer, r.x, r.depth, r.alpha);
    }
    s
}

const LAYER_COLORS: [&str; 8] = ["#e41a1c", "#377eb8", "#4daf4a", "#984ea3", "#ff7f00", "#a65628", "#f781bf", "#999999"];

/// Scatter plot of a slice: pixel x horizontally, depth vertically (near at top),
/// dot opacity from alpha, color per layer.
pub fn slice_svg(rows: &[SliceRow], width: f64, height: f64) -> String {
    let fold = |f: fn(f64, f64) -> f64, init: f64, g: fn(&SliceRow) -> f64| rows.iter().map(g).fold(init, f);
    let (x0, x1) = (fold(f64::min, f64::INFINITY, |r| r.x), fold(f64::max, f64::NEG_INFINITY, |r| r.x));
    let (d0, d1) = (fold(f64::min, f64::INFINITY, |r| r.depth), fold(f64::max, f64::NEG_INFINITY, |r| r.depth));
    let margin = 20.0;
    let sx = |x: f64| margin + (x - x0) / (x1 - x0).max(1e-12) * (width - 2.0 * margin);
    let sy = |d: f64| margin + (d - d0) / (d1 - d0).max(1e-12) * (height - 2.0 * margin);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"1.5\" fill=\"{}\" fill-opacity=\"{:.4}\"/>",
            sx(r.x),
            sy(r.depth),
            LAYER_COLORS[r.layer % LAYER_COLORS.len()],
            r.alpha.clamp(0.0, 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, HashMap};

    fn k(w: usize, h: usize) -> CameraIntrinsics<f64> {
        CameraIntrinsics::centered(50.0, w, h).unwrap()
    }

    #[test]
    fn triangle_counts() {
        let d = DepthLayerSet::constant(1, 2, 2, &[3.0]).unwrap();
        let m = mesh_layers(&d, &k(2, 2), Diagonal::Main);
        assert_eq!((m.vertex_count(), m.triangles.len()), (4, 2));
        let d = DepthLayerSet::constant(2, 3, 4, &[3.0, 5.0]).unwrap();
        let m = mesh_layers(&d, &k(4, 3), Diagonal::Main);
        assert_eq!((m.vertex_count(), m.triangles.len()), (12, 12));
    }

    #[test]
    fn constant_depth_is_fronto_parallel() {
        let d = DepthLayerSet::constant(1, 5, 6, &[7.5]).unwrap();
        let m = mesh_layers(&d, &k(6, 5), Diagonal::Main);
        assert!(m.layers[0].vertices.iter().all(|v| v.z == 7.5));
    }

    #[test]
    fn full_resolution_grid_is_identity_mapping() {
        let d = DepthLayerSet::constant(1, 5, 6, &[2.0]).unwrap();
        let m = mesh_layers(&d, &k(6, 5), Diagonal::Main);
        assert_eq!(m.ray_pixels[2 * 6 + 3], [3.0, 2.0]);
        let half = DepthLayerSet::constant(1, 2, 3, &[2.0]).unwrap();
        let m = mesh_layers(&half, &k(6, 4), Diagonal::Main);
        assert_eq!(m.ray_pixels[0], [0.5, 0.5]);
    }

    fn signed_area(p: [f64; 2], q: [f64; 2], r: [f64; 2]) -> f64 {
        (q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1])
    }

    #[test]
    fn winding_and_interior_valence() {
        for diag in [Diagonal::Main, Diagonal::Anti] {
            let (h, w) = (5, 7);
            let d = DepthLayerSet::constant(1, h, w, &[2.0]).unwrap();
            let m = mesh_layers(&d, &k(w, h), diag);
            let mut edges: HashMap<u32, BTreeSet<u32>> = HashMap::new();
            for t in &m.triangles {
                assert!(t.iter().all(|&i| (i as usize) < h * w));
                let p = t.map(|i| m.ray_pixels[i as usize]);
                assert!(signed_area(p[0], p[1], p[2]) > 0.0);
                for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                    edges.entry(a).or_default().insert(b);
                    edges.entry(b).or_default().insert(a);
                }
            }
            for r in 1..h - 1 {
                for c in 1..w - 1 {
                    assert_eq!(edges[&((r * w + c) as u32)].len(), 6);
                }
            }
        }
    }

    #[test]
    fn meshing_is_per_layer() {
        let a = DepthLayerSet::new(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 9.0, 8.0, 7.0, 6.0]).unwrap();
        let b = DepthLayerSet::new(2, 2, 2, vec![9.0, 8.0, 7.0, 6.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let (ma, mb) = (mesh_layers(&a, &k(2, 2), Diagonal::Main), mesh_layers(&b, &k(2, 2), Diagonal::Main));
        assert_eq!(ma.layers[0].vertices, mb.layers[1].vertices);
        assert_eq!(ma.layers[1].vertices, mb.layers[0].vertices);
    }

    #[test]
    fn slice_rows_and_errors() {
        let d = DepthLayerSet::constant(2, 3, 4, &[2.0, 6.0]).unwrap();
        let m = mesh_layers(&d, &k(4, 3), Diagonal::Main);
        let tex = vec![ImageBuffer::filled(3, 4, 4, 0.25), ImageBuffer::filled(3, 4, 4, 1.0)];
        let rows = slice(&m, &tex, 1).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows[..4].iter().all(|r| r.depth == 2.0 && r.alpha == 0.25));
        assert!(rows[4..].iter().all(|r| r.depth == 6.0 && r.alpha == 1.0));
        assert_eq!(rows[2].x, 2.0);
        assert!(matches!(slice(&m, &tex, 3), Err(Error::RowOutOfRange { .. })));
        let csv = slice_csv(&rows);
        assert!(csv.starts_with("layer,x,depth,alpha\n0,0,2,0.25\n"));
        assert_eq!(slice_svg(&rows, 200.0, 100.0).matches("<circle").count(), 8);
    }

    #[test]
    fn depth_interpolation_between_vertices() {
        let d = DepthLayerSet::new(1, 1, 2, vec![2.0, 4.0]).unwrap();
        let m = mesh_layers(&d, &k(2, 1), Diagonal::Main);
        assert_eq!(m.depth_at_pixel(0, 0.5, 0.0), 3.0);
        assert_eq!(m.depth_at_pixel(0, -3.0, 0.0), 2.0);
    }
}
