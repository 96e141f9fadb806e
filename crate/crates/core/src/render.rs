//! Layered-mesh rasterizer with front-to-back compose-over and analytic gradients.
//!
//! Each layer is rasterized on its own; at a pixel the nearest triangle of a
//! layer wins. Layers are then composited in layer-index order. Barycentrics
//! are perspective-correct: for a pixel ray `q` and camera-space vertices
//! `X0, X1, X2`, the weights are proportional to the triple products
//! `det(q, X1, X2)`, `det(q, X2, X0)`, `det(q, X0, X1)`.
//!
//! Coverage is treated as frozen for differentiation: gradients flow through
//! compositing, texture lookup and vertex positions, never through visibility.

use rayon::prelude::*;

use crate::camera::{Camera, RigidPose};
use crate::error::{Error, Result};
use crate::image::{axis_cell, ImageBuffer};
use crate::linalg::Vec3;
use crate::scalar::Real;
use crate::texture::TexturedScene;

/// Triangle id of an empty fragment.
pub const NO_HIT: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Square tile edge in pixels.
    pub tile_size: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { tile_size: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment<T> {
    pub triangle: u32,
    /// Depth along the target camera's z axis.
    pub depth: T,
    pub bary: [T; 3],
    /// Texture coordinate (reference-image pixel).
    pub uv: [T; 2],
    /// Straight-alpha RGBA sampled from the layer texture.
    pub rgba: [T; 4],
}

impl<T: Real> Fragment<T> {
    pub fn empty() -> Self {
        Self { triangle: NO_HIT, depth: T::infinity(), bary: [T::zero(); 3], uv: [T::zero(); 2], rgba: [T::zero(); 4] }
    }

    #[inline]
    pub fn hit(&self) -> bool {
        self.triangle != NO_HIT
    }
}

/// Per pixel, per layer nearest fragment; layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentBuffer<T> {
    pub height: usize,
    pub width: usize,
    pub layers: usize,
    pub fragments: Vec<Fragment<T>>,
}

impl<T: Real> FragmentBuffer<T> {
    #[inline]
    pub fn get(&self, layer: usize, y: usize, x: usize) -> &Fragment<T> {
        &self.fragments[(layer * self.height + y) * self.width + x]
    }

    pub fn hit_count(&self) -> usize {
        self.fragments.iter().filter(|f| f.hit()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput<T> {
    pub color: ImageBuffer<T>,
    pub alpha: ImageBuffer<T>,
}

/// Running front-to-back composite: accumulated color and remaining transmittance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Composite<T> {
    pub color: [T; 3],
    pub transmittance: T,
}

impl<T: Real> Default for Composite<T> {
    fn default() -> Self {
        Self { color: [T::zero(); 3], transmittance: T::one() }
    }
}

impl<T: Real> Composite<T> {
    /// Adds a fragment behind everything accumulated so far.
    #[inline]
    pub fn push(&mut self, color: [T; 3], alpha: T) {
        let w = alpha * self.transmittance;
        for c in 0..3 {
            self.color[c] += color[c] * w;
        }
        self.transmittance *= T::one() - alpha;
    }

    /// Places `behind` (itself a composite) behind `self`.
    pub fn then(self, behind: Self) -> Self {
        let mut color = self.color;
        for c in 0..3 {
            color[c] += self.transmittance * behind.color[c];
        }
        Self { color, transmittance: self.transmittance * behind.transmittance }
    }

    pub fn alpha(&self) -> T {
        T::one() - self.transmittance
    }
}

fn check_alpha<T: Real>(a: T) -> Result<()> {
    if !(a >= T::zero() && a <= T::one()) {
        return Err(Error::AlphaOutOfRange(a.as_f64()));
    }
    Ok(())
}

/// Composites `(color, alpha)` fragments ordered front to back.
pub fn compose_over<T: Real>(fragments: &[([T; 3], T)]) -> Result<([T; 3], T)> {
    let mut acc = Composite::default();
    for &(c, a) in fragments {
        check_alpha(a)?;
        acc.push(c, a);
    }
    Ok((acc.color, acc.alpha()))
}

/// Gradients of compose-over outputs with respect to each fragment's color and alpha.
///
/// With `T_k` the transmittance in front of fragment `k`, `B_k` the composite
/// color behind it and `U_k` the transmittance behind it:
/// `∂C/∂c_k = α_k T_k`, `∂C/∂α_k = T_k (c_k − B_k)`, `∂A/∂α_k = T_k U_k`.
pub fn compose_over_backward<T: Real>(
    fragments: &[([T; 3], T)],
    upstream_color: [T; 3],
    upstream_alpha: T,
) -> Result<Vec<([T; 3], T)>> {
    for &(_, a) in fragments {
        check_alpha(a)?;
    }
    let mut out = vec![([T::zero(); 3], T::zero()); fragments.len()];
    compose_over_backward_into(fragments, upstream_color, upstream_alpha, &mut out);
    Ok(out)
}

fn compose_over_backward_into<T: Real>(fragments: &[([T; 3], T)], gc: [T; 3], ga: T, out: &mut [([T; 3], T)]) {
    let n = fragments.len();
    // back-to-front pass for the composite behind each fragment
    let mut behind = vec![Composite::default(); n];
    let mut acc = Composite::<T>::default();
    for (k, &(c, a)) in fragments.iter().enumerate().rev() {
        behind[k] = acc;
        let mut front = Composite::default();
        front.push(c, a);
        acc = front.then(acc);
    }
    let mut t = T::one();
    for (k, &(c, a)) in fragments.iter().enumerate() {
        let w = a * t;
        let mut d_alpha = T::zero();
        for ch in 0..3 {
            d_alpha += gc[ch] * (c[ch] - behind[k].color[ch]);
        }
        d_alpha = t * (d_alpha + ga * behind[k].transmittance);
        out[k] = ([gc[0] * w, gc[1] * w, gc[2] * w], d_alpha);
        t *= T::one() - a;
    }
}

fn validate_camera<T: Real>(camera: &Camera<T>, out_size: (usize, usize)) -> Result<()> {
    camera.intrinsics.validate().map_err(|e| Error::DegenerateCamera(e.to_string()))?;
    RigidPose::new(camera.pose.rotation, camera.pose.translation).map_err(|e| Error::DegenerateCamera(e.to_string()))?;
    if out_size.0 == 0 || out_size.1 == 0 {
        return Err(Error::DegenerateCamera("empty output size".into()));
    }
    Ok(())
}

/// Camera-space vertices and the triangles that cover at least one pixel center.
struct LayerSetup<T> {
    cam: Vec<Vec3<T>>,
    /// `(triangle id, inclusive pixel bounds x0, x1, y0, y1)`, ascending ids.
    tris: Vec<(u32, [u32; 4])>,
    /// Per tile, a range into `binned`.
    offsets: Vec<usize>,
    /// Indices into `tris`, grouped by tile, ascending within a tile.
    binned: Vec<u32>,
}

impl<T> LayerSetup<T> {
    fn bin(&self, tile: usize) -> &[u32] {
        &self.binned[self.offsets[tile]..self.offsets[tile + 1]]
    }
}

struct TileGrid {
    size: usize,
    cols: usize,
    rows: usize,
    /// tile column of each pixel column, tile row of each pixel row
    col_of: Vec<u32>,
    row_of: Vec<u32>,
}

impl TileGrid {
    fn new(out_size: (usize, usize), size: usize) -> Self {
        let size = size.max(1);
        Self {
            size,
            cols: out_size.1.div_ceil(size),
            rows: out_size.0.div_ceil(size),
            col_of: (0..out_size.1).map(|x| (x / size) as u32).collect(),
            row_of: (0..out_size.0).map(|y| (y / size) as u32).collect(),
        }
    }

    fn count(&self) -> usize {
        self.cols * self.rows
    }

    fn for_each_tile(&self, b: [u32; 4], mut f: impl FnMut(usize)) {
        let (c0, c1) = (self.col_of[b[0] as usize] as usize, self.col_of[b[1] as usize] as usize);
        for ty in self.row_of[b[2] as usize]..=self.row_of[b[3] as usize] {
            let row = ty as usize * self.cols;
            for tx in c0..=c1 {
                f(row + tx);
            }
        }
    }
}

fn near_limit<T: Real>() -> T {
    T::lit(1e-6)
}

fn setup_layer<T: Real>(
    scene: &TexturedScene<T>,
    layer: usize,
    camera: &Camera<T>,
    out_size: (usize, usize),
    tiles: &TileGrid,
) -> LayerSetup<T> {
    let k = &camera.intrinsics;
    let verts = &scene.meshes.layers[layer].vertices;
    let cam: Vec<Vec3<T>> = verts.iter().map(|&v| camera.pose.transform(v)).collect();
    let (h, w) = out_size;
    let spans: Vec<Option<[i32; 4]>> = cam
        .iter()
        .map(|p| {
            (p.z > near_limit()).then(|| {
                let r = p.z.recip();
                vertex_span([(k.fx * p.x * r + k.cx).as_f64(), (k.fy * p.y * r + k.cy).as_f64()])
            })
        })
        .collect();
    let mut tris = Vec::new();
    for (id, tri) in scene.meshes.triangles.iter().enumerate() {
        let [a, b, c] = tri.map(|i| i as usize);
        if let (Some(a), Some(b), Some(c)) = (spans[a], spans[b], spans[c]) {
            if let Some(bounds) = pixel_bounds([a, b, c], w, h) {
                tris.push((id as u32, bounds));
            }
        }
    }
    let mut offsets = vec![0; tiles.count() + 1];
    for &(_, b) in &tris {
        tiles.for_each_tile(b, |t| offsets[t + 1] += 1);
    }
    for t in 0..tiles.count() {
        offsets[t + 1] += offsets[t];
    }
    let mut fill = offsets.clone();
    let mut binned = vec![0; offsets[tiles.count()]];
    for (i, &(_, b)) in tris.iter().enumerate() {
        tiles.for_each_tile(b, |t| {
            binned[fill[t]] = i as u32;
            fill[t] += 1;
        });
    }
    LayerSetup { cam, tris, offsets, binned }
}

/// Pixel centers a vertex at screen point `p` can reach, padded by a small margin:
/// `[ceil(x - m), floor(x + m), ceil(y - m), floor(y + m)]`, saturated to `i32`.
#[inline]
fn vertex_span(p: [f64; 2]) -> [i32; 4] {
    const MARGIN: f64 = 1e-3;
    // comparisons instead of floor/ceil, which compile to calls on baseline x86-64
    let floor = |v: f64| {
        let t = v as i32;
        t - i32::from(v < f64::from(t))
    };
    let ceil = |v: f64| {
        let t = v as i32;
        t + i32::from(v > f64::from(t))
    };
    [ceil(p[0] - MARGIN), floor(p[0] + MARGIN), ceil(p[1] - MARGIN), floor(p[1] + MARGIN)]
}

/// Inclusive pixel range covered by a triangle with the given vertex spans, clipped to the image.
#[inline]
fn pixel_bounds(s: [[i32; 4]; 3], w: usize, h: usize) -> Option<[u32; 4]> {
    let x0 = s[0][0].min(s[1][0]).min(s[2][0]).max(0);
    let x1 = s[0][1].max(s[1][1]).max(s[2][1]).min(w as i32 - 1);
    let y0 = s[0][2].min(s[1][2]).min(s[2][2]).max(0);
    let y1 = s[0][3].max(s[1][3]).max(s[2][3]).min(h as i32 - 1);
    (x0 <= x1 && y0 <= y1).then_some([x0 as u32, x1 as u32, y0 as u32, y1 as u32])
}

/// Rasterizes every layer inside one tile; returns fragments `[layer][ty][tx]`.
fn raster_tile<T: Real>(
    scene: &TexturedScene<T>,
    setups: &[LayerSetup<T>],
    camera: &Camera<T>,
    tiles: &TileGrid,
    tile: usize,
    out_size: (usize, usize),
) -> (usize, usize, usize, usize, Vec<Fragment<T>>) {
    let (h, w) = out_size;
    let (tx0, ty0) = ((tile % tiles.cols) * tiles.size, (tile / tiles.cols) * tiles.size);
    let (tx1, ty1) = ((tx0 + tiles.size).min(w), (ty0 + tiles.size).min(h));
    let (tw, th) = (tx1 - tx0, ty1 - ty0);
    let k = &camera.intrinsics;
    let qx: Vec<T> = (tx0..tx1).map(|x| (T::from_usize_lossy(x) - k.cx) / k.fx).collect();
    let qy: Vec<T> = (ty0..ty1).map(|y| (T::from_usize_lossy(y) - k.cy) / k.fy).collect();
    let tol = T::geometric_tolerance();
    let mut frags = vec![Fragment::empty(); setups.len() * tw * th];
    for (l, setup) in setups.iter().enumerate() {
        let local = &mut frags[l * tw * th..(l + 1) * tw * th];
        for &i in setup.bin(tile) {
            let (id, b) = setup.tris[i as usize];
            let (px0, px1) = ((b[0] as usize).max(tx0), (b[1] as usize).min(tx1 - 1));
            let (py0, py1) = ((b[2] as usize).max(ty0), (b[3] as usize).min(ty1 - 1));
            if px0 > px1 || py0 > py1 {
                continue;
            }
            let [x0, x1, x2] = scene.meshes.triangles[id as usize].map(|v| setup.cam[v as usize]);
            let n = [x1.cross(x2), x2.cross(x0), x0.cross(x1)];
            let det = x0.dot(n[0]);
            for py in py0..=py1 {
                let y = qy[py - ty0];
                let row = [n[0].y * y + n[0].z, n[1].y * y + n[1].z, n[2].y * y + n[2].z];
                for px in px0..=px1 {
                    let x = qx[px - tx0];
                    let b = [n[0].x * x + row[0], n[1].x * x + row[1], n[2].x * x + row[2]];
                    let s = b[0] + b[1] + b[2];
                    if s == T::zero() {
                        continue;
                    }
                    let inv = s.recip();
                    let bn = [b[0] * inv, b[1] * inv, b[2] * inv];
                    if bn[0] < -tol || bn[1] < -tol || bn[2] < -tol {
                        continue;
                    }
                    let z = det * inv;
                    let f = &mut local[(py - ty0) * tw + (px - tx0)];
                    if z > T::zero() && z < f.depth {
                        f.triangle = id;
                        f.depth = z;
                        f.bary = bn;
                    }
                }
            }
        }
        let tex = &scene.textures[l];
        let ray_px = &scene.meshes.ray_pixels;
        for f in local.iter_mut().filter(|f| f.hit()) {
            let tri = scene.meshes.triangles[f.triangle as usize];
            let mut uv = [T::zero(); 2];
            for (i, &v) in tri.iter().enumerate() {
                uv[0] += f.bary[i] * ray_px[v as usize][0];
                uv[1] += f.bary[i] * ray_px[v as usize][1];
            }
            f.uv = uv;
            f.rgba = tex.sample_clamped(uv[0], uv[1]);
        }
    }
    (tx0, ty0, tw, th, frags)
}

fn prepare<T: Real>(
    scene: &TexturedScene<T>,
    camera: &Camera<T>,
    out_size: (usize, usize),
    opts: &RenderOptions,
) -> Result<(TileGrid, Vec<LayerSetup<T>>)> {
    validate_camera(camera, out_size)?;
    let tiles = TileGrid::new(out_size, opts.tile_size);
    let setups = (0..scene.layer_count())
        .into_par_iter()
        .map(|l| setup_layer(scene, l, camera, out_size, &tiles))
        .collect();
    Ok((tiles, setups))
}

/// Nearest fragment per pixel and layer for a camera given relative to the reference frame.
pub fn rasterize<T: Real>(
    scene: &TexturedScene<T>,
    camera: &Camera<T>,
    out_size: (usize, usize),
    opts: &RenderOptions,
) -> Result<FragmentBuffer<T>> {
    let (tiles, setups) = prepare(scene, camera, out_size, opts)?;
    let (h, w) = out_size;
    let layers = scene.layer_count();
    let results: Vec<_> =
        (0..tiles.count()).into_par_iter().map(|t| raster_tile(scene, &setups, camera, &tiles, t, out_size)).collect();
    let mut fragments = vec![Fragment::empty(); layers * h * w];
    for (tx0, ty0, tw, th, frags) in results {
        for l in 0..layers {
            for y in 0..th {
                let src = &frags[(l * th + y) * tw..(l * th + y + 1) * tw];
                let dst = (l * h + ty0 + y) * w + tx0;
                fragments[dst..dst + tw].copy_from_slice(src);
            }
        }
    }
    Ok(FragmentBuffer { height: h, width: w, layers, fragments })
}

/// Renders the scene by compositing layers front to back in index order.
pub fn render<T: Real>(
    scene: &TexturedScene<T>,
    camera: &Camera<T>,
    out_size: (usize, usize),
    opts: &RenderOptions,
) -> Result<RenderOutput<T>> {
    let (tiles, setups) = prepare(scene, camera, out_size, opts)?;
    let (h, w) = out_size;
    let layers = scene.layer_count();
    let results: Vec<_> = (0..tiles.count())
        .into_par_iter()
        .map(|t| {
            let (tx0, ty0, tw, th, frags) = raster_tile(scene, &setups, camera, &tiles, t, out_size);
            let mut out = vec![Composite::default(); tw * th];
            for (i, acc) in out.iter_mut().enumerate() {
                for l in 0..layers {
                    let f = &frags[l * tw * th + i];
                    if f.hit() {
                        acc.push([f.rgba[0], f.rgba[1], f.rgba[2]], f.rgba[3]);
                    }
                }
            }
            (tx0, ty0, tw, th, out)
        })
        .collect();
    let mut color = ImageBuffer::zeros(h, w, 3);
    let mut alpha = ImageBuffer::zeros(h, w, 1);
    for (tx0, ty0, tw, th, out) in results {
        for y in 0..th {
            for x in 0..tw {
                let acc = &out[y * tw + x];
                color.pixel_mut(ty0 + y, tx0 + x).copy_from_slice(&acc.color);
                alpha.set(ty0 + y, tx0 + x, 0, acc.alpha());
            }
        }
    }
    Ok(RenderOutput { color, alpha })
}

/// Composites fragments per pixel in order of their depth instead of layer index.
///
/// Only meant for measuring how far layer-index compositing departs from
/// depth order when layers intersect.
pub fn composite_depth_sorted<T: Real>(fragments: &FragmentBuffer<T>) -> RenderOutput<T> {
    let (h, w) = (fragments.height, fragments.width);
    let mut color = ImageBuffer::zeros(h, w, 3);
    let mut alpha = ImageBuffer::zeros(h, w, 1);
    let mut hits = Vec::with_capacity(fragments.layers);
    for y in 0..h {
        for x in 0..w {
            hits.clear();
            hits.extend((0..fragments.layers).map(|l| *fragments.get(l, y, x)).filter(|f| f.hit()));
            // stable: equal depths keep layer order
            hits.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap_or(std::cmp::Ordering::Equal));
            let mut acc = Composite::default();
            for f in &hits {
                acc.push([f.rgba[0], f.rgba[1], f.rgba[2]], f.rgba[3]);
            }
            color.pixel_mut(y, x).copy_from_slice(&acc.color);
            alpha.set(y, x, 0, acc.alpha());
        }
    }
    RenderOutput { color, alpha }
}

/// Composites an existing fragment buffer in layer-index order.
pub fn composite_layers<T: Real>(fragments: &FragmentBuffer<T>) -> RenderOutput<T> {
    let (h, w) = (fragments.height, fragments.width);
    let mut color = ImageBuffer::zeros(h, w, 3);
    let mut alpha = ImageBuffer::zeros(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let mut acc = Composite::default();
            for l in 0..fragments.layers {
                let f = fragments.get(l, y, x);
                if f.hit() {
                    acc.push([f.rgba[0], f.rgba[1], f.rgba[2]], f.rgba[3]);
                }
            }
            color.pixel_mut(y, x).copy_from_slice(&acc.color);
            alpha.set(y, x, 0, acc.alpha());
        }
    }
    RenderOutput { color, alpha }
}

/// Gradients of a scalar loss with respect to scene parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGradients<T> {
    /// `[layer][vertex]` vertex-depth gradients.
    pub depths: Vec<Vec<T>>,
    /// Per-layer `H x W x 4` texture gradients (RGB then alpha).
    pub textures: Vec<ImageBuffer<T>>,
}

/// Back-propagates `∂loss/∂color` (and optionally `∂loss/∂alpha`) of a render.
///
/// `fragments` must come from [`rasterize`] with the same scene and camera.
pub fn render_backward<T: Real>(
    scene: &TexturedScene<T>,
    camera: &Camera<T>,
    fragments: &FragmentBuffer<T>,
    upstream_color: &ImageBuffer<T>,
    upstream_alpha: Option<&ImageBuffer<T>>,
) -> Result<SceneGradients<T>> {
    let (h, w) = (fragments.height, fragments.width);
    if upstream_color.height() != h || upstream_color.width() != w || upstream_color.channels() != 3 {
        return Err(Error::ShapeMismatch("upstream color gradient must match the render".into()));
    }
    if let Some(a) = upstream_alpha {
        if a.height() != h || a.width() != w || a.channels() != 1 {
            return Err(Error::ShapeMismatch("upstream alpha gradient must match the render".into()));
        }
    }
    if fragments.layers != scene.layer_count() {
        return Err(Error::ShapeMismatch("fragment buffer does not match the scene".into()));
    }
    let layers = fragments.layers;

    // per pixel, per layer d loss / d rgba of the fragment
    let mut d_rgba = vec![[T::zero(); 4]; layers * h * w];
    let rows: Vec<Vec<[T; 4]>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![[T::zero(); 4]; layers * w];
            let mut hits = Vec::with_capacity(layers);
            let mut order = Vec::with_capacity(layers);
            let mut grads = vec![([T::zero(); 3], T::zero()); layers];
            for x in 0..w {
                hits.clear();
                order.clear();
                for l in 0..layers {
                    let f = fragments.get(l, y, x);
                    if f.hit() {
                        hits.push(([f.rgba[0], f.rgba[1], f.rgba[2]], f.rgba[3]));
                        order.push(l);
                    }
                }
                let gc = [upstream_color.get(y, x, 0), upstream_color.get(y, x, 1), upstream_color.get(y, x, 2)];
                let ga = upstream_alpha.map_or(T::zero(), |a| a.get(y, x, 0));
                compose_over_backward_into(&hits, gc, ga, &mut grads);
                for (i, &l) in order.iter().enumerate() {
                    let (dc, da) = grads[i];
                    row[l * w + x] = [dc[0], dc[1], dc[2], da];
                }
            }
            row
        })
        .collect();
    for (y, row) in rows.into_iter().enumerate() {
        for l in 0..layers {
            let dst = (l * h + y) * w;
            d_rgba[dst..dst + w].copy_from_slice(&row[l * w..(l + 1) * w]);
        }
    }

    let k = &camera.intrinsics;
    let meshes = &scene.meshes;
    let per_layer: Vec<(Vec<T>, ImageBuffer<T>)> = (0..layers)
        .into_par_iter()
        .map(|l| {
            let tex = &scene.textures[l];
            let (th, tw) = (tex.height(), tex.width());
            let mut g_tex = ImageBuffer::zeros(th, tw, 4);
            let mut g_depth = vec![T::zero(); meshes.vertex_count()];
            let verts = &meshes.layers[l].vertices;
            for y in 0..h {
                for x in 0..w {
                    let f = fragments.get(l, y, x);
                    if !f.hit() {
                        continue;
                    }
                    let g = d_rgba[(l * h + y) * w + x];
                    // texture lookup: bilinear with clamp-to-edge
                    let (u0, u1, fu) = axis_cell(f.uv[0], tw);
                    let (v0, v1, fv) = axis_cell(f.uv[1], th);
                    let one = T::one();
                    let corners = [(v0, u0, (one - fu) * (one - fv)), (v0, u1, fu * (one - fv)), (v1, u0, (one - fu) * fv), (v1, u1, fu * fv)];
                    for &(cy, cx, wgt) in &corners {
                        let px = g_tex.pixel_mut(cy, cx);
                        for ch in 0..4 {
                            px[ch] += wgt * g[ch];
                        }
                    }
                    let inside_u = f.uv[0] >= T::zero() && f.uv[0] <= T::from_usize_lossy(tw - 1) && u1 != u0;
                    let inside_v = f.uv[1] >= T::zero() && f.uv[1] <= T::from_usize_lossy(th - 1) && v1 != v0;
                    let mut g_uv = [T::zero(); 2];
                    for ch in 0..4 {
                        let t00 = tex.get(v0, u0, ch);
                        let t01 = tex.get(v0, u1, ch);
                        let t10 = tex.get(v1, u0, ch);
                        let t11 = tex.get(v1, u1, ch);
                        if inside_u {
                            g_uv[0] += g[ch] * ((one - fv) * (t01 - t00) + fv * (t11 - t10));
                        }
                        if inside_v {
                            g_uv[1] += g[ch] * ((one - fu) * (t10 - t00) + fu * (t11 - t01));
                        }
                    }
                    if g_uv[0] == T::zero() && g_uv[1] == T::zero() {
                        continue;
                    }
                    // texture coordinate through perspective-correct barycentrics
                    let tri = meshes.triangles[f.triangle as usize].map(|i| i as usize);
                    let xs = tri.map(|i| camera.pose.transform(verts[i]));
                    let q = Vec3::new((T::from_usize_lossy(x) - k.cx) / k.fx, (T::from_usize_lossy(y) - k.cy) / k.fy, one);
                    let beta = [q.dot(xs[1].cross(xs[2])), q.dot(xs[2].cross(xs[0])), q.dot(xs[0].cross(xs[1]))];
                    let s = beta[0] + beta[1] + beta[2];
                    let uvs = tri.map(|i| meshes.ray_pixels[i]);
                    let mut uv = [T::zero(); 2];
                    for i in 0..3 {
                        uv[0] += beta[i] / s * uvs[i][0];
                        uv[1] += beta[i] / s * uvs[i][1];
                    }
                    let coef: [T; 3] = std::array::from_fn(|i| (g_uv[0] * (uvs[i][0] - uv[0]) + g_uv[1] * (uvs[i][1] - uv[1])) / s);
                    for m in 0..3 {
                        let (a, b) = ((m + 1) % 3, (m + 2) % 3);
                        let grad_x = q.cross(xs[b]) * coef[a] + xs[a].cross(q) * coef[b];
                        let dir = camera.pose.rotation.mul_vec(meshes.rays()[tri[m]]);
                        g_depth[tri[m]] += grad_x.dot(dir);
                    }
                }
            }
            (g_depth, g_tex)
        })
        .collect();
    let (depths, textures) = per_layer.into_iter().unzip();
    Ok(SceneGradients { depths, textures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::DepthLayerSet;
    use crate::camera::CameraIntrinsics;
    use crate::linalg::Mat3;
    use crate::meshing::{mesh_layers, Diagonal};

    fn k(w: usize, h: usize) -> CameraIntrinsics<f64> {
        CameraIntrinsics::centered(w as f64, w, h).unwrap()
    }

    fn textured(depths: &DepthLayerSet<f64>, textures: Vec<ImageBuffer<f64>>) -> TexturedScene<f64> {
        let kk = k(textures[0].width(), textures[0].height());
        TexturedScene::new(mesh_layers(depths, &kk, Diagonal::Main), textures).unwrap()
    }

    fn pattern(h: usize, w: usize, alpha: f64, seed: usize) -> ImageBuffer<f64> {
        ImageBuffer::from_fn(h, w, 4, |y, x, c| if c == 3 { alpha } else { ((x * 7 + y * 5 + c * 3 + seed) % 13) as f64 / 12.0 })
    }

    #[test]
    fn compose_over_examples() {
        assert_eq!(compose_over(&[([0.3, 0.6, 0.9], 1.0)]).unwrap(), ([0.3, 0.6, 0.9], 1.0));
        assert_eq!(compose_over(&[([1.0; 3], 0.5), ([0.0; 3], 1.0)]).unwrap(), ([0.5; 3], 1.0));
        assert_eq!(compose_over(&[([1.0; 3], 0.0), ([0.4; 3], 0.0)]).unwrap(), ([0.0; 3], 0.0));
        assert!(matches!(compose_over(&[([1.0; 3], 1.5)]), Err(Error::AlphaOutOfRange(_))));
    }

    #[test]
    fn compose_over_backward_hand_example() {
        // (c=1, α) over (c=0, α=1): output = α, derivative 1
        let g = compose_over_backward(&[([1.0; 3], 0.3), ([0.0; 3], 1.0)], [1.0, 0.0, 0.0], 0.0).unwrap();
        assert_eq!(g[0].1, 1.0);
        assert_eq!(g[0].0, [0.3, 0.0, 0.0]);
        assert_eq!(g[1].0, [0.7, 0.0, 0.0]);
    }

    #[test]
    fn split_composite_matches_whole() {
        let frags: [([f64; 3], f64); 4] = [([0.2, 0.5, 0.9], 0.3), ([0.7, 0.1, 0.4], 0.6), ([0.9, 0.9, 0.1], 0.25), ([0.3, 0.3, 0.3], 1.0)];
        let whole = compose_over(&frags).unwrap();
        for split in 0..=frags.len() {
            let mut a = Composite::default();
            let mut b = Composite::default();
            frags[..split].iter().for_each(|f| a.push(f.0, f.1));
            frags[split..].iter().for_each(|f| b.push(f.0, f.1));
            let joined = a.then(b);
            for c in 0..3 {
                assert!((joined.color[c] - whole.0[c]).abs() < 1e-12);
            }
            assert!((joined.alpha() - whole.1).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_render_reproduces_texture() {
        let (h, w) = (9, 12);
        let depths = DepthLayerSet::constant(1, h, w, &[3.0]).unwrap();
        let tex = pattern(h, w, 1.0, 0);
        let scene = textured(&depths, vec![tex.clone()]);
        let out = render(&scene, &Camera::reference(k(w, h)), (h, w), &RenderOptions::default()).unwrap();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    assert!((out.color.get(y, x, c) - tex.get(y, x, c)).abs() < 1e-9, "({y},{x})");
                }
                assert_eq!(out.alpha.get(y, x, 0), 1.0);
            }
        }
    }

    #[test]
    fn camera_facing_away_sees_nothing() {
        let depths = DepthLayerSet::constant(1, 4, 4, &[3.0]).unwrap();
        let scene = textured(&depths, vec![pattern(4, 4, 1.0, 0)]);
        let turned = RigidPose::new(Mat3::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), std::f64::consts::PI), Vec3::zero()).unwrap();
        let cam = Camera::new(k(4, 4), turned);
        let frags = rasterize(&scene, &cam, (4, 4), &RenderOptions::default()).unwrap();
        assert_eq!(frags.hit_count(), 0);
        let out = render(&scene, &cam, (4, 4), &RenderOptions::default()).unwrap();
        assert!(out.color.data().iter().all(|&v| v == 0.0) && out.alpha.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nearest_triangle_within_layer_wins() {
        // one layer folded over itself: left half of the vertices near, right half far
        let (h, w) = (4, 8);
        let mut d = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                d[y * w + x] = if x < 4 { 2.0 } else { 6.0 };
            }
        }
        let depths = DepthLayerSet::new(1, h, w, d).unwrap();
        let scene = textured(&depths, vec![pattern(h, w, 1.0, 1)]);
        // side camera sees both parts overlapping; check every hit is the minimum over all triangles
        let cam = Camera::new(k(w, h), RigidPose::from_translation(Vec3::new(0.9, 0.0, 0.0)));
        let frags = rasterize(&scene, &cam, (h, w), &RenderOptions { tile_size: 3 }).unwrap();
        let kk = k(w, h);
        for y in 0..h {
            for x in 0..w {
                let q = kk.ray(x as f64, y as f64);
                let mut best = f64::INFINITY;
                for tri in &scene.meshes.triangles {
                    let xs = tri.map(|i| cam.pose.transform(scene.meshes.layers[0].vertices[i as usize]));
                    let b = [q.dot(xs[1].cross(xs[2])), q.dot(xs[2].cross(xs[0])), q.dot(xs[0].cross(xs[1]))];
                    let s = b[0] + b[1] + b[2];
                    if b.iter().all(|v| v / s >= -1e-9) {
                        best = best.min(xs[0].dot(xs[1].cross(xs[2])) / s);
                    }
                }
                let f = frags.get(0, y, x);
                if best.is_finite() {
                    assert!(f.hit() && (f.depth - best).abs() < 1e-9);
                } else {
                    assert!(!f.hit());
                }
            }
        }
    }

    #[test]
    fn tile_size_does_not_change_output() {
        let (h, w) = (13, 17);
        let depths = DepthLayerSet::constant(2, h, w, &[2.0, 5.0]).unwrap();
        let scene = textured(&depths, vec![pattern(h, w, 0.6, 0), pattern(h, w, 1.0, 4)]);
        let cam = Camera::new(
            k(w, h),
            RigidPose::new(Mat3::from_axis_angle(Vec3::new(0.2, 1.0, 0.0), 0.05), Vec3::new(0.2, -0.1, 0.3)).unwrap(),
        );
        let base = render(&scene, &cam, (h, w), &RenderOptions { tile_size: 32 }).unwrap();
        for ts in [1, 4, 5, 16] {
            assert_eq!(render(&scene, &cam, (h, w), &RenderOptions { tile_size: ts }).unwrap(), base);
        }
        let frags = rasterize(&scene, &cam, (h, w), &RenderOptions { tile_size: 7 }).unwrap();
        assert_eq!(composite_layers(&frags), base);
    }

    #[test]
    fn invalid_camera_is_degenerate() {
        let depths = DepthLayerSet::constant(1, 4, 4, &[3.0]).unwrap();
        let scene = textured(&depths, vec![pattern(4, 4, 1.0, 0)]);
        let mut bad = k(4, 4);
        bad.fx = -1.0;
        let r = render(&scene, &Camera::reference(bad), (4, 4), &RenderOptions::default());
        assert!(matches!(r, Err(Error::DegenerateCamera(_))));
    }

    #[test]
    fn occluded_back_layer_gets_no_gradient() {
        let (h, w) = (6, 6);
        let depths = DepthLayerSet::constant(2, h, w, &[2.0, 4.0]).unwrap();
        let scene = textured(&depths, vec![pattern(h, w, 1.0, 0), pattern(h, w, 1.0, 3)]);
        let cam = Camera::new(k(w, h), RigidPose::from_translation(Vec3::new(0.05, 0.02, 0.0)));
        let frags = rasterize(&scene, &cam, (h, w), &RenderOptions::default()).unwrap();
        let up = ImageBuffer::filled(h, w, 3, 1.0);
        let g = render_backward(&scene, &cam, &frags, &up, None).unwrap();
        assert!(g.depths[1].iter().all(|&v| v == 0.0));
        assert!(g.textures[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn opaque_color_gradient_is_identity() {
        let (h, w) = (5, 5);
        let depths = DepthLayerSet::constant(1, h, w, &[2.0]).unwrap();
        let scene = textured(&depths, vec![pattern(h, w, 1.0, 0)]);
        let cam = Camera::reference(k(w, h));
        let frags = rasterize(&scene, &cam, (h, w), &RenderOptions::default()).unwrap();
        let up = ImageBuffer::from_fn(h, w, 3, |y, x, c| (y * 10 + x + c) as f64);
        let g = render_backward(&scene, &cam, &frags, &up, None).unwrap();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    assert!((g.textures[0].get(y, x, c) - up.get(y, x, c)).abs() < 1e-9);
                }
            }
        }
    }
}
