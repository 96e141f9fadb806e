//! Geometry aggregation: turns predictor volumes into layer depth grids.
//!
//! Three encodings are supported:
//! * group compositing (GC): per-plane opacities over-composited within
//!   `L` equal plane groups, the farthest plane of each group forced opaque;
//! * soft aggregation (SA): per-layer softmax weights over all plane depths;
//! * bounds interpolation (BI): per-layer blend of the nearest and farthest plane.
//!
//! Every scheme has an analytic Jacobian of the output depths with respect
//! to the volume entries. Each output depth depends on a disjoint block of
//! entries, so the Jacobian is stored in the same layout as the volume.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::psv::PlaneStack;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryScheme {
    Gc,
    Sa,
    Bi,
}

impl fmt::Display for GeometryScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gc => "gc",
            Self::Sa => "sa",
            Self::Bi => "bi",
        })
    }
}

/// Depth space in which soft aggregation averages plane depths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoftAverage {
    #[default]
    Depth,
    InverseDepth,
}

/// Raw geometry-predictor output, pixel-major (`[y][x][channel]`).
///
/// Channels per pixel: GC `P`, SA `L * P` (layer-major), BI `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaVolume<T> {
    scheme: GeometryScheme,
    height: usize,
    width: usize,
    layers: usize,
    planes: usize,
    data: Vec<T>,
}

impl<T: Real> BetaVolume<T> {
    pub fn gc(height: usize, width: usize, planes: usize, data: Vec<T>) -> Result<Self> {
        Self::build(GeometryScheme::Gc, height, width, 0, planes, data)
    }

    pub fn sa(height: usize, width: usize, layers: usize, planes: usize, data: Vec<T>) -> Result<Self> {
        Self::build(GeometryScheme::Sa, height, width, layers, planes, data)
    }

    pub fn bi(height: usize, width: usize, layers: usize, data: Vec<T>) -> Result<Self> {
        Self::build(GeometryScheme::Bi, height, width, layers, 0, data)
    }

    fn build(scheme: GeometryScheme, height: usize, width: usize, layers: usize, planes: usize, data: Vec<T>) -> Result<Self> {
        let v = Self { scheme, height, width, layers, planes, data };
        if v.data.len() != height * width * v.channels() {
            return Err(Error::ShapeMismatch(format!(
                "{scheme} volume {height}x{width}x{} needs {} values, got {}",
                v.channels(),
                height * width * v.channels(),
                v.data.len()
            )));
        }
        match scheme {
            GeometryScheme::Gc | GeometryScheme::Bi => {
                if let Some(bad) = v.data.iter().find(|b| !(**b >= T::zero() && **b <= T::one())) {
                    return Err(Error::BetaOutOfRange(bad.as_f64()));
                }
            }
            GeometryScheme::Sa => {
                if v.data.iter().any(|b| b.is_nan() || *b == T::infinity()) {
                    return Err(Error::ShapeMismatch("soft-aggregation logits must not be NaN or +inf".into()));
                }
            }
        }
        Ok(v)
    }

    pub fn scheme(&self) -> GeometryScheme {
        self.scheme
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Values per pixel.
    pub fn channels(&self) -> usize {
        match self.scheme {
            GeometryScheme::Gc => self.planes,
            GeometryScheme::Sa => self.layers * self.planes,
            GeometryScheme::Bi => self.layers,
        }
    }

    pub fn pixel(&self, i: usize) -> &[T] {
        let c = self.channels();
        &self.data[i * c..(i + 1) * c]
    }

    /// Replaces one entry, keeping the scheme's validity rules.
    pub fn with_value(&self, index: usize, value: T) -> Result<Self> {
        let mut data = self.data.clone();
        data[index] = value;
        Self::build(self.scheme, self.height, self.width, self.layers, self.planes, data)
    }
}

/// `L` depth grids of `h x w`, layer-major (`[layer][y][x]`), layer 0 nearest by convention.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthLayerSet<T> {
    layers: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
    pub scheme: Option<GeometryScheme>,
}

impl<T: Real> DepthLayerSet<T> {
    pub fn new(layers: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != layers * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{layers} layers of {height}x{width} need {} depths, got {}",
                layers * height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|d| !(**d > T::zero()) || !d.is_finite()) {
            return Err(Error::NonPositiveDepth(bad.as_f64()));
        }
        Ok(Self { layers, height, width, data, scheme: None })
    }

    pub fn constant(layers: usize, height: usize, width: usize, depths: &[T]) -> Result<Self> {
        let data = (0..layers).flat_map(|l| std::iter::repeat_n(depths[l], height * width)).collect();
        Self::new(layers, height, width, data)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn layer(&self, l: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[l * n..(l + 1) * n]
    }

    #[inline]
    pub fn get(&self, l: usize, y: usize, x: usize) -> T {
        self.data[(l * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, l: usize, y: usize, x: usize, v: T) {
        self.data[(l * self.height + y) * self.width + x] = v;
    }

    /// True when `d_1 <= d_2 <= ... <= d_L` holds at every pixel.
    pub fn is_ordered(&self) -> bool {
        let n = self.height * self.width;
        (0..n).all(|i| (1..self.layers).all(|l| self.data[(l - 1) * n + i] <= self.data[l * n + i]))
    }
}

/// One-based bounding plane indices `(I⁻, I⁺)` of group `j` (one-based).
pub fn group_bounds(planes: usize, layers: usize, j: usize) -> Result<(usize, usize)> {
    if layers == 0 || planes % layers != 0 {
        return Err(Error::IndivisibleGroups { planes, layers });
    }
    if j == 0 || j > layers {
        return Err(Error::LayerIndexOutOfRange { index: j, layers });
    }
    let size = planes / layers;
    Ok((1 + (j - 1) * size, j * size))
}

/// Front-to-back over-compositing weights within one group; the last opacity is treated as 1.
pub fn group_weights<T: Real>(betas: &[T]) -> Vec<T> {
    let mut weights = Vec::with_capacity(betas.len());
    let mut transmittance = T::one();
    for (k, &b) in betas.iter().enumerate() {
        let b = if k + 1 == betas.len() { T::one() } else { b };
        weights.push(b * transmittance);
        transmittance *= T::one() - b;
    }
    weights
}

/// Over-composites a group's plane depths; the last opacity is treated as 1.
#[inline]
pub fn compose_group_depth<T: Real>(depths: &[T], betas: &[T]) -> T {
    let n = depths.len();
    let mut acc = T::zero();
    let mut transmittance = T::one();
    for k in 0..n {
        let b = if k + 1 == n { T::one() } else { betas[k] };
        acc += depths[k] * b * transmittance;
        transmittance *= T::one() - b;
    }
    acc
}

/// `∂ d̂ / ∂β_k` for one group, written into `out` (the forced entry gets 0).
///
/// With `T_k` the transmittance in front of plane `k` and `S_k` the composite of
/// the planes behind it, `d̂ = prefix + T_k (β_k d_k + (1 − β_k) S_k)`, so the
/// partial is `T_k (d_k − S_k)`.
pub fn compose_group_jacobian<T: Real>(depths: &[T], betas: &[T], out: &mut [T]) {
    let n = depths.len();
    out[n - 1] = T::zero();
    if n == 1 {
        return;
    }
    let mut behind = vec![T::zero(); n];
    behind[n - 2] = depths[n - 1];
    for k in (0..n - 2).rev() {
        let b = betas[k + 1];
        behind[k] = b * depths[k + 1] + (T::one() - b) * behind[k + 1];
    }
    let mut transmittance = T::one();
    for k in 0..n - 1 {
        out[k] = transmittance * (depths[k] - behind[k]);
        transmittance *= T::one() - betas[k];
    }
}

fn softmax_into<T: Real>(logits: &[T], out: &mut [T]) {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax over a slice.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    softmax_into(logits, &mut out);
    out
}

fn soft_depth<T: Real>(logits: &[T], depths: &[T], average: SoftAverage, weights: &mut [T]) -> T {
    softmax_into(logits, weights);
    match average {
        SoftAverage::Depth => weights.iter().zip(depths).map(|(&w, &d)| w * d).sum(),
        SoftAverage::InverseDepth => {
            let inv: T = weights.iter().zip(depths).map(|(&w, &d)| w / d).sum();
            T::one() / inv
        }
    }
}

fn check_scheme<T: Real>(beta: &BetaVolume<T>, want: GeometryScheme) -> Result<()> {
    if beta.scheme != want {
        return Err(Error::ShapeMismatch(format!("expected a {want} volume, got {}", beta.scheme)));
    }
    Ok(())
}

fn check_planes<T: Real>(beta: &BetaVolume<T>, planes: &PlaneStack<T>) -> Result<()> {
    if beta.planes != planes.len() {
        return Err(Error::ShapeMismatch(format!("volume has {} planes, stack has {}", beta.planes, planes.len())));
    }
    Ok(())
}

/// Scatters per-pixel layer values into a layer-major grid.
fn collect_layers<T: Real>(
    beta: &BetaVolume<T>,
    layers: usize,
    scheme: GeometryScheme,
    per_pixel: impl Fn(&[T], &mut [T]) + Sync,
) -> Result<DepthLayerSet<T>> {
    let n = beta.height * beta.width;
    let pixels: Vec<T> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut out = vec![T::zero(); layers];
            per_pixel(beta.pixel(i), &mut out);
            out
        })
        .collect();
    let mut data = vec![T::zero(); n * layers];
    for i in 0..n {
        for l in 0..layers {
            data[l * n + i] = pixels[i * layers + l];
        }
    }
    let mut set = DepthLayerSet::new(layers, beta.height, beta.width, data)?;
    set.scheme = Some(scheme);
    Ok(set)
}

pub fn aggregate_gc<T: Real>(beta: &BetaVolume<T>, planes: &PlaneStack<T>, layers: usize) -> Result<DepthLayerSet<T>> {
    check_scheme(beta, GeometryScheme::Gc)?;
    check_planes(beta, planes)?;
    group_bounds(planes.len(), layers, 1)?;
    let size = planes.len() / layers;
    let d = planes.depths();
    collect_layers(beta, layers, GeometryScheme::Gc, |px, out| {
        for (j, o) in out.iter_mut().enumerate() {
            let r = j * size..(j + 1) * size;
            *o = compose_group_depth(&d[r.clone()], &px[r]);
        }
    })
}

pub fn aggregate_sa<T: Real>(logits: &BetaVolume<T>, planes: &PlaneStack<T>, average: SoftAverage) -> Result<DepthLayerSet<T>> {
    check_scheme(logits, GeometryScheme::Sa)?;
    check_planes(logits, planes)?;
    let p = planes.len();
    let d = planes.depths();
    let (lo, hi) = (planes.nearest(), planes.farthest());
    collect_layers(logits, logits.layers, GeometryScheme::Sa, |px, out| {
        let mut w = vec![T::zero(); p];
        for (j, o) in out.iter_mut().enumerate() {
            // rounding can leave the average an ulp outside the range
            *o = soft_depth(&px[j * p..(j + 1) * p], d, average, &mut w).max(lo).min(hi);
        }
    })
}

pub fn aggregate_bi<T: Real>(beta: &BetaVolume<T>, planes: &PlaneStack<T>) -> Result<DepthLayerSet<T>> {
    check_scheme(beta, GeometryScheme::Bi)?;
    let (near, far) = (planes.nearest(), planes.farthest());
    collect_layers(beta, beta.layers, GeometryScheme::Bi, |px, out| {
        for (o, &b) in out.iter_mut().zip(px) {
            *o = b * near + (T::one() - b) * far;
        }
    })
}

/// Options shared by the scheme dispatchers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateOptions {
    /// Layer count for GC (SA/BI read it from the volume).
    pub layers: usize,
    pub soft_average: SoftAverage,
}

pub fn aggregate<T: Real>(beta: &BetaVolume<T>, planes: &PlaneStack<T>, opts: AggregateOptions) -> Result<DepthLayerSet<T>> {
    match beta.scheme {
        GeometryScheme::Gc => aggregate_gc(beta, planes, opts.layers),
        GeometryScheme::Sa => aggregate_sa(beta, planes, opts.soft_average),
        GeometryScheme::Bi => aggregate_bi(beta, planes),
    }
}

/// Nonzero partials `∂d̂/∂β`, laid out like the volume: entry `i` is the
/// derivative of the single output depth that volume entry `i` feeds.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthJacobian<T> {
    pub scheme: GeometryScheme,
    pub layers: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> DepthJacobian<T> {
    /// Layer fed by channel `c` of a pixel.
    pub fn layer_of_channel(&self, c: usize) -> usize {
        match self.scheme {
            GeometryScheme::Gc => c / (self.channels / self.layers),
            GeometryScheme::Sa => c / (self.channels / self.layers),
            GeometryScheme::Bi => c,
        }
    }

    /// Vector-Jacobian product: `∂loss/∂β` from `∂loss/∂d̂`.
    pub fn pullback(&self, upstream: &DepthLayerSet<T>) -> Vec<T> {
        let n = upstream.height() * upstream.width();
        let mut out = vec![T::zero(); self.data.len()];
        for i in 0..n {
            for c in 0..self.channels {
                let l = self.layer_of_channel(c);
                out[i * self.channels + c] = self.data[i * self.channels + c] * upstream.data()[l * n + i];
            }
        }
        out
    }
}

pub fn jacobian<T: Real>(beta: &BetaVolume<T>, planes: &PlaneStack<T>, opts: AggregateOptions) -> Result<DepthJacobian<T>> {
    let ch = beta.channels();
    let n = beta.height * beta.width;
    let d = planes.depths();
    let (layers, data) = match beta.scheme {
        GeometryScheme::Gc => {
            check_planes(beta, planes)?;
            group_bounds(planes.len(), opts.layers, 1)?;
            let size = planes.len() / opts.layers;
            let mut data = vec![T::zero(); n * ch];
            data.par_chunks_mut(ch).enumerate().for_each(|(i, out)| {
                let px = beta.pixel(i);
                for j in 0..opts.layers {
                    let r = j * size..(j + 1) * size;
                    compose_group_jacobian(&d[r.clone()], &px[r.clone()], &mut out[r]);
                }
            });
            (opts.layers, data)
        }
        GeometryScheme::Sa => {
            check_planes(beta, planes)?;
            let p = planes.len();
            let mut data = vec![T::zero(); n * ch];
            data.par_chunks_mut(ch).enumerate().for_each(|(i, out)| {
                let px = beta.pixel(i);
                let mut w = vec![T::zero(); p];
                for j in 0..beta.layers {
                    let z = &px[j * p..(j + 1) * p];
                    let dhat = soft_depth(z, d, opts.soft_average, &mut w);
                    for k in 0..p {
                        out[j * p + k] = match opts.soft_average {
                            SoftAverage::Depth => w[k] * (d[k] - dhat),
                            // d̂ = 1 / Σ w/d  ⇒  ∂d̂/∂z_k = −d̂² w_k (1/d_k − 1/d̂)
                            SoftAverage::InverseDepth => -dhat * dhat * w[k] * (T::one() / d[k] - T::one() / dhat),
                        };
                    }
                }
            });
            (beta.layers, data)
        }
        GeometryScheme::Bi => (beta.layers, vec![planes.nearest() - planes.farthest(); n * ch]),
    };
    Ok(DepthJacobian { scheme: beta.scheme, layers, channels: ch, data })
}
