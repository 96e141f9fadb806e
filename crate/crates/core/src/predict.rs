//! Non-learned stand-ins for the geometry and coloring predictors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{group_bounds, BetaVolume, DepthLayerSet, GeometryScheme, SoftAverage};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::psv::{PlaneStack, PlaneSweepVolume};
use crate::scalar::Real;
use crate::texture::{ColorPayload, ColoringOutput, ColoringScheme};

/// Logit standing in for "excluded" in soft aggregation and mixtures.
pub const MASKED_LOGIT: f64 = -1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryPredictor {
    Oracle,
    Photo,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColoringPredictor {
    Oracle,
    Passthrough,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotoOptions {
    /// Softmax temperature on costs.
    pub temperature: f64,
    /// Box-filter radius in pixels.
    pub radius: usize,
}

impl Default for PhotoOptions {
    fn default() -> Self {
        Self { temperature: 0.05, radius: 2 }
    }
}

/// Matching costs, pixel-major `[y][x][plane]`; `None` where a plane has no valid sample in the window.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume<T> {
    pub height: usize,
    pub width: usize,
    pub planes: usize,
    pub costs: Vec<Option<T>>,
}

impl<T: Real> CostVolume<T> {
    pub fn pixel(&self, i: usize) -> &[Option<T>] {
        &self.costs[i * self.planes..(i + 1) * self.planes]
    }

    /// Index of the cheapest valid plane per pixel (first on ties).
    pub fn argmin(&self) -> Vec<Option<usize>> {
        (0..self.height * self.width)
            .map(|i| {
                let mut best: Option<(usize, T)> = None;
                for (k, c) in self.pixel(i).iter().enumerate() {
                    if let Some(c) = *c {
                        if best.is_none_or(|(_, b)| c < b) {
                            best = Some((k, c));
                        }
                    }
                }
                best.map(|b| b.0)
            })
            .collect()
    }
}

/// Box-filtered mean absolute difference between every slab and the reference.
pub fn photo_costs<T: Real>(psv: &PlaneSweepVolume<T>, radius: usize) -> CostVolume<T> {
    let (h, w, p) = (psv.height(), psv.width(), psv.slabs.len());
    let per_plane: Vec<Vec<Option<T>>> = (0..p)
        .into_par_iter()
        .map(|k| {
            let slab = &psv.slabs[k];
            let valid = &psv.validity[k];
            // summed-area tables of the per-pixel error and the valid count
            let (sh, sw) = (h + 1, w + 1);
            let mut err = vec![0.0f64; sh * sw];
            let mut cnt = vec![0u32; sh * sw];
            for y in 0..h {
                for x in 0..w {
                    let (e, c) = if valid.get(y, x) {
                        let e: f64 = (0..3).map(|c| (slab.get(y, x, c) - psv.reference.get(y, x, c)).abs().as_f64()).sum::<f64>() / 3.0;
                        (e, 1)
                    } else {
                        (0.0, 0)
                    };
                    let i = (y + 1) * sw + x + 1;
                    err[i] = e + err[i - 1] + err[i - sw] - err[i - sw - 1];
                    cnt[i] = c + cnt[i - 1] + cnt[i - sw] - cnt[i - sw - 1];
                }
            }
            let mut out = vec![None; h * w];
            for y in 0..h {
                let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
                for x in 0..w {
                    let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
                    let n = cnt[y1 * sw + x1] + cnt[y0 * sw + x0] - cnt[y0 * sw + x1] - cnt[y1 * sw + x0];
                    if n > 0 {
                        let e = err[y1 * sw + x1] + err[y0 * sw + x0] - err[y0 * sw + x1] - err[y1 * sw + x0];
                        out[y * w + x] = Some(T::lit(e.max(0.0) / n as f64));
                    }
                }
            }
            out
        })
        .collect();
    let mut costs = Vec::with_capacity(h * w * p);
    for i in 0..h * w {
        costs.extend(per_plane.iter().map(|c| c[i]));
    }
    CostVolume { height: h, width: w, planes: p, costs }
}

/// Geometry output plus the number of pixels that had no valid sample at all.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryPrediction<T> {
    pub beta: BetaVolume<T>,
    pub all_invalid: usize,
}

/// Softmax of `-cost / τ` over the valid entries; uniform when none is valid or all costs tie.
fn cost_weights(costs: &[Option<f64>], temperature: f64) -> Vec<f64> {
    let valid: Vec<f64> = costs.iter().flatten().copied().collect();
    let n = costs.len();
    if valid.is_empty() {
        return vec![1.0 / n as f64; n];
    }
    let lo = valid.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = costs.iter().map(|c| c.map_or(0.0, |c| (-(c - lo) / temperature).exp())).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Over-compositing opacities that reproduce the given weights; the last entry is 1.
pub fn weights_to_opacities(weights: &[f64]) -> Vec<f64> {
    let mut remaining = 1.0;
    let n = weights.len();
    weights
        .iter()
        .enumerate()
        .map(|(k, &w)| {
            if k + 1 == n {
                return 1.0;
            }
            let b = if remaining > 1e-15 { (w / remaining).clamp(0.0, 1.0) } else { 1.0 };
            remaining -= w;
            b
        })
        .collect()
}

fn bi_beta(depth: f64, near: f64, far: f64) -> f64 {
    ((far - depth) / (far - near)).clamp(0.0, 1.0)
}

/// Converts per-pixel plane costs into a volume for `scheme`; `None` costs are excluded.
fn beta_from_costs<T: Real>(costs: &CostVolume<T>, planes: &PlaneStack<T>, scheme: GeometryScheme, layers: usize, temperature: f64) -> Result<BetaVolume<T>> {
    let (h, w, p) = (costs.height, costs.width, costs.planes);
    group_bounds(p, layers, 1)?;
    let size = p / layers;
    let d: Vec<f64> = planes.depths().iter().map(|v| v.as_f64()).collect();
    let (near, far) = (d[0], d[p - 1]);
    let per_pixel: Vec<Vec<T>> = (0..h * w)
        .into_par_iter()
        .map(|i| {
            let px: Vec<Option<f64>> = costs.pixel(i).iter().map(|c| c.map(|v| v.as_f64())).collect();
            let mut out = Vec::new();
            for j in 0..layers {
                let g = &px[j * size..(j + 1) * size];
                match scheme {
                    GeometryScheme::Gc => out.extend(weights_to_opacities(&cost_weights(g, temperature)).into_iter().map(T::lit)),
                    GeometryScheme::Sa => {
                        let uniform = g.iter().flatten().count() == 0;
                        for k in 0..p {
                            let inside = k / size == j;
                            let v = match (inside, px[k]) {
                                (true, Some(c)) => -c / temperature,
                                (true, None) if uniform => 0.0,
                                _ => MASKED_LOGIT,
                            };
                            out.push(T::lit(v));
                        }
                    }
                    GeometryScheme::Bi => {
                        let valid: Vec<(usize, f64)> = g.iter().enumerate().filter_map(|(k, c)| c.map(|c| (k, c))).collect();
                        let lo = valid.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
                        let hi = valid.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
                        let group = &d[j * size..(j + 1) * size];
                        let depth = if valid.is_empty() || hi - lo <= 1e-12 {
                            group.iter().sum::<f64>() / size as f64
                        } else {
                            let k = valid.iter().find(|v| v.1 == lo).expect("nonempty").0;
                            group[k]
                        };
                        out.push(T::lit(bi_beta(depth, near, far)));
                    }
                }
            }
            out
        })
        .collect();
    let data = per_pixel.into_iter().flatten().collect();
    match scheme {
        GeometryScheme::Gc => BetaVolume::gc(h, w, p, data),
        GeometryScheme::Sa => BetaVolume::sa(h, w, layers, p, data),
        GeometryScheme::Bi => BetaVolume::bi(h, w, layers, data),
    }
}

/// Plane-sweep photoconsistency heuristic.
pub fn predict_geometry_photoconsistency<T: Real>(
    psv: &PlaneSweepVolume<T>,
    scheme: GeometryScheme,
    layers: usize,
    opts: &PhotoOptions,
) -> Result<GeometryPrediction<T>> {
    let costs = photo_costs(psv, opts.radius);
    let all_invalid = (0..costs.height * costs.width).filter(|&i| costs.pixel(i).iter().all(Option::is_none)).count();
    let beta = beta_from_costs(&costs, &psv.planes, scheme, layers, opts.temperature)?;
    Ok(GeometryPrediction { beta, all_invalid })
}

/// Uniform weights everywhere: every layer sits at its group's mean.
pub fn predict_geometry_constant<T: Real>(
    planes: &PlaneStack<T>,
    size: (usize, usize),
    scheme: GeometryScheme,
    layers: usize,
) -> Result<BetaVolume<T>> {
    let costs = CostVolume { height: size.0, width: size.1, planes: planes.len(), costs: vec![Some(T::zero()); size.0 * size.1 * planes.len()] };
    beta_from_costs(&costs, planes, scheme, layers, 1.0)
}

/// Volume that the matching aggregation maps back onto `gt` (clamped to each group for GC).
pub fn predict_geometry_oracle<T: Real>(
    gt: &DepthLayerSet<T>,
    planes: &PlaneStack<T>,
    scheme: GeometryScheme,
    average: SoftAverage,
) -> Result<BetaVolume<T>> {
    let (l, h, w, p) = (gt.layers(), gt.height(), gt.width(), planes.len());
    let d: Vec<f64> = planes.depths().iter().map(|v| v.as_f64()).collect();
    let (near, far) = (d[0], d[p - 1]);
    let tol = 1e-9 * far;
    if let Some(bad) = gt.data().iter().map(|v| v.as_f64()).find(|&z| !(z >= near - tol && z <= far + tol)) {
        return Err(Error::DepthOutOfRange { depth: bad, near, far });
    }
    if scheme == GeometryScheme::Gc {
        group_bounds(p, l, 1)?;
    }
    let size = p / l.max(1);
    // two adjacent planes bracketing z inside `r`, and the weight of the nearer one
    let bracket = |z: f64, r: std::ops::Range<usize>, inverse: bool| -> (usize, f64) {
        let z = z.clamp(d[r.start], d[r.end - 1]);
        if r.len() == 1 {
            return (r.start, 1.0);
        }
        let k = (r.start..r.end - 1).find(|&k| z <= d[k + 1]).unwrap_or(r.end - 2);
        let b = if inverse { (1.0 / z - 1.0 / d[k + 1]) / (1.0 / d[k] - 1.0 / d[k + 1]) } else { (d[k + 1] - z) / (d[k + 1] - d[k]) };
        (k, b.clamp(0.0, 1.0))
    };
    let mut data = Vec::new();
    for y in 0..h {
        for x in 0..w {
            for j in 0..l {
                let z = gt.get(j, y, x).as_f64();
                match scheme {
                    GeometryScheme::Bi => data.push(T::lit(bi_beta(z.clamp(near, far), near, far))),
                    GeometryScheme::Gc => {
                        let r = j * size..(j + 1) * size;
                        let (k, b) = bracket(z, r.clone(), false);
                        data.extend(r.map(|m| T::lit(if m < k { 0.0 } else if m == k { b } else { 1.0 })));
                    }
                    GeometryScheme::Sa => {
                        let (k, b) = bracket(z, 0..p, average == SoftAverage::InverseDepth);
                        let logit = |v: f64| if v > 0.0 { v.ln().max(MASKED_LOGIT) } else { MASKED_LOGIT };
                        data.extend((0..p).map(|m| {
                            T::lit(if m == k {
                                logit(b)
                            } else if m == k + 1 {
                                logit(1.0 - b)
                            } else {
                                MASKED_LOGIT
                            })
                        }));
                    }
                }
            }
        }
    }
    match scheme {
        GeometryScheme::Gc => BetaVolume::gc(h, w, p, data),
        GeometryScheme::Sa => BetaVolume::sa(h, w, l, p, data),
        GeometryScheme::Bi => BetaVolume::bi(h, w, l, data),
    }
}

/// RAW colors and opacities copied from ground-truth RGBA layers.
pub fn predict_coloring_oracle<T: Real>(gt_textures: &[ImageBuffer<T>]) -> Result<ColoringOutput<T>> {
    let first = gt_textures.first().ok_or(Error::InvalidScene("no ground-truth layers".into()))?;
    let (h, w) = (first.height(), first.width());
    let colors = gt_textures.iter().map(|t| t.select_channels(&[0, 1, 2])).collect();
    let alphas = gt_textures.iter().map(|t| t.select_channels(&[3])).collect();
    ColoringOutput::new(h, w, gt_textures.len(), ColorPayload::Raw { colors }, alphas)
}

/// Colors taken straight from the inputs; opacities from how well each layer's
/// depth explains the stereo pair.
///
/// Per pixel, layer `j` scores the matching cost of the plane nearest its depth;
/// a softmax over layers is turned into over-compositing opacities.
pub fn predict_coloring_passthrough<T: Real>(
    psv: &PlaneSweepVolume<T>,
    depths: &DepthLayerSet<T>,
    scheme: ColoringScheme,
    opts: &PhotoOptions,
) -> Result<ColoringOutput<T>> {
    let (h, w, l) = (psv.height(), psv.width(), depths.layers());
    if depths.height() != h || depths.width() != w {
        return Err(Error::ShapeMismatch("layer grid must match the plane sweep resolution".into()));
    }
    let costs = photo_costs(psv, opts.radius);
    let d = psv.planes.depths();
    let mut alphas = vec![ImageBuffer::zeros(h, w, 1); l];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let layer_costs: Vec<Option<f64>> = (0..l)
                .map(|j| {
                    let z = depths.get(j, y, x);
                    let k = (0..d.len()).min_by(|&a, &b| (d[a] - z).abs().partial_cmp(&(d[b] - z).abs()).expect("finite")).expect("planes");
                    costs.pixel(i)[k].map(|c| c.as_f64())
                })
                .collect();
            for (j, a) in weights_to_opacities(&cost_weights(&layer_costs, opts.temperature)).into_iter().enumerate() {
                alphas[j].set(y, x, 0, T::lit(a));
            }
        }
    }
    let masked = T::lit(MASKED_LOGIT);
    let payload = match scheme {
        ColoringScheme::Rsbg => ColorPayload::Rsbg {
            background: psv.reference.clone(),
            weights: (0..l * h * w).flat_map(|_| [T::zero(), T::zero(), masked]).collect(),
        },
        ColoringScheme::Rbg => ColorPayload::Rbg { background: psv.reference.clone(), weights: (0..l * h * w).flat_map(|_| [T::zero(), masked]).collect() },
        ColoringScheme::Raw => ColorPayload::Raw { colors: vec![psv.reference.clone(); l] },
    };
    ColoringOutput::new(h, w, l, payload, alphas)
}
