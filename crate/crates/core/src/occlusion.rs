//! Dense correspondence fields in absolute coordinates, cycle consistency and occlusion masks.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{axis_cell, ImageBuffer, Mask};
use crate::io;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlowDirection {
    /// `F[q]` holds the source coordinate read by target pixel `q`.
    #[default]
    Backward,
    /// `F[p]` holds where source pixel `p` lands in the target.
    Forward,
}

/// `H x W` field of absolute `(x, y)` coordinates with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T> {
    pub coords: ImageBuffer<T>,
    pub valid: Mask,
    pub direction: FlowDirection,
}

impl<T: Real> FlowField<T> {
    pub fn new(coords: ImageBuffer<T>, valid: Mask, direction: FlowDirection) -> Result<Self> {
        if coords.channels() != 2 || valid.height() != coords.height() || valid.width() != coords.width() {
            return Err(Error::ShapeMismatch("flow needs H x W x 2 coordinates and a matching mask".into()));
        }
        for y in 0..coords.height() {
            for x in 0..coords.width() {
                if valid.get(y, x) && !(coords.get(y, x, 0).is_finite() && coords.get(y, x, 1).is_finite()) {
                    return Err(Error::ShapeMismatch(format!("non-finite flow at valid pixel ({y}, {x})")));
                }
            }
        }
        Ok(Self { coords, valid, direction })
    }

    pub fn height(&self) -> usize {
        self.coords.height()
    }

    pub fn width(&self) -> usize {
        self.coords.width()
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> [T; 2] {
        [self.coords.get(y, x, 0), self.coords.get(y, x, 1)]
    }

    /// Builds a field from displacement vectors `F[p] − p`.
    pub fn from_offsets(offsets: &ImageBuffer<T>, valid: Mask, direction: FlowDirection) -> Result<Self> {
        let coords = ImageBuffer::from_fn(offsets.height(), offsets.width(), 2, |y, x, c| {
            offsets.get(y, x, c) + T::from_usize_lossy(if c == 0 { x } else { y })
        });
        Self::new(coords, valid, direction)
    }

    /// Displacements `F[p] − p`.
    pub fn to_offsets(&self) -> ImageBuffer<T> {
        ImageBuffer::from_fn(self.height(), self.width(), 2, |y, x, c| {
            self.coords.get(y, x, c) - T::from_usize_lossy(if c == 0 { x } else { y })
        })
    }
}

/// `G[p] = p`.
pub fn coordinate_grid<T: Real>(height: usize, width: usize) -> Result<FlowField<T>> {
    if height == 0 || width == 0 {
        return Err(Error::DegenerateGrid { height, width });
    }
    let coords = ImageBuffer::from_fn(height, width, 2, |y, x, c| T::from_usize_lossy(if c == 0 { x } else { y }));
    Ok(FlowField { coords, valid: Mask::new(height, width, true), direction: FlowDirection::Backward })
}

/// Bilinear read of `src` at `p`; `None` outside the image or when a contributing
/// corner is masked out.
fn read<T: Real>(src: &ImageBuffer<T>, src_valid: Option<&Mask>, p: [T; 2], out: &mut [T]) -> bool {
    let tol = T::geometric_tolerance();
    if !src.sample_snapped_into(p[0], p[1], tol, out) {
        return false;
    }
    let Some(mask) = src_valid else { return true };
    let (x0, x1, fx) = axis_cell(p[0], src.width());
    let (y0, y1, fy) = axis_cell(p[1], src.height());
    let corners = [(y0, x0, true), (y0, x1, fx > T::zero()), (y1, x0, fy > T::zero()), (y1, x1, fx > T::zero() && fy > T::zero())];
    corners.iter().all(|&(y, x, used)| !used || mask.get(y, x))
}

/// `out[q] = src[flow[q]]` with bilinear interpolation.
pub fn backward_warp<T: Real>(src: &ImageBuffer<T>, flow: &FlowField<T>) -> (ImageBuffer<T>, Mask) {
    warp_impl(src, None, flow)
}

fn warp_impl<T: Real>(src: &ImageBuffer<T>, src_valid: Option<&Mask>, flow: &FlowField<T>) -> (ImageBuffer<T>, Mask) {
    let (h, w, c) = (flow.height(), flow.width(), src.channels());
    let rows: Vec<(Vec<T>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut vals = vec![T::zero(); w * c];
            let mut ok = vec![false; w];
            for x in 0..w {
                if flow.valid.get(y, x) {
                    ok[x] = read(src, src_valid, flow.at(y, x), &mut vals[x * c..(x + 1) * c]);
                    if !ok[x] {
                        vals[x * c..(x + 1) * c].iter_mut().for_each(|v| *v = T::zero());
                    }
                }
            }
            (vals, ok)
        })
        .collect();
    let mut data = Vec::with_capacity(h * w * c);
    let mut valid = Vec::with_capacity(h * w);
    for (v, m) in rows {
        data.extend(v);
        valid.extend(m);
    }
    (ImageBuffer::from_vec(h, w, c, data).expect("shape"), Mask::from_vec(h, w, valid).expect("shape"))
}

/// Warps one flow field by another; samples touching invalid source entries are invalid.
pub fn backward_warp_flow<T: Real>(src: &FlowField<T>, flow: &FlowField<T>) -> FlowField<T> {
    let (coords, valid) = warp_impl(&src.coords, Some(&src.valid), flow);
    FlowField { coords, valid, direction: src.direction }
}

/// `|Ĝ[p] − p|` with `Ĝ = backward(F_rn, F_nr)`, on the grid of `f_nr`.
///
/// `f_nr` lives on the reference grid and points into the novel image;
/// `f_rn` lives on the novel grid and points back. The returned mask marks
/// pixels where the composition could be evaluated.
pub fn cycle_residual<T: Real>(f_rn: &FlowField<T>, f_nr: &FlowField<T>) -> Result<(ImageBuffer<T>, Mask)> {
    if f_rn.direction != f_nr.direction {
        return Err(Error::ConventionMismatch("flows must share one direction".into()));
    }
    if f_rn.direction != FlowDirection::Backward {
        return Err(Error::ConventionMismatch("cycle residual expects backward flows".into()));
    }
    let g_hat = backward_warp_flow(f_rn, f_nr);
    let (h, w) = (g_hat.height(), g_hat.width());
    let residual = ImageBuffer::from_fn(h, w, 1, |y, x, _| {
        if g_hat.valid.get(y, x) {
            let dx = g_hat.coords.get(y, x, 0) - T::from_usize_lossy(x);
            let dy = g_hat.coords.get(y, x, 1) - T::from_usize_lossy(y);
            (dx * dx + dy * dy).sqrt()
        } else {
            T::infinity()
        }
    });
    Ok((residual, g_hat.valid))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask {
    /// Cropped mask; `true` = occluded.
    pub mask: Mask,
    pub epsilon: f64,
    pub margin: usize,
    /// Masked pixels over crop pixels.
    pub fraction: f64,
}

pub const DEFAULT_EPSILON: f64 = 1.0;
pub const DEFAULT_CROP_MARGIN: usize = 16;

/// A pixel is occluded iff its cycle residual is at least `epsilon`; pixels
/// whose composition leaves the image count as occluded.
pub fn occlusion_mask<T: Real>(f_rn: &FlowField<T>, f_nr: &FlowField<T>, epsilon: f64, margin: usize) -> Result<OcclusionMask> {
    let (residual, _) = cycle_residual(f_rn, f_nr)?;
    let (h, w) = (residual.height(), residual.width());
    if 2 * margin >= h.min(w) {
        return Err(Error::CropTooLarge { margin, height: h, width: w });
    }
    let (ch, cw) = (h - 2 * margin, w - 2 * margin);
    let mut mask = Mask::new(ch, cw, false);
    for y in 0..ch {
        for x in 0..cw {
            let r = residual.get(y + margin, x + margin, 0).as_f64();
            mask.set(y, x, !(r < epsilon));
        }
    }
    let fraction = mask.fraction();
    Ok(OcclusionMask { mask, epsilon, margin, fraction })
}

/// Writes a flow as a 3-channel PFM: x, y, validity (1 or 0).
pub fn write_flow_pfm<T: Real>(path: impl AsRef<Path>, flow: &FlowField<T>) -> Result<()> {
    io::write_pfm(path, &flow_to_image(flow))
}

pub fn flow_to_image<T: Real>(flow: &FlowField<T>) -> ImageBuffer<T> {
    ImageBuffer::from_fn(flow.height(), flow.width(), 3, |y, x, c| match c {
        2 => if flow.valid.get(y, x) { T::one() } else { T::zero() },
        _ if flow.valid.get(y, x) => flow.coords.get(y, x, c),
        _ => T::zero(),
    })
}

/// Reads a backward flow written by [`write_flow_pfm`]. A grayscale file is rejected.
pub fn read_flow_pfm<T: Real>(path: impl AsRef<Path>) -> Result<FlowField<T>> {
    let img: ImageBuffer<T> = io::read_pfm(path)?;
    if img.channels() != 3 {
        return Err(Error::Format("flow PFM must have 3 channels (x, y, validity)".into()));
    }
    let (h, w) = (img.height(), img.width());
    let mut valid = Mask::new(h, w, false);
    for y in 0..h {
        for x in 0..w {
            let ok = img.get(y, x, 2) > T::zero() && img.get(y, x, 0).is_finite() && img.get(y, x, 1).is_finite();
            valid.set(y, x, ok);
        }
    }
    FlowField::new(img.select_channels(&[0, 1]), valid, FlowDirection::Backward)
}
