//! Training losses with analytic gradients, and image quality metrics.

use rayon::prelude::*;

use crate::aggregate::DepthLayerSet;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::scalar::Real;

/// PSNR reported for identical images.
pub const PSNR_CEILING: f64 = 99.0;

/// A loss value with its gradient laid out like the input's data.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport<T> {
    pub value: T,
    pub gradient: Vec<T>,
}

/// Relative weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub tv: f64,
    pub ordering: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 1.0, tv: 5.0, ordering: 2.0 }
    }
}

fn same_shape<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Mean absolute difference; gradient with respect to `a`.
pub fn l1_loss<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>) -> Result<LossReport<T>> {
    same_shape(a, b)?;
    let n = T::from_usize_lossy(a.data().len().max(1));
    let mut value = T::zero();
    let gradient = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            value += (x - y).abs();
            sign(x - y) / n
        })
        .collect();
    Ok(LossReport { value: value / n, gradient })
}

/// Hinge on adjacent layer pairs, `max(0, d_j − d_{j+1})`, averaged over pixels.
pub fn ordering_loss<T: Real>(depths: &DepthLayerSet<T>) -> Result<LossReport<T>> {
    let layers = depths.layers();
    if layers < 2 {
        return Err(Error::SingleLayer);
    }
    let n = depths.height() * depths.width();
    let scale = T::one() / T::from_usize_lossy(n.max(1));
    let data = depths.data();
    let mut value = T::zero();
    let mut gradient = vec![T::zero(); data.len()];
    for j in 0..layers - 1 {
        for p in 0..n {
            let (front, back) = (j * n + p, (j + 1) * n + p);
            let gap = data[front] - data[back];
            if gap > T::zero() {
                value += gap;
                gradient[front] += scale;
                gradient[back] -= scale;
            }
        }
    }
    Ok(LossReport { value: value * scale, gradient })
}

/// Anisotropic L1 total variation of every layer, divided by the pixel count.
pub fn tv_loss<T: Real>(depths: &DepthLayerSet<T>) -> Result<LossReport<T>> {
    let (h, w) = (depths.height(), depths.width());
    if h < 2 || w < 2 {
        return Err(Error::DegenerateGrid { height: h, width: w });
    }
    let scale = T::one() / T::from_usize_lossy(h * w);
    let data = depths.data();
    let mut value = T::zero();
    let mut gradient = vec![T::zero(); data.len()];
    for l in 0..depths.layers() {
        let base = l * h * w;
        for y in 0..h {
            for x in 0..w {
                let i = base + y * w + x;
                for j in [(y + 1 < h).then(|| i + w), (x + 1 < w).then(|| i + 1)].into_iter().flatten() {
                    let diff = data[j] - data[i];
                    value += diff.abs();
                    let s = sign(diff) * scale;
                    gradient[j] += s;
                    gradient[i] -= s;
                }
            }
        }
    }
    Ok(LossReport { value: value * scale, gradient })
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CEILING`].
pub fn psnr<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.data().len().max(1) as f64;
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>() / n;
    Ok(psnr_from_mse(mse, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CEILING;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CEILING)
}

/// PSNR restricted to pixels where `mask` is set.
pub fn masked_psnr<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>, mask: &crate::image::Mask, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    if mask.height() != a.height() || mask.width() != a.width() {
        return Err(Error::ShapeMismatch("mask does not match the images".into()));
    }
    let c = a.channels();
    let (mut sum, mut count) = (0.0, 0usize);
    for y in 0..a.height() {
        for x in 0..a.width() {
            if mask.get(y, x) {
                for ch in 0..c {
                    sum += (a.get(y, x, ch).as_f64() - b.get(y, x, ch).as_f64()).powi(2);
                }
                count += c;
            }
        }
    }
    Ok(psnr_from_mse(if count == 0 { 0.0 } else { sum / count as f64 }, peak))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Separable Gaussian filter evaluated only where the full window fits.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5) over valid windows, averaged over channels.
pub fn ssim<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall { height: h, width: w, window: SSIM_WINDOW });
    }
    let taps = gaussian_taps();
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let per_channel: Vec<f64> = (0..a.channels())
        .into_par_iter()
        .map(|c| {
            let plane = |img: &ImageBuffer<T>| -> Vec<f64> {
                (0..h * w).map(|i| img.get(i / w, i % w, c).as_f64()).collect()
            };
            let (x, y) = (plane(a), plane(b));
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
            let [mx, my, mxx, myy, mxy] = [&x, &y, &xx, &yy, &xy].map(|v| filter_valid(v, h, w, &taps));
            let n = mx.len();
            (0..n)
                .map(|i| {
                    let (ux, uy) = (mx[i], my[i]);
                    let vx = mxx[i] - ux * ux;
                    let vy = myy[i] - uy * uy;
                    let cxy = mxy[i] - ux * uy;
                    ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
                })
                .sum::<f64>()
                / n as f64
        })
        .collect();
    Ok(per_channel.iter().sum::<f64>() / per_channel.len().max(1) as f64)
}

/// Removes `margin` pixels from every side.
pub fn central_crop<T: Real>(img: &ImageBuffer<T>, margin: usize) -> Result<ImageBuffer<T>> {
    let (h, w) = (img.height(), img.width());
    if 2 * margin >= h.min(w) {
        return Err(Error::CropTooLarge { margin, height: h, width: w });
    }
    Ok(ImageBuffer::from_fn(h - 2 * margin, w - 2 * margin, img.channels(), |y, x, c| img.get(y + margin, x + margin, c)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> ImageBuffer<f64> {
        ImageBuffer::from_fn(h, w, 1, |y, x, _| f(y, x))
    }

    #[test]
    fn l1_examples() {
        let a = img(4, 4, |_, _| 0.0);
        assert_eq!(l1_loss(&a, &a).unwrap().value, 0.0);
        assert_eq!(l1_loss(&a, &img(4, 4, |_, _| 1.0)).unwrap().value, 1.0);
        assert_eq!(l1_loss(&a, &img(4, 4, |y, _| if y < 2 { 0.5 } else { 0.0 })).unwrap().value, 0.25);
        assert!(matches!(l1_loss(&a, &img(3, 4, |_, _| 0.0)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn ordering_examples() {
        let d = DepthLayerSet::new(3, 1, 1, vec![2.0, 1.0, 3.0]).unwrap();
        let r = ordering_loss(&d).unwrap();
        assert_eq!(r.value, 1.0);
        assert_eq!(r.gradient, vec![1.0, -1.0, 0.0]);
        let ordered = DepthLayerSet::constant(3, 2, 2, &[1.0, 2.0, 3.0]).unwrap();
        let r = ordering_loss(&ordered).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.gradient.iter().all(|&g| g == 0.0));
        assert!(matches!(ordering_loss(&DepthLayerSet::constant(1, 2, 2, &[1.0]).unwrap()), Err(Error::SingleLayer)));
    }

    #[test]
    fn tv_examples() {
        let d = DepthLayerSet::new(1, 2, 2, vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        // raw sum 2, four pixels
        assert_eq!(tv_loss(&d).unwrap().value, 0.5);
        let scaled = DepthLayerSet::new(1, 2, 2, vec![3.0, 6.0, 3.0, 6.0]).unwrap();
        assert_eq!(tv_loss(&scaled).unwrap().value, 1.5);
        assert_eq!(tv_loss(&DepthLayerSet::constant(2, 3, 3, &[1.0, 2.0]).unwrap()).unwrap().value, 0.0);
        assert!(matches!(tv_loss(&DepthLayerSet::constant(1, 1, 3, &[1.0]).unwrap()), Err(Error::DegenerateGrid { .. })));
    }

    #[test]
    fn psnr_examples() {
        let a = img(4, 4, |_, _| 0.2);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CEILING);
        let b = img(4, 4, |_, _| 0.3);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let doubled = psnr(&a, &b, 2.0).unwrap() - psnr(&a, &b, 1.0).unwrap();
        assert!((doubled - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn ssim_matches_reference_values() {
        let a = img(32, 32, |y, x| ((y / 4 + x / 4) % 2) as f64);
        let b = a.map(|v| 1.0 - v);
        assert!((ssim(&a, &b, 1.0).unwrap() - -0.903411668365663).abs() < 1e-4);
        assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
        let s = img(32, 32, |y, x| 0.5 + 0.4 * (x as f64 / 3.0).sin() * (y as f64 / 5.0).cos());
        let t = img(32, 32, |y, x| 0.5 + 0.35 * (x as f64 / 3.3 + 0.2).sin() * (y as f64 / 4.0).cos());
        assert!((ssim(&s, &t, 1.0).unwrap() - 0.5830586979854101).abs() < 1e-4);
        assert!((ssim(&s, &t, 1.0).unwrap() - ssim(&t, &s, 1.0).unwrap()).abs() < 1e-15);
        assert!((psnr(&s, &t, 1.0).unwrap() - 16.131881508347153).abs() < 1e-9);
        let flat = img(16, 16, |_, _| 0.5);
        assert_eq!(ssim(&flat, &flat, 1.0).unwrap(), 1.0);
        assert!(matches!(ssim(&img(8, 20, |_, _| 0.0), &img(8, 20, |_, _| 0.0), 1.0), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn crop_examples() {
        let a = ImageBuffer::<f64>::zeros(256, 256, 3);
        assert_eq!(central_crop(&a, 0).unwrap(), a);
        let c = central_crop(&a, 16).unwrap();
        assert_eq!((c.height(), c.width()), (224, 224));
        assert!(matches!(central_crop(&a, 128), Err(Error::CropTooLarge { .. })));
    }
}
