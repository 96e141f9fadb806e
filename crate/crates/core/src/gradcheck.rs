//! Finite-difference checks of every analytic gradient.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aggregate::{aggregate, jacobian, AggregateOptions, BetaVolume, DepthLayerSet, GeometryScheme, SoftAverage};
use crate::camera::{Camera, CameraIntrinsics, RigidPose};
use crate::error::Result;
use crate::image::ImageBuffer;
use crate::linalg::{Mat3, Vec3};
use crate::losses::{l1_loss, ordering_loss, tv_loss};
use crate::meshing::{mesh_layers, Diagonal};
use crate::psv::place_planes;
use crate::render::{compose_over, compose_over_backward, rasterize, render_backward, FragmentBuffer, RenderOptions, RenderOutput};
use crate::texture::TexturedScene;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub configs: usize,
    pub checks: usize,
    /// Configurations rejected because coverage changed under perturbation.
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl SuiteReport {
    fn new(suite: &str) -> Self {
        Self { suite: suite.into(), configs: 0, checks: 0, skipped: 0, max_rel_err: 0.0 }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        self.checks += 1;
        let e = relative_error(analytic, numeric);
        if e > self.max_rel_err || e.is_nan() {
            self.max_rel_err = e;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn check_aggregate(scheme: GeometryScheme, configs: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::new(&format!("aggregate_{scheme}"));
    for cfg in 0..configs {
        let layers = [1, 2, 4][cfg % 3];
        let planes = place_planes(rng.random_range(0.5..2.0), rng.random_range(10.0..100.0), 8)?;
        let (h, w) = (2, 2);
        let average = if scheme == GeometryScheme::Sa && rng.random::<bool>() { SoftAverage::InverseDepth } else { SoftAverage::Depth };
        let opts = AggregateOptions { layers, soft_average: average };
        let beta = match scheme {
            GeometryScheme::Gc => BetaVolume::gc(h, w, 8, (0..h * w * 8).map(|_| rng.random_range(0.05..0.95)).collect())?,
            GeometryScheme::Sa => BetaVolume::sa(h, w, layers, 8, (0..h * w * layers * 8).map(|_| rng.random_range(-3.0..3.0)).collect())?,
            GeometryScheme::Bi => BetaVolume::bi(h, w, layers, (0..h * w * layers).map(|_| rng.random_range(0.05..0.95)).collect())?,
        };
        let jac = jacobian(&beta, &planes, opts)?;
        let n = h * w;
        let step = 1e-4;
        for idx in 0..beta.data().len() {
            let (pixel, ch) = (idx / jac.channels, idx % jac.channels);
            let l = jac.layer_of_channel(ch);
            let out = |v: f64| aggregate(&beta.with_value(idx, v).expect("in range"), &planes, opts).expect("valid").data()[l * n + pixel];
            report.record(jac.data[idx], central(out, beta.data()[idx], step));
        }
        report.configs += 1;
    }
    Ok(report)
}

pub fn check_compose_over(configs: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::new("compose_over");
    for _ in 0..configs {
        let k = rng.random_range(1..6);
        let frags: Vec<([f64; 3], f64)> = (0..k).map(|_| ([rng.random(), rng.random(), rng.random()], rng.random_range(0.05..0.95))).collect();
        let gc: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let ga: f64 = rng.random_range(-1.0..1.0);
        let loss = |f: &[([f64; 3], f64)]| {
            let (c, a) = compose_over(f).expect("valid");
            gc[0] * c[0] + gc[1] * c[1] + gc[2] * c[2] + ga * a
        };
        let grads = compose_over_backward(&frags, gc, ga)?;
        for i in 0..k {
            let alpha = |v: f64| {
                let mut f = frags.clone();
                f[i].1 = v;
                loss(&f)
            };
            report.record(grads[i].1, central(alpha, frags[i].1, 1e-6));
            for c in 0..3 {
                let color = |v: f64| {
                    let mut f = frags.clone();
                    f[i].0[c] = v;
                    loss(&f)
                };
                report.record(grads[i].0[c], central(color, frags[i].0[c], 1e-6));
            }
        }
        report.configs += 1;
    }
    Ok(report)
}

/// Same triangles and same texel cells everywhere.
pub fn coverage_stable(a: &FragmentBuffer<f64>, b: &FragmentBuffer<f64>) -> bool {
    a.fragments.iter().zip(&b.fragments).all(|(f, g)| {
        f.triangle == g.triangle && (!f.hit() || (f.uv[0].floor() == g.uv[0].floor() && f.uv[1].floor() == g.uv[1].floor()))
    })
}

struct RenderCase {
    scene: TexturedScene<f64>,
    camera: Camera<f64>,
    size: (usize, usize),
    up_color: ImageBuffer<f64>,
    up_alpha: ImageBuffer<f64>,
}

impl RenderCase {
    fn random(rng: &mut ChaCha8Rng) -> Result<Self> {
        let (th, tw) = (rng.random_range(6..10), rng.random_range(6..10));
        let (gh, gw) = (rng.random_range(3..6), rng.random_range(3..6));
        let layers = rng.random_range(1..4);
        let k = CameraIntrinsics::centered(tw as f64, tw, th)?;
        let mut data = Vec::new();
        for l in 0..layers {
            let base = 2.0 + 2.0 * l as f64;
            data.extend((0..gh * gw).map(|_| base + rng.random_range(-0.4..0.4)));
        }
        let depths = DepthLayerSet::new(layers, gh, gw, data)?;
        let textures = (0..layers)
            .map(|_| ImageBuffer::from_fn(th, tw, 4, |_, _, c| if c == 3 { rng.random_range(0.1..0.9) } else { rng.random() }))
            .collect();
        let scene = TexturedScene::new(mesh_layers(&depths, &k, Diagonal::Main), textures)?;
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let pose = RigidPose::new(
            Mat3::from_axis_angle(axis, rng.random_range(-0.05..0.05)),
            Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
        )?;
        let size = (th, tw);
        let up_color = ImageBuffer::from_fn(th, tw, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let up_alpha = ImageBuffer::from_fn(th, tw, 1, |_, _, _| rng.random_range(-1.0..1.0));
        Ok(Self { scene, camera: Camera::new(k, pose), size, up_color, up_alpha })
    }

    fn loss_of(&self, out: &RenderOutput<f64>) -> f64 {
        let c: f64 = out.color.data().iter().zip(self.up_color.data()).map(|(a, b)| a * b).sum();
        let a: f64 = out.alpha.data().iter().zip(self.up_alpha.data()).map(|(a, b)| a * b).sum();
        c + a
    }

    fn loss(&self, scene: &TexturedScene<f64>) -> (f64, FragmentBuffer<f64>) {
        let frags = rasterize(scene, &self.camera, self.size, &RenderOptions::default()).expect("valid camera");
        (self.loss_of(&crate::render::composite_layers(&frags)), frags)
    }
}

/// Render gradients for vertex depths, texture alphas and texture colors, as three reports.
pub fn check_render(configs: usize, seed: u64) -> Result<[SuiteReport; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut depth = SuiteReport::new("render_depth");
    let mut alpha = SuiteReport::new("render_alpha");
    let mut color = SuiteReport::new("render_color");
    let mut attempts = 0;
    while depth.configs < configs && attempts < configs * 20 {
        attempts += 1;
        let case = RenderCase::random(&mut rng)?;
        let (_, frags) = case.loss(&case.scene);
        if frags.hit_count() == 0 {
            continue;
        }
        let grads = render_backward(&case.scene, &case.camera, &frags, &case.up_color, Some(&case.up_alpha))?;
        let layers = case.scene.layer_count();
        // vertex depths with a nonzero analytic gradient when there are any
        let mut candidates: Vec<(usize, usize)> =
            (0..layers).flat_map(|l| (0..case.scene.meshes.vertex_count()).map(move |v| (l, v))).filter(|&(l, v)| grads.depths[l][v] != 0.0).collect();
        if candidates.is_empty() {
            candidates = vec![(0, 0)];
        }
        let mut stable = true;
        let mut pending = Vec::new();
        for _ in 0..3 {
            let (l, v) = candidates[rng.random_range(0..candidates.len())];
            let d0 = case.scene.meshes.layers[l].depths[v];
            let h = 1e-6 * d0;
            let eval = |d: f64| {
                let mut s = case.scene.clone();
                s.meshes.set_vertex_depth(l, v, d);
                case.loss(&s)
            };
            let (lp, fp) = eval(d0 + h);
            let (lm, fm) = eval(d0 - h);
            if !coverage_stable(&frags, &fp) || !coverage_stable(&frags, &fm) {
                stable = false;
                break;
            }
            pending.push((grads.depths[l][v], (lp - lm) / (2.0 * h)));
        }
        if !stable {
            depth.skipped += 1;
            continue;
        }
        pending.into_iter().for_each(|(a, n)| depth.record(a, n));
        depth.configs += 1;
        let (th, tw) = case.scene.texture_size();
        for _ in 0..3 {
            let (l, y, x) = (rng.random_range(0..layers), rng.random_range(0..th), rng.random_range(0..tw));
            for (report, ch) in [(&mut alpha, 3), (&mut color, rng.random_range(0..3))] {
                let v0 = case.scene.textures[l].get(y, x, ch);
                let eval = |v: f64| {
                    let mut s = case.scene.clone();
                    s.textures[l].set(y, x, ch, v);
                    case.loss(&s).0
                };
                report.record(grads.textures[l].get(y, x, ch), central(eval, v0, 1e-4));
            }
        }
        alpha.configs += 1;
        color.configs += 1;
    }
    Ok([depth, alpha, color])
}

pub fn check_losses(configs: usize, seed: u64) -> Result<[SuiteReport; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l1 = SuiteReport::new("loss_l1");
    let mut ord = SuiteReport::new("loss_ordering");
    let mut tv = SuiteReport::new("loss_tv");
    // all three are piecewise linear; the step only has to stay inside one piece
    let h = 1e-3;
    // keeps every |difference| away from the kink at 0
    let away = |rng: &mut ChaCha8Rng| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    };
    for _ in 0..configs {
        let (hh, ww, c) = (rng.random_range(2..5), rng.random_range(2..5), 3);
        let b = ImageBuffer::from_fn(hh, ww, c, |_, _, _| rng.random_range(0.0..1.0));
        let a = ImageBuffer::from_vec(hh, ww, c, b.data().iter().map(|v| v + away(&mut rng)).collect())?;
        let g = l1_loss(&a, &b)?.gradient;
        for i in 0..a.data().len() {
            let f = |v: f64| {
                let mut t = a.clone();
                t.data_mut()[i] = v;
                l1_loss(&t, &b).expect("shape").value
            };
            l1.record(g[i], central(f, a.data()[i], h));
        }
        l1.configs += 1;

        let layers = rng.random_range(2..5);
        let n = hh * ww;
        let mut data = vec![0.0; layers * n];
        for p in 0..n {
            let mut z = rng.random_range(5.0..6.0);
            for l in 0..layers {
                data[l * n + p] = z;
                z += away(&mut rng);
            }
        }
        let depths = DepthLayerSet::new(layers, hh, ww, data.clone())?;
        let g = ordering_loss(&depths)?.gradient;
        for i in 0..data.len() {
            let f = |v: f64| {
                let mut d = data.clone();
                d[i] = v;
                ordering_loss(&DepthLayerSet::new(layers, hh, ww, d).expect("positive")).expect("layers").value
            };
            ord.record(g[i], central(f, data[i], h));
        }
        ord.configs += 1;

        // a lattice with distinct steps has no zero neighbor differences
        let mut data: Vec<f64> = (0..layers * n).map(|k| 1.0 + 0.1 * k as f64 + rng.random_range(0.0..0.02)).collect();
        data.shuffle(&mut rng);
        let depths = DepthLayerSet::new(layers, hh, ww, data.clone())?;
        let g = tv_loss(&depths)?.gradient;
        for i in 0..data.len() {
            let f = |v: f64| {
                let mut d = data.clone();
                d[i] = v;
                tv_loss(&DepthLayerSet::new(layers, hh, ww, d).expect("positive")).expect("grid").value
            };
            tv.record(g[i], central(f, data[i], h));
        }
        tv.configs += 1;
    }
    Ok([l1, ord, tv])
}

/// Every suite with `configs` configurations each.
pub fn run_all(configs: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    let mut out = Vec::new();
    for (i, scheme) in [GeometryScheme::Gc, GeometryScheme::Sa, GeometryScheme::Bi].into_iter().enumerate() {
        out.push(check_aggregate(scheme, configs, seed.wrapping_add(i as u64))?);
    }
    out.push(check_compose_over(configs, seed.wrapping_add(10))?);
    out.extend(check_render(configs, seed.wrapping_add(20))?);
    out.extend(check_losses(configs, seed.wrapping_add(30))?);
    Ok(out)
}
