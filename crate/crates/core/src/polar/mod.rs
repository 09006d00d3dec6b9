//! Polar resampling orthogonal to the vessel, the contour CNN, soft-argmax radius decoding
//! and polygon overlap.

mod train;

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use train::{
    synth_contour_dataset, train_contour, ContourDataset, ContourManifest, ContourManifestEntry, ContourSample,
    ContourSynthConfig, ContourTrainConfig,
};

use crate::error::{Error, Result};
use crate::geom::least_aligned_axis;
use crate::nn::gradcheck::Differentiable;
use crate::nn::layers::{column_softmax, column_softmax_backward, Activation, Conv2dCircular};
use crate::nn::{Parameterized, Tensor};
use crate::real::Real;
use crate::volume::IntensityField;
use crate::Vec3;

pub const DEFAULT_NR: usize = 32;
pub const DEFAULT_NPHI: usize = 64;
const CHANNELS: usize = 16;

/// Right-handed orthonormal frame `{e1, e2, normal}` of the plane through `center`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneFrame {
    pub center: Vec3,
    pub normal: Vec3,
    pub e1: Vec3,
    pub e2: Vec3,
}

impl PlaneFrame {
    pub fn new(center: Vec3, normal: Vec3, prev: Option<&PlaneFrame>) -> Self {
        let d = normal.normalize();
        let (e1, e2) = plane_basis(d, prev);
        Self { center, normal: d, e1, e2 }
    }

    /// In-plane direction at angle `phi` from `e1` toward `e2`.
    pub fn direction(&self, phi: f64) -> Vec3 {
        self.e1 * phi.cos() + self.e2 * phi.sin()
    }

    /// The same plane with its gauge turned by `angle`.
    pub fn rotated(&self, angle: f64) -> Self {
        let e1 = self.direction(angle);
        Self { e1, e2: self.normal.cross(e1), ..*self }
    }

    pub fn with_center(&self, center: Vec3) -> Self {
        Self { center, ..*self }
    }
}

/// `(e1, e2)` for normal `d`: transported from `prev` when possible, otherwise built from the
/// global axis least aligned with `d`.
pub fn plane_basis(d: Vec3, prev: Option<&PlaneFrame>) -> (Vec3, Vec3) {
    let d = d.normalize();
    let absolute = || least_aligned_axis(d).cross(d).normalize();
    let e1 = match prev {
        Some(f) => {
            let q = f.e1 - d * f.e1.dot(d);
            if q.norm() < 1e-6 {
                absolute()
            } else {
                q.normalize()
            }
        }
        None => absolute(),
    };
    // Re-orthogonalize so the frame is orthonormal to rounding.
    let e1 = (e1 - d * e1.dot(d)).normalize();
    (e1, d.cross(e1))
}

#[inline]
pub fn ring_radius(i: usize, r_tilde: f64, n_r: usize) -> f64 {
    (i as f64 + 0.5) * r_tilde / n_r as f64
}

#[inline]
pub fn ring_angle(k: usize, n_phi: usize) -> f64 {
    TAU * k as f64 / n_phi as f64
}

/// `n_r × n_phi` samples, row `i` at radius `(i + 0.5) r̃ / n_r`, column `k` at angle `2πk / n_phi`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarImage {
    pub frame: PlaneFrame,
    pub r_tilde: f64,
    pub n_r: usize,
    pub n_phi: usize,
    pub pixels: Vec<f32>,
}

impl PolarImage {
    pub fn at(&self, i: usize, k: usize) -> f32 {
        self.pixels[i * self.n_phi + k]
    }

    /// `[1, n_r, n_phi]`, shifted to zero mean and divided by `std + 1e-6`.
    pub fn to_input<T: Real>(&self) -> Tensor<T> {
        let n = self.pixels.len() as f64;
        let mean = self.pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.pixels.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var.sqrt() + 1e-6);
        let data = self.pixels.iter().map(|&v| T::lit((v as f64 - mean) * inv)).collect();
        Tensor::new(vec![1, self.n_r, self.n_phi], data).expect("shape by construction")
    }
}

pub fn extract_polar_image<F: IntensityField + ?Sized>(
    field: &F,
    frame: &PlaneFrame,
    r_tilde: f64,
    n_r: usize,
    n_phi: usize,
) -> Result<PolarImage> {
    if !(r_tilde > 0.0 && r_tilde.is_finite()) || n_r < 4 || n_phi < 4 {
        return Err(Error::InvalidInput(format!("polar image needs r̃ > 0 and at least 4x4 pixels (r̃ = {r_tilde})")));
    }
    let dirs: Vec<Vec3> = (0..n_phi).map(|k| frame.direction(ring_angle(k, n_phi))).collect();
    let mut pixels = Vec::with_capacity(n_r * n_phi);
    for i in 0..n_r {
        let rho = ring_radius(i, r_tilde, n_r);
        for d in &dirs {
            pixels.push(field.intensity(frame.center + *d * rho) as f32);
        }
    }
    Ok(PolarImage { frame: *frame, r_tilde, n_r, n_phi, pixels })
}

/// Four circular convolutions (1→16→16→16→1, 3×3, ReLU between) and a column softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct ContourCnn<T> {
    pub convs: [Conv2dCircular<T>; 4],
}

#[derive(Clone, Debug)]
pub struct CnnCache<T> {
    /// Input of each layer.
    inputs: Vec<Tensor<T>>,
    /// Pre-activations of the first three layers.
    pre: Vec<Tensor<T>>,
    probs: Tensor<T>,
}

impl<T: Real> ContourCnn<T> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            convs: [
                Conv2dCircular::init(1, CHANNELS, 3, rng),
                Conv2dCircular::init(CHANNELS, CHANNELS, 3, rng),
                Conv2dCircular::init(CHANNELS, CHANNELS, 3, rng),
                Conv2dCircular::init(CHANNELS, 1, 3, rng),
            ],
        }
    }

    pub fn hyperparameters(&self) -> serde_json::Value {
        json!({ "channels": [1, CHANNELS, CHANNELS, CHANNELS, 1], "kernel": 3 })
    }

    /// `[1, n_r, n_phi]` image to a `[n_r, n_phi]` heatmap with unit column sums.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, CnnCache<T>)> {
        let s = x.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(Error::Shape(format!("contour cnn expects [1, rows, cols], got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let relu = Activation::Relu;
        let mut inputs = Vec::with_capacity(4);
        let mut pre = Vec::with_capacity(3);
        let mut a = x.clone();
        for c in &self.convs[..3] {
            let z = c.forward(&a)?;
            inputs.push(a);
            a = relu.apply(&z);
            pre.push(z);
        }
        let logits = self.convs[3].forward(&a)?.reshape(&[h, w])?;
        inputs.push(a);
        let probs = column_softmax(&logits);
        Ok((probs.clone(), CnnCache { inputs, pre, probs }))
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x)?.0)
    }

    pub fn backward(&self, cache: &CnnCache<T>, dprobs: &Tensor<T>) -> (Vec<Tensor<T>>, Tensor<T>) {
        let mut g = Parameterized::zero_grads(self);
        let (h, w) = (cache.probs.shape()[0], cache.probs.shape()[1]);
        let dlogits = column_softmax_backward(&cache.probs, dprobs).reshape(&[1, h, w]).expect("same length");
        let relu = Activation::Relu;
        let mut d = self.convs[3].backward(&cache.inputs[3], &dlogits, &mut g[6..8]);
        for i in (0..3).rev() {
            let dz = relu.backward(&cache.pre[i], &d);
            d = self.convs[i].backward(&cache.inputs[i], &dz, &mut g[2 * i..2 * i + 2]);
        }
        (g, d)
    }
}

impl<T: Real> Parameterized<T> for ContourCnn<T> {
    fn param_names(&self) -> Vec<String> {
        (0..4).flat_map(|i| [format!("conv{i}.weight"), format!("conv{i}.bias")]).collect()
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}

impl<T: Real> Differentiable<T> for ContourCnn<T> {
    fn eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.predict(x)
    }

    fn vjp(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let (_, cache) = self.forward(x)?;
        Ok(self.backward(&cache, dy))
    }
}

/// Soft-argmax per column: `radius_k = Σ_i p[i, k] ρ_i`.
pub fn heatmap_to_radii<T: Real>(p: &Tensor<T>, r_tilde: f64) -> Vec<f64> {
    let (h, w) = (p.shape()[0], p.shape()[1]);
    (0..w)
        .map(|k| (0..h).map(|i| p.data[i * w + k].to_f64_lossy() * ring_radius(i, r_tilde, h)).sum())
        .collect()
}

/// Adjoint of [`heatmap_to_radii`]: `dp[i, k] = dradius_k · ρ_i`.
pub fn heatmap_to_radii_backward<T: Real>(dradii: &[f64], r_tilde: f64, n_r: usize) -> Tensor<T> {
    let w = dradii.len();
    Tensor::from_fn(&[n_r, w], |idx| T::lit(dradii[idx % w] * ring_radius(idx / w, r_tilde, n_r)))
}

/// Closed planar contour, one radius per angular bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub frame: PlaneFrame,
    pub r_tilde: f64,
    pub radii: Vec<f64>,
}

impl Contour {
    pub fn n_phi(&self) -> usize {
        self.radii.len()
    }

    pub fn circle(frame: PlaneFrame, radius: f64, n_phi: usize) -> Self {
        Self { frame, r_tilde: radius, radii: vec![radius; n_phi] }
    }

    pub fn points(&self) -> Vec<Vec3> {
        let n = self.n_phi();
        self.radii
            .iter()
            .enumerate()
            .map(|(k, &r)| self.frame.center + self.frame.direction(ring_angle(k, n)) * r)
            .collect()
    }

    /// The same curve seen from the other side: normal and `e2` negated, bins mirrored.
    pub fn flipped(&self) -> Self {
        let n = self.n_phi();
        let f = &self.frame;
        Self {
            frame: PlaneFrame { center: f.center, normal: -f.normal, e1: f.e1, e2: -f.e2 },
            r_tilde: self.r_tilde,
            radii: (0..n).map(|k| self.radii[(n - k) % n]).collect(),
        }
    }

    /// Vertices in the 2D coordinates of `frame` (which must share this contour's plane).
    pub fn points_in(&self, frame: &PlaneFrame) -> Vec<[f64; 2]> {
        self.points()
            .into_iter()
            .map(|p| {
                let q = p - frame.center;
                [q.dot(frame.e1), q.dot(frame.e2)]
            })
            .collect()
    }

    /// Enclosed area by the shoelace formula.
    pub fn area(&self) -> f64 {
        polygon_area(&self.points_in(&self.frame))
    }

    pub fn centroid(&self) -> Vec3 {
        let pts = self.points_in(&self.frame);
        let (mut cx, mut cy, mut a) = (0.0, 0.0, 0.0);
        for i in 0..pts.len() {
            let (p, q) = (pts[i], pts[(i + 1) % pts.len()]);
            let c = p[0] * q[1] - q[0] * p[1];
            a += c;
            cx += (p[0] + q[0]) * c;
            cy += (p[1] + q[1]) * c;
        }
        if a.abs() < 1e-12 {
            return self.frame.center;
        }
        self.frame.center + self.frame.e1 * (cx / (3.0 * a)) + self.frame.e2 * (cy / (3.0 * a))
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "frame": { "center": self.frame.center, "normal": self.frame.normal, "e1": self.frame.e1, "e2": self.frame.e2 },
            "r_tilde": self.r_tilde,
            "radii": self.radii,
            "points": self.points(),
        })
    }
}

pub fn polygon_area(pts: &[[f64; 2]]) -> f64 {
    let n = pts.len();
    (0..n).map(|i| pts[i][0] * pts[(i + 1) % n][1] - pts[(i + 1) % n][0] * pts[i][1]).sum::<f64>().abs() * 0.5
}

const DSC_PITCH: f64 = 0.05;

/// Cell-index ranges of the row at height `y` whose centers lie inside `poly` (even-odd rule).
fn row_spans(poly: &[[f64; 2]], y: f64, x0: f64, out: &mut Vec<(i64, i64)>) {
    out.clear();
    let mut xs: Vec<f64> = Vec::new();
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a[1] <= y) != (b[1] <= y) {
            xs.push(a[0] + (y - a[1]) / (b[1] - a[1]) * (b[0] - a[0]));
        }
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for pair in xs.chunks_exact(2) {
        // Cell c has center x0 + (c + 0.5) h.
        let lo = ((pair[0] - x0) / DSC_PITCH - 0.5).ceil() as i64;
        let hi = ((pair[1] - x0) / DSC_PITCH - 0.5).floor() as i64;
        if hi >= lo {
            out.push((lo, hi));
        }
    }
}

fn spans_overlap(a: &[(i64, i64)], b: &[(i64, i64)]) -> i64 {
    let mut n = 0;
    for &(a0, a1) in a {
        for &(b0, b1) in b {
            let (lo, hi) = (a0.max(b0), a1.min(b1));
            if hi >= lo {
                n += hi - lo + 1;
            }
        }
    }
    n
}

/// Dice overlap of the two enclosed polygons, rasterized on a shared 0.05 mm grid.
pub fn contour_dsc(a: &Contour, b: &Contour) -> Result<f64> {
    let fa = &a.frame;
    let (fb, off) = (&b.frame, b.frame.center - fa.center);
    let coplanar = fa.normal.cross(fb.normal).norm() < 1e-6 && off.dot(fa.normal).abs() < 1e-6;
    if !coplanar {
        return Err(Error::NotCoplanar);
    }
    let pa = a.points_in(fa);
    let pb = b.points_in(fa);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in pa.iter().chain(&pb) {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let rows = ((hi[1] - lo[1]) / DSC_PITCH).ceil() as usize + 1;
    let (mut sa, mut sb) = (Vec::new(), Vec::new());
    let (mut na, mut nb, mut nab) = (0i64, 0i64, 0i64);
    for r in 0..rows {
        let y = lo[1] + (r as f64 + 0.5) * DSC_PITCH;
        row_spans(&pa, y, lo[0], &mut sa);
        row_spans(&pb, y, lo[0], &mut sb);
        na += sa.iter().map(|(l, h)| h - l + 1).sum::<i64>();
        nb += sb.iter().map(|(l, h)| h - l + 1).sum::<i64>();
        nab += spans_overlap(&sa, &sb);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * nab as f64 / (na + nb) as f64)
}

/// Symmetric Hausdorff distance between two point sets.
pub fn hausdorff(a: &[Vec3], b: &[Vec3]) -> f64 {
    let one = |x: &[Vec3], y: &[Vec3]| {
        x.iter()
            .map(|p| y.iter().map(|q| p.distance(*q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    one(a, b).max(one(b, a))
}

/// Full contour step: polar image, network, decoding.
pub fn predict_contour<F: IntensityField + ?Sized>(
    net: &ContourCnn<f32>,
    field: &F,
    frame: &PlaneFrame,
    r_tilde: f64,
    n_r: usize,
    n_phi: usize,
) -> Result<Contour> {
    let img = extract_polar_image(field, frame, r_tilde, n_r, n_phi)?;
    let p = net.predict(&img.to_input())?;
    Ok(Contour { frame: *frame, r_tilde, radii: heatmap_to_radii(&p, r_tilde) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{Scene, TubeSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tube(r: f64) -> Scene {
        Scene::single(TubeSpec::straight(Vec3::new(0.0, 0.0, -50.0), Vec3::new(0.0, 0.0, 50.0), r)).unwrap()
    }

    #[test]
    fn absolute_basis_for_z() {
        let (e1, e2) = plane_basis(Vec3::unit_z(), None);
        assert!(e1.z.abs() < 1e-12 && e2.z.abs() < 1e-12);
        assert!((e1.cross(e2).dot(Vec3::unit_z()) - 1.0).abs() < 1e-12);
        let f = PlaneFrame::new(Vec3::zeros(), Vec3::unit_z(), None);
        assert!((crate::Mat3::from_columns(f.e1, f.e2, f.normal).determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn transport_keeps_orthogonal_e1() {
        let prev = PlaneFrame::new(Vec3::zeros(), Vec3::unit_z(), None);
        let d = (Vec3::unit_z() + prev.e2).normalize();
        let (e1, _) = plane_basis(d, Some(&prev));
        assert!((e1 - prev.e1).norm() < 1e-12);
    }

    #[test]
    fn transport_is_continuous_over_smooth_rotation() {
        let axis = Vec3::new(1.0, 0.3, 0.0).normalize();
        let mut frame = PlaneFrame::new(Vec3::zeros(), Vec3::unit_z(), None);
        for step in 1..=180 {
            let d = crate::Mat3::from_axis_angle(axis, (step as f64).to_radians()) * Vec3::unit_z();
            let next = PlaneFrame::new(Vec3::zeros(), d, Some(&frame));
            assert!(next.e1.angle(frame.e1).to_degrees() < 3.0, "flip at step {step}");
            frame = next;
        }
    }

    #[test]
    fn polar_image_of_centered_tube() {
        let f = PlaneFrame::new(Vec3::zeros(), Vec3::unit_z(), None);
        let img = extract_polar_image(&tube(5.0), &f, 10.0, 32, 64).unwrap();
        for i in 0..32 {
            let rho = ring_radius(i, 10.0, 32);
            for k in 0..64 {
                let v = img.at(i, k);
                if rho < 4.5 {
                    assert!(v > 0.7);
                } else if rho > 5.5 {
                    assert!(v < 0.3);
                }
            }
        }
    }

    #[test]
    fn one_bin_gauge_rotation_shifts_columns() {
        let spec = TubeSpec::straight(Vec3::new(0.3, -0.2, -50.0), Vec3::new(1.0, 0.5, 50.0), 4.0);
        let scene = Scene::single(spec).unwrap();
        let f = PlaneFrame::new(Vec3::new(0.5, 0.1, 0.0), Vec3::unit_z(), None);
        let a = extract_polar_image(&scene, &f, 9.0, 32, 64).unwrap();
        let b = extract_polar_image(&scene, &f.rotated(ring_angle(1, 64)), 9.0, 32, 64).unwrap();
        for i in 0..32 {
            for k in 0..64 {
                assert!((b.at(i, k) - a.at(i, (k + 1) % 64)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn cnn_columns_sum_to_one_and_commute_with_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cnn = ContourCnn::<f32>::init(&mut rng);
        let x = Tensor::<f32>::randn(&[1, 8, 12], 1.0, &mut rng);
        let p = cnn.predict(&x).unwrap();
        for k in 0..12 {
            let s: f32 = (0..8).map(|i| p.data[i * 12 + k]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let shifted = Tensor::from_fn(&[1, 8, 12], |i| x.data[(i / 12) * 12 + (i % 12 + 12 - 3) % 12]);
        let q = cnn.predict(&shifted).unwrap();
        for i in 0..8 {
            for k in 0..12 {
                assert_eq!(q.data[i * 12 + k], p.data[i * 12 + (k + 12 - 3) % 12]);
            }
        }
    }

    #[test]
    fn soft_argmax_examples() {
        let onehot = Tensor::from_fn(&[32, 1], |i| if i == 7 { 1.0f64 } else { 0.0 });
        assert_eq!(heatmap_to_radii(&onehot, 32.0), vec![7.5]);
        let uniform = Tensor::from_fn(&[32, 1], |_| 1.0f64 / 32.0);
        assert!((heatmap_to_radii(&uniform, 32.0)[0] - 16.0).abs() < 1e-12);
        let two = Tensor::from_fn(&[32, 1], |i| if i == 10 || i == 20 { 0.5f64 } else { 0.0 });
        assert!((heatmap_to_radii(&two, 32.0)[0] - 15.5).abs() < 1e-12);
    }

    #[test]
    fn soft_argmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Tensor::<f64>::uniform(&[6, 4], 1.0, &mut rng);
        let c = [0.3, -1.2, 0.7, 2.0];
        let loss = |p: &Tensor<f64>| heatmap_to_radii(p, 12.0).iter().zip(&c).map(|(r, c)| r * c).sum::<f64>();
        let g = heatmap_to_radii_backward::<f64>(&c, 12.0, 6);
        for j in 0..p.len() {
            let mut a = p.clone();
            a.data[j] += 1e-4;
            let mut b = p.clone();
            b.data[j] -= 1e-4;
            let n = (loss(&a) - loss(&b)) / 2e-4;
            assert!((n - g.data[j]).abs() / n.abs().max(1e-12) < 1e-4);
        }
    }

    #[test]
    fn dsc_examples() {
        let f = PlaneFrame::new(Vec3::new(1.0, 2.0, 3.0), Vec3::new(0.2, 0.1, 1.0), None);
        let a = Contour::circle(f, 4.0, 256);
        let b = Contour::circle(f, 5.0, 256);
        assert_eq!(contour_dsc(&a, &a).unwrap(), 1.0);
        let d = contour_dsc(&a, &b).unwrap();
        assert!((d - 32.0 / 41.0).abs() < 0.005, "{d}");
        assert!((contour_dsc(&b, &a).unwrap() - d).abs() < 1e-12);
        let far = Contour::circle(f.with_center(f.center + f.e1 * 20.0), 4.0, 256);
        assert_eq!(contour_dsc(&a, &far).unwrap(), 0.0);
        let tilted = Contour::circle(PlaneFrame::new(f.center, Vec3::unit_x(), None), 4.0, 64);
        assert!(matches!(contour_dsc(&a, &tilted), Err(Error::NotCoplanar)));
    }

    #[test]
    fn contour_json_has_points() {
        let c = Contour::circle(PlaneFrame::new(Vec3::zeros(), Vec3::unit_z(), None), 2.0, 8);
        let j = c.to_json();
        assert_eq!(j["points"].as_array().unwrap().len(), 8);
        assert!((c.area() - 0.5 * 8.0 * 4.0 * (TAU / 8.0).sin()).abs() < 1e-9);
    }

    #[test]
    fn flipped_contour_keeps_its_points() {
        let frame = PlaneFrame::new(Vec3::new(1.0, 2.0, 3.0), Vec3::new(0.3, -0.2, 1.0), None);
        let c = Contour { frame, r_tilde: 5.0, radii: (0..16).map(|k| 2.0 + (k as f64 * 0.7).sin()).collect() };
        let f = c.flipped();
        assert!((f.frame.e1.cross(f.frame.e2) - f.frame.normal).norm() < 1e-12);
        let (a, b) = (c.points(), f.points());
        let n = a.len();
        for k in 0..n {
            assert!((a[(n - k) % n] - b[k]).norm() < 1e-12);
        }
        assert_eq!(f.flipped(), c);
    }
}
