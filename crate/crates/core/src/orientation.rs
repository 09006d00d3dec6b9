//! Decoding spherical responses: max over scales, two directions at least 90° apart, and the
//! response-weighted radius r̃.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere::{Icosphere, ScaleSet, SphericalResponse};
use crate::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationPair {
    pub d1: Vec3,
    pub d2: Vec3,
    pub v1: usize,
    pub v2: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveScale {
    pub r_tilde: f64,
    /// Clamped per-scale maxima.
    pub weights: Vec<f64>,
}

/// Per-vertex maximum over all scales.
pub fn aggregate_max(responses: &[SphericalResponse]) -> Result<Vec<f32>> {
    let first = responses.first().ok_or_else(|| Error::InvalidInput("no responses to aggregate".into()))?;
    let mut out = first.values.clone();
    for r in &responses[1..] {
        if r.values.len() != out.len() {
            return Err(Error::Shape(format!("response sizes differ: {} vs {}", r.values.len(), out.len())));
        }
        for (o, &v) in out.iter_mut().zip(&r.values) {
            *o = o.max(v);
        }
    }
    Ok(out)
}

fn argmax_where(f: &[f32], keep: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in f.iter().enumerate() {
        if keep(i) && best.map_or(true, |b| v > f[b]) {
            best = Some(i);
        }
    }
    best
}

/// `d1` is the global argmax; `d2` the argmax among vertices with `d1·v ≤ 1e-9`.
/// Ties go to the lowest vertex index.
pub fn extract_directions(f: &[f32], sphere: &Icosphere<f64>) -> Result<OrientationPair> {
    if f.len() != sphere.len() {
        return Err(Error::Shape(format!("field has {} values, sphere {} vertices", f.len(), sphere.len())));
    }
    let (lo, hi) = f.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi - lo > 1e-6) {
        return Err(Error::NoOrientation);
    }
    let v1 = argmax_where(f, |_| true).expect("non-empty");
    let d1 = sphere.vertices[v1];
    let v2 = argmax_where(f, |i| sphere.vertices[i].dot(d1) <= 1e-9).ok_or(Error::NoOrientation)?;
    Ok(OrientationPair { d1, d2: sphere.vertices[v2], v1, v2 })
}

/// Sub-vertex peak estimate: mean of the vertex and its one-ring directions, weighted by the
/// response above the ring minimum.
pub fn refine_direction(f: &[f32], sphere: &Icosphere<f64>, v: usize) -> Vec3 {
    let ring = sphere.neighbors[v].iter().copied().chain(std::iter::once(v));
    let floor = ring.clone().map(|u| f[u]).fold(f32::INFINITY, f32::min) as f64;
    let mut acc = Vec3::zeros();
    for u in ring {
        acc += sphere.vertices[u] * (f[u] as f64 - floor);
    }
    if acc.norm() < 1e-12 {
        sphere.vertices[v]
    } else {
        acc.normalize()
    }
}

/// `r̃ = Σ w_j r_j / Σ w_j` with `w_j = max(0, max_v f_j(v))`; the median of `R` when all
/// weights vanish.
pub fn select_scale(responses: &[SphericalResponse], scales: &ScaleSet) -> Result<AdaptiveScale> {
    if responses.len() != scales.len() {
        return Err(Error::Shape(format!("{} responses for {} scales", responses.len(), scales.len())));
    }
    let weights: Vec<f64> = responses.iter().map(|r| (r.max() as f64).max(0.0)).collect();
    let total: f64 = weights.iter().sum();
    let r_tilde = if total > 0.0 {
        let r = weights.iter().zip(scales.radii()).map(|(w, r)| w * r).sum::<f64>() / total;
        r.clamp(scales.min(), scales.max())
    } else {
        scales.median()
    };
    Ok(AdaptiveScale { r_tilde, weights })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resp(scale: f64, values: Vec<f32>) -> SphericalResponse {
        SphericalResponse { scale, values }
    }

    #[test]
    fn max_over_scales() {
        let a = resp(1.0, vec![1.0, 0.0]);
        let b = resp(2.0, vec![0.0, 2.0]);
        assert_eq!(aggregate_max(&[a.clone(), b.clone()]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(aggregate_max(&[b.clone(), a.clone()]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(aggregate_max(std::slice::from_ref(&a)).unwrap(), a.values);
        assert!(aggregate_max(&[a, resp(3.0, vec![1.0])]).is_err());
        assert!(aggregate_max(&[]).is_err());
    }

    #[test]
    fn opposite_peaks() {
        let s = Icosphere::build(3);
        let mut f = vec![0.0f32; s.len()];
        let top = s.nearest_vertex(Vec3::unit_z());
        let bottom = s.nearest_vertex(-Vec3::unit_z());
        f[top] = 1.0;
        f[bottom] = 0.5;
        let p = extract_directions(&f, &s).unwrap();
        assert!((p.d1 - Vec3::unit_z()).norm() < 1e-12);
        assert!((p.d2 + Vec3::unit_z()).norm() < 1e-12);
    }

    #[test]
    fn nearby_secondary_peak_is_excluded() {
        let s = Icosphere::build(3);
        let mut f = vec![0.0f32; s.len()];
        let top = s.nearest_vertex(Vec3::unit_z());
        let tilted = s.nearest_vertex(Vec3::new(1.0, 0.0, 1.0));
        let bottom = s.nearest_vertex(-Vec3::unit_z());
        f[top] = 1.0;
        f[tilted] = 0.9;
        f[bottom] = 0.8;
        let p = extract_directions(&f, &s).unwrap();
        assert_eq!(p.v2, bottom);
        // Brute force over all vertices.
        let oracle = (0..s.len())
            .filter(|&i| s.vertices[i].angle(s.vertices[top]) >= std::f64::consts::FRAC_PI_2 - 1e-9)
            .max_by(|&a, &b| f[a].partial_cmp(&f[b]).unwrap().then(b.cmp(&a)))
            .unwrap();
        assert_eq!(p.v2, oracle);
    }

    #[test]
    fn floor_tie_goes_to_lowest_index() {
        let s = Icosphere::build(2);
        let mut f = vec![0.25f32; s.len()];
        f[7] = 1.0;
        let p = extract_directions(&f, &s).unwrap();
        let first = (0..s.len()).find(|&i| s.vertices[i].dot(s.vertices[7]) <= 1e-9).unwrap();
        assert_eq!((p.v1, p.v2), (7, first));
    }

    #[test]
    fn constant_field_has_no_orientation() {
        let s = Icosphere::build(1);
        assert!(matches!(extract_directions(&vec![0.3; s.len()], &s), Err(Error::NoOrientation)));
    }

    #[test]
    fn scale_selection_examples() {
        let r = ScaleSet::standard();
        let only10: Vec<_> = r.radii().iter().map(|&x| resp(x, vec![if x == 10.0 { 0.7 } else { -0.1 }])).collect();
        assert_eq!(select_scale(&only10, &r).unwrap().r_tilde, 10.0);
        let equal: Vec<_> = r.radii().iter().map(|&x| resp(x, vec![0.5, -1.0])).collect();
        assert!((select_scale(&equal, &r).unwrap().r_tilde - 42.5).abs() < 1e-12);
        let two = ScaleSet::new(vec![10.0, 20.0]).unwrap();
        let s = select_scale(&[resp(10.0, vec![1.0]), resp(20.0, vec![3.0])], &two).unwrap();
        assert!((s.r_tilde - 17.5).abs() < 1e-12);
        let none: Vec<_> = r.radii().iter().map(|&x| resp(x, vec![-1.0])).collect();
        assert_eq!(select_scale(&none, &r).unwrap().r_tilde, 42.5);
        assert!(select_scale(&none[..3], &r).is_err());
    }

    #[test]
    fn refinement_stays_on_symmetric_peak() {
        let s = Icosphere::build(3);
        let top = s.nearest_vertex(Vec3::unit_z());
        let f: Vec<f32> = s.vertices.iter().map(|v| v.z.max(0.0).powi(8) as f32).collect();
        assert!(refine_direction(&f, &s, top).angle(Vec3::unit_z()) < 1e-3);
    }
}
