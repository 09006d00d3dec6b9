//! Surface reconstruction: lofted proxy surfaces, neural signed-distance fields, smooth-minimum
//! blending and marching-cubes extraction.

mod field;
mod loft;
mod mc;
mod mesh;
mod oracle;
mod table;

pub use field::{fit_neural_field, fit_to_samples, split_held_out, FieldFitConfig, FieldFitReport, FieldLossRecord, FieldSamples, NeuralField};
pub use loft::{align_shift, ends_stopped_in, extend_ends, loft_contours, loft_rings};
pub use mc::{marching_cubes, marching_cubes_banded, McGrid};
pub use mesh::{closest_point_on_triangle, mesh_watertight, point_triangle_distance, Mesh, MeshDistance, WatertightReport};
pub use oracle::{sdf_oracle, SdfOracle};

use crate::error::{Error, Result};
use crate::Vec3;

pub const DEFAULT_SMIN_K: f64 = 2.0;

/// A signed distance evaluator: negative inside.
pub trait Sdf: Sync {
    fn distance(&self, p: Vec3) -> f64;

    fn distances(&self, pts: &[Vec3]) -> Vec<f64> {
        pts.iter().map(|&p| self.distance(p)).collect()
    }
}

impl<F: Fn(Vec3) -> f64 + Sync> Sdf for F {
    fn distance(&self, p: Vec3) -> f64 {
        self(p)
    }
}

/// Exponential smooth minimum `−ln(Σ e^{−k v})/k`, shifted by the minimum before
/// exponentiation.
pub fn smin(values: &[f64], k: f64) -> f64 {
    let m = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = values.iter().map(|&v| (-k * (v - m)).exp()).sum();
    m - s.ln() / k
}

/// Smooth union of several fields.
pub struct Blend<S> {
    pub fields: Vec<S>,
    pub k: f64,
}

pub fn blend_fields<S: Sdf>(fields: Vec<S>, k: f64) -> Result<Blend<S>> {
    if fields.is_empty() {
        return Err(Error::InvalidInput("blend needs at least one field".into()));
    }
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::InvalidInput(format!("smooth-min sharpness must be positive, got {k}")));
    }
    Ok(Blend { fields, k })
}

impl<S: Sdf> Sdf for Blend<S> {
    fn distance(&self, p: Vec3) -> f64 {
        self.distances(&[p])[0]
    }

    fn distances(&self, pts: &[Vec3]) -> Vec<f64> {
        if self.fields.len() == 1 {
            return self.fields[0].distances(pts);
        }
        let per_field: Vec<Vec<f64>> = self.fields.iter().map(|f| f.distances(pts)).collect();
        let mut row = vec![0.0; per_field.len()];
        (0..pts.len())
            .map(|i| {
                row.iter_mut().zip(&per_field).for_each(|(r, f)| *r = f[i]);
                smin(&row, self.k)
            })
            .collect()
    }
}
