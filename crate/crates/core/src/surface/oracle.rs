//! Exact signed distance to a closed triangle mesh.

use rayon::prelude::*;

use super::mesh::{mesh_watertight, point_triangle_distance, Mesh};
use super::Sdf;
use crate::error::{Error, Result};
use crate::Vec3;

/// Ray directions tried in turn when a parity ray grazes an edge or vertex.
const RAYS: [[f64; 3]; 6] = [
    [0.5773, 0.5774, 0.5774],
    [0.9134, 0.2972, -0.2781],
    [-0.3362, 0.8817, 0.3311],
    [0.1429, -0.4518, 0.8806],
    [-0.7071, -0.5025, -0.4975],
    [0.2236, 0.9015, -0.3705],
];

const EPS: f64 = 1e-9;

pub struct SdfOracle {
    tris: Vec<[Vec3; 3]>,
    boxes: Vec<(Vec3, Vec3)>,
}

enum Parity {
    Inside,
    Outside,
    Ambiguous,
}

impl SdfOracle {
    pub fn new(mesh: &Mesh) -> Result<Self> {
        let report = mesh_watertight(mesh);
        if !report.is_watertight {
            return Err(Error::NotWatertight(format!(
                "{} boundary, {} non-manifold, {} misoriented edges",
                report.boundary_edges, report.non_manifold_edges, report.misoriented_edges
            )));
        }
        let tris: Vec<[Vec3; 3]> = (0..mesh.triangles.len()).map(|t| mesh.corners(t)).collect();
        let boxes = tris.iter().map(|[a, b, c]| (a.min_elem(*b).min_elem(*c), a.max_elem(*b).max_elem(*c))).collect();
        Ok(Self { tris, boxes })
    }

    pub fn unsigned_distance(&self, p: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        for (t, (lo, hi)) in self.tris.iter().zip(&self.boxes) {
            let gap = (*lo - p).max_elem(p - *hi).max_elem(Vec3::zeros());
            if gap.norm_squared() >= best * best {
                continue;
            }
            best = best.min(point_triangle_distance(p, t[0], t[1], t[2]));
        }
        best
    }

    fn parity(&self, p: Vec3, d: Vec3) -> Parity {
        let mut crossings = 0usize;
        for [a, b, c] in &self.tris {
            let (e1, e2) = (*b - *a, *c - *a);
            let h = d.cross(e2);
            let det = e1.dot(h);
            let scale = e1.norm() * e2.norm();
            let s = p - *a;
            let q = s.cross(e1);
            if det.abs() <= EPS * scale {
                // Parallel: only matters if the ray runs inside the triangle's plane.
                if s.dot(e1.cross(e2)).abs() <= EPS * scale * (1.0 + s.norm()) {
                    return Parity::Ambiguous;
                }
                continue;
            }
            let inv = 1.0 / det;
            let u = s.dot(h) * inv;
            let v = d.dot(q) * inv;
            let t = e2.dot(q) * inv;
            let w = 1.0 - u - v;
            if u < -EPS || v < -EPS || w < -EPS || t < -EPS {
                continue;
            }
            if u <= EPS || v <= EPS || w <= EPS || t <= EPS {
                return Parity::Ambiguous;
            }
            crossings += 1;
        }
        if crossings % 2 == 1 {
            Parity::Inside
        } else {
            Parity::Outside
        }
    }

    pub fn is_inside(&self, p: Vec3) -> bool {
        for r in RAYS {
            match self.parity(p, Vec3::from_array(r).normalize()) {
                Parity::Inside => return true,
                Parity::Outside => return false,
                Parity::Ambiguous => {}
            }
        }
        // Every ray grazed: the point sits on the surface, where either sign is exact.
        false
    }

    pub fn signed_distance(&self, p: Vec3) -> f64 {
        let d = self.unsigned_distance(p);
        if self.is_inside(p) {
            -d
        } else {
            d
        }
    }
}

impl Sdf for SdfOracle {
    fn distance(&self, p: Vec3) -> f64 {
        self.signed_distance(p)
    }

    fn distances(&self, pts: &[Vec3]) -> Vec<f64> {
        pts.par_iter().map(|&p| self.signed_distance(p)).collect()
    }
}

/// Signed distance from `p` to the closed `mesh`, negative inside.
pub fn sdf_oracle(mesh: &Mesh, p: Vec3) -> Result<f64> {
    Ok(SdfOracle::new(mesh)?.signed_distance(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::loft::loft_rings;
    use crate::surface::mesh::cube;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn cube_center_and_outside() {
        let m = cube(1.0);
        assert!((sdf_oracle(&m, Vec3::zeros()).unwrap() + 1.0).abs() < 1e-12);
        assert!((sdf_oracle(&m, Vec3::new(2.0, 0.0, 0.0)).unwrap() - 1.0).abs() < 1e-12);
        // Axis-aligned rays through cube edges and vertices still resolve.
        assert!(sdf_oracle(&m, Vec3::new(0.5, 0.5, 0.5)).unwrap() < 0.0);
        assert!(sdf_oracle(&m, Vec3::new(3.0, 3.0, 3.0)).unwrap() > 0.0);
    }

    #[test]
    fn open_mesh_is_rejected() {
        let mut m = cube(1.0);
        m.triangles.pop();
        assert!(matches!(sdf_oracle(&m, Vec3::zeros()), Err(Error::NotWatertight(_))));
    }

    #[test]
    fn unit_sphere_loft() {
        let (n_lat, n_phi) = (160, 128);
        let rings: Vec<Vec<Vec3>> = (1..n_lat)
            .map(|i| {
                let th = PI * (1.0 - i as f64 / n_lat as f64);
                (0..n_phi)
                    .map(|k| {
                        let a = 2.0 * PI * k as f64 / n_phi as f64;
                        Vec3::new(th.sin() * a.cos(), th.sin() * a.sin(), th.cos())
                    })
                    .collect()
            })
            .collect();
        let oracle = SdfOracle::new(&loft_rings(&rings).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec3> =
            (0..1000).map(|_| Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))).collect();
        let got = oracle.distances(&pts);
        for (p, d) in pts.iter().zip(got) {
            assert!((d - (p.norm() - 1.0)).abs() < 0.02, "{p:?}: {d} vs {}", p.norm() - 1.0);
        }
    }
}
