//! Icosphere: recursively subdivided icosahedron on the unit sphere.

use std::collections::HashMap;

use crate::geom::{Matrix3, Vector3};
use crate::nn::layers::Adjacency;
use crate::real::Real;

#[derive(Clone, Debug)]
pub struct Icosphere<T> {
    pub level: u32,
    pub vertices: Vec<Vector3<T>>,
    /// Outward-oriented triangles.
    pub faces: Vec<[usize; 3]>,
    /// Neighbour lists, sorted ascending.
    pub neighbors: Vec<Vec<usize>>,
    pub adjacency: Adjacency,
    /// Largest nearest-neighbour angle over all vertices (radians).
    pub vertex_spacing: T,
}

fn base_icosahedron() -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v = Vec::with_capacity(12);
    for &a in &[-1.0, 1.0] {
        for &b in &[-phi, phi] {
            v.push(Vector3::new(0.0, a, b));
            v.push(Vector3::new(a, b, 0.0));
            v.push(Vector3::new(b, 0.0, a));
        }
    }
    // Edges have length 2; faces are mutually adjacent triples, oriented outward.
    let adj = |i: usize, j: usize| ((v[i] - v[j]).norm() - 2.0).abs() < 1e-9;
    let mut faces = Vec::with_capacity(20);
    for i in 0..12 {
        for j in i + 1..12 {
            for k in j + 1..12 {
                if adj(i, j) && adj(j, k) && adj(i, k) {
                    let n = (v[j] - v[i]).cross(v[k] - v[i]);
                    let c = v[i] + v[j] + v[k];
                    faces.push(if n.dot(c) > 0.0 { [i, j, k] } else { [i, k, j] });
                }
            }
        }
    }
    debug_assert_eq!(faces.len(), 20);
    (v.into_iter().map(|p| p.normalize()).collect(), faces)
}

impl<T: Real> Icosphere<T> {
    /// Deterministic construction: `10 · 4^level + 2` unit vertices.
    pub fn build(level: u32) -> Self {
        let (mut verts, mut faces) = base_icosahedron();
        for _ in 0..level {
            let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
            let mut next = Vec::with_capacity(faces.len() * 4);
            let mut mid = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| -> usize {
                let key = (a.min(b), a.max(b));
                *cache.entry(key).or_insert_with(|| {
                    verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                    verts.len() - 1
                })
            };
            for &[a, b, c] in &faces {
                let ab = mid(a, b, &mut verts);
                let bc = mid(b, c, &mut verts);
                let ca = mid(c, a, &mut verts);
                next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        let mut neighbors = vec![Vec::new(); verts.len()];
        for &[a, b, c] in &faces {
            for (p, q) in [(a, b), (b, c), (c, a)] {
                neighbors[p].push(q);
                neighbors[q].push(p);
            }
        }
        for n in &mut neighbors {
            n.sort_unstable();
            n.dedup();
        }
        let vertices: Vec<Vector3<T>> = verts.iter().map(|v| v.cast()).collect();
        let spacing = neighbors
            .iter()
            .enumerate()
            .map(|(i, n)| n.iter().map(|&j| verts[i].angle(verts[j])).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max);
        let adjacency = Adjacency::from_lists(&neighbors);
        Self { level, vertices, faces, neighbors, adjacency, vertex_spacing: T::lit(spacing) }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Index of the vertex closest to direction `d` (lowest index on ties).
    pub fn nearest_vertex(&self, d: Vector3<T>) -> usize {
        let d = d.normalize();
        let mut best = (0, T::neg_infinity());
        for (i, v) in self.vertices.iter().enumerate() {
            let c = v.dot(d);
            if c > best.1 {
                best = (i, c);
            }
        }
        best.0
    }

    /// `perm[v]` = index of the vertex that `rot` maps `v` onto, if `rot` is a symmetry of the mesh.
    pub fn rotation_permutation(&self, rot: &Matrix3<T>) -> Option<Vec<usize>> {
        let tol = T::lit(1e-4);
        let mut perm = Vec::with_capacity(self.len());
        for v in &self.vertices {
            let w = *rot * *v;
            let j = self.nearest_vertex(w);
            if (self.vertices[j] - w).norm() > tol {
                return None;
            }
            perm.push(j);
        }
        Some(perm)
    }
}

/// The 60 rotations of the icosahedral group, enumerated by where they send one directed
/// edge of the base icosahedron.
pub fn icosahedral_rotations<T: Real>() -> Vec<Matrix3<T>> {
    let (v, faces) = base_icosahedron();
    let mut nb = vec![Vec::new(); 12];
    for &[a, b, c] in &faces {
        for (p, q) in [(a, b), (b, c), (c, a)] {
            nb[p].push(q);
        }
    }
    for n in &mut nb {
        n.sort_unstable();
        n.dedup();
    }
    let frame = |a: Vector3<f64>, b: Vector3<f64>| {
        let e1 = a;
        let e2 = (b - a * a.dot(b)).normalize();
        Matrix3::from_columns(e1, e2, e1.cross(e2))
    };
    let src = frame(v[0], v[nb[0][0]]).transpose();
    let mut out = Vec::with_capacity(60);
    for i in 0..12 {
        for &j in &nb[i] {
            let r = frame(v[i], v[j]) * src;
            out.push(Matrix3 { rows: r.rows.map(|row| row.map(T::lit)) });
        }
    }
    out
}
