//! Triangle meshes: combinatorial audit, OBJ output, point-triangle distance.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Vec3;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::InvalidInput(format!("triangle {t:?} indexes past {n} vertices")));
        }
        Ok(Self { vertices, triangles })
    }

    pub fn corners(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.corners(t);
                0.5 * (b - a).cross(c - a).norm()
            })
            .sum()
    }

    /// Divergence-theorem volume; positive when triangles wind counter-clockwise seen from
    /// outside.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.corners(t);
                a.dot(b.cross(c)) / 6.0
            })
            .sum()
    }

    pub fn flip(&mut self) {
        self.triangles.iter_mut().for_each(|t| t.swap(1, 2));
    }

    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), &v| (lo.min_elem(v), hi.max_elem(v))))
    }

    /// Disjoint union.
    pub fn merge(&mut self, other: &Mesh) {
        let off = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles.extend(other.triangles.iter().map(|t| t.map(|i| i + off)));
    }

    pub fn euler_characteristic(&self) -> i64 {
        mesh_watertight(self).euler_characteristic
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::with_capacity(self.vertices.len() * 40 + self.triangles.len() * 24);
        for v in &self.vertices {
            let _ = writeln!(s, "v {:.6} {:.6} {:.6}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    pub fn write_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_obj()).map_err(|e| Error::io(path, e))
    }

    pub fn read_obj(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: &str| Error::InvalidInput(format!("bad OBJ record `{line}`"));
        let (mut vertices, mut triangles) = (Vec::new(), Vec::new());
        for line in text.lines() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it.map(|x| x.parse().map_err(|_| bad(line))).collect::<Result<_>>()?;
                    if c.len() != 3 {
                        return Err(bad(line));
                    }
                    vertices.push(Vec3::new(c[0], c[1], c[2]));
                }
                Some("f") => {
                    let c: Vec<u32> = it
                        .map(|x| x.split('/').next().unwrap_or("").parse::<u32>().map_err(|_| bad(line)))
                        .collect::<Result<_>>()?;
                    if c.len() != 3 || c.contains(&0) {
                        return Err(bad(line));
                    }
                    triangles.push([c[0] - 1, c[1] - 1, c[2] - 1]);
                }
                _ => {}
            }
        }
        Mesh::new(vertices, triangles)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WatertightReport {
    pub is_watertight: bool,
    pub boundary_edges: usize,
    pub non_manifold_edges: usize,
    /// Edges used twice in the same direction.
    pub misoriented_edges: usize,
    pub euler_characteristic: i64,
    pub components: usize,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Exact combinatorial audit over referenced vertices.
pub fn mesh_watertight(mesh: &Mesh) -> WatertightReport {
    // Undirected edge -> (uses as (lo, hi), uses as (hi, lo)).
    let mut edges: HashMap<(u32, u32), (u32, u32)> = HashMap::with_capacity(mesh.triangles.len() * 3 / 2);
    let mut parent: Vec<usize> = (0..mesh.vertices.len()).collect();
    let mut used = vec![false; mesh.vertices.len()];
    for t in &mesh.triangles {
        for e in 0..3 {
            let (a, b) = (t[e], t[(e + 1) % 3]);
            let entry = edges.entry((a.min(b), a.max(b))).or_default();
            if a < b {
                entry.0 += 1;
            } else {
                entry.1 += 1;
            }
            used[a as usize] = true;
            let (ra, rb) = (find(&mut parent, a as usize), find(&mut parent, b as usize));
            parent[ra] = rb;
        }
    }
    let (mut boundary, mut non_manifold, mut misoriented) = (0, 0, 0);
    for &(f, r) in edges.values() {
        match f + r {
            1 => boundary += 1,
            2 if f != 1 => misoriented += 1,
            2 => {}
            _ => non_manifold += 1,
        }
    }
    let n_vertices = used.iter().filter(|&&u| u).count();
    let components = (0..mesh.vertices.len()).filter(|&v| used[v] && find(&mut parent, v) == v).count();
    WatertightReport {
        is_watertight: !mesh.triangles.is_empty() && boundary == 0 && non_manifold == 0 && misoriented == 0,
        boundary_edges: boundary,
        non_manifold_edges: non_manifold,
        misoriented_edges: misoriented,
        euler_characteristic: n_vertices as i64 - edges.len() as i64 + mesh.triangles.len() as i64,
        components,
    }
}

/// Closest point on triangle `abc` to `p`.
pub fn closest_point_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
    let (ab, ac, ap) = (b - a, c - a, p - a);
    let (d1, d2) = (ab.dot(ap), ac.dot(ap));
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let (d3, d4) = (ab.dot(bp), ac.dot(bp));
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let (d5, d6) = (ab.dot(cp), ac.dot(cp));
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

pub fn point_triangle_distance(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> f64 {
    p.distance(closest_point_on_triangle(p, a, b, c))
}

/// Unsigned distance to a triangle soup through a uniform bucket grid.
pub struct MeshDistance<'a> {
    mesh: &'a Mesh,
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    buckets: Vec<Vec<u32>>,
}

impl<'a> MeshDistance<'a> {
    pub fn new(mesh: &'a Mesh, cell: f64) -> Result<Self> {
        if mesh.triangles.is_empty() || !(cell > 0.0) {
            return Err(Error::InvalidInput("mesh distance needs triangles and a positive cell size".into()));
        }
        let (lo, hi) = mesh.bounds().expect("non-empty");
        let ext = hi - lo;
        let dims = [ext.x, ext.y, ext.z].map(|e| (e / cell).floor() as usize + 1);
        let mut buckets = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        let cell_of = |p: Vec3| {
            let q = (p - lo) * (1.0 / cell);
            [q.x, q.y, q.z].map(|c| c.floor().max(0.0) as usize)
        };
        for t in 0..mesh.triangles.len() {
            let [a, b, c] = mesh.corners(t);
            let (l, h) = (cell_of(a.min_elem(b).min_elem(c)), cell_of(a.max_elem(b).max_elem(c)));
            for k in l[2]..=h[2].min(dims[2] - 1) {
                for j in l[1]..=h[1].min(dims[1] - 1) {
                    for i in l[0]..=h[0].min(dims[0] - 1) {
                        buckets[(k * dims[1] + j) * dims[0] + i].push(t as u32);
                    }
                }
            }
        }
        Ok(Self { mesh, origin: lo, cell, dims, buckets })
    }

    /// Searches shells of buckets around `p` until no unvisited bucket can hold a closer
    /// triangle.
    pub fn distance(&self, p: Vec3) -> f64 {
        let q = (p - self.origin) * (1.0 / self.cell);
        let home = [q.x, q.y, q.z];
        let c: [i64; 3] = std::array::from_fn(|a| (home[a].floor() as i64).clamp(0, self.dims[a] as i64 - 1));
        // Distance from p to the home bucket, nonzero when p lies outside the grid.
        let outside = (0..3)
            .map(|a| {
                let (l, h) = (c[a] as f64, c[a] as f64 + 1.0);
                (l - home[a]).max(home[a] - h).max(0.0)
            })
            .fold(0.0f64, |m, d| m.max(d))
            * self.cell;
        let max_shell = *self.dims.iter().max().expect("3 dims") as i64;
        let mut best = f64::INFINITY;
        for shell in 0..=max_shell {
            let lo: [i64; 3] = std::array::from_fn(|a| (c[a] - shell).max(0));
            let hi: [i64; 3] = std::array::from_fn(|a| (c[a] + shell).min(self.dims[a] as i64 - 1));
            for k in lo[2]..=hi[2] {
                for j in lo[1]..=hi[1] {
                    for i in lo[0]..=hi[0] {
                        let ring = (i - c[0]).abs().max((j - c[1]).abs()).max((k - c[2]).abs());
                        if ring != shell {
                            continue;
                        }
                        let idx = ((k as usize) * self.dims[1] + j as usize) * self.dims[0] + i as usize;
                        for &t in &self.buckets[idx] {
                            let [a, b, cc] = self.mesh.corners(t as usize);
                            best = best.min(point_triangle_distance(p, a, b, cc));
                        }
                    }
                }
            }
            if best <= outside + shell as f64 * self.cell {
                break;
            }
        }
        best
    }
}

#[cfg(test)]
pub(crate) fn cube(half: f64) -> Mesh {
    let vertices = (0..8)
        .map(|i| Vec3::new(if i & 1 == 0 { -half } else { half }, if i & 2 == 0 { -half } else { half }, if i & 4 == 0 { -half } else { half }))
        .collect();
    // Outward counter-clockwise faces.
    let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
    let triangles = quads.iter().flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]).collect();
    Mesh { vertices, triangles }
}
