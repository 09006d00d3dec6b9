//! Marching cubes on a uniform lattice with welded edge vertices.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mesh::Mesh;
use super::table::TRI_TABLE;
use super::Sdf;
use crate::error::{Error, Result};
use crate::Vec3;

/// Sampling lattice: `min`, `min + step`, ... up to the first node at or past `max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McGrid {
    pub min: Vec3,
    pub max: Vec3,
    pub step: f64,
}

impl McGrid {
    pub fn new(min: Vec3, max: Vec3, step: f64) -> Result<Self> {
        let g = Self { min, max, step };
        g.validate()?;
        Ok(g)
    }

    /// Cube around `center` with half-width `half`.
    pub fn centered(center: Vec3, half: f64, step: f64) -> Result<Self> {
        Self::new(center - Vec3::splat(half), center + Vec3::splat(half), step)
    }

    pub fn validate(&self) -> Result<()> {
        let ext = self.max - self.min;
        if !(self.step > 0.0 && self.step.is_finite()) || !(ext.x > 0.0 && ext.y > 0.0 && ext.z > 0.0) {
            return Err(Error::InvalidInput(format!("degenerate marching-cubes grid {self:?}")));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        let ext = self.max - self.min;
        [ext.x, ext.y, ext.z].map(|e| (e / self.step - 1e-9).ceil() as usize + 1)
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.min + Vec3::new(i as f64, j as f64, k as f64) * self.step
    }
}

const NUDGE: f32 = 1e-6;

/// Corner offsets in table order.
const CORNERS: [[usize; 3]; 8] =
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];

/// Table edges as (lower corner, axis).
const EDGES: [(usize, usize); 12] =
    [(0, 0), (1, 1), (3, 0), (0, 1), (4, 0), (5, 1), (7, 0), (4, 1), (0, 2), (1, 2), (2, 2), (3, 2)];

struct Samples {
    dims: [usize; 3],
    values: Vec<f32>,
}

impl Samples {
    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }
}

fn nudged(v: f64) -> f32 {
    let v = v as f32;
    if v == 0.0 {
        NUDGE
    } else {
        v
    }
}

fn sample_dense<S: Sdf + ?Sized>(sdf: &S, grid: &McGrid) -> Samples {
    let dims = grid.dims();
    let values = (0..dims[2])
        .into_par_iter()
        .flat_map_iter(|k| {
            let pts: Vec<Vec3> =
                (0..dims[1]).flat_map(|j| (0..dims[0]).map(move |i| grid.node(i, j, k))).collect();
            sdf.distances(&pts).into_iter().map(nudged)
        })
        .collect();
    Samples { dims, values }
}

/// Samples every node whose coarse cell (side `stride` nodes) may contain the zero set; other
/// nodes take the common sign of their cell corners. A cell is refined when its corners
/// disagree in sign or any `|f| ≤ 2 ×` the cell diagonal, which is exact for fields that are
/// at most 2-Lipschitz.
fn sample_banded<S: Sdf + ?Sized>(sdf: &S, grid: &McGrid, stride: usize) -> Samples {
    let dims = grid.dims();
    let coarse_of = |n: usize| (n - 1).div_ceil(stride) + 1;
    let cdims = dims.map(coarse_of);
    let fine = |c: usize, axis: usize| (c * stride).min(dims[axis] - 1);
    let coarse: Vec<f32> = (0..cdims[2])
        .into_par_iter()
        .flat_map_iter(|ck| {
            let pts: Vec<Vec3> = (0..cdims[1])
                .flat_map(|cj| (0..cdims[0]).map(move |ci| grid.node(fine(ci, 0), fine(cj, 1), fine(ck, 2))))
                .collect();
            sdf.distances(&pts).into_iter().map(nudged)
        })
        .collect();
    let cidx = |i: usize, j: usize, k: usize| (k * cdims[1] + j) * cdims[0] + i;
    let threshold = 2.0 * (3.0f64).sqrt() * stride as f64 * grid.step;

    let mut out = Samples { dims, values: vec![f32::NAN; dims[0] * dims[1] * dims[2]] };
    let mut active = vec![false; out.values.len()];
    for ck in 0..cdims[2] - 1 {
        for cj in 0..cdims[1] - 1 {
            for ci in 0..cdims[0] - 1 {
                let corners = CORNERS.map(|[a, b, c]| coarse[cidx(ci + a, cj + b, ck + c)]);
                let positive = corners[0] > 0.0;
                let refine = corners.iter().any(|&v| (v > 0.0) != positive || (v.abs() as f64) <= threshold);
                let fill = corners.iter().copied().fold(f32::INFINITY, |m, v| if v.abs() < m.abs() { v } else { m });
                for k in fine(ck, 2)..=fine(ck + 1, 2) {
                    for j in fine(cj, 1)..=fine(cj + 1, 1) {
                        for i in fine(ci, 0)..=fine(ci + 1, 0) {
                            let idx = out.index(i, j, k);
                            if refine {
                                active[idx] = true;
                            } else if out.values[idx].is_nan() {
                                out.values[idx] = fill;
                            }
                        }
                    }
                }
            }
        }
    }
    let todo: Vec<usize> = (0..active.len()).filter(|&i| active[i]).collect();
    let evaluated: Vec<f32> = todo
        .par_chunks(4096)
        .flat_map_iter(|chunk| {
            let pts: Vec<Vec3> = chunk
                .iter()
                .map(|&idx| {
                    let i = idx % dims[0];
                    let j = (idx / dims[0]) % dims[1];
                    grid.node(i, j, idx / (dims[0] * dims[1]))
                })
                .collect();
            sdf.distances(&pts).into_iter().map(nudged)
        })
        .collect();
    for (&idx, v) in todo.iter().zip(evaluated) {
        out.values[idx] = v;
    }
    out
}

fn polygonize(s: &Samples, grid: &McGrid) -> Result<Mesh> {
    let [nx, ny, nz] = s.dims;
    let mut welded: HashMap<(usize, usize), u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let vals = CORNERS.map(|[a, b, c]| s.values[s.index(i + a, j + b, k + c)]);
                let case = vals.iter().enumerate().fold(0usize, |m, (b, &v)| if v < 0.0 { m | 1 << b } else { m });
                if case == 0 || case == 255 {
                    continue;
                }
                let mut vertex = |e: usize| -> u32 {
                    let (c, axis) = EDGES[e];
                    let [a, b, cc] = CORNERS[c];
                    let (li, lj, lk) = (i + a, j + b, k + cc);
                    *welded.entry((s.index(li, lj, lk), axis)).or_insert_with(|| {
                        let mut hi = [li, lj, lk];
                        hi[axis] += 1;
                        let v0 = s.values[s.index(li, lj, lk)] as f64;
                        let v1 = s.values[s.index(hi[0], hi[1], hi[2])] as f64;
                        let t = v0 / (v0 - v1);
                        let p0 = grid.node(li, lj, lk);
                        let p1 = grid.node(hi[0], hi[1], hi[2]);
                        vertices.push(p0.lerp(p1, t));
                        (vertices.len() - 1) as u32
                    })
                };
                for tri in TRI_TABLE[case].chunks_exact(3).take_while(|t| t[0] >= 0) {
                    // Table winding faces the negative side; swap to face increasing values.
                    triangles.push([vertex(tri[0] as usize), vertex(tri[2] as usize), vertex(tri[1] as usize)]);
                }
            }
        }
    }
    if triangles.is_empty() {
        return Err(Error::EmptySurface);
    }
    Mesh::new(vertices, triangles)
}

/// Zero level set of `sdf` sampled at every grid node. Normals face increasing `sdf`.
pub fn marching_cubes<S: Sdf + ?Sized>(sdf: &S, grid: &McGrid) -> Result<Mesh> {
    grid.validate()?;
    polygonize(&sample_dense(sdf, grid), grid)
}

/// As [`marching_cubes`], skipping evaluation in coarse cells of `stride` nodes that are far
/// from the zero set (see the refinement rule on the sampler).
pub fn marching_cubes_banded<S: Sdf + ?Sized>(sdf: &S, grid: &McGrid, stride: usize) -> Result<Mesh> {
    grid.validate()?;
    if stride <= 1 {
        return marching_cubes(sdf, grid);
    }
    polygonize(&sample_banded(sdf, grid, stride), grid)
}
