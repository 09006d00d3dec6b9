//! Evaluation of tracks and meshes against phantom truth.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{bail, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vtrack::phantom::PhantomTruth;
use vtrack::polar::{contour_dsc, PlaneFrame};
use vtrack::surface::{mesh_watertight, Mesh, MeshDistance, WatertightReport};
use vtrack::tracker::TrackedVessel;
use vtrack::Vec3;

use crate::config::EvaluateConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub p95: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let p95 = sorted[((0.95 * (n - 1) as f64).round() as usize).min(n - 1)];
        Some(Self { n, mean, std, min: sorted[0], p95, max: sorted[n - 1] })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VesselMetrics {
    pub centerline_points: usize,
    pub length_mm: f64,
    pub termination: [String; 2],
    /// Distance of each tracked centerline point to the true centerline.
    pub centerline_error_mm: Summary,
    pub dsc: Option<Summary>,
    /// Per-contour DSC in centerline order.
    pub dsc_values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshMetrics {
    pub vertices: usize,
    pub triangles: usize,
    pub watertight: WatertightReport,
    /// `|SDF|` of the true lumen union at each mesh vertex.
    pub mesh_to_truth_mm: Summary,
    /// Distance from true boundary points within the tracked extent to the mesh.
    pub truth_to_mesh_mm: Option<Summary>,
    pub hausdorff_mm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub vessels: BTreeMap<String, VesselMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mesh: Option<MeshMetrics>,
}

fn truth_for<'a>(truths: &'a [PhantomTruth], name: &str) -> Result<&'a PhantomTruth> {
    match truths.iter().find(|t| t.name == name) {
        Some(t) if !t.samples.is_empty() => Ok(t),
        _ => bail!(vtrack::Error::InvalidInput(format!("no truth for tracked vessel `{name}`"))),
    }
}

/// Centerline error is measured against the vessel's own truth. Each contour is scored against
/// the true cross-section of the tube containing its center, the vessel's own tube first, so
/// contours placed past a junction are compared with the lumen they actually sit in.
pub fn evaluate_track(v: &TrackedVessel, truths: &[PhantomTruth]) -> Result<VesselMetrics> {
    let truth = truth_for(truths, &v.name)?;
    let errors: Vec<f64> = v.centerline.iter().map(|&p| truth.distance_to_centerline(p)).collect();
    let Some(centerline_error_mm) = Summary::of(&errors) else {
        bail!(vtrack::Error::InvalidInput(format!("track `{}` has an empty centerline", v.name)));
    };
    let mut contours: Vec<_> = v.contours.iter().collect();
    contours.sort_by_key(|c| c.index);
    let dsc_values = contours
        .par_iter()
        .map(|c| {
            let center = c.contour.frame.center;
            let lumen = std::iter::once(truth)
                .chain(truths.iter().filter(|t| t.name != truth.name))
                .find(|t| t.contains(center))
                .unwrap_or(truth);
            let truth_section = lumen.section(&c.contour.frame, c.contour.n_phi().max(64));
            Ok(contour_dsc(&c.contour, &truth_section)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(VesselMetrics {
        centerline_points: v.centerline.len(),
        length_mm: v.length(),
        termination: v.termination.clone().map(|t| t.to_string()),
        centerline_error_mm,
        dsc: Summary::of(&dsc_values),
        dsc_values,
    })
}

/// Signed distance to the union of the true tubes (exact outside, a lower bound inside).
fn truth_sdf(truths: &[PhantomTruth], p: Vec3) -> f64 {
    truths
        .iter()
        .map(|t| t.distance_to_centerline(p) - t.nearest_sample(p).radius)
        .fold(f64::INFINITY, f64::min)
}

fn distance_to_polyline(line: &[Vec3], p: Vec3) -> f64 {
    if line.len() == 1 {
        return line[0].distance(p);
    }
    line.windows(2)
        .map(|w| {
            let ab = w[1] - w[0];
            let t = ((p - w[0]).dot(ab) / ab.norm_squared().max(1e-300)).clamp(0.0, 1.0);
            (w[0] + ab * t).distance(p)
        })
        .fold(f64::INFINITY, f64::min)
}

/// True boundary rings whose centers lie within `tol` of the tracked centerline, minus the
/// points buried inside another tube.
fn truth_boundary(truths: &[PhantomTruth], tracks: &[TrackedVessel], cfg: &EvaluateConfig) -> Vec<Vec3> {
    let mut pts = Vec::new();
    for v in tracks {
        let Some(truth) = truths.iter().find(|t| t.name == v.name) else { continue };
        for s in &truth.samples {
            if distance_to_polyline(&v.centerline, s.center) > cfg.extent_tolerance_mm {
                continue;
            }
            let frame = PlaneFrame { center: s.center, normal: s.normal, e1: s.e1, e2: s.e2() };
            let n = cfg.truth_points_per_ring;
            for k in 0..n {
                let p = s.center + frame.direction(std::f64::consts::TAU * k as f64 / n as f64) * s.radius;
                if truths.iter().filter(|o| o.name != truth.name).all(|o| !o.contains(p)) {
                    pts.push(p);
                }
            }
        }
    }
    pts
}

pub fn evaluate_mesh(mesh: &Mesh, truths: &[PhantomTruth], tracks: &[TrackedVessel], cfg: &EvaluateConfig) -> Result<MeshMetrics> {
    if truths.is_empty() {
        bail!(vtrack::Error::InvalidInput("mesh evaluation needs at least one truth tube".into()));
    }
    let watertight = mesh_watertight(mesh);
    let near: Vec<f64> = mesh.vertices.par_iter().map(|&p| truth_sdf(truths, p).abs()).collect();
    let Some(mesh_to_truth_mm) = Summary::of(&near) else {
        bail!(vtrack::Error::InvalidInput("mesh has no vertices".into()));
    };
    let index = MeshDistance::new(mesh, cfg.bucket_mm)?;
    let boundary = truth_boundary(truths, tracks, cfg);
    let far: Vec<f64> = boundary.par_iter().map(|&p| index.distance(p)).collect();
    let truth_to_mesh_mm = Summary::of(&far);
    let hausdorff_mm = mesh_to_truth_mm.max.max(truth_to_mesh_mm.as_ref().map_or(0.0, |s| s.max));
    Ok(MeshMetrics {
        vertices: mesh.vertices.len(),
        triangles: mesh.triangles.len(),
        watertight,
        mesh_to_truth_mm,
        truth_to_mesh_mm,
        hausdorff_mm,
    })
}

pub fn evaluate(
    tracks: &[TrackedVessel],
    mesh: Option<&Mesh>,
    truths: &[PhantomTruth],
    cfg: &EvaluateConfig,
) -> Result<Metrics> {
    let mut m = Metrics::default();
    for v in tracks {
        m.vessels.insert(v.name.clone(), evaluate_track(v, truths)?);
    }
    if let Some(mesh) = mesh {
        m.mesh = Some(evaluate_mesh(mesh, truths, tracks, cfg)?);
    }
    Ok(m)
}

fn summary_rows(out: &mut String, scope: &str, metric: &str, s: &Summary) {
    for (stat, v) in [("n", s.n as f64), ("mean", s.mean), ("std", s.std), ("min", s.min), ("p95", s.p95), ("max", s.max)] {
        let _ = writeln!(out, "{scope},{metric}_{stat},,{v}");
    }
}

impl Metrics {
    /// Flat `scope,metric,index,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scope,metric,index,value\n");
        for (name, v) in &self.vessels {
            let _ = writeln!(s, "{name},centerline_points,,{}", v.centerline_points);
            let _ = writeln!(s, "{name},length_mm,,{}", v.length_mm);
            summary_rows(&mut s, name, "centerline_error_mm", &v.centerline_error_mm);
            if let Some(d) = &v.dsc {
                summary_rows(&mut s, name, "dsc", d);
            }
            for (i, d) in v.dsc_values.iter().enumerate() {
                let _ = writeln!(s, "{name},dsc,{i},{d}");
            }
        }
        if let Some(m) = &self.mesh {
            let w = &m.watertight;
            let _ = writeln!(s, "mesh,is_watertight,,{}", u8::from(w.is_watertight));
            let _ = writeln!(s, "mesh,components,,{}", w.components);
            let _ = writeln!(s, "mesh,euler_characteristic,,{}", w.euler_characteristic);
            let _ = writeln!(s, "mesh,boundary_edges,,{}", w.boundary_edges);
            let _ = writeln!(s, "mesh,hausdorff_mm,,{}", m.hausdorff_mm);
            summary_rows(&mut s, "mesh", "mesh_to_truth_mm", &m.mesh_to_truth_mm);
            if let Some(t) = &m.truth_to_mesh_mm {
                summary_rows(&mut s, "mesh", "truth_to_mesh_mm", t);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((s.n, s.mean, s.min, s.max), (4, 2.5, 1.0, 4.0));
        assert!((s.std - 1.25f64.sqrt()).abs() < 1e-12);
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn polyline_distance() {
        let line = [Vec3::zeros(), Vec3::new(10.0, 0.0, 0.0)];
        assert!((distance_to_polyline(&line, Vec3::new(5.0, 3.0, 0.0)) - 3.0).abs() < 1e-12);
        assert!((distance_to_polyline(&line, Vec3::new(-4.0, 3.0, 0.0)) - 5.0).abs() < 1e-12);
    }
}
