//! Synthetic tubular phantoms with analytic ground truth.
//!
//! A phantom is a set of tubes, each a centerline curve (polyline with circular fillets, or a
//! single circular arc) swept by a piecewise-linear radius. Voxel intensity is
//! `out + (in - out) · occ(p) + noise`, where the occupancy `occ` of one tube is
//! `sigmoid((r(s*) - d(p)) / w)` and tubes are united with `1 - Π(1 - occ_i)`.
//!
//! Noise is a hash of (voxel index, seed), so the same lattice can be sampled lazily
//! through [`LatticePhantom`] or materialized into a [`ScalarVolume`] with identical values.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::least_aligned_axis;
use crate::polar::{ring_angle, Contour, PlaneFrame};
use crate::volume::{Grid, IntensityField, LabelVolume, ScalarVolume};
use crate::{Mat3, Vec3};

const ATTACH_TOL_MM: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CurveSpec {
    /// Straight runs between `points`, with interior corners rounded by circular fillets.
    Polyline {
        points: Vec<Vec3>,
        #[serde(default)]
        fillet_mm: f64,
    },
    /// Circular arc starting at `start`, turning about `axis` (right-hand rule) around `center`.
    Arc { center: Vec3, start: Vec3, axis: Vec3, angle_deg: f64 },
}

impl CurveSpec {
    pub fn line(a: Vec3, b: Vec3) -> Self {
        CurveSpec::Polyline { points: vec![a, b], fillet_mm: 0.0 }
    }

    fn map_points(&self, f: impl Fn(Vec3) -> Vec3, dir: impl Fn(Vec3) -> Vec3, scale: f64) -> Self {
        match self {
            CurveSpec::Polyline { points, fillet_mm } => CurveSpec::Polyline {
                points: points.iter().map(|&p| f(p)).collect(),
                fillet_mm: fillet_mm * scale,
            },
            CurveSpec::Arc { center, start, axis, angle_deg } => CurveSpec::Arc {
                center: f(*center),
                start: f(*start),
                axis: dir(*axis),
                angle_deg: *angle_deg,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Segment {
    Line { a: Vec3, dir: Vec3, len: f64 },
    /// `center + radius · (cos θ · u + sin θ · w)` for θ in `[0, angle]`.
    Arc { center: Vec3, radius: f64, u: Vec3, w: Vec3, angle: f64 },
}

impl Segment {
    fn length(&self) -> f64 {
        match *self {
            Segment::Line { len, .. } => len,
            Segment::Arc { radius, angle, .. } => radius * angle,
        }
    }

    fn point(&self, s: f64) -> Vec3 {
        match *self {
            Segment::Line { a, dir, .. } => a + dir * s,
            Segment::Arc { center, radius, u, w, .. } => {
                let t = s / radius;
                center + (u * t.cos() + w * t.sin()) * radius
            }
        }
    }

    fn tangent(&self, s: f64) -> Vec3 {
        match *self {
            Segment::Line { dir, .. } => dir,
            Segment::Arc { radius, u, w, .. } => {
                let t = s / radius;
                (w * t.cos() - u * t.sin()).normalize()
            }
        }
    }

    /// Local arclength of the closest point and its squared distance.
    fn closest(&self, p: Vec3) -> (f64, f64) {
        match *self {
            Segment::Line { a, dir, len } => {
                let s = (p - a).dot(dir).clamp(0.0, len);
                (s, (a + dir * s - p).norm_squared())
            }
            Segment::Arc { center, radius, u, w, angle } => {
                let q = p - center;
                let phi = q.dot(w).atan2(q.dot(u));
                let phi = if phi < 0.0 { phi + std::f64::consts::TAU } else { phi };
                let s = if (0.0..=angle).contains(&phi) {
                    phi * radius
                } else {
                    let d0 = (self.point(0.0) - p).norm_squared();
                    let d1 = (self.point(angle * radius) - p).norm_squared();
                    if d0 <= d1 {
                        0.0
                    } else {
                        angle * radius
                    }
                };
                (s, (self.point(s) - p).norm_squared())
            }
        }
    }
}

/// Arclength-parameterized centerline built from a [`CurveSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    segments: Vec<Segment>,
    starts: Vec<f64>,
    length: f64,
}

impl Curve {
    pub fn new(spec: &CurveSpec) -> Result<Self> {
        let segments = match spec {
            CurveSpec::Polyline { points, fillet_mm } => polyline_segments(points, *fillet_mm)?,
            CurveSpec::Arc { center, start, axis, angle_deg } => {
                let radial = *start - *center;
                let radius = radial.norm();
                let axis = axis.normalize();
                if radius <= 0.0 || axis.norm() == 0.0 || *angle_deg <= 0.0 {
                    return Err(Error::Phantom("degenerate arc".into()));
                }
                if radial.dot(axis).abs() > 1e-9 * radius {
                    return Err(Error::Phantom("arc start must lie in the plane orthogonal to its axis".into()));
                }
                let u = radial.normalize();
                let w = axis.cross(u);
                vec![Segment::Arc { center: *center, radius, u, w, angle: angle_deg.to_radians() }]
            }
        };
        let mut starts = Vec::with_capacity(segments.len());
        let mut acc = 0.0;
        for seg in &segments {
            starts.push(acc);
            acc += seg.length();
        }
        Ok(Self { segments, starts, length: acc })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.length);
        let i = match self.starts.binary_search_by(|v| v.partial_cmp(&s).unwrap()) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        (i, s - self.starts[i])
    }

    pub fn point_at(&self, s: f64) -> Vec3 {
        let (i, local) = self.locate(s);
        self.segments[i].point(local)
    }

    pub fn tangent_at(&self, s: f64) -> Vec3 {
        let (i, local) = self.locate(s);
        self.segments[i].tangent(local)
    }

    /// Arclength of the closest centerline point and the distance to it.
    pub fn closest(&self, p: Vec3) -> (f64, f64) {
        let mut best = (0.0, f64::INFINITY);
        for (seg, &s0) in self.segments.iter().zip(&self.starts) {
            let (s, d2) = seg.closest(p);
            if d2 < best.1 {
                best = (s0 + s, d2);
            }
        }
        (best.0, best.1.sqrt())
    }
}

fn polyline_segments(points: &[Vec3], fillet: f64) -> Result<Vec<Segment>> {
    if points.len() < 2 {
        return Err(Error::Phantom("polyline needs at least two points".into()));
    }
    for w in points.windows(2) {
        if (w[1] - w[0]).norm() < 1e-9 {
            return Err(Error::Phantom("degenerate curve: repeated consecutive points".into()));
        }
    }
    // For each interior corner: (tangent length, fillet start, fillet end, arc).
    let mut cut = vec![0.0; points.len()];
    let mut arcs: Vec<Option<Segment>> = vec![None; points.len()];
    for i in 1..points.len() - 1 {
        let a = (points[i] - points[i - 1]).normalize();
        let b = (points[i + 1] - points[i]).normalize();
        let turn = a.angle(b);
        if turn < 1e-9 {
            continue;
        }
        if fillet <= 0.0 {
            return Err(Error::Phantom("polyline corners need a positive fillet radius".into()));
        }
        let t = fillet * (turn / 2.0).tan();
        let start = points[i] - a * t;
        let inward = (b - a * b.dot(a)).normalize();
        let center = start + inward * fillet;
        let u = (start - center).normalize();
        arcs[i] = Some(Segment::Arc { center, radius: fillet, u, w: a, angle: turn });
        cut[i] = t;
    }
    let mut segs = Vec::new();
    for i in 0..points.len() - 1 {
        let dir = (points[i + 1] - points[i]).normalize();
        let full = (points[i + 1] - points[i]).norm();
        let len = full - cut[i] - cut[i + 1];
        if len < -1e-9 {
            return Err(Error::Phantom(format!("fillet radius {fillet} mm too large for segment {i}")));
        }
        if let Some(arc) = arcs[i] {
            segs.push(arc);
        }
        if len > 1e-12 {
            segs.push(Segment::Line { a: points[i] + dir * cut[i], dir, len });
        }
    }
    Ok(segs)
}

/// Radius in mm as a piecewise-linear function of arclength, clamped at both ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RadiusProfile {
    Constant(f64),
    /// `(arclength mm, radius mm)` knots, increasing in arclength.
    Knots(Vec<(f64, f64)>),
}

impl RadiusProfile {
    pub fn at(&self, s: f64) -> f64 {
        match self {
            RadiusProfile::Constant(r) => *r,
            RadiusProfile::Knots(k) => {
                if s <= k[0].0 {
                    return k[0].1;
                }
                for w in k.windows(2) {
                    if s <= w[1].0 {
                        let t = (s - w[0].0) / (w[1].0 - w[0].0);
                        return w[0].1 + t * (w[1].1 - w[0].1);
                    }
                }
                k[k.len() - 1].1
            }
        }
    }

    pub fn max(&self) -> f64 {
        match self {
            RadiusProfile::Constant(r) => *r,
            RadiusProfile::Knots(k) => k.iter().map(|k| k.1).fold(f64::MIN, f64::max),
        }
    }

    fn min(&self) -> f64 {
        match self {
            RadiusProfile::Constant(r) => *r,
            RadiusProfile::Knots(k) => k.iter().map(|k| k.1).fold(f64::MAX, f64::min),
        }
    }

    fn scaled(&self, s: f64) -> Self {
        match self {
            RadiusProfile::Constant(r) => RadiusProfile::Constant(r * s),
            RadiusProfile::Knots(k) => RadiusProfile::Knots(k.iter().map(|&(a, r)| (a * s, r * s)).collect()),
        }
    }
}

fn default_in() -> f64 {
    1.0
}

fn default_edge() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeSpec {
    pub centerline: CurveSpec,
    pub radius: RadiusProfile,
    #[serde(default = "default_in")]
    pub intensity_in: f64,
    #[serde(default)]
    pub intensity_out: f64,
    /// Sigmoid transition width in mm; 0 gives a hard edge.
    #[serde(default = "default_edge")]
    pub edge_smoothness: f64,
    #[serde(default)]
    pub noise_sigma: f64,
}

impl TubeSpec {
    pub fn straight(a: Vec3, b: Vec3, radius: f64) -> Self {
        Self {
            centerline: CurveSpec::line(a, b),
            radius: RadiusProfile::Constant(radius),
            intensity_in: 1.0,
            intensity_out: 0.0,
            edge_smoothness: default_edge(),
            noise_sigma: 0.0,
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<Curve> {
        let curve = Curve::new(&self.centerline)?;
        if self.radius.min() <= 0.0 {
            return Err(Error::Phantom("radius must be positive everywhere".into()));
        }
        if let RadiusProfile::Knots(k) = &self.radius {
            if k.is_empty() || k.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(Error::Phantom("radius knots must be non-empty and strictly increasing".into()));
            }
        }
        if curve.length() <= 4.0 * self.radius.max() {
            return Err(Error::Phantom(format!(
                "centerline length {:.2} mm must exceed 4 x max radius {:.2} mm",
                curve.length(),
                self.radius.max()
            )));
        }
        if self.edge_smoothness < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Phantom("edge smoothness and noise must be non-negative".into()));
        }
        Ok(curve)
    }

    /// Spec mapped through `p ↦ s · Q p + t`; radii and edge width scale by `s`.
    pub fn transformed(&self, rot: &Mat3, translation: Vec3, scale: f64) -> Self {
        let f = |p: Vec3| (*rot * p) * scale + translation;
        let d = |v: Vec3| *rot * v;
        Self {
            centerline: self.centerline.map_points(f, d, scale),
            radius: self.radius.scaled(scale),
            edge_smoothness: self.edge_smoothness * scale,
            ..self.clone()
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// A validated tube ready for evaluation.
#[derive(Clone, Debug)]
pub struct Tube {
    pub name: String,
    pub spec: TubeSpec,
    pub curve: Curve,
}

impl Tube {
    pub fn new(name: impl Into<String>, spec: TubeSpec) -> Result<Self> {
        let curve = spec.validate()?;
        Ok(Self { name: name.into(), spec, curve })
    }

    /// Occupancy in [0, 1]: 0.5 exactly on the nominal surface.
    pub fn occupancy(&self, p: Vec3) -> f64 {
        let (s, d) = self.curve.closest(p);
        let r = self.spec.radius.at(s);
        let w = self.spec.edge_smoothness;
        if w > 0.0 {
            sigmoid((r - d) / w)
        } else if d < r {
            1.0
        } else if d > r {
            0.0
        } else {
            0.5
        }
    }

    pub fn truth(&self, spacing_mm: f64) -> PhantomTruth {
        let n = (self.curve.length() / spacing_mm).floor() as usize;
        let mut samples = Vec::with_capacity(n + 1);
        let mut e1_prev: Option<Vec3> = None;
        for i in 0..=n {
            let s = i as f64 * spacing_mm;
            let t = self.curve.tangent_at(s);
            let e1 = match e1_prev {
                Some(prev) => {
                    let q = prev - t * prev.dot(t);
                    if q.norm() < 1e-6 {
                        least_aligned_axis(t).cross(t).normalize()
                    } else {
                        q.normalize()
                    }
                }
                None => least_aligned_axis(t).cross(t).normalize(),
            };
            e1_prev = Some(e1);
            samples.push(TruthSample {
                s,
                center: self.curve.point_at(s),
                normal: t,
                e1,
                radius: self.spec.radius.at(s),
            });
        }
        PhantomTruth { name: self.name.clone(), spacing_mm, samples }
    }
}

/// Ground-truth centerline sample and its circular lumen contour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSample {
    pub s: f64,
    pub center: Vec3,
    /// Unit centerline tangent; normal of the contour plane.
    pub normal: Vec3,
    pub e1: Vec3,
    pub radius: f64,
}

impl TruthSample {
    pub fn e2(&self) -> Vec3 {
        self.normal.cross(self.e1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub name: String,
    pub spacing_mm: f64,
    pub samples: Vec<TruthSample>,
}

impl PhantomTruth {
    /// Distance from `p` to the sampled centerline polyline.
    pub fn distance_to_centerline(&self, p: Vec3) -> f64 {
        if self.samples.len() == 1 {
            return self.samples[0].center.distance(p);
        }
        self.samples
            .windows(2)
            .map(|w| {
                let (a, b) = (w[0].center, w[1].center);
                let ab = b - a;
                let t = ((p - a).dot(ab) / ab.norm_squared()).clamp(0.0, 1.0);
                (a + ab * t).distance(p)
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        self.distance_to_centerline(p) < self.nearest_sample(p).radius
    }

    /// Lumen cross-section in the plane of `frame` as a polar contour about its center: along
    /// each ray, the first exit from the tube. Rays from a center outside the lumen have radius 0.
    pub fn section(&self, frame: &PlaneFrame, n_phi: usize) -> Contour {
        let r_max = self.samples.iter().map(|s| s.radius).fold(0.0, f64::max);
        let reach = 4.0 * r_max;
        let step = r_max / 16.0;
        let radii = (0..n_phi)
            .map(|k| {
                let dir = frame.direction(ring_angle(k, n_phi));
                let at = |r: f64| self.contains(frame.center + dir * r);
                if !at(0.0) {
                    return 0.0;
                }
                let mut lo = 0.0;
                while lo + step < reach && at(lo + step) {
                    lo += step;
                }
                let mut hi = (lo + step).min(reach);
                if at(hi) {
                    return hi;
                }
                for _ in 0..40 {
                    let mid = 0.5 * (lo + hi);
                    if at(mid) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            })
            .collect();
        Contour { frame: *frame, r_tilde: reach, radii }
    }

    /// Radius interpolated at the closest centerline sample.
    pub fn nearest_sample(&self, p: Vec3) -> &TruthSample {
        self.samples
            .iter()
            .min_by(|a, b| a.center.distance(p).partial_cmp(&b.center.distance(p)).unwrap())
            .expect("truth has samples")
    }
}

/// A set of tubes united into one intensity field. Intensities come from the first tube.
#[derive(Clone, Debug)]
pub struct Scene {
    pub tubes: Vec<Tube>,
}

impl Scene {
    pub fn new(tubes: Vec<Tube>) -> Result<Self> {
        if tubes.is_empty() {
            return Err(Error::Phantom("scene needs at least one tube".into()));
        }
        Ok(Self { tubes })
    }

    pub fn single(spec: TubeSpec) -> Result<Self> {
        Self::new(vec![Tube::new("tube", spec)?])
    }

    pub fn occupancy(&self, p: Vec3) -> f64 {
        1.0 - self.tubes.iter().map(|t| 1.0 - t.occupancy(p)).product::<f64>()
    }

    pub fn clean_intensity(&self, p: Vec3) -> f64 {
        let s = &self.tubes[0].spec;
        s.intensity_out + (s.intensity_in - s.intensity_out) * self.occupancy(p)
    }

    pub fn noise_sigma(&self) -> f64 {
        self.tubes[0].spec.noise_sigma
    }

    /// Checks that the dilated tubes fit inside `grid`.
    pub fn check_fits(&self, grid: &Grid) -> Result<()> {
        let (lo, hi) = grid.bounds();
        for t in &self.tubes {
            let margin_extra = 3.0 * t.spec.edge_smoothness;
            let n = (t.curve.length() / 0.5).ceil() as usize;
            for i in 0..=n {
                let s = t.curve.length() * i as f64 / n as f64;
                let c = t.curve.point_at(s);
                let m = t.spec.radius.at(s) + margin_extra;
                let (a, b) = (c - Vec3::splat(m), c + Vec3::splat(m));
                if (0..3).any(|k| a[k] < lo[k] || b[k] > hi[k]) {
                    return Err(Error::Phantom(format!("tube `{}` exits the grid near {:?}", t.name, c)));
                }
            }
        }
        Ok(())
    }

    pub fn truths(&self, spacing_mm: f64) -> Vec<PhantomTruth> {
        self.tubes.iter().map(|t| t.truth(spacing_mm)).collect()
    }
}

impl IntensityField for Scene {
    fn intensity(&self, p: Vec3) -> f64 {
        self.clean_intensity(p)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic standard-normal sample keyed by a lattice index and seed.
pub fn lattice_noise(i: i64, j: i64, k: i64, seed: u64) -> f64 {
    let h = splitmix(seed ^ splitmix((i as u64).wrapping_mul(0x1000_0000_01B3) ^ splitmix(
        (j as u64).wrapping_mul(0x0000_0100_0000_01B3) ^ splitmix(k as u64),
    )));
    let h2 = splitmix(h);
    let u1 = ((h >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    let u2 = ((h2 >> 11) as f64) / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// The scene voxelized on an unbounded lattice, sampled lazily with trilinear interpolation.
/// Materializing the same lattice over a finite [`Grid`] gives identical voxel values.
#[derive(Clone, Debug)]
pub struct LatticePhantom {
    pub scene: Scene,
    pub spacing: Vec3,
    pub origin: Vec3,
    pub seed: u64,
}

impl LatticePhantom {
    pub fn new(scene: Scene, spacing: Vec3, origin: Vec3, seed: u64) -> Self {
        Self { scene, spacing, origin, seed }
    }

    pub fn voxel_value(&self, i: i64, j: i64, k: i64) -> f64 {
        let p = self.origin + Vec3::new(i as f64, j as f64, k as f64).component_mul(self.spacing);
        let clean = self.scene.clean_intensity(p);
        let sigma = self.scene.noise_sigma();
        if sigma > 0.0 {
            clean + sigma * lattice_noise(i, j, k, self.seed)
        } else {
            clean
        }
    }

    pub fn materialize(&self, dims: [usize; 3]) -> Result<ScalarVolume> {
        let grid = Grid::new(dims, self.spacing, self.origin)?;
        ScalarVolume::from_fn(grid, |p| {
            let c = grid.world_to_voxel(p);
            self.voxel_value(c.x.round() as i64, c.y.round() as i64, c.z.round() as i64) as f32
        })
    }
}

impl IntensityField for LatticePhantom {
    fn intensity(&self, p: Vec3) -> f64 {
        let c = (p - self.origin).component_div(self.spacing);
        let b = [c.x.floor(), c.y.floor(), c.z.floor()];
        let f = [c.x - b[0], c.y - b[1], c.z - b[2]];
        let (i, j, k) = (b[0] as i64, b[1] as i64, b[2] as i64);
        let v = |di: i64, dj: i64, dk: i64| self.voxel_value(i + di, j + dj, k + dk);
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(v(0, 0, 0), v(1, 0, 0), f[0]);
        let c10 = lerp(v(0, 1, 0), v(1, 1, 0), f[0]);
        let c01 = lerp(v(0, 0, 1), v(1, 0, 1), f[0]);
        let c11 = lerp(v(0, 1, 1), v(1, 1, 1), f[0]);
        lerp(lerp(c00, c10, f[1]), lerp(c01, c11, f[1]), f[2])
    }
}

/// Voxelizes a single tube on `grid`. Truth is sampled every `truth_spacing_mm` of arclength.
pub fn gen_tube_volume(
    spec: &TubeSpec,
    grid: &Grid,
    rng_seed: u64,
    truth_spacing_mm: f64,
) -> Result<(ScalarVolume, PhantomTruth)> {
    let scene = Scene::single(spec.clone())?;
    gen_scene_volume(&scene, grid, rng_seed, truth_spacing_mm).map(|(v, mut t)| (v, t.remove(0)))
}

pub fn gen_scene_volume(
    scene: &Scene,
    grid: &Grid,
    rng_seed: u64,
    truth_spacing_mm: f64,
) -> Result<(ScalarVolume, Vec<PhantomTruth>)> {
    grid.validate()?;
    scene.check_fits(grid)?;
    let lattice = LatticePhantom::new(scene.clone(), grid.spacing, grid.origin, rng_seed);
    let vol = lattice.materialize(grid.dims)?.with_fill(scene.tubes[0].spec.intensity_out as f32);
    Ok((vol, scene.truths(truth_spacing_mm)))
}

/// Parent tube with two children whose centerlines start on the parent's centerline.
pub fn gen_bifurcation(
    parent: &TubeSpec,
    children: [&TubeSpec; 2],
    grid: &Grid,
    rng_seed: u64,
    truth_spacing_mm: f64,
) -> Result<(ScalarVolume, Vec<PhantomTruth>)> {
    let p = Tube::new("parent", parent.clone())?;
    let mut tubes = vec![p];
    for (i, c) in children.into_iter().enumerate() {
        let tube = Tube::new(format!("child{}", i + 1), c.clone())?;
        check_attached(&tubes[0], &tube)?;
        tubes.push(tube);
    }
    gen_scene_volume(&Scene::new(tubes)?, grid, rng_seed, truth_spacing_mm)
}

fn check_attached(parent: &Tube, child: &Tube) -> Result<()> {
    let start = child.curve.point_at(0.0);
    let (_, d) = parent.curve.closest(start);
    if d > ATTACH_TOL_MM {
        return Err(Error::Phantom(format!(
            "child `{}` starts {d:.3} mm away from parent `{}` centerline",
            child.name, parent.name
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Above,
    Below,
}

/// Half-space `world[axis] > threshold` (above) or `< threshold` (below).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slab {
    pub axis: Axis,
    pub threshold_mm: f64,
    pub side: Side,
}

impl Slab {
    pub fn contains(&self, p: Vec3) -> bool {
        let v = p[self.axis.index()];
        match self.side {
            Side::Above => v > self.threshold_mm,
            Side::Below => v < self.threshold_mm,
        }
    }
}

/// One labelled region of a controller mask volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MaskRegion {
    /// Voxels within `radius + dilation_mm` of a vessel centerline.
    Tube { name: String, vessel: String, dilation_mm: f64 },
    Slab {
        name: String,
        #[serde(flatten)]
        slab: Slab,
    },
    /// Spherical organ surrogate.
    Blob { name: String, center: Vec3, radius_mm: f64 },
}

impl MaskRegion {
    pub fn name(&self) -> &str {
        match self {
            MaskRegion::Tube { name, .. } | MaskRegion::Slab { name, .. } | MaskRegion::Blob { name, .. } => name,
        }
    }
}

/// Rasterizes the mask regions; earlier regions win where they overlap. Ids are assigned
/// 1.. in list order, with `background` = 0.
pub fn gen_controller_masks(truths: &[PhantomTruth], regions: &[MaskRegion], grid: &Grid) -> Result<LabelVolume> {
    grid.validate()?;
    let mut labels = BTreeMap::new();
    labels.insert("background".to_string(), 0u16);
    for (i, r) in regions.iter().enumerate() {
        if labels.insert(r.name().to_string(), (i + 1) as u16).is_some() {
            return Err(Error::Config(format!("duplicate mask region `{}`", r.name())));
        }
    }
    let mut tube_refs = Vec::with_capacity(regions.len());
    for r in regions {
        tube_refs.push(match r {
            MaskRegion::Tube { vessel, .. } => Some(
                truths
                    .iter()
                    .find(|t| &t.name == vessel)
                    .ok_or_else(|| Error::UnknownLabel(vessel.clone()))?,
            ),
            _ => None,
        });
    }
    let inside = |r: &MaskRegion, truth: Option<&PhantomTruth>, p: Vec3| -> bool {
        match r {
            MaskRegion::Tube { dilation_mm, .. } => {
                let t = truth.expect("resolved above");
                let d = t.distance_to_centerline(p);
                let rad = t.nearest_sample(p).radius;
                d <= rad + dilation_mm
            }
            MaskRegion::Slab { slab, .. } => slab.contains(p),
            MaskRegion::Blob { center, radius_mm, .. } => center.distance(p) <= *radius_mm,
        }
    };
    use rayon::prelude::*;
    let data: Vec<u16> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let [i, j, k] = grid.unravel(idx);
            let p = grid.voxel_center(i, j, k);
            regions
                .iter()
                .zip(&tube_refs)
                .position(|(r, t)| inside(r, *t, p))
                .map_or(0, |i| (i + 1) as u16)
        })
        .collect();
    for (i, r) in regions.iter().enumerate() {
        if !data.contains(&((i + 1) as u16)) {
            return Err(Error::EmptyLabel(r.name().to_string()));
        }
    }
    LabelVolume::new(*grid, data, labels)
}

/// Straight tube through `center` with direction `dir`, long enough for `scale_margin`.
pub fn straight_through(center: Vec3, dir: Vec3, half_length: f64, radius: f64) -> TubeSpec {
    let d = dir.normalize();
    TubeSpec::straight(center - d * half_length, center + d * half_length, radius)
}

/// Uniformly random unit vector.
pub fn random_direction<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Log-uniform sample in `[lo, hi]`.
pub fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..=hi.ln())).exp()
}

/// One named tube of a phantom spec; `parent` names the tube its centerline starts on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTube {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(flatten)]
    pub spec: TubeSpec,
}

fn default_truth_spacing() -> f64 {
    1.0
}

/// On-disk phantom description: grid, tubes and controller mask regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid: Grid,
    pub tubes: Vec<NamedTube>,
    #[serde(default)]
    pub regions: Vec<MaskRegion>,
    #[serde(default = "default_truth_spacing")]
    pub truth_spacing_mm: f64,
}

pub struct GeneratedPhantom {
    pub volume: ScalarVolume,
    pub masks: Option<LabelVolume>,
    pub truths: Vec<PhantomTruth>,
}

impl PhantomSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.truth_spacing_mm > 0.0) {
            return Err(Error::Phantom("truth spacing must be positive".into()));
        }
        self.scene().map(|_| ())
    }

    fn scene(&self) -> Result<Scene> {
        let mut tubes: Vec<Tube> = Vec::with_capacity(self.tubes.len());
        for t in &self.tubes {
            if tubes.iter().any(|u| u.name == t.name) {
                return Err(Error::Phantom(format!("duplicate tube `{}`", t.name)));
            }
            let tube = Tube::new(t.name.clone(), t.spec.clone())?;
            if let Some(parent) = &t.parent {
                let p = tubes
                    .iter()
                    .find(|u| &u.name == parent)
                    .ok_or_else(|| Error::Phantom(format!("tube `{}` names unknown parent `{parent}`", t.name)))?;
                check_attached(p, &tube)?;
            }
            tubes.push(tube);
        }
        Scene::new(tubes)
    }

    pub fn generate(&self, seed: u64) -> Result<GeneratedPhantom> {
        let (volume, truths) = gen_scene_volume(&self.scene()?, &self.grid, seed, self.truth_spacing_mm)?;
        let masks = if self.regions.is_empty() {
            None
        } else {
            Some(gen_controller_masks(&truths, &self.regions, &self.grid)?)
        };
        Ok(GeneratedPhantom { volume, masks, truths })
    }

    /// Aorta with an iliac branch at its lower end and a renal branch ending in a kidney blob.
    /// The aorta runs along z from z = 180 to z = -40; termination slabs for the controller sit
    /// at z = 80 (z = 120 for the extended variant) and z = -130.
    pub fn three_vessel() -> Self {
        let tube = |a: Vec3, b: Vec3, r: f64| TubeSpec::straight(a, b, r).with_noise(0.1);
        let junction = Vec3::new(0.0, 0.0, -40.0);
        let renal_root = Vec3::new(0.0, 0.0, 10.0);
        let tubes = vec![
            NamedTube { name: "aorta".into(), parent: None, spec: tube(Vec3::new(0.0, 0.0, 180.0), junction, 10.0) },
            NamedTube { name: "iliac".into(), parent: Some("aorta".into()), spec: tube(junction, Vec3::new(65.0, 0.0, -170.0), 6.0) },
            NamedTube { name: "renal".into(), parent: Some("aorta".into()), spec: tube(renal_root, Vec3::new(0.0, 95.0, 10.0), 3.0) },
        ];
        let regions = vec![
            MaskRegion::Tube { name: "aorta".into(), vessel: "aorta".into(), dilation_mm: 2.0 },
            MaskRegion::Tube { name: "iliac".into(), vessel: "iliac".into(), dilation_mm: 2.0 },
            MaskRegion::Blob { name: "kidney".into(), center: Vec3::new(0.0, 85.0, 10.0), radius_mm: 14.0 },
        ];
        let grid = Grid { dims: [111, 136, 381], spacing: Vec3::splat(1.0), origin: Vec3::new(-25.0, -25.0, -180.0) };
        Self { grid, tubes, regions, truth_spacing_mm: 1.0 }
    }
}
