//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtrack::controller::{BoundaryConditions, Region, ResolvedVessel};
use vtrack::nn::layers::{column_softmax, column_softmax_backward, Activation, Conv2dCircular, Dense, GraphConv, GraphConvOn};
use vtrack::nn::{grad_check, Differentiable, GradCheckOptions, Parameterized, Tensor};
use vtrack::orientation::{aggregate_max, extract_directions, refine_direction, select_scale};
use vtrack::phantom::{
    random_direction, straight_through, Axis, CurveSpec, LatticePhantom, PhantomTruth, Scene, Side, Slab, Tube, TubeSpec,
};
use vtrack::polar::{
    contour_dsc, heatmap_to_radii, heatmap_to_radii_backward, predict_contour, synth_contour_dataset, train_contour, Contour,
    ContourCnn, ContourSynthConfig, PlaneFrame, DEFAULT_NPHI, DEFAULT_NR,
};
use vtrack::sphere::{
    gcn_forward, icosahedral_rotations, multi_scale_forward, project_features, Icosphere, OrientationNet, OrientationNetOn,
    ScaleSet, SphericalFeature, DEFAULT_LEVEL, DEFAULT_SAMPLES,
};
use vtrack::surface::{
    fit_neural_field, marching_cubes, mesh_watertight, smin, split_held_out, FieldFitConfig, McGrid, Mesh, NeuralField, Sdf,
};
use vtrack::tracker::{track_vessel, Models, TrackConfig, TrackedVessel, Termination};
use vtrack::volume::{load_volume, LabelVolume, ScalarVolume};
use vtrack::{Mat3, Vec3};
use vtrack_cli::config::{ContourTraining, ReconstructConfig};
use vtrack_cli::run::{load_contour, load_orientation, read_tracks};

const SEED: u64 = 7;
const GRAD_TOL: f64 = 1e-3;
const VOXEL_MM: f64 = 1.0;
const DELTA_MM: f64 = 1.0;

type Checks = Vec<(bool, String)>;

fn check(out: &mut Checks, pass: bool, text: String) {
    out.push((pass, text));
}

// ---------------------------------------------------------------- pipeline runs

struct Run {
    dir: PathBuf,
    steps: Vec<(String, Duration)>,
}

impl Run {
    fn total(&self) -> Duration {
        self.steps.iter().map(|(_, d)| *d).sum()
    }
}

/// The default three-vessel pipeline through the binary, one subcommand at a time.
fn pipeline(dir: &Path, threads: usize) -> Result<Run> {
    let mut steps = Vec::new();
    let out = dir.to_str().context("utf-8 path")?;
    let (seed, threads) = (SEED.to_string(), threads.to_string());
    for cmd in [&["phantom"][..], &["train", "orient"], &["train", "contour"], &["track"], &["reconstruct"], &["evaluate"]] {
        let t = Instant::now();
        let mut args = vec!["--seed", &seed, "--out", out, "--threads", &threads];
        args.extend_from_slice(cmd);
        let o = Command::new(env!("CARGO_BIN_EXE_vtrack")).args(&args).output().context("spawning vtrack")?;
        if !o.status.success() {
            bail!("`vtrack {}` failed: {}", cmd.join(" "), String::from_utf8_lossy(&o.stderr));
        }
        steps.push((cmd.join(" "), t.elapsed()));
    }
    Ok(Run { dir: dir.to_path_buf(), steps })
}

struct Shared {
    run: Run,
    orientation: OrientationNet<f32>,
    contour: ContourCnn<f32>,
    sphere: Icosphere<f64>,
    scales: ScaleSet,
    vol: ScalarVolume,
    masks: Arc<LabelVolume>,
    truths: Vec<PhantomTruth>,
    controller: BTreeMap<String, ResolvedVessel>,
    tracks: Vec<TrackedVessel>,
}

impl Shared {
    fn load(run: Run) -> Result<Self> {
        let d = &run.dir;
        let read = |name: &str| fs::read_to_string(d.join(name)).with_context(|| format!("reading {name}"));
        Ok(Self {
            orientation: load_orientation(&d.join("orientation.json"), DEFAULT_SAMPLES)?,
            contour: load_contour(&d.join("contour.json"))?,
            sphere: Icosphere::build(DEFAULT_LEVEL),
            scales: ScaleSet::standard(),
            vol: load_volume(d.join("volume.json"))?.into_scalar()?,
            masks: Arc::new(load_volume(d.join("masks.json"))?.into_labels()?),
            truths: serde_json::from_str(&read("truth.json")?)?,
            controller: serde_json::from_str(&read("controller.json")?)?,
            tracks: read_tracks(&d.join("tracks"))?,
            run,
        })
    }

    fn models(&self) -> Models<'_> {
        Models { orientation: &self.orientation, contour: &self.contour, sphere: &self.sphere, scales: &self.scales }
    }

    fn truth(&self, name: &str) -> Result<&PhantomTruth> {
        self.truths.iter().find(|t| t.name == name).with_context(|| format!("no truth for `{name}`"))
    }

    fn track(&self, name: &str) -> Result<&TrackedVessel> {
        self.tracks.iter().find(|t| t.name == name).with_context(|| format!("no track for `{name}`"))
    }
}

// ---------------------------------------------------------------- 1: gradients

macro_rules! stateless {
    ($t:ty) => {
        impl Parameterized<f64> for $t {
            fn param_names(&self) -> Vec<String> {
                vec![]
            }
            fn params(&self) -> Vec<&Tensor<f64>> {
                vec![]
            }
            fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
                vec![]
            }
        }
    };
}

struct Act(Activation);
struct Softmax;
struct SoftArgmax(f64);
stateless!(Act);
stateless!(Softmax);
stateless!(SoftArgmax);

impl Differentiable<f64> for Act {
    fn eval(&self, x: &Tensor<f64>) -> vtrack::Result<Tensor<f64>> {
        Ok(self.0.apply(x))
    }
    fn vjp(&self, x: &Tensor<f64>, dy: &Tensor<f64>) -> vtrack::Result<(Vec<Tensor<f64>>, Tensor<f64>)> {
        Ok((vec![], self.0.backward(x, dy)))
    }
}

impl Differentiable<f64> for Softmax {
    fn eval(&self, x: &Tensor<f64>) -> vtrack::Result<Tensor<f64>> {
        Ok(column_softmax(x))
    }
    fn vjp(&self, x: &Tensor<f64>, dy: &Tensor<f64>) -> vtrack::Result<(Vec<Tensor<f64>>, Tensor<f64>)> {
        Ok((vec![], column_softmax_backward(&column_softmax(x), dy)))
    }
}

impl Differentiable<f64> for SoftArgmax {
    fn eval(&self, x: &Tensor<f64>) -> vtrack::Result<Tensor<f64>> {
        let r = heatmap_to_radii(x, self.0);
        Tensor::new(vec![r.len()], r)
    }
    fn vjp(&self, x: &Tensor<f64>, dy: &Tensor<f64>) -> vtrack::Result<(Vec<Tensor<f64>>, Tensor<f64>)> {
        Ok((vec![], heatmap_to_radii_backward(&dy.data, self.0, x.shape()[0])))
    }
}

fn rel_error<M: Differentiable<f64>>(m: &mut M, x: &Tensor<f64>, seed: u64) -> Result<f64> {
    let opts = GradCheckOptions { step: 1e-6, seed, ..Default::default() };
    Ok(grad_check(m, x, GRAD_TOL, opts)?.max_rel_error)
}

fn gradients() -> Result<Checks> {
    let t = Instant::now();
    let sphere = Icosphere::<f64>::build(DEFAULT_LEVEL);
    let small = Icosphere::<f64>::build(1);
    type Case<'a> = (&'a str, Box<dyn Fn(&mut ChaCha8Rng, u64) -> Result<f64> + 'a>);
    let cases: Vec<Case> = vec![
        ("dense", Box::new(|r, s| rel_error(&mut Dense::<f64>::init(9, 6, r), &Tensor::randn(&[5, 9], 1.0, r), s))),
        ("conv", Box::new(|r, s| rel_error(&mut Conv2dCircular::<f64>::init(3, 4, 3, r), &Tensor::randn(&[3, 6, 8], 1.0, r), s))),
        (
            "graph_conv",
            Box::new(|r, s| {
                let mut worst = 0f64;
                for act in [Activation::Identity, Activation::Relu, Activation::Sine { omega: 2.0 }] {
                    let mut m = GraphConvOn { layer: GraphConv::<f64>::init(5, 4, act, r), adj: &small.adjacency };
                    worst = worst.max(rel_error(&mut m, &Tensor::randn(&[small.len(), 5], 1.0, r), s)?);
                }
                Ok(worst)
            }),
        ),
        (
            "activations",
            Box::new(|r, s| {
                let x = Tensor::randn(&[4, 7], 1.0, r);
                let mut worst = 0f64;
                for act in [Activation::Identity, Activation::Relu, Activation::Sine { omega: 30.0 }] {
                    worst = worst.max(rel_error(&mut Act(act), &x, s)?);
                }
                Ok(worst)
            }),
        ),
        ("softmax", Box::new(|r, s| rel_error(&mut Softmax, &Tensor::randn(&[7, 5], 3.0, r), s))),
        (
            "soft_argmax",
            Box::new(|r, s| rel_error(&mut SoftArgmax(2.5 + s as f64), &column_softmax(&Tensor::randn(&[8, 6], 1.0, r)), s)),
        ),
        (
            "g",
            Box::new(|r, s| {
                let mut m = OrientationNetOn { net: OrientationNet::<f64>::init(8, r), adj: &sphere.adjacency };
                rel_error(&mut m, &Tensor::randn(&[sphere.len(), 8], 1.0, r), s)
            }),
        ),
        ("h", Box::new(|r, s| rel_error(&mut ContourCnn::<f64>::init(r), &Tensor::randn(&[1, 10, 12], 1.0, r), s))),
        (
            "field",
            Box::new(|r, s| {
                let mut m = NeuralField::<f64>::init(30.0, Vec3::new(1.0, -2.0, 3.0), Vec3::new(4.0, 5.0, 6.0), 10.0, r);
                rel_error(&mut m, &Tensor::uniform(&[6, 3], 0.9, r), s)
            }),
        ),
    ];
    let mut out = Checks::new();
    for (name, f) in &cases {
        let mut worst = 0f64;
        for seed in 0..10 {
            worst = worst.max(f(&mut ChaCha8Rng::seed_from_u64(1000 + seed), seed)?);
        }
        check(&mut out, worst < GRAD_TOL, format!("{name} {worst:.1e}"));
    }
    let dt = t.elapsed().as_secs_f64();
    check(&mut out, dt < 60.0, format!("{dt:.1} s for 10 seeds"));
    Ok(out)
}

// ---------------------------------------------------------------- 2: rotation equivariance

fn noise_free(spec: TubeSpec) -> Result<LatticePhantom> {
    Ok(LatticePhantom::new(Scene::single(spec)?, Vec3::splat(1.0), Vec3::splat(-0.5), 0))
}

fn axis_error(d: Vec3, t: Vec3) -> f64 {
    d.angle(t).min(d.angle(-t))
}

fn rotations(sh: &Shared) -> Result<Checks> {
    let mut out = Checks::new();
    let n = sh.orientation.n_samples();
    let mut worst = 0f64;
    let probes = [sh.controller["aorta"].seed.point, sh.controller["renal"].seed.point, Vec3::new(30.0, 20.0, -100.0)];
    let group = icosahedral_rotations::<f64>();
    for (p, r) in probes.iter().zip([10.0, 20.0, 40.0]) {
        let feat = project_features(&sh.vol, *p, r, &sh.sphere, n)?;
        let base = gcn_forward(&sh.orientation, &feat, &sh.sphere)?;
        for rot in &group {
            let perm = sh.sphere.rotation_permutation(rot).context("icosahedral rotation is not a mesh symmetry")?;
            let samples = perm.iter().flat_map(|&v| feat.ray(v).iter().copied()).collect();
            let moved = gcn_forward(&sh.orientation, &SphericalFeature { samples, ..feat.clone() }, &sh.sphere)?;
            for (v, &pv) in perm.iter().enumerate() {
                worst = worst.max((moved.values[v] - base.values[pv]).abs() as f64);
            }
        }
    }
    check(&mut out, group.len() == 60 && worst <= 1e-4, format!("{} group elements, max |Δ| {worst:.1e}", group.len()));

    let tol = 2.0 * sh.sphere.vertex_spacing;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut errs = Vec::new();
    for i in 0..20 {
        let rot = Mat3::random_rotation(rng.gen(), rng.gen(), rng.gen());
        let t = rot * Vec3::unit_z();
        let rho = [3.0, 5.0, 8.0, 12.0][i % 4];
        let lp = noise_free(straight_through(Vec3::zeros(), t, 120.0, rho))?;
        let f = aggregate_max(&multi_scale_forward(&sh.orientation, &lp, Vec3::zeros(), &sh.scales, &sh.sphere)?)?;
        let pair = extract_directions(&f, &sh.sphere)?;
        let d1 = refine_direction(&f, &sh.sphere, pair.v1);
        let d2 = refine_direction(&f, &sh.sphere, pair.v2);
        errs.push(axis_error(d1, t).max(axis_error(d2, t)));
    }
    let max = errs.iter().copied().fold(0.0, f64::max);
    check(
        &mut out,
        max <= tol,
        format!("20 rotated tubes, worst direction error {:.2}° (bound {:.2}°)", max.to_degrees(), tol.to_degrees()),
    );
    Ok(out)
}

// ---------------------------------------------------------------- 3: in-plane equivariance

fn segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = b - a;
    let t = if ab.norm_squared() > 0.0 { ((p - a).dot(ab) / ab.norm_squared()).clamp(0.0, 1.0) } else { 0.0 };
    (a + ab * t).distance(p)
}

/// Hausdorff distance between two closed polygons, vertices to edges both ways.
fn curve_hausdorff(a: &[Vec3], b: &[Vec3]) -> f64 {
    let one = |x: &[Vec3], y: &[Vec3]| {
        x.iter()
            .map(|&p| (0..y.len()).map(|i| segment_distance(p, y[i], y[(i + 1) % y.len()])).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    one(a, b).max(one(b, a))
}

fn in_plane(sh: &Shared) -> Result<Checks> {
    let mut out = Checks::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut shift_err, mut hd) = (0f64, 0f64);
    for rho in [3.0, 8.0, 20.0] {
        let d = random_direction(&mut rng);
        let lp = noise_free(straight_through(Vec3::zeros(), d, 120.0, rho))?;
        let tilt = 20f64.to_radians();
        let n = (d * tilt.cos() + d.any_orthogonal() * tilt.sin()).normalize();
        let f0 = PlaneFrame::new(Vec3::zeros(), n, None);
        let frame = f0.with_center(f0.e1 * (0.1 * rho) - f0.e2 * (0.05 * rho));
        let rt = 2.5 * rho;
        let base = predict_contour(&sh.contour, &lp, &frame, rt, DEFAULT_NR, DEFAULT_NPHI)?;
        for k in [1, 7, 16, 33] {
            let c = predict_contour(&sh.contour, &lp, &frame.rotated(k as f64 * TAU / DEFAULT_NPHI as f64), rt, DEFAULT_NR, DEFAULT_NPHI)?;
            for j in 0..DEFAULT_NPHI {
                shift_err = shift_err.max((c.radii[j] - base.radii[(j + k) % DEFAULT_NPHI]).abs());
            }
        }
        for _ in 0..5 {
            let c = predict_contour(&sh.contour, &lp, &frame.rotated(rng.gen_range(0.0..TAU)), rt, DEFAULT_NR, DEFAULT_NPHI)?;
            hd = hd.max(curve_hausdorff(&base.points(), &c.points()));
        }
    }
    check(&mut out, shift_err == 0.0, format!("bin rotations shift radii exactly, max |Δ| {shift_err:.1e} mm"));
    check(&mut out, hd < 0.2, format!("arbitrary rotations, Hausdorff {hd:.3} mm"));
    Ok(out)
}

// ---------------------------------------------------------------- 4: scale equivariance

fn scale(sh: &Shared) -> Result<Checks> {
    let mut out = Checks::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = random_direction(&mut rng);
    let spec = straight_through(Vec3::zeros(), d, 200.0, 6.0);
    let scene = Scene::single(spec.clone())?;
    let x = d * 3.0 + d.any_orthogonal() * 0.5;
    let resp = multi_scale_forward(&sh.orientation, &scene, x, &sh.scales, &sh.sphere)?;
    let rt = select_scale(&resp, &sh.scales)?.r_tilde;
    let frame = PlaneFrame::new(x, d, None);
    let c = predict_contour(&sh.contour, &scene, &frame, rt, DEFAULT_NR, DEFAULT_NPHI)?;
    for s in [0.5, 2.0] {
        let scaled = Scene::single(spec.transformed(&Mat3::identity(), Vec3::zeros(), s))?;
        let scales = sh.scales.scaled(s);
        let resp_s = multi_scale_forward(&sh.orientation, &scaled, x * s, &scales, &sh.sphere)?;
        let mut dr = 0f64;
        for (a, b) in resp.iter().zip(&resp_s) {
            for (u, v) in a.values.iter().zip(&b.values) {
                dr = dr.max((u - v).abs() as f64);
            }
        }
        let rt_s = select_scale(&resp_s, &scales)?.r_tilde;
        let cs = predict_contour(&sh.contour, &scaled, &frame.with_center(x * s), rt_s, DEFAULT_NR, DEFAULT_NPHI)?;
        let radius_err =
            c.radii.iter().zip(&cs.radii).map(|(a, b)| ((b - s * a) / (s * a)).abs()).fold(0.0, f64::max);
        let rt_err = (rt_s / (s * rt) - 1.0).abs();
        check(&mut out, dr <= 1e-3, format!("s={s}: responses max |Δ| {dr:.1e}"));
        check(&mut out, radius_err <= 0.02, format!("radii {:.2}%", 100.0 * radius_err));
        check(&mut out, rt_err <= 0.05, format!("r̃ {:.2}%", 100.0 * rt_err));
    }
    Ok(out)
}

// ---------------------------------------------------------------- 5, 6: contour generalization

/// Mean DSC over 20 random oblique noisy tubes with radii in `band`, r̃ = ρ·U(2, 3) and a
/// center jitter of up to 0.1ρ.
fn band_dsc(net: &ContourCnn<f32>, band: (f64, f64), seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for _ in 0..20 {
        let rho = rng.gen_range(band.0..band.1);
        let d = random_direction(&mut rng);
        let spec = straight_through(Vec3::zeros(), d, 150.0, rho).with_noise(0.1);
        let lp = LatticePhantom::new(Scene::single(spec)?, Vec3::splat(1.0), Vec3::splat(-0.5), rng.gen());
        let frame = PlaneFrame::new(Vec3::zeros(), d, None);
        let rt = rho * rng.gen_range(2.0..3.0);
        let off = frame.e1 * (rng.gen_range(-0.1..0.1) * rho) + frame.e2 * (rng.gen_range(-0.1..0.1) * rho);
        let c = predict_contour(net, &lp, &frame.with_center(off), rt, DEFAULT_NR, DEFAULT_NPHI)?;
        sum += contour_dsc(&c, &Contour::circle(frame, rho, 256))?;
    }
    Ok(sum / 20.0)
}

const SMALL: (f64, f64) = (2.0, 8.0);
const LARGE: (f64, f64) = (15.0, 30.0);

fn train_contour_model(n_phantoms: usize, radius_range: (f64, f64), seed: u64) -> Result<ContourCnn<f32>> {
    let defaults = ContourTraining::default();
    let ds = synth_contour_dataset(&ContourSynthConfig { n_phantoms, radius_range, seed, ..defaults.synth })?;
    let mut net = ContourCnn::<f32>::init(&mut ChaCha8Rng::seed_from_u64(seed));
    train_contour(&mut net, &ds, &vtrack::polar::ContourTrainConfig { seed, ..defaults.train })?;
    Ok(net)
}

fn scale_generalization(sh: &Shared) -> Result<Checks> {
    let mut out = Checks::new();
    let narrow = train_contour_model(16, SMALL, 51)?;
    let unseen = band_dsc(&narrow, LARGE, 99)?;
    check(&mut out, unseen >= 0.85, format!("trained on 2–8 mm, DSC {unseen:.3} on 15–30 mm"));
    for band in [SMALL, LARGE] {
        let d = band_dsc(&sh.contour, band, 99)?;
        check(&mut out, d >= 0.95, format!("all radii, DSC {d:.3} on {}–{} mm", band.0, band.1));
    }
    Ok(out)
}

fn data_efficiency() -> Result<Checks> {
    let mut out = Checks::new();
    let mut means = Vec::new();
    for n in [64, 8] {
        let net = train_contour_model(n, ContourSynthConfig::default().radius_range, 61)?;
        means.push((band_dsc(&net, SMALL, 98)? + band_dsc(&net, LARGE, 99)?) / 2.0);
    }
    let drop = means[0] - means[1];
    check(&mut out, drop < 0.05, format!("DSC {:.3} with 64 phantoms, {:.3} with 8, drop {drop:.3}", means[0], means[1]));
    Ok(out)
}

// ---------------------------------------------------------------- 7: tracking accuracy

fn slab(name: &str, axis: Axis, threshold_mm: f64, side: Side) -> (String, Slab) {
    (name.into(), Slab { axis, threshold_mm, side })
}

fn tracking(sh: &Shared) -> Result<Checks> {
    let mut out = Checks::new();
    for rho in [3.0, 10.0, 25.0] {
        for bend in [false, true] {
            let f = 3.0 * rho;
            let (spec, slabs, lo, hi, seed) = if bend {
                let spec = TubeSpec {
                    centerline: CurveSpec::Polyline {
                        points: vec![Vec3::new(0.0, 0.0, -100.0 - f), Vec3::zeros(), Vec3::new(100.0 + f, 0.0, 0.0)],
                        fillet_mm: f,
                    },
                    ..TubeSpec::straight(Vec3::zeros(), Vec3::unit_z(), rho)
                };
                let slabs = vec![slab("bottom", Axis::Z, -80.0 - f, Side::Below), slab("right", Axis::X, 80.0 + f, Side::Above)];
                let (lo, hi) = (Vec3::new(-rho - 10.0, -rho - 10.0, -110.0 - f), Vec3::new(110.0 + f, rho + 10.0, rho + 10.0));
                (spec, slabs, lo, hi, Vec3::new(0.0, 0.0, -f - 20.0))
            } else {
                let spec = TubeSpec::straight(Vec3::new(0.0, 0.0, -100.0), Vec3::new(0.0, 0.0, 100.0), rho);
                let slabs = vec![slab("top", Axis::Z, 80.0, Side::Above), slab("bottom", Axis::Z, -80.0, Side::Below)];
                let (lo, hi) = (Vec3::new(-rho - 10.0, -rho - 10.0, -110.0), Vec3::new(rho + 10.0, rho + 10.0, 110.0));
                (spec, slabs, lo, hi, Vec3::new(0.3, -0.2, 0.0))
            };
            let spec = spec.with_noise(0.1);
            let dims = [(hi.x - lo.x) as usize + 1, (hi.y - lo.y) as usize + 1, (hi.z - lo.z) as usize + 1];
            let vol = LatticePhantom::new(Scene::single(spec.clone())?, Vec3::splat(VOXEL_MM), lo, 7).materialize(dims)?;
            let truth = Tube::new("v", spec)?.truth(0.1);
            let omega = BoundaryConditions::slabs(slabs.clone());
            let tv = track_vessel("v", &vol, &sh.models(), seed, &omega, &TrackConfig { delta_mm: DELTA_MM, ..Default::default() })?;
            let mean = tv.centerline.iter().map(|&p| truth.distance_to_centerline(p)).sum::<f64>() / tv.centerline.len() as f64;
            let ends = [*tv.centerline.last().context("empty centerline")?, tv.centerline[0]];
            let mut gaps = Vec::new();
            let mut hit = Vec::new();
            for (end, reason) in ends.iter().zip(&tv.termination) {
                match reason {
                    Termination::Region(name) => {
                        let (_, s) = slabs.iter().find(|(n, _)| n == name).context("unknown region")?;
                        gaps.push((end.to_array()[s.axis.index()] - s.threshold_mm).abs());
                        hit.push(name.clone());
                    }
                    other => {
                        gaps.push(f64::INFINITY);
                        hit.push(other.to_string());
                    }
                }
            }
            hit.sort();
            let mut want: Vec<String> = slabs.iter().map(|(n, _)| n.clone()).collect();
            want.sort();
            let gap = gaps.iter().copied().fold(0.0, f64::max);
            let shape = if bend { "bend" } else { "straight" };
            check(&mut out, mean <= VOXEL_MM, format!("{shape} r={rho}: mean {mean:.2} mm"));
            check(&mut out, gap <= 2.0 * DELTA_MM, format!("end gap {gap:.2} mm"));
            check(&mut out, hit == want, format!("stops {}", hit.join("+")));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- 8: boundary conditions

fn t12_extension(sh: &Shared) -> Result<Checks> {
    let mut out = Checks::new();
    let seed = sh.controller["aorta"].seed.point;
    let mut lengths = Vec::new();
    for z in [80.0, 120.0] {
        let regions = vec![
            Region::Slab { name: "t12".into(), slab: Slab { axis: Axis::Z, threshold_mm: z, side: Side::Above } },
            Region::Label { label: "iliac".into() },
        ];
        let omega = BoundaryConditions::new(regions, Some(sh.masks.clone()))?;
        let tv = track_vessel("aorta", &sh.vol, &sh.models(), seed, &omega, &TrackConfig::default())?;
        ensure!(tv.termination.contains(&Termination::Region("t12".into())), "aorta at z={z} did not stop at t12");
        lengths.push(tv.length());
    }
    let ext = lengths[1] - lengths[0];
    check(&mut out, (ext - 40.0).abs() <= 2.0 * DELTA_MM, format!("t12 80→120 mm extends the aorta by {ext:.2} mm"));
    Ok(out)
}

// ---------------------------------------------------------------- 9: controller

fn controller(sh: &Shared) -> Result<Checks> {
    let mut out = Checks::new();
    for name in ["aorta", "iliac"] {
        let off = sh.truth(name)?.distance_to_centerline(sh.controller[name].seed.point);
        check(&mut out, off <= 0.5 * VOXEL_MM, format!("{name} COM {off:.2} mm off axis"));
    }
    let renal = &sh.controller["renal"];
    let path = renal.path.as_ref().context("renal seed has no path")?;
    let truth = sh.truth("renal")?;
    let between: Vec<&Vec3> = path.iter().filter(|p| sh.masks.label_at(**p) == Some(0)).collect();
    let inside = between.iter().filter(|p| truth.contains(***p)).count() as f64 / between.len().max(1) as f64;
    check(&mut out, !between.is_empty() && inside >= 0.95, format!("renal path {:.1}% inside", 100.0 * inside));
    let tv = sh.track("renal")?;
    let mut stops: Vec<String> = tv.termination.iter().map(|t| t.to_string()).collect();
    stops.sort();
    let mean = tv.centerline.iter().map(|&p| truth.distance_to_centerline(p)).sum::<f64>() / tv.centerline.len() as f64;
    let ok = stops == ["region:aorta", "region:kidney"] && mean <= VOXEL_MM;
    check(&mut out, ok, format!("midpoint seed tracks {:.0} mm, stops {}, mean {mean:.2} mm", tv.length(), stops.join("+")));
    Ok(out)
}

// ---------------------------------------------------------------- 10: surface

fn surface(sh: &Shared) -> Result<Checks> {
    let mut out = Checks::new();
    let r = 10.0;
    let sphere = marching_cubes(&|p: Vec3| p.norm() - r, &McGrid::centered(Vec3::zeros(), r + 2.0, 0.5)?)?;
    let w = mesh_watertight(&sphere);
    let area_err = (sphere.area() / (4.0 * PI * r * r) - 1.0).abs();
    check(&mut out, w.euler_characteristic == 2 && area_err <= 0.02, format!("MC sphere χ={} area {:.2}%", w.euler_characteristic, 100.0 * area_err));

    let field = ReconstructConfig::default().field;
    for (i, v) in sh.tracks.iter().enumerate() {
        let (kept, held) = split_held_out(v)?;
        let (f, _) = fit_neural_field(&kept, &FieldFitConfig { seed: i as u64, ..field.clone() })?;
        let err = f.distances(&held).iter().map(|d| d.abs()).sum::<f64>() / held.len() as f64;
        check(&mut out, err < 0.5, format!("{} held-out {err:.2} mm", v.name));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut smin_ok = true;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..12);
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let k = rng.gen_range(0.05..50.0);
        let m = values.iter().copied().fold(f64::INFINITY, f64::min);
        let s = smin(&values, k);
        let bound = (n as f64).ln() / k;
        smin_ok &= s <= m + 1e-12 && m - s <= bound + 1e-12 * (1.0 + bound);
    }
    check(&mut out, smin_ok, "smin bound on 10000 tuples".into());

    let mesh = Mesh::read_obj(sh.run.dir.join("mesh.obj"))?;
    let w = mesh_watertight(&mesh);
    check(&mut out, w.is_watertight && w.components == 1, format!("three-vessel mesh watertight={} components={}", w.is_watertight, w.components));
    let total = sh.run.total().as_secs_f64();
    let steps: Vec<String> = sh.run.steps.iter().map(|(n, d)| format!("{n} {:.0}s", d.as_secs_f64())).collect();
    check(&mut out, total <= 900.0, format!("pipeline {total:.0} s ({})", steps.join(", ")));
    Ok(out)
}

// ---------------------------------------------------------------- 11: determinism

fn determinism(a: &Path, b: &Path) -> Result<Checks> {
    let mut out = Checks::new();
    let mut files: Vec<PathBuf> = ["metrics.json", "metrics.csv", "mesh.obj", "orientation.json", "contour.json", "volume.raw"]
        .iter()
        .map(PathBuf::from)
        .collect();
    for e in fs::read_dir(a.join("tracks"))? {
        files.push(Path::new("tracks").join(e?.file_name()));
    }
    let differ: Vec<String> = files
        .iter()
        .filter(|f| fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok() || !a.join(f).exists())
        .map(|f| f.display().to_string())
        .collect();
    check(&mut out, differ.is_empty(), format!("{} files compared across --threads 1 and 2, differing: [{}]", files.len(), differ.join(", ")));
    Ok(out)
}

// ----------------------------------------------------------------

fn report(failures: &mut usize, id: u32, name: &str, t: Instant, r: Result<Checks>) {
    let secs = t.elapsed().as_secs_f64();
    let (pass, text) = match r {
        Ok(checks) => (
            !checks.is_empty() && checks.iter().all(|c| c.0),
            checks.iter().map(|(ok, s)| if *ok { s.clone() } else { format!("FAILED {s}") }).collect::<Vec<_>>().join("; "),
        ),
        Err(e) => (false, format!("error: {e:#}")),
    };
    *failures += usize::from(!pass);
    println!("criterion {id:>2} {} {name} [{secs:.0} s]: {text}", if pass { "PASS" } else { "FAIL" });
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let mut failures = 0;

    let t = Instant::now();
    report(&mut failures, 1, "gradient checks", t, gradients());

    let shared = pipeline(&work.path().join("a"), 1).and_then(Shared::load);
    let criteria: [(u32, &str, fn(&Shared) -> Result<Checks>); 8] = [
        (2, "backbone rotation equivariance", rotations),
        (3, "contour in-plane equivariance", in_plane),
        (4, "scale equivariance", scale),
        (5, "scale generalization", scale_generalization),
        (7, "tracking accuracy", tracking),
        (8, "termination set moves the stop", t12_extension),
        (9, "seed controller", controller),
        (10, "surface reconstruction", surface),
    ];
    for (id, name, f) in criteria {
        let t = Instant::now();
        let r = match &shared {
            Ok(sh) => f(sh),
            Err(e) => Err(anyhow::anyhow!("pipeline run failed: {e:#}")),
        };
        report(&mut failures, id, name, t, r);
        if id == 5 {
            let t = Instant::now();
            report(&mut failures, 6, "data efficiency", t, data_efficiency());
        }
    }

    let t = Instant::now();
    let b = work.path().join("b");
    let r = pipeline(&b, 2).and_then(|_| determinism(&work.path().join("a"), &b));
    report(&mut failures, 11, "determinism", t, r);

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all 11 criteria passed");
}
