use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{project_features, Icosphere, OrientationNet, ScaleSet};
use crate::error::{Error, Result};
use crate::nn::{sum_grads, AdamConfig, AdamState, Parameterized, Tensor};
use crate::phantom::{random_direction, CurveSpec, LatticePhantom, PhantomTruth, Scene, Tube, TubeSpec};
use crate::volume::{load_volume, save_scalar, ScalarVolume};
use crate::Vec3;

/// Log-space width of the per-scale amplitude around `2ρ`.
const SCALE_WIDTH: f64 = 0.3;
/// Background level of the target; scales far from `2ρ` should stay below zero everywhere.
const TARGET_FLOOR: f64 = 0.2;
const BUMP_POWER: i32 = 8;

/// Peak height assigned to scale `r` for a vessel of radius `rho`: 1 at `r = 2ρ`.
pub fn scale_amplitude(r: f64, rho: f64) -> f64 {
    let l = (r / (2.0 * rho)).ln();
    (-(l * l) / (2.0 * SCALE_WIDTH * SCALE_WIDTH)).exp()
}

/// Per-vertex target: cos⁸ bumps at both directions, scaled by `amplitude`, on a negative floor.
pub fn bump_target(sphere: &Icosphere<f64>, forward: Vec3, backward: Vec3, amplitude: f64) -> Vec<f64> {
    let bump = |c: f64| c.max(0.0).powi(BUMP_POWER);
    sphere
        .vertices
        .iter()
        .map(|v| (1.0 + TARGET_FLOOR) * amplitude * bump(v.dot(forward)).max(bump(v.dot(backward))) - TARGET_FLOOR)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrientationSample {
    pub volume: usize,
    pub point: Vec3,
    /// Direction the target bump marks downstream; `backward` marks upstream.
    pub forward: Vec3,
    pub backward: Vec3,
    pub radius: f64,
}

#[derive(Clone, Debug, Default)]
pub struct OrientationDataset {
    pub volumes: Vec<Arc<ScalarVolume>>,
    pub samples: Vec<OrientationSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationManifestEntry {
    pub volume: String,
    pub point: Vec3,
    pub tangent: Vec3,
    /// Upstream direction; `-tangent` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backward: Option<Vec3>,
    pub radius_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationManifest {
    pub kind: String,
    pub samples: Vec<OrientationManifestEntry>,
}

impl OrientationDataset {
    /// Writes every volume next to `manifest_path` and the manifest itself.
    pub fn save(&self, manifest_path: impl AsRef<Path>) -> Result<()> {
        let path = manifest_path.as_ref();
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let names: Vec<String> = (0..self.volumes.len()).map(|i| format!("orient_vol_{i:03}.json")).collect();
        for (v, n) in self.volumes.iter().zip(&names) {
            save_scalar(v, dir.join(n))?;
        }
        let samples = self
            .samples
            .iter()
            .map(|s| OrientationManifestEntry {
                volume: names[s.volume].clone(),
                point: s.point,
                tangent: s.forward,
                backward: Some(s.backward),
                radius_mm: s.radius,
            })
            .collect();
        let m = OrientationManifest { kind: "orientation".into(), samples };
        fs::write(path, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(path, e))
    }

    /// Volume paths in the manifest are relative to its directory.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: OrientationManifest = serde_json::from_str(&text)?;
        if m.kind != "orientation" {
            return Err(Error::Config(format!("manifest kind `{}` is not `orientation`", m.kind)));
        }
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut ds = OrientationDataset::default();
        for e in m.samples {
            let vi = match index.get(&e.volume) {
                Some(&i) => i,
                None => {
                    let vol = load_volume(dir.join(&e.volume))?.into_scalar()?;
                    ds.volumes.push(Arc::new(vol));
                    index.insert(e.volume.clone(), ds.volumes.len() - 1);
                    ds.volumes.len() - 1
                }
            };
            if !(e.radius_mm > 0.0) || e.tangent.norm() < 1e-9 {
                return Err(Error::Config("orientation sample needs a positive radius and a non-zero tangent".into()));
            }
            let fwd = e.tangent.normalize();
            ds.samples.push(OrientationSample {
                volume: vi,
                point: e.point,
                forward: fwd,
                backward: e.backward.map(|b| b.normalize()).unwrap_or(-fwd),
                radius: e.radius_mm,
            });
        }
        Ok(ds)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrientationSynthConfig {
    pub n_phantoms: usize,
    pub radius_range: (f64, f64),
    pub noise_sigma: f64,
    pub samples_per_phantom: usize,
    /// Fraction of phantoms with a circular-arc centerline.
    pub curved_fraction: f64,
    /// Fraction of samples displaced from the centerline; their targets point back onto it.
    pub off_axis_fraction: f64,
    /// Half side of the voxelized cube around each phantom center (1 mm voxels).
    pub half_extent_mm: f64,
    pub seed: u64,
}

impl Default for OrientationSynthConfig {
    fn default() -> Self {
        Self {
            n_phantoms: 16,
            radius_range: (1.5, 30.0),
            noise_sigma: 0.1,
            samples_per_phantom: 64,
            curved_fraction: 0.5,
            off_axis_fraction: 0.5,
            half_extent_mm: 84.0,
            seed: 0,
        }
    }
}

/// Off-axis targets steer back to the axis as if aiming at it this many radii ahead.
const PULL_DISTANCE: f64 = 2.0;
const MAX_OFFSET: f64 = 0.4;

fn random_tube<R: Rng + ?Sized>(rng: &mut R, rho: f64, curved: bool, half: f64, noise: f64) -> TubeSpec {
    let t = random_direction(rng);
    let reach = half * 3f64.sqrt() + 2.0 * rho;
    let mut spec = if curved {
        let n = t.any_orthogonal();
        let n = (crate::Mat3::from_axis_angle(t, rng.gen_range(0.0..std::f64::consts::TAU)) * n).normalize();
        let rc = rho * rng.gen_range(4.0..10.0);
        let theta = (2.0 * reach / rc).min(300f64.to_radians());
        let center = n * rc;
        let th0 = -theta / 2.0;
        let start = center + (-n * th0.cos() + t * th0.sin()) * rc;
        TubeSpec {
            centerline: CurveSpec::Arc { center, start, axis: t.cross(n), angle_deg: theta.to_degrees() },
            ..TubeSpec::straight(Vec3::zeros(), Vec3::unit_z(), rho)
        }
    } else {
        TubeSpec::straight(-t * reach, t * reach, rho)
    };
    spec.noise_sigma = noise;
    spec
}

/// Samples along the middle of a truth centerline, optionally displaced off-axis.
fn samples_from_truth<R: Rng + ?Sized>(
    truth: &PhantomTruth,
    volume: usize,
    n: usize,
    off_axis_fraction: f64,
    max_dist_from_origin: f64,
    rng: &mut R,
) -> Vec<OrientationSample> {
    let pts = &truth.samples;
    let candidates: Vec<usize> = (0..pts.len()).filter(|&i| pts[i].center.norm() <= max_dist_from_origin).collect();
    let mut out = Vec::with_capacity(n);
    if candidates.is_empty() {
        return out;
    }
    for _ in 0..n {
        let i = candidates[rng.gen_range(0..candidates.len())];
        let s = &pts[i];
        let rho = s.radius;
        let mut p = s.center;
        if rng.gen::<f64>() < off_axis_fraction {
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            let d = rho * MAX_OFFSET * rng.gen::<f64>().sqrt();
            p = p + (s.e1 * a.cos() + s.e2() * a.sin()) * d;
        }
        let pull = (s.center - p) * (1.0 / (PULL_DISTANCE * rho));
        let fwd = (s.normal + pull).normalize();
        let bwd = (-s.normal + pull).normalize();
        out.push(OrientationSample { volume, point: p, forward: fwd, backward: bwd, radius: rho });
    }
    out
}

/// Random straight and arc tubes, each voxelized on its own 1 mm cube.
pub fn synth_orientation_dataset(cfg: &OrientationSynthConfig) -> Result<OrientationDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.half_extent_mm;
    let n = (2.0 * h).round() as usize + 1;
    let origin = Vec3::splat(-h);
    let mut ds = OrientationDataset::default();
    for i in 0..cfg.n_phantoms {
        // Radii stratified over the log range so small datasets still cover it.
        let (lo, hi) = cfg.radius_range;
        let u = (i as f64 + rng.gen::<f64>()) / cfg.n_phantoms as f64;
        let rho = (lo.ln() + u * (hi.ln() - lo.ln())).exp();
        let curved = rng.gen::<f64>() < cfg.curved_fraction;
        let spec = random_tube(&mut rng, rho, curved, h, cfg.noise_sigma);
        let tube = Tube::new("tube", spec)?;
        let truth = tube.truth(0.5);
        let scene = Scene::new(vec![tube])?;
        let vol = LatticePhantom::new(scene, Vec3::splat(1.0), origin, rng.gen()).materialize([n, n, n])?;
        ds.volumes.push(Arc::new(vol));
        ds.samples.extend(samples_from_truth(&truth, i, cfg.samples_per_phantom, cfg.off_axis_fraction, 0.5 * h, &mut rng));
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrientationTrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub scales: ScaleSet,
}

impl Default for OrientationTrainConfig {
    fn default() -> Self {
        Self { lr: 0.005, batch: 20, steps: 1500, steps_per_epoch: 10, seed: 0, scales: ScaleSet::standard() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// Mean of `losses` over each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub(crate) fn from_losses(losses: Vec<f64>, steps_per_epoch: usize) -> Self {
        let epoch_losses = losses
            .chunks(steps_per_epoch.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        Self { losses, epoch_losses }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{},{l:.8}\n", i + 1));
        }
        s
    }
}

/// Scale index for a batch item: half uniform over the set, half near `2ρ`.
fn pick_scale<R: Rng + ?Sized>(rng: &mut R, scales: &ScaleSet, rho: f64) -> usize {
    if rng.gen::<bool>() {
        return rng.gen_range(0..scales.len());
    }
    let z: f64 = rng.sample(StandardNormal);
    let want = 2.0 * rho * (SCALE_WIDTH * z).exp();
    let r = scales.radii();
    (0..r.len())
        .min_by(|&a, &b| (r[a] - want).abs().partial_cmp(&(r[b] - want).abs()).unwrap())
        .unwrap_or(0)
}

/// Gradient of the mean squared error between the response and the target, for one item.
fn item_grads(
    net: &OrientationNet<f32>,
    sphere: &Icosphere<f64>,
    ds: &OrientationDataset,
    sample: &OrientationSample,
    r: f64,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let feat = project_features(ds.volumes[sample.volume].as_ref(), sample.point, r, sphere, net.n_samples())?;
    let x = feat.to_input::<f32>();
    let (y, cache) = net.forward(&x, &sphere.adjacency)?;
    let target = bump_target(sphere, sample.forward, sample.backward, scale_amplitude(r, sample.radius));
    let v = sphere.len() as f64;
    let mut loss = 0.0;
    let mut dy = Tensor::zeros(&[sphere.len(), 1]);
    for ((d, &p), &t) in dy.data.iter_mut().zip(&y.data).zip(&target) {
        let e = p as f64 - t;
        loss += e * e / v;
        *d = (2.0 * e / v) as f32;
    }
    let (g, _) = net.backward(&x, &cache, &dy, &sphere.adjacency);
    Ok((loss, g))
}

/// Adam on mini-batches of (sample, scale) pairs. Deterministic for a given seed regardless
/// of the thread count: items are drawn sequentially and gradients summed in batch order.
pub fn train_orientation(
    net: &mut OrientationNet<f32>,
    ds: &OrientationDataset,
    sphere: &Icosphere<f64>,
    cfg: &OrientationTrainConfig,
) -> Result<TrainReport> {
    if ds.samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names = net.param_names();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &net.params());
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut order: Vec<usize> = (0..ds.samples.len()).collect();
    let mut cursor = order.len();
    for step in 0..cfg.steps {
        let mut items = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &ds.samples[order[cursor]];
            cursor += 1;
            items.push((s, cfg.scales.radii()[pick_scale(&mut rng, &cfg.scales, s.radius)]));
        }
        let results: Vec<(f64, Vec<Tensor<f32>>)> = items
            .par_iter()
            .map(|(s, r)| item_grads(net, sphere, ds, s, *r))
            .collect::<Result<_>>()?;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / cfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("orientation loss became {loss} at step {}", step + 1)));
        }
        let mut grads = sum_grads(results.into_iter().map(|r| r.1).collect()).expect("non-empty batch");
        let inv = 1.0 / cfg.batch as f32;
        grads.iter_mut().for_each(|g| g.scale(inv));
        adam.step(&mut net.params_mut(), &grads, &names)?;
        losses.push(loss);
    }
    Ok(TrainReport::from_losses(losses, cfg.steps_per_epoch))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn amplitude_peaks_at_twice_the_radius() {
        assert!((scale_amplitude(20.0, 10.0) - 1.0).abs() < 1e-15);
        assert!(scale_amplitude(10.0, 10.0) < 0.1);
        assert!(scale_amplitude(40.0, 10.0) < 0.1);
    }

    #[test]
    fn target_has_unit_peaks_at_both_directions() {
        let s = Icosphere::build(3);
        let t = bump_target(&s, Vec3::unit_z(), -Vec3::unit_z(), 1.0);
        let top = s.nearest_vertex(Vec3::unit_z());
        let bottom = s.nearest_vertex(-Vec3::unit_z());
        assert!((t[top] - 1.0).abs() < 1e-12 && (t[bottom] - 1.0).abs() < 1e-12);
        let eq = s.nearest_vertex(Vec3::unit_x());
        assert!((t[eq] + TARGET_FLOOR).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let s = Icosphere::build(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = OrientationNet::init(8, &mut rng);
        let r = train_orientation(&mut net, &OrientationDataset::default(), &s, &OrientationTrainConfig::default());
        assert!(matches!(r, Err(Error::EmptyDataset)));
    }
}
