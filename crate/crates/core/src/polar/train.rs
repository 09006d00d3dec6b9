use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{heatmap_to_radii, heatmap_to_radii_backward, ring_angle, ring_radius, ContourCnn, PlaneFrame};
use crate::error::{Error, Result};
use crate::nn::{sum_grads, AdamConfig, AdamState, Parameterized, Tensor};
use crate::phantom::{LatticePhantom, Scene, TubeSpec};
use crate::sphere::TrainReport;
use crate::volume::{load_volume, save_scalar, IntensityField, ScalarVolume};
use crate::Vec3;

/// A circular lumen of `radius` around `center` in the plane orthogonal to `normal`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContourSample {
    pub volume: usize,
    pub center: Vec3,
    pub normal: Vec3,
    pub radius: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ContourDataset {
    pub volumes: Vec<Arc<ScalarVolume>>,
    pub samples: Vec<ContourSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContourManifestEntry {
    pub volume: String,
    pub center: Vec3,
    pub normal: Vec3,
    pub radius_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContourManifest {
    pub kind: String,
    pub samples: Vec<ContourManifestEntry>,
}

impl ContourDataset {
    pub fn save(&self, manifest_path: impl AsRef<Path>) -> Result<()> {
        let path = manifest_path.as_ref();
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let names: Vec<String> = (0..self.volumes.len()).map(|i| format!("contour_vol_{i:03}.json")).collect();
        for (v, n) in self.volumes.iter().zip(&names) {
            save_scalar(v, dir.join(n))?;
        }
        let samples = self
            .samples
            .iter()
            .map(|s| ContourManifestEntry {
                volume: names[s.volume].clone(),
                center: s.center,
                normal: s.normal,
                radius_mm: s.radius,
            })
            .collect();
        let m = ContourManifest { kind: "contour".into(), samples };
        fs::write(path, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: ContourManifest = serde_json::from_str(&text)?;
        if m.kind != "contour" {
            return Err(Error::Config(format!("manifest kind `{}` is not `contour`", m.kind)));
        }
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut ds = ContourDataset::default();
        for e in m.samples {
            let vi = match index.get(&e.volume) {
                Some(&i) => i,
                None => {
                    ds.volumes.push(Arc::new(load_volume(dir.join(&e.volume))?.into_scalar()?));
                    index.insert(e.volume.clone(), ds.volumes.len() - 1);
                    ds.volumes.len() - 1
                }
            };
            if !(e.radius_mm > 0.0) || e.normal.norm() < 1e-9 {
                return Err(Error::Config("contour sample needs a positive radius and a non-zero normal".into()));
            }
            ds.samples.push(ContourSample { volume: vi, center: e.center, normal: e.normal.normalize(), radius: e.radius_mm });
        }
        Ok(ds)
    }

    /// Keeps the samples of the first `n` volumes.
    pub fn first_volumes(&self, n: usize) -> Self {
        Self {
            volumes: self.volumes.iter().take(n).cloned().collect(),
            samples: self.samples.iter().filter(|s| s.volume < n).cloned().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContourSynthConfig {
    pub n_phantoms: usize,
    pub radius_range: (f64, f64),
    pub noise_sigma: f64,
    pub spacing_mm: f64,
    pub samples_per_phantom: usize,
    pub seed: u64,
}

impl Default for ContourSynthConfig {
    fn default() -> Self {
        Self { n_phantoms: 64, radius_range: (2.0, 30.0), noise_sigma: 0.1, spacing_mm: 1.0, samples_per_phantom: 16, seed: 0 }
    }
}

/// Straight tubes along z, each voxelized on a thin slab around z = 0 wide enough for the
/// largest polar image used in training.
pub fn synth_contour_dataset(cfg: &ContourSynthConfig) -> Result<ContourDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ds = ContourDataset::default();
    let (lo, hi) = cfg.radius_range;
    let h = cfg.spacing_mm;
    for i in 0..cfg.n_phantoms {
        let u = (i as f64 + rng.gen::<f64>()) / cfg.n_phantoms as f64;
        let rho = (lo.ln() + u * (hi.ln() - lo.ln())).exp();
        let offset = Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.0) * h;
        let len = (3.0 * rho).max(12.0);
        let spec = TubeSpec::straight(offset - Vec3::unit_z() * len, offset + Vec3::unit_z() * len, rho)
            .with_noise(cfg.noise_sigma);
        let half_xy = ((6.5 * rho + 2.0) / h).ceil() as usize;
        let half_z = (6.0 / h).ceil() as usize;
        let dims = [2 * half_xy + 1, 2 * half_xy + 1, 2 * half_z + 1];
        let origin = Vec3::new(-(half_xy as f64), -(half_xy as f64), -(half_z as f64)) * h;
        let vol = LatticePhantom::new(Scene::single(spec)?, Vec3::splat(h), origin, rng.gen()).materialize(dims)?;
        ds.volumes.push(Arc::new(vol));
        for _ in 0..cfg.samples_per_phantom {
            let center = offset + Vec3::unit_z() * rng.gen_range(-4.0..4.0);
            ds.samples.push(ContourSample { volume: i, center, normal: Vec3::unit_z(), radius: rho });
        }
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContourTrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub n_r: usize,
    pub n_phi: usize,
    /// Range of `r̃ / radius` drawn per sample.
    pub ratio_range: (f64, f64),
    /// Center jitter bound as a fraction of `r̃`.
    pub jitter: f64,
    pub ellipse_probability: f64,
    /// Largest axis stretch of the elliptic augmentation.
    pub max_stretch: f64,
}

impl Default for ContourTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch: 10,
            steps: 1500,
            steps_per_epoch: 10,
            seed: 0,
            n_r: super::DEFAULT_NR,
            n_phi: super::DEFAULT_NPHI,
            ratio_range: (1.6, 4.0),
            jitter: 0.2,
            ellipse_probability: 0.5,
            max_stretch: 1.3,
        }
    }
}

/// One augmented training view: image plus boundary radii.
struct View {
    image: Tensor<f32>,
    truth: Vec<f64>,
    r_tilde: f64,
}

/// Samples the plane through `s` with random gauge, r̃, stretch and center offset. The lumen
/// seen in the image is the circle mapped through the inverse stretch; its boundary along each
/// ray is solved in closed form.
fn augmented_view<R: Rng + ?Sized>(field: &dyn IntensityField, s: &ContourSample, cfg: &ContourTrainConfig, rng: &mut R) -> View {
    let rho = s.radius;
    let r_tilde = rho * rng.gen_range(cfg.ratio_range.0..=cfg.ratio_range.1);
    let frame = PlaneFrame::new(s.center, s.normal, None).rotated(rng.gen_range(0.0..TAU));
    let (a, b) = if rng.gen::<f64>() < cfg.ellipse_probability {
        let l = cfg.max_stretch.ln();
        (rng.gen_range(-l..=l).exp(), rng.gen_range(-l..=l).exp())
    } else {
        (1.0, 1.0)
    };
    let jmax = (cfg.jitter * r_tilde).min(0.5 * rho * a.min(b));
    let (ja, jr) = (rng.gen_range(0.0..TAU), jmax * rng.gen::<f64>().sqrt());
    let o = [jr * ja.cos(), jr * ja.sin()];
    let to_world = |q: [f64; 2]| frame.center + frame.e1 * ((q[0] + o[0]) / a) + frame.e2 * ((q[1] + o[1]) / b);
    let (n_r, n_phi) = (cfg.n_r, cfg.n_phi);
    let mut pixels = Vec::with_capacity(n_r * n_phi);
    for i in 0..n_r {
        let r = ring_radius(i, r_tilde, n_r);
        for k in 0..n_phi {
            let phi = ring_angle(k, n_phi);
            pixels.push(field.intensity(to_world([r * phi.cos(), r * phi.sin()])) as f32);
        }
    }
    let (rmin, rmax) = (ring_radius(0, r_tilde, n_r), ring_radius(n_r - 1, r_tilde, n_r));
    let truth = (0..n_phi)
        .map(|k| {
            let phi = ring_angle(k, n_phi);
            let m_u = [phi.cos() / a, phi.sin() / b];
            let m_o = [o[0] / a, o[1] / b];
            let aa = m_u[0] * m_u[0] + m_u[1] * m_u[1];
            let ab = m_u[0] * m_o[0] + m_u[1] * m_o[1];
            let bb = m_o[0] * m_o[0] + m_o[1] * m_o[1];
            let t = (-ab + (ab * ab - aa * (bb - rho * rho)).sqrt()) / aa;
            t.clamp(rmin, rmax)
        })
        .collect();
    let img = super::PolarImage { frame, r_tilde, n_r, n_phi, pixels };
    View { image: img.to_input(), truth, r_tilde }
}

/// Loss in units of r̃² so that every vessel size weighs the same.
fn view_grads(net: &ContourCnn<f32>, v: &View) -> Result<(f64, Vec<Tensor<f32>>)> {
    let (p, cache) = net.forward(&v.image)?;
    let radii = heatmap_to_radii(&p, v.r_tilde);
    let n = radii.len() as f64;
    let scale = 1.0 / (v.r_tilde * v.r_tilde);
    let mut loss = 0.0;
    let dr: Vec<f64> = radii
        .iter()
        .zip(&v.truth)
        .map(|(r, t)| {
            let e = r - t;
            loss += e * e * scale / n;
            2.0 * e * scale / n
        })
        .collect();
    let dp = heatmap_to_radii_backward::<f32>(&dr, v.r_tilde, p.shape()[0]);
    Ok((loss, net.backward(&cache, &dp).0))
}

pub fn train_contour(net: &mut ContourCnn<f32>, ds: &ContourDataset, cfg: &ContourTrainConfig) -> Result<TrainReport> {
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
            items.push((order[cursor], rng.gen::<u64>()));
            cursor += 1;
        }
        let results: Vec<(f64, Vec<Tensor<f32>>)> = items
            .par_iter()
            .map(|&(i, seed)| {
                let s = &ds.samples[i];
                let mut item_rng = ChaCha8Rng::seed_from_u64(seed);
                view_grads(net, &augmented_view(ds.volumes[s.volume].as_ref(), s, cfg, &mut item_rng))
            })
            .collect::<Result<_>>()?;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / cfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("contour loss became {loss} at step {}", step + 1)));
        }
        let mut grads = sum_grads(results.into_iter().map(|r| r.1).collect()).expect("non-empty batch");
        let inv = 1.0 / cfg.batch as f32;
        grads.iter_mut().for_each(|g| g.scale(inv));
        adam.step(&mut net.params_mut(), &grads, &names)?;
        losses.push(loss);
    }
    Ok(TrainReport::from_losses(losses, cfg.steps_per_epoch))
}
