//! Per-vessel neural signed-distance field, supervised by the lofted proxy surface.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::loft::loft_contours;
use super::oracle::SdfOracle;
use super::Sdf;
use crate::error::{Error, Result};
use crate::nn::{
    load_checkpoint, restore, Activation, AdamConfig, AdamState, Dense, Differentiable, Parameterized, Tensor,
};
use crate::real::Real;
use crate::tracker::TrackedVessel;
use crate::Vec3;

pub const HIDDEN: usize = 64;

/// MLP `3 → 64 → 64 → 64 → 1` (sine, ReLU, ReLU, linear) on unit-box coordinates.
///
/// Inside the box `center ± half_extent` the field is `out_scale · net(u)`; outside it is the
/// value at the nearest box point plus the distance to the box.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralField<T = f32> {
    pub layers: [Dense<T>; 4],
    pub omega: f64,
    pub center: Vec3,
    pub half_extent: Vec3,
    pub out_scale: f64,
}

struct FieldCache<T> {
    inputs: [Tensor<T>; 4],
    pre: [Tensor<T>; 3],
}

impl<T: Real> NeuralField<T> {
    pub fn init<R: Rng + ?Sized>(omega: f64, center: Vec3, half_extent: Vec3, out_scale: f64, rng: &mut R) -> Self {
        let mut first = Dense::init(3, HIDDEN, rng);
        first.weight = Tensor::uniform(&[HIDDEN, 3], 1.0 / 3.0, rng);
        first.bias = Tensor::uniform(&[HIDDEN], 1.0 / 3.0, rng);
        let mut head = Dense::init(HIDDEN, 1, rng);
        head.weight.scale(T::lit(0.1));
        Self {
            layers: [first, Dense::init(HIDDEN, HIDDEN, rng), Dense::init(HIDDEN, HIDDEN, rng), head],
            omega,
            center,
            half_extent,
            out_scale,
        }
    }

    pub fn from_checkpoint(path: impl AsRef<std::path::Path>) -> Result<NeuralField<f32>> {
        #[derive(Deserialize)]
        struct Hyper {
            hidden: usize,
            omega: f64,
            center: Vec3,
            half_extent: Vec3,
            out_scale: f64,
        }
        let (manifest, tensors) = load_checkpoint(path)?;
        let h: Hyper = serde_json::from_value(manifest.hyperparameters.clone())
            .map_err(|e| Error::Header(format!("field hyperparameters: {e}")))?;
        if h.hidden != HIDDEN {
            return Err(Error::Shape(format!("field checkpoint has hidden width {}, expected {HIDDEN}", h.hidden)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = NeuralField::<f32>::init(h.omega, h.center, h.half_extent, h.out_scale, &mut rng);
        restore(&mut net, &manifest, tensors)?;
        Ok(net)
    }

    pub fn hyperparameters(&self) -> serde_json::Value {
        serde_json::json!({
            "hidden": HIDDEN,
            "omega": self.omega,
            "center": self.center,
            "half_extent": self.half_extent,
            "out_scale": self.out_scale,
        })
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer == 0 {
            Activation::Sine { omega: self.omega }
        } else {
            Activation::Relu
        }
    }

    pub fn normalize(&self, p: Vec3) -> Vec3 {
        (p - self.center).component_div(self.half_extent)
    }

    pub fn denormalize(&self, u: Vec3) -> Vec3 {
        self.center + u.component_mul(self.half_extent)
    }

    fn forward_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, FieldCache<T>)> {
        let mut inputs = Vec::with_capacity(4);
        let mut pre = Vec::with_capacity(3);
        let mut h = x.clone();
        for l in 0..3 {
            let z = self.layers[l].forward(&h)?;
            inputs.push(h);
            h = self.activation(l).apply(&z);
            pre.push(z);
        }
        let y = self.layers[3].forward(&h)?;
        inputs.push(h);
        let shape_err = |_| Error::Shape("field cache".into());
        Ok((y, FieldCache { inputs: inputs.try_into().map_err(shape_err)?, pre: pre.try_into().map_err(shape_err)? }))
    }

    /// Network output on normalized rows `[n, 3] → [n, 1]`, before `out_scale`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    fn backward(&self, cache: &FieldCache<T>, dy: &Tensor<T>) -> (Vec<Tensor<T>>, Tensor<T>) {
        let mut grads = self.zero_grads();
        let mut d = self.layers[3].backward(&cache.inputs[3], dy, &mut grads[6..8]);
        for l in (0..3).rev() {
            let dz = self.activation(l).backward(&cache.pre[l], &d);
            d = self.layers[l].backward(&cache.inputs[l], &dz, &mut grads[2 * l..2 * l + 2]);
        }
        (grads, d)
    }

    fn box_clamp(&self, p: Vec3) -> (Vec3, f64) {
        let lo = self.center - self.half_extent;
        let hi = self.center + self.half_extent;
        let q = p.max_elem(lo).min_elem(hi);
        (q, p.distance(q))
    }
}

impl<T: Real> Sdf for NeuralField<T> {
    fn distance(&self, p: Vec3) -> f64 {
        self.distances(&[p])[0]
    }

    fn distances(&self, pts: &[Vec3]) -> Vec<f64> {
        let mut out = Vec::with_capacity(pts.len());
        for chunk in pts.chunks(1024) {
            let clamped: Vec<(Vec3, f64)> = chunk.iter().map(|&p| self.box_clamp(p)).collect();
            let rows: Vec<T> =
                clamped.iter().flat_map(|(q, _)| self.normalize(*q).to_array().map(|v| T::lit(v))).collect();
            let x = Tensor::new(vec![chunk.len(), 3], rows).expect("rows of 3");
            let y = self.forward(&x).expect("shapes fixed by construction");
            out.extend(y.data.iter().zip(&clamped).map(|(v, (_, outside))| self.out_scale * v.to_f64_lossy() + outside));
        }
        out
    }
}

impl<T: Real> Parameterized<T> for NeuralField<T> {
    fn param_names(&self) -> Vec<String> {
        (0..4).flat_map(|i| [format!("dense{i}.weight"), format!("dense{i}.bias")]).collect()
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

impl<T: Real> Differentiable<T> for NeuralField<T> {
    fn eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x)
    }

    fn vjp(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let (_, cache) = self.forward_cached(x)?;
        Ok(self.backward(&cache, dy))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldFitConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_surface: usize,
    pub batch_volume: usize,
    pub batch_eikonal: usize,
    pub eikonal_weight: f64,
    /// Finite-difference step for the Eikonal gradient, mm.
    pub fd_step_mm: f64,
    /// Volume samples drawn once from the oracle.
    pub pool_size: usize,
    /// Fraction of the pool drawn around contour points rather than uniformly in the box.
    pub near_fraction: f64,
    /// Distances beyond this (or the largest contour radius, if larger) only constrain sign.
    pub truncation_mm: f64,
    pub box_scale: f64,
    pub omega: f64,
    pub seed: u64,
}

impl Default for FieldFitConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            steps: 20_000,
            batch_surface: 256,
            batch_volume: 256,
            batch_eikonal: 32,
            eikonal_weight: 0.1,
            fd_step_mm: 0.5,
            pool_size: 16_384,
            near_fraction: 0.5,
            truncation_mm: 10.0,
            box_scale: 1.5,
            omega: 30.0,
            seed: 0,
        }
    }
}

impl FieldFitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("field fit: {m}")));
        if !(self.lr > 0.0) || self.steps == 0 {
            return bad("lr and steps must be positive");
        }
        if self.batch_surface == 0 || self.batch_volume == 0 || self.pool_size == 0 {
            return bad("batches and pool must be non-empty");
        }
        if !(self.fd_step_mm > 0.0 && self.truncation_mm > 0.0 && self.box_scale >= 1.0 && self.omega > 0.0) {
            return bad("fd step, truncation and omega must be positive; box scale at least 1");
        }
        if !(0.0..=1.0).contains(&self.near_fraction) || self.eikonal_weight < 0.0 {
            return bad("near fraction must lie in [0, 1] and the Eikonal weight be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldLossRecord {
    pub step: usize,
    pub surface: f64,
    pub volume: f64,
    pub eikonal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldFitReport {
    pub vessel: String,
    /// Mean losses over the last 100 steps, mm².
    pub surface_loss: f64,
    pub volume_loss: f64,
    pub eikonal_loss: f64,
    pub history: Vec<FieldLossRecord>,
}

/// Supervision for one vessel: contour points (target 0) and oracle-labelled volume points.
#[derive(Clone, Debug)]
pub struct FieldSamples {
    pub surface: Vec<Vec3>,
    pub volume: Vec<Vec3>,
    pub targets: Vec<f64>,
    pub center: Vec3,
    pub half_extent: Vec3,
    pub max_radius: f64,
}

impl FieldSamples {
    pub fn from_vessel(v: &TrackedVessel, cfg: &FieldFitConfig) -> Result<Self> {
        let oracle = SdfOracle::new(&loft_contours(v)?)?;
        let rings: Vec<(Vec<Vec3>, f64)> = v
            .contours
            .iter()
            .map(|c| (c.contour.points(), c.contour.radii.iter().sum::<f64>() / c.contour.radii.len() as f64))
            .collect();
        let surface: Vec<Vec3> = rings.iter().flat_map(|(p, _)| p.iter().copied()).collect();
        let max_radius = rings.iter().map(|r| r.1).fold(0.0, f64::max);
        let (lo, hi) = surface.iter().fold((surface[0], surface[0]), |(lo, hi), &p| (lo.min_elem(p), hi.max_elem(p)));
        let center = (lo + hi) * 0.5;
        let half_extent = ((hi - lo) * (0.5 * cfg.box_scale)).max_elem(Vec3::splat(1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f1e1d);
        let n_near = (cfg.pool_size as f64 * cfg.near_fraction).round() as usize;
        let mut volume = Vec::with_capacity(cfg.pool_size);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        for _ in 0..n_near {
            let (ring, r) = &rings[rng.gen_range(0..rings.len())];
            let p = ring[rng.gen_range(0..ring.len())];
            let sigma = (0.3 * r).max(0.5);
            volume.push(p + Vec3::new(unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng)) * sigma);
        }
        for _ in n_near..cfg.pool_size {
            let u = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            volume.push(center + u.component_mul(half_extent));
        }
        let targets = oracle.distances(&volume);
        Ok(Self { surface, volume, targets, center, half_extent, max_radius })
    }
}

/// Index `i` advancing through a reshuffled permutation.
struct Cycler {
    order: Vec<usize>,
    cursor: usize,
}

impl Cycler {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), cursor: n }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Fits a field to the vessel's lofted contours.
pub fn fit_neural_field(v: &TrackedVessel, cfg: &FieldFitConfig) -> Result<(NeuralField, FieldFitReport)> {
    cfg.validate()?;
    let samples = FieldSamples::from_vessel(v, cfg)?;
    let (field, mut report) = fit_to_samples(&samples, cfg)?;
    report.vessel = v.name.clone();
    Ok((field, report))
}

/// Keeps every other contour (sorted by index) for fitting and returns the points of the
/// skipped contours that lie strictly inside the kept span.
pub fn split_held_out(v: &TrackedVessel) -> Result<(TrackedVessel, Vec<Vec3>)> {
    let mut contours = v.contours.clone();
    contours.sort_by_key(|c| c.index);
    if contours.len() < 3 {
        return Err(Error::InvalidInput(format!("held-out split of `{}` needs at least 3 contours", v.name)));
    }
    let (first, last) = (contours[0].index, contours[(contours.len() - 1) / 2 * 2].index);
    let held = contours
        .iter()
        .skip(1)
        .step_by(2)
        .filter(|c| c.index > first && c.index < last)
        .flat_map(|c| c.contour.points())
        .collect();
    let kept = TrackedVessel { contours: contours.into_iter().step_by(2).collect(), ..v.clone() };
    Ok((kept, held))
}

pub fn fit_to_samples(s: &FieldSamples, cfg: &FieldFitConfig) -> Result<(NeuralField, FieldFitReport)> {
    cfg.validate()?;
    let trunc = cfg.truncation_mm.max(s.max_radius);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut field = NeuralField::<f32>::init(cfg.omega, s.center, s.half_extent, trunc, &mut rng);
    let names = field.param_names();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &field.params());
    let band: Vec<usize> = (0..s.volume.len()).filter(|&i| s.targets[i].abs() < trunc).collect();
    let (mut surf_cycle, mut vol_cycle) = (Cycler::new(s.surface.len()), Cycler::new(s.volume.len()));
    let n_eik = if band.is_empty() || cfg.eikonal_weight == 0.0 { 0 } else { cfg.batch_eikonal };
    let (ns, nv) = (cfg.batch_surface, cfg.batch_volume);
    let h = cfg.fd_step_mm;
    let axes = [Vec3::unit_x(), Vec3::unit_y(), Vec3::unit_z()];
    let scale = field.out_scale;

    let mut history = Vec::new();
    let mut window: Vec<[f64; 3]> = Vec::new();
    for step in 0..cfg.steps {
        let mut pts = Vec::with_capacity(ns + nv + 6 * n_eik);
        let mut vol_targets = Vec::with_capacity(nv);
        for _ in 0..ns {
            pts.push(s.surface[surf_cycle.next(&mut rng)]);
        }
        for _ in 0..nv {
            let i = vol_cycle.next(&mut rng);
            pts.push(s.volume[i]);
            vol_targets.push(s.targets[i]);
        }
        for _ in 0..n_eik {
            let p = s.volume[band[rng.gen_range(0..band.len())]];
            for a in axes {
                pts.push(p + a * h);
                pts.push(p - a * h);
            }
        }
        let rows: Vec<f32> = pts.iter().flat_map(|&p| field.normalize(p).to_array().map(|v| v as f32)).collect();
        let x = Tensor::new(vec![pts.len(), 3], rows)?;
        let (y, cache) = field.forward_cached(&x)?;
        let f: Vec<f64> = y.data.iter().map(|&v| scale * v as f64).collect();
        let mut df = vec![0.0f64; f.len()];

        let mut l_surf = 0.0;
        for i in 0..ns {
            l_surf += f[i] * f[i] / ns as f64;
            df[i] = 2.0 * f[i] / ns as f64;
        }
        let mut l_vol = 0.0;
        for (j, &t) in vol_targets.iter().enumerate() {
            let i = ns + j;
            let (fc, tc) = (f[i].clamp(-trunc, trunc), t.clamp(-trunc, trunc));
            let r = fc - tc;
            l_vol += r * r / nv as f64;
            if f[i].abs() < trunc {
                df[i] = 2.0 * r / nv as f64;
            }
        }
        let mut l_eik = 0.0;
        for e in 0..n_eik {
            let base = ns + nv + 6 * e;
            let g: [f64; 3] = [0, 1, 2].map(|a| (f[base + 2 * a] - f[base + 2 * a + 1]) / (2.0 * h));
            let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt().max(1e-12);
            l_eik += (norm - 1.0).powi(2) / n_eik as f64;
            let c = cfg.eikonal_weight * 2.0 * (norm - 1.0) / n_eik as f64 / norm / (2.0 * h);
            for a in 0..3 {
                df[base + 2 * a] += c * g[a];
                df[base + 2 * a + 1] -= c * g[a];
            }
        }
        let total = l_surf + l_vol + cfg.eikonal_weight * l_eik;
        if !total.is_finite() {
            return Err(Error::Divergence(format!("field loss became {total} at step {}", step + 1)));
        }
        let dy = Tensor::new(vec![f.len(), 1], df.iter().map(|&d| (d * scale) as f32).collect())?;
        let (grads, _) = field.backward(&cache, &dy);
        adam.step(&mut field.params_mut(), &grads, &names)?;

        window.push([l_surf, l_vol, l_eik]);
        if window.len() > 100 {
            window.remove(0);
        }
        if (step + 1) % 100 == 0 || step + 1 == cfg.steps {
            history.push(FieldLossRecord { step: step + 1, surface: l_surf, volume: l_vol, eikonal: l_eik });
        }
    }
    let mean = |c: usize| window.iter().map(|w| w[c]).sum::<f64>() / window.len() as f64;
    let report = FieldFitReport {
        vessel: String::new(),
        surface_loss: mean(0),
        volume_loss: mean(1),
        eikonal_loss: mean(2),
        history,
    };
    Ok((field, report))
}
