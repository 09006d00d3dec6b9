//! Spherical backbone: radial projection of local image content onto an icosphere and the
//! graph network that turns it into a per-vertex response, at every scale of a scale set.

mod icosphere;
mod net;
mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use icosphere::{icosahedral_rotations, Icosphere};
pub use net::{NetCache, OrientationNet, OrientationNetOn, HIDDEN};
pub use train::{
    bump_target, scale_amplitude, synth_orientation_dataset, train_orientation, OrientationDataset,
    OrientationManifest, OrientationManifestEntry, OrientationSample, OrientationSynthConfig, OrientationTrainConfig,
    TrainReport,
};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::real::Real;
use crate::volume::IntensityField;
use crate::Vec3;

pub const DEFAULT_LEVEL: u32 = 3;
pub const DEFAULT_SAMPLES: usize = 32;

/// Strictly increasing positive radii in mm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScaleSet(Vec<f64>);

impl ScaleSet {
    pub fn new(radii: Vec<f64>) -> Result<Self> {
        if radii.is_empty() || radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::InvalidInput("scale set needs positive finite radii".into()));
        }
        if radii.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("scale set must be strictly increasing".into()));
        }
        Ok(Self(radii))
    }

    /// {5, 10, ..., 80} mm.
    pub fn standard() -> Self {
        Self((1..=16).map(|i| 5.0 * i as f64).collect())
    }

    pub fn radii(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0[0]
    }

    pub fn max(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    pub fn median(&self) -> f64 {
        let n = self.0.len();
        if n % 2 == 1 {
            self.0[n / 2]
        } else {
            0.5 * (self.0[n / 2 - 1] + self.0[n / 2])
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0.iter().map(|r| r * s).collect())
    }
}

impl TryFrom<Vec<f64>> for ScaleSet {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ScaleSet> for Vec<f64> {
    fn from(s: ScaleSet) -> Self {
        s.0
    }
}

/// Intensities at `x + t_k v` for `t_k = k r / N_s`, `k = 1..N_s`, per vertex `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SphericalFeature {
    pub center: Vec3,
    pub scale: f64,
    pub n_samples: usize,
    /// Vertex-major `[V, N_s]`.
    pub samples: Vec<f32>,
}

impl SphericalFeature {
    pub fn n_vertices(&self) -> usize {
        self.samples.len() / self.n_samples
    }

    pub fn ray(&self, v: usize) -> &[f32] {
        &self.samples[v * self.n_samples..(v + 1) * self.n_samples]
    }

    /// Network input: the whole feature shifted to zero mean and divided by `std + 1e-6`.
    pub fn to_input<T: Real>(&self) -> Tensor<T> {
        let n = self.samples.len() as f64;
        let mean = self.samples.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.samples.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var.sqrt() + 1e-6);
        let data = self.samples.iter().map(|&v| T::lit((v as f64 - mean) * inv)).collect();
        Tensor::new(vec![self.n_vertices(), self.n_samples], data).expect("shape by construction")
    }
}

pub fn project_features<F: IntensityField + ?Sized>(
    field: &F,
    x: Vec3,
    r: f64,
    sphere: &Icosphere<f64>,
    n_samples: usize,
) -> Result<SphericalFeature> {
    if !(r > 0.0 && r.is_finite()) || n_samples < 2 {
        return Err(Error::InvalidInput(format!("projection needs r > 0 and N_s >= 2 (r = {r}, N_s = {n_samples})")));
    }
    let step = r / n_samples as f64;
    let mut samples = Vec::with_capacity(sphere.len() * n_samples);
    for v in &sphere.vertices {
        for k in 1..=n_samples {
            samples.push(field.intensity(x + *v * (k as f64 * step)) as f32);
        }
    }
    Ok(SphericalFeature { center: x, scale: r, n_samples, samples })
}

/// Per-vertex scalar field at one scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphericalResponse {
    pub scale: f64,
    pub values: Vec<f32>,
}

impl SphericalResponse {
    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

pub fn gcn_forward(net: &OrientationNet<f32>, feat: &SphericalFeature, sphere: &Icosphere<f64>) -> Result<SphericalResponse> {
    if feat.n_samples != net.n_samples() {
        return Err(Error::Shape(format!(
            "feature has {} samples per ray, network expects {}",
            feat.n_samples,
            net.n_samples()
        )));
    }
    let y = net.predict(&feat.to_input(), &sphere.adjacency)?;
    Ok(SphericalResponse { scale: feat.scale, values: y.data })
}

/// One response per scale, all through the same parameters.
pub fn multi_scale_forward<F: IntensityField + ?Sized>(
    net: &OrientationNet<f32>,
    field: &F,
    x: Vec3,
    scales: &ScaleSet,
    sphere: &Icosphere<f64>,
) -> Result<Vec<SphericalResponse>> {
    scales
        .radii()
        .par_iter()
        .map(|&r| gcn_forward(net, &project_features(field, x, r, sphere, net.n_samples())?, sphere))
        .collect()
}
