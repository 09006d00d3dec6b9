//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Parameterized, Tensor};
use crate::error::Result;
use crate::real::Real;

/// A module with a single tensor input, exposing its vector-Jacobian product.
pub trait Differentiable<T: Real>: Parameterized<T> {
    fn eval(&self, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// Gradients of `⟨dy, f(x)⟩` with respect to the parameters (in `params()` order) and `x`.
    fn vjp(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)>;
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(move |t| t.max_rel_error >= self.tolerance)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Elements probed per tensor; larger tensors are subsampled.
    pub max_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-3, max_per_tensor: 48, seed: 0 }
    }
}

fn probe_loss<T: Real>(y: &Tensor<T>, c: &[f64]) -> f64 {
    y.data.iter().zip(c).map(|(a, b)| a.to_f64_lossy() * b).sum()
}

/// Compares analytic gradients of `L = ⟨c, f(x)⟩` (random `c`) against central differences.
///
/// Relative error per element is `|a - n| / max(|a|, |n|, floor)` where `floor` is 1e-3 of the
/// largest analytic gradient magnitude in the module, so exactly-zero gradients do not divide
/// by zero.
pub fn grad_check<T: Real, M: Differentiable<T>>(
    module: &mut M,
    input: &Tensor<T>,
    tolerance: f64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let y = module.eval(input)?;
    let c: Vec<f64> = Tensor::<f64>::randn(y.shape(), 1.0, &mut rng).data;
    let dy = Tensor::new(y.shape().to_vec(), c.iter().map(|&v| T::lit(v)).collect())?;
    let (pgrads, xgrad) = module.vjp(input, &dy)?;
    let h = T::lit(opts.step);
    let two_h = 2.0 * opts.step;

    let floor = pgrads
        .iter()
        .chain(std::iter::once(&xgrad))
        .flat_map(|g| g.data.iter())
        .map(|v| v.to_f64_lossy().abs())
        .fold(0.0, f64::max)
        * 1e-3
        + 1e-12;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(floor);

    let names = module.param_names();
    let mut tensors = Vec::new();
    for (pi, name) in names.iter().enumerate() {
        let len = module.params()[pi].len();
        let idx: Vec<usize> = if len <= opts.max_per_tensor {
            (0..len).collect()
        } else {
            sample(&mut rng, len, opts.max_per_tensor).into_vec()
        };
        let mut worst: f64 = 0.0;
        for &j in &idx {
            let orig = module.params()[pi].data[j];
            module.params_mut()[pi].data[j] = orig + h;
            let lp = probe_loss(&module.eval(input)?, &c);
            module.params_mut()[pi].data[j] = orig - h;
            let lm = probe_loss(&module.eval(input)?, &c);
            module.params_mut()[pi].data[j] = orig;
            let numeric = (lp - lm) / two_h;
            worst = worst.max(rel(pgrads[pi].data[j].to_f64_lossy(), numeric));
        }
        tensors.push(TensorCheck { name: name.clone(), checked: idx.len(), max_rel_error: worst });
    }

    let mut x = input.clone();
    let idx: Vec<usize> = if x.len() <= opts.max_per_tensor {
        (0..x.len()).collect()
    } else {
        sample(&mut rng, x.len(), opts.max_per_tensor).into_vec()
    };
    let mut worst: f64 = 0.0;
    for &j in &idx {
        let orig = x.data[j];
        x.data[j] = orig + h;
        let lp = probe_loss(&module.eval(&x)?, &c);
        x.data[j] = orig - h;
        let lm = probe_loss(&module.eval(&x)?, &c);
        x.data[j] = orig;
        worst = worst.max(rel(xgrad.data[j].to_f64_lossy(), (lp - lm) / two_h));
    }
    tensors.push(TensorCheck { name: "input".into(), checked: idx.len(), max_rel_error: worst });

    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { tensors, max_rel_error, tolerance, passed: max_rel_error < tolerance })
}
