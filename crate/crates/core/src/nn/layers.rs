//! Layers with explicit forward and backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gradcheck::Differentiable;
use super::{Parameterized, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    /// `sin(omega · z)`
    Sine { omega: f64 },
}

impl Activation {
    pub fn apply<T: Real>(&self, z: &Tensor<T>) -> Tensor<T> {
        let mut y = z.clone();
        match *self {
            Activation::Identity => {}
            Activation::Relu => y.data.iter_mut().for_each(|v| *v = v.max(T::zero())),
            Activation::Sine { omega } => {
                let w = T::lit(omega);
                y.data.iter_mut().for_each(|v| *v = (w * *v).sin());
            }
        }
        y
    }

    /// Gradient with respect to the pre-activation `z`.
    pub fn backward<T: Real>(&self, z: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let mut dz = dy.clone();
        match *self {
            Activation::Identity => {}
            Activation::Relu => {
                for (d, &v) in dz.data.iter_mut().zip(&z.data) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
            }
            Activation::Sine { omega } => {
                let w = T::lit(omega);
                for (d, &v) in dz.data.iter_mut().zip(&z.data) {
                    *d *= w * (w * v).cos();
                }
            }
        }
        dz
    }
}

/// Fully connected layer on row batches: `[n, in] → [n, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

impl<T: Real> Dense<T> {
    /// He-style initialization.
    pub fn init<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[n_out, n_in], (2.0 / n_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[n_out]),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n_in, n_out) = (self.n_in(), self.n_out());
        if x.shape().len() != 2 || x.shape()[1] != n_in {
            return Err(Error::Shape(format!("dense expects [n, {n_in}], got {:?}", x.shape())));
        }
        let n = x.shape()[0];
        // Transposed f64 copy so the inner loop runs over outputs and vectorizes.
        let mut wt = vec![0.0f64; n_in * n_out];
        for o in 0..n_out {
            for i in 0..n_in {
                wt[i * n_out + o] = self.weight.data[o * n_in + i].to_acc();
            }
        }
        let bias: Vec<f64> = self.bias.data.iter().map(|b| b.to_acc()).collect();
        let mut out = Vec::with_capacity(n * n_out);
        let mut acc = vec![0.0f64; n_out];
        for row in x.data.chunks_exact(n_in) {
            acc.copy_from_slice(&bias);
            for (i, xv) in row.iter().enumerate() {
                let xv = xv.to_acc();
                for (a, w) in acc.iter_mut().zip(&wt[i * n_out..(i + 1) * n_out]) {
                    *a += xv * w;
                }
            }
            out.extend(acc.iter().map(|&a| T::from_acc(a)));
        }
        Tensor::new(vec![n, n_out], out)
    }

    /// Accumulates `[dW, db]` into `grads` and returns `dx`.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut [Tensor<T>]) -> Tensor<T> {
        let (n_in, n_out) = (self.n_in(), self.n_out());
        let n = x.shape()[0];
        let w: Vec<f64> = self.weight.data.iter().map(|v| v.to_acc()).collect();
        let mut dx = Vec::with_capacity(n * n_in);
        let mut acc = vec![0.0f64; n_in];
        for r in 0..n {
            acc.iter_mut().for_each(|a| *a = 0.0f64);
            let dyr = &dy.data[r * n_out..(r + 1) * n_out];
            for (o, &g) in dyr.iter().enumerate() {
                let g = g.to_acc();
                for (a, wv) in acc.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *a += g * wv;
                }
            }
            dx.extend(acc.iter().map(|&a| T::from_acc(a)));
        }
        // dW[o, i] = sum_r dy[r, o] x[r, i], accumulated row by row.
        let mut gacc = vec![0.0f64; n_out * n_in];
        let mut bacc = vec![0.0f64; n_out];
        let mut xr = vec![0.0f64; n_in];
        for r in 0..n {
            for (a, v) in xr.iter_mut().zip(&x.data[r * n_in..(r + 1) * n_in]) {
                *a = v.to_acc();
            }
            for o in 0..n_out {
                let g = dy.data[r * n_out + o].to_acc();
                bacc[o] += g;
                if g == 0.0 {
                    continue;
                }
                for (a, xv) in gacc[o * n_in..(o + 1) * n_in].iter_mut().zip(&xr) {
                    *a += g * xv;
                }
            }
        }
        let (gw, rest) = grads.split_at_mut(1);
        for (gv, a) in gw[0].data.iter_mut().zip(&gacc) {
            *gv += T::from_acc(*a);
        }
        for (gv, a) in rest[0].data.iter_mut().zip(&bacc) {
            *gv += T::from_acc(*a);
        }
        Tensor::new(vec![n, n_in], dx).expect("shape by construction")
    }

    pub fn params(&self) -> [&Tensor<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// 2D convolution on `[channels, rows, cols]` images with zero padding along rows and
/// circular padding along columns. Odd square kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dCircular<T> {
    /// `[c_out, c_in, k, k]`
    pub weight: Tensor<T>,
    /// `[c_out]`
    pub bias: Tensor<T>,
}

impl<T: Real> Conv2dCircular<T> {
    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        let fan_in = (c_in * k * k) as f64;
        Self {
            weight: Tensor::randn(&[c_out, c_in, k, k], (2.0 / fan_in).sqrt(), rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.weight.shape();
        (s[0], s[1], s[2])
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (c_out, c_in, k) = self.dims();
        let s = x.shape();
        if s.len() != 3 || s[0] != c_in {
            return Err(Error::Shape(format!("conv2d expects [{c_in}, rows, cols], got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let pad = k / 2;
        let plane = h * w;
        let mut out = Vec::with_capacity(c_out * plane);
        let mut acc = vec![0.0f64; plane];
        for co in 0..c_out {
            acc.iter_mut().for_each(|a| *a = self.bias.data[co].to_acc());
            for ci in 0..c_in {
                let xp = &x.data[ci * plane..(ci + 1) * plane];
                for dh in 0..k {
                    for dw in 0..k {
                        let wv = self.weight.data[((co * c_in + ci) * k + dh) * k + dw].to_acc();
                        let shift = (dw + w - pad % w) % w;
                        for r in 0..h {
                            let rr = r as isize + dh as isize - pad as isize;
                            if rr < 0 || rr >= h as isize {
                                continue;
                            }
                            let src = &xp[rr as usize * w..(rr as usize + 1) * w];
                            let dst = &mut acc[r * w..(r + 1) * w];
                            let (d0, d1) = dst.split_at_mut(w - shift);
                            for (a, v) in d0.iter_mut().zip(&src[shift..]) {
                                *a += wv * v.to_acc();
                            }
                            for (a, v) in d1.iter_mut().zip(&src[..shift]) {
                                *a += wv * v.to_acc();
                            }
                        }
                    }
                }
            }
            out.extend(acc.iter().map(|&a| T::from_acc(a)));
        }
        Tensor::new(vec![c_out, h, w], out)
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut [Tensor<T>]) -> Tensor<T> {
        let (c_out, c_in, k) = self.dims();
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let pad = k / 2;
        let plane = h * w;
        let mut dx = vec![0.0f64; c_in * plane];
        let (gw, rest) = grads.split_at_mut(1);
        let gw = &mut gw[0].data;
        let gb = &mut rest[0].data;
        for co in 0..c_out {
            let g = &dy.data[co * plane..(co + 1) * plane];
            gb[co] += T::from_acc(g.iter().fold(0.0f64, |a, v| a + v.to_acc()));
            for ci in 0..c_in {
                let xp = &x.data[ci * plane..(ci + 1) * plane];
                let dxp = &mut dx[ci * plane..(ci + 1) * plane];
                for dh in 0..k {
                    for dw in 0..k {
                        let widx = ((co * c_in + ci) * k + dh) * k + dw;
                        let wv = self.weight.data[widx].to_acc();
                        let shift = (dw + w - pad % w) % w;
                        let mut wacc = 0.0f64;
                        for r in 0..h {
                            let rr = r as isize + dh as isize - pad as isize;
                            if rr < 0 || rr >= h as isize {
                                continue;
                            }
                            let rr = rr as usize;
                            let grow = &g[r * w..(r + 1) * w];
                            for c in 0..w {
                                let cc = if c + shift >= w { c + shift - w } else { c + shift };
                                let gv = grow[c].to_acc();
                                wacc += gv * xp[rr * w + cc].to_acc();
                                dxp[rr * w + cc] += gv * wv;
                            }
                        }
                        gw[widx] += T::from_acc(wacc);
                    }
                }
            }
        }
        Tensor::new(x.shape().to_vec(), dx.into_iter().map(T::from_acc).collect()).expect("shape by construction")
    }

    pub fn params(&self) -> [&Tensor<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Symmetric neighbour lists in compressed form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    pub offsets: Vec<usize>,
    pub neighbors: Vec<usize>,
}

impl Adjacency {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for l in lists {
            neighbors.extend_from_slice(l);
            offsets.push(neighbors.len());
        }
        Self { offsets, neighbors }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn of(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    /// Mean of the neighbours' feature rows: `[V, c] → [V, c]`.
    pub fn neighbor_mean<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        let c = x.shape()[1];
        let mut out = Vec::with_capacity(x.len());
        let mut acc = vec![0.0f64; c];
        for v in 0..self.len() {
            acc.iter_mut().for_each(|a| *a = 0.0f64);
            let nb = self.of(v);
            for &u in nb {
                for (a, xv) in acc.iter_mut().zip(&x.data[u * c..(u + 1) * c]) {
                    *a += xv.to_acc();
                }
            }
            let inv = 1.0f64 / (nb.len().max(1) as f64);
            out.extend(acc.iter().map(|&a| T::from_acc(a * inv)));
        }
        Tensor::new(x.shape().to_vec(), out).expect("shape by construction")
    }

    /// Adjoint of [`Self::neighbor_mean`].
    pub fn neighbor_mean_backward<T: Real>(&self, dm: &Tensor<T>) -> Tensor<T> {
        let c = dm.shape()[1];
        let mut acc = vec![0.0f64; dm.len()];
        for v in 0..self.len() {
            let nb = self.of(v);
            let inv = 1.0f64 / (nb.len().max(1) as f64);
            for &u in nb {
                for (a, g) in acc[u * c..(u + 1) * c].iter_mut().zip(&dm.data[v * c..(v + 1) * c]) {
                    *a += g.to_acc() * inv;
                }
            }
        }
        Tensor::new(dm.shape().to_vec(), acc.into_iter().map(T::from_acc).collect()).expect("shape by construction")
    }
}

/// Isotropic graph convolution: `act(W_self · x_v + W_neigh · mean_{u ∈ N(v)} x_u + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphConv<T> {
    pub self_weight: Dense<T>,
    /// Bias-free; the bias lives in `self_weight`.
    pub neigh_weight: Tensor<T>,
    pub activation: Activation,
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct GraphConvCache<T> {
    pub neigh_mean: Tensor<T>,
    pub pre_activation: Tensor<T>,
}

impl<T: Real> GraphConv<T> {
    pub fn init<R: Rng + ?Sized>(n_in: usize, n_out: usize, activation: Activation, rng: &mut R) -> Self {
        let std = (1.0 / n_in as f64).sqrt();
        Self {
            self_weight: Dense { weight: Tensor::randn(&[n_out, n_in], std, rng), bias: Tensor::zeros(&[n_out]) },
            neigh_weight: Tensor::randn(&[n_out, n_in], std, rng),
            activation,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, adj: &Adjacency) -> Result<(Tensor<T>, GraphConvCache<T>)> {
        if x.shape().len() != 2 || x.shape()[0] != adj.len() {
            return Err(Error::Shape(format!("graph_conv expects [{}, c], got {:?}", adj.len(), x.shape())));
        }
        let m = adj.neighbor_mean(x);
        let mut z = self.self_weight.forward(x)?;
        let neigh = Dense { weight: self.neigh_weight.clone(), bias: Tensor::zeros(&[self.self_weight.n_out()]) };
        let zn = neigh.forward(&m)?;
        z.add_assign(&zn);
        let y = self.activation.apply(&z);
        Ok((y, GraphConvCache { neigh_mean: m, pre_activation: z }))
    }

    /// Accumulates `[W_self, b, W_neigh]` gradients; returns `dx`.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        cache: &GraphConvCache<T>,
        dy: &Tensor<T>,
        adj: &Adjacency,
        grads: &mut [Tensor<T>],
    ) -> Tensor<T> {
        let dz = self.activation.backward(&cache.pre_activation, dy);
        let (gs, gn) = grads.split_at_mut(2);
        let mut dx = self.self_weight.backward(x, &dz, gs);
        let neigh = Dense { weight: self.neigh_weight.clone(), bias: Tensor::zeros(&[self.self_weight.n_out()]) };
        let mut scratch = [Tensor::zeros_like(&self.neigh_weight), Tensor::zeros(&[self.self_weight.n_out()])];
        let dm = neigh.backward(&cache.neigh_mean, &dz, &mut scratch);
        gn[0].add_assign(&scratch[0]);
        dx.add_assign(&adj.neighbor_mean_backward(&dm));
        dx
    }

    pub fn params(&self) -> [&Tensor<T>; 3] {
        [&self.self_weight.weight, &self.self_weight.bias, &self.neigh_weight]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 3] {
        let Dense { weight, bias } = &mut self.self_weight;
        [weight, bias, &mut self.neigh_weight]
    }
}

/// Softmax over rows independently in each column of a `[rows, cols]` map.
pub fn column_softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (logits.shape()[0], logits.shape()[1]);
    let mut out = logits.clone();
    for c in 0..w {
        let mut mx = T::neg_infinity();
        for r in 0..h {
            mx = mx.max(logits.data[r * w + c]);
        }
        let mut sum = 0.0f64;
        for r in 0..h {
            let e = (logits.data[r * w + c] - mx).exp();
            out.data[r * w + c] = e;
            sum += e.to_acc();
        }
        let inv = 1.0f64 / sum;
        for r in 0..h {
            out.data[r * w + c] = T::from_acc(out.data[r * w + c].to_acc() * inv);
        }
    }
    out
}

pub fn column_softmax_backward<T: Real>(probs: &Tensor<T>, dprobs: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (probs.shape()[0], probs.shape()[1]);
    let mut out = probs.clone();
    for c in 0..w {
        let mut dot = 0.0f64;
        for r in 0..h {
            dot += probs.data[r * w + c].to_acc() * dprobs.data[r * w + c].to_acc();
        }
        for r in 0..h {
            let i = r * w + c;
            out.data[i] = T::from_acc(probs.data[i].to_acc() * (dprobs.data[i].to_acc() - dot));
        }
    }
    out
}

impl<T: Real> Parameterized<T> for Dense<T> {
    fn param_names(&self) -> Vec<String> {
        vec!["weight".into(), "bias".into()]
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        Dense::params(self).to_vec()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        Dense::params_mut(self).into_iter().collect()
    }
}

impl<T: Real> Differentiable<T> for Dense<T> {
    fn eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x)
    }

    fn vjp(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let mut g = Parameterized::zero_grads(self);
        let dx = self.backward(x, dy, &mut g);
        Ok((g, dx))
    }
}

impl<T: Real> Parameterized<T> for Conv2dCircular<T> {
    fn param_names(&self) -> Vec<String> {
        vec!["weight".into(), "bias".into()]
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        Conv2dCircular::params(self).to_vec()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        Conv2dCircular::params_mut(self).into_iter().collect()
    }
}

impl<T: Real> Differentiable<T> for Conv2dCircular<T> {
    fn eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x)
    }

    fn vjp(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let mut g = Parameterized::zero_grads(self);
        let dx = self.backward(x, dy, &mut g);
        Ok((g, dx))
    }
}

/// A graph convolution bound to a fixed graph.
pub struct GraphConvOn<'a, T> {
    pub layer: GraphConv<T>,
    pub adj: &'a Adjacency,
}

impl<T: Real> Parameterized<T> for GraphConvOn<'_, T> {
    fn param_names(&self) -> Vec<String> {
        vec!["self_weight".into(), "bias".into(), "neigh_weight".into()]
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        self.layer.params().to_vec()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layer.params_mut().into_iter().collect()
    }
}

impl<T: Real> Differentiable<T> for GraphConvOn<'_, T> {
    fn eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.layer.forward(x, self.adj)?.0)
    }

    fn vjp(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let (_, cache) = self.layer.forward(x, self.adj)?;
        let mut g = Parameterized::zero_grads(self);
        let dx = self.layer.backward(x, &cache, dy, self.adj, &mut g);
        Ok((g, dx))
    }
}
