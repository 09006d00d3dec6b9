use rand::Rng;
use serde_json::json;

use crate::error::{Error, Result};
use crate::nn::gradcheck::Differentiable;
use crate::nn::layers::{Activation, Adjacency, Dense, GraphConv, GraphConvCache};
use crate::nn::{Parameterized, Tensor};
use crate::real::Real;

pub const HIDDEN: usize = 32;

/// Per-vertex encoder (two dense layers), three graph convolutions and a linear head.
/// One parameter set serves every scale.
#[derive(Clone, Debug, PartialEq)]
pub struct OrientationNet<T> {
    pub encoder: [Dense<T>; 2],
    pub convs: [GraphConv<T>; 3],
    pub head: Dense<T>,
}

#[derive(Clone, Debug)]
pub struct NetCache<T> {
    /// Pre-activations of the two encoder layers.
    enc_z: [Tensor<T>; 2],
    /// Inputs to each layer after the first: encoder 1, convs 0..3, head.
    inputs: Vec<Tensor<T>>,
    convs: Vec<GraphConvCache<T>>,
}

impl<T: Real> OrientationNet<T> {
    pub fn init<R: Rng + ?Sized>(n_samples: usize, rng: &mut R) -> Self {
        Self {
            encoder: [Dense::init(n_samples, HIDDEN, rng), Dense::init(HIDDEN, HIDDEN, rng)],
            convs: [
                GraphConv::init(HIDDEN, HIDDEN, Activation::Relu, rng),
                GraphConv::init(HIDDEN, HIDDEN, Activation::Relu, rng),
                GraphConv::init(HIDDEN, HIDDEN, Activation::Relu, rng),
            ],
            head: Dense::init(HIDDEN, 1, rng),
        }
    }

    pub fn n_samples(&self) -> usize {
        self.encoder[0].n_in()
    }

    pub fn hyperparameters(&self) -> serde_json::Value {
        json!({ "n_samples": self.n_samples(), "hidden": HIDDEN, "graph_convs": 3 })
    }

    /// `[V, N_s]` normalized features to `[V, 1]` responses.
    pub fn forward(&self, x: &Tensor<T>, adj: &Adjacency) -> Result<(Tensor<T>, NetCache<T>)> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.n_samples() || s[0] != adj.len() {
            return Err(Error::Shape(format!(
                "orientation net expects [{}, {}], got {s:?}",
                adj.len(),
                self.n_samples()
            )));
        }
        let relu = Activation::Relu;
        let z0 = self.encoder[0].forward(x)?;
        let h0 = relu.apply(&z0);
        let z1 = self.encoder[1].forward(&h0)?;
        let mut h = relu.apply(&z1);
        let mut inputs = vec![h0];
        let mut convs = Vec::with_capacity(3);
        for c in &self.convs {
            let (y, cache) = c.forward(&h, adj)?;
            inputs.push(h);
            convs.push(cache);
            h = y;
        }
        let y = self.head.forward(&h)?;
        inputs.push(h);
        Ok((y, NetCache { enc_z: [z0, z1], inputs, convs }))
    }

    pub fn predict(&self, x: &Tensor<T>, adj: &Adjacency) -> Result<Tensor<T>> {
        Ok(self.forward(x, adj)?.0)
    }

    /// Parameter gradients (in `params()` order) and the input gradient.
    pub fn backward(&self, x: &Tensor<T>, cache: &NetCache<T>, dy: &Tensor<T>, adj: &Adjacency) -> (Vec<Tensor<T>>, Tensor<T>) {
        let mut g = Parameterized::zero_grads(self);
        let relu = Activation::Relu;
        let mut d = self.head.backward(&cache.inputs[4], dy, &mut g[13..15]);
        for i in (0..3).rev() {
            let off = 4 + 3 * i;
            d = self.convs[i].backward(&cache.inputs[1 + i], &cache.convs[i], &d, adj, &mut g[off..off + 3]);
        }
        let dz1 = relu.backward(&cache.enc_z[1], &d);
        let dh0 = self.encoder[1].backward(&cache.inputs[0], &dz1, &mut g[2..4]);
        let dz0 = relu.backward(&cache.enc_z[0], &dh0);
        let dx = self.encoder[0].backward(x, &dz0, &mut g[0..2]);
        (g, dx)
    }
}

impl<T: Real> Parameterized<T> for OrientationNet<T> {
    fn param_names(&self) -> Vec<String> {
        let mut n = Vec::new();
        for i in 0..2 {
            n.push(format!("enc{i}.weight"));
            n.push(format!("enc{i}.bias"));
        }
        for i in 0..3 {
            n.push(format!("gc{i}.self_weight"));
            n.push(format!("gc{i}.bias"));
            n.push(format!("gc{i}.neigh_weight"));
        }
        n.push("head.weight".into());
        n.push("head.bias".into());
        n
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        let mut p: Vec<&Tensor<T>> = Vec::new();
        for e in &self.encoder {
            p.extend(e.params());
        }
        for c in &self.convs {
            p.extend(c.params());
        }
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p: Vec<&mut Tensor<T>> = Vec::new();
        for e in &mut self.encoder {
            p.extend(e.params_mut());
        }
        for c in &mut self.convs {
            p.extend(c.params_mut());
        }
        p.extend(self.head.params_mut());
        p
    }
}

/// The network bound to a fixed sphere graph, for gradient checking.
pub struct OrientationNetOn<'a, T> {
    pub net: OrientationNet<T>,
    pub adj: &'a Adjacency,
}

impl<T: Real> Parameterized<T> for OrientationNetOn<'_, T> {
    fn param_names(&self) -> Vec<String> {
        self.net.param_names()
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.net.params_mut()
    }
}

impl<T: Real> Differentiable<T> for OrientationNetOn<'_, T> {
    fn eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.predict(x, self.adj)
    }

    fn vjp(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let (_, cache) = self.net.forward(x, self.adj)?;
        Ok(self.net.backward(x, &cache, dy, self.adj))
    }
}
