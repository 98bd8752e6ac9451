//! Parameter storage, per-pass binding context and the small set of layers
//! every block is assembled from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Overwrites a tensor keeping its shape.
    pub fn set(&mut self, id: ParamId, data: Vec<f64>) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if data.len() != t.numel() {
            return Err(Error::Dimension(format!(
                "{}: expected {} values, got {}",
                self.names[id.0],
                t.numel(),
                data.len()
            )));
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }

    /// Adds uniform noise in `[-scale, scale]` to every parameter.
    pub fn perturb<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v += rng.random_range(-scale..scale);
            }
        }
    }
}

/// Per-parameter gradient buffers indexed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct Grads(pub Vec<Option<Vec<f64>>>);

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self(vec![None; store.len()])
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn accumulate(&mut self, other: &Grads) {
        if self.0.len() < other.0.len() {
            self.0.resize(other.0.len(), None);
        }
        for (mine, theirs) in self.0.iter_mut().zip(&other.0) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.iter_mut().zip(t).for_each(|(a, b)| *a += b),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.0.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().flatten().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// One forward (and optional backward) pass: a fresh tape plus lazily bound
/// parameter leaves.
pub struct Cx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Cx<'a> {
    /// Parameters enter the tape as differentiable leaves.
    pub fn train(store: &'a ParamStore) -> Self {
        Self { g: Graph::new(), store, bound: vec![None; store.len()], trainable: true }
    }

    /// Parameters enter as constants; no gradient bookkeeping.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self { g: Graph::new(), store, bound: vec![None; store.len()], trainable: false }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable { self.g.param(t) } else { self.g.constant(t) };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    /// Runs backward from `loss` and collects parameter gradients.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        self.g.backward(loss)?;
        let mut grads = Grads::zeros_like(self.store);
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                grads.0[i] = self.g.grad(*v).map(<[f64]>::to_vec);
            }
        }
        Ok(grads)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Affine + activation per layer over the rows of `x`.
pub fn mlp_forward(g: &mut Graph, x: Var, layers: &[(Var, Var, Activation)]) -> Result<Var> {
    let mut h = x;
    for (i, &(w, b, act)) in layers.iter().enumerate() {
        let (hs, ws) = (g.shape(h).to_vec(), g.shape(w).to_vec());
        if ws.len() != 2 || hs.last() != ws.first() {
            return Err(Error::Dimension(format!(
                "mlp layer {i}: input {hs:?} does not chain into weight {ws:?}"
            )));
        }
        let z = g.matmul(h, w)?;
        let z = g.add_bias(z, b)?;
        h = act.apply(g, z);
    }
    Ok(h)
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Builder) -> Result<T>) -> Result<T> {
        let saved = self.prefix.clone();
        self.prefix = self.full(name);
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        let full = self.full(name);
        self.store.add(full, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let t = Tensor::uniform(shape.to_vec(), -bound, bound, self.rng);
        self.tensor(name, t)
    }

    /// Weights `U(±1/√fan_in)`, zero bias.
    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        self.scoped(name, |b| {
            let bound = 1.0 / (d_in as f64).sqrt();
            let w = b.uniform("w", &[d_in, d_out], bound)?;
            let bias = b.tensor("b", Tensor::zeros([d_out]))?;
            Ok(Linear { w, b: bias, d_in, d_out })
        })
    }

    pub fn linear_zero(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        self.scoped(name, |b| {
            let w = b.tensor("w", Tensor::zeros([d_in, d_out]))?;
            let bias = b.tensor("b", Tensor::zeros([d_out]))?;
            Ok(Linear { w, b: bias, d_in, d_out })
        })
    }

    pub fn layer_norm(&mut self, name: &str, n: usize) -> Result<LayerNorm> {
        self.scoped(name, |b| {
            let gain = b.tensor("g", Tensor::full([n], 1.0))?;
            let bias = b.tensor("b", Tensor::zeros([n]))?;
            Ok(LayerNorm { gain, bias })
        })
    }

    /// `dims = [in, h1, ..., out]`; hidden layers use `act`, the last is linear.
    pub fn mlp(&mut self, name: &str, dims: &[usize], act: Activation) -> Result<Mlp> {
        self.scoped(name, |b| {
            let mut layers = Vec::new();
            for i in 0..dims.len() - 1 {
                let l = b.linear(&format!("l{i}"), dims[i], dims[i + 1])?;
                let a = if i + 2 == dims.len() { Activation::Identity } else { act };
                layers.push((l, a));
            }
            Ok(Mlp { layers })
        })
    }

    pub fn ffn(&mut self, name: &str, c: usize, hidden: usize) -> Result<Ffn> {
        self.scoped(name, |b| {
            Ok(Ffn { norm: b.layer_norm("norm", c)?, mlp: b.mlp("mlp", &[c, hidden, c], Activation::Relu)? })
        })
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn forward(&self, cx: &mut Cx, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.w), cx.p(self.b));
        let z = cx.g.matmul(x, w)?;
        cx.g.add_bias(z, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, cx: &mut Cx, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gain), cx.p(self.bias));
        cx.g.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<(Linear, Activation)>,
}

impl Mlp {
    pub fn forward(&self, cx: &mut Cx, x: Var) -> Result<Var> {
        let bound: Vec<_> = self.layers.iter().map(|(l, a)| (cx.p(l.w), cx.p(l.b), *a)).collect();
        mlp_forward(&mut cx.g, x, &bound)
    }

    pub fn last(&self) -> &Linear {
        &self.layers.last().expect("empty mlp").0
    }

    pub fn d_out(&self) -> usize {
        self.last().d_out
    }
}

/// Pre-norm feed-forward sub-block with residual: `x + mlp(norm(x))`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl Ffn {
    pub fn forward(&self, cx: &mut Cx, x: Var) -> Result<Var> {
        let z = self.norm.forward(cx, x)?;
        let y = self.mlp.forward(cx, z)?;
        cx.g.add(x, y)
    }
}
