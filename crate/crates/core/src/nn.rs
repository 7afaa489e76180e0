//! Parameter storage and the layer building blocks shared by every stage
//! of the network.
//!
//! Layers only hold [`ParamId`]s; their values live in a [`ParamStore`]
//! and are bound into a [`Graph`] once per forward pass via [`Bound`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named model parameters in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// All parameter values concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars());
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

/// Parameters of a [`ParamStore`] bound as graph leaves.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn new(g: &mut Graph, store: &ParamStore) -> Self {
        let vars = store.params.iter().map(|p| g.input(p.value.clone())).collect();
        Bound { vars }
    }

    /// Binds parameters as constants; used for inference.
    pub fn frozen(g: &mut Graph, store: &ParamStore) -> Self {
        let vars = store.params.iter().map(|p| g.constant(p.value.clone())).collect();
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Deterministic parameter initialization. Values are rounded to `f32`
/// so that checkpoints (stored as `f32`) reload bit-identically.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl Init<'_> {
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| round_f32(rng.gen_range(-bound..=bound)));
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape.to_vec(), round_f32(value)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

/// `y = x·W + b` on row vectors; `W` is stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Linear {
            weight: init.uniform(&format!("{name}.weight"), &[in_dim, out_dim], bound),
            bias: init.constant(&format!("{name}.bias"), &[out_dim], 0.0),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.weight));
        g.add_row(y, p.var(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = cin * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt() * 0.5;
        Conv2d {
            weight: init.uniform(&format!("{name}.weight"), &[cout, cin, kernel, kernel], bound),
            bias: init.constant(&format!("{name}.bias"), &[cout], 0.0),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.conv2d(x, p.var(self.weight), self.stride, self.pad);
        g.add_col(y, p.var(self.bias))
    }
}

/// Layer normalization over the channel axis of `[R, C]` rows.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: init.constant(&format!("{name}.gain"), &[dim], 1.0),
            bias: init.constant(&format!("{name}.bias"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let n = g.layer_norm_rows(x, Self::EPS);
        let y = g.mul_row(n, p.var(self.gain));
        g.add_row(y, p.var(self.bias))
    }
}

/// Group normalization of a `[C, H, W]` map; statistics are per sample,
/// so there is no cross-batch state.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub gain: ParamId,
    pub bias: ParamId,
}

impl GroupNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        let groups = [8, 4, 2, 1]
            .into_iter()
            .find(|g| channels.is_multiple_of(*g))
            .unwrap_or(1);
        GroupNorm {
            groups,
            gain: init.constant(&format!("{name}.gain"), &[channels], 1.0),
            bias: init.constant(&format!("{name}.bias"), &[channels], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let per_group = g.value(x).len() / self.groups;
        let grouped = g.reshape(x, [self.groups, per_group]);
        let n = g.layer_norm_rows(grouped, LayerNorm::EPS);
        let n = g.reshape(n, shape);
        let y = g.mul_col(n, p.var(self.gain));
        g.add_col(y, p.var(self.bias))
    }
}

/// Stack of linear layers with an activation between consecutive layers
/// (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, dims: &[usize], activation: Activation) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(init, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers, activation }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, mut x: Var) -> Var {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, p, x);
            if i + 1 < self.layers.len() {
                x = self.activation.apply(g, x);
            }
        }
        x
    }
}

/// Multi-head attention with input and output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        MultiHeadAttention {
            q: Linear::new(init, &format!("{name}.q"), dim, dim),
            k: Linear::new(init, &format!("{name}.k"), dim, dim),
            v: Linear::new(init, &format!("{name}.v"), dim, dim),
            out: Linear::new(init, &format!("{name}.out"), dim, dim),
            heads,
        }
    }

    /// Returns the projected output and the raw attention node (whose saved
    /// weights can be read back with [`Graph::attention_probs`]).
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        query: Var,
        key: Var,
        value: Var,
        mask: Option<&[bool]>,
    ) -> (Var, Var) {
        let q = self.q.forward(g, p, query);
        let k = self.k.forward(g, p, key);
        let v = self.v.forward(g, p, value);
        let attn = g.attention(q, k, v, self.heads, mask);
        (self.out.forward(g, p, attn), attn)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub mlp: Mlp,
}

impl FeedForward {
    pub fn new(init: &mut Init, name: &str, dim: usize, hidden: usize, activation: Activation) -> Self {
        FeedForward {
            mlp: Mlp::new(init, name, &[dim, hidden, dim], activation),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        self.mlp.forward(g, p, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_deterministic_and_f32_exact() {
        let build = || {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut init = Init {
                store: &mut store,
                rng: &mut rng,
            };
            Linear::new(&mut init, "fc", 5, 3);
            store
        };
        let a = build();
        assert_eq!(a, build());
        assert!(a.flatten().iter().all(|&v| v == v as f32 as f64));
        assert_eq!(a.find("fc.bias").map(ParamId::index), Some(1));
    }

    #[test]
    fn group_norm_of_zeros_is_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gn = GroupNorm::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            "gn",
            8,
        );
        let mut g = Graph::new();
        let p = Bound::frozen(&mut g, &store);
        let x = g.constant(Tensor::zeros([8, 2, 2]));
        let y = gn.forward(&mut g, &p, x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
