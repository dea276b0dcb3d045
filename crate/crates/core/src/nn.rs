//! Named parameters and the transformer building blocks.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::math;
use crate::rng::DetRng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Parameter name -> value, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Scalar count for tensors whose name starts with `prefix`.
    pub fn scalar_count_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, t)| t.len()).sum()
    }

    /// Puts every parameter on a fresh tape. Names for which `trainable`
    /// returns false become constants and never receive gradients.
    pub fn bind(&self, trainable: impl Fn(&str) -> bool) -> Session {
        let mut tape = Tape::new();
        let mut vars = BTreeMap::new();
        for (name, value) in &self.params {
            let v = if trainable(name) { tape.param(value.clone()) } else { tape.constant(value.clone()) };
            vars.insert(name.clone(), v);
        }
        Session { tape, vars, dropout: None }
    }

    /// All parameters tracked.
    pub fn bind_all(&self) -> Session {
        self.bind(|_| true)
    }

    /// All parameters as constants (inference).
    pub fn bind_frozen(&self) -> Session {
        self.bind(|_| false)
    }
}

/// A tape with parameters bound by name.
pub struct Session {
    pub tape: Tape,
    vars: BTreeMap<String, Var>,
    dropout: Option<(f64, DetRng)>,
}

impl Session {
    pub fn var(&self, name: &str) -> Result<Var, TensorError> {
        self.vars.get(name).copied().ok_or(TensorError::Invalid("missing parameter"))
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Enables dropout with probability `p` for this session.
    pub fn with_dropout(mut self, p: f64, rng: DetRng) -> Self {
        if p > 0.0 {
            self.dropout = Some((p, rng));
        }
        self
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var, TensorError> {
        match &mut self.dropout {
            Some((p, rng)) => self.tape.dropout(x, *p, rng),
            None => Ok(x),
        }
    }

    /// Gradient for each tracked parameter, by name.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(_, &v)| self.tape.requires_grad(v))
            .map(|(k, &v)| (k.clone(), grads.get_or_zeros(v)))
            .collect()
    }
}

/// Fan-average uniform initialization, limit `sqrt(6 / (fan_in + fan_out))`.
pub fn fan_avg_uniform(rng: &mut DetRng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = math::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_parts(alloc::vec![fan_in, fan_out], data)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: String,
    bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear { weight: format!("{prefix}.weight"), bias: format!("{prefix}.bias"), in_dim, out_dim }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut DetRng) {
        store.insert(self.weight.clone(), fan_avg_uniform(rng, self.in_dim, self.out_dim));
        store.insert(self.bias.clone(), Tensor::zeros(alloc::vec![self.out_dim]));
    }

    pub fn init_zero(&self, store: &mut ParamStore) {
        store.insert(self.weight.clone(), Tensor::zeros(alloc::vec![self.in_dim, self.out_dim]));
        store.insert(self.bias.clone(), Tensor::zeros(alloc::vec![self.out_dim]));
    }

    pub fn init_identity(&self, store: &mut ParamStore) {
        let mut w = Tensor::zeros(alloc::vec![self.in_dim, self.out_dim]);
        for i in 0..self.in_dim.min(self.out_dim) {
            w.data_mut()[i * self.out_dim + i] = 1.0;
        }
        store.insert(self.weight.clone(), w);
        store.insert(self.bias.clone(), Tensor::zeros(alloc::vec![self.out_dim]));
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, TensorError> {
        let w = s.var(&self.weight)?;
        let b = s.var(&self.bias)?;
        let y = s.tape.matmul(x, w)?;
        s.tape.add(y, b)
    }
}

/// Layer normalization over the last dim with learnable scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
    dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: &str, dim: usize) -> Self {
        LayerNorm { gamma: format!("{prefix}.gamma"), beta: format!("{prefix}.beta"), dim }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(self.gamma.clone(), Tensor::ones(alloc::vec![self.dim]));
        store.insert(self.beta.clone(), Tensor::zeros(alloc::vec![self.dim]));
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, TensorError> {
        let g = s.var(&self.gamma)?;
        let b = s.var(&self.beta)?;
        let n = s.tape.layer_norm(x)?;
        let y = s.tape.mul(n, g)?;
        s.tape.add(y, b)
    }
}

/// Standard multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, dim: usize, heads: usize) -> Self {
        MultiHeadAttention {
            q: Linear::new(&format!("{prefix}.q"), dim, dim),
            k: Linear::new(&format!("{prefix}.k"), dim, dim),
            v: Linear::new(&format!("{prefix}.v"), dim, dim),
            out: Linear::new(&format!("{prefix}.out"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut DetRng) {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.init(store, rng);
        }
    }

    /// Query/key projections zero (uniform attention), value and output
    /// projections identity.
    pub fn init_identity(&self, store: &mut ParamStore) {
        self.q.init_zero(store);
        self.k.init_zero(store);
        self.v.init_identity(store);
        self.out.init_identity(store);
    }

    /// `query: [Tq, d]`, `key`/`value: [Tk, d]` -> `[Tq, d]`.
    pub fn forward(&self, s: &mut Session, query: Var, key: Var, value: Var) -> Result<Var, TensorError> {
        let q = self.q.forward(s, query)?;
        let k = self.k.forward(s, key)?;
        let v = self.v.forward(s, value)?;
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / math::sqrt(head_dim as f64);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = s.tape.slice_cols(q, h * head_dim, head_dim)?;
            let kh = s.tape.slice_cols(k, h * head_dim, head_dim)?;
            let vh = s.tape.slice_cols(v, h * head_dim, head_dim)?;
            let kt = s.tape.transpose(kh)?;
            let scores = s.tape.matmul(qh, kt)?;
            let scores = s.tape.scale(scores, scale)?;
            let attn = s.tape.softmax(scores, 1)?;
            heads.push(s.tape.matmul(attn, vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { s.tape.concat_cols(&heads)? };
        self.out.forward(s, merged)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(prefix: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            up: Linear::new(&format!("{prefix}.up"), dim, hidden),
            down: Linear::new(&format!("{prefix}.down"), hidden, dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut DetRng) {
        self.up.init(store, rng);
        self.down.init(store, rng);
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, TensorError> {
        let h = self.up.forward(s, x)?;
        let h = s.tape.relu(h)?;
        let h = s.dropout(h)?;
        self.down.forward(s, h)
    }
}

/// Stack of linear layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(prefix: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{prefix}.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut DetRng) {
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("mlp has at least one layer")
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(s, h)?;
            if i + 1 < self.layers.len() {
                h = s.tape.relu(h)?;
            }
        }
        Ok(h)
    }
}
