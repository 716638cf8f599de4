//! Parameter storage and the handful of layers shared by encoder and decoder.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Real, Var};

/// Named, ordered collection of trainable 2-D tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Array2<T>) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.values.push(value);
        let id = self.values.len() - 1;
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Array2<T> {
        &self.values[self.id(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<T> {
        let id = self.id(name);
        &mut self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<T>] {
        &mut self.values
    }

    pub fn view(&self, id: usize) -> ArrayView2<'_, T> {
        self.values[id].view()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Array2<T>> {
        self.values.iter().map(|v| Array2::zeros(v.dim())).collect()
    }

    /// Rebuilds the name lookup after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            out.insert(n, v.mapv(|x| U::of(x.f64())));
        }
        out
    }

    /// Borrows a parameter into the graph by name.
    pub fn var<'a>(&'a self, g: &mut Graph<'a, T>, name: &str) -> Var {
        let id = self.id(name);
        g.param(id, self.values[id].view())
    }
}

pub(crate) fn xavier<T: Real, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| T::of(rng.gen_range(-bound..bound)))
}

pub(crate) fn add_linear<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) {
    store.insert(&format!("{name}.w"), xavier(rng, fan_in, fan_out));
    store.insert(&format!("{name}.b"), Array2::zeros((1, fan_out)));
}

pub(crate) fn add_layer_norm<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) {
    store.insert(&format!("{name}.g"), Array2::ones((1, width)));
    store.insert(&format!("{name}.b"), Array2::zeros((1, width)));
}

pub(crate) fn add_attention<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, d: usize) {
    for part in ["q", "k", "v", "o"] {
        add_linear(store, rng, &format!("{name}.{part}"), d, d);
    }
}

pub(crate) fn add_ffn<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, d: usize, hidden: usize) {
    add_linear(store, rng, &format!("{name}.fc1"), d, hidden);
    add_linear(store, rng, &format!("{name}.fc2"), hidden, d);
}

pub(crate) fn linear<'a, T: Real>(g: &mut Graph<'a, T>, p: &'a ParamStore<T>, name: &str, x: Var) -> Var {
    let w = p.var(g, &format!("{name}.w"));
    let b = p.var(g, &format!("{name}.b"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

pub(crate) fn layer_norm<'a, T: Real>(g: &mut Graph<'a, T>, p: &'a ParamStore<T>, name: &str, x: Var) -> Var {
    let gain = p.var(g, &format!("{name}.g"));
    let bias = p.var(g, &format!("{name}.b"));
    g.layer_norm(x, gain, bias)
}

pub(crate) fn ffn<'a, T: Real>(g: &mut Graph<'a, T>, p: &'a ParamStore<T>, name: &str, x: Var) -> Var {
    let h = linear(g, p, &format!("{name}.fc1"), x);
    let h = g.relu(h);
    linear(g, p, &format!("{name}.fc2"), h)
}

/// Multi-head self-attention over the rows of `x`. `mask`, when given, is an
/// additive `[n × n]` constant: 0 where attention is allowed and a large
/// negative value where it is blocked.
pub(crate) fn self_attention<'a, T: Real>(
    g: &mut Graph<'a, T>,
    p: &'a ParamStore<T>,
    name: &str,
    x: Var,
    heads: usize,
    mask: Option<Var>,
) -> Var {
    let d = g.shape(x).1;
    let dh = d / heads;
    let q = linear(g, p, &format!("{name}.q"), x);
    let k = linear(g, p, &format!("{name}.k"), x);
    let v = linear(g, p, &format!("{name}.v"), x);
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let logits = g.matmul_nt(qh, kh);
        let mut logits = g.scale(logits, scale);
        if let Some(m) = mask {
            logits = g.add(logits, m);
        }
        let attn = g.softmax(logits);
        outs.push(g.matmul(attn, vh));
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    linear(g, p, &format!("{name}.o"), cat)
}

/// `[n × d]` sinusoid table: row `p` holds `sin(p / 10000^(2i/d))` at column
/// `2i` and the matching cosine at `2i + 1`.
pub(crate) fn sinusoid_table(n: usize, d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, d));
    for p in 0..n {
        for i in 0..d / 2 {
            let freq = 10000f64.powf(2.0 * i as f64 / d as f64);
            let a = p as f64 / freq;
            out[[p, 2 * i]] = a.sin();
            out[[p, 2 * i + 1]] = a.cos();
        }
    }
    out
}
