//! Joint video/query encoder producing the memory sequence.

use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Real, Var};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{self, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_width: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 256,
            n_heads: 8,
            n_layers: 8,
            ffn_width: 1024,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::InvalidArgument("d_model must be even for sinusoidal positions".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Encoder output: video rows first, then query rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Memory<T> {
    pub values: Array2<T>,
    pub video_length: usize,
}

impl<T: Real> Memory<T> {
    pub fn video(&self) -> ndarray::ArrayView2<'_, T> {
        self.values.slice(s![..self.video_length, ..])
    }
}

/// Sinusoidal position table `[n × d]`; `d` must be even.
pub fn sinusoidal_positions(n: usize, d: usize) -> Result<Array2<f64>> {
    if !d.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("position width must be even, got {d}")));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one position".into()));
    }
    Ok(nn::sinusoid_table(n, d))
}

pub(crate) fn init_params<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &EncoderConfig, c_v: usize, c_l: usize) {
    let d = cfg.d_model;
    nn::add_linear(store, rng, "enc.proj_v", c_v, d);
    if c_l > 0 {
        nn::add_linear(store, rng, "enc.proj_l", c_l, d);
    }
    for l in 0..cfg.n_layers {
        nn::add_layer_norm(store, &format!("enc.{l}.ln1"), d);
        nn::add_attention(store, rng, &format!("enc.{l}.attn"), d);
        nn::add_layer_norm(store, &format!("enc.{l}.ln2"), d);
        nn::add_ffn(store, rng, &format!("enc.{l}.ffn"), d, cfg.ffn_width);
    }
}

pub(crate) fn check_widths<T: Real>(params: &ParamStore<T>, sample: &Sample) -> Result<()> {
    let want_v = params.get("enc.proj_v.w").nrows();
    if sample.c_v() != want_v {
        return Err(Error::shape("features", format!("width {want_v}"), format!("width {}", sample.c_v())));
    }
    if let Some(q) = &sample.query_tokens {
        if q.nrows() > 0 {
            let names = params.names();
            if !names.iter().any(|n| n == "enc.proj_l.w") {
                return Err(Error::shape("query_tokens", "no query tokens", format!("{} tokens", q.nrows())));
            }
            let want_l = params.get("enc.proj_l.w").nrows();
            if q.ncols() != want_l {
                return Err(Error::shape("query_tokens", format!("width {want_l}"), format!("width {}", q.ncols())));
            }
        }
    }
    Ok(())
}

fn dropout<'a, T: Real>(g: &mut Graph<'a, T>, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = T::of(1.0 / (1.0 - p));
            let (r, c) = g.shape(x);
            let mask = Array2::from_shape_fn((r, c), |_| if rng.gen::<f64>() < p { T::zero() } else { keep });
            let m = g.constant(mask);
            g.mul(x, m)
        }
        _ => x,
    }
}

/// Builds the encoder on `g` and returns the memory node `[(n_v + n_l) × d]`.
/// Dropout is active only when `rng` is given.
pub(crate) fn encode_graph<'a, T: Real>(
    g: &mut Graph<'a, T>,
    params: &'a ParamStore<T>,
    cfg: &EncoderConfig,
    sample: &Sample,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    check_widths(params, sample)?;
    let n_v = sample.n_v();
    let feats = g.constant(sample.features.mapv(T::of));
    let v = nn::linear(g, params, "enc.proj_v", feats);
    let pos = g.constant(nn::sinusoid_table(n_v, cfg.d_model).mapv(T::of));
    let v = g.add(v, pos);
    let mut x = match &sample.query_tokens {
        Some(q) if q.nrows() > 0 => {
            let qc = g.constant(q.mapv(T::of));
            let l = nn::linear(g, params, "enc.proj_l", qc);
            g.concat_rows(&[v, l])
        }
        _ => v,
    };
    for l in 0..cfg.n_layers {
        let h = nn::layer_norm(g, params, &format!("enc.{l}.ln1"), x);
        let h = nn::self_attention(g, params, &format!("enc.{l}.attn"), h, cfg.n_heads, None);
        let h = dropout(g, h, cfg.dropout, rng.as_deref_mut());
        x = g.add(x, h);
        let h = nn::layer_norm(g, params, &format!("enc.{l}.ln2"), x);
        let h = nn::ffn(g, params, &format!("enc.{l}.ffn"), h);
        let h = dropout(g, h, cfg.dropout, rng.as_deref_mut());
        x = g.add(x, h);
    }
    Ok(x)
}

/// Inference-mode encoding of one sample.
pub fn encode<T: Real>(sample: &Sample, params: &ParamStore<T>, cfg: &EncoderConfig) -> Result<Memory<T>> {
    let mut g = Graph::new();
    let m = encode_graph(&mut g, params, cfg, sample, None)?;
    let values = g.value(m).to_owned();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { term: "memory".into() });
    }
    Ok(Memory {
        values,
        video_length: sample.n_v(),
    })
}
