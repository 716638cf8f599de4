//! Proposal-refinement decoder.
//!
//! Each layer runs masked self-attention over proposal embeddings, samples
//! per-proposal features from the video memory with temporal RoI alignment,
//! mixes them into the embedding with a dynamic convolution (kernels
//! generated from the embedding itself), then predicts class logits and
//! additive start/end offsets. Refined spans are clamped, detached and fed to
//! the next layer; every layer's output is kept for deep supervision.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Real, Var};
use crate::denoise::Group;
use crate::encoder::Memory;
use crate::error::{Error, Result};
use crate::nn::{self, ParamStore};
use crate::span::{clamp_and_order, Span};

/// Additive attention bias for blocked pairs.
pub const BLOCKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub n_queries: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    /// RoI sampling points per proposal.
    pub bins: usize,
    /// Dynamic-conv hidden width; 0 means `d_model / 4`.
    pub d_hidden: usize,
    pub self_attn: bool,
    pub dynamic_conv: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            n_layers: 8,
            n_queries: 30,
            n_heads: 8,
            ffn_width: 1024,
            bins: 16,
            d_hidden: 0,
            self_attn: true,
            dynamic_conv: true,
        }
    }
}

impl DecoderConfig {
    pub fn hidden(&self, d_model: usize) -> usize {
        if self.d_hidden == 0 {
            (d_model / 4).max(1)
        } else {
            self.d_hidden
        }
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.n_layers == 0 || self.n_queries == 0 {
            return Err(Error::InvalidArgument("decoder needs at least one layer and one query".into()));
        }
        if self.bins == 0 {
            return Err(Error::InvalidArgument("bins must be >= 1".into()));
        }
        if self.n_heads == 0 || !d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "decoder heads {} do not divide d_model {d_model}",
                self.n_heads
            )));
        }
        Ok(())
    }
}

/// Proposals entering the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet<T> {
    pub spans: Vec<Span>,
    pub embeddings: Array2<T>,
    pub groups: Vec<Group>,
}

impl<T: Real> ProposalSet<T> {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.embeddings.nrows() != self.spans.len() || self.groups.len() != self.spans.len() {
            return Err(Error::shape(
                "proposal set",
                format!("{} rows everywhere", self.spans.len()),
                format!("{} embeddings, {} groups", self.embeddings.nrows(), self.groups.len()),
            ));
        }
        Ok(())
    }
}

/// One decoder layer's refined proposals.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutput<T> {
    pub spans: Vec<Span>,
    pub embeddings: Array2<T>,
    /// `[P × (k + 1)]`; the last column is background.
    pub class_logits: Array2<T>,
}

/// Interpolation weights `[bins × n_v]` sampling the snippet curve at bin
/// centres of `span`. Snippet `i` sits at `(i + 0.5) / n_v`; positions beyond
/// the first/last centre clamp to the end snippets.
pub fn roi_weights(span: &Span, n_v: usize, bins: usize) -> Array2<f64> {
    let mut w = Array2::zeros((bins, n_v));
    let width = span.width();
    for j in 0..bins {
        let x = span.start() + (j as f64 + 0.5) / bins as f64 * width;
        let u = (x * n_v as f64 - 0.5).clamp(0.0, (n_v - 1) as f64);
        let i0 = u.floor() as usize;
        let frac = u - i0 as f64;
        let i1 = (i0 + 1).min(n_v - 1);
        w[[j, i0]] += 1.0 - frac;
        w[[j, i1]] += frac;
    }
    w
}

/// Samples `bins` feature rows along `span` from the video part of `memory`.
pub fn temporal_roi_align<T: Real>(memory: &Memory<T>, span: &Span, bins: usize) -> Result<Array2<T>> {
    if bins < 1 {
        return Err(Error::InvalidArgument("bins must be >= 1".into()));
    }
    let w = roi_weights(span, memory.video_length, bins).mapv(T::of);
    Ok(w.dot(&memory.video()))
}

/// Additive attention mask keeping learned and denoise proposals apart.
pub fn attention_mask(groups: &[Group]) -> Array2<f64> {
    let n = groups.len();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if groups[i].is_denoise() != groups[j].is_denoise() {
            BLOCKED
        } else {
            0.0
        }
    })
}

/// Contiguous row blocks that see each other and nothing else under `mask`,
/// or `None` when the mask has any other structure.
fn attention_blocks(mask: &Array2<f64>) -> Option<Vec<std::ops::Range<usize>>> {
    let n = mask.nrows();
    if n == 0 {
        return None;
    }
    let blocked = |v: f64| v <= BLOCKED / 2.0;
    let mut blocks = Vec::new();
    let mut start = 0;
    for i in 1..n {
        if blocked(mask[[i, start]]) {
            blocks.push(start..i);
            start = i;
        }
    }
    blocks.push(start..n);
    let block_of = |i: usize| blocks.iter().position(|b| b.contains(&i)).expect("covered");
    for ((i, j), &v) in mask.indexed_iter() {
        let same = block_of(i) == block_of(j);
        if (same && v != 0.0) || (!same && !blocked(v)) {
            return None;
        }
    }
    Some(blocks)
}

pub(crate) fn init_params<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    cfg: &DecoderConfig,
    d: usize,
    num_logits: usize,
    diffusion: bool,
) {
    let dh = cfg.hidden(d);
    // learned query bank: spans spread over the timeline with mixed widths,
    // kept off the clamp boundaries
    let mut spans = Array2::zeros((cfg.n_queries, 2));
    for q in 0..cfg.n_queries {
        let w: f64 = rng.gen_range(0.05..0.5);
        let c: f64 = rng.gen_range(w / 2.0 + 0.01..1.0 - w / 2.0 - 0.01);
        spans[[q, 0]] = T::of(c - w / 2.0);
        spans[[q, 1]] = T::of(c + w / 2.0);
    }
    store.insert("dec.query_spans", spans);
    store.insert(
        "dec.query_embed",
        Array2::from_shape_fn((cfg.n_queries, d), |_| T::of(rng.gen_range(-1.0..1.0))),
    );
    store.insert(
        "dec.denoise_embed",
        Array2::from_shape_fn((1, d), |_| T::of(rng.gen_range(-1.0..1.0))),
    );
    if diffusion {
        nn::add_linear(store, rng, "dec.time_mlp", d, d);
    }
    for l in 0..cfg.n_layers {
        let p = format!("dec.{l}");
        if cfg.self_attn {
            nn::add_attention(store, rng, &format!("{p}.attn"), d);
            nn::add_layer_norm(store, &format!("{p}.ln_attn"), d);
        }
        if cfg.dynamic_conv {
            nn::add_linear(store, rng, &format!("{p}.dyn.gen"), d, 2 * d * dh);
            // generated kernels act like weights: keep their scale near xavier
            let gen = store.get_mut(&format!("{p}.dyn.gen.w"));
            let k = T::of((1.0 / d as f64).sqrt());
            gen.mapv_inplace(|v| v * k);
            nn::add_layer_norm(store, &format!("{p}.dyn.ln1"), dh);
            nn::add_layer_norm(store, &format!("{p}.dyn.ln2"), d);
            nn::add_linear(store, rng, &format!("{p}.dyn.out"), cfg.bins * d, d);
        }
        if diffusion {
            nn::add_linear(store, rng, &format!("{p}.time"), d, 2 * d);
            store.get_mut(&format!("{p}.time.w")).mapv_inplace(|v| v * T::of(0.1));
        }
        nn::add_layer_norm(store, &format!("{p}.ln_dyn"), d);
        nn::add_ffn(store, rng, &format!("{p}.ffn"), d, cfg.ffn_width);
        nn::add_layer_norm(store, &format!("{p}.ln_ffn"), d);
        nn::add_linear(store, rng, &format!("{p}.cls"), d, num_logits);
        nn::add_linear(store, rng, &format!("{p}.reg"), d, 2);
        store.get_mut(&format!("{p}.reg.w")).mapv_inplace(|v| v * T::of(0.1));
    }
}

/// Dynamic convolution for a stack of `P` proposals: `emb` is `[P × d]`,
/// `roi` is `[P·bins × d]`; returns `[P × d]`.
pub(crate) fn dynamic_conv_graph<'a, T: Real>(
    g: &mut Graph<'a, T>,
    params: &'a ParamStore<T>,
    prefix: &str,
    emb: Var,
    roi: Var,
    bins: usize,
    d_hidden: usize,
) -> Var {
    let (p, d) = g.shape(emb);
    let dh = d_hidden;
    let gen = nn::linear(g, params, &format!("{prefix}.gen"), emb);
    let k1 = g.slice_cols(gen, 0, d * dh);
    let k1 = g.reshape(k1, p * d, dh);
    let k2 = g.slice_cols(gen, d * dh, dh * d);
    let k2 = g.reshape(k2, p * dh, d);
    let h = g.batch_matmul(roi, k1, p);
    let h = nn::layer_norm(g, params, &format!("{prefix}.ln1"), h);
    let h = g.relu(h);
    let h = g.batch_matmul(h, k2, p);
    let h = nn::layer_norm(g, params, &format!("{prefix}.ln2"), h);
    let h = g.relu(h);
    let flat = g.reshape(h, p, bins * d);
    nn::linear(g, params, &format!("{prefix}.out"), flat)
}

/// Dynamic convolution of a single proposal embedding against its RoI features.
pub fn dynamic_conv<T: Real>(
    params: &ParamStore<T>,
    cfg: &DecoderConfig,
    layer: usize,
    embedding: ArrayView1<'_, T>,
    roi: ArrayView2<'_, T>,
) -> Result<Array1<T>> {
    let d = embedding.len();
    if roi.dim() != (cfg.bins, d) {
        return Err(Error::shape("roi", format!("[{} × {d}]", cfg.bins), format!("{:?}", roi.dim())));
    }
    let gen_w = params.get(&format!("dec.{layer}.dyn.gen.w"));
    if gen_w.nrows() != d {
        return Err(Error::shape("embedding", format!("width {}", gen_w.nrows()), format!("width {d}")));
    }
    let mut g = Graph::new();
    let e = g.constant(embedding.to_owned().insert_axis(ndarray::Axis(0)));
    let r = g.constant(roi.to_owned());
    let out = dynamic_conv_graph(&mut g, params, &format!("dec.{layer}.dyn"), e, r, cfg.bins, cfg.hidden(d));
    Ok(g.value(out).row(0).to_owned())
}

/// Graph handles for one decoder layer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerVars {
    /// Spans this layer refined (its RoI positions).
    pub input: Var,
    pub spans: Var,
    pub logits: Var,
    pub embeddings: Var,
}

/// Inputs to [`decode_graph`] beyond the parameters.
pub(crate) struct DecodeInputs<'m> {
    pub spans: Var,
    pub embeddings: Var,
    pub memory: Var,
    pub video_length: usize,
    pub mask: Option<Var>,
    /// Per-proposal diffusion timestep rows `[P × d]` (sinusoid of t), if any.
    pub time_rows: Option<&'m Array2<f64>>,
    /// Replacement values for every stop-gradient span input (RoI positions
    /// and the spans handed from layer to layer), one `[P × 2]` per layer.
    pub frozen: Option<&'m [Array2<f64>]>,
}

pub(crate) fn decode_graph<'a, T: Real>(
    g: &mut Graph<'a, T>,
    params: &'a ParamStore<T>,
    cfg: &DecoderConfig,
    inp: DecodeInputs<'_>,
) -> Vec<LayerVars> {
    let (p, d) = g.shape(inp.embeddings);
    let dh = cfg.hidden(d);
    let mem_video = g.slice_rows(inp.memory, 0, inp.video_length);
    let time_feat = inp.time_rows.map(|rows| {
        let t = g.constant(rows.mapv(T::of));
        let h = nn::linear(g, params, "dec.time_mlp", t);
        g.relu(h)
    });

    let blocks = inp.mask.and_then(|m| attention_blocks(&g.value(m).mapv(|v| v.f64())));
    let mut spans = inp.spans;
    let mut emb = inp.embeddings;
    let mut out = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let pre = format!("dec.{l}");
        if cfg.self_attn {
            let name = format!("{pre}.attn");
            let h = match &blocks {
                // fully separated groups attend within their own rows only, so
                // reductions never see the other group's columns and learned
                // rows come out bit-identical to a run without denoise rows
                Some(b) if b.len() > 1 => {
                    let parts: Vec<Var> = b
                        .iter()
                        .map(|r| {
                            let x = g.slice_rows(emb, r.start, r.len());
                            nn::self_attention(g, params, &name, x, cfg.n_heads, None)
                        })
                        .collect();
                    g.concat_rows(&parts)
                }
                _ => nn::self_attention(g, params, &name, emb, cfg.n_heads, inp.mask),
            };
            let h = g.add(emb, h);
            emb = nn::layer_norm(g, params, &format!("{pre}.ln_attn"), h);
        }

        // RoI sampling positions never carry gradient
        let sv = match inp.frozen {
            Some(f) => f[l].mapv(T::of),
            None => g.value(spans).to_owned(),
        };
        let span_list: Vec<Span> = (0..p)
            .map(|i| clamp_and_order(sv[[i, 0]].f64(), sv[[i, 1]].f64()).expect("finite spans"))
            .collect();
        let mut f = if cfg.dynamic_conv {
            let mut w = Array2::zeros((p * cfg.bins, inp.video_length));
            for (i, sp) in span_list.iter().enumerate() {
                w.slice_mut(s![i * cfg.bins..(i + 1) * cfg.bins, ..])
                    .assign(&roi_weights(sp, inp.video_length, cfg.bins));
            }
            let w = g.constant(w.mapv(T::of));
            let roi = g.matmul(w, mem_video);
            dynamic_conv_graph(g, params, &format!("{pre}.dyn"), emb, roi, cfg.bins, dh)
        } else {
            let mut w = Array2::zeros((p, inp.video_length));
            for (i, sp) in span_list.iter().enumerate() {
                let rw = roi_weights(sp, inp.video_length, cfg.bins);
                w.row_mut(i).assign(&rw.mean_axis(ndarray::Axis(0)).unwrap());
            }
            let w = g.constant(w.mapv(T::of));
            let mean = g.matmul(w, mem_video);
            let sum = g.add(mean, emb);
            g.scale(sum, T::of(0.5))
        };
        if let Some(tf) = time_feat {
            let ss = nn::linear(g, params, &format!("{pre}.time"), tf);
            let scale = g.slice_cols(ss, 0, d);
            let shift = g.slice_cols(ss, d, d);
            let scaled = g.mul(f, scale);
            let f2 = g.add(f, scaled);
            f = g.add(f2, shift);
        }
        let h = g.add(emb, f);
        emb = nn::layer_norm(g, params, &format!("{pre}.ln_dyn"), h);
        let h = nn::ffn(g, params, &format!("{pre}.ffn"), emb);
        let h = g.add(emb, h);
        emb = nn::layer_norm(g, params, &format!("{pre}.ln_ffn"), h);

        let logits = nn::linear(g, params, &format!("{pre}.cls"), emb);
        let delta = nn::linear(g, params, &format!("{pre}.reg"), emb);
        let moved = g.add(spans, delta);
        let refined = g.clamp_order(moved);
        out.push(LayerVars {
            input: spans,
            spans: refined,
            logits,
            embeddings: emb,
        });
        spans = match inp.frozen {
            Some(f) if l + 1 < cfg.n_layers => g.constant(f[l + 1].mapv(T::of)),
            _ => g.detach(refined),
        };
    }
    out
}

pub(crate) fn spans_to_array<T: Real>(spans: &[Span]) -> Array2<T> {
    let mut a = Array2::zeros((spans.len(), 2));
    for (i, s) in spans.iter().enumerate() {
        a[[i, 0]] = T::of(s.start());
        a[[i, 1]] = T::of(s.end());
    }
    a
}

pub(crate) fn array_to_spans<T: Real>(a: ArrayView2<'_, T>) -> Vec<Span> {
    a.rows()
        .into_iter()
        .map(|r| clamp_and_order(r[0].f64(), r[1].f64()).expect("finite spans"))
        .collect()
}

/// Runs every decoder layer on a fixed proposal set and memory.
///
/// `mask` must be `[P × P]` and, whenever both learned and denoise proposals
/// are present, must block attention between the two groups.
pub fn decode<T: Real>(
    params: &ParamStore<T>,
    cfg: &DecoderConfig,
    proposals: &ProposalSet<T>,
    memory: &Memory<T>,
    mask: &Array2<f64>,
) -> Result<Vec<LayerOutput<T>>> {
    proposals.validate()?;
    let p = proposals.len();
    if mask.dim() != (p, p) {
        return Err(Error::shape("attention mask", format!("[{p} × {p}]"), format!("{:?}", mask.dim())));
    }
    for i in 0..p {
        for j in 0..p {
            let cross = proposals.groups[i].is_denoise() != proposals.groups[j].is_denoise();
            if cross && mask[[i, j]] > BLOCKED / 2.0 {
                return Err(Error::Contract(format!(
                    "mask lets proposal {i} ({:?}) attend to {j} ({:?})",
                    proposals.groups[i], proposals.groups[j]
                )));
            }
        }
    }
    if params.names().iter().any(|n| n == "dec.time_mlp.w") {
        return Err(Error::Contract("diffusion-conditioned decoder needs timesteps; use the model API".into()));
    }
    let mut g = Graph::new();
    let spans = g.constant(spans_to_array(&proposals.spans));
    let emb = g.constant(proposals.embeddings.clone());
    let mem = g.constant(memory.values.clone());
    let m = g.constant(mask.mapv(T::of));
    let layers = decode_graph(
        &mut g,
        params,
        cfg,
        DecodeInputs {
            spans,
            embeddings: emb,
            memory: mem,
            video_length: memory.video_length,
            mask: Some(m),
            time_rows: None,
            frozen: None,
        },
    );
    Ok(layers
        .iter()
        .map(|lv| LayerOutput {
            spans: array_to_spans(g.value(lv.spans)),
            embeddings: g.value(lv.embeddings).to_owned(),
            class_logits: g.value(lv.logits).to_owned(),
        })
        .collect())
}
