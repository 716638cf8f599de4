//! Full localization model: encoder, saliency head, learned query bank and
//! the refinement decoder, plus proposal assembly for training and inference.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self, Graph, Real, Var};
use crate::data::{Prediction, Sample, Window};
use crate::decoder::{self, DecodeInputs, DecoderConfig, LayerOutput, LayerVars};
use crate::denoise::{DiffusionSchedule, Group, NoisyProposals};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::loss::ClassMode;
use crate::metrics::sort_windows;
use crate::nn::{self, ParamStore};
use crate::span::{clamp_and_order, Span};

/// Architecture hyper-parameters plus the input widths the model was built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub c_v: usize,
    pub c_l: usize,
    pub mode: ClassMode,
    /// Diffusion steps `T`; 0 disables the time embedding.
    pub diffusion_steps: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate(self.encoder.d_model)?;
        if self.c_v == 0 {
            return Err(Error::InvalidArgument("c_v must be positive".into()));
        }
        if let ClassMode::Detection { classes: 0 } = self.mode {
            return Err(Error::InvalidArgument("detection mode needs at least one class".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// How the decoder's proposal set is assembled for one forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProposalPlan<'p> {
    /// Replaces the learned span bank (random-span inference).
    pub initial_spans: Option<&'p [Span]>,
    /// Denoise group appended after the learned proposals.
    pub denoise: Option<&'p NoisyProposals>,
    /// Holds stop-gradient span inputs at given values (gradient checks).
    #[doc(hidden)]
    pub frozen_spans: Option<&'p [Array2<f64>]>,
}

/// Outputs of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<T> {
    pub layers: Vec<LayerOutput<T>>,
    pub saliency: Vec<f64>,
    pub groups: Vec<Group>,
}

pub(crate) struct GraphOutput {
    pub layers: Vec<LayerVars>,
    pub saliency: Var,
    pub groups: Vec<Group>,
}

/// Sinusoidal embedding of a diffusion timestep.
pub(crate) fn time_embedding(t: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = (j / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * i / d as f64);
            let a = t as f64 * freq;
            if j % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.encoder.d_model;
        encoder::init_params(&mut params, &mut rng, &config.encoder, config.c_v, config.c_l);
        nn::add_linear(&mut params, &mut rng, "sal", d, 1);
        decoder::init_params(
            &mut params,
            &mut rng,
            &config.decoder,
            d,
            config.mode.num_logits(),
            config.diffusion_steps > 0,
        );
        Ok(Model { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn schedule(&self) -> Result<Option<DiffusionSchedule>> {
        match self.config.diffusion_steps {
            0 => Ok(None),
            t => DiffusionSchedule::ddpm(t).map(Some),
        }
    }

    /// Learned span bank after clamping.
    pub fn query_spans(&self) -> Vec<Span> {
        decoder::array_to_spans(self.params.get("dec.query_spans").view())
    }

    pub(crate) fn forward_graph<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        sample: &Sample,
        plan: ProposalPlan<'_>,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<GraphOutput> {
        let cfg = &self.config;
        let nq = cfg.decoder.n_queries;
        let d = cfg.encoder.d_model;
        if let Some(s) = plan.initial_spans {
            if s.len() != nq {
                return Err(Error::shape("initial spans", nq, s.len()));
            }
        }
        let memory = encoder::encode_graph(g, &self.params, &cfg.encoder, sample, dropout)?;
        let n_v = sample.n_v();
        let video = g.slice_rows(memory, 0, n_v);
        let saliency = nn::linear(g, &self.params, "sal", video);

        let learned_spans = match plan.initial_spans {
            Some(s) => g.constant(decoder::spans_to_array(s)),
            None => {
                let bank = self.params.var(g, "dec.query_spans");
                g.clamp_order(bank)
            }
        };
        let learned_emb = self.params.var(g, "dec.query_embed");
        let mut groups = vec![Group::Learned; nq];
        let (spans, embeddings, mask) = match plan.denoise {
            Some(dn) => {
                let n = dn.spans.len();
                let ds = g.constant(decoder::spans_to_array(&dn.spans));
                let ones = g.constant(Array2::ones((n, 1)));
                let shared = self.params.var(g, "dec.denoise_embed");
                let de = g.matmul(ones, shared);
                groups.extend(dn.groups.iter().copied());
                let mask = g.constant(decoder::attention_mask(&groups).mapv(T::of));
                (g.concat_rows(&[learned_spans, ds]), g.concat_rows(&[learned_emb, de]), Some(mask))
            }
            None => (learned_spans, learned_emb, None),
        };

        // learned proposals always see the single inference step
        let time_rows = if cfg.diffusion_steps > 0 {
            let t_dn = plan.denoise.map_or(1, |dn| dn.timestep.max(1));
            let e1 = time_embedding(1, d);
            let et = time_embedding(t_dn, d);
            Some(Array2::from_shape_fn((groups.len(), d), |(i, j)| {
                if groups[i].is_denoise() {
                    et[j]
                } else {
                    e1[j]
                }
            }))
        } else {
            None
        };
        let layers = decoder::decode_graph(
            g,
            &self.params,
            &cfg.decoder,
            DecodeInputs {
                spans,
                embeddings,
                memory,
                video_length: n_v,
                mask,
                time_rows: time_rows.as_ref(),
                frozen: plan.frozen_spans,
            },
        );
        Ok(GraphOutput {
            layers,
            saliency,
            groups,
        })
    }

    /// Forward pass without dropout.
    pub fn forward(&self, sample: &Sample, plan: ProposalPlan<'_>) -> Result<ModelOutput<T>> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, sample, plan, None)?;
        let layers = out
            .layers
            .iter()
            .map(|lv| LayerOutput {
                spans: decoder::array_to_spans(g.value(lv.spans)),
                embeddings: g.value(lv.embeddings).to_owned(),
                class_logits: g.value(lv.logits).to_owned(),
            })
            .collect::<Vec<_>>();
        let saliency: Vec<f64> = g.value(out.saliency).iter().map(|v| v.f64()).collect();
        if saliency.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { term: "saliency".into() });
        }
        Ok(ModelOutput {
            layers,
            saliency,
            groups: out.groups,
        })
    }

    /// Ranked windows from the final layer's learned proposals.
    pub fn predict(&self, sample: &Sample, initial_spans: Option<&[Span]>) -> Result<Prediction> {
        let out = self.forward(
            sample,
            ProposalPlan {
                initial_spans,
                ..ProposalPlan::default()
            },
        )?;
        let last = out.layers.last().expect("at least one layer");
        let scores = foreground_scores(&last.class_logits, self.config.mode);
        let mut windows: Vec<Window> = last
            .spans
            .iter()
            .zip(scores)
            .map(|(&span, score)| Window { span, score })
            .collect();
        if windows.iter().any(|w| !w.score.is_finite()) {
            return Err(Error::Numeric { term: "class scores".into() });
        }
        sort_windows(&mut windows);
        Ok(Prediction {
            id: sample.id.clone(),
            windows,
            saliency_scores: Some(out.saliency),
        })
    }
}

/// Foreground confidence per proposal: softmax mass on the foreground column,
/// or the best class sigmoid in detection mode.
pub fn foreground_scores<T: Real>(logits: &Array2<T>, mode: ClassMode) -> Vec<f64> {
    match mode {
        ClassMode::Grounding => {
            let p = autograd::softmax_rows(logits.view());
            p.column(0).iter().map(|v| v.f64()).collect()
        }
        ClassMode::Detection { classes } => logits
            .rows()
            .into_iter()
            .map(|r| {
                (0..classes)
                    .map(|c| autograd::sigmoid(r[c].f64()))
                    .fold(0.0, f64::max)
            })
            .collect(),
    }
}

/// `n` ordered spans with both ends uniform in `[0, 1]`.
pub fn random_spans<R: Rng>(n: usize, rng: &mut R) -> Vec<Span> {
    (0..n)
        .map(|_| clamp_and_order(rng.gen(), rng.gen()).expect("finite"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetConfig};
    use crate::denoise::{make_noisy_proposals, NoiseConfig};

    pub(crate) fn tiny_config(self_attn: bool, dynamic_conv: bool, diffusion_steps: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d_model: 8,
                n_heads: 2,
                n_layers: 1,
                ffn_width: 16,
                dropout: 0.0,
            },
            decoder: DecoderConfig {
                n_layers: 2,
                n_queries: 4,
                n_heads: 2,
                ffn_width: 16,
                bins: 4,
                d_hidden: 0,
                self_attn,
                dynamic_conv,
            },
            c_v: 5,
            c_l: 3,
            mode: ClassMode::Grounding,
            diffusion_steps,
        }
    }

    fn sample() -> Sample {
        generate_dataset(&DatasetConfig {
            num_samples: 1,
            n_v: 12,
            c_v: 5,
            c_l: 3,
            n_l: 3,
            num_patterns: 2,
            spans_per_sample: [1, 2],
            snr: 3.0,
            seed: 4,
            tal_mode: false,
            pattern_seed: 0,
        })
        .unwrap()
        .remove(0)
    }

    #[test]
    fn prediction_contract() {
        let m = Model::<f64>::new(tiny_config(true, true, 0), 1).unwrap();
        let s = sample();
        let p = m.predict(&s, None).unwrap();
        assert_eq!(p.windows.len(), 4);
        assert!(p.windows.windows(2).all(|w| w[0].score >= w[1].score));
        assert_eq!(p.saliency_scores.as_ref().unwrap().len(), 12);
        assert_eq!(m.predict(&s, None).unwrap(), p);
    }

    #[test]
    fn denoise_group_does_not_touch_learned_outputs() {
        for steps in [0, 3] {
            let m = Model::<f64>::new(tiny_config(true, true, steps), 2).unwrap();
            let s = sample();
            let sched = m.schedule().unwrap();
            let cfg = NoiseConfig {
                n_denoise: 4,
                diffusion_steps: steps,
                ..NoiseConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let a = make_noisy_proposals(&s.gt_spans, &cfg, sched.as_ref(), &mut rng).unwrap();
            let mut b = a.clone();
            for sp in &mut b.spans {
                *sp = clamp_and_order(sp.start() * 0.5, sp.end() * 0.9 + 0.05).unwrap();
            }
            b.timestep = if steps > 0 { 1 + (a.timestep % steps) } else { 0 };
            let plan = |dn| ProposalPlan {
                denoise: Some(dn),
                ..ProposalPlan::default()
            };
            let oa = m.forward(&s, plan(&a)).unwrap();
            let ob = m.forward(&s, plan(&b)).unwrap();
            let none = m.forward(&s, ProposalPlan::default()).unwrap();
            for ((la, lb), ln) in oa.layers.iter().zip(&ob.layers).zip(&none.layers) {
                assert_eq!(la.spans[..4], lb.spans[..4]);
                assert_eq!(la.class_logits.slice(ndarray::s![..4, ..]), lb.class_logits.slice(ndarray::s![..4, ..]));
                assert_eq!(la.spans[..4], ln.spans[..]);
            }
        }
    }

    #[test]
    fn random_spans_replace_the_bank() {
        let m = Model::<f64>::new(tiny_config(false, false, 0), 3).unwrap();
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let init = random_spans(4, &mut rng);
        assert!(m.predict(&s, Some(&init)).is_ok());
        assert!(m.predict(&s, Some(&init[..3])).is_err());
    }

    #[test]
    fn ties_sort_by_start() {
        let mut w = vec![
            Window {
                span: Span::new(0.5, 0.6).unwrap(),
                score: 0.4,
            },
            Window {
                span: Span::new(0.1, 0.2).unwrap(),
                score: 0.4,
            },
            Window {
                span: Span::new(0.7, 0.8).unwrap(),
                score: 0.9,
            },
        ];
        sort_windows(&mut w);
        let starts: Vec<f64> = w.iter().map(|w| w.span.start()).collect();
        assert_eq!(starts, vec![0.7, 0.1, 0.5]);
    }
}
