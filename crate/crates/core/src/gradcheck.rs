//! Finite-difference verification of the analytic gradients.
//!
//! Every parameter tensor of a small double-precision model is probed at a
//! few random entries with central differences, as are the loss inputs
//! (spans, logits, saliency scores). The Hungarian assignment is frozen to the
//! one found at the unperturbed point.

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::RunConfig;
use crate::data::{generate_dataset, Sample};
use crate::decoder::LayerOutput;
use crate::denoise::{make_noisy_proposals, NoisyProposals};
use crate::error::{Error, Result};
use crate::loss::{build_loss, loss_with_grads_scaled, sample_saliency_pairs, saliency_labels_from_spans, LossInputs, SampleTargets};
use crate::matching::MatchAssignment;
use crate::model::{Model, ProposalPlan};
use crate::span::Span;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Absolute differences up to this always count as agreement.
    pub abs_floor: f64,
    pub entries_per_tensor: usize,
    pub seed: u64,
    #[doc(hidden)]
    pub giou_grad_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-3,
            abs_floor: 1e-8,
            entries_per_tensor: 6,
            seed: 0,
            giou_grad_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: String,
    pub max_rel_error: f64,
    pub entries: usize,
    /// Entries whose stencil straddled a kink and were re-probed with a
    /// smaller step.
    #[serde(default)]
    pub refined: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn failing(&self) -> Vec<String> {
        self.groups.iter().filter(|g| !g.passed).map(|g| g.group.clone()).collect()
    }

    /// `Ok` when every group is within tolerance.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::GradCheck { groups: self.failing() })
        }
    }
}

/// The configurations exercised by a full check, derived from `base`.
pub fn variants(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut out = Vec::new();
    for (sa, dc) in [(true, true), (true, false), (false, true), (false, false)] {
        let mut c = base.clone();
        c.decoder.self_attn = sa;
        c.decoder.dynamic_conv = dc;
        c.noise.diffusion_steps = 0;
        c.data.tal_mode = false;
        out.push((format!("self_attn={sa},dynamic_conv={dc}"), c));
    }
    let mut c = base.clone();
    c.noise.diffusion_steps = 4;
    out.push(("diffusion".into(), c));
    let mut c = base.clone();
    c.data.tal_mode = true;
    out.push(("detection".into(), c));
    out
}

/// Relative error with an absolute floor: differences within `abs_floor` count
/// as agreement whatever the gradient's size, so an entry passes iff
/// `|a - n| <= max(tolerance * max(|a|, |n|), abs_floor)`. Central differences
/// on a loss of order 10 carry roundoff near `1e-10` at the default step, which
/// would otherwise fail gradients of order `1e-7`.
fn error_of(a: f64, n: f64, o: &GradCheckOptions) -> f64 {
    let scale = a.abs().max(n.abs()).max(o.abs_floor / o.tolerance);
    (a - n).abs() / scale
}

/// Central difference of `f` at 0 against `analytic`. When the estimate fails
/// and the two one-sided slopes disagree (a ReLU or clamp kink lies inside the
/// stencil), the step is cut tenfold, at most twice. A genuine gradient error
/// survives every step. Returns the error and whether the step was cut.
fn probe(mut f: impl FnMut(f64) -> Result<f64>, analytic: f64, opts: &GradCheckOptions) -> Result<(f64, bool)> {
    let mut h = opts.step;
    let (mut up, mut dn) = (f(h)?, f(-h)?);
    let mut err = error_of(analytic, (up - dn) / (2.0 * h), opts);
    if err <= opts.tolerance {
        return Ok((err, false));
    }
    let f0 = f(0.0)?;
    let mut refined = false;
    for _ in 0..2 {
        let kinked = error_of((up - f0) / h, (f0 - dn) / h, opts) > opts.tolerance;
        if !kinked {
            break;
        }
        refined = true;
        h /= 10.0;
        (up, dn) = (f(h)?, f(-h)?);
        err = error_of(analytic, (up - dn) / (2.0 * h), opts);
        if err <= opts.tolerance {
            break;
        }
    }
    Ok((err, refined))
}

struct Fixture {
    sample: Sample,
    denoise: Option<NoisyProposals>,
    pairs: Vec<(usize, usize)>,
}

/// Loss of the fixture. The unperturbed call (`frozen` unset) also returns
/// the matching, the analytic parameter gradients and the value of every
/// stop-gradient span input, which perturbed calls then hold fixed so the
/// finite differences see the same function the tape differentiates.
fn loss_value(
    model: &Model<f64>,
    cfg: &RunConfig,
    fx: &Fixture,
    fixed: Option<&[MatchAssignment]>,
    frozen: Option<&[Array2<f64>]>,
    giou_scale: f64,
) -> Result<LossEval> {
    let mut g = Graph::new();
    g.set_giou_grad_scale(giou_scale);
    let out = model.forward_graph(
        &mut g,
        &fx.sample,
        ProposalPlan {
            denoise: fx.denoise.as_ref(),
            frozen_spans: frozen,
            ..ProposalPlan::default()
        },
        None,
    )?;
    let inputs = out.layers.iter().map(|l| g.value(l.input).to_owned()).collect();
    let targets = SampleTargets {
        gt: &fx.sample.gt_spans,
        labels: fx.sample.gt_labels.as_deref(),
        n_learned: cfg.decoder.n_queries,
        denoise: fx.denoise.as_ref().map_or(&[][..], |d| &d.targets[..]),
        saliency_pairs: &fx.pairs,
    };
    let (total, bd, assign) = build_loss(&mut g, &out.layers, Some(out.saliency), &targets, &cfg.loss, cfg.class_mode(), fixed)?;
    let grads = if fixed.is_none() {
        let gr = g.backward(total);
        g.param_grads(&gr)
    } else {
        Vec::new()
    };
    Ok(LossEval {
        value: bd.total,
        assign,
        grads,
        inputs,
    })
}

struct LossEval {
    value: f64,
    assign: Vec<MatchAssignment>,
    grads: Vec<(usize, Array2<f64>)>,
    inputs: Vec<Array2<f64>>,
}

/// Checks one configuration; groups are prefixed with `label`.
pub fn check_config(label: &str, cfg: &RunConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let model = Model::<f64>::new(cfg.model_config(), cfg.seed)?;
    check_model(label, cfg, model, opts)
}

/// Like [`check_config`] but probes the given parameters.
pub fn check_model(label: &str, cfg: &RunConfig, mut model: Model<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut cfg = cfg.clone();
    cfg.encoder.dropout = 0.0;
    cfg.validate()?;
    if cfg.encoder.d_model > 16 || cfg.encoder.n_layers > 2 || cfg.decoder.n_layers > 2 {
        return Err(Error::Config("gradient check needs d_model <= 16 and at most 2 layers".into()));
    }
    model.config.encoder.dropout = 0.0;
    if model.config != cfg.model_config() {
        return Err(Error::Config("model does not match the configuration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let data_cfg = crate::data::DatasetConfig {
        num_samples: 1,
        ..cfg.train_data_config()
    };
    let sample = generate_dataset(&data_cfg)?.remove(0);
    let sched = model.schedule()?;
    let denoise = if cfg.noise.enabled {
        Some(make_noisy_proposals(&sample.gt_spans, &cfg.noise, sched.as_ref(), &mut rng)?)
    } else {
        None
    };
    let labels = saliency_labels_from_spans(&sample.gt_spans, sample.n_v());
    let pairs = sample_saliency_pairs(&labels, &sample.gt_spans, &mut rng);
    let fx = Fixture { sample, denoise, pairs };

    let LossEval {
        assign,
        grads: analytic,
        inputs: frozen,
        ..
    } = loss_value(&model, &cfg, &fx, None, None, opts.giou_grad_scale)?;
    let mut groups = Vec::new();
    for (idx, grad) in analytic {
        let name = model.params.name(idx).to_string();
        let len = grad.len();
        let picks = sample_indices(&mut rng, len, opts.entries_per_tensor.min(len)).into_vec();
        let mut acc = Worst::default();
        for flat in picks {
            let (r, c) = (flat / grad.ncols(), flat % grad.ncols());
            let orig = model.params.values()[idx][[r, c]];
            let shift = |d: f64| -> Result<f64> {
                model.params.values_mut()[idx][[r, c]] = orig + d;
                let v = loss_value(&model, &cfg, &fx, Some(&assign), Some(&frozen), 1.0);
                model.params.values_mut()[idx][[r, c]] = orig;
                Ok(v?.value)
            };
            acc.add(probe(shift, grad[[r, c]], opts)?);
        }
        groups.push(acc.result(format!("{label}/{name}"), opts));
    }

    groups.extend(check_loss_inputs(label, &model, &cfg, &fx, &assign, opts)?);
    Ok(GradCheckReport { groups })
}

/// Loss gradients with respect to its own inputs.
fn check_loss_inputs(
    label: &str,
    model: &Model<f64>,
    cfg: &RunConfig,
    fx: &Fixture,
    assign: &[MatchAssignment],
    opts: &GradCheckOptions,
) -> Result<Vec<GroupResult>> {
    let out = model.forward(
        &fx.sample,
        ProposalPlan {
            denoise: fx.denoise.as_ref(),
            ..ProposalPlan::default()
        },
    )?;
    let targets = SampleTargets {
        gt: &fx.sample.gt_spans,
        labels: fx.sample.gt_labels.as_deref(),
        n_learned: cfg.decoder.n_queries,
        denoise: fx.denoise.as_ref().map_or(&[][..], |d| &d.targets[..]),
        saliency_pairs: &fx.pairs,
    };
    let mode = cfg.class_mode();
    let eval = |layers: &[LayerOutput<f64>], sal: &[f64]| -> Result<f64> {
        let inp = LossInputs {
            layers,
            targets: targets.clone(),
            saliency_scores: Some(sal),
        };
        Ok(loss_with_grads_scaled(&inp, &cfg.loss, mode, Some(assign), 1.0)?.value)
    };
    let inp = LossInputs {
        layers: &out.layers,
        targets: targets.clone(),
        saliency_scores: Some(&out.saliency),
    };
    let an = loss_with_grads_scaled(&inp, &cfg.loss, mode, Some(assign), opts.giou_grad_scale)?;
    // spans stay valid for every step the probe may use
    let h = opts.step;
    let mut span_acc = Worst::default();
    let mut logit_acc = Worst::default();
    for (l, layer) in out.layers.iter().enumerate() {
        for (i, sp) in layer.spans.iter().enumerate() {
            for side in 0..2 {
                let (s, e) = (sp.start(), sp.end());
                // stay inside the valid region on both sides
                if s - h < 0.0 || e + h > 1.0 || e - s < 2.0 * h {
                    continue;
                }
                let shift = |d: f64| -> Result<f64> {
                    let mut layers = out.layers.clone();
                    layers[l].spans[i] = if side == 0 { Span::new(s + d, e)? } else { Span::new(s, e + d)? };
                    eval(&layers, &out.saliency)
                };
                span_acc.add(probe(shift, an.spans[l][[i, side]], opts)?);
            }
        }
        for i in 0..layer.class_logits.nrows() {
            for c in 0..layer.class_logits.ncols() {
                let shift = |d: f64| -> Result<f64> {
                    let mut layers = out.layers.clone();
                    layers[l].class_logits[[i, c]] += d;
                    eval(&layers, &out.saliency)
                };
                logit_acc.add(probe(shift, an.logits[l][[i, c]], opts)?);
            }
        }
    }
    let mut sal_acc = Worst::default();
    let an_sal = an.saliency.clone().unwrap_or_default();
    for i in 0..out.saliency.len() {
        let shift = |d: f64| -> Result<f64> {
            let mut s = out.saliency.clone();
            s[i] += d;
            eval(&out.layers, &s)
        };
        sal_acc.add(probe(shift, an_sal[i], opts)?);
    }
    Ok(vec![
        span_acc.result(format!("{label}/loss.spans"), opts),
        logit_acc.result(format!("{label}/loss.logits"), opts),
        sal_acc.result(format!("{label}/loss.saliency"), opts),
    ])
}

#[derive(Default)]
struct Worst {
    err: f64,
    entries: usize,
    refined: usize,
}

impl Worst {
    fn add(&mut self, (err, refined): (f64, bool)) {
        self.err = self.err.max(err);
        self.entries += 1;
        self.refined += refined as usize;
    }

    fn result(self, group: String, opts: &GradCheckOptions) -> GroupResult {
        GroupResult {
            group,
            max_rel_error: self.err,
            entries: self.entries,
            refined: self.refined,
            passed: self.err <= opts.tolerance,
        }
    }
}

/// Runs every variant derived from `base` and merges the reports.
pub fn gradcheck(base: &RunConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut groups = Vec::new();
    for (label, cfg) in variants(base) {
        groups.extend(check_config(&label, &cfg, opts)?.groups);
    }
    Ok(GradCheckReport { groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_measure() {
        let o = GradCheckOptions::default();
        assert_eq!(error_of(0.0, 0.0, &o), 0.0);
        assert!((error_of(1.0, 1.002, &o) - 0.002 / 1.002).abs() < 1e-15);
        // below the floor only the absolute difference matters
        assert!(error_of(0.0, 5e-9, &o) <= o.tolerance);
        assert!(error_of(0.0, 2e-8, &o) > o.tolerance);
        assert!(error_of(1e-7, 1.0002e-7, &o) <= o.tolerance);
        assert!(error_of(1e-4, 1.01e-4, &o) > o.tolerance);
    }

    #[test]
    fn default_variant_passes() {
        let cfg = RunConfig::tiny();
        let r = check_config("base", &cfg, &GradCheckOptions::default()).unwrap();
        let bad: Vec<_> = r.groups.iter().filter(|g| !g.passed).collect();
        assert!(bad.is_empty(), "{bad:#?}");
    }

    #[test]
    fn corrupted_giou_gradient_is_caught() {
        let cfg = RunConfig::tiny();
        let opts = GradCheckOptions {
            giou_grad_scale: 0.5,
            ..GradCheckOptions::default()
        };
        let r = check_config("base", &cfg, &opts).unwrap();
        let failing = r.failing();
        assert!(failing.iter().any(|g| g == "base/loss.spans"), "{failing:?}");
        match r.into_result() {
            Err(Error::GradCheck { groups }) => assert!(groups.contains(&"base/loss.spans".to_string())),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_heads_still_pass() {
        let cfg = RunConfig::tiny();
        let mut model = Model::<f64>::new(cfg.model_config(), cfg.seed).unwrap();
        for n in model.params.names().to_vec() {
            if n.ends_with(".reg.w") || n.ends_with(".reg.b") {
                model.params.get_mut(&n).fill(0.0);
            }
        }
        let r = check_model("zero", &cfg, model, &GradCheckOptions::default()).unwrap();
        assert!(r.passed(), "{:?}", r.failing());
    }
}
