//! Set-prediction training loss with deep supervision.
//!
//! Per decoder layer: the learned group is Hungarian-matched to the ground
//! truth; matched rows pay a localization term (weighted L1 + gIoU) and a
//! foreground classification term, unmatched rows a down-weighted background
//! term. Denoise positives regress to their fixed source span; denoise
//! negatives are pushed to background only and never enter the matcher.
//! A margin hinge on per-snippet saliency scores is added once per sample.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::autograd::{self, Graph, Real, SpanTarget, Var};
use crate::decoder::{LayerOutput, LayerVars};
use crate::error::{Error, Result};
use crate::matching::{cost_matrix, hungarian_assign, LossWeights, MatchAssignment};
use crate::span::Span;

/// How proposals are classified.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassMode {
    /// Two-way softmax (foreground / background) with cross-entropy.
    Grounding,
    /// `k` independent sigmoid classifiers with focal loss.
    Detection { classes: usize },
}

impl ClassMode {
    pub fn num_logits(self) -> usize {
        match self {
            ClassMode::Grounding => 2,
            ClassMode::Detection { classes } => classes + 1,
        }
    }
}

/// Supervision attached to one sample.
#[derive(Clone, Debug)]
pub struct SampleTargets<'s> {
    pub gt: &'s [Span],
    /// Class of each ground-truth span (detection mode only).
    pub labels: Option<&'s [usize]>,
    pub n_learned: usize,
    /// Targets of the denoise rows that follow the learned rows.
    pub denoise: &'s [Option<usize>],
    /// `(inside, outside)` snippet index pairs for the saliency hinge.
    pub saliency_pairs: &'s [(usize, usize)],
}

/// Weighted loss components, summed over layers. `total` is their sum.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1: f64,
    pub giou: f64,
    pub cls: f64,
    pub denoise_l1: f64,
    pub denoise_giou: f64,
    pub denoise_cls: f64,
    pub saliency: f64,
    /// Set when no outside-span snippet existed and the hinge was skipped.
    pub saliency_skipped: bool,
}

impl LossBreakdown {
    pub fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.l1 += o.l1;
        self.giou += o.giou;
        self.cls += o.cls;
        self.denoise_l1 += o.denoise_l1;
        self.denoise_giou += o.denoise_giou;
        self.denoise_cls += o.denoise_cls;
        self.saliency += o.saliency;
        self.saliency_skipped |= o.saliency_skipped;
    }

    pub fn scale(&mut self, k: f64) {
        self.total *= k;
        self.l1 *= k;
        self.giou *= k;
        self.cls *= k;
        self.denoise_l1 *= k;
        self.denoise_giou *= k;
        self.denoise_cls *= k;
        self.saliency *= k;
    }

    pub(crate) fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("l1", self.l1),
            ("giou", self.giou),
            ("cls", self.cls),
            ("denoise_l1", self.denoise_l1),
            ("denoise_giou", self.denoise_giou),
            ("denoise_cls", self.denoise_cls),
            ("saliency", self.saliency),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Probability each learned row assigns to each ground truth's class.
fn class_prob_matrix<T: Real>(logits: ArrayView2<'_, T>, n_learned: usize, mode: ClassMode, labels: Option<&[usize]>, m: usize) -> Array2<f64> {
    match mode {
        ClassMode::Grounding => {
            let p = autograd::softmax_rows(logits);
            Array2::from_shape_fn((n_learned, m), |(i, _)| p[[i, 0]].f64())
        }
        ClassMode::Detection { .. } => {
            let labels = labels.expect("detection mode needs labels");
            Array2::from_shape_fn((n_learned, m), |(i, n)| autograd::sigmoid(logits[[i, labels[n]]].f64()))
        }
    }
}

/// Matching for the learned rows of one layer.
pub(crate) fn match_layer<T: Real>(
    spans: ArrayView2<'_, T>,
    logits: ArrayView2<'_, T>,
    t: &SampleTargets<'_>,
    w: &LossWeights,
    mode: ClassMode,
) -> Result<MatchAssignment> {
    let pred: Vec<Span> = crate::decoder::array_to_spans(spans.slice(ndarray::s![..t.n_learned, ..]));
    let probs = class_prob_matrix(logits, t.n_learned, mode, t.labels, t.gt.len());
    hungarian_assign(&cost_matrix(&pred, &probs, t.gt, w))
}

/// Builds the full per-sample loss on the graph. When `fixed` is given those
/// assignments are used instead of running the matcher (gradient checks).
pub(crate) fn build_loss<'a, T: Real>(
    g: &mut Graph<'a, T>,
    layers: &[LayerVars],
    saliency: Option<Var>,
    t: &SampleTargets<'_>,
    w: &LossWeights,
    mode: ClassMode,
    fixed: Option<&[MatchAssignment]>,
) -> Result<(Var, LossBreakdown, Vec<MatchAssignment>)> {
    let mut parts = Vec::new();
    let mut bd = LossBreakdown::default();
    let mut assignments = Vec::with_capacity(layers.len());
    let n_dn = t.denoise.len();
    let n_pos = t.denoise.iter().filter(|x| x.is_some()).count();
    let m = t.gt.len();

    for (li, lv) in layers.iter().enumerate() {
        let (rows, ncls) = g.shape(lv.logits);
        if rows != t.n_learned + n_dn {
            return Err(Error::shape("layer logits", t.n_learned + n_dn, rows));
        }
        let assign = match fixed {
            Some(f) => f[li].clone(),
            None => match_layer(g.value(lv.spans), g.value(lv.logits), t, w, mode)?,
        };
        let matched = assign.by_prediction(t.n_learned);

        // localization: learned matches
        if m > 0 {
            let targets: Vec<SpanTarget> = assign
                .pairs
                .iter()
                .map(|&(p, n)| SpanTarget {
                    row: p,
                    start: t.gt[n].start(),
                    end: t.gt[n].end(),
                    weight: w.lambda_loc / m as f64,
                })
                .collect();
            let (v, l1, gi) = g.span_loss(lv.spans, &targets, w.lambda_l1, w.lambda_giou);
            bd.l1 += l1;
            bd.giou += gi;
            parts.push(v);
        }
        // localization: denoise positives
        if n_pos > 0 {
            let targets: Vec<SpanTarget> = t
                .denoise
                .iter()
                .enumerate()
                .filter_map(|(i, tgt)| {
                    tgt.map(|n| SpanTarget {
                        row: t.n_learned + i,
                        start: t.gt[n].start(),
                        end: t.gt[n].end(),
                        weight: w.lambda_loc / n_pos as f64,
                    })
                })
                .collect();
            let (v, l1, gi) = g.span_loss(lv.spans, &targets, w.lambda_l1, w.lambda_giou);
            bd.denoise_l1 += l1;
            bd.denoise_giou += gi;
            parts.push(v);
        }

        // classification
        match mode {
            ClassMode::Grounding => {
                let bg = ncls - 1;
                let mut targets = Vec::with_capacity(rows);
                let mut weights = Vec::with_capacity(rows);
                for mi in &matched {
                    let fg = mi.is_some();
                    targets.push(if fg { 0 } else { bg });
                    weights.push(w.lambda_cls * if fg { 1.0 } else { w.eos_coef } / t.n_learned as f64);
                }
                let rows_l = g.slice_rows(lv.logits, 0, t.n_learned);
                let learned_ce = g.cross_entropy(rows_l, &targets, &weights);
                bd.cls += g.scalar(learned_ce).f64();
                parts.push(learned_ce);
                if n_dn > 0 {
                    let mut targets = Vec::with_capacity(n_dn);
                    let mut weights = Vec::with_capacity(n_dn);
                    for tgt in t.denoise {
                        let fg = tgt.is_some();
                        targets.push(if fg { 0 } else { bg });
                        weights.push(w.lambda_cls * if fg { 1.0 } else { w.eos_coef } / n_dn as f64);
                    }
                    let rows_d = g.slice_rows(lv.logits, t.n_learned, n_dn);
                    let dn_ce = g.cross_entropy(rows_d, &targets, &weights);
                    bd.denoise_cls += g.scalar(dn_ce).f64();
                    parts.push(dn_ce);
                }
            }
            ClassMode::Detection { classes } => {
                let labels = t.labels.ok_or_else(|| Error::Contract("detection mode needs gt labels".into()))?;
                let mut targets: Vec<Option<usize>> = matched.iter().map(|mi| mi.map(|n| labels[n])).collect();
                let learned_n = targets.len();
                targets.extend(t.denoise.iter().map(|tgt| tgt.map(|n| labels[n])));
                // mean over learned entries and over denoise entries separately
                let rows_l = g.slice_rows(lv.logits, 0, learned_n);
                let lf = g.focal(rows_l, classes, &targets[..learned_n], w.focal_gamma, w.focal_alpha, w.lambda_cls / (learned_n * classes) as f64);
                bd.cls += g.scalar(lf).f64();
                parts.push(lf);
                if n_dn > 0 {
                    let rows_d = g.slice_rows(lv.logits, learned_n, n_dn);
                    let df = g.focal(rows_d, classes, &targets[learned_n..], w.focal_gamma, w.focal_alpha, w.lambda_cls / (n_dn * classes) as f64);
                    bd.denoise_cls += g.scalar(df).f64();
                    parts.push(df);
                }
            }
        }
        assignments.push(assign);
    }

    if let Some(s) = saliency {
        if t.saliency_pairs.is_empty() {
            bd.saliency_skipped = true;
        } else if w.lambda_saliency > 0.0 {
            let h = g.hinge(s, t.saliency_pairs, w.saliency_margin);
            let h = g.scale(h, T::of(w.lambda_saliency));
            bd.saliency += g.scalar(h).f64();
            parts.push(h);
        }
    }

    let total = g.add_scalars(&parts);
    bd.total = g.scalar(total).f64();
    if let Some(term) = bd.first_non_finite() {
        return Err(Error::Numeric { term: term.into() });
    }
    if !bd.total.is_finite() {
        return Err(Error::Numeric { term: "total".into() });
    }
    Ok((total, bd, assignments))
}

/// Saliency pairs: one `(inside, outside)` snippet pair per ground-truth span,
/// drawn uniformly. Empty when every snippet is inside some span.
pub fn sample_saliency_pairs<R: Rng>(labels: &[f64], gt: &[Span], rng: &mut R) -> Vec<(usize, usize)> {
    let n_v = labels.len();
    let outside: Vec<usize> = (0..n_v).filter(|&i| labels[i] < 0.5).collect();
    if outside.is_empty() {
        return Vec::new();
    }
    let mut pairs = Vec::with_capacity(gt.len());
    for span in gt {
        let inside: Vec<usize> = (0..n_v)
            .filter(|&i| labels[i] >= 0.5 && span.contains((i as f64 + 0.5) / n_v as f64))
            .collect();
        if inside.is_empty() {
            continue;
        }
        let a = inside[rng.gen_range(0..inside.len())];
        let b = outside[rng.gen_range(0..outside.len())];
        pairs.push((a, b));
    }
    pairs
}

/// Per-snippet labels from spans (snippet centre inside any span).
pub fn saliency_labels_from_spans(gt: &[Span], n_v: usize) -> Vec<f64> {
    (0..n_v)
        .map(|i| {
            let c = (i as f64 + 0.5) / n_v as f64;
            if gt.iter().any(|s| s.contains(c)) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Mean over pairs of `max(0, margin + s_out − s_in)`. `None` when there is no
/// outside snippet to compare against (the term is skipped).
pub fn saliency_loss(scores: &[f64], in_idx: &[usize], out_idx: &[usize], margin: f64) -> Result<Option<f64>> {
    if in_idx.len() != out_idx.len() {
        return Err(Error::InvalidArgument("in/out index lists differ in length".into()));
    }
    if out_idx.is_empty() {
        return Ok(None);
    }
    let n = in_idx.len() as f64;
    let total: f64 = in_idx
        .iter()
        .zip(out_idx)
        .map(|(&i, &o)| (margin + scores[o] - scores[i]).max(0.0))
        .sum();
    Ok(Some(total / n))
}

/// Mean sigmoid focal loss over `[rows × k]` logits.
pub fn focal_loss(logits: ArrayView2<'_, f64>, targets: &[Option<usize>], gamma: f64, alpha: f64) -> Result<f64> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { term: "focal".into() });
    }
    let k = logits.ncols();
    let mut total = 0.0;
    for (i, t) in targets.iter().enumerate() {
        for c in 0..k {
            total += autograd::focal_term(logits[[i, c]], *t == Some(c), gamma, alpha).0;
        }
    }
    let v = total / (targets.len() * k).max(1) as f64;
    if !v.is_finite() {
        return Err(Error::Numeric { term: "focal".into() });
    }
    Ok(v)
}

/// Inputs to [`loss_total`] for one sample.
pub struct LossInputs<'s, T> {
    pub layers: &'s [LayerOutput<T>],
    pub targets: SampleTargets<'s>,
    /// Per-snippet saliency predictions, when the saliency term is used.
    pub saliency_scores: Option<&'s [f64]>,
}

/// Scalar loss of already-computed decoder outputs, with its breakdown and the
/// matchings used. Gradients with respect to spans, logits and saliency scores
/// are returned in the same order as the inputs.
pub fn loss_total<T: Real>(inp: &LossInputs<'_, T>, w: &LossWeights, mode: ClassMode) -> Result<(f64, LossBreakdown, Vec<MatchAssignment>)> {
    let r = loss_with_grads(inp, w, mode, None)?;
    Ok((r.value, r.breakdown, r.assignments))
}

/// Result of [`loss_with_grads`].
pub struct LossGrads {
    pub value: f64,
    pub breakdown: LossBreakdown,
    pub assignments: Vec<MatchAssignment>,
    /// Per layer: gradient w.r.t. `[P × 2]` spans and `[P × C]` logits.
    pub spans: Vec<Array2<f64>>,
    pub logits: Vec<Array2<f64>>,
    pub saliency: Option<Vec<f64>>,
}

/// Like [`loss_total`] but also returns input gradients. `fixed` pins the
/// matching (the assignment is piecewise constant in its inputs).
pub fn loss_with_grads<T: Real>(
    inp: &LossInputs<'_, T>,
    w: &LossWeights,
    mode: ClassMode,
    fixed: Option<&[MatchAssignment]>,
) -> Result<LossGrads> {
    loss_with_grads_scaled(inp, w, mode, fixed, 1.0)
}

pub(crate) fn loss_with_grads_scaled<T: Real>(
    inp: &LossInputs<'_, T>,
    w: &LossWeights,
    mode: ClassMode,
    fixed: Option<&[MatchAssignment]>,
    giou_grad_scale: f64,
) -> Result<LossGrads> {
    w.validate()?;
    let mut g = Graph::<f64>::new();
    g.set_giou_grad_scale(giou_grad_scale);
    let mut vars = Vec::with_capacity(inp.layers.len());
    for lo in inp.layers {
        let spans = g.input(crate::decoder::spans_to_array(&lo.spans));
        let logits = g.input(lo.class_logits.mapv(|v| v.f64()));
        let emb = g.constant(Array2::zeros((0, 0)));
        vars.push(LayerVars {
            input: spans,
            spans,
            logits,
            embeddings: emb,
        });
    }
    let sal = inp
        .saliency_scores
        .map(|s| g.input(Array2::from_shape_vec((s.len(), 1), s.to_vec()).expect("column")));
    let (total, breakdown, assignments) = build_loss(&mut g, &vars, sal, &inp.targets, w, mode, fixed)?;
    let grads = g.backward(total);
    let get = |v: Var, dim: (usize, usize)| grads.get(v).cloned().unwrap_or_else(|| Array2::zeros(dim));
    Ok(LossGrads {
        value: breakdown.total,
        breakdown,
        assignments,
        spans: vars.iter().map(|lv| get(lv.spans, g.shape(lv.spans))).collect(),
        logits: vars.iter().map(|lv| get(lv.logits, g.shape(lv.logits))).collect(),
        saliency: sal.map(|s| get(s, g.shape(s)).column(0).to_vec()),
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    use super::*;

    fn sp(a: f64, b: f64) -> Span {
        Span::new(a, b).unwrap()
    }

    fn layer(spans: Vec<Span>, logits: Array2<f64>) -> LayerOutput<f64> {
        let n = spans.len();
        LayerOutput {
            spans,
            embeddings: Array2::zeros((n, 1)),
            class_logits: logits,
        }
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        let gt = [sp(0.2, 0.5)];
        let layers = [layer(vec![sp(0.2, 0.5)], array![[60.0, -60.0]])];
        let inp = LossInputs {
            layers: &layers,
            targets: SampleTargets {
                gt: &gt,
                labels: None,
                n_learned: 1,
                denoise: &[],
                saliency_pairs: &[(3, 0)],
            },
            saliency_scores: Some(&[0.0, 0.0, 0.0, 1.0]),
        };
        let (v, bd, _) = loss_total(&inp, &LossWeights::default(), ClassMode::Grounding).unwrap();
        assert!(v.abs() < 1e-12, "{v} {bd:?}");
    }

    #[test]
    fn localization_only_example() {
        // pred (0.3, 0.6) vs gt (0.2, 0.5): L1 = 0.2, gIoU = 0.2/0.4 = 0.5
        let gt = [sp(0.2, 0.5)];
        let layers = [layer(vec![sp(0.3, 0.6)], array![[0.0, 0.0]])];
        let w = LossWeights {
            lambda_cls: 0.0,
            lambda_saliency: 0.0,
            lambda_l1: 1.0,
            lambda_giou: 1.0,
            lambda_loc: 1.0,
            ..LossWeights::default()
        };
        let inp = LossInputs {
            layers: &layers,
            targets: SampleTargets {
                gt: &gt,
                labels: None,
                n_learned: 1,
                denoise: &[],
                saliency_pairs: &[],
            },
            saliency_scores: None,
        };
        let (v, bd, _) = loss_total(&inp, &w, ClassMode::Grounding).unwrap();
        assert_abs_diff_eq!(v, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(bd.l1, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(bd.giou, 0.5, epsilon = 1e-12);

        let w2 = LossWeights { lambda_loc: 2.0, ..w };
        let (v2, bd2, a2) = loss_total(&inp, &w2, ClassMode::Grounding).unwrap();
        assert_abs_diff_eq!(v2, 1.4, epsilon = 1e-12);
        assert_abs_diff_eq!(bd2.l1 + bd2.giou, 2.0 * (bd.l1 + bd.giou), epsilon = 1e-12);
        assert_eq!(a2[0].pairs, vec![(0, 0)]);
    }

    #[test]
    fn doubling_loc_weight_keeps_matching() {
        let gt = [sp(0.1, 0.3), sp(0.6, 0.8)];
        let layers = [layer(
            vec![sp(0.0, 0.2), sp(0.55, 0.9), sp(0.1, 0.35), sp(0.4, 0.5)],
            array![[0.3, 0.1], [1.0, -1.0], [0.0, 0.2], [0.5, 0.5]],
        )];
        let inp = LossInputs {
            layers: &layers,
            targets: SampleTargets {
                gt: &gt,
                labels: None,
                n_learned: 4,
                denoise: &[],
                saliency_pairs: &[],
            },
            saliency_scores: None,
        };
        let w = LossWeights::default();
        let (_, b1, a1) = loss_total(&inp, &w, ClassMode::Grounding).unwrap();
        let (_, b2, a2) = loss_total(&inp, &LossWeights { lambda_loc: 2.0, ..w }, ClassMode::Grounding).unwrap();
        assert_eq!(a1, a2);
        assert_abs_diff_eq!(b2.l1 + b2.giou, 2.0 * (b1.l1 + b1.giou), epsilon = 1e-12);
        assert_abs_diff_eq!(b2.cls, b1.cls, epsilon = 1e-12);
    }

    #[test]
    fn saliency_examples() {
        assert_eq!(saliency_loss(&[1.0, 0.0], &[0], &[1], 0.2).unwrap(), Some(0.0));
        assert_abs_diff_eq!(saliency_loss(&[0.5, 0.5], &[0], &[1], 0.2).unwrap().unwrap(), 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(saliency_loss(&[0.0, 0.5], &[0], &[1], 0.2).unwrap().unwrap(), 0.7, epsilon = 1e-12);
        assert_eq!(saliency_loss(&[0.5], &[], &[], 0.2).unwrap(), None);
    }

    #[test]
    fn saliency_pairs_skip_when_everything_is_inside() {
        let gt = [sp(0.0, 1.0)];
        let labels = saliency_labels_from_spans(&gt, 8);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        assert!(sample_saliency_pairs(&labels, &gt, &mut rng).is_empty());
        let gt = [sp(0.0, 0.5), sp(0.75, 1.0)];
        let labels = saliency_labels_from_spans(&gt, 8);
        let pairs = sample_saliency_pairs(&labels, &gt, &mut rng);
        assert_eq!(pairs.len(), 2);
        for (i, o) in pairs {
            assert_eq!(labels[i], 1.0);
            assert_eq!(labels[o], 0.0);
        }
    }

    #[test]
    fn skipped_saliency_is_flagged() {
        let gt = [sp(0.0, 1.0)];
        let layers = [layer(vec![sp(0.0, 1.0)], array![[0.0, 0.0]])];
        let inp = LossInputs {
            layers: &layers,
            targets: SampleTargets {
                gt: &gt,
                labels: None,
                n_learned: 1,
                denoise: &[],
                saliency_pairs: &[],
            },
            saliency_scores: Some(&[0.1, 0.2]),
        };
        let (_, bd, _) = loss_total(&inp, &LossWeights::default(), ClassMode::Grounding).unwrap();
        assert!(bd.saliency_skipped);
        assert_eq!(bd.saliency, 0.0);
    }

    #[test]
    fn focal_examples() {
        let half_bce = focal_loss(array![[0.3], [-1.1]].view(), &[Some(0), None], 0.0, 0.5).unwrap();
        let p1 = 1.0 / (1.0 + (-0.3f64).exp());
        let p2 = 1.0 / (1.0 + (1.1f64).exp());
        let bce = (-p1.ln() - (1.0 - p2).ln()) / 2.0;
        assert_abs_diff_eq!(half_bce, 0.5 * bce, epsilon = 1e-12);
        let v = focal_loss(array![[0.0]].view(), &[Some(0)], 2.0, 0.25).unwrap();
        assert_abs_diff_eq!(v, 0.04332, epsilon = 1e-5);
        assert!(focal_loss(array![[f64::NAN]].view(), &[Some(0)], 2.0, 0.25).is_err());
    }

    #[test]
    fn denoise_rows_use_their_fixed_targets() {
        let gt = [sp(0.2, 0.4)];
        // one learned row, one positive, one negative
        let layers = [layer(
            vec![sp(0.2, 0.4), sp(0.25, 0.45), sp(0.3, 0.8)],
            array![[50.0, -50.0], [0.0, 0.0], [0.0, 0.0]],
        )];
        let dn = [Some(0), None];
        let w = LossWeights {
            lambda_saliency: 0.0,
            ..LossWeights::default()
        };
        let inp = LossInputs {
            layers: &layers,
            targets: SampleTargets {
                gt: &gt,
                labels: None,
                n_learned: 1,
                denoise: &dn,
                saliency_pairs: &[],
            },
            saliency_scores: None,
        };
        let (v, bd, a) = loss_total(&inp, &w, ClassMode::Grounding).unwrap();
        assert_eq!(a[0].pairs, vec![(0, 0)]);
        assert!(bd.l1.abs() < 1e-12);
        // positive: L1 = 0.1, gIoU = 0.15/0.25
        assert_abs_diff_eq!(bd.denoise_l1, 10.0 * 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(bd.denoise_giou, 1.0 - 0.15 / 0.25, epsilon = 1e-12);
        // CE at uniform logits is ln 2 for both rows, weighted 1 and 0.1, mean over 2
        assert_abs_diff_eq!(bd.denoise_cls, 4.0 * (1.0 + 0.1) * std::f64::consts::LN_2 / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, bd.l1 + bd.giou + bd.cls + bd.denoise_l1 + bd.denoise_giou + bd.denoise_cls, epsilon = 1e-12);
    }

    #[test]
    fn loss_is_non_negative() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let gt = [crate::span::clamp_and_order(rng.gen(), rng.gen()).unwrap()];
            let spans = (0..4)
                .map(|_| crate::span::clamp_and_order(rng.gen(), rng.gen()).unwrap())
                .collect();
            let logits = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-3.0..3.0));
            let layers = [layer(spans, logits)];
            let inp = LossInputs {
                layers: &layers,
                targets: SampleTargets {
                    gt: &gt,
                    labels: None,
                    n_learned: 2,
                    denoise: &[Some(0), None],
                    saliency_pairs: &[(0, 1)],
                },
                saliency_scores: Some(&[rng.gen(), rng.gen()]),
            };
            let (v, _, _) = loss_total(&inp, &LossWeights::default(), ClassMode::Grounding).unwrap();
            assert!(v >= 0.0);
        }
    }
}
