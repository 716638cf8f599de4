//! Recall@K at an IoU threshold and detection-style average precision.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_jsonl, Prediction, Sample, Window};
use crate::error::{Error, Result};
use crate::span::{iou_1d, Span};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub recall_ks: Vec<usize>,
    pub recall_thetas: Vec<f64>,
    /// Thresholds reported individually.
    pub map_report_thetas: Vec<f64>,
    /// Thresholds averaged into `map_avg`.
    pub map_avg_thetas: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            recall_ks: vec![1, 5],
            recall_thetas: vec![0.5, 0.7],
            map_report_thetas: vec![0.5, 0.7],
            map_avg_thetas: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.recall_ks.contains(&0) {
            return Err(Error::InvalidArgument("recall k must be >= 1".into()));
        }
        if self.map_avg_thetas.is_empty() {
            return Err(Error::InvalidArgument("map_avg needs at least one threshold".into()));
        }
        let all = self.recall_thetas.iter().chain(&self.map_report_thetas).chain(&self.map_avg_thetas);
        for &t in all {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidArgument(format!("IoU threshold {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Evaluation summary. Serialized as one flat JSON object.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Keyed by `(k, θ)`, e.g. `R1@0.50`.
    pub recall: BTreeMap<String, f64>,
    /// Keyed by θ, e.g. `mAP@0.50`.
    pub map_per_iou: BTreeMap<String, f64>,
    pub map_avg: f64,
    pub num_samples: usize,
}

impl EvalReport {
    pub fn recall_key(k: usize, theta: f64) -> String {
        format!("R{k}@{theta:.2}")
    }

    pub fn map_key(theta: f64) -> String {
        format!("mAP@{theta:.2}")
    }

    pub fn recall_at(&self, k: usize, theta: f64) -> Option<f64> {
        self.recall.get(&Self::recall_key(k, theta)).copied()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        for (k, v) in self.recall.iter().chain(&self.map_per_iou) {
            m.insert(k.clone(), (*v).into());
        }
        m.insert("map_avg".into(), self.map_avg.into());
        m.insert("num_samples".into(), self.num_samples.into());
        serde_json::Value::Object(m)
    }
}

/// Descending score, ties broken by earlier start then earlier end.
pub fn sort_windows(windows: &mut [Window]) {
    windows.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.span.start().total_cmp(&b.span.start()))
            .then(a.span.end().total_cmp(&b.span.end()))
    });
}

/// Whether any of the first `k` windows reaches IoU ≥ `theta` with any gt.
/// Windows are taken in the given order.
pub fn recall_at_k(windows: &[Window], gt: &[Span], k: usize, theta: f64) -> Result<bool> {
    if k < 1 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    Ok(windows
        .iter()
        .take(k)
        .any(|w| gt.iter().any(|g| iou_1d(&w.span, g) >= theta)))
}

/// Pooled average precision at IoU `theta` over `(windows, gt)` per sample.
///
/// Detections are ranked globally by score (ties: earlier start, earlier end,
/// then sample order and window order) and greedily matched to the unmatched gt of their
/// own sample with the highest IoU. AP integrates the monotone precision
/// envelope over recall.
pub fn average_precision(samples: &[(&[Window], &[Span])], theta: f64) -> Result<f64> {
    let total_gt: usize = samples.iter().map(|(_, g)| g.len()).sum();
    if total_gt == 0 {
        return Err(Error::InvalidArgument("average precision is undefined without ground truth".into()));
    }
    let mut dets: Vec<(usize, usize)> = samples
        .iter()
        .enumerate()
        .flat_map(|(s, (w, _))| (0..w.len()).map(move |j| (s, j)))
        .collect();
    let win = |&(s, j): &(usize, usize)| &samples[s].0[j];
    dets.sort_by(|a, b| {
        let (wa, wb) = (win(a), win(b));
        wb.score
            .total_cmp(&wa.score)
            .then(wa.span.start().total_cmp(&wb.span.start()))
            .then(wa.span.end().total_cmp(&wb.span.end()))
            .then(a.cmp(b))
    });

    let mut used: Vec<Vec<bool>> = samples.iter().map(|(_, g)| vec![false; g.len()]).collect();
    let mut is_tp = Vec::with_capacity(dets.len());
    for d in &dets {
        let (s, _) = *d;
        let w = win(d);
        let mut best: Option<(usize, f64)> = None;
        for (n, g) in samples[s].1.iter().enumerate() {
            if used[s][n] {
                continue;
            }
            let iou = iou_1d(&w.span, g);
            if iou >= theta && best.is_none_or(|(_, b)| iou > b) {
                best = Some((n, iou));
            }
        }
        if let Some((n, _)) = best {
            used[s][n] = true;
        }
        is_tp.push(best.is_some());
    }

    let mut precision = Vec::with_capacity(is_tp.len());
    let mut tp = 0usize;
    for (i, &t) in is_tp.iter().enumerate() {
        tp += t as usize;
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let sum: f64 = is_tp
        .iter()
        .zip(&precision)
        .filter(|(t, _)| **t)
        .map(|(_, p)| *p)
        .sum();
    Ok(sum / total_gt as f64)
}

/// Scores predictions against a dataset. Predictions for unknown ids and
/// duplicate ids are input errors; samples without predictions count as misses.
pub fn evaluate(predictions: &[Prediction], dataset: &[Sample], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let index: HashMap<&str, usize> = dataset.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut per_sample: Vec<Option<Vec<Window>>> = vec![None; dataset.len()];
    for p in predictions {
        let i = *index
            .get(p.id.as_str())
            .ok_or_else(|| Error::Input(format!("prediction id {} is not in the dataset", p.id)))?;
        if per_sample[i].is_some() {
            return Err(Error::Input(format!("duplicate prediction id {}", p.id)));
        }
        let mut w = p.windows.clone();
        sort_windows(&mut w);
        per_sample[i] = Some(w);
    }
    let empty: Vec<Window> = Vec::new();
    let pairs: Vec<(&[Window], &[Span])> = per_sample
        .iter()
        .zip(dataset)
        .map(|(w, s)| (w.as_deref().unwrap_or(&empty), s.gt_spans.as_slice()))
        .collect();

    let n = dataset.len() as f64;
    let mut recall = BTreeMap::new();
    for &k in &cfg.recall_ks {
        for &theta in &cfg.recall_thetas {
            let mut hits = 0usize;
            for (w, g) in &pairs {
                hits += recall_at_k(w, g, k, theta)? as usize;
            }
            recall.insert(EvalReport::recall_key(k, theta), hits as f64 / n);
        }
    }
    let mut map_per_iou = BTreeMap::new();
    for &theta in &cfg.map_report_thetas {
        map_per_iou.insert(EvalReport::map_key(theta), average_precision(&pairs, theta)?);
    }
    let mut acc = 0.0;
    for &theta in &cfg.map_avg_thetas {
        acc += average_precision(&pairs, theta)?;
    }
    Ok(EvalReport {
        recall,
        map_per_iou,
        map_avg: acc / cfg.map_avg_thetas.len() as f64,
        num_samples: dataset.len(),
    })
}

/// [`evaluate`] on JSONL files.
pub fn evaluate_files(predictions: &Path, dataset: &Path, cfg: &EvalConfig) -> Result<EvalReport> {
    let preds: Vec<Prediction> = read_jsonl(predictions)?;
    let data: Vec<Sample> = read_jsonl(dataset)?;
    evaluate(&preds, &data, cfg)
}

#[cfg(test)]
pub(crate) mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sp(a: f64, b: f64) -> Span {
        Span::new(a, b).unwrap()
    }

    fn w(a: f64, b: f64, score: f64) -> Window {
        Window { span: sp(a, b), score }
    }

    #[test]
    fn recall_examples() {
        let gt = [sp(0.2, 0.6)];
        assert!(recall_at_k(&[w(0.25, 0.6, 1.0)], &gt, 1, 0.5).unwrap());
        assert!(recall_at_k(&[w(0.2, 0.6, 1.0)], &gt, 1, 1.0).unwrap());
        assert!(!recall_at_k(&[w(0.7, 0.9, 1.0)], &gt, 1, 0.1).unwrap());
        assert!(recall_at_k(&[], &gt, 0, 0.5).is_err());
    }

    #[test]
    fn ap_examples() {
        let gt = [sp(0.2, 0.6)];
        let perfect = [w(0.2, 0.6, 0.9)];
        assert_eq!(average_precision(&[(&perfect, &gt)], 0.5).unwrap(), 1.0);
        let two = [w(0.7, 0.9, 0.9), w(0.2, 0.6, 0.5)];
        assert_eq!(average_precision(&[(&two, &gt)], 0.5).unwrap(), 0.5);
        let none = [w(0.7, 0.9, 0.9)];
        assert_eq!(average_precision(&[(&none, &gt)], 0.5).unwrap(), 0.0);
        assert!(average_precision(&[(&none, &[])], 0.5).is_err());
    }

    /// Independent reference: recomputes everything with naive loops and
    /// explicit per-recall-level precision maxima.
    pub(crate) fn brute_recall(windows: &[Window], gt: &[Span], k: usize, theta: f64) -> bool {
        let mut idx: Vec<usize> = (0..windows.len()).collect();
        // selection sort by (score desc, start asc, end asc)
        for i in 0..idx.len() {
            let mut m = i;
            for j in i + 1..idx.len() {
                let (a, b) = (&windows[idx[j]], &windows[idx[m]]);
                let key = |x: &Window| (-x.score, x.span.start(), x.span.end());
                if key(a) < key(b) {
                    m = j;
                }
            }
            idx.swap(i, m);
        }
        let mut hit = false;
        for &i in idx.iter().take(k) {
            for g in gt {
                let inter = (windows[i].span.end().min(g.end()) - windows[i].span.start().max(g.start())).max(0.0);
                let union = windows[i].span.width() + g.width() - inter;
                if union > 0.0 && inter / union >= theta {
                    hit = true;
                }
            }
        }
        hit
    }

    pub(crate) fn brute_ap(samples: &[(Vec<Window>, Vec<Span>)], theta: f64) -> f64 {
        let mut dets = Vec::new();
        for (s, (ws, _)) in samples.iter().enumerate() {
            for (j, x) in ws.iter().enumerate() {
                dets.push((x.score, x.span.start(), x.span.end(), s, j));
            }
        }
        // insertion sort on (−score, start, end, s, j)
        for i in 1..dets.len() {
            let mut j = i;
            while j > 0 {
                let (a, b) = (dets[j], dets[j - 1]);
                let less = (-a.0, a.1, a.2, a.3, a.4).partial_cmp(&(-b.0, b.1, b.2, b.3, b.4)).unwrap().is_lt();
                if !less {
                    break;
                }
                dets.swap(j, j - 1);
                j -= 1;
            }
        }
        let total: usize = samples.iter().map(|(_, g)| g.len()).sum();
        let mut taken: Vec<Vec<bool>> = samples.iter().map(|(_, g)| vec![false; g.len()]).collect();
        let mut flags = Vec::new();
        for &(_, _, _, s, j) in &dets {
            let p = samples[s].0[j].span;
            let mut best = None;
            let mut best_iou = -1.0;
            for (n, g) in samples[s].1.iter().enumerate() {
                let inter = (p.end().min(g.end()) - p.start().max(g.start())).max(0.0);
                let union = p.width() + g.width() - inter;
                let iou = if union > 0.0 { inter / union } else { 0.0 };
                if !taken[s][n] && iou >= theta && iou > best_iou {
                    best = Some(n);
                    best_iou = iou;
                }
            }
            if let Some(n) = best {
                taken[s][n] = true;
            }
            flags.push(best.is_some());
        }
        let mut sum = 0.0;
        for (r, &f) in flags.iter().enumerate() {
            if !f {
                continue;
            }
            let mut best = 0.0f64;
            for q in r..flags.len() {
                let tp = flags[..=q].iter().filter(|x| **x).count();
                best = best.max(tp as f64 / (q + 1) as f64);
            }
            sum += best;
        }
        sum / total as f64
    }

    pub(crate) fn random_instance(rng: &mut ChaCha8Rng, samples: usize, max_preds: usize) -> Vec<(Vec<Window>, Vec<Span>)> {
        let grid = |rng: &mut ChaCha8Rng| (rng.gen_range(0..=20) as f64) / 20.0;
        (0..samples)
            .map(|_| {
                let ng = rng.gen_range(1..=3);
                let gt = (0..ng)
                    .map(|_| {
                        let (a, b) = (grid(rng), grid(rng));
                        Span::new(a.min(b), a.max(b)).unwrap()
                    })
                    .collect();
                let np = rng.gen_range(0..=max_preds);
                let ws = (0..np)
                    .map(|_| {
                        let (a, b) = (grid(rng), grid(rng));
                        Window {
                            span: Span::new(a.min(b), a.max(b)).unwrap(),
                            score: (rng.gen_range(0..8) as f64) / 8.0,
                        }
                    })
                    .collect();
                (ws, gt)
            })
            .collect()
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(1..=20);
            let inst = random_instance(&mut rng, n, 10);
            let pairs: Vec<(&[Window], &[Span])> = inst.iter().map(|(w, g)| (w.as_slice(), g.as_slice())).collect();
            for theta in [0.3, 0.5, 0.7] {
                assert_eq!(average_precision(&pairs, theta).unwrap(), brute_ap(&inst, theta));
                for k in [1, 3] {
                    for (w, g) in &inst {
                        let mut sorted = w.clone();
                        sort_windows(&mut sorted);
                        assert_eq!(recall_at_k(&sorted, g, k, theta).unwrap(), brute_recall(w, g, k, theta));
                    }
                }
            }
        }
    }

    fn dataset(inst: &[(Vec<Window>, Vec<Span>)]) -> (Vec<Prediction>, Vec<Sample>) {
        let mut preds = Vec::new();
        let mut data = Vec::new();
        for (i, (w, g)) in inst.iter().enumerate() {
            let id = format!("x{i}");
            preds.push(Prediction {
                id: id.clone(),
                windows: w.clone(),
                saliency_scores: None,
            });
            data.push(Sample {
                id,
                features: ndarray::Array2::zeros((2, 1)),
                query_tokens: None,
                gt_spans: g.clone(),
                saliency: None,
                num_classes: 0,
                gt_labels: None,
            });
        }
        (preds, data)
    }

    #[test]
    fn evaluate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = random_instance(&mut rng, 10, 5);
        let (_, data) = dataset(&inst);
        let perfect: Vec<Prediction> = data
            .iter()
            .map(|s| Prediction {
                id: s.id.clone(),
                windows: s.gt_spans.iter().map(|&span| Window { span, score: 1.0 }).collect(),
                saliency_scores: None,
            })
            .collect();
        let cfg = EvalConfig::default();
        let r = evaluate(&perfect, &data, &cfg).unwrap();
        // degenerate gt spans have IoU 0 with everything
        let all_wide = data.iter().all(|s| s.gt_spans.iter().all(|g| g.width() > 0.0));
        if all_wide {
            assert_eq!(r.map_avg, 1.0);
            assert!(r.recall.values().all(|&v| v == 1.0));
        }
        let r = evaluate(&[], &data, &cfg).unwrap();
        assert_eq!(r.map_avg, 0.0);
        assert!(r.recall.values().all(|&v| v == 0.0));
        let mut dup = perfect.clone();
        dup.push(perfect[0].clone());
        assert!(matches!(evaluate(&dup, &data, &cfg), Err(Error::Input(_))));
        let json = r.to_json();
        assert!(json.get("map_avg").is_some() && json.get("R1@0.50").is_some() && json.get("mAP@0.70").is_some());
    }

    #[test]
    fn evaluate_equals_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = EvalConfig::default();
        for _ in 0..20 {
            let inst = random_instance(&mut rng, 20, 10);
            let (preds, data) = dataset(&inst);
            let r = evaluate(&preds, &data, &cfg).unwrap();
            for &k in &cfg.recall_ks {
                for &t in &cfg.recall_thetas {
                    let hits = inst.iter().filter(|(w, g)| brute_recall(w, g, k, t)).count();
                    assert_eq!(r.recall_at(k, t).unwrap(), hits as f64 / 20.0);
                }
            }
            let avg: f64 = cfg.map_avg_thetas.iter().map(|&t| brute_ap(&inst, t)).sum::<f64>() / 10.0;
            assert_eq!(r.map_avg, avg);
        }
    }

    proptest! {
        #[test]
        fn recall_monotone(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (w, g) in random_instance(&mut rng, 5, 10) {
                let mut w = w;
                sort_windows(&mut w);
                for k in 1..10 {
                    prop_assert!(recall_at_k(&w, &g, k, 0.5).unwrap() <= recall_at_k(&w, &g, k + 1, 0.5).unwrap());
                }
                for t in [0.1, 0.3, 0.5, 0.7] {
                    prop_assert!(recall_at_k(&w, &g, 3, t).unwrap() >= recall_at_k(&w, &g, 3, t + 0.2).unwrap());
                }
            }
        }

        #[test]
        fn ap_invariant_to_monotone_score_maps(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = random_instance(&mut rng, 6, 8);
            let moved: Vec<(Vec<Window>, Vec<Span>)> = inst
                .iter()
                .map(|(w, g)| {
                    let w = w.iter().map(|x| Window { span: x.span, score: (3.0 * x.score).exp() - 7.0 }).collect();
                    (w, g.clone())
                })
                .collect();
            let a: Vec<(&[Window], &[Span])> = inst.iter().map(|(w, g)| (w.as_slice(), g.as_slice())).collect();
            let b: Vec<(&[Window], &[Span])> = moved.iter().map(|(w, g)| (w.as_slice(), g.as_slice())).collect();
            for t in [0.5, 0.7] {
                prop_assert_eq!(average_precision(&a, t).unwrap(), average_precision(&b, t).unwrap());
            }
        }
    }
}
