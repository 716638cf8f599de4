//! Inference over datasets, random-span decoding and the seed sweep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Real;
use crate::data::{Prediction, Sample};
use crate::error::{Error, Result};
use crate::model::{random_spans, Model};

/// Predictions for every sample. With `random_seed` set, each sample starts
/// from fresh uniform spans drawn from that seed's stream.
pub fn predict_all<T: Real>(model: &Model<T>, samples: &[Sample], random_seed: Option<u64>) -> Result<Vec<Prediction>> {
    let nq = model.config.decoder.n_queries;
    let mut rng = random_seed.map(ChaCha8Rng::seed_from_u64);
    samples
        .iter()
        .map(|s| match rng.as_mut() {
            Some(r) => {
                let init = random_spans(nq, r);
                model.predict(s, Some(&init))
            }
            None => model.predict(s, None),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleDispersion {
    pub id: String,
    /// Population variance across seeds of the top-1 window centre.
    pub top1_center_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersionSummary {
    pub seeds: usize,
    pub mean_top1_center_variance: f64,
    pub per_sample: Vec<SampleDispersion>,
}

/// Spread of the top-1 window centre across per-seed prediction sets.
pub fn dispersion(runs: &[Vec<Prediction>]) -> Result<DispersionSummary> {
    let Some(first) = runs.first() else {
        return Err(Error::InvalidArgument("dispersion needs at least one run".into()));
    };
    let n = runs.len() as f64;
    let mut per_sample = Vec::with_capacity(first.len());
    for (i, p) in first.iter().enumerate() {
        let mut centres = Vec::with_capacity(runs.len());
        for run in runs {
            let q = run.get(i).filter(|q| q.id == p.id).ok_or_else(|| Error::Input(format!("runs disagree on sample {i}")))?;
            let top = q.windows.first().ok_or_else(|| Error::Input(format!("sample {} has no windows", q.id)))?;
            centres.push(top.span.center());
        }
        let mean = centres.iter().sum::<f64>() / n;
        let var = centres.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
        per_sample.push(SampleDispersion {
            id: p.id.clone(),
            top1_center_variance: var,
        });
    }
    let mean = if per_sample.is_empty() {
        0.0
    } else {
        per_sample.iter().map(|s| s.top1_center_variance).sum::<f64>() / per_sample.len() as f64
    };
    Ok(DispersionSummary {
        seeds: runs.len(),
        mean_top1_center_variance: mean,
        per_sample,
    })
}

/// Random-span inference with seeds `0..n`.
pub fn seed_sweep<T: Real>(model: &Model<T>, samples: &[Sample], n: usize) -> Result<(Vec<Vec<Prediction>>, DispersionSummary)> {
    if n == 0 {
        return Err(Error::InvalidArgument("seed sweep needs at least one seed".into()));
    }
    let runs = (0..n as u64)
        .map(|seed| predict_all(model, samples, Some(seed)))
        .collect::<Result<Vec<_>>>()?;
    let summary = dispersion(&runs)?;
    Ok((runs, summary))
}
