//! Synthetic moment-localization data and the JSONL record formats.
//!
//! Each sample is a sequence of unit-Gaussian background features with one to
//! three non-overlapping activity spans. Every snippet inside a span carries a
//! fixed per-pattern signature vector of norm `snr`. In grounding mode all
//! spans of a sample share one pattern and the query tokens encode it; in
//! classification mode (`tal_mode`) every span draws its own pattern, which is
//! also its class label, and there are no query tokens.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::span::Span;

/// One localization instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    #[serde(with = "matrix_rows")]
    pub features: Array2<f64>,
    #[serde(default, with = "opt_matrix_rows")]
    pub query_tokens: Option<Array2<f64>>,
    pub gt_spans: Vec<Span>,
    #[serde(default)]
    pub saliency: Option<Vec<f64>>,
    pub num_classes: usize,
    /// Pattern index of each ground-truth span. Used as the class label when
    /// `num_classes > 0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_labels: Option<Vec<usize>>,
}

impl Sample {
    pub fn n_v(&self) -> usize {
        self.features.nrows()
    }

    pub fn c_v(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_l(&self) -> usize {
        self.query_tokens.as_ref().map_or(0, |q| q.nrows())
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.n_v() < 2 {
            return Err(format!("sample {}: need at least 2 snippets, got {}", self.id, self.n_v()));
        }
        if self.gt_spans.is_empty() {
            return Err(format!("sample {}: no ground-truth spans", self.id));
        }
        if let Some(s) = &self.saliency {
            if s.len() != self.n_v() {
                return Err(format!(
                    "sample {}: saliency has {} entries for {} snippets",
                    self.id,
                    s.len(),
                    self.n_v()
                ));
            }
        }
        if let Some(l) = &self.gt_labels {
            if l.len() != self.gt_spans.len() {
                return Err(format!("sample {}: gt_labels/gt_spans length mismatch", self.id));
            }
            if self.num_classes > 0 && l.iter().any(|&c| c >= self.num_classes) {
                return Err(format!("sample {}: label out of range", self.id));
            }
        }
        Ok(())
    }
}

/// One ranked window `[start, end, score]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct Window {
    pub span: Span,
    pub score: f64,
}

impl TryFrom<[f64; 3]> for Window {
    type Error = Error;

    fn try_from(v: [f64; 3]) -> Result<Self> {
        Ok(Window {
            span: Span::new(v[0], v[1])?,
            score: v[2],
        })
    }
}

impl From<Window> for [f64; 3] {
    fn from(w: Window) -> Self {
        [w.span.start(), w.span.end(), w.score]
    }
}

/// Model output for one sample; windows sorted by descending score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub windows: Vec<Window>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency_scores: Option<Vec<f64>>,
}

/// Generator configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_samples: usize,
    pub n_v: usize,
    pub c_v: usize,
    pub c_l: usize,
    pub n_l: usize,
    pub num_patterns: usize,
    /// Inclusive `[min, max]` number of spans per sample.
    pub spans_per_sample: [usize; 2],
    pub snr: f64,
    pub seed: u64,
    /// Classification mode: per-span labels, no query tokens.
    #[serde(default)]
    pub tal_mode: bool,
    /// Seeds the pattern signatures and query codes. Splits of one task share
    /// it and differ in `seed`.
    #[serde(default)]
    pub pattern_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_samples: 100,
            n_v: 64,
            c_v: 32,
            c_l: 32,
            n_l: 4,
            num_patterns: 8,
            spans_per_sample: [1, 3],
            snr: 4.0,
            seed: 0,
            tal_mode: false,
            pattern_seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("dataset config: {m}")));
        if self.num_samples == 0 || self.n_v < 2 || self.c_v == 0 || self.num_patterns == 0 {
            return bad("counts must be positive and n_v >= 2");
        }
        if !self.tal_mode && (self.c_l == 0 || self.n_l == 0) {
            return bad("grounding mode needs c_l > 0 and n_l > 0");
        }
        let [lo, hi] = self.spans_per_sample;
        if lo == 0 || lo > hi {
            return bad("spans_per_sample must satisfy 1 <= min <= max");
        }
        if !(self.snr.is_finite() && self.snr > 0.0) {
            return bad("snr must be positive");
        }
        Ok(())
    }

    /// Span widths are drawn uniformly in snippets from this inclusive range.
    pub fn width_range(&self) -> (usize, usize) {
        let lo = (self.n_v / 16).max(1);
        let hi = (self.n_v / 4).max(lo + 1).min(self.n_v);
        (lo, hi)
    }
}

/// Per-pattern constants shared by every sample of a dataset.
#[derive(Clone, Debug)]
pub struct Patterns {
    /// `[num_patterns × c_v]`, each row of norm `snr`.
    pub signatures: Array2<f64>,
    /// One `[n_l × c_l]` code per pattern.
    pub query_codes: Vec<Array2<f64>>,
}

const QUERY_NOISE: f64 = 0.1;
const MAX_PLACEMENT_TRIES: usize = 1000;

/// Pattern constants for a config. Depends only on `pattern_seed` and widths.
pub fn patterns(cfg: &DatasetConfig) -> Patterns {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pattern_seed ^ 0x5eed_0f_9a77e);
    let mut signatures = Array2::zeros((cfg.num_patterns, cfg.c_v));
    for mut row in signatures.rows_mut() {
        row.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
        let norm = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v * cfg.snr / norm);
    }
    let query_codes = (0..cfg.num_patterns)
        .map(|_| Array2::from_shape_fn((cfg.n_l, cfg.c_l), |_| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Patterns {
        signatures,
        query_codes,
    }
}

/// Deterministic synthetic dataset.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let pats = patterns(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (wmin, wmax) = cfg.width_range();
    let n_v = cfg.n_v;
    let mut out = Vec::with_capacity(cfg.num_samples);

    for index in 0..cfg.num_samples {
        let count = rng.gen_range(cfg.spans_per_sample[0]..=cfg.spans_per_sample[1]);
        let mut placed: Vec<(usize, usize)> = Vec::with_capacity(count);
        let mut tries = 0;
        while placed.len() < count {
            tries += 1;
            if tries > MAX_PLACEMENT_TRIES {
                return Err(Error::Generation {
                    index,
                    reason: format!("could not place {count} non-overlapping spans of width {wmin}..={wmax} in {n_v} snippets"),
                });
            }
            let w = rng.gen_range(wmin..=wmax);
            if w > n_v {
                continue;
            }
            let s = rng.gen_range(0..=n_v - w);
            let e = s + w;
            if placed.iter().all(|&(a, b)| e <= a || s >= b) {
                placed.push((s, e));
            }
        }
        placed.sort_unstable();

        let labels: Vec<usize> = if cfg.tal_mode {
            (0..count).map(|_| rng.gen_range(0..cfg.num_patterns)).collect()
        } else {
            vec![rng.gen_range(0..cfg.num_patterns); count]
        };

        let mut features = Array2::from_shape_fn((n_v, cfg.c_v), |_| rng.sample::<f64, _>(StandardNormal));
        let mut saliency = vec![0.0; n_v];
        for (&(s, e), &pat) in placed.iter().zip(&labels) {
            let sig = pats.signatures.row(pat);
            for i in s..e {
                let mut row = features.row_mut(i);
                row += &sig;
                saliency[i] = 1.0;
            }
        }

        let query_tokens = if cfg.tal_mode {
            None
        } else {
            let code = &pats.query_codes[labels[0]];
            Some(code.mapv(|v| v + QUERY_NOISE * rng.sample::<f64, _>(StandardNormal)))
        };

        let gt_spans = placed
            .iter()
            .map(|&(s, e)| Span::new(s as f64 / n_v as f64, e as f64 / n_v as f64))
            .collect::<Result<Vec<_>>>()?;

        out.push(Sample {
            id: format!("s{}-{index:06}", cfg.seed),
            features,
            query_tokens,
            gt_spans,
            saliency: Some(saliency),
            num_classes: if cfg.tal_mode { cfg.num_patterns } else { 0 },
            gt_labels: Some(labels),
        });
    }
    Ok(out)
}

/// Shuffled copy of `0..n` from a seeded stream.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Records stored one per JSONL line.
pub trait JsonlRecord: Serialize + DeserializeOwned {
    const REQUIRED: &'static [&'static str];

    fn check(&self) -> std::result::Result<(), String> {
        Ok(())
    }
}

impl JsonlRecord for Sample {
    const REQUIRED: &'static [&'static str] = &["id", "features", "gt_spans", "num_classes"];

    fn check(&self) -> std::result::Result<(), String> {
        self.validate()
    }
}

impl JsonlRecord for Prediction {
    const REQUIRED: &'static [&'static str] = &["id", "windows"];
}

pub fn write_jsonl<R: JsonlRecord>(records: &[R], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Input(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: JsonlRecord>(path: &Path) -> Result<Vec<R>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| parse_err("expected a JSON object".into()))?;
        for field in R::REQUIRED {
            if !obj.contains_key(*field) {
                return Err(Error::Schema {
                    path: path.to_path_buf(),
                    line: lineno,
                    field: field.to_string(),
                });
            }
        }
        let rec: R = serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
        rec.check().map_err(parse_err)?;
        out.push(rec);
    }
    Ok(out)
}

mod matrix_rows {
    use ndarray::Array2;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(rows).map_err(D::Error::custom)
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Array2<f64>, String> {
        let n = rows.len();
        let c = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != c) {
            return Err("ragged matrix rows".into());
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Array2::from_shape_vec((n, c), flat).map_err(|e| e.to_string())
    }
}

mod opt_matrix_rows {
    use ndarray::Array2;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<Array2<f64>>, s: S) -> Result<S::Ok, S::Error> {
        match m {
            Some(m) => super::matrix_rows::serialize(m, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Array2<f64>>, D::Error> {
        let rows = Option::<Vec<Vec<f64>>>::deserialize(d)?;
        match rows {
            None => Ok(None),
            Some(r) if r.is_empty() => Ok(None),
            Some(r) => super::matrix_rows::from_rows(r).map(Some).map_err(D::Error::custom),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> DatasetConfig {
        DatasetConfig {
            num_samples: 100,
            n_v: 64,
            c_v: 16,
            c_l: 8,
            n_l: 3,
            num_patterns: 6,
            spans_per_sample: [1, 3],
            snr: 4.0,
            seed,
            tal_mode: false,
            pattern_seed: 0,
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_dataset(&small_cfg(7)).unwrap();
        let b = generate_dataset(&small_cfg(7)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_dataset(&small_cfg(8)).unwrap();
        assert_ne!(a[0].features, c[0].features);
    }

    #[test]
    fn spans_respect_constraints() {
        for s in generate_dataset(&small_cfg(3)).unwrap() {
            assert!((1..=3).contains(&s.gt_spans.len()));
            s.validate().unwrap();
            for (i, a) in s.gt_spans.iter().enumerate() {
                assert!(a.width() >= 1.0 / 64.0 - 1e-12);
                for b in &s.gt_spans[i + 1..] {
                    assert_eq!(a.intersection_len(b), 0.0, "overlap in {}", s.id);
                }
            }
            let sal = s.saliency.as_ref().unwrap();
            for (i, &v) in sal.iter().enumerate() {
                let mid = (i as f64 + 0.5) / 64.0;
                let inside = s.gt_spans.iter().any(|g| g.contains(mid));
                assert_eq!(v, if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn planted_signal_raises_feature_norm() {
        for s in generate_dataset(&small_cfg(11)).unwrap() {
            let sal = s.saliency.as_ref().unwrap();
            let (mut ins, mut ni, mut outs, mut no) = (0.0, 0, 0.0, 0);
            for (i, row) in s.features.rows().into_iter().enumerate() {
                let n = row.dot(&row).sqrt();
                if sal[i] > 0.5 {
                    ins += n;
                    ni += 1;
                } else {
                    outs += n;
                    no += 1;
                }
            }
            if no > 0 {
                assert!(ins / ni as f64 > outs / no as f64, "sample {}", s.id);
            }
        }
    }

    #[test]
    fn infeasible_config_names_sample() {
        let cfg = DatasetConfig {
            n_v: 4,
            spans_per_sample: [5, 5],
            num_samples: 5,
            ..small_cfg(1)
        };
        match generate_dataset(&cfg) {
            Err(Error::Generation { index, .. }) => assert_eq!(index, 0),
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn tal_mode_has_labels_and_no_query() {
        let cfg = DatasetConfig {
            tal_mode: true,
            pattern_seed: 0,
            ..small_cfg(2)
        };
        for s in generate_dataset(&cfg).unwrap() {
            assert!(s.query_tokens.is_none());
            assert_eq!(s.num_classes, 6);
            assert_eq!(s.gt_labels.as_ref().unwrap().len(), s.gt_spans.len());
        }
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");

        write_jsonl::<Sample>(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
        assert!(read_jsonl::<Sample>(&path).unwrap().is_empty());

        let data = generate_dataset(&DatasetConfig {
            num_samples: 3,
            ..small_cfg(5)
        })
        .unwrap();
        write_jsonl(&data, &path).unwrap();
        assert_eq!(read_jsonl::<Sample>(&path).unwrap(), data);

        let pred = Prediction {
            id: "a".into(),
            windows: vec![Window {
                span: Span::new(0.1, 0.4).unwrap(),
                score: 0.9,
            }],
            saliency_scores: Some(vec![0.1, 1.0 / 3.0]),
        };
        write_jsonl(std::slice::from_ref(&pred), &path).unwrap();
        assert_eq!(read_jsonl::<Prediction>(&path).unwrap(), vec![pred]);

        std::fs::write(&path, "{\"id\":\"a\",\"windows\":[]}\n{not json\n").unwrap();
        match read_jsonl::<Prediction>(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "{\"id\":\"a\"}\n").unwrap();
        match read_jsonl::<Prediction>(&path) {
            Err(Error::Schema { field, line, .. }) => {
                assert_eq!(field, "windows");
                assert_eq!(line, 1);
            }
            other => panic!("{other:?}"),
        }
    }
}
