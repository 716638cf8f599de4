//! Binary checkpoints: a magic line, a JSON header line, then every tensor as
//! little-endian `f32` in header order (parameters, first moments, second
//! moments). Files are written to a temporary sibling and renamed into place.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamStore;

const MAGIC: &str = "SPANLOC-CKPT 1";

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Array2<f32>>,
    pub v: Vec<Array2<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        AdamState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub map_avg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model<f32>,
    pub optimizer: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub best: Option<BestRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    model: ModelConfig,
    epoch: usize,
    step: u64,
    best: Option<BestRecord>,
    tensors: Vec<TensorInfo>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let params = &self.model.params;
        let header = Header {
            config: self.config.clone(),
            model: self.model.config.clone(),
            epoch: self.epoch,
            step: self.optimizer.step,
            best: self.best,
            tensors: params
                .names()
                .iter()
                .zip(params.values())
                .map(|(n, v)| TensorInfo {
                    name: n.clone(),
                    rows: v.nrows(),
                    cols: v.ncols(),
                })
                .collect(),
        };
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            writeln!(w, "{MAGIC}")?;
            serde_json::to_writer(&mut w, &header).map_err(|e| Error::Checkpoint(e.to_string()))?;
            w.write_all(b"\n")?;
            for group in [params.values(), &self.optimizer.m[..], &self.optimizer.v[..]] {
                for t in group {
                    for &x in t.iter() {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
            }
            w.flush()?;
            w.get_ref().sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        line.clear();
        r.read_line(&mut line)?;
        let header: Header = serde_json::from_str(&line).map_err(|e| bad(&e.to_string()))?;

        let read_group = |r: &mut BufReader<File>| -> Result<Vec<Array2<f32>>> {
            header
                .tensors
                .iter()
                .map(|t| {
                    let mut buf = vec![0u8; t.rows * t.cols * 4];
                    r.read_exact(&mut buf).map_err(|_| bad("truncated tensor data"))?;
                    let vals = buf
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    Ok(Array2::from_shape_vec((t.rows, t.cols), vals).expect("sized"))
                })
                .collect()
        };
        let values = read_group(&mut r)?;
        let m = read_group(&mut r)?;
        let v = read_group(&mut r)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }

        let mut params = ParamStore::new();
        for (t, val) in header.tensors.iter().zip(values) {
            params.insert(&t.name, val);
        }
        Ok(Checkpoint {
            config: header.config,
            model: Model {
                config: header.model,
                params,
            },
            optimizer: AdamState { step: header.step, m, v },
            epoch: header.epoch,
            best: header.best,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = RunConfig::tiny();
        let model = Model::<f32>::new(cfg.model_config(), 5).unwrap();
        let mut opt = AdamState::new(&model.params);
        opt.step = 17;
        opt.m[0][[0, 0]] = f32::MIN_POSITIVE;
        opt.v[1][[0, 0]] = 1.0e-30;
        let ck = Checkpoint {
            config: cfg,
            model,
            optimizer: opt,
            epoch: 3,
            best: Some(BestRecord { epoch: 2, map_avg: 0.123456789 }),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert!(!dir.path().join("a.tmp").exists());
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        std::fs::write(&p, "hello\n").unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Checkpoint(_))));

        let cfg = RunConfig::tiny();
        let model = Model::<f32>::new(cfg.model_config(), 5).unwrap();
        let ck = Checkpoint {
            optimizer: AdamState::new(&model.params),
            config: cfg,
            model,
            epoch: 0,
            best: None,
        };
        ck.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Checkpoint(_))));
    }
}
