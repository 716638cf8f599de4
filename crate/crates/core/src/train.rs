//! Training loop: AdamW with global-norm clipping, deterministic per-epoch
//! random streams, per-epoch validation, JSONL logging and checkpointing.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use crate::autograd::Graph;
use crate::checkpoint::{AdamState, BestRecord, Checkpoint};
use crate::config::{OptimConfig, RunConfig};
use crate::data::{generate_dataset, Sample};
use crate::denoise::{make_noisy_proposals, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::infer::predict_all;
use crate::loss::{build_loss, sample_saliency_pairs, saliency_labels_from_spans, LossBreakdown, SampleTargets};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{Model, ProposalPlan};
use crate::nn::ParamStore;

/// Random stream for one epoch, independent of how many epochs ran before.
pub(crate) fn epoch_rng(cfg: &RunConfig, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ cfg.noise.seed.rotate_left(32));
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// One AdamW update with decoupled weight decay.
pub fn adamw_step(params: &mut ParamStore<f32>, grads: &[Array2<f32>], state: &mut AdamState, o: &OptimConfig) {
    state.step += 1;
    let t = state.step as i32;
    let b1 = o.beta1 as f32;
    let b2 = o.beta2 as f32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = o.lr as f32;
    let wd = o.weight_decay as f32;
    let eps = o.eps as f32;
    for (((p, g), m), v) in params
        .values_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * (mh / (vh.sqrt() + eps) + wd * *p);
        });
    }
}

/// Rescales `grads` so their global norm is at most `clip`; returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut [Array2<f32>], clip: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if clip > 0.0 && norm > clip {
        let k = (clip / norm) as f32;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * k);
        }
    }
    norm
}

/// Per-sample loss and parameter gradients (added into `acc`).
pub(crate) fn sample_step(
    model: &Model<f32>,
    cfg: &RunConfig,
    sched: Option<&DiffusionSchedule>,
    sample: &Sample,
    rng: &mut ChaCha8Rng,
    acc: &mut [Array2<f32>],
) -> Result<LossBreakdown> {
    let mode = cfg.class_mode();
    let denoise = if cfg.noise.enabled {
        Some(make_noisy_proposals(&sample.gt_spans, &cfg.noise, sched, rng)?)
    } else {
        None
    };
    let labels = match &sample.saliency {
        Some(s) => s.clone(),
        None => saliency_labels_from_spans(&sample.gt_spans, sample.n_v()),
    };
    let pairs = sample_saliency_pairs(&labels, &sample.gt_spans, rng);

    let mut g = Graph::new();
    let plan = ProposalPlan {
        denoise: denoise.as_ref(),
        ..ProposalPlan::default()
    };
    let out = model.forward_graph(&mut g, sample, plan, Some(rng))?;
    let targets = SampleTargets {
        gt: &sample.gt_spans,
        labels: sample.gt_labels.as_deref(),
        n_learned: cfg.decoder.n_queries,
        denoise: denoise.as_ref().map_or(&[][..], |d| &d.targets[..]),
        saliency_pairs: &pairs,
    };
    let (total, bd, _) = build_loss(&mut g, &out.layers, Some(out.saliency), &targets, &cfg.loss, mode, None)?;
    let grads = g.backward(total);
    for (idx, gr) in g.param_grads(&grads) {
        acc[idx] += &gr;
    }
    Ok(bd)
}

/// What a training run produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Option<BestRecord>,
    /// One flat record per epoch run in this call.
    pub log: Vec<Value>,
}

fn log_record(epoch: usize, loss: &LossBreakdown, skipped: usize, grad_norm: f64, val: &EvalReport) -> Value {
    let mut m = Map::new();
    m.insert("epoch".into(), epoch.into());
    m.insert("loss".into(), loss.total.into());
    m.insert("loss_l1".into(), loss.l1.into());
    m.insert("loss_giou".into(), loss.giou.into());
    m.insert("loss_cls".into(), loss.cls.into());
    m.insert("loss_denoise_l1".into(), loss.denoise_l1.into());
    m.insert("loss_denoise_giou".into(), loss.denoise_giou.into());
    m.insert("loss_denoise_cls".into(), loss.denoise_cls.into());
    m.insert("loss_saliency".into(), loss.saliency.into());
    m.insert("saliency_skipped".into(), skipped.into());
    m.insert("grad_norm".into(), grad_norm.into());
    if let Value::Object(v) = val.to_json() {
        for (k, x) in v {
            m.insert(format!("val_{k}"), x);
        }
    }
    Value::Object(m)
}

/// Output locations of a run directory.
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        RunPaths { dir: dir.to_path_buf() }
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join("log.jsonl")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
}

/// Training and validation splits generated from the config.
pub fn generate_splits(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    Ok((generate_dataset(&cfg.train_data_config())?, generate_dataset(&cfg.val_data_config())?))
}

/// Fresh initial state for a run.
pub fn initial_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let model = Model::<f32>::new(cfg.model_config(), cfg.seed)?;
    Ok(Checkpoint {
        config: cfg.clone(),
        optimizer: AdamState::new(&model.params),
        model,
        epoch: 0,
        best: None,
    })
}

/// Trains from `start` (a fresh or resumed checkpoint) until
/// `start.config.optim.epochs` epochs are complete. With `out` set, the log is
/// appended to and `last`/`best` checkpoints are written there.
pub fn train(start: Checkpoint, train: &[Sample], val: &[Sample], out: Option<&Path>) -> Result<TrainOutcome> {
    let cfg = start.config.clone();
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }
    let paths = out.map(RunPaths::new);
    let mut log_file = match &paths {
        Some(p) => {
            std::fs::create_dir_all(&p.dir)?;
            std::fs::write(p.config(), cfg.to_toml())?;
            let f = if start.epoch == 0 {
                File::create(p.log())?
            } else {
                OpenOptions::new().append(true).create(true).open(p.log())?
            };
            Some(BufWriter::new(f))
        }
        None => None,
    };

    let Checkpoint {
        mut model,
        optimizer: mut opt,
        epoch: done,
        mut best,
        ..
    } = start;
    let sched = model.schedule()?;
    let mut log = Vec::new();
    let bs = cfg.optim.batch_size;

    for epoch in done + 1..=cfg.optim.epochs {
        let mut rng = epoch_rng(&cfg, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut skipped = 0usize;
        let mut last_norm = 0.0;
        for batch in order.chunks(bs) {
            let mut acc = model.params.zeros_like();
            for &i in batch {
                let bd = sample_step(&model, &cfg, sched.as_ref(), &train[i], &mut rng, &mut acc).map_err(|e| match e {
                    Error::Numeric { term } => Error::Divergence { epoch, term },
                    other => other,
                })?;
                skipped += bd.saliency_skipped as usize;
                sum.add(&bd);
            }
            let k = 1.0 / batch.len() as f32;
            for a in acc.iter_mut() {
                a.mapv_inplace(|x| x * k);
            }
            last_norm = clip_global_norm(&mut acc, cfg.optim.grad_clip);
            if !last_norm.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    term: "gradient".into(),
                });
            }
            adamw_step(&mut model.params, &acc, &mut opt, &cfg.optim);
        }
        sum.scale(1.0 / train.len() as f64);
        sum.saliency_skipped = skipped > 0;

        let preds = predict_all(&model, val, None)?;
        let report = evaluate(&preds, val, &cfg.eval)?;
        let rec = log_record(epoch, &sum, skipped, last_norm, &report);
        log::info!("epoch {epoch}: loss {:.4} val map_avg {:.4}", sum.total, report.map_avg);
        if let Some(w) = log_file.as_mut() {
            serde_json::to_writer(&mut *w, &rec).map_err(|e| Error::Input(e.to_string()))?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        log.push(rec);

        let improved = best.is_none_or(|b| report.map_avg > b.map_avg);
        if improved {
            best = Some(BestRecord {
                epoch,
                map_avg: report.map_avg,
            });
        }
        if let Some(p) = &paths {
            let ck = Checkpoint {
                config: cfg.clone(),
                model: model.clone(),
                optimizer: opt.clone(),
                epoch,
                best,
            };
            ck.save(&p.last())?;
            if improved {
                ck.save(&p.best())?;
            }
        }
    }

    Ok(TrainOutcome {
        last: Checkpoint {
            config: cfg.clone(),
            model,
            optimizer: opt,
            epoch: cfg.optim.epochs.max(done),
            best,
        },
        best,
        log,
    })
}

/// Reads a training log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<Map<String, Value>>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        match v {
            Value::Object(m) => out.push(m),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "expected a JSON object".into(),
                })
            }
        }
    }
    Ok(out)
}
