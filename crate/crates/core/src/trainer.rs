//! Batching and the optimisation loop.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tse_tensor::{AdamW, AdamWState, Graph, Grads};

use crate::checkpoint::{config_hash, save_checkpoint, Checkpoint, CheckpointHeader};
use crate::data::{slot_seed, prepare, DataSource, Mode, Prepared, Sampling};
use crate::error::{io_err, Error, Result};
use crate::eval::masked_accuracy;
use crate::frontend::Frontend;
use crate::model::{token_loss, Model, ModelConfig};
use crate::tokenizer::Codebook;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub snr_min: f64,
    pub snr_max: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: u64,
    /// Score the probe set every this many steps; 0 never.
    pub probe_every: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub mode: Mode,
    /// Stop once mean probe accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            lr: 5e-4,
            weight_decay: 0.01,
            snr_min: 0.0,
            snr_max: 5.0,
            seed: 0,
            checkpoint_every: 500,
            probe_every: 100,
            clip_norm: 5.0,
            mode: Mode::Standard,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("train.lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be >= 1".into()));
        }
        if !(0.0 <= self.snr_min && self.snr_min <= self.snr_max && self.snr_max <= 5.0) {
            return Err(Error::Config(format!(
                "train SNR range [{}, {}] must lie within [0, 5] dB",
                self.snr_min, self.snr_max
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) || self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return Err(Error::Config("train.weight_decay and train.clip_norm must be >= 0".into()));
        }
        Ok(())
    }
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub wall_ms: u64,
    /// Digest of the per-slot seeds used for this step's batch.
    pub rng_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_accuracy: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
}

impl RunLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

/// Builds batch `step`: `cfg.batch` examples drawn from `data`.
pub fn make_batch(data: &DataSource, cfg: &TrainConfig, step: u64, fe: &Frontend, cb: &Codebook) -> Result<Vec<Prepared>> {
    (0..cfg.batch)
        .map(|slot| {
            let spec = data.draw(cfg.seed, step, slot, cfg.batch, (cfg.snr_min, cfg.snr_max))?;
            prepare(&data.synthesize(&spec)?, cfg.mode, fe, cb)
        })
        .collect()
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub model: Model,
    pub opt: AdamW,
    pub state: AdamWState,
    fe: &'a Frontend,
    cb: &'a Codebook,
    codebook_hash: String,
    data: &'a DataSource,
    cache: HashMap<usize, Prepared>,
}

/// Why a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stop {
    Steps,
    TargetAccuracy,
}

impl<'a> Trainer<'a> {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, fe: &'a Frontend, cb: &'a Codebook, data: &'a DataSource) -> Result<Self> {
        let model = Model::new(model_cfg)?;
        let state = AdamWState::new(&model.store);
        Self::assemble(model, state, cfg, fe, cb, data)
    }

    /// Continues from a checkpoint written by [`Trainer::save`].
    pub fn resume(ckpt: Checkpoint, fe: &'a Frontend, cb: &'a Codebook, data: &'a DataSource) -> Result<Self> {
        let hash = cb.hash();
        if ckpt.header.codebook_hash != hash {
            return Err(Error::HashMismatch {
                what: "codebook",
                expected: ckpt.header.codebook_hash,
                actual: hash,
            });
        }
        if ckpt.header.frontend != *fe.config() {
            return Err(Error::Config("checkpoint was trained with a different frontend config".into()));
        }
        let state = ckpt
            .optimizer
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state to resume from".into()))?;
        Self::assemble(ckpt.model, state, ckpt.header.train, fe, cb, data)
    }

    fn assemble(model: Model, state: AdamWState, cfg: TrainConfig, fe: &'a Frontend, cb: &'a Codebook, data: &'a DataSource) -> Result<Self> {
        cfg.validate()?;
        let mc = &model.cfg;
        if mc.n_layers_in != cb.layers() || mc.k != cb.k {
            return Err(Error::Config(format!(
                "model expects {} layers over K = {}, codebook has {} over K = {}",
                mc.n_layers_in,
                mc.k,
                cb.layers(),
                cb.k
            )));
        }
        if mc.hybrid != (cfg.mode == Mode::Hybrid) {
            return Err(Error::Config("model.hybrid must be set exactly when train.mode is hybrid".into()));
        }
        if mc.hybrid && mc.feat_dim != fe.config().feat_dim {
            return Err(Error::Config("model.feat_dim must equal frontend.feat_dim in hybrid mode".into()));
        }
        let opt = AdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamW::default()
        };
        Ok(Self {
            cfg,
            model,
            opt,
            state,
            fe,
            cb,
            codebook_hash: cb.hash(),
            data,
            cache: HashMap::new(),
        })
    }

    pub fn step(&self) -> u64 {
        self.state.step
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            model: self.model.cfg.clone(),
            frontend: self.fe.config().clone(),
            train: self.cfg.clone(),
            codebook_hash: self.codebook_hash.clone(),
            config_hash: config_hash(&self.model.cfg, self.fe.config(), &self.cfg),
            step: self.step(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.header(), &self.model, Some(&self.state))
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        crate::checkpoint::encode_checkpoint(&self.header(), &self.model, Some(&self.state))
    }

    /// Batch for the current step; fixed mixture lists are prepared once.
    fn batch(&mut self, step: u64) -> Result<Vec<Prepared>> {
        let Sampling::Fixed(specs) = &self.data.sampling else {
            return make_batch(self.data, &self.cfg, step, self.fe, self.cb);
        };
        let n = specs.len();
        let mut out = Vec::with_capacity(self.cfg.batch);
        for slot in 0..self.cfg.batch {
            let i = ((step as usize).wrapping_mul(self.cfg.batch).wrapping_add(slot)) % n;
            if !self.cache.contains_key(&i) {
                let spec = self.data.draw(self.cfg.seed, step, slot, self.cfg.batch, (self.cfg.snr_min, self.cfg.snr_max))?;
                let p = prepare(&self.data.synthesize(&spec)?, self.cfg.mode, self.fe, self.cb)?;
                self.cache.insert(i, p);
            }
            out.push(self.cache[&i].clone());
        }
        Ok(out)
    }

    /// Mean loss and its parameter gradients over `batch`.
    pub fn loss_and_grads(&self, batch: &[Prepared]) -> Result<(f64, Grads)> {
        let mut grads = Grads::zeros_like(&self.model.store);
        let mut total = 0.0;
        for p in batch {
            let mut g = Graph::new();
            let logits = self.model.logits(&mut g, p.mix_input(), Some(&p.mix_keep), &p.reference, Some(&p.ref_keep))?;
            let loss = token_loss(&mut g, &logits, &p.target, &p.loss_mask)?;
            total += g.value(loss).item();
            grads.merge(&g.backward(loss, &self.model.store)?);
        }
        let scale = 1.0 / batch.len() as f64;
        grads.scale(scale);
        Ok((total * scale, grads))
    }

    /// One optimiser step. On a non-finite loss or gradient the model is left untouched.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let started = Instant::now();
        let step = self.step();
        let batch = self.batch(step)?;
        let (loss, mut grads) = self.loss_and_grads(&batch).map_err(|e| match e {
            Error::Tensor(t) => Error::Diverged {
                step,
                reason: t.to_string(),
            },
            other => other,
        })?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("loss {loss}, finite gradients: {}", grads.is_finite()),
            });
        }
        let (grad_norm, clipped) = if self.cfg.clip_norm > 0.0 {
            grads.clip_global_norm(self.cfg.clip_norm)
        } else {
            (grads.global_norm(), false)
        };
        self.opt.step(&mut self.model.store, &grads, &mut self.state)?;
        self.model.store.round_to_f32();
        self.state.round_to_f32();
        let seeds: String = (0..self.cfg.batch)
            .map(|s| format!("{:016x}", slot_seed(self.cfg.seed, step, s)))
            .collect();
        Ok(StepRecord {
            step,
            loss,
            grad_norm,
            clipped,
            wall_ms: started.elapsed().as_millis() as u64,
            rng_digest: crate::tokenizer::hex_digest(seeds.as_bytes())[..16].to_string(),
            probe_accuracy: None,
        })
    }

    /// Per-layer token accuracy of argmax outputs against the clean labels.
    pub fn probe(&self, samples: &[Prepared]) -> Result<Vec<f64>> {
        probe_accuracy(&self.model, samples)
    }

    /// Trains until `cfg.steps` (or the accuracy target). Writes checkpoints
    /// and `run.jsonl` under `out_dir` when given. On divergence the last
    /// good state is saved as `last_good.tslm` and the error returned.
    pub fn run(&mut self, out_dir: Option<&Path>, probe: &[Prepared], log: &mut RunLog) -> Result<Stop> {
        let mut jsonl = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(io_err(dir))?;
                let p = dir.join("run.jsonl");
                Some((
                    std::fs::OpenOptions::new().create(true).append(true).open(&p).map_err(io_err(&p))?,
                    p,
                ))
            }
            None => None,
        };
        let mut stop = Stop::Steps;
        while self.step() < self.cfg.steps {
            let mut rec = match self.train_step() {
                Ok(r) => r,
                Err(e @ Error::Diverged { .. }) => {
                    if let Some(dir) = out_dir {
                        self.save(dir.join("last_good.tslm"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let done = self.step();
            if self.cfg.probe_every > 0 && !probe.is_empty() && (done.is_multiple_of(self.cfg.probe_every) || done == self.cfg.steps) {
                let acc = self.probe(probe)?;
                let mean = acc.iter().sum::<f64>() / acc.len() as f64;
                rec.probe_accuracy = Some(acc);
                if self.cfg.target_accuracy.is_some_and(|t| mean >= t) {
                    stop = Stop::TargetAccuracy;
                }
            }
            if let Some((file, p)) = jsonl.as_mut() {
                let line = serde_json::to_string(&rec)? + "\n";
                file.write_all(line.as_bytes()).map_err(io_err(p.as_path()))?;
            }
            log.records.push(rec);
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_every > 0 && done.is_multiple_of(self.cfg.checkpoint_every) {
                    self.save(dir.join(format!("step_{done:06}.tslm")))?;
                }
            }
            if stop == Stop::TargetAccuracy {
                break;
            }
        }
        if let Some(dir) = out_dir {
            self.save(dir.join("final.tslm"))?;
        }
        Ok(stop)
    }
}

pub fn probe_accuracy(model: &Model, samples: &[Prepared]) -> Result<Vec<f64>> {
    let n = model.cfg.n_layers_in;
    let (mut hits, mut total) = (vec![0usize; n], 0usize);
    for p in samples {
        let out = model.extract_tokens(p.mix_input(), Some(&p.mix_keep), &p.reference, Some(&p.ref_keep))?;
        let (h, t) = masked_accuracy(&out, &p.target, &p.loss_mask)?;
        hits.iter_mut().zip(&h).for_each(|(a, b)| *a += b);
        total += t;
    }
    if total == 0 {
        return Err(Error::Metric("probe set has no labelled frames".into()));
    }
    Ok(hits.iter().map(|&h| h as f64 / total as f64).collect())
}
