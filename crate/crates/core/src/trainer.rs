//! Training loop, optimizer, schedule and checkpoints.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::EvalReport;
use crate::model::{count_flops, BatchOutput, ModelConfig, MoembaModel};
use crate::rng::{stream_rng, Stream};
use crate::sigproc::{DatasetSplit, PatchSet};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub weight_decay: f64,
    /// Evaluate the held-out split every this many epochs (0: never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr0: 1e-4,
            lr_min: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            weight_decay: 0.0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.lr0 > 0.0) || self.lr_min < 0.0 || self.lr_min > self.lr0 {
            return Err(Error::Config(format!("need 0 <= lr_min <= lr0 and lr0 > 0, got {} and {}", self.lr_min, self.lr0)));
        }
        let unit = 0.0..1.0;
        if !unit.contains(&self.beta1) || !unit.contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        if self.clip_norm < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("clip norm and weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(πt/T))`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = t.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Mean cross-entropy of `logits[M×G]` against `labels`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (m, g) = (tape.shape(logits)[0], tape.shape(logits)[1]);
    if labels.len() != m {
        return Err(Error::Usage(format!("{m} rows of logits but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= g) {
        return Err(Error::Data(format!("label {bad} out of range for {g} classes")));
    }
    let lse = tape.logsumexp(logits, 1)?;
    let lse = tape.mean(lse)?;
    let mut picked = Vec::with_capacity(m);
    for (r, &l) in labels.iter().enumerate() {
        picked.push(tape.pick(logits, r * g + l)?);
    }
    let target = tape.add_n(&picked)?;
    let target = tape.scale(target, 1.0 / m as f64)?;
    tape.sub(lse, target)
}

/// Cross-entropy plus the mixture layers' auxiliary losses.
pub fn total_loss(tape: &mut Tape, out: &BatchOutput, labels: &[usize]) -> Result<Var> {
    let ce = cross_entropy(tape, out.logits, labels)?;
    tape.add(ce, out.aux)
}

/// Cross-entropy of explicit probability rows, for checking loss identities.
pub fn cross_entropy_probs(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = probs.len() as f64;
    -probs.iter().zip(labels).map(|(p, &l)| p[l].ln()).sum::<f64>() / n
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(model: &MoembaModel) -> Self {
        let zeros: Vec<Tensor> = model.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, model: &mut MoembaModel, grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (i, (_, p)) in model.named_mut().into_iter().enumerate() {
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] + cfg.weight_decay * *w;
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Rescale `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Signal-level accuracy on the held-out split, when evaluated.
    pub val_acc: Option<f64>,
    /// Fraction of routed load per expert, summed over mixture layers.
    pub load_share: Vec<f64>,
    /// Loss of every optimizer step in the epoch.
    #[serde(skip)]
    pub step_losses: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let experts = self.epochs.first().map_or(0, |r| r.load_share.len());
        let mut out = String::from("epoch,lr,train_loss,train_acc,val_acc");
        for i in 0..experts {
            out.push_str(&format!(",load_share_{i}"));
        }
        out.push('\n');
        for r in &self.epochs {
            let val = r.val_acc.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}", r.epoch, r.lr, r.train_loss, r.train_acc, val));
            for s in &r.load_share {
                out.push_str(&format!(",{s}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Patches flattened across recordings, with labels and source ids.
#[derive(Clone, Debug, Default)]
pub struct PatchBank {
    pub patches: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub source_ids: Vec<usize>,
}

impl PatchBank {
    pub fn from_sets(sets: &[PatchSet]) -> Self {
        let mut bank = Self::default();
        for s in sets {
            bank.patches.extend(s.patches.iter().cloned());
            bank.labels.extend(&s.labels);
            bank.source_ids.extend(&s.source_ids);
        }
        bank
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Evaluate `model` on a bank of patches.
pub fn evaluate(model: &MoembaModel, bank: &PatchBank, batch: usize) -> Result<EvalReport> {
    if bank.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let classes = model.config.classes;
    if let Some(&bad) = bank.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Config(format!("data has label {bad} but the model has {classes} classes")));
    }
    let window = bank.patches[0].shape()[0];
    let probs = model.predict(&bank.patches, batch)?;
    EvalReport::from_predictions(
        &probs,
        &bank.labels,
        &bank.source_ids,
        classes,
        model.param_count(),
        count_flops(&model.config, window, model.config.electrodes),
    )
}

/// Model, optimizer state and progress counters.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: MoembaModel,
    pub adam: Adam,
    pub train: TrainConfig,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    /// Free-form configuration echo stored in checkpoints.
    pub config_echo: String,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, train: TrainConfig, seed: u64) -> Result<Self> {
        train.validate()?;
        let model = MoembaModel::new(model_cfg, seed)?;
        let adam = Adam::new(&model);
        Ok(Self { model, adam, train, seed, epoch: 0, step: 0, config_echo: String::new() })
    }

    fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.train.batch_size)
    }

    /// Run one epoch over `bank`, evaluating on `held_out` when scheduled.
    pub fn run_epoch(&mut self, bank: &PatchBank, held_out: Option<&PatchBank>) -> Result<EpochRecord> {
        if bank.is_empty() {
            return Err(Error::Data("training split has no patches".into()));
        }
        let classes = self.model.config.classes;
        if let Some(&bad) = bank.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!("data has label {bad} but the model has {classes} classes")));
        }
        let total_steps = self.steps_per_epoch(bank.len()) * self.train.epochs;
        let mut order: Vec<usize> = (0..bank.len()).collect();
        order.shuffle(&mut stream_rng(self.seed, Stream::Shuffle, self.epoch as u64));

        let experts = self.model.config.experts;
        let mut load = vec![0.0; experts];
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut step_losses = Vec::new();
        let mut lr = self.train.lr0;
        for (b, idx) in order.chunks(self.train.batch_size).enumerate() {
            lr = cosine_lr(self.step as usize, total_steps, self.train.lr0, self.train.lr_min);
            let labels: Vec<usize> = idx.iter().map(|&i| bank.labels[i]).collect();
            let (loss, preds, grads, loads) = {
                let mut tape = Tape::new();
                let vars = self.model.bind(&mut tape);
                let xs: Vec<Var> = idx.iter().map(|&i| tape.constant(bank.patches[i].clone())).collect();
                let mut rng = stream_rng(self.seed, Stream::GateNoise, self.step);
                let out = self.model.forward(&mut tape, &vars, &xs, Some(&mut rng))?;
                let loss = total_loss(&mut tape, &out, &labels)?;
                let value = tape.item(loss);
                if !value.is_finite() {
                    return Err(self.non_finite(b, value));
                }
                let preds: Vec<usize> = tape.value(out.logits).chunks(classes).map(crate::head::argmax).collect();
                let grads = tape.backward(loss)?;
                let grads: Vec<Tensor> = vars.all.iter().map(|&v| grads.tensor(v)).collect();
                (value, preds, grads, out.loads)
            };
            let mut grads = grads;
            if !grads.iter().all(Tensor::is_finite) {
                return Err(self.non_finite(b, loss));
            }
            clip_gradients(&mut grads, self.train.clip_norm);
            self.adam.update(&mut self.model, &grads, lr, &self.train);
            self.step += 1;

            loss_sum += loss * idx.len() as f64;
            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
            step_losses.push(loss);
            for layer in &loads {
                for (acc, l) in load.iter_mut().zip(layer) {
                    *acc += l;
                }
            }
        }
        self.epoch += 1;
        let total_load: f64 = load.iter().sum();
        let load_share = load.iter().map(|l| if total_load > 0.0 { l / total_load } else { 0.0 }).collect();
        let scheduled = self.train.eval_every > 0 && (self.epoch % self.train.eval_every == 0 || self.epoch == self.train.epochs);
        let val_acc = match held_out {
            Some(h) if scheduled && !h.is_empty() => Some(evaluate(&self.model, h, self.train.batch_size)?.total_accuracy),
            _ => None,
        };
        Ok(EpochRecord {
            epoch: self.epoch,
            lr,
            train_loss: loss_sum / bank.len() as f64,
            train_acc: correct as f64 / bank.len() as f64,
            val_acc,
            load_share,
            step_losses,
        })
    }

    fn non_finite(&self, batch: usize, loss: f64) -> Error {
        let norms: Vec<String> = self
            .model
            .named()
            .iter()
            .map(|(n, t)| format!("{n}={:.3e}", t.sum_squares().sqrt()))
            .collect();
        Error::Numerical(format!(
            "non-finite loss {loss} at epoch {} batch {batch}; parameter norms: {}",
            self.epoch + 1,
            norms.join(" ")
        ))
    }

    /// Train the remaining epochs on the split's training side.
    pub fn fit(&mut self, split: &DatasetSplit, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<History> {
        let bank = PatchBank::from_sets(&split.train);
        let held_out = PatchBank::from_sets(&split.test);
        let mut history = History::default();
        while self.epoch < self.train.epochs {
            let rec = self.run_epoch(&bank, Some(&held_out))?;
            on_epoch(&rec);
            history.epochs.push(rec);
        }
        Ok(history)
    }

    /// Checksum of all parameters (FNV-1a over the f64 bit patterns).
    pub fn param_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (_, t) in self.model.named() {
            for x in t.data() {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

const CKPT_MAGIC: &[u8; 4] = b"MEMC";
const CKPT_VERSION: u32 = 1;

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated checkpoint at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u16()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let ndim = self.take(1)?[0] as usize;
        let shape = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    train: TrainConfig,
    seed: u64,
    echo: String,
}

impl Trainer {
    pub fn to_checkpoint(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader { model: self.model.config, train: self.train, seed: self.seed, echo: self.config_echo.clone() };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        buf.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.adam.step.to_le_bytes());
        let named = self.model.named();
        buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in &named {
            put_tensor(&mut buf, name, t);
        }
        for (i, (name, _)) in named.iter().enumerate() {
            put_tensor(&mut buf, &format!("adam.m.{name}"), &self.adam.m[i]);
            put_tensor(&mut buf, &format!("adam.v.{name}"), &self.adam.v[i]);
        }
        Ok(buf)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4).map_err(|_| Error::Format("file too short for a checkpoint".into()))? != CKPT_MAGIC {
            return Err(Error::Format("bad magic number, not a MEMC checkpoint".into()));
        }
        let version = c.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = c.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(c.take(len)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let epoch = c.u64()? as usize;
        let step = c.u64()?;
        let adam_step = c.u64()?;
        let count = c.u32()? as usize;

        let mut trainer = Trainer::new(header.model, header.train, header.seed)?;
        if count != trainer.model.named().len() {
            return Err(Error::Format(format!("checkpoint holds {count} tensors, model expects {}", trainer.model.named().len())));
        }
        for (name, slot) in trainer.model.named_mut() {
            let (got, t) = c.tensor()?;
            if got != name || t.shape() != slot.shape() {
                return Err(Error::Format(format!("checkpoint tensor {got} {:?} does not match {name} {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        for i in 0..count {
            let (_, m) = c.tensor()?;
            let (_, v) = c.tensor()?;
            if m.shape() != trainer.adam.m[i].shape() || v.shape() != trainer.adam.v[i].shape() {
                return Err(Error::Format("optimizer state does not match the model".into()));
            }
            trainer.adam.m[i] = m;
            trainer.adam.v[i] = v;
        }
        if c.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        trainer.adam.step = adam_step;
        trainer.epoch = epoch;
        trainer.step = step;
        trainer.config_echo = header.echo;
        Ok(trainer)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&fs::read(path)?)
    }
}
