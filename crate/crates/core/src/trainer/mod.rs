//! Training loop: curriculum-driven chunking, fixed-duration batches with
//! gradient accumulation, clipping, warmup plus cosine learning rate, and
//! checkpointing.

mod optim;

use std::collections::VecDeque;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss_var, repeats, Vocabulary};
use crate::curriculum::{chunk_recording, seq_len_at, shuffled_order, CurriculumSchedule, TimedTranscript};
use crate::dsp::{compute_log_mel, normalize_with_scope, read_wav, AudioBuffer, NormScope, FRAMES_PER_SECOND};
use crate::encoder::{Bindings, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::manifest::read_manifest;
use crate::numerics::{DType, Graph, NormMode, Tensor, TensorStore};

pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    /// Linear warmup length; 10 % of `total_steps` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    pub total_steps: usize,
    pub clip_norm: f64,
    pub optimizer: OptimizerKind,
    pub optim: OptimizerConfig,
    pub seed: u64,
    /// Seconds of audio per optimizer step.
    pub batch_duration_s: f64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-3,
            warmup_steps: None,
            total_steps: 1000,
            clip_norm: 1.0,
            optimizer: OptimizerKind::AdaptiveMoment,
            optim: OptimizerConfig::default(),
            seed: 1,
            batch_duration_s: 3600.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.total_steps / 10)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if self.warmup() > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup(),
                self.total_steps
            )));
        }
        if !(self.clip_norm > 0.0) || !(self.batch_duration_s > 0.0) {
            return Err(Error::Config("clip_norm and batch_duration_s must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let (w, total) = (cfg.warmup(), cfg.total_steps);
    if step < w {
        return cfg.peak_lr * step as f64 / w as f64;
    }
    if step >= total {
        return if total == w { cfg.peak_lr } else { 0.0 };
    }
    let progress = (step - w) as f64 / (total - w) as f64;
    cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm(grads: &TensorStore) -> f64 {
    grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt()
}

/// Rescales all gradients when their global norm exceeds `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut TensorStore, clip_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip_norm {
        let s = clip_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One normalized recording ready for chunking.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    /// `[T, 80]`, normalized over the whole recording.
    pub mel: Tensor,
    pub transcript: TimedTranscript,
    pub duration_s: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub items: Vec<Utterance>,
}

impl Dataset {
    pub fn from_audio(items: Vec<(String, AudioBuffer, TimedTranscript)>, scope: NormScope) -> Result<Self> {
        let items = items
            .into_iter()
            .map(|(id, audio, transcript)| {
                let mel = normalize_with_scope(&compute_log_mel(&audio)?, scope).into_frames();
                Ok(Utterance {
                    id,
                    mel,
                    duration_s: audio.duration_s(),
                    transcript,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items })
    }

    /// Loads every record of a JSON-lines manifest; relative audio paths
    /// resolve against the manifest's directory.
    pub fn from_manifest(path: &Path, scope: NormScope) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let records = read_manifest(path)?;
        let items = records
            .into_iter()
            .map(|r| {
                let audio_path = r.resolve_audio(base);
                let audio = read_wav(&audio_path)?;
                Ok((audio_path.display().to_string(), audio, r.transcript()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_audio(items, scope)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Mel frames plus token targets for one chunk.
#[derive(Clone, Debug)]
pub struct TrainChunk {
    pub mel: Tensor,
    pub target: Vec<usize>,
    pub duration_s: f64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub seq_len_s: f64,
    pub grad_norm: f64,
    pub chunks: usize,
}

/// Sidecar written next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub recordings_seen: usize,
    pub epoch: u64,
    pub cursor: usize,
    pub seq_len_s: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub optimizer_updates: u64,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub curriculum: CurriculumSchedule,
    pub vocab: Vec<String>,
}

/// Training state. Step-wise control lets callers stop early.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub encoder: Encoder,
    pub optimizer: Optimizer,
    pub cfg: TrainConfig,
    pub schedule: CurriculumSchedule,
    pub vocab: Vocabulary,
    pub step: usize,
    pub recordings_seen: usize,
    pub seq_len_s: f64,
    /// Chunks dropped because they were too short or had infeasible targets.
    pub skipped_chunks: usize,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
    queue: VecDeque<TrainChunk>,
    last_lr: f64,
}

impl Trainer {
    pub fn new(encoder: Encoder, cfg: TrainConfig, schedule: CurriculumSchedule, vocab: Vocabulary) -> Result<Self> {
        cfg.validate()?;
        schedule.validate()?;
        if encoder.config().vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "encoder vocab_size {} does not match the {}-token vocabulary",
                encoder.config().vocab_size,
                vocab.len()
            )));
        }
        Ok(Self {
            optimizer: Optimizer::new(cfg.optimizer, cfg.optim),
            seq_len_s: seq_len_at(&schedule, 0),
            encoder,
            cfg,
            schedule,
            vocab,
            step: 0,
            recordings_seen: 0,
            skipped_chunks: 0,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
            queue: VecDeque::new(),
            last_lr: 0.0,
        })
    }

    /// Fresh encoder from `enc_cfg` seeded by `cfg.seed`.
    pub fn from_config(
        enc_cfg: EncoderConfig,
        cfg: TrainConfig,
        schedule: CurriculumSchedule,
        vocab: Vocabulary,
    ) -> Result<Self> {
        let encoder = Encoder::new(enc_cfg, cfg.seed)?;
        Self::new(encoder, cfg, schedule, vocab)
    }

    fn epoch_order(&self, n: usize) -> Vec<usize> {
        shuffled_order(
            n,
            self.cfg
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(self.epoch),
        )
    }

    /// Chunks the next recording at the current sequence length.
    fn refill(&mut self, data: &Dataset) -> Result<()> {
        if self.order.len() != data.len() || self.cursor >= self.order.len() {
            if self.cursor >= self.order.len() && !self.order.is_empty() {
                self.epoch += 1;
            }
            self.order = self.epoch_order(data.len());
            self.cursor = 0;
        }
        let utt = &data.items[self.order[self.cursor]];
        self.cursor += 1;
        self.seq_len_s = seq_len_at(&self.schedule, self.recordings_seen);
        self.recordings_seen += 1;
        let t = utt.mel.rows();
        for chunk in chunk_recording(&utt.transcript, utt.duration_s, self.seq_len_s)? {
            let start = ((chunk.start_s * FRAMES_PER_SECOND).round() as usize).min(t);
            let end = ((chunk.end_s * FRAMES_PER_SECOND).round() as usize).min(t);
            let target = self.vocab.encode(&chunk.text())?.ids;
            if end < start + 8 || end.saturating_sub(start).div_ceil(8) < target.len() + repeats(&target) {
                self.skipped_chunks += 1;
                log::warn!("{}: skipping chunk {:.2}-{:.2} s", utt.id, chunk.start_s, chunk.end_s);
                continue;
            }
            self.queue.push_back(TrainChunk {
                mel: utt.mel.slice_rows(start, end)?,
                target,
                duration_s: chunk.duration_s(),
            });
        }
        Ok(())
    }

    /// Pulls chunks until the next one would overflow the batch duration.
    pub fn next_batch(&mut self, data: &Dataset) -> Result<Vec<TrainChunk>> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let mut batch = Vec::new();
        let mut filled = 0.0;
        let mut idle = 0;
        loop {
            if self.queue.is_empty() {
                self.refill(data)?;
                if self.queue.is_empty() {
                    idle += 1;
                    if idle > data.len() {
                        if batch.is_empty() {
                            return Err(Error::Data("no usable training chunks".into()));
                        }
                        return Ok(batch);
                    }
                    continue;
                }
                idle = 0;
            }
            let d = self.queue.front().expect("queue refilled").duration_s;
            if d > self.cfg.batch_duration_s + 1e-9 {
                return Err(Error::Data(format!(
                    "chunk of {d} s exceeds the {} s batch",
                    self.cfg.batch_duration_s
                )));
            }
            if !batch.is_empty() && filled + d > self.cfg.batch_duration_s + 1e-9 {
                return Ok(batch);
            }
            filled += d;
            batch.push(self.queue.pop_front().expect("non-empty queue"));
        }
    }

    /// Forward, backward and update on one batch. The reported loss is the
    /// frame-weighted mean chunk loss before the update.
    pub fn train_step(&mut self, batch: &[TrainChunk]) -> Result<StepRecord> {
        self.step += 1;
        let lr = lr_at(self.step, &self.cfg);
        self.last_lr = lr;
        let limits = self.encoder.config().renorm.limits_at(self.step - 1);
        let total_frames: usize = batch.iter().map(|c| c.mel.rows()).sum();
        let mut grads = TensorStore::new();
        let mut loss = 0.0;
        let nan = |step: usize, grad_norm: f64| Error::NanLoss { step, lr, grad_norm };
        for chunk in batch {
            let mut g = Graph::new();
            let x = g.constant(chunk.mel.clone())?;
            let mut b = Bindings::new(true);
            let fp = self
                .encoder
                .forward(&mut g, x, &mut b, NormMode::Training, limits)
                .map_err(|e| match e {
                    Error::NonFinite(_) => nan(self.step, f64::NAN),
                    e => e,
                })?;
            let l = ctc_loss_var(&mut g, fp.log_probs, &chunk.target).map_err(|e| match e {
                Error::NonFinite(_) => nan(self.step, f64::NAN),
                e => e,
            })?;
            let lw = g.scale(l, chunk.mel.rows() as f64 / total_frames as f64)?;
            loss += g.value(lw).item();
            g.backward(lw)?;
            for (name, &var) in b.vars() {
                if let Some(gr) = g.take_grad(var) {
                    match grads.get_mut(name) {
                        Some(acc) => acc.add_assign(&gr),
                        None => grads.insert(name.clone(), gr),
                    }
                }
            }
            self.encoder.apply_renorm_updates(&fp.renorm_updates)?;
        }
        let grad_norm = clip_gradients(&mut grads, self.cfg.clip_norm);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(nan(self.step, grad_norm));
        }
        self.optimizer.step(self.encoder.params_mut(), &grads, lr)?;
        Ok(StepRecord {
            step: self.step,
            loss,
            lr,
            seq_len_s: self.seq_len_s,
            grad_norm,
            chunks: batch.len(),
        })
    }

    pub fn step(&mut self, data: &Dataset) -> Result<StepRecord> {
        let batch = self.next_batch(data)?;
        self.train_step(&batch)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            step: self.step,
            recordings_seen: self.recordings_seen,
            epoch: self.epoch,
            cursor: self.cursor,
            seq_len_s: self.seq_len_s,
            lr: self.last_lr,
            optimizer: self.optimizer.kind,
            optimizer_updates: self.optimizer.t,
            encoder: self.encoder.config().clone(),
            train: self.cfg.clone(),
            curriculum: self.schedule.clone(),
            vocab: self.vocab.tokens().to_vec(),
        }
    }

    /// Tensors under `param.`, `buffer.` and `optim.` prefixes.
    pub fn checkpoint_store(&self) -> TensorStore {
        let mut store = TensorStore::new();
        store.extend_prefixed("param.", self.encoder.params());
        store.extend_prefixed("buffer.", self.encoder.buffers());
        store.extend_prefixed("optim.", &self.optimizer.state);
        store
    }

    /// Writes `path` (tensors) and `path` with a `.json` extension (metadata).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint_store().save(path, DType::F64)?;
        let meta = serde_json::to_string_pretty(&self.meta())?;
        std::fs::write(sidecar_path(path), meta)?;
        Ok(())
    }

    /// Restores a trainer. Chunks queued at save time are not restored;
    /// training resumes at the next recording.
    pub fn load(path: &Path) -> Result<Self> {
        let (encoder, vocab, meta) = load_checkpoint(path)?;
        let store = TensorStore::load(path)?;
        let mut t = Self::new(encoder, meta.train.clone(), meta.curriculum.clone(), vocab)?;
        t.optimizer.state = store.strip_prefix("optim.");
        t.optimizer.t = meta.optimizer_updates;
        t.step = meta.step;
        t.recordings_seen = meta.recordings_seen;
        t.epoch = meta.epoch;
        t.cursor = meta.cursor;
        t.seq_len_s = meta.seq_len_s;
        t.last_lr = meta.lr;
        Ok(t)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Loads the encoder, vocabulary and metadata of a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(Encoder, Vocabulary, CheckpointMeta)> {
    let meta_path = sidecar_path(path);
    let text = std::fs::read_to_string(&meta_path)?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let store = TensorStore::load(path)?;
    let encoder = Encoder::from_stores(
        meta.encoder.clone(),
        store.strip_prefix("param."),
        store.strip_prefix("buffer."),
    )?;
    let vocab = Vocabulary::new(meta.vocab.clone())?;
    Ok((encoder, vocab, meta))
}

/// Runs until `cfg.total_steps`, appending to `out_dir/train_log.jsonl` and
/// writing `step_<n>.ckpt` checkpoints plus `final.ckpt` when a directory is given.
pub fn train(
    trainer: &mut Trainer,
    data: &Dataset,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("train_log.jsonl"))?,
            )
        }
        None => None,
    };
    let mut records = Vec::new();
    while trainer.step < trainer.cfg.total_steps {
        let rec = trainer.step(data)?;
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        if let Some(dir) = out_dir {
            let every = trainer.cfg.checkpoint_every;
            if every > 0 && rec.step % every == 0 {
                trainer.save(&dir.join(format!("step_{}.ckpt", rec.step)))?;
            }
        }
        on_step(&rec);
        records.push(rec);
    }
    if let Some(dir) = out_dir {
        trainer.save(&dir.join("final.ckpt"))?;
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig {
            warmup_steps: Some(100),
            total_steps: 1000,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(50, &cfg), 1.5e-3);
        assert_eq!(lr_at(100, &cfg), 3e-3);
        assert!(lr_at(1000, &cfg).abs() < 1e-12);
        assert!(lr_at(550, &cfg) > lr_at(551, &cfg));
        assert_eq!(
            TrainConfig {
                total_steps: 500,
                ..TrainConfig::default()
            }
            .warmup(),
            50
        );
    }

    #[test]
    fn clipping() {
        let mut g = TensorStore::new();
        g.insert("a", Tensor::new(vec![2], vec![6.0, 0.0]).unwrap());
        g.insert("b", Tensor::new(vec![1], vec![8.0]).unwrap());
        let before = g.clone();
        let norm = clip_gradients(&mut g, 1.0);
        assert_eq!(norm, 10.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-10);
        let dot: f64 = g
            .iter()
            .zip(before.iter())
            .map(|((_, x), (_, y))| x.data().iter().zip(y.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        assert!((dot / (global_norm(&g) * global_norm(&before)) - 1.0).abs() < 1e-12);
        let mut small = before.clone();
        clip_gradients(&mut small, 100.0);
        assert_eq!(small, before);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            warmup_steps: Some(20),
            total_steps: 10,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig {
            peak_lr: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }
}
