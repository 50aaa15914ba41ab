//! Episodic training loop.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::buffer::{BufferConfig, BufferSlot, EpisodeBuffer, SlotFactory};
use crate::encoder::{adam_step, cosine_lr, stack_features, AdamState, Checkpoint, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::proto::{episode_loss, Distance};
use crate::rng::{self, StreamRng};
use crate::source::KeywordClass;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_way: usize,
    pub k_shots: usize,
    pub total_steps: u64,
    pub lr: f64,
    pub lr_min: f64,
    pub distance: Distance,
    /// Write a checkpoint every this many steps; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Record wall-clock milliseconds in the loss log; reruns then no longer match byte for byte.
    pub log_wall_ms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_way: 512,
            k_shots: 5,
            total_steps: 300_000,
            lr: 1e-3,
            lr_min: 0.0,
            distance: Distance::SquaredEuclidean,
            checkpoint_every: 10_000,
            log_wall_ms: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::Config("train.n_way must be at least 2".into()));
        }
        if self.k_shots == 0 {
            return Err(Error::Config("train.k_shots must be at least 1".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("train.total_steps must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::Config(format!("need 0 <= lr_min <= lr, got {} / {}", self.lr_min, self.lr)));
        }
        Ok(())
    }

    /// Checks that the buffer draws episodes of the shape this config trains on.
    pub fn check_buffer(&self, buf: &BufferConfig) -> Result<()> {
        if buf.n_way != self.n_way || buf.k_shots != self.k_shots {
            return Err(Error::Config(format!(
                "buffer episodes are {}-way {}-shot but training expects {}-way {}-shot",
                buf.n_way, buf.k_shots, self.n_way, self.k_shots
            )));
        }
        Ok(())
    }
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct SlotState {
    serial: u64,
    class: KeywordClass,
    view_seeds: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct ResumeState {
    buffer: BufferConfig,
    train: TrainConfig,
    slots: Vec<SlotState>,
}

pub struct Trainer<'a> {
    factory: SlotFactory<'a>,
    cfg: TrainConfig,
    buffer: EpisodeBuffer,
    encoder: Encoder<f32>,
    adam: AdamState<f32>,
    rng: StreamRng,
    step: u64,
    started: Instant,
}

impl<'a> Trainer<'a> {
    /// Fresh run: the encoder is initialized from the `init` stream and the
    /// buffer and episodes come from the `train` stream of `seed`.
    pub fn new(
        factory: SlotFactory<'a>,
        buffer_cfg: &BufferConfig,
        cfg: &TrainConfig,
        encoder_cfg: &EncoderConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        cfg.check_buffer(buffer_cfg)?;
        let encoder = Encoder::new(encoder_cfg, &mut rng::stream(seed, "init"))?;
        let mut rng = rng::stream(seed, "train");
        let buffer = EpisodeBuffer::init(&factory, buffer_cfg, &mut rng)?;
        let adam = AdamState::new(&encoder);
        Ok(Self { factory, cfg: cfg.clone(), buffer, encoder, adam, rng, step: 0, started: Instant::now() })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`]; the buffer is re-rendered from its view seeds.
    pub fn resume(factory: SlotFactory<'a>, ckpt: Checkpoint<f32>) -> Result<Self> {
        let state: ResumeState = serde_json::from_value(
            ckpt.meta.get("resume").cloned().ok_or_else(|| Error::Checkpoint("checkpoint has no resume state".into()))?,
        )?;
        let rng = ckpt.rng.ok_or_else(|| Error::Checkpoint("checkpoint has no rng state".into()))?;
        let slots = state
            .slots
            .into_iter()
            .map(|s| {
                let views = s.view_seeds.iter().map(|&v| factory.view(&s.class, v)).collect::<Result<Vec<_>>>()?;
                Ok(BufferSlot { class: s.class, views, view_seeds: s.view_seeds, serial: s.serial })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(max) = slots.iter().map(|s| s.class.class_id).max() {
            factory.source.restore_class_counter(max + 1);
        }
        let buffer = EpisodeBuffer::from_slots(&state.buffer, slots)?;
        Ok(Self {
            factory,
            cfg: state.train,
            buffer,
            encoder: ckpt.encoder,
            adam: ckpt.adam,
            rng,
            step: ckpt.step,
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder<f32> {
        &self.encoder
    }

    pub fn buffer(&self) -> &EpisodeBuffer {
        &self.buffer
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    /// Sample an episode, take one optimizer step, then refresh the buffer.
    pub fn step(&mut self) -> Result<StepRecord> {
        let episode = self.buffer.sample_episode(&mut self.rng)?;
        let x = stack_features::<f32>(&episode.views(&self.buffer))?;
        let (emb, trace) = self.encoder.forward_train(x.view())?;
        let out = episode_loss(emb.mapv(f64::from).view(), episode.n_way(), episode.k_shots, self.cfg.distance)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {} is {}", self.step, out.loss)));
        }
        let grad: Array2<f32> = out.grad.mapv(|v| v as f32);
        let grads = self.encoder.backward(&trace, grad.view())?;
        let lr = cosine_lr(self.step.min(self.cfg.total_steps), self.cfg.total_steps, self.cfg.lr, self.cfg.lr_min);
        adam_step(&mut self.encoder, &grads, &mut self.adam, lr)?;
        self.buffer.refresh(&self.factory, &mut self.rng)?;
        let record = StepRecord {
            step: self.step,
            lr,
            loss: out.loss,
            accuracy: out.accuracy,
            wall_ms: self.cfg.log_wall_ms.then(|| self.started.elapsed().as_millis() as u64),
        };
        self.step += 1;
        Ok(record)
    }

    /// Snapshot with everything needed to resume bit-exactly.
    pub fn checkpoint(&self, extra_meta: serde_json::Value) -> Result<Checkpoint<f32>> {
        let state = ResumeState {
            buffer: self.buffer.config().clone(),
            train: self.cfg.clone(),
            slots: self
                .buffer
                .slots()
                .map(|s| SlotState { serial: s.serial, class: s.class.clone(), view_seeds: s.view_seeds.clone() })
                .collect(),
        };
        let mut ck = Checkpoint::new(self.encoder.clone());
        ck.adam = self.adam.clone();
        ck.step = self.step;
        ck.rng = Some(self.rng.clone());
        ck.meta = serde_json::json!({ "resume": state, "run": extra_meta });
        Ok(ck)
    }
}

/// Files produced by [`run_training`].
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub loss_log: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub final_hash: String,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:08}.ckpt"))
}

/// Train to `total_steps`, appending to `loss.jsonl` and writing checkpoints into `dir`.
pub fn run_training(trainer: &mut Trainer<'_>, dir: &Path, meta: &serde_json::Value) -> Result<TrainOutputs> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let loss_log = dir.join("loss.jsonl");
    let file =
        if trainer.step_count() == 0 { File::create(&loss_log) } else { OpenOptions::new().append(true).create(true).open(&loss_log) }
            .map_err(|e| Error::io(&loss_log, e))?;
    let mut log = BufWriter::new(file);
    let mut checkpoints = Vec::new();
    let every = trainer.config().checkpoint_every;
    while !trainer.is_done() {
        let rec = trainer.step()?;
        serde_json::to_writer(&mut log, &rec)?;
        writeln!(log).map_err(|e| Error::io(&loss_log, e))?;
        if rec.step % 100 == 0 {
            log::info!("step {} lr {:.3e} loss {:.4} acc {:.3}", rec.step, rec.lr, rec.loss, rec.accuracy);
        }
        let done = trainer.step_count();
        if every > 0 && done.is_multiple_of(every) && !trainer.is_done() {
            log.flush().map_err(|e| Error::io(&loss_log, e))?;
            let path = checkpoint_path(dir, done);
            trainer.checkpoint(meta.clone())?.save(&path)?;
            checkpoints.push(path);
        }
    }
    log.flush().map_err(|e| Error::io(&loss_log, e))?;
    let final_checkpoint = dir.join("final.ckpt");
    let final_hash = trainer.checkpoint(meta.clone())?.save(&final_checkpoint)?;
    Ok(TrainOutputs { loss_log, checkpoints, final_checkpoint, final_hash })
}

/// Read a loss log back.
pub fn read_loss_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(Error::from)).collect()
}
