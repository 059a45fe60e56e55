//! The alternating critic/generator loop, training records and checkpoints.
//!
//! One generator iteration is `n_critic` discriminator steps (each on a fresh
//! batch, followed by weight clipping under WGAN) and then one generator
//! step on the total loss `(1 − γ)·J_G + γ·L1`.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datapipe::{prefetch_depth, Batch, BatchStream, ImageDataset, Sampler, SamplerState};
use crate::diffgraph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::layers::BnMode;
use crate::models::{InputMode, Model, ModelConfig, Role, NOISE_DIM};
use crate::objectives::{self, ObjectiveConfig, ObjectiveKind};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "g_iter,j_d,j_g,l1_metric,wall_ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub generator: ModelConfig,
    pub discriminator: ModelConfig,
    pub g_optimizer: OptimizerConfig,
    pub d_optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub total_g_iters: u64,
    pub log_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Record real elapsed time in `wall_ms` (otherwise 0, keeping logs
    /// byte-reproducible).
    pub log_wall_time: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.discriminator.check_objective(self.objective.kind)?;
        self.g_optimizer.validate("optimizer.generator")?;
        self.d_optimizer.validate("optimizer.discriminator")?;
        if self.generator.role != Role::Generator {
            return Err(Error::config("generator.role", "must be generator"));
        }
        if self.discriminator.role != Role::Discriminator {
            return Err(Error::config("discriminator.role", "must be discriminator"));
        }
        if self.generator.image_size != self.discriminator.image_size
            || self.generator.channels != self.discriminator.channels
        {
            return Err(Error::config(
                "discriminator.image_size",
                "generator and discriminator image geometry differ",
            ));
        }
        if self.generator.input_mode == InputMode::Noise128 && self.objective.gamma_l1 != 0.0 {
            return Err(Error::config(
                "objective.gamma_l1",
                "must be 0 with noise input (there is no low-resolution image to match)",
            ));
        }
        let bn_needs_two = self.generator.use_batchnorm || self.discriminator.use_batchnorm;
        if self.batch_size == 0 || (bn_needs_two && self.batch_size < 2) {
            return Err(Error::config("train.batch_size", "must be >= 1 (>= 2 with batch norm)"));
        }
        if self.total_g_iters == 0 {
            return Err(Error::config("train.total_g_iters", "must be at least 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("train.log_every", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub g_iter: u64,
    pub j_d: f64,
    pub j_g: f64,
    pub l1_metric: f64,
    pub wall_ms: u64,
}

impl TrainRecord {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.g_iter, self.j_d, self.j_g, self.l1_metric, self.wall_ms)
    }

    /// Parses one data row of a log; `line_no` is reported on failure.
    pub fn parse_csv_line(line: &str, line_no: usize) -> Result<TrainRecord> {
        let bad = |what: &str| Error::Dataset(format!("log line {line_no}: {what}"));
        let f: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
        if f.len() != 5 {
            return Err(bad(&format!("expected 5 fields, found {}", f.len())));
        }
        let num = |i: usize, name: &str| f[i].trim().parse::<f64>().map_err(|_| bad(&format!("bad {name} {:?}", f[i])));
        Ok(TrainRecord {
            g_iter: f[0].trim().parse().map_err(|_| bad(&format!("bad g_iter {:?}", f[0])))?,
            j_d: num(1, "j_d")?,
            j_g: num(2, "j_g")?,
            l1_metric: num(3, "l1_metric")?,
            wall_ms: f[4].trim().parse().map_err(|_| bad(&format!("bad wall_ms {:?}", f[4])))?,
        })
    }
}

/// Full CSV text (header plus one row per record).
pub fn records_to_csv(records: &[TrainRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Parses a log; requires the exact header, at least one row and strictly
/// increasing `g_iter`.
pub fn parse_csv(text: &str) -> Result<Vec<TrainRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end_matches('\r') == CSV_HEADER => {}
        _ => return Err(Error::Dataset(format!("log line 1: expected header {CSV_HEADER}"))),
    }
    let mut out: Vec<TrainRecord> = vec![];
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r = TrainRecord::parse_csv_line(line, i + 2)?;
        if out.last().is_some_and(|p| p.g_iter >= r.g_iter) {
            return Err(Error::Dataset(format!("log line {}: g_iter not increasing", i + 2)));
        }
        out.push(r);
    }
    if out.is_empty() {
        return Err(Error::Dataset("log has no data rows".into()));
    }
    Ok(out)
}

/// `out[i] = mean(series[max(0, i−window+1) ..= i])`.
pub fn moving_average(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::Domain { op: "moving_average", detail: "window must be >= 1".into() });
    }
    if series.is_empty() {
        return Err(Error::Domain { op: "moving_average", detail: "empty series".into() });
    }
    let mut out = Vec::with_capacity(series.len());
    for i in 0..series.len() {
        let lo = (i + 1).saturating_sub(window);
        let w = &series[lo..=i];
        out.push(w.iter().sum::<f64>() / w.len() as f64);
    }
    Ok(out)
}

/// Values observed in the most recent steps.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepValues {
    pub j_d: f64,
    pub j_g: f64,
    pub l1: f64,
}

pub struct Trainer {
    config: TrainConfig,
    generator: Model,
    discriminator: Model,
    g_opt: OptimizerState,
    d_opt: OptimizerState,
    interp_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    batches: BatchStream,
    g_iter: u64,
    d_steps: u64,
    g_steps: u64,
    clip_calls: u64,
    last: StepValues,
    started: Instant,
}

fn diverged(term: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Diverged { term },
        other => other,
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: ImageDataset) -> Result<Trainer> {
        config.validate()?;
        check_dataset(&config, &dataset)?;
        let mut init = rng::stream(config.seed, Stream::Init);
        let generator = Model::build_with(&config.generator, &mut init)?;
        let discriminator = Model::build_for(&config.discriminator, config.objective.kind, &mut init)?;
        let g_opt = OptimizerState::for_params(config.g_optimizer, &generator.trainable());
        let d_opt = OptimizerState::for_params(config.d_optimizer, &discriminator.trainable());
        let sampler = Sampler::new(config.seed, dataset.len());
        let batches = BatchStream::new(dataset, config.batch_size, sampler, prefetch_depth())?;
        Ok(Trainer {
            interp_rng: rng::stream(config.seed, Stream::Interpolation),
            noise_rng: rng::stream(config.seed, Stream::Noise),
            config,
            generator,
            discriminator,
            g_opt,
            d_opt,
            batches,
            g_iter: 0,
            d_steps: 0,
            g_steps: 0,
            clip_calls: 0,
            last: StepValues::default(),
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &Model {
        &self.generator
    }

    pub fn discriminator(&self) -> &Model {
        &self.discriminator
    }

    pub fn dataset(&self) -> &ImageDataset {
        self.batches.dataset()
    }

    pub fn g_iter(&self) -> u64 {
        self.g_iter
    }

    pub fn d_steps(&self) -> u64 {
        self.d_steps
    }

    pub fn g_steps(&self) -> u64 {
        self.g_steps
    }

    pub fn clip_calls(&self) -> u64 {
        self.clip_calls
    }

    pub fn last_values(&self) -> StepValues {
        self.last
    }

    pub fn is_done(&self) -> bool {
        self.g_iter >= self.config.total_g_iters
    }

    fn generator_input(&mut self, batch: &Batch) -> Result<Tensor> {
        match self.config.generator.input_mode {
            InputMode::LowresImage => Ok(batch.inputs.clone()),
            InputMode::Noise128 => {
                let n = batch.len() * NOISE_DIM;
                let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut self.noise_rng)).collect();
                Tensor::new(vec![batch.len(), NOISE_DIM], v)
            }
        }
    }

    /// One critic update on a fresh batch.
    pub fn d_step(&mut self) -> Result<f64> {
        let batch = self.batches.next_batch()?;
        let z = self.generator_input(&batch)?;
        let train_frozen = BnMode::Train { update_stats: false };

        let mut g = Graph::new();
        let zi = g.constant(z)?;
        let fake = self.generator.forward(&mut g, zi, train_frozen, false).map_err(diverged("generator output"))?;
        let fake_t = g.value(fake.output).clone();

        let mut g = Graph::new();
        let params = self.discriminator.bind_params(&mut g)?;
        let xr = g.constant(batch.labels.clone())?;
        let xf = g.constant(fake_t.clone())?;
        let d_real = self
            .discriminator
            .forward_bound(&mut g, xr, BnMode::Train { update_stats: true }, &params)
            .map_err(diverged("d_real"))?;
        let d_fake = self.discriminator.forward_bound(&mut g, xf, train_frozen, &params).map_err(diverged("d_fake"))?;
        let (dr, df) = (d_real.output, d_fake.output);
        let obj = &self.config.objective;
        let j = match obj.kind {
            ObjectiveKind::Gan => objectives::gan_d_loss(&mut g, dr, df),
            ObjectiveKind::Wgan => objectives::wgan_d_loss(&mut g, dr, df),
            ObjectiveKind::WganGp => {
                let eps: Vec<f64> = (0..batch.len()).map(|_| self.interp_rng.random::<f64>()).collect();
                let eps = Tensor::new(vec![batch.len()], eps)?;
                let x_hat = g.input(objectives::interpolate(&batch.labels, &fake_t, &eps)?)?;
                let dh = self.discriminator.forward_bound(&mut g, x_hat, train_frozen, &params).map_err(diverged("d_interp"))?;
                let pen = g.gradient_penalty(dh.output, x_hat).map_err(diverged("gradient penalty"))?;
                objectives::wgan_gp_d_loss(&mut g, dr, df, pen, obj.lambda_gp)
            }
        }
        .map_err(diverged("j_d"))?;
        let j_d = g.value(j).item()?;
        let grads = grads_of(&mut g, j, &params).map_err(diverged("discriminator gradient"))?;
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        self.d_opt
            .step(&mut self.discriminator.trainable_mut(), &grad_refs)
            .map_err(diverged("discriminator gradient"))?;
        self.discriminator.apply_bn_updates(d_real.bn_updates);
        if obj.kind == ObjectiveKind::Wgan {
            objectives::clip_weights(&mut self.discriminator, obj.clip_c)?;
            self.clip_calls += 1;
        }
        self.d_steps += 1;
        self.last.j_d = j_d;
        Ok(j_d)
    }

    /// One generator update; the critic is held fixed.
    pub fn g_step(&mut self) -> Result<(f64, f64)> {
        let batch = self.batches.next_batch()?;
        let z = self.generator_input(&batch)?;
        let mut g = Graph::new();
        let zi = g.constant(z)?;
        let gen = self
            .generator
            .forward(&mut g, zi, BnMode::Train { update_stats: true }, true)
            .map_err(diverged("generator output"))?;
        let d_fake = self
            .discriminator
            .forward(&mut g, gen.output, BnMode::Train { update_stats: false }, false)
            .map_err(diverged("d_fake"))?;
        let obj = &self.config.objective;
        let j_g = match obj.kind {
            ObjectiveKind::Gan => objectives::gan_g_loss(&mut g, d_fake.output),
            ObjectiveKind::Wgan | ObjectiveKind::WganGp => objectives::wgan_g_loss(&mut g, d_fake.output),
        }
        .map_err(diverged("j_g"))?;
        let (total, l1) = match self.config.generator.input_mode {
            InputMode::LowresImage => {
                let l1 = objectives::l1_term(&mut g, gen.output, zi).map_err(diverged("l1"))?;
                (objectives::total_g_loss(&mut g, j_g, l1, obj.gamma_l1)?, g.value(l1).item()?)
            }
            InputMode::Noise128 => (j_g, 0.0),
        };
        let j_g_val = g.value(j_g).item()?;
        if !g.value(total).is_finite() {
            return Err(Error::Diverged { term: "generator total loss" });
        }
        let grads = grads_of(&mut g, total, &gen.params).map_err(diverged("generator gradient"))?;
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        self.g_opt
            .step(&mut self.generator.trainable_mut(), &grad_refs)
            .map_err(diverged("generator gradient"))?;
        self.generator.apply_bn_updates(gen.bn_updates);
        self.g_steps += 1;
        self.last.j_g = j_g_val;
        self.last.l1 = l1;
        Ok((j_g_val, l1))
    }

    /// `n_critic` critic steps then one generator step.
    pub fn g_iteration(&mut self) -> Result<TrainRecord> {
        for _ in 0..self.config.objective.n_critic {
            self.d_step()?;
        }
        self.g_step()?;
        self.g_iter += 1;
        let wall_ms = if self.config.log_wall_time {
            self.started.elapsed().as_millis() as u64
        } else {
            0
        };
        Ok(TrainRecord {
            g_iter: self.g_iter,
            j_d: self.last.j_d,
            j_g: self.last.j_g,
            l1_metric: self.last.l1,
            wall_ms,
        })
    }

    /// Runs until `total_g_iters`, passing every `log_every`-th record (and
    /// the last one) to `sink`. `on_iter` sees every iteration, e.g. for
    /// checkpointing.
    pub fn run(
        &mut self,
        mut sink: impl FnMut(&TrainRecord) -> Result<()>,
        mut on_iter: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while !self.is_done() {
            let rec = self.g_iteration()?;
            if rec.g_iter % self.config.log_every == 0 || self.is_done() {
                sink(&rec)?;
            }
            on_iter(self)?;
        }
        Ok(())
    }

    /// Generator output (eval-mode batch norm) for a batch.
    pub fn generate(&self, batch: &Batch) -> Result<Tensor> {
        generate(&self.generator, batch, self.config.seed)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            g_iter: self.g_iter,
            d_steps: self.d_steps,
            g_steps: self.g_steps,
            clip_calls: self.clip_calls,
            interp_word_pos: rng::position(&self.interp_rng),
            noise_word_pos: rng::position(&self.noise_rng),
            sampler: self.batches.consumed_state().clone(),
            g_opt_t: self.g_opt.t,
            d_opt_t: self.d_opt.t,
            last: [self.last.j_d, self.last.j_g, self.last.l1],
            dataset_source: self.batches.dataset().source().to_string(),
        };
        let mut entries = vec![Entry::bytes("meta", serde_json::to_vec(&meta)?)];
        for (prefix, model) in [("g", &self.generator), ("d", &self.discriminator)] {
            for (name, t) in model.named_tensors() {
                entries.push(Entry::tensor(format!("{prefix}/{name}"), t.clone()));
            }
        }
        for (prefix, st) in [("g_opt", &self.g_opt), ("d_opt", &self.d_opt)] {
            for (i, t) in st.m.iter().enumerate() {
                entries.push(Entry::tensor(format!("{prefix}/m/{i}"), t.clone()));
            }
            for (i, t) in st.v.iter().enumerate() {
                entries.push(Entry::tensor(format!("{prefix}/v/{i}"), t.clone()));
            }
        }
        Ok(Checkpoint { entries })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    /// Rebuilds a trainer from a checkpoint; continuing it reproduces an
    /// uninterrupted run exactly.
    pub fn resume(ckpt: &Checkpoint, dataset: ImageDataset) -> Result<Trainer> {
        let meta: CheckpointMeta = serde_json::from_slice(ckpt.bytes("meta")?)?;
        let config = meta.config.clone();
        config.validate()?;
        check_dataset(&config, &dataset)?;
        if meta.dataset_source != dataset.source() {
            return Err(Error::Checkpoint(format!(
                "trained on {} but resumed with {}",
                meta.dataset_source,
                dataset.source()
            )));
        }
        let mut init = rng::stream(config.seed, Stream::Init);
        let mut generator = Model::build_with(&config.generator, &mut init)?;
        let mut discriminator = Model::build_for(&config.discriminator, config.objective.kind, &mut init)?;
        for (prefix, model) in [("g", &mut generator), ("d", &mut discriminator)] {
            let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
            for name in names {
                let t = ckpt.tensor(&format!("{prefix}/{name}"))?;
                model.set_tensor(&name, t.clone())?;
            }
        }
        let restore_opt = |prefix: &str, cfg: OptimizerConfig, model: &Model, t: u64| -> Result<OptimizerState> {
            let mut st = OptimizerState::for_params(cfg, &model.trainable());
            for (i, m) in st.m.iter_mut().enumerate() {
                *m = checked_like(m, ckpt.tensor(&format!("{prefix}/m/{i}"))?)?;
            }
            for (i, v) in st.v.iter_mut().enumerate() {
                *v = checked_like(v, ckpt.tensor(&format!("{prefix}/v/{i}"))?)?;
            }
            st.t = t;
            Ok(st)
        };
        let g_opt = restore_opt("g_opt", config.g_optimizer, &generator, meta.g_opt_t)?;
        let d_opt = restore_opt("d_opt", config.d_optimizer, &discriminator, meta.d_opt_t)?;
        let sampler = Sampler::from_state(config.seed, dataset.len(), meta.sampler)?;
        let batches = BatchStream::new(dataset, config.batch_size, sampler, prefetch_depth())?;
        Ok(Trainer {
            interp_rng: rng::restore(config.seed, Stream::Interpolation, meta.interp_word_pos),
            noise_rng: rng::restore(config.seed, Stream::Noise, meta.noise_word_pos),
            config,
            generator,
            discriminator,
            g_opt,
            d_opt,
            batches,
            g_iter: meta.g_iter,
            d_steps: meta.d_steps,
            g_steps: meta.g_steps,
            clip_calls: meta.clip_calls,
            last: StepValues { j_d: meta.last[0], j_g: meta.last[1], l1: meta.last[2] },
            started: Instant::now(),
        })
    }
}

fn grads_of(g: &mut Graph, out: NodeId, params: &[NodeId]) -> Result<Vec<Tensor>> {
    let ids = g.gradients(out, params)?;
    Ok(ids.into_iter().map(|id| g.value(id).clone()).collect())
}

fn checked_like(slot: &Tensor, t: &Tensor) -> Result<Tensor> {
    if slot.shape() != t.shape() {
        return Err(Error::Checkpoint(format!("optimizer buffer {:?} vs {:?}", t.shape(), slot.shape())));
    }
    Ok(t.clone())
}

fn check_dataset(config: &TrainConfig, dataset: &ImageDataset) -> Result<()> {
    if dataset.label_size() != config.generator.image_size {
        return Err(Error::config(
            "data.label_size",
            format!(
                "dataset images are {} pixels but the models expect {}",
                dataset.label_size(),
                config.generator.image_size
            ),
        ));
    }
    if config.batch_size > dataset.len() {
        return Err(Error::config(
            "train.batch_size",
            format!("{} exceeds dataset size {}", config.batch_size, dataset.len()),
        ));
    }
    Ok(())
}

/// Generator output (eval-mode batch norm) for a batch. Noise-input
/// generators draw their noise from a fixed stream derived from `seed`.
pub fn generate(generator: &Model, batch: &Batch, seed: u64) -> Result<Tensor> {
    match generator.config().input_mode {
        InputMode::LowresImage => crate::models::forward_g(generator, &batch.inputs),
        InputMode::Noise128 => {
            let mut r = rng::stream(seed ^ 0x5eed, Stream::Noise);
            let v: Vec<f64> = (0..batch.len() * NOISE_DIM).map(|_| StandardNormal.sample(&mut r)).collect();
            crate::models::forward_g(generator, &Tensor::new(vec![batch.len(), NOISE_DIM], v)?)
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    g_iter: u64,
    d_steps: u64,
    g_steps: u64,
    clip_calls: u64,
    interp_word_pos: u128,
    noise_word_pos: u128,
    sampler: SamplerState,
    g_opt_t: u64,
    d_opt_t: u64,
    last: [f64; 3],
    dataset_source: String,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ASRL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Blob {
    Tensor(Tensor),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub blob: Blob,
}

impl Entry {
    pub fn tensor(name: impl Into<String>, t: Tensor) -> Entry {
        Entry { name: name.into(), blob: Blob::Tensor(t) }
    }

    pub fn bytes(name: impl Into<String>, b: Vec<u8>) -> Entry {
        Entry { name: name.into(), blob: Blob::Bytes(b) }
    }
}

/// Named blobs in a little-endian container:
///
/// ```text
/// "ASRL" | version u32 | count u32 |
///   per entry: name_len u32 | name | kind u8 | payload_len u64 | payload
/// | crc32 u32 (of everything before it)
/// ```
///
/// A tensor payload is `rank u32 | dims u64… | values f64…`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Blob> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.blob)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name) {
            Some(Blob::Tensor(t)) => Ok(t),
            Some(_) => Err(Error::Checkpoint(format!("{name} is not a tensor"))),
            None => Err(Error::Checkpoint(format!("missing entry {name}"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(Blob::Bytes(b)) => Ok(b),
            Some(_) => Err(Error::Checkpoint(format!("{name} is not a byte blob"))),
            None => Err(Error::Checkpoint(format!("missing entry {name}"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            let (kind, payload) = match &e.blob {
                Blob::Tensor(t) => {
                    let mut p = Vec::with_capacity(4 + 8 * (t.rank() + t.len()));
                    p.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                    for &d in t.shape() {
                        p.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in t.data() {
                        p.extend_from_slice(&v.to_le_bytes());
                    }
                    (0u8, p)
                }
                Blob::Bytes(b) => (1u8, b.clone()),
            };
            out.push(kind);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses and verifies a checkpoint; nothing is returned unless the
    /// whole file checks out.
    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 16 {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let kind = r.take(1)?[0];
            let len = r.u64()? as usize;
            let payload = r.take(len)?;
            let blob = match kind {
                0 => Blob::Tensor(parse_tensor(payload, &name)?),
                1 => Blob::Bytes(payload.to_vec()),
                k => return Err(Error::Checkpoint(format!("{name}: unknown blob kind {k}"))),
            };
            entries.push(Entry { name, blob });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after last entry".into()));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// The training configuration stored in a trainer checkpoint.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let meta: CheckpointMeta = serde_json::from_slice(self.bytes("meta")?)?;
        Ok(meta.config)
    }

    /// Rebuilds the generator stored in a trainer checkpoint.
    pub fn generator(&self) -> Result<Model> {
        let config = self.train_config()?;
        let mut model = Model::build(&config.generator, config.seed)?;
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        for name in names {
            model.set_tensor(&name, self.tensor(&format!("g/{name}"))?.clone())?;
        }
        Ok(model)
    }
}

fn parse_tensor(p: &[u8], name: &str) -> Result<Tensor> {
    let mut r = Reader { buf: p, pos: 0 };
    let rank = r.u32()? as usize;
    let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    if p.len() != 4 + 8 * rank + 8 * n {
        return Err(Error::Checkpoint(format!("{name}: payload size does not match shape {shape:?}")));
    }
    let data = (0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
    Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
