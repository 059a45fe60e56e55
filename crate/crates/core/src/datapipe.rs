//! Image ingestion and the crop → resize → downsample chain.
//!
//! Labels are stored at `label_size`; model inputs are always the 4×4 block
//! average of a label, computed per batch. Sources are either a directory of
//! PNG files or a synthetic spec `synth:<ramp|checker|blobs>[:count]`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffgraph::kernels;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Linear resolution gain between model input and label.
pub const SCALE_FACTOR: usize = 4;
pub const CHANNELS: usize = 3;
pub const DEFAULT_SYNTH_COUNT: usize = 64;
pub const THREADS_ENV: &str = "ASRL_THREADS";

/// `[0,255] → [−1,1]`.
pub fn pixel_to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Inverse of [`pixel_to_unit`], rounding and saturating.
pub fn unit_to_pixel(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// `f_d`: mean of each 4×4 block over the last two axes.
pub fn downsample_4x(img: &Tensor) -> Result<Tensor> {
    kernels::avg_pool(img, SCALE_FACTOR)
}

pub fn upsample_nearest_4x(img: &Tensor) -> Result<Tensor> {
    kernels::upsample_nearest(img, SCALE_FACTOR)
}

/// Catmull-Rom cubic kernel (a = −0.5).
pub fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Taps and weights for one output coordinate of a `factor`× upscale.
fn cubic_taps(o: usize, factor: usize, n: usize) -> [(usize, f64); 4] {
    let u = (o as f64 + 0.5) / factor as f64 - 0.5;
    let base = u.floor();
    let frac = u - base;
    let mut taps = [(0, 0.0); 4];
    for (k, tap) in taps.iter_mut().enumerate() {
        let off = k as isize - 1;
        *tap = (reflect_index(base as isize + off, n), cubic_weight(frac - off as f64));
    }
    taps
}

/// Bicubic 4× upscale over the last two axes (half-pixel centres,
/// reflect-padded borders).
pub fn bicubic_upsample_4x(img: &Tensor) -> Result<Tensor> {
    let r = img.rank();
    if r < 2 {
        return Err(Error::shape("bicubic_upsample_4x", format!("rank {r}")));
    }
    let (h, w) = (img.shape()[r - 2], img.shape()[r - 1]);
    let (ho, wo) = (h * SCALE_FACTOR, w * SCALE_FACTOR);
    let rows: Vec<_> = (0..ho).map(|o| cubic_taps(o, SCALE_FACTOR, h)).collect();
    let cols: Vec<_> = (0..wo).map(|o| cubic_taps(o, SCALE_FACTOR, w)).collect();
    let planes = img.len() / (h * w);
    let src = img.data();
    let mut out = vec![0.0; planes * ho * wo];
    let mut tmp = vec![0.0; h * wo];
    for p in 0..planes {
        let s = &src[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (ox, taps) in cols.iter().enumerate() {
                tmp[y * wo + ox] = taps.iter().map(|&(x, wt)| wt * s[y * w + x]).sum();
            }
        }
        let d = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, taps) in rows.iter().enumerate() {
            for ox in 0..wo {
                d[oy * wo + ox] = taps.iter().map(|&(y, wt)| wt * tmp[y * wo + ox]).sum();
            }
        }
    }
    let mut shape = img.shape().to_vec();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Tensor::new(shape, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Ramp,
    Checker,
    Blobs,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Source {
    Dir(PathBuf),
    Synth { kind: SynthKind, count: usize },
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Source> {
        let Some(rest) = s.strip_prefix("synth:") else {
            return Ok(Source::Dir(PathBuf::from(s)));
        };
        let mut parts = rest.split(':');
        let kind = match parts.next() {
            Some("ramp") => SynthKind::Ramp,
            Some("checker") => SynthKind::Checker,
            Some("blobs") => SynthKind::Blobs,
            other => {
                return Err(Error::Dataset(format!(
                    "unknown synthetic kind {:?} (expected ramp, checker or blobs)",
                    other.unwrap_or("")
                )))
            }
        };
        let count = match parts.next() {
            None => DEFAULT_SYNTH_COUNT,
            Some(c) => c
                .parse::<usize>()
                .ok()
                .filter(|&c| c > 0)
                .ok_or_else(|| Error::Dataset(format!("bad synthetic image count {c:?}")))?,
        };
        if parts.next().is_some() {
            return Err(Error::Dataset(format!("malformed synthetic spec {s:?}")));
        }
        Ok(Source::Synth { kind, count })
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Dir(p) => write!(f, "{}", p.display()),
            Source::Synth { kind, count } => {
                let k = match kind {
                    SynthKind::Ramp => "ramp",
                    SynthKind::Checker => "checker",
                    SynthKind::Blobs => "blobs",
                };
                write!(f, "synth:{k}:{count}")
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    pub label_size: usize,
    pub crop_size: usize,
    pub seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { label_size: 64, crop_size: 128, seed: 0 }
    }
}

impl LoadOptions {
    pub fn validate(&self) -> Result<()> {
        if self.label_size == 0 || !self.label_size.is_multiple_of(SCALE_FACTOR) {
            return Err(Error::config("data.label_size", "must be a positive multiple of 4"));
        }
        if self.crop_size < self.label_size || !self.crop_size.is_multiple_of(self.label_size) {
            return Err(Error::config("data.crop_size", "must be a multiple of label_size"));
        }
        Ok(())
    }
}

/// A batch of aligned low-resolution inputs and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[b, 3, k, k]`
    pub inputs: Tensor,
    /// `[b, 3, 4k, 4k]`
    pub labels: Tensor,
}

impl Batch {
    pub fn from_labels(labels: Tensor) -> Result<Batch> {
        Ok(Batch { inputs: downsample_4x(&labels)?, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Preprocessed label images held in memory.
#[derive(Clone, Debug)]
pub struct ImageDataset {
    labels: Arc<Tensor>,
    source: String,
}

impl ImageDataset {
    /// Loads `spec` (directory path or synth spec). Deterministic per seed.
    pub fn load(spec: &str, opts: &LoadOptions) -> Result<ImageDataset> {
        opts.validate()?;
        let source: Source = spec.parse()?;
        let labels = match &source {
            Source::Dir(dir) => load_dir(dir, opts)?,
            Source::Synth { kind, count } => synthesize(*kind, *count, opts.label_size, opts.seed),
        };
        Ok(ImageDataset { labels: Arc::new(labels), source: source.to_string() })
    }

    /// Wraps already-prepared labels `[n, 3, L, L]`.
    pub fn from_labels(labels: Tensor, source: impl Into<String>) -> Result<ImageDataset> {
        let s = labels.shape();
        if s.len() != 4 || s[1] != CHANNELS || s[2] != s[3] || !s[2].is_multiple_of(SCALE_FACTOR) {
            return Err(Error::Dataset(format!("labels must be [n,3,4k,4k], got {s:?}")));
        }
        Ok(ImageDataset { labels: Arc::new(labels), source: source.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label_size(&self) -> usize {
        self.labels.shape()[2]
    }

    pub fn input_size(&self) -> usize {
        self.label_size() / SCALE_FACTOR
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn labels(&self) -> &Tensor {
        &self.labels
    }

    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let rows = indices
            .iter()
            .map(|&i| {
                if i < self.len() {
                    Ok(self.labels.row(i))
                } else {
                    Err(Error::Dataset(format!("image index {i} out of range")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Batch::from_labels(Tensor::stack(&rows)?)
    }

    /// The first `n` images in storage order.
    pub fn head(&self, n: usize) -> Result<Batch> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.gather(&idx)
    }
}

fn load_dir(dir: &Path, opts: &LoadOptions) -> Result<Tensor> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no PNG files in {}", dir.display())));
    }
    let mut crop_rng = rng::stream(opts.seed, Stream::Crop);
    let images = files
        .iter()
        .map(|p| load_image(p, opts, &mut crop_rng))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&images)
}

/// Reads one PNG, takes a seeded `crop_size` box and block-averages it down to
/// `label_size`.
pub fn load_image(path: &Path, opts: &LoadOptions, crop_rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let c = opts.crop_size;
    if w < c || h < c {
        return Err(Error::Dataset(format!(
            "{}: {w}x{h} is smaller than the {c}x{c} crop box",
            path.display()
        )));
    }
    let ox = crop_rng.random_range(0..=w - c);
    let oy = crop_rng.random_range(0..=h - c);
    crop_resize(&img, ox, oy, opts)
}

fn crop_resize(img: &image::RgbImage, ox: usize, oy: usize, opts: &LoadOptions) -> Result<Tensor> {
    let c = opts.crop_size;
    let mut crop = vec![0.0; CHANNELS * c * c];
    for y in 0..c {
        for x in 0..c {
            let px = img.get_pixel((ox + x) as u32, (oy + y) as u32);
            for ch in 0..CHANNELS {
                crop[ch * c * c + y * c + x] = pixel_to_unit(px[ch]);
            }
        }
    }
    let crop = Tensor::new(vec![CHANNELS, c, c], crop)?;
    kernels::avg_pool(&crop, c / opts.label_size)
}

/// Procedural label images `[count, 3, size, size]` in `[−1, 1]`.
pub fn synthesize(kind: SynthKind, count: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = rng::stream(seed, Stream::Synthetic);
    let plane = size * size;
    let mut data = vec![0.0; count * CHANNELS * plane];
    for img in data.chunks_mut(CHANNELS * plane) {
        match kind {
            SynthKind::Ramp => {
                // horizontal gradient between two random levels per channel
                for ch in img.chunks_mut(plane) {
                    let lo: f64 = rng.random_range(-1.0..1.0);
                    let hi: f64 = rng.random_range(-1.0..1.0);
                    for (i, v) in ch.iter_mut().enumerate() {
                        let t = (i % size) as f64 / (size.max(2) - 1) as f64;
                        *v = lo + (hi - lo) * t;
                    }
                }
            }
            SynthKind::Checker => {
                let max_p = (size / 2).max(1);
                let period = 1usize << rng.random_range(1..=max_p.ilog2().max(1));
                let (sx, sy) = (rng.random_range(0..period), rng.random_range(0..period));
                for ch in img.chunks_mut(plane) {
                    let a: f64 = rng.random_range(-1.0..1.0);
                    let b: f64 = rng.random_range(-1.0..1.0);
                    for (i, v) in ch.iter_mut().enumerate() {
                        let (x, y) = (i % size + sx, i / size + sy);
                        *v = if (x / period + y / period).is_multiple_of(2) { a } else { b };
                    }
                }
            }
            SynthKind::Blobs => {
                let blobs: Vec<(f64, f64, f64, [f64; CHANNELS])> = (0..3)
                    .map(|_| {
                        let s = size as f64;
                        let amp = [0; CHANNELS].map(|_| rng.random_range(0.0..2.0));
                        (rng.random_range(0.0..s), rng.random_range(0.0..s), rng.random_range(s / 10.0..s / 4.0), amp)
                    })
                    .collect();
                for (c, ch) in img.chunks_mut(plane).enumerate() {
                    for (i, v) in ch.iter_mut().enumerate() {
                        let (x, y) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
                        let s: f64 = blobs
                            .iter()
                            .map(|&(cx, cy, sd, amp)| {
                                amp[c] * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sd * sd)).exp()
                            })
                            .sum();
                        *v = (s - 1.0).clamp(-1.0, 1.0);
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![count, CHANNELS, size, size], data)
}

/// Position of a sampler in its epoch sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub epoch: u64,
    pub cursor: usize,
    pub perm: Vec<usize>,
    pub rng_word_pos: u128,
}

/// Shuffled sampling without replacement; a new permutation starts as soon
/// as the previous one is used up, so batches may straddle epochs.
#[derive(Clone, Debug)]
pub struct Sampler {
    seed: u64,
    n: usize,
    rng: ChaCha8Rng,
    state: SamplerState,
}

impl Sampler {
    pub fn new(seed: u64, n: usize) -> Sampler {
        let rng = rng::stream(seed, Stream::DataOrder);
        let state = SamplerState { epoch: 0, cursor: 0, perm: vec![], rng_word_pos: rng::position(&rng) };
        Sampler { seed, n, rng, state }
    }

    pub fn from_state(seed: u64, n: usize, state: SamplerState) -> Result<Sampler> {
        if state.cursor > state.perm.len() || state.perm.iter().any(|&i| i >= n) {
            return Err(Error::Checkpoint("sampler state does not fit the dataset".into()));
        }
        let rng = rng::restore(seed, Stream::DataOrder, state.rng_word_pos);
        Ok(Sampler { seed, n, rng, state })
    }

    pub fn state(&self) -> &SamplerState {
        &self.state
    }

    pub fn epoch(&self) -> u64 {
        self.state.epoch
    }

    pub fn next_indices(&mut self, batch_size: usize) -> Result<Vec<usize>> {
        if batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if batch_size > self.n {
            return Err(Error::Dataset(format!(
                "batch size {batch_size} exceeds dataset size {}",
                self.n
            )));
        }
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size {
            if self.state.cursor == self.state.perm.len() {
                let mut perm: Vec<usize> = (0..self.n).collect();
                perm.shuffle(&mut self.rng);
                self.state.perm = perm;
                self.state.cursor = 0;
                self.state.epoch += 1;
                self.state.rng_word_pos = rng::position(&self.rng);
            }
            let take = (batch_size - out.len()).min(self.state.perm.len() - self.state.cursor);
            out.extend_from_slice(&self.state.perm[self.state.cursor..self.state.cursor + take]);
            self.state.cursor += take;
        }
        Ok(out)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Number of batches the prefetcher may run ahead, from `ASRL_THREADS`
/// (unset, unparsable or ≤ 1 means inline production).
pub fn prefetch_depth() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .map(|t| t.saturating_sub(1))
        .unwrap_or(0)
}

type Produced = Result<(Batch, SamplerState)>;

enum Mode {
    Inline(Sampler),
    Prefetch {
        rx: Receiver<Produced>,
        handle: Option<JoinHandle<()>>,
    },
}

/// Batch producer. With a prefetch depth above zero a single background
/// thread owns the sampler and hands finished batches over a bounded
/// channel; the sequence is identical either way.
pub struct BatchStream {
    dataset: ImageDataset,
    batch_size: usize,
    consumed: SamplerState,
    mode: Mode,
}

impl BatchStream {
    pub fn new(dataset: ImageDataset, batch_size: usize, sampler: Sampler, depth: usize) -> Result<BatchStream> {
        if batch_size == 0 || batch_size > dataset.len() {
            return Err(Error::Dataset(format!(
                "batch size {batch_size} does not fit dataset size {}",
                dataset.len()
            )));
        }
        let consumed = sampler.state().clone();
        let mode = if depth == 0 {
            Mode::Inline(sampler)
        } else {
            let (tx, rx) = mpsc::sync_channel::<Produced>(depth);
            let ds = dataset.clone();
            let mut sampler = sampler;
            let handle = std::thread::spawn(move || loop {
                let item = sampler
                    .next_indices(batch_size)
                    .and_then(|idx| ds.gather(&idx))
                    .map(|b| (b, sampler.state().clone()));
                let failed = item.is_err();
                if tx.send(item).is_err() || failed {
                    break;
                }
            });
            Mode::Prefetch { rx, handle: Some(handle) }
        };
        Ok(BatchStream { dataset, batch_size, consumed, mode })
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        match &mut self.mode {
            Mode::Inline(s) => {
                let idx = s.next_indices(self.batch_size)?;
                let b = self.dataset.gather(&idx)?;
                self.consumed = s.state().clone();
                Ok(b)
            }
            Mode::Prefetch { rx, .. } => {
                let (b, st) = rx
                    .recv()
                    .map_err(|_| Error::Dataset("prefetch thread stopped".into()))??;
                self.consumed = st;
                Ok(b)
            }
        }
    }

    /// Sampler state after the last batch handed out (what a resume needs).
    pub fn consumed_state(&self) -> &SamplerState {
        &self.consumed
    }

    pub fn dataset(&self) -> &ImageDataset {
        &self.dataset
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        if let Mode::Prefetch { rx, handle } = &mut self.mode {
            // unblock the producer, then wait for it
            let (_, dead) = mpsc::sync_channel(0);
            drop(std::mem::replace(rx, dead));
            if let Some(h) = handle.take() {
                let _ = h.join();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_of_0_to_15_averages_to_7_5() {
        let x = Tensor::new(vec![4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let y = downsample_4x(&x).unwrap();
        let brute: f64 = (0..16).map(|v| v as f64).sum::<f64>() / 16.0;
        assert_eq!(y.data(), &[brute]);
        assert_eq!(brute, 7.5);
    }

    #[test]
    fn downsample_rejects_indivisible() {
        assert!(downsample_4x(&Tensor::zeros(&[1, 3, 6, 8])).is_err());
    }

    #[test]
    fn nearest_then_block_mean_is_identity() {
        let mut r = rng::stream(1, Stream::Noise);
        let x = crate::layers::uniform_tensor(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
        let back = downsample_4x(&upsample_nearest_4x(&x).unwrap()).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn pixel_round_trip_is_exact() {
        for v in 0..=255u8 {
            let u = pixel_to_unit(v);
            assert!((-1.0..=1.0).contains(&u));
            assert_eq!(unit_to_pixel(u), v);
        }
    }

    #[test]
    fn cubic_kernel_partition_of_unity() {
        for i in 0..20 {
            let f = i as f64 / 20.0;
            let s: f64 = (-1..=2).map(|k| cubic_weight(f - k as f64)).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
    }

    #[test]
    fn reflect_examples() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(3, 1), 0);
    }

    #[test]
    fn source_parsing() {
        assert_eq!(
            "synth:ramp".parse::<Source>().unwrap(),
            Source::Synth { kind: SynthKind::Ramp, count: DEFAULT_SYNTH_COUNT }
        );
        assert_eq!(
            "synth:blobs:8".parse::<Source>().unwrap(),
            Source::Synth { kind: SynthKind::Blobs, count: 8 }
        );
        assert!("synth:stripes".parse::<Source>().is_err());
        assert!("synth:ramp:0".parse::<Source>().is_err());
        assert_eq!("faces/".parse::<Source>().unwrap(), Source::Dir("faces/".into()));
    }

    #[test]
    fn synthetic_images_are_in_range_and_seeded() {
        for kind in [SynthKind::Ramp, SynthKind::Checker, SynthKind::Blobs] {
            let a = synthesize(kind, 5, 16, 3);
            assert_eq!(a.shape(), &[5, 3, 16, 16]);
            assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(a, synthesize(kind, 5, 16, 3));
            assert_ne!(a, synthesize(kind, 5, 16, 4));
        }
    }

    #[test]
    fn ramp_is_horizontal_gradient() {
        let a = synthesize(SynthKind::Ramp, 1, 8, 0);
        let d = a.data();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(d[y * 8 + x], d[x]);
            }
            let step = d[1] - d[0];
            for x in 1..8 {
                assert!((d[x] - d[x - 1] - step).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampler_epochs_are_permutations() {
        let mut s = Sampler::new(5, 10);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_indices(2).unwrap()).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(s.epoch(), 1);
        // straddles into the next epoch
        s.next_indices(3).unwrap();
        assert_eq!(s.epoch(), 2);
        assert!(s.next_indices(11).is_err());
    }

    #[test]
    fn sampler_resumes_from_state() {
        let mut a = Sampler::new(9, 7);
        a.next_indices(5).unwrap();
        let st = a.state().clone();
        let mut b = Sampler::from_state(9, 7, st).unwrap();
        for _ in 0..6 {
            assert_eq!(a.next_indices(3).unwrap(), b.next_indices(3).unwrap());
        }
    }

    #[test]
    fn prefetch_matches_inline() {
        let ds = ImageDataset::load("synth:checker:12", &LoadOptions { label_size: 16, crop_size: 16, seed: 2 }).unwrap();
        let mut inline = BatchStream::new(ds.clone(), 5, Sampler::new(2, 12), 0).unwrap();
        let mut pre = BatchStream::new(ds, 5, Sampler::new(2, 12), 3).unwrap();
        for _ in 0..7 {
            let (a, b) = (inline.next_batch().unwrap(), pre.next_batch().unwrap());
            assert_eq!(a, b);
            assert_eq!(a.inputs, downsample_4x(&a.labels).unwrap());
            assert_eq!(inline.consumed_state(), pre.consumed_state());
        }
    }
}
