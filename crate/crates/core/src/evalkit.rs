//! Metrics and diagnostics: L1 consistency, PSNR, exact 1-D Wasserstein-1,
//! duplicate rate, image grids, curve plots and the toy critic experiment.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datapipe::{bicubic_upsample_4x, downsample_4x, unit_to_pixel, upsample_nearest_4x, Batch};
use crate::diffgraph::Graph;
use crate::error::{Error, Result};
use crate::layers::{BnMode, ForwardCtx, Layer, LayerSpec};
use crate::objectives::wgan_gp_d_loss;
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;
use crate::trainer::{moving_average, TrainRecord};

/// Peak-to-peak range of `[−1, 1]` pixels.
pub const PSNR_MAX: f64 = 2.0;
pub const SMOOTH_WINDOW: usize = 100;

/// `mean |f_d(generated) − z|` over batch and pixels.
pub fn l1_metric(generated: &Tensor, input_z: &Tensor) -> Result<f64> {
    let down = downsample_4x(generated)?;
    mean_abs_diff(&down, input_z)
}

pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mean_abs_diff", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// `10·log10(max²/MSE)`; `+∞` when the inputs are identical.
pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (max_val * max_val / mse).log10())
    }
}

/// Exact W1 between the empirical distributions of `a` and `b`.
///
/// Equal counts use the sorted-pairing formula; unequal counts integrate
/// `|F_a − F_b|` over the merged support.
pub fn w1_exact_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain { op: "w1_exact_1d", detail: "empty sample set".into() });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "w1_exact_1d" });
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    if sa.len() == sb.len() {
        return Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / sa.len() as f64);
    }
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = sa[0].min(sb[0]);
    let mut total = 0.0;
    while i < sa.len() || j < sb.len() {
        let next = match (sa.get(i), sb.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < sa.len() && sa[i] == next {
            i += 1;
        }
        while j < sb.len() && sb[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

/// Fraction of images whose nearest neighbour (mean absolute pixel
/// distance) is closer than `tau`.
pub fn duplicate_rate(images: &Tensor, tau: f64) -> Result<f64> {
    if images.rank() < 2 || images.shape()[0] < 2 {
        return Err(Error::shape("duplicate_rate", "needs a batch of at least 2 images"));
    }
    if !(tau > 0.0) {
        return Err(Error::Domain { op: "duplicate_rate", detail: format!("tau {tau} must be > 0") });
    }
    let n = images.shape()[0];
    let rows: Vec<&[f64]> = images.data().chunks(images.row_len()).collect();
    let dup = (0..n)
        .filter(|&i| {
            (0..n).filter(|&j| j != i).any(|j| {
                let d = rows[i].iter().zip(rows[j]).map(|(x, y)| (x - y).abs()).sum::<f64>() / rows[i].len() as f64;
                d < tau
            })
        })
        .count();
    Ok(dup as f64 / n as f64)
}

/// Average ranks (ties share the mean rank).
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::shape("spearman", format!("lengths {} and {}", a.len(), b.len())));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

/// PSNR that serializes `+∞` as the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Psnr(pub f64);

impl Serialize for Psnr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr(v)),
            Raw::Str(s) if s == "inf" => Ok(Psnr(f64::INFINITY)),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad psnr {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub l1: f64,
    pub psnr_db: Psnr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct W1Row {
    pub shift: f64,
    pub true_w1: f64,
    /// `−J_D` of the trained critic on the evaluation samples.
    pub critic_estimate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean L1 consistency `|f_d(x̃) − z|` of the generated images.
    pub l1: f64,
    /// PSNR of the whole generated batch against the labels.
    pub psnr_db: Psnr,
    pub duplicate_rate: f64,
    pub w1_table: Option<Vec<W1Row>>,
    /// Mean absolute difference of generated images from labels.
    pub label_l1: f64,
    pub bicubic_l1: f64,
    pub bicubic_label_l1: f64,
    pub bicubic_psnr_db: Psnr,
    pub per_image: Vec<ImageScore>,
}

/// Scores `generated` against a batch and the bicubic baseline.
pub fn evaluate(batch: &Batch, generated: &Tensor, tau: f64) -> Result<EvalReport> {
    if generated.shape() != batch.labels.shape() {
        return Err(Error::shape(
            "evaluate",
            format!("generated {:?} vs labels {:?}", generated.shape(), batch.labels.shape()),
        ));
    }
    let bicubic = bicubic_upsample_4x(&batch.inputs)?;
    let n = batch.len();
    let mut per_image = Vec::with_capacity(n);
    for i in 0..n {
        let (gi, li, zi) = (generated.row(i), batch.labels.row(i), batch.inputs.row(i));
        let p = psnr(&gi, &li, PSNR_MAX)?;
        per_image.push(ImageScore { l1: l1_metric(&gi, &zi)?, psnr_db: Psnr(p) });
    }
    let duplicate_rate = if n >= 2 { duplicate_rate(generated, tau)? } else { 0.0 };
    Ok(EvalReport {
        l1: l1_metric(generated, &batch.inputs)?,
        psnr_db: Psnr(psnr(generated, &batch.labels, PSNR_MAX)?),
        duplicate_rate,
        w1_table: None,
        label_l1: mean_abs_diff(generated, &batch.labels)?,
        bicubic_l1: l1_metric(&bicubic, &batch.inputs)?,
        bicubic_label_l1: mean_abs_diff(&bicubic, &batch.labels)?,
        bicubic_psnr_db: Psnr(psnr(&bicubic, &batch.labels, PSNR_MAX)?),
        per_image,
    })
}

const GRID_PAD: u32 = 2;

/// Writes a PNG mosaic with one row per image set (input, bicubic, label,
/// output) and one column per image. Inputs smaller than the labels are
/// shown nearest-upscaled.
pub fn emit_grid(rows: &[&Tensor], path: &Path) -> Result<()> {
    let first = rows.first().ok_or_else(|| Error::shape("emit_grid", "no image rows"))?;
    let cols = first.shape()[0];
    let side = rows.iter().map(|r| r.shape()[2]).max().unwrap_or(0);
    let mut prepared = Vec::with_capacity(rows.len());
    for r in rows {
        let s = r.shape();
        if s.len() != 4 || s[1] != 3 || s[0] != cols || s[2] != s[3] {
            return Err(Error::shape("emit_grid", format!("image set {s:?} vs {cols} columns")));
        }
        let mut t = (*r).clone();
        while t.shape()[2] < side {
            t = upsample_nearest_4x(&t)?;
        }
        if t.shape()[2] != side {
            return Err(Error::shape("emit_grid", format!("cannot scale {} to {side}", s[2])));
        }
        prepared.push(t);
    }
    let side_u = side as u32;
    let w = cols as u32 * (side_u + GRID_PAD) + GRID_PAD;
    let h = rows.len() as u32 * (side_u + GRID_PAD) + GRID_PAD;
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    let plane = side * side;
    for (ri, t) in prepared.iter().enumerate() {
        for ci in 0..cols {
            let d = &t.data()[ci * 3 * plane..(ci + 1) * 3 * plane];
            let (x0, y0) = (GRID_PAD + ci as u32 * (side_u + GRID_PAD), GRID_PAD + ri as u32 * (side_u + GRID_PAD));
            for y in 0..side {
                for x in 0..side {
                    let px = [0, 1, 2].map(|c| unit_to_pixel(d[c * plane + y * side + x]));
                    img.put_pixel(x0 + x as u32, y0 + y as u32, image::Rgb(px));
                }
            }
        }
    }
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Grid dimensions `(width, height)` produced by [`emit_grid`].
pub fn grid_size(rows: usize, cols: usize, side: usize) -> (u32, u32) {
    let s = side as u32 + GRID_PAD;
    (cols as u32 * s + GRID_PAD, rows as u32 * s + GRID_PAD)
}

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 30.0;

fn svg_panel(out: &mut String, index: usize, title: &str, xs: &[f64], ys: &[f64]) {
    let x_off = index as f64 * (PANEL_W + MARGIN) + MARGIN;
    let (xmin, xmax) = (xs.first().copied().unwrap_or(0.0), xs.last().copied().unwrap_or(1.0));
    let ymin = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let ymax = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let xr = if xmax > xmin { xmax - xmin } else { 1.0 };
    let yr = if ymax > ymin { ymax - ymin } else { 1.0 };
    let _ = writeln!(
        out,
        r##"<g><rect x="{x_off:.1}" y="{MARGIN:.1}" width="{PANEL_W:.1}" height="{PANEL_H:.1}" fill="none" stroke="#999"/>"##
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{title}</text>"#,
        x_off + PANEL_W / 2.0,
        MARGIN - 8.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{x_off:.1}" y="{:.1}" font-size="10">{ymin:.4} .. {ymax:.4}</text>"#,
        MARGIN + PANEL_H + 14.0
    );
    let mut d = String::new();
    for (i, (x, y)) in xs.iter().zip(ys).enumerate() {
        let px = x_off + (x - xmin) / xr * PANEL_W;
        let py = MARGIN + PANEL_H - (y - ymin) / yr * PANEL_H;
        let _ = write!(d, "{}{px:.2},{py:.2}", if i == 0 { "M" } else { " L" });
    }
    let _ = writeln!(out, r##"<path d="{d}" fill="none" stroke="#1f77b4" stroke-width="1.2"/></g>"##);
}

/// Renders named series side by side, one panel each.
pub fn render_panels(xs: &[f64], panels: &[(&str, Vec<f64>)]) -> String {
    let width = panels.len() as f64 * (PANEL_W + MARGIN) + MARGIN;
    let height = PANEL_H + 2.0 * MARGIN + 10.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    for (i, (title, ys)) in panels.iter().enumerate() {
        svg_panel(&mut out, i, title, xs, ys);
    }
    out.push_str("</svg>\n");
    out
}

/// Three-panel SVG (l1, j_d, j_g vs g_iter), each smoothed with a window of
/// [`SMOOTH_WINDOW`].
pub fn curves_svg(records: &[TrainRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Dataset("no training records to plot".into()));
    }
    let xs: Vec<f64> = records.iter().map(|r| r.g_iter as f64).collect();
    let col = |f: fn(&TrainRecord) -> f64| moving_average(&records.iter().map(f).collect::<Vec<_>>(), SMOOTH_WINDOW);
    let panels = [
        ("l1", col(|r| r.l1_metric)?),
        ("j_d", col(|r| r.j_d)?),
        ("j_g", col(|r| r.j_g)?),
    ];
    Ok(render_panels(&xs, &panels))
}

pub fn emit_curves(records: &[TrainRecord], path: &Path) -> Result<()> {
    let svg = curves_svg(records)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// Setup of the 1-D critic experiment: real samples `N(0,1)`, fake samples
/// `N(s,1)`, a three-layer MLP critic trained with the penalized loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyW1Config {
    pub shifts: Vec<f64>,
    pub steps: usize,
    pub batch: usize,
    pub hidden: usize,
    pub lambda_gp: f64,
    pub eval_samples: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for ToyW1Config {
    fn default() -> Self {
        ToyW1Config {
            shifts: vec![0.0, 0.5, 1.0, 2.0],
            steps: 2000,
            batch: 64,
            hidden: 64,
            lambda_gp: 10.0,
            eval_samples: 10_000,
            optimizer: crate::optim::pair_objective_optimizer(crate::objectives::ObjectiveKind::WganGp),
            seed: 0,
        }
    }
}

struct ToyCritic {
    layers: Vec<Layer>,
}

impl ToyCritic {
    fn new(hidden: usize, seed: u64) -> Result<ToyCritic> {
        let mut r = rng::stream(seed, Stream::Init);
        let specs = [
            LayerSpec::Dense { inputs: 1, outputs: hidden },
            LayerSpec::Dense { inputs: hidden, outputs: hidden },
            LayerSpec::Dense { inputs: hidden, outputs: 1 },
        ];
        let layers = specs
            .into_iter()
            .enumerate()
            .map(|(i, s)| Layer::new(format!("fc{}", i + 1), s, &mut r))
            .collect::<Result<Vec<_>>>()?;
        Ok(ToyCritic { layers })
    }

    fn forward(&self, ctx: &mut ForwardCtx<'_>, x: crate::diffgraph::NodeId) -> Result<crate::diffgraph::NodeId> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(i, ctx, h)?;
            if i + 1 < self.layers.len() {
                h = ctx.graph.relu(h)?;
            }
        }
        let n = ctx.graph.shape(h)[0];
        ctx.graph.reshape(h, &[n])
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut().map(|(_, t)| t)).collect()
    }

    /// Penalized critic loss on one batch; returns the loss value and, when
    /// `grads` is set, parameter gradients.
    fn loss(
        &self,
        real: &Tensor,
        fake: &Tensor,
        eps: &Tensor,
        lambda: f64,
        grads: bool,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let params = self
            .layers
            .iter()
            .flat_map(|l| l.params.iter())
            .map(|(_, t)| if grads { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect::<Result<Vec<_>>>()?;
        let xr = g.constant(real.clone())?;
        let xf = g.constant(fake.clone())?;
        let x_hat = g.input(crate::objectives::interpolate(real, fake, eps)?)?;
        let pass = |g: &mut Graph, x| self.forward(&mut ForwardCtx::with_params(g, BnMode::Eval, params.clone()), x);
        let dr = pass(&mut g, xr)?;
        let df = pass(&mut g, xf)?;
        let dh = pass(&mut g, x_hat)?;
        let pen = g.gradient_penalty(dh, x_hat)?;
        let j = wgan_gp_d_loss(&mut g, dr, df, pen, lambda)?;
        let value = g.value(j).item()?;
        if !grads {
            return Ok((value, vec![]));
        }
        let ids = g.gradients(j, &params)?;
        Ok((value, ids.into_iter().map(|id| g.value(id).clone()).collect()))
    }
}

fn normal_samples<R: Rng>(r: &mut R, n: usize, mean: f64) -> Vec<f64> {
    (0..n).map(|_| mean + Distribution::<f64>::sample(&StandardNormal, r)).collect()
}

/// Trains one critic per shift and reports `−J_D` next to the exact W1 of
/// the evaluation samples.
pub fn run_toy_w1(cfg: &ToyW1Config) -> Result<Vec<W1Row>> {
    if cfg.steps == 0 || cfg.batch < 2 || cfg.hidden == 0 || cfg.eval_samples < 2 {
        return Err(Error::config("toyw1", "steps, hidden >= 1; batch and eval_samples >= 2"));
    }
    cfg.optimizer.validate("toyw1.optimizer")?;
    let mut rows = Vec::with_capacity(cfg.shifts.len());
    for (k, &shift) in cfg.shifts.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(k as u64);
        let mut critic = ToyCritic::new(cfg.hidden, seed)?;
        let shapes: Vec<Vec<usize>> = critic.params_mut().iter().map(|t| t.shape().to_vec()).collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let mut opt = OptimizerState::new(cfg.optimizer, &shape_refs);
        let mut data = rng::stream(seed, Stream::Synthetic);
        let mut eps_rng = rng::stream(seed, Stream::Interpolation);
        for _ in 0..cfg.steps {
            let real = Tensor::new(vec![cfg.batch, 1], normal_samples(&mut data, cfg.batch, 0.0))?;
            let fake = Tensor::new(vec![cfg.batch, 1], normal_samples(&mut data, cfg.batch, shift))?;
            let eps = Tensor::new(vec![cfg.batch], (0..cfg.batch).map(|_| eps_rng.random::<f64>()).collect())?;
            let (j, grads) = critic.loss(&real, &fake, &eps, cfg.lambda_gp, true)?;
            if !j.is_finite() {
                return Err(Error::Diverged { term: "toy critic loss" });
            }
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            opt.step(&mut critic.params_mut(), &grad_refs)?;
        }
        let mut eval = rng::stream(seed, Stream::Noise);
        let n = cfg.eval_samples;
        let a = normal_samples(&mut eval, n, 0.0);
        // shifted copies of the real draws: N(s, 1) marginals, and identical
        // samples when s = 0
        let b: Vec<f64> = a.iter().map(|x| x + shift).collect();
        let eps = Tensor::new(vec![n], (0..n).map(|_| eval.random::<f64>()).collect())?;
        let (j, _) = critic.loss(
            &Tensor::new(vec![n, 1], a.clone())?,
            &Tensor::new(vec![n, 1], b.clone())?,
            &eps,
            cfg.lambda_gp,
            false,
        )?;
        rows.push(W1Row { shift, true_w1: w1_exact_1d(&a, &b)?, critic_estimate: -j });
    }
    Ok(rows)
}
