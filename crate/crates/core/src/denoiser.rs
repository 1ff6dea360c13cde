//! Conditional noise predictor: a two-layer 3x3x3 spatio-temporal
//! convolution net (conv, tanh, conv) over the video channels plus
//! spatially broadcast conditioning and timestep channels.
//!
//! Input channels, in order: the video, a trainable linear projection of the
//! prompt embedding, and a fixed sinusoidal timestep embedding. The last two
//! groups are constant over the whole video, so their first-layer response
//! only depends on how many kernel taps fall inside the zero padding at each
//! position. That response is computed once per border class instead of by
//! full convolution.
//!
//! Gradients are derived by hand; `tests/gradient_check.rs` compares them
//! against central finite differences.

use std::fs;
use std::ops::Range;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::losses::{
    composite_loss_and_grad, ewc_penalty_and_grad, reconstruction_loss_and_grad, LossBreakdown,
    LossConfig,
};
use crate::numerics::{Rng, Tensor};

const TAPS: usize = 27;
const BORDER_CLASSES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub video_channels: usize,
    pub hidden_channels: usize,
    pub time_embed_dim: usize,
    pub cond_dim: usize,
    pub cond_channels: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        DenoiserArch {
            video_channels: 3,
            hidden_channels: 8,
            time_embed_dim: 8,
            cond_dim: crate::retrieval::EMBEDDING_DIM,
            cond_channels: 4,
        }
    }
}

/// Index ranges of each parameter group inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub proj_weight: Range<usize>,
    pub proj_bias: Range<usize>,
    pub conv1_weight: Range<usize>,
    pub conv1_bias: Range<usize>,
    pub conv2_weight: Range<usize>,
    pub conv2_bias: Range<usize>,
}

impl ParamLayout {
    pub fn biases(&self) -> [Range<usize>; 3] {
        [
            self.proj_bias.clone(),
            self.conv1_bias.clone(),
            self.conv2_bias.clone(),
        ]
    }
}

impl DenoiserArch {
    pub fn validate(&self) -> Result<()> {
        let a = self;
        if a.video_channels == 0 || a.hidden_channels == 0 || a.cond_dim == 0 {
            return Err(Error::invalid(format!("degenerate denoiser architecture {a:?}")));
        }
        if !a.time_embed_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "time embedding dimension must be even, got {}",
                a.time_embed_dim
            )));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.video_channels + self.cond_channels + self.time_embed_dim
    }

    pub fn layout(&self) -> ParamLayout {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        ParamLayout {
            proj_weight: take(self.cond_channels * self.cond_dim),
            proj_bias: take(self.cond_channels),
            conv1_weight: take(self.hidden_channels * self.in_channels() * TAPS),
            conv1_bias: take(self.hidden_channels),
            conv2_weight: take(self.video_channels * self.hidden_channels * TAPS),
            conv2_bias: take(self.video_channels),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().conv2_bias.end
    }

    fn check_input(&self, z: &Tensor, cond: &[f64]) -> Result<[usize; 4]> {
        let dims = z.dims4()?;
        if dims[0] != self.video_channels {
            return Err(Error::Shape(format!(
                "denoiser expects {} video channels, got {}",
                self.video_channels, dims[0]
            )));
        }
        if cond.len() != self.cond_dim {
            return Err(Error::Shape(format!(
                "conditioning has {} entries, expected {}",
                cond.len(),
                self.cond_dim
            )));
        }
        Ok(dims)
    }
}

/// Flat parameter vector of a denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams(Vec<f64>);

impl DenoiserParams {
    pub fn from_vec(arch: &DenoiserArch, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters for an architecture of {}",
                values.len(),
                arch.param_count()
            )));
        }
        Ok(DenoiserParams(values))
    }

    pub fn zeros(arch: &DenoiserArch) -> Self {
        DenoiserParams(vec![0.0; arch.param_count()])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn distance(&self, other: &DenoiserParams) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Weights drawn from `N(0, 1/fan_in)`, biases zero.
pub fn init_params(arch: &DenoiserArch, seed: u64) -> DenoiserParams {
    let layout = arch.layout();
    let mut rng = Rng::seed_from(seed);
    let mut p = vec![0.0; arch.param_count()];
    let groups = [
        (layout.proj_weight.clone(), arch.cond_dim),
        (layout.conv1_weight.clone(), arch.in_channels() * TAPS),
        (layout.conv2_weight.clone(), arch.hidden_channels * TAPS),
    ];
    for (range, fan_in) in groups {
        let s = 1.0 / (fan_in as f64).sqrt();
        for w in &mut p[range] {
            *w = s * rng.normal();
        }
    }
    DenoiserParams(p)
}

/// Sinusoidal embedding of a timestep: `sin(t f_k)` then `cos(t f_k)` with
/// geometrically spaced frequencies.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

/// Borrowed view of an architecture plus parameters; the callable model.
#[derive(Debug, Clone, Copy)]
pub struct Denoiser<'a> {
    pub arch: &'a DenoiserArch,
    pub params: &'a [f64],
}

impl<'a> Denoiser<'a> {
    pub fn new(arch: &'a DenoiserArch, params: &'a DenoiserParams) -> Self {
        Denoiser {
            arch,
            params: params.as_slice(),
        }
    }

    pub fn predict(&self, z_t: &Tensor, t: usize, cond: &[f64]) -> Result<Tensor> {
        Ok(forward(self.arch, self.params, z_t, t, cond)?.output)
    }
}

impl NoisePredictor for Denoiser<'_> {
    fn predict_noise(&self, z_t: &Tensor, t: usize, cond: &[f64]) -> Result<Tensor> {
        self.predict(z_t, t, cond)
    }
}

/// Frozen copy of the student taken before it starts learning a new pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSnapshot {
    arch: DenoiserArch,
    params: DenoiserParams,
}

impl TeacherSnapshot {
    pub fn params(&self) -> &DenoiserParams {
        &self.params
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    pub fn model(&self) -> Denoiser<'_> {
        Denoiser::new(&self.arch, &self.params)
    }

    /// FNV-1a over the parameter bit patterns; changes iff any bit changes.
    pub fn fingerprint(&self) -> u64 {
        params_fingerprint(&self.params)
    }
}

pub fn params_fingerprint(params: &DenoiserParams) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in params.as_slice() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

pub fn snapshot(arch: &DenoiserArch, params: &DenoiserParams) -> Result<TeacherSnapshot> {
    if !params.is_finite() {
        return Err(Error::NonFinite("cannot snapshot non-finite parameters".into()));
    }
    Ok(TeacherSnapshot {
        arch: *arch,
        params: params.clone(),
    })
}

// ---------------------------------------------------------------------------
// Convolution kernels

#[derive(Debug, Clone, Copy)]
struct Grid {
    t: usize,
    h: usize,
    w: usize,
}

impl Grid {
    fn len(&self) -> usize {
        self.t * self.h * self.w
    }
}

fn tap_offset(k: usize) -> (isize, isize, isize) {
    ((k / 9) as isize - 1, ((k / 3) % 3) as isize - 1, (k % 3) as isize - 1)
}

/// Output positions `i` along an axis of length `n` whose input `i + d` is in
/// bounds.
fn valid_range(n: usize, d: isize) -> Range<usize> {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    lo..hi.max(lo)
}

/// Visits every in-bounds (output row, input row) pair of a tap. The closure
/// receives the output row start, input row start (already shifted by the
/// tap's `w` offset) and row length.
fn for_tap_rows(g: Grid, k: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (dt, dh, dw) = tap_offset(k);
    let wr = valid_range(g.w, dw);
    if wr.is_empty() {
        return;
    }
    let len = wr.end - wr.start;
    for t in valid_range(g.t, dt) {
        let ti = (t as isize + dt) as usize;
        for h in valid_range(g.h, dh) {
            let hi = (h as isize + dh) as usize;
            let out = (t * g.h + h) * g.w + wr.start;
            let inp = (ti * g.h + hi) * g.w + (wr.start as isize + dw) as usize;
            f(out, inp, len);
        }
    }
}

/// `y += conv(x, kernel)` for one (output, input) channel pair.
fn conv_accumulate(x: &[f64], kernel: &[f64], y: &mut [f64], g: Grid) {
    for (k, &wv) in kernel.iter().enumerate() {
        for_tap_rows(g, k, |o, i, n| {
            for (yv, xv) in y[o..o + n].iter_mut().zip(&x[i..i + n]) {
                *yv += wv * xv;
            }
        });
    }
}

/// `gk[k] += sum_p dy[p] * x[p + tap_k]`.
fn conv_weight_grad(x: &[f64], dy: &[f64], gk: &mut [f64], g: Grid) {
    for (k, acc) in gk.iter_mut().enumerate() {
        let mut s = 0.0;
        for_tap_rows(g, k, |o, i, n| {
            s += dy[o..o + n]
                .iter()
                .zip(&x[i..i + n])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        });
        *acc += s;
    }
}

/// `dx[p + tap_k] += kernel[k] * dy[p]`.
fn conv_input_grad(dy: &[f64], kernel: &[f64], dx: &mut [f64], g: Grid) {
    for (k, &wv) in kernel.iter().enumerate() {
        for_tap_rows(g, k, |o, i, n| {
            for (xv, yv) in dx[i..i + n].iter_mut().zip(&dy[o..o + n]) {
                *xv += wv * yv;
            }
        });
    }
}

/// Border class along one axis: bit 0 set when a previous neighbour exists,
/// bit 1 when a next neighbour exists.
fn axis_class(i: usize, n: usize) -> usize {
    (i > 0) as usize | (((i + 1) < n) as usize) << 1
}

fn axis_tap_valid(d: isize, class: usize) -> bool {
    match d {
        -1 => class & 1 != 0,
        1 => class & 2 != 0,
        _ => true,
    }
}

/// `TAP_VALID[class][k]`: whether tap `k` reads inside the volume for a
/// position of the given border class.
fn tap_valid_table() -> &'static [[bool; TAPS]; BORDER_CLASSES] {
    static TABLE: OnceLock<[[bool; TAPS]; BORDER_CLASSES]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [[false; TAPS]; BORDER_CLASSES];
        for (cls, row) in table.iter_mut().enumerate() {
            let (ct, ch, cw) = (cls >> 4, (cls >> 2) & 3, cls & 3);
            for (k, v) in row.iter_mut().enumerate() {
                let (dt, dh, dw) = tap_offset(k);
                *v = axis_tap_valid(dt, ct) && axis_tap_valid(dh, ch) && axis_tap_valid(dw, cw);
            }
        }
        table
    })
}

fn position_classes(g: Grid) -> Vec<u8> {
    let mut out = Vec::with_capacity(g.len());
    for t in 0..g.t {
        let ct = axis_class(t, g.t);
        for h in 0..g.h {
            let ch = axis_class(h, g.h);
            for w in 0..g.w {
                out.push(((ct << 4) | (ch << 2) | axis_class(w, g.w)) as u8);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Forward / backward

struct ForwardCache {
    grid: Grid,
    classes: Vec<u8>,
    /// Values of the broadcast channels: projected conditioning then time.
    const_vals: Vec<f64>,
    hidden: Vec<f64>,
    output: Tensor,
}

fn forward(arch: &DenoiserArch, params: &[f64], z: &Tensor, t: usize, cond: &[f64]) -> Result<ForwardCache> {
    let [vc, nt, nh, nw] = arch.check_input(z, cond)?;
    if params.len() != arch.param_count() {
        return Err(Error::Shape(format!(
            "{} parameters for an architecture of {}",
            params.len(),
            arch.param_count()
        )));
    }
    let layout = arch.layout();
    let g = Grid { t: nt, h: nh, w: nw };
    let n = g.len();
    let in_ch = arch.in_channels();
    let hid = arch.hidden_channels;

    let proj_w = &params[layout.proj_weight.clone()];
    let proj_b = &params[layout.proj_bias.clone()];
    let mut const_vals: Vec<f64> = (0..arch.cond_channels)
        .map(|j| {
            proj_b[j]
                + proj_w[j * arch.cond_dim..(j + 1) * arch.cond_dim]
                    .iter()
                    .zip(cond)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect();
    const_vals.extend(time_embedding(t, arch.time_embed_dim));

    let w1 = &params[layout.conv1_weight.clone()];
    let b1 = &params[layout.conv1_bias.clone()];
    let classes = position_classes(g);
    let valid = tap_valid_table();
    let zd = z.data();
    let mut hidden = vec![0.0; hid * n];
    for o in 0..hid {
        let y = &mut hidden[o * n..(o + 1) * n];
        let kernels = &w1[o * in_ch * TAPS..(o + 1) * in_ch * TAPS];
        for c in 0..vc {
            conv_accumulate(&zd[c * n..(c + 1) * n], &kernels[c * TAPS..(c + 1) * TAPS], y, g);
        }
        let mut folded = [0.0; TAPS];
        for (j, &v) in const_vals.iter().enumerate() {
            let kern = &kernels[(vc + j) * TAPS..(vc + j + 1) * TAPS];
            for (f, &kv) in folded.iter_mut().zip(kern) {
                *f += v * kv;
            }
        }
        let mut per_class = [0.0; BORDER_CLASSES];
        for (cls, s) in per_class.iter_mut().enumerate() {
            *s = folded
                .iter()
                .zip(&valid[cls])
                .filter(|(_, &ok)| ok)
                .map(|(f, _)| f)
                .sum();
        }
        for (yv, &cls) in y.iter_mut().zip(&classes) {
            *yv = (*yv + per_class[cls as usize] + b1[o]).tanh();
        }
    }

    let w2 = &params[layout.conv2_weight.clone()];
    let b2 = &params[layout.conv2_bias.clone()];
    let mut out = vec![0.0; vc * n];
    for o in 0..vc {
        let y = &mut out[o * n..(o + 1) * n];
        for c in 0..hid {
            let kern = &w2[(o * hid + c) * TAPS..(o * hid + c + 1) * TAPS];
            conv_accumulate(&hidden[c * n..(c + 1) * n], kern, y, g);
        }
        for v in y.iter_mut() {
            *v += b2[o];
        }
    }
    let output = Tensor::new(z.shape().to_vec(), out)?;
    if !output.is_finite() {
        return Err(Error::NonFinite("denoiser output".into()));
    }
    Ok(ForwardCache {
        grid: g,
        classes,
        const_vals,
        hidden,
        output,
    })
}

fn backward(
    arch: &DenoiserArch,
    params: &[f64],
    z: &Tensor,
    cond: &[f64],
    cache: &ForwardCache,
    d_out: &Tensor,
) -> Vec<f64> {
    let layout = arch.layout();
    let g = cache.grid;
    let n = g.len();
    let vc = arch.video_channels;
    let hid = arch.hidden_channels;
    let in_ch = arch.in_channels();
    let mut grad = vec![0.0; params.len()];
    let dy = d_out.data();

    // Second layer.
    let w2 = &params[layout.conv2_weight.clone()];
    let mut d_hidden = vec![0.0; hid * n];
    {
        let (head, tail) = grad.split_at_mut(layout.conv2_bias.start);
        let gw2 = &mut head[layout.conv2_weight.clone()];
        let gb2 = &mut tail[..vc];
        for o in 0..vc {
            let dyo = &dy[o * n..(o + 1) * n];
            gb2[o] = dyo.iter().sum();
            for c in 0..hid {
                let r = (o * hid + c) * TAPS..(o * hid + c + 1) * TAPS;
                conv_weight_grad(&cache.hidden[c * n..(c + 1) * n], dyo, &mut gw2[r.clone()], g);
                conv_input_grad(dyo, &w2[r], &mut d_hidden[c * n..(c + 1) * n], g);
            }
        }
    }

    // Through tanh.
    for (d, h) in d_hidden.iter_mut().zip(&cache.hidden) {
        *d *= 1.0 - h * h;
    }

    // First layer.
    let w1 = &params[layout.conv1_weight.clone()];
    let valid = tap_valid_table();
    let zd = z.data();
    let mut d_const = vec![0.0; cache.const_vals.len()];
    for o in 0..hid {
        let da = &d_hidden[o * n..(o + 1) * n];
        grad[layout.conv1_bias.start + o] = da.iter().sum();
        let wbase = layout.conv1_weight.start + o * in_ch * TAPS;
        for c in 0..vc {
            let r = wbase + c * TAPS..wbase + (c + 1) * TAPS;
            conv_weight_grad(&zd[c * n..(c + 1) * n], da, &mut grad[r], g);
        }
        let mut by_class = [0.0; BORDER_CLASSES];
        for (&d, &cls) in da.iter().zip(&cache.classes) {
            by_class[cls as usize] += d;
        }
        let mut d_folded = [0.0; TAPS];
        for (cls, &s) in by_class.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            for (df, &ok) in d_folded.iter_mut().zip(&valid[cls]) {
                if ok {
                    *df += s;
                }
            }
        }
        let kernels = &w1[o * in_ch * TAPS..(o + 1) * in_ch * TAPS];
        for (j, &v) in cache.const_vals.iter().enumerate() {
            let ch = vc + j;
            let kern = &kernels[ch * TAPS..(ch + 1) * TAPS];
            let gk = &mut grad[wbase + ch * TAPS..wbase + (ch + 1) * TAPS];
            let mut dv = 0.0;
            for k in 0..TAPS {
                gk[k] += v * d_folded[k];
                dv += kern[k] * d_folded[k];
            }
            d_const[j] += dv;
        }
    }

    // Conditioning projection; the time channels have no parameters.
    for j in 0..arch.cond_channels {
        let dv = d_const[j];
        grad[layout.proj_bias.start + j] = dv;
        let row = layout.proj_weight.start + j * arch.cond_dim;
        for (gw, &c) in grad[row..row + arch.cond_dim].iter_mut().zip(cond) {
            *gw = dv * c;
        }
    }
    grad
}

/// One training example: a noised latent, its timestep and conditioning, and
/// the noise that was added.
#[derive(Debug, Clone, Copy)]
pub struct TrainingExample<'a> {
    pub z_t: &'a Tensor,
    pub t: usize,
    pub cond: &'a [f64],
    pub target_noise: &'a Tensor,
}

/// The objective minimised by a training strategy.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// Noise reconstruction only.
    Reconstruction,
    /// Distillation against a frozen teacher output plus temporal
    /// consistency.
    Composite {
        teacher_out: &'a Tensor,
        config: &'a LossConfig,
        first_task: bool,
    },
    /// Noise reconstruction plus a quadratic pull toward anchor parameters.
    Penalized {
        anchor: &'a [f64],
        fisher: &'a [f64],
        lambda: f64,
    },
}

struct Evaluated {
    cache: ForwardCache,
    breakdown: LossBreakdown,
    d_pred: Tensor,
    penalty_grad: Option<Vec<f64>>,
}

fn evaluate(
    arch: &DenoiserArch,
    p: &[f64],
    example: &TrainingExample<'_>,
    objective: &Objective<'_>,
) -> Result<Evaluated> {
    let cache = forward(arch, p, example.z_t, example.t, example.cond)?;
    let pred = &cache.output;
    let (breakdown, d_pred, penalty_grad) = match *objective {
        Objective::Reconstruction => {
            let (l_s, g) = reconstruction_loss_and_grad(example.target_noise, pred)?;
            let b = LossBreakdown {
                l_s,
                l_distill: l_s,
                total: l_s,
                ..Default::default()
            };
            (b, g, None)
        }
        Objective::Composite {
            teacher_out,
            config,
            first_task,
        } => {
            let (b, g) = composite_loss_and_grad(pred, example.target_noise, teacher_out, config, first_task)?;
            (b, g, None)
        }
        Objective::Penalized {
            anchor,
            fisher,
            lambda,
        } => {
            let (l_s, g) = reconstruction_loss_and_grad(example.target_noise, pred)?;
            let (pen, pen_grad) = ewc_penalty_and_grad(p, anchor, fisher, lambda)?;
            let b = LossBreakdown {
                l_s,
                l_distill: l_s,
                penalty: pen,
                total: l_s + pen,
                ..Default::default()
            };
            (b, g, Some(pen_grad))
        }
    };
    if !breakdown.is_finite() {
        return Err(Error::NonFinite(format!("loss {breakdown:?}")));
    }
    Ok(Evaluated {
        cache,
        breakdown,
        d_pred,
        penalty_grad,
    })
}

/// Loss terms of an objective without the backward pass.
pub fn loss(
    arch: &DenoiserArch,
    params: &DenoiserParams,
    example: &TrainingExample<'_>,
    objective: &Objective<'_>,
) -> Result<LossBreakdown> {
    Ok(evaluate(arch, params.as_slice(), example, objective)?.breakdown)
}

/// Loss terms and the gradient of the total with respect to every
/// parameter.
pub fn loss_and_grad(
    arch: &DenoiserArch,
    params: &DenoiserParams,
    example: &TrainingExample<'_>,
    objective: &Objective<'_>,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let p = params.as_slice();
    let ev = evaluate(arch, p, example, objective)?;
    let mut grad = backward(arch, p, example.z_t, example.cond, &ev.cache, &ev.d_pred);
    if let Some(pg) = ev.penalty_grad {
        for (g, x) in grad.iter_mut().zip(pg) {
            *g += x;
        }
    }
    Ok((ev.breakdown, grad))
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    #[serde(flatten)]
    pub arch: DenoiserArch,
    pub param_count: usize,
    pub seed: u64,
    pub task_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: DenoiserParams,
}

impl Checkpoint {
    pub fn new(arch: DenoiserArch, params: &DenoiserParams, seed: u64, task_index: usize) -> Self {
        // Stored payloads are f32; keep the in-memory copy consistent with
        // what a reader will see.
        let rounded = params.as_slice().iter().map(|&v| v as f32 as f64).collect();
        Checkpoint {
            header: CheckpointHeader {
                format_version: CHECKPOINT_FORMAT_VERSION,
                arch,
                param_count: arch.param_count(),
                seed,
                task_index,
            },
            params: DenoiserParams(rounded),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::format("checkpoint header", e))?;
        let mut out = Vec::with_capacity(8 + header.len() + 4 * self.params.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for &v in self.params.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("checkpoint", d);
        if bytes.len() < 8 {
            return Err(bad("truncated length prefix"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body = &bytes[8..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::format("checkpoint header", e))?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(&format!("unsupported format_version {}", header.format_version)));
        }
        header.arch.validate()?;
        if header.param_count != header.arch.param_count() {
            return Err(bad(&format!(
                "param_count {} does not match architecture ({})",
                header.param_count,
                header.arch.param_count()
            )));
        }
        let payload = &body[hlen..];
        if payload.len() != 4 * header.param_count {
            return Err(bad(&format!(
                "expected {} payload bytes, found {}",
                4 * header.param_count,
                payload.len()
            )));
        }
        let params = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok(Checkpoint {
            header,
            params: DenoiserParams(params),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_normal;

    fn small_arch() -> DenoiserArch {
        DenoiserArch {
            video_channels: 3,
            hidden_channels: 4,
            time_embed_dim: 4,
            cond_dim: 16,
            cond_channels: 2,
        }
    }

    #[test]
    fn default_arch_stays_small() {
        let arch = DenoiserArch::default();
        assert_eq!(arch.in_channels(), 15);
        assert_eq!(arch.param_count(), 4 * 256 + 4 + 8 * 15 * 27 + 8 + 3 * 8 * 27 + 3);
        assert!(arch.param_count() < 5000);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let arch = DenoiserArch::default();
        let a = init_params(&arch, 3);
        let b = init_params(&arch, 3);
        assert_eq!(a, b);
        assert_ne!(a, init_params(&arch, 4));
        for r in arch.layout().biases() {
            assert!(a.as_slice()[r].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_weight_scale() {
        let arch = DenoiserArch::default();
        let p = init_params(&arch, 12);
        let l = arch.layout();
        for (range, fan_in) in [
            (l.proj_weight, arch.cond_dim),
            (l.conv1_weight, arch.in_channels() * TAPS),
            (l.conv2_weight, arch.hidden_channels * TAPS),
        ] {
            let w = &p.as_slice()[range];
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
            let target = 1.0 / (fan_in as f64).sqrt();
            assert!((std / target - 1.0).abs() < 0.2, "std {std} vs {target}");
        }
    }

    #[test]
    fn zero_params_predict_zero() {
        let arch = DenoiserArch::default();
        let params = DenoiserParams::zeros(&arch);
        let z = seeded_normal(&[3, 4, 5, 5], &mut Rng::seed_from(1)).unwrap();
        let out = Denoiser::new(&arch, &params).predict(&z, 17, &vec![0.1; 256]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_matches_input() {
        let arch = small_arch();
        let params = init_params(&arch, 2);
        let mut rng = Rng::seed_from(2);
        for shape in [[3, 2, 3, 4], [3, 5, 1, 6], [3, 1, 7, 2]] {
            let z = seeded_normal(&shape, &mut rng).unwrap();
            let out = Denoiser::new(&arch, &params).predict(&z, 3, &[0.5; 16]).unwrap();
            assert_eq!(out.shape(), &shape);
        }
        let bad = seeded_normal(&[2, 2, 3, 3], &mut rng).unwrap();
        assert!(Denoiser::new(&arch, &params).predict(&bad, 0, &[0.5; 16]).is_err());
        let z = seeded_normal(&[3, 2, 3, 3], &mut rng).unwrap();
        assert!(Denoiser::new(&arch, &params).predict(&z, 0, &[0.5; 15]).is_err());
    }

    #[test]
    fn conditioning_changes_prediction() {
        let arch = small_arch();
        let params = init_params(&arch, 5);
        let mut rng = Rng::seed_from(5);
        let z = seeded_normal(&[3, 3, 4, 4], &mut rng).unwrap();
        let c1: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let c2: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let m = Denoiser::new(&arch, &params);
        let a = m.predict(&z, 4, &c1).unwrap();
        let b = m.predict(&z, 4, &c2).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 1e-6);
        assert_eq!(a, m.predict(&z, 4, &c1).unwrap());
    }

    /// Reference forward pass: the plain definition, convolving all input
    /// channels (broadcast ones included) with explicit zero padding.
    fn naive_forward(arch: &DenoiserArch, p: &[f64], z: &Tensor, t: usize, cond: &[f64]) -> Vec<f64> {
        let [vc, nt, nh, nw] = z.dims4().unwrap();
        let l = arch.layout();
        let n = nt * nh * nw;
        let in_ch = arch.in_channels();
        let mut input = z.data().to_vec();
        for j in 0..arch.cond_channels {
            let mut v = p[l.proj_bias.start + j];
            for i in 0..arch.cond_dim {
                v += p[l.proj_weight.start + j * arch.cond_dim + i] * cond[i];
            }
            input.extend(std::iter::repeat_n(v, n));
        }
        for v in time_embedding(t, arch.time_embed_dim) {
            input.extend(std::iter::repeat_n(v, n));
        }
        let conv = |x: &[f64], cin: usize, w: &[f64], b: &[f64], cout: usize| -> Vec<f64> {
            let mut y = vec![0.0; cout * n];
            for o in 0..cout {
                for tt in 0..nt {
                    for hh in 0..nh {
                        for ww in 0..nw {
                            let mut s = b[o];
                            for c in 0..cin {
                                for k in 0..27 {
                                    let (dt, dh, dw) = tap_offset(k);
                                    let (a, bb, cc) = (tt as isize + dt, hh as isize + dh, ww as isize + dw);
                                    if a < 0 || bb < 0 || cc < 0 || a >= nt as isize || bb >= nh as isize || cc >= nw as isize {
                                        continue;
                                    }
                                    let xi = c * n + (a as usize * nh + bb as usize) * nw + cc as usize;
                                    s += w[(o * cin + c) * 27 + k] * x[xi];
                                }
                            }
                            y[o * n + (tt * nh + hh) * nw + ww] = s;
                        }
                    }
                }
            }
            y
        };
        let h: Vec<f64> = conv(&input, in_ch, &p[l.conv1_weight.clone()], &p[l.conv1_bias.clone()], arch.hidden_channels)
            .into_iter()
            .map(f64::tanh)
            .collect();
        conv(&h, arch.hidden_channels, &p[l.conv2_weight.clone()], &p[l.conv2_bias.clone()], vc)
    }

    #[test]
    fn forward_matches_naive_convolution() {
        let arch = small_arch();
        let mut rng = Rng::seed_from(21);
        for shape in [[3, 3, 4, 5], [3, 1, 1, 3], [3, 4, 2, 2]] {
            let mut params = init_params(&arch, rng.next_u64());
            for v in params.as_mut_slice() {
                *v += 0.1 * rng.normal();
            }
            let z = seeded_normal(&shape, &mut rng).unwrap();
            let cond: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
            let fast = Denoiser::new(&arch, &params).predict(&z, 9, &cond).unwrap();
            let slow = naive_forward(&arch, params.as_slice(), &z, 9, &cond);
            for (a, b) in fast.data().iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_target_zero_params_is_a_minimum() {
        let arch = small_arch();
        let params = DenoiserParams::zeros(&arch);
        let z = seeded_normal(&[3, 3, 3, 3], &mut Rng::seed_from(8)).unwrap();
        let zero = Tensor::zeros(&[3, 3, 3, 3]).unwrap();
        let ex = TrainingExample {
            z_t: &z,
            t: 5,
            cond: &[0.3; 16],
            target_noise: &zero,
        };
        let (loss, grad) = loss_and_grad(&arch, &params, &ex, &Objective::Reconstruction).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_scales_with_loss() {
        let arch = small_arch();
        let params = init_params(&arch, 30);
        let mut rng = Rng::seed_from(30);
        let z = seeded_normal(&[3, 3, 3, 3], &mut rng).unwrap();
        let eps = seeded_normal(&[3, 3, 3, 3], &mut rng).unwrap();
        let cond = [0.2; 16];
        let ex = TrainingExample { z_t: &z, t: 2, cond: &cond, target_noise: &eps };
        let mut c1 = LossConfig::default();
        let (l1, g1) = loss_and_grad(&arch, &params, &ex, &Objective::Composite { teacher_out: &eps, config: &c1, first_task: false }).unwrap();
        c1.gamma *= 3.0;
        c1.lambda_t *= 3.0;
        let (l3, g3) = loss_and_grad(&arch, &params, &ex, &Objective::Composite { teacher_out: &eps, config: &c1, first_task: false }).unwrap();
        assert!((l3.total - 3.0 * l1.total).abs() < 1e-12 * l1.total.max(1.0));
        for (a, b) in g1.iter().zip(&g3) {
            assert!((3.0 * a - b).abs() <= 1e-12 * b.abs().max(1e-9));
        }
    }

    #[test]
    fn snapshot_is_isolated() {
        let arch = DenoiserArch::default();
        let mut params = init_params(&arch, 1);
        let snap = snapshot(&arch, &params).unwrap();
        let fp = snap.fingerprint();
        params.as_mut_slice()[0] += 1.0;
        assert_eq!(snap.fingerprint(), fp);
        assert_ne!(snap.params(), &params);
        let again = snapshot(snap.arch(), snap.params()).unwrap();
        assert_eq!(again, snap);
        let mut bad = params.clone();
        bad.as_mut_slice()[3] = f64::NAN;
        assert!(snapshot(&arch, &bad).is_err());
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let arch = DenoiserArch::default();
        let params = init_params(&arch, 77);
        let ck = Checkpoint::new(arch, &params, 77, 3);
        let bytes = ck.to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header["param_count"], arch.param_count());
        assert_eq!(header["task_index"], 3);
        assert_eq!(header["hidden_channels"], 8);
        assert_eq!(bytes.len(), 8 + hlen + 4 * arch.param_count());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..4]).is_err());
    }
}
