//! Sequential training over a stream of caption/video pairs with three
//! strategies: plain fine-tuning (naive), an EWC quadratic anchor, and
//! teacher-student distillation with temporal consistency (vidclearn).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::denoiser::{
    init_params, loss_and_grad, snapshot, Checkpoint, DenoiserArch, DenoiserParams, Objective,
    TeacherSnapshot, TrainingExample,
};
use crate::diffusion::{ddim_sample, forward_diffuse, DiffusionSetup};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossConfig};
use crate::numerics::{mix_seed, seeded_normal, Rng, Tensor};
use crate::retrieval::{embed_prompt, PromptStore};
use crate::synthdata::Dataset;

const INIT_STREAM: u64 = 0x1_0000_0000;
const FISHER_STREAM: u64 = 0x2_0000_0000;
const REPLAY_STREAM: u64 = 0x3_0000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Naive,
    Ewc,
    #[serde(rename = "vidclearn")]
    VidCLearn,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Naive, Strategy::Ewc, Strategy::VidCLearn];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::Ewc => "ewc",
            Strategy::VidCLearn => "vidclearn",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown strategy {s:?} (naive|ewc|vidclearn)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps_per_task: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss: LossConfig,
    pub ewc_lambda: f64,
    pub fisher_samples: usize,
    pub seed: u64,
    /// Interleave steps on teacher-generated videos of earlier prompts.
    pub replay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps_per_task: 200,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossConfig::default(),
            ewc_lambda: 100.0,
            fisher_samples: 50,
            seed: 0,
            replay: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_task == 0 {
            return Err(Error::invalid("steps_per_task must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps must be positive"));
        }
        if !(self.ewc_lambda >= 0.0) {
            return Err(Error::invalid(format!("ewc_lambda {} must be nonnegative", self.ewc_lambda)));
        }
        self.loss.validate()
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }

    pub fn moments_finite(&self) -> bool {
        self.m.iter().chain(&self.v).all(|x| x.is_finite())
    }
}

/// One caption/video pair of the stream with its precomputed embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPair {
    pub task_index: usize,
    pub caption: String,
    pub video_id: String,
    pub video: Tensor,
    pub cond: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pairs: Vec<TaskPair>,
}

impl TaskStream {
    /// Builds a stream from `(caption, video_id, video)` triples in order.
    pub fn new(items: Vec<(String, String, Tensor)>) -> Result<Self> {
        let mut pairs = Vec::with_capacity(items.len());
        for (i, (caption, video_id, video)) in items.into_iter().enumerate() {
            video.dims4()?;
            pairs.push(TaskPair {
                task_index: i,
                cond: embed_prompt(&caption)?.as_slice().to_vec(),
                caption,
                video_id,
                video,
            });
        }
        Ok(TaskStream { pairs })
    }

    /// The training split in manifest order.
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        TaskStream::new(
            ds.train()
                .into_iter()
                .map(|s| (s.caption.clone(), s.id.clone(), s.video.clone()))
                .collect(),
        )
    }

    pub fn pairs(&self) -> &[TaskPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The first `n` tasks.
    pub fn take(&self, n: usize) -> TaskStream {
        TaskStream {
            pairs: self.pairs[..n.min(self.pairs.len())].to_vec(),
        }
    }
}

/// Diagonal Fisher estimate and anchor of the most recent task.
#[derive(Debug, Clone, PartialEq)]
pub struct EwcState {
    pub fisher_diag: Vec<f64>,
    pub theta_star: Vec<f64>,
    pub lambda: f64,
}

/// What a step hook sees after each parameter update.
#[derive(Debug)]
pub struct StepRecord<'a> {
    pub task_index: usize,
    pub step: usize,
    pub loss: LossBreakdown,
    pub params: &'a DenoiserParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskOutcome {
    /// Loss terms of the last step (all zero when no step ran).
    pub final_loss: LossBreakdown,
    /// Fingerprint of the frozen teacher, for distillation tasks.
    pub teacher_fingerprint: Option<u64>,
}

/// Shared read-only context of a training run.
#[derive(Debug, Clone, Copy)]
pub struct TrainContext<'a> {
    pub arch: &'a DenoiserArch,
    pub setup: &'a DiffusionSetup,
    pub cfg: &'a TrainConfig,
}

pub fn initial_params(arch: &DenoiserArch, seed: u64) -> DenoiserParams {
    init_params(arch, mix_seed(seed, INIT_STREAM))
}

#[derive(Clone, Copy)]
enum Mode<'a> {
    Reconstruction,
    Distill(&'a TeacherSnapshot),
    Penalized(&'a EwcState),
}

struct ReplaySample {
    video: Tensor,
    cond: Vec<f64>,
}

/// Draws `t` uniformly, then a fresh noise tensor, and diffuses `video`.
fn draw_example(rng: &mut Rng, video: &Tensor, setup: &DiffusionSetup) -> Result<(usize, Tensor, Tensor)> {
    let t = rng.below(setup.schedule.steps());
    let eps = seeded_normal(video.shape(), rng)?;
    let z_t = forward_diffuse(video, t, &eps, &setup.schedule)?;
    Ok((t, z_t, eps))
}

fn train_loop(
    ctx: &TrainContext<'_>,
    params: &mut DenoiserParams,
    pair: &TaskPair,
    mode: Mode<'_>,
    replay: &[ReplaySample],
    hook: &mut dyn FnMut(&StepRecord<'_>),
) -> Result<TaskOutcome> {
    let cfg = ctx.cfg;
    let task = pair.task_index;
    let mut rng = Rng::seed_from(mix_seed(cfg.seed, task as u64));
    let mut replay_rng = Rng::seed_from(mix_seed(cfg.seed, REPLAY_STREAM + task as u64));
    let mut adam = Adam::new(params.len(), cfg);
    let mut last = LossBreakdown::default();
    let diverged = |step: usize, detail: String| Error::Divergence { task, step, detail };

    for step in 0..cfg.steps_per_task {
        let (video, cond, t, z_t, eps) = if !replay.is_empty() && step % 2 == 1 {
            let s = &replay[replay_rng.below(replay.len())];
            let (t, z_t, eps) = draw_example(&mut replay_rng, &s.video, ctx.setup)?;
            (&s.video, &s.cond, t, z_t, eps)
        } else {
            let (t, z_t, eps) = draw_example(&mut rng, &pair.video, ctx.setup)?;
            (&pair.video, &pair.cond, t, z_t, eps)
        };
        debug_assert_eq!(video.shape(), z_t.shape());
        let example = TrainingExample {
            z_t: &z_t,
            t,
            cond,
            target_noise: &eps,
        };
        let teacher_out;
        let objective = match mode {
            Mode::Reconstruction => Objective::Reconstruction,
            Mode::Distill(teacher) => {
                teacher_out = teacher.model().predict(&z_t, t, cond)?;
                Objective::Composite {
                    teacher_out: &teacher_out,
                    config: &cfg.loss,
                    first_task: false,
                }
            }
            Mode::Penalized(state) => Objective::Penalized {
                anchor: &state.theta_star,
                fisher: &state.fisher_diag,
                lambda: state.lambda,
            },
        };
        let (loss, grad) = match loss_and_grad(ctx.arch, params, &example, &objective) {
            Ok(v) => v,
            Err(Error::NonFinite(d)) => return Err(diverged(step, d)),
            Err(e) => return Err(e),
        };
        adam.step(params.as_mut_slice(), &grad);
        if !params.is_finite() || !adam.moments_finite() {
            return Err(diverged(step, "parameters or optimizer moments became non-finite".into()));
        }
        last = loss;
        hook(&StepRecord {
            task_index: task,
            step,
            loss,
            params,
        });
    }
    Ok(TaskOutcome {
        final_loss: last,
        teacher_fingerprint: None,
    })
}

fn no_hook(_: &StepRecord<'_>) {}

/// Fine-tunes on one pair with the noise reconstruction loss only.
pub fn train_task_naive(ctx: &TrainContext<'_>, params: &mut DenoiserParams, pair: &TaskPair) -> Result<TaskOutcome> {
    train_loop(ctx, params, pair, Mode::Reconstruction, &[], &mut no_hook)
}

/// Fine-tunes on one pair while distilling from a frozen copy of the
/// incoming parameters. The first task has no teacher and runs exactly the
/// naive computation. `history` holds the earlier pairs and is only read
/// when replay is enabled.
pub fn train_task_vidclearn(
    ctx: &TrainContext<'_>,
    params: &mut DenoiserParams,
    pair: &TaskPair,
    history: &[TaskPair],
    hook: &mut dyn FnMut(&StepRecord<'_>),
) -> Result<TaskOutcome> {
    if pair.task_index == 0 {
        return train_loop(ctx, params, pair, Mode::Reconstruction, &[], hook);
    }
    let teacher = snapshot(ctx.arch, params)?;
    let fingerprint = teacher.fingerprint();
    let replay = if ctx.cfg.replay {
        replay_set(ctx, &teacher, pair.task_index, history)?
    } else {
        Vec::new()
    };
    let mut outcome = train_loop(ctx, params, pair, Mode::Distill(&teacher), &replay, hook)?;
    debug_assert_eq!(teacher.fingerprint(), fingerprint);
    outcome.teacher_fingerprint = Some(fingerprint);
    Ok(outcome)
}

/// Teacher generations for every earlier prompt, each sampled from its own
/// seeded noise.
fn replay_set(
    ctx: &TrainContext<'_>,
    teacher: &TeacherSnapshot,
    task: usize,
    history: &[TaskPair],
) -> Result<Vec<ReplaySample>> {
    let mut rng = Rng::seed_from(mix_seed(ctx.cfg.seed, REPLAY_STREAM ^ (task as u64) << 16));
    let model = teacher.model();
    history
        .iter()
        .filter(|p| p.task_index < task)
        .map(|p| {
            let z_top = seeded_normal(p.video.shape(), &mut rng)?;
            let video = ddim_sample(&model, &z_top, &p.cond, &ctx.setup.sample_plan, &ctx.setup.schedule)?;
            if !video.is_finite() {
                return Err(Error::NonFinite(format!("teacher replay for {:?}", p.caption)));
            }
            Ok(ReplaySample {
                video,
                cond: p.cond.clone(),
            })
        })
        .collect()
}

/// Mean squared reconstruction gradient over `fisher_samples` fresh draws at
/// the given parameters.
pub fn estimate_fisher(ctx: &TrainContext<'_>, params: &DenoiserParams, pair: &TaskPair) -> Result<Vec<f64>> {
    let n = ctx.cfg.fisher_samples;
    let mut fisher = vec![0.0; params.len()];
    if n == 0 {
        return Ok(fisher);
    }
    let mut rng = Rng::seed_from(mix_seed(ctx.cfg.seed, FISHER_STREAM + pair.task_index as u64));
    for _ in 0..n {
        let (t, z_t, eps) = draw_example(&mut rng, &pair.video, ctx.setup)?;
        let example = TrainingExample {
            z_t: &z_t,
            t,
            cond: &pair.cond,
            target_noise: &eps,
        };
        let (_, g) = loss_and_grad(ctx.arch, params, &example, &Objective::Reconstruction)?;
        for (f, g) in fisher.iter_mut().zip(g) {
            *f += g * g;
        }
    }
    for f in &mut fisher {
        *f /= n as f64;
    }
    Ok(fisher)
}

/// Fine-tunes under the quadratic anchor of `state` (none on the first
/// task), then replaces the anchor with the new parameters and a fresh
/// Fisher estimate.
pub fn train_task_ewc(
    ctx: &TrainContext<'_>,
    params: &mut DenoiserParams,
    state: Option<&EwcState>,
    pair: &TaskPair,
    hook: &mut dyn FnMut(&StepRecord<'_>),
) -> Result<(TaskOutcome, EwcState)> {
    let mode = state.map_or(Mode::Reconstruction, Mode::Penalized);
    let outcome = train_loop(ctx, params, pair, mode, &[], hook)?;
    let next = EwcState {
        fisher_diag: estimate_fisher(ctx, params, pair)?,
        theta_star: params.as_slice().to_vec(),
        lambda: ctx.cfg.ewc_lambda,
    };
    Ok((outcome, next))
}

/// Trains through the whole stream in memory. `on_task` runs after each task
/// with the parameters reached at its end.
pub fn train_stream(
    ctx: &TrainContext<'_>,
    stream: &TaskStream,
    strategy: Strategy,
    params: &mut DenoiserParams,
    on_step: &mut dyn FnMut(&StepRecord<'_>),
    on_task: &mut dyn FnMut(&TaskPair, &DenoiserParams, &TaskOutcome) -> Result<()>,
) -> Result<()> {
    if stream.is_empty() {
        return Err(Error::invalid("empty task stream"));
    }
    let mut ewc: Option<EwcState> = None;
    for pair in stream.pairs() {
        let outcome = match strategy {
            Strategy::Naive => train_loop(ctx, params, pair, Mode::Reconstruction, &[], on_step)?,
            Strategy::VidCLearn => {
                train_task_vidclearn(ctx, params, pair, &stream.pairs()[..pair.task_index], on_step)?
            }
            Strategy::Ewc => {
                let (outcome, next) = train_task_ewc(ctx, params, ewc.as_ref(), pair, on_step)?;
                ewc = Some(next);
                outcome
            }
        };
        on_task(pair, params, &outcome)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamEntry {
    pub task_index: usize,
    pub video_id: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub task_index: usize,
    pub checkpoint: String,
    #[serde(rename = "final_L_s")]
    pub final_l_s: f64,
    #[serde(rename = "final_L_KL")]
    pub final_l_kl: f64,
    #[serde(rename = "final_L_t")]
    pub final_l_t: f64,
    #[serde(rename = "final_L_tot")]
    pub final_l_tot: f64,
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub strategy: Strategy,
    pub config: RunConfig,
    pub seed: u64,
    pub data_dir: Option<String>,
    pub stream: Vec<StreamEntry>,
    pub tasks: Vec<TaskRecord>,
    pub complete: bool,
    pub wall_seconds: f64,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        crate::io::read_json(&run_dir.join(RUN_MANIFEST))
    }

    pub fn checkpoint_paths(&self, run_dir: &Path) -> Vec<PathBuf> {
        self.tasks.iter().map(|t| run_dir.join(&t.checkpoint)).collect()
    }
}

pub const RUN_MANIFEST: &str = "run.json";
pub const STORE_FILE: &str = "prompts.json";

pub fn checkpoint_name(task: usize) -> String {
    format!("task_{task}.ckpt")
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub checkpoints: Vec<PathBuf>,
    pub store: PromptStore,
    pub manifest: RunManifest,
}

/// Trains a stream and writes `task_{k}.ckpt`, `prompts.json` and `run.json`
/// into `out_dir`. Every file is rewritten after each task, so an aborted
/// run keeps everything up to its last finished task.
pub fn run_stream(
    stream: &TaskStream,
    strategy: Strategy,
    cfg: &RunConfig,
    out_dir: &Path,
    data_dir: Option<&Path>,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    let setup = cfg.diffusion.build()?;
    let arch = DenoiserArch::default();
    let ctx = TrainContext {
        arch: &arch,
        setup: &setup,
        cfg: &cfg.train,
    };
    let started = Instant::now();
    let mut manifest = RunManifest {
        strategy,
        config: cfg.clone(),
        seed: cfg.train.seed,
        data_dir: data_dir.map(|d| d.display().to_string()),
        stream: stream
            .pairs()
            .iter()
            .map(|p| StreamEntry {
                task_index: p.task_index,
                video_id: p.video_id.clone(),
                caption: p.caption.clone(),
            })
            .collect(),
        tasks: Vec::new(),
        complete: false,
        wall_seconds: 0.0,
    };
    let mut store = PromptStore::new();
    let mut checkpoints = Vec::new();
    let mut params = initial_params(&arch, cfg.train.seed);

    let mut on_task = |pair: &TaskPair, params: &DenoiserParams, outcome: &TaskOutcome| -> Result<()> {
        let name = checkpoint_name(pair.task_index);
        let path = out_dir.join(&name);
        Checkpoint::new(arch, params, cfg.train.seed, pair.task_index).save(&path)?;
        checkpoints.push(path);
        store.push(&pair.caption, &pair.video_id)?;
        store.save(&out_dir.join(STORE_FILE))?;
        let l = outcome.final_loss;
        manifest.tasks.push(TaskRecord {
            task_index: pair.task_index,
            checkpoint: name,
            final_l_s: l.l_s,
            final_l_kl: l.l_kl,
            final_l_t: l.l_t,
            final_l_tot: l.total,
        });
        manifest.wall_seconds = started.elapsed().as_secs_f64();
        crate::io::write_json(&out_dir.join(RUN_MANIFEST), &manifest)
    };
    train_stream(&ctx, stream, strategy, &mut params, &mut no_hook, &mut on_task)?;

    manifest.complete = true;
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    crate::io::write_json(&out_dir.join(RUN_MANIFEST), &manifest)?;
    Ok(RunArtifacts {
        checkpoints,
        store,
        manifest,
    })
}
