//! Checks shared by the acceptance runner and the regular integration
//! tests. Each returns a one-line summary on success and a diagnostic on
//! failure.
#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use std::path::Path;

use continual_t2v::config::RunConfig;
use continual_t2v::continual::{
    initial_params, run_stream, train_stream, Strategy, TaskStream, TrainConfig, TrainContext,
};
use continual_t2v::denoiser::{
    init_params, loss, loss_and_grad, params_fingerprint, Denoiser, DenoiserArch, DenoiserParams, Objective,
    TrainingExample,
};
use continual_t2v::diffusion::{
    ddim_invert, ddim_sample, ddim_step, ConstantPredictor, DiffusionConfig, DiffusionSetup, Level, NoisePredictor,
    ZeroPredictor,
};
use continual_t2v::evaluation::{bwt, frechet_distance, fwt, sqrtm_psd};
use continual_t2v::losses::{
    composite_loss_and_grad, distillation_loss, kl_distillation, temporal_consistency_loss, total_loss, LossConfig,
};
use continual_t2v::numerics::{seeded_normal, Rng, Tensor};
use continual_t2v::retrieval::{embed_prompt, PromptStore};
use continual_t2v::synthdata::{alignment_score, gen_dataset, probe, render, valid_specs, VideoDims};
use nalgebra::DMatrix;

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

pub const GRAD_SEEDS: [u64; 5] = [11, 22, 33, 44, 55];
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so that gradients that are
/// zero up to rounding do not count as mismatches.
pub const FD_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient of each objective with central finite
/// differences over every parameter of the default denoiser.
pub fn gradient_check(seeds: &[u64]) -> Check {
    let arch = DenoiserArch::default();
    ensure!(arch.param_count() < 5000, "model has {} parameters", arch.param_count());
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for &seed in seeds {
        let mut rng = Rng::seed_from(seed);
        let mut base = init_params(&arch, seed).as_slice().to_vec();
        for p in &mut base {
            *p += 0.1 * rng.normal();
        }
        let params = DenoiserParams::from_vec(&arch, base).map_err(e2s)?;
        let shape = [3, 3, 5, 5];
        let z_t = seeded_normal(&shape, &mut rng).map_err(e2s)?;
        let eps = seeded_normal(&shape, &mut rng).map_err(e2s)?;
        let t = rng.below(100);
        let cond = embed_prompt("a green circle moves left").map_err(e2s)?;
        let other = init_params(&arch, seed + 1000);
        let teacher_out = Denoiser::new(&arch, &other)
            .predict(&z_t, t, cond.as_slice())
            .map_err(e2s)?;
        let loss_cfg = LossConfig::default();
        let anchor: Vec<f64> = params.as_slice().iter().map(|p| p + 0.05 * rng.normal()).collect();
        let fisher: Vec<f64> = (0..params.len()).map(|_| rng.normal().abs()).collect();
        let objectives = [
            ("mse", Objective::Reconstruction),
            (
                "composite",
                Objective::Composite {
                    teacher_out: &teacher_out,
                    config: &loss_cfg,
                    first_task: false,
                },
            ),
            (
                "ewc",
                Objective::Penalized {
                    anchor: &anchor,
                    fisher: &fisher,
                    lambda: 2.0,
                },
            ),
        ];
        let example = TrainingExample {
            z_t: &z_t,
            t,
            cond: cond.as_slice(),
            target_noise: &eps,
        };
        for (name, obj) in &objectives {
            let (_, grad) = loss_and_grad(&arch, &params, &example, obj).map_err(e2s)?;
            let mut probe_params = params.clone();
            for i in 0..params.len() {
                let x = params.as_slice()[i];
                probe_params.as_mut_slice()[i] = x + FD_STEP;
                let up = loss(&arch, &probe_params, &example, obj).map_err(e2s)?.total;
                probe_params.as_mut_slice()[i] = x - FD_STEP;
                let down = loss(&arch, &probe_params, &example, obj).map_err(e2s)?.total;
                probe_params.as_mut_slice()[i] = x;
                let fd = (up - down) / (2.0 * FD_STEP);
                let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(FD_FLOOR);
                ensure!(
                    rel < 1e-3,
                    "{name} objective, seed {seed}, parameter {i}: analytic {} vs numeric {fd} (rel {rel:e})",
                    grad[i]
                );
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    Ok(format!(
        "{checked} partials over {} seeds, {} params, max rel err {worst:.2e}",
        seeds.len(),
        arch.param_count()
    ))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

pub fn loss_identities() -> Check {
    let mut rng = Rng::seed_from(5);
    let mut cases = 0;
    for _ in 0..20 {
        let shape = [3, 4, 3, 3];
        let s = seeded_normal(&shape, &mut rng).map_err(e2s)?;
        let n = seeded_normal(&shape, &mut rng).map_err(e2s)?;
        let teacher = seeded_normal(&shape, &mut rng).map_err(e2s)?;
        let temp = 0.5 + 4.0 * rng.uniform();
        ensure!(kl_distillation(&s, &s, temp).map_err(e2s)? == 0.0, "L_KL(s, s) != 0");
        ensure!(temporal_consistency_loss(&s, &s).map_err(e2s)? == 0.0, "L_t(P, P) != 0");

        let mut offset_p = s.clone();
        let mut offset_n = n.clone();
        let [c, t, h, w] = s.dims4().map_err(e2s)?;
        let offsets_p: Vec<f64> = (0..c * h * w).map(|_| 3.0 * rng.normal()).collect();
        let offsets_n: Vec<f64> = (0..c * h * w).map(|_| 3.0 * rng.normal()).collect();
        for ch in 0..c {
            for f in 0..t {
                for k in 0..h * w {
                    offset_p.data_mut()[(ch * t + f) * h * w + k] += offsets_p[ch * h * w + k];
                    offset_n.data_mut()[(ch * t + f) * h * w + k] += offsets_n[ch * h * w + k];
                }
            }
        }
        let base = temporal_consistency_loss(&s, &n).map_err(e2s)?;
        let moved = temporal_consistency_loss(&offset_p, &offset_n).map_err(e2s)?;
        ensure!(close(base, moved), "L_t changed under time-constant offsets: {base} vs {moved}");

        let l_kl = kl_distillation(&teacher, &s, temp).map_err(e2s)?;
        let l_s = 0.1 + rng.uniform();
        ensure!(close(distillation_loss(l_kl, l_s, 0.0, false).map_err(e2s)?, l_s), "alpha = 0");
        ensure!(close(distillation_loss(l_kl, l_s, 0.8, true).map_err(e2s)?, l_s), "first task");
        let l_d = distillation_loss(l_kl, l_s, 0.8, false).map_err(e2s)?;
        let gamma = 0.5 + rng.uniform();
        ensure!(close(total_loss(l_d, 7.0, gamma, 0.0).map_err(e2s)?, gamma * l_d), "lambda = 0");

        let cfg = LossConfig {
            alpha: 0.0,
            ..LossConfig::default()
        };
        let (b, _) = composite_loss_and_grad(&s, &n, &teacher, &cfg, false).map_err(e2s)?;
        ensure!(close(b.l_distill, b.l_s), "composite with alpha = 0");
        let (b, _) = composite_loss_and_grad(&s, &n, &teacher, &LossConfig::default(), true).map_err(e2s)?;
        ensure!(close(b.l_distill, b.l_s), "composite on the first task");
        cases += 1;
    }
    Ok(format!("all six identities hold on {cases} random cases"))
}

pub fn reduction_config(steps: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.steps_per_task = steps;
    cfg.train.seed = 17;
    cfg
}

/// Per-step fingerprints and final parameters of a stream run.
pub fn trajectory(stream: &TaskStream, strategy: Strategy, train: &TrainConfig, diffusion: &DiffusionConfig) -> Result<(Vec<u64>, DenoiserParams), String> {
    let arch = DenoiserArch::default();
    let setup = diffusion.build().map_err(e2s)?;
    let ctx = TrainContext {
        arch: &arch,
        setup: &setup,
        cfg: train,
    };
    let mut params = initial_params(&arch, train.seed);
    let mut trace = Vec::new();
    train_stream(
        &ctx,
        stream,
        strategy,
        &mut params,
        &mut |r| trace.push(params_fingerprint(r.params)),
        &mut |_, _, _| Ok(()),
    )
    .map_err(e2s)?;
    Ok((trace, params))
}

pub fn small_stream(tasks: usize, seed: u64) -> Result<TaskStream, String> {
    let ds = gen_dataset(tasks, 0, seed, VideoDims::default()).map_err(e2s)?;
    TaskStream::from_dataset(&ds).map_err(e2s)
}

pub fn strategy_reductions(steps: usize) -> Check {
    let stream = small_stream(3, 4)?;
    let cfg = reduction_config(steps);
    let (naive, naive_final) = trajectory(&stream, Strategy::Naive, &cfg.train, &cfg.diffusion)?;

    let mut vc = cfg.train;
    vc.loss = LossConfig {
        alpha: 0.0,
        gamma: 1.0,
        lambda_t: 0.0,
        ..vc.loss
    };
    let (vid, vid_final) = trajectory(&stream, Strategy::VidCLearn, &vc, &cfg.diffusion)?;
    let mut ec = cfg.train;
    ec.ewc_lambda = 0.0;
    let (ewc, ewc_final) = trajectory(&stream, Strategy::Ewc, &ec, &cfg.diffusion)?;

    ensure!(naive.len() == 3 * steps, "naive ran {} steps", naive.len());
    ensure!(vid == naive, "vidclearn(alpha=0, lambda=0, gamma=1) diverges from naive");
    ensure!(ewc == naive, "ewc(lambda=0) diverges from naive");
    ensure!(vid_final == naive_final && ewc_final == naive_final, "final parameters differ");
    Ok(format!("{} identical steps for all three strategies", naive.len()))
}

fn invert_then_sample(
    model: &impl NoisePredictor,
    z0: &Tensor,
    cond: &[f64],
    setup: &DiffusionSetup,
) -> Result<Tensor, String> {
    let up = ddim_invert(model, z0, cond, &setup.invert_plan, &setup.schedule).map_err(e2s)?;
    ddim_sample(model, &up, cond, &setup.invert_plan.reversed(), &setup.schedule).map_err(e2s)
}

pub fn ddim_round_trip() -> Check {
    let setup = DiffusionConfig::default().build().map_err(e2s)?;
    let mut rng = Rng::seed_from(8);
    let shape = [3, 8, 16, 16];
    let z0 = render(&valid_specs(&VideoDims::default())[17], &VideoDims::default()).map_err(e2s)?;
    let cond = embed_prompt("a red square moves right").map_err(e2s)?;
    let constant = ConstantPredictor(seeded_normal(&shape, &mut rng).map_err(e2s)?);
    let mut worst = 0.0f64;
    for (name, back) in [
        ("zero", invert_then_sample(&ZeroPredictor, &z0, cond.as_slice(), &setup)?),
        ("constant", invert_then_sample(&constant, &z0, cond.as_slice(), &setup)?),
    ] {
        let err = back.max_abs_diff(&z0).map_err(e2s)?;
        ensure!(err < 1e-6, "{name} predictor round trip error {err:e}");
        worst = worst.max(err);
    }
    let mut step_worst = 0.0f64;
    for _ in 0..20 {
        let z = seeded_normal(&shape, &mut rng).map_err(e2s)?;
        let eps = seeded_normal(&shape, &mut rng).map_err(e2s)?;
        let hi = 1 + rng.below(99);
        let lo = rng.below(hi);
        let (from, to) = (Level::Noisy(hi), if lo == 0 { Level::Clean } else { Level::Noisy(lo) });
        let down = ddim_step(&z, &eps, from, to, &setup.schedule).map_err(e2s)?;
        let up = ddim_step(&down, &eps, to, from, &setup.schedule).map_err(e2s)?;
        let err = up.max_abs_diff(&z).map_err(e2s)?;
        ensure!(err < 1e-10, "ddim_step {hi}->{lo}->{hi} error {err:e}");
        step_worst = step_worst.max(err);
    }
    Ok(format!("invert/sample max err {worst:.1e}, single step max err {step_worst:.1e}"))
}

/// Trains `tasks` pairs for one step each and checks retrieval against the
/// store the run wrote.
pub fn retrieval_exactness(dir: &Path) -> Check {
    let ds = gen_dataset(12, 6, 9, VideoDims::default()).map_err(e2s)?;
    let stream = TaskStream::from_dataset(&ds).map_err(e2s)?;
    let cfg = reduction_config(1);
    run_stream(&stream, Strategy::VidCLearn, &cfg, dir, None).map_err(e2s)?;
    let store = PromptStore::load(&dir.join("prompts.json")).map_err(e2s)?;
    ensure!(store.len() == 12, "store has {} entries", store.len());
    for s in ds.train() {
        let r = store.retrieve(&s.caption).map_err(e2s)?;
        ensure!(r.video_id == s.id, "{:?} retrieved {} instead of {}", s.caption, r.video_id, s.id);
        ensure!((r.score - 1.0).abs() <= 1e-9, "score {} for {:?}", r.score, s.caption);
    }
    let mut dup = store.clone();
    let first = ds.train()[3];
    dup.push(&first.caption, "duplicate").map_err(e2s)?;
    let r = dup.retrieve(&first.caption).map_err(e2s)?;
    ensure!(r.video_id == first.id, "duplicate prompt returned {}", r.video_id);
    Ok("12/12 captions retrieve their own video at score 1; duplicate resolves to earliest".into())
}

pub fn probe_round_trip() -> Check {
    let dims = VideoDims::default();
    let specs = valid_specs(&dims);
    let mut rng = Rng::seed_from(6);
    for s in &specs {
        let v = render(s, &dims).map_err(e2s)?;
        let clean = alignment_score(&probe(&v).map_err(e2s)?, s);
        ensure!(clean == 1.0, "clean probe of {s:?} scored {clean}");
        let data = v.data().iter().map(|x| x + 0.05 * (2.0 * rng.uniform() - 1.0)).collect();
        let noisy = Tensor::new(v.shape().to_vec(), data).map_err(e2s)?;
        let score = alignment_score(&probe(&noisy).map_err(e2s)?, s);
        ensure!(score == 1.0, "noisy probe of {s:?} scored {score}");
    }
    Ok(format!("{} specs recovered, clean and with +-0.05 uniform noise", specs.len()))
}

pub fn frechet_checks() -> Check {
    let mut rng = Rng::seed_from(12);
    let set: Vec<Vec<f64>> = (0..40).map(|_| (0..16).map(|_| rng.normal()).collect()).collect();
    let same = frechet_distance(&set, &set).map_err(e2s)?;
    ensure!(same <= 1e-8, "identical sets at distance {same:e}");

    // Two points at +-c have mean 0 and unbiased variance 2c^2.
    let pair = |mean: f64, var: f64| {
        let c = (var / 2.0).sqrt();
        vec![vec![mean - c], vec![mean + c]]
    };
    let reg = continual_t2v::evaluation::COV_REGULARIZATION;
    let mut worst = 0.0f64;
    for (m1, v1, m2, v2) in [(0.0, 1.0, 1.0, 1.0), (0.0, 1.0, 1.0, 4.0), (2.0, 0.25, -1.0, 9.0)] {
        let d = frechet_distance(&pair(m1, v1), &pair(m2, v2)).map_err(e2s)?;
        let closed = |r: f64| (m1 - m2) * (m1 - m2) + (f64::sqrt(v1 + r) - f64::sqrt(v2 + r)).powi(2);
        // The covariance ridge shifts both variances, so it moves the
        // distance by at most this much.
        let slack = (closed(reg) - closed(0.0)).abs();
        let err = (d - closed(0.0)).abs();
        ensure!(err <= 1e-6 + slack, "1-D case ({m1},{v1}) vs ({m2},{v2}): {d} vs {}", closed(0.0));
        worst = worst.max(err);
    }

    let mut sq_worst = 0.0f64;
    for n in [1, 2, 5, 16] {
        for _ in 0..5 {
            let a = DMatrix::from_fn(n, n, |_, _| rng.normal());
            let spd = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
            let r = sqrtm_psd(&spd);
            let err = (&r * &r - &spd).abs().max();
            ensure!(err <= 1e-8, "sqrt of {n}x{n} SPD matrix squared back with error {err:e}");
            sq_worst = sq_worst.max(err);
        }
    }
    Ok(format!(
        "identity {same:.1e}, 1-D closed form err {worst:.1e}, sqrt residual {sq_worst:.1e}"
    ))
}

pub fn transfer_checks() -> Check {
    let r = vec![vec![0.5, 0.2], vec![0.4, 0.6]];
    let b = vec![0.0, 0.1];
    let bw = bwt(&r).map_err(e2s)?;
    let fw = fwt(&r, &b).map_err(e2s)?;
    ensure!((bw + 0.1).abs() <= 1e-15, "BWT {bw}");
    ensure!((fw - 0.1).abs() <= 1e-15, "FWT {fw}");
    let k = 5;
    let perfect: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| if j <= i { 0.9 } else { 0.3 }).collect())
        .collect();
    let p = bwt(&perfect).map_err(e2s)?;
    ensure!(p == 0.0, "perfect retention BWT {p}");
    let constant = vec![vec![0.4; k]; k];
    ensure!(bwt(&constant).map_err(e2s)? == 0.0 && fwt(&constant, &[0.4; 5]).map_err(e2s)? == 0.0, "constant matrix");
    Ok(format!("K=2 case BWT {bw}, FWT {fw}; perfect retention BWT 0"))
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-seed outcomes of the desk-scale continual-learning experiment.
#[derive(Debug, Clone, Default)]
pub struct Directional {
    /// (strategy, seed, final BWT, final eval alignment)
    pub runs: Vec<(Strategy, u64, f64, f64)>,
    /// Final eval alignment of the vidclearn runs under last-video guidance.
    pub vidclearn_last_align: Vec<f64>,
    pub seconds: Vec<(Strategy, f64)>,
}

pub const DESK_TASKS: usize = 12;
pub const DESK_EVAL: usize = 6;

/// Trains every strategy on a 12-task stream per seed with the desk config
/// and evaluates the final checkpoints.
pub fn run_directional(root: &Path, seeds: &[u64]) -> Result<Directional, String> {
    use std::time::Instant;
    use continual_t2v::evaluation::evaluate_run;
    use continual_t2v::inference::Guidance;

    let mut out = Directional::default();
    for strategy in [Strategy::Naive, Strategy::Ewc, Strategy::VidCLearn] {
        let started = Instant::now();
        for &seed in seeds {
            let ds = gen_dataset(DESK_TASKS, DESK_EVAL, seed, VideoDims::default()).map_err(e2s)?;
            let stream = TaskStream::from_dataset(&ds).map_err(e2s)?;
            let mut cfg = RunConfig::default();
            cfg.train.seed = seed;
            let dir = root.join(format!("{}_{seed}", strategy.name()));
            run_stream(&stream, strategy, &cfg, &dir, None).map_err(e2s)?;
            let ev = evaluate_run(&dir, &ds, Some(Guidance::Retrieval)).map_err(e2s)?;
            let last = ev.last();
            let bwt = last.bwt.ok_or("missing BWT for a 12-task run")?;
            out.runs.push((strategy, seed, bwt, last.eval.align));
            if strategy == Strategy::VidCLearn {
                let ev = evaluate_run(&dir, &ds, Some(Guidance::Last)).map_err(e2s)?;
                out.vidclearn_last_align.push(ev.last().eval.align);
            }
        }
        out.seconds.push((strategy, started.elapsed().as_secs_f64()));
    }
    Ok(out)
}

impl Directional {
    pub fn medians(&self, strategy: Strategy) -> (f64, f64) {
        let pick = |f: fn(&(Strategy, u64, f64, f64)) -> f64| {
            median(self.runs.iter().filter(|r| r.0 == strategy).map(f).collect())
        };
        (pick(|r| r.2), pick(|r| r.3))
    }
}

pub fn directional_ordering(d: &Directional) -> Check {
    let (nb, na) = d.medians(Strategy::Naive);
    let (eb, ea) = d.medians(Strategy::Ewc);
    let (vb, va) = d.medians(Strategy::VidCLearn);
    let slowest = d.seconds.iter().map(|s| s.1).fold(0.0, f64::max);
    let summary = format!(
        "median BWT naive {nb:.4} ewc {eb:.4} vidclearn {vb:.4}; median align naive {na:.4} ewc {ea:.4} vidclearn {va:.4}; slowest strategy {slowest:.0}s"
    );
    ensure!(vb >= nb, "BWT ordering violated: {summary}");
    ensure!(va >= na, "alignment ordering violated: {summary}");
    ensure!(slowest < 900.0, "over the time budget: {summary}");
    Ok(summary)
}

pub fn guidance_direction(d: &Directional) -> Check {
    let retrieval: Vec<f64> = d.runs.iter().filter(|r| r.0 == Strategy::VidCLearn).map(|r| r.3).collect();
    ensure!(!retrieval.is_empty(), "no vidclearn runs");
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (r, l) = (mean(&retrieval), mean(&d.vidclearn_last_align));
    ensure!(r >= l, "retrieval alignment {r:.4} below last-video alignment {l:.4}");
    Ok(format!("mean align at lambda=10: retrieval {r:.4} vs last {l:.4}"))
}

/// Runs both sweeps on a small dataset and checks the row structure.
pub fn ablation_structure(dir: &Path) -> Check {
    use continual_t2v::cli::{cmd_ablate, Sweep, ABLATION_GRID};
    use continual_t2v::inference::Guidance;

    let data = dir.join("data");
    gen_dataset(3, 2, 1, VideoDims::default()).map_err(e2s)?.write(&data).map_err(e2s)?;
    let mut cfg = RunConfig::default();
    cfg.train.steps_per_task = 2;
    let lambda = cmd_ablate(&data, Sweep::Lambda, &cfg, &dir.join("lambda")).map_err(e2s)?;
    let guidance = cmd_ablate(&data, Sweep::Guidance, &cfg, &dir.join("guidance")).map_err(e2s)?;
    ensure!(lambda.len() == 5, "lambda sweep has {} rows", lambda.len());
    ensure!(guidance.len() == 10, "guidance sweep has {} rows", guidance.len());
    for (row, &(a, g, l)) in lambda.iter().zip(&ABLATION_GRID) {
        ensure!((row.alpha, row.gamma, row.lambda) == (a, g, l), "lambda row {row:?}");
    }
    for (k, pair) in guidance.chunks(2).enumerate() {
        let modes: Vec<Guidance> = pair.iter().map(|r| r.guidance).collect();
        ensure!(modes == Guidance::ALL.to_vec(), "guidance rows {k} are {modes:?}");
        ensure!(pair.iter().all(|r| r.lambda == ABLATION_GRID[k].2), "guidance rows {k} lambda");
    }
    for (file, rows) in [("lambda/ablation_lambda.csv", 5), ("guidance/ablation_guidance.csv", 10)] {
        let text = std::fs::read_to_string(dir.join(file)).map_err(e2s)?;
        ensure!(text.lines().count() == rows + 1, "{file} has {} lines", text.lines().count());
    }
    Ok("lambda sweep 5 rows, guidance sweep 10 rows (last/retrieval per setting)".into())
}

fn cli(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["continual-t2v"];
    argv.extend_from_slice(args);
    match continual_t2v::cli::run(argv) {
        0 => Ok(()),
        code => Err(format!("`{}` exited with {code}", args.join(" "))),
    }
}

/// gen-data, train vidclearn, eval; returns the bytes of every checkpoint
/// followed by metrics.csv.
pub fn pipeline(dir: &Path, seed: u64) -> Result<Vec<(String, Vec<u8>)>, String> {
    let data = dir.join("data");
    let run = dir.join("run");
    let metrics = dir.join("metrics.csv");
    let s = seed.to_string();
    let p = |x: &Path| x.to_str().expect("utf-8 temp path").to_owned();
    cli(&["gen-data", "--out", &p(&data), "--train", "4", "--eval", "3", "--seed", &s])?;
    cli(&["train", "--data", &p(&data), "--strategy", "vidclearn", "--out", &p(&run), "--seed", &s])?;
    cli(&["eval", "--run", &p(&run), "--data", &p(&data), "--out", &p(&metrics)])?;
    let mut files = Vec::new();
    for k in 0..4 {
        let name = continual_t2v::continual::checkpoint_name(k);
        files.push((name.clone(), std::fs::read(run.join(&name)).map_err(e2s)?));
    }
    files.push(("metrics.csv".into(), std::fs::read(&metrics).map_err(e2s)?));
    Ok(files)
}

pub fn pipeline_determinism(dir: &Path) -> Check {
    let a = pipeline(&dir.join("a"), 7)?;
    let b = pipeline(&dir.join("b"), 7)?;
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        ensure!(x == y, "{name} differs between runs");
    }
    let bytes: usize = a.iter().map(|f| f.1.len()).sum();
    Ok(format!("{} files ({bytes} bytes) byte-identical across two pipelines", a.len()))
}
