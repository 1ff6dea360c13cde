//! Command-line harness. Each subcommand is also callable as a library
//! function; `run` parses arguments and maps errors onto exit codes.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{Preset, RunConfig};
use crate::continual::{run_stream, RunArtifacts, RunManifest, Strategy, TaskStream, RUN_MANIFEST};
use crate::denoiser::{Checkpoint, Denoiser};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_run, metrics_csv, RunEvaluation};
use crate::inference::{guided_generate, Generation, Guidance};
use crate::retrieval::PromptStore;
use crate::synthdata::{dataset_dir_exists, gen_dataset, write_video, Dataset, VideoDims};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_EMPTY_STORE: i32 = 5;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Shape(_) | Error::InvalidArgument(_) | Error::InsufficientCombinations { .. } => EXIT_USAGE,
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::NonFinite(_) | Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::EmptyStore => EXIT_EMPTY_STORE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "continual-t2v", version, about = "Continual learning for a tiny text-to-video diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a captioned synthetic video dataset.
    GenData(GenDataArgs),
    /// Train over the dataset's training stream with one strategy.
    Train(TrainArgs),
    /// Generate a video for a prompt with guided DDIM inference.
    Generate(GenerateArgs),
    /// Evaluate every checkpoint of a run; writes metrics.csv and matrix.csv.
    Eval(EvalArgs),
    /// Write only the task-quality matrix of a run.
    Matrix(MatrixArgs),
    /// Run an ablation sweep over the temporal weight or guidance mode.
    Ablate(AblateArgs),
    /// Print the effective run configuration as JSON.
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "train", default_value_t = 12)]
    pub n_train: usize,
    #[arg(long = "eval", default_value_t = 6)]
    pub n_eval: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Frame height and width in pixels.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; its keys override the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<Preset>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Strategy,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, value_parser = parse_guidance, default_value = "retrieval")]
    pub guidance: Guidance,
    #[arg(long)]
    pub out: PathBuf,
    /// Diffusion settings; defaults to the run.json next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory; defaults to the one recorded in run.json.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the guidance mode recorded in the run configuration.
    #[arg(long, value_parser = parse_guidance)]
    pub guidance: Option<Guidance>,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    Lambda,
    Guidance,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub sweep: Sweep,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_guidance(s: &str) -> std::result::Result<Guidance, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Preset defaults, then the config file, then `--seed`. A `--preset` that
/// contradicts the file's preset is rejected.
pub fn effective_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            if let Some(p) = args.preset.filter(|&p| p != cfg.preset) {
                return Err(Error::invalid(format!(
                    "--preset {p} contradicts preset {} in {}",
                    cfg.preset,
                    path.display()
                )));
            }
            cfg
        }
        None => RunConfig::preset(args.preset.unwrap_or(Preset::Desk)),
    };
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dataset_dir_exists(dir) {
        return Err(Error::invalid(format!("no dataset at {} (run gen-data first)", dir.display())));
    }
    Dataset::load(dir)
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<Dataset> {
    if args.frames < 2 || args.size < 4 {
        return Err(Error::invalid("videos need at least 2 frames and 4x4 pixels"));
    }
    let ds = gen_dataset(args.n_train, args.n_eval, args.seed, VideoDims::new(args.frames, args.size, args.size))?;
    ds.write(&args.out)?;
    Ok(ds)
}

pub fn cmd_train(data: &Path, strategy: Strategy, cfg: &RunConfig, out: &Path) -> Result<RunArtifacts> {
    let ds = load_dataset(data)?;
    let stream = TaskStream::from_dataset(&ds)?;
    run_stream(&stream, strategy, cfg, out, Some(data))
}

fn config_for_checkpoint(checkpoint: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    if let Some(path) = explicit {
        return RunConfig::load(path);
    }
    let beside = checkpoint.parent().unwrap_or(Path::new(".")).join(RUN_MANIFEST);
    if beside.is_file() {
        Ok(RunManifest::load(beside.parent().expect("has parent"))?.config)
    } else {
        Ok(RunConfig::default())
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<Generation> {
    let store = PromptStore::load(&args.store)?;
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    let ds = load_dataset(&args.data)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = config_for_checkpoint(&args.checkpoint, args.config.as_deref())?;
    let setup = cfg.diffusion.build()?;
    let model = Denoiser::new(&ck.header.arch, &ck.params);
    let g = guided_generate(&model, &setup, &store, &ds, &args.prompt, args.guidance)?;
    write_video(&args.out, &g.video)?;
    Ok(g)
}

fn run_dataset(run: &Path, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(d) => load_dataset(d),
        None => {
            let m = RunManifest::load(run)?;
            let dir = m.data_dir.ok_or_else(|| {
                Error::invalid(format!("{} records no dataset; pass --data", run.display()))
            })?;
            load_dataset(Path::new(&dir))
        }
    }
}

/// Writes `metrics.csv` at `out` and `matrix.csv` beside it.
pub fn cmd_eval(run: &Path, data: Option<&Path>, out: &Path, guidance: Option<Guidance>) -> Result<RunEvaluation> {
    let ds = run_dataset(run, data)?;
    let ev = evaluate_run(run, &ds, guidance)?;
    crate::io::write_atomic(out, metrics_csv(&ev.rows).as_bytes())?;
    let matrix_path = out.parent().unwrap_or(Path::new("")).join("matrix.csv");
    crate::io::write_atomic(&matrix_path, ev.matrix.to_csv().as_bytes())?;
    Ok(ev)
}

pub fn cmd_matrix(run: &Path, data: Option<&Path>, out: &Path) -> Result<RunEvaluation> {
    let ds = run_dataset(run, data)?;
    let ev = evaluate_run(run, &ds, None)?;
    crate::io::write_atomic(out, ev.matrix.to_csv().as_bytes())?;
    Ok(ev)
}

/// `(alpha, gamma, lambda)` settings of the temporal-weight ablation.
pub const ABLATION_GRID: [(f64, f64, f64); 5] = [
    (0.7, 1.0, 0.0),
    (0.7, 1.0, 1.0),
    (0.8, 1.0, 10.0),
    (0.8, 1.0, 20.0),
    (0.8, 1.0, 30.0),
];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub guidance: Guidance,
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub metrics: crate::evaluation::MetricsRow,
    pub config: RunConfig,
}

pub const ABLATION_HEADER: &str = "guidance,alpha,gamma,lambda,fvd_s,fid_s,align,bwt,fwt,\
strategy,steps_per_task,learning_rate,temperature,train_steps,invert_steps,sample_steps,seed";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let m = &r.metrics;
        let c = &r.config;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},vidclearn,{},{},{},{},{},{},{}",
            r.guidance,
            r.alpha,
            r.gamma,
            r.lambda,
            m.eval.fvd_s,
            m.eval.fid_s,
            m.eval.align,
            opt(m.bwt),
            opt(m.fwt),
            c.train.steps_per_task,
            c.train.learning_rate,
            c.train.loss.temperature,
            c.diffusion.train_steps,
            c.diffusion.invert_steps,
            c.diffusion.sample_steps,
            c.train.seed
        );
    }
    out
}

/// Trains vidclearn once per grid setting under `out/lambda_{k}` and
/// evaluates the final checkpoint: with the configured guidance for the
/// lambda sweep, with both guidance modes for the guidance sweep. Writes
/// `out/ablation_{sweep}.csv`.
pub fn cmd_ablate(data: &Path, sweep: Sweep, base: &RunConfig, out: &Path) -> Result<Vec<AblationRow>> {
    let ds = load_dataset(data)?;
    let stream = TaskStream::from_dataset(&ds)?;
    let modes: Vec<Guidance> = match sweep {
        Sweep::Lambda => vec![base.guidance],
        Sweep::Guidance => Guidance::ALL.to_vec(),
    };
    let mut rows = Vec::new();
    for (k, &(alpha, gamma, lambda)) in ABLATION_GRID.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.train.loss.alpha = alpha;
        cfg.train.loss.gamma = gamma;
        cfg.train.loss.lambda_t = lambda;
        let dir = out.join(format!("lambda_{k}"));
        run_stream(&stream, Strategy::VidCLearn, &cfg, &dir, Some(data))?;
        for &g in &modes {
            let ev = evaluate_run(&dir, &ds, Some(g))?;
            rows.push(AblationRow {
                guidance: g,
                alpha,
                gamma,
                lambda,
                metrics: ev.last().clone(),
                config: RunConfig { guidance: g, ..cfg.clone() },
            });
        }
    }
    let name = match sweep {
        Sweep::Lambda => "ablation_lambda.csv",
        Sweep::Guidance => "ablation_guidance.csv",
    };
    crate::io::write_atomic(&out.join(name), ablation_csv(&rows).as_bytes())?;
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.4}"))
}

fn dispatch(cli: Cli) -> Result<String> {
    let mut out = String::new();
    match cli.command {
        Command::GenData(a) => {
            let ds = cmd_gen_data(&a)?;
            let _ = writeln!(
                out,
                "wrote {} train / {} eval videos ({}) to {}",
                ds.train().len(),
                ds.eval().len(),
                ds.dims,
                a.out.display()
            );
        }
        Command::Train(a) => {
            let cfg = effective_config(&a.cfg)?;
            let run = cmd_train(&a.data, a.strategy, &cfg, &a.out)?;
            for t in &run.manifest.tasks {
                let _ = writeln!(
                    out,
                    "task {}: L_s={:.5} L_KL={:.5} L_t={:.5} L_tot={:.5}",
                    t.task_index, t.final_l_s, t.final_l_kl, t.final_l_t, t.final_l_tot
                );
            }
            let _ = writeln!(
                out,
                "{} checkpoints in {} ({:.1}s)",
                run.checkpoints.len(),
                a.out.display(),
                run.manifest.wall_seconds
            );
        }
        Command::Generate(a) => {
            let g = cmd_generate(&a)?;
            let score = g.source.score.map(|s| format!(" score {s:.4}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "source {} ({:?}, {} guidance{score})\nwrote {}",
                g.source.video_id,
                g.source.prompt,
                a.guidance,
                a.out.display()
            );
        }
        Command::Eval(a) => {
            let ev = cmd_eval(&a.run, a.data.as_deref(), &a.out, a.guidance)?;
            let last = ev.last();
            let _ = writeln!(
                out,
                "after {} tasks: align {:.4} fvd_s {:.4} fid_s {:.4}\nBWT {} FWT {}",
                last.task_count,
                last.eval.align,
                last.eval.fvd_s,
                last.eval.fid_s,
                fmt_opt(last.bwt),
                fmt_opt(last.fwt)
            );
        }
        Command::Matrix(a) => {
            let ev = cmd_matrix(&a.run, a.data.as_deref(), &a.out)?;
            let k = ev.matrix.tasks();
            let _ = writeln!(out, "wrote {k}x{k} matrix to {}", a.out.display());
        }
        Command::Ablate(a) => {
            let cfg = effective_config(&a.cfg)?;
            let rows = cmd_ablate(&a.data, a.sweep, &cfg, &a.out)?;
            for r in &rows {
                let _ = writeln!(
                    out,
                    "{:<9} alpha={} gamma={} lambda={:<4} align {:.4} BWT {}",
                    r.guidance.name(),
                    r.alpha,
                    r.gamma,
                    r.lambda,
                    r.metrics.eval.align,
                    fmt_opt(r.metrics.bwt)
                );
            }
        }
        Command::Config(a) => out.push_str(&effective_config(&a)?.to_json_string()),
    }
    Ok(out)
}

/// Parses `args` (program name first), runs the command, prints its report
/// and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(report) => {
            print!("{report}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
