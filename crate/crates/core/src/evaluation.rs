//! Metrics for a trained stream: Fréchet distances over fixed random
//! features of frames and whole videos, probe-based caption alignment, and
//! backward/forward transfer over the task-quality matrix.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::continual::{initial_params, RunManifest, STORE_FILE};
use crate::denoiser::{Checkpoint, Denoiser, DenoiserArch, DenoiserParams};
use crate::diffusion::DiffusionSetup;
use crate::error::{Error, Result};
use crate::inference::{guided_generate, Guidance};
use crate::numerics::{mix_seed, temporal_delta, Rng, Tensor};
use crate::retrieval::PromptStore;
use crate::synthdata::{alignment_score, probe, Dataset, VideoSample};

pub const FEATURE_DIM: usize = 16;
pub const COV_REGULARIZATION: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// One vector per frame.
    Frame,
    /// One vector per video, from the video and its frame differences.
    Video,
}

/// `tanh(W x)` with a seeded Gaussian `W` of shape `16 x len(x)`, entries
/// scaled by `1/sqrt(len(x))` so activations stay out of saturation.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    seed: u64,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        FeatureExtractor { seed }
    }

    fn projection(&self, mode: FeatureMode, input_len: usize) -> Vec<f64> {
        let label = match mode {
            FeatureMode::Frame => 1,
            FeatureMode::Video => 2,
        };
        let mut rng = Rng::seed_from(mix_seed(mix_seed(self.seed, label), input_len as u64));
        let s = 1.0 / (input_len as f64).sqrt();
        (0..FEATURE_DIM * input_len).map(|_| s * rng.normal()).collect()
    }

    pub fn extract(&self, video: &Tensor, mode: FeatureMode) -> Result<Vec<Vec<f64>>> {
        self.extract_all(std::slice::from_ref(video), mode)
    }

    /// Features of every video, drawing each projection matrix once.
    pub fn extract_all(&self, videos: &[Tensor], mode: FeatureMode) -> Result<Vec<Vec<f64>>> {
        let mut inputs: Vec<Vec<f64>> = Vec::new();
        for v in videos {
            let [c, t, h, w] = v.dims4()?;
            match mode {
                FeatureMode::Frame => {
                    let frame = h * w;
                    for f in 0..t {
                        let mut x = Vec::with_capacity(c * frame);
                        for ch in 0..c {
                            let start = (ch * t + f) * frame;
                            x.extend_from_slice(&v.data()[start..start + frame]);
                        }
                        inputs.push(x);
                    }
                }
                FeatureMode::Video => {
                    let mut x = v.data().to_vec();
                    x.extend_from_slice(temporal_delta(v)?.data());
                    inputs.push(x);
                }
            }
        }
        let Some(len) = inputs.first().map(Vec::len) else {
            return Ok(Vec::new());
        };
        if inputs.iter().any(|x| x.len() != len) {
            return Err(Error::Shape("feature inputs differ in size".into()));
        }
        let proj = self.projection(mode, len);
        Ok(inputs
            .iter()
            .map(|x| {
                proj.chunks_exact(len)
                    .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>().tanh())
                    .collect()
            })
            .collect())
    }
}

/// Square root of a symmetric positive semidefinite matrix by eigen
/// decomposition; negative eigenvalues from rounding are clamped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn gaussian_fit(set: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if set.len() < 2 {
        return Err(Error::invalid(format!(
            "a Fréchet distance needs at least 2 samples per set, got {}",
            set.len()
        )));
    }
    let d = set[0].len();
    if d == 0 || set.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("feature vectors differ in dimension".into()));
    }
    let n = set.len() as f64;
    let mut mean = DVector::zeros(d);
    for v in set {
        mean += DVector::from_column_slice(v);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let c = DVector::from_column_slice(v) - &mean;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    for i in 0..d {
        cov[(i, i)] += COV_REGULARIZATION;
    }
    Ok((mean, cov))
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)` between
/// Gaussian fits of two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, sa) = gaussian_fit(a)?;
    let (mb, sb) = gaussian_fit(b)?;
    if ma.len() != mb.len() {
        return Err(Error::Shape(format!(
            "feature dimensions differ: {} vs {}",
            ma.len(),
            mb.len()
        )));
    }
    let ra = sqrtm_psd(&sa);
    let inner = &ra * &sb * &ra;
    let cross = sqrtm_psd(&((&inner + inner.transpose()) * 0.5));
    let d = (ma - mb).norm_squared() + sa.trace() + sb.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// Mean change of each earlier task's quality between when it was learned
/// and the end of the stream.
pub fn bwt(r: &[Vec<f64>]) -> Result<f64> {
    let k = check_square(r)?;
    Ok((0..k - 1).map(|j| r[k - 1][j] - r[j][j]).sum::<f64>() / (k - 1) as f64)
}

/// Mean quality of each task just before it is learned, relative to the
/// untrained baseline.
pub fn fwt(r: &[Vec<f64>], baseline: &[f64]) -> Result<f64> {
    let k = check_square(r)?;
    if baseline.len() != k {
        return Err(Error::Shape(format!("baseline has {} entries for {k} tasks", baseline.len())));
    }
    Ok((1..k).map(|j| r[j - 1][j] - baseline[j]).sum::<f64>() / (k - 1) as f64)
}

fn check_square(r: &[Vec<f64>]) -> Result<usize> {
    let k = r.len();
    if k < 2 {
        return Err(Error::invalid(format!("transfer metrics need at least 2 tasks, got {k}")));
    }
    if r.iter().any(|row| row.len() != k) {
        return Err(Error::Shape("quality matrix is not square".into()));
    }
    Ok(k)
}

/// Produces a video for a prompt given the prompts learned so far.
pub trait VideoGenerator {
    fn generate(&self, prompt: &str, store: &PromptStore) -> Result<Tensor>;
}

/// The full guided pipeline around one set of parameters.
pub struct ModelGenerator<'a> {
    pub arch: &'a DenoiserArch,
    pub params: &'a DenoiserParams,
    pub setup: &'a DiffusionSetup,
    pub dataset: &'a Dataset,
    pub guidance: Guidance,
}

impl VideoGenerator for ModelGenerator<'_> {
    fn generate(&self, prompt: &str, store: &PromptStore) -> Result<Tensor> {
        let model = Denoiser::new(self.arch, self.params);
        Ok(guided_generate(&model, self.setup, store, self.dataset, prompt, self.guidance)?.video)
    }
}

/// Returns the ground-truth video whose caption equals the prompt; an upper
/// bound for every metric.
pub struct OracleGenerator<'a> {
    pub dataset: &'a Dataset,
}

impl VideoGenerator for OracleGenerator<'_> {
    fn generate(&self, prompt: &str, store: &PromptStore) -> Result<Tensor> {
        if store.is_empty() {
            return Err(Error::EmptyStore);
        }
        self.dataset
            .samples
            .iter()
            .find(|s| s.caption == prompt)
            .map(|s| s.video.clone())
            .ok_or_else(|| Error::invalid(format!("no ground truth for {prompt:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub fvd_s: f64,
    pub fid_s: f64,
    pub align: f64,
    pub generated: usize,
    pub failures: usize,
}

/// Generates every prompt, in id order, and compares the generations with
/// the ground truth. Prompts whose generation fails count as alignment 0
/// and are left out of the Fréchet populations.
pub fn eval_checkpoint(
    generator: &dyn VideoGenerator,
    store: &PromptStore,
    prompts: &[&VideoSample],
    feature_seed: u64,
) -> Result<EvalResult> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    let mut order: Vec<&VideoSample> = prompts.to_vec();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let mut generated = Vec::new();
    let mut truth = Vec::new();
    let mut align_sum = 0.0;
    let mut failures = 0;
    for s in &order {
        match generator.generate(&s.caption, store) {
            Ok(v) => {
                align_sum += alignment_score(&probe(&v)?, &s.spec);
                generated.push(v);
                truth.push(s.video.clone());
            }
            Err(Error::EmptyStore) => return Err(Error::EmptyStore),
            Err(_) => failures += 1,
        }
    }
    let fx = FeatureExtractor::new(feature_seed);
    let fvd_s = frechet_distance(
        &fx.extract_all(&generated, FeatureMode::Video)?,
        &fx.extract_all(&truth, FeatureMode::Video)?,
    )?;
    let fid_s = frechet_distance(
        &fx.extract_all(&generated, FeatureMode::Frame)?,
        &fx.extract_all(&truth, FeatureMode::Frame)?,
    )?;
    Ok(EvalResult {
        fvd_s,
        fid_s,
        align: align_sum / order.len().max(1) as f64,
        generated: generated.len(),
        failures,
    })
}

/// `r[i][j]`: alignment of training prompt `j` generated after task `i`.
/// `baseline[j]`: the same for the untrained model.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityMatrix {
    pub r: Vec<Vec<f64>>,
    pub baseline: Vec<f64>,
}

impl QualityMatrix {
    pub fn tasks(&self) -> usize {
        self.r.len()
    }

    pub fn bwt(&self) -> Result<f64> {
        bwt(&self.r)
    }

    pub fn fwt(&self) -> Result<f64> {
        fwt(&self.r, &self.baseline)
    }

    /// The matrix restricted to the first `k` tasks.
    pub fn leading(&self, k: usize) -> QualityMatrix {
        QualityMatrix {
            r: self.r[..k].iter().map(|row| row[..k].to_vec()).collect(),
            baseline: self.baseline[..k].to_vec(),
        }
    }

    pub fn to_csv(&self) -> String {
        let k = self.tasks();
        let mut out = String::from("row");
        for j in 0..k {
            let _ = write!(out, ",task_{j}");
        }
        out.push('\n');
        for (i, row) in self.r.iter().enumerate() {
            let _ = write!(out, "after_{i}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out.push_str("baseline");
        for v in &self.baseline {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
        out
    }
}

fn alignment_of(generator: &dyn VideoGenerator, store: &PromptStore, task: &VideoSample) -> Result<f64> {
    match generator.generate(&task.caption, store) {
        Ok(v) => Ok(alignment_score(&probe(&v)?, &task.spec)),
        Err(Error::EmptyStore) => Err(Error::EmptyStore),
        Err(_) => Ok(0.0),
    }
}

/// Fills the quality matrix. Generator `i` sees the first `i + 1` stored
/// prompts; the baseline generator for task `j` sees those learned before
/// it (at least one).
pub fn quality_matrix(
    after_task: &[&dyn VideoGenerator],
    baseline: &dyn VideoGenerator,
    store: &PromptStore,
    tasks: &[&VideoSample],
) -> Result<QualityMatrix> {
    let k = tasks.len();
    if after_task.len() != k || store.len() < k {
        return Err(Error::invalid(format!(
            "{} generators and {} stored prompts for {k} tasks",
            after_task.len(),
            store.len()
        )));
    }
    let mut r = vec![vec![0.0; k]; k];
    for (i, generator) in after_task.iter().enumerate() {
        let known = store.prefix(i + 1);
        for (j, task) in tasks.iter().enumerate() {
            r[i][j] = alignment_of(*generator, &known, task)?;
        }
    }
    let baseline = tasks
        .iter()
        .enumerate()
        .map(|(j, task)| alignment_of(baseline, &store.prefix(j.max(1)), task))
        .collect::<Result<Vec<_>>>()?;
    Ok(QualityMatrix { r, baseline })
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub strategy: String,
    pub task_count: usize,
    pub eval: EvalResult,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
    pub seed: u64,
}

pub const METRICS_HEADER: &str = "strategy,task_count,fvd_s,fid_s,align,bwt,fwt,seed";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.strategy,
            r.task_count,
            r.eval.fvd_s,
            r.eval.fid_s,
            r.eval.align,
            opt(r.bwt),
            opt(r.fwt),
            r.seed
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunEvaluation {
    pub rows: Vec<MetricsRow>,
    pub matrix: QualityMatrix,
}

impl RunEvaluation {
    pub fn last(&self) -> &MetricsRow {
        self.rows.last().expect("a run has at least one task")
    }
}

/// Loads every checkpoint of a finished run and evaluates it: the held-out
/// prompts per checkpoint (with the prompts known at that point) plus the
/// quality matrix over the training stream. Transfer columns of row `k`
/// use the leading `k x k` block of the matrix.
pub fn evaluate_run(run_dir: &Path, dataset: &Dataset, guidance: Option<Guidance>) -> Result<RunEvaluation> {
    let manifest = RunManifest::load(run_dir)?;
    if !manifest.complete || manifest.tasks.is_empty() {
        return Err(Error::format("run directory", format!("{} holds an incomplete run", run_dir.display())));
    }
    let store = PromptStore::load(&run_dir.join(STORE_FILE))?;
    let cfg = &manifest.config;
    let guidance = guidance.unwrap_or(cfg.guidance);
    let setup = cfg.diffusion.build()?;
    let mut params = Vec::new();
    let mut arch = DenoiserArch::default();
    for path in manifest.checkpoint_paths(run_dir) {
        let ck = Checkpoint::load(&path)?;
        arch = ck.header.arch;
        params.push(ck.params);
    }
    let seed = manifest.seed;
    let untrained = initial_params(&arch, seed);

    let tasks: Vec<&VideoSample> = manifest
        .stream
        .iter()
        .map(|e| {
            dataset
                .get(&e.video_id)
                .filter(|s| s.caption == e.caption)
                .ok_or_else(|| Error::format("dataset", format!("training video {} missing or changed", e.video_id)))
        })
        .collect::<Result<_>>()?;
    let eval_prompts = dataset.eval();
    let gens: Vec<ModelGenerator<'_>> = params
        .iter()
        .map(|p| ModelGenerator {
            arch: &arch,
            params: p,
            setup: &setup,
            dataset,
            guidance,
        })
        .collect();
    let baseline = ModelGenerator {
        arch: &arch,
        params: &untrained,
        setup: &setup,
        dataset,
        guidance,
    };
    let dyn_gens: Vec<&dyn VideoGenerator> = gens.iter().map(|g| g as &dyn VideoGenerator).collect();
    evaluate_generators(
        manifest.strategy.name(),
        seed,
        &dyn_gens,
        &baseline,
        &store,
        &tasks,
        &eval_prompts,
    )
}

/// Evaluation of arbitrary per-task generators; `evaluate_run` with the
/// models swapped out.
pub fn evaluate_generators(
    strategy: &str,
    seed: u64,
    after_task: &[&dyn VideoGenerator],
    baseline: &dyn VideoGenerator,
    store: &PromptStore,
    tasks: &[&VideoSample],
    eval_prompts: &[&VideoSample],
) -> Result<RunEvaluation> {
    let matrix = quality_matrix(after_task, baseline, store, tasks)?;
    let mut rows = Vec::with_capacity(after_task.len());
    for (k, generator) in after_task.iter().enumerate() {
        let eval = eval_checkpoint(*generator, &store.prefix(k + 1), eval_prompts, seed)?;
        let lead = matrix.leading(k + 1);
        let (bwt, fwt) = if k == 0 {
            (None, None)
        } else {
            (Some(lead.bwt()?), Some(lead.fwt()?))
        };
        rows.push(MetricsRow {
            strategy: strategy.to_owned(),
            task_count: k + 1,
            eval,
            bwt,
            fwt,
            seed,
        });
    }
    Ok(RunEvaluation { rows, matrix })
}
