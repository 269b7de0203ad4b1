//! Experiment drivers: the three-arm GD / SAM / GD+upsampling comparison, the
//! theory grid and the ODE-versus-simulation check, plus their files on disk.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{ansatz_state, population_gradients, ModelParams};
use crate::error::{Error, Result};
use crate::metrics::{
    detect_learning_times, detect_loss_drops, entropy_report, head_alignment, EntropyReport, DEFAULT_DROP_RATIO,
    DEFAULT_SMOOTHING_WINDOW, DEFAULT_THETA,
};
use crate::optimizers::{
    active_head, gd_step, init_params, sam_step_first_order, train, trace_file_name, GradMode, InitMode,
    OptimizerConfig, OptimizerKind, TestLoss, TrainingTrace,
};
use crate::rng::{self, streams};
use crate::spectra::{make_spectrum, CovarianceSpec, SpectrumConfig};
use crate::theory::{
    early_phase_end, gd_ode_rhs, integrate_scalar_ode, rho_hat, sam_ode_rhs, sb_comparison, EarlyOdeParams,
};
use crate::upsampler::{
    apply_plan, build_plan, collect_proxy_trajectories, difficulty_dataset, kmeans2, Cluster, FeatureMode, PlanMode,
    ProxyConfig, WeightedDataset,
};

/// Time constant of the early-phase ODEs for this model's loss: the squared
/// error carries no 1/2, so gradient flow runs at twice the ODE's rate and
/// simulated time `step · η` matches τ = 1/2.
pub const SIMULATION_TAU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Gd,
    Sam,
    GdUpsampled,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Gd, Arm::Sam, Arm::GdUpsampled];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Gd => "gd",
            Arm::Sam => "sam",
            Arm::GdUpsampled => "gd_upsampled",
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown arm {s:?} (expected gd, sam or gd_upsampled)")))
    }
}

fn fig1_optimizer(kind: OptimizerKind, rho: f64) -> OptimizerConfig {
    let mut cfg = OptimizerConfig::new(kind, 0.2, rho, GradMode::Empirical, 60_000);
    cfg.snapshot_every = 10;
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmConfigs {
    pub gd: OptimizerConfig,
    pub sam: OptimizerConfig,
    pub gd_upsampled: OptimizerConfig,
}

impl Default for ArmConfigs {
    fn default() -> Self {
        ArmConfigs {
            gd: fig1_optimizer(OptimizerKind::Gd, 0.0),
            sam: fig1_optimizer(OptimizerKind::SamExact, 0.005),
            gd_upsampled: fig1_optimizer(OptimizerKind::Gd, 0.0),
        }
    }
}

impl ArmConfigs {
    pub fn get(&self, arm: Arm) -> &OptimizerConfig {
        match arm {
            Arm::Gd => &self.gd,
            Arm::Sam => &self.sam,
            Arm::GdUpsampled => &self.gd_upsampled,
        }
    }
}

/// Training set for the empirical arms; `mixture` gives the relative
/// frequency of each eigen-direction (uniform when absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub size: usize,
    pub mixture: Option<Vec<f64>>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { size: 2000, mixture: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpsampleConfig {
    pub proxy_heads: usize,
    /// Defaults to a third of the upsampled arm's steps.
    pub proxy_steps: Option<usize>,
    pub checkpoints: usize,
    pub features: FeatureMode,
    pub max_iters: usize,
    pub factor: f64,
    pub mode: PlanMode,
}

impl Default for UpsampleConfig {
    fn default() -> Self {
        UpsampleConfig {
            proxy_heads: 2,
            proxy_steps: None,
            checkpoints: 10,
            features: FeatureMode::LogRatio,
            max_iters: 100,
            factor: 2.0,
            mode: PlanMode::Duplicate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub theta: f64,
    pub smoothing_window: usize,
    pub drop_ratio: f64,
    pub alignment_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            theta: DEFAULT_THETA,
            smoothing_window: DEFAULT_SMOOTHING_WINDOW,
            drop_ratio: DEFAULT_DROP_RATIO,
            alignment_threshold: 0.95,
        }
    }
}

/// Either an explicit list or `count` consecutive seeds from `base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    List(Vec<u64>),
    Range { base: u64, count: usize },
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::Range { base: 0, count: 25 }
    }
}

impl Seeds {
    pub fn to_vec(&self) -> Vec<u64> {
        match self {
            Seeds::List(v) => v.clone(),
            Seeds::Range { base, count } => (0..*count as u64).map(|i| base + i).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub spectrum: SpectrumConfig,
    pub n_ctx: usize,
    pub n_heads: usize,
    pub init: InitMode,
    pub arms: ArmConfigs,
    pub dataset: DatasetConfig,
    pub upsampling: UpsampleConfig,
    pub metrics: MetricsConfig,
    pub seeds: Seeds,
    /// Overrides every arm's `test_loss`.
    pub eval: TestLoss,
    /// Rows kept in the written loss curves (every this many steps, plus the last).
    pub export_every: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            spectrum: SpectrumConfig::default(),
            n_ctx: 32,
            n_heads: 4,
            init: InitMode::Gaussian { sigma0: 0.01 },
            arms: ArmConfigs::default(),
            dataset: DatasetConfig::default(),
            upsampling: UpsampleConfig::default(),
            metrics: MetricsConfig::default(),
            seeds: Seeds::default(),
            eval: TestLoss::Exact,
            export_every: 100,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        RunConfig::from_json(&text)
    }

    /// Per-arm optimizer config with the shared evaluation applied.
    pub fn arm_optimizer(&self, arm: Arm) -> OptimizerConfig {
        let mut cfg = self.arms.get(arm).clone();
        cfg.test_loss = self.eval;
        cfg
    }

    pub fn mixture(&self, d: usize) -> Vec<f64> {
        self.dataset.mixture.clone().unwrap_or_else(|| vec![1.0; d])
    }

    pub fn proxy_steps(&self) -> usize {
        self.upsampling.proxy_steps.unwrap_or(self.arms.gd_upsampled.steps / 3)
    }

    /// Checks everything a run needs before any work starts.
    pub fn validate(&self) -> Result<CovarianceSpec> {
        let spec = self.spectrum.build()?;
        let d = spec.dim();
        if self.n_ctx == 0 {
            return Err(Error::Config("n_ctx must be at least 1".into()));
        }
        if self.n_heads == 0 {
            return Err(Error::Config("n_heads must be at least 1".into()));
        }
        let scale = match self.init {
            InitMode::Gaussian { sigma0 } => sigma0,
            InitMode::Ansatz { eps } => eps,
        };
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::Config(format!("init scale must be non-negative, got {scale}")));
        }
        for arm in Arm::ALL {
            let cfg = self.arm_optimizer(arm);
            cfg.validate().map_err(|e| Error::Config(format!("arms.{}: {e}", arm.as_str())))?;
            let want_sam = arm == Arm::Sam;
            if want_sam == (cfg.kind == OptimizerKind::Gd) {
                return Err(Error::Config(format!("arms.{} has optimizer kind {}", arm.as_str(), cfg.kind.as_str())));
            }
        }
        if self.arms.gd_upsampled.grad_mode != GradMode::Empirical {
            return Err(Error::Config("arms.gd_upsampled must train on the dataset (grad_mode = empirical)".into()));
        }
        let empirical = Arm::ALL.iter().any(|&a| self.arms.get(a).grad_mode == GradMode::Empirical);
        if empirical && self.dataset.size < 2 {
            return Err(Error::Config("dataset.size must be at least 2".into()));
        }
        let mixture = self.mixture(d);
        if mixture.len() != d {
            return Err(Error::Config(format!("dataset.mixture has {} entries for d = {d}", mixture.len())));
        }
        if mixture.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || mixture.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("dataset.mixture must be non-negative with positive total".into()));
        }
        let up = &self.upsampling;
        let proxy_steps = self.proxy_steps();
        if up.proxy_heads == 0 || up.checkpoints == 0 || proxy_steps < up.checkpoints {
            return Err(Error::Config(format!(
                "upsampling needs proxy_heads ≥ 1 and 1 ≤ checkpoints ≤ proxy steps (got {}, {}, {proxy_steps})",
                up.proxy_heads, up.checkpoints
            )));
        }
        if !(up.factor.is_finite() && up.factor >= 1.0) {
            return Err(Error::Config(format!("upsampling.factor must be ≥ 1, got {}", up.factor)));
        }
        let m = &self.metrics;
        if !(m.theta > 0.0 && m.theta < 1.0) || m.smoothing_window == 0 || !(m.drop_ratio > 0.0 && m.drop_ratio <= 1.0) {
            return Err(Error::Config("metrics need θ ∈ (0,1), smoothing_window ≥ 1, drop_ratio ∈ (0,1]".into()));
        }
        if self.seeds.to_vec().is_empty() {
            return Err(Error::Config("no seeds".into()));
        }
        if self.export_every == 0 {
            return Err(Error::Config("export_every must be at least 1".into()));
        }
        Ok(spec)
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form, with the
    /// output directory left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        hash_json(&c)
    }
}

fn hash_json<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config serializes");
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Everything kept from one (arm, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_test_loss: f64,
    pub final_train_loss: f64,
    pub entropy: Option<EntropyReport>,
    /// Steps at which smoothed training-loss drops were detected.
    pub drop_steps: Vec<usize>,
    /// min(|cos k|, |cos q|) of the head carrying feature i at drop i.
    pub drop_alignment: Vec<f64>,
    /// Upsampled arm only: examples labelled hard, and the fraction of
    /// smallest-eigenvalue examples among them.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hard_examples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hard_capture: Option<f64>,
}

impl SeedResult {
    /// Exactly `d` drops, each aligned above `threshold`.
    pub fn drops_aligned(&self, d: usize, threshold: f64) -> bool {
        self.drop_steps.len() == d && self.drop_alignment.iter().all(|&a| a > threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub optimizer: OptimizerKind,
    pub median_test_loss: f64,
    /// Over seeds where at least one feature was learned.
    pub median_entropy: Option<f64>,
    pub per_seed: Vec<SeedResult>,
}

/// An arm against GD over the seeds where both learned the same number of
/// features, so that the entropies are comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub arm: Arm,
    pub baseline: Arm,
    pub seeds_compared: usize,
    pub median_entropy: Option<f64>,
    pub baseline_median_entropy: Option<f64>,
    pub median_test_loss: f64,
    pub baseline_median_test_loss: f64,
}

impl Comparison {
    pub fn entropy_higher(&self) -> bool {
        matches!((self.median_entropy, self.baseline_median_entropy), (Some(a), Some(b)) if a > b)
    }

    pub fn test_loss_lower(&self) -> bool {
        self.median_test_loss < self.baseline_median_test_loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropCheck {
    pub arm: Arm,
    pub expected_drops: usize,
    pub seeds: usize,
    pub seeds_with_expected_drops: usize,
    pub seeds_aligned: usize,
    pub alignment_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timestamp: Option<String>,
    pub d: usize,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmSummary>,
    pub comparisons: Vec<Comparison>,
    pub drop_check: DropCheck,
}

impl ExperimentSummary {
    pub fn arm(&self, arm: Arm) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == arm)
    }

    pub fn comparison(&self, arm: Arm) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.arm == arm)
    }
}

/// Output of one (arm, seed) run: metrics plus the loss curve thinned to
/// `export_every`.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub arm: Arm,
    pub result: SeedResult,
    pub curve: TrainingTrace,
}

fn thin(trace: &TrainingTrace, every: usize) -> TrainingTrace {
    let last = trace.step_losses.last().map(|s| s.0);
    let keep = |s: usize| s.is_multiple_of(every) || Some(s) == last;
    TrainingTrace {
        step_losses: trace.step_losses.iter().filter(|s| keep(s.0)).copied().collect(),
        test_losses: trace.test_losses.iter().filter(|s| keep(s.0)).copied().collect(),
        feature_progress_series: trace.feature_progress_series.iter().filter(|s| keep(s.0)).cloned().collect(),
        snapshots: Vec::new(),
        per_example_losses: None,
        final_params: trace.final_params.clone(),
    }
}

/// Trains one arm for one seed. Dataset, initialization and minibatches come
/// from the seed's own streams, so every arm of a seed sees the same data and
/// starting point.
pub fn run_arm(config: &RunConfig, spec: &CovarianceSpec, arm: Arm, seed: u64) -> Result<RunOutcome> {
    let d = spec.dim();
    let cfg = config.arm_optimizer(arm);
    let init = init_params(&config.init, d, config.n_heads, &mut rng::stream(seed, streams::INIT))?;
    let mut hard_examples = None;
    let mut hard_capture = None;
    let data = if cfg.grad_mode == GradMode::Empirical {
        let mixture = config.mixture(d);
        let (examples, features) = difficulty_dataset(
            spec,
            config.n_ctx,
            config.dataset.size,
            &mixture,
            &mut rng::stream(seed, streams::DATASET),
        )?;
        let data = if arm == Arm::GdUpsampled {
            let up = &config.upsampling;
            let mut proxy_opt = OptimizerConfig::new(OptimizerKind::Gd, cfg.learning_rate, 0.0, GradMode::Empirical, config.proxy_steps());
            proxy_opt.batch_size = cfg.batch_size;
            let proxy = ProxyConfig { n_heads: up.proxy_heads, init: config.init, optimizer: proxy_opt };
            let traj = collect_proxy_trajectories(&examples, spec, config.n_ctx, &proxy, up.checkpoints, seed)?;
            let assignment = kmeans2(&traj, up.features, up.max_iters, seed)?;
            let weakest: Vec<usize> = (0..examples.len()).filter(|&i| features[i] == d - 1).collect();
            if !weakest.is_empty() {
                let caught = weakest.iter().filter(|&&i| assignment.labels[i].1 == Cluster::Hard).count();
                hard_capture = Some(caught as f64 / weakest.len() as f64);
            }
            hard_examples = Some(assignment.count(Cluster::Hard));
            let plan = build_plan(&assignment, up.factor, up.mode)?;
            apply_plan(&examples, &plan, up.mode)?
        } else {
            let n = examples.len();
            WeightedDataset { examples, weights: vec![1.0; n] }
        };
        Some(data.prepared()?)
    } else {
        None
    };
    let trace = train(&init, spec, config.n_ctx, &cfg, data.as_ref(), &mut rng::stream(seed, streams::MINIBATCH))?;

    let m = &config.metrics;
    let times = detect_learning_times(&trace, spec, config.n_ctx, m.theta, cfg.learning_rate)?;
    let entropy = match entropy_report(&times) {
        Ok(r) => Some(r),
        Err(Error::NoFeaturesLearned) => None,
        Err(e) => return Err(e),
    };
    let drops = detect_loss_drops(&trace.losses(), m.smoothing_window, m.drop_ratio)?;
    let drop_steps: Vec<usize> = drops.iter().map(|&ix| trace.step_losses[ix].0).collect();
    let mut drop_alignment = Vec::new();
    for (feature, &step) in drop_steps.iter().enumerate().take(d) {
        let params = trace
            .snapshots
            .iter()
            .find(|s| s.step >= step)
            .map_or(&trace.final_params, |s| &s.params);
        let a = head_alignment(params, feature)?;
        drop_alignment.push(a.cos_k.min(a.cos_q));
    }
    let result = SeedResult {
        seed,
        final_test_loss: trace.final_test_loss(),
        final_train_loss: trace.final_loss(),
        entropy,
        drop_steps,
        drop_alignment,
        hard_examples,
        hard_capture,
    };
    Ok(RunOutcome { arm, result, curve: thin(&trace, config.export_every) })
}

fn compare(arm: &ArmSummary, base: &ArmSummary) -> Comparison {
    let mut ent = (Vec::new(), Vec::new());
    for (a, b) in arm.per_seed.iter().zip(&base.per_seed) {
        if let (Some(ea), Some(eb)) = (&a.entropy, &b.entropy) {
            if ea.m == eb.m {
                ent.0.push(ea.entropy);
                ent.1.push(eb.entropy);
            }
        }
    }
    Comparison {
        arm: arm.arm,
        baseline: base.arm,
        seeds_compared: ent.0.len(),
        median_entropy: median(&ent.0),
        baseline_median_entropy: median(&ent.1),
        median_test_loss: arm.median_test_loss,
        baseline_median_test_loss: base.median_test_loss,
    }
}

/// Builds the summary from per-run results given in `Arm::ALL` × seeds order.
pub fn summarize(config: &RunConfig, d: usize, outcomes: &[RunOutcome], timestamp: Option<String>) -> ExperimentSummary {
    let seeds = config.seeds.to_vec();
    let arms: Vec<ArmSummary> = Arm::ALL
        .iter()
        .map(|&arm| {
            let per_seed: Vec<SeedResult> =
                outcomes.iter().filter(|o| o.arm == arm).map(|o| o.result.clone()).collect();
            let tests: Vec<f64> = per_seed.iter().map(|r| r.final_test_loss).collect();
            let ents: Vec<f64> = per_seed.iter().filter_map(|r| r.entropy.as_ref().map(|e| e.entropy)).collect();
            ArmSummary {
                arm,
                optimizer: config.arms.get(arm).kind,
                median_test_loss: median(&tests).unwrap_or(f64::NAN),
                median_entropy: median(&ents),
                per_seed,
            }
        })
        .collect();
    let comparisons = vec![compare(&arms[1], &arms[0]), compare(&arms[2], &arms[0])];
    let threshold = config.metrics.alignment_threshold;
    let gd = &arms[0].per_seed;
    let drop_check = DropCheck {
        arm: Arm::Gd,
        expected_drops: d,
        seeds: gd.len(),
        seeds_with_expected_drops: gd.iter().filter(|r| r.drop_steps.len() == d).count(),
        seeds_aligned: gd.iter().filter(|r| r.drops_aligned(d, threshold)).count(),
        alignment_threshold: threshold,
    };
    ExperimentSummary { config_hash: config.hash(), timestamp, d, seeds, arms, comparisons, drop_check }
}

/// Worker-pool size and where results go.
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    pub jobs: usize,
    pub out_dir: PathBuf,
    pub timestamp: Option<String>,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Writes into `<out>/.<name>.partial` and renames to `<out>/<name>` once
/// `fill` succeeds; on failure the partial directory is removed.
pub fn write_atomically<F>(out_dir: &Path, name: &str, fill: F) -> Result<PathBuf>
where
    F: FnOnce(&Path) -> Result<()>,
{
    fs::create_dir_all(out_dir)?;
    let staging = out_dir.join(format!(".{name}.partial"));
    let target = out_dir.join(name);
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    match fill(&staging) {
        Ok(()) => {
            if target.exists() {
                fs::remove_dir_all(&target)?;
            }
            fs::rename(&staging, &target)?;
            Ok(target)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Long-format curves: `arm,seed,step,loss,test_loss`.
pub fn write_long_csv<W: Write>(mut w: W, outcomes: &[RunOutcome]) -> Result<()> {
    writeln!(w, "arm,seed,step,loss,test_loss")?;
    for o in outcomes {
        for ((step, loss), (_, test)) in o.curve.step_losses.iter().zip(&o.curve.test_losses) {
            writeln!(w, "{},{},{step},{loss},{test}", o.arm.as_str(), o.result.seed)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub files: Vec<String>,
}

fn write_manifest(dir: &Path, config_hash: &str, mut files: Vec<String>) -> Result<()> {
    files.sort();
    write_json(&dir.join("manifest.json"), &Manifest { config_hash: config_hash.to_string(), files })
}

/// Runs all three arms over every seed. Files land in `<out>/fig1/`:
/// `summary.json`, `loss_curves.csv`, one trace CSV per run under `runs/`,
/// the config and a manifest.
pub fn run_fig1(config: &RunConfig, ctx: &RunContext) -> Result<(ExperimentSummary, PathBuf)> {
    let spec = config.validate()?;
    let seeds = config.seeds.to_vec();
    let tasks: Vec<(Arm, u64)> = Arm::ALL.iter().flat_map(|&a| seeds.iter().map(move |&s| (a, s))).collect();
    let outcomes: Vec<RunOutcome> = pool(ctx.jobs)?.install(|| {
        tasks
            .par_iter()
            .map(|&(arm, seed)| {
                run_arm(config, &spec, arm, seed).map_err(|e| Error::Run {
                    arm: arm.as_str().to_string(),
                    seed,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let summary = summarize(config, spec.dim(), &outcomes, ctx.timestamp.clone());
    let hash = summary.config_hash.clone();
    let dir = write_atomically(&ctx.out_dir, "fig1", |dir| {
        let mut files = vec!["config.json".to_string(), "summary.json".into(), "loss_curves.csv".into()];
        write_json(&dir.join("config.json"), config)?;
        write_json(&dir.join("summary.json"), &summary)?;
        let mut w = BufWriter::new(File::create(dir.join("loss_curves.csv"))?);
        write_long_csv(&mut w, &outcomes)?;
        w.flush()?;
        fs::create_dir_all(dir.join("runs"))?;
        for o in &outcomes {
            let name = format!("runs/{}", trace_file_name(o.arm.as_str(), config.arms.get(o.arm).kind, o.result.seed));
            let mut w = BufWriter::new(File::create(dir.join(&name))?);
            o.curve.write_csv(&mut w)?;
            w.flush()?;
            files.push(name);
        }
        write_manifest(dir, &hash, files)
    })?;
    Ok((summary, dir))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub config_hash: String,
    pub arm: Arm,
    pub optimizer: OptimizerKind,
    pub result: SeedResult,
}

/// One arm, one seed: `trace.csv` (full logging resolution thinned to
/// `export_every`), `snapshots.json` with the final parameters and the run
/// summary, under `<out>/simulate_<arm>_<seed>/`.
pub fn run_simulation(config: &RunConfig, arm: Arm, seed: u64, ctx: &RunContext) -> Result<(SimulationSummary, PathBuf)> {
    let spec = config.validate()?;
    let outcome = run_arm(config, &spec, arm, seed)
        .map_err(|e| Error::Run { arm: arm.as_str().to_string(), seed, source: Box::new(e) })?;
    let summary = SimulationSummary {
        config_hash: config.hash(),
        arm,
        optimizer: config.arms.get(arm).kind,
        result: outcome.result.clone(),
    };
    let name = format!("simulate_{}_{seed}", arm.as_str());
    let dir = write_atomically(&ctx.out_dir, &name, |dir| {
        let mut w = BufWriter::new(File::create(dir.join("trace.csv"))?);
        outcome.curve.write_csv(&mut w)?;
        w.flush()?;
        write_json(&dir.join("final_params.json"), &outcome.curve.final_params)?;
        write_json(&dir.join("summary.json"), &summary)?;
        write_json(&dir.join("config.json"), config)?;
        write_manifest(
            dir,
            &summary.config_hash,
            ["trace.csv", "final_params.json", "summary.json", "config.json"].map(String::from).to_vec(),
        )
    })?;
    Ok((summary, dir))
}

/// Cells of the theory grid: random spectra (d, eigenvalues drawn
/// log-uniformly and sorted) plus explicit ones, each crossed with
/// ρ = f · (√3/2) ε for every f in `rho_fractions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryGrid {
    pub random_spectra: usize,
    pub d_min: usize,
    pub d_max: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub spectra: Vec<Vec<f64>>,
    pub rho_fractions: Vec<f64>,
    pub eps: f64,
    pub c: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for TheoryGrid {
    fn default() -> Self {
        TheoryGrid {
            random_spectra: 1000,
            d_min: 2,
            d_max: 8,
            lambda_min: 0.05,
            lambda_max: 4.0,
            spectra: Vec::new(),
            rho_fractions: vec![0.1, 0.5, 0.9],
            eps: 0.01,
            c: 0.1,
            tau: 1.0,
            seed: 0,
        }
    }
}

impl TheoryGrid {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))
    }

    fn random_spectrum<R: Rng>(&self, rng: &mut R) -> Result<CovarianceSpec> {
        let d = rng.random_range(self.d_min..=self.d_max);
        let (lo, hi) = (self.lambda_min.ln(), self.lambda_max.ln());
        loop {
            let mut v: Vec<f64> = (0..d).map(|_| (lo + (hi - lo) * rng.random::<f64>()).exp()).collect();
            v.sort_by(|a, b| b.total_cmp(a));
            if v.windows(2).all(|w| w[0] > w[1]) {
                return make_spectrum(d, &v);
            }
        }
    }

    pub fn spectra(&self) -> Result<Vec<CovarianceSpec>> {
        if self.random_spectra > 0
            && !(self.d_min >= 1 && self.d_min <= self.d_max && self.lambda_min > 0.0 && self.lambda_min < self.lambda_max)
        {
            return Err(Error::Config("random spectra need 1 ≤ d_min ≤ d_max and 0 < lambda_min < lambda_max".into()));
        }
        let mut rng = rng::seeded(self.seed);
        let mut out = Vec::with_capacity(self.random_spectra + self.spectra.len());
        for _ in 0..self.random_spectra {
            out.push(self.random_spectrum(&mut rng)?);
        }
        for s in &self.spectra {
            out.push(make_spectrum(s.len(), s)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellStatus {
    Pass,
    Fail,
    PreconditionSkipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryCell {
    pub eigenvalues: Vec<f64>,
    pub rho: f64,
    pub status: CellStatus,
    pub h_gd: Option<f64>,
    pub h_sam: Option<f64>,
    pub entropy_inequality: Option<bool>,
    pub majorization: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckCount {
    pub name: String,
    pub passed: usize,
    pub failed: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub config_hash: String,
    pub checks: Vec<CheckCount>,
    pub cells: Vec<TheoryCell>,
}

impl TheoryReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.failed == 0)
    }
}

/// Entropy inequality and majorization over every grid cell. Cells that
/// break the theory's hypotheses are reported, not failed.
pub fn theory_suite(grid: &TheoryGrid) -> Result<TheoryReport> {
    let spectra = grid.spectra()?;
    if spectra.is_empty() || grid.rho_fractions.is_empty() {
        return Err(Error::Argument("theory grid is empty".into()));
    }
    let mut cells = Vec::with_capacity(spectra.len() * grid.rho_fractions.len());
    for spec in &spectra {
        for &f in &grid.rho_fractions {
            let rho = f * 3f64.sqrt() / 2.0 * grid.eps;
            let mut cell = TheoryCell {
                eigenvalues: spec.eigenvalues().to_vec(),
                rho,
                status: CellStatus::PreconditionSkipped,
                h_gd: None,
                h_sam: None,
                entropy_inequality: None,
                majorization: None,
                note: None,
            };
            match sb_comparison(spec, grid.eps, grid.c, grid.tau, rho) {
                Ok(cmp) => {
                    let ent = cmp.h_sam > cmp.h_gd;
                    cell.status = if ent && cmp.majorization_holds { CellStatus::Pass } else { CellStatus::Fail };
                    cell.h_gd = Some(cmp.h_gd);
                    cell.h_sam = Some(cmp.h_sam);
                    cell.entropy_inequality = Some(ent);
                    cell.majorization = Some(cmp.majorization_holds);
                }
                Err(Error::Precondition(msg)) => cell.note = Some(msg),
                Err(e) => return Err(e),
            }
            cells.push(cell);
        }
    }
    let count = |name: &str, pick: fn(&TheoryCell) -> Option<bool>| {
        let mut c = CheckCount { name: name.to_string(), passed: 0, failed: 0, skipped: 0 };
        for cell in &cells {
            match pick(cell) {
                Some(true) => c.passed += 1,
                Some(false) => c.failed += 1,
                None => c.skipped += 1,
            }
        }
        c
    };
    let checks = vec![
        count("entropy_inequality", |c| c.entropy_inequality),
        count("majorization", |c| c.majorization),
    ];
    Ok(TheoryReport { config_hash: hash_json(grid), checks, cells })
}

/// Runs the suite and writes `<out>/theory/{report.json, cells.csv,
/// grid.json, manifest.json}`.
pub fn run_theory_suite(grid: &TheoryGrid, ctx: &RunContext) -> Result<(TheoryReport, PathBuf)> {
    let report = theory_suite(grid)?;
    let dir = write_atomically(&ctx.out_dir, "theory", |dir| {
        write_json(&dir.join("report.json"), &report)?;
        write_json(&dir.join("grid.json"), grid)?;
        let mut w = BufWriter::new(File::create(dir.join("cells.csv"))?);
        writeln!(w, "cell,d,rho,status,h_gd,h_sam,entropy_inequality,majorization,eigenvalues")?;
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        let optb = |x: Option<bool>| x.map_or(String::new(), |v| v.to_string());
        for (i, c) in report.cells.iter().enumerate() {
            let status = match c.status {
                CellStatus::Pass => "pass",
                CellStatus::Fail => "fail",
                CellStatus::PreconditionSkipped => "precondition-skipped",
            };
            let eig: Vec<String> = c.eigenvalues.iter().map(|x| x.to_string()).collect();
            writeln!(
                w,
                "{i},{},{},{status},{},{},{},{},{}",
                c.eigenvalues.len(),
                c.rho,
                opt(c.h_gd),
                opt(c.h_sam),
                optb(c.entropy_inequality),
                optb(c.majorization),
                eig.join(";")
            )?;
        }
        w.flush()?;
        write_manifest(dir, &report.config_hash, ["report.json", "grid.json", "cells.csv"].map(String::from).to_vec())
    })?;
    Ok((report, dir))
}

/// Early-phase comparison of simulated population training against the
/// scalar ODEs. Feature i starts from the plateau where features 0..i are
/// learned and head i has v = k_i = q_i = ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdeCheckConfig {
    pub spectrum: SpectrumConfig,
    pub n_ctx: usize,
    pub eps: f64,
    /// The check ends at v = ½ c λ^(-1/3).
    pub c: f64,
    pub rho: f64,
    /// Upper bound on the step size.
    pub learning_rate: f64,
    /// Each feature runs at η = min(learning_rate, max_growth·τ/λ²), so the
    /// Euler error does not grow with λ.
    pub max_growth: f64,
    pub tolerance: f64,
    pub max_steps: usize,
    /// Rows kept in the written paths.
    pub export_every: usize,
}

impl Default for OdeCheckConfig {
    fn default() -> Self {
        OdeCheckConfig {
            spectrum: SpectrumConfig::Explicit(vec![1.0, 0.5, 0.25]),
            n_ctx: 32,
            eps: 0.01,
            c: 0.5,
            rho: 0.005,
            learning_rate: 0.01,
            max_growth: 0.005,
            tolerance: 0.05,
            max_steps: 20_000_000,
            export_every: 100,
        }
    }
}

impl OdeCheckConfig {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeCheckRow {
    pub arm: OptimizerKind,
    pub feature: usize,
    pub lambda: f64,
    pub rho: f64,
    pub learning_rate: f64,
    pub v_end: f64,
    pub steps: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeCheckReport {
    pub config_hash: String,
    pub tau: f64,
    pub tolerance: f64,
    pub rows: Vec<OdeCheckRow>,
}

impl OdeCheckReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }
}

/// Simulated and ODE values of v along one early phase, at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct OdePath {
    pub arm: OptimizerKind,
    pub feature: usize,
    /// (t, v_sim, v_ode)
    pub points: Vec<(f64, f64, f64)>,
}

/// Simulates one feature's early phase under GD or first-order SAM with
/// population gradients and integrates the matching ODE on the same time grid.
pub fn ode_phase(cfg: &OdeCheckConfig, spec: &CovarianceSpec, arm: OptimizerKind, feature: usize) -> Result<(OdeCheckRow, OdePath)> {
    let d = spec.dim();
    if feature >= d {
        return Err(Error::Index { index: feature, len: d });
    }
    let rho = match arm {
        OptimizerKind::Gd => 0.0,
        OptimizerKind::SamFirstOrder => cfg.rho,
        OptimizerKind::SamExact => return Err(Error::Argument("the ODE check compares gd and sam_first_order".into())),
    };
    let lambda = spec.lambda(feature);
    let v_end = 0.5 * early_phase_end(lambda, cfg.c);
    if !(cfg.eps > rho_hat(rho) && cfg.eps < v_end) {
        return Err(Error::Precondition(format!(
            "need ρ̂ < ε < ½cλ^(-1/3); got ρ̂ = {}, ε = {}, end = {v_end}",
            rho_hat(rho),
            cfg.eps
        )));
    }
    let eta = cfg.learning_rate.min(cfg.max_growth * SIMULATION_TAU / (lambda * lambda));
    let mut params: ModelParams = ansatz_state(spec, cfg.n_ctx, d, feature, cfg.eps)?;
    let mut sim = vec![params.heads[feature].v];
    while *sim.last().unwrap() < v_end {
        if sim.len() > cfg.max_steps {
            return Err(Error::Precondition(format!("feature {feature} did not reach v = {v_end} in {} steps", cfg.max_steps)));
        }
        let g = population_gradients(&params, spec, cfg.n_ctx)?;
        params = match arm {
            OptimizerKind::Gd => gd_step(&params, &g, eta)?,
            _ => sam_step_first_order(&params, spec, cfg.n_ctx, eta, rho, active_head(&g))?,
        };
        let v = params.heads[feature].v;
        if !v.is_finite() {
            return Err(Error::NonFinite { t: sim.len() as f64 * eta });
        }
        sim.push(v);
    }
    // The last step may overshoot the phase; compare up to the last in-phase point.
    sim.pop_if(|v| *v > v_end);
    let steps = sim.len() - 1;
    let p = EarlyOdeParams::new(lambda, rho, SIMULATION_TAU)?;
    let ode = match arm {
        OptimizerKind::Gd => integrate_scalar_ode(|_, v| gd_ode_rhs(v, &p), cfg.eps, steps as f64 * eta, eta)?,
        _ => integrate_scalar_ode(|_, v| sam_ode_rhs(v, &p), cfg.eps, steps as f64 * eta, eta)?,
    };
    let points: Vec<(f64, f64, f64)> = sim.iter().zip(&ode).map(|(&vs, &(t, vo))| (t, vs, vo)).collect();
    let max_rel_err = points.iter().map(|(_, vs, vo)| ((vs - vo) / vo).abs()).fold(0.0, f64::max);
    let row = OdeCheckRow {
        arm,
        feature,
        lambda,
        rho,
        learning_rate: eta,
        v_end: *sim.last().unwrap(),
        steps,
        max_rel_err,
        passed: max_rel_err < cfg.tolerance,
    };
    Ok((row, OdePath { arm, feature, points }))
}

pub fn ode_vs_simulation(cfg: &OdeCheckConfig) -> Result<(OdeCheckReport, Vec<OdePath>)> {
    let spec = cfg.spectrum.build()?;
    if !(cfg.learning_rate > 0.0 && cfg.max_growth > 0.0 && cfg.tolerance > 0.0 && cfg.c > 0.0 && cfg.rho >= 0.0) {
        return Err(Error::Config("ode check needs learning_rate, max_growth, tolerance, c > 0 and rho ≥ 0".into()));
    }
    if cfg.n_ctx == 0 || cfg.export_every == 0 {
        return Err(Error::Config("n_ctx and export_every must be at least 1".into()));
    }
    let mut rows = Vec::new();
    let mut paths = Vec::new();
    for arm in [OptimizerKind::Gd, OptimizerKind::SamFirstOrder] {
        for feature in 0..spec.dim() {
            let (row, path) = ode_phase(cfg, &spec, arm, feature)?;
            rows.push(row);
            paths.push(path);
        }
    }
    let report = OdeCheckReport { config_hash: hash_json(cfg), tau: SIMULATION_TAU, tolerance: cfg.tolerance, rows };
    Ok((report, paths))
}

/// Runs the check and writes `<out>/ode_check/{report.json, paths.csv,
/// config.json, manifest.json}`.
pub fn run_ode_vs_simulation(cfg: &OdeCheckConfig, ctx: &RunContext) -> Result<(OdeCheckReport, PathBuf)> {
    let (report, paths) = ode_vs_simulation(cfg)?;
    let dir = write_atomically(&ctx.out_dir, "ode_check", |dir| {
        write_json(&dir.join("report.json"), &report)?;
        write_json(&dir.join("config.json"), cfg)?;
        let mut w = BufWriter::new(File::create(dir.join("paths.csv"))?);
        writeln!(w, "arm,feature,t,v_sim,v_ode")?;
        for p in &paths {
            let last = p.points.len() - 1;
            for (i, (t, vs, vo)) in p.points.iter().enumerate() {
                if i % cfg.export_every == 0 || i == last {
                    writeln!(w, "{},{},{t},{vs},{vo}", p.arm.as_str(), p.feature)?;
                }
            }
        }
        w.flush()?;
        write_manifest(dir, &report.config_hash, ["report.json", "config.json", "paths.csv"].map(String::from).to_vec())
    })?;
    Ok((report, dir))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke_config() -> RunConfig {
        let mut c = RunConfig {
            spectrum: SpectrumConfig::Explicit(vec![1.0, 0.5]),
            n_heads: 2,
            seeds: Seeds::List(vec![7]),
            export_every: 1,
            ..RunConfig::default()
        };
        c.dataset.size = 40;
        c.upsampling.checkpoints = 3;
        for cfg in [&mut c.arms.gd, &mut c.arms.sam, &mut c.arms.gd_upsampled] {
            cfg.steps = 10;
        }
        c.metrics.smoothing_window = 3;
        c
    }

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = RunConfig::default();
        let spec = c.validate().unwrap();
        assert_eq!(spec.dim(), 4);
        assert_eq!(c.seeds.to_vec().len(), 25);
        let back = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        assert!(matches!(RunConfig::from_json(r#"{"n_heds": 3}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"arms": {"gd": {"kind": "gd", "learning_rate": 0.1, "grad_mode": "empirical", "steps": 5, "lr": 1}}}"#), Err(Error::Config(_))));
    }

    #[test]
    fn seeds_accept_list_or_range() {
        let c = RunConfig::from_json(r#"{"seeds": [3, 5]}"#).unwrap();
        assert_eq!(c.seeds.to_vec(), vec![3, 5]);
        let c = RunConfig::from_json(r#"{"seeds": {"base": 10, "count": 3}}"#).unwrap();
        assert_eq!(c.seeds.to_vec(), vec![10, 11, 12]);
    }

    #[test]
    fn validation_names_the_problem() {
        let mut c = RunConfig::default();
        c.arms.gd.rho = 0.1;
        assert!(matches!(c.validate(), Err(Error::Config(m)) if m.contains("arms.gd")));
        let mut c = RunConfig::default();
        c.arms.sam.kind = OptimizerKind::Gd;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.dataset.mixture = Some(vec![1.0; 3]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = Some("/tmp/x".into());
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        b.n_ctx = 8;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn fig1_smoke_writes_three_curves_and_summary() {
        let tmp = tempfile::tempdir().unwrap();
        let ctx = RunContext { jobs: 1, out_dir: tmp.path().to_path_buf(), timestamp: None };
        let (summary, dir) = run_fig1(&smoke_config(), &ctx).unwrap();
        let runs: Vec<_> = fs::read_dir(dir.join("runs")).unwrap().collect();
        assert_eq!(runs.len(), 3);
        assert!(dir.join("summary.json").exists());
        let curves = fs::read_to_string(dir.join("loss_curves.csv")).unwrap();
        assert_eq!(curves.lines().next(), Some("arm,seed,step,loss,test_loss"));
        assert_eq!(curves.lines().count(), 1 + 3 * 11);
        for arm in &summary.arms {
            let tests: Vec<f64> = arm.per_seed.iter().map(|r| r.final_test_loss).collect();
            assert_eq!(median(&tests), Some(arm.median_test_loss));
        }
        assert!(!tmp.path().join(".fig1.partial").exists());
    }

    #[test]
    fn failing_arm_is_named_and_leaves_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = smoke_config();
        c.arms.sam.learning_rate = 1e6;
        c.init = InitMode::Gaussian { sigma0: 1.0 };
        let ctx = RunContext { jobs: 1, out_dir: tmp.path().to_path_buf(), timestamp: None };
        let err = run_fig1(&c, &ctx).unwrap_err();
        assert!(matches!(&err, Error::Run { arm, seed: 7, .. } if arm == "sam"), "{err}");
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
    }

    #[test]
    fn theory_grid_skips_cells_outside_hypotheses() {
        let grid = TheoryGrid { random_spectra: 5, rho_fractions: vec![0.5, 1.0, 1.5], ..TheoryGrid::default() };
        let r = theory_suite(&grid).unwrap();
        assert_eq!(r.cells.len(), 15);
        assert_eq!(r.cells.iter().filter(|c| c.status == CellStatus::PreconditionSkipped).count(), 10);
        assert!(r.all_passed());
        assert_eq!(r.checks[0].passed, 5);
        assert_eq!(r.checks[0].skipped, 10);
    }

    #[test]
    fn empty_theory_grid_is_an_argument_error() {
        let grid = TheoryGrid { random_spectra: 0, ..TheoryGrid::default() };
        assert!(matches!(theory_suite(&grid), Err(Error::Argument(_))));
        let grid = TheoryGrid { rho_fractions: vec![], ..TheoryGrid::default() };
        assert!(matches!(theory_suite(&grid), Err(Error::Argument(_))));
    }

    #[test]
    fn ode_check_single_feature() {
        let cfg = OdeCheckConfig { spectrum: SpectrumConfig::Explicit(vec![1.0]), ..OdeCheckConfig::default() };
        let (report, _) = ode_vs_simulation(&cfg).unwrap();
        assert_eq!(report.rows.len(), 2);
        for r in &report.rows {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn zero_rho_sam_path_equals_gd_path() {
        let cfg = OdeCheckConfig { spectrum: SpectrumConfig::Explicit(vec![1.0]), rho: 0.0, ..OdeCheckConfig::default() };
        let spec = cfg.spectrum.build().unwrap();
        let (_, gd) = ode_phase(&cfg, &spec, OptimizerKind::Gd, 0).unwrap();
        let (_, sam) = ode_phase(&cfg, &spec, OptimizerKind::SamFirstOrder, 0).unwrap();
        assert_eq!(gd.points, sam.points);
    }
}
