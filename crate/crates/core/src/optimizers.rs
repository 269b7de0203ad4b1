//! GD, exact SAM and first-order SAM, plus the training loop that drives them
//! in population (gradient-flow) or empirical (finite dataset) mode.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{
    hessian_blocks, population_gradients, population_loss, population_loss_and_gradients, GradientSet, ModelParams,
    PreparedBatch,
};
use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::spectra::{sample_task, CovarianceSpec};

/// Below this gradient norm SAM skips the ascent step.
pub const GRAD_GUARD: f64 = 1e-12;
/// Reported loss above this aborts training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Gd,
    SamExact,
    SamFirstOrder,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Gd => "gd",
            OptimizerKind::SamExact => "sam_exact",
            OptimizerKind::SamFirstOrder => "sam_first_order",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    Population,
    Empirical,
}

/// How test loss is measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TestLoss {
    /// Closed-form expectation over fresh tasks.
    #[default]
    Exact,
    /// Mean over a fixed, seed-pinned evaluation set.
    MonteCarlo { tasks: usize, seed: u64 },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub rho: f64,
    pub grad_mode: GradMode,
    /// Minibatch size in empirical mode; 0 means full batch.
    #[serde(default)]
    pub batch_size: usize,
    pub steps: usize,
    /// Parameter snapshots (and per-example losses) every this many steps; 0 disables.
    #[serde(default)]
    pub snapshot_every: usize,
    /// Loss and feature progress are recorded every this many steps.
    #[serde(default = "one")]
    pub log_every: usize,
    #[serde(default)]
    pub track_example_losses: bool,
    #[serde(default)]
    pub test_loss: TestLoss,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, learning_rate: f64, rho: f64, grad_mode: GradMode, steps: usize) -> Self {
        OptimizerConfig {
            kind,
            learning_rate,
            rho,
            grad_mode,
            batch_size: 0,
            steps,
            snapshot_every: 0,
            log_every: 1,
            track_example_losses: false,
            test_loss: TestLoss::Exact,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return Err(Error::Config(format!("rho must be non-negative, got {}", self.rho)));
        }
        if self.kind == OptimizerKind::Gd && self.rho != 0.0 {
            return Err(Error::Config("rho must be 0 for gd".into()));
        }
        if self.kind == OptimizerKind::SamFirstOrder && self.grad_mode == GradMode::Empirical {
            return Err(Error::Config("sam_first_order uses population Hessians; set grad_mode = population".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        if let TestLoss::MonteCarlo { tasks: 0, .. } = self.test_loss {
            return Err(Error::Config("Monte Carlo test loss needs at least one task".into()));
        }
        Ok(())
    }
}

fn check_shapes(params: &ModelParams, grads: &GradientSet) -> Result<()> {
    if grads.heads.len() != params.n_heads() {
        return Err(Error::Dimension { expected: params.n_heads(), actual: grads.heads.len() });
    }
    for g in &grads.heads {
        if g.dk.len() != params.dim() || g.dq.len() != params.dim() {
            return Err(Error::Dimension { expected: params.dim(), actual: g.dk.len().max(g.dq.len()) });
        }
    }
    Ok(())
}

/// w ← w − η g.
pub fn gd_step(params: &ModelParams, grads: &GradientSet, eta: f64) -> Result<ModelParams> {
    check_shapes(params, grads)?;
    let mut out = params.clone();
    for (h, g) in out.heads.iter_mut().zip(&grads.heads) {
        h.v -= eta * g.dv;
        h.k.iter_mut().zip(&g.dk).for_each(|(x, dx)| *x -= eta * dx);
        h.q.iter_mut().zip(&g.dq).for_each(|(x, dx)| *x -= eta * dx);
    }
    Ok(out)
}

fn shifted(params: &ModelParams, grads: &GradientSet, scale: f64) -> Result<ModelParams> {
    gd_step(params, grads, -scale)
}

/// Two-evaluation SAM: ascend to w + ρ g/‖g‖, then descend from w with the
/// gradient taken there.
pub fn sam_step_exact<F>(params: &ModelParams, mut loss_grad_fn: F, eta: f64, rho: f64) -> Result<ModelParams>
where
    F: FnMut(&ModelParams) -> Result<GradientSet>,
{
    let g = loss_grad_fn(params)?;
    sam_exact_from_grad(params, g, loss_grad_fn, eta, rho)
}

fn sam_exact_from_grad<F>(params: &ModelParams, g: GradientSet, mut loss_grad_fn: F, eta: f64, rho: f64) -> Result<ModelParams>
where
    F: FnMut(&ModelParams) -> Result<GradientSet>,
{
    let norm = g.norm();
    if rho == 0.0 || norm < GRAD_GUARD {
        return gd_step(params, &g, eta);
    }
    let perturbed = shifted(params, &g, rho / norm)?;
    let g_adv = loss_grad_fn(&perturbed)?;
    gd_step(params, &g_adv, eta)
}

/// Head with the largest gradient norm; ties go to the lower index.
pub fn active_head(grads: &GradientSet) -> usize {
    let mut best = 0;
    let mut best_norm = f64::NEG_INFINITY;
    for i in 0..grads.heads.len() {
        let n = grads.head_norm(i);
        if n > best_norm {
            best = i;
            best_norm = n;
        }
    }
    best
}

/// First-order SAM: descend on (I + P) g with P = (ρ/‖g‖) H restricted to the
/// active head; other heads take a plain gradient step.
pub fn sam_step_first_order(
    params: &ModelParams,
    spec: &CovarianceSpec,
    n_ctx: usize,
    eta: f64,
    rho: f64,
    active_head: usize,
) -> Result<ModelParams> {
    let g = population_gradients(params, spec, n_ctx)?;
    first_order_from_grad(params, spec, n_ctx, g, eta, rho, active_head)
}

fn first_order_from_grad(
    params: &ModelParams,
    spec: &CovarianceSpec,
    n_ctx: usize,
    mut g: GradientSet,
    eta: f64,
    rho: f64,
    head: usize,
) -> Result<ModelParams> {
    if head >= params.n_heads() {
        return Err(Error::Index { index: head, len: params.n_heads() });
    }
    let norm = g.norm();
    if rho == 0.0 || norm < GRAD_GUARD {
        return gd_step(params, &g, eta);
    }
    let hess = hessian_blocks(params, spec, n_ctx, head)?;
    let gh = &mut g.heads[head];
    let mut flat = vec![gh.dv];
    flat.extend_from_slice(&gh.dk);
    flat.extend_from_slice(&gh.dq);
    let hg = hess.mul_vec(&flat);
    let s = rho / norm;
    let d = params.dim();
    gh.dv += s * hg[0];
    for i in 0..d {
        gh.dk[i] += s * hg[1 + i];
        gh.dq[i] += s * hg[1 + d + i];
    }
    gd_step(params, &g, eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitMode {
    Gaussian { sigma0: f64 },
    Ansatz { eps: f64 },
}

pub fn init_params<R: Rng + ?Sized>(mode: &InitMode, d: usize, n_heads: usize, rng: &mut R) -> Result<ModelParams> {
    if d == 0 || n_heads == 0 {
        return Err(Error::Argument("need d ≥ 1 and at least one head".into()));
    }
    match *mode {
        InitMode::Gaussian { sigma0 } => {
            if !(sigma0.is_finite() && sigma0 >= 0.0) {
                return Err(Error::Argument(format!("sigma0 must be non-negative, got {sigma0}")));
            }
            let flat: Vec<f64> =
                (0..n_heads * (2 * d + 1)).map(|_| sigma0 * rng.sample::<f64, _>(StandardNormal)).collect();
            ModelParams::from_flat(d, n_heads, &flat)
        }
        InitMode::Ansatz { eps } => {
            if !(eps.is_finite() && eps >= 0.0) {
                return Err(Error::Argument(format!("eps must be non-negative, got {eps}")));
            }
            let mut p = ModelParams::zeros(d, n_heads);
            for (i, h) in p.heads.iter_mut().enumerate().take(d) {
                h.v = eps;
                h.k[i] = eps;
                h.q[i] = eps;
            }
            Ok(p)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub params: ModelParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// Reported loss: training loss in empirical mode, test loss in population mode.
    pub step_losses: Vec<(usize, f64)>,
    pub test_losses: Vec<(usize, f64)>,
    pub feature_progress_series: Vec<(usize, Vec<f64>)>,
    pub snapshots: Vec<Snapshot>,
    /// Per-example training losses at snapshot steps.
    pub per_example_losses: Option<Vec<(usize, Vec<f64>)>>,
    pub final_params: ModelParams,
}

impl TrainingTrace {
    pub fn final_loss(&self) -> f64 {
        self.step_losses.last().map_or(f64::NAN, |s| s.1)
    }

    pub fn final_test_loss(&self) -> f64 {
        self.test_losses.last().map_or(f64::NAN, |s| s.1)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.step_losses.iter().map(|s| s.1).collect()
    }

    /// `step,loss,m_1..m_d` with a header row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.feature_progress_series.first().map_or(0, |f| f.1.len());
        let mut header = String::from("step,loss");
        for i in 1..=d {
            header.push_str(&format!(",m_{i}"));
        }
        writeln!(w, "{header}")?;
        for ((step, loss), (_, m)) in self.step_losses.iter().zip(&self.feature_progress_series) {
            write!(w, "{step},{loss}")?;
            for x in m {
                write!(w, ",{x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn snapshots_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.snapshots)?)
    }
}

pub fn trace_file_name(run_id: &str, optimizer: OptimizerKind, seed: u64) -> String {
    format!("{run_id}_{}_{seed}.csv", optimizer.as_str())
}

enum Evaluator {
    Exact,
    Sampled(PreparedBatch),
}

impl Evaluator {
    fn new(mode: TestLoss, spec: &CovarianceSpec, n_ctx: usize) -> Result<Self> {
        match mode {
            TestLoss::Exact => Ok(Evaluator::Exact),
            TestLoss::MonteCarlo { tasks, seed } => {
                let mut r = rng::stream(seed, streams::EVAL);
                let set = (0..tasks).map(|_| sample_task(spec, n_ctx, &mut r, None)).collect::<Result<Vec<_>>>()?;
                Ok(Evaluator::Sampled(PreparedBatch::new(&set)?))
            }
        }
    }

    fn loss(&self, p: &ModelParams, spec: &CovarianceSpec, n_ctx: usize) -> Result<f64> {
        match self {
            Evaluator::Exact => population_loss(p, spec, n_ctx),
            Evaluator::Sampled(b) => b.loss(p),
        }
    }
}

/// Runs `cfg.steps` optimizer steps from `init`. Population mode follows the
/// exact population gradient (explicit Euler on gradient flow with dt = η);
/// empirical mode uses `dataset`, optionally in minibatches drawn from `rng`.
pub fn train<R: Rng + ?Sized>(
    init: &ModelParams,
    spec: &CovarianceSpec,
    n_ctx: usize,
    cfg: &OptimizerConfig,
    dataset: Option<&PreparedBatch>,
    rng: &mut R,
) -> Result<TrainingTrace> {
    cfg.validate()?;
    init.validate()?;
    if init.dim() != spec.dim() {
        return Err(Error::Dimension { expected: spec.dim(), actual: init.dim() });
    }
    match (cfg.grad_mode, dataset) {
        (GradMode::Empirical, None) => return Err(Error::Config("empirical mode needs a dataset".into())),
        (GradMode::Population, Some(_)) => {
            return Err(Error::Config("population mode does not take a dataset".into()))
        }
        (_, Some(ds)) if ds.dim() != spec.dim() => {
            return Err(Error::Dimension { expected: spec.dim(), actual: ds.dim() })
        }
        _ => {}
    }
    let eval = Evaluator::new(cfg.test_loss, spec, n_ctx)?;
    let n_data = dataset.map_or(0, |d| d.len());
    let minibatch = cfg.batch_size > 0 && cfg.batch_size < n_data;
    let track = cfg.track_example_losses && dataset.is_some();

    let mut trace = TrainingTrace {
        step_losses: Vec::new(),
        test_losses: Vec::new(),
        feature_progress_series: Vec::new(),
        snapshots: Vec::new(),
        per_example_losses: track.then(Vec::new),
        final_params: init.clone(),
    };

    // `fused` is the loss at `p` when the gradient pass already produced it.
    let record = |step: usize, p: &ModelParams, fused: Option<f64>, trace: &mut TrainingTrace| -> Result<()> {
        let (reported, test) = match dataset {
            None => {
                let test = match (&eval, fused) {
                    (Evaluator::Exact, Some(l)) => l,
                    _ => eval.loss(p, spec, n_ctx)?,
                };
                (test, test)
            }
            Some(ds) => (fused.map_or_else(|| ds.loss(p), Ok)?, eval.loss(p, spec, n_ctx)?),
        };
        if !reported.is_finite() || reported > DIVERGENCE_LIMIT {
            return Err(Error::Diverged { step, loss: reported, limit: DIVERGENCE_LIMIT });
        }
        trace.step_losses.push((step, reported));
        trace.test_losses.push((step, test));
        let d = p.dim();
        let a = p.aggregate();
        trace.feature_progress_series.push((step, (0..d).map(|i| a[i * d + i]).collect()));
        Ok(())
    };
    let snapshot = |step: usize, p: &ModelParams, trace: &mut TrainingTrace| -> Result<()> {
        trace.snapshots.push(Snapshot { step, params: p.clone() });
        if let (Some(rows), Some(ds)) = (trace.per_example_losses.as_mut(), dataset) {
            rows.push((step, ds.per_example_losses(p)?));
        }
        Ok(())
    };

    let mut params = init.clone();
    let mut indices = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.steps {
        if minibatch {
            indices.clear();
            indices.extend((0..cfg.batch_size).map(|_| rng.random_range(0..n_data)));
        }
        let grad = |p: &ModelParams| -> Result<GradientSet> {
            match dataset {
                None => population_gradients(p, spec, n_ctx),
                Some(ds) if minibatch => ds.minibatch_gradients(p, &indices),
                Some(ds) => ds.gradients(p),
            }
        };
        let (fused, g) = match dataset {
            None => population_loss_and_gradients(&params, spec, n_ctx).map(|(l, g)| (Some(l), g))?,
            Some(ds) if !minibatch => ds.loss_and_gradients(&params).map(|(l, g)| (Some(l), g))?,
            Some(_) => (None, grad(&params)?),
        };
        if step % cfg.log_every == 0 {
            record(step, &params, fused, &mut trace)?;
        }
        if cfg.snapshot_every > 0 && step % cfg.snapshot_every == 0 {
            snapshot(step, &params, &mut trace)?;
        }
        params = match cfg.kind {
            OptimizerKind::Gd => gd_step(&params, &g, cfg.learning_rate)?,
            OptimizerKind::SamExact => sam_exact_from_grad(&params, g, grad, cfg.learning_rate, cfg.rho)?,
            OptimizerKind::SamFirstOrder => {
                let head = active_head(&g);
                first_order_from_grad(&params, spec, n_ctx, g, cfg.learning_rate, cfg.rho, head)?
            }
        };
        if !params.to_flat().iter().all(|x| x.is_finite()) {
            return Err(Error::Diverged { step: step + 1, loss: f64::NAN, limit: DIVERGENCE_LIMIT });
        }
    }
    record(cfg.steps, &params, None, &mut trace)?;
    if cfg.snapshot_every > 0 {
        snapshot(cfg.steps, &params, &mut trace)?;
    }
    trace.final_params = params;
    Ok(trace)
}
