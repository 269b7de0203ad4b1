//! Data-centric upsampling: per-example loss trajectories from a cheap proxy
//! run, two-way clustering into easy and hard examples, and plans that
//! duplicate or reweight the hard group.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::PreparedBatch;
use crate::error::{Error, Result};
use crate::optimizers::{init_params, train, GradMode, InitMode, OptimizerConfig};
use crate::rng::{self, streams};
use crate::spectra::{sample_task, CovarianceSpec, TaskSample};

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub task: TaskSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrajectory {
    pub id: String,
    pub losses: Vec<f64>,
}

/// Toy dataset whose examples each carry signal along a single eigenvector:
/// w_⋆ = √d · g · e_j with g ~ N(0, 1) and j drawn from `mixture`. Returns the
/// examples and their feature indices.
pub fn difficulty_dataset<R: Rng + ?Sized>(
    spec: &CovarianceSpec,
    n_ctx: usize,
    size: usize,
    mixture: &[f64],
    rng: &mut R,
) -> Result<(Vec<Example>, Vec<usize>)> {
    let d = spec.dim();
    if mixture.len() != d {
        return Err(Error::Dimension { expected: d, actual: mixture.len() });
    }
    if mixture.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || mixture.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Argument("mixture weights must be non-negative with positive total".into()));
    }
    let total: f64 = mixture.iter().sum();
    let scale = (d as f64).sqrt();
    let mut examples = Vec::with_capacity(size);
    let mut labels = Vec::with_capacity(size);
    for i in 0..size {
        let mut u = rng.random::<f64>() * total;
        let mut j = 0;
        while j + 1 < d && (mixture[j] == 0.0 || u >= mixture[j]) {
            u -= mixture[j];
            j += 1;
        }
        while mixture[j] == 0.0 {
            j -= 1;
        }
        let mut w = vec![0.0; d];
        w[j] = scale * rng.sample::<f64, _>(StandardNormal);
        examples.push(Example { id: format!("ex{i:06}"), task: sample_task(spec, n_ctx, rng, Some(&w))? });
        labels.push(j);
    }
    Ok((examples, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyConfig {
    pub n_heads: usize,
    pub init: InitMode,
    pub optimizer: OptimizerConfig,
}

/// Trains the proxy on `dataset` and records every example's squared loss at
/// `n_checkpoints` evenly spaced steps from the untrained model to the final
/// step. A single checkpoint is the final step alone.
pub fn collect_proxy_trajectories(
    dataset: &[Example],
    spec: &CovarianceSpec,
    n_ctx: usize,
    proxy: &ProxyConfig,
    n_checkpoints: usize,
    seed: u64,
) -> Result<Vec<LossTrajectory>> {
    if dataset.is_empty() {
        return Err(Error::Argument("dataset must be non-empty".into()));
    }
    let steps = proxy.optimizer.steps;
    if n_checkpoints == 0 || steps < n_checkpoints {
        return Err(Error::Argument(format!("need 1 ≤ n_checkpoints ≤ proxy steps ({n_checkpoints} vs {steps})")));
    }
    if proxy.optimizer.grad_mode != GradMode::Empirical {
        return Err(Error::Config("proxy must train on the dataset (grad_mode = empirical)".into()));
    }
    let tasks: Vec<TaskSample> = dataset.iter().map(|e| e.task.clone()).collect();
    let batch = PreparedBatch::new(&tasks)?;
    let mut params = init_params(&proxy.init, spec.dim(), proxy.n_heads, &mut rng::stream(seed, streams::PROXY))?;
    let mut mb_rng = rng::stream(seed, streams::MINIBATCH);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n_checkpoints);
    if n_checkpoints > 1 {
        rows.push(batch.per_example_losses(&params)?);
    }
    let intervals = (n_checkpoints - 1).max(1);
    let mut done = 0;
    for k in 1..=intervals {
        let target = (k * steps + intervals / 2) / intervals;
        let mut cfg = proxy.optimizer.clone();
        cfg.steps = target - done;
        cfg.snapshot_every = 0;
        cfg.track_example_losses = false;
        cfg.log_every = cfg.steps.max(1);
        let trace = train(&params, spec, n_ctx, &cfg, Some(&batch), &mut mb_rng)?;
        params = trace.final_params;
        done = target;
        rows.push(batch.per_example_losses(&params)?);
    }
    Ok(dataset
        .iter()
        .enumerate()
        .map(|(i, e)| LossTrajectory { id: e.id.clone(), losses: rows.iter().map(|r| r[i]).collect() })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Trajectory,
    Final,
    /// log(ℓ_t / ℓ_first) per checkpoint: the shape of the curve with the
    /// per-example scale removed.
    LogRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cluster {
    Hard,
    Easy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterAssignment {
    pub labels: Vec<(String, Cluster)>,
    /// Centroids in the (standardized) feature space, hard first.
    pub centroids: [Vec<f64>; 2],
    pub feature_mode: FeatureMode,
    /// Within-cluster sum of squares after seeding and after each iteration.
    pub objective: Vec<f64>,
}

impl ClusterAssignment {
    pub fn count(&self, c: Cluster) -> usize {
        self.labels.iter().filter(|(_, l)| *l == c).count()
    }
}

fn check_trajectories(trajectories: &[LossTrajectory]) -> Result<usize> {
    let len = trajectories.first().map_or(0, |t| t.losses.len());
    for (i, t) in trajectories.iter().enumerate() {
        if t.losses.is_empty() || t.losses.len() != len {
            return Err(Error::Argument(format!("trajectory {i} ({}) has length {}, expected {len}", t.id, t.losses.len())));
        }
        if t.losses.iter().any(|x| !x.is_finite()) {
            return Err(Error::Argument(format!("trajectory {i} ({}) has a non-finite loss", t.id)));
        }
    }
    Ok(len)
}

/// Per-coordinate z-scores; constant coordinates are only centred.
fn standardize(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len() as f64;
    let dim = rows[0].len();
    let mut out = rows.to_vec();
    for c in 0..dim {
        let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n;
        let sd = (rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n).sqrt();
        for r in &mut out {
            r[c] -= mean;
            if sd > 0.0 {
                r[c] /= sd;
            }
        }
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn mean_of(rows: &[Vec<f64>], labels: &[usize], k: usize) -> Option<Vec<f64>> {
    let mut acc = vec![0.0; rows[0].len()];
    let mut n = 0usize;
    for (r, &l) in rows.iter().zip(labels) {
        if l == k {
            acc.iter_mut().zip(r).for_each(|(a, x)| *a += x);
            n += 1;
        }
    }
    (n > 0).then(|| acc.into_iter().map(|a| a / n as f64).collect())
}

fn log_ratios(losses: &[f64]) -> Vec<f64> {
    let first = losses[0].max(f64::MIN_POSITIVE);
    losses.iter().map(|l| (l.max(f64::MIN_POSITIVE) / first).ln()).collect()
}

/// Two-means with k-means++ seeding. "Hard" is the cluster with the higher
/// mean final-checkpoint loss, whatever the feature mode.
pub fn kmeans2(trajectories: &[LossTrajectory], mode: FeatureMode, max_iters: usize, seed: u64) -> Result<ClusterAssignment> {
    if trajectories.len() < 2 {
        return Err(Error::Argument("need at least two trajectories".into()));
    }
    check_trajectories(trajectories)?;
    let raw: Vec<Vec<f64>> = match mode {
        FeatureMode::Trajectory => trajectories.iter().map(|t| t.losses.clone()).collect(),
        FeatureMode::Final => trajectories.iter().map(|t| vec![*t.losses.last().unwrap()]).collect(),
        FeatureMode::LogRatio => trajectories.iter().map(|t| log_ratios(&t.losses)).collect(),
    };
    let last: Vec<f64> = trajectories.iter().map(|t| *t.losses.last().unwrap()).collect();
    if raw.iter().all(|r| r == &raw[0]) {
        return Err(Error::DegenerateClustering);
    }
    let x = standardize(&raw);
    let n = x.len();
    let mut rng = rng::stream(seed, streams::CLUSTER);

    let first = rng.random_range(0..n);
    let d2: Vec<f64> = x.iter().map(|r| sq_dist(r, &x[first])).collect();
    let total: f64 = d2.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut second = n - 1;
    for (i, w) in d2.iter().enumerate() {
        if u < *w {
            second = i;
            break;
        }
        u -= w;
    }
    if d2[second] == 0.0 {
        second = (0..n).max_by(|&a, &b| d2[a].total_cmp(&d2[b])).unwrap();
    }
    let mut centers = [x[first].clone(), x[second].clone()];

    let assign = |centers: &[Vec<f64>; 2]| -> (Vec<usize>, f64) {
        let mut sse = 0.0;
        let labels = x
            .iter()
            .map(|r| {
                let (a, b) = (sq_dist(r, &centers[0]), sq_dist(r, &centers[1]));
                sse += a.min(b);
                usize::from(b < a)
            })
            .collect();
        (labels, sse)
    };
    let (mut labels, sse) = assign(&centers);
    let mut objective = vec![sse];
    for _ in 0..max_iters {
        let means = [mean_of(&x, &labels, 0), mean_of(&x, &labels, 1)];
        for k in 0..2 {
            centers[k] = match &means[k] {
                Some(m) => m.clone(),
                // An emptied cluster restarts at the point farthest from the other mean.
                None => {
                    let other = means[1 - k].as_ref().unwrap();
                    let far = (0..n).max_by(|&a, &b| sq_dist(&x[a], other).total_cmp(&sq_dist(&x[b], other))).unwrap();
                    x[far].clone()
                }
            };
        }
        let (next, sse) = assign(&centers);
        objective.push(sse);
        if next == labels {
            break;
        }
        labels = next;
    }

    let final_loss = |k: usize| {
        let v: Vec<f64> = last.iter().zip(&labels).filter(|(_, l)| **l == k).map(|(x, _)| *x).collect();
        if v.is_empty() {
            f64::NEG_INFINITY
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let hard = usize::from(final_loss(1) > final_loss(0));
    let [c0, c1] = centers;
    let centroids = if hard == 0 { [c0, c1] } else { [c1, c0] };
    Ok(ClusterAssignment {
        labels: trajectories
            .iter()
            .zip(&labels)
            .map(|(t, &l)| (t.id.clone(), if l == hard { Cluster::Hard } else { Cluster::Easy }))
            .collect(),
        centroids,
        feature_mode: mode,
        objective,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Duplicate,
    Weight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanEntry {
    pub id: String,
    pub cluster: Cluster,
    pub multiplicity: u32,
    /// Importance weight for weight mode; defaults to the multiplicity.
    #[serde(default)]
    pub weight: Option<f64>,
}

impl PlanEntry {
    pub fn weight(&self) -> f64 {
        self.weight.unwrap_or(self.multiplicity as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterCounts {
    pub hard: usize,
    pub easy: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpsamplePlan {
    pub factor: f64,
    pub mode: PlanMode,
    #[serde(default)]
    pub counts: ClusterCounts,
    pub assignments: Vec<PlanEntry>,
}

impl UpsamplePlan {
    /// Size of the duplicated dataset.
    pub fn effective_size(&self) -> usize {
        self.assignments.iter().map(|a| a.multiplicity as usize).sum()
    }
}

/// Hard examples get multiplicity round(factor) and weight `factor`; easy
/// examples keep 1.
pub fn build_plan(assignment: &ClusterAssignment, factor: f64, mode: PlanMode) -> Result<UpsamplePlan> {
    if !(factor.is_finite() && factor >= 1.0) {
        return Err(Error::Argument(format!("upsampling factor must be ≥ 1, got {factor}")));
    }
    let mult = factor.round() as u32;
    let assignments: Vec<PlanEntry> = assignment
        .labels
        .iter()
        .map(|(id, c)| match c {
            Cluster::Hard => PlanEntry { id: id.clone(), cluster: *c, multiplicity: mult, weight: Some(factor) },
            Cluster::Easy => PlanEntry { id: id.clone(), cluster: *c, multiplicity: 1, weight: Some(1.0) },
        })
        .collect();
    Ok(UpsamplePlan {
        factor,
        mode,
        counts: ClusterCounts { hard: assignment.count(Cluster::Hard), easy: assignment.count(Cluster::Easy) },
        assignments,
    })
}

/// Same cluster labels, new factor.
pub fn rescale_plan(plan: &UpsamplePlan, factor: f64, mode: PlanMode) -> Result<UpsamplePlan> {
    let assignment = ClusterAssignment {
        labels: plan.assignments.iter().map(|a| (a.id.clone(), a.cluster)).collect(),
        centroids: [Vec::new(), Vec::new()],
        feature_mode: FeatureMode::Trajectory,
        objective: Vec::new(),
    };
    build_plan(&assignment, factor, mode)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedDataset {
    pub examples: Vec<Example>,
    pub weights: Vec<f64>,
}

impl WeightedDataset {
    pub fn tasks(&self) -> Vec<TaskSample> {
        self.examples.iter().map(|e| e.task.clone()).collect()
    }

    pub fn prepared(&self) -> Result<PreparedBatch> {
        PreparedBatch::weighted(&self.tasks(), &self.weights)
    }
}

/// Duplicate mode repeats hard examples; weight mode keeps one copy of each
/// with its importance weight.
pub fn apply_plan(dataset: &[Example], plan: &UpsamplePlan, mode: PlanMode) -> Result<WeightedDataset> {
    let by_id: HashMap<&str, &PlanEntry> = plan.assignments.iter().map(|a| (a.id.as_str(), a)).collect();
    if by_id.len() != dataset.len() || plan.assignments.len() != dataset.len() {
        return Err(Error::Argument(format!(
            "plan covers {} ids but dataset has {} examples",
            plan.assignments.len(),
            dataset.len()
        )));
    }
    let mut examples = Vec::new();
    let mut weights = Vec::new();
    for e in dataset {
        let entry = by_id.get(e.id.as_str()).ok_or_else(|| Error::Argument(format!("example {} missing from plan", e.id)))?;
        match mode {
            PlanMode::Duplicate => {
                for _ in 0..entry.multiplicity {
                    examples.push(e.clone());
                    weights.push(1.0);
                }
            }
            PlanMode::Weight => {
                examples.push(e.clone());
                weights.push(entry.weight());
            }
        }
    }
    Ok(WeightedDataset { examples, weights })
}

/// Parses trajectory JSONL (`{"id": ..., "losses": [...]}` per line).
pub fn read_trajectories<R: BufRead>(reader: R) -> Result<Vec<LossTrajectory>> {
    let mut out: Vec<LossTrajectory> = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let t: LossTrajectory =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        if t.losses.is_empty() {
            return Err(Error::Parse { line: lineno, msg: "empty trajectory".into() });
        }
        if t.losses.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse { line: lineno, msg: "non-finite loss".into() });
        }
        if let Some(first) = out.first() {
            if first.losses.len() != t.losses.len() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("trajectory length {} differs from {}", t.losses.len(), first.losses.len()),
                });
            }
        }
        if !seen.insert(t.id.clone()) {
            return Err(Error::Parse { line: lineno, msg: format!("duplicate id {}", t.id) });
        }
        out.push(t);
    }
    if out.is_empty() {
        return Err(Error::Argument("no trajectories".into()));
    }
    Ok(out)
}

pub fn ingest_trajectories(path: &Path) -> Result<Vec<LossTrajectory>> {
    read_trajectories(BufReader::new(File::open(path)?))
}

pub fn write_trajectories<W: Write>(mut w: W, trajectories: &[LossTrajectory]) -> Result<()> {
    for t in trajectories {
        writeln!(w, "{}", serde_json::to_string(t)?)?;
    }
    Ok(())
}

pub fn export_trajectories(trajectories: &[LossTrajectory], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trajectories(&mut w, trajectories)?;
    w.flush()?;
    Ok(())
}

pub fn export_plan(plan: &UpsamplePlan, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, plan)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Reads a plan file; `counts` is recomputed from the assignments.
pub fn read_plan(path: &Path) -> Result<UpsamplePlan> {
    let mut plan: UpsamplePlan = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let hard = plan.assignments.iter().filter(|a| a.cluster == Cluster::Hard).count();
    plan.counts = ClusterCounts { hard, easy: plan.assignments.len() - hard };
    Ok(plan)
}
