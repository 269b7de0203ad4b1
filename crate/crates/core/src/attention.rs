//! Rank-one multi-head linear self-attention on in-context regression.
//!
//! With the irrelevant value/key/query blocks held at zero, each head reduces
//! to a scalar value weight `v`, a key vector `k` and a query vector `q`, and
//! the prediction for the query is
//!
//! ```text
//! ŷ = Σ_h v_h k_hᵀ M q_h = ⟨M, A⟩,   M = (1/N) Σ_j y_j x_j x_qᵀ,   A = Σ_h v_h k_h q_hᵀ.
//! ```
//!
//! The per-head block matrix of the three-layer CNN view is never built.
//! Population quantities use the closed forms in the eigenbasis of Σ with
//! E[Σ̂²] = diag(a_i).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, bilinear, dot};
use crate::spectra::{expected_sample_cov_sq_eigs, feature_map_z, CovarianceSpec, TaskSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub v: f64,
    pub k: Vec<f64>,
    pub q: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(d: usize) -> Self {
        HeadParams { v: 0.0, k: vec![0.0; d], q: vec![0.0; d] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub heads: Vec<HeadParams>,
}

impl ModelParams {
    pub fn zeros(d: usize, n_heads: usize) -> Self {
        ModelParams { heads: vec![HeadParams::zeros(d); n_heads] }
    }

    pub fn dim(&self) -> usize {
        self.heads.first().map_or(0, |h| h.k.len())
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// Number of scalar parameters, `H (2d + 1)`.
    pub fn len(&self) -> usize {
        self.n_heads() * (2 * self.dim() + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::Argument("model needs at least one head".into()));
        }
        let d = self.dim();
        for h in &self.heads {
            if h.k.len() != d {
                return Err(Error::Dimension { expected: d, actual: h.k.len() });
            }
            if h.q.len() != d {
                return Err(Error::Dimension { expected: d, actual: h.q.len() });
            }
        }
        Ok(())
    }

    /// Flattened as `[v_1, k_1.., q_1.., v_2, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for h in &self.heads {
            out.push(h.v);
            out.extend_from_slice(&h.k);
            out.extend_from_slice(&h.q);
        }
        out
    }

    pub fn from_flat(d: usize, n_heads: usize, flat: &[f64]) -> Result<Self> {
        let per = 2 * d + 1;
        if flat.len() != per * n_heads {
            return Err(Error::Dimension { expected: per * n_heads, actual: flat.len() });
        }
        let heads = flat
            .chunks(per)
            .map(|c| HeadParams { v: c[0], k: c[1..=d].to_vec(), q: c[d + 1..].to_vec() })
            .collect();
        Ok(ModelParams { heads })
    }

    /// Aggregate attention matrix A = Σ_h v_h k_h q_hᵀ (row-major `d × d`).
    pub fn aggregate(&self) -> Vec<f64> {
        let d = self.dim();
        let mut a = vec![0.0; d * d];
        for h in &self.heads {
            linalg::add_outer(&mut a, h.v, &h.k, &h.q);
        }
        a
    }
}

/// Per-head gradient, laid out like [`HeadParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadGradient {
    pub dv: f64,
    pub dk: Vec<f64>,
    pub dq: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    pub heads: Vec<HeadGradient>,
}

impl GradientSet {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for h in &self.heads {
            out.push(h.dv);
            out.extend_from_slice(&h.dk);
            out.extend_from_slice(&h.dq);
        }
        out
    }

    pub fn from_flat(d: usize, n_heads: usize, flat: &[f64]) -> Result<Self> {
        let p = ModelParams::from_flat(d, n_heads, flat)?;
        Ok(GradientSet {
            heads: p.heads.into_iter().map(|h| HeadGradient { dv: h.v, dk: h.k, dq: h.q }).collect(),
        })
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.to_flat())
    }

    pub fn head_norm(&self, head: usize) -> f64 {
        let h = &self.heads[head];
        (h.dv * h.dv + dot(&h.dk, &h.dk) + dot(&h.dq, &h.dq)).sqrt()
    }
}

/// Maps ∂L/∂A to per-head gradients: ∂v = kᵀGq, ∂k = vGq, ∂q = vGᵀk.
fn chain_to_heads(params: &ModelParams, g: &[f64]) -> GradientSet {
    let d = params.dim();
    let heads = params
        .heads
        .iter()
        .map(|h| {
            let gq = linalg::mat_vec(g, &h.q, d);
            let gtk = linalg::mat_t_vec(g, &h.k, d);
            HeadGradient {
                dv: dot(&h.k, &gq),
                dk: gq.iter().map(|x| h.v * x).collect(),
                dq: gtk.iter().map(|x| h.v * x).collect(),
            }
        })
        .collect();
    GradientSet { heads }
}

fn check_task(params: &ModelParams, task: &TaskSample) -> Result<()> {
    params.validate()?;
    if task.dim() != params.dim() {
        return Err(Error::Dimension { expected: params.dim(), actual: task.dim() });
    }
    Ok(())
}

pub fn predict(params: &ModelParams, task: &TaskSample) -> Result<f64> {
    check_task(params, task)?;
    let d = params.dim();
    let m = task.context_matrix();
    Ok(params.heads.iter().map(|h| h.v * bilinear(&h.k, &m, &h.q, d)).sum())
}

/// A task reduced to what the model consumes: its context matrix M and the
/// query label.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTask {
    pub m: Vec<f64>,
    pub y_q: f64,
}

impl PreparedTask {
    pub fn new(task: &TaskSample) -> Self {
        PreparedTask { m: task.context_matrix(), y_q: task.query_label }
    }
}

/// A finite, optionally importance-weighted training set. The loss is the
/// weighted mean Σ w_p ℓ_p / Σ w_p.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    d: usize,
    tasks: Vec<PreparedTask>,
    weights: Vec<f64>,
    total_weight: f64,
}

impl PreparedBatch {
    pub fn new(tasks: &[TaskSample]) -> Result<Self> {
        Self::weighted(tasks, &vec![1.0; tasks.len()])
    }

    pub fn weighted(tasks: &[TaskSample], weights: &[f64]) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Argument("batch must be non-empty".into()));
        }
        if weights.len() != tasks.len() {
            return Err(Error::Dimension { expected: tasks.len(), actual: weights.len() });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Argument("example weights must be positive and finite".into()));
        }
        let d = tasks[0].dim();
        if let Some(t) = tasks.iter().find(|t| t.dim() != d) {
            return Err(Error::Dimension { expected: d, actual: t.dim() });
        }
        Ok(PreparedBatch {
            d,
            tasks: tasks.iter().map(PreparedTask::new).collect(),
            weights: weights.to_vec(),
            total_weight: weights.iter().sum(),
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    fn check(&self, params: &ModelParams) -> Result<()> {
        params.validate()?;
        if params.dim() != self.d {
            return Err(Error::Dimension { expected: self.d, actual: params.dim() });
        }
        Ok(())
    }

    pub fn per_example_losses(&self, params: &ModelParams) -> Result<Vec<f64>> {
        self.check(params)?;
        let a = params.aggregate();
        Ok(self.tasks.iter().map(|t| (t.y_q - linalg::frob(&t.m, &a)).powi(2)).collect())
    }

    pub fn loss(&self, params: &ModelParams) -> Result<f64> {
        self.check(params)?;
        Ok(self.loss_of_aggregate(&params.aggregate()))
    }

    fn loss_of_aggregate(&self, a: &[f64]) -> f64 {
        let s: f64 = self
            .tasks
            .iter()
            .zip(&self.weights)
            .map(|(t, w)| w * (t.y_q - linalg::frob(&t.m, a)).powi(2))
            .sum();
        s / self.total_weight
    }

    /// Weighted loss and ∂L/∂A over the subset `indices` (all tasks when `None`).
    fn loss_and_aggregate_gradient(&self, a: &[f64], indices: Option<&[usize]>) -> (f64, Vec<f64>) {
        let mut g = vec![0.0; self.d * self.d];
        let mut total = 0.0;
        let mut loss = 0.0;
        let mut acc = |i: usize| {
            let t = &self.tasks[i];
            let w = self.weights[i];
            let r = t.y_q - linalg::frob(&t.m, a);
            let s = -2.0 * w * r;
            for (gi, mi) in g.iter_mut().zip(&t.m) {
                *gi += s * mi;
            }
            loss += w * r * r;
            total += w;
        };
        match indices {
            Some(ix) => ix.iter().for_each(|&i| acc(i)),
            None => (0..self.tasks.len()).for_each(acc),
        }
        g.iter_mut().for_each(|x| *x /= total);
        (loss / total, g)
    }

    /// Loss and gradient in one pass over the data.
    pub fn loss_and_gradients(&self, params: &ModelParams) -> Result<(f64, GradientSet)> {
        self.check(params)?;
        let (loss, g) = self.loss_and_aggregate_gradient(&params.aggregate(), None);
        Ok((loss, chain_to_heads(params, &g)))
    }

    pub fn gradients(&self, params: &ModelParams) -> Result<GradientSet> {
        self.check(params)?;
        Ok(chain_to_heads(params, &self.loss_and_aggregate_gradient(&params.aggregate(), None).1))
    }

    /// Gradient of the weighted loss restricted to a minibatch.
    pub fn minibatch_gradients(&self, params: &ModelParams, indices: &[usize]) -> Result<GradientSet> {
        self.check(params)?;
        if indices.is_empty() {
            return Err(Error::Argument("minibatch must be non-empty".into()));
        }
        Ok(chain_to_heads(params, &self.loss_and_aggregate_gradient(&params.aggregate(), Some(indices)).1))
    }
}

/// Mean squared query error over the batch.
pub fn empirical_loss(params: &ModelParams, batch: &[TaskSample]) -> Result<f64> {
    PreparedBatch::new(batch)?.loss(params)
}

/// Exact gradient of [`empirical_loss`].
pub fn empirical_gradients(params: &ModelParams, batch: &[TaskSample]) -> Result<GradientSet> {
    PreparedBatch::new(batch)?.gradients(params)
}

/// Population moments in the eigenbasis: λ_i and a_i.
struct Moments {
    lambda: Vec<f64>,
    a: Vec<f64>,
}

impl Moments {
    fn new(params: &ModelParams, spec: &CovarianceSpec, n_ctx: usize) -> Result<Self> {
        params.validate()?;
        if params.dim() != spec.dim() {
            return Err(Error::Dimension { expected: spec.dim(), actual: params.dim() });
        }
        Ok(Moments { lambda: spec.eigenvalues().to_vec(), a: expected_sample_cov_sq_eigs(spec, n_ctx)? })
    }

    /// G = ∂L/∂A = −2Σ² + 2 E[Σ̂²] A Σ.
    fn aggregate_gradient(&self, a_mat: &[f64]) -> Vec<f64> {
        let d = self.lambda.len();
        let mut g = vec![0.0; d * d];
        for r in 0..d {
            for c in 0..d {
                g[r * d + c] = 2.0 * self.a[r] * a_mat[r * d + c] * self.lambda[c];
            }
            g[r * d + r] -= 2.0 * self.lambda[r] * self.lambda[r];
        }
        g
    }
}

/// Population loss E[(y_q − ŷ_q)²] for w_⋆ ~ N(0, I):
/// Tr Σ − 2 Tr(Σ A Σ) + Tr(A Σ Aᵀ E[Σ̂²]).
pub fn population_loss(params: &ModelParams, spec: &CovarianceSpec, n_ctx: usize) -> Result<f64> {
    let mom = Moments::new(params, spec, n_ctx)?;
    Ok(population_loss_of_aggregate(&params.aggregate(), &mom.lambda, &mom.a))
}

pub(crate) fn population_loss_of_aggregate(a_mat: &[f64], lambda: &[f64], a: &[f64]) -> f64 {
    let d = lambda.len();
    let mut loss: f64 = lambda.iter().sum();
    for r in 0..d {
        loss -= 2.0 * lambda[r] * lambda[r] * a_mat[r * d + r];
        for c in 0..d {
            let x = a_mat[r * d + c];
            loss += a[r] * x * x * lambda[c];
        }
    }
    loss
}

/// Population loss and gradient together.
pub fn population_loss_and_gradients(
    params: &ModelParams,
    spec: &CovarianceSpec,
    n_ctx: usize,
) -> Result<(f64, GradientSet)> {
    let mom = Moments::new(params, spec, n_ctx)?;
    let a_mat = params.aggregate();
    let loss = population_loss_of_aggregate(&a_mat, &mom.lambda, &mom.a);
    Ok((loss, chain_to_heads(params, &mom.aggregate_gradient(&a_mat))))
}

/// Exact population gradient for every head.
pub fn population_gradients(params: &ModelParams, spec: &CovarianceSpec, n_ctx: usize) -> Result<GradientSet> {
    let mom = Moments::new(params, spec, n_ctx)?;
    Ok(chain_to_heads(params, &mom.aggregate_gradient(&params.aggregate())))
}

/// Dense symmetric matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SymMatrix {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n + c]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        linalg::mat_vec(&self.data, x, self.n)
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut m: f64 = 0.0;
        for r in 0..self.n {
            for c in 0..r {
                m = m.max((self.at(r, c) - self.at(c, r)).abs());
            }
        }
        m
    }
}

/// Population Hessian of one head's weights `(v, k, q)`, a `(2d+1)²` matrix
/// with the 3 × 3 block structure
///
/// ```text
/// H_vv = 2 (kᵀEk)(qᵀΣq)          H_kv = Gq + 2v(qᵀΣq) Ek      H_qv = Gᵀk + 2v(kᵀEk) Σq
/// H_kk = 2v²(qᵀΣq) E             H_kq = vG + 2v² E k qᵀ Σ      H_qq = 2v²(kᵀEk) Σ
/// ```
///
/// where E = E[Σ̂²] and G is the gradient with respect to the aggregate A.
pub fn hessian_blocks(params: &ModelParams, spec: &CovarianceSpec, n_ctx: usize, head: usize) -> Result<SymMatrix> {
    let mom = Moments::new(params, spec, n_ctx)?;
    if head >= params.n_heads() {
        return Err(Error::Index { index: head, len: params.n_heads() });
    }
    let d = params.dim();
    let g = mom.aggregate_gradient(&params.aggregate());
    let HeadParams { v, k, q } = &params.heads[head];
    let v = *v;
    let ek: Vec<f64> = k.iter().zip(&mom.a).map(|(x, a)| a * x).collect();
    let sq: Vec<f64> = q.iter().zip(&mom.lambda).map(|(x, l)| l * x).collect();
    let k_e_k = dot(k, &ek);
    let q_s_q = dot(q, &sq);
    let gq = linalg::mat_vec(&g, q, d);
    let gtk = linalg::mat_t_vec(&g, k, d);

    let n = 2 * d + 1;
    let mut h = vec![0.0; n * n];
    let kv = |i: usize| 1 + i;
    let qv = |i: usize| 1 + d + i;
    h[0] = 2.0 * k_e_k * q_s_q;
    for i in 0..d {
        let h_kv = gq[i] + 2.0 * v * q_s_q * ek[i];
        let h_qv = gtk[i] + 2.0 * v * k_e_k * sq[i];
        h[kv(i)] = h_kv;
        h[kv(i) * n] = h_kv;
        h[qv(i)] = h_qv;
        h[qv(i) * n] = h_qv;
        h[kv(i) * n + kv(i)] = 2.0 * v * v * q_s_q * mom.a[i];
        h[qv(i) * n + qv(i)] = 2.0 * v * v * k_e_k * mom.lambda[i];
        for j in 0..d {
            let h_kq = v * g[i * d + j] + 2.0 * v * v * ek[i] * sq[j];
            h[kv(i) * n + qv(j)] = h_kq;
            h[qv(j) * n + kv(i)] = h_kq;
        }
    }
    Ok(SymMatrix { n, data: h })
}

/// Merged key-query model viewed as a two-layer linear network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedParams {
    /// Second-layer weights, one per head.
    pub w2: Vec<f64>,
    /// First-layer rows vec(U_h), each of length d².
    pub w1: Vec<Vec<f64>>,
}

/// ŷ = w₂ᵀ W₁ z.
pub fn predict_merged(params: &MergedParams, task: &TaskSample) -> Result<f64> {
    if params.w1.len() != params.w2.len() {
        return Err(Error::Dimension { expected: params.w2.len(), actual: params.w1.len() });
    }
    let z = feature_map_z(task).values;
    let mut y = 0.0;
    for (w, row) in params.w2.iter().zip(&params.w1) {
        if row.len() != z.len() {
            return Err(Error::Dimension { expected: z.len(), actual: row.len() });
        }
        y += w * dot(row, &z);
    }
    Ok(y)
}

/// Diagonal learning progress m_i = e_iᵀ(Σ_h v_h k_h q_hᵀ)e_i.
pub fn feature_progress(params: &ModelParams, spec: &CovarianceSpec, _n_ctx: usize) -> Result<Vec<f64>> {
    params.validate()?;
    if params.dim() != spec.dim() {
        return Err(Error::Dimension { expected: spec.dim(), actual: params.dim() });
    }
    let d = params.dim();
    let a = params.aggregate();
    Ok((0..d).map(|i| a[i * d + i]).collect())
}

/// Parameters on the saddle-to-saddle ansatz: heads `0..learned` sit at their
/// learned values k = q = v e_i, head `learned` (if any) is the active head
/// with weight `active_v`, the remaining heads are zero.
pub fn ansatz_state(
    spec: &CovarianceSpec,
    n_ctx: usize,
    n_heads: usize,
    learned: usize,
    active_v: f64,
) -> Result<ModelParams> {
    let d = spec.dim();
    if learned > n_heads.min(d) {
        return Err(Error::Argument(format!("cannot have {learned} learned features with {n_heads} heads and d = {d}")));
    }
    let mut params = ModelParams::zeros(d, n_heads);
    for (i, h) in params.heads.iter_mut().enumerate() {
        let v = if i < learned {
            crate::spectra::fixed_point_v_target(spec, n_ctx, i)?
        } else if i == learned && i < d {
            active_v
        } else {
            continue;
        };
        h.v = v;
        h.k[i] = v;
        h.q[i] = v;
    }
    Ok(params)
}
