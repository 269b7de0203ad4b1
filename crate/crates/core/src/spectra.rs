//! Covariance spectra, in-context regression tasks, and the spectral
//! quantities shared by the model, the trainers, and the theory checks.
//!
//! Eigenvectors are the standard basis throughout, so a spectrum is just a
//! strictly decreasing list of positive eigenvalues.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovarianceSpec {
    eigenvalues: Vec<f64>,
}

impl CovarianceSpec {
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    pub fn lambda(&self, i: usize) -> f64 {
        self.eigenvalues[i]
    }

    /// ‖Σ‖_F.
    pub fn frobenius_norm(&self) -> f64 {
        self.eigenvalues.iter().map(|l| l * l).sum::<f64>().sqrt()
    }
}

impl<'de> Deserialize<'de> for CovarianceSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let cfg = SpectrumConfig::deserialize(deserializer)?;
        cfg.build().map_err(serde::de::Error::custom)
    }
}

/// Validates and wraps a spectrum. `d` must equal the number of eigenvalues.
pub fn make_spectrum(d: usize, eigenvalues: &[f64]) -> Result<CovarianceSpec> {
    if d == 0 {
        return Err(Error::Spectrum("dimension must be at least 1".into()));
    }
    if eigenvalues.len() != d {
        return Err(Error::Dimension { expected: d, actual: eigenvalues.len() });
    }
    for (i, &l) in eigenvalues.iter().enumerate() {
        if !l.is_finite() || l <= 0.0 {
            return Err(Error::Spectrum(format!("eigenvalue at index {i} must be positive and finite, got {l}")));
        }
        if i > 0 {
            let prev = eigenvalues[i - 1];
            if l == prev {
                return Err(Error::Spectrum(format!("eigenvalues must be distinct (index {i} repeats {l})")));
            }
            if l > prev {
                return Err(Error::Spectrum(format!(
                    "eigenvalues must be strictly decreasing (index {i}: {l} > {prev})"
                )));
            }
        }
    }
    Ok(CovarianceSpec { eigenvalues: eigenvalues.to_vec() })
}

/// Spectrum as written in run-config files: an explicit eigenvalue list or
/// `{"geometric": {"gamma": g, "d": d}}` meaning λ_i = g^(i-1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpectrumConfig {
    Explicit(Vec<f64>),
    Geometric { geometric: GeometricSpectrum },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometricSpectrum {
    pub gamma: f64,
    pub d: usize,
}

impl SpectrumConfig {
    pub fn build(&self) -> Result<CovarianceSpec> {
        match self {
            SpectrumConfig::Explicit(values) => make_spectrum(values.len(), values),
            SpectrumConfig::Geometric { geometric } => {
                let GeometricSpectrum { gamma, d } = *geometric;
                if !(gamma > 0.0 && gamma < 1.0) {
                    return Err(Error::Spectrum(format!("geometric ratio must lie in (0, 1), got {gamma}")));
                }
                let values: Vec<f64> = (0..d).map(|i| gamma.powi(i as i32)).collect();
                make_spectrum(d, &values)
            }
        }
    }
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        SpectrumConfig::Geometric { geometric: GeometricSpectrum { gamma: 0.5, d: 4 } }
    }
}

fn check_context(n_ctx: usize) -> Result<()> {
    if n_ctx == 0 {
        return Err(Error::Argument("context length N must be at least 1".into()));
    }
    Ok(())
}

/// Eigenvalues a_i of E[Σ̂²] for a context of `n_ctx` samples:
/// a_i = (1 + 1/N) λ_i² + (Tr Σ / N) λ_i.
pub fn expected_sample_cov_sq_eigs(spec: &CovarianceSpec, n_ctx: usize) -> Result<Vec<f64>> {
    check_context(n_ctx)?;
    let n = n_ctx as f64;
    let tr = spec.trace();
    Ok(spec.eigenvalues.iter().map(|&l| (1.0 + 1.0 / n) * l * l + tr / n * l).collect())
}

/// `λ_i + (λ_i + Tr Σ)/N`, the quantity whose inverse is the learned
/// diagonal entry of Σ_h v_h k_h q_hᵀ.
fn plateau_scale(spec: &CovarianceSpec, n_ctx: usize, i: usize) -> Result<f64> {
    check_context(n_ctx)?;
    if i >= spec.dim() {
        return Err(Error::Index { index: i, len: spec.dim() });
    }
    let l = spec.lambda(i);
    Ok(l + (l + spec.trace()) / n_ctx as f64)
}

/// Value weight of a fully learned feature `i` (0-based) on the ansatz:
/// (λ_i + (λ_i + Tr Σ)/N)^(-1/3).
pub fn fixed_point_v_target(spec: &CovarianceSpec, n_ctx: usize, i: usize) -> Result<f64> {
    Ok(plateau_scale(spec, n_ctx, i)?.powf(-1.0 / 3.0))
}

/// Target of the diagonal progress m_i = e_iᵀ(Σ_h v_h k_h q_hᵀ)e_i once
/// feature `i` is learned: (λ_i + (λ_i + Tr Σ)/N)^(-1).
pub fn fixed_point_m_target(spec: &CovarianceSpec, n_ctx: usize, i: usize) -> Result<f64> {
    Ok(plateau_scale(spec, n_ctx, i)?.recip())
}

/// One in-context regression sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSample {
    pub context_inputs: Vec<Vec<f64>>,
    pub context_labels: Vec<f64>,
    pub query_input: Vec<f64>,
    pub query_label: f64,
    pub task_weights: Vec<f64>,
}

impl TaskSample {
    pub fn dim(&self) -> usize {
        self.query_input.len()
    }

    pub fn n_ctx(&self) -> usize {
        self.context_inputs.len()
    }

    /// M = (1/N) Σ_j y_j x_j x_qᵀ, row-major `d × d`.
    pub fn context_matrix(&self) -> Vec<f64> {
        let d = self.dim();
        let n = self.n_ctx() as f64;
        let mut s = vec![0.0; d];
        for (x, y) in self.context_inputs.iter().zip(&self.context_labels) {
            for (acc, xi) in s.iter_mut().zip(x) {
                *acc += y * xi;
            }
        }
        let mut m = vec![0.0; d * d];
        for r in 0..d {
            for c in 0..d {
                m[r * d + c] = s[r] * self.query_input[c] / n;
            }
        }
        m
    }
}

fn gaussian_vector<R: Rng + ?Sized>(spec: &CovarianceSpec, rng: &mut R) -> Vec<f64> {
    spec.eigenvalues
        .iter()
        .map(|&l| {
            let g: f64 = rng.sample(StandardNormal);
            l.sqrt() * g
        })
        .collect()
}

/// Draws x_1..x_N, x_q ~ N(0, Σ) and w_⋆ ~ N(0, I) (or the override) and
/// labels every input with y = w_⋆ · x.
pub fn sample_task<R: Rng + ?Sized>(
    spec: &CovarianceSpec,
    n_ctx: usize,
    rng: &mut R,
    weight_override: Option<&[f64]>,
) -> Result<TaskSample> {
    check_context(n_ctx)?;
    let d = spec.dim();
    let task_weights = match weight_override {
        Some(w) if w.len() != d => return Err(Error::Dimension { expected: d, actual: w.len() }),
        Some(w) => w.to_vec(),
        None => (0..d).map(|_| rng.sample(StandardNormal)).collect(),
    };
    let label = |x: &[f64]| crate::linalg::dot(&task_weights, x);
    let context_inputs: Vec<Vec<f64>> = (0..n_ctx).map(|_| gaussian_vector(spec, rng)).collect();
    let context_labels = context_inputs.iter().map(|x| label(x)).collect();
    let query_input = gaussian_vector(spec, rng);
    let query_label = label(&query_input);
    Ok(TaskSample { context_inputs, context_labels, query_input, query_label, task_weights })
}

/// Cubic feature map z = vec((1/N) Σ_j y_j x_j x_qᵀ) with column-major
/// flattening, length d².
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVecZ {
    pub values: Vec<f64>,
}

pub fn feature_map_z(task: &TaskSample) -> FeatureVecZ {
    let d = task.dim();
    let m = task.context_matrix();
    let mut values = vec![0.0; d * d];
    for c in 0..d {
        for r in 0..d {
            values[c * d + r] = m[r * d + c];
        }
    }
    FeatureVecZ { values }
}
