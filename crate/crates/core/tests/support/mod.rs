//! Test-side oracles shared by the integration suites and the acceptance
//! target. Nothing here calls the routine it is used to check.
#![allow(dead_code)]

pub mod checks;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sblab::attention::{population_gradients, population_loss, ModelParams};
use sblab::spectra::{make_spectrum, CovarianceSpec};
use sblab::upsampler::LossTrajectory;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Distinct eigenvalues drawn log-uniformly from [lo, hi], sorted descending.
pub fn random_spectrum<R: Rng>(r: &mut R, d: usize, lo: f64, hi: f64) -> CovarianceSpec {
    loop {
        let mut v: Vec<f64> = (0..d).map(|_| (lo.ln() + (hi.ln() - lo.ln()) * r.random::<f64>()).exp()).collect();
        v.sort_by(|a, b| b.total_cmp(a));
        if v.windows(2).all(|w| w[0] > w[1] * (1.0 + 1e-6)) {
            return make_spectrum(d, &v).unwrap();
        }
    }
}

pub fn random_params<R: Rng>(r: &mut R, d: usize, heads: usize, scale: f64) -> ModelParams {
    let flat: Vec<f64> = (0..heads * (2 * d + 1)).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect();
    ModelParams::from_flat(d, heads, &flat).unwrap()
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// ‖a − b‖ / max(‖a‖, ‖b‖).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of the population loss in every flat coordinate.
pub fn fd_gradient(params: &ModelParams, spec: &CovarianceSpec, n_ctx: usize, h: f64) -> Vec<f64> {
    let (d, heads) = (params.dim(), params.n_heads());
    let base = params.to_flat();
    (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] = base[i] + h;
            let up = population_loss(&ModelParams::from_flat(d, heads, &p).unwrap(), spec, n_ctx).unwrap();
            p[i] = base[i] - h;
            let down = population_loss(&ModelParams::from_flat(d, heads, &p).unwrap(), spec, n_ctx).unwrap();
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Row-major (2d+1)² Hessian of one head's (v, k, q) block, by central
/// differences of the analytic gradient.
pub fn fd_head_hessian(params: &ModelParams, spec: &CovarianceSpec, n_ctx: usize, head: usize, h: f64) -> Vec<f64> {
    let (d, heads) = (params.dim(), params.n_heads());
    let m = 2 * d + 1;
    let off = head * m;
    let base = params.to_flat();
    let grad_at = |p: &[f64]| -> Vec<f64> {
        let g = population_gradients(&ModelParams::from_flat(d, heads, p).unwrap(), spec, n_ctx).unwrap();
        g.to_flat()[off..off + m].to_vec()
    };
    let mut out = vec![0.0; m * m];
    for c in 0..m {
        let mut p = base.clone();
        p[off + c] = base[off + c] + h;
        let up = grad_at(&p);
        p[off + c] = base[off + c] - h;
        let down = grad_at(&p);
        for r in 0..m {
            out[r * m + c] = (up[r] - down[r]) / (2.0 * h);
        }
    }
    out
}

/// Monte Carlo mean and standard error of diag(Σ̂²), Σ̂ = (1/N) Σ_j x_j x_jᵀ,
/// x ~ N(0, diag(λ)).
pub fn mc_sample_cov_sq_diag<R: Rng>(eigs: &[f64], n_ctx: usize, samples: usize, r: &mut R) -> (Vec<f64>, Vec<f64>) {
    let d = eigs.len();
    let sd: Vec<f64> = eigs.iter().map(|l| l.sqrt()).collect();
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut cov = vec![0.0; d * d];
    let mut x = vec![0.0; d];
    for _ in 0..samples {
        cov.iter_mut().for_each(|c| *c = 0.0);
        for _ in 0..n_ctx {
            for (xi, s) in x.iter_mut().zip(&sd) {
                *xi = s * r.sample::<f64, _>(StandardNormal);
            }
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] += x[a] * x[b];
                }
            }
        }
        let inv = 1.0 / n_ctx as f64;
        for i in 0..d {
            // (Σ̂²)_ii = Σ_k Σ̂_ik²
            let v: f64 = (0..d).map(|k| (cov[i * d + k] * inv).powi(2)).sum();
            sum[i] += v;
            sum_sq[i] += v * v;
        }
    }
    let n = samples as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let se = sum_sq
        .iter()
        .zip(&mean)
        .map(|(s2, m)| ((s2 / n - m * m).max(0.0) * n / (n - 1.0) / n).sqrt())
        .collect();
    (mean, se)
}

/// Adaptive Simpson quadrature to a tolerance relative to the first estimate.
pub fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, rel_tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn step<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, rel_tol * whole.abs(), 40)
}

/// Shannon entropy of t / Σt, computed directly.
pub fn entropy_of_times(t: &[f64]) -> f64 {
    let s: f64 = t.iter().sum();
    -t.iter().map(|x| x / s).filter(|p| *p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// a ≻ b on probability vectors: descending prefix sums of a dominate b's.
pub fn majorizes(a: &[f64], b: &[f64]) -> bool {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| y.total_cmp(x));
    b.sort_by(|x, y| y.total_cmp(x));
    let (mut sa, mut sb) = (0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        sa += x;
        sb += y;
        if sa < sb - 1e-12 {
            return false;
        }
    }
    (sa - sb).abs() < 1e-9
}

/// Least-squares slope of y on x.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Five-point derivative.
pub fn derivative<F: Fn(f64) -> f64>(f: &F, t: f64, h: f64) -> f64 {
    (-f(t + 2.0 * h) + 8.0 * f(t + h) - 8.0 * f(t - h) + f(t - 2.0 * h)) / (12.0 * h)
}

/// Two planted groups of loss curves: "easy" curves fall quickly to a low
/// floor, "hard" ones fall slowly and stay high. Each curve gets a random
/// overall scale and multiplicative noise. Returns the trajectories and
/// whether each one is hard.
pub fn planted_corpus(n: usize, checkpoints: usize, hard_fraction: f64, seed: u64) -> (Vec<LossTrajectory>, Vec<bool>) {
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let hard = r.random::<f64>() < hard_fraction;
        let (rate, floor) = if hard { (0.15, 0.6) } else { (1.0, 0.1) };
        let scale = 1.0 + 0.1 * r.sample::<f64, _>(StandardNormal);
        let losses = (0..checkpoints)
            .map(|t| {
                let clean = floor + (1.0 - floor) * (-rate * t as f64).exp();
                scale * clean * (1.0 + 0.05 * r.sample::<f64, _>(StandardNormal))
            })
            .collect();
        out.push(LossTrajectory { id: format!("p{i:05}"), losses });
        truth.push(hard);
    }
    (out, truth)
}
