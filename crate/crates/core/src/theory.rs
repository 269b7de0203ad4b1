//! Reduced-order predictions: early-phase scalar ODEs for separate key/query
//! heads, learning times and their entropy, and the merged key-query ODE with
//! its closed-form solutions and escape times.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::spectra::CovarianceSpec;

/// Below this ρ̂ the SAM learning time uses the GD formula.
const RHO_HAT_EPS: f64 = 1e-12;

/// ρ̂ = 2ρ/√3.
pub fn rho_hat(rho: f64) -> f64 {
    2.0 * rho / 3f64.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EarlyOdeParams {
    pub lambda: f64,
    pub rho: f64,
    pub tau: f64,
    pub rho_hat: f64,
}

impl EarlyOdeParams {
    pub fn new(lambda: f64, rho: f64, tau: f64) -> Result<Self> {
        if !(lambda > 0.0 && tau > 0.0 && rho >= 0.0) || !(lambda.is_finite() && tau.is_finite() && rho.is_finite()) {
            return Err(Error::Argument(format!("need λ > 0, τ > 0, ρ ≥ 0 (got λ={lambda}, τ={tau}, ρ={rho})")));
        }
        Ok(EarlyOdeParams { lambda, rho, tau, rho_hat: rho_hat(rho) })
    }
}

/// τ v̇ = λ² v².
pub fn gd_ode_rhs(v: f64, p: &EarlyOdeParams) -> f64 {
    p.lambda * p.lambda * v * v / p.tau
}

/// τ v̇ = λ² v² − ρ̂ λ² v.
pub fn sam_ode_rhs(v: f64, p: &EarlyOdeParams) -> f64 {
    p.lambda * p.lambda * v * (v - p.rho_hat) / p.tau
}

fn rk4_step<F: Fn(f64, f64) -> f64>(rhs: &F, t: f64, v: f64, h: f64) -> f64 {
    let k1 = rhs(t, v);
    let k2 = rhs(t + h / 2.0, v + h * k1 / 2.0);
    let k3 = rhs(t + h / 2.0, v + h * k2 / 2.0);
    let k4 = rhs(t + h, v + h * k3);
    v + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Classical RK4 from `t = 0` to `t_end`. The step is shrunk slightly so the
/// last point lands exactly on `t_end`.
pub fn integrate_scalar_ode<F: Fn(f64, f64) -> f64>(rhs: F, v0: f64, t_end: f64, dt: f64) -> Result<Vec<(f64, f64)>> {
    integrate_capped(rhs, v0, t_end, dt, f64::INFINITY)
}

/// As [`integrate_scalar_ode`], but stops after the first point with
/// `|v| > cap`.
pub fn integrate_capped<F: Fn(f64, f64) -> f64>(
    rhs: F,
    v0: f64,
    t_end: f64,
    dt: f64,
    cap: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Argument(format!("dt must be positive, got {dt}")));
    }
    if !v0.is_finite() || !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(Error::Argument("v0 and t_end must be finite, t_end ≥ 0".into()));
    }
    let n = (t_end / dt).ceil().max(if t_end > 0.0 { 1.0 } else { 0.0 }) as usize;
    let h = if n > 0 { t_end / n as f64 } else { 0.0 };
    let mut path = Vec::with_capacity(n + 1);
    let mut v = v0;
    path.push((0.0, v));
    for i in 0..n {
        let t = i as f64 * h;
        v = rk4_step(&rhs, t, v, h);
        let t1 = (i + 1) as f64 * h;
        if !v.is_finite() {
            return Err(Error::NonFinite { t: t1 });
        }
        path.push((t1, v));
        if v.abs() > cap {
            break;
        }
    }
    Ok(path)
}

/// Upper limit u = c λ^{-1/3} of the early phase.
pub fn early_phase_end(lambda: f64, c: f64) -> f64 {
    c * lambda.powf(-1.0 / 3.0)
}

fn check_time_args(lambda: f64, eps: f64, c: f64, tau: f64) -> Result<f64> {
    if !(lambda > 0.0 && eps > 0.0 && c > 0.0 && tau > 0.0) {
        return Err(Error::Argument(format!("need λ, ε, c, τ > 0 (got {lambda}, {eps}, {c}, {tau})")));
    }
    let u = early_phase_end(lambda, c);
    if eps > u {
        return Err(Error::Domain(format!("feature already past early phase: ε = {eps} > cλ^(-1/3) = {u}")));
    }
    Ok(u)
}

/// ∫_ε^u τ/(λ² v²) dv = (τ/λ²)(1/ε − 1/u).
pub fn learning_time_gd(lambda: f64, eps: f64, c: f64, tau: f64) -> Result<f64> {
    let u = check_time_args(lambda, eps, c, tau)?;
    Ok(tau / (lambda * lambda) * (1.0 / eps - 1.0 / u))
}

/// ∫_ε^u τ/(λ² v² − ρ̂ λ² v) dv, requiring ρ̂ < ε.
pub fn learning_time_sam(lambda: f64, eps: f64, c: f64, tau: f64, rho: f64) -> Result<f64> {
    let u = check_time_args(lambda, eps, c, tau)?;
    if rho.is_nan() || rho < 0.0 {
        return Err(Error::Argument(format!("rho must be non-negative, got {rho}")));
    }
    let rh = rho_hat(rho);
    if rh < RHO_HAT_EPS {
        return learning_time_gd(lambda, eps, c, tau);
    }
    if rh >= eps {
        return Err(Error::Precondition(format!(
            "SAM learning time needs ρ < (√3/2)ε; got ρ = {rho}, ε = {eps}"
        )));
    }
    Ok(tau / (lambda * lambda * rh) * (((u - rh) / u).ln() - ((eps - rh) / eps).ln()))
}

/// Positive per-feature times and their normalization p_i = t_i / Σ t.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeSequence {
    pub times: Vec<f64>,
}

impl TimeSequence {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Argument("time sequence must be non-empty".into()));
        }
        if let Some((i, t)) = times.iter().enumerate().find(|(_, t)| !(**t > 0.0 && t.is_finite())) {
            return Err(Error::Argument(format!("time {i} must be positive, got {t}")));
        }
        Ok(TimeSequence { times })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn normalized(&self) -> Vec<f64> {
        let total: f64 = self.times.iter().sum();
        self.times.iter().map(|t| t / total).collect()
    }
}

/// Shannon entropy (nats) of the normalized times.
pub fn entropy(ts: &TimeSequence) -> f64 {
    entropy_of(&ts.normalized())
}

pub(crate) fn entropy_of(p: &[f64]) -> f64 {
    -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// a ≻ b: descending prefix sums of `a` dominate those of `b`.
pub fn majorizes(a: &[f64], b: &[f64]) -> Result<bool> {
    const TOL: f64 = 1e-9;
    if a.len() != b.len() {
        return Err(Error::Dimension { expected: a.len(), actual: b.len() });
    }
    for (name, x) in [("a", a), ("b", b)] {
        let s: f64 = x.iter().sum();
        if (s - 1.0).abs() > TOL {
            return Err(Error::Argument(format!("{name} must sum to 1, sums to {s}")));
        }
    }
    let sorted = |x: &[f64]| {
        let mut v = x.to_vec();
        v.sort_by(|p, q| q.total_cmp(p));
        v
    };
    let (sa, sb) = (sorted(a), sorted(b));
    let (mut pa, mut pb) = (0.0, 0.0);
    for (x, y) in sa.iter().zip(&sb) {
        pa += x;
        pb += y;
        if pa < pb - 1e-12 {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SbComparison {
    pub t_gd: TimeSequence,
    pub t_sam: TimeSequence,
    pub h_gd: f64,
    pub h_sam: f64,
    pub majorization_holds: bool,
}

/// Learning times of every feature under GD and SAM from a common ε.
pub fn sb_comparison(spec: &CovarianceSpec, eps: f64, c: f64, tau: f64, rho: f64) -> Result<SbComparison> {
    if rho_hat(rho) >= eps {
        return Err(Error::Precondition(format!("need ρ < (√3/2)ε; got ρ = {rho}, ε = {eps}")));
    }
    let lmax = spec.eigenvalues().iter().cloned().fold(0.0, f64::max);
    let u_min = early_phase_end(lmax, c);
    if eps >= u_min {
        return Err(Error::Precondition(format!("need ε < min_i cλ_i^(-1/3) = {u_min}; got ε = {eps}")));
    }
    let gd = spec.eigenvalues().iter().map(|&l| learning_time_gd(l, eps, c, tau)).collect::<Result<Vec<_>>>()?;
    let sam =
        spec.eigenvalues().iter().map(|&l| learning_time_sam(l, eps, c, tau, rho)).collect::<Result<Vec<_>>>()?;
    let t_gd = TimeSequence::new(gd)?;
    let t_sam = TimeSequence::new(sam)?;
    let majorization_holds = majorizes(&t_gd.normalized(), &t_sam.normalized())?;
    Ok(SbComparison { h_gd: entropy(&t_gd), h_sam: entropy(&t_sam), t_gd, t_sam, majorization_holds })
}

/// Merged key-query model under white covariance E[zzᵀ] = αI, with γ the
/// norm of E[y_q z].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MergedOdeParams {
    pub gamma: f64,
    pub alpha: f64,
    pub rho: f64,
    pub tau: f64,
    pub s0: f64,
}

impl MergedOdeParams {
    pub fn new(gamma: f64, alpha: f64, rho: f64, tau: f64, s0: f64) -> Result<Self> {
        let all = [gamma, alpha, rho, tau, s0];
        if all.iter().any(|x| !x.is_finite()) || !(gamma > 0.0 && alpha > 0.0 && tau > 0.0 && s0 > 0.0 && rho >= 0.0) {
            return Err(Error::Argument(format!("need γ, α, τ, s0 > 0 and ρ ≥ 0 (got {all:?})")));
        }
        if gamma - alpha * s0 <= 0.0 {
            return Err(Error::Argument(format!("need γ − α s0 > 0 (γ = {gamma}, α s0 = {})", alpha * s0)));
        }
        Ok(MergedOdeParams { gamma, alpha, rho, tau, s0 })
    }

    pub fn equilibrium(&self) -> f64 {
        self.gamma / self.alpha
    }

    /// Δ = √(ρ² + 4γ/α).
    pub fn delta(&self) -> f64 {
        (self.rho * self.rho + 4.0 * self.gamma / self.alpha).sqrt()
    }

    /// (r₋, r₊) = ((ρ − Δ)/2, (ρ + Δ)/2).
    pub fn roots(&self) -> (f64, f64) {
        let d = self.delta();
        ((self.rho - d) / 2.0, (self.rho + d) / 2.0)
    }
}

/// τ ṡ = 2s(γ − αs) + 2 sign(γ − αs) ρ α s^{3/2}; zero at s = 0 and s = γ/α.
pub fn merged_ode_rhs(s: f64, p: &MergedOdeParams) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    let gap = p.gamma - p.alpha * s;
    let sign = if gap > 0.0 {
        1.0
    } else if gap < 0.0 {
        -1.0
    } else {
        0.0
    };
    (2.0 * s * gap + 2.0 * sign * p.rho * p.alpha * s.powf(1.5)) / p.tau
}

/// Logistic GD solution s(t) = γe^{2γt/τ} / (α(e^{2γt/τ} − 1) + γ/s0).
pub fn merged_gd_solution(t: f64, p: &MergedOdeParams) -> f64 {
    let e = (2.0 * p.gamma * t / p.tau).exp();
    if !e.is_finite() {
        return p.equilibrium();
    }
    p.gamma * e / (p.alpha * (e - 1.0) + p.gamma / p.s0)
}

/// Time at which the small-initialization SAM solution blows up.
pub fn merged_sam_blowup_time(p: &MergedOdeParams) -> f64 {
    if p.rho == 0.0 {
        return f64::INFINITY;
    }
    p.tau / p.gamma * (1.0 + p.gamma / (p.rho * p.alpha * p.s0.sqrt())).ln()
}

/// Solution of τ ṡ = 2γs + 2ραs^{3/2}:
/// s(t) = (γ√s0 e^{γt/τ} / (γ + ρα√s0(1 − e^{γt/τ})))².
pub fn merged_sam_small_init_solution(t: f64, p: &MergedOdeParams) -> Result<f64> {
    let tb = merged_sam_blowup_time(p);
    if t >= tb {
        return Err(Error::Domain(format!("t = {t} is past the blow-up time {tb}")));
    }
    let e = (p.gamma * t / p.tau).exp();
    let r0 = p.s0.sqrt();
    let denom = p.gamma + p.rho * p.alpha * r0 * (1.0 - e);
    Ok((p.gamma * r0 * e / denom).powi(2))
}

/// Residual of the implicit solution relation of the full merged SAM ODE at
/// (t, s_t); zero on exact trajectories.
pub fn merged_implicit_solution_check(s_t: f64, t: f64, p: &MergedOdeParams) -> Result<f64> {
    if s_t.is_nan() || s_t <= 0.0 {
        return Err(Error::Domain(format!("s must be positive, got {s_t}")));
    }
    let (rm, rp) = p.roots();
    let delta = p.delta();
    let (u, u0) = (s_t.sqrt(), p.s0.sqrt());
    let ratio_m = (u - rm) / (u0 - rm);
    let ratio_p = (u - rp) / (u0 - rp);
    if !(ratio_m > 0.0 && ratio_p > 0.0) {
        return Err(Error::Domain(format!("logarithm argument not positive at s = {s_t} (r₋ = {rm}, r₊ = {rp})")));
    }
    Ok((s_t / p.s0).ln() / (2.0 * p.gamma) + (ratio_m.ln() / rm - ratio_p.ln() / rp) / (p.alpha * delta) - t / p.tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EscapeTimes {
    pub t_gd: f64,
    pub t_sam: f64,
    pub delta_t: f64,
}

/// Times to go from s0 to s* in the early merged dynamics, with the growth
/// rate set by `sigma_f` = ‖Σ‖_F.
pub fn merged_escape_times(s0: f64, s_star: f64, sigma_f: f64, alpha: f64, rho: f64, tau: f64) -> Result<EscapeTimes> {
    if !(s0 > 0.0 && s0 < s_star) {
        return Err(Error::Argument(format!("need 0 < s0 < s*, got s0 = {s0}, s* = {s_star}")));
    }
    if !(sigma_f > 0.0 && alpha > 0.0 && tau > 0.0 && rho >= 0.0) {
        return Err(Error::Argument("need ‖Σ‖_F, α, τ > 0 and ρ ≥ 0".into()));
    }
    let (r0, rs) = (s0.sqrt(), s_star.sqrt());
    let t_gd = tau / sigma_f * (rs / r0).ln();
    let t_sam = tau / sigma_f * ((rs * (sigma_f + rho * alpha * r0)) / (r0 * (sigma_f + rho * alpha * rs))).ln();
    Ok(EscapeTimes { t_gd, t_sam, delta_t: t_gd - t_sam })
}

/// First-order approximation Δt ≈ τρα(√s* − √s0)/‖Σ‖_F².
pub fn escape_delta_small_rho(s0: f64, s_star: f64, sigma_f: f64, alpha: f64, rho: f64, tau: f64) -> f64 {
    tau * rho * alpha * (s_star.sqrt() - s0.sqrt()) / (sigma_f * sigma_f)
}
