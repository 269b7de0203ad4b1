//! One measurement per acceptance criterion. Each returns whether it held and
//! a one-line account of what was measured; the integration suites assert on
//! it and the acceptance target prints it.

use rand::Rng;

use sblab::attention::{hessian_blocks, population_gradients, ModelParams};
use sblab::experiment::{ode_vs_simulation, theory_suite, Arm, OdeCheckConfig, RunConfig, TheoryGrid};
use sblab::optimizers::{
    active_head, sam_step_exact, sam_step_first_order, GradMode, OptimizerConfig, OptimizerKind,
};
use sblab::rng::{stream, streams};
use sblab::spectra::{expected_sample_cov_sq_eigs, SpectrumConfig};
use sblab::theory::{
    early_phase_end, escape_delta_small_rho, integrate_scalar_ode, merged_escape_times, merged_gd_solution,
    merged_implicit_solution_check, merged_ode_rhs, merged_sam_blowup_time, merged_sam_small_init_solution, sb_comparison, MergedOdeParams,
};
use sblab::upsampler::{collect_proxy_trajectories, difficulty_dataset, kmeans2, Cluster, FeatureMode, ProxyConfig};

use super::*;

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: String) -> Self {
        Outcome { passed, detail }
    }
}

pub const GRAD_TOL: f64 = 1e-6;
pub const HESS_TOL: f64 = 1e-5;

pub fn gradients_and_hessians(instances: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    let (mut worst_g, mut worst_h) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let d = r.random_range(1..=3);
        let heads = r.random_range(1..=4);
        let n_ctx = [1, 10, 100][r.random_range(0..3)];
        let spec = random_spectrum(&mut r, d, 0.2, 3.0);
        let params = random_params(&mut r, d, heads, 0.6);
        let analytic = population_gradients(&params, &spec, n_ctx).unwrap().to_flat();
        worst_g = worst_g.max(rel_err(&analytic, &fd_gradient(&params, &spec, n_ctx, 1e-5)));
        for h in 0..heads {
            let hess = hessian_blocks(&params, &spec, n_ctx, h).unwrap();
            worst_h = worst_h.max(rel_err(&hess.data, &fd_head_hessian(&params, &spec, n_ctx, h, 1e-5)));
        }
    }
    Outcome::new(
        worst_g < GRAD_TOL && worst_h < HESS_TOL,
        format!("{instances} instances, worst gradient rel err {worst_g:.2e}, worst Hessian rel err {worst_h:.2e}"),
    )
}

pub fn sample_cov_moments(pairs: usize, samples: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    let (mut worst_z, mut count) = (0.0f64, 0);
    for _ in 0..pairs {
        let d = r.random_range(1..=4);
        let n_ctx = r.random_range(1..=40);
        let spec = random_spectrum(&mut r, d, 0.2, 3.0);
        let closed = expected_sample_cov_sq_eigs(&spec, n_ctx).unwrap();
        let (mean, se) = mc_sample_cov_sq_diag(spec.eigenvalues(), n_ctx, samples, &mut r);
        for i in 0..d {
            worst_z = worst_z.max((mean[i] - closed[i]).abs() / se[i]);
            count += 1;
        }
    }
    Outcome::new(worst_z < 3.0, format!("{pairs} (spectrum, N) pairs, {count} eigenvalues, worst |z| = {worst_z:.2}"))
}

pub fn ode_fidelity(configs: &[OdeCheckConfig]) -> Outcome {
    let mut worst = 0.0f64;
    let mut rows = 0;
    let mut ok = true;
    for cfg in configs {
        let (report, _) = ode_vs_simulation(cfg).unwrap();
        for row in &report.rows {
            worst = worst.max(row.max_rel_err);
            ok &= row.max_rel_err < 0.05;
            rows += 1;
        }
    }
    Outcome::new(ok, format!("{rows} (spectrum, optimizer, feature) paths, worst rel err {worst:.2e}"))
}

pub fn ode_configs() -> Vec<OdeCheckConfig> {
    let base = OdeCheckConfig::default();
    [vec![1.0], vec![2.0, 0.7], vec![1.0, 0.5, 0.25], vec![4.0, 1.0, 0.1]]
        .into_iter()
        .map(|eigs| OdeCheckConfig { spectrum: SpectrumConfig::Explicit(eigs), ..base.clone() })
        .collect()
}

fn merged_cases() -> Vec<MergedOdeParams> {
    let mut out = Vec::new();
    for &(gamma, alpha) in &[(1.0, 1.0), (2.0, 0.5), (0.5, 3.0)] {
        for &rho in &[0.0, 0.05, 0.3] {
            for &s0 in &[1e-3, 1e-2] {
                out.push(MergedOdeParams::new(gamma, alpha, rho, 1.0, s0).unwrap());
            }
        }
    }
    out
}

pub fn closed_forms() -> Outcome {
    // Implicit relation along RK4 paths, stopped short of the equilibrium.
    let mut implicit = 0.0f64;
    for p in merged_cases().into_iter().filter(|p| p.rho > 0.0) {
        let stop = 0.9 * p.equilibrium();
        let path = integrate_scalar_ode(|_, s| merged_ode_rhs(s, &p), p.s0, 20.0, 1e-3).unwrap();
        for &(t, s) in path.iter().take_while(|(_, s)| *s < stop) {
            implicit = implicit.max(merged_implicit_solution_check(s, t, &p).unwrap().abs());
        }
    }
    // Closed forms against their ODEs.
    let mut ode_res = 0.0f64;
    for p in merged_cases() {
        let h = 1e-3;
        let gd = |t: f64| merged_gd_solution(t, &p);
        for k in 1..50 {
            let t = 0.2 * k as f64;
            let lhs = p.tau * derivative(&gd, t, h);
            let rhs = 2.0 * gd(t) * (p.gamma - p.alpha * gd(t));
            ode_res = ode_res.max((lhs - rhs).abs() / rhs.abs().max(1.0));
        }
        if p.rho > 0.0 {
            let tb = merged_sam_blowup_time(&p);
            let sam = |t: f64| merged_sam_small_init_solution(t, &p).unwrap();
            for k in 1..50 {
                let t = 0.9 * tb * k as f64 / 50.0;
                let lhs = p.tau * derivative(&sam, t, h.min(0.01 * (tb - t)));
                let s = sam(t);
                let rhs = 2.0 * p.gamma * s + 2.0 * p.rho * p.alpha * s.powf(1.5);
                ode_res = ode_res.max((lhs - rhs).abs() / rhs.abs().max(1.0));
            }
        }
    }
    // Escape times.
    let mut r = rng(4);
    let (mut positive, mut approx_worst, mut approx_cases) = (true, 0.0f64, 0);
    for _ in 0..500 {
        let s0 = 10f64.powf(r.random_range(-4.0..-2.0));
        let s_star = s0 * 10f64.powf(r.random_range(0.5..3.0));
        let sigma_f = r.random_range(0.2..5.0);
        let alpha = r.random_range(0.2..3.0);
        let rho = 10f64.powf(r.random_range(-5.0..0.0));
        let e = merged_escape_times(s0, s_star, sigma_f, alpha, rho, 1.0).unwrap();
        positive &= e.delta_t > 0.0;
        if sigma_f >= 100.0 * rho * alpha * s_star.sqrt() {
            let a = escape_delta_small_rho(s0, s_star, sigma_f, alpha, rho, 1.0);
            approx_worst = approx_worst.max((a - e.delta_t).abs() / e.delta_t);
            approx_cases += 1;
        }
    }
    Outcome::new(
        implicit < 1e-7 && ode_res < 1e-8 && positive && approx_cases > 0 && approx_worst < 0.05,
        format!(
            "implicit residual {implicit:.1e}, closed-form ODE residual {ode_res:.1e}, Δt > 0 {}, \
             small-ρ rel err {approx_worst:.1e} over {approx_cases} cases",
            if positive { "always" } else { "NOT always" }
        ),
    )
}

/// Learning times by quadrature of τ/v̇ over [ε, cλ^(-1/3)].
pub fn quadrature_learning_time(lambda: f64, eps: f64, c: f64, tau: f64, rho: f64) -> f64 {
    let rh = 2.0 * rho / 3f64.sqrt();
    let f = move |v: f64| tau / (lambda * lambda * v * (v - rh));
    simpson(&f, eps, early_phase_end(lambda, c), 1e-12)
}

pub fn theory_at_scale(n: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    let (eps, c, tau) = (0.01, 0.1, 1.0);
    let (mut entropy_ok, mut major_ok, mut worst_time) = (0, 0, 0.0f64);
    for _ in 0..n {
        let d = r.random_range(2..=8);
        let spec = random_spectrum(&mut r, d, 0.05, 4.0);
        let rho = r.random_range(0.01..0.99) * 3f64.sqrt() / 2.0 * eps;
        let cmp = sb_comparison(&spec, eps, c, tau, rho).unwrap();
        let (pg, ps): (Vec<f64>, Vec<f64>) = {
            let (sg, ss) = (cmp.t_gd.times.iter().sum::<f64>(), cmp.t_sam.times.iter().sum::<f64>());
            (cmp.t_gd.times.iter().map(|t| t / sg).collect(), cmp.t_sam.times.iter().map(|t| t / ss).collect())
        };
        if entropy_of_times(&cmp.t_sam.times) > entropy_of_times(&cmp.t_gd.times) && cmp.h_sam > cmp.h_gd {
            entropy_ok += 1;
        }
        if majorizes(&pg, &ps) && cmp.majorization_holds {
            major_ok += 1;
        }
        for (i, &l) in spec.eigenvalues().iter().enumerate() {
            let q = quadrature_learning_time(l, eps, c, tau, rho);
            worst_time = worst_time.max((cmp.t_sam.times[i] - q).abs() / q);
            let q0 = quadrature_learning_time(l, eps, c, tau, 0.0);
            worst_time = worst_time.max((cmp.t_gd.times[i] - q0).abs() / q0);
        }
    }
    let grid = TheoryGrid { random_spectra: n, ..TheoryGrid::default() };
    let suite = theory_suite(&grid).unwrap();
    Outcome::new(
        entropy_ok == n && major_ok == n && worst_time < 1e-8 && suite.all_passed(),
        format!(
            "H_sam > H_gd in {entropy_ok}/{n}, majorization in {major_ok}/{n}, \
             learning times vs quadrature {worst_time:.1e}, grid suite {}",
            if suite.all_passed() { "clean" } else { "has failures" }
        ),
    )
}

pub const SAM_RHOS: [f64; 5] = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1];

/// One step of exact and first-order SAM from a point where a single head is
/// non-zero; the other heads have zero gradient and zero curvature coupling.
pub fn sam_discrepancies(seed: u64) -> (Vec<f64>, usize, usize) {
    let mut r = rng(seed);
    let (d, heads, n_ctx, eta) = (3, 4, 20, 0.1);
    let spec = random_spectrum(&mut r, d, 0.3, 2.0);
    let live = r.random_range(0..heads);
    let one = random_params(&mut r, d, 1, 0.7);
    let mut params = ModelParams::zeros(d, heads);
    params.heads[live] = one.heads[0].clone();
    let g = population_gradients(&params, &spec, n_ctx).unwrap();
    let chosen = active_head(&g);
    let disc = SAM_RHOS
        .iter()
        .map(|&rho| {
            let exact = sam_step_exact(&params, |p| population_gradients(p, &spec, n_ctx), eta, rho).unwrap();
            let first = sam_step_first_order(&params, &spec, n_ctx, eta, rho, chosen).unwrap();
            let (a, b) = (exact.to_flat(), first.to_flat());
            norm(&a.iter().zip(&b).map(|(x, y)| x - y).collect::<Vec<_>>())
        })
        .collect();
    (disc, live, chosen)
}

pub fn sam_first_order(seed: u64) -> Outcome {
    let (disc, live, chosen) = sam_discrepancies(seed);
    let x: Vec<f64> = SAM_RHOS.iter().map(|r| r.ln()).collect();
    let y: Vec<f64> = disc.iter().map(|e| e.ln()).collect();
    let s = slope(&x, &y);
    Outcome::new(
        (s - 2.0).abs() <= 0.2 && live == chosen,
        format!(
            "log-log slope {s:.3} over ρ ∈ {SAM_RHOS:?}, discrepancies {:?}",
            disc.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>()
        ),
    )
}

fn accuracy(assigned: &[(String, Cluster)], truth: &[bool]) -> f64 {
    let hits = assigned.iter().zip(truth).filter(|((_, c), &h)| (*c == Cluster::Hard) == h).count();
    hits as f64 / truth.len() as f64
}

/// Fraction of the weakest-feature examples the proxy pipeline labels hard.
pub fn toy_hard_capture(config: &RunConfig, seed: u64) -> f64 {
    let spec = config.validate().unwrap();
    let d = spec.dim();
    let (examples, features) = difficulty_dataset(
        &spec,
        config.n_ctx,
        config.dataset.size,
        &config.mixture(d),
        &mut stream(seed, streams::DATASET),
    )
    .unwrap();
    let base = config.arm_optimizer(Arm::GdUpsampled);
    let mut opt = OptimizerConfig::new(OptimizerKind::Gd, base.learning_rate, 0.0, GradMode::Empirical, config.proxy_steps());
    opt.batch_size = base.batch_size;
    let up = &config.upsampling;
    let proxy = ProxyConfig { n_heads: up.proxy_heads, init: config.init, optimizer: opt };
    let traj = collect_proxy_trajectories(&examples, &spec, config.n_ctx, &proxy, up.checkpoints, seed).unwrap();
    let assignment = kmeans2(&traj, up.features, up.max_iters, seed).unwrap();
    let weakest: Vec<usize> = (0..examples.len()).filter(|&i| features[i] == d - 1).collect();
    weakest.iter().filter(|&&i| assignment.labels[i].1 == Cluster::Hard).count() as f64 / weakest.len() as f64
}

pub const TOY_SEEDS: [u64; 3] = [0, 1, 2];

pub fn upsampling_pipeline() -> Outcome {
    let (traj, truth) = planted_corpus(1000, 10, 0.3, 11);
    let by_traj = accuracy(&kmeans2(&traj, FeatureMode::Trajectory, 100, 0).unwrap().labels, &truth);
    let by_final = accuracy(&kmeans2(&traj, FeatureMode::Final, 100, 0).unwrap().labels, &truth);
    let config = RunConfig::default();
    let captures: Vec<f64> = TOY_SEEDS.iter().map(|&s| toy_hard_capture(&config, s)).collect();
    let worst = captures.iter().cloned().fold(1.0, f64::min);
    Outcome::new(
        by_traj >= 0.99 && by_final >= 0.95 && worst >= 0.9,
        format!(
            "planted corpus: {:.1}% (trajectory), {:.1}% (final loss); toy hard capture {captures:.3?}",
            100.0 * by_traj,
            100.0 * by_final
        ),
    )
}

/// Worked values of a_i that are easy to check by hand.
pub fn worked_moments() -> [(Vec<f64>, usize, Vec<f64>); 2] {
    [(vec![2.0, 1.0], 10, vec![5.0, 1.4]), (vec![1.0], 1, vec![3.0])]
}
