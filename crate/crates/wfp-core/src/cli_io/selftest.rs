//! The invariant suite behind the `selftest` scenario.
//!
//! Oracle checks run on fixed reference setups; the fixed-point, transient,
//! continuity and density-matrix checks use the configured grid, potential
//! and weight order.

use super::{density_diagnostics, ArtifactWriter, RunConfig, RunOutcome, EXIT_INVARIANT, EXIT_OK};
use crate::constants::{
    beta_m, check_poincare, check_techlemma, compute_constants, poincare_test_family, ConstantsOptions, TechLemmaSamples, K_CONST,
};
use crate::error::Result;
use crate::fourier::axis_derivative;
use crate::phase_grid::{random_h_field, random_smooth_field, GridSpec, WignerField, SIGMA};
use crate::potential_theta::{apply_theta, apply_theta_quadrature, PotentialKind, PotentialSpec};
use crate::propagator::{displaced_gaussian, evolve, evolve_with_state, DistanceSeries, PropagatorConfig};
use crate::spectral::{all_eigenvalues, assemble_generator, verify_gap, CoarseBox};
use crate::steady_state::{fixed_point_solve, stationarity_residual, LinvBackend, MASS_TOLERANCE};
use crate::wfp_operator::{apply_l, apply_las, lindblad_check, DiffusionCoefficients};
use serde::Serialize;
use std::time::Instant;

pub const STATIONARITY_LIMIT: f64 = 1e-5;
pub const CROSS_BACKEND_LIMIT: f64 = 1e-4;
pub const TRANSIENT_LIMIT: f64 = 1e-3;
pub const TRANSIENT_HORIZON: f64 = 15.0;
pub const TRANSIENT_DT: f64 = 5e-3;
pub const CONTINUITY_LIMIT: f64 = 0.05;
pub const THETA_ORACLE_LIMIT: f64 = 1e-8;
pub const L_MU_LIMIT: f64 = 1e-6;
pub const SKEW_LIMIT: f64 = 1e-8;
pub const RELAX_RATE_TARGET: f64 = 1.0;
pub const RELAX_RATE_SLACK: f64 = 0.05;
const FIXED_POINT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub status: Status,
    /// Measured quantity compared against `limit`.
    pub value: Option<f64>,
    pub limit: String,
    pub detail: String,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
    pub passed: usize,
    pub failed: usize,
    pub skipped: usize,
    pub pass: bool,
}

impl SelftestReport {
    fn new(checks: Vec<CheckResult>) -> Self {
        let count = |s| checks.iter().filter(|c| c.status == s).count();
        let (passed, failed, skipped) = (count(Status::Pass), count(Status::Fail), count(Status::Skip));
        Self { checks, passed, failed, skipped, pass: failed == 0 }
    }

    /// One line per check; wall-clock times only when `timings` is set.
    pub fn lines(&self, timings: bool) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                let tag = match c.status {
                    Status::Pass => "PASS",
                    Status::Fail => "FAIL",
                    Status::Skip => "SKIP",
                };
                let value = c.value.map_or("-".into(), |v| format!("{v:.6e}"));
                let time = if timings { format!("{:>7.2}s  ", c.seconds) } else { String::new() };
                format!("[{tag}] {:<24} value {value:<14} limit {:<24} {time}{}", c.name, c.limit, c.detail)
            })
            .collect()
    }
}

struct Outcome {
    status: Status,
    value: Option<f64>,
    detail: String,
}

fn judged(pass: bool, value: f64, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { status: if pass { Status::Pass } else { Status::Fail }, value: Some(value), detail: detail.into() })
}

fn skipped(detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { status: Status::Skip, value: None, detail: detail.into() })
}

fn timed<F: FnOnce() -> Result<Outcome>>(name: &'static str, limit: impl Into<String>, f: F) -> CheckResult {
    let start = Instant::now();
    let out = f().unwrap_or_else(|e| Outcome { status: Status::Fail, value: None, detail: format!("error: {e}") });
    CheckResult { name, status: out.status, value: out.value, limit: limit.into(), detail: out.detail, seconds: start.elapsed().as_secs_f64() }
}

fn rel_l2(a: &WignerField, b: &WignerField) -> Result<f64> {
    Ok(a.sub(b)?.norm_l2() / b.norm_l2().max(f64::MIN_POSITIVE))
}

fn constants_check() -> Result<Outcome> {
    let opts = ConstantsOptions { gamma_grid: None, ..ConstantsOptions::default() };
    let c = compute_constants(4, 1, &PotentialSpec::none(), &opts)?;
    let dev = [
        (c.sigma - (1.0 - 0.5f64.sqrt())).abs(),
        (c.alpha - c.sigma / (c.sigma + 3.0)).abs(),
        (c.beta_m - 442.0).abs(),
        (c.eps_m - 1.0 / 24.0).abs(),
        (c.k - K_CONST).abs(),
        (K_CONST - 144.0).abs(),
        (beta_m(4, 1) - 442.0).abs(),
    ];
    let worst = dev.iter().copied().fold(0.0, f64::max);
    judged(worst <= 1e-12, worst, format!("sigma {:.15}, beta_4 {}, eps {}, K {}", c.sigma, c.beta_m, c.eps_m, c.k))
}

fn l_mu_check() -> Result<Outcome> {
    let residual = |n| -> Result<f64> {
        let mu = WignerField::mu(GridSpec::default_for(1, n)?);
        Ok(apply_l(&mu).norm_l2() / mu.norm_l2())
    };
    let (r128, r256) = (residual(128)?, residual(256)?);
    judged(r128 <= L_MU_LIMIT && r256 <= 0.5 * r128, r128, format!("128^2: {r128:.3e}, 256^2: {r256:.3e}"))
}

fn theta_oracle_check(seed: u64) -> Result<Outcome> {
    let g = GridSpec::new(1, 64, 64, 12.0, 8.0)?;
    let specs = [
        PotentialSpec::sine(1.0),
        PotentialSpec::new(1.0, PotentialKind::GaussianBump { center: vec![0.5], width: 1.0, amp: 1.0 })?,
    ];
    let mut worst: f64 = 0.0;
    for s in seed..seed + 3 {
        let w = random_smooth_field(g, s, 4);
        for spec in &specs {
            worst = worst.max(rel_l2(&apply_theta(&w, spec)?, &apply_theta_quadrature(&w, spec)?)?);
        }
    }
    let w = random_smooth_field(g, seed, 4);
    let quad = apply_theta(&w, &PotentialSpec::new(1.0, PotentialKind::Quadratic { amp: 1.0 })?)?;
    let dxi = axis_derivative(w.values(), &g.shape(), 1, g.dxi());
    let force = w.with_values(dxi.iter().enumerate().map(|(i, v)| -g.point(i).x()[0] * v).collect())?;
    let classical = rel_l2(&quad, &force)?;
    judged(
        worst <= THETA_ORACLE_LIMIT && classical <= THETA_ORACLE_LIMIT,
        worst.max(classical),
        format!("FFT vs quadrature {worst:.3e}, quadratic vs -x d_xi w {classical:.3e}"),
    )
}

fn skew_check(seed: u64) -> Result<Outcome> {
    let g = GridSpec::default_for(1, 128)?;
    let mut worst: f64 = 0.0;
    for s in seed..seed + 5 {
        let w = random_smooth_field(g, s, 4);
        for m in [0, 2, 4] {
            worst = worst.max(apply_las(&w).inner_hm(&w, m)?.abs() / w.norm_hm(m).powi(2).max(1.0));
        }
    }
    judged(worst <= SKEW_LIMIT, worst, "max |<L_as w, w>_{H_m}| / ||w||^2, m = 0, 2, 4")
}

fn dissipativity_check(seed: u64) -> Result<Outcome> {
    let g = GridSpec::default_for(1, 128)?;
    let mut worst = f64::NEG_INFINITY;
    for s in seed..seed + 5 {
        let w = random_h_field(g, s, 4);
        let n2 = w.inner_h(&w, f64::INFINITY)?;
        worst = worst.max(apply_l(&w).inner_h(&w, f64::INFINITY)? / n2);
    }
    judged(worst <= SKEW_LIMIT, worst, "max <L w, w>_H / ||w||_H^2")
}

fn lindblad_margins() -> Result<Outcome> {
    let good = lindblad_check(&DiffusionCoefficients::new(1.0, 0.0, 1.0, 1.0));
    let bad = lindblad_check(&DiffusionCoefficients::new(1.0, 0.0, 1.0, 0.0));
    let ok = good.pass && !bad.pass && (good.margin - 0.75).abs() < 1e-15 && (bad.margin + 0.25).abs() < 1e-15;
    judged(ok, good.margin, format!("(1,0,1,1) -> {}, (1,0,1,0) -> {}", good.margin, bad.margin))
}

fn techlemma(m: u32, seed: u64) -> Result<Outcome> {
    let r = check_techlemma(m, 1, &TechLemmaSamples::standard(1, seed));
    let worst = r.checks.iter().map(|c| c.worst_margin).fold(f64::INFINITY, f64::min);
    let names: Vec<String> = r.checks.iter().map(|c| format!("{} {:.3e}", c.name, c.worst_margin)).collect();
    judged(r.pass, worst, format!("margins: {}", names.join(", ")))
}

fn poincare() -> Result<Outcome> {
    let r = check_poincare(1, &poincare_test_family(1, 4))?;
    judged(r.pass, r.min_ratio, format!("span minimum {:.12} vs sigma {:.12}", r.span_min_ratio, r.sigma))
}

fn relax_rate(grid: GridSpec) -> Result<Outcome> {
    let w0 = displaced_gaussian(&grid, 1.0, -1.0)?;
    let w0 = w0.scaled(1.0 / w0.mass());
    let cfg = PropagatorConfig { dt: 0.01, t_end: 10.0, record_every: 10, fit_series: DistanceSeries::H, ..Default::default() };
    let report = evolve(&w0, &cfg, &PotentialSpec::none(), &WignerField::mu(grid))?;
    let rate = report.fit.as_ref().map(|f| f.rate).unwrap_or(f64::NAN);
    let ok = rate >= SIGMA && (rate - RELAX_RATE_TARGET).abs() <= RELAX_RATE_SLACK;
    judged(ok, rate, format!("fit window {:?}, mass drift {:.3e}", cfg.fit_window, report.mass_drift()))
}

fn spectral_gap(n: usize) -> Result<Outcome> {
    let h = assemble_generator(&CoarseBox::new(n))?;
    let gap = verify_gap(&all_eigenvalues(&h)?, SIGMA);
    judged(
        gap.pass,
        gap.second_real_part.unwrap_or(f64::NAN),
        format!("{n}^2 box, kernel count {}, second real part {:?}", gap.kernel_count, gap.second_real_part),
    )
}

/// Runs every check and collects the report.
pub fn selftest_report(config: &RunConfig) -> SelftestReport {
    let seed = config.seed;
    let (grid, spec, m) = (config.grid, config.potential.clone(), config.m);
    let mut checks = vec![
        timed("constants", "1e-12 abs", constants_check),
        timed("l_annihilates_mu", "1e-6 rel; halves", l_mu_check),
        timed("theta_oracle", "1e-8 rel", || theta_oracle_check(seed)),
        timed("antisymmetry_hm", "1e-8 rel", || skew_check(seed)),
        timed("dissipativity_h", "<= 1e-8 rel", || dissipativity_check(seed)),
        timed("lindblad_margins", "+3/4 pass, -1/4 fail", lindblad_margins),
        timed("techlemma", "margins >= 0", || techlemma(m, seed)),
        timed("poincare", "ratios >= sigma", poincare),
        timed("relax_decay_rate", "1.00 +- 0.05, >= sigma", || relax_rate(GridSpec::default_for(1, 128)?)),
        timed("spectral_gap", "Re <= -sigma + 1e-3", || spectral_gap(config.spectrum.n)),
    ];

    let start = Instant::now();
    let solved = [LinvBackend::Semigroup, LinvBackend::Krylov]
        .map(|b| fixed_point_solve(&grid, &spec, m, FIXED_POINT_TOL, config.steady.max_iter, b));
    let solve_seconds = start.elapsed().as_secs_f64();
    let mut fixed = timed("fixed_point", "residual <= 1e-5", || {
        let [a, b] = &solved;
        let (a, b) = (a.as_ref().map_err(clone_err)?, b.as_ref().map_err(clone_err)?);
        let residual = stationarity_residual(&a.w_inf, &spec, m)?.max(stationarity_residual(&b.w_inf, &spec, m)?);
        let cross = a.w_inf.sub(&b.w_inf)?.norm_hm(m);
        let contraction = a.max_contraction().unwrap_or(0.0).max(b.max_contraction().unwrap_or(0.0));
        let mass_ok = [a, b].iter().all(|r| (r.mass - 1.0).abs() <= MASS_TOLERANCE);
        let ok = residual <= STATIONARITY_LIMIT
            && a.residual_monotone()
            && b.residual_monotone()
            && mass_ok
            && contraction < 1.0
            && cross <= CROSS_BACKEND_LIMIT;
        judged(
            ok,
            residual,
            format!(
                "iterations {}/{}, max contraction {contraction:.3e}, mass - 1 {:.3e}, cross-backend {cross:.3e}",
                a.iterations,
                b.iterations,
                a.mass - 1.0
            ),
        )
    });
    fixed.seconds += solve_seconds;
    checks.push(fixed);

    let w_inf = solved[1].as_ref().ok().map(|r| r.w_inf.clone());
    checks.push(timed("transient_consistency", "H_m distance <= 1e-3", || {
        let Some(w_inf) = &w_inf else { return skipped("no fixed point") };
        let cfg = PropagatorConfig {
            dt: TRANSIENT_DT,
            t_end: TRANSIENT_HORIZON,
            record_every: (TRANSIENT_HORIZON / TRANSIENT_DT) as usize,
            m,
            ..Default::default()
        };
        let (report, _) = evolve_with_state(&WignerField::mu(grid), &cfg, &spec, w_inf)?;
        let d = *report.hm_distance.last().unwrap_or(&f64::NAN);
        judged(d <= TRANSIENT_LIMIT, d, format!("from mu, t = {TRANSIENT_HORIZON}, dt = {TRANSIENT_DT}"))
    }));

    checks.push(timed("lambda_continuity", "5% rel", || {
        let Some(w_inf) = &w_inf else { return skipped("no fixed point") };
        if spec.lambda == 0.0 || spec.is_trivial() {
            return skipped("unperturbed configuration");
        }
        let half = spec.with_lambda(spec.lambda / 2.0);
        let w_half = fixed_point_solve(&grid, &half, m, FIXED_POINT_TOL, config.steady.max_iter, LinvBackend::Krylov)?.w_inf;
        let mu = WignerField::mu(grid);
        let q1 = w_inf.sub(&mu)?.norm_hm(m) / spec.lambda.abs();
        let q2 = w_half.sub(&mu)?.norm_hm(m) / half.lambda.abs();
        let rel = (q1 - q2).abs() / q1;
        judged(rel <= CONTINUITY_LIMIT, rel, format!("ratios {q1:.6e} and {q2:.6e}"))
    }));

    checks.push(timed("density_matrix", "trace, herm, min eig, T2", || {
        let Some(w_inf) = &w_inf else { return skipped("no fixed point") };
        if grid.d() != 1 {
            return skipped("density matrices need d = 1");
        }
        let (d, _) = density_diagnostics(w_inf)?;
        judged(
            d.pass,
            d.positivity.min_eigenvalue,
            format!(
                "trace {:.9}, hermiticity {:.3e}, T2 relative {:.3e}",
                d.trace, d.hermiticity_error, d.t2_relative_error
            ),
        )
    }));
    SelftestReport::new(checks)
}

fn clone_err(e: &crate::error::WfpError) -> crate::error::WfpError {
    crate::error::WfpError::NoConvergence(e.to_string())
}

pub fn run_selftest(config: &RunConfig, out: &mut ArtifactWriter) -> Result<RunOutcome> {
    let start = Instant::now();
    let report = selftest_report(config);
    out.json("selftest.json", &report)?;
    out.text("selftest.txt", &format!("{}\n", report.lines(false).join("\n")))?;
    let mut lines = report.lines(true);
    lines.push(format!(
        "selftest: {} passed, {} failed, {} skipped in {:.1}s",
        report.passed,
        report.failed,
        report.skipped,
        start.elapsed().as_secs_f64()
    ));
    let code = if report.pass { EXIT_OK } else { EXIT_INVARIANT };
    Ok(RunOutcome { code, summary: lines.join("\n"), files: out.written().to_vec() })
}
