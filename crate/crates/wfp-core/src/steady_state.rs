//! Stationary solutions `w_inf = mu + w_*` of `L w = lambda Theta[V_0] w`
//! by the fixed-point iteration `L w_n = lambda Theta (w_{n-1} + mu)`, with
//! two independent realizations of `L^{-1}` on zero-mass fields.

use crate::error::{Result, WfpError};
use crate::fourier::{fft_axes, to_complex, wavenumbers};
use crate::phase_grid::{GridSpec, WignerField, SIGMA};
use crate::potential_theta::{PotentialSpec, ThetaOperator};
use crate::propagator::{Interpolation, UnperturbedStepper};
use crate::wfp_operator::apply_l;
use serde::{Deserialize, Serialize};

/// Accepted `|mass|` of a right-hand side.
pub const MASS_TOLERANCE: f64 = 1e-6;

/// Relative accuracy requested from each inner `L^{-1}` solve.
pub const INNER_TOLERANCE: f64 = 1e-11;

/// Consecutive non-contracting iterations that count as divergence.
const DIVERGENCE_STREAK: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LinvBackend {
    #[default]
    Semigroup,
    Krylov,
}

impl std::fmt::Display for LinvBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LinvBackend::Semigroup => "semigroup",
            LinvBackend::Krylov => "krylov",
        })
    }
}

fn project_mass(values: &mut [f64], mu: &[f64], mu_sum: f64) {
    let c = values.iter().sum::<f64>() / mu_sum;
    values.iter_mut().zip(mu).for_each(|(v, m)| *v -= c * m);
}

fn check_zero_mass(g: &WignerField) -> Result<()> {
    let m = g.mass();
    if m.abs() > MASS_TOLERANCE {
        return Err(WfpError::InvalidField(format!("right-hand side has mass {m:e}, expected 0")));
    }
    Ok(())
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `L^{-1} g = -integral_0^inf U_t g dt`. The integral is split into
/// periods `T`: `S = sum_j U_{jT} g` is accumulated by exact steps, then
/// `integral_0^T U_s S ds` is taken once by Richardson-extrapolated Simpson.
#[derive(Debug, Clone)]
pub struct SemigroupInverse {
    grid: GridSpec,
    period: UnperturbedStepper,
    fine: UnperturbedStepper,
    fine_steps: usize,
    /// Time by which the integrand must have started to shrink.
    pub decay_deadline: f64,
}

impl SemigroupInverse {
    pub const PERIOD: f64 = 0.5;
    pub const FINE_STEPS: usize = 64;

    pub fn new(grid: &GridSpec) -> Result<Self> {
        let period = UnperturbedStepper::new(grid, Self::PERIOD, Interpolation::TrigShear)?;
        let fine = UnperturbedStepper::new(grid, Self::PERIOD / Self::FINE_STEPS as f64, Interpolation::TrigShear)?;
        Ok(Self { grid: *grid, period, fine, fine_steps: Self::FINE_STEPS, decay_deadline: 20.0 })
    }

    pub fn solve(&self, g: &WignerField, tol: f64) -> Result<WignerField> {
        self.grid.ensure_same(g.grid())?;
        check_zero_mass(g)?;
        let mu = WignerField::mu(self.grid);
        let mu_sum: f64 = mu.values().iter().sum();
        let mut cur = g.values().to_vec();
        project_mass(&mut cur, mu.values(), mu_sum);
        let g_norm = l2(&cur);
        if g_norm == 0.0 {
            return Ok(WignerField::zeros(self.grid));
        }

        let mut sum = cur.clone();
        let mut t = 0.0;
        let mut norm_at_deadline = None;
        loop {
            let next = self.period.step(&WignerField::new(self.grid, cur)?)?;
            cur = next.into_values();
            t += Self::PERIOD;
            let n = l2(&cur);
            sum.iter_mut().zip(&cur).for_each(|(s, c)| *s += c);
            if n <= tol * g_norm {
                break;
            }
            if t >= self.decay_deadline && norm_at_deadline.is_none() {
                if n >= g_norm {
                    return Err(WfpError::NoConvergence(format!(
                        "semigroup integrand did not decay by t = {t} (norm ratio {:.3e})",
                        n / g_norm
                    )));
                }
                norm_at_deadline = Some(n);
            }
            if t > 50.0 * self.decay_deadline {
                return Err(WfpError::NoConvergence(format!(
                    "semigroup integrand still at relative norm {:.3e} at t = {t}",
                    n / g_norm
                )));
            }
        }

        // integral over one period by Simpson on N and N/2 intervals.
        let h = Self::PERIOD / self.fine_steps as f64;
        let mut samples = vec![sum];
        for _ in 0..self.fine_steps {
            let last = WignerField::new(self.grid, samples.last().expect("non-empty").clone())?;
            samples.push(self.fine.step(&last)?.into_values());
        }
        let simpson = |stride: usize| -> Vec<f64> {
            let n = self.fine_steps / stride;
            let hh = h * stride as f64;
            let mut acc = vec![0.0; self.grid.len()];
            for i in 0..=n {
                let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                acc.iter_mut().zip(&samples[i * stride]).for_each(|(a, s)| *a += w * s);
            }
            acc.iter_mut().for_each(|a| *a *= hh / 3.0);
            acc
        };
        let fine = simpson(1);
        let coarse = simpson(2);
        let mut out: Vec<f64> = fine.iter().zip(&coarse).map(|(f, c)| -(16.0 * f - c) / 15.0).collect();
        project_mass(&mut out, mu.values(), mu_sum);
        WignerField::new(self.grid, out)
    }
}

/// Settings of the restarted GMRES solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KrylovOptions {
    pub restart: usize,
    pub max_restarts: usize,
    /// Right preconditioning by `-(1 - Laplacian)^{-1}`.
    pub precondition: bool,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        Self { restart: 40, max_restarts: 60, precondition: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KrylovStats {
    pub iterations: usize,
    pub restarts: usize,
    pub relative_residual: f64,
}

/// Matrix-free GMRES for `L x = g` on zero-mass fields.
#[derive(Debug, Clone)]
pub struct KrylovInverse {
    grid: GridSpec,
    options: KrylovOptions,
    mu: Vec<f64>,
    mu_sum: f64,
    symbol: Vec<f64>,
}

impl KrylovInverse {
    pub fn new(grid: &GridSpec, options: KrylovOptions) -> Result<Self> {
        if options.restart == 0 || options.max_restarts == 0 {
            return Err(WfpError::InvalidParameter("GMRES restart and max_restarts must be positive".into()));
        }
        let mu = WignerField::mu(*grid).into_values();
        let mu_sum = mu.iter().sum();
        let shape = grid.shape();
        let tables: Vec<Vec<f64>> = (0..shape.len()).map(|a| wavenumbers(shape[a], grid.spacing(a))).collect();
        let mut symbol = Vec::with_capacity(grid.len());
        for idx in 0..grid.len() {
            let mut rem = idx;
            let mut k2 = 0.0;
            for a in (0..shape.len()).rev() {
                let j = rem % shape[a];
                rem /= shape[a];
                k2 += tables[a][j] * tables[a][j];
            }
            symbol.push(-1.0 / (1.0 + k2));
        }
        Ok(Self { grid: *grid, options, mu, mu_sum, symbol })
    }

    fn precondition(&self, v: &[f64]) -> Vec<f64> {
        if !self.options.precondition {
            return v.to_vec();
        }
        let shape = self.grid.shape();
        let axes: Vec<usize> = (0..shape.len()).collect();
        let mut z = to_complex(v);
        fft_axes(&mut z, &shape, &axes, false);
        z.iter_mut().zip(&self.symbol).for_each(|(c, s)| *c *= s);
        fft_axes(&mut z, &shape, &axes, true);
        z.iter().map(|c| c.re).collect()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let f = WignerField::new(self.grid, v.to_vec()).expect("finite Krylov vector");
        let mut out = apply_l(&f).into_values();
        project_mass(&mut out, &self.mu, self.mu_sum);
        out
    }

    pub fn solve_with_stats(&self, g: &WignerField, tol: f64) -> Result<(WignerField, KrylovStats)> {
        self.grid.ensure_same(g.grid())?;
        check_zero_mass(g)?;
        let mut rhs = g.values().to_vec();
        project_mass(&mut rhs, &self.mu, self.mu_sum);
        let g_norm = l2(&rhs);
        let zero_stats = KrylovStats { iterations: 0, restarts: 0, relative_residual: 0.0 };
        if g_norm == 0.0 {
            return Ok((WignerField::zeros(self.grid), zero_stats));
        }
        let target = tol * g_norm;
        let n = rhs.len();
        let m = self.options.restart;
        let mut x = vec![0.0; n];
        let mut r = rhs.clone();
        let mut iterations = 0;
        for restart in 0..self.options.max_restarts {
            let beta = l2(&r);
            if beta <= target {
                let stats = KrylovStats { iterations, restarts: restart, relative_residual: beta / g_norm };
                return Ok((WignerField::new(self.grid, x)?, stats));
            }
            let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
            let mut hess = vec![vec![0.0; m]; m + 1];
            let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
            let mut e = vec![0.0; m + 1];
            e[0] = beta;
            let mut used = 0;
            for j in 0..m {
                iterations += 1;
                let mut w = self.apply(&self.precondition(&basis[j]));
                project_mass(&mut w, &self.mu, self.mu_sum);
                // Two passes of modified Gram-Schmidt.
                for _ in 0..2 {
                    for (i, v) in basis.iter().enumerate() {
                        let h: f64 = w.iter().zip(v).map(|(a, b)| a * b).sum();
                        hess[i][j] += h;
                        w.iter_mut().zip(v).for_each(|(a, b)| *a -= h * b);
                    }
                }
                let hn = l2(&w);
                hess[j + 1][j] = hn;
                for i in 0..j {
                    let tmp = cs[i] * hess[i][j] + sn[i] * hess[i + 1][j];
                    hess[i + 1][j] = -sn[i] * hess[i][j] + cs[i] * hess[i + 1][j];
                    hess[i][j] = tmp;
                }
                let denom = hess[j][j].hypot(hess[j + 1][j]);
                cs[j] = hess[j][j] / denom;
                sn[j] = hess[j + 1][j] / denom;
                hess[j][j] = denom;
                hess[j + 1][j] = 0.0;
                e[j + 1] = -sn[j] * e[j];
                e[j] *= cs[j];
                used = j + 1;
                if e[j + 1].abs() <= target || hn == 0.0 {
                    break;
                }
                basis.push(w.iter().map(|v| v / hn).collect());
            }
            let mut y = vec![0.0; used];
            for i in (0..used).rev() {
                let s: f64 = ((i + 1)..used).map(|k| hess[i][k] * y[k]).sum();
                y[i] = (e[i] - s) / hess[i][i];
            }
            let mut update = vec![0.0; n];
            for (yi, v) in y.iter().zip(&basis) {
                update.iter_mut().zip(v).for_each(|(u, b)| *u += yi * b);
            }
            let dx = self.precondition(&update);
            x.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
            project_mass(&mut x, &self.mu, self.mu_sum);
            let lx = self.apply(&x);
            r = rhs.iter().zip(&lx).map(|(a, b)| a - b).collect();
        }
        let res = l2(&r) / g_norm;
        if res <= tol {
            let stats = KrylovStats { iterations, restarts: self.options.max_restarts, relative_residual: res };
            return Ok((WignerField::new(self.grid, x)?, stats));
        }
        Err(WfpError::NoConvergence(format!(
            "GMRES stagnated at relative residual {res:.3e} after {} restarts",
            self.options.max_restarts
        )))
    }

    pub fn solve(&self, g: &WignerField, tol: f64) -> Result<WignerField> {
        self.solve_with_stats(g, tol).map(|(x, _)| x)
    }
}

/// `L^{-1} g` by the semigroup integral.
pub fn solve_linv_semigroup(g: &WignerField, tol: f64) -> Result<WignerField> {
    SemigroupInverse::new(g.grid())?.solve(g, tol)
}

/// `L^{-1} g` by preconditioned restarted GMRES.
pub fn solve_linv_krylov(g: &WignerField, tol: f64) -> Result<WignerField> {
    KrylovInverse::new(g.grid(), KrylovOptions::default())?.solve(g, tol)
}

/// A prepared `L^{-1}` of either kind.
#[derive(Debug, Clone)]
pub enum LinvSolver {
    Semigroup(SemigroupInverse),
    Krylov(KrylovInverse),
}

impl LinvSolver {
    pub fn new(grid: &GridSpec, backend: LinvBackend) -> Result<Self> {
        Ok(match backend {
            LinvBackend::Semigroup => LinvSolver::Semigroup(SemigroupInverse::new(grid)?),
            LinvBackend::Krylov => LinvSolver::Krylov(KrylovInverse::new(grid, KrylovOptions::default())?),
        })
    }

    pub fn solve(&self, g: &WignerField, tol: f64) -> Result<WignerField> {
        match self {
            LinvSolver::Semigroup(s) => s.solve(g, tol),
            LinvSolver::Krylov(k) => k.solve(g, tol),
        }
    }
}

/// `||L w - lambda Theta w||_{H_m}`.
pub fn stationarity_residual(w: &WignerField, spec: &PotentialSpec, m: u32) -> Result<f64> {
    let lw = apply_l(w);
    if spec.lambda == 0.0 || spec.is_trivial() {
        return Ok(lw.norm_hm(m));
    }
    let theta = ThetaOperator::new(*w.grid(), spec)?.apply(w)?;
    Ok(lw.add_scaled(&theta, -spec.lambda)?.norm_hm(m))
}

#[derive(Debug, Clone, Serialize)]
pub struct FixedPointReport {
    pub backend: LinvBackend,
    pub lambda: f64,
    pub m: u32,
    pub tol: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `||L w_inf^(n) - lambda Theta w_inf^(n)||_{H_m}` per iterate.
    pub residuals: Vec<f64>,
    /// `||w_n - w_{n-1}||_{H_m}`.
    pub increments: Vec<f64>,
    /// Ratios of consecutive increments.
    pub contraction: Vec<f64>,
    pub mass: f64,
    /// `|lambda| Gamma_m / sigma` with a measured `Gamma_m`, when supplied.
    pub empirical_ratio_bound: Option<f64>,
    #[serde(skip)]
    pub w_inf: WignerField,
}

impl FixedPointReport {
    pub fn final_residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(f64::NAN)
    }

    /// Largest observed contraction ratio.
    pub fn max_contraction(&self) -> Option<f64> {
        self.contraction.iter().copied().reduce(f64::max)
    }

    /// Ratio the proof's estimate predicts with `Gamma_m` measured and the
    /// decay rate of the semigroup taken as `sigma`.
    pub fn set_gamma_estimate(&mut self, gamma_m: f64) {
        self.empirical_ratio_bound = Some(self.lambda.abs() * gamma_m / SIGMA);
    }

    /// `true` when the residual series never increases.
    pub fn residual_monotone(&self) -> bool {
        self.residuals.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Iterate `w_n = L^{-1}(lambda Theta (w_{n-1} + mu))` from `w_0 = 0` until
/// `||w_n - w_{n-1}||_{H_m} <= tol`.
pub fn fixed_point_solve(
    grid: &GridSpec,
    spec: &PotentialSpec,
    m: u32,
    tol: f64,
    max_iter: usize,
    backend: LinvBackend,
) -> Result<FixedPointReport> {
    if !(tol > 0.0) {
        return Err(WfpError::InvalidParameter("tol must be positive".into()));
    }
    let mu = WignerField::mu(*grid);
    let mut report = FixedPointReport {
        backend,
        lambda: spec.lambda,
        m,
        tol,
        iterations: 0,
        converged: false,
        residuals: vec![],
        increments: vec![],
        contraction: vec![],
        mass: mu.mass(),
        empirical_ratio_bound: None,
        w_inf: mu.clone(),
    };
    if spec.lambda == 0.0 || spec.is_trivial() {
        report.residuals.push(stationarity_residual(&mu, spec, m)?);
        report.converged = true;
        return Ok(report);
    }
    let theta = ThetaOperator::new(*grid, spec)?;
    let solver = LinvSolver::new(grid, backend)?;
    let mut w_prev = WignerField::zeros(*grid);
    let mut streak = 0;
    for n in 1..=max_iter {
        let full = mu.add_scaled(&w_prev, 1.0)?;
        let rhs = theta.apply(&full)?.scaled(spec.lambda);
        let w_n = solver.solve(&rhs, INNER_TOLERANCE)?;
        let inc = w_n.sub(&w_prev)?.norm_hm(m);
        if let Some(&prev) = report.increments.last() {
            let ratio = if prev > 0.0 { inc / prev } else { 0.0 };
            report.contraction.push(ratio);
            streak = if ratio >= 1.0 { streak + 1 } else { 0 };
        }
        report.increments.push(inc);
        let w_inf = mu.add_scaled(&w_n, 1.0)?;
        report.residuals.push(stationarity_residual(&w_inf, spec, m)?);
        report.iterations = n;
        report.mass = w_inf.mass();
        report.w_inf = w_inf;
        if !inc.is_finite() || streak >= DIVERGENCE_STREAK {
            return Err(WfpError::Divergence(format!(
                "fixed-point map is not contracting (increment {inc:.3e} after {n} iterations); \
                 |lambda| = {} is too large for the smallness condition on lambda",
                spec.lambda.abs()
            )));
        }
        if inc <= tol {
            report.converged = true;
            return Ok(report);
        }
        w_prev = w_n;
    }
    Err(WfpError::NoConvergence(format!(
        "fixed-point iteration: increment {:.3e} > tol {tol:e} after {max_iter} iterations",
        report.increments.last().copied().unwrap_or(f64::NAN)
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase_grid::{mu_times, random_h_field};

    fn grid() -> GridSpec {
        GridSpec::default_for(1, 64).unwrap()
    }

    /// `f - mass(f) mu / mass(mu)`.
    fn zero_mass(f: &WignerField) -> WignerField {
        let mu = WignerField::mu(*f.grid());
        f.add_scaled(&mu, -f.mass() / mu.mass()).unwrap()
    }

    fn rel(a: &WignerField, b: &WignerField) -> f64 {
        a.sub(b).unwrap().norm_l2() / b.norm_l2()
    }

    #[test]
    fn semigroup_round_trip() {
        let g = grid();
        let inv = SemigroupInverse::new(&g).unwrap();
        for seed in 0..2 {
            let f = zero_mass(&random_h_field(g, seed, 3));
            let back = inv.solve(&apply_l(&f), 1e-12).unwrap();
            assert!(rel(&back, &f) <= 1e-4, "seed {seed}: {:e}", rel(&back, &f));
        }
    }

    #[test]
    fn krylov_round_trip_on_polynomial_modes() {
        let g = grid();
        let f = mu_times(g, |x, xi| x[0] * xi[0] - 0.5 * x[0] + xi[0] * xi[0] * xi[0] - 3.0 * xi[0] * 0.75);
        let f = zero_mass(&f);
        let back = solve_linv_krylov(&apply_l(&f), 1e-12).unwrap();
        assert!(rel(&back, &f) <= 1e-6, "{:e}", rel(&back, &f));
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let g = grid();
        let z = WignerField::zeros(g);
        assert_eq!(solve_linv_semigroup(&z, 1e-10).unwrap().max_abs(), 0.0);
        assert_eq!(solve_linv_krylov(&z, 1e-10).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn massive_rhs_is_rejected() {
        let g = grid();
        let mu = WignerField::mu(g);
        assert!(solve_linv_semigroup(&mu, 1e-8).is_err());
        assert!(solve_linv_krylov(&mu, 1e-8).is_err());
    }

    #[test]
    fn backends_agree() {
        let g = grid();
        let semi = SemigroupInverse::new(&g).unwrap();
        let kry = KrylovInverse::new(&g, KrylovOptions::default()).unwrap();
        for seed in 10..12 {
            let rhs = zero_mass(&random_h_field(g, seed, 3));
            let a = semi.solve(&rhs, 1e-12).unwrap();
            let b = kry.solve(&rhs, 1e-12).unwrap();
            assert!(rel(&a, &b) <= 1e-4, "seed {seed}: {:e}", rel(&a, &b));
        }
    }

    #[test]
    fn krylov_residual_meets_tolerance() {
        let g = grid();
        let kry = KrylovInverse::new(&g, KrylovOptions::default()).unwrap();
        let rhs = zero_mass(&random_h_field(g, 3, 3));
        let mut last = f64::INFINITY;
        for tol in [1e-4, 5e-5, 2.5e-5] {
            let (_, stats) = kry.solve_with_stats(&rhs, tol).unwrap();
            assert!(stats.relative_residual <= tol);
            assert!(stats.relative_residual <= last);
            last = stats.relative_residual;
        }
    }

    #[test]
    fn stationarity_of_equilibrium() {
        let g = GridSpec::default_for(1, 128).unwrap();
        let mu = WignerField::mu(g);
        assert!(stationarity_residual(&mu, &PotentialSpec::sine(0.0), 4).unwrap() <= 1e-6);
        let spec = PotentialSpec::sine(0.01);
        let theta = ThetaOperator::new(g, &spec).unwrap().apply(&mu).unwrap();
        let r = stationarity_residual(&mu, &spec, 4).unwrap();
        let expected = 0.01 * theta.norm_hm(4);
        assert!(expected > 0.0);
        assert!((r - expected).abs() <= 1e-6 * expected.max(1.0) + 1e-6, "{r} vs {expected}");
    }

    #[test]
    fn unperturbed_fixed_point_is_mu() {
        let g = grid();
        let rep = fixed_point_solve(&g, &PotentialSpec::sine(0.0), 4, 1e-8, 10, LinvBackend::Krylov).unwrap();
        assert_eq!(rep.iterations, 0);
        assert_eq!(rep.w_inf, WignerField::mu(g));
    }

    #[test]
    fn fixed_point_converges_and_contracts() {
        let g = grid();
        let spec = PotentialSpec::sine(0.01);
        let rep = fixed_point_solve(&g, &spec, 4, 1e-9, 30, LinvBackend::Krylov).unwrap();
        assert!(rep.converged);
        assert!((rep.mass - 1.0).abs() <= 1e-6);
        assert!(rep.max_contraction().unwrap() < 1.0);
        assert!(rep.final_residual() <= 1e-5, "{}", rep.final_residual());
    }

    #[test]
    fn large_lambda_diverges() {
        let g = grid();
        let spec = PotentialSpec::sine(50.0);
        let err = fixed_point_solve(&g, &spec, 4, 1e-9, 30, LinvBackend::Krylov).unwrap_err();
        assert!(matches!(err, WfpError::Divergence(_)), "{err}");
    }
}
