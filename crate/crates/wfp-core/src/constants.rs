//! Explicit constants of the convergence theory, and sampled checks of the
//! pointwise inequalities and the weighted Poincare inequality behind them.
//!
//! Several constants (`delta_m` above all) exceed the range of `f64` for
//! moderate `m`; they are carried as base-10 logarithms and the `f64` field
//! is then infinite.

use crate::error::{Result, WfpError};
use crate::fourier::axis_derivative;
use crate::numerics::gauss_legendre;
use crate::phase_grid::{inequality_sample_points, sphere_points, GridSpec, Point, QuadraticFormA, WignerField, SIGMA};
use crate::potential_theta::{gamma_m_bound, gamma_m_estimate, PotentialSpec};
use crate::wfp_operator::{apply_l1eps, CutoffSpec};
use serde::Serialize;
use std::collections::BTreeMap;
use std::f64::consts::{LN_10, PI};

pub const A1: f64 = 1.0 / 36.0;
pub const A2: f64 = 36.0;
pub const K_CONST: f64 = 144.0;

/// Sharp isoperimetric constant of `||grad w||_{L^1(R^2)} >= c ||w||_{L^2(R^2)}`.
pub const GNS_L1_PLANE: f64 = 3.544_907_701_811_032; // 2 sqrt(pi)

/// `alpha = sigma / (sigma + 2d + 1)`.
pub fn alpha(d: usize) -> f64 {
    SIGMA / (SIGMA + 2.0 * d as f64 + 1.0)
}

/// `beta_m = 2d + m((m - 1) a2 + 2d)`.
pub fn beta_m(m: u32, d: usize) -> f64 {
    let (m, d) = (m as f64, d as f64);
    2.0 * d + m * ((m - 1.0) * A2 + 2.0 * d)
}

/// `eps_m = min(1 / (12 sqrt(m)), 1/24)`.
pub fn eps_m(m: u32) -> f64 {
    (1.0 / (12.0 * (m as f64).sqrt())).min(1.0 / 24.0)
}

/// `integral s^{d-1} / (1 + s^m) ds` over `(0, inf)` by Gauss-Legendre after
/// `s = t / (1 - t)`.
fn radial_integral(m: u32, d: usize) -> f64 {
    let f = |t: f64| {
        if t >= 1.0 {
            return 0.0;
        }
        let s = t / (1.0 - t);
        let jac = 1.0 / ((1.0 - t) * (1.0 - t));
        // Evaluated as s^{d-1-m} / (1 + s^{-m}) past s = 1 to avoid overflow.
        let v = if s <= 1.0 {
            s.powi(d as i32 - 1) / (1.0 + s.powi(m as i32))
        } else {
            s.powi(d as i32 - 1 - m as i32) / (1.0 + s.powi(-(m as i32)))
        };
        v * jac
    };
    gauss_legendre(f, 0.0, 0.5, 200) + gauss_legendre(f, 0.5, 1.0, 2000)
}

/// `C_{A,m} = (integral (1 + A^m)^{-1})^{1/2}` over `R^{2d}`; requires `m > d`.
///
/// The level sets of `A` give `integral f(A) = pi^d / ((d-1)! det(P)^{d/2})
/// integral s^{d-1} f(s) ds` with `P` the per-dimension coefficient matrix.
pub fn c_am(m: u32, d: usize) -> Result<f64> {
    if m as usize <= d {
        return Err(WfpError::InvalidParameter(format!(
            "C_(A,m) is finite only for m > d (got m = {m}, d = {d})"
        )));
    }
    let form = QuadraticFormA::standard();
    let det = form.p11 * form.p22 - form.p12 * form.p12;
    let factorial: f64 = (1..d).map(|k| k as f64).product();
    let prefactor = PI.powi(d as i32) / (factorial * det.powf(d as f64 / 2.0));
    Ok((prefactor * radial_integral(m, d)).sqrt())
}

/// `||1 + A^m||` on the ball of radius `1/sqrt(12)`.
pub fn sup_weight_on_ball(m: u32) -> f64 {
    let top = QuadraticFormA::standard().max_coefficient_eigenvalue() / 12.0;
    1.0 + top.powi(m as i32)
}

/// Sobolev constant entering `Lambda_m`, with the branch that applies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SobolevChoice {
    pub branch: &'static str,
    pub constant: f64,
    pub reference: &'static str,
}

pub fn sobolev_choice(d: usize) -> SobolevChoice {
    if d == 1 {
        SobolevChoice {
            branch: "d = 1: ||grad w||_L1 >= C ||w||_L2 on R^2, combined with C_(A,m)",
            constant: GNS_L1_PLANE,
            reference: "sharp isoperimetric (Federer-Fleming, Maz'ya) constant 2 sqrt(pi)",
        }
    } else {
        // Aubin-Talenti: ||w||_{L^4(R^4)} <= S ||grad w||_{L^2}, S = 6^{1/4} / sqrt(8 pi);
        // Hoelder on the ball then gives C_1^2 = |B|^{-1/2} / S^2.
        let s = 6f64.powf(0.25) / (8.0 * PI).sqrt();
        let r2 = 1.0 / 12.0;
        let ball = PI * PI * r2 * r2 / 2.0;
        SobolevChoice {
            branch: "d = 2: ||grad w||_L2 >= C_d ||w||_L4 on R^4, Hoelder on the ball",
            constant: (1.0 / (s * s * ball.sqrt())).sqrt(),
            reference: "sharp Aubin-Talenti constant for the embedding H^1 -> L^4 in R^4",
        }
    }
}

/// `Lambda_m`, evaluating only the Sobolev branch valid for `d`.
pub fn lambda_m(m: u32, d: usize) -> Result<f64> {
    let sob = sobolev_choice(d);
    let sup = sup_weight_on_ball(m);
    let branch = if d == 1 {
        let c = c_am(m, d)?;
        sob.constant * sob.constant / (2.0 * c * c * sup)
    } else {
        sob.constant * sob.constant / (2.0 * sup)
    };
    Ok(branch.min(0.5).min(d as f64 / 6.0))
}

/// `theta_m(z)` at a real `z` in `(-gamma_m, 0)`.
pub fn theta_m_at(z: f64, lambda_m: f64, l1_norm: f64) -> f64 {
    let first = (1.0 / (z + lambda_m)).max(1.0 / lambda_m);
    let second = (1.0 / (z + SIGMA)).max(1.0 / z.abs());
    first * (1.0 + second * l1_norm)
}

fn log10_exp(x: f64) -> f64 {
    x / LN_10
}

fn from_log10(l: f64) -> f64 {
    if l > f64::MAX.log10() {
        f64::INFINITY
    } else {
        10f64.powf(l)
    }
}

/// Settings for the numerically estimated ingredients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantsOptions {
    /// Defaults to `gamma_m / 2`.
    pub gamma_tilde: Option<f64>,
    /// Grid for the `Gamma_m` estimate; `None` skips it.
    pub gamma_grid: Option<GridSpec>,
    /// Points per axis of the coarse grid for `||L1^eps||`.
    pub l1_points: usize,
    /// Truncation `A <= h_cut` of the `H` weight in that estimate.
    pub h_cut: f64,
}

impl Default for ConstantsOptions {
    fn default() -> Self {
        Self { gamma_tilde: None, gamma_grid: GridSpec::default_for(1, 64).ok(), l1_points: 32, h_cut: 30.0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoryConstants {
    pub d: usize,
    pub m: u32,
    pub lambda: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub a1: f64,
    pub a2: f64,
    pub k: f64,
    pub beta_m: f64,
    pub eps_m: f64,
    pub c_am: Option<f64>,
    pub sobolev: SobolevChoice,
    pub lambda_m: f64,
    pub gamma_m: f64,
    pub gamma_tilde: f64,
    /// Discrete estimate of `||L1^eps||` from `H_m^1` to `H` (truncated weight).
    pub l1_norm_estimate: f64,
    pub l1_norm_grid: usize,
    pub h_cut: f64,
    pub theta_m: f64,
    pub delta_m: f64,
    pub log10_delta_m: f64,
    pub sigma_m: f64,
    pub log10_sigma_m: f64,
    pub gamma_bound: Option<f64>,
    pub gamma_estimate: Option<f64>,
    pub lambda_max: Option<f64>,
    pub log10_lambda_max: Option<f64>,
    pub kappa_m: Option<f64>,
    /// Exact forms of the rational constants.
    pub exact: BTreeMap<&'static str, String>,
}

/// Evaluate every constant in dependency order.
pub fn compute_constants(m: u32, d: usize, spec: &PotentialSpec, options: &ConstantsOptions) -> Result<TheoryConstants> {
    if m < 1 {
        return Err(WfpError::InvalidParameter("m must be at least 1".into()));
    }
    if d != 1 && d != 2 {
        return Err(WfpError::InvalidParameter(format!("d must be 1 or 2, got {d}")));
    }
    let c_am_value = if d == 1 { Some(c_am(m, d)?) } else { c_am(m, d).ok() };
    let lam = lambda_m(m, d)?;
    let gamma_m = lam.min(SIGMA);
    let gamma_tilde = options.gamma_tilde.unwrap_or(gamma_m / 2.0);
    if !(gamma_tilde > 0.0 && gamma_tilde < gamma_m) {
        return Err(WfpError::InvalidParameter(format!(
            "gamma_tilde = {gamma_tilde} must lie in (0, gamma_m = {gamma_m})"
        )));
    }
    let l1 = if d == 1 { l1_norm_estimate(m, options.l1_points, options.h_cut)? } else { f64::NAN };
    let theta = theta_m_at(-gamma_tilde, lam, l1);
    let beta = beta_m(m, d);
    let log10_delta = (PI / 2.0 * theta * theta).log10().max(log10_exp(beta + gamma_tilde));
    let log10_sigma_m = gamma_tilde.log10() - log10_delta;

    let gamma_bound = gamma_m_bound(spec, m).ok();
    let gamma_estimate = match options.gamma_grid {
        Some(g) if g.d() == d && !spec.is_trivial() => Some(gamma_m_estimate(spec, m, &g)?),
        _ => None,
    };
    let log10_lambda_max = gamma_bound.filter(|g| *g > 0.0).map(|g| gamma_tilde.log10() - g.log10() - log10_delta);
    let kappa_m = gamma_bound.map(|g| gamma_tilde - spec.lambda.abs() * from_log10(log10_delta) * g);

    let mut exact = BTreeMap::new();
    exact.insert("sigma", "1 - 1/sqrt(2)".to_string());
    exact.insert("alpha", format!("sigma / (sigma + {})", 2 * d + 1));
    exact.insert("a1", "1/36".into());
    exact.insert("a2", "36".into());
    exact.insert("k", "144".into());
    exact.insert("beta_m", format!("{}", beta as u64));
    exact.insert("eps_m", if m <= 4 { "1/24".into() } else { format!("1/(12 sqrt({m}))") });

    Ok(TheoryConstants {
        d,
        m,
        lambda: spec.lambda,
        sigma: SIGMA,
        alpha: alpha(d),
        a1: A1,
        a2: A2,
        k: K_CONST,
        beta_m: beta,
        eps_m: eps_m(m),
        c_am: c_am_value,
        sobolev: sobolev_choice(d),
        lambda_m: lam,
        gamma_m,
        gamma_tilde,
        l1_norm_estimate: l1,
        l1_norm_grid: options.l1_points,
        h_cut: options.h_cut,
        theta_m: theta,
        delta_m: from_log10(log10_delta),
        log10_delta_m: log10_delta,
        sigma_m: 10f64.powf(log10_sigma_m),
        log10_sigma_m,
        gamma_bound,
        gamma_estimate,
        lambda_max: log10_lambda_max.map(|l| 10f64.powf(l)),
        log10_lambda_max,
        kappa_m,
        exact,
    })
}

/// `||L1^eps||` from `H_m^1` to `H` on a coarse `d = 1` grid: the largest
/// generalized eigenvalue of `T^T G_H T` against `G_{H_m^1}`, with trial
/// fields supported where `A <= h_cut`.
pub fn l1_norm_estimate(m: u32, points: usize, h_cut: f64) -> Result<f64> {
    let grid = GridSpec::new_unchecked(1, points, points, 12.0, 8.0)?;
    let cut = CutoffSpec::for_m(m);
    let n = grid.len();
    let shape = grid.shape();
    let form = QuadraticFormA::standard();
    let a = grid.a_values();
    let support: Vec<usize> = (0..n).filter(|&i| a[i] <= h_cut && !grid.in_outer_shell(&grid.point(i))).collect();
    if support.is_empty() {
        return Err(WfpError::InvalidParameter("h_cut leaves no support for the estimate".into()));
    }
    let unit = |j: usize| {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        e
    };
    let t_cols: Vec<Vec<f64>> = support
        .iter()
        .map(|&j| apply_l1eps(&WignerField::new(grid, unit(j))?, m, &cut).map(|f| f.into_values()))
        .collect::<Result<_>>()?;
    let d_cols: Vec<[Vec<f64>; 2]> = support
        .iter()
        .map(|&j| {
            let e = unit(j);
            [axis_derivative(&e, &shape, 0, grid.dx()), axis_derivative(&e, &shape, 1, grid.dxi())]
        })
        .collect();
    let log_c = form.normalization(1).ln();
    let h_weight: Vec<f64> = a.iter().map(|&ai| if ai <= h_cut { (ai - log_c).exp() } else { 0.0 }).collect();
    let m_weight: Vec<f64> = a.iter().map(|&ai| 1.0 + ai.powi(m as i32)).collect();
    let s = support.len();
    // Columns scaled by the square root of the weight, so each Gram matrix is one product.
    let scaled = |cols: Vec<&[f64]>, w: &[f64]| faer::Mat::<f64>::from_fn(n, s, |i, j| cols[j][i] * w[i].sqrt());
    let t = scaled(t_cols.iter().map(Vec::as_slice).collect(), &h_weight);
    let d0 = scaled(d_cols.iter().map(|c| c[0].as_slice()).collect(), &m_weight);
    let d1 = scaled(d_cols.iter().map(|c| c[1].as_slice()).collect(), &m_weight);
    let target = t.transpose() * &t;
    let mut gram = d0.transpose() * &d0 + d1.transpose() * &d1;
    for (i, &p) in support.iter().enumerate() {
        gram[(i, i)] += m_weight[p];
    }
    Ok(max_generalized_eigenvalue(&target, &gram)?.max(0.0).sqrt())
}

/// Largest `lambda` with `K v = lambda G v`, `G` symmetric positive definite.
fn max_generalized_eigenvalue(k: &faer::Mat<f64>, g: &faer::Mat<f64>) -> Result<f64> {
    let s = g.nrows();
    let eig = g
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| WfpError::NoConvergence(format!("Gram eigensolve failed: {e:?}")))?;
    let (u, vals) = (eig.U(), eig.S().column_vector());
    if vals[0] <= 0.0 {
        return Err(WfpError::Invariant("Gram matrix is not positive definite".into()));
    }
    let root_inv = faer::Mat::<f64>::from_fn(s, s, |i, j| u[(i, j)] / vals[j].sqrt());
    let reduced = root_inv.transpose() * k * &root_inv;
    let sym = faer::Mat::<f64>::from_fn(s, s, |i, j| 0.5 * (reduced[(i, j)] + reduced[(j, i)]));
    let top = sym
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .map_err(|e| WfpError::NoConvergence(format!("reduced eigensolve failed: {e:?}")))?;
    Ok(top.last().copied().unwrap_or(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InequalityMargin {
    pub name: &'static str,
    /// `min (1 - lhs/rhs)` over the samples where the inequality applies.
    pub worst_margin: f64,
    pub samples: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TechLemmaReport {
    pub m: u32,
    pub d: usize,
    pub a1: f64,
    pub a2: f64,
    /// Order at which (b) is evaluated, `max(m, K d)`.
    pub b_order: u32,
    pub eps: f64,
    pub checks: Vec<InequalityMargin>,
    pub pass: bool,
}

/// Sample sets for the pointwise inequalities.
#[derive(Debug, Clone)]
pub struct TechLemmaSamples {
    /// Generic points; the ring `|x|^2 + |xi|^2 = 12` is included.
    pub points: Vec<Point>,
    /// Points with `|x|, |xi| >= 1/eps`, expressed in units of `1/eps`.
    pub far_points: Vec<Point>,
}

impl TechLemmaSamples {
    pub fn standard(d: usize, seed: u64) -> Self {
        let mut points = inequality_sample_points(d, 4000, 40.0, seed);
        points.extend(inequality_sample_points(d, 2000, 4.0, seed + 1));
        points.extend(sphere_points(d, 12.0, 256));
        // Far region: |x|, |xi| in [1, 4] / eps in every direction.
        let far_points = inequality_sample_points(d, 2000, 1.0, seed + 2)
            .into_iter()
            .map(|p| {
                let scale = |v: &[f64]| -> Vec<f64> {
                    let r = v.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-12);
                    let target = 1.0 + 3.0 * r.min(1.0);
                    v.iter().map(|c| c / r * target).collect()
                };
                Point::new(&scale(p.x()), &scale(p.xi()))
            })
            .collect();
        Self { points, far_points }
    }
}

/// `1 - exp(log_lhs - log_rhs)`.
fn margin(log_lhs: f64, log_rhs: f64) -> f64 {
    -(log_lhs - log_rhs).exp_m1()
}

/// `ln(1 + A^m)` without overflow.
fn ln_one_plus_pow(a: f64, m: u32) -> f64 {
    let l = m as f64 * a.ln();
    if l > 0.0 {
        l + (-l).exp().ln_1p()
    } else {
        l.exp().ln_1p()
    }
}

/// Sampled check of the four pointwise inequalities at order `m` with the
/// given `a1`, `a2`.
pub fn check_techlemma_with(m: u32, d: usize, a1: f64, a2: f64, samples: &TechLemmaSamples) -> TechLemmaReport {
    let form = QuadraticFormA::standard();
    let tol = -1e-12;
    let k = (4.0 / a1).ceil() as u32;
    let b_order = m.max(k * d as u32);
    let eps = eps_m(m);
    let mut checks = Vec::new();
    let mut push = |name: &'static str, margins: Vec<f64>| {
        let worst = margins.iter().copied().fold(f64::INFINITY, f64::min);
        checks.push(InequalityMargin { name, worst_margin: worst, samples: margins.len(), pass: worst >= tol });
    };

    let outside: Vec<&Point> = samples.points.iter().filter(|p| p.radius_sq() >= 12.0 * (1.0 - 1e-12)).collect();
    let ln_terms = |p: &Point| -> (f64, f64) {
        let a = form.eval(p.x(), p.xi());
        (a, form.grad_norm_sq(p.x(), p.xi()))
    };
    push(
        "a",
        outside
            .iter()
            .map(|p| {
                let (a, g) = ln_terms(p);
                margin(a1.ln() + ln_one_plus_pow(a, m), (m as f64 - 1.0) * a.ln() + g.ln())
            })
            .collect(),
    );
    push(
        "b",
        outside
            .iter()
            .map(|p| {
                let (a, g) = ln_terms(p);
                let mb = b_order as f64;
                margin((4.0 * d as f64).ln() + ln_one_plus_pow(a, b_order), mb.ln() + (mb - 1.0) * a.ln() + g.ln())
            })
            .collect(),
    );
    push(
        "c",
        samples
            .points
            .iter()
            .filter(|p| p.radius_sq() > 0.0)
            .map(|p| {
                let (a, g) = ln_terms(p);
                margin(g.ln(), a2.ln() + a.ln())
            })
            .collect(),
    );
    push(
        "d",
        samples
            .far_points
            .iter()
            .map(|p| {
                let x: Vec<f64> = p.x().iter().map(|c| c / eps).collect();
                let xi: Vec<f64> = p.xi().iter().map(|c| c / eps).collect();
                let a = form.eval(&x, &xi);
                let g = form.grad_norm_sq(&x, &xi);
                let mf = m as f64;
                // Common factor m A^{m-1} cancels.
                let lhs = (mf - 1.0) * g / a + form.laplacian(d);
                let rhs = g * eps * eps * 6.0 * (mf - 1.0 + 3.0 * d as f64);
                margin(lhs.ln(), rhs.ln())
            })
            .collect(),
    );
    let pass = checks.iter().all(|c| c.pass);
    TechLemmaReport { m, d, a1, a2, b_order, eps, checks, pass }
}

pub fn check_techlemma(m: u32, d: usize, samples: &TechLemmaSamples) -> TechLemmaReport {
    check_techlemma_with(m, d, A1, A2, samples)
}

/// Monomial `prod z_k^{e_k}` in `z = (x_1..x_d, xi_1..xi_d)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Monomial(pub Vec<u32>);

impl Monomial {
    fn eval(&self, z: &[f64]) -> f64 {
        self.0.iter().zip(z).map(|(&e, &v)| v.powi(e as i32)).product()
    }

    fn gradient(&self, z: &[f64]) -> Vec<f64> {
        (0..z.len())
            .map(|k| {
                if self.0[k] == 0 {
                    return 0.0;
                }
                self.0
                    .iter()
                    .zip(z)
                    .enumerate()
                    .map(|(j, (&e, &v))| if j == k { e as f64 * v.powi(e as i32 - 1) } else { v.powi(e as i32) })
                    .product()
            })
            .collect()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }
}

/// All monomials of degree `1..=max_degree` in `2d` variables.
pub fn poincare_test_family(d: usize, max_degree: u32) -> Vec<Monomial> {
    let dim = 2 * d;
    let mut out = Vec::new();
    let total = (max_degree + 1).pow(dim as u32);
    for idx in 0..total {
        let mut rem = idx;
        let e: Vec<u32> = (0..dim)
            .map(|_| {
                let v = rem % (max_degree + 1);
                rem /= max_degree + 1;
                v
            })
            .collect();
        let m = Monomial(e);
        if (1..=max_degree).contains(&m.degree()) {
            out.push(m);
        }
    }
    out.sort_by_key(|m| m.degree());
    out
}

/// Gauss-Hermite rule for the standard normal: nodes and weights.
pub fn gauss_hermite_normal(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let jacobi = faer::Mat::<f64>::from_fn(n, n, |i, j| if i + 1 == j || j + 1 == i { ((i.max(j)) as f64 / 2.0).sqrt() } else { 0.0 });
    let eig = jacobi
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| WfpError::NoConvergence(format!("Golub-Welsch eigensolve failed: {e:?}")))?;
    let (u, vals) = (eig.U(), eig.S().column_vector());
    let nodes = (0..n).map(|i| vals[i] * 2f64.sqrt()).collect();
    let weights = (0..n).map(|i| u[(0, i)] * u[(0, i)]).collect();
    Ok((nodes, weights))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoincareReport {
    pub d: usize,
    /// `E|grad f|^2 / E f^2` for each centred test function.
    pub ratios: Vec<f64>,
    pub min_ratio: f64,
    /// Minimum of the Rayleigh quotient over the span of the family.
    pub span_min_ratio: f64,
    pub sigma: f64,
    pub pass: bool,
}

/// `integral |f|^2 mu <= (1/sigma) integral mu |grad f|^2` for the centred
/// test functions, with `mu`-expectations computed exactly by tensor
/// Gauss-Hermite quadrature in whitened coordinates.
pub fn check_poincare(d: usize, polys: &[Monomial]) -> Result<PoincareReport> {
    if polys.iter().any(|p| p.degree() == 0) {
        return Err(WfpError::InvalidParameter("constant test functions have no mean-zero part".into()));
    }
    if polys.iter().any(|p| p.0.len() != 2 * d) {
        return Err(WfpError::InvalidParameter("monomial arity does not match 2d".into()));
    }
    let max_deg = polys.iter().map(|p| p.degree()).max().unwrap_or(1) as usize;
    let (gh_nodes, gh_weights) = gauss_hermite_normal(max_deg + 2)?;
    let cov = QuadraticFormA::standard().covariance();
    let l11 = cov[0][0].sqrt();
    let l21 = cov[1][0] / l11;
    let l22 = (cov[1][1] - l21 * l21).sqrt();
    let q = gh_nodes.len();
    let dim = 2 * d;
    // Tensor nodes: per dimension pair (u, v) -> (x, xi) = (l11 u, l21 u + l22 v).
    let mut nodes: Vec<(Vec<f64>, f64)> = Vec::new();
    for idx in 0..q.pow(dim as u32) {
        let mut rem = idx;
        let mut u = vec![0.0; dim];
        let mut w = 1.0;
        for slot in u.iter_mut() {
            let i = rem % q;
            rem /= q;
            *slot = gh_nodes[i];
            w *= gh_weights[i];
        }
        let mut z = vec![0.0; dim];
        for k in 0..d {
            z[k] = l11 * u[k];
            z[d + k] = l21 * u[k] + l22 * u[d + k];
        }
        nodes.push((z, w));
    }
    let means: Vec<f64> = polys.iter().map(|p| nodes.iter().map(|(z, w)| w * p.eval(z)).sum()).collect();
    let np = polys.len();
    let mut mass = faer::Mat::<f64>::zeros(np, np);
    let mut grad = faer::Mat::<f64>::zeros(np, np);
    for (z, w) in &nodes {
        let vals: Vec<f64> = polys.iter().zip(&means).map(|(p, mean)| p.eval(z) - mean).collect();
        let grads: Vec<Vec<f64>> = polys.iter().map(|p| p.gradient(z)).collect();
        for i in 0..np {
            for j in 0..np {
                mass[(i, j)] += w * vals[i] * vals[j];
                grad[(i, j)] += w * grads[i].iter().zip(&grads[j]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    let ratios: Vec<f64> = (0..np).map(|i| grad[(i, i)] / mass[(i, i)]).collect();
    let min_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    // Smallest Rayleigh quotient = 1 / largest eigenvalue of mass against grad.
    let span_min_ratio = 1.0 / max_generalized_eigenvalue(&mass, &grad)?;
    let tol = 1e-10 * SIGMA;
    Ok(PoincareReport {
        d,
        ratios,
        min_ratio,
        span_min_ratio,
        sigma: SIGMA,
        pass: min_ratio >= SIGMA - tol && span_min_ratio >= SIGMA - tol,
    })
}
