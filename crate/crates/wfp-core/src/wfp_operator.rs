//! Matrix-free generator `L` of the unperturbed equation, its symmetric and
//! antisymmetric parts, the cut-off split `L = L1 + L2`, the ground-state
//! transformed operator `H`, and the general diffusion operator `Q`.
//!
//! All derivatives are spectral on the periodic box. Transport terms are
//! evaluated in divergence form so that every output has zero discrete mass.

use crate::error::{Result, WfpError};
use crate::fourier::{axis_derivatives, axis_flux_diffusion, fft_axes, to_complex, odd_wavenumbers};
use crate::numerics::gauss_legendre;
use crate::phase_grid::{GridSpec, QuadraticFormA, WignerField};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Sum of per-axis `d/dz (coef * w) + diff * d^2/dz^2 w` over all `2d` axes.
fn divergence_form<C>(w: &WignerField, diffusion: bool, coef: C) -> Vec<f64>
where
    C: Fn(usize, &[f64], &[f64]) -> f64,
{
    let grid = *w.grid();
    let shape = grid.shape();
    let points: Vec<_> = grid.points().collect();
    let zero = vec![0.0; grid.len()];
    let mut out = vec![0.0; grid.len()];
    for axis in 0..2 * grid.d() {
        let a: Vec<f64> = points
            .iter()
            .zip(w.values())
            .map(|(p, v)| coef(axis, p.x(), p.xi()) * v)
            .collect();
        let b = if diffusion { w.values() } else { &zero[..] };
        let term = axis_flux_diffusion(&a, b, &shape, axis, grid.spacing(axis));
        out.iter_mut().zip(&term).for_each(|(o, t)| *o += t);
    }
    out
}

/// `L w = -xi.grad_x w + x.grad_xi w + Lap_xi w + 2 div_xi(xi w) + Lap_x w`.
pub fn apply_l(w: &WignerField) -> WignerField {
    let d = w.grid().d();
    let values = divergence_form(w, true, |axis, x, xi| {
        if axis < d {
            -xi[axis]
        } else {
            let k = axis - d;
            x[k] + 2.0 * xi[k]
        }
    });
    w.with_values(values).expect("finite output")
}

/// `L^s w = div(grad w + w grad A)`.
pub fn apply_ls(w: &WignerField) -> WignerField {
    let d = w.grid().d();
    let form = QuadraticFormA::standard();
    let values = divergence_form(w, true, |axis, x, xi| {
        let k = axis % d;
        let (gx, gxi) = form.gradient_pair(x[k], xi[k]);
        if axis < d {
            gx
        } else {
            gxi
        }
    });
    w.with_values(values).expect("finite output")
}

/// `L^as w = div(F w)`.
pub fn apply_las(w: &WignerField) -> WignerField {
    let d = w.grid().d();
    let form = QuadraticFormA::standard();
    let values = divergence_form(w, false, |axis, x, xi| {
        let k = axis % d;
        let (fx, fxi) = form.rotation_pair(x[k], xi[k]);
        if axis < d {
            fx
        } else {
            fxi
        }
    });
    w.with_values(values).expect("finite output")
}

/// Potential `U = Lap A / 2 - |grad A|^2 / 4` of the transformed operator.
pub fn potential_u(x: &[f64], xi: &[f64]) -> f64 {
    let form = QuadraticFormA::standard();
    0.5 * form.laplacian(x.len()) - 0.25 * form.grad_norm_sq(x, xi)
}

/// `v = w / sqrt(mu)`.
pub fn groundstate_transform(w: &WignerField) -> Result<WignerField> {
    let mu = WignerField::mu(*w.grid());
    let values: Vec<f64> = w.values().iter().zip(mu.values()).map(|(a, m)| a / m.sqrt()).collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(WfpError::Overflow(format!(
            "w / sqrt(mu) not representable at node {i}; field is not supported away from the box edge"
        )));
    }
    w.with_values(values)
}

/// `w = sqrt(mu) v`.
pub fn inverse_groundstate_transform(v: &WignerField) -> WignerField {
    let mu = WignerField::mu(*v.grid());
    let values = v.values().iter().zip(mu.values()).map(|(a, m)| a * m.sqrt()).collect();
    v.with_values(values).expect("finite output")
}

/// `H v = Lap v + F.grad v + U v`.
pub fn apply_h(v: &WignerField) -> WignerField {
    let grid = *v.grid();
    let d = grid.d();
    let shape = grid.shape();
    let form = QuadraticFormA::standard();
    let points: Vec<_> = grid.points().collect();
    let mut out: Vec<f64> = points
        .iter()
        .zip(v.values())
        .map(|(p, a)| potential_u(p.x(), p.xi()) * a)
        .collect();
    for axis in 0..2 * d {
        let (first, second) = axis_derivatives(v.values(), &shape, axis, grid.spacing(axis));
        let k = axis % d;
        for (i, p) in points.iter().enumerate() {
            let (fx, fxi) = form.rotation_pair(p.x()[k], p.xi()[k]);
            let f = if axis < d { fx } else { fxi };
            out[i] += second[i] + f * first[i];
        }
    }
    v.with_values(out).expect("finite output")
}

const STEP_SHAPE: f64 = 0.1;
const STEP_TABLE: usize = 2048;

/// Smooth monotone step `s: [0,1] -> [0,1]`, `s(t) = int_0^t phi / int_0^1 phi`
/// with `phi(t) = exp(-0.1 / (t (1 - t)))`; its slope peaks at about 1.354.
#[derive(Debug, Clone)]
struct SmoothStep {
    values: Vec<f64>,
    total: f64,
}

fn step_density(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        0.0
    } else {
        (-STEP_SHAPE / (t * (1.0 - t))).exp()
    }
}

impl SmoothStep {
    fn new() -> Self {
        let h = 1.0 / STEP_TABLE as f64;
        let mut values = vec![0.0; STEP_TABLE + 1];
        for i in 0..STEP_TABLE {
            let a = i as f64 * h;
            values[i + 1] = values[i] + gauss_legendre(step_density, a, a + h, 1);
        }
        let total = values[STEP_TABLE];
        Self { values, total }
    }

    fn value(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if t >= 1.0 {
            return 1.0;
        }
        let h = 1.0 / STEP_TABLE as f64;
        let i = ((t / h) as usize).min(STEP_TABLE - 1);
        let s = (t - i as f64 * h) / h;
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let (m0, m1) = (step_density(i as f64 * h) * h, step_density((i + 1) as f64 * h) * h);
        let h00 = 2.0 * s.powi(3) - 3.0 * s * s + 1.0;
        let h10 = s.powi(3) - 2.0 * s * s + s;
        let h01 = -2.0 * s.powi(3) + 3.0 * s * s;
        let h11 = s.powi(3) - s * s;
        (h00 * y0 + h10 * m0 + h01 * y1 + h11 * m1) / self.total
    }

    fn slope(&self, t: f64) -> f64 {
        step_density(t) / self.total
    }
}

/// Cut-off `chi_eps(y) = chi(eps y)` with `chi = 1` on the unit ball and
/// `chi = 0` outside the ball of radius 2.
#[derive(Debug, Clone)]
pub struct CutoffSpec {
    epsilon: f64,
    step: SmoothStep,
}

impl CutoffSpec {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(WfpError::InvalidParameter(format!("epsilon must lie in (0, 1), got {epsilon}")));
        }
        Ok(Self { epsilon, step: SmoothStep::new() })
    }

    /// Largest admissible `epsilon` for weight exponent `m`.
    pub fn max_epsilon(m: u32) -> f64 {
        (1.0 / (12.0 * (m as f64).sqrt())).min(1.0 / 24.0)
    }

    /// Cut-off at the largest admissible `epsilon` for `m`.
    pub fn for_m(m: u32) -> Self {
        Self::new(Self::max_epsilon(m.max(1))).expect("admissible")
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn check_admissible(&self, m: u32) -> Result<()> {
        let limit = Self::max_epsilon(m.max(1));
        if self.epsilon > limit * (1.0 + 1e-12) {
            return Err(WfpError::InvalidParameter(format!(
                "epsilon {} exceeds min(1/(12 sqrt(m)), 1/24) = {limit} for m = {m}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Profile `chi` as a function of `|y|`.
    pub fn chi_radial(&self, r: f64) -> f64 {
        1.0 - self.step.value(r - 1.0)
    }

    /// `|grad chi|` as a function of `|y|`.
    pub fn chi_gradient_radial(&self, r: f64) -> f64 {
        self.step.slope(r - 1.0)
    }

    /// `chi_eps` at a phase-space point.
    pub fn chi_eps(&self, x: &[f64], xi: &[f64]) -> f64 {
        let r = x.iter().chain(xi).map(|v| v * v).sum::<f64>().sqrt();
        self.chi_radial(self.epsilon * r)
    }

    /// Sampled `sup |grad chi|`.
    pub fn max_gradient(&self) -> f64 {
        (0..=20_000)
            .map(|i| self.chi_gradient_radial(1.0 + i as f64 / 20_000.0))
            .fold(0.0, f64::max)
    }
}

/// `nu_m grad(nu_m^{-1}) . grad w - d w`, the bracket shared by the split.
fn split_bracket(w: &WignerField, m: u32) -> Vec<f64> {
    let grid = *w.grid();
    let d = grid.d();
    let shape = grid.shape();
    let form = QuadraticFormA::standard();
    let points: Vec<_> = grid.points().collect();
    let mut acc: Vec<f64> = w.values().iter().map(|v| -(d as f64) * v).collect();
    if m == 0 {
        return acc;
    }
    // nu_m grad nu_m^{-1} = m A^{m-1} grad A / (1 + A^m).
    let factor: Vec<f64> = points
        .iter()
        .map(|p| {
            let a = form.eval(p.x(), p.xi());
            m as f64 * a.powi(m as i32 - 1) / (1.0 + a.powi(m as i32))
        })
        .collect();
    let shape_ref = &shape;
    for axis in 0..2 * d {
        let k = axis % d;
        let deriv = crate::fourier::axis_derivative(w.values(), shape_ref, axis, grid.spacing(axis));
        for (i, p) in points.iter().enumerate() {
            let (gx, gxi) = form.gradient_pair(p.x()[k], p.xi()[k]);
            let g = if axis < d { gx } else { gxi };
            acc[i] += factor[i] * g * deriv[i];
        }
    }
    acc
}

/// `L1 w = (d w - nu_m grad(nu_m^{-1}) . grad w) chi_eps`.
pub fn apply_l1eps(w: &WignerField, m: u32, cut: &CutoffSpec) -> Result<WignerField> {
    cut.check_admissible(m)?;
    let grid = *w.grid();
    let bracket = split_bracket(w, m);
    let values = grid
        .points()
        .zip(bracket)
        .map(|(p, b)| -b * cut.chi_eps(p.x(), p.xi()))
        .collect();
    w.with_values(values)
}

/// `L2 = L - L1`.
pub fn apply_l2eps(w: &WignerField, m: u32, cut: &CutoffSpec) -> Result<WignerField> {
    let l1 = apply_l1eps(w, m, cut)?;
    apply_l(w).sub(&l1)
}

/// Coefficients of `D_pp Lap_xi + 2 D_pq div_x grad_xi + 2 D_f div_xi(xi .) + D_qq Lap_x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionCoefficients {
    pub d_pp: f64,
    pub d_pq: f64,
    pub d_f: f64,
    pub d_qq: f64,
}

impl DiffusionCoefficients {
    pub fn normalized() -> Self {
        Self { d_pp: 1.0, d_pq: 0.0, d_f: 1.0, d_qq: 1.0 }
    }

    pub fn new(d_pp: f64, d_pq: f64, d_f: f64, d_qq: f64) -> Self {
        Self { d_pp, d_pq, d_f, d_qq }
    }
}

/// Outcome of the positivity condition on diffusion coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LindbladCheck {
    pub pass: bool,
    /// `D_pp D_qq - D_pq^2 - D_f^2 / 4`.
    pub margin: f64,
}

pub fn lindblad_check(c: &DiffusionCoefficients) -> LindbladCheck {
    let margin = c.d_pp * c.d_qq - (c.d_pq * c.d_pq + c.d_f * c.d_f / 4.0);
    LindbladCheck { pass: c.d_pp >= 0.0 && margin >= 0.0, margin }
}

/// `Q w` for general coefficients.
pub fn apply_q(w: &WignerField, c: &DiffusionCoefficients) -> WignerField {
    let grid = *w.grid();
    let d = grid.d();
    let shape = grid.shape();
    let points: Vec<_> = grid.points().collect();
    let mut out = vec![0.0; grid.len()];
    for k in 0..d {
        let (xa, pa) = (k, d + k);
        let flux: Vec<f64> = points
            .iter()
            .zip(w.values())
            .map(|(p, v)| 2.0 * c.d_f * p.xi()[k] * v)
            .collect();
        let scaled: Vec<f64> = w.values().iter().map(|v| c.d_pp * v).collect();
        let xi_term = axis_flux_diffusion(&flux, &scaled, &shape, pa, grid.dxi());
        let zero = vec![0.0; grid.len()];
        let scaled_x: Vec<f64> = w.values().iter().map(|v| c.d_qq * v).collect();
        let x_term = axis_flux_diffusion(&zero, &scaled_x, &shape, xa, grid.dx());
        let mixed = if c.d_pq != 0.0 { mixed_derivative(w.values(), &grid, xa, pa) } else { zero };
        for i in 0..out.len() {
            out[i] += xi_term[i] + x_term[i] + 2.0 * c.d_pq * mixed[i];
        }
    }
    w.with_values(out).expect("finite output")
}

/// `d^2 / (dz_a dz_b) w` for two distinct axes.
fn mixed_derivative(values: &[f64], grid: &GridSpec, a: usize, b: usize) -> Vec<f64> {
    let shape = grid.shape();
    let ka = odd_wavenumbers(shape[a], grid.spacing(a));
    let kb = odd_wavenumbers(shape[b], grid.spacing(b));
    let mut spec = to_complex(values);
    fft_axes(&mut spec, &shape, &[a, b], false);
    let stride = |axis: usize| -> usize { shape[axis + 1..].iter().product() };
    let (sa, sb) = (stride(a), stride(b));
    for (idx, v) in spec.iter_mut().enumerate() {
        let ia = (idx / sa) % shape[a];
        let ib = (idx / sb) % shape[b];
        *v *= Complex64::new(-ka[ia] * kb[ib], 0.0);
    }
    fft_axes(&mut spec, &shape, &[a, b], true);
    spec.iter().map(|v| v.re).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::{axis_derivative, axis_derivatives};
    use crate::phase_grid::{mu_times, random_h_field, random_smooth_field, SIGMA};
    use proptest::prelude::*;

    fn grid() -> GridSpec {
        GridSpec::default_for(1, 128).unwrap()
    }

    fn small() -> GridSpec {
        GridSpec::new(1, 64, 64, 12.0, 8.0).unwrap()
    }

    fn rel(a: &WignerField, b: &WignerField) -> f64 {
        a.sub(b).unwrap().norm_l2() / b.norm_l2().max(1e-300)
    }

    #[test]
    fn l_annihilates_mu() {
        let mu = WignerField::mu(grid());
        let r = apply_l(&mu);
        assert!(r.max_abs() <= 1e-6 * mu.max_abs());
        assert!(r.norm_l2() / mu.norm_l2() <= 1e-6);
        assert!(apply_ls(&mu).norm_l2() / mu.norm_l2() <= 1e-6);
        assert!(apply_las(&mu).norm_l2() / mu.norm_l2() <= 1e-6);
    }

    #[test]
    fn l_of_zero_is_zero() {
        assert_eq!(apply_l(&WignerField::zeros(small())).max_abs(), 0.0);
    }

    #[test]
    fn l_matches_hand_built_formula() {
        // Non-divergence form evaluated term by term.
        let g = small();
        let w = random_smooth_field(g, 3, 4);
        let shape = g.shape();
        let (wx, wxx) = axis_derivatives(w.values(), &shape, 0, g.dx());
        let (wp, wpp) = axis_derivatives(w.values(), &shape, 1, g.dxi());
        let xi_w: Vec<f64> = g.points().zip(w.values()).map(|(p, v)| p.xi()[0] * v).collect();
        let div = axis_derivative(&xi_w, &shape, 1, g.dxi());
        let hand: Vec<f64> = g
            .points()
            .enumerate()
            .map(|(i, p)| -p.xi()[0] * wx[i] + p.x()[0] * wp[i] + wpp[i] + 2.0 * div[i] + wxx[i])
            .collect();
        let hand = w.with_values(hand).unwrap();
        assert!(rel(&apply_l(&w), &hand) < 1e-9);
    }

    #[test]
    fn symmetric_plus_antisymmetric_is_l() {
        for seed in 0..5 {
            let w = random_smooth_field(small(), seed, 4);
            let sum = apply_ls(&w).add_scaled(&apply_las(&w), 1.0).unwrap();
            assert!(apply_l(&w).sub(&sum).unwrap().max_abs() <= 1e-10 * apply_l(&w).max_abs().max(1.0));
        }
    }

    #[test]
    fn antisymmetric_part_is_skew_in_hm() {
        for seed in 0..10 {
            let w = random_smooth_field(grid(), seed, 4);
            for m in [0, 2, 4] {
                let ip = apply_las(&w).inner_hm(&w, m).unwrap();
                assert!(ip.abs() <= 1e-8 * w.norm_hm(m).powi(2).max(1.0), "m={m} ip={ip}");
            }
        }
    }

    #[test]
    fn symmetric_part_and_l_are_dissipative_in_h() {
        for seed in 0..10 {
            let w = random_h_field(grid(), seed, 4);
            let n2 = w.inner_h(&w, f64::INFINITY).unwrap();
            assert!(apply_ls(&w).inner_h(&w, f64::INFINITY).unwrap() <= 1e-8 * n2);
            assert!(apply_l(&w).inner_h(&w, f64::INFINITY).unwrap() <= 1e-8 * n2);
        }
    }

    #[test]
    fn coercive_on_mean_zero_polynomials() {
        let g = grid();
        let polys: Vec<Box<dyn Fn(f64, f64) -> f64>> = vec![
            Box::new(|x, _| x),
            Box::new(|_, p| p),
            Box::new(|x, p| x - p),
            Box::new(|x, p| x + 3.0 * p),
            Box::new(|x, p| x * p + 1.0),
            Box::new(|x, p| x * x - 3.0 + 0.5 * p),
        ];
        for p in &polys {
            let w = mu_times(g, |x, xi| p(x[0], xi[0]));
            let w = w.add_scaled(&WignerField::mu(g), -w.mass()).unwrap();
            let n2 = w.inner_h(&w, f64::INFINITY).unwrap();
            let lw = apply_l(&w).inner_h(&w, f64::INFINITY).unwrap();
            assert!(-lw >= SIGMA * n2 - 1e-8 * n2, "{} < {}", -lw, SIGMA * n2);
        }
    }

    #[test]
    fn mass_annihilation() {
        for seed in 0..5 {
            let w = random_smooth_field(grid(), seed, 4);
            assert!(apply_l(&w).mass().abs() < 1e-8);
            assert!(apply_q(&w, &DiffusionCoefficients::new(0.7, 0.3, 1.2, 2.0)).mass().abs() < 1e-8);
        }
    }

    #[test]
    fn groundstate_intertwining() {
        // sqrt(mu) is twice as wide as mu, so the box must be larger.
        let g = GridSpec::new(1, 192, 192, 20.0, 12.0).unwrap();
        let mu = WignerField::mu(g);
        let v_mu = groundstate_transform(&mu).unwrap();
        let h_mu = apply_h(&v_mu);
        assert!(h_mu.norm_l2() / v_mu.norm_l2() <= 1e-6);
        // Away from the edge, where dividing by sqrt(mu) does not amplify roundoff.
        let inside: Vec<bool> = g.a_values().iter().map(|&a| a <= 30.0).collect();
        for seed in 0..10 {
            let w = random_h_field(g, seed, 3);
            let lhs = apply_h(&groundstate_transform(&w).unwrap());
            let rhs = groundstate_transform(&apply_l(&w)).unwrap();
            let (mut num, mut den) = (0.0, 0.0);
            for ((a, b), keep) in lhs.values().iter().zip(rhs.values()).zip(&inside) {
                if *keep {
                    num += (a - b) * (a - b);
                    den += b * b;
                }
            }
            assert!((num / den).sqrt() <= 1e-6, "seed {seed}: {}", (num / den).sqrt());
        }
    }

    #[test]
    fn potential_at_origin() {
        // Lap A = 2 (1/4 + 3/4) = 2 in one dimension.
        assert_eq!(potential_u(&[0.0], &[0.0]), 1.0);
    }

    #[test]
    fn cutoff_profile_properties() {
        let cut = CutoffSpec::new(0.5).unwrap();
        assert_eq!(cut.chi_radial(0.3), 1.0);
        assert_eq!(cut.chi_radial(1.0), 1.0);
        assert_eq!(cut.chi_radial(2.0), 0.0);
        assert_eq!(cut.chi_radial(3.0), 0.0);
        assert!((cut.chi_radial(1.5) - 0.5).abs() < 1e-12);
        let g = cut.max_gradient();
        assert!(g <= 2f64.sqrt() && g > 1.0, "{g}");
        // Monotone decreasing.
        let samples: Vec<f64> = (0..=1000).map(|i| cut.chi_radial(1.0 + i as f64 / 1000.0)).collect();
        assert!(samples.windows(2).all(|p| p[1] <= p[0] + 1e-15));
    }

    #[test]
    fn epsilon_admissibility() {
        assert_eq!(CutoffSpec::max_epsilon(4), 1.0 / 24.0);
        assert!((CutoffSpec::max_epsilon(9) - 1.0 / 36.0).abs() < 1e-15);
        let cut = CutoffSpec::new(0.1).unwrap();
        let w = random_smooth_field(small(), 1, 2);
        assert!(apply_l1eps(&w, 4, &cut).is_err());
        assert!(CutoffSpec::new(0.0).is_err());
    }

    #[test]
    fn split_sums_to_l() {
        let cut = CutoffSpec::for_m(4);
        for seed in 0..5 {
            let w = random_smooth_field(grid(), seed, 4);
            let l1 = apply_l1eps(&w, 4, &cut).unwrap();
            let l2 = apply_l2eps(&w, 4, &cut).unwrap();
            let l = apply_l(&w);
            assert!(l1.add_scaled(&l2, 1.0).unwrap().sub(&l).unwrap().max_abs() <= 1e-10 * l.max_abs().max(1.0));
        }
    }

    #[test]
    fn l1_vanishes_outside_cutoff_support() {
        // eps = 1/24: chi_eps vanishes for |y| >= 48. The blob sits at |y| = 56
        // and is below 1e-14 inside that ball.
        let g = GridSpec::new(1, 512, 512, 64.0, 64.0).unwrap();
        let cut = CutoffSpec::for_m(4);
        let blob = WignerField::from_fn(g, |x, xi| (-((x[0] - 56.0).powi(2) + xi[0] * xi[0]) / 2.0).exp()).unwrap();
        let l1 = apply_l1eps(&blob, 4, &cut).unwrap();
        assert!(l1.max_abs() <= 1e-10 * apply_l(&blob).max_abs());
    }

    #[test]
    fn l2_is_dissipative_in_h4() {
        let cut = CutoffSpec::for_m(4);
        let g = grid();
        for seed in 0..100 {
            let w = random_smooth_field(g, seed, 3);
            let ip = apply_l2eps(&w, 4, &cut).unwrap().inner_hm(&w, 4).unwrap();
            assert!(-ip >= 0.0, "seed {seed}: {ip}");
        }
    }

    #[test]
    fn q_with_normalized_coefficients_is_right_hand_side() {
        let g = small();
        let w = random_smooth_field(g, 8, 4);
        let q = apply_q(&w, &DiffusionCoefficients::normalized());
        let shape = g.shape();
        let (_, wxx) = axis_derivatives(w.values(), &shape, 0, g.dx());
        let (_, wpp) = axis_derivatives(w.values(), &shape, 1, g.dxi());
        let xi_w: Vec<f64> = g.points().zip(w.values()).map(|(p, v)| p.xi()[0] * v).collect();
        let div = axis_derivative(&xi_w, &shape, 1, g.dxi());
        let hand: Vec<f64> = (0..g.len()).map(|i| wpp[i] + 2.0 * div[i] + wxx[i]).collect();
        assert!(rel(&q, &w.with_values(hand).unwrap()) < 1e-10);
        assert_eq!(apply_q(&w, &DiffusionCoefficients::new(0.0, 0.0, 0.0, 0.0)).max_abs(), 0.0);
    }

    #[test]
    fn mixed_term_matches_sequential_derivatives() {
        let g = small();
        let w = random_smooth_field(g, 4, 4);
        let shape = g.shape();
        let dp = axis_derivative(w.values(), &shape, 1, g.dxi());
        let dxp = axis_derivative(&dp, &shape, 0, g.dx());
        let q = apply_q(&w, &DiffusionCoefficients::new(0.0, 1.0, 0.0, 0.0));
        let expected = w.with_values(dxp.iter().map(|v| 2.0 * v).collect()).unwrap();
        assert!(rel(&q, &expected) < 1e-10);
    }

    #[test]
    fn lindblad_margins() {
        let ok = lindblad_check(&DiffusionCoefficients::normalized());
        assert!(ok.pass && (ok.margin - 0.75).abs() < 1e-15);
        let classical = lindblad_check(&DiffusionCoefficients::new(1.0, 0.0, 1.0, 0.0));
        assert!(!classical.pass && (classical.margin + 0.25).abs() < 1e-15);
        let zero = lindblad_check(&DiffusionCoefficients::new(0.0, 0.0, 0.0, 0.0));
        assert!(zero.pass && zero.margin == 0.0);
    }

    #[test]
    fn two_dimensional_generator_annihilates_mu() {
        let g = GridSpec::new(2, 40, 40, 12.0, 8.0).unwrap();
        let mu = WignerField::mu(g);
        let r = apply_l(&mu).norm_l2() / mu.norm_l2();
        assert!(r < 1e-5, "{r}");
        assert!(apply_l(&random_smooth_field(g, 2, 3)).mass().abs() < 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn l_is_linear(a in -2.0f64..2.0, s1 in 0u64..500, s2 in 0u64..500) {
            let g = GridSpec::new(1, 32, 32, 12.0, 8.0).unwrap();
            let f = random_smooth_field(g, s1, 3);
            let h = random_smooth_field(g, s2, 3);
            let lhs = apply_l(&f.add_scaled(&h, a).unwrap());
            let rhs = apply_l(&f).add_scaled(&apply_l(&h), a).unwrap();
            prop_assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-11 * rhs.max_abs().max(1.0));
        }

        #[test]
        fn q_annihilates_mass(pp in 0.0f64..2.0, pq in -1.0f64..1.0, f in 0.0f64..2.0, qq in 0.0f64..2.0, s in 0u64..500) {
            let g = GridSpec::new(1, 32, 32, 12.0, 8.0).unwrap();
            let w = random_smooth_field(g, s, 3);
            prop_assert!(apply_q(&w, &DiffusionCoefficients::new(pp, pq, f, qq)).mass().abs() < 1e-8);
        }
    }
}
