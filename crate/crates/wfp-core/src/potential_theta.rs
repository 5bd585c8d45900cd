//! Potential perturbations `V_0` and the pseudo-differential operator
//! `Theta[V_0] w = -i F^{-1}_{eta->xi}( dV(x, eta) F_{xi->eta} w )` with the
//! symbol `dV(x, eta) = V_0(x + eta/2) - V_0(x - eta/2)`.
//!
//! The discrete operator acts on each x-line by an FFT over the momentum
//! axes. The symbol is odd in `eta`; Nyquist modes are dropped so real
//! fields stay real.

use crate::error::{Result, WfpError};
use crate::fourier::{fft_axes, fft_axis, wavenumbers};
use crate::numerics::binomial;
use crate::phase_grid::{hm_weight, random_smooth_field, GridSpec, WignerField};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Imaginary residue (relative) above which `apply_theta` reports aliasing.
pub const ALIASING_THRESHOLD: f64 = 1e-8;

/// Largest grid accepted by the direct-sum oracle.
pub const QUADRATURE_MAX_POINTS: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PotentialKind {
    None,
    /// `V_0 = value`.
    Constant { value: f64 },
    /// `V_0 = amp |x|^2 / 2`; unbounded, so `Gamma_m` is undefined.
    Quadratic { amp: f64 },
    /// `V_0 = amp sin(k0 . x)`.
    Sinusoidal { k0: Vec<f64>, amp: f64 },
    /// `V_0 = amp exp(-|x - center|^2 / (2 width^2))`.
    GaussianBump { center: Vec<f64>, width: f64, amp: f64 },
    /// Samples on the position nodes `-x_max + i * 2 x_max / n`, `d = 1`,
    /// extended by trigonometric interpolation.
    Tabulated { x_max: f64, samples: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub lambda: f64,
    pub kind: PotentialKind,
    #[serde(skip)]
    table: Option<TrigTable>,
}

/// Fourier coefficients of a tabulated potential.
#[derive(Debug, Clone, PartialEq)]
struct TrigTable {
    x_max: f64,
    wavenumbers: Vec<f64>,
    coeffs: Vec<Complex64>,
}

impl TrigTable {
    fn new(x_max: f64, samples: &[f64]) -> Self {
        let n = samples.len();
        let mut c: Vec<Complex64> = samples.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft_axis(&mut c, &[n], 0, false);
        c.iter_mut().for_each(|v| *v /= n as f64);
        Self { x_max, wavenumbers: wavenumbers(n, 2.0 * x_max / n as f64), coeffs: c }
    }

    /// `p`-th derivative of the interpolant at `x`.
    fn eval(&self, x: f64, p: u32) -> f64 {
        let t = x + self.x_max;
        let n = self.coeffs.len();
        self.coeffs
            .iter()
            .zip(&self.wavenumbers)
            .enumerate()
            .map(|(j, (c, &k))| {
                if p % 2 == 1 && j == n / 2 {
                    return 0.0;
                }
                let factor = Complex64::new(0.0, k).powu(p);
                (c * factor * Complex64::from_polar(1.0, k * t)).re
            })
            .sum()
    }
}

impl PotentialSpec {
    pub fn new(lambda: f64, kind: PotentialKind) -> Result<Self> {
        if !lambda.is_finite() {
            return Err(WfpError::InvalidParameter("lambda must be finite".into()));
        }
        let table = match &kind {
            PotentialKind::Sinusoidal { k0, amp } => {
                if k0.is_empty() || k0.len() > 2 || !amp.is_finite() || k0.iter().any(|k| !k.is_finite()) {
                    return Err(WfpError::InvalidParameter("sinusoidal potential needs 1 or 2 finite wave numbers".into()));
                }
                None
            }
            PotentialKind::GaussianBump { center, width, amp } => {
                if center.is_empty() || center.len() > 2 || !(*width > 0.0) || !amp.is_finite() {
                    return Err(WfpError::InvalidParameter("gaussian bump needs a centre of length 1 or 2 and width > 0".into()));
                }
                None
            }
            PotentialKind::Tabulated { x_max, samples } => {
                if samples.len() < 8 || samples.len() % 2 != 0 || !(*x_max > 0.0) {
                    return Err(WfpError::InvalidParameter("tabulated potential needs an even number (>= 8) of samples".into()));
                }
                if samples.iter().any(|v| !v.is_finite()) {
                    return Err(WfpError::InvalidParameter("tabulated samples must be finite".into()));
                }
                let edge = samples[0].abs().max(samples[samples.len() - 1].abs());
                if edge >= 1e-8 {
                    return Err(WfpError::InvalidParameter(format!(
                        "tabulated potential is {edge:.3e} at the box edge; it must decay below 1e-8"
                    )));
                }
                Some(TrigTable::new(*x_max, samples))
            }
            PotentialKind::Constant { value } if !value.is_finite() => {
                return Err(WfpError::InvalidParameter("constant potential must be finite".into()));
            }
            _ => None,
        };
        Ok(Self { lambda, kind, table })
    }

    /// No perturbation.
    pub fn none() -> Self {
        Self { lambda: 0.0, kind: PotentialKind::None, table: None }
    }

    /// `V_0 = sin(x)` in one dimension.
    pub fn sine(lambda: f64) -> Self {
        Self::new(lambda, PotentialKind::Sinusoidal { k0: vec![1.0], amp: 1.0 }).expect("valid")
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda, ..self.clone() }
    }

    /// Rebuilds derived tables after deserialization.
    pub fn validated(self) -> Result<Self> {
        Self::new(self.lambda, self.kind)
    }

    /// True if `Theta[V_0]` is identically zero.
    pub fn is_trivial(&self) -> bool {
        match &self.kind {
            PotentialKind::None | PotentialKind::Constant { .. } => true,
            PotentialKind::Quadratic { amp }
            | PotentialKind::Sinusoidal { amp, .. }
            | PotentialKind::GaussianBump { amp, .. } => *amp == 0.0,
            PotentialKind::Tabulated { samples, .. } => samples.iter().all(|&v| v == 0.0),
        }
    }

    /// Spatial dimension the potential is defined for, if fixed.
    pub fn dimension(&self) -> Option<usize> {
        match &self.kind {
            PotentialKind::Sinusoidal { k0, .. } => Some(k0.len()),
            PotentialKind::GaussianBump { center, .. } => Some(center.len()),
            PotentialKind::Tabulated { .. } => Some(1),
            _ => None,
        }
    }

    pub fn check_dimension(&self, d: usize) -> Result<()> {
        match self.dimension() {
            Some(k) if k != d => Err(WfpError::InvalidParameter(format!(
                "potential is {k}-dimensional but the grid has d = {d}"
            ))),
            _ => Ok(()),
        }
    }

    /// `V_0(x)`.
    pub fn v0(&self, x: &[f64]) -> f64 {
        match &self.kind {
            PotentialKind::None => 0.0,
            PotentialKind::Constant { value } => *value,
            PotentialKind::Quadratic { amp } => 0.5 * amp * x.iter().map(|v| v * v).sum::<f64>(),
            PotentialKind::Sinusoidal { k0, amp } => amp * dot(k0, x).sin(),
            PotentialKind::GaussianBump { center, width, amp } => {
                let r2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
                amp * (-r2 / (2.0 * width * width)).exp()
            }
            PotentialKind::Tabulated { .. } => self.table.as_ref().expect("table built").eval(x[0], 0),
        }
    }

    /// `sup |d^p V_0|` over all derivatives of total order `p`.
    pub fn deriv_sup(&self, p: u32) -> Result<f64> {
        Ok(match &self.kind {
            PotentialKind::None => 0.0,
            PotentialKind::Constant { value } => {
                if p == 0 {
                    value.abs()
                } else {
                    0.0
                }
            }
            PotentialKind::Quadratic { amp } => {
                if *amp == 0.0 {
                    0.0
                } else {
                    return Err(WfpError::Unsupported(
                        "quadratic potential has unbounded derivatives; Gamma_m is undefined".into(),
                    ));
                }
            }
            PotentialKind::Sinusoidal { k0, amp } => {
                let kmax = k0.iter().fold(0.0f64, |m, k| m.max(k.abs()));
                amp.abs() * kmax.powi(p as i32)
            }
            PotentialKind::GaussianBump { center, width, amp } => {
                let d = center.len();
                let one_d: Vec<f64> = (0..=p).map(|q| gaussian_derivative_sup(q) / width.powi(q as i32)).collect();
                let best = if d == 1 {
                    one_d[p as usize]
                } else {
                    (0..=p as usize).map(|q| one_d[q] * one_d[p as usize - q]).fold(0.0, f64::max)
                };
                amp.abs() * best
            }
            PotentialKind::Tabulated { samples, .. } => {
                let table = self.table.as_ref().expect("table built");
                let fine = 4 * samples.len();
                let h = 2.0 * table.x_max / fine as f64;
                let (i_best, coarse) = (0..fine)
                    .map(|i| table.eval(-table.x_max + i as f64 * h, p).abs())
                    .enumerate()
                    .fold((0, 0.0), |b, (i, v)| if v > b.1 { (i, v) } else { b });
                // Resolve the peak between neighbouring samples.
                let centre = -table.x_max + i_best as f64 * h;
                (0..=400)
                    .map(|k| table.eval(centre - h + 2.0 * h * k as f64 / 400.0, p).abs())
                    .fold(coarse, f64::max)
            }
        })
    }

    /// Snap sinusoidal wave numbers so that `k0 / 2` is a multiple of the
    /// momentum spacing; the induced shifts in `xi` then land on nodes.
    pub fn snapped_to(&self, grid: &GridSpec) -> Self {
        match &self.kind {
            PotentialKind::Sinusoidal { k0, amp } => {
                let step = 2.0 * grid.dxi();
                let k0 = k0.iter().map(|k| (k / step).round() * step).collect();
                Self::new(self.lambda, PotentialKind::Sinusoidal { k0, amp: *amp }).expect("valid")
            }
            _ => self.clone(),
        }
    }

    pub fn is_snapped(&self, grid: &GridSpec) -> bool {
        match &self.kind {
            PotentialKind::Sinusoidal { k0, .. } => k0.iter().all(|k| {
                let s = k / (2.0 * grid.dxi());
                (s - s.round()).abs() < 1e-9
            }),
            _ => false,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// `sup_t |d^q/dt^q exp(-t^2/2)|`, from probabilists' Hermite polynomials
/// sampled on a fine grid.
fn gaussian_derivative_sup(q: u32) -> f64 {
    if q == 0 {
        return 1.0;
    }
    let mut best = 0.0f64;
    let n = 24_001;
    for i in 0..n {
        let t = -12.0 + 24.0 * i as f64 / (n - 1) as f64;
        let (mut h0, mut h1) = (1.0, t);
        for k in 1..q {
            let h2 = t * h1 - k as f64 * h0;
            h0 = h1;
            h1 = h2;
        }
        best = best.max((h1 * (-t * t / 2.0).exp()).abs());
    }
    best
}

/// `V_0(x + eta/2) - V_0(x - eta/2)`.
pub fn delta_v(x: &[f64], eta: &[f64], spec: &PotentialSpec) -> f64 {
    match &spec.kind {
        PotentialKind::Sinusoidal { k0, amp } => 2.0 * amp * dot(k0, x).cos() * (0.5 * dot(k0, eta)).sin(),
        PotentialKind::Quadratic { amp } => amp * dot(x, eta),
        PotentialKind::None | PotentialKind::Constant { .. } => 0.0,
        _ => {
            let plus: Vec<f64> = x.iter().zip(eta).map(|(a, e)| a + 0.5 * e).collect();
            let minus: Vec<f64> = x.iter().zip(eta).map(|(a, e)| a - 0.5 * e).collect();
            spec.v0(&plus) - spec.v0(&minus)
        }
    }
}

/// Momentum-axis wavenumbers with their Nyquist flag.
fn eta_nodes(grid: &GridSpec) -> (Vec<f64>, usize) {
    (wavenumbers(grid.n_xi(), grid.dxi()), grid.n_xi() / 2)
}

/// Precomputed symbol table of `Theta` on one grid.
#[derive(Debug, Clone)]
pub struct ThetaOperator {
    grid: GridSpec,
    /// `dV` for every (x-node, eta-node) pair; zero on Nyquist modes.
    symbol: Vec<f64>,
    trivial: bool,
}

impl ThetaOperator {
    pub fn new(grid: GridSpec, spec: &PotentialSpec) -> Result<Self> {
        spec.check_dimension(grid.d())?;
        Self::from_symbol(grid, spec.is_trivial(), |x, eta| delta_v(x, eta, spec))
    }

    /// Operator with an arbitrary odd symbol `s(x, eta)`.
    pub fn from_symbol<S: Fn(&[f64], &[f64]) -> f64>(grid: GridSpec, trivial: bool, symbol: S) -> Result<Self> {
        let d = grid.d();
        let (eta, nyq) = eta_nodes(&grid);
        let block = grid.n_xi().pow(d as u32);
        let lines = grid.n_x().pow(d as u32);
        let mut table = vec![0.0; if trivial { 0 } else { lines * block }];
        if !trivial {
            for line in 0..lines {
                let x = grid.point(line * block);
                for j in 0..block {
                    let (e, any_nyq) = eta_vector(j, d, grid.n_xi(), &eta, nyq);
                    if !any_nyq {
                        table[line * block + j] = symbol(x.x(), &e[..d]);
                    }
                }
            }
        }
        Ok(Self { grid, symbol: table, trivial })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn is_trivial(&self) -> bool {
        self.trivial
    }

    /// Apply to raw samples; returns the real part and the relative imaginary residue.
    pub fn apply_values(&self, values: &[f64]) -> (Vec<f64>, f64) {
        if self.trivial {
            return (vec![0.0; values.len()], 0.0);
        }
        let d = self.grid.d();
        let block = self.grid.n_xi().pow(d as u32);
        let shape = vec![self.grid.n_xi(); d];
        let axes: Vec<usize> = (0..d).collect();
        let mut out = vec![0.0; values.len()];
        let residues: Vec<(f64, f64)> = out
            .par_chunks_mut(block)
            .zip(values.par_chunks(block))
            .zip(self.symbol.par_chunks(block))
            .map(|((dst, src), sym)| {
                let mut buf: Vec<Complex64> = src.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                fft_axes(&mut buf, &shape, &axes, false);
                for (b, s) in buf.iter_mut().zip(sym) {
                    // -i * s * b
                    *b = Complex64::new(s * b.im, -s * b.re);
                }
                fft_axes(&mut buf, &shape, &axes, true);
                let mut imag = 0.0f64;
                let mut real = 0.0f64;
                for (o, b) in dst.iter_mut().zip(&buf) {
                    *o = b.re;
                    imag = imag.max(b.im.abs());
                    real = real.max(b.re.abs());
                }
                (imag, real)
            })
            .collect();
        let (imag, real) = residues.iter().fold((0.0f64, 0.0f64), |(a, b), &(i, r)| (a.max(i), b.max(r)));
        let scale = real.max(values.iter().fold(0.0f64, |m, v| m.max(v.abs())) * 1e-300).max(f64::MIN_POSITIVE);
        (out, imag / scale)
    }

    /// `exp(tau Theta)` on raw samples: each momentum mode is multiplied
    /// by `exp(-i tau dV)`.
    pub fn exponential_values(&self, values: &[f64], tau: f64) -> Vec<f64> {
        if self.trivial {
            return values.to_vec();
        }
        let d = self.grid.d();
        let block = self.grid.n_xi().pow(d as u32);
        let shape = vec![self.grid.n_xi(); d];
        let axes: Vec<usize> = (0..d).collect();
        let mut out = vec![0.0; values.len()];
        out.par_chunks_mut(block)
            .zip(values.par_chunks(block))
            .zip(self.symbol.par_chunks(block))
            .for_each(|((dst, src), sym)| {
                let mut buf: Vec<Complex64> = src.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                fft_axes(&mut buf, &shape, &axes, false);
                for (b, s) in buf.iter_mut().zip(sym) {
                    *b *= Complex64::from_polar(1.0, -tau * s);
                }
                fft_axes(&mut buf, &shape, &axes, true);
                for (o, b) in dst.iter_mut().zip(&buf) {
                    *o = b.re;
                }
            });
        out
    }

    pub fn apply(&self, w: &WignerField) -> Result<WignerField> {
        self.grid.ensure_same(w.grid())?;
        let (out, residue) = self.apply_values(w.values());
        if residue > ALIASING_THRESHOLD {
            return Err(WfpError::Aliasing { residue, threshold: ALIASING_THRESHOLD });
        }
        w.with_values(out)
    }
}

/// Multi-index `j` (row-major over `d` momentum axes) to its wavevector.
fn eta_vector(j: usize, d: usize, n: usize, eta: &[f64], nyq: usize) -> ([f64; 2], bool) {
    let mut e = [0.0; 2];
    let mut rem = j;
    let mut any = false;
    for k in (0..d).rev() {
        let idx = rem % n;
        rem /= n;
        e[k] = eta[idx];
        any |= idx == nyq;
    }
    (e, any)
}

/// `Theta[V_0] w` by the partial Fourier transform.
pub fn apply_theta(w: &WignerField, spec: &PotentialSpec) -> Result<WignerField> {
    ThetaOperator::new(*w.grid(), spec)?.apply(w)
}

/// Same construction with an arbitrary symbol in place of `dV`.
pub fn apply_theta_with<S: Fn(&[f64], &[f64]) -> f64>(w: &WignerField, symbol: S) -> Result<WignerField> {
    ThetaOperator::from_symbol(*w.grid(), false, symbol)?.apply(w)
}

/// Direct double sum
/// `Theta f(x, xi_a) = N^{-d} sum_j sum_b dV(x, eta_j) sin(eta_j . (xi_a - xi_b)) f(x, xi_b)`,
/// the real form of the defining integral on the grid. Cost `O(N_x^d N_xi^{2d})`.
pub fn apply_theta_quadrature(w: &WignerField, spec: &PotentialSpec) -> Result<WignerField> {
    let grid = *w.grid();
    if grid.len() > QUADRATURE_MAX_POINTS {
        return Err(WfpError::Unsupported(format!(
            "quadrature oracle limited to {QUADRATURE_MAX_POINTS} points, grid has {}",
            grid.len()
        )));
    }
    spec.check_dimension(grid.d())?;
    if spec.is_trivial() {
        return Ok(WignerField::zeros(grid));
    }
    let d = grid.d();
    let n = grid.n_xi();
    let block = n.pow(d as u32);
    let (eta, nyq) = eta_nodes(&grid);
    let norm = 1.0 / block as f64;
    let dxi = grid.dxi();
    // Offsets s = a - b (mod n per axis) as integer vectors.
    let offsets: Vec<[i64; 2]> = (0..block)
        .map(|s| {
            let mut o = [0i64; 2];
            let mut rem = s;
            for k in (0..d).rev() {
                o[k] = (rem % n) as i64;
                rem /= n;
            }
            o
        })
        .collect();
    let mut out = vec![0.0; grid.len()];
    out.par_chunks_mut(block).enumerate().for_each(|(line, dst)| {
        let x = grid.point(line * block);
        let dv: Vec<(f64, [f64; 2])> = (0..block)
            .filter_map(|j| {
                let (e, any_nyq) = eta_vector(j, d, n, &eta, nyq);
                (!any_nyq).then(|| (delta_v(x.x(), &e[..d], spec), e))
            })
            .collect();
        let kernel: Vec<f64> = offsets
            .iter()
            .map(|o| {
                dv.iter()
                    .map(|(v, e)| {
                        let phase: f64 = (0..d).map(|k| e[k] * o[k] as f64 * dxi).sum();
                        v * phase.sin()
                    })
                    .sum::<f64>()
                    * norm
            })
            .collect();
        let src = &w.values()[line * block..(line + 1) * block];
        for (a, slot) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (b, f) in src.iter().enumerate() {
                acc += kernel[offset_index(a, b, d, n)] * f;
            }
            *slot = acc;
        }
    });
    w.with_values(out)
}

fn offset_index(a: usize, b: usize, d: usize, n: usize) -> usize {
    if d == 1 {
        return (a + n - b) % n;
    }
    let (a0, a1) = (a / n, a % n);
    let (b0, b1) = (b / n, b % n);
    ((a0 + n - b0) % n) * n + (a1 + n - b1) % n
}

/// Estimate of `||Theta||` on the discrete `H_m` of `grid`: Lanczos (an
/// accelerated power iteration) on `Theta^* Theta`, self-adjoint in the
/// weighted inner product. The largest Ritz value never exceeds the true
/// discrete norm, so the result is a lower bound.
///
/// Trial fields vanish in the outer shell of the box: the shifts `Theta`
/// induces in `xi` would otherwise wrap around the periodic box into regions
/// of very different weight.
pub fn gamma_m_estimate(spec: &PotentialSpec, m: u32, grid: &GridSpec) -> Result<f64> {
    let op = ThetaOperator::new(*grid, spec)?;
    if op.is_trivial() {
        return Ok(0.0);
    }
    let weight: Vec<f64> = grid.a_values().into_iter().map(|a| hm_weight(a, m)).collect();
    let dot_w = |u: &[f64], v: &[f64]| -> f64 {
        u.iter().zip(v).zip(&weight).map(|((a, b), w)| a * b * w).sum::<f64>()
    };
    // Theta^T = -Theta in the unweighted inner product, so the weighted
    // adjoint is -W^{-1} Theta W.
    let interior: Vec<f64> = grid.points().map(|p| if grid.in_outer_shell(&p) { 0.0 } else { 1.0 }).collect();
    let normal_op = |v: &[f64]| -> Vec<f64> {
        let masked: Vec<f64> = v.iter().zip(&interior).map(|(a, m)| a * m).collect();
        let (tv, _) = op.apply_values(&masked);
        let wtv: Vec<f64> = tv.iter().zip(&weight).map(|(a, w)| a * w).collect();
        let (twtv, _) = op.apply_values(&wtv);
        twtv.iter().zip(&weight).zip(&interior).map(|((a, w), m)| -a / w * m).collect()
    };
    let max_steps = (20_000_000 / grid.len()).clamp(10, 150);
    let mut q: Vec<f64> = random_smooth_field(*grid, 42, 6)
        .into_values()
        .into_iter()
        .zip(&interior)
        .map(|(a, m)| a * m)
        .collect();
    let n0 = dot_w(&q, &q).sqrt();
    q.iter_mut().for_each(|a| *a /= n0);
    let mut basis: Vec<Vec<f64>> = vec![q];
    let (mut alpha, mut beta): (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
    let mut history: Vec<f64> = Vec::new();
    for j in 0..max_steps {
        let mut z = normal_op(&basis[j]);
        alpha.push(dot_w(&z, &basis[j]));
        for _ in 0..2 {
            for qi in &basis {
                let c = dot_w(&z, qi);
                z.iter_mut().zip(qi).for_each(|(a, b)| *a -= c * b);
            }
        }
        let top = top_ritz_value(&alpha, &beta)?;
        history.push(top);
        let b = dot_w(&z, &z).sqrt();
        let settled = history.len() >= 4
            && history[history.len() - 4..].iter().all(|h| (h - top).abs() <= 1e-10 * top);
        if settled || b <= 1e-12 * top.max(1e-300) {
            return Ok(top.max(0.0).sqrt());
        }
        beta.push(b);
        z.iter_mut().for_each(|a| *a /= b);
        basis.push(z);
    }
    Err(WfpError::NoConvergence(format!(
        "Lanczos estimate of Gamma_{m} did not settle in {max_steps} steps (last {:.6e})",
        history.last().copied().unwrap_or(0.0).sqrt()
    )))
}

/// Largest eigenvalue of the symmetric tridiagonal matrix `(alpha, beta)`.
fn top_ritz_value(alpha: &[f64], beta: &[f64]) -> Result<f64> {
    let k = alpha.len();
    let t = faer::Mat::<f64>::from_fn(k, k, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j || j + 1 == i {
            beta[i.min(j)]
        } else {
            0.0
        }
    });
    let eig = t
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .map_err(|e| WfpError::NoConvergence(format!("tridiagonal eigensolve failed: {e:?}")))?;
    Ok(eig.last().copied().unwrap_or(0.0))
}

/// Analytic bound on `||Theta[V_0]||` in `H_m` from the Leibniz expansion.
///
/// With `D_p = sup |d^p V_0|` and `|d^k_eta dV| <= 2^{1-|k|} D_{|k|}`:
/// `||x^{m-j} xi^n Theta w|| <= S_n ||w||_{1+r^{2m}}`,
/// `S_n = sum_{k <= n} C(n,k) 2^{1-|k|} D_{|k|}`, and
/// `K^2 = 4 D_0^2 + sum_j C(m,j) sum_{|n|=j} c_{n,j} S_n^2` bounds `Theta` in the
/// weight `1 + r^{2m}`. Since `1 + A^m <= 1 + r^{2m} <= 12^m (1 + A^m)`, the
/// `H_m` bound is `12^{m/2} K`. For `m = 0` it is `2 D_0`.
pub fn gamma_m_bound(spec: &PotentialSpec, m: u32) -> Result<f64> {
    if spec.is_trivial() {
        return Ok(0.0);
    }
    let d = spec.dimension().unwrap_or(1);
    let dsup: Vec<f64> = (0..=m).map(|p| spec.deriv_sup(p)).collect::<Result<_>>()?;
    if m == 0 {
        return Ok(2.0 * dsup[0]);
    }
    let s_of = |n: &[u32]| -> f64 {
        let mut s = 0.0;
        let ranges: Vec<u32> = n.to_vec();
        let count: u32 = ranges.iter().map(|r| r + 1).product();
        for idx in 0..count {
            let mut rem = idx;
            let mut coeff = 1.0;
            let mut order = 0;
            for &nk in &ranges {
                let k = rem % (nk + 1);
                rem /= nk + 1;
                coeff *= binomial(nk, k);
                order += k;
            }
            s += coeff * 2f64.powi(1 - order as i32) * dsup[order as usize];
        }
        s
    };
    let mut k2 = 4.0 * dsup[0] * dsup[0];
    for j in 0..=m {
        let inner = if d == 1 {
            let s = s_of(&[j]);
            s * s
        } else {
            (0..=j)
                .map(|n1| {
                    let s = s_of(&[n1, j - n1]);
                    binomial(j, n1) * s * s
                })
                .sum()
        };
        k2 += binomial(m, j) * inner;
    }
    Ok(12f64.powf(m as f64 / 2.0) * k2.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::axis_derivative;
    use proptest::prelude::*;

    fn g64() -> GridSpec {
        GridSpec::new(1, 64, 64, 12.0, 8.0).unwrap()
    }

    fn rel_l2(a: &WignerField, b: &WignerField) -> f64 {
        a.sub(b).unwrap().norm_l2() / b.norm_l2()
    }

    #[test]
    fn delta_v_direct_values() {
        let c = PotentialSpec::new(0.1, PotentialKind::Constant { value: 3.0 }).unwrap();
        assert_eq!(delta_v(&[0.4], &[1.3], &c), 0.0);
        let q = PotentialSpec::new(1.0, PotentialKind::Quadratic { amp: 1.0 }).unwrap();
        assert_eq!(delta_v(&[0.4], &[1.5], &q), 0.4 * 1.5);
        let s = PotentialSpec::new(1.0, PotentialKind::Sinusoidal { k0: vec![1.7], amp: 0.8 }).unwrap();
        for (x, e) in [(0.0f64, 0.3f64), (1.1, -2.0), (-3.0, 5.5)] {
            let two_point = 0.8 * (1.7f64 * (x + e / 2.0)).sin() - 0.8 * (1.7f64 * (x - e / 2.0)).sin();
            assert!((delta_v(&[x], &[e], &s) - two_point).abs() < 1e-15);
        }
    }

    #[test]
    fn trivial_potentials_give_zero() {
        let w = random_smooth_field(g64(), 1, 3);
        for spec in [
            PotentialSpec::none(),
            PotentialSpec::new(1.0, PotentialKind::Sinusoidal { k0: vec![1.0], amp: 0.0 }).unwrap(),
            PotentialSpec::new(1.0, PotentialKind::Constant { value: 2.0 }).unwrap(),
        ] {
            assert_eq!(apply_theta(&w, &spec).unwrap().max_abs(), 0.0);
            assert_eq!(apply_theta_quadrature(&w, &spec).unwrap().max_abs(), 0.0);
        }
    }

    #[test]
    fn quadratic_symbol_is_classical_force() {
        let g = GridSpec::default_for(1, 128).unwrap();
        let w = WignerField::from_fn(g, |x, xi| (-(x[0] - 0.5).powi(2) - 2.0 * xi[0] * xi[0]).exp() * (1.0 + xi[0])).unwrap();
        let spec = PotentialSpec::new(1.0, PotentialKind::Quadratic { amp: 1.0 }).unwrap();
        let theta = apply_theta(&w, &spec).unwrap();
        let dxi = axis_derivative(w.values(), &g.shape(), 1, g.dxi());
        let expected: Vec<f64> = dxi.iter().enumerate().map(|(i, v)| -g.point(i).x()[0] * v).collect();
        let expected = w.with_values(expected).unwrap();
        assert!(rel_l2(&theta, &expected) < 1e-8);
    }

    #[test]
    fn fft_path_matches_quadrature_oracle() {
        let g = g64();
        let specs = [
            PotentialSpec::sine(1.0),
            PotentialSpec::new(1.0, PotentialKind::GaussianBump { center: vec![0.5], width: 1.0, amp: 1.0 }).unwrap(),
        ];
        for seed in 0..3 {
            let w = random_smooth_field(g, seed, 4);
            for spec in &specs {
                let fast = apply_theta(&w, spec).unwrap();
                let slow = apply_theta_quadrature(&w, spec).unwrap();
                assert!(rel_l2(&fast, &slow) < 1e-8, "seed {seed}");
                assert!(slow.mass().abs() < 1e-8);
            }
        }
    }

    #[test]
    fn fft_path_matches_quadrature_oracle_in_two_dimensions() {
        let g = GridSpec::new(2, 16, 16, 12.0, 8.0).unwrap();
        let spec = PotentialSpec::new(1.0, PotentialKind::Sinusoidal { k0: vec![1.0, 0.5], amp: 1.0 }).unwrap();
        let w = random_smooth_field(g, 5, 3);
        let fast = apply_theta(&w, &spec).unwrap();
        let slow = apply_theta_quadrature(&w, &spec).unwrap();
        assert!(rel_l2(&fast, &slow) < 1e-10);
    }

    #[test]
    fn quadrature_refuses_large_grids() {
        let g = GridSpec::new(1, 2048, 1024, 12.0, 8.0).unwrap();
        let w = WignerField::zeros(g);
        assert!(matches!(apply_theta_quadrature(&w, &PotentialSpec::sine(1.0)), Err(WfpError::Unsupported(_))));
    }

    #[test]
    fn output_has_zero_mass_for_all_kinds() {
        let g = GridSpec::default_for(1, 128).unwrap();
        let n = g.n_x();
        let samples: Vec<f64> = (0..n).map(|i| (-(g.x_coord(i) / 2.0).powi(2)).exp() * 0.3).collect();
        let specs = [
            PotentialSpec::sine(1.0),
            PotentialSpec::new(1.0, PotentialKind::GaussianBump { center: vec![-1.0], width: 0.7, amp: 2.0 }).unwrap(),
            PotentialSpec::new(1.0, PotentialKind::Tabulated { x_max: g.x_max(), samples }).unwrap(),
        ];
        let w = random_smooth_field(g, 9, 5);
        for s in &specs {
            assert!(apply_theta(&w, s).unwrap().mass().abs() < 1e-8);
        }
    }

    #[test]
    fn tabulated_gaussian_matches_analytic_bump() {
        let g = GridSpec::default_for(1, 128).unwrap();
        let samples: Vec<f64> = (0..g.n_x()).map(|i| (-g.x_coord(i).powi(2) / 2.0).exp()).collect();
        let tab = PotentialSpec::new(1.0, PotentialKind::Tabulated { x_max: g.x_max(), samples }).unwrap();
        let bump = PotentialSpec::new(1.0, PotentialKind::GaussianBump { center: vec![0.0], width: 1.0, amp: 1.0 }).unwrap();
        for x in [0.0, 0.37, -2.2, 4.05] {
            assert!((tab.v0(&[x]) - bump.v0(&[x])).abs() < 1e-10);
        }
        for p in 0..4 {
            assert!((tab.deriv_sup(p).unwrap() - bump.deriv_sup(p).unwrap()).abs() < 1e-4);
        }
    }

    #[test]
    fn tabulated_must_decay() {
        let samples = vec![1.0; 16];
        assert!(PotentialSpec::new(1.0, PotentialKind::Tabulated { x_max: 5.0, samples }).is_err());
    }

    #[test]
    fn gaussian_derivative_sups_match_known_values() {
        // sup |g'| = e^{-1/2}, sup |g''| = 1 at t = 0.
        assert!((gaussian_derivative_sup(1) - (-0.5f64).exp()).abs() < 1e-6);
        assert!((gaussian_derivative_sup(2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gamma_estimates_and_bounds() {
        let g = g64();
        let zero = PotentialSpec::new(1.0, PotentialKind::Sinusoidal { k0: vec![1.0], amp: 0.0 }).unwrap();
        assert_eq!(gamma_m_estimate(&zero, 2, &g).unwrap(), 0.0);
        assert_eq!(gamma_m_bound(&zero, 2).unwrap(), 0.0);
        let spec = PotentialSpec::sine(1.0);
        assert_eq!(gamma_m_bound(&spec, 0).unwrap(), 2.0);
        assert!(gamma_m_estimate(&spec, 0, &g).unwrap() <= 2.0 + 1e-6);
        let est = gamma_m_estimate(&spec, 2, &GridSpec::default_for(1, 128).unwrap()).unwrap();
        assert!(est.is_finite() && est > 0.0);
        assert!(gamma_m_bound(&spec, 2).unwrap() >= est);
    }

    #[test]
    fn gamma_estimate_stable_under_refinement() {
        let spec = PotentialSpec::sine(1.0);
        let coarse = gamma_m_estimate(&spec, 2, &GridSpec::new(1, 64, 64, 12.0, 8.0).unwrap()).unwrap();
        let fine = gamma_m_estimate(&spec, 2, &GridSpec::new(1, 128, 128, 12.0, 8.0).unwrap()).unwrap();
        assert!((coarse - fine).abs() / fine < 0.01, "{coarse} vs {fine}");
    }

    #[test]
    fn quadratic_potential_has_no_gamma_bound() {
        let q = PotentialSpec::new(1.0, PotentialKind::Quadratic { amp: 1.0 }).unwrap();
        assert!(gamma_m_bound(&q, 2).is_err());
    }

    #[test]
    fn snapping_puts_half_wavenumber_on_momentum_nodes() {
        let g = GridSpec::default_for(1, 256).unwrap();
        let spec = PotentialSpec::sine(0.1);
        assert!(!spec.is_snapped(&g));
        let s = spec.snapped_to(&g);
        assert!(s.is_snapped(&g));
        assert!(spec.is_snapped(&GridSpec::default_for(1, 128).unwrap()));
    }

    #[test]
    fn bound_dominates_random_field_ratios() {
        let g = g64();
        let spec = PotentialSpec::new(1.0, PotentialKind::GaussianBump { center: vec![0.3], width: 0.9, amp: 1.5 }).unwrap();
        let op = ThetaOperator::new(g, &spec).unwrap();
        for m in [0, 2, 4] {
            let bound = gamma_m_bound(&spec, m).unwrap();
            for seed in 0..100 {
                let w = random_smooth_field(g, seed, 3);
                let tw = op.apply(&w).unwrap();
                assert!(tw.norm_hm(m) <= bound * w.norm_hm(m));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn theta_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, s1 in 0u64..1000, s2 in 0u64..1000) {
            let g = GridSpec::new(1, 32, 32, 12.0, 8.0).unwrap();
            let spec = PotentialSpec::sine(1.0);
            let f = random_smooth_field(g, s1, 3);
            let h = random_smooth_field(g, s2, 3);
            let combo = f.scaled(a).add_scaled(&h, b).unwrap();
            let lhs = apply_theta(&combo, &spec).unwrap();
            let rhs = apply_theta(&f, &spec).unwrap().scaled(a)
                .add_scaled(&apply_theta(&h, &spec).unwrap(), b).unwrap();
            let scale = lhs.max_abs().max(rhs.max_abs()).max(1e-300);
            prop_assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-13 * scale.max(1.0));
        }
    }
}
