//! Truncated uniform phase-space grid, Wigner fields, the quadratic form `A`,
//! the equilibrium `mu = c exp(-A)`, the rotation field `F`, the weighted
//! norms of `H` and `H_m`, and the `WFPF` binary field format.
//!
//! Field layout: axes `(x_1..x_d, xi_1..xi_d)`, row-major, node `i` of an
//! axis sits at `-half_width + i * spacing` on a periodic box.

use crate::error::{Result, WfpError};
use crate::numerics::{compensated_sum, halton, normal_upper_tail, CompensatedSum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::{Read, Write};

/// Bakry-Emery convexity constant of the standard `A`.
pub const SIGMA: f64 = 1.0 - FRAC_1_SQRT_2;

/// Maximum admissible mass of `mu` outside the box.
pub const TAIL_MASS_LIMIT: f64 = 1e-10;

/// Fields must stay below this magnitude in the outer shell of the box.
pub const SHELL_LIMIT: f64 = 1e-8;

/// Relative thickness of the outer shell.
pub const SHELL_FRACTION: f64 = 0.1;

/// Per-dimension quadratic form `A(x, xi) = p11 x^2 + 2 p12 x xi + p22 xi^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFormA {
    pub p11: f64,
    pub p12: f64,
    pub p22: f64,
}

impl Default for QuadraticFormA {
    fn default() -> Self {
        Self::standard()
    }
}

impl QuadraticFormA {
    /// `A = (|x|^2 + 2 x.xi + 3 |xi|^2) / 4`.
    pub fn standard() -> Self {
        Self { p11: 0.25, p12: 0.25, p22: 0.75 }
    }

    pub fn new(p11: f64, p12: f64, p22: f64) -> Result<Self> {
        if !(p11 > 0.0 && p11 * p22 - p12 * p12 > 0.0) {
            return Err(WfpError::InvalidParameter(
                "quadratic form must be positive definite".into(),
            ));
        }
        Ok(Self { p11, p12, p22 })
    }

    pub fn coefficient_matrix(&self) -> [[f64; 2]; 2] {
        [[self.p11, self.p12], [self.p12, self.p22]]
    }

    pub fn eval(&self, x: &[f64], xi: &[f64]) -> f64 {
        x.iter()
            .zip(xi)
            .map(|(&a, &b)| self.eval_pair(a, b))
            .sum()
    }

    #[inline]
    pub fn eval_pair(&self, x: f64, xi: f64) -> f64 {
        self.p11 * x * x + 2.0 * self.p12 * x * xi + self.p22 * xi * xi
    }

    /// `(dA/dx, dA/dxi)` for one dimension pair.
    #[inline]
    pub fn gradient_pair(&self, x: f64, xi: f64) -> (f64, f64) {
        (
            2.0 * (self.p11 * x + self.p12 * xi),
            2.0 * (self.p12 * x + self.p22 * xi),
        )
    }

    pub fn grad_norm_sq(&self, x: &[f64], xi: &[f64]) -> f64 {
        x.iter()
            .zip(xi)
            .map(|(&a, &b)| {
                let (gx, gxi) = self.gradient_pair(a, b);
                gx * gx + gxi * gxi
            })
            .sum()
    }

    pub fn laplacian(&self, d: usize) -> f64 {
        2.0 * (self.p11 + self.p22) * d as f64
    }

    fn eigenvalues(&self) -> (f64, f64) {
        let tr = self.p11 + self.p22;
        let det = self.p11 * self.p22 - self.p12 * self.p12;
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        (tr / 2.0 - disc, tr / 2.0 + disc)
    }

    /// Smallest eigenvalue of `Hess A`.
    pub fn sigma(&self) -> f64 {
        2.0 * self.eigenvalues().0
    }

    /// Largest eigenvalue of the coefficient matrix.
    pub fn max_coefficient_eigenvalue(&self) -> f64 {
        self.eigenvalues().1
    }

    /// `c` with `c * integral exp(-A) = 1` over `R^{2d}`.
    pub fn normalization(&self, d: usize) -> f64 {
        let det = self.p11 * self.p22 - self.p12 * self.p12;
        det.powf(d as f64 / 2.0) / PI.powi(d as i32)
    }

    /// Covariance `(2P)^{-1}` of the normalized `exp(-A)`.
    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let det = 4.0 * (self.p11 * self.p22 - self.p12 * self.p12);
        [
            [2.0 * self.p22 / det, -2.0 * self.p12 / det],
            [-2.0 * self.p12 / det, 2.0 * self.p11 / det],
        ]
    }

    /// Rotation field `F = (-xi, x + 2 xi) - grad A` for one dimension pair.
    #[inline]
    pub fn rotation_pair(&self, x: f64, xi: f64) -> (f64, f64) {
        let (gx, gxi) = self.gradient_pair(x, xi);
        (-xi - gx, x + 2.0 * xi - gxi)
    }
}

/// `A(x, xi)` for the standard form.
pub fn eval_a(x: &[f64], xi: &[f64]) -> f64 {
    QuadraticFormA::standard().eval(x, xi)
}

/// `mu(x, xi) = c exp(-A)`, dimension taken from the length of `x`.
pub fn eval_mu(x: &[f64], xi: &[f64]) -> f64 {
    let a = QuadraticFormA::standard();
    a.normalization(x.len()) * (-a.eval(x, xi)).exp()
}

/// `F(x, xi)` as `(F_x, F_xi)` concatenated.
pub fn eval_f(x: &[f64], xi: &[f64]) -> Vec<f64> {
    let a = QuadraticFormA::standard();
    let (fx, fxi): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(xi)
        .map(|(&p, &q)| a.rotation_pair(p, q))
        .unzip();
    fx.into_iter().chain(fxi).collect()
}

/// Normalization constant of `mu` in dimension `d`.
pub fn mu_normalization(d: usize) -> f64 {
    QuadraticFormA::standard().normalization(d)
}

/// A phase-space point with `d` position and `d` momentum coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    d: usize,
    x: [f64; 2],
    xi: [f64; 2],
}

impl Point {
    pub fn new(x: &[f64], xi: &[f64]) -> Self {
        let mut p = Self { d: x.len(), x: [0.0; 2], xi: [0.0; 2] };
        p.x[..x.len()].copy_from_slice(x);
        p.xi[..xi.len()].copy_from_slice(xi);
        p
    }

    pub fn x(&self) -> &[f64] {
        &self.x[..self.d]
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi[..self.d]
    }

    pub fn radius_sq(&self) -> f64 {
        self.x().iter().chain(self.xi()).map(|v| v * v).sum()
    }
}

/// Uniform periodic phase-space grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    d: usize,
    n_x: usize,
    n_xi: usize,
    x_max: f64,
    xi_max: f64,
}

impl GridSpec {
    pub fn new(d: usize, n_x: usize, n_xi: usize, x_max: f64, xi_max: f64) -> Result<Self> {
        let g = Self::new_unchecked(d, n_x, n_xi, x_max, xi_max)?;
        let tail = g.mu_tail_mass();
        if tail >= TAIL_MASS_LIMIT {
            return Err(WfpError::InvalidGrid(format!(
                "mass of mu outside the box is {tail:.3e} (limit {TAIL_MASS_LIMIT:.0e}); enlarge x_max/xi_max"
            )));
        }
        Ok(g)
    }

    /// Structural validation only, without the tail-mass requirement.
    pub fn new_unchecked(d: usize, n_x: usize, n_xi: usize, x_max: f64, xi_max: f64) -> Result<Self> {
        if d != 1 && d != 2 {
            return Err(WfpError::InvalidGrid(format!("d must be 1 or 2, got {d}")));
        }
        for (name, n) in [("n_x", n_x), ("n_xi", n_xi)] {
            if n < 8 || n % 2 != 0 {
                return Err(WfpError::InvalidGrid(format!("{name} must be even and >= 8, got {n}")));
            }
        }
        if !(x_max > 0.0 && xi_max > 0.0 && x_max.is_finite() && xi_max.is_finite()) {
            return Err(WfpError::InvalidGrid("half-widths must be positive and finite".into()));
        }
        Ok(Self { d, n_x, n_xi, x_max, xi_max })
    }

    /// Default box for `n` points per axis: half-widths `12` in position and
    /// `8` in momentum, growing like `sqrt(n / 128)` beyond 128 points.
    pub fn default_for(d: usize, n: usize) -> Result<Self> {
        let s = (n as f64 / 128.0).sqrt().max(1.0);
        Self::new(d, n, n, 12.0 * s, 8.0 * s)
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn n_x(&self) -> usize {
        self.n_x
    }
    pub fn n_xi(&self) -> usize {
        self.n_xi
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn xi_max(&self) -> f64 {
        self.xi_max
    }
    pub fn dx(&self) -> f64 {
        2.0 * self.x_max / self.n_x as f64
    }
    pub fn dxi(&self) -> f64 {
        2.0 * self.xi_max / self.n_xi as f64
    }

    pub fn len(&self) -> usize {
        self.n_x.pow(self.d as u32) * self.n_xi.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.n_x; self.d];
        s.extend(std::iter::repeat_n(self.n_xi, self.d));
        s
    }

    pub fn x_axes(&self) -> Vec<usize> {
        (0..self.d).collect()
    }

    pub fn xi_axes(&self) -> Vec<usize> {
        (self.d..2 * self.d).collect()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        if axis < self.d {
            self.dx()
        } else {
            self.dxi()
        }
    }

    pub fn cell_volume(&self) -> f64 {
        (self.dx() * self.dxi()).powi(self.d as i32)
    }

    pub fn x_coord(&self, i: usize) -> f64 {
        -self.x_max + i as f64 * self.dx()
    }

    pub fn xi_coord(&self, j: usize) -> f64 {
        -self.xi_max + j as f64 * self.dxi()
    }

    pub fn x_nodes(&self) -> Vec<f64> {
        (0..self.n_x).map(|i| self.x_coord(i)).collect()
    }

    pub fn xi_nodes(&self) -> Vec<f64> {
        (0..self.n_xi).map(|j| self.xi_coord(j)).collect()
    }

    /// Coordinates of the node with flat index `idx`.
    pub fn point(&self, idx: usize) -> Point {
        let mut rem = idx;
        let mut xi = [0.0; 2];
        let mut x = [0.0; 2];
        for k in (0..self.d).rev() {
            xi[k] = self.xi_coord(rem % self.n_xi);
            rem /= self.n_xi;
        }
        for k in (0..self.d).rev() {
            x[k] = self.x_coord(rem % self.n_x);
            rem /= self.n_x;
        }
        Point { d: self.d, x, xi }
    }

    pub fn points(&self) -> impl Iterator<Item = Point> + '_ {
        (0..self.len()).map(move |i| self.point(i))
    }

    /// Samples of `A` at every node.
    pub fn a_values(&self) -> Vec<f64> {
        let a = QuadraticFormA::standard();
        self.points().map(|p| a.eval(p.x(), p.xi())).collect()
    }

    /// Upper bound (union over marginals) on the mass of `mu` outside the box.
    pub fn mu_tail_mass(&self) -> f64 {
        let cov = QuadraticFormA::standard().covariance();
        let per_dim = 2.0 * normal_upper_tail(self.x_max, cov[0][0])
            + 2.0 * normal_upper_tail(self.xi_max, cov[1][1]);
        self.d as f64 * per_dim
    }

    /// True if the node lies in the outer shell of the box.
    pub fn in_outer_shell(&self, p: &Point) -> bool {
        let xs = (1.0 - SHELL_FRACTION) * self.x_max;
        let ps = (1.0 - SHELL_FRACTION) * self.xi_max;
        p.x().iter().any(|v| v.abs() >= xs) || p.xi().iter().any(|v| v.abs() >= ps)
    }

    pub fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self != other {
            return Err(WfpError::GridMismatch(format!("{self:?} vs {other:?}")));
        }
        Ok(())
    }
}

/// Real samples of a Wigner function on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WignerField {
    grid: GridSpec,
    values: Vec<f64>,
}

impl WignerField {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(WfpError::InvalidField(format!(
                "expected {} samples, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(WfpError::InvalidField(format!("non-finite sample at index {i}")));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self { grid, values: vec![0.0; grid.len()] }
    }

    pub fn from_fn<F: Fn(&[f64], &[f64]) -> f64>(grid: GridSpec, f: F) -> Result<Self> {
        let values = grid.points().map(|p| f(p.x(), p.xi())).collect();
        Self::new(grid, values)
    }

    /// The equilibrium `mu` sampled on the grid.
    pub fn mu(grid: GridSpec) -> Self {
        let form = QuadraticFormA::standard();
        let c = form.normalization(grid.d());
        let values = grid.points().map(|p| c * (-form.eval(p.x(), p.xi())).exp()).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Replace the samples, keeping the grid; checks length and finiteness.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.grid, values)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { grid: self.grid, values: self.values.iter().map(|v| v * s).collect() }
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, other: &WignerField, s: f64) -> Result<Self> {
        self.grid.ensure_same(&other.grid)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + s * b).collect();
        Ok(Self { grid: self.grid, values })
    }

    pub fn sub(&self, other: &WignerField) -> Result<Self> {
        self.add_scaled(other, -1.0)
    }

    /// Midpoint quadrature of the field over the box.
    pub fn mass(&self) -> f64 {
        compensated_sum(self.values.iter().copied()) * self.grid.cell_volume()
    }

    pub fn norm_l2(&self) -> f64 {
        (compensated_sum(self.values.iter().map(|v| v * v)) * self.grid.cell_volume()).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `integral f g (1 + A^m)`.
    pub fn inner_hm(&self, other: &WignerField, m: u32) -> Result<f64> {
        self.grid.ensure_same(&other.grid)?;
        let form = QuadraticFormA::standard();
        let mut acc = CompensatedSum::new();
        for (i, (f, g)) in self.values.iter().zip(&other.values).enumerate() {
            let p = self.grid.point(i);
            acc.add(f * g * hm_weight(form.eval(p.x(), p.xi()), m));
        }
        Ok(acc.value() * self.grid.cell_volume())
    }

    pub fn norm_hm(&self, m: u32) -> f64 {
        self.inner_hm(self, m).expect("same grid").max(0.0).sqrt()
    }

    /// `sqrt(integral w^2 / mu)`, accumulated in the log domain.
    pub fn norm_h(&self) -> Result<f64> {
        self.norm_h_region(f64::INFINITY)
    }

    /// H-norm restricted to the ellipse `A <= a_cut`, where the Gaussian
    /// weight of discretization noise stays bounded.
    pub fn norm_h_truncated(&self, a_cut: f64) -> Result<f64> {
        self.norm_h_region(a_cut)
    }

    fn norm_h_region(&self, a_cut: f64) -> Result<f64> {
        let form = QuadraticFormA::standard();
        let log_c = form.normalization(self.grid.d()).ln();
        let log_cell = self.grid.cell_volume().ln();
        let mut logs = Vec::with_capacity(self.values.len());
        for (i, &w) in self.values.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let p = self.grid.point(i);
            let a = form.eval(p.x(), p.xi());
            if a > a_cut {
                continue;
            }
            let l = 2.0 * w.abs().ln() + a - log_c + log_cell;
            if !l.is_finite() {
                return Err(WfpError::Overflow(format!("log contribution {l} at node {i}")));
            }
            logs.push(l);
        }
        if logs.is_empty() {
            return Ok(0.0);
        }
        let lmax = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s = compensated_sum(logs.iter().map(|l| (l - lmax).exp()));
        let log_norm = 0.5 * (lmax + s.ln());
        if log_norm > f64::MAX.ln() {
            return Err(WfpError::Overflow(format!("H-norm exp({log_norm:.1}) not representable")));
        }
        Ok(log_norm.exp())
    }

    /// `integral f g / mu` over nodes with `A <= a_cut`; every term is formed
    /// in the log domain.
    pub fn inner_h(&self, other: &WignerField, a_cut: f64) -> Result<f64> {
        self.grid.ensure_same(&other.grid)?;
        let form = QuadraticFormA::standard();
        let log_c = form.normalization(self.grid.d()).ln();
        let mut acc = CompensatedSum::new();
        for (i, (f, g)) in self.values.iter().zip(&other.values).enumerate() {
            let prod = f * g;
            if prod == 0.0 {
                continue;
            }
            let p = self.grid.point(i);
            let a = form.eval(p.x(), p.xi());
            if a > a_cut {
                continue;
            }
            let l = f.abs().ln() + g.abs().ln() + a - log_c;
            if l > f64::MAX.ln() {
                return Err(WfpError::Overflow(format!("H inner product term exp({l:.1}) at node {i}")));
            }
            acc.add(prod.signum() * l.exp());
        }
        Ok(acc.value() * self.grid.cell_volume())
    }

    /// Largest magnitude in the outer shell of the box.
    pub fn shell_max(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .filter(|(i, _)| self.grid.in_outer_shell(&self.grid.point(*i)))
            .fold(0.0, |m, (_, v)| m.max(v.abs()))
    }

    /// Rejects fields that are not negligible near the periodic boundary.
    pub fn check_shell(&self) -> Result<()> {
        let s = self.shell_max();
        if s >= SHELL_LIMIT {
            return Err(WfpError::InvalidField(format!(
                "field reaches {s:.3e} in the outer shell (limit {SHELL_LIMIT:.0e})"
            )));
        }
        Ok(())
    }

    /// Serialize in the `WFPF` little-endian format.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        write_header(&mut out, FIELD_MAGIC, &self.grid)?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let grid = read_header(&mut input, FIELD_MAGIC)?;
        let mut values = Vec::with_capacity(grid.len());
        let mut buf = [0u8; 8];
        for _ in 0..grid.len() {
            input.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        Self::new(grid, values)
    }
}

/// `1 + A^m`.
#[inline]
pub fn hm_weight(a: f64, m: u32) -> f64 {
    1.0 + a.powi(m as i32)
}

pub(crate) const FIELD_MAGIC: &[u8; 4] = b"WFPF";
pub(crate) const FORMAT_VERSION: u32 = 1;

pub(crate) fn write_header<W: Write>(out: &mut W, magic: &[u8; 4], grid: &GridSpec) -> Result<()> {
    out.write_all(magic)?;
    for v in [FORMAT_VERSION, grid.d as u32, grid.n_x as u32, grid.n_xi as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&grid.x_max.to_le_bytes())?;
    out.write_all(&grid.xi_max.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_header<R: Read>(input: &mut R, magic: &[u8; 4]) -> Result<GridSpec> {
    let mut m = [0u8; 4];
    input.read_exact(&mut m)?;
    if &m != magic {
        return Err(WfpError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut u = [0u8; 4];
    let mut next_u32 = |input: &mut R| -> Result<u32> {
        input.read_exact(&mut u)?;
        Ok(u32::from_le_bytes(u))
    };
    let version = next_u32(input)?;
    if version != FORMAT_VERSION {
        return Err(WfpError::Format(format!("unsupported format version {version}")));
    }
    let d = next_u32(input)? as usize;
    let n_x = next_u32(input)? as usize;
    let n_xi = next_u32(input)? as usize;
    let mut f = [0u8; 8];
    input.read_exact(&mut f)?;
    let x_max = f64::from_le_bytes(f);
    input.read_exact(&mut f)?;
    let xi_max = f64::from_le_bytes(f);
    GridSpec::new_unchecked(d, n_x, n_xi, x_max, xi_max)
}

/// Quasi-random sample set for pointwise inequality checks: `count`
/// Halton points in `[-radius, radius]^{2d}` with a seeded random shift.
pub fn inequality_sample_points(d: usize, count: usize, radius: f64, seed: u64) -> Vec<Point> {
    let dim = 2 * d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
    (0..count as u64)
        .map(|i| {
            let h = halton(i, dim);
            let c: Vec<f64> = (0..dim)
                .map(|k| ((h[k] + shift[k]).fract() * 2.0 - 1.0) * radius)
                .collect();
            Point::new(&c[..d], &c[d..])
        })
        .collect()
}

/// Points on the sphere `|x|^2 + |xi|^2 = r2`.
pub fn sphere_points(d: usize, r2: f64, count: usize) -> Vec<Point> {
    let r = r2.sqrt();
    (0..count)
        .map(|i| {
            if d == 1 {
                let t = 2.0 * PI * i as f64 / count as f64;
                Point::new(&[r * t.cos()], &[r * t.sin()])
            } else {
                let h = halton(i as u64, 3);
                let (a, b, c) = (2.0 * PI * h[0], 2.0 * PI * h[1], h[2].sqrt());
                let s = (1.0 - c * c).sqrt();
                Point::new(&[r * c * a.cos(), r * c * a.sin()], &[r * s * b.cos(), r * s * b.sin()])
            }
        })
        .collect()
}

/// Smooth, rapidly decaying random field: a sum of `blobs` Gaussian bumps
/// with centres in the cube `|z_k| <= 1.5 / sqrt(2d)` and widths in `[0.5, 0.9]`.
pub fn random_smooth_field(grid: GridSpec, seed: u64, blobs: usize) -> WignerField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = grid.d();
    let params: Vec<(Vec<f64>, f64, f64)> = (0..blobs)
        .map(|_| {
            let centre: Vec<f64> = (0..2 * d).map(|_| rng.random_range(-1.5..1.5) / (2.0 * d as f64).sqrt()).collect();
            let width = rng.random_range(0.5..0.9);
            let amp = rng.random_range(-1.0..1.0);
            (centre, width, amp)
        })
        .collect();
    let values = grid
        .points()
        .map(|p| {
            let z: Vec<f64> = p.x().iter().chain(p.xi()).copied().collect();
            params
                .iter()
                .map(|(c, w, a)| {
                    let r2: f64 = z.iter().zip(c).map(|(u, v)| (u - v) * (u - v)).sum();
                    a * (-r2 / (2.0 * w * w)).exp()
                })
                .sum()
        })
        .collect();
    WignerField { grid, values }
}

/// `mu` times a random smooth field: decays like `mu`, so it lies in `H`.
pub fn random_h_field(grid: GridSpec, seed: u64, blobs: usize) -> WignerField {
    let base = random_smooth_field(grid, seed, blobs);
    let mu = WignerField::mu(grid);
    let values = base.values.iter().zip(mu.values()).map(|(b, m)| b * m).collect();
    WignerField { grid, values }
}

/// Fields of the form `mu * p` for a polynomial `p`, evaluated pointwise.
pub fn mu_times<F: Fn(&[f64], &[f64]) -> f64>(grid: GridSpec, p: F) -> WignerField {
    let mu = WignerField::mu(grid);
    let values = grid
        .points()
        .zip(mu.values())
        .map(|(pt, m)| m * p(pt.x(), pt.xi()))
        .collect();
    WignerField { grid, values }
}
