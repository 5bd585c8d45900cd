//! Density-matrix kernels `rho(x, y)` of one-dimensional Wigner fields.
//!
//! `rho(x, y) = integral w((x + y)/2, xi) exp(-i xi (x - y)) dxi`. Midpoints
//! with `i + j` odd fall halfway between grid nodes; those rows of `w` are
//! obtained by trigonometric interpolation, as are the half-shifted kernel
//! entries needed by the inverse transform. The momentum quadrature only
//! resolves separations `|x - y| < pi / dxi`; entries beyond are set to zero.

use crate::error::{Result, WfpError};
use crate::fourier::{fft_axis, wavenumbers};
use crate::phase_grid::{read_header, write_header, GridSpec, WignerField};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::PI;
use std::io::{Read, Write};

pub(crate) const KERNEL_MAGIC: &[u8; 4] = b"WFPR";

/// Allowed `max |rho_ij - conj(rho_ji)|`, relative to `max(1, max |rho|)`.
pub const HERMITIAN_TOLERANCE: f64 = 1e-10;

/// Kernel values `rho(x_i, x_j)` on the position nodes of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrixKernel {
    grid: GridSpec,
    entries: Vec<Complex64>,
}

impl DensityMatrixKernel {
    /// Row-major `n x n` entries on the position nodes of `grid`.
    pub fn new(grid: GridSpec, entries: Vec<Complex64>) -> Result<Self> {
        if grid.d() != 1 {
            return Err(WfpError::Unsupported("density matrices need d = 1".into()));
        }
        let n = grid.n_x();
        if entries.len() != n * n {
            return Err(WfpError::InvalidField(format!("expected {} kernel entries, got {}", n * n, entries.len())));
        }
        if entries.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(WfpError::InvalidField("non-finite kernel entry".into()));
        }
        Ok(Self { grid, entries })
    }

    pub fn from_fn<F: Fn(f64, f64) -> Complex64>(grid: GridSpec, f: F) -> Result<Self> {
        let nodes = grid.x_nodes();
        let entries = nodes.iter().flat_map(|&x| nodes.iter().map(move |&y| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self::new(grid, entries)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.grid.n_x()
    }

    pub fn dx(&self) -> f64 {
        self.grid.dx()
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.entries[i * self.n() + j]
    }

    /// `max |rho_ij - conj(rho_ji)|`.
    pub fn hermiticity_error(&self) -> f64 {
        let n = self.n();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i).conj()).norm());
            }
            worst = worst.max(self.get(i, i).im.abs());
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    fn check_hermitian(&self) -> Result<()> {
        let err = self.hermiticity_error();
        let limit = HERMITIAN_TOLERANCE * self.max_abs().max(1.0);
        if err > limit {
            return Err(WfpError::InvalidField(format!("kernel is not Hermitian (defect {err:.3e})")));
        }
        Ok(())
    }

    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        write_header(&mut out, KERNEL_MAGIC, &self.grid)?;
        for z in &self.entries {
            out.write_all(&z.re.to_le_bytes())?;
            out.write_all(&z.im.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let grid = read_header(&mut input, KERNEL_MAGIC)?;
        let n = grid.n_x();
        let mut entries = Vec::with_capacity(n * n);
        let mut buf = [0u8; 8];
        for _ in 0..n * n {
            input.read_exact(&mut buf)?;
            let re = f64::from_le_bytes(buf);
            input.read_exact(&mut buf)?;
            entries.push(Complex64::new(re, f64::from_le_bytes(buf)));
        }
        Self::new(grid, entries)
    }
}

/// Shift samples along `axis` by half a cell: `f(x + h/2)`.
fn half_shift(data: &mut [Complex64], shape: &[usize], axis: usize, h: f64) {
    let n = shape[axis];
    let k = wavenumbers(n, h);
    let phase: Vec<Complex64> = (0..n)
        .map(|j| if j == n / 2 { Complex64::new(0.0, 0.0) } else { Complex64::from_polar(1.0 / n as f64, 0.5 * k[j] * h) })
        .collect();
    fft_axis(data, shape, axis, false);
    let stride: usize = shape[axis + 1..].iter().product();
    data.iter_mut().enumerate().for_each(|(idx, z)| *z *= phase[(idx / stride) % n]);
    fft_axis(data, shape, axis, true);
}

/// `exp(-i xi_l q dx)` for `q` in `-(2n-1)..=2n-1`, indexed by `q + 2n - 1`.
fn phase_table(grid: &GridSpec) -> Vec<Vec<Complex64>> {
    let n = grid.n_x() as isize;
    let xi = grid.xi_nodes();
    let dx = grid.dx();
    (-(2 * n - 1)..=(2 * n - 1))
        .map(|q| xi.iter().map(|&s| Complex64::from_polar(1.0, -s * q as f64 * dx)).collect())
        .collect()
}

/// Inverse Wigner transform.
pub fn wigner_to_rho(w: &WignerField) -> Result<DensityMatrixKernel> {
    let grid = *w.grid();
    if grid.d() != 1 {
        return Err(WfpError::Unsupported("density matrices need d = 1".into()));
    }
    let (n, n_xi) = (grid.n_x(), grid.n_xi());
    let dxi = grid.dxi();
    let mut shifted: Vec<Complex64> = w.values().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    half_shift(&mut shifted, &[n, n_xi], 0, grid.dx());
    let shifted: Vec<f64> = shifted.iter().map(|z| z.re).collect();
    let phases = phase_table(&grid);
    let offset = 2 * n as isize - 1;
    let resolved = PI / (dxi * grid.dx());

    let rows: Vec<Vec<Complex64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..=i)
                .map(|j| {
                    if (i - j) as f64 >= resolved {
                        return Complex64::new(0.0, 0.0);
                    }
                    let mid = (i + j) / 2;
                    let row = if (i + j) % 2 == 0 { &w.values()[mid * n_xi..(mid + 1) * n_xi] } else { &shifted[mid * n_xi..(mid + 1) * n_xi] };
                    let ph = &phases[(i as isize - j as isize + offset) as usize];
                    row.iter().zip(ph).map(|(&v, &p)| p * v).sum::<Complex64>() * dxi
                })
                .collect()
        })
        .collect();
    let mut entries = vec![Complex64::new(0.0, 0.0); n * n];
    for (i, row) in rows.iter().enumerate() {
        for (j, &z) in row.iter().enumerate() {
            entries[i * n + j] = z;
            entries[j * n + i] = z.conj();
        }
        entries[i * n + i].im = 0.0;
    }
    DensityMatrixKernel::new(grid, entries)
}

/// Forward Wigner transform, together with the largest imaginary residue.
pub fn rho_to_wigner_with_residue(rho: &DensityMatrixKernel) -> Result<(WignerField, f64)> {
    rho.check_hermitian()?;
    let grid = *rho.grid();
    let (n, n_xi) = (grid.n_x(), grid.n_xi());
    let dx = grid.dx();
    let mut shifted = rho.entries().to_vec();
    half_shift(&mut shifted, &[n, n], 0, dx);
    half_shift(&mut shifted, &[n, n], 1, dx);
    let phases = phase_table(&grid);
    let offset = 2 * n as isize - 1;
    let ni = n as isize;

    let rows: Vec<(Vec<f64>, f64)> = (0..ni)
        .into_par_iter()
        .map(|i| {
            let mut acc = vec![Complex64::new(0.0, 0.0); n_xi];
            // Even q = 2r uses rho(x_{i+r}, x_{i-r}); odd q = 2r+1 uses the
            // half-shifted kernel at (i + r, i - r - 1).
            for q in -(2 * ni - 1)..=(2 * ni - 1) {
                let r = q.div_euclid(2);
                let (a, b, src) = if q % 2 == 0 { (i + r, i - r, rho.entries()) } else { (i + r, i - r - 1, &shifted[..]) };
                if a < 0 || b < 0 || a >= ni || b >= ni {
                    continue;
                }
                let z = src[(a * ni + b) as usize];
                let ph = &phases[(q + offset) as usize];
                acc.iter_mut().zip(ph).for_each(|(s, p)| *s += z * p.conj());
            }
            let scale = dx / (2.0 * PI);
            let residue = acc.iter().map(|z| (z.im * scale).abs()).fold(0.0, f64::max);
            (acc.iter().map(|z| z.re * scale).collect(), residue)
        })
        .collect();
    let residue = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let values = rows.into_iter().flat_map(|r| r.0).collect();
    Ok((WignerField::new(grid, values)?, residue))
}

/// Forward Wigner transform `w(x, xi) = (2 pi)^{-1} integral rho(x + eta/2, x - eta/2) exp(-i xi eta) deta`.
pub fn rho_to_wigner(rho: &DensityMatrixKernel) -> Result<WignerField> {
    rho_to_wigner_with_residue(rho).map(|(w, _)| w)
}

/// `sum_i rho(x_i, x_i) dx`.
pub fn trace_of(rho: &DensityMatrixKernel) -> f64 {
    (0..rho.n()).map(|i| rho.get(i, i).re).sum::<f64>() * rho.dx()
}

/// Hilbert-Schmidt norm: Frobenius norm of the kernel times `dx`.
pub fn t2_norm(rho: &DensityMatrixKernel) -> f64 {
    rho.entries().iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt() * rho.dx()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositivityReport {
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    /// `sum |lambda|` over negative eigenvalues of the operator.
    pub negative_mass: f64,
    /// `sum |lambda|`, the trace norm of the operator.
    pub trace_norm: f64,
    /// Ascending eigenvalues of the operator with kernel `rho`.
    #[serde(skip)]
    pub eigenvalues: Vec<f64>,
}

/// Full Hermitian eigendecomposition of the operator `rho * dx`.
pub fn positivity_spectrum(rho: &DensityMatrixKernel) -> Result<PositivityReport> {
    rho.check_hermitian()?;
    let n = rho.n();
    let dx = rho.dx();
    let mat = faer::Mat::<Complex64>::from_fn(n, n, |i, j| rho.get(i, j) * dx);
    let eigenvalues = mat
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .map_err(|e| WfpError::NoConvergence(format!("kernel eigensolve failed: {e:?}")))?;
    let negative_mass = eigenvalues.iter().filter(|&&v| v < 0.0).map(|v| -v).sum();
    let trace_norm = eigenvalues.iter().map(|v| v.abs()).sum();
    Ok(PositivityReport {
        min_eigenvalue: eigenvalues.first().copied().unwrap_or(0.0),
        max_eigenvalue: eigenvalues.last().copied().unwrap_or(0.0),
        negative_mass,
        trace_norm,
        eigenvalues,
    })
}

/// Wigner function `exp(-x^2 - xi^2) / pi` of the pure state `pi^{-1/4} exp(-x^2/2)`.
pub fn gaussian_pure_state(grid: GridSpec) -> Result<WignerField> {
    WignerField::from_fn(grid, |x, xi| (-x[0] * x[0] - xi[0] * xi[0]).exp() / PI)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase_grid::random_smooth_field;

    fn grid() -> GridSpec {
        GridSpec::default_for(1, 128).unwrap()
    }

    fn phi(x: f64) -> f64 {
        PI.powf(-0.25) * (-0.5 * x * x).exp()
    }

    #[test]
    fn pure_state_kernel_is_outer_product() {
        let g = grid();
        let rho = wigner_to_rho(&gaussian_pure_state(g).unwrap()).unwrap();
        let nodes = g.x_nodes();
        let mut err: f64 = 0.0;
        for (i, &x) in nodes.iter().enumerate() {
            for (j, &y) in nodes.iter().enumerate() {
                err = err.max((rho.get(i, j) - phi(x) * phi(y)).norm());
            }
        }
        assert!(err <= 1e-6, "{err:e}");
    }

    #[test]
    fn pure_state_spectrum_is_projector() {
        let g = GridSpec::default_for(1, 64).unwrap();
        let rho = wigner_to_rho(&gaussian_pure_state(g).unwrap()).unwrap();
        let rep = positivity_spectrum(&rho).unwrap();
        assert!((rep.max_eigenvalue - 1.0).abs() <= 1e-6);
        for v in &rep.eigenvalues[..rep.eigenvalues.len() - 1] {
            assert!(v.abs() <= 1e-6, "{v:e}");
        }
    }

    #[test]
    fn pure_state_from_kernel() {
        let g = grid();
        let rho = DensityMatrixKernel::from_fn(g, |x, y| Complex64::new(phi(x) * phi(y), 0.0)).unwrap();
        let (w, residue) = rho_to_wigner_with_residue(&rho).unwrap();
        let exact = gaussian_pure_state(g).unwrap();
        assert!(w.sub(&exact).unwrap().max_abs() <= 1e-6);
        assert!(residue <= 1e-10, "{residue:e}");
    }

    #[test]
    fn equilibrium_kernel() {
        let g = grid();
        let mu = WignerField::mu(g);
        let rho = wigner_to_rho(&mu).unwrap();
        assert!(rho.hermiticity_error() <= 1e-10);
        assert!((trace_of(&rho) - 1.0).abs() <= 1e-4);
        let two = wigner_to_rho(&mu.scaled(2.0)).unwrap();
        assert!((trace_of(&two) - 2.0).abs() <= 1e-4);
        let t2 = t2_norm(&rho);
        let expected = (2.0 * PI).sqrt() * mu.norm_l2();
        assert!((t2 - expected).abs() <= 1e-4 * expected, "{t2} vs {expected}");
        let back = rho_to_wigner(&rho).unwrap();
        assert!(back.sub(&mu).unwrap().norm_l2() <= 1e-6 * mu.norm_l2());
    }

    #[test]
    fn equilibrium_operator_is_positive() {
        let g = GridSpec::default_for(1, 64).unwrap();
        let rep = positivity_spectrum(&wigner_to_rho(&WignerField::mu(g)).unwrap()).unwrap();
        assert!(rep.min_eigenvalue >= -1e-6, "{:e}", rep.min_eigenvalue);
    }

    #[test]
    fn linearity() {
        let g = GridSpec::default_for(1, 64).unwrap();
        let a = random_smooth_field(g, 1, 3);
        let b = random_smooth_field(g, 2, 3);
        let lhs = wigner_to_rho(&a.add_scaled(&b, 0.3).unwrap()).unwrap();
        let (ra, rb) = (wigner_to_rho(&a).unwrap(), wigner_to_rho(&b).unwrap());
        for k in 0..lhs.entries().len() {
            let expect = ra.entries()[k] + rb.entries()[k] * 0.3;
            assert!((lhs.entries()[k] - expect).norm() <= 1e-12 * (1.0 + expect.norm()));
        }
    }

    #[test]
    fn random_fields_satisfy_trace_and_norm_relations() {
        let g = grid();
        for seed in 0..10 {
            let w = random_smooth_field(g, seed, 3);
            let rho = wigner_to_rho(&w).unwrap();
            assert!((trace_of(&rho) - w.mass()).abs() <= 1e-4);
            let expected = (2.0 * PI).sqrt() * w.norm_l2();
            assert!((t2_norm(&rho) - expected).abs() <= 1e-4 * expected, "seed {seed}");
            let back = rho_to_wigner(&rho).unwrap();
            assert!(back.sub(&w).unwrap().norm_l2() <= 1e-6 * w.norm_l2(), "seed {seed}");
        }
    }

    #[test]
    fn zero_field_has_zero_norm() {
        let rho = wigner_to_rho(&WignerField::zeros(grid())).unwrap();
        assert_eq!(t2_norm(&rho), 0.0);
    }

    #[test]
    fn non_hermitian_rejected() {
        let g = GridSpec::default_for(1, 16).unwrap();
        let rho = DensityMatrixKernel::from_fn(g, |x, y| Complex64::new(x - 2.0 * y, 0.0)).unwrap();
        assert!(rho_to_wigner(&rho).is_err());
        assert!(positivity_spectrum(&rho).is_err());
    }

    #[test]
    fn two_dimensional_rejected() {
        let g = GridSpec::default_for(2, 16).unwrap();
        assert!(matches!(wigner_to_rho(&WignerField::mu(g)), Err(WfpError::Unsupported(_))));
    }

    #[test]
    fn binary_round_trip() {
        let g = GridSpec::default_for(1, 16).unwrap();
        let rho = wigner_to_rho(&WignerField::mu(g)).unwrap();
        let mut buf = Vec::new();
        rho.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"WFPR");
        assert_eq!(DensityMatrixKernel::read_binary(&buf[..]).unwrap(), rho);
        assert!(DensityMatrixKernel::read_binary(&buf[1..]).is_err());
    }
}
