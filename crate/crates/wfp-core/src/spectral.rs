//! Dense spectral analysis of the generator on coarse one-dimensional grids.
//!
//! The matrix is that of the ground-state transformed operator
//! `H = Lap + F.grad + U`, which is similar to `L` through `sqrt(mu)`, built
//! column by column from the matrix-free `apply_h`.

use crate::error::{Result, WfpError};
use crate::phase_grid::{GridSpec, WignerField, SIGMA};
use crate::wfp_operator::{apply_h, inverse_groundstate_transform};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Largest coarse resolution per axis.
pub const MAX_COARSE: usize = 64;

/// `|Re| <= KERNEL_TOLERANCE` identifies the kernel eigenvalue.
pub const KERNEL_TOLERANCE: f64 = 1e-4;

/// Slack allowed above `-sigma` for the other eigenvalues.
pub const GAP_SLACK: f64 = 1e-3;

/// Coarse box for the eigenvalue problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarseBox {
    pub n: usize,
    pub x_max: f64,
    pub xi_max: f64,
}

impl CoarseBox {
    /// `sqrt(mu)` has marginal variances 6 and 2 and drops below `1e-7`
    /// of its peak at `|x| = 14`, `|xi| = 8`.
    pub fn new(n: usize) -> Self {
        Self { n, x_max: 14.0, xi_max: 8.0 }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        if self.n > MAX_COARSE {
            return Err(WfpError::InvalidParameter(format!(
                "coarse grid {} exceeds the dense limit of {MAX_COARSE} points per axis",
                self.n
            )));
        }
        GridSpec::new_unchecked(1, self.n, self.n, self.x_max, self.xi_max)
    }
}

/// Dense row-major matrix of `H` on a coarse grid.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    grid: GridSpec,
    matrix: faer::Mat<f64>,
}

impl GeneratorMatrix {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[(i, j)]
    }

    pub fn matrix(&self) -> &faer::Mat<f64> {
        &self.matrix
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n).map(|i| (0..n).map(|j| self.matrix[(i, j)] * v[j]).sum()).collect()
    }

    /// `||H sqrt(mu)|| / ||sqrt(mu)||`.
    pub fn kernel_residual(&self) -> f64 {
        let root: Vec<f64> = WignerField::mu(self.grid).values().iter().map(|m| m.sqrt()).collect();
        l2(&self.apply(&root)) / l2(&root)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Assemble `H` by applying it to every unit vector of the coarse grid.
pub fn assemble_generator(coarse: &CoarseBox) -> Result<GeneratorMatrix> {
    let grid = coarse.grid()?;
    let n = grid.len();
    let columns: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            apply_h(&WignerField::new(grid, e).expect("unit vector")).into_values()
        })
        .collect();
    let matrix = faer::Mat::from_fn(n, n, |i, j| columns[j][i]);
    Ok(GeneratorMatrix { grid, matrix })
}

/// All eigenvalues, sorted by real part descending (ties by imaginary part).
pub fn all_eigenvalues(h: &GeneratorMatrix) -> Result<Vec<Complex64>> {
    let mut eigs = h
        .matrix
        .eigenvalues()
        .map_err(|e| WfpError::NoConvergence(format!("dense eigensolve failed: {e:?}")))?;
    eigs.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    Ok(eigs)
}

/// The `k` eigenvalues of largest real part.
pub fn eigs_rightmost(h: &GeneratorMatrix, k: usize) -> Result<Vec<Complex64>> {
    let mut eigs = all_eigenvalues(h)?;
    eigs.truncate(k);
    Ok(eigs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub pass: bool,
    pub sigma: f64,
    /// Eigenvalues with `|Re| <= KERNEL_TOLERANCE`.
    pub kernel_count: usize,
    /// Largest real part among the remaining eigenvalues.
    pub second_real_part: Option<f64>,
    /// Largest real part overall.
    pub max_real_part: Option<f64>,
    /// `1 / gap`, the discrete counterpart of `||L^{-1}||` on the mass-free part.
    pub inverse_gap: Option<f64>,
}

/// Pass iff exactly one eigenvalue sits at `Re = 0` and all others satisfy
/// `Re <= -sigma + GAP_SLACK`.
pub fn verify_gap(eigs: &[Complex64], sigma: f64) -> GapReport {
    let kernel_count = eigs.iter().filter(|z| z.re.abs() <= KERNEL_TOLERANCE).count();
    let second = eigs.iter().filter(|z| z.re.abs() > KERNEL_TOLERANCE).map(|z| z.re).reduce(f64::max);
    let max_real_part = eigs.iter().map(|z| z.re).reduce(f64::max);
    let pass = kernel_count == 1 && second.is_none_or(|re| re <= -sigma + GAP_SLACK);
    GapReport {
        pass,
        sigma,
        kernel_count,
        second_real_part: second,
        max_real_part,
        inverse_gap: second.map(|re| 1.0 / -re),
    }
}

/// Kernel vector of `H` by inverse iteration, mapped back with `sqrt(mu)`
/// and normalized to unit mass.
pub fn kernel_density(h: &GeneratorMatrix) -> Result<WignerField> {
    let n = h.dim();
    let shift = 1e-3;
    let shifted = faer::Mat::from_fn(n, n, |i, j| h.matrix[(i, j)] - if i == j { shift } else { 0.0 });
    let lu = shifted.partial_piv_lu();
    let mut v = faer::Mat::<f64>::from_fn(n, 1, |i, _| 1.0 + 0.01 * ((i * 7919) % 101) as f64);
    for _ in 0..6 {
        v = faer::linalg::solvers::Solve::solve(&lu, &v);
        let norm = (0..n).map(|i| v[(i, 0)] * v[(i, 0)]).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(WfpError::NoConvergence("inverse iteration for the kernel broke down".into()));
        }
        v = faer::Mat::from_fn(n, 1, |i, _| v[(i, 0)] / norm);
    }
    let field = WignerField::new(h.grid, (0..n).map(|i| v[(i, 0)]).collect())?;
    let w = inverse_groundstate_transform(&field);
    let mass = w.mass();
    if mass == 0.0 {
        return Err(WfpError::Invariant("kernel vector has zero mass".into()));
    }
    Ok(w.scaled(1.0 / mass))
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralReport {
    pub coarse: CoarseBox,
    pub kernel_residual: f64,
    /// Relative L2 distance of the normalized kernel density to `mu`.
    pub kernel_mu_error: f64,
    pub rightmost: Vec<[f64; 2]>,
    pub gap: GapReport,
}

/// Assemble, solve and verify on one coarse box.
pub fn analyze(coarse: &CoarseBox, k: usize) -> Result<SpectralReport> {
    let h = assemble_generator(coarse)?;
    let eigs = all_eigenvalues(&h)?;
    let gap = verify_gap(&eigs, SIGMA);
    let density = kernel_density(&h)?;
    let mu = WignerField::mu(h.grid);
    let mu = mu.scaled(1.0 / mu.mass());
    let kernel_mu_error = density.sub(&mu)?.norm_l2() / mu.norm_l2();
    Ok(SpectralReport {
        coarse: *coarse,
        kernel_residual: h.kernel_residual(),
        kernel_mu_error,
        rightmost: eigs.iter().take(k).map(|z| [z.re, z.im]).collect(),
        gap,
    })
}

/// `re,im` rows with 17 significant digits.
pub fn write_eigenvalues_csv<W: Write>(mut out: W, eigs: &[Complex64]) -> Result<()> {
    writeln!(out, "re,im")?;
    for z in eigs {
        writeln!(out, "{:.16e},{:.16e}", z.re, z.im)?;
    }
    Ok(())
}
