//! FFT plumbing shared by every spectral stage: axis transforms on
//! row-major arrays, wavenumber tables and spectral derivatives.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

type PlanCache = HashMap<(usize, bool), Arc<dyn Fft<f64>>>;

fn cache() -> &'static Mutex<(FftPlanner<f64>, PlanCache)> {
    static CACHE: OnceLock<Mutex<(FftPlanner<f64>, PlanCache)>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new((FftPlanner::new(), HashMap::new())))
}

/// Cached FFT plan of length `n`.
pub fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut guard = cache().lock().expect("fft plan cache poisoned");
    let (planner, plans) = &mut *guard;
    plans
        .entry((n, inverse))
        .or_insert_with(|| {
            if inverse {
                planner.plan_fft_inverse(n)
            } else {
                planner.plan_fft_forward(n)
            }
        })
        .clone()
}

/// Unnormalized 1-D transform along `axis` of a row-major array.
pub fn fft_axis(data: &mut [Complex64], shape: &[usize], axis: usize, inverse: bool) {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    debug_assert_eq!(data.len(), n * inner * outer);
    let fft = plan(n, inverse);
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    if inner == 1 {
        fft.process_with_scratch(data, &mut scratch);
        return;
    }
    let block = n * inner;
    let mut buf = vec![Complex64::default(); block];
    for o in 0..outer {
        let chunk = &mut data[o * block..(o + 1) * block];
        for i in 0..n {
            for j in 0..inner {
                buf[j * n + i] = chunk[i * inner + j];
            }
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for i in 0..n {
            for j in 0..inner {
                chunk[i * inner + j] = buf[j * n + i];
            }
        }
    }
}

/// Transform along several axes; the inverse is normalized by the product
/// of the transformed lengths.
pub fn fft_axes(data: &mut [Complex64], shape: &[usize], axes: &[usize], inverse: bool) {
    for &a in axes {
        fft_axis(data, shape, a, inverse);
    }
    if inverse {
        let norm: usize = axes.iter().map(|&a| shape[a]).product();
        let s = 1.0 / norm as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Angular wavenumbers in FFT order for `n` samples of spacing `h`.
/// The Nyquist entry carries the negative frequency `-pi/h`.
pub fn wavenumbers(n: usize, h: f64) -> Vec<f64> {
    let dk = 2.0 * PI / (n as f64 * h);
    (0..n)
        .map(|j| {
            let s = if j < n / 2 { j as i64 } else { j as i64 - n as i64 };
            s as f64 * dk
        })
        .collect()
}

/// Wavenumbers for odd-order derivatives: the Nyquist mode is dropped so
/// real data stays real.
pub fn odd_wavenumbers(n: usize, h: f64) -> Vec<f64> {
    let mut k = wavenumbers(n, h);
    k[n / 2] = 0.0;
    k
}

pub fn to_complex(values: &[f64]) -> Vec<Complex64> {
    values.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

/// First and second spectral derivatives of a real array along one axis.
pub fn axis_derivatives(values: &[f64], shape: &[usize], axis: usize, h: f64) -> (Vec<f64>, Vec<f64>) {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let k1 = odd_wavenumbers(n, h);
    let k2 = wavenumbers(n, h);
    let mut spec = to_complex(values);
    fft_axis(&mut spec, shape, axis, false);
    // Pack both (Hermitian) derivative spectra into one inverse transform.
    for (idx, v) in spec.iter_mut().enumerate() {
        let j = (idx / inner) % n;
        let d1 = Complex64::new(0.0, k1[j]) * *v;
        let d2 = -k2[j] * k2[j] * *v;
        *v = d1 + Complex64::new(0.0, 1.0) * d2;
    }
    fft_axis(&mut spec, shape, axis, true);
    let s = 1.0 / n as f64;
    let first = spec.iter().map(|v| v.re * s).collect();
    let second = spec.iter().map(|v| v.im * s).collect();
    (first, second)
}

/// First spectral derivative of a real array along one axis.
pub fn axis_derivative(values: &[f64], shape: &[usize], axis: usize, h: f64) -> Vec<f64> {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let k1 = odd_wavenumbers(n, h);
    let mut spec = to_complex(values);
    fft_axis(&mut spec, shape, axis, false);
    for (idx, v) in spec.iter_mut().enumerate() {
        let j = (idx / inner) % n;
        *v *= Complex64::new(0.0, k1[j]);
    }
    fft_axis(&mut spec, shape, axis, true);
    let s = 1.0 / n as f64;
    spec.iter().map(|v| v.re * s).collect()
}

/// Real array `d/dx a + d^2/dx^2 b` along one axis. Both inputs share one
/// forward transform (packed as `a + i b`) and the sum one inverse.
pub fn axis_flux_diffusion(a: &[f64], b: &[f64], shape: &[usize], axis: usize, h: f64) -> Vec<f64> {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let k1 = odd_wavenumbers(n, h);
    let k2 = wavenumbers(n, h);
    let mut z: Vec<Complex64> = a.iter().zip(b).map(|(&p, &q)| Complex64::new(p, q)).collect();
    fft_axis(&mut z, shape, axis, false);
    let block = n * inner;
    let mut out = vec![Complex64::default(); z.len()];
    for (src, dst) in z.chunks(block).zip(out.chunks_mut(block)) {
        for j in 0..n {
            let jp = (n - j) % n;
            for i in 0..inner {
                let zj = src[j * inner + i];
                let zp = src[jp * inner + i].conj();
                let ahat = (zj + zp) * 0.5;
                let bhat = (zj - zp) * Complex64::new(0.0, -0.5);
                dst[j * inner + i] = Complex64::new(0.0, k1[j]) * ahat - k2[j] * k2[j] * bhat;
            }
        }
    }
    fft_axis(&mut out, shape, axis, true);
    let s = 1.0 / n as f64;
    out.iter().map(|v| v.re * s).collect()
}
