//! Small numerical helpers: compensated summation, Gauss-Legendre
//! quadrature and Halton sequences.

/// Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated sum of an iterator, accumulated in iteration order.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut acc = CompensatedSum::new();
    for v in it {
        acc.add(v);
    }
    acc.value()
}

const GL5_NODES: [f64; 5] = [
    0.0,
    -0.538_469_310_105_683_1,
    0.538_469_310_105_683_1,
    -0.906_179_845_938_664,
    0.906_179_845_938_664,
];
const GL5_WEIGHTS: [f64; 5] = [
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
    0.236_926_885_056_189_1,
];

/// Composite five-point Gauss-Legendre rule on `[a, b]` with `panels` panels.
pub fn gauss_legendre<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    let h = (b - a) / panels as f64;
    let mut acc = CompensatedSum::new();
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        for (x, w) in GL5_NODES.iter().zip(GL5_WEIGHTS.iter()) {
            acc.add(w * f(mid + 0.5 * h * x) * 0.5 * h);
        }
    }
    acc.value()
}

/// Upper tail `P(X > a)` of a centred normal variable with variance `var`,
/// by Gauss-Legendre quadrature of the density.
pub fn normal_upper_tail(a: f64, var: f64) -> f64 {
    if a < 0.0 {
        return 1.0 - normal_upper_tail(-a, var);
    }
    let norm = 1.0 / (2.0 * std::f64::consts::PI * var).sqrt();
    gauss_legendre(|t| norm * (-t * t / (2.0 * var)).exp(), a, a + 40.0 * var.sqrt(), 400)
}

/// Element `index` of the van der Corput sequence in `base`.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while index > 0 {
        r += f * (index % base) as f64;
        index /= base;
        f *= inv;
    }
    r
}

const HALTON_BASES: [u64; 4] = [2, 3, 5, 7];

/// Halton point `index` in `[0,1)^dim`, `dim <= 4`.
pub fn halton(index: u64, dim: usize) -> [f64; 4] {
    let mut p = [0.0; 4];
    for (k, slot) in p.iter_mut().enumerate().take(dim) {
        *slot = radical_inverse(index + 1, HALTON_BASES[k]);
    }
    p
}

/// Binomial coefficient as f64.
pub fn binomial(n: u32, k: u32) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_beats_naive_on_cancellation() {
        let vals = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(vals), 2.0);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let v = gauss_legendre(|x| x.powi(9) - 3.0 * x * x, -1.0, 2.0, 1);
        let exact = (2f64.powi(10) - 1.0) / 10.0 - (8.0 + 1.0);
        assert!((v - exact).abs() < 1e-12);
    }

    #[test]
    fn normal_tail_known_values() {
        // P(Z > 0) = 1/2 and P(Z > 1.959963984540054) = 0.025.
        assert!((normal_upper_tail(0.0, 1.0) - 0.5).abs() < 1e-13);
        assert!((normal_upper_tail(1.959_963_984_540_054, 1.0) - 0.025).abs() < 1e-12);
        assert!((normal_upper_tail(-1.0, 4.0) - (1.0 - normal_upper_tail(1.0, 4.0))).abs() < 1e-12);
    }

    #[test]
    fn halton_first_points() {
        assert_eq!(halton(0, 2)[..2], [0.5, 1.0 / 3.0]);
        assert_eq!(halton(1, 2)[..2], [0.25, 2.0 / 3.0]);
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(4, 2), 6.0);
        assert_eq!(binomial(8, 0), 1.0);
        assert_eq!(binomial(3, 5), 0.0);
    }
}
