//! Small statistics helpers shared by the simulations and tests.

/// Compensated (Neumaier) running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl std::iter::FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = KahanSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().copied().collect::<KahanSum>().value() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    let ss: KahanSum = xs.iter().map(|x| (x - m) * (x - m)).collect();
    ss.value() / (xs.len() - 1) as f64
}

/// Pearson correlation coefficient.
pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxy = KahanSum::new();
    let mut sxx = KahanSum::new();
    let mut syy = KahanSum::new();
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy.add(dx * dy);
        sxx.add(dx * dx);
        syy.add(dy * dy);
    }
    sxy.value() / (sxx.value() * syy.value()).sqrt()
}

/// Sample autocorrelations at lags `1..=max_lag` (biased normalisation).
pub fn autocorrelation(xs: &[f64], max_lag: usize) -> Vec<f64> {
    let n = xs.len();
    let m = mean(xs);
    let c0: KahanSum = xs.iter().map(|x| (x - m) * (x - m)).collect();
    let c0 = c0.value();
    (1..=max_lag)
        .map(|lag| {
            if lag >= n {
                return f64::NAN;
            }
            let c: KahanSum = (0..n - lag).map(|i| (xs[i] - m) * (xs[i + lag] - m)).collect();
            c.value() / c0
        })
        .collect()
}

/// Kolmogorov-Smirnov statistic of `samples` against a continuous CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// KS statistic against Uniform[lo, hi).
pub fn ks_uniform(samples: &[f64], lo: f64, hi: f64) -> f64 {
    ks_statistic(samples, |x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0))
}

/// Asymptotic one-sample KS critical value at level 0.1%.
pub fn ks_critical_001(n: usize) -> f64 {
    1.9495 / (n as f64).sqrt()
}

/// Entropy in bits of a (possibly unnormalised) mass vector; zero cells skipped.
pub fn entropy_bits(p: &[f64]) -> f64 {
    let s: KahanSum = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.log2()).collect();
    s.value()
}

/// `D(p || q)` in bits. Infinite if `q` vanishes where `p` does not.
pub fn kl_bits(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    let mut s = KahanSum::new();
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            s.add(a * (a / b).log2());
        }
    }
    s.value()
}

/// Total variation distance `0.5 * sum |p - q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).collect::<KahanSum>().value()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_beats_naive() {
        let mut k = KahanSum::new();
        let mut naive = 0.0;
        k.add(1e16);
        naive += 1e16;
        for _ in 0..1000 {
            k.add(1.0);
            naive += 1.0;
        }
        k.add(-1e16);
        naive -= 1e16;
        assert_eq!(k.value(), 1000.0);
        assert_ne!(naive, 1000.0);
    }

    #[test]
    fn ks_of_evenly_spaced_points() {
        let n = 1000;
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        assert!((ks_uniform(&xs, 0.0, 1.0) - 0.5 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn entropy_and_kl() {
        assert!((entropy_bits(&[0.5, 0.25, 0.25]) - 1.5).abs() < 1e-15);
        assert_eq!(kl_bits(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        // D([1/2,1/2] || [1/4,3/4]) by hand
        let want = 0.5 * (2.0f64).log2() + 0.5 * (2.0f64 / 3.0).log2();
        assert!((kl_bits(&[0.5, 0.5], &[0.25, 0.75]) - want).abs() < 1e-15);
        assert_eq!(kl_bits(&[1.0, 0.0], &[0.0, 1.0]), f64::INFINITY);
    }

    #[test]
    fn autocorrelation_of_alternating_sequence() {
        let xs: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let r = autocorrelation(&xs, 2);
        assert!((r[0] + 0.999).abs() < 1e-12);
        assert!((r[1] - 0.998).abs() < 1e-12);
    }
}
