//! Small statistics toolbox shared by the estimators, the audits and the
//! acceptance tests: running moments, exact binomial tails, integrated
//! autocorrelation, bootstrap percentile intervals and a least-squares line.

/// Mean, standard error and count of a sample accumulated online.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunningMoments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningMoments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Standard error of the mean.
    pub fn stderr(&self) -> f64 {
        if self.n == 0 {
            f64::INFINITY
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }

    pub fn merge(&mut self, other: &RunningMoments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = (self.n + other.n) as f64;
        let delta = other.mean - self.mean;
        self.m2 += other.m2 + delta * delta * (self.n as f64) * (other.n as f64) / n;
        self.mean += delta * other.n as f64 / n;
        self.n += other.n;
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let mut acc = RunningMoments::new();
    for &x in xs {
        acc.push(x);
    }
    (acc.mean(), acc.stderr())
}

/// Exact upper tail P(Bin(n, q) >= m), summed with the multiplicative pmf
/// recurrence. Fine for the block sizes used here (n <= a few thousand).
pub fn binomial_tail_geq(n: u64, q: f64, m: u64) -> f64 {
    if m == 0 {
        return 1.0;
    }
    if m > n {
        return 0.0;
    }
    if q <= 0.0 {
        return 0.0;
    }
    if q >= 1.0 {
        return 1.0;
    }
    // pmf(0), then pmf(k+1) = pmf(k) * (n-k)/(k+1) * q/(1-q)
    let ratio = q / (1.0 - q);
    let mut pmf = (1.0 - q).powi(n as i32);
    let mut acc = if m == 0 { pmf } else { 0.0 };
    for k in 0..n {
        pmf *= (n - k) as f64 / (k + 1) as f64 * ratio;
        if k + 1 >= m {
            acc += pmf;
        }
    }
    acc.min(1.0)
}

/// Integrated autocorrelation time of a scalar series, with the usual
/// truncation at the first lag whose estimate drops below 0.05.
pub fn integrated_autocorr_time(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 4 {
        return 1.0;
    }
    let mu = mean(series);
    let var = series.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return 1.0;
    }
    let mut tau = 1.0;
    for k in 1..(n / 2) {
        let cov = (0..n - k)
            .map(|i| (series[i] - mu) * (series[i + k] - mu))
            .sum::<f64>()
            / (n - k) as f64;
        let rho = cov / var;
        if rho < 0.05 {
            break;
        }
        tau += 2.0 * rho;
    }
    tau
}

/// Percentile bootstrap confidence interval for a statistic of a sample.
pub fn bootstrap_ci<F>(
    xs: &[f64],
    level: f64,
    resamples: usize,
    rng: &mut impl rand::Rng,
    stat: F,
) -> (f64, f64)
where
    F: Fn(&[f64]) -> f64,
{
    assert!(!xs.is_empty());
    let mut vals = Vec::with_capacity(resamples);
    let mut buf = vec![0.0; xs.len()];
    for _ in 0..resamples {
        for b in buf.iter_mut() {
            *b = xs[rng.gen_range(0..xs.len())];
        }
        vals.push(stat(&buf));
    }
    vals.sort_by(|a, b| a.total_cmp(b));
    let lo_idx = ((1.0 - level) / 2.0 * (resamples - 1) as f64).round() as usize;
    let hi_idx = ((1.0 + level) / 2.0 * (resamples - 1) as f64).round() as usize;
    (vals[lo_idx], vals[hi_idx.min(resamples - 1)])
}

/// Ordinary least squares line y = a + b x. Returns (intercept, slope).
pub fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2);
    let mx = mean(xs);
    let my = mean(ys);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return (my, 0.0);
    }
    let b = sxy / sxx;
    (my - b * mx, b)
}
