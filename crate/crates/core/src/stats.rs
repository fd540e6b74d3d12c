//! Streaming moments with a fixed merge order, so parallel reductions are
//! reproducible bit for bit.

/// Per-coordinate running mean and sum of squared deviations (Welford).
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    pub fn new(d: usize) -> Self {
        Moments { n: 0, mean: vec![0.0; d], m2: vec![0.0; d] }
    }

    pub fn from_samples<'a>(d: usize, samples: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut m = Moments::new(d);
        for s in samples {
            m.push(s);
        }
        m
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let na = self.n as f64;
        let nb = other.n as f64;
        let n = na + nb;
        for j in 0..self.mean.len() {
            let delta = other.mean[j] - self.mean[j];
            self.mean[j] += delta * nb / n;
            self.m2[j] += other.m2[j] + delta * delta * na * nb / n;
        }
        self.n += other.n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased variance of each coordinate.
    pub fn variances(&self) -> Vec<f64> {
        let denom = (self.n.max(2) - 1) as f64;
        self.m2.iter().map(|s| s / denom).collect()
    }

    /// Coordinate-averaged unbiased variance (isotropic fit).
    pub fn isotropic_variance(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        self.variances().iter().sum::<f64>() / self.mean.len() as f64
    }
}

/// Standard error of the isotropic variance estimate of a Gaussian sample.
pub fn variance_standard_error(variance: f64, n: u64, d: usize) -> f64 {
    variance * (2.0 / ((n.max(2) - 1) as f64 * d as f64)).sqrt()
}
