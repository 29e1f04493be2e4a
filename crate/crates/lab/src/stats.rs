//! Sample statistics used by the verification suites.

use serde::{Deserialize, Serialize};

/// Mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

/// Streaming mean/variance (Welford) with Chan's merge.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Running {
    pub n: u64,
    pub mean: f64,
    m2: f64,
}

impl Running {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, o: &Running) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let n = (self.n + o.n) as f64;
        let d = o.mean - self.mean;
        self.mean += d * o.n as f64 / n;
        self.m2 += o.m2 + d * d * self.n as f64 * o.n as f64 / n;
        self.n += o.n;
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate { mean: self.mean, se: (self.variance() / self.n.max(1) as f64).sqrt(), n: self.n as usize }
    }
}

pub fn mean_se(xs: &[f64]) -> Estimate {
    let mut r = Running::default();
    for &x in xs {
        r.push(x);
    }
    r.estimate()
}

/// Self-normalized weighted mean Σwf/Σw with delta-method standard error.
pub fn weighted_mean(f: &[f64], w: &[f64]) -> Estimate {
    let n = f.len();
    let sw: f64 = w.iter().sum();
    let m = f.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let wbar = sw / n as f64;
    let var = f.iter().zip(w).map(|(a, b)| (b * (a - m)).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
    Estimate { mean: m, se: (var / n as f64).sqrt() / wbar.abs(), n }
}

/// Kish effective sample size.
pub fn effective_sample_size(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|x| x * x).sum();
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Linear-interpolated quantile of unsorted data.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < v.len() {
        v[i] * (1.0 - f) + v[i + 1] * f
    } else {
        v[i]
    }
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// sup_t |F_a(t) − F_b(t)| for weighted empirical CDFs (weights may be signed).
pub fn weighted_ks(a: &[f64], wa: &[f64], b: &[f64], wb: &[f64]) -> f64 {
    let sa: f64 = wa.iter().sum();
    let sb: f64 = wb.iter().sum();
    let mut pts: Vec<(f64, f64)> = a
        .iter()
        .zip(wa)
        .map(|(&x, &w)| (x, w / sa))
        .chain(b.iter().zip(wb).map(|(&x, &w)| (x, -w / sb)))
        .collect();
    pts.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut d: f64 = 0.0;
    let mut acc = 0.0;
    let mut i = 0;
    while i < pts.len() {
        let x = pts[i].0;
        while i < pts.len() && pts[i].0 == x {
            acc += pts[i].1;
            i += 1;
        }
        d = d.max(acc.abs());
    }
    d
}

/// Least-squares slope of y on x.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_merge_matches_direct() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut a = Running::default();
        let mut b = Running::default();
        for &x in &xs[..40] {
            a.push(x);
        }
        for &x in &xs[40..] {
            b.push(x);
        }
        a.merge(&b);
        let d = mean_se(&xs);
        assert!((a.mean - d.mean).abs() < 1e-14);
        assert!((a.estimate().se - d.se).abs() < 1e-14);
    }

    #[test]
    fn ks_and_quantiles() {
        let a = [1.0, 2.0, 3.0];
        let w = [1.0; 3];
        assert_eq!(weighted_ks(&a, &w, &a, &w), 0.0);
        assert!((weighted_ks(&[0.0], &[1.0], &[1.0], &[1.0]) - 1.0).abs() < 1e-15);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert!((quantile(&[0.0, 1.0], 0.25) - 0.25).abs() < 1e-15);
        assert!((slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn weighted_mean_uniform_weights() {
        let f = [1.0, 2.0, 3.0, 4.0];
        let e = weighted_mean(&f, &[2.0; 4]);
        assert!((e.mean - 2.5).abs() < 1e-15);
        assert!((e.se - mean_se(&f).se).abs() < 1e-12);
        assert!((effective_sample_size(&[1.0; 4]) - 4.0).abs() < 1e-15);
    }
}
