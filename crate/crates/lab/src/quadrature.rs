//! Gauss-Kronrod panels, adaptive bisection and Wynn's epsilon algorithm.

use std::collections::BinaryHeap;

#[allow(clippy::excessive_precision)]
const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689,
    0.973_906_528_517_171_720_077_964_012_084,
    0.930_157_491_355_708_226_001_207_180_060,
    0.865_063_366_688_984_510_732_096_688_423,
    0.780_817_726_586_416_897_063_717_578_345,
    0.679_409_568_299_024_406_234_327_365_115,
    0.562_757_134_668_604_683_339_000_099_273,
    0.433_395_394_129_247_190_799_265_943_166,
    0.294_392_862_701_460_198_131_126_603_104,
    0.148_874_338_981_631_210_884_826_001_130,
    0.0,
];

#[allow(clippy::excessive_precision)]
const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062,
    0.032_558_162_307_964_727_478_818_972_459,
    0.054_755_896_574_351_996_031_381_300_245,
    0.075_039_674_810_919_952_767_043_140_916,
    0.093_125_454_583_697_605_535_065_465_083,
    0.109_387_158_802_297_641_899_210_590_326,
    0.123_491_976_262_065_851_077_943_368_520,
    0.134_709_217_311_473_325_928_054_001_772,
    0.142_775_938_577_060_080_797_094_273_139,
    0.147_739_104_901_338_491_374_841_515_972,
    0.149_445_554_002_916_905_664_936_468_390,
];

#[allow(clippy::excessive_precision)]
const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893,
    0.149_451_349_150_580_593_145_776_339_658,
    0.219_086_362_515_982_043_995_534_934_228,
    0.269_266_719_309_996_355_091_226_921_569,
    0.295_524_224_714_752_870_173_892_994_651,
];

/// 21-point Kronrod rule on `[a, b]` with the QUADPACK error heuristic.
pub fn gk21<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut fv1 = [0.0; 10];
    let mut fv2 = [0.0; 10];
    let mut resk = fc * WGK[10];
    let mut resg = 0.0;
    let mut resabs = resk.abs();
    for j in 0..10 {
        let dx = h * XGK[j];
        let f1 = f(c - dx);
        let f2 = f(c + dx);
        fv1[j] = f1;
        fv2[j] = f2;
        resk += WGK[j] * (f1 + f2);
        resabs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            resg += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = 0.5 * resk;
    let mut resasc = WGK[10] * (fc - mean).abs();
    for j in 0..10 {
        resasc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let hh = h.abs();
    resasc *= hh;
    resabs *= hh;
    let mut err = ((resk - resg) * h).abs();
    if resasc != 0.0 && err != 0.0 {
        err = resasc * (1.0f64).min((200.0 * err / resasc).powf(1.5));
    }
    if resabs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        err = err.max(50.0 * f64::EPSILON * resabs);
    }
    (resk * h, err)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadResult {
    pub value: f64,
    pub error: f64,
    pub panels: usize,
}

impl QuadResult {
    pub fn converged(&self, abs_tol: f64, rel_tol: f64) -> bool {
        self.error <= abs_tol.max(rel_tol * self.value.abs())
    }
}

struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Globally adaptive bisection on `[a, b]`; always returns the best estimate.
pub fn adaptive<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
    max_panels: usize,
) -> QuadResult {
    if a == b {
        return QuadResult { value: 0.0, error: 0.0, panels: 0 };
    }
    let (v, e) = gk21(f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Panel { a, b, value: v, error: e });
    let mut total = v;
    let mut total_err = e;
    let mut panels = 1;
    while total_err > abs_tol.max(rel_tol * total.abs()) && panels < max_panels {
        let worst = heap.pop().expect("heap never empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            heap.push(worst);
            break;
        }
        let (v1, e1) = gk21(f, worst.a, mid);
        let (v2, e2) = gk21(f, mid, worst.b);
        total += v1 + v2 - worst.value;
        total_err += e1 + e2 - worst.error;
        heap.push(Panel { a: worst.a, b: mid, value: v1, error: e1 });
        heap.push(Panel { a: mid, b: worst.b, value: v2, error: e2 });
        panels += 1;
    }
    // Resum to shed accumulated cancellation in the running totals.
    let value = heap.iter().map(|p| p.value).sum();
    let error = heap.iter().map(|p| p.error).sum();
    QuadResult { value, error, panels }
}

/// Wynn's epsilon extrapolation of a sequence of partial sums.
///
/// Returns the estimate from the highest even column together with the
/// distance to the previous even column as an error proxy.
pub fn wynn_epsilon(sums: &[f64]) -> (f64, f64) {
    let n = sums.len();
    match n {
        0 => return (0.0, f64::INFINITY),
        1 => return (sums[0], f64::INFINITY),
        _ => {}
    }
    let mut prev = vec![0.0; n];
    let mut cur = sums.to_vec();
    let mut best = sums[n - 1];
    let mut err = (sums[n - 1] - sums[n - 2]).abs();
    for k in 1..n {
        let m = cur.len() - 1;
        let mut next = Vec::with_capacity(m);
        for i in 0..m {
            let d = cur[i + 1] - cur[i];
            if d == 0.0 || !d.is_finite() {
                return (best, err);
            }
            next.push(prev[i + 1] + 1.0 / d);
        }
        prev = cur;
        cur = next;
        if k % 2 == 0 {
            let est = cur[cur.len() - 1];
            if !est.is_finite() {
                break;
            }
            err = (est - best).abs();
            best = est;
        }
        if cur.len() < 2 {
            break;
        }
    }
    (best, err)
}

/// Integral over `[a, ∞)` of `cos(λx)·g(λ)` for `g` eventually monotone,
/// summed over half-periods with Wynn acceleration. `a` must be a zero of
/// `cos(λx)`.
pub fn cos_tail<G: Fn(f64) -> f64>(g: &G, x: f64, a: f64, abs_tol: f64, max_terms: usize) -> QuadResult {
    let period = std::f64::consts::PI / x.abs();
    let mut sums = Vec::with_capacity(64);
    let mut acc = 0.0;
    let mut panels = 0;
    let mut last_est = f64::NAN;
    let mut last_err = f64::INFINITY;
    let mut lo = a;
    let mut k = 0usize;
    while k < max_terms {
        let hi = a + (k as f64 + 1.0) * period;
        let f = |l: f64| (l * x).cos() * g(l);
        let r = adaptive(&f, lo, hi, abs_tol * 1e-3, 1e-13, 200);
        panels += r.panels;
        acc += r.value;
        sums.push(acc);
        lo = hi;
        k += 1;
        if k >= 12 && k.is_multiple_of(6) {
            let window = &sums[sums.len().saturating_sub(40)..];
            let (est, e) = wynn_epsilon(window);
            let diff = (est - last_est).abs();
            last_err = if diff.is_finite() { diff.max(e.min(diff)) } else { e };
            last_est = est;
            if last_err <= abs_tol {
                return QuadResult { value: est, error: last_err, panels };
            }
        }
    }
    QuadResult { value: if last_est.is_nan() { acc } else { last_est }, error: last_err, panels }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gk21_is_exact_for_polynomials() {
        let (v, _) = gk21(&|x: f64| x.powi(7) - 3.0 * x * x, 0.0, 2.0);
        assert!((v - (32.0 - 8.0)).abs() < 1e-12);
    }

    #[test]
    fn adaptive_handles_endpoint_singularity() {
        let r = adaptive(&|x: f64| x.sqrt().recip(), 0.0, 1.0, 1e-12, 1e-12, 500);
        assert!((r.value - 2.0).abs() < 1e-9, "{r:?}");
    }

    #[test]
    fn wynn_accelerates_alternating_harmonic() {
        let mut s = 0.0;
        let sums: Vec<f64> = (1..=20)
            .map(|k| {
                s += if k % 2 == 1 { 1.0 } else { -1.0 } / k as f64;
                s
            })
            .collect();
        let (est, _) = wynn_epsilon(&sums);
        assert!((est - std::f64::consts::LN_2).abs() < 1e-10, "{est}");
    }

    #[test]
    fn cos_tail_matches_dirichlet_type_integral() {
        // ∫_0^∞ cos(λ)/(1+λ²) dλ = π e^{-1}/2
        let g = |l: f64| 1.0 / (1.0 + l * l);
        let a = std::f64::consts::FRAC_PI_2;
        let head = adaptive(&|l: f64| l.cos() * g(l), 0.0, a, 1e-14, 1e-14, 100);
        let tail = cos_tail(&g, 1.0, a, 1e-13, 2000);
        let exact = std::f64::consts::PI * (-1.0f64).exp() / 2.0;
        assert!((head.value + tail.value - exact).abs() < 1e-10);
    }
}
