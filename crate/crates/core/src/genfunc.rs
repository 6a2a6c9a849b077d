//! Closed forms and generating-function diagnostics.
//!
//! Combinatorial factors are evaluated in log space through `ln Γ`, so sizes
//! far beyond `k ≈ 170` stay finite.

use crate::error::{Error, Result};
use crate::model::SizeDistribution;
use crate::scalar::Scalar;

/// Monodisperse Smoluchowski solution `v_k(t) = k^{k−1}/k! · e^{−kt} t^{k−1}`.
pub fn borel<S: Scalar>(t: S, k: usize) -> S {
    assert!(k >= 1, "cluster sizes start at 1");
    if k == 1 {
        return (-t).exp();
    }
    if t <= S::zero() {
        return S::zero();
    }
    let kf = S::of(k);
    let km1 = S::of(k - 1);
    (km1 * kf.ln() - (kf + S::one()).log_gamma() - kf * t + km1 * t.ln()).exp()
}

/// Critical stationary law `v_k(∞) = 2·C(2k−2, k−1)·(1/k)·4^{−k}`.
pub fn stationary_critical<S: Scalar>(k: usize) -> S {
    S::lit(ln_stationary_critical(k)).exp()
}

fn ln_stationary_critical(k: usize) -> f64 {
    assert!(k >= 1, "cluster sizes start at 1");
    let kf = k as f64;
    std::f64::consts::LN_2 + libm::lgamma(2.0 * kf - 1.0) - 2.0 * libm::lgamma(kf) - kf.ln()
        - kf * 4f64.ln()
}

/// Large-`k` form `(4π)^{−1/2} k^{−3/2}` of the critical stationary law.
pub fn stationary_critical_asymptotic<S: Scalar>(k: usize) -> S {
    let kf = S::of(k);
    (S::lit(4.0) * S::PI()).sqrt().recip() * kf.powf(S::lit(-1.5))
}

/// Subcritical stationary law `(λ+1)(1 − λ²/(1+λ)²)^k v_k(∞)`.
pub fn stationary_subcritical<S: Scalar>(k: usize, lambda: S) -> S {
    let l = lambda.as_f64();
    let ratio = 1.0 - l * l / ((1.0 + l) * (1.0 + l));
    S::lit(((1.0 + l).ln() + k as f64 * ratio.ln() + ln_stationary_critical(k)).exp())
}

/// Borel law at time `t`, truncated at `k_max`; the missing mass becomes gel.
pub fn borel_distribution<S: Scalar>(t: S, k_max: usize) -> SizeDistribution<S> {
    let v = (1..=k_max).map(|k| borel(t, k)).collect();
    SizeDistribution::with_gel(v).expect("Borel law is a sub-probability")
}

pub fn stationary_critical_distribution<S: Scalar>(k_max: usize) -> SizeDistribution<S> {
    let v = (1..=k_max).map(stationary_critical).collect();
    SizeDistribution::with_gel(v).expect("critical law is a sub-probability")
}

pub fn stationary_subcritical_distribution<S: Scalar>(k_max: usize, lambda: S) -> SizeDistribution<S> {
    let v = (1..=k_max).map(|k| stationary_subcritical(k, lambda)).collect();
    SizeDistribution::with_gel(v).expect("subcritical law is a sub-probability")
}

/// Generating function `V(x) = Σ v_k e^{−kx} − 1` (order 0) or its derivatives
/// `V^{(p)}(x) = Σ (−k)^p v_k e^{−kx}` for `p = 1, 2, 3`.
pub fn genfun<S: Scalar>(v: &SizeDistribution<S>, x: S, order: u32) -> S {
    assert!(order <= 3, "derivatives up to third order");
    let decay = (-x).exp();
    let mut w = S::one();
    let mut acc = S::zero();
    for (i, &vk) in v.as_slice().iter().enumerate() {
        w *= decay;
        if vk == S::zero() {
            continue;
        }
        acc += S::of(i + 1).powi(order as i32) * vk * w;
    }
    match order {
        0 => acc - S::one(),
        1 | 3 => -acc,
        _ => acc,
    }
}

/// `E(x) = −V′(x)³/V″(x)` together with the bracket `3V′²/V″ + V′³/V″²`,
/// which lies in `[0, 3]` for states with `Σ v_k ≤ 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EDiagnostic<S> {
    pub e: S,
    pub bracket: S,
}

pub fn e_diagnostic<S: Scalar>(v: &SizeDistribution<S>, x: S) -> Result<EDiagnostic<S>> {
    let d1 = genfun(v, x, 1);
    let d2 = genfun(v, x, 2);
    if !(d2 > S::zero()) {
        return Err(Error::InvalidDistribution(format!("V''({x}) = {d2} is not positive")));
    }
    let three = S::lit(3.0);
    Ok(EDiagnostic {
        e: -d1 * d1 * d1 / d2,
        bracket: three * d1 * d1 / d2 + d1 * d1 * d1 / (d2 * d2),
    })
}

/// Range of `E(x)` over a grid of positive `x`.
pub fn e_range<S: Scalar>(v: &SizeDistribution<S>, xs: &[S]) -> Result<(S, S)> {
    let mut lo = S::infinity();
    let mut hi = S::neg_infinity();
    for &x in xs {
        let e = e_diagnostic(v, x)?.e;
        lo = lo.min(e);
        hi = hi.max(e);
    }
    Ok((lo, hi))
}

/// Log-spaced grid of `count` points in `[lo, hi]`.
pub fn log_grid<S: Scalar>(lo: S, hi: S, count: usize) -> Vec<S> {
    if count <= 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * S::of(i) / S::of(count - 1)).exp())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TailMode {
    /// Fit both amplitude and exponent.
    Free,
    /// Fix the exponent at −1/2 and fit the amplitude only.
    PinnedHalf,
}

/// Power-law fit `Σ_{l≥k} v_l ≈ A k^b` on `[k_min, k_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailFit<S> {
    pub k_min: usize,
    pub k_max: usize,
    pub amplitude: S,
    pub exponent: S,
    /// RMS residual of `ln Σ_{l≥k} v_l` around the fit.
    pub residual: S,
    /// Burning flux `π A² / 2` implied by the amplitude; only for pinned fits.
    pub phi: Option<S>,
    /// Quadratic coefficient of `ln S` against `ln k`; strongly negative for exponential tails.
    pub curvature: S,
    pub exponential_curvature: bool,
}

/// Curvature below which a tail is flagged as exponentially decaying.
pub const CURVATURE_THRESHOLD: f64 = 0.05;

/// Default window `[K^0.3, K^0.6]`.
pub fn default_window(k_max: usize) -> (usize, usize) {
    let kf = k_max as f64;
    let lo = kf.powf(0.3).ceil().max(1.0) as usize;
    let hi = (kf.powf(0.6).floor() as usize).max(lo + 1);
    (lo, hi)
}

pub fn fit_tail<S: Scalar>(
    v: &SizeDistribution<S>,
    k_min: usize,
    k_max: usize,
    mode: TailMode,
) -> Result<TailFit<S>> {
    if k_min == 0 || k_min >= k_max {
        return Err(Error::Fit(format!("window [{k_min}, {k_max}] is empty")));
    }
    if k_max > v.truncation() {
        return Err(Error::Fit(format!("window end {k_max} exceeds truncation {}", v.truncation())));
    }
    let tails = v.tail_sums();
    let mut xs = Vec::with_capacity(k_max - k_min + 1);
    let mut ys = Vec::with_capacity(k_max - k_min + 1);
    for k in k_min..=k_max {
        let s = tails[k - 1].as_f64();
        if !(s > 0.0) {
            return Err(Error::Fit(format!("tail sum vanishes at k={k}")));
        }
        xs.push((k as f64).ln());
        ys.push(s.ln());
    }
    let m = xs.len() as f64;
    let (slope, intercept) = match mode {
        TailMode::Free => {
            let xm = xs.iter().sum::<f64>() / m;
            let ym = ys.iter().sum::<f64>() / m;
            let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
            let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
            let b = sxy / sxx;
            (b, ym - b * xm)
        }
        TailMode::PinnedHalf => {
            let a = xs.iter().zip(&ys).map(|(x, y)| y + 0.5 * x).sum::<f64>() / m;
            (-0.5, a)
        }
    };
    let residual = (xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>()
        / m)
        .sqrt();
    let curvature = quadratic_coefficient(&xs, &ys);
    let amplitude = intercept.exp();
    Ok(TailFit {
        k_min,
        k_max,
        amplitude: S::lit(amplitude),
        exponent: S::lit(slope),
        residual: S::lit(residual),
        phi: (mode == TailMode::PinnedHalf).then(|| S::lit(std::f64::consts::PI * amplitude * amplitude / 2.0)),
        curvature: S::lit(curvature),
        exponential_curvature: curvature < -CURVATURE_THRESHOLD,
    })
}

/// Least-squares `c` in `y ≈ a + b x + c x²` (on centred `x`).
fn quadratic_coefficient(xs: &[f64], ys: &[f64]) -> f64 {
    let m = xs.len() as f64;
    let xm = xs.iter().sum::<f64>() / m;
    let mut s = [0.0f64; 5];
    let mut t = [0.0f64; 3];
    for (&x, &y) in xs.iter().zip(ys) {
        let u = x - xm;
        let mut p = 1.0;
        for (j, sj) in s.iter_mut().enumerate() {
            *sj += p;
            if j < 3 {
                t[j] += p * y;
            }
            p *= u;
        }
    }
    let a = [[s[0], s[1], s[2]], [s[1], s[2], s[3]], [s[2], s[3], s[4]]];
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    if d.abs() < 1e-300 {
        return 0.0;
    }
    let mut a2 = a;
    for (row, &ti) in a2.iter_mut().zip(&t) {
        row[2] = ti;
    }
    det(a2) / d
}

/// Giant-component density of the Erdős–Rényi graph: the largest root of
/// `θ = 1 − e^{−tθ}`, zero for `t ≤ 1`.
pub fn er_giant_density(t: f64) -> f64 {
    if t <= 1.0 {
        return 0.0;
    }
    // The map is increasing and concave, so iterating from 1 decreases
    // monotonically onto the largest fixed point.
    let mut theta = 1.0f64;
    for _ in 0..10_000_000 {
        let next = 1.0 - (-t * theta).exp();
        if (next - theta).abs() <= 1e-14 {
            return next;
        }
        theta = next;
    }
    theta
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn borel_values() {
        for t in [0.0, 0.3, 2.0] {
            assert!((borel(t, 1) - f64::exp(-t)).abs() < 1e-15);
        }
        assert_eq!(borel(0.0f64, 3), 0.0);
        assert!((borel(0.5f64, 2) - 0.5 * (-1.0f64).exp()).abs() < 1e-15);
        // 3^2/3! e^{-3t} t^2 by hand
        let t = 0.7f64;
        assert!((borel(t, 3) - 1.5 * (-3.0 * t).exp() * t * t).abs() < 1e-14);
    }

    #[test]
    fn borel_stays_finite_for_large_k() {
        let x: f64 = borel(1.0, 1_000_000);
        assert!(x.is_finite() && x > 0.0);
        let ratio = x * (2.0 * std::f64::consts::PI).sqrt() * 1e6f64.powf(1.5);
        assert!((ratio - 1.0).abs() < 1e-5);
    }

    #[test]
    fn critical_law_values() {
        assert!((stationary_critical::<f64>(1) - 0.5).abs() < 1e-15);
        assert!((stationary_critical::<f64>(2) - 0.125).abs() < 1e-15);
        // 2·C(4,2)/3·4^{-3} = 2·6/3/64
        assert!((stationary_critical::<f64>(3) - 4.0 / 64.0).abs() < 1e-15);
        let k = 1_000_000;
        let r = stationary_critical::<f64>(k) / stationary_critical_asymptotic::<f64>(k);
        assert!((r - 1.0).abs() < 1e-5);
    }

    #[test]
    fn subcritical_law_values() {
        assert!((stationary_subcritical(1, 1.0f64) - 0.75).abs() < 1e-15);
        for k in [1, 5, 40] {
            let a: f64 = stationary_subcritical(k, 1e-9);
            assert!((a - stationary_critical::<f64>(k)).abs() < 1e-8 * stationary_critical::<f64>(k).max(1e-300));
        }
        let total: f64 = (1..=200).map(|k| stationary_subcritical(k, 1.0)).sum();
        assert!((total - 1.0).abs() < 1e-10, "{total}");
    }

    #[test]
    fn generating_function_of_monodisperse() {
        let v = SizeDistribution::<f64>::monodisperse(10);
        assert_eq!(genfun(&v, 0.0, 0), 0.0);
        assert!((genfun(&v, 1.0, 0) - (f64::exp(-1.0) - 1.0)).abs() < 1e-15);
        assert!((genfun(&v, 0.5, 1) + f64::exp(-0.5)).abs() < 1e-15);
        assert!((genfun(&v, 0.5, 2) - f64::exp(-0.5)).abs() < 1e-15);
        let e = e_diagnostic(&v, 0.3).unwrap();
        assert!((e.e - f64::exp(-0.6)).abs() < 1e-15);
        assert!((e_diagnostic(&v, 1e-300).unwrap().e - 1.0).abs() < 1e-12);
    }

    #[test]
    fn giant_density() {
        assert_eq!(er_giant_density(1.0), 0.0);
        assert_eq!(er_giant_density(0.5), 0.0);
        let th = er_giant_density(2.0);
        assert!((th - 0.796_812_130_3).abs() < 1e-9, "{th}");
        assert!((th - (1.0 - (-2.0 * th).exp())).abs() < 1e-12);
        assert!(er_giant_density(50.0) > 1.0 - 1e-12);
    }

    /// Density whose tail sums are exactly `a·k^{-1/2}` for `k ≤ k_max`.
    fn exact_half_tail(a: f64, k_max: usize) -> SizeDistribution<f64> {
        let s = |k: usize| a / (k as f64).sqrt();
        let mut v: Vec<f64> = (1..k_max).map(|k| s(k) - s(k + 1)).collect();
        v.push(s(k_max));
        SizeDistribution::with_gel(v).unwrap()
    }

    #[test]
    fn exact_power_law_tail() {
        let a = 0.3;
        let d = exact_half_tail(a, 20_000);
        let f = fit_tail(&d, 50, 5_000, TailMode::Free).unwrap();
        assert!((f.exponent + 0.5).abs() < 1e-3, "{}", f.exponent);
        assert!((f.amplitude - a).abs() < 5e-4 * a);
        assert!(!f.exponential_curvature);
        let p = fit_tail(&d, 50, 5_000, TailMode::PinnedHalf).unwrap();
        assert!((p.amplitude - a).abs() < 5e-4 * a);
        let phi = p.phi.unwrap();
        assert!((phi - std::f64::consts::PI * a * a / 2.0).abs() < 1e-3 * phi);
    }

    #[test]
    fn fit_window_errors() {
        let d = SizeDistribution::<f64>::monodisperse(10);
        assert!(fit_tail(&d, 5, 5, TailMode::Free).is_err());
        assert!(fit_tail(&d, 2, 20, TailMode::Free).is_err());
        assert!(matches!(fit_tail(&d, 2, 8, TailMode::Free), Err(Error::Fit(_))));
    }
}
