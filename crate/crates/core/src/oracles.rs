//! Closed-form and semi-analytic reference prices used for validation,
//! plus the analytic optimal control for the Black–Scholes call.

use crate::cvtrain::{ControlFunction, ControlMode};
use ndarray::{ArrayView2, ArrayViewMut2};

/// Standard normal CDF via the complementary error function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse standard normal CDF (Wichura's AS 241, double-precision branch).
#[allow(clippy::excessive_precision)]
pub fn inv_norm_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "inv_norm_cdf: p must be in (0, 1)");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
            + 6.7265770927008700853e4)
            * r
            + 4.5921953931549871457e4)
            * r
            + 1.3731693765509461125e4)
            * r
            + 1.9715909503065514427e3)
            * r
            + 1.3314166789178437745e2)
            * r
            + 3.3871328727963666080e0)
            * q;
        let den = ((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
            + 3.9307895800092710610e4)
            * r
            + 2.1213794301586595867e4)
            * r
            + 5.3941960214247511077e3)
            * r
            + 6.8718700749205790830e2)
            * r
            + 4.2313330701600911252e1)
            * r
            + 1.0;
        return num / den;
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        let num = ((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
            + 2.41780725177450611770e-1)
            * r
            + 1.27045825245236838258e0)
            * r
            + 3.64784832476320460504e0)
            * r
            + 5.76949722146069140550e0)
            * r
            + 4.63033784615654529590e0)
            * r
            + 1.42343711074968357734e0;
        let den = ((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
            + 1.51986665636164571966e-2)
            * r
            + 1.48103976427480074590e-1)
            * r
            + 6.89767334985100004550e-1)
            * r
            + 1.67638483018380384940e0)
            * r
            + 2.05319162663775882187e0)
            * r
            + 1.0;
        num / den
    } else {
        let r = r - 5.0;
        let num = ((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
            + 1.24266094738807843860e-3)
            * r
            + 2.65321895265761230930e-2)
            * r
            + 2.96560571828504891230e-1)
            * r
            + 1.78482653991729133580e0)
            * r
            + 5.46378491116411436990e0)
            * r
            + 6.65790464350110377720e0;
        let den = ((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
            + 1.84631831751005468180e-5)
            * r
            + 7.86869131145613259100e-4)
            * r
            + 1.48753612908506148525e-2)
            * r
            + 1.36929880922735805310e-1)
            * r
            + 5.99832206555887937690e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

fn bs_d1(x: f64, strike: f64, rate: f64, sigma: f64, tau: f64) -> f64 {
    ((x / strike).ln() + (rate + 0.5 * sigma * sigma) * tau) / (sigma * tau.sqrt())
}

/// Black–Scholes price of a European call.
pub fn bs_call(x: f64, strike: f64, rate: f64, sigma: f64, tau: f64) -> f64 {
    assert!(x > 0.0 && strike > 0.0 && tau >= 0.0);
    if sigma <= 0.0 || tau == 0.0 {
        return (x - strike * (-rate * tau).exp()).max(0.0);
    }
    let d1 = bs_d1(x, strike, rate, sigma, tau);
    let d2 = d1 - sigma * tau.sqrt();
    x * norm_cdf(d1) - strike * (-rate * tau).exp() * norm_cdf(d2)
}

/// The control that makes the Black–Scholes call functional deterministic:
/// `G*(t, x) = -sigma * x * Phi(d1)`, i.e. minus vol times the delta-weighted
/// spot. At `t = T` the payoff kink is resolved by its sub-gradient.
pub fn bs_optimal_control(t: f64, x: f64, strike: f64, rate: f64, sigma: f64, horizon: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let tau = horizon - t;
    if tau <= 0.0 {
        return if x > strike {
            -sigma * x
        } else if x < strike {
            0.0
        } else {
            -0.5 * sigma * x
        };
    }
    -sigma * x * norm_cdf(bs_d1(x, strike, rate, sigma, tau))
}

/// Merton jump-diffusion call price by the classical Poisson mixture of
/// Black–Scholes prices with jump-adjusted rate and volatility.
#[allow(clippy::too_many_arguments)]
pub fn merton_call(
    x: f64,
    strike: f64,
    rate: f64,
    sigma: f64,
    lambda: f64,
    jump_mean: f64,
    jump_sd: f64,
    tau: f64,
) -> f64 {
    let terms = merton_term_count(lambda, jump_mean, jump_sd, tau);
    merton_call_terms(
        x, strike, rate, sigma, lambda, jump_mean, jump_sd, tau, terms,
    )
}

/// Number of series terms so the dropped Poisson tail is below 1e-14 mass.
pub fn merton_term_count(lambda: f64, jump_mean: f64, jump_sd: f64, tau: f64) -> usize {
    let beta = (jump_mean + 0.5 * jump_sd * jump_sd).exp_m1();
    let rate = lambda * (1.0 + beta) * tau;
    if rate <= 0.0 {
        return 1;
    }
    let mut weight = (-rate).exp();
    let mut cum = weight;
    let mut j = 0usize;
    while cum < 1.0 - 1e-14 && j < 500 {
        j += 1;
        weight *= rate / j as f64;
        cum += weight;
    }
    j + 1
}

/// Merton series truncated to a fixed number of terms.
#[allow(clippy::too_many_arguments)]
pub fn merton_call_terms(
    x: f64,
    strike: f64,
    rate: f64,
    sigma: f64,
    lambda: f64,
    jump_mean: f64,
    jump_sd: f64,
    tau: f64,
    terms: usize,
) -> f64 {
    assert!(lambda >= 0.0 && tau > 0.0);
    if lambda == 0.0 {
        return bs_call(x, strike, rate, sigma, tau);
    }
    let beta = (jump_mean + 0.5 * jump_sd * jump_sd).exp_m1();
    let poisson_rate = lambda * (1.0 + beta) * tau;
    let mut weight = (-poisson_rate).exp();
    let mut total = 0.0;
    for j in 0..terms {
        if j > 0 {
            weight *= poisson_rate / j as f64;
        }
        let rj = rate - lambda * beta + j as f64 * (1.0 + beta).ln() / tau;
        let sj = (sigma * sigma + j as f64 * jump_sd * jump_sd / tau).sqrt();
        total += weight * bs_call(x, strike, rj, sj, tau);
    }
    total
}

/// Reference prices for the Heston call experiment (v0 = 0.15, r = 0.02,
/// kappa = 0.25, theta = 0.5, vol-of-vol = 0.3, rho = -0.3, T = 3), taken as
/// published constants rather than via a characteristic-function pricer.
pub const HESTON_REFERENCE: [(f64, f64); 7] = [
    (0.7, 0.47517),
    (0.8, 0.42623),
    (0.9, 0.38271),
    (1.0, 0.34406),
    (1.1, 0.30977),
    (1.2, 0.27934),
    (1.3, 0.25232),
];

/// Look up the tabulated Heston reference for a strike, if present.
pub fn heston_reference(strike: f64) -> Option<f64> {
    HESTON_REFERENCE
        .iter()
        .find(|(k, _)| (k - strike).abs() < 1e-9)
        .map(|&(_, v)| v)
}

/// Source of a reference price.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferenceMethod {
    BlackScholesClosed,
    MertonSeries,
    PublishedTable,
}

/// A reference price together with how it was obtained.
#[derive(Debug, Clone, Copy)]
pub struct ReferencePrice {
    pub value: f64,
    pub method: ReferenceMethod,
}

/// The analytic optimal control for the 1-d Black–Scholes call, usable
/// anywhere a trained network is.
#[derive(Debug, Clone)]
pub struct BsDeltaControl {
    pub strike: f64,
    pub rate: f64,
    pub sigma: f64,
    pub horizon: f64,
}

impl ControlFunction for BsDeltaControl {
    fn mode(&self) -> ControlMode {
        ControlMode::Brownian
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn eval(&self, inputs: ArrayView2<f64>, mut out: ArrayViewMut2<f64>) {
        for (row, mut o) in inputs.outer_iter().zip(out.outer_iter_mut()) {
            o[0] = bs_optimal_control(
                row[0],
                row[1],
                self.strike,
                self.rate,
                self.sigma,
                self.horizon,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn inverse_normal_round_trips() {
        for &p in &[1e-9, 1e-4, 0.025, 0.3174, 0.5, 0.8413, 0.975, 1.0 - 1e-9] {
            let x = inv_norm_cdf(p);
            assert_abs_diff_eq!(norm_cdf(x), p, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(inv_norm_cdf(0.975), 1.959963984540054, epsilon = 1e-9);
    }

    #[test]
    fn bs_call_reproduces_published_values() {
        let cases = [
            (0.7, 0.39031),
            (0.8, 0.32826),
            (0.9, 0.27484),
            (1.0, 0.22943),
            (1.1, 0.19117),
            (1.2, 0.15914),
            (1.3, 0.13245),
        ];
        for (k, v) in cases {
            assert_abs_diff_eq!(bs_call(1.0, k, 0.02, 0.3, 3.0), v, epsilon = 5e-6);
        }
    }

    #[test]
    fn bs_call_zero_vol_limit() {
        let p = bs_call(1.0, 0.9, 0.02, 1e-12, 3.0);
        assert_abs_diff_eq!(p, 1.0 - 0.9 * (-0.06f64).exp(), epsilon = 1e-9);
        // Bounds: x >= price >= (x - K e^{-rT})_+, price decreasing in K.
        let mut last = f64::INFINITY;
        for k in [0.5, 0.8, 1.1, 1.4] {
            let p = bs_call(1.0, k, 0.02, 0.3, 3.0);
            assert!(p <= 1.0 && p >= (1.0 - k * (-0.06f64).exp()).max(0.0));
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn optimal_control_limits_and_shape() {
        // Deep out of the money: delta -> 0. Deep in: control -> -sigma x.
        assert_abs_diff_eq!(
            bs_optimal_control(0.0, 1e-6, 1.0, 0.02, 0.3, 3.0),
            0.0,
            epsilon = 1e-9
        );
        let x = 50.0;
        assert_relative_eq!(
            bs_optimal_control(0.0, x, 1.0, 0.02, 0.3, 3.0),
            -0.3 * x,
            max_relative = 1e-6
        );
        // Non-positive, decreasing in x.
        let mut last = 1.0;
        for i in 1..40 {
            let x = 0.1 * i as f64;
            let g = bs_optimal_control(1.0, x, 1.0, 0.02, 0.3, 3.0);
            assert!(g <= 0.0);
            assert!(g < last);
            last = g;
        }
    }

    #[test]
    fn optimal_control_matches_finite_difference_delta() {
        // -sigma x du/dx at (t=0, x=1), central difference in x.
        let (x, k, r, sig, t) = (1.0, 1.0, 0.02, 0.3, 3.0);
        let eps = 1e-6;
        let delta = (bs_call(x + eps, k, r, sig, t) - bs_call(x - eps, k, r, sig, t)) / (2.0 * eps);
        let g = bs_optimal_control(0.0, x, k, r, sig, t);
        assert_abs_diff_eq!(g, -sig * x * delta, epsilon = 1e-6);
    }

    #[test]
    fn merton_call_reproduces_published_values() {
        let cases = [
            (0.7, 0.41361),
            (0.8, 0.35593),
            (0.9, 0.30592),
            (1.0, 0.26298),
            (1.1, 0.22634),
            (1.2, 0.19519),
            (1.3, 0.16877),
        ];
        for (k, v) in cases {
            let p = merton_call(1.0, k, 0.02, 0.2, 1.0, -0.05, 0.3, 3.0);
            assert_abs_diff_eq!(p, v, epsilon = 5e-5);
        }
    }

    #[test]
    fn merton_series_truncation_is_stable() {
        let n = merton_term_count(1.0, -0.05, 0.3, 3.0);
        let a = merton_call_terms(1.0, 1.0, 0.02, 0.2, 1.0, -0.05, 0.3, 3.0, n);
        let b = merton_call_terms(1.0, 1.0, 0.02, 0.2, 1.0, -0.05, 0.3, 3.0, n + 5);
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn merton_no_jumps_is_black_scholes() {
        let a = merton_call(1.0, 1.0, 0.02, 0.2, 0.0, -0.05, 0.3, 3.0);
        let b = bs_call(1.0, 1.0, 0.02, 0.2, 3.0);
        assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        // Decreasing in strike.
        let mut last = f64::INFINITY;
        for k in [0.6, 0.8, 1.0, 1.2, 1.4] {
            let p = merton_call(1.0, k, 0.02, 0.2, 1.0, -0.05, 0.3, 3.0);
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn halfwidth_scale_constants() {
        assert_abs_diff_eq!(inv_norm_cdf(1.0 - 0.3174 / 2.0), 1.0, epsilon = 2e-4);
    }
}
