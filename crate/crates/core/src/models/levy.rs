//! Lévy measure descriptors and the derived quantities the jump-adapted
//! scheme needs: small-jump covariance, drift correction, large-jump
//! intensity and compensator, and large-jump sampling.

use crate::error::{Error, Result};
use crate::linalg::psd_sqrt;
use crate::quadrature;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// The jump measures in scope. `Merton` is a finite-activity compound
/// Poisson measure simulated exactly; `SingularTempered` has a power-law
/// singularity at zero (infinite activity) tempered by exponential tails
/// beyond |z| = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LevyMeasureKind {
    Merton {
        lambda: f64,
        jump_mean: f64,
        jump_sd: f64,
    },
    SingularTempered {
        c_minus: f64,
        c_plus: f64,
        alpha: f64,
        mu: f64,
    },
}

/// A Lévy measure plus the small-jump truncation level used to replace
/// jumps below `epsilon` with a Gaussian term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevyMeasureSpec {
    pub kind: LevyMeasureKind,
    pub epsilon: f64,
}

impl LevyMeasureSpec {
    pub fn merton(lambda: f64, jump_mean: f64, jump_sd: f64) -> Result<Self> {
        if lambda <= 0.0 {
            return Err(Error::invalid("lambda", "jump intensity must be positive"));
        }
        if jump_sd < 0.0 {
            return Err(Error::invalid("jump_sd", "must be non-negative"));
        }
        Ok(LevyMeasureSpec {
            kind: LevyMeasureKind::Merton {
                lambda,
                jump_mean,
                jump_sd,
            },
            // Merton is simulated natively with exact jumps; no truncation.
            epsilon: 0.0,
        })
    }

    pub fn singular_tempered(
        c_minus: f64,
        c_plus: f64,
        alpha: f64,
        mu: f64,
        epsilon: f64,
    ) -> Result<Self> {
        if c_minus < 0.0 || c_plus < 0.0 || c_minus + c_plus == 0.0 {
            return Err(Error::invalid(
                "c",
                "C- and C+ must be non-negative, not both zero",
            ));
        }
        if !(0.0 < alpha && alpha < 2.0) {
            return Err(Error::invalid("alpha", "stable index must be in (0, 2)"));
        }
        if mu <= 0.0 {
            return Err(Error::invalid("mu", "tempering rate must be positive"));
        }
        if epsilon <= 0.0 {
            return Err(Error::invalid("epsilon", "truncation must be positive"));
        }
        let spec = LevyMeasureSpec {
            kind: LevyMeasureKind::SingularTempered {
                c_minus,
                c_plus,
                alpha,
                mu,
            },
            epsilon,
        };
        // The defining integrability condition for a Lévy measure.
        let sq = spec.quad_small_second_moment(1.0, 1e-6)?;
        let tail = spec.quad_tail_mass(1e-6)?;
        if !(sq + tail).is_finite() {
            return Err(Error::invalid(
                "measure",
                "int (|z|^2 ^ 1) nu(dz) is not finite",
            ));
        }
        Ok(spec)
    }

    /// Density nu(z) of the measure (per unit intensity for Merton).
    pub fn density(&self, z: f64) -> f64 {
        match self.kind {
            LevyMeasureKind::Merton {
                lambda,
                jump_mean,
                jump_sd,
            } => {
                // Law of J = e^eta - 1, eta ~ N(jump_mean, jump_sd^2), scaled by lambda.
                if z <= -1.0 || jump_sd == 0.0 {
                    return 0.0;
                }
                let y = (1.0 + z).ln();
                let u = (y - jump_mean) / jump_sd;
                lambda * (-0.5 * u * u).exp()
                    / (jump_sd * (1.0 + z) * (2.0 * std::f64::consts::PI).sqrt())
            }
            LevyMeasureKind::SingularTempered {
                c_minus,
                c_plus,
                alpha,
                mu,
            } => {
                let az = z.abs();
                if z == 0.0 {
                    f64::INFINITY
                } else if z < -1.0 {
                    c_minus * (-mu * (az - 1.0)).exp()
                } else if z < 0.0 {
                    c_minus * az.powf(-(alpha + 1.0))
                } else if z <= 1.0 {
                    c_plus * az.powf(-(alpha + 1.0))
                } else {
                    c_plus * (-mu * (az - 1.0)).exp()
                }
            }
        }
    }

    /// int_{|z| < bound} z^2 nu(dz) by quadrature (u = z^10 substitution tames
    /// the power singularity at the origin for every alpha below 1.9).
    pub fn quad_small_second_moment(&self, bound: f64, rel_tol: f64) -> Result<f64> {
        match self.kind {
            LevyMeasureKind::Merton { .. } => quadrature::integrate(
                |z| z * z * self.density(z),
                -bound.min(0.999),
                bound,
                rel_tol,
                1e-300,
            ),
            LevyMeasureKind::SingularTempered { .. } => {
                let one_side = |sign: f64| {
                    let b = bound;
                    quadrature::integrate(
                        |t| {
                            let z = b * t.powi(10);
                            let jac = 10.0 * b * t.powi(9);
                            z * z * self.density(sign * z) * jac
                        },
                        0.0,
                        1.0,
                        rel_tol,
                        1e-300,
                    )
                };
                Ok(one_side(1.0)? + one_side(-1.0)?)
            }
        }
    }

    fn quad_tail_mass(&self, rel_tol: f64) -> Result<f64> {
        let zmax = self.tail_cutoff(0.0);
        let neg = quadrature::integrate(|z| self.density(z), -zmax, -1.0, rel_tol, 1e-300)?;
        let pos = quadrature::integrate(|z| self.density(z), 1.0, zmax, rel_tol, 1e-300)?;
        Ok(neg + pos)
    }

    /// Cutoff beyond which exp tails weighted by e^{f z} are below 1e-20.
    pub fn tail_cutoff(&self, f_abs: f64) -> f64 {
        match self.kind {
            LevyMeasureKind::Merton { jump_sd, .. } => (10.0 * jump_sd + 5.0).exp(),
            LevyMeasureKind::SingularTempered { mu, .. } => 1.0 + (50.0 + f_abs) / (mu - f_abs),
        }
    }
}

/// Quantities derived from a truncated Lévy measure. Closed forms for
/// `SingularTempered`, exact moments for `Merton`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevyDerived {
    /// int_{eps <= |z| <= 1} z nu(dz), the drift correction (length q).
    pub gamma_eps: Vec<f64>,
    /// int_{|z| < eps} z z^T nu(dz), small-jump covariance (q x q, row-major).
    pub b_eps: Vec<f64>,
    /// Matrix square root of `b_eps` (q x q, row-major).
    pub beta_eps: Vec<f64>,
    /// int_{|z| >= eps} nu(dz), the large-jump intensity.
    pub lambda_eps: f64,
    /// int_{|z| >= eps} z nu(dz), compensator of the linearized jump control.
    pub linear_compensator: Vec<f64>,
    sampler: JumpSampler,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum JumpSampler {
    Merton {
        jump_mean: f64,
        jump_sd: f64,
    },
    Singular {
        // Cumulative probabilities of the four pieces
        // (exp tail z < -1, power -1..-eps, power eps..1, exp tail z > 1).
        cum: [f64; 3],
        eps: f64,
        alpha: f64,
        mu: f64,
        eps_pow: f64, // eps^{-alpha}
    },
}

/// (1 - eps^{1-alpha}) / (1 - alpha), continuous through alpha = 1.
fn power_first_moment(alpha: f64, eps: f64) -> f64 {
    let u = (1.0 - alpha) * eps.ln();
    if (1.0 - alpha).abs() < 1e-12 {
        -eps.ln()
    } else {
        -u.exp_m1() / (1.0 - alpha)
    }
}

/// Derived quantities of a truncated measure (error if the truncation leaves
/// the power-law region, i.e. eps >= 1, for the singular measure).
pub fn levy_derive(measure: &LevyMeasureSpec) -> Result<LevyDerived> {
    match measure.kind {
        LevyMeasureKind::Merton {
            lambda,
            jump_mean,
            jump_sd,
        } => {
            let beta = (jump_mean + 0.5 * jump_sd * jump_sd).exp_m1();
            Ok(LevyDerived {
                gamma_eps: vec![0.0],
                b_eps: vec![0.0],
                beta_eps: vec![0.0],
                lambda_eps: lambda,
                linear_compensator: vec![lambda * beta],
                sampler: JumpSampler::Merton { jump_mean, jump_sd },
            })
        }
        LevyMeasureKind::SingularTempered {
            c_minus,
            c_plus,
            alpha,
            mu,
        } => {
            let eps = measure.epsilon;
            if eps >= 1.0 {
                return Err(Error::invalid(
                    "epsilon",
                    "truncation must stay inside the power-law region (< 1)",
                ));
            }
            let eps_pow = eps.powf(-alpha);
            let power_mass = (eps_pow - 1.0) / alpha;
            let m1 = power_first_moment(alpha, eps);
            let lambda_eps = (c_minus + c_plus) * (power_mass + 1.0 / mu);
            let gamma = (c_plus - c_minus) * m1;
            let b = (c_minus + c_plus) * eps.powf(2.0 - alpha) / (2.0 - alpha);
            // int_1^inf z e^{-mu(z-1)} dz = 1/mu + 1/mu^2
            let tail_m1 = (c_plus - c_minus) * (1.0 / mu + 1.0 / (mu * mu));
            let masses = [
                c_minus / mu,
                c_minus * power_mass,
                c_plus * power_mass,
                c_plus / mu,
            ];
            let total: f64 = masses.iter().sum();
            let cum = [
                masses[0] / total,
                (masses[0] + masses[1]) / total,
                (masses[0] + masses[1] + masses[2]) / total,
            ];
            Ok(LevyDerived {
                gamma_eps: vec![gamma],
                b_eps: vec![b],
                beta_eps: psd_sqrt(&[b], 1)?,
                lambda_eps,
                linear_compensator: vec![gamma + tail_m1],
                sampler: JumpSampler::Singular {
                    cum,
                    eps,
                    alpha,
                    mu,
                    eps_pow,
                },
            })
        }
    }
}

impl LevyDerived {
    pub fn jump_dim(&self) -> usize {
        self.gamma_eps.len()
    }

    /// True when the small-jump Gaussian term vanishes.
    pub fn beta_is_zero(&self) -> bool {
        self.beta_eps.iter().all(|&b| b == 0.0)
    }

    /// Draw one large jump with density nu(z) 1_{|z| > eps} / lambda_eps.
    /// The singular pieces are sampled by inverse CDF, the piece chosen
    /// proportionally to its mass; Merton jumps are exact shifted log-normals.
    pub fn sample_large_jump<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.jump_dim());
        match &self.sampler {
            JumpSampler::Merton { jump_mean, jump_sd } => {
                let n: f64 = rng.sample(StandardNormal);
                out[0] = (jump_mean + jump_sd * n).exp_m1();
            }
            JumpSampler::Singular {
                cum,
                eps,
                alpha,
                mu,
                eps_pow,
            } => {
                let piece: f64 = rng.gen();
                let u: f64 = rng.gen();
                let inv_power = |u: f64| -> f64 {
                    // CDF on [eps, 1] prop. to z^{-alpha-1}.
                    (eps_pow - u * (eps_pow - 1.0)).powf(-1.0 / alpha)
                };
                let inv_exp = |u: f64| -> f64 { 1.0 - (1.0 - u).ln() / mu };
                out[0] = if piece < cum[0] {
                    -inv_exp(u)
                } else if piece < cum[1] {
                    -inv_power(u)
                } else if piece < cum[2] {
                    inv_power(u)
                } else {
                    inv_exp(u)
                };
                debug_assert!(out[0].abs() >= *eps);
            }
        }
    }
}

/// The same derived quantities via adaptive quadrature, as an independent
/// route for validating the closed forms. Singular measure only.
pub fn levy_derive_by_quadrature(measure: &LevyMeasureSpec, rel_tol: f64) -> Result<LevyDerived> {
    let LevyMeasureKind::SingularTempered { .. } = measure.kind else {
        return Err(Error::invalid(
            "measure",
            "quadrature route is defined for the singular measure",
        ));
    };
    let eps = measure.epsilon;
    let zmax = measure.tail_cutoff(0.0);
    // Piecewise over |z| >= eps only; the origin is excluded by truncation.
    let sum_pieces = |f: &dyn Fn(f64) -> f64, abs_tol: f64| -> Result<f64> {
        let mut total = 0.0;
        for (a, b) in [(-zmax, -1.0), (-1.0, -eps), (eps, 1.0), (1.0, zmax)] {
            total += quadrature::integrate(f, a, b, rel_tol, abs_tol)?;
        }
        Ok(total)
    };
    let lambda_eps = sum_pieces(&|z| measure.density(z), 1e-300)?;
    let gamma = {
        let lo = quadrature::integrate(|z| z * measure.density(z), -1.0, -eps, rel_tol, 1e-14)?;
        let hi = quadrature::integrate(|z| z * measure.density(z), eps, 1.0, rel_tol, 1e-14)?;
        lo + hi
    };
    let b = measure.quad_small_second_moment(eps, rel_tol)?;
    let lin = sum_pieces(&|z| z * measure.density(z), 1e-14)?;
    let closed = levy_derive(measure)?;
    Ok(LevyDerived {
        gamma_eps: vec![gamma],
        b_eps: vec![b],
        beta_eps: psd_sqrt(&[b], 1)?,
        lambda_eps,
        linear_compensator: vec![lin],
        sampler: closed.sampler,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Domain};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn spec_case() -> LevyMeasureSpec {
        LevyMeasureSpec::singular_tempered(1.0, 1.0, 0.5, 2.0, 1e-3).unwrap()
    }

    #[test]
    fn symmetric_measure_closed_forms() {
        let d = levy_derive(&spec_case()).unwrap();
        // Symmetry kills the odd moments.
        assert_abs_diff_eq!(d.gamma_eps[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d.linear_compensator[0], 0.0, epsilon = 1e-14);
        // lambda_eps = 2[2(eps^{-1/2} - 1) + 1/mu]
        let eps: f64 = 1e-3;
        let expect = 2.0 * (2.0 * (eps.powf(-0.5) - 1.0) + 0.5);
        assert_relative_eq!(d.lambda_eps, expect, max_relative = 1e-13);
        assert_relative_eq!(d.lambda_eps, 123.49110640673517, max_relative = 1e-10);
        // B_eps = 2 eps^{3/2} / 1.5
        assert_relative_eq!(d.b_eps[0], 2.0 * eps.powf(1.5) / 1.5, max_relative = 1e-13);
        assert_relative_eq!(
            d.beta_eps[0] * d.beta_eps[0],
            d.b_eps[0],
            max_relative = 1e-12
        );
    }

    #[test]
    fn closed_forms_match_quadrature_randomized() {
        let mut rng = substream(2024, Domain::Test, 0);
        use rand::Rng;
        for _ in 0..10 {
            let c_minus = rng.gen_range(0.5..2.0);
            let c_plus = rng.gen_range(0.5..2.0);
            let alpha = rng.gen_range(0.2..1.5);
            let mu = rng.gen_range(1.0..4.0);
            let eps = rng.gen_range(1e-4..1e-2);
            let m = LevyMeasureSpec::singular_tempered(c_minus, c_plus, alpha, mu, eps).unwrap();
            let closed = levy_derive(&m).unwrap();
            let quad = levy_derive_by_quadrature(&m, 1e-11).unwrap();
            assert_relative_eq!(closed.lambda_eps, quad.lambda_eps, max_relative = 1e-8);
            assert_relative_eq!(closed.b_eps[0], quad.b_eps[0], max_relative = 1e-8);
            let scale = closed.lambda_eps;
            assert_abs_diff_eq!(
                closed.gamma_eps[0],
                quad.gamma_eps[0],
                epsilon = 1e-8 * (closed.gamma_eps[0].abs() + scale * 1e-6)
            );
            assert_abs_diff_eq!(
                closed.linear_compensator[0],
                quad.linear_compensator[0],
                epsilon = 1e-8 * (closed.linear_compensator[0].abs() + scale * 1e-6)
            );
        }
    }

    #[test]
    fn merton_derived_moments() {
        let m = LevyMeasureSpec::merton(1.0, -0.05, 0.3).unwrap();
        let d = levy_derive(&m).unwrap();
        assert_eq!(d.lambda_eps, 1.0);
        assert!(d.beta_is_zero());
        let beta = (-0.05f64 + 0.045).exp_m1();
        assert_relative_eq!(d.linear_compensator[0], beta, max_relative = 1e-14);
        // Degenerate jump law: beta = 0 when alpha_J = gamma_J = 0.
        let m0 = LevyMeasureSpec::merton(2.0, 0.0, 0.0).unwrap();
        let d0 = levy_derive(&m0).unwrap();
        assert_abs_diff_eq!(d0.linear_compensator[0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn merton_jump_mean_matches_beta() {
        let m = LevyMeasureSpec::merton(1.0, -0.05, 0.3).unwrap();
        let d = levy_derive(&m).unwrap();
        let mut rng = substream(7, Domain::Test, 1);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut j = [0.0];
        for _ in 0..n {
            d.sample_large_jump(&mut rng, &mut j);
            sum += j[0];
            sumsq += j[0] * j[0];
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        let beta = (-0.05f64 + 0.045).exp_m1();
        assert!(
            (mean - beta).abs() <= 3.0 * se,
            "jump mean {} vs beta {} (se {})",
            mean,
            beta,
            se
        );
    }

    #[test]
    fn singular_sampling_moments_and_masses() {
        // Asymmetric case so the compensator is non-trivial.
        let m = LevyMeasureSpec::singular_tempered(0.5, 1.5, 0.5, 2.0, 1e-3).unwrap();
        let d = levy_derive(&m).unwrap();
        let mut rng = substream(11, Domain::Test, 2);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut big = 0usize;
        let mut j = [0.0];
        for _ in 0..n {
            d.sample_large_jump(&mut rng, &mut j);
            sum += j[0];
            sumsq += j[0] * j[0];
            if j[0].abs() > 1.0 {
                big += 1;
            }
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        let expect_mean = d.linear_compensator[0] / d.lambda_eps;
        assert!(
            (mean - expect_mean).abs() <= 3.0 * se,
            "sample mean {} vs compensator/lambda {} (se {})",
            mean,
            expect_mean,
            se
        );
        // Fraction of samples beyond |z| = 1 is the exponential-tail share.
        let p = ((0.5 + 1.5) / 2.0) / d.lambda_eps;
        let se_p = (p * (1.0 - p) / n as f64).sqrt();
        assert!(((big as f64 / n as f64) - p).abs() <= 3.0 * se_p);
    }

    #[test]
    fn one_sided_measure_samples_positive() {
        let m = LevyMeasureSpec::singular_tempered(0.0, 1.0, 0.5, 2.0, 1e-3).unwrap();
        let d = levy_derive(&m).unwrap();
        let mut rng = substream(3, Domain::Test, 3);
        let mut j = [0.0];
        for _ in 0..10_000 {
            d.sample_large_jump(&mut rng, &mut j);
            assert!(j[0] > 0.0);
        }
    }

    #[test]
    fn truncation_outside_power_region_rejected() {
        let m = LevyMeasureSpec {
            kind: LevyMeasureKind::SingularTempered {
                c_minus: 1.0,
                c_plus: 1.0,
                alpha: 0.5,
                mu: 2.0,
            },
            epsilon: 1.5,
        };
        assert!(levy_derive(&m).is_err());
    }
}
