//! Financial/SDE model definitions: coefficient functions, payoffs, and the
//! builders for the models in scope (GBM with optional correlation, Heston,
//! exponential Lévy, Merton jump-diffusion).

mod levy;

pub use levy::{
    levy_derive, levy_derive_by_quadrature, LevyDerived, LevyMeasureKind, LevyMeasureSpec,
};

use crate::error::{Error, Result};
use crate::linalg::cholesky;
use crate::quadrature;
use serde::{Deserialize, Serialize};

/// Payoff at maturity, evaluated on the vector of underlier prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payoff {
    Call { strike: f64 },
    CallOnMax { strike: f64 },
}

impl Payoff {
    pub fn strike(&self) -> f64 {
        match *self {
            Payoff::Call { strike } | Payoff::CallOnMax { strike } => strike,
        }
    }

    pub fn with_strike(&self, strike: f64) -> Payoff {
        match self {
            Payoff::Call { .. } => Payoff::Call { strike },
            Payoff::CallOnMax { .. } => Payoff::CallOnMax { strike },
        }
    }

    pub fn evaluate(&self, prices: &[f64]) -> f64 {
        match *self {
            Payoff::Call { strike } => (prices[0] - strike).max(0.0),
            Payoff::CallOnMax { strike } => {
                let best = prices.iter().fold(f64::NEG_INFINITY, |a, &p| a.max(p));
                (best - strike).max(0.0)
            }
        }
    }
}

/// Heston parameters; the scheme layer solves the implicit variance update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HestonParams {
    pub rate: f64,
    pub kappa: f64,
    pub theta: f64,
    pub vol_of_vol: f64,
    pub rho: f64,
    pub v0: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum ModelKind {
    Gbm {
        rate: f64,
        vol: f64,
        /// Lower Cholesky factor of the correlation matrix (d x d, row-major).
        chol: Option<Vec<f64>>,
    },
    Heston(HestonParams),
    Merton {
        rate: f64,
        vol: f64,
        /// Mean relative jump size E[J] = exp(jump_mean + jump_sd^2/2) - 1.
        beta: f64,
        lambda: f64,
    },
    ExpLevy {
        rate: f64,
        /// d x d diffusion factor, row-major.
        sigma: Vec<f64>,
        /// d-vector multiplying the scalar jump.
        jump_coeff: Vec<f64>,
        /// Martingale drift per component, fixed at construction.
        drift: Vec<f64>,
        /// Spot prices; the SDE state is the log-increment process from 0.
        spot: Vec<f64>,
    },
}

/// One pricing problem: coefficients b, sigma, c, g, F, the jump measure,
/// horizon and initial state. Immutable after construction and shareable
/// across path workers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    dim: usize,
    jump_dim: usize,
    horizon: f64,
    x0: Vec<f64>,
    measure: Option<LevyMeasureSpec>,
    kind: ModelKind,
}

/// Default maturity for the experiments in scope.
pub const DEFAULT_HORIZON: f64 = 3.0;

impl ModelSpec {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn jump_dim(&self) -> usize {
        self.jump_dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn measure(&self) -> Option<&LevyMeasureSpec> {
        self.measure.as_ref()
    }

    pub fn with_horizon(mut self, horizon: f64) -> Result<Self> {
        if horizon <= 0.0 {
            return Err(Error::invalid("horizon", "must be positive"));
        }
        self.horizon = horizon;
        Ok(self)
    }

    /// Replace the initial state (spot prices for the exponential Lévy model).
    pub fn with_initial(mut self, x0: Vec<f64>) -> Result<Self> {
        match &mut self.kind {
            ModelKind::ExpLevy { spot, .. } => {
                if x0.len() != spot.len() {
                    return Err(Error::invalid("x0", "dimension mismatch"));
                }
                *spot = x0;
            }
            _ => {
                if x0.len() != self.dim {
                    return Err(Error::invalid("x0", "dimension mismatch"));
                }
                self.x0 = x0;
            }
        }
        Ok(self)
    }

    pub fn heston_params(&self) -> Option<&HestonParams> {
        match &self.kind {
            ModelKind::Heston(p) => Some(p),
            _ => None,
        }
    }

    /// Drift b(t, x).
    pub fn drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            ModelKind::Gbm { rate, .. } => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = rate * xi;
                }
            }
            ModelKind::Heston(p) => {
                out[0] = p.rate * x[0];
                out[1] = p.kappa * (p.theta - x[1]);
            }
            ModelKind::Merton {
                rate, beta, lambda, ..
            } => {
                out[0] = (rate - lambda * beta) * x[0];
            }
            ModelKind::ExpLevy { drift, .. } => out.copy_from_slice(drift),
        }
    }

    /// Correlate a vector of independent Brownian increments in place, for
    /// models whose driving noise is defined as correlated (multi-GBM).
    pub fn transform_noise(&self, dw: &mut [f64], scratch: &mut [f64]) {
        if let ModelKind::Gbm { chol: Some(l), .. } = &self.kind {
            let d = self.dim;
            scratch[..d].copy_from_slice(dw);
            for i in 0..d {
                let mut s = 0.0;
                for j in 0..=i {
                    s += l[i * d + j] * scratch[j];
                }
                dw[i] = s;
            }
        }
    }

    /// out = sigma(t, x) dw.
    pub fn apply_diffusion(&self, _t: f64, x: &[f64], dw: &[f64], out: &mut [f64]) {
        match &self.kind {
            ModelKind::Gbm { vol, .. } => {
                for i in 0..self.dim {
                    out[i] = vol * x[i] * dw[i];
                }
            }
            ModelKind::Heston(p) => {
                let sv = x[1].max(0.0).sqrt();
                out[0] = sv * x[0] * dw[0];
                out[1] = p.vol_of_vol * sv * (p.rho * dw[0] + (1.0 - p.rho * p.rho).sqrt() * dw[1]);
            }
            ModelKind::Merton { vol, .. } => {
                out[0] = vol * x[0] * dw[0];
            }
            ModelKind::ExpLevy { sigma, .. } => {
                let d = self.dim;
                for i in 0..d {
                    let mut s = 0.0;
                    for j in 0..d {
                        s += sigma[i * d + j] * dw[j];
                    }
                    out[i] = s;
                }
            }
        }
    }

    /// Full diffusion matrix sigma(t, x), row-major d x d.
    pub fn diffusion_matrix(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut m = vec![0.0; d * d];
        let mut e = vec![0.0; d];
        let mut col = vec![0.0; d];
        for j in 0..d {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            self.apply_diffusion(t, x, &e, &mut col);
            for i in 0..d {
                m[i * d + j] = col[i];
            }
        }
        m
    }

    /// Discount-rate coefficient c(t, x); constant -r for all models in scope.
    pub fn discount_rate(&self, _t: f64, _x: &[f64]) -> f64 {
        match &self.kind {
            ModelKind::Gbm { rate, .. } => -rate,
            ModelKind::Heston(p) => -p.rate,
            ModelKind::Merton { rate, .. } => -rate,
            ModelKind::ExpLevy { rate, .. } => -rate,
        }
    }

    /// Running cost g(t, x); zero for every model in scope.
    pub fn running_cost(&self, _t: f64, _x: &[f64]) -> f64 {
        0.0
    }

    /// out = F(t, x) z for a jump (or jump-moment) vector z of length q.
    pub fn apply_jump_coeff(&self, _t: f64, x: &[f64], z: &[f64], out: &mut [f64]) {
        match &self.kind {
            ModelKind::Merton { .. } => {
                out[0] = x[0] * z[0];
            }
            ModelKind::ExpLevy { jump_coeff, .. } => {
                for (o, f) in out.iter_mut().zip(jump_coeff) {
                    *o = f * z[0];
                }
            }
            _ => out.iter_mut().for_each(|o| *o = 0.0),
        }
    }

    pub fn n_underliers(&self) -> usize {
        match &self.kind {
            ModelKind::Heston(_) => 1,
            _ => self.dim,
        }
    }

    /// Map the SDE state to underlier prices at time t.
    pub fn underliers(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            ModelKind::Heston(_) => out[0] = x[0],
            ModelKind::ExpLevy { rate, spot, .. } => {
                for i in 0..self.dim {
                    out[i] = spot[i] * (rate * t + x[i]).exp();
                }
            }
            _ => out.copy_from_slice(x),
        }
    }

    /// Short rate, for discount factors and reference pricing.
    pub fn rate(&self) -> f64 {
        -self.discount_rate(0.0, &self.x0)
    }

    /// Initial underlier prices.
    pub fn spot(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n_underliers()];
        self.underliers(0.0, &self.x0, &mut s);
        s
    }
}

/// Geometric Brownian motion in d dimensions with an optional correlation
/// matrix for the driving Wiener processes. Spot 1, horizon 3 by default.
pub fn build_gbm(
    rate: f64,
    vol: f64,
    correlation: Option<&[f64]>,
    dim: usize,
) -> Result<ModelSpec> {
    if vol < 0.0 {
        return Err(Error::invalid("vol", "must be non-negative"));
    }
    if dim == 0 {
        return Err(Error::invalid("dim", "must be at least 1"));
    }
    let chol = match correlation {
        None => None,
        Some(c) => {
            if c.len() != dim * dim {
                return Err(Error::invalid("correlation", "must be d x d"));
            }
            for i in 0..dim {
                if (c[i * dim + i] - 1.0).abs() > 1e-12 {
                    return Err(Error::invalid("correlation", "diagonal must be 1"));
                }
                for j in 0..dim {
                    if (c[i * dim + j] - c[j * dim + i]).abs() > 1e-12 {
                        return Err(Error::invalid("correlation", "must be symmetric"));
                    }
                }
            }
            Some(cholesky(c, dim)?)
        }
    };
    Ok(ModelSpec {
        dim,
        jump_dim: 0,
        horizon: DEFAULT_HORIZON,
        x0: vec![1.0; dim],
        measure: None,
        kind: ModelKind::Gbm { rate, vol, chol },
    })
}

/// Heston stochastic-volatility model; requires the positivity condition
/// 2 kappa theta > vol_of_vol^2 so the implicit variance update stays
/// strictly positive.
pub fn build_heston(
    rate: f64,
    kappa: f64,
    theta: f64,
    vol_of_vol: f64,
    rho: f64,
    v0: f64,
) -> Result<ModelSpec> {
    if kappa <= 0.0 || theta <= 0.0 {
        return Err(Error::invalid("kappa/theta", "must be positive"));
    }
    if vol_of_vol < 0.0 {
        return Err(Error::invalid("vol_of_vol", "must be non-negative"));
    }
    if !(rho > -1.0 && rho < 1.0) {
        return Err(Error::invalid("rho", "must be in (-1, 1)"));
    }
    if v0 < 0.0 {
        return Err(Error::invalid("v0", "must be non-negative"));
    }
    if 2.0 * kappa * theta <= vol_of_vol * vol_of_vol {
        return Err(Error::invalid(
            "vol_of_vol",
            format!(
                "positivity requires 2*kappa*theta > vol_of_vol^2 ({} <= {})",
                2.0 * kappa * theta,
                vol_of_vol * vol_of_vol
            ),
        ));
    }
    Ok(ModelSpec {
        dim: 2,
        jump_dim: 0,
        horizon: DEFAULT_HORIZON,
        x0: vec![1.0, v0],
        measure: None,
        kind: ModelKind::Heston(HestonParams {
            rate,
            kappa,
            theta,
            vol_of_vol,
            rho,
            v0,
        }),
    })
}

/// Merton jump-diffusion, represented natively as a finite-activity model
/// with exact shifted log-normal jumps and compensating drift r - lambda beta.
pub fn build_merton(
    rate: f64,
    vol: f64,
    lambda: f64,
    jump_mean: f64,
    jump_sd: f64,
) -> Result<ModelSpec> {
    if vol < 0.0 {
        return Err(Error::invalid("vol", "must be non-negative"));
    }
    let measure = LevyMeasureSpec::merton(lambda, jump_mean, jump_sd)?;
    let beta = (jump_mean + 0.5 * jump_sd * jump_sd).exp_m1();
    Ok(ModelSpec {
        dim: 1,
        jump_dim: 1,
        horizon: DEFAULT_HORIZON,
        x0: vec![1.0],
        measure: Some(measure),
        kind: ModelKind::Merton {
            rate,
            vol,
            beta,
            lambda,
        },
    })
}

/// e^{f z} - 1 - f z, stable near zero.
fn exp_compensated(fz: f64) -> f64 {
    if fz.abs() < 1e-4 {
        let f2 = fz * fz;
        0.5 * f2 * (1.0 + fz / 3.0 + f2 / 12.0 + f2 * fz / 60.0)
    } else {
        fz.exp_m1() - fz
    }
}

/// Martingale drift component for the exponential Lévy model:
/// b_i = -1/2 sum_j sigma_ij^2 - int (e^{f_i z} - 1 - f_i z 1_{|z|<1}) nu(dz),
/// with the integral by adaptive quadrature split at z in {-1, 0, 1} and the
/// origin singularity removed by a power substitution.
fn exp_levy_drift_component(measure: &LevyMeasureSpec, f_i: f64, sigma_row_sq: f64) -> Result<f64> {
    let LevyMeasureKind::SingularTempered { mu, .. } = measure.kind else {
        return Err(Error::invalid(
            "measure",
            "exponential Lévy model requires the singular tempered measure",
        ));
    };
    if f_i.abs() >= mu {
        return Err(Error::QuadratureNonConvergence(format!(
            "exp moment diverges: |f| = {} >= tempering mu = {}",
            f_i.abs(),
            mu
        )));
    }
    let rel_tol = 1e-10;
    // Inner region, one side at a time with z = t^10.
    let inner = |sign: f64| {
        quadrature::integrate(
            |t: f64| {
                let z = sign * t.powi(10);
                let jac = 10.0 * t.powi(9);
                exp_compensated(f_i * z) * measure.density(z) * jac
            },
            0.0,
            1.0,
            rel_tol,
            1e-300,
        )
    };
    let zmax = measure.tail_cutoff(f_i.abs());
    let tail = |sign: f64| {
        quadrature::integrate(
            |z: f64| ((f_i * sign * z).exp() - 1.0) * measure.density(sign * z),
            1.0,
            zmax,
            rel_tol,
            1e-300,
        )
    };
    let integral = inner(1.0)? + inner(-1.0)? + tail(1.0)? + tail(-1.0)?;
    Ok(-0.5 * sigma_row_sq - integral)
}

/// Exponential Lévy model: S_i(t) = S_i(0) exp(r t + X_i(t)) with constant
/// diffusion factor and scalar-jump coefficients, drift fixed so discounted
/// prices are martingales.
pub fn build_exp_levy(
    rate: f64,
    sigma: &[f64],
    jump_coeff: &[f64],
    measure: LevyMeasureSpec,
) -> Result<ModelSpec> {
    let dim = jump_coeff.len();
    if dim == 0 {
        return Err(Error::invalid(
            "jump_coeff",
            "must have at least one component",
        ));
    }
    if sigma.len() != dim * dim {
        return Err(Error::invalid("sigma", "must be d x d"));
    }
    let mut drift = vec![0.0; dim];
    for i in 0..dim {
        let row_sq: f64 = (0..dim).map(|j| sigma[i * dim + j].powi(2)).sum();
        drift[i] = exp_levy_drift_component(&measure, jump_coeff[i], row_sq)?;
    }
    Ok(ModelSpec {
        dim,
        jump_dim: 1,
        horizon: DEFAULT_HORIZON,
        x0: vec![0.0; dim],
        measure: Some(measure),
        kind: ModelKind::ExpLevy {
            rate,
            sigma: sigma.to_vec(),
            jump_coeff: jump_coeff.to_vec(),
            drift,
            spot: vec![1.0; dim],
        },
    })
}
