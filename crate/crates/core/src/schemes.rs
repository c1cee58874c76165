//! Numerical integration of the model systems: explicit Euler, the
//! semi-implicit Heston scheme, and the restricted jump-adapted scheme, with
//! optional full trajectory recording for replay training.
//!
//! Every path owns a private RNG substream addressed by `(seed, domain,
//! path index)`, so batches are embarrassingly parallel and bit-reproducible
//! regardless of thread count.

use crate::error::{Error, Result};
use crate::models::{LevyDerived, ModelSpec, Payoff};
use crate::rng::{substream, Domain};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    Deterministic,
    Jump,
}

/// Ragged per-path record of one simulated trajectory: states, discount
/// factors and every noise increment, enough to replay the controlled
/// functional for any control without re-simulating.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryRecord {
    /// n+1 strictly increasing times from s to T.
    pub times: Vec<f64>,
    /// (n+1) x d states, row-major.
    pub states: Vec<f64>,
    /// n+1 discount factors (the Y process).
    pub discounts: Vec<f64>,
    /// n step kinds.
    pub step_kinds: Vec<StepKind>,
    /// n x d Brownian increments driving the diffusion part.
    pub dw: Vec<f64>,
    /// n x q small-jump Gaussian increments (jump models only, else empty).
    pub dw_small: Vec<f64>,
    /// n x q jump sizes; zero rows on deterministic steps.
    pub jumps: Vec<f64>,
    /// Payoff functional of this path with all controls at zero.
    pub gamma_base: f64,
}

impl TrajectoryRecord {
    pub fn n_steps(&self) -> usize {
        self.step_kinds.len()
    }

    fn with_capacity(n_hint: usize, dim: usize, jump_dim: usize) -> Self {
        TrajectoryRecord {
            times: Vec::with_capacity(n_hint + 1),
            states: Vec::with_capacity((n_hint + 1) * dim),
            discounts: Vec::with_capacity(n_hint + 1),
            step_kinds: Vec::with_capacity(n_hint),
            dw: Vec::with_capacity(n_hint * dim),
            dw_small: Vec::with_capacity(n_hint * jump_dim),
            jumps: Vec::with_capacity(n_hint * jump_dim),
            gamma_base: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchemeKind {
    EulerExplicit,
    HestonSemiImplicit,
    JumpAdapted,
}

/// A numerical scheme: the update rule and the (maximum) step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeSpec {
    pub kind: SchemeKind,
    pub h: f64,
}

impl SchemeSpec {
    pub fn new(kind: SchemeKind, h: f64) -> Self {
        SchemeSpec { kind, h }
    }

    /// The natural scheme for a model.
    pub fn for_model(model: &ModelSpec, h: f64) -> Self {
        let kind = if model.measure().is_some() {
            SchemeKind::JumpAdapted
        } else if model.heston_params().is_some() {
            SchemeKind::HestonSemiImplicit
        } else {
            SchemeKind::EulerExplicit
        };
        SchemeSpec { kind, h }
    }

    /// Number of uniform grid steps; requires h to divide the horizon.
    pub fn grid_steps(&self, horizon: f64) -> Result<usize> {
        if self.h <= 0.0 {
            return Err(Error::invalid("h", "step size must be positive"));
        }
        let n = (horizon / self.h).round();
        if n < 1.0 || (n * self.h - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(Error::invalid(
                "h",
                format!("step {} must divide horizon {}", self.h, horizon),
            ));
        }
        Ok(n as usize)
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        self.grid_steps(model.horizon())?;
        let want = SchemeSpec::for_model(model, self.h).kind;
        if self.kind != want {
            let name = |k: SchemeKind| match k {
                SchemeKind::EulerExplicit => "euler_explicit",
                SchemeKind::HestonSemiImplicit => "heston_semi_implicit",
                SchemeKind::JumpAdapted => "jump_adapted",
            };
            return Err(Error::SchemeMismatch {
                scheme: name(self.kind),
                model: name(want),
            });
        }
        Ok(())
    }
}

/// One explicit Euler step: x + b(t,x) h + sigma(t,x) dw. The increment `dw`
/// carries variance h per component.
pub fn euler_step(model: &ModelSpec, t: f64, x: &[f64], h: f64, dw: &[f64]) -> Vec<f64> {
    assert!(h > 0.0);
    let d = model.dim();
    let mut drift = vec![0.0; d];
    let mut diff = vec![0.0; d];
    model.drift(t, x, &mut drift);
    model.apply_diffusion(t, x, dw, &mut diff);
    (0..d).map(|i| x[i] + drift[i] * h + diff[i]).collect()
}

/// One step of the Heston scheme: explicit Euler in the asset, fully
/// implicit Euler in the variance with the implicitness resolved by the
/// quadratic in sqrt(V'). `dw1` drives the asset; the variance sees the
/// correlated increment rho dw1 + sqrt(1-rho^2) dw2.
pub fn heston_step(
    params: &crate::models::HestonParams,
    x: f64,
    v: f64,
    h: f64,
    dw1: f64,
    dw2: f64,
) -> (f64, f64) {
    debug_assert!(v >= 0.0);
    let x_next = x + params.rate * x * h + v.max(0.0).sqrt() * x * dw1;
    let dwv = params.rho * dw1 + (1.0 - params.rho * params.rho).sqrt() * dw2;
    let sv = params.vol_of_vol;
    // (1 + kappa h) s^2 - sv dwv s - (v + kappa theta h - sv^2 h / 2) = 0
    let a = 1.0 + params.kappa * h;
    let b = sv * dwv;
    let c = v + params.kappa * params.theta * h - 0.5 * sv * sv * h;
    let disc = b * b + 4.0 * a * c;
    assert!(
        disc >= 0.0,
        "implicit variance discriminant negative; positivity condition violated"
    );
    let s = (b + disc.sqrt()) / (2.0 * a);
    (x_next, s * s)
}

struct PathScratch {
    drift: Vec<f64>,
    diff: Vec<f64>,
    dw: Vec<f64>,
    correlate: Vec<f64>,
    jump: Vec<f64>,
    jump_push: Vec<f64>,
    dw_small: Vec<f64>,
    state: Vec<f64>,
    next_state: Vec<f64>,
    underliers: Vec<f64>,
}

impl PathScratch {
    fn new(model: &ModelSpec) -> Self {
        let d = model.dim();
        let q = model.jump_dim().max(1);
        PathScratch {
            drift: vec![0.0; d],
            diff: vec![0.0; d],
            dw: vec![0.0; d],
            correlate: vec![0.0; d],
            jump: vec![0.0; q],
            jump_push: vec![0.0; d],
            dw_small: vec![0.0; q],
            state: vec![0.0; d],
            next_state: vec![0.0; d],
            underliers: vec![0.0; model.n_underliers()],
        }
    }
}

/// Output of one simulated path.
pub struct PathOutput {
    /// f(X(T)) Y(T) + Z(T) with all controls at zero.
    pub gamma_base: f64,
    /// Y(T) times the first underlier price, for the crude control variate.
    pub discounted_spot: f64,
    pub record: Option<TrajectoryRecord>,
}

/// Simulate one path of the zero-control system.
pub fn simulate_path(
    model: &ModelSpec,
    derived: Option<&LevyDerived>,
    scheme: &SchemeSpec,
    payoff: &Payoff,
    rng: &mut ChaCha8Rng,
    record: bool,
) -> Result<PathOutput> {
    match scheme.kind {
        SchemeKind::EulerExplicit | SchemeKind::HestonSemiImplicit => {
            diffusion_path(model, scheme, payoff, rng, record)
        }
        SchemeKind::JumpAdapted => {
            let derived = derived.ok_or_else(|| {
                Error::invalid("derived", "jump-adapted scheme needs derived measure data")
            })?;
            jump_adapted_path(model, derived, payoff, scheme.h, rng, record)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn push_record_step(
    rec: &mut TrajectoryRecord,
    kind: StepKind,
    t_next: f64,
    state: &[f64],
    y: f64,
    dw: &[f64],
    dw_small: Option<&[f64]>,
    jump: Option<&[f64]>,
) {
    rec.step_kinds.push(kind);
    rec.dw.extend_from_slice(dw);
    if let Some(s) = dw_small {
        rec.dw_small.extend_from_slice(s);
    }
    if let Some(j) = jump {
        rec.jumps.extend_from_slice(j);
    }
    rec.times.push(t_next);
    rec.states.extend_from_slice(state);
    rec.discounts.push(y);
}

fn diffusion_path(
    model: &ModelSpec,
    scheme: &SchemeSpec,
    payoff: &Payoff,
    rng: &mut ChaCha8Rng,
    record: bool,
) -> Result<PathOutput> {
    let d = model.dim();
    let horizon = model.horizon();
    let n = scheme.grid_steps(horizon)?;
    let mut s = PathScratch::new(model);
    s.state.copy_from_slice(model.x0());
    let mut y = 1.0;
    let mut z = 0.0;
    let mut rec = record.then(|| {
        let mut r = TrajectoryRecord::with_capacity(n, d, 0);
        r.times.push(0.0);
        r.states.extend_from_slice(&s.state);
        r.discounts.push(1.0);
        r
    });
    for k in 0..n {
        let t = horizon * k as f64 / n as f64;
        let t_next = horizon * (k + 1) as f64 / n as f64;
        let theta = t_next - t;
        let sq = theta.sqrt();
        for w in s.dw.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *w = n * sq;
        }
        model.transform_noise(&mut s.dw, &mut s.correlate);
        match scheme.kind {
            SchemeKind::EulerExplicit => {
                model.drift(t, &s.state, &mut s.drift);
                model.apply_diffusion(t, &s.state, &s.dw, &mut s.diff);
                for i in 0..d {
                    s.next_state[i] = s.state[i] + s.drift[i] * theta + s.diff[i];
                }
            }
            SchemeKind::HestonSemiImplicit => {
                let p = model.heston_params().ok_or(Error::SchemeMismatch {
                    scheme: "heston_semi_implicit",
                    model: "non-heston",
                })?;
                let (x1, v1) = heston_step(p, s.state[0], s.state[1], theta, s.dw[0], s.dw[1]);
                s.next_state[0] = x1;
                s.next_state[1] = v1;
            }
            SchemeKind::JumpAdapted => unreachable!(),
        }
        let y_next = y + model.discount_rate(t, &s.state) * y * theta;
        z += model.running_cost(t, &s.state) * y * theta;
        std::mem::swap(&mut s.state, &mut s.next_state);
        y = y_next;
        if let Some(r) = rec.as_mut() {
            push_record_step(
                r,
                StepKind::Deterministic,
                t_next,
                &s.state,
                y,
                &s.dw,
                None,
                None,
            );
        }
    }
    model.underliers(horizon, &s.state, &mut s.underliers);
    let gamma = payoff.evaluate(&s.underliers) * y + z;
    if let Some(r) = rec.as_mut() {
        r.gamma_base = gamma;
    }
    Ok(PathOutput {
        gamma_base: gamma,
        discounted_spot: y * s.underliers[0],
        record: rec,
    })
}

/// Jump-adapted path: exponential waiting times superimposed on the uniform
/// h-grid, stepping to whichever comes first; jumps apply a sampled large
/// jump, grid steps are plain Euler, and the final step lands exactly on T.
/// Y and Z advance by explicit Euler over the same random step lengths.
pub fn jump_adapted_path(
    model: &ModelSpec,
    derived: &LevyDerived,
    payoff: &Payoff,
    h: f64,
    rng: &mut ChaCha8Rng,
    record: bool,
) -> Result<PathOutput> {
    let d = model.dim();
    let q = model.jump_dim();
    let horizon = model.horizon();
    let scheme = SchemeSpec::new(SchemeKind::JumpAdapted, h);
    let n = scheme.grid_steps(horizon)?;
    let lambda = derived.lambda_eps;
    let gamma_corr = &derived.gamma_eps;
    let has_gamma = gamma_corr.iter().any(|&g| g != 0.0);
    let beta_zero = derived.beta_is_zero();

    let mut s = PathScratch::new(model);
    s.state.copy_from_slice(model.x0());
    let mut y = 1.0;
    let mut z = 0.0;
    let expected = n + (lambda * horizon) as usize + 4;
    let mut rec = record.then(|| {
        let mut r = TrajectoryRecord::with_capacity(expected, d, q);
        r.times.push(0.0);
        r.states.extend_from_slice(&s.state);
        r.discounts.push(1.0);
        r
    });

    let mut t = 0.0;
    let mut grid_i = 1usize;
    let mut beta_dw = vec![0.0; q];
    while grid_i <= n {
        let next_grid = horizon * grid_i as f64 / n as f64;
        let delta = if lambda > 0.0 {
            let u: f64 = rng.gen();
            -(1.0 - u).ln() / lambda
        } else {
            f64::INFINITY
        };
        let is_jump = t + delta < next_grid;
        let t_next = if is_jump { t + delta } else { next_grid };
        let theta = t_next - t;
        let sq = theta.sqrt();
        for w in s.dw.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *w = g * sq;
        }
        model.transform_noise(&mut s.dw, &mut s.correlate);
        for w in s.dw_small.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *w = g * sq;
        }
        if is_jump {
            derived.sample_large_jump(rng, &mut s.jump);
        } else {
            s.jump.iter_mut().for_each(|j| *j = 0.0);
        }

        model.drift(t, &s.state, &mut s.drift);
        model.apply_diffusion(t, &s.state, &s.dw, &mut s.diff);
        for i in 0..d {
            s.next_state[i] = s.state[i] + s.drift[i] * theta + s.diff[i];
        }
        if has_gamma {
            model.apply_jump_coeff(t, &s.state, gamma_corr, &mut s.jump_push);
            for i in 0..d {
                s.next_state[i] -= s.jump_push[i] * theta;
            }
        }
        if !beta_zero {
            for (i, out) in beta_dw.iter_mut().enumerate() {
                let mut acc = 0.0;
                for j in 0..q {
                    acc += derived.beta_eps[i * q + j] * s.dw_small[j];
                }
                *out = acc;
            }
            model.apply_jump_coeff(t, &s.state, &beta_dw, &mut s.jump_push);
            for i in 0..d {
                s.next_state[i] += s.jump_push[i];
            }
        }
        if is_jump {
            model.apply_jump_coeff(t, &s.state, &s.jump, &mut s.jump_push);
            for i in 0..d {
                s.next_state[i] += s.jump_push[i];
            }
        }
        let y_next = y + model.discount_rate(t, &s.state) * y * theta;
        z += model.running_cost(t, &s.state) * y * theta;
        std::mem::swap(&mut s.state, &mut s.next_state);
        y = y_next;
        if let Some(r) = rec.as_mut() {
            push_record_step(
                r,
                if is_jump {
                    StepKind::Jump
                } else {
                    StepKind::Deterministic
                },
                t_next,
                &s.state,
                y,
                &s.dw,
                Some(&s.dw_small),
                Some(&s.jump),
            );
        }
        t = t_next;
        if !is_jump {
            grid_i += 1;
        }
    }
    model.underliers(horizon, &s.state, &mut s.underliers);
    let gamma = payoff.evaluate(&s.underliers) * y + z;
    if let Some(r) = rec.as_mut() {
        r.gamma_base = gamma;
    }
    Ok(PathOutput {
        gamma_base: gamma,
        discounted_spot: y * s.underliers[0],
        record: rec,
    })
}

/// Result of a batch simulation.
pub struct SimBatch {
    pub gamma_base: Vec<f64>,
    pub discounted_spot: Vec<f64>,
    pub records: Option<Vec<TrajectoryRecord>>,
}

/// Simulate `m` independent paths with per-path RNG substreams starting at
/// `start_index` in `domain`. Identical (seed, model, scheme) give
/// bit-identical output regardless of thread scheduling.
#[allow(clippy::too_many_arguments)]
pub fn simulate_batch_indexed(
    model: &ModelSpec,
    derived: Option<&LevyDerived>,
    scheme: &SchemeSpec,
    payoff: &Payoff,
    m: usize,
    seed: u64,
    domain: Domain,
    start_index: u64,
    record: bool,
) -> Result<SimBatch> {
    if m < 1 {
        return Err(Error::invalid("m", "need at least one path"));
    }
    scheme.validate(model)?;
    let outs: Result<Vec<PathOutput>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, domain, start_index + i as u64);
            simulate_path(model, derived, scheme, payoff, &mut rng, record)
        })
        .collect();
    let outs = outs?;
    let gamma_base = outs.iter().map(|o| o.gamma_base).collect();
    let discounted_spot = outs.iter().map(|o| o.discounted_spot).collect();
    let records = record.then(|| outs.into_iter().filter_map(|o| o.record).collect());
    Ok(SimBatch {
        gamma_base,
        discounted_spot,
        records,
    })
}

/// First-pass style batch starting at path index 0.
pub fn simulate_batch(
    model: &ModelSpec,
    derived: Option<&LevyDerived>,
    scheme: &SchemeSpec,
    payoff: &Payoff,
    m: usize,
    seed: u64,
    record: bool,
) -> Result<SimBatch> {
    simulate_batch_indexed(
        model,
        derived,
        scheme,
        payoff,
        m,
        seed,
        Domain::FirstPassPath,
        0,
        record,
    )
}

/// Expected number of scheme steps per path (grid steps plus mean jump count).
pub fn expected_steps(model: &ModelSpec, derived: Option<&LevyDerived>, h: f64) -> f64 {
    let n = (model.horizon() / h).round();
    let jumps = derived.map_or(0.0, |d| d.lambda_eps * model.horizon());
    n + jumps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_gbm, build_heston, build_merton, levy_derive};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn euler_step_pure_drift() {
        let m = build_gbm(0.02, 0.3, None, 1).unwrap();
        let x = euler_step(&m, 0.0, &[1.0], 0.003, &[0.0]);
        assert_abs_diff_eq!(x[0], 1.00006, epsilon = 1e-12);
    }

    #[test]
    fn euler_step_identity_diffusion() {
        // b = 0, sigma = identity: achieved by GBM with r=0, vol=1 at x=1.
        let m = build_gbm(0.0, 1.0, None, 1).unwrap();
        let x = euler_step(&m, 0.0, &[1.0], 0.01, &[0.25]);
        assert_abs_diff_eq!(x[0], 1.25, epsilon = 1e-15);
    }

    #[test]
    fn heston_step_zero_vol_of_vol_relaxes() {
        let m = build_heston(0.02, 0.25, 0.5, 0.0, 0.0, 0.15).unwrap();
        let p = m.heston_params().unwrap();
        let (_, v1) = heston_step(p, 1.0, 0.15, 0.003, 0.1, -0.2);
        let expect = (0.15 + 0.25 * 0.5 * 0.003) / (1.0 + 0.25 * 0.003);
        assert_relative_eq!(v1, expect, max_relative = 1e-14);
    }

    #[test]
    fn heston_step_satisfies_fixed_point() {
        let m = build_heston(0.02, 0.25, 0.5, 0.3, -0.3, 0.15).unwrap();
        let p = m.heston_params().unwrap();
        let (h, dw1, dw2) = (0.003, 0.1, 0.04);
        let (_, v1) = heston_step(p, 1.0, 0.15, h, dw1, dw2);
        let dwv = p.rho * dw1 + (1.0 - p.rho * p.rho).sqrt() * dw2;
        let residual = v1
            - (0.15 + p.kappa * (p.theta - v1) * h - 0.5 * p.vol_of_vol * p.vol_of_vol * h
                + p.vol_of_vol * v1.sqrt() * dwv);
        assert_abs_diff_eq!(residual, 0.0, epsilon = 1e-14);
        assert!(v1 > 0.0);
    }

    #[test]
    fn heston_variance_stays_positive_along_paths() {
        let m = build_heston(0.02, 0.25, 0.5, 0.3, -0.3, 0.15).unwrap();
        let p = m.heston_params().unwrap();
        let mut rng = substream(5, Domain::Test, 0);
        let mut v = 0.15;
        let mut x = 1.0;
        let h = 3e-3;
        for _ in 0..1_000_000 {
            let (g1, g2): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            let (x1, v1) = heston_step(p, x, v, h, g1 * h.sqrt(), g2 * h.sqrt());
            assert!(v1 > 0.0, "variance left the positive domain: {}", v1);
            x = x1;
            v = v1;
            if !(0.0..10.0).contains(&x) {
                x = 1.0;
            }
        }
    }

    #[test]
    fn reproducibility_of_batches() {
        let m = build_gbm(0.02, 0.3, None, 1).unwrap();
        let scheme = SchemeSpec::for_model(&m, 0.03);
        let payoff = Payoff::Call { strike: 1.0 };
        let a = simulate_batch(&m, None, &scheme, &payoff, 500, 42, false).unwrap();
        let b = simulate_batch(&m, None, &scheme, &payoff, 500, 42, false).unwrap();
        assert_eq!(a.gamma_base, b.gamma_base);
        let c = simulate_batch(&m, None, &scheme, &payoff, 500, 43, false).unwrap();
        assert_ne!(a.gamma_base, c.gamma_base);
    }

    #[test]
    fn zero_vol_paths_are_deterministic() {
        let m = build_gbm(0.02, 0.0, None, 1).unwrap();
        let scheme = SchemeSpec::for_model(&m, 0.003);
        let payoff = Payoff::Call { strike: 1.0 };
        let out = simulate_batch(&m, None, &scheme, &payoff, 32, 1, false).unwrap();
        // Euler with zero noise compounds (1 + r h); payoff is discounted by
        // the Euler Y product. All paths identical.
        let first = out.gamma_base[0];
        for g in &out.gamma_base {
            assert_abs_diff_eq!(*g, first, epsilon = 1e-15);
        }
        let n = 1000;
        let growth = (1.0 + 0.02 * 3.0 / n as f64).powi(n);
        let disc = (1.0 - 0.02 * 3.0 / n as f64).powi(n);
        assert_relative_eq!(first, disc * (growth - 1.0), max_relative = 1e-12);
    }

    #[test]
    fn record_contract_uniform_grid() {
        let m = build_gbm(0.02, 0.3, None, 2).unwrap();
        let scheme = SchemeSpec::for_model(&m, 0.03);
        let payoff = Payoff::CallOnMax { strike: 1.0 };
        let out = simulate_batch(&m, None, &scheme, &payoff, 8, 9, true).unwrap();
        let recs = out.records.unwrap();
        assert_eq!(recs.len(), 8);
        for r in &recs {
            assert_eq!(r.n_steps(), 100);
            assert_eq!(*r.times.last().unwrap(), 3.0);
            assert!(r.step_kinds.iter().all(|k| *k == StepKind::Deterministic));
            for w in r.times.windows(2) {
                assert!(w[1] > w[0]);
                assert!(w[1] - w[0] <= 0.03 + 1e-12);
            }
            assert_eq!(r.states.len(), 101 * 2);
            assert_eq!(r.dw.len(), 100 * 2);
            assert!(r.discounts.iter().all(|&y| y > 0.0));
        }
    }

    #[test]
    fn jump_adapted_record_contract() {
        let m = build_merton(0.02, 0.2, 1.0, -0.05, 0.3).unwrap();
        let derived = levy_derive(m.measure().unwrap()).unwrap();
        let scheme = SchemeSpec::for_model(&m, 0.03);
        let payoff = Payoff::Call { strike: 1.0 };
        let out = simulate_batch(&m, Some(&derived), &scheme, &payoff, 64, 17, true).unwrap();
        let recs = out.records.unwrap();
        let mut any_jump = false;
        for r in &recs {
            assert_abs_diff_eq!(*r.times.last().unwrap(), 3.0, epsilon = 1e-12);
            let mut gap_sum = 0.0;
            for w in r.times.windows(2) {
                assert!(w[1] > w[0]);
                assert!(w[1] - w[0] <= 0.03 + 1e-12);
                gap_sum += w[1] - w[0];
            }
            assert_abs_diff_eq!(gap_sum, 3.0, epsilon = 1e-12);
            for (k, kind) in r.step_kinds.iter().enumerate() {
                match kind {
                    StepKind::Jump => {
                        any_jump = true;
                        assert!(r.jumps[k] != 0.0);
                    }
                    StepKind::Deterministic => assert_eq!(r.jumps[k], 0.0),
                }
            }
            assert!(r.discounts.iter().all(|&y| y > 0.0));
        }
        assert!(any_jump, "expected at least one jump across 64 paths");
    }

    #[test]
    fn jump_count_matches_intensity() {
        let m = build_merton(0.02, 0.2, 1.0, -0.05, 0.3).unwrap();
        let derived = levy_derive(m.measure().unwrap()).unwrap();
        let scheme = SchemeSpec::for_model(&m, 0.03);
        let payoff = Payoff::Call { strike: 1.0 };
        let n_paths = 100_000;
        let out = simulate_batch(&m, Some(&derived), &scheme, &payoff, n_paths, 23, true).unwrap();
        let recs = out.records.unwrap();
        let total_jumps: usize = recs
            .iter()
            .map(|r| {
                r.step_kinds
                    .iter()
                    .filter(|k| **k == StepKind::Jump)
                    .count()
            })
            .sum();
        let mean = total_jumps as f64 / n_paths as f64;
        let expect = derived.lambda_eps * 3.0;
        // Poisson: variance = mean.
        let se = (expect / n_paths as f64).sqrt();
        assert!(
            (mean - expect).abs() <= 3.0 * se,
            "jump count mean {} vs {} (se {})",
            mean,
            expect,
            se
        );
    }

    #[test]
    fn brownian_increment_variance_matches_steps() {
        let m = build_merton(0.02, 0.2, 1.0, -0.05, 0.3).unwrap();
        let derived = levy_derive(m.measure().unwrap()).unwrap();
        let scheme = SchemeSpec::for_model(&m, 0.03);
        let payoff = Payoff::Call { strike: 1.0 };
        let out = simulate_batch(&m, Some(&derived), &scheme, &payoff, 4000, 31, true).unwrap();
        let recs = out.records.unwrap();
        // Normalized increments dw/sqrt(theta) should be standard normal.
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut count = 0usize;
        for r in &recs {
            for k in 0..r.n_steps() {
                let theta = r.times[k + 1] - r.times[k];
                let zn = r.dw[k] / theta.sqrt();
                sum += zn;
                sumsq += zn * zn;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let var = sumsq / count as f64 - mean * mean;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 4.0 / (count as f64).sqrt());
        assert_abs_diff_eq!(var, 1.0, epsilon = 6.0 / (count as f64).sqrt());
    }

    /// One-sample Kolmogorov-Smirnov p-value against a supplied CDF.
    fn ks_p_value(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = samples.len() as f64;
        let mut d: f64 = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            let f = cdf(x);
            d = d.max((f - i as f64 / n).abs());
            d = d.max(((i + 1) as f64 / n - f).abs());
        }
        let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
        let mut p = 0.0;
        for k in 1..=100 {
            let term = 2.0 * (-2.0 * (k as f64 * lambda).powi(2)).exp();
            p += if k % 2 == 1 { term } else { -term };
        }
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn zero_jump_coefficient_matches_pure_diffusion_law() {
        // With F = 0 the jumps have no effect and, the coefficients being
        // constant, the terminal state is exactly Gaussian despite the
        // random jump-adapted partition.
        let measure =
            crate::models::LevyMeasureSpec::singular_tempered(1.0, 1.0, 0.5, 2.0, 1e-2).unwrap();
        let m = crate::models::build_exp_levy(0.02, &[0.2], &[0.0], measure).unwrap();
        let derived = levy_derive(m.measure().unwrap()).unwrap();
        let scheme = SchemeSpec::for_model(&m, 0.03);
        let payoff = Payoff::Call { strike: 1.0 };
        let out = simulate_batch(&m, Some(&derived), &scheme, &payoff, 100_000, 37, true).unwrap();
        let mut terminal: Vec<f64> = out
            .records
            .unwrap()
            .iter()
            .map(|r| *r.states.last().unwrap())
            .collect();
        let mut b = [0.0];
        m.drift(0.0, &[0.0], &mut b);
        let (mean, sd) = (b[0] * 3.0, 0.2 * 3f64.sqrt());
        let p = ks_p_value(&mut terminal, |x| crate::oracles::norm_cdf((x - mean) / sd));
        assert!(p > 0.01, "KS p-value {} rejects the pure-diffusion law", p);
    }

    #[test]
    fn scheme_validation_rejects_mismatches() {
        let gbm = build_gbm(0.02, 0.3, None, 1).unwrap();
        let heston = build_heston(0.02, 0.25, 0.5, 0.3, -0.3, 0.15).unwrap();
        assert!(SchemeSpec::new(SchemeKind::JumpAdapted, 0.03)
            .validate(&gbm)
            .is_err());
        assert!(SchemeSpec::new(SchemeKind::EulerExplicit, 0.03)
            .validate(&heston)
            .is_err());
        assert!(SchemeSpec::new(SchemeKind::EulerExplicit, 0.7)
            .validate(&gbm)
            .is_err());
        assert!(SchemeSpec::new(SchemeKind::EulerExplicit, 0.03)
            .validate(&gbm)
            .is_ok());
    }
}
