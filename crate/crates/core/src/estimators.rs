//! Second-pass estimation and baselines: vanilla Monte Carlo, control-variate
//! Monte Carlo to a target confidence half-width, multilevel Monte Carlo with
//! coupled paths, and the crude terminal-spot control variate.
//!
//! All estimators draw paths from per-path substreams and merge streaming
//! statistics in a fixed order, so identical (seed, config) reproduce the
//! same estimate bit for bit.

use crate::cvtrain::{
    relative_error, replay_with_context, ControlFunction, ControlMode, ReplayContext,
};
use crate::error::{Error, Result};
use crate::models::{LevyDerived, ModelSpec, Payoff};
use crate::oracles::inv_norm_cdf;
use crate::rng::{substream, Domain};
use crate::schemes::{expected_steps, simulate_batch_indexed, SchemeKind, SchemeSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// A Monte Carlo estimate with its confidence half-width.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
    pub m: u64,
    /// Per-sample variance (the estimator variance times m).
    pub variance: f64,
    pub wall_time: f64,
    pub rel_err: Option<f64>,
    /// False when the run hit its sample budget before reaching tolerance.
    pub tol_met: bool,
}

/// Streaming mean/variance accumulator with order-stable parallel merging.
#[derive(Debug, Clone, Copy, Default)]
pub struct Welford {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: Welford) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other;
            return;
        }
        let n1 = self.count as f64;
        let n2 = other.count as f64;
        let d = other.mean - self.mean;
        let n = n1 + n2;
        self.mean += d * n2 / n;
        self.m2 += other.m2 + d * d * n1 * n2 / n;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count > 1 {
            self.m2 / (self.count - 1) as f64
        } else {
            0.0
        }
    }
}

/// Half-width of the (1 - alpha) confidence interval.
pub fn confidence_halfwidth(variance: f64, m: u64, alpha: f64) -> f64 {
    if variance <= 0.0 || m == 0 {
        return 0.0;
    }
    inv_norm_cdf(1.0 - alpha / 2.0) * (variance / m as f64).sqrt()
}

/// Paths per tolerance check; two batches minimum unless the variance is
/// exactly zero, to avoid early stops off tiny-sample variance estimates.
pub const ESTIMATE_BATCH: usize = 10_000;

fn finish(acc: &Welford, alpha: f64, start: Instant, rel: bool, tol_met: bool) -> Result<Estimate> {
    let rel_err = if rel {
        Some(relative_error(acc.mean(), acc.variance())?)
    } else {
        None
    };
    Ok(Estimate {
        mean: acc.mean(),
        half_width: confidence_halfwidth(acc.variance(), acc.count(), alpha),
        m: acc.count(),
        variance: acc.variance(),
        wall_time: start.elapsed().as_secs_f64(),
        rel_err,
        tol_met,
    })
}

fn stop_check(acc: &Welford, batches: usize, tol: f64, alpha: f64) -> bool {
    let hw = confidence_halfwidth(acc.variance(), acc.count(), alpha);
    (batches >= 2 || acc.variance() == 0.0) && hw <= tol
}

/// Plain Monte Carlo of the uncontrolled functional in batches until the
/// confidence half-width reaches `tol` or the sample budget `max_m` is hit.
#[allow(clippy::too_many_arguments)]
pub fn vanilla_mc(
    model: &ModelSpec,
    derived: Option<&LevyDerived>,
    scheme: &SchemeSpec,
    payoff: &Payoff,
    tol: f64,
    alpha: f64,
    seed: u64,
    max_m: u64,
) -> Result<Estimate> {
    if tol <= 0.0 {
        return Err(Error::invalid("tol", "must be positive"));
    }
    let start = Instant::now();
    let mut acc = Welford::default();
    let mut batches = 0usize;
    loop {
        let take = ESTIMATE_BATCH.min((max_m - acc.count()) as usize).max(1);
        let batch = simulate_batch_indexed(
            model,
            derived,
            scheme,
            payoff,
            take,
            seed,
            Domain::EstimatePath,
            acc.count(),
            false,
        )?;
        for g in batch.gamma_base {
            acc.push(g);
        }
        batches += 1;
        if stop_check(&acc, batches, tol, alpha) {
            return finish(&acc, alpha, start, false, true);
        }
        if acc.count() >= max_m {
            return finish(&acc, alpha, start, false, false);
        }
    }
}

fn check_controls(
    model: &ModelSpec,
    derived: Option<&LevyDerived>,
    controls: &dyn ControlFunction,
) -> Result<()> {
    let want_mode = if model.measure().is_some() {
        ControlMode::Levy
    } else {
        ControlMode::Brownian
    };
    if controls.mode() != want_mode {
        return Err(Error::ModeMismatch {
            dataset: match want_mode {
                ControlMode::Brownian => "brownian",
                ControlMode::Levy => "levy",
            },
            controls: match controls.mode() {
                ControlMode::Brownian => "brownian",
                ControlMode::Levy => "levy",
            },
        });
    }
    let ctx = ReplayContext::for_model(model, derived);
    let want_dim = match want_mode {
        ControlMode::Brownian => model.dim(),
        ControlMode::Levy => model.dim() + 2 * model.jump_dim(),
    };
    let _ = ctx;
    if controls.output_dim() != want_dim {
        return Err(Error::ShapeMismatch(format!(
            "control output {} but model needs {}",
            controls.output_dim(),
            want_dim
        )));
    }
    Ok(())
}

/// Controlled functionals for `m` fresh paths: simulate with recording in
/// memory-bounded chunks, then add the replayed control integrals. Path
/// index `start_index` continues an estimator's stream.
#[allow(clippy::too_many_arguments)]
pub fn controlled_gammas(
    model: &ModelSpec,
    derived: Option<&LevyDerived>,
    scheme: &SchemeSpec,
    payoff: &Payoff,
    controls: &dyn ControlFunction,
    m: usize,
    seed: u64,
    start_index: u64,
) -> Result<Vec<f64>> {
    check_controls(model, derived, controls)?;
    let steps = expected_steps(model, derived, scheme.h).max(1.0);
    let floats_per_step = (2 * model.dim() + 2 * model.jump_dim() + 3) as f64;
    let chunk = ((4_000_000.0 / (steps * floats_per_step)) as usize).clamp(64, m.max(64));
    let ctx = ReplayContext::for_model(model, derived);
    let mut gammas = Vec::with_capacity(m);
    let mut done = 0usize;
    while done < m {
        let take = chunk.min(m - done);
        let batch = simulate_batch_indexed(
            model,
            derived,
            scheme,
            payoff,
            take,
            seed,
            Domain::EstimatePath,
            start_index + done as u64,
            true,
        )?;
        let records = batch.records.expect("records requested");
        let indices: Vec<usize> = (0..records.len()).collect();
        gammas.extend(replay_with_context(&ctx, &records, &indices, controls));
        done += take;
    }
    Ok(gammas)
}

/// Control-variate Monte Carlo: simulates the controlled system (the control
/// integrals accumulate alongside each path, batchnorm in inference mode)
/// until the half-width reaches `tol`. Reports sqrt(Var)/mean as the
/// relative error of the trained control.
#[allow(clippy::too_many_arguments)]
pub fn cv_mc(
    model: &ModelSpec,
    derived: Option<&LevyDerived>,
    controls: &dyn ControlFunction,
    scheme: &SchemeSpec,
    payoff: &Payoff,
    tol: f64,
    alpha: f64,
    seed: u64,
    max_m: u64,
) -> Result<Estimate> {
    if tol <= 0.0 {
        return Err(Error::invalid("tol", "must be positive"));
    }
    let start = Instant::now();
    check_controls(model, derived, controls)?;
    let mut acc = Welford::default();
    let mut batches = 0usize;
    loop {
        let take = ESTIMATE_BATCH.min((max_m - acc.count()) as usize).max(1);
        let gammas = controlled_gammas(
            model,
            derived,
            scheme,
            payoff,
            controls,
            take,
            seed,
            acc.count(),
        )?;
        for g in gammas {
            acc.push(g);
        }
        batches += 1;
        if stop_check(&acc, batches, tol, alpha) {
            return finish(&acc, alpha, start, true, true);
        }
        if acc.count() >= max_m {
            return finish(&acc, alpha, start, true, false);
        }
    }
}

/// Terminal-spot control variate: a pilot batch estimates the
/// variance-minimizing coefficient for the control Y_T S_1(T) - S_1(0), an
/// independent main run applies it. Falls back to vanilla Monte Carlo when
/// the control has no variance.
#[allow(clippy::too_many_arguments)]
pub fn crude_cv_mc(
    model: &ModelSpec,
    derived: Option<&LevyDerived>,
    scheme: &SchemeSpec,
    payoff: &Payoff,
    tol: f64,
    alpha: f64,
    seed: u64,
    max_m: u64,
) -> Result<Estimate> {
    if tol <= 0.0 {
        return Err(Error::invalid("tol", "must be positive"));
    }
    let start = Instant::now();
    let spot0 = model.spot()[0];
    let pilot = simulate_batch_indexed(
        model,
        derived,
        scheme,
        payoff,
        ESTIMATE_BATCH,
        seed,
        Domain::PilotPath,
        0,
        false,
    )?;
    let n = pilot.gamma_base.len() as f64;
    let mean_g = pilot.gamma_base.iter().sum::<f64>() / n;
    let controls: Vec<f64> = pilot.discounted_spot.iter().map(|s| s - spot0).collect();
    let mean_c = controls.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_c = 0.0;
    for (g, c) in pilot.gamma_base.iter().zip(&controls) {
        cov += (g - mean_g) * (c - mean_c);
        var_c += (c - mean_c) * (c - mean_c);
    }
    if var_c <= 1e-300 {
        return vanilla_mc(model, derived, scheme, payoff, tol, alpha, seed, max_m);
    }
    let coeff = -cov / var_c;

    let mut acc = Welford::default();
    let mut batches = 0usize;
    loop {
        let take = ESTIMATE_BATCH.min((max_m - acc.count()) as usize).max(1);
        let batch = simulate_batch_indexed(
            model,
            derived,
            scheme,
            payoff,
            take,
            seed,
            Domain::EstimatePath,
            acc.count(),
            false,
        )?;
        for (g, s) in batch.gamma_base.iter().zip(&batch.discounted_spot) {
            acc.push(g + coeff * (s - spot0));
        }
        batches += 1;
        if stop_check(&acc, batches, tol, alpha) {
            return finish(&acc, alpha, start, false, true);
        }
        if acc.count() >= max_m {
            return finish(&acc, alpha, start, false, false);
        }
    }
}

/// A coupled fine/coarse pair of uncontrolled functionals sharing all noise:
/// the coarse path consumes the summed fine Brownian increments and, in jump
/// mode, the identical jump times and sizes. The coarse marginal law equals a
/// plain path at the coarse step, which is what makes the levels telescope.
#[allow(clippy::too_many_arguments)]
fn coupled_pair(
    model: &ModelSpec,
    derived: Option<&LevyDerived>,
    payoff: &Payoff,
    n_fine: usize,
    factor: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, f64) {
    let d = model.dim();
    let q = model.jump_dim().max(1);
    let horizon = model.horizon();
    let jumpy = derived.is_some_and(|dv| dv.lambda_eps > 0.0);
    let lambda = derived.map_or(0.0, |dv| dv.lambda_eps);

    let mut xf = model.x0().to_vec();
    let mut xc = model.x0().to_vec();
    let mut yf = 1.0;
    let mut yc = 1.0;
    let (mut tf_prev, mut tc_prev) = (0.0f64, 0.0f64);

    let mut dw = vec![0.0; d];
    let mut dw_acc = vec![0.0; d];
    let mut dws = vec![0.0; q];
    let mut dws_acc = vec![0.0; q];
    let mut jump = vec![0.0; q];
    let mut scratch = vec![0.0; d];
    let mut drift = vec![0.0; d];
    let mut diff = vec![0.0; d];
    let mut push = vec![0.0; d];
    let mut next_state = vec![0.0; d];

    let mut next_jump = if jumpy {
        let u: f64 = rng.gen();
        -(1.0 - u).ln() / lambda
    } else {
        f64::INFINITY
    };

    let gamma_corr: Option<&[f64]> = derived.and_then(|dv| {
        dv.gamma_eps
            .iter()
            .any(|&g| g != 0.0)
            .then_some(dv.gamma_eps.as_slice())
    });
    let beta: Option<&[f64]> =
        derived.and_then(|dv| (!dv.beta_is_zero()).then_some(dv.beta_eps.as_slice()));

    // One Euler update of `state` at time `t_prev` over `theta` with supplied
    // summed increments and optional shared jump.
    let advance = |state: &mut Vec<f64>,
                   y: &mut f64,
                   t_prev: f64,
                   theta: f64,
                   dw_in: &[f64],
                   dws_in: &[f64],
                   jump_in: Option<&[f64]>,
                   drift: &mut Vec<f64>,
                   diff: &mut Vec<f64>,
                   push: &mut Vec<f64>,
                   next_state: &mut Vec<f64>| {
        model.drift(t_prev, state, drift);
        model.apply_diffusion(t_prev, state, dw_in, diff);
        for i in 0..d {
            next_state[i] = state[i] + drift[i] * theta + diff[i];
        }
        if let Some(g) = gamma_corr {
            model.apply_jump_coeff(t_prev, state, g, push);
            for i in 0..d {
                next_state[i] -= push[i] * theta;
            }
        }
        if let Some(b) = beta {
            let mut bdw = vec![0.0; q];
            for (i, out) in bdw.iter_mut().enumerate() {
                let mut acc = 0.0;
                for j in 0..q {
                    acc += b[i * q + j] * dws_in[j];
                }
                *out = acc;
            }
            model.apply_jump_coeff(t_prev, state, &bdw, push);
            for i in 0..d {
                next_state[i] += push[i];
            }
        }
        if let Some(jv) = jump_in {
            model.apply_jump_coeff(t_prev, state, jv, push);
            for i in 0..d {
                next_state[i] += push[i];
            }
        }
        *y += model.discount_rate(t_prev, state) * *y * theta;
        state.copy_from_slice(next_state);
    };

    let mut fine_i = 1usize;
    let mut t = 0.0;
    while fine_i <= n_fine {
        let next_grid = horizon * fine_i as f64 / n_fine as f64;
        let is_jump = jumpy && next_jump < next_grid;
        let t_next = if is_jump { next_jump } else { next_grid };
        let theta_f = t_next - t;
        let sq = theta_f.sqrt();
        for w in dw.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *w = g * sq;
        }
        model.transform_noise(&mut dw, &mut scratch);
        for w in dws.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *w = g * sq;
        }
        let jump_now = if is_jump {
            derived
                .expect("jump event without measure")
                .sample_large_jump(rng, &mut jump);
            Some(jump.clone())
        } else {
            None
        };
        advance(
            &mut xf,
            &mut yf,
            tf_prev,
            theta_f,
            &dw,
            &dws,
            jump_now.as_deref(),
            &mut drift,
            &mut diff,
            &mut push,
            &mut next_state,
        );
        tf_prev = t_next;
        for i in 0..d {
            dw_acc[i] += dw[i];
        }
        for i in 0..q {
            dws_acc[i] += dws[i];
        }
        let coarse_event = is_jump || fine_i.is_multiple_of(factor);
        if coarse_event {
            let theta_c = t_next - tc_prev;
            advance(
                &mut xc,
                &mut yc,
                tc_prev,
                theta_c,
                &dw_acc,
                &dws_acc,
                jump_now.as_deref(),
                &mut drift,
                &mut diff,
                &mut push,
                &mut next_state,
            );
            tc_prev = t_next;
            dw_acc.iter_mut().for_each(|v| *v = 0.0);
            dws_acc.iter_mut().for_each(|v| *v = 0.0);
        }
        t = t_next;
        if is_jump {
            let u: f64 = rng.gen();
            next_jump = t + -(1.0 - u).ln() / lambda;
        } else {
            fine_i += 1;
        }
    }
    let mut under = vec![0.0; model.n_underliers()];
    model.underliers(horizon, &xf, &mut under);
    let gf = payoff.evaluate(&under) * yf;
    model.underliers(horizon, &xc, &mut under);
    let gc = payoff.evaluate(&under) * yc;
    (gf, gc)
}

/// Batch of coupled (fine, coarse) functional pairs; `stream_offset`
/// separates levels and rounds in the substream space.
#[allow(clippy::too_many_arguments)]
pub fn coupled_pairs(
    model: &ModelSpec,
    derived: Option<&LevyDerived>,
    payoff: &Payoff,
    h_fine: f64,
    factor: usize,
    m: usize,
    seed: u64,
    stream_offset: u64,
) -> Result<Vec<(f64, f64)>> {
    if model.heston_params().is_some() {
        return Err(Error::SchemeMismatch {
            scheme: "coupled_euler",
            model: "heston_semi_implicit",
        });
    }
    let n_fine = SchemeSpec::new(SchemeKind::EulerExplicit, h_fine).grid_steps(model.horizon())?;
    if n_fine % factor != 0 {
        return Err(Error::invalid("factor", "must divide the fine step count"));
    }
    Ok((0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, Domain::MlmcPath, stream_offset + i as u64);
            coupled_pair(model, derived, payoff, n_fine, factor, &mut rng)
        })
        .collect())
}

/// Multilevel output with per-level diagnostics.
#[derive(Debug, Clone)]
pub struct MlmcOutput {
    pub estimate: Estimate,
    pub level_means: Vec<f64>,
    pub level_variances: Vec<f64>,
    pub level_counts: Vec<u64>,
}

const MLMC_WARMUP: usize = 2_000;

/// Standard multilevel Monte Carlo: level 0 is a plain estimate at the
/// coarsest grid, correction levels use coupled fine/coarse paths, and
/// per-level sample counts follow the variance/cost-optimal allocation with
/// the tolerance split evenly between bias and statistical error. Bias is
/// estimated from the finest correction level.
#[allow(clippy::too_many_arguments)]
pub fn mlmc(
    model: &ModelSpec,
    derived: Option<&LevyDerived>,
    payoff: &Payoff,
    h_finest: f64,
    level_factor: usize,
    n_levels: usize,
    tol: f64,
    alpha: f64,
    seed: u64,
    max_m_per_level: u64,
) -> Result<Estimate> {
    mlmc_detailed(
        model,
        derived,
        payoff,
        h_finest,
        level_factor,
        n_levels,
        tol,
        alpha,
        seed,
        max_m_per_level,
    )
    .map(|o| o.estimate)
}

#[allow(clippy::too_many_arguments)]
pub fn mlmc_detailed(
    model: &ModelSpec,
    derived: Option<&LevyDerived>,
    payoff: &Payoff,
    h_finest: f64,
    level_factor: usize,
    n_levels: usize,
    tol: f64,
    alpha: f64,
    seed: u64,
    max_m_per_level: u64,
) -> Result<MlmcOutput> {
    if level_factor < 2 {
        return Err(Error::invalid("level_factor", "must be at least 2"));
    }
    if n_levels < 1 {
        return Err(Error::invalid("n_levels", "must be at least 1"));
    }
    if tol <= 0.0 {
        return Err(Error::invalid("tol", "must be positive"));
    }
    let start = Instant::now();
    let horizon = model.horizon();
    let n_finest = SchemeSpec::new(SchemeKind::EulerExplicit, h_finest).grid_steps(horizon)?;
    let coarse_div = level_factor.pow((n_levels - 1) as u32);
    if n_finest % coarse_div != 0 {
        return Err(Error::invalid(
            "h_finest",
            "finest step count must be divisible by factor^(levels-1)",
        ));
    }
    if (n_finest / coarse_div) < 1 {
        return Err(Error::invalid("n_levels", "coarsest level has no steps"));
    }
    let jump_steps = derived.map_or(0.0, |dv| dv.lambda_eps * horizon);
    let n_at = |l: usize| n_finest / level_factor.pow((n_levels - 1 - l) as u32);
    // Work per path in scheme-step units.
    let cost_at = |l: usize| {
        let nf = n_at(l) as f64;
        if l == 0 {
            nf + jump_steps
        } else {
            nf * (1.0 + 1.0 / level_factor as f64) + 2.0 * jump_steps
        }
    };

    let z = inv_norm_cdf(1.0 - alpha / 2.0);
    let eps_stat = tol / 2f64.sqrt();
    let mut acc = vec![Welford::default(); n_levels];
    let mut tol_met = true;

    // Level sampling with stable per-level stream offsets.
    let level_offset = |l: usize| (l as u64) << 40;
    let sample_level = |l: usize, count: usize, done: u64, acc: &mut Welford| -> Result<()> {
        if l == 0 {
            let scheme = SchemeSpec::for_model(model, horizon / n_at(0) as f64);
            let batch = simulate_batch_indexed(
                model,
                derived,
                &scheme,
                payoff,
                count,
                seed,
                Domain::MlmcPath,
                level_offset(0) + done,
                false,
            )?;
            for g in batch.gamma_base {
                acc.push(g);
            }
        } else {
            let h_fine = horizon / n_at(l) as f64;
            let pairs = coupled_pairs(
                model,
                derived,
                payoff,
                h_fine,
                level_factor,
                count,
                seed,
                level_offset(l) + done,
            )?;
            for (gf, gc) in pairs {
                acc.push(gf - gc);
            }
        }
        Ok(())
    };

    for (l, a) in acc.iter_mut().enumerate() {
        let warm = MLMC_WARMUP.min(max_m_per_level as usize);
        sample_level(l, warm, 0, a)?;
    }
    for _round in 0..64 {
        let sum_vc: f64 = (0..n_levels)
            .map(|l| (acc[l].variance().max(1e-30) * cost_at(l)).sqrt())
            .sum();
        let mut deficit = Vec::new();
        for (l, a) in acc.iter().enumerate() {
            let v = a.variance().max(1e-30);
            let target =
                (z * z / (eps_stat * eps_stat) * (v / cost_at(l)).sqrt() * sum_vc).ceil() as u64;
            let target = target.clamp(MLMC_WARMUP as u64, max_m_per_level);
            if target > a.count() {
                deficit.push((l, (target - a.count()) as usize));
            }
        }
        if deficit.is_empty() {
            break;
        }
        for (l, extra) in deficit {
            let done = acc[l].count();
            sample_level(l, extra, done, &mut acc[l])?;
        }
    }

    let est_var: f64 = acc.iter().map(|a| a.variance() / a.count() as f64).sum();
    let half_width = z * est_var.sqrt();
    if half_width > tol {
        tol_met = false;
    }
    if n_levels > 1 {
        let bias = acc[n_levels - 1].mean().abs() / (level_factor as f64 - 1.0);
        if bias > tol / 2f64.sqrt() {
            tol_met = false;
        }
    }
    let mean: f64 = acc.iter().map(|a| a.mean()).sum();
    let total: u64 = acc.iter().map(|a| a.count()).sum();
    Ok(MlmcOutput {
        estimate: Estimate {
            mean,
            half_width,
            m: total,
            variance: est_var * total as f64,
            wall_time: start.elapsed().as_secs_f64(),
            rel_err: None,
            tol_met,
        },
        level_means: acc.iter().map(|a| a.mean()).collect(),
        level_variances: acc.iter().map(|a| a.variance()).collect(),
        level_counts: acc.iter().map(|a| a.count()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cvtrain::{ControlMode, ZeroControl};
    use crate::models::{build_gbm, build_merton, levy_derive};
    use crate::oracles::{bs_call, merton_call};
    use approx::assert_abs_diff_eq;

    #[test]
    fn welford_matches_two_pass_variance() {
        let mut rng = substream(1, Domain::Test, 0);
        let xs: Vec<f64> = (0..5000).map(|_| rng.gen::<f64>() * 3.0 - 1.0).collect();
        let mut w = Welford::default();
        for &x in &xs {
            w.push(x);
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        assert_abs_diff_eq!(w.mean(), mean, epsilon = 1e-12);
        assert!((w.variance() - var).abs() <= 1e-10 * var);
        // Order-stable merge equals sequential push.
        let mut a = Welford::default();
        let mut b = Welford::default();
        for &x in &xs[..2345] {
            a.push(x);
        }
        for &x in &xs[2345..] {
            b.push(x);
        }
        a.merge(b);
        assert_abs_diff_eq!(a.mean(), w.mean(), epsilon = 1e-13);
        assert!((a.variance() - w.variance()).abs() <= 1e-12 * w.variance());
        assert_eq!(a.count(), w.count());
    }

    #[test]
    fn halfwidth_values() {
        assert_abs_diff_eq!(
            confidence_halfwidth(1.0, 10_000, 0.05),
            1.959964 / 100.0,
            epsilon = 1e-7
        );
        assert_eq!(confidence_halfwidth(0.0, 100, 0.05), 0.0);
        assert_abs_diff_eq!(
            confidence_halfwidth(4.0, 400, 0.3174),
            2.0 / 20.0,
            epsilon = 2e-4
        );
    }

    #[test]
    fn vanilla_zero_vol_converges_in_one_batch() {
        let m = build_gbm(0.02, 0.0, None, 1).unwrap();
        let scheme = SchemeSpec::for_model(&m, 0.03);
        let est = vanilla_mc(
            &m,
            None,
            &scheme,
            &Payoff::Call { strike: 1.0 },
            1e-6,
            0.05,
            7,
            1_000_000,
        )
        .unwrap();
        assert_eq!(est.m, ESTIMATE_BATCH as u64);
        assert_eq!(est.half_width, 0.0);
        assert!(est.tol_met);
    }

    #[test]
    fn vanilla_gbm_hits_reference_within_three_halfwidths() {
        let m = build_gbm(0.02, 0.3, None, 1).unwrap();
        let scheme = SchemeSpec::for_model(&m, 3.0 / 250.0);
        let est = vanilla_mc(
            &m,
            None,
            &scheme,
            &Payoff::Call { strike: 1.0 },
            2e-3,
            0.05,
            11,
            10_000_000,
        )
        .unwrap();
        let reference = bs_call(1.0, 1.0, 0.02, 0.3, 3.0);
        assert!(est.tol_met);
        assert!(
            (est.mean - reference).abs() <= 3.0 * est.half_width + 2e-3,
            "mean {} vs {} (hw {})",
            est.mean,
            reference,
            est.half_width
        );
    }

    #[test]
    fn zero_controls_reproduce_vanilla_exactly() {
        let m = build_merton(0.02, 0.2, 1.0, -0.05, 0.3).unwrap();
        let derived = levy_derive(m.measure().unwrap()).unwrap();
        let scheme = SchemeSpec::for_model(&m, 0.03);
        let payoff = Payoff::Call { strike: 1.0 };
        let zero = ZeroControl {
            mode: ControlMode::Levy,
            dim: 3,
        };
        let a = vanilla_mc(
            &m,
            Some(&derived),
            &scheme,
            &payoff,
            5e-3,
            0.05,
            13,
            200_000,
        )
        .unwrap();
        let b = cv_mc(
            &m,
            Some(&derived),
            &zero,
            &scheme,
            &payoff,
            5e-3,
            0.05,
            13,
            200_000,
        )
        .unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.m, b.m);
    }

    #[test]
    fn crude_cv_beats_vanilla_on_sample_count() {
        let m = build_gbm(0.02, 0.3, None, 1).unwrap();
        let scheme = SchemeSpec::for_model(&m, 3.0 / 125.0);
        let payoff = Payoff::Call { strike: 1.0 };
        let v = vanilla_mc(&m, None, &scheme, &payoff, 1.5e-3, 0.05, 17, 20_000_000).unwrap();
        let c = crude_cv_mc(&m, None, &scheme, &payoff, 1.5e-3, 0.05, 17, 20_000_000).unwrap();
        assert!(v.tol_met && c.tol_met);
        assert!(
            c.m < v.m,
            "crude control should need fewer samples: {} vs {}",
            c.m,
            v.m
        );
        assert!((c.mean - v.mean).abs() <= 3.0 * (v.half_width + c.half_width));
    }

    #[test]
    fn analytic_control_relative_error_is_small() {
        let m = build_gbm(0.02, 0.3, None, 1).unwrap();
        let scheme = SchemeSpec::for_model(&m, 3.0 / 1000.0);
        let controls = crate::oracles::BsDeltaControl {
            strike: 1.0,
            rate: 0.02,
            sigma: 0.3,
            horizon: 3.0,
        };
        let est = cv_mc(
            &m,
            None,
            &controls,
            &scheme,
            &Payoff::Call { strike: 1.0 },
            1e-3,
            0.05,
            19,
            1_000_000,
        )
        .unwrap();
        assert!(est.tol_met);
        let rel = est.rel_err.unwrap();
        assert!(rel < 0.1, "relative error {} should be far below 0.1", rel);
        assert!((est.mean - bs_call(1.0, 1.0, 0.02, 0.3, 3.0)).abs() <= 3.0 * est.half_width);
    }

    #[test]
    fn crude_cv_zero_vol_falls_back() {
        let m = build_gbm(0.02, 0.0, None, 1).unwrap();
        let scheme = SchemeSpec::for_model(&m, 0.03);
        let est = crude_cv_mc(
            &m,
            None,
            &scheme,
            &Payoff::Call { strike: 1.0 },
            1e-6,
            0.05,
            3,
            100_000,
        )
        .unwrap();
        assert!(est.tol_met);
        assert_eq!(est.half_width, 0.0);
    }

    #[test]
    fn single_level_mlmc_matches_vanilla_distribution() {
        let m = build_gbm(0.02, 0.3, None, 1).unwrap();
        let payoff = Payoff::Call { strike: 1.0 };
        let out = mlmc(
            &m,
            None,
            &payoff,
            3.0 / 64.0,
            4,
            1,
            3e-3,
            0.05,
            23,
            4_000_000,
        )
        .unwrap();
        let scheme = SchemeSpec::for_model(&m, 3.0 / 64.0);
        let v = vanilla_mc(&m, None, &scheme, &payoff, 3e-3, 0.05, 29, 4_000_000).unwrap();
        assert!((out.mean - v.mean).abs() <= 3.0 * (out.half_width + v.half_width));
    }

    #[test]
    fn mlmc_levels_telescope_for_merton() {
        let m = build_merton(0.02, 0.2, 1.0, -0.05, 0.3).unwrap();
        let derived = levy_derive(m.measure().unwrap()).unwrap();
        let payoff = Payoff::Call { strike: 1.0 };
        let out = mlmc_detailed(
            &m,
            Some(&derived),
            &payoff,
            3.0 / 256.0,
            4,
            3,
            2.5e-3,
            0.05,
            31,
            2_000_000,
        )
        .unwrap();
        let reference = merton_call(1.0, 1.0, 0.02, 0.2, 1.0, -0.05, 0.3, 3.0);
        assert!(
            (out.estimate.mean - reference).abs() <= 3.0 * out.estimate.half_width + 2.5e-3,
            "mlmc {} vs series {} (hw {})",
            out.estimate.mean,
            reference,
            out.estimate.half_width
        );
        assert!(out.level_variances[1] > out.level_variances[2]);
    }

    #[test]
    fn mlmc_rejects_heston() {
        let m = crate::models::build_heston(0.02, 0.25, 0.5, 0.3, -0.3, 0.15).unwrap();
        assert!(mlmc(
            &m,
            None,
            &Payoff::Call { strike: 1.0 },
            0.003,
            4,
            3,
            1e-3,
            0.05,
            1,
            100
        )
        .is_err());
    }
}
