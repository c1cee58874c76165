//! Experiment execution: per strike, train (or warm-start) the control
//! networks, run the requested estimators, and append machine-readable
//! results.

use crate::config::ExperimentConfig;
use anyhow::{bail, Context, Result};
use sdecv_core::cvtrain::{first_pass, train, ControlMode, TrainConfig, TrainedControls};
use sdecv_core::estimators::{crude_cv_mc, cv_mc, mlmc, vanilla_mc, Estimate};
use sdecv_core::models::{levy_derive, LevyDerived, ModelSpec, Payoff};
use sdecv_core::neuralnet::{Architecture, NetworkParams};
use sdecv_core::oracles::{
    bs_call, heston_reference, merton_call, ReferenceMethod, ReferencePrice,
};
use sdecv_core::schemes::SchemeSpec;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Saved trained controls plus enough provenance to refuse mismatched
/// warm starts.
#[derive(Debug, Serialize, Deserialize)]
pub struct ControlsBlob {
    pub model_fingerprint: u64,
    pub payoff: Payoff,
    pub h_r: f64,
    pub m_r: usize,
    pub seed: u64,
    pub arch: Architecture,
    pub mode: ControlMode,
    pub params: NetworkParams,
}

/// Stable FNV-1a over the serialized model, for warm-start compatibility.
pub fn model_fingerprint(model: &ModelSpec) -> u64 {
    let bytes = serde_json::to_vec(model).expect("model serializes");
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    seed: u64,
    config: &'a ExperimentConfig,
    model_fingerprint: u64,
    csv: String,
    controls: Vec<String>,
}

struct Row {
    strike: f64,
    reference: Option<ReferencePrice>,
    method: &'static str,
    estimate: Estimate,
    seed: u64,
}

fn csv_row(row: &Row) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "{},{},{},{},{},{},{},{},{},{}",
        row.strike,
        row.reference
            .map(|r| r.value.to_string())
            .unwrap_or_default(),
        row.estimate.mean,
        row.estimate.half_width,
        row.estimate.wall_time,
        row.estimate.m,
        row.estimate
            .rel_err
            .map(|r| r.to_string())
            .unwrap_or_default(),
        row.method,
        row.seed,
        row.estimate.tol_met,
    );
    s
}

pub const CSV_HEADER: &str =
    "strike,reference,mean,half_width,time_s,m,rel_err,method,seed,tol_met";

fn reference_for(
    config: &ExperimentConfig,
    model: &ModelSpec,
    strike: f64,
) -> Option<ReferencePrice> {
    let t = model.horizon();
    match config.model.kind.as_str() {
        "gbm" if model.dim() == 1 => Some(ReferencePrice {
            value: bs_call(model.x0()[0], strike, model.rate(), config.model.vol?, t),
            method: ReferenceMethod::BlackScholesClosed,
        }),
        "merton" => Some(ReferencePrice {
            value: merton_call(
                model.x0()[0],
                strike,
                model.rate(),
                config.model.vol?,
                config.model.lambda?,
                config.model.jump_mean?,
                config.model.jump_sd?,
                t,
            ),
            method: ReferenceMethod::MertonSeries,
        }),
        "heston" => {
            // Tabulated constants exist only for the published parameter set.
            let m = &config.model;
            let published = m.rate == 0.02
                && m.kappa == Some(0.25)
                && m.theta == Some(0.5)
                && m.vol_of_vol == Some(0.3)
                && m.rho == Some(-0.3)
                && m.v0 == Some(0.15)
                && t == 3.0;
            if published {
                heston_reference(strike).map(|value| ReferencePrice {
                    value,
                    method: ReferenceMethod::PublishedTable,
                })
            } else {
                None
            }
        }
        _ => None,
    }
}

fn load_warm_start(path: &str, model: &ModelSpec, arch: &Architecture) -> Result<NetworkParams> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path))?;
    let blob: ControlsBlob = serde_json::from_str(&text).context("parsing controls blob")?;
    if blob.model_fingerprint != model_fingerprint(model) {
        bail!(
            "warm start {} was trained on a different model (fingerprint mismatch)",
            path
        );
    }
    if blob.arch != *arch || !blob.params.matches(arch) {
        bail!("warm start {} has incompatible network dimensions", path);
    }
    Ok(blob.params)
}

/// Run the experiment described by the config; returns the CSV path.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    let issues = config.diagnostics();
    if !issues.is_empty() {
        bail!("invalid configuration:\n  {}", issues.join("\n  "));
    }
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output dir {}", out_dir.display()))?;
    let model = config.build_model().context("stage: model construction")?;
    let derived: Option<LevyDerived> = model
        .measure()
        .map(levy_derive)
        .transpose()
        .context("stage: measure derivation")?;
    let scheme = SchemeSpec::for_model(&model, config.scheme.h);
    let scheme_r =
        SchemeSpec::for_model(&model, config.scheme.h * config.scheme.step_factor as f64);
    let seed = config.training.seed;
    let est = &config.estimation;

    let csv_path = out_dir.join("results.csv");
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    // Partial results survive a failed stage.
    let flush = |csv: &str| -> Result<()> {
        fs::write(&csv_path, csv).context("writing results.csv")?;
        Ok(())
    };
    flush(&csv)?;

    let mut controls_files = Vec::new();
    let mut previous: Option<TrainedControls> = None;
    for &strike in &config.payoff.strikes {
        let payoff = config.build_payoff(strike)?;
        let reference = reference_for(config, &model, strike);
        let mut rows = Vec::new();

        if config.training.enabled {
            let t = &config.training;
            let dataset = first_pass(&model, &payoff, &scheme_r, t.records, seed)
                .with_context(|| format!("stage: first pass (K = {})", strike))?;
            let train_cfg = TrainConfig {
                max_epochs: t.max_epochs,
                batch_size: t.batch_size,
                learning_rate: t.learning_rate,
                hidden_layers: t.hidden_layers,
                hidden_size: t.hidden_size,
                step_factor: config.scheme.step_factor,
                alpha: est.alpha,
                mc_tolerance: est.tolerance,
                second_pass_h: Some(config.scheme.h),
                seed,
                ..TrainConfig::default()
            };
            let arch = sdecv_core::cvtrain::architecture_for(&dataset, &train_cfg);
            let warm: Option<NetworkParams> = if let Some(prev) = previous.take() {
                Some(prev.params)
            } else if let Some(path) = &t.warm_start_path {
                Some(load_warm_start(path, &model, &arch)?)
            } else {
                None
            };
            let warm = if t.warm_start_sweep || t.warm_start_path.is_some() {
                warm
            } else {
                None
            };
            let trained = train(&dataset, &train_cfg, warm.as_ref())
                .with_context(|| format!("stage: training (K = {})", strike))?;

            let blob = ControlsBlob {
                model_fingerprint: model_fingerprint(&model),
                payoff: payoff.clone(),
                h_r: scheme_r.h,
                m_r: t.records,
                seed,
                arch: trained.arch.clone(),
                mode: trained.mode,
                params: trained.params.clone(),
            };
            let blob_name = format!("controls_K{}.json", strike);
            fs::write(
                out_dir.join(&blob_name),
                serde_json::to_string(&blob).context("serializing controls")?,
            )
            .context("writing controls blob")?;
            controls_files.push(blob_name);

            let estimate = cv_mc(
                &model,
                derived.as_ref(),
                &trained,
                &scheme,
                &payoff,
                est.tolerance,
                est.alpha,
                seed,
                est.max_m,
            )
            .map_err(anyhow::Error::from)
            .with_context(|| format!("stage: cv estimation (K = {})", strike))?;
            rows.push(Row {
                strike,
                reference,
                method: "cv",
                estimate,
                seed,
            });
            previous = Some(trained);
        }

        for baseline in &est.baselines {
            let estimate = match baseline.as_str() {
                "vanilla" => vanilla_mc(
                    &model,
                    derived.as_ref(),
                    &scheme,
                    &payoff,
                    est.tolerance,
                    est.alpha,
                    seed,
                    est.max_m,
                ),
                "crude_cv" => crude_cv_mc(
                    &model,
                    derived.as_ref(),
                    &scheme,
                    &payoff,
                    est.tolerance,
                    est.alpha,
                    seed,
                    est.max_m,
                ),
                "mlmc" => mlmc(
                    &model,
                    derived.as_ref(),
                    &payoff,
                    config.scheme.h,
                    est.mlmc_factor,
                    est.mlmc_levels,
                    est.tolerance,
                    est.alpha,
                    seed,
                    est.max_m,
                ),
                other => bail!("unknown baseline `{}`", other),
            }
            .map_err(anyhow::Error::from)
            .with_context(|| format!("stage: {} estimation (K = {})", baseline, strike))?;
            let method: &'static str = match baseline.as_str() {
                "vanilla" => "vanilla",
                "crude_cv" => "crude_cv",
                _ => "mlmc",
            };
            rows.push(Row {
                strike,
                reference,
                method,
                estimate,
                seed,
            });
        }

        for row in &rows {
            csv.push_str(&csv_row(row));
            csv.push('\n');
        }
        flush(&csv)?;
    }

    let manifest = Manifest {
        tool: "sdecv",
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config,
        model_fingerprint: model_fingerprint(&model),
        csv: "results.csv".to_string(),
        controls: controls_files,
    };
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).context("serializing manifest")?,
    )
    .context("writing manifest")?;
    Ok(csv_path)
}
