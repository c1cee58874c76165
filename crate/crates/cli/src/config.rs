//! Experiment configuration: a single TOML file describing the model, the
//! payoff sweep, schemes, training and estimation settings.

use anyhow::{bail, Context, Result};
use sdecv_core::models::{
    build_exp_levy, build_gbm, build_heston, build_merton, LevyMeasureSpec, ModelSpec, Payoff,
};
use sdecv_core::schemes::SchemeSpec;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub payoff: PayoffSection,
    pub scheme: SchemeSection,
    #[serde(default)]
    pub training: TrainingSection,
    pub estimation: EstimationSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: String,
    pub rate: f64,
    #[serde(default)]
    pub vol: Option<f64>,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub correlation: Option<Vec<Vec<f64>>>,
    // Heston
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub theta: Option<f64>,
    #[serde(default)]
    pub vol_of_vol: Option<f64>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub v0: Option<f64>,
    // Merton jumps
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub jump_mean: Option<f64>,
    #[serde(default)]
    pub jump_sd: Option<f64>,
    // Exponential Lévy
    #[serde(default)]
    pub sigma: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub jump_coeff: Option<Vec<f64>>,
    #[serde(default)]
    pub c_minus: Option<f64>,
    #[serde(default)]
    pub c_plus: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PayoffSection {
    pub kind: String,
    pub strikes: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SchemeSection {
    pub h: f64,
    #[serde(default = "default_step_factor")]
    pub step_factor: usize,
    /// Small-jump truncation for the singular measure.
    #[serde(default)]
    pub epsilon: Option<f64>,
}

fn default_step_factor() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// First-pass trajectory count M_r.
    #[serde(default = "default_records")]
    pub records: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
    #[serde(default = "default_hidden_size")]
    pub hidden_size: usize,
    /// Reuse the previous strike's trained weights along the sweep.
    #[serde(default)]
    pub warm_start_sweep: bool,
    /// Optional saved-controls blob to initialize the first strike.
    #[serde(default)]
    pub warm_start_path: Option<String>,
}

fn default_true() -> bool {
    true
}
fn default_seed() -> u64 {
    42
}
fn default_records() -> usize {
    30_000
}
fn default_max_epochs() -> usize {
    20
}
fn default_batch_size() -> usize {
    2000
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_hidden_layers() -> usize {
    3
}
fn default_hidden_size() -> usize {
    50
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            enabled: true,
            seed: default_seed(),
            records: default_records(),
            max_epochs: default_max_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            hidden_layers: default_hidden_layers(),
            hidden_size: default_hidden_size(),
            warm_start_sweep: false,
            warm_start_path: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EstimationSection {
    pub tolerance: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_max_m")]
    pub max_m: u64,
    /// Subset of {"vanilla", "mlmc", "crude_cv"}.
    #[serde(default)]
    pub baselines: Vec<String>,
    #[serde(default = "default_mlmc_levels")]
    pub mlmc_levels: usize,
    #[serde(default = "default_mlmc_factor")]
    pub mlmc_factor: usize,
}

fn default_alpha() -> f64 {
    0.05
}
fn default_max_m() -> u64 {
    100_000_000
}
fn default_mlmc_levels() -> usize {
    4
}
fn default_mlmc_factor() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: String,
}

fn default_out_dir() -> String {
    "out".to_string()
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_out_dir(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("parsing config")?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Build the model described by the config.
    pub fn build_model(&self) -> Result<ModelSpec> {
        let m = &self.model;
        let need = |v: Option<f64>, name: &str| -> Result<f64> {
            v.with_context(|| format!("model.{} is required for kind `{}`", name, m.kind))
        };
        let model = match m.kind.as_str() {
            "gbm" => {
                let dim = m.dim.unwrap_or(1);
                let corr = m
                    .correlation
                    .as_ref()
                    .map(|rows| flatten_matrix(rows, dim, "correlation"))
                    .transpose()?;
                build_gbm(m.rate, need(m.vol, "vol")?, corr.as_deref(), dim)?
            }
            "heston" => build_heston(
                m.rate,
                need(m.kappa, "kappa")?,
                need(m.theta, "theta")?,
                need(m.vol_of_vol, "vol_of_vol")?,
                need(m.rho, "rho")?,
                need(m.v0, "v0")?,
            )?,
            "merton" => build_merton(
                m.rate,
                need(m.vol, "vol")?,
                need(m.lambda, "lambda")?,
                need(m.jump_mean, "jump_mean")?,
                need(m.jump_sd, "jump_sd")?,
            )?,
            "exp_levy" => {
                let coeffs = m
                    .jump_coeff
                    .clone()
                    .context("model.jump_coeff is required for exp_levy")?;
                let dim = coeffs.len();
                let sigma = flatten_matrix(
                    m.sigma
                        .as_ref()
                        .context("model.sigma is required for exp_levy")?,
                    dim,
                    "sigma",
                )?;
                let eps = self
                    .scheme
                    .epsilon
                    .context("scheme.epsilon is required for exp_levy")?;
                let measure = LevyMeasureSpec::singular_tempered(
                    need(m.c_minus, "c_minus")?,
                    need(m.c_plus, "c_plus")?,
                    need(m.alpha, "alpha")?,
                    need(m.mu, "mu")?,
                    eps,
                )?;
                build_exp_levy(m.rate, &sigma, &coeffs, measure)?
            }
            other => bail!("unknown model kind `{}`", other),
        };
        let model = match m.horizon {
            Some(t) => model.with_horizon(t)?,
            None => model,
        };
        let model = match &m.x0 {
            Some(x0) => model.with_initial(x0.clone())?,
            None => model,
        };
        Ok(model)
    }

    pub fn build_payoff(&self, strike: f64) -> Result<Payoff> {
        match self.payoff.kind.as_str() {
            "call" => Ok(Payoff::Call { strike }),
            "call_on_max" => Ok(Payoff::CallOnMax { strike }),
            other => bail!("unknown payoff kind `{}`", other),
        }
    }

    /// All constraint violations, without running anything.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.payoff.strikes.is_empty() {
            out.push("payoff.strikes must not be empty".to_string());
        }
        if !matches!(self.payoff.kind.as_str(), "call" | "call_on_max") {
            out.push(format!("unknown payoff kind `{}`", self.payoff.kind));
        }
        if self.scheme.h <= 0.0 {
            out.push("scheme.h must be positive".to_string());
        }
        if self.estimation.tolerance <= 0.0 {
            out.push("estimation.tolerance must be positive".to_string());
        }
        if !(0.0 < self.estimation.alpha && self.estimation.alpha < 1.0) {
            out.push("estimation.alpha must be in (0, 1)".to_string());
        }
        for b in &self.estimation.baselines {
            if !matches!(b.as_str(), "vanilla" | "mlmc" | "crude_cv") {
                out.push(format!("unknown baseline `{}`", b));
            }
        }
        if let Some(eps) = self.scheme.epsilon {
            if !(0.0 < eps && eps < 1.0) {
                out.push(format!(
                    "scheme.epsilon = {} must lie in (0, 1) (inside the power-law region)",
                    eps
                ));
            }
        }
        if self.model.kind == "heston" {
            if let (Some(kappa), Some(theta), Some(sv)) =
                (self.model.kappa, self.model.theta, self.model.vol_of_vol)
            {
                if 2.0 * kappa * theta <= sv * sv {
                    out.push(format!(
                        "heston positivity requires 2*kappa*theta > vol_of_vol^2 ({} <= {})",
                        2.0 * kappa * theta,
                        sv * sv
                    ));
                }
            }
            if self.estimation.baselines.iter().any(|b| b == "mlmc") {
                out.push("mlmc baseline is not available for the heston scheme".to_string());
            }
        }
        if self.estimation.baselines.iter().any(|b| b == "mlmc") && self.scheme.h > 0.0 {
            let horizon = self.model.horizon.unwrap_or(3.0);
            let n = (horizon / self.scheme.h).round() as usize;
            let div = self
                .estimation
                .mlmc_factor
                .pow(self.estimation.mlmc_levels.saturating_sub(1) as u32);
            if div == 0 || !n.is_multiple_of(div) {
                out.push(format!(
                    "mlmc needs the finest step count ({}) divisible by factor^(levels-1) = {}",
                    n, div
                ));
            }
        }
        if self.payoff.kind == "call" {
            let underliers = match self.model.kind.as_str() {
                "gbm" => self.model.dim.unwrap_or(1),
                "exp_levy" => self.model.jump_coeff.as_ref().map_or(1, |c| c.len()),
                _ => 1,
            };
            if underliers != 1 {
                out.push("payoff `call` needs a single underlier; use `call_on_max`".to_string());
            }
        }
        match self.build_model() {
            Err(e) => out.push(format!("model construction: {}", e)),
            Ok(model) => {
                let scheme = SchemeSpec::for_model(&model, self.scheme.h);
                if let Err(e) = scheme.grid_steps(model.horizon()) {
                    out.push(format!("scheme: {}", e));
                }
                let h_r = self.scheme.h * self.scheme.step_factor as f64;
                if let Err(e) = SchemeSpec::for_model(&model, h_r).grid_steps(model.horizon()) {
                    out.push(format!("first-pass scheme (h_r = step_factor * h): {}", e));
                }
            }
        }
        if let Some(path) = &self.training.warm_start_path {
            if !Path::new(path).exists() {
                out.push(format!(
                    "training.warm_start_path `{}` does not exist",
                    path
                ));
            }
        }
        out
    }
}

fn flatten_matrix(rows: &[Vec<f64>], dim: usize, name: &str) -> Result<Vec<f64>> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        bail!("model.{} must be a {} x {} matrix", name, dim, dim);
    }
    Ok(rows.iter().flatten().copied().collect())
}
