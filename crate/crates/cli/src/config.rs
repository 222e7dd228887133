//! Run configuration: a TOML document parsed in full and validated before any work starts.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use mscs_core::forecast::{RollingConfig, DEFAULT_REFIT_EVERY};
use mscs_core::likelihood::FitOptions;
use mscs_core::model_space::{EnumerationMode, ModelUniverse, DEFAULT_CANDIDATE_CAP};
use mscs_core::montecarlo::{DgpConfig, DEFAULT_BURN_IN, DEFAULT_SIGMA, N_COLUMNS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; the rayon default when absent.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub universe: Option<UniverseConfig>,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub rolling: Option<RollingSection>,
    #[serde(default)]
    pub montecarlo: Option<MonteCarloConfig>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("mscs-out")
}

fn default_alphas() -> Vec<f64> {
    vec![0.01]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    pub timestamp: String,
    /// chrono format string; RFC 3339, `%Y-%m-%d %H:%M:%S`, `%Y-%m-%d %H:%M` and
    /// `%Y-%m-%d` are tried when absent.
    #[serde(default)]
    pub timestamp_format: Option<String>,
    pub response: String,
    /// Predictor columns in model order; raw CSV columns or derived names.
    #[serde(default)]
    pub predictors: Vec<String>,
    #[serde(default)]
    pub derived: Vec<DerivedColumn>,
    /// Dates (`YYYY-MM-DD`) treated as holidays by the `holiday` rule.
    #[serde(default)]
    pub holidays: Vec<String>,
    /// Split hourly rows into one daily series per hour of the day.
    #[serde(default)]
    pub hourly_split: bool,
    /// Hours to analyse after splitting; all 24 when absent.
    #[serde(default)]
    pub hours: Option<Vec<u32>>,
    /// Last date (inclusive) of the estimation sample used to build confidence sets.
    #[serde(default)]
    pub estimation_end: Option<String>,
}

/// Columns computed from other columns or from the timestamp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum DerivedColumn {
    Square { name: String, source: String },
    /// 1 when the month lies in `from..=to` (wrapping past December).
    MonthRange { name: String, from: u32, to: u32 },
    /// 1 on Saturdays, Sundays and listed holidays.
    Holiday { name: String },
    /// 1 between two dates, inclusive.
    DateRange { name: String, start: String, end: String },
}

impl DerivedColumn {
    pub fn name(&self) -> &str {
        match self {
            Self::Square { name, .. }
            | Self::MonthRange { name, .. }
            | Self::Holiday { name }
            | Self::DateRange { name, .. } => name,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniverseConfig {
    #[serde(default = "default_mode")]
    pub mode: EnumerationMode,
    #[serde(default)]
    pub p_max: usize,
    #[serde(default)]
    pub q_max: usize,
    #[serde(default)]
    pub r_max: usize,
    #[serde(default)]
    pub exo_lag_min: usize,
    /// Defaults to true in contiguous mode and false in subset mode.
    #[serde(default)]
    pub intercept: Option<bool>,
    /// `(p, q)` pairs for contiguous mode.
    #[serde(default)]
    pub orders: Option<Vec<(usize, usize)>>,
    #[serde(default)]
    pub max_candidates: Option<u64>,
}

fn default_mode() -> EnumerationMode {
    EnumerationMode::Subset
}

impl UniverseConfig {
    pub fn build(&self, s: usize) -> ModelUniverse {
        let (p_max, q_max) = match &self.orders {
            Some(o) if !o.is_empty() => (
                o.iter().map(|x| x.0).max().unwrap_or(0).max(self.p_max),
                o.iter().map(|x| x.1).max().unwrap_or(0).max(self.q_max),
            ),
            _ => (self.p_max, self.q_max),
        };
        ModelUniverse {
            mode: self.mode,
            p_max,
            q_max,
            r_max: self.r_max,
            exo_lag_min: self.exo_lag_min,
            s,
            intercept: self
                .intercept
                .unwrap_or(self.mode == EnumerationMode::Contiguous),
            order_whitelist: self.orders.clone(),
            max_candidates: self.max_candidates.map_or(DEFAULT_CANDIDATE_CAP, u128::from),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RollingSection {
    pub window_length: usize,
    pub n_forecasts: usize,
    #[serde(default = "default_refit")]
    pub refit_every: usize,
    /// Row index of the first forecast target.
    #[serde(default)]
    pub evaluation_start: Option<usize>,
    /// Date of the first forecast target; alternative to `evaluation_start`.
    #[serde(default)]
    pub evaluation_start_date: Option<String>,
}

fn default_refit() -> usize {
    DEFAULT_REFIT_EVERY
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    #[serde(default = "default_dgps")]
    pub dgps: Vec<String>,
    #[serde(default = "default_rhos")]
    pub rhos: Vec<f64>,
    pub t_obs: Vec<usize>,
    pub n_reps: usize,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub burn_in: Option<usize>,
}

fn default_dgps() -> Vec<String> {
    DgpConfig::labels().iter().map(|s| s.to_string()).collect()
}

fn default_rhos() -> Vec<f64> {
    vec![0.0]
}

impl MonteCarloConfig {
    /// Every (process, rho) combination of the grid.
    pub fn processes(&self) -> Result<Vec<DgpConfig>> {
        let mut out = Vec::new();
        for label in &self.dgps {
            for &rho in &self.rhos {
                let mut dgp = DgpConfig::table(label, rho)?;
                dgp.sigma = self.sigma.unwrap_or(DEFAULT_SIGMA);
                dgp.burn_in = self.burn_in.unwrap_or(DEFAULT_BURN_IN);
                dgp.validate()?;
                out.push(dgp);
            }
        }
        Ok(out)
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub alphas: Option<Vec<f64>>,
}

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").with_context(|| format!("invalid date `{s}` (expected YYYY-MM-DD)"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).context("config is not valid")
    }

    /// Reads a config file; relative data paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if let Some(d) = cfg.data.as_mut() {
            if d.path.is_relative() {
                d.path = base.join(&d.path);
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.threads {
            self.threads = Some(t);
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(a) = &o.alphas {
            self.alphas = a.clone();
        }
    }

    /// Fit options with the run seed driving any randomized restarts.
    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            restart_seed: self.seed,
            ..self.fit.clone()
        }
    }

    /// Checks everything that can be checked without reading the data.
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.alphas.is_empty(), "at least one alpha is required");
        for &a in &self.alphas {
            ensure!(a > 0.0 && a < 1.0, "alpha {a} must lie in (0, 1)");
        }
        if self.threads == Some(0) {
            bail!("threads must be positive");
        }
        self.fit.validate()?;
        if let Some(d) = &self.data {
            d.validate()?;
            if let Some(u) = &self.universe {
                u.build(d.predictors.len()).validate()?;
            }
        }
        if let Some(r) = &self.rolling {
            ensure!(r.window_length > 0 && r.n_forecasts > 0 && r.refit_every > 0,
                "rolling window_length, n_forecasts and refit_every must be positive");
            ensure!(
                !(r.evaluation_start.is_some() && r.evaluation_start_date.is_some()),
                "give either evaluation_start or evaluation_start_date, not both"
            );
            if let Some(d) = &r.evaluation_start_date {
                parse_date(d)?;
            }
        }
        if let Some(mc) = &self.montecarlo {
            ensure!(mc.n_reps > 0, "montecarlo.n_reps must be positive");
            ensure!(!mc.t_obs.is_empty() && mc.t_obs.iter().all(|&t| t > 0), "montecarlo.t_obs must list positive sample sizes");
            mc.processes()?;
            self.mc_universe()?.validate()?;
        }
        Ok(())
    }

    /// Universe for simulation runs: the configured one over the simulated predictors,
    /// or every submodel of ARMAX(3, 2) with six predictors.
    pub fn mc_universe(&self) -> Result<ModelUniverse> {
        Ok(match &self.universe {
            Some(u) => u.build(N_COLUMNS),
            None => ModelUniverse::monte_carlo(),
        })
    }

    /// Rolling configuration resolved against a dataset.
    pub fn rolling_config(&self, data_len: usize, dates: &[NaiveDate]) -> Result<Option<RollingConfig>> {
        let Some(r) = &self.rolling else { return Ok(None) };
        let start = match (&r.evaluation_start, &r.evaluation_start_date) {
            (Some(i), _) => *i,
            (None, Some(d)) => {
                let d = parse_date(d)?;
                dates
                    .iter()
                    .position(|x| *x >= d)
                    .with_context(|| format!("evaluation_start_date {d} is after the last observation"))?
            }
            (None, None) => data_len.saturating_sub(r.n_forecasts),
        };
        let cfg = RollingConfig {
            window_length: r.window_length,
            n_forecasts: r.n_forecasts,
            refit_every: r.refit_every,
            evaluation_start: start,
            conditioning_length: None,
        };
        cfg.validate(data_len)?;
        Ok(Some(cfg))
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.response.is_empty(), "data.response must name a column");
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.derived {
            ensure!(seen.insert(d.name().to_string()), "derived column `{}` defined twice", d.name());
            match d {
                DerivedColumn::MonthRange { from, to, .. } => {
                    ensure!((1..=12).contains(from) && (1..=12).contains(to), "month_range `{}` needs months in 1..=12", d.name());
                }
                DerivedColumn::DateRange { start, end, .. } => {
                    ensure!(parse_date(start)? <= parse_date(end)?, "date_range `{}` ends before it starts", d.name());
                }
                _ => {}
            }
        }
        for h in &self.holidays {
            parse_date(h)?;
        }
        if let Some(e) = &self.estimation_end {
            parse_date(e)?;
        }
        if let Some(hours) = &self.hours {
            ensure!(self.hourly_split, "data.hours requires hourly_split = true");
            ensure!(hours.iter().all(|h| *h < 24), "hours must lie in 0..24");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 7
alphas = [0.01, 0.05]

[data]
path = "load.csv"
timestamp = "time"
response = "load"
predictors = ["temperature", "temperature_sq", "weekend"]
hourly_split = true
hours = [12]
holidays = ["2021-12-25"]

[[data.derived]]
rule = "square"
name = "temperature_sq"
source = "temperature"

[[data.derived]]
rule = "holiday"
name = "weekend"

[universe]
mode = "contiguous"
orders = [[1, 1], [2, 1]]

[rolling]
window_length = 100
n_forecasts = 20
"#;

    #[test]
    fn parses_and_validates() {
        let cfg = RunConfig::from_toml(SAMPLE).unwrap();
        cfg.validate().unwrap();
        let u = cfg.universe.as_ref().unwrap().build(3);
        assert!(u.intercept);
        assert_eq!((u.p_max, u.q_max), (2, 1));
        assert_eq!(u.count(), 2 * 8);
        assert_eq!(cfg.rolling.as_ref().unwrap().refit_every, DEFAULT_REFIT_EVERY);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 1").is_err());
    }

    #[test]
    fn cross_field_checks() {
        let mut cfg = RunConfig::from_toml(SAMPLE).unwrap();
        cfg.alphas = vec![1.5];
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::from_toml(SAMPLE).unwrap();
        cfg.universe.as_mut().unwrap().orders = Some(vec![(1, 1)]);
        cfg.universe.as_mut().unwrap().p_max = 3;
        assert!(cfg.validate().is_err(), "whitelist must contain the full order");

        let mut cfg = RunConfig::from_toml(SAMPLE).unwrap();
        cfg.montecarlo = Some(MonteCarloConfig {
            dgps: vec!["A".into()],
            rhos: vec![-0.5],
            t_obs: vec![100],
            n_reps: 1,
            sigma: None,
            burn_in: None,
        });
        assert!(cfg.validate().is_err(), "infeasible correlation");
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = RunConfig::from_toml(SAMPLE).unwrap();
        cfg.apply(&Overrides {
            seed: Some(99),
            threads: Some(2),
            out_dir: Some("elsewhere".into()),
            alphas: Some(vec![0.1]),
        });
        assert_eq!((cfg.seed, cfg.threads, cfg.alphas.clone()), (99, Some(2), vec![0.1]));
        assert_eq!(cfg.fit_options().restart_seed, 99);
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::from_toml(SAMPLE).unwrap();
        let v = serde_json::to_value(&cfg).unwrap();
        let back: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, cfg);
    }
}
