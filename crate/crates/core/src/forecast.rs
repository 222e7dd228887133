//! Rolling one-step-ahead forecast evaluation of every model in a universe,
//! split by confidence-set membership.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{ConfidenceSet, LowerBoundary};
use crate::error::{Error, Result};
use crate::likelihood::{innovation_residuals, FitContext, FitOptions, FittedModel};
use crate::model_space::ModelUniverse;
use crate::series::{ModelSpec, TimeSeriesDataset};
use crate::stats::quantile;

/// Refit cadence used for whole-universe sweeps.
pub const DEFAULT_REFIT_EVERY: usize = 28;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollingConfig {
    /// Length `R` of the trailing estimation window.
    pub window_length: usize,
    pub n_forecasts: usize,
    /// Re-estimate every this many forecasts; 1 refits before every forecast.
    pub refit_every: usize,
    /// Index of the first forecast target.
    pub evaluation_start: usize,
    /// Observations excluded from the start of each window's likelihood; defaults to the
    /// largest lag of the model (or of the universe's full model in a sweep).
    #[serde(default)]
    pub conditioning_length: Option<usize>,
}

impl RollingConfig {
    /// Forecasts the last `n_forecasts` observations from windows of length `window_length`.
    pub fn trailing(data_len: usize, window_length: usize, n_forecasts: usize, refit_every: usize) -> Self {
        Self {
            window_length,
            n_forecasts,
            refit_every,
            evaluation_start: data_len.saturating_sub(n_forecasts),
            conditioning_length: None,
        }
    }

    pub fn validate(&self, data_len: usize) -> Result<()> {
        if self.window_length == 0 || self.n_forecasts == 0 || self.refit_every == 0 {
            return Err(Error::InvalidArgument(
                "window_length, n_forecasts and refit_every must be positive".into(),
            ));
        }
        if self.evaluation_start < self.window_length {
            return Err(Error::InvalidArgument(format!(
                "evaluation starts at {} but the window needs {} earlier observations",
                self.evaluation_start, self.window_length
            )));
        }
        if self.evaluation_start + self.n_forecasts > data_len {
            return Err(Error::InvalidArgument(format!(
                "{} forecasts from index {} exceed the {} observations",
                self.n_forecasts, self.evaluation_start, data_len
            )));
        }
        Ok(())
    }
}

/// Forecasts of one model over the evaluation period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollingForecasts {
    /// `(forecast, actual)` per target, in time order.
    pub pairs: Vec<(f64, f64)>,
    /// Targets whose refit did not converge; the previous parameters were used.
    pub flagged: Vec<bool>,
    pub n_refits: usize,
}

impl RollingForecasts {
    pub fn n_flagged(&self) -> usize {
        self.flagged.iter().filter(|f| **f).count()
    }
}

/// Refits `specs` on each trailing window (sharing one fitting context per window) and
/// forecasts the following block of targets. Later windows are started from the
/// previous window's estimates.
fn rolling_many(
    specs: &[ModelSpec],
    full: &ModelSpec,
    data: &TimeSeriesDataset,
    cfg: &RollingConfig,
    opts: &FitOptions,
) -> Result<Vec<RollingForecasts>> {
    cfg.validate(data.len())?;
    let c = cfg.conditioning_length.unwrap_or_else(|| full.max_lag());
    let end = cfg.evaluation_start + cfg.n_forecasts;
    let y = data.y();
    let mut current: Vec<Option<FittedModel>> = vec![None; specs.len()];
    let mut out: Vec<RollingForecasts> = specs
        .iter()
        .map(|_| RollingForecasts {
            pairs: Vec::with_capacity(cfg.n_forecasts),
            flagged: Vec::with_capacity(cfg.n_forecasts),
            n_refits: 0,
        })
        .collect();

    let mut block_start = cfg.evaluation_start;
    while block_start < end {
        let block_end = (block_start + cfg.refit_every).min(end);
        let window_start = block_start - cfg.window_length;
        let window = data.slice(window_start..block_start);
        let extended = data.slice(window_start..block_end);
        let ctx = FitContext::new(&window, full, c, opts.clone())?;
        let step: Vec<(FittedModel, bool, Vec<f64>)> = specs
            .par_iter()
            .zip(current.par_iter())
            .map(|(spec, prev)| {
                let fit = match prev {
                    None => ctx.fit(spec)?,
                    Some(p) => ctx.refine(spec, &p.params)?,
                };
                let (model, flagged) = match (fit.converged, prev) {
                    (true, _) => (fit, false),
                    (false, Some(p)) => (p.clone(), true),
                    (false, None) => (fit, true),
                };
                // the one-step forecast of y_t is y_t minus its innovation residual
                let resid = innovation_residuals(&model, &extended);
                let forecasts = (block_start..block_end)
                    .map(|t| y[t] - resid[t - window_start])
                    .collect();
                Ok((model, flagged, forecasts))
            })
            .collect::<Result<_>>()?;
        for ((model, flagged, forecasts), (slot, o)) in step.into_iter().zip(current.iter_mut().zip(out.iter_mut())) {
            o.n_refits += 1;
            for (t, f) in (block_start..block_end).zip(forecasts) {
                o.pairs.push((f, y[t]));
                o.flagged.push(flagged);
            }
            *slot = Some(model);
        }
        block_start = block_end;
    }
    Ok(out)
}

/// Rolling one-step-ahead forecasts of a single model with known future exogenous values.
pub fn rolling_forecasts(
    spec: &ModelSpec,
    data: &TimeSeriesDataset,
    cfg: &RollingConfig,
    opts: &FitOptions,
) -> Result<RollingForecasts> {
    Ok(rolling_many(std::slice::from_ref(spec), spec, data, cfg, opts)?
        .pop()
        .expect("one model in, one result out"))
}

/// Root mean squared error and mean absolute error of `(forecast, actual)` pairs.
pub fn score(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no forecasts to score".into()));
    }
    let n = pairs.len() as f64;
    let sse: f64 = pairs.iter().map(|(f, a)| (f - a).powi(2)).sum();
    let sae: f64 = pairs.iter().map(|(f, a)| (f - a).abs()).sum();
    Ok(((sse / n).sqrt(), sae / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub spec: ModelSpec,
    pub dimension: usize,
    pub rmse: f64,
    pub mae: f64,
    pub in_mscs: bool,
    pub is_lbm: bool,
    /// LR p-value against the full model; absent when the screening fit failed.
    pub lr_p_value: Option<f64>,
    pub n_flagged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub in_mscs: bool,
    pub n_models: usize,
    /// `(probability, quantile)` of log RMSE.
    pub log_rmse: Vec<(f64, f64)>,
    pub log_mae: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub rows: Vec<ForecastRow>,
    pub groups: Vec<GroupSummary>,
    pub config: RollingConfig,
}

pub const SUMMARY_PROBABILITIES: [f64; 7] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0];

impl ForecastReport {
    pub fn group(&self, in_mscs: bool) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.in_mscs == in_mscs)
    }
}

/// Out-of-sample accuracy of one model over the evaluation period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub spec: ModelSpec,
    pub rmse: f64,
    pub mae: f64,
    pub n_flagged: usize,
}

/// Rolling forecast scores of every model in a universe, not yet tied to a confidence set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniverseForecasts {
    pub universe: ModelUniverse,
    pub config: RollingConfig,
    /// In canonical enumeration order.
    pub scores: Vec<ModelScore>,
}

/// Rolling forecasts for every model of `universe`, all windows sharing the
/// universe's conditioning length.
pub fn forecast_universe(
    data: &TimeSeriesDataset,
    universe: &ModelUniverse,
    cfg: &RollingConfig,
    opts: &FitOptions,
) -> Result<UniverseForecasts> {
    universe.validate()?;
    let specs: Vec<ModelSpec> = universe.enumerate()?.collect();
    let mut cfg = cfg.clone();
    cfg.conditioning_length.get_or_insert(universe.conditioning_length());
    let runs = rolling_many(&specs, &universe.full_model(), data, &cfg, opts)?;
    let scores = specs
        .into_iter()
        .zip(&runs)
        .map(|(spec, run)| {
            let (rmse, mae) = score(&run.pairs)?;
            Ok(ModelScore { spec, rmse, mae, n_flagged: run.n_flagged() })
        })
        .collect::<Result<_>>()?;
    Ok(UniverseForecasts { universe: universe.clone(), config: cfg, scores })
}

impl UniverseForecasts {
    /// Tags every model with its membership in `cs` and `boundary` and summarizes the
    /// in-set and out-of-set error distributions.
    pub fn report(&self, cs: &ConfidenceSet, boundary: &LowerBoundary) -> Result<ForecastReport> {
        if cs.universe != self.universe {
            return Err(Error::InvalidArgument(
                "confidence set was built on a different universe".into(),
            ));
        }
        let members: HashSet<&ModelSpec> = cs.members.iter().map(|m| &m.spec).collect();
        let lbms: HashSet<&ModelSpec> = boundary.models.iter().collect();
        let p_values: HashMap<&ModelSpec, f64> = cs
            .members
            .iter()
            .chain(&cs.rejected)
            .map(|m| (&m.spec, m.p_value))
            .collect();
        let rows: Vec<ForecastRow> = self
            .scores
            .iter()
            .map(|m| ForecastRow {
                spec: m.spec.clone(),
                dimension: m.spec.dimension(),
                rmse: m.rmse,
                mae: m.mae,
                in_mscs: members.contains(&m.spec),
                is_lbm: lbms.contains(&m.spec),
                lr_p_value: p_values.get(&m.spec).copied(),
                n_flagged: m.n_flagged,
            })
            .collect();

        let groups = [true, false]
            .into_iter()
            .map(|flag| {
                let (lr, lm): (Vec<f64>, Vec<f64>) = rows
                    .iter()
                    .filter(|r| r.in_mscs == flag)
                    .map(|r| (r.rmse.ln(), r.mae.ln()))
                    .unzip();
                let qs = |v: &[f64]| -> Vec<(f64, f64)> {
                    if v.is_empty() {
                        return Vec::new();
                    }
                    SUMMARY_PROBABILITIES.iter().map(|&p| (p, quantile(v, p))).collect()
                };
                GroupSummary {
                    in_mscs: flag,
                    n_models: lr.len(),
                    log_rmse: qs(&lr),
                    log_mae: qs(&lm),
                }
            })
            .collect();
        Ok(ForecastReport { rows, groups, config: self.config.clone() })
    }

    /// The model with the smallest RMSE (first in canonical order on ties).
    pub fn rmse_best(&self) -> Option<&ModelScore> {
        self.scores
            .iter()
            .fold(None, |best: Option<&ModelScore>, m| match best {
                Some(b) if b.rmse <= m.rmse => Some(b),
                _ => Some(m),
            })
    }
}

/// Rolling forecasts for every model of `universe`, tagged with membership in `cs`
/// (which must have been built on data preceding the evaluation period).
pub fn evaluate_universe(
    data: &TimeSeriesDataset,
    universe: &ModelUniverse,
    cs: &ConfidenceSet,
    boundary: &LowerBoundary,
    cfg: &RollingConfig,
    opts: &FitOptions,
) -> Result<ForecastReport> {
    if &cs.universe != universe {
        return Err(Error::InvalidArgument(
            "confidence set was built on a different universe".into(),
        ));
    }
    forecast_universe(data, universe, cfg, opts)?.report(cs, boundary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{build_confidence_set, lower_boundary};
    use crate::likelihood::one_step_forecast;
    use crate::series::ExoTerm;
    use crate::stats::RngStream;

    fn ar1(n: usize, phi: f64, seed: u64) -> TimeSeriesDataset {
        let mut rng = RngStream::new(seed, 0);
        let x: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let mut y = vec![0.0; n];
        let mut prev_e = 0.0;
        for t in 0..n {
            let e = rng.standard_normal();
            y[t] = 1.0 + if t > 0 { phi * y[t - 1] } else { 0.0 } + 0.8 * x[t] + e + 0.3 * prev_e;
            prev_e = e;
        }
        TimeSeriesDataset::from_columns(y, vec![x]).unwrap()
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(&[(1.0, 1.0), (2.0, 2.0)]).unwrap(), (0.0, 0.0));
        assert_eq!(score(&[(1.0, 0.0), (0.0, 1.0)]).unwrap(), (1.0, 1.0));
        let (r, m) = score(&[(2.0, 0.0), (0.0, 0.0)]).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(m, 1.0);
        assert!(score(&[]).is_err());
    }

    #[test]
    fn score_is_permutation_invariant() {
        let pairs = vec![(0.3, 1.0), (2.0, -1.0), (0.0, 0.5), (4.0, 3.9)];
        let mut rev = pairs.clone();
        rev.reverse();
        let (a, b) = (score(&pairs).unwrap(), score(&rev).unwrap());
        assert!((a.0 - b.0).abs() < 1e-15 && (a.1 - b.1).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let cfg = RollingConfig::trailing(100, 60, 40, 1);
        assert_eq!(cfg.evaluation_start, 60);
        cfg.validate(100).unwrap();
        assert!(RollingConfig::trailing(100, 70, 40, 1).validate(100).is_err());
        let mut bad = cfg.clone();
        bad.refit_every = 0;
        assert!(bad.validate(100).is_err());
    }

    #[test]
    fn white_noise_forecasts_window_mean() {
        let data = ar1(200, 0.0, 1);
        let spec = ModelSpec::new([], [], [], true);
        let cfg = RollingConfig::trailing(200, 100, 30, 1);
        let out = rolling_forecasts(&spec, &data, &cfg, &FitOptions::default()).unwrap();
        assert_eq!(out.pairs.len(), 30);
        assert_eq!(out.n_refits, 30);
        for (i, (f, a)) in out.pairs.iter().enumerate() {
            let t = 170 + i;
            let window = &data.y()[t - 100..t];
            let mean = window.iter().sum::<f64>() / 100.0;
            assert!((f - mean).abs() < 1e-10);
            assert_eq!(*a, data.y()[t]);
        }
    }

    #[test]
    fn block_forecasts_match_one_step_forecast() {
        let data = ar1(400, 0.5, 4);
        let spec = ModelSpec::new([1], [1], [ExoTerm::new(0, 0)], true);
        let cfg = RollingConfig::trailing(400, 300, 20, 10);
        let out = rolling_forecasts(&spec, &data, &cfg, &FitOptions::default()).unwrap();
        // re-derive the second block with the public single-step API
        let fit_window = data.slice(90..390);
        let ctx = FitContext::new(&fit_window, &spec, 1, FitOptions::default()).unwrap();
        let first = {
            let w0 = data.slice(80..380);
            FitContext::new(&w0, &spec, 1, FitOptions::default()).unwrap().fit(&spec).unwrap()
        };
        let model = ctx.refine(&spec, &first.params).unwrap();
        for i in 0..10 {
            let t = 390 + i;
            let history = data.slice(90..t);
            let next: Vec<f64> = (0..data.n_predictors()).map(|p| data.column(p)[t]).collect();
            let f = one_step_forecast(&model, &history, &next).unwrap();
            assert!((f - out.pairs[10 + i].0).abs() < 1e-9, "step {i}: {f} vs {}", out.pairs[10 + i].0);
        }
    }

    #[test]
    fn refit_cadence_is_a_mild_approximation() {
        let data = ar1(1200, 0.7, 8);
        let spec = ModelSpec::new([1], [], [ExoTerm::new(0, 0)], true);
        let every = RollingConfig::trailing(1200, 600, 600, 1);
        let once = RollingConfig::trailing(1200, 600, 600, 600);
        let opts = FitOptions::default();
        let (r1, _) = score(&rolling_forecasts(&spec, &data, &every, &opts).unwrap().pairs).unwrap();
        let (r2, _) = score(&rolling_forecasts(&spec, &data, &once, &opts).unwrap().pairs).unwrap();
        assert!((r1 - r2).abs() / r1 < 0.02, "{r1} vs {r2}");
    }

    #[test]
    fn no_look_ahead() {
        let data = ar1(300, 0.6, 2);
        let spec = ModelSpec::new([1], [1], [ExoTerm::new(0, 0)], true);
        let cfg = RollingConfig::trailing(300, 200, 50, 25);
        let base = rolling_forecasts(&spec, &data, &cfg, &FitOptions::default()).unwrap();
        // perturbing observations after the evaluation window changes nothing
        let mut y = data.y().to_vec();
        y.extend([5.0, -3.0, 8.0]);
        let mut x = data.column(0).to_vec();
        x.extend([1.0, 1.0, 1.0]);
        let longer = TimeSeriesDataset::from_columns(y, vec![x]).unwrap();
        let again = rolling_forecasts(&spec, &longer, &cfg, &FitOptions::default()).unwrap();
        assert_eq!(base, again);
    }

    #[test]
    fn single_model_universe_report() {
        let data = ar1(300, 0.5, 3);
        let u = ModelUniverse::subset(0, 0, 1).with_intercept(true);
        let est = data.slice(0..200);
        let cs = build_confidence_set(&est, &u, 0.05, &FitOptions::default()).unwrap();
        let b = lower_boundary(&cs).unwrap();
        let mut u1 = u.clone();
        u1.s = 0;
        let cs1 = build_confidence_set(&est, &u1, 0.05, &FitOptions::default()).unwrap();
        let b1 = lower_boundary(&cs1).unwrap();
        let cfg = RollingConfig::trailing(300, 200, 100, 20);
        let one = evaluate_universe(&data, &u1, &cs1, &b1, &cfg, &FitOptions::default()).unwrap();
        assert_eq!(one.rows.len(), 1);
        assert!(one.rows[0].in_mscs && one.rows[0].is_lbm);

        let two = evaluate_universe(&data, &u, &cs, &b, &cfg, &FitOptions::default()).unwrap();
        assert_eq!(two.rows.len(), 2);
        let n_in = two.group(true).unwrap().n_models;
        let n_out = two.group(false).unwrap().n_models;
        assert_eq!(n_in + n_out, 2);
        assert!(evaluate_universe(&data, &u1, &cs, &b, &cfg, &FitOptions::default()).is_err());
    }
}
