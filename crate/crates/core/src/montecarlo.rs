//! Simulation study: ARMAX data-generating processes, replicated confidence-set
//! construction and the coverage / size summaries of each cell.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{lower_boundary, screen_universe, ConfidenceSet, LowerBoundary};
use crate::error::{Error, Result};
use crate::likelihood::{ar_is_stationary, ma_is_invertible, FitContext, FitOptions};
use crate::model_space::ModelUniverse;
use crate::series::{hamming_distance, is_nested, ExoTerm, ModelSpec, TimeSeriesDataset};
use crate::stats::{equicorrelation_lower_bound, mean, sample_correlated_normal, sample_sd, RngStream};

pub const DEFAULT_BURN_IN: usize = 500;
pub const DEFAULT_SIGMA: f64 = 0.8;
/// Predictor columns generated for every process; irrelevant ones have zero coefficients.
pub const N_COLUMNS: usize = 6;

/// A zero-mean ARMAX process with contemporaneous predictors and no intercept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub label: String,
    /// `ar_coeffs[j - 1]` multiplies `y_{t-j}`.
    pub ar_coeffs: Vec<f64>,
    /// `ma_coeffs[k - 1]` multiplies `eps_{t-k}`.
    pub ma_coeffs: Vec<f64>,
    /// One coefficient per predictor column, at lag 0.
    pub exo_coeffs: Vec<f64>,
    pub sigma: f64,
    pub rho: f64,
    pub burn_in: usize,
}

impl DgpConfig {
    /// The six processes of the simulation design: A/B are AR(1), C/D ARMA(1,1),
    /// E/F ARMA(2,1); A, C, E use two relevant predictors, B, D, F five.
    pub fn table(label: &str, rho: f64) -> Result<Self> {
        let two = [-2.0, 0.0, 2.0, 0.0, 0.0, 0.0];
        let five = [-2.0, 0.0, 2.0, 1.0, 1.5, -1.5];
        let (ar, ma, exo): (&[f64], &[f64], [f64; 6]) = match label {
            "A" => (&[0.8], &[], two),
            "B" => (&[0.8], &[], five),
            "C" => (&[0.7], &[0.5], two),
            "D" => (&[0.7], &[0.5], five),
            "E" => (&[0.6, -0.2], &[0.5], two),
            "F" => (&[0.6, -0.2], &[0.5], five),
            other => return Err(Error::InvalidArgument(format!("unknown process `{other}`"))),
        };
        Ok(Self {
            label: label.to_string(),
            ar_coeffs: ar.to_vec(),
            ma_coeffs: ma.to_vec(),
            exo_coeffs: exo.to_vec(),
            sigma: DEFAULT_SIGMA,
            rho,
            burn_in: DEFAULT_BURN_IN,
        })
    }

    pub fn labels() -> [&'static str; 6] {
        ["A", "B", "C", "D", "E", "F"]
    }

    /// Number of relevant predictors.
    pub fn n_relevant(&self) -> usize {
        self.exo_coeffs.iter().filter(|c| **c != 0.0).count()
    }

    /// The data-generating model as a spec over the simulated columns.
    pub fn true_spec(&self) -> ModelSpec {
        let nonzero = |v: &[f64]| -> Vec<usize> {
            v.iter().enumerate().filter(|(_, c)| **c != 0.0).map(|(i, _)| i + 1).collect()
        };
        ModelSpec::new(
            nonzero(&self.ar_coeffs),
            nonzero(&self.ma_coeffs),
            nonzero(&self.exo_coeffs).into_iter().map(|i| ExoTerm::new(i - 1, 0)),
            false,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.burn_in < 200 {
            return Err(Error::InvalidArgument(format!(
                "burn-in {} below the minimum of 200",
                self.burn_in
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma {} must be positive", self.sigma)));
        }
        let lower = equicorrelation_lower_bound(self.exo_coeffs.len());
        if !(self.rho > lower && self.rho < 1.0) {
            return Err(Error::InfeasibleCorrelation {
                rho: self.rho,
                s: self.exo_coeffs.len(),
                lower,
            });
        }
        let as_map = |v: &[f64]| -> BTreeMap<usize, f64> {
            v.iter().enumerate().map(|(i, c)| (i + 1, *c)).collect()
        };
        if !ar_is_stationary(&as_map(&self.ar_coeffs)) {
            return Err(Error::NonStationary(format!(
                "AR coefficients {:?} of process {}",
                self.ar_coeffs, self.label
            )));
        }
        if !ma_is_invertible(&as_map(&self.ma_coeffs)) {
            return Err(Error::NonStationary(format!(
                "MA coefficients {:?} of process {} are not invertible",
                self.ma_coeffs, self.label
            )));
        }
        Ok(())
    }
}

/// Simulates `t_obs` observations after discarding the burn-in, from zero initial conditions.
pub fn simulate_armax(dgp: &DgpConfig, t_obs: usize, seed: u64) -> Result<TimeSeriesDataset> {
    simulate_with(dgp, t_obs, &mut RngStream::new(seed, 0))
}

pub fn simulate_with(dgp: &DgpConfig, t_obs: usize, rng: &mut RngStream) -> Result<TimeSeriesDataset> {
    dgp.validate()?;
    if t_obs == 0 {
        return Err(Error::InvalidArgument("t_obs must be positive".into()));
    }
    let n = dgp.burn_in + t_obs;
    let x = sample_correlated_normal(rng, n, dgp.exo_coeffs.len(), dgp.rho)?;
    let eps: Vec<f64> = (0..n).map(|_| dgp.sigma * rng.standard_normal()).collect();
    let mut y = vec![0.0; n];
    for t in 0..n {
        let mut v = eps[t];
        for (j, b) in dgp.ar_coeffs.iter().enumerate() {
            if t > j {
                v += b * y[t - j - 1];
            }
        }
        for (k, th) in dgp.ma_coeffs.iter().enumerate() {
            if t > k {
                v += th * eps[t - k - 1];
            }
        }
        for (col, eta) in x.iter().zip(&dgp.exo_coeffs) {
            v += eta * col[t];
        }
        y[t] = v;
    }
    let columns = x.into_iter().map(|c| c[dgp.burn_in..].to_vec()).collect();
    TimeSeriesDataset::from_columns(y[dgp.burn_in..].to_vec(), columns)
}

/// Mean with its Monte Carlo standard error (sample sd / sqrt(n)).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn from_values(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self { mean: f64::NAN, se: f64::NAN };
        }
        Self {
            mean: mean(xs),
            se: sample_sd(xs) / (xs.len() as f64).sqrt(),
        }
    }
}

/// Per-replication outcome at one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub mscs_size: usize,
    pub lbm_count: usize,
    pub lbm_mean_dimension: f64,
    pub covered: bool,
    pub hamming_to_union: usize,
    pub union_covered: bool,
    /// Likelihood ratio of the true model against the full model.
    pub lambda_true: f64,
    pub candidate_failures: usize,
    pub full_repaired: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McCellResult {
    pub dgp: String,
    pub t_obs: usize,
    pub alpha: f64,
    pub rho: f64,
    pub n_relevant: usize,
    pub n_requested: usize,
    /// Replications that produced a confidence set.
    pub n_replications: usize,
    /// Replications aborted because the full model could not be fitted.
    pub n_fit_failures: usize,
    /// Candidate fits excluded for non-convergence, summed over replications.
    pub n_candidate_failures: usize,
    pub mscs_size: Estimate,
    /// Number of lower boundary models.
    pub lbm_size: Estimate,
    /// Average dimension of the lower boundary models.
    pub lbm_dimension: Estimate,
    pub coverage: Estimate,
    pub hamming_to_union: Estimate,
    pub union_coverage: Estimate,
    pub replications: Vec<ReplicationRecord>,
}

/// One simulation cell: a process, a sample size and a set of confidence levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub dgp: DgpConfig,
    pub t_obs: usize,
    pub alphas: Vec<f64>,
    pub n_reps: usize,
    pub universe: ModelUniverse,
    pub fit: FitOptions,
    pub seed: u64,
}

impl CellConfig {
    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.n_reps == 0 {
            return Err(Error::InvalidArgument("n_reps must be positive".into()));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::InvalidArgument(format!("alphas {:?} must lie in (0, 1)", self.alphas)));
        }
        if self.universe.s > self.dgp.exo_coeffs.len() {
            return Err(Error::InvalidArgument(format!(
                "universe uses {} predictors, the process generates {}",
                self.universe.s,
                self.dgp.exo_coeffs.len()
            )));
        }
        self.universe.validate()?;
        self.fit.validate()
    }
}

/// Called for every replication and level with the constructed set and its boundary.
pub type Observer<'a> = dyn Fn(usize, &ConfidenceSet, &LowerBoundary) + Sync + 'a;

pub fn run_cell(cfg: &CellConfig) -> Result<Vec<McCellResult>> {
    run_cell_observed(cfg, &|_, _, _| {})
}

/// Runs every replication of a cell (in parallel; replication `r` draws from stream `r`
/// of the cell seed) and summarizes each level. Results are returned in `alphas` order.
pub fn run_cell_observed(cfg: &CellConfig, observer: &Observer<'_>) -> Result<Vec<McCellResult>> {
    cfg.validate()?;
    let truth = cfg.dgp.true_spec();
    let outcomes: Vec<Result<Option<Vec<ReplicationRecord>>>> = (0..cfg.n_reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = RngStream::new(cfg.seed, rep as u64);
            let data = simulate_with(&cfg.dgp, cfg.t_obs, &mut rng)?;
            let screening = match screen_universe(&data, &cfg.universe, &cfg.fit) {
                Ok(s) => s,
                Err(Error::FullModelFailed(reason)) => {
                    log::warn!("replication {rep}: full model failed ({reason})");
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            let lambda_true = screening
                .scored()?
                .into_iter()
                .find(|m| m.spec == truth)
                .map_or(f64::NAN, |m| m.lambda);
            let mut records = Vec::with_capacity(cfg.alphas.len());
            for &alpha in &cfg.alphas {
                let cs = screening.confidence_set(alpha)?;
                let boundary = lower_boundary(&cs)?;
                observer(rep, &cs, &boundary);
                let dims: Vec<f64> = boundary.models.iter().map(|m| m.dimension() as f64).collect();
                records.push(ReplicationRecord {
                    replication: rep,
                    mscs_size: cs.members.len(),
                    lbm_count: boundary.models.len(),
                    lbm_mean_dimension: mean(&dims),
                    covered: cs.contains(&truth),
                    hamming_to_union: hamming_distance(&truth, &boundary.union_model),
                    union_covered: is_nested(&truth, &boundary.union_model),
                    lambda_true,
                    candidate_failures: cs.failures.len(),
                    full_repaired: screening.full_repaired,
                });
            }
            Ok(Some(records))
        })
        .collect();

    let mut per_level: Vec<Vec<ReplicationRecord>> = vec![Vec::new(); cfg.alphas.len()];
    let mut n_fit_failures = 0;
    for outcome in outcomes {
        match outcome? {
            Some(records) => {
                for (level, r) in records.into_iter().enumerate() {
                    per_level[level].push(r);
                }
            }
            None => n_fit_failures += 1,
        }
    }
    Ok(cfg
        .alphas
        .iter()
        .zip(per_level)
        .map(|(&alpha, recs)| summarize(cfg, alpha, recs, n_fit_failures))
        .collect())
}

fn summarize(cfg: &CellConfig, alpha: f64, recs: Vec<ReplicationRecord>, n_fit_failures: usize) -> McCellResult {
    let col = |f: &dyn Fn(&ReplicationRecord) -> f64| -> Estimate {
        Estimate::from_values(&recs.iter().map(f).collect::<Vec<_>>())
    };
    let indicator = |b: bool| if b { 1.0 } else { 0.0 };
    McCellResult {
        dgp: cfg.dgp.label.clone(),
        t_obs: cfg.t_obs,
        alpha,
        rho: cfg.dgp.rho,
        n_relevant: cfg.dgp.n_relevant(),
        n_requested: cfg.n_reps,
        n_replications: recs.len(),
        n_fit_failures,
        n_candidate_failures: recs.iter().map(|r| r.candidate_failures).sum(),
        mscs_size: col(&|r| r.mscs_size as f64),
        lbm_size: col(&|r| r.lbm_count as f64),
        lbm_dimension: col(&|r| r.lbm_mean_dimension),
        coverage: col(&|r| indicator(r.covered)),
        hamming_to_union: col(&|r| r.hamming_to_union as f64),
        union_coverage: col(&|r| indicator(r.union_covered)),
        replications: recs,
    }
}

/// Likelihood ratio of the true model against the full model of `universe` over
/// `n_reps` simulated samples; only the two models involved are fitted. The full
/// model is also started from the true model's optimum so that the ratio compares
/// the two maxima.
pub fn null_statistics(
    dgp: &DgpConfig,
    t_obs: usize,
    n_reps: usize,
    universe: &ModelUniverse,
    opts: &FitOptions,
    seed: u64,
) -> Result<Vec<f64>> {
    dgp.validate()?;
    universe.validate()?;
    let truth = dgp.true_spec();
    let full = universe.full_model();
    if !is_nested(&truth, &full) {
        return Err(Error::NotNested {
            inner: truth.to_string(),
            outer: full.to_string(),
        });
    }
    (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = RngStream::new(seed, rep as u64);
            let data = simulate_with(dgp, t_obs, &mut rng)?;
            let ctx = FitContext::new(&data, &full, universe.conditioning_length(), opts.clone())?;
            let small = ctx.fit(&truth)?;
            let big = ctx.fit_from(&full, &small.params)?;
            let (lambda, _) = crate::engine::lr_statistic(&big, &small)?;
            Ok(lambda)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::correlation;

    #[test]
    fn table_processes_are_valid() {
        for label in DgpConfig::labels() {
            for rho in [0.0, 0.7] {
                let d = DgpConfig::table(label, rho).unwrap();
                d.validate().unwrap();
                assert!(is_nested(&d.true_spec(), &ModelUniverse::monte_carlo().full_model()));
            }
        }
        let a = DgpConfig::table("A", 0.0).unwrap();
        assert_eq!(a.true_spec().to_string(), "ar{1} ma{} x{0 2}");
        assert_eq!(a.n_relevant(), 2);
        let f = DgpConfig::table("F", 0.0).unwrap();
        assert_eq!(f.true_spec().to_string(), "ar{1 2} ma{1} x{0 2 3 4 5}");
        assert!(DgpConfig::table("G", 0.0).is_err());
    }

    #[test]
    fn refuses_bad_processes() {
        let mut d = DgpConfig::table("A", 0.0).unwrap();
        d.ar_coeffs = vec![1.1];
        assert!(matches!(simulate_armax(&d, 100, 1), Err(Error::NonStationary(_))));
        let mut d = DgpConfig::table("A", 0.0).unwrap();
        d.burn_in = 100;
        assert!(simulate_armax(&d, 100, 1).is_err());
        let d = DgpConfig::table("A", -0.5).unwrap();
        assert!(matches!(d.validate(), Err(Error::InfeasibleCorrelation { s: 6, .. })));
        assert!(DgpConfig::table("A", -0.19).unwrap().validate().is_ok());
    }

    #[test]
    fn ar_component_autocorrelation() {
        let d = DgpConfig::table("A", 0.0).unwrap();
        let data = simulate_armax(&d, 10_000, 42).unwrap();
        // remove the exogenous contribution, leaving the AR(1) component
        let u: Vec<f64> = (0..data.len())
            .map(|t| {
                data.y()[t]
                    - d.exo_coeffs
                        .iter()
                        .enumerate()
                        .map(|(i, c)| c * data.column(i)[t])
                        .sum::<f64>()
            })
            .collect();
        let r1 = correlation(&u[1..], &u[..u.len() - 1]);
        assert!((r1 - 0.8).abs() < 0.02, "lag-1 autocorrelation {r1}");
    }

    #[test]
    fn predictor_correlation() {
        let d = DgpConfig::table("B", 0.7).unwrap();
        let data = simulate_armax(&d, 10_000, 5).unwrap();
        for i in 0..6 {
            for j in 0..i {
                let r = correlation(data.column(i), data.column(j));
                assert!((r - 0.7).abs() < 0.02, "corr({i},{j}) = {r}");
            }
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let d = DgpConfig::table("E", 0.7).unwrap();
        assert_eq!(simulate_armax(&d, 300, 9).unwrap(), simulate_armax(&d, 300, 9).unwrap());
        assert_ne!(simulate_armax(&d, 300, 9).unwrap(), simulate_armax(&d, 300, 10).unwrap());
    }

    fn small_cell(n_reps: usize, seed: u64) -> CellConfig {
        let mut universe = ModelUniverse::subset(1, 0, 3);
        universe.intercept = false;
        CellConfig {
            dgp: DgpConfig::table("A", 0.0).unwrap(),
            t_obs: 250,
            alphas: vec![0.01, 0.05],
            n_reps,
            universe,
            fit: FitOptions::default(),
            seed,
        }
    }

    #[test]
    fn zero_replications_are_refused() {
        assert!(run_cell(&small_cell(0, 1)).is_err());
    }

    #[test]
    fn cell_is_deterministic_and_consistent() {
        let cfg = small_cell(30, 77);
        let a = run_cell(&cfg).unwrap();
        let b = run_cell(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        for cell in &a {
            assert_eq!(cell.n_replications + cell.n_fit_failures, 30);
            assert!((0.0..=1.0).contains(&cell.coverage.mean));
            assert!((0.0..=1.0).contains(&cell.union_coverage.mean));
            assert!(cell.mscs_size.se >= 0.0 && cell.lbm_size.se >= 0.0);
            for r in &cell.replications {
                assert!(r.lbm_count >= 1);
                // a boundary model that is the truth is nested in the union
                if r.covered && r.lbm_count == 1 && r.hamming_to_union == 0 {
                    assert!(r.union_covered);
                }
            }
        }
        // a smaller alpha can only enlarge the set
        for (lo, hi) in a[0].replications.iter().zip(&a[1].replications) {
            assert!(lo.mscs_size >= hi.mscs_size);
        }
    }

    #[test]
    fn standard_errors_shrink_with_replications() {
        let se = |n| {
            let mut cfg = small_cell(n, 3);
            // a weak predictor makes the set size vary across replications
            cfg.dgp.exo_coeffs[1] = 0.15;
            run_cell(&cfg).unwrap()[0].mscs_size.se
        };
        let (s50, s200, s800) = (se(50), se(200), se(800));
        assert!((s50 / s200 / 2.0 - 1.0).abs() < 0.2, "{s50} {s200}");
        assert!((s200 / s800 / 2.0 - 1.0).abs() < 0.2, "{s200} {s800}");
    }
}
