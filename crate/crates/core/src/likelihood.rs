//! Conditional Gaussian likelihood of ARMAX specifications and its maximizer.
//!
//! All candidates in a run share one conditioning length `c`: observations
//! `0..c` only feed lags, the likelihood runs over `c..T`, and innovations
//! before `c` are zero. With a common window every nested pair of models is
//! compared on exactly the same observations.
//!
//! MA-free models are ordinary least squares on lagged regressors. Models with
//! MA terms minimize the innovation sum of squares by Levenberg-Marquardt with
//! an analytic Jacobian, started from a Hannan-Rissanen regression; sigma is
//! profiled out as the mean squared innovation.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{ExoTerm, ModelSpec, ParamVector, Term, TimeSeriesDataset};
use crate::stats::RngStream;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Largest allowed partial autocorrelation magnitude for an admissible polynomial.
const PACF_BOUND: f64 = 1.0 - 1e-7;

/// Fraction of var(y) below which the innovation variance counts as collapsed.
const DEGENERATE_VARIANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Convergence threshold on the gradient norm of the log-likelihood, measured in the
    /// inverse Gauss-Newton information metric (the Newton decrement), so it is
    /// invariant to the scale of the data and of the regressors.
    pub gradient_tolerance: f64,
    /// Extra randomized starts for models with MA terms.
    pub n_restarts: usize,
    pub enforce_stationarity: bool,
    pub enforce_invertibility: bool,
    /// Seed for the randomized restarts; combined with the model so fits are order independent.
    pub restart_seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            gradient_tolerance: 1e-4,
            n_restarts: 0,
            enforce_stationarity: false,
            enforce_invertibility: true,
            restart_seed: 0x5eed,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be positive".into()));
        }
        if !(self.gradient_tolerance > 0.0 && self.gradient_tolerance.is_finite()) {
            return Err(Error::InvalidArgument(
                "gradient_tolerance must be a positive number".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub params: ParamVector,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub conditioning_length: usize,
    pub n_effective: usize,
    pub gradient_norm: f64,
}

impl FittedModel {
    pub fn aic(&self) -> f64 {
        -2.0 * self.loglik + 2.0 * self.spec.dimension() as f64
    }

    pub fn bic(&self) -> f64 {
        -2.0 * self.loglik + self.spec.dimension() as f64 * (self.n_effective as f64).ln()
    }
}

/// True iff `1 - sum a_j B^j` has all roots outside the unit circle (step-down recursion).
pub fn ar_is_stationary(coeffs: &BTreeMap<usize, f64>) -> bool {
    let p = coeffs.keys().next_back().copied().unwrap_or(0);
    let mut a = vec![0.0; p + 1];
    for (&j, &v) in coeffs {
        a[j] = v;
    }
    step_down(a)
}

/// True iff `1 + sum theta_k B^k` has all roots outside the unit circle.
pub fn ma_is_invertible(coeffs: &BTreeMap<usize, f64>) -> bool {
    let negated = coeffs.iter().map(|(&k, &v)| (k, -v)).collect();
    ar_is_stationary(&negated)
}

fn step_down(mut a: Vec<f64>) -> bool {
    let p = a.len() - 1;
    for k in (1..=p).rev() {
        let r = a[k];
        if !r.is_finite() || r.abs() >= PACF_BOUND {
            return false;
        }
        let denom = 1.0 - r * r;
        let prev: Vec<f64> = (0..k).map(|j| if j == 0 { 0.0 } else { (a[j] + r * a[k - j]) / denom }).collect();
        a[..k].copy_from_slice(&prev);
    }
    true
}

fn check_sample(data: &TimeSeriesDataset, conditioning: usize, spec: &ModelSpec) -> Result<()> {
    if conditioning < spec.max_observed_lag() {
        return Err(Error::InvalidArgument(format!(
            "conditioning length {conditioning} is below the largest lag {} of {spec}",
            spec.max_observed_lag()
        )));
    }
    if let Some(p) = spec.max_predictor() {
        if p >= data.n_predictors() {
            return Err(Error::InvalidSpec(format!(
                "{spec} uses predictor {p} but the dataset has {}",
                data.n_predictors()
            )));
        }
    }
    let available = data.len().saturating_sub(conditioning);
    if available <= spec.dimension() + 1 {
        return Err(Error::InsufficientSample {
            available,
            required: spec.dimension() + 1,
        });
    }
    Ok(())
}

/// Innovation residuals `e_t` for `t = c..T` with zero pre-sample innovations.
fn innovations(params: &ParamVector, data: &TimeSeriesDataset, c: usize) -> Vec<f64> {
    let y = data.y();
    let n = y.len() - c;
    let mut e = vec![0.0; n];
    let alpha = params.intercept.unwrap_or(0.0);
    for i in 0..n {
        let t = c + i;
        let mut fit = alpha;
        for (&j, &b) in &params.ar {
            fit += b * y[t - j];
        }
        for (ex, &eta) in &params.exo {
            fit += eta * data.column(ex.predictor)[t - ex.lag];
        }
        for (&k, &th) in &params.ma {
            if i >= k {
                fit += th * e[i - k];
            }
        }
        e[i] = y[t] - fit;
    }
    e
}

/// Conditional Gaussian log-likelihood of observations `c..T` given the first `c`.
pub fn log_likelihood(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &TimeSeriesDataset,
    conditioning_length: usize,
) -> Result<f64> {
    params.validate(spec)?;
    check_sample(data, conditioning_length, &ModelSpec::empty())?;
    if conditioning_length < spec.max_observed_lag() {
        return Err(Error::InvalidArgument(format!(
            "conditioning length {conditioning_length} is below the largest lag of {spec}"
        )));
    }
    let e = innovations(params, data, conditioning_length);
    let n = e.len() as f64;
    let ssr: f64 = e.iter().map(|v| v * v).sum();
    let s2 = params.sigma * params.sigma;
    let ll = -0.5 * n * (LN_2PI + s2.ln()) - ssr / (2.0 * s2);
    if !ll.is_finite() {
        return Err(Error::Evaluation {
            point: flatten_params(spec, params),
        });
    }
    Ok(ll)
}

fn flatten_params(spec: &ModelSpec, params: &ParamVector) -> Vec<f64> {
    let mut v: Vec<f64> = spec.terms().filter_map(|t| params.coefficient(t)).collect();
    v.push(params.sigma);
    v
}

/// Maximum-likelihood fit of a single specification.
pub fn fit_mle(
    spec: &ModelSpec,
    data: &TimeSeriesDataset,
    opts: &FitOptions,
    conditioning_length: usize,
) -> Result<FittedModel> {
    let ctx = FitContext::new(data, spec, conditioning_length, opts.clone())?;
    ctx.fit(spec)
}

/// Analytic gradient of [`log_likelihood`] with respect to every coefficient of `spec`,
/// holding sigma fixed.
pub fn log_likelihood_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &TimeSeriesDataset,
    conditioning_length: usize,
) -> Result<BTreeMap<Term, f64>> {
    params.validate(spec)?;
    let ctx = FitContext::new(data, spec, conditioning_length, FitOptions::default())?;
    let problem = ctx.problem(spec)?;
    let phi = problem.pack(params);
    let (n, d) = (problem.y.len(), phi.len());
    let mut e = vec![0.0; n];
    let mut jac = vec![0.0; n * d];
    problem.jacobian(&phi, &mut e, &mut jac);
    let (_, g) = normal_system(&jac, &e, n, d);
    let s2 = params.sigma * params.sigma;
    let terms = problem
        .reg_terms
        .iter()
        .copied()
        .chain(problem.ma_lags.iter().map(|&k| Term::Ma(k)));
    // the Jacobian is of the residuals, so d loglik = -(1/sigma^2) J'e
    Ok(terms.zip(g.iter()).map(|(t, v)| (t, -v / s2)).collect())
}

/// Shared precomputation for fitting many specifications nested in one full model
/// on one dataset: effective-sample regressor columns, a Hannan-Rissanen residual
/// proxy, and the cross-product matrix of all of them.
pub struct FitContext<'a> {
    data: &'a TimeSeriesDataset,
    full: ModelSpec,
    opts: FitOptions,
    conditioning: usize,
    y: Vec<f64>,
    /// Regression columns over the effective sample, keyed by intercept / AR / exogenous term.
    columns: Vec<Vec<f64>>,
    column_of: BTreeMap<Term, usize>,
    /// Lagged residual proxies `ehat_{t-k}` for `k = 1..=q_max`, over the effective sample.
    proxy_lags: Vec<Vec<f64>>,
    /// Cross products of `[columns.., proxy_lags.., y]`.
    gram: DMatrix<f64>,
    y_variance: f64,
}

impl<'a> FitContext<'a> {
    pub fn new(
        data: &'a TimeSeriesDataset,
        full: &ModelSpec,
        conditioning_length: usize,
        opts: FitOptions,
    ) -> Result<Self> {
        opts.validate()?;
        check_sample(data, conditioning_length, full)?;
        let c = conditioning_length;
        let y_all = data.y();
        let n = y_all.len() - c;
        let y: Vec<f64> = y_all[c..].to_vec();

        let mut columns = Vec::new();
        let mut column_of = BTreeMap::new();
        for term in full.terms() {
            let col: Vec<f64> = match term {
                Term::Intercept => vec![1.0; n],
                Term::Ar(j) => (c..y_all.len()).map(|t| y_all[t - j]).collect(),
                Term::Exo(ExoTerm { predictor, lag }) => {
                    let x = data.column(predictor);
                    (c..y_all.len()).map(|t| x[t - lag]).collect()
                }
                Term::Ma(_) => continue,
            };
            column_of.insert(term, columns.len());
            columns.push(col);
        }

        let q_max = full.ma_lags.iter().next_back().copied().unwrap_or(0);
        let proxy = if q_max > 0 {
            long_ar_residuals(data, full, c)
        } else {
            vec![0.0; n]
        };
        let proxy_lags: Vec<Vec<f64>> = (1..=q_max)
            .map(|k| (0..n).map(|i| if i >= k { proxy[i - k] } else { 0.0 }).collect())
            .collect();

        let all: Vec<&[f64]> = columns
            .iter()
            .chain(proxy_lags.iter())
            .map(|v| v.as_slice())
            .chain(std::iter::once(y.as_slice()))
            .collect();
        let gram = cross_products(&all);

        let mean = y.iter().sum::<f64>() / n as f64;
        let y_variance = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;

        Ok(Self {
            data,
            full: full.clone(),
            opts,
            conditioning: c,
            y,
            columns,
            column_of,
            proxy_lags,
            gram,
            y_variance,
        })
    }

    pub fn conditioning_length(&self) -> usize {
        self.conditioning
    }

    pub fn n_effective(&self) -> usize {
        self.y.len()
    }

    pub fn full_spec(&self) -> &ModelSpec {
        &self.full
    }

    pub fn options(&self) -> &FitOptions {
        &self.opts
    }

    fn problem(&self, spec: &ModelSpec) -> Result<Problem<'_>> {
        if !crate::series::is_nested(spec, &self.full) {
            return Err(Error::NotNested {
                inner: spec.to_string(),
                outer: self.full.to_string(),
            });
        }
        let reg_terms: Vec<Term> = spec.terms().filter(|t| !matches!(t, Term::Ma(_))).collect();
        let reg_index: Vec<usize> = reg_terms.iter().map(|t| self.column_of[t]).collect();
        Ok(Problem {
            y: &self.y,
            reg: reg_index.iter().map(|&i| self.columns[i].as_slice()).collect(),
            reg_terms,
            reg_index,
            ma_lags: spec.ma_lags.iter().copied().collect(),
            ar_slots: spec.ar_lags.iter().copied().collect(),
        })
    }

    /// Maximum-likelihood fit from the default starting points: the Hannan-Rissanen
    /// estimate, the same with the MA part zeroed, and `n_restarts` perturbations.
    pub fn fit(&self, spec: &ModelSpec) -> Result<FittedModel> {
        self.fit_seeded(spec, None)
    }

    /// Like [`fit`](Self::fit), but `warm` (typically the optimum of a nested model,
    /// embedded into `spec`) replaces the zeroed-MA start.
    pub fn fit_seeded(&self, spec: &ModelSpec, warm: Option<&ParamVector>) -> Result<FittedModel> {
        let problem = self.problem(spec)?;
        if problem.ma_lags.is_empty() {
            let beta = self.solve_subset(&problem.reg_index, None);
            let phi = DVector::from_vec(beta);
            if !self.opts.enforce_stationarity || problem.stationary(&phi) {
                return Ok(self.finish(spec, &problem, phi, 0, true, None));
            }
        }
        let hr = self.hannan_rissanen(&problem);
        let mut starts = vec![hr.clone()];
        match warm {
            Some(w) => starts.push(problem.pack(&w.embed(spec))),
            None if !problem.ma_lags.is_empty() => {
                let mut zero_ma = hr.clone();
                zero_ma.rows_mut(problem.reg.len(), problem.ma_lags.len()).fill(0.0);
                starts.push(zero_ma);
            }
            None => {}
        }
        let mut rng = RngStream::new(self.opts.restart_seed, spec_hash(spec));
        for _ in 0..self.opts.n_restarts {
            let mut s = hr.clone();
            for k in 0..problem.ma_lags.len() {
                s[problem.reg.len() + k] = 1.2 * rng.uniform() - 0.6;
            }
            for v in s.iter_mut().take(problem.reg.len()) {
                *v *= 1.0 + 0.2 * (rng.uniform() - 0.5);
            }
            starts.push(s);
        }
        Ok(self.best_of(spec, &problem, starts))
    }

    /// Fit started from `start` (embedded into `spec`) in addition to the default starts.
    pub fn fit_from(&self, spec: &ModelSpec, start: &ParamVector) -> Result<FittedModel> {
        let problem = self.problem(spec)?;
        let embedded = start.embed(spec);
        let phi = problem.pack(&embedded);
        let warm = self.best_of(spec, &problem, vec![phi]);
        let cold = self.fit(spec)?;
        Ok(better(warm, cold))
    }

    /// Local refinement from `start` alone, for re-estimation on slightly changed data;
    /// falls back to [`fit_from`](Self::fit_from) when it does not converge.
    pub fn refine(&self, spec: &ModelSpec, start: &ParamVector) -> Result<FittedModel> {
        let problem = self.problem(spec)?;
        if problem.ma_lags.is_empty() {
            return self.fit(spec);
        }
        let phi = problem.pack(&start.embed(spec));
        let warm = self.best_of(spec, &problem, vec![phi]);
        if warm.converged {
            Ok(warm)
        } else {
            self.fit_from(spec, start)
        }
    }

    fn best_of(&self, spec: &ModelSpec, problem: &Problem<'_>, starts: Vec<DVector<f64>>) -> FittedModel {
        let mut best: Option<FittedModel> = None;
        for start in starts {
            let start = self.make_admissible(problem, start);
            let (phi, iters, converged, decrement) = self.levenberg_marquardt(problem, start);
            let fitted = self.finish(spec, problem, phi, iters, converged, Some(decrement));
            best = Some(match best {
                None => fitted,
                Some(b) => better(b, fitted),
            });
        }
        best.expect("at least one start")
    }

    fn admissible(&self, problem: &Problem<'_>, phi: &DVector<f64>) -> bool {
        (!self.opts.enforce_invertibility || problem.invertible(phi))
            && (!self.opts.enforce_stationarity || problem.stationary(phi))
    }

    fn make_admissible(&self, problem: &Problem<'_>, mut phi: DVector<f64>) -> DVector<f64> {
        let nr = problem.reg.len();
        for _ in 0..200 {
            if self.admissible(problem, &phi) {
                return phi;
            }
            for v in phi.iter_mut().skip(nr) {
                *v *= 0.9;
            }
            if self.opts.enforce_stationarity && !problem.stationary(&phi) {
                for (pos, term) in problem.reg_terms.iter().enumerate() {
                    if matches!(term, Term::Ar(_)) {
                        phi[pos] *= 0.9;
                    }
                }
            }
        }
        let mut zero = phi;
        zero.fill(0.0);
        zero
    }

    fn levenberg_marquardt(&self, problem: &Problem<'_>, mut phi: DVector<f64>) -> (DVector<f64>, usize, bool, f64) {
        let d = phi.len();
        let n = problem.y.len();
        let mut e = vec![0.0; n];
        let mut jac = vec![0.0; n * d];
        let mut trial_e = vec![0.0; n];
        let mut ssr = problem.jacobian(&phi, &mut e, &mut jac);
        if !ssr.is_finite() {
            return (phi, 0, false, f64::INFINITY);
        }
        let mut mu = 1e-3;
        for iter in 0..self.opts.max_iterations {
            let (a, g) = normal_system(&jac, &e, n, d);
            let decrement = newton_decrement(&a, &g, ssr, n);
            if decrement < self.opts.gradient_tolerance {
                return (phi, iter, true, decrement);
            }
            let mut improved = false;
            while mu < 1e12 {
                let mut damped = a.clone();
                for i in 0..d {
                    damped[(i, i)] += mu * a[(i, i)].max(1e-12) + 1e-14;
                }
                let step = match damped.cholesky() {
                    Some(ch) => ch.solve(&(-&g)),
                    None => {
                        mu *= 4.0;
                        continue;
                    }
                };
                let trial = &phi + &step;
                if self.admissible(problem, &trial) {
                    let trial_ssr = problem.residuals(&trial, &mut trial_e);
                    if trial_ssr.is_finite() && trial_ssr < ssr {
                        let relative = (ssr - trial_ssr) / ssr;
                        phi = trial;
                        std::mem::swap(&mut e, &mut trial_e);
                        ssr = trial_ssr;
                        problem.fill_jacobian(&phi, &e, &mut jac);
                        mu = (mu / 3.0).max(1e-12);
                        improved = true;
                        if relative < 1e-15 {
                            let (a, g) = normal_system(&jac, &e, n, d);
                            let dec = newton_decrement(&a, &g, ssr, n);
                            return (phi, iter + 1, dec < self.opts.gradient_tolerance, dec);
                        }
                        break;
                    }
                }
                mu *= 4.0;
            }
            if !improved {
                let (a, g) = normal_system(&jac, &e, n, d);
                let dec = newton_decrement(&a, &g, ssr, n);
                return (phi, iter + 1, dec < self.opts.gradient_tolerance, dec);
            }
        }
        let (a, g) = normal_system(&jac, &e, n, d);
        let dec = newton_decrement(&a, &g, ssr, n);
        (phi, self.opts.max_iterations, dec < self.opts.gradient_tolerance, dec)
    }

    fn finish(
        &self,
        spec: &ModelSpec,
        problem: &Problem<'_>,
        phi: DVector<f64>,
        iterations: usize,
        converged: bool,
        gradient_norm: Option<f64>,
    ) -> FittedModel {
        let n = problem.y.len();
        let d = phi.len();
        let mut e = vec![0.0; n];
        let ssr = problem.residuals(&phi, &mut e);
        let sigma2 = ssr / n as f64;
        let loglik = -0.5 * n as f64 * (LN_2PI + sigma2.ln() + 1.0);
        let gradient_norm = match gradient_norm {
            Some(g) => g,
            None if d == 0 => 0.0,
            None => {
                let mut jac = vec![0.0; n * d];
                problem.fill_jacobian(&phi, &e, &mut jac);
                let (a, g) = normal_system(&jac, &e, n, d);
                newton_decrement(&a, &g, ssr, n)
            }
        };
        let degenerate = !(sigma2 > DEGENERATE_VARIANCE * self.y_variance);
        let mut params = problem.unpack(&phi, spec);
        params.sigma = sigma2.sqrt();
        FittedModel {
            spec: spec.clone(),
            params,
            loglik,
            converged: converged && !degenerate && loglik.is_finite(),
            iterations,
            conditioning_length: self.conditioning,
            n_effective: n,
            gradient_norm,
        }
    }

    /// Least-squares coefficients for a subset of the cached columns, optionally with
    /// residual-proxy lags appended.
    fn solve_subset(&self, reg_index: &[usize], proxy: Option<&[usize]>) -> Vec<f64> {
        let nc = self.columns.len();
        let mut idx: Vec<usize> = reg_index.to_vec();
        if let Some(p) = proxy {
            idx.extend(p.iter().map(|k| nc + k - 1));
        }
        let yi = nc + self.proxy_lags.len();
        let k = idx.len();
        if k == 0 {
            return Vec::new();
        }
        let a = DMatrix::from_fn(k, k, |i, j| self.gram[(idx[i], idx[j])]);
        let b = DVector::from_fn(k, |i, _| self.gram[(idx[i], yi)]);
        solve_normal_equations(a, b).iter().copied().collect()
    }

    fn hannan_rissanen(&self, problem: &Problem<'_>) -> DVector<f64> {
        let sol = self.solve_subset(&problem.reg_index, Some(&problem.ma_lags));
        DVector::from_vec(sol)
    }

    pub fn data(&self) -> &TimeSeriesDataset {
        self.data
    }
}

fn better(a: FittedModel, b: FittedModel) -> FittedModel {
    match (a.converged, b.converged) {
        (true, false) => a,
        (false, true) => b,
        _ => {
            if b.loglik > a.loglik {
                b
            } else {
                a
            }
        }
    }
}

/// FNV-1a over the canonical string: a stable per-model stream id.
fn spec_hash(spec: &ModelSpec) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in spec.to_string().bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Residuals of a long autoregression (with the full model's exogenous terms and
/// intercept) over the effective sample; zero where the long lags are unavailable.
fn long_ar_residuals(data: &TimeSeriesDataset, full: &ModelSpec, c: usize) -> Vec<f64> {
    let y = data.y();
    let t_total = y.len();
    let n = t_total - c;
    let order = ((10.0 * (n as f64).log10()).ceil() as usize)
        .max(full.ar_lags.iter().next_back().copied().unwrap_or(0) + full.ma_lags.len())
        .min(n / 4)
        .max(1);
    let start = order.max(c);
    let rows = t_total.saturating_sub(start);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    cols.push(vec![1.0; rows]);
    for j in 1..=order {
        cols.push((start..t_total).map(|t| y[t - j]).collect());
    }
    for e in &full.exo_terms {
        let x = data.column(e.predictor);
        cols.push((start..t_total).map(|t| x[t - e.lag]).collect());
    }
    let target: Vec<f64> = y[start..].to_vec();
    if rows <= cols.len() + 1 {
        return vec![0.0; n];
    }
    let mut all: Vec<&[f64]> = cols.iter().map(|v| v.as_slice()).collect();
    all.push(&target);
    let g = cross_products(&all);
    let k = cols.len();
    let a = DMatrix::from_fn(k, k, |i, j| g[(i, j)]);
    let b = DVector::from_fn(k, |i, _| g[(i, k)]);
    let beta = solve_normal_equations(a, b);
    let mut out = vec![0.0; n];
    for (r, t) in (start..t_total).enumerate() {
        let fit: f64 = cols.iter().zip(beta.iter()).map(|(col, b)| col[r] * b).sum();
        out[t - c] = y[t] - fit;
    }
    out
}

fn cross_products(cols: &[&[f64]]) -> DMatrix<f64> {
    let k = cols.len();
    let mut g = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = dot(cols[i], cols[j]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Solves `a x = b` for a symmetric positive semi-definite `a` with Jacobi scaling;
/// falls back to the SVD pseudo-inverse when the system is singular.
fn solve_normal_equations(a: DMatrix<f64>, b: DVector<f64>) -> DVector<f64> {
    let k = a.nrows();
    let scale = DVector::from_fn(k, |i, _| {
        let d = a[(i, i)];
        if d > 0.0 {
            1.0 / d.sqrt()
        } else {
            1.0
        }
    });
    let scaled = DMatrix::from_fn(k, k, |i, j| a[(i, j)] * scale[i] * scale[j]);
    let rhs = DVector::from_fn(k, |i, _| b[i] * scale[i]);
    let z = match scaled.clone().cholesky() {
        Some(ch) if ch.l().diagonal().iter().all(|v| *v > 1e-7) => ch.solve(&rhs),
        _ => scaled
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(k)),
    };
    z.component_mul(&scale)
}

/// Gauss-Newton system `(J'J, J'e)` from a column-major Jacobian.
fn normal_system(jac: &[f64], e: &[f64], n: usize, d: usize) -> (DMatrix<f64>, DVector<f64>) {
    let col = |j: usize| &jac[j * n..(j + 1) * n];
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let v = dot(col(i), col(j));
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    let g = DVector::from_fn(d, |i, _| dot(col(i), e));
    (a, g)
}

/// Applies `v_t <- v_t - sum_k theta_k v_{t-k}` in place to every series, i.e. filters
/// through `1 / theta(B)`. The series advance together so their recursions overlap.
fn inverse_ma_filter(series: &mut [&mut [f64]], theta: &[(usize, f64)]) {
    let Some(n) = series.first().map(|s| s.len()) else { return };
    let k_min = theta.iter().map(|t| t.0).min().unwrap_or(n).min(n);
    let k_max = theta.iter().map(|t| t.0).max().unwrap_or(0).min(n);
    for t in k_min..k_max {
        for col in series.iter_mut() {
            let mut v = col[t];
            for &(k, th) in theta {
                if t >= k {
                    v -= th * col[t - k];
                }
            }
            col[t] = v;
        }
    }
    match *theta {
        [(k1, t1)] => {
            for t in k_max..n {
                for col in series.iter_mut() {
                    col[t] -= t1 * col[t - k1];
                }
            }
        }
        [(k1, t1), (k2, t2)] => {
            for t in k_max..n {
                for col in series.iter_mut() {
                    col[t] -= t1 * col[t - k1] + t2 * col[t - k2];
                }
            }
        }
        _ => {
            for t in k_max..n {
                for col in series.iter_mut() {
                    let mut v = col[t];
                    for &(k, th) in theta {
                        v -= th * col[t - k];
                    }
                    col[t] = v;
                }
            }
        }
    }
}

/// Dot product with four independent accumulators, so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    let mut acc = [0.0; 4];
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// sqrt(grad' H^-1 grad) for the profiled log-likelihood, H the Gauss-Newton information.
fn newton_decrement(a: &DMatrix<f64>, g: &DVector<f64>, ssr: f64, n: usize) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    let x = solve_normal_equations(a.clone(), g.clone());
    let quad = g.dot(&x).max(0.0);
    (n as f64 / ssr * quad).sqrt()
}

/// One specification's view of a [`FitContext`]. The parameter vector is the regression
/// coefficients (in `spec.terms()` order, MA excluded) followed by the MA coefficients.
struct Problem<'c> {
    y: &'c [f64],
    reg: Vec<&'c [f64]>,
    reg_terms: Vec<Term>,
    reg_index: Vec<usize>,
    ma_lags: Vec<usize>,
    ar_slots: Vec<usize>,
}

impl Problem<'_> {
    fn pack(&self, p: &ParamVector) -> DVector<f64> {
        let mut v: Vec<f64> = self
            .reg_terms
            .iter()
            .map(|&t| p.coefficient(t).unwrap_or(0.0))
            .collect();
        v.extend(self.ma_lags.iter().map(|k| p.ma.get(k).copied().unwrap_or(0.0)));
        DVector::from_vec(v)
    }

    fn unpack(&self, phi: &DVector<f64>, spec: &ModelSpec) -> ParamVector {
        let mut p = ParamVector::zeros(spec, 1.0);
        for (pos, term) in self.reg_terms.iter().enumerate() {
            match term {
                Term::Intercept => p.intercept = Some(phi[pos]),
                Term::Ar(j) => {
                    p.ar.insert(*j, phi[pos]);
                }
                Term::Exo(e) => {
                    p.exo.insert(*e, phi[pos]);
                }
                Term::Ma(_) => unreachable!(),
            }
        }
        let nr = self.reg.len();
        for (i, &k) in self.ma_lags.iter().enumerate() {
            p.ma.insert(k, phi[nr + i]);
        }
        p
    }

    fn ar_map(&self, phi: &DVector<f64>) -> BTreeMap<usize, f64> {
        let mut m = BTreeMap::new();
        for (pos, term) in self.reg_terms.iter().enumerate() {
            if let Term::Ar(j) = term {
                m.insert(*j, phi[pos]);
            }
        }
        debug_assert_eq!(m.len(), self.ar_slots.len());
        m
    }

    fn stationary(&self, phi: &DVector<f64>) -> bool {
        ar_is_stationary(&self.ar_map(phi))
    }

    fn invertible(&self, phi: &DVector<f64>) -> bool {
        let nr = self.reg.len();
        let ma: BTreeMap<usize, f64> = self
            .ma_lags
            .iter()
            .enumerate()
            .map(|(i, &k)| (k, phi[nr + i]))
            .collect();
        ma_is_invertible(&ma)
    }

    fn theta(&self, phi: &DVector<f64>) -> Vec<(usize, f64)> {
        let nr = self.reg.len();
        self.ma_lags
            .iter()
            .enumerate()
            .map(|(i, &k)| (k, phi[nr + i]))
            .collect()
    }

    /// Fills `e` with innovations and returns their sum of squares.
    fn residuals(&self, phi: &DVector<f64>, e: &mut [f64]) -> f64 {
        e.copy_from_slice(self.y);
        for (col, b) in self.reg.iter().zip(phi.iter()) {
            for (ei, x) in e.iter_mut().zip(col.iter()) {
                *ei -= b * x;
            }
        }
        let theta = self.theta(phi);
        if !theta.is_empty() {
            inverse_ma_filter(&mut [e], &theta);
        }
        dot(e, e)
    }

    /// Residuals plus the Jacobian; see [`fill_jacobian`](Self::fill_jacobian).
    fn jacobian(&self, phi: &DVector<f64>, e: &mut [f64], jac: &mut [f64]) -> f64 {
        let ssr = self.residuals(phi, e);
        self.fill_jacobian(phi, e, jac);
        ssr
    }

    /// Column-major Jacobian `de_t / dphi` (column `j` at `j * n..`) given the residuals `e` at `phi`.
    fn fill_jacobian(&self, phi: &DVector<f64>, e: &[f64], jac: &mut [f64]) {
        let n = self.y.len();
        let nr = self.reg.len();
        let mut cols: Vec<&mut [f64]> = jac.chunks_exact_mut(n).collect();
        for (j, col) in cols.iter_mut().enumerate() {
            if j < nr {
                for (c, x) in col.iter_mut().zip(self.reg[j].iter()) {
                    *c = -x;
                }
            } else {
                let k = self.ma_lags[j - nr].min(n);
                col[..k].fill(0.0);
                for (c, v) in col[k..].iter_mut().zip(e) {
                    *c = -v;
                }
            }
        }
        let theta = self.theta(phi);
        if !theta.is_empty() {
            inverse_ma_filter(&mut cols, &theta);
        }
    }
}

/// In-sample innovations of a fitted model over `history`, seeded with zeros: residuals
/// are zero until enough observations exist for the AR and exogenous lags.
pub fn innovation_residuals(model: &FittedModel, history: &TimeSeriesDataset) -> Vec<f64> {
    let lag = model.spec.max_observed_lag();
    let n = history.len();
    let mut out = vec![0.0; n];
    if n <= lag {
        return out;
    }
    let tail = innovations(&model.params, history, lag);
    out[lag..].copy_from_slice(&tail);
    out
}

/// One-step-ahead forecast of the observation following `history`.
///
/// Contemporaneous exogenous terms read `next_exogenous`; lagged ones read `history`.
pub fn one_step_forecast(
    model: &FittedModel,
    history: &TimeSeriesDataset,
    next_exogenous: &[f64],
) -> Result<f64> {
    let spec = &model.spec;
    let lag = spec.max_lag();
    if history.len() < lag {
        return Err(Error::InsufficientSample {
            available: history.len(),
            required: lag,
        });
    }
    if next_exogenous.len() != history.n_predictors() {
        return Err(Error::InvalidArgument(format!(
            "{} next-period exogenous values for {} predictors",
            next_exogenous.len(),
            history.n_predictors()
        )));
    }
    let eps = innovation_residuals(model, history);
    let y = history.y();
    let t = y.len();
    let p = &model.params;
    let mut f = p.intercept.unwrap_or(0.0);
    for (&j, &b) in &p.ar {
        f += b * y[t - j];
    }
    for (&k, &th) in &p.ma {
        f += th * eps[t - k];
    }
    for (e, &eta) in &p.exo {
        let x = if e.lag == 0 {
            next_exogenous[e.predictor]
        } else {
            history.column(e.predictor)[t - e.lag]
        };
        f += eta * x;
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simulate(n: usize, seed: u64, ar: &[f64], ma: &[f64], exo: &[f64], intercept: f64) -> TimeSeriesDataset {
        let mut rng = RngStream::new(seed, 0);
        let burn = 200;
        let total = n + burn;
        let xs: Vec<Vec<f64>> = exo.iter().map(|_| (0..total).map(|_| rng.standard_normal()).collect()).collect();
        let mut y = vec![0.0; total];
        let mut e = vec![0.0; total];
        for t in 0..total {
            e[t] = rng.standard_normal();
            let mut v = intercept + e[t];
            for (j, a) in ar.iter().enumerate() {
                if t > j {
                    v += a * y[t - j - 1];
                }
            }
            for (k, th) in ma.iter().enumerate() {
                if t > k {
                    v += th * e[t - k - 1];
                }
            }
            for (x, b) in xs.iter().zip(exo) {
                v += b * x[t];
            }
            y[t] = v;
        }
        TimeSeriesDataset::from_columns(y[burn..].to_vec(), xs.iter().map(|x| x[burn..].to_vec()).collect()).unwrap()
    }

    fn roots_outside_unit_circle(coeffs: &[f64]) -> bool {
        // Durand-Kerner on 1 - sum a_j z^j, written monic in z.
        let p = coeffs.len();
        if p == 0 {
            return true;
        }
        let lead = -coeffs[p - 1];
        if lead == 0.0 {
            return roots_outside_unit_circle(&coeffs[..p - 1]);
        }
        // poly(z) = 1 - a1 z - ... - ap z^p; monic: z^p + c_{p-1} z^{p-1} + ... + c0
        let mut c = vec![0.0; p + 1];
        c[0] = 1.0 / lead;
        for j in 1..p {
            c[j] = -coeffs[j - 1] / lead;
        }
        c[p] = 1.0;
        type C = (f64, f64);
        let mul = |a: C, b: C| (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0);
        let sub = |a: C, b: C| (a.0 - b.0, a.1 - b.1);
        let div = |a: C, b: C| {
            let d = b.0 * b.0 + b.1 * b.1;
            ((a.0 * b.0 + a.1 * b.1) / d, (a.1 * b.0 - a.0 * b.1) / d)
        };
        let eval = |z: C| {
            let mut acc = (1.0, 0.0);
            for j in (0..p).rev() {
                acc = mul(acc, z);
                acc.0 += c[j];
            }
            acc
        };
        let mut roots: Vec<C> = (0..p).map(|i| {
            let ang = 0.4 + 2.0 * std::f64::consts::PI * i as f64 / p as f64;
            (1.3 * ang.cos(), 1.3 * ang.sin())
        }).collect();
        for _ in 0..2000 {
            for i in 0..p {
                let mut den = (1.0, 0.0);
                for j in 0..p {
                    if i != j {
                        den = mul(den, sub(roots[i], roots[j]));
                    }
                }
                roots[i] = sub(roots[i], div(eval(roots[i]), den));
            }
        }
        roots.iter().all(|r| (r.0 * r.0 + r.1 * r.1).sqrt() > 1.0 + 1e-8)
    }

    #[test]
    fn white_noise_closed_form() {
        let data = simulate(300, 1, &[], &[], &[], 0.0);
        let spec = ModelSpec::empty();
        let c = 3;
        let eff = &data.y()[c..];
        let n = eff.len() as f64;
        let rms = (eff.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        let mut params = ParamVector::zeros(&spec, rms);
        params.sigma = rms;
        let ll = log_likelihood(&spec, &params, &data, c).unwrap();
        let expected = -(n / 2.0) * (2.0 * std::f64::consts::PI * rms * rms).ln() - n / 2.0;
        assert!((ll - expected).abs() < 1e-10);
    }

    #[test]
    fn ar1_likelihood_matches_direct_regression() {
        let data = simulate(400, 2, &[0.6], &[], &[], 0.0);
        let y = data.y();
        // direct least squares for y_t on y_{t-1}, t = 1..T
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for t in 1..y.len() {
            sxy += y[t] * y[t - 1];
            sxx += y[t - 1] * y[t - 1];
        }
        let b = sxy / sxx;
        let ssr: f64 = (1..y.len()).map(|t| (y[t] - b * y[t - 1]).powi(2)).sum();
        let n = (y.len() - 1) as f64;
        let expected = -(n / 2.0) * ((2.0 * std::f64::consts::PI * ssr / n).ln() + 1.0);
        let spec = ModelSpec::new([1], [], [], false);
        let fit = fit_mle(&spec, &data, &FitOptions::default(), 1).unwrap();
        assert!(fit.converged);
        assert!((fit.params.ar[&1] - b).abs() < 1e-10);
        assert!((fit.loglik - expected).abs() < 1e-8);
        let ll = log_likelihood(&spec, &fit.params, &data, 1).unwrap();
        assert!((ll - expected).abs() < 1e-8);
    }

    #[test]
    fn arma11_recursion_matches_hand_loop() {
        let y: Vec<f64> = (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3).collect();
        let data = TimeSeriesDataset::univariate(y.clone()).unwrap();
        let spec = ModelSpec::new([1], [1], [], true);
        let mut p = ParamVector::zeros(&spec, 0.9);
        p.intercept = Some(0.1);
        p.ar.insert(1, 0.4);
        p.ma.insert(1, -0.3);
        let c = 1;
        let mut e_prev = 0.0;
        let mut ssr = 0.0;
        for t in c..20 {
            let e = y[t] - 0.1 - 0.4 * y[t - 1] + 0.3 * e_prev;
            ssr += e * e;
            e_prev = e;
        }
        let n = 19.0;
        let expected = -0.5 * n * (2.0 * std::f64::consts::PI * 0.81f64).ln() - ssr / (2.0 * 0.81);
        let ll = log_likelihood(&spec, &p, &data, c).unwrap();
        assert!((ll - expected).abs() < 1e-12);
    }

    #[test]
    fn likelihood_rejects_bad_points() {
        let data = simulate(50, 3, &[0.5], &[], &[], 0.0);
        let spec = ModelSpec::new([1], [1], [], false);
        let mut p = ParamVector::zeros(&spec, 1.0);
        p.ma.insert(1, 1e200);
        p.ar.insert(1, 1e200);
        assert!(matches!(log_likelihood(&spec, &p, &data, 1), Err(Error::Evaluation { .. })));
        let p = ParamVector::zeros(&spec, 1.0);
        assert!(log_likelihood(&spec, &p, &data, 0).is_err());
    }

    #[test]
    fn ar1_consistency_at_large_sample() {
        let data = simulate(10_000, 4, &[0.8], &[], &[], 0.0);
        let fit = fit_mle(&ModelSpec::new([1], [], [], false), &data, &FitOptions::default(), 1).unwrap();
        assert!((fit.params.ar[&1] - 0.8).abs() < 0.02);
    }

    #[test]
    fn arma_fit_recovers_parameters() {
        let data = simulate(5_000, 5, &[0.6], &[0.5], &[-2.0], 0.0);
        let spec = ModelSpec::new([1], [1], [ExoTerm::new(0, 0)], false);
        let fit = fit_mle(&spec, &data, &FitOptions::default(), 1).unwrap();
        assert!(fit.converged, "{fit:?}");
        assert!((fit.params.ar[&1] - 0.6).abs() < 0.05);
        assert!((fit.params.ma[&1] - 0.5).abs() < 0.05);
        assert!((fit.params.exo[&ExoTerm::new(0, 0)] + 2.0).abs() < 0.05);
        assert!((fit.params.sigma - 1.0).abs() < 0.05);
        assert!(fit.gradient_norm < FitOptions::default().gradient_tolerance);
    }

    #[test]
    fn fits_are_deterministic_across_restart_settings() {
        let data = simulate(800, 6, &[0.5, 0.2], &[0.4], &[1.0, 0.5], 0.0);
        let full = ModelSpec::new([1, 2, 3], [1, 2], [ExoTerm::new(0, 0), ExoTerm::new(1, 0)], false);
        let a = fit_mle(&full, &data, &FitOptions { restart_seed: 1, ..Default::default() }, 3).unwrap();
        let b = fit_mle(&full, &data, &FitOptions { restart_seed: 99, n_restarts: 3, ..Default::default() }, 3).unwrap();
        assert!((a.loglik - b.loglik).abs() < 1e-6, "{} vs {}", a.loglik, b.loglik);
        let again = fit_mle(&full, &data, &FitOptions { restart_seed: 1, ..Default::default() }, 3).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn ma_free_fit_matches_normal_equations() {
        let data = simulate(500, 7, &[0.5], &[], &[1.0, -0.5], 2.0);
        let spec = ModelSpec::new([1, 2], [], [ExoTerm::new(0, 0), ExoTerm::new(1, 1)], true);
        let c = 2;
        let fit = fit_mle(&spec, &data, &FitOptions::default(), c).unwrap();
        // independent normal equations
        let y = data.y();
        let rows: Vec<Vec<f64>> = (c..y.len())
            .map(|t| vec![1.0, y[t - 1], y[t - 2], data.column(0)[t], data.column(1)[t - 1]])
            .collect();
        let x = DMatrix::from_fn(rows.len(), 5, |i, j| rows[i][j]);
        let yv = DVector::from_fn(rows.len(), |i, _| y[c + i]);
        let beta = (x.transpose() * &x).lu().solve(&(x.transpose() * yv)).unwrap();
        let got = [
            fit.params.intercept.unwrap(),
            fit.params.ar[&1],
            fit.params.ar[&2],
            fit.params.exo[&ExoTerm::new(0, 0)],
            fit.params.exo[&ExoTerm::new(1, 1)],
        ];
        for (g, b) in got.iter().zip(beta.iter()) {
            assert!((g - b).abs() < 1e-8, "{g} vs {b}");
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let data = simulate(300, 8, &[0.5], &[0.3], &[1.0], 0.5);
        let full = ModelSpec::new([1, 2], [1, 2], [ExoTerm::new(0, 0)], true);
        let ctx = FitContext::new(&data, &full, 2, FitOptions::default()).unwrap();
        let problem = ctx.problem(&full).unwrap();
        let n = problem.y.len();
        let mut rng = RngStream::new(42, 0);
        let sigma = 1.1;
        for _ in 0..20 {
            let d = 6;
            let phi = DVector::from_fn(d, |i, _| if i >= 4 { 0.6 * rng.uniform() - 0.3 } else { rng.uniform() - 0.5 });
            let mut e = vec![0.0; n];
            let mut jac = vec![0.0; n * d];
            problem.jacobian(&phi, &mut e, &mut jac);
            let (_, g) = normal_system(&jac, &e, n, d);
            // d loglik / d phi at fixed sigma = -(1/sigma^2) J'e
            let analytic: Vec<f64> = g.iter().map(|v| -v / (sigma * sigma)).collect();
            let ll = |p: &DVector<f64>| {
                let params = {
                    let mut q = problem.unpack(p, &full);
                    q.sigma = sigma;
                    q
                };
                log_likelihood(&full, &params, &data, 2).unwrap()
            };
            for i in 0..d {
                let h = 1e-5;
                let mut up = phi.clone();
                up[i] += h;
                let mut dn = phi.clone();
                dn[i] -= h;
                let fd = (ll(&up) - ll(&dn)) / (2.0 * h);
                let rel = (fd - analytic[i]).abs() / analytic[i].abs().max(1.0);
                assert!(rel < 1e-5, "coord {i}: fd {fd} analytic {}", analytic[i]);
            }
        }
    }

    #[test]
    fn public_gradient_matches_finite_differences() {
        let data = simulate(400, 12, &[0.6], &[0.4], &[0.8], 0.3);
        let spec = ModelSpec::new([1], [1], [ExoTerm::new(0, 0)], true);
        let mut p = ParamVector::zeros(&spec, 0.9);
        p.intercept = Some(0.2);
        p.ar.insert(1, 0.5);
        p.ma.insert(1, 0.3);
        p.exo.insert(ExoTerm::new(0, 0), 0.7);
        let g = log_likelihood_gradient(&spec, &p, &data, 1).unwrap();
        assert_eq!(g.len(), 4);
        let h = 1e-6;
        let bump = |term: Term, by: f64| {
            let mut q = p.clone();
            match term {
                Term::Intercept => *q.intercept.as_mut().unwrap() += by,
                Term::Ar(j) => *q.ar.get_mut(&j).unwrap() += by,
                Term::Ma(k) => *q.ma.get_mut(&k).unwrap() += by,
                Term::Exo(e) => *q.exo.get_mut(&e).unwrap() += by,
            }
            log_likelihood(&spec, &q, &data, 1).unwrap()
        };
        for (&term, &analytic) in &g {
            let fd = (bump(term, h) - bump(term, -h)) / (2.0 * h);
            assert!((fd - analytic).abs() / analytic.abs().max(1.0) < 1e-5, "{term}: {fd} vs {analytic}");
        }
    }

    #[test]
    fn profiled_sigma_is_optimal() {
        let data = simulate(600, 9, &[0.7], &[0.4], &[], 0.0);
        let spec = ModelSpec::new([1], [1], [], false);
        let fit = fit_mle(&spec, &data, &FitOptions::default(), 1).unwrap();
        let at = log_likelihood(&spec, &fit.params, &data, 1).unwrap();
        assert!((at - fit.loglik).abs() < 1e-8);
        for f in [0.99, 1.01] {
            let mut p = fit.params.clone();
            p.sigma *= f;
            assert!(log_likelihood(&spec, &p, &data, 1).unwrap() < at);
        }
    }

    #[test]
    fn nested_fits_never_beat_the_full_model() {
        let data = simulate(400, 10, &[0.6], &[0.3], &[1.5, 0.0], 0.0);
        let full = ModelSpec::new([1, 2], [1, 2], [ExoTerm::new(0, 0), ExoTerm::new(1, 0)], false);
        let ctx = FitContext::new(&data, &full, 2, FitOptions::default()).unwrap();
        let full_fit = ctx.fit(&full).unwrap();
        let mut count = 0;
        for mask in 0u32..64 {
            let spec = ModelSpec::new(
                (1..=2).filter(|j| mask & (1 << (j - 1)) != 0),
                (1..=2).filter(|k| mask & (1 << (k + 1)) != 0),
                (0..2).filter(|i| mask & (1 << (i + 4)) != 0).map(|i| ExoTerm::new(i, 0)),
                false,
            );
            let fit = ctx.fit(&spec).unwrap();
            if fit.converged {
                assert!(full_fit.loglik >= fit.loglik - 1e-6, "{spec}: {} > {}", fit.loglik, full_fit.loglik);
                count += 1;
            }
        }
        assert!(count >= 60);
    }

    #[test]
    fn enforced_polynomials_have_roots_outside_unit_circle() {
        // Near-unit-root data pushes unconstrained estimates toward the boundary.
        let data = simulate(300, 11, &[0.97], &[-0.9], &[], 0.0);
        let opts = FitOptions { enforce_stationarity: true, enforce_invertibility: true, ..Default::default() };
        for spec in [
            ModelSpec::new([1, 2], [1], [], false),
            ModelSpec::new([1], [1, 2], [], false),
            ModelSpec::new([1, 3], [2], [], false),
            ModelSpec::new([1, 2, 3], [], [], false),
        ] {
            let fit = fit_mle(&spec, &data, &opts, 3).unwrap();
            let p = spec.max_observed_lag().max(1);
            let ar: Vec<f64> = (1..=p).map(|j| fit.params.ar.get(&j).copied().unwrap_or(0.0)).collect();
            let q = spec.ma_lags.iter().max().copied().unwrap_or(0);
            let ma: Vec<f64> = (1..=q).map(|k| -fit.params.ma.get(&k).copied().unwrap_or(0.0)).collect();
            assert!(roots_outside_unit_circle(&ar), "{spec}: {ar:?}");
            assert!(roots_outside_unit_circle(&ma), "{spec}: {ma:?}");
        }
    }

    #[test]
    fn stationarity_check_examples() {
        let m = |v: &[(usize, f64)]| v.iter().copied().collect::<BTreeMap<_, _>>();
        assert!(ar_is_stationary(&m(&[(1, 0.8)])));
        assert!(!ar_is_stationary(&m(&[(1, 1.0)])));
        assert!(ar_is_stationary(&m(&[(1, 0.6), (2, -0.2)])));
        assert!(!ar_is_stationary(&m(&[(1, 0.6), (2, 0.5)])));
        assert!(ar_is_stationary(&m(&[(2, 0.9)])));
        assert!(ma_is_invertible(&m(&[(1, -0.95)])));
        assert!(!ma_is_invertible(&m(&[(1, 1.2)])));
        assert!(ar_is_stationary(&BTreeMap::new()));
    }

    #[test]
    fn insufficient_sample_is_a_precondition_error() {
        let data = simulate(5, 12, &[0.5], &[], &[], 0.0);
        let spec = ModelSpec::new([1, 2, 3], [], [], true);
        assert!(matches!(
            fit_mle(&spec, &data, &FitOptions::default(), 3),
            Err(Error::InsufficientSample { .. })
        ));
    }

    #[test]
    fn degenerate_fit_is_not_converged() {
        // y is an exact linear function of its own lag: zero innovation variance.
        let y: Vec<f64> = (0..100).map(|t| 0.5f64.powi(t % 7) + t as f64).collect();
        let x: Vec<f64> = y.clone();
        let data = TimeSeriesDataset::from_columns(y, vec![x]).unwrap();
        let spec = ModelSpec::new([], [], [ExoTerm::new(0, 0)], false);
        let fit = fit_mle(&spec, &data, &FitOptions::default(), 0).unwrap();
        assert!(!fit.converged);
    }

    #[test]
    fn forecast_examples() {
        let data = TimeSeriesDataset::univariate(vec![1.0, 3.0, 2.0]).unwrap();
        let wn = ModelSpec::new([], [], [], true);
        let mut p = ParamVector::zeros(&wn, 1.0);
        p.intercept = Some(4.2);
        let model = FittedModel {
            spec: wn,
            params: p,
            loglik: 0.0,
            converged: true,
            iterations: 0,
            conditioning_length: 0,
            n_effective: 3,
            gradient_norm: 0.0,
        };
        assert_eq!(one_step_forecast(&model, &data, &[]).unwrap(), 4.2);

        let ar = ModelSpec::new([1], [], [], false);
        let mut p = ParamVector::zeros(&ar, 1.0);
        p.ar.insert(1, 0.5);
        let model = FittedModel { spec: ar, params: p, ..model };
        assert_eq!(one_step_forecast(&model, &data, &[]).unwrap(), 1.0);
        let short = TimeSeriesDataset::univariate(vec![]).unwrap();
        assert!(one_step_forecast(&model, &short, &[]).is_err());
    }

    #[test]
    fn ma1_forecast_matches_brute_force_recursion() {
        let data = simulate(200, 13, &[], &[0.6], &[0.8], 1.0);
        let spec = ModelSpec::new([], [1], [ExoTerm::new(0, 0)], true);
        let fit = fit_mle(&spec, &data, &FitOptions::default(), 0).unwrap();
        let (a, th, eta) = (fit.params.intercept.unwrap(), fit.params.ma[&1], fit.params.exo[&ExoTerm::new(0, 0)]);
        let mut e = 0.0;
        for t in 0..data.len() {
            e = data.y()[t] - a - eta * data.column(0)[t] - th * e;
        }
        let next_x = 0.3;
        let expected = a + th * e + eta * next_x;
        let got = one_step_forecast(&fit, &data, &[next_x]).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }
}
