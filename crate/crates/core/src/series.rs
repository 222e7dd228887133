//! Dataset and model-structure types shared by every pipeline, plus the
//! model-space algebra (nesting, Hamming distance, union).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Response series with aligned exogenous columns.
///
/// Predictors are stored column-major: `columns[i][t]` is predictor `i` at time `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    y: Vec<f64>,
    columns: Vec<Vec<f64>>,
    predictor_names: Vec<String>,
    time_index: Vec<i64>,
}

impl TimeSeriesDataset {
    pub fn new(
        y: Vec<f64>,
        columns: Vec<Vec<f64>>,
        predictor_names: Vec<String>,
        time_index: Vec<i64>,
    ) -> Result<Self> {
        let t = y.len();
        if time_index.len() != t {
            return Err(Error::InvalidDataset(format!(
                "time index has {} entries for {} observations",
                time_index.len(),
                t
            )));
        }
        if predictor_names.len() != columns.len() {
            return Err(Error::InvalidDataset(format!(
                "{} predictor names for {} columns",
                predictor_names.len(),
                columns.len()
            )));
        }
        for (name, col) in predictor_names.iter().zip(&columns) {
            if col.len() != t {
                return Err(Error::InvalidDataset(format!(
                    "predictor `{name}` has {} rows, response has {t}",
                    col.len()
                )));
            }
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset(format!(
                    "predictor `{name}` has a missing or non-finite value at row {row}"
                )));
            }
        }
        if let Some(row) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!(
                "response has a missing or non-finite value at row {row}"
            )));
        }
        if let Some(row) = time_index.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidDataset(format!(
                "time index not strictly increasing at row {}",
                row + 1
            )));
        }
        Ok(Self {
            y,
            columns,
            predictor_names,
            time_index,
        })
    }

    /// Dataset without predictors, indexed `0..T`.
    pub fn univariate(y: Vec<f64>) -> Result<Self> {
        let index = (0..y.len() as i64).collect();
        Self::new(y, Vec::new(), Vec::new(), index)
    }

    /// Dataset with unnamed predictors (`x0`, `x1`, ...) indexed `0..T`.
    pub fn from_columns(y: Vec<f64>, columns: Vec<Vec<f64>>) -> Result<Self> {
        let names = (0..columns.len()).map(|i| format!("x{i}")).collect();
        let index = (0..y.len() as i64).collect();
        Self::new(y, columns, names, index)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_predictors(&self) -> usize {
        self.columns.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn column(&self, predictor: usize) -> &[f64] {
        &self.columns[predictor]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn predictor_names(&self) -> &[String] {
        &self.predictor_names
    }

    pub fn time_index(&self) -> &[i64] {
        &self.time_index
    }

    /// Rows `range.start..range.end` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            y: self.y[range.clone()].to_vec(),
            columns: self.columns.iter().map(|c| c[range.clone()].to_vec()).collect(),
            predictor_names: self.predictor_names.clone(),
            time_index: self.time_index[range].to_vec(),
        }
    }
}

/// An exogenous term: predictor column `predictor` entering at lag `lag` (0 = contemporaneous).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExoTerm {
    pub predictor: usize,
    pub lag: usize,
}

impl ExoTerm {
    pub fn new(predictor: usize, lag: usize) -> Self {
        Self { predictor, lag }
    }
}

/// A single coefficient slot of an ARMAX model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Term {
    Intercept,
    Ar(usize),
    Ma(usize),
    Exo(ExoTerm),
}

impl Term {
    /// Human-readable label, using predictor names when available.
    pub fn label(&self, names: &[String]) -> String {
        match self {
            Term::Intercept => "intercept".to_string(),
            Term::Ar(j) => format!("y_t-{j}"),
            Term::Ma(k) => format!("eps_t-{k}"),
            Term::Exo(e) => {
                let base = names
                    .get(e.predictor)
                    .cloned()
                    .unwrap_or_else(|| format!("x{}", e.predictor));
                if e.lag == 0 {
                    base
                } else {
                    format!("{base}_t-{}", e.lag)
                }
            }
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label(&[]))
    }
}

/// Candidate model: active AR lags, MA lags, exogenous terms and the intercept flag.
///
/// Field order fixes the derived `Ord`, which is the canonical enumeration order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelSpec {
    pub ar_lags: BTreeSet<usize>,
    pub ma_lags: BTreeSet<usize>,
    pub exo_terms: BTreeSet<ExoTerm>,
    pub intercept: bool,
}

impl ModelSpec {
    pub fn new(
        ar_lags: impl IntoIterator<Item = usize>,
        ma_lags: impl IntoIterator<Item = usize>,
        exo_terms: impl IntoIterator<Item = ExoTerm>,
        intercept: bool,
    ) -> Self {
        Self {
            ar_lags: ar_lags.into_iter().collect(),
            ma_lags: ma_lags.into_iter().collect(),
            exo_terms: exo_terms.into_iter().collect(),
            intercept,
        }
    }

    /// Spec with no terms at all (white noise around zero).
    pub fn empty() -> Self {
        Self::default()
    }

    /// Number of coefficients; the innovation variance is not counted.
    pub fn dimension(&self) -> usize {
        usize::from(self.intercept) + self.ar_lags.len() + self.ma_lags.len() + self.exo_terms.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = Term> + '_ {
        self.intercept
            .then_some(Term::Intercept)
            .into_iter()
            .chain(self.ar_lags.iter().map(|&j| Term::Ar(j)))
            .chain(self.ma_lags.iter().map(|&k| Term::Ma(k)))
            .chain(self.exo_terms.iter().map(|&e| Term::Exo(e)))
    }

    pub fn contains(&self, term: Term) -> bool {
        match term {
            Term::Intercept => self.intercept,
            Term::Ar(j) => self.ar_lags.contains(&j),
            Term::Ma(k) => self.ma_lags.contains(&k),
            Term::Exo(e) => self.exo_terms.contains(&e),
        }
    }

    /// Largest lag among AR and exogenous terms (the lags that read past observations).
    pub fn max_observed_lag(&self) -> usize {
        let ar = self.ar_lags.iter().next_back().copied().unwrap_or(0);
        let exo = self.exo_terms.iter().map(|e| e.lag).max().unwrap_or(0);
        ar.max(exo)
    }

    /// Largest lag of any kind, MA included.
    pub fn max_lag(&self) -> usize {
        let ma = self.ma_lags.iter().next_back().copied().unwrap_or(0);
        self.max_observed_lag().max(ma)
    }

    pub fn max_predictor(&self) -> Option<usize> {
        self.exo_terms.iter().map(|e| e.predictor).max()
    }

    pub fn from_terms(terms: impl IntoIterator<Item = Term>) -> Self {
        let mut spec = Self::empty();
        for term in terms {
            match term {
                Term::Intercept => spec.intercept = true,
                Term::Ar(j) => {
                    spec.ar_lags.insert(j);
                }
                Term::Ma(k) => {
                    spec.ma_lags.insert(k);
                }
                Term::Exo(e) => {
                    spec.exo_terms.insert(e);
                }
            }
        }
        spec
    }

    /// Labelled form, e.g. `ar{1 2} ma{1} x{temperature solar}`.
    pub fn describe(&self, names: &[String]) -> String {
        let mut out = self.to_string();
        if !names.is_empty() {
            let exo: Vec<String> = self.exo_terms.iter().map(|&e| Term::Exo(e).label(names)).collect();
            let plain = format_set(self.exo_terms.iter().map(exo_token));
            out = out.replacen(&format!("x{{{plain}}}"), &format!("x{{{}}}", exo.join(" ")), 1);
        }
        out
    }
}

fn exo_token(e: &ExoTerm) -> String {
    if e.lag == 0 {
        e.predictor.to_string()
    } else {
        format!("{}@{}", e.predictor, e.lag)
    }
}

fn format_set<I: Iterator<Item = String>>(items: I) -> String {
    items.collect::<Vec<_>>().join(" ")
}

/// Canonical string: `ar{1 2} ma{1} x{0 2@1}` followed by ` +c` when the intercept is present.
/// Exogenous terms are `predictor` or `predictor@lag`.
impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ar{{{}}} ma{{{}}} x{{{}}}",
            format_set(self.ar_lags.iter().map(|j| j.to_string())),
            format_set(self.ma_lags.iter().map(|k| k.to_string())),
            format_set(self.exo_terms.iter().map(exo_token)),
        )?;
        if self.intercept {
            f.write_str(" +c")?;
        }
        Ok(())
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidSpec(format!("cannot parse model `{s}`"));
        let mut spec = ModelSpec::empty();
        let mut rest = s.trim();
        for key in ["ar", "ma", "x"] {
            rest = rest.trim_start().strip_prefix(key).ok_or_else(bad)?;
            rest = rest.strip_prefix('{').ok_or_else(bad)?;
            let close = rest.find('}').ok_or_else(bad)?;
            let body = &rest[..close];
            rest = &rest[close + 1..];
            for tok in body.split_whitespace() {
                match key {
                    "ar" => {
                        spec.ar_lags.insert(tok.parse().map_err(|_| bad())?);
                    }
                    "ma" => {
                        spec.ma_lags.insert(tok.parse().map_err(|_| bad())?);
                    }
                    _ => {
                        let (p, l) = tok.split_once('@').unwrap_or((tok, "0"));
                        spec.exo_terms.insert(ExoTerm::new(
                            p.parse().map_err(|_| bad())?,
                            l.parse().map_err(|_| bad())?,
                        ));
                    }
                }
            }
        }
        match rest.trim() {
            "" => {}
            "+c" => spec.intercept = true,
            _ => return Err(bad()),
        }
        Ok(spec)
    }
}

/// Coefficients of a fitted or simulated ARMAX model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub intercept: Option<f64>,
    pub ar: BTreeMap<usize, f64>,
    pub ma: BTreeMap<usize, f64>,
    pub exo: BTreeMap<ExoTerm, f64>,
    pub sigma: f64,
}

impl ParamVector {
    /// All coefficients zero for the given spec.
    pub fn zeros(spec: &ModelSpec, sigma: f64) -> Self {
        Self {
            intercept: spec.intercept.then_some(0.0),
            ar: spec.ar_lags.iter().map(|&j| (j, 0.0)).collect(),
            ma: spec.ma_lags.iter().map(|&k| (k, 0.0)).collect(),
            exo: spec.exo_terms.iter().map(|&e| (e, 0.0)).collect(),
            sigma,
        }
    }

    /// Checks that key sets match `spec` exactly and that sigma is positive.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let keys_match = self.intercept.is_some() == spec.intercept
            && self.ar.keys().eq(spec.ar_lags.iter())
            && self.ma.keys().eq(spec.ma_lags.iter())
            && self.exo.keys().eq(spec.exo_terms.iter());
        if !keys_match {
            return Err(Error::InvalidSpec(format!(
                "parameter keys do not match model {spec}"
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn coefficient(&self, term: Term) -> Option<f64> {
        match term {
            Term::Intercept => self.intercept,
            Term::Ar(j) => self.ar.get(&j).copied(),
            Term::Ma(k) => self.ma.get(&k).copied(),
            Term::Exo(e) => self.exo.get(&e).copied(),
        }
    }

    /// Copies these coefficients into a larger spec, leaving the extra slots at zero.
    pub fn embed(&self, outer: &ModelSpec) -> Self {
        let mut out = Self::zeros(outer, self.sigma);
        if let (Some(dst), Some(src)) = (out.intercept.as_mut(), self.intercept) {
            *dst = src;
        }
        for (j, v) in &self.ar {
            if let Some(dst) = out.ar.get_mut(j) {
                *dst = *v;
            }
        }
        for (k, v) in &self.ma {
            if let Some(dst) = out.ma.get_mut(k) {
                *dst = *v;
            }
        }
        for (e, v) in &self.exo {
            if let Some(dst) = out.exo.get_mut(e) {
                *dst = *v;
            }
        }
        out
    }
}

/// True iff every term of `inner` is a term of `outer`.
pub fn is_nested(inner: &ModelSpec, outer: &ModelSpec) -> bool {
    (!inner.intercept || outer.intercept)
        && inner.ar_lags.is_subset(&outer.ar_lags)
        && inner.ma_lags.is_subset(&outer.ma_lags)
        && inner.exo_terms.is_subset(&outer.exo_terms)
}

/// Number of terms present in exactly one of the two models.
pub fn hamming_distance(m1: &ModelSpec, m2: &ModelSpec) -> usize {
    usize::from(m1.intercept != m2.intercept)
        + m1.ar_lags.symmetric_difference(&m2.ar_lags).count()
        + m1.ma_lags.symmetric_difference(&m2.ma_lags).count()
        + m1.exo_terms.symmetric_difference(&m2.exo_terms).count()
}

/// Term-wise union of a nonempty collection of specs.
pub fn union_spec<'a, I>(models: I) -> Result<ModelSpec>
where
    I: IntoIterator<Item = &'a ModelSpec>,
{
    let mut iter = models.into_iter();
    let mut out = iter.next().ok_or(Error::EmptyUnion)?.clone();
    for m in iter {
        out.ar_lags.extend(m.ar_lags.iter().copied());
        out.ma_lags.extend(m.ma_lags.iter().copied());
        out.exo_terms.extend(m.exo_terms.iter().copied());
        out.intercept |= m.intercept;
    }
    Ok(out)
}
