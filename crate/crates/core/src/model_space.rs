//! Candidate model spaces: unrestricted subsets of lags, or contiguous AR/MA
//! orders without gaps, crossed with every subset of exogenous terms.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{ExoTerm, ModelSpec};

pub const DEFAULT_CANDIDATE_CAP: u128 = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnumerationMode {
    /// Every subset of AR lags, MA lags and exogenous terms (gaps allowed).
    Subset,
    /// AR lags `{1..p}` and MA lags `{1..q}` for each configured `(p, q)`.
    Contiguous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelUniverse {
    pub mode: EnumerationMode,
    pub p_max: usize,
    pub q_max: usize,
    /// Largest exogenous lag.
    pub r_max: usize,
    /// Smallest exogenous lag: 0 admits contemporaneous predictors.
    #[serde(default)]
    pub exo_lag_min: usize,
    /// Number of predictor columns.
    pub s: usize,
    /// Whether every candidate carries an intercept. Never selected over.
    pub intercept: bool,
    /// `(p, q)` pairs for contiguous mode; `None` means every pair up to `(p_max, q_max)`.
    #[serde(default)]
    pub order_whitelist: Option<Vec<(usize, usize)>>,
    #[serde(default = "default_cap")]
    pub max_candidates: u128,
}

fn default_cap() -> u128 {
    DEFAULT_CANDIDATE_CAP
}

impl ModelUniverse {
    /// Subset-mode universe with contemporaneous predictors only and no intercept.
    pub fn subset(p_max: usize, q_max: usize, s: usize) -> Self {
        Self {
            mode: EnumerationMode::Subset,
            p_max,
            q_max,
            r_max: 0,
            exo_lag_min: 0,
            s,
            intercept: false,
            order_whitelist: None,
            max_candidates: DEFAULT_CANDIDATE_CAP,
        }
    }

    /// Contiguous-order universe with contemporaneous predictors and an intercept everywhere.
    pub fn contiguous(order_pairs: Vec<(usize, usize)>, s: usize) -> Self {
        let p_max = order_pairs.iter().map(|o| o.0).max().unwrap_or(0);
        let q_max = order_pairs.iter().map(|o| o.1).max().unwrap_or(0);
        Self {
            mode: EnumerationMode::Contiguous,
            p_max,
            q_max,
            r_max: 0,
            exo_lag_min: 0,
            s,
            intercept: true,
            order_whitelist: Some(order_pairs),
            max_candidates: DEFAULT_CANDIDATE_CAP,
        }
    }

    /// All submodels of ARMAX(3, 2) with six contemporaneous predictors, no intercept.
    pub fn monte_carlo() -> Self {
        Self::subset(3, 2, 6)
    }

    /// The 14 order pairs `p in 1..=7, q in 1..=2`. A reconstruction: it reproduces the
    /// 28672-model count with 11 predictors, but the original pairs are not published.
    pub fn reproduction_orders() -> Vec<(usize, usize)> {
        (1..=7).flat_map(|p| (1..=2).map(move |q| (p, q))).collect()
    }

    pub fn with_intercept(mut self, intercept: bool) -> Self {
        self.intercept = intercept;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.exo_lag_min > self.r_max && self.s > 0 {
            return Err(Error::InvalidArgument(format!(
                "exogenous lag range {}..={} is empty",
                self.exo_lag_min, self.r_max
            )));
        }
        if self.mode == EnumerationMode::Contiguous {
            if let Some(pairs) = &self.order_whitelist {
                if pairs.is_empty() {
                    return Err(Error::InvalidArgument("order whitelist is empty".into()));
                }
                if let Some(bad) = pairs.iter().find(|(p, q)| *p > self.p_max || *q > self.q_max) {
                    return Err(Error::InvalidArgument(format!(
                        "order {bad:?} exceeds (p_max, q_max) = ({}, {})",
                        self.p_max, self.q_max
                    )));
                }
                if !pairs.contains(&(self.p_max, self.q_max)) {
                    return Err(Error::InvalidArgument(format!(
                        "order whitelist must contain the full model order ({}, {})",
                        self.p_max, self.q_max
                    )));
                }
            }
        } else if self.order_whitelist.is_some() {
            return Err(Error::InvalidArgument(
                "order whitelist applies to contiguous mode only".into(),
            ));
        }
        let count = self.count();
        if count > self.max_candidates {
            return Err(Error::UniverseTooLarge {
                count,
                cap: self.max_candidates,
            });
        }
        Ok(())
    }

    /// Exogenous terms in canonical order (predictor-major, then lag).
    pub fn exo_terms(&self) -> Vec<ExoTerm> {
        if self.exo_lag_min > self.r_max {
            return Vec::new();
        }
        (0..self.s)
            .flat_map(|i| (self.exo_lag_min..=self.r_max).map(move |l| ExoTerm::new(i, l)))
            .collect()
    }

    pub fn full_model(&self) -> ModelSpec {
        ModelSpec::new(1..=self.p_max, 1..=self.q_max, self.exo_terms(), self.intercept)
    }

    /// Conditioning length shared by every candidate: the full model's largest lag.
    pub fn conditioning_length(&self) -> usize {
        self.full_model().max_lag()
    }

    fn order_pairs(&self) -> Vec<(usize, usize)> {
        match &self.order_whitelist {
            Some(pairs) => {
                let set: BTreeSet<(usize, usize)> = pairs.iter().copied().collect();
                set.into_iter().collect()
            }
            None => (0..=self.p_max)
                .flat_map(|p| (0..=self.q_max).map(move |q| (p, q)))
                .collect(),
        }
    }

    /// Closed-form number of candidates.
    pub fn count(&self) -> u128 {
        let n_exo = self.exo_terms().len() as u32;
        let pow2 = |e: u32| if e >= 127 { u128::MAX } else { 1u128 << e };
        match self.mode {
            EnumerationMode::Subset => pow2(self.p_max as u32 + self.q_max as u32 + n_exo),
            EnumerationMode::Contiguous => {
                (self.order_pairs().len() as u128).saturating_mul(pow2(n_exo))
            }
        }
    }

    /// Lazily yields every candidate once, in ascending canonical order.
    pub fn enumerate(&self) -> Result<ModelStream> {
        self.validate()?;
        let arma: Vec<(BTreeSet<usize>, BTreeSet<usize>)> = match self.mode {
            EnumerationMode::Subset => {
                let ar = lex_subsets(&(1..=self.p_max).collect::<Vec<_>>());
                let ma = lex_subsets(&(1..=self.q_max).collect::<Vec<_>>());
                ar.iter()
                    .flat_map(|a| ma.iter().map(move |m| (a.clone(), m.clone())))
                    .collect()
            }
            EnumerationMode::Contiguous => {
                let mut parts: Vec<_> = self
                    .order_pairs()
                    .into_iter()
                    .map(|(p, q)| ((1..=p).collect(), (1..=q).collect()))
                    .collect();
                parts.sort();
                parts
            }
        };
        Ok(ModelStream {
            arma,
            exo_terms: self.exo_terms(),
            intercept: self.intercept,
            arma_pos: 0,
            exo_cursor: Vec::new(),
            done: false,
        })
    }
}

/// All subsets of a sorted slice, in lexicographic order.
fn lex_subsets(items: &[usize]) -> Vec<BTreeSet<usize>> {
    let mut out = Vec::with_capacity(1 << items.len());
    let mut cursor = Vec::new();
    loop {
        out.push(cursor.iter().map(|&i| items[i]).collect());
        if !next_lex_subset(&mut cursor, items.len()) {
            return out;
        }
    }
}

/// Advances `cursor` (sorted indices into `0..n`) to the next subset in lexicographic
/// order; returns false after the last subset.
fn next_lex_subset(cursor: &mut Vec<usize>, n: usize) -> bool {
    match cursor.last().copied() {
        None if n == 0 => false,
        None => {
            cursor.push(0);
            true
        }
        Some(last) if last + 1 < n => {
            cursor.push(last + 1);
            true
        }
        Some(_) => {
            cursor.pop();
            match cursor.last_mut() {
                Some(v) => {
                    *v += 1;
                    true
                }
                None => false,
            }
        }
    }
}

/// Stream of candidate specs; see [`ModelUniverse::enumerate`].
#[derive(Clone, Debug)]
pub struct ModelStream {
    arma: Vec<(BTreeSet<usize>, BTreeSet<usize>)>,
    exo_terms: Vec<ExoTerm>,
    intercept: bool,
    arma_pos: usize,
    exo_cursor: Vec<usize>,
    done: bool,
}

impl Iterator for ModelStream {
    type Item = ModelSpec;

    fn next(&mut self) -> Option<ModelSpec> {
        if self.done || self.arma_pos >= self.arma.len() {
            return None;
        }
        let (ar, ma) = &self.arma[self.arma_pos];
        let spec = ModelSpec {
            ar_lags: ar.clone(),
            ma_lags: ma.clone(),
            exo_terms: self.exo_cursor.iter().map(|&i| self.exo_terms[i]).collect(),
            intercept: self.intercept,
        };
        if !next_lex_subset(&mut self.exo_cursor, self.exo_terms.len()) {
            self.exo_cursor.clear();
            self.arma_pos += 1;
            if self.arma_pos >= self.arma.len() {
                self.done = true;
            }
        }
        Some(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::is_nested;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn monte_carlo_space_has_2048_models() {
        let u = ModelUniverse::monte_carlo();
        assert_eq!(u.count(), 2048);
        assert_eq!(u.enumerate().unwrap().count(), 2048);
    }

    #[test]
    fn reproduction_space_has_28672_models() {
        let u = ModelUniverse::contiguous(ModelUniverse::reproduction_orders(), 11);
        assert_eq!(u.count(), 28672);
        assert_eq!(u.enumerate().unwrap().count(), 28672);
        assert_eq!(u.full_model().dimension(), 1 + 7 + 2 + 11);
    }

    #[test]
    fn contiguous_count_is_pairs_times_exo_subsets() {
        let pairs: Vec<_> = (1..=8).flat_map(|p| (0..=2).map(move |q| (p, q))).collect();
        assert_eq!(pairs.len(), 24);
        let u = ModelUniverse::contiguous(pairs, 11);
        assert_eq!(u.count(), 49152);
    }

    #[test]
    fn trivial_universe_has_one_model() {
        let u = ModelUniverse::subset(0, 0, 0).with_intercept(true);
        let all: Vec<_> = u.enumerate().unwrap().collect();
        assert_eq!(all, vec![ModelSpec::new([], [], [], true)]);
    }

    #[test]
    fn lexicographic_subsets() {
        let subsets = lex_subsets(&[1, 2, 3]);
        let expected: Vec<BTreeSet<usize>> = [
            vec![], vec![1], vec![1, 2], vec![1, 2, 3], vec![1, 3], vec![2], vec![2, 3], vec![3],
        ]
        .into_iter()
        .map(|v| v.into_iter().collect())
        .collect();
        assert_eq!(subsets, expected);
    }

    #[test]
    fn oversized_universe_is_refused() {
        let u = ModelUniverse::subset(10, 5, 10);
        match u.enumerate() {
            Err(Error::UniverseTooLarge { count, cap }) => {
                assert_eq!(count, 1 << 25);
                assert_eq!(cap, DEFAULT_CANDIDATE_CAP);
            }
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn whitelist_must_contain_full_order() {
        let mut u = ModelUniverse::contiguous(vec![(1, 1), (2, 1)], 2);
        u.q_max = 2;
        assert!(u.validate().is_err());
        let mut u = ModelUniverse::subset(1, 1, 1);
        u.order_whitelist = Some(vec![(1, 1)]);
        assert!(u.validate().is_err());
    }

    #[test]
    fn lagged_exogenous_terms() {
        let mut u = ModelUniverse::subset(1, 0, 2);
        u.exo_lag_min = 1;
        u.r_max = 2;
        assert_eq!(u.exo_terms().len(), 4);
        assert_eq!(u.count(), 32);
        assert_eq!(u.conditioning_length(), 2);
    }

    fn arb_universe() -> impl Strategy<Value = ModelUniverse> {
        (0usize..4, 0usize..3, 0usize..2, 0usize..4, any::<bool>(), any::<bool>(), 0usize..2).prop_map(
            |(p, q, r, s, contiguous, intercept, lag_min)| {
                let mut u = if contiguous {
                    let pairs: Vec<_> = (0..=p).flat_map(|a| (0..=q).map(move |b| (a, b))).filter(|&(a, b)| (a + b) % 2 == 0 || (a, b) == (p, q)).collect();
                    ModelUniverse::contiguous(pairs, s)
                } else {
                    ModelUniverse::subset(p, q, s)
                };
                u.p_max = p;
                u.q_max = q;
                u.r_max = r.max(lag_min);
                u.exo_lag_min = lag_min;
                u.intercept = intercept;
                u
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn count_matches_enumeration(u in arb_universe()) {
            let specs: Vec<ModelSpec> = u.enumerate().unwrap().collect();
            prop_assert_eq!(specs.len() as u128, u.count());
            let distinct: HashSet<_> = specs.iter().cloned().collect();
            prop_assert_eq!(distinct.len(), specs.len());
            let full = u.full_model();
            prop_assert!(specs.iter().all(|m| is_nested(m, &full)));
            prop_assert!(specs.contains(&full));
            // canonical order is the derived order of ModelSpec
            prop_assert!(specs.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn enumeration_is_stable(u in arb_universe()) {
            let a: Vec<String> = u.enumerate().unwrap().map(|m| m.to_string()).collect();
            let b: Vec<String> = u.enumerate().unwrap().map(|m| m.to_string()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
