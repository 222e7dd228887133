//! The five pipelines and the tables they emit.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use mscs_core::engine::{
    inclusion_importance, lower_boundary, normalize_importance, screen_universe, set_importance, ConfidenceSet,
    LowerBoundary, Screening, SetMember,
};
use mscs_core::forecast::{forecast_universe, ForecastReport, RollingConfig, UniverseForecasts};
use mscs_core::model_space::ModelUniverse;
use mscs_core::montecarlo::{run_cell, CellConfig, DgpConfig, McCellResult};
use mscs_core::series::{ModelSpec, Term};
use mscs_core::stats::RNG_ALGORITHM;

use crate::config::RunConfig;
use crate::ingest::{ingest_csv, Series};
use crate::output::{
    config_hash, flag, num, opt_num, sha256_hex, OutputDir, RunMetadata, Table, AIC_DEFINITION, BIC_DEFINITION,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Set,
    Boundary,
    Mc,
    Forecast,
    Audit,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Set => "set",
            Command::Boundary => "boundary",
            Command::Mc => "mc",
            Command::Forecast => "forecast",
            Command::Audit => "audit",
        }
    }
}

/// Runs `cmd` on its own worker pool and writes results plus `run_metadata.json`.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<RunMetadata> {
    cfg.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().context("starting worker pool")?;
    pool.install(|| {
        let mut out = OutputDir::new(&cfg.out_dir);
        let mut failures = BTreeMap::new();
        let input_sha256 = match cmd {
            Command::Mc => {
                run_mc(cfg, &mut out, &mut failures)?;
                None
            }
            _ => {
                let data = cfg.data.as_ref().context("this command needs a [data] section")?;
                let bytes = std::fs::read(&data.path).with_context(|| format!("reading {}", data.path.display()))?;
                let series = ingest_csv(data)?;
                run_data(cmd, cfg, &series, &mut out, &mut failures)?;
                Some(sha256_hex(&bytes))
            }
        };
        let mut outputs = out.written().to_vec();
        outputs.push("run_metadata.json".into());
        let meta = RunMetadata {
            command: cmd.name().into(),
            config: cfg.clone(),
            config_sha256: config_hash(cfg)?,
            input_sha256,
            seed: cfg.seed,
            threads: rayon::current_num_threads(),
            version: env!("CARGO_PKG_VERSION").into(),
            rng_algorithm: RNG_ALGORITHM.into(),
            aic_definition: AIC_DEFINITION.into(),
            bic_definition: BIC_DEFINITION.into(),
            failures,
            outputs,
        };
        out.json("run_metadata.json", &meta)?;
        Ok(meta)
    })
}

fn alpha_tag(alpha: f64) -> String {
    format!("a{alpha}")
}

fn in_dir(dir: &str, file: &str) -> String {
    if dir.is_empty() {
        file.to_string()
    } else {
        format!("{dir}/{file}")
    }
}

fn bump(failures: &mut BTreeMap<String, usize>, key: &str, n: usize) {
    *failures.entry(key.to_string()).or_default() += n;
}

/// Everything a data command needs for one series, checked before fitting starts.
struct Prepared<'a> {
    series: &'a Series,
    estimation: mscs_core::series::TimeSeriesDataset,
    rolling: Option<RollingConfig>,
}

fn run_data(
    cmd: Command,
    cfg: &RunConfig,
    all: &[Series],
    out: &mut OutputDir,
    failures: &mut BTreeMap<String, usize>,
) -> Result<()> {
    let uc = cfg.universe.as_ref().context("this command needs a [universe] section")?;
    let names = &cfg.data.as_ref().expect("checked by caller").predictors;
    let universe = uc.build(names.len());
    universe.validate()?;
    let needs_rolling = cmd == Command::Forecast;
    if needs_rolling && cfg.rolling.is_none() {
        bail!("`forecast` needs a [rolling] section");
    }

    let mut prepared = Vec::new();
    for s in all {
        let rolling = if matches!(cmd, Command::Forecast | Command::Audit) {
            cfg.rolling_config(s.data.len(), &s.dates)?
        } else {
            None
        };
        let est_len = match (&rolling, cfg.data.as_ref().and_then(|d| d.estimation_end.as_ref())) {
            (Some(r), None) => s.estimation_len.min(r.evaluation_start),
            _ => s.estimation_len,
        };
        if let Some(r) = &rolling {
            ensure!(
                est_len <= r.evaluation_start,
                "{}: the estimation sample overlaps the evaluation period (ends at row {est_len}, evaluation starts at row {})",
                describe_series(s),
                r.evaluation_start
            );
        }
        let estimation = s.data.slice(0..est_len);
        ensure!(
            estimation.len() > universe.conditioning_length() + universe.full_model().dimension(),
            "{}: {} estimation observations cannot identify the full model",
            describe_series(s),
            estimation.len()
        );
        prepared.push(Prepared { series: s, estimation, rolling });
    }

    let opts = cfg.fit_options();
    for p in &prepared {
        let dir = p.series.tag();
        log::info!("{}: screening {} candidates", describe_series(p.series), universe.count());
        let screening = screen_universe(&p.estimation, &universe, &opts)?;
        let t_eff = p.estimation.len() - universe.conditioning_length();
        let sets: Vec<ConfidenceSet> = cfg
            .alphas
            .iter()
            .map(|&a| screening.confidence_set(a))
            .collect::<mscs_core::Result<_>>()?;
        bump(failures, "candidate_fits_excluded", sets[0].failures.len());
        if screening.full_repaired {
            bump(failures, "full_model_refits", 1);
        }
        let boundaries: Vec<LowerBoundary> = sets.iter().map(lower_boundary).collect::<mscs_core::Result<_>>()?;

        match cmd {
            Command::Set => {
                write_set(out, &dir, &screening, &sets, names, t_eff)?;
            }
            Command::Boundary => {
                write_set(out, &dir, &screening, &sets, names, t_eff)?;
                for (cs, b) in sets.iter().zip(&boundaries) {
                    write_boundary(out, &dir, cs, b, &universe, names)?;
                }
            }
            Command::Forecast => {
                let r = p.rolling.as_ref().expect("checked above");
                let fc = forecast_universe(&p.series.data, &universe, r, &opts)?;
                bump(failures, "flagged_forecasts", fc.scores.iter().map(|m| m.n_flagged).sum());
                for (cs, b) in sets.iter().zip(&boundaries) {
                    let report = fc.report(cs, b)?;
                    let (models, groups) = forecast_tables(&report, names);
                    let tag = alpha_tag(cs.alpha);
                    out.table(&in_dir(&dir, &format!("forecast_models_{tag}.csv")), &models)?;
                    out.table(&in_dir(&dir, &format!("forecast_groups_{tag}.csv")), &groups)?;
                }
            }
            Command::Audit => {
                let fc = match &p.rolling {
                    Some(r) => Some(forecast_universe(&p.series.data, &universe, r, &opts)?),
                    None => None,
                };
                let scored = screening.scored()?;
                for (cs, b) in sets.iter().zip(&boundaries) {
                    let audit = audit(&scored, cs, b, fc.as_ref(), &universe, t_eff)?;
                    let tag = alpha_tag(cs.alpha);
                    out.table(&in_dir(&dir, &format!("audit_{tag}.csv")), &audit.table(names))?;
                    out.json(&in_dir(&dir, &format!("audit_{tag}.json")), &audit.summary(names))?;
                }
            }
            Command::Mc => unreachable!("handled without data"),
        }
    }
    Ok(())
}

fn describe_series(s: &Series) -> String {
    match s.hour {
        Some(h) => format!("hour {h:02}"),
        None => "series".into(),
    }
}

pub fn aic(loglik: f64, dimension: usize) -> f64 {
    -2.0 * loglik + 2.0 * dimension as f64
}

pub fn bic(loglik: f64, dimension: usize, t_eff: usize) -> f64 {
    -2.0 * loglik + dimension as f64 * (t_eff as f64).ln()
}

fn neg_log10(p: f64) -> f64 {
    -p.max(f64::MIN_POSITIVE).log10()
}

/// Every fitted candidate with its LR statistics and one membership column per level.
pub fn candidates_table(scored: &[SetMember], sets: &[ConfidenceSet], names: &[String], t_eff: usize) -> Table {
    let mut header: Vec<String> = [
        "spec", "label", "dimension", "loglik", "aic", "bic", "lambda", "df", "p_value", "neg_log10_p",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(sets.iter().map(|cs| format!("in_mscs_{}", alpha_tag(cs.alpha))));
    let member_sets: Vec<HashSet<&ModelSpec>> =
        sets.iter().map(|cs| cs.members.iter().map(|m| &m.spec).collect()).collect();
    let mut t = Table::new(&header);
    for m in scored {
        let mut row = vec![
            m.spec.to_string(),
            m.spec.describe(names),
            m.dimension.to_string(),
            num(m.loglik),
            num(aic(m.loglik, m.dimension)),
            num(bic(m.loglik, m.dimension, t_eff)),
            num(m.lambda),
            m.df.to_string(),
            num(m.p_value),
            num(neg_log10(m.p_value)),
        ];
        row.extend(member_sets.iter().map(|s| flag(s.contains(&m.spec))));
        t.push(row);
    }
    t
}

#[derive(Serialize)]
struct SetSummary<'a> {
    full_model: String,
    full_model_loglik: f64,
    full_model_refit: bool,
    effective_sample: usize,
    n_candidates: usize,
    n_failures: usize,
    levels: Vec<LevelSummary>,
    failures: Vec<(String, &'a str)>,
}

#[derive(Serialize)]
struct LevelSummary {
    alpha: f64,
    mscs_size: usize,
    n_rejected: usize,
}

fn write_set(
    out: &mut OutputDir,
    dir: &str,
    screening: &Screening,
    sets: &[ConfidenceSet],
    names: &[String],
    t_eff: usize,
) -> Result<()> {
    let scored = screening.scored()?;
    out.table(&in_dir(dir, "candidates.csv"), &candidates_table(&scored, sets, names, t_eff))?;
    let fails = &sets[0].failures;
    let summary = SetSummary {
        full_model: screening.full_model.spec.describe(names),
        full_model_loglik: screening.full_model.loglik,
        full_model_refit: screening.full_repaired,
        effective_sample: t_eff,
        n_candidates: screening.candidates.len(),
        n_failures: fails.len(),
        levels: sets
            .iter()
            .map(|cs| LevelSummary { alpha: cs.alpha, mscs_size: cs.len(), n_rejected: cs.rejected.len() })
            .collect(),
        failures: fails.iter().map(|f| (f.spec.to_string(), f.reason.as_str())).collect(),
    };
    out.json(&in_dir(dir, "set_summary.json"), &summary)?;
    Ok(())
}

/// Term-level importance: `ii` over the lower boundary, `ii_tilde` over the whole set,
/// `ii_tilde_s` its rescaled form.
pub fn importance_table(cs: &ConfidenceSet, b: &LowerBoundary, universe: &ModelUniverse, names: &[String]) -> Table {
    let ii = inclusion_importance(b, universe);
    let iit = set_importance(cs);
    let mut t = Table::new(&["term", "ii", "ii_tilde", "ii_tilde_s"]);
    for term in ordered_terms(universe) {
        let v = iit.get(&term).copied().unwrap_or(0.0);
        t.push(vec![
            term.label(names),
            num(ii.get(&term).copied().unwrap_or(0.0)),
            num(v),
            num(normalize_importance(v)),
        ]);
    }
    t
}

fn write_boundary(
    out: &mut OutputDir,
    dir: &str,
    cs: &ConfidenceSet,
    b: &LowerBoundary,
    universe: &ModelUniverse,
    names: &[String],
) -> Result<()> {
    let tag = alpha_tag(cs.alpha);
    let mut t = Table::new(&["spec", "label", "dimension"]);
    for m in &b.models {
        t.push(vec![m.to_string(), m.describe(names), m.dimension().to_string()]);
    }
    out.table(&in_dir(dir, &format!("boundary_{tag}.csv")), &t)?;
    out.table(&in_dir(dir, &format!("importance_{tag}.csv")), &importance_table(cs, b, universe, names))?;
    #[derive(Serialize)]
    struct BoundarySummary {
        alpha: f64,
        mscs_size: usize,
        n_lbm: usize,
        mean_lbm_dimension: f64,
        union_model: String,
        union_label: String,
    }
    let dims: Vec<f64> = b.models.iter().map(|m| m.dimension() as f64).collect();
    out.json(
        &in_dir(dir, &format!("boundary_{tag}.json")),
        &BoundarySummary {
            alpha: cs.alpha,
            mscs_size: cs.len(),
            n_lbm: b.models.len(),
            mean_lbm_dimension: mscs_core::stats::mean(&dims),
            union_model: b.union_model.to_string(),
            union_label: b.union_model.describe(names),
        },
    )?;
    Ok(())
}

/// Selectable terms in display order: predictors, then AR lags, then MA lags.
pub fn ordered_terms(universe: &ModelUniverse) -> Vec<Term> {
    let full = universe.full_model();
    let mut terms: Vec<Term> = full.exo_terms.iter().map(|&e| Term::Exo(e)).collect();
    terms.extend(full.ar_lags.iter().map(|&j| Term::Ar(j)));
    terms.extend(full.ma_lags.iter().map(|&k| Term::Ma(k)));
    terms
}

/// Figure-1 style rows (one per model) and Figure-3 style group quantiles.
pub fn forecast_tables(report: &ForecastReport, names: &[String]) -> (Table, Table) {
    let mut models = Table::new(&[
        "spec", "label", "dimension", "rmse", "mae", "log_rmse", "log_mae", "lr_p_value", "neg_log10_p", "in_mscs",
        "is_lbm", "n_flagged",
    ]);
    for r in &report.rows {
        models.push(vec![
            r.spec.to_string(),
            r.spec.describe(names),
            r.dimension.to_string(),
            num(r.rmse),
            num(r.mae),
            num(r.rmse.ln()),
            num(r.mae.ln()),
            opt_num(r.lr_p_value),
            opt_num(r.lr_p_value.map(neg_log10)),
            flag(r.in_mscs),
            flag(r.is_lbm),
            r.n_flagged.to_string(),
        ]);
    }
    let mut groups = Table::new(&["group", "n_models", "probability", "log_rmse", "log_mae"]);
    for g in &report.groups {
        let name = if g.in_mscs { "in_mscs" } else { "out_mscs" };
        for ((p, r), (_, m)) in g.log_rmse.iter().zip(&g.log_mae) {
            groups.push(vec![name.into(), g.n_models.to_string(), num(*p), num(*r), num(*m)]);
        }
    }
    (models, groups)
}

/// Single-model selections and the importance measures, side by side.
#[derive(Clone, Debug)]
pub struct Audit {
    pub alpha: f64,
    pub terms: Vec<Term>,
    pub ii: BTreeMap<Term, f64>,
    pub ii_tilde_s: BTreeMap<Term, f64>,
    pub aic_best: ModelSpec,
    pub bic_best: ModelSpec,
    pub rmse_best: Option<ModelSpec>,
    pub aic_in_mscs: bool,
    pub bic_in_mscs: bool,
    pub rmse_in_mscs: Option<bool>,
    pub mscs_size: usize,
    pub lbm: Vec<ModelSpec>,
}

fn argmin<'a>(items: impl Iterator<Item = (&'a ModelSpec, f64)>) -> Option<&'a ModelSpec> {
    items
        .fold(None, |best: Option<(&ModelSpec, f64)>, (s, v)| match best {
            Some((_, bv)) if bv <= v => best,
            _ => Some((s, v)),
        })
        .map(|b| b.0)
}

pub fn audit(
    scored: &[SetMember],
    cs: &ConfidenceSet,
    b: &LowerBoundary,
    forecasts: Option<&UniverseForecasts>,
    universe: &ModelUniverse,
    t_eff: usize,
) -> Result<Audit> {
    let aic_best = argmin(scored.iter().map(|m| (&m.spec, aic(m.loglik, m.dimension)))).context("no fitted candidates")?;
    let bic_best = argmin(scored.iter().map(|m| (&m.spec, bic(m.loglik, m.dimension, t_eff)))).context("no fitted candidates")?;
    let rmse_best = forecasts.and_then(|f| f.rmse_best()).map(|m| m.spec.clone());
    let iit = set_importance(cs);
    Ok(Audit {
        alpha: cs.alpha,
        terms: ordered_terms(universe),
        ii: inclusion_importance(b, universe),
        ii_tilde_s: iit.into_iter().map(|(t, v)| (t, normalize_importance(v))).collect(),
        aic_in_mscs: cs.contains(aic_best),
        bic_in_mscs: cs.contains(bic_best),
        rmse_in_mscs: rmse_best.as_ref().map(|s| cs.contains(s)),
        aic_best: aic_best.clone(),
        bic_best: bic_best.clone(),
        rmse_best,
        mscs_size: cs.len(),
        lbm: b.models.clone(),
    })
}

#[derive(Serialize)]
pub struct AuditSummary {
    pub alpha: f64,
    pub mscs_size: usize,
    pub n_lbm: usize,
    pub aic_best: String,
    pub bic_best: String,
    pub rmse_best: Option<String>,
    pub aic_in_mscs: bool,
    pub bic_in_mscs: bool,
    pub rmse_in_mscs: Option<bool>,
    pub lbm: Vec<String>,
}

impl Audit {
    pub const HEADER: [&'static str; 6] = ["term", "ii_tilde_s", "ii", "aic", "bic", "rmse"];
    pub const MEMBERSHIP_ROW: &'static str = "Included in MSCS";

    /// One row per selectable term, then the membership row of the three single picks.
    pub fn table(&self, names: &[String]) -> Table {
        let mut t = Table::new(&Self::HEADER);
        let bit = |s: &ModelSpec, term: Term| flag(s.contains(term));
        for &term in &self.terms {
            t.push(vec![
                term.label(names),
                num(self.ii_tilde_s.get(&term).copied().unwrap_or(0.0)),
                num(self.ii.get(&term).copied().unwrap_or(0.0)),
                bit(&self.aic_best, term),
                bit(&self.bic_best, term),
                self.rmse_best.as_ref().map_or_else(|| "NA".into(), |s| bit(s, term)),
            ]);
        }
        let yes = |b: bool| if b { "Yes" } else { "No" }.to_string();
        t.push(vec![
            Self::MEMBERSHIP_ROW.into(),
            "-".into(),
            "-".into(),
            yes(self.aic_in_mscs),
            yes(self.bic_in_mscs),
            self.rmse_in_mscs.map_or_else(|| "NA".into(), yes),
        ]);
        t
    }

    pub fn summary(&self, names: &[String]) -> AuditSummary {
        AuditSummary {
            alpha: self.alpha,
            mscs_size: self.mscs_size,
            n_lbm: self.lbm.len(),
            aic_best: self.aic_best.describe(names),
            bic_best: self.bic_best.describe(names),
            rmse_best: self.rmse_best.as_ref().map(|s| s.describe(names)),
            aic_in_mscs: self.aic_in_mscs,
            bic_in_mscs: self.bic_in_mscs,
            rmse_in_mscs: self.rmse_in_mscs,
            lbm: self.lbm.iter().map(|s| s.describe(names)).collect(),
        }
    }
}

/// Seed of one simulation cell, derived from the run seed and the cell's coordinates.
pub fn cell_seed(seed: u64, dgp: &DgpConfig, t_obs: usize) -> u64 {
    let key = format!("{seed}/{}/{}/{t_obs}", dgp.label, dgp.rho);
    let digest = Sha256::digest(key.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// The simulation cells of the configured grid, in output order.
pub fn mc_cells(cfg: &RunConfig) -> Result<Vec<CellConfig>> {
    let mc = cfg.montecarlo.as_ref().context("`mc` needs a [montecarlo] section")?;
    let universe = cfg.mc_universe()?;
    let mut cells = Vec::new();
    for dgp in mc.processes()? {
        for &t in &mc.t_obs {
            cells.push(CellConfig {
                seed: cell_seed(cfg.seed, &dgp, t),
                dgp: dgp.clone(),
                t_obs: t,
                alphas: cfg.alphas.clone(),
                n_reps: mc.n_reps,
                universe: universe.clone(),
                fit: cfg.fit_options(),
            });
        }
    }
    for c in &cells {
        c.validate()?;
    }
    Ok(cells)
}

/// Cell summaries (one row per process, rho, sample size and level) and per-replication records.
pub fn mc_tables(results: &[McCellResult]) -> (Table, Table) {
    let mut summary = Table::new(&[
        "dgp", "n_relevant", "rho", "t_obs", "alpha", "confidence", "n_requested", "n_replications",
        "n_fit_failures", "n_candidate_failures", "mscs_size", "mscs_size_se", "lbm_size", "lbm_size_se",
        "lbm_dimension", "lbm_dimension_se", "coverage", "coverage_se", "hamming_to_union",
        "hamming_to_union_se", "union_coverage", "union_coverage_se",
    ]);
    let mut reps = Table::new(&[
        "dgp", "rho", "t_obs", "alpha", "replication", "mscs_size", "lbm_count", "lbm_mean_dimension", "covered",
        "hamming_to_union", "union_covered", "lambda_true", "candidate_failures", "full_refit",
    ]);
    for r in results {
        summary.push(vec![
            r.dgp.clone(),
            r.n_relevant.to_string(),
            num(r.rho),
            r.t_obs.to_string(),
            num(r.alpha),
            num(1.0 - r.alpha),
            r.n_requested.to_string(),
            r.n_replications.to_string(),
            r.n_fit_failures.to_string(),
            r.n_candidate_failures.to_string(),
            num(r.mscs_size.mean),
            num(r.mscs_size.se),
            num(r.lbm_size.mean),
            num(r.lbm_size.se),
            num(r.lbm_dimension.mean),
            num(r.lbm_dimension.se),
            num(r.coverage.mean),
            num(r.coverage.se),
            num(r.hamming_to_union.mean),
            num(r.hamming_to_union.se),
            num(r.union_coverage.mean),
            num(r.union_coverage.se),
        ]);
        for x in &r.replications {
            reps.push(vec![
                r.dgp.clone(),
                num(r.rho),
                r.t_obs.to_string(),
                num(r.alpha),
                x.replication.to_string(),
                x.mscs_size.to_string(),
                x.lbm_count.to_string(),
                num(x.lbm_mean_dimension),
                flag(x.covered),
                x.hamming_to_union.to_string(),
                flag(x.union_covered),
                num(x.lambda_true),
                x.candidate_failures.to_string(),
                flag(x.full_repaired),
            ]);
        }
    }
    (summary, reps)
}

fn run_mc(cfg: &RunConfig, out: &mut OutputDir, failures: &mut BTreeMap<String, usize>) -> Result<()> {
    let cells = mc_cells(cfg)?;
    let mut results = Vec::new();
    for c in &cells {
        log::info!("model {} rho {} T={}: {} replications", c.dgp.label, c.dgp.rho, c.t_obs, c.n_reps);
        let res = run_cell(c)?;
        if let Some(first) = res.first() {
            bump(failures, "aborted_replications", first.n_fit_failures);
            bump(failures, "candidate_fits_excluded", first.n_candidate_failures);
        }
        results.extend(res);
    }
    let (summary, reps) = mc_tables(&results);
    out.table("mc_summary.csv", &summary)?;
    out.table("mc_replications.csv", &reps)?;
    Ok(())
}

/// Path of the metadata file of a finished run.
pub fn metadata_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("run_metadata.json")
}
