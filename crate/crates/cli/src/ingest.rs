//! CSV ingestion: parsing, ordering and gap checks, derived columns, hourly splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, Timelike, Weekday};

use mscs_core::series::TimeSeriesDataset;

use crate::config::{parse_date, DataConfig, DerivedColumn};

/// One analysable series: the whole file, or the rows of one hour of the day.
#[derive(Clone, Debug)]
pub struct Series {
    pub hour: Option<u32>,
    pub data: TimeSeriesDataset,
    pub dates: Vec<NaiveDate>,
    /// Rows up to and including the configured estimation end.
    pub estimation_len: usize,
}

impl Series {
    /// Output subdirectory name, empty for an unsplit file.
    pub fn tag(&self) -> String {
        self.hour.map(|h| format!("hour_{h:02}")).unwrap_or_default()
    }

    pub fn estimation_data(&self) -> TimeSeriesDataset {
        self.data.slice(0..self.estimation_len)
    }
}

struct Row {
    line: u64,
    time: NaiveDateTime,
    response: f64,
    raw: Vec<f64>,
}

const DEFAULT_FORMATS: [&str; 3] = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"];

fn parse_timestamp(s: &str, format: Option<&str>) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Some(f) = format {
        return NaiveDateTime::parse_from_str(s, f)
            .ok()
            .or_else(|| NaiveDate::parse_from_str(s, f).ok().and_then(|d| d.and_hms_opt(0, 0, 0)));
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.naive_utc());
    }
    DEFAULT_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().and_then(|d| d.and_hms_opt(0, 0, 0)))
}

pub fn ingest_csv(cfg: &DataConfig) -> Result<Vec<Series>> {
    let file = std::fs::File::open(&cfg.path).with_context(|| format!("opening {}", cfg.path.display()))?;
    ingest_reader(file, cfg).with_context(|| format!("ingesting {}", cfg.path.display()))
}

pub fn ingest_path(path: &Path, cfg: &DataConfig) -> Result<Vec<Series>> {
    let mut cfg = cfg.clone();
    cfg.path = path.to_path_buf();
    ingest_csv(&cfg)
}

pub fn ingest_reader<R: std::io::Read>(reader: R, cfg: &DataConfig) -> Result<Vec<Series>> {
    cfg.validate()?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().context("reading header row")?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("column `{name}` not found in header"))
    };
    let ts_col = col(&cfg.timestamp)?;
    let y_col = col(&cfg.response)?;

    // raw columns: predictors that are not derived, plus sources of derived squares
    let derived: BTreeMap<&str, &DerivedColumn> = cfg.derived.iter().map(|d| (d.name(), d)).collect();
    let mut raw_names: Vec<String> = Vec::new();
    for p in &cfg.predictors {
        match derived.get(p.as_str()) {
            Some(DerivedColumn::Square { source, .. }) => {
                if !raw_names.contains(source) {
                    raw_names.push(source.clone());
                }
            }
            Some(_) => {}
            None => {
                if !raw_names.contains(p) {
                    raw_names.push(p.clone());
                }
            }
        }
    }
    let raw_cols: Vec<usize> = raw_names.iter().map(|n| col(n)).collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.context("malformed CSV record")?;
        let line = rec.position().map_or(0, |p| p.line());
        let cell = |i: usize| rec.get(i).unwrap_or("");
        let time = parse_timestamp(cell(ts_col), cfg.timestamp_format.as_deref())
            .ok_or_else(|| anyhow!("line {line}: unparseable timestamp `{}`", cell(ts_col)))?;
        let number = |i: usize, name: &str| -> Result<f64> {
            let v: f64 = cell(i)
                .parse()
                .map_err(|_| anyhow!("line {line}: column `{name}` has unparseable value `{}`", cell(i)))?;
            if !v.is_finite() {
                bail!("line {line}: column `{name}` is not finite");
            }
            Ok(v)
        };
        let response = number(y_col, &cfg.response)?;
        let raw = raw_cols
            .iter()
            .zip(&raw_names)
            .map(|(&i, n)| number(i, n))
            .collect::<Result<_>>()?;
        rows.push(Row { line, time, response, raw });
    }
    if rows.is_empty() {
        bail!("no data rows");
    }
    rows.sort_by_key(|r| r.time);
    for w in rows.windows(2) {
        if w[0].time == w[1].time {
            bail!("duplicate timestamp {} on lines {} and {}", w[0].time, w[0].line, w[1].line);
        }
    }

    let holidays: BTreeSet<NaiveDate> = cfg.holidays.iter().map(|d| parse_date(d)).collect::<Result<_>>()?;
    let estimation_end = cfg.estimation_end.as_deref().map(parse_date).transpose()?;

    let groups: Vec<(Option<u32>, Vec<&Row>)> = if cfg.hourly_split {
        let mut by_hour: BTreeMap<u32, Vec<&Row>> = BTreeMap::new();
        for r in &rows {
            by_hour.entry(r.time.hour()).or_default().push(r);
        }
        let wanted: Vec<u32> = cfg.hours.clone().unwrap_or_else(|| (0..24).collect());
        wanted
            .into_iter()
            .map(|h| {
                let rs = by_hour.remove(&h).ok_or_else(|| anyhow!("no rows observed at hour {h}"))?;
                Ok((Some(h), rs))
            })
            .collect::<Result<_>>()?
    } else {
        vec![(None, rows.iter().collect())]
    };

    groups
        .into_iter()
        .map(|(hour, rs)| {
            check_spacing(&rs, hour.is_some())?;
            build_series(hour, &rs, cfg, &raw_names, &holidays, estimation_end)
        })
        .collect()
}

/// Daily series (hourly split) must advance one day per row; otherwise the first
/// interval sets the step every other interval must match.
fn check_spacing(rows: &[&Row], daily: bool) -> Result<()> {
    if rows.len() < 2 {
        return Ok(());
    }
    let step = if daily {
        chrono::Duration::days(1)
    } else {
        rows[1].time - rows[0].time
    };
    for w in rows.windows(2) {
        let d = w[1].time - w[0].time;
        if d != step {
            bail!(
                "gap or irregular spacing between lines {} ({}) and {} ({}): expected a step of {}",
                w[0].line,
                w[0].time,
                w[1].line,
                w[1].time,
                step
            );
        }
    }
    Ok(())
}

fn build_series(
    hour: Option<u32>,
    rows: &[&Row],
    cfg: &DataConfig,
    raw_names: &[String],
    holidays: &BTreeSet<NaiveDate>,
    estimation_end: Option<NaiveDate>,
) -> Result<Series> {
    let raw_index = |name: &str| raw_names.iter().position(|n| n == name);
    let derived: BTreeMap<&str, &DerivedColumn> = cfg.derived.iter().map(|d| (d.name(), d)).collect();
    let dates: Vec<NaiveDate> = rows.iter().map(|r| r.time.date()).collect();
    let mut columns = Vec::with_capacity(cfg.predictors.len());
    for p in &cfg.predictors {
        let column: Vec<f64> = match derived.get(p.as_str()) {
            Some(DerivedColumn::Square { source, .. }) => {
                let i = raw_index(source).expect("source column was loaded");
                rows.iter().map(|r| r.raw[i] * r.raw[i]).collect()
            }
            Some(DerivedColumn::MonthRange { from, to, .. }) => dates
                .iter()
                .map(|d| indicator(month_in(d.month(), *from, *to)))
                .collect(),
            Some(DerivedColumn::Holiday { .. }) => dates
                .iter()
                .map(|d| indicator(matches!(d.weekday(), Weekday::Sat | Weekday::Sun) || holidays.contains(d)))
                .collect(),
            Some(DerivedColumn::DateRange { start, end, .. }) => {
                let (s, e) = (parse_date(start)?, parse_date(end)?);
                dates.iter().map(|d| indicator(*d >= s && *d <= e)).collect()
            }
            None => {
                let i = raw_index(p).expect("raw column was loaded");
                rows.iter().map(|r| r.raw[i]).collect()
            }
        };
        columns.push(column);
    }
    let y = rows.iter().map(|r| r.response).collect();
    let index = rows.iter().map(|r| r.time.and_utc().timestamp()).collect();
    let data = TimeSeriesDataset::new(y, columns, cfg.predictors.clone(), index)?;
    let estimation_len = match estimation_end {
        Some(end) => dates.iter().take_while(|d| **d <= end).count(),
        None => dates.len(),
    };
    if estimation_len == 0 {
        bail!("no observations on or before the estimation end");
    }
    Ok(Series { hour, data, dates, estimation_len })
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn month_in(m: u32, from: u32, to: u32) -> bool {
    if from <= to {
        (from..=to).contains(&m)
    } else {
        m >= from || m <= to
    }
}
