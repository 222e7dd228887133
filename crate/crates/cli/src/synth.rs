//! Synthetic hourly load data with a known ARMAX structure per hour of the day:
//! weather-like raw columns plus calendar effects, for exercising the empirical pipeline.

use chrono::{Datelike, Duration, NaiveDate, Weekday};

use mscs_core::series::{ExoTerm, ModelSpec};
use mscs_core::stats::RngStream;

use crate::config::{DataConfig, DerivedColumn, UniverseConfig};

pub const RAW_COLUMNS: [&str; 6] = ["temperature", "solar", "wind", "humidity", "cloud_cover", "price"];

/// Predictor order of the generated configuration.
pub const PREDICTORS: [&str; 11] = [
    "temperature",
    "temperature_sq",
    "solar",
    "wind",
    "humidity",
    "cloud_cover",
    "price",
    "summer",
    "winter",
    "holiday",
    "lockdown",
];

/// Predictors that drive the load, with their coefficients.
pub const EFFECTS: [(&str, f64); 6] = [
    ("temperature", -0.12),
    ("temperature_sq", 0.005),
    ("solar", -0.08),
    ("wind", -0.1),
    ("holiday", -1.2),
    ("lockdown", -1.5),
];

pub const LOCKDOWN: (&str, &str) = ("2020-03-09", "2020-05-18");

#[derive(Clone, Debug, PartialEq)]
pub struct LoadLike {
    pub start: NaiveDate,
    pub days: usize,
    pub seed: u64,
    pub ar: f64,
    pub ma: f64,
    pub sigma: f64,
}

impl LoadLike {
    pub fn new(days: usize, seed: u64) -> Self {
        Self {
            start: NaiveDate::from_ymd_opt(2018, 1, 1).expect("valid date"),
            days,
            seed,
            ar: 0.55,
            ma: 0.4,
            sigma: 0.5,
        }
    }

    /// The data-generating model of every hour, in the predictor order of [`PREDICTORS`].
    pub fn true_spec() -> ModelSpec {
        let exo = EFFECTS
            .iter()
            .map(|(name, _)| ExoTerm::new(PREDICTORS.iter().position(|p| p == name).expect("known predictor"), 0));
        ModelSpec::new([1], [1], exo, true)
    }

    /// Fixed-date public holidays over the simulated span.
    pub fn holidays(&self) -> Vec<String> {
        let fixed = [(1, 1), (1, 6), (4, 25), (5, 1), (6, 2), (8, 15), (11, 1), (12, 8), (12, 25), (12, 26)];
        let last = self.start + Duration::days(self.days as i64);
        (self.start.year()..=last.year())
            .flat_map(|y| fixed.iter().map(move |&(m, d)| NaiveDate::from_ymd_opt(y, m, d).expect("valid date")))
            .filter(|d| *d >= self.start && *d < last)
            .map(|d| d.format("%Y-%m-%d").to_string())
            .collect()
    }

    /// Hourly CSV text: `time,load` followed by [`RAW_COLUMNS`].
    pub fn csv(&self) -> String {
        let lockdown = (
            NaiveDate::parse_from_str(LOCKDOWN.0, "%Y-%m-%d").expect("valid date"),
            NaiveDate::parse_from_str(LOCKDOWN.1, "%Y-%m-%d").expect("valid date"),
        );
        let holidays: Vec<NaiveDate> = self
            .holidays()
            .iter()
            .map(|d| NaiveDate::parse_from_str(d, "%Y-%m-%d").expect("generated date"))
            .collect();
        let mut weather = RngStream::new(self.seed, 0);
        let mut shocks: Vec<RngStream> = (0..24).map(|h| RngStream::new(self.seed, 1 + h)).collect();
        let mut prev_y = [0.0f64; 24];
        let mut prev_e = [0.0f64; 24];
        let (mut temp_anom, mut cloud_anom, mut wind_anom, mut price_anom) = (0.0, 0.0, 0.0, 0.0);

        let mut out = String::with_capacity(self.days * 24 * 80);
        out.push_str("time,load,");
        out.push_str(&RAW_COLUMNS.join(","));
        out.push('\n');
        for d in 0..self.days {
            let date = self.start + Duration::days(d as i64);
            let season = 2.0 * std::f64::consts::PI * f64::from(date.ordinal()) / 365.25;
            temp_anom = 0.7 * temp_anom + 1.8 * weather.standard_normal();
            cloud_anom = 0.5 * cloud_anom + 0.25 * weather.standard_normal();
            wind_anom = 0.6 * wind_anom + 0.5 * weather.standard_normal();
            price_anom = 0.9 * price_anom + 3.0 * weather.standard_normal();
            let holiday = matches!(date.weekday(), Weekday::Sat | Weekday::Sun) || holidays.contains(&date);
            let locked = date >= lockdown.0 && date <= lockdown.1;
            let cloud = (0.45 - 0.15 * season.cos() + cloud_anom).clamp(0.0, 1.0);
            // the reported cloud cover is only a noisy proxy of the sky that drives solar output
            let sky = (cloud + 0.25 * weather.standard_normal()).clamp(0.0, 1.0);
            for h in 0..24usize {
                let hf = h as f64;
                let daylight = (std::f64::consts::PI * (hf - 6.0) / 12.0).sin().max(0.0);
                let temperature = 14.0 - 9.0 * season.cos() + 4.0 * (std::f64::consts::PI * (hf - 9.0) / 12.0).sin()
                    + temp_anom + 0.5 * weather.standard_normal();
                let solar = 10.0 * daylight * (0.7 - 0.3 * season.cos()) * (1.0 - 0.7 * sky)
                    + 0.05 * weather.standard_normal().abs();
                let wind = (wind_anom + 0.3 * weather.standard_normal()).exp() * 2.0;
                let humidity = 60.0 + 25.0 * cloud + 4.0 * weather.standard_normal();
                let price = 50.0 + price_anom + 5.0 * daylight + weather.standard_normal();
                let values = [
                    temperature,
                    temperature * temperature,
                    solar,
                    wind,
                    f64::from(u8::from(holiday)),
                    f64::from(u8::from(locked)),
                ];
                let exo: f64 = EFFECTS.iter().zip(values).map(|((_, b), x)| b * x).sum();
                let level = 12.0 + 3.0 * (std::f64::consts::PI * (hf - 4.0) / 20.0).sin().max(-0.5);
                let e = self.sigma * shocks[h].standard_normal();
                let y = level + self.ar * prev_y[h] + exo + e + self.ma * prev_e[h];
                prev_y[h] = y;
                prev_e[h] = e;
                out.push_str(&format!(
                    "{} {:02}:00:00,{},{},{},{},{},{},{}\n",
                    date.format("%Y-%m-%d"),
                    h,
                    y,
                    temperature,
                    solar,
                    wind,
                    humidity,
                    cloud,
                    price
                ));
            }
        }
        out
    }

    /// Column mapping with the five derived predictors and the generated holiday list.
    pub fn data_config(&self, path: &str) -> DataConfig {
        DataConfig {
            path: path.into(),
            timestamp: "time".into(),
            timestamp_format: None,
            response: "load".into(),
            predictors: PREDICTORS.iter().map(|s| s.to_string()).collect(),
            derived: vec![
                DerivedColumn::Square { name: "temperature_sq".into(), source: "temperature".into() },
                DerivedColumn::MonthRange { name: "summer".into(), from: 6, to: 8 },
                DerivedColumn::MonthRange { name: "winter".into(), from: 12, to: 2 },
                DerivedColumn::Holiday { name: "holiday".into() },
                DerivedColumn::DateRange {
                    name: "lockdown".into(),
                    start: LOCKDOWN.0.into(),
                    end: LOCKDOWN.1.into(),
                },
            ],
            holidays: self.holidays(),
            hourly_split: true,
            hours: Some(vec![12]),
            estimation_end: None,
        }
    }
}

/// AR orders 1..=7 crossed with MA orders 1..=2, intercept in every model: with eleven
/// predictors this is 14 * 2^11 = 28672 candidates.
pub fn reproduction_universe() -> UniverseConfig {
    UniverseConfig {
        mode: mscs_core::model_space::EnumerationMode::Contiguous,
        p_max: 7,
        q_max: 2,
        r_max: 0,
        exo_lag_min: 0,
        intercept: Some(true),
        orders: Some(mscs_core::model_space::ModelUniverse::reproduction_orders()),
        max_candidates: None,
    }
}
