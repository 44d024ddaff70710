//! Weekly annuity quote panels: CSV ingestion and validation, the JSON
//! metadata sidecar, and the synthetic forward-model generator.
//!
//! CSV schema (header required):
//!
//! ```text
//! date,gender,age,guarantee_years,monthly_income_per_100k
//! 2004-09-15,female,65,10,612.37
//! ```
//!
//! Dates are ISO-8601; a quote's week is `floor(days since start / 7)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mortality::{MortalityTrend, OMEGA};
use crate::pricing::{self, AnnuityContract, PricingConfig, PricingError};
use crate::termstructure::{CirCurve, TermModel};

/// Premium the income column is quoted against.
pub const STANDARD_PREMIUM: f64 = 100_000.0;

const HEADER: [&str; 5] = ["date", "gender", "age", "guarantee_years", "monthly_income_per_100k"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: parse error: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: field `{field}` violates {constraint}")]
    Validation {
        line: u64,
        field: &'static str,
        constraint: String,
    },
    #[error("line {line}: duplicate quote key {key}")]
    DuplicateKey { line: u64, key: QuoteKey },
    #[error("panel contains no quotes")]
    EmptyPanel,
    #[error("metadata: {0}")]
    Metadata(String),
    #[error("pricing failed for {key}: {source}")]
    Pricing {
        key: QuoteKey,
        #[source]
        source: PricingError,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Female, Gender::Male];

    pub fn as_str(&self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "female" | "f" => Ok(Gender::Female),
            "male" | "m" => Ok(Gender::Male),
            other => Err(format!("unknown gender `{other}` (expected female|male)")),
        }
    }
}

/// `(week, gender, age, guarantee)`; panel order and uniqueness key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QuoteKey {
    pub week: u32,
    pub gender: Gender,
    pub age: u32,
    pub guarantee: u32,
}

impl fmt::Display for QuoteKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(week {}, {}, age {}, guarantee {})", self.week, self.gender, self.age, self.guarantee)
    }
}

/// One row of the CSV feed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuoteRecord {
    pub date: NaiveDate,
    pub gender: Gender,
    pub age: u32,
    #[serde(rename = "guarantee_years")]
    pub guarantee: u32,
    #[serde(rename = "monthly_income_per_100k")]
    pub monthly_income: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quote {
    pub key: QuoteKey,
    pub date: NaiveDate,
    pub monthly_income: f64,
}

impl Quote {
    /// Observed annuity factor per dollar of annual income.
    pub fn factor(&self) -> f64 {
        STANDARD_PREMIUM / (12.0 * self.monthly_income)
    }
}

/// JSON sidecar describing a panel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelMetadata {
    pub start_date: NaiveDate,
    pub week_count: u32,
    pub missing_weeks: Vec<u32>,
    pub ages: Vec<u32>,
    pub guarantees: Vec<u32>,
}

/// Week index of `date` relative to `start` (floor of elapsed days / 7);
/// negative before the start.
pub fn week_index(start: NaiveDate, date: NaiveDate) -> i64 {
    (date - start).num_days().div_euclid(7)
}

/// First day of week `week`.
pub fn week_start_date(start: NaiveDate, week: i64) -> NaiveDate {
    start + Duration::days(7 * week)
}

/// First week `z >= 0` whose start date falls in the given month.
pub fn first_week_in_month(start: NaiveDate, year: i32, month: u32) -> Option<i64> {
    let first = NaiveDate::from_ymd_opt(year, month, 1)?;
    let days = (first - start).num_days();
    let z = if days <= 0 { 0 } else { (days + 6).div_euclid(7) };
    let d = week_start_date(start, z);
    (d.year() == year && d.month() == month).then_some(z)
}

/// Validated, immutable quote panel.
#[derive(Debug, Clone, PartialEq)]
pub struct QuotePanel {
    start_date: NaiveDate,
    week_count: u32,
    missing_weeks: BTreeSet<u32>,
    quotes: Vec<Quote>,
}

impl QuotePanel {
    /// Build a panel from records, inferring the week span and the missing
    /// weeks.
    pub fn from_records(start_date: NaiveDate, records: &[QuoteRecord]) -> Result<Self, DataError> {
        Self::build(start_date, None, records.iter().enumerate().map(|(i, r)| (i as u64 + 2, *r)))
    }

    fn build(
        start_date: NaiveDate,
        metadata: Option<&PanelMetadata>,
        records: impl Iterator<Item = (u64, QuoteRecord)>,
    ) -> Result<Self, DataError> {
        let mut by_key: BTreeMap<QuoteKey, Quote> = BTreeMap::new();
        for (line, rec) in records {
            validate_record(line, &rec)?;
            let days = (rec.date - start_date).num_days();
            if days < 0 {
                return Err(DataError::Validation {
                    line,
                    field: "date",
                    constraint: format!("on or after panel start {start_date}"),
                });
            }
            let week = (days / 7) as u32;
            if let Some(meta) = metadata {
                if week >= meta.week_count {
                    return Err(DataError::Validation {
                        line,
                        field: "date",
                        constraint: format!("within the {} declared weeks", meta.week_count),
                    });
                }
            }
            let key = QuoteKey { week, gender: rec.gender, age: rec.age, guarantee: rec.guarantee };
            if by_key.contains_key(&key) {
                return Err(DataError::DuplicateKey { line, key });
            }
            by_key.insert(key, Quote { key, date: rec.date, monthly_income: rec.monthly_income });
        }
        if by_key.is_empty() {
            return Err(DataError::EmptyPanel);
        }
        let present: BTreeSet<u32> = by_key.keys().map(|k| k.week).collect();
        let (week_count, missing_weeks) = match metadata {
            Some(meta) => {
                let declared: BTreeSet<u32> = meta.missing_weeks.iter().copied().collect();
                if let Some(w) = declared.intersection(&present).next() {
                    return Err(DataError::Metadata(format!("week {w} is declared missing but has quotes")));
                }
                if let Some(w) = (0..meta.week_count).find(|w| !present.contains(w) && !declared.contains(w)) {
                    return Err(DataError::Metadata(format!("week {w} has no quotes and is not declared missing")));
                }
                (meta.week_count, declared)
            }
            None => {
                let count = present.iter().next_back().map_or(0, |w| w + 1);
                (count, (0..count).filter(|w| !present.contains(w)).collect())
            }
        };
        Ok(Self { start_date, week_count, missing_weeks, quotes: by_key.into_values().collect() })
    }

    pub fn start_date(&self) -> NaiveDate {
        self.start_date
    }

    pub fn week_count(&self) -> u32 {
        self.week_count
    }

    pub fn missing_weeks(&self) -> &BTreeSet<u32> {
        &self.missing_weeks
    }

    /// Quotes ordered by `(week, gender, age, guarantee)`.
    pub fn quotes(&self) -> &[Quote] {
        &self.quotes
    }

    pub fn len(&self) -> usize {
        self.quotes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quotes.is_empty()
    }

    /// Quotes for one gender, in `(week, age, guarantee)` order.
    pub fn quotes_for(&self, gender: Gender) -> impl Iterator<Item = &Quote> + '_ {
        self.quotes.iter().filter(move |q| q.key.gender == gender)
    }

    pub fn genders(&self) -> BTreeSet<Gender> {
        self.quotes.iter().map(|q| q.key.gender).collect()
    }

    /// Weeks with at least one quote for `gender`.
    pub fn weeks_for(&self, gender: Gender) -> BTreeSet<u32> {
        self.quotes_for(gender).map(|q| q.key.week).collect()
    }

    pub fn week_of(&self, date: NaiveDate) -> i64 {
        week_index(self.start_date, date)
    }

    pub fn metadata(&self) -> PanelMetadata {
        let ages: BTreeSet<u32> = self.quotes.iter().map(|q| q.key.age).collect();
        let guarantees: BTreeSet<u32> = self.quotes.iter().map(|q| q.key.guarantee).collect();
        PanelMetadata {
            start_date: self.start_date,
            week_count: self.week_count,
            missing_weeks: self.missing_weeks.iter().copied().collect(),
            ages: ages.into_iter().collect(),
            guarantees: guarantees.into_iter().collect(),
        }
    }

    pub fn records(&self) -> impl Iterator<Item = QuoteRecord> + '_ {
        self.quotes.iter().map(|q| QuoteRecord {
            date: q.date,
            gender: q.key.gender,
            age: q.key.age,
            guarantee: q.key.guarantee,
            monthly_income: q.monthly_income,
        })
    }

    /// A copy with one quote's income replaced (used to probe residual
    /// locality).
    pub fn with_income(&self, key: &QuoteKey, monthly_income: f64) -> Option<Self> {
        let mut out = self.clone();
        let q = out.quotes.iter_mut().find(|q| &q.key == key)?;
        q.monthly_income = monthly_income;
        Some(out)
    }
}

fn validate_record(line: u64, rec: &QuoteRecord) -> Result<(), DataError> {
    if !(rec.monthly_income > 0.0 && rec.monthly_income.is_finite()) {
        return Err(DataError::Validation {
            line,
            field: "monthly_income_per_100k",
            constraint: format!("> 0 (got {})", rec.monthly_income),
        });
    }
    if rec.age == 0 || f64::from(rec.age) >= OMEGA {
        return Err(DataError::Validation { line, field: "age", constraint: format!("0 < age < {OMEGA}") });
    }
    if f64::from(rec.age + rec.guarantee) > OMEGA {
        return Err(DataError::Validation {
            line,
            field: "guarantee_years",
            constraint: format!("age + guarantee <= {OMEGA}"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Panel start; defaults to the sidecar's, else the earliest quote date.
    pub start_date: Option<NaiveDate>,
    /// Explicit metadata; overrides the sidecar.
    pub metadata: Option<PanelMetadata>,
    /// Skip looking for `<stem>.meta.json` next to the CSV.
    pub ignore_sidecar: bool,
}

/// `panel.csv` → `panel.meta.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

pub fn load_panel(path: &Path, options: &LoadOptions) -> Result<QuotePanel, DataError> {
    let io = |source| DataError::Io { path: path.to_path_buf(), source };
    let file = File::open(path).map_err(io)?;
    let mut options = options.clone();
    if options.metadata.is_none() && !options.ignore_sidecar {
        let side = sidecar_path(path);
        if side.exists() {
            let text = std::fs::read_to_string(&side).map_err(|source| DataError::Io { path: side.clone(), source })?;
            let meta: PanelMetadata = serde_json::from_str(&text).map_err(|e| DataError::Metadata(e.to_string()))?;
            options.metadata = Some(meta);
        }
    }
    read_panel(BufReader::new(file), &options)
}

pub fn read_panel<R: Read>(reader: R, options: &LoadOptions) -> Result<QuotePanel, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(DataError::EmptyPanel);
    }
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(DataError::Parse {
            line: 1,
            message: format!("expected header `{}`, got `{}`", HEADER.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut rows = Vec::new();
    for result in rdr.records() {
        let raw = result?;
        let line = raw.position().map_or(0, |p| p.line());
        let rec = parse_row(line, &raw)?;
        rows.push((line, rec));
    }
    if rows.is_empty() {
        return Err(DataError::EmptyPanel);
    }
    let start = options
        .metadata
        .as_ref()
        .map(|m| m.start_date)
        .or(options.start_date)
        .unwrap_or_else(|| rows.iter().map(|(_, r)| r.date).min().expect("non-empty"));
    QuotePanel::build(start, options.metadata.as_ref(), rows.into_iter())
}

fn parse_row(line: u64, raw: &csv::StringRecord) -> Result<QuoteRecord, DataError> {
    let field = |i: usize| raw.get(i).unwrap_or("");
    let parse_err = |what: &str, value: &str| DataError::Parse { line, message: format!("bad {what} `{value}`") };
    let date = NaiveDate::parse_from_str(field(0), "%Y-%m-%d").map_err(|_| parse_err("date", field(0)))?;
    let gender = field(1).parse::<Gender>().map_err(|m| DataError::Parse { line, message: m })?;
    let age = field(2).parse::<u32>().map_err(|_| parse_err("age", field(2)))?;
    let guarantee = field(3).parse::<u32>().map_err(|_| parse_err("guarantee_years", field(3)))?;
    let monthly_income = field(4).parse::<f64>().map_err(|_| parse_err("monthly_income_per_100k", field(4)))?;
    Ok(QuoteRecord { date, gender, age, guarantee, monthly_income })
}

/// Writes the CSV; incomes use the shortest round-trip float representation.
pub fn write_panel<W: Write>(panel: &QuotePanel, writer: W) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(HEADER)?;
    for r in panel.records() {
        wtr.write_record([
            r.date.format("%Y-%m-%d").to_string(),
            r.gender.to_string(),
            r.age.to_string(),
            r.guarantee.to_string(),
            r.monthly_income.to_string(),
        ])?;
    }
    wtr.flush().map_err(|source| DataError::Io { path: PathBuf::from("<writer>"), source })?;
    Ok(())
}

/// Writes the CSV and its metadata sidecar.
pub fn save_panel(panel: &QuotePanel, path: &Path) -> Result<(), DataError> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| DataError::Io { path: p, source }
    };
    let file = File::create(path).map_err(io(path))?;
    write_panel(panel, BufWriter::new(file))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&panel.metadata()).map_err(|e| DataError::Metadata(e.to_string()))?;
    std::fs::write(&side, json + "\n").map_err(io(&side))?;
    Ok(())
}

/// Ages and guarantee periods quoted each week.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuoteGrid {
    pub ages: Vec<u32>,
    pub guarantees: Vec<u32>,
}

impl Default for QuoteGrid {
    fn default() -> Self {
        Self { ages: vec![50, 55, 60, 65, 70, 75, 80], guarantees: vec![0, 5, 10, 15, 20, 25] }
    }
}

impl QuoteGrid {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |what: &'static str, constraint: &str| DataError::Validation { line: 0, field: what, constraint: constraint.into() };
        if self.ages.is_empty() || self.ages.iter().any(|a| !(50..=80).contains(a)) {
            return Err(bad("age", "grid ages within 50..=80"));
        }
        if self.guarantees.is_empty() || self.guarantees.iter().any(|g| *g > 25) {
            return Err(bad("guarantee_years", "grid guarantees within 0..=25"));
        }
        Ok(())
    }
}

/// A deterministic synthetic spot-rate path between roughly 2.5% and 5.5%.
pub fn synthetic_rate_path(weeks: impl IntoIterator<Item = u32>) -> BTreeMap<u32, f64> {
    use std::f64::consts::TAU;
    weeks
        .into_iter()
        .map(|z| {
            let t = f64::from(z);
            (z, 0.04 + 0.011 * (TAU * t / 400.0).sin() + 0.004 * (TAU * t / 97.0).cos())
        })
        .collect()
}

/// `count` evenly spread weeks in `1..week_count-1` to drop from a synthetic
/// panel.
pub fn spread_missing_weeks(week_count: u32, count: u32) -> BTreeSet<u32> {
    if count == 0 || week_count < 3 {
        return BTreeSet::new();
    }
    let step = f64::from(week_count) / f64::from(count + 1);
    (1..=count).map(|k| ((f64::from(k) * step).round() as u32).clamp(1, week_count - 2)).collect()
}

/// Mortality trend and discount model used to price one gender's quotes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenderModel {
    pub trend: MortalityTrend,
    pub term: TermModel,
}

/// Inputs to the synthetic forward model.
#[derive(Debug, Clone)]
pub struct GeneratorSpec {
    pub start_date: NaiveDate,
    pub female: Option<GenderModel>,
    pub male: Option<GenderModel>,
    /// Spot rate per week; weeks absent here are absent from the panel.
    pub rate_path: BTreeMap<u32, f64>,
    pub grid: QuoteGrid,
    /// Standard deviation of Gaussian noise added to each factor.
    pub noise_sd: f64,
    pub seed: u64,
    pub pricing: PricingConfig,
}

impl GeneratorSpec {
    pub fn new(rate_path: BTreeMap<u32, f64>) -> Self {
        Self {
            start_date: NaiveDate::from_ymd_opt(2004, 9, 15).expect("valid date"),
            female: None,
            male: None,
            rate_path,
            grid: QuoteGrid::default(),
            noise_sd: 0.0,
            seed: 0,
            pricing: PricingConfig { rel_tol: 1e-11, ..PricingConfig::default() },
        }
    }
}

/// Model factor for one contract under the given term model.
pub fn model_factor(
    term: &TermModel,
    trend: &MortalityTrend,
    contract: &AnnuityContract,
    spot: f64,
    config: &PricingConfig,
) -> Result<f64, PricingError> {
    match term {
        TermModel::Flat => pricing::annuity_factor_flat(contract, trend, spot, config),
        TermModel::Cir(params) => {
            let curve = CirCurve::new(*params, spot).map_err(|_| PricingError::Rate(spot))?;
            pricing::annuity_factor_general(contract, trend, &curve, config)
        }
    }
}

/// Prices every grid cell for every week of the rate path, converts factors
/// to monthly income per $100,000 and optionally adds factor noise.
pub fn generate_panel(spec: &GeneratorSpec) -> Result<QuotePanel, DataError> {
    spec.grid.validate()?;
    if !(spec.noise_sd >= 0.0 && spec.noise_sd.is_finite()) {
        return Err(DataError::Validation { line: 0, field: "noise", constraint: "finite and >= 0".into() });
    }
    let models: Vec<(Gender, GenderModel)> = [(Gender::Female, spec.female), (Gender::Male, spec.male)]
        .into_iter()
        .filter_map(|(g, t)| t.map(|t| (g, t)))
        .collect();
    let weeks: Vec<(u32, f64)> = spec.rate_path.iter().map(|(w, r)| (*w, *r)).collect();
    let noise = Normal::new(0.0, spec.noise_sd.max(f64::MIN_POSITIVE)).expect("valid normal");
    let per_week: Vec<Vec<QuoteRecord>> = weeks
        .par_iter()
        .map(|&(week, spot)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(u64::from(week));
            let date = week_start_date(spec.start_date, i64::from(week));
            let mut out = Vec::with_capacity(models.len() * spec.grid.ages.len() * spec.grid.guarantees.len());
            for (gender, model) in &models {
                for &age in &spec.grid.ages {
                    for &guarantee in &spec.grid.guarantees {
                        let key = QuoteKey { week, gender: *gender, age, guarantee };
                        let contract = AnnuityContract::new(f64::from(age), f64::from(guarantee), f64::from(week));
                        let mut factor = model_factor(&model.term, &model.trend, &contract, spot, &spec.pricing)
                            .map_err(|source| DataError::Pricing { key, source })?;
                        if spec.noise_sd > 0.0 {
                            factor += noise.sample(&mut rng);
                        }
                        let monthly_income = pricing::factor_to_monthly_income(factor, STANDARD_PREMIUM)
                            .map_err(|source| DataError::Pricing { key, source })?;
                        out.push(QuoteRecord { date, gender: *gender, age, guarantee, monthly_income });
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_, DataError>>()?;
    let records: Vec<QuoteRecord> = per_week.into_iter().flatten().collect();
    QuotePanel::from_records(spec.start_date, &records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn start() -> NaiveDate {
        NaiveDate::from_ymd_opt(2004, 9, 15).unwrap()
    }

    fn rec(date: NaiveDate, gender: Gender, age: u32, guarantee: u32, income: f64) -> QuoteRecord {
        QuoteRecord { date, gender, age, guarantee, monthly_income: income }
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(read_panel("".as_bytes(), &LoadOptions::default()), Err(DataError::EmptyPanel)));
        let header_only = "date,gender,age,guarantee_years,monthly_income_per_100k\n";
        assert!(matches!(read_panel(header_only.as_bytes(), &LoadOptions::default()), Err(DataError::EmptyPanel)));
    }

    #[test]
    fn single_row_panel() {
        let csv = "date,gender,age,guarantee_years,monthly_income_per_100k\n2004-09-15,female,65,10,612.5\n";
        let p = read_panel(csv.as_bytes(), &LoadOptions::default()).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.week_count(), 1);
        assert!(p.missing_weeks().is_empty());
        assert_eq!(p.quotes()[0].key, QuoteKey { week: 0, gender: Gender::Female, age: 65, guarantee: 10 });
    }

    #[test]
    fn duplicate_key_names_the_key() {
        let csv = "date,gender,age,guarantee_years,monthly_income_per_100k\n\
                   2004-09-15,male,65,10,612.5\n\
                   2004-09-17,m,65,10,613.0\n";
        let err = read_panel(csv.as_bytes(), &LoadOptions::default()).unwrap_err();
        match &err {
            DataError::DuplicateKey { line, key } => {
                assert_eq!(*line, 3);
                assert_eq!(key.gender, Gender::Male);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("week 0, male, age 65, guarantee 10"));
    }

    #[test]
    fn non_positive_income_rejected_with_line() {
        let csv = "date,gender,age,guarantee_years,monthly_income_per_100k\n\
                   2004-09-15,male,65,10,612.5\n\
                   2004-09-22,male,65,10,0\n";
        match read_panel(csv.as_bytes(), &LoadOptions::default()).unwrap_err() {
            DataError::Validation { line, field, .. } => {
                assert_eq!(line, 3);
                assert_eq!(field, "monthly_income_per_100k");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let csv = "date,gender,age,guarantee_years,monthly_income_per_100k\n2004-13-01,male,65,10,600\n";
        assert!(matches!(read_panel(csv.as_bytes(), &LoadOptions::default()), Err(DataError::Parse { line: 2, .. })));
        let bad_header = "day,gender,age,guarantee,income\n2004-09-15,male,65,10,600\n";
        assert!(matches!(read_panel(bad_header.as_bytes(), &LoadOptions::default()), Err(DataError::Parse { line: 1, .. })));
    }

    #[test]
    fn week_assignment_and_missing_weeks() {
        let s = start();
        let records = vec![
            rec(s, Gender::Female, 65, 0, 600.0),
            rec(s + Duration::days(6), Gender::Female, 70, 0, 650.0),
            rec(s + Duration::days(21), Gender::Female, 65, 0, 601.0),
        ];
        let p = QuotePanel::from_records(s, &records).unwrap();
        let weeks: Vec<u32> = p.quotes().iter().map(|q| q.key.week).collect();
        assert_eq!(weeks, vec![0, 0, 3]);
        assert_eq!(p.week_count(), 4);
        assert_eq!(p.missing_weeks().iter().copied().collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn metadata_must_declare_gaps() {
        let s = start();
        let records = vec![rec(s, Gender::Male, 65, 0, 600.0), rec(s + Duration::days(14), Gender::Male, 65, 0, 600.0)];
        let meta = PanelMetadata { start_date: s, week_count: 3, missing_weeks: vec![], ages: vec![65], guarantees: vec![0] };
        let rows = records.iter().enumerate().map(|(i, r)| (i as u64 + 2, *r));
        assert!(matches!(QuotePanel::build(s, Some(&meta), rows), Err(DataError::Metadata(_))));
        let meta = PanelMetadata { missing_weeks: vec![1], ..meta };
        let rows = records.iter().enumerate().map(|(i, r)| (i as u64 + 2, *r));
        assert!(QuotePanel::build(s, Some(&meta), rows).is_ok());
    }

    #[test]
    fn week_index_and_month_labels() {
        let s = start();
        assert_eq!(week_index(s, s), 0);
        assert_eq!(week_index(s, s + Duration::days(13)), 1);
        assert_eq!(week_index(s, s - Duration::days(1)), -1);
        assert_eq!(first_week_in_month(s, 2004, 9), Some(0));
        let nov = first_week_in_month(s, 2013, 11).unwrap();
        let d = week_start_date(s, nov);
        assert_eq!((d.year(), d.month()), (2013, 11));
        assert!(week_start_date(s, nov - 1).month() == 10);
    }

    #[test]
    fn spread_missing_is_deterministic() {
        let m = spread_missing_weeks(478, 9);
        assert_eq!(m.len(), 9);
        assert!(m.iter().all(|&w| w > 0 && w < 477));
    }

    #[test]
    fn grid_validation() {
        assert!(QuoteGrid::default().validate().is_ok());
        assert!(QuoteGrid { ages: vec![45], guarantees: vec![0] }.validate().is_err());
        assert!(QuoteGrid { ages: vec![65], guarantees: vec![30] }.validate().is_err());
    }

    fn male_trend() -> MortalityTrend {
        MortalityTrend::new(2.376e-10, 88.13, 3.061e-3, 10.37, 1.127e-3)
    }

    #[test]
    fn generated_income_matches_priced_factor() {
        // solve the flat rate that prices male 65 / 10-year certain at 12.2549
        let trend = male_trend();
        let contract = AnnuityContract::new(65.0, 10.0, 0.0);
        let cfg = PricingConfig::default();
        let f = |r: f64| pricing::annuity_factor_flat(&contract, &trend, r, &cfg).unwrap() - 12.2549;
        let (mut lo, mut hi) = (0.0, 0.2);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 { lo = mid } else { hi = mid }
        }
        let mut spec = GeneratorSpec::new(BTreeMap::from([(0, 0.5 * (lo + hi))]));
        spec.male = Some(GenderModel { trend, term: TermModel::Flat });
        spec.grid = QuoteGrid { ages: vec![65], guarantees: vec![10] };
        let panel = generate_panel(&spec).unwrap();
        assert_eq!(panel.len(), 1);
        assert!((panel.quotes()[0].monthly_income - 680.00).abs() < 0.01);
    }

    #[test]
    fn generator_is_deterministic_and_round_trips() {
        let mut spec = GeneratorSpec::new(synthetic_rate_path([0, 1, 3]));
        let model = GenderModel { trend: male_trend(), term: TermModel::Flat };
        spec.female = Some(model);
        spec.male = Some(model);
        spec.noise_sd = 0.01;
        spec.seed = 7;
        let a = generate_panel(&spec).unwrap();
        let b = generate_panel(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3 * 2 * 42);
        assert_eq!(a.missing_weeks().iter().copied().collect::<Vec<_>>(), vec![2]);
        spec.seed = 8;
        assert_ne!(generate_panel(&spec).unwrap(), a);

        let mut buf = Vec::new();
        write_panel(&a, &mut buf).unwrap();
        let back = read_panel(&buf[..], &LoadOptions { metadata: Some(a.metadata()), ..Default::default() }).unwrap();
        assert_eq!(back, a);
    }
}
