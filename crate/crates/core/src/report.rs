//! Tables derived from a calibration artifact: implied survival
//! probabilities, implied life expectancies, improvement rates, prices at a
//! frozen term-structure state, and model yields.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::calibration::{CalibrationArtifact, CalibrationError, CalibrationResult};
use crate::data::{first_week_in_month, week_index, week_start_date, Gender};
use crate::mortality::MortalityError;
use crate::pricing::{AnnuityContract, PricingConfig, PricingError};
use crate::termstructure::{CirCurve, DiscountCurve, TermModel, WEEKS_PER_YEAR};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot parse date `{0}` (expected YYYY-MM-DD, YYYY-MM or `Month YYYY`)")]
    Date(String),
    #[error("invalid request: {0}")]
    Request(String),
    #[error(transparent)]
    Artifact(#[from] CalibrationError),
    #[error(transparent)]
    Mortality(#[from] MortalityError),
    #[error(transparent)]
    Pricing(#[from] PricingError),
    #[error("external series: {0}")]
    External(String),
    #[error("output: {0}")]
    Output(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportKind {
    Isp,
    Ile,
    Yields,
    PricesFixedRate,
    Improvement,
}

impl FromStr for ReportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "isp" => Ok(ReportKind::Isp),
            "ile" => Ok(ReportKind::Ile),
            "yields" => Ok(ReportKind::Yields),
            "prices-fixed-rate" => Ok(ReportKind::PricesFixedRate),
            "improvement" => Ok(ReportKind::Improvement),
            other => Err(format!("unknown report kind `{other}`")),
        }
    }
}

/// A report date and the week it resolves to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportDate {
    pub label: String,
    pub week: i64,
}

const MONTHS: [&str; 12] = [
    "january", "february", "march", "april", "may", "june", "july", "august", "september", "october", "november", "december",
];

/// `YYYY-MM-DD` maps by the floor rule; `YYYY-MM` and `September 2004`
/// map to the first week starting in that month.
pub fn parse_report_date(text: &str, start: NaiveDate) -> Result<ReportDate, ReportError> {
    let s = text.trim();
    let bad = || ReportError::Date(text.to_string());
    let month_week = |year: i32, month: u32| {
        if NaiveDate::from_ymd_opt(year, month, 1).is_none() {
            return Err(bad());
        }
        // months before the start have no in-panel week; use their first day
        first_week_in_month(start, year, month)
            .or_else(|| NaiveDate::from_ymd_opt(year, month, 1).map(|d| week_index(start, d)))
            .ok_or_else(bad)
    };
    let week = if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        week_index(start, d)
    } else if let Some((y, m)) = s.split_once('-').filter(|(y, m)| y.len() == 4 && !m.is_empty() && m.len() <= 2) {
        month_week(y.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?)?
    } else {
        let mut parts = s.split_whitespace();
        let (Some(name), Some(year), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        let name = name.to_ascii_lowercase();
        let month = MONTHS
            .iter()
            .position(|m| *m == name || (name.len() >= 3 && m.starts_with(&name)))
            .ok_or_else(bad)? as u32
            + 1;
        month_week(year.parse().map_err(|_| bad())?, month)?
    };
    Ok(ReportDate { label: s.to_string(), week })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRequest {
    pub kind: ReportKind,
    pub ages: Vec<f64>,
    pub target_age: f64,
    pub dates: Vec<ReportDate>,
    pub reference: Option<ReportDate>,
    pub guarantee: f64,
    pub maturities: Vec<f64>,
    /// Restrict to these genders; all fitted genders when empty.
    pub genders: Vec<Gender>,
}

impl ReportRequest {
    pub fn new(kind: ReportKind) -> Self {
        Self {
            kind,
            ages: vec![55.0, 65.0, 75.0],
            target_age: 90.0,
            dates: Vec::new(),
            reference: None,
            guarantee: 0.0,
            maturities: vec![1.0, 10.0, 30.0],
            genders: Vec::new(),
        }
    }

    fn fits<'a>(&self, artifact: &'a CalibrationArtifact) -> Vec<&'a CalibrationResult> {
        artifact.fits.iter().filter(|f| self.genders.is_empty() || self.genders.contains(&f.gender)).collect()
    }

    fn validate(&self) -> Result<(), ReportError> {
        if self.ages.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(ReportError::Request("ages must be positive".into()));
        }
        if self.kind == ReportKind::Isp && self.ages.iter().any(|a| *a > self.target_age) {
            return Err(ReportError::Request(format!("target age {} is below a requested age", self.target_age)));
        }
        Ok(())
    }
}

/// Column-ordered table; cells are JSON values so CSV and JSON render the
/// same content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ReportError> {
        let mut w = csv::Writer::from_writer(writer);
        let out = |e: csv::Error| ReportError::Output(e.to_string());
        w.write_record(&self.columns).map_err(out)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| match v {
                Value::String(s) => s.clone(),
                Value::Null => String::new(),
                other => other.to_string(),
            }))
            .map_err(out)?;
        }
        w.flush().map_err(|e| ReportError::Output(e.to_string()))
    }

    pub fn to_json(&self) -> Value {
        json!({ "columns": self.columns, "rows": self.rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<&Value>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| &r[i]).collect())
    }
}

fn date_cells(artifact: &CalibrationArtifact, d: &ReportDate) -> [Value; 3] {
    let first = week_start_date(artifact.start_date, d.week);
    [json!(d.label), json!(d.week), json!(format!("{:04}-{:02}-{:02}", first.year(), first.month(), first.day()))]
}

fn require_dates(req: &ReportRequest) -> Result<(), ReportError> {
    if req.dates.is_empty() {
        Err(ReportError::Request("at least one date is required".into()))
    } else {
        Ok(())
    }
}

/// Survival from each age to the target age, per fitted gender and date.
pub fn report_isp(req: &ReportRequest, artifact: &CalibrationArtifact) -> Result<Table, ReportError> {
    req.validate()?;
    require_dates(req)?;
    let mut t = Table::new(&["gender", "date", "week", "week_start", "projected", "age", "target_age", "isp"]);
    for fit in req.fits(artifact) {
        for d in &req.dates {
            for &age in &req.ages {
                let isp = fit.trend.survival_at_week(age, req.target_age - age, d.week as f64)?;
                let [label, week, first] = date_cells(artifact, d);
                let projected = d.week >= i64::from(artifact.week_count);
                t.rows.push(vec![json!(fit.gender), label, week, first, json!(projected), json!(age), json!(req.target_age), json!(isp)]);
            }
        }
    }
    Ok(t)
}

/// Life expectancy at each age, per fitted gender and date.
pub fn report_ile(req: &ReportRequest, artifact: &CalibrationArtifact) -> Result<Table, ReportError> {
    req.validate()?;
    require_dates(req)?;
    let mut t = Table::new(&["gender", "date", "week", "week_start", "projected", "age", "ile"]);
    for fit in req.fits(artifact) {
        for d in &req.dates {
            for &age in &req.ages {
                let ile = fit.trend.life_expectancy_at_week(age, d.week as f64)?;
                let [label, week, first] = date_cells(artifact, d);
                let projected = d.week >= i64::from(artifact.week_count);
                t.rows.push(vec![json!(fit.gender), label, week, first, json!(projected), json!(age), json!(ile)]);
            }
        }
    }
    Ok(t)
}

/// Weeks of life expectancy gained per calendar year between the first
/// date and each later date.
pub fn report_improvement(req: &ReportRequest, artifact: &CalibrationArtifact) -> Result<Table, ReportError> {
    req.validate()?;
    if req.dates.len() < 2 {
        return Err(ReportError::Request("improvement needs a base date and at least one later date".into()));
    }
    let base = &req.dates[0];
    let mut t = Table::new(&["gender", "age", "from", "to", "ile_from", "ile_to", "years", "weeks_per_year"]);
    for fit in req.fits(artifact) {
        for d in &req.dates[1..] {
            if d.week == base.week {
                return Err(ReportError::Request(format!("`{}` and `{}` resolve to the same week", base.label, d.label)));
            }
            for &age in &req.ages {
                let a = fit.trend.life_expectancy_at_week(age, base.week as f64)?;
                let b = fit.trend.life_expectancy_at_week(age, d.week as f64)?;
                let years = (d.week - base.week) as f64 / WEEKS_PER_YEAR;
                let rate = (b - a) / years * WEEKS_PER_YEAR;
                t.rows.push(vec![
                    json!(fit.gender),
                    json!(age),
                    json!(base.label),
                    json!(d.label),
                    json!(a),
                    json!(b),
                    json!(years),
                    json!(rate),
                ]);
            }
        }
    }
    Ok(t)
}

fn spot_at(rates: &BTreeMap<u32, f64>, week: i64) -> Result<f64, ReportError> {
    u32::try_from(week)
        .ok()
        .and_then(|w| rates.get(&w).copied())
        .ok_or_else(|| ReportError::Request(format!("no calibrated spot rate for week {week}")))
}

/// Annuity factors with each date's mortality but the reference week's
/// term-structure state (its spot rate on that gender's curve).
pub fn report_fixed_rate_prices(req: &ReportRequest, artifact: &CalibrationArtifact) -> Result<Table, ReportError> {
    req.validate()?;
    require_dates(req)?;
    let reference = req.reference.as_ref().unwrap_or(&req.dates[0]);
    let r0 = spot_at(artifact.spot_rates(), reference.week)?;
    let cfg = PricingConfig::default();
    let mut t = Table::new(&["gender", "date", "week", "week_start", "age", "guarantee", "reference_week", "reference_rate", "factor", "ratio_to_reference"]);
    for fit in req.fits(artifact) {
        let term = fit.term_model();
        for &age in &req.ages {
            let price = |week: i64| {
                let c = AnnuityContract::new(age, req.guarantee, week as f64);
                crate::data::model_factor(&term, &fit.trend, &c, r0, &cfg)
            };
            let base = price(reference.week)?;
            for d in &req.dates {
                let f = price(d.week)?;
                let [label, week, first] = date_cells(artifact, d);
                t.rows.push(vec![
                    json!(fit.gender),
                    label,
                    week,
                    first,
                    json!(age),
                    json!(req.guarantee),
                    json!(reference.week),
                    json!(r0),
                    json!(f),
                    json!(f / base),
                ]);
            }
        }
    }
    Ok(t)
}

/// `date,rate` rows, e.g. a mortgage-rate series, in decimal units.
pub fn load_external_series(path: &Path) -> Result<Vec<(NaiveDate, f64)>, ReportError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| ReportError::External(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| ReportError::External(e.to_string()))?;
        let line = i + 2;
        let date = NaiveDate::parse_from_str(rec.get(0).unwrap_or("").trim(), "%Y-%m-%d")
            .map_err(|_| ReportError::External(format!("line {line}: bad date")))?;
        let rate: f64 = rec
            .get(1)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| ReportError::External(format!("line {line}: bad rate")))?;
        out.push((date, rate));
    }
    Ok(out)
}

/// Model yields per week at each maturity, averaged over the fitted genders
/// (each gender's curve started from its own spot rate). An external series
/// is joined by week (last observation in the week) with spreads
/// `external − yield`.
pub fn report_yields(
    req: &ReportRequest,
    artifact: &CalibrationArtifact,
    external: Option<&[(NaiveDate, f64)]>,
) -> Result<Table, ReportError> {
    if req.maturities.is_empty() || req.maturities.iter().any(|m| !(*m > 0.0)) {
        return Err(ReportError::Request("maturities must be positive".into()));
    }
    let fits = req.fits(artifact);
    if fits.is_empty() {
        return Err(ReportError::Request("no fits for the requested genders".into()));
    }
    let ext: BTreeMap<i64, f64> = external
        .unwrap_or(&[])
        .iter()
        .map(|(d, r)| (week_index(artifact.start_date, *d), *r))
        .collect();
    let mut cols: Vec<String> = vec!["week".into(), "week_start".into(), "spot_rate".into()];
    cols.extend(req.maturities.iter().map(|m| format!("yield_{m}y")));
    if external.is_some() {
        cols.push("external_rate".into());
        cols.extend(req.maturities.iter().map(|m| format!("spread_{m}y")));
    }
    let mut t = Table { columns: cols, rows: Vec::new() };
    let mut weeks: Vec<u32> = fits[0].spot_rates.keys().copied().collect();
    if !req.dates.is_empty() {
        weeks.retain(|w| req.dates.iter().any(|d| d.week == i64::from(*w)));
    }
    for w in weeks {
        let mut spot_sum = 0.0;
        let mut sums = vec![0.0; req.maturities.len()];
        for fit in &fits {
            let r = *fit.spot_rates.get(&w).ok_or(CalibrationError::MissingWeek { week: w })?;
            spot_sum += r;
            for (k, m) in req.maturities.iter().enumerate() {
                sums[k] += match fit.term_model() {
                    TermModel::Flat => r,
                    TermModel::Cir(p) => CirCurve::new(p, r).and_then(|c| c.zero_yield(*m)).map_err(|e| ReportError::Request(e.to_string()))?,
                };
            }
        }
        let n = fits.len() as f64;
        let first = week_start_date(artifact.start_date, i64::from(w));
        let mut row = vec![json!(w), json!(first.format("%Y-%m-%d").to_string()), json!(spot_sum / n)];
        let ys: Vec<f64> = sums.iter().map(|s| s / n).collect();
        row.extend(ys.iter().map(|y| json!(y)));
        if external.is_some() {
            match ext.get(&i64::from(w)) {
                Some(e) => {
                    row.push(json!(e));
                    row.extend(ys.iter().map(|y| json!(e - y)));
                }
                None => row.extend(std::iter::repeat_n(Value::Null, 1 + ys.len())),
            }
        }
        t.rows.push(row);
    }
    Ok(t)
}

pub fn run_report(
    req: &ReportRequest,
    artifact: &CalibrationArtifact,
    external: Option<&[(NaiveDate, f64)]>,
) -> Result<Table, ReportError> {
    match req.kind {
        ReportKind::Isp => report_isp(req, artifact),
        ReportKind::Ile => report_ile(req, artifact),
        ReportKind::Improvement => report_improvement(req, artifact),
        ReportKind::PricesFixedRate => report_fixed_rate_prices(req, artifact),
        ReportKind::Yields => report_yields(req, artifact, external),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{Diagnostics, FitSpec, InitialGuess, ModelKind, StopReason};
    use crate::mortality::MortalityTrend;
    use crate::termstructure::CirParams;

    fn start() -> NaiveDate {
        NaiveDate::from_ymd_opt(2004, 9, 15).unwrap()
    }

    fn fake_fit(gender: Gender, trend: MortalityTrend, cir: Option<CirParams>, rates: BTreeMap<u32, f64>) -> CalibrationResult {
        let model = if cir.is_some() { ModelKind::Cir } else { ModelKind::Flat };
        CalibrationResult {
            gender,
            model,
            trend,
            cir,
            spot_rates: rates,
            sse: 0.0,
            residuals: Vec::new(),
            n_obs: 0,
            n_params: 0,
            iterations: 0,
            sse_trace: Vec::new(),
            converged: true,
            diagnostics: Diagnostics {
                condition_number: 1.0,
                jacobian_rank_flag: false,
                std_errors: BTreeMap::new(),
                std_errors_trusted: true,
                spot_rates_at_zero: 0,
                stop_reason: StopReason::ExactFit,
                warnings: Vec::new(),
            },
            spec: FitSpec::new(model, gender, InitialGuess::generic(model)),
        }
    }

    fn cir_artifact() -> CalibrationArtifact {
        let rates: BTreeMap<u32, f64> = (0..478).map(|w| (w, 0.034205)).collect();
        let f = fake_fit(
            Gender::Female,
            MortalityTrend::new(6.724e-10, 91.68, 8.201e-4, 9.174, 1.467e-3),
            Some(CirParams::new(1.804e-3, 7.210e-3, 4.093e-2).unwrap()),
            rates.clone(),
        );
        let m = fake_fit(
            Gender::Male,
            MortalityTrend::new(2.376e-10, 88.13, 3.061e-3, 10.37, 1.127e-3),
            Some(CirParams::new(1.731e-3, 3.731e-3, 4.341e-2).unwrap()),
            rates,
        );
        CalibrationArtifact { start_date: start(), week_count: 478, model: ModelKind::Cir, fits: vec![f, m], averaged_spot_rates: None }
    }

    fn dates(labels: &[&str]) -> Vec<ReportDate> {
        labels.iter().map(|l| parse_report_date(l, start()).unwrap()).collect()
    }

    #[test]
    fn date_forms() {
        assert_eq!(parse_report_date("September 2004", start()).unwrap().week, 0);
        assert_eq!(parse_report_date("2004-09", start()).unwrap().week, 0);
        assert_eq!(parse_report_date("2004-09-21", start()).unwrap().week, 0);
        assert_eq!(parse_report_date("2004-09-22", start()).unwrap().week, 1);
        let nov = parse_report_date("Nov 2013", start()).unwrap().week;
        assert_eq!(nov, parse_report_date("2013-11", start()).unwrap().week);
        assert_eq!(week_start_date(start(), nov).month(), 11);
        assert!(parse_report_date("Smarch 2004", start()).is_err());
        assert!(parse_report_date("2004-13", start()).is_err());
    }

    #[test]
    fn isp_table_values() {
        let mut req = ReportRequest::new(ReportKind::Isp);
        req.ages = vec![75.0];
        req.dates = dates(&["September 2004"]);
        req.genders = vec![Gender::Male];
        let t = report_isp(&req, &cir_artifact()).unwrap();
        let isp = t.column("isp").unwrap()[0].as_f64().unwrap();
        assert!((isp - 0.401).abs() < 0.002);

        req.ages = vec![90.0];
        let t = report_isp(&req, &cir_artifact()).unwrap();
        assert_eq!(t.column("isp").unwrap()[0].as_f64().unwrap(), 1.0);
        req.ages = vec![95.0];
        assert!(report_isp(&req, &cir_artifact()).is_err());
    }

    #[test]
    fn isp_non_increasing_in_target() {
        let a = cir_artifact();
        let mut prev = 1.0;
        for target in [70.0, 80.0, 90.0, 100.0] {
            let mut req = ReportRequest::new(ReportKind::Isp);
            req.ages = vec![65.0];
            req.target_age = target;
            req.dates = dates(&["2010-01"]);
            let t = report_isp(&req, &a).unwrap();
            let v = t.column("isp").unwrap()[0].as_f64().unwrap();
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn ile_and_improvement() {
        let a = cir_artifact();
        let mut req = ReportRequest::new(ReportKind::Ile);
        req.ages = vec![75.0];
        req.dates = dates(&["September 2004", "November 2013"]);
        req.genders = vec![Gender::Male];
        let t = report_ile(&req, &a).unwrap();
        let v: Vec<f64> = t.column("ile").unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert!((v[0] - 13.09).abs() < 0.02);
        assert!((v[1] - 14.28).abs() < 0.05);
        req.kind = ReportKind::Improvement;
        let t = report_improvement(&req, &a).unwrap();
        let rate = t.column("weeks_per_year").unwrap()[0].as_f64().unwrap();
        assert!((rate - 6.78).abs() < 0.15);
    }

    #[test]
    fn fixed_rate_prices() {
        let a = cir_artifact();
        let mut req = ReportRequest::new(ReportKind::PricesFixedRate);
        req.ages = vec![65.0];
        req.dates = dates(&["September 2004", "November 2013"]);
        req.genders = vec![Gender::Male];
        let t = report_fixed_rate_prices(&req, &a).unwrap();
        let f: Vec<f64> = t.column("factor").unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert!((f[0] - 12.73).abs() < 0.15);
        let ratio = f[1] / f[0];
        assert!((ratio - 1.033).abs() < 0.005, "{ratio}");
    }

    #[test]
    fn zero_drift_prices_do_not_move() {
        let mut a = cir_artifact();
        for f in &mut a.fits {
            f.trend = f.trend.without_drift();
        }
        let mut req = ReportRequest::new(ReportKind::PricesFixedRate);
        req.dates = dates(&["September 2004", "2010-06-01", "January 2020"]);
        let t = report_fixed_rate_prices(&req, &a).unwrap();
        for v in t.column("ratio_to_reference").unwrap() {
            assert_eq!(v.as_f64().unwrap(), 1.0);
        }
    }

    #[test]
    fn flat_artifact_yields_equal_spot() {
        let rates = BTreeMap::from([(0, 0.03), (1, 0.031)]);
        let fit = fake_fit(Gender::Female, MortalityTrend::new(1e-3, 90.0, 0.0, 10.0, 0.0), None, rates);
        let a = CalibrationArtifact { start_date: start(), week_count: 2, model: ModelKind::Flat, fits: vec![fit], averaged_spot_rates: None };
        let t = report_yields(&ReportRequest::new(ReportKind::Yields), &a, None).unwrap();
        for row in &t.rows {
            let r = row[2].as_f64().unwrap();
            for y in &row[3..] {
                assert_eq!(y.as_f64().unwrap(), r);
            }
        }
    }

    #[test]
    fn short_maturity_yield_tends_to_spot() {
        let a = cir_artifact();
        let mut req = ReportRequest::new(ReportKind::Yields);
        req.maturities = vec![1e-6];
        let t = report_yields(&req, &a, None).unwrap();
        let row = &t.rows[0];
        assert!((row[3].as_f64().unwrap() - row[2].as_f64().unwrap()).abs() < 1e-7);
    }

    #[test]
    fn external_join_and_csv_is_deterministic() {
        let a = cir_artifact();
        let ext = vec![(start(), 0.058), (start() + chrono::Duration::days(7), 0.059)];
        let t = report_yields(&ReportRequest::new(ReportKind::Yields), &a, Some(&ext)).unwrap();
        assert!(t.columns.contains(&"spread_30y".to_string()));
        assert!(t.rows[2].last().unwrap().is_null());
        let mut one = Vec::new();
        let mut two = Vec::new();
        t.write_csv(&mut one).unwrap();
        report_yields(&ReportRequest::new(ReportKind::Yields), &a, Some(&ext)).unwrap().write_csv(&mut two).unwrap();
        assert_eq!(one, two);
    }
}
