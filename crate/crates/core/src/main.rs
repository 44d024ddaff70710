use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use implied_longevity::calibration::{
    self, ftest, CalibrationArtifact, FdScheme, FitSpec, InitialGuess, ModelKind, SolverMode,
};
use implied_longevity::data::{
    self, generate_panel, load_panel, save_panel, spread_missing_weeks, synthetic_rate_path, GenderModel,
    GeneratorSpec, LoadOptions, QuoteGrid,
};
use implied_longevity::mortality::MortalityTrend;
use implied_longevity::pricing::{self, AnnuityContract, PricingConfig};
use implied_longevity::report::{self, parse_report_date, ReportKind, ReportRequest, Table};
use implied_longevity::termstructure::{CirParams, TermModel};
use implied_longevity::Gender;

#[derive(Parser)]
#[command(name = "implied-longevity", version, about = "Implied mortality and life expectancy from annuity quotes")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Input file (panel CSV or calibration artifact, depending on the verb)
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Output file; stdout when omitted
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[arg(long, global = true, value_enum, default_value_t = ModelArg::Flat)]
    model: ModelArg,
    #[arg(long, global = true, value_enum, default_value_t = GenderArg::Both)]
    gender: GenderArg,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Flat,
    Cir,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Flat => ModelKind::Flat,
            ModelArg::Cir => ModelKind::Cir,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GenderArg {
    #[value(alias = "female")]
    F,
    #[value(alias = "male")]
    M,
    Both,
}

impl GenderArg {
    fn genders(self) -> Vec<Gender> {
        match self {
            GenderArg::F => vec![Gender::Female],
            GenderArg::M => vec![Gender::Male],
            GenderArg::Both => Gender::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Isp,
    Ile,
    Yields,
    PricesFixedRate,
    Improvement,
}

impl From<KindArg> for ReportKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Isp => ReportKind::Isp,
            KindArg::Ile => ReportKind::Ile,
            KindArg::Yields => ReportKind::Yields,
            KindArg::PricesFixedRate => ReportKind::PricesFixedRate,
            KindArg::Improvement => ReportKind::Improvement,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic quote panel from known parameters
    Generate(GenerateArgs),
    /// Fit a quote panel and write a calibration artifact
    Calibrate(CalibrateArgs),
    /// Price one contract with a calibration artifact
    Price(PriceArgs),
    /// Tables derived from a calibration artifact
    Report(ReportArgs),
    /// Partial F-test for mortality drift
    Ftest(FtestArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 478)]
    weeks: u32,
    /// Weeks dropped from the panel, spread evenly
    #[arg(long, default_value_t = 9)]
    missing: u32,
    /// Standard deviation of factor noise
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// JSON file with `female` / `male` entries of `{trend, term}`
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    ages: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',')]
    guarantees: Option<Vec<u32>>,
    #[arg(long, default_value = "2004-09-15")]
    start_date: NaiveDate,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, value_enum, default_value_t = SolverArg::Nested)]
    solver: SolverArg,
    /// Finite-difference points (3 or 5)
    #[arg(long, value_enum, default_value_t = FdArg::Three)]
    fd: FdArg,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    /// JSON file with `female` / `male` initial guesses
    #[arg(long)]
    initial: Option<PathBuf>,
    /// Fix m1 = b1 = 0
    #[arg(long)]
    restrict_drift: bool,
    #[arg(long)]
    no_positivity: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FdArg {
    #[value(name = "3")]
    Three,
    #[value(name = "5")]
    Five,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Nested,
    Joint,
}

#[derive(Args)]
struct PriceArgs {
    #[arg(long)]
    age: f64,
    #[arg(long, default_value_t = 0.0)]
    guarantee: f64,
    /// Purchase date (YYYY-MM-DD, YYYY-MM or `Month YYYY`)
    #[arg(long)]
    date: String,
    /// Spot rate; defaults to the calibrated rate of the date's week
    #[arg(long)]
    rate: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long, value_delimiter = ',', default_value = "55,65,75")]
    ages: Vec<f64>,
    #[arg(long, default_value_t = 90.0)]
    target_age: f64,
    /// Report date; repeat for several
    #[arg(long = "date")]
    dates: Vec<String>,
    /// Week whose term-structure state is frozen (prices-fixed-rate)
    #[arg(long)]
    reference_date: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    guarantee: f64,
    #[arg(long, value_delimiter = ',', default_value = "1,10,30")]
    maturities: Vec<f64>,
    /// `date,rate` CSV joined against model yields
    #[arg(long)]
    external: Option<PathBuf>,
}

#[derive(Args)]
struct FtestArgs {
    /// Use these sums of squares instead of fitting a panel
    #[arg(long, requires_all = ["sse_full", "n", "p", "g", "k"])]
    sse_restricted: Option<f64>,
    #[arg(long)]
    sse_full: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
}

#[derive(Debug)]
struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl ToString) -> Self {
        Self { kind, message: message.to_string() }
    }
}

macro_rules! from_error {
    ($t:ty, $kind:literal) => {
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new($kind, e)
            }
        }
    };
}

from_error!(data::DataError, "data");
from_error!(calibration::CalibrationError, "calibration");
from_error!(report::ReportError, "report");
from_error!(pricing::PricingError, "pricing");
from_error!(io::Error, "io");
from_error!(serde_json::Error, "json");

fn need_input(g: &Global) -> Result<&Path, CliError> {
    g.input.as_deref().ok_or_else(|| CliError::new("usage", "--input is required"))
}

fn output(g: &Global) -> Result<Box<dyn Write>, CliError> {
    Ok(match &g.output {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| CliError::new("io", format!("{}: {e}", p.display())))?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn emit(g: &Global, table: &Table) -> Result<(), CliError> {
    let mut out = output(g)?;
    match g.format {
        Format::Csv => table.write_csv(&mut out)?,
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, &table.to_json())?;
            writeln!(out)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn default_models(model: ModelKind) -> BTreeMap<Gender, GenderModel> {
    match model {
        ModelKind::Flat => BTreeMap::from([
            (Gender::Female, GenderModel { trend: MortalityTrend::new(1.622e-3, 92.60, 1.044e-3, 9.058, 4.716e-3), term: TermModel::Flat }),
            (Gender::Male, GenderModel { trend: MortalityTrend::new(4.578e-4, 88.47, 2.322e-3, 10.84, 4.268e-3), term: TermModel::Flat }),
        ]),
        ModelKind::Cir => BTreeMap::from([
            (
                Gender::Female,
                GenderModel {
                    trend: MortalityTrend::new(6.724e-10, 91.68, 8.201e-4, 9.174, 1.467e-3),
                    term: TermModel::Cir(CirParams::new(1.804e-3, 7.210e-3, 4.093e-2).expect("valid")),
                },
            ),
            (
                Gender::Male,
                GenderModel {
                    trend: MortalityTrend::new(2.376e-10, 88.13, 3.061e-3, 10.37, 1.127e-3),
                    term: TermModel::Cir(CirParams::new(1.731e-3, 3.731e-3, 4.341e-2).expect("valid")),
                },
            ),
        ]),
    }
}

#[derive(Deserialize)]
struct PerGender<T> {
    female: Option<T>,
    male: Option<T>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn generate(g: &Global, a: &GenerateArgs) -> Result<(), CliError> {
    let model = ModelKind::from(g.model);
    let mut models = default_models(model);
    if let Some(path) = &a.params {
        let given: PerGender<GenderModel> = read_json(path)?;
        models.clear();
        models.extend(given.female.map(|m| (Gender::Female, m)));
        models.extend(given.male.map(|m| (Gender::Male, m)));
    }
    let missing = spread_missing_weeks(a.weeks, a.missing);
    let mut spec = GeneratorSpec::new(synthetic_rate_path((0..a.weeks).filter(|w| !missing.contains(w))));
    spec.start_date = a.start_date;
    for gender in g.gender.genders() {
        let m = models.get(&gender).copied();
        match gender {
            Gender::Female => spec.female = m,
            Gender::Male => spec.male = m,
        }
    }
    let defaults = QuoteGrid::default();
    spec.grid = QuoteGrid {
        ages: a.ages.clone().unwrap_or(defaults.ages),
        guarantees: a.guarantees.clone().unwrap_or(defaults.guarantees),
    };
    spec.noise_sd = a.noise;
    spec.seed = g.seed;
    let panel = generate_panel(&spec)?;
    match &g.output {
        Some(path) => save_panel(&panel, path)?,
        None => data::write_panel(&panel, io::stdout().lock())?,
    }
    Ok(())
}

fn fit_specs(g: &Global, a: &CalibrateArgs) -> Result<Vec<FitSpec>, CliError> {
    let model = ModelKind::from(g.model);
    let initial: PerGender<InitialGuess> = match &a.initial {
        Some(p) => read_json(p)?,
        None => PerGender { female: None, male: None },
    };
    Ok(g
        .gender
        .genders()
        .into_iter()
        .map(|gender| {
            let init = match gender {
                Gender::Female => initial.female,
                Gender::Male => initial.male,
            }
            .unwrap_or_else(|| InitialGuess::generic(model));
            let mut spec = FitSpec::new(model, gender, init);
            spec.solver = match a.solver {
                SolverArg::Nested => SolverMode::Nested,
                SolverArg::Joint => SolverMode::Joint,
            };
            spec.fd_scheme = match a.fd {
                FdArg::Three => FdScheme::ThreePoint,
                FdArg::Five => FdScheme::FivePoint,
            };
            spec.tolerances.max_iterations = a.max_iter;
            spec.restrict_drift = a.restrict_drift;
            spec.positivity = !a.no_positivity;
            spec
        })
        .collect())
}

fn calibrate(g: &Global, a: &CalibrateArgs) -> Result<(), CliError> {
    let panel = load_panel(need_input(g)?, &LoadOptions::default())?;
    let mut fits = Vec::new();
    for spec in fit_specs(g, a)? {
        let fit = calibration::fit(&panel, &spec)?;
        for w in &fit.diagnostics.warnings {
            eprintln!("{}", json!({ "warning": w, "gender": fit.gender }));
        }
        fits.push(fit);
    }
    let artifact = CalibrationArtifact::new(&panel, ModelKind::from(g.model), fits)?;
    match &g.output {
        Some(path) => artifact.save(path)?,
        None => {
            serde_json::to_writer_pretty(io::stdout().lock(), &artifact)?;
            println!();
        }
    }
    Ok(())
}

fn price(g: &Global, a: &PriceArgs) -> Result<(), CliError> {
    let artifact = CalibrationArtifact::load(need_input(g)?)?;
    let date = parse_report_date(&a.date, artifact.start_date)?;
    let cfg = PricingConfig::default();
    let mut table = Table {
        columns: ["gender", "date", "week", "age", "guarantee", "rate", "factor", "monthly_income_per_100k"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        rows: Vec::new(),
    };
    let wanted = g.gender.genders();
    for fit in artifact.fits.iter().filter(|f| wanted.contains(&f.gender)) {
        let rate = match a.rate {
            Some(r) => r,
            None => u32::try_from(date.week)
                .ok()
                .and_then(|w| artifact.spot_rates().get(&w).copied())
                .ok_or_else(|| CliError::new("usage", format!("no calibrated rate for week {}; pass --rate", date.week)))?,
        };
        let contract = AnnuityContract::new(a.age, a.guarantee, date.week as f64);
        let factor = data::model_factor(&fit.term_model(), &fit.trend, &contract, rate, &cfg)?;
        let income = pricing::factor_to_monthly_income(factor, data::STANDARD_PREMIUM)?;
        table.rows.push(vec![
            json!(fit.gender),
            json!(date.label),
            json!(date.week),
            json!(a.age),
            json!(a.guarantee),
            json!(rate),
            json!(factor),
            json!(income),
        ]);
    }
    emit(g, &table)
}

fn report_cmd(g: &Global, a: &ReportArgs) -> Result<(), CliError> {
    let artifact = CalibrationArtifact::load(need_input(g)?)?;
    let mut req = ReportRequest::new(a.kind.into());
    req.ages = a.ages.clone();
    req.target_age = a.target_age;
    req.dates = a.dates.iter().map(|d| parse_report_date(d, artifact.start_date)).collect::<Result<_, _>>()?;
    req.reference = a.reference_date.as_deref().map(|d| parse_report_date(d, artifact.start_date)).transpose()?;
    req.guarantee = a.guarantee;
    req.maturities = a.maturities.clone();
    req.genders = g.gender.genders();
    let external = a.external.as_deref().map(report::load_external_series).transpose()?;
    let table = report::run_report(&req, &artifact, external.as_deref())?;
    emit(g, &table)
}

const FTEST_COLUMNS: [&str; 13] = [
    "gender", "n", "p", "g", "k", "sse_restricted", "sse_full", "f", "critical_05", "critical_01", "reject_05", "reject_01", "p_value",
];

fn ftest_row(gender: Option<Gender>, r: &ftest::FTestReport) -> Vec<serde_json::Value> {
    vec![
        json!(gender),
        json!(r.n),
        json!(r.p),
        json!(r.g),
        json!(r.k),
        json!(r.sse_restricted),
        json!(r.sse_full),
        json!(r.f),
        json!(r.critical_05),
        json!(r.critical_01),
        json!(r.reject_05),
        json!(r.reject_01),
        json!(r.p_value),
    ]
}

fn ftest_cmd(g: &Global, a: &FtestArgs) -> Result<(), CliError> {
    let mut table = Table { columns: FTEST_COLUMNS.iter().map(|s| s.to_string()).collect(), rows: Vec::new() };
    if let (Some(sr), Some(sf), Some(n), Some(p), Some(gg), Some(k)) = (a.sse_restricted, a.sse_full, a.n, a.p, a.g, a.k) {
        let r = calibration::partial_f_test(sr, sf, n, p, gg, k)?;
        table.rows.push(ftest_row(None, &r));
        return emit(g, &table);
    }
    let panel = load_panel(need_input(g)?, &LoadOptions::default())?;
    let model = ModelKind::from(g.model);
    for gender in g.gender.genders() {
        if panel.quotes_for(gender).next().is_none() {
            continue;
        }
        let mut spec = FitSpec::new(model, gender, InitialGuess::generic(model));
        spec.tolerances.max_iterations = a.max_iter;
        let full = calibration::fit(&panel, &spec)?;
        let restricted = calibration::fit(&panel, &FitSpec { restrict_drift: true, ..spec })?;
        let r = ftest::drift_test(&full, &restricted)?;
        table.rows.push(ftest_row(Some(gender), &r));
    }
    emit(g, &table)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => generate(&cli.global, a),
        Command::Calibrate(a) => calibrate(&cli.global, a),
        Command::Price(a) => price(&cli.global, a),
        Command::Report(a) => report_cmd(&cli.global, a),
        Command::Ftest(a) => ftest_cmd(&cli.global, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.message, "kind": e.kind }));
            ExitCode::FAILURE
        }
    }
}
