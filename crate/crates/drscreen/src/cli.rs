//! Command line. Exit codes: 0 success, 1 reproduction mismatch, 2 input
//! error, 3 environment error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use drscreen_core::aggregation::{screen_cohort, Predictions};
use drscreen_core::cohort::{generate_synthetic, Cohort, SyntheticParams};
use drscreen_core::evaluation::evaluate;
use drscreen_core::fairness::{fairness_report, DiBounds, PairGroupSpec};
use drscreen_core::inference::{BackendManifest, InferenceBackend, ModelId, ModelThresholds, StubBackend};
use drscreen_core::metrics::{compute_metrics, ConfusionMatrix, Fraction};
use drscreen_core::reference::{reference_rows, ReferenceRow};
use drscreen_core::simulation::{simulate_predictions, FlipRates, PatientClass};
use drscreen_core::workflow::{MdDecision, PresetMd, ScreeningPolicy};

use crate::http_backend::HttpBackend;
use crate::io::{self, IoError};
use crate::report::{self, EvaluationJson, FairnessRow, ReproducedRow};
use crate::select_scenario;
use crate::service::{self, AppState, Dataset, ServiceConfig, FIXTURE_DATASET};
use crate::store::Store;

pub const EXIT_OK: i32 = 0;
pub const EXIT_MISMATCH: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_ENV: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "drscreen", version, about = "Diabetic-retinopathy referral screening and its evaluation harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Recompute the published comparison tables from their confusion matrices.
    Reproduce(ReproduceArgs),
    /// Screen a cohort through recorded predictions and report one scenario.
    Evaluate(EvaluateArgs),
    /// Fairness row for a labelled pairs file.
    Fairness(FairnessArgs),
    /// Write a synthetic cohort and corrupted oracle predictions.
    Simulate(SimulateArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    /// Single matrix instead of the embedded rows, e.g. TP=49,FP=28,FN=5,TN=715.
    #[arg(long, value_name = "SPEC")]
    pub matrix: Option<String>,
    /// JSON file of reference rows replacing the embedded ones.
    #[arg(long, value_name = "PATH", conflicts_with = "matrix")]
    pub fixtures: Option<PathBuf>,
    /// Directory for reproduce.json.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "PATH")]
    pub cohort: PathBuf,
    /// Predictions CSV (`image_id,model,label,score`) or manifest JSON.
    #[arg(long, value_name = "PATH")]
    pub predictions: PathBuf,
    /// Experiment name (experiment-1 .. experiment-9) or scenario spec.
    #[arg(long, value_name = "NAME|SPEC", default_value = "experiment-1")]
    pub scenario: String,
    #[command(flatten)]
    pub group: GroupArgs,
    /// Per-model thresholds, e.g. MQ=0.6,M1=0.45.
    #[arg(long, value_name = "SPEC")]
    pub thresholds: Option<String>,
    /// Directory for report.json, pairs.csv, roc.csv and fairness.csv.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GroupArgs {
    /// Compared attribute: sex, age, projection or laterality.
    #[arg(long, requires_all = ["unprivileged", "privileged"])]
    pub attribute: Option<String>,
    #[arg(long, requires = "attribute")]
    pub unprivileged: Option<String>,
    #[arg(long, requires = "attribute")]
    pub privileged: Option<String>,
}

impl GroupArgs {
    fn spec(&self) -> Result<Option<PairGroupSpec>, CliError> {
        match (&self.attribute, &self.unprivileged, &self.privileged) {
            (Some(a), Some(u), Some(p)) => PairGroupSpec::parse(a, u, p).map(Some).map_err(input),
            _ => Ok(None),
        }
    }
}

#[derive(Debug, Args)]
pub struct FairnessArgs {
    /// CSV with unit_id,truth,prediction,sex,age,projection,laterality.
    #[arg(long, value_name = "PATH")]
    pub pairs: PathBuf,
    #[arg(long)]
    pub attribute: String,
    #[arg(long)]
    pub unprivileged: String,
    #[arg(long)]
    pub privileged: String,
    /// Acceptable DI band, e.g. 4/5,5/4.
    #[arg(long, value_name = "LOW,HIGH")]
    pub bounds: Option<String>,
    /// Print the row as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
    /// CSV file for the row.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Synthetic parameters as JSON, or `table3` for the published marginals.
    #[arg(long, value_name = "PATH|table3", default_value = "table3")]
    pub params: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Share of each patient class to corrupt, e.g. FN=5/54,FP=0.04,UNG=0.
    #[arg(long, value_name = "SPEC", default_value = "")]
    pub flip_rates: String,
    #[arg(long, value_name = "SPEC")]
    pub thresholds: Option<String>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// `stub:PATH` (manifest JSON or predictions CSV) or `http:URL`.
    #[arg(long, value_name = "stub:PATH|http:URL")]
    pub backend: String,
    /// Directory for the event log and snapshot; in-memory when omitted.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Bearer token required on every route except /v1/health.
    #[arg(long, env = "DRSCREEN_TOKEN")]
    pub token: Option<String>,
    #[arg(long, value_name = "SPEC")]
    pub thresholds: Option<String>,
    /// Timeout for each HTTP backend call, in seconds.
    #[arg(long, default_value_t = 30)]
    pub backend_timeout: u64,
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

fn input(e: impl std::fmt::Display) -> CliError {
    CliError {
        code: EXIT_INPUT,
        message: e.to_string(),
    }
}

fn env(e: impl std::fmt::Display) -> CliError {
    CliError {
        code: EXIT_ENV,
        message: e.to_string(),
    }
}

fn io_input(what: &str) -> impl FnOnce(IoError) -> CliError + '_ {
    move |e| input(format!("{what}: [{}] {e}", e.code()))
}

/// Parse `args` (program name first) and run. Output goes to `out`,
/// diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = sink.write_all(text.as_bytes());
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Reproduce(a) => reproduce(&a, out),
        Command::Evaluate(a) => cmd_evaluate(&a, out),
        Command::Fairness(a) => cmd_fairness(&a, out),
        Command::Simulate(a) => simulate(&a, out),
        Command::Serve(a) => serve(&a, err),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(env)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| env(format!("{}: {e}", dir.display())))
}

fn write_err(e: IoError) -> CliError {
    env(e)
}

/// `TP=49,FP=28,FN=5,TN=715`, any order, all four cells.
pub fn parse_matrix(spec: &str) -> Result<ConfusionMatrix, String> {
    let mut cells = [None; 4];
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| format!("{part:?} is not NAME=COUNT"))?;
        let slot = match k.trim().to_ascii_uppercase().as_str() {
            "TN" => 0,
            "FP" => 1,
            "FN" => 2,
            "TP" => 3,
            other => return Err(format!("unknown cell {other:?}; expected TP, FP, FN, TN")),
        };
        let n: u64 = v.trim().parse().map_err(|_| format!("{part:?}: count must be a non-negative integer"))?;
        if cells[slot].replace(n).is_some() {
            return Err(format!("cell {} given twice", k.trim()));
        }
    }
    match cells {
        [Some(tn), Some(fp), Some(fn_), Some(tp)] => Ok(ConfusionMatrix::from_cells(tn, fp, fn_, tp)),
        _ => Err(format!("{spec:?} must give all of TP, FP, FN, TN")),
    }
}

/// `MQ=0.6,M1=0.45`; unnamed models keep 0.5.
pub fn parse_thresholds(spec: Option<&str>) -> Result<ModelThresholds, String> {
    let mut t = ModelThresholds::default();
    for part in spec.unwrap_or("").split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| format!("{part:?} is not MODEL=THRESHOLD"))?;
        let model: ModelId = k.trim().to_ascii_uppercase().parse().map_err(|e| format!("{e}"))?;
        let x: f64 = v.trim().parse().map_err(|_| format!("{part:?}: threshold must be a number"))?;
        if !(0.0..=1.0).contains(&x) {
            return Err(format!("{part:?}: threshold must lie in [0, 1]"));
        }
        t.set(model, x);
    }
    Ok(t)
}

fn parse_fraction(s: &str) -> Option<Fraction> {
    let s = s.trim();
    if let Some((n, d)) = s.split_once('/') {
        let (n, d): (u64, u64) = (n.trim().parse().ok()?, d.trim().parse().ok()?);
        return (d > 0).then(|| Fraction::new(n, d));
    }
    // Decimal: exact as a ratio of powers of ten.
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if frac.len() > 12 || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let scale = 10u64.pow(frac.len() as u32);
    let int: u64 = if int.is_empty() { 0 } else { int.parse().ok()? };
    let frac: u64 = if frac.is_empty() { 0 } else { frac.parse().ok()? };
    Some(Fraction::new(int.checked_mul(scale)?.checked_add(frac)?, scale))
}

/// `0.8,1.25` or `4/5,5/4`.
pub fn parse_bounds(spec: &str) -> Result<DiBounds, String> {
    let (lo, hi) = spec.split_once(',').ok_or_else(|| format!("{spec:?} is not LOW,HIGH"))?;
    let bad = || format!("{spec:?}: bounds must be non-negative numbers or fractions");
    let (lower, upper) = (parse_fraction(lo).ok_or_else(bad)?, parse_fraction(hi).ok_or_else(bad)?);
    if lower > upper {
        return Err(format!("{spec:?}: lower bound exceeds upper bound"));
    }
    Ok(DiBounds { lower, upper })
}

fn reproduce(a: &ReproduceArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    if let Some(spec) = &a.matrix {
        let m = parse_matrix(spec).map_err(input)?;
        let metrics = compute_metrics(&m).map_err(input)?;
        let line = format!(
            "{}  {}\n",
            report::matrix_line(&m),
            report::percent_line(&metrics.percentages())
        );
        write_out(out, &line)?;
        if let Some(dir) = &a.out {
            ensure_dir(dir)?;
            io::write_json(&dir.join("reproduce.json"), &crate::report::MetricsJson::from(&metrics))
                .map_err(write_err)?;
        }
        return Ok(EXIT_OK);
    }
    let rows: Vec<ReferenceRow> = match &a.fixtures {
        Some(path) => io::load_fixtures(path).map_err(io_input("fixtures"))?,
        None => reference_rows(),
    };
    let checked: Vec<ReproducedRow> = rows.iter().map(ReproducedRow::check).collect();
    write_out(out, &report::reproduce_table(&checked))?;
    if let Some(dir) = &a.out {
        ensure_dir(dir)?;
        io::write_json(&dir.join("reproduce.json"), &checked).map_err(write_err)?;
    }
    let failing = checked.iter().filter(|r| !r.mismatches.is_empty()).count();
    if failing > 0 {
        write_out(out, &format!("{failing} of {} rows differ from the published values\n", checked.len()))?;
        return Ok(EXIT_MISMATCH);
    }
    Ok(EXIT_OK)
}

fn load_predictions(path: &Path, thresholds: &ModelThresholds) -> Result<BackendManifest, IoError> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        io::load_manifest(path, thresholds)
    } else {
        io::load_predictions(path, thresholds)
    }
}

/// Screen `cohort` through recorded outputs; the MD gate resolves as
/// "proceed as ungradable" because nobody is there to answer it.
pub fn screen_recorded(cohort: &Cohort, manifest: BackendManifest, policy: &ScreeningPolicy) -> Result<Predictions, CliError> {
    let backend = StubBackend::new(manifest);
    screen_cohort(cohort, &backend, policy, &mut PresetMd(MdDecision::ProceedUngradable))
        .map(|(p, _)| p)
        .map_err(input)
}

fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let thresholds = parse_thresholds(a.thresholds.as_deref()).map_err(input)?;
    let (scenario, mut comparison) = select_scenario(&a.scenario).map_err(input)?;
    if let Some(g) = a.group.spec()? {
        comparison = Some(g);
    }
    let cohort = io::load_cohort(&a.cohort).map_err(io_input("cohort"))?;
    let manifest = load_predictions(&a.predictions, &thresholds).map_err(io_input("predictions"))?;
    let policy = ScreeningPolicy {
        thresholds,
        ..ScreeningPolicy::default()
    };
    let predictions = screen_recorded(&cohort, manifest, &policy)?;
    let ev = evaluate(&cohort, &predictions, &scenario, comparison.as_ref(), &DiBounds::default()).map_err(input)?;
    let json = EvaluationJson::from(&ev);
    write_out(out, &report::evaluation_text(&json))?;
    if let Some(dir) = &a.out {
        ensure_dir(dir)?;
        io::write_json(&dir.join("report.json"), &json).map_err(write_err)?;
        io::write_file(&dir.join("pairs.csv"), |w| io::write_pairs(w, &ev.pairs)).map_err(write_err)?;
        if let Some(roc) = &ev.roc {
            io::write_file(&dir.join("roc.csv"), |w| io::write_roc(w, roc)).map_err(write_err)?;
        }
        if let Some(f) = &json.fairness {
            io::write_file(&dir.join("fairness.csv"), |w| report::write_fairness_csv(w, std::slice::from_ref(f)))
                .map_err(write_err)?;
        }
    }
    Ok(EXIT_OK)
}

fn cmd_fairness(a: &FairnessArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let group = PairGroupSpec::parse(&a.attribute, &a.unprivileged, &a.privileged).map_err(input)?;
    let bounds = match &a.bounds {
        Some(b) => parse_bounds(b).map_err(input)?,
        None => DiBounds::default(),
    };
    let pairs = io::load_pairs(&a.pairs).map_err(io_input("pairs"))?;
    let row = FairnessRow::from(&fairness_report(&pairs, &group, &bounds).map_err(input)?);
    if a.json {
        let text = serde_json::to_string_pretty(&row).map_err(env)?;
        write_out(out, &format!("{text}\n"))?;
    } else {
        write_out(out, &report::fairness_text(std::slice::from_ref(&row)))?;
    }
    if let Some(path) = &a.out {
        io::write_file(path, |w| report::write_fairness_csv(w, std::slice::from_ref(&row))).map_err(write_err)?;
    }
    Ok(EXIT_OK)
}

fn simulate(a: &SimulateArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let params = if a.params.eq_ignore_ascii_case("table3") {
        SyntheticParams::table3()
    } else {
        io::load_params(Path::new(&a.params)).map_err(io_input("params"))?
    };
    let rates: FlipRates = a.flip_rates.parse().map_err(input)?;
    let thresholds = parse_thresholds(a.thresholds.as_deref()).map_err(input)?;
    let cohort = generate_synthetic(&params, a.seed).map_err(input)?;
    let sim = simulate_predictions(&cohort, &rates, &thresholds, a.seed);
    ensure_dir(&a.out)?;
    io::save_cohort(&a.out.join("cohort.csv"), &cohort).map_err(write_err)?;
    io::write_file(&a.out.join("predictions.csv"), |w| io::write_prediction_rows(w, &sim.rows)).map_err(write_err)?;
    let summary = format!(
        "cohort       {} patients, {} images\npredictions  {} rows\nflipped      FN={} FP={} UNG={} (rates {rates})\n",
        cohort.patients().len(),
        cohort.images().len(),
        sim.rows.len(),
        sim.flip_count(PatientClass::Referable),
        sim.flip_count(PatientClass::NonReferable),
        sim.flip_count(PatientClass::Ungradable),
    );
    write_out(out, &summary)?;
    Ok(EXIT_OK)
}

fn backend_from(spec: &str, thresholds: &ModelThresholds, timeout: Duration) -> Result<Arc<dyn InferenceBackend>, CliError> {
    if let Some(path) = spec.strip_prefix("stub:") {
        let manifest = load_predictions(Path::new(path), thresholds).map_err(io_input("backend manifest"))?;
        Ok(Arc::new(StubBackend::new(manifest)))
    } else if let Some(url) = spec.strip_prefix("http:") {
        // Accept both `http:host:port` and `http:http://host:port`.
        let url = if url.starts_with("http://") || url.starts_with("https://") {
            url.to_string()
        } else {
            format!("http:{url}")
        };
        Ok(Arc::new(HttpBackend::new(&url, *thresholds, timeout).map_err(env)?))
    } else {
        Err(input(format!("backend {spec:?} must be stub:PATH or http:URL")))
    }
}

fn serve(a: &ServeArgs, err: &mut dyn Write) -> Result<i32, CliError> {
    let thresholds = parse_thresholds(a.thresholds.as_deref()).map_err(input)?;
    // The HTTP client is blocking and must live outside the runtime; this
    // handle keeps the last drop out of async context.
    let backend = backend_from(&a.backend, &thresholds, Duration::from_secs(a.backend_timeout))?;
    let store = match &a.data {
        Some(dir) => Store::open(dir).map_err(env)?,
        None => Store::in_memory(),
    };
    let config = ServiceConfig {
        policy: ScreeningPolicy {
            thresholds,
            ..ScreeningPolicy::default()
        },
        token: a.token.clone(),
        ..ServiceConfig::default()
    };
    let fixture = Dataset::table4_fixture(&config.policy).map_err(env)?;
    let state = Arc::new(AppState::new(backend.clone(), config, store).with_dataset(FIXTURE_DATASET, fixture));

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(env)?;
    let addr = format!("{}:{}", a.host, a.port);
    let result = runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| env(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(env)?;
        let _ = writeln!(err, "listening on http://{local}");
        let _ = err.flush();
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        service::serve(listener, state.clone(), shutdown).await.map_err(env)
    });
    drop(runtime);
    drop(state);
    drop(backend);
    result.map(|_| EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_spec() {
        let m = parse_matrix("TP=49,FP=28,FN=5,TN=715").unwrap();
        assert_eq!(m, ConfusionMatrix::from_cells(715, 28, 5, 49));
        assert_eq!(parse_matrix("tn=715, tp=49,fn=5,fp=28").unwrap(), m);
        for bad in ["TP=1,FP=2,FN=3", "TP=1,FP=2,FN=3,TN=x", "TP=1,TP=2,FN=3,TN=4", "XX=1"] {
            assert!(parse_matrix(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn threshold_spec() {
        let t = parse_thresholds(Some("MQ=0.6, m1=0.45")).unwrap();
        assert_eq!((t.mq, t.m1, t.m2), (0.6, 0.45, 0.5));
        assert!(parse_thresholds(Some("M1=1.5")).is_err());
        assert!(parse_thresholds(Some("M9=0.5")).is_err());
        assert_eq!(parse_thresholds(None).unwrap(), ModelThresholds::default());
    }

    #[test]
    fn bounds_spec() {
        assert_eq!(parse_bounds("0.8,1.25").unwrap(), DiBounds::default());
        assert_eq!(parse_bounds("4/5, 5/4").unwrap(), DiBounds::default());
        assert!(parse_bounds("1.25,0.8").is_err());
        assert!(parse_bounds("x,1").is_err());
    }
}
