//! Command-line front end: ingest, filter-outliers, aggregate, audit, chart,
//! synth and compare.
//!
//! Errors are reported on one line as `error[<category>][<module>]: <message>`
//! with exit codes 2 (usage), 3 (input format), 4 (statistical degeneracy)
//! and 5 (internal).

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::aggregate::{AggregateError, Endpoint};
use crate::audit::{
    build_tables, compare_modes, render_tables, run_audit, write_comparison_csv, AuditConfig, AuditError,
    AuditReport, CellKey, InputDigest,
};
use crate::chart::{emit_chart, ChartError};
use crate::effects::{EffectsError, PermScheme, ThresholdGrid, VarianceForm};
use crate::ingest::{
    load_tracts, ColumnMapping, EstimateVariant, FareColumn, IngestError, IngestOptions, IngestStats, TripReader,
    TripRecord, TripSource, TripWriter,
};
use crate::outlier::{fit_gmm, flag_anomalies, EmOptions, GmmModel, OutlierError};
use crate::synth::{generate, write_city, SynthError, SynthSpec};

pub const DATA_DIR_ENV: &str = "IMPACT_AUDIT_DATA_DIR";
const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(name = "impact-audit", version, about = "Disparate-impact auditing of trip pricing across census tracts")]
pub struct Cli {
    /// Seed for every random draw (default 42).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON file with default option values; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory that relative input paths are resolved against.
    #[arg(long, global = true, env = DATA_DIR_ENV)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter a trip file and report row accounting.
    Ingest(IngestArgs),
    /// Fit a 2-component mixture to a per-trip feature and drop the anomalous component.
    FilterOutliers(FilterArgs),
    /// Write per-tract attribute/outcome tables.
    Aggregate(AggregateArgs),
    /// Compute combined effect sizes and p-values for every cell.
    Audit(AuditArgs),
    /// Emit chart series for report cells.
    Chart(ChartArgs),
    /// Generate a synthetic city.
    Synth(SynthArgs),
    /// Compare two audit reports cell by cell.
    Compare(CompareArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct TripInputArgs {
    /// Trip file (delimited text with header).
    #[arg(long)]
    pub trips: PathBuf,
    /// JSON column-name mapping; defaults to the Chicago portal headers.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    /// ridehailing or taxi.
    #[arg(long)]
    pub source: Option<TripSource>,
    /// base or total.
    #[arg(long)]
    pub fare: Option<FareColumn>,
    /// Malformed rows tolerated before failing.
    #[arg(long)]
    pub max_malformed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub input: TripInputArgs,
    /// Filtered trip file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where to write the row accounting JSON (stdout if absent).
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[command(flatten)]
    pub input: TripInputArgs,
    /// Retained trips.
    #[arg(long)]
    pub out: PathBuf,
    /// fare_per_mile or seconds_per_mile.
    #[arg(long)]
    pub column: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Model and removal summary JSON (stdout if absent).
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct StudyArgs {
    /// Comma-separated attribute names.
    #[arg(long, value_delimiter = ',')]
    pub attributes: Option<Vec<String>>,
    /// Comma-separated outcome names.
    #[arg(long, value_delimiter = ',')]
    pub outcomes: Option<Vec<String>>,
    /// Comma-separated subset of pickup,dropoff.
    #[arg(long, value_delimiter = ',')]
    pub endpoints: Option<Vec<Endpoint>>,
    /// Comma-separated subset of min,point,max.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<EstimateVariant>>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[command(flatten)]
    pub input: TripInputArgs,
    #[arg(long)]
    pub tracts: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub study: StudyArgs,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub input: TripInputArgs,
    #[arg(long)]
    pub tracts: PathBuf,
    /// Report JSON.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub study: StudyArgs,
    /// percentiles:<count>, distinct, or explicit:<t1,t2,...>.
    #[arg(long)]
    pub grid: Option<ThresholdGrid>,
    #[arg(long)]
    pub min_group: Option<usize>,
    /// Permutation iterations per cell.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// paper or squared.
    #[arg(long)]
    pub variance_form: Option<VarianceForm>,
    /// shuffle or subset:<fraction>.
    #[arg(long)]
    pub perm_scheme: Option<PermScheme>,
    /// Accept curves with a single valid threshold.
    #[arg(long)]
    pub allow_single_point: bool,
    /// Also write table-shaped CSV renderings here.
    #[arg(long)]
    pub tables_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ChartArgs {
    #[arg(long)]
    pub report: PathBuf,
    /// variant/endpoint/attribute/outcome; repeatable. All cells with curves if absent.
    #[arg(long)]
    pub cell: Vec<String>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Include mean outcome below/above each threshold.
    #[arg(long)]
    pub raw: bool,
    /// Also write SVG line charts.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator spec JSON; defaults are used for missing fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Comparison CSV (stdout if absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Option defaults loaded with `--config`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub mapping: Option<PathBuf>,
    pub source: Option<TripSource>,
    pub fare: Option<FareColumn>,
    pub max_malformed: Option<u64>,
    pub column: Option<String>,
    pub k: Option<usize>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub attributes: Option<Vec<String>>,
    pub outcomes: Option<Vec<String>>,
    pub endpoints: Option<Vec<Endpoint>>,
    pub variants: Option<Vec<EstimateVariant>>,
    pub grid: Option<ThresholdGrid>,
    pub min_group: Option<usize>,
    pub iterations: Option<usize>,
    pub variance_form: Option<VarianceForm>,
    pub perm_scheme: Option<PermScheme>,
    pub allow_single_point: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Usage,
    Input,
    Degenerate,
    Internal,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Usage => 2,
            Category::Input => 3,
            Category::Degenerate => 4,
            Category::Internal => 5,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Category::Usage => "usage",
            Category::Input => "input",
            Category::Degenerate => "degenerate",
            Category::Internal => "internal",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub module: &'static str,
    pub message: String,
}

impl CliError {
    fn new(category: Category, module: &'static str, message: impl Into<String>) -> Self {
        Self {
            category,
            module,
            message: message.into(),
        }
    }

    /// Single line, no embedded newlines.
    pub fn line(&self) -> String {
        format!(
            "error[{}][{}]: {}",
            self.category.as_str(),
            self.module,
            self.message.replace('\n', " ")
        )
    }
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new(Category::Internal, "cli", format!("writing {}: {e}", path.display()))
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::new(Category::Input, "ingest", e.to_string())
    }
}

impl From<OutlierError> for CliError {
    fn from(e: OutlierError) -> Self {
        let cat = match e {
            OutlierError::NonFinite(..) => Category::Input,
            OutlierError::ZeroComponents | OutlierError::NotTwoComponents(_) => Category::Usage,
            _ => Category::Degenerate,
        };
        CliError::new(cat, "outlier", e.to_string())
    }
}

impl From<AggregateError> for CliError {
    fn from(e: AggregateError) -> Self {
        let cat = match e {
            AggregateError::TooFewTracts { .. } => Category::Degenerate,
            AggregateError::EndpointMismatch { .. } => Category::Internal,
        };
        CliError::new(cat, "aggregate", e.to_string())
    }
}

fn effects_category(e: &EffectsError) -> Category {
    match e {
        EffectsError::InvalidGrid(_) | EffectsError::NoIterations => Category::Usage,
        EffectsError::NonFinite | EffectsError::LengthMismatch(..) => Category::Input,
        _ => Category::Degenerate,
    }
}

impl From<AuditError> for CliError {
    fn from(e: AuditError) -> Self {
        match e {
            AuditError::Aggregate(e) => e.into(),
            AuditError::Effects(e) => CliError::new(effects_category(&e), "effects", e.to_string()),
            AuditError::MissingTable { .. } => CliError::new(Category::Input, "audit", e.to_string()),
            _ => CliError::new(Category::Usage, "audit", e.to_string()),
        }
    }
}

impl From<ChartError> for CliError {
    fn from(e: ChartError) -> Self {
        let cat = match e {
            ChartError::EmptyCurve | ChartError::NotIncreasing(_) => Category::Degenerate,
            ChartError::Csv(_) => Category::Internal,
        };
        CliError::new(cat, "chart", e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        let cat = match e {
            SynthError::InvalidSpec(_) => Category::Usage,
            _ => Category::Internal,
        };
        CliError::new(cat, "synth", e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Resolved global context shared by subcommands.
struct Ctx {
    seed: u64,
    seed_explicit: bool,
    file: FileConfig,
    data_dir: Option<PathBuf>,
}

impl Ctx {
    fn input(&self, p: &Path) -> PathBuf {
        match &self.data_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn ingest_options(&self, a: &TripInputArgs) -> CliResult<IngestOptions> {
        let mut opts = IngestOptions::default();
        if let Some(m) = a.mapping.as_ref().or(self.file.mapping.as_ref()) {
            opts.mapping = ColumnMapping::from_json_file(&self.input(m))?;
        }
        if let Some(s) = a.source.or(self.file.source) {
            opts.source = s;
        }
        if let Some(f) = a.fare.or(self.file.fare) {
            opts.fare_column = f;
        }
        if let Some(n) = a.max_malformed.or(self.file.max_malformed) {
            opts.max_malformed = n;
        }
        Ok(opts)
    }

    fn study(&self, s: &StudyArgs, base: &mut AuditConfig) {
        let f = &self.file;
        if let Some(v) = s.attributes.clone().or_else(|| f.attributes.clone()) {
            base.attributes = v;
        }
        if let Some(v) = s.outcomes.clone().or_else(|| f.outcomes.clone()) {
            base.outcomes = v;
        }
        if let Some(v) = s.endpoints.clone().or_else(|| f.endpoints.clone()) {
            base.endpoints = v;
        }
        if let Some(v) = s.variants.clone().or_else(|| f.variants.clone()) {
            base.variants = v;
        }
    }
}

/// Parses `std::env::args`, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init();
    run(std::env::args_os())
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("{}", CliError::new(Category::Usage, "cli", first).line());
            return Category::Usage.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.category.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> CliResult {
    let file = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::new(Category::Input, "cli", format!("reading {}: {e}", p.display())))?;
            serde_json::from_str::<FileConfig>(&text)
                .map_err(|e| CliError::new(Category::Usage, "cli", format!("config {}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let seed_explicit = cli.seed.is_some() || file.seed.is_some();
    let seed = cli.seed.or(file.seed).unwrap_or(DEFAULT_SEED);

    if let Some(n) = cli.threads.or(file.threads) {
        if n == 0 {
            return Err(CliError::new(Category::Usage, "cli", "--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::new(Category::Internal, "cli", e.to_string()))?;
    }
    let ctx = Ctx {
        seed,
        seed_explicit,
        file,
        data_dir: cli.data_dir,
    };

    match cli.command {
        Command::Synth(a) => cmd_synth(&ctx, a),
        other => {
            eprintln!("seed: {}", ctx.seed);
            match other {
                Command::Ingest(a) => cmd_ingest(&ctx, a),
                Command::FilterOutliers(a) => cmd_filter(&ctx, a),
                Command::Aggregate(a) => cmd_aggregate(&ctx, a),
                Command::Audit(a) => cmd_audit(&ctx, a),
                Command::Chart(a) => cmd_chart(&ctx, a),
                Command::Compare(a) => cmd_compare(&ctx, a),
                Command::Synth(_) => unreachable!(),
            }
        }
    }
}

fn emit_json<T: Serialize>(value: &T, path: Option<&Path>) -> CliResult {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::new(Category::Internal, "cli", e.to_string()))?;
    text.push('\n');
    match path {
        Some(p) => fs::write(p, text).map_err(|e| write_err(p, e)),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::new(Category::Internal, "cli", e.to_string())),
    }
}

fn create_dir(p: &Path) -> CliResult {
    fs::create_dir_all(p).map_err(|e| write_err(p, e))
}

fn load_trip_file(ctx: &Ctx, a: &TripInputArgs) -> CliResult<(PathBuf, IngestOptions, Vec<TripRecord>, IngestStats)> {
    let path = ctx.input(&a.trips);
    let opts = ctx.ingest_options(a)?;
    let mut reader = TripReader::open(&path, &opts)?;
    let mut trips = Vec::new();
    for t in reader.by_ref() {
        trips.push(t?);
    }
    let stats = *reader.stats();
    log::info!("{}: read {}, retained {}", path.display(), stats.rows_read, stats.retained);
    Ok((path, opts, trips, stats))
}

fn write_trips(path: &Path, mapping: &ColumnMapping, trips: &[TripRecord], keep: impl Fn(usize) -> bool) -> CliResult {
    let mut w = TripWriter::create(path, mapping)?;
    for (i, t) in trips.iter().enumerate() {
        if keep(i) {
            w.write(t)?;
        }
    }
    w.finish()?;
    Ok(())
}

fn cmd_ingest(ctx: &Ctx, a: IngestArgs) -> CliResult {
    let (_, opts, trips, stats) = load_trip_file(ctx, &a.input)?;
    if let Some(out) = &a.out {
        write_trips(out, &opts.mapping, &trips, |_| true)?;
    }
    emit_json(&stats, a.stats.as_deref())
}

#[derive(Debug, Serialize)]
struct FilterSummary {
    column: String,
    n_values: usize,
    removed: usize,
    retained: usize,
    warning: Option<String>,
    ingest: IngestStats,
    model: GmmModel,
}

fn cmd_filter(ctx: &Ctx, a: FilterArgs) -> CliResult {
    let (_, opts, trips, stats) = load_trip_file(ctx, &a.input)?;
    let column = a
        .column
        .clone()
        .or_else(|| ctx.file.column.clone())
        .unwrap_or_else(|| "fare_per_mile".into());
    let feature: fn(&TripRecord) -> f64 = match column.as_str() {
        "fare_per_mile" => TripRecord::fare_per_mile,
        "seconds_per_mile" => TripRecord::seconds_per_mile,
        other => {
            return Err(CliError::new(
                Category::Usage,
                "outlier",
                format!("unknown column '{other}' (expected fare_per_mile or seconds_per_mile)"),
            ))
        }
    };
    let defaults = EmOptions::default();
    let em = EmOptions {
        k: a.k.or(ctx.file.k).unwrap_or(defaults.k),
        seed: ctx.seed,
        tol: a.tol.or(ctx.file.tol).unwrap_or(defaults.tol),
        max_iter: a.max_iter.or(ctx.file.max_iter).unwrap_or(defaults.max_iter),
    };
    let values: Vec<f64> = trips.iter().map(feature).collect();
    let model = fit_gmm(&values, &em)?;
    let flags = flag_anomalies(&model, &values)?;
    write_trips(&a.out, &opts.mapping, &trips, |i| !flags.mask[i])?;
    let removed = flags.count();
    eprintln!("removed {removed} of {} trips", values.len());
    emit_json(
        &FilterSummary {
            column,
            n_values: values.len(),
            removed,
            retained: values.len() - removed,
            warning: flags.warning,
            ingest: stats,
            model,
        },
        a.model.as_deref(),
    )
}

fn cmd_aggregate(ctx: &Ctx, a: AggregateArgs) -> CliResult {
    let (_, _, trips, stats) = load_trip_file(ctx, &a.input)?;
    let tracts = load_tracts(&ctx.input(&a.tracts))?;
    let mut cfg = AuditConfig {
        variants: vec![EstimateVariant::Point],
        ..Default::default()
    };
    ctx.study(&a.study, &mut cfg);
    let (tables, mut acct) = build_tables(&trips, &tracts, &cfg.endpoints, &cfg.variants)?;
    create_dir(&a.out_dir)?;
    for ((endpoint, variant), table) in &tables {
        let path = a.out_dir.join(format!("tracts_{endpoint}_{variant}.csv"));
        let f = File::create(&path).map_err(|e| write_err(&path, e))?;
        table.write_csv(BufWriter::new(f)).map_err(|e| write_err(&path, e))?;
        acct.tables.push(crate::audit::TableAccounting {
            endpoint: *endpoint,
            variant: *variant,
            n_tracts: table.len(),
            excluded_no_trips: table.excluded_no_trips,
            excluded_missing_attributes: table.excluded_missing_attributes,
        });
    }
    acct.ingest = Some(stats);
    emit_json(&acct, Some(&a.out_dir.join("accounting.json")))
}

fn digest(path: &Path) -> CliResult<InputDigest> {
    let bytes = fs::read(path).map_err(|e| CliError::new(Category::Input, "audit", format!("{}: {e}", path.display())))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(InputDigest::of_bytes(&name, &bytes))
}

fn cmd_audit(ctx: &Ctx, a: AuditArgs) -> CliResult {
    let f = &ctx.file;
    let mut cfg = AuditConfig {
        seed: ctx.seed,
        ..Default::default()
    };
    ctx.study(&a.study, &mut cfg);
    if let Some(g) = a.grid.clone().or_else(|| f.grid.clone()) {
        cfg.grid = g;
    }
    if let Some(v) = a.min_group.or(f.min_group) {
        cfg.min_group = v;
    }
    if let Some(v) = a.iterations.or(f.iterations) {
        cfg.iterations = v;
    }
    if let Some(v) = a.variance_form.or(f.variance_form) {
        cfg.variance_form = v;
    }
    if let Some(v) = a.perm_scheme.or(f.perm_scheme) {
        cfg.perm_scheme = v;
    }
    cfg.allow_single_point = a.allow_single_point || f.allow_single_point.unwrap_or(false);
    cfg.validate()?;

    let (trips_path, _, trips, stats) = load_trip_file(ctx, &a.input)?;
    let tracts_path = ctx.input(&a.tracts);
    let tracts = load_tracts(&tracts_path)?;
    let (tables, acct) = build_tables(&trips, &tracts, &cfg.endpoints, &cfg.variants)?;
    let mut report = run_audit(&tables, &cfg)?;
    report.metadata.inputs = vec![digest(&trips_path)?, digest(&tracts_path)?];
    report.metadata.row_accounting.ingest = Some(stats);
    report.metadata.row_accounting.trips_unknown_pickup_tract = acct.trips_unknown_pickup_tract;
    report.metadata.row_accounting.trips_unknown_dropoff_tract = acct.trips_unknown_dropoff_tract;

    fs::write(&a.out, report.to_json()).map_err(|e| write_err(&a.out, e))?;
    if let Some(dir) = &a.tables_dir {
        create_dir(dir)?;
        for (name, text) in render_tables(&report) {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| write_err(&p, e))?;
        }
    }
    let skipped = report.cells.iter().filter(|c| c.skip_reason.is_some()).count();
    eprintln!("{} cells, {skipped} skipped", report.cells.len());
    Ok(())
}

fn read_report(ctx: &Ctx, p: &Path) -> CliResult<AuditReport> {
    let path = ctx.input(p);
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::new(Category::Input, "audit", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::new(Category::Input, "audit", format!("{}: not a report: {e}", path.display())))
}

fn cmd_chart(ctx: &Ctx, a: ChartArgs) -> CliResult {
    let report = read_report(ctx, &a.report)?;
    let cells: Vec<&crate::audit::AuditCell> = if a.cell.is_empty() {
        report.cells.iter().filter(|c| c.curve.is_some()).collect()
    } else {
        a.cell
            .iter()
            .map(|s| {
                let key = CellKey::parse(s).map_err(|e| CliError::new(Category::Usage, "chart", e))?;
                report
                    .cell(&key)
                    .ok_or_else(|| CliError::new(Category::Usage, "chart", format!("no cell {key} in report")))
            })
            .collect::<CliResult<_>>()?
    };
    create_dir(&a.out_dir)?;
    for cell in cells {
        let Some(curve) = &cell.curve else {
            return Err(CliError::new(
                Category::Degenerate,
                "chart",
                format!(
                    "cell {} has no curve: {}",
                    cell.key(),
                    cell.skip_reason.as_deref().unwrap_or("skipped")
                ),
            ));
        };
        let series = emit_chart(curve, a.raw)?;
        let stem = series.stem();
        let p = a.out_dir.join(format!("{stem}.csv"));
        fs::write(&p, series.to_csv_string()?).map_err(|e| write_err(&p, e))?;
        if a.svg {
            let p = a.out_dir.join(format!("{stem}.svg"));
            fs::write(&p, series.to_svg()).map_err(|e| write_err(&p, e))?;
            if a.raw {
                let p = a.out_dir.join(format!("{stem}_raw.svg"));
                fs::write(&p, series.raw_svg()).map_err(|e| write_err(&p, e))?;
            }
        }
    }
    Ok(())
}

fn cmd_synth(ctx: &Ctx, a: SynthArgs) -> CliResult {
    let mut spec = match &a.spec {
        Some(p) => {
            let path = ctx.input(p);
            let text = fs::read_to_string(&path)
                .map_err(|e| CliError::new(Category::Input, "synth", format!("{}: {e}", path.display())))?;
            serde_json::from_str::<SynthSpec>(&text)
                .map_err(|e| CliError::new(Category::Usage, "synth", format!("{}: {e}", path.display())))?
        }
        None => SynthSpec::default(),
    };
    if ctx.seed_explicit {
        spec.seed = ctx.seed;
    }
    eprintln!("seed: {}", spec.seed);
    let city = generate(&spec)?;
    write_city(&city, &a.out)?;
    eprintln!("{} tracts, {} trips", city.tracts.len(), city.trips.len());
    Ok(())
}

fn cmd_compare(ctx: &Ctx, a: CompareArgs) -> CliResult {
    let ra = read_report(ctx, &a.a)?;
    let rb = read_report(ctx, &a.b)?;
    let rows = compare_modes(&ra, &rb)?;
    match &a.out {
        Some(p) => {
            let f = File::create(p).map_err(|e| write_err(p, e))?;
            write_comparison_csv(&rows, BufWriter::new(f)).map_err(|e| write_err(p, e))
        }
        None => write_comparison_csv(&rows, io::stdout().lock())
            .map_err(|e| CliError::new(Category::Internal, "cli", e.to_string())),
    }
}
