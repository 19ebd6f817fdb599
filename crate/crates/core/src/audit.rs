//! Full-study orchestration: one effect curve, combined effect size and
//! permutation p-value per (variant, endpoint, attribute, outcome) cell.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aggregate::{
    aggregate_trips, build_table, AggregateError, Endpoint, TractTable, DROPOFF_DENSITY, FARE_PER_MILE,
    OUTCOMES, PICKUP_DENSITY,
};
use crate::effects::{
    analyze, EffectPoint, EffectsError, PermScheme, PermutationOptions, SweepOptions, ThresholdGrid,
    VarianceForm,
};
use crate::ingest::{EstimateVariant, IngestStats, TractProfile, TripRecord};

pub const DEFAULT_ATTRIBUTES: [&str; 8] = [
    PICKUP_DENSITY,
    DROPOFF_DENSITY,
    "pct_nonwhite",
    "pct_over_40",
    "pct_hs_or_less",
    "pct_below_poverty",
    "pct_noncitizen",
    "pct_below_median_house",
];

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("no table for endpoint {endpoint}, variant {variant}")]
    MissingTable {
        endpoint: Endpoint,
        variant: EstimateVariant,
    },
    #[error("unknown attribute '{0}'")]
    UnknownAttribute(String),
    #[error("unknown outcome '{0}'")]
    UnknownOutcome(String),
    #[error("invalid audit config: {0}")]
    InvalidConfig(String),
    #[error("reports cover different cells: {0}")]
    MismatchedGrids(String),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Effects(#[from] EffectsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub attributes: Vec<String>,
    pub outcomes: Vec<String>,
    pub endpoints: Vec<Endpoint>,
    pub variants: Vec<EstimateVariant>,
    pub grid: ThresholdGrid,
    pub min_group: usize,
    pub iterations: usize,
    pub seed: u64,
    pub variance_form: VarianceForm,
    pub perm_scheme: PermScheme,
    pub allow_single_point: bool,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            attributes: DEFAULT_ATTRIBUTES.iter().map(|s| s.to_string()).collect(),
            outcomes: OUTCOMES.iter().map(|s| s.to_string()).collect(),
            endpoints: Endpoint::BOTH.to_vec(),
            variants: vec![EstimateVariant::Point],
            grid: ThresholdGrid::default(),
            min_group: 2,
            iterations: 1000,
            seed: 42,
            variance_form: VarianceForm::Paper,
            perm_scheme: PermScheme::Shuffle,
            allow_single_point: false,
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<(), AuditError> {
        let bad = |m: &str| Err(AuditError::InvalidConfig(m.to_string()));
        if self.attributes.is_empty() {
            return bad("attribute list is empty");
        }
        if self.outcomes.is_empty() {
            return bad("outcome list is empty");
        }
        if self.endpoints.is_empty() {
            return bad("endpoint list is empty");
        }
        if self.variants.is_empty() {
            return bad("variant list is empty");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        Ok(())
    }

    fn sweep_options(&self) -> SweepOptions {
        SweepOptions {
            min_group: self.min_group,
            variance_form: self.variance_form,
            allow_single_point: self.allow_single_point,
        }
    }

    /// Cells in report order: variant, endpoint, attribute, outcome.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            for &endpoint in &self.endpoints {
                for attribute in &self.attributes {
                    for outcome in &self.outcomes {
                        out.push(CellKey {
                            variant,
                            endpoint,
                            attribute: attribute.clone(),
                            outcome: outcome.clone(),
                        });
                    }
                }
            }
        }
        out
    }
}

pub type TableSet = BTreeMap<(Endpoint, EstimateVariant), TractTable>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub variant: EstimateVariant,
    pub endpoint: Endpoint,
    pub attribute: String,
    pub outcome: String,
}

impl CellKey {
    /// Parses `variant/endpoint/attribute/outcome`.
    pub fn parse(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split('/').collect();
        let [v, e, a, o] = parts.as_slice() else {
            return Err(format!("cell '{s}' is not variant/endpoint/attribute/outcome"));
        };
        Ok(Self {
            variant: v.parse()?,
            endpoint: e.parse()?,
            attribute: a.to_string(),
            outcome: o.to_string(),
        })
    }

    /// Permutation seed for this cell, independent of its position in the run.
    pub fn seed(&self, base: u64) -> u64 {
        let mut h = Sha256::new();
        h.update(base.to_le_bytes());
        h.update(self.to_string().as_bytes());
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
    }
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}/{}", self.variant, self.endpoint, self.attribute, self.outcome)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    pub grid: ThresholdGrid,
    pub min_group: usize,
    pub variance_form: VarianceForm,
    pub perm_scheme: PermScheme,
    pub iterations: usize,
    pub seed: u64,
    pub cell_seed: u64,
}

/// Serialized effect curve for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub attribute: String,
    pub outcome: String,
    pub endpoint: Endpoint,
    pub variant: EstimateVariant,
    pub points: Vec<EffectPoint>,
    pub between_var: f64,
    pub ces: f64,
    pub p_value: Option<f64>,
    /// Observed attribute range, used to normalize chart axes.
    pub x_min: f64,
    pub x_max: f64,
    pub config: CurveConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditCell {
    pub variant: EstimateVariant,
    pub endpoint: Endpoint,
    pub attribute: String,
    pub outcome: String,
    pub n_tracts: usize,
    pub ces: Option<f64>,
    pub p_value: Option<f64>,
    pub skip_reason: Option<String>,
    pub curve: Option<CurveRecord>,
}

impl AuditCell {
    pub fn key(&self) -> CellKey {
        CellKey {
            variant: self.variant,
            endpoint: self.endpoint,
            attribute: self.attribute.clone(),
            outcome: self.outcome.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub name: String,
    pub sha256: String,
}

impl InputDigest {
    pub fn of_bytes(name: &str, bytes: &[u8]) -> Self {
        Self {
            name: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableAccounting {
    pub endpoint: Endpoint,
    pub variant: EstimateVariant,
    pub n_tracts: usize,
    pub excluded_no_trips: usize,
    pub excluded_missing_attributes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RowAccounting {
    pub ingest: Option<IngestStats>,
    pub trips_unknown_pickup_tract: u64,
    pub trips_unknown_dropoff_tract: u64,
    pub tables: Vec<TableAccounting>,
}

/// Choices the measurement depends on, recorded with every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Methodology {
    pub groups: String,
    pub outcome_scale: String,
    pub between_variance: String,
    pub within_variance: String,
    pub p_value: String,
    pub outlier_model: String,
}

impl Methodology {
    pub fn for_config(config: &AuditConfig) -> Self {
        Self {
            groups: "below: x < t, above: x >= t".into(),
            outcome_scale: "population standard deviation of the full outcome vector".into(),
            between_variance: "population variance of the retained d values".into(),
            within_variance: match config.variance_form {
                VarianceForm::Paper => "(n/(n_b*n_a) + d/(2(n-2))) * n/(n-2)".into(),
                VarianceForm::Squared => "(n/(n_b*n_a) + d^2/(2(n-2))) * n/(n-2)".into(),
            },
            p_value: format!(
                "#{{i : |ces_i| > |ces_obs|}} / iterations, resampling scheme {}",
                config.perm_scheme
            ),
            outlier_model: "2-component EM on fare per mile; means initialized at the 25th/99th \
                            percentiles, larger-mean component anomalous"
                .into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub tool: String,
    pub version: String,
    pub config: AuditConfig,
    pub inputs: Vec<InputDigest>,
    pub row_accounting: RowAccounting,
    pub methodology: Methodology,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub metadata: ReportMetadata,
    pub cells: Vec<AuditCell>,
}

impl AuditReport {
    pub fn cell(&self, key: &CellKey) -> Option<&AuditCell> {
        self.cells.iter().find(|c| &c.key() == key)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Aggregates trips and builds a table for every endpoint × variant.
pub fn build_tables(
    trips: &[TripRecord],
    tracts: &[TractProfile],
    endpoints: &[Endpoint],
    variants: &[EstimateVariant],
) -> Result<(TableSet, RowAccounting), AuditError> {
    let mut tables = TableSet::new();
    let mut acct = RowAccounting::default();
    for &endpoint in endpoints {
        let agg = aggregate_trips(trips, tracts, endpoint);
        acct.trips_unknown_pickup_tract = agg.unknown_pickup_tract;
        acct.trips_unknown_dropoff_tract = agg.unknown_dropoff_tract;
        for &variant in variants {
            let table = build_table(&agg, tracts, endpoint, variant)?;
            tables.insert((endpoint, variant), table);
        }
    }
    Ok((tables, acct))
}

fn is_degenerate(e: &EffectsError) -> bool {
    matches!(
        e,
        EffectsError::DegenerateSweep { .. }
            | EffectsError::ConstantOutcome
            | EffectsError::TooFewObservations(_)
            | EffectsError::RetryCapExceeded { .. }
    )
}

/// Computes one cell. Gives the same result alone as inside [`run_audit`].
pub fn run_cell(tables: &TableSet, config: &AuditConfig, key: &CellKey) -> Result<AuditCell, AuditError> {
    let table = tables
        .get(&(key.endpoint, key.variant))
        .ok_or(AuditError::MissingTable {
            endpoint: key.endpoint,
            variant: key.variant,
        })?;
    let x = table
        .attribute(&key.attribute)
        .ok_or_else(|| AuditError::UnknownAttribute(key.attribute.clone()))?;
    let y = table
        .outcome(&key.outcome)
        .ok_or_else(|| AuditError::UnknownOutcome(key.outcome.clone()))?;

    let mut cell = AuditCell {
        variant: key.variant,
        endpoint: key.endpoint,
        attribute: key.attribute.clone(),
        outcome: key.outcome.clone(),
        n_tracts: table.len(),
        ces: None,
        p_value: None,
        skip_reason: None,
        curve: None,
    };
    if key.attribute == key.outcome {
        cell.skip_reason = Some("attribute is the outcome".into());
        return Ok(cell);
    }

    let cell_seed = key.seed(config.seed);
    let opts = PermutationOptions {
        sweep: config.sweep_options(),
        grid: config.grid.clone(),
        iterations: config.iterations,
        seed: cell_seed,
        scheme: config.perm_scheme,
        retry_cap: 100,
    };
    match analyze(x, y, &opts) {
        Ok((curve, perm)) => {
            let x_min = x.iter().copied().fold(f64::INFINITY, f64::min);
            let x_max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            cell.ces = Some(curve.ces);
            cell.p_value = Some(perm.p_value);
            cell.curve = Some(CurveRecord {
                attribute: key.attribute.clone(),
                outcome: key.outcome.clone(),
                endpoint: key.endpoint,
                variant: key.variant,
                points: curve.points,
                between_var: curve.between_var,
                ces: curve.ces,
                p_value: curve.p_value,
                x_min,
                x_max,
                config: CurveConfig {
                    grid: config.grid.clone(),
                    min_group: config.min_group,
                    variance_form: config.variance_form,
                    perm_scheme: config.perm_scheme,
                    iterations: config.iterations,
                    seed: config.seed,
                    cell_seed,
                },
            });
        }
        Err(e) if is_degenerate(&e) => cell.skip_reason = Some(e.to_string()),
        Err(e) => return Err(e.into()),
    }
    Ok(cell)
}

/// Runs every configured cell. Input digests and ingest counts are left for
/// the caller to attach to `metadata`.
pub fn run_audit(tables: &TableSet, config: &AuditConfig) -> Result<AuditReport, AuditError> {
    config.validate()?;
    for &endpoint in &config.endpoints {
        for &variant in &config.variants {
            let table = tables
                .get(&(endpoint, variant))
                .ok_or(AuditError::MissingTable { endpoint, variant })?;
            if let Some(a) = config.attributes.iter().find(|a| table.attribute(a).is_none()) {
                return Err(AuditError::UnknownAttribute(a.clone()));
            }
            if let Some(o) = config.outcomes.iter().find(|o| table.outcome(o).is_none()) {
                return Err(AuditError::UnknownOutcome(o.clone()));
            }
        }
    }

    let cells = config
        .cells()
        .par_iter()
        .map(|key| run_cell(tables, config, key))
        .collect::<Result<Vec<_>, _>>()?;

    let table_acct = tables
        .iter()
        .filter(|((e, v), _)| config.endpoints.contains(e) && config.variants.contains(v))
        .map(|((endpoint, variant), t)| TableAccounting {
            endpoint: *endpoint,
            variant: *variant,
            n_tracts: t.len(),
            excluded_no_trips: t.excluded_no_trips,
            excluded_missing_attributes: t.excluded_missing_attributes,
        })
        .collect();

    Ok(AuditReport {
        metadata: ReportMetadata {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            inputs: Vec::new(),
            row_accounting: RowAccounting {
                tables: table_acct,
                ..Default::default()
            },
            methodology: Methodology::for_config(config),
        },
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: EstimateVariant,
    pub endpoint: Endpoint,
    pub attribute: String,
    pub outcome: String,
    pub ces_a: Option<f64>,
    pub p_a: Option<f64>,
    pub ces_b: Option<f64>,
    pub p_b: Option<f64>,
    /// `ces_b - ces_a` when both exist.
    pub delta_ces: Option<f64>,
    pub delta_p: Option<f64>,
}

/// Side-by-side combined effects of two reports over the same cell grid.
pub fn compare_modes(a: &AuditReport, b: &AuditReport) -> Result<Vec<ComparisonRow>, AuditError> {
    let keys_a: BTreeSet<CellKey> = a.cells.iter().map(AuditCell::key).collect();
    let keys_b: BTreeSet<CellKey> = b.cells.iter().map(AuditCell::key).collect();
    if keys_a != keys_b {
        let only: Vec<String> = keys_a.symmetric_difference(&keys_b).take(5).map(|k| k.to_string()).collect();
        return Err(AuditError::MismatchedGrids(only.join(", ")));
    }
    let diff = |x: Option<f64>, y: Option<f64>| x.zip(y).map(|(x, y)| y - x);
    Ok(a.cells
        .iter()
        .map(|ca| {
            let cb = b.cell(&ca.key()).expect("same key set");
            ComparisonRow {
                variant: ca.variant,
                endpoint: ca.endpoint,
                attribute: ca.attribute.clone(),
                outcome: ca.outcome.clone(),
                ces_a: ca.ces,
                p_a: ca.p_value,
                ces_b: cb.ces,
                p_b: cb.p_value,
                delta_ces: diff(ca.ces, cb.ces),
                delta_p: diff(ca.p_value, cb.p_value),
            }
        })
        .collect())
}

pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "variant", "endpoint", "attribute", "outcome", "ces_a", "p_a", "ces_b", "p_b", "delta_ces", "delta_p",
    ])?;
    let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.variant.as_str(),
            r.endpoint.as_str(),
            &r.attribute,
            &r.outcome,
            &f(r.ces_a),
            &f(r.p_a),
            &f(r.ces_b),
            &f(r.p_b),
            &f(r.delta_ces),
            &f(r.delta_p),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn attribute_label(name: &str) -> String {
    match name {
        PICKUP_DENSITY => "Pickup Frequency / m^2".into(),
        DROPOFF_DENSITY => "Dropoff Frequency / m^2".into(),
        "pct_nonwhite" => "% Non-white".into(),
        "pct_over_40" => "% Older than 40".into(),
        "pct_hs_or_less" => "% High School education or less".into(),
        "pct_below_poverty" => "% Below Poverty Line".into(),
        "pct_noncitizen" => "% Non-U.S. Citizens".into(),
        "pct_below_median_house" => "% Below Median House Price".into(),
        other => other.into(),
    }
}

/// Human-readable p-value; zero prints as `<1/iterations`.
pub fn format_p(p: f64, iterations: usize) -> String {
    if p == 0.0 {
        format!("<1/{iterations}")
    } else {
        format!("{p:.6}")
    }
}

fn cell_text(cell: Option<&AuditCell>, iterations: usize) -> [String; 2] {
    match cell {
        Some(AuditCell {
            ces: Some(c),
            p_value: Some(p),
            ..
        }) => [format!("{c:.6}"), format_p(*p, iterations)],
        Some(c) if c.skip_reason.is_some() => ["skipped".into(), String::new()],
        _ => [String::new(), String::new()],
    }
}

/// One delimited block per (variant, outcome), pickup and dropoff side by
/// side; when several variants were run, one block per (endpoint, outcome)
/// with Min/Point/Max side by side as well. Returns `(name, csv text)` pairs.
pub fn render_tables(report: &AuditReport) -> Vec<(String, String)> {
    let cfg = &report.metadata.config;
    let iters = cfg.iterations;
    let lookup = |variant, endpoint, attribute: &str, outcome: &str| {
        report.cell(&CellKey {
            variant,
            endpoint,
            attribute: attribute.to_string(),
            outcome: outcome.to_string(),
        })
    };
    let render = |header: Vec<String>, rows: Vec<Vec<String>>| {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&header).expect("in-memory write");
        for r in rows {
            w.write_record(&r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
    };

    let mut out = Vec::new();
    for &variant in &cfg.variants {
        for outcome in &cfg.outcomes {
            let mut header = vec!["Attribute".to_string()];
            for e in &cfg.endpoints {
                header.push(format!("{} Combined Effect Size (d)", title(e.as_str())));
                header.push(format!("{} p", title(e.as_str())));
            }
            let rows = cfg
                .attributes
                .iter()
                .filter(|a| *a != outcome)
                .map(|a| {
                    let mut row = vec![attribute_label(a)];
                    for &e in &cfg.endpoints {
                        row.extend(cell_text(lookup(variant, e, a, outcome), iters));
                    }
                    row
                })
                .collect();
            out.push((format!("table_{variant}_{outcome}.csv"), render(header, rows)));
        }
    }
    if cfg.variants.len() > 1 {
        for &endpoint in &cfg.endpoints {
            for outcome in &cfg.outcomes {
                let mut header = vec!["Attribute".to_string()];
                for v in &cfg.variants {
                    let name = match v {
                        EstimateVariant::Min => "Min Estimate",
                        EstimateVariant::Point => "Estimate",
                        EstimateVariant::Max => "Max Estimate",
                    };
                    header.push(format!("{name} Combined Effect Size (d)"));
                    header.push(format!("{name} p"));
                }
                let rows = cfg
                    .attributes
                    .iter()
                    .filter(|a| *a != outcome)
                    .map(|a| {
                        let mut row = vec![attribute_label(a)];
                        for &v in &cfg.variants {
                            row.extend(cell_text(lookup(v, endpoint, a, outcome), iters));
                        }
                        row
                    })
                    .collect();
                out.push((format!("variants_{endpoint}_{outcome}.csv"), render(header, rows)));
            }
        }
    }
    out
}

fn title(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// The fare-per-mile outcome used by the headline table.
pub fn headline_outcome() -> &'static str {
    FARE_PER_MILE
}
