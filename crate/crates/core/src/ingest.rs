//! Parsing and filtering of trip-level and tract-level input files.
//!
//! Trips are read as delimited text with a header row. A [`ColumnMapping`]
//! ties the canonical trip columns to the header names of a particular
//! source; the default is the Chicago transportation-network-provider
//! export. Rows that are shared, incomplete or that have non-positive
//! distance or duration are dropped and counted in [`IngestStats`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid column mapping: {0}")]
    Mapping(String),
    #[error("required column '{canonical}' (header '{header}') not found")]
    MissingColumn { canonical: String, header: String },
    #[error("malformed row {row}: {reason}")]
    Malformed { row: u64, reason: String },
    #[error("row {row}: duplicate geoid {geoid}")]
    DuplicateGeoid { row: u64, geoid: String },
    #[error("row {row}: area_m2 must be positive, got {value}")]
    NonPositiveArea { row: u64, value: f64 },
    #[error("row {row}: {column} = {value} outside [0, 1]")]
    ValueOutOfRange { row: u64, column: String, value: f64 },
    #[error("row {row}: {column} = {value} is negative")]
    NegativeMoe { row: u64, column: String, value: f64 },
    #[error("tract header: {0}")]
    UnpairedColumn(String),
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;

/// Census tract identifier: 11 ASCII digits (state, county, tract).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Geoid(String);

impl Geoid {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for Geoid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.len() == 11 && s.bytes().all(|b| b.is_ascii_digit()) {
            Ok(Geoid(s.to_string()))
        } else {
            Err(format!("invalid GEOID '{s}' (expected 11 digits)"))
        }
    }
}

impl TryFrom<String> for Geoid {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Geoid> for String {
    fn from(g: Geoid) -> String {
        g.0
    }
}

impl fmt::Display for Geoid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripRecord {
    pub trip_id: String,
    pub start_time: NaiveDateTime,
    pub end_time: NaiveDateTime,
    pub seconds: u64,
    pub miles: f64,
    pub pickup_tract: Geoid,
    pub dropoff_tract: Geoid,
    pub fare: f64,
    pub shared: bool,
}

impl TripRecord {
    pub fn fare_per_mile(&self) -> f64 {
        self.fare / self.miles
    }

    pub fn seconds_per_mile(&self) -> f64 {
        self.seconds as f64 / self.miles
    }

    /// The record-level filters applied by [`TripReader`].
    pub fn passes_filters(&self) -> bool {
        !self.shared && self.miles > 0.0 && self.seconds > 0 && self.fare >= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripSource {
    /// Requires a shared-trip column; shared rides are dropped.
    Ridehailing,
    /// No shared-trip column is expected.
    Taxi,
}

impl FromStr for TripSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ridehailing" => Ok(Self::Ridehailing),
            "taxi" => Ok(Self::Taxi),
            other => Err(format!("unknown mode '{other}' (expected ridehailing or taxi)")),
        }
    }
}

/// Which money column is read into [`TripRecord::fare`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FareColumn {
    #[default]
    Base,
    Total,
}

impl FromStr for FareColumn {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "base" | "fare" => Ok(Self::Base),
            "total" | "trip_total" => Ok(Self::Total),
            other => Err(format!("unknown fare column '{other}' (expected base or total)")),
        }
    }
}

/// Canonical column → source header name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMapping {
    pub trip_id: String,
    pub start_time: String,
    pub end_time: String,
    pub seconds: String,
    pub miles: String,
    pub pickup_tract: String,
    pub dropoff_tract: String,
    pub fare: String,
    pub trip_total: String,
    pub shared: String,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self::chicago()
    }
}

impl ColumnMapping {
    /// Header names used by the Chicago data portal trip exports.
    pub fn chicago() -> Self {
        Self {
            trip_id: "Trip ID".into(),
            start_time: "Trip Start Timestamp".into(),
            end_time: "Trip End Timestamp".into(),
            seconds: "Trip Seconds".into(),
            miles: "Trip Miles".into(),
            pickup_tract: "Pickup Census Tract".into(),
            dropoff_tract: "Dropoff Census Tract".into(),
            fare: "Fare".into(),
            trip_total: "Trip Total".into(),
            shared: "Shared Trip Authorized".into(),
        }
    }

    /// Loads a JSON object of overrides; unspecified keys keep the Chicago names.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let file = open(path)?;
        serde_json::from_reader(file).map_err(|e| IngestError::Mapping(e.to_string()))
    }

    fn fare_header(&self, col: FareColumn) -> &str {
        match col {
            FareColumn::Base => &self.fare,
            FareColumn::Total => &self.trip_total,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub shared: u64,
    pub missing: u64,
    pub nonpositive_miles: u64,
    pub nonpositive_seconds: u64,
    pub malformed: u64,
}

impl DropCounts {
    pub fn total(&self) -> u64 {
        self.shared + self.missing + self.nonpositive_miles + self.nonpositive_seconds + self.malformed
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub rows_read: u64,
    pub retained: u64,
    pub dropped: DropCounts,
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub mapping: ColumnMapping,
    pub source: TripSource,
    pub fare_column: FareColumn,
    /// Malformed rows tolerated before a hard error.
    pub max_malformed: u64,
    pub delimiter: u8,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            mapping: ColumnMapping::chicago(),
            source: TripSource::Ridehailing,
            fare_column: FareColumn::Base,
            max_malformed: 0,
            delimiter: b',',
        }
    }
}

struct TripColumns {
    trip_id: usize,
    start_time: usize,
    end_time: usize,
    seconds: usize,
    miles: usize,
    pickup_tract: usize,
    dropoff_tract: usize,
    fare: usize,
    shared: Option<usize>,
}

impl TripColumns {
    fn resolve(headers: &csv::StringRecord, opts: &IngestOptions) -> Result<Self> {
        let index: HashMap<&str, usize> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim(), i))
            .collect();
        let find = |canonical: &str, header: &str| {
            index
                .get(header)
                .copied()
                .ok_or_else(|| IngestError::MissingColumn {
                    canonical: canonical.to_string(),
                    header: header.to_string(),
                })
        };
        let m = &opts.mapping;
        let shared = match opts.source {
            TripSource::Ridehailing => Some(find("shared", &m.shared)?),
            TripSource::Taxi => None,
        };
        Ok(Self {
            trip_id: find("trip_id", &m.trip_id)?,
            start_time: find("start_time", &m.start_time)?,
            end_time: find("end_time", &m.end_time)?,
            seconds: find("seconds", &m.seconds)?,
            miles: find("miles", &m.miles)?,
            pickup_tract: find("pickup_tract", &m.pickup_tract)?,
            dropoff_tract: find("dropoff_tract", &m.dropoff_tract)?,
            fare: find("fare", m.fare_header(opts.fare_column))?,
            shared,
        })
    }
}

enum RowOutcome {
    Keep(TripRecord),
    Shared,
    Missing,
    NonPositiveMiles,
    NonPositiveSeconds,
    Malformed(String),
}

pub fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "y" | "1" => Some(true),
        "false" | "n" | "0" => Some(false),
        _ => None,
    }
}

const TIMESTAMP_FORMATS: &[&str] = &[
    "%m/%d/%Y %I:%M:%S %p",
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
];

/// Timestamp format written by [`TripWriter`] (the Chicago portal layout).
pub const TIMESTAMP_OUT: &str = "%m/%d/%Y %I:%M:%S %p";

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

fn parse_money(s: &str) -> Option<f64> {
    let s = s.trim();
    let s = s.strip_prefix('$').unwrap_or(s);
    let v: f64 = s.replace(',', "").parse().ok()?;
    v.is_finite().then_some(v)
}

fn parse_seconds(s: &str) -> Option<i64> {
    let s = s.trim().replace(',', "");
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    let v: f64 = s.parse().ok()?;
    (v.is_finite() && v.fract() == 0.0).then_some(v as i64)
}

fn classify(rec: &csv::StringRecord, cols: &TripColumns) -> RowOutcome {
    let field = |i: usize| rec.get(i).map(str::trim).unwrap_or("");

    let shared = match cols.shared {
        Some(i) => match parse_bool(field(i)) {
            Some(b) => b,
            None if field(i).is_empty() => return RowOutcome::Missing,
            None => return RowOutcome::Malformed(format!("bad boolean '{}'", field(i))),
        },
        None => false,
    };
    if shared {
        return RowOutcome::Shared;
    }

    let required = [
        cols.trip_id,
        cols.start_time,
        cols.end_time,
        cols.seconds,
        cols.miles,
        cols.pickup_tract,
        cols.dropoff_tract,
        cols.fare,
    ];
    if required.iter().any(|&i| field(i).is_empty()) {
        return RowOutcome::Missing;
    }

    let Some(start_time) = parse_timestamp(field(cols.start_time)) else {
        return RowOutcome::Malformed(format!("bad timestamp '{}'", field(cols.start_time)));
    };
    let Some(end_time) = parse_timestamp(field(cols.end_time)) else {
        return RowOutcome::Malformed(format!("bad timestamp '{}'", field(cols.end_time)));
    };
    let Some(seconds) = parse_seconds(field(cols.seconds)) else {
        return RowOutcome::Malformed(format!("bad seconds '{}'", field(cols.seconds)));
    };
    let Some(miles) = parse_money(field(cols.miles)) else {
        return RowOutcome::Malformed(format!("bad miles '{}'", field(cols.miles)));
    };
    let fare = match parse_money(field(cols.fare)) {
        Some(f) if f >= 0.0 => f,
        _ => return RowOutcome::Malformed(format!("bad fare '{}'", field(cols.fare))),
    };
    let pickup_tract = match field(cols.pickup_tract).parse::<Geoid>() {
        Ok(g) => g,
        Err(e) => return RowOutcome::Malformed(e),
    };
    let dropoff_tract = match field(cols.dropoff_tract).parse::<Geoid>() {
        Ok(g) => g,
        Err(e) => return RowOutcome::Malformed(e),
    };

    if miles <= 0.0 {
        return RowOutcome::NonPositiveMiles;
    }
    if seconds <= 0 {
        return RowOutcome::NonPositiveSeconds;
    }

    RowOutcome::Keep(TripRecord {
        trip_id: field(cols.trip_id).to_string(),
        start_time,
        end_time,
        seconds: seconds as u64,
        miles,
        pickup_tract,
        dropoff_tract,
        fare,
        shared,
    })
}

/// Streaming trip parser. Yields retained records in input order and keeps
/// running [`IngestStats`]; memory use does not grow with the row count.
pub struct TripReader<R: Read> {
    reader: csv::Reader<R>,
    cols: TripColumns,
    record: csv::StringRecord,
    stats: IngestStats,
    max_malformed: u64,
    done: bool,
}

impl TripReader<File> {
    pub fn open(path: &Path, opts: &IngestOptions) -> Result<Self> {
        Self::new(open(path)?, opts)
    }
}

impl<R: Read> TripReader<R> {
    pub fn new(input: R, opts: &IngestOptions) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(opts.delimiter)
            .flexible(true)
            .from_reader(input);
        let headers = reader.headers()?.clone();
        let cols = TripColumns::resolve(&headers, opts)?;
        Ok(Self {
            reader,
            cols,
            record: csv::StringRecord::new(),
            stats: IngestStats::default(),
            max_malformed: opts.max_malformed,
            done: false,
        })
    }

    pub fn stats(&self) -> &IngestStats {
        &self.stats
    }

    /// Reads up to `max` retained records; an empty batch means end of input.
    pub fn read_batch(&mut self, max: usize) -> Result<Vec<TripRecord>> {
        let mut out = Vec::with_capacity(max.min(1 << 16));
        while out.len() < max {
            match self.next() {
                Some(r) => out.push(r?),
                None => break,
            }
        }
        Ok(out)
    }

    fn malformed(&mut self, row: u64, reason: String) -> Option<Result<TripRecord>> {
        self.stats.dropped.malformed += 1;
        if self.stats.dropped.malformed > self.max_malformed {
            self.done = true;
            return Some(Err(IngestError::Malformed { row, reason }));
        }
        None
    }
}

impl<R: Read> Iterator for TripReader<R> {
    type Item = Result<TripRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            let row = self.stats.rows_read + 1;
            match self.reader.read_record(&mut self.record) {
                Ok(false) => {
                    self.done = true;
                    return None;
                }
                Ok(true) => {}
                Err(e) => {
                    if !matches!(e.kind(), csv::ErrorKind::Utf8 { .. }) {
                        self.done = true;
                        return Some(Err(e.into()));
                    }
                    self.stats.rows_read += 1;
                    if let Some(err) = self.malformed(row, e.to_string()) {
                        return Some(err);
                    }
                    continue;
                }
            }
            self.stats.rows_read += 1;
            let d = &mut self.stats.dropped;
            match classify(&self.record, &self.cols) {
                RowOutcome::Keep(rec) => {
                    self.stats.retained += 1;
                    return Some(Ok(rec));
                }
                RowOutcome::Shared => d.shared += 1,
                RowOutcome::Missing => d.missing += 1,
                RowOutcome::NonPositiveMiles => d.nonpositive_miles += 1,
                RowOutcome::NonPositiveSeconds => d.nonpositive_seconds += 1,
                RowOutcome::Malformed(reason) => {
                    if let Some(err) = self.malformed(row, reason) {
                        return Some(err);
                    }
                }
            }
        }
        None
    }
}

/// Reads and filters a whole trips file.
pub fn load_trips(path: &Path, opts: &IngestOptions) -> Result<(Vec<TripRecord>, IngestStats)> {
    let mut reader = TripReader::open(path, opts)?;
    let trips = reader.by_ref().collect::<Result<Vec<_>>>()?;
    Ok((trips, *reader.stats()))
}

/// Writes trips using the mapping's header names (fare into the base fare column).
pub struct TripWriter<W: Write> {
    writer: csv::Writer<W>,
}

impl TripWriter<File> {
    pub fn create(path: &Path, mapping: &ColumnMapping) -> Result<Self> {
        let file = File::create(path).map_err(|source| IngestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::new(file, mapping)
    }
}

impl<W: Write> TripWriter<W> {
    pub fn new(out: W, mapping: &ColumnMapping) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record([
            &mapping.trip_id,
            &mapping.start_time,
            &mapping.end_time,
            &mapping.seconds,
            &mapping.miles,
            &mapping.pickup_tract,
            &mapping.dropoff_tract,
            &mapping.fare,
            &mapping.shared,
        ])?;
        Ok(Self { writer })
    }

    pub fn write(&mut self, t: &TripRecord) -> Result<()> {
        self.write_fields(t, t.dropoff_tract.as_str())
    }

    /// Writes a row with an empty dropoff tract.
    pub fn write_without_dropoff(&mut self, t: &TripRecord) -> Result<()> {
        self.write_fields(t, "")
    }

    fn write_fields(&mut self, t: &TripRecord, dropoff: &str) -> Result<()> {
        self.writer.write_record([
            t.trip_id.as_str(),
            &t.start_time.format(TIMESTAMP_OUT).to_string(),
            &t.end_time.format(TIMESTAMP_OUT).to_string(),
            &t.seconds.to_string(),
            &t.miles.to_string(),
            t.pickup_tract.as_str(),
            dropoff,
            &t.fare.to_string(),
            if t.shared { "true" } else { "false" },
        ])?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| IngestError::Csv(e.into()))
    }
}

/// ACS estimate variant: the point estimate, or the estimate shifted down/up
/// by its margin of error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimateVariant {
    Min,
    Point,
    Max,
}

impl EstimateVariant {
    pub const ALL: [EstimateVariant; 3] = [Self::Min, Self::Point, Self::Max];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Min => "min",
            Self::Point => "point",
            Self::Max => "max",
        }
    }
}

impl fmt::Display for EstimateVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimateVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "min" => Ok(Self::Min),
            "point" => Ok(Self::Point),
            "max" => Ok(Self::Max),
            other => Err(format!("unknown variant '{other}' (expected min, point or max)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub moe: f64,
}

impl Estimate {
    pub fn at(&self, variant: EstimateVariant) -> f64 {
        match variant {
            EstimateVariant::Min => (self.value - self.moe).clamp(0.0, 1.0),
            EstimateVariant::Point => self.value,
            EstimateVariant::Max => (self.value + self.moe).clamp(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TractProfile {
    pub geoid: Geoid,
    pub area_m2: f64,
    /// Absent entries mean the tract has no estimate for that attribute.
    pub attributes: BTreeMap<String, Estimate>,
}

/// Reads a tracts file: `geoid, area_m2`, then `<attr>, <attr>_moe` pairs.
pub fn load_tracts(path: &Path) -> Result<Vec<TractProfile>> {
    read_tracts(open(path)?)
}

pub fn read_tracts<R: Read>(input: R) -> Result<Vec<TractProfile>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(input);
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();

    let pos = |name: &str| headers.iter().position(|h| h == name);
    let geoid_col = pos("geoid").ok_or_else(|| IngestError::MissingColumn {
        canonical: "geoid".into(),
        header: "geoid".into(),
    })?;
    let area_col = pos("area_m2").ok_or_else(|| IngestError::MissingColumn {
        canonical: "area_m2".into(),
        header: "area_m2".into(),
    })?;

    let mut pairs: Vec<(String, usize, usize)> = Vec::new();
    let mut seen = HashSet::new();
    for (i, h) in headers.iter().enumerate() {
        if i == geoid_col || i == area_col {
            continue;
        }
        if !seen.insert(h.as_str()) {
            return Err(IngestError::UnpairedColumn(format!("column '{h}' appears twice")));
        }
        if let Some(base) = h.strip_suffix("_moe") {
            if pos(base).is_none() {
                return Err(IngestError::UnpairedColumn(format!(
                    "'{h}' has no matching value column '{base}'"
                )));
            }
        } else {
            let moe = pos(&format!("{h}_moe")).ok_or_else(|| {
                IngestError::UnpairedColumn(format!("'{h}' has no matching '{h}_moe' column"))
            })?;
            pairs.push((h.clone(), i, moe));
        }
    }

    let mut out = Vec::new();
    let mut geoids = HashSet::new();
    for (row_idx, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = row_idx as u64 + 1;
        let field = |i: usize| rec.get(i).map(str::trim).unwrap_or("");
        let malformed = |reason: String| IngestError::Malformed { row, reason };

        let geoid: Geoid = field(geoid_col).parse().map_err(malformed)?;
        if !geoids.insert(geoid.clone()) {
            return Err(IngestError::DuplicateGeoid {
                row,
                geoid: geoid.to_string(),
            });
        }
        let area_m2: f64 = field(area_col)
            .parse()
            .map_err(|_| malformed(format!("bad area_m2 '{}'", field(area_col))))?;
        if !(area_m2 > 0.0 && area_m2.is_finite()) {
            return Err(IngestError::NonPositiveArea { row, value: area_m2 });
        }

        let mut attributes = BTreeMap::new();
        for (name, vcol, mcol) in &pairs {
            let (v, m) = (field(*vcol), field(*mcol));
            if v.is_empty() && m.is_empty() {
                continue;
            }
            if v.is_empty() || m.is_empty() {
                return Err(IngestError::UnpairedColumn(format!(
                    "row {row}: '{name}' has a value or a margin but not both"
                )));
            }
            let value: f64 = v.parse().map_err(|_| malformed(format!("bad {name} '{v}'")))?;
            let moe: f64 = m
                .parse()
                .map_err(|_| malformed(format!("bad {name}_moe '{m}'")))?;
            if !(0.0..=1.0).contains(&value) {
                return Err(IngestError::ValueOutOfRange {
                    row,
                    column: name.clone(),
                    value,
                });
            }
            if !(moe >= 0.0 && moe.is_finite()) {
                return Err(IngestError::NegativeMoe {
                    row,
                    column: format!("{name}_moe"),
                    value: moe,
                });
            }
            attributes.insert(name.clone(), Estimate { value, moe });
        }
        out.push(TractProfile {
            geoid,
            area_m2,
            attributes,
        });
    }
    Ok(out)
}

pub fn write_tracts<W: Write>(out: W, tracts: &[TractProfile]) -> Result<()> {
    let names: BTreeSet<&str> = tracts
        .iter()
        .flat_map(|t| t.attributes.keys().map(String::as_str))
        .collect();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["geoid".to_string(), "area_m2".to_string()];
    for n in &names {
        header.push(n.to_string());
        header.push(format!("{n}_moe"));
    }
    w.write_record(&header)?;
    for t in tracts {
        let mut row = vec![t.geoid.to_string(), t.area_m2.to_string()];
        for n in &names {
            match t.attributes.get(*n) {
                Some(e) => {
                    row.push(e.value.to_string());
                    row.push(e.moe.to_string());
                }
                None => {
                    row.push(String::new());
                    row.push(String::new());
                }
            }
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| IngestError::Csv(e.into()))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}
