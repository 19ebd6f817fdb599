//! Per-tract reduction of trips and assembly of aligned attribute/outcome
//! tables for one endpoint role.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{EstimateVariant, Geoid, TractProfile, TripRecord};
use crate::numeric::ExactSum;

pub const FARE_PER_MILE: &str = "fare_per_mile";
pub const SECONDS_PER_MILE: &str = "seconds_per_mile";
pub const PICKUP_DENSITY: &str = "pickup_density";
pub const DROPOFF_DENSITY: &str = "dropoff_density";

pub const OUTCOMES: [&str; 4] = [FARE_PER_MILE, SECONDS_PER_MILE, PICKUP_DENSITY, DROPOFF_DENSITY];

#[derive(Debug, Error, PartialEq)]
pub enum AggregateError {
    #[error("{endpoint} table ({variant}) has {found} joined tracts; at least 3 are required")]
    TooFewTracts {
        endpoint: Endpoint,
        variant: EstimateVariant,
        found: usize,
    },
    #[error("aggregates were computed for the {found} endpoint, table requested for {requested}")]
    EndpointMismatch { requested: Endpoint, found: Endpoint },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Pickup,
    Dropoff,
}

impl Endpoint {
    pub const BOTH: [Endpoint; 2] = [Endpoint::Pickup, Endpoint::Dropoff];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Pickup => "pickup",
            Self::Dropoff => "dropoff",
        }
    }

    fn tract<'a>(&self, t: &'a TripRecord) -> &'a Geoid {
        match self {
            Self::Pickup => &t.pickup_tract,
            Self::Dropoff => &t.dropoff_tract,
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Endpoint {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pickup" => Ok(Self::Pickup),
            "dropoff" => Ok(Self::Dropoff),
            other => Err(format!("unknown endpoint '{other}' (expected pickup or dropoff)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TractAggregate {
    pub geoid: Geoid,
    pub endpoint: Endpoint,
    /// Mean of per-trip fare/mile over trips whose `endpoint` tract is this one.
    pub mean_fare_per_mile: Option<f64>,
    pub mean_seconds_per_mile: Option<f64>,
    pub pickup_density: f64,
    pub dropoff_density: f64,
    pub n_pickups: u64,
    pub n_dropoffs: u64,
}

impl TractAggregate {
    pub fn endpoint_count(&self) -> u64 {
        match self.endpoint {
            Endpoint::Pickup => self.n_pickups,
            Endpoint::Dropoff => self.n_dropoffs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregation {
    pub endpoint: Endpoint,
    /// One entry per tract with at least one pickup or dropoff, in tract-file order.
    pub tracts: Vec<TractAggregate>,
    pub unknown_pickup_tract: u64,
    pub unknown_dropoff_tract: u64,
}

#[derive(Clone, Default)]
struct Partial {
    n_pickups: u64,
    n_dropoffs: u64,
    fare_per_mile: ExactSum,
    seconds_per_mile: ExactSum,
}

#[derive(Clone)]
struct ChunkTotals {
    tracts: HashMap<usize, Partial>,
    unknown_pickup: u64,
    unknown_dropoff: u64,
}

const CHUNK: usize = 1 << 15;

/// Reduces trips to per-tract means and counts for one endpoint role.
///
/// Sums are exact, so the result is identical for any trip order and any
/// chunking of the parallel reduction.
pub fn aggregate_trips(trips: &[TripRecord], tracts: &[TractProfile], endpoint: Endpoint) -> Aggregation {
    let index: HashMap<&str, usize> = tracts
        .iter()
        .enumerate()
        .map(|(i, t)| (t.geoid.as_str(), i))
        .collect();

    let chunks: Vec<ChunkTotals> = trips
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = ChunkTotals {
                tracts: HashMap::new(),
                unknown_pickup: 0,
                unknown_dropoff: 0,
            };
            for t in chunk {
                match index.get(t.pickup_tract.as_str()) {
                    Some(&i) => acc.tracts.entry(i).or_default().n_pickups += 1,
                    None => acc.unknown_pickup += 1,
                }
                match index.get(t.dropoff_tract.as_str()) {
                    Some(&i) => acc.tracts.entry(i).or_default().n_dropoffs += 1,
                    None => acc.unknown_dropoff += 1,
                }
                if let Some(&i) = index.get(endpoint.tract(t).as_str()) {
                    let p = acc.tracts.get_mut(&i).expect("counted above");
                    p.fare_per_mile.add(t.fare_per_mile());
                    p.seconds_per_mile.add(t.seconds_per_mile());
                }
            }
            acc
        })
        .collect();

    let mut totals: Vec<Partial> = vec![Partial::default(); tracts.len()];
    let (mut unknown_pickup, mut unknown_dropoff) = (0, 0);
    for c in &chunks {
        unknown_pickup += c.unknown_pickup;
        unknown_dropoff += c.unknown_dropoff;
        for (&i, p) in &c.tracts {
            let t = &mut totals[i];
            t.n_pickups += p.n_pickups;
            t.n_dropoffs += p.n_dropoffs;
            t.fare_per_mile.merge(&p.fare_per_mile);
            t.seconds_per_mile.merge(&p.seconds_per_mile);
        }
    }

    let out = tracts
        .iter()
        .zip(&totals)
        .filter(|(_, p)| p.n_pickups + p.n_dropoffs > 0)
        .map(|(tract, p)| {
            let n = match endpoint {
                Endpoint::Pickup => p.n_pickups,
                Endpoint::Dropoff => p.n_dropoffs,
            };
            let mean = |s: &ExactSum| (n > 0).then(|| s.value() / n as f64);
            TractAggregate {
                geoid: tract.geoid.clone(),
                endpoint,
                mean_fare_per_mile: mean(&p.fare_per_mile),
                mean_seconds_per_mile: mean(&p.seconds_per_mile),
                pickup_density: p.n_pickups as f64 / tract.area_m2,
                dropoff_density: p.n_dropoffs as f64 / tract.area_m2,
                n_pickups: p.n_pickups,
                n_dropoffs: p.n_dropoffs,
            }
        })
        .collect();

    Aggregation {
        endpoint,
        tracts: out,
        unknown_pickup_tract: unknown_pickup,
        unknown_dropoff_tract: unknown_dropoff,
    }
}

/// Aligned per-tract columns for one endpoint and estimate variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TractTable {
    pub endpoint: Endpoint,
    pub variant: EstimateVariant,
    pub geoids: Vec<Geoid>,
    /// Demographic attributes at `variant`, plus the two density columns.
    pub attribute_columns: BTreeMap<String, Vec<f64>>,
    pub outcome_columns: BTreeMap<String, Vec<f64>>,
    pub excluded_no_trips: usize,
    pub excluded_missing_attributes: usize,
}

impl TractTable {
    pub fn len(&self) -> usize {
        self.geoids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geoids.is_empty()
    }

    pub fn attribute(&self, name: &str) -> Option<&[f64]> {
        self.attribute_columns.get(name).map(Vec::as_slice)
    }

    pub fn outcome(&self, name: &str) -> Option<&[f64]> {
        self.outcome_columns.get(name).map(Vec::as_slice)
    }

    /// Delimited export keyed by geoid: attributes then outcomes, each prefixed.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["geoid".to_string()];
        header.extend(self.attribute_columns.keys().map(|k| format!("attr:{k}")));
        header.extend(self.outcome_columns.keys().map(|k| format!("outcome:{k}")));
        w.write_record(&header)?;
        for (i, g) in self.geoids.iter().enumerate() {
            let mut row = vec![g.to_string()];
            row.extend(self.attribute_columns.values().map(|c| c[i].to_string()));
            row.extend(self.outcome_columns.values().map(|c| c[i].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Joins aggregates with tract profiles. Tracts without trips at the endpoint,
/// or missing any demographic attribute present elsewhere in the file, are
/// excluded and counted.
pub fn build_table(
    aggregation: &Aggregation,
    tracts: &[TractProfile],
    endpoint: Endpoint,
    variant: EstimateVariant,
) -> Result<TractTable, AggregateError> {
    if aggregation.endpoint != endpoint {
        return Err(AggregateError::EndpointMismatch {
            requested: endpoint,
            found: aggregation.endpoint,
        });
    }
    let profiles: HashMap<&Geoid, &TractProfile> = tracts.iter().map(|t| (&t.geoid, t)).collect();
    let names: BTreeSet<&str> = tracts
        .iter()
        .flat_map(|t| t.attributes.keys().map(String::as_str))
        .collect();

    let mut geoids = Vec::new();
    let mut attrs: BTreeMap<String, Vec<f64>> = names.iter().map(|n| (n.to_string(), Vec::new())).collect();
    attrs.insert(PICKUP_DENSITY.into(), Vec::new());
    attrs.insert(DROPOFF_DENSITY.into(), Vec::new());
    let mut outcomes: BTreeMap<String, Vec<f64>> =
        OUTCOMES.iter().map(|n| (n.to_string(), Vec::new())).collect();
    let mut excluded_no_trips = tracts.len() - aggregation.tracts.len();
    let mut excluded_missing_attributes = 0;

    for agg in &aggregation.tracts {
        let (Some(fpm), Some(spm)) = (agg.mean_fare_per_mile, agg.mean_seconds_per_mile) else {
            excluded_no_trips += 1;
            continue;
        };
        let Some(profile) = profiles.get(&agg.geoid) else {
            continue;
        };
        if names.iter().any(|n| !profile.attributes.contains_key(*n)) {
            excluded_missing_attributes += 1;
            continue;
        }
        geoids.push(agg.geoid.clone());
        for (name, est) in &profile.attributes {
            attrs.get_mut(name).unwrap().push(est.at(variant));
        }
        attrs.get_mut(PICKUP_DENSITY).unwrap().push(agg.pickup_density);
        attrs.get_mut(DROPOFF_DENSITY).unwrap().push(agg.dropoff_density);
        outcomes.get_mut(FARE_PER_MILE).unwrap().push(fpm);
        outcomes.get_mut(SECONDS_PER_MILE).unwrap().push(spm);
        outcomes.get_mut(PICKUP_DENSITY).unwrap().push(agg.pickup_density);
        outcomes.get_mut(DROPOFF_DENSITY).unwrap().push(agg.dropoff_density);
    }

    if geoids.len() < 3 {
        return Err(AggregateError::TooFewTracts {
            endpoint,
            variant,
            found: geoids.len(),
        });
    }

    Ok(TractTable {
        endpoint,
        variant,
        geoids,
        attribute_columns: attrs,
        outcome_columns: outcomes,
        excluded_no_trips,
        excluded_missing_attributes,
    })
}
