//! Synthetic cities with known injected pricing bias.
//!
//! Fare model per trip: `fare = miles * max(0, base + Σ slope·attr(pickup) + ε)`
//! with `ε ~ Normal(0, noise)`. Miles and seconds-per-mile are log-normal,
//! tract attributes are Beta draws. Every random draw is made regardless of
//! the configured slopes, so two specs differing only in `effects` share the
//! same tracts, trips and noise for a given seed.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{write_tracts, ColumnMapping, Estimate, Geoid, IngestError, TractProfile, TripRecord, TripWriter};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error("io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

/// Log-normal parameterized by its median and log-scale sigma.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalParams {
    pub median: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripsPerTract {
    Fixed(u64),
    Poisson(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_tracts: usize,
    pub attributes: BTreeMap<String, BetaParams>,
    /// Margins of error are drawn uniformly from [0, max_moe].
    pub max_moe: f64,
    pub area_m2: LogNormalParams,
    pub trips_per_tract: TripsPerTract,
    /// USD per mile.
    pub base_rate: f64,
    /// attribute → slope in USD/mi per unit attribute, applied at the pickup tract.
    pub effects: BTreeMap<String, f64>,
    /// Standard deviation of the per-trip rate noise, USD/mi.
    pub noise: f64,
    pub miles: LogNormalParams,
    pub seconds_per_mile: LogNormalParams,
    pub anomaly_rate: f64,
    pub anomaly_multiplier: f64,
    pub shared_rate: f64,
    pub missing_rate: f64,
    /// State + county digits prepended to tract codes.
    pub geoid_prefix: String,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let beta = |alpha, beta| BetaParams { alpha, beta };
        Self {
            n_tracts: 500,
            attributes: [
                ("pct_nonwhite", beta(1.2, 1.2)),
                ("pct_over_40", beta(5.0, 6.0)),
                ("pct_hs_or_less", beta(2.0, 3.0)),
                ("pct_below_poverty", beta(1.5, 6.0)),
                ("pct_noncitizen", beta(1.2, 8.0)),
                ("pct_below_median_house", beta(2.0, 2.0)),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
            max_moe: 0.05,
            area_m2: LogNormalParams {
                median: 1.0e6,
                sigma: 0.5,
            },
            trips_per_tract: TripsPerTract::Poisson(200.0),
            base_rate: 2.5,
            effects: BTreeMap::new(),
            noise: 1.0,
            miles: LogNormalParams {
                median: 3.0,
                sigma: 0.6,
            },
            seconds_per_mile: LogNormalParams {
                median: 180.0,
                sigma: 0.3,
            },
            anomaly_rate: 0.0,
            anomaly_multiplier: 100.0,
            shared_rate: 0.0,
            missing_rate: 0.0,
            geoid_prefix: "17031".into(),
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.n_tracts < 3 {
            return bad(format!("n_tracts must be at least 3, got {}", self.n_tracts));
        }
        if self.n_tracts > 999_999 {
            return bad("n_tracts must fit in 6 tract digits".into());
        }
        if !(self.noise > 0.0) {
            return bad(format!("noise must be positive, got {}", self.noise));
        }
        for (name, r) in [
            ("anomaly_rate", self.anomaly_rate),
            ("shared_rate", self.shared_rate),
            ("missing_rate", self.missing_rate),
            ("max_moe", self.max_moe),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must be in [0, 1], got {r}"));
            }
        }
        if !(self.anomaly_multiplier > 0.0) {
            return bad("anomaly_multiplier must be positive".into());
        }
        if self.geoid_prefix.len() != 5 || !self.geoid_prefix.bytes().all(|b| b.is_ascii_digit()) {
            return bad(format!("geoid_prefix '{}' must be 5 digits", self.geoid_prefix));
        }
        for (name, b) in &self.attributes {
            if !(b.alpha > 0.0 && b.beta > 0.0) {
                return bad(format!("Beta parameters for {name} must be positive"));
            }
        }
        if let Some(name) = self.effects.keys().find(|k| !self.attributes.contains_key(*k)) {
            return bad(format!("effect on unknown attribute '{name}'"));
        }
        for (name, p) in [
            ("area_m2", self.area_m2),
            ("miles", self.miles),
            ("seconds_per_mile", self.seconds_per_mile),
        ] {
            if !(p.median > 0.0 && p.sigma >= 0.0) {
                return bad(format!("{name}: median must be positive and sigma nonnegative"));
            }
        }
        match self.trips_per_tract {
            TripsPerTract::Poisson(m) if !(m > 0.0) => bad("Poisson mean must be positive".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub base_rate: f64,
    pub effects: BTreeMap<String, f64>,
    pub noise: f64,
    pub n_tracts: usize,
    pub n_trips: usize,
    pub anomaly_rate: f64,
    pub anomaly_multiplier: f64,
    pub anomalous_trip_ids: Vec<String>,
    pub shared_trips: usize,
    pub missing_dropoff_trips: usize,
}

#[derive(Debug, Clone)]
pub struct SynthCity {
    pub tracts: Vec<TractProfile>,
    pub trips: Vec<TripRecord>,
    /// Trips written with an empty dropoff tract.
    pub missing_dropoff: Vec<bool>,
    pub anomalous: Vec<bool>,
    pub truth: GroundTruth,
}

fn lognormal(p: LogNormalParams) -> LogNormal<f64> {
    LogNormal::new(p.median.ln(), p.sigma).expect("validated parameters")
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCity, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let area = lognormal(spec.area_m2);
    let betas: Vec<(&String, Beta<f64>)> = spec
        .attributes
        .iter()
        .map(|(k, b)| (k, Beta::new(b.alpha, b.beta).expect("validated parameters")))
        .collect();

    let mut tracts = Vec::with_capacity(spec.n_tracts);
    for i in 0..spec.n_tracts {
        let geoid: Geoid = format!("{}{:06}", spec.geoid_prefix, 100 + i)
            .parse()
            .expect("prefix and index are digits");
        let area_m2 = area.sample(&mut rng);
        let mut attributes = BTreeMap::new();
        for (name, dist) in &betas {
            let value = dist.sample(&mut rng);
            let moe = rng.random::<f64>() * spec.max_moe;
            attributes.insert((*name).clone(), Estimate { value, moe });
        }
        tracts.push(TractProfile {
            geoid,
            area_m2,
            attributes,
        });
    }

    let rates: Vec<f64> = tracts
        .iter()
        .map(|t| {
            spec.base_rate
                + spec
                    .effects
                    .iter()
                    .map(|(name, slope)| slope * t.attributes[name].value)
                    .sum::<f64>()
        })
        .collect();

    let miles_dist = lognormal(spec.miles);
    let spm_dist = lognormal(spec.seconds_per_mile);
    let noise = Normal::new(0.0, spec.noise).expect("validated noise");
    let poisson = match spec.trips_per_tract {
        TripsPerTract::Poisson(m) => Some(Poisson::new(m).expect("validated mean")),
        TripsPerTract::Fixed(_) => None,
    };
    let epoch = NaiveDate::from_ymd_opt(2018, 11, 1)
        .expect("valid date")
        .and_hms_opt(0, 0, 0)
        .expect("valid time");
    const SLOTS: u64 = 334 * 96;

    let mut trips = Vec::new();
    let mut missing_dropoff = Vec::new();
    let mut anomalous = Vec::new();
    let mut anomalous_ids = Vec::new();
    for (pickup, rate) in rates.iter().enumerate() {
        let n = match (spec.trips_per_tract, &poisson) {
            (TripsPerTract::Fixed(n), _) => n,
            (_, Some(p)) => p.sample(&mut rng) as u64,
            _ => unreachable!(),
        };
        for _ in 0..n {
            let dropoff = rng.random_range(0..spec.n_tracts);
            let miles = miles_dist.sample(&mut rng);
            let spm = spm_dist.sample(&mut rng);
            let eps = noise.sample(&mut rng);
            let slot = rng.random_range(0..SLOTS);
            let is_anomaly = rng.random::<f64>() < spec.anomaly_rate;
            let is_shared = rng.random::<f64>() < spec.shared_rate;
            let is_missing = rng.random::<f64>() < spec.missing_rate;

            let seconds = ((miles * spm).round() as u64).max(1);
            let mut fare = miles * (rate + eps).max(0.0);
            if is_anomaly {
                fare *= spec.anomaly_multiplier;
            }
            let start_time: NaiveDateTime = epoch + Duration::minutes(15 * slot as i64);
            let end_time = start_time + Duration::minutes(15 * ((seconds as i64 + 450) / 900));
            let trip_id = format!("synth-{:09}", trips.len());
            if is_anomaly {
                anomalous_ids.push(trip_id.clone());
            }
            trips.push(TripRecord {
                trip_id,
                start_time,
                end_time,
                seconds,
                miles,
                pickup_tract: tracts[pickup].geoid.clone(),
                dropoff_tract: tracts[dropoff].geoid.clone(),
                fare,
                shared: is_shared,
            });
            missing_dropoff.push(is_missing);
            anomalous.push(is_anomaly);
        }
    }

    let truth = GroundTruth {
        seed: spec.seed,
        base_rate: spec.base_rate,
        effects: spec.effects.clone(),
        noise: spec.noise,
        n_tracts: spec.n_tracts,
        n_trips: trips.len(),
        anomaly_rate: spec.anomaly_rate,
        anomaly_multiplier: spec.anomaly_multiplier,
        anomalous_trip_ids: anomalous_ids,
        shared_trips: trips.iter().filter(|t| t.shared).count(),
        missing_dropoff_trips: missing_dropoff.iter().filter(|&&m| m).count(),
    };
    Ok(SynthCity {
        tracts,
        trips,
        missing_dropoff,
        anomalous,
        truth,
    })
}

/// Writes `trips.csv` (Chicago portal headers), `tracts.csv` and `truth.json`.
pub fn write_city(city: &SynthCity, dir: &Path) -> Result<(), SynthError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| SynthError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;

    let mut w = TripWriter::create(&dir.join("trips.csv"), &ColumnMapping::chicago())?;
    for (t, &missing) in city.trips.iter().zip(&city.missing_dropoff) {
        if missing {
            w.write_without_dropoff(t)?;
        } else {
            w.write(t)?;
        }
    }
    w.finish()?;

    let tracts_path = dir.join("tracts.csv");
    let f = File::create(&tracts_path).map_err(io(&tracts_path))?;
    write_tracts(BufWriter::new(f), &city.tracts)?;

    let truth_path = dir.join("truth.json");
    let mut text = serde_json::to_string_pretty(&city.truth)?;
    text.push('\n');
    fs::write(&truth_path, text).map_err(io(&truth_path))?;
    Ok(())
}
