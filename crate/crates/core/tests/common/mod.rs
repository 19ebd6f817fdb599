//! Shared test helpers: a straight-line reference implementation of the
//! effect-size formulas and synthetic-city audit runs.
#![allow(dead_code)]

use impact_audit::aggregate::FARE_PER_MILE;
use impact_audit::audit::{build_tables, run_audit, AuditConfig, AuditReport};
use impact_audit::aggregate::Endpoint;
use impact_audit::ingest::EstimateVariant;
use impact_audit::synth::{generate, SynthSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct NaivePoint {
    pub t: f64,
    pub d: f64,
    pub n_below: usize,
    pub n_above: usize,
    pub var_t: f64,
    pub w: f64,
}

#[derive(Debug, Clone)]
pub struct NaiveCurve {
    pub points: Vec<NaivePoint>,
    pub between_var: f64,
    pub ces: f64,
}

/// Direct transcription: population sigma of y, groups x < t and x >= t,
/// var_t with d (or d squared), between variance as population variance of d.
pub fn naive_curve(x: &[f64], y: &[f64], thresholds: &[f64], min_group: usize, squared: bool) -> Option<NaiveCurve> {
    let n = y.len();
    let nf = n as f64;
    let mut total = 0.0;
    for v in y {
        total += v;
    }
    let mean = total / nf;
    let mut ss = 0.0;
    for v in y {
        ss += (v - mean) * (v - mean);
    }
    let sigma = (ss / nf).sqrt();

    let mut points = Vec::new();
    for &t in thresholds {
        let (mut sb, mut nb, mut sa, mut na) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..n {
            if x[i] < t {
                sb += y[i];
                nb += 1;
            } else {
                sa += y[i];
                na += 1;
            }
        }
        if nb < min_group || na < min_group {
            continue;
        }
        let d = (sb / nb as f64 - sa / na as f64) / sigma;
        let dd = if squared { d * d } else { d };
        let var_t = (nf / (nb as f64 * na as f64) + dd / (2.0 * (nf - 2.0))) * (nf / (nf - 2.0));
        points.push(NaivePoint {
            t,
            d,
            n_below: nb,
            n_above: na,
            var_t,
            w: 0.0,
        });
    }
    if points.len() < 2 {
        return None;
    }
    let k = points.len() as f64;
    let mut dsum = 0.0;
    for p in &points {
        dsum += p.d;
    }
    let dmean = dsum / k;
    let mut between = 0.0;
    for p in &points {
        between += (p.d - dmean) * (p.d - dmean);
    }
    between /= k;
    let (mut num, mut den) = (0.0, 0.0);
    for p in &mut points {
        p.w = 1.0 / (between + p.var_t);
        num += p.d * p.w;
        den += p.w;
    }
    Some(NaiveCurve {
        points,
        between_var: between,
        ces: num / den,
    })
}

/// The default grid computed independently: percentiles 1..99 in `count`
/// steps with linear interpolation between order statistics.
pub fn naive_percentile_grid(x: &[f64], count: usize) -> Vec<f64> {
    let mut s = x.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out: Vec<f64> = Vec::new();
    for i in 0..count {
        let p = 1.0 + 98.0 * i as f64 / (count - 1) as f64;
        let h = (s.len() - 1) as f64 * p / 100.0;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(s.len() - 1);
        let v = s[lo] + (h - lo as f64) * (s[hi] - s[lo]);
        if out.last() != Some(&v) {
            out.push(v);
        }
    }
    out
}

/// Random (x, y) instance: x sometimes has ties, y has a random linear link
/// to x plus noise.
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let ties = rng.random_bool(0.3);
    let slope: f64 = rng.random_range(-2.0..2.0);
    let scale: f64 = rng.random_range(0.1..50.0);
    let x: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.random();
            if ties {
                (v * 10.0).floor() / 10.0
            } else {
                v
            }
        })
        .collect();
    let y = x
        .iter()
        .map(|&xi| scale * (slope * xi + rng.random_range(-1.0..1.0)))
        .collect();
    (x, y)
}

/// Strictly increasing thresholds drawn inside [min x, max x].
pub fn random_grid(rng: &mut ChaCha8Rng, x: &[f64]) -> Vec<f64> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let k = rng.random_range(3..60);
    let mut g: Vec<f64> = (0..k).map(|_| rng.random_range(lo..=hi)).collect();
    g.sort_by(|a, b| a.partial_cmp(b).unwrap());
    g.dedup();
    g
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// City spec used by the injected-bias checks: 500 tracts, about 200 trips each.
pub fn city_spec(seed: u64, attribute: &str, slope: f64) -> SynthSpec {
    let mut spec = SynthSpec {
        seed,
        ..Default::default()
    };
    if slope != 0.0 {
        spec.effects.insert(attribute.to_string(), slope);
    }
    spec
}

/// Generates a city and audits `attributes` x fare per mile at the point
/// estimate for the given endpoints.
pub fn audit_city(spec: &SynthSpec, attributes: &[&str], endpoints: &[Endpoint], iterations: usize) -> AuditReport {
    let city = generate(spec).expect("valid spec");
    let config = AuditConfig {
        attributes: attributes.iter().map(|s| s.to_string()).collect(),
        outcomes: vec![FARE_PER_MILE.to_string()],
        endpoints: endpoints.to_vec(),
        variants: vec![EstimateVariant::Point],
        iterations,
        seed: spec.seed,
        ..Default::default()
    };
    let (tables, _) = build_tables(&city.trips, &city.tracts, &config.endpoints, &config.variants).expect("tables");
    run_audit(&tables, &config).expect("audit")
}
