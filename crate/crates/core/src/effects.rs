//! Threshold-swept Cohen's d, random-effects combination, permutation
//! significance and Pearson correlation.
//!
//! For an attribute vector `x` and an outcome vector `y` over the same tracts,
//! every threshold `t` splits the tracts into a below group (`x < t`) and an
//! above group (`x >= t`). The effect at `t` is
//!
//! ```text
//! d(t)     = (mean(y | below) - mean(y | above)) / sd(y)
//! var_t(t) = (n / (n_b n_a) + d / (2 (n - 2))) * n / (n - 2)      n = n_b + n_a
//! w(t)     = 1 / (var(d) + var_t(t))
//! ces      = sum(d w) / sum(w)
//! ```
//!
//! where `sd(y)` is the population standard deviation of the whole outcome
//! vector and `var(d)` the population variance of the retained `d` values.
//! [`VarianceForm::Squared`] swaps the `d` in `var_t` for `d^2`.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{percentile_sorted, sorted_copy, ExactSum};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EffectsError {
    #[error("x and y lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 observations, got {0}")]
    TooFewObservations(usize),
    #[error("non-finite input value")]
    NonFinite,
    #[error("constant outcome")]
    ConstantOutcome,
    #[error("constant vector")]
    ConstantVector,
    #[error("invalid threshold grid: {0}")]
    InvalidGrid(String),
    #[error("degenerate sweep: {valid} valid threshold(s), at least 2 required")]
    DegenerateSweep { valid: usize },
    #[error("no effect points to combine")]
    EmptyPoints,
    #[error("iterations must be at least 1")]
    NoIterations,
    #[error("permutation iteration {iteration} stayed degenerate after {retries} redraws")]
    RetryCapExceeded { iteration: usize, retries: usize },
}

pub type Result<T, E = EffectsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceForm {
    /// Second term linear in d.
    #[default]
    Paper,
    /// Conventional form with d squared.
    Squared,
}

impl FromStr for VarianceForm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Self::Paper),
            "squared" => Ok(Self::Squared),
            other => Err(format!("unknown variance form '{other}' (expected paper or squared)")),
        }
    }
}

impl fmt::Display for VarianceForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Paper => "paper",
            Self::Squared => "squared",
        })
    }
}

/// How thresholds are chosen from the observed attribute values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ThresholdGrid {
    /// `count` evenly spaced percentiles from the 1st to the 99th
    /// (linear interpolation), duplicates removed.
    Percentiles { count: usize },
    /// Every distinct observed value.
    Distinct,
    Explicit(Vec<f64>),
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self::Percentiles { count: 99 }
    }
}

impl ThresholdGrid {
    /// Strictly increasing thresholds inside `[min(x), max(x)]`.
    pub fn resolve(&self, x: &[f64]) -> Vec<f64> {
        if x.is_empty() {
            return Vec::new();
        }
        let sorted = sorted_copy(x);
        let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
        let mut out: Vec<f64> = match self {
            Self::Percentiles { count } => match *count {
                0 => Vec::new(),
                1 => vec![percentile_sorted(&sorted, 50.0)],
                c => (0..c)
                    .map(|i| percentile_sorted(&sorted, 1.0 + 98.0 * i as f64 / (c - 1) as f64))
                    .collect(),
            },
            Self::Distinct => sorted.clone(),
            Self::Explicit(t) => t.iter().copied().filter(|t| (lo..=hi).contains(t)).collect(),
        };
        out.dedup();
        out
    }
}

impl FromStr for ThresholdGrid {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "distinct" {
            return Ok(Self::Distinct);
        }
        if let Some(c) = s.strip_prefix("percentiles:") {
            let count = c.parse().map_err(|_| format!("bad percentile count '{c}'"))?;
            if count == 0 {
                return Err("percentile count must be positive".into());
            }
            return Ok(Self::Percentiles { count });
        }
        if let Some(list) = s.strip_prefix("explicit:") {
            let t = list
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| format!("bad threshold '{v}'")))
                .collect::<Result<Vec<_>, _>>()?;
            return Ok(Self::Explicit(t));
        }
        Err(format!(
            "unknown grid '{s}' (expected percentiles:<count>, distinct or explicit:<t1,t2,...>)"
        ))
    }
}

impl fmt::Display for ThresholdGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Percentiles { count } => write!(f, "percentiles:{count}"),
            Self::Distinct => f.write_str("distinct"),
            Self::Explicit(t) => {
                let parts: Vec<String> = t.iter().map(f64::to_string).collect();
                write!(f, "explicit:{}", parts.join(","))
            }
        }
    }
}

impl TryFrom<String> for ThresholdGrid {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ThresholdGrid> for String {
    fn from(g: ThresholdGrid) -> String {
        g.to_string()
    }
}

/// Resampling used to build the null distribution of the combined effect.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PermScheme {
    /// Randomly re-pair the full outcome vector with the attribute vector.
    #[default]
    Shuffle,
    /// Draw a random subset of pairs (this fraction of N) and shuffle outcomes within it.
    Subset { fraction: f64 },
}

impl FromStr for PermScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "shuffle" {
            return Ok(Self::Shuffle);
        }
        if let Some(f) = s.strip_prefix("subset:") {
            let fraction: f64 = f.parse().map_err(|_| format!("bad subset fraction '{f}'"))?;
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(format!("subset fraction {fraction} outside (0, 1]"));
            }
            return Ok(Self::Subset { fraction });
        }
        Err(format!("unknown permutation scheme '{s}' (expected shuffle or subset:<fraction>)"))
    }
}

impl fmt::Display for PermScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Shuffle => f.write_str("shuffle"),
            Self::Subset { fraction } => write!(f, "subset:{fraction}"),
        }
    }
}

impl TryFrom<String> for PermScheme {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<PermScheme> for String {
    fn from(p: PermScheme) -> String {
        p.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectPoint {
    pub t: f64,
    pub d: f64,
    pub n_below: usize,
    pub n_above: usize,
    pub var_t: f64,
    /// Random-effects weight, zero until the point is part of a combined curve.
    pub w: f64,
    pub mean_below: f64,
    pub mean_above: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectCurve {
    pub points: Vec<EffectPoint>,
    pub between_var: f64,
    pub ces: f64,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub min_group: usize,
    pub variance_form: VarianceForm,
    /// Accept a single valid threshold (between-variance 0) instead of failing.
    pub allow_single_point: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            min_group: 2,
            variance_form: VarianceForm::Paper,
            allow_single_point: false,
        }
    }
}

/// Within-threshold variance of a single d.
pub fn within_variance(d: f64, n_below: usize, n_above: usize, form: VarianceForm) -> f64 {
    let (nb, na) = (n_below as f64, n_above as f64);
    let n = nb + na;
    let dd = match form {
        VarianceForm::Paper => d,
        VarianceForm::Squared => d * d,
    };
    (n / (nb * na) + dd / (2.0 * (n - 2.0))) * (n / (n - 2.0))
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(EffectsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(EffectsError::TooFewObservations(x.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(EffectsError::NonFinite);
    }
    Ok(())
}

/// Exact mean and population standard deviation.
fn mean_sd(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().copied().collect::<ExactSum>().value() / n;
    let ss = y
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .collect::<ExactSum>()
        .value();
    (mean, (ss / n).sqrt())
}

fn outcome_scale(y: &[f64]) -> Result<(f64, f64)> {
    let (mean, sd) = mean_sd(y);
    if !(sd > 0.0) {
        return Err(EffectsError::ConstantOutcome);
    }
    Ok((mean, sd))
}

/// Cohen's d at a single threshold; `None` when either group is smaller than `min_group`.
pub fn cohen_d(
    x: &[f64],
    y: &[f64],
    t: f64,
    min_group: usize,
    form: VarianceForm,
) -> Result<Option<EffectPoint>> {
    check_pair(x, y)?;
    let (_, sd) = outcome_scale(y)?;
    let (mut below, mut above) = (ExactSum::new(), ExactSum::new());
    let (mut nb, mut na) = (0usize, 0usize);
    for (&xi, &yi) in x.iter().zip(y) {
        if xi < t {
            below.add(yi);
            nb += 1;
        } else {
            above.add(yi);
            na += 1;
        }
    }
    if nb < min_group.max(1) || na < min_group.max(1) {
        return Ok(None);
    }
    let mean_below = below.value() / nb as f64;
    let mean_above = above.value() / na as f64;
    let d = (mean_below - mean_above) / sd;
    Ok(Some(EffectPoint {
        t,
        d,
        n_below: nb,
        n_above: na,
        var_t: within_variance(d, nb, na, form),
        w: 0.0,
        mean_below,
        mean_above,
    }))
}

/// Random-effects combination of points: returns `(ces, between_var)`.
pub fn combined_effect(points: &[EffectPoint]) -> Result<(f64, f64)> {
    if points.is_empty() {
        return Err(EffectsError::EmptyPoints);
    }
    let between_var = between_variance(points);
    let (mut num, mut den) = (ExactSum::new(), ExactSum::new());
    for p in points {
        let w = 1.0 / (between_var + p.var_t);
        num.add(p.d * w);
        den.add(w);
    }
    Ok((num.value() / den.value(), between_var))
}

fn between_variance(points: &[EffectPoint]) -> f64 {
    let n = points.len() as f64;
    let mean = points.iter().map(|p| p.d).collect::<ExactSum>().value() / n;
    points
        .iter()
        .map(|p| (p.d - mean) * (p.d - mean))
        .collect::<ExactSum>()
        .value()
        / n
}

fn finish_curve(mut points: Vec<EffectPoint>, opts: &SweepOptions) -> Result<EffectCurve> {
    let valid = points.len();
    if valid == 0 || (valid == 1 && !opts.allow_single_point) {
        return Err(EffectsError::DegenerateSweep { valid });
    }
    let (ces, between_var) = combined_effect(&points)?;
    for p in &mut points {
        p.w = 1.0 / (between_var + p.var_t);
    }
    Ok(EffectCurve {
        points,
        between_var,
        ces,
        p_value: None,
    })
}

fn validate_thresholds(x: &[f64], thresholds: &[f64]) -> Result<()> {
    if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(EffectsError::InvalidGrid("thresholds must be strictly increasing".into()));
    }
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if let Some(t) = thresholds.iter().find(|t| !(lo..=hi).contains(*t)) {
        return Err(EffectsError::InvalidGrid(format!(
            "threshold {t} outside observed range [{lo}, {hi}]"
        )));
    }
    Ok(())
}

/// Precomputed ordering and group splits for one attribute vector and grid.
/// Reused across permutation iterations, where only the outcome order changes.
struct SweepPlan {
    order: Vec<usize>,
    /// (threshold, size of the below group) for thresholds passing `min_group`.
    splits: Vec<(f64, usize)>,
}

impl SweepPlan {
    fn new(x: &[f64], thresholds: &[f64], min_group: usize) -> Self {
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
        let sorted: Vec<f64> = order.iter().map(|&i| x[i]).collect();
        let n = x.len();
        let min_group = min_group.max(1);
        let splits = thresholds
            .iter()
            .map(|&t| (t, sorted.partition_point(|&v| v < t)))
            .filter(|&(_, k)| k >= min_group && n - k >= min_group)
            .collect();
        Self { order, splits }
    }

    fn arrange(&self, y: &[f64]) -> Vec<f64> {
        self.order.iter().map(|&i| y[i]).collect()
    }

    /// Points for outcomes already arranged in ascending-x order.
    fn points(&self, y_sorted: &[f64], mean: f64, sd: f64, form: VarianceForm) -> Vec<EffectPoint> {
        let n = y_sorted.len();
        let mut prefix = Vec::with_capacity(n + 1);
        prefix.push(0.0);
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for &v in y_sorted {
            // Neumaier running sum of centred outcomes
            let x = v - mean;
            let t = s + x;
            if s.abs() >= x.abs() {
                c += (s - t) + x;
            } else {
                c += (x - t) + s;
            }
            s = t;
            prefix.push(s + c);
        }
        let total = prefix[n];
        self.splits
            .iter()
            .map(|&(t, k)| {
                let (nb, na) = (k, n - k);
                let mb = prefix[k] / nb as f64;
                let ma = (total - prefix[k]) / na as f64;
                let d = (mb - ma) / sd;
                EffectPoint {
                    t,
                    d,
                    n_below: nb,
                    n_above: na,
                    var_t: within_variance(d, nb, na, form),
                    w: 0.0,
                    mean_below: mean + mb,
                    mean_above: mean + ma,
                }
            })
            .collect()
    }
}

/// Sweeps `thresholds` (strictly increasing, inside the range of `x`) and
/// combines the valid points. The returned curve has no p-value.
pub fn sweep(x: &[f64], y: &[f64], thresholds: &[f64], opts: &SweepOptions) -> Result<EffectCurve> {
    check_pair(x, y)?;
    validate_thresholds(x, thresholds)?;
    let (mean, sd) = outcome_scale(y)?;
    let plan = SweepPlan::new(x, thresholds, opts.min_group);
    let points = plan.points(&plan.arrange(y), mean, sd, opts.variance_form);
    finish_curve(points, opts)
}

/// Resolves `grid` against `x`, then sweeps.
pub fn sweep_grid(x: &[f64], y: &[f64], grid: &ThresholdGrid, opts: &SweepOptions) -> Result<EffectCurve> {
    sweep(x, y, &grid.resolve(x), opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationOptions {
    pub sweep: SweepOptions,
    pub grid: ThresholdGrid,
    pub iterations: usize,
    pub seed: u64,
    pub scheme: PermScheme,
    /// Redraws allowed per iteration when a resample yields a degenerate sweep.
    pub retry_cap: usize,
}

impl Default for PermutationOptions {
    fn default() -> Self {
        Self {
            sweep: SweepOptions::default(),
            grid: ThresholdGrid::default(),
            iterations: 1000,
            seed: 42,
            scheme: PermScheme::Shuffle,
            retry_cap: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationOutcome {
    pub observed_ces: f64,
    /// Fraction of iterations with |ces_i| > |ces_observed|.
    pub p_value: f64,
    pub exceedances: usize,
    pub iterations: usize,
    pub redraws: usize,
}

/// Random stream for one permutation iteration, independent of scheduling.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

/// Observed curve plus its permutation p-value.
pub fn analyze(x: &[f64], y: &[f64], opts: &PermutationOptions) -> Result<(EffectCurve, PermutationOutcome)> {
    check_pair(x, y)?;
    if opts.iterations == 0 {
        return Err(EffectsError::NoIterations);
    }
    let thresholds = opts.grid.resolve(x);
    validate_thresholds(x, &thresholds)?;
    let (mean, sd) = outcome_scale(y)?;
    let plan = SweepPlan::new(x, &thresholds, opts.sweep.min_group);
    let y_sorted = plan.arrange(y);
    let mut curve = finish_curve(plan.points(&y_sorted, mean, sd, opts.sweep.variance_form), &opts.sweep)?;
    let observed = curve.ces.abs();

    let draws: Vec<(bool, usize)> = (0..opts.iterations)
        .into_par_iter()
        .map(|i| {
            let mut rng = iteration_rng(opts.seed, i);
            for attempt in 0..=opts.retry_cap {
                let resampled = match opts.scheme {
                    PermScheme::Shuffle => {
                        let mut ys = y_sorted.clone();
                        ys.shuffle(&mut rng);
                        finish_curve(plan.points(&ys, mean, sd, opts.sweep.variance_form), &opts.sweep)
                    }
                    PermScheme::Subset { fraction } => subset_draw(x, y, fraction, opts, &mut rng),
                };
                match resampled {
                    Ok(c) => return Ok((c.ces.abs() > observed, attempt)),
                    Err(EffectsError::DegenerateSweep { .. } | EffectsError::ConstantOutcome) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(EffectsError::RetryCapExceeded {
                iteration: i,
                retries: opts.retry_cap,
            })
        })
        .collect::<Result<_>>()?;

    let exceedances = draws.iter().filter(|d| d.0).count();
    let redraws = draws.iter().map(|d| d.1).sum();
    let p_value = exceedances as f64 / opts.iterations as f64;
    curve.p_value = Some(p_value);
    let observed_ces = curve.ces;
    Ok((
        curve,
        PermutationOutcome {
            observed_ces,
            p_value,
            exceedances,
            iterations: opts.iterations,
            redraws,
        },
    ))
}

fn subset_draw(
    x: &[f64],
    y: &[f64],
    fraction: f64,
    opts: &PermutationOptions,
    rng: &mut ChaCha8Rng,
) -> Result<EffectCurve> {
    let n = x.len();
    let m = ((fraction * n as f64).round() as usize).clamp(3, n);
    let picked = index::sample(rng, n, m).into_vec();
    let xs: Vec<f64> = picked.iter().map(|&i| x[i]).collect();
    let mut ys: Vec<f64> = picked.iter().map(|&i| y[i]).collect();
    ys.shuffle(rng);
    let thresholds = opts.grid.resolve(&xs);
    sweep(&xs, &ys, &thresholds, &opts.sweep)
}

/// Permutation p-value for the combined effect: `Pr[|ces_i| > |ces_obs|]`.
pub fn permutation_test(x: &[f64], y: &[f64], opts: &PermutationOptions) -> Result<PermutationOutcome> {
    analyze(x, y, opts).map(|(_, p)| p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p_value: f64,
    pub iterations: usize,
}

/// Product-moment correlation coefficient.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let (ma, sa) = mean_sd(a);
    let (mb, sb) = mean_sd(b);
    if !(sa > 0.0 && sb > 0.0) {
        return Err(EffectsError::ConstantVector);
    }
    Ok(centred_r(a, ma, b, mb))
}

fn centred_r(a: &[f64], ma: f64, b: &[f64], mb: f64) -> f64 {
    let (mut sab, mut saa, mut sbb) = (ExactSum::new(), ExactSum::new(), ExactSum::new());
    for (&x, &y) in a.iter().zip(b) {
        let (u, v) = (x - ma, y - mb);
        sab.add(u * v);
        saa.add(u * u);
        sbb.add(v * v);
    }
    (sab.value() / (saa.value() * sbb.value()).sqrt()).clamp(-1.0, 1.0)
}

/// Pearson's r with a permutation p-value (shuffling `b`).
pub fn pearson(a: &[f64], b: &[f64], iterations: usize, seed: u64) -> Result<Correlation> {
    let r = pearson_r(a, b)?;
    if iterations == 0 {
        return Err(EffectsError::NoIterations);
    }
    let ma = a.iter().copied().collect::<ExactSum>().value() / a.len() as f64;
    let mb = b.iter().copied().collect::<ExactSum>().value() / b.len() as f64;
    let exceed = (0..iterations)
        .into_par_iter()
        .filter(|&i| {
            let mut rng = iteration_rng(seed, i);
            let mut shuffled = b.to_vec();
            shuffled.shuffle(&mut rng);
            centred_r(a, ma, &shuffled, mb).abs() > r.abs()
        })
        .count();
    Ok(Correlation {
        r,
        p_value: exceed as f64 / iterations as f64,
        iterations,
    })
}
