//! One-dimensional Gaussian mixture fitted by expectation–maximization, used to
//! separate normally priced trips from anomalously priced ones.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{percentile_sorted, population_variance, sorted_copy, ExactSum};

#[derive(Debug, Error, PartialEq)]
pub enum OutlierError {
    #[error("need at least {needed} values for k = {k}, got {got}")]
    TooFewValues { needed: usize, got: usize, k: usize },
    #[error("fewer than {k} distinct values")]
    TooFewDistinct { k: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("k must be at least 1")]
    ZeroComponents,
    #[error("anomaly flagging needs a 2-component model, got k = {0}")]
    NotTwoComponents(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub k: usize,
    /// Recorded with the model. Initialization is percentile based and does
    /// not consume randomness.
    pub seed: u64,
    /// Convergence threshold on the change in mean log-likelihood.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            k: 2,
            seed: 42,
            tol: 1e-6,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub k: usize,
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// Final mean (per-value) log-likelihood.
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub seed: u64,
    pub variance_floor: f64,
    /// Mean log-likelihood after initialization and after every EM step.
    pub log_likelihood_trace: Vec<f64>,
}

const CHUNK: usize = 4096;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

struct Params<'a> {
    log_weights: Vec<f64>,
    means: &'a [f64],
    variances: &'a [f64],
    log_norm: Vec<f64>,
}

impl<'a> Params<'a> {
    fn new(weights: &[f64], means: &'a [f64], variances: &'a [f64]) -> Self {
        Self {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            means,
            variances,
            log_norm: variances.iter().map(|v| -0.5 * (LN_2PI + v.ln())).collect(),
        }
    }

    /// Writes per-component log joint densities into `buf`, returns the log of their sum.
    fn log_joint(&self, x: f64, buf: &mut [f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for j in 0..buf.len() {
            let z = x - self.means[j];
            buf[j] = self.log_weights[j] + self.log_norm[j] - 0.5 * z * z / self.variances[j];
            max = max.max(buf[j]);
        }
        let s: f64 = buf.iter().map(|l| (l - max).exp()).sum();
        max + s.ln()
    }

    fn responsibilities(&self, x: f64, buf: &mut [f64]) -> f64 {
        let total = self.log_joint(x, buf);
        for l in buf.iter_mut() {
            *l = (*l - total).exp();
        }
        total
    }
}

#[derive(Clone)]
struct Moments {
    log_lik: ExactSum,
    resp: Vec<ExactSum>,
    resp_x: Vec<ExactSum>,
}

impl Moments {
    fn new(k: usize) -> Self {
        Self {
            log_lik: ExactSum::new(),
            resp: vec![ExactSum::new(); k],
            resp_x: vec![ExactSum::new(); k],
        }
    }

    fn merge(mut self, other: &Moments) -> Self {
        self.log_lik.merge(&other.log_lik);
        for j in 0..self.resp.len() {
            self.resp[j].merge(&other.resp[j]);
            self.resp_x[j].merge(&other.resp_x[j]);
        }
        self
    }
}

/// E-step: log-likelihood plus the zeroth and first responsibility moments.
/// Chunk partials are exact sums merged in chunk order, so the result does
/// not depend on the thread count or on the order of `values`.
fn e_step(values: &[f64], p: &Params<'_>) -> Moments {
    let k = p.means.len();
    let partials: Vec<Moments> = values
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut m = Moments::new(k);
            let mut buf = vec![0.0; k];
            for &x in chunk {
                m.log_lik.add(p.responsibilities(x, &mut buf));
                for j in 0..k {
                    m.resp[j].add(buf[j]);
                    m.resp_x[j].add(buf[j] * x);
                }
            }
            m
        })
        .collect();
    partials
        .iter()
        .fold(Moments::new(k), |acc, m| acc.merge(m))
}

fn second_moments(values: &[f64], p: &Params<'_>, new_means: &[f64]) -> Vec<f64> {
    let k = new_means.len();
    let partials: Vec<Vec<ExactSum>> = values
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![ExactSum::new(); k];
            let mut buf = vec![0.0; k];
            for &x in chunk {
                p.responsibilities(x, &mut buf);
                for j in 0..k {
                    let z = x - new_means[j];
                    acc[j].add(buf[j] * z * z);
                }
            }
            acc
        })
        .collect();
    let mut total = vec![ExactSum::new(); k];
    for part in &partials {
        for j in 0..k {
            total[j].merge(&part[j]);
        }
    }
    total.iter().map(ExactSum::value).collect()
}

fn validate(values: &[f64], k: usize) -> Result<(), OutlierError> {
    if k == 0 {
        return Err(OutlierError::ZeroComponents);
    }
    if values.len() < 2 * k {
        return Err(OutlierError::TooFewValues {
            needed: 2 * k,
            got: values.len(),
            k,
        });
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(OutlierError::NonFinite(i));
    }
    Ok(())
}

/// Fits a k-component 1-D mixture by EM.
///
/// Initialization: equal weights, every variance equal to the population
/// variance, means at percentiles spread from the 25th to the 99th (for k = 2,
/// exactly those two). Variances are floored at 1e-8 of the population variance.
pub fn fit_gmm(values: &[f64], opts: &EmOptions) -> Result<GmmModel, OutlierError> {
    let k = opts.k;
    validate(values, k)?;
    let sorted = sorted_copy(values);
    let distinct = 1 + sorted.windows(2).filter(|w| w[0] != w[1]).count();
    if distinct < k {
        return Err(OutlierError::TooFewDistinct { k });
    }

    let n = values.len() as f64;
    let pop_var = population_variance(values);
    let floor = 1e-8 * pop_var;

    let mut means: Vec<f64> = if k == 1 {
        vec![percentile_sorted(&sorted, 50.0)]
    } else {
        (0..k)
            .map(|j| percentile_sorted(&sorted, 25.0 + 74.0 * j as f64 / (k - 1) as f64))
            .collect()
    };
    let mut variances = vec![pop_var; k];
    let mut weights = vec![1.0 / k as f64; k];

    let mut moments = e_step(values, &Params::new(&weights, &means, &variances));
    let mut trace = vec![moments.log_lik.value() / n];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        // M-step
        let params = Params::new(&weights, &means, &variances);
        let nk: Vec<f64> = moments.resp.iter().map(ExactSum::value).collect();
        let new_means: Vec<f64> = (0..k)
            .map(|j| {
                if nk[j] > 0.0 {
                    moments.resp_x[j].value() / nk[j]
                } else {
                    means[j]
                }
            })
            .collect();
        let ss = second_moments(values, &params, &new_means);
        let new_vars: Vec<f64> = (0..k)
            .map(|j| {
                if nk[j] > 0.0 {
                    (ss[j] / nk[j]).max(floor)
                } else {
                    variances[j]
                }
            })
            .collect();
        let mut new_weights: Vec<f64> = nk.iter().map(|&c| (c / n).max(f64::MIN_POSITIVE)).collect();
        let wsum: f64 = new_weights.iter().sum();
        new_weights.iter_mut().for_each(|w| *w /= wsum);

        means = new_means;
        variances = new_vars;
        weights = new_weights;
        iterations += 1;

        moments = e_step(values, &Params::new(&weights, &means, &variances));
        let ll = moments.log_lik.value() / n;
        let prev = *trace.last().unwrap();
        trace.push(ll);
        if (ll - prev).abs() < opts.tol {
            converged = true;
            break;
        }
    }

    Ok(GmmModel {
        k,
        weights,
        means,
        variances,
        log_likelihood: *trace.last().unwrap(),
        iterations,
        converged,
        seed: opts.seed,
        variance_floor: floor,
        log_likelihood_trace: trace,
    })
}

impl GmmModel {
    /// Posterior component probabilities for one value.
    pub fn responsibilities(&self, x: f64) -> Vec<f64> {
        let p = Params::new(&self.weights, &self.means, &self.variances);
        let mut buf = vec![0.0; self.k];
        p.responsibilities(x, &mut buf);
        buf
    }

    /// Index of the component with the largest mean, or `None` when the
    /// largest mean is shared.
    pub fn anomalous_component(&self) -> Option<usize> {
        let mut order: Vec<usize> = (0..self.k).collect();
        order.sort_by(|&a, &b| self.means[b].total_cmp(&self.means[a]));
        match order.as_slice() {
            [top, next, ..] if self.means[*top] == self.means[*next] => None,
            [top, ..] => Some(*top),
            [] => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyFlags {
    /// `true` marks a value assigned to the anomalous component.
    pub mask: Vec<bool>,
    pub warning: Option<String>,
}

impl AnomalyFlags {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Assigns each value to its most responsible component; values landing in the
/// larger-mean component are anomalous.
pub fn flag_anomalies(model: &GmmModel, values: &[f64]) -> Result<AnomalyFlags, OutlierError> {
    if model.k != 2 {
        return Err(OutlierError::NotTwoComponents(model.k));
    }
    let Some(anomalous) = model.anomalous_component() else {
        let warning = "mixture components share a mean; no values flagged".to_string();
        log::warn!("{warning}");
        return Ok(AnomalyFlags {
            mask: vec![false; values.len()],
            warning: Some(warning),
        });
    };
    let p = Params::new(&model.weights, &model.means, &model.variances);
    let mask = values
        .par_iter()
        .map_init(
            || vec![0.0; 2],
            |buf, &x| {
                p.log_joint(x, buf);
                let best = if buf[1] > buf[0] { 1 } else { 0 };
                best == anomalous
            },
        )
        .collect();
    Ok(AnomalyFlags { mask, warning: None })
}
