//! Disparate-impact auditing of trip outcomes across census tracts.
//!
//! The pipeline reads trip and tract files ([`ingest`]), optionally removes
//! anomalously priced trips with a two-component Gaussian mixture
//! ([`outlier`]), reduces trips to per-tract outcomes ([`aggregate`]),
//! measures threshold-swept effect sizes with permutation significance
//! ([`effects`]) and assembles a report over every attribute/outcome cell
//! ([`audit`]). [`synth`] generates cities with known injected bias.

pub mod aggregate;
pub mod audit;
pub mod chart;
pub mod cli;
pub mod effects;
pub mod ingest;
pub mod numeric;
pub mod outlier;
pub mod synth;
