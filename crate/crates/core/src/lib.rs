//! Speaker-verification evaluation toolkit.
//!
//! Trial/score/embedding I/O, log-Mel features, augmentation, AAM-softmax and
//! attentive-pooling math, learning-rate schedules, cosine / AS-Norm / MSA
//! scoring, logistic-regression fusion and EER / minDCF metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod config;
pub mod features;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod schedule;
pub mod scoring;
pub mod selftest;
pub mod synthetic;
pub mod trialdata;

/// Version of the toolkit and of the on-disk formats it reads and writes.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const FORMAT_VERSIONS: &str = "EMB1 MEL1";

/// Umbrella error for pipeline and CLI code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Parse(#[from] trialdata::ParseError),
    #[error(transparent)]
    Format(#[from] trialdata::FormatError),
    #[error(transparent)]
    ScoreSet(#[from] trialdata::ScoreSetError),
    #[error(transparent)]
    Feature(#[from] features::FeatureError),
    #[error(transparent)]
    Augment(#[from] augment::AugmentError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Schedule(#[from] schedule::ScheduleError),
    #[error(transparent)]
    Score(#[from] scoring::ScoreError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error(transparent)]
    Fusion(#[from] fusion::FusionError),
    #[error("{path}: {source}")]
    AtPath { path: String, source: Box<Error> },
}

impl Error {
    /// Attaches the offending file path to an error.
    pub fn at(self, path: &std::path::Path) -> Self {
        Error::AtPath { path: path.display().to_string(), source: Box::new(self) }
    }
}
