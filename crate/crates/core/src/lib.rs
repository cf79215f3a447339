//! Image-quality labels for photos taken by people who are blind: crowd
//! label aggregation, co-occurrence statistics, recognizability and flaw
//! predictors, unanswerability reasoning for visual questions, evaluation
//! metrics and dataset curation helpers.

pub mod curation;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod features;
pub mod flaws;
pub mod nn;
pub mod recognizability;
pub mod stats;
pub mod synth;
pub mod vqa_reason;

pub use datamodel::{
    aggregate, aggregate_all, AggregatedLabels, Channels, Flaw, FlawLabelSet, FlawProbabilities, ImageRecord, ReasonClass,
    ReasonLabel, SourceTask, VisualQuestion, VoteCounts, WorkerAnnotation,
};
pub use error::{Error, Result};
