//! Self-training for three-class depression-severity text classification.
//!
//! A teacher trained on a small clean labeled set scores a large unlabeled
//! pool. The most confident posts of each class become hard pseudo-labels
//! for a fresh student, which is then finetuned on the clean labels.
//!
//! Classifiers sit behind [`classifier::ClassifierBackend`]. The built-in
//! [`classifier::NativeBackend`] is a hashed n-gram softmax model;
//! [`classifier::exec::ExecBackend`] drives any external process that
//! speaks the line-JSON protocol in [`classifier::protocol`].

pub mod classifier;
pub mod corpus;
pub mod error;
pub mod label;
pub mod metrics;
pub mod report;
pub mod seeds;
pub mod selection;
pub mod selftrain;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
pub use label::{SeverityLabel, NUM_CLASSES};
