//! Next-visit diagnosis forecasting from longitudinal clinical visits.
//!
//! Stages, in pipeline order: [`ingest`] (CSV or synthetic cohorts),
//! [`preprocess`] (cleaning, normalization, model-based imputation),
//! [`sequences`] (converter/stable sequences, balancing, stratified folds),
//! [`models`] (LSTM, GRU, minimalRNN and Transformer predictors),
//! [`train_eval`] (training, metrics, statistical tests), [`ablation`] and
//! [`pipeline`] (config-driven end-to-end runs with CSV outputs).

pub mod ablation;
pub mod data_model;
pub mod error;
pub mod ingest;
pub mod models;
pub mod pipeline;
pub mod preprocess;
pub mod sequences;
pub mod train_eval;

pub use error::{Error, Result};
