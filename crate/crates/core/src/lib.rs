//! Unsupervised representation learning with a memory-bank classifier.
//!
//! Every training sample owns one row of a memory bank. The rows act as the
//! weights of a non-parametric classifier with one class per sample, and as
//! the features from which pseudo labels are predicted. Training alternates
//! between predicting multi-class labels from the bank ([`labels`]) and
//! optimizing a memory-based multi-label loss ([`loss`]) through a small
//! embedding network ([`model`], [`train`]).

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod labels;
pub mod loss;
pub mod memory;
pub mod model;
pub mod train;

pub use error::{Error, Result};
pub use labels::{MultiLabel, Predictor};
pub use loss::{LossConfig, LossReport, LossVariant};
pub use memory::{FeatureVector, MemoryBank, RankList};
pub use model::EmbeddingModel;
