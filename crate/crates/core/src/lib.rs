//! Out-of-distribution detection benchmark: MSP, ODIN, Mahalanobis and
//! pairwise-distance (POD) scores, the toy experiments they are compared on,
//! and AUROC / FNR@95 evaluation.

pub mod datasets;
pub mod detectors;
pub mod error;
pub mod experiments;
pub mod finetune;
pub mod io;
pub mod metrics;
pub mod models;
pub mod numkit;

pub use error::{Error, Result};

pub type Matrix = numkit::DenseMatrix<f64>;
pub type Dataset = datasets::LabeledDataset<f64>;
pub type Bank = datasets::ExemplarBank<f64>;
pub type LinearModel = models::LinearSoftmaxModel<f64>;
pub type Head = models::PairwiseHead<f64>;
