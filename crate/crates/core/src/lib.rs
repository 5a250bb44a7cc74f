//! Unsupervised domain adaptation by entropy minimization with a batch
//! category-diversity term, plus label-free model selection.
//!
//! The crate is layered bottom-up: [`autodiff`] provides a small reverse-mode
//! tensor tape, [`network`] the MLP classifier, [`losses`] the training
//! objectives, [`data`] synthetic domain pairs and CSV I/O, [`trainer`] the
//! Adam loop, [`selection`] the two-phase hyperparameter search with
//! importance-weighted validation risk, and [`evalreport`] label-aware
//! evaluation and report files.

pub mod autodiff;
pub mod data;
pub mod evalreport;
pub mod losses;
pub mod network;
pub mod seed;
pub mod selection;
pub mod trainer;
