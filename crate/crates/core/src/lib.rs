//! Controllable feature whitening for debiasing linear classifiers.

pub mod fairmetrics;
pub mod groupcov;
pub mod linmodel;
pub mod matops;
pub mod pipeline;
pub mod realstr;
pub mod synthdata;
pub mod whiten;
