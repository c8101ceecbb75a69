//! Multi-level neuroevolution of Conv1D autoencoder ensembles for
//! multivariate time-series anomaly detection.

pub mod datapipe;
pub mod ensemble;
pub mod evo;
pub mod finetune;
pub mod fitness;
pub mod genome;
pub mod io;
pub mod ndnet;
pub mod pipeline;
pub mod seed;
