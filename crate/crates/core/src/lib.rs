//! Simulation and analysis of mini-batch noisy SGD on wide two-layer networks.
//!
//! The crate evolves the weights of a network `g(x) = (1/N) sum_i f(W^i . x)`
//! under mini-batch SGD with added Gaussian noise of size `N^{-beta}`, and
//! offers the tools to compare the empirical measure of the weights with its
//! mean-field limit: a particle ODE solver, fluctuation traces, the limiting
//! martingale covariance, and turnkey experiment drivers writing CSV.

// `!(x >= 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fluctuation;
pub mod gauss1d;
pub mod harness;
pub mod meanfield;
pub mod measure;
pub mod model;
pub mod sgd;
pub mod streams;

pub use error::{Error, Result};
pub use fluctuation::{
    drift_fit, fluctuation_trace, gprocess_covariance, gprocess_covariance_matrix, q_kernel,
    CovarianceEstimate, DriftFit, FluctuationTrace,
};
pub use gauss1d::ExactMixture1d;
pub use meanfield::{
    integrate, meanfield_drift, IntegrateOptions, Integrator, MeanFieldTrajectory, QuadratureSample,
};
pub use measure::{bracket, moment, wasserstein1_1d, EmpiricalSnapshot, TestFunction, TraceMeta, TraceSeries};
pub use model::{
    grad_sigma_star, network_output, ramp_eval, sample_data, sigma_star, ActivationKind,
    ActivationSpec, BatchSchedule, DataModel, MixtureComponent,
};
pub use sgd::{
    apply_step, decompose_step, decompose_with_draws, martingale_trace, run_trajectory, sgd_step,
    Batch, DriftExpectation, InitSpec, NetworkState, SgdConfig, Simulation, StepDecomposition,
    StepDraws, StepScratch,
};
pub use streams::{RunStreams, StreamRng};
