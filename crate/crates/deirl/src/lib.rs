//! Excitable integral reinforcement learning (EIRL) and its decentralized
//! form (dEIRL) for continuous-time LQR, with the Kleinman/CARE oracle and a
//! hypersonic-vehicle testbed.
//!
//! The crate is organised bottom-up:
//!
//! - [`symops`]: symmetric vectorization, the bilinear form and trajectory
//!   integrals that every regression is built from;
//! - [`lincontrol`]: Lyapunov/Riccati solvers, Kleinman iteration,
//!   linearization and closed-loop frequency maps;
//! - [`simcore`]: adaptive integration and the SI/MI feedback structure;
//! - [`eirl`]: regression assembly and the learning drivers;
//! - [`hsv`]: the winged-cone longitudinal model;
//! - [`evalharness`]: configuration, studies and CSV output.
//!
//! The [`guide`] module carries the book chapters; their code blocks run as
//! doc-tests.

// `!(x > 0.0)` style guards are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod eirl;
pub mod evalharness;
pub mod hsv;
pub mod lincontrol;
pub mod simcore;
pub mod symops;

pub mod guide {
    #![doc = include_str!("../../../book/src/intro.md")]

    #[doc = include_str!("../../../book/src/operators.md")]
    pub mod operators {}
    #[doc = include_str!("../../../book/src/kleinman.md")]
    pub mod kleinman {}
    #[doc = include_str!("../../../book/src/learning.md")]
    pub mod learning {}
    #[doc = include_str!("../../../book/src/excitation.md")]
    pub mod excitation {}
    #[doc = include_str!("../../../book/src/hsv.md")]
    pub mod hsv {}
    #[doc = include_str!("../../../book/src/studies.md")]
    pub mod studies {}
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not symmetric (skew part {0:e})")]
    Asymmetric(f64),
    #[error("matrix is not Hurwitz (spectral abscissa {0:e})")]
    NotHurwitz(f64),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("{what} did not converge (residual {residual:e})")]
    NonConvergence { what: String, residual: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("regression for loop {loop_id}, iteration {iteration} is rank deficient (kappa {kappa:e})")]
    RankDeficient { loop_id: usize, iteration: usize, kappa: f64 },
    #[error("simulation diverged at t = {t} (|x| = {norm:e})")]
    Divergence { t: f64, norm: f64 },
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
