//! Analytic and simulated solutions for reflected autoregressive recursions.
//!
//! Workloads of the form W_{n+1} = max(V_n W_n + B_n - A_n, 0) lead, after
//! transforming, to functional equations that relate the unknown transform to
//! itself at geometrically contracted arguments. The crate is layered:
//!
//! * [`dists`]: distribution primitives (transform evaluation, sampling,
//!   threshold kernels).
//! * [`engine`]: generic solvers for contraction functional equations, plus
//!   the linear solve that pins unknown boundary constants.
//! * [`models`]: concrete queueing models expressed through the engine.
//! * [`retrial`]: orbit-size and priority-queue generating functions, which
//!   contract in a unit-disk variable rather than a transform argument.
//! * [`mcsim`]: Monte Carlo counterparts used for validation.
//! * [`cli`]: the `reflectar` command line.

pub mod cli;
pub mod dists;
pub mod engine;
pub mod mcsim;
pub mod models;
pub mod retrial;
