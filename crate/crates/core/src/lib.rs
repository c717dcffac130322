//! Probabilistic Lagrangian drift laboratory.
//!
//! The pipeline runs left to right through the modules:
//!
//! * [`grid`]: domain geometry, land mask, velocity field series (VFLD files), synthetic flows;
//! * [`advection`]: space-time velocity sampling and RK4 particle stepping with boundary termination;
//! * [`ensemble`]: perturbed particle ensembles, probabilistic trajectories, deployments (TRAJ files);
//! * [`density`]: histogram + Gaussian smoothing into probability density maps (DMAP files);
//! * [`dataset`]: single-timestep training pairs, trajectory-level splits, dataset directories;
//! * [`metrics`]: masked position/drift/threshold losses, inference post-processing, baselines;
//! * [`export`]: 16-bit PGM and CSV dumps of maps for figures.
//!
//! Positions live in continuous cell-index space: `x` is the column coordinate in `[0, cols)`,
//! `y` the row coordinate in `[0, rows)`, and cell `(i, j)` covers `[j, j+1) x [i, i+1)`.
//! Velocities are stored in cells/day.

pub mod advection;
pub mod dataset;
pub mod density;
pub mod ensemble;
pub mod error;
pub mod export;
pub mod grid;
pub mod metrics;

mod binio;

pub use error::{Error, Result};
