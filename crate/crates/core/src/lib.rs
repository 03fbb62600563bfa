//! Observability analysis and pose estimation for magnetometer arrays that
//! track a single axially magnetized permanent magnet.
//!
//! The crate is organized around the point-dipole forward model in [`dipole`].
//! [`observability`] turns its Jacobian into Fisher information and Cramér–Rao
//! bounds, [`shell`] optimizes sensor placement on a cubic shell, [`lm`]
//! recovers poses from measurements, [`dataset`] synthesizes hardware-like
//! data and [`mc`] runs Monte-Carlo evaluations of the solver.

// `!(x > 0.0)` is used on purpose so that NaN falls into the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod dipole;
pub mod error;
pub mod geometry;
pub mod lm;
pub mod mc;
pub mod observability;
pub mod rng;
pub mod shell;
pub mod stats;

pub use dipole::{
    angles_from_orientation, field_array, field_at, jacobian, orientation_from_angles, saturate,
    FieldVector, MagnetModel, OrientationVector, Pose5, Vec3,
};
pub use error::{Error, Result};
pub use geometry::SensorLayout;
pub use observability::{
    build_fim, crlb_metrics, FimReport, NoiseModel, SweepReport, WorkspaceSpec,
};
