//! Point-dipole forward model of an axially magnetized permanent magnet.
//!
//! The field at a sensor located at `r` from a magnet at `p` with unit axis `n` is
//!
//! ```text
//! B = B_T * (3 (n·d) d / |d|^5 - n / |d|^3),   d = r - p
//! ```
//!
//! Units are fixed crate-wide: meters, radians, microtesla, so `B_T` is in µT·m³.
//! The magnet state is five-dimensional: position plus yaw `psi` and pitch `theta`
//! with `n = [cos psi sin theta, sin psi sin theta, cos theta]`. Roll about the
//! magnetization axis does not change the field.
//!
//! Stacked quantities (field vectors, Jacobian rows) are sensor-major: sensor 0
//! contributes rows `Bx, By, Bz`, then sensor 1, and so on.

use std::f64::consts::{PI, TAU};

use nalgebra::{Dyn, Matrix3, OMatrix, SMatrix, Vector3, U5};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SensorLayout;

pub type Vec3 = Vector3<f64>;

/// Stacked `3N x 5` Jacobian of the array field with respect to `(px, py, pz, psi, theta)`.
pub type ArrayJacobian = OMatrix<f64, Dyn, U5>;

/// One sensor's `3 x 5` Jacobian block.
pub type SensorJacobian = SMatrix<f64, 3, 5>;

/// Below this distance the dipole model is rejected outright.
pub const MIN_DISTANCE_M: f64 = 1e-6;

/// Strength coefficient of the φ10×10 mm N35 cylinder used throughout the benchmarks.
pub const DEFAULT_B_T: f64 = 7.9666e-2;

/// Saturation threshold of the LIS3MDL magnetometers (µT).
pub const DEFAULT_B_CLIP: f64 = 1900.0;

/// `sin(theta)` below which yaw is undefined and reported as zero.
const POLE_EPS: f64 = 1e-9;

/// Magnet pose: position in meters, yaw in `[0, 2π)`, pitch in `[0, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose5 {
    pub p: Vec3,
    pub psi: f64,
    pub theta: f64,
}

impl Pose5 {
    /// Validates position and pitch and wraps yaw into `[0, 2π)`.
    pub fn new(p: Vec3, psi: f64, theta: f64) -> Result<Self> {
        if !p.iter().all(|c| c.is_finite()) || !psi.is_finite() || !theta.is_finite() {
            return Err(Error::NonFinite("pose"));
        }
        if !(0.0..=PI).contains(&theta) {
            return Err(Error::InvalidArgument(format!(
                "pitch {theta} outside [0, pi]"
            )));
        }
        Ok(Self {
            p,
            psi: wrap_yaw(psi),
            theta,
        })
    }

    /// Pose from a position and an orientation vector, using the pole convention
    /// of [`angles_from_orientation`].
    pub fn from_orientation(p: Vec3, n: &OrientationVector) -> Result<Self> {
        let (psi, theta) = angles_from_orientation(n);
        Self::new(p, psi, theta)
    }

    pub fn orientation(&self) -> OrientationVector {
        orientation_from_angles(self.psi, self.theta)
    }

    /// The state vector `[px, py, pz, psi, theta]`.
    pub fn to_array(&self) -> [f64; 5] {
        [self.p.x, self.p.y, self.p.z, self.psi, self.theta]
    }
}

fn wrap_yaw(psi: f64) -> f64 {
    let w = psi.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Unit magnetization axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OrientationVector(Vec3);

impl OrientationVector {
    /// Normalizes `v`; fails on zero or non-finite input.
    pub fn new(v: Vec3) -> Result<Self> {
        if !v.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite("orientation vector"));
        }
        let norm = v.norm();
        if norm < 1e-12 {
            return Err(Error::InvalidArgument(
                "orientation vector has zero length".into(),
            ));
        }
        Ok(Self(v / norm))
    }

    pub fn as_vec(&self) -> &Vec3 {
        &self.0
    }

    pub fn into_inner(self) -> Vec3 {
        self.0
    }
}

impl std::ops::Neg for OrientationVector {
    type Output = Self;
    fn neg(self) -> Self {
        Self(-self.0)
    }
}

/// Magnet strength. `b_t` folds magnet volume, magnetization and permeability
/// into a single scale (µT·m³).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagnetModel {
    b_t: f64,
}

impl MagnetModel {
    pub fn new(b_t: f64) -> Result<Self> {
        if !b_t.is_finite() || b_t <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "magnet strength must be positive, got {b_t}"
            )));
        }
        Ok(Self { b_t })
    }

    pub fn b_t(&self) -> f64 {
        self.b_t
    }
}

impl Default for MagnetModel {
    fn default() -> Self {
        Self { b_t: DEFAULT_B_T }
    }
}

/// Stacked triaxial readings (µT) with per-channel saturation flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldVector {
    b: Vec<f64>,
    sat_mask: Vec<bool>,
}

impl FieldVector {
    /// Unsaturated readings.
    pub fn new(b: Vec<f64>) -> Result<Self> {
        let n = b.len();
        Self::with_mask(b, vec![false; n])
    }

    pub fn with_mask(b: Vec<f64>, sat_mask: Vec<bool>) -> Result<Self> {
        if b.len() != sat_mask.len() {
            return Err(Error::InvariantViolation(format!(
                "{} readings but {} saturation flags",
                b.len(),
                sat_mask.len()
            )));
        }
        if !b.len().is_multiple_of(3) || b.is_empty() {
            return Err(Error::InvariantViolation(format!(
                "field vector length {} is not a positive multiple of 3",
                b.len()
            )));
        }
        Ok(Self { b, sat_mask })
    }

    pub fn values(&self) -> &[f64] {
        &self.b
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.b
    }

    pub fn sat_mask(&self) -> &[bool] {
        &self.sat_mask
    }

    pub fn n_sensors(&self) -> usize {
        self.b.len() / 3
    }

    pub fn n_saturated(&self) -> usize {
        self.sat_mask.iter().filter(|&&s| s).count()
    }

    /// Reading of sensor `i` as a vector.
    pub fn sensor(&self, i: usize) -> Vec3 {
        Vec3::new(self.b[3 * i], self.b[3 * i + 1], self.b[3 * i + 2])
    }
}

pub fn orientation_from_angles(psi: f64, theta: f64) -> OrientationVector {
    let (sp, cp) = psi.sin_cos();
    let (st, ct) = theta.sin_cos();
    OrientationVector(Vec3::new(cp * st, sp * st, ct))
}

/// Inverse of [`orientation_from_angles`]. At the poles yaw is reported as 0.
pub fn angles_from_orientation(n: &OrientationVector) -> (f64, f64) {
    let v = n.as_vec();
    let theta = v.z.clamp(-1.0, 1.0).acos();
    let sin_theta = v.x.hypot(v.y);
    if sin_theta < POLE_EPS {
        return (0.0, theta);
    }
    (wrap_yaw(v.y.atan2(v.x)), theta)
}

#[inline]
fn displacement(pose_p: &Vec3, sensor: &Vec3, index: usize) -> Result<(Vec3, f64)> {
    let d = sensor - pose_p;
    let r = d.norm();
    if !(r > MIN_DISTANCE_M) {
        return Err(Error::DegenerateDistance {
            sensor: index,
            distance: r,
        });
    }
    Ok((d, r))
}

#[inline]
fn dipole_field(n: &Vec3, d: &Vec3, r: f64, b_t: f64) -> Vec3 {
    let r2 = r * r;
    let inv_r3 = 1.0 / (r2 * r);
    let inv_r5 = inv_r3 / r2;
    b_t * (3.0 * n.dot(d) * inv_r5 * d - inv_r3 * n)
}

/// Field of a magnet with unit axis `n` at `p`, seen from `sensor`.
pub(crate) fn field_from_axis(
    p: &Vec3,
    n: &Vec3,
    sensor: &Vec3,
    model: &MagnetModel,
    index: usize,
) -> Result<Vec3> {
    let (d, r) = displacement(p, sensor, index)?;
    Ok(dipole_field(n, &d, r, model.b_t))
}

pub fn field_at(pose: &Pose5, sensor_pos: &Vec3, model: &MagnetModel) -> Result<Vec3> {
    let n = pose.orientation();
    field_from_axis(&pose.p, n.as_vec(), sensor_pos, model, 0)
}

/// Stacked field over the layout, sensor-major. No clipping is applied.
pub fn field_array(
    pose: &Pose5,
    layout: &SensorLayout,
    model: &MagnetModel,
) -> Result<FieldVector> {
    let n = pose.orientation();
    let mut b = Vec::with_capacity(3 * layout.len());
    for (i, s) in layout.positions().iter().enumerate() {
        let f = field_from_axis(&pose.p, n.as_vec(), s, model, i)?;
        b.extend_from_slice(f.as_slice());
    }
    FieldVector::new(b)
}

/// Partial derivatives of the field at one sensor with respect to the
/// displacement `d` (symmetric, traceless) and to the axis `n`.
pub(crate) struct DipoleDerivatives {
    pub field: Vec3,
    pub d_field_d_disp: Matrix3<f64>,
    pub d_field_d_axis: Matrix3<f64>,
}

#[inline]
pub(crate) fn dipole_derivatives(n: &Vec3, d: &Vec3, r: f64, b_t: f64) -> DipoleDerivatives {
    let r2 = r * r;
    let inv_r3 = 1.0 / (r2 * r);
    let inv_r5 = inv_r3 / r2;
    let inv_r7 = inv_r5 / r2;
    let nd = n.dot(d);
    let ddt = d * d.transpose();
    let sym = d * n.transpose() + n * d.transpose();
    let d_disp = b_t
        * (3.0 * inv_r5 * (sym + Matrix3::from_diagonal_element(nd)) - 15.0 * nd * inv_r7 * ddt);
    let d_axis = b_t * (3.0 * inv_r5 * ddt - Matrix3::from_diagonal_element(inv_r3));
    DipoleDerivatives {
        field: b_t * (3.0 * nd * inv_r5 * d - inv_r3 * n),
        d_field_d_disp: d_disp,
        d_field_d_axis: d_axis,
    }
}

/// Precomputed trigonometry for one pose, shared across all sensors.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PoseFrame {
    pub p: Vec3,
    pub n: Vec3,
    pub dn_dpsi: Vec3,
    pub dn_dtheta: Vec3,
}

impl PoseFrame {
    pub fn new(pose: &Pose5) -> Self {
        let (sp, cp) = pose.psi.sin_cos();
        let (st, ct) = pose.theta.sin_cos();
        Self {
            p: pose.p,
            n: Vec3::new(cp * st, sp * st, ct),
            dn_dpsi: Vec3::new(-sp * st, cp * st, 0.0),
            dn_dtheta: Vec3::new(cp * ct, sp * ct, -st),
        }
    }

    /// `3 x 5` Jacobian block of one sensor.
    #[inline]
    pub fn sensor_block(
        &self,
        sensor: &Vec3,
        model: &MagnetModel,
        index: usize,
    ) -> Result<SensorJacobian> {
        let (d, r) = displacement(&self.p, sensor, index)?;
        let der = dipole_derivatives(&self.n, &d, r, model.b_t);
        let mut block = SensorJacobian::zeros();
        // d = r - p, so dB/dp = -dB/dd
        block
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(-der.d_field_d_disp));
        block
            .fixed_view_mut::<3, 1>(0, 3)
            .copy_from(&(der.d_field_d_axis * self.dn_dpsi));
        block
            .fixed_view_mut::<3, 1>(0, 4)
            .copy_from(&(der.d_field_d_axis * self.dn_dtheta));
        Ok(block)
    }
}

/// Analytic `3N x 5` Jacobian of the stacked field with respect to
/// `(px, py, pz, psi, theta)`.
pub fn jacobian(pose: &Pose5, layout: &SensorLayout, model: &MagnetModel) -> Result<ArrayJacobian> {
    let frame = PoseFrame::new(pose);
    let mut jac = ArrayJacobian::zeros(3 * layout.len());
    for (i, s) in layout.positions().iter().enumerate() {
        let block = frame.sensor_block(s, model, i)?;
        jac.fixed_view_mut::<3, 5>(3 * i, 0).copy_from(&block);
    }
    Ok(jac)
}

/// Clamps every channel to `[-b_clip, b_clip]`. A channel is flagged when its
/// magnitude reaches the threshold (boundary inclusive); existing flags are kept.
pub fn saturate(field: &FieldVector, b_clip: f64) -> Result<FieldVector> {
    if !(b_clip > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "saturation threshold must be positive, got {b_clip}"
        )));
    }
    let mut b = field.b.clone();
    let mut mask = field.sat_mask.clone();
    for (v, m) in b.iter_mut().zip(mask.iter_mut()) {
        if v.abs() >= b_clip {
            *v = b_clip.copysign(*v);
            *m = true;
        }
    }
    Ok(FieldVector { b, sat_mask: mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn pose(p: [f64; 3], psi: f64, theta: f64) -> Pose5 {
        Pose5::new(Vec3::from(p), psi, theta).unwrap()
    }

    /// Component-wise evaluation of the dipole formula, written out without
    /// vector helpers so it shares no code with the implementation.
    fn field_oracle(p: [f64; 3], n: [f64; 3], s: [f64; 3], b_t: f64) -> [f64; 3] {
        let d = [s[0] - p[0], s[1] - p[1], s[2] - p[2]];
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let nd = n[0] * d[0] + n[1] * d[1] + n[2] * d[2];
        let mut out = [0.0; 3];
        for k in 0..3 {
            out[k] = b_t * (3.0 * nd * d[k] / r.powi(5) - n[k] / r.powi(3));
        }
        out
    }

    #[test]
    fn orientation_axis_cases() {
        assert_relative_eq!(
            *orientation_from_angles(0.0, PI / 2.0).as_vec(),
            Vec3::new(1.0, 0.0, 0.0),
            epsilon = 1e-15
        );
        assert_relative_eq!(
            *orientation_from_angles(PI / 2.0, PI / 2.0).as_vec(),
            Vec3::new(0.0, 1.0, 0.0),
            epsilon = 1e-15
        );
        assert_eq!(
            *orientation_from_angles(1.234, 0.0).as_vec(),
            Vec3::new(0.0, 0.0, 1.0)
        );
    }

    #[test]
    fn angles_from_axis_cases() {
        let z = OrientationVector::new(Vec3::z()).unwrap();
        assert_eq!(angles_from_orientation(&z), (0.0, 0.0));
        let (psi, theta) = angles_from_orientation(&OrientationVector::new(Vec3::x()).unwrap());
        assert_eq!(psi, 0.0);
        assert_relative_eq!(theta, PI / 2.0);
        let (psi, theta) = angles_from_orientation(&OrientationVector::new(-Vec3::y()).unwrap());
        assert_relative_eq!(psi, 3.0 * PI / 2.0);
        assert_relative_eq!(theta, PI / 2.0);
        let (psi, theta) = angles_from_orientation(&OrientationVector::new(-Vec3::z()).unwrap());
        assert_eq!(psi, 0.0);
        assert_relative_eq!(theta, PI);
    }

    #[test]
    fn pose_rejects_bad_pitch_and_wraps_yaw() {
        assert!(Pose5::new(Vec3::zeros(), 0.0, -0.1).is_err());
        assert!(Pose5::new(Vec3::zeros(), 0.0, 3.2).is_err());
        assert!(Pose5::new(Vec3::new(f64::NAN, 0.0, 0.0), 0.0, 1.0).is_err());
        let p = pose([0.0; 3], -PI / 2.0, 1.0);
        assert_relative_eq!(p.psi, 3.0 * PI / 2.0);
        let p = pose([0.0; 3], 5.0 * PI, 1.0);
        assert_relative_eq!(p.psi, PI, epsilon = 1e-12);
        assert!(pose([0.0; 3], -1e-300, 1.0).psi < TAU);
    }

    #[test]
    fn on_axis_and_equatorial_fields() {
        let model = MagnetModel::default();
        let pz = pose([0.0; 3], 0.0, 0.0);
        let b = field_at(&pz, &Vec3::new(0.0, 0.0, 0.1), &model).unwrap();
        assert_relative_eq!(b, Vec3::new(0.0, 0.0, 159.332), max_relative = 1e-12);
        let oracle = field_oracle([0.0; 3], [0.0, 0.0, 1.0], [0.0, 0.0, 0.1], DEFAULT_B_T);
        assert_relative_eq!(b, Vec3::from(oracle), max_relative = 1e-12);

        let b = field_at(&pz, &Vec3::new(0.1, 0.0, 0.0), &model).unwrap();
        assert_relative_eq!(
            b,
            Vec3::new(0.0, 0.0, -79.666),
            max_relative = 1e-12,
            epsilon = 1e-12
        );
    }

    #[test]
    fn field_matches_componentwise_oracle() {
        let model = MagnetModel::new(0.05).unwrap();
        let ps = pose([0.01, -0.02, 0.08], 2.1, 0.7);
        let n = ps.orientation();
        for s in [[0.05, 0.05, 0.02], [-0.03, 0.01, 0.18], [0.0, 0.0, 0.0]] {
            let b = field_at(&ps, &Vec3::from(s), &model).unwrap();
            let o = field_oracle(ps.p.into(), (*n.as_vec()).into(), s, 0.05);
            assert_relative_eq!(b, Vec3::from(o), max_relative = 1e-13);
        }
    }

    #[test]
    fn flipping_axis_negates_field() {
        let model = MagnetModel::default();
        let s = Vec3::new(0.03, -0.02, 0.02);
        let p = Vec3::new(0.0, 0.01, 0.1);
        let n = orientation_from_angles(0.4, 1.1);
        let b = field_from_axis(&p, n.as_vec(), &s, &model, 0).unwrap();
        let bneg = field_from_axis(&p, (-n).as_vec(), &s, &model, 0).unwrap();
        assert_eq!(b, -bneg);
    }

    #[test]
    fn degenerate_distance_is_rejected() {
        let model = MagnetModel::default();
        let ps = pose([0.0, 0.0, 0.02], 0.0, 1.0);
        let err = field_at(&ps, &Vec3::new(0.0, 0.0, 0.02 + 1e-7), &model).unwrap_err();
        assert!(matches!(err, Error::DegenerateDistance { .. }));
    }

    #[test]
    fn field_array_reports_offending_sensor() {
        let layout = SensorLayout::new(
            "t",
            vec![Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.0, 0.0, 0.05)],
        )
        .unwrap();
        let ps = pose([0.0, 0.0, 0.05], 0.0, 1.0);
        match field_array(&ps, &layout, &MagnetModel::default()) {
            Err(Error::DegenerateDistance { sensor, .. }) => assert_eq!(sensor, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            jacobian(&ps, &layout, &MagnetModel::default()),
            Err(Error::DegenerateDistance { sensor: 1, .. })
        ));
    }

    #[test]
    fn field_array_is_sensor_major() {
        let layout = crate::geometry::build_planar();
        let model = MagnetModel::default();
        let ps = pose([0.013, -0.021, 0.087], 4.0, 2.0);
        let fv = field_array(&ps, &layout, &model).unwrap();
        assert_eq!(fv.values().len(), 48);
        assert!(fv.sat_mask().iter().all(|&m| !m));
        for (i, s) in layout.positions().iter().enumerate() {
            assert_eq!(fv.sensor(i), field_at(&ps, s, &model).unwrap());
        }

        let mut rev = layout.positions().to_vec();
        rev.reverse();
        let rev = SensorLayout::new("rev", rev).unwrap();
        let fr = field_array(&ps, &rev, &model).unwrap();
        for i in 0..16 {
            assert_eq!(fr.sensor(i), fv.sensor(15 - i));
        }
    }

    #[test]
    fn single_sensor_array_reduces_to_field_at() {
        let s = Vec3::new(0.02, 0.03, 0.18);
        let layout = SensorLayout::new("one", vec![s]).unwrap();
        let ps = pose([0.0, 0.0, 0.1], 1.0, 1.0);
        let model = MagnetModel::default();
        assert_eq!(
            field_array(&ps, &layout, &model).unwrap().sensor(0),
            field_at(&ps, &s, &model).unwrap()
        );
    }

    #[test]
    fn yaw_column_vanishes_at_pole() {
        let layout = crate::geometry::build_staggered_split();
        let ps = pose([0.01, 0.02, 0.09], 0.8, 0.0);
        let jac = jacobian(&ps, &layout, &MagnetModel::default()).unwrap();
        assert!(jac.column(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jacobian_translation_invariant() {
        let layout = crate::geometry::build_planar();
        let shift = Vec3::new(0.3, -0.2, 0.5);
        let moved = SensorLayout::new(
            "moved",
            layout.positions().iter().map(|s| s + shift).collect(),
        )
        .unwrap();
        let model = MagnetModel::default();
        let ps = pose([0.01, 0.02, 0.09], 0.8, 1.2);
        let ps_moved = pose((ps.p + shift).into(), 0.8, 1.2);
        let a = jacobian(&ps, &layout, &model).unwrap();
        let b = jacobian(&ps_moved, &moved, &model).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-9, epsilon = 1e-9);
    }

    #[test]
    fn inverse_cube_decay_on_axis() {
        let model = MagnetModel::default();
        let ps = pose([0.0; 3], 0.0, 0.7);
        let n = *ps.orientation().as_vec();
        let near = field_at(&ps, &(0.05 * n), &model).unwrap().norm();
        let far = field_at(&ps, &(0.1 * n), &model).unwrap().norm();
        assert_relative_eq!(near / far, 8.0, max_relative = 1e-9);
    }

    #[test]
    fn spatial_gradient_is_traceless() {
        let n = orientation_from_angles(1.3, 0.9);
        for d in [
            Vec3::new(0.03, -0.04, 0.07),
            Vec3::new(-0.11, 0.02, -0.01),
            Vec3::new(0.0, 0.0, 0.05),
        ] {
            let der = dipole_derivatives(n.as_vec(), &d, d.norm(), DEFAULT_B_T);
            let g = der.d_field_d_disp;
            assert!(g.trace().abs() <= 1e-6 * g.norm(), "trace {}", g.trace());
            assert_relative_eq!(g, g.transpose(), max_relative = 1e-12);
        }
    }

    #[test]
    fn saturation_examples() {
        let f = FieldVector::new(vec![2500.0, -1899.9, 1900.0, -1900.0, -3000.0, 0.0]).unwrap();
        let s = saturate(&f, 1900.0).unwrap();
        assert_eq!(
            s.values(),
            &[1900.0, -1899.9, 1900.0, -1900.0, -1900.0, 0.0]
        );
        assert_eq!(s.sat_mask(), &[true, false, true, true, true, false]);
        assert!(saturate(&f, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn orientation_is_unit(psi in -10.0f64..10.0, theta in 0.0f64..PI) {
            let n = orientation_from_angles(psi, theta);
            prop_assert!((n.as_vec().norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn angle_round_trip(psi in 0.0f64..TAU, theta in 1e-3f64..(PI - 1e-3)) {
            let (p2, t2) = angles_from_orientation(&orientation_from_angles(psi, theta));
            prop_assert!((t2 - theta).abs() < 1e-9);
            let dpsi = (p2 - psi).rem_euclid(TAU);
            prop_assert!(dpsi.min(TAU - dpsi) < 1e-9);
        }

        #[test]
        fn saturate_is_idempotent(vals in proptest::collection::vec(-5000.0f64..5000.0, 3..30),
                                  clip in 1.0f64..3000.0) {
            let len = vals.len() / 3 * 3;
            let f = FieldVector::new(vals[..len].to_vec()).unwrap();
            let once = saturate(&f, clip).unwrap();
            let twice = saturate(&once, clip).unwrap();
            prop_assert_eq!(&once, &twice);
            for (v, m) in once.values().iter().zip(once.sat_mask()) {
                prop_assert!(v.abs() <= clip);
                if *m { prop_assert_eq!(v.abs(), clip); }
            }
        }
    }
}
