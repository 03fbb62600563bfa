//! Levenberg–Marquardt pose recovery from a single array measurement.
//!
//! The solver works on a 6-parameter state: position `p` and an unnormalized
//! orientation `m`. The model always uses `n = m / |m|`, so the state never has
//! to stay on the sphere; the resulting null direction along `m` is absorbed by
//! the damping term.

use std::time::Instant;

use nalgebra::{Cholesky, Matrix3, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::dipole::{dipole_derivatives, FieldVector, MagnetModel, Pose5, Vec3, MIN_DISTANCE_M};
use crate::error::{Error, Result};
use crate::geometry::SensorLayout;

/// Position components of a step are divided by this before taking its norm.
pub const POSITION_STEP_SCALE: f64 = 0.1;

const MIN_AXIS_NORM: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_iters: usize,
    /// Threshold on the scaled step norm.
    pub step_tol: f64,
    /// Threshold on the relative decrease of an accepted step.
    pub resid_tol: f64,
    /// Drop channels flagged as saturated from the fit.
    pub use_sat_mask: bool,
    /// Steps that put the magnet farther than this from the array centroid
    /// are rejected (m). Far from the array the cost flattens out and
    /// undamped steps would otherwise run off.
    pub max_range: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            lambda0: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.1,
            max_iters: 100,
            step_tol: 1e-9,
            resid_tol: 1e-10,
            use_sat_mask: false,
            max_range: 1.0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda0 > 0.0
            && self.lambda_up > 1.0
            && self.lambda_down > 0.0
            && self.lambda_down < 1.0
            && self.max_iters >= 1
            && self.step_tol >= 0.0
            && self.resid_tol >= 0.0
            && self.max_range > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid LM configuration {self:?}"
            )))
        }
    }
}

/// Solver state: position (m) and unnormalized magnetization axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmState6 {
    pub p: Vec3,
    pub m: Vec3,
}

impl LmState6 {
    pub fn new(p: Vec3, m: Vec3) -> Result<Self> {
        if !p.iter().chain(m.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("LM state"));
        }
        if m.norm() <= MIN_AXIS_NORM {
            return Err(Error::InvalidArgument(
                "orientation part of LM state is too close to zero".into(),
            ));
        }
        Ok(Self { p, m })
    }

    fn to_vector(self) -> Vector6<f64> {
        Vector6::new(self.p.x, self.p.y, self.p.z, self.m.x, self.m.y, self.m.z)
    }

    fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            p: Vec3::new(v[0], v[1], v[2]),
            m: Vec3::new(v[3], v[4], v[5]),
        }
    }
}

/// Ground truth shifted by `dp` on every position component and `dn` on every
/// component of the orientation vector.
pub fn perturbed_init(gt: &Pose5, dp: f64, dn: f64) -> LmState6 {
    LmState6 {
        p: gt.p + Vec3::repeat(dp),
        m: gt.orientation().into_inner() + Vec3::repeat(dn),
    }
}

pub const DEFAULT_INIT_DP: f64 = 0.020;
pub const DEFAULT_INIT_DN: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmEstimate {
    pub p_hat: Vec3,
    pub n_hat: Vec3,
    pub residual_rms: f64,
    pub iters: usize,
    pub converged: bool,
    pub wall_time: f64,
    /// Cost of the initial state followed by every accepted step.
    pub cost_trace: Vec<f64>,
}

struct Problem<'a> {
    meas: &'a [f64],
    active: Vec<bool>,
    sensors: &'a [Vec3],
    b_t: f64,
}

impl Problem<'_> {
    fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Sum of squared residuals over active channels; `None` if the magnet
    /// sits on a sensor.
    fn cost(&self, p: &Vec3, n: &Vec3) -> Option<f64> {
        let mut cost = 0.0;
        for (i, s) in self.sensors.iter().enumerate() {
            let d = s - p;
            let r = d.norm();
            if !(r > MIN_DISTANCE_M) {
                return None;
            }
            let r2 = r * r;
            let inv_r3 = 1.0 / (r2 * r);
            let b = self.b_t * (3.0 * n.dot(&d) * inv_r3 / r2 * d - inv_r3 * n);
            for k in 0..3 {
                let c = 3 * i + k;
                if self.active[c] {
                    let e = self.meas[c] - b[k];
                    cost += e * e;
                }
            }
        }
        Some(cost)
    }

    /// Normal matrix `JᵀJ` and gradient `Jᵀr` of the model over active rows,
    /// plus the cost at the state.
    fn normal_equations(&self, state: &LmState6) -> Option<(Matrix6<f64>, Vector6<f64>, f64)> {
        let m_norm = state.m.norm();
        let n = state.m / m_norm;
        let project = (Matrix3::identity() - n * n.transpose()) / m_norm;
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        let mut cost = 0.0;
        for (i, s) in self.sensors.iter().enumerate() {
            let d = s - state.p;
            let r = d.norm();
            if !(r > MIN_DISTANCE_M) {
                return None;
            }
            let der = dipole_derivatives(&n, &d, r, self.b_t);
            let d_m = der.d_field_d_axis * project;
            for k in 0..3 {
                let c = 3 * i + k;
                if !self.active[c] {
                    continue;
                }
                let row = Vector6::new(
                    -der.d_field_d_disp[(k, 0)],
                    -der.d_field_d_disp[(k, 1)],
                    -der.d_field_d_disp[(k, 2)],
                    d_m[(k, 0)],
                    d_m[(k, 1)],
                    d_m[(k, 2)],
                );
                let e = self.meas[c] - der.field[k];
                cost += e * e;
                jtj += row * row.transpose();
                jtr += row * e;
            }
        }
        // Scaling m leaves the model unchanged, so JᵀJ is singular along
        // (0, n). Jᵀr has no component there; pinning that direction only
        // removes the meaningless radial part of the step.
        let w = (jtj[(3, 3)] + jtj[(4, 4)] + jtj[(5, 5)]) / 3.0;
        let gauge = n * n.transpose() * w;
        for a in 0..3 {
            for b in 0..3 {
                jtj[(3 + a, 3 + b)] += gauge[(a, b)];
            }
        }
        Some((jtj, jtr, cost))
    }
}

fn scaled_step_norm(delta: &Vector6<f64>) -> f64 {
    let mut s = 0.0;
    for k in 0..3 {
        let v = delta[k] / POSITION_STEP_SCALE;
        s += v * v;
    }
    for k in 3..6 {
        s += delta[k] * delta[k];
    }
    s.sqrt()
}

fn solve_damped(jtj: &Matrix6<f64>, jtr: &Vector6<f64>, lambda: f64) -> Result<Vector6<f64>> {
    let mut a = *jtj;
    for k in 0..6 {
        a[(k, k)] += lambda * jtj[(k, k)];
    }
    if let Some(ch) = Cholesky::new(a) {
        return Ok(ch.solve(jtr));
    }
    let mut a = *jtj;
    for k in 0..6 {
        a[(k, k)] += lambda;
    }
    Cholesky::new(a)
        .map(|ch| ch.solve(jtr))
        .ok_or(Error::SingularNormalEquations)
}

/// Minimizes `|meas - y(p, m/|m|)|²` from `init`.
///
/// Non-convergence within `max_iters` is reported through
/// [`LmEstimate::converged`], not as an error.
pub fn lm_solve(
    meas: &FieldVector,
    layout: &SensorLayout,
    model: &MagnetModel,
    init: &LmState6,
    config: &LmConfig,
) -> Result<LmEstimate> {
    let start = Instant::now();
    config.validate()?;
    if meas.values().len() != 3 * layout.len() {
        return Err(Error::InvalidArgument(format!(
            "measurement has {} channels, layout expects {}",
            meas.values().len(),
            3 * layout.len()
        )));
    }
    if !meas.values().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("measurement"));
    }
    let init = LmState6::new(init.p, init.m)?;

    let active: Vec<bool> = if config.use_sat_mask {
        meas.sat_mask().iter().map(|&s| !s).collect()
    } else {
        vec![true; meas.values().len()]
    };
    let problem = Problem {
        meas: meas.values(),
        active,
        sensors: layout.positions(),
        b_t: model.b_t(),
    };
    let n_active = problem.n_active();
    if n_active == 0 {
        return Err(Error::InvalidArgument(
            "every channel is masked as saturated".into(),
        ));
    }

    let centroid = layout.positions().iter().sum::<Vec3>() / layout.len() as f64;
    let mut state = init;
    let (mut jtj, mut jtr, mut cost) = problem.normal_equations(&state).ok_or_else(|| {
        let sensor = nearest_sensor(layout, &state.p);
        Error::DegenerateDistance {
            sensor,
            distance: (layout.positions()[sensor] - state.p).norm(),
        }
    })?;
    let mut cost_trace = vec![cost];
    let mut lambda = config.lambda0;
    let mut converged = false;
    let mut iters = 0;

    while iters < config.max_iters {
        iters += 1;
        let delta = solve_damped(&jtj, &jtr, lambda)?;
        if !delta.iter().all(|v| v.is_finite()) {
            return Err(Error::SingularNormalEquations);
        }
        if scaled_step_norm(&delta) < config.step_tol {
            converged = true;
            break;
        }
        let mut candidate = LmState6::from_vector(&(state.to_vector() + delta));
        let m_norm = candidate.m.norm();
        let in_range = (candidate.p - centroid).norm() <= config.max_range;
        let new_cost = if m_norm > MIN_AXIS_NORM && in_range {
            problem.cost(&candidate.p, &(candidate.m / m_norm))
        } else {
            None
        };
        match new_cost {
            Some(c) if c < cost => {
                let rel = (cost - c) / cost;
                candidate.m /= m_norm;
                state = candidate;
                lambda *= config.lambda_down;
                let (a, g, c_exact) = problem
                    .normal_equations(&state)
                    .expect("accepted state has a finite cost");
                jtj = a;
                jtr = g;
                cost = c_exact;
                cost_trace.push(cost);
                if rel < config.resid_tol {
                    converged = true;
                    break;
                }
            }
            _ => lambda *= config.lambda_up,
        }
    }

    Ok(LmEstimate {
        p_hat: state.p,
        n_hat: state.m / state.m.norm(),
        residual_rms: (cost / n_active as f64).sqrt(),
        iters,
        converged,
        wall_time: start.elapsed().as_secs_f64(),
        cost_trace,
    })
}

fn nearest_sensor(layout: &SensorLayout, p: &Vec3) -> usize {
    layout
        .positions()
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - p).norm().total_cmp(&(b.1 - p).norm()))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Sum of squared residuals of `meas` against the model at `(p, n)`, over all
/// channels. `None` if a sensor coincides with `p`.
pub fn residual_cost(
    meas: &FieldVector,
    layout: &SensorLayout,
    model: &MagnetModel,
    p: &Vec3,
    n: &Vec3,
) -> Option<f64> {
    let problem = Problem {
        meas: meas.values(),
        active: vec![true; meas.values().len()],
        sensors: layout.positions(),
        b_t: model.b_t(),
    };
    problem.cost(p, &n.normalize())
}
