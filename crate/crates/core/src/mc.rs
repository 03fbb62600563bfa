//! Monte-Carlo evaluation of the LM solver: error metrics, aggregate
//! statistics, height profiles and comparison against the CRLB.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{synthesize, NoiseMode};
use crate::dipole::{angles_from_orientation, MagnetModel, OrientationVector, Pose5, Vec3};
use crate::error::{Error, Result};
use crate::geometry::SensorLayout;
use crate::lm::{lm_solve, perturbed_init, LmConfig, DEFAULT_INIT_DN, DEFAULT_INIT_DP};
use crate::observability::{
    build_fim, crlb_metrics, evaluate_poses, lhs_sample, lhs_sample_at_height, Fim, NoiseModel,
    WorkspaceSpec,
};
use crate::rng::{self, Purpose};
use crate::stats::{mean, quantile_sorted, Summary};

/// Position error in mm.
pub fn e_pos(p_hat: &Vec3, p: &Vec3) -> f64 {
    (p_hat - p).norm() * 1000.0
}

/// Angle between two axes in degrees. Neither vector needs to be normalized.
pub fn e_ori(n_hat: &Vec3, n: &Vec3) -> f64 {
    let c = n_hat.dot(n) / (n_hat.norm() * n.norm());
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub rmse: f64,
    pub max: f64,
    pub p95: f64,
}

impl MetricStats {
    /// `None` for an empty sample. Computed over the sorted values, so the
    /// result does not depend on trial order.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let m = mean(&sorted);
        let var = sorted.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / sorted.len() as f64;
        let ms = sorted.iter().map(|v| v * v).sum::<f64>() / sorted.len() as f64;
        Some(Self {
            mean: m,
            std: var.sqrt(),
            rmse: ms.sqrt(),
            max: *sorted.last().expect("non-empty"),
            p95: quantile_sorted(&sorted, 0.95),
        })
    }
}

/// One solver run against a known pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub pose: Pose5,
    pub p_hat: Vec3,
    pub n_hat: Vec3,
    pub e_pos_mm: f64,
    pub e_ori_deg: f64,
    pub converged: bool,
    pub iters: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub pos_mm: MetricStats,
    pub ori_deg: MetricStats,
    pub n_trials: usize,
    pub n_converged: usize,
    /// Trials that entered the statistics.
    pub n_included: usize,
    /// Mean solver wall time. Not reproducible, so keep it out of equality checks.
    pub mean_wall_ms: f64,
}

impl ErrorStats {
    pub fn from_outcomes(outcomes: &[TrialOutcome], include_nonconverged: bool) -> Result<Self> {
        let used: Vec<&TrialOutcome> = outcomes
            .iter()
            .filter(|o| include_nonconverged || o.converged)
            .collect();
        let pos: Vec<f64> = used.iter().map(|o| o.e_pos_mm).collect();
        let ori: Vec<f64> = used.iter().map(|o| o.e_ori_deg).collect();
        let (Some(pos_mm), Some(ori_deg)) = (
            MetricStats::from_values(&pos),
            MetricStats::from_values(&ori),
        ) else {
            return Err(Error::InvalidArgument(format!(
                "none of {} trials is left for statistics",
                outcomes.len()
            )));
        };
        let mut wall: Vec<f64> = outcomes.iter().map(|o| o.wall_ms).collect();
        wall.sort_by(f64::total_cmp);
        Ok(Self {
            pos_mm,
            ori_deg,
            n_trials: outcomes.len(),
            n_converged: outcomes.iter().filter(|o| o.converged).count(),
            n_included: used.len(),
            mean_wall_ms: mean(&wall),
        })
    }

    /// Equality on everything except wall time.
    pub fn same_errors(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.mean_wall_ms = other.mean_wall_ms;
        a == *other
    }
}

/// Trial protocol shared by [`run_mc`] and [`layer_profile`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    /// Pose bounds; `n_samples` is the number of trials (per level for
    /// profiles) and `seed` drives both the poses and the noise.
    pub workspace: WorkspaceSpec,
    /// `None` disables clipping.
    pub b_clip: Option<f64>,
    /// Initial-guess offset added to each position component (m).
    pub init_dp: f64,
    /// Initial-guess offset added to each orientation-vector component.
    pub init_dn: f64,
    pub include_nonconverged: bool,
}

impl TrialSpec {
    pub fn new(workspace: WorkspaceSpec) -> Self {
        Self {
            workspace,
            b_clip: None,
            init_dp: DEFAULT_INIT_DP,
            init_dn: DEFAULT_INIT_DN,
            include_nonconverged: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.workspace.validate()?;
        if let Some(c) = self.b_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "clip level {c} must be positive"
                )));
            }
        }
        if !(self.init_dp.is_finite() && self.init_dn.is_finite()) {
            return Err(Error::NonFinite("initial perturbation"));
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn solve_trial(
    pose: &Pose5,
    layout: &SensorLayout,
    model: &MagnetModel,
    noise: &NoiseMode,
    solver: &LmConfig,
    spec: &TrialSpec,
    seed: u64,
    stream: u64,
) -> Result<TrialOutcome> {
    let mut rng = rng::stream(seed, Purpose::TrialNoise, stream);
    let meas = synthesize(pose, layout, model, spec.b_clip, noise, &mut rng)?;
    let init = perturbed_init(pose, spec.init_dp, spec.init_dn);
    let n = pose.orientation().into_inner();
    let (p_hat, n_hat, converged, iters, wall_ms) =
        match lm_solve(&meas, layout, model, &init, solver) {
            Ok(est) => (
                est.p_hat,
                est.n_hat,
                est.converged,
                est.iters,
                est.wall_time * 1e3,
            ),
            // a solve that breaks down counts as a failed trial at its starting point
            Err(Error::SingularNormalEquations | Error::DegenerateDistance { .. }) => {
                (init.p, init.m / init.m.norm(), false, 0, 0.0)
            }
            Err(e) => return Err(e),
        };
    Ok(TrialOutcome {
        pose: *pose,
        p_hat,
        n_hat,
        e_pos_mm: e_pos(&p_hat, &pose.p),
        e_ori_deg: e_ori(&n_hat, &n),
        converged,
        iters,
        wall_ms,
    })
}

/// Solves one noisy measurement per pose. Trial `i` draws noise from stream
/// `stream_offset + i`, so results are independent of scheduling.
pub fn run_trials(
    layout: &SensorLayout,
    model: &MagnetModel,
    noise: &NoiseMode,
    solver: &LmConfig,
    spec: &TrialSpec,
    poses: &[Pose5],
    stream_offset: u64,
) -> Result<Vec<TrialOutcome>> {
    spec.validate()?;
    noise.validate()?;
    solver.validate()?;
    let seed = spec.workspace.seed;
    // warm-up call so the timed solves are steady state
    if let Some(first) = poses.first() {
        solve_trial(
            first,
            layout,
            model,
            noise,
            solver,
            spec,
            seed,
            stream_offset,
        )?;
    }
    poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| {
            solve_trial(
                pose,
                layout,
                model,
                noise,
                solver,
                spec,
                seed,
                stream_offset + i as u64,
            )
        })
        .collect()
}

/// LHS poses over the workspace, one noisy solve each.
pub fn run_mc(
    layout: &SensorLayout,
    model: &MagnetModel,
    noise: &NoiseMode,
    solver: &LmConfig,
    spec: &TrialSpec,
) -> Result<ErrorStats> {
    let poses = lhs_sample(&spec.workspace)?;
    let outcomes = run_trials(layout, model, noise, solver, spec, &poses, 0)?;
    ErrorStats::from_outcomes(&outcomes, spec.include_nonconverged)
}

/// Median Cramér–Rao bounds over a pose set, skipping degenerate poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrlbMedians {
    pub pos_mm: f64,
    pub ori_deg: f64,
    /// Bound on the axis angle error, see [`angle_bound_deg`].
    pub angle_deg: f64,
}

impl CrlbMedians {
    /// `None` if every pose is degenerate.
    pub fn over(
        layout: &SensorLayout,
        model: &MagnetModel,
        noise: &NoiseModel,
        poses: &[Pose5],
    ) -> Result<Option<Self>> {
        let reports = evaluate_poses(layout, poses, model, noise)?;
        let mut pos = Vec::new();
        let mut ori = Vec::new();
        let mut angle = Vec::new();
        for (pose, r) in poses.iter().zip(&reports) {
            if let Some(r) = r {
                pos.push(r.pos_bound_mm);
                ori.push(r.ori_bound_deg);
                angle.extend(angle_bound_deg(&r.fim, pose.theta));
            }
        }
        let med = |v: &[f64]| Summary::from_values(v).map(|s| s.median);
        Ok(match (med(&pos), med(&ori), med(&angle)) {
            (Some(pos_mm), Some(ori_deg), Some(angle_deg)) => Some(Self {
                pos_mm,
                ori_deg,
                angle_deg,
            }),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub z: f64,
    pub stats: ErrorStats,
    /// Bounds over the same poses; present for fixed-sigma noise only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub crlb: Option<CrlbMedians>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    /// Ascending.
    pub z_levels: Vec<f64>,
    pub levels: Vec<LevelStats>,
}

/// Error statistics per height. At each level the `(x, y, psi, cos theta)`
/// samples come from the same LHS design; noise streams differ per level.
pub fn layer_profile(
    layout: &SensorLayout,
    model: &MagnetModel,
    noise: &NoiseMode,
    solver: &LmConfig,
    z_levels: &[f64],
    spec: &TrialSpec,
) -> Result<LayerProfile> {
    if z_levels.is_empty() {
        return Err(Error::InvalidArgument("no z levels given".into()));
    }
    if !z_levels.iter().all(|z| z.is_finite()) {
        return Err(Error::NonFinite("z level"));
    }
    let mut zs = z_levels.to_vec();
    zs.sort_by(f64::total_cmp);
    zs.dedup();
    let per_level = spec.workspace.n_samples as u64;
    let crlb_noise = match *noise {
        NoiseMode::Absolute { sigma } if sigma > 0.0 => Some(NoiseModel::new(sigma)?),
        _ => None,
    };

    let mut levels = Vec::with_capacity(zs.len());
    for (k, &z) in zs.iter().enumerate() {
        let poses = lhs_sample_at_height(&spec.workspace, z)?;
        let outcomes = run_trials(
            layout,
            model,
            noise,
            solver,
            spec,
            &poses,
            k as u64 * per_level,
        )?;
        let stats = ErrorStats::from_outcomes(&outcomes, spec.include_nonconverged)?;
        let crlb = match crlb_noise {
            Some(nm) => CrlbMedians::over(layout, model, &nm, &poses)?,
            None => None,
        };
        levels.push(LevelStats { z, stats, crlb });
    }
    Ok(LayerProfile {
        z_levels: zs,
        levels,
    })
}

/// Bound on the RMS axis angle error in degrees: the `(psi, theta)` covariance
/// mapped onto the sphere, `sqrt(C_tt + sin²theta C_pp)`. Never larger than the
/// chart bound. `None` for a singular FIM.
pub fn angle_bound_deg(fim: &Fim, theta: f64) -> Option<f64> {
    let c = fim.cholesky()?.inverse();
    let s = theta.sin();
    let var = c[(4, 4)] + s * s * c[(3, 3)];
    (var.is_finite() && var >= 0.0).then(|| var.sqrt().to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareSpec {
    pub n_trials: usize,
    pub seed: u64,
    pub init_dp: f64,
    pub init_dn: f64,
}

impl Default for CompareSpec {
    fn default() -> Self {
        Self {
            n_trials: 1000,
            seed: 0,
            init_dp: DEFAULT_INIT_DP,
            init_dn: DEFAULT_INIT_DN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrlbComparison {
    pub pose: Pose5,
    pub sigma: f64,
    pub n_trials: usize,
    pub n_converged: usize,
    pub mc_rmse_pos_mm: f64,
    pub crlb_pos_mm: f64,
    /// RMS of the `(psi, theta)` errors, the same coordinates the bound uses.
    pub mc_rmse_ori_deg: f64,
    /// RMS of the axis angle errors.
    pub mc_rmse_angle_deg: f64,
    pub crlb_ori_deg: f64,
    pub crlb_angle_deg: f64,
    pub ratio_pos: f64,
    pub ratio_ori: f64,
    pub ratio_angle: f64,
}

fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Repeated noisy solves at one pose against its Cramér–Rao bounds. Data are
/// unclipped so they follow the model behind the bound.
pub fn compare_crlb(
    layout: &SensorLayout,
    model: &MagnetModel,
    noise: &NoiseModel,
    pose: &Pose5,
    solver: &LmConfig,
    spec: &CompareSpec,
) -> Result<CrlbComparison> {
    if spec.n_trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    let report = crlb_metrics(&build_fim(pose, layout, model, noise)?)?;
    if report.degenerate {
        return Err(Error::DegeneratePose);
    }
    let mut trial =
        TrialSpec::new(WorkspaceSpec::benchmark().with_samples(spec.n_trials, spec.seed));
    trial.init_dp = spec.init_dp;
    trial.init_dn = spec.init_dn;
    let poses = vec![*pose; spec.n_trials];
    let mode = NoiseMode::Absolute {
        sigma: noise.sigma(),
    };
    let outcomes = run_trials(layout, model, &mode, solver, &trial, &poses, 0)?;

    let n = outcomes.len() as f64;
    let mut sq_pos = Vec::with_capacity(outcomes.len());
    let mut sq_chart = Vec::with_capacity(outcomes.len());
    let mut sq_angle = Vec::with_capacity(outcomes.len());
    for o in &outcomes {
        let (psi, theta) = angles_from_orientation(&OrientationVector::new(o.n_hat)?);
        let dpsi = wrap_angle(psi - pose.psi);
        let dtheta = theta - pose.theta;
        sq_pos.push(o.e_pos_mm * o.e_pos_mm);
        sq_chart.push(dpsi * dpsi + dtheta * dtheta);
        sq_angle.push(o.e_ori_deg * o.e_ori_deg);
    }
    let rms = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        (v.iter().sum::<f64>() / n).sqrt()
    };
    let mc_rmse_pos_mm = rms(sq_pos);
    let mc_rmse_ori_deg = rms(sq_chart).to_degrees();
    let mc_rmse_angle_deg = rms(sq_angle);
    let crlb_angle_deg = angle_bound_deg(&report.fim, pose.theta).ok_or(Error::DegeneratePose)?;
    Ok(CrlbComparison {
        pose: *pose,
        sigma: noise.sigma(),
        n_trials: outcomes.len(),
        n_converged: outcomes.iter().filter(|o| o.converged).count(),
        mc_rmse_pos_mm,
        crlb_pos_mm: report.pos_bound_mm,
        mc_rmse_ori_deg,
        mc_rmse_angle_deg,
        crlb_ori_deg: report.ori_bound_deg,
        crlb_angle_deg,
        ratio_pos: mc_rmse_pos_mm / report.pos_bound_mm,
        ratio_ori: mc_rmse_ori_deg / report.ori_bound_deg,
        ratio_angle: mc_rmse_angle_deg / crlb_angle_deg,
    })
}

pub const CSV_HEADER: [&str; 16] = [
    "group",
    "n_trials",
    "n_converged",
    "pos_mean_mm",
    "pos_std_mm",
    "pos_rmse_mm",
    "pos_max_mm",
    "pos_p95_mm",
    "ori_mean_deg",
    "ori_std_deg",
    "ori_rmse_deg",
    "ori_max_deg",
    "ori_p95_deg",
    "crlb_pos_median_mm",
    "crlb_ori_median_deg",
    "crlb_angle_median_deg",
];

fn csv_row(group: String, s: &ErrorStats, crlb: Option<&CrlbMedians>) -> Vec<String> {
    let opt = |f: fn(&CrlbMedians) -> f64| crlb.map(|c| f(c).to_string()).unwrap_or_default();
    vec![
        group,
        s.n_trials.to_string(),
        s.n_converged.to_string(),
        s.pos_mm.mean.to_string(),
        s.pos_mm.std.to_string(),
        s.pos_mm.rmse.to_string(),
        s.pos_mm.max.to_string(),
        s.pos_mm.p95.to_string(),
        s.ori_deg.mean.to_string(),
        s.ori_deg.std.to_string(),
        s.ori_deg.rmse.to_string(),
        s.ori_deg.max.to_string(),
        s.ori_deg.p95.to_string(),
        opt(|c| c.pos_mm),
        opt(|c| c.ori_deg),
        opt(|c| c.angle_deg),
    ]
}

/// One row labelled `all`. Wall time is left out so the table is reproducible.
pub fn write_stats_csv<W: Write>(
    writer: W,
    stats: &ErrorStats,
    crlb: Option<&CrlbMedians>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    w.write_record(csv_row("all".into(), stats, crlb))
        .map_err(csv_err)?;
    w.flush()?;
    Ok(())
}

/// One row per level, labelled by its height in m.
pub fn write_profile_csv<W: Write>(writer: W, profile: &LayerProfile) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for l in &profile.levels {
        w.write_record(csv_row(l.z.to_string(), &l.stats, l.crlb.as_ref()))
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}
