//! Fisher information, Cramér–Rao bounds and workspace sweeps.
//!
//! Under i.i.d. Gaussian noise of standard deviation `sigma` on every channel,
//! the Fisher information of the 5-DOF pose is `F = JᵀJ / sigma²`. Its inverse
//! lower-bounds the covariance of any unbiased estimator; the reported scalars
//! are the position bound `sqrt(tr F⁻¹[pos])` in mm, the orientation bound
//! `sqrt(tr F⁻¹[psi, theta])` in degrees, the smallest eigenvalue and the
//! condition number.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix5, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dipole::{MagnetModel, Pose5, PoseFrame, Vec3};
use crate::error::{Error, Result};
use crate::geometry::SensorLayout;
use crate::rng::{self, Purpose};
use crate::stats::Summary;

/// Eigenvalues at or below `RANK_TOL * lambda_max` mark a singular FIM.
pub const RANK_TOL: f64 = 1e-12;

/// Default noise floor of the benchmark (µT).
pub const DEFAULT_SIGMA: f64 = 10.0;

pub type Fim = Matrix5<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    sigma: f64,
}

impl NoiseModel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "noise sigma must be positive, got {sigma}"
            )));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
        }
    }
}

/// `F = JᵀJ / sigma²` from the analytic (unclipped) Jacobian.
pub fn build_fim(
    pose: &Pose5,
    layout: &SensorLayout,
    model: &MagnetModel,
    noise: &NoiseModel,
) -> Result<Fim> {
    let frame = PoseFrame::new(pose);
    let mut info = Fim::zeros();
    for (i, s) in layout.positions().iter().enumerate() {
        let block = frame.sensor_block(s, model, i)?;
        info += block.transpose() * block;
    }
    Ok(info / (noise.sigma * noise.sigma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FimReport {
    pub fim: Fim,
    /// Ascending.
    pub eigenvalues: [f64; 5],
    pub pos_bound_mm: f64,
    pub ori_bound_deg: f64,
    pub lambda_min: f64,
    pub kappa: f64,
    /// `ln det F`, or `-inf` when degenerate.
    pub log_det: f64,
    pub degenerate: bool,
}

/// Extracts the CRLB scalars from a FIM through its eigen-decomposition.
/// A singular FIM yields a report flagged degenerate with infinite bounds.
pub fn crlb_metrics(fim: &Fim) -> Result<FimReport> {
    if !fim.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("Fisher information matrix"));
    }
    let sym = (fim + fim.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: [usize; 5] = [0, 1, 2, 3, 4];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = order.map(|k| eig.eigenvalues[k]);
    let lambda_min = eigenvalues[0];
    let lambda_max = eigenvalues[4];

    let degenerate = !(lambda_max > 0.0) || lambda_min <= RANK_TOL * lambda_max;
    if degenerate {
        return Ok(FimReport {
            fim: *fim,
            eigenvalues,
            pos_bound_mm: f64::INFINITY,
            ori_bound_deg: f64::INFINITY,
            lambda_min,
            kappa: if lambda_min > 0.0 {
                lambda_max / lambda_min
            } else {
                f64::INFINITY
            },
            log_det: f64::NEG_INFINITY,
            degenerate: true,
        });
    }

    // F⁻¹ = V diag(1/λ) Vᵀ; only the diagonal is needed.
    let mut inv_diag = [0.0; 5];
    for k in 0..5 {
        let inv_l = 1.0 / eig.eigenvalues[k];
        for (i, d) in inv_diag.iter_mut().enumerate() {
            let v = eig.eigenvectors[(i, k)];
            *d += v * v * inv_l;
        }
    }
    let pos_var: f64 = inv_diag[..3].iter().sum();
    let ori_var: f64 = inv_diag[3..].iter().sum();
    Ok(FimReport {
        fim: *fim,
        eigenvalues,
        pos_bound_mm: 1000.0 * pos_var.sqrt(),
        ori_bound_deg: ori_var.sqrt().to_degrees(),
        lambda_min,
        kappa: lambda_max / lambda_min,
        log_det: eigenvalues.iter().map(|l| l.ln()).sum(),
        degenerate: false,
    })
}

/// Closed interval `[lo, hi]` in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    fn lerp(&self, u: f64) -> f64 {
        self.lo + u * (self.hi - self.lo)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.hi > self.lo) {
            return Err(Error::InvalidArgument(format!(
                "{what} range [{}, {}] is empty or non-finite",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

/// Box of magnet positions plus the orientation sampling margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceSpec {
    pub x_range: Interval,
    pub y_range: Interval,
    pub z_range: Interval,
    pub n_samples: usize,
    pub seed: u64,
    /// Pitch values within this angle of either pole are not sampled (rad).
    pub theta_margin: f64,
}

pub const DEFAULT_THETA_MARGIN: f64 = 0.05;

impl WorkspaceSpec {
    /// x, y ∈ [-50, 50] mm, z ∈ [50, 150] mm, 200 000 samples, seed 0.
    pub fn benchmark() -> Self {
        Self {
            x_range: Interval::new(-0.050, 0.050),
            y_range: Interval::new(-0.050, 0.050),
            z_range: Interval::new(0.050, 0.150),
            n_samples: 200_000,
            seed: 0,
            theta_margin: DEFAULT_THETA_MARGIN,
        }
    }

    /// The slightly taller box used for synthetic datasets (z ∈ [45, 155] mm).
    pub fn dataset() -> Self {
        Self {
            z_range: Interval::new(0.045, 0.155),
            ..Self::benchmark()
        }
    }

    pub fn with_samples(mut self, n_samples: usize, seed: u64) -> Self {
        self.n_samples = n_samples;
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.x_range.validate("x")?;
        self.y_range.validate("y")?;
        self.z_range.validate("z")?;
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument(
                "n_samples must be at least 1".into(),
            ));
        }
        if !(self.theta_margin > 0.0 && self.theta_margin < PI / 2.0) {
            return Err(Error::InvalidArgument(format!(
                "theta_margin {} outside (0, pi/2)",
                self.theta_margin
            )));
        }
        Ok(())
    }

    /// Range of `cos(theta)` that is sampled uniformly.
    pub fn cos_theta_range(&self) -> Interval {
        let m = 1.0 - self.theta_margin.cos();
        Interval::new(-1.0 + m, 1.0 - m)
    }
}

/// Standard Latin hypercube on `[0, 1)^dims`: each dimension is split into `n`
/// equal strata, every stratum holds exactly one point, and strata are paired
/// across dimensions by independent random permutations. Row-major `n x dims`.
pub fn latin_hypercube(n: usize, dims: usize, seed: u64) -> Vec<f64> {
    let mut out = vec![0.0; n * dims];
    for d in 0..dims {
        let mut rng = rng::stream(seed, Purpose::Lhs, d as u64);
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        for (i, &s) in strata.iter().enumerate() {
            let jitter: f64 = rng.random();
            out[i * dims + d] = (s as f64 + jitter) / n as f64;
        }
    }
    out
}

fn pose_from_unit(spec: &WorkspaceSpec, x: f64, y: f64, z: f64, u_psi: f64, u_cos: f64) -> Pose5 {
    let cos_theta = spec.cos_theta_range().lerp(u_cos);
    Pose5::new(
        Vec3::new(x, y, z),
        u_psi * TAU,
        cos_theta.clamp(-1.0, 1.0).acos(),
    )
    .expect("sampled pose is valid")
}

/// Maps a point of the unit 5-cube `(x, y, z, psi, cos theta)` into the workspace.
pub(crate) fn unit_to_pose(spec: &WorkspaceSpec, u: &[f64]) -> Pose5 {
    pose_from_unit(
        spec,
        spec.x_range.lerp(u[0]),
        spec.y_range.lerp(u[1]),
        spec.z_range.lerp(u[2]),
        u[3],
        u[4],
    )
}

/// Stratified poses over `(x, y, z, psi, cos theta)`, deterministic in `spec.seed`.
pub fn lhs_sample(spec: &WorkspaceSpec) -> Result<Vec<Pose5>> {
    spec.validate()?;
    let u = latin_hypercube(spec.n_samples, 5, spec.seed);
    Ok(u.chunks_exact(5).map(|r| unit_to_pose(spec, r)).collect())
}

/// Like [`lhs_sample`] but with the height pinned to `z`; `(x, y, psi, cos theta)`
/// are stratified.
pub fn lhs_sample_at_height(spec: &WorkspaceSpec, z: f64) -> Result<Vec<Pose5>> {
    spec.validate()?;
    if !z.is_finite() {
        return Err(Error::NonFinite("sweep height"));
    }
    let u = latin_hypercube(spec.n_samples, 4, spec.seed);
    Ok(u.chunks_exact(4)
        .map(|r| {
            pose_from_unit(
                spec,
                spec.x_range.lerp(r[0]),
                spec.y_range.lerp(r[1]),
                z,
                r[2],
                r[3],
            )
        })
        .collect())
}

/// CRLB report per pose; `None` where the FIM is singular or a sensor coincides
/// with the magnet. Order follows `poses`.
pub fn evaluate_poses(
    layout: &SensorLayout,
    poses: &[Pose5],
    model: &MagnetModel,
    noise: &NoiseModel,
) -> Result<Vec<Option<FimReport>>> {
    poses
        .par_iter()
        .map(|pose| match build_fim(pose, layout, model, noise) {
            Ok(f) => crlb_metrics(&f).map(|r| (!r.degenerate).then_some(r)),
            Err(Error::DegenerateDistance { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub layout: SensorLayout,
    pub spec: WorkspaceSpec,
    pub model: MagnetModel,
    pub noise: NoiseModel,
    /// Pinned height for fixed-z sweeps.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fixed_z: Option<f64>,
    pub n_samples: usize,
    pub n_valid: usize,
    pub n_degenerate: usize,
    pub pos_bound_mm: Summary,
    pub ori_bound_deg: Summary,
    pub lambda_min: Summary,
    pub kappa: Summary,
    pub logdet: Summary,
}

/// Aggregates per-pose reports; degenerate poses are counted and excluded.
pub fn summarize(
    layout: &SensorLayout,
    spec: &WorkspaceSpec,
    model: &MagnetModel,
    noise: &NoiseModel,
    reports: &[Option<FimReport>],
) -> Result<SweepReport> {
    let valid: Vec<&FimReport> = reports.iter().flatten().collect();
    if valid.is_empty() {
        return Err(Error::AllDegenerate {
            n_samples: reports.len(),
        });
    }
    let col = |f: fn(&FimReport) -> f64| {
        let v: Vec<f64> = valid.iter().map(|r| f(r)).collect();
        Summary::from_values(&v).expect("non-empty")
    };
    Ok(SweepReport {
        layout: layout.clone(),
        spec: *spec,
        model: *model,
        noise: *noise,
        fixed_z: None,
        n_samples: reports.len(),
        n_valid: valid.len(),
        n_degenerate: reports.len() - valid.len(),
        pos_bound_mm: col(|r| r.pos_bound_mm),
        ori_bound_deg: col(|r| r.ori_bound_deg),
        lambda_min: col(|r| r.lambda_min),
        kappa: col(|r| r.kappa),
        logdet: col(|r| r.log_det),
    })
}

/// CRLB statistics of `layout` over an LHS sample of the workspace.
pub fn sweep_workspace(
    layout: &SensorLayout,
    spec: &WorkspaceSpec,
    model: &MagnetModel,
    noise: &NoiseModel,
) -> Result<SweepReport> {
    let poses = lhs_sample(spec)?;
    let reports = evaluate_poses(layout, &poses, model, noise)?;
    summarize(layout, spec, model, noise, &reports)
}

/// Sweep restricted to the horizontal slice at height `z`.
pub fn sweep_at_height(
    layout: &SensorLayout,
    spec: &WorkspaceSpec,
    z: f64,
    model: &MagnetModel,
    noise: &NoiseModel,
) -> Result<SweepReport> {
    let poses = lhs_sample_at_height(spec, z)?;
    let reports = evaluate_poses(layout, &poses, model, noise)?;
    let mut report = summarize(layout, spec, model, noise, &reports)?;
    report.fixed_z = Some(z);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dipole::jacobian;
    use crate::geometry::{build_planar, build_staggered_split};
    use approx::assert_relative_eq;

    fn pose(p: [f64; 3], psi: f64, theta: f64) -> Pose5 {
        Pose5::new(Vec3::from(p), psi, theta).unwrap()
    }

    #[test]
    fn fim_matches_explicit_jacobian_product() {
        let layout = build_staggered_split();
        let model = MagnetModel::default();
        let noise = NoiseModel::new(3.0).unwrap();
        let ps = pose([0.01, -0.02, 0.1], 1.0, 1.4);
        let j = jacobian(&ps, &layout, &model).unwrap();
        let expected = j.transpose() * &j / 9.0;
        let f = build_fim(&ps, &layout, &model, &noise).unwrap();
        assert_relative_eq!(f, expected, max_relative = 1e-12);
        assert_eq!(f, f.transpose());
    }

    #[test]
    fn sigma_doubling_quarters_fim_exactly() {
        let layout = build_planar();
        let model = MagnetModel::default();
        let ps = pose([0.02, 0.01, 0.07], 2.5, 0.9);
        let f1 = build_fim(&ps, &layout, &model, &NoiseModel::new(10.0).unwrap()).unwrap();
        let f2 = build_fim(&ps, &layout, &model, &NoiseModel::new(20.0).unwrap()).unwrap();
        assert_eq!(f2, f1 / 4.0);
    }

    #[test]
    fn pole_pose_is_degenerate() {
        let layout = build_planar();
        let f = build_fim(
            &pose([0.0, 0.0, 0.1], 0.3, 0.0),
            &layout,
            &MagnetModel::default(),
            &NoiseModel::default(),
        )
        .unwrap();
        assert!(f.row(3).iter().all(|&v| v == 0.0));
        assert!(f.column(3).iter().all(|&v| v == 0.0));
        let r = crlb_metrics(&f).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.lambda_min, 0.0);
        assert!(r.pos_bound_mm.is_infinite() && r.ori_bound_deg.is_infinite());
    }

    #[test]
    fn identity_and_diagonal_metrics() {
        let r = crlb_metrics(&Fim::identity()).unwrap();
        assert_relative_eq!(r.pos_bound_mm, 1000.0 * 3f64.sqrt(), max_relative = 1e-14);
        assert_relative_eq!(
            r.ori_bound_deg,
            2f64.sqrt().to_degrees(),
            max_relative = 1e-14
        );
        assert_eq!(r.lambda_min, 1.0);
        assert_eq!(r.kappa, 1.0);
        assert_eq!(r.log_det, 0.0);

        let d = Fim::from_diagonal(&nalgebra::Vector5::new(4.0, 4.0, 4.0, 9.0, 9.0));
        let r = crlb_metrics(&d).unwrap();
        assert_relative_eq!(
            r.pos_bound_mm,
            1000.0 * 0.75f64.sqrt(),
            max_relative = 1e-14
        );
        assert_relative_eq!(
            r.ori_bound_deg,
            (2.0f64 / 9.0).sqrt().to_degrees(),
            max_relative = 1e-14
        );
        assert_relative_eq!(r.kappa, 9.0 / 4.0, max_relative = 1e-14);
        assert_eq!(r.eigenvalues, [4.0, 4.0, 4.0, 9.0, 9.0]);
    }

    #[test]
    fn nan_fim_is_an_error() {
        let mut f = Fim::identity();
        f[(1, 2)] = f64::NAN;
        assert!(matches!(crlb_metrics(&f), Err(Error::NonFinite(_))));
    }

    #[test]
    fn bounds_scale_linearly_with_sigma() {
        let layout = build_staggered_split();
        let model = MagnetModel::default();
        let ps = pose([0.0, 0.03, 0.12], 0.2, 2.0);
        let a =
            crlb_metrics(&build_fim(&ps, &layout, &model, &NoiseModel::new(5.0).unwrap()).unwrap())
                .unwrap();
        let b = crlb_metrics(
            &build_fim(&ps, &layout, &model, &NoiseModel::new(10.0).unwrap()).unwrap(),
        )
        .unwrap();
        assert_relative_eq!(b.pos_bound_mm, 2.0 * a.pos_bound_mm, max_relative = 1e-10);
        assert_relative_eq!(b.ori_bound_deg, 2.0 * a.ori_bound_deg, max_relative = 1e-10);
    }

    #[test]
    fn lhs_quartiles_hold_one_sample_each() {
        let spec = WorkspaceSpec::benchmark().with_samples(4, 11);
        let poses = lhs_sample(&spec).unwrap();
        assert_eq!(poses.len(), 4);
        let mut bins = [0; 4];
        for p in &poses {
            bins[((p.p.x + 0.05) / 0.025).floor() as usize] += 1;
        }
        assert_eq!(bins, [1; 4]);
    }

    #[test]
    fn lhs_is_seed_deterministic() {
        let spec = WorkspaceSpec::benchmark().with_samples(100, 5);
        assert_eq!(lhs_sample(&spec).unwrap(), lhs_sample(&spec).unwrap());
        let other = WorkspaceSpec::benchmark().with_samples(100, 6);
        assert_ne!(lhs_sample(&spec).unwrap(), lhs_sample(&other).unwrap());
    }

    #[test]
    fn lhs_respects_theta_margin() {
        let spec = WorkspaceSpec::benchmark().with_samples(2000, 1);
        for p in lhs_sample(&spec).unwrap() {
            assert!(p.theta >= 0.05 - 1e-12 && p.theta <= PI - 0.05 + 1e-12);
            assert!((0.0..TAU).contains(&p.psi));
        }
    }

    #[test]
    fn invalid_workspace_rejected() {
        let mut s = WorkspaceSpec::benchmark();
        s.z_range = Interval::new(0.1, 0.1);
        assert!(lhs_sample(&s).is_err());
        let s = WorkspaceSpec::benchmark().with_samples(0, 0);
        assert!(lhs_sample(&s).is_err());
        let mut s = WorkspaceSpec::benchmark();
        s.theta_margin = 2.0;
        assert!(lhs_sample(&s).is_err());
    }

    #[test]
    fn sweep_counts_and_quantile_order() {
        let spec = WorkspaceSpec::benchmark().with_samples(500, 3);
        let r = sweep_workspace(
            &build_planar(),
            &spec,
            &MagnetModel::default(),
            &NoiseModel::default(),
        )
        .unwrap();
        assert_eq!(r.n_valid + r.n_degenerate, 500);
        for s in [
            r.pos_bound_mm,
            r.ori_bound_deg,
            r.lambda_min,
            r.kappa,
            r.logdet,
        ] {
            assert!(s.p5 <= s.p25 && s.p25 <= s.median && s.median <= s.p75 && s.p75 <= s.p95);
        }
    }

    #[test]
    fn all_degenerate_sweep_is_an_error() {
        // a single sensor can never constrain five parameters
        let layout = SensorLayout::new("one", vec![Vec3::new(0.0, 0.0, 0.02)]).unwrap();
        let spec = WorkspaceSpec::benchmark().with_samples(20, 0);
        let err = sweep_workspace(
            &layout,
            &spec,
            &MagnetModel::default(),
            &NoiseModel::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::AllDegenerate { n_samples: 20 }));
    }
}
