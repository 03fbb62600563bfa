//! Sensor placement on the faces of a cubic shell around the workspace.
//!
//! The objective is the mean over a fixed pose set of `ln det F`, regularized
//! as `ln det(F + eps * tr(F) / 5 * I)` so that layouts with fewer informative
//! sensors than state dimensions still score finitely. Placement runs in two
//! stages: greedy selection from a per-face candidate grid, then cyclic
//! pattern search of each sensor's in-face coordinates with the face fixed.

use nalgebra::Cholesky;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dipole::{MagnetModel, Pose5, PoseFrame, Vec3};
use crate::error::{Error, Result};
use crate::geometry::SensorLayout;
use crate::observability::{build_fim, crlb_metrics, Fim, NoiseModel, SweepReport};

/// Relative regularization of the log-determinant.
pub const LOGDET_EPS: f64 = 1e-12;

/// Distance from a face below which a sensor counts as on the shell (m).
pub const ON_SHELL_TOL: f64 = 1e-9;

const MIN_SEPARATION: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Face {
    XNeg,
    XPos,
    YNeg,
    YPos,
    ZNeg,
    ZPos,
}

impl Face {
    pub const ALL: [Face; 6] = [
        Face::XNeg,
        Face::XPos,
        Face::YNeg,
        Face::YPos,
        Face::ZNeg,
        Face::ZPos,
    ];

    /// Index of the normal axis and the two in-face axes `(u, v)`.
    fn axes(self) -> (usize, usize, usize) {
        match self {
            Face::XNeg | Face::XPos => (0, 1, 2),
            Face::YNeg | Face::YPos => (1, 0, 2),
            Face::ZNeg | Face::ZPos => (2, 0, 1),
        }
    }

    fn sign(self) -> f64 {
        match self {
            Face::XNeg | Face::YNeg | Face::ZNeg => -1.0,
            _ => 1.0,
        }
    }

    pub fn id(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShellSpec {
    pub center: Vec3,
    pub side: f64,
}

impl ShellSpec {
    pub fn new(center: Vec3, side: f64) -> Result<Self> {
        if !(side.is_finite() && side > 0.0) || !center.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "invalid shell (center {center:?}, side {side})"
            )));
        }
        Ok(Self { center, side })
    }

    /// 0.16 m cube centered at (0, 0, 0.1) m, so that the bottom and top faces
    /// coincide with the z = 20 mm and z = 180 mm plates.
    pub fn benchmark() -> Self {
        Self {
            center: Vec3::new(0.0, 0.0, 0.100),
            side: 0.16,
        }
    }

    pub fn half(&self) -> f64 {
        0.5 * self.side
    }

    /// Position of a placement; the normal coordinate is exactly `center ± side/2`.
    pub fn position(&self, fp: &FacePlacement) -> Vec3 {
        let (n, a, b) = fp.face.axes();
        let mut p = self.center;
        p[n] = self.center[n] + fp.face.sign() * self.half();
        p[a] = self.center[a] + fp.u;
        p[b] = self.center[b] + fp.v;
        p
    }

    /// Face placement of `p` if it lies on the shell. Edge points go to the
    /// lowest-numbered face.
    pub fn locate(&self, p: &Vec3) -> Option<FacePlacement> {
        let h = self.half();
        Face::ALL.iter().find_map(|&face| {
            let (n, a, b) = face.axes();
            let plane = self.center[n] + face.sign() * h;
            let u = p[a] - self.center[a];
            let v = p[b] - self.center[b];
            let inside = u.abs() <= h + ON_SHELL_TOL && v.abs() <= h + ON_SHELL_TOL;
            ((p[n] - plane).abs() <= ON_SHELL_TOL && inside).then(|| FacePlacement {
                face,
                u: u.clamp(-h, h),
                v: v.clamp(-h, h),
            })
        })
    }

    /// Distance from `p` to the nearest face plane, for error reporting.
    fn face_distance(&self, p: &Vec3) -> f64 {
        let h = self.half();
        (0..3)
            .map(|k| ((p[k] - self.center[k]).abs() - h).abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Cell-centered `g x g` grid on every face, face-major.
    pub fn candidate_grid(&self, per_side: usize) -> Vec<FacePlacement> {
        let h = self.half();
        let cell = self.side / per_side as f64;
        let mut out = Vec::with_capacity(6 * per_side * per_side);
        for face in Face::ALL {
            for i in 0..per_side {
                for j in 0..per_side {
                    out.push(FacePlacement {
                        face,
                        u: -h + (i as f64 + 0.5) * cell,
                        v: -h + (j as f64 + 0.5) * cell,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FacePlacement {
    pub face: Face,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementResult {
    pub layout: SensorLayout,
    pub placements: Vec<FacePlacement>,
    /// Objective after each greedy addition, or after each refinement cycle
    /// (first entry is the starting layout).
    pub objective_trace: Vec<f64>,
    /// Filled in once the layout has been re-evaluated on a full sweep.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub report: Option<SweepReport>,
}

impl PlacementResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }
}

/// `ln det(F + eps * tr(F) / 5 * I)`; `-inf` for an all-zero matrix.
pub fn regularized_logdet(f: &Fim) -> f64 {
    let shift = LOGDET_EPS * f.trace() / 5.0;
    let mut a = *f;
    for k in 0..5 {
        a[(k, k)] += shift;
    }
    match Cholesky::new(a) {
        Some(ch) => 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
        None => f64::NEG_INFINITY,
    }
}

/// Mean regularized log-determinant of the FIM over `poses`.
///
/// Fails with `AllDegenerate` if the unregularized FIM is singular at every pose.
pub fn placement_objective(
    layout: &SensorLayout,
    poses: &[Pose5],
    model: &MagnetModel,
    noise: &NoiseModel,
) -> Result<f64> {
    if poses.is_empty() {
        return Err(Error::InvalidArgument("empty pose set".into()));
    }
    let per_pose: Vec<(f64, bool)> = poses
        .par_iter()
        .map(|p| {
            let f = build_fim(p, layout, model, noise)?;
            let ok = !crlb_metrics(&f)?.degenerate;
            Ok((regularized_logdet(&f), ok))
        })
        .collect::<Result<_>>()?;
    if !per_pose.iter().any(|&(_, ok)| ok) {
        return Err(Error::AllDegenerate {
            n_samples: poses.len(),
        });
    }
    Ok(per_pose.iter().map(|(v, _)| v).sum::<f64>() / poses.len() as f64)
}

/// Pose set with cached trigonometry. Information is accumulated unscaled and
/// divided by the noise variance at scoring time, matching [`build_fim`].
struct Evaluator<'a> {
    frames: Vec<PoseFrame>,
    model: &'a MagnetModel,
    var: f64,
}

impl<'a> Evaluator<'a> {
    fn new(poses: &[Pose5], model: &'a MagnetModel, noise: &NoiseModel) -> Self {
        Self {
            frames: poses.iter().map(PoseFrame::new).collect(),
            model,
            var: noise.sigma() * noise.sigma(),
        }
    }

    /// `BᵀB` of one sensor at one pose; zero if the sensor sits on the magnet.
    fn info(&self, frame: &PoseFrame, sensor: &Vec3) -> Fim {
        match frame.sensor_block(sensor, self.model, 0) {
            Ok(b) => b.transpose() * b,
            Err(_) => Fim::zeros(),
        }
    }

    /// Per-pose unscaled information of a set of sensors, summed in order.
    fn base(&self, sensors: &[Vec3]) -> Vec<Fim> {
        self.frames
            .par_iter()
            .map(|fr| {
                let mut acc = Fim::zeros();
                for s in sensors {
                    acc += self.info(fr, s);
                }
                acc
            })
            .collect()
    }

    fn logdet(&self, info: &Fim) -> f64 {
        regularized_logdet(&(info / self.var))
    }

    fn mean_logdet(&self, base: &[Fim]) -> f64 {
        base.iter().map(|f| self.logdet(f)).sum::<f64>() / base.len() as f64
    }

    /// Mean regularized log-det of `base + info(extra)` over poses.
    fn score_with(&self, base: &[Fim], extra: &Vec3) -> f64 {
        let total: f64 = self
            .frames
            .iter()
            .zip(base)
            .map(|(fr, f)| self.logdet(&(f + self.info(fr, extra))))
            .sum();
        total / self.frames.len() as f64
    }

    fn score_with_par(&self, base: &[Fim], extra: &Vec3) -> f64 {
        let vals: Vec<f64> = self
            .frames
            .par_iter()
            .zip(base.par_iter())
            .map(|(fr, f)| self.logdet(&(f + self.info(fr, extra))))
            .collect();
        vals.iter().sum::<f64>() / self.frames.len() as f64
    }
}

fn layout_from(
    shell: &ShellSpec,
    placements: &[FacePlacement],
    name: &str,
) -> Result<SensorLayout> {
    SensorLayout::new(name, placements.iter().map(|p| shell.position(p)).collect())
}

fn exact_objective(
    shell: &ShellSpec,
    placements: &[FacePlacement],
    poses: &[Pose5],
    model: &MagnetModel,
    noise: &NoiseModel,
) -> Result<f64> {
    let layout = layout_from(shell, placements, "trace")?;
    match placement_objective(&layout, poses, model, noise) {
        // intermediate greedy layouts are rank deficient by construction
        Err(Error::AllDegenerate { .. }) => {
            let ev = Evaluator::new(poses, model, noise);
            Ok(ev.mean_logdet(&ev.base(layout.positions())))
        }
        other => other,
    }
}

/// Greedy forward selection of `k` sites from a `g x g` grid on every face,
/// where `candidates_per_face = g²`. Each step adds the site with the largest
/// objective; ties go to the lowest candidate index.
pub fn greedy_place(
    shell: &ShellSpec,
    k: usize,
    candidates_per_face: usize,
    poses: &[Pose5],
    model: &MagnetModel,
    noise: &NoiseModel,
) -> Result<PlacementResult> {
    let per_side = (candidates_per_face as f64).sqrt().round() as usize;
    if per_side == 0 || per_side * per_side != candidates_per_face {
        return Err(Error::InvalidArgument(format!(
            "candidates_per_face must be a positive perfect square, got {candidates_per_face}"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument(
            "sensor count must be at least 1".into(),
        ));
    }
    if poses.is_empty() {
        return Err(Error::InvalidArgument("empty pose set".into()));
    }
    let candidates = shell.candidate_grid(per_side);
    if k > candidates.len() {
        return Err(Error::InsufficientCandidates {
            needed: k,
            available: candidates.len(),
        });
    }
    let sites: Vec<Vec3> = candidates.iter().map(|c| shell.position(c)).collect();
    let ev = Evaluator::new(poses, model, noise);
    let mut base = vec![Fim::zeros(); poses.len()];
    let mut used = vec![false; candidates.len()];
    let mut chosen: Vec<FacePlacement> = Vec::with_capacity(k);
    let mut trace = Vec::with_capacity(k);

    for _ in 0..k {
        let scores: Vec<f64> = sites
            .par_iter()
            .enumerate()
            .map(|(c, s)| {
                if used[c] {
                    f64::NEG_INFINITY
                } else {
                    ev.score_with(&base, s)
                }
            })
            .collect();
        let mut best = None;
        for (c, &sc) in scores.iter().enumerate() {
            if used[c] || sc.is_nan() {
                continue;
            }
            match best {
                Some((_, b)) if sc <= b => {}
                _ => best = Some((c, sc)),
            }
        }
        let (c, _) = best.ok_or(Error::InsufficientCandidates {
            needed: k,
            available: chosen.len(),
        })?;
        used[c] = true;
        chosen.push(candidates[c]);
        base.par_iter_mut()
            .zip(ev.frames.par_iter())
            .for_each(|(f, fr)| *f += ev.info(fr, &sites[c]));
        trace.push(exact_objective(shell, &chosen, poses, model, noise)?);
    }

    Ok(PlacementResult {
        layout: layout_from(shell, &chosen, "shell-greedy")?,
        placements: chosen,
        objective_trace: trace,
        report: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Initial pattern-search step; `None` means `side / 16`.
    pub initial_step: Option<f64>,
    pub min_step: f64,
    pub max_cycles: usize,
    /// Stop when a full cycle improves the objective by less than this fraction.
    pub rel_tol: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            initial_step: None,
            min_step: 1e-4,
            max_cycles: 10,
            rel_tol: 1e-6,
        }
    }
}

/// Cyclic coordinate pattern search over each sensor's in-face coordinates.
/// Only improving moves are accepted, so the result never scores below the input.
pub fn refine_place(
    initial: &SensorLayout,
    shell: &ShellSpec,
    poses: &[Pose5],
    model: &MagnetModel,
    noise: &NoiseModel,
    config: &RefineConfig,
) -> Result<PlacementResult> {
    if poses.is_empty() {
        return Err(Error::InvalidArgument("empty pose set".into()));
    }
    let mut placements = initial
        .positions()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            shell.locate(p).ok_or(Error::OffShell {
                sensor: i,
                distance: shell.face_distance(p),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let h = shell.half();
    let step0 = config.initial_step.unwrap_or(shell.side / 16.0);
    let ev = Evaluator::new(poses, model, noise);

    let start = exact_objective(shell, &placements, poses, model, noise)?;
    let mut trace = vec![start];
    let mut positions: Vec<Vec3> = placements.iter().map(|p| shell.position(p)).collect();

    for _ in 0..config.max_cycles {
        for i in 0..placements.len() {
            let others: Vec<Vec3> = positions
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, p)| *p)
                .collect();
            let rest = ev.base(&others);
            let mut cur = placements[i];
            let mut cur_score = ev.score_with_par(&rest, &shell.position(&cur));
            let mut step = step0;
            while step >= config.min_step {
                let mut best: Option<(FacePlacement, f64)> = None;
                for (du, dv) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
                    let trial = FacePlacement {
                        face: cur.face,
                        u: (cur.u + du).clamp(-h, h),
                        v: (cur.v + dv).clamp(-h, h),
                    };
                    if trial.u == cur.u && trial.v == cur.v {
                        continue;
                    }
                    let pos = shell.position(&trial);
                    if others.iter().any(|o| (o - pos).norm() < MIN_SEPARATION) {
                        continue;
                    }
                    let sc = ev.score_with_par(&rest, &pos);
                    let threshold = best.map_or(cur_score, |(_, b)| b);
                    if sc > threshold + 1e-12 * threshold.abs().max(1.0) {
                        best = Some((trial, sc));
                    }
                }
                match best {
                    Some((trial, sc)) => {
                        cur = trial;
                        cur_score = sc;
                    }
                    None => step *= 0.5,
                }
            }
            placements[i] = cur;
            positions[i] = shell.position(&cur);
        }
        let obj = exact_objective(shell, &placements, poses, model, noise)?;
        let prev = *trace.last().expect("non-empty");
        trace.push(obj.max(prev));
        if obj < prev {
            // rounding only; keep the cycle's layout but never report a decrease
            break;
        }
        if (obj - prev) <= config.rel_tol * prev.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }

    let refined = layout_from(shell, &placements, "shell-refined")?;
    let obj_in = exact_objective(
        shell,
        &initial_placements(initial, shell)?,
        poses,
        model,
        noise,
    )?;
    let obj_out = exact_objective(shell, &placements, poses, model, noise)?;
    if obj_out < obj_in {
        return Ok(PlacementResult {
            layout: initial.clone(),
            placements: initial_placements(initial, shell)?,
            objective_trace: vec![obj_in],
            report: None,
        });
    }
    Ok(PlacementResult {
        layout: refined,
        placements,
        objective_trace: trace,
        report: None,
    })
}

fn initial_placements(layout: &SensorLayout, shell: &ShellSpec) -> Result<Vec<FacePlacement>> {
    layout
        .positions()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            shell.locate(p).ok_or(Error::OffShell {
                sensor: i,
                distance: shell.face_distance(p),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_planar, build_staggered_split};
    use crate::observability::{lhs_sample, WorkspaceSpec};
    use approx::assert_relative_eq;

    fn poses(n: usize, seed: u64) -> Vec<Pose5> {
        lhs_sample(&WorkspaceSpec::benchmark().with_samples(n, seed)).unwrap()
    }

    #[test]
    fn face_geometry() {
        let shell = ShellSpec::benchmark();
        let top = shell.position(&FacePlacement {
            face: Face::ZPos,
            u: 0.01,
            v: -0.02,
        });
        assert_eq!(top, Vec3::new(0.01, -0.02, 0.18));
        let bottom = shell.position(&FacePlacement {
            face: Face::ZNeg,
            u: 0.0,
            v: 0.0,
        });
        assert_relative_eq!(bottom.z, 0.02, epsilon = 1e-15);
        let fp = shell.locate(&Vec3::new(0.08, 0.03, 0.11)).unwrap();
        assert_eq!(fp.face, Face::XPos);
        assert_relative_eq!(fp.u, 0.03);
        assert_relative_eq!(fp.v, 0.01, epsilon = 1e-15);
        assert!(shell.locate(&Vec3::new(0.0, 0.0, 0.1)).is_none());
        assert!(shell.locate(&Vec3::new(0.2, 0.0, 0.1)).is_none());
    }

    #[test]
    fn candidate_grid_is_interior_and_distinct() {
        let shell = ShellSpec::benchmark();
        let grid = shell.candidate_grid(3);
        assert_eq!(grid.len(), 54);
        let pts: Vec<Vec3> = grid.iter().map(|c| shell.position(c)).collect();
        assert!(SensorLayout::new("grid", pts).is_ok());
        assert!(grid
            .iter()
            .all(|c| c.u.abs() < shell.half() && c.v.abs() < shell.half()));
    }

    #[test]
    fn logdet_of_diagonal_is_sum_of_logs() {
        let d = nalgebra::Vector5::new(2.0, 3.0, 5.0, 7.0, 11.0);
        let f = Fim::from_diagonal(&d);
        let expected: f64 = d.iter().map(|v| v.ln()).sum();
        assert_relative_eq!(regularized_logdet(&f), expected, max_relative = 1e-10);
        assert_eq!(regularized_logdet(&Fim::zeros()), f64::NEG_INFINITY);
    }

    #[test]
    fn duplicating_sensors_adds_five_ln_two() {
        let layout = build_staggered_split();
        let doubled_set: Vec<Vec3> = layout
            .positions()
            .iter()
            .chain(layout.positions())
            .copied()
            .collect();
        let ps = poses(30, 1);
        let model = MagnetModel::default();
        let noise = NoiseModel::default();
        let single = placement_objective(&layout, &ps, &model, &noise).unwrap();
        // doubling the information is the same as halving the noise variance
        let half_var = NoiseModel::new(10.0 / 2f64.sqrt()).unwrap();
        let doubled = placement_objective(&layout, &ps, &model, &half_var).unwrap();
        assert_relative_eq!(doubled - single, 5.0 * 2f64.ln(), max_relative = 1e-9);
        // a layout cannot hold coincident sensors, so compare through the evaluator
        let ev = Evaluator::new(&ps, &model, &noise);
        let dup = ev.mean_logdet(&ev.base(&doubled_set));
        assert_relative_eq!(dup - single, 5.0 * 2f64.ln(), max_relative = 1e-9);
    }

    #[test]
    fn staggered_scores_above_planar() {
        let ps = poses(400, 2);
        let model = MagnetModel::default();
        let noise = NoiseModel::default();
        let s = placement_objective(&build_staggered_split(), &ps, &model, &noise).unwrap();
        let p = placement_objective(&build_planar(), &ps, &model, &noise).unwrap();
        assert!(s > p, "staggered {s} planar {p}");
    }

    #[test]
    fn objective_needs_one_informative_pose() {
        let one = SensorLayout::new("one", vec![Vec3::new(0.0, 0.0, 0.02)]).unwrap();
        let err = placement_objective(
            &one,
            &poses(5, 0),
            &MagnetModel::default(),
            &NoiseModel::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::AllDegenerate { .. }));
    }

    #[test]
    fn single_pick_matches_brute_force() {
        let shell = ShellSpec::benchmark();
        let ps = poses(25, 3);
        let model = MagnetModel::default();
        let noise = NoiseModel::default();
        let r = greedy_place(&shell, 1, 1, &ps, &model, &noise).unwrap();
        // brute force over the six face centers, scored independently
        let mut best = (f64::NEG_INFINITY, Vec3::zeros());
        for face in Face::ALL {
            let s = shell.position(&FacePlacement {
                face,
                u: 0.0,
                v: 0.0,
            });
            let mean = ps
                .iter()
                .map(|p| {
                    let l = SensorLayout::new("c", vec![s]).unwrap();
                    regularized_logdet(&build_fim(p, &l, &model, &noise).unwrap())
                })
                .sum::<f64>()
                / ps.len() as f64;
            if mean > best.0 {
                best = (mean, s);
            }
        }
        assert_eq!(r.layout.positions()[0], best.1);
        assert_relative_eq!(r.objective(), best.0, max_relative = 1e-12);
    }

    #[test]
    fn greedy_trace_increases_and_stays_on_shell() {
        let shell = ShellSpec::benchmark();
        let ps = poses(60, 4);
        let r = greedy_place(
            &shell,
            8,
            16,
            &ps,
            &MagnetModel::default(),
            &NoiseModel::default(),
        )
        .unwrap();
        assert_eq!(r.layout.len(), 8);
        assert!(
            r.objective_trace.windows(2).all(|w| w[1] > w[0]),
            "{:?}",
            r.objective_trace
        );
        for p in r.layout.positions() {
            let planes: Vec<f64> = (0..3)
                .flat_map(|k| {
                    [
                        shell.center[k] - shell.half(),
                        shell.center[k] + shell.half(),
                    ]
                })
                .collect();
            let on_face = (0..3).any(|k| p[k] == planes[2 * k] || p[k] == planes[2 * k + 1]);
            assert!(on_face, "{p:?}");
        }
    }

    #[test]
    fn greedy_argument_errors() {
        let shell = ShellSpec::benchmark();
        let ps = poses(5, 0);
        let m = MagnetModel::default();
        let n = NoiseModel::default();
        assert!(matches!(
            greedy_place(&shell, 7, 1, &ps, &m, &n),
            Err(Error::InsufficientCandidates {
                needed: 7,
                available: 6
            })
        ));
        assert!(greedy_place(&shell, 2, 5, &ps, &m, &n).is_err());
    }

    #[test]
    fn symmetric_optimum_is_kept() {
        // one sensor centered above a magnet pointing at it
        let shell = ShellSpec::benchmark();
        let pose = Pose5::new(Vec3::new(0.0, 0.0, 0.12), 0.0, 0.0).unwrap();
        let model = MagnetModel::default();
        let noise = NoiseModel::default();
        let start = shell.position(&FacePlacement {
            face: Face::ZPos,
            u: 0.0,
            v: 0.0,
        });
        let layout = SensorLayout::new("one", vec![start]).unwrap();

        // brute-force scan of the face confirms the center is the maximum
        let score = |p: Vec3| {
            let l = SensorLayout::new("s", vec![p]).unwrap();
            regularized_logdet(&build_fim(&pose, &l, &model, &noise).unwrap())
        };
        let center = score(start);
        for i in -8..=8 {
            for j in -8..=8 {
                if i == 0 && j == 0 {
                    continue;
                }
                let p = shell.position(&FacePlacement {
                    face: Face::ZPos,
                    u: i as f64 * 0.01,
                    v: j as f64 * 0.01,
                });
                assert!(score(p) < center);
            }
        }

        let r = refine_place(
            &layout,
            &shell,
            &[pose],
            &model,
            &noise,
            &RefineConfig::default(),
        )
        .unwrap();
        assert!((r.layout.positions()[0] - start).norm() < 1e-4);
    }

    #[test]
    fn refinement_never_loses_objective() {
        let shell = ShellSpec::benchmark();
        let ps = poses(40, 5);
        let model = MagnetModel::default();
        let noise = NoiseModel::default();
        let g = greedy_place(&shell, 6, 9, &ps, &model, &noise).unwrap();
        let cfg = RefineConfig {
            max_cycles: 3,
            ..RefineConfig::default()
        };
        let r = refine_place(&g.layout, &shell, &ps, &model, &noise, &cfg).unwrap();
        assert!(r.objective() >= g.objective());
        assert!(r.objective_trace.windows(2).all(|w| w[1] >= w[0]));
        for (p, fp) in r.layout.positions().iter().zip(&r.placements) {
            assert_eq!(*p, shell.position(fp));
            assert!(fp.u.abs() <= shell.half() && fp.v.abs() <= shell.half());
        }
        let again = refine_place(&g.layout, &shell, &ps, &model, &noise, &cfg).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn off_shell_input_is_rejected() {
        let shell = ShellSpec::benchmark();
        let model = MagnetModel::default();
        let noise = NoiseModel::default();
        // the benchmark plates coincide with the bottom and top faces
        assert!(refine_place(
            &build_staggered_split(),
            &shell,
            &poses(3, 0),
            &model,
            &noise,
            &RefineConfig {
                max_cycles: 1,
                ..RefineConfig::default()
            },
        )
        .is_ok());
        let lifted = SensorLayout::new(
            "lifted",
            vec![Vec3::new(0.0, 0.0, 0.18), Vec3::new(0.01, 0.0, 0.05)],
        )
        .unwrap();
        match refine_place(
            &lifted,
            &shell,
            &poses(3, 0),
            &model,
            &noise,
            &RefineConfig::default(),
        ) {
            Err(Error::OffShell { sensor, distance }) => {
                assert_eq!(sensor, 1);
                assert_relative_eq!(distance, 0.03, epsilon = 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
