//! Extrinsic calibration from a tracked sphere.
//!
//! Sphere centers seen by synchronized cameras are triangulated with RANSAC
//! outlier rejection, then camera poses, focal lengths and sphere positions
//! are refined jointly by bundle adjustment, and finally the reconstruction
//! is mapped onto world anchors by a similarity transform. Intrinsics other
//! than the focal length are inputs.
//!
//! All RMS figures are taken over scalar residual components, so isotropic
//! pixel noise of standard deviation `sigma` gives an RMS close to `sigma`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{
    DMatrix, DVector, Matrix3, Point2, Rotation3, SMatrix, SVector, UnitQuaternion, Vector3,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, CameraRig};
use crate::error::{read_json, write_json, Error, Result};

/// Sphere center detected in one camera at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "ObservationRecord", into = "ObservationRecord")]
pub struct TrackedPoint2D {
    pub frame: usize,
    pub camera_id: usize,
    pub pixel: Point2<f64>,
}

#[derive(Serialize, Deserialize)]
struct ObservationRecord {
    frame: usize,
    camera_id: usize,
    x: f64,
    y: f64,
}

impl From<ObservationRecord> for TrackedPoint2D {
    fn from(r: ObservationRecord) -> Self {
        TrackedPoint2D {
            frame: r.frame,
            camera_id: r.camera_id,
            pixel: Point2::new(r.x, r.y),
        }
    }
}

impl From<TrackedPoint2D> for ObservationRecord {
    fn from(p: TrackedPoint2D) -> Self {
        ObservationRecord {
            frame: p.frame,
            camera_id: p.camera_id,
            x: p.pixel.x,
            y: p.pixel.y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationFile {
    pub observations: Vec<TrackedPoint2D>,
}

impl ObservationFile {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulation {
    pub point: Vector3<f64>,
    pub rms_px: f64,
}

fn reprojection_residuals(rays: &[(&CameraModel, Point2<f64>)], x: &Vector3<f64>) -> Option<Vec<[f64; 2]>> {
    rays.iter()
        .map(|(cam, px)| cam.project(x).ok().map(|p| [px.x - p.x, px.y - p.y]))
        .collect()
}

fn rms_of(residuals: &[[f64; 2]]) -> f64 {
    let ss: f64 = residuals.iter().map(|r| r[0] * r[0] + r[1] * r[1]).sum();
    (ss / (2 * residuals.len()) as f64).sqrt()
}

/// Linear triangulation on normalized image coordinates followed by one
/// Gauss-Newton step on the pixel reprojection error.
pub fn triangulate(rays: &[(&CameraModel, Point2<f64>)]) -> Result<Triangulation> {
    if rays.len() < 2 {
        return Err(Error::DegenerateGeometry(format!("{} ray(s); at least 2 required", rays.len())));
    }
    let mut a = DMatrix::zeros(2 * rays.len(), 4);
    for (i, (cam, px)) in rays.iter().enumerate() {
        let xn = cam.normalized(px);
        let r = &cam.rotation;
        let t = &cam.translation;
        let p = |row: usize| nalgebra::RowVector4::new(r[(row, 0)], r[(row, 1)], r[(row, 2)], t[row]);
        let r0 = p(2) * xn.x - p(0);
        let r1 = p(2) * xn.y - p(1);
        a.row_mut(2 * i).copy_from(&(r0 / r0.norm()));
        a.row_mut(2 * i + 1).copy_from(&(r1 / r1.norm()));
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    if !(svd.singular_values[order[1]] > 1e-10 * svd.singular_values[order[3]]) {
        return Err(Error::DegenerateGeometry("rays are parallel or coincident".into()));
    }
    let h = v_t.row(order[0]);
    if !(h[3].abs() > 1e-12 * h.norm()) {
        return Err(Error::DegenerateGeometry("rays meet at infinity".into()));
    }
    let mut x = Vector3::new(h[0], h[1], h[2]) / h[3];
    for (cam, _) in rays {
        let depth = cam.depth(&x);
        if !(depth > 0.0) {
            return Err(Error::DegenerateGeometry(format!(
                "rays meet behind camera {} (depth {depth})",
                cam.id
            )));
        }
    }

    let before = reprojection_residuals(rays, &x).expect("point is in front of every camera");
    let mut jtj = Matrix3::zeros();
    let mut jtr = Vector3::zeros();
    for ((cam, _), r) in rays.iter().zip(&before) {
        let j = cam.projection_jacobian(&cam.to_camera_frame(&x)) * cam.rotation;
        jtj += j.transpose() * j;
        jtr += j.transpose() * nalgebra::Vector2::new(r[0], r[1]);
    }
    let mut residuals = before;
    if let Some(chol) = jtj.cholesky() {
        let refined = x + chol.solve(&jtr);
        if let Some(after) = reprojection_residuals(rays, &refined) {
            if rms_of(&after) <= rms_of(&residuals) {
                x = refined;
                residuals = after;
            }
        }
    }
    Ok(Triangulation {
        point: x,
        rms_px: rms_of(&residuals),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub threshold_px: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold_px: 2.0,
            iterations: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub point: Vector3<f64>,
    /// Indices into the input rays, ascending.
    pub inliers: Vec<usize>,
    pub rms_px: f64,
}

/// Two-ray hypotheses scored by the number of rays reprojecting within the
/// threshold; ties go to the smaller summed inlier error. When the number of
/// pairs does not exceed the iteration budget every pair is tried.
pub fn triangulate_ransac(rays: &[(&CameraModel, Point2<f64>)], cfg: &RansacConfig) -> Result<RansacResult> {
    if rays.len() < 2 {
        return Err(Error::DegenerateGeometry(format!("{} ray(s); at least 2 required", rays.len())));
    }
    if !(cfg.threshold_px > 0.0) {
        return Err(Error::config("ransac.threshold_px", "must be positive"));
    }
    let n = rays.len();
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    if pairs.len() > cfg.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        pairs.shuffle(&mut rng);
        pairs.truncate(cfg.iterations);
    }
    let thr2 = cfg.threshold_px * cfg.threshold_px;
    let mut best: Option<(Vec<usize>, f64)> = None;
    for (i, j) in pairs {
        let Ok(hyp) = triangulate(&[rays[i], rays[j]]) else {
            continue;
        };
        let mut inliers = Vec::new();
        let mut err = 0.0;
        for (k, (cam, px)) in rays.iter().enumerate() {
            if let Ok(p) = cam.project(&hyp.point) {
                let e2 = (px - p).norm_squared();
                if e2 < thr2 {
                    inliers.push(k);
                    err += e2;
                }
            }
        }
        let better = match &best {
            None => true,
            Some((b, be)) => inliers.len() > b.len() || (inliers.len() == b.len() && err < *be),
        };
        if better {
            best = Some((inliers, err));
        }
    }
    let inliers = match best {
        Some((inl, _)) if inl.len() >= 2 => inl,
        _ => {
            return Err(Error::NoConsensus {
                rays: n,
                threshold_px: cfg.threshold_px,
            })
        }
    };
    let subset: Vec<_> = inliers.iter().map(|&k| rays[k]).collect();
    let tri = triangulate(&subset)?;
    Ok(RansacResult {
        point: tri.point,
        inliers,
        rms_px: tri.rms_px,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationProblem {
    pub rig: CameraRig,
    pub observations: Vec<TrackedPoint2D>,
    /// Cameras whose focal length is held fixed.
    pub fixed_intrinsics: Vec<bool>,
}

impl CalibrationProblem {
    pub fn new(rig: CameraRig, observations: Vec<TrackedPoint2D>) -> Result<Self> {
        let fixed = vec![false; rig.num_cameras()];
        let problem = Self {
            rig,
            observations,
            fixed_intrinsics: fixed,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fixed_intrinsics.len() != self.rig.num_cameras() {
            return Err(Error::config("fixed_intrinsics", "one flag per camera required"));
        }
        for (i, o) in self.observations.iter().enumerate() {
            let cam = self.rig.camera(o.camera_id)?;
            if !o.pixel.x.is_finite() || !o.pixel.y.is_finite() || !cam.in_image(&o.pixel) {
                return Err(Error::config(
                    format!("observations[{i}]"),
                    format!("pixel ({}, {}) outside camera {}", o.pixel.x, o.pixel.y, o.camera_id),
                ));
            }
        }
        for (frame, obs) in self.frames() {
            let mut cams: Vec<usize> = obs.iter().map(|&i| self.observations[i].camera_id).collect();
            cams.sort_unstable();
            cams.dedup();
            if cams.len() != obs.len() {
                return Err(Error::config("observations", format!("frame {frame} has duplicate cameras")));
            }
            if cams.len() < 2 {
                return Err(Error::config("observations", format!("frame {frame} is seen by fewer than 2 cameras")));
            }
        }
        Ok(())
    }

    /// Observation indices grouped by frame.
    pub fn frames(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut frames: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, o) in self.observations.iter().enumerate() {
            frames.entry(o.frame).or_default().push(i);
        }
        frames
    }

    fn rays<'a>(&'a self, rig: &'a CameraRig, obs: &[usize]) -> Vec<(&'a CameraModel, Point2<f64>)> {
        obs.iter()
            .map(|&i| {
                let o = &self.observations[i];
                (&rig.cameras()[o.camera_id], o.pixel)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaConfig {
    pub initial_damping: f64,
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub relative_tolerance: f64,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            initial_damping: 1e-3,
            max_iterations: 200,
            relative_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaReport {
    pub initial_rms_px: f64,
    pub final_rms_px: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Total squared reprojection error, initial then one entry per accepted step.
    pub cost_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaResult {
    pub rig: CameraRig,
    /// `(frame, sphere center)` in ascending frame order.
    pub points: Vec<(usize, Vector3<f64>)>,
    pub report: BaReport,
}

const CAM_PARAMS: usize = 7;
type CamBlock = SMatrix<f64, CAM_PARAMS, CAM_PARAMS>;
type CamVec = SVector<f64, CAM_PARAMS>;
type CrossBlock = SMatrix<f64, CAM_PARAMS, 3>;

struct BaState {
    cameras: Vec<CameraModel>,
    points: Vec<Vector3<f64>>,
}

/// Per-observation data: `(camera, point, pixel)`.
struct Obs {
    camera: usize,
    pixel: Point2<f64>,
}

struct PointBlock {
    v: Matrix3<f64>,
    g: Vector3<f64>,
    /// `(camera, W, U contribution, camera gradient contribution)`.
    cams: Vec<(usize, CrossBlock, CamBlock, CamVec)>,
}

impl BaState {
    fn cost(&self, by_point: &[Vec<Obs>]) -> Option<f64> {
        let mut total = 0.0;
        for (x, obs) in self.points.iter().zip(by_point) {
            for o in obs {
                let p = self.cameras[o.camera].project(x).ok()?;
                total += (o.pixel - p).norm_squared();
            }
        }
        Some(total)
    }

    fn linearize(&self, by_point: &[Vec<Obs>]) -> Vec<PointBlock> {
        by_point
            .par_iter()
            .zip(self.points.par_iter())
            .map(|(obs, x)| {
                let mut block = PointBlock {
                    v: Matrix3::zeros(),
                    g: Vector3::zeros(),
                    cams: Vec::with_capacity(obs.len()),
                };
                for o in obs {
                    let cam = &self.cameras[o.camera];
                    let rx = cam.rotation * x;
                    let pc = rx + cam.translation;
                    let proj = cam.projection_jacobian(&pc);
                    let k = &cam.intrinsics;
                    let r = o.pixel - Point2::new(
                        (k[(0, 0)] * pc.x + k[(0, 1)] * pc.y) / pc.z + k[(0, 2)],
                        k[(1, 1)] * pc.y / pc.z + k[(1, 2)],
                    );
                    let mut jc = SMatrix::<f64, 2, CAM_PARAMS>::zeros();
                    // left perturbation R <- exp(d) R moves pc by d x (R x)
                    jc.fixed_view_mut::<2, 3>(0, 0).copy_from(&(proj * -rx.cross_matrix()));
                    jc.fixed_view_mut::<2, 3>(0, 3).copy_from(&proj);
                    let aspect = k[(1, 1)] / k[(0, 0)];
                    jc[(0, 6)] = pc.x / pc.z;
                    jc[(1, 6)] = aspect * pc.y / pc.z;
                    let jp = proj * cam.rotation;
                    block.v += jp.transpose() * jp;
                    block.g += jp.transpose() * r;
                    block
                        .cams
                        .push((o.camera, jc.transpose() * jp, jc.transpose() * jc, jc.transpose() * r));
                }
                block
            })
            .collect()
    }

    fn apply(&self, dc: &DVector<f64>, dp: &[Vector3<f64>], scale_ref: f64) -> BaState {
        let mut cameras = self.cameras.clone();
        for (c, cam) in cameras.iter_mut().enumerate() {
            let d = dc.fixed_rows::<CAM_PARAMS>(CAM_PARAMS * c);
            let rot = Rotation3::new(Vector3::new(d[0], d[1], d[2])).into_inner() * cam.rotation;
            cam.rotation = UnitQuaternion::from_matrix(&rot).to_rotation_matrix().into_inner();
            cam.translation += Vector3::new(d[3], d[4], d[5]);
            let f = cam.intrinsics[(0, 0)];
            let ratio = (f + d[6]) / f;
            cam.intrinsics[(0, 0)] *= ratio;
            cam.intrinsics[(1, 1)] *= ratio;
        }
        let points: Vec<Vector3<f64>> = self.points.iter().zip(dp).map(|(x, d)| x + d).collect();
        let mut state = BaState { cameras, points };
        state.fix_scale(scale_ref);
        state
    }

    fn mean_distance_from_origin_camera(&self) -> f64 {
        let c0 = self.cameras[0].center();
        self.points.iter().map(|x| (x - c0).norm()).sum::<f64>() / self.points.len() as f64
    }

    /// Rescales the reconstruction about camera 0 so the mean point distance
    /// from it equals `reference`. Reprojections are unchanged.
    fn fix_scale(&mut self, reference: f64) {
        let k = reference / self.mean_distance_from_origin_camera();
        if !k.is_finite() || k == 1.0 {
            return;
        }
        let c0 = self.cameras[0].center();
        for x in &mut self.points {
            *x = c0 + (*x - c0) * k;
        }
        for cam in self.cameras.iter_mut().skip(1) {
            let c = c0 + (cam.center() - c0) * k;
            cam.translation = -(cam.rotation * c);
        }
    }
}

/// Levenberg-Marquardt over per-camera rotation (3-parameter left updates),
/// translation and focal length plus every sphere position. Camera 0's pose
/// and the mean point distance from camera 0 fix the gauge. The point blocks
/// are eliminated with a Schur complement.
pub fn bundle_adjust(problem: &CalibrationProblem, cfg: &BaConfig) -> Result<BaResult> {
    problem.validate()?;
    let rig = &problem.rig;
    let n_cam = rig.num_cameras();
    let frames = problem.frames();
    if frames.is_empty() {
        return Err(Error::DegenerateProblem("no observations".into()));
    }
    let mut seen = vec![0usize; n_cam];
    for o in &problem.observations {
        seen[o.camera_id] += 1;
    }
    if let Some(c) = seen.iter().position(|&s| s == 0) {
        return Err(Error::DegenerateProblem(format!("camera {c} has no observations")));
    }

    let mut points = Vec::with_capacity(frames.len());
    let mut by_point = Vec::with_capacity(frames.len());
    for (frame, obs) in &frames {
        let tri = triangulate(&problem.rays(rig, obs))
            .map_err(|e| Error::DegenerateProblem(format!("frame {frame}: {e}")))?;
        points.push(tri.point);
        by_point.push(
            obs.iter()
                .map(|&i| Obs {
                    camera: problem.observations[i].camera_id,
                    pixel: problem.observations[i].pixel,
                })
                .collect::<Vec<_>>(),
        );
    }

    let mut frozen = vec![false; CAM_PARAMS * n_cam];
    frozen[..6].fill(true);
    for (c, &fixed) in problem.fixed_intrinsics.iter().enumerate() {
        frozen[CAM_PARAMS * c + 6] = fixed;
    }

    let n_res = 2 * problem.observations.len();
    let mut state = BaState {
        cameras: rig.cameras().to_vec(),
        points,
    };
    let scale_ref = state.mean_distance_from_origin_camera();
    let mut cost = state
        .cost(&by_point)
        .ok_or_else(|| Error::DegenerateProblem("initial point behind a camera".into()))?;
    let rms = |c: f64| (c / n_res as f64).sqrt();
    let mut report = BaReport {
        initial_rms_px: rms(cost),
        final_rms_px: rms(cost),
        iterations: 0,
        converged: false,
        cost_history: vec![cost],
    };
    let mut lambda = cfg.initial_damping;

    while report.iterations < cfg.max_iterations {
        if cost == 0.0 {
            report.converged = true;
            break;
        }
        report.iterations += 1;
        let blocks = state.linearize(&by_point);
        let mut u = vec![CamBlock::zeros(); n_cam];
        let mut gc = vec![CamVec::zeros(); n_cam];
        for b in &blocks {
            for (c, _, uc, g) in &b.cams {
                u[*c] += uc;
                gc[*c] += g;
            }
        }
        for c in 0..n_cam {
            for i in 0..CAM_PARAMS {
                if frozen[CAM_PARAMS * c + i] {
                    u[c].row_mut(i).fill(0.0);
                    u[c].column_mut(i).fill(0.0);
                    u[c][(i, i)] = 1.0;
                    gc[c][i] = 0.0;
                }
            }
        }
        let masked_w = |c: usize, w: &CrossBlock| {
            let mut w = *w;
            for i in 0..CAM_PARAMS {
                if frozen[CAM_PARAMS * c + i] {
                    w.row_mut(i).fill(0.0);
                }
            }
            w
        };

        let step = loop {
            let damp = 1.0 + lambda;
            let mut s = DMatrix::zeros(CAM_PARAMS * n_cam, CAM_PARAMS * n_cam);
            let mut rhs = DVector::zeros(CAM_PARAMS * n_cam);
            for c in 0..n_cam {
                let mut uc = u[c];
                for i in 0..CAM_PARAMS {
                    uc[(i, i)] *= damp;
                }
                s.fixed_view_mut::<CAM_PARAMS, CAM_PARAMS>(CAM_PARAMS * c, CAM_PARAMS * c)
                    .copy_from(&uc);
                rhs.fixed_rows_mut::<CAM_PARAMS>(CAM_PARAMS * c).copy_from(&gc[c]);
            }
            let mut v_inv = Vec::with_capacity(blocks.len());
            let mut singular = false;
            for b in &blocks {
                let mut v = b.v;
                for i in 0..3 {
                    v[(i, i)] *= damp;
                }
                let Some(vi) = v.try_inverse() else {
                    singular = true;
                    break;
                };
                for (a, wa, _, _) in &b.cams {
                    let wa = masked_w(*a, wa);
                    let wv = wa * vi;
                    let mut r = rhs.fixed_rows_mut::<CAM_PARAMS>(CAM_PARAMS * a);
                    r -= wv * b.g;
                    for (bc, wb, _, _) in &b.cams {
                        let wb = masked_w(*bc, wb);
                        let mut blk =
                            s.fixed_view_mut::<CAM_PARAMS, CAM_PARAMS>(CAM_PARAMS * a, CAM_PARAMS * bc);
                        blk -= wv * wb.transpose();
                    }
                }
                v_inv.push(vi);
            }
            if singular {
                return Err(Error::DegenerateProblem("singular point block".into()));
            }
            let Some(chol) = s.cholesky() else {
                lambda *= 10.0;
                if lambda > 1e16 {
                    return Err(Error::DegenerateProblem("singular reduced camera system".into()));
                }
                continue;
            };
            let dc = chol.solve(&rhs);
            let dp: Vec<Vector3<f64>> = blocks
                .iter()
                .zip(&v_inv)
                .map(|(b, vi)| {
                    let mut g = b.g;
                    for (c, w, _, _) in &b.cams {
                        g -= masked_w(*c, w).transpose() * dc.fixed_rows::<CAM_PARAMS>(CAM_PARAMS * c);
                    }
                    vi * g
                })
                .collect();
            if dc.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalFailure("non-finite bundle adjustment step".into()));
            }
            let candidate = state.apply(&dc, &dp, scale_ref);
            match candidate.cost(&by_point) {
                Some(c) if c <= cost => {
                    lambda = (lambda / 10.0).max(1e-15);
                    break Some((candidate, c));
                }
                _ => {
                    lambda *= 10.0;
                    if lambda > 1e16 {
                        break None;
                    }
                }
            }
        };
        let Some((candidate, new_cost)) = step else {
            // no descent left at any damping: stationary to working precision
            report.converged = true;
            break;
        };
        let decrease = cost - new_cost;
        state = candidate;
        cost = new_cost;
        report.cost_history.push(cost);
        if decrease <= cfg.relative_tolerance * report.cost_history[report.cost_history.len() - 2] {
            report.converged = true;
            break;
        }
    }
    report.final_rms_px = rms(cost);
    Ok(BaResult {
        rig: rig.with_cameras(state.cameras)?,
        points: frames.keys().copied().zip(state.points).collect(),
        report,
    })
}

/// Similarity `y = s R x + t` taking the local reconstruction to world coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldAlignment {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl WorldAlignment {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }

    /// Re-expresses every camera in world coordinates. Pixels are unchanged
    /// because each camera frame is scaled along with the scene.
    pub fn apply_to_rig(&self, rig: &CameraRig) -> Result<CameraRig> {
        let cameras = rig
            .cameras()
            .iter()
            .map(|cam| {
                let rotation = cam.rotation * self.rotation.transpose();
                let translation = cam.translation * self.scale - rotation * self.translation;
                CameraModel::new(cam.id, cam.intrinsics, rotation, translation, cam.resolution)
            })
            .collect::<Result<Vec<_>>>()?;
        rig.with_cameras(cameras)
    }

    /// Largest distance between mapped local points and their world partners.
    pub fn max_residual(&self, local: &[Vector3<f64>], world: &[Vector3<f64>]) -> f64 {
        local
            .iter()
            .zip(world)
            .map(|(x, y)| (self.apply(x) - y).norm())
            .fold(0.0, f64::max)
    }
}

/// Closed-form least-squares similarity (Umeyama).
pub fn align_to_world(local: &[Vector3<f64>], world: &[Vector3<f64>]) -> Result<WorldAlignment> {
    if local.len() != world.len() {
        return Err(Error::config("anchors", "local and world anchor counts differ"));
    }
    if local.len() < 3 {
        return Err(Error::DegenerateGeometry(format!("{} anchor(s); at least 3 required", local.len())));
    }
    let n = local.len() as f64;
    let mx = local.iter().sum::<Vector3<f64>>() / n;
    let my = world.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (x, y) in local.iter().zip(world) {
        let dx = x - mx;
        cov += (y - my) * dx.transpose();
        spread += dx * dx.transpose();
    }
    cov /= n;
    spread /= n;
    let mut ev: Vec<f64> = spread.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    if !(ev[1] > 1e-12 * ev[2]) {
        return Err(Error::DegenerateGeometry("anchors are collinear or coincident".into()));
    }
    let var_x = spread.trace();
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut d = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        // flip the weakest direction to stay a proper rotation
        let weakest = svd.singular_values.imin();
        d[(weakest, weakest)] = -1.0;
        let rotation = u * d * v_t;
        let scale = (Matrix3::from_diagonal(&svd.singular_values) * d).trace() / var_x;
        return finish(scale, rotation, mx, my);
    }
    let rotation = u * v_t;
    let scale = svd.singular_values.sum() / var_x;
    finish(scale, rotation, mx, my)
}

fn finish(scale: f64, rotation: Matrix3<f64>, mx: Vector3<f64>, my: Vector3<f64>) -> Result<WorldAlignment> {
    if !(scale > 0.0) {
        return Err(Error::DegenerateGeometry("non-positive similarity scale".into()));
    }
    Ok(WorldAlignment {
        scale,
        rotation,
        translation: my - rotation * mx * scale,
    })
}

/// Sphere frame whose world position is known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub frame: usize,
    pub world: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub ransac: RansacConfig,
    pub bundle: BaConfig,
    /// Screening threshold of the first refinement round. Each later round
    /// halves it until `ransac.threshold_px` is reached, so a rough initial
    /// rig does not lose most of its observations to the final threshold.
    pub coarse_threshold_px: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            ransac: RansacConfig::default(),
            bundle: BaConfig::default(),
            coarse_threshold_px: 64.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub initial_rms_px: f64,
    pub final_rms_px: f64,
    pub iterations: usize,
    pub converged: bool,
    pub ransac_seed: u64,
    pub outliers_removed: usize,
    pub frames_dropped: usize,
    /// Largest anchor misfit after alignment; absent without anchors.
    pub anchor_residual_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOutput {
    pub rig: CameraRig,
    pub points: Vec<(usize, Vector3<f64>)>,
    pub alignment: Option<WorldAlignment>,
    pub report: CalibrationReport,
}

struct Screened {
    observations: Vec<TrackedPoint2D>,
    outliers: usize,
    dropped: usize,
}

/// Per-frame RANSAC against `rig`; frames without consensus are dropped.
fn screen(problem: &CalibrationProblem, rig: &CameraRig, ransac: &RansacConfig) -> Result<Screened> {
    let mut out = Screened {
        observations: Vec::with_capacity(problem.observations.len()),
        outliers: 0,
        dropped: 0,
    };
    for (frame, obs) in problem.frames() {
        let rays = problem.rays(rig, &obs);
        let cfg = RansacConfig {
            seed: ransac.seed.wrapping_add(frame as u64),
            ..ransac.clone()
        };
        match triangulate_ransac(&rays, &cfg) {
            Ok(res) => {
                out.outliers += obs.len() - res.inliers.len();
                out.observations.extend(res.inliers.iter().map(|&k| problem.observations[obs[k]]));
            }
            Err(Error::NoConsensus { .. }) | Err(Error::DegenerateGeometry(_)) => {
                out.outliers += obs.len();
                out.dropped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// RANSAC-filtered observations and bundle adjustment, repeated with a
/// shrinking screening threshold, then world alignment when at least three
/// anchors are given.
pub fn calibrate(problem: &CalibrationProblem, anchors: &[Anchor], cfg: &CalibrationConfig) -> Result<CalibrationOutput> {
    problem.validate()?;
    if !(cfg.coarse_threshold_px > 0.0) {
        return Err(Error::config("calibration.coarse_threshold_px", "must be positive"));
    }
    let fine = cfg.ransac.threshold_px;
    let mut threshold = cfg.coarse_threshold_px.max(fine);
    let mut rig = problem.rig.clone();
    let mut initial_rms = None;
    loop {
        let ransac = RansacConfig {
            threshold_px: threshold,
            ..cfg.ransac.clone()
        };
        let screened = screen(problem, &rig, &ransac)?;
        let cleaned = CalibrationProblem {
            rig: rig.clone(),
            observations: screened.observations,
            fixed_intrinsics: problem.fixed_intrinsics.clone(),
        };
        let ba = bundle_adjust(&cleaned, &cfg.bundle)?;
        initial_rms.get_or_insert(ba.report.initial_rms_px);
        if threshold > fine {
            rig = ba.rig;
            threshold = (threshold / 2.0).max(fine);
            continue;
        }
        return align_and_report(ba, anchors, cfg, initial_rms.unwrap_or(f64::NAN), screened.outliers, screened.dropped);
    }
}

fn align_and_report(
    ba: BaResult,
    anchors: &[Anchor],
    cfg: &CalibrationConfig,
    initial_rms_px: f64,
    outliers: usize,
    dropped: usize,
) -> Result<CalibrationOutput> {
    let (rig, points, alignment, anchor_residual) = if anchors.is_empty() {
        (ba.rig, ba.points, None, None)
    } else {
        let lookup: BTreeMap<usize, Vector3<f64>> = ba.points.iter().copied().collect();
        let mut local = Vec::with_capacity(anchors.len());
        let mut world = Vec::with_capacity(anchors.len());
        for a in anchors {
            let x = lookup
                .get(&a.frame)
                .ok_or_else(|| Error::Lookup(format!("anchor frame {} was not reconstructed", a.frame)))?;
            local.push(*x);
            world.push(Vector3::from(a.world));
        }
        let align = align_to_world(&local, &world)?;
        let residual = align.max_residual(&local, &world);
        let rig = align.apply_to_rig(&ba.rig)?;
        let points = ba.points.iter().map(|(f, x)| (*f, align.apply(x))).collect();
        (rig, points, Some(align), Some(residual))
    };
    Ok(CalibrationOutput {
        rig,
        points,
        alignment,
        report: CalibrationReport {
            initial_rms_px,
            final_rms_px: ba.report.final_rms_px,
            iterations: ba.report.iterations,
            converged: ba.report.converged,
            ransac_seed: cfg.ransac.seed,
            outliers_removed: outliers,
            frames_dropped: dropped,
            anchor_residual_m: anchor_residual,
        },
    })
}

/// Lissajous path sweeping the box `center +- half_extent`.
pub fn sphere_trajectory(frames: usize, center: Vector3<f64>, half_extent: Vector3<f64>) -> Vec<Vector3<f64>> {
    (0..frames)
        .map(|i| {
            let s = std::f64::consts::TAU * i as f64 / frames as f64;
            center
                + Vector3::new(
                    half_extent.x * (3.0 * s).sin(),
                    half_extent.y * (4.0 * s + 0.5).sin(),
                    half_extent.z * (7.0 * s + 1.0).sin(),
                )
        })
        .collect()
}

/// Projects each sphere position into every camera that sees it, adding
/// isotropic Gaussian pixel noise. Detections pushed outside the image are
/// dropped, as are frames seen by fewer than two cameras.
pub fn synthesize_observations(
    rig: &CameraRig,
    points: &[Vector3<f64>],
    noise_px: f64,
    rng: &mut impl Rng,
) -> Vec<TrackedPoint2D> {
    let noise = Normal::new(0.0, noise_px.max(0.0)).expect("finite noise");
    let mut out = Vec::new();
    for (frame, x) in points.iter().enumerate() {
        let mut seen = Vec::new();
        for cam in rig.cameras() {
            let Ok(p) = cam.project(x) else { continue };
            let pixel = Point2::new(p.x + noise.sample(rng), p.y + noise.sample(rng));
            if cam.in_image(&pixel) {
                seen.push(TrackedPoint2D {
                    frame,
                    camera_id: cam.id,
                    pixel,
                });
            }
        }
        if seen.len() >= 2 {
            out.extend(seen);
        }
    }
    out
}

fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Rotates each camera by exactly `rotation_rad` about a random axis, moves
/// its center by exactly `translation_m` in a random direction and scales
/// its focal length by `1 +- focal_fraction`.
pub fn perturb_rig(
    rig: &CameraRig,
    rotation_rad: f64,
    translation_m: f64,
    focal_fraction: f64,
    rng: &mut impl Rng,
) -> Result<CameraRig> {
    let cameras = rig
        .cameras()
        .iter()
        .map(|cam| {
            let axis = random_unit(rng);
            let rotation = Rotation3::new(axis * rotation_rad).into_inner() * cam.rotation;
            let center = cam.center() + random_unit(rng) * translation_m;
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let mut k = cam.intrinsics;
            k[(0, 0)] *= 1.0 + sign * focal_fraction;
            k[(1, 1)] *= 1.0 + sign * focal_fraction;
            CameraModel::new(cam.id, k, rotation, -(rotation * center), cam.resolution)
        })
        .collect::<Result<Vec<_>>>()?;
    rig.with_cameras(cameras)
}
