//! First-frame initialization: triangulate each keypoint, derive the
//! subject's link lengths and fit the initial pose.
//!
//! Links between two keypoints (upper arm, forearm, thigh, shank) take their
//! measured lengths, averaged over the left and right side. Every other link
//! is scaled by the ratio of the measured trunk height (shoulder midpoint to
//! hip midpoint) to the template's. The spine, chest and clavicle angles are
//! held at zero during the initial fit: the subject is assumed to stand with
//! an unbent spine and lowered shoulders.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Point2, Vector3};
use serde::{Deserialize, Serialize};

use crate::calibration::{triangulate_ransac, RansacConfig};
use crate::camera::{CameraModel, CameraRig};
use crate::error::{read_json, write_json, Error, Result};
use crate::ik::{self, IkConfig};
use crate::pcm::{ConfidenceField, PcmSet};
use crate::skeleton::{DofKind, JointAngles, JointPositions, SkeletonModel};
use crate::tracker::{PersonTrack, TrackerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointDetection {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl KeypointDetection {
    pub fn pixel(&self) -> Point2<f64> {
        Point2::new(self.x, self.y)
    }
}

/// One person's keypoints as seen by one camera, in keypoint order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraDetections {
    pub camera: usize,
    pub keypoints: Vec<KeypointDetection>,
}

/// Everything known about one person at the initial frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitObservation {
    pub person: usize,
    pub frame: usize,
    pub views: Vec<CameraDetections>,
}

impl InitObservation {
    /// Peak of every field of `person` in every camera. A synthetic field
    /// peaks at its strongest blob center, a raster at its largest texel.
    pub fn from_pcm(pcm: &PcmSet, person: usize) -> Result<Self> {
        let mut views = Vec::with_capacity(pcm.num_cameras());
        for camera in 0..pcm.num_cameras() {
            let mut keypoints = Vec::with_capacity(pcm.num_keypoints());
            for k in 0..pcm.num_keypoints() {
                let candidates: Vec<Point2<f64>> = match pcm.field(camera, person, k)? {
                    ConfidenceField::Mixture(blobs) => blobs.iter().map(|b| b.center).collect(),
                    ConfidenceField::Raster(r) => {
                        let best = r
                            .data
                            .iter()
                            .enumerate()
                            .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
                        vec![Point2::new((best.0 % r.width) as f64, (best.0 / r.width) as f64)]
                    }
                };
                let mut best = KeypointDetection {
                    x: 0.0,
                    y: 0.0,
                    confidence: 0.0,
                };
                for p in candidates {
                    let c = pcm.query(camera, person, k, &p)?;
                    if c > best.confidence {
                        best = KeypointDetection {
                            x: p.x,
                            y: p.y,
                            confidence: c,
                        };
                    }
                }
                keypoints.push(best);
            }
            views.push(CameraDetections { camera, keypoints });
        }
        Ok(Self {
            person,
            frame: pcm.frame,
            views,
        })
    }

    pub fn load(path: &Path) -> Result<Vec<Self>> {
        read_json(path)
    }

    pub fn save(observations: &[Self], path: &Path) -> Result<()> {
        write_json(path, &observations)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Detections below this confidence count as missing.
    pub confidence_threshold: f64,
    /// Reprojection threshold sized for detector noise, looser than the
    /// calibration default.
    pub ransac: RansacConfig,
    pub ik: IkConfig,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.3,
            ransac: RansacConfig {
                threshold_px: 12.0,
                ..RansacConfig::default()
            },
            ik: IkConfig {
                max_iterations: 200,
                ..IkConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct InitResult {
    pub person: usize,
    pub frame: usize,
    pub model: SkeletonModel,
    pub angles: JointAngles,
    pub positions: JointPositions,
    /// Triangulated keypoints.
    pub keypoints: Vec<Vector3<f64>>,
    /// Outlier rays rejected per keypoint.
    pub rejected: Vec<usize>,
}

impl InitResult {
    /// Tracking state whose history holds the initial pose.
    pub fn into_track(self, cfg: &TrackerConfig) -> PersonTrack {
        PersonTrack::new(self.person, self.model, self.frame, self.angles, cfg)
    }
}

/// Builds a personalized skeleton and initial pose for one person.
pub fn initialize_person(
    obs: &InitObservation,
    rig: &CameraRig,
    template: &SkeletonModel,
    cfg: &InitConfig,
) -> Result<InitResult> {
    let n_kp = template.num_keypoints();
    if let Some(v) = obs.views.iter().find(|v| v.keypoints.len() != n_kp) {
        return Err(Error::config(
            format!("views.camera{}", v.camera),
            format!("expected {n_kp} keypoints, found {}", v.keypoints.len()),
        ));
    }
    let mut rays: Vec<Vec<(&CameraModel, Point2<f64>)>> = vec![Vec::new(); n_kp];
    for view in &obs.views {
        let cam = rig.camera(view.camera)?;
        for (k, d) in view.keypoints.iter().enumerate() {
            if d.confidence >= cfg.confidence_threshold && cam.in_image(&d.pixel()) {
                rays[k].push((cam, d.pixel()));
            }
        }
    }
    let missing: Vec<String> = rays
        .iter()
        .zip(template.keypoint_names())
        .filter(|(r, _)| r.len() < 2)
        .map(|(_, name)| name.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::InitFailure {
            person: obs.person,
            missing,
        });
    }

    let mut keypoints = Vec::with_capacity(n_kp);
    let mut rejected = Vec::with_capacity(n_kp);
    for (k, r) in rays.iter().enumerate() {
        let ransac = RansacConfig {
            seed: cfg.ransac.seed.wrapping_add(k as u64),
            ..cfg.ransac.clone()
        };
        let fit = triangulate_ransac(r, &ransac)?;
        rejected.push(r.len() - fit.inliers.len());
        keypoints.push(fit.point);
    }

    let model = personalize_from_keypoints(template, &keypoints)?;
    let q0 = rest_pose_at(&model, &keypoints)?;
    let frozen = ["spine", "chest", "l_clavicle", "r_clavicle"]
        .iter()
        .filter_map(|n| model.joint_index(n))
        .flat_map(|j| model.dof_start(j)..model.dof_start(j) + model.joints()[j].kind.count())
        .collect();
    let ik_cfg = IkConfig {
        frozen_dofs: frozen,
        ..cfg.ik.clone()
    };
    let fit = ik::solve_constrained(&model, &q0, &ik::uniform_targets(&keypoints), &ik_cfg)?;
    Ok(InitResult {
        person: obs.person,
        frame: obs.frame,
        model,
        positions: fit.positions,
        angles: fit.angles,
        keypoints,
        rejected,
    })
}

/// Keypoint index of each joint that carries one.
fn keypoint_of_joint(model: &SkeletonModel) -> BTreeMap<usize, usize> {
    model.keypoint_joints().iter().enumerate().map(|(k, &j)| (j, k)).collect()
}

/// Template rescaled to the measured limbs and trunk.
pub fn personalize_from_keypoints(template: &SkeletonModel, keypoints: &[Vector3<f64>]) -> Result<SkeletonModel> {
    let kp = keypoint_of_joint(template);
    let length = |j: usize| -> Result<f64> {
        let parent = template.joints()[j]
            .parent
            .ok_or_else(|| Error::config("measured_links", "a measured link needs a parent joint"))?;
        match (kp.get(&parent), kp.get(&j)) {
            (Some(&a), Some(&b)) => Ok((keypoints[b] - keypoints[a]).norm()),
            _ => Err(Error::config(
                "measured_links",
                format!("link to `{}` is not spanned by two keypoints", template.joints()[j].name),
            )),
        }
    };
    let lengths = template
        .measured_links()
        .iter()
        .map(|&[l, r]| Ok((length(l)? + length(r)?) / 2.0))
        .collect::<Result<Vec<_>>>()?;

    let (shoulders, hips) = template
        .trunk()
        .ok_or_else(|| Error::config("trunk", "the skeleton needs trunk reference joints"))?;
    let mid = |pair: [usize; 2]| -> Result<Vector3<f64>> {
        match (kp.get(&pair[0]), kp.get(&pair[1])) {
            (Some(&a), Some(&b)) => Ok((keypoints[a] + keypoints[b]) / 2.0),
            _ => Err(Error::config("trunk", "trunk reference joints must carry keypoints")),
        }
    };
    let trunk = (mid(shoulders)? - mid(hips)?).norm();
    let template_trunk = template.trunk_height().expect("trunk checked above");
    if !(trunk > 0.0) {
        return Err(Error::DegenerateGeometry("shoulder and hip midpoints coincide".into()));
    }
    template.personalize(trunk / template_trunk, &lengths)
}

/// Rest pose with the pelvis placed under the measured hip midpoint and
/// turned to face along the measured hip line.
fn rest_pose_at(model: &SkeletonModel, keypoints: &[Vector3<f64>]) -> Result<JointAngles> {
    let kp = keypoint_of_joint(model);
    let (_, hips) = model.trunk().expect("personalized model has a trunk");
    let (l, r) = (keypoints[kp[&hips[0]]], keypoints[kp[&hips[1]]]);
    let root = model
        .joints()
        .iter()
        .position(|j| matches!(j.kind, DofKind::Free6))
        .ok_or_else(|| Error::config("joints", "the skeleton needs a free root"))?;
    let across = l - r;
    let yaw = across.y.atan2(across.x);
    let mid_offset = (model.joints()[hips[0]].offset + model.joints()[hips[1]].offset) / 2.0;
    let rot = Matrix3::new(yaw.cos(), -yaw.sin(), 0.0, yaw.sin(), yaw.cos(), 0.0, 0.0, 0.0, 1.0);
    let pelvis = (l + r) / 2.0 - rot * mid_offset;
    let mut q = JointAngles::zeros(model.num_dofs());
    let s = model.dof_start(root);
    q.0[s] = pelvis.x;
    q.0[s + 1] = pelvis.y;
    q.0[s + 2] = pelvis.z;
    q.0[s + 5] = yaw;
    Ok(q)
}

/// A person's detections in one camera, identity unknown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub camera: usize,
    pub keypoints: Vec<KeypointDetection>,
}

/// A manually supplied first-frame box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManualBox {
    pub person: usize,
    pub camera: usize,
    pub center: [f64; 2],
    pub size: [f64; 2],
}

/// First-frame person boxes. Manual boxes are used as given.
pub fn bootstrap_boxes(manual: Vec<ManualBox>) -> Vec<ManualBox> {
    manual
}

/// Groups single-camera detections into persons. Detections of the
/// lowest-numbered camera seed the groups; each other detection joins the
/// group with the smallest mean symmetric epipolar distance, provided it is
/// within `threshold_px`. Two groups at the same distance, or two detections
/// of one camera claiming one group, are reported as ambiguous.
pub fn match_detections(
    rig: &CameraRig,
    detections: &[Detection],
    threshold_px: f64,
    min_confidence: f64,
) -> Result<Vec<Vec<Detection>>> {
    let Some(reference) = detections.iter().map(|d| d.camera).min() else {
        return Ok(Vec::new());
    };
    let mut groups: Vec<Vec<Detection>> = detections
        .iter()
        .filter(|d| d.camera == reference)
        .map(|d| vec![d.clone()])
        .collect();
    let ref_cam = rig.camera(reference)?;
    let mut others: Vec<&Detection> = detections.iter().filter(|d| d.camera != reference).collect();
    others.sort_by_key(|d| d.camera);
    for det in others {
        let cam = rig.camera(det.camera)?;
        let f = fundamental(ref_cam, cam);
        let scores: Vec<Option<f64>> = groups
            .iter()
            .map(|g| epipolar_residual(&f, &g[0], det, min_confidence))
            .collect();
        let best = scores.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        if !(best <= threshold_px) {
            continue;
        }
        let winners: Vec<usize> = (0..groups.len()).filter(|&i| scores[i] == Some(best)).collect();
        if winners.len() > 1 {
            return Err(Error::AmbiguousIdentity {
                camera: det.camera,
                candidates: winners,
            });
        }
        let g = winners[0];
        if groups[g].iter().any(|d| d.camera == det.camera) {
            return Err(Error::AmbiguousIdentity {
                camera: det.camera,
                candidates: vec![g],
            });
        }
        groups[g].push(det.clone());
    }
    Ok(groups)
}

/// Fundamental matrix mapping pixels of `a` to epipolar lines in `b`.
fn fundamental(a: &CameraModel, b: &CameraModel) -> Matrix3<f64> {
    let r = b.rotation * a.rotation.transpose();
    let t = b.translation - r * a.translation;
    let e = t.cross_matrix() * r;
    let ka = a.intrinsics.try_inverse().expect("validated intrinsics");
    let kb = b.intrinsics.try_inverse().expect("validated intrinsics");
    kb.transpose() * e * ka
}

/// Mean symmetric point-to-epipolar-line distance over keypoints confident
/// in both detections; `None` when no keypoint qualifies.
fn epipolar_residual(f: &Matrix3<f64>, a: &Detection, b: &Detection, min_confidence: f64) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for (pa, pb) in a.keypoints.iter().zip(&b.keypoints) {
        if pa.confidence < min_confidence || pb.confidence < min_confidence {
            continue;
        }
        let xa = pa.pixel().to_homogeneous();
        let xb = pb.pixel().to_homogeneous();
        let lb = f * xa;
        let la = f.transpose() * xb;
        let d = |l: Vector3<f64>, x: Vector3<f64>| l.dot(&x).abs() / l.xy().norm();
        sum += 0.5 * (d(lb, xb) + d(la, xa));
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}
