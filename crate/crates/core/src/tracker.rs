//! Frame-to-frame reconstruction loop.
//!
//! For each person and frame: extrapolate the pose from the last three
//! reconstructed frames, pick one camera per viewpoint, search a cubic
//! lattice around every predicted keypoint for the highest summed part
//! confidence, fit the skeleton to those points with confidence weights,
//! low-pass filter the fitted joints and fit again under range-of-motion
//! limits.
//!
//! Box rotation convention: with `d` the image vector from the torso joint
//! to the neck joint, the angle is `pi/2 - atan2(-d.y, d.x)` wrapped to
//! `(-pi, pi]`. Image y grows downward, so the sign flip makes an upright
//! subject 0, head toward +x `+pi/2`, head toward -x `-pi/2` and an inverted
//! subject `pi`.

use std::collections::VecDeque;
use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Complex, Point2, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, CameraRig};
use crate::error::{Error, Result};
use crate::ik::{self, IkConfig, IkReport, IkTarget};
use crate::motion::{MotionSequence, PoseFrame};
use crate::pcm::PcmSet;
use crate::skeleton::{JointAngles, JointPositions, SkeletonModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Bounding-box margin `m`, applied to the projected extent.
    pub margin: f64,
    /// Lattice half-width `k`; the lattice has `(2k+1)^3` points.
    pub lattice_half_width: usize,
    /// Lattice spacing `s` in meters.
    pub lattice_spacing: f64,
    /// Weight `g` of a viewpoint whose view of the keypoint is occluded.
    pub occlusion_weight: f64,
    pub occlusion_radius_px: f64,
    pub rotation_enabled: bool,
    /// Box rotations up to this magnitude (radians) are treated as upright.
    pub rotation_threshold: f64,
    pub cutoff_hz: f64,
    pub filter_order: usize,
    /// Frames passed through unfiltered while the filter state fills.
    pub warmup_frames: usize,
    pub frame_rate: f64,
    pub min_box_px: f64,
    /// Per-frame decay of lower-body weights while the box is rotated.
    pub lower_body_decay: f64,
    /// Consecutive lost frames tolerated before a person is dropped;
    /// `None` means half a second.
    pub reentry_frames: Option<usize>,
    pub ik: IkConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            margin: 1.25,
            lattice_half_width: 2,
            lattice_spacing: 0.02,
            occlusion_weight: 0.5,
            occlusion_radius_px: 15.0,
            rotation_enabled: true,
            rotation_threshold: 30f64.to_radians(),
            cutoff_hz: 10.0,
            filter_order: 2,
            warmup_frames: 2,
            frame_rate: 60.0,
            min_box_px: 32.0,
            lower_body_decay: 0.5,
            reentry_frames: None,
            ik: IkConfig::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 1.0) {
            return Err(Error::config("tracker.margin", "must exceed 1"));
        }
        if self.lattice_half_width == 0 {
            return Err(Error::config("tracker.lattice_half_width", "must be at least 1"));
        }
        if !(self.lattice_spacing > 0.0) {
            return Err(Error::config("tracker.lattice_spacing", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_weight) {
            return Err(Error::config("tracker.occlusion_weight", "must lie in [0, 1]"));
        }
        if !(self.occlusion_radius_px >= 0.0) || !(self.rotation_threshold >= 0.0) {
            return Err(Error::config("tracker.occlusion_radius_px", "must be non-negative"));
        }
        if !(self.cutoff_hz > 0.0) || !(self.frame_rate > 0.0) {
            return Err(Error::config("tracker.cutoff_hz", "cutoff and frame rate must be positive"));
        }
        if self.filter_order != 2 {
            return Err(Error::config("tracker.filter_order", "only second order is supported"));
        }
        if !(self.min_box_px > 0.0) {
            return Err(Error::config("tracker.min_box_px", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lower_body_decay) {
            return Err(Error::config("tracker.lower_body_decay", "must lie in [0, 1]"));
        }
        self.ik.validate()
    }

    pub fn reentry_limit(&self) -> usize {
        self.reentry_frames.unwrap_or((self.frame_rate / 2.0).round() as usize)
    }
}

/// The most recent reconstructed frames of one person, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseHistory {
    entries: VecDeque<(usize, JointAngles, JointPositions)>,
}

impl PoseHistory {
    const CAPACITY: usize = 3;

    pub fn new() -> Self {
        Self {
            entries: VecDeque::with_capacity(Self::CAPACITY),
        }
    }

    pub fn push(&mut self, frame: usize, angles: JointAngles, positions: JointPositions) {
        debug_assert!(self.entries.back().is_none_or(|e| e.0 <= frame));
        if self.entries.len() == Self::CAPACITY {
            self.entries.pop_front();
        }
        self.entries.push_back((frame, angles, positions));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn latest(&self) -> Option<(usize, &JointAngles, &JointPositions)> {
        self.entries.back().map(|(f, q, p)| (*f, q, p))
    }

    /// Positions from newest to oldest.
    fn positions_newest_first(&self) -> impl Iterator<Item = &JointPositions> {
        self.entries.iter().rev().map(|e| &e.2)
    }
}

impl Default for PoseHistory {
    fn default() -> Self {
        Self::new()
    }
}

/// Next-frame joint positions: `1.5 P_t - P_(t-1) + 0.5 P_(t-2)` per joint.
///
/// This averages the current pose with the constant-acceleration guess
/// `2 P_t - 2 P_(t-1) + P_(t-2)`. (The textbook constant-acceleration
/// extrapolation is `3 P_t - 3 P_(t-1) + P_(t-2)`; the damped form is kept
/// because it is what the method prescribes.) With two frames of history the
/// prediction is `2 P_t - P_(t-1)`, with one frame it is `P_t`.
pub fn predict_pose(history: &PoseHistory) -> Result<JointPositions> {
    let mut it = history.positions_newest_first();
    let p0 = it.next().ok_or(Error::NoHistory)?;
    let out = match (it.next(), it.next()) {
        (None, _) => p0.0.clone(),
        (Some(p1), None) => p0.0.iter().zip(&p1.0).map(|(a, b)| 2.0 * a - b).collect(),
        (Some(p1), Some(p2)) => p0
            .0
            .iter()
            .zip(&p1.0)
            .zip(&p2.0)
            .map(|((a, b), c)| 1.5 * a - b + 0.5 * c)
            .collect(),
    };
    Ok(JointPositions(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub center: Point2<f64>,
    pub size: Vector2<f64>,
    /// Radians, 0 for an upright box.
    pub rotation: f64,
}

impl BoundingBox {
    /// Whether `pixel` lies inside the unrotated box.
    pub fn contains(&self, pixel: &Point2<f64>) -> bool {
        let d = pixel - self.center;
        d.x.abs() <= self.size.x / 2.0 && d.y.abs() <= self.size.y / 2.0
    }
}

/// Box around the projections of the predicted joints that lie in front of
/// `cam` and inside its image: center at the middle of the extent, size the
/// extent times `margin`, each side at least `min_size`. `None` when no
/// joint is visible.
pub fn bounding_box(pred: &JointPositions, cam: &CameraModel, margin: f64, min_size: f64) -> Option<BoundingBox> {
    let mut lo = Vector2::repeat(f64::INFINITY);
    let mut hi = Vector2::repeat(f64::NEG_INFINITY);
    let mut any = false;
    for p in pred.0.iter().filter_map(|x| cam.project(x).ok()).filter(|p| cam.in_image(p)) {
        lo = lo.inf(&p.coords);
        hi = hi.sup(&p.coords);
        any = true;
    }
    if !any {
        return None;
    }
    let size = ((hi - lo) * margin).map(|v| v.max(min_size));
    Some(BoundingBox {
        center: Point2::from((lo + hi) / 2.0),
        size,
        rotation: 0.0,
    })
}

/// In-plane rotation of the subject as seen by `cam`, from the torso joint
/// to the neck joint (see the module docs for the convention). Returns 0
/// when either joint is behind the camera or both project to one pixel.
pub fn box_rotation(pred: &JointPositions, cam: &CameraModel, neck: usize, torso: usize) -> f64 {
    let (Ok(n), Ok(t)) = (cam.project(&pred.0[neck]), cam.project(&pred.0[torso])) else {
        return 0.0;
    };
    let d = n - t;
    if d.norm() < 1e-12 {
        return 0.0;
    }
    wrap_angle(FRAC_PI_2 - (-d.y).atan2(d.x))
}

/// Wraps to `(-pi, pi]`.
fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Camera of `cameras` whose image center is closest to the projected neck;
/// ties go to the lowest id. Cameras seeing the neck behind them or
/// outside the image are skipped; `None` when none remain.
pub fn select_camera(pred: &JointPositions, neck: usize, rig: &CameraRig, cameras: &[usize]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &id in cameras {
        let Ok(cam) = rig.camera(id) else { continue };
        let Ok(p) = cam.project(&pred.0[neck]) else { continue };
        if !cam.in_image(&p) {
            continue;
        }
        let d = (p - cam.image_center()).norm_squared();
        if best.is_none_or(|(b_id, b)| d < b || (d == b && id < b_id)) {
            best = Some((id, d));
        }
    }
    best.map(|(id, _)| id)
}

/// Per-viewpoint weight for keypoint joint `joint` of person `person`:
/// `g` when any joint of another person projects within `radius_px` of it
/// in the chosen camera and is nearer that camera, else 1. Viewpoints
/// without a chosen camera get 1.
pub fn occlusion_weights(
    preds: &[Option<JointPositions>],
    person: usize,
    joint: usize,
    chosen: &[Option<usize>],
    rig: &CameraRig,
    g: f64,
    radius_px: f64,
) -> Vec<f64> {
    chosen
        .iter()
        .map(|c| {
            let Some(cam) = c.and_then(|id| rig.camera(id).ok()) else {
                return 1.0;
            };
            let Some(own) = preds[person].as_ref() else { return 1.0 };
            let x = own.0[joint];
            let Ok(px) = cam.project(&x) else { return 1.0 };
            let depth = cam.depth(&x);
            let occluded = preds
                .iter()
                .enumerate()
                .filter(|&(other, _)| other != person)
                .filter_map(|(_, p)| p.as_ref())
                .flat_map(|p| p.0.iter())
                .any(|y| {
                    let d = cam.depth(y);
                    d < depth && cam.project(y).is_ok_and(|py| (py - px).norm() <= radius_px)
                });
            if occluded {
                g
            } else {
                1.0
            }
        })
        .collect()
}

/// One camera's contribution to a lattice score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeTerm {
    pub camera: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeResult {
    pub point: Vector3<f64>,
    /// Lattice index `(a, b, c)` of `point`, each in `-k..=k`.
    pub offset: [i32; 3],
    /// Weighted sum at `point`.
    pub score: f64,
    /// Unweighted confidence sum at `point`.
    pub confidence: f64,
}

/// Exhaustive search of the `(2k+1)^3` lattice `center + s (a, b, c)` for
/// the largest weighted confidence sum over `terms`. Indices are visited in
/// lexicographic order and only a strictly larger score replaces the best,
/// so ties go to the smallest `(a, b, c)`. When no point scores above zero
/// the center is returned.
pub fn lattice_search(
    center: &Vector3<f64>,
    terms: &[LatticeTerm],
    pcm: &PcmSet,
    rig: &CameraRig,
    person: usize,
    keypoint: usize,
    k: usize,
    s: f64,
) -> Result<LatticeResult> {
    let cams = terms
        .iter()
        .map(|t| rig.camera(t.camera).map(|c| (c, t)))
        .collect::<Result<Vec<_>>>()?;
    let eval = |x: &Vector3<f64>| -> Result<(f64, f64)> {
        let (mut score, mut sum) = (0.0, 0.0);
        for (cam, term) in &cams {
            let Ok(px) = cam.project(x) else { continue };
            let v = pcm.query(term.camera, person, keypoint, &px)?;
            score += term.weight * v;
            sum += v;
        }
        Ok((score, sum))
    };
    let k = k as i32;
    let mut best = ([0i32; 3], 0.0);
    for a in -k..=k {
        for b in -k..=k {
            for c in -k..=k {
                let x = center + Vector3::new(a as f64, b as f64, c as f64) * s;
                let (score, _) = eval(&x)?;
                if score > best.1 {
                    best = ([a, b, c], score);
                }
            }
        }
    }
    let [a, b, c] = best.0;
    let point = center + Vector3::new(a as f64, b as f64, c as f64) * s;
    let (score, confidence) = eval(&point)?;
    Ok(LatticeResult {
        point,
        offset: best.0,
        score,
        confidence,
    })
}

/// Second-order Butterworth low-pass filter (bilinear transform with
/// prewarping) over a fixed number of channels, run as a streaming
/// recursion. A cutoff at or above the Nyquist frequency disables it.
#[derive(Debug, Clone, PartialEq)]
pub struct LowPassFilter {
    coeffs: Option<Biquad>,
    warmup: usize,
    seen: usize,
    x: [Vec<f64>; 2],
    y: [Vec<f64>; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl LowPassFilter {
    pub fn new(channels: usize, cutoff_hz: f64, sample_hz: f64, warmup: usize) -> Self {
        let coeffs = (cutoff_hz < sample_hz / 2.0).then(|| {
            let k = (PI * cutoff_hz / sample_hz).tan();
            let r2 = std::f64::consts::SQRT_2;
            let norm = 1.0 / (1.0 + r2 * k + k * k);
            let b0 = k * k * norm;
            Biquad {
                b: [b0, 2.0 * b0, b0],
                a: [2.0 * (k * k - 1.0) * norm, (1.0 - r2 * k + k * k) * norm],
            }
        });
        Self {
            coeffs,
            warmup: warmup.max(2),
            seen: 0,
            x: [vec![0.0; channels], vec![0.0; channels]],
            y: [vec![0.0; channels], vec![0.0; channels]],
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.coeffs.is_some()
    }

    /// Filters one sample per channel.
    pub fn step(&mut self, input: &[f64]) -> Vec<f64> {
        assert_eq!(input.len(), self.x[0].len(), "channel count mismatch");
        let Some(f) = self.coeffs else {
            return input.to_vec();
        };
        let out: Vec<f64> = if self.seen < self.warmup {
            input.to_vec()
        } else {
            (0..input.len())
                .map(|i| {
                    f.b[0] * input[i] + f.b[1] * self.x[0][i] + f.b[2] * self.x[1][i]
                        - f.a[0] * self.y[0][i]
                        - f.a[1] * self.y[1][i]
                })
                .collect()
        };
        self.x.swap(0, 1);
        self.x[0].copy_from_slice(input);
        self.y.swap(0, 1);
        self.y[0].copy_from_slice(&out);
        self.seen += 1;
        out
    }

    /// Magnitude of the digital frequency response at `freq_hz`.
    pub fn magnitude_response(&self, freq_hz: f64, sample_hz: f64) -> f64 {
        let Some(f) = self.coeffs else { return 1.0 };
        let w = 2.0 * PI * freq_hz / sample_hz;
        let z1 = Complex::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = Complex::from(f.b[0]) + z1 * f.b[1] + z2 * f.b[2];
        let den = Complex::from(1.0) + z1 * f.a[0] + z2 * f.a[1];
        (num / den).norm()
    }
}

fn flatten(p: &JointPositions) -> Vec<f64> {
    p.0.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
}

fn unflatten(v: &[f64]) -> JointPositions {
    JointPositions(v.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Tracked,
    /// Skipped this frame; the person is retried with the same prediction.
    LostForFrame,
    /// Dropped for good after too many consecutive skipped frames.
    Lost,
}

/// Outcome for one person in one frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PersonFrame {
    pub person: usize,
    pub status: TrackStatus,
    /// Selected camera per viewpoint.
    pub cameras: Vec<Option<usize>>,
    /// Box in the selected camera per viewpoint.
    pub boxes: Vec<Option<BoundingBox>>,
    pub rotated: bool,
    /// Lattice maximum per keypoint.
    #[serde(skip)]
    pub keypoints: Vec<Vector3<f64>>,
    /// Unweighted confidence sum per keypoint.
    pub weights: Vec<f64>,
    /// Low-pass filtered joint positions of the weighted fit.
    #[serde(skip)]
    pub smoothed: Option<JointPositions>,
    #[serde(skip)]
    pub angles: Option<JointAngles>,
    #[serde(skip)]
    pub positions: Option<JointPositions>,
    pub weighted_fit: Option<IkReport>,
    pub constrained_fit: Option<IkReport>,
}

impl PersonFrame {
    fn skipped(person: usize, status: TrackStatus, cameras: Vec<Option<usize>>) -> Self {
        let boxes = vec![None; cameras.len()];
        Self {
            person,
            status,
            cameras,
            boxes,
            rotated: false,
            keypoints: Vec::new(),
            weights: Vec::new(),
            smoothed: None,
            angles: None,
            positions: None,
            weighted_fit: None,
            constrained_fit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameResult {
    pub frame: usize,
    pub persons: Vec<PersonFrame>,
}

/// Tracking state of one person.
#[derive(Debug, Clone)]
pub struct PersonTrack {
    pub id: usize,
    pub model: SkeletonModel,
    history: PoseHistory,
    filter: LowPassFilter,
    weights: Vec<f64>,
    /// Prediction kept while the person is skipped.
    pending: Option<JointPositions>,
    lost_streak: usize,
    lost: bool,
    sequence: MotionSequence,
}

impl PersonTrack {
    /// Starts a track from an initial pose, which fills the history.
    pub fn new(id: usize, model: SkeletonModel, frame: usize, angles: JointAngles, cfg: &TrackerConfig) -> Self {
        let positions = model.forward_kinematics(&angles);
        let mut history = PoseHistory::new();
        for _ in 0..PoseHistory::CAPACITY {
            history.push(frame, angles.clone(), positions.clone());
        }
        let filter = LowPassFilter::new(3 * model.num_joints(), cfg.cutoff_hz, cfg.frame_rate, cfg.warmup_frames);
        let weights = vec![1.0; model.num_keypoints()];
        let sequence = MotionSequence::new(id, cfg.frame_rate, &model);
        Self {
            id,
            model,
            history,
            filter,
            weights,
            pending: None,
            lost_streak: 0,
            lost: false,
            sequence,
        }
    }

    pub fn history(&self) -> &PoseHistory {
        &self.history
    }

    pub fn is_lost(&self) -> bool {
        self.lost
    }

    pub fn sequence(&self) -> &MotionSequence {
        &self.sequence
    }

    pub fn into_sequence(self) -> MotionSequence {
        self.sequence
    }

    fn prediction(&self) -> Result<Option<JointPositions>> {
        if self.lost {
            return Ok(None);
        }
        match &self.pending {
            Some(p) => Ok(Some(p.clone())),
            None => predict_pose(&self.history).map(Some),
        }
    }
}

/// What phase 2 hands to phase 3 for one person.
struct Update {
    result: PersonFrame,
    filter: Option<LowPassFilter>,
}

pub struct Tracker {
    rig: CameraRig,
    cfg: TrackerConfig,
    persons: Vec<PersonTrack>,
    neck: usize,
    torso: usize,
}

impl Tracker {
    pub fn new(rig: CameraRig, cfg: TrackerConfig, persons: Vec<PersonTrack>) -> Result<Self> {
        cfg.validate()?;
        let first = persons.first().ok_or_else(|| Error::config("persons", "at least one person is required"))?;
        let (Some(neck), Some(torso)) = (first.model.neck(), first.model.torso()) else {
            return Err(Error::config("skeleton", "neck and torso reference joints are required"));
        };
        let n = first.model.num_joints();
        if persons.iter().any(|p| p.model.num_joints() != n) {
            return Err(Error::config("persons", "every person must share one skeleton topology"));
        }
        let mut persons = persons;
        for p in persons.iter_mut().filter(|p| p.sequence.frames.is_empty()) {
            let (frame, angles, positions) = p.history.latest().ok_or(Error::NoHistory)?;
            let initial = PoseFrame {
                frame,
                angles: angles.clone(),
                positions: positions.clone(),
                weights: p.weights.clone(),
                cameras: vec![None; rig.num_viewpoints()],
            };
            p.sequence.push(initial);
        }
        Ok(Self {
            rig,
            cfg,
            persons,
            neck,
            torso,
        })
    }

    pub fn persons(&self) -> &[PersonTrack] {
        &self.persons
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn into_sequences(self) -> Vec<MotionSequence> {
        self.persons.into_iter().map(PersonTrack::into_sequence).collect()
    }

    /// Processes the frame whose confidence fields are `pcm`. Person `id`
    /// reads the fields of PCM person `id`. Each person's output sequence
    /// starts with its initial pose.
    pub fn step_frame(&mut self, pcm: &PcmSet) -> Result<FrameResult> {
        // phase 1: every prediction, before anyone moves
        let preds = self
            .persons
            .iter()
            .map(PersonTrack::prediction)
            .collect::<Result<Vec<_>>>()?;
        let index_preds: Vec<Option<JointPositions>> = {
            let n = self.persons.iter().map(|p| p.id + 1).max().unwrap_or(0);
            let mut v = vec![None; n];
            for (p, pred) in self.persons.iter().zip(&preds) {
                v[p.id] = pred.clone();
            }
            v
        };

        // phase 2: persons in parallel against the snapshot
        let updates = self
            .persons
            .par_iter()
            .zip(preds.par_iter())
            .map(|(track, pred)| self.process(track, pred.as_ref(), &index_preds, pcm))
            .collect::<Result<Vec<_>>>()?;

        // phase 3: commit
        let limit = self.cfg.reentry_limit();
        let mut persons = Vec::with_capacity(updates.len());
        for ((track, pred), mut update) in self.persons.iter_mut().zip(preds).zip(updates) {
            match update.result.status {
                TrackStatus::Tracked => {
                    let angles = update.result.angles.clone().expect("tracked frame has angles");
                    let positions = update.result.positions.clone().expect("tracked frame has positions");
                    track.history.push(pcm.frame, angles.clone(), positions.clone());
                    track.filter = update.filter.expect("tracked frame has a filter state");
                    track.weights.clone_from(&update.result.weights);
                    track.pending = None;
                    track.lost_streak = 0;
                    track.sequence.push(PoseFrame {
                        frame: pcm.frame,
                        angles,
                        positions,
                        weights: update.result.weights.clone(),
                        cameras: update.result.cameras.clone(),
                    });
                }
                TrackStatus::LostForFrame => {
                    track.pending = pred;
                    track.lost_streak += 1;
                    if track.lost_streak > limit {
                        track.lost = true;
                        update.result.status = TrackStatus::Lost;
                    }
                }
                TrackStatus::Lost => {}
            }
            persons.push(update.result);
        }
        Ok(FrameResult {
            frame: pcm.frame,
            persons,
        })
    }

    fn process(
        &self,
        track: &PersonTrack,
        pred: Option<&JointPositions>,
        preds: &[Option<JointPositions>],
        pcm: &PcmSet,
    ) -> Result<Update> {
        let cfg = &self.cfg;
        let n_views = self.rig.num_viewpoints();
        let skipped = |status, cameras| Update {
            result: PersonFrame::skipped(track.id, status, cameras),
            filter: None,
        };
        let Some(pred) = pred else {
            return Ok(skipped(TrackStatus::Lost, vec![None; n_views]));
        };
        let model = &track.model;

        let cameras: Vec<Option<usize>> = self
            .rig
            .viewpoints()
            .iter()
            .map(|v| select_camera(pred, self.neck, &self.rig, v))
            .collect();
        if cameras.iter().all(Option::is_none) {
            return Ok(skipped(TrackStatus::LostForFrame, cameras));
        }
        let mut boxes = Vec::with_capacity(n_views);
        let mut rotated = false;
        for c in &cameras {
            let b = c.and_then(|id| {
                let cam = self.rig.camera(id).ok()?;
                let mut b = bounding_box(pred, cam, cfg.margin, cfg.min_box_px)?;
                b.rotation = box_rotation(pred, cam, self.neck, self.torso);
                Some(b)
            });
            rotated |= cfg.rotation_enabled && b.is_some_and(|b| b.rotation.abs() > cfg.rotation_threshold);
            boxes.push(b);
        }

        let upper = model.upper_body_keypoints();
        let mut keypoints = Vec::with_capacity(model.num_keypoints());
        let mut weights = Vec::with_capacity(model.num_keypoints());
        for (k, &joint) in model.keypoint_joints().iter().enumerate() {
            let center = pred.0[joint];
            if rotated && !upper.contains(&k) {
                keypoints.push(center);
                weights.push(track.weights[k] * cfg.lower_body_decay);
                continue;
            }
            let occ = occlusion_weights(
                preds,
                track.id,
                joint,
                &cameras,
                &self.rig,
                cfg.occlusion_weight,
                cfg.occlusion_radius_px,
            );
            let terms: Vec<LatticeTerm> = cameras
                .iter()
                .zip(&occ)
                .filter_map(|(c, &weight)| c.map(|camera| LatticeTerm { camera, weight }))
                .collect();
            let hit = lattice_search(
                &center,
                &terms,
                pcm,
                &self.rig,
                track.id,
                k,
                cfg.lattice_half_width,
                cfg.lattice_spacing,
            )?;
            keypoints.push(hit.point);
            weights.push(hit.confidence);
        }

        let (_, q_prev, _) = track.history.latest().ok_or(Error::NoHistory)?;
        let targets: Vec<IkTarget> = keypoints.iter().zip(&weights).map(|(p, &w)| IkTarget::new(*p, w)).collect();
        let stage1 = match ik::solve_weighted_with_prior(model, q_prev, q_prev, &targets, &cfg.ik) {
            Ok(s) => s,
            Err(Error::IllPosed { .. }) => return Ok(skipped(TrackStatus::LostForFrame, cameras)),
            Err(e) => return Err(e),
        };

        let mut filter = track.filter.clone();
        let smoothed = unflatten(&filter.step(&flatten(&stage1.positions)));
        let smooth_targets: Vec<Vector3<f64>> = model.keypoint_joints().iter().map(|&j| smoothed.0[j]).collect();
        let stage2 = ik::solve_constrained_with_prior(
            model,
            &stage1.angles,
            q_prev,
            &ik::uniform_targets(&smooth_targets),
            &cfg.ik,
        )?;

        Ok(Update {
            result: PersonFrame {
                person: track.id,
                status: TrackStatus::Tracked,
                cameras,
                boxes,
                rotated,
                keypoints,
                weights,
                smoothed: Some(smoothed),
                angles: Some(stage2.angles),
                positions: Some(stage2.positions),
                weighted_fit: Some(stage1.report),
                constrained_fit: Some(stage2.report),
            },
            filter: Some(filter),
        })
    }
}
