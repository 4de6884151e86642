//! Accuracy metrics against ground truth.
//!
//! Distances are reported in millimeters, percentages in `[0, 100]`. The
//! PCP tests are strict (`<` half the true limb length), PCK and the success
//! test are inclusive (`<=` the threshold). Following common practice for
//! tracking evaluations, [`EvalSet::report`] computes every metric except the
//! success rate over the successful frames only.

use std::ops::RangeInclusive;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{read_json, Error, Result};
use crate::motion::MotionSequence;

pub const SUCCESS_THRESHOLD_MM: f64 = 150.0;

const BODY_JOINTS: [&str; 12] = [
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hip",
    "r_hip",
    "l_knee",
    "r_knee",
    "l_ankle",
    "r_ankle",
];
const HEAD_JOINTS: [&str; 5] = ["nose", "l_eye", "r_eye", "l_ear", "r_ear"];
const LIMBS: [[&str; 2]; 8] = [
    ["l_shoulder", "l_elbow"],
    ["r_shoulder", "r_elbow"],
    ["l_elbow", "l_wrist"],
    ["r_elbow", "r_wrist"],
    ["l_hip", "l_knee"],
    ["r_hip", "r_knee"],
    ["l_knee", "l_ankle"],
    ["r_knee", "r_ankle"],
];

/// Which predicted joint corresponds to which true joint, and the limbs
/// (by predicted joint name) scored by PCP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    /// `[predicted, true]` joint names.
    pub joints: Vec<[String; 2]>,
    pub limbs: Vec<[String; 2]>,
}

impl Correspondence {
    fn identity<'a>(names: impl IntoIterator<Item = &'a str>) -> Self {
        Self {
            joints: names.into_iter().map(|n| [n.to_string(), n.to_string()]).collect(),
            limbs: LIMBS.iter().map(|[a, b]| [a.to_string(), b.to_string()]).collect(),
        }
    }

    /// The 17 keypoint joints, same names on both sides.
    pub fn keypoints() -> Self {
        Self::identity(HEAD_JOINTS.into_iter().chain(BODY_JOINTS))
    }

    /// The 12 body keypoint joints, head excluded.
    pub fn body() -> Self {
        Self::identity(BODY_JOINTS)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Matched joint positions of one frame, in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub frame: usize,
    pub pred: Vec<Vector3<f64>>,
    pub truth: Vec<Vector3<f64>>,
}

/// Frames and joints selected for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub joints: Vec<String>,
    /// Index pairs into `joints`.
    pub limbs: Vec<[usize; 2]>,
    pub frames: Vec<FramePair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: usize,
    pub successful_frames: usize,
    pub success_rate: f64,
    /// `None` when no frame succeeded.
    pub mpjpe_mm: Option<f64>,
    pub pcp_endpoint: Option<f64>,
    pub pcp_midpoint: Option<f64>,
    pub pck: Option<f64>,
    pub pck_threshold_mm: f64,
    pub success_threshold_mm: f64,
}

impl EvalSet {
    pub fn new(joints: Vec<String>, limbs: Vec<[usize; 2]>, frames: Vec<FramePair>) -> Result<Self> {
        let n = joints.len();
        if limbs.iter().flatten().any(|&i| i >= n) {
            return Err(Error::config("limbs", "limb endpoint outside the joint selection"));
        }
        if frames.iter().any(|f| f.pred.len() != n || f.truth.len() != n) {
            return Err(Error::config("frames", "every frame needs one position per selected joint"));
        }
        Ok(Self { joints, limbs, frames })
    }

    /// Pairs the frames present in both sequences (optionally restricted
    /// to `range`) under `corr`.
    pub fn align(
        pred: &MotionSequence,
        truth: &MotionSequence,
        corr: &Correspondence,
        range: Option<RangeInclusive<usize>>,
    ) -> Result<Self> {
        let find = |names: &[String], name: &str, side: &str| {
            names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::config(format!("correspondence.{side}"), format!("unknown joint `{name}`")))
        };
        let mut pi = Vec::with_capacity(corr.joints.len());
        let mut ti = Vec::with_capacity(corr.joints.len());
        for [p, t] in &corr.joints {
            pi.push(find(&pred.joint_names, p, "pred")?);
            ti.push(find(&truth.joint_names, t, "truth")?);
        }
        let selected: Vec<String> = corr.joints.iter().map(|[p, _]| p.clone()).collect();
        let limbs = corr
            .limbs
            .iter()
            .map(|[a, b]| Ok([find(&selected, a, "limbs")?, find(&selected, b, "limbs")?]))
            .collect::<Result<Vec<_>>>()?;
        let frames: Vec<FramePair> = pred
            .frames
            .iter()
            .filter(|f| range.as_ref().is_none_or(|r| r.contains(&f.frame)))
            .filter_map(|f| {
                let t = truth.frame(f.frame)?;
                Some(FramePair {
                    frame: f.frame,
                    pred: pi.iter().map(|&j| f.positions.0[j]).collect(),
                    truth: ti.iter().map(|&j| t.positions.0[j]).collect(),
                })
            })
            .collect();
        if frames.is_empty() {
            return Err(Error::EmptyRange);
        }
        Self::new(selected, limbs, frames)
    }

    /// Frames of several sets pooled into one; joint selections must match.
    pub fn concat(sets: &[EvalSet]) -> Result<Self> {
        let first = sets.first().ok_or(Error::EmptyRange)?;
        if sets.iter().any(|s| s.joints != first.joints || s.limbs != first.limbs) {
            return Err(Error::config("correspondence", "sets use different joint selections"));
        }
        let frames = sets.iter().flat_map(|s| s.frames.iter().cloned()).collect();
        Self::new(first.joints.clone(), first.limbs.clone(), frames)
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.frames.is_empty() || self.joints.is_empty() {
            return Err(Error::EmptyRange);
        }
        Ok(())
    }

    /// Mean joint error over all selected joints and frames, mm.
    pub fn mpjpe(&self) -> Result<f64> {
        self.check_nonempty()?;
        let total: f64 = self.frames.iter().map(frame_error_sum).sum();
        Ok(1000.0 * total / (self.frames.len() * self.joints.len()) as f64)
    }

    /// `(frame, mean joint error in mm)` for every frame.
    pub fn per_frame_mpjpe(&self) -> Vec<(usize, f64)> {
        let n = self.joints.len().max(1) as f64;
        self.frames.iter().map(|f| (f.frame, 1000.0 * frame_error_sum(f) / n)).collect()
    }

    fn pcp(&self, correct: impl Fn(&FramePair, [usize; 2], f64) -> bool) -> Result<f64> {
        self.check_nonempty()?;
        if self.limbs.is_empty() {
            return Err(Error::EmptyRange);
        }
        let mut hits = 0usize;
        for f in &self.frames {
            for &[a, b] in &self.limbs {
                let len = (f.truth[a] - f.truth[b]).norm();
                if !(len > 0.0) {
                    return Err(Error::DegenerateLimb(format!(
                        "{}-{} at frame {}",
                        self.joints[a], self.joints[b], f.frame
                    )));
                }
                if correct(f, [a, b], len) {
                    hits += 1;
                }
            }
        }
        Ok(100.0 * hits as f64 / (self.frames.len() * self.limbs.len()) as f64)
    }

    /// Percentage of limbs whose both endpoints lie closer than half the
    /// true limb length.
    pub fn pcp_endpoint(&self) -> Result<f64> {
        self.pcp(|f, [a, b], len| {
            (f.pred[a] - f.truth[a]).norm() < 0.5 * len && (f.pred[b] - f.truth[b]).norm() < 0.5 * len
        })
    }

    /// Percentage of limbs whose predicted midpoint lies closer than half the
    /// true limb length to the true midpoint.
    pub fn pcp_midpoint(&self) -> Result<f64> {
        self.pcp(|f, [a, b], len| {
            let pm = (f.pred[a] + f.pred[b]) / 2.0;
            let tm = (f.truth[a] + f.truth[b]) / 2.0;
            (pm - tm).norm() < 0.5 * len
        })
    }

    /// Percentage of joints within `threshold_mm`.
    pub fn pck(&self, threshold_mm: f64) -> Result<f64> {
        if !(threshold_mm > 0.0) {
            return Err(Error::config("pck_threshold_mm", "must be positive"));
        }
        self.check_nonempty()?;
        let hits = self
            .frames
            .iter()
            .flat_map(|f| f.pred.iter().zip(&f.truth))
            .filter(|(p, t)| 1000.0 * (*p - *t).norm() <= threshold_mm)
            .count();
        Ok(100.0 * hits as f64 / (self.frames.len() * self.joints.len()) as f64)
    }

    /// Percentage of frames whose mean joint error is at most `threshold_mm`.
    pub fn success_rate(&self, threshold_mm: f64) -> Result<f64> {
        self.check_nonempty()?;
        let ok = self.per_frame_mpjpe().iter().filter(|(_, e)| *e <= threshold_mm).count();
        Ok(100.0 * ok as f64 / self.frames.len() as f64)
    }

    /// The frames counted as successes by [`Self::success_rate`].
    pub fn successful(&self, threshold_mm: f64) -> Self {
        let errors = self.per_frame_mpjpe();
        let frames = self
            .frames
            .iter()
            .zip(errors)
            .filter(|(_, (_, e))| *e <= threshold_mm)
            .map(|(f, _)| f.clone())
            .collect();
        Self {
            joints: self.joints.clone(),
            limbs: self.limbs.clone(),
            frames,
        }
    }

    pub fn report(&self, pck_threshold_mm: f64, success_threshold_mm: f64) -> Result<MetricsReport> {
        let success_rate = self.success_rate(success_threshold_mm)?;
        let ok = self.successful(success_threshold_mm);
        let conditioned = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::EmptyRange) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(MetricsReport {
            frames: self.frames.len(),
            successful_frames: ok.frames.len(),
            success_rate,
            mpjpe_mm: conditioned(ok.mpjpe())?,
            pcp_endpoint: conditioned(ok.pcp_endpoint())?,
            pcp_midpoint: conditioned(ok.pcp_midpoint())?,
            pck: conditioned(ok.pck(pck_threshold_mm))?,
            pck_threshold_mm,
            success_threshold_mm,
        })
    }
}

fn frame_error_sum(f: &FramePair) -> f64 {
    f.pred.iter().zip(&f.truth).map(|(p, t)| (p - t).norm()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Translation3};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_limb(pred: [Vector3<f64>; 2], truth: [Vector3<f64>; 2]) -> EvalSet {
        EvalSet::new(
            vec!["a".into(), "b".into()],
            vec![[0, 1]],
            vec![FramePair {
                frame: 0,
                pred: pred.to_vec(),
                truth: truth.to_vec(),
            }],
        )
        .unwrap()
    }

    fn offsets(frame_errors_mm: &[&[f64]]) -> EvalSet {
        let n = frame_errors_mm[0].len();
        let frames = frame_errors_mm
            .iter()
            .enumerate()
            .map(|(i, errs)| FramePair {
                frame: i,
                truth: (0..n).map(|j| Vector3::new(j as f64, 0.0, 0.0)).collect(),
                pred: errs
                    .iter()
                    .enumerate()
                    .map(|(j, e)| Vector3::new(j as f64, e / 1000.0, 0.0))
                    .collect(),
            })
            .collect();
        EvalSet::new((0..n).map(|j| format!("j{j}")).collect(), vec![], frames).unwrap()
    }

    #[test]
    fn mpjpe_examples() {
        assert_eq!(offsets(&[&[0.0, 0.0, 0.0]]).mpjpe().unwrap(), 0.0);
        let ten = offsets(&[&[10.0; 4], &[10.0; 4]]).mpjpe().unwrap();
        assert!((ten - 10.0).abs() < 1e-9);
        let mean = offsets(&[&[10.0, 30.0]]).mpjpe().unwrap();
        assert!((mean - 20.0).abs() < 1e-9);
        let empty = EvalSet::new(vec!["a".into()], vec![], vec![]).unwrap();
        assert!(matches!(empty.mpjpe(), Err(Error::EmptyRange)));
    }

    #[test]
    fn pcp_endpoint_examples() {
        let a = Vector3::zeros();
        let b = Vector3::new(0.0, 0.0, 0.4);
        assert_eq!(one_limb([a, b], [a, b]).pcp_endpoint().unwrap(), 100.0);
        let off = Vector3::new(0.6 * 0.4, 0.0, 0.0);
        assert_eq!(one_limb([a + off, b], [a, b]).pcp_endpoint().unwrap(), 0.0);
        // exactly half the length is not "less than half"
        let half = Vector3::new(0.25, 0.0, 0.0);
        let t = [Vector3::zeros(), Vector3::new(0.0, 0.0, 0.5)];
        assert_eq!(one_limb([t[0] + half, t[1]], t).pcp_endpoint().unwrap(), 0.0);
        assert!(matches!(one_limb([a, a], [a, a]).pcp_endpoint(), Err(Error::DegenerateLimb(_))));
    }

    #[test]
    fn pcp_midpoint_examples() {
        let a = Vector3::zeros();
        let b = Vector3::new(0.0, 0.0, 0.4);
        assert_eq!(one_limb([a, b], [a, b]).pcp_midpoint().unwrap(), 100.0);
        let d = Vector3::new(0.3, 0.0, 0.0);
        let anti = one_limb([a + d, b - d], [a, b]);
        assert_eq!(anti.pcp_midpoint().unwrap(), 100.0);
        assert_eq!(anti.pcp_endpoint().unwrap(), 0.0);
        let shift = Vector3::new(0.6 * 0.4, 0.0, 0.0);
        assert_eq!(one_limb([a + shift, b + shift], [a, b]).pcp_midpoint().unwrap(), 0.0);
    }

    #[test]
    fn pck_examples() {
        assert_eq!(offsets(&[&[0.0; 4]]).pck(50.0).unwrap(), 100.0);
        assert_eq!(offsets(&[&[60.0; 4]]).pck(50.0).unwrap(), 0.0);
        assert_eq!(offsets(&[&[40.0, 60.0, 40.0, 60.0]]).pck(50.0).unwrap(), 50.0);
        assert_eq!(offsets(&[&[50.0]]).pck(50.0).unwrap(), 100.0);
        assert!(offsets(&[&[0.0]]).pck(0.0).is_err());
    }

    #[test]
    fn success_rate_examples() {
        assert_eq!(offsets(&[&[0.0; 3], &[0.0; 3], &[0.0; 3], &[0.0; 3]]).success_rate(150.0).unwrap(), 100.0);
        let one_bad = offsets(&[&[0.0, 0.0], &[200.0, 200.0], &[0.0, 0.0], &[10.0, 10.0]]);
        assert_eq!(one_bad.success_rate(150.0).unwrap(), 75.0);
        assert_eq!(offsets(&[&[150.0, 150.0]]).success_rate(SUCCESS_THRESHOLD_MM).unwrap(), 100.0);
        assert_eq!(offsets(&[&[150.0, 150.000001]]).success_rate(SUCCESS_THRESHOLD_MM).unwrap(), 0.0);
    }

    #[test]
    fn report_conditions_on_success() {
        let set = offsets(&[&[0.0, 0.0], &[200.0, 200.0], &[20.0, 20.0], &[10.0, 10.0]]);
        let r = set.report(50.0, 150.0).unwrap();
        assert_eq!(r.frames, 4);
        assert_eq!(r.successful_frames, 3);
        assert_eq!(r.success_rate, 75.0);
        assert!((r.mpjpe_mm.unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(r.pck, Some(100.0));
        assert_eq!(r.pcp_endpoint, None, "no limbs selected");
    }

    #[test]
    fn sequences_align_by_frame_and_name() {
        use crate::motion::PoseFrame;
        use crate::skeleton::{JointAngles, SkeletonModel};
        let m = SkeletonModel::standard();
        let mut a = MotionSequence::new(0, 60.0, &m);
        let mut b = MotionSequence::new(0, 60.0, &m);
        let q = JointAngles::zeros(m.num_dofs());
        let p = m.forward_kinematics(&q);
        let frame = |f: usize| PoseFrame {
            frame: f,
            angles: q.clone(),
            positions: p.clone(),
            weights: vec![1.0; 17],
            cameras: vec![],
        };
        for f in [0, 1, 2, 5] {
            a.push(frame(f));
        }
        for f in [2, 3, 4, 5] {
            b.push(frame(f));
        }
        let set = EvalSet::align(&a, &b, &Correspondence::keypoints(), None).unwrap();
        assert_eq!(set.frames.iter().map(|f| f.frame).collect::<Vec<_>>(), vec![2, 5]);
        assert_eq!(set.joints.len(), 17);
        assert_eq!(set.limbs.len(), 8);
        let r = set.report(50.0, 150.0).unwrap();
        assert_eq!((r.mpjpe_mm, r.pcp_endpoint, r.pck, r.success_rate), (Some(0.0), Some(100.0), Some(100.0), 100.0));
        assert_eq!(EvalSet::align(&a, &b, &Correspondence::body(), None).unwrap().joints.len(), 12);
        assert!(matches!(
            EvalSet::align(&a, &b, &Correspondence::keypoints(), Some(3..=4)),
            Err(Error::EmptyRange)
        ));
    }

    fn random_set(rng: &mut ChaCha8Rng, frames: usize, noise: f64) -> EvalSet {
        let joints: Vec<String> = (0..6).map(|j| format!("j{j}")).collect();
        let limbs = vec![[0, 1], [1, 2], [3, 4], [4, 5]];
        let mut r = || Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let frames = (0..frames)
            .map(|f| {
                let truth: Vec<Vector3<f64>> = (0..6).map(|_| r()).collect();
                let pred = truth.iter().map(|t| t + r() * noise).collect();
                FramePair { frame: f, pred, truth }
            })
            .collect();
        EvalSet::new(joints, limbs, frames).unwrap()
    }

    #[test]
    fn midpoint_pcp_dominates_endpoint_pcp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let noise = rng.random_range(0.0..1.0);
            let set = random_set(&mut rng, 3, noise);
            assert!(set.pcp_midpoint().unwrap() >= set.pcp_endpoint().unwrap());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn metrics_are_rigidly_invariant(seed in 0u64..10_000, noise in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = random_set(&mut rng, 4, noise);
            let rot = Rotation3::from_euler_angles(rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5), rng.random_range(-3.0..3.0));
            let tr = Translation3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let mv = |v: &Vector3<f64>| tr * rot * v;
            let mut moved = set.clone();
            for f in &mut moved.frames {
                f.pred = f.pred.iter().map(mv).collect();
                f.truth = f.truth.iter().map(mv).collect();
            }
            prop_assert!((set.mpjpe().unwrap() - moved.mpjpe().unwrap()).abs() < 1e-9);
            prop_assert!((set.pcp_endpoint().unwrap() - moved.pcp_endpoint().unwrap()).abs() < 1e-9);
            prop_assert!((set.pcp_midpoint().unwrap() - moved.pcp_midpoint().unwrap()).abs() < 1e-9);
            prop_assert!((set.pck(300.0).unwrap() - moved.pck(300.0).unwrap()).abs() < 1e-9);
            prop_assert!((set.success_rate(400.0).unwrap() - moved.success_rate(400.0).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn percentages_are_bounded(seed in 0u64..10_000, noise in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = random_set(&mut rng, 5, noise);
            for v in [set.pcp_endpoint().unwrap(), set.pcp_midpoint().unwrap(), set.pck(100.0).unwrap(), set.success_rate(150.0).unwrap()] {
                prop_assert!((0.0..=100.0).contains(&v));
            }
            prop_assert!(set.mpjpe().unwrap() >= 0.0);
            prop_assert!(set.pcp_midpoint().unwrap() >= set.pcp_endpoint().unwrap());
        }
    }
}
