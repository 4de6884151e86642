//! Built-in synthetic studio: camera rig, performers and ground-truth motion.
//!
//! Every rotational DoF follows a sum of two sinusoids with random
//! frequencies and phases around an anatomically plausible center. The spine,
//! chest and clavicle channels are shifted so they start at exactly zero,
//! matching the unbent spine and lowered shoulders assumed at initialization.

use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, CameraRig};
use crate::error::{read_json, write_json, Error, Result};
use crate::motion::{MotionSequence, PoseFrame};
use crate::pcm::{generate_synthetic, PcmSet, SyntheticPcmConfig};
use crate::skeleton::{DofKind, JointAngles, JointPositions, SkeletonModel};

pub const STUDIO_RESOLUTION: (u32, u32) = (1920, 1200);

const BUNDLED_SCENE: &str = include_str!("../data/scene_v1.json");

/// Eight cameras in four corner viewpoints. Each viewpoint holds a wide
/// camera aimed at the stage center and a longer lens beside it aimed at
/// the near half of the stage.
pub fn studio_rig() -> CameraRig {
    let corners = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)];
    let mut cameras = Vec::with_capacity(8);
    let mut viewpoints = Vec::with_capacity(4);
    for (v, &(sx, sy)) in corners.iter().enumerate() {
        let center = Vector3::new(5.5 * sx, 5.0 * sy, 2.8);
        let wide = CameraModel::look_at(2 * v, 1150.0, STUDIO_RESOLUTION, center, Vector3::new(0.0, 0.0, 1.0))
            .expect("studio camera is well formed");
        let side = Vector3::new(-sy, sx, 0.0) * 0.25;
        let aim = Vector3::new(0.6 * sx, 0.6 * sy, 0.9);
        let tele = CameraModel::look_at(2 * v + 1, 1500.0, STUDIO_RESOLUTION, center + side, aim)
            .expect("studio camera is well formed");
        cameras.push(wide);
        cameras.push(tele);
        viewpoints.push(vec![2 * v, 2 * v + 1]);
    }
    CameraRig::new(cameras, viewpoints).expect("studio rig is well formed")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionConfig {
    pub min_frequency_hz: f64,
    pub max_frequency_hz: f64,
    /// Multiplies every joint-angle amplitude.
    pub amplitude_scale: f64,
    /// Largest horizontal excursion of the pelvis from its home position.
    pub root_wander_m: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            min_frequency_hz: 0.1,
            max_frequency_hz: 0.8,
            amplitude_scale: 1.0,
            root_wander_m: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonSpec {
    /// Scale of every link not listed in `limb_lengths`.
    pub trunk_scale: f64,
    /// Upper arm, forearm, thigh and shank length in meters.
    pub limb_lengths: [f64; 4],
    /// Home position of the pelvis on the floor plane.
    pub position: [f64; 2],
    /// Facing direction, radians about +z; 0 faces +y.
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub version: u32,
    pub frames: usize,
    pub frame_rate: f64,
    /// Drives both the motion and the confidence-map noise; `pcm.seed` is
    /// replaced by it.
    pub seed: u64,
    #[serde(default)]
    pub motion: MotionConfig,
    pub persons: Vec<PersonSpec>,
    #[serde(default)]
    pub pcm: SyntheticPcmConfig,
}

impl SceneConfig {
    /// Five performers, ten seconds at 60 Hz, exact confidence maps.
    pub fn bundled() -> Self {
        serde_json::from_str(BUNDLED_SCENE).expect("bundled scene config parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::config("version", format!("unsupported scene version {}", self.version)));
        }
        if self.frames == 0 {
            return Err(Error::config("frames", "must be positive"));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::config("frame_rate", "must be positive"));
        }
        let m = &self.motion;
        if !(m.min_frequency_hz > 0.0 && m.min_frequency_hz <= m.max_frequency_hz && m.max_frequency_hz < self.frame_rate / 2.0)
        {
            return Err(Error::config("motion.max_frequency_hz", "need 0 < min <= max < frame_rate / 2"));
        }
        if !(m.amplitude_scale >= 0.0) || !(m.root_wander_m >= 0.0) {
            return Err(Error::config("motion.amplitude_scale", "must be non-negative"));
        }
        if self.persons.is_empty() {
            return Err(Error::config("persons", "at least one person is required"));
        }
        for (i, p) in self.persons.iter().enumerate() {
            if !(p.trunk_scale > 0.0) || p.limb_lengths.iter().any(|l| !(*l > 0.0)) {
                return Err(Error::config(format!("persons[{i}]"), "scale and limb lengths must be positive"));
            }
            if !p.position.iter().chain([&p.heading]).all(|v| v.is_finite()) {
                return Err(Error::config(format!("persons[{i}].position"), "must be finite"));
            }
        }
        self.pcm.validate()
    }

    /// The confidence-map settings with the scene seed applied.
    pub fn pcm_config(&self) -> SyntheticPcmConfig {
        SyntheticPcmConfig {
            seed: self.seed,
            ..self.pcm.clone()
        }
    }
}

/// One DoF's trajectory: `center + amplitude * (0.6 sin(w0 t + p0) + 0.4 sin(w1 t + p1))`,
/// minus its value at `t = 0` when anchored.
#[derive(Debug, Clone, Copy)]
struct Channel {
    dof: usize,
    center: f64,
    amplitude: f64,
    anchored: bool,
    omega: [f64; 2],
    phase: [f64; 2],
}

impl Channel {
    fn wave(&self, t: f64) -> f64 {
        0.6 * (self.omega[0] * t + self.phase[0]).sin() + 0.4 * (self.omega[1] * t + self.phase[1]).sin()
    }

    fn value(&self, t: f64) -> f64 {
        let base = if self.anchored { self.wave(0.0) } else { 0.0 };
        self.center + self.amplitude * (self.wave(t) - base)
    }
}

/// `(joint, axis, center, amplitude, anchored)` for the left side and the
/// midline. Right-side ball joints mirror the y and z centers.
const CHANNELS: &[(&str, usize, f64, f64, bool)] = &[
    ("spine", 0, 0.0, 0.12, true),
    ("spine", 1, 0.0, 0.08, true),
    ("spine", 2, 0.0, 0.15, true),
    ("chest", 0, 0.0, 0.08, true),
    ("chest", 1, 0.0, 0.06, true),
    ("chest", 2, 0.0, 0.12, true),
    ("neck", 0, 0.1, 0.2, false),
    ("neck", 1, 0.0, 0.1, false),
    ("neck", 2, 0.0, 0.4, false),
    ("head", 0, 0.0, 0.15, false),
    ("clavicle", 0, 0.0, 0.08, true),
    ("shoulder", 0, 0.3, 0.5, false),
    ("shoulder", 1, -0.3, 0.2, false),
    ("shoulder", 2, 0.0, 0.3, false),
    ("elbow", 0, 0.8, 0.4, false),
    ("hip", 0, 0.15, 0.3, false),
    ("hip", 1, -0.05, 0.08, false),
    ("hip", 2, 0.0, 0.15, false),
    ("knee", 0, 0.4, 0.3, false),
    ("ankle", 0, 0.0, 0.15, false),
    ("ankle", 1, 0.0, 0.05, false),
    ("ankle", 2, 0.0, 0.05, false),
];

/// Frequency multiplier of the pelvis travel and heading: people drift
/// across the floor far more slowly than they move their limbs.
const ROOT_RATE: f64 = 0.25;

/// A generated scene: rig, personalized skeletons and the true motion of
/// every performer at every frame.
#[derive(Debug, Clone)]
pub struct Scene {
    config: SceneConfig,
    rig: CameraRig,
    models: Vec<SkeletonModel>,
    angles: Vec<Vec<JointAngles>>,
    positions: Vec<Vec<JointPositions>>,
}

impl Scene {
    /// Scene in the studio rig with the standard skeleton.
    pub fn studio(config: SceneConfig) -> Result<Self> {
        Self::new(config, studio_rig(), &SkeletonModel::standard())
    }

    pub fn new(config: SceneConfig, rig: CameraRig, template: &SkeletonModel) -> Result<Self> {
        config.validate()?;
        template.validate_standard()?;
        let mut models = Vec::with_capacity(config.persons.len());
        let mut angles = Vec::with_capacity(config.persons.len());
        let mut positions = Vec::with_capacity(config.persons.len());
        for (i, spec) in config.persons.iter().enumerate() {
            let model = template.personalize(spec.trunk_scale, &spec.limb_lengths)?;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6d6f_7469_6f6e);
            rng.set_stream(i as u64);
            let q = person_motion(&model, spec, &config, &mut rng);
            positions.push(q.iter().map(|q| model.forward_kinematics(q)).collect());
            angles.push(q);
            models.push(model);
        }
        Ok(Self {
            config,
            rig,
            models,
            angles,
            positions,
        })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.config
    }

    pub fn rig(&self) -> &CameraRig {
        &self.rig
    }

    pub fn num_frames(&self) -> usize {
        self.config.frames
    }

    pub fn num_persons(&self) -> usize {
        self.models.len()
    }

    pub fn model(&self, person: usize) -> &SkeletonModel {
        &self.models[person]
    }

    pub fn angles(&self, person: usize, frame: usize) -> &JointAngles {
        &self.angles[person][frame]
    }

    pub fn positions(&self, person: usize, frame: usize) -> &JointPositions {
        &self.positions[person][frame]
    }

    /// True keypoint positions, `[person][keypoint]`.
    pub fn keypoints(&self, frame: usize) -> Vec<Vec<Vector3<f64>>> {
        self.models
            .iter()
            .zip(&self.positions)
            .map(|(m, p)| m.keypoint_joints().iter().map(|&j| p[frame].0[j]).collect())
            .collect()
    }

    pub fn pcm(&self, frame: usize) -> Result<PcmSet> {
        generate_synthetic(&self.config.pcm_config(), &self.rig, &self.keypoints(frame), frame)
    }

    /// Ground-truth sequence of one person, with unit weights and no
    /// camera selection.
    pub fn truth(&self, person: usize) -> MotionSequence {
        let model = &self.models[person];
        let mut seq = MotionSequence::new(person, self.config.frame_rate, model);
        for frame in 0..self.config.frames {
            seq.push(PoseFrame {
                frame,
                angles: self.angles[person][frame].clone(),
                positions: self.positions[person][frame].clone(),
                weights: vec![1.0; model.num_keypoints()],
                cameras: vec![None; self.rig.num_viewpoints()],
            });
        }
        seq
    }
}

fn person_motion(model: &SkeletonModel, spec: &PersonSpec, cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<JointAngles> {
    let m = &cfg.motion;
    let mut channel = |dof: usize, center: f64, amplitude: f64, anchored: bool, rate: f64| {
        let mut draw = || TAU * rate * rng.random_range(m.min_frequency_hz..=m.max_frequency_hz);
        let omega = [draw(), draw()];
        let phase = [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)];
        Channel {
            dof,
            center,
            amplitude,
            anchored,
            omega,
            phase,
        }
    };

    let leg = spec.limb_lengths[2] + spec.limb_lengths[3];
    let standing = (0.06 + 0.07) * spec.trunk_scale + leg * 0.25f64.cos();
    let mut channels = vec![
        channel(0, spec.position[0], m.root_wander_m, false, ROOT_RATE),
        channel(1, spec.position[1], m.root_wander_m, false, ROOT_RATE),
        channel(2, standing, 0.02, false, 1.0),
        channel(3, 0.0, 0.04, false, 1.0),
        channel(4, 0.0, 0.04, false, 1.0),
        channel(5, spec.heading, 0.4, false, ROOT_RATE),
    ];
    for (j, joint) in model.joints().iter().enumerate() {
        let (side, base) = match joint.name.split_once('_') {
            Some(("l", b)) => (1.0, b),
            Some(("r", b)) => (-1.0, b),
            _ => (1.0, joint.name.as_str()),
        };
        let mirrored = matches!(joint.kind, DofKind::Ball);
        for &(name, axis, center, amplitude, anchored) in CHANNELS.iter().filter(|c| c.0 == base) {
            let center = if mirrored && axis > 0 { side * center } else { center };
            channels.push(channel(
                model.dof_start(j) + axis,
                center,
                amplitude * m.amplitude_scale,
                anchored,
                1.0,
            ));
            debug_assert!(axis < joint.kind.count(), "{name} has no axis {axis}");
        }
    }

    (0..cfg.frames)
        .map(|f| {
            let t = f as f64 / cfg.frame_rate;
            let mut q = DVector::zeros(model.num_dofs());
            for c in &channels {
                q[c.dof] = c.value(t);
            }
            model.clamp_to_rom(&JointAngles(q))
        })
        .collect()
}
