//! Kinematic tree: forward kinematics, geometric Jacobian, range-of-motion
//! bounds and the keypoint correspondence.
//!
//! Each joint carries the rotational degrees of freedom that move its
//! descendants. A joint's own position depends only on its ancestors. The
//! root joint may additionally carry a free translation. Ball joints use
//! intrinsic Euler angles in x-y-z order, `R = Rx(a) Ry(b) Rz(c)`.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json, Error, Result};

pub const SKELETON_CONFIG_VERSION: u32 = 1;
pub const STANDARD_JOINTS: usize = 29;
pub const STANDARD_DOFS: usize = 40;
pub const STANDARD_KEYPOINTS: usize = 17;

const BUNDLED_CONFIG: &str = include_str!("../data/skeleton_v1.json");

#[derive(Debug, Clone, PartialEq)]
pub enum DofKind {
    /// Root translation (x, y, z) followed by x-y-z Euler rotation.
    Free6,
    /// x-y-z Euler rotation.
    Ball,
    Hinge(Unit<Vector3<f64>>),
    Fixed,
}

impl DofKind {
    pub fn count(&self) -> usize {
        match self {
            DofKind::Free6 => 6,
            DofKind::Ball => 3,
            DofKind::Hinge(_) => 1,
            DofKind::Fixed => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    pub kind: DofKind,
    /// Rest-pose offset from the parent joint, in the parent's frame.
    pub offset: Vector3<f64>,
    /// Bounds per DoF of this joint; translations are unbounded.
    pub rom: Vec<(f64, f64)>,
}

/// Joint angle vector: root translation in meters, rotations in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointAngles(pub DVector<f64>);

/// World-frame joint positions in meters, one per joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPositions(pub Vec<Vector3<f64>>);

impl JointAngles {
    pub fn zeros(n: usize) -> Self {
        JointAngles(DVector::zeros(n))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl JointPositions {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Vector3<f64>] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonModel {
    pub name: String,
    joints: Vec<Joint>,
    dof_start: Vec<usize>,
    num_dofs: usize,
    keypoint_names: Vec<String>,
    keypoint_joints: Vec<usize>,
    upper_body_keypoints: Vec<usize>,
    neck: Option<usize>,
    torso: Option<usize>,
    mirror: Option<Vec<usize>>,
    measured_links: Vec<[usize; 2]>,
    trunk: Option<([usize; 2], [usize; 2])>,
    rom_reference: Option<String>,
}

/// Global rotation of each joint's frame and the world axis of every DoF.
struct Kinematics {
    positions: Vec<Vector3<f64>>,
    /// `(dof index, joint owning it, world axis)`; translations have axis = unit basis.
    rotation_axes: Vec<(usize, usize, Vector3<f64>)>,
}

fn euler_xyz(a: f64, b: f64, c: f64) -> Matrix3<f64> {
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), a);
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), b);
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), c);
    (rx * ry * rz).into_inner()
}

impl SkeletonModel {
    /// The bundled 29-joint, 40-DoF, 17-keypoint model.
    pub fn standard() -> Self {
        let cfg: SkeletonConfig = serde_json::from_str(BUNDLED_CONFIG).expect("bundled skeleton config parses");
        let model = Self::from_config(&cfg).expect("bundled skeleton config is valid");
        model.validate_standard().expect("bundled skeleton is standard");
        model
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: SkeletonConfig = read_json(path)?;
        Self::from_config(&cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_config())
    }

    pub fn from_config(cfg: &SkeletonConfig) -> Result<Self> {
        if cfg.version != SKELETON_CONFIG_VERSION {
            return Err(Error::config(
                "version",
                format!("skeleton config version {} unsupported (expected {})", cfg.version, SKELETON_CONFIG_VERSION),
            ));
        }
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut joints = Vec::with_capacity(cfg.joints.len());
        for (i, jc) in cfg.joints.iter().enumerate() {
            let field = |f: &str| format!("joints[{i}].{f}");
            if index.insert(jc.name.as_str(), i).is_some() {
                return Err(Error::config(field("name"), format!("duplicate joint `{}`", jc.name)));
            }
            let parent = match &jc.parent {
                None => None,
                Some(p) => Some(*index.get(p.as_str()).ok_or_else(|| {
                    Error::config(field("parent"), format!("parent `{p}` must be declared before `{}`", jc.name))
                })?),
            };
            let kind = match jc.dof.as_str() {
                "free6" => DofKind::Free6,
                "ball" => {
                    if jc.axis_order.as_deref().unwrap_or("xyz") != "xyz" {
                        return Err(Error::config(field("axis_order"), "only `xyz` is supported"));
                    }
                    DofKind::Ball
                }
                "hinge" => {
                    let axis = jc.axis.ok_or_else(|| Error::config(field("axis"), "hinge requires an axis"))?;
                    let axis = Unit::try_new(Vector3::from(axis), 1e-12)
                        .ok_or_else(|| Error::config(field("axis"), "zero hinge axis"))?;
                    DofKind::Hinge(axis)
                }
                "fixed" => DofKind::Fixed,
                other => return Err(Error::config(field("dof"), format!("unknown dof kind `{other}`"))),
            };
            if matches!(kind, DofKind::Free6) && parent.is_some() {
                return Err(Error::config(field("dof"), "free6 is only allowed on the root"));
            }
            let n_rot = match kind {
                DofKind::Free6 => 3,
                ref k => k.count(),
            };
            if jc.rom.len() != n_rot {
                return Err(Error::config(field("rom"), format!("expected {n_rot} bounds, got {}", jc.rom.len())));
            }
            let mut rom = Vec::with_capacity(kind.count());
            if matches!(kind, DofKind::Free6) {
                rom.extend([(f64::NEG_INFINITY, f64::INFINITY); 3]);
            }
            for (d, b) in jc.rom.iter().enumerate() {
                let lo = b[0].unwrap_or(f64::NEG_INFINITY);
                let hi = b[1].unwrap_or(f64::INFINITY);
                if !(lo < hi) {
                    return Err(Error::config(format!("joints[{i}].rom[{d}]"), "min must be below max"));
                }
                rom.push((lo, hi));
            }
            let offset = Vector3::from(jc.offset);
            if parent.is_some() && !(offset.norm() > 0.0) {
                return Err(Error::config(field("offset"), "link length must be positive"));
            }
            joints.push(Joint {
                name: jc.name.clone(),
                parent,
                kind,
                offset,
                rom,
            });
        }
        if joints.iter().filter(|j| j.parent.is_none()).count() != 1 || joints.first().is_some_and(|j| j.parent.is_some()) {
            return Err(Error::config("joints", "exactly one root, declared first"));
        }

        let lookup = |field: &str, name: &str| -> Result<usize> {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::config(field, format!("unknown joint `{name}`")))
        };
        let mut keypoint_joints = Vec::new();
        let mut keypoint_names = Vec::new();
        for (k, kp) in cfg.keypoints.iter().enumerate() {
            let j = lookup(&format!("keypoints[{k}].joint"), &kp.joint)?;
            if keypoint_joints.contains(&j) {
                return Err(Error::config(format!("keypoints[{k}]"), "keypoint map must be injective"));
            }
            keypoint_joints.push(j);
            keypoint_names.push(kp.name.clone());
        }
        let upper_body_keypoints = cfg
            .upper_body_keypoints
            .iter()
            .map(|name| {
                keypoint_names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| Error::config("upper_body_keypoints", format!("unknown keypoint `{name}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let neck = cfg.neck.as_deref().map(|n| lookup("neck", n)).transpose()?;
        let torso = cfg.torso.as_deref().map(|n| lookup("torso", n)).transpose()?;

        let mirror = if cfg.mirror_pairs.is_empty() {
            None
        } else {
            let mut m: Vec<usize> = (0..joints.len()).collect();
            for (p, [a, b]) in cfg.mirror_pairs.iter().enumerate() {
                let a = lookup(&format!("mirror_pairs[{p}]"), a)?;
                let b = lookup(&format!("mirror_pairs[{p}]"), b)?;
                m[a] = b;
                m[b] = a;
            }
            Some(m)
        };
        let measured_links = cfg
            .measured_links
            .iter()
            .enumerate()
            .map(|(p, [a, b])| {
                let f = format!("measured_links[{p}]");
                Ok([lookup(&f, a)?, lookup(&f, b)?])
            })
            .collect::<Result<Vec<_>>>()?;
        let trunk = cfg
            .trunk
            .as_ref()
            .map(|t| -> Result<_> {
                Ok((
                    [lookup("trunk.shoulders", &t.shoulders[0])?, lookup("trunk.shoulders", &t.shoulders[1])?],
                    [lookup("trunk.hips", &t.hips[0])?, lookup("trunk.hips", &t.hips[1])?],
                ))
            })
            .transpose()?;

        let mut dof_start = Vec::with_capacity(joints.len());
        let mut n = 0;
        for j in &joints {
            dof_start.push(n);
            n += j.kind.count();
        }
        let model = Self {
            name: cfg.name.clone(),
            joints,
            dof_start,
            num_dofs: n,
            keypoint_names,
            keypoint_joints,
            upper_body_keypoints,
            neck,
            torso,
            mirror,
            measured_links,
            trunk,
            rom_reference: cfg.rom_reference.clone(),
        };
        model.validate_symmetry()?;
        Ok(model)
    }

    pub fn to_config(&self) -> SkeletonConfig {
        let name = |i: usize| self.joints[i].name.clone();
        let joints = self
            .joints
            .iter()
            .map(|j| {
                let bound = |v: f64| v.is_finite().then_some(v);
                let rot_bounds = match j.kind {
                    DofKind::Free6 => &j.rom[3..],
                    _ => &j.rom[..],
                };
                JointConfig {
                    name: j.name.clone(),
                    parent: j.parent.map(name),
                    dof: match j.kind {
                        DofKind::Free6 => "free6",
                        DofKind::Ball => "ball",
                        DofKind::Hinge(_) => "hinge",
                        DofKind::Fixed => "fixed",
                    }
                    .to_string(),
                    axis: match &j.kind {
                        DofKind::Hinge(a) => Some([a.x, a.y, a.z]),
                        _ => None,
                    },
                    axis_order: matches!(j.kind, DofKind::Ball).then(|| "xyz".to_string()),
                    offset: [j.offset.x, j.offset.y, j.offset.z],
                    rom: rot_bounds.iter().map(|&(lo, hi)| [bound(lo), bound(hi)]).collect(),
                }
            })
            .collect();
        let mirror_pairs = self
            .mirror
            .as_ref()
            .map(|m| {
                m.iter()
                    .enumerate()
                    .filter(|(a, b)| a < *b)
                    .map(|(a, &b)| [name(a), name(b)])
                    .collect()
            })
            .unwrap_or_default();
        SkeletonConfig {
            version: SKELETON_CONFIG_VERSION,
            name: self.name.clone(),
            neck: self.neck.map(name),
            torso: self.torso.map(name),
            joints,
            keypoints: self
                .keypoint_names
                .iter()
                .zip(&self.keypoint_joints)
                .map(|(n, &j)| KeypointConfig {
                    name: n.clone(),
                    joint: name(j),
                })
                .collect(),
            upper_body_keypoints: self
                .upper_body_keypoints
                .iter()
                .map(|&k| self.keypoint_names[k].clone())
                .collect(),
            mirror_pairs,
            measured_links: self.measured_links.iter().map(|&[a, b]| [name(a), name(b)]).collect(),
            trunk: self.trunk.map(|(s, h)| TrunkConfig {
                shoulders: [name(s[0]), name(s[1])],
                hips: [name(h[0]), name(h[1])],
            }),
            rom_reference: self.rom_reference.clone(),
        }
    }

    /// Checks the structural invariants of the full-body model.
    pub fn validate_standard(&self) -> Result<()> {
        if self.joints.len() != STANDARD_JOINTS {
            return Err(Error::config("joints", format!("expected {STANDARD_JOINTS} joints, got {}", self.joints.len())));
        }
        if self.num_dofs != STANDARD_DOFS {
            return Err(Error::config("joints", format!("expected {STANDARD_DOFS} DoF, got {}", self.num_dofs)));
        }
        if self.keypoint_joints.len() != STANDARD_KEYPOINTS {
            return Err(Error::config("keypoints", format!("expected {STANDARD_KEYPOINTS} keypoints")));
        }
        if self.neck.is_none() || self.torso.is_none() {
            return Err(Error::config("neck", "neck and torso joints are required"));
        }
        if self.mirror.is_none() {
            return Err(Error::config("mirror_pairs", "left/right pairs are required"));
        }
        Ok(())
    }

    /// Mirrored joints must have mirrored offsets, mirrored hinge axes and
    /// ranges that map onto each other under reflection across x = 0.
    fn validate_symmetry(&self) -> Result<()> {
        let Some(mirror) = &self.mirror else { return Ok(()) };
        let reflect = |v: &Vector3<f64>| Vector3::new(-v.x, v.y, v.z);
        for (a, &b) in mirror.iter().enumerate() {
            let (ja, jb) = (&self.joints[a], &self.joints[b]);
            let field = format!("mirror_pairs[{}]", ja.name);
            if mirror[b] != a || ja.parent.map(|p| mirror[p]) != jb.parent {
                return Err(Error::config(field, "mirror map is not a consistent involution"));
            }
            if reflect(&ja.offset) != jb.offset {
                return Err(Error::config(field, "left/right links are not symmetric"));
            }
            let ok = match (&ja.kind, &jb.kind) {
                (DofKind::Fixed, DofKind::Fixed) => true,
                (DofKind::Hinge(x), DofKind::Hinge(y)) => {
                    (-reflect(x) - y.into_inner()).norm() < 1e-12 && ja.rom == jb.rom
                }
                (DofKind::Ball, DofKind::Ball) | (DofKind::Free6, DofKind::Free6) => {
                    let s = if matches!(ja.kind, DofKind::Free6) { 3 } else { 0 };
                    let (ra, rb) = (&ja.rom[s..], &jb.rom[s..]);
                    ra[0] == rb[0] && ra[1] == (-rb[1].1, -rb[1].0) && ra[2] == (-rb[2].1, -rb[2].0)
                }
                _ => false,
            };
            if !ok {
                return Err(Error::config(field, "left/right DoF specs do not mirror"));
            }
        }
        Ok(())
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn num_dofs(&self) -> usize {
        self.num_dofs
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoint_joints.len()
    }

    pub fn keypoint_joints(&self) -> &[usize] {
        &self.keypoint_joints
    }

    pub fn keypoint_names(&self) -> &[String] {
        &self.keypoint_names
    }

    pub fn upper_body_keypoints(&self) -> &[usize] {
        &self.upper_body_keypoints
    }

    pub fn neck(&self) -> Option<usize> {
        self.neck
    }

    pub fn torso(&self) -> Option<usize> {
        self.torso
    }

    pub fn measured_links(&self) -> &[[usize; 2]] {
        &self.measured_links
    }

    pub fn trunk(&self) -> Option<([usize; 2], [usize; 2])> {
        self.trunk
    }

    pub fn mirror_map(&self) -> Option<&[usize]> {
        self.mirror.as_deref()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn keypoint_index(&self, name: &str) -> Option<usize> {
        self.keypoint_names.iter().position(|n| n == name)
    }

    /// Index of the first DoF owned by `joint`.
    pub fn dof_start(&self, joint: usize) -> usize {
        self.dof_start[joint]
    }

    /// Joint owning each DoF.
    pub fn dof_owner(&self) -> Vec<usize> {
        self.joints
            .iter()
            .enumerate()
            .flat_map(|(j, joint)| std::iter::repeat_n(j, joint.kind.count()))
            .collect()
    }

    /// Per-DoF `(min, max)`; translations are `(-inf, inf)`.
    pub fn rom_bounds(&self) -> Vec<(f64, f64)> {
        self.joints.iter().flat_map(|j| j.rom.iter().copied()).collect()
    }

    /// True for DoFs that are root translations.
    pub fn translation_mask(&self) -> Vec<bool> {
        self.joints
            .iter()
            .flat_map(|j| {
                let t = matches!(j.kind, DofKind::Free6);
                (0..j.kind.count()).map(move |d| t && d < 3)
            })
            .collect()
    }

    pub fn link_length(&self, joint: usize) -> f64 {
        self.joints[joint].offset.norm()
    }

    pub fn link_lengths(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.offset.norm()).collect()
    }

    /// `true` if `ancestor` lies on the path from the root to `joint` (inclusive).
    pub fn is_ancestor(&self, ancestor: usize, joint: usize) -> bool {
        let mut cur = Some(joint);
        while let Some(j) = cur {
            if j == ancestor {
                return true;
            }
            cur = self.joints[j].parent;
        }
        false
    }

    fn check_len(&self, q: &JointAngles) {
        assert_eq!(q.len(), self.num_dofs, "joint angle vector has wrong length");
    }

    fn kinematics(&self, q: &JointAngles, with_axes: bool) -> Kinematics {
        self.check_len(q);
        let q = &q.0;
        let n = self.joints.len();
        let mut positions = vec![Vector3::zeros(); n];
        let mut frames = vec![Matrix3::identity(); n];
        let mut rotation_axes = Vec::with_capacity(if with_axes { self.num_dofs } else { 0 });
        for (j, joint) in self.joints.iter().enumerate() {
            let s = self.dof_start[j];
            let (parent_frame, parent_pos) = match joint.parent {
                Some(p) => (frames[p], positions[p]),
                None => (Matrix3::identity(), Vector3::zeros()),
            };
            let mut pos = parent_pos + parent_frame * joint.offset;
            let frame = match &joint.kind {
                DofKind::Fixed => parent_frame,
                DofKind::Hinge(axis) => {
                    if with_axes {
                        rotation_axes.push((s, j, parent_frame * axis.into_inner()));
                    }
                    parent_frame * Rotation3::from_axis_angle(axis, q[s]).into_inner()
                }
                DofKind::Ball | DofKind::Free6 => {
                    let r0 = if matches!(joint.kind, DofKind::Free6) {
                        pos += Vector3::new(q[s], q[s + 1], q[s + 2]);
                        if with_axes {
                            for d in 0..3 {
                                rotation_axes.push((s + d, j, Vector3::ith(d, 1.0)));
                            }
                        }
                        s + 3
                    } else {
                        s
                    };
                    let (a, b, c) = (q[r0], q[r0 + 1], q[r0 + 2]);
                    if with_axes {
                        let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), a).into_inner();
                        let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), b).into_inner();
                        rotation_axes.push((r0, j, parent_frame.column(0).into_owned()));
                        rotation_axes.push((r0 + 1, j, parent_frame * rx.column(1)));
                        rotation_axes.push((r0 + 2, j, parent_frame * rx * ry.column(2)));
                    }
                    parent_frame * euler_xyz(a, b, c)
                }
            };
            positions[j] = pos;
            frames[j] = frame;
        }
        Kinematics {
            positions,
            rotation_axes,
        }
    }

    pub fn forward_kinematics(&self, q: &JointAngles) -> JointPositions {
        JointPositions(self.kinematics(q, false).positions)
    }

    /// Analytic geometric Jacobian `dP/dq`, rows stacked joint-major (3 per joint).
    pub fn jacobian(&self, q: &JointAngles) -> DMatrix<f64> {
        let kin = self.kinematics(q, true);
        let translation = self.translation_mask();
        let mut jac = DMatrix::zeros(3 * self.joints.len(), self.num_dofs);
        for &(dof, owner, axis) in &kin.rotation_axes {
            let pivot = kin.positions[owner];
            for i in 0..self.joints.len() {
                if translation[dof] {
                    if self.is_ancestor(owner, i) {
                        jac.view_mut((3 * i, dof), (3, 1)).copy_from(&axis);
                    }
                } else if i != owner && self.is_ancestor(owner, i) {
                    let col = axis.cross(&(kin.positions[i] - pivot));
                    jac.view_mut((3 * i, dof), (3, 1)).copy_from(&col);
                }
            }
        }
        jac
    }

    /// Clamps every rotational DoF into its range of motion.
    pub fn clamp_to_rom(&self, q: &JointAngles) -> JointAngles {
        self.check_len(q);
        let bounds = self.rom_bounds();
        JointAngles(DVector::from_iterator(
            q.len(),
            q.0.iter().zip(&bounds).map(|(&v, &(lo, hi))| v.max(lo).min(hi)),
        ))
    }

    pub fn within_rom(&self, q: &JointAngles) -> bool {
        q.0.iter().zip(self.rom_bounds()).all(|(&v, (lo, hi))| lo <= v && v <= hi)
    }

    /// Reflection of a pose across the sagittal plane (x = 0), swapping sides.
    pub fn mirror_angles(&self, q: &JointAngles) -> Option<JointAngles> {
        let mirror = self.mirror.as_ref()?;
        self.check_len(q);
        let mut out = DVector::zeros(self.num_dofs);
        for (j, joint) in self.joints.iter().enumerate() {
            let (src, dst) = (self.dof_start[j], self.dof_start[mirror[j]]);
            match joint.kind {
                DofKind::Fixed => {}
                DofKind::Hinge(_) => out[dst] = q.0[src],
                DofKind::Ball => {
                    out[dst] = q.0[src];
                    out[dst + 1] = -q.0[src + 1];
                    out[dst + 2] = -q.0[src + 2];
                }
                DofKind::Free6 => {
                    out[dst] = -q.0[src];
                    out[dst + 1] = q.0[src + 1];
                    out[dst + 2] = q.0[src + 2];
                    out[dst + 3] = q.0[src + 3];
                    out[dst + 4] = -q.0[src + 4];
                    out[dst + 5] = -q.0[src + 5];
                }
            }
        }
        Some(JointAngles(out))
    }

    pub fn mirror_positions(&self, p: &JointPositions) -> Option<JointPositions> {
        let mirror = self.mirror.as_ref()?;
        let mut out = vec![Vector3::zeros(); p.len()];
        for (j, v) in p.0.iter().enumerate() {
            out[mirror[j]] = Vector3::new(-v.x, v.y, v.z);
        }
        Some(JointPositions(out))
    }

    /// Largest relative deviation between adjacent-joint distances and link lengths.
    pub fn link_length_error(&self, p: &JointPositions) -> f64 {
        self.joints
            .iter()
            .enumerate()
            .filter_map(|(j, joint)| {
                let parent = joint.parent?;
                let len = joint.offset.norm();
                Some(((p.0[j] - p.0[parent]).norm() - len).abs() / len)
            })
            .fold(0.0, f64::max)
    }

    /// Copy of the model with different rest offsets.
    pub fn with_offsets(&self, offsets: &[Vector3<f64>]) -> Result<Self> {
        if offsets.len() != self.joints.len() {
            return Err(Error::config("offsets", "one offset per joint required"));
        }
        let mut out = self.clone();
        for (j, o) in out.joints.iter_mut().zip(offsets) {
            if j.parent.is_some() && !(o.norm() > 0.0) {
                return Err(Error::config(format!("joints.{}.offset", j.name), "link length must be positive"));
            }
            j.offset = *o;
        }
        out.validate_symmetry()?;
        Ok(out)
    }

    /// Rescales the template to a subject: every entry of `measured_links`
    /// gets the given length (same value on both sides, direction kept), every
    /// other link is scaled by `trunk_scale`.
    pub fn personalize(&self, trunk_scale: f64, measured_lengths: &[f64]) -> Result<Self> {
        if measured_lengths.len() != self.measured_links.len() {
            return Err(Error::config("measured_links", "one length per measured link pair required"));
        }
        if !(trunk_scale > 0.0) || measured_lengths.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::config("measured_links", "lengths and scale must be positive"));
        }
        let mut offsets: Vec<Vector3<f64>> = self.joints.iter().map(|j| j.offset * trunk_scale).collect();
        for (pair, &len) in self.measured_links.iter().zip(measured_lengths) {
            for &j in pair {
                offsets[j] = self.joints[j].offset.normalize() * len;
            }
        }
        self.with_offsets(&offsets)
    }

    /// Lengths of the measured links, taken from the first joint of each pair.
    pub fn measured_lengths(&self) -> Vec<f64> {
        self.measured_links.iter().map(|&[a, _]| self.link_length(a)).collect()
    }

    /// Distance between shoulder and hip midpoints in the rest pose.
    pub fn trunk_height(&self) -> Option<f64> {
        let (s, h) = self.trunk?;
        let p = self.forward_kinematics(&JointAngles::zeros(self.num_dofs));
        Some(((p.0[s[0]] + p.0[s[1]]) / 2.0 - (p.0[h[0]] + p.0[h[1]]) / 2.0).norm())
    }
}

/// On-disk skeleton description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkeletonConfig {
    pub version: u32,
    pub name: String,
    #[serde(default)]
    pub neck: Option<String>,
    #[serde(default)]
    pub torso: Option<String>,
    pub joints: Vec<JointConfig>,
    pub keypoints: Vec<KeypointConfig>,
    #[serde(default)]
    pub upper_body_keypoints: Vec<String>,
    #[serde(default)]
    pub mirror_pairs: Vec<[String; 2]>,
    #[serde(default)]
    pub measured_links: Vec<[String; 2]>,
    #[serde(default)]
    pub trunk: Option<TrunkConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rom_reference: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointConfig {
    pub name: String,
    pub parent: Option<String>,
    pub dof: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis_order: Option<String>,
    pub offset: [f64; 3],
    /// Rotational bounds, `null` for unbounded.
    #[serde(default)]
    pub rom: Vec<[Option<f64>; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeypointConfig {
    pub name: String,
    pub joint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrunkConfig {
    pub shoulders: [String; 2],
    pub hips: [String; 2],
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random pose strictly inside the range of motion.
    pub(crate) fn random_pose(model: &SkeletonModel, rng: &mut impl Rng) -> JointAngles {
        let q = model
            .rom_bounds()
            .iter()
            .map(|&(lo, hi)| {
                let (lo, hi) = (lo.max(-1.5), hi.min(1.5));
                lo + (hi - lo) * rng.random::<f64>()
            })
            .collect::<Vec<_>>();
        JointAngles(DVector::from_vec(q))
    }

    /// Random pose away from Euler gimbal lock and from fully straight hinges.
    pub(crate) fn moderate_pose(model: &SkeletonModel, rng: &mut impl Rng) -> JointAngles {
        let q = model
            .rom_bounds()
            .iter()
            .map(|&(lo, hi)| {
                let (lo, hi) = (lo.max(-0.8) + 0.15, hi.min(0.8) - 0.05);
                lo + (hi - lo) * rng.random::<f64>()
            })
            .collect::<Vec<_>>();
        JointAngles(DVector::from_vec(q))
    }

    #[test]
    fn standard_model_shape() {
        let m = SkeletonModel::standard();
        assert_eq!(m.num_joints(), 29);
        assert_eq!(m.num_dofs(), 40);
        assert_eq!(m.num_keypoints(), 17);
        assert_eq!(m.upper_body_keypoints().len(), 11);
        assert!(m.link_lengths()[1..].iter().all(|&l| l > 0.0));
        assert_eq!(m.joints()[m.neck().unwrap()].name, "neck");
    }

    #[test]
    fn rest_pose_is_the_offset_chain() {
        let m = SkeletonModel::standard();
        let p = m.forward_kinematics(&JointAngles::zeros(40));
        for (j, joint) in m.joints().iter().enumerate() {
            let expected = match joint.parent {
                Some(parent) => p.0[parent] + joint.offset,
                None => Vector3::zeros(),
            };
            assert!((p.0[j] - expected).norm() < 1e-15);
        }
    }

    #[test]
    fn root_translation_shifts_everything() {
        let m = SkeletonModel::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_pose(&m, &mut rng);
        let mut shifted = q.clone();
        shifted.0[0] += 1.0;
        let (a, b) = (m.forward_kinematics(&q), m.forward_kinematics(&shifted));
        for (pa, pb) in a.0.iter().zip(&b.0) {
            assert!((pb - pa - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn knee_quarter_turn_rotates_shank() {
        let m = SkeletonModel::standard();
        let knee = m.joint_index("l_knee").unwrap();
        let ankle = m.joint_index("l_ankle").unwrap();
        let mut q = JointAngles::zeros(40);
        q.0[m.dof_start(knee)] = std::f64::consts::FRAC_PI_2;
        let p = m.forward_kinematics(&q);
        // knee axis is -x in the thigh frame: the 0.40 m shank swings to -y
        let shank = p.0[ankle] - p.0[knee];
        assert!((shank - Vector3::new(0.0, -0.40, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn translation_columns_are_identity_blocks() {
        let m = SkeletonModel::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let jac = m.jacobian(&random_pose(&m, &mut rng));
        for i in 0..m.num_joints() {
            let block = jac.view((3 * i, 0), (3, 3));
            assert!((block - Matrix3::identity()).norm() < 1e-15);
        }
    }

    #[test]
    fn leaf_columns_only_touch_descendants() {
        let m = SkeletonModel::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let jac = m.jacobian(&random_pose(&m, &mut rng));
        let owners = m.dof_owner();
        for (dof, &owner) in owners.iter().enumerate().skip(3) {
            for i in 0..m.num_joints() {
                if i == owner || !m.is_ancestor(owner, i) {
                    assert_eq!(jac.view((3 * i, dof), (3, 1)).norm(), 0.0, "dof {dof} joint {i}");
                }
            }
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let m = SkeletonModel::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-6;
        for _ in 0..20 {
            let q = random_pose(&m, &mut rng);
            let jac = m.jacobian(&q);
            let scale = jac.abs().max();
            for d in 0..m.num_dofs() {
                let (mut qp, mut qm) = (q.clone(), q.clone());
                qp.0[d] += h;
                qm.0[d] -= h;
                let (pp, pm) = (m.forward_kinematics(&qp), m.forward_kinematics(&qm));
                for i in 0..m.num_joints() {
                    let fd = (pp.0[i] - pm.0[i]) / (2.0 * h);
                    let an = jac.view((3 * i, d), (3, 1));
                    assert!((fd - an).norm() / scale < 1e-5);
                }
            }
        }
    }

    #[test]
    fn knee_clamps_to_lower_bound() {
        let m = SkeletonModel::standard();
        let knee = m.dof_start(m.joint_index("l_knee").unwrap());
        assert_eq!(m.rom_bounds()[knee], (0.0, 2.6));
        let mut q = JointAngles::zeros(40);
        q.0[knee] = -0.3;
        assert_eq!(m.clamp_to_rom(&q).0[knee], 0.0);
    }

    #[test]
    fn clamp_leaves_feasible_pose_untouched() {
        let m = SkeletonModel::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_pose(&m, &mut rng);
        assert_eq!(m.clamp_to_rom(&q), q);
    }

    #[test]
    fn rejects_unknown_version() {
        let mut cfg = SkeletonModel::standard().to_config();
        cfg.version = 2;
        assert!(matches!(SkeletonModel::from_config(&cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn rejects_asymmetric_links() {
        let mut cfg = SkeletonModel::standard().to_config();
        let j = cfg.joints.iter_mut().find(|j| j.name == "r_knee").unwrap();
        j.offset[2] = -0.43;
        assert!(SkeletonModel::from_config(&cfg).is_err());
    }

    #[test]
    fn config_round_trip() {
        let m = SkeletonModel::standard();
        let back = SkeletonModel::from_config(&m.to_config()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn personalize_sets_measured_links() {
        let m = SkeletonModel::standard();
        let p = m.personalize(1.1, &[0.3, 0.26, 0.45, 0.41]).unwrap();
        assert!((p.link_length(m.joint_index("r_knee").unwrap()) - 0.45).abs() < 1e-15);
        assert!((p.link_length(m.joint_index("spine").unwrap()) - 0.11).abs() < 1e-15);
        assert!((p.trunk_height().unwrap() - 1.1 * m.trunk_height().unwrap()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn clamp_is_idempotent(seed in any::<u64>(), spread in 0.5..6.0f64) {
            let m = SkeletonModel::standard();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = JointAngles(DVector::from_fn(40, |_, _| spread * (2.0 * rng.random::<f64>() - 1.0)));
            let once = m.clamp_to_rom(&q);
            prop_assert!(m.within_rom(&once));
            prop_assert_eq!(m.clamp_to_rom(&once), once);
        }

        #[test]
        fn forward_kinematics_preserves_link_lengths(seed in any::<u64>()) {
            let m = SkeletonModel::standard();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = JointAngles(DVector::from_fn(40, |_, _| 4.0 * (2.0 * rng.random::<f64>() - 1.0)));
            prop_assert!(m.link_length_error(&m.forward_kinematics(&q)) < 1e-9);
        }

        #[test]
        fn mirrored_pose_mirrors_positions(seed in any::<u64>()) {
            let m = SkeletonModel::standard();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_pose(&m, &mut rng);
            let qm = m.mirror_angles(&q).unwrap();
            prop_assert!(m.within_rom(&qm));
            let expected = m.mirror_positions(&m.forward_kinematics(&q)).unwrap();
            let actual = m.forward_kinematics(&qm);
            for (a, b) in actual.0.iter().zip(&expected.0) {
                prop_assert!((a - b).norm() < 1e-12);
            }
        }

        #[test]
        fn jacobian_error_decays_quadratically(seed in any::<u64>()) {
            let m = SkeletonModel::standard();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_pose(&m, &mut rng);
            let dir = DVector::from_fn(40, |_, _| 2.0 * rng.random::<f64>() - 1.0).normalize();
            let p0 = m.forward_kinematics(&q);
            let jac = m.jacobian(&q);
            let err = |h: f64| {
                let p1 = m.forward_kinematics(&JointAngles(&q.0 + &dir * h));
                let lin = &jac * (&dir * h);
                (0..m.num_joints())
                    .map(|i| (p1.0[i] - p0.0[i] - lin.fixed_rows::<3>(3 * i)).norm_squared())
                    .sum::<f64>()
                    .sqrt()
            };
            let (e3, e4) = (err(1e-3), err(1e-4));
            // halving h by 10 shrinks a second-order remainder by ~100
            prop_assert!(e3 < 1e-4);
            prop_assert!(e4 < e3 / 50.0);
        }
    }
}
