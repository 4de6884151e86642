//! Pinhole camera models and the multi-viewpoint rig.
//!
//! World frame convention: meters, right-handed, z-up. A camera maps a world
//! point `X` to pixels through `M = K [R | t]`; distortion is assumed to be
//! compensated before any pixel reaches the engine.

use std::path::Path;

use nalgebra::{Matrix2x3, Matrix3, Matrix3x4, Point2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json, Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub id: usize,
    pub intrinsics: Matrix3<f64>,
    /// World to camera rotation.
    pub rotation: Matrix3<f64>,
    /// Camera-frame translation, meters.
    pub translation: Vector3<f64>,
    /// Image size `(width, height)` in pixels.
    pub resolution: (u32, u32),
}

impl CameraModel {
    pub fn new(
        id: usize,
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        resolution: (u32, u32),
    ) -> Result<Self> {
        let cam = Self {
            id,
            intrinsics,
            rotation,
            translation,
            resolution,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Builds a camera with square pixels and no skew.
    pub fn from_focal(
        id: usize,
        focal: f64,
        principal: (f64, f64),
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        resolution: (u32, u32),
    ) -> Result<Self> {
        let k = Matrix3::new(focal, 0.0, principal.0, 0.0, focal, principal.1, 0.0, 0.0, 1.0);
        Self::new(id, k, rotation, translation, resolution)
    }

    /// Camera placed at `center` looking at `target`, with world z as the up hint.
    pub fn look_at(
        id: usize,
        focal: f64,
        resolution: (u32, u32),
        center: Vector3<f64>,
        target: Vector3<f64>,
    ) -> Result<Self> {
        let forward = (target - center)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::DegenerateGeometry("look_at target equals center".into()))?;
        let right = forward
            .cross(&Vector3::z())
            .try_normalize(1e-9)
            .ok_or_else(|| Error::DegenerateGeometry("look_at direction parallel to up".into()))?;
        // image y grows downward
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * center);
        let principal = (resolution.0 as f64 / 2.0, resolution.1 as f64 / 2.0);
        Self::from_focal(id, focal, principal, rotation, translation, resolution)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str| format!("cameras[{}].{}", self.id, name);
        let r = &self.rotation;
        let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(dev <= ORTHONORMAL_TOL) || !((r.determinant() - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(Error::config(field("r"), "rotation is not orthonormal"));
        }
        let k = &self.intrinsics;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::config(field("k"), "intrinsics must be upper-triangular with K[2][2] = 1"));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::config(field("k"), "focal entries must be positive"));
        }
        let (w, h) = (self.resolution.0 as f64, self.resolution.1 as f64);
        if !(0.0..=w).contains(&k[(0, 2)]) || !(0.0..=h).contains(&k[(1, 2)]) {
            return Err(Error::config(field("k"), "principal point outside the image"));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(field("t"), "non-finite translation"));
        }
        Ok(())
    }

    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        rt.set_column(3, &self.translation);
        self.intrinsics * rt
    }

    pub fn to_camera_frame(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// Depth of `point` along the optical axis.
    pub fn depth(&self, point: &Vector3<f64>) -> f64 {
        self.rotation.row(2).transpose().dot(point) + self.translation.z
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn project(&self, point: &Vector3<f64>) -> Result<Point2<f64>> {
        let pc = self.to_camera_frame(point);
        self.project_camera_frame(&pc)
    }

    pub(crate) fn project_camera_frame(&self, pc: &Vector3<f64>) -> Result<Point2<f64>> {
        let h = self.intrinsics * pc;
        if !(h.z > 0.0) {
            return Err(Error::BehindCamera { depth: h.z });
        }
        Ok(Point2::new(h.x / h.z, h.y / h.z))
    }

    /// Derivative of the pixel with respect to the camera-frame point.
    pub(crate) fn projection_jacobian(&self, pc: &Vector3<f64>) -> Matrix2x3<f64> {
        let k = &self.intrinsics;
        let (x, y, z) = (pc.x, pc.y, pc.z);
        let iz = 1.0 / z;
        Matrix2x3::new(
            k[(0, 0)] * iz,
            k[(0, 1)] * iz,
            -(k[(0, 0)] * x + k[(0, 1)] * y) * iz * iz,
            0.0,
            k[(1, 1)] * iz,
            -k[(1, 1)] * y * iz * iz,
        )
    }

    pub fn in_image(&self, pixel: &Point2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.resolution.0 as f64
            && pixel.y < self.resolution.1 as f64
    }

    pub fn is_visible(&self, point: &Vector3<f64>) -> bool {
        self.project(point).is_ok_and(|px| self.in_image(&px))
    }

    /// Inverse of [`project`](Self::project) at a given depth.
    pub fn backproject(&self, pixel: &Point2<f64>, depth: f64) -> Vector3<f64> {
        let ray = self.normalized(pixel);
        let pc = Vector3::new(ray.x, ray.y, 1.0) * depth;
        self.rotation.transpose() * (pc - self.translation)
    }

    /// Pixel mapped through `K^-1`, i.e. the ray direction with unit depth.
    pub fn normalized(&self, pixel: &Point2<f64>) -> Vector2<f64> {
        let k = &self.intrinsics;
        let y = (pixel.y - k[(1, 2)]) / k[(1, 1)];
        let x = (pixel.x - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
        Vector2::new(x, y)
    }

    pub fn image_center(&self) -> Point2<f64> {
        Point2::new(self.resolution.0 as f64 / 2.0, self.resolution.1 as f64 / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    cameras: Vec<CameraModel>,
    viewpoints: Vec<Vec<usize>>,
}

impl CameraRig {
    /// `viewpoints[v]` lists the ids of the cameras placed at viewpoint `v`.
    pub fn new(mut cameras: Vec<CameraModel>, viewpoints: Vec<Vec<usize>>) -> Result<Self> {
        cameras.sort_by_key(|c| c.id);
        for (i, cam) in cameras.iter().enumerate() {
            if cam.id != i {
                return Err(Error::config("cameras", format!("camera ids must be 0..{}", cameras.len())));
            }
            cam.validate()?;
        }
        let mut owner = vec![None; cameras.len()];
        for (v, group) in viewpoints.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::config(format!("viewpoints[{v}]"), "viewpoint has no cameras"));
            }
            for &id in group {
                match owner.get_mut(id) {
                    None => return Err(Error::config(format!("viewpoints[{v}]"), format!("unknown camera {id}"))),
                    Some(Some(prev)) => {
                        return Err(Error::config(
                            format!("viewpoints[{v}]"),
                            format!("camera {id} already belongs to viewpoint {prev}"),
                        ))
                    }
                    Some(slot) => *slot = Some(v),
                }
            }
        }
        if let Some(id) = owner.iter().position(Option::is_none) {
            return Err(Error::config("viewpoints", format!("camera {id} belongs to no viewpoint")));
        }
        Ok(Self { cameras, viewpoints })
    }

    pub fn cameras(&self) -> &[CameraModel] {
        &self.cameras
    }

    pub fn camera(&self, id: usize) -> Result<&CameraModel> {
        self.cameras
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("camera {id}")))
    }

    pub fn viewpoints(&self) -> &[Vec<usize>] {
        &self.viewpoints
    }

    pub fn num_cameras(&self) -> usize {
        self.cameras.len()
    }

    pub fn num_viewpoints(&self) -> usize {
        self.viewpoints.len()
    }

    pub fn viewpoint_of(&self, camera: usize) -> Option<usize> {
        self.viewpoints.iter().position(|g| g.contains(&camera))
    }

    /// Replaces camera parameters while keeping the viewpoint grouping.
    pub fn with_cameras(&self, cameras: Vec<CameraModel>) -> Result<Self> {
        Self::new(cameras, self.viewpoints.clone())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: RigFile = read_json(path)?;
        file.into_rig()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &RigFile::from_rig(self))
    }
}

/// On-disk rig description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigFile {
    #[serde(default = "default_world_frame")]
    pub world_frame: String,
    pub cameras: Vec<CameraRecord>,
}

fn default_world_frame() -> String {
    "meters, right-handed, z-up".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: usize,
    /// Row-major intrinsics.
    pub k: [f64; 9],
    /// Row-major world-to-camera rotation.
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub resolution: [u32; 2],
    pub viewpoint: usize,
}

impl RigFile {
    pub fn from_rig(rig: &CameraRig) -> Self {
        let row_major = |m: &Matrix3<f64>| {
            let mut out = [0.0; 9];
            for r in 0..3 {
                for c in 0..3 {
                    out[3 * r + c] = m[(r, c)];
                }
            }
            out
        };
        let cameras = rig
            .cameras
            .iter()
            .map(|cam| CameraRecord {
                id: cam.id,
                k: row_major(&cam.intrinsics),
                r: row_major(&cam.rotation),
                t: [cam.translation.x, cam.translation.y, cam.translation.z],
                resolution: [cam.resolution.0, cam.resolution.1],
                viewpoint: rig.viewpoint_of(cam.id).expect("validated rig"),
            })
            .collect();
        Self {
            world_frame: default_world_frame(),
            cameras,
        }
    }

    pub fn into_rig(self) -> Result<CameraRig> {
        let num_viewpoints = self.cameras.iter().map(|c| c.viewpoint + 1).max().unwrap_or(0);
        let mut viewpoints = vec![Vec::new(); num_viewpoints];
        let mut cameras = Vec::with_capacity(self.cameras.len());
        for rec in self.cameras {
            viewpoints[rec.viewpoint].push(rec.id);
            cameras.push(CameraModel::new(
                rec.id,
                Matrix3::from_row_slice(&rec.k),
                Matrix3::from_row_slice(&rec.r),
                Vector3::from(rec.t),
                (rec.resolution[0], rec.resolution[1]),
            )?);
        }
        for group in &mut viewpoints {
            group.sort_unstable();
        }
        CameraRig::new(cameras, viewpoints)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn simple_camera() -> CameraModel {
        CameraModel::from_focal(0, 1000.0, (960.0, 600.0), Matrix3::identity(), Vector3::zeros(), (1920, 1200))
            .unwrap()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let px = simple_camera().project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(px, Point2::new(960.0, 600.0));
    }

    #[test]
    fn off_axis_projection() {
        let px = simple_camera().project(&Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert!((px.x - 1460.0).abs() < 1e-12);
        assert!((px.y - 600.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_an_error() {
        match simple_camera().project(&Vector3::new(0.0, 0.0, -1.0)) {
            Err(Error::BehindCamera { depth }) => assert_eq!(depth, -1.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn visibility() {
        let cam = simple_camera();
        assert!(cam.is_visible(&Vector3::new(0.0, 0.0, 1.0)));
        assert!(!cam.is_visible(&Vector3::new(0.0, 0.0, -1.0)));
        // (-5, 300) at depth 1
        let p = Vector3::new(-965.0 / 1000.0, -300.0 / 1000.0, 1.0);
        let px = cam.project(&p).unwrap();
        assert!((px.x + 5.0).abs() < 1e-9 && (px.y - 300.0).abs() < 1e-9);
        assert!(!cam.is_visible(&p));
    }

    #[test]
    fn rejects_bad_rotation() {
        let r = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraModel::from_focal(0, 1000.0, (960.0, 600.0), r, Vector3::zeros(), (1920, 1200)).is_err());
        let reflect = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        assert!(CameraModel::from_focal(0, 1000.0, (960.0, 600.0), reflect, Vector3::zeros(), (1920, 1200)).is_err());
    }

    #[test]
    fn rig_requires_partition() {
        let a = simple_camera();
        let mut b = simple_camera();
        b.id = 1;
        assert!(CameraRig::new(vec![a.clone(), b.clone()], vec![vec![0], vec![1]]).is_ok());
        assert!(CameraRig::new(vec![a.clone(), b.clone()], vec![vec![0, 1], vec![1]]).is_err());
        assert!(CameraRig::new(vec![a.clone(), b.clone()], vec![vec![0]]).is_err());
        assert!(CameraRig::new(vec![a, b], vec![vec![0, 1], vec![]]).is_err());
    }

    #[test]
    fn rig_file_round_trip() {
        let cam0 = CameraModel::look_at(0, 1200.0, (1920, 1200), Vector3::new(4.0, -3.0, 2.5), Vector3::new(0.1, 0.2, 1.0))
            .unwrap();
        let cam1 = CameraModel::look_at(1, 900.0, (1920, 1200), Vector3::new(-4.0, 3.0, 2.0), Vector3::new(0.0, 0.0, 1.0))
            .unwrap();
        let rig = CameraRig::new(vec![cam0, cam1], vec![vec![1], vec![0]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rig.json");
        rig.save(&path).unwrap();
        let back = CameraRig::load(&path).unwrap();
        assert_eq!(back.viewpoints(), rig.viewpoints());
        for (a, b) in rig.cameras().iter().zip(back.cameras()) {
            let rel = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(1.0);
            assert!(a.intrinsics.iter().zip(b.intrinsics.iter()).all(|(x, y)| rel(*x, *y)));
            assert!(a.rotation.iter().zip(b.rotation.iter()).all(|(x, y)| rel(*x, *y)));
            assert!(a.translation.iter().zip(b.translation.iter()).all(|(x, y)| rel(*x, *y)));
        }
    }

    fn arb_camera() -> impl Strategy<Value = CameraModel> {
        (
            prop::array::uniform3(-5.0..5.0f64),
            prop::array::uniform3(-1.0..1.0f64),
            600.0..2000.0f64,
        )
            .prop_map(|(c, t, f)| {
                CameraModel::look_at(
                    0,
                    f,
                    (1920, 1200),
                    Vector3::new(c[0], c[1], c[2] + 6.0),
                    Vector3::new(t[0], t[1], t[2]),
                )
                .unwrap()
            })
    }

    proptest! {
        #[test]
        fn projection_is_scale_invariant_along_rays(
            cam in arb_camera(),
            dir in prop::array::uniform2(-0.5..0.5f64),
            depth in 0.5..20.0f64,
            lambda in 0.1..10.0f64,
        ) {
            let pc = Vector3::new(dir[0], dir[1], 1.0) * depth;
            let world = |p: Vector3<f64>| cam.rotation.transpose() * (p - cam.translation);
            let a = cam.project(&world(pc)).unwrap();
            let b = cam.project(&world(pc * lambda)).unwrap();
            prop_assert!((a - b).norm() < 1e-9);
        }

        #[test]
        fn backproject_round_trip(
            cam in arb_camera(),
            u in 0.0..1920.0f64,
            v in 0.0..1200.0f64,
            depth in 0.1..50.0f64,
        ) {
            let px = Point2::new(u, v);
            let back = cam.project(&cam.backproject(&px, depth)).unwrap();
            prop_assert!((back - px).norm() < 1e-6);
        }
    }
}
