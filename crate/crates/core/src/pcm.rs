//! Part confidence maps: per camera, person and keypoint, a field over image
//! pixels with values in `[0, 1]`.
//!
//! Two sources exist. Raster fields come from externally computed heatmaps
//! and are sampled bilinearly with texel centers at integer pixel
//! coordinates. Synthetic fields are analytic Gaussian mixtures generated
//! from ground-truth keypoints, with configurable failure modes.

use std::path::{Path, PathBuf};

use nalgebra::{Point2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::CameraRig;
use crate::error::{read_json, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PcmSource {
    Raster,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: Point2<f64>,
    pub amplitude: f64,
    pub sigma: f64,
}

impl Blob {
    pub fn value(&self, pixel: &Point2<f64>) -> f64 {
        let d2 = (pixel - self.center).norm_squared();
        self.amplitude * (-d2 / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Row-major grid; texel `(col, row)` sits at pixel `(col, row)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RasterField {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::config("raster", format!("{width}x{height} grid needs {} values", width * height)));
        }
        let data = data.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        Ok(Self { width, height, data })
    }

    fn texel(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col] as f64
    }

    pub fn sample(&self, pixel: &Point2<f64>) -> f64 {
        let (x, y) = (pixel.x, pixel.y);
        if !(x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64) {
            return 0.0;
        }
        let (c0, r0) = (x.floor() as usize, y.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(self.width - 1), (r0 + 1).min(self.height - 1));
        let (fx, fy) = (x - c0 as f64, y - r0 as f64);
        let top = self.texel(c0, r0) * (1.0 - fx) + self.texel(c1, r0) * fx;
        let bottom = self.texel(c0, r1) * (1.0 - fx) + self.texel(c1, r1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfidenceField {
    Mixture(Vec<Blob>),
    Raster(RasterField),
}

impl ConfidenceField {
    /// Value at `pixel`, assumed to lie inside the image.
    fn eval(&self, pixel: &Point2<f64>) -> f64 {
        match self {
            ConfidenceField::Mixture(blobs) => blobs.iter().map(|b| b.value(pixel)).fold(0.0, f64::max).min(1.0),
            ConfidenceField::Raster(r) => r.sample(pixel),
        }
    }
}

/// All confidence fields of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PcmSet {
    pub frame: usize,
    pub source: PcmSource,
    resolutions: Vec<(u32, u32)>,
    persons: usize,
    keypoints: usize,
    fields: Vec<ConfidenceField>,
}

impl PcmSet {
    /// Set with every field empty (zero everywhere).
    pub fn empty(frame: usize, source: PcmSource, resolutions: Vec<(u32, u32)>, persons: usize, keypoints: usize) -> Self {
        let n = resolutions.len() * persons * keypoints;
        Self {
            frame,
            source,
            resolutions,
            persons,
            keypoints,
            fields: vec![ConfidenceField::Mixture(Vec::new()); n],
        }
    }

    pub fn num_cameras(&self) -> usize {
        self.resolutions.len()
    }

    pub fn num_persons(&self) -> usize {
        self.persons
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoints
    }

    fn index(&self, camera: usize, person: usize, keypoint: usize) -> Result<usize> {
        if camera >= self.resolutions.len() || person >= self.persons || keypoint >= self.keypoints {
            return Err(Error::Lookup(format!(
                "no confidence field for camera {camera}, person {person}, keypoint {keypoint}"
            )));
        }
        Ok((camera * self.persons + person) * self.keypoints + keypoint)
    }

    pub fn field(&self, camera: usize, person: usize, keypoint: usize) -> Result<&ConfidenceField> {
        Ok(&self.fields[self.index(camera, person, keypoint)?])
    }

    pub fn set_field(&mut self, camera: usize, person: usize, keypoint: usize, field: ConfidenceField) -> Result<()> {
        let i = self.index(camera, person, keypoint)?;
        self.fields[i] = field;
        Ok(())
    }

    /// Confidence in `[0, 1]`; zero outside the camera image.
    pub fn query(&self, camera: usize, person: usize, keypoint: usize, pixel: &Point2<f64>) -> Result<f64> {
        let field = self.field(camera, person, keypoint)?;
        let (w, h) = self.resolutions[camera];
        if !(pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x < w as f64 && pixel.y < h as f64) {
            return Ok(0.0);
        }
        Ok(field.eval(pixel))
    }

    /// Blob list of a synthetic field, empty for raster fields.
    pub fn blobs(&self, camera: usize, person: usize, keypoint: usize) -> Result<&[Blob]> {
        match self.field(camera, person, keypoint)? {
            ConfidenceField::Mixture(b) => Ok(b),
            ConfidenceField::Raster(_) => Ok(&[]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConfusionMode {
    #[default]
    Off,
    /// The occluded keypoint's blob moves onto the occluder's keypoint.
    Swap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticPcmConfig {
    pub sigma_px: f64,
    pub amplitude: f64,
    /// Standard deviation of the blob center around the true projection, px.
    pub center_noise_px: f64,
    pub dropout: f64,
    /// Spurious blobs per camera image.
    pub false_positives: usize,
    pub false_positive_amplitude: f64,
    pub confusion: ConfusionMode,
    /// Pixel distance at which a nearer person's keypoint captures the blob.
    pub confusion_radius_px: f64,
    /// Margin applied to a person's projected extent when placing false positives.
    pub false_positive_margin: f64,
    pub seed: u64,
}

impl Default for SyntheticPcmConfig {
    fn default() -> Self {
        Self {
            sigma_px: 8.0,
            amplitude: 1.0,
            center_noise_px: 0.0,
            dropout: 0.0,
            false_positives: 0,
            false_positive_amplitude: 0.8,
            confusion: ConfusionMode::Off,
            confusion_radius_px: 15.0,
            false_positive_margin: 1.25,
            seed: 0,
        }
    }
}

impl SyntheticPcmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_px > 0.0) {
            return Err(Error::config("pcm.sigma_px", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.amplitude) || !(0.0..=1.0).contains(&self.false_positive_amplitude) {
            return Err(Error::config("pcm.amplitude", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::config("pcm.dropout", "probability must lie in [0, 1]"));
        }
        if !(self.center_noise_px >= 0.0) || !(self.confusion_radius_px >= 0.0) {
            return Err(Error::config("pcm.center_noise_px", "must be non-negative"));
        }
        if !(self.false_positive_margin >= 1.0) {
            return Err(Error::config("pcm.false_positive_margin", "must be at least 1"));
        }
        Ok(())
    }
}

/// Builds the synthetic fields of one frame from each person's true
/// keypoint positions (`keypoints[person][k]`).
///
/// Random draws come from a ChaCha stream selected by the frame index, in a
/// fixed camera / person / keypoint order, so a frame's fields depend only on
/// the seed and the frame.
pub fn generate_synthetic(
    cfg: &SyntheticPcmConfig,
    rig: &CameraRig,
    keypoints: &[Vec<Vector3<f64>>],
    frame: usize,
) -> Result<PcmSet> {
    cfg.validate()?;
    let n_kp = keypoints.first().map_or(0, Vec::len);
    if keypoints.iter().any(|k| k.len() != n_kp) {
        return Err(Error::config("keypoints", "every person needs the same keypoint count"));
    }
    let resolutions = rig.cameras().iter().map(|c| c.resolution).collect();
    let mut set = PcmSet::empty(frame, PcmSource::Synthetic, resolutions, keypoints.len(), n_kp);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(frame as u64);
    let noise = Normal::new(0.0, cfg.center_noise_px).expect("validated noise");
    let blob = |center: Point2<f64>, amplitude: f64| Blob {
        center,
        amplitude,
        sigma: cfg.sigma_px,
    };

    for cam in rig.cameras() {
        // (pixel, depth) of every visible keypoint
        let proj: Vec<Vec<Option<(Point2<f64>, f64)>>> = keypoints
            .iter()
            .map(|kps| {
                kps.iter()
                    .map(|x| cam.project(x).ok().filter(|p| cam.in_image(p)).map(|p| (p, cam.depth(x))))
                    .collect()
            })
            .collect();
        for (person, person_proj) in proj.iter().enumerate() {
            for (k, entry) in person_proj.iter().enumerate() {
                // draws happen unconditionally so one keypoint's visibility
                // never shifts another's random sequence
                let drop = rng.random::<f64>() < cfg.dropout;
                let offset = Point2::new(noise.sample(&mut rng), noise.sample(&mut rng)).coords;
                let Some((pixel, depth)) = entry else { continue };
                if drop {
                    continue;
                }
                let mut center = *pixel;
                if cfg.confusion == ConfusionMode::Swap {
                    let occluder = proj
                        .iter()
                        .enumerate()
                        .filter(|&(other, _)| other != person)
                        .filter_map(|(_, o)| o[k])
                        .filter(|(p, d)| (p - pixel).norm() <= cfg.confusion_radius_px && *d < *depth)
                        .min_by(|a, b| a.1.total_cmp(&b.1));
                    if let Some((p, _)) = occluder {
                        center = p;
                    }
                }
                set.push_blob(cam.id, person, k, blob(center + offset, cfg.amplitude));
            }
        }
        for _ in 0..cfg.false_positives {
            let person = rng.random_range(0..keypoints.len().max(1));
            let k = rng.random_range(0..n_kp.max(1));
            let (u, v) = (rng.random::<f64>(), rng.random::<f64>());
            let Some(visible) = proj.get(person) else { continue };
            let pts: Vec<Point2<f64>> = visible.iter().flatten().map(|(p, _)| *p).collect();
            if pts.is_empty() {
                continue;
            }
            let (lo, hi) = extent(&pts);
            let mid = (lo + hi.coords) / 2.0;
            let half = (hi - lo) * cfg.false_positive_margin / 2.0;
            let center = Point2::new(mid.x + (2.0 * u - 1.0) * half.x, mid.y + (2.0 * v - 1.0) * half.y);
            set.push_blob(cam.id, person, k, blob(center, cfg.false_positive_amplitude));
        }
    }
    Ok(set)
}

fn extent(points: &[Point2<f64>]) -> (Point2<f64>, Point2<f64>) {
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = Point2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Point2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    (lo, hi)
}

impl PcmSet {
    fn push_blob(&mut self, camera: usize, person: usize, keypoint: usize, blob: Blob) {
        let i = (camera * self.persons + person) * self.keypoints + keypoint;
        if let ConfidenceField::Mixture(blobs) = &mut self.fields[i] {
            blobs.push(blob);
        }
    }
}

/// Sidecar describing one raster file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterHeader {
    pub width: usize,
    pub height: usize,
    pub camera: usize,
    pub person: usize,
    pub keypoint: usize,
    pub frame: usize,
    /// Data file, relative to the sidecar's directory.
    pub data: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRaster {
    pub header: RasterHeader,
    pub field: RasterField,
}

/// Reads a sidecar and its little-endian `f32` row-major grid.
pub fn load_raster(sidecar: &Path) -> Result<LoadedRaster> {
    let header: RasterHeader = read_json(sidecar)?;
    let path = sidecar.parent().unwrap_or(Path::new(".")).join(&header.data);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let format = |offset: usize, message: String| Error::Format {
        path: path.clone(),
        offset: offset as u64,
        message,
    };
    if header.width == 0 || header.height == 0 {
        return Err(format(0, "raster dimensions must be positive".into()));
    }
    let expected = header.width * header.height * 4;
    if bytes.len() != expected {
        return Err(format(
            bytes.len().min(expected),
            format!(
                "{}x{} grid needs {expected} bytes, file has {}",
                header.width,
                header.height,
                bytes.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(header.width * header.height);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if v.is_nan() {
            return Err(format(4 * i, "NaN confidence".into()));
        }
        data.push(v);
    }
    let field = RasterField::new(header.width, header.height, data)?;
    Ok(LoadedRaster { header, field })
}

/// Writes a raster and its sidecar; `sidecar` names the JSON file and the
/// data file is placed next to it with a `.f32` extension.
pub fn save_raster(sidecar: &Path, header: &RasterHeader, field: &RasterField) -> Result<()> {
    let path = sidecar.parent().unwrap_or(Path::new(".")).join(&header.data);
    let bytes: Vec<u8> = field.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    crate::error::write_json(sidecar, header)
}

/// Collects loaded rasters of one frame into a set sized after `rig`.
pub fn raster_set(frame: usize, rig: &CameraRig, persons: usize, keypoints: usize, rasters: Vec<LoadedRaster>) -> Result<PcmSet> {
    let resolutions = rig.cameras().iter().map(|c| c.resolution).collect();
    let mut set = PcmSet::empty(frame, PcmSource::Raster, resolutions, persons, keypoints);
    for r in rasters {
        let h = &r.header;
        if h.frame != frame {
            return Err(Error::Lookup(format!("raster for frame {} given for frame {frame}", h.frame)));
        }
        set.set_field(h.camera, h.person, h.keypoint, ConfidenceField::Raster(r.field))?;
    }
    Ok(set)
}
