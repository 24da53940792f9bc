//! Binocular ball-scene simulator: camera rig, orthographic projection,
//! antialiased disc rendering, dataset files, and motion-target assembly.
//!
//! The scene is a single ball of diameter 10 inside a +/-50 cube, spawned
//! uniformly inside +/-45 per axis, watched by two cameras looking at the
//! origin from the (-4,-5,5) and (-5,-4,5) directions. Projection is
//! orthographic along each view direction onto a square window of
//! half-extent 80 world units, which keeps the whole spawn cube (plus a
//! ball-radius margin) inside frame for both tilted cameras.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::{Scalar, Tensor};

/// Ball diameter in world units.
pub const BALL_DIAMETER: f64 = 10.0;
/// Spawn bound: ball centers are uniform in (-45, 45) per axis.
pub const SPAWN_BOUND: f64 = 45.0;
/// Default projection window half-extent in world units.
pub const DEFAULT_HALF_EXTENT: f64 = 80.0;
/// Normalization scale for all motion targets: the standard deviation of
/// a uniform(-45, 45) coordinate, 90/sqrt(12).
pub const TARGET_SIGMA: f64 = 25.980762113533157;

// ── Cameras ─────────────────────────────────────────────────────────

type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: Vec3) -> Vec3 {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// One orthographic camera: view direction plus in-image basis.
#[derive(Clone, Copy, Debug)]
pub struct Camera {
    /// Unit vector from scene center toward the observation point.
    pub view: Vec3,
    /// Image "up" in world space: world z projected off the view axis.
    pub up: Vec3,
    /// Image "right" in world space: up x view.
    pub right: Vec3,
}

impl Camera {
    fn looking_from(direction: Vec3) -> Camera {
        let view = normalize(direction);
        let z = [0.0, 0.0, 1.0];
        let zv = dot(z, view);
        let up = normalize([
            z[0] - zv * view[0],
            z[1] - zv * view[1],
            z[2] - zv * view[2],
        ]);
        let right = cross(up, view);
        Camera { view, up, right }
    }
}

/// The two-camera rig with its shared projection window.
#[derive(Clone, Copy, Debug)]
pub struct CameraRig {
    pub cameras: [Camera; 2],
    pub image_size: usize,
    pub half_extent: f64,
}

/// Observation directions of the default rig.
pub const VIEW_DIRECTIONS: [Vec3; 2] = [[-4.0, -5.0, 5.0], [-5.0, -4.0, 5.0]];

/// Build the two-camera rig. The default directions are 9.9866 degrees
/// apart (cos = 65/66).
pub fn build_rig(image_size: usize, half_extent: f64) -> Result<CameraRig> {
    if image_size < 8 {
        return Err(Error::Config(format!(
            "image size must be at least 8 pixels, got {image_size}"
        )));
    }
    if !(half_extent > 0.0) {
        return Err(Error::Config(format!(
            "window half-extent must be positive, got {half_extent}"
        )));
    }
    Ok(CameraRig {
        cameras: [
            Camera::looking_from(VIEW_DIRECTIONS[0]),
            Camera::looking_from(VIEW_DIRECTIONS[1]),
        ],
        image_size,
        half_extent,
    })
}

/// Orthographic projection of a world point into continuous pixel
/// coordinates, (0, 0) at the image's top-left corner.
pub fn project(p: Vec3, cam: &Camera, rig: &CameraRig) -> (f64, f64) {
    let he = rig.half_extent;
    let size = rig.image_size as f64;
    let col = (dot(p, cam.right) + he) / (2.0 * he) * size;
    let row = (he - dot(p, cam.up)) / (2.0 * he) * size;
    (row, col)
}

// ── Rendering ───────────────────────────────────────────────────────

/// One simulated observation: ball position plus the two grayscale views.
#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub position: [f32; 3],
    /// Two images of image_size^2 bytes each, row-major.
    pub images: [Vec<u8>; 2],
}

/// Subpixel grid used on rim pixels. 16x16 keeps the disc-area error well
/// under the 2% tolerance even at the smallest radius used (2 px at 64^2).
const SUPERSAMPLE: usize = 16;

fn render_disc(center_row: f64, center_col: f64, radius: f64, size: usize) -> Vec<u8> {
    let mut img = vec![0u8; size * size];
    // Only pixels in this bounding box can touch the disc.
    let lo = |c: f64| ((c - radius - 1.0).floor().max(0.0)) as usize;
    let hi = |c: f64| (((c + radius + 1.0).ceil()) as usize).min(size);
    let half_diag = std::f64::consts::SQRT_2 / 2.0;
    for i in lo(center_row)..hi(center_row) {
        for j in lo(center_col)..hi(center_col) {
            let dy = i as f64 + 0.5 - center_row;
            let dx = j as f64 + 0.5 - center_col;
            let dist = (dx * dx + dy * dy).sqrt();
            let v = if dist + half_diag <= radius {
                255
            } else if dist - half_diag >= radius {
                0
            } else {
                // Rim pixel: count covered subpixel centers.
                let mut inside = 0u32;
                for a in 0..SUPERSAMPLE {
                    for b in 0..SUPERSAMPLE {
                        let sy = i as f64 + (a as f64 + 0.5) / SUPERSAMPLE as f64 - center_row;
                        let sx = j as f64 + (b as f64 + 0.5) / SUPERSAMPLE as f64 - center_col;
                        if sy * sy + sx * sx <= radius * radius {
                            inside += 1;
                        }
                    }
                }
                let coverage = inside as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                (coverage * 255.0).round() as u8
            };
            img[i * size + j] = v;
        }
    }
    img
}

/// Render the ball at `position` through both cameras: a filled disc of
/// radius 5 world units, interior 255 on background 0, rim antialiased by
/// pixel-coverage supersampling.
pub fn render_frame(position: Vec3, rig: &CameraRig) -> FrameRecord {
    let radius_px = (BALL_DIAMETER / 2.0) * rig.image_size as f64 / (2.0 * rig.half_extent);
    let render = |cam: &Camera| {
        let (row, col) = project(position, cam, rig);
        render_disc(row, col, radius_px, rig.image_size)
    };
    FrameRecord {
        position: [position[0] as f32, position[1] as f32, position[2] as f32],
        images: [render(&rig.cameras[0]), render(&rig.cameras[1])],
    }
}

/// Draw a ball center uniformly from the open spawn cube (-45, 45)^3.
pub fn sample_position(rng: &mut Prng) -> Vec3 {
    [
        rng.open_range(-SPAWN_BOUND, SPAWN_BOUND),
        rng.open_range(-SPAWN_BOUND, SPAWN_BOUND),
        rng.open_range(-SPAWN_BOUND, SPAWN_BOUND),
    ]
}

// ── Dataset files ───────────────────────────────────────────────────

const DATASET_MAGIC: &[u8; 4] = b"PIDB";
const DATASET_VERSION: u32 = 1;

/// Parsed header of a dataset file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub n_records: u32,
    pub views: u32,
    pub height: u32,
    pub width: u32,
    pub seed: u64,
}

/// In-memory dataset: positions plus packed images per record.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub header: DatasetHeader,
    positions: Vec<[f32; 3]>,
    /// n_records * views * height * width bytes, record-major.
    images: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, index: usize) -> [f32; 3] {
        self.positions[index]
    }

    /// All views of one record, packed view-major.
    pub fn record_images(&self, index: usize) -> &[u8] {
        let stride = (self.header.views * self.header.height * self.header.width) as usize;
        &self.images[index * stride..(index + 1) * stride]
    }

    /// Build a dataset in memory from rendered records (for tests).
    pub fn from_records(records: &[FrameRecord], size: usize, seed: u64) -> Dataset {
        let mut positions = Vec::with_capacity(records.len());
        let mut images = Vec::with_capacity(records.len() * 2 * size * size);
        for r in records {
            positions.push(r.position);
            images.extend_from_slice(&r.images[0]);
            images.extend_from_slice(&r.images[1]);
        }
        Dataset {
            header: DatasetHeader {
                n_records: records.len() as u32,
                views: 2,
                height: size as u32,
                width: size as u32,
                seed,
            },
            positions,
            images,
        }
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

/// Render `count` records from per-record derived streams of `seed` and
/// stream them to `path`. Same seed, same bytes, every time.
pub fn generate_dataset(count: u32, seed: u64, rig: &CameraRig, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(DATASET_MAGIC).map_err(|e| Error::io(path, e))?;
    write_u32(&mut w, DATASET_VERSION, path)?;
    write_u32(&mut w, count, path)?;
    write_u32(&mut w, 2, path)?;
    write_u32(&mut w, rig.image_size as u32, path)?;
    write_u32(&mut w, rig.image_size as u32, path)?;
    w.write_all(&seed.to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    for i in 0..count {
        // Independent stream per record: renders may run in any order.
        let mut rng = Prng::derive(seed, "record", i as u64);
        let record = render_frame(sample_position(&mut rng), rig);
        for &c in &record.position {
            w.write_all(&c.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        w.write_all(&record.images[0])
            .map_err(|e| Error::io(path, e))?;
        w.write_all(&record.images[1])
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load a dataset file written by [`generate_dataset`].
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {magic:?}, expected {DATASET_MAGIC:?}"),
        ));
    }
    let version = read_u32(&mut r, path)?;
    if version != DATASET_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}, expected {DATASET_VERSION}"),
        ));
    }
    let n_records = read_u32(&mut r, path)?;
    let views = read_u32(&mut r, path)?;
    let height = read_u32(&mut r, path)?;
    let width = read_u32(&mut r, path)?;
    let mut seed_buf = [0u8; 8];
    r.read_exact(&mut seed_buf).map_err(|e| Error::io(path, e))?;
    let header = DatasetHeader {
        n_records,
        views,
        height,
        width,
        seed: u64::from_le_bytes(seed_buf),
    };

    let stride = (views * height * width) as usize;
    let mut positions = Vec::with_capacity(n_records as usize);
    let mut images = vec![0u8; n_records as usize * stride];
    for i in 0..n_records as usize {
        let mut pos = [0f32; 3];
        for c in &mut pos {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
            *c = f32::from_le_bytes(b);
        }
        positions.push(pos);
        r.read_exact(&mut images[i * stride..(i + 1) * stride])
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(Dataset {
        header,
        positions,
        images,
    })
}

// ── Motion samples and targets ──────────────────────────────────────

/// A T-frame training sample: which records it uses and the flat target
/// vector in world units.
#[derive(Clone, Debug)]
pub struct MotionSample {
    pub indices: Vec<usize>,
    pub targets: Vec<f32>,
}

/// Targets for a position sequence, ordered [q..., v..., a]: coordinates,
/// then velocities v_i = q_{i+1} - q_i, then acceleration a = v_2 - v_1.
pub fn ground_truth(positions: &[[f32; 3]]) -> Result<Vec<f32>> {
    let t = positions.len();
    if !(1..=3).contains(&t) {
        return Err(Error::Config(format!(
            "a motion sample needs 1 to 3 frames, got {t}"
        )));
    }
    let mut out = Vec::with_capacity(3 * (3 * t - 3).max(3));
    for p in positions {
        out.extend_from_slice(p);
    }
    let mut velocities = Vec::new();
    for w in positions.windows(2) {
        let v = [
            w[1][0] - w[0][0],
            w[1][1] - w[0][1],
            w[1][2] - w[0][2],
        ];
        out.extend_from_slice(&v);
        velocities.push(v);
    }
    if t == 3 {
        out.extend_from_slice(&[
            velocities[1][0] - velocities[0][0],
            velocities[1][1] - velocities[0][1],
            velocities[1][2] - velocities[0][2],
        ]);
    }
    Ok(out)
}

/// Target vector length for a T-frame sample.
pub fn target_dim(frames: usize) -> usize {
    3 * frames + 3 * frames.saturating_sub(1) + 3 * frames.saturating_sub(2)
}

/// Compose a sample: frame 1 is `index`, later frames drawn uniformly
/// from the whole dataset.
pub fn assemble_sample(
    dataset: &Dataset,
    index: usize,
    rng: &mut Prng,
    frames: usize,
) -> Result<MotionSample> {
    if dataset.is_empty() {
        return Err(Error::Config("dataset has no records".to_string()));
    }
    if index >= dataset.len() {
        return Err(Error::Config(format!(
            "record index {index} out of range for {} records",
            dataset.len()
        )));
    }
    let mut indices = vec![index];
    for _ in 1..frames {
        indices.push(rng.index(dataset.len()));
    }
    let positions: Vec<[f32; 3]> = indices.iter().map(|&i| dataset.position(i)).collect();
    let targets = ground_truth(&positions)?;
    Ok(MotionSample { indices, targets })
}

/// Pack a batch of samples into the network input layout
/// [batch, views, frames, height, width], bytes scaled to [0, 1].
pub fn batch_input<E: Scalar>(dataset: &Dataset, samples: &[MotionSample]) -> Tensor<E> {
    let h = dataset.header.height as usize;
    let w = dataset.header.width as usize;
    let views = dataset.header.views as usize;
    let frames = samples.first().map_or(1, |s| s.indices.len());
    let plane = h * w;
    let mut out = Tensor::zeros(&[samples.len(), views, frames, h, w]);
    let scale = E::from_f64(1.0 / 255.0);
    {
        let od = out.data_mut();
        for (n, sample) in samples.iter().enumerate() {
            for (t, &rec) in sample.indices.iter().enumerate() {
                let imgs = dataset.record_images(rec);
                for v in 0..views {
                    let src = &imgs[v * plane..(v + 1) * plane];
                    let dst = ((n * views + v) * frames + t) * plane;
                    for (o, &byte) in od[dst..dst + plane].iter_mut().zip(src) {
                        *o = E::from_f64(byte as f64) * scale;
                    }
                }
            }
        }
    }
    out
}

/// Stack normalized target vectors into a [batch, target_dim] tensor.
pub fn batch_targets<E: Scalar>(samples: &[MotionSample], norm: &TargetNormalizer) -> Tensor<E> {
    let dim = samples.first().map_or(0, |s| s.targets.len());
    let mut out = Tensor::zeros(&[samples.len(), dim]);
    {
        let od = out.data_mut();
        for (n, sample) in samples.iter().enumerate() {
            for (i, &t) in sample.targets.iter().enumerate() {
                od[n * dim + i] = E::from_f64(norm.normalize(t as f64));
            }
        }
    }
    out
}

/// Zero-mean scaling of all target components by the theoretical
/// coordinate standard deviation.
#[derive(Clone, Copy, Debug)]
pub struct TargetNormalizer {
    pub sigma: f64,
}

impl Default for TargetNormalizer {
    fn default() -> Self {
        TargetNormalizer {
            sigma: TARGET_SIGMA,
        }
    }
}

impl TargetNormalizer {
    pub fn normalize(&self, v: f64) -> f64 {
        v / self.sigma
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.sigma
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn rig_angle_is_as_published() {
        let rig = build_rig(256, DEFAULT_HALF_EXTENT).unwrap();
        let cosine = dot(rig.cameras[0].view, rig.cameras[1].view);
        // Independent computation from the raw directions.
        let raw = dot(VIEW_DIRECTIONS[0], VIEW_DIRECTIONS[1])
            / (dot(VIEW_DIRECTIONS[0], VIEW_DIRECTIONS[0]).sqrt()
                * dot(VIEW_DIRECTIONS[1], VIEW_DIRECTIONS[1]).sqrt());
        assert!((cosine - raw).abs() < 1e-12);
        assert!((raw - 65.0 / 66.0).abs() < 1e-12);
        let angle_deg = raw.acos().to_degrees();
        assert!((angle_deg - 9.9866).abs() < 0.0005, "angle {angle_deg}");
    }

    #[test]
    fn camera_bases_are_orthonormal() {
        let rig = build_rig(256, DEFAULT_HALF_EXTENT).unwrap();
        for cam in &rig.cameras {
            for v in [cam.view, cam.up, cam.right] {
                assert!((dot(v, v) - 1.0).abs() < 1e-12);
            }
            assert!(dot(cam.view, cam.up).abs() < 1e-12);
            assert!(dot(cam.view, cam.right).abs() < 1e-12);
            assert!(dot(cam.up, cam.right).abs() < 1e-12);
        }
    }

    #[test]
    fn rig_rejects_bad_inputs() {
        assert!(build_rig(4, 80.0).is_err());
        assert!(build_rig(256, 0.0).is_err());
        assert!(build_rig(256, -1.0).is_err());
    }

    #[test]
    fn origin_projects_to_image_center() {
        let rig = build_rig(256, DEFAULT_HALF_EXTENT).unwrap();
        for cam in &rig.cameras {
            let (row, col) = project([0.0, 0.0, 0.0], cam, &rig);
            assert!((row - 128.0).abs() < 1e-9);
            assert!((col - 128.0).abs() < 1e-9);
        }
    }

    #[test]
    fn right_axis_point_projects_to_right_edge() {
        let rig = build_rig(256, DEFAULT_HALF_EXTENT).unwrap();
        let cam = &rig.cameras[0];
        let p = [
            cam.right[0] * rig.half_extent,
            cam.right[1] * rig.half_extent,
            cam.right[2] * rig.half_extent,
        ];
        let (row, col) = project(p, cam, &rig);
        assert!((col - 256.0).abs() < 1e-9);
        assert!((row - 128.0).abs() < 1e-9);
    }

    #[test]
    fn spawn_cube_fits_in_frame_with_margin() {
        let rig = build_rig(256, DEFAULT_HALF_EXTENT).unwrap();
        let radius_px = 5.0 * 256.0 / (2.0 * rig.half_extent);
        let mut max_coord: f64 = 0.0;
        for cam in &rig.cameras {
            for xi in [-SPAWN_BOUND, SPAWN_BOUND] {
                for yi in [-SPAWN_BOUND, SPAWN_BOUND] {
                    for zi in [-SPAWN_BOUND, SPAWN_BOUND] {
                        let (row, col) = project([xi, yi, zi], cam, &rig);
                        for c in [row, col] {
                            assert!(c - radius_px > 0.0 && c + radius_px < 256.0);
                            max_coord = max_coord
                                .max(((c - 128.0) * 2.0 * rig.half_extent / 256.0).abs());
                        }
                    }
                }
            }
        }
        // The corners reach about 74.4 world units off-axis, inside the
        // 80-unit window but outside a 50-unit one.
        assert!(max_coord > 70.0 && max_coord < 76.0, "reach {max_coord}");
    }

    #[test]
    fn rendered_disc_has_right_area_and_extremes() {
        let rig = build_rig(64, DEFAULT_HALF_EXTENT).unwrap();
        let frame = render_frame([0.0, 0.0, 0.0], &rig);
        let radius_px = 5.0 * 64.0 / (2.0 * rig.half_extent);
        let expected_area = std::f64::consts::PI * radius_px * radius_px;
        for img in &frame.images {
            let area: f64 = img.iter().map(|&b| b as f64 / 255.0).sum();
            let rel = (area - expected_area).abs() / expected_area;
            assert!(rel < 0.02, "area {area}, expected {expected_area}");
            assert_eq!(img[32 * 64 + 32], 255); // disc center
            assert_eq!(img[0], 0); // far corner
        }
    }

    #[test]
    fn disc_centroid_matches_projection() {
        let rig = build_rig(128, DEFAULT_HALF_EXTENT).unwrap();
        let p = [13.0, -27.5, 8.25];
        let frame = render_frame(p, &rig);
        for (cam, img) in rig.cameras.iter().zip(&frame.images) {
            let (row, col) = project(p, cam, &rig);
            let (mut sr, mut sc, mut total) = (0.0, 0.0, 0.0);
            for i in 0..128 {
                for j in 0..128 {
                    let v = img[i * 128 + j] as f64;
                    sr += v * (i as f64 + 0.5);
                    sc += v * (j as f64 + 0.5);
                    total += v;
                }
            }
            assert!((sr / total - row).abs() < 0.5);
            assert!((sc / total - col).abs() < 0.5);
        }
    }

    #[test]
    fn nearby_positions_render_differently() {
        let rig = build_rig(64, DEFAULT_HALF_EXTENT).unwrap();
        // 3 world units ≈ 0.6 px at this scale: still visible to the
        // supersampled rim.
        let a = render_frame([0.0, 0.0, 0.0], &rig);
        let b = render_frame([3.0, 0.0, 0.0], &rig);
        assert_ne!(a.images[0], b.images[0]);
        // And rendering is bit-deterministic.
        let a2 = render_frame([0.0, 0.0, 0.0], &rig);
        assert_eq!(a.images[0], a2.images[0]);
        assert_eq!(a.images[1], a2.images[1]);
    }

    #[test]
    fn sampled_positions_have_uniform_moments() {
        let mut rng = Prng::seed(11);
        let n = 100_000;
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for _ in 0..n {
            let p = sample_position(&mut rng);
            for a in 0..3 {
                assert!(p[a] > -SPAWN_BOUND && p[a] < SPAWN_BOUND);
                sum[a] += p[a];
                sq[a] += p[a] * p[a];
            }
        }
        for a in 0..3 {
            let mean = sum[a] / n as f64;
            let std = (sq[a] / n as f64 - mean * mean).sqrt();
            assert!(mean.abs() < 0.5, "axis {a} mean {mean}");
            assert!((std - TARGET_SIGMA).abs() < 0.3, "axis {a} std {std}");
        }
    }

    #[test]
    fn dataset_round_trips_and_is_reproducible() {
        let dir = tempdir().unwrap();
        let rig = build_rig(16, DEFAULT_HALF_EXTENT).unwrap();
        let p1 = dir.path().join("a.pidb");
        let p2 = dir.path().join("b.pidb");
        generate_dataset(3, 99, &rig, &p1).unwrap();
        generate_dataset(3, 99, &rig, &p2).unwrap();
        let bytes1 = std::fs::read(&p1).unwrap();
        let bytes2 = std::fs::read(&p2).unwrap();
        assert_eq!(bytes1, bytes2);
        // Header is 32 bytes; each record is 12 + 2 * 16 * 16 bytes.
        assert_eq!(bytes1.len(), 32 + 3 * (12 + 2 * 16 * 16));

        let ds = read_dataset(&p1).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.header.seed, 99);
        assert_eq!(ds.header.views, 2);
        // Positions match an independent regeneration of the streams.
        for i in 0..3 {
            let mut rng = Prng::derive(99, "record", i as u64);
            let p = sample_position(&mut rng);
            let stored = ds.position(i as usize);
            for a in 0..3 {
                assert!((stored[a] - p[a] as f32).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn read_rejects_wrong_magic_and_truncation() {
        let dir = tempdir().unwrap();
        let bad = dir.path().join("bad.pidb");
        std::fs::write(&bad, b"NOPE").unwrap();
        let err = read_dataset(&bad).unwrap_err();
        assert!(err.to_string().contains("bad.pidb"));

        let rig = build_rig(16, DEFAULT_HALF_EXTENT).unwrap();
        let full = dir.path().join("full.pidb");
        generate_dataset(2, 1, &rig, &full).unwrap();
        let bytes = std::fs::read(&full).unwrap();
        let cut = dir.path().join("cut.pidb");
        std::fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
        assert!(read_dataset(&cut).is_err());
    }

    #[test]
    fn ground_truth_orders_and_differences() {
        let q = [[0.0f32, 0.0, 0.0], [1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let t = ground_truth(&q).unwrap();
        assert_eq!(t.len(), 18);
        assert_eq!(&t[0..9], &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(&t[9..12], &[1.0, 2.0, 3.0]); // v1
        assert_eq!(&t[12..15], &[3.0, 3.0, 3.0]); // v2
        assert_eq!(&t[15..18], &[2.0, 1.0, 0.0]); // a

        // a == q3 - 2 q2 + q1 exactly, identical f32 operands.
        for k in 0..3 {
            let a_direct = q[2][k] - 2.0 * q[1][k] + q[0][k];
            assert_eq!(t[15 + k], a_direct);
        }

        assert_eq!(ground_truth(&q[..1]).unwrap(), vec![0.0, 0.0, 0.0]);
        assert_eq!(ground_truth(&q[..2]).unwrap().len(), 9);
        assert!(ground_truth(&[]).is_err());
    }

    #[test]
    fn assembled_velocities_stay_in_range() {
        let rig = build_rig(16, DEFAULT_HALF_EXTENT).unwrap();
        let records: Vec<FrameRecord> = (0..32)
            .map(|i| {
                let mut rng = Prng::derive(7, "record", i);
                render_frame(sample_position(&mut rng), &rig)
            })
            .collect();
        let ds = Dataset::from_records(&records, 16, 7);
        let mut rng = Prng::seed(8);
        for trial in 0..10_000 {
            let s = assemble_sample(&ds, trial % ds.len(), &mut rng, 3).unwrap();
            assert_eq!(s.indices[0], trial % ds.len());
            for &v in &s.targets[9..15] {
                assert!(v > -90.0 && v < 90.0);
            }
            for &a in &s.targets[15..18] {
                assert!(a > -180.0 && a < 180.0);
            }
        }
    }

    #[test]
    fn normalizer_round_trips_and_scales() {
        let norm = TargetNormalizer::default();
        assert!((norm.normalize(25.9808) - 1.0).abs() < 1e-4);
        for v in [-45.0, -0.1, 0.0, 17.25, 44.9] {
            assert!((norm.denormalize(norm.normalize(v)) - v).abs() < 1e-6);
        }
        // Normalized sampled coordinates have std about 1.
        let mut rng = Prng::seed(12);
        let n = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let v = norm.normalize(rng.open_range(-SPAWN_BOUND, SPAWN_BOUND));
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).sqrt();
        assert!((std - 1.0).abs() < 0.02, "std {std}");
    }

    #[test]
    fn batch_input_scales_and_places_frames() {
        let rig = build_rig(16, DEFAULT_HALF_EXTENT).unwrap();
        let records: Vec<FrameRecord> = (0..4)
            .map(|i| {
                let mut rng = Prng::derive(3, "record", i);
                render_frame(sample_position(&mut rng), &rig)
            })
            .collect();
        let ds = Dataset::from_records(&records, 16, 3);
        let mut rng = Prng::seed(1);
        let samples = vec![
            assemble_sample(&ds, 0, &mut rng, 2).unwrap(),
            assemble_sample(&ds, 1, &mut rng, 2).unwrap(),
        ];
        let x: Tensor<f32> = batch_input(&ds, &samples);
        assert_eq!(x.shape(), &[2, 2, 2, 16, 16]);
        // Spot-check: element (n=1, view=0, t=0) against the raw bytes.
        let imgs = ds.record_images(samples[1].indices[0]);
        let base = ((1 * 2 + 0) * 2 + 0) * 256;
        for k in 0..256 {
            assert!((x.data()[base + k] - imgs[k] as f32 / 255.0).abs() < 1e-7);
        }
        assert!(x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
