//! Synthetic partial point-cloud datasets.
//!
//! Objects are sampled on their surface in a canonical frame, posed in front
//! of a camera at the origin, back-face culled against the viewing direction,
//! jittered and resampled to a fixed point count. Each stored cloud is
//! centered on its centroid and scaled to unit bounding radius; the ground
//! truth translation is stored in the same normalized coordinates.
//!
//! Files are JSON lines: a header object followed by one object per
//! instance. Floats are written in shortest round-trip form, so reloading is
//! bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Matrix3;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::geometry::{rotation_about, Pose, RotationMatrix, UnitQuaternion, Vec3};
use crate::rng::indexed_stream;

pub const FORMAT_NAME: &str = "rfmpose-dataset";
pub const FORMAT_VERSION: u32 = 1;
pub const MAX_VIEW_RETRIES: usize = 16;
/// A mug counts as symmetric when less than this fraction of its visible
/// points lie on the handle.
pub const HANDLE_VISIBLE_FRACTION: f64 = 0.05;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad shape parameters: {0}")]
    BadShapeParams(String),
    #[error("fewer than a quarter of the requested points visible after {0} view retries")]
    EmptyView(usize),
    #[error("degenerate point cloud (bounding radius {0:e})")]
    DegenerateCloud(f64),
    #[error("dataset format version {found} (expected {expected})")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Box,
    Cylinder,
    MugLike,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Box, Category::Cylinder, Category::MugLike];

    pub fn name(&self) -> &'static str {
        match self {
            Category::Box => "box",
            Category::Cylinder => "cylinder",
            Category::MugLike => "mug_like",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Index of the shape parameter whose range is split between train and
    /// test.
    fn split_param(&self) -> usize {
        match self {
            Category::Box => 0,
            Category::Cylinder | Category::MugLike => 1,
        }
    }

    fn split_span(&self) -> (f64, f64) {
        match self {
            Category::Box => (0.10, 0.30),
            Category::Cylinder => (0.08, 0.24),
            Category::MugLike => (0.07, 0.13),
        }
    }

    fn yaw_range_deg(&self) -> f64 {
        match self {
            // Keeps the box's 180° symmetries outside the pose distribution.
            Category::Box => 60.0,
            Category::Cylinder | Category::MugLike => 180.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

const SPLIT_BINS: usize = 8;

/// Half-open intervals of the split parameter reserved for `split`. Train
/// takes even bins, test odd bins, so the two never overlap.
pub fn split_ranges(category: Category, split: Split) -> Vec<(f64, f64)> {
    let (lo, hi) = category.split_span();
    let w = (hi - lo) / SPLIT_BINS as f64;
    let parity = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    (0..SPLIT_BINS).filter(|b| b % 2 == parity).map(|b| (lo + b as f64 * w, lo + (b + 1) as f64 * w)).collect()
}

pub fn split_key(category: Category, shape: &[f64]) -> f64 {
    shape[category.split_param()]
}

/// Shape parameters:
/// - Box: `[ex, ey, ez]` full extents.
/// - Cylinder: `[radius, height]`.
/// - MugLike: `[radius, height, handle_x, handle_y, handle_z]`, with the
///   handle a block on the `+x` side of the body.
pub fn sample_shape_params(category: Category, split: Split, rng: &mut impl Rng) -> Vec<f64> {
    let bins = split_ranges(category, split);
    let (lo, hi) = bins[rng.random_range(0..bins.len())];
    let key = lo + rng.random::<f64>() * (hi - lo);
    match category {
        Category::Box => vec![key, key * rng.random_range(0.5..0.7), key * rng.random_range(0.25..0.4)],
        Category::Cylinder => vec![rng.random_range(0.03..0.06), key],
        Category::MugLike => {
            let r = rng.random_range(0.035..0.05);
            vec![r, key, 0.45 * r, 0.3 * r, 0.55 * key]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub position: Vec3,
    pub normal: Vec3,
    pub on_handle: bool,
}

/// (center, normal, half extents of the two in-plane axes, in-plane axes, area)
type BoxFace = (Vec3, Vec3, [f64; 2], [Vec3; 2], f64);

/// The six axis-aligned faces of a box.
fn box_faces(center: Vec3, ext: [f64; 3]) -> Vec<BoxFace> {
    let axes = [Vec3::x(), Vec3::y(), Vec3::z()];
    let mut faces = Vec::with_capacity(6);
    for a in 0..3 {
        let (u, v) = ((a + 1) % 3, (a + 2) % 3);
        let area = ext[u] * ext[v];
        for sign in [1.0, -1.0] {
            let n = axes[a] * sign;
            faces.push((center + n * (ext[a] / 2.0), n, [ext[u] / 2.0, ext[v] / 2.0], [axes[u], axes[v]], area));
        }
    }
    faces
}

fn check_shape(category: Category, shape: &[f64]) -> Result<(), DataError> {
    let expected = match category {
        Category::Box => 3,
        Category::Cylinder => 2,
        Category::MugLike => 5,
    };
    if shape.len() != expected {
        return Err(DataError::BadShapeParams(format!(
            "{} takes {expected} parameters, got {}",
            category.name(),
            shape.len()
        )));
    }
    if let Some(bad) = shape.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(DataError::BadShapeParams(format!("non-positive parameter {bad}")));
    }
    Ok(())
}

enum Patch {
    Face { center: Vec3, normal: Vec3, half: [f64; 2], axes: [Vec3; 2], handle: bool },
    Lateral { radius: f64, height: f64 },
    Cap { radius: f64, z: f64, normal: Vec3 },
}

impl Patch {
    fn sample(&self, rng: &mut impl Rng) -> SurfacePoint {
        match self {
            Patch::Face { center, normal, half, axes, handle } => {
                let a = rng.random_range(-half[0]..=half[0]);
                let b = rng.random_range(-half[1]..=half[1]);
                SurfacePoint { position: center + axes[0] * a + axes[1] * b, normal: *normal, on_handle: *handle }
            }
            Patch::Lateral { radius, height } => {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let z = rng.random_range(-height / 2.0..=height / 2.0);
                let (s, c) = theta.sin_cos();
                SurfacePoint {
                    position: Vec3::new(radius * c, radius * s, z),
                    normal: Vec3::new(c, s, 0.0),
                    on_handle: false,
                }
            }
            Patch::Cap { radius, z, normal } => {
                let rho = radius * rng.random::<f64>().sqrt();
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let (s, c) = theta.sin_cos();
                SurfacePoint { position: Vec3::new(rho * c, rho * s, *z), normal: *normal, on_handle: false }
            }
        }
    }
}

fn patches(category: Category, shape: &[f64]) -> Vec<(Patch, f64)> {
    let faces = |center: Vec3, ext: [f64; 3], handle: bool| {
        box_faces(center, ext)
            .into_iter()
            .map(move |(c, n, half, axes, area)| (Patch::Face { center: c, normal: n, half, axes, handle }, area))
    };
    let cylinder = |r: f64, h: f64| {
        vec![
            (Patch::Lateral { radius: r, height: h }, std::f64::consts::TAU * r * h),
            (Patch::Cap { radius: r, z: h / 2.0, normal: Vec3::z() }, std::f64::consts::PI * r * r),
            (Patch::Cap { radius: r, z: -h / 2.0, normal: -Vec3::z() }, std::f64::consts::PI * r * r),
        ]
    };
    match category {
        Category::Box => faces(Vec3::zeros(), [shape[0], shape[1], shape[2]], false).collect(),
        Category::Cylinder => cylinder(shape[0], shape[1]),
        Category::MugLike => {
            let (r, h) = (shape[0], shape[1]);
            let ext = [shape[2], shape[3], shape[4]];
            let mut p = cylinder(r, h);
            p.extend(faces(Vec3::new(r + ext[0] / 2.0, 0.0, 0.0), ext, true));
            p
        }
    }
}

/// Points sampled uniformly by surface area on the canonical shape, with
/// outward normals. The object center is the origin and `z` is up.
pub fn generate_canonical(
    category: Category,
    shape: &[f64],
    dense_count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<SurfacePoint>, DataError> {
    check_shape(category, shape)?;
    let patches = patches(category, shape);
    let total: f64 = patches.iter().map(|(_, a)| a).sum();
    let mut out = Vec::with_capacity(dense_count);
    for _ in 0..dense_count {
        let mut u = rng.random::<f64>() * total;
        let mut chosen = &patches[patches.len() - 1].0;
        for (p, area) in &patches {
            if u < *area {
                chosen = p;
                break;
            }
            u -= area;
        }
        out.push(chosen.sample(rng));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub points: Vec<Vec3>,
    /// Fraction of the points surviving culling that lie on a handle.
    pub handle_fraction: f64,
}

/// Poses the canonical cloud, keeps points whose world normal faces the
/// camera (`n · view_dir < 0`), jitters and resamples to exactly `n` points.
pub fn render_partial(
    canonical: &[SurfacePoint],
    rotation: &RotationMatrix,
    translation: &Vec3,
    view_dir: &Vec3,
    n: usize,
    jitter_sigma: f64,
    rng: &mut impl Rng,
) -> Result<RenderedView, DataError> {
    let visible: Vec<(Vec3, bool)> = canonical
        .iter()
        .filter(|sp| (rotation * sp.normal).dot(view_dir) < 0.0)
        .map(|sp| (rotation * sp.position + translation, sp.on_handle))
        .collect();
    if visible.len() * 4 < n || visible.is_empty() {
        return Err(DataError::EmptyView(0));
    }
    let handle_fraction = visible.iter().filter(|(_, h)| *h).count() as f64 / visible.len() as f64;
    let mut points: Vec<Vec3> = visible.into_iter().map(|(p, _)| p).collect();
    if jitter_sigma > 0.0 {
        let noise = Normal::new(0.0, jitter_sigma).expect("finite sigma");
        for p in &mut points {
            *p += Vec3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
        }
    }
    let m = points.len();
    let out = if m >= n {
        // Partial Fisher-Yates: n distinct points.
        for i in 0..n {
            let j = rng.random_range(i..m);
            points.swap(i, j);
        }
        points.truncate(n);
        points
    } else {
        let mut out = points.clone();
        while out.len() < n {
            out.push(points[rng.random_range(0..m)]);
        }
        out
    };
    Ok(RenderedView { points: out, handle_fraction })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub points: Vec<Vec3>,
    pub translation: Vec3,
    pub centroid: Vec3,
    pub scale: f64,
}

/// Centers the cloud on its centroid and scales it to unit bounding radius;
/// the translation is re-expressed as `(t - centroid) / scale`.
pub fn normalize_instance(cloud: &[Vec3], translation: &Vec3) -> Result<Normalized, DataError> {
    if cloud.is_empty() {
        return Err(DataError::DegenerateCloud(0.0));
    }
    let centroid = cloud.iter().fold(Vec3::zeros(), |acc, p| acc + p) / cloud.len() as f64;
    let scale = cloud.iter().map(|p| (p - centroid).norm()).fold(0.0, f64::max);
    if !(scale > 1e-6) {
        return Err(DataError::DegenerateCloud(scale));
    }
    Ok(Normalized {
        points: cloud.iter().map(|p| (p - centroid) / scale).collect(),
        translation: (translation - centroid) / scale,
        centroid,
        scale,
    })
}

pub fn denormalize_translation(t: &Vec3, centroid: &Vec3, scale: f64) -> Vec3 {
    t * scale + centroid
}

/// Nominal camera-facing orientation: canonical `z` (up) tilted toward the
/// camera by `elevation`, canonical `x` along the image x axis.
fn facing_rotation(elevation: f64) -> RotationMatrix {
    let (s, c) = elevation.sin_cos();
    Matrix3::from_columns(&[Vec3::x(), Vec3::new(0.0, -s, c), Vec3::new(0.0, -c, -s)])
}

/// Draws a ground-truth pose in the camera frame (camera at the origin
/// looking down `+z`).
pub fn sample_pose(category: Category, rng: &mut impl Rng) -> (RotationMatrix, Vec3) {
    let elevation = rng.random_range(20f64..50.0).to_radians();
    let yaw_lim = category.yaw_range_deg();
    let yaw = rng.random_range(-yaw_lim..yaw_lim).to_radians();
    let tilt_x = rng.random_range(-15f64..15.0).to_radians();
    let tilt_y = rng.random_range(-15f64..15.0).to_radians();
    let r = facing_rotation(elevation)
        * rotation_about(&Vec3::z(), yaw)
        * rotation_about(&Vec3::x(), tilt_x)
        * rotation_about(&Vec3::y(), tilt_y);
    let t = Vec3::new(rng.random_range(-0.15..0.15), rng.random_range(-0.1..0.1), rng.random_range(0.7..1.1));
    (r, t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub id: usize,
    pub category: Category,
    pub shape_params: Vec<f64>,
    /// Ground-truth rotation, `[w, x, y, z]`, canonical hemisphere.
    pub quaternion: [f64; 4],
    /// Ground-truth translation in normalized coordinates.
    pub translation: [f64; 3],
    pub centroid: [f64; 3],
    pub scale: f64,
    pub handle_occluded: bool,
    /// Normalized points.
    pub points: Vec<[f64; 3]>,
}

impl Instance {
    pub fn rotation(&self) -> UnitQuaternion {
        let [w, x, y, z] = self.quaternion;
        UnitQuaternion::from_raw(w, x, y, z)
    }

    pub fn rotation_matrix(&self) -> RotationMatrix {
        self.rotation().to_matrix()
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::from(self.translation)
    }

    /// Ground truth in normalized coordinates.
    pub fn gt_pose(&self) -> Pose {
        Pose::from_rotation(&self.rotation_matrix(), self.translation())
    }

    /// Continuous symmetry axis in the canonical frame, if any.
    pub fn symmetry_axis(&self) -> Option<Vec3> {
        match self.category {
            Category::Box => None,
            Category::Cylinder => Some(Vec3::z()),
            Category::MugLike => self.handle_occluded.then(Vec3::z),
        }
    }

    pub fn cloud(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.points.len(), 3), |(i, j)| self.points[i][j])
    }

    pub fn denormalize(&self, t: &Vec3) -> Vec3 {
        denormalize_translation(t, &Vec3::from(self.centroid), self.scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub count: usize,
    pub n_points: usize,
    /// Categories assigned round-robin by instance index.
    pub categories: Vec<Category>,
    pub jitter: f64,
    pub split: Split,
    /// Dense canonical samples per output point.
    pub dense_factor: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 500,
            n_points: 128,
            categories: vec![Category::Box, Category::Cylinder],
            jitter: 0.001,
            split: Split::Train,
            dense_factor: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub n_points: usize,
    pub count: usize,
    pub seed: u64,
    /// Scene units per metre.
    pub scene_scale: f64,
    pub split: Split,
    pub jitter: f64,
    pub category_mix: Vec<(Category, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    pub instances: Vec<Instance>,
}

fn generate_instance(config: &DatasetConfig, seed: u64, id: usize) -> Result<Instance, DataError> {
    let category = config.categories[id % config.categories.len()];
    let mut rng = indexed_stream(seed, &format!("data/{}/instance", config.split.name()), id as u64);
    let shape = sample_shape_params(category, config.split, &mut rng);
    let dense = generate_canonical(category, &shape, config.dense_factor.max(4) * config.n_points, &mut rng)?;
    let (rotation, translation) = sample_pose(category, &mut rng);
    let mut view_dir = translation.normalize();
    let mut view = None;
    for _ in 0..MAX_VIEW_RETRIES {
        match render_partial(&dense, &rotation, &translation, &view_dir, config.n_points, config.jitter, &mut rng) {
            Ok(v) => {
                view = Some(v);
                break;
            }
            Err(DataError::EmptyView(_)) => {
                let wobble = Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.0);
                view_dir = (translation.normalize() + wobble).normalize();
            }
            Err(e) => return Err(e),
        }
    }
    let view = view.ok_or(DataError::EmptyView(MAX_VIEW_RETRIES))?;
    let norm = normalize_instance(&view.points, &translation)?;
    let q = UnitQuaternion::from_matrix(&rotation);
    Ok(Instance {
        id,
        category,
        shape_params: shape,
        quaternion: q.to_array(),
        translation: norm.translation.into(),
        centroid: norm.centroid.into(),
        scale: norm.scale,
        handle_occluded: category == Category::MugLike && view.handle_fraction < HANDLE_VISIBLE_FRACTION,
        points: norm.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
    })
}

/// Generates a dataset; each instance draws from its own seed-derived
/// stream, so the result does not depend on execution mode.
pub fn build_dataset(config: &DatasetConfig, seed: u64, exec: Exec) -> Result<DatasetFile, DataError> {
    if config.categories.is_empty() || config.n_points == 0 {
        return Err(DataError::Format("config needs categories and a positive point count".into()));
    }
    let instances = exec
        .map_range(config.count, |id| generate_instance(config, seed, id))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let category_mix = Category::ALL
        .into_iter()
        .map(|c| (c, instances.iter().filter(|i| i.category == c).count()))
        .filter(|(_, n)| *n > 0)
        .collect();
    Ok(DatasetFile {
        header: DatasetHeader {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            n_points: config.n_points,
            count: config.count,
            seed,
            scene_scale: 1.0,
            split: config.split,
            jitter: config.jitter,
            category_mix,
        },
        instances,
    })
}

impl DatasetFile {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), DataError> {
        let to_io = |e: serde_json::Error| DataError::Io(e.into());
        serde_json::to_writer(&mut w, &self.header).map_err(to_io)?;
        w.write_all(b"\n")?;
        for inst in &self.instances {
            serde_json::to_writer(&mut w, inst).map_err(to_io)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, DataError> {
        let mut lines = BufReader::new(r).lines();
        let first = lines.next().ok_or_else(|| DataError::Format("empty file".into()))??;
        let probe: serde_json::Value =
            serde_json::from_str(&first).map_err(|e| DataError::Format(format!("header: {e}")))?;
        if probe.get("format").and_then(|f| f.as_str()) != Some(FORMAT_NAME) {
            return Err(DataError::Format("not an rfmpose dataset".into()));
        }
        let found = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != FORMAT_VERSION {
            return Err(DataError::FormatVersionMismatch { found, expected: FORMAT_VERSION });
        }
        let header: DatasetHeader =
            serde_json::from_value(probe).map_err(|e| DataError::Format(format!("header: {e}")))?;
        let mut instances = Vec::with_capacity(header.count);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let inst: Instance =
                serde_json::from_str(&line).map_err(|e| DataError::Format(format!("record {i}: {e}")))?;
            if inst.points.len() != header.n_points {
                return Err(DataError::Format(format!(
                    "record {i} has {} points, header says {}",
                    inst.points.len(),
                    header.n_points
                )));
            }
            instances.push(inst);
        }
        if instances.len() != header.count {
            return Err(DataError::Format(format!(
                "header declares {} records, found {}",
                header.count,
                instances.len()
            )));
        }
        Ok(Self { header, instances })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    /// Restricts to the given categories (header counts updated).
    pub fn filter_categories(&self, keep: &[Category]) -> Self {
        let instances: Vec<Instance> = self.instances.iter().filter(|i| keep.contains(&i.category)).cloned().collect();
        let mut header = self.header.clone();
        header.count = instances.len();
        header.category_mix.retain(|(c, _)| keep.contains(c));
        Self { header, instances }
    }
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile, DataError> {
    DatasetFile::read_from(File::open(path)?)
}
