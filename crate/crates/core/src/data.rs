//! Scene datasets: synthetic generation, the two standard pose-file formats,
//! and the native JSON document.
//!
//! Synthetic scenes stand in for images with bearing features: for each of a
//! fixed set of landmarks, the unit vector from the camera to the landmark
//! expressed in the camera frame. That map is smooth in all six degrees of
//! freedom, so pose recovery is well posed once there are at least four
//! non-coplanar landmarks.

use std::collections::HashSet;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{normalize, rotmat_to_quat, Pose, Quaternion, UnitQuaternion, Vec3};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Frames per synthetic capture sequence.
pub const SEQUENCE_LEN: usize = 500;

/// Frames between look-at keyframes along a synthetic trajectory.
const KEYFRAME_SPACING: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub id: String,
    pub features: Vec<f64>,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub name: String,
    pub extents: Vec3,
    pub feature_dim: usize,
    pub train: Vec<Frame>,
    pub test: Vec<Frame>,
}

impl SceneDataset {
    /// Checks feature dimensions, finiteness, unit rotations and that train
    /// and test ids are disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (split, frames) in [("train", &self.train), ("test", &self.test)] {
            for f in frames {
                let bad = |reason: String| Error::MalformedFile {
                    line: None,
                    reason: format!("{split} frame {:?}: {reason}", f.id),
                };
                if f.features.len() != self.feature_dim {
                    return Err(bad(format!(
                        "{} features, dataset declares {}",
                        f.features.len(),
                        self.feature_dim
                    )));
                }
                if !f.features.iter().all(|v| v.is_finite()) || !f.pose.is_finite() {
                    return Err(bad("non-finite value".into()));
                }
                if !f.pose.rotation.is_unit() {
                    return Err(bad(format!("rotation norm {}", f.pose.rotation.norm())));
                }
                if !seen.insert(f.id.as_str()) {
                    return Err(bad("duplicate id".into()));
                }
            }
        }
        Ok(())
    }

    pub fn to_document(&self) -> DatasetDocument {
        let rec = |f: &Frame| FrameRecord {
            id: f.id.clone(),
            features: f.features.clone(),
            position: f.pose.position.to_array(),
            quaternion: f.pose.rotation.to_array(),
        };
        DatasetDocument {
            format_version: DATASET_FORMAT_VERSION,
            name: self.name.clone(),
            extents: self.extents.to_array(),
            feature_dim: self.feature_dim,
            train: self.train.iter().map(rec).collect(),
            test: self.test.iter().map(rec).collect(),
        }
    }

    pub fn from_document(doc: DatasetDocument) -> Result<Self> {
        if doc.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::MalformedFile {
                line: None,
                reason: format!("dataset format version {}", doc.format_version),
            });
        }
        let frame = |r: FrameRecord| Frame {
            id: r.id,
            features: r.features,
            pose: Pose::new(
                Vec3::from_slice(&r.position),
                Quaternion::from_array(r.quaternion),
            ),
        };
        let ds = SceneDataset {
            name: doc.name,
            extents: Vec3::from_slice(&doc.extents),
            feature_dim: doc.feature_dim,
            train: doc.train.into_iter().map(frame).collect(),
            test: doc.test.into_iter().map(frame).collect(),
        };
        ds.validate()?;
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub position: [f64; 3],
    /// `(w, x, y, z)`
    pub quaternion: [f64; 4],
}

/// Native on-disk dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDocument {
    pub format_version: u32,
    pub name: String,
    pub extents: [f64; 3],
    pub feature_dim: usize,
    pub train: Vec<FrameRecord>,
    pub test: Vec<FrameRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    positions: Vec<Vec3>,
}

impl LandmarkSet {
    /// Requires at least four landmarks spanning a volume.
    pub fn new(positions: Vec<Vec3>) -> Result<Self> {
        if positions.len() < 4 {
            return Err(Error::InvalidConfig(format!(
                "need at least 4 landmarks, got {}",
                positions.len()
            )));
        }
        if !spans_volume(&positions) {
            return Err(Error::InvalidConfig("landmarks are coplanar".into()));
        }
        Ok(Self { positions })
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }
}

/// Greedy tetrahedron search: farthest point, then largest triangle, then
/// largest volume.
fn spans_volume(points: &[Vec3]) -> bool {
    let p0 = points[0];
    let far = |f: &dyn Fn(Vec3) -> f64| {
        points
            .iter()
            .copied()
            .max_by(|a, b| f(*a).total_cmp(&f(*b)))
            .unwrap()
    };
    let p1 = far(&|p| (p - p0).norm());
    let e1 = p1 - p0;
    let p2 = far(&|p| e1.cross(p - p0).norm());
    let n = e1.cross(p2 - p0);
    let p3 = far(&|p| n.dot(p - p0).abs());
    let scale = e1.norm();
    let volume = n.dot(p3 - p0).abs();
    scale > 0.0 && volume > 1e-9 * scale.powi(3)
}

/// Unit bearings from the camera to each landmark in the camera frame,
/// concatenated.
pub fn bearing_features(
    position: Vec3,
    rotation: UnitQuaternion,
    landmarks: &LandmarkSet,
) -> Vec<f64> {
    let to_camera = rotation.inverse();
    landmarks
        .positions
        .iter()
        .flat_map(|&l| {
            let b = to_camera.rotate(l - position);
            let n = b.norm();
            [b.x / n, b.y / n, b.z / n]
        })
        .collect()
}

/// Rotation whose `+z` axis points from `eye` to `target`, with the camera
/// `y` axis as close to world `+y` (up) as possible.
pub fn look_at(eye: Vec3, target: Vec3) -> Option<UnitQuaternion> {
    let f = (target - eye).normalized()?;
    let x = Vec3::new(0.0, 1.0, 0.0).cross(f).normalized()?;
    let y = f.cross(x);
    let m = [[x.x, y.x, f.x], [x.y, y.y, f.y], [x.z, y.z, f.z]];
    rotmat_to_quat(&m).ok()
}

/// Published sizes and train/test frame counts of the 7Scenes scenes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePreset {
    pub name: &'static str,
    pub extents: Vec3,
    pub n_train: usize,
    pub n_test: usize,
}

pub const SEVEN_SCENES: [ScenePreset; 7] = [
    ScenePreset {
        name: "chess",
        extents: Vec3::new(3.0, 2.0, 1.0),
        n_train: 4000,
        n_test: 2000,
    },
    ScenePreset {
        name: "fire",
        extents: Vec3::new(2.5, 1.0, 1.0),
        n_train: 2000,
        n_test: 2000,
    },
    ScenePreset {
        name: "heads",
        extents: Vec3::new(2.0, 0.5, 1.0),
        n_train: 1000,
        n_test: 1000,
    },
    ScenePreset {
        name: "office",
        extents: Vec3::new(2.5, 2.0, 1.5),
        n_train: 6000,
        n_test: 4000,
    },
    ScenePreset {
        name: "pumpkin",
        extents: Vec3::new(2.5, 2.0, 1.0),
        n_train: 4000,
        n_test: 2000,
    },
    ScenePreset {
        name: "redkitchen",
        extents: Vec3::new(4.0, 3.0, 1.5),
        n_train: 7000,
        n_test: 5000,
    },
    ScenePreset {
        name: "stairs",
        extents: Vec3::new(2.5, 2.0, 1.5),
        n_train: 2000,
        n_test: 1000,
    },
];

pub fn preset(name: &str) -> Option<ScenePreset> {
    SEVEN_SCENES
        .iter()
        .copied()
        .find(|p| p.name.eq_ignore_ascii_case(name))
}

pub const DEFAULT_LANDMARKS: usize = 16;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.01;

impl ScenePreset {
    /// Synthetic scene of this preset's size with default landmark count and
    /// noise.
    pub fn synthesize(&self, seed: u64) -> Result<SceneDataset> {
        let mut ds = synth_scene(
            self.extents,
            self.n_train,
            self.n_test,
            DEFAULT_LANDMARKS,
            DEFAULT_NOISE_SIGMA,
            seed,
        )?;
        ds.name = self.name.to_string();
        Ok(ds)
    }
}

fn random_in_box(rng: &mut ChaCha8Rng, half: Vec3) -> Vec3 {
    Vec3::new(
        rng.random_range(-half.x..=half.x),
        rng.random_range(-half.y..=half.y),
        rng.random_range(-half.z..=half.z),
    )
}

fn sample_landmarks(rng: &mut ChaCha8Rng, half: Vec3, n: usize) -> Result<LandmarkSet> {
    let margin = (0.5 * 2.0 * half.max_component()).max(1.0);
    let outer = half + Vec3::new(margin, margin, margin);
    let keep_out = half + Vec3::new(0.2 * margin, 0.2 * margin, 0.2 * margin);
    loop {
        let mut pts = Vec::with_capacity(n);
        while pts.len() < n {
            let p = random_in_box(rng, outer);
            let inside = p.x.abs() < keep_out.x && p.y.abs() < keep_out.y && p.z.abs() < keep_out.z;
            if !inside {
                pts.push(p);
            }
        }
        if n < 4 || spans_volume(&pts) {
            return LandmarkSet::new(pts);
        }
    }
}

/// Smooth path through the box: per-axis sinusoids with random frequency and
/// phase.
struct SinePath {
    amplitude: Vec3,
    freq: [f64; 3],
    phase: [f64; 3],
}

impl SinePath {
    fn sample(rng: &mut ChaCha8Rng, half: Vec3) -> Self {
        let mut f = || rng.random_range(0.5..1.5);
        let freq = [f(), f(), f()];
        let mut p = || rng.random_range(0.0..TAU);
        let phase = [p(), p(), p()];
        Self {
            amplitude: half * 0.9,
            freq,
            phase,
        }
    }

    fn at(&self, t: f64) -> Vec3 {
        let a = self.amplitude.to_array();
        let c = |i: usize| a[i] * (TAU * self.freq[i] * t + self.phase[i]).sin();
        Vec3::new(c(0), c(1), c(2))
    }
}

fn keyframe_rotation(rng: &mut ChaCha8Rng, eye: Vec3, half: Vec3) -> UnitQuaternion {
    let min_dist = 0.25 * 2.0 * half.max_component();
    for _ in 0..100 {
        let target = random_in_box(rng, half);
        let d = target - eye;
        let Some(dir) = d.normalized() else { continue };
        if d.norm() >= min_dist && dir.y.abs() <= 0.8 {
            if let Some(q) = look_at(eye, target) {
                return q;
            }
        }
    }
    look_at(eye, eye + Vec3::new(0.0, 0.0, 1.0)).expect("horizontal look-at is well defined")
}

/// Camera poses of one capture sequence. Orientations come from look-at
/// targets at keyframes, interpolated along the relative rotation's
/// axis-angle.
fn sequence_poses(rng: &mut ChaCha8Rng, half: Vec3, len: usize) -> Vec<(Vec3, UnitQuaternion)> {
    let path = SinePath::sample(rng, half);
    let t = |k: usize| k as f64 / SEQUENCE_LEN as f64;
    let n_keys = (len - 1) / KEYFRAME_SPACING + 2;
    let keys: Vec<UnitQuaternion> = (0..n_keys)
        .map(|j| keyframe_rotation(rng, path.at(t(j * KEYFRAME_SPACING)), half))
        .collect();
    (0..len)
        .map(|k| {
            let j = k / KEYFRAME_SPACING;
            let s = (k % KEYFRAME_SPACING) as f64 / KEYFRAME_SPACING as f64;
            let rel = keys[j].inverse().compose(keys[j + 1]).canonical();
            let (axis, angle) = rel.to_axis_angle();
            let rot = keys[j]
                .compose(Quaternion::from_axis_angle(axis, s * angle))
                .canonical();
            (path.at(t(k)), rot)
        })
        .collect()
}

fn split_sequences(n: usize) -> Vec<usize> {
    let count = n.div_ceil(SEQUENCE_LEN);
    (0..count)
        .map(|i| n / count + usize::from(i < n % count))
        .collect()
}

/// Generates a learnable feature-to-pose scene centred on the origin.
///
/// Train and test frames come from distinct capture sequences (ids
/// `seq-NN/frame-NNNNNN`, training sequences numbered first).
pub fn synth_scene(
    extents: Vec3,
    n_train: usize,
    n_test: usize,
    n_landmarks: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<SceneDataset> {
    if n_train == 0 || n_test == 0 || n_landmarks == 0 {
        return Err(Error::InvalidConfig(
            "frame and landmark counts must be at least 1".into(),
        ));
    }
    if !(extents.x > 0.0 && extents.y > 0.0 && extents.z > 0.0) || !extents.is_finite() {
        return Err(Error::InvalidConfig("extents must be positive".into()));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidConfig(
            "noise sigma must be non-negative".into(),
        ));
    }
    if n_landmarks < 4 {
        return Err(Error::InvalidConfig("need at least 4 landmarks".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = extents * 0.5;
    let landmarks = sample_landmarks(&mut rng, half, n_landmarks)?;
    let noise = Normal::new(0.0, noise_sigma).expect("sigma checked above");

    let mut seq_index = 0;
    let mut make_split = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Frame> {
        let mut frames = Vec::with_capacity(n);
        for len in split_sequences(n) {
            for (k, (position, rotation)) in sequence_poses(rng, half, len).into_iter().enumerate()
            {
                let mut features = bearing_features(position, rotation, &landmarks);
                if noise_sigma > 0.0 {
                    for v in &mut features {
                        *v += noise.sample(rng);
                    }
                }
                frames.push(Frame {
                    id: format!("seq-{seq_index:02}/frame-{k:06}"),
                    features,
                    pose: Pose::new(position, rotation.quaternion()),
                });
            }
            seq_index += 1;
        }
        frames
    };
    let train = make_split(n_train, &mut rng);
    let test = make_split(n_test, &mut rng);

    let ds = SceneDataset {
        name: "synthetic".into(),
        extents,
        feature_dim: 3 * n_landmarks,
        train,
        test,
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub extents: Vec3,
    pub n_train: usize,
    pub n_test: usize,
}

/// Bounding-box extents of all ground-truth positions plus split sizes.
pub fn split_stats(ds: &SceneDataset) -> SplitStats {
    let mut positions = ds.train.iter().chain(&ds.test).map(|f| f.pose.position);
    let extents = match positions.next() {
        Some(first) => {
            let (lo, hi) = positions.fold((first, first), |(lo, hi), p| {
                (lo.component_min(p), hi.component_max(p))
            });
            hi - lo
        }
        None => Vec3::ZERO,
    };
    SplitStats {
        extents,
        n_train: ds.train.len(),
        n_test: ds.test.len(),
    }
}

fn parse_reals<'a>(tokens: impl Iterator<Item = &'a str>, line: Option<usize>) -> Result<Vec<f64>> {
    tokens
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::MalformedFile {
                    line,
                    reason: format!("not a finite number: {t:?}"),
                })
        })
        .collect()
}

/// Parses a 7Scenes-style 4x4 pose matrix.
///
/// The matrix is read as camera-to-world: the translation column is the
/// camera position and the upper-left block rotates camera axes into the
/// world. Flip that here if a dataset stores world-to-camera.
pub fn parse_matrix_pose_file(text: &str) -> Result<Pose> {
    let values = parse_reals(text.split_whitespace(), None)?;
    if values.len() != 16 {
        return Err(Error::MalformedFile {
            line: None,
            reason: format!("expected 16 numbers, found {}", values.len()),
        });
    }
    let bottom = &values[12..16];
    let expected = [0.0, 0.0, 0.0, 1.0];
    if bottom
        .iter()
        .zip(expected)
        .any(|(v, e)| (v - e).abs() > 1e-6)
    {
        return Err(Error::MalformedFile {
            line: None,
            reason: format!("last row {bottom:?} is not 0 0 0 1"),
        });
    }
    let m = [
        [values[0], values[1], values[2]],
        [values[4], values[5], values[6]],
        [values[8], values[9], values[10]],
    ];
    let rotation = rotmat_to_quat(&m)?;
    Ok(Pose::new(
        Vec3::new(values[3], values[7], values[11]),
        rotation.quaternion(),
    ))
}

pub fn format_matrix_pose(pose: &Pose) -> Result<String> {
    let r = crate::geom::quat_to_rotmat(UnitQuaternion::try_new(pose.rotation)?);
    let t = pose.position.to_array();
    let mut out = String::new();
    for i in 0..3 {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r[i][0], r[i][1], r[i][2], t[i]
        ));
    }
    out.push_str("0\t0\t0\t1\n");
    Ok(out)
}

pub const POSE_LINE_HEADER: [&str; 3] = [
    "Visual Landmark Dataset V1",
    "ImageFile, Camera Position [X Y Z W P Q R]",
    "",
];

/// Parses a Cambridge-Landmarks-style pose list: three header lines, then
/// `path x y z qw qx qy qz` per line. Quaternions are normalized on ingest
/// (canonical sign `w >= 0`) and rejected if their norm is outside
/// `[0.9, 1.1]`.
pub fn parse_pose_line_file(text: &str) -> Result<Vec<(String, Pose)>> {
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() < 3 {
        return Err(Error::MalformedFile {
            line: Some(lines.len() + 1),
            reason: "missing 3-line header".into(),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(3) {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 8 {
            return Err(Error::MalformedFile {
                line: Some(line_no),
                reason: format!("expected 8 fields, found {}", fields.len()),
            });
        }
        let v = parse_reals(fields[1..].iter().copied(), Some(line_no))?;
        let q = Quaternion::new(v[3], v[4], v[5], v[6]);
        let norm = q.norm();
        if !(0.9..=1.1).contains(&norm) {
            return Err(Error::BadQuaternion {
                line: line_no,
                norm,
            });
        }
        let unit = normalize(q)?;
        out.push((
            fields[0].to_string(),
            Pose::new(Vec3::new(v[0], v[1], v[2]), unit.canonical().quaternion()),
        ));
    }
    Ok(out)
}

pub fn format_pose_line_file(entries: &[(String, Pose)]) -> String {
    let mut out = POSE_LINE_HEADER.join("\n");
    out.push('\n');
    for (id, pose) in entries {
        let p = pose.position;
        let q = pose.rotation;
        out.push_str(&format!(
            "{id} {} {} {} {} {} {} {}\n",
            p.x, p.y, p.z, q.w, q.x, q.y, q.z
        ));
    }
    out
}
