//! Synthetic articulated-skeleton datasets.
//!
//! Poses come from forward kinematics over a 17-joint skeleton with
//! anthropometric bone lengths. Canonical (un-augmented) poses are kept
//! upright — the in-plane orientation of the torso stays within ±15° of
//! vertical — so that randomly rotated test poses are genuinely
//! out-of-distribution for models that never saw rotations.
//!
//! Under the default orthographic camera the generated (2D input, 3D target)
//! pairs satisfy the rotation-consistency relation exactly: rotating the
//! input about the image origin and the target about the optical axis gives
//! precisely the pair that the rotated world pose would have produced.
//!
//! Dataset files are JSON lines: one metadata object, then one object per
//! sample. Serialized floats round-trip bit-exactly.

use crate::error::{Error, Result};
use crate::geometry::{
    apply_rotation2, apply_rotation3, embed_so2_in_so3, root_align, Pose2D, Pose3D, Rotation2,
};
use crate::rng::stream_rng;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::TAU;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// One skeleton joint: its parent, the bone connecting it to the parent,
/// and per-axis limits on the local joint rotation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    /// Parent index; −1 marks the root.
    pub parent: i32,
    /// Bone length in millimetres (0 for the root).
    pub bone_length: f64,
    /// Unit direction of the bone in the parent frame at rest.
    pub rest_direction: [f64; 3],
    /// Maximum local rotation about x/y/z in radians.
    pub angle_limits: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Skeleton {
    pub joints: Vec<Joint>,
}

impl Skeleton {
    /// 17-joint desk-scale skeleton: pelvis root, spine→thorax→neck→head
    /// chain, two hip-knee-ankle legs, two shoulder-elbow-wrist arms.
    /// The root's in-plane limit keeps canonical poses upright (±15°).
    pub fn h36m17() -> Skeleton {
        let j = |name: &str, parent: i32, len: f64, dir: [f64; 3], lim: f64| Joint {
            name: name.to_string(),
            parent,
            bone_length: len,
            rest_direction: dir,
            angle_limits: [lim, lim, lim],
        };
        let joints = vec![
            Joint {
                name: "pelvis".to_string(),
                parent: -1,
                bone_length: 0.0,
                rest_direction: [0.0, 0.0, 0.0],
                // x/y tilt for depth variety, z capped at 15° in-plane.
                angle_limits: [0.35, 0.35, 15f64.to_radians()],
            },
            j("r_hip", 0, 130.0, [-1.0, 0.0, 0.0], 0.25),
            j("r_knee", 1, 450.0, [0.0, -1.0, 0.0], 0.6),
            j("r_ankle", 2, 440.0, [0.0, -1.0, 0.0], 0.9),
            j("l_hip", 0, 130.0, [1.0, 0.0, 0.0], 0.25),
            j("l_knee", 4, 450.0, [0.0, -1.0, 0.0], 0.6),
            j("l_ankle", 5, 440.0, [0.0, -1.0, 0.0], 0.9),
            j("spine", 0, 230.0, [0.0, 1.0, 0.0], 0.2),
            j("thorax", 7, 255.0, [0.0, 1.0, 0.0], 0.2),
            j("neck", 8, 120.0, [0.0, 1.0, 0.0], 0.3),
            j("head", 9, 115.0, [0.0, 1.0, 0.0], 0.3),
            j("l_shoulder", 8, 150.0, [1.0, 0.0, 0.0], 0.3),
            j("l_elbow", 11, 280.0, [0.0, -1.0, 0.0], 0.9),
            j("l_wrist", 12, 250.0, [0.0, -1.0, 0.0], 1.0),
            j("r_shoulder", 8, 150.0, [-1.0, 0.0, 0.0], 0.3),
            j("r_elbow", 14, 280.0, [0.0, -1.0, 0.0], 0.9),
            j("r_wrist", 15, 250.0, [0.0, -1.0, 0.0], 1.0),
        ];
        Skeleton { joints }
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::invalid_argument("empty skeleton".to_string()));
        }
        let mut roots = 0;
        for (i, j) in self.joints.iter().enumerate() {
            if j.parent < 0 {
                roots += 1;
            } else if j.parent as usize >= i {
                return Err(Error::invalid_argument(format!(
                    "joint {i} has parent {} which is not an earlier joint",
                    j.parent
                )));
            }
            if j.parent >= 0 && j.bone_length <= 0.0 {
                return Err(Error::invalid_argument(format!(
                    "joint {i} has non-positive bone length"
                )));
            }
        }
        if roots != 1 {
            return Err(Error::invalid_argument(format!(
                "skeleton must have exactly one root, found {roots}"
            )));
        }
        Ok(())
    }

    /// Stable content hash recorded in dataset metadata.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("skeleton serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn rot_x(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn mat_apply(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Forward kinematics with joint angles drawn uniformly within each joint's
/// limits. Bone lengths are preserved exactly (rotations are orthogonal).
pub fn sample_pose(skeleton: &Skeleton, rng: &mut impl Rng) -> Result<Pose3D> {
    skeleton.validate()?;
    let n = skeleton.joint_count();
    let mut world_rot: Vec<[[f64; 3]; 3]> = Vec::with_capacity(n);
    let mut pos: Vec<[f64; 3]> = Vec::with_capacity(n);
    for joint in &skeleton.joints {
        let draw = |rng: &mut dyn rand::RngCore, lim: f64| {
            if lim == 0.0 {
                0.0
            } else {
                rng.random_range(-lim..lim)
            }
        };
        let ax = draw(rng, joint.angle_limits[0]);
        let ay = draw(rng, joint.angle_limits[1]);
        let az = draw(rng, joint.angle_limits[2]);
        let local = mat_mul(&rot_z(az), &mat_mul(&rot_y(ay), &rot_x(ax)));
        if joint.parent < 0 {
            world_rot.push(local);
            pos.push([0.0, 0.0, 0.0]);
        } else {
            let p = joint.parent as usize;
            let rot = mat_mul(&world_rot[p], &local);
            let offset = mat_apply(
                &rot,
                [
                    joint.rest_direction[0] * joint.bone_length,
                    joint.rest_direction[1] * joint.bone_length,
                    joint.rest_direction[2] * joint.bone_length,
                ],
            );
            pos.push([
                pos[p][0] + offset[0],
                pos[p][1] + offset[1],
                pos[p][2] + offset[2],
            ]);
            world_rot.push(rot);
        }
    }
    Pose3D::new(pos)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CameraMode {
    Orthographic,
    Perspective,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub mode: CameraMode,
    /// Focal length (perspective only).
    pub focal: f64,
    /// Added to every joint's z before projecting; keeps the subject in
    /// front of a perspective camera.
    pub depth_offset: f64,
}

impl Camera {
    pub fn orthographic() -> Camera {
        Camera {
            mode: CameraMode::Orthographic,
            focal: 1.0,
            depth_offset: 0.0,
        }
    }

    pub fn perspective(focal: f64, depth_offset: f64) -> Camera {
        Camera {
            mode: CameraMode::Perspective,
            focal,
            depth_offset,
        }
    }
}

/// Projects a 3D pose to image coordinates.
pub fn project(pose: &Pose3D, camera: &Camera) -> Result<Pose2D> {
    let joints = match camera.mode {
        CameraMode::Orthographic => pose.joints().iter().map(|j| [j[0], j[1]]).collect(),
        CameraMode::Perspective => {
            if camera.focal <= 0.0 {
                return Err(Error::invalid_argument(
                    "perspective camera needs focal > 0".to_string(),
                ));
            }
            let mut out = Vec::with_capacity(pose.joint_count());
            for j in pose.joints() {
                let z = j[2] + camera.depth_offset;
                if z <= 0.0 {
                    return Err(Error::InvalidGeometry(format!(
                        "joint at depth {z} is behind the perspective camera"
                    )));
                }
                out.push([camera.focal * j[0] / z, camera.focal * j[1] / z]);
            }
            out
        }
    };
    Pose2D::new(joints)
}

/// One (2D input, 3D target) record. The target is root-aligned in camera
/// coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub input2d: Pose2D,
    pub target3d: Pose3D,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub applied_theta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub joint_count: usize,
    pub units: String,
    pub skeleton_hash: String,
    pub camera: Camera,
    pub seed: u64,
    pub split: String,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.meta.sample_count != self.samples.len() {
            return Err(Error::Validation(format!(
                "metadata declares {} samples, file holds {}",
                self.meta.sample_count,
                self.samples.len()
            )));
        }
        let n = self.meta.joint_count;
        let mut ids = std::collections::HashSet::new();
        for s in &self.samples {
            if s.input2d.joint_count() != n || s.target3d.joint_count() != n {
                return Err(Error::Validation(format!(
                    "sample {} joint count differs from metadata ({n})",
                    s.id
                )));
            }
            let root = s.target3d.joints()[0];
            if root[0].abs() > 1e-9 || root[1].abs() > 1e-9 || root[2].abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "sample {} target is not root-aligned",
                    s.id
                )));
            }
            if !ids.insert(s.id.clone()) {
                return Err(Error::Validation(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(())
    }

    /// (input, target) pairs for training and evaluation.
    pub fn pairs(&self) -> Vec<(Pose2D, Pose3D)> {
        self.samples
            .iter()
            .map(|s| (s.input2d.clone(), s.target3d.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub skeleton: Skeleton,
    pub camera: Camera,
    pub seed: u64,
    pub size: usize,
    pub split: String,
    /// Std of optional isotropic Gaussian keypoint jitter (mm); 0 disables.
    pub jitter_std: f64,
    /// Uniform global offset of the subject in the image plane (mm).
    pub root_offset: f64,
    /// Rejection limit on the in-plane tilt of the root→torso line
    /// (radians); keeps canonical poses upright. None disables.
    pub upright_limit: Option<f64>,
    /// Joint whose direction from the root defines the torso.
    pub torso_joint: usize,
}

impl GenConfig {
    pub fn new(split: &str, size: usize, seed: u64) -> GenConfig {
        GenConfig {
            skeleton: Skeleton::h36m17(),
            camera: Camera::orthographic(),
            seed,
            size,
            split: split.to_string(),
            jitter_std: 0.0,
            root_offset: 40.0,
            upright_limit: Some(15f64.to_radians()),
            torso_joint: 8,
        }
    }
}

/// Pure function of (skeleton, camera, seed, size): samples are generated on
/// independent per-sample RNG streams, so parallel generation is
/// deterministic.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.skeleton.validate()?;
    if cfg.upright_limit.is_some() && cfg.torso_joint >= cfg.skeleton.joint_count() {
        return Err(Error::invalid_argument(format!(
            "torso joint {} out of range",
            cfg.torso_joint
        )));
    }
    let samples: Vec<Result<Sample>> = (0..cfg.size)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, i as u64);
            let pose = loop {
                let candidate = sample_pose(&cfg.skeleton, &mut rng)?;
                let Some(limit) = cfg.upright_limit else {
                    break candidate;
                };
                let root = candidate.joints()[0];
                let torso = candidate.joints()[cfg.torso_joint];
                let tilt = (torso[0] - root[0]).atan2(torso[1] - root[1]).abs();
                if tilt <= limit {
                    break candidate;
                }
            };
            let ox = rng.random_range(-cfg.root_offset..=cfg.root_offset);
            let oy = rng.random_range(-cfg.root_offset..=cfg.root_offset);
            let world = Pose3D::new(
                pose.joints()
                    .iter()
                    .map(|j| [j[0] + ox, j[1] + oy, j[2]])
                    .collect(),
            )?;
            let mut input2d = project(&world, &cfg.camera)?;
            if cfg.jitter_std > 0.0 {
                let normal = Normal::new(0.0, cfg.jitter_std)
                    .map_err(|e| Error::invalid_argument(format!("jitter std: {e}")))?;
                input2d = Pose2D::new(
                    input2d
                        .joints()
                        .iter()
                        .map(|j| [j[0] + normal.sample(&mut rng), j[1] + normal.sample(&mut rng)])
                        .collect(),
                )?;
            }
            let target3d = root_align(&world, 0)?;
            Ok(Sample {
                id: format!("{}-{:06}", cfg.split, i),
                input2d,
                target3d,
                applied_theta: None,
            })
        })
        .collect();
    let samples: Result<Vec<Sample>> = samples.into_iter().collect();
    let samples = samples?;
    let dataset = Dataset {
        meta: DatasetMeta {
            joint_count: cfg.skeleton.joint_count(),
            units: "mm".to_string(),
            skeleton_hash: cfg.skeleton.hash(),
            camera: cfg.camera,
            seed: cfg.seed,
            split: cfg.split.clone(),
            sample_count: samples.len(),
        },
        samples,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Rotates the input and the target's xy columns by the same θ about the
/// origin / optical axis; depth is untouched.
pub fn augment(sample: &Sample, theta: f64) -> Result<Sample> {
    let r = Rotation2::from_angle(theta)?;
    let input2d = apply_rotation2(&sample.input2d, &r);
    let target3d = apply_rotation3(&sample.target3d, &embed_so2_in_so3(&r));
    Ok(Sample {
        id: sample.id.clone(),
        input2d,
        target3d,
        applied_theta: Some(sample.applied_theta.unwrap_or(0.0) + theta),
    })
}

/// Rotated copy of a test split: each sample independently augmented with
/// θ ~ Uniform[0, 2π), deterministic under `seed`. `force_zero` is a debug
/// switch that keeps every θ at 0.
pub fn make_rotated_testset(dataset: &Dataset, seed: u64, force_zero: bool) -> Result<Dataset> {
    let samples: Vec<Result<Sample>> = dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let theta = if force_zero {
                0.0
            } else {
                stream_rng(seed, i as u64).random_range(0.0..TAU)
            };
            augment(s, theta)
        })
        .collect();
    let samples: Result<Vec<Sample>> = samples.into_iter().collect();
    let samples = samples?;
    let mut meta = dataset.meta.clone();
    meta.split = format!("{}-rotated", dataset.meta.split);
    meta.seed = seed;
    Ok(Dataset { meta, samples })
}

/// Writes a dataset as JSON lines: metadata first, then one sample per line.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = serde_json::to_string(&dataset.meta)
        .map_err(|e| Error::Validation(format!("metadata serialization: {e}")))?;
    line.push('\n');
    w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    for s in &dataset.samples {
        let mut line = serde_json::to_string(s)
            .map_err(|e| Error::Validation(format!("sample serialization: {e}")))?;
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dataset back; parse failures name the 1-based line.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, meta_line) = lines.next().ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: "missing metadata line".to_string(),
    })?;
    let meta_line = meta_line.map_err(|e| Error::io(path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_line).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    let mut samples = Vec::with_capacity(meta.sample_count);
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        samples.push(sample);
    }
    let dataset = Dataset { meta, samples };
    dataset.validate()?;
    Ok(dataset)
}
