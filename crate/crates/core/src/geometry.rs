//! Rotation groups, pose containers, standardization, and Procrustes
//! alignment.
//!
//! One rotation convention is used everywhere: poses are row-vector point
//! sets, and applying a rotation `R` right-multiplies every row by `R^T`.
//! In-plane rotations of 2D keypoints correspond to rotations of the 3D
//! output about the optical axis (the z axis), which leaves the depth
//! coordinate untouched.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// An SO(2) element stored as (cos θ, sin θ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation2 {
    pub cos: f64,
    pub sin: f64,
}

impl Rotation2 {
    pub const IDENTITY: Self = Rotation2 { cos: 1.0, sin: 0.0 };

    /// R_θ for a finite angle in radians.
    pub fn from_angle(theta: f64) -> Result<Self> {
        if !theta.is_finite() {
            return Err(Error::invalid_argument(format!(
                "rotation angle must be finite, got {theta}"
            )));
        }
        Ok(Rotation2 {
            cos: theta.cos(),
            sin: theta.sin(),
        })
    }

    /// Group composition: `self` followed by `other` (angles add).
    pub fn compose(&self, other: &Rotation2) -> Rotation2 {
        Rotation2 {
            cos: self.cos * other.cos - self.sin * other.sin,
            sin: self.sin * other.cos + self.cos * other.sin,
        }
    }

    pub fn inverse(&self) -> Rotation2 {
        Rotation2 {
            cos: self.cos,
            sin: -self.sin,
        }
    }

    pub fn angle(&self) -> f64 {
        self.sin.atan2(self.cos)
    }

    /// Rotates a single point: row vector times R^T.
    pub fn rotate_point(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.cos * p[0] - self.sin * p[1],
            self.sin * p[0] + self.cos * p[1],
        ]
    }

    /// 2×2 matrix [[c,−s],[s,c]].
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        [[self.cos, -self.sin], [self.sin, self.cos]]
    }
}

/// An SO(3) element as a row-major 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation3 {
    pub matrix: [[f64; 3]; 3],
}

impl Rotation3 {
    pub const IDENTITY: Self = Rotation3 {
        matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    /// Wraps a matrix after checking orthonormality and det = +1 (1e-12).
    pub fn from_matrix(matrix: [[f64; 3]; 3]) -> Result<Self> {
        let r = Rotation3 { matrix };
        // R R^T = I
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += matrix[i][k] * matrix[j][k];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-12 {
                    return Err(Error::invalid_argument(
                        "matrix is not orthonormal within 1e-12".to_string(),
                    ));
                }
            }
        }
        if (r.det() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid_argument(format!(
                "matrix determinant {} != 1 within 1e-12",
                r.det()
            )));
        }
        Ok(r)
    }

    pub fn det(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn compose(&self, other: &Rotation3) -> Rotation3 {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[i][j] += self.matrix[i][k] * other.matrix[k][j];
                }
            }
        }
        Rotation3 { matrix: out }
    }

    /// Rotates a single point: row vector times matrix^T.
    pub fn rotate_point(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
        ]
    }
}

/// N×2 keypoint set. Units (normalized image units or millimetres) are
/// declared by the dataset that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    joints: Vec<[f64; 2]>,
}

impl Pose2D {
    pub fn new(joints: Vec<[f64; 2]>) -> Result<Self> {
        if joints.len() < 2 {
            return Err(Error::invalid_argument(format!(
                "a 2D pose needs at least 2 joints, got {}",
                joints.len()
            )));
        }
        if joints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid_argument(
                "2D pose contains non-finite coordinates".to_string(),
            ));
        }
        Ok(Pose2D { joints })
    }

    pub fn joints(&self) -> &[[f64; 2]] {
        &self.joints
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn mean(&self) -> [f64; 2] {
        let n = self.joints.len() as f64;
        let (mut cx, mut cy) = (0.0, 0.0);
        for j in &self.joints {
            cx += j[0];
            cy += j[1];
        }
        [cx / n, cy / n]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.joints
            .iter()
            .map(|j| j[0] * j[0] + j[1] * j[1])
            .sum::<f64>()
            .sqrt()
    }
}

/// N×3 joint position set in millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose3D {
    joints: Vec<[f64; 3]>,
}

impl Pose3D {
    pub fn new(joints: Vec<[f64; 3]>) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::invalid_argument("empty 3D pose".to_string()));
        }
        if joints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid_argument(
                "3D pose contains non-finite coordinates".to_string(),
            ));
        }
        Ok(Pose3D { joints })
    }

    pub fn joints(&self) -> &[[f64; 3]] {
        &self.joints
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    /// Root-mean-square coordinate magnitude, used to express residuals
    /// relative to output scale.
    pub fn rms(&self) -> f64 {
        let n = (self.joints.len() * 3) as f64;
        (self
            .joints
            .iter()
            .map(|j| j[0] * j[0] + j[1] * j[1] + j[2] * j[2])
            .sum::<f64>()
            / n)
            .sqrt()
    }

    /// Drops the z column.
    pub fn project_xy(&self) -> Pose2D {
        Pose2D {
            joints: self.joints.iter().map(|j| [j[0], j[1]]).collect(),
        }
    }
}

/// Rotates every joint of a 2D pose about the origin.
pub fn apply_rotation2(pose: &Pose2D, r: &Rotation2) -> Pose2D {
    Pose2D {
        joints: pose.joints.iter().map(|&p| r.rotate_point(p)).collect(),
    }
}

/// Embeds R_θ into SO(3) as blockdiag(R_θ, 1): rotation about the optical
/// axis, depth untouched.
pub fn embed_so2_in_so3(r: &Rotation2) -> Rotation3 {
    Rotation3 {
        matrix: [
            [r.cos, -r.sin, 0.0],
            [r.sin, r.cos, 0.0],
            [0.0, 0.0, 1.0],
        ],
    }
}

/// Rotates every joint of a 3D pose about the origin.
pub fn apply_rotation3(pose: &Pose3D, r: &Rotation3) -> Pose3D {
    Pose3D {
        joints: pose.joints.iter().map(|&p| r.rotate_point(p)).collect(),
    }
}

/// Translates the pose so the joint at `root_index` is exactly at the origin.
pub fn root_align(pose: &Pose3D, root_index: usize) -> Result<Pose3D> {
    let n = pose.joint_count();
    if root_index >= n {
        return Err(Error::invalid_argument(format!(
            "root index {root_index} out of range for {n} joints"
        )));
    }
    let root = pose.joints[root_index];
    let joints = pose
        .joints
        .iter()
        .map(|j| [j[0] - root[0], j[1] - root[1], j[2] - root[2]])
        .collect();
    Ok(Pose3D { joints })
}

/// How 2D standardization scales the centered coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StandardizationMode {
    /// One scalar scale: RMS distance of joints from the center. Commutes
    /// with rotations about the center.
    Isotropic,
    /// Per-axis standard deviations. Breaks rotation equivariance of the
    /// preprocessing; only the vanilla model may use it.
    PerCoordinate,
}

/// Centering/scale statistics for 2D inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub center: [f64; 2],
    /// Isotropic scale, or the x-axis std in per-coordinate mode.
    pub scale_x: f64,
    /// Equal to `scale_x` in isotropic mode.
    pub scale_y: f64,
    pub mode: StandardizationMode,
}

impl StandardizationStats {
    /// Identity transform (center 0, scale 1).
    pub fn identity() -> Self {
        StandardizationStats {
            center: [0.0, 0.0],
            scale_x: 1.0,
            scale_y: 1.0,
            mode: StandardizationMode::Isotropic,
        }
    }

    pub fn isotropic_scale(&self) -> f64 {
        self.scale_x
    }
}

/// Mean and scale over all joints of all poses.
///
/// Isotropic mode returns the RMS distance of centered joints as a single
/// scalar; per-coordinate mode returns per-axis standard deviations.
pub fn compute_stats(poses: &[Pose2D], mode: StandardizationMode) -> Result<StandardizationStats> {
    if poses.is_empty() {
        return Err(Error::invalid_argument(
            "cannot compute standardization statistics of an empty pose list".to_string(),
        ));
    }
    let total: usize = poses.iter().map(Pose2D::joint_count).sum();
    let tn = total as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    for pose in poses {
        for j in pose.joints() {
            cx += j[0];
            cy += j[1];
        }
    }
    let center = [cx / tn, cy / tn];

    let (mut ssx, mut ssy) = (0.0, 0.0);
    for pose in poses {
        for j in pose.joints() {
            let dx = j[0] - center[0];
            let dy = j[1] - center[1];
            ssx += dx * dx;
            ssy += dy * dy;
        }
    }
    let (scale_x, scale_y) = match mode {
        StandardizationMode::Isotropic => {
            let s = ((ssx + ssy) / tn).sqrt();
            (s, s)
        }
        StandardizationMode::PerCoordinate => ((ssx / tn).sqrt(), (ssy / tn).sqrt()),
    };
    if scale_x <= 1e-12 || scale_y <= 1e-12 {
        return Err(Error::degenerate(
            "zero-variance pose data, standardization scale vanishes".to_string(),
        ));
    }
    Ok(StandardizationStats {
        center,
        scale_x,
        scale_y,
        mode,
    })
}

/// (pose − center) / scale.
pub fn standardize(pose: &Pose2D, stats: &StandardizationStats) -> Pose2D {
    Pose2D {
        joints: pose
            .joints
            .iter()
            .map(|j| {
                [
                    (j[0] - stats.center[0]) / stats.scale_x,
                    (j[1] - stats.center[1]) / stats.scale_y,
                ]
            })
            .collect(),
    }
}

/// Inverse of [`standardize`].
pub fn destandardize(pose: &Pose2D, stats: &StandardizationStats) -> Pose2D {
    Pose2D {
        joints: pose
            .joints
            .iter()
            .map(|j| {
                [
                    j[0] * stats.scale_x + stats.center[0],
                    j[1] * stats.scale_y + stats.center[1],
                ]
            })
            .collect(),
    }
}

/// Result of similarity alignment of a source pose onto a target.
#[derive(Debug, Clone)]
pub struct ProcrustesResult {
    pub scale: f64,
    pub rotation: Rotation3,
    pub translation: [f64; 3],
    /// `scale * source · R^T + translation`.
    pub aligned: Pose3D,
}

/// Finds the similarity transform minimizing Σ‖s·source_i·R^T + t − target_i‖².
///
/// Umeyama's closed form: SVD of the 3×3 cross-covariance, with the sign of
/// the smallest singular value's column flipped when needed so the rotation
/// stays proper (det = +1).
pub fn procrustes_align(source: &Pose3D, target: &Pose3D) -> Result<ProcrustesResult> {
    let n = source.joint_count();
    if n != target.joint_count() {
        return Err(Error::invalid_argument(format!(
            "source has {n} joints but target has {}",
            target.joint_count()
        )));
    }
    if n < 3 {
        return Err(Error::invalid_argument(format!(
            "Procrustes alignment needs at least 3 points, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = |p: &Pose3D| -> [f64; 3] {
        let mut m = [0.0; 3];
        for j in p.joints() {
            for k in 0..3 {
                m[k] += j[k];
            }
        }
        for v in &mut m {
            *v /= nf;
        }
        m
    };
    let mu_s = mean(source);
    let mu_t = mean(target);

    // Cross-covariance Σ = (1/n) Σ_i (t_i − μ_t)(s_i − μ_s)^T and source variance.
    let mut cov = [[0.0f64; 3]; 3];
    let mut var_s = 0.0;
    for (s, t) in source.joints().iter().zip(target.joints()) {
        let sc = [s[0] - mu_s[0], s[1] - mu_s[1], s[2] - mu_s[2]];
        let tc = [t[0] - mu_t[0], t[1] - mu_t[1], t[2] - mu_t[2]];
        for r in 0..3 {
            for c in 0..3 {
                cov[r][c] += tc[r] * sc[c];
            }
        }
        var_s += sc[0] * sc[0] + sc[1] * sc[1] + sc[2] * sc[2];
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= nf;
        }
    }
    var_s /= nf;
    if var_s <= 1e-24 {
        return Err(Error::degenerate(
            "source pose has zero spatial variance".to_string(),
        ));
    }

    let m = nalgebra::Matrix3::new(
        cov[0][0], cov[0][1], cov[0][2], cov[1][0], cov[1][1], cov[1][2], cov[2][0], cov[2][1],
        cov[2][2],
    );
    let svd = m.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::degenerate("SVD of cross-covariance failed".to_string()))?;
    let vt = svd
        .v_t
        .ok_or_else(|| Error::degenerate("SVD of cross-covariance failed".to_string()))?;
    let sigma = svd.singular_values;
    // Rank of the centered configuration must be ≥ 2 for the rotation to be
    // determined.
    if sigma[1] <= 1e-12 * sigma[0].max(1e-300) {
        return Err(Error::degenerate(
            "centered source configuration has rank < 2".to_string(),
        ));
    }
    let mut d = [1.0, 1.0, 1.0];
    if (u.determinant() * vt.determinant()) < 0.0 {
        d[2] = -1.0;
    }
    let d_mat = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(d[0], d[1], d[2]));
    let r = u * d_mat * vt;

    let mut rotation = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rotation[i][j] = r[(i, j)];
        }
    }
    let rotation = Rotation3 { matrix: rotation };
    let scale = (sigma[0] * d[0] + sigma[1] * d[1] + sigma[2] * d[2]) / var_s;
    let r_mu_s = rotation.rotate_point(mu_s);
    let translation = [
        mu_t[0] - scale * r_mu_s[0],
        mu_t[1] - scale * r_mu_s[1],
        mu_t[2] - scale * r_mu_s[2],
    ];
    let aligned = Pose3D {
        joints: source
            .joints()
            .iter()
            .map(|&p| {
                let rp = rotation.rotate_point(p);
                [
                    scale * rp[0] + translation[0],
                    scale * rp[1] + translation[1],
                    scale * rp[2] + translation[2],
                ]
            })
            .collect(),
    };
    Ok(ProcrustesResult {
        scale,
        rotation,
        translation,
        aligned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::{PI, TAU};

    fn random_pose3(rng: &mut impl Rng, n: usize, scale: f64) -> Pose3D {
        Pose3D::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-scale..scale),
                        rng.random_range(-scale..scale),
                        rng.random_range(-scale..scale),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    fn random_pose2(rng: &mut impl Rng, n: usize, scale: f64) -> Pose2D {
        Pose2D::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-scale..scale),
                        rng.random_range(-scale..scale),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn rotation2_identity_and_period() {
        let id = Rotation2::from_angle(0.0).unwrap();
        assert_eq!(id.matrix(), [[1.0, 0.0], [0.0, 1.0]]);
        let full = Rotation2::from_angle(TAU).unwrap();
        assert!((full.cos - 1.0).abs() < 1e-12);
        assert!(full.sin.abs() < 1e-12);
    }

    #[test]
    fn rotation2_quarter_turn() {
        let r = Rotation2::from_angle(PI / 2.0).unwrap();
        let p = r.rotate_point([1.0, 0.0]);
        assert!((p[0]).abs() < 1e-15);
        assert!((p[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rotation2_rejects_non_finite() {
        assert!(Rotation2::from_angle(f64::NAN).is_err());
        assert!(Rotation2::from_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn apply_rotation2_point_reflection() {
        let pose = Pose2D::new(vec![[1.0, 0.0], [0.0, 2.0]]).unwrap();
        let r = Rotation2::from_angle(PI).unwrap();
        let rotated = apply_rotation2(&pose, &r);
        assert_relative_eq!(rotated.joints()[0][0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(rotated.joints()[0][1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(rotated.joints()[1][0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(rotated.joints()[1][1], -2.0, epsilon = 1e-12);
    }

    #[test]
    fn apply_rotation2_preserves_frobenius_norm() {
        let mut rng = stream_rng(11, 0);
        for _ in 0..20 {
            let pose = random_pose2(&mut rng, 9, 100.0);
            let r = Rotation2::from_angle(rng.random_range(0.0..TAU)).unwrap();
            let rotated = apply_rotation2(&pose, &r);
            assert_relative_eq!(
                rotated.frobenius_norm(),
                pose.frobenius_norm(),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn embed_identity_and_quarter_turn() {
        let id = embed_so2_in_so3(&Rotation2::IDENTITY);
        assert_eq!(id.matrix, Rotation3::IDENTITY.matrix);
        let q = embed_so2_in_so3(&Rotation2::from_angle(PI / 2.0).unwrap());
        let expect = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(q.matrix[i][j], expect[i][j], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn embedded_rotation_fixes_optical_axis() {
        let mut rng = stream_rng(11, 1);
        for _ in 0..10 {
            let r = embed_so2_in_so3(&Rotation2::from_angle(rng.random_range(0.0..TAU)).unwrap());
            let z = rng.random_range(-50.0..50.0);
            let p = r.rotate_point([0.0, 0.0, z]);
            assert_eq!(p, [0.0, 0.0, z]);
        }
    }

    #[test]
    fn apply_rotation3_embedded_quarter_turn() {
        let pose = Pose3D::new(vec![[1.0, 0.0, 5.0]]).unwrap();
        let r = embed_so2_in_so3(&Rotation2::from_angle(PI / 2.0).unwrap());
        let rotated = apply_rotation3(&pose, &r);
        assert_relative_eq!(rotated.joints()[0][0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(rotated.joints()[0][1], 1.0, epsilon = 1e-15);
        assert_relative_eq!(rotated.joints()[0][2], 5.0, epsilon = 1e-15);
    }

    #[test]
    fn apply_rotation3_preserves_norms() {
        let mut rng = stream_rng(11, 2);
        for _ in 0..20 {
            let pose = random_pose3(&mut rng, 7, 100.0);
            let r = embed_so2_in_so3(&Rotation2::from_angle(rng.random_range(0.0..TAU)).unwrap());
            let rotated = apply_rotation3(&pose, &r);
            let norm = |p: &Pose3D| {
                p.joints()
                    .iter()
                    .map(|j| j[0] * j[0] + j[1] * j[1] + j[2] * j[2])
                    .sum::<f64>()
                    .sqrt()
            };
            assert_relative_eq!(norm(&rotated), norm(&pose), max_relative = 1e-12);
        }
    }

    #[test]
    fn root_align_removes_translation_and_is_idempotent() {
        let mut rng = stream_rng(11, 3);
        let pose = random_pose3(&mut rng, 8, 50.0);
        let offset = [13.0, -4.0, 99.0];
        let shifted = Pose3D::new(
            pose.joints()
                .iter()
                .map(|j| [j[0] + offset[0], j[1] + offset[1], j[2] + offset[2]])
                .collect(),
        )
        .unwrap();
        let a = root_align(&pose, 0).unwrap();
        let b = root_align(&shifted, 0).unwrap();
        for (x, y) in a.joints().iter().zip(b.joints()) {
            for k in 0..3 {
                assert_relative_eq!(x[k], y[k], epsilon = 1e-12, max_relative = 1e-12);
            }
        }
        assert_eq!(a.joints()[0], [0.0, 0.0, 0.0]);
        let again = root_align(&a, 0).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn root_align_rejects_bad_index() {
        let pose = Pose3D::new(vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]).unwrap();
        assert!(matches!(
            root_align(&pose, 2),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn compute_stats_two_point_example() {
        let pose = Pose2D::new(vec![[-1.0, 0.0], [1.0, 0.0]]).unwrap();
        let stats = compute_stats(&[pose], StandardizationMode::Isotropic).unwrap();
        assert_eq!(stats.center, [0.0, 0.0]);
        assert_relative_eq!(stats.isotropic_scale(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn compute_stats_degenerate_single_point() {
        let pose = Pose2D::new(vec![[3.0, 4.0], [3.0, 4.0]]).unwrap();
        let err = compute_stats(&[pose.clone(), pose], StandardizationMode::Isotropic).unwrap_err();
        assert!(matches!(err, Error::DegenerateData(_)));
    }

    #[test]
    fn compute_stats_rejects_empty() {
        assert!(matches!(
            compute_stats(&[], StandardizationMode::Isotropic),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn standardized_output_has_zero_mean_unit_rms() {
        let mut rng = stream_rng(11, 4);
        let poses: Vec<Pose2D> = (0..50).map(|_| random_pose2(&mut rng, 17, 500.0)).collect();
        for mode in [
            StandardizationMode::Isotropic,
            StandardizationMode::PerCoordinate,
        ] {
            let stats = compute_stats(&poses, mode).unwrap();
            let out: Vec<Pose2D> = poses.iter().map(|p| standardize(p, &stats)).collect();
            let restats = compute_stats(&out, mode).unwrap();
            assert!(restats.center[0].abs() < 1e-10);
            assert!(restats.center[1].abs() < 1e-10);
            assert_relative_eq!(restats.scale_x, 1.0, epsilon = 1e-10);
            assert_relative_eq!(restats.scale_y, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn standardize_identity_stats_is_identity() {
        let pose = Pose2D::new(vec![[1.0, 2.0], [3.0, -4.0]]).unwrap();
        let out = standardize(&pose, &StandardizationStats::identity());
        assert_eq!(out, pose);
    }

    #[test]
    fn procrustes_identity_on_equal_poses() {
        let mut rng = stream_rng(11, 5);
        let pose = random_pose3(&mut rng, 10, 100.0);
        let res = procrustes_align(&pose, &pose).unwrap();
        assert_relative_eq!(res.scale, 1.0, epsilon = 1e-9);
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(
                    res.rotation.matrix[i][j],
                    Rotation3::IDENTITY.matrix[i][j],
                    epsilon = 1e-9
                );
            }
        }
        for k in 0..3 {
            assert!(res.translation[k].abs() < 1e-7);
        }
        let residual = crate::metrics::mpjpe(&pose, &res.aligned).unwrap();
        assert!(residual < 1e-9);
    }

    #[test]
    fn procrustes_recovers_constructed_similarity() {
        let mut rng = stream_rng(11, 6);
        let source = random_pose3(&mut rng, 12, 100.0);
        let r = embed_so2_in_so3(&Rotation2::from_angle(PI / 3.0).unwrap());
        let t = [10.0, 20.0, 30.0];
        let target = Pose3D::new(
            source
                .joints()
                .iter()
                .map(|&p| {
                    let rp = r.rotate_point(p);
                    [2.0 * rp[0] + t[0], 2.0 * rp[1] + t[1], 2.0 * rp[2] + t[2]]
                })
                .collect(),
        )
        .unwrap();
        let res = procrustes_align(&source, &target).unwrap();
        assert_relative_eq!(res.scale, 2.0, epsilon = 1e-9);
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(res.rotation.matrix[i][j], r.matrix[i][j], epsilon = 1e-9);
            }
        }
        for k in 0..3 {
            assert_relative_eq!(res.translation[k], t[k], epsilon = 1e-7);
        }
        let residual = crate::metrics::mpjpe(&target, &res.aligned).unwrap();
        assert!(residual <= 1e-9);
    }

    #[test]
    fn procrustes_planar_rotation_matches_grid_search() {
        // Brute-force oracle: scan z-rotation angles at 1e-4 rad resolution
        // and compare against the recovered angle on noisy planar data.
        let mut rng = stream_rng(11, 7);
        let n = 14;
        let source = Pose3D::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-100.0..100.0),
                        rng.random_range(-100.0..100.0),
                        0.0,
                    ]
                })
                .collect(),
        )
        .unwrap();
        let true_theta = 1.23456;
        let r = embed_so2_in_so3(&Rotation2::from_angle(true_theta).unwrap());
        let target = Pose3D::new(
            source
                .joints()
                .iter()
                .map(|&p| {
                    let rp = r.rotate_point(p);
                    [
                        rp[0] + rng.random_range(-0.5..0.5),
                        rp[1] + rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                    ]
                })
                .collect(),
        )
        .unwrap();

        let res = procrustes_align(&source, &target).unwrap();
        let recovered = res.rotation.matrix[1][0].atan2(res.rotation.matrix[0][0]);

        let cost = |theta: f64| -> f64 {
            // Best similarity residual restricted to a pure z-rotation with
            // the optimal scale/translation folded out by centering.
            let rot = embed_so2_in_so3(&Rotation2::from_angle(theta).unwrap());
            let rotated = apply_rotation3(&source, &rot);
            let res = procrustes_residual_fixed_rotation(&rotated, &target);
            res
        };
        let mut best = (f64::INFINITY, 0.0);
        let steps = (TAU / 1e-4) as usize;
        for i in 0..steps {
            let theta = i as f64 * 1e-4;
            let c = cost(theta);
            if c < best.0 {
                best = (c, theta);
            }
        }
        let mut diff = (best.1 - recovered).abs();
        if diff > PI {
            diff = TAU - diff;
        }
        assert!(
            diff < 1e-3,
            "grid-search angle {} vs procrustes angle {}",
            best.1,
            recovered
        );
    }

    /// Residual after optimal scale+translation for a FIXED rotation,
    /// computed from first principles (independent of procrustes_align).
    fn procrustes_residual_fixed_rotation(rotated_source: &Pose3D, target: &Pose3D) -> f64 {
        let n = rotated_source.joint_count() as f64;
        let mut mu_s = [0.0; 3];
        let mut mu_t = [0.0; 3];
        for (s, t) in rotated_source.joints().iter().zip(target.joints()) {
            for k in 0..3 {
                mu_s[k] += s[k] / n;
                mu_t[k] += t[k] / n;
            }
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (s, t) in rotated_source.joints().iter().zip(target.joints()) {
            for k in 0..3 {
                let sc = s[k] - mu_s[k];
                let tc = t[k] - mu_t[k];
                num += sc * tc;
                den += sc * sc;
            }
        }
        let scale = num / den;
        let mut ss = 0.0;
        for (s, t) in rotated_source.joints().iter().zip(target.joints()) {
            for k in 0..3 {
                let d = scale * (s[k] - mu_s[k]) - (t[k] - mu_t[k]);
                ss += d * d;
            }
        }
        ss
    }

    #[test]
    fn procrustes_degenerate_source_errors() {
        // All points on a line: rank 1.
        let source = Pose3D::new((0..5).map(|i| [i as f64, 0.0, 0.0]).collect()).unwrap();
        let target = Pose3D::new((0..5).map(|i| [0.0, i as f64, 0.0]).collect()).unwrap();
        assert!(matches!(
            procrustes_align(&source, &target),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn procrustes_beats_random_similarity_transforms() {
        let mut rng = stream_rng(11, 8);
        let source = random_pose3(&mut rng, 9, 80.0);
        let target = random_pose3(&mut rng, 9, 80.0);
        let res = procrustes_align(&source, &target).unwrap();
        let optimal: f64 = res
            .aligned
            .joints()
            .iter()
            .zip(target.joints())
            .map(|(a, t)| {
                (a[0] - t[0]).powi(2) + (a[1] - t[1]).powi(2) + (a[2] - t[2]).powi(2)
            })
            .sum();
        for _ in 0..1000 {
            let s = rng.random_range(0.1..5.0);
            let rot = random_rotation3(&mut rng);
            let t = [
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
            ];
            let residual: f64 = source
                .joints()
                .iter()
                .zip(target.joints())
                .map(|(p, q)| {
                    let rp = rot.rotate_point(*p);
                    (s * rp[0] + t[0] - q[0]).powi(2)
                        + (s * rp[1] + t[1] - q[1]).powi(2)
                        + (s * rp[2] + t[2] - q[2]).powi(2)
                })
                .sum();
            assert!(residual + 1e-9 >= optimal);
        }
    }

    fn random_rotation3(rng: &mut impl Rng) -> Rotation3 {
        // Compose three embedded/axis rotations; good enough coverage for a
        // spot check.
        let a = rng.random_range(0.0..TAU);
        let b = rng.random_range(0.0..TAU);
        let c = rng.random_range(0.0..TAU);
        let rz = embed_so2_in_so3(&Rotation2::from_angle(a).unwrap());
        let rx = Rotation3 {
            matrix: [
                [1.0, 0.0, 0.0],
                [0.0, b.cos(), -b.sin()],
                [0.0, b.sin(), b.cos()],
            ],
        };
        let ry = Rotation3 {
            matrix: [
                [c.cos(), 0.0, c.sin()],
                [0.0, 1.0, 0.0],
                [-c.sin(), 0.0, c.cos()],
            ],
        };
        rz.compose(&rx).compose(&ry)
    }

    proptest! {
        #[test]
        fn rotation2_composition_is_angle_addition(
            a in -10.0f64..10.0,
            b in -10.0f64..10.0,
        ) {
            let ra = Rotation2::from_angle(a).unwrap();
            let rb = Rotation2::from_angle(b).unwrap();
            let composed = ra.compose(&rb);
            let direct = Rotation2::from_angle(a + b).unwrap();
            prop_assert!((composed.cos - direct.cos).abs() < 1e-12);
            prop_assert!((composed.sin - direct.sin).abs() < 1e-12);
        }

        #[test]
        fn embed_is_group_homomorphism(
            a in -10.0f64..10.0,
            b in -10.0f64..10.0,
        ) {
            let ra = Rotation2::from_angle(a).unwrap();
            let rb = Rotation2::from_angle(b).unwrap();
            let lhs = embed_so2_in_so3(&ra.compose(&rb));
            let rhs = embed_so2_in_so3(&ra).compose(&embed_so2_in_so3(&rb));
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((lhs.matrix[i][j] - rhs.matrix[i][j]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn standardize_roundtrip(seed in 0u64..1000) {
            let mut rng = stream_rng(seed, 90);
            let pose = random_pose2(&mut rng, 6, 300.0);
            let stats = compute_stats(std::slice::from_ref(&pose), StandardizationMode::Isotropic).unwrap();
            let back = destandardize(&standardize(&pose, &stats), &stats);
            for (a, b) in back.joints().iter().zip(pose.joints()) {
                prop_assert!((a[0] - b[0]).abs() < 1e-12 * (1.0 + b[0].abs()));
                prop_assert!((a[1] - b[1]).abs() < 1e-12 * (1.0 + b[1].abs()));
            }
        }

        #[test]
        fn isotropic_standardize_commutes_with_rotation(seed in 0u64..200) {
            let mut rng = stream_rng(seed, 91);
            let pose = random_pose2(&mut rng, 8, 200.0);
            let theta = rng.random_range(0.0..TAU);
            let r = Rotation2::from_angle(theta).unwrap();

            // Center at the pose mean so the statistics are rotation-stable.
            let stats = compute_stats(std::slice::from_ref(&pose), StandardizationMode::Isotropic).unwrap();
            let rotated = apply_rotation2(&pose, &r);
            let stats_rot = compute_stats(std::slice::from_ref(&rotated), StandardizationMode::Isotropic).unwrap();

            let a = standardize(&rotated, &stats_rot);
            let b = apply_rotation2(&standardize(&pose, &stats), &r);
            for (x, y) in a.joints().iter().zip(b.joints()) {
                prop_assert!((x[0] - y[0]).abs() < 1e-12);
                prop_assert!((x[1] - y[1]).abs() < 1e-12);
            }
        }
    }
}
