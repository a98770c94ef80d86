//! Protocol 1 / Protocol 2 errors, the equivariance-error diagnostic, and
//! multi-seed aggregation.
//!
//! Protocol 1 is the mean per-joint position error in millimetres; Protocol 2
//! applies an optimal similarity alignment first, removing global rotation,
//! translation and scale. The equivariance error measures how far a model is
//! from geometric consistency: it is the MPJPE between lifting a rotated
//! input and rotating the lifted output, so it composes with the benchmark
//! tables unit-for-unit.

use crate::error::{Error, Result};
use crate::geometry::{
    apply_rotation2, apply_rotation3, embed_so2_in_so3, procrustes_align, Pose3D, Rotation2,
};
use crate::models::LifterModel;
use crate::Pose2D;
use serde::{Deserialize, Serialize};

/// Mean per-joint L2 error in the units of the poses (millimetres here).
pub fn mpjpe(gt: &Pose3D, pred: &Pose3D) -> Result<f64> {
    if gt.joint_count() != pred.joint_count() {
        return Err(Error::invalid_argument(format!(
            "joint count mismatch: {} vs {}",
            gt.joint_count(),
            pred.joint_count()
        )));
    }
    let n = gt.joint_count() as f64;
    let sum: f64 = gt
        .joints()
        .iter()
        .zip(pred.joints())
        .map(|(a, b)| {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        })
        .sum();
    Ok(sum / n)
}

/// MPJPE after Procrustes alignment of the prediction onto the ground truth.
pub fn pa_mpjpe(gt: &Pose3D, pred: &Pose3D) -> Result<f64> {
    let aligned = procrustes_align(pred, gt)?.aligned;
    mpjpe(gt, &aligned)
}

/// Which output columns an equivariance audit measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnMask {
    Full,
    /// The xy columns only (hybrid-model audit).
    Xy,
    /// The depth column only.
    Z,
}

/// Equivariance residual of a lifter at one input and angle:
/// MPJPE( f(X·R_θ^T), f(X)·blockdiag(R_θ^T, 1) ), optionally restricted to a
/// subset of columns.
pub fn equivariance_error(
    model: &LifterModel,
    input: &Pose2D,
    theta: f64,
    mask: ColumnMask,
) -> Result<f64> {
    let r = Rotation2::from_angle(theta)?;
    let lifted_rotated = model.lift(&apply_rotation2(input, &r))?;
    let rotated_lifted = apply_rotation3(&model.lift(input)?, &embed_so2_in_so3(&r));
    masked_mpjpe(&rotated_lifted, &lifted_rotated, mask)
}

fn masked_mpjpe(a: &Pose3D, b: &Pose3D, mask: ColumnMask) -> Result<f64> {
    if a.joint_count() != b.joint_count() {
        return Err(Error::invalid_argument(
            "joint count mismatch in masked comparison".to_string(),
        ));
    }
    let n = a.joint_count() as f64;
    let sum: f64 = a
        .joints()
        .iter()
        .zip(b.joints())
        .map(|(p, q)| match mask {
            ColumnMask::Full => {
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
            }
            ColumnMask::Xy => ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt(),
            ColumnMask::Z => (p[2] - q[2]).abs(),
        })
        .sum();
    Ok(sum / n)
}

/// Aggregated evaluation results for one model/regime on one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub sample_count: usize,
    pub protocol1_mean: f64,
    pub protocol2_mean: f64,
    pub equivariance_error_mean: Option<f64>,
    /// (seed, protocol1, protocol2) per contributing run.
    pub per_seed: Vec<SeedMetrics>,
    /// Sample standard deviation across seeds; absent below 2 seeds.
    pub protocol1_std: Option<f64>,
    pub protocol2_std: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub protocol1: f64,
    pub protocol2: f64,
}

/// Per-sample evaluation of a trained model over ground-truth pairs.
/// Predictions are root-aligned before both protocols, matching the
/// root-aligned targets.
pub fn evaluate(
    model: &LifterModel,
    pairs: &[(Pose2D, Pose3D)],
    seed: u64,
    split: &str,
    root_index: usize,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::invalid_argument(
            "cannot evaluate on an empty dataset".to_string(),
        ));
    }
    use rayon::prelude::*;
    let per_sample: Vec<Result<(f64, f64)>> = pairs
        .par_iter()
        .map(|(input, target)| {
            let pred = model.lift(input)?;
            let pred = crate::geometry::root_align(&pred, root_index)?;
            Ok((mpjpe(target, &pred)?, pa_mpjpe(target, &pred)?))
        })
        .collect();
    let mut p1 = 0.0;
    let mut p2 = 0.0;
    for r in per_sample {
        let (a, b) = r?;
        p1 += a;
        p2 += b;
    }
    let count = pairs.len() as f64;
    let (p1, p2) = (p1 / count, p2 / count);
    Ok(MetricReport {
        split: split.to_string(),
        sample_count: pairs.len(),
        protocol1_mean: p1,
        protocol2_mean: p2,
        equivariance_error_mean: None,
        per_seed: vec![SeedMetrics {
            seed,
            protocol1: p1,
            protocol2: p2,
        }],
        protocol1_std: None,
        protocol2_std: None,
    })
}

/// Combines per-seed reports of the same split into mean ± sample std.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::invalid_argument(
            "cannot aggregate zero reports".to_string(),
        ));
    }
    let split = reports[0].split.clone();
    if reports.iter().any(|r| r.split != split) {
        return Err(Error::invalid_argument(
            "aggregate requires reports from the same split".to_string(),
        ));
    }
    let per_seed: Vec<SeedMetrics> = reports
        .iter()
        .flat_map(|r| r.per_seed.iter().cloned())
        .collect();
    let p1: Vec<f64> = per_seed.iter().map(|s| s.protocol1).collect();
    let p2: Vec<f64> = per_seed.iter().map(|s| s.protocol2).collect();
    let eq: Vec<f64> = reports
        .iter()
        .filter_map(|r| r.equivariance_error_mean)
        .collect();
    Ok(MetricReport {
        split,
        sample_count: reports[0].sample_count,
        protocol1_mean: mean(&p1),
        protocol2_mean: mean(&p2),
        equivariance_error_mean: if eq.is_empty() { None } else { Some(mean(&eq)) },
        protocol1_std: sample_std(&p1),
        protocol2_std: sample_std(&p2),
        per_seed,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// n−1 standard deviation; None below two values.
fn sample_std(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    let ss: f64 = v.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (v.len() - 1) as f64).sqrt())
}

/// Rows of the benchmark table: one model/regime with its Original and
/// Rotated reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub label: String,
    pub original: MetricReport,
    pub rotated: MetricReport,
}

/// CSV with columns regime, split, p1_mean, p1_std, p2_mean, p2_std, samples.
pub fn rows_to_csv(rows: &[BenchmarkRow]) -> String {
    let mut out = String::from("regime,split,protocol1_mm,protocol1_std,protocol2_mm,protocol2_std,samples\n");
    let fmt_std = |s: Option<f64>| s.map(|v| format!("{v:.6}")).unwrap_or_default();
    for row in rows {
        for (split, rep) in [("original", &row.original), ("rotated", &row.rotated)] {
            out.push_str(&format!(
                "{},{},{:.6},{},{:.6},{},{}\n",
                row.label,
                split,
                rep.protocol1_mean,
                fmt_std(rep.protocol1_std),
                rep.protocol2_mean,
                fmt_std(rep.protocol2_std),
                rep.sample_count
            ));
        }
    }
    out
}

/// Aligned-column text table: rows = model×regime, columns =
/// {Original, Rotated} × {P1, P2}.
pub fn rows_to_text(rows: &[BenchmarkRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>14} {:>14} {:>14} {:>14}\n",
        "regime", "orig P1 (mm)", "rot P1 (mm)", "orig P2 (mm)", "rot P2 (mm)"
    ));
    let cell = |mean: f64, std: Option<f64>| match std {
        Some(s) => format!("{mean:.1}±{s:.1}"),
        None => format!("{mean:.1}"),
    };
    for row in rows {
        out.push_str(&format!(
            "{:<16} {:>14} {:>14} {:>14} {:>14}\n",
            row.label,
            cell(row.original.protocol1_mean, row.original.protocol1_std),
            cell(row.rotated.protocol1_mean, row.rotated.protocol1_std),
            cell(row.original.protocol2_mean, row.original.protocol2_std),
            cell(row.rotated.protocol2_mean, row.rotated.protocol2_std),
        ));
    }
    out
}
