//! Experiment orchestration: the gen-data / train / eval / audit / bench /
//! report pipeline behind the CLI, usable directly as library functions.

use crate::data::{
    generate_dataset, make_rotated_testset, read_dataset, write_dataset, Camera, Dataset,
    GenConfig, Skeleton,
};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate, equivariance_error, evaluate, rows_to_csv, rows_to_text, BenchmarkRow, ColumnMask,
    MetricReport,
};
use crate::models::{HybridMode, LifterModel, ModelConfig, ModelKind};
use crate::optim::TrainConfig;
use crate::rng::stream_rng;
use crate::train::{
    load_checkpoint, regime_label, save_checkpoint, train_model, Checkpoint, EpochLog,
};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const ROOT_JOINT: usize = 0;

/// One model×regime combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub kind: ModelKind,
    pub hybrid_mode: HybridMode,
    pub augment: bool,
}

impl RegimeSpec {
    pub fn label(&self) -> String {
        regime_label(self.kind, self.hybrid_mode, self.augment)
    }
}

/// The six main combinations: {vanilla, equi, hybrid} × {no-aug, aug}.
pub fn standard_regimes() -> Vec<RegimeSpec> {
    let mut out = Vec::new();
    for kind in [
        ModelKind::Vanilla,
        ModelKind::FullyEquivariant,
        ModelKind::Hybrid,
    ] {
        for augment in [false, true] {
            out.push(RegimeSpec {
                kind,
                hybrid_mode: HybridMode::Parallel,
                augment,
            });
        }
    }
    out
}

/// The first-layer-features hybrid ablation rows.
pub fn ablation_regimes() -> Vec<RegimeSpec> {
    [false, true]
        .into_iter()
        .map(|augment| RegimeSpec {
            kind: ModelKind::Hybrid,
            hybrid_mode: HybridMode::FirstLayerFeatures,
            augment,
        })
        .collect()
}

/// Canonical row order in tables.
pub fn regime_order(label: &str) -> usize {
    [
        "vanilla",
        "vanilla+aug",
        "equi",
        "equi+aug",
        "hybrid",
        "hybrid+aug",
        "hybrid2",
        "hybrid2+aug",
    ]
    .iter()
    .position(|l| *l == label)
    .unwrap_or(usize::MAX)
}

// ---------------------------------------------------------------------------
// gen-data

pub struct GenDataArgs {
    pub out_dir: PathBuf,
    pub camera: Camera,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    pub jitter_std: f64,
    /// Debug switch: build the rotated split with every θ forced to 0.
    pub rotated_zero: bool,
}

pub struct GenDataOutput {
    pub train: PathBuf,
    pub test_original: PathBuf,
    pub test_rotated: PathBuf,
}

/// Emits train / test-original / test-rotated dataset files.
pub fn cmd_gen_data(args: &GenDataArgs) -> Result<GenDataOutput> {
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let skeleton = Skeleton::h36m17();
    let mut train_cfg = GenConfig::new("train", args.train_size, args.seed);
    train_cfg.skeleton = skeleton.clone();
    train_cfg.camera = args.camera;
    train_cfg.jitter_std = args.jitter_std;
    let mut test_cfg = GenConfig::new("test", args.test_size, crate::rng::derive_seed(args.seed, 1));
    test_cfg.skeleton = skeleton;
    test_cfg.camera = args.camera;
    test_cfg.jitter_std = args.jitter_std;

    let train = generate_dataset(&train_cfg)?;
    let test = generate_dataset(&test_cfg)?;
    let rotated = make_rotated_testset(
        &test,
        crate::rng::derive_seed(args.seed, 2),
        args.rotated_zero,
    )?;

    let out = GenDataOutput {
        train: args.out_dir.join("train.jsonl"),
        test_original: args.out_dir.join("test-original.jsonl"),
        test_rotated: args.out_dir.join("test-rotated.jsonl"),
    };
    write_dataset(&train, &out.train)?;
    write_dataset(&test, &out.test_original)?;
    write_dataset(&rotated, &out.test_rotated)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// train

pub struct TrainArgs {
    pub spec: RegimeSpec,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub seeds: Vec<u64>,
    pub train_data: PathBuf,
    pub out_dir: PathBuf,
}

pub struct TrainedSeed {
    pub seed: u64,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

/// Trains one regime across its seeds (in parallel) and writes one
/// checkpoint plus one append-only log per seed.
pub fn cmd_train(args: &TrainArgs) -> Result<Vec<TrainedSeed>> {
    if args.seeds.is_empty() {
        return Err(Error::invalid_argument("no seeds given".to_string()));
    }
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let data = read_dataset(&args.train_data)?;
    let label = args.spec.label();
    let results: Vec<Result<TrainedSeed>> = args
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut cfg = args.train_config.clone();
            cfg.seed = seed;
            let outcome = train_model(&args.model_config, &data, &cfg, args.spec.augment)?;
            let checkpoint_path = args.out_dir.join(format!("{label}-seed{seed}.ckpt.json"));
            save_checkpoint(&outcome.checkpoint, &checkpoint_path)?;
            let log_path = args.out_dir.join(format!("{label}-seed{seed}.log"));
            let mut text = String::new();
            for entry in &outcome.log {
                text.push_str(&entry.line());
                text.push('\n');
            }
            std::fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
            Ok(TrainedSeed {
                seed,
                checkpoint_path,
                log_path,
            })
        })
        .collect();
    results.into_iter().collect()
}

/// In-memory variant used by the acceptance suite: trains one regime across
/// seeds and evaluates on both test splits.
pub struct RegimeOutcome {
    pub spec: RegimeSpec,
    pub label: String,
    pub checkpoints: Vec<Checkpoint>,
    pub logs: Vec<Vec<EpochLog>>,
    pub per_seed_original: Vec<MetricReport>,
    pub per_seed_rotated: Vec<MetricReport>,
    pub row: BenchmarkRow,
}

pub fn run_regime(
    spec: RegimeSpec,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    seeds: &[u64],
    train: &Dataset,
    test_original: &Dataset,
    test_rotated: &Dataset,
) -> Result<RegimeOutcome> {
    let runs: Vec<Result<(Checkpoint, Vec<EpochLog>, MetricReport, MetricReport)>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut cfg = train_config.clone();
            cfg.seed = seed;
            let outcome = train_model(model_config, train, &cfg, spec.augment)?;
            let orig = evaluate(
                &outcome.checkpoint.model,
                &test_original.pairs(),
                seed,
                &test_original.meta.split,
                ROOT_JOINT,
            )?;
            let rot = evaluate(
                &outcome.checkpoint.model,
                &test_rotated.pairs(),
                seed,
                &test_rotated.meta.split,
                ROOT_JOINT,
            )?;
            Ok((outcome.checkpoint, outcome.log, orig, rot))
        })
        .collect();
    let mut checkpoints = Vec::new();
    let mut logs = Vec::new();
    let mut per_seed_original = Vec::new();
    let mut per_seed_rotated = Vec::new();
    for run in runs {
        let (ckpt, log, orig, rot) = run?;
        checkpoints.push(ckpt);
        logs.push(log);
        per_seed_original.push(orig);
        per_seed_rotated.push(rot);
    }
    let label = spec.label();
    let row = BenchmarkRow {
        label: label.clone(),
        original: aggregate(&per_seed_original)?,
        rotated: aggregate(&per_seed_rotated)?,
    };
    Ok(RegimeOutcome {
        spec,
        label,
        checkpoints,
        logs,
        per_seed_original,
        per_seed_rotated,
        row,
    })
}

// ---------------------------------------------------------------------------
// eval

pub struct EvalArgs {
    pub checkpoints: Vec<PathBuf>,
    pub test_original: PathBuf,
    pub test_rotated: PathBuf,
    pub out_dir: PathBuf,
}

pub struct EvalOutput {
    pub rows: Vec<BenchmarkRow>,
    pub csv_path: PathBuf,
    pub text_path: PathBuf,
    pub rows_path: PathBuf,
}

/// Evaluates checkpoints on both splits, aggregating seeds within each
/// regime, and writes CSV, aligned text, and JSON row files.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalOutput> {
    if args.checkpoints.is_empty() {
        return Err(Error::invalid_argument("no checkpoints given".to_string()));
    }
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let original = read_dataset(&args.test_original)?;
    let rotated = read_dataset(&args.test_rotated)?;

    let mut by_regime: BTreeMap<String, Vec<Checkpoint>> = BTreeMap::new();
    for path in &args.checkpoints {
        let ckpt = load_checkpoint(path)?;
        if ckpt.model.joint_count() != original.meta.joint_count {
            return Err(Error::Validation(format!(
                "checkpoint {} expects {} joints but the dataset has {}",
                path.display(),
                ckpt.model.joint_count(),
                original.meta.joint_count
            )));
        }
        by_regime.entry(ckpt.regime_label()).or_default().push(ckpt);
    }

    let orig_pairs = original.pairs();
    let rot_pairs = rotated.pairs();
    let mut rows = Vec::new();
    for (label, ckpts) in by_regime {
        let mut orig_reports = Vec::new();
        let mut rot_reports = Vec::new();
        for ckpt in &ckpts {
            orig_reports.push(evaluate(
                &ckpt.model,
                &orig_pairs,
                ckpt.seed,
                &original.meta.split,
                ROOT_JOINT,
            )?);
            rot_reports.push(evaluate(
                &ckpt.model,
                &rot_pairs,
                ckpt.seed,
                &rotated.meta.split,
                ROOT_JOINT,
            )?);
        }
        rows.push(BenchmarkRow {
            label,
            original: aggregate(&orig_reports)?,
            rotated: aggregate(&rot_reports)?,
        });
    }
    rows.sort_by_key(|r| regime_order(&r.label));

    let csv_path = args.out_dir.join("report.csv");
    std::fs::write(&csv_path, rows_to_csv(&rows)).map_err(|e| Error::io(&csv_path, e))?;
    let text_path = args.out_dir.join("report.txt");
    std::fs::write(&text_path, rows_to_text(&rows)).map_err(|e| Error::io(&text_path, e))?;
    let rows_path = args.out_dir.join("rows.json");
    let json = serde_json::to_string_pretty(&rows)
        .map_err(|e| Error::Validation(format!("rows serialization: {e}")))?;
    std::fs::write(&rows_path, json).map_err(|e| Error::io(&rows_path, e))?;
    Ok(EvalOutput {
        rows,
        csv_path,
        text_path,
        rows_path,
    })
}

// ---------------------------------------------------------------------------
// audit

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub regime: String,
    pub samples: usize,
    pub num_angles: usize,
    /// Equivariance error over all (sample, θ) pairs, in millimetres.
    pub mean_mm: f64,
    pub max_mm: f64,
    /// Same residuals relative to each output's RMS.
    pub mean_relative: f64,
    pub max_relative: f64,
    /// xy-restricted audit (hybrid models).
    pub xy_mean_mm: Option<f64>,
    pub xy_max_mm: Option<f64>,
    /// Depth-restricted audit (hybrid models).
    pub z_mean_mm: Option<f64>,
    pub z_max_mm: Option<f64>,
}

impl AuditReport {
    pub fn text(&self) -> String {
        let mut s = format!(
            "regime={} samples={} angles={}\nequivariance error: mean {:.6e} mm, max {:.6e} mm \
             (relative: mean {:.3e}, max {:.3e})\n",
            self.regime,
            self.samples,
            self.num_angles,
            self.mean_mm,
            self.max_mm,
            self.mean_relative,
            self.max_relative
        );
        if let (Some(xm), Some(xx)) = (self.xy_mean_mm, self.xy_max_mm) {
            s.push_str(&format!("xy columns: mean {xm:.6e} mm, max {xx:.6e} mm\n"));
        }
        if let (Some(zm), Some(zx)) = (self.z_mean_mm, self.z_max_mm) {
            s.push_str(&format!("z column:   mean {zm:.6e} mm, max {zx:.6e} mm\n"));
        }
        s
    }
}

/// Per-sample equivariance audit over `num_angles` random θ each.
/// `angles_zero` forces every θ to 0 (debug).
pub fn cmd_audit(
    model: &LifterModel,
    regime: &str,
    dataset: &Dataset,
    num_angles: usize,
    seed: u64,
    angles_zero: bool,
) -> Result<AuditReport> {
    if dataset.samples.is_empty() || num_angles == 0 {
        return Err(Error::invalid_argument(
            "audit needs a non-empty dataset and at least one angle".to_string(),
        ));
    }
    let is_hybrid = model.kind() == ModelKind::Hybrid;
    let per_sample: Vec<Result<Vec<(f64, f64, Option<(f64, f64)>)>>> = dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = stream_rng(seed, i as u64);
            let rms = model.lift(&s.input2d)?.rms().max(1e-300);
            let mut out = Vec::with_capacity(num_angles);
            for _ in 0..num_angles {
                let theta = if angles_zero {
                    0.0
                } else {
                    rng.random_range(0.0..TAU)
                };
                let full = equivariance_error(model, &s.input2d, theta, ColumnMask::Full)?;
                let masked = if is_hybrid {
                    let xy = equivariance_error(model, &s.input2d, theta, ColumnMask::Xy)?;
                    let z = equivariance_error(model, &s.input2d, theta, ColumnMask::Z)?;
                    Some((xy, z))
                } else {
                    None
                };
                out.push((full, full / rms, masked));
            }
            Ok(out)
        })
        .collect();

    let mut mean_mm = 0.0;
    let mut max_mm: f64 = 0.0;
    let mut mean_rel = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut xy = (0.0f64, 0.0f64);
    let mut z = (0.0f64, 0.0f64);
    let mut count = 0usize;
    for entry in per_sample {
        for (full, rel, masked) in entry? {
            mean_mm += full;
            max_mm = max_mm.max(full);
            mean_rel += rel;
            max_rel = max_rel.max(rel);
            if let Some((x, zz)) = masked {
                xy.0 += x;
                xy.1 = xy.1.max(x);
                z.0 += zz;
                z.1 = z.1.max(zz);
            }
            count += 1;
        }
    }
    let n = count as f64;
    Ok(AuditReport {
        regime: regime.to_string(),
        samples: dataset.samples.len(),
        num_angles,
        mean_mm: mean_mm / n,
        max_mm,
        mean_relative: mean_rel / n,
        max_relative: max_rel,
        xy_mean_mm: is_hybrid.then_some(xy.0 / n),
        xy_max_mm: is_hybrid.then_some(xy.1),
        z_mean_mm: is_hybrid.then_some(z.0 / n),
        z_max_mm: is_hybrid.then_some(z.1),
    })
}

// ---------------------------------------------------------------------------
// bench

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchEntry {
    pub regime: String,
    pub parameter_count: usize,
    pub train_epoch_seconds: f64,
    pub inference_median_ms: f64,
    pub inference_samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub entries: Vec<BenchEntry>,
}

impl BenchReport {
    pub fn text(&self) -> String {
        let mut s = format!(
            "{:<14} {:>10} {:>18} {:>20}\n",
            "regime", "params", "train epoch (s)", "inference (ms/sample)"
        );
        for e in &self.entries {
            s.push_str(&format!(
                "{:<14} {:>10} {:>18.3} {:>20.4}\n",
                e.regime, e.parameter_count, e.train_epoch_seconds, e.inference_median_ms
            ));
        }
        s
    }
}

/// Wall-clock timing: one training epoch on the dataset plus the median
/// latency of ≥1000 single-sample forwards.
pub fn cmd_bench(checkpoints: &[Checkpoint], dataset: &Dataset) -> Result<BenchReport> {
    if checkpoints.is_empty() || dataset.samples.is_empty() {
        return Err(Error::invalid_argument(
            "bench needs checkpoints and a non-empty dataset".to_string(),
        ));
    }
    let mut entries = Vec::new();
    for ckpt in checkpoints {
        let mut cfg = ckpt.train_config.clone();
        cfg.epochs = 1;
        let start = Instant::now();
        train_model(&ckpt.model.config, dataset, &cfg, ckpt.augment)?;
        let train_epoch_seconds = start.elapsed().as_secs_f64();

        let min_forwards = 1000;
        let mut latencies = Vec::with_capacity(min_forwards);
        let mut i = 0usize;
        while latencies.len() < min_forwards {
            let input = &dataset.samples[i % dataset.samples.len()].input2d;
            let t = Instant::now();
            let _ = ckpt.model.lift(input)?;
            latencies.push(t.elapsed().as_secs_f64() * 1e3);
            i += 1;
        }
        latencies.sort_by(|a, b| a.partial_cmp(b).expect("finite latencies"));
        let median = latencies[latencies.len() / 2];
        entries.push(BenchEntry {
            regime: ckpt.regime_label(),
            parameter_count: ckpt.model.count_parameters(),
            train_epoch_seconds,
            inference_median_ms: median,
            inference_samples: latencies.len(),
        });
    }
    entries.sort_by_key(|e| regime_order(&e.regime));
    Ok(BenchReport { entries })
}

// ---------------------------------------------------------------------------
// report

/// Combined markdown table with the best value per metric column in bold and
/// the second best in italics; ties bold both.
pub fn cmd_report(
    rows: &[BenchmarkRow],
    audits: &[AuditReport],
    expected: Option<&[String]>,
) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Validation("no benchmark rows given".to_string()));
    }
    if let Some(expected) = expected {
        let missing: Vec<String> = expected
            .iter()
            .filter(|label| !rows.iter().any(|r| &r.label == *label))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::Validation(format!(
                "missing rows for: {}",
                missing.join(", ")
            )));
        }
    }
    let mut rows = rows.to_vec();
    rows.sort_by_key(|r| regime_order(&r.label));

    let audit_for = |label: &str| audits.iter().find(|a| a.regime == label);
    let columns: Vec<Vec<f64>> = vec![
        rows.iter().map(|r| r.original.protocol1_mean).collect(),
        rows.iter().map(|r| r.rotated.protocol1_mean).collect(),
        rows.iter().map(|r| r.original.protocol2_mean).collect(),
        rows.iter().map(|r| r.rotated.protocol2_mean).collect(),
    ];
    // Rank positions per column: best and second-best values (ties share).
    let marks: Vec<(f64, f64)> = columns
        .iter()
        .map(|col| {
            let mut sorted = col.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
            let best = sorted[0];
            let second = sorted
                .iter()
                .copied()
                .find(|v| *v > best)
                .unwrap_or(f64::INFINITY);
            (best, second)
        })
        .collect();

    let decorate = |value: f64, col: usize, std: Option<f64>| -> String {
        let body = match std {
            Some(s) => format!("{value:.1} ± {s:.1}"),
            None => format!("{value:.1}"),
        };
        let (best, second) = marks[col];
        if value == best {
            format!("**{body}**")
        } else if value == second {
            format!("_{body}_")
        } else {
            body
        }
    };

    let mut md = String::new();
    md.push_str("| Regime | Original P1 (mm) | Rotated P1 (mm) | Original P2 (mm) | Rotated P2 (mm) | Equivariance err (mm) |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    for row in &rows {
        let audit_cell = match audit_for(&row.label) {
            Some(a) => format!("{:.3e}", a.mean_mm),
            None => "—".to_string(),
        };
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            row.label,
            decorate(row.original.protocol1_mean, 0, row.original.protocol1_std),
            decorate(row.rotated.protocol1_mean, 1, row.rotated.protocol1_std),
            decorate(row.original.protocol2_mean, 2, row.original.protocol2_std),
            decorate(row.rotated.protocol2_mean, 3, row.rotated.protocol2_std),
            audit_cell,
        ));
    }
    md.push_str("\nBold marks the best value per column, italics the second best; ties are both bold.\n");
    Ok(md)
}

/// Flat `key = value` config file; `#` starts a comment.
pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("expected `key = value`, got `{raw}`"),
            });
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}
