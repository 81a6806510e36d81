//! Experiment orchestration: run a configured experiment end to end, write
//! its report, metrics history, and checkpoint into a fresh timestamped
//! directory, run the ablation table, and export encoder features with a
//! 2-d PCA projection for offline plotting.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Mode};
use crate::data::{Dataset, DomainTag};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::{argmax, ParamSet};
use crate::tensor::Tensor;
use crate::theory::h_divergence_proxy;
use crate::trainer::{evaluate, run, write_metrics_csv, EvalHead, MetricsRow};

/// Final record of one experiment run.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub config_digest: String,
    pub mode: String,
    pub final_acc_class: f64,
    pub final_acc_joint: f64,
    pub metrics_path: String,
    pub checkpoint_path: String,
    pub h_div_before: f64,
    pub h_div_after: f64,
    /// Per-class cross-domain feature-centroid distances; `None` marks a
    /// class absent from one of the domains.
    pub centroid_dist_before: Vec<Option<f64>>,
    pub centroid_dist_after: Vec<Option<f64>>,
    pub wall_clock_secs: f64,
    pub out_dir: String,
}

/// Per-class cross-domain centroid distances plus the feature-level
/// H-divergence proxy.
#[derive(Debug, Clone, Serialize)]
pub struct AlignmentMetrics {
    pub per_class: Vec<Option<f64>>,
    pub h_div: f64,
}

/// Mean encoder feature per class; `None` for classes with no samples.
fn class_centroids(params: &ParamSet, ds: &Dataset) -> Result<Vec<Option<Vec<f64>>>> {
    let k = params.arch.k;
    let z = params.encode(&ds.features)?;
    let d = z.cols();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    let Some(labels) = ds.label_indices() else {
        return Ok(vec![None; k]);
    };
    for (i, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        for (s, &v) in sums[c].iter_mut().zip(z.row(i)) {
            *s += v;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect())
}

/// For each class k: `|| mean z_src_k - mean z_tgt_k ||_2`, plus the
/// H-divergence proxy on the encoded features. Target labels are used for
/// evaluation only.
pub fn alignment_metrics(
    params: &ParamSet,
    src: &Dataset,
    tgt: &Dataset,
    seed: u64,
) -> Result<AlignmentMetrics> {
    let src_c = class_centroids(params, src)?;
    let tgt_c = class_centroids(params, tgt)?;
    let per_class = src_c
        .iter()
        .zip(&tgt_c)
        .map(|(a, b)| match (a, b) {
            (Some(a), Some(b)) => Some(
                a.iter()
                    .zip(b)
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt(),
            ),
            _ => None,
        })
        .collect();
    let z_s = params.encode(&src.features)?;
    let z_t = params.encode(&tgt.features)?;
    let h_div = h_divergence_proxy(&z_s, &z_t, seed)?;
    Ok(AlignmentMetrics { per_class, h_div })
}

// ---------------------------------------------------------------------------
// PCA export
// ---------------------------------------------------------------------------

/// 2-d PCA fitted on the rows: returns (projection, mean, components) where
/// `components` is `d x 2` column-major principal axes. Component signs are
/// fixed so the largest-magnitude loading is positive.
pub fn pca_2d(features: &Tensor) -> Result<(Tensor, Vec<f64>, Vec<Vec<f64>>)> {
    let (n, d) = (features.rows(), features.cols());
    if d < 2 || n < 2 {
        return Err(Error::invalid("pca", "need at least 2 rows and 2 features"));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
    for i in 0..n {
        let row = features.row(i);
        for p in 0..d {
            let vp = row[p] - mean[p];
            for q in 0..d {
                cov[(p, q)] += vp * (row[q] - mean[q]);
            }
        }
    }
    cov /= n as f64;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(2);
    for &j in order.iter().take(2) {
        let mut comp: Vec<f64> = (0..d).map(|i| eig.eigenvectors[(i, j)]).collect();
        let lead = comp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if comp[lead] < 0.0 {
            for v in &mut comp {
                *v = -*v;
            }
        }
        components.push(comp);
    }
    let mut proj = Tensor::zeros(vec![n, 2]);
    for i in 0..n {
        let row = features.row(i);
        for (c, comp) in components.iter().enumerate() {
            let mut acc = 0.0;
            for p in 0..d {
                acc += (row[p] - mean[p]) * comp[p];
            }
            proj.data_mut()[i * 2 + c] = acc;
        }
    }
    Ok((proj, mean, components))
}

/// Write `features.csv` (domain, true class, predicted class, encoder
/// features, 2 PCA coordinates) and `pca.csv` (the projection columns only)
/// for the given datasets. The PCA is fitted on the pooled features.
pub fn export_features(params: &ParamSet, datasets: &[&Dataset], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let d_feat = params.arch.d_feat();
    let mut pooled_rows: Vec<Vec<f64>> = Vec::new();
    let mut meta: Vec<(String, i64, usize)> = Vec::new(); // domain, true class, pred class
    for ds in datasets {
        let z = params.encode(&ds.features)?;
        let pred = params.class_predict(&z)?;
        let labels = ds.label_indices();
        let domain = match ds.domain {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        };
        for i in 0..ds.n() {
            pooled_rows.push(z.row(i).to_vec());
            let truth = labels.as_ref().map_or(-1, |l| l[i] as i64);
            meta.push((domain.into(), truth, argmax(pred.probs.row(i))));
        }
    }
    let pooled = Tensor::from_rows(&pooled_rows)?;
    let (proj, _, _) = pca_2d(&pooled)?;

    let mut features_csv = String::from("domain,true_class,pred_class");
    for j in 0..d_feat {
        write!(features_csv, ",z{j}").unwrap();
    }
    features_csv.push_str(",pc1,pc2\n");
    let mut pca_csv = String::from("domain,true_class,pred_class,pc1,pc2\n");
    for (i, (domain, truth, pred)) in meta.iter().enumerate() {
        write!(features_csv, "{domain},{truth},{pred}").unwrap();
        for &v in &pooled_rows[i] {
            write!(features_csv, ",{:.16e}", v).unwrap();
        }
        writeln!(
            features_csv,
            ",{:.16e},{:.16e}",
            proj.row(i)[0],
            proj.row(i)[1]
        )
        .unwrap();
        writeln!(
            pca_csv,
            "{domain},{truth},{pred},{:.16e},{:.16e}",
            proj.row(i)[0],
            proj.row(i)[1]
        )
        .unwrap();
    }
    let fpath = out_dir.join("features.csv");
    std::fs::write(&fpath, features_csv).map_err(|e| Error::io(fpath.display().to_string(), e))?;
    let ppath = out_dir.join("pca.csv");
    std::fs::write(&ppath, pca_csv).map_err(|e| Error::io(ppath.display().to_string(), e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

/// Output root: explicit argument, else the `RCA_OUT_ROOT` environment
/// variable, else `./rca-runs`.
pub fn resolve_out_root(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Ok(root) = std::env::var("RCA_OUT_ROOT") {
        if !root.is_empty() {
            return PathBuf::from(root);
        }
    }
    PathBuf::from("rca-runs")
}

/// Create a fresh timestamped run directory under `root`; existing reports
/// are never overwritten.
pub fn fresh_run_dir(root: &Path, stem: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root.display().to_string(), e))?;
    let millis = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    for attempt in 0u32.. {
        let name = if attempt == 0 {
            format!("{stem}-{millis}")
        } else {
            format!("{stem}-{millis}-{attempt}")
        };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(dir.display().to_string(), e)),
        }
    }
    unreachable!()
}

/// Zero every target-dependent and adversarial weight: what "trained
/// without exploiting the target data" means for this objective.
fn zero_target_and_adversarial(w: &mut LossWeights) {
    w.lambda_t = 0.0;
    w.lambda_tvat = 0.0;
    w.lambda_jtc = 0.0;
    w.lambda_jta = 0.0;
    w.lambda_jsa = 0.0;
}

/// Run one experiment end to end and write `config.json`, `metrics.csv`,
/// `params.bin`, and `report.json` into a fresh run directory.
///
/// Modes: `full` trains the whole objective; `source-only` zeroes every
/// target-dependent and adversarial weight; `target-only` trains supervised
/// on the target with labels revealed (the upper reference).
pub fn run_experiment(cfg: &ExperimentConfig, out_root: &Path) -> Result<Report> {
    let started = Instant::now();
    if cfg.mode == Mode::Ablation {
        return Err(Error::Config {
            path: "mode".into(),
            message: "ablation mode runs through run_ablations (CLI verb `ablate`)".into(),
        });
    }
    let (src, tgt) = cfg.build_datasets()?;
    let (train_src, train_tgt) = match cfg.mode {
        Mode::TargetOnly => {
            if tgt.labels.is_none() {
                return Err(Error::MissingLabels {
                    context: "target-only mode".into(),
                    name: tgt.name.clone(),
                });
            }
            (tgt.clone(), tgt.clone())
        }
        _ => (src.clone(), tgt.clone()),
    };

    let eps = cfg.resolve_eps(&train_src.features)?;
    let k = cfg.k()?;
    let mut tc = cfg.trainer_config(train_src.d(), k, eps)?;
    if matches!(cfg.mode, Mode::SourceOnly | Mode::TargetOnly) {
        zero_target_and_adversarial(&mut tc.weights);
    }

    let run_dir = fresh_run_dir(out_root, &format!("{}-{}", cfg.mode, &cfg.digest()[..8]))?;
    if cfg.checkpoint_interval > 0 {
        tc.checkpoint_dir = Some(run_dir.clone());
    }
    let cfg_path = run_dir.join("config.json");
    std::fs::write(&cfg_path, cfg.to_json())
        .map_err(|e| Error::io(cfg_path.display().to_string(), e))?;

    let params0 = ParamSet::init(tc.arch.clone(), derive_seed(cfg.seed, "init"))?;
    let before = alignment_metrics(&params0, &src, &tgt, derive_seed(cfg.seed, "hdiv-before"))?;

    let (params, history) = run(&tc, params0, &train_src, &train_tgt)?;

    let metrics_path = run_dir.join("metrics.csv");
    write_metrics_csv(&history, &metrics_path)?;
    let checkpoint_path = run_dir.join("params.bin");
    params.save(&checkpoint_path)?;

    let after = alignment_metrics(&params, &src, &tgt, derive_seed(cfg.seed, "hdiv-after"))?;
    let (final_acc_class, final_acc_joint) = if tgt.labels.is_some() {
        (
            evaluate(&params, &tgt, EvalHead::ClassPredictor)?,
            evaluate(&params, &tgt, EvalHead::JointPredictor)?,
        )
    } else {
        (f64::NAN, f64::NAN)
    };

    let report = Report {
        config_digest: cfg.digest(),
        mode: cfg.mode.to_string(),
        final_acc_class,
        final_acc_joint,
        metrics_path: metrics_path.display().to_string(),
        checkpoint_path: checkpoint_path.display().to_string(),
        h_div_before: before.h_div,
        h_div_after: after.h_div,
        centroid_dist_before: before.per_class,
        centroid_dist_after: after.per_class,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        out_dir: run_dir.display().to_string(),
    };
    let rpath = run_dir.join("report.json");
    std::fs::write(&rpath, serde_json::to_string_pretty(&report).unwrap())
        .map_err(|e| Error::io(rpath.display().to_string(), e))?;
    Ok(report)
}

/// Metrics history of the last run (for tests that need the raw rows).
pub fn run_history(cfg: &ExperimentConfig) -> Result<(ParamSet, Vec<MetricsRow>)> {
    let (src, tgt) = cfg.build_datasets()?;
    let eps = cfg.resolve_eps(&src.features)?;
    let mut tc = cfg.trainer_config(src.d(), cfg.k()?, eps)?;
    if matches!(cfg.mode, Mode::SourceOnly) {
        zero_target_and_adversarial(&mut tc.weights);
    }
    let params0 = ParamSet::init(tc.arch.clone(), derive_seed(cfg.seed, "init"))?;
    run(&tc, params0, &src, &tgt)
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

/// The ablation rows, in table order, before the two reference rows.
pub const ABLATION_ROWS: [&str; 5] = [
    "without_vat",
    "without_entmin_and_vat",
    "without_source_alignment",
    "without_target_alignment",
    "without_both_alignments",
];

/// Minimal weight-zeroing for one ablation row: exactly the named weights
/// differ from the base config.
pub fn ablation_config(base: &ExperimentConfig, row: &str) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    cfg.mode = Mode::Full;
    let w = &mut cfg.loss_weights;
    match row {
        "without_vat" => {
            w.lambda_svat = 0.0;
            w.lambda_tvat = 0.0;
        }
        "without_entmin_and_vat" => {
            w.lambda_svat = 0.0;
            w.lambda_tvat = 0.0;
            w.lambda_te = 0.0;
        }
        "without_source_alignment" => w.lambda_jsa = 0.0,
        "without_target_alignment" => w.lambda_jta = 0.0,
        "without_both_alignments" => {
            w.lambda_jsa = 0.0;
            w.lambda_jta = 0.0;
        }
        "source_only" => cfg.mode = Mode::SourceOnly,
        "full" => {}
        other => {
            return Err(Error::invalid("ablation", format!("unknown row `{other}`")));
        }
    }
    Ok(cfg)
}

/// Run the five ablation rows plus the source-only and full references with
/// the same seed, and write a comparison table. Rows run as independent
/// parallel tasks, each into its own run directory.
pub fn run_ablations(base: &ExperimentConfig, out_root: &Path) -> Result<Vec<(String, Report)>> {
    let rows: Vec<&str> = ABLATION_ROWS
        .iter()
        .copied()
        .chain(["source_only", "full"])
        .collect();
    let results: Vec<Result<(String, Report)>> = rows
        .par_iter()
        .map(|row| {
            let cfg = ablation_config(base, row)?;
            let report = run_experiment(&cfg, out_root)?;
            Ok((row.to_string(), report))
        })
        .collect();
    let mut table = Vec::with_capacity(results.len());
    for r in results {
        table.push(r?);
    }
    let mut csv = String::from("row,acc_class,acc_joint,h_div_before,h_div_after,out_dir\n");
    for (row, report) in &table {
        writeln!(
            csv,
            "{row},{},{},{},{},{}",
            report.final_acc_class,
            report.final_acc_joint,
            report.h_div_before,
            report.h_div_after,
            report.out_dir
        )
        .unwrap();
    }
    let path = out_root.join("ablations.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(table)
}
