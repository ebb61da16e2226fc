//! AUROC and FPR@TPR over mixed ID/OOD score sets, ROC construction, and
//! report emission. ID is the positive class: an OOD sample admitted as ID
//! is a false positive.

use std::collections::HashSet;
use std::path::Path;

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::scoring::{calibrate_threshold, GroundTruth, Scorer};

/// AUROC by the rank method with midrank ties: equals the Mann-Whitney
/// statistic P(ID > OOD) + 0.5 P(ID == OOD).
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::invalid("auroc", "empty score list"));
    }
    let n_id = id_scores.len();
    let n_ood = ood_scores.len();
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    if all.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::NonFinite { op: "auroc" });
    }
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));

    // midranks stay on the 0.5 grid, so the rank sum is exact in f64 and
    // matches the brute-force pairwise count bit for bit
    let mut rank_sum_id = 0.0f64;
    let mut i = 0usize;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for item in &all[i..j] {
            if item.1 {
                rank_sum_id += midrank;
            }
        }
        i = j;
    }
    let numerator = rank_sum_id - (n_id * (n_id + 1)) as f64 / 2.0;
    Ok(numerator / (n_id as f64 * n_ood as f64))
}

/// FPR when the threshold is set to admit `target_tpr` of the ID scores:
/// the fraction of OOD scores at or above that threshold. Returns
/// (fpr, tau).
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], target_tpr: f64) -> Result<(f64, f64)> {
    if ood_scores.is_empty() {
        return Err(Error::invalid("fpr_at_tpr", "empty OOD score list"));
    }
    let tau = calibrate_threshold(id_scores, target_tpr)?;
    let fp = ood_scores.iter().filter(|&&s| s >= tau).count();
    Ok((fp as f64 / ood_scores.len() as f64, tau))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC sweep over every distinct score value, descending. Starts at (0,0)
/// and ends at (1,1); both coordinates are non-decreasing.
pub fn roc_points(id_scores: &[f64], ood_scores: &[f64]) -> Result<Vec<RocPoint>> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::invalid("roc_points", "empty score list"));
    }
    let n_id = id_scores.len() as f64;
    let n_ood = ood_scores.len() as f64;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));

    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0usize;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_ood,
            tpr: tp as f64 / n_id,
        });
        i = j;
    }
    Ok(points)
}

/// Trapezoidal area under an ROC polyline.
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|p| (p[1].fpr - p[0].fpr) * (p[1].tpr + p[0].tpr) / 2.0)
        .sum()
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub scorer: Scorer,
    pub n_id: usize,
    pub n_ood: usize,
    pub auroc: f64,
    pub fpr95: f64,
    pub tau: f64,
    pub target_tpr: f64,
    pub roc: Vec<RocPoint>,
}

/// Full evaluation of one scorer over a mixed score set.
pub fn evaluate(
    scorer: Scorer,
    id_scores: &[f64],
    ood_scores: &[f64],
    target_tpr: f64,
) -> Result<EvalReport> {
    let auc = auroc(id_scores, ood_scores)?;
    let (fpr, tau) = fpr_at_tpr(id_scores, ood_scores, target_tpr)?;
    Ok(EvalReport {
        scorer,
        n_id: id_scores.len(),
        n_ood: ood_scores.len(),
        auroc: auc,
        fpr95: fpr,
        tau,
        target_tpr,
        roc: roc_points(id_scores, ood_scores)?,
    })
}

/// A sample paired with its ID/OOD ground truth.
#[derive(Debug, Clone)]
pub struct MixedSample {
    pub sample: ImageSample,
    pub truth: GroundTruth,
}

/// Combine an ID test set with an OOD test set. Sample ids must be
/// disjoint; class labels are dropped from OOD samples.
pub fn mixed_testset(
    id_samples: &[&ImageSample],
    ood_samples: &[&ImageSample],
) -> Result<Vec<MixedSample>> {
    if id_samples.is_empty() {
        return Err(Error::invalid("mixed_testset", "empty ID test set"));
    }
    if ood_samples.is_empty() {
        return Err(Error::invalid("mixed_testset", "empty OOD test set"));
    }
    let mut ids = HashSet::new();
    let mut out = Vec::with_capacity(id_samples.len() + ood_samples.len());
    for s in id_samples {
        if !ids.insert(s.id.clone()) {
            return Err(Error::invalid(
                "mixed_testset",
                format!("duplicate sample id {:?}", s.id),
            ));
        }
        out.push(MixedSample {
            sample: (*s).clone(),
            truth: GroundTruth::Id,
        });
    }
    for s in ood_samples {
        if !ids.insert(s.id.clone()) {
            return Err(Error::invalid(
                "mixed_testset",
                format!("sample id collision between ID and OOD: {:?}", s.id),
            ));
        }
        let mut sample = (*s).clone();
        sample.label = None;
        out.push(MixedSample {
            sample,
            truth: GroundTruth::Ood,
        });
    }
    Ok(out)
}

pub const REPORT_HEADER: &str = "scorer,auroc,fpr95,tau,n_id,n_ood";

/// `report.csv`: one row per scorer, reals as shortest round-trip decimals.
pub fn write_report_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.scorer.name(),
            r.auroc,
            r.fpr95,
            r.tau,
            r.n_id,
            r.n_ood
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `roc_<scorer>.csv`: fpr,tpr rows over the threshold sweep.
pub fn write_roc_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = String::from("fpr,tpr\n");
    for p in &report.roc {
        out.push_str(&format!("{},{}\n", p.fpr, p.tpr));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parsed `report.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub scorer: Scorer,
    pub auroc: f64,
    pub fpr95: f64,
    pub tau: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::invalid("read_report", format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let r = record.map_err(|e| Error::invalid("read_report", e.to_string()))?;
        let f = |i: usize| -> Result<f64> {
            r[i].parse::<f64>()
                .map_err(|e| Error::invalid("read_report", format!("field {i}: {e}")))
        };
        let n = |i: usize| -> Result<usize> {
            r[i].parse::<usize>()
                .map_err(|e| Error::invalid("read_report", format!("field {i}: {e}")))
        };
        rows.push(ReportRow {
            scorer: Scorer::parse(&r[0])?,
            auroc: f(1)?,
            fpr95: f(2)?,
            tau: f(3)?,
            n_id: n(4)?,
            n_ood: n(5)?,
        });
    }
    Ok(rows)
}

pub fn read_roc_csv(path: &Path) -> Result<Vec<RocPoint>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::invalid("read_roc", format!("{}: {e}", path.display())))?;
    let mut points = Vec::new();
    for record in reader.records() {
        let r = record.map_err(|e| Error::invalid("read_roc", e.to_string()))?;
        points.push(RocPoint {
            fpr: r[0].parse().map_err(|e| Error::invalid("read_roc", format!("{e}")))?,
            tpr: r[1].parse().map_err(|e| Error::invalid("read_roc", format!("{e}")))?,
        });
    }
    Ok(points)
}
