//! OOD scorers and threshold calibration. Every scorer follows the same
//! orientation: HIGHER score means more in-distribution, so calibration and
//! classification are scorer-agnostic.

use std::path::Path;

use crate::cam::{bundle_from_outputs, mask_image, CamBundle};
use crate::error::{Error, Result};
use crate::model::{predicted_class, ExitOutputs, Model};
use crate::tensor::{ops, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scorer {
    Mecam,
    Msp,
    Energy,
    MoodEnergy,
}

impl Scorer {
    pub fn name(self) -> &'static str {
        match self {
            Scorer::Mecam => "mecam",
            Scorer::Msp => "msp",
            Scorer::Energy => "energy",
            Scorer::MoodEnergy => "mood_energy",
        }
    }

    pub fn parse(s: &str) -> Result<Scorer> {
        match s {
            "mecam" => Ok(Scorer::Mecam),
            "msp" => Ok(Scorer::Msp),
            "energy" => Ok(Scorer::Energy),
            "mood" | "mood_energy" => Ok(Scorer::MoodEnergy),
            other => Err(Error::invalid(
                "scorer",
                format!("unknown scorer {other:?} (expected mecam, msp, energy, mood)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroundTruth {
    Id,
    Ood,
}

impl GroundTruth {
    pub fn as_str(self) -> &'static str {
        match self {
            GroundTruth::Id => "ID",
            GroundTruth::Ood => "OOD",
        }
    }

    pub fn parse(s: &str) -> Result<GroundTruth> {
        match s {
            "ID" => Ok(GroundTruth::Id),
            "OOD" => Ok(GroundTruth::Ood),
            other => Err(Error::invalid("label", format!("unknown label {other:?}"))),
        }
    }
}

/// One scored sample.
#[derive(Debug, Clone)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub scorer: Scorer,
    pub score: f64,
    pub label: GroundTruth,
    pub pred_class: usize,
}

/// A calibrated decision threshold.
#[derive(Debug, Clone)]
pub struct Threshold {
    pub scorer: Scorer,
    pub tau: f64,
    pub target_tpr: f64,
    pub calibration_size: usize,
}

/// Feature-shift score: mask the input with the aggregated inverted CAM and
/// measure the mean-squared change of the penultimate embedding. Returns
/// the score, the predicted class, and the CAM bundle for reuse.
pub fn mecam_score(model: &Model, x: &Tensor, exit_mask: &[usize]) -> Result<(f64, usize, CamBundle)> {
    let outputs = model.forward(x)?;
    let bundle = bundle_from_outputs(&outputs, exit_mask, model.config().input_size)?;
    let masked = mask_image(x, &bundle.aggregated)?;
    let masked_outputs = model.forward(&masked)?;
    let score = ops::mse_mean(None, &outputs.embedding, &masked_outputs.embedding)?.item()? as f64;
    Ok((score, bundle.predicted_class, bundle))
}

/// Maximum softmax probability of the final-exit logits; in (1/C, 1].
pub fn msp_score(final_logits: &Tensor) -> Result<f64> {
    let probs = ops::softmax(None, final_logits, final_logits.rank() - 1)?;
    Ok(probs
        .to_vec()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, |a, v| a.max(v as f64)))
}

/// logsumexp of the final-exit logits, computed with max subtraction.
pub fn energy_score(final_logits: &Tensor) -> f64 {
    let v = final_logits.to_vec();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, |a, x| a.max(x as f64));
    let sum: f64 = v.iter().map(|&x| (x as f64 - m).exp()).sum();
    m + sum.ln()
}

/// Per-exit energy at an explicitly chosen exit stage (1-based). With the
/// final stage this coincides with `energy_score`.
pub fn mood_energy_score(outputs: &ExitOutputs, exit_stage: usize) -> Result<f64> {
    let exit = outputs
        .exits
        .iter()
        .find(|e| e.stage == exit_stage)
        .ok_or_else(|| {
            Error::invalid(
                "mood_energy",
                format!("no exit at stage {exit_stage}"),
            )
        })?;
    Ok(energy_score(&exit.logits))
}

/// Score one sample with a non-CAM scorer (shares one forward pass).
pub fn baseline_score(scorer: Scorer, outputs: &ExitOutputs, mood_exit: usize) -> Result<f64> {
    match scorer {
        Scorer::Msp => msp_score(&outputs.final_exit().logits),
        Scorer::Energy => Ok(energy_score(&outputs.final_exit().logits)),
        Scorer::MoodEnergy => mood_energy_score(outputs, mood_exit),
        Scorer::Mecam => Err(Error::invalid(
            "baseline_score",
            "mecam is not a logit-only scorer",
        )),
    }
}

/// The largest threshold admitting at least `target_tpr` of the given ID
/// scores: sort ascending and take index `n - ceil(target_tpr * n)`.
pub fn calibrate_threshold(id_scores: &[f64], target_tpr: f64) -> Result<f64> {
    if id_scores.is_empty() {
        return Err(Error::invalid("calibrate_threshold", "empty score list"));
    }
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(Error::invalid(
            "calibrate_threshold",
            format!("target tpr {target_tpr} outside (0, 1]"),
        ));
    }
    if id_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "calibrate_threshold" });
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let n = sorted.len();
    // smallest integer >= tpr*n, robust to f64 products landing just above
    // an integer (e.g. 0.95 * 100)
    let required = ((target_tpr * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let required = required.min(n);
    Ok(sorted[n - required])
}

/// Decision rule: in-distribution iff score >= tau (boundary inclusive).
pub fn classify(score: f64, tau: f64) -> GroundTruth {
    if score >= tau {
        GroundTruth::Id
    } else {
        GroundTruth::Ood
    }
}

pub const SCORE_DUMP_HEADER: &str = "sample_id,scorer,score,label,pred_class";

/// Score dump CSV. Scores are written as shortest round-trip decimals so a
/// re-parse reproduces them exactly.
pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut out = String::from(SCORE_DUMP_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.sample_id,
            r.scorer.name(),
            r.score,
            r.label.as_str(),
            r.pred_class
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::invalid("read_scores", format!("{}: {e}", path.display())))?;
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::invalid("read_scores", e.to_string()))?;
        if row.len() != 5 {
            return Err(Error::invalid(
                "read_scores",
                format!("expected 5 fields, got {}", row.len()),
            ));
        }
        records.push(ScoreRecord {
            sample_id: row[0].to_string(),
            scorer: Scorer::parse(&row[1])?,
            score: row[2]
                .parse::<f64>()
                .map_err(|e| Error::invalid("read_scores", format!("bad score: {e}")))?,
            label: GroundTruth::parse(&row[3])?,
            pred_class: row[4]
                .parse::<usize>()
                .map_err(|e| Error::invalid("read_scores", format!("bad class: {e}")))?,
        });
    }
    Ok(records)
}
