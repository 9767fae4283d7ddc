use serde::{Deserialize, Serialize};

use crate::discover::SpuriousReport;
use crate::error::{RavlError, Result};
use crate::mitigate::Encoder;
use crate::zeroshot::{predict, Cell};

use super::EvalSetting;

/// Whether a model actually learned the planted shortcut.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    /// Accuracy lift (points) on the spurious label when the concept is present.
    pub eps1: Option<f64>,
    /// Largest accuracy drop (points) on any other label when the concept is present.
    pub eps2: Option<f64>,
    pub tau_eval: f64,
    pub valid: bool,
    pub reason: Option<String>,
}

/// Validity from precomputed image predictions on the evaluation set.
pub fn validity_from_predictions(
    setting: &EvalSetting,
    predictions: &[usize],
    tau_eval: f64,
) -> Result<ValidityReport> {
    let eval = &setting.eval;
    if predictions.len() != eval.images.len() {
        return Err(RavlError::DimMismatch { expected: eval.images.len(), got: predictions.len() });
    }
    let l = setting.labels.len();
    // [label][has concept]
    let mut cells = vec![[Cell::default(); 2]; l];
    for (i, (img, &pred)) in eval.images.iter().zip(predictions).enumerate() {
        let c = &mut cells[img.label][usize::from(eval.has_concept(i, &setting.spurious_concept))];
        c.n += 1;
        c.correct += usize::from(pred == img.label);
    }
    let pct = |c: &Cell| c.accuracy().map(|a| 100.0 * a);
    let a = setting.spurious_label;
    let eps1 = match (pct(&cells[a][1]), pct(&cells[a][0])) {
        (Some(w), Some(wo)) => Some(w - wo),
        _ => None,
    };
    let eps2 =
        (0..l).filter(|&y| y != a).filter_map(|y| Some(pct(&cells[y][0])? - pct(&cells[y][1])?)).reduce(f64::max);
    let (valid, reason) = match (eps1, eps2) {
        (None, _) => (false, Some("spurious label lacks images with or without the concept".to_string())),
        (_, None) => (false, Some("no other label has images both with and without the concept".to_string())),
        (Some(e1), Some(e2)) if e1 > tau_eval && e2 > tau_eval => (true, None),
        (Some(e1), Some(e2)) => (false, Some(format!("eps1={e1:.2}, eps2={e2:.2} not both above {tau_eval}"))),
    };
    Ok(ValidityReport { eps1, eps2, tau_eval, valid, reason })
}

pub fn check_validity(setting: &EvalSetting, encoder: &Encoder, tau_eval: f64) -> Result<ValidityReport> {
    let preds = setting
        .eval
        .images
        .iter()
        .map(|img| predict(&encoder.embed(&img.features)?, &setting.labels))
        .collect::<Result<Vec<_>>>()?;
    validity_from_predictions(setting, &preds, tau_eval)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Precision {
    pub value: f64,
    /// Regions actually inspected, `min(k, available)`.
    pub inspected: usize,
    /// True when fewer than `k` regions were available.
    pub short: bool,
}

/// Fraction of the `k` highest-ranked regions that carry `concept`.
pub fn precision_at_k(report: &SpuriousReport, concept: &str, k: usize) -> Result<Precision> {
    if k == 0 {
        return Err(RavlError::InvalidArgument("k must be positive".into()));
    }
    if report.is_empty() {
        return Err(RavlError::Empty("spurious report"));
    }
    let top = &report.top_regions[..k.min(report.top_regions.len())];
    let hits = top.iter().filter(|r| r.concept.as_deref() == Some(concept)).count();
    Ok(Precision { value: hits as f64 / top.len() as f64, inspected: top.len(), short: top.len() < k })
}
