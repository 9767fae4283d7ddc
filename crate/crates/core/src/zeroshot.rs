//! Zero-shot classification against frozen label text embeddings, plus the
//! per-label and per-group accuracy bookkeeping used by discovery and
//! evaluation.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::embedding::{argmax_stable, cosine, softmax, Embedding, ScoreMatrix, ScoreVector};
use crate::error::{RavlError, Result};

/// Frozen text embeddings, one per class label. Label order is the order of
/// every score vector produced against this set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEmbeddings {
    names: Vec<String>,
    embeddings: Vec<Embedding>,
}

impl LabelEmbeddings {
    pub fn new(names: Vec<String>, embeddings: Vec<Embedding>) -> Result<Self> {
        if names.is_empty() {
            return Err(RavlError::Empty("label set"));
        }
        if names.len() != embeddings.len() {
            return Err(RavlError::InvalidArgument(format!(
                "{} label names but {} embeddings",
                names.len(),
                embeddings.len()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(RavlError::InvalidArgument(format!("duplicate label {n:?}")));
            }
        }
        let dim = embeddings[0].dim();
        for e in &embeddings {
            if e.dim() != dim {
                return Err(RavlError::DimMismatch { expected: dim, got: e.dim() });
            }
            if e.norm() == 0.0 {
                return Err(RavlError::ZeroNorm);
            }
        }
        Ok(Self { names, embeddings })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].dim()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub embedding: Embedding,
    /// Index into the label set.
    pub label: usize,
    /// Indices into `EvalDataset::regions`.
    pub regions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub id: String,
    /// Index into `EvalDataset::images`.
    pub image: usize,
    /// `[x0, y0, x1, y1]`
    pub bbox: [f64; 4],
    pub embedding: Embedding,
    /// Ground-truth visual concept carried by the region, when annotated.
    pub concept: Option<String>,
}

/// A labeled zero-shot evaluation set with candidate regions.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalDataset {
    pub images: Vec<ImageRecord>,
    pub regions: Vec<RegionRecord>,
}

impl EvalDataset {
    /// Checks that images and regions reference each other consistently.
    pub fn validate(&self, label_count: usize) -> Result<()> {
        let mut owner = vec![None; self.regions.len()];
        for (i, img) in self.images.iter().enumerate() {
            if img.label >= label_count {
                return Err(RavlError::InvalidArgument(format!(
                    "image {} has label index {} outside the label set",
                    img.id, img.label
                )));
            }
            for &r in &img.regions {
                let slot = owner.get_mut(r).ok_or_else(|| {
                    RavlError::InvalidArgument(format!("image {} references missing region {r}", img.id))
                })?;
                if slot.is_some() {
                    return Err(RavlError::InvalidArgument(format!("region {r} owned twice")));
                }
                *slot = Some(i);
            }
        }
        for (r, reg) in self.regions.iter().enumerate() {
            if owner[r] != Some(reg.image) {
                return Err(RavlError::InvalidArgument(format!("region {} is not listed by its image", reg.id)));
            }
        }
        Ok(())
    }

    pub fn region_embeddings(&self) -> Vec<Embedding> {
        self.regions.iter().map(|r| r.embedding.clone()).collect()
    }
}

fn similarities(embedding: &Embedding, labels: &LabelEmbeddings) -> Result<Vec<f64>> {
    if embedding.dim() != labels.dim() {
        return Err(RavlError::DimMismatch { expected: labels.dim(), got: embedding.dim() });
    }
    labels.embeddings().iter().map(|t| cosine(embedding.as_slice(), t.as_slice())).collect()
}

/// Softmax over raw cosine similarities to each label.
pub fn score_image(image_embedding: &Embedding, labels: &LabelEmbeddings) -> Result<ScoreVector> {
    softmax(&similarities(image_embedding, labels)?)
}

pub fn score_regions(regions: &[Embedding], labels: &LabelEmbeddings) -> Result<ScoreMatrix> {
    if regions.is_empty() {
        return Err(RavlError::Empty("region list"));
    }
    regions.iter().map(|r| score_image(r, labels)).collect()
}

/// Predicted label for one embedding.
pub fn predict(embedding: &Embedding, labels: &LabelEmbeddings) -> Result<usize> {
    argmax_stable(&similarities(embedding, labels)?)
}

pub fn predict_images(ds: &EvalDataset, labels: &LabelEmbeddings) -> Result<Vec<usize>> {
    ds.images.iter().map(|img| predict(&img.embedding, labels)).collect()
}

/// Counts for one (label, in/out) pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub n: usize,
    pub correct: usize,
}

impl Cell {
    pub fn accuracy(&self) -> Option<f64> {
        (self.n > 0).then(|| self.correct as f64 / self.n as f64)
    }

    fn push(&mut self, hit: bool) {
        self.n += 1;
        self.correct += usize::from(hit);
    }
}

/// Member and non-member accuracy for one label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelCells {
    pub inside: Cell,
    pub outside: Cell,
}

/// Per-label in/out accuracies, indexed by label.
pub type GroupAccuracy = Vec<LabelCells>;

/// Per-label accuracy split by a membership predicate over images.
pub fn group_accuracies(ds: &EvalDataset, labels: &LabelEmbeddings, membership: &[bool]) -> Result<GroupAccuracy> {
    let preds = predict_images(ds, labels)?;
    group_accuracies_from_predictions(ds, labels.len(), &preds, membership)
}

pub fn group_accuracies_from_predictions(
    ds: &EvalDataset,
    label_count: usize,
    predictions: &[usize],
    membership: &[bool],
) -> Result<GroupAccuracy> {
    if membership.len() != ds.images.len() || predictions.len() != ds.images.len() {
        return Err(RavlError::InvalidArgument("membership and predictions must cover every image".into()));
    }
    let mut table = vec![LabelCells::default(); label_count];
    for ((img, &pred), &member) in ds.images.iter().zip(predictions).zip(membership) {
        let cells = &mut table[img.label];
        let hit = pred == img.label;
        if member {
            cells.inside.push(hit);
        } else {
            cells.outside.push(hit);
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub group: usize,
    pub n: usize,
    pub accuracy: f64,
}

/// Overall and worst-group accuracy, as fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstGroup {
    pub overall: f64,
    pub worst_group: f64,
    pub groups: Vec<GroupStat>,
}

/// Overall / worst-group accuracy from `(group, correct)` outcomes.
pub fn worst_group_of(outcomes: impl IntoIterator<Item = (usize, bool)>) -> Result<WorstGroup> {
    let mut cells: BTreeMap<usize, Cell> = BTreeMap::new();
    for (g, hit) in outcomes {
        cells.entry(g).or_default().push(hit);
    }
    let total: usize = cells.values().map(|c| c.n).sum();
    if total == 0 {
        return Err(RavlError::Empty("group outcomes"));
    }
    let correct: usize = cells.values().map(|c| c.correct).sum();
    let groups: Vec<GroupStat> = cells
        .iter()
        .filter_map(|(&group, c)| c.accuracy().map(|accuracy| GroupStat { group, n: c.n, accuracy }))
        .collect();
    let worst_group = groups.iter().map(|g| g.accuracy).fold(f64::INFINITY, f64::min);
    Ok(WorstGroup { overall: correct as f64 / total as f64, worst_group, groups })
}

/// Image- and region-level overall / worst-group accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstGroupMetrics {
    pub image: WorstGroup,
    pub region: Option<WorstGroup>,
}

/// `image_groups[i]` is the subgroup of image `i`; region groups are taken from
/// `region_groups` and only regions whose concept tag names a label count.
pub fn worst_group_metrics(
    ds: &EvalDataset,
    labels: &LabelEmbeddings,
    image_groups: &[usize],
    region_groups: &[usize],
) -> Result<WorstGroupMetrics> {
    if image_groups.len() != ds.images.len() || region_groups.len() != ds.regions.len() {
        return Err(RavlError::InvalidArgument("every image and region needs a group".into()));
    }
    let preds = predict_images(ds, labels)?;
    let image =
        worst_group_of(ds.images.iter().zip(&preds).zip(image_groups).map(|((img, &p), &g)| (g, p == img.label)))?;

    let mut outcomes = Vec::new();
    for (reg, &g) in ds.regions.iter().zip(region_groups) {
        let Some(truth) = reg.concept.as_deref().and_then(|c| labels.index_of(c)) else {
            continue;
        };
        outcomes.push((g, predict(&reg.embedding, labels)? == truth));
    }
    let region = if outcomes.is_empty() { None } else { Some(worst_group_of(outcomes)?) };
    Ok(WorstGroupMetrics { image, region })
}
