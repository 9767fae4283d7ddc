use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::RawDataset;
use crate::error::{RavlError, Result};
use crate::zeroshot::{predict, worst_group_of, LabelEmbeddings};

use super::loss::{loss_and_grad, loss_total, BatchImage, BatchView, LossBreakdown, LossConfig};
use super::subgroups::{LabelMatcher, Subgroup, SubgroupAssignment};
use super::Encoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Contrastive loss, uniform batches.
    Standard,
    /// Contrastive loss, batches drawn with inverse subgroup frequency.
    Upsampled,
    /// Region-aware loss, batches drawn with inverse subgroup frequency.
    Ravl,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Standard, Mode::Upsampled, Mode::Ravl];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Standard => "standard",
            Mode::Upsampled => "upsampled",
            Mode::Ravl => "ravl",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = RavlError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| RavlError::InvalidArgument(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            tau: 0.07,
            learning_rate: 0.02,
            batch_size: 32,
            epochs: 40,
            patience: 5,
            validation_fraction: 0.2,
            seed: 0,
            mode: Mode::Standard,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        match self.mode {
            Mode::Ravl => LossConfig { lambda: self.lambda, tau: self.tau },
            Mode::Standard | Mode::Upsampled => LossConfig { lambda: 1.0, tau: self.tau },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub loss: f64,
    pub contrastive: f64,
    pub region: f64,
    pub alignment: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub encoder: Encoder,
    pub log: Vec<TrainLogRow>,
    pub best_epoch: usize,
    /// Epoch at which a non-finite loss stopped training.
    pub diverged: Option<usize>,
}

/// Per-image weight `1 / |group|`, giving every subgroup equal expected mass.
pub fn sampling_weights(groups: &[Subgroup]) -> Vec<f64> {
    let mut counts: BTreeMap<Subgroup, usize> = BTreeMap::new();
    for g in groups {
        *counts.entry(*g).or_insert(0) += 1;
    }
    groups.iter().map(|g| 1.0 / counts[g] as f64).collect()
}

struct Prepared {
    images: Vec<BatchImage>,
}

impl Prepared {
    fn new(
        ft: &RawDataset,
        labels: &LabelEmbeddings,
        mode: Mode,
        subgroups: Option<&SubgroupAssignment>,
    ) -> Result<Self> {
        let matcher = LabelMatcher::new(labels.names())?;
        let images = ft
            .images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let mut b = BatchImage {
                    features: img.features.clone(),
                    text_label: matcher.find(&img.caption),
                    pseudo_label: None,
                    regions: Vec::new(),
                    spurious: Vec::new(),
                };
                if let (Mode::Ravl, Some(sg)) = (mode, subgroups) {
                    b.pseudo_label = sg.pseudo_labels[i];
                    for &r in &img.regions {
                        let f = ft.regions[r].features.clone();
                        if sg.region_spurious[r] {
                            b.spurious.push(f);
                        } else {
                            b.regions.push(f);
                        }
                    }
                }
                b
            })
            .collect();
        Ok(Self { images })
    }

    fn batch(&self, idx: &[usize]) -> BatchView {
        BatchView { images: idx.iter().map(|&i| self.images[i].clone()).collect() }
    }
}

fn mean_rows(rows: &[LossBreakdown]) -> LossBreakdown {
    let n = rows.len().max(1) as f64;
    LossBreakdown {
        total: rows.iter().map(|r| r.total).sum::<f64>() / n,
        contrastive: rows.iter().map(|r| r.contrastive).sum::<f64>() / n,
        region: rows.iter().map(|r| r.region).sum::<f64>() / n,
        alignment: rows.iter().map(|r| r.alignment).sum::<f64>() / n,
        skipped: rows.iter().map(|r| r.skipped).sum(),
    }
}

/// Mini-batch gradient descent with early stopping on a held-out split.
/// Returns the parameters from the epoch with the lowest validation loss.
pub fn train(
    ft: &RawDataset,
    labels: &LabelEmbeddings,
    init: &Encoder,
    cfg: &TrainConfig,
    subgroups: Option<&SubgroupAssignment>,
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 || cfg.learning_rate.is_nan() || cfg.learning_rate <= 0.0 {
        return Err(RavlError::InvalidArgument("batch size and learning rate must be positive".into()));
    }
    if ft.images.len() < 2 {
        return Err(RavlError::Empty("fine-tuning set"));
    }
    if cfg.mode != Mode::Standard && subgroups.is_none() {
        return Err(RavlError::MissingArtifact(format!("{} mode needs subgroup assignments", cfg.mode)));
    }
    if let Some(sg) = subgroups {
        if sg.image_groups.len() != ft.images.len() || sg.region_spurious.len() != ft.regions.len() {
            return Err(RavlError::InvalidArgument("subgroup assignment does not match dataset".into()));
        }
    }
    let loss_cfg = cfg.loss_config();
    let prepared = Prepared::new(ft, labels, cfg.mode, subgroups)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut order: Vec<usize> = (0..ft.images.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((ft.images.len() as f64 * cfg.validation_fraction).ceil() as usize).min(ft.images.len() - 1);
    let (val, train_idx) = order.split_at(n_val);
    let (val, train_idx) = (val.to_vec(), train_idx.to_vec());

    let sampler = match (cfg.mode, subgroups) {
        (Mode::Upsampled | Mode::Ravl, Some(sg)) => {
            let groups: Vec<Subgroup> = train_idx.iter().map(|&i| sg.image_groups[i]).collect();
            Some(WeightedIndex::new(sampling_weights(&groups)).map_err(|e| RavlError::InvalidArgument(e.to_string()))?)
        }
        _ => None,
    };

    let validate = |enc: &Encoder| -> Result<(f64, f64)> {
        if val.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let rows = val
            .chunks(cfg.batch_size)
            .map(|c| loss_total(&prepared.batch(c), enc, labels, &loss_cfg))
            .collect::<Result<Vec<_>>>()?;
        let (mut hit, mut total) = (0usize, 0usize);
        for &i in &val {
            if let Some(y) = prepared.images[i].text_label {
                total += 1;
                hit += usize::from(predict(&enc.embed(&ft.images[i].features)?, labels)? == y);
            }
        }
        Ok((mean_rows(&rows).total, hit as f64 / total.max(1) as f64))
    };

    let mut encoder = init.clone();
    let mut best = (validate(&encoder)?.0, encoder.clone(), 0usize);
    let mut log = Vec::new();
    let mut stale = 0;
    let steps = train_idx.len().div_ceil(cfg.batch_size);
    let mut shuffled = train_idx.clone();

    for epoch in 1..=cfg.epochs {
        let mut rows = Vec::with_capacity(steps);
        if sampler.is_none() {
            shuffled.shuffle(&mut rng);
        }
        for step in 0..steps {
            let idx: Vec<usize> = match &sampler {
                Some(w) => (0..cfg.batch_size).map(|_| train_idx[w.sample(&mut rng)]).collect(),
                None => shuffled[step * cfg.batch_size..((step + 1) * cfg.batch_size).min(shuffled.len())].to_vec(),
            };
            let (loss, grad) = loss_and_grad(&prepared.batch(&idx), &encoder, labels, &loss_cfg)?;
            if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Ok(TrainOutcome { encoder, log, best_epoch: best.2, diverged: Some(epoch) });
            }
            encoder.descend(&grad, cfg.learning_rate);
            rows.push(loss);
        }
        let (val_loss, val_accuracy) = validate(&encoder)?;
        let mean = mean_rows(&rows);
        log.push(TrainLogRow {
            epoch,
            loss: mean.total,
            contrastive: mean.contrastive,
            region: mean.region,
            alignment: mean.alignment,
            val_loss,
            val_accuracy,
        });
        if !val_loss.is_finite() && !val.is_empty() {
            return Ok(TrainOutcome { encoder: best.1, log, best_epoch: best.2, diverged: Some(epoch) });
        }
        if val.is_empty() || val_loss < best.0 {
            best = (val_loss, encoder.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome { encoder: best.1, log, best_epoch: best.2, diverged: None })
}

/// Image and region overall / worst-group accuracy, as fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MitigationMetrics {
    pub img_overall: f64,
    pub img_wg: f64,
    pub reg_overall: f64,
    pub reg_wg: f64,
}

/// Groups are `(label, carries spurious concept)`; a region inherits the
/// group of its image and only regions tagged with a class name count.
pub fn evaluate_setting(
    eval: &RawDataset,
    encoder: &Encoder,
    labels: &LabelEmbeddings,
    spurious_concept: &str,
) -> Result<MitigationMetrics> {
    let image_group: Vec<usize> = (0..eval.images.len())
        .map(|i| 2 * eval.images[i].label + usize::from(eval.has_concept(i, spurious_concept)))
        .collect();
    let image = worst_group_of(
        eval.images
            .iter()
            .zip(&image_group)
            .map(|(img, &g)| Ok((g, predict(&encoder.embed(&img.features)?, labels)? == img.label)))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let mut outcomes = Vec::new();
    for r in &eval.regions {
        let Some(truth) = r.concept.as_deref().and_then(|c| labels.index_of(c)) else {
            continue;
        };
        outcomes.push((image_group[r.image], predict(&encoder.embed(&r.features)?, labels)? == truth));
    }
    let region = worst_group_of(outcomes)?;
    Ok(MitigationMetrics {
        img_overall: image.overall,
        img_wg: image.worst_group,
        reg_overall: region.overall,
        reg_wg: region.worst_group,
    })
}
