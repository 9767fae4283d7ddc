//! Stage 1: score feature clusters by influence on mispredictions and by the
//! accuracy gap they induce, prune, and rank.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{select_k, select_k_in, Clustering, KMedoidsOptions, Selection};
use crate::embedding::{argmax_stable, cosine};
use crate::error::{RavlError, Result};
use crate::zeroshot::{
    group_accuracies_from_predictions, predict_images, score_regions, EvalDataset, LabelCells, LabelEmbeddings,
};

pub const DEFAULT_TAU_L: f64 = 0.25;

/// Cluster ranking rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Influence pruning, then weighted gap.
    Full,
    /// Weighted gap without pruning.
    GapOnly,
    /// Gap with unit label weights, without pruning.
    UnweightedGap,
    /// Seeded shuffle of all candidate regions.
    Random,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::GapOnly, Variant::UnweightedGap, Variant::Random];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::GapOnly => "gap_only",
            Variant::UnweightedGap => "unweighted_gap",
            Variant::Random => "random",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = RavlError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| RavlError::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    pub tau_l: f64,
    /// Overrides the `[2|Y|, 5|Y|]` cluster-count sweep.
    pub sweep: Option<(usize, usize)>,
    pub seed: u64,
    pub clara_cap: usize,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self { tau_l: DEFAULT_TAU_L, sweep: None, seed: 0, clara_cap: KMedoidsOptions::default().clara_cap }
    }
}

impl DiscoveryConfig {
    fn kmedoids(&self) -> KMedoidsOptions {
        KMedoidsOptions { seed: self.seed, clara_cap: self.clara_cap, ..KMedoidsOptions::default() }
    }
}

/// Statistics of one cluster for one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub label: usize,
    pub n_in: usize,
    pub p_in: Option<f64>,
    pub n_out: usize,
    pub p_out: Option<f64>,
    pub weight: f64,
    /// Signed weighted gap.
    pub gap: f64,
    /// Signed gap with unit weight (0 when either side is empty).
    pub unweighted_gap: f64,
    /// Influence restricted to this label, when it has eligible images.
    pub influence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCluster {
    pub id: usize,
    pub medoid_region: usize,
    pub region_count: usize,
    pub image_count: usize,
    /// Labels of images touching the cluster, ascending.
    pub labels: Vec<LabelStats>,
    pub influence: f64,
    pub gap: f64,
    pub unweighted_gap: f64,
}

impl FeatureCluster {
    /// Gap on the percent scale.
    pub fn gap_percent(&self) -> f64 {
        self.gap * 100.0
    }

    /// Label with the largest absolute weighted gap.
    pub fn correlated_label(&self) -> Option<usize> {
        let mags: Vec<f64> = self.labels.iter().map(|l| l.gap.abs()).collect();
        argmax_stable(&mags).ok().map(|i| self.labels[i].label)
    }
}

/// Per-label weight `2 min(n_in, n_out) / (n_in + n_out)`.
pub fn label_weight(n_in: usize, n_out: usize) -> f64 {
    if n_in + n_out == 0 {
        return 0.0;
    }
    2.0 * n_in.min(n_out) as f64 / (n_in + n_out) as f64
}

/// Weighted and unweighted gap for one label. Empty sides contribute 0.
pub fn performance_gap(cells: &LabelCells) -> (f64, f64) {
    match (cells.inside.accuracy(), cells.outside.accuracy()) {
        (Some(p_in), Some(p_out)) => {
            let diff = p_in - p_out;
            (label_weight(cells.inside.n, cells.outside.n) * diff, diff)
        }
        _ => (0.0, 0.0),
    }
}

/// Zero-shot evidence shared by every cluster: image predictions and, per
/// image, the region scoring highest for the predicted class.
#[derive(Debug, Clone)]
pub struct Evidence {
    pub predictions: Vec<usize>,
    pub max_region: Vec<Option<usize>>,
}

impl Evidence {
    pub fn compute(ds: &EvalDataset, labels: &LabelEmbeddings) -> Result<Self> {
        let predictions = predict_images(ds, labels)?;
        let mut max_region = Vec::with_capacity(ds.images.len());
        for (img, &pred) in ds.images.iter().zip(&predictions) {
            if img.regions.is_empty() {
                max_region.push(None);
                continue;
            }
            let embs: Vec<_> = img.regions.iter().map(|&r| ds.regions[r].embedding.clone()).collect();
            let scores = score_regions(&embs, labels)?;
            let col: Vec<f64> = scores.iter().map(|row| row.0[pred]).collect();
            max_region.push(Some(img.regions[argmax_stable(&col)?]));
        }
        Ok(Self { predictions, max_region })
    }
}

/// Influence and gap statistics for every cluster of a fixed clustering.
pub fn cluster_statistics(
    ds: &EvalDataset,
    labels: &LabelEmbeddings,
    clustering: &Clustering,
    evidence: &Evidence,
) -> Result<Vec<FeatureCluster>> {
    if clustering.assignment.len() != ds.regions.len() {
        return Err(RavlError::InvalidArgument("clustering does not cover the region list".into()));
    }
    let image_clusters: Vec<BTreeSet<usize>> =
        ds.images.iter().map(|img| img.regions.iter().map(|&r| clustering.assignment[r]).collect()).collect();
    let sizes = clustering.sizes();

    let stats_for = |c: usize| -> Result<FeatureCluster> {
        let member: Vec<bool> = image_clusters.iter().map(|s| s.contains(&c)).collect();
        let table = group_accuracies_from_predictions(ds, labels.len(), &evidence.predictions, &member)?;
        let mut label_stats = Vec::new();
        for (y, cells) in table.iter().enumerate() {
            if cells.inside.n == 0 {
                continue;
            }
            let (gap, unweighted_gap) = performance_gap(cells);
            let eligible = matches!(
                (cells.inside.accuracy(), cells.outside.accuracy()),
                (Some(p_in), Some(p_out)) if p_in < p_out
            );
            let influence = if eligible {
                let (mut hits, mut total) = (0usize, 0usize);
                for (i, img) in ds.images.iter().enumerate() {
                    if !member[i] || img.label != y || evidence.predictions[i] == y {
                        continue;
                    }
                    total += 1;
                    if evidence.max_region[i].is_some_and(|r| clustering.assignment[r] == c) {
                        hits += 1;
                    }
                }
                (total > 0).then(|| hits as f64 / total as f64)
            } else {
                None
            };
            label_stats.push(LabelStats {
                label: y,
                n_in: cells.inside.n,
                p_in: cells.inside.accuracy(),
                n_out: cells.outside.n,
                p_out: cells.outside.accuracy(),
                weight: label_weight(cells.inside.n, cells.outside.n),
                gap,
                unweighted_gap,
                influence,
            });
        }
        Ok(FeatureCluster {
            id: c,
            medoid_region: clustering.medoids[c],
            region_count: sizes[c],
            image_count: member.iter().filter(|m| **m).count(),
            influence: label_stats.iter().filter_map(|l| l.influence).fold(0.0, f64::max),
            gap: label_stats.iter().map(|l| l.gap.abs()).sum(),
            unweighted_gap: label_stats.iter().map(|l| l.unweighted_gap.abs()).sum(),
            labels: label_stats,
        })
    };

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..clustering.k).into_par_iter().map(stats_for).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..clustering.k).map(stats_for).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRegion {
    pub region: usize,
    pub id: String,
    pub image_id: String,
    pub bbox: [f64; 4],
    /// Cosine to the cluster medoid; absent for the random baseline.
    pub similarity: Option<f64>,
    pub concept: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStatus {
    Ok,
    NoSpuriousClusterAboveThreshold,
}

/// Ranked spurious-feature candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousReport {
    pub variant: Variant,
    pub status: ReportStatus,
    pub tau_l: f64,
    pub seed: u64,
    /// Clusters surviving pruning, best first.
    pub clusters: Vec<FeatureCluster>,
    /// Regions of the top cluster (or the shuffled pool, for `random`),
    /// most representative first.
    pub top_regions: Vec<RankedRegion>,
    pub correlated_attribute: Option<String>,
    pub clustering: Clustering,
    pub silhouette_sweep: Vec<(usize, f64)>,
}

impl SpuriousReport {
    pub fn top_cluster(&self) -> Option<&FeatureCluster> {
        self.clusters.first()
    }

    pub fn is_empty(&self) -> bool {
        self.top_regions.is_empty()
    }
}

/// One fitted clustering with all cluster statistics; reports for any
/// variant are derived from it.
#[derive(Debug, Clone)]
pub struct Discovery {
    pub selection: Selection,
    pub clusters: Vec<FeatureCluster>,
    pub config: DiscoveryConfig,
}

impl Discovery {
    pub fn run(ds: &EvalDataset, labels: &LabelEmbeddings, config: &DiscoveryConfig) -> Result<Self> {
        ds.validate(labels.len())?;
        let embeddings = ds.region_embeddings();
        let selection = match config.sweep {
            Some((lo, hi)) => select_k_in(&embeddings, lo, hi, &config.kmedoids())?,
            None => select_k(&embeddings, labels.len(), &config.kmedoids())?,
        };
        let evidence = Evidence::compute(ds, labels)?;
        let clusters = cluster_statistics(ds, labels, &selection.clustering, &evidence)?;
        Ok(Self { selection, clusters, config: config.clone() })
    }

    pub fn report(&self, ds: &EvalDataset, labels: &LabelEmbeddings, variant: Variant) -> Result<SpuriousReport> {
        let clustering = &self.selection.clustering;
        let mut report = SpuriousReport {
            variant,
            status: ReportStatus::Ok,
            tau_l: self.config.tau_l,
            seed: self.config.seed,
            clusters: Vec::new(),
            top_regions: Vec::new(),
            correlated_attribute: None,
            clustering: clustering.clone(),
            silhouette_sweep: self.selection.sweep.clone(),
        };

        if variant == Variant::Random {
            let mut pool: Vec<usize> = (0..ds.regions.len()).collect();
            pool.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.seed));
            report.top_regions = pool.into_iter().map(|r| ranked(ds, r, None)).collect();
            return Ok(report);
        }

        let key = |c: &FeatureCluster| match variant {
            Variant::UnweightedGap => c.unweighted_gap,
            _ => c.gap,
        };
        let mut ranked_clusters: Vec<FeatureCluster> = self
            .clusters
            .iter()
            .filter(|c| variant != Variant::Full || c.influence >= self.config.tau_l)
            .cloned()
            .collect();
        ranked_clusters.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.id.cmp(&b.id)));

        let Some(top) = ranked_clusters.first() else {
            report.status = ReportStatus::NoSpuriousClusterAboveThreshold;
            return Ok(report);
        };
        let medoid = &ds.regions[top.medoid_region].embedding;
        let mut regions: Vec<(usize, f64)> = clustering
            .members(top.id)
            .into_iter()
            .map(|r| Ok((r, cosine(ds.regions[r].embedding.as_slice(), medoid.as_slice())?)))
            .collect::<Result<_>>()?;
        regions.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        report.top_regions = regions.into_iter().map(|(r, s)| ranked(ds, r, Some(s))).collect();
        report.correlated_attribute = top.correlated_label().map(|y| labels.names()[y].clone());
        report.clusters = ranked_clusters;
        Ok(report)
    }
}

fn ranked(ds: &EvalDataset, r: usize, similarity: Option<f64>) -> RankedRegion {
    let reg = &ds.regions[r];
    RankedRegion {
        region: r,
        id: reg.id.clone(),
        image_id: ds.images[reg.image].id.clone(),
        bbox: reg.bbox,
        similarity,
        concept: reg.concept.clone(),
    }
}

/// Full pipeline with default thresholds.
pub fn discover(ds: &EvalDataset, labels: &LabelEmbeddings, seed: u64) -> Result<SpuriousReport> {
    let config = DiscoveryConfig { seed, ..DiscoveryConfig::default() };
    discover_variant(ds, labels, &config, Variant::Full)
}

pub fn discover_variant(
    ds: &EvalDataset,
    labels: &LabelEmbeddings,
    config: &DiscoveryConfig,
    variant: Variant,
) -> Result<SpuriousReport> {
    Discovery::run(ds, labels, config)?.report(ds, labels, variant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zeroshot::Cell;

    fn cells(n_in: usize, c_in: usize, n_out: usize, c_out: usize) -> LabelCells {
        LabelCells { inside: Cell { n: n_in, correct: c_in }, outside: Cell { n: n_out, correct: c_out } }
    }

    #[test]
    fn weights_and_gaps() {
        let (g, _) = performance_gap(&cells(10, 9, 10, 5));
        assert!((g - 0.4).abs() < 1e-12);
        assert!((label_weight(10, 30) - 0.5).abs() < 1e-12);
        let (g, u) = performance_gap(&cells(10, 9, 30, 15));
        assert!((g - 0.2).abs() < 1e-12);
        assert!((u - 0.4).abs() < 1e-12);
        assert_eq!(performance_gap(&cells(0, 0, 10, 5)), (0.0, 0.0));
        assert_eq!(performance_gap(&cells(4, 1, 0, 0)), (0.0, 0.0));
    }

    #[test]
    fn gap_sums_absolute_values() {
        let c = FeatureCluster {
            id: 0,
            medoid_region: 0,
            region_count: 1,
            image_count: 1,
            labels: vec![],
            influence: 0.0,
            gap: [0.4f64, -0.2].iter().map(|g| g.abs()).sum(),
            unweighted_gap: 0.0,
        };
        assert!((c.gap - 0.6).abs() < 1e-12);
        assert!((c.gap_percent() - 60.0).abs() < 1e-9);
    }

    #[test]
    fn variant_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }
}
