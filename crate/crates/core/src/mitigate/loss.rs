//! The region-aware contrastive objective and its analytic gradient.
//!
//! All similarities are inner products of L2-normalized vectors divided by
//! the temperature. Every `-log(a / sum)` term is evaluated as
//! `logsumexp(...) - log a`, so `exp(1/tau)` is never materialized.

use serde::{Deserialize, Serialize};

use crate::embedding::{argmax_stable, dot, log_sum_exp, Embedding};
use crate::error::{RavlError, Result};
use crate::zeroshot::LabelEmbeddings;

use super::Encoder;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the image-text contrastive term.
    pub lambda: f64,
    /// Softmax temperature.
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.8, tau: 0.07 }
    }
}

/// One image of a mini-batch, in raw feature space.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchImage {
    pub features: Vec<f64>,
    /// Label named by the caption, i.e. the frozen text embedding paired
    /// with this image in the contrastive term.
    pub text_label: Option<usize>,
    /// Label parsed from the caption for the region terms.
    pub pseudo_label: Option<usize>,
    /// Non-spurious regions.
    pub regions: Vec<Vec<f64>>,
    /// Regions assigned to the flagged spurious cluster.
    pub spurious: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchView {
    pub images: Vec<BatchImage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub contrastive: f64,
    /// Sum over images of the region-vs-label term.
    pub region: f64,
    /// Sum over images of the region-vs-batch-regions term.
    pub alignment: f64,
    /// Images left out of the region terms (no pseudo-label or no
    /// non-spurious region).
    pub skipped: usize,
}

/// `exp(<a, b> / tau)` on normalized inputs.
pub fn sigma(a: &Embedding, b: &Embedding, tau: f64) -> Result<f64> {
    Ok((dot(&a.normalized()?.0, &b.normalized()?.0) / tau).exp())
}

/// `exp(max_{a in A} <a, b> / tau)`.
pub fn sigma_m(set: &[Embedding], b: &Embedding, tau: f64) -> Result<f64> {
    if set.is_empty() {
        return Err(RavlError::Empty("region set"));
    }
    let b = b.normalized()?;
    let mut best = f64::NEG_INFINITY;
    for a in set {
        best = best.max(dot(&a.normalized()?.0, &b.0));
    }
    Ok((best / tau).exp())
}

/// Sum over spurious regions of their largest `sigma` against any batch label.
pub fn penalty(pool: &[Embedding], batch_labels: &[Embedding], tau: f64) -> Result<f64> {
    if batch_labels.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for r in pool {
        let mut best = 0.0f64;
        for y in batch_labels {
            best = best.max(sigma(r, y, tau)?);
        }
        total += best;
    }
    Ok(total)
}

struct Node<'a> {
    x: &'a [f64],
    norm: f64,
    z: Vec<f64>,
    grad: Vec<f64>,
}

/// Forward state for one batch: normalized embeddings of every image and
/// region plus their gradient accumulators.
struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    image: Vec<usize>,
    regions: Vec<Vec<usize>>,
    spurious: Vec<Vec<usize>>,
    text: Vec<Vec<f64>>,
}

impl<'a> Graph<'a> {
    fn new(batch: &'a BatchView, encoder: &Encoder, labels: &LabelEmbeddings) -> Result<Self> {
        if labels.dim() != encoder.embed_dim {
            return Err(RavlError::DimMismatch { expected: encoder.embed_dim, got: labels.dim() });
        }
        let mut g = Graph {
            nodes: Vec::new(),
            image: Vec::new(),
            regions: Vec::new(),
            spurious: Vec::new(),
            text: labels.embeddings().iter().map(|e| e.normalized().map(|e| e.0)).collect::<Result<_>>()?,
        };
        for img in &batch.images {
            let id = g.push(encoder, &img.features)?;
            g.image.push(id);
            let r = img.regions.iter().map(|x| g.push(encoder, x)).collect::<Result<_>>()?;
            g.regions.push(r);
            let s = img.spurious.iter().map(|x| g.push(encoder, x)).collect::<Result<_>>()?;
            g.spurious.push(s);
        }
        Ok(g)
    }

    fn push(&mut self, encoder: &Encoder, x: &'a [f64]) -> Result<usize> {
        let u = encoder.project(x)?;
        let norm = dot(&u, &u).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(RavlError::ZeroNorm);
        }
        let z: Vec<f64> = u.iter().map(|v| v / norm).collect();
        self.nodes.push(Node { x, norm, grad: vec![0.0; z.len()], z });
        Ok(self.nodes.len() - 1)
    }

    fn sim(&self, node: usize, label: usize) -> f64 {
        dot(&self.nodes[node].z, &self.text[label])
    }

    /// Best node among `set` for `label`, ties to the first; with the
    /// runner-up gap.
    fn best_of(&self, set: &[usize], label: usize) -> (usize, f64, f64) {
        let sims: Vec<f64> = set.iter().map(|&n| self.sim(n, label)).collect();
        let i = argmax_stable(&sims).expect("non-empty set");
        let gap =
            sims.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, s)| sims[i] - s).fold(f64::INFINITY, f64::min);
        (set[i], sims[i], gap)
    }

    /// Best label among `candidates` for one node, ties to the first.
    fn best_label(&self, node: usize, candidates: &[usize]) -> (usize, f64, f64) {
        let sims: Vec<f64> = candidates.iter().map(|&y| self.sim(node, y)).collect();
        let i = argmax_stable(&sims).expect("non-empty label set");
        let gap =
            sims.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, s)| sims[i] - s).fold(f64::INFINITY, f64::min);
        (candidates[i], sims[i], gap)
    }

    fn add_grad(&mut self, node: usize, label: usize, scale: f64) {
        let t = &self.text[label];
        for (g, tv) in self.nodes[node].grad.iter_mut().zip(t) {
            *g += scale * tv;
        }
    }

    /// `-log(exp(num) / sum(exp(terms)))`, accumulating `weight * dL/dz`.
    /// Each term is `(similarity, node, label)`; logits are `similarity / tau`.
    fn nce(
        &mut self,
        numerator: (f64, usize, usize),
        terms: &[(f64, usize, usize)],
        tau: f64,
        weight: f64,
        want_grad: bool,
    ) -> f64 {
        let logits: Vec<f64> = terms.iter().map(|t| t.0 / tau).collect();
        let lse = log_sum_exp(&logits);
        let loss = lse - numerator.0 / tau;
        if want_grad && weight != 0.0 {
            for (t, l) in terms.iter().zip(&logits) {
                self.add_grad(t.1, t.2, weight * (l - lse).exp() / tau);
            }
            self.add_grad(numerator.1, numerator.2, -weight / tau);
        }
        loss
    }

    fn backprop(&self, raw_dim: usize, embed_dim: usize) -> Vec<f64> {
        let mut grad = vec![0.0; raw_dim * embed_dim];
        for node in &self.nodes {
            if node.grad.iter().all(|g| *g == 0.0) {
                continue;
            }
            let zg = dot(&node.z, &node.grad);
            let du: Vec<f64> = node.grad.iter().zip(&node.z).map(|(g, z)| (g - z * zg) / node.norm).collect();
            for (p, &xp) in node.x.iter().enumerate() {
                if xp == 0.0 {
                    continue;
                }
                let row = &mut grad[p * embed_dim..(p + 1) * embed_dim];
                for (r, d) in row.iter_mut().zip(&du) {
                    *r += xp * d;
                }
            }
        }
        grad
    }
}

/// Symmetric image/text contrastive loss, mean over the images that have a
/// caption label.
fn contrastive(g: &mut Graph, batch: &BatchView, tau: f64, weight: f64, want_grad: bool) -> f64 {
    let pairs: Vec<(usize, usize)> =
        batch.images.iter().enumerate().filter_map(|(i, img)| img.text_label.map(|y| (g.image[i], y))).collect();
    let b = pairs.len();
    if b == 0 {
        return 0.0;
    }
    let logits: Vec<Vec<f64>> =
        pairs.iter().map(|&(node, _)| pairs.iter().map(|&(_, y)| g.sim(node, y) / tau).collect()).collect();
    let row_lse: Vec<f64> = logits.iter().map(|row| log_sum_exp(row)).collect();
    let col_lse: Vec<f64> = (0..b).map(|c| log_sum_exp(&logits.iter().map(|row| row[c]).collect::<Vec<_>>())).collect();
    let mut loss = 0.0;
    for a in 0..b {
        loss += row_lse[a] - logits[a][a];
        loss += col_lse[a] - logits[a][a];
    }
    let norm = 2.0 * b as f64;
    if want_grad && weight != 0.0 {
        for a in 0..b {
            for c in 0..b {
                let mut d = (logits[a][c] - row_lse[a]).exp() + (logits[a][c] - col_lse[c]).exp();
                if a == c {
                    d -= 2.0;
                }
                g.add_grad(pairs[a].0, pairs[c].1, weight * d / (norm * tau));
            }
        }
    }
    loss / norm
}

fn evaluate(
    batch: &BatchView,
    encoder: &Encoder,
    labels: &LabelEmbeddings,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
    if cfg.tau.is_nan() || cfg.tau <= 0.0 || !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(RavlError::InvalidArgument("need tau > 0 and lambda in [0, 1]".into()));
    }
    let mut g = Graph::new(batch, encoder, labels)?;
    let tau = cfg.tau;
    let region_weight = 1.0 - cfg.lambda;
    let contrastive_loss = contrastive(&mut g, batch, tau, cfg.lambda, want_grad);

    let batch_labels: Vec<usize> = batch.images.iter().filter_map(|i| i.pseudo_label).collect();
    let mut label_set = batch_labels.clone();
    label_set.sort_unstable();
    label_set.dedup();
    let eligible: Vec<usize> = (0..batch.images.len())
        .filter(|&i| batch.images[i].pseudo_label.is_some() && !g.regions[i].is_empty())
        .collect();
    let skipped = batch.images.len() - eligible.len();
    let pool: Vec<usize> = g.spurious.iter().flatten().copied().collect();

    let (mut region_loss, mut align_loss) = (0.0, 0.0);
    if !label_set.is_empty() {
        // penalty terms: each spurious region against its closest batch label
        let penalty_terms: Vec<(f64, usize, usize)> = pool
            .iter()
            .map(|&r| {
                let (y, s, _) = g.best_label(r, &label_set);
                (s, r, y)
            })
            .collect();
        for &i in &eligible {
            let yi = batch.images[i].pseudo_label.expect("eligible");
            let own = g.regions[i].clone();
            let (top, s, _) = g.best_of(&own, yi);
            let numerator = (s, top, yi);

            let mut terms: Vec<(f64, usize, usize)> = batch_labels
                .iter()
                .map(|&y| {
                    let (n, s, _) = g.best_of(&own, y);
                    (s, n, y)
                })
                .collect();
            terms.extend_from_slice(&penalty_terms);
            region_loss += g.nce(numerator, &terms, tau, region_weight, want_grad);

            let mut terms = vec![numerator];
            for &j in &eligible {
                if batch.images[j].pseudo_label == Some(yi) {
                    continue;
                }
                let other = g.regions[j].clone();
                let (n, s, _) = g.best_of(&other, yi);
                terms.push((s, n, yi));
            }
            terms.extend(pool.iter().map(|&r| (g.sim(r, yi), r, yi)));
            align_loss += g.nce(numerator, &terms, tau, region_weight, want_grad);
        }
    }

    let total = cfg.lambda * contrastive_loss + region_weight * (region_loss + align_loss);
    let breakdown =
        LossBreakdown { total, contrastive: contrastive_loss, region: region_loss, alignment: align_loss, skipped };
    let grad = want_grad.then(|| g.backprop(encoder.raw_dim, encoder.embed_dim));
    Ok((breakdown, grad))
}

/// `lambda * L_CL + (1 - lambda) * sum_i (L_R^i + L_A^i)` with per-term parts.
pub fn loss_total(
    batch: &BatchView,
    encoder: &Encoder,
    labels: &LabelEmbeddings,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    evaluate(batch, encoder, labels, cfg, false).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the encoder weights (same layout as
/// `Encoder::weights`). Max selections route the gradient to the first
/// maximizer.
pub fn loss_and_grad(
    batch: &BatchView,
    encoder: &Encoder,
    labels: &LabelEmbeddings,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    evaluate(batch, encoder, labels, cfg, true).map(|(l, g)| (l, g.expect("gradient requested")))
}

/// Gradient of `loss_total` with respect to the encoder weights.
pub fn grad_loss(batch: &BatchView, encoder: &Encoder, labels: &LabelEmbeddings, cfg: &LossConfig) -> Result<Vec<f64>> {
    loss_and_grad(batch, encoder, labels, cfg).map(|(_, g)| g)
}

/// Smallest gap between the winner and runner-up of any max selection the
/// loss makes on this batch; `inf` when no selection has two candidates.
pub fn selection_margin(batch: &BatchView, encoder: &Encoder, labels: &LabelEmbeddings) -> Result<f64> {
    let g = Graph::new(batch, encoder, labels)?;
    let mut label_set: Vec<usize> = batch.images.iter().filter_map(|i| i.pseudo_label).collect();
    label_set.sort_unstable();
    label_set.dedup();
    let mut margin = f64::INFINITY;
    if label_set.is_empty() {
        return Ok(margin);
    }
    for set in &g.regions {
        if set.is_empty() {
            continue;
        }
        for &y in &label_set {
            margin = margin.min(g.best_of(set, y).2);
        }
    }
    for &r in g.spurious.iter().flatten() {
        margin = margin.min(g.best_label(r, &label_set).2);
    }
    Ok(margin)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels2() -> LabelEmbeddings {
        LabelEmbeddings::new(vec!["a".into(), "b".into()], vec![Embedding(vec![1.0, 0.0]), Embedding(vec![0.0, 1.0])])
            .unwrap()
    }

    fn identity() -> Encoder {
        Encoder::from_weights(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn sigma_examples() {
        let a = Embedding(vec![1.0, 0.0]);
        let s = sigma(&a, &a, 0.07).unwrap();
        assert!((s.ln() - 1.0 / 0.07).abs() < 1e-9);
        assert_eq!(sigma_m(std::slice::from_ref(&a), &a, 0.3).unwrap(), sigma(&a, &a, 0.3).unwrap());
        let orth = Embedding(vec![0.0, 1.0]);
        assert_eq!(sigma_m(&[orth, a.clone()], &a, 0.3).unwrap(), sigma(&a, &a, 0.3).unwrap());
        assert!(sigma_m(&[], &a, 0.3).is_err());
    }

    #[test]
    fn penalty_examples() {
        let a = vec![Embedding(vec![1.0, 0.0])];
        assert_eq!(penalty(&[], &a, 1.0).unwrap(), 0.0);
        assert!((penalty(&a, &a, 1.0).unwrap() - 1f64.exp()).abs() < 1e-12);
        let wider = [a[0].clone(), Embedding(vec![-1.0, 0.2])];
        assert!(penalty(&wider, &a, 1.0).unwrap() >= penalty(&a, &a, 1.0).unwrap());
    }

    #[test]
    fn single_image_degenerate_terms() {
        let batch = BatchView {
            images: vec![BatchImage {
                features: vec![1.0, 0.0],
                text_label: Some(0),
                pseudo_label: Some(0),
                regions: vec![vec![1.0, 0.2]],
                spurious: vec![],
            }],
        };
        let l = loss_total(&batch, &identity(), &labels2(), &LossConfig::default()).unwrap();
        assert!(l.region.abs() < 1e-12);
        assert!(l.alignment.abs() < 1e-12);
        assert!(l.contrastive.abs() < 1e-12);
        assert_eq!(l.skipped, 0);
    }

    #[test]
    fn lambda_one_is_contrastive_only() {
        let batch = BatchView {
            images: vec![
                BatchImage {
                    features: vec![1.0, 0.3],
                    text_label: Some(0),
                    pseudo_label: Some(0),
                    regions: vec![vec![1.0, 0.2]],
                    spurious: vec![vec![0.5, 0.5]],
                },
                BatchImage {
                    features: vec![0.2, 1.0],
                    text_label: Some(1),
                    pseudo_label: Some(1),
                    regions: vec![vec![0.1, 1.0]],
                    spurious: vec![],
                },
            ],
        };
        let cfg = LossConfig { lambda: 1.0, tau: 0.07 };
        let l = loss_total(&batch, &identity(), &labels2(), &cfg).unwrap();
        assert_eq!(l.total, l.contrastive);
        assert!(l.region > 0.0 && l.alignment > 0.0);
    }

    #[test]
    fn images_without_regions_or_labels_are_skipped() {
        let batch = BatchView {
            images: vec![
                BatchImage {
                    features: vec![1.0, 0.0],
                    text_label: Some(0),
                    pseudo_label: None,
                    regions: vec![vec![1.0, 0.0]],
                    spurious: vec![],
                },
                BatchImage {
                    features: vec![0.0, 1.0],
                    text_label: Some(1),
                    pseudo_label: Some(1),
                    regions: vec![],
                    spurious: vec![vec![0.0, 1.0]],
                },
            ],
        };
        let l = loss_total(&batch, &identity(), &labels2(), &LossConfig::default()).unwrap();
        assert_eq!(l.skipped, 2);
        assert_eq!(l.region, 0.0);
    }

    #[test]
    fn rejects_bad_config() {
        let batch = BatchView::default();
        let bad = LossConfig { lambda: 1.5, tau: 0.07 };
        assert!(loss_total(&batch, &identity(), &labels2(), &bad).is_err());
        let bad = LossConfig { lambda: 0.5, tau: 0.0 };
        assert!(loss_total(&batch, &identity(), &labels2(), &bad).is_err());
    }
}
