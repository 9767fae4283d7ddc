//! Fixtures and independent reference implementations shared by the
//! integration tests and the acceptance harness.
#![allow(dead_code)]

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ravl::cluster::Clustering;
use ravl::embedding::Embedding;
use ravl::mitigate::{grad_loss, loss_total, selection_margin, BatchImage, BatchView, Encoder, LossConfig};
use ravl::zeroshot::{EvalDataset, ImageRecord, LabelEmbeddings, RegionRecord};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn labels(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> LabelEmbeddings {
    let names = (0..count).map(|i| format!("class{i}")).collect();
    LabelEmbeddings::new(names, (0..count).map(|_| Embedding(gaussian(rng, dim))).collect()).unwrap()
}

/// Random images with 1..=3 regions each; image embeddings are blurred
/// copies of their label embedding so accuracy is neither 0 nor 1.
pub fn dataset(rng: &mut ChaCha8Rng, labels: &LabelEmbeddings, images: usize) -> EvalDataset {
    let dim = labels.dim();
    let mut ds = EvalDataset::default();
    for i in 0..images {
        let label = rng.gen_range(0..labels.len());
        let t = &labels.embeddings()[label].0;
        let noise = gaussian(rng, dim);
        let emb: Vec<f64> = t.iter().zip(&noise).map(|(a, b)| a + 1.5 * b).collect();
        let mut regions = Vec::new();
        for _ in 0..rng.gen_range(1..=3) {
            regions.push(ds.regions.len());
            ds.regions.push(RegionRecord {
                id: format!("r{}", ds.regions.len()),
                image: i,
                bbox: [0.0, 0.0, 1.0, 1.0],
                embedding: Embedding(gaussian(rng, dim)),
                concept: None,
            });
        }
        ds.images.push(ImageRecord { id: format!("i{i}"), embedding: Embedding(emb), label, regions });
    }
    ds
}

/// Arbitrary partition of the regions into `k` clusters with valid medoids.
pub fn random_clustering(rng: &mut ChaCha8Rng, ds: &EvalDataset, k: usize) -> Clustering {
    let n = ds.regions.len();
    let mut assignment: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.gen_range(0..k) }).collect();
    assignment.shuffle(rng);
    let medoids: Vec<usize> = (0..k).map(|c| assignment.iter().position(|&a| a == c).unwrap()).collect();
    let medoid_embeddings = medoids.iter().map(|&m| ds.regions[m].embedding.normalized().unwrap()).collect();
    Clustering { k, medoids, assignment, medoid_embeddings, cost: 0.0 }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - cos(a, b)
}

/// Minimum K-Medoids cost by enumerating every medoid subset.
pub fn exhaustive_kmedoids_cost(points: &[Vec<f64>], k: usize) -> f64 {
    fn rec(points: &[Vec<f64>], k: usize, start: usize, chosen: &mut Vec<usize>, best: &mut f64) {
        if chosen.len() == k {
            let cost: f64 = points
                .iter()
                .map(|p| chosen.iter().map(|&m| cosine_distance(p, &points[m])).fold(f64::INFINITY, f64::min))
                .sum();
            *best = best.min(cost);
            return;
        }
        for m in start..points.len() {
            chosen.push(m);
            rec(points, k, m + 1, chosen, best);
            chosen.pop();
        }
    }
    let mut best = f64::INFINITY;
    rec(points, k, 0, &mut Vec::new(), &mut best);
    best
}

/// `(influence, weighted gap, unweighted gap)` of cluster `c`, written out
/// directly from the definitions.
pub fn oracle_cluster_scores(
    ds: &EvalDataset,
    labels: &LabelEmbeddings,
    assignment: &[usize],
    c: usize,
) -> (f64, f64, f64) {
    let t: Vec<&[f64]> = labels.embeddings().iter().map(|e| e.0.as_slice()).collect();
    let first_max = |xs: &[f64]| {
        let mut best = 0;
        for i in 1..xs.len() {
            if xs[i] > xs[best] {
                best = i;
            }
        }
        best
    };
    let pred: Vec<usize> = ds
        .images
        .iter()
        .map(|img| first_max(&t.iter().map(|ty| cos(&img.embedding.0, ty)).collect::<Vec<_>>()))
        .collect();
    let in_c: Vec<bool> = ds.images.iter().map(|img| img.regions.iter().any(|&r| assignment[r] == c)).collect();

    let mut h: f64 = 0.0;
    let mut g = 0.0;
    let mut g_unweighted = 0.0;
    for y in 0..labels.len() {
        let (mut n_in, mut ok_in, mut n_out, mut ok_out) = (0.0, 0.0, 0.0, 0.0);
        for (i, img) in ds.images.iter().enumerate() {
            if img.label != y {
                continue;
            }
            let hit = if pred[i] == y { 1.0 } else { 0.0 };
            if in_c[i] {
                n_in += 1.0;
                ok_in += hit;
            } else {
                n_out += 1.0;
                ok_out += hit;
            }
        }
        if n_in == 0.0 || n_out == 0.0 {
            continue;
        }
        let (p_in, p_out) = (ok_in / n_in, ok_out / n_out);
        let w = 2.0 * f64::min(n_in, n_out) / (n_in + n_out);
        g += (w * (p_in - p_out)).abs();
        g_unweighted += (p_in - p_out).abs();

        if p_in < p_out {
            let (mut hits, mut total) = (0.0, 0.0);
            for (i, img) in ds.images.iter().enumerate() {
                if !in_c[i] || img.label != y || pred[i] == y {
                    continue;
                }
                total += 1.0;
                // softmax probability of the predicted class for each region
                let probs: Vec<f64> = img
                    .regions
                    .iter()
                    .map(|&r| {
                        let s: Vec<f64> = t.iter().map(|ty| cos(&ds.regions[r].embedding.0, ty)).collect();
                        let z: f64 = s.iter().map(|v| v.exp()).sum();
                        s[pred[i]].exp() / z
                    })
                    .collect();
                if assignment[img.regions[first_max(&probs)]] == c {
                    hits += 1.0;
                }
            }
            if total > 0.0 {
                h = h.max(hits / total);
            }
        }
    }
    (h, g, g_unweighted)
}

/// Cramér's V from the Pearson chi-square statistic with expected counts.
pub fn chi2_cramers_v(table: [[u64; 2]; 2]) -> f64 {
    let t = table.map(|r| r.map(|v| v as f64));
    let n: f64 = t.iter().flatten().sum();
    let rows = [t[0][0] + t[0][1], t[1][0] + t[1][1]];
    let cols = [t[0][0] + t[1][0], t[0][1] + t[1][1]];
    if n == 0.0 || rows.contains(&0.0) || cols.contains(&0.0) {
        return 0.0;
    }
    let mut chi2 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let e = rows[i] * cols[j] / n;
            chi2 += (t[i][j] - e).powi(2) / e;
        }
    }
    (chi2 / n).sqrt()
}

pub struct GradTrial {
    pub relative_error: f64,
    pub margin: f64,
}

/// Random micro-batch with raw and embedding dimension <= 8.
pub fn micro_batch(rng: &mut ChaCha8Rng) -> (BatchView, Encoder, LabelEmbeddings) {
    let raw = rng.gen_range(2..=8);
    let emb = rng.gen_range(2..=8);
    let l = rng.gen_range(2..=4);
    let labels = labels(rng, l, emb);
    let n = rng.gen_range(1..=4);
    let images = (0..n)
        .map(|_| {
            let y = rng.gen_range(0..l);
            let pseudo = if rng.gen_bool(0.85) { Some(y) } else { None };
            BatchImage {
                features: gaussian(rng, raw),
                text_label: if rng.gen_bool(0.9) { Some(y) } else { None },
                pseudo_label: pseudo,
                regions: (0..rng.gen_range(0..=3)).map(|_| gaussian(rng, raw)).collect(),
                spurious: (0..rng.gen_range(0..=2)).map(|_| gaussian(rng, raw)).collect(),
            }
        })
        .collect();
    let encoder = Encoder::random(raw, emb, rng.gen());
    (BatchView { images }, encoder, labels)
}

/// Floor of the relative-error denominator. Central differences at
/// `h = 1e-5` carry about `1e-11 * |L|` of round-off, which would dominate a
/// smaller floor on batches whose loss is locally constant.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Analytic gradient against central differences with step `h`.
pub fn gradcheck(
    batch: &BatchView,
    encoder: &Encoder,
    labels: &LabelEmbeddings,
    cfg: &LossConfig,
    h: f64,
) -> GradTrial {
    let analytic = grad_loss(batch, encoder, labels, cfg).unwrap();
    let mut numeric = vec![0.0; analytic.len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut plus = encoder.clone();
        plus.weights[i] += h;
        let mut minus = encoder.clone();
        minus.weights[i] -= h;
        let lp = loss_total(batch, &plus, labels, cfg).unwrap().total;
        let lm = loss_total(batch, &minus, labels, cfg).unwrap().total;
        *slot = (lp - lm) / (2.0 * h);
    }
    let inf = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let scale = inf(&analytic).max(inf(&numeric)).max(GRAD_FLOOR);
    GradTrial { relative_error: inf(&diff) / scale, margin: selection_margin(batch, encoder, labels).unwrap() }
}
