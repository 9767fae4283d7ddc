//! K-Medoids under cosine distance with silhouette-based choice of `k`.
//!
//! Small problems are solved by enumerating medoid subsets. Larger ones use
//! PAM (BUILD, then best-improvement SWAP); one SWAP iteration is `O(n^2)`
//! with nearest / second-nearest caches.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, Embedding};
use crate::error::{RavlError, Result};

const SWAP_EPS: f64 = 1e-12;

/// Result of a K-Medoids fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    /// Indices into the fitted embedding list, one per cluster id, ascending.
    pub medoids: Vec<usize>,
    /// Cluster id per input point.
    pub assignment: Vec<usize>,
    /// Unit-norm medoid embeddings, for assigning unseen points.
    pub medoid_embeddings: Vec<Embedding>,
    /// Sum of cosine distances to the assigned medoid.
    pub cost: f64,
}

impl Clustering {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignment.iter().enumerate().filter_map(|(i, &c)| (c == cluster).then_some(i)).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMedoidsOptions {
    pub seed: u64,
    /// Above this many points the CLARA sampling path is used.
    pub clara_cap: usize,
    /// Number of CLARA subsamples.
    pub clara_samples: usize,
}

impl Default for KMedoidsOptions {
    fn default() -> Self {
        Self { seed: 0, clara_cap: 20_000, clara_samples: 5 }
    }
}

/// Dense symmetric cosine-distance matrix.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(units: &[Vec<f64>]) -> Self {
        let n = units.len();
        let row = |i: usize| -> Vec<f64> {
            (0..n).map(|j| if i == j { 0.0 } else { unit_distance(&units[i], &units[j]) }).collect()
        };
        #[cfg(feature = "parallel")]
        let rows: Vec<Vec<f64>> = {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(row).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let rows: Vec<Vec<f64>> = (0..n).map(row).collect();
        Self { n, data: rows.concat() }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

fn unit_distance(a: &[f64], b: &[f64]) -> f64 {
    (1.0 - dot(a, b)).max(0.0)
}

pub(crate) fn unit_vectors(embeddings: &[Embedding]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = embeddings.first() else {
        return Err(RavlError::Empty("embedding list"));
    };
    embeddings
        .iter()
        .map(|e| {
            if e.dim() != first.dim() {
                return Err(RavlError::DimMismatch { expected: first.dim(), got: e.dim() });
            }
            e.normalized().map(|u| u.0)
        })
        .collect()
}

/// Nearest medoid position for every point; ties go to the lower position.
fn nearest(dist: &DistanceMatrix, medoids: &[usize]) -> Vec<(usize, f64, f64)> {
    (0..dist.len())
        .map(|o| {
            let (mut n1, mut d1, mut d2) = (0, f64::INFINITY, f64::INFINITY);
            for (pos, &m) in medoids.iter().enumerate() {
                let d = dist.get(o, m);
                if d < d1 {
                    d2 = d1;
                    d1 = d;
                    n1 = pos;
                } else if d < d2 {
                    d2 = d;
                }
            }
            (n1, d1, d2)
        })
        .collect()
}

fn build(dist: &DistanceMatrix, k: usize) -> Vec<usize> {
    let n = dist.len();
    let mut medoids = Vec::with_capacity(k);
    let mut best = (0, f64::INFINITY);
    for i in 0..n {
        let total: f64 = (0..n).map(|j| dist.get(i, j)).sum();
        if total < best.1 {
            best = (i, total);
        }
    }
    medoids.push(best.0);
    let mut near: Vec<f64> = (0..n).map(|j| dist.get(best.0, j)).collect();
    while medoids.len() < k {
        let mut pick = (usize::MAX, f64::NEG_INFINITY);
        for c in 0..n {
            if medoids.contains(&c) {
                continue;
            }
            let gain: f64 = (0..n).map(|j| (near[j] - dist.get(c, j)).max(0.0)).sum();
            if gain > pick.1 {
                pick = (c, gain);
            }
        }
        medoids.push(pick.0);
        for (j, v) in near.iter_mut().enumerate() {
            *v = v.min(dist.get(pick.0, j));
        }
    }
    medoids
}

/// Best-improvement SWAP until no swap lowers the cost. Returns the cost after
/// every accepted swap (first entry is the starting cost).
fn swap(dist: &DistanceMatrix, medoids: &mut [usize]) -> Vec<f64> {
    let n = dist.len();
    let k = medoids.len();
    let mut trace = Vec::new();
    let mut cache = nearest(dist, medoids);
    trace.push(cache.iter().map(|c| c.1).sum());
    if k == n {
        return trace;
    }
    loop {
        let mut removal = vec![0.0; k];
        for &(n1, d1, d2) in &cache {
            removal[n1] += d2 - d1;
        }
        let mut best = (0.0, usize::MAX, usize::MAX);
        let mut delta = vec![0.0; k];
        for c in 0..n {
            if medoids.contains(&c) {
                continue;
            }
            delta.copy_from_slice(&removal);
            let mut shared = 0.0;
            for (o, &(n1, d1, d2)) in cache.iter().enumerate() {
                let doc = dist.get(o, c);
                if doc < d1 {
                    shared += doc - d1;
                    delta[n1] += d1 - d2;
                } else if doc < d2 {
                    delta[n1] += doc - d2;
                }
            }
            for (pos, d) in delta.iter().enumerate() {
                let d = d + shared;
                if d < best.0 - SWAP_EPS {
                    best = (d, pos, c);
                }
            }
        }
        if best.1 == usize::MAX {
            break;
        }
        medoids[best.1] = best.2;
        cache = nearest(dist, medoids);
        trace.push(cache.iter().map(|c| c.1).sum());
    }
    trace
}

/// Largest number of medoid subsets searched exhaustively.
const EXACT_SUBSETS: u128 = 10_000;

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Globally optimal medoids by enumeration, when the subset count is small.
/// The lexicographically first optimum wins.
fn exact(dist: &DistanceMatrix, k: usize) -> Option<Vec<usize>> {
    let n = dist.len();
    if binomial(n, k) > EXACT_SUBSETS {
        return None;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    let mut best = (f64::INFINITY, idx.clone());
    loop {
        let cost: f64 = (0..n).map(|o| idx.iter().map(|&m| dist.get(o, m)).fold(f64::INFINITY, f64::min)).sum();
        if cost < best.0 - SWAP_EPS {
            best = (cost, idx.clone());
        }
        // next combination
        let Some(i) = (0..k).rev().find(|&i| idx[i] < n - k + i) else {
            break;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
    Some(best.1)
}

fn finish(units: &[Vec<f64>], dist: Option<&DistanceMatrix>, mut medoids: Vec<usize>) -> Clustering {
    medoids.sort_unstable();
    let k = medoids.len();
    let mut assignment = Vec::with_capacity(units.len());
    let mut cost = 0.0;
    for (o, u) in units.iter().enumerate() {
        let mut best = (0, f64::INFINITY);
        for (pos, &m) in medoids.iter().enumerate() {
            let d = match dist {
                Some(dm) => dm.get(o, m),
                None => unit_distance(u, &units[m]),
            };
            if d < best.1 {
                best = (pos, d);
            }
        }
        assignment.push(best.0);
        cost += best.1;
    }
    // a medoid always belongs to its own cluster, even if duplicated
    for (pos, &m) in medoids.iter().enumerate() {
        assignment[m] = pos;
    }
    let medoid_embeddings = medoids.iter().map(|&m| Embedding(units[m].clone())).collect();
    Clustering { k, medoids, assignment, medoid_embeddings, cost }
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k < 1 || k > n {
        return Err(RavlError::InvalidArgument(format!("k = {k} must lie in [1, {n}]")));
    }
    Ok(())
}

/// K-Medoids on a precomputed distance matrix: exhaustive search when the
/// number of medoid subsets is small, PAM (BUILD + SWAP) otherwise.
pub fn pam(units: &[Vec<f64>], dist: &DistanceMatrix, k: usize) -> Result<Clustering> {
    check_k(dist.len(), k)?;
    let medoids = exact(dist, k).unwrap_or_else(|| {
        let mut m = build(dist, k);
        swap(dist, &mut m);
        m
    });
    Ok(finish(units, Some(dist), medoids))
}

/// BUILD + SWAP without the exhaustive shortcut, returning the SWAP cost trace.
pub fn pam_with_trace(embeddings: &[Embedding], k: usize) -> Result<(Clustering, Vec<f64>)> {
    let units = unit_vectors(embeddings)?;
    check_k(units.len(), k)?;
    let dist = DistanceMatrix::new(&units);
    let mut medoids = build(&dist, k);
    let trace = swap(&dist, &mut medoids);
    Ok((finish(&units, Some(&dist), medoids), trace))
}

/// CLARA: PAM on seeded subsamples, keeping the medoid set with the lowest
/// full-data cost.
fn clara(units: &[Vec<f64>], k: usize, opts: &KMedoidsOptions) -> Result<Clustering> {
    let n = units.len();
    let size = (40 + 2 * k).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..opts.clara_samples.max(1) {
        let mut idx = sample(&mut rng, n, size).into_vec();
        idx.sort_unstable();
        let sub: Vec<Vec<f64>> = idx.iter().map(|&i| units[i].clone()).collect();
        let dist = DistanceMatrix::new(&sub);
        let mut medoids = build(&dist, k);
        swap(&dist, &mut medoids);
        let full: Vec<usize> = medoids.iter().map(|&m| idx[m]).collect();
        let fit = finish(units, None, full);
        if best.as_ref().is_none_or(|b| fit.cost < b.cost) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one CLARA sample"))
}

/// Fits K-Medoids under cosine distance. Deterministic for a given seed; the
/// seed only matters on the CLARA path.
pub fn kmedoids_fit(embeddings: &[Embedding], k: usize, opts: &KMedoidsOptions) -> Result<Clustering> {
    let units = unit_vectors(embeddings)?;
    check_k(units.len(), k)?;
    if units.len() > opts.clara_cap {
        return clara(&units, k, opts);
    }
    let dist = DistanceMatrix::new(&units);
    pam(&units, &dist, k)
}

/// Mean silhouette from a distance matrix. Singleton clusters score 0, and a
/// point with `a = b = 0` scores 0.
pub fn silhouette_from(dist: &DistanceMatrix, assignment: &[usize], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(RavlError::InvalidArgument("silhouette needs k >= 2".into()));
    }
    let n = dist.len();
    let mut sizes = vec![0usize; k];
    for &c in assignment {
        sizes[c] += 1;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        let own = assignment[i];
        if sizes[own] <= 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            sums[assignment[j]] += dist.get(i, j);
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

pub fn silhouette(embeddings: &[Embedding], clustering: &Clustering) -> Result<f64> {
    let units = unit_vectors(embeddings)?;
    if units.len() != clustering.assignment.len() {
        return Err(RavlError::InvalidArgument("clustering does not match embeddings".into()));
    }
    silhouette_from(&DistanceMatrix::new(&units), &clustering.assignment, clustering.k)
}

/// Silhouette for every candidate `k`, plus the winner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    pub clustering: Clustering,
    /// `(k, silhouette)` for every swept k.
    pub sweep: Vec<(usize, f64)>,
}

/// Sweep range `[2|Y|, 5|Y|]`, clamped to the number of points.
pub fn sweep_bounds(n: usize, label_count: usize) -> Result<(usize, usize)> {
    let lo = 2 * label_count;
    if n < lo {
        return Err(RavlError::InvalidArgument(format!(
            "{n} points cannot support the minimum of {lo} clusters; lower the sweep bound in the config"
        )));
    }
    Ok((lo, (5 * label_count).min(n)))
}

pub fn select_k(embeddings: &[Embedding], label_count: usize, opts: &KMedoidsOptions) -> Result<Selection> {
    let (lo, hi) = sweep_bounds(embeddings.len(), label_count)?;
    select_k_in(embeddings, lo, hi, opts)
}

/// Fits every k in `[lo, hi]` and keeps the highest silhouette; ties go to
/// the smaller k.
pub fn select_k_in(embeddings: &[Embedding], lo: usize, hi: usize, opts: &KMedoidsOptions) -> Result<Selection> {
    let units = unit_vectors(embeddings)?;
    let n = units.len();
    let lo = lo.max(2);
    let hi = hi.min(n);
    if lo > hi {
        return Err(RavlError::InvalidArgument(format!("empty cluster sweep [{lo}, {hi}] for {n} points")));
    }
    let fits: Vec<(Clustering, f64)> = if n > opts.clara_cap {
        (lo..=hi)
            .map(|k| {
                let c = clara(&units, k, opts)?;
                let s = silhouette(embeddings, &c)?;
                Ok((c, s))
            })
            .collect::<Result<_>>()?
    } else {
        let dist = DistanceMatrix::new(&units);
        let fit_one = |k: usize| -> Result<(Clustering, f64)> {
            let c = pam(&units, &dist, k)?;
            let s = silhouette_from(&dist, &c.assignment, k)?;
            Ok((c, s))
        };
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            (lo..=hi).into_par_iter().map(fit_one).collect::<Result<_>>()?
        }
        #[cfg(not(feature = "parallel"))]
        {
            (lo..=hi).map(fit_one).collect::<Result<_>>()?
        }
    };
    let sweep: Vec<(usize, f64)> = fits.iter().map(|(c, s)| (c.k, *s)).collect();
    let mut best = 0;
    for (i, (_, s)) in fits.iter().enumerate() {
        if *s > fits[best].1 {
            best = i;
        }
    }
    let clustering = fits.into_iter().nth(best).map(|(c, _)| c).expect("non-empty sweep");
    Ok(Selection { clustering, sweep })
}

/// Nearest medoid under cosine distance; ties go to the lowest cluster id.
pub fn assign(embedding: &Embedding, clustering: &Clustering) -> Result<usize> {
    let u = embedding.normalized()?;
    let mut best = (0, f64::INFINITY);
    for (c, m) in clustering.medoid_embeddings.iter().enumerate() {
        if m.dim() != u.dim() {
            return Err(RavlError::DimMismatch { expected: m.dim(), got: u.dim() });
        }
        let d = unit_distance(&u.0, &m.0);
        if d < best.1 {
            best = (c, d);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f64]) -> Embedding {
        Embedding(v.to_vec())
    }

    fn opts() -> KMedoidsOptions {
        KMedoidsOptions::default()
    }

    #[test]
    fn identical_points_single_cluster() {
        let pts = vec![emb(&[1.0, 2.0]); 5];
        let c = kmedoids_fit(&pts, 1, &opts()).unwrap();
        assert_eq!(c.medoids, vec![0]);
        assert!(c.cost.abs() < 1e-12);
    }

    #[test]
    fn two_tight_pairs() {
        let pts = [emb(&[1.0, 0.0]), emb(&[1.0, 0.05]), emb(&[0.0, 1.0]), emb(&[0.05, 1.0])];
        let c = kmedoids_fit(&pts, 2, &opts()).unwrap();
        assert_ne!(c.assignment[0], c.assignment[2]);
        assert_eq!(c.assignment[0], c.assignment[1]);
        assert_eq!(c.assignment[2], c.assignment[3]);
        let groups: Vec<usize> = c.medoids.iter().map(|&m| m / 2).collect();
        assert_eq!(groups, vec![0, 1]);
    }

    #[test]
    fn k_out_of_range() {
        let pts = vec![emb(&[1.0, 0.0]); 3];
        assert!(kmedoids_fit(&pts, 0, &opts()).is_err());
        assert!(kmedoids_fit(&pts, 4, &opts()).is_err());
    }

    #[test]
    fn silhouette_limits() {
        let pts = [emb(&[1.0, 0.0]), emb(&[1.0, 0.0]), emb(&[0.0, 1.0]), emb(&[0.0, 1.0])];
        let c = kmedoids_fit(&pts, 2, &opts()).unwrap();
        assert!((silhouette(&pts, &c).unwrap() - 1.0).abs() < 1e-12);

        let same = vec![emb(&[1.0, 1.0]); 4];
        let c = Clustering {
            k: 2,
            medoids: vec![0, 2],
            assignment: vec![0, 0, 1, 1],
            medoid_embeddings: vec![same[0].clone(), same[2].clone()],
            cost: 0.0,
        };
        assert_eq!(silhouette(&same, &c).unwrap(), 0.0);
        let one = Clustering { k: 1, ..c };
        assert!(silhouette(&same, &one).is_err());
    }

    #[test]
    fn sweep_clamps_and_rejects() {
        assert_eq!(sweep_bounds(7, 2).unwrap(), (4, 7));
        assert_eq!(sweep_bounds(100, 2).unwrap(), (4, 10));
        assert!(sweep_bounds(3, 2).is_err());
    }

    #[test]
    fn select_k_tie_prefers_smaller() {
        // four identical points: every k scores silhouette 0
        let pts = vec![emb(&[1.0, 0.0]); 4];
        let sel = select_k_in(&pts, 2, 4, &opts()).unwrap();
        assert!(sel.sweep.iter().all(|(_, s)| *s == 0.0));
        assert_eq!(sel.clustering.k, 2);
    }

    #[test]
    fn assign_examples() {
        let pts = [emb(&[1.0, 0.0]), emb(&[0.0, 1.0]), emb(&[-1.0, 0.0]), emb(&[0.9, 0.1])];
        let c = kmedoids_fit(&pts, 3, &opts()).unwrap();
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(assign(p, &c).unwrap(), c.assignment[i]);
        }
        let m2 = c.medoid_embeddings[2].clone();
        assert_eq!(assign(&m2, &c).unwrap(), 2);

        let tie = Clustering {
            k: 2,
            medoids: vec![0, 1],
            assignment: vec![0, 1],
            medoid_embeddings: vec![emb(&[1.0, 0.0]), emb(&[0.0, 1.0])],
            cost: 0.0,
        };
        assert_eq!(assign(&emb(&[1.0, 1.0]), &tie).unwrap(), 0);
    }

    #[test]
    fn clara_path_is_seed_deterministic() {
        let pts: Vec<Embedding> = (0..200)
            .map(|i| {
                let t = i as f64 * 0.37;
                emb(&[t.cos() + (i % 3) as f64, t.sin(), (i % 5) as f64 * 0.1 + 0.2])
            })
            .collect();
        let o = KMedoidsOptions { seed: 3, clara_cap: 50, clara_samples: 3 };
        let a = kmedoids_fit(&pts, 4, &o).unwrap();
        let b = kmedoids_fit(&pts, 4, &o).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sizes().iter().sum::<usize>(), 200);
    }
}
