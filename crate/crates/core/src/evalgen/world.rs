use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{RawDataset, RawImage, RawRegion};
use crate::embedding::{dot, Embedding};
use crate::error::{RavlError, Result};
use crate::mitigate::Encoder;
use crate::zeroshot::LabelEmbeddings;

const V_TOLERANCE: f64 = 0.02;
const CANVAS: f64 = 28.0;

/// Cramér's V of a 2x2 table; 0 when any marginal is empty.
pub fn cramers_v(table: [[u64; 2]; 2]) -> f64 {
    let [[a, b], [c, d]] = table.map(|r| r.map(|v| v as f64));
    let n = a + b + c + d;
    let margins = (a + b) * (c + d) * (a + c) * (b + d);
    if n == 0.0 || margins == 0.0 {
        return 0.0;
    }
    // Pearson chi^2 for 2x2, min(r-1, c-1) = 1
    let chi2 = n * (a * d - b * c).powi(2) / margins;
    (chi2 / n).sqrt().min(1.0)
}

/// Parameters of one synthetic setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub labels: Vec<String>,
    /// Label the spurious concept is planted on.
    pub spurious_label: String,
    pub spurious_concept: String,
    pub background_concepts: usize,
    pub raw_dim: usize,
    pub embed_dim: usize,
    /// Prototype norms.
    pub core_scale: f64,
    pub spurious_scale: f64,
    pub background_scale: f64,
    /// Per-coordinate Gaussian noise added to every region.
    pub noise_std: f64,
    /// Extra per-coordinate noise on core-concept regions.
    pub core_noise_std: f64,
    /// Inclusive range of background regions per image.
    pub backgrounds_per_image: (usize, usize),
    pub cramers_v: f64,
    pub finetune_size: usize,
    pub eval_size: usize,
    /// Caption templates; `{label}` is replaced by the class name.
    pub templates: Vec<String>,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            labels: vec!["zero".into(), "one".into()],
            spurious_label: "one".into(),
            spurious_concept: "red_rectangle".into(),
            background_concepts: 3,
            raw_dim: 16,
            embed_dim: 16,
            core_scale: 1.0,
            spurious_scale: 2.5,
            background_scale: 1.0,
            noise_std: 0.1,
            core_noise_std: 0.5,
            backgrounds_per_image: (1, 2),
            cramers_v: 0.95,
            finetune_size: 400,
            eval_size: 240,
            templates: vec![
                "the image shows a {label}".into(),
                "the digit appears to be {label}".into(),
                "there is an image showing a {label}".into(),
                "the number is a {label}".into(),
            ],
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn spurious_index(&self) -> Result<usize> {
        self.labels.iter().position(|l| *l == self.spurious_label).ok_or_else(|| {
            RavlError::InvalidArgument(format!("spurious label {:?} not in label set", self.spurious_label))
        })
    }

    fn concept_names(&self) -> Vec<String> {
        let mut names = self.labels.clone();
        names.push(self.spurious_concept.clone());
        names.extend((0..self.background_concepts).map(|b| format!("background_{b}")));
        names
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.labels.len();
        if l < 2 {
            return Err(RavlError::InvalidArgument("need at least two labels".into()));
        }
        self.spurious_index()?;
        if self.labels.contains(&self.spurious_concept) {
            return Err(RavlError::InvalidArgument("spurious concept must not be a label's core concept".into()));
        }
        if !(0.0..=1.0).contains(&self.cramers_v) {
            return Err(RavlError::InvalidArgument("Cramér's V target must lie in [0, 1]".into()));
        }
        if self.concept_names().len() > self.raw_dim {
            return Err(RavlError::InvalidArgument(format!(
                "{} concepts need raw_dim >= {}",
                self.concept_names().len(),
                self.concept_names().len()
            )));
        }
        if self.embed_dim < l {
            return Err(RavlError::InvalidArgument("embed_dim must be at least the label count".into()));
        }
        let (lo, hi) = self.backgrounds_per_image;
        if lo > hi || hi + 2 > 4 {
            return Err(RavlError::InvalidArgument(
                "background range must satisfy lo <= hi <= 2 (quadrant layout)".into(),
            ));
        }
        if self.eval_size == 0 || !self.eval_size.is_multiple_of(2 * l) {
            return Err(RavlError::InvalidArgument(format!("eval_size must be a positive multiple of {}", 2 * l)));
        }
        if self.finetune_size < 2 * l {
            return Err(RavlError::InvalidArgument("fine-tuning set too small".into()));
        }
        if self.templates.is_empty() || self.templates.iter().any(|t| !t.contains("{label}")) {
            return Err(RavlError::InvalidArgument("every caption template needs a {label} slot".into()));
        }
        if self.noise_std < 0.0 || self.core_noise_std < 0.0 {
            return Err(RavlError::InvalidArgument("noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// A generated setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSetting {
    pub spec: WorldSpec,
    pub labels: LabelEmbeddings,
    pub finetune: RawDataset,
    pub eval: RawDataset,
    pub spurious_label: usize,
    pub spurious_concept: String,
    /// `[[a with, a without], [others with, others without]]` in the
    /// fine-tuning set.
    pub contingency: [[u64; 2]; 2],
    pub achieved_v: f64,
    /// Unit prototype direction of every concept, by name.
    pub prototypes: Vec<(String, Vec<f64>)>,
}

impl EvalSetting {
    fn prototype(&self, name: &str) -> Option<&[f64]> {
        self.prototypes.iter().find(|(n, _)| n == name).map(|(_, p)| p.as_slice())
    }

    /// Encoder mapping each core concept exactly onto its label embedding
    /// and every other concept to zero.
    pub fn oracle_encoder(&self) -> Encoder {
        let (raw, emb) = (self.spec.raw_dim, self.spec.embed_dim);
        let mut w = vec![0.0; raw * emb];
        for (y, name) in self.spec.labels.iter().enumerate() {
            let p = self.prototype(name).expect("core prototype");
            let t = &self.labels.embeddings()[y].0;
            for i in 0..raw {
                for j in 0..emb {
                    w[i * emb + j] += p[i] * t[j];
                }
            }
        }
        Encoder { raw_dim: raw, embed_dim: emb, weights: w }
    }
}

/// Orthonormal random directions via Gram-Schmidt.
fn orthonormal(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for b in &out {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

/// Chooses how many label-`a` images (`with_a` of `n_a`) and other images
/// (`with_o` of `n_o`) carry the spurious concept so that the association is
/// non-negative and V is as close to `target` as possible. Ties go to the
/// table whose spurious total is nearest `(n_a + n_o) / 2`.
pub fn solve_contingency(n_a: u64, n_o: u64, target: f64) -> Result<[[u64; 2]; 2]> {
    let half = (n_a + n_o) as f64 / 2.0;
    let mut best: Option<(f64, f64, [[u64; 2]; 2])> = None;
    let mut v_max: f64 = 0.0;
    for s_a in 0..=n_a {
        for s_o in 0..=n_o {
            if s_a * n_o < s_o * n_a {
                continue;
            }
            let table = [[s_a, n_a - s_a], [s_o, n_o - s_o]];
            let v = cramers_v(table);
            v_max = v_max.max(v);
            let err = (v - target).abs();
            let balance = ((s_a + s_o) as f64 - half).abs();
            let better = match &best {
                None => true,
                Some((e, b, _)) => err < e - 1e-12 || ((err - e).abs() <= 1e-12 && balance < *b),
            };
            if better {
                best = Some((err, balance, table));
            }
        }
    }
    let (err, _, table) = best.ok_or(RavlError::Empty("contingency table"))?;
    if err > V_TOLERANCE {
        return Err(RavlError::Infeasible(format!(
            "Cramér's V {target} is not reachable within {V_TOLERANCE} with {n_a} + {n_o} images; \
             closest is {:.4}, feasible range is [0, {v_max:.4}]",
            cramers_v(table)
        )));
    }
    Ok(table)
}

const QUADRANTS: [[f64; 4]; 4] = [
    [0.0, 0.0, CANVAS / 2.0, CANVAS / 2.0],
    [CANVAS / 2.0, 0.0, CANVAS, CANVAS / 2.0],
    [0.0, CANVAS / 2.0, CANVAS / 2.0, CANVAS],
    [CANVAS / 2.0, CANVAS / 2.0, CANVAS, CANVAS],
];

struct Builder<'a> {
    spec: &'a WorldSpec,
    protos: &'a [Vec<f64>],
    noise: Normal<f64>,
    core_noise: Normal<f64>,
    prefix: &'static str,
    data: RawDataset,
}

impl Builder<'_> {
    fn region(&mut self, concept: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let l = self.spec.labels.len();
        let scale = if concept < l {
            self.spec.core_scale
        } else if concept == l {
            self.spec.spurious_scale
        } else {
            self.spec.background_scale
        };
        self.protos[concept]
            .iter()
            .map(|p| {
                let extra = if concept < l { self.core_noise.sample(rng) } else { 0.0 };
                scale * p + self.noise.sample(rng) + extra
            })
            .collect()
    }

    fn image(&mut self, label: usize, with_spurious: bool, rng: &mut ChaCha8Rng) {
        let spec = self.spec;
        let l = spec.labels.len();
        let names = spec.concept_names();
        let mut concepts = vec![label];
        let (lo, hi) = spec.backgrounds_per_image;
        let count = rng.gen_range(lo..=hi);
        let mut bgs: Vec<usize> = (0..spec.background_concepts).map(|b| l + 1 + b).collect();
        bgs.shuffle(rng);
        concepts.extend(bgs.into_iter().take(count));
        if with_spurious {
            concepts.push(l);
        }
        let mut quads = [0usize, 1, 2, 3];
        quads.shuffle(rng);

        let img_idx = self.data.images.len();
        let mut features = vec![0.0; spec.raw_dim];
        let mut region_ids = Vec::new();
        for (slot, &c) in concepts.iter().enumerate() {
            let f = self.region(c, rng);
            features.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
            region_ids.push(self.data.regions.len());
            self.data.regions.push(RawRegion {
                id: format!("{}-reg-{:05}", self.prefix, self.data.regions.len()),
                image: img_idx,
                bbox: QUADRANTS[quads[slot]],
                features: f,
                concept: Some(names[c].clone()),
            });
        }
        let template = spec.templates.choose(rng).expect("templates validated");
        self.data.images.push(RawImage {
            id: format!("{}-img-{:05}", self.prefix, img_idx),
            label,
            caption: template.replace("{label}", &spec.labels[label]),
            features,
            regions: region_ids,
        });
    }
}

/// Balanced per-label counts summing to `total`.
fn label_counts(total: usize, labels: usize) -> Vec<usize> {
    (0..labels).map(|y| total / labels + usize::from(y < total % labels)).collect()
}

pub fn generate_setting(spec: &WorldSpec) -> Result<EvalSetting> {
    spec.validate()?;
    let l = spec.labels.len();
    let a = spec.spurious_index()?;
    let names = spec.concept_names();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let protos = orthonormal(names.len(), spec.raw_dim, &mut rng);
    let text = orthonormal(l, spec.embed_dim, &mut rng);
    let labels = LabelEmbeddings::new(spec.labels.clone(), text.into_iter().map(Embedding).collect())?;

    let counts = label_counts(spec.finetune_size, l);
    let n_a = counts[a] as u64;
    let n_o = (spec.finetune_size - counts[a]) as u64;
    let table = solve_contingency(n_a, n_o, spec.cramers_v)?;

    // Which images carry the spurious concept: s_a of label a, s_o spread
    // round-robin over the other labels.
    let mut with = vec![0usize; l];
    with[a] = table[0][0] as usize;
    let others: Vec<usize> = (0..l).filter(|&y| y != a).collect();
    for i in 0..table[1][0] as usize {
        // skip labels already saturated
        let mut k = i % others.len();
        while with[others[k]] >= counts[others[k]] {
            k = (k + 1) % others.len();
        }
        with[others[k]] += 1;
    }

    let mk = |prefix| Builder {
        spec,
        protos: &protos,
        noise: Normal::new(0.0, spec.noise_std).expect("noise std validated"),
        core_noise: Normal::new(0.0, spec.core_noise_std).expect("noise std validated"),
        prefix,
        data: RawDataset::default(),
    };

    let mut ft_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    ft_rng.set_stream(2);
    let mut plan: Vec<(usize, bool)> = Vec::with_capacity(spec.finetune_size);
    for y in 0..l {
        plan.extend((0..counts[y]).map(|i| (y, i < with[y])));
    }
    plan.shuffle(&mut ft_rng);
    let mut ft = mk("ft");
    for (y, s) in plan {
        ft.image(y, s, &mut ft_rng);
    }

    let mut ev_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    ev_rng.set_stream(3);
    let per_label = spec.eval_size / l;
    let mut plan: Vec<(usize, bool)> = Vec::with_capacity(spec.eval_size);
    for y in 0..l {
        plan.extend((0..per_label).map(|i| (y, i < per_label / 2)));
    }
    plan.shuffle(&mut ev_rng);
    let mut ev = mk("ev");
    for (y, s) in plan {
        ev.image(y, s, &mut ev_rng);
    }

    Ok(EvalSetting {
        spec: spec.clone(),
        labels,
        finetune: ft.data,
        eval: ev.data,
        spurious_label: a,
        spurious_concept: spec.spurious_concept.clone(),
        contingency: table,
        achieved_v: cramers_v(table),
        prototypes: names.into_iter().zip(protos).collect(),
    })
}
