//! Browser bindings: three interactive operations returning JSON strings.

use ravl::discover::{Discovery, DiscoveryConfig, Variant};
use ravl::evalgen::{check_validity, cramers_v, generate_setting, precision_at_k, solve_contingency, WorldSpec};
use ravl::mitigate::{assign_pseudo_labels, loss_total, BatchImage, BatchView, Encoder, LossConfig, Mode, TrainConfig};
use ravl::{RavlError, Result};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Fine-tuning counts that realize a target Cramér's V.
pub fn contingency(n_a: u32, n_o: u32, target: f64) -> Result<Value> {
    let t = solve_contingency(u64::from(n_a), u64::from(n_o), target)?;
    Ok(json!({ "table": t, "achieved_v": cramers_v(t) }))
}

/// Generates a setting, fine-tunes on it, and ranks region clusters.
pub fn discovery(seed: u64, target_v: f64, spurious_scale: f64) -> Result<Value> {
    let spec = WorldSpec { seed, cramers_v: target_v, spurious_scale, ..WorldSpec::default() };
    let s = generate_setting(&spec)?;
    let init = Encoder::random(spec.raw_dim, spec.embed_dim, seed);
    let cfg = TrainConfig { seed, mode: Mode::Standard, ..TrainConfig::default() };
    let model = ravl::mitigate::train(&s.finetune, &s.labels, &init, &cfg, None)?.encoder;
    let validity = check_validity(&s, &model, 10.0)?;
    let eval = s.eval.embed(&model)?;
    let d = Discovery::run(&eval, &s.labels, &DiscoveryConfig { seed, ..DiscoveryConfig::default() })?;
    let report = d.report(&eval, &s.labels, Variant::Full)?;
    let precision =
        if report.is_empty() { None } else { Some(precision_at_k(&report, &s.spurious_concept, 10)?.value) };
    let top = report.top_cluster().map(|c| c.id);
    let clusters: Vec<Value> = d
        .clusters
        .iter()
        .map(|c| {
            let members = d.selection.clustering.members(c.id);
            let planted =
                members.iter().filter(|&&r| eval.regions[r].concept.as_deref() == Some(&s.spurious_concept)).count();
            json!({
                "id": c.id,
                "influence": c.influence,
                "gap": c.gap,
                "size": c.region_count,
                "planted_share": planted as f64 / members.len().max(1) as f64,
                "top": Some(c.id) == top,
            })
        })
        .collect();
    Ok(json!({
        "achieved_v": s.achieved_v,
        "eps1": validity.eps1,
        "eps2": validity.eps2,
        "valid": validity.valid,
        "k": d.selection.clustering.k,
        "silhouette": d.selection.sweep,
        "clusters": clusters,
        "precision_at_10": precision,
        "top_regions": report.top_regions.iter().take(10).map(|r| json!({"id": r.id, "concept": r.concept})).collect::<Vec<_>>(),
        "spurious_concept": s.spurious_concept,
    }))
}

/// Loss terms on one fixed batch for a given mixing weight and temperature.
pub fn loss_terms(seed: u64, lambda: f64, tau: f64, batch: usize) -> Result<Value> {
    if batch == 0 {
        return Err(RavlError::InvalidArgument("batch must be positive".into()));
    }
    let s = generate_setting(&WorldSpec { seed, ..WorldSpec::default() })?;
    let names = s.labels.names();
    let pseudo = assign_pseudo_labels(&s.finetune, names)?;
    let images = s
        .finetune
        .images
        .iter()
        .zip(&pseudo)
        .take(batch)
        .map(|(img, &p)| {
            let regions: Vec<&_> = img.regions.iter().map(|&r| &s.finetune.regions[r]).collect();
            BatchImage {
                features: img.features.clone(),
                text_label: p,
                pseudo_label: p,
                regions: regions
                    .iter()
                    .filter(|r| r.concept.as_deref() != Some(&s.spurious_concept))
                    .map(|r| r.features.clone())
                    .collect(),
                spurious: regions
                    .iter()
                    .filter(|r| r.concept.as_deref() == Some(&s.spurious_concept))
                    .map(|r| r.features.clone())
                    .collect(),
            }
        })
        .collect();
    let encoder = Encoder::random(s.spec.raw_dim, s.spec.embed_dim, seed);
    let b = loss_total(&BatchView { images }, &encoder, &s.labels, &LossConfig { lambda, tau })?;
    serde_json::to_value(b).map_err(RavlError::from)
}

fn js(r: Result<Value>) -> std::result::Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = contingency)]
pub fn contingency_js(n_a: u32, n_o: u32, target: f64) -> std::result::Result<String, JsError> {
    js(contingency(n_a, n_o, target))
}

#[wasm_bindgen(js_name = discovery)]
pub fn discovery_js(seed: u32, target_v: f64, spurious_scale: f64) -> std::result::Result<String, JsError> {
    js(discovery(u64::from(seed), target_v, spurious_scale))
}

#[wasm_bindgen(js_name = lossTerms)]
pub fn loss_terms_js(seed: u32, lambda: f64, tau: f64, batch: u32) -> std::result::Result<String, JsError> {
    js(loss_terms(u64::from(seed), lambda, tau, batch as usize))
}
