use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::discover::{Discovery, DiscoveryConfig, Variant};
use crate::error::{RavlError, Result};
use crate::mitigate::{assign_subgroups, evaluate_setting, train, Encoder, MitigationMetrics, Mode, TrainConfig};

use super::{check_validity, generate_setting, precision_at_k, EvalSetting, WorldSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    /// Template for every setting; the seed and spurious label are varied.
    pub world: WorldSpec,
    pub settings: usize,
    pub tau_eval: Vec<f64>,
    pub k: usize,
    pub variants: Vec<Variant>,
    pub train: TrainConfig,
    pub discovery: DiscoveryConfig,
    /// Stage-1 precision a setting needs before it enters the mitigation table.
    pub mitigation_threshold: f64,
    pub modes: Vec<Mode>,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            world: WorldSpec::default(),
            settings: 20,
            tau_eval: vec![10.0, 20.0, 30.0, 40.0],
            k: 10,
            variants: Variant::ALL.to_vec(),
            train: TrainConfig::default(),
            discovery: DiscoveryConfig::default(),
            mitigation_threshold: 0.8,
            modes: Mode::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl SuiteConfig {
    fn setting_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
    }

    /// World parameters of setting `index`; the spurious label cycles over labels.
    pub fn world_for(&self, index: usize) -> WorldSpec {
        let mut w = self.world.clone();
        w.seed = self.setting_seed(index);
        w.spurious_label = w.labels[index % w.labels.len()].clone();
        w
    }

    fn validate(&self) -> Result<()> {
        if self.tau_eval.is_empty() || self.variants.is_empty() {
            return Err(RavlError::Config("suite needs at least one tau_eval and one variant".into()));
        }
        if self.k == 0 {
            return Err(RavlError::Config("k must be positive".into()));
        }
        self.world.validate()
    }
}

/// Everything recorded about one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingResult {
    pub index: usize,
    pub seed: u64,
    pub spurious_label: String,
    pub achieved_v: Option<f64>,
    pub eps1: Option<f64>,
    pub eps2: Option<f64>,
    /// Validity at each configured `tau_eval`.
    pub valid: Vec<bool>,
    pub selected_k: Option<usize>,
    /// Precision@K per variant; `None` when the variant produced no regions.
    pub precision: Vec<(Variant, Option<f64>)>,
    pub top_concept: Option<String>,
    pub mitigation: Vec<(Mode, MitigationMetrics)>,
    pub note: Option<String>,
}

impl SettingResult {
    pub fn precision_of(&self, variant: Variant) -> Option<f64> {
        self.precision.iter().find(|(v, _)| *v == variant).and_then(|(_, p)| *p)
    }

    pub fn metrics_of(&self, mode: Mode) -> Option<&MitigationMetrics> {
        self.mitigation.iter().find(|(m, _)| *m == mode).map(|(_, x)| x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRow {
    pub variant: Variant,
    /// `(tau_eval, mean precision over valid settings, valid setting count)`.
    pub cells: Vec<(f64, Option<f64>, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationRow {
    pub mode: Mode,
    pub settings: usize,
    pub mean: Option<MitigationMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub config: SuiteConfig,
    pub settings: Vec<SettingResult>,
    pub precision: Vec<PrecisionRow>,
    pub mitigation: Vec<MitigationRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl SuiteReport {
    pub fn mean_precision(&self, variant: Variant, tau_eval: f64) -> Option<f64> {
        let row = self.precision.iter().find(|r| r.variant == variant)?;
        row.cells.iter().find(|c| c.0 == tau_eval).and_then(|c| c.1)
    }

    pub fn mitigation_mean(&self, mode: Mode) -> Option<MitigationMetrics> {
        self.mitigation.iter().find(|r| r.mode == mode).and_then(|r| r.mean)
    }

    pub fn precision_csv(&self) -> String {
        let mut out = String::from("variant");
        for t in &self.config.tau_eval {
            let _ = write!(out, ",tau_{t}");
        }
        out.push('\n');
        for row in &self.precision {
            out.push_str(row.variant.as_str());
            for c in &row.cells {
                let _ = write!(out, ",{}", fmt_opt(c.1));
            }
            out.push('\n');
        }
        out.push_str("valid_settings");
        if let Some(row) = self.precision.first() {
            for c in &row.cells {
                let _ = write!(out, ",{}", c.2);
            }
        }
        out.push('\n');
        out
    }

    pub fn mitigation_csv(&self) -> String {
        let mut out = String::from("mode,settings,img_overall,img_wg,reg_overall,reg_wg\n");
        for row in &self.mitigation {
            let m = row.mean;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                row.mode,
                row.settings,
                fmt_opt(m.map(|m| 100.0 * m.img_overall)),
                fmt_opt(m.map(|m| 100.0 * m.img_wg)),
                fmt_opt(m.map(|m| 100.0 * m.reg_overall)),
                fmt_opt(m.map(|m| 100.0 * m.reg_wg)),
            );
        }
        out
    }

    pub fn ledger_csv(&self) -> String {
        let mut out = String::from("setting,seed,spurious_label,achieved_v,eps1,eps2");
        for t in &self.config.tau_eval {
            let _ = write!(out, ",valid_{t}");
        }
        out.push_str(",note\n");
        for s in &self.settings {
            let _ = write!(
                out,
                "{},{},{},{},{},{}",
                s.index,
                s.seed,
                s.spurious_label,
                fmt_opt(s.achieved_v),
                fmt_opt(s.eps1),
                fmt_opt(s.eps2)
            );
            for v in &s.valid {
                let _ = write!(out, ",{v}");
            }
            let note = s.note.as_deref().unwrap_or("").replace([',', '\n'], ";");
            let _ = writeln!(out, ",{note}");
        }
        out
    }
}

fn run_setting(cfg: &SuiteConfig, index: usize) -> SettingResult {
    let world = cfg.world_for(index);
    let mut result = SettingResult {
        index,
        seed: world.seed,
        spurious_label: world.spurious_label.clone(),
        achieved_v: None,
        eps1: None,
        eps2: None,
        valid: vec![false; cfg.tau_eval.len()],
        selected_k: None,
        precision: Vec::new(),
        top_concept: None,
        mitigation: Vec::new(),
        note: None,
    };
    if let Err(e) = evaluate(cfg, &world, &mut result) {
        result.note = Some(e.to_string());
    }
    result
}

fn evaluate(cfg: &SuiteConfig, world: &WorldSpec, out: &mut SettingResult) -> Result<()> {
    let setting = generate_setting(world)?;
    out.achieved_v = Some(setting.achieved_v);
    let init = Encoder::random(world.raw_dim, world.embed_dim, world.seed);
    let train_cfg = TrainConfig { seed: world.seed, mode: Mode::Standard, ..cfg.train.clone() };
    let model = train(&setting.finetune, &setting.labels, &init, &train_cfg, None)?;
    let m = &model.encoder;

    for (slot, &tau) in cfg.tau_eval.iter().enumerate() {
        let v = check_validity(&setting, m, tau)?;
        out.eps1 = v.eps1;
        out.eps2 = v.eps2;
        out.valid[slot] = v.valid;
        if !v.valid && out.note.is_none() {
            out.note = v.reason;
        }
    }
    if let Some(d) = model.diverged {
        out.note = Some(format!("standard fine-tuning diverged at epoch {d}"));
    }

    let eval = setting.eval.embed(m)?;
    let discovery_cfg = DiscoveryConfig { seed: world.seed, ..cfg.discovery.clone() };
    let discovery = Discovery::run(&eval, &setting.labels, &discovery_cfg)?;
    out.selected_k = Some(discovery.selection.clustering.k);
    let mut full_report = None;
    for &variant in &cfg.variants {
        let report = discovery.report(&eval, &setting.labels, variant)?;
        let p = match precision_at_k(&report, &setting.spurious_concept, cfg.k) {
            Ok(p) => Some(p.value),
            Err(RavlError::Empty(_)) => None,
            Err(e) => return Err(e),
        };
        out.precision.push((variant, p));
        if variant == Variant::Full {
            out.top_concept = report.top_regions.first().and_then(|r| r.concept.clone());
            full_report = Some(report);
        }
    }

    let stage1 = out.precision_of(Variant::Full).unwrap_or(0.0);
    if !out.valid[0] || stage1 < cfg.mitigation_threshold {
        return Ok(());
    }
    let report = full_report.expect("full variant ran");
    mitigate(cfg, &setting, &init, m, &report, out)
}

fn mitigate(
    cfg: &SuiteConfig,
    setting: &EvalSetting,
    init: &Encoder,
    standard: &Encoder,
    report: &crate::discover::SpuriousReport,
    out: &mut SettingResult,
) -> Result<()> {
    let sg = assign_subgroups(&setting.finetune, standard, setting.labels.names(), Some(report))?;
    for &mode in &cfg.modes {
        let encoder = if mode == Mode::Standard {
            standard.clone()
        } else {
            let tc = TrainConfig { seed: setting.spec.seed, mode, ..cfg.train.clone() };
            train(&setting.finetune, &setting.labels, init, &tc, Some(&sg))?.encoder
        };
        let metrics = evaluate_setting(&setting.eval, &encoder, &setting.labels, &setting.spurious_concept)?;
        out.mitigation.push((mode, metrics));
    }
    Ok(())
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Runs every setting (in parallel when enabled) and aggregates.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    cfg.validate()?;
    #[cfg(feature = "parallel")]
    let settings: Vec<SettingResult> = {
        use rayon::prelude::*;
        (0..cfg.settings).into_par_iter().map(|i| run_setting(cfg, i)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let settings: Vec<SettingResult> = (0..cfg.settings).map(|i| run_setting(cfg, i)).collect();

    let precision = cfg
        .variants
        .iter()
        .map(|&variant| PrecisionRow {
            variant,
            cells: cfg
                .tau_eval
                .iter()
                .enumerate()
                .map(|(slot, &tau)| {
                    let valid: Vec<&SettingResult> = settings.iter().filter(|s| s.valid[slot]).collect();
                    // a variant that returns nothing scores zero
                    let m = mean(valid.iter().map(|s| s.precision_of(variant).unwrap_or(0.0)));
                    (tau, m, valid.len())
                })
                .collect(),
        })
        .collect();

    let mitigation = cfg
        .modes
        .iter()
        .map(|&mode| {
            let rows: Vec<&MitigationMetrics> = settings.iter().filter_map(|s| s.metrics_of(mode)).collect();
            let avg = |f: fn(&MitigationMetrics) -> f64| mean(rows.iter().map(|m| f(m)));
            let mean = (!rows.is_empty()).then(|| MitigationMetrics {
                img_overall: avg(|m| m.img_overall).unwrap_or(0.0),
                img_wg: avg(|m| m.img_wg).unwrap_or(0.0),
                reg_overall: avg(|m| m.reg_overall).unwrap_or(0.0),
                reg_wg: avg(|m| m.reg_wg).unwrap_or(0.0),
            });
            MitigationRow { mode, settings: rows.len(), mean }
        })
        .collect();

    Ok(SuiteReport { config: cfg.clone(), settings, precision, mitigation })
}
