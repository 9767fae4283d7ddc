//! `ravl` command-line interface.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::RawDataset;
use crate::discover::{Discovery, SpuriousReport, Variant};
use crate::error::{RavlError, Result};
use crate::evalgen::{cramers_v, generate_setting, precision_at_k, run_suite, SuiteReport, WorldSpec};
use crate::format;
use crate::mitigate::{assign_subgroups, evaluate_setting, train, Encoder, MitigationMetrics, Mode, TrainConfig};
use crate::zeroshot::LabelEmbeddings;

#[derive(Debug, Parser)]
#[command(name = "ravl", version, about = "Rank region clusters that drive zero-shot errors and retrain against them")]
pub struct Cli {
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic evaluation setting.
    Gen,
    /// Rank region clusters by how strongly they drive errors.
    Discover(DiscoverArgs),
    /// Fine-tune an encoder and report overall / worst-group accuracy.
    Mitigate(MitigateArgs),
    /// Run the full multi-setting evaluation.
    Suite(SuiteArgs),
}

#[derive(Debug, Args)]
pub struct DiscoverArgs {
    /// Directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Encoder checkpoint; without it the evaluation rows are used as embeddings.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long, default_value = "full")]
    pub variant: Variant,
    #[arg(long = "tau-l")]
    pub tau_l: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MitigateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "ravl")]
    pub mode: Mode,
    /// Report written by `discover`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Encoder the report was computed with.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SuiteArgs {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long = "tau-l")]
    pub tau_l: Option<f64>,
    /// Comma-separated list, e.g. `10,20,30,40`.
    #[arg(long = "tau-eval", value_delimiter = ',')]
    pub tau_eval: Option<Vec<f64>>,
}

/// Metadata saved next to a generated setting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SettingMeta {
    pub spec: WorldSpec,
    pub spurious_label: String,
    pub spurious_concept: String,
    pub contingency: [[u64; 2]; 2],
    pub achieved_v: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    pub seed: u64,
    pub config: RunConfig,
    pub precision_at_k: Option<f64>,
    pub report: SpuriousReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsFile {
    pub mode: Mode,
    pub seed: u64,
    pub config: TrainConfig,
    pub metrics: MitigationMetrics,
}

const FINETUNE: &str = "finetune.emb";
const EVAL: &str = "eval.emb";
const LABELS: &str = "labels.emb";
const SETTING: &str = "setting.json";

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::with_sections(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    match &cli.command {
        Command::Discover(a) => {
            cfg.tau_l = a.tau_l.unwrap_or(cfg.tau_l);
            cfg.k = a.k.unwrap_or(cfg.k);
        }
        Command::Suite(a) => {
            cfg.tau_l = a.tau_l.unwrap_or(cfg.tau_l);
            cfg.k = a.k.unwrap_or(cfg.k);
            if let Some(t) = &a.tau_eval {
                cfg.tau_eval = t.clone();
            }
        }
        Command::Gen | Command::Mitigate(_) => {}
    }
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    format::atomic_write(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => RavlError::MissingArtifact(path.display().to_string()),
        _ => e.into(),
    })?;
    serde_json::from_slice(&bytes)
        .map_err(|e| RavlError::Corrupt { offset: 0, reason: format!("{}: {e}", path.display()) })
}

fn gen(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let spec = cfg.world()?;
    let s = generate_setting(&spec)?;
    let dir = &cfg.out_dir;
    let names = s.labels.names();
    format::write_dataset(&dir.join(FINETUNE), &s.finetune, names)?;
    format::write_dataset(&dir.join(EVAL), &s.eval, names)?;
    format::write_labels(&dir.join(LABELS), &s.labels)?;
    let meta = SettingMeta {
        spec: s.spec.clone(),
        spurious_label: names[s.spurious_label].clone(),
        spurious_concept: s.spurious_concept.clone(),
        contingency: s.contingency,
        achieved_v: s.achieved_v,
        seed: spec.seed,
    };
    write_json(&dir.join(SETTING), &meta)?;
    writeln!(out, "target Cramér's V {:.4}, achieved {:.4}", spec.cramers_v, cramers_v(s.contingency))?;
    writeln!(
        out,
        "contingency [{}: with {}, without {}] [others: with {}, without {}]",
        meta.spurious_label, s.contingency[0][0], s.contingency[0][1], s.contingency[1][0], s.contingency[1][1]
    )?;
    writeln!(out, "wrote {}", dir.display())?;
    Ok(())
}

fn identity(dim: usize) -> Result<Encoder> {
    let mut w = vec![0.0; dim * dim];
    (0..dim).for_each(|i| w[i * dim + i] = 1.0);
    Encoder::from_weights(dim, dim, w)
}

fn load_encoder_or_identity(path: Option<&Path>, data: &RawDataset) -> Result<Encoder> {
    match path {
        Some(p) => format::read_encoder(p),
        None => identity(data.feature_dim().ok_or(RavlError::Empty("evaluation set"))?),
    }
}

fn load_labels(data: &Path) -> Result<LabelEmbeddings> {
    format::read_labels(&data.join(LABELS))
}

fn discover_cmd(cfg: &RunConfig, args: &DiscoverArgs, out: &mut dyn Write) -> Result<()> {
    let labels = load_labels(&args.data)?;
    let raw = format::read_dataset(&args.data.join(EVAL), labels.names())?;
    let encoder = load_encoder_or_identity(args.encoder.as_deref(), &raw)?;
    let eval = raw.embed(&encoder)?;
    let discovery = Discovery::run(&eval, &labels, &cfg.discovery())?;
    let report = discovery.report(&eval, &labels, args.variant)?;

    let meta: Option<SettingMeta> = read_json(&args.data.join(SETTING)).ok();
    let precision = match &meta {
        Some(m) if !report.is_empty() => Some(precision_at_k(&report, &m.spurious_concept, cfg.k)?.value),
        _ => None,
    };

    writeln!(out, "variant {} status {:?} k {}", report.variant, report.status, report.clustering.k)?;
    if let Some(c) = report.top_cluster() {
        writeln!(
            out,
            "top cluster {}: H_c {:.4} G_c {:.4} ({:.1}%), regions {}, correlated attribute {}",
            c.id,
            c.influence,
            c.gap,
            c.gap_percent(),
            c.region_count,
            report.correlated_attribute.as_deref().unwrap_or("-")
        )?;
    }
    for r in report.top_regions.iter().take(cfg.k) {
        writeln!(out, "  {} ({}) {}", r.id, r.image_id, r.concept.as_deref().unwrap_or("-"))?;
    }
    if let Some(p) = precision {
        writeln!(out, "precision@{} {:.4}", cfg.k, p)?;
    }
    let path = cfg.out_dir.join(format!("report_{}.json", report.variant));
    write_json(&path, &ReportFile { seed: cfg.seed, config: cfg.clone(), precision_at_k: precision, report })?;
    writeln!(out, "wrote {}", path.display())?;
    Ok(())
}

fn mitigate_cmd(cfg: &RunConfig, args: &MitigateArgs, out: &mut dyn Write) -> Result<()> {
    let labels = load_labels(&args.data)?;
    let meta: SettingMeta = read_json(&args.data.join(SETTING))?;
    let ft = format::read_dataset(&args.data.join(FINETUNE), labels.names())?;
    let eval = format::read_dataset(&args.data.join(EVAL), labels.names())?;
    let raw_dim = ft.feature_dim().ok_or(RavlError::Empty("fine-tuning set"))?;

    let subgroups = match args.mode {
        Mode::Standard => None,
        mode => {
            let report = match &args.report {
                Some(p) => Some(read_json::<ReportFile>(p)?.report),
                None if mode == Mode::Ravl => {
                    return Err(RavlError::MissingArtifact("ravl mode needs --report".into()));
                }
                None => None,
            };
            let encoder = match (&report, &args.encoder) {
                (Some(_), Some(p)) => format::read_encoder(p)?,
                (Some(_), None) => {
                    return Err(RavlError::MissingArtifact("--report needs the --encoder it was computed with".into()))
                }
                (None, _) => identity(raw_dim)?,
            };
            Some(assign_subgroups(&ft, &encoder, labels.names(), report.as_ref())?)
        }
    };
    if let Some(sg) = &subgroups {
        for w in &sg.warnings {
            writeln!(out, "warning: {w}")?;
        }
    }

    let tc = TrainConfig { mode: args.mode, seed: cfg.seed, ..cfg.train.clone() };
    let init = Encoder::random(raw_dim, labels.dim(), cfg.seed);
    let outcome = train(&ft, &labels, &init, &tc, subgroups.as_ref())?;
    if let Some(e) = outcome.diverged {
        writeln!(out, "warning: training diverged at epoch {e}; keeping last finite checkpoint")?;
    }
    let metrics = evaluate_setting(&eval, &outcome.encoder, &labels, &meta.spurious_concept)?;

    let dir = &cfg.out_dir;
    format::write_encoder(&dir.join(format!("encoder_{}.emb", args.mode)), &outcome.encoder)?;
    let mut log = csv::Writer::from_writer(Vec::new());
    for row in &outcome.log {
        log.serialize(row)?;
    }
    let bytes = log.into_inner().map_err(|e| RavlError::Io(e.into_error()))?;
    format::atomic_write(&dir.join(format!("train_log_{}.csv", args.mode)), &bytes)?;
    write_json(
        &dir.join(format!("metrics_{}.json", args.mode)),
        &MetricsFile { mode: args.mode, seed: cfg.seed, config: tc, metrics },
    )?;

    writeln!(
        out,
        "{}: img overall {:.1} img wg {:.1} reg overall {:.1} reg wg {:.1} (best epoch {})",
        args.mode,
        100.0 * metrics.img_overall,
        100.0 * metrics.img_wg,
        100.0 * metrics.reg_overall,
        100.0 * metrics.reg_wg,
        outcome.best_epoch
    )?;
    Ok(())
}

fn suite_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let suite = cfg.suite()?;
    let report: SuiteReport = with_threads(cfg.threads, || run_suite(&suite))??;
    let dir = &cfg.out_dir;
    format::atomic_write(&dir.join("suite_precision.csv"), report.precision_csv().as_bytes())?;
    format::atomic_write(&dir.join("suite_mitigation.csv"), report.mitigation_csv().as_bytes())?;
    format::atomic_write(&dir.join("suite_ledger.csv"), report.ledger_csv().as_bytes())?;
    write_json(&dir.join("suite.json"), &report)?;
    let valid = report.settings.iter().filter(|s| s.valid[0]).count();
    writeln!(out, "{valid} of {} settings valid at tau_eval {}", report.settings.len(), suite.tau_eval[0])?;
    if valid == 0 {
        for s in &report.settings {
            writeln!(out, "  setting {}: {}", s.index, s.note.as_deref().unwrap_or("invalid"))?;
        }
    }
    out.write_all(report.precision_csv().as_bytes())?;
    out.write_all(report.mitigation_csv().as_bytes())?;
    writeln!(out, "wrote {}", dir.display())?;
    Ok(())
}

#[cfg(feature = "parallel")]
fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) => {
            let pool =
                rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| RavlError::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_threads<T>(_threads: Option<usize>, f: impl FnOnce() -> T) -> Result<T> {
    Ok(f())
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Gen => gen(&cfg, out),
        Command::Discover(a) => discover_cmd(&cfg, a, out),
        Command::Mitigate(a) => mitigate_cmd(&cfg, a, out),
        Command::Suite(_) => suite_cmd(&cfg, out),
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
