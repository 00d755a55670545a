//! Command-line pipeline: dataset synthesis, two-phase training,
//! evaluation reports, K-curve plots, ablations, per-slide overlays,
//! and the gradient audit. Every command writes only under its output
//! directory and is deterministic for a fixed config and seed (payload
//! files carry no timestamps).

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::backbone::BackboneConfig;
use crate::config::{AppConfig, ConfigError};
use crate::data::{gen_synthetic, BagRecord, DataError, DatasetManifest, Split};
use crate::gradcheck::{GradCheckError, GradCheckSettings};
use crate::metrics::{k_grid, kcurve_csv, per_slide_csv, summary_csv, MetricsError};
use crate::model::{evidence_tsv, export_rows, BundleError, ReamilModel};
use crate::objectives::LossWeights;
use crate::svg::{kcurve_mean_svg, overlay_svg};
use crate::trainer::{
    evaluate, full_objective_gradcheck, train_baseline, train_reamil, MetricsBundle, TrainError,
    TrainOutcome,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Data(#[from] DataError),
    #[error("{0}")]
    Bundle(#[from] BundleError),
    #[error("{0}")]
    Train(#[from] TrainError),
    #[error("{0}")]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Grad(#[from] GradCheckError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Msg(String),
}

/// Evidence-aware multiple-instance learning: train gated tile selection
/// for budgeted sufficiency and report how little evidence a prediction
/// needs.
#[derive(Debug, Parser)]
#[command(name = "reamil", version, max_term_width = 100)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Configuration file; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one config value as section.key=value (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Directory all outputs are written under.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,

    /// Run seed; drives synthesis, initialization, and training noise.
    #[arg(long, global = true, value_name = "N", default_value_t = 17)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic planted-evidence dataset.
    Synth,
    /// Phase 1: pretrain the backbone with plain cross-entropy.
    TrainBaseline,
    /// Phase 2: attach the selection head and train the full objective,
    /// warm-started from the baseline checkpoint.
    TrainReamil,
    /// Classification metrics plus the evidence report on one split.
    Eval,
    /// Per-slide K-curves and the mean-curve chart.
    Kcurve,
    /// Retrain with each loss term removed and tabulate the effects.
    Ablate,
    /// Render one slide's gate map and ranked tile list.
    Overlay {
        /// Slide to render (any split).
        slide_id: String,
    },
    /// Finite-difference audit of the full objective at toy dimensions.
    Gradcheck,
}

/// Builds the clap command with the full config reference attached to
/// `--help`, so every default is documented there.
pub fn command() -> clap::Command {
    use clap::CommandFactory;
    Cli::command().after_long_help(format!(
        "Configuration reference (the file passed to --config):\n\n{}",
        AppConfig::reference_text()
    ))
}

fn single_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Formats an error as the one-line `error:` record the binary prints on
/// stderr before exiting nonzero.
pub fn error_line(e: &CliError) -> String {
    format!("error: {}", single_line(&e.to_string()))
}

fn parse_overrides(set: &[String]) -> Result<Vec<(String, String)>, CliError> {
    set.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.to_string()))
                .ok_or_else(|| CliError::Msg(format!("--set expects KEY=VALUE, got {kv:?}")))
        })
        .collect()
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| CliError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    std::fs::write(path, content).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Resolves a configured path against the output directory unless it is
/// already absolute.
fn resolve(out: &Path, configured: &str) -> PathBuf {
    let p = Path::new(configured);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

/// Content hash identifying a run: command, seed, and the effective
/// configuration. Stable across processes and platforms (FNV-1a 64).
fn build_id(command: &str, seed: u64, cfg_text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for chunk in [command.as_bytes(), &seed.to_le_bytes(), cfg_text.as_bytes()] {
        for &b in chunk {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

fn split_from_config(cfg: &AppConfig) -> Split {
    match cfg.data.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        _ => Split::Test,
    }
}

struct Dataset {
    manifest: DatasetManifest,
    dir: PathBuf,
}

impl Dataset {
    fn open(cfg: &AppConfig, out: &Path) -> Result<Self, CliError> {
        let dir = resolve(out, &cfg.data.dir);
        let manifest = DatasetManifest::read(&dir.join("manifest.tsv"))?;
        Ok(Dataset { manifest, dir })
    }

    fn load(&self, split: Split) -> Result<Vec<BagRecord>, CliError> {
        Ok(self.manifest.load_split(&self.dir, split)?)
    }
}

/// Checks that the configured backbone actually fits the dataset before
/// spending minutes training into a shape error.
fn check_backbone_matches(cfg: &AppConfig, manifest: &DatasetManifest) -> Result<(), CliError> {
    if cfg.backbone.d_in != manifest.feature_dim() {
        return Err(CliError::Msg(format!(
            "backbone.d_in = {} but the dataset has feature dimension {}",
            cfg.backbone.d_in,
            manifest.feature_dim()
        )));
    }
    if cfg.backbone.num_classes != manifest.num_classes() {
        return Err(CliError::Msg(format!(
            "backbone.num_classes = {} but the dataset has {} classes",
            cfg.backbone.num_classes,
            manifest.num_classes()
        )));
    }
    Ok(())
}

fn run_manifest(
    command: &str,
    seed: u64,
    cfg: &AppConfig,
    metrics: &[(&str, String)],
) -> String {
    use std::fmt::Write as _;
    let cfg_text = cfg.to_text();
    let mut s = String::new();
    let _ = writeln!(s, "command = {command}");
    let _ = writeln!(s, "seed = {seed}");
    let _ = writeln!(s, "build_id = {}", build_id(command, seed, &cfg_text));
    for (k, v) in metrics {
        let _ = writeln!(s, "{k} = {v}");
    }
    let _ = writeln!(s);
    s.push_str(&cfg_text);
    s
}

fn load_checkpoint(cfg: &AppConfig, out: &Path) -> Result<ReamilModel, CliError> {
    let path = resolve(out, &cfg.eval.checkpoint);
    if !path.exists() {
        return Err(CliError::Msg(format!(
            "checkpoint {} not found; train first or point eval.checkpoint at one",
            path.display()
        )));
    }
    Ok(ReamilModel::load(&path)?)
}

fn cmd_synth(cfg: &AppConfig, out: &Path, seed: u64) -> Result<(), CliError> {
    let mut synth = cfg.synth.clone();
    synth.seed = seed;
    let dir = resolve(out, &cfg.data.dir);
    let manifest = gen_synthetic(&synth, &dir)?;
    let count = |s: Split| manifest.split_records(s).count();
    println!(
        "dataset written to {}: {} train / {} val / {} test bags, {} tiles x {} features",
        dir.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        synth.tiles_per_bag,
        synth.feature_dim,
    );
    Ok(())
}

fn train_summary_lines(outcome: &TrainOutcome) -> Vec<(&'static str, String)> {
    let mut rows = vec![
        ("best_epoch", outcome.best_epoch.to_string()),
        ("best_score", format!("{:.6}", outcome.best_score)),
    ];
    if let Some(ev) = outcome.evals.last() {
        rows.push(("final_val_auc", format!("{:.6}", ev.auc)));
        rows.push(("final_val_accuracy", format!("{:.6}", ev.accuracy)));
        rows.push(("final_val_mean_z", format!("{:.6}", ev.mean_z)));
    }
    rows
}

fn cmd_train_baseline(cfg: &AppConfig, out: &Path, seed: u64) -> Result<(), CliError> {
    let data = Dataset::open(cfg, out)?;
    check_backbone_matches(cfg, &data.manifest)?;
    let train = data.load(Split::Train)?;
    let val = data.load(Split::Val)?;
    let outcome = train_baseline(
        &train,
        &val,
        &cfg.backbone,
        &cfg.baseline_train(),
        data.manifest.num_classes(),
        seed,
    )?;
    let ckpt = out.join("baseline.ckpt");
    outcome.model.save(&ckpt)?;
    write_file(&out.join("baseline_train.log"), &outcome.log)?;
    write_file(
        &out.join("baseline_run_manifest.txt"),
        &run_manifest("train-baseline", seed, cfg, &train_summary_lines(&outcome)),
    )?;
    println!(
        "baseline trained: best epoch {} score {:.4}; checkpoint {}",
        outcome.best_epoch,
        outcome.best_score,
        ckpt.display()
    );
    Ok(())
}

fn cmd_train_reamil(cfg: &AppConfig, out: &Path, seed: u64) -> Result<(), CliError> {
    let data = Dataset::open(cfg, out)?;
    check_backbone_matches(cfg, &data.manifest)?;
    let baseline_path = out.join("baseline.ckpt");
    if !baseline_path.exists() {
        return Err(CliError::Msg(format!(
            "baseline checkpoint {} not found; run train-baseline first",
            baseline_path.display()
        )));
    }
    let baseline = ReamilModel::load(&baseline_path)?;
    let train = data.load(Split::Train)?;
    let val = data.load(Split::Val)?;
    let outcome = train_reamil(
        &train,
        &val,
        &baseline,
        &cfg.evidence_train(),
        data.manifest.num_classes(),
        seed,
    )?;
    let ckpt = out.join("reamil.ckpt");
    outcome.model.save(&ckpt)?;
    write_file(&out.join("evidence_train.log"), &outcome.log)?;
    write_file(
        &out.join("reamil_run_manifest.txt"),
        &run_manifest("train-reamil", seed, cfg, &train_summary_lines(&outcome)),
    )?;
    println!(
        "evidence phase trained: best epoch {} score {:.4}; checkpoint {}",
        outcome.best_epoch,
        outcome.best_score,
        ckpt.display()
    );
    Ok(())
}

/// `metric,mean,std` document: classification rows (no spread — one
/// number per dataset) followed by the evidence aggregate rows when the
/// model selects.
fn summary_report(bundle: &MetricsBundle) -> String {
    use std::fmt::Write as _;
    let mut s = String::from("metric,mean,std\n");
    let c = &bundle.classification;
    let _ = writeln!(s, "auc,{:.6},", c.auc);
    let _ = writeln!(s, "accuracy,{:.6},", c.accuracy);
    let _ = writeln!(s, "macro_f1,{:.6},", c.macro_f1);
    let _ = writeln!(s, "n,{},", c.n);
    if let Some(ev) = &bundle.evidence {
        for line in summary_csv(&ev.summary).lines().skip(1) {
            let _ = writeln!(s, "{line}");
        }
    }
    s
}

fn predictions_csv(bundle: &MetricsBundle, num_classes: usize) -> String {
    use std::fmt::Write as _;
    let mut s = String::from("slide_id,label");
    for c in 0..num_classes {
        let _ = write!(s, ",p{c}");
    }
    s.push('\n');
    for (id, label, probs) in &bundle.predictions {
        let _ = write!(s, "{id},{label}");
        for p in probs {
            let _ = write!(s, ",{p:.6}");
        }
        s.push('\n');
    }
    s
}

fn cmd_eval(cfg: &AppConfig, out: &Path, _seed: u64) -> Result<(), CliError> {
    let data = Dataset::open(cfg, out)?;
    let model = load_checkpoint(cfg, out)?;
    let split = split_from_config(cfg);
    let bags = data.load(split)?;
    let classes = data.manifest.num_classes();
    let bundle = evaluate(&model, &bags, classes, cfg.kgrid.dense_max, cfg.eval.tau)?;

    write_file(&out.join("summary.csv"), &summary_report(&bundle))?;
    write_file(&out.join("predictions.csv"), &predictions_csv(&bundle, classes))?;
    if let Some(ev) = &bundle.evidence {
        write_file(&out.join("per_slide.csv"), &per_slide_csv(&ev.rows))?;
        for bag in &bags {
            let sel = model.selection(bag)?;
            let rows = export_rows(bag, &sel);
            write_file(
                &out.join("evidence").join(format!("{}.evidence.tsv", bag.slide_id())),
                &evidence_tsv(&rows),
            )?;
        }
    }
    let c = &bundle.classification;
    println!(
        "eval on {} ({} bags): auc {:.4} accuracy {:.4}; reports under {}",
        split.as_str(),
        c.n,
        c.auc,
        c.accuracy,
        out.display()
    );
    Ok(())
}

fn cmd_kcurve(cfg: &AppConfig, out: &Path, _seed: u64) -> Result<(), CliError> {
    let data = Dataset::open(cfg, out)?;
    let model = load_checkpoint(cfg, out)?;
    let split = split_from_config(cfg);
    let bags = data.load(split)?;
    if bags.is_empty() {
        return Err(CliError::Msg(format!("split {} holds no bags", split.as_str())));
    }
    let mut curves = Vec::with_capacity(bags.len());
    for bag in &bags {
        let grid = k_grid(bag.n_tiles(), cfg.kgrid.dense_max);
        let curve = model.kcurve(bag, &grid)?;
        write_file(
            &out.join("kcurve").join(format!("{}.csv", bag.slide_id())),
            &kcurve_csv(&curve),
        )?;
        curves.push(curve);
    }
    let chart = kcurve_mean_svg(&curves, cfg.eval.tau)?;
    let chart_path = out.join("kcurve_mean.svg");
    write_file(&chart_path, &chart)?;
    println!(
        "{} K-curves on {} written under {}; mean chart {}",
        curves.len(),
        split.as_str(),
        out.join("kcurve").display(),
        chart_path.display()
    );
    Ok(())
}

/// The four single-term ablations next to the full objective.
fn ablation_variants(base: LossWeights) -> Vec<(&'static str, LossWeights)> {
    vec![
        ("full", base),
        ("no_suff", LossWeights { lambda_suff: 0.0, ..base }),
        ("no_excl", LossWeights { lambda_excl: 0.0, ..base }),
        ("no_contig", LossWeights { lambda_contig: 0.0, ..base }),
        ("no_budget", LossWeights { lambda_budget: 0.0, ..base }),
    ]
}

fn cmd_ablate(cfg: &AppConfig, out: &Path, seed: u64) -> Result<(), CliError> {
    use std::fmt::Write as _;
    let data = Dataset::open(cfg, out)?;
    check_backbone_matches(cfg, &data.manifest)?;
    let train = data.load(Split::Train)?;
    let val = data.load(Split::Val)?;
    let eval_bags = data.load(split_from_config(cfg))?;
    let classes = data.manifest.num_classes();

    // All variants warm-start from one shared baseline; reuse a previous
    // run's checkpoint when present (identical bytes either way).
    let baseline_path = out.join("baseline.ckpt");
    let baseline = if baseline_path.exists() {
        ReamilModel::load(&baseline_path)?
    } else {
        let outcome = train_baseline(
            &train,
            &val,
            &cfg.backbone,
            &cfg.baseline_train(),
            classes,
            seed,
        )?;
        outcome.model.save(&baseline_path)?;
        outcome.model
    };

    let mut csv = String::from("variant,suff_gap,p_y_drop,contig,mean_z\n");
    for (name, weights) in ablation_variants(cfg.loss) {
        let mut ev_cfg = cfg.evidence_train();
        ev_cfg.loss = weights;
        let outcome = train_reamil(&train, &val, &baseline, &ev_cfg, classes, seed)?;
        let bundle = evaluate(
            &outcome.model,
            &eval_bags,
            classes,
            cfg.kgrid.dense_max,
            cfg.eval.tau,
        )?;
        let ev = bundle
            .evidence
            .ok_or_else(|| CliError::Msg("ablation model has no evidence report".into()))?;
        // Normalized selection size: per-slide mean gate, averaged over slides.
        let mean_z =
            ev.rows.iter().map(|r| r.mean_z).sum::<f64>() / ev.rows.len() as f64;
        let s = &ev.summary;
        let _ = writeln!(
            csv,
            "{name},{:.6},{:.6},{:.6},{:.6}",
            s.mean_suff_gap, s.mean_p_drop, s.mean_contig, mean_z
        );
        println!(
            "ablation {name}: suff_gap {:.4} p_y_drop {:.4} contig {:.4} mean_z {:.4}",
            s.mean_suff_gap, s.mean_p_drop, s.mean_contig, mean_z
        );
    }
    let path = out.join("ablation.csv");
    write_file(&path, &csv)?;
    println!("ablation table {}", path.display());
    Ok(())
}

fn cmd_overlay(cfg: &AppConfig, out: &Path, slide_id: &str) -> Result<(), CliError> {
    let data = Dataset::open(cfg, out)?;
    let model = load_checkpoint(cfg, out)?;
    let rec = data
        .manifest
        .find(slide_id)
        .ok_or_else(|| CliError::Msg(format!("slide {slide_id:?} is not in the manifest")))?
        .clone();
    let bag = data.manifest.load_record(&data.dir, &rec)?;
    let sel = model.selection(&bag)?;
    let rows = export_rows(&bag, &sel);
    let svg = overlay_svg(&rows, cfg.overlay.top_k)?;
    let svg_path = out.join("overlay").join(format!("{slide_id}.svg"));
    write_file(&svg_path, &svg)?;
    write_file(
        &out.join("overlay").join(format!("{slide_id}.evidence.tsv")),
        &evidence_tsv(&rows),
    )?;
    println!(
        "overlay for {slide_id} ({} tiles, top {} outlined): {}",
        rows.len(),
        cfg.overlay.top_k.min(rows.len()),
        svg_path.display()
    );
    Ok(())
}

/// Gate temperature for the audit: far from saturation so the sigmoid
/// keeps meaningful curvature everywhere.
const GRADCHECK_TEMPERATURE: f64 = 0.7;

fn cmd_gradcheck(cfg: &AppConfig, out: &Path, seed: u64) -> Result<(), CliError> {
    let g = &cfg.gradcheck;
    let backbone = BackboneConfig {
        d_in: g.d_in,
        d_model: g.d_model,
        heads: g.heads,
        layers: g.layers,
        num_classes: g.num_classes,
        use_positional: true,
    };
    let report = full_objective_gradcheck(
        &backbone,
        &cfg.loss,
        g.tiles,
        GRADCHECK_TEMPERATURE,
        seed,
        GradCheckSettings {
            tolerance: g.tolerance,
            ..GradCheckSettings::default()
        },
    )?;
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    let body = format!(
        "{report}\n{verdict} max_rel_err={:.3e} checked={} excluded={}\n",
        report.max_rel_err(),
        report.total_checked(),
        report.total_excluded()
    );
    write_file(&out.join("gradcheck_report.txt"), &body)?;
    println!(
        "gradient audit {verdict}: max rel err {:.3e} over {} partials",
        report.max_rel_err(),
        report.total_checked()
    );
    if !report.passed() {
        return Err(CliError::Msg(format!(
            "gradient check failed: max rel err {:.3e} exceeds tolerance {:.1e}",
            report.max_rel_err(),
            g.tolerance
        )));
    }
    Ok(())
}

/// Loads the config, creates the output directory, and dispatches.
pub fn execute(cli: Cli) -> Result<(), CliError> {
    let overrides = parse_overrides(&cli.set)?;
    let cfg = AppConfig::load(cli.config.as_deref(), &overrides)?;
    std::fs::create_dir_all(&cli.out).map_err(|source| CliError::Io {
        path: cli.out.display().to_string(),
        source,
    })?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, out, cli.seed),
        Command::TrainBaseline => cmd_train_baseline(&cfg, out, cli.seed),
        Command::TrainReamil => cmd_train_reamil(&cfg, out, cli.seed),
        Command::Eval => cmd_eval(&cfg, out, cli.seed),
        Command::Kcurve => cmd_kcurve(&cfg, out, cli.seed),
        Command::Ablate => cmd_ablate(&cfg, out, cli.seed),
        Command::Overlay { slide_id } => cmd_overlay(&cfg, out, slide_id),
        Command::Gradcheck => cmd_gradcheck(&cfg, out, cli.seed),
    }
}
