//! Command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataset::{load_manifest, validate_manifest, Manifest};
use crate::embedding::{fit_tsne, write_embedding, EmbeddedPoint, TsneConfig};
use crate::error::{Error, Result};
use crate::experiments::{
    import_external_predictions, run_experiment, write_bundle, ExperimentConfig, ExperimentMode, FileStore,
    ImageStore,
};
use crate::folds::{build_folds_grouped, FoldProtocol, FoldSpec};
use crate::imaging::{feature_vector, run_pipeline, PipelineConfig};
use crate::learner::Model;
use crate::metrics::{auc_matrix, confusion_matrix, merge_predictions, ScoreMode};
use crate::report::{format_auc_table, render_report};
use crate::seed;
use crate::synth::{generate_corpus, SynthCorpusSpec};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "LEAKAUDIT_OUT";

#[derive(Debug, Parser)]
#[command(name = "leakaudit", version, about = "Audit multi-source image benchmarks for source-dataset leakage")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preprocess {
    None,
    ClaheCrop,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a manifest and print per-corpus counts.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Write pipeline input/output image pairs for a few samples per corpus.
    Preview {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Samples per corpus.
        #[arg(long, default_value_t = 2)]
        count: usize,
        #[arg(long)]
        mask_size: Option<usize>,
        #[arg(long, value_enum)]
        preprocess: Option<Preprocess>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Apply training-time augmentation to the outputs.
        #[arg(long)]
        augment: bool,
    },
    /// Build cross-validation folds for the cv-target corpus.
    Folds {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "pat-out")]
        protocol: ProtocolArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train models to recognize each sample's source corpus.
    AuditDatasets(AuditArgs),
    /// Train target-vs-rest models with one large corpus left out.
    AuditTarget {
        #[command(flatten)]
        audit: AuditArgs,
        #[arg(long, required = true)]
        leave_out: String,
    },
    /// Recompute AUC and confusion tables from a prediction file.
    Metrics {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, value_enum, default_value = "renormalized")]
        score_mode: ScoreArg,
        /// Directory receiving auc.csv and confusion.csv; stdout table when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// t-SNE of a feature table or of a checkpoint's hidden features.
    Embed {
        /// CSV with columns sample_id,dataset,<feature>...
        #[arg(long, conflicts_with_all = ["checkpoint", "manifest"])]
        features: Option<PathBuf>,
        #[arg(long, requires = "manifest")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Experiment configuration whose pipeline feeds the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus from a JSON spec.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Render report.md and figures for a result bundle.
    Report {
        /// Bundle directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProtocolArg {
    PatOut,
    DocOut,
}

impl From<ProtocolArg> for FoldProtocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::PatOut => FoldProtocol::PatOut,
            ProtocolArg::DocOut => FoldProtocol::DocOut,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScoreArg {
    Renormalized,
    Raw,
}

#[derive(Debug, Args)]
struct AuditArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Experiment configuration (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mask_size: Option<usize>,
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    #[arg(long, value_enum)]
    preprocess: Option<Preprocess>,
    /// Add the t-SNE diagnostic to the bundle.
    #[arg(long)]
    embed: bool,
    /// Also save one model checkpoint per fold under models/.
    #[arg(long)]
    save_models: bool,
    #[arg(long)]
    force: bool,
}

/// Parse `argv` (including the program name), run the subcommand and return
/// the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_data_error() {
                2
            } else {
                3
            }
        }
    }
}

fn default_out(sub: &str) -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("leakaudit-out"))
        .join(sub)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn apply_pipeline_flags(pipeline: &mut PipelineConfig, preprocess: Option<Preprocess>, mask: Option<usize>) {
    match preprocess {
        Some(Preprocess::ClaheCrop) => {
            let augment = pipeline.augment.clone();
            *pipeline = PipelineConfig {
                augment,
                ..PipelineConfig::clahe_crop()
            };
        }
        Some(Preprocess::None) => {
            pipeline.clahe_enabled = false;
            pipeline.crop_enabled = false;
        }
        None => {}
    }
    if let Some(m) = mask {
        pipeline.mask_size = m;
    }
}

fn load_checked(path: &Path) -> Result<Manifest> {
    let m = load_manifest(path)?;
    let report = validate_manifest(&m);
    for w in &report.warnings {
        log::warn!("{w}");
    }
    if !report.is_valid() {
        return Err(Error::Input(format!(
            "manifest is invalid: {}",
            report.violations.join("; ")
        )));
    }
    Ok(m)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Validate { manifest } => validate(&manifest),
        Command::Preview {
            manifest,
            out,
            count,
            mask_size,
            preprocess,
            seed,
            augment,
        } => preview(&manifest, out.unwrap_or_else(|| default_out("preview")), count, mask_size, preprocess, seed, augment),
        Command::Folds {
            manifest,
            protocol,
            seed,
            out,
        } => folds(&manifest, protocol.into(), seed, out.as_deref()),
        Command::AuditDatasets(a) => audit(a, None),
        Command::AuditTarget { audit: a, leave_out } => audit(a, Some(leave_out)),
        Command::Metrics { pool, score_mode, out } => metrics(&pool, score_mode, out.as_deref()),
        Command::Embed {
            features,
            checkpoint,
            manifest,
            config,
            perplexity,
            iterations,
            seed,
            out,
        } => {
            let tsne = TsneConfig {
                perplexity,
                iterations,
                seed,
                ..TsneConfig::default()
            };
            embed(features, checkpoint, manifest, config, tsne, &out)
        }
        Command::Synth {
            config,
            out,
            seed,
            force,
        } => synth(&config, out.unwrap_or_else(|| default_out("synth")), seed, force),
        Command::Report { out } => {
            let r = render_report(&out)?;
            for f in &r.files {
                println!("wrote {}", f.display());
            }
            for n in &r.notes {
                println!("note: {n}");
            }
            Ok(())
        }
    }
}

fn validate(path: &Path) -> Result<()> {
    let m = load_manifest(path)?;
    let r = validate_manifest(&m);
    let mut out = std::io::stdout().lock();
    for c in &r.corpora {
        let role = c.role.map(|r| format!("{r:?}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(out, "{} ({role}): {} samples", c.name, c.n_samples);
        for (class, splits) in &c.counts {
            let parts: Vec<String> = splits.iter().map(|(s, n)| format!("{s}={n}")).collect();
            let _ = writeln!(out, "  {class}: {}", parts.join(" "));
        }
        if c.missing_patient_id + c.missing_location > 0 {
            let _ = writeln!(
                out,
                "  missing patient_id: {}, missing location/uploader: {}",
                c.missing_patient_id, c.missing_location
            );
        }
    }
    if r.cross_corpus_duplicate_patients > 0 {
        let _ = writeln!(out, "patients shared across corpora: {}", r.cross_corpus_duplicate_patients);
    }
    for w in &r.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    for v in &r.violations {
        let _ = writeln!(out, "violation: {v}");
    }
    if r.is_valid() {
        let _ = writeln!(out, "ok");
        Ok(())
    } else {
        Err(Error::Input(format!("{} violation(s)", r.violations.len())))
    }
}

fn preview(
    manifest_path: &Path,
    out: PathBuf,
    count: usize,
    mask: Option<usize>,
    preprocess: Option<Preprocess>,
    seed_: u64,
    augment: bool,
) -> Result<()> {
    let m = load_manifest(manifest_path)?;
    let store = FileStore::for_manifest(manifest_path);
    let mut pipeline = PipelineConfig::default();
    apply_pipeline_flags(&mut pipeline, preprocess, mask);
    pipeline.validate()?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    for c in &m.corpora {
        for s in m.samples_of(&c.name).take(count) {
            let img = store.load(s)?;
            let mut rng = seed::sample_rng(seed_, &s.sample_id);
            let processed = run_pipeline(&img, &pipeline, &mut rng, augment)?;
            let stem = s.sample_id.replace(['/', '\\'], "_");
            img.save_png(&out.join(format!("{stem}_before.png")))?;
            processed.save_png(&out.join(format!("{stem}_after.png")))?;
            println!("{}: {}x{} -> {}x{}", s.sample_id, img.width(), img.height(), processed.width(), processed.height());
        }
    }
    Ok(())
}

fn folds(manifest_path: &Path, protocol: FoldProtocol, seed_: u64, out: Option<&Path>) -> Result<()> {
    let m = load_checked(manifest_path)?;
    let cv = m
        .cv_target()
        .ok_or_else(|| Error::Input("manifest has no cv-target corpus".into()))?;
    let samples: Vec<_> = m.samples_of(&cv.name).cloned().collect();
    let fa = build_folds_grouped(&samples, &FoldSpec::for_protocol(protocol, seed_))?;
    for n in fa.notes.iter().chain(&fa.warnings) {
        eprintln!("note: {n}");
    }
    eprintln!("{} folds, sizes {:?}", fa.n_folds, fa.fold_sizes());
    match out {
        Some(p) => {
            let f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
            fa.write_csv(std::io::BufWriter::new(f))
        }
        None => fa.write_csv(std::io::stdout().lock()),
    }
}

fn audit(a: AuditArgs, leave_out: Option<String>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::from_json(&read_text(p)?)?,
        None => ExperimentConfig::default(),
    };
    match leave_out {
        Some(l) => {
            cfg.mode = ExperimentMode::TargetRecognition;
            cfg.leave_out = Some(l);
        }
        None => {
            cfg.mode = ExperimentMode::DatasetRecognition;
            cfg.leave_out = None;
        }
    }
    if let Some(s) = a.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(p) = a.protocol {
        let s = cfg.fold_spec.seed;
        cfg.fold_spec = FoldSpec::for_protocol(p.into(), s);
    }
    apply_pipeline_flags(&mut cfg.pipeline, a.preprocess, a.mask_size);
    if a.embed {
        cfg.embed_diagnostic = true;
    }
    let sub = match cfg.mode {
        ExperimentMode::DatasetRecognition => "audit-datasets",
        ExperimentMode::TargetRecognition => "audit-target",
    };
    let out = a.out.unwrap_or_else(|| default_out(sub));
    if out.join("pool.csv").exists() && !a.force {
        return Err(Error::Input(format!(
            "{} already holds a result bundle; pass --force to overwrite",
            out.display()
        )));
    }

    let m = load_checked(&a.manifest)?;
    let store = FileStore::for_manifest(&a.manifest);
    let result = run_experiment(&m, &store, &cfg)?;
    write_bundle(&result, Some(&a.manifest), &out, a.force)?;
    if a.save_models {
        let dir = out.join("models");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (f, model) in result.models.iter().enumerate() {
            model.save(&dir.join(format!("fold_{f:02}.json")))?;
        }
    }
    print!("{}", format_auc_table(&result.auc));
    if let Some(t) = result.target_auc {
        println!("target AUC: {t:.3}");
    }
    println!("bundle written to {}", out.display());
    Ok(())
}

fn metrics(pool_path: &Path, mode: ScoreArg, out: Option<&Path>) -> Result<()> {
    let (names, runs) = import_external_predictions(pool_path)?;
    let pool = merge_predictions(&names, runs)?;
    let mode = match mode {
        ScoreArg::Renormalized => ScoreMode::Renormalized,
        ScoreArg::Raw => ScoreMode::Raw,
    };
    let auc = auc_matrix(&pool, mode);
    let conf = confusion_matrix(&pool);
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("auc.csv");
            auc.write_csv(fs::File::create(&p).map_err(|e| Error::io(&p, e))?)?;
            let p = dir.join("confusion.csv");
            conf.write_csv(fs::File::create(&p).map_err(|e| Error::io(&p, e))?)?;
            println!("wrote {}", dir.display());
        }
        None => print!("{}", format_auc_table(&auc)),
    }
    Ok(())
}

fn read_feature_table(path: &Path) -> Result<(Vec<String>, Vec<String>, Vec<Vec<f64>>)> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rd = csv::Reader::from_reader(f);
    let (mut ids, mut labels, mut rows) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        if rec.len() < 3 {
            return Err(Error::Format {
                row: i + 2,
                msg: "expected sample_id,dataset and at least one feature".into(),
            });
        }
        ids.push(rec[0].to_string());
        labels.push(rec[1].to_string());
        let v = rec
            .iter()
            .skip(2)
            .map(|c| {
                c.parse::<f64>().map_err(|e| Error::Format {
                    row: i + 2,
                    msg: format!("bad feature `{c}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(v);
    }
    Ok((ids, labels, rows))
}

fn embed(
    features: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    manifest: Option<PathBuf>,
    config: Option<PathBuf>,
    tsne: TsneConfig,
    out: &Path,
) -> Result<()> {
    let (ids, labels, rows) = match (features, checkpoint, manifest) {
        (Some(f), _, _) => read_feature_table(&f)?,
        (None, Some(c), Some(mpath)) => {
            let model = Model::load(&c)?;
            let cfg = match config {
                Some(p) => {
                    let text = read_text(&p)?;
                    // accept either a bare config or a bundle's config.json echo
                    match serde_json::from_str::<crate::experiments::ConfigEcho>(&text) {
                        Ok(echo) => echo.config,
                        Err(_) => ExperimentConfig::from_json(&text)?,
                    }
                }
                None => ExperimentConfig::default(),
            };
            let m = load_manifest(&mpath)?;
            let store = FileStore::for_manifest(&mpath);
            let mut ids = Vec::new();
            let mut labels = Vec::new();
            let mut rows = Vec::new();
            for s in &m.samples {
                let img = store.load(s)?;
                let processed = run_pipeline(&img, &cfg.pipeline, &mut seed::rng(0), false)?;
                let x = feature_vector(&processed, cfg.feature_side);
                rows.push(model.hidden_features(&x)?);
                ids.push(s.sample_id.clone());
                labels.push(s.dataset_label.clone());
            }
            (ids, labels, rows)
        }
        _ => {
            return Err(Error::Input(
                "embed needs --features, or --checkpoint with --manifest".into(),
            ))
        }
    };
    let fit = fit_tsne(&rows, &tsne)?;
    for w in &fit.warnings {
        log::warn!("{w}");
    }
    let points: Vec<EmbeddedPoint> = ids
        .into_iter()
        .zip(labels)
        .zip(fit.coords)
        .map(|((sample_id, dataset_label), c)| EmbeddedPoint {
            sample_id,
            x: c[0],
            y: c[1],
            dataset_label,
        })
        .collect();
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = fs::File::create(out).map_err(|e| Error::io(out, e))?;
    write_embedding(&points, std::io::BufWriter::new(f))?;
    println!("embedded {} points into {}", points.len(), out.display());
    Ok(())
}

fn synth(spec_path: &Path, out: PathBuf, seed_: Option<u64>, force: bool) -> Result<()> {
    let mut spec = SynthCorpusSpec::from_json(&read_text(spec_path)?)?;
    if let Some(s) = seed_ {
        spec.seed = s;
    }
    if out.join("manifest.csv").exists() && !force {
        return Err(Error::Input(format!(
            "{} already holds a corpus; pass --force to overwrite",
            out.display()
        )));
    }
    let path = generate_corpus(&spec, &out)?;
    println!("wrote {}", path.display());
    Ok(())
}
