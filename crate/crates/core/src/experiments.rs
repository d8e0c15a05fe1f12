//! Dataset-recognition and target-recognition runs over all folds of the
//! cv-target corpus, and the result bundle they produce.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, Sample, Split};
use crate::embedding::{fit_tsne, write_embedding, EmbeddedPoint, TsneConfig};
use crate::error::{Error, Result};
use crate::folds::{build_folds_grouped, sample_training_subset, FoldAssignment, FoldSpec, SubsetPlan};
use crate::imaging::{feature_vector, run_pipeline, Image, PipelineConfig};
use crate::learner::{HyperParams, Model};
use crate::metrics::{
    auc_matrix, confusion_matrix, merge_predictions, pairwise_auc, read_pool, write_pool, AucMatrix,
    ConfusionMatrix, PredictionPool, PredictionRecord, ScoreMode,
};
use crate::seed;

/// Source of decoded images for manifest samples.
pub trait ImageStore: Sync {
    fn load(&self, sample: &Sample) -> Result<Image>;
}

/// Reads image files, resolving relative paths against `root`.
#[derive(Debug, Clone)]
pub struct FileStore {
    pub root: PathBuf,
}

impl FileStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Store rooted at the directory containing the manifest file.
    pub fn for_manifest(manifest_path: &Path) -> Self {
        Self::new(manifest_path.parent().unwrap_or(Path::new(".")))
    }
}

impl ImageStore for FileStore {
    fn load(&self, sample: &Sample) -> Result<Image> {
        Image::load(&self.root.join(&sample.image_path))
    }
}

/// Images held in memory, keyed by sample id.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    images: HashMap<String, Image>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, sample_id: &str, img: Image) {
        self.images.insert(sample_id.to_string(), img);
    }

    pub fn from_synth(c: &crate::synth::SynthCorpus) -> Self {
        let images = c
            .manifest
            .samples
            .iter()
            .zip(&c.images)
            .map(|(s, img)| (s.sample_id.clone(), img.clone()))
            .collect();
        Self { images }
    }
}

impl ImageStore for MemoryStore {
    fn load(&self, sample: &Sample) -> Result<Image> {
        self.images
            .get(&sample.sample_id)
            .cloned()
            .ok_or_else(|| Error::Input(format!("no image stored for `{}`", sample.sample_id)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentMode {
    DatasetRecognition,
    TargetRecognition,
}

impl ExperimentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::DatasetRecognition => "dataset-recognition",
            Self::TargetRecognition => "target-recognition",
        }
    }
}

/// Everything needed to reproduce a run apart from the manifest itself,
/// which is identified by path and content digest in the result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode: ExperimentMode,
    pub leave_out: Option<String>,
    pub pipeline: PipelineConfig,
    pub fold_spec: FoldSpec,
    pub subset_plan: SubsetPlan,
    /// Draw a fresh large-corpus subset for every fold.
    pub redraw_per_fold: bool,
    pub hyper: HyperParams,
    pub hidden_dim: usize,
    /// Side of the area-averaged grid fed to the learner.
    pub feature_side: usize,
    pub score_mode: ScoreMode,
    pub embed_diagnostic: bool,
    pub embed_max_points: usize,
    pub tsne: TsneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: ExperimentMode::DatasetRecognition,
            leave_out: None,
            pipeline: PipelineConfig::default(),
            fold_spec: FoldSpec::pat_out(0),
            subset_plan: SubsetPlan::default(),
            redraw_per_fold: true,
            hyper: HyperParams::desk_preset(),
            hidden_dim: 128,
            feature_side: 64,
            score_mode: ScoreMode::Renormalized,
            embed_diagnostic: false,
            embed_max_points: 500,
            tsne: TsneConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn target(leave_out: &str) -> Self {
        Self {
            mode: ExperimentMode::TargetRecognition,
            leave_out: Some(leave_out.to_string()),
            ..Self::default()
        }
    }

    /// Set every seed in the configuration from one master seed.
    pub fn with_seed(mut self, master: u64) -> Self {
        self.fold_spec.seed = seed::derive(master, "folds", 0);
        self.subset_plan.seed = seed::derive(master, "subset", 0);
        self.hyper.seed = seed::derive(master, "learner", 0);
        self.tsne.seed = seed::derive(master, "tsne", 0);
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn validate(&self, manifest: &Manifest) -> Result<()> {
        self.pipeline.validate()?;
        if self.hidden_dim == 0 || self.feature_side == 0 {
            return Err(Error::Config("hidden_dim and feature_side must be positive".into()));
        }
        if self.hyper.epochs == 0 || self.hyper.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        let cv = manifest
            .cv_target()
            .ok_or_else(|| Error::Config("manifest has no cv-target corpus".into()))?;
        match (self.mode, &self.leave_out) {
            (ExperimentMode::DatasetRecognition, Some(_)) => {
                Err(Error::Config("leave_out is only valid for target recognition".into()))
            }
            (ExperimentMode::DatasetRecognition, None) => {
                if manifest.corpora.len() < 2 {
                    return Err(Error::Config("dataset recognition needs at least 2 corpora".into()));
                }
                Ok(())
            }
            (ExperimentMode::TargetRecognition, None) => {
                Err(Error::Config("target recognition requires leave_out".into()))
            }
            (ExperimentMode::TargetRecognition, Some(name)) => {
                if name == &cv.name {
                    return Err(Error::Config(format!(
                        "leave_out `{name}` is the cv-target corpus"
                    )));
                }
                if !manifest.large_sources().any(|c| &c.name == name) {
                    return Err(Error::Config(format!("leave_out `{name}` is not a large corpus")));
                }
                Ok(())
            }
        }
    }
}

/// One labeled sample in a fold plan.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a> {
    pub sample: &'a Sample,
    pub label: usize,
}

/// Training and test membership of one fold run.
#[derive(Debug, Clone)]
pub struct FoldPlan<'a> {
    pub fold: usize,
    pub train: Vec<Labeled<'a>>,
    pub test: Vec<Labeled<'a>>,
    pub warnings: Vec<String>,
}

/// Labels, folds and per-fold memberships for a configuration.
#[derive(Debug, Clone)]
pub struct RunPlan<'a> {
    pub class_names: Vec<String>,
    pub folds: FoldAssignment,
    pub fold_plans: Vec<FoldPlan<'a>>,
}

pub fn plan_run<'a>(manifest: &'a Manifest, cfg: &ExperimentConfig) -> Result<RunPlan<'a>> {
    cfg.validate(manifest)?;
    let cv: &'a str = &manifest.cv_target().expect("validated").name;
    let cv_samples: Vec<Sample> = manifest.samples_of(cv).cloned().collect();
    let cv_refs: Vec<&Sample> = manifest.samples_of(cv).collect();
    let folds = build_folds_grouped(&cv_samples, &cfg.fold_spec)?;

    let (class_names, cv_label): (Vec<String>, usize) = match cfg.mode {
        ExperimentMode::DatasetRecognition => {
            let names: Vec<String> = manifest.corpora.iter().map(|c| c.name.clone()).collect();
            let idx = names.iter().position(|n| n == cv).expect("cv corpus listed");
            (names, idx)
        }
        ExperimentMode::TargetRecognition => (vec![format!("non-{cv}"), cv.to_string()], 1),
    };
    let label_of = |s: &Sample| -> usize {
        match cfg.mode {
            ExperimentMode::DatasetRecognition => class_names
                .iter()
                .position(|n| n == &s.dataset_label)
                .expect("corpus listed"),
            ExperimentMode::TargetRecognition => usize::from(s.dataset_label == cv),
        }
    };

    let leave_out = cfg.leave_out.as_deref();
    let mut large_train: BTreeMap<String, Vec<&Sample>> = BTreeMap::new();
    let mut large_test: Vec<&Sample> = Vec::new();
    let mut warnings = Vec::new();
    for corpus in manifest.large_sources() {
        let held_out = leave_out == Some(corpus.name.as_str());
        let mut unsplit = 0;
        for s in manifest.samples_of(&corpus.name) {
            match (s.split, held_out) {
                (Split::Train, false) => large_train.entry(corpus.name.clone()).or_default().push(s),
                (Split::Test, true) => large_test.push(s),
                (Split::Test, false) if leave_out.is_none() => large_test.push(s),
                (Split::Unsplit, _) => unsplit += 1,
                _ => {}
            }
        }
        if unsplit > 0 {
            warnings.push(format!(
                "corpus `{}`: {unsplit} samples without a train/test split are ignored",
                corpus.name
            ));
        }
    }

    let mut fold_plans = Vec::with_capacity(folds.n_folds);
    for f in 0..folds.n_folds {
        let mut plan = cfg.subset_plan.clone();
        if cfg.redraw_per_fold {
            plan.seed = seed::derive(cfg.subset_plan.seed, "fold", f as u64);
        }
        let in_fold = |i: usize| folds.entries[i].fold == f;
        let cov_train: Vec<&Sample> = (0..cv_refs.len()).filter(|&i| !in_fold(i)).map(|i| cv_refs[i]).collect();
        let cov_test: Vec<&Sample> = (0..cv_refs.len()).filter(|&i| in_fold(i)).map(|i| cv_refs[i]).collect();
        let draw = sample_training_subset(cov_train.len(), &large_train, &plan);

        let mut train: Vec<Labeled> = draw
            .samples
            .iter()
            .map(|&s| Labeled { sample: s, label: label_of(s) })
            .collect();
        train.extend(cov_train.iter().map(|&s| Labeled { sample: s, label: cv_label }));
        let mut test: Vec<Labeled> = large_test
            .iter()
            .map(|&s| Labeled { sample: s, label: label_of(s) })
            .collect();
        test.extend(cov_test.iter().map(|&s| Labeled { sample: s, label: cv_label }));

        let mut w = warnings.clone();
        w.extend(draw.warnings.iter().map(|m| format!("fold {f}: {m}")));
        fold_plans.push(FoldPlan {
            fold: f,
            train,
            test,
            warnings: w,
        });
    }
    Ok(RunPlan {
        class_names,
        folds,
        fold_plans,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Training samples per class name.
    pub train_counts: BTreeMap<String, usize>,
    pub final_loss: f64,
    pub test_accuracy: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub manifest_digest: String,
    pub pool: PredictionPool,
    pub auc: AucMatrix,
    /// Target-vs-rest AUC for target recognition.
    pub target_auc: Option<f64>,
    pub confusion: ConfusionMatrix,
    pub folds: Vec<FoldSummary>,
    pub fold_notes: Vec<String>,
    pub embedding: Option<Vec<EmbeddedPoint>>,
    /// One trained model per fold, in fold order.
    pub models: Vec<Model>,
}

/// FNV-1a digest over the manifest's sample rows and corpus roles.
pub fn manifest_digest(m: &Manifest) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |s: &str| {
        for b in s.bytes().chain(std::iter::once(0x1f)) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for c in &m.corpora {
        feed(&c.name);
        feed(&format!("{:?}", c.role));
    }
    for s in &m.samples {
        feed(&s.sample_id);
        feed(&s.image_path.to_string_lossy());
        feed(&s.dataset_label);
        feed(&s.class_label);
        feed(s.patient_id.as_deref().unwrap_or(""));
        feed(s.location.as_deref().unwrap_or(""));
        feed(s.uploader.as_deref().unwrap_or(""));
        feed(s.split.as_str());
    }
    format!("{h:016x}")
}

fn features(img: &Image, cfg: &ExperimentConfig, rng: &mut seed::Rng, training: bool) -> Result<Vec<f64>> {
    let processed = run_pipeline(img, &cfg.pipeline, rng, training)?;
    Ok(feature_vector(&processed, cfg.feature_side))
}

fn eval_features(
    samples: &[&Sample],
    store: &dyn ImageStore,
    cfg: &ExperimentConfig,
) -> Result<HashMap<String, Vec<f64>>> {
    samples
        .par_iter()
        .map(|s| {
            let img = store.load(s)?;
            let mut rng = seed::rng(0);
            Ok((s.sample_id.clone(), features(&img, cfg, &mut rng, false)?))
        })
        .collect()
}

struct FoldOutcome {
    records: Vec<PredictionRecord>,
    summary: FoldSummary,
    model: Model,
    embedding: Option<Vec<EmbeddedPoint>>,
}

fn run_fold(
    plan: &FoldPlan,
    class_names: &[String],
    store: &dyn ImageStore,
    cache: &HashMap<String, Vec<f64>>,
    cfg: &ExperimentConfig,
) -> Result<FoldOutcome> {
    let f = plan.fold as u64;
    let reuse = cfg.pipeline.augment.is_identity();
    let aug_seed = seed::derive(cfg.hyper.seed, "augment", f);
    let xs: Vec<Vec<f64>> = plan
        .train
        .par_iter()
        .map(|l| {
            if reuse {
                if let Some(v) = cache.get(&l.sample.sample_id) {
                    return Ok(v.clone());
                }
            }
            let img = store.load(l.sample)?;
            let mut rng = seed::sample_rng(aug_seed, &l.sample.sample_id);
            features(&img, cfg, &mut rng, true)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = plan.train.iter().map(|l| l.label).collect();

    let mut hp = cfg.hyper.clone();
    hp.seed = seed::derive(cfg.hyper.seed, "fold", f);
    let input_dim = cfg.feature_side * cfg.feature_side;
    let mut model = Model::init(input_dim, cfg.hidden_dim, class_names.len(), hp.seed)?;
    let report = model.train(&xs, &labels, &hp)?;

    let mut records = Vec::with_capacity(plan.test.len());
    let mut correct = 0usize;
    for l in &plan.test {
        let x = &cache[&l.sample.sample_id];
        let probs = model.predict_proba(x)?;
        if crate::metrics::argmax(&probs) == l.label {
            correct += 1;
        }
        records.push(PredictionRecord {
            sample_id: l.sample.sample_id.clone(),
            fold: plan.fold,
            true_label: l.label,
            probs,
        });
    }

    let embedding = if cfg.embed_diagnostic && plan.fold == 0 {
        Some(embed_test_set(plan, &model, cache, cfg)?)
    } else {
        None
    };

    let mut train_counts = BTreeMap::new();
    for l in &plan.train {
        *train_counts.entry(class_names[l.label].clone()).or_insert(0) += 1;
    }
    let summary = FoldSummary {
        fold: plan.fold,
        n_train: plan.train.len(),
        n_test: plan.test.len(),
        train_counts,
        final_loss: report.loss_trace.last().copied().unwrap_or(f64::NAN),
        test_accuracy: if plan.test.is_empty() {
            f64::NAN
        } else {
            correct as f64 / plan.test.len() as f64
        },
        warnings: plan.warnings.clone(),
    };
    Ok(FoldOutcome {
        records,
        summary,
        model,
        embedding,
    })
}

/// t-SNE of hidden-layer activations for (an evenly strided subset of) the
/// fold's test samples.
fn embed_test_set(
    plan: &FoldPlan,
    model: &Model,
    cache: &HashMap<String, Vec<f64>>,
    cfg: &ExperimentConfig,
) -> Result<Vec<EmbeddedPoint>> {
    let n = plan.test.len();
    let cap = cfg.embed_max_points.max(5);
    let picked: Vec<&Labeled> = if n <= cap {
        plan.test.iter().collect()
    } else {
        (0..cap).map(|i| &plan.test[i * n / cap]).collect()
    };
    let feats: Vec<Vec<f64>> = picked
        .iter()
        .map(|l| model.hidden_features(&cache[&l.sample.sample_id]))
        .collect::<Result<_>>()?;
    let mut tcfg = cfg.tsne.clone();
    let max_perp = (feats.len() as f64 - 1.0) / 3.0;
    if tcfg.perplexity > max_perp {
        log::warn!("t-SNE perplexity lowered to {max_perp} for {} points", feats.len());
        tcfg.perplexity = max_perp;
    }
    let fit = fit_tsne(&feats, &tcfg)?;
    Ok(picked
        .iter()
        .zip(fit.coords)
        .map(|(l, c)| EmbeddedPoint {
            sample_id: l.sample.sample_id.clone(),
            x: c[0],
            y: c[1],
            dataset_label: l.sample.dataset_label.clone(),
        })
        .collect())
}

fn run(manifest: &Manifest, store: &dyn ImageStore, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let plan = plan_run(manifest, cfg)?;
    let mut eval: Vec<&Sample> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for fp in &plan.fold_plans {
        for l in fp.test.iter().chain(if cfg.pipeline.augment.is_identity() { fp.train.iter() } else { [].iter() }) {
            if seen.insert(l.sample.sample_id.as_str()) {
                eval.push(l.sample);
            }
        }
    }
    let cache = eval_features(&eval, store, cfg)?;

    let outcomes: Vec<FoldOutcome> = plan
        .fold_plans
        .par_iter()
        .map(|fp| {
            run_fold(fp, &plan.class_names, store, &cache, cfg).map_err(|e| Error::Fold {
                fold: fp.fold,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let mut runs = Vec::new();
    let mut folds = Vec::new();
    let mut models = Vec::new();
    let mut embedding = None;
    for o in outcomes {
        runs.push(o.records);
        folds.push(o.summary);
        models.push(o.model);
        if o.embedding.is_some() {
            embedding = o.embedding;
        }
    }
    let pool = merge_predictions(&plan.class_names, runs)?;
    let auc = auc_matrix(&pool, cfg.score_mode);
    let target_auc = match cfg.mode {
        ExperimentMode::TargetRecognition => Some(pairwise_auc(&pool, 1, 0, cfg.score_mode)?),
        ExperimentMode::DatasetRecognition => None,
    };
    let confusion = confusion_matrix(&pool);
    let mut fold_notes = plan.folds.notes.clone();
    fold_notes.extend(plan.folds.warnings.iter().cloned());
    Ok(ExperimentResult {
        config: cfg.clone(),
        manifest_digest: manifest_digest(manifest),
        pool,
        auc,
        target_auc,
        confusion,
        folds,
        fold_notes,
        embedding,
        models,
    })
}

/// Train one model per fold to name each sample's source corpus.
pub fn run_dataset_recognition(
    manifest: &Manifest,
    store: &dyn ImageStore,
    cfg: &ExperimentConfig,
) -> Result<ExperimentResult> {
    if cfg.mode != ExperimentMode::DatasetRecognition {
        return Err(Error::Config("configuration mode is not dataset-recognition".into()));
    }
    run(manifest, store, cfg)
}

/// Train one target-vs-rest model per fold with one large corpus held out
/// and evaluate on that corpus's test split plus the held-out fold.
pub fn run_target_recognition(
    manifest: &Manifest,
    store: &dyn ImageStore,
    cfg: &ExperimentConfig,
) -> Result<ExperimentResult> {
    if cfg.mode != ExperimentMode::TargetRecognition {
        return Err(Error::Config("configuration mode is not target-recognition".into()));
    }
    run(manifest, store, cfg)
}

pub fn run_experiment(manifest: &Manifest, store: &dyn ImageStore, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    run(manifest, store, cfg)
}

/// Per-fold record lists from a prediction-exchange file.
pub fn import_external_predictions(path: &Path) -> Result<(Vec<String>, Vec<Vec<PredictionRecord>>)> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_pool(std::io::BufReader::new(f))
}

pub fn export_predictions(pool: &PredictionPool, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_pool(pool, std::io::BufWriter::new(f))
}

/// Echoed configuration stored as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub manifest_path: Option<PathBuf>,
    pub manifest_digest: String,
    pub config: ExperimentConfig,
}

/// Summary stored as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub mode: ExperimentMode,
    pub leave_out: Option<String>,
    pub protocol: String,
    pub class_names: Vec<String>,
    pub n_records: usize,
    pub per_fold_records: BTreeMap<usize, usize>,
    pub target_auc: Option<f64>,
    pub folds: Vec<FoldSummary>,
    pub fold_notes: Vec<String>,
    pub has_embedding: bool,
}

pub const BUNDLE_MEMBERS: [&str; 5] = ["config.json", "pool.csv", "auc.csv", "confusion.csv", "report.json"];

/// Write the result bundle into `dir`. An existing bundle is only replaced
/// when `force` is set.
pub fn write_bundle(result: &ExperimentResult, manifest_path: Option<&Path>, dir: &Path, force: bool) -> Result<()> {
    if dir.join("pool.csv").exists() && !force {
        return Err(Error::Input(format!(
            "{} already holds a result bundle; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let echo = ConfigEcho {
        manifest_path: manifest_path.map(Path::to_path_buf),
        manifest_digest: result.manifest_digest.clone(),
        config: result.config.clone(),
    };
    write_text(&dir.join("config.json"), &serde_json::to_string_pretty(&echo)?)?;

    let mut buf = Vec::new();
    write_pool(&result.pool, &mut buf)?;
    write_bytes(&dir.join("pool.csv"), &buf)?;
    buf.clear();
    result.auc.write_csv(&mut buf)?;
    write_bytes(&dir.join("auc.csv"), &buf)?;
    buf.clear();
    result.confusion.write_csv(&mut buf)?;
    write_bytes(&dir.join("confusion.csv"), &buf)?;
    let emb_path = dir.join("embedding.csv");
    match &result.embedding {
        Some(points) => {
            buf.clear();
            write_embedding(points, &mut buf)?;
            write_bytes(&emb_path, &buf)?;
        }
        None if emb_path.exists() => fs::remove_file(&emb_path).map_err(|e| Error::io(&emb_path, e))?,
        None => {}
    }

    let summary = ReportSummary {
        mode: result.config.mode,
        leave_out: result.config.leave_out.clone(),
        protocol: result.config.fold_spec.protocol.as_str().to_string(),
        class_names: result.pool.class_names.clone(),
        n_records: result.pool.len(),
        per_fold_records: result.pool.per_fold_counts(),
        target_auc: result.target_auc,
        folds: result.folds.clone(),
        fold_notes: result.fold_notes.clone(),
        has_embedding: result.embedding.is_some(),
    };
    write_text(&dir.join("report.json"), &serde_json::to_string_pretty(&summary)?)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, format!("{text}\n").as_bytes())
}

pub fn read_config_echo(path: &Path) -> Result<ConfigEcho> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::CorpusRole;
    use crate::synth::{render_corpus, SynthCorpusSpec, SynthSource};
    use std::collections::HashSet;

    fn corpus(samples_per_class: usize) -> SynthCorpusSpec {
        let mut sources: Vec<SynthSource> = ["A", "B", "C"]
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let mut s = SynthSource::new(n, samples_per_class);
                s.confound.gamma_shift = 0.3 * i as f64;
                s
            })
            .collect();
        let mut cov = SynthSource::new("COV", samples_per_class);
        cov.role = Some(CorpusRole::CvTarget);
        cov.images_per_patient = 2;
        cov.uploaders = 5;
        cov.confound.border_width = 6;
        cov.confound.border_value = 200;
        sources.push(cov);
        SynthCorpusSpec {
            sources,
            classes: vec!["x".into(), "y".into()],
            class_signal_radius: 16,
            class_signal_amplitude: 0.2,
            image_size: 64,
            seed: 11,
        }
    }

    fn quick(mut cfg: ExperimentConfig) -> ExperimentConfig {
        cfg.feature_side = 12;
        cfg.hidden_dim = 8;
        cfg.hyper.epochs = 3;
        cfg.pipeline.resize_min_side = 96;
        cfg.pipeline.mask_size = 80;
        cfg.pipeline.final_side = 60;
        cfg.fold_spec.n_folds_target = 4;
        cfg.fold_spec.min_fold_size = 4;
        cfg
    }

    #[test]
    fn config_invariants() {
        let c = render_corpus(&corpus(10)).unwrap();
        let m = &c.manifest;
        assert!(ExperimentConfig::default().validate(m).is_ok());
        let mut bad = ExperimentConfig::target("COV");
        assert!(matches!(bad.validate(m), Err(Error::Config(_))));
        bad.leave_out = None;
        assert!(bad.validate(m).is_err());
        bad.leave_out = Some("nope".into());
        assert!(bad.validate(m).is_err());
        assert!(ExperimentConfig::target("B").validate(m).is_ok());
        let mut dr = ExperimentConfig::default();
        dr.leave_out = Some("A".into());
        assert!(dr.validate(m).is_err());
    }

    #[test]
    fn folds_keep_train_and_test_apart() {
        let c = render_corpus(&corpus(20)).unwrap();
        for cfg in [quick(ExperimentConfig::default()), quick(ExperimentConfig::target("A"))] {
            for protocol in [crate::folds::FoldProtocol::PatOut, crate::folds::FoldProtocol::DocOut] {
                let mut cfg = cfg.clone();
                cfg.fold_spec.protocol = protocol;
                let plan = plan_run(&c.manifest, &cfg).unwrap();
                for fp in &plan.fold_plans {
                    let train: HashSet<&str> = fp.train.iter().map(|l| l.sample.sample_id.as_str()).collect();
                    assert!(fp.test.iter().all(|l| !train.contains(l.sample.sample_id.as_str())));
                    let gp = protocol.group_protocol();
                    let key = |s: &Sample| crate::dataset::derive_group_key(s, gp).unwrap().key;
                    let train_keys: HashSet<String> = fp
                        .train
                        .iter()
                        .filter(|l| l.sample.dataset_label == "COV")
                        .map(|l| key(l.sample))
                        .collect();
                    for l in fp.test.iter().filter(|l| l.sample.dataset_label == "COV") {
                        assert!(!train_keys.contains(&key(l.sample)));
                    }
                }
            }
        }
    }

    #[test]
    fn target_plan_uses_left_out_test_split_only() {
        let c = render_corpus(&corpus(20)).unwrap();
        let plan = plan_run(&c.manifest, &quick(ExperimentConfig::target("B"))).unwrap();
        assert_eq!(plan.class_names, vec!["non-COV".to_string(), "COV".to_string()]);
        for fp in &plan.fold_plans {
            assert!(fp.train.iter().all(|l| l.sample.dataset_label != "B"));
            for l in &fp.test {
                match l.sample.dataset_label.as_str() {
                    "B" => assert!(l.sample.split == Split::Test && l.label == 0),
                    "COV" => assert_eq!(l.label, 1),
                    other => panic!("unexpected test corpus {other}"),
                }
            }
            for l in &fp.train {
                assert_eq!(l.label, usize::from(l.sample.dataset_label == "COV"));
            }
        }
    }

    #[test]
    fn small_run_is_reproducible_and_complete() {
        let c = render_corpus(&corpus(20)).unwrap();
        let store = MemoryStore::from_synth(&c);
        let mut cfg = quick(ExperimentConfig::default().with_seed(3));
        cfg.embed_diagnostic = true;
        cfg.tsne.iterations = 100;
        let a = run_dataset_recognition(&c.manifest, &store, &cfg).unwrap();
        let b = run_dataset_recognition(&c.manifest, &store, &cfg).unwrap();
        assert_eq!(a.pool, b.pool);
        assert_eq!(a.pool.per_fold_counts().len(), a.folds.len());
        assert_eq!(a.auc.populated().count(), 6);
        let emb = a.embedding.as_ref().unwrap();
        assert_eq!(emb.len(), a.folds[0].n_test);
        assert!(run_target_recognition(&c.manifest, &store, &cfg).is_err());

        let dir = tempfile::tempdir().unwrap();
        write_bundle(&a, None, dir.path(), false).unwrap();
        for m in BUNDLE_MEMBERS {
            assert!(dir.path().join(m).exists(), "{m}");
        }
        assert!(dir.path().join("embedding.csv").exists());
        assert!(write_bundle(&a, None, dir.path(), false).is_err());
        write_bundle(&a, None, dir.path(), true).unwrap();
        let echo = read_config_echo(&dir.path().join("config.json")).unwrap();
        assert_eq!(echo.config, cfg);
        let (names, runs) = import_external_predictions(&dir.path().join("pool.csv")).unwrap();
        assert_eq!(merge_predictions(&names, runs).unwrap(), a.pool);
    }

    #[test]
    fn fold_errors_name_the_fold() {
        let c = render_corpus(&corpus(10)).unwrap();
        let store = MemoryStore::new();
        let cfg = quick(ExperimentConfig::default());
        match run_dataset_recognition(&c.manifest, &store, &cfg) {
            Err(Error::Input(_)) | Err(Error::Fold { .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let mut cfg = cfg;
        cfg.hyper.base_lr = 1e300;
        let store = MemoryStore::from_synth(&c);
        match run_dataset_recognition(&c.manifest, &store, &cfg) {
            Err(Error::Fold { source, .. }) => assert!(matches!(*source, Error::Divergence { .. })),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
