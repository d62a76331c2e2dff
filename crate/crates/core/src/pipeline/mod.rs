//! End-to-end experiment orchestration with content-addressed stage caching.
//!
//! Stages run in order: generate, pretrain-features, align-features
//! (optional), extract-features, pretrain, train, evaluate, export-embeddings,
//! probe, report. Each stage writes a stamp keyed by its inputs and is skipped
//! when the stamp matches and its outputs exist.

pub mod cache;
pub mod config;
mod embeddings;
mod report;

pub use config::{load_config, load_weights, split_validation, ExperimentConfig, Preset, CONFIG_VERSION};
pub use embeddings::{export_embeddings, probe_disentanglement, probe_with_labels, EmbeddingRecord, EmbeddingSet, ProbeReport};
pub use report::{build_tables, make_report, median, PretrainRow, ReportRow, TableReport};

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::featex::{
    align_extractor, concat_sets, domain_probe_accuracy, train_keypress_classifier, AlignReport, ClassifierOptions,
    ClassifierReport, DomainProbeOptions, FeatureExtractor,
};
use crate::framefile::{FrameFile, FrameShape};
use crate::keyboard::KeyboardLayout;
use crate::metrics::{evaluate, score_pairs, Evaluation, Lexicon, MetricsReport, TextRecord};
use crate::nets::DisentangleModel;
use crate::rng::{derive_seed, stream};
use crate::simulator::dataset::{resolve, MANIFEST_FILE};
use crate::simulator::{
    fallback_sentences, generate_dataset, generate_keypress_images, ingest_corpus, DatasetManifest, Domain,
    FrameStack, ManifestEntry, Renderer, Split,
};
use crate::tensor::Tensor;
use crate::train::{
    predict, run_training, start_from, AblationVariant, LogRecord, LossWeights, Objective, SequenceSample,
    TrainOptions, TrainState,
};

/// Which model a run produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    /// Shared encoder/decoder trained on synthetic data only.
    Pretrain,
    /// Cross-entropy finetuning of the pretrained model on target data.
    Finetune,
    Variant(AblationVariant),
}

/// One trained model: kind, target training subset size and seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunId {
    pub kind: RunKind,
    pub count: usize,
    pub seed: u64,
}

impl RunId {
    pub fn pretrain() -> Self {
        Self { kind: RunKind::Pretrain, count: 0, seed: 0 }
    }

    pub fn label(&self) -> String {
        match self.kind {
            RunKind::Pretrain => "pretrain".into(),
            RunKind::Finetune => "finetune".into(),
            RunKind::Variant(v) => v.roman().into(),
        }
    }

    pub fn name(&self) -> String {
        match self.kind {
            RunKind::Pretrain => "pretrain".into(),
            _ => format!("{}-n{}-s{}", self.label(), self.count, self.seed),
        }
    }
}

impl std::str::FromStr for RunId {
    type Err = Error;

    /// Parses `pretrain`, `finetune-n150-s0` or `VI-n75-s2`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "pretrain" {
            return Ok(Self::pretrain());
        }
        let bad = || Error::InvalidArgument(format!("run name {s:?} is not pretrain or <label>-n<count>-s<seed>"));
        let mut parts = s.rsplitn(3, '-');
        let seed = parts.next().and_then(|p| p.strip_prefix('s')).and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let count = parts.next().and_then(|p| p.strip_prefix('n')).and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let kind = match parts.next().ok_or_else(bad)? {
            "finetune" => RunKind::Finetune,
            label => RunKind::Variant(label.parse()?),
        };
        Ok(Self { kind, count, seed })
    }
}

impl fmt::Display for RunId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// File locations inside an experiment directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data(&self, d: Domain) -> PathBuf {
        self.root.join("data").join(d.as_str())
    }
    pub fn features(&self, d: Domain) -> PathBuf {
        self.root.join("features").join(d.as_str())
    }
    pub fn extractor_dir(&self) -> PathBuf {
        self.root.join("extractor")
    }
    pub fn extractor(&self) -> PathBuf {
        self.extractor_dir().join("extractor.ksfx")
    }
    pub fn aligned_extractor(&self) -> PathBuf {
        self.extractor_dir().join("aligned.ksfx")
    }
    pub fn keypress_report(&self) -> PathBuf {
        self.extractor_dir().join("keypress.json")
    }
    pub fn align_report(&self) -> PathBuf {
        self.extractor_dir().join("align.json")
    }
    pub fn run(&self, id: &RunId) -> PathBuf {
        self.root.join("models").join(id.name())
    }
    pub fn model(&self, id: &RunId) -> PathBuf {
        self.run(id).join("model.ksdm")
    }
    pub fn state(&self, id: &RunId) -> PathBuf {
        self.run(id).join("state.ksts")
    }
    pub fn train_log(&self, id: &RunId) -> PathBuf {
        self.run(id).join("log.jsonl")
    }
    pub fn eval(&self, id: &RunId) -> PathBuf {
        self.root.join("eval").join(id.name())
    }
    pub fn metrics(&self, id: &RunId) -> PathBuf {
        self.eval(id).join("metrics.json")
    }
    pub fn embeddings(&self, id: &RunId) -> PathBuf {
        self.root.join("embeddings").join(id.name())
    }
    pub fn probe(&self, id: &RunId) -> PathBuf {
        self.root.join("probes").join(format!("{}.json", id.name()))
    }
    pub fn report_md(&self) -> PathBuf {
        self.root.join("report.md")
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn pipeline_log(&self) -> PathBuf {
        self.root.join("pipeline.log")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypressReport {
    pub classifier: ClassifierReport,
    pub synthetic_test_accuracy: f64,
    pub pseudo_real_test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub report: AlignReport,
    /// Fresh domain-probe accuracy on source vs. target keypress features.
    pub probe_before: f64,
    pub probe_after: f64,
    pub pseudo_real_accuracy_before: f64,
    pub pseudo_real_accuracy_after: f64,
}

/// Scores for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub run: RunId,
    /// Pseudo-real test set, raw and dictionary-corrected.
    pub test: Evaluation,
    /// Target samples the run trained on (absent for pretraining).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<MetricsReport>,
    /// Held-out synthetic sentences (pretraining only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_test: Option<MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_iteration: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_ter: Option<f64>,
}

impl EvalSummary {
    /// Test TER minus train TER: how much worse the model does on unseen
    /// target sentences than on the ones it was trained on.
    pub fn overfit_gap(&self) -> Option<f64> {
        self.train.as_ref().map(|t| self.test.raw.ter - t.ter)
    }
}

/// What the last invocation did.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PipelineStats {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    pub training_steps: u64,
}

struct Keys {
    generate: String,
    features: String,
    align: Option<String>,
    extract: String,
    pretrain: String,
}

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub layout: Layout,
    pub stats: PipelineStats,
    keys: Keys,
}

const STAGE_GENERATE: &str = "generate";
const STAGE_FEATURES: &str = "pretrain-features";
const STAGE_ALIGN: &str = "align-features";
const STAGE_EXTRACT: &str = "extract-features";
const STAGE_TRAIN: &str = "train";
const STAGE_EVAL: &str = "evaluate";
const STAGE_EMBED: &str = "export-embeddings";
const STAGE_PROBE: &str = "probe";
const STAGE_PARTIAL: &str = "partial";

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let corpus = config.paths.corpus.as_deref().map(cache::file_digest).transpose()?;
        let generate = cache::digest(&json!({
            "stage": STAGE_GENERATE, "seed": config.seed, "data": config.data, "styles": config.styles, "corpus": corpus,
        }))?;
        let features = cache::digest(&json!({
            "stage": STAGE_FEATURES, "seed": config.seed, "data": [config.data.frame_height, config.data.frame_width],
            "styles": config.styles, "cnn": config.features.cnn, "train": config.features.keypress_train,
            "test": config.features.keypress_test, "classifier": config.features.classifier,
        }))?;
        let align = config
            .features
            .align
            .then(|| {
                cache::digest(&json!({
                    "stage": STAGE_ALIGN, "generate": generate, "features": features,
                    "options": config.features.alignment, "frames": config.features.align_frames,
                }))
            })
            .transpose()?;
        let extract = cache::digest(&json!({
            "stage": STAGE_EXTRACT, "generate": generate, "features": features, "align": align,
        }))?;
        let pretrain = cache::digest(&json!({
            "stage": "pretrain", "extract": extract, "model": config.model, "options": config.pretrain, "seed": config.seed,
            "trainer": crate::train::TRAINER_REVISION,
        }))?;
        let layout = Layout { root: config.paths.out_dir.clone() };
        Ok(Self { config, layout, stats: PipelineStats::default(), keys: Keys { generate, features, align, extract, pretrain } })
    }

    /// Every run the configuration asks for, pretraining first.
    pub fn runs(&self) -> Vec<RunId> {
        let e = &self.config.experiments;
        let mut out = vec![RunId::pretrain()];
        for &count in &e.target_train_counts {
            for &seed in &e.seeds {
                if e.finetune {
                    out.push(RunId { kind: RunKind::Finetune, count, seed });
                }
                for &v in &e.variants {
                    out.push(RunId { kind: RunKind::Variant(v), count, seed });
                }
            }
        }
        out
    }

    fn run_key(&self, id: &RunId) -> Result<String> {
        if id.kind == RunKind::Pretrain {
            return Ok(self.keys.pretrain.clone());
        }
        let opts = if id.kind == RunKind::Finetune { &self.config.finetune } else { &self.config.train };
        let weights = matches!(id.kind, RunKind::Variant(_)).then_some(self.config.weights);
        cache::digest(&json!({
            "stage": STAGE_TRAIN, "pretrain": self.keys.pretrain, "run": id, "options": opts, "weights": weights,
            "val_fraction": self.config.data.val_fraction,
        }))
    }

    fn log_line(&self, line: &str) {
        info!("{line}");
        if fs::create_dir_all(&self.layout.root).is_err() {
            return;
        }
        if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(self.layout.pipeline_log()) {
            let _ = writeln!(f, "{line}");
        }
    }

    /// Runs `body` as stage `name` unless its stamp in `dir` is fresh.
    fn stage(
        &mut self,
        name: &str,
        dir: &Path,
        key: &str,
        outputs: &[PathBuf],
        body: impl FnOnce(&mut Self) -> Result<()>,
    ) -> Result<()> {
        if cache::is_fresh(dir, name, key, outputs) {
            self.stats.skipped.push(name.to_string());
            return Ok(());
        }
        cache::invalidate(dir, name);
        self.log_line(&format!("stage {name}: start ({})", dir.display()));
        match body(self) {
            Ok(()) => {
                cache::seal(dir, name, key)?;
                self.log_line(&format!("stage {name}: done"));
                self.stats.executed.push(name.to_string());
                Ok(())
            }
            Err(e) => {
                self.log_line(&format!("stage {name}: failed: {e}"));
                Err(Error::Stage { stage: name.to_string(), log: self.layout.pipeline_log(), source: Box::new(e) })
            }
        }
    }

    pub fn run_all(&mut self) -> Result<()> {
        fs::create_dir_all(&self.layout.root).map_err(|e| Error::at(&self.layout.root, e))?;
        let resolved = self.layout.root.join("config.toml");
        fs::write(&resolved, self.config.to_toml()?).map_err(|e| Error::at(&resolved, e))?;
        self.generate()?;
        self.pretrain_features()?;
        if self.config.features.align {
            self.align_features()?;
        }
        self.extract_features()?;
        for id in self.runs() {
            self.train_run(&id)?;
        }
        for id in self.runs() {
            self.evaluate_run(&id)?;
        }
        for id in self.runs() {
            self.export_run(&id)?;
            self.probe_run(&id)?;
        }
        self.report()?;
        Ok(())
    }

    fn renderer(&self) -> Result<Renderer> {
        Renderer::new(KeyboardLayout::qwerty(), self.config.data.frame_height, self.config.data.frame_width)
    }

    pub fn generate(&mut self) -> Result<()> {
        let dir = self.layout.root.join("data");
        let outputs: Vec<PathBuf> =
            [Domain::Synthetic, Domain::PseudoReal].iter().map(|&d| self.layout.data(d).join(MANIFEST_FILE)).collect();
        let key = self.keys.generate.clone();
        self.stage(STAGE_GENERATE, &dir, &key, &outputs, |p| {
            let d = &p.config.data;
            let syn_n = d.synthetic_train + d.synthetic_val + d.synthetic_test;
            let total = syn_n + d.real_train + d.real_test;
            let mut rng = stream(p.config.seed, "corpus");
            let sentences = match &p.config.paths.corpus {
                Some(path) => {
                    let mut s = ingest_corpus(path, d.max_chars, d.charset_policy)?;
                    s.shuffle(&mut rng);
                    s
                }
                None => fallback_sentences(total, d.max_chars, &mut rng),
            };
            if sentences.len() < total {
                return Err(Error::InvalidArgument(format!(
                    "corpus provides {} distinct sentences of at most {} characters, {total} needed",
                    sentences.len(),
                    d.max_chars
                )));
            }
            let mut syn = Vec::with_capacity(syn_n);
            for (i, s) in sentences[..syn_n].iter().enumerate() {
                let split = if i < d.synthetic_train {
                    Split::Train
                } else if i < d.synthetic_train + d.synthetic_val {
                    Split::Val
                } else {
                    Split::Test
                };
                syn.push((s.clone(), split));
            }
            let real: Vec<(String, Split)> = sentences[syn_n..total]
                .iter()
                .enumerate()
                .map(|(i, s)| (s.clone(), if i < d.real_train { Split::Train } else { Split::Test }))
                .collect();
            let renderer = p.renderer()?;
            let seed = p.config.seed;
            generate_dataset(&syn, &p.config.styles.synthetic, &renderer, &p.layout.data(Domain::Synthetic), seed, true)?;
            generate_dataset(&real, &p.config.styles.pseudo_real, &renderer, &p.layout.data(Domain::PseudoReal), seed, true)?;
            Ok(())
        })
    }

    pub fn pretrain_features(&mut self) -> Result<()> {
        let dir = self.layout.extractor_dir();
        let outputs = vec![self.layout.extractor(), self.layout.keypress_report()];
        let key = self.keys.features.clone();
        self.stage(STAGE_FEATURES, &dir, &key, &outputs, |p| {
            let f = &p.config.features;
            let renderer = p.renderer()?;
            let seed = p.config.seed;
            let (syn, real) = (&p.config.styles.synthetic, &p.config.styles.pseudo_real);
            let train_seed = derive_seed(seed, "keypress-train");
            let test_seed = derive_seed(seed, "keypress-test");
            let syn_train = generate_keypress_images(f.keypress_train, syn, &renderer, train_seed, true)?;
            let real_train = generate_keypress_images(f.keypress_train, real, &renderer, train_seed, true)?;
            let syn_test = generate_keypress_images(f.keypress_test, syn, &renderer, test_seed, true)?;
            let real_test = generate_keypress_images(f.keypress_test, real, &renderer, test_seed, true)?;
            let pool = concat_sets(&[&syn_train, &real_train])?;
            let opts = ClassifierOptions { seed: derive_seed(seed, "keypress-classifier"), ..f.classifier.clone() };
            let (model, classifier) = train_keypress_classifier(&pool, None, f.cnn, Domain::Synthetic, &opts)?;
            let report = KeypressReport {
                classifier,
                synthetic_test_accuracy: model.accuracy(&syn_test)?,
                pseudo_real_test_accuracy: model.accuracy(&real_test)?,
            };
            fs::create_dir_all(p.layout.extractor_dir()).map_err(|e| Error::at(p.layout.extractor_dir(), e))?;
            model.save(&p.layout.extractor())?;
            write_json(&p.layout.keypress_report(), &report)
        })
    }

    pub fn align_features(&mut self) -> Result<()> {
        let Some(key) = self.keys.align.clone() else {
            return Err(Error::InvalidArgument("alignment is disabled in the configuration".into()));
        };
        let dir = self.layout.extractor_dir();
        let outputs = vec![self.layout.aligned_extractor(), self.layout.align_report()];
        self.stage(STAGE_ALIGN, &dir, &key, &outputs, |p| {
            let source = FeatureExtractor::<f32>::load(&p.layout.extractor())?;
            let n = p.config.features.align_frames;
            let source_frames = pool_frames(&p.layout.data(Domain::Synthetic), Split::Train, n, p.config.seed)?;
            let target_frames = pool_frames(&p.layout.data(Domain::PseudoReal), Split::Train, n, p.config.seed)?;
            let opts = crate::featex::AlignOptions {
                seed: derive_seed(p.config.seed, "align"),
                ..p.config.features.alignment.clone()
            };
            let (aligned, report) = align_extractor(&source, &source_frames, &target_frames, &opts)?;
            let renderer = p.renderer()?;
            let test_seed = derive_seed(p.config.seed, "keypress-test");
            let k = p.config.features.keypress_test;
            let syn_test = generate_keypress_images(k, &p.config.styles.synthetic, &renderer, test_seed, true)?;
            let real_test = generate_keypress_images(k, &p.config.styles.pseudo_real, &renderer, test_seed, true)?;
            let probe = DomainProbeOptions { seed: derive_seed(p.config.seed, "align-probe"), ..Default::default() };
            let src = source.extract(&syn_test.images)?;
            let summary = AlignmentSummary {
                report,
                probe_before: domain_probe_accuracy(&src, &source.extract(&real_test.images)?, &probe)?,
                probe_after: domain_probe_accuracy(&src, &aligned.extract(&real_test.images)?, &probe)?,
                pseudo_real_accuracy_before: source.accuracy(&real_test)?,
                pseudo_real_accuracy_after: aligned.accuracy(&real_test)?,
            };
            aligned.save(&p.layout.aligned_extractor())?;
            write_json(&p.layout.align_report(), &summary)
        })
    }

    pub fn extract_features(&mut self) -> Result<()> {
        let dir = self.layout.root.join("features");
        let outputs: Vec<PathBuf> = [Domain::Synthetic, Domain::PseudoReal]
            .iter()
            .map(|&d| self.layout.features(d).join(MANIFEST_FILE))
            .collect();
        let key = self.keys.extract.clone();
        self.stage(STAGE_EXTRACT, &dir, &key, &outputs, |p| {
            let source = FeatureExtractor::<f32>::load(&p.layout.extractor())?;
            let target = if p.config.features.align {
                FeatureExtractor::<f32>::load(&p.layout.aligned_extractor())?
            } else {
                source.clone()
            };
            for (d, ex) in [(Domain::Synthetic, &source), (Domain::PseudoReal, &target)] {
                let m = DatasetManifest::read(&p.layout.data(d).join(MANIFEST_FILE))?;
                extract_manifest(&m, &p.layout.data(d), ex, &p.layout.features(d))?;
            }
            Ok(())
        })
    }

    /// Feature sequences for one domain and split, in manifest order.
    pub fn samples(&self, d: Domain, split: Split) -> Result<Vec<SequenceSample>> {
        load_samples(&self.layout.features(d), split, self.config.model.max_phrase_len)
    }

    /// Target training subset of size `count`: (train, validation).
    pub fn target_subset(&self, count: usize) -> Result<(Vec<SequenceSample>, Vec<SequenceSample>)> {
        let pool = self.samples(Domain::PseudoReal, Split::Train)?;
        if count > pool.len() {
            return Err(Error::InvalidArgument(format!("{count} target samples requested, pool has {}", pool.len())));
        }
        let (train, val) = split_validation(count, self.config.data.val_fraction);
        Ok((train.iter().map(|&i| pool[i].clone()).collect(), val.iter().map(|&i| pool[i].clone()).collect()))
    }

    /// Forgets any interrupted training state of `id`, so the next
    /// `train_run` starts from scratch.
    pub fn discard_partial(&self, id: &RunId) {
        let dir = self.layout.run(id);
        cache::invalidate(&dir, STAGE_PARTIAL);
        let _ = fs::remove_file(dir.join("partial.ksts"));
    }

    pub fn train_run(&mut self, id: &RunId) -> Result<()> {
        let key = self.run_key(id)?;
        let dir = self.layout.run(id);
        let outputs = vec![self.layout.model(id), self.layout.state(id)];
        let id = *id;
        self.stage(&format!("{STAGE_TRAIN}:{id}"), &dir.clone(), &key.clone(), &outputs, |p| p.train_body(&id, &key))
    }

    fn train_body(&mut self, id: &RunId, key: &str) -> Result<()> {
        let dir = self.layout.run(id);
        fs::create_dir_all(&dir).map_err(|e| Error::at(&dir, e))?;
        let synthetic = self.samples(Domain::Synthetic, Split::Train)?;
        let (objective, opts, real, val, synthetic, initial) = match id.kind {
            RunKind::Pretrain => {
                let val = self.samples(Domain::Synthetic, Split::Val)?;
                let model = DisentangleModel::new(self.config.model.clone(), self.config.seed)?;
                let opts = TrainOptions { seed: self.config.seed, ..self.config.pretrain.clone() };
                (Objective::Supervised, opts, Vec::new(), val, synthetic, model)
            }
            RunKind::Finetune | RunKind::Variant(_) => {
                let pretrained = DisentangleModel::load(&self.layout.model(&RunId::pretrain()))?;
                let (train, val) = self.target_subset(id.count)?;
                let base = if id.kind == RunKind::Finetune { &self.config.finetune } else { &self.config.train };
                let opts = TrainOptions { seed: id.seed, ..base.clone() };
                let objective = match id.kind {
                    RunKind::Variant(v) => Objective::Disentangle(v),
                    _ => Objective::Supervised,
                };
                let synthetic = if id.kind == RunKind::Finetune { Vec::new() } else { synthetic };
                (objective, opts, train, val, synthetic, pretrained)
            }
        };
        let partial = dir.join("partial.ksts");
        let mut state = if cache::is_fresh(&dir, STAGE_PARTIAL, key, &[partial.clone()]) {
            let s = TrainState::load(&partial)?;
            self.log_line(&format!("resuming {id} at iteration {}", s.iteration));
            s
        } else {
            start_from(&initial, opts.lr, opts.seed)
        };
        let start = state.iteration;
        let log_path = self.layout.train_log(id);
        truncate_log(&log_path, start)?;
        let mut log = BufWriter::new(
            OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| Error::at(&log_path, e))?,
        );
        let weights = if matches!(id.kind, RunKind::Variant(_)) { self.config.weights } else { LossWeights::default() };
        let mut on_record = |s: &TrainState, r: &LogRecord| -> Result<()> {
            serde_json::to_writer(&mut log, r)?;
            log.write_all(b"\n").map_err(|e| Error::at(&log_path, e))?;
            if r.val_ter.is_some() {
                log.flush().map_err(|e| Error::at(&log_path, e))?;
                s.save(&partial)?;
                cache::seal(&dir, STAGE_PARTIAL, key)?;
            }
            Ok(())
        };
        run_training(&mut state, objective, &synthetic, &real, &val, &weights, &opts, &mut on_record)?;
        log.flush().map_err(|e| Error::at(&log_path, e))?;
        self.stats.training_steps += state.iteration - start;
        state.final_model().save(&self.layout.model(id))?;
        state.save(&self.layout.state(id))?;
        cache::invalidate(&dir, STAGE_PARTIAL);
        let _ = fs::remove_file(&partial);
        Ok(())
    }

    fn lexicon(&self) -> Result<Lexicon> {
        match &self.config.paths.lexicon {
            Some(p) => Ok(Lexicon::parse(&fs::read_to_string(p).map_err(|e| Error::at(p, e))?)),
            None => {
                let mut sentences = Vec::new();
                for d in [Domain::Synthetic, Domain::PseudoReal] {
                    let m = DatasetManifest::read(&self.layout.data(d).join(MANIFEST_FILE))?;
                    sentences.extend(m.split(Split::Train).map(|e| e.sentence.clone()));
                }
                Ok(Lexicon::from_sentences(sentences.iter().map(String::as_str)))
            }
        }
    }

    pub fn evaluate_run(&mut self, id: &RunId) -> Result<()> {
        let run_key = self.run_key(id)?;
        let lexicon = self.config.paths.lexicon.as_deref().map(cache::file_digest).transpose()?;
        let key = cache::digest(&json!({ "stage": STAGE_EVAL, "run": run_key, "lexicon": lexicon }))?;
        let dir = self.layout.eval(id);
        let id = *id;
        self.stage(&format!("{STAGE_EVAL}:{id}"), &dir.clone(), &key, &[self.layout.metrics(&id)], |p| {
            fs::create_dir_all(&dir).map_err(|e| Error::at(&dir, e))?;
            let model = DisentangleModel::load(&p.layout.model(&id))?;
            let layout = KeyboardLayout::qwerty();
            let lexicon = p.lexicon()?;
            let test = p.samples(Domain::PseudoReal, Split::Test)?;
            let pairs = predict_to(&model, &test, &dir.join("test.jsonl"))?;
            let test_eval = evaluate(&pairs, &layout, Some(&lexicon))?;
            let (train, synthetic_test) = match id.kind {
                RunKind::Pretrain => {
                    let syn = p.samples(Domain::Synthetic, Split::Test)?;
                    let pairs = predict_to(&model, &syn, &dir.join("synthetic_test.jsonl"))?;
                    (None, Some(score_pairs(&pairs, &layout)?))
                }
                _ => {
                    let (train, _) = p.target_subset(id.count)?;
                    let pairs = predict_to(&model, &train, &dir.join("train.jsonl"))?;
                    (Some(score_pairs(&pairs, &layout)?), None)
                }
            };
            let state = TrainState::load(&p.layout.state(&id))?;
            let summary = EvalSummary {
                run: id,
                test: test_eval,
                train,
                synthetic_test,
                selected_iteration: state.best.as_ref().map(|b| b.iteration),
                val_ter: state.best.as_ref().map(|b| b.val_ter),
            };
            write_json(&p.layout.metrics(&id), &summary)
        })
    }

    /// Balanced synthetic/pseudo-real test samples for the probes.
    pub fn probe_samples(&self) -> Result<Vec<SequenceSample>> {
        let k = self.config.probe.samples_per_domain;
        let mut out: Vec<SequenceSample> = self.samples(Domain::Synthetic, Split::Test)?.into_iter().take(k).collect();
        out.extend(self.samples(Domain::PseudoReal, Split::Test)?.into_iter().take(k));
        Ok(out)
    }

    fn embed_key(&self, id: &RunId) -> Result<String> {
        cache::digest(&json!({
            "stage": STAGE_EMBED, "run": self.run_key(id)?, "samples": self.config.probe.samples_per_domain,
        }))
    }

    pub fn export_run(&mut self, id: &RunId) -> Result<()> {
        let key = self.embed_key(id)?;
        let dir = self.layout.embeddings(id);
        let id = *id;
        let outputs = vec![dir.join(embeddings::MANIFEST)];
        self.stage(&format!("{STAGE_EMBED}:{id}"), &dir.clone(), &key, &outputs, |p| {
            let model = DisentangleModel::load(&p.layout.model(&id))?;
            let set = export_embeddings(&model, &p.probe_samples()?)?;
            set.save(&dir)
        })
    }

    pub fn probe_run(&mut self, id: &RunId) -> Result<()> {
        let key = cache::digest(&json!({
            "stage": STAGE_PROBE, "embed": self.embed_key(id)?, "options": self.config.probe.options,
        }))?;
        let out = self.layout.probe(id);
        let dir = out.parent().expect("probe file has a parent").to_path_buf();
        let id = *id;
        self.stage(&format!("{STAGE_PROBE}:{id}"), &dir, &key, &[out.clone()], |p| {
            let set = EmbeddingSet::load(&p.layout.embeddings(&id))?;
            let report = probe_disentanglement(&set, &p.config.probe.options)?;
            write_json(&out, &report)
        })
    }

    /// Writes the comparison tables; always regenerated.
    pub fn report(&mut self) -> Result<TableReport> {
        let report = make_report(self)?;
        fs::write(self.layout.report_md(), report.to_markdown()).map_err(|e| Error::at(self.layout.report_md(), e))?;
        write_json(&self.layout.report_json(), &report)?;
        self.stats.executed.push("report".into());
        Ok(report)
    }

    pub fn load_eval(&self, id: &RunId) -> Option<EvalSummary> {
        read_json(&self.layout.metrics(id)).ok()
    }

    pub fn load_probe(&self, id: &RunId) -> Option<ProbeReport> {
        read_json(&self.layout.probe(id)).ok()
    }
}

/// Re-exports of the stage outputs used by standalone commands.
pub fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::at(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::at(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::at(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Keeps only log records up to `iteration`, so a resumed run's log reads as
/// if it had never stopped.
fn truncate_log(path: &Path, iteration: u64) -> Result<()> {
    if iteration == 0 || !path.exists() {
        return match fs::File::create(path) {
            Ok(_) => Ok(()),
            Err(e) => Err(Error::at(path, e)),
        };
    }
    let f = fs::File::open(path).map_err(|e| Error::at(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::at(path, e))?;
        if let Ok(r) = serde_json::from_str::<LogRecord>(&line) {
            if r.iteration <= iteration {
                kept.push_str(&line);
                kept.push('\n');
            }
        }
    }
    fs::write(path, kept).map_err(|e| Error::at(path, e))
}

fn predict_to(model: &DisentangleModel<f32>, samples: &[SequenceSample], path: &Path) -> Result<Vec<(String, String)>> {
    let preds = predict(model, samples)?;
    let records: Vec<TextRecord> =
        samples.iter().zip(&preds).map(|(s, p)| TextRecord { id: s.id.clone(), text: p.clone() }).collect();
    crate::metrics::write_records(path, &records)?;
    Ok(preds.into_iter().zip(samples).map(|(p, s)| (p, s.sentence.clone())).collect())
}

/// Converts every video in `manifest` to a feature file under `out_dir`,
/// writing a manifest with the same entries.
pub fn extract_manifest(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
    extractor: &FeatureExtractor<f32>,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    crate::simulator::dataset::prepare_dir(out_dir, true)?;
    let frames_dir = out_dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::at(&frames_dir, e))?;
    let mut out = DatasetManifest::default();
    for e in &manifest.entries {
        let frames = load_frames(&resolve(manifest_dir, e))?;
        let feats = extractor.extract(&frames)?;
        let rel = format!("frames/{}.ksv", e.id);
        let file = FrameFile::new(FrameShape::Features { dim: feats.cols() }, feats.into_data())?;
        file.save(&out_dir.join(&rel))?;
        out.entries.push(ManifestEntry { frames_path: rel, frame_count: file.frames, ..e.clone() });
    }
    out.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(out)
}

pub fn load_frames(path: &Path) -> Result<FrameStack> {
    let f = FrameFile::load(path)?;
    match f.shape {
        FrameShape::Image { height, width } => Ok(FrameStack { height, width, data: f.data }),
        FrameShape::Features { .. } => {
            Err(Error::Format(format!("{} holds feature rows, expected rendered frames", path.display())))
        }
    }
}

/// Feature sequences listed in `dir`'s manifest for one split.
pub fn load_samples(dir: &Path, split: Split, max_phrase_len: usize) -> Result<Vec<SequenceSample>> {
    let m = DatasetManifest::read(&dir.join(MANIFEST_FILE))?;
    m.split(split)
        .map(|e| {
            let path = resolve(dir, e);
            let f = FrameFile::load(&path)?;
            let FrameShape::Features { dim } = f.shape else {
                return Err(Error::Format(format!("{} holds images, expected feature rows", path.display())));
            };
            let features = Tensor::new(vec![f.frames, dim], f.data);
            SequenceSample::new(e.id.clone(), e.domain, e.sentence.clone(), features, max_phrase_len)
        })
        .collect()
}

/// About `n` frames drawn without labels from a split's videos, a few from
/// each so that no more than one video is held in memory at a time.
fn pool_frames(dir: &Path, split: Split, n: usize, seed: u64) -> Result<FrameStack> {
    let m = DatasetManifest::read(&dir.join(MANIFEST_FILE))?;
    let mut entries: Vec<&ManifestEntry> = m.split(split).collect();
    if entries.is_empty() {
        return Err(Error::InvalidArgument(format!("no {split:?} videos in {}", dir.display())));
    }
    let mut rng = stream(seed, "pool-frames");
    entries.shuffle(&mut rng);
    let per = n.div_ceil(entries.len()).max(1);
    let mut out: Option<FrameStack> = None;
    for e in entries {
        let f = load_frames(&resolve(dir, e))?;
        let acc = out.get_or_insert_with(|| FrameStack::empty(f.height, f.width));
        let mut idx: Vec<usize> = (0..f.len()).collect();
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(per.min(n - acc.len())) {
            acc.push(f.frame(i));
        }
        if acc.len() >= n {
            break;
        }
    }
    Ok(out.expect("at least one video"))
}
