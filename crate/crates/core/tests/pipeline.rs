use std::fs;
use std::path::Path;

use ksda::error::Error;
use ksda::metrics::{Evaluation, MetricsReport};
use ksda::nets::DisentangleModel;
use ksda::pipeline::{
    build_tables, export_embeddings, load_config, median, probe_disentanglement, probe_with_labels, split_validation, EmbeddingRecord,
    EmbeddingSet, EvalSummary, ExperimentConfig, Pipeline, Preset, RunId, RunKind,
};
use ksda::probe::ProbeOptions;
use ksda::rng::stream;
use ksda::simulator::Domain;
use ksda::tensor::Tensor;
use ksda::train::AblationVariant;
use rand::seq::SliceRandom;
use rand::Rng;

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn config_error(text: &str) -> (String, String) {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "c.toml", text);
    match load_config(Some(&p), None, None) {
        Err(Error::Config { path, message }) => (path, message),
        other => panic!("expected a configuration error for {text:?}, got {other:?}"),
    }
}

#[test]
fn presets_resolve_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "c.toml", "preset = \"smoke\"\nseed = 4\n[train]\niterations = 9\n");
    let c = load_config(Some(&p), None, None).unwrap();
    assert_eq!(c.preset, Preset::Smoke);
    assert_eq!(c.seed, 4);
    assert_eq!(c.train.iterations, 9);
    assert_eq!(c.train.batch_size, ExperimentConfig::smoke().train.batch_size);

    // The command-line preset wins over the file, and the seed flag over both.
    let c = load_config(Some(&p), Some(Preset::Desk), Some(11)).unwrap();
    assert_eq!(c.preset, Preset::Desk);
    assert_eq!(c.seed, 11);
    assert_eq!(c.data.synthetic_train, ExperimentConfig::desk().data.synthetic_train);
    assert_eq!(c.train.iterations, 9);

    let c = load_config(None, None, None).unwrap();
    assert_eq!(c, ExperimentConfig::desk());
    for preset in [Preset::Smoke, Preset::Desk, Preset::Paper] {
        let c = ExperimentConfig::preset(preset);
        c.validate().unwrap();
        assert_eq!(preset.as_str().parse::<Preset>().unwrap(), preset);
    }
}

#[test]
fn resolved_config_round_trips_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    let c = ExperimentConfig::smoke();
    let p = write(dir.path(), "resolved.toml", &c.to_toml().unwrap());
    assert_eq!(load_config(Some(&p), None, None).unwrap(), c);
}

#[test]
fn configuration_errors_name_the_field() {
    let (path, _) = config_error("[train]\niterationz = 3\n");
    assert!(path.contains("train"), "{path}");
    let (path, _) = config_error("[data]\nval_fraction = 0.9\n");
    assert_eq!(path, "data.val_fraction");
    let (path, _) = config_error("[experiments]\ntarget_train_counts = [500]\n");
    assert_eq!(path, "experiments.target_train_counts");
    let (path, _) = config_error("[experiments]\nseeds = []\n");
    assert_eq!(path, "experiments.seeds");
    let (path, _) = config_error("[weights]\nlambda2 = -0.5\n");
    assert_eq!(path, "weights");
    let (path, _) = config_error("[paths]\ncorpus = \"/nonexistent/corpus.txt\"\n");
    assert_eq!(path, "paths.corpus");
    let (path, _) = config_error("preset = \"huge\"\n");
    assert_eq!(path, "preset");
    let (path, _) = config_error("[model]\nnum_heads = 3\n");
    assert_eq!(path, "model");
    let (path, _) = config_error("[probe]\nsamples_per_domain = 5\n");
    assert_eq!(path, "probe.samples_per_domain");
    let (path, msg) = config_error("[train]\niterations = \"many\"\n");
    assert!(path.contains("train.iterations"), "{path}: {msg}");
    config_error("this is = not toml [");
}

#[test]
fn validation_split_is_deterministic_and_disjoint() {
    for n in [2, 10, 75, 150, 175] {
        let (train, val) = split_validation(n, 0.1);
        assert_eq!(train.len() + val.len(), n);
        assert!(!val.is_empty() && !train.is_empty());
        assert!(val.iter().all(|v| !train.contains(v)));
        assert_eq!(split_validation(n, 0.1), (train, val));
    }
}

fn smoke_config(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::smoke();
    c.paths.out_dir = dir.to_path_buf();
    c
}

fn run_smoke(dir: &Path) -> Pipeline {
    let mut p = Pipeline::new(smoke_config(dir)).unwrap();
    p.run_all().unwrap();
    p
}

#[test]
fn smoke_pipeline_is_reproducible_and_cached() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run_smoke(a.path());
    run_smoke(b.path());
    assert!(first.stats.training_steps > 0);
    for f in ["report.md", "report.json"] {
        let (x, y) = (fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        assert!(x == y, "{f} differs between identical runs");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("report.json")).unwrap()).unwrap();
    assert!(report["missing"].as_array().unwrap().is_empty());
    assert_eq!(report["rows"].as_array().unwrap().len(), first.runs().len() - 1);

    // A second invocation in the same directory only rewrites the report.
    let again = run_smoke(a.path());
    assert_eq!(again.stats.training_steps, 0);
    assert_eq!(again.stats.executed, vec!["report".to_string()]);

    // Removing one output re-executes just the stage that produced it.
    let id = RunId { kind: RunKind::Variant(AblationVariant::VIFull), count: 20, seed: 0 };
    fs::remove_file(first.layout.metrics(&id)).unwrap();
    let third = run_smoke(a.path());
    assert_eq!(third.stats.training_steps, 0);
    assert_eq!(third.stats.executed, vec![format!("evaluate:{id}"), "report".to_string()]);
    assert_eq!(fs::read(a.path().join("report.md")).unwrap(), fs::read(b.path().join("report.md")).unwrap());
}

#[test]
fn changed_settings_invalidate_downstream_stages_only() {
    let dir = tempfile::tempdir().unwrap();
    run_smoke(dir.path());
    let mut c = smoke_config(dir.path());
    c.train.iterations += 1;
    let mut p = Pipeline::new(c).unwrap();
    p.run_all().unwrap();
    let ran = |prefix: &str| p.stats.executed.iter().any(|s| s.starts_with(prefix));
    assert!(!ran("generate") && !ran("pretrain-features") && !ran("extract-features"));
    assert!(!ran("train:pretrain") && !ran("train:finetune"));
    assert!(ran("train:VI") && ran("train:I-"));
}

#[test]
fn exported_embeddings_round_trip_and_match_a_fresh_export() {
    let dir = tempfile::tempdir().unwrap();
    let p = run_smoke(dir.path());
    let id = RunId { kind: RunKind::Variant(AblationVariant::VIFull), count: 20, seed: 0 };
    let saved = EmbeddingSet::load(&p.layout.embeddings(&id)).unwrap();
    let model = DisentangleModel::load(&p.layout.model(&id)).unwrap();
    let fresh = export_embeddings(&model, &p.probe_samples().unwrap()).unwrap();
    assert_eq!(saved.records, fresh.records);
    for (x, y) in [(&saved.style, &fresh.style), (&saved.content, &fresh.content), (&saved.aggregate, &fresh.aggregate)]
    {
        assert_eq!(x.shape(), y.shape());
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let n = p.config.probe.samples_per_domain;
    assert_eq!(saved.style.shape(), &[2 * n, model.config.embed_dim]);
    assert_eq!(saved.records.iter().filter(|r| r.domain == Domain::PseudoReal).count(), n);

    let copy = tempfile::tempdir().unwrap();
    saved.save(copy.path()).unwrap();
    assert_eq!(EmbeddingSet::load(copy.path()).unwrap(), saved);
}

fn gaussian_set(n: usize, dim: usize, separation: f32, seed: u64) -> EmbeddingSet {
    let mut rng = stream(seed, "gauss");
    let mut records = Vec::new();
    let mut rows = Vec::new();
    for i in 0..2 * n {
        let real = i >= n;
        records.push(EmbeddingRecord {
            id: i.to_string(),
            domain: if real { Domain::PseudoReal } else { Domain::Synthetic },
            sentence: "a".into(),
        });
        let shift = if real { separation } else { 0.0 };
        rows.extend((0..dim).map(|_| rng.gen_range(-1.0..1.0f32) + shift));
    }
    let t = Tensor::matrix(2 * n, dim, rows);
    EmbeddingSet { records, style: t.clone(), content: t.clone(), aggregate: t }
}

#[test]
fn probe_separates_shifted_domains_and_not_shuffled_labels() {
    let opts = ProbeOptions::default();
    let set = gaussian_set(100, 8, 1.0, 1);
    let r = probe_disentanglement(&set, &opts).unwrap();
    assert!(r.style > 0.95 && r.content > 0.95, "{r:?}");

    let mut labels: Vec<bool> = set.records.iter().map(|r| r.domain == Domain::PseudoReal).collect();
    let null = gaussian_set(100, 8, 0.0, 2);
    let r = probe_disentanglement(&null, &opts).unwrap();
    assert!((0.35..=0.65).contains(&r.style), "{r:?}");

    labels.shuffle(&mut stream(3, "shuffle"));
    let r = probe_with_labels(&set, &labels, &opts).unwrap();
    assert!((0.35..=0.65).contains(&r.content), "{r:?}");
}

#[test]
fn probe_rejects_single_domain_and_tiny_inputs() {
    let opts = ProbeOptions::default();
    let set = gaussian_set(30, 4, 1.0, 1);
    assert!(probe_with_labels(&set, &vec![true; 60], &opts).is_err());
    let small = gaussian_set(10, 4, 1.0, 1);
    assert!(probe_disentanglement(&small, &opts).is_err());
    assert!(probe_with_labels(&set, &[true, false], &opts).is_err());
}

fn metrics(ter: f64, bleu1: f64) -> MetricsReport {
    MetricsReport {
        bleu1,
        bleu4: bleu1 / 2.0,
        meteor: bleu1,
        rouge: bleu1,
        ter,
        qwerty_d: ter * 3.0,
        word_precision: bleu1,
        word_recall: bleu1,
        char_precision: bleu1,
        char_recall: bleu1,
        sample_count: 50,
    }
}

fn summary(kind: RunKind, count: usize, seed: u64, ter: f64, train_ter: f64) -> (RunId, Option<EvalSummary>) {
    let run = RunId { kind, count, seed };
    let s = EvalSummary {
        run,
        test: Evaluation { raw: metrics(ter, 1.0 - ter), corrected: None },
        train: Some(metrics(train_ter, 1.0 - train_ter)),
        synthetic_test: None,
        selected_iteration: Some(10),
        val_ter: Some(ter),
    };
    (run, Some(s))
}

#[test]
fn report_takes_medians_over_seeds() {
    let vi = RunKind::Variant(AblationVariant::VIFull);
    let entries = vec![
        summary(RunKind::Finetune, 150, 0, 0.9, 0.1),
        summary(RunKind::Finetune, 150, 1, 0.5, 0.2),
        summary(RunKind::Finetune, 150, 2, 0.7, 0.0),
        summary(vi, 150, 0, 0.4, 0.3),
        summary(vi, 150, 1, 0.2, 0.1),
        summary(vi, 150, 2, 0.3, 0.3),
        summary(vi, 75, 0, 0.6, 0.5),
        (RunId { kind: vi, count: 75, seed: 1 }, None),
    ];
    let t = build_tables(&entries);
    assert_eq!(t.missing, vec!["VI-n75-s1".to_string()]);
    assert_eq!(t.rows.len(), 7);
    let labels: Vec<(String, usize)> = t.medians.iter().map(|r| (r.label.clone(), r.count)).collect();
    assert_eq!(labels, vec![("finetune".into(), 150), ("VI".into(), 150), ("VI".into(), 75)]);
    let ft = &t.medians[0];
    assert_eq!((ft.runs, ft.seed), (3, None));
    assert!((ft.metrics[4] - 0.7).abs() < 1e-12);
    assert!((ft.train_ter.unwrap() - 0.1).abs() < 1e-12);
    // Median of the gaps, not the gap of the medians.
    assert!((ft.gap.unwrap() - 0.7).abs() < 1e-12);
    let vi150 = &t.medians[1];
    assert!((vi150.metrics[4] - 0.3).abs() < 1e-12);
    assert!((vi150.gap.unwrap() - 0.1).abs() < 1e-12);
    // A single completed seed is its own median.
    let vi75 = &t.medians[2];
    assert_eq!(vi75.runs, 1);
    assert_eq!(vi75.metrics, t.rows.iter().find(|r| r.count == 75).unwrap().metrics);
    let md = t.to_markdown();
    assert!(md.contains("VI (Full)") && md.contains("median of 3") && md.contains("VI-n75-s1"));
}

#[test]
fn median_of_even_and_odd_lengths() {
    assert_eq!(median(&[0.3]), 0.3);
    assert_eq!(median(&[0.9, 0.1, 0.5]), 0.5);
    assert_eq!(median(&[0.4, 0.1, 0.2, 0.3]), 0.25);
    assert!(median(&[]).is_nan());
}

#[test]
fn run_names_and_order() {
    let p = Pipeline::new(smoke_config(Path::new("/tmp/unused"))).unwrap();
    let names: Vec<String> = p.runs().iter().map(RunId::name).collect();
    assert_eq!(names[0], "pretrain");
    assert!(names.contains(&"finetune-n20-s0".to_string()));
    assert!(names.contains(&"VI-n10-s0".to_string()));
    let pos = |n: &str| names.iter().position(|x| x == n).unwrap();
    assert!(pos("finetune-n20-s0") < pos("VI-n20-s0"));
}
