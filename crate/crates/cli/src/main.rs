use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use ksda::keyboard::KeyboardLayout;
use ksda::metrics::{evaluate_files, Lexicon};
use ksda::pipeline::{
    export_embeddings, extract_manifest, load_config, load_samples, load_weights, probe_disentanglement, write_json,
    EmbeddingSet, ExperimentConfig, Pipeline, Preset, RunId, RunKind,
};
use ksda::simulator::{
    fallback_sentences, generate_dataset, ingest_corpus, DatasetManifest, Domain, Renderer, Split,
};
use ksda::train::AblationVariant;
use ksda::{Extractor, Model};

/// Keystroke inference from simulated typing videos with disentangled domain
/// adaptation.
#[derive(Parser)]
#[command(name = "ksda", version)]
struct Cli {
    /// Experiment configuration (TOML); any subset of fields overrides the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed for data generation and pretraining.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Base hyperparameters: smoke, desk or paper
    #[arg(long, global = true, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Experiment directory; overrides `paths.out_dir`.
    #[arg(long, global = true)]
    dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: ksda::Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Render typing videos. With --style/--count/--out writes one standalone
    /// dataset; otherwise runs the experiment's generation stage.
    Generate(GenerateArgs),
    /// Train the keypress CNN whose penultimate layer is the frame feature.
    PretrainFeatures,
    /// Align the extractor to pseudo-real frames (needs `features.align = true`).
    AlignFeatures,
    /// Convert rendered videos to feature sequences.
    ExtractFeatures(ExtractArgs),
    /// Train the shared encoder/decoder on synthetic data and score it.
    Pretrain,
    /// Disentanglement training of one ablation variant.
    Train(TrainArgs),
    /// Cross-entropy finetuning baseline on target samples.
    Finetune(RunArgs),
    /// Score trained runs on the pseudo-real test set.
    Evaluate(SelectArgs),
    /// Score a predictions file against references.
    Metrics(MetricsArgs),
    /// Write temporally pooled style, content and aggregate embeddings.
    ExportEmbeddings(ExportArgs),
    /// Linear domain probes over exported embeddings.
    Probe(ProbeArgs),
    /// Rebuild the comparison tables from completed runs.
    Report,
    /// Run every stage, skipping those whose outputs are current.
    Pipeline,
}

#[derive(Args)]
struct GenerateArgs {
    /// Standalone mode: `synthetic` or `pseudo-real`.
    #[arg(long, value_parser = parse_domain, requires_all = ["count", "out"])]
    style: Option<Domain>,
    /// Standalone mode: number of videos.
    #[arg(long)]
    count: Option<usize>,
    /// Headlines file; the built-in word list is used when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Standalone mode: output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_domain(s: &str) -> Result<Domain, String> {
    s.parse().map_err(|e: ksda::Error| e.to_string())
}

#[derive(Args)]
struct ExtractArgs {
    /// Standalone mode: dataset manifest of rendered videos.
    #[arg(long, requires_all = ["extractor", "out"])]
    manifest: Option<PathBuf>,
    /// Standalone mode: trained extractor checkpoint.
    #[arg(long)]
    extractor: Option<PathBuf>,
    /// Standalone mode: output feature directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Target training subset size (default: every configured count).
    #[arg(long)]
    target_train_count: Option<usize>,
    /// Run seed (default: every configured experiment seed).
    #[arg(long)]
    run_seed: Option<u64>,
    /// Continue from the last validation checkpoint of an interrupted run.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Ablation variant, I to VI
    #[arg(long, value_parser = parse_variant)]
    variant: AblationVariant,
    /// TOML file with any of lambda1..lambda6.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

fn parse_variant(s: &str) -> Result<AblationVariant, String> {
    s.parse().map_err(|e: ksda::Error| e.to_string())
}

#[derive(Args)]
struct SelectArgs {
    /// Run names such as `pretrain` or `VI-n150-s0` (default: all configured runs).
    #[arg(long = "run")]
    runs: Vec<RunId>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Predictions, one JSON object with `id` and `text` per line.
    #[arg(long)]
    hyp: PathBuf,
    /// References in the same format.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Word list for dictionary correction (`word [count]` per line).
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// JSON report; a text table is written next to it with a `.txt` suffix.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    select: SelectArgs,
    /// Standalone mode: model checkpoint to export from.
    #[arg(long, requires_all = ["features", "out"])]
    model: Option<PathBuf>,
    /// Feature directories (with manifests) whose test split is exported.
    #[arg(long)]
    features: Vec<PathBuf>,
    /// Standalone mode: output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    select: SelectArgs,
    /// Standalone mode: exported embedding directory.
    #[arg(long, requires = "out")]
    embeddings: Option<PathBuf>,
    /// Standalone mode: probe report (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut c = load_config(cli.config.as_deref(), cli.preset, cli.seed)?;
    if let Some(d) = &cli.dir {
        c.paths.out_dir = d.clone();
    }
    Ok(c)
}

fn pipeline(cli: &Cli) -> Result<Pipeline> {
    Ok(Pipeline::new(config(cli)?)?)
}

/// Runs of `kind` selected by the flags, in configuration order.
fn selected_runs(p: &Pipeline, kind: RunKind, args: &RunArgs) -> Vec<RunId> {
    let e = &p.config.experiments;
    let counts = args.target_train_count.map_or_else(|| e.target_train_counts.clone(), |n| vec![n]);
    let seeds = args.run_seed.map_or_else(|| e.seeds.clone(), |s| vec![s]);
    counts.iter().flat_map(|&count| seeds.iter().map(move |&seed| RunId { kind, count, seed })).collect()
}

/// Brings every stage up to the pretrained model up to date (current stages
/// are skipped).
fn prepare(p: &mut Pipeline) -> Result<()> {
    p.generate()?;
    p.pretrain_features()?;
    if p.config.features.align {
        p.align_features()?;
    }
    p.extract_features()?;
    let id = RunId::pretrain();
    p.train_run(&id)?;
    p.evaluate_run(&id)?;
    Ok(())
}

fn train_runs(p: &mut Pipeline, runs: &[RunId], resume: bool) -> Result<()> {
    if let Some(n) = runs.first().map(|r| r.count) {
        if n > p.config.data.real_train {
            bail!("--target-train-count {n} exceeds the {} generated target samples", p.config.data.real_train);
        }
    }
    prepare(p)?;
    for id in runs {
        if !resume {
            p.discard_partial(id);
        }
        p.train_run(id)?;
        p.evaluate_run(id)?;
        println!("{id}: {}", p.layout.metrics(id).display());
    }
    Ok(())
}

fn chosen(p: &Pipeline, select: &SelectArgs) -> Vec<RunId> {
    if select.runs.is_empty() {
        p.runs().into_iter().filter(|id| p.layout.model(id).exists()).collect()
    } else {
        select.runs.clone()
    }
}

fn generate_standalone(cli: &Cli, args: &GenerateArgs, style: Domain) -> Result<()> {
    let (Some(count), Some(out)) = (args.count, &args.out) else {
        bail!("standalone generation needs --style, --count and --out");
    };
    let c = config(cli)?;
    let d = &c.data;
    let mut rng = ksda::rng::stream(c.seed, "corpus");
    let corpus = args.corpus.as_ref().or(c.paths.corpus.as_ref());
    let sentences = match corpus {
        Some(path) => {
            use rand::seq::SliceRandom;
            let mut s = ingest_corpus(path, d.max_chars, d.charset_policy)?;
            s.shuffle(&mut rng);
            s
        }
        None => fallback_sentences(count, d.max_chars, &mut rng),
    };
    if sentences.len() < count {
        bail!("only {} usable sentences for {count} samples", sentences.len());
    }
    let items: Vec<(String, Split)> = sentences.into_iter().take(count).map(|s| (s, Split::Train)).collect();
    let typing = match style {
        Domain::Synthetic => &c.styles.synthetic,
        Domain::PseudoReal => &c.styles.pseudo_real,
    };
    let renderer = Renderer::new(KeyboardLayout::qwerty(), d.frame_height, d.frame_width)?;
    let m = generate_dataset(&items, typing, &renderer, out, c.seed, false)?;
    println!("{} videos written to {}", m.entries.len(), out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(args) => match args.style {
            Some(style) => generate_standalone(cli, args, style)?,
            None => {
                if args.count.is_some() || args.out.is_some() || args.corpus.is_some() {
                    bail!("--count, --corpus and --out apply to standalone generation and need --style");
                }
                pipeline(cli)?.generate()?;
            }
        },
        Command::PretrainFeatures => {
            let mut p = pipeline(cli)?;
            p.pretrain_features()?;
            println!("{}", fs::read_to_string(p.layout.keypress_report())?);
        }
        Command::AlignFeatures => {
            let mut p = pipeline(cli)?;
            p.align_features()?;
            println!("{}", fs::read_to_string(p.layout.align_report())?);
        }
        Command::ExtractFeatures(args) => match (&args.manifest, &args.extractor, &args.out) {
            (Some(manifest), Some(extractor), Some(out)) => {
                let m = DatasetManifest::read(manifest)?;
                let base = manifest.parent().unwrap_or(Path::new("."));
                let ex = Extractor::load(extractor)?;
                let written = extract_manifest(&m, base, &ex, out)?;
                println!("{} feature sequences written to {}", written.entries.len(), out.display());
            }
            _ => pipeline(cli)?.extract_features()?,
        },
        Command::Pretrain => {
            let mut p = pipeline(cli)?;
            let id = RunId::pretrain();
            prepare(&mut p)?;
            println!("{}", fs::read_to_string(p.layout.metrics(&id))?);
        }
        Command::Train(args) => {
            let mut p = pipeline(cli)?;
            if let Some(w) = &args.weights {
                p = Pipeline::new(ExperimentConfig { weights: load_weights(w, &p.config.weights)?, ..p.config })?;
            }
            let runs = selected_runs(&p, RunKind::Variant(args.variant), &args.run);
            train_runs(&mut p, &runs, args.run.resume)?;
        }
        Command::Finetune(args) => {
            let mut p = pipeline(cli)?;
            let runs = selected_runs(&p, RunKind::Finetune, args);
            train_runs(&mut p, &runs, args.resume)?;
        }
        Command::Evaluate(select) => {
            let mut p = pipeline(cli)?;
            for id in chosen(&p, select) {
                p.evaluate_run(&id)?;
                let s = p.load_eval(&id).context("evaluation summary missing")?;
                println!("{id}\n{}\n", s.test.raw);
            }
        }
        Command::Metrics(args) => {
            let lexicon = match &args.lexicon {
                Some(p) => Some(Lexicon::parse(&fs::read_to_string(p).with_context(|| p.display().to_string())?)),
                None => None,
            };
            let eval = evaluate_files(&args.hyp, &args.reference, &KeyboardLayout::qwerty(), lexicon.as_ref())?;
            let mut table = format!("raw\n{}\n", eval.raw);
            if let Some(c) = &eval.corrected {
                table.push_str(&format!("\ndictionary-corrected\n{c}\n"));
            }
            print!("{table}");
            write_json(&args.out, &eval)?;
            fs::write(args.out.with_extension("txt"), table)?;
        }
        Command::ExportEmbeddings(args) => match (&args.model, &args.out) {
            (Some(model), Some(out)) => {
                let model = Model::load(model)?;
                let mut samples = Vec::new();
                for dir in &args.features {
                    samples.extend(load_samples(dir, Split::Test, model.config.max_phrase_len)?);
                }
                let set = export_embeddings(&model, &samples)?;
                set.save(out)?;
                println!("{} embeddings written to {}", set.records.len(), out.display());
            }
            _ => {
                let mut p = pipeline(cli)?;
                for id in chosen(&p, &args.select) {
                    p.export_run(&id)?;
                    println!("{id}: {}", p.layout.embeddings(&id).display());
                }
            }
        },
        Command::Probe(args) => match (&args.embeddings, &args.out) {
            (Some(dir), Some(out)) => {
                let c = config(cli)?;
                let report = probe_disentanglement(&EmbeddingSet::load(dir)?, &c.probe.options)?;
                write_json(out, &report)?;
                println!("{}", serde_json::to_string_pretty(&report)?);
            }
            _ => {
                let mut p = pipeline(cli)?;
                for id in chosen(&p, &args.select) {
                    p.export_run(&id)?;
                    p.probe_run(&id)?;
                    let r = p.load_probe(&id).context("probe report missing")?;
                    println!("{id}: style {:.4} content {:.4} aggregate {:.4}", r.style, r.content, r.aggregate);
                }
            }
        },
        Command::Report => {
            let mut p = pipeline(cli)?;
            print!("{}", p.report()?.to_markdown());
        }
        Command::Pipeline => {
            let mut p = pipeline(cli)?;
            p.run_all()?;
            info!("executed {} stages, skipped {}", p.stats.executed.len(), p.stats.skipped.len());
            println!("report: {}", p.layout.report_md().display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
