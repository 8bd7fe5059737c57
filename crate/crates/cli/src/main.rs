use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kred::audit::{gradient_audit, TOLERANCE};
use kred::config::Config;
use kred::data::{synth_corpus, Dataset};
use kred::kg::{read_embeddings, train_transe, write_embeddings, EmbeddingTables};
use kred::model::{cosine, sidecar_path, KredModel};
use kred::training::{build_model, evaluate, train_multitask, EvalSplit};
use kred::KredError;

const ENTITY_FILE: &str = "entity_embeddings.tsv";
const RELATION_FILE: &str = "relation_embeddings.tsv";
const MODEL_FILE: &str = "model.bin";

/// Knowledge-aware document representations for news recommendation.
#[derive(Parser)]
#[command(name = "kred", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; the desk preset is used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config override, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and a config pointing at it.
    SynthData,
    /// Train TransE embeddings for the configured knowledge graph.
    TrainKg,
    /// Train KRED on the configured tasks and report test metrics.
    Train {
        /// Directory with pretrained entity and relation embeddings.
        #[arg(long, value_name = "DIR")]
        embeddings: Option<PathBuf>,
    },
    /// Compute the metrics report of a trained model.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Export document vectors.
    Embed {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
    },
    /// Rank unseen documents for every user.
    Recommend {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// List the nearest documents of every document.
    Similar {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Finite-difference audit of the full model's gradients.
    GradCheck {
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for EvalSplit {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => EvalSplit::Train,
            SplitArg::Val => EvalSplit::Val,
            SplitArg::Test => EvalSplit::Test,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|c| c.downcast_ref::<KredError>())
        .map_or(2, |k| k.exit_code() as u8)
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match cli.command {
        Command::SynthData => synth_data(c),
        Command::TrainKg => train_kg(c),
        Command::Train { embeddings } => train(c, embeddings.as_deref()),
        Command::Evaluate { model, split } => {
            let (cfg, data, model) = load_model(c, &model)?;
            let report = evaluate(&model, &data, &cfg, &cfg.train.tasks, split.into())?;
            prepare_out(c, &cfg)?;
            report.write(&c.out)?;
            print!("{}", report.to_tsv());
            Ok(())
        }
        Command::Embed { model } => {
            let (cfg, data, model) = load_model(c, &model)?;
            let kdvs = model.kdvs(&data.docs)?;
            let mut out = String::new();
            for (d, v) in data.docs.iter().zip(&kdvs) {
                let values: Vec<String> = v.0.iter().map(|x| x.to_string()).collect();
                let _ = writeln!(out, "{}\t{}", d.id, values.join(" "));
            }
            prepare_out(c, &cfg)?;
            write(&c.out.join("kdv.tsv"), &out)
        }
        Command::Recommend { model, top } => {
            let (cfg, data, model) = load_model(c, &model)?;
            prepare_out(c, &cfg)?;
            write(&c.out.join("recommendations.tsv"), &recommend(&model, &data, top)?)
        }
        Command::Similar { model, top } => {
            let (cfg, data, model) = load_model(c, &model)?;
            prepare_out(c, &cfg)?;
            write(&c.out.join("similar.tsv"), &similar(&model, &data, top)?)
        }
        Command::GradCheck { seeds } => grad_check(c, seeds),
    }
}

/// Resolves the config from file or preset, overrides and seed. Relative data
/// directories in a config file are taken relative to that file.
fn resolve_config(c: &Common) -> Result<Config> {
    let cfg = match &c.config {
        Some(path) => load_config(path, &c.overrides)?,
        None => Config::desk().with_overrides(&c.overrides)?,
    };
    with_seed(cfg, c.seed)
}

fn load_config(path: &Path, overrides: &[String]) -> Result<Config> {
    let mut cfg = Config::load(path, overrides)?;
    let dir = Path::new(&cfg.data.dir);
    if dir.is_relative() {
        let joined = path.parent().unwrap_or(Path::new("")).join(dir);
        let abs = std::path::absolute(&joined).with_context(|| format!("resolving {}", joined.display()))?;
        cfg.data.dir = abs.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

fn with_seed(mut cfg: Config, seed: Option<u64>) -> Result<Config> {
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg.resolve()?)
}

fn prepare_out(c: &Common, cfg: &Config) -> Result<()> {
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    write(&c.out.join("config.toml"), &cfg.to_toml())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_data(cfg: &Config) -> Result<Dataset> {
    let data = Dataset::load(&cfg.data, cfg.model.popularity_classes, cfg.seed)?;
    let s = &data.stats;
    eprintln!(
        "loaded {} documents, {} impressions ({} dropped for short histories, {} low-confidence and {} unknown entity links)",
        data.docs.len(),
        data.impressions.len(),
        s.short_history_dropped,
        s.news.low_confidence,
        s.news.unknown_entities
    );
    Ok(data)
}

fn synth_data(c: &Common) -> Result<()> {
    let mut cfg = resolve_config(c)?;
    let corpus = synth_corpus(&cfg.synth, cfg.seed)?;
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    let d = &cfg.data;
    for (name, text) in [
        (&d.triples, &corpus.triples),
        (&d.entity_types, &corpus.entity_types),
        (&d.news, &corpus.news),
        (&d.behaviors, &corpus.behaviors),
    ] {
        write(&c.out.join(name), text)?;
    }
    cfg.data.dir = ".".into();
    cfg.data.test_start = Some(corpus.test_start);
    write(&c.out.join("config.toml"), &cfg.to_toml())?;
    eprintln!("wrote synthetic corpus to {}", c.out.display());
    Ok(())
}

fn train_kg(c: &Common) -> Result<()> {
    let cfg = resolve_config(c)?;
    let dir = Path::new(&cfg.data.dir);
    let graph = kred::kg::KnowledgeGraph::from_tsv(&dir.join(&cfg.data.triples))?;
    let tables = train_transe(&graph, &cfg.transe)?;
    prepare_out(c, &cfg)?;
    write_embeddings(&c.out.join(ENTITY_FILE), graph.entities(), &tables.entity)?;
    write_embeddings(&c.out.join(RELATION_FILE), graph.relations(), &tables.relation)?;
    eprintln!(
        "trained {}-d embeddings for {} entities and {} relations",
        tables.dim(),
        graph.num_entities(),
        graph.num_relations()
    );
    Ok(())
}

fn train(c: &Common, embeddings: Option<&Path>) -> Result<()> {
    let cfg = resolve_config(c)?;
    let data = load_data(&cfg)?;
    let tables = match embeddings {
        Some(dir) => EmbeddingTables {
            entity: read_embeddings(&dir.join(ENTITY_FILE), data.graph.entities())?,
            relation: read_embeddings(&dir.join(RELATION_FILE), data.graph.relations())?,
        },
        None => train_transe(&data.graph, &cfg.transe)?,
    };
    prepare_out(c, &cfg)?;
    let mut model = build_model(&cfg, &data, &tables)?;
    let mut log = String::new();
    let outcome = train_multitask(&mut model, &data, &cfg, |rec| {
        let line = rec.to_line();
        eprintln!("{line}");
        log.push_str(&line);
        log.push('\n');
    })?;
    write(&c.out.join("train.log"), &log)?;
    model.save(&c.out.join(MODEL_FILE), &cfg)?;
    eprintln!(
        "best validation {} = {:.4} at epoch {}",
        outcome.target, outcome.best_val, outcome.best_epoch
    );
    let report = evaluate(&model, &data, &cfg, &cfg.train.tasks, EvalSplit::Test)?;
    report.write(&c.out)?;
    print!("{}", report.to_tsv());
    Ok(())
}

/// Config from the checkpoint's sidecar with command-line overrides applied,
/// then the data and the model.
fn load_model(c: &Common, path: &Path) -> Result<(Config, Dataset, KredModel)> {
    let cfg = with_seed(load_config(&sidecar_path(path), &c.overrides)?, c.seed)?;
    let data = load_data(&cfg)?;
    let (model, _) = KredModel::load(path, &data.graph)?;
    Ok((cfg, data, model))
}

fn top_k(scored: impl Iterator<Item = (usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    let mut v: Vec<(usize, f64)> = scored.collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.truncate(k);
    v
}

/// Each user's history is taken from their latest impression.
fn recommend(model: &KredModel, data: &Dataset, top: usize) -> Result<String> {
    let kdvs = model.kdvs(&data.docs)?;
    let scorer = model.scorer(&kdvs);
    let mut latest: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, imp) in data.impressions.iter().enumerate() {
        let e = latest.entry(imp.user.as_str()).or_insert(i);
        if imp.time >= data.impressions[*e].time {
            *e = i;
        }
    }
    let mut out = String::new();
    for (user, i) in latest {
        let history = &data.impressions[i].history;
        let candidates: Vec<usize> = (0..data.docs.len()).filter(|d| !history.contains(d)).collect();
        let u = scorer.user_vector(history)?;
        let scores = scorer.user_item(&u, &candidates)?;
        for (d, s) in top_k(candidates.into_iter().zip(scores), top) {
            let _ = writeln!(out, "{user}\t{}\t{s}", data.docs[d].id);
        }
    }
    Ok(out)
}

fn similar(model: &KredModel, data: &Dataset, top: usize) -> Result<String> {
    let kdvs = model.kdvs(&data.docs)?;
    let proj = model.scorer(&kdvs).projections()?;
    let mut out = String::new();
    for (a, doc) in data.docs.iter().enumerate() {
        let scored = (0..proj.len()).filter(|&b| b != a).map(|b| (b, cosine(&proj[a], &proj[b])));
        for (b, s) in top_k(scored, top) {
            let _ = writeln!(out, "{}\t{}\t{s}", doc.id, data.docs[b].id);
        }
    }
    Ok(out)
}

fn grad_check(c: &Common, seeds: u64) -> Result<()> {
    let first = c.seed.unwrap_or(0);
    let mut worst: f64 = 0.0;
    for seed in first..first + seeds.max(1) {
        let report = gradient_audit(seed)?;
        let at = report.worst.as_ref().map_or(String::from("-"), |(n, i)| format!("{n}[{i}]"));
        println!(
            "seed {seed}: max rel err {:.3e} over {} entries (worst {at})",
            report.max_rel_err, report.checked
        );
        worst = worst.max(report.max_rel_err);
    }
    if worst >= TOLERANCE {
        return Err(KredError::Numeric(format!("gradient check failed: max rel err {worst:.3e} >= {TOLERANCE:e}")).into());
    }
    Ok(())
}
