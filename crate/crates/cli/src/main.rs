mod config;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use recipe_retrieval::corpus::{
    generate_synthetic_corpus, load_corpus, load_tokenized, preprocess, select, write_corpus,
    write_tokenized, CorpusSplit, FeatureStore, GeneratorSpec, TokenizedRecipe, Vocabulary,
};
use recipe_retrieval::model::{Model, ModelConfig};
use recipe_retrieval::retrieval_eval::{
    evaluate, export_attention, export_embeddings, top_classes, PairedFeatureOracle,
    RetrievalReport,
};
use recipe_retrieval::scalar::{Precision, Scalar};
use recipe_retrieval::text_encoder::pretrain_word_embeddings;
use recipe_retrieval::trainer::{model_gradient_check, train, TrainingData};

use config::{require_file, RunConfig};

#[derive(Parser)]
#[command(
    name = "recipe-retrieval",
    version,
    about = "Image-to-recipe retrieval: data, training, evaluation"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults are used for anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (data directory for generate/preprocess, run directory otherwise).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Checkpoint file to read or write.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    precision: Option<PrecisionArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus, its image features and a split.
    Generate {
        /// Generator spec (JSON); defaults to the `generator` section of the config.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Clean, tokenise and trim the corpus and build the vocabulary.
    Preprocess,
    /// Run the staged training schedule and write a checkpoint and log.
    Train,
    /// Evaluate retrieval on the test split.
    Eval {
        /// Use the paired-feature test double instead of a checkpoint.
        #[arg(long)]
        oracle: bool,
    },
    /// Dump ingredient-attention weights of one recipe as TSV.
    ExportAttention {
        #[arg(long)]
        recipe: String,
    },
    /// Dump text and image embeddings as TSV.
    ExportEmbeddings {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Keep only the K most frequent classes.
        #[arg(long)]
        top_classes: Option<usize>,
    },
    /// Compare analytic and finite-difference gradients of the whole model.
    Gradcheck,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = RunConfig::load_or_default(cli.common.config.as_deref())?;
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    cfg.resolve_seeds();
    if let Some(p) = cli.common.precision {
        cfg.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    if let Some(c) = &cli.common.checkpoint {
        cfg.paths.checkpoint = Some(c.clone());
    }
    let out = cli.common.out.clone();
    let force = cli.common.force;
    match cli.command {
        Command::Generate { spec } => {
            if let Some(p) = spec {
                let text = std::fs::read_to_string(&p)
                    .with_context(|| format!("cannot read spec {}", p.display()))?;
                cfg.generator = serde_json::from_str(&text)
                    .with_context(|| format!("invalid spec {}", p.display()))?;
            }
            if let Some(o) = out {
                cfg.paths.data_dir = o;
            }
            cfg.validate()?;
            cmd_generate(&cfg, force)
        }
        Command::Preprocess => {
            if let Some(o) = out {
                cfg.paths.tokenized.get_or_insert(o.join("tokenized.jsonl"));
                cfg.paths.vocab.get_or_insert(o.join("vocab.tsv"));
            }
            cfg.validate()?;
            cmd_preprocess(&cfg)
        }
        cmd => {
            if let Some(o) = out {
                cfg.paths.run_dir = o;
            }
            cfg.validate()?;
            match (cmd, cfg.precision) {
                (Command::Train, Precision::F32) => cmd_train::<f32>(&cfg),
                (Command::Train, Precision::F64) => cmd_train::<f64>(&cfg),
                (Command::Eval { oracle: true }, _) => cmd_eval_oracle(&cfg),
                (Command::Eval { oracle: false }, Precision::F32) => cmd_eval::<f32>(&cfg),
                (Command::Eval { oracle: false }, Precision::F64) => cmd_eval::<f64>(&cfg),
                (Command::ExportAttention { recipe }, _) => cmd_export_attention(&cfg, &recipe),
                (Command::ExportEmbeddings { split, top_classes }, _) => {
                    cmd_export_embeddings(&cfg, split, top_classes)
                }
                (Command::Gradcheck, _) => cmd_gradcheck(&cfg),
                (Command::Generate { .. } | Command::Preprocess, _) => {
                    unreachable!("handled above")
                }
            }
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn parent_dir(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn cmd_generate(cfg: &RunConfig, force: bool) -> Result<ExitCode> {
    let dir = &cfg.paths.data_dir;
    if dir.is_dir() && std::fs::read_dir(dir)?.next().is_some() && !force {
        bail!(
            "output directory {} is not empty (use --force to overwrite)",
            dir.display()
        );
    }
    let corpus = generate_synthetic_corpus(&cfg.generator, cfg.seed)?;
    for p in [cfg.paths.corpus(), cfg.paths.features(), cfg.paths.split()] {
        parent_dir(&p)?;
    }
    write_corpus(&cfg.paths.corpus(), &corpus.recipes)?;
    corpus.features.write(&cfg.paths.features())?;
    corpus.split.write(&cfg.paths.split())?;
    println!(
        "generated {} recipes in {} classes (D={}) into {}",
        corpus.recipes.len(),
        cfg.generator.num_classes,
        cfg.generator.feature_dim,
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_preprocess(cfg: &RunConfig) -> Result<ExitCode> {
    let corpus_path = cfg.paths.corpus();
    require_file(&corpus_path, "paths.corpus")?;
    let report = load_corpus(&corpus_path)?;
    for e in &report.errors {
        eprintln!(
            "warning: {}:{}: `{}`: {}",
            corpus_path.display(),
            e.line,
            e.field,
            e.message
        );
    }
    let pre = preprocess(&report.recipes, cfg.min_freq, cfg.shape.p)?;
    for (id, reason) in &pre.rejected {
        eprintln!("rejected {id}: {reason}");
    }
    let (tok, voc) = (cfg.paths.tokenized(), cfg.paths.vocab());
    parent_dir(&tok)?;
    parent_dir(&voc)?;
    write_tokenized(&tok, &pre.recipes)?;
    pre.vocab.write(&voc)?;
    println!(
        "encoded {} recipes ({} rejected, {} malformed), vocabulary {} tokens",
        pre.recipes.len(),
        pre.rejected.len(),
        report.errors.len(),
        pre.vocab.len()
    );
    Ok(ExitCode::SUCCESS)
}

struct Data {
    vocab: Vocabulary,
    recipes: Vec<TokenizedRecipe>,
    features: FeatureStore,
    split: CorpusSplit,
}

impl Data {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let p = &cfg.paths;
        for (path, key) in [
            (p.tokenized(), "paths.tokenized"),
            (p.vocab(), "paths.vocab"),
            (p.features(), "paths.features"),
            (p.split(), "paths.split"),
        ] {
            require_file(&path, key)?;
        }
        Ok(Self {
            vocab: Vocabulary::read(&p.vocab())?,
            recipes: load_tokenized(&p.tokenized())?,
            features: FeatureStore::read(&p.features())?,
            split: CorpusSplit::read(&p.split())?,
        })
    }

    /// Split members that survived preprocessing, in split order.
    fn part(&self, which: SplitArg) -> Result<Vec<TokenizedRecipe>> {
        let ids: Vec<String> = match which {
            SplitArg::Train => self.split.train.clone(),
            SplitArg::Validation => self.split.validation.clone(),
            SplitArg::Test => self.split.test.clone(),
            SplitArg::All => return Ok(self.recipes.clone()),
        };
        let present: HashSet<&str> = self.recipes.iter().map(|r| r.id.as_str()).collect();
        let ids: Vec<String> = ids
            .into_iter()
            .filter(|id| present.contains(id.as_str()))
            .collect();
        Ok(select(&self.recipes, &ids)?)
    }
}

fn load_checkpoint<T: Scalar>(cfg: &RunConfig) -> Result<Model<T>> {
    let path = cfg.paths.checkpoint();
    require_file(&path, "paths.checkpoint")?;
    let model = match Model::<f64>::stored_precision(&path)? {
        Precision::F64 => Model::<f64>::load(&path)?.cast(),
        Precision::F32 => Model::<f32>::load(&path)?.cast(),
    };
    Ok(model)
}

fn cmd_train<T: Scalar>(cfg: &RunConfig) -> Result<ExitCode> {
    let data = Data::load(cfg)?;
    let train_set = data.part(SplitArg::Train)?;
    let validation = data.part(SplitArg::Validation)?;
    let num_classes = cfg.loss.num_classes;
    if let Some(r) = data.recipes.iter().find(|r| r.class_id >= num_classes) {
        bail!(
            "invalid configuration `loss.num_classes`: recipe {} has class {}",
            r.id,
            r.class_id
        );
    }
    let model_cfg = ModelConfig {
        shape: cfg.shape.clone(),
        feature_dim: data.features.dim(),
        num_classes,
    };
    let mut model = Model::<T>::new(model_cfg, data.vocab.clone(), cfg.seed)?;
    let sentences: Vec<Vec<usize>> = train_set
        .iter()
        .flat_map(|r| {
            (0..r.num_instructions())
                .map(|i| r.instruction(i).to_vec())
                .chain(r.ingredient_tokens.iter().cloned())
                .collect::<Vec<_>>()
        })
        .collect();
    let table = pretrain_word_embeddings::<T>(
        &sentences,
        data.vocab.len(),
        cfg.shape.w,
        &cfg.skipgram,
        cfg.seed,
    )?;
    model.set_word_embeddings(&table.matrix)?;

    let log_path = cfg.paths.train_log();
    parent_dir(&log_path)?;
    let mut log = BufWriter::new(
        File::create(&log_path).with_context(|| format!("cannot create {}", log_path.display()))?,
    );
    let mut log_err = None;
    let td = TrainingData {
        train: &train_set,
        validation: &validation,
        features: &data.features,
    };
    let summary = train(&mut model, td, &cfg.train, &cfg.loss, &mut |rec, _| {
        println!(
            "epoch {:3} {:15} lr {:.3e} loss {:.5} val MedR {}",
            rec.epoch,
            rec.stage.as_str(),
            rec.lr,
            rec.loss,
            rec.val_medr
        );
        if let Err(e) = serde_json::to_writer(&mut log, rec)
            .map_err(anyhow::Error::from)
            .and_then(|_| Ok(writeln!(log)?))
        {
            log_err.get_or_insert(e);
        }
    });
    let ckpt = cfg.paths.checkpoint();
    match summary {
        Ok(s) => {
            if let Some(e) = log_err {
                return Err(e.context(format!("cannot write {}", log_path.display())));
            }
            log.flush()?;
            model.save(&ckpt)?;
            println!(
                "trained {} epochs ({} switches); validation MedR {} -> {} (best {}{})",
                s.epochs,
                s.switches_done,
                s.initial_val_medr,
                s.final_val_medr,
                s.best_val_medr,
                if s.restored_best { ", restored" } else { "" }
            );
            println!("checkpoint {}\nlog {}", ckpt.display(), log_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            log.flush()?;
            model.save(&ckpt)?;
            Err(anyhow::Error::from(e).context(format!(
                "training aborted; last good parameters in {}",
                ckpt.display()
            )))
        }
    }
}

fn print_report(report: &RetrievalReport, path: &Path) {
    println!(
        "MedR {:.1} ± {:.1} (std. dev. over {} subsets of {})",
        report.medr_mean,
        report.medr_std_dev,
        report.medr_per_subset.len(),
        report.queries_per_subset
    );
    for r in &report.recall {
        println!("R@{} {:.3}", r.k, r.mean);
    }
    println!("report {}", path.display());
}

fn write_report(cfg: &RunConfig, mut report: RetrievalReport) -> Result<ExitCode> {
    report.run_config = Some(cfg.to_json());
    let path = cfg.paths.report();
    parent_dir(&path)?;
    report.write(&path)?;
    print_report(&report, &path);
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval<T: Scalar>(cfg: &RunConfig) -> Result<ExitCode> {
    let model = load_checkpoint::<T>(cfg)?;
    let data = Data::load(cfg)?;
    let test = data.part(SplitArg::Test)?;
    let report = evaluate(&model, &test, &data.features, &cfg.eval)?;
    write_report(cfg, report)
}

fn cmd_eval_oracle(cfg: &RunConfig) -> Result<ExitCode> {
    let data = Data::load(cfg)?;
    let test = data.part(SplitArg::Test)?;
    let oracle = PairedFeatureOracle {
        features: &data.features,
    };
    let report = evaluate(&oracle, &test, &data.features, &cfg.eval)?;
    write_report(cfg, report)
}

fn cmd_export_attention(cfg: &RunConfig, recipe_id: &str) -> Result<ExitCode> {
    let model = load_checkpoint::<f64>(cfg)?;
    let data = Data::load(cfg)?;
    let recipe = data
        .recipes
        .iter()
        .find(|r| r.id == recipe_id)
        .with_context(|| format!("unknown recipe id `{recipe_id}`"))?;
    let dump = export_attention(&model, recipe)?;
    ensure_dir(&cfg.paths.run_dir)?;
    let path = cfg.paths.run_dir.join(format!("attention_{recipe_id}.tsv"));
    dump.write(&path)?;
    println!(
        "{} tokens x {} attention rows -> {}",
        dump.tokens.len(),
        dump.weights.len(),
        path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_export_embeddings(cfg: &RunConfig, split: SplitArg, top: Option<usize>) -> Result<ExitCode> {
    let model = load_checkpoint::<f64>(cfg)?;
    let data = Data::load(cfg)?;
    let recipes = data.part(split)?;
    let classes = top.map(|k| top_classes(&recipes, k));
    let table = export_embeddings(&model, &recipes, &data.features, classes.as_deref())?;
    ensure_dir(&cfg.paths.run_dir)?;
    let name = match split {
        SplitArg::Train => "train",
        SplitArg::Validation => "validation",
        SplitArg::Test => "test",
        SplitArg::All => "all",
    };
    let path = cfg.paths.run_dir.join(format!("embeddings_{name}.tsv"));
    table.write(&path)?;
    println!(
        "{} rows x {} dims -> {}",
        table.rows.len(),
        table.dim,
        path.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Runs on an in-memory synthetic corpus so it needs no files.
fn cmd_gradcheck(cfg: &RunConfig) -> Result<ExitCode> {
    let spec = GeneratorSpec {
        recipes_per_class: cfg.generator.recipes_per_class.min(10),
        ..cfg.generator.clone()
    };
    let corpus = generate_synthetic_corpus(&spec, cfg.seed)?;
    let pre = preprocess(&corpus.recipes, 1, cfg.shape.p)?;
    let model_cfg = ModelConfig {
        shape: cfg.shape.clone(),
        feature_dim: spec.feature_dim,
        num_classes: spec.num_classes,
    };
    let model = Model::<f64>::new(model_cfg, pre.vocab.clone(), cfg.seed)?;
    let loss = recipe_retrieval::objectives::LossConfig {
        num_classes: spec.num_classes,
        ..cfg.loss.clone()
    };
    let data = TrainingData {
        train: &pre.recipes,
        validation: &pre.recipes,
        features: &corpus.features,
    };
    let report = model_gradient_check(&model, &data, &loss, &cfg.gradcheck)?;
    let worst = report.worst().map_or("-", |e| e.name.as_str());
    println!(
        "{} max relative error {:.3e} (tolerance {:.0e}, {} tensors, worst {})",
        if report.passed { "PASS" } else { "FAIL" },
        report.max_rel_error,
        report.tolerance,
        report.entries.len(),
        worst
    );
    if cfg.paths.report.is_some() || cfg.paths.run_dir != config::Paths::default().run_dir {
        ensure_dir(&cfg.paths.run_dir)?;
        let path = cfg.paths.run_dir.join("gradcheck.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
        println!("report {}", path.display());
    }
    Ok(if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}
