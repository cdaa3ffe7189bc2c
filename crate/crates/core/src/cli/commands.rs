//! Subcommand bodies.

use std::path::{Path, PathBuf};

use super::*;
use crate::annotation::{serve, ServeConfig};
use crate::baselines::{
    frozen_encoder_baseline, pretrain_static_embeddings, train_linear_baseline, LogisticConfig, SkipGramConfig,
    StaticEmbeddingTable,
};
use crate::checkpoint::Checkpoint;
use crate::corpus::{
    generate_with_provenance, read_corpus, split_by_patient, write_corpus, GeneratorSpec, Report, Split,
};
use crate::encoder::EncoderConfig;
use crate::head::HeadConfig;
use crate::metrics::{render_table, EvalReport};
use crate::model::{examples, Example, ModelConfig, ReportClassifier, Representation, Task};
use crate::projection::{
    embed_reports, project, source_label, write_points, ProjectionConfig, ReportVector, Stage, StageArtifacts,
};
use crate::tokenizer::Vocabulary;
use crate::trainer::{evaluate, evaluate_per_category, gradient_check, train, TrainConfig};

pub const DEFAULT_CORPUS: &str = "data/corpus.jsonl";
pub const DEFAULT_SPLIT: &str = "data/split";
pub const DEFAULT_TRAIN: &str = "runs/train";
pub const DEFAULT_EVALUATE: &str = "runs/eval";
pub const DEFAULT_BASELINE: &str = "runs/baseline";
pub const DEFAULT_PROJECT: &str = "runs/projections";
pub const DEFAULT_ATTENTION: &str = "runs/attention.jsonl";
pub const DEFAULT_LOG: &str = "runs/annotations.jsonl";

pub fn dispatch(command: Command, ctx: &mut RunContext) -> Result<()> {
    match command {
        Command::Generate(a) => generate(a, ctx),
        Command::Split(a) => split(a, ctx),
        Command::Train(a) => train_cmd(a, ctx),
        Command::Evaluate(a) => evaluate_cmd(a, ctx),
        Command::Baseline(a) => baseline(a, ctx),
        Command::Project(a) => project_cmd(a, ctx),
        Command::Serve(a) => serve_cmd(a, ctx),
        Command::Gradcheck(a) => gradcheck(a, ctx),
        Command::ExportAttention(a) => export_attention(a, ctx),
    }
}

fn parse_task(s: &str) -> Result<Task> {
    match s {
        "coarse" => Ok(Task::Coarse),
        "granular" => Ok(Task::Granular),
        other => Err(Error::Config(format!(
            "unknown task {other:?} (expected coarse or granular)"
        ))),
    }
}

fn parse_stage(s: &str) -> Result<Stage> {
    match s {
        "pre-finetune" | "pre" => Ok(Stage::PreFinetune),
        "post-finetune" | "post" => Ok(Stage::PostFinetune),
        "word2vec" => Ok(Stage::Word2vec),
        other => Err(Error::Config(format!(
            "unknown stage {other:?} (expected pre-finetune, post-finetune or word2vec)"
        ))),
    }
}

fn parse_fractions(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("bad fractions {s:?}: {e}")))?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("expected three comma-separated fractions, got {s:?}")))
}

fn save_text(ctx: &mut RunContext, path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    ctx.output(path);
    Ok(())
}

fn save_checkpoint(ctx: &mut RunContext, ck: &Checkpoint, path: &Path) -> Result<()> {
    ck.save(path)?;
    ctx.output(path);
    Ok(())
}

fn load_model(ctx: &mut RunContext, path: &Path) -> Result<ReportClassifier> {
    ctx.input(path);
    ReportClassifier::from_checkpoint(&Checkpoint::load(path)?)
}

fn load_vocab(ctx: &mut RunContext, path: &Path) -> Result<Vocabulary> {
    ctx.input(path);
    Vocabulary::load(path)
}

fn load_reports(ctx: &mut RunContext, path: &Path) -> Result<Vec<Report>> {
    ctx.input(path);
    read_corpus(path)
}

fn load_split(ctx: &mut RunContext, dir: &Path) -> Result<Split> {
    ctx.input(dir);
    Split::load(dir)
}

fn generate(a: GenerateArgs, ctx: &mut RunContext) -> Result<()> {
    let defaults = GeneratorSpec::default();
    let spec = GeneratorSpec {
        n_reports: ctx.resolve(a.n, "n", defaults.n_reports)?,
        abnormal_fraction: ctx.resolve(a.abnormal_fraction, "abnormal_fraction", defaults.abnormal_fraction)?,
        negation_rate: ctx.resolve(a.negation_rate, "negation_rate", defaults.negation_rate)?,
        reports_per_patient: ctx.resolve(None, "reports_per_patient", defaults.reports_per_patient)?,
        seed: ctx.seed("generate", defaults.seed)?,
    };
    ctx.hash_config(&spec)?;
    let out = ctx.resolve(a.out, "out", PathBuf::from(DEFAULT_CORPUS))?;
    let generated = generate_with_provenance(&spec)?;
    write_corpus(&out, &generated.reports)?;
    ctx.output(&out);
    if let Some(p) = ctx.resolve_opt(a.provenance, "provenance")? {
        crate::jsonl::write(&p, &generated.provenance)?;
        ctx.output(&p);
    }
    let abnormal = generated.reports.iter().filter(|r| r.coarse_label == Some(1)).count();
    println!(
        "wrote {} reports ({abnormal} abnormal) to {}",
        generated.reports.len(),
        out.display()
    );
    Ok(())
}

fn split(a: SplitArgs, ctx: &mut RunContext) -> Result<()> {
    let corpus = ctx.resolve(a.corpus, "corpus", PathBuf::from(DEFAULT_CORPUS))?;
    let fractions = parse_fractions(&ctx.resolve(a.fractions, "fractions", "0.75,0.10,0.15".to_string())?)?;
    let out = ctx.resolve(a.out, "out", PathBuf::from(DEFAULT_SPLIT))?;
    let seed = ctx.seed("split", 7)?;
    ctx.hash_config(&(fractions, seed))?;
    let reports = load_reports(ctx, &corpus)?;
    let split = split_by_patient(&reports, fractions, seed)?;
    let manifest = split.manifest(seed, fractions, Some(corpus.display().to_string()));
    split.save(&out, &manifest)?;
    for f in manifest
        .files
        .iter()
        .chain(std::iter::once(&"manifest.json".to_string()))
    {
        ctx.output(&out.join(f));
    }
    let [tr, va, te] = split.sizes();
    println!("split sizes: train {tr}, validation {va}, test {te}");
    Ok(())
}

struct Geometry {
    d_model: Option<usize>,
    layers: Option<usize>,
    heads: Option<usize>,
    ffn: Option<usize>,
    max_len: Option<usize>,
    dropout: Option<f64>,
}

fn fresh_model(ctx: &RunContext, g: Geometry, vocab: &Vocabulary, task: Task, seed: u64) -> Result<ReportClassifier> {
    let base = EncoderConfig::desk(vocab.len());
    let d_model = ctx.resolve(g.d_model, "d_model", base.d_model)?;
    let encoder = EncoderConfig {
        vocab_size: vocab.len(),
        d_model,
        n_layers: ctx.resolve(g.layers, "layers", base.n_layers)?,
        n_heads: ctx.resolve(g.heads, "heads", base.n_heads)?,
        ffn_width: ctx.resolve(g.ffn, "ffn", 4 * d_model)?,
        max_len: ctx.resolve(g.max_len, "max_len", base.max_len)?,
        dropout_rate: ctx.resolve(g.dropout, "dropout", base.dropout_rate)?,
        seed,
    };
    let mut config = ModelConfig::desk(vocab.len(), task, seed);
    config.head = HeadConfig::scaled(d_model, task.n_outputs(), config.head.seed);
    config.encoder = encoder;
    ReportClassifier::new(config)
}

fn train_config(
    ctx: &RunContext,
    epochs: Option<usize>,
    lr: Option<f64>,
    lr_decay: Option<f64>,
    batch_size: Option<usize>,
    freeze: Option<bool>,
    seed: u64,
) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        epochs: ctx.resolve(epochs, "epochs", d.epochs)?,
        lr0: ctx.resolve(lr, "lr", d.lr0)?,
        lr_decay: ctx.resolve(lr_decay, "lr_decay", d.lr_decay)?,
        batch_size: ctx.resolve(batch_size, "batch_size", d.batch_size)?,
        adam: d.adam,
        seed,
        freeze_encoder: ctx.resolve(freeze, "freeze_encoder", false)?,
    })
}

/// Vocabulary from `--vocab`, or built from the train partition.
fn vocab_for(
    ctx: &mut RunContext,
    vocab: Option<PathBuf>,
    min_freq: Option<usize>,
    split: &Split,
) -> Result<Vocabulary> {
    match ctx.resolve_opt(vocab, "vocab")? {
        Some(p) => load_vocab(ctx, &p),
        None => Vocabulary::build(&split.train, ctx.resolve(min_freq, "min_freq", 1)?),
    }
}

fn train_cmd(a: TrainArgs, ctx: &mut RunContext) -> Result<()> {
    let split_dir = ctx.resolve(a.split, "split", PathBuf::from(DEFAULT_SPLIT))?;
    let out = ctx.resolve(a.out, "out", PathBuf::from(DEFAULT_TRAIN))?;
    let task = parse_task(&ctx.resolve(a.task, "task", "coarse".to_string())?)?;
    let per_category = ctx.resolve(a.per_category, "per_category", false)?;
    let seed = ctx.seed("train", 42)?;
    let cfg = train_config(ctx, a.epochs, a.lr, a.lr_decay, a.batch_size, a.freeze_encoder, seed)?;
    cfg.validate()?;
    let split = load_split(ctx, &split_dir)?;
    let init = ctx.resolve_opt(a.init, "init")?;
    if init.is_some() && ctx.resolve_opt(a.vocab.clone(), "vocab")?.is_none() {
        return Err(Error::Config("--init needs the matching --vocab".into()));
    }
    let vocab = vocab_for(ctx, a.vocab, a.min_freq, &split)?;
    let geometry = Geometry {
        d_model: a.d_model,
        layers: a.layers,
        heads: a.heads,
        ffn: a.ffn,
        max_len: a.max_len,
        dropout: a.dropout,
    };
    let make = |ctx: &mut RunContext, task: Task| -> Result<ReportClassifier> {
        match &init {
            Some(p) => {
                let m = load_model(ctx, p)?;
                if m.config.task != task {
                    return Err(Error::Config(format!(
                        "checkpoint task {:?} does not match requested task {task:?}",
                        m.config.task
                    )));
                }
                Ok(m)
            }
            None => fresh_model(
                ctx,
                Geometry {
                    ..geometry_clone(&geometry)
                },
                &vocab,
                task,
                seed,
            ),
        }
    };

    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let vocab_path = out.join("vocab.txt");
    vocab.save(&vocab_path)?;
    ctx.output(&vocab_path);

    let jobs: Vec<(Task, String)> = if per_category {
        if task != Task::Granular {
            return Err(Error::Config("--per-category requires --task granular".into()));
        }
        (0..5).map(|i| (Task::Category(i), format!("-{i}"))).collect()
    } else {
        vec![(task, String::new())]
    };
    for (task, suffix) in jobs {
        let model = make(ctx, task)?;
        ctx.hash_config(&serde_json::json!({ "model": model.config, "train": cfg }))?;
        save_checkpoint(ctx, &model.to_checkpoint()?, &out.join(format!("initial{suffix}.ckpt")))?;
        let (trained, history) = train(model, &split, &vocab, &cfg)?;
        save_checkpoint(ctx, &trained.to_checkpoint()?, &out.join(format!("model{suffix}.ckpt")))?;
        let hist = out.join(format!("history{suffix}.jsonl"));
        history.save(&hist)?;
        ctx.output(&hist);
        for e in &history.epochs {
            println!(
                "{}epoch {} lr {:.6e} train loss {:.4} validation loss {:.4} accuracy {:.3}",
                if suffix.is_empty() {
                    String::new()
                } else {
                    format!("[{}] ", task.output_names()[0])
                },
                e.epoch + 1,
                e.learning_rate,
                e.train_loss,
                e.validation_loss,
                e.validation_accuracy
            );
        }
        println!("kept epoch {}", history.best_epoch + 1);
    }
    Ok(())
}

fn geometry_clone(g: &Geometry) -> Geometry {
    Geometry {
        d_model: g.d_model,
        layers: g.layers,
        heads: g.heads,
        ffn: g.ffn,
        max_len: g.max_len,
        dropout: g.dropout,
    }
}

fn write_reports(ctx: &mut RunContext, out: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut table = String::new();
    let mut i = 0;
    while i < reports.len() {
        let names: Vec<_> = reports[i].tasks.iter().map(|t| &t.task).collect();
        let mut j = i + 1;
        while j < reports.len() && reports[j].tasks.iter().map(|t| &t.task).collect::<Vec<_>>() == names {
            j += 1;
        }
        if !table.is_empty() {
            table.push('\n');
        }
        table.push_str(&render_table(&reports[i..j]));
        i = j;
    }
    let mut records = String::new();
    for r in reports {
        records.push_str(&r.to_records()?);
    }
    save_text(ctx, &out.join("table.txt"), &table)?;
    save_text(ctx, &out.join("metrics.jsonl"), &records)?;
    print!("{table}");
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs, ctx: &mut RunContext) -> Result<()> {
    let models: Vec<PathBuf> = if a.models.is_empty() {
        ctx.resolve(None, "model", vec![Path::new(DEFAULT_TRAIN).join("model.ckpt")])?
    } else {
        a.models
    };
    let vocab_path = ctx.resolve(a.vocab, "vocab", Path::new(DEFAULT_TRAIN).join("vocab.txt"))?;
    let reports_path = ctx.resolve(a.reports, "reports", Path::new(DEFAULT_SPLIT).join("test.jsonl"))?;
    let out = ctx.resolve(a.out, "out", PathBuf::from(DEFAULT_EVALUATE))?;
    let name = ctx.resolve_opt(a.name, "name")?;
    ctx.seed("evaluate", 0)?;
    let vocab = load_vocab(ctx, &vocab_path)?;
    let reports = load_reports(ctx, &reports_path)?;
    let loaded: Vec<ReportClassifier> = models.iter().map(|p| load_model(ctx, p)).collect::<Result<_>>()?;
    ctx.hash_config(&loaded.iter().map(|m| &m.config).collect::<Vec<_>>())?;

    let stem = |p: &Path| {
        p.file_stem()
            .map_or("model".to_string(), |s| s.to_string_lossy().into_owned())
    };
    let all_categories = loaded.len() > 1 && loaded.iter().all(|m| matches!(m.config.task, Task::Category(_)));
    let results = if all_categories {
        let name = name.unwrap_or_else(|| "independent".into());
        vec![evaluate_per_category(&loaded, &reports, &vocab, &name)?]
    } else {
        loaded
            .iter()
            .zip(&models)
            .map(|(m, p)| {
                let n = match (&name, loaded.len()) {
                    (Some(n), 1) => n.clone(),
                    (Some(n), _) => format!("{n}-{}", stem(p)),
                    (None, _) => stem(p),
                };
                evaluate(m, &reports, &vocab, &n)
            })
            .collect::<Result<_>>()?
    };
    write_reports(ctx, &out, &results)
}

fn baseline(a: BaselineArgs, ctx: &mut RunContext) -> Result<()> {
    let kind = ctx.resolve(a.kind, "kind", "linear".to_string())?;
    let split_dir = ctx.resolve(a.split, "split", PathBuf::from(DEFAULT_SPLIT))?;
    let out = ctx.resolve(a.out, "out", PathBuf::from(DEFAULT_BASELINE))?;
    let task = parse_task(&ctx.resolve(a.task, "task", "coarse".to_string())?)?;
    let split = load_split(ctx, &split_dir)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    match kind.as_str() {
        "linear" => {
            let d = SkipGramConfig::default();
            let sg = SkipGramConfig {
                dim: ctx.resolve(a.dim, "dim", d.dim)?,
                window: ctx.resolve(a.window, "window", d.window)?,
                negatives: ctx.resolve(a.negatives, "negatives", d.negatives)?,
                epochs: ctx.resolve(a.embedding_epochs, "embedding_epochs", d.epochs)?,
                learning_rate: d.learning_rate,
                seed: ctx.seed("skipgram", d.seed)?,
            };
            let lc = LogisticConfig {
                epochs: ctx.resolve(a.steps, "steps", LogisticConfig::default().epochs)?,
                ..Default::default()
            };
            ctx.hash_config(&(&sg, &lc, task))?;
            let vocab = vocab_for(ctx, a.vocab, a.min_freq, &split)?;
            let table = pretrain_static_embeddings(&split.train, &vocab, &sg)?;
            let (linear, report) = train_linear_baseline(&split, &table, &vocab, task, &lc, None)?;
            let vocab_path = out.join("vocab.txt");
            vocab.save(&vocab_path)?;
            ctx.output(&vocab_path);
            save_checkpoint(ctx, &table.to_checkpoint()?, &out.join("embeddings.ckpt"))?;
            save_checkpoint(ctx, &linear.to_checkpoint()?, &out.join("linear.ckpt"))?;
            write_reports(ctx, &out, &[report])
        }
        "frozen" => {
            let seed = ctx.seed("train", 42)?;
            let cfg = train_config(ctx, a.epochs, a.lr, a.lr_decay, a.batch_size, Some(true), seed)?;
            let init = ctx.resolve_opt(a.init, "init")?;
            let vocab = vocab_for(ctx, a.vocab, a.min_freq, &split)?;
            let model = match init {
                Some(p) => load_model(ctx, &p)?,
                None => fresh_model(
                    ctx,
                    Geometry {
                        d_model: None,
                        layers: None,
                        heads: None,
                        ffn: None,
                        max_len: None,
                        dropout: None,
                    },
                    &vocab,
                    task,
                    seed,
                )?,
            };
            ctx.hash_config(&serde_json::json!({ "model": model.config, "train": cfg }))?;
            let (trained, report) = frozen_encoder_baseline(model, &split, &vocab, &cfg)?;
            let vocab_path = out.join("vocab.txt");
            vocab.save(&vocab_path)?;
            ctx.output(&vocab_path);
            save_checkpoint(ctx, &trained.to_checkpoint()?, &out.join("frozen.ckpt"))?;
            write_reports(ctx, &out, &[report])
        }
        other => Err(Error::Config(format!(
            "unknown baseline kind {other:?} (expected linear or frozen)"
        ))),
    }
}

fn project_cmd(a: ProjectArgs, ctx: &mut RunContext) -> Result<()> {
    let stage = parse_stage(&ctx.resolve(a.stage, "stage", "post-finetune".to_string())?)?;
    let representation = match ctx
        .resolve(a.representation, "representation", "pooled".to_string())?
        .as_str()
    {
        "pooled" => Representation::Pooled,
        "cls" => Representation::Cls,
        other => return Err(Error::Config(format!("unknown representation {other:?}"))),
    };
    let d = ProjectionConfig::default();
    let cfg = ProjectionConfig {
        perplexity: ctx.resolve(a.perplexity, "perplexity", d.perplexity)?,
        iterations: ctx.resolve(a.iterations, "iterations", d.iterations)?,
        learning_rate: ctx.resolve(a.learning_rate, "learning_rate", d.learning_rate)?,
        seed: ctx.seed("projection", d.seed)?,
        ..d
    };
    ctx.hash_config(&(&cfg, stage, representation))?;
    let reports_path = ctx.resolve(a.reports, "reports", Path::new(DEFAULT_SPLIT).join("test.jsonl"))?;
    let vocab_path = ctx.resolve(a.vocab, "vocab", Path::new(DEFAULT_TRAIN).join("vocab.txt"))?;
    let out = ctx.resolve(a.out, "out", PathBuf::from(DEFAULT_PROJECT))?;
    let id = ctx.resolve(
        a.id,
        "id",
        match stage {
            Stage::PreFinetune => "pre-finetune",
            Stage::PostFinetune => "post-finetune",
            Stage::Word2vec => "word2vec",
        }
        .to_string(),
    )?;
    let reports = load_reports(ctx, &reports_path)?;
    let vocab = load_vocab(ctx, &vocab_path)?;

    let require = |p: PathBuf, what: &str| -> Result<PathBuf> {
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::NotFound(format!("{what} {} for stage {stage:?}", p.display())))
        }
    };
    let (model, table) = match stage {
        Stage::PreFinetune | Stage::PostFinetune => {
            let default = Path::new(DEFAULT_TRAIN).join(if stage == Stage::PreFinetune {
                "initial.ckpt"
            } else {
                "model.ckpt"
            });
            let p = require(ctx.resolve(a.model, "model", default)?, "checkpoint")?;
            (Some(load_model(ctx, &p)?), None)
        }
        Stage::Word2vec => {
            let p = require(
                ctx.resolve(
                    a.embeddings,
                    "embeddings",
                    Path::new(DEFAULT_BASELINE).join("embeddings.ckpt"),
                )?,
                "embedding table",
            )?;
            ctx.input(&p);
            (
                None,
                Some(StaticEmbeddingTable::from_checkpoint(&Checkpoint::load(&p)?)?),
            )
        }
    };
    let artifacts = StageArtifacts {
        pre: model.as_ref().filter(|_| stage == Stage::PreFinetune),
        post: model.as_ref().filter(|_| stage == Stage::PostFinetune),
        table: table.as_ref(),
    };
    let vectors = embed_reports(artifacts, stage, &reports, &vocab, representation)?;
    let probs: Vec<Option<f64>> = match &model {
        Some(m) => {
            let seqs: Vec<_> = reports.iter().map(|r| vocab.encode(&r.text, m.max_len())).collect();
            let refs: Vec<_> = seqs.iter().collect();
            m.predict(&refs)?.into_iter().map(|p| Some(p.probs[0])).collect()
        }
        None => vec![None; reports.len()],
    };
    let items: Vec<ReportVector> = reports
        .iter()
        .zip(vectors.outer_iter())
        .zip(probs)
        .map(|((r, v), p)| ReportVector {
            report_id: r.report_id.clone(),
            vector: v.to_vec(),
            label: source_label(r),
            predicted_prob: p,
        })
        .collect();
    let points = project(&items, &cfg)?;
    let path = out.join(format!("{id}.jsonl"));
    write_points(&path, &points)?;
    ctx.output(&path);
    println!("projected {} reports to {}", points.len(), path.display());
    Ok(())
}

fn serve_cmd(a: ServeArgs, ctx: &mut RunContext) -> Result<()> {
    let cfg = ServeConfig {
        host: ctx.resolve(a.host, "host", "127.0.0.1".to_string())?,
        port: ctx.resolve(a.port, "port", 8080)?,
        corpus: ctx.resolve(a.corpus, "corpus", PathBuf::from(DEFAULT_CORPUS))?,
        projections: ctx.resolve(a.projections, "projections", PathBuf::from(DEFAULT_PROJECT))?,
        attention: ctx.resolve_opt(a.attention, "attention")?,
        log: ctx.resolve(a.log, "log", PathBuf::from(DEFAULT_LOG))?,
    };
    ctx.seed("serve", 0)?;
    ctx.hash_config(&cfg)?;
    ctx.input(&cfg.corpus);
    ctx.input(&cfg.projections);
    if let Some(p) = &cfg.attention {
        ctx.input(p);
    }
    ctx.output(&cfg.log);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    runtime.block_on(serve(cfg, |addr| println!("listening on http://{addr}"), async {
        let _ = tokio::signal::ctrl_c().await;
    }))
}

/// A deterministic tiny labelled batch for the gradient check.
fn gradcheck_batch(n: usize, max_len: usize, seed: u64) -> Result<(Vocabulary, Vec<Example>)> {
    let reports = crate::corpus::generate_corpus(&GeneratorSpec {
        n_reports: n,
        seed,
        ..Default::default()
    })?;
    let vocab = Vocabulary::build(&reports, 1)?;
    let data = examples(&reports, &vocab, max_len, Task::Coarse)?;
    Ok((vocab, data))
}

fn gradcheck(a: GradcheckArgs, ctx: &mut RunContext) -> Result<()> {
    let d_model = ctx.resolve(a.d_model, "d_model", 8)?;
    let max_len = ctx.resolve(a.max_len, "max_len", 5)?;
    let n = ctx.resolve(a.reports, "reports", 2)?;
    let step = ctx.resolve(a.step, "step", 1e-4)?;
    let tolerance = ctx.resolve(a.tolerance, "tolerance", 1e-4)?;
    let frozen = ctx.resolve(a.freeze_encoder, "freeze_encoder", false)?;
    let seed = ctx.seed("gradcheck", 1)?;
    let (vocab, data) = gradcheck_batch(n, max_len, seed)?;
    let config = ModelConfig {
        encoder: EncoderConfig {
            vocab_size: vocab.len(),
            d_model,
            n_layers: 2,
            n_heads: 2,
            ffn_width: 4 * d_model,
            max_len,
            dropout_rate: 0.0,
            seed,
        },
        head: HeadConfig::scaled(d_model, 1, seed + 2),
        ..ModelConfig::desk(vocab.len(), Task::Coarse, seed)
    };
    ctx.hash_config(&(&config, step, frozen))?;
    let model = ReportClassifier::new(config)?.set_frozen(frozen);
    let batch: Vec<&Example> = data.iter().collect();
    let started = std::time::Instant::now();
    let report = gradient_check(&model, &batch, step)?;
    for g in &report.groups {
        println!(
            "{:<40} analytic {:.3e} numeric {:.3e} rel {:.2e}{}",
            g.name,
            g.analytic_norm,
            g.numeric_norm,
            g.relative_error,
            if g.frozen { " (frozen)" } else { "" }
        );
    }
    println!(
        "max relative error {:.3e} over {} groups in {:.2?}",
        report.max_relative_error,
        report.groups.len(),
        started.elapsed()
    );
    if let Some(p) = ctx.resolve_opt(a.out, "out")? {
        save_text(ctx, &p, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    if report.max_relative_error >= tolerance {
        return Err(Error::Evaluation(format!(
            "gradient check failed: max relative error {:.3e} >= {tolerance:e}",
            report.max_relative_error
        )));
    }
    Ok(())
}

fn export_attention(a: ExportAttentionArgs, ctx: &mut RunContext) -> Result<()> {
    let model_path = ctx.resolve(a.model, "model", Path::new(DEFAULT_TRAIN).join("model.ckpt"))?;
    let vocab_path = ctx.resolve(a.vocab, "vocab", Path::new(DEFAULT_TRAIN).join("vocab.txt"))?;
    let reports_path = ctx.resolve(a.reports, "reports", Path::new(DEFAULT_SPLIT).join("test.jsonl"))?;
    let out = ctx.resolve(a.out, "out", PathBuf::from(DEFAULT_ATTENTION))?;
    ctx.seed("export_attention", 0)?;
    let model = load_model(ctx, &model_path)?;
    ctx.hash_config(&model.config)?;
    let vocab = load_vocab(ctx, &vocab_path)?;
    let reports = load_reports(ctx, &reports_path)?;
    let records = reports
        .iter()
        .map(|r| model.attention_record(&r.report_id, &vocab.encode(&r.text, model.max_len()), &vocab))
        .collect::<Result<Vec<_>>>()?;
    crate::jsonl::write(&out, &records)?;
    ctx.output(&out);
    println!(
        "wrote attention weights for {} reports to {}",
        records.len(),
        out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parsers() {
        assert_eq!(parse_fractions("0.75, 0.10,0.15").unwrap(), [0.75, 0.10, 0.15]);
        assert!(parse_fractions("0.5,0.5").is_err());
        assert!(parse_fractions("a,b,c").is_err());
        assert_eq!(parse_task("granular").unwrap(), Task::Granular);
        assert!(parse_task("fine").is_err());
        assert_eq!(parse_stage("word2vec").unwrap(), Stage::Word2vec);
        assert!(parse_stage("later").is_err());
    }
}
