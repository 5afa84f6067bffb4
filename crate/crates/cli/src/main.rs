//! Command-line entry point: build document trees, answer queries, run
//! evaluations, and inspect saved trees.
//!
//! Exit codes: 0 on success, 1 on a pipeline failure, 2 on a usage or
//! configuration error.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use doctree_core::baseline::{answer_with_strategy, tree_verdict, Strategy, TreeStrategyConfig};
use doctree_core::chunking::{chunk_document, TokenizerSpec};
use doctree_core::eval::{load_dataset, DatasetFormat, ScoreReport};
use doctree_core::reason::{reason, ReasonOptions, ReasonPlan};
use doctree_core::trace::TraceLog;
use doctree_core::tree::{build_full, compress, DocTree};
use doctree_core::Error;

use config::{load_gateways, FileConfig, ResolvedRun};

#[derive(Parser)]
#[command(
    name = "doctree",
    version,
    about = "Hierarchical document trees and map/reduce reasoning over long documents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk a document, parse it, and build (optionally compress) a tree.
    BuildTree(BuildTreeArgs),
    /// Answer a query over a document or a saved tree.
    Answer(AnswerArgs),
    /// Score one or more strategies over a dataset file.
    Eval(EvalArgs),
    /// Render a saved tree as an indented outline.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run-config file (JSON); explicit flags win over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Backend config file (JSON with `chat` and `embed` sections).
    #[arg(long)]
    backend_config: Option<PathBuf>,
    #[arg(long)]
    chunk_size: Option<usize>,
    /// Selection scale for query-aware compression.
    #[arg(long, short = 'k')]
    k: Option<usize>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable pipeline stages: `confidence` or `aggregation`
    /// (comma-separated).
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
}

#[derive(Args)]
struct BuildTreeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Document file to build the tree from.
    #[arg(long)]
    doc: PathBuf,
    /// Query for query-aware compression.
    #[arg(long)]
    query: Option<String>,
    /// Select the top-k chunks by query similarity before building.
    #[arg(long, overrides_with = "no_compress")]
    compress: bool,
    /// Build the full tree over all chunks.
    #[arg(long = "no-compress", overrides_with = "compress")]
    no_compress: bool,
    /// Output tree file.
    #[arg(long, default_value = "tree.json")]
    out_tree: PathBuf,
}

#[derive(Args)]
struct AnswerArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Saved tree file to reason over.
    #[arg(long, conflicts_with = "doc")]
    tree: Option<PathBuf>,
    /// Document file to answer from.
    #[arg(long)]
    doc: Option<PathBuf>,
    #[arg(long)]
    query: String,
    /// Strategy: `tom` (tree map/reduce), `rag`, or `full_doc`.
    #[arg(long, default_value = "tom")]
    strategy: String,
    /// Build the tree without query-aware compression.
    #[arg(long = "no-compress")]
    no_compress: bool,
    /// Trace output file (line-delimited events).
    #[arg(long)]
    out_trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset file (line-delimited records).
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated strategies to score.
    #[arg(long, default_value = "tom", value_delimiter = ',')]
    strategy: Vec<String>,
    /// Report output file (JSON).
    #[arg(long)]
    out_report: Option<PathBuf>,
    /// Trace output file (line-delimited events).
    #[arg(long)]
    out_trace: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// Saved tree file.
    #[arg(long)]
    tree: PathBuf,
}

/// Failures mapped onto process exit codes.
enum CliError {
    /// Bad usage or configuration: exit 2.
    Config(String),
    /// Pipeline failure: exit 1.
    Pipeline(String),
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        match err {
            Error::InvalidConfig(_) | Error::ChunkSizeZero => CliError::Config(err.to_string()),
            other => CliError::Pipeline(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildTree(args) => cmd_build_tree(args),
        Command::Answer(args) => cmd_answer(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Pipeline(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn read_to_string(path: &PathBuf, what: &str) -> CliResult<String> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {what} {}: {e}", path.display())))
}

fn resolve(common: &CommonArgs) -> CliResult<ResolvedRun> {
    let file = match &common.config {
        Some(path) => FileConfig::load(path)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?,
        None => FileConfig::default(),
    };
    let mut run = ResolvedRun::from_file(file);
    if let Some(path) = &common.backend_config {
        run.backend_config = Some(path.clone());
    }
    if let Some(v) = common.chunk_size {
        run.chunk_size = v;
    }
    if let Some(v) = common.k {
        run.k_compress = v;
    }
    if let Some(v) = common.parallelism {
        run.parallelism = v;
    }
    if let Some(v) = common.seed {
        run.seed = v;
    }
    for item in &common.ablate {
        match item.as_str() {
            "confidence" => run.confidence = false,
            "aggregation" => run.aggregation = false,
            "" => {}
            other => {
                return Err(CliError::Config(format!(
                    "unknown --ablate target `{other}` (expected confidence or aggregation)"
                )))
            }
        }
    }
    if run.chunk_size == 0 {
        return Err(CliError::Config("chunk-size must be at least 1".into()));
    }
    if run.parallelism == 0 {
        return Err(CliError::Config("parallelism must be at least 1".into()));
    }
    Ok(run)
}

fn write_trace(trace: &TraceLog, path: &Option<PathBuf>) -> CliResult<()> {
    if let Some(path) = path {
        let file = std::fs::File::create(path)
            .map_err(|e| CliError::Config(format!("cannot write trace {}: {e}", path.display())))?;
        trace
            .finalize()
            .write_jsonl(file)
            .map_err(|e| CliError::Pipeline(e.to_string()))?;
    }
    Ok(())
}

fn cmd_build_tree(args: BuildTreeArgs) -> CliResult<()> {
    let run = resolve(&args.common)?;
    let text = read_to_string(&args.doc, "document")?;
    let (chat, embed, trace) = load_gateways(&run)?;

    let tokenizer = TokenizerSpec::whitespace();
    let chunks =
        chunk_document("doc", &text, run.chunk_size, &tokenizer).map_err(CliError::from)?;
    let aggregate_cfg = run.aggregate_config();

    let use_compression = match (args.compress, args.no_compress) {
        (true, _) => true,
        (_, true) => false,
        _ => run.compression,
    };
    let tree = if use_compression {
        let query = args.query.as_deref().ok_or_else(|| {
            CliError::Config("--compress needs --query for query-aware selection".into())
        })?;
        compress(
            &chunks,
            query,
            run.k_compress,
            run.chunk_size,
            &chat,
            &embed,
            &aggregate_cfg,
        )
        .map_err(CliError::from)?
    } else {
        build_full(&chunks, run.chunk_size, &chat, &embed, &aggregate_cfg)
            .map_err(CliError::from)?
    };

    tree.save(&args.out_tree).map_err(CliError::from)?;
    let calls = trace.finalize().count_calls(None);
    println!(
        "tree written to {} ({} nodes, {} layers, {} model calls)",
        args.out_tree.display(),
        tree.node_count(),
        tree.layers().len(),
        calls,
    );
    Ok(())
}

fn cmd_answer(args: AnswerArgs) -> CliResult<()> {
    let run = resolve(&args.common)?;
    let (chat, embed, trace) = load_gateways(&run)?;
    let options = ReasonOptions {
        confidence_enabled: run.confidence,
        aggregation_enabled: run.aggregation,
        parallelism: run.parallelism,
    };

    if let Some(tree_path) = &args.tree {
        if args.strategy != "tom" && args.strategy != "tree" {
            return Err(CliError::Config(
                "--strategy selects how to answer from --doc; saved trees always use map/reduce"
                    .into(),
            ));
        }
        let tree = DocTree::load(tree_path).map_err(CliError::from)?;
        let plan = ReasonPlan {
            tree: &tree,
            query: args.query.clone(),
            options,
        };
        let (verdict, _) = reason(&plan, &chat).map_err(CliError::from)?;
        println!("{}", verdict.render(true));
        println!("{}", verdict.answer);
    } else {
        let doc_path = args
            .doc
            .as_ref()
            .ok_or_else(|| CliError::Config("answer needs --tree or --doc".into()))?;
        let text = read_to_string(doc_path, "document")?;
        let strategy = resolve_strategy(&args.strategy, &run, args.no_compress)?;
        let cfg = TreeStrategyConfig {
            tokenizer: TokenizerSpec::whitespace(),
            aggregate: run.aggregate_config(),
            reason: options,
        };
        if let Strategy::Tree {
            chunk_size,
            k_compress,
        } = &strategy
        {
            let verdict = tree_verdict(
                &text,
                &args.query,
                *chunk_size,
                *k_compress,
                &cfg,
                &chat,
                &embed,
            )
            .map_err(CliError::from)?;
            println!("{}", verdict.render(true));
            println!("{}", verdict.answer);
        } else {
            let answer = answer_with_strategy(&strategy, &text, &args.query, &cfg, &chat, &embed)
                .map_err(CliError::from)?;
            println!("{answer}");
        }
    }

    write_trace(&trace, &args.out_trace)?;
    Ok(())
}

fn resolve_strategy(name: &str, run: &ResolvedRun, no_compress: bool) -> CliResult<Strategy> {
    let mut strategy = Strategy::from_name(name).map_err(CliError::from)?;
    match &mut strategy {
        Strategy::FullDoc { truncate_tokens } => {
            if let Some(v) = run.truncate_tokens {
                *truncate_tokens = v;
            }
        }
        Strategy::Rag { top_k, chunk_size } => {
            *chunk_size = run.chunk_size;
            if let Some(v) = run.rag_top_k {
                *top_k = v;
            }
        }
        Strategy::Tree {
            chunk_size,
            k_compress,
        } => {
            *chunk_size = run.chunk_size;
            *k_compress = if no_compress || !run.compression {
                None
            } else {
                Some(run.k_compress)
            };
        }
    }
    Ok(strategy)
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let run = resolve(&args.common)?;
    let load = load_dataset(&args.dataset, DatasetFormat::Jsonl)
        .map_err(|e| CliError::Config(format!("dataset {}: {e}", args.dataset.display())))?;
    for err in &load.errors {
        eprintln!("dataset: skipped record: {err}");
    }
    if load.samples.is_empty() {
        return Err(CliError::Config(format!(
            "dataset {} contains no valid samples",
            args.dataset.display()
        )));
    }
    let (chat, embed, trace) = load_gateways(&run)?;
    let cfg = TreeStrategyConfig {
        tokenizer: TokenizerSpec::whitespace(),
        aggregate: run.aggregate_config(),
        reason: ReasonOptions {
            confidence_enabled: run.confidence,
            aggregation_enabled: run.aggregation,
            parallelism: run.parallelism,
        },
    };

    let mut sections: Vec<(String, ScoreReport)> = Vec::new();
    for name in &args.strategy {
        let strategy = resolve_strategy(name, &run, false)?;
        let report = ScoreReport::compute(&load.samples, |sample| {
            answer_with_strategy(
                &strategy,
                &sample.context,
                &sample.question,
                &cfg,
                &chat,
                &embed,
            )
        });
        println!("== strategy: {name} ==");
        print!("{}", report.render_table());
        sections.push((name.clone(), report));
    }

    if let Some(path) = &args.out_report {
        let file = std::fs::File::create(path).map_err(|e| {
            CliError::Config(format!("cannot write report {}: {e}", path.display()))
        })?;
        let body = serde_json::json!({
            "config": run.snapshot(),
            "strategies": sections
                .iter()
                .map(|(name, report)| {
                    (name.clone(), serde_json::to_value(report).expect("report json"))
                })
                .collect::<serde_json::Map<String, serde_json::Value>>(),
        });
        serde_json::to_writer_pretty(file, &body)
            .map_err(|e| CliError::Pipeline(format!("report serialization: {e}")))?;
    }
    write_trace(&trace, &args.out_trace)?;
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> CliResult<()> {
    let tree = DocTree::load(&args.tree).map_err(CliError::from)?;
    print!("{}", tree.outline());
    println!(
        "{} nodes, {} layers, chunk_size {}, seed {}",
        tree.node_count(),
        tree.layers().len(),
        tree.meta.chunk_size,
        tree.meta.seed,
    );
    if let Some(query) = &tree.meta.built_from_query {
        println!(
            "compressed with k={} for query: {query}",
            tree.meta.k_compress.unwrap_or(0)
        );
    }
    Ok(())
}
