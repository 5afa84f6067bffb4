//! Answering strategies sharing the same gateways: full-document one-step
//! reasoning, top-k retrieval-augmented generation, and the tree map/reduce
//! pipeline.

use serde::{Deserialize, Serialize};

use crate::chunking::{chunk_document, truncation_boundary, TokenizerSpec};
use crate::error::{Error, Result};
use crate::gateway::{ChatGateway, ChatRequest, EmbedGateway};
use crate::reason::{reason, NodeVerdict, ReasonOptions, ReasonPlan};
use crate::trace::CallTag;
use crate::tree::{build_full, compress, select_chunks, AggregateConfig};

/// Default chunk sizes: 1k tokens for LongBench-scale documents, 8k for
/// ultra-long InfiniteBench-scale documents.
pub const DEFAULT_CHUNK_SIZE: usize = 1000;
pub const DEFAULT_CHUNK_SIZE_ULTRA: usize = 8000;

/// Default retrieval width for the RAG baseline.
pub const DEFAULT_RAG_TOP_K: usize = 5;

/// Default selection scale for query-aware tree compression.
pub const DEFAULT_K_COMPRESS: usize = 7;

/// An answering strategy with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// One completion over the (possibly truncated) document.
    FullDoc { truncate_tokens: usize },
    /// Embed chunks, retrieve the top-k, one completion over them.
    Rag { top_k: usize, chunk_size: usize },
    /// Build a DocTree (optionally query-compressed) and reason over it.
    /// `k_compress: None` builds the full tree.
    #[serde(rename = "tom")]
    Tree {
        chunk_size: usize,
        k_compress: Option<usize>,
    },
}

impl Strategy {
    /// Parse a CLI strategy name with its defaults.
    pub fn from_name(name: &str) -> Result<Strategy> {
        match name {
            "full_doc" | "full-doc" => Ok(Strategy::FullDoc {
                truncate_tokens: DEFAULT_CHUNK_SIZE_ULTRA,
            }),
            "rag" => Ok(Strategy::Rag {
                top_k: DEFAULT_RAG_TOP_K,
                chunk_size: DEFAULT_CHUNK_SIZE,
            }),
            "tom" | "tree" => Ok(Strategy::Tree {
                chunk_size: DEFAULT_CHUNK_SIZE,
                k_compress: Some(DEFAULT_K_COMPRESS),
            }),
            other => Err(Error::InvalidConfig(format!("unknown strategy `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FullDoc { .. } => "full_doc",
            Strategy::Rag { .. } => "rag",
            Strategy::Tree { .. } => "tom",
        }
    }
}

pub const BASELINE_SYSTEM_PROMPT: &str = "\
You answer a question from the provided document content.
Reply with the short answer only.";

fn baseline_prompt(content: &str, query: &str) -> String {
    format!("Question: {query}\n\nDocument:\n{content}")
}

/// One-step reasoning over the full document, truncated on a token boundary
/// to `truncate_tokens` when longer.
pub fn answer_full_doc(
    doc: &str,
    query: &str,
    truncate_tokens: usize,
    spec: &TokenizerSpec,
    gateway: &ChatGateway,
) -> Result<String> {
    if truncate_tokens == 0 {
        return Err(Error::InvalidConfig(
            "truncate_tokens must be at least 1".into(),
        ));
    }
    let boundary = truncation_boundary(doc, truncate_tokens, spec);
    let req = ChatRequest::new(
        CallTag::Baseline,
        BASELINE_SYSTEM_PROMPT,
        baseline_prompt(&doc[..boundary], query),
    );
    Ok(gateway.complete(&req)?.text)
}

/// Retrieval-augmented baseline: chunk, embed, select the top-k chunks by
/// query similarity, and answer over them concatenated in document order.
pub fn answer_rag(
    doc: &str,
    query: &str,
    top_k: usize,
    chunk_size: usize,
    spec: &TokenizerSpec,
    chat: &ChatGateway,
    embed: &EmbedGateway,
) -> Result<String> {
    if top_k == 0 {
        return Err(Error::InvalidConfig("top_k must be at least 1".into()));
    }
    let chunks = chunk_document("rag", doc, chunk_size, spec)?;
    if chunks.is_empty() {
        return Err(Error::EmptyInput("answer_rag: empty document".into()));
    }
    let selected = select_chunks(&chunks, query, top_k, embed)?;
    let content: String = selected
        .iter()
        .map(|c| c.text.trim())
        .collect::<Vec<_>>()
        .join("\n\n");
    let req = ChatRequest::new(
        CallTag::Baseline,
        BASELINE_SYSTEM_PROMPT,
        baseline_prompt(&content, query),
    );
    Ok(chat.complete(&req)?.text)
}

/// Everything the tree strategy needs besides the gateways.
#[derive(Debug, Clone, Default)]
pub struct TreeStrategyConfig {
    pub tokenizer: TokenizerSpec,
    pub aggregate: AggregateConfig,
    pub reason: ReasonOptions,
}

/// Chunk, build the (optionally compressed) tree, and reason over it,
/// returning the root verdict.
pub fn tree_verdict(
    doc: &str,
    query: &str,
    chunk_size: usize,
    k_compress: Option<usize>,
    cfg: &TreeStrategyConfig,
    chat: &ChatGateway,
    embed: &EmbedGateway,
) -> Result<NodeVerdict> {
    let chunks = chunk_document("doc", doc, chunk_size, &cfg.tokenizer)?;
    if chunks.is_empty() {
        return Err(Error::EmptyInput("answer_tree: empty document".into()));
    }
    let tree = match k_compress {
        Some(k) => compress(&chunks, query, k, chunk_size, chat, embed, &cfg.aggregate)?,
        None => build_full(&chunks, chunk_size, chat, embed, &cfg.aggregate)?,
    };
    let plan = ReasonPlan {
        tree: &tree,
        query: query.to_string(),
        options: cfg.reason.clone(),
    };
    let (verdict, _trace) = reason(&plan, chat)?;
    Ok(verdict)
}

/// [`tree_verdict`], reduced to its answer string.
pub fn answer_tree(
    doc: &str,
    query: &str,
    chunk_size: usize,
    k_compress: Option<usize>,
    cfg: &TreeStrategyConfig,
    chat: &ChatGateway,
    embed: &EmbedGateway,
) -> Result<String> {
    Ok(tree_verdict(doc, query, chunk_size, k_compress, cfg, chat, embed)?.answer)
}

/// Dispatch a query through the given strategy.
pub fn answer_with_strategy(
    strategy: &Strategy,
    doc: &str,
    query: &str,
    cfg: &TreeStrategyConfig,
    chat: &ChatGateway,
    embed: &EmbedGateway,
) -> Result<String> {
    match strategy {
        Strategy::FullDoc { truncate_tokens } => {
            answer_full_doc(doc, query, *truncate_tokens, &cfg.tokenizer, chat)
        }
        Strategy::Rag { top_k, chunk_size } => {
            answer_rag(doc, query, *top_k, *chunk_size, &cfg.tokenizer, chat, embed)
        }
        Strategy::Tree {
            chunk_size,
            k_compress,
        } => answer_tree(doc, query, *chunk_size, *k_compress, cfg, chat, embed),
    }
}
