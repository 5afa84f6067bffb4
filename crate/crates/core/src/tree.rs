//! The layered DocTree: bottom-up aggregation of parsed subtrees and
//! query-aware compression.
//!
//! Layer 0 holds the root nodes of all parsed subtrees; the nodes beneath
//! them keep their parsed parent links. Higher layers are built by
//! embedding the previous layer's nodes, clustering them, and summarizing
//! each cluster into a parent node, until the cluster count stabilizes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chunking::Chunk;
use crate::cluster::{build_similarity_graph, cluster};
use crate::error::{Error, Result};
use crate::gateway::{ChatGateway, ChatRequest, EmbedGateway};
use crate::parser::{parse_chunk, Subtree};
use crate::trace::{CallTag, EventKind, Outcome};
use crate::vector::top_k_by_similarity;
use crate::{EmbeddingVector, Real};

pub const TREE_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    /// Produced by the semantic parser; carries provenance.
    Parsed,
    /// Produced by cluster summarization during aggregation.
    Summary,
}

/// Provenance of a parsed node's context within its source chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextRef {
    pub chunk_id: usize,
    pub byte_start: usize,
    pub byte_end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: String,
    pub kind: NodeKind,
    pub title: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    pub summary: String,
    /// Source text for parsed nodes; summary nodes carry none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_ref: Option<ContextRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingVector>,
    /// 0..K for layer members; negative values are parsed subtree depth
    /// below layer 0.
    pub layer: i32,
}

impl TreeNode {
    /// Text embedded for this node during aggregation.
    pub fn embed_text(&self) -> String {
        format!("{}\n{}", self.title, self.summary)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TreeMeta {
    pub chunk_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_compress: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub built_from_query: Option<String>,
    pub seed: u64,
}

/// Serialized layout of a tree file.
#[derive(Serialize, Deserialize)]
struct TreeFile {
    version: u32,
    meta: TreeMeta,
    nodes: Vec<TreeNode>,
    layers: Vec<Vec<String>>,
    /// (parent, child) pairs; child order under one parent is meaningful.
    edges: Vec<(String, String)>,
}

/// Layered document tree.
#[derive(Debug, Clone, PartialEq)]
pub struct DocTree {
    pub meta: TreeMeta,
    nodes: BTreeMap<String, TreeNode>,
    layers: Vec<Vec<String>>,
    children: BTreeMap<String, Vec<String>>,
    parent: BTreeMap<String, String>,
}

impl DocTree {
    pub fn node(&self, id: &str) -> Option<&TreeNode> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.values()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Layer id lists, `layers()[0]` being L0.
    pub fn layers(&self) -> &[Vec<String>] {
        &self.layers
    }

    /// Ids of the top layer.
    pub fn roots(&self) -> &[String] {
        self.layers.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn children_of(&self, id: &str) -> &[String] {
        self.children.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn parent_of(&self, id: &str) -> Option<&String> {
        self.parent.get(id)
    }

    fn insert_node(&mut self, node: TreeNode) {
        self.nodes.insert(node.id.clone(), node);
    }

    fn link(&mut self, parent_id: &str, child_id: &str) {
        self.children
            .entry(parent_id.to_string())
            .or_default()
            .push(child_id.to_string());
        self.parent
            .insert(child_id.to_string(), parent_id.to_string());
    }

    /// Build the partial tree whose layer 0 is the subtree roots, with the
    /// parsed structure preserved beneath.
    pub fn build_layer0(subtrees: &[Subtree]) -> Result<DocTree> {
        if subtrees.is_empty() {
            return Err(Error::EmptyInput("build_layer0: no subtrees".into()));
        }
        let mut tree = DocTree {
            meta: TreeMeta::default(),
            nodes: BTreeMap::new(),
            layers: vec![Vec::new()],
            children: BTreeMap::new(),
            parent: BTreeMap::new(),
        };
        for subtree in subtrees {
            tree.layers[0].push(subtree.root.clone());
            for node in subtree.nodes.values() {
                let context_ref = node.context_span.map(|(start, end)| ContextRef {
                    chunk_id: subtree.chunk_id,
                    byte_start: start,
                    byte_end: end,
                });
                tree.insert_node(TreeNode {
                    id: node.node_id.clone(),
                    kind: NodeKind::Parsed,
                    title: node.title.clone(),
                    keywords: node.keywords.clone(),
                    summary: node.summary.clone(),
                    context: (!node.context.is_empty()).then(|| node.context.clone()),
                    context_ref,
                    embedding: None,
                    layer: -(node.depth as i32),
                });
            }
            for node in subtree.nodes.values() {
                for child in &node.children {
                    tree.link(&node.node_id, child);
                }
            }
            // Subtree roots sit on layer 0.
            if let Some(root) = tree.nodes.get_mut(&subtree.root) {
                root.layer = 0;
            }
        }
        Ok(tree)
    }

    /// Render an indented outline of the tree, top layer first.
    pub fn outline(&self) -> String {
        let mut out = String::new();
        for id in self.roots() {
            self.outline_node(id, 0, &mut out);
        }
        out
    }

    fn outline_node(&self, id: &str, indent: usize, out: &mut String) {
        let Some(node) = self.node(id) else { return };
        let marker = match node.kind {
            NodeKind::Parsed => "*",
            NodeKind::Summary => "+",
        };
        out.push_str(&"  ".repeat(indent));
        out.push_str(&format!("{marker} [{}] {}\n", node.id, node.title));
        for child in self.children_of(id) {
            self.outline_node(child, indent + 1, out);
        }
    }

    /// Check structural invariants: layer membership, single cross-layer
    /// parents, reachability of every layer-0 node from the top layer.
    pub fn validate(&self) -> Result<()> {
        let fail = |location: &str, message: String| {
            Err(Error::CorruptFile {
                location: location.to_string(),
                message,
            })
        };
        if self.layers.is_empty() || self.layers.iter().any(|l| l.is_empty()) {
            return fail("layers", "empty layer".into());
        }
        for layer in &self.layers {
            for id in layer {
                if !self.nodes.contains_key(id) {
                    return fail("layers", format!("unknown node id {id}"));
                }
            }
        }
        for (parent, children) in &self.children {
            if !self.nodes.contains_key(parent) {
                return fail("edges", format!("unknown parent {parent}"));
            }
            for child in children {
                if !self.nodes.contains_key(child) {
                    return fail("edges", format!("unknown child {child}"));
                }
            }
        }
        // Monotone layer sizes and exactly-one-parent links between layers.
        for k in 1..self.layers.len() {
            if self.layers[k].len() > self.layers[k - 1].len() {
                return fail(
                    "layers",
                    format!(
                        "layer {k} grew from {} to {}",
                        self.layers[k - 1].len(),
                        self.layers[k].len()
                    ),
                );
            }
            let members: BTreeSet<&String> = self.layers[k - 1].iter().collect();
            let mut seen: BTreeSet<&String> = BTreeSet::new();
            for parent in &self.layers[k] {
                let children = self.children_of(parent);
                if children.is_empty() {
                    return fail("edges", format!("layer {k} node {parent} has no children"));
                }
                for child in children {
                    if !members.contains(child) {
                        return fail(
                            "edges",
                            format!("child {child} of {parent} is not on layer {}", k - 1),
                        );
                    }
                    if !seen.insert(child) {
                        return fail("edges", format!("node {child} has two parents"));
                    }
                }
            }
            if seen.len() != members.len() {
                return fail(
                    "edges",
                    format!("layer {} has nodes without a layer-{k} parent", k - 1),
                );
            }
        }
        // Walking down from the top layer must reach every node at most
        // once: a second visit means a duplicated parent or a cycle.
        let mut visited: BTreeSet<&String> = BTreeSet::new();
        let mut stack: Vec<&String> = self.roots().iter().collect();
        for root in &stack {
            visited.insert(root);
        }
        while let Some(id) = stack.pop() {
            for child in self.children_of(id) {
                if !visited.insert(child) {
                    return fail("edges", format!("node {child} is reachable twice"));
                }
                stack.push(child);
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = TreeFile {
            version: TREE_FILE_VERSION,
            meta: self.meta.clone(),
            nodes: self.nodes.values().cloned().collect(),
            layers: self.layers.clone(),
            edges: self
                .children
                .iter()
                .flat_map(|(p, cs)| cs.iter().map(move |c| (p.clone(), c.clone())))
                .collect(),
        };
        let mut writer = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut writer, &file).map_err(|e| Error::CorruptFile {
            location: "json".into(),
            message: e.to_string(),
        })?;
        writer.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<DocTree> {
        let reader = BufReader::new(File::open(path)?);
        let file: TreeFile = serde_json::from_reader(reader).map_err(|e| Error::CorruptFile {
            location: "json".into(),
            message: e.to_string(),
        })?;
        if file.version != TREE_FILE_VERSION {
            return Err(Error::CorruptFile {
                location: "version".into(),
                message: format!("expected {TREE_FILE_VERSION}, found {}", file.version),
            });
        }
        Self::from_parts(file.meta, file.nodes, file.layers, file.edges)
    }

    /// Assemble a tree from its serialized parts, validating the structural
    /// invariants.
    pub fn from_parts(
        meta: TreeMeta,
        nodes: Vec<TreeNode>,
        layers: Vec<Vec<String>>,
        edges: Vec<(String, String)>,
    ) -> Result<DocTree> {
        let mut tree = DocTree {
            meta,
            nodes: nodes.into_iter().map(|n| (n.id.clone(), n)).collect(),
            layers,
            children: BTreeMap::new(),
            parent: BTreeMap::new(),
        };
        for (parent, child) in edges {
            tree.link(&parent, &child);
        }
        tree.validate()?;
        Ok(tree)
    }
}

/// Parameters for bottom-up aggregation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateConfig {
    pub knn_k: usize,
    pub min_sim: Real,
    pub resolution: Real,
    pub seed: u64,
    /// Hard cap on aggregation iterations.
    pub max_layers: usize,
    /// Character budget for one summarization prompt.
    pub summary_char_budget: usize,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        Self {
            knn_k: 8,
            min_sim: 0.0,
            resolution: 1.0,
            seed: 0,
            max_layers: 12,
            summary_char_budget: 4000,
        }
    }
}

pub const SUMMARIZE_SYSTEM_PROMPT: &str = "\
You merge several document sections into one parent overview.
Reply with exactly two lines:
TITLE: <short title covering all sections>
SUMMARY: <at most three sentences covering all sections>";

/// Render the members of one cluster into the summarization user prompt,
/// truncating each member proportionally to fit the character budget.
fn summarize_user_prompt(members: &[&TreeNode], budget: usize) -> String {
    let per_member = (budget / members.len().max(1)).max(32);
    let mut out = String::from("Sections:\n");
    for node in members {
        let line = format!("- TITLE: {} | SUMMARY: {}", node.title, node.summary);
        let capped: String = line.chars().take(per_member).collect();
        out.push_str(&capped);
        out.push('\n');
    }
    out
}

/// Parse a summarization reply leniently: labeled TITLE:/SUMMARY: lines when
/// present, otherwise first line as title and the whole reply as summary.
fn parse_summary_reply(text: &str) -> (String, String) {
    let mut title = None;
    let mut summary = None;
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix("TITLE:") {
            title.get_or_insert_with(|| rest.trim().to_string());
        } else if let Some(rest) = trimmed.strip_prefix("SUMMARY:") {
            summary.get_or_insert_with(|| rest.trim().to_string());
        }
    }
    let title = title.filter(|t| !t.is_empty()).unwrap_or_else(|| {
        text.lines()
            .next()
            .unwrap_or("Summary")
            .trim()
            .chars()
            .take(120)
            .collect()
    });
    let summary = summary
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| text.trim().to_string());
    (title, summary)
}

/// Extractive fallback when summarization fails after the repair attempt.
fn extractive_summary(members: &[&TreeNode], budget: usize) -> (String, String) {
    let title = format!("Group: {}", members[0].title);
    let joined = members
        .iter()
        .map(|n| n.summary.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    let summary: String = joined.chars().take(budget.min(800)).collect();
    (title, summary)
}

/// Summarize one cluster into a parent node's (title, summary), degrading to
/// an extractive summary if the backend fails even after one repair attempt.
fn summarize_cluster(
    members: &[&TreeNode],
    chat: &ChatGateway,
    cfg: &AggregateConfig,
    parent_id: &str,
) -> (String, String) {
    let user = summarize_user_prompt(members, cfg.summary_char_budget);
    let req = ChatRequest::new(CallTag::Summarize, SUMMARIZE_SYSTEM_PROMPT, &user)
        .with_node(parent_id.to_string());
    match chat.complete(&req) {
        Ok(resp) => parse_summary_reply(&resp.text),
        Err(first_err) => {
            let repair = ChatRequest::new(
                CallTag::Summarize,
                SUMMARIZE_SYSTEM_PROMPT,
                format!("{user}\nReply with TITLE: and SUMMARY: lines only."),
            )
            .with_node(parent_id.to_string());
            match chat.complete(&repair) {
                Ok(resp) => parse_summary_reply(&resp.text),
                Err(second_err) => {
                    chat.trace().record(
                        chat.trace().now_ms(),
                        EventKind::Degradation,
                        Some(CallTag::Summarize),
                        Some(parent_id.to_string()),
                        Outcome::Degraded(format!(
                            "extractive summary for {parent_id}: {first_err}; {second_err}"
                        )),
                        None,
                    );
                    extractive_summary(members, cfg.summary_char_budget)
                }
            }
        }
    }
}

/// Bottom-up tree aggregation: embed the top layer, cluster it, summarize
/// each cluster into a parent, and repeat until the cluster count stabilizes
/// (no coarsening), a single root remains, or the layer cap is reached.
/// Stopping with more than one top node adds one final root over them.
pub fn aggregate(
    tree: &mut DocTree,
    chat: &ChatGateway,
    embed: &EmbedGateway,
    cfg: &AggregateConfig,
) -> Result<()> {
    tree.meta.seed = cfg.seed;
    for iteration in 1.. {
        let top: Vec<String> = tree.layers.last().expect("layer 0 exists").clone();
        if top.len() == 1 {
            break;
        }

        let texts: Vec<String> = top
            .iter()
            .map(|id| tree.node(id).expect("layer member").embed_text())
            .collect();
        let vectors = embed.embed(&texts)?;
        for (id, vector) in top.iter().zip(&vectors) {
            if let Some(node) = tree.nodes.get_mut(id) {
                node.embedding = Some(vector.clone());
            }
        }

        let pairs: Vec<(String, EmbeddingVector)> = top.iter().cloned().zip(vectors).collect();
        let graph = build_similarity_graph(&pairs, cfg.knn_k, cfg.min_sim)?;
        let clustering = cluster(
            &graph,
            cfg.seed.wrapping_add(iteration as u64),
            cfg.resolution,
        );
        let stalled = clustering.num_clusters == top.len();
        let capped = iteration > cfg.max_layers;

        if stalled || capped {
            // Discard the stalled clustering and close the tree with a
            // single root over the current top layer.
            add_summary_layer(tree, chat, cfg, &[top])?;
            break;
        }

        let groups: Vec<Vec<String>> = clustering
            .groups()
            .into_iter()
            .map(|group| {
                // Children keep layer order, not lexicographic order.
                let member_set: BTreeSet<&String> = group.iter().collect();
                top.iter()
                    .filter(|id| member_set.contains(id))
                    .cloned()
                    .collect()
            })
            .collect();
        add_summary_layer(tree, chat, cfg, &groups)?;
        if tree.layers.last().expect("just added").len() == 1 {
            break;
        }
    }
    Ok(())
}

/// Append one summary layer with the given child groups.
fn add_summary_layer(
    tree: &mut DocTree,
    chat: &ChatGateway,
    cfg: &AggregateConfig,
    groups: &[Vec<String>],
) -> Result<()> {
    let layer_index = tree.layers.len();
    let mut new_layer = Vec::with_capacity(groups.len());
    for (j, group) in groups.iter().enumerate() {
        let parent_id = format!("s{layer_index}.{j}");
        let members: Vec<&TreeNode> = group
            .iter()
            .map(|id| tree.node(id).expect("group member"))
            .collect();
        let (title, summary) = summarize_cluster(&members, chat, cfg, &parent_id);
        tree.insert_node(TreeNode {
            id: parent_id.clone(),
            kind: NodeKind::Summary,
            title,
            keywords: Vec::new(),
            summary,
            context: None,
            context_ref: None,
            embedding: None,
            layer: layer_index as i32,
        });
        for child in group {
            tree.link(&parent_id, child);
        }
        new_layer.push(parent_id);
    }
    tree.layers.push(new_layer);
    Ok(())
}

/// Build a full (uncompressed) tree over every chunk.
pub fn build_full(
    chunks: &[Chunk],
    chunk_size: usize,
    chat: &ChatGateway,
    embed: &EmbedGateway,
    cfg: &AggregateConfig,
) -> Result<DocTree> {
    if chunks.is_empty() {
        return Err(Error::EmptyInput("build_full: no chunks".into()));
    }
    let mut subtrees = Vec::new();
    for chunk in chunks {
        subtrees.extend(parse_chunk(chunk, chat)?);
    }
    let mut tree = DocTree::build_layer0(&subtrees)?;
    tree.meta.chunk_size = chunk_size;
    aggregate(&mut tree, chat, embed, cfg)?;
    Ok(tree)
}

/// Query-aware compression: embed the query and every chunk, keep the top-k
/// chunks by cosine similarity, and build the tree from those only.
pub fn compress(
    chunks: &[Chunk],
    query: &str,
    k: usize,
    chunk_size: usize,
    chat: &ChatGateway,
    embed: &EmbedGateway,
    cfg: &AggregateConfig,
) -> Result<DocTree> {
    if chunks.is_empty() {
        return Err(Error::EmptyInput("compress: no chunks".into()));
    }
    let selected = select_chunks(chunks, query, k, embed)?;
    let mut subtrees = Vec::new();
    for chunk in &selected {
        subtrees.extend(parse_chunk(chunk, chat)?);
    }
    let mut tree = DocTree::build_layer0(&subtrees)?;
    tree.meta.chunk_size = chunk_size;
    tree.meta.k_compress = Some(k);
    tree.meta.built_from_query = Some(query.to_string());
    aggregate(&mut tree, chat, embed, cfg)?;
    Ok(tree)
}

/// Top-k chunk selection by query-chunk cosine similarity, ties broken by
/// ascending chunk id; the survivors keep document order.
pub fn select_chunks(
    chunks: &[Chunk],
    query: &str,
    k: usize,
    embed: &EmbedGateway,
) -> Result<Vec<Chunk>> {
    let mut texts = vec![query.to_string()];
    texts.extend(chunks.iter().map(|c| c.text.clone()));
    let mut vectors = embed.embed(&texts)?;
    let query_vec = vectors.remove(0);
    let items: Vec<(usize, EmbeddingVector)> =
        chunks.iter().map(|c| c.chunk_id).zip(vectors).collect();
    let keep: BTreeSet<usize> = top_k_by_similarity(&query_vec, &items, k)?
        .into_iter()
        .collect();
    Ok(chunks
        .iter()
        .filter(|c| keep.contains(&c.chunk_id))
        .cloned()
        .collect())
}
