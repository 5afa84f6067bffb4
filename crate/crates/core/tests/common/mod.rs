//! Shared test support: an independent reference parser for the reply
//! grammar, a random DocTree generator, and mock gateway helpers.

#![allow(dead_code)]

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use doctree_core::gateway::{
    BackendConfig, ChatGateway, EmbedGateway, HashEmbedder, MockChat, MockScript,
};
use doctree_core::parser::Subtree;
use doctree_core::trace::TraceLog;
use doctree_core::tree::{DocTree, NodeKind, TreeMeta, TreeNode};
use doctree_core::vector::Embedding;
use doctree_core::Real;

// ---------------------------------------------------------------------------
// Reference parser: a recursive-descent implementation of the reply grammar,
// written independently of the library's line-scanning parser.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefNode {
    pub title: String,
    pub keywords: Vec<String>,
    pub summary: String,
    pub context: String,
    pub depth: usize,
    pub children: Vec<RefNode>,
}

pub type RefViolation = (usize, String);

struct Line<'a> {
    offset: usize,
    raw: &'a str,
}

impl Line<'_> {
    fn trimmed(&self) -> &str {
        self.raw.trim_start()
    }

    fn indent(&self) -> usize {
        self.raw.len() - self.trimmed().len()
    }

    fn heading_level(&self) -> Option<usize> {
        let t = self.trimmed();
        if t.starts_with('#') {
            Some(t.bytes().take_while(|&b| b == b'#').count())
        } else {
            None
        }
    }
}

fn split_lines(text: &str) -> Vec<Line<'_>> {
    let mut lines = Vec::new();
    let mut offset = 0;
    for piece in text.split_inclusive('\n') {
        let mut raw = piece.strip_suffix('\n').unwrap_or(piece);
        raw = raw.strip_suffix('\r').unwrap_or(raw);
        lines.push(Line { offset, raw });
        offset += piece.len();
    }
    lines
}

/// Parse a reply into a forest, or report the byte offset of the first
/// grammar violation.
pub fn reference_parse(text: &str) -> Result<Vec<RefNode>, RefViolation> {
    let lines = split_lines(text);
    let mut pos = 0;
    // Leading blank lines are fine; anything else before a heading is not.
    while pos < lines.len() && lines[pos].trimmed().is_empty() {
        pos += 1;
    }
    if pos == lines.len() {
        return Err((0, "reply contains no headings".into()));
    }
    if lines[pos].heading_level().is_none() {
        return Err((
            lines[pos].offset + lines[pos].indent(),
            "content before the first heading".into(),
        ));
    }
    let mut forest = Vec::new();
    while pos < lines.len() {
        forest.push(parse_subtree(&lines, &mut pos, 0)?);
    }
    Ok(forest)
}

fn parse_subtree(lines: &[Line], pos: &mut usize, depth: usize) -> Result<RefNode, RefViolation> {
    let heading = &lines[*pos];
    let level = heading.heading_level().expect("caller checked heading");
    let title = heading.trimmed()[level..].trim().to_string();
    if title.is_empty() {
        return Err((
            heading.offset + heading.indent(),
            "heading without a title".into(),
        ));
    }
    *pos += 1;

    // Metadata directly after the heading (blank lines do not end it).
    let mut keywords = Vec::new();
    let mut summary: Option<String> = None;
    let mut context_lines: Vec<String> = Vec::new();
    let mut in_metadata = true;
    while *pos < lines.len() && lines[*pos].heading_level().is_none() {
        let line = &lines[*pos];
        let t = line.trimmed();
        if in_metadata {
            if let Some(rest) = t.strip_prefix("KEYWORDS:") {
                keywords = rest
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect();
                *pos += 1;
                continue;
            }
            if let Some(rest) = t.strip_prefix("SUMMARY:") {
                let s = rest.trim();
                if !s.is_empty() {
                    summary = Some(s.to_string());
                }
                in_metadata = false;
                *pos += 1;
                continue;
            }
        }
        if !t.is_empty() {
            in_metadata = false;
        }
        context_lines.push(line.raw.to_string());
        *pos += 1;
    }
    let context = context_lines.join("\n").trim().to_string();

    // Deeper headings become children; the nearest shallower ancestor rule
    // falls out of the recursion taking everything strictly deeper.
    let mut children = Vec::new();
    while *pos < lines.len() {
        let next_level = lines[*pos].heading_level().expect("loop stops on headings");
        if next_level <= level {
            break;
        }
        children.push(parse_subtree(lines, pos, depth + 1)?);
    }

    let summary = summary.unwrap_or_else(|| {
        if context.is_empty() {
            title.clone()
        } else {
            context.chars().take(200).collect()
        }
    });
    Ok(RefNode {
        title,
        keywords,
        summary,
        context,
        depth,
        children,
    })
}

/// Convert the library's parse output into reference shape for comparison.
pub fn subtrees_to_ref(subtrees: &[Subtree]) -> Vec<RefNode> {
    fn convert(subtree: &Subtree, id: &str) -> RefNode {
        let node = &subtree.nodes[id];
        RefNode {
            title: node.title.clone(),
            keywords: node.keywords.clone(),
            summary: node.summary.clone(),
            context: node.context.clone(),
            depth: node.depth,
            children: node.children.iter().map(|c| convert(subtree, c)).collect(),
        }
    }
    subtrees.iter().map(|s| convert(s, &s.root)).collect()
}

/// Render a reference forest as the expected-outline fixture format: one
/// title per line indented by depth, `===` between subtrees.
pub fn ref_outline(forest: &[RefNode]) -> String {
    fn walk(node: &RefNode, out: &mut String) {
        out.push_str(&"  ".repeat(node.depth));
        out.push_str(&node.title);
        out.push('\n');
        for child in &node.children {
            walk(child, out);
        }
    }
    let mut out = String::new();
    for (i, root) in forest.iter().enumerate() {
        if i > 0 {
            out.push_str("===\n");
        }
        walk(root, &mut out);
    }
    out
}

// ---------------------------------------------------------------------------
// Random DocTree generation.
// ---------------------------------------------------------------------------

pub struct RandomTreeParams {
    pub max_l0: usize,
    pub max_subtree_nodes: usize,
    pub with_embeddings: bool,
}

impl Default for RandomTreeParams {
    fn default() -> Self {
        Self {
            max_l0: 8,
            max_subtree_nodes: 5,
            with_embeddings: false,
        }
    }
}

/// Generate a random valid single-rooted DocTree: a layer of parsed subtree
/// roots (some with parsed children beneath), then random grouping layers up
/// to a single root.
pub fn random_tree(rng: &mut ChaCha8Rng, params: &RandomTreeParams) -> DocTree {
    let embedder = HashEmbedder::<Real>::new(32);
    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut edges: Vec<(String, String)> = Vec::new();

    let n_l0 = rng.random_range(1..=params.max_l0);
    let mut l0 = Vec::new();
    for i in 0..n_l0 {
        let root_id = format!("c{i}.s0.n0");
        l0.push(root_id.clone());
        let n_nodes = rng.random_range(1..=params.max_subtree_nodes);
        // Attach each non-root parsed node under a random earlier node.
        let mut ids = vec![root_id.clone()];
        let mut depths = vec![0i32];
        for j in 1..n_nodes {
            let parent_idx = rng.random_range(0..j);
            let id = format!("c{i}.s0.n{j}");
            edges.push((ids[parent_idx].clone(), id.clone()));
            ids.push(id);
            depths.push(depths[parent_idx] - 1);
        }
        for (j, id) in ids.iter().enumerate() {
            nodes.push(TreeNode {
                id: id.clone(),
                kind: NodeKind::Parsed,
                title: format!("section {i}.{j}"),
                keywords: vec![format!("kw{}", rng.random_range(0..9))],
                summary: format!("summary of section {i}.{j}"),
                context: Some(format!("context text {i}.{j}")),
                context_ref: None,
                embedding: params.with_embeddings.then(|| {
                    embedder.embed_text(&format!("ctx {} {}", i, rng.random_range(0..1000)))
                }),
                layer: if j == 0 { 0 } else { depths[j] },
            });
        }
    }

    let mut layers = vec![l0];
    let mut layer_index = 0usize;
    while layers[layer_index].len() > 1 {
        let prev = layers[layer_index].clone();
        layer_index += 1;
        // Random contiguous grouping with at least one real merge.
        let mut groups: Vec<Vec<String>> = Vec::new();
        let mut i = 0;
        while i < prev.len() {
            let take = rng.random_range(1..=(prev.len() - i)).min(4);
            groups.push(prev[i..i + take].to_vec());
            i += take;
        }
        if groups.len() == prev.len() && prev.len() > 1 {
            // All singletons: force one merge so the loop terminates.
            let merged = groups.split_off(groups.len() - 2);
            groups.push(merged.into_iter().flatten().collect());
        }
        let mut layer = Vec::new();
        for (j, group) in groups.iter().enumerate() {
            let id = format!("s{layer_index}.{j}");
            nodes.push(TreeNode {
                id: id.clone(),
                kind: NodeKind::Summary,
                title: format!("group {layer_index}.{j}"),
                keywords: Vec::new(),
                summary: format!("overview of {} members", group.len()),
                context: None,
                context_ref: None,
                embedding: params.with_embeddings.then(|| {
                    embedder.embed_text(&format!("grp {layer_index} {}", rng.random_range(0..1000)))
                }),
                layer: layer_index as i32,
            });
            for child in group {
                edges.push((id.clone(), child.clone()));
            }
            layer.push(id);
        }
        layers.push(layer);
    }

    let meta = TreeMeta {
        chunk_size: 100,
        k_compress: None,
        built_from_query: None,
        seed: rng.random(),
    };
    DocTree::from_parts(meta, nodes, layers, edges).expect("generated tree is valid")
}

/// Nodes reachable from the top layer (the whole tree for valid trees).
pub fn all_node_ids(tree: &DocTree) -> Vec<String> {
    let mut ids = Vec::new();
    let mut stack: Vec<String> = tree.roots().to_vec();
    while let Some(id) = stack.pop() {
        ids.push(id.clone());
        for child in tree.children_of(&id) {
            stack.push(child.clone());
        }
    }
    ids
}

/// Internal nodes (anywhere in the tree) with at least two children.
pub fn internal_with_multiple_children(tree: &DocTree) -> usize {
    all_node_ids(tree)
        .iter()
        .filter(|id| tree.children_of(id).len() >= 2)
        .count()
}

// ---------------------------------------------------------------------------
// Hand-built fixture trees.
// ---------------------------------------------------------------------------

pub fn parsed_leaf(id: &str, title: &str, context: &str) -> TreeNode {
    TreeNode {
        id: id.to_string(),
        kind: NodeKind::Parsed,
        title: title.to_string(),
        keywords: Vec::new(),
        summary: format!("summary of {title}"),
        context: Some(context.to_string()),
        context_ref: None,
        embedding: None,
        layer: 0,
    }
}

pub fn summary_node(id: &str, title: &str, layer: i32) -> TreeNode {
    TreeNode {
        id: id.to_string(),
        kind: NodeKind::Summary,
        title: title.to_string(),
        keywords: Vec::new(),
        summary: format!("overview: {title}"),
        context: None,
        context_ref: None,
        embedding: None,
        layer,
    }
}

/// Three parsed leaves under one summary root; the planted gold answer lives
/// in the "ledger page" leaf.
pub fn three_leaf_fixture() -> DocTree {
    let nodes = vec![
        parsed_leaf("c0.s0.n0", "harbor records", "nothing relevant here"),
        parsed_leaf(
            "c1.s0.n0",
            "ledger page",
            "the shipment arrived on a Tuesday",
        ),
        parsed_leaf("c2.s0.n0", "weather log", "fog all week"),
        summary_node("s1.0", "document overview", 1),
    ];
    let layers = vec![
        vec!["c0.s0.n0".into(), "c1.s0.n0".into(), "c2.s0.n0".into()],
        vec!["s1.0".into()],
    ];
    let edges = vec![
        ("s1.0".to_string(), "c0.s0.n0".to_string()),
        ("s1.0".to_string(), "c1.s0.n0".to_string()),
        ("s1.0".to_string(), "c2.s0.n0".to_string()),
    ];
    DocTree::from_parts(TreeMeta::default(), nodes, layers, edges).expect("fixture tree valid")
}

/// Scripted replies for reasoning over [`three_leaf_fixture`].
pub fn three_leaf_script() -> MockScript {
    use doctree_core::reason::{MAP_SYSTEM_PROMPT, REDUCE_SYSTEM_PROMPT};
    MockScript::new()
        .contains(
            MAP_SYSTEM_PROMPT,
            "ledger page",
            verdict_reply(
                "shipment arrived Tuesday",
                "stated in the ledger",
                "Tuesday",
                0.9,
            ),
        )
        .contains(
            MAP_SYSTEM_PROMPT,
            "document overview",
            verdict_reply(
                "shipment arrived Tuesday",
                "children agree",
                "Tuesday",
                0.95,
            ),
        )
        .contains(
            MAP_SYSTEM_PROMPT,
            "",
            verdict_reply("", "no relevant content", "insufficient", 0.1),
        )
        .contains(
            REDUCE_SYSTEM_PROMPT,
            "",
            verdict_reply(
                "shipment arrived Tuesday",
                "one sibling knew",
                "Tuesday",
                0.9,
            ),
        )
}

// ---------------------------------------------------------------------------
// Gateway helpers.
// ---------------------------------------------------------------------------

pub fn mock_gateways(script: MockScript) -> (ChatGateway, EmbedGateway, TraceLog) {
    let trace = TraceLog::new();
    let cfg = BackendConfig::mock();
    let chat = ChatGateway::new(Box::new(MockChat::new(script)), trace.clone(), &cfg)
        .expect("mock chat gateway");
    let embed = EmbedGateway::from_config(&cfg, trace.clone()).expect("mock embed gateway");
    (chat, embed, trace)
}

/// A verdict block reply for scripted mocks.
pub fn verdict_reply(key_info: &str, rationale: &str, answer: &str, confidence: f64) -> String {
    format!(
        "KEY_INFO: {key_info}\nRATIONALE: {rationale}\nANSWER: {answer}\nCONFIDENCE: {confidence}"
    )
}

/// Deterministic random embeddings for oracle tests.
pub fn random_embedding(rng: &mut ChaCha8Rng, dim: usize) -> Embedding<Real> {
    Embedding::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
}
