//! Hierarchical semantic parsing: one chunk in, structured subtrees out.
//!
//! The chat backend replies in a markdown-like outline grammar:
//!
//! ```text
//! # Title of a section
//! KEYWORDS: comma, separated, list        (optional)
//! SUMMARY: one line                       (optional)
//! body text until the next heading becomes the node's Context
//! ## A subsection
//! ...
//! ```
//!
//! Heading depth is the number of leading `#` characters. A deeper heading
//! attaches to the nearest shallower heading above it; several shallowest
//! headings make several subtrees (a semantic forest). Anything that breaks
//! the grammar raises [`Error::GrammarViolation`] with the byte offset of
//! the first violation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::chunking::Chunk;
use crate::error::{Error, Result};
use crate::gateway::{ChatGateway, ChatRequest};
use crate::trace::{CallTag, EventKind, Outcome};

/// System prompt for the hierarchical semantic parsing step.
pub const HSP_SYSTEM_PROMPT: &str = "\
You analyze a passage and expose its internal structure as a heading outline.
Rules:
- Every section becomes a heading line: one or more '#' characters, then a short title. More '#' means deeper nesting.
- Directly after each heading you may add 'KEYWORDS: a, b, c' and 'SUMMARY: one sentence.' lines.
- Copy the section's source text below its heading as plain lines; it becomes the section context.
- Start a new top-level '#' heading whenever the topic changes completely.
Output the outline only, with no extra commentary.";

/// Build the user prompt sent for one chunk.
pub fn hsp_user_prompt(chunk_text: &str) -> String {
    format!("Passage:\n{chunk_text}")
}

/// A node of a parsed subtree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedNode {
    pub node_id: String,
    pub title: String,
    pub keywords: Vec<String>,
    pub summary: String,
    /// Source text captured under this heading.
    pub context: String,
    /// Byte range of `context` inside the chunk text, when it could be
    /// located verbatim. Assigned by [`parse_chunk`].
    pub context_span: Option<(usize, usize)>,
    pub children: Vec<String>,
    pub depth: usize,
}

/// One subtree parsed from a chunk: a root plus every node reachable from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subtree {
    pub root: String,
    pub chunk_id: usize,
    pub nodes: BTreeMap<String, ParsedNode>,
}

impl Subtree {
    pub fn root_node(&self) -> &ParsedNode {
        &self.nodes[&self.root]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

fn violation(offset: usize, message: impl Into<String>) -> Error {
    Error::GrammarViolation {
        offset,
        message: message.into(),
    }
}

struct RawNode {
    level: usize,
    title: String,
    keywords: Vec<String>,
    summary: Option<String>,
    context_lines: Vec<String>,
    children: Vec<usize>,
}

/// Parse a structured reply into subtrees. Pure and deterministic.
pub fn parse_structured_reply(text: &str) -> Result<Vec<Subtree>> {
    let mut nodes: Vec<RawNode> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    let mut roots: Vec<usize> = Vec::new();
    // Metadata lines are only recognized directly after a heading, before
    // any body text.
    let mut in_metadata = false;

    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        let line_start = offset;
        offset += line.len();
        let content = line.strip_suffix('\n').unwrap_or(line);
        let content = content.strip_suffix('\r').unwrap_or(content);
        let trimmed = content.trim_start();

        if trimmed.starts_with('#') {
            let indent = content.len() - trimmed.len();
            let level = trimmed.bytes().take_while(|&b| b == b'#').count();
            let title = trimmed[level..].trim();
            if title.is_empty() {
                return Err(violation(line_start + indent, "heading without a title"));
            }
            while stack.last().is_some_and(|&idx| nodes[idx].level >= level) {
                stack.pop();
            }
            let parent = stack.last().copied();
            let idx = nodes.len();
            nodes.push(RawNode {
                level,
                title: title.to_string(),
                keywords: Vec::new(),
                summary: None,
                context_lines: Vec::new(),
                children: Vec::new(),
            });
            match parent {
                Some(p) => nodes[p].children.push(idx),
                None => roots.push(idx),
            }
            stack.push(idx);
            in_metadata = true;
            continue;
        }

        let Some(&current) = stack.last() else {
            if trimmed.is_empty() {
                continue;
            }
            let indent = content.len() - trimmed.len();
            return Err(violation(
                line_start + indent,
                "content before the first heading",
            ));
        };

        if in_metadata {
            if let Some(rest) = trimmed.strip_prefix("KEYWORDS:") {
                nodes[current].keywords = rest
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect();
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix("SUMMARY:") {
                let summary = rest.trim();
                if !summary.is_empty() {
                    nodes[current].summary = Some(summary.to_string());
                }
                in_metadata = false;
                continue;
            }
        }
        if !trimmed.is_empty() {
            in_metadata = false;
        }
        nodes[current].context_lines.push(content.to_string());
    }

    if roots.is_empty() {
        return Err(violation(0, "reply contains no headings"));
    }

    let mut subtrees = Vec::with_capacity(roots.len());
    for (subtree_idx, &root) in roots.iter().enumerate() {
        subtrees.push(build_subtree(&nodes, root, subtree_idx));
    }
    Ok(subtrees)
}

fn build_subtree(nodes: &[RawNode], root: usize, subtree_idx: usize) -> Subtree {
    // Pre-order walk assigning ids and depths.
    let mut out = BTreeMap::new();
    let mut order = Vec::new();
    let mut walk = vec![(root, 0usize)];
    while let Some((idx, depth)) = walk.pop() {
        order.push((idx, depth));
        for &child in nodes[idx].children.iter().rev() {
            walk.push((child, depth + 1));
        }
    }
    let mut ids = BTreeMap::new();
    for (pos, (idx, _)) in order.iter().enumerate() {
        ids.insert(*idx, format!("s{subtree_idx}.n{pos}"));
    }
    for (idx, depth) in order {
        let raw = &nodes[idx];
        let context = raw.context_lines.join("\n").trim().to_string();
        let is_leaf = raw.children.is_empty();
        let summary = match &raw.summary {
            Some(s) => s.clone(),
            None => default_summary(&context, &raw.title, is_leaf),
        };
        out.insert(
            ids[&idx].clone(),
            ParsedNode {
                node_id: ids[&idx].clone(),
                title: raw.title.clone(),
                keywords: raw.keywords.clone(),
                summary,
                context,
                context_span: None,
                children: raw.children.iter().map(|c| ids[c].clone()).collect(),
                depth,
            },
        );
    }
    Subtree {
        root: ids[&root].clone(),
        chunk_id: 0,
        nodes: out,
    }
}

/// Missing SUMMARY lines default to the first 200 characters of the node's
/// context, falling back to the title when there is no context.
fn default_summary(context: &str, title: &str, _is_leaf: bool) -> String {
    if context.is_empty() {
        title.to_string()
    } else {
        context.chars().take(200).collect()
    }
}

/// Parse one chunk through the chat backend.
///
/// On a grammar violation the chunk is re-prompted once with the violation
/// message appended; if the repair also fails the chunk degrades to a single
/// root-only subtree wrapping the raw text, and the degradation is logged in
/// the run trace. Gateway errors propagate.
pub fn parse_chunk(chunk: &Chunk, gateway: &ChatGateway) -> Result<Vec<Subtree>> {
    let user = hsp_user_prompt(&chunk.text);
    let req = ChatRequest::new(CallTag::Parse, HSP_SYSTEM_PROMPT, &user);
    let reply = gateway.complete(&req)?;

    let parsed = match parse_structured_reply(&reply.text) {
        Ok(subtrees) => subtrees,
        Err(first_err) => {
            gateway.trace().record(
                gateway.trace().now_ms(),
                EventKind::Degradation,
                Some(CallTag::Parse),
                None,
                Outcome::Degraded(format!("chunk {}: repair attempt", chunk.chunk_id)),
                Some(first_err.to_string()),
            );
            let repair_user = format!(
                "{user}\n\nThe previous reply violated the outline format ({first_err}). \
                 Reply again using only heading lines, optional KEYWORDS:/SUMMARY: lines, and body text."
            );
            let repair_req = ChatRequest::new(CallTag::Parse, HSP_SYSTEM_PROMPT, repair_user);
            let repair_reply = gateway.complete(&repair_req)?;
            match parse_structured_reply(&repair_reply.text) {
                Ok(subtrees) => subtrees,
                Err(second_err) => {
                    gateway.trace().record(
                        gateway.trace().now_ms(),
                        EventKind::Degradation,
                        Some(CallTag::Parse),
                        None,
                        Outcome::Degraded(format!(
                            "chunk {}: degraded to root-only subtree",
                            chunk.chunk_id
                        )),
                        Some(second_err.to_string()),
                    );
                    vec![fallback_subtree(chunk)]
                }
            }
        }
    };
    Ok(anchor_to_chunk(parsed, chunk))
}

/// Root-only subtree wrapping the raw chunk text, used when parsing failed
/// even after the repair attempt.
pub fn fallback_subtree(chunk: &Chunk) -> Subtree {
    let title = format!("Chunk {} of {}", chunk.chunk_id, chunk.doc_id);
    let summary: String = chunk.text.trim().chars().take(200).collect();
    let node = ParsedNode {
        node_id: "s0.n0".to_string(),
        title: title.clone(),
        keywords: Vec::new(),
        summary: if summary.is_empty() { title } else { summary },
        context: chunk.text.clone(),
        context_span: Some((0, chunk.text.len())),
        children: Vec::new(),
        depth: 0,
    };
    Subtree {
        root: node.node_id.clone(),
        chunk_id: chunk.chunk_id,
        nodes: BTreeMap::from([(node.node_id.clone(), node)]),
    }
}

/// Stamp subtrees with the chunk id, make node ids globally unique, and map
/// node contexts onto byte spans of the chunk text.
///
/// Spans are assigned by scanning the chunk monotonically in node document
/// order, so spans within one chunk never overlap even when two nodes carry
/// identical context text.
fn anchor_to_chunk(subtrees: Vec<Subtree>, chunk: &Chunk) -> Vec<Subtree> {
    let mut search_from = 0usize;
    subtrees
        .into_iter()
        .map(|subtree| {
            let prefix = format!("c{}.", chunk.chunk_id);
            let mut nodes = BTreeMap::new();
            // BTreeMap order is document order: ids embed the pre-order
            // position... except lexicographic "n10" < "n2"; walk ids by
            // numeric position instead.
            let mut ordered: Vec<ParsedNode> = subtree.nodes.into_values().collect();
            ordered.sort_by_key(|n| {
                n.node_id
                    .rsplit('n')
                    .next()
                    .and_then(|s| s.parse::<usize>().ok())
                    .unwrap_or(0)
            });
            for mut node in ordered {
                node.node_id = format!("{prefix}{}", node.node_id);
                node.children = node
                    .children
                    .iter()
                    .map(|c| format!("{prefix}{c}"))
                    .collect();
                if node.context_span.is_none() && !node.context.is_empty() {
                    if let Some(pos) = chunk.text[search_from..].find(&node.context) {
                        let start = search_from + pos;
                        let end = start + node.context.len();
                        node.context_span = Some((start, end));
                        search_from = end;
                    }
                }
                nodes.insert(node.node_id.clone(), node);
            }
            Subtree {
                root: format!("{prefix}{}", subtree.root),
                chunk_id: chunk.chunk_id,
                nodes,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_heading_with_two_subheadings() {
        let reply =
            "# T\nKEYWORDS: a, b\nSUMMARY: s\nbody\n## C1\nchild one text\n## C2\nchild two text\n";
        let subtrees = parse_structured_reply(reply).unwrap();
        assert_eq!(subtrees.len(), 1);
        let tree = &subtrees[0];
        assert_eq!(tree.len(), 3);
        let root = tree.root_node();
        assert_eq!(root.title, "T");
        assert_eq!(root.keywords, vec!["a", "b"]);
        assert_eq!(root.summary, "s");
        assert_eq!(root.context, "body");
        assert_eq!(root.children.len(), 2);
        let c1 = &tree.nodes[&root.children[0]];
        assert_eq!(c1.title, "C1");
        assert_eq!(c1.depth, 1);
    }

    #[test]
    fn two_top_level_headings_form_a_forest() {
        let reply = "# First topic\nsome text\n# Second topic\nother text\n";
        let subtrees = parse_structured_reply(reply).unwrap();
        assert_eq!(subtrees.len(), 2);
        assert_eq!(subtrees[0].root_node().title, "First topic");
        assert_eq!(subtrees[1].root_node().title, "Second topic");
    }

    #[test]
    fn flat_section_gives_root_only_subtree() {
        let reply = "# Only section\njust a paragraph of text\n";
        let subtrees = parse_structured_reply(reply).unwrap();
        assert_eq!(subtrees.len(), 1);
        assert_eq!(subtrees[0].len(), 1);
    }

    #[test]
    fn empty_reply_violates_at_offset_zero() {
        match parse_structured_reply("") {
            Err(Error::GrammarViolation { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected violation, got {other:?}"),
        }
    }

    #[test]
    fn content_before_first_heading_is_a_violation() {
        let reply = "\n\npreamble text\n# Heading\n";
        match parse_structured_reply(reply) {
            Err(Error::GrammarViolation { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("expected violation, got {other:?}"),
        }
    }

    #[test]
    fn heading_without_title_is_a_violation() {
        let reply = "# Ok\n##\nbody\n";
        match parse_structured_reply(reply) {
            Err(Error::GrammarViolation { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("expected violation, got {other:?}"),
        }
    }

    #[test]
    fn level_jump_attaches_to_nearest_shallower_ancestor() {
        let reply = "# Root\n### Deep child\ntext\n## Shallower child\n";
        let subtrees = parse_structured_reply(reply).unwrap();
        let tree = &subtrees[0];
        let root = tree.root_node();
        // Both the ### and ## headings attach directly to the # root.
        assert_eq!(root.children.len(), 2);
        for child_id in &root.children {
            assert_eq!(tree.nodes[child_id].depth, 1);
        }
    }

    #[test]
    fn depth_law_holds() {
        let reply = "# A\n## B\n### C\n#### D\n## E\n";
        let subtrees = parse_structured_reply(reply).unwrap();
        let tree = &subtrees[0];
        for node in tree.nodes.values() {
            for child in &node.children {
                assert_eq!(tree.nodes[child].depth, node.depth + 1);
            }
        }
    }

    #[test]
    fn missing_summary_defaults_to_context_prefix() {
        let reply = "# T\nthis is the body context that stands in for a summary\n";
        let subtrees = parse_structured_reply(reply).unwrap();
        let root = subtrees[0].root_node();
        assert_eq!(
            root.summary,
            "this is the body context that stands in for a summary"
        );
    }

    #[test]
    fn keywords_may_be_empty() {
        let reply = "# T\nKEYWORDS:\nSUMMARY: s\n";
        let subtrees = parse_structured_reply(reply).unwrap();
        assert!(subtrees[0].root_node().keywords.is_empty());
    }

    #[test]
    fn metadata_lines_in_body_stay_body() {
        let reply = "# T\nSUMMARY: real summary\nbody line\nKEYWORDS: not, metadata\n";
        let subtrees = parse_structured_reply(reply).unwrap();
        let root = subtrees[0].root_node();
        assert_eq!(root.summary, "real summary");
        assert!(root.keywords.is_empty());
        assert!(root.context.contains("KEYWORDS: not, metadata"));
    }

    #[test]
    fn parse_is_deterministic() {
        let reply = "# A\n## B\ntext b\n# C\nKEYWORDS: x\ntext c\n";
        let a = parse_structured_reply(reply).unwrap();
        let b = parse_structured_reply(reply).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn context_spans_anchor_monotonically() {
        use crate::chunking::Chunk;
        let text = "alpha beta. alpha beta.";
        let chunk = Chunk {
            doc_id: "d".into(),
            chunk_id: 3,
            byte_start: 0,
            byte_end: text.len(),
            text: text.into(),
            token_count: 4,
        };
        let subtrees =
            vec![parse_structured_reply("# A\nalpha beta.\n# B\nalpha beta.\n").unwrap()]
                .into_iter()
                .flatten()
                .collect::<Vec<_>>();
        let anchored = anchor_to_chunk(subtrees, &chunk);
        let span_a = anchored[0].root_node().context_span.unwrap();
        let span_b = anchored[1].root_node().context_span.unwrap();
        assert_eq!(span_a, (0, 11));
        assert_eq!(span_b, (12, 23));
        assert!(anchored[0].root.starts_with("c3."));
    }
}
