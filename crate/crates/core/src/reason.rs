//! Recursive map/reduce reasoning over a DocTree.
//!
//! Evaluation is post-order: every node's children are mapped and their
//! verdicts reduced before the node's own map runs. Sibling maps may overlap
//! in time up to the configured parallelism. Reduce is skipped for
//! single-child groups. Failures degrade (a deterministic local fallback
//! stands in for a failed reduce; a failed map yields an "insufficient"
//! verdict) instead of aborting the run.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{ChatGateway, ChatRequest};
use crate::trace::{CallTag, EventKind, Outcome, RunTrace};
use crate::tree::{DocTree, TreeNode};

/// Sentinel answer for sections that cannot answer the question.
pub const INSUFFICIENT: &str = "insufficient";

/// The structured result of one map or reduce step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeVerdict {
    pub key_info: Vec<String>,
    pub rationale: String,
    pub answer: String,
    pub confidence: f64,
}

impl NodeVerdict {
    /// Fallback verdict for unrecoverable map failures.
    pub fn degraded(reason: &str) -> Self {
        Self {
            key_info: Vec::new(),
            rationale: reason.to_string(),
            answer: INSUFFICIENT.to_string(),
            confidence: 0.0,
        }
    }

    /// Render as the four-line wire block. Confidence is omitted when the
    /// in-context confidence measure is ablated.
    pub fn render(&self, include_confidence: bool) -> String {
        let mut out = format!(
            "KEY_INFO: {}\nRATIONALE: {}\nANSWER: {}",
            self.key_info.join("; "),
            self.rationale,
            self.answer,
        );
        if include_confidence {
            out.push_str(&format!("\nCONFIDENCE: {}", self.confidence));
        }
        out
    }
}

/// A parsed verdict plus the raw confidence when it had to be clamped into
/// [0, 1].
pub struct ParsedVerdict {
    pub verdict: NodeVerdict,
    pub clamped_from: Option<f64>,
}

/// Parse the four-line verdict block. `KEY_INFO` is a semicolon list;
/// `ANSWER` and `CONFIDENCE` are required; out-of-range confidence clamps.
pub fn parse_verdict(text: &str) -> Result<ParsedVerdict> {
    let mut key_info = None;
    let mut rationale = None;
    let mut answer = None;
    let mut confidence = None;
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix("KEY_INFO:") {
            key_info.get_or_insert_with(|| {
                rest.split(';')
                    .map(str::trim)
                    .filter(|s| !s.is_empty() && !s.eq_ignore_ascii_case("none"))
                    .map(str::to_string)
                    .collect::<Vec<_>>()
            });
        } else if let Some(rest) = trimmed.strip_prefix("RATIONALE:") {
            rationale.get_or_insert_with(|| rest.trim().to_string());
        } else if let Some(rest) = trimmed.strip_prefix("ANSWER:") {
            answer.get_or_insert_with(|| rest.trim().to_string());
        } else if let Some(rest) = trimmed.strip_prefix("CONFIDENCE:") {
            confidence.get_or_insert_with(|| rest.trim().to_string());
        }
    }
    let answer = answer.ok_or_else(|| Error::VerdictParseFailure("missing ANSWER line".into()))?;
    let answer = if answer.is_empty() {
        INSUFFICIENT.to_string()
    } else {
        answer
    };
    let raw_confidence: f64 = confidence
        .ok_or_else(|| Error::VerdictParseFailure("missing CONFIDENCE line".into()))?
        .parse()
        .map_err(|e| Error::VerdictParseFailure(format!("bad CONFIDENCE value: {e}")))?;
    if !raw_confidence.is_finite() {
        return Err(Error::VerdictParseFailure("non-finite CONFIDENCE".into()));
    }
    let clamped = raw_confidence.clamp(0.0, 1.0);
    Ok(ParsedVerdict {
        verdict: NodeVerdict {
            key_info: key_info.unwrap_or_default(),
            rationale: rationale.unwrap_or_default(),
            answer,
            confidence: clamped,
        },
        clamped_from: (clamped != raw_confidence).then_some(raw_confidence),
    })
}

/// Ablation toggles and scheduling bounds for one reasoning run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReasonOptions {
    pub confidence_enabled: bool,
    pub aggregation_enabled: bool,
    pub parallelism: usize,
}

impl Default for ReasonOptions {
    fn default() -> Self {
        Self {
            confidence_enabled: true,
            aggregation_enabled: true,
            parallelism: 4,
        }
    }
}

/// One reasoning run: a tree, a query, and the toggles.
pub struct ReasonPlan<'a> {
    pub tree: &'a DocTree,
    pub query: String,
    pub options: ReasonOptions,
}

pub const MAP_SYSTEM_PROMPT: &str = "\
You answer a question from a single document section, using only the section
content and any findings already gathered from its subsections.
Reply with exactly four lines:
KEY_INFO: <semicolon-separated facts relevant to the question, or none>
RATIONALE: <one line of reasoning>
ANSWER: <short answer, or insufficient if this section cannot answer>
CONFIDENCE: <number between 0 and 1>";

pub const REDUCE_SYSTEM_PROMPT: &str = "\
You merge findings from sibling document sections, resolving conflicts and
reaching consensus. Prefer findings that are better supported; when
confidence scores are given, weigh findings by them.
Reply with exactly four lines:
KEY_INFO: <deduplicated union of the useful facts, semicolon-separated>
RATIONALE: <one line explaining the consensus>
ANSWER: <the agreed short answer, or insufficient>
CONFIDENCE: <number between 0 and 1>";

/// User prompt for a map step over one node.
pub fn map_user_prompt(
    node: &TreeNode,
    query: &str,
    child_verdict: Option<&NodeVerdict>,
    include_confidence: bool,
) -> String {
    let mut out = format!("Question: {query}\n\nSection:\nTITLE: {}\n", node.title);
    if !node.keywords.is_empty() {
        out.push_str(&format!("KEYWORDS: {}\n", node.keywords.join(", ")));
    }
    out.push_str(&format!("SUMMARY: {}\n", node.summary));
    if let Some(context) = &node.context {
        out.push_str(&format!("CONTEXT: {context}\n"));
    }
    if let Some(verdict) = child_verdict {
        out.push_str("\nFindings from this section's subsections:\n");
        out.push_str(&verdict.render(include_confidence));
        out.push('\n');
    }
    out
}

/// User prompt for a reduce step over sibling verdicts.
pub fn reduce_user_prompt(
    verdicts: &[NodeVerdict],
    query: &str,
    include_confidence: bool,
) -> String {
    let mut out = format!(
        "Question: {query}\n\nFindings from {} sibling sections:\n",
        verdicts.len()
    );
    for (i, verdict) in verdicts.iter().enumerate() {
        out.push_str(&format!(
            "[{}]\n{}\n",
            i + 1,
            verdict.render(include_confidence)
        ));
    }
    out
}

/// Strip punctuation, lowercase, and collapse whitespace for answer voting.
fn normalize_answer(answer: &str) -> String {
    answer
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Deterministic local conflict resolution used when the reduce model call
/// fails: highest confidence wins (ties to the earliest sibling in layer
/// order); with confidence ablated, plurality vote on normalized answers
/// (ties to the earliest).
pub fn fallback_reduce(verdicts: &[NodeVerdict], confidence_enabled: bool) -> NodeVerdict {
    let winner = if confidence_enabled {
        let mut best = 0usize;
        for (i, v) in verdicts.iter().enumerate().skip(1) {
            if v.confidence > verdicts[best].confidence {
                best = i;
            }
        }
        best
    } else {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for v in verdicts {
            *counts.entry(normalize_answer(&v.answer)).or_insert(0) += 1;
        }
        let max_count = counts.values().copied().max().unwrap_or(0);
        verdicts
            .iter()
            .position(|v| counts[&normalize_answer(&v.answer)] == max_count)
            .unwrap_or(0)
    };
    let mut key_info = Vec::new();
    for v in verdicts {
        for item in &v.key_info {
            if !key_info.contains(item) {
                key_info.push(item.clone());
            }
        }
    }
    NodeVerdict {
        key_info,
        rationale: verdicts[winner].rationale.clone(),
        answer: verdicts[winner].answer.clone(),
        confidence: verdicts[winner].confidence,
    }
}

fn log_degradation(gateway: &ChatGateway, tag: CallTag, node_id: Option<String>, message: String) {
    gateway.trace().record(
        gateway.trace().now_ms(),
        EventKind::Degradation,
        Some(tag),
        node_id,
        Outcome::Degraded(message),
        None,
    );
}

/// Complete a chat request and parse the verdict, with one repair attempt on
/// a parse failure. Returns `Err` only for gateway failures.
fn complete_verdict(gateway: &ChatGateway, req: &ChatRequest) -> Result<NodeVerdict> {
    let resp = gateway.complete(req)?;
    match parse_verdict(&resp.text) {
        Ok(parsed) => {
            if let Some(raw) = parsed.clamped_from {
                log_degradation(
                    gateway,
                    req.tag,
                    req.node_id.clone(),
                    format!("confidence {raw} clamped into [0, 1]"),
                );
            }
            Ok(parsed.verdict)
        }
        Err(first_err) => {
            let repair = ChatRequest {
                user_prompt: format!(
                    "{}\n\nThe previous reply could not be parsed ({first_err}). Reply with \
                     exactly the four labeled lines KEY_INFO, RATIONALE, ANSWER, CONFIDENCE.",
                    req.user_prompt
                ),
                ..req.clone()
            };
            let resp = gateway.complete(&repair)?;
            match parse_verdict(&resp.text) {
                Ok(parsed) => Ok(parsed.verdict),
                Err(second_err) => {
                    log_degradation(
                        gateway,
                        req.tag,
                        req.node_id.clone(),
                        format!("verdict parse failed after repair: {second_err}"),
                    );
                    Ok(NodeVerdict::degraded("parse failure"))
                }
            }
        }
    }
}

/// Map step over one node. Total: failures degrade to an "insufficient"
/// verdict and are logged in the trace.
pub fn map_node(
    node: &TreeNode,
    query: &str,
    child_verdict: Option<&NodeVerdict>,
    options: &ReasonOptions,
    gateway: &ChatGateway,
) -> NodeVerdict {
    let user = map_user_prompt(node, query, child_verdict, options.confidence_enabled);
    let req = ChatRequest::new(CallTag::Map, MAP_SYSTEM_PROMPT, user).with_node(node.id.clone());
    match complete_verdict(gateway, &req) {
        Ok(verdict) => verdict,
        Err(err) => {
            log_degradation(
                gateway,
                CallTag::Map,
                Some(node.id.clone()),
                format!("map failed: {err}"),
            );
            NodeVerdict::degraded("map failure")
        }
    }
}

/// Reduce step across sibling verdicts. A single verdict passes through
/// unchanged with no model call and no trace event (the skip rule); failures
/// fall back to the deterministic local resolution.
pub fn reduce_siblings(
    verdicts: &[NodeVerdict],
    query: &str,
    options: &ReasonOptions,
    gateway: &ChatGateway,
    group_node_id: Option<&str>,
) -> NodeVerdict {
    match verdicts.len() {
        0 => NodeVerdict::degraded("no sibling verdicts"),
        1 => verdicts[0].clone(),
        _ => {
            let user = reduce_user_prompt(verdicts, query, options.confidence_enabled);
            let mut req = ChatRequest::new(CallTag::Reduce, REDUCE_SYSTEM_PROMPT, user);
            if let Some(id) = group_node_id {
                req = req.with_node(id.to_string());
            }
            match complete_verdict(gateway, &req) {
                Ok(verdict) => verdict,
                Err(err) => {
                    log_degradation(
                        gateway,
                        CallTag::Reduce,
                        group_node_id.map(str::to_string),
                        format!("reduce fell back to local resolution: {err}"),
                    );
                    fallback_reduce(verdicts, options.confidence_enabled)
                }
            }
        }
    }
}

/// Work-queue state for the post-order scheduler.
struct Scheduler {
    ready: Mutex<SchedulerState>,
    cv: Condvar,
}

struct SchedulerState {
    queue: VecDeque<String>,
    outstanding: usize,
}

impl Scheduler {
    fn new(initial: Vec<String>, total: usize) -> Self {
        Self {
            ready: Mutex::new(SchedulerState {
                queue: initial.into_iter().collect(),
                outstanding: total,
            }),
            cv: Condvar::new(),
        }
    }

    /// Next ready node, or `None` once every task has finished.
    fn next(&self) -> Option<String> {
        let mut state = self.ready.lock().expect("scheduler lock");
        loop {
            if let Some(id) = state.queue.pop_front() {
                return Some(id);
            }
            if state.outstanding == 0 {
                return None;
            }
            state = self.cv.wait(state).expect("scheduler wait");
        }
    }

    fn push(&self, id: String) {
        let mut state = self.ready.lock().expect("scheduler lock");
        state.queue.push_back(id);
        self.cv.notify_one();
    }

    fn task_done(&self) {
        let mut state = self.ready.lock().expect("scheduler lock");
        state.outstanding -= 1;
        if state.outstanding == 0 {
            self.cv.notify_all();
        }
    }
}

/// Run recursive map/reduce reasoning over the plan's tree.
///
/// With aggregation enabled the full tree is traversed post-order; with it
/// disabled the tree is treated as flat: every layer-0 node maps directly
/// and one global reduce produces the answer.
pub fn reason(plan: &ReasonPlan, gateway: &ChatGateway) -> Result<(NodeVerdict, RunTrace)> {
    if plan.options.parallelism == 0 {
        return Err(Error::InvalidConfig(
            "parallelism must be at least 1".into(),
        ));
    }
    let tree = plan.tree;
    tree.validate()
        .map_err(|e| Error::InvalidConfig(format!("invalid tree: {e}")))?;

    // Task universe and dependency edges for the selected mode.
    let (task_ids, tops) = if plan.options.aggregation_enabled {
        let mut ids = Vec::new();
        let mut stack: Vec<String> = tree.roots().to_vec();
        while let Some(id) = stack.pop() {
            ids.push(id.clone());
            for child in children(tree, &id, plan.options.aggregation_enabled) {
                stack.push(child.clone());
            }
        }
        (ids, tree.roots().to_vec())
    } else {
        let l0 = tree.layers()[0].clone();
        (l0.clone(), l0)
    };

    let mut pending: HashMap<String, usize> = HashMap::new();
    let mut initial = Vec::new();
    for id in &task_ids {
        let deg = children(tree, id, plan.options.aggregation_enabled).len();
        pending.insert(id.clone(), deg);
        if deg == 0 {
            initial.push(id.clone());
        }
    }
    // Deterministic initial queue order.
    initial.sort();

    let scheduler = Scheduler::new(initial, task_ids.len());
    let pending = Mutex::new(pending);
    let verdicts: Mutex<HashMap<String, NodeVerdict>> = Mutex::new(HashMap::new());

    let workers = plan.options.parallelism.min(task_ids.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                while let Some(id) = scheduler.next() {
                    run_node_task(plan, gateway, &id, &verdicts);
                    // Unblock the parent once its last child is done.
                    if plan.options.aggregation_enabled {
                        if let Some(parent) = tree.parent_of(&id) {
                            let mut pending = pending.lock().expect("pending lock");
                            if let Some(count) = pending.get_mut(parent) {
                                *count -= 1;
                                if *count == 0 {
                                    scheduler.push(parent.clone());
                                }
                            }
                        }
                    }
                    scheduler.task_done();
                }
            });
        }
    });

    let verdicts = verdicts.into_inner().expect("verdict lock");
    let top_verdicts: Vec<NodeVerdict> = tops.iter().map(|id| verdicts[id].clone()).collect();
    let final_verdict = reduce_siblings(&top_verdicts, &plan.query, &plan.options, gateway, None);
    Ok((final_verdict, gateway.trace().finalize()))
}

fn children<'t>(tree: &'t DocTree, id: &str, aggregation_enabled: bool) -> &'t [String] {
    if aggregation_enabled {
        tree.children_of(id)
    } else {
        &[]
    }
}

/// Reduce the node's child verdicts (skip rule applies), then map the node.
fn run_node_task(
    plan: &ReasonPlan,
    gateway: &ChatGateway,
    id: &str,
    verdicts: &Mutex<HashMap<String, NodeVerdict>>,
) {
    let tree = plan.tree;
    let child_ids = children(tree, id, plan.options.aggregation_enabled);
    let child_verdict = if child_ids.is_empty() {
        None
    } else {
        let gathered: Vec<NodeVerdict> = {
            let verdicts = verdicts.lock().expect("verdict lock");
            child_ids.iter().map(|c| verdicts[c].clone()).collect()
        };
        Some(reduce_siblings(
            &gathered,
            &plan.query,
            &plan.options,
            gateway,
            Some(id),
        ))
    };
    let node = tree.node(id).expect("task over existing node");
    let verdict = map_node(
        node,
        &plan.query,
        child_verdict.as_ref(),
        &plan.options,
        gateway,
    );
    verdicts
        .lock()
        .expect("verdict lock")
        .insert(id.to_string(), verdict);
}
