//! Scoring: token-level F1, Rouge-L, and multiple-choice accuracy over
//! line-delimited dataset files.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalize an answer string the way QA benchmarks score it: lowercase,
/// delete punctuation characters, drop articles, collapse whitespace.
pub fn normalize_text(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    no_punct
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn tokens(text: &str) -> Vec<String> {
    normalize_text(text)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Token-level F1 with multiset overlap. Both sides empty after
/// normalization scores 1.0; exactly one side empty scores 0.0.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let pred = tokens(prediction);
    let gold = tokens(gold);
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Rouge-L: F-measure (β = 1) over the longest common subsequence of
/// normalized tokens. Empty handling matches [`token_f1`].
pub fn rouge_l(prediction: &str, gold: &str) -> f64 {
    let pred = tokens(prediction);
    let gold = tokens(gold);
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&pred, &gold);
    if lcs == 0 {
        return 0.0;
    }
    let precision = lcs as f64 / pred.len() as f64;
    let recall = lcs as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// LCS length with a rolling two-row table.
fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Match a prediction against the offered choices: first by exact letter
/// label, then by normalized choice-text containment (the longest contained
/// choice wins, ties to the lowest index). `Ok(true)` iff the matched choice
/// is the gold one.
pub fn score_multichoice(prediction: &str, choices: &[String], gold: &str) -> Result<bool> {
    if choices.is_empty() {
        return Err(Error::NoChoiceMatched);
    }
    let trimmed = prediction
        .trim()
        .trim_matches(|c: char| "()[].:*\"'".contains(c))
        .trim();
    if trimmed.len() == 1 {
        let ch = trimmed
            .chars()
            .next()
            .expect("single char")
            .to_ascii_uppercase();
        if ch.is_ascii_uppercase() {
            let idx = (ch as u8 - b'A') as usize;
            if idx < choices.len() {
                return Ok(normalize_text(&choices[idx]) == normalize_text(gold));
            }
        }
    }
    let pred_norm = normalize_text(prediction);
    let mut best: Option<(usize, usize)> = None; // (normalized length, index)
    for (i, choice) in choices.iter().enumerate() {
        let choice_norm = normalize_text(choice);
        if choice_norm.is_empty() || !pred_norm.contains(&choice_norm) {
            continue;
        }
        if best.is_none_or(|(len, _)| choice_norm.len() > len) {
            best = Some((choice_norm.len(), i));
        }
    }
    match best {
        Some((_, idx)) => Ok(normalize_text(&choices[idx]) == normalize_text(gold)),
        None => Err(Error::NoChoiceMatched),
    }
}

/// Best score over multiple references.
pub fn best_over_golds(
    metric: impl Fn(&str, &str) -> f64,
    prediction: &str,
    gold_answers: &[String],
) -> f64 {
    gold_answers
        .iter()
        .map(|g| metric(prediction, g))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Qa,
    Multichoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSample {
    pub sample_id: String,
    pub context: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
}

/// Dataset file formats. Only line-delimited JSON records ship.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Jsonl,
}

/// Raw record shape compatible with LongBench-style exports.
#[derive(Deserialize)]
struct RawSample {
    #[serde(alias = "_id", alias = "sample_id", default)]
    id: Option<String>,
    #[serde(default)]
    context: String,
    #[serde(alias = "input", default)]
    question: String,
    #[serde(alias = "gold_answers", default)]
    answers: Vec<String>,
    #[serde(default)]
    task: Option<String>,
    #[serde(default)]
    choices: Option<Vec<String>>,
}

/// Result of loading a dataset: parsed samples plus per-line errors for the
/// records that failed validation.
#[derive(Debug)]
pub struct DatasetLoad {
    pub samples: Vec<DatasetSample>,
    pub errors: Vec<Error>,
}

pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<DatasetLoad> {
    match format {
        DatasetFormat::Jsonl => read_dataset(File::open(path)?),
    }
}

/// Parse line-delimited records; invalid lines are reported with their line
/// numbers while valid lines are kept.
pub fn read_dataset<R: Read>(input: R) -> Result<DatasetLoad> {
    let reader = BufReader::new(input);
    let mut samples = Vec::new();
    let mut errors = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_sample(&line, line_no) {
            Ok(sample) => samples.push(sample),
            Err(err) => errors.push(err),
        }
    }
    Ok(DatasetLoad { samples, errors })
}

fn parse_sample(line: &str, line_no: usize) -> Result<DatasetSample> {
    let raw: RawSample = serde_json::from_str(line).map_err(|e| Error::FormatError {
        line: line_no,
        message: e.to_string(),
    })?;
    let fail = |message: &str| Error::FormatError {
        line: line_no,
        message: message.to_string(),
    };
    let task = match raw.task.as_deref() {
        Some("qa") => TaskKind::Qa,
        Some("multichoice") => TaskKind::Multichoice,
        Some(other) => return Err(fail(&format!("unknown task kind `{other}`"))),
        None if raw.choices.is_some() => TaskKind::Multichoice,
        None => TaskKind::Qa,
    };
    if raw.question.is_empty() {
        return Err(fail("missing question/input field"));
    }
    if raw.answers.is_empty() {
        return Err(fail("missing answers"));
    }
    if task == TaskKind::Multichoice {
        let choices = raw
            .choices
            .as_deref()
            .ok_or_else(|| fail("multichoice record without choices"))?;
        if choices.is_empty() {
            return Err(fail("multichoice record with empty choices"));
        }
        let gold = &raw.answers[0];
        if !choices
            .iter()
            .any(|c| normalize_text(c) == normalize_text(gold))
        {
            return Err(fail("gold answer is not one of the choices"));
        }
    }
    Ok(DatasetSample {
        sample_id: raw.id.unwrap_or_else(|| format!("line-{line_no}")),
        context: raw.context,
        question: raw.question,
        gold_answers: raw.answers,
        task,
        choices: raw.choices,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub prediction: String,
    pub f1: f64,
    pub rouge_l: f64,
    /// Present for multichoice samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    /// Set when the prediction matched no choice or the strategy failed.
    pub flagged: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub total: usize,
    pub qa: usize,
    pub multichoice: usize,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_sample: Vec<SampleScore>,
    pub mean_f1: f64,
    pub mean_rouge_l: f64,
    /// Fraction correct over multichoice samples; absent without any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub counts: ReportCounts,
}

impl ScoreReport {
    /// Score every sample with the given answering function. A failed answer
    /// scores as an empty prediction and flags the sample; the run completes
    /// regardless.
    pub fn compute(
        samples: &[DatasetSample],
        mut answer_fn: impl FnMut(&DatasetSample) -> Result<String>,
    ) -> ScoreReport {
        let mut per_sample = Vec::with_capacity(samples.len());
        for sample in samples {
            let (prediction, answer_failed) = match answer_fn(sample) {
                Ok(text) => (text, false),
                Err(_) => (String::new(), true),
            };
            let f1 = best_over_golds(token_f1, &prediction, &sample.gold_answers);
            let rl = best_over_golds(rouge_l, &prediction, &sample.gold_answers);
            let (correct, mut flagged) = match sample.task {
                TaskKind::Qa => (None, false),
                TaskKind::Multichoice => {
                    let choices = sample.choices.as_deref().unwrap_or(&[]);
                    match score_multichoice(&prediction, choices, &sample.gold_answers[0]) {
                        Ok(correct) => (Some(correct), false),
                        Err(_) => (Some(false), true),
                    }
                }
            };
            flagged |= answer_failed;
            per_sample.push(SampleScore {
                sample_id: sample.sample_id.clone(),
                prediction,
                f1,
                rouge_l: rl,
                correct,
                flagged,
            });
        }
        Self::aggregate(per_sample)
    }

    fn aggregate(per_sample: Vec<SampleScore>) -> ScoreReport {
        let total = per_sample.len();
        let mean = |f: fn(&SampleScore) -> f64| {
            if total == 0 {
                0.0
            } else {
                per_sample.iter().map(f).sum::<f64>() / total as f64
            }
        };
        let mean_f1 = mean(|s| s.f1);
        let mean_rouge_l = mean(|s| s.rouge_l);
        let mc: Vec<&SampleScore> = per_sample.iter().filter(|s| s.correct.is_some()).collect();
        let accuracy = if mc.is_empty() {
            None
        } else {
            Some(mc.iter().filter(|s| s.correct == Some(true)).count() as f64 / mc.len() as f64)
        };
        let counts = ReportCounts {
            total,
            qa: total - mc.len(),
            multichoice: mc.len(),
            flagged: per_sample.iter().filter(|s| s.flagged).count(),
        };
        ScoreReport {
            per_sample,
            mean_f1,
            mean_rouge_l,
            accuracy,
            counts,
        }
    }

    /// Plain-text table for standard output.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>8} {:>8} {:>8} {:>4}\n",
            "sample", "f1", "rouge_l", "correct", "flag"
        ));
        for s in &self.per_sample {
            out.push_str(&format!(
                "{:<24} {:>8.4} {:>8.4} {:>8} {:>4}\n",
                s.sample_id,
                s.f1,
                s.rouge_l,
                s.correct.map_or("-".to_string(), |c| c.to_string()),
                if s.flagged { "!" } else { "" }
            ));
        }
        out.push_str(&format!(
            "mean_f1 {:.4}  mean_rouge_l {:.4}  accuracy {}  samples {}  flagged {}\n",
            self.mean_f1,
            self.mean_rouge_l,
            self.accuracy.map_or("-".to_string(), |a| format!("{a:.4}")),
            self.counts.total,
            self.counts.flagged,
        ));
        out
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self)
            .map_err(|e| Error::MalformedBackendReply(e.to_string()))?;
        writeln!(out)?;
        Ok(())
    }
}
