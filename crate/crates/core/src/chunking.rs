//! Fixed-length token chunking with byte-span provenance.
//!
//! A document is split into chunks of exactly `chunk_size` tokens (the last
//! chunk may be shorter). Chunk boundaries always fall on token edges, and the
//! inter-token bytes are attached so that concatenating the chunk texts in
//! order reproduces the source text exactly.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

use crate::error::{Error, Result};

/// How token boundaries are found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerScheme {
    /// Maximal runs of non-whitespace characters.
    Whitespace,
    /// Unicode word boundaries (UAX #29), keeping only alphanumeric-bearing
    /// segments.
    UnicodeWord,
}

/// Names a deterministic tokenization rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub scheme: TokenizerScheme,
    pub name: String,
}

impl TokenizerSpec {
    pub fn whitespace() -> Self {
        Self {
            scheme: TokenizerScheme::Whitespace,
            name: "whitespace".to_string(),
        }
    }

    pub fn unicode_word() -> Self {
        Self {
            scheme: TokenizerScheme::UnicodeWord,
            name: "unicode-word".to_string(),
        }
    }
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        Self::whitespace()
    }
}

/// One token: its text and the byte range it occupies in the source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token<'a> {
    pub text: &'a str,
    pub byte_start: usize,
    pub byte_end: usize,
}

/// A fixed-token-length slice of a source document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_id: String,
    pub chunk_id: usize,
    pub byte_start: usize,
    pub byte_end: usize,
    pub text: String,
    #[serde(default)]
    pub token_count: usize,
}

/// Split `text` into tokens with byte spans. Pure and deterministic; empty
/// input yields an empty sequence.
pub fn tokenize<'a>(text: &'a str, spec: &TokenizerSpec) -> Vec<Token<'a>> {
    match spec.scheme {
        TokenizerScheme::Whitespace => {
            let mut tokens = Vec::new();
            let mut start = None;
            for (i, ch) in text.char_indices() {
                if ch.is_whitespace() {
                    if let Some(s) = start.take() {
                        tokens.push(Token {
                            text: &text[s..i],
                            byte_start: s,
                            byte_end: i,
                        });
                    }
                } else if start.is_none() {
                    start = Some(i);
                }
            }
            if let Some(s) = start {
                tokens.push(Token {
                    text: &text[s..],
                    byte_start: s,
                    byte_end: text.len(),
                });
            }
            tokens
        }
        TokenizerScheme::UnicodeWord => text
            .split_word_bound_indices()
            .filter(|(_, w)| w.chars().any(|c| c.is_alphanumeric()))
            .map(|(i, w)| Token {
                text: w,
                byte_start: i,
                byte_end: i + w.len(),
            })
            .collect(),
    }
}

/// Count tokens in `text` under `spec`.
pub fn count_tokens(text: &str, spec: &TokenizerSpec) -> usize {
    tokenize(text, spec).len()
}

/// Byte offset just past the first `limit` tokens of `text`; `text.len()` if
/// the document has no more than `limit` tokens.
pub fn truncation_boundary(text: &str, limit: usize, spec: &TokenizerSpec) -> usize {
    let tokens = tokenize(text, spec);
    if limit == 0 {
        return 0;
    }
    if tokens.len() <= limit {
        text.len()
    } else {
        tokens[limit - 1].byte_end
    }
}

/// Split a document into fixed-length token chunks.
///
/// Every chunk holds exactly `chunk_size` tokens except possibly the last.
/// Separator bytes between chunks belong to the following chunk, and leading
/// and trailing separators go to the first and last chunk, so the chunk texts
/// concatenate back to the source exactly.
pub fn chunk_document(
    doc_id: &str,
    text: &str,
    chunk_size: usize,
    spec: &TokenizerSpec,
) -> Result<Vec<Chunk>> {
    if chunk_size == 0 {
        return Err(Error::ChunkSizeZero);
    }
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let tokens = tokenize(text, spec);
    if tokens.is_empty() {
        // Separator-only document: keep it intact so the round-trip holds.
        return Ok(vec![Chunk {
            doc_id: doc_id.to_string(),
            chunk_id: 0,
            byte_start: 0,
            byte_end: text.len(),
            text: text.to_string(),
            token_count: 0,
        }]);
    }

    let mut chunks = Vec::new();
    let mut cursor = 0usize;
    let n_chunks = tokens.len().div_ceil(chunk_size);
    for (chunk_id, window) in tokens.chunks(chunk_size).enumerate() {
        let is_last = chunk_id + 1 == n_chunks;
        let end = if is_last {
            text.len()
        } else {
            window.last().expect("non-empty window").byte_end
        };
        chunks.push(Chunk {
            doc_id: doc_id.to_string(),
            chunk_id,
            byte_start: cursor,
            byte_end: end,
            text: text[cursor..end].to_string(),
            token_count: window.len(),
        });
        cursor = end;
    }
    Ok(chunks)
}

/// Write chunks as line-delimited JSON records.
pub fn write_chunks<W: Write>(mut out: W, chunks: &[Chunk]) -> Result<()> {
    for chunk in chunks {
        let line = serde_json::to_string(chunk)
            .map_err(|e| Error::MalformedBackendReply(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Read chunks back from a line-delimited record stream.
pub fn read_chunks<R: Read>(input: R) -> Result<Vec<Chunk>> {
    let reader = BufReader::new(input);
    let mut chunks = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let chunk: Chunk = serde_json::from_str(&line).map_err(|e| Error::FormatError {
            line: idx + 1,
            message: e.to_string(),
        })?;
        chunks.push(chunk);
    }
    Ok(chunks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitespace_collapses_separators() {
        let tokens = tokenize("a b  c", &TokenizerSpec::whitespace());
        let texts: Vec<&str> = tokens.iter().map(|t| t.text).collect();
        assert_eq!(texts, vec!["a", "b", "c"]);
    }

    #[test]
    fn empty_input_yields_no_tokens() {
        assert!(tokenize("", &TokenizerSpec::whitespace()).is_empty());
        assert!(tokenize("", &TokenizerSpec::unicode_word()).is_empty());
    }

    #[test]
    fn synthetic_doc_token_count_matches_split_oracle() {
        // 1,000-word synthetic document; oracle is an independent
        // split-on-whitespace count.
        let doc: Vec<String> = (0..1000).map(|i| format!("word{i}")).collect();
        let doc = doc.join(" ");
        let oracle = doc.split_whitespace().count();
        assert_eq!(oracle, 1000);
        assert_eq!(count_tokens(&doc, &TokenizerSpec::whitespace()), oracle);
    }

    #[test]
    fn unicode_word_scheme_skips_punctuation() {
        let tokens = tokenize("state-of-the-art, really?", &TokenizerSpec::unicode_word());
        let texts: Vec<&str> = tokens.iter().map(|t| t.text).collect();
        assert_eq!(texts, vec!["state", "of", "the", "art", "really"]);
    }

    #[test]
    fn token_spans_are_monotone_and_nonempty() {
        let text = "alpha  beta\tgamma\ndelta";
        for spec in [TokenizerSpec::whitespace(), TokenizerSpec::unicode_word()] {
            let tokens = tokenize(text, &spec);
            let mut prev_end = 0;
            for t in &tokens {
                assert!(t.byte_start < t.byte_end);
                assert!(t.byte_start >= prev_end);
                assert_eq!(&text[t.byte_start..t.byte_end], t.text);
                prev_end = t.byte_end;
            }
        }
    }

    #[test]
    fn chunk_counts_follow_ceil_division() {
        // 2,500-token doc, chunk_size 1,000 -> [1000, 1000, 500].
        let doc: Vec<String> = (0..2500).map(|i| format!("t{i}")).collect();
        let doc = doc.join(" ");
        let spec = TokenizerSpec::whitespace();
        let chunks = chunk_document("d", &doc, 1000, &spec).unwrap();
        assert_eq!(chunks.len(), 3);
        let counts: Vec<usize> = chunks.iter().map(|c| c.token_count).collect();
        assert_eq!(counts, vec![1000, 1000, 500]);
        // Per-chunk token recount against the chunk text itself.
        for c in &chunks {
            assert_eq!(count_tokens(&c.text, &spec), c.token_count);
        }
    }

    #[test]
    fn exact_fit_yields_single_chunk_equal_to_doc() {
        let doc: Vec<String> = (0..1000).map(|i| format!("t{i}")).collect();
        let doc = doc.join(" ");
        let chunks = chunk_document("d", &doc, 1000, &TokenizerSpec::whitespace()).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, doc);
        assert_eq!(chunks[0].token_count, 1000);
    }

    #[test]
    fn zero_chunk_size_is_rejected() {
        assert!(matches!(
            chunk_document("d", "some text", 0, &TokenizerSpec::whitespace()),
            Err(Error::ChunkSizeZero)
        ));
    }

    #[test]
    fn round_trip_preserves_source_exactly() {
        let doc = "  leading space one two\tthree\n\nfour five six  ";
        let chunks = chunk_document("d", doc, 2, &TokenizerSpec::whitespace()).unwrap();
        let joined: String = chunks.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(joined, doc);
        for pair in chunks.windows(2) {
            assert_eq!(pair[0].byte_end, pair[1].byte_start);
        }
    }

    #[test]
    fn separator_only_doc_round_trips() {
        let doc = " \n\t ";
        let chunks = chunk_document("d", doc, 4, &TokenizerSpec::whitespace()).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, doc);
        assert_eq!(chunks[0].token_count, 0);
    }

    #[test]
    fn truncation_boundary_cuts_on_token_edge() {
        let doc = "one two three four";
        let spec = TokenizerSpec::whitespace();
        assert_eq!(&doc[..truncation_boundary(doc, 2, &spec)], "one two");
        assert_eq!(truncation_boundary(doc, 10, &spec), doc.len());
        assert_eq!(truncation_boundary(doc, 0, &spec), 0);
    }

    #[test]
    fn chunk_records_round_trip_through_jsonl() {
        let doc = "a b c d e f g";
        let chunks = chunk_document("doc-1", doc, 3, &TokenizerSpec::whitespace()).unwrap();
        let mut buf = Vec::new();
        write_chunks(&mut buf, &chunks).unwrap();
        let back = read_chunks(buf.as_slice()).unwrap();
        assert_eq!(back, chunks);
    }

    #[test]
    fn bad_record_line_reports_line_number() {
        let data = "{\"doc_id\":\"d\",\"chunk_id\":0,\"byte_start\":0,\"byte_end\":1,\"text\":\"a\"}\nnot json\n";
        let err = read_chunks(data.as_bytes()).unwrap_err();
        match err {
            Error::FormatError { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error: {other}"),
        }
    }
}
