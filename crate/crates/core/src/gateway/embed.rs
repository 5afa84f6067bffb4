//! Embedding gateway: remote endpoint client plus a deterministic local
//! hashing embedder for tests and offline runs.

use std::time::Duration;

use num_traits::FromPrimitive;

use super::mock::MockEmbedder;
use super::remote::RemoteChat;
use super::{BackendConfig, BackendKind, Limiter};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::trace::{EventKind, Outcome, TraceLog};
use crate::vector::Embedding;
use crate::{EmbeddingVector, Real};

/// Raw embedding backend; the gateway layers the cap, tracing, and dimension
/// checks on top.
pub trait EmbedBackend: Send + Sync {
    fn embed_raw(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
    fn id(&self) -> &str;
}

/// Character-trigram feature hashing into `dim` signed buckets, then L2
/// normalization. Text-sensitive, reproducible, and model-free.
#[derive(Debug, Clone)]
pub struct HashEmbedder<S = Real> {
    dim: usize,
    _marker: std::marker::PhantomData<S>,
}

pub const DEFAULT_EMBED_DIM: usize = 256;

impl<S: Scalar> HashEmbedder<S> {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Embed one text. Sentinel characters pad the trigram window so even
    /// single-character texts produce features.
    pub fn embed_text(&self, text: &str) -> Embedding<S> {
        let chars: Vec<char> = std::iter::once('\u{2}')
            .chain(text.chars())
            .chain(std::iter::once('\u{3}'))
            .collect();
        let mut acc = vec![S::zero(); self.dim];
        let mut buf = [0u8; 16];
        for window in chars.windows(3) {
            let mut hash = FNV_OFFSET;
            for ch in window {
                let s = ch.encode_utf8(&mut buf);
                for byte in s.bytes() {
                    hash = fnv_step(hash, byte);
                }
            }
            let bucket = (hash % self.dim as u64) as usize;
            let sign = if hash >> 63 == 0 { S::one() } else { -S::one() };
            acc[bucket] = acc[bucket] + sign;
        }
        let norm = acc.iter().fold(S::zero(), |a, v| a + *v * *v).sqrt();
        if norm == S::zero() {
            // All features cancelled; fall back to a unit indicator so the
            // vector stays usable for cosine math.
            let mut hash = FNV_OFFSET;
            for byte in text.bytes() {
                hash = fnv_step(hash, byte);
            }
            acc[(hash % self.dim as u64) as usize] = S::one();
            return Embedding::new(acc);
        }
        let scaled: Vec<S> = acc.into_iter().map(|v| v / norm).collect();
        Embedding::new(scaled)
    }
}

impl<S: Scalar> Default for HashEmbedder<S> {
    fn default() -> Self {
        Self::new(DEFAULT_EMBED_DIM)
    }
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;

fn fnv_step(hash: u64, byte: u8) -> u64 {
    (hash ^ byte as u64).wrapping_mul(0x100000001b3)
}

impl EmbedBackend for HashEmbedder<Real> {
    fn embed_raw(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }

    fn id(&self) -> &str {
        "hash-embedder"
    }
}

impl EmbedBackend for MockEmbedder<Real> {
    fn embed_raw(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        texts.iter().map(|t| self.embed_text(t)).collect()
    }

    fn id(&self) -> &str {
        "mock-embedder"
    }
}

/// Client for `POST {endpoint_url}/embeddings`.
pub struct RemoteEmbedder {
    agent: ureq::Agent,
    endpoint_url: String,
    model_name: String,
    api_key: Option<String>,
    timeout_ms: u64,
    backend_id: String,
}

impl RemoteEmbedder {
    pub fn from_config(cfg: &BackendConfig) -> Result<Self> {
        let api_key = super::remote::resolve_api_key(&cfg.api_key_env_var)?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.request_timeout_ms)))
            .build()
            .into();
        Ok(Self {
            agent,
            endpoint_url: cfg.endpoint_url.clone(),
            model_name: cfg.model_name.clone(),
            api_key,
            timeout_ms: cfg.request_timeout_ms,
            backend_id: format!("remote-embed:{}", cfg.model_name),
        })
    }
}

impl EmbedBackend for RemoteEmbedder {
    fn embed_raw(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let reply = RemoteChat::post_embeddings(
            &self.agent,
            &self.endpoint_url,
            self.api_key.as_deref(),
            self.timeout_ms,
            &self.model_name,
            texts,
        )?;
        if reply.data.len() != texts.len() {
            return Err(Error::MalformedBackendReply(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                reply.data.len()
            )));
        }
        let mut items = reply.data;
        items.sort_by_key(|item| item.index);
        Ok(items
            .into_iter()
            .map(|item| {
                Embedding::new(
                    item.embedding
                        .into_iter()
                        .map(|v| Real::from_f64(v).expect("finite embedding value"))
                        .collect(),
                )
            })
            .collect())
    }

    fn id(&self) -> &str {
        &self.backend_id
    }
}

/// Shareable embedding gateway: order-preserving batches, uniform dimension
/// enforcement across the whole run, in-flight cap, trace events.
pub struct EmbedGateway {
    backend: Box<dyn EmbedBackend>,
    trace: TraceLog,
    limiter: Limiter,
    /// Dimension fixed by the first successful batch.
    run_dim: std::sync::Mutex<Option<usize>>,
}

impl EmbedGateway {
    pub fn new(
        backend: Box<dyn EmbedBackend>,
        trace: TraceLog,
        cfg: &BackendConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            backend,
            trace,
            limiter: Limiter::new(cfg.max_concurrent_requests),
            run_dim: std::sync::Mutex::new(None),
        })
    }

    pub fn from_config(cfg: &BackendConfig, trace: TraceLog) -> Result<Self> {
        let backend: Box<dyn EmbedBackend> = match cfg.kind {
            BackendKind::Mock => Box::new(HashEmbedder::<Real>::new(cfg.embed_dim)),
            BackendKind::Remote => Box::new(RemoteEmbedder::from_config(cfg)?),
        };
        Self::new(backend, trace, cfg)
    }

    /// Embed a non-empty batch of non-empty texts, one vector per text in
    /// input order, all of one dimension.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(Error::EmptyInput("embed: no texts".into()));
        }
        if let Some(pos) = texts.iter().position(|t| t.is_empty()) {
            return Err(Error::EmptyInput(format!("embed: text {pos} is empty")));
        }
        let _permit = self.limiter.acquire();
        let started = self.trace.now_ms();
        let result = self.backend.embed_raw(texts).and_then(|vectors| {
            let dim = vectors[0].dim();
            for v in &vectors {
                if v.dim() != dim {
                    return Err(Error::DimMismatch {
                        expected: dim,
                        got: v.dim(),
                    });
                }
            }
            let mut run_dim = self.run_dim.lock().expect("dim lock");
            match *run_dim {
                Some(expected) if expected != dim => {
                    return Err(Error::DimMismatch { expected, got: dim })
                }
                _ => *run_dim = Some(dim),
            }
            Ok(vectors)
        });
        let outcome = match &result {
            Ok(_) => Outcome::Ok,
            Err(e) => Outcome::Error(e.to_string()),
        };
        self.trace.record(
            started,
            EventKind::EmbedCall,
            None,
            None,
            outcome,
            Some(format!("{} texts", texts.len())),
        );
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector::cosine_similarity;

    #[test]
    fn same_text_embeds_identically() {
        let embedder = HashEmbedder::<f64>::new(64);
        let a = embedder.embed_text("the same text");
        let b = embedder.embed_text("the same text");
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_texts_embed_distinctly() {
        let embedder = HashEmbedder::<f64>::new(64);
        let a = embedder.embed_text("aa");
        let b = embedder.embed_text("zz");
        assert_ne!(a, b);
    }

    /// Independent recomputation of the hashing scheme: sentinel-padded
    /// character trigrams, FNV-1a over their UTF-8 bytes, signed buckets,
    /// L2 normalization.
    fn hashing_oracle(text: &str, dim: usize) -> Vec<f64> {
        fn fnv1a(bytes: impl Iterator<Item = u8>) -> u64 {
            let mut h: u64 = 0xcbf29ce484222325;
            for b in bytes {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
            h
        }
        let padded = format!("\u{2}{text}\u{3}");
        let chars: Vec<char> = padded.chars().collect();
        let mut acc = vec![0.0f64; dim];
        for w in chars.windows(3) {
            let tri: String = w.iter().collect();
            let h = fnv1a(tri.bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            acc[(h % dim as u64) as usize] += sign;
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            let h = fnv1a(text.bytes());
            acc[(h % dim as u64) as usize] = 1.0;
            return acc;
        }
        acc.into_iter().map(|v| v / norm).collect()
    }

    #[test]
    fn embedder_matches_independent_scheme_recomputation() {
        let embedder = HashEmbedder::<f64>::new(64);
        for text in ["aa", "zz", "a", "volcanic ash plume", "日本語 text"] {
            let got = embedder.embed_text(text);
            let expected = hashing_oracle(text, 64);
            assert_eq!(
                got.values(),
                expected.as_slice(),
                "scheme drifted for {text:?}"
            );
        }
    }

    #[test]
    fn vectors_are_unit_norm() {
        let embedder = HashEmbedder::<f64>::new(128);
        for text in ["a", "hello world", "a longer sentence with words"] {
            let v = embedder.embed_text(text);
            assert!((v.norm() - 1.0).abs() < 1e-9, "norm for {text:?}");
        }
    }

    #[test]
    fn similar_texts_score_higher_than_unrelated() {
        let embedder = HashEmbedder::<f64>::new(256);
        let base = embedder.embed_text("volcanic eruptions and lava flows");
        let near = embedder.embed_text("volcanic ash and lava flows");
        let far = embedder.embed_text("quarterly portfolio rebalancing tips");
        let sim_near = cosine_similarity(&base, &near).unwrap();
        let sim_far = cosine_similarity(&base, &far).unwrap();
        assert!(sim_near > sim_far);
    }

    #[test]
    fn gateway_rejects_empty_batches_and_texts() {
        let cfg = BackendConfig::mock();
        let gateway = EmbedGateway::new(
            Box::new(HashEmbedder::<Real>::default()),
            TraceLog::new(),
            &cfg,
        )
        .unwrap();
        assert!(gateway.embed(&[]).is_err());
        assert!(gateway.embed(&["ok".into(), String::new()]).is_err());
    }

    #[test]
    fn dims_are_pinned_across_batches() {
        struct ShrinkingBackend;
        impl EmbedBackend for ShrinkingBackend {
            fn embed_raw(&self, texts: &[String]) -> crate::error::Result<Vec<EmbeddingVector>> {
                // First call answers in 4 dims, later calls in 3.
                let dim = if texts[0] == "first" { 4 } else { 3 };
                Ok(texts
                    .iter()
                    .map(|_| Embedding::new(vec![1.0; dim]))
                    .collect())
            }
            fn id(&self) -> &str {
                "shrinking"
            }
        }
        let gateway = EmbedGateway::new(
            Box::new(ShrinkingBackend),
            TraceLog::new(),
            &BackendConfig::mock(),
        )
        .unwrap();
        gateway.embed(&["first".into()]).unwrap();
        match gateway.embed(&["second".into()]) {
            Err(Error::DimMismatch {
                expected: 4,
                got: 3,
            }) => {}
            other => panic!("expected pinned-dim mismatch, got {other:?}"),
        }
    }

    #[test]
    fn gateway_preserves_order_and_records_event() {
        let cfg = BackendConfig::mock();
        let trace = TraceLog::new();
        let gateway = EmbedGateway::new(
            Box::new(HashEmbedder::<Real>::default()),
            trace.clone(),
            &cfg,
        )
        .unwrap();
        let texts = vec!["first".to_string(), "second".to_string()];
        let vectors = gateway.embed(&texts).unwrap();
        let direct = HashEmbedder::<Real>::default();
        assert_eq!(vectors[0], direct.embed_text("first"));
        assert_eq!(vectors[1], direct.embed_text("second"));
        let finalized = trace.finalize();
        assert_eq!(finalized.of_kind(EventKind::EmbedCall).count(), 1);
    }
}
