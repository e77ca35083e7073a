//! Text-embedding providers: strings in, row-per-string matrix out.
//!
//! Two implementations ship with the toolkit. [`StubTextProvider`] is a fully
//! deterministic stand-in used for tests and the desk-scale benchmark: it
//! hashes character trigrams into buckets and projects the count vector
//! through a seeded Gaussian matrix. [`SubprocessProvider`] adapts any
//! external program speaking a small JSON protocol, so a real language-model
//! encoder can be dropped in without recompiling.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;
use std::io::Write;
use std::process::{Command, Stdio};

use crate::error::{Error, Result};
use crate::rng::seed_from_parts;

/// Batch embedding interface. Implementations must be deterministic for a
/// fixed `provider_id`: the id is stamped into every prototype cache, and a
/// changed embedding without a changed id poisons cached artifacts.
pub trait TextEmbeddingProvider {
    /// Stable identifier covering implementation *and* weights version.
    fn provider_id(&self) -> &str;

    /// Embedding dimensionality.
    fn dim(&self) -> usize;

    /// Embed each text into one row of the result (`texts.len() × dim`).
    fn embed(&self, texts: &[String]) -> Result<Array2<f64>>;
}

// ---------------------------------------------------------------------------
// Stub provider
// ---------------------------------------------------------------------------

/// Deterministic trigram-hash provider.
///
/// Each input string is padded with one sentinel char per side, decomposed
/// into character trigrams, and every trigram is hashed into one of
/// [`StubTextProvider::BUCKETS`] buckets. The embedding is the sum of seeded
/// Gaussian bucket rows weighted by trigram counts, L2-normalized. Similar
/// strings share trigrams and land near each other; distinct strings spread
/// out — enough structure to exercise the pipeline end to end.
pub struct StubTextProvider {
    seed: u64,
    dim: usize,
    id: String,
}

impl StubTextProvider {
    pub const BUCKETS: usize = 4096;
    pub const DEFAULT_DIM: usize = 512;

    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("stub provider dim must be positive".into()));
        }
        Ok(Self {
            seed,
            dim,
            id: format!("stub-trigram-v1/seed={seed}/dim={dim}"),
        })
    }

    fn bucket_of(trigram: &[char; 3]) -> usize {
        let mut buf = [0u8; 12];
        let mut len = 0;
        for ch in trigram {
            len += ch.encode_utf8(&mut buf[len..]).len();
        }
        let digest = seed_from_parts(&[b"trigram", &buf[..len]]);
        (u64::from_le_bytes(digest[..8].try_into().unwrap()) % Self::BUCKETS as u64) as usize
    }

    /// Gaussian projection row for one bucket, derived lazily so the full
    /// BUCKETS × dim matrix never materializes.
    fn bucket_row(&self, bucket: usize) -> Vec<f64> {
        let seed = seed_from_parts(&[
            b"stub-bucket",
            &self.seed.to_le_bytes(),
            &(bucket as u64).to_le_bytes(),
        ]);
        let mut rng = ChaCha20Rng::from_seed(seed);
        (0..self.dim).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn embed_one(&self, text: &str) -> Result<Vec<f64>> {
        if text.is_empty() {
            return Err(Error::Validation("cannot embed an empty string".into()));
        }
        const SENTINEL: char = '\u{1}';
        let chars: Vec<char> = std::iter::once(SENTINEL)
            .chain(text.chars())
            .chain(std::iter::once(SENTINEL))
            .collect();

        let mut acc = vec![0.0f64; self.dim];
        for window in chars.windows(3) {
            let trigram = [window[0], window[1], window[2]];
            let row = self.bucket_row(Self::bucket_of(&trigram));
            for (a, r) in acc.iter_mut().zip(&row) {
                *a += r;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 || !norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "stub embedding of '{text}' has degenerate norm {norm}"
            )));
        }
        for v in &mut acc {
            *v /= norm;
        }
        Ok(acc)
    }
}

impl TextEmbeddingProvider for StubTextProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((texts.len(), self.dim));
        for (i, text) in texts.iter().enumerate() {
            let row = self.embed_one(text)?;
            for (j, v) in row.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Subprocess provider
// ---------------------------------------------------------------------------

/// Environment variable pointing external providers at their weight files.
pub const PROVIDER_WEIGHTS_ENV: &str = "PPAR_PROVIDER_WEIGHTS";

#[derive(Deserialize)]
struct SubprocessReply {
    provider_id: String,
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

/// Adapter for an external embedding program.
///
/// Protocol: the program receives a JSON array of strings on stdin and must
/// print `{"provider_id": ..., "dim": ..., "vectors": [[...], ...]}` on
/// stdout, one vector per input, then exit 0. `PPAR_PROVIDER_WEIGHTS` is set
/// in the child environment when a weights path is configured. Construction
/// performs a handshake with an empty batch to learn `provider_id` and `dim`.
#[derive(Debug)]
pub struct SubprocessProvider {
    argv: Vec<String>,
    weights: Option<String>,
    id: String,
    dim: usize,
}

impl SubprocessProvider {
    pub fn connect(argv: Vec<String>, weights: Option<String>) -> Result<Self> {
        if argv.is_empty() {
            return Err(Error::Validation("subprocess provider needs a command".into()));
        }
        let mut provider = Self {
            argv,
            weights,
            id: String::new(),
            dim: 0,
        };
        let reply = provider.call(&[])?;
        if reply.dim == 0 {
            return Err(Error::Provider {
                message: "provider handshake reported dim 0".into(),
                class: None,
                retryable: false,
            });
        }
        provider.id = reply.provider_id;
        provider.dim = reply.dim;
        Ok(provider)
    }

    fn call(&self, texts: &[String]) -> Result<SubprocessReply> {
        let retryable_err = |message: String| Error::Provider {
            message,
            class: None,
            retryable: true,
        };

        let mut cmd = Command::new(&self.argv[0]);
        cmd.args(&self.argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        if let Some(weights) = &self.weights {
            cmd.env(PROVIDER_WEIGHTS_ENV, weights);
        }
        let mut child = cmd
            .spawn()
            .map_err(|e| retryable_err(format!("cannot spawn {:?}: {e}", self.argv[0])))?;

        let payload = serde_json::to_vec(texts).expect("strings serialize");
        child
            .stdin
            .take()
            .expect("stdin piped")
            .write_all(&payload)
            .map_err(|e| retryable_err(format!("writing to provider: {e}")))?;
        let output = child
            .wait_with_output()
            .map_err(|e| retryable_err(format!("waiting for provider: {e}")))?;
        if !output.status.success() {
            return Err(retryable_err(format!(
                "provider exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let reply: SubprocessReply =
            serde_json::from_slice(&output.stdout).map_err(|e| Error::Provider {
                message: format!("malformed provider reply: {e}"),
                class: None,
                retryable: false,
            })?;
        if reply.vectors.len() != texts.len() {
            return Err(Error::Provider {
                message: format!(
                    "provider returned {} vectors for {} inputs",
                    reply.vectors.len(),
                    texts.len()
                ),
                class: None,
                retryable: false,
            });
        }
        Ok(reply)
    }
}

impl TextEmbeddingProvider for SubprocessProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Array2<f64>> {
        let reply = self.call(texts)?;
        if reply.provider_id != self.id || reply.dim != self.dim {
            return Err(Error::Provider {
                message: format!(
                    "provider identity changed mid-run: {}/{} vs {}/{}",
                    reply.provider_id, reply.dim, self.id, self.dim
                ),
                class: None,
                retryable: false,
            });
        }
        let mut out = Array2::zeros((texts.len(), self.dim));
        for (i, vec) in reply.vectors.iter().enumerate() {
            if vec.len() != self.dim {
                return Err(Error::Provider {
                    message: format!("vector {i} has length {} != dim {}", vec.len(), self.dim),
                    class: None,
                    retryable: false,
                });
            }
            for (j, &v) in vec.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Provider {
                        message: format!("vector {i} component {j} is non-finite"),
                        class: None,
                        retryable: false,
                    });
                }
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stub_is_deterministic_and_unit_norm() {
        let p = StubTextProvider::new(7, 64).unwrap();
        let texts = vec!["building".to_string(), "car".to_string()];
        let a = p.embed(&texts).unwrap();
        let b = p.embed(&texts).unwrap();
        assert_eq!(a, b, "same provider, same strings, same bits");

        for row in a.rows() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12, "norm {norm}");
        }
        // Different strings should not collide.
        let d: f64 = a.row(0).iter().zip(a.row(1)).map(|(x, y)| (x - y).abs()).sum();
        assert!(d > 1e-3);
    }

    #[test]
    fn stub_seed_and_dim_change_the_embedding_space() {
        let texts = vec!["disk".to_string()];
        let a = StubTextProvider::new(1, 32).unwrap().embed(&texts).unwrap();
        let b = StubTextProvider::new(2, 32).unwrap().embed(&texts).unwrap();
        assert_ne!(a, b);

        let p = StubTextProvider::new(1, 16).unwrap();
        assert_eq!(p.embed(&texts).unwrap().dim(), (1, 16));
        assert!(StubTextProvider::new(1, 0).is_err());
        assert!(p.embed(&["".to_string()]).is_err());

        // Ids encode both knobs.
        assert_ne!(
            StubTextProvider::new(1, 16).unwrap().provider_id(),
            StubTextProvider::new(1, 17).unwrap().provider_id()
        );
    }

    #[test]
    fn stub_handles_short_strings() {
        let p = StubTextProvider::new(3, 24).unwrap();
        let out = p.embed(&["a".to_string(), "ab".to_string()]).unwrap();
        assert_eq!(out.dim(), (2, 24));
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn subprocess_spawn_failure_is_retryable_provider_error() {
        let err = SubprocessProvider::connect(
            vec!["/definitely/not/a/real/binary".to_string()],
            None,
        )
        .unwrap_err();
        match err {
            Error::Provider { retryable, .. } => assert!(retryable),
            other => panic!("expected provider error, got {other:?}"),
        }
    }
}
