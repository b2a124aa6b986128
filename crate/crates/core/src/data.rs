//! Byte-level corpora, calibration sampling and evaluation splits.

use crate::error::{Error, Result};
use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

/// Tokens 0..=255 are raw bytes.
pub const BYTE_VOCAB: usize = 256;
pub const TOKENIZER_ID: &str = "bytes-v1";

const CACHE_MAGIC: &[u8; 8] = b"EBFTCORP";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub tokenizer: String,
    pub content_hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub tokens: Vec<usize>,
    pub vocab_size: usize,
    pub provenance: Provenance,
}

fn content_hash(tokens: &[usize]) -> String {
    let mut h = Sha256::new();
    for &t in tokens {
        h.update((t as u32).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Corpus {
    pub fn from_tokens(tokens: Vec<usize>, vocab_size: usize, source: impl Into<String>) -> Result<Self> {
        if let Some(&id) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Vocabulary { id, vocab: vocab_size });
        }
        let content_hash = content_hash(&tokens);
        Ok(Corpus {
            tokens,
            vocab_size,
            provenance: Provenance {
                source: source.into(),
                tokenizer: TOKENIZER_ID.into(),
                content_hash,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn hash(&self) -> &str {
        &self.provenance.content_hash
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read corpus {}: {e}", path.display())))?;
        let mut c = tokenize(&bytes)?;
        c.provenance.source = path.display().to_string();
        Ok(c)
    }

    /// Binary cache: magic, 32-byte content hash, u64 count, u32 tokens.
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(48 + 4 * self.tokens.len());
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(self.provenance.content_hash.as_bytes());
        buf.extend_from_slice(&(self.tokens.len() as u64).to_le_bytes());
        for &t in &self.tokens {
            buf.extend_from_slice(&(t as u32).to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load_cache(path: &Path, source: &str) -> Result<Self> {
        let buf = std::fs::read(path)?;
        let bad = |why: &str| Error::Data(format!("corpus cache {}: {why}", path.display()));
        if buf.len() < 8 + 64 + 8 || &buf[..8] != CACHE_MAGIC {
            return Err(bad("bad magic or header"));
        }
        let hash = std::str::from_utf8(&buf[8..72]).map_err(|_| bad("hash is not utf-8"))?;
        let n = u64::from_le_bytes(buf[72..80].try_into().expect("8 bytes")) as usize;
        if buf.len() != 80 + 4 * n {
            return Err(bad("truncated token payload"));
        }
        let tokens: Vec<usize> = buf[80..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        let corpus = Corpus::from_tokens(tokens, BYTE_VOCAB, source)?;
        if corpus.hash() != hash {
            return Err(bad("content hash mismatch"));
        }
        Ok(corpus)
    }
}

/// Lossless byte-level tokenization.
pub fn tokenize(text: &[u8]) -> Result<Corpus> {
    if text.is_empty() {
        return Err(Error::Data("cannot tokenize empty input".into()));
    }
    Corpus::from_tokens(text.iter().map(|&b| b as usize).collect(), BYTE_VOCAB, "<memory>")
}

pub fn detokenize(tokens: &[usize]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| Error::Vocabulary {
                id: t,
                vocab: BYTE_VOCAB,
            })
        })
        .collect()
}

/// Fixed-length token windows used for activation statistics and
/// fine-tuning targets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub segments: Vec<Vec<usize>>,
    pub seq_len: usize,
    pub seed: u64,
}

impl CalibrationSet {
    pub fn new(segments: Vec<Vec<usize>>, seq_len: usize, seed: u64) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Data("calibration set needs at least one segment".into()));
        }
        if let Some(s) = segments.iter().find(|s| s.len() != seq_len) {
            return Err(Error::Data(format!(
                "calibration segment has {} tokens, expected {seq_len}",
                s.len()
            )));
        }
        Ok(CalibrationSet {
            segments,
            seq_len,
            seed,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.segments.len()
    }

    /// Consecutive segments flattened into `(tokens, rows)` batches.
    pub fn batches(&self, batch_size: usize) -> Vec<(Vec<usize>, usize)> {
        self.segments
            .chunks(batch_size.max(1))
            .map(|chunk| (chunk.concat(), chunk.len()))
            .collect()
    }
}

/// Draws `n_samples` windows of `seq_len` tokens at seeded uniformly random
/// offsets, without replacement while enough distinct offsets exist.
pub fn sample_calibration(corpus: &Corpus, n_samples: usize, seq_len: usize, seed: u64) -> Result<CalibrationSet> {
    if n_samples == 0 || seq_len == 0 {
        return Err(Error::Config(format!(
            "calibration needs n_samples >= 1 and seq_len >= 1 (got {n_samples}, {seq_len})"
        )));
    }
    if corpus.len() < seq_len {
        return Err(Error::Data(format!(
            "corpus has {} tokens but a calibration window needs at least {seq_len}",
            corpus.len()
        )));
    }
    let offsets = corpus.len() - seq_len + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<usize> = if n_samples <= offsets {
        index::sample(&mut rng, offsets, n_samples).into_vec()
    } else {
        (0..n_samples).map(|_| rng.random_range(0..offsets)).collect()
    };
    let segments = starts
        .into_iter()
        .map(|s| corpus.tokens[s..s + seq_len].to_vec())
        .collect();
    CalibrationSet::new(segments, seq_len, seed)
}

/// Contiguous split: the last `fraction` of the tokens become the
/// evaluation corpus.
pub fn split_eval(corpus: &Corpus, fraction: f64) -> Result<(Corpus, Corpus)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "eval fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = corpus.len();
    let eval_len = (fraction * n as f64).round() as usize;
    if eval_len == 0 || eval_len == n {
        return Err(Error::Data(format!(
            "corpus of {n} tokens is too small to split at fraction {fraction}"
        )));
    }
    let cut = n - eval_len;
    let src = &corpus.provenance.source;
    let train = Corpus::from_tokens(corpus.tokens[..cut].to_vec(), corpus.vocab_size, format!("{src}[train]"))?;
    let eval = Corpus::from_tokens(corpus.tokens[cut..].to_vec(), corpus.vocab_size, format!("{src}[eval]"))?;
    Ok((train, eval))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub seed: u64,
    pub perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seq_len: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("size,seed,perplexity\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.size, r.seed, r.perplexity));
        }
        out
    }
}

/// Runs `pipeline` once per calibration size, drawing every set with the
/// same seed, and collects the perplexity it reports.
pub fn calibration_sweep<F>(corpus: &Corpus, sizes: &[usize], seq_len: usize, seed: u64, mut pipeline: F) -> Result<SweepReport>
where
    F: FnMut(&CalibrationSet) -> Result<f64>,
{
    if sizes.is_empty() {
        return Err(Error::Config("calibration sweep needs at least one size".into()));
    }
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config(format!("sweep sizes must be sorted ascending: {sizes:?}")));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let calib = sample_calibration(corpus, size, seq_len, seed)?;
        let perplexity = pipeline(&calib)?;
        rows.push(SweepRow {
            size,
            seed,
            perplexity,
        });
    }
    Ok(SweepReport { seq_len, rows })
}

const SUBJECTS: &[&str] = &[
    "the cat", "a dog", "the old man", "my sister", "the river", "a small bird", "the teacher",
    "our neighbor", "the wind", "a young girl", "the farmer", "the machine",
];
const VERBS: &[&str] = &[
    "sees", "follows", "likes", "carries", "watches", "finds", "builds", "paints", "hears",
    "remembers", "opens", "moves",
];
const OBJECTS: &[&str] = &[
    "the red house", "a long road", "the green field", "an empty box", "the bright moon",
    "a quiet garden", "the heavy door", "a wooden chair", "the cold water", "a new song",
];
const ADVERBS: &[&str] = &["slowly", "quickly", "again", "every day", "at night", "in the morning"];
const LINKS: &[&str] = &["and then", "because", "while", "but", "so"];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

/// Deterministic English-like text from a small grammar, for desk-scale
/// experiments that should not depend on downloaded corpora.
pub fn synthetic_text(seed: u64, n_bytes: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(n_bytes + 128);
    let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| *xs.choose(rng).expect("non-empty");
    while out.len() < n_bytes {
        let mut clause = format!("{} {} {}", pick(&mut rng, SUBJECTS), pick(&mut rng, VERBS), pick(&mut rng, OBJECTS));
        if rng.random_bool(0.4) {
            clause.push(' ');
            clause.push_str(pick(&mut rng, ADVERBS));
        }
        if rng.random_bool(0.3) {
            clause = format!(
                "{clause} {} {} {} {}",
                pick(&mut rng, LINKS),
                pick(&mut rng, SUBJECTS),
                pick(&mut rng, VERBS),
                pick(&mut rng, OBJECTS)
            );
        }
        out.push_str(&capitalize(&clause));
        out.push_str(if rng.random_bool(0.1) { ".\n" } else { ". " });
    }
    out.truncate(n_bytes);
    out
}
