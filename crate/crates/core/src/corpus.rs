//! Text ingestion: byte-level BPE (GPT-2 vocabulary/merges files) or a raw
//! byte tokenizer, packing into next-token samples, and batch iteration.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::Mutex;

use fancy_regex::Regex;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// GPT-2 pretokenization pattern.
const GPT2_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";
const EOS_TOKEN: &str = "<|endoftext|>";

/// GPT-2's reversible byte → printable character table.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..256u32 {
        let printable =
            (0x21..=0x7e).contains(&b) || (0xa1..=0xac).contains(&b) || (0xae..=0xff).contains(&b);
        table[b as usize] = if printable {
            char::from_u32(b).expect("latin-1")
        } else {
            extra += 1;
            char::from_u32(255 + extra).expect("valid code point")
        };
    }
    table
}

struct Bpe {
    byte_ids: [u32; 256],
    /// `(left, right) → (rank, merged)`
    merges: HashMap<(u32, u32), (u32, u32)>,
    /// Byte string of every id.
    decoder: Vec<Vec<u8>>,
    pattern: Regex,
    cache: Mutex<HashMap<String, Vec<u32>>>,
}

enum Kind {
    Bytes,
    Bpe(Box<Bpe>),
}

pub struct Tokenizer {
    kind: Kind,
    vocab_size: usize,
    eos: u32,
    pad: u32,
}

impl std::fmt::Debug for Tokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.kind {
            Kind::Bytes => "bytes",
            Kind::Bpe(_) => "bpe",
        };
        f.debug_struct("Tokenizer")
            .field("kind", &kind)
            .field("vocab_size", &self.vocab_size)
            .field("eos", &self.eos)
            .finish()
    }
}

/// Raw bytes plus an end-of-sequence id: `V = 257`, `eos = pad = 256`.
pub fn byte_fallback_tokenizer() -> Tokenizer {
    Tokenizer {
        kind: Kind::Bytes,
        vocab_size: 257,
        eos: 256,
        pad: 256,
    }
}

/// Load a byte-level BPE tokenizer from a GPT-2 `vocab.json` and `merges.txt`.
pub fn load_bpe(vocab_file: impl AsRef<Path>, merges_file: impl AsRef<Path>) -> Result<Tokenizer> {
    let (vpath, mpath) = (vocab_file.as_ref(), merges_file.as_ref());
    let vocab_text = fs::read_to_string(vpath).map_err(|e| Error::io(vpath, e))?;
    let merges_text = fs::read_to_string(mpath).map_err(|e| Error::io(mpath, e))?;
    let vocab: HashMap<String, u32> = serde_json::from_str(&vocab_text)
        .map_err(|e| Error::format(vpath, format!("vocabulary json: {e}")))?;
    bpe_from_parts(vocab, &merges_text, vpath, mpath)
}

fn bpe_from_parts(
    vocab: HashMap<String, u32>,
    merges_text: &str,
    vpath: &Path,
    mpath: &Path,
) -> Result<Tokenizer> {
    if vocab.is_empty() {
        return Err(Error::format(vpath, "empty vocabulary"));
    }
    let size = vocab.values().map(|&id| id as usize + 1).max().unwrap_or(0);
    let mut decoder: Vec<Option<Vec<u8>>> = vec![None; size];
    let table = bytes_to_unicode();
    let char_to_byte: HashMap<char, u8> = table
        .iter()
        .enumerate()
        .map(|(b, &c)| (c, b as u8))
        .collect();
    for (tok, &id) in &vocab {
        let bytes = if tok == EOS_TOKEN {
            Vec::new()
        } else {
            tok.chars()
                .map(|c| char_to_byte.get(&c).copied())
                .collect::<Option<Vec<u8>>>()
                .ok_or_else(|| {
                    Error::format(vpath, format!("token {tok:?} is outside the byte alphabet"))
                })?
        };
        if decoder[id as usize].replace(bytes).is_some() {
            return Err(Error::format(vpath, format!("id {id} assigned twice")));
        }
    }
    let mut byte_ids = [0u32; 256];
    for (b, c) in table.iter().enumerate() {
        byte_ids[b] = *vocab
            .get(&c.to_string())
            .ok_or_else(|| Error::format(vpath, format!("byte token for 0x{b:02x} missing")))?;
    }
    let eos = *vocab
        .get(EOS_TOKEN)
        .ok_or_else(|| Error::format(vpath, format!("no {EOS_TOKEN} token")))?;

    let mut merges = HashMap::new();
    let mut rank = 0u32;
    for (lineno, line) in merges_text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || (lineno == 0 && line.starts_with("#version")) {
            continue;
        }
        let (a, b) = line.split_once(' ').ok_or_else(|| {
            Error::format(mpath, format!("line {}: expected a token pair", lineno + 1))
        })?;
        let lookup = |t: &str| {
            vocab.get(t).copied().ok_or_else(|| {
                Error::format(
                    mpath,
                    format!("line {}: {t:?} not in vocabulary", lineno + 1),
                )
            })
        };
        let (ia, ib, merged) = (lookup(a)?, lookup(b)?, lookup(&format!("{a}{b}"))?);
        merges.entry((ia, ib)).or_insert((rank, merged));
        rank += 1;
    }

    Ok(Tokenizer {
        kind: Kind::Bpe(Box::new(Bpe {
            byte_ids,
            merges,
            decoder: decoder.into_iter().map(Option::unwrap_or_default).collect(),
            pattern: Regex::new(GPT2_PATTERN).expect("valid pattern"),
            cache: Mutex::new(HashMap::new()),
        })),
        vocab_size: size,
        eos,
        pad: eos,
    })
}

impl Bpe {
    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        if let Some(ids) = self.cache.lock().expect("cache lock").get(word) {
            out.extend_from_slice(ids);
            return;
        }
        let mut parts: Vec<u32> = word.bytes().map(|b| self.byte_ids[b as usize]).collect();
        while parts.len() > 1 {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.merges
                        .get(&(w[0], w[1]))
                        .map(|&(rank, id)| (rank, i, id))
                })
                .min();
            let Some((rank, _, merged)) = best else { break };
            let mut next = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len()
                    && self.merges.get(&(parts[i], parts[i + 1])).map(|m| m.0) == Some(rank)
                {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(parts[i]);
                    i += 1;
                }
            }
            parts = next;
        }
        out.extend_from_slice(&parts);
        self.cache
            .lock()
            .expect("cache lock")
            .insert(word.to_string(), parts);
    }
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn eos_id(&self) -> u32 {
        self.eos
    }

    /// Padding id; equals the end-of-sequence id when no pad token exists.
    pub fn pad_id(&self) -> u32 {
        self.pad
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        match &self.kind {
            Kind::Bytes => text.bytes().map(u32::from).collect(),
            Kind::Bpe(bpe) => {
                let mut out = Vec::with_capacity(text.len() / 3);
                for m in bpe.pattern.find_iter(text) {
                    // The pattern has no failure modes beyond backtrack limits,
                    // which these alternations never approach.
                    let m = m.expect("pretokenizer match");
                    bpe.encode_word(m.as_str(), &mut out);
                }
                out
            }
        }
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len() * 3);
        for &id in ids {
            match &self.kind {
                Kind::Bytes if id < 256 => out.push(id as u8),
                Kind::Bytes if id == self.eos => {}
                Kind::Bpe(bpe) if (id as usize) < bpe.decoder.len() => {
                    out.extend_from_slice(&bpe.decoder[id as usize])
                }
                _ => {
                    return Err(Error::Input(format!(
                        "token id {id} outside vocabulary of {}",
                        self.vocab_size
                    )))
                }
            }
        }
        Ok(out)
    }

    /// Decode to text; invalid UTF-8 sequences are replaced.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }
}

/// Read a raw text split.
pub fn load_split(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Fixed-length next-token samples over one contiguous token stream.
#[derive(Debug, Clone)]
pub struct PackedDataset {
    tokens: Vec<u32>,
    seq_len: usize,
    samples: usize,
}

/// Pack into `floor((len − 1) / T)` non-overlapping samples.
pub fn pack(tokens: Vec<u32>, seq_len: usize) -> Result<PackedDataset> {
    if seq_len == 0 {
        return Err(Error::Config("sequence length must be >= 1".into()));
    }
    if tokens.len() < seq_len + 1 {
        return Err(Error::Data(format!(
            "{} tokens cannot fill one sample of length {seq_len}",
            tokens.len()
        )));
    }
    let samples = (tokens.len() - 1) / seq_len;
    Ok(PackedDataset {
        tokens,
        seq_len,
        samples,
    })
}

impl PackedDataset {
    pub fn len(&self) -> usize {
        self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples == 0
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// `(input, target)` of sample `i`.
    pub fn sample(&self, i: usize) -> (&[u32], &[u32]) {
        let start = i * self.seq_len;
        (
            &self.tokens[start..start + self.seq_len],
            &self.tokens[start + 1..start + self.seq_len + 1],
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Shuffled with the given seed; the final partial batch is dropped.
    Train { seed: u64 },
    /// Dataset order; the final partial batch is kept.
    Eval,
}

/// Row-major `[B, T]` inputs and targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

pub struct Batches<'a> {
    ds: &'a PackedDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batches(ds: &PackedDataset, batch_size: usize, mode: BatchMode) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if ds.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if let BatchMode::Train { seed } = mode {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.truncate(order.len() / batch_size * batch_size);
    }
    Ok(Batches {
        ds,
        order,
        batch_size,
        pos: 0,
    })
}

impl<'a> Batches<'a> {
    /// Number of batches the iterator yields in total.
    pub fn total(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Skip the first `n` batches.
    pub fn skip_batches(mut self, n: usize) -> Self {
        self.pos = (n * self.batch_size).min(self.order.len());
        self
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let t = self.ds.seq_len;
        let mut inputs = Vec::with_capacity((end - self.pos) * t);
        let mut targets = Vec::with_capacity((end - self.pos) * t);
        for &i in &self.order[self.pos..end] {
            let (x, y) = self.ds.sample(i);
            inputs.extend(x.iter().map(|&v| v as usize));
            targets.extend(y.iter().map(|&v| v as usize));
        }
        let batch = end - self.pos;
        self.pos = end;
        Some(Batch {
            inputs,
            targets,
            batch,
            seq: t,
        })
    }
}

const NOUNS: &[&str] = &[
    "river", "garden", "engine", "teacher", "window", "market", "signal", "forest", "harbor",
    "letter", "circuit", "village", "mountain", "lantern", "library", "farmer", "bridge",
    "station", "kitchen", "painter",
];
const VERBS: &[&str] = &[
    "finds",
    "carries",
    "watches",
    "builds",
    "follows",
    "repairs",
    "opens",
    "paints",
    "crosses",
    "remembers",
];
const ADJECTIVES: &[&str] = &[
    "quiet", "bright", "old", "narrow", "heavy", "gentle", "distant", "golden", "broken", "early",
];
const PLACES: &[&str] = &[
    "near the coast",
    "after the storm",
    "in the morning",
    "under the hill",
    "before winter",
];

/// Deterministic English-like text of about `n_bytes` bytes built from a
/// small grammar, for smoke tests and benchmarks that must run offline.
pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> String {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(n_bytes + 128);
    let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| xs[rng.random_range(0..xs.len())];
    while out.len() < n_bytes {
        let mut sentence = format!(
            "The {} {} {} the {}",
            pick(&mut rng, ADJECTIVES),
            pick(&mut rng, NOUNS),
            pick(&mut rng, VERBS),
            pick(&mut rng, NOUNS)
        );
        if rng.random_bool(0.5) {
            sentence.push(' ');
            sentence.push_str(pick(&mut rng, PLACES));
        }
        sentence.push_str(if rng.random_bool(0.8) { ". " } else { ".\n" });
        out.push_str(&sentence);
    }
    out
}

const CACHE_MAGIC: &[u8; 4] = b"MHTK";
const CACHE_VERSION: u32 = 1;

/// Write a token cache: magic, version, vocabulary size, count, then
/// little-endian `u32` ids.
pub fn write_token_cache(path: impl AsRef<Path>, vocab_size: usize, tokens: &[u32]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(CACHE_MAGIC)?;
    write(&CACHE_VERSION.to_le_bytes())?;
    write(&(vocab_size as u32).to_le_bytes())?;
    write(&(tokens.len() as u64).to_le_bytes())?;
    for &t in tokens {
        write(&t.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a token cache, returning `(vocab_size, tokens)`.
pub fn read_token_cache(path: impl AsRef<Path>) -> Result<(usize, Vec<u32>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != CACHE_MAGIC {
        return Err(Error::format(path, "not a token cache"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != CACHE_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported cache version {version}"),
        ));
    }
    let vocab = u32_at(8) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 20 + 4 * count {
        return Err(Error::format(
            path,
            format!(
                "expected {count} ids, file has {} bytes of ids",
                bytes.len() - 20
            ),
        ));
    }
    let tokens: Vec<u32> = bytes[20..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::format(
            path,
            format!("id {bad} outside vocabulary of {vocab}"),
        ));
    }
    Ok((vocab, tokens))
}
