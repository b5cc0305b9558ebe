//! Text side of the model: word-level tokenizer over a closed vocabulary,
//! prompt template banks, an embedding table with per-placeholder override
//! vectors, a small masked self-attention encoder producing the
//! conditioning code, and the pseudo-word persistence format.
//!
//! Placeholders are `<name>`-shaped strings registered at runtime; their
//! ids live above the base vocabulary and resolve through an override map
//! of 1–3 learned vectors that expand in place during embedding. A lookup
//! counter audits whether any override was consulted, which lets tests
//! prove that placeholder-free sampling never touches learned vectors.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{attention, key_mask_bias, mean_pool_weights, LayerNormLayer, Linear, Params};
use crate::ops;
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
const RESERVED: usize = 3;

/// Embedding / conditioning width used across the text stack.
pub const TEXT_DIM: usize = 64;
/// Fixed context length every prompt is padded or truncated to.
pub const CONTEXT_LEN: usize = 16;

/// Object-mode prompt templates; the slot is written `{}`.
pub const OBJECT_TEMPLATES: [&str; 27] = [
    "a photo of a {}.",
    "a rendering of a {}.",
    "a cropped photo of the {}.",
    "the photo of a {}.",
    "a photo of a clean {}.",
    "a photo of a dirty {}.",
    "a dark photo of the {}.",
    "a photo of my {}.",
    "a photo of the cool {}.",
    "a close-up photo of a {}.",
    "a bright photo of the {}.",
    "a cropped photo of a {}.",
    "a photo of the {}.",
    "a good photo of the {}.",
    "a photo of one {}.",
    "a close-up photo of the {}.",
    "a rendition of the {}.",
    "a photo of the clean {}.",
    "a rendition of a {}.",
    "a photo of a nice {}.",
    "a good photo of a {}.",
    "a photo of the nice {}.",
    "a photo of the small {}.",
    "a photo of the weird {}.",
    "a photo of the large {}.",
    "a photo of a cool {}.",
    "a photo of a small {}.",
];

/// Style-mode templates (a small paraphrase bank; every entry keeps the
/// "in the style of" pattern).
pub const STYLE_TEMPLATES: [&str; 8] = [
    "a painting in the style of {}.",
    "a rendering in the style of {}.",
    "a picture in the style of {}.",
    "a dark painting in the style of {}.",
    "a bright painting in the style of {}.",
    "a good painting in the style of {}.",
    "a small picture in the style of {}.",
    "a clean painting in the style of {}.",
];

/// Every word the tokenizer knows, in id order starting at id 3.
/// Covers the synthetic caption grammar, the template banks, and the
/// evaluation prompts.
pub const BASE_WORDS: [&str; 47] = [
    // grammar & template glue
    "a", "the", "of", "photo", "rendering", "rendition", "cropped", "clean", "dirty", "dark",
    "bright", "good", "nice", "small", "weird", "large", "cool", "one", "two", "my", "close-up",
    "on", "in", "style", "painting", "picture", "with", "background",
    // shapes
    "circle", "square", "triangle", "star",
    // colors
    "red", "green", "blue", "yellow", "purple", "orange", "cyan", "pink",
    // textures
    "solid", "striped", "dotted",
    // backgrounds (dark already present)
    "light", "gray", "tan",
    // spare attribute word used by evaluation prompts
    "tiny",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateMode {
    Object,
    Style,
}

/// Uniform draw from a template bank with the placeholder substituted in.
pub fn sample_template(mode: TemplateMode, placeholder: &str, rng: &mut ChaCha8Rng) -> String {
    let bank: &[&str] = match mode {
        TemplateMode::Object => &OBJECT_TEMPLATES,
        TemplateMode::Style => &STYLE_TEMPLATES,
    };
    let t = bank[rng.gen_range(0..bank.len())];
    t.replace("{}", placeholder)
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Vocabulary {
    index: BTreeMap<String, usize>,
    placeholders: Vec<String>,
}

impl Vocabulary {
    /// The closed vocabulary used throughout the crate.
    pub fn standard() -> Vocabulary {
        let mut index = BTreeMap::new();
        for (i, w) in BASE_WORDS.iter().enumerate() {
            index.insert((*w).to_string(), RESERVED + i);
        }
        Vocabulary {
            index,
            placeholders: Vec::new(),
        }
    }

    /// Ids 0..base_size() are fixed; placeholder ids extend past them.
    pub fn base_size(&self) -> usize {
        RESERVED + BASE_WORDS.len()
    }

    pub fn size(&self) -> usize {
        self.base_size() + self.placeholders.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn is_placeholder_id(&self, id: usize) -> bool {
        id >= self.base_size() && id < self.size()
    }

    /// Register a `<name>`-shaped placeholder and return its id.
    /// Registering the same string twice returns the existing id.
    pub fn register_placeholder(&mut self, s: &str) -> Result<usize> {
        if !(s.len() > 2 && s.starts_with('<') && s.ends_with('>')) {
            return Err(Error::Vocab(format!(
                "placeholder {s:?} must be written as <name>"
            )));
        }
        if let Some(pos) = self.placeholders.iter().position(|p| p == s) {
            return Ok(self.base_size() + pos);
        }
        self.placeholders.push(s.to_string());
        Ok(self.size() - 1)
    }

    pub fn placeholder_ids(&self) -> Vec<usize> {
        (self.base_size()..self.size()).collect()
    }

    /// Lowercasing word tokenizer; punctuation is trimmed from token
    /// edges, hyphens survive inside words, and `<name>` placeholders map
    /// to their registered ids. Total: unknown words become the unknown
    /// id rather than an error.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for raw in text.split_whitespace() {
            let trimmed = raw
                .trim_matches(|c: char| c.is_ascii_punctuation() && c != '<' && c != '>' && c != '-');
            if trimmed.is_empty() {
                continue;
            }
            let word = trimmed.to_lowercase();
            if word.starts_with('<') && word.ends_with('>') {
                match self.placeholders.iter().position(|p| *p == word) {
                    Some(pos) => out.push(self.base_size() + pos),
                    None => out.push(UNK_ID),
                }
            } else {
                out.push(self.id(&word).unwrap_or(UNK_ID));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Embedding table with overrides
// ---------------------------------------------------------------------------

pub struct EmbeddingTable {
    /// [base_size, TEXT_DIM]; trained during pretraining, frozen afterwards.
    table: Tensor,
    /// placeholder id -> 1..=3 learned vectors, each [TEXT_DIM]
    overrides: BTreeMap<usize, Vec<Tensor>>,
    override_lookups: AtomicU64,
}

impl EmbeddingTable {
    pub fn new(rows: usize, rng: &mut ChaCha8Rng, trainable: bool) -> EmbeddingTable {
        // word-embedding-scale init
        let t = Tensor::randn(&[rows, TEXT_DIM], rng).mul_scalar(0.02).expect("finite");
        EmbeddingTable {
            table: if trainable { t.detach_to_param() } else { t },
            overrides: BTreeMap::new(),
            override_lookups: AtomicU64::new(0),
        }
    }

    pub fn from_tensor(table: Tensor) -> EmbeddingTable {
        EmbeddingTable {
            table,
            overrides: BTreeMap::new(),
            override_lookups: AtomicU64::new(0),
        }
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn rows(&self) -> usize {
        self.table.shape()[0]
    }

    /// Raw copy of one base row (e.g. a descriptor's embedding).
    pub fn base_row(&self, id: usize) -> Result<Vec<f32>> {
        if id >= self.rows() {
            return Err(Error::Vocab(format!("embedding row {id} out of range")));
        }
        Ok(self.table.with_data(|d| d[id * TEXT_DIM..(id + 1) * TEXT_DIM].to_vec()))
    }

    pub fn set_override(&mut self, placeholder_id: usize, vectors: Vec<Tensor>) -> Result<()> {
        if vectors.is_empty() || vectors.len() > 3 {
            return Err(Error::Vocab(format!(
                "override needs 1..=3 vectors, got {}",
                vectors.len()
            )));
        }
        for v in &vectors {
            if v.shape() != [TEXT_DIM] {
                return Err(Error::ShapeMismatch {
                    op: "set_override",
                    detail: format!("{:?} vs [{TEXT_DIM}]", v.shape()),
                });
            }
        }
        self.overrides.insert(placeholder_id, vectors);
        Ok(())
    }

    pub fn clear_overrides(&mut self) {
        self.overrides.clear();
    }

    pub fn override_vectors(&self, placeholder_id: usize) -> Option<&[Tensor]> {
        self.overrides.get(&placeholder_id).map(|v| v.as_slice())
    }

    /// How many times an override vector has been consulted.
    pub fn override_lookups(&self) -> u64 {
        self.override_lookups.load(Ordering::Relaxed)
    }

    pub fn reset_override_lookups(&self) {
        self.override_lookups.store(0, Ordering::Relaxed);
    }

    /// Embed a token sequence. Base ids read their table row; placeholder
    /// ids expand in place to their override vectors, so the output can be
    /// longer than the input. Gradients flow into override vectors (and
    /// into the table when it is trainable).
    pub fn embed(&self, tokens: &[usize], base_size: usize) -> Result<Tensor> {
        let mut parts: Vec<Tensor> = Vec::new();
        let mut run: Vec<usize> = Vec::new();
        let flush = |run: &mut Vec<usize>, parts: &mut Vec<Tensor>| -> Result<()> {
            if !run.is_empty() {
                parts.push(self.table.gather_rows(run)?);
                run.clear();
            }
            Ok(())
        };
        for &id in tokens {
            if id >= base_size {
                flush(&mut run, &mut parts)?;
                let vectors = self.overrides.get(&id).ok_or_else(|| {
                    Error::Vocab(format!("placeholder id {id} has no override vectors"))
                })?;
                self.override_lookups.fetch_add(1, Ordering::Relaxed);
                for v in vectors {
                    parts.push(v.reshape(&[1, TEXT_DIM])?);
                }
            } else {
                if id >= self.rows() {
                    return Err(Error::Vocab(format!("token id {id} out of table range")));
                }
                run.push(id);
            }
        }
        flush(&mut run, &mut parts)?;
        if parts.is_empty() {
            return Ok(Tensor::zeros(&[0, TEXT_DIM]));
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        ops::concat_rows(&refs)
    }

    /// SHA-256 over the base table's little-endian bytes.
    pub fn checksum(&self) -> String {
        self.table.with_data(|d| {
            use sha2::{Digest, Sha256};
            let mut h = Sha256::new();
            for v in d {
                h.update(v.to_le_bytes());
            }
            format!("{:x}", h.finalize())
        })
    }
}

impl Params for EmbeddingTable {
    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.table"), self.table.clone()));
    }
}

// ---------------------------------------------------------------------------
// Conditioning encoder
// ---------------------------------------------------------------------------

struct EncoderBlock {
    ln1: LayerNormLayer,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNormLayer,
    ff1: Linear,
    ff2: Linear,
}

impl EncoderBlock {
    fn new(d: usize, rng: &mut ChaCha8Rng, trainable: bool) -> EncoderBlock {
        EncoderBlock {
            ln1: LayerNormLayer::new(d, trainable),
            q: Linear::new(d, d, rng, trainable),
            k: Linear::new(d, d, rng, trainable),
            v: Linear::new(d, d, rng, trainable),
            o: Linear::new(d, d, rng, trainable),
            ln2: LayerNormLayer::new(d, trainable),
            ff1: Linear::new(d, 2 * d, rng, trainable),
            ff2: Linear::new(2 * d, d, rng, trainable),
        }
    }

    fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let a = attention(
            &self.q.forward(&h)?,
            &self.k.forward(&h)?,
            &self.v.forward(&h)?,
            Some(mask),
        )?;
        let x = x.add(&self.o.forward(&a)?)?;
        let h2 = self.ln2.forward(&x)?;
        let f = self.ff2.forward(&self.ff1.forward(&h2)?.gelu()?)?;
        x.add(&f)
    }
}

impl Params for EncoderBlock {
    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.ln1.named_params(&format!("{prefix}.ln1"), out);
        self.q.named_params(&format!("{prefix}.q"), out);
        self.k.named_params(&format!("{prefix}.k"), out);
        self.v.named_params(&format!("{prefix}.v"), out);
        self.o.named_params(&format!("{prefix}.o"), out);
        self.ln2.named_params(&format!("{prefix}.ln2"), out);
        self.ff1.named_params(&format!("{prefix}.ff1"), out);
        self.ff2.named_params(&format!("{prefix}.ff2"), out);
    }
}

/// Two-block masked self-attention encoder mapping an embedded prompt to
/// a single conditioning vector. Padding positions are masked out of
/// attention and pooling, so they cannot influence the code at all.
pub struct TextEncoder {
    pos: Tensor, // [CONTEXT_LEN, TEXT_DIM]
    b1: EncoderBlock,
    b2: EncoderBlock,
    ln_f: LayerNormLayer,
}

impl TextEncoder {
    pub fn new(rng: &mut ChaCha8Rng, trainable: bool) -> TextEncoder {
        let pos = Tensor::randn(&[CONTEXT_LEN, TEXT_DIM], rng)
            .mul_scalar(0.02)
            .expect("finite");
        TextEncoder {
            pos: if trainable { pos.detach_to_param() } else { pos },
            b1: EncoderBlock::new(TEXT_DIM, rng, trainable),
            b2: EncoderBlock::new(TEXT_DIM, rng, trainable),
            ln_f: LayerNormLayer::new(TEXT_DIM, trainable),
        }
    }

    /// Encode a batch of embedded sequences ([L_i, TEXT_DIM] each, any
    /// L_i >= 1; longer than the context is truncated) to [B, TEXT_DIM].
    pub fn encode(&self, seqs: &[Tensor]) -> Result<Tensor> {
        if seqs.is_empty() {
            return Err(Error::invalid("encode: empty batch"));
        }
        let mut padded: Vec<Tensor> = Vec::with_capacity(seqs.len());
        let mut lens: Vec<usize> = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.shape().len() != 2 || s.shape()[1] != TEXT_DIM {
                return Err(Error::ShapeMismatch {
                    op: "encode_condition",
                    detail: format!("sequence {:?}, want [_, {TEXT_DIM}]", s.shape()),
                });
            }
            let l = s.shape()[0];
            if l == 0 {
                return Err(Error::invalid("encode: zero-length sequence (missing start token)"));
            }
            let keep = l.min(CONTEXT_LEN);
            let cut = if l > CONTEXT_LEN {
                let idx: Vec<usize> = (0..CONTEXT_LEN).collect();
                s.gather_rows(&idx)?
            } else {
                s.clone()
            };
            let row = if keep < CONTEXT_LEN {
                ops::concat_rows(&[&cut, &Tensor::zeros(&[CONTEXT_LEN - keep, TEXT_DIM])])?
            } else {
                cut
            };
            padded.push(row);
            lens.push(keep);
        }
        let refs: Vec<&Tensor> = padded.iter().collect();
        let x = ops::stack(&refs)?; // [B, L, D]
        self.encode_padded(&x, &lens)
    }

    /// Lower-level entry point taking an already padded [B, CONTEXT_LEN,
    /// TEXT_DIM] batch plus valid lengths. Positions at or past a
    /// sequence's length are masked out of attention and pooling; their
    /// content cannot influence the output (bit-exactly).
    pub fn encode_padded(&self, padded: &Tensor, lens: &[usize]) -> Result<Tensor> {
        let s = padded.shape();
        if s.len() != 3 || s[1] != CONTEXT_LEN || s[2] != TEXT_DIM {
            return Err(Error::ShapeMismatch {
                op: "encode_condition",
                detail: format!("{s:?} vs [B, {CONTEXT_LEN}, {TEXT_DIM}]"),
            });
        }
        if lens.len() != s[0] {
            return Err(Error::invalid(format!(
                "encode: {} lengths for batch of {}",
                lens.len(),
                s[0]
            )));
        }
        let x = padded.add_broadcast0(&self.pos)?;
        let mask = key_mask_bias(lens, CONTEXT_LEN)?;
        let x = self.b1.forward(&x, &mask)?;
        let x = self.b2.forward(&x, &mask)?;
        let x = self.ln_f.forward(&x)?;
        let pool = mean_pool_weights(lens, CONTEXT_LEN)?;
        pool.bmm(&x)?.reshape(&[s[0], TEXT_DIM])
    }
}

impl Params for TextEncoder {
    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.pos"), self.pos.clone()));
        self.b1.named_params(&format!("{prefix}.block1"), out);
        self.b2.named_params(&format!("{prefix}.block2"), out);
        self.ln_f.named_params(&format!("{prefix}.ln_f"), out);
    }
}

// ---------------------------------------------------------------------------
// Pseudo-word persistence
// ---------------------------------------------------------------------------

pub const PSEUDO_WORD_MAGIC: &str = "pseudo-word v1";

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PseudoWord {
    pub placeholder: String,
    pub vectors: Vec<Vec<f32>>, // 1..=3 vectors of TEXT_DIM floats
    pub coarse_descriptor: String,
    pub config_hash: String,
    pub base_checksum: String,
}

impl PseudoWord {
    pub fn validate(&self) -> Result<()> {
        if self.vectors.is_empty() || self.vectors.len() > 3 {
            return Err(Error::Vocab(format!(
                "pseudo-word {} must hold 1..=3 vectors, has {}",
                self.placeholder,
                self.vectors.len()
            )));
        }
        for v in &self.vectors {
            if v.len() != TEXT_DIM {
                return Err(Error::Vocab(format!(
                    "pseudo-word vector dim {} != {TEXT_DIM}",
                    v.len()
                )));
            }
        }
        Ok(())
    }

    fn payload_checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in &self.vectors {
            for f in v {
                h.update(f.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut out = String::new();
        out.push_str(PSEUDO_WORD_MAGIC);
        out.push('\n');
        out.push_str(&format!("placeholder: {}\n", self.placeholder));
        out.push_str(&format!("descriptor: {}\n", self.coarse_descriptor));
        out.push_str(&format!("vectors: {}\n", self.vectors.len()));
        out.push_str(&format!("dim: {TEXT_DIM}\n"));
        out.push_str(&format!("config: {}\n", self.config_hash));
        out.push_str(&format!("base-table-sha256: {}\n", self.base_checksum));
        out.push_str(&format!("payload-sha256: {}\n", self.payload_checksum()));
        for (i, v) in self.vectors.iter().enumerate() {
            let bytes: Vec<u8> = v.iter().flat_map(|f| f.to_le_bytes()).collect();
            out.push_str(&format!("v{}: {}\n", i, B64.encode(bytes)));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<PseudoWord> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let reader = std::io::BufReader::new(file);
        let mut lines = reader.lines();
        let fmt_err = |detail: &str| Error::Format {
            path: path.display().to_string(),
            detail: detail.to_string(),
        };
        let magic = lines
            .next()
            .ok_or_else(|| fmt_err("empty file"))?
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if magic != PSEUDO_WORD_MAGIC {
            return Err(fmt_err(&format!("bad header {magic:?}")));
        }
        let mut fields: BTreeMap<String, String> = BTreeMap::new();
        let mut vecs: Vec<(usize, String)> = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let (key, val) = line
                .split_once(": ")
                .ok_or_else(|| fmt_err(&format!("malformed line {line:?}")))?;
            if let Some(idx) = key.strip_prefix('v') {
                if let Ok(i) = idx.parse::<usize>() {
                    vecs.push((i, val.to_string()));
                    continue;
                }
            }
            fields.insert(key.to_string(), val.to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| fmt_err(&format!("missing field {k}")))
        };
        let count: usize = get("vectors")?
            .parse()
            .map_err(|_| fmt_err("vectors field not an integer"))?;
        let dim: usize = get("dim")?
            .parse()
            .map_err(|_| fmt_err("dim field not an integer"))?;
        if dim != TEXT_DIM {
            return Err(fmt_err(&format!("dim {dim} unsupported, expected {TEXT_DIM}")));
        }
        if vecs.len() != count {
            return Err(fmt_err(&format!(
                "{} vector lines but header declares {count}",
                vecs.len()
            )));
        }
        vecs.sort_by_key(|(i, _)| *i);
        let mut vectors = Vec::with_capacity(count);
        for (i, b64) in &vecs {
            let bytes = B64
                .decode(b64)
                .map_err(|_| fmt_err(&format!("vector {i} is not valid base64")))?;
            if bytes.len() != dim * 4 {
                return Err(fmt_err(&format!("vector {i} has wrong byte length")));
            }
            let v: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            vectors.push(v);
        }
        let pw = PseudoWord {
            placeholder: get("placeholder")?,
            vectors,
            coarse_descriptor: get("descriptor")?,
            config_hash: get("config")?,
            base_checksum: get("base-table-sha256")?,
        };
        let declared = get("payload-sha256")?;
        if declared != pw.payload_checksum() {
            return Err(Error::ChecksumMismatch {
                what: format!("pseudo-word payload in {}", path.display()),
            });
        }
        pw.validate()?;
        Ok(pw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn template_counts_and_slots() {
        assert_eq!(OBJECT_TEMPLATES.len(), 27);
        for t in OBJECT_TEMPLATES.iter().chain(STYLE_TEMPLATES.iter()) {
            assert_eq!(t.matches("{}").count(), 1, "template {t:?}");
        }
        for t in &STYLE_TEMPLATES {
            assert!(t.contains("in the style of"), "style template {t:?}");
        }
    }

    #[test]
    fn tokenize_template_like_prompt() {
        let mut v = Vocabulary::standard();
        let pid = v.register_placeholder("<concept-0>").unwrap();
        let ids = v.tokenize("a photo of a <concept-0>.");
        assert_eq!(
            ids,
            vec![
                v.id("a").unwrap(),
                v.id("photo").unwrap(),
                v.id("of").unwrap(),
                v.id("a").unwrap(),
                pid
            ]
        );
        assert!(v.tokenize("").is_empty());
    }

    #[test]
    fn all_templates_tokenize_distinctly_without_unknowns() {
        let mut v = Vocabulary::standard();
        v.register_placeholder("<concept-0>").unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for t in &OBJECT_TEMPLATES {
            let ids = v.tokenize(&t.replace("{}", "<concept-0>"));
            assert!(!ids.contains(&UNK_ID), "unknown word in {t:?}");
            assert!(seen.insert(ids), "duplicate token sequence for {t:?}");
        }
        assert_eq!(seen.len(), 27);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocabulary::standard();
        let ids = v.tokenize("a quantum photo");
        assert_eq!(ids[1], UNK_ID);
    }

    #[test]
    fn placeholder_registration_rules() {
        let mut v = Vocabulary::standard();
        assert!(v.register_placeholder("concept").is_err());
        let a = v.register_placeholder("<a>").unwrap();
        let b = v.register_placeholder("<b>").unwrap();
        assert_ne!(a, b);
        assert_eq!(v.register_placeholder("<a>").unwrap(), a);
        assert!(v.is_placeholder_id(a));
        assert!(!v.is_placeholder_id(UNK_ID));
    }

    #[test]
    fn embed_expands_overrides_in_place() {
        let mut v = Vocabulary::standard();
        let pid = v.register_placeholder("<x>").unwrap();
        let mut r = rng::stream(5, "emb", 0);
        let mut table = EmbeddingTable::new(v.base_size(), &mut r, false);
        let o1 = Tensor::randn(&[TEXT_DIM], &mut r);
        let o2 = Tensor::randn(&[TEXT_DIM], &mut r);
        let o3 = Tensor::randn(&[TEXT_DIM], &mut r);
        table
            .set_override(pid, vec![o1.clone(), o2.clone(), o3.clone()])
            .unwrap();

        let tokens = v.tokenize("a photo of <x>");
        let emb = table.embed(&tokens, v.base_size()).unwrap();
        // 4 input tokens, 3-vector override: length 4 + 2
        assert_eq!(emb.shape(), &[6, TEXT_DIM]);
        let e = emb.to_vec();
        // override slots bit-exact
        assert_eq!(&e[3 * TEXT_DIM..4 * TEXT_DIM], o1.to_vec().as_slice());
        assert_eq!(&e[5 * TEXT_DIM..6 * TEXT_DIM], o3.to_vec().as_slice());
        // non-placeholder positions equal direct row reads
        let direct = table.base_row(tokens[1]).unwrap();
        assert_eq!(&e[TEXT_DIM..2 * TEXT_DIM], direct.as_slice());
        assert_eq!(table.override_lookups(), 1);
    }

    #[test]
    fn embed_missing_override_is_error() {
        let mut v = Vocabulary::standard();
        let pid = v.register_placeholder("<y>").unwrap();
        let mut r = rng::stream(6, "emb2", 0);
        let table = EmbeddingTable::new(v.base_size(), &mut r, false);
        assert!(table.embed(&[pid], v.base_size()).is_err());
    }

    #[test]
    fn pseudo_word_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("word.pw");
        let pw = PseudoWord {
            placeholder: "<concept-0>".into(),
            vectors: vec![vec![0.25; TEXT_DIM], vec![-1.5; TEXT_DIM]],
            coarse_descriptor: "circle".into(),
            config_hash: "deadbeef".into(),
            base_checksum: "abc123".into(),
        };
        pw.save(&path).unwrap();
        let loaded = PseudoWord::load(&path).unwrap();
        assert_eq!(loaded, pw);
    }

    #[test]
    fn pseudo_word_corruption_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("word.pw");
        let pw = PseudoWord {
            placeholder: "<concept-0>".into(),
            vectors: vec![vec![1.0; TEXT_DIM]],
            coarse_descriptor: "circle".into(),
            config_hash: "h".into(),
            base_checksum: "b".into(),
        };
        pw.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        // flip a payload byte
        let corrupted = text.replace("v0: ", "v0: A");
        std::fs::write(&path, corrupted).unwrap();
        assert!(PseudoWord::load(&path).is_err());
    }
}
