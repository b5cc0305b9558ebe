//! Dual-encoder evaluation protocol: a contrastively trained image/text
//! similarity oracle (standing in for a large pretrained encoder pair),
//! reconstruction and editability scores, reference baselines, and the
//! concept-set-size sweep. Reports serialize as JSONL and CSV.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{to_tensor, CaptionedImage, ConceptSet};
use crate::diffusion::GuidanceConfig;
use crate::error::{Error, Result};
use crate::invert::{textual_invert, InversionConfig};
use crate::model::{read_f32_blob, write_f32_blob, FrozenModel, PromptSetup};
use crate::nn::{Conv2dLayer, GroupNormLayer, Linear, Params};
use crate::rng;
use crate::tensor::Tensor;
use crate::text::{EmbeddingTable, PseudoWord, TextEncoder, Vocabulary, BOS_ID, TEXT_DIM};

/// Shared embedding dimension of both towers.
pub const EVAL_EMBED_DIM: usize = 64;
pub const CONTRASTIVE_TEMPERATURE: f32 = 0.07;
/// Minimum training-pair count for the similarity oracle.
pub const MIN_DUAL_PAIRS: usize = 256;
/// Default generation setting for scoring: 64 samples, 50 DDIM steps.
pub const EVAL_SAMPLES: usize = 64;
pub const EVAL_DDIM_STEPS: usize = 50;

/// Editability prompt bank: three difficulty classes (background change,
/// style change, composition) phrased over the corpus vocabulary. `{}`
/// is the pseudo-word slot.
pub const EVAL_PROMPT_BANK: [&str; 8] = [
    "a photo of {} on a dark background.",
    "a photo of {} on a light background.",
    "a photo of {} on a tan background.",
    "a painting of {}.",
    "a dark rendering of {}.",
    "a clean picture of {}.",
    "a photo of {} with a blue square.",
    "a photo of two {}.",
];

const DUAL_MAGIC: &[u8] = b"tinv-dualencoder\n";
const DUAL_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Dual encoder
// ---------------------------------------------------------------------------

/// Image tower (conv net) and text tower (sequence encoder), both mapping
/// into the same 64-d space with unit-norm outputs. Parameters are its
/// own — fully disjoint from any generative model.
pub struct DualEncoder {
    vocab: Vocabulary,
    table: EmbeddingTable,
    text_encoder: TextEncoder,
    text_proj: Linear,
    c1: Conv2dLayer,
    n1: GroupNormLayer,
    c2: Conv2dLayer,
    n2: GroupNormLayer,
    c3: Conv2dLayer,
    img_proj: Linear,
}

impl Params for DualEncoder {
    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        let p = |s: &str| format!("{prefix}.{s}");
        self.table.named_params(&p("table"), out);
        self.text_encoder.named_params(&p("text_encoder"), out);
        self.text_proj.named_params(&p("text_proj"), out);
        self.c1.named_params(&p("c1"), out);
        self.n1.named_params(&p("n1"), out);
        self.c2.named_params(&p("c2"), out);
        self.n2.named_params(&p("n2"), out);
        self.c3.named_params(&p("c3"), out);
        self.img_proj.named_params(&p("img_proj"), out);
    }
}

impl DualEncoder {
    pub fn new(seed: u64, trainable: bool) -> DualEncoder {
        let vocab = Vocabulary::standard();
        let mut r = rng::stream(seed, "dual-init", 0);
        DualEncoder {
            table: EmbeddingTable::new(vocab.base_size(), &mut r, trainable),
            vocab,
            text_encoder: TextEncoder::new(&mut r, trainable),
            text_proj: Linear::new(TEXT_DIM, EVAL_EMBED_DIM, &mut r, trainable),
            c1: Conv2dLayer::new(3, 16, 3, 2, 1, &mut r, trainable),
            n1: GroupNormLayer::new(16, 4, trainable),
            c2: Conv2dLayer::new(16, 32, 3, 2, 1, &mut r, trainable),
            n2: GroupNormLayer::new(32, 8, trainable),
            c3: Conv2dLayer::new(32, 32, 3, 2, 1, &mut r, trainable),
            img_proj: Linear::new(32 * 4 * 4, EVAL_EMBED_DIM, &mut r, trainable),
        }
    }

    /// [B, 3, 32, 32] -> [B, 64], rows L2-normalized.
    pub fn embed_images(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != 32 || s[3] != 32 {
            return Err(Error::ShapeMismatch {
                op: "dual_embed_images",
                detail: format!("{s:?} vs [B, 3, 32, 32]"),
            });
        }
        let b = s[0];
        let x = self.n1.forward(&self.c1.forward(images)?)?.silu()?;
        let x = self.n2.forward(&self.c2.forward(&x)?)?.silu()?;
        let x = self.c3.forward(&x)?.silu()?;
        let flat = x.reshape(&[b, 32 * 4 * 4])?;
        self.img_proj.forward(&flat)?.l2_normalize_rows()
    }

    /// Texts -> [B, 64], rows L2-normalized.
    pub fn embed_texts(&self, texts: &[String]) -> Result<Tensor> {
        let seqs: Vec<Tensor> = texts
            .iter()
            .map(|t| {
                let mut tokens = vec![BOS_ID];
                tokens.extend(self.vocab.tokenize(t));
                self.table.embed(&tokens, self.vocab.base_size())
            })
            .collect::<Result<_>>()?;
        let code = self.text_encoder.encode(&seqs)?;
        self.text_proj.forward(&code)?.l2_normalize_rows()
    }

    /// SHA-256 over all parameters, for frozenness audits.
    pub fn checksum(&self) -> String {
        let mut named = Vec::new();
        self.named_params("dual", &mut named);
        let mut h = Sha256::new();
        for (name, t) in named {
            h.update(name.as_bytes());
            t.with_data(|d| {
                for v in d {
                    h.update(v.to_le_bytes());
                }
            });
        }
        format!("{:x}", h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ioe = |e: std::io::Error| Error::io(path.display().to_string(), e);
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(ioe)?);
        w.write_all(DUAL_MAGIC).map_err(ioe)?;
        w.write_all(&DUAL_VERSION.to_le_bytes()).map_err(ioe)?;
        let mut named = Vec::new();
        self.named_params("dual", &mut named);
        w.write_all(&(named.len() as u32).to_le_bytes()).map_err(ioe)?;
        for (name, t) in &named {
            t.with_data(|d| write_f32_blob(&mut w, name, t.shape(), d))
                .map_err(ioe)?;
        }
        Ok(())
    }

    /// Load into a frozen (non-trainable) encoder, verifying per-blob
    /// checksums.
    pub fn load(path: &Path) -> Result<DualEncoder> {
        let ioe = |e: std::io::Error| Error::io(path.display().to_string(), e);
        let fmt = |detail: String| Error::Format {
            path: path.display().to_string(),
            detail,
        };
        let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(ioe)?);
        let mut magic = vec![0u8; DUAL_MAGIC.len()];
        std::io::Read::read_exact(&mut r, &mut magic).map_err(ioe)?;
        if magic != DUAL_MAGIC {
            return Err(fmt("not a dual-encoder file".into()));
        }
        let mut u32b = [0u8; 4];
        std::io::Read::read_exact(&mut r, &mut u32b).map_err(ioe)?;
        if u32::from_le_bytes(u32b) != DUAL_VERSION {
            return Err(fmt("unsupported dual-encoder version".into()));
        }
        std::io::Read::read_exact(&mut r, &mut u32b).map_err(ioe)?;
        let n_blobs = u32::from_le_bytes(u32b) as usize;

        let enc = DualEncoder::new(0, false);
        let mut named = Vec::new();
        enc.named_params("dual", &mut named);
        let by_name: std::collections::BTreeMap<String, Tensor> = named.into_iter().collect();
        if n_blobs != by_name.len() {
            return Err(fmt(format!(
                "dual-encoder file has {n_blobs} blobs, expected {}",
                by_name.len()
            )));
        }
        for _ in 0..n_blobs {
            let blob = read_f32_blob(&mut r)
                .map_err(ioe)?
                .ok_or_else(|| fmt("blob name not UTF-8".into()))?;
            if !blob.checksum_ok {
                return Err(Error::ChecksumMismatch {
                    what: format!("dual-encoder blob {}", blob.name),
                });
            }
            let t = by_name
                .get(&blob.name)
                .ok_or_else(|| fmt(format!("unknown blob {}", blob.name)))?;
            if t.shape() != blob.shape.as_slice() {
                return Err(fmt(format!("blob {} shape mismatch", blob.name)));
            }
            t.update_data(|dst| dst.copy_from_slice(&blob.data))?;
        }
        Ok(enc)
    }
}

// ---------------------------------------------------------------------------
// Contrastive training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DualEncoderConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub temperature: f32,
}

impl Default for DualEncoderConfig {
    fn default() -> DualEncoderConfig {
        DualEncoderConfig {
            seed: 0,
            steps: 1500,
            batch_size: 32,
            lr: 1e-3,
            temperature: CONTRASTIVE_TEMPERATURE,
        }
    }
}

impl DualEncoderConfig {
    pub fn hash(&self) -> String {
        let text = format!(
            "seed={}\nsteps={}\nbatch_size={}\nlr={}\ntemperature={}\n",
            self.seed, self.steps, self.batch_size, self.lr, self.temperature
        );
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        format!("{:x}", h.finalize())
    }
}

/// Train the similarity oracle with a symmetric contrastive loss over
/// in-batch image/caption pairs. Frozen thereafter (callers receive a
/// non-trainable copy).
pub fn train_dual_encoder(
    pairs: &[CaptionedImage],
    cfg: &DualEncoderConfig,
) -> Result<(DualEncoder, Vec<f32>)> {
    if pairs.len() < MIN_DUAL_PAIRS {
        return Err(Error::Corpus(format!(
            "dual encoder needs at least {MIN_DUAL_PAIRS} pairs, got {}",
            pairs.len()
        )));
    }
    if cfg.batch_size < 2 {
        return Err(Error::invalid("dual encoder: batch_size must be >= 2"));
    }
    if !(cfg.temperature > 0.0) {
        return Err(Error::invalid("dual encoder: temperature must be positive"));
    }
    let enc = DualEncoder::new(cfg.seed, true);
    let params = enc.params();
    let refs: Vec<&Tensor> = params.iter().collect();
    let mut opt = crate::optim::AdamState::new(cfg.lr);
    let targets: Vec<usize> = (0..cfg.batch_size).collect();
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut r = rng::stream(cfg.seed, "dual-step", step as u64);
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| r.gen_range(0..pairs.len()))
            .collect();
        let pixels: Vec<Vec<u8>> = idx.iter().map(|&i| pairs[i].pixels.clone()).collect();
        let captions: Vec<String> = idx.iter().map(|&i| pairs[i].caption.clone()).collect();
        let loss = (|| -> Result<f32> {
            let img = enc.embed_images(&to_tensor(&pixels)?)?;
            let txt = enc.embed_texts(&captions)?;
            let logits = img
                .matmul(&txt.transpose_last2()?)?
                .mul_scalar(1.0 / cfg.temperature)?;
            let i2t = logits.cross_entropy_mean(&targets)?;
            let t2i = logits.transpose_last2()?.cross_entropy_mean(&targets)?;
            let loss = i2t.add(&t2i)?.mul_scalar(0.5)?;
            loss.backward()?;
            opt.step(&refs)?;
            crate::optim::zero_grads(&refs);
            loss.item()
        })()
        .map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged {
                step,
                detail: e.to_string(),
            },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("contrastive loss {loss}"),
            });
        }
        losses.push(loss);
    }

    // hand back a frozen copy
    let frozen = DualEncoder::new(cfg.seed, false);
    crate::nn::copy_params(&enc, &frozen)?;
    Ok((frozen, losses))
}

/// Top-1 caption retrieval accuracy over `way`-sized groups of held-out
/// pairs (groups drawn by a seeded shuffle). `permute_captions` applies a
/// cyclic shift first, breaking every pair — the at-chance control.
pub fn retrieval_accuracy(
    enc: &DualEncoder,
    pairs: &[CaptionedImage],
    way: usize,
    seed: u64,
    permute_captions: bool,
) -> Result<f64> {
    if way < 2 || pairs.len() < way {
        return Err(Error::invalid(format!(
            "retrieval: need at least {way} pairs, got {}",
            pairs.len()
        )));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng::stream(seed, "retrieval-shuffle", 0));
    let mut hits = 0usize;
    let mut total = 0usize;
    for group in order.chunks_exact(way) {
        let pixels: Vec<Vec<u8>> = group.iter().map(|&i| pairs[i].pixels.clone()).collect();
        let captions: Vec<String> = group
            .iter()
            .enumerate()
            .map(|(j, _)| {
                let src = if permute_captions { (j + 1) % way } else { j };
                pairs[group[src]].caption.clone()
            })
            .collect();
        let img = enc.embed_images(&to_tensor(&pixels)?)?.to_vec();
        let txt = enc.embed_texts(&captions)?.to_vec();
        for i in 0..way {
            let mut best = 0usize;
            let mut best_dot = f64::NEG_INFINITY;
            for j in 0..way {
                let dot: f64 = (0..EVAL_EMBED_DIM)
                    .map(|k| img[i * EVAL_EMBED_DIM + k] as f64 * txt[j * EVAL_EMBED_DIM + k] as f64)
                    .sum();
                if dot > best_dot {
                    best_dot = dot;
                    best = j;
                }
            }
            if best == i {
                hits += 1;
            }
        }
        total += way;
    }
    Ok(hits as f64 / total as f64)
}

// ---------------------------------------------------------------------------
// Scores
// ---------------------------------------------------------------------------

/// Rows of unit vectors in f64 (renormalized so scores stay exact cosines).
fn unit_rows_f64(embs: &Tensor) -> Result<Vec<Vec<f64>>> {
    let s = embs.shape();
    if s.len() != 2 {
        return Err(Error::invalid("embeddings must be [N, d]"));
    }
    let (n, d) = (s[0], s[1]);
    let data = embs.to_vec();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut row: Vec<f64> = data[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid("zero-norm embedding"));
        }
        for v in &mut row {
            *v /= norm;
        }
        rows.push(row);
    }
    Ok(rows)
}

fn clamp_score(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

/// Mean pairwise cosine similarity between the embeddings of a generated
/// image set and a reference (training) image set. Symmetric in its two
/// set arguments.
pub fn reconstruction_score(
    enc: &DualEncoder,
    generated: &Tensor,
    training: &Tensor,
) -> Result<f64> {
    if generated.shape()[0] == 0 || training.shape()[0] == 0 {
        return Err(Error::invalid("reconstruction_score: empty image set"));
    }
    let g = unit_rows_f64(&enc.embed_images(generated)?)?;
    let t = unit_rows_f64(&enc.embed_images(training)?)?;
    let mut acc = 0.0f64;
    for gi in &g {
        for tj in &t {
            acc += gi.iter().zip(tj).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(clamp_score(acc / (g.len() * t.len()) as f64))
}

/// Remove placeholder words (`<...>`-shaped after punctuation trimming)
/// from a prompt, leaving every other word untouched.
pub fn strip_placeholders(prompt: &str) -> String {
    prompt
        .split_whitespace()
        .filter(|raw| {
            let trimmed = raw.trim_matches(|c: char| {
                c.is_ascii_punctuation() && c != '<' && c != '>' && c != '-'
            });
            !(trimmed.starts_with('<') && trimmed.ends_with('>') && trimmed.len() > 2)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Cosine between the renormalized mean image embedding and the prompt's
/// text embedding, with every placeholder stripped from the prompt before
/// the text tower sees it.
pub fn editability_score(enc: &DualEncoder, generated: &Tensor, prompt: &str) -> Result<f64> {
    if generated.shape()[0] == 0 {
        return Err(Error::invalid("editability_score: empty image set"));
    }
    let stripped = strip_placeholders(prompt);
    let imgs = unit_rows_f64(&enc.embed_images(generated)?)?;
    let txt = unit_rows_f64(&enc.embed_texts(&[stripped])?)?;
    let d = txt[0].len();
    let mut mean = vec![0.0f64; d];
    for row in &imgs {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::invalid(
            "editability_score: mean image embedding has zero norm",
        ));
    }
    let score = mean
        .iter()
        .zip(&txt[0])
        .map(|(a, b)| (a / norm) * b)
        .sum::<f64>();
    Ok(clamp_score(score))
}

// ---------------------------------------------------------------------------
// Protocol: reports, setups, baselines, sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub setup: String,
    pub metric: String,
    pub prompt: String,
    pub value: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Informational only; never serialized into the deterministic
    /// report artifacts.
    pub wall_clock_secs: f64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for row in &self.rows {
            if !(-1.0..=1.0).contains(&row.value) {
                return Err(Error::invalid(format!(
                    "eval row {}/{} score {} outside [-1, 1]",
                    row.setup, row.metric, row.value
                )));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for row in &self.rows {
            let line = serde_json::to_string(row)
                .map_err(|e| Error::invalid(format!("serialize eval row: {e}")))?;
            out.push_str(&line);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("setup,metric,prompt,value,n_samples,seed,config_hash\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},\"{}\",{},{},{},{}\n",
                row.setup, row.metric, row.prompt, row.value, row.n_samples, row.seed,
                row.config_hash
            ));
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Median value among rows matching a setup/metric pair.
    pub fn median(&self, setup: &str, metric: &str) -> Option<f64> {
        let mut vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.setup == setup && r.metric == metric)
            .map(|r| r.value)
            .collect();
        if vals.is_empty() {
            return None;
        }
        vals.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        Some(vals[vals.len() / 2])
    }

    /// Mean value among rows matching a setup/metric pair.
    pub fn mean(&self, setup: &str, metric: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.setup == setup && r.metric == metric)
            .map(|r| r.value)
            .collect();
        if vals.is_empty() {
            return None;
        }
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub ddim_steps: usize,
    pub guidance_scale: f32,
    /// Prompt used for the reconstruction generation; `{}` is the slot.
    pub recon_template: String,
    /// Editability prompt templates; `{}` is the slot.
    pub edit_templates: Vec<String>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> EvalConfig {
        EvalConfig {
            n_samples: EVAL_SAMPLES,
            ddim_steps: EVAL_DDIM_STEPS,
            guidance_scale: 5.0,
            recon_template: "a photo of {}.".into(),
            edit_templates: EVAL_PROMPT_BANK.iter().map(|s| s.to_string()).collect(),
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.ddim_steps == 0 {
            return Err(Error::invalid("eval: n_samples and ddim_steps must be >= 1"));
        }
        if !self.recon_template.contains("{}") {
            return Err(Error::invalid("eval: recon_template needs a {} slot"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let text = format!(
            "n_samples={}\nddim_steps={}\nguidance={}\nrecon={}\nedits={:?}\nseed={}\n",
            self.n_samples,
            self.ddim_steps,
            self.guidance_scale,
            self.recon_template,
            self.edit_templates,
            self.seed
        );
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        format!("{:x}", h.finalize())
    }

    fn guidance(&self) -> Result<GuidanceConfig> {
        GuidanceConfig::new(self.guidance_scale)
    }
}

/// Score one learned pseudo-word: a reconstruction row plus one
/// editability row per prompt, all under `setup_label`.
pub fn evaluate_word(
    model: &FrozenModel,
    enc: &DualEncoder,
    word: &PseudoWord,
    concept: &ConceptSet,
    cfg: &EvalConfig,
    setup_label: &str,
) -> Result<Vec<EvalRow>> {
    cfg.validate()?;
    let setup = PromptSetup::with_words(model, &[word])?;
    let guidance = cfg.guidance()?;
    let training = concept.images_tensor()?;
    let mut rows = Vec::new();

    let recon_prompt = cfg.recon_template.replace("{}", &word.placeholder);
    let generated = model.sample_images(
        Some(&setup),
        cfg.n_samples,
        &recon_prompt,
        cfg.ddim_steps,
        &guidance,
        cfg.seed,
    )?;
    rows.push(EvalRow {
        setup: setup_label.into(),
        metric: "reconstruction".into(),
        prompt: recon_prompt,
        value: reconstruction_score(enc, &generated, &training)?,
        n_samples: cfg.n_samples,
        seed: cfg.seed,
        config_hash: word.config_hash.clone(),
    });

    for template in &cfg.edit_templates {
        let prompt = template.replace("{}", &word.placeholder);
        let generated = model.sample_images(
            Some(&setup),
            cfg.n_samples,
            &prompt,
            cfg.ddim_steps,
            &guidance,
            cfg.seed,
        )?;
        rows.push(EvalRow {
            setup: setup_label.into(),
            metric: "editability".into(),
            prompt: prompt.clone(),
            value: editability_score(enc, &generated, &prompt)?,
            n_samples: cfg.n_samples,
            seed: cfg.seed,
            config_hash: word.config_hash.clone(),
        });
    }
    Ok(rows)
}

/// Reference rows: "image-only" scores the training set itself as the
/// generation; "prompt-only" samples with the placeholder stripped from
/// every prompt (no pseudo-word involved — the returned lookup count
/// audits that no override was ever consulted).
pub fn baseline_rows(
    model: &FrozenModel,
    enc: &DualEncoder,
    concept: &ConceptSet,
    cfg: &EvalConfig,
) -> Result<(Vec<EvalRow>, u64)> {
    cfg.validate()?;
    let guidance = cfg.guidance()?;
    let training = concept.images_tensor()?;
    let mut rows = Vec::new();

    // image-only: the training set is the generated set
    rows.push(EvalRow {
        setup: "image-only".into(),
        metric: "reconstruction".into(),
        prompt: String::new(),
        value: reconstruction_score(enc, &training, &training)?,
        n_samples: concept.len(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
    });
    for template in &cfg.edit_templates {
        let stripped = strip_placeholders(&template.replace("{}", "<placeholder>"));
        rows.push(EvalRow {
            setup: "image-only".into(),
            metric: "editability".into(),
            prompt: stripped.clone(),
            value: editability_score(enc, &training, &stripped)?,
            n_samples: concept.len(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
        });
    }

    // prompt-only: sample with the placeholder removed, no overrides
    let setup = PromptSetup::bare(model);
    setup.reset_override_lookups();
    let recon_prompt = strip_placeholders(&cfg.recon_template.replace("{}", "<placeholder>"));
    let generated = model.sample_images(
        Some(&setup),
        cfg.n_samples,
        &recon_prompt,
        cfg.ddim_steps,
        &guidance,
        cfg.seed,
    )?;
    rows.push(EvalRow {
        setup: "prompt-only".into(),
        metric: "reconstruction".into(),
        prompt: recon_prompt,
        value: reconstruction_score(enc, &generated, &training)?,
        n_samples: cfg.n_samples,
        seed: cfg.seed,
        config_hash: cfg.hash(),
    });
    for template in &cfg.edit_templates {
        let prompt = strip_placeholders(&template.replace("{}", "<placeholder>"));
        let generated = model.sample_images(
            Some(&setup),
            cfg.n_samples,
            &prompt,
            cfg.ddim_steps,
            &guidance,
            cfg.seed,
        )?;
        rows.push(EvalRow {
            setup: "prompt-only".into(),
            metric: "editability".into(),
            prompt: prompt.clone(),
            value: editability_score(enc, &generated, &prompt)?,
            n_samples: cfg.n_samples,
            seed: cfg.seed,
            config_hash: cfg.hash(),
        });
    }

    Ok((rows, setup.override_lookups()))
}

/// Appendix-style concept-set-size sweep: invert once per size drawn from
/// the front of `pool`, then score each word. Default sizes 1/3/5/10/25.
pub fn setsize_sweep(
    model: &FrozenModel,
    enc: &DualEncoder,
    pool: &ConceptSet,
    sizes: &[usize],
    inv_cfg: &InversionConfig,
    eval_cfg: &EvalConfig,
) -> Result<EvalReport> {
    if sizes.is_empty() {
        return Err(Error::invalid("setsize sweep: no sizes given"));
    }
    let max = *sizes.iter().max().expect("non-empty");
    if pool.len() < max {
        return Err(Error::Corpus(format!(
            "setsize sweep: pool of {} images cannot cover size {max}",
            pool.len()
        )));
    }
    let mut report = EvalReport::default();
    for &size in sizes {
        if size == 0 {
            return Err(Error::invalid("setsize sweep: size 0"));
        }
        let concept = pool.take(size)?;
        let run = textual_invert(model, &concept, inv_cfg)?;
        let label = format!("size-{size}");
        report
            .rows
            .extend(evaluate_word(model, enc, &run.pseudo_word, &concept, eval_cfg, &label)?);
    }
    report.validate()?;
    Ok(report)
}

pub const DEFAULT_SWEEP_SIZES: [usize; 5] = [1, 3, 5, 10, 25];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_holdout, generate_corpus};

    fn small_pairs(n: usize) -> Vec<CaptionedImage> {
        let (pairs, _) = generate_corpus(77, n, &default_holdout()).unwrap();
        pairs
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let enc = DualEncoder::new(5, false);
        let pairs = small_pairs(6);
        let pixels: Vec<Vec<u8>> = pairs.iter().map(|p| p.pixels.clone()).collect();
        let imgs = enc.embed_images(&to_tensor(&pixels).unwrap()).unwrap();
        let texts: Vec<String> = pairs.iter().map(|p| p.caption.clone()).collect();
        let txts = enc.embed_texts(&texts).unwrap();
        for embs in [&imgs, &txts] {
            let d = embs.to_vec();
            for row in d.chunks(EVAL_EMBED_DIM) {
                let norm = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-5, "norm {norm}");
            }
        }
        let again = enc.embed_images(&to_tensor(&pixels).unwrap()).unwrap();
        assert_eq!(
            imgs.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn dual_encoder_params_are_disjoint_from_the_model() {
        let enc = DualEncoder::new(5, false);
        let model = FrozenModel::new(5, false);
        let mut enc_named = Vec::new();
        enc.named_params("e", &mut enc_named);
        let mut model_named = Vec::new();
        model.named_params("m", &mut model_named);
        let enc_ids: std::collections::BTreeSet<u64> =
            enc_named.iter().map(|(_, t)| t.id()).collect();
        assert!(model_named.iter().all(|(_, t)| !enc_ids.contains(&t.id())));
    }

    #[test]
    fn training_needs_enough_pairs() {
        let pairs = small_pairs(100);
        let err = train_dual_encoder(&pairs, &DualEncoderConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn contrastive_training_reduces_loss_and_freezes() {
        let pairs = small_pairs(300);
        let cfg = DualEncoderConfig {
            seed: 3,
            steps: 30,
            batch_size: 8,
            ..DualEncoderConfig::default()
        };
        let (enc, losses) = train_dual_encoder(&pairs, &cfg).unwrap();
        assert_eq!(losses.len(), 30);
        let first = losses[..5].iter().sum::<f32>() / 5.0;
        let last = losses[25..].iter().sum::<f32>() / 5.0;
        assert!(last < first, "contrastive loss should drop: {first} -> {last}");
        let mut named = Vec::new();
        enc.named_params("e", &mut named);
        assert!(named.iter().all(|(_, t)| !t.requires_grad()));
    }

    #[test]
    fn identical_image_scores_cosine_one() {
        let enc = DualEncoder::new(9, false);
        let pairs = small_pairs(1);
        let img = to_tensor(&[pairs[0].pixels.clone()]).unwrap();
        let score = reconstruction_score(&enc, &img, &img).unwrap();
        assert!((score - 1.0).abs() < 1e-9, "self-similarity {score}");
    }

    #[test]
    fn reconstruction_score_matches_brute_force_and_is_symmetric() {
        let enc = DualEncoder::new(11, false);
        let pairs = small_pairs(9);
        let a: Vec<Vec<u8>> = pairs[..4].iter().map(|p| p.pixels.clone()).collect();
        let b: Vec<Vec<u8>> = pairs[4..].iter().map(|p| p.pixels.clone()).collect();
        let ta = to_tensor(&a).unwrap();
        let tb = to_tensor(&b).unwrap();
        let score = reconstruction_score(&enc, &ta, &tb).unwrap();

        // independent double loop over raw embeddings
        let ea = enc.embed_images(&ta).unwrap().to_vec();
        let eb = enc.embed_images(&tb).unwrap().to_vec();
        let d = EVAL_EMBED_DIM;
        let mut acc = 0.0f64;
        for i in 0..4 {
            for j in 0..5 {
                let (ra, rb) = (&ea[i * d..(i + 1) * d], &eb[j * d..(j + 1) * d]);
                let na = ra.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                let nb = rb.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                acc += ra
                    .iter()
                    .zip(rb)
                    .map(|(x, y)| (*x as f64 / na) * (*y as f64 / nb))
                    .sum::<f64>();
            }
        }
        let oracle = acc / 20.0;
        assert!((score - oracle).abs() < 1e-6, "{score} vs {oracle}");

        let swapped = reconstruction_score(&enc, &tb, &ta).unwrap();
        assert!((score - swapped).abs() < 1e-12, "symmetry");
        assert!(reconstruction_score(&enc, &ta, &Tensor::zeros(&[0, 3, 32, 32])).is_err());
    }

    #[test]
    fn stripping_removes_placeholders_and_nothing_else() {
        let s = strip_placeholders("a photo of <concept-0> on the moon.");
        assert_eq!(s, "a photo of on the moon.");
        assert_eq!(strip_placeholders("<a> <concept-0>, plain"), "plain");
        assert_eq!(strip_placeholders("no placeholders here."), "no placeholders here.");

        // token-level audit: stripped tokens = original minus placeholder ids
        let mut vocab = Vocabulary::standard();
        let id = vocab.register_placeholder("<concept-0>").unwrap();
        let orig = "a photo of <concept-0> with a blue square.";
        let kept: Vec<usize> = vocab
            .tokenize(orig)
            .into_iter()
            .filter(|&t| t != id)
            .collect();
        assert_eq!(vocab.tokenize(&strip_placeholders(orig)), kept);
    }

    #[test]
    fn editability_maxes_out_when_mean_matches_text() {
        // With a single image, the renormalized mean is that image's own
        // embedding; score == cosine(image, text) which we verify against
        // a raw dot product, and the score must stay within [-1, 1].
        let enc = DualEncoder::new(2, false);
        let pairs = small_pairs(1);
        let img = to_tensor(&[pairs[0].pixels.clone()]).unwrap();
        let prompt = "a photo of <x> on a dark background.";
        let score = editability_score(&enc, &img, prompt).unwrap();
        let ie = enc.embed_images(&img).unwrap().to_vec();
        let te = enc
            .embed_texts(&[strip_placeholders(prompt)])
            .unwrap()
            .to_vec();
        let dot: f64 = ie.iter().zip(&te).map(|(a, b)| *a as f64 * *b as f64).sum();
        assert!((score - dot).abs() < 1e-5, "{score} vs {dot}");
        assert!((-1.0..=1.0).contains(&score));
    }

    #[test]
    fn eval_prompt_bank_uses_known_vocabulary_only() {
        let vocab = Vocabulary::standard();
        for t in EVAL_PROMPT_BANK {
            let fill = t.replace("{}", "circle");
            for id in vocab.tokenize(&fill) {
                assert_ne!(id, crate::text::UNK_ID, "unknown word in {t:?}");
            }
        }
    }

    #[test]
    fn report_serialization_is_stable_and_validated() {
        let mut report = EvalReport::default();
        report.rows.push(EvalRow {
            setup: "inverted".into(),
            metric: "reconstruction".into(),
            prompt: "a photo of <concept-0>.".into(),
            value: 0.75,
            n_samples: 64,
            seed: 7,
            config_hash: "abc".into(),
        });
        report.rows.push(EvalRow {
            setup: "inverted".into(),
            metric: "editability".into(),
            prompt: "a painting of <concept-0>.".into(),
            value: -0.25,
            n_samples: 64,
            seed: 7,
            config_hash: "abc".into(),
        });
        report.validate().unwrap();
        assert_eq!(report.to_jsonl().unwrap(), report.to_jsonl().unwrap());
        assert_eq!(report.to_csv(), report.to_csv());
        assert!(report.to_csv().starts_with("setup,metric,prompt,value"));
        assert_eq!(report.median("inverted", "reconstruction"), Some(0.75));
        assert_eq!(report.mean("inverted", "editability"), Some(-0.25));

        report.rows[0].value = 1.5;
        assert!(report.validate().is_err());
    }

    #[test]
    fn dual_encoder_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dual.bin");
        let enc = DualEncoder::new(31, false);
        enc.save(&path).unwrap();
        let loaded = DualEncoder::load(&path).unwrap();
        assert_eq!(loaded.checksum(), enc.checksum());

        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        std::fs::write(&path, bytes).unwrap();
        assert!(DualEncoder::load(&path).is_err());
    }
}
