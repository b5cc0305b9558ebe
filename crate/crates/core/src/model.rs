//! The complete frozen generative bundle: vocabulary, embedding table,
//! conditioning encoder, latent codec, conditional denoiser, and noise
//! schedule — plus checkpoint persistence with per-blob checksums,
//! component-level weight digests, prompt encoding, the training loss,
//! and guided DDIM sampling/inversion over latents and images.

use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::codec::{LatentCodec, LATENT_CHANNELS, LATENT_SIZE};
use crate::denoiser::Denoiser;
use crate::diffusion::{
    cfg_combine, ddim_invert_core, ddim_sample_core, q_sample_batch, GuidanceConfig,
};
use crate::error::{Error, Result};
use crate::nn::{copy_params, Params};
use crate::ops;
use crate::rng;
use crate::schedule::{make_schedule, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T};
use crate::tensor::Tensor;
use crate::text::{EmbeddingTable, PseudoWord, TextEncoder, Vocabulary, BOS_ID, TEXT_DIM};

const CKPT_MAGIC: &[u8] = b"tinv-checkpoint\n";
const CKPT_VERSION: u32 = 1;

pub struct FrozenModel {
    pub vocab: Vocabulary,
    pub table: EmbeddingTable,
    pub encoder: TextEncoder,
    pub codec: LatentCodec,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    /// Multiplier applied to codec latents so diffusion sees ~unit scale.
    pub latent_scale: f32,
    /// Hash of the configuration that produced the weights.
    pub config_hash: String,
    /// Seed that produced the weights.
    pub seed: u64,
}

/// SHA-256 digests of each frozen component's parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelChecksums {
    pub codec: String,
    pub denoiser: String,
    pub text_encoder: String,
    pub embedding_table: String,
}

/// Write one named parameter blob: name, shape, SHA-256 of the payload,
/// then the payload as little-endian f32.
pub(crate) fn write_f32_blob(
    w: &mut impl std::io::Write,
    name: &str,
    shape: &[usize],
    data: &[f32],
) -> std::io::Result<()> {
    let nb = name.as_bytes();
    w.write_all(&(nb.len() as u16).to_le_bytes())?;
    w.write_all(nb)?;
    w.write_all(&(shape.len() as u8).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    let mut h = Sha256::new();
    h.update(&bytes);
    w.write_all(&h.finalize())?;
    w.write_all(&bytes)?;
    Ok(())
}

pub(crate) struct RawBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub checksum_ok: bool,
}

pub(crate) fn read_f32_blob(r: &mut impl std::io::Read) -> std::io::Result<Option<RawBlob>> {
    let mut u16b = [0u8; 2];
    r.read_exact(&mut u16b)?;
    let name_len = u16::from_le_bytes(u16b) as usize;
    let mut nb = vec![0u8; name_len];
    r.read_exact(&mut nb)?;
    let name = match String::from_utf8(nb) {
        Ok(n) => n,
        Err(_) => return Ok(None),
    };
    let mut u8b = [0u8; 1];
    r.read_exact(&mut u8b)?;
    let mut shape = Vec::with_capacity(u8b[0] as usize);
    let mut u32b = [0u8; 4];
    for _ in 0..u8b[0] {
        r.read_exact(&mut u32b)?;
        shape.push(u32::from_le_bytes(u32b) as usize);
    }
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest)?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    let checksum_ok = h.finalize().as_slice() == digest;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Some(RawBlob {
        name,
        shape,
        data,
        checksum_ok,
    }))
}

fn digest_params(p: &dyn Params) -> String {
    let mut named = Vec::new();
    p.named_params("c", &mut named);
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

impl FrozenModel {
    /// Fresh, untrained model with seeded initialization. `trainable`
    /// marks every parameter as optimizable (used by the pretrainer);
    /// inference bundles are built with `trainable = false`.
    pub fn new(seed: u64, trainable: bool) -> FrozenModel {
        let (t_max, beta_start, beta_end) = default_schedule_constants();
        Self::with_schedule(seed, trainable, t_max, beta_start, beta_end)
            .expect("default schedule parameters are valid")
    }

    /// Like [`FrozenModel::new`] but with an explicit noise schedule.
    pub fn with_schedule(
        seed: u64,
        trainable: bool,
        t_max: usize,
        beta_start: f32,
        beta_end: f32,
    ) -> Result<FrozenModel> {
        let vocab = Vocabulary::standard();
        let mut r = rng::stream(seed, "model-init", 0);
        let table = EmbeddingTable::new(vocab.base_size(), &mut r, trainable);
        let encoder = TextEncoder::new(&mut r, trainable);
        let codec = LatentCodec::new(&mut r, trainable);
        let denoiser = Denoiser::new(&mut r, trainable);
        Ok(FrozenModel {
            vocab,
            table,
            encoder,
            codec,
            denoiser,
            schedule: make_schedule(t_max, beta_start, beta_end)?,
            latent_scale: 1.0,
            config_hash: String::new(),
            seed,
        })
    }

    /// Deep copy. The copy's denoiser is trainable iff `tune_denoiser`;
    /// everything else stays frozen. Used by pivotal tuning so the
    /// original bundle is never touched.
    pub fn deep_clone(&self, tune_denoiser: bool) -> Result<FrozenModel> {
        let mut out = FrozenModel::new(self.seed, false);
        if tune_denoiser {
            let mut r = rng::stream(self.seed, "clone-denoiser", 0);
            out.denoiser = Denoiser::new(&mut r, true);
        }
        copy_params(&self.table, &out.table)?;
        copy_params(&self.encoder, &out.encoder)?;
        copy_params(&self.codec, &out.codec)?;
        copy_params(&self.denoiser, &out.denoiser)?;
        out.schedule = self.schedule.clone();
        out.latent_scale = self.latent_scale;
        out.config_hash = self.config_hash.clone();
        Ok(out)
    }

    pub fn checksums(&self) -> ModelChecksums {
        ModelChecksums {
            codec: digest_params(&self.codec),
            denoiser: digest_params(&self.denoiser),
            text_encoder: digest_params(&self.encoder),
            embedding_table: digest_params(&self.table),
        }
    }

    // -- text ---------------------------------------------------------------

    /// Tokenize (with the start marker) and embed one prompt; placeholder
    /// overrides expand in place.
    pub fn embed_prompt(&self, prompt: &str) -> Result<Tensor> {
        let mut tokens = vec![BOS_ID];
        tokens.extend(self.vocab.tokenize(prompt));
        self.table.embed(&tokens, self.vocab.base_size())
    }

    /// Conditioning codes for a batch of prompts: [B, TEXT_DIM].
    pub fn encode_prompts(&self, prompts: &[String]) -> Result<Tensor> {
        let seqs: Vec<Tensor> = prompts
            .iter()
            .map(|p| self.embed_prompt(p))
            .collect::<Result<_>>()?;
        self.encoder.encode(&seqs)
    }

    /// Conditioning codes using a caller-supplied vocabulary/table pair,
    /// so pseudo-word overrides can be active without touching the model.
    pub fn encode_prompts_with(&self, setup: &PromptSetup, prompts: &[String]) -> Result<Tensor> {
        let seqs: Vec<Tensor> = prompts
            .iter()
            .map(|p| {
                let mut tokens = vec![BOS_ID];
                tokens.extend(setup.vocab.tokenize(p));
                setup.table.embed(&tokens, setup.vocab.base_size())
            })
            .collect::<Result<_>>()?;
        self.encoder.encode(&seqs)
    }

    /// One prompt's code replicated n times: [n, TEXT_DIM].
    pub fn encode_prompt_replicated(&self, prompt: &str, n: usize) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::invalid("encode_prompt_replicated: n = 0"));
        }
        let code = self.encode_prompts(&[prompt.to_string()])?;
        code.gather_rows(&vec![0; n])
    }

    // -- images <-> latents ---------------------------------------------------

    /// Encode images ([B, 3, 32, 32] in [0,1]) to diffusion-scale latents.
    pub fn encode_images(&self, images: &Tensor) -> Result<Tensor> {
        self.codec.encode(images)?.mul_scalar(self.latent_scale)
    }

    /// Decode diffusion-scale latents back to images in [0, 1].
    pub fn decode_latents(&self, latents: &Tensor) -> Result<Tensor> {
        self.codec.decode(&latents.mul_scalar(1.0 / self.latent_scale)?)
    }

    // -- training loss --------------------------------------------------------

    /// Noise-prediction loss on clean latents `z0` with per-sample
    /// timesteps and precomputed conditioning codes. Differentiable
    /// w.r.t. everything that requires gradients.
    pub fn denoise_loss(
        &self,
        z0: &Tensor,
        codes: &Tensor,
        t: &[usize],
        eps: &Tensor,
    ) -> Result<Tensor> {
        let z_t = q_sample_batch(&self.schedule, z0, t, eps)?;
        let pred = self.denoiser.forward(&z_t, t, codes)?;
        ops::mse(&pred, eps)
    }

    // -- guided sampling ------------------------------------------------------

    fn guided_eps_fn<'a>(
        &'a self,
        setup: Option<&PromptSetup>,
        prompt: &str,
        n: usize,
        guidance: &GuidanceConfig,
    ) -> Result<impl FnMut(&Tensor, usize) -> Result<Tensor> + 'a> {
        let encode = |p: &str| -> Result<Tensor> {
            let code = match setup {
                Some(s) => self.encode_prompts_with(s, &[p.to_string()])?,
                None => self.encode_prompts(&[p.to_string()])?,
            };
            code.gather_rows(&vec![0; n])
        };
        let cond = encode(prompt)?.detach();
        let scale = guidance.scale;
        let uncond = if scale != 1.0 {
            Some(encode(&guidance.uncond_prompt)?.detach())
        } else {
            None
        };
        Ok(move |x: &Tensor, t: usize| -> Result<Tensor> {
            let ts = vec![t; n];
            let eps_c = self.denoiser.forward(x, &ts, &cond)?;
            match &uncond {
                None => Ok(eps_c),
                Some(u) => {
                    let eps_u = self.denoiser.forward(x, &ts, u)?;
                    cfg_combine(&eps_u, &eps_c, scale)
                }
            }
        })
    }

    /// Draw `n` latents for `prompt` with `steps` DDIM steps under
    /// classifier-free guidance. Deterministic given the seed. `setup`
    /// carries pseudo-word overrides when the prompt uses them.
    pub fn sample_latents_with(
        &self,
        setup: Option<&PromptSetup>,
        n: usize,
        prompt: &str,
        steps: usize,
        guidance: &GuidanceConfig,
        seed: u64,
    ) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::invalid("sample_latents: n = 0"));
        }
        let mut r = rng::stream(seed, "sample-init", 0);
        let x_t = Tensor::randn(&[n, LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE], &mut r);
        let mut eps_fn = self.guided_eps_fn(setup, prompt, n, guidance)?;
        ddim_sample_core(&self.schedule, &x_t, steps, |x, t| eps_fn(x, t))
    }

    pub fn sample_latents(
        &self,
        n: usize,
        prompt: &str,
        steps: usize,
        guidance: &GuidanceConfig,
        seed: u64,
    ) -> Result<Tensor> {
        self.sample_latents_with(None, n, prompt, steps, guidance, seed)
    }

    /// Continue deterministic DDIM sampling from a given terminal latent.
    pub fn sample_from(
        &self,
        setup: Option<&PromptSetup>,
        x_t: &Tensor,
        prompt: &str,
        steps: usize,
        guidance: &GuidanceConfig,
    ) -> Result<Tensor> {
        let n = x_t.shape().first().copied().unwrap_or(0);
        let mut eps_fn = self.guided_eps_fn(setup, prompt, n.max(1), guidance)?;
        ddim_sample_core(&self.schedule, x_t, steps, |x, t| eps_fn(x, t))
    }

    /// Run DDIM in reverse to recover the terminal latent of `z0`.
    pub fn invert_latents(
        &self,
        setup: Option<&PromptSetup>,
        z0: &Tensor,
        prompt: &str,
        steps: usize,
        guidance: &GuidanceConfig,
    ) -> Result<Tensor> {
        let n = z0.shape().first().copied().unwrap_or(0);
        let mut eps_fn = self.guided_eps_fn(setup, prompt, n.max(1), guidance)?;
        ddim_invert_core(&self.schedule, z0, steps, |x, t| eps_fn(x, t))
    }

    /// Sample images (decoded, in [0, 1]).
    pub fn sample_images(
        &self,
        setup: Option<&PromptSetup>,
        n: usize,
        prompt: &str,
        steps: usize,
        guidance: &GuidanceConfig,
        seed: u64,
    ) -> Result<Tensor> {
        let z = self.sample_latents_with(setup, n, prompt, steps, guidance, seed)?;
        self.decode_latents(&z)
    }

    /// Standard-normal noise shaped like a latent batch, from a labeled
    /// deterministic stream.
    pub fn noise_like(&self, shape: &[usize], seed: u64, label: &str, index: u64) -> Tensor {
        let mut r = rng::stream(seed, label, index);
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        Tensor::from_vec(shape, data, false).expect("finite noise")
    }

    // -- persistence ----------------------------------------------------------

    fn all_named_params(&self) -> Vec<(String, Tensor)> {
        let mut named = Vec::new();
        self.table.named_params("embedding", &mut named);
        self.encoder.named_params("text_encoder", &mut named);
        self.codec.named_params("codec", &mut named);
        self.denoiser.named_params("denoiser", &mut named);
        named
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let ioe = |e: std::io::Error| Error::io(path.display().to_string(), e);
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(ioe)?);
        w.write_all(CKPT_MAGIC).map_err(ioe)?;
        w.write_all(&CKPT_VERSION.to_le_bytes()).map_err(ioe)?;
        w.write_all(&(self.schedule.t_max() as u32).to_le_bytes()).map_err(ioe)?;
        w.write_all(&self.schedule.betas()[0].to_le_bytes()).map_err(ioe)?;
        w.write_all(&self.schedule.betas()[self.schedule.t_max() - 1].to_le_bytes())
            .map_err(ioe)?;
        w.write_all(&self.latent_scale.to_le_bytes()).map_err(ioe)?;
        w.write_all(&self.seed.to_le_bytes()).map_err(ioe)?;
        let hash = self.config_hash.as_bytes();
        w.write_all(&(hash.len() as u32).to_le_bytes()).map_err(ioe)?;
        w.write_all(hash).map_err(ioe)?;

        let named = self.all_named_params();
        w.write_all(&(named.len() as u32).to_le_bytes()).map_err(ioe)?;
        for (name, t) in &named {
            t.with_data(|d| write_f32_blob(&mut w, name, t.shape(), d))
                .map_err(ioe)?;
        }
        Ok(())
    }

    /// Load a checkpoint into a fresh frozen (non-trainable) bundle.
    /// Every blob's checksum is re-verified against the stored digest.
    pub fn load_checkpoint(path: &Path) -> Result<FrozenModel> {
        let ioe = |e: std::io::Error| Error::io(path.display().to_string(), e);
        let fmt = |detail: String| Error::Format {
            path: path.display().to_string(),
            detail,
        };
        let mut rdr = std::io::BufReader::new(std::fs::File::open(path).map_err(ioe)?);
        let mut magic = vec![0u8; CKPT_MAGIC.len()];
        rdr.read_exact(&mut magic).map_err(ioe)?;
        if magic != CKPT_MAGIC {
            return Err(fmt("not a model checkpoint".into()));
        }
        let mut u32b = [0u8; 4];
        let mut f32b = [0u8; 4];
        let mut u64b = [0u8; 8];
        rdr.read_exact(&mut u32b).map_err(ioe)?;
        let version = u32::from_le_bytes(u32b);
        if version != CKPT_VERSION {
            return Err(fmt(format!("unsupported checkpoint version {version}")));
        }
        rdr.read_exact(&mut u32b).map_err(ioe)?;
        let t_max = u32::from_le_bytes(u32b) as usize;
        rdr.read_exact(&mut f32b).map_err(ioe)?;
        let beta_start = f32::from_le_bytes(f32b);
        rdr.read_exact(&mut f32b).map_err(ioe)?;
        let beta_end = f32::from_le_bytes(f32b);
        rdr.read_exact(&mut f32b).map_err(ioe)?;
        let latent_scale = f32::from_le_bytes(f32b);
        rdr.read_exact(&mut u64b).map_err(ioe)?;
        let seed = u64::from_le_bytes(u64b);
        rdr.read_exact(&mut u32b).map_err(ioe)?;
        let hash_len = u32::from_le_bytes(u32b) as usize;
        let mut hash = vec![0u8; hash_len];
        rdr.read_exact(&mut hash).map_err(ioe)?;
        let config_hash =
            String::from_utf8(hash).map_err(|_| fmt("config hash is not UTF-8".into()))?;

        let mut model = FrozenModel::new(seed, false);
        model.schedule = crate::schedule::make_schedule(t_max, beta_start, beta_end)?;
        model.latent_scale = latent_scale;
        model.config_hash = config_hash;

        let named = model.all_named_params();
        let by_name: std::collections::BTreeMap<String, Tensor> = named.into_iter().collect();

        rdr.read_exact(&mut u32b).map_err(ioe)?;
        let n_blobs = u32::from_le_bytes(u32b) as usize;
        if n_blobs != by_name.len() {
            return Err(fmt(format!(
                "checkpoint has {n_blobs} blobs, model expects {}",
                by_name.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..n_blobs {
            let blob = read_f32_blob(&mut rdr)
                .map_err(ioe)?
                .ok_or_else(|| fmt("blob name not UTF-8".into()))?;
            if !blob.checksum_ok {
                return Err(Error::ChecksumMismatch {
                    what: format!("checkpoint blob {} in {}", blob.name, path.display()),
                });
            }
            let target = by_name
                .get(&blob.name)
                .ok_or_else(|| fmt(format!("unknown blob {}", blob.name)))?;
            if target.shape() != blob.shape.as_slice() {
                return Err(fmt(format!(
                    "blob {} shape {:?} vs model {:?}",
                    blob.name,
                    blob.shape,
                    target.shape()
                )));
            }
            target.update_data(|dst| dst.copy_from_slice(&blob.data))?;
            if !seen.insert(blob.name) {
                return Err(fmt("duplicate blob".into()));
            }
        }
        Ok(model)
    }
}

impl Params for FrozenModel {
    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        let p = if prefix.is_empty() { String::new() } else { format!("{prefix}.") };
        self.table.named_params(&format!("{p}embedding"), out);
        self.encoder.named_params(&format!("{p}text_encoder"), out);
        self.codec.named_params(&format!("{p}codec"), out);
        self.denoiser.named_params(&format!("{p}denoiser"), out);
    }
}

/// Default schedule constants, re-exported for config plumbing.
pub fn default_schedule_constants() -> (usize, f32, f32) {
    (DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END)
}

// ---------------------------------------------------------------------------
// Latent artifacts
// ---------------------------------------------------------------------------

const LATENTS_MAGIC: &[u8] = b"tinv-latents\n";

/// Persist a latent batch together with the config hash and seed that
/// produced it. The payload carries its own checksum.
pub fn save_latents(path: &Path, latents: &Tensor, config_hash: &str, seed: u64) -> Result<()> {
    let ioe = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(ioe)?);
    w.write_all(LATENTS_MAGIC).map_err(ioe)?;
    w.write_all(&(config_hash.len() as u32).to_le_bytes()).map_err(ioe)?;
    w.write_all(config_hash.as_bytes()).map_err(ioe)?;
    w.write_all(&seed.to_le_bytes()).map_err(ioe)?;
    latents
        .with_data(|d| write_f32_blob(&mut w, "latents", latents.shape(), d))
        .map_err(ioe)
}

/// Load a latent batch saved by [`save_latents`]; returns the tensor, the
/// config hash, and the seed. Fails on any corruption.
pub fn load_latents(path: &Path) -> Result<(Tensor, String, u64)> {
    let ioe = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let fmt = |detail: String| Error::Format {
        path: path.display().to_string(),
        detail,
    };
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(ioe)?);
    let mut magic = vec![0u8; LATENTS_MAGIC.len()];
    r.read_exact(&mut magic).map_err(ioe)?;
    if magic != LATENTS_MAGIC {
        return Err(fmt("not a latents file".into()));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(ioe)?;
    let mut hash_bytes = vec![0u8; u32::from_le_bytes(u32b) as usize];
    r.read_exact(&mut hash_bytes).map_err(ioe)?;
    let config_hash =
        String::from_utf8(hash_bytes).map_err(|_| fmt("config hash not UTF-8".into()))?;
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b).map_err(ioe)?;
    let seed = u64::from_le_bytes(u64b);
    let blob = read_f32_blob(&mut r)
        .map_err(ioe)?
        .ok_or_else(|| fmt("blob name not UTF-8".into()))?;
    if !blob.checksum_ok {
        return Err(Error::ChecksumMismatch {
            what: format!("latents payload in {}", path.display()),
        });
    }
    if blob.name != "latents" {
        return Err(fmt(format!("unexpected blob {}", blob.name)));
    }
    let t = Tensor::from_vec(&blob.shape, blob.data, false)?;
    Ok((t, config_hash, seed))
}

/// A vocabulary/embedding-table pair extending the frozen model's text
/// side with pseudo-word placeholders. The base table tensor is shared
/// (never copied, never mutated); overrides live only in the setup, so
/// concurrent runs can each hold their own.
pub struct PromptSetup {
    pub vocab: Vocabulary,
    pub table: EmbeddingTable,
}

impl PromptSetup {
    /// No pseudo-words; behaves exactly like the model's own text side.
    pub fn bare(model: &FrozenModel) -> PromptSetup {
        PromptSetup {
            vocab: model.vocab.clone(),
            table: EmbeddingTable::from_tensor(model.table.table().clone()),
        }
    }

    /// Install learned pseudo-words (as frozen constants) for sampling
    /// and evaluation. Each word's base-table checksum must match the
    /// model it was learned against.
    pub fn with_words(model: &FrozenModel, words: &[&PseudoWord]) -> Result<PromptSetup> {
        let mut setup = PromptSetup::bare(model);
        let base = setup.table.checksum();
        for w in words {
            w.validate()?;
            if w.base_checksum != base {
                return Err(Error::ChecksumMismatch {
                    what: format!(
                        "pseudo-word {} was learned against a different embedding table",
                        w.placeholder
                    ),
                });
            }
            let vectors: Vec<Tensor> = w
                .vectors
                .iter()
                .map(|v| Tensor::from_vec(&[TEXT_DIM], v.clone(), false))
                .collect::<Result<_>>()?;
            setup.install(&w.placeholder, vectors)?;
        }
        Ok(setup)
    }

    /// Register (or re-register) a placeholder with explicit override
    /// vectors; returns its token id. Trainable vectors are allowed —
    /// the inversion engine installs its live parameters this way.
    pub fn install(&mut self, placeholder: &str, vectors: Vec<Tensor>) -> Result<usize> {
        let id = self.vocab.register_placeholder(placeholder)?;
        self.table.set_override(id, vectors)?;
        Ok(id)
    }

    /// Audit counter: how many times any override has been consulted.
    pub fn override_lookups(&self) -> u64 {
        self.table.override_lookups()
    }

    pub fn reset_override_lookups(&self) {
        self.table.reset_override_lookups()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut m = FrozenModel::new(99, false);
        m.latent_scale = 2.5;
        m.config_hash = "cafebabe".into();
        m.save_checkpoint(&path).unwrap();
        let loaded = FrozenModel::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.checksums(), m.checksums());
        assert_eq!(loaded.latent_scale, 2.5);
        assert_eq!(loaded.config_hash, "cafebabe");
        assert_eq!(loaded.seed, 99);
        assert_eq!(loaded.schedule.t_max(), m.schedule.t_max());
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = FrozenModel::new(5, false);
        m.save_checkpoint(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, bytes).unwrap();
        let err = FrozenModel::load_checkpoint(&path);
        assert!(err.is_err());
    }

    #[test]
    fn deep_clone_preserves_weights_and_isolates_denoiser() {
        let m = FrozenModel::new(7, false);
        let clone = m.deep_clone(true).unwrap();
        assert_eq!(clone.checksums(), m.checksums());
        // nudging the clone's denoiser must not affect the original
        let p = &clone.denoiser.params()[0];
        p.update_data(|d| d[0] += 1.0).unwrap();
        assert_ne!(clone.checksums().denoiser, m.checksums().denoiser);
        assert_eq!(clone.checksums().codec, m.checksums().codec);
    }

    #[test]
    fn prompt_encoding_and_sampling_are_deterministic() {
        let m = FrozenModel::new(3, false);
        let g = GuidanceConfig::default_sampling();
        let a = m.sample_latents(2, "a photo of a circle.", 4, &g, 42).unwrap();
        let b = m.sample_latents(2, "a photo of a circle.", 4, &g, 42).unwrap();
        let bits = |t: &Tensor| t.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = m.sample_latents(2, "a photo of a circle.", 4, &g, 43).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn denoise_loss_runs_and_is_finite() {
        let m = FrozenModel::new(3, false);
        let mut r = rng::stream(3, "loss", 0);
        let z0 = Tensor::randn(&[2, 4, 8, 8], &mut r);
        let eps = Tensor::randn(&[2, 4, 8, 8], &mut r);
        let codes = m
            .encode_prompts(&["a photo of a circle.".into(), String::new()])
            .unwrap();
        let loss = m.denoise_loss(&z0, &codes, &[17, 800], &eps).unwrap();
        assert!(loss.item().unwrap().is_finite());
    }
}
