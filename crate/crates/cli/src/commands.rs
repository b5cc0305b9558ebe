//! One function per subcommand. Each resolves its configuration, creates
//! a run directory, executes the pipeline, and writes artifacts plus a
//! manifest. Artifacts are deterministic byte-for-byte under identical
//! config and seed; the manifest carries the resolved config and hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use tinv_core::data::{
    self, default_holdout, from_tensor, generate_corpus, load_concept_set, render_concept_pool,
    save_concept_set, write_png, ConceptSet, MAX_CONCEPT_IMAGES,
};
use tinv_core::diffusion::GuidanceConfig;
use tinv_core::error::{Error, Result};
use tinv_core::eval::{
    baseline_rows, evaluate_word, setsize_sweep, train_dual_encoder, DualEncoder, EvalReport,
};
use tinv_core::invert::{bipartite_edit, pivotal_tune, textual_invert, InversionRun};
use tinv_core::model::{save_latents, FrozenModel, PromptSetup};
use tinv_core::ops;
use tinv_core::text::PseudoWord;

use crate::config::RunConfig;
use crate::gallery::emit_gallery;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "TINV_OUT_ROOT";

/// Where a run's artifacts land and the hash they are stamped with.
pub struct RunContext {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub hash: String,
    pub seed: u64,
    artifacts: Vec<String>,
}

impl RunContext {
    /// Resolve the run directory: explicit `--out-dir` wins, otherwise
    /// `<out_root>/<unix-seconds>-<hash prefix>` under the first of
    /// `--out-root`, the `out_root` config key, `$TINV_OUT_ROOT`, `runs`.
    pub fn create(mut config: RunConfig, out_dir: Option<&Path>) -> Result<RunContext> {
        config.resolve()?;
        let hash = config.hash();
        let seed = config.get_u64("seed")?;
        let dir = match out_dir {
            Some(d) => d.to_path_buf(),
            None => {
                let root = if !config.get("out_root").is_empty() {
                    PathBuf::from(config.get("out_root"))
                } else if let Ok(env_root) = std::env::var(OUT_ROOT_ENV) {
                    PathBuf::from(env_root)
                } else {
                    PathBuf::from("runs")
                };
                let secs = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0);
                let mut candidate = root.join(format!("{secs}-{}", &hash[..12]));
                let mut n = 1;
                while candidate.exists() {
                    candidate = root.join(format!("{secs}-{}-{n}", &hash[..12]));
                    n += 1;
                }
                candidate
            }
        };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        Ok(RunContext {
            dir,
            config,
            hash,
            seed,
            artifacts: Vec::new(),
        })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.dir.join(name)
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        let d = self.dir.join(name);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(d.display().to_string(), e))?;
        Ok(d)
    }

    /// PNG text-chunk metadata stamped on every image artifact.
    pub fn stamp(&self) -> [(String, String); 2] {
        [
            ("config_hash".to_string(), self.hash.clone()),
            ("seed".to_string(), self.seed.to_string()),
        ]
    }

    /// Write `manifest.json`: command, config hash, seed, resolved
    /// config, artifact list, and any extra report values. Deterministic
    /// bytes (sorted keys, no timestamps).
    pub fn finish(
        mut self,
        command: &str,
        extra: &[(&str, serde_json::Value)],
    ) -> Result<PathBuf> {
        let manifest = self.dir.join("manifest.json");
        self.artifacts.push("manifest.json".to_string());
        self.artifacts.sort();
        let mut doc = BTreeMap::<String, serde_json::Value>::new();
        doc.insert("command".into(), command.into());
        doc.insert("config_hash".into(), self.hash.clone().into());
        doc.insert("seed".into(), self.seed.into());
        doc.insert(
            "config".into(),
            serde_json::Value::Object(
                self.config
                    .entries()
                    .iter()
                    .map(|(k, v)| (k.clone(), serde_json::Value::from(v.clone())))
                    .collect(),
            ),
        );
        doc.insert("artifacts".into(), serde_json::json!(self.artifacts));
        for (k, v) in extra {
            doc.insert((*k).to_string(), v.clone());
        }
        let text = serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::invalid(format!("manifest: {e}")))?;
        std::fs::write(&manifest, text)
            .map_err(|e| Error::io(manifest.display().to_string(), e))?;
        println!("run: {}", self.dir.display());
        println!("config hash: {}", self.hash);
        Ok(self.dir)
    }
}

/// Digest of a pseudo-word's identity and exact vector bits.
fn word_bits_digest(w: &PseudoWord) -> String {
    use sha2::Digest as _;
    let mut h = sha2::Sha256::new();
    h.update(w.placeholder.as_bytes());
    for v in &w.vectors {
        for x in v {
            h.update(x.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

fn write_loss_csv(path: &Path, header: &str, losses: &[f32]) -> Result<()> {
    let mut text = format!("step,{header}\n");
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn load_model(cfg: &RunConfig, flag_path: Option<&Path>) -> Result<FrozenModel> {
    let path = match flag_path {
        Some(p) => p.to_path_buf(),
        None => cfg
            .path("paths.model", "--model", true)?
            .expect("required path present"),
    };
    FrozenModel::load_checkpoint(&path)
}

fn load_words(cfg: &RunConfig, flag_paths: &[PathBuf]) -> Result<Vec<PseudoWord>> {
    let mut paths: Vec<PathBuf> = flag_paths.to_vec();
    if paths.is_empty() {
        if let Some(p) = cfg.path("paths.pseudoword", "--pseudoword", false)? {
            paths.push(p);
        }
    }
    paths.iter().map(|p| PseudoWord::load(p)).collect()
}

fn load_concept(cfg: &RunConfig, flag: Option<&Path>, descriptor: Option<&str>) -> Result<ConceptSet> {
    let dir = match flag {
        Some(p) => p.to_path_buf(),
        None => cfg
            .path("paths.concept", "--concept", true)?
            .expect("required path present"),
    };
    load_concept_set(&dir, descriptor)
}

/// Images tensor -> numbered PNGs plus a square-ish gallery.
fn write_image_set(
    ctx: &mut RunContext,
    images: &tinv_core::Tensor,
    dir_name: &str,
    gallery_name: &str,
) -> Result<()> {
    let imgs = from_tensor(images)?;
    let dir = ctx.subdir(dir_name)?;
    ctx.artifacts.push(format!("{dir_name}/"));
    let stamp = ctx.stamp();
    let meta: Vec<(&str, &str)> = stamp.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    for (i, img) in imgs.iter().enumerate() {
        write_png(&dir.join(format!("{i:03}.png")), img, &meta)?;
    }
    let cols = (imgs.len() as f64).sqrt().ceil() as usize;
    let gpath = ctx.path(gallery_name);
    emit_gallery(&imgs, cols.max(1), &gpath, &meta)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

pub fn gen_data(cfg: RunConfig, out_dir: Option<&Path>) -> Result<PathBuf> {
    let mut ctx = RunContext::create(cfg, out_dir)?;
    let corpus_seed = ctx.config.get_u64("corpus.seed")?;
    let n_pairs = ctx.config.get_usize("corpus.pairs")?;
    let holdout = default_holdout();
    let (pairs, concepts) = generate_corpus(corpus_seed, n_pairs, &holdout)?;

    let stamp = ctx.stamp();
    let meta: Vec<(&str, &str)> = stamp.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    for (i, set) in concepts.iter().enumerate() {
        let dir = ctx.dir.join(format!("concepts/{i}-{}", set.descriptor));
        save_concept_set(set, &dir, &meta)?;
        ctx.artifacts
            .push(format!("concepts/{i}-{}/", set.descriptor));
    }
    // a deeper pool of the first held-out concept for set-size sweeps
    let pool = render_concept_pool(&holdout[0], MAX_CONCEPT_IMAGES, corpus_seed)?;
    save_concept_set(&pool, &ctx.dir.join("pool"), &meta)?;
    ctx.artifacts.push("pool/".to_string());

    let captions_path = ctx.path("captions.jsonl");
    let mut lines = String::new();
    for (i, p) in pairs.iter().enumerate() {
        let row = serde_json::json!({
            "index": i,
            "caption": p.caption,
            "attributes": p.spec.description(),
        });
        lines.push_str(&row.to_string());
        lines.push('\n');
    }
    std::fs::write(&captions_path, lines)
        .map_err(|e| Error::io(captions_path.display().to_string(), e))?;

    let preview: Vec<Vec<u8>> = pairs.iter().take(64).map(|p| p.pixels.clone()).collect();
    let preview_path = ctx.path("preview.png");
    emit_gallery(&preview, 8, &preview_path, &meta)?;

    ctx.finish(
        "gen-data",
        &[
            ("pairs", serde_json::json!(pairs.len())),
            ("concept_sets", serde_json::json!(concepts.len())),
        ],
    )
}

pub fn pretrain_cmd(
    cfg: RunConfig,
    out_dir: Option<&Path>,
    checkpoint_every: usize,
) -> Result<PathBuf> {
    let mut ctx = RunContext::create(cfg, out_dir)?;
    let pre_cfg = ctx.config.pretrain_config()?;
    let corpus_seed = ctx.config.get_u64("corpus.seed")?;
    let n_pairs = ctx.config.get_usize("corpus.pairs")?;
    let (pairs, _) = generate_corpus(corpus_seed, n_pairs, &default_holdout())?;

    let state_dir = ctx.subdir("state")?;
    let (model, log) =
        tinv_core::pretrain::pretrain(&pairs, &pre_cfg, Some(&state_dir), checkpoint_every)?;

    let ckpt = ctx.path("model.ckpt");
    model.save_checkpoint(&ckpt)?;
    write_loss_csv(&ctx.path("codec-loss.csv"), "codec_loss", &log.codec_losses)?;
    write_loss_csv(
        &ctx.path("diffusion-loss.csv"),
        "diffusion_loss",
        &log.diffusion_losses,
    )?;

    // sixteen-sample previews: unconditional and guided
    let uncond = model.sample_images(None, 16, "", 50, &GuidanceConfig::none(), ctx.seed)?;
    write_image_set(&mut ctx, &uncond, "samples-uncond", "samples-uncond.png")?;
    let cond = model.sample_images(
        None,
        16,
        "a photo of a red circle.",
        50,
        &GuidanceConfig::default_sampling(),
        ctx.seed,
    )?;
    write_image_set(&mut ctx, &cond, "samples-cond", "samples-cond.png")?;

    let checks = model.checksums();
    ctx.finish(
        "pretrain",
        &[
            ("final_codec_loss", serde_json::json!(log.codec_losses.last())),
            (
                "final_diffusion_loss",
                serde_json::json!(log.diffusion_losses.last()),
            ),
            (
                "model_checksums",
                serde_json::json!({
                    "codec": checks.codec,
                    "denoiser": checks.denoiser,
                    "text_encoder": checks.text_encoder,
                    "embedding_table": checks.embedding_table,
                }),
            ),
        ],
    )
}

fn save_inversion_run(ctx: &mut RunContext, run: &InversionRun) -> Result<()> {
    run.pseudo_word.save(&ctx.path("pseudo-word.txt"))?;
    for (i, w) in run.per_image_words.iter().enumerate() {
        w.save(&ctx.path(&format!("per-image-{i:02}.txt")))?;
    }
    write_loss_csv(&ctx.path("inversion-loss.csv"), "loss", &run.losses)?;
    let intro = ctx.path("introductions.json");
    let doc = serde_json::json!({
        "introduced_at": run.introduced_at,
        "optimized_vectors": run.optimized_vectors,
    });
    std::fs::write(&intro, doc.to_string())
        .map_err(|e| Error::io(intro.display().to_string(), e))?;
    Ok(())
}

pub fn invert_cmd(
    cfg: RunConfig,
    out_dir: Option<&Path>,
    model_path: Option<&Path>,
    concept_dir: Option<&Path>,
    descriptor: Option<&str>,
) -> Result<PathBuf> {
    let mut ctx = RunContext::create(cfg, out_dir)?;
    let model = load_model(&ctx.config, model_path)?;
    let concept = load_concept(&ctx.config, concept_dir, descriptor)?;
    let inv_cfg = ctx.config.inversion_config()?;
    let run = textual_invert(&model, &concept, &inv_cfg)?;
    save_inversion_run(&mut ctx, &run)?;
    ctx.finish(
        "invert",
        &[
            ("placeholder", serde_json::json!(run.pseudo_word.placeholder)),
            ("descriptor", serde_json::json!(run.pseudo_word.coarse_descriptor)),
            ("vectors", serde_json::json!(run.pseudo_word.vectors.len())),
            ("final_loss", serde_json::json!(run.losses.last())),
            ("concept_images", serde_json::json!(concept.len())),
        ],
    )
}

pub fn sample_cmd(
    cfg: RunConfig,
    out_dir: Option<&Path>,
    model_path: Option<&Path>,
    word_paths: &[PathBuf],
    prompt: &str,
) -> Result<PathBuf> {
    let mut ctx = RunContext::create(cfg, out_dir)?;
    let model = load_model(&ctx.config, model_path)?;
    let words = load_words(&ctx.config, word_paths)?;
    let word_refs: Vec<&PseudoWord> = words.iter().collect();
    let setup = PromptSetup::with_words(&model, &word_refs)?;

    let n = ctx.config.get_usize("sample.n")?;
    let steps = ctx.config.get_usize("sample.steps")?;
    let guidance = GuidanceConfig::new(ctx.config.get_f32("sample.guidance")?)?;
    let latents = model.sample_latents_with(Some(&setup), n, prompt, steps, &guidance, ctx.seed)?;
    let images = model.decode_latents(&latents)?;

    save_latents(&ctx.path("latents.bin"), &latents, &ctx.hash, ctx.seed)?;
    write_image_set(&mut ctx, &images, "images", "gallery.png")?;
    ctx.finish(
        "sample",
        &[
            ("prompt", serde_json::json!(prompt)),
            ("n", serde_json::json!(n)),
            ("ddim_steps", serde_json::json!(steps)),
        ],
    )
}

/// Load the similarity encoder from `--dual`/`paths.dual`, or train one
/// from the configured corpus and save it into the run directory.
fn obtain_dual(ctx: &mut RunContext, dual_path: Option<&Path>) -> Result<DualEncoder> {
    let from_cfg = ctx.config.path("paths.dual", "--dual", false)?;
    let path = dual_path.map(|p| p.to_path_buf()).or(from_cfg);
    if let Some(p) = path {
        return DualEncoder::load(&p);
    }
    let corpus_seed = ctx.config.get_u64("corpus.seed")?;
    let n_pairs = ctx.config.get_usize("corpus.pairs")?;
    let (pairs, _) = generate_corpus(corpus_seed, n_pairs, &default_holdout())?;
    let (enc, _) = train_dual_encoder(&pairs, &ctx.config.dual_config()?)?;
    enc.save(&ctx.path("dual-encoder.bin"))?;
    Ok(enc)
}

pub fn evaluate_cmd(
    cfg: RunConfig,
    out_dir: Option<&Path>,
    model_path: Option<&Path>,
    word_paths: &[PathBuf],
    concept_dir: Option<&Path>,
    descriptor: Option<&str>,
    dual_path: Option<&Path>,
) -> Result<PathBuf> {
    let mut ctx = RunContext::create(cfg, out_dir)?;
    let model = load_model(&ctx.config, model_path)?;
    let words = load_words(&ctx.config, word_paths)?;
    if words.len() != 1 {
        return Err(Error::invalid(format!(
            "evaluate needs exactly one --pseudoword, got {}",
            words.len()
        )));
    }
    let concept = load_concept(&ctx.config, concept_dir, descriptor)?;
    let enc = obtain_dual(&mut ctx, dual_path)?;
    let eval_cfg = ctx.config.eval_config()?;

    let mut report = EvalReport::default();
    report
        .rows
        .extend(evaluate_word(&model, &enc, &words[0], &concept, &eval_cfg, "inverted")?);
    let (rows, lookups) = baseline_rows(&model, &enc, &concept, &eval_cfg)?;
    report.rows.extend(rows);
    report.validate()?;
    if lookups != 0 {
        return Err(Error::invalid(format!(
            "prompt-only baseline consulted {lookups} override vectors; expected none"
        )));
    }

    report.write_jsonl(&ctx.path("report.jsonl"))?;
    report.write_csv(&ctx.path("report.csv"))?;
    let recon = report.median("inverted", "reconstruction");
    let edit = report.mean("inverted", "editability");
    ctx.finish(
        "evaluate",
        &[
            ("reconstruction", serde_json::json!(recon)),
            ("editability_mean", serde_json::json!(edit)),
            ("rows", serde_json::json!(report.rows.len())),
        ],
    )
}

pub fn ddim_edit_cmd(
    cfg: RunConfig,
    out_dir: Option<&Path>,
    model_path: Option<&Path>,
    word_paths: &[PathBuf],
    image_path: Option<&Path>,
    src_prompt: &str,
    tgt_prompt: &str,
) -> Result<PathBuf> {
    let mut ctx = RunContext::create(cfg, out_dir)?;
    let model = load_model(&ctx.config, model_path)?;
    let words = load_words(&ctx.config, word_paths)?;
    let word_refs: Vec<&PseudoWord> = words.iter().collect();
    let setup = PromptSetup::with_words(&model, &word_refs)?;

    let img_file = match image_path {
        Some(p) => p.to_path_buf(),
        None => ctx
            .config
            .path("paths.image", "--image", true)?
            .expect("required path present"),
    };
    let pixels = data::read_image_normalized(&img_file)?;
    let image = data::to_tensor(&[pixels.clone()])?;

    let steps = ctx.config.get_usize("edit.steps")?;
    let guidance = GuidanceConfig::new(ctx.config.get_f32("edit.guidance")?)?;
    let outcome = bipartite_edit(&model, Some(&setup), &image, src_prompt, tgt_prompt, &guidance, steps)?;

    let stamp = ctx.stamp();
    let meta: Vec<(&str, &str)> = stamp.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    write_png(&ctx.path("input.png"), &pixels, &meta)?;
    let edited = from_tensor(&outcome.image)?;
    write_png(&ctx.path("edited.png"), &edited[0], &meta)?;
    save_latents(&ctx.path("source-latent.bin"), &outcome.source_latent, &ctx.hash, ctx.seed)?;
    save_latents(&ctx.path("inverted-latent.bin"), &outcome.inverted_latent, &ctx.hash, ctx.seed)?;
    save_latents(&ctx.path("edited-latent.bin"), &outcome.edited_latent, &ctx.hash, ctx.seed)?;

    let shift = ops::mse(&outcome.edited_latent, &outcome.source_latent)?.item()?;
    ctx.finish(
        "ddim-edit",
        &[
            ("src_prompt", serde_json::json!(src_prompt)),
            ("tgt_prompt", serde_json::json!(tgt_prompt)),
            ("latent_shift_mse", serde_json::json!(shift)),
            ("identical_prompts", serde_json::json!(src_prompt == tgt_prompt)),
        ],
    )
}

pub fn pivotal_tune_cmd(
    cfg: RunConfig,
    out_dir: Option<&Path>,
    model_path: Option<&Path>,
    word_paths: &[PathBuf],
    concept_dir: Option<&Path>,
    descriptor: Option<&str>,
) -> Result<PathBuf> {
    let mut ctx = RunContext::create(cfg, out_dir)?;
    let model = load_model(&ctx.config, model_path)?;
    let words = load_words(&ctx.config, word_paths)?;
    if words.len() != 1 {
        return Err(Error::invalid(format!(
            "pivotal-tune needs exactly one --pseudoword, got {}",
            words.len()
        )));
    }
    let concept = load_concept(&ctx.config, concept_dir, descriptor)?;
    let piv_cfg = ctx.config.pivotal_config()?;

    let vectors_before = word_bits_digest(&words[0]);
    let run = pivotal_tune(&model, &words[0], &concept, &piv_cfg)?;
    let vectors_after = word_bits_digest(&words[0]);

    run.model.save_checkpoint(&ctx.path("model-tuned.ckpt"))?;
    write_loss_csv(&ctx.path("pivotal-loss.csv"), "loss", &run.losses)?;
    // the tuned bundle has a different base-table binding for the word
    words[0].save(&ctx.path("pseudo-word.txt"))?;
    ctx.finish(
        "pivotal-tune",
        &[
            ("final_loss", serde_json::json!(run.losses.last())),
            ("pivot_unchanged", serde_json::json!(vectors_before == vectors_after)),
        ],
    )
}

pub fn sweep_cmd(
    cfg: RunConfig,
    out_dir: Option<&Path>,
    model_path: Option<&Path>,
    pool_dir: Option<&Path>,
    descriptor: Option<&str>,
    dual_path: Option<&Path>,
) -> Result<PathBuf> {
    let mut ctx = RunContext::create(cfg, out_dir)?;
    let model = load_model(&ctx.config, model_path)?;
    let pool = load_concept(&ctx.config, pool_dir, descriptor)?;
    let enc = obtain_dual(&mut ctx, dual_path)?;
    let sizes = ctx.config.sweep_sizes()?;
    let inv_cfg = ctx.config.inversion_config()?;
    let eval_cfg = ctx.config.eval_config()?;

    let report = setsize_sweep(&model, &enc, &pool, &sizes, &inv_cfg, &eval_cfg)?;
    report.write_jsonl(&ctx.path("report.jsonl"))?;
    report.write_csv(&ctx.path("report.csv"))?;

    let summary: Vec<serde_json::Value> = sizes
        .iter()
        .map(|s| {
            let label = format!("size-{s}");
            serde_json::json!({
                "size": s,
                "reconstruction": report.median(&label, "reconstruction"),
                "editability_mean": report.mean(&label, "editability"),
            })
        })
        .collect();
    ctx.finish("sweep", &[("sizes", serde_json::json!(summary))])
}
