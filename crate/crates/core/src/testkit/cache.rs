//! Disk-backed cache of trained artifacts — the pretrained model, the
//! similarity encoder, and inversion runs — shared by integration tests
//! and benches so each machine pays a given training cost once. Cache
//! keys bake in every config hash and data fingerprint that could change
//! the artifact, and files are published with atomic renames, so stale or
//! half-written entries cannot be picked up.

use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{
    default_holdout, generate_corpus, render_concept_pool, CaptionedImage, ConceptSet,
    MAX_CONCEPT_IMAGES,
};
use crate::error::{Error, Result};
use crate::eval::{train_dual_encoder, DualEncoder, DualEncoderConfig, EvalRow};
use crate::invert::{textual_invert, InversionConfig, InversionRun};
use crate::model::FrozenModel;
use crate::pretrain::{pretrain, PretrainConfig};

pub const SHARED_CORPUS_SEED: u64 = 11;
pub const SHARED_HOLDOUT_SEED: u64 = 12;
pub const SHARED_POOL_SEED: u64 = 13;
pub const SHARED_PAIRS: usize = 2048;
pub const SHARED_HOLDOUT_PAIRS: usize = 512;

/// Override with `TINV_CACHE_DIR`; defaults to `target/tinv-cache` in
/// the workspace.
pub fn cache_dir() -> PathBuf {
    if let Ok(d) = std::env::var("TINV_CACHE_DIR") {
        return PathBuf::from(d);
    }
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/tinv-cache")
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn atomic_publish(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let dir = path.parent().expect("cache paths have parents");
    ensure_dir(dir)?;
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let tmp = dir.join(format!(
        "{}.tmp-{}-{nanos}",
        path.file_name().expect("file name").to_string_lossy(),
        std::process::id()
    ));
    if let Err(e) = write(&tmp) {
        let _ = std::fs::remove_file(&tmp);
        return Err(e);
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// In-process lock per cache key so parallel tests that miss on the same
/// artifact build it once instead of racing on duplicate work. (Cross-
/// process races stay harmless: the atomic rename makes the last writer
/// win with identical bytes.)
fn key_lock(name: &str) -> std::sync::Arc<Mutex<()>> {
    static LOCKS: OnceLock<Mutex<std::collections::HashMap<String, std::sync::Arc<Mutex<()>>>>> =
        OnceLock::new();
    let map = LOCKS.get_or_init(|| Mutex::new(std::collections::HashMap::new()));
    let mut guard = map.lock().unwrap_or_else(|e| e.into_inner());
    guard.entry(name.to_string()).or_default().clone()
}

fn cached_file_in(
    dir: &Path,
    name: &str,
    build: impl FnOnce(&Path) -> Result<()>,
) -> Result<PathBuf> {
    let path = dir.join(name);
    if path.exists() {
        return Ok(path);
    }
    let lock = key_lock(name);
    let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
    if path.exists() {
        return Ok(path);
    }
    atomic_publish(&path, build)?;
    Ok(path)
}

/// Return the cached file, building it first if absent. `build` writes to
/// a temp path; the final name appears only after a successful build.
pub fn cached_file(name: &str, build: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
    cached_file_in(&cache_dir(), name, build)
}

fn cached_json_in<T: Serialize + DeserializeOwned>(
    dir: &Path,
    name: &str,
    build: impl FnOnce() -> Result<T>,
) -> Result<T> {
    let path = cached_file_in(dir, name, |tmp| {
        let v = build()?;
        let text = serde_json::to_string(&v)
            .map_err(|e| Error::invalid(format!("serialize {name}: {e}")))?;
        std::fs::write(tmp, text).map_err(|e| Error::io(tmp.display().to_string(), e))
    })?;
    let text =
        std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

/// JSON-cached value. The fresh-build path also round-trips through disk,
/// so cached and first runs hand back byte-identical values.
pub fn cached_json<T: Serialize + DeserializeOwned>(
    name: &str,
    build: impl FnOnce() -> Result<T>,
) -> Result<T> {
    cached_json_in(&cache_dir(), name, build)
}

/// Double-checked in-process memoization. Each artifact passes its own
/// lock so nested builds (model needs corpus) cannot deadlock.
fn memo<T: Send + Sync + 'static>(
    cell: &'static OnceLock<T>,
    lock: &'static Mutex<()>,
    build: impl FnOnce() -> Result<T>,
) -> Result<&'static T> {
    if let Some(v) = cell.get() {
        return Ok(v);
    }
    let guard = lock.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(v) = cell.get() {
        drop(guard);
        return Ok(v);
    }
    let v = build()?;
    drop(guard);
    Ok(cell.get_or_init(|| v))
}

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

pub struct SharedCorpus {
    /// Training pairs for the generative model and the similarity encoder.
    pub pairs: Vec<CaptionedImage>,
    /// Fresh pairs never used in training, for retrieval checks.
    pub holdout_pairs: Vec<CaptionedImage>,
    /// One 5-image concept set per held-out attribute combination.
    pub concepts: Vec<ConceptSet>,
    /// 25 views of the first held-out combination, for the set-size sweep.
    pub pool: ConceptSet,
}

pub fn shared_corpus() -> Result<&'static SharedCorpus> {
    static CELL: OnceLock<SharedCorpus> = OnceLock::new();
    static LOCK: Mutex<()> = Mutex::new(());
    memo(&CELL, &LOCK, || {
        let holdout = default_holdout();
        let (pairs, concepts) = generate_corpus(SHARED_CORPUS_SEED, SHARED_PAIRS, &holdout)?;
        let (holdout_pairs, _) =
            generate_corpus(SHARED_HOLDOUT_SEED, SHARED_HOLDOUT_PAIRS, &holdout)?;
        let pool = render_concept_pool(&holdout[0], MAX_CONCEPT_IMAGES, SHARED_POOL_SEED)?;
        Ok(SharedCorpus {
            pairs,
            holdout_pairs,
            concepts,
            pool,
        })
    })
}

pub fn shared_pretrain_config() -> PretrainConfig {
    PretrainConfig::default()
}

fn pretrained_paths() -> Result<(PathBuf, PathBuf)> {
    let cfg = shared_pretrain_config();
    let key = &cfg.hash()[..16];
    let dir = cache_dir();
    let ckpt = dir.join(format!("pretrained-{key}.ckpt"));
    let log = dir.join(format!("pretrain-log-{key}.json"));
    if ckpt.exists() && log.exists() {
        return Ok((ckpt, log));
    }
    let corpus = shared_corpus()?;
    let state_dir = dir.join(format!("pretrain-state-{key}"));
    ensure_dir(&state_dir)?;
    let (model, train_log) = pretrain(&corpus.pairs, &cfg, Some(&state_dir), 1000)?;
    atomic_publish(&log, |tmp| {
        let text = serde_json::to_string(&(&train_log.codec_losses, &train_log.diffusion_losses))
            .map_err(|e| Error::invalid(format!("serialize train log: {e}")))?;
        std::fs::write(tmp, text).map_err(|e| Error::io(tmp.display().to_string(), e))
    })?;
    atomic_publish(&ckpt, |tmp| model.save_checkpoint(tmp))?;
    let _ = std::fs::remove_dir_all(&state_dir);
    Ok((ckpt, log))
}

/// The one pretrained generative bundle the whole suite shares, loaded
/// from (or first trained into) the disk cache.
pub fn pretrained_model() -> Result<&'static FrozenModel> {
    static CELL: OnceLock<FrozenModel> = OnceLock::new();
    static LOCK: Mutex<()> = Mutex::new(());
    memo(&CELL, &LOCK, || {
        let (ckpt, _) = pretrained_paths()?;
        FrozenModel::load_checkpoint(&ckpt)
    })
}

/// (codec losses, diffusion losses) from the shared pretraining run.
pub fn pretrain_losses() -> Result<&'static (Vec<f32>, Vec<f32>)> {
    static CELL: OnceLock<(Vec<f32>, Vec<f32>)> = OnceLock::new();
    static LOCK: Mutex<()> = Mutex::new(());
    memo(&CELL, &LOCK, || {
        let (_, log) = pretrained_paths()?;
        let text =
            std::fs::read_to_string(&log).map_err(|e| Error::io(log.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: log.display().to_string(),
            detail: e.to_string(),
        })
    })
}

pub fn shared_dual_config() -> DualEncoderConfig {
    DualEncoderConfig::default()
}

/// The contrastively trained similarity oracle shared by every score.
pub fn similarity_encoder() -> Result<&'static DualEncoder> {
    static CELL: OnceLock<DualEncoder> = OnceLock::new();
    static LOCK: Mutex<()> = Mutex::new(());
    memo(&CELL, &LOCK, || {
        let cfg = shared_dual_config();
        let name = format!("dual-{}.bin", &cfg.hash()[..16]);
        let path = cached_file(&name, |tmp| {
            let corpus = shared_corpus()?;
            let (enc, _losses) = train_dual_encoder(&corpus.pairs, &cfg)?;
            enc.save(tmp)
        })?;
        DualEncoder::load(&path)
    })
}

// ---------------------------------------------------------------------------
// Fingerprints and inversion runs
// ---------------------------------------------------------------------------

/// Short digest over all four component checksums of a model.
pub fn model_fingerprint(model: &FrozenModel) -> String {
    let c = model.checksums();
    let mut h = Sha256::new();
    for part in [&c.codec, &c.denoiser, &c.text_encoder, &c.embedding_table] {
        h.update(part.as_bytes());
    }
    format!("{:x}", h.finalize())[..16].to_string()
}

/// Short digest over a concept set's descriptor and image bytes.
pub fn concept_fingerprint(concept: &ConceptSet) -> String {
    let mut h = Sha256::new();
    h.update(concept.descriptor.as_bytes());
    for img in &concept.images {
        h.update(img);
    }
    format!("{:x}", h.finalize())[..16].to_string()
}

/// Disk-cached pseudo-word learning: keyed by model, concept, and config,
/// so any change to any of them forces a fresh run.
pub fn cached_inversion(
    model: &FrozenModel,
    concept: &ConceptSet,
    cfg: &InversionConfig,
) -> Result<InversionRun> {
    let name = format!(
        "invert-{}-{}-{}.json",
        model_fingerprint(model),
        concept_fingerprint(concept),
        &cfg.hash()[..16]
    );
    cached_json(&name, || textual_invert(model, concept, cfg))
}

/// Disk-cached evaluation rows for deterministic score pipelines. The
/// caller's `key` must identify the generation setup (word, prompts,
/// sampling config).
pub fn cached_eval_rows(key: &str, build: impl FnOnce() -> Result<Vec<EvalRow>>) -> Result<Vec<EvalRow>> {
    cached_json(&format!("eval-{key}.json"), build)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn cached_json_builds_once_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let calls = AtomicUsize::new(0);
        let name = "unit-cache-probe.json";
        let build = || {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(vec![1.5f32, -2.25, 3.125])
        };
        let a: Vec<f32> = cached_json_in(dir.path(), name, build).unwrap();
        let b: Vec<f32> =
            cached_json_in(dir.path(), name, || unreachable!("must hit the cache")).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn failed_builds_leave_no_cache_entry() {
        let dir = tempfile::tempdir().unwrap();
        let name = "unit-cache-fail.json";
        let r: Result<Vec<f32>> = cached_json_in(dir.path(), name, || Err(Error::invalid("boom")));
        assert!(r.is_err());
        assert!(!dir.path().join(name).exists());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
