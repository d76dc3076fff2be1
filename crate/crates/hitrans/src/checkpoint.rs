//! Versioned binary checkpoints: a JSON manifest (format version, model
//! config, label set, vocab fingerprint, tensor directory) followed by one
//! raw little-endian `f64` blob holding every parameter in visit order.
//!
//! Layout: 8 magic bytes, format version (`u32` LE), manifest length
//! (`u64` LE), manifest JSON, blob. Writes go through a temporary file in
//! the destination directory and a rename, so a crash can never leave a
//! half-written checkpoint behind. Loading cross-checks every tensor's
//! name, shape, and offset against the config before accepting the file,
//! and refuses other format versions instead of guessing.

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::model::{HiTransformerConfig, Model};
use crate::tokenizer::Vocab;
use rand::SeedableRng as _;
use sha2::{Digest as _, Sha256};
use std::io::Write as _;
use std::path::Path;

const MAGIC: &[u8; 8] = b"HITRANS\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the blob (not bytes).
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config: HiTransformerConfig,
    labels: Vec<String>,
    vocab_sha256: String,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint: the model plus everything needed to check it is
/// being used with the same vocabulary and label set it was trained on.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub labels: LabelMap,
    pub vocab_sha256: String,
}

impl Checkpoint {
    /// Errors unless `vocab` is byte-for-byte the vocabulary this
    /// checkpoint was trained with.
    pub fn require_vocab(&self, vocab: &Vocab) -> Result<()> {
        let got = vocab_fingerprint(vocab);
        if got != self.vocab_sha256 {
            return Err(Error::Incompatible(format!(
                "vocabulary fingerprint {} does not match the checkpoint's {}",
                got, self.vocab_sha256
            )));
        }
        Ok(())
    }

    /// Errors unless `labels` lists exactly the checkpoint's classes in
    /// the same order.
    pub fn require_labels(&self, labels: &LabelMap) -> Result<()> {
        if labels.names() != self.labels.names() {
            return Err(Error::Incompatible(format!(
                "label set {:?} does not match the checkpoint's {:?}",
                labels.names(),
                self.labels.names()
            )));
        }
        Ok(())
    }
}

/// SHA-256 of the vocabulary's file serialization, hex-encoded.
pub fn vocab_fingerprint(vocab: &Vocab) -> String {
    let digest = Sha256::digest(vocab.to_file_string().as_bytes());
    digest.iter().map(|b| format!("{:02x}", b)).collect()
}

/// Writes `bytes` to `path` atomically: a uniquely named temporary file in
/// the same directory, then a rename over the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error.to_string()))?;
    Ok(())
}

/// Serializes the model to the checkpoint byte format.
pub fn to_bytes(model: &Model, labels: &LabelMap, vocab_sha256: &str) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0u64;
    let mut bad: Option<String> = None;
    model.visit(&mut |name, t| {
        if bad.is_none() && !t.all_finite() {
            bad = Some(name.to_string());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
            offset,
            len: t.numel() as u64,
        });
        offset += t.numel() as u64;
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    if let Some(name) = bad {
        return Err(Error::Checkpoint(format!(
            "refusing to save non-finite parameter {:?}",
            name
        )));
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        labels: labels.names().to_vec(),
        vocab_sha256: vocab_sha256.to_string(),
        tensors,
    };
    let manifest_json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(20 + manifest_json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn save(path: &Path, model: &Model, labels: &LabelMap, vocab_sha256: &str) -> Result<()> {
    write_atomic(path, &to_bytes(model, labels, vocab_sha256)?)
}

/// Parses checkpoint bytes, validating structure against the embedded
/// config.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let fail = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 20 {
        return Err(fail("file too short to be a checkpoint"));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail("bad magic bytes: not a hitrans checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint format version {} (this build reads {})",
            version, FORMAT_VERSION
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let blob_start = 20usize
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| fail("manifest length exceeds file size"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[20..blob_start])
        .map_err(|e| Error::Checkpoint(format!("manifest is not valid JSON: {}", e)))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "manifest format version {} contradicts header {}",
            manifest.format_version, FORMAT_VERSION
        )));
    }
    manifest.config.validate()?;
    let labels = LabelMap::new(manifest.labels.clone())?;
    if labels.len() != manifest.config.n_classes {
        return Err(fail("label count disagrees with config n_classes"));
    }

    let blob = &bytes[blob_start..];
    if blob.len() % 8 != 0 {
        return Err(fail("parameter blob length is not a multiple of 8"));
    }
    let total = blob.len() / 8;

    // Materialize the structure from the config, then overwrite every
    // parameter from the blob, insisting the directory matches exactly.
    let mut model = Model::init(&manifest.config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
    let mut entry_idx = 0usize;
    let mut expected_offset = 0u64;
    let mut problem: Option<Error> = None;
    model.visit_mut(&mut |name, t| {
        if problem.is_some() {
            return;
        }
        let Some(entry) = manifest.tensors.get(entry_idx) else {
            problem = Some(fail("manifest lists fewer tensors than the config implies"));
            return;
        };
        if entry.name != name || entry.shape != t.shape {
            problem = Some(Error::Checkpoint(format!(
                "tensor directory mismatch: expected {:?} with shape {:?}, found {:?} with shape {:?}",
                name, t.shape, entry.name, entry.shape
            )));
            return;
        }
        if entry.offset != expected_offset || entry.len != t.numel() as u64 {
            problem = Some(Error::Checkpoint(format!(
                "tensor {:?}: offset/length {}+{} disagrees with expected {}+{}",
                name,
                entry.offset,
                entry.len,
                expected_offset,
                t.numel()
            )));
            return;
        }
        let start = entry.offset as usize;
        let end = start + entry.len as usize;
        if end > total {
            problem = Some(fail("tensor data extends past the end of the blob"));
            return;
        }
        for (i, v) in t.data.iter_mut().enumerate() {
            let at = (start + i) * 8;
            *v = f64::from_le_bytes(blob[at..at + 8].try_into().unwrap());
        }
        if !t.all_finite() {
            problem = Some(Error::Checkpoint(format!(
                "tensor {:?} contains non-finite values",
                name
            )));
            return;
        }
        expected_offset = end as u64;
        entry_idx += 1;
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if entry_idx != manifest.tensors.len() {
        return Err(fail("manifest lists more tensors than the config implies"));
    }
    if expected_offset as usize != total {
        return Err(fail("parameter blob size disagrees with the tensor directory"));
    }
    Ok(Checkpoint { model, labels, vocab_sha256: manifest.vocab_sha256 })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {}", path.display(), e)))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, PositionalKind};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> HiTransformerConfig {
        let enc = |d_model: usize, kind: PositionalKind| EncoderConfig {
            n_layers: 1,
            n_heads: 2,
            d_model,
            d_ff: 12,
            attn_dropout: 0.0,
            max_positions: 16,
            positional_kind: kind,
        };
        HiTransformerConfig {
            lower: enc(6, PositionalKind::Learned),
            upper: enc(8, PositionalKind::Sinusoidal),
            vocab_size: 10,
            n_classes: 3,
            classifier_hidden: 5,
            classifier_dropout: 0.0,
            speaker_variant: true,
            s_max: 2,
            pool_specials: true,
        }
    }

    fn fixtures() -> (Model, LabelMap, String) {
        let model = Model::init(&tiny_config(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let labels =
            LabelMap::new(vec!["x".into(), "y".into(), "z".into()]).unwrap();
        let vocab = Vocab::new(
            ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "a", "b"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap();
        let hash = vocab_fingerprint(&vocab);
        (model, labels, hash)
    }

    #[test]
    fn round_trip_is_bitwise_identical() {
        let (model, labels, hash) = fixtures();
        let bytes = to_bytes(&model, &labels, &hash).unwrap();
        let loaded = from_bytes(&bytes).unwrap();
        assert_eq!(loaded.model.config, model.config);
        assert_eq!(loaded.labels.names(), labels.names());
        assert_eq!(loaded.vocab_sha256, hash);
        let mut a = Vec::new();
        model.visit(&mut |n, t| a.push((n.to_string(), t.shape.clone(), t.data.clone())));
        let mut b = Vec::new();
        loaded.model.visit(&mut |n, t| b.push((n.to_string(), t.shape.clone(), t.data.clone())));
        assert_eq!(a, b);
    }

    #[test]
    fn serialization_is_deterministic() {
        let (model, labels, hash) = fixtures();
        let once = to_bytes(&model, &labels, &hash).unwrap();
        let twice = to_bytes(&model, &labels, &hash).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn save_is_atomic_and_loadable() {
        let (model, labels, hash) = fixtures();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &model, &labels, &hash).unwrap();
        // No stray temporary files survive the rename.
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names, vec![std::ffi::OsString::from("model.ckpt")]);
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.vocab_sha256, hash);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let (model, labels, hash) = fixtures();
        let bytes = to_bytes(&model, &labels, &hash).unwrap();

        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert_eq!(from_bytes(&wrong).unwrap_err().kind(), "checkpoint");

        assert_eq!(from_bytes(&bytes[..10]).unwrap_err().kind(), "checkpoint");
        let cut = bytes.len() - 8;
        assert_eq!(from_bytes(&bytes[..cut]).unwrap_err().kind(), "checkpoint");
    }

    #[test]
    fn rejects_other_format_versions() {
        let (model, labels, hash) = fixtures();
        let mut bytes = to_bytes(&model, &labels, &hash).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let err = from_bytes(&bytes).unwrap_err();
        assert_eq!(err.kind(), "incompatible");
        assert!(err.to_string().contains("version 2"), "{err}");
    }

    #[test]
    fn rejects_tampered_tensor_directory() {
        let (model, labels, hash) = fixtures();
        let bytes = to_bytes(&model, &labels, &hash).unwrap();
        // Rewrite the manifest with one shape corrupted, keeping the blob.
        let manifest_len =
            u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mut manifest: Manifest =
            serde_json::from_slice(&bytes[20..20 + manifest_len]).unwrap();
        manifest.tensors[3].shape[0] += 1;
        let mangled_json = serde_json::to_vec(&manifest).unwrap();
        let mut mangled = Vec::new();
        mangled.extend_from_slice(&bytes[..12]);
        mangled.extend_from_slice(&(mangled_json.len() as u64).to_le_bytes());
        mangled.extend_from_slice(&mangled_json);
        mangled.extend_from_slice(&bytes[20 + manifest_len..]);
        let err = from_bytes(&mangled).unwrap_err();
        assert_eq!(err.kind(), "checkpoint");
        assert!(err.to_string().contains("mismatch"), "{err}");
    }

    #[test]
    fn refuses_nonfinite_parameters_on_save_and_load() {
        let (mut model, labels, hash) = fixtures();
        let clean = to_bytes(&model, &labels, &hash).unwrap();
        model.visit_mut(&mut |name, t| {
            if name == "classifier.b1" {
                t.data[0] = f64::NAN;
            }
        });
        let err = to_bytes(&model, &labels, &hash).unwrap_err();
        assert_eq!(err.kind(), "checkpoint");
        assert!(err.to_string().contains("classifier.b1"), "{err}");

        // Patch a NaN into the clean blob: find classifier.b1's offset.
        let manifest_len =
            u64::from_le_bytes(clean[12..20].try_into().unwrap()) as usize;
        let manifest: Manifest =
            serde_json::from_slice(&clean[20..20 + manifest_len]).unwrap();
        let entry =
            manifest.tensors.iter().find(|e| e.name == "classifier.b1").unwrap();
        let at = 20 + manifest_len + entry.offset as usize * 8;
        let mut poisoned = clean.clone();
        poisoned[at..at + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        let err = from_bytes(&poisoned).unwrap_err();
        assert_eq!(err.kind(), "checkpoint");
        assert!(err.to_string().contains("classifier.b1"), "{err}");
    }

    #[test]
    fn compatibility_guards() {
        let (model, labels, hash) = fixtures();
        let ckpt = from_bytes(&to_bytes(&model, &labels, &hash).unwrap()).unwrap();

        let same_vocab = Vocab::new(
            ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "a", "b"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap();
        ckpt.require_vocab(&same_vocab).unwrap();
        ckpt.require_labels(&labels).unwrap();

        let other_vocab = Vocab::new(
            ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "a", "c"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap();
        assert_eq!(ckpt.require_vocab(&other_vocab).unwrap_err().kind(), "incompatible");

        let other_labels =
            LabelMap::new(vec!["x".into(), "y".into(), "w".into()]).unwrap();
        assert_eq!(ckpt.require_labels(&other_labels).unwrap_err().kind(), "incompatible");
    }

    #[test]
    fn fingerprint_tracks_vocab_content() {
        let v1 = Vocab::new(
            ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "a"].iter().map(|s| s.to_string()).collect(),
        )
        .unwrap();
        let v2 = Vocab::new(
            ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "b"].iter().map(|s| s.to_string()).collect(),
        )
        .unwrap();
        assert_eq!(vocab_fingerprint(&v1), vocab_fingerprint(&v1));
        assert_ne!(vocab_fingerprint(&v1), vocab_fingerprint(&v2));
        assert_eq!(vocab_fingerprint(&v1).len(), 64);
    }

    #[test]
    fn write_atomic_overwrites_existing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"second");
    }
}
