//! On-disk tensors: a JSON manifest next to one row-major little-endian f64
//! blob.
//!
//! A checkpoint directory holds `manifest.json`, `tensors.bin` and
//! `vocab.txt`. Tensors are stored at full precision, so a loaded model (and a
//! resumed run) is bit-identical to the one that was saved. Every file
//! is written to a temporary sibling and renamed into place; the manifest goes
//! last.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::diffusion::TrainConfig;
use crate::embedding::Vocabulary;
use crate::error::{invalid, Error, Result};
use crate::train::TrainState;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

/// Packs tensors into one blob, in order.
pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (String, &'a Array2<f64>)>) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for (name, t) in tensors {
        let offset = blob.len() as u64;
        for &v in t.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name,
            shape: vec![t.nrows(), t.ncols()],
            dtype: "f64".into(),
            offset,
            nbytes: blob.len() as u64 - offset,
        });
    }
    (entries, blob)
}

pub fn decode_tensor(entry: &TensorEntry, blob: &[u8]) -> Result<Array2<f64>> {
    let width = match entry.dtype.as_str() {
        "f64" => 8,
        "f32" => 4,
        other => return Err(Error::Format(format!("{}: unsupported dtype {other}", entry.name))),
    };
    let (rows, cols) = match entry.shape.as_slice() {
        [r, c] => (*r, *c),
        [n] => (1, *n),
        other => return Err(Error::Format(format!("{}: unsupported rank {}", entry.name, other.len()))),
    };
    let expected = (rows * cols * width) as u64;
    if entry.nbytes != expected {
        return Err(Error::Format(format!("{}: {} bytes for shape {:?}", entry.name, entry.nbytes, entry.shape)));
    }
    let start = entry.offset as usize;
    let bytes = blob
        .get(start..start + expected as usize)
        .ok_or_else(|| Error::Format(format!("{}: extends past the end of the blob", entry.name)))?;
    let values: Vec<f64> = if width == 8 {
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
    } else {
        bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
    };
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Format(e.to_string()))
}

/// Writes `bytes` to a temporary file next to `path` and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Short sha256 digest used for provenance fields.
pub fn short_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleDescriptor {
    pub kind: String,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub step: usize,
    /// Totals behind the curve's moving average, oldest first.
    pub recent_totals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleDescriptor,
    pub progress: TrainProgress,
    /// Whether Adam moments are stored (`adam.m.*`, `adam.v.*`).
    pub has_optimizer_state: bool,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub train: TrainConfig,
    pub state: TrainState,
    pub vocab: Vocabulary,
    pub config_hash: String,
}

impl Checkpoint {
    fn manifest_and_blob(&self, with_optimizer: bool) -> (Manifest, Vec<u8>) {
        let mut tensors = self.params.tensors();
        if with_optimizer {
            tensors.extend(self.state.adam_m.tensors().into_iter().map(|(n, t)| (format!("adam.m.{n}"), t)));
            tensors.extend(self.state.adam_v.tensors().into_iter().map(|(n, t)| (format!("adam.v.{n}"), t)));
        }
        let (entries, blob) = encode_tensors(tensors);
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config_hash: self.config_hash.clone(),
            seed: self.train.seed,
            model: self.params.config,
            train: self.train.clone(),
            schedule: ScheduleDescriptor { kind: self.train.schedule.to_string(), steps: self.train.diffusion_steps },
            progress: TrainProgress { step: self.state.step, recent_totals: self.state.recent.iter().copied().collect() },
            has_optimizer_state: with_optimizer,
            tensors: entries,
        };
        (manifest, blob)
    }

    /// Hash of the parameter blob (optimizer state excluded).
    pub fn params_hash(&self) -> String {
        short_hash(&self.manifest_and_blob(false).1)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        if !dir.is_dir() {
            fs::create_dir_all(dir)?;
        }
        let (manifest, blob) = self.manifest_and_blob(true);
        write_atomic(&dir.join(BLOB_FILE), &blob)?;
        write_atomic(&dir.join(VOCAB_FILE), self.vocab.to_file_string().as_bytes())?;
        let mut text = serde_json::to_vec_pretty(&manifest)?;
        text.push(b'\n');
        write_atomic(&dir.join(MANIFEST_FILE), &text)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)
            .map_err(|e| Error::Format(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint format {}", manifest.format_version)));
        }
        let blob = fs::read(dir.join(BLOB_FILE))?;
        let vocab = Vocabulary::read(&dir.join(VOCAB_FILE))?;
        if vocab.len() != manifest.model.vocab_size {
            return Err(Error::Format(format!("vocabulary has {} tokens, model expects {}", vocab.len(), manifest.model.vocab_size)));
        }
        let mut params = DenoiserParams::init(manifest.model, &mut crate::rng::rng_from_seed(0))?;
        let mut state = TrainState::fresh(&params);
        state.step = manifest.progress.step;
        state.recent = manifest.progress.recent_totals.iter().copied().collect::<VecDeque<_>>();
        fill(&mut params, "", &manifest.tensors, &blob)?;
        if manifest.has_optimizer_state {
            fill(&mut state.adam_m, "adam.m.", &manifest.tensors, &blob)?;
            fill(&mut state.adam_v, "adam.v.", &manifest.tensors, &blob)?;
        }
        Ok(Self { params, train: manifest.train, state, vocab, config_hash: manifest.config_hash })
    }
}

fn fill(target: &mut DenoiserParams, prefix: &str, entries: &[TensorEntry], blob: &[u8]) -> Result<()> {
    for (name, t) in target.tensors_mut() {
        let full = format!("{prefix}{name}");
        let entry = entries
            .iter()
            .find(|e| e.name == full)
            .ok_or_else(|| Error::Format(format!("tensor {full} missing from manifest")))?;
        let value = decode_tensor(entry, blob)?;
        if value.dim() != t.dim() {
            return Err(Error::Shape(format!("{full}: stored {:?}, model expects {:?}", value.dim(), t.dim())));
        }
        *t = value;
    }
    Ok(())
}

/// Manifest of an imported embedding file: same tensor layout as checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub tensors: Vec<TensorEntry>,
}

/// Precomputed token embeddings (`tokens`, vocab x H_src) and an optional
/// linear map (`projection`, H_src x H) into the model's latent width.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportedEmbeddings {
    pub tokens: Array2<f64>,
    pub projection: Option<Array2<f64>>,
}

impl ImportedEmbeddings {
    /// Reads `<stem>.json` (manifest) and the blob it sits next to,
    /// `<stem>.bin`.
    pub fn read(manifest_path: &Path) -> Result<Self> {
        let manifest: EmbeddingManifest = serde_json::from_slice(&fs::read(manifest_path)?)
            .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
        let blob = fs::read(manifest_path.with_extension("bin"))?;
        let get = |name: &str| manifest.tensors.iter().find(|e| e.name == name).map(|e| decode_tensor(e, &blob)).transpose();
        let tokens = get("tokens")?.ok_or_else(|| Error::Format("embedding file has no 'tokens' tensor".into()))?;
        Ok(Self { tokens, projection: get("projection")? })
    }

    pub fn write(&self, manifest_path: &Path) -> Result<()> {
        let mut list = vec![("tokens".to_string(), &self.tokens)];
        if let Some(p) = &self.projection {
            list.push(("projection".to_string(), p));
        }
        let (tensors, blob) = encode_tensors(list);
        write_atomic(&manifest_path.with_extension("bin"), &blob)?;
        write_atomic(manifest_path, &serde_json::to_vec_pretty(&EmbeddingManifest { tensors })?)
    }

    /// Token rows in the model's latent width.
    pub fn projected(&self) -> Result<Array2<f64>> {
        match &self.projection {
            None => Ok(self.tokens.clone()),
            Some(p) if p.nrows() == self.tokens.ncols() => Ok(self.tokens.dot(p)),
            Some(p) => Err(Error::Shape(format!("projection {:?} for embeddings of width {}", p.dim(), self.tokens.ncols()))),
        }
    }

    /// Overwrites the token table of `params`.
    pub fn install(&self, params: &mut DenoiserParams) -> Result<()> {
        let rows = self.projected()?;
        if rows.dim() != params.table.tokens.dim() {
            return Err(invalid(format!(
                "imported embeddings {:?} do not match the token table {:?}",
                rows.dim(),
                params.table.tokens.dim()
            )));
        }
        params.table.tokens = rows;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::tests::tiny_config;
    use crate::rng::rng_from_seed;

    fn checkpoint() -> Checkpoint {
        let params = DenoiserParams::init(tiny_config(), &mut rng_from_seed(4)).unwrap();
        let mut state = TrainState::fresh(&params);
        state.step = 12;
        state.recent.extend([0.5, 0.25, 1.0 / 3.0]);
        state.adam_m.w_in.fill(0.125);
        let vocab = Vocabulary::new(["x", "y"]);
        Checkpoint { params, train: TrainConfig::default(), state, vocab, config_hash: "abc".into() }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let original = checkpoint();
        original.save(&a).unwrap();
        let loaded = Checkpoint::load(&a).unwrap();
        assert_eq!(loaded, original);
        loaded.save(&b).unwrap();
        for f in [BLOB_FILE, MANIFEST_FILE, VOCAB_FILE] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
        assert_eq!(loaded.state.step, 12);
        assert_eq!(loaded.state.recent, VecDeque::from(vec![0.5, 0.25, 1.0 / 3.0]));
        assert_eq!(loaded.state.adam_m.w_in[[0, 0]], 0.125);
        assert_eq!(Checkpoint::load(&b).unwrap(), loaded);
    }

    #[test]
    fn rejects_truncated_blob() {
        let dir = tempfile::tempdir().unwrap();
        checkpoint().save(dir.path()).unwrap();
        let blob = fs::read(dir.path().join(BLOB_FILE)).unwrap();
        fs::write(dir.path().join(BLOB_FILE), &blob[..blob.len() / 2]).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn imported_embeddings_with_projection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.json");
        let mut params = DenoiserParams::init(tiny_config(), &mut rng_from_seed(1)).unwrap();
        let v = params.config.vocab_size;
        let imported = ImportedEmbeddings {
            tokens: Array2::from_shape_fn((v, 3), |(i, j)| (i + j) as f64),
            projection: Some(Array2::from_shape_fn((3, 4), |(i, j)| if i == j { 1.0 } else { 0.0 })),
        };
        imported.write(&path).unwrap();
        let back = ImportedEmbeddings::read(&path).unwrap();
        assert_eq!(back, imported);
        back.install(&mut params).unwrap();
        assert_eq!(params.table.tokens[[2, 1]], 3.0);
        assert_eq!(params.table.tokens[[2, 3]], 0.0);
        let bad = ImportedEmbeddings { tokens: Array2::zeros((v, 3)), projection: None };
        assert!(bad.install(&mut params).is_err());
    }
}
