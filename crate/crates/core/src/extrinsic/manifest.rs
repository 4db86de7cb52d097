use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{gen_toy_face, load_png, save_png, ImageTensor, RngStream, ToyFaceSpec};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    Original,
    Enhanced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub source: ImageSource,
    pub parent_id: Option<String>,
    pub enhancer_checkpoint_id: Option<String>,
}

/// A corpus on disk: image records plus the enhancement round they belong to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub round: u32,
    pub images: Vec<ManifestRecord>,
    /// Directory that record paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

impl DatasetManifest {
    pub fn new(round: u32, root: impl Into<PathBuf>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            round,
            images: Vec::new(),
            root: root.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn resolve(&self, rec: &ManifestRecord) -> PathBuf {
        self.root.join(&rec.path)
    }

    pub fn get(&self, id: &str) -> Option<&ManifestRecord> {
        self.images.iter().find(|r| r.id == id)
    }

    /// Structural checks that do not touch the image files.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!("unsupported manifest version {}", self.version)));
        }
        let mut seen = HashSet::new();
        for r in &self.images {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate image id {}", r.id)));
            }
            match r.source {
                ImageSource::Original if self.round != 0 => {
                    return Err(Error::Manifest(format!(
                        "original record {} in a round-{} manifest",
                        r.id, self.round
                    )))
                }
                ImageSource::Enhanced if r.parent_id.is_none() => {
                    return Err(Error::Manifest(format!("enhanced record {} has no parent", r.id)))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Recomputes every checksum and fails on the first mismatch.
    pub fn verify(&self) -> Result<()> {
        for r in &self.images {
            let actual = sha256_file(&self.resolve(r))?;
            if actual != r.sha256 {
                return Err(Error::Integrity(format!(
                    "{}: checksum {} does not match manifest {}",
                    r.id, actual, r.sha256
                )));
            }
        }
        Ok(())
    }

    /// Parses, validates and checksum-verifies a manifest file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        m.verify()?;
        Ok(m)
    }

    /// Writes the manifest atomically.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("json.partial");
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load_image(&self, rec: &ManifestRecord) -> Result<ImageTensor> {
        load_png(self.resolve(rec))
    }

    /// All images in record order, paired with their ids.
    pub fn load_images(&self) -> Result<Vec<(String, ImageTensor)>> {
        self.images
            .iter()
            .map(|r| Ok((r.id.clone(), self.load_image(r)?)))
            .collect()
    }

    /// SHA-256 of the manifest's canonical JSON, used to pin inputs of a run.
    pub fn checksum(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

/// Saves `img` under `root/rel` and returns its record.
pub fn write_record(root: &Path, rel: &str, img: &ImageTensor, template: ManifestRecord) -> Result<ManifestRecord> {
    let path = root.join(rel);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_png(img, &path)?;
    Ok(ManifestRecord {
        path: rel.to_string(),
        sha256: sha256_file(&path)?,
        ..template
    })
}

pub fn toy_id(i: usize) -> String {
    format!("face_{i:05}")
}

/// Writes `count` toy faces under `dir/images/` plus `dir/manifest.json`.
pub fn write_toy_corpus(dir: &Path, count: usize, spec: &ToyFaceSpec, seed: u64) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut m = DatasetManifest::new(0, dir);
    let base = RngStream::new(seed, 0x544f_59);
    for i in 0..count {
        let id = toy_id(i);
        let img = gen_toy_face(spec, base.child(i as u64))?;
        let rec = write_record(
            dir,
            &format!("images/{id}.png"),
            &img,
            ManifestRecord {
                id,
                path: String::new(),
                sha256: String::new(),
                source: ImageSource::Original,
                parent_id: None,
                enhancer_checkpoint_id: None,
            },
        )?;
        m.images.push(rec);
    }
    m.save(dir.join("manifest.json"))?;
    Ok(m)
}
