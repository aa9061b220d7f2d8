//! Enrolled individuals and their embedding templates.
//!
//! On disk a gallery is a JSON manifest plus a binary sidecar of
//! little-endian `f32` embeddings. The manifest names the sidecar, and each
//! save writes a fresh sidecar before atomically renaming the manifest over
//! the old one, so a reader always sees a consistent pair.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{Embedding, EmbeddingError};

pub const GALLERY_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum GalleryError {
    #[error("individual {id} is a {existing}, cannot enroll as {requested}")]
    SpeciesConflict {
        id: String,
        existing: Species,
        requested: Species,
    },
    #[error("unknown individual {0}")]
    NotFound(String),
    #[error("embedding dimension {got} does not match gallery dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("gallery format error: {0}")]
    Format(String),
    #[error("invalid individual: {0}")]
    Invalid(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Species {
    Lemur,
    GoldenMonkey,
    Chimpanzee,
}

impl Species {
    pub const ALL: [Species; 3] = [Species::Lemur, Species::GoldenMonkey, Species::Chimpanzee];

    pub fn as_str(&self) -> &'static str {
        match self {
            Species::Lemur => "lemur",
            Species::GoldenMonkey => "golden_monkey",
            Species::Chimpanzee => "chimpanzee",
        }
    }
}

impl fmt::Display for Species {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Species {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Species::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| format!("unknown species {s:?} (expected lemur, golden_monkey or chimpanzee)"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Individual {
    pub id: String,
    pub name: String,
    pub species: Species,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateEntry {
    pub embedding: Embedding,
    pub image_ref: String,
    /// Seconds since the Unix epoch.
    pub enrolled_at: u64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Template {
    pub entries: Vec<TemplateEntry>,
}

impl Template {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn embeddings(&self) -> impl Iterator<Item = &Embedding> {
        self.entries.iter().map(|e| &e.embedding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub individual: Individual,
    pub template: Template,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gallery {
    records: BTreeMap<String, Record>,
    embed_dim: Option<usize>,
}

impl Gallery {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn embed_dim(&self) -> Option<usize> {
        self.embed_dim
    }

    pub fn get(&self, id: &str) -> Option<&Record> {
        self.records.get(id)
    }

    /// Appends `(embedding, image_ref)` entries to the individual's template,
    /// creating the individual if needed. Entries whose image ref is already
    /// enrolled are skipped. Returns how many entries were added.
    pub fn enroll(
        &mut self,
        individual: Individual,
        entries: Vec<(Embedding, String)>,
        enrolled_at: u64,
    ) -> Result<usize, GalleryError> {
        if individual.id.is_empty() {
            return Err(GalleryError::Invalid("individual id must not be empty".into()));
        }
        if let Some(existing) = self.records.get(&individual.id) {
            if existing.individual.species != individual.species {
                return Err(GalleryError::SpeciesConflict {
                    id: individual.id,
                    existing: existing.individual.species,
                    requested: individual.species,
                });
            }
        }
        let dim = self.embed_dim.or_else(|| entries.first().map(|(e, _)| e.dim()));
        if let Some(expected) = dim {
            if let Some((e, _)) = entries.iter().find(|(e, _)| e.dim() != expected) {
                return Err(GalleryError::Dimension {
                    expected,
                    got: e.dim(),
                });
            }
        }
        if entries.is_empty() && !self.records.contains_key(&individual.id) {
            return Err(GalleryError::Invalid(format!(
                "cannot enroll {} without any embeddings",
                individual.id
            )));
        }
        self.embed_dim = dim;
        let record = self
            .records
            .entry(individual.id.clone())
            .or_insert_with(|| Record {
                individual,
                template: Template::default(),
            });
        let mut added = 0;
        for (embedding, image_ref) in entries {
            if record.template.entries.iter().any(|e| e.image_ref == image_ref) {
                continue;
            }
            record.template.entries.push(TemplateEntry {
                embedding,
                image_ref,
                enrolled_at,
            });
            added += 1;
        }
        Ok(added)
    }

    pub fn remove_individual(&mut self, id: &str) -> Result<Record, GalleryError> {
        let removed = self
            .records
            .remove(id)
            .ok_or_else(|| GalleryError::NotFound(id.to_string()))?;
        if self.records.is_empty() {
            self.embed_dim = None;
        }
        Ok(removed)
    }

    /// Individuals sorted by id, optionally restricted to one species.
    pub fn list_individuals(&self, species: Option<Species>) -> Vec<&Individual> {
        self.records
            .values()
            .map(|r| &r.individual)
            .filter(|i| species.is_none_or(|s| i.species == s))
            .collect()
    }

    /// `(id, template)` pairs for matching, sorted by id.
    pub fn templates(&self, species: Option<Species>) -> impl Iterator<Item = (&str, &Template)> {
        self.records
            .values()
            .filter(move |r| species.is_none_or(|s| r.individual.species == s))
            .map(|r| (r.individual.id.as_str(), &r.template))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GalleryError> {
        save_gallery(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GalleryError> {
        load_gallery(path)
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    image_ref: String,
    enrolled_at: u64,
    /// Index of the first `f32` of this embedding in the sidecar.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct ManifestIndividual {
    id: String,
    name: String,
    species: Species,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    gallery_format: u32,
    embed_dim: usize,
    generation: u64,
    embeddings_file: String,
    individuals: Vec<ManifestIndividual>,
}

fn sidecar_name(manifest: &Path, generation: u64) -> String {
    let stem = manifest
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("gallery");
    format!("{stem}.{generation}.emb")
}

fn read_manifest(path: &Path) -> Result<Manifest, GalleryError> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(GalleryError::Format(format!("{} is empty", path.display())));
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| GalleryError::Format(format!("{}: {e}", path.display())))?;
    if manifest.gallery_format != GALLERY_FORMAT {
        return Err(GalleryError::Format(format!(
            "unsupported gallery_format {} (expected {GALLERY_FORMAT})",
            manifest.gallery_format
        )));
    }
    Ok(manifest)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

/// Writes the manifest to `path` and embeddings to a sidecar next to it.
pub fn save_gallery(gallery: &Gallery, path: impl AsRef<Path>) -> Result<(), GalleryError> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let previous = read_manifest(path).ok();
    let generation = previous.as_ref().map_or(1, |m| m.generation + 1);
    let embeddings_file = sidecar_name(path, generation);

    let mut blob = Vec::new();
    let mut offset = 0u64;
    let mut individuals = Vec::with_capacity(gallery.len());
    for record in gallery.records.values() {
        let mut entries = Vec::with_capacity(record.template.len());
        for entry in &record.template.entries {
            for v in entry.embedding.as_slice() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(ManifestEntry {
                image_ref: entry.image_ref.clone(),
                enrolled_at: entry.enrolled_at,
                offset,
            });
            offset += entry.embedding.dim() as u64;
        }
        individuals.push(ManifestIndividual {
            id: record.individual.id.clone(),
            name: record.individual.name.clone(),
            species: record.individual.species,
            entries,
        });
    }
    let manifest = Manifest {
        gallery_format: GALLERY_FORMAT,
        embed_dim: gallery.embed_dim.unwrap_or(0),
        generation,
        embeddings_file: embeddings_file.clone(),
        individuals,
    };
    write_atomic(&dir.join(&embeddings_file), &blob)?;
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| GalleryError::Format(e.to_string()))?;
    write_atomic(path, &json)?;
    if let Some(old) = previous {
        if old.embeddings_file != embeddings_file {
            // readers holding the old manifest may still be loading it; a
            // missing stale file is not an error
            let _ = std::fs::remove_file(dir.join(old.embeddings_file));
        }
    }
    Ok(())
}

pub fn load_gallery(path: impl AsRef<Path>) -> Result<Gallery, GalleryError> {
    let path = path.as_ref();
    let manifest = read_manifest(path)?;
    if manifest.embeddings_file.contains(['/', '\\']) {
        return Err(GalleryError::Format("embeddings_file must be a bare file name".into()));
    }
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let blob = std::fs::read(dir.join(&manifest.embeddings_file))?;
    if blob.len() % 4 != 0 {
        return Err(GalleryError::Format("embedding sidecar length is not a multiple of 4".into()));
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let dim = manifest.embed_dim;
    let mut gallery = Gallery::new();
    for ind in manifest.individuals {
        if ind.entries.is_empty() {
            return Err(GalleryError::Format(format!("individual {} has no entries", ind.id)));
        }
        let mut entries = Vec::with_capacity(ind.entries.len());
        for e in ind.entries {
            let start = usize::try_from(e.offset).map_err(|_| GalleryError::Format("offset overflow".into()))?;
            let slice = start
                .checked_add(dim)
                .and_then(|end| values.get(start..end))
                .ok_or_else(|| GalleryError::Format(format!("entry {} points past the sidecar", e.image_ref)))?;
            entries.push(TemplateEntry {
                embedding: Embedding::from_unit(slice.to_vec())?,
                image_ref: e.image_ref,
                enrolled_at: e.enrolled_at,
            });
        }
        let individual = Individual {
            id: ind.id,
            name: ind.name,
            species: ind.species,
        };
        if gallery.records.contains_key(&individual.id) {
            return Err(GalleryError::Format(format!("duplicate individual {}", individual.id)));
        }
        gallery.records.insert(
            individual.id.clone(),
            Record {
                individual,
                template: Template { entries },
            },
        );
        gallery.embed_dim = Some(dim);
    }
    Ok(gallery)
}
