//! Per-media feature extraction and the on-disk feature store.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Domain, ImageCache};
use crate::error::{Error, Result};
use crate::model::{BodyTransformer, Region};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub media_id: String,
    pub subject_id: String,
    pub domain: Domain,
    pub template_id: String,
    pub vector: Vec<f64>,
}

/// Feature vectors keyed by media id, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureStore {
    records: Vec<FeatureRecord>,
    index: BTreeMap<String, usize>,
}

impl FeatureStore {
    pub fn new(records: Vec<FeatureRecord>) -> Result<Self> {
        let mut index = BTreeMap::new();
        let dim = records.first().map(|r| r.vector.len());
        for (i, r) in records.iter().enumerate() {
            if Some(r.vector.len()) != dim {
                return Err(Error::DimensionMismatch {
                    expected: format!("feature dim {}", dim.unwrap_or(0)),
                    actual: format!("{} for media `{}`", r.vector.len(), r.media_id),
                });
            }
            if index.insert(r.media_id.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate media_id: {}",
                    r.media_id
                )));
            }
        }
        Ok(Self { records, index })
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.vector.len())
    }

    pub fn get(&self, media_id: &str) -> Option<&FeatureRecord> {
        self.index.get(media_id).map(|&i| &self.records[i])
    }

    pub fn vectors(&self) -> BTreeMap<String, Vec<f64>> {
        self.records
            .iter()
            .map(|r| (r.media_id.clone(), r.vector.clone()))
            .collect()
    }

    /// Writes one JSON record per line.
    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("jsonl.tmp");
        let mut w = BufWriter::new(File::create(&tmp).map_err(|e| Error::io(&tmp, e))?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(&tmp, e))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line).map_err(|e| Error::ManifestParse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    field: "<feature>".into(),
                    message: e.to_string(),
                })?,
            );
        }
        Self::new(records)
    }

    /// Writes little-endian f32 rows to `path` and the per-row metadata to
    /// `<path>.json`. Values are rounded to f32.
    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::with_capacity(self.len() * self.dim() * 4);
        for r in &self.records {
            for &v in &r.vector {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let sidecar = BinarySidecar {
            rows: self.len(),
            dim: self.dim(),
            dtype: "f32-le".into(),
            items: self
                .records
                .iter()
                .map(|r| BinaryItem {
                    media_id: r.media_id.clone(),
                    subject_id: r.subject_id.clone(),
                    domain: r.domain,
                    template_id: r.template_id.clone(),
                })
                .collect(),
        };
        let tmp = path.with_extension("bin.tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load_binary(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let sidecar: BinarySidecar =
            serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if sidecar.dtype != "f32-le" || bytes.len() != sidecar.rows * sidecar.dim * 4 {
            return Err(Error::Validation(format!(
                "{}: expected {}x{} f32-le values, found {} bytes",
                path.display(),
                sidecar.rows,
                sidecar.dim,
                bytes.len()
            )));
        }
        if sidecar.items.len() != sidecar.rows {
            return Err(Error::Validation(format!(
                "{}: row count mismatch",
                side.display()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let records = sidecar
            .items
            .into_iter()
            .enumerate()
            .map(|(i, it)| FeatureRecord {
                media_id: it.media_id,
                subject_id: it.subject_id,
                domain: it.domain,
                template_id: it.template_id,
                vector: values[i * sidecar.dim..(i + 1) * sidecar.dim].to_vec(),
            })
            .collect();
        Self::new(records)
    }

    /// Loads the JSONL or binary variant depending on the file extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => Self::load_binary(path),
            _ => Self::load_jsonl(path),
        }
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Debug, Serialize, Deserialize)]
struct BinarySidecar {
    rows: usize,
    dim: usize,
    dtype: String,
    items: Vec<BinaryItem>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BinaryItem {
    media_id: String,
    subject_id: String,
    domain: Domain,
    template_id: String,
}

/// Global and region token outputs for one media item.
#[derive(Debug, Clone, PartialEq)]
pub struct MediaBundle {
    pub global: Vec<f64>,
    pub face: Vec<f64>,
    pub torso: Vec<f64>,
    pub lower: Vec<f64>,
    pub fused: Vec<f64>,
}

impl MediaBundle {
    pub fn region(&self, r: Region) -> &[f64] {
        match r {
            Region::Face => &self.face,
            Region::Torso => &self.torso,
            Region::Lower => &self.lower,
        }
    }
}

fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2()?)
}

/// Runs the model over every record of `manifest`, `batch_size` images at a
/// time, and keeps all token outputs.
pub fn extract_bundles(
    model: &BodyTransformer,
    manifest: &DatasetManifest,
    batch_size: usize,
) -> Result<BTreeMap<String, MediaBundle>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let cfg = model.config();
    let mut out = BTreeMap::new();
    let all: Vec<usize> = (0..manifest.len()).collect();
    for chunk in all.chunks(batch_size) {
        // decoded images are not reused here, so keep at most one batch alive
        let mut cache = ImageCache::new(cfg.image_height, cfg.image_width, cfg.patch_size);
        let x = cache.batch_tensor(manifest, chunk, model.dtype(), model.device())?;
        let f = model.forward(&x)?;
        let (g, fa, t, l, z) = (
            rows(&f.z_global)?,
            rows(&f.z_face)?,
            rows(&f.z_torso)?,
            rows(&f.z_lower)?,
            rows(&f.z_final)?,
        );
        for (k, &i) in chunk.iter().enumerate() {
            out.insert(
                manifest.records()[i].media_id.clone(),
                MediaBundle {
                    global: g[k].clone(),
                    face: fa[k].clone(),
                    torso: t[k].clone(),
                    lower: l[k].clone(),
                    fused: z[k].clone(),
                },
            );
        }
    }
    Ok(out)
}

/// Feature store of `z_final` for every record of `manifest`.
pub fn extract_features(
    model: &BodyTransformer,
    manifest: &DatasetManifest,
    batch_size: usize,
) -> Result<FeatureStore> {
    let bundles = extract_bundles(model, manifest, batch_size)?;
    store_from(manifest, |media| Ok(bundles[media].fused.clone()))
}

/// Builds a store over `manifest`'s records with vectors from `vector`.
pub fn store_from(
    manifest: &DatasetManifest,
    mut vector: impl FnMut(&str) -> Result<Vec<f64>>,
) -> Result<FeatureStore> {
    let records = manifest
        .records()
        .iter()
        .map(|r| {
            Ok(FeatureRecord {
                media_id: r.media_id.clone(),
                subject_id: r.subject_id.clone(),
                domain: r.domain,
                template_id: r.template_id.clone(),
                vector: vector(&r.media_id)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureStore::new(records)
}
