//! Line-delimited JSON manifest: one [`ImageRecord`] per line.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use super::{BoundingBox, DatasetManifest, Domain, ImageRecord, Split};
use crate::error::{Error, Result};

const FIELDS: [&str; 7] = [
    "subject_id",
    "domain",
    "template_id",
    "media_id",
    "image_path",
    "box",
    "split",
];

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_record(path, i + 1, &line)?);
    }
    let base = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    DatasetManifest::new(records, base)
}

/// Writes one JSON record per line through a temp file and rename.
pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    for r in manifest.records() {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let tmp = path.with_extension("jsonl.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn parse_record(path: &Path, line: usize, text: &str) -> Result<ImageRecord> {
    let err = |field: &str, message: String| Error::ManifestParse {
        path: path.to_path_buf(),
        line,
        field: field.to_string(),
        message,
    };
    let obj: Map<String, Value> = match serde_json::from_str(text) {
        Ok(Value::Object(m)) => m,
        Ok(_) => return Err(err("<record>", "expected a JSON object".into())),
        Err(e) => return Err(err("<record>", e.to_string())),
    };
    if let Some(unknown) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(err(unknown, "unknown field".into()));
    }
    fn field<T: DeserializeOwned>(
        obj: &Map<String, Value>,
        name: &str,
        err: &dyn Fn(&str, String) -> Error,
    ) -> Result<T> {
        let v = obj
            .get(name)
            .ok_or_else(|| err(name, "missing field".into()))?;
        serde_json::from_value(v.clone()).map_err(|e| err(name, e.to_string()))
    }
    let subject_id: String = field(&obj, "subject_id", &err)?;
    let domain: Domain = field(&obj, "domain", &err)?;
    let template_id: String = field(&obj, "template_id", &err)?;
    let media_id: String = field(&obj, "media_id", &err)?;
    let image_path: String = field(&obj, "image_path", &err)?;
    let bbox: Option<BoundingBox> = field(&obj, "box", &err)?;
    let split: Split = field(&obj, "split", &err)?;
    if template_id.is_empty() {
        return Err(err("template_id", "must be non-empty".into()));
    }
    Ok(ImageRecord {
        subject_id,
        domain,
        template_id,
        media_id,
        image_path,
        bbox,
        split,
    })
}
