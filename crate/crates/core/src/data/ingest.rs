//! Turns externally detected body boxes into labeled manifest records.
//!
//! Input is line-delimited JSON, one frame per line:
//!
//! ```json
//! {"media_id":"v01_f0007","image_path":"frames/v01_0007.png","domain":"MWIR",
//!  "template_id":"v01","split":"train",
//!  "body_boxes":[[10,20,60,200]],
//!  "faces":[{"box":[25,22,45,48],"subject_id":"s017"}]}
//! ```

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    assign_labels_by_face_overlap, BoundingBox, DatasetManifest, Domain, ImageRecord, Split,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceDetection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub subject_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFrame {
    pub media_id: String,
    pub image_path: String,
    pub domain: Domain,
    pub template_id: String,
    pub split: Split,
    pub body_boxes: Vec<BoundingBox>,
    #[serde(default)]
    pub faces: Vec<FaceDetection>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngestSummary {
    pub frames: usize,
    pub body_boxes: usize,
    pub labeled: usize,
    /// Boxes dropped for zero overlap or ambiguous overlap.
    pub dropped: usize,
}

/// Reads detection frames from `path` and labels every body box by face
/// overlap. Unlabeled boxes are dropped. Each kept box becomes one record
/// with media id `<frame media_id>#<box index>`.
pub fn ingest_detections(
    path: impl AsRef<Path>,
    threshold: f64,
) -> Result<(DatasetManifest, IngestSummary)> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut summary = IngestSummary::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let frame: DetectionFrame =
            serde_json::from_str(&line).map_err(|e| Error::ManifestParse {
                path: path.to_path_buf(),
                line: i + 1,
                field: "<frame>".into(),
                message: e.to_string(),
            })?;
        summary.frames += 1;
        summary.body_boxes += frame.body_boxes.len();
        let faces: Vec<(BoundingBox, String)> = frame
            .faces
            .iter()
            .map(|f| (f.bbox, f.subject_id.clone()))
            .collect();
        let labeled = assign_labels_by_face_overlap(&frame.body_boxes, &faces, threshold)?;
        for (k, (bbox, label)) in labeled.into_iter().enumerate() {
            let Some(subject_id) = label else {
                summary.dropped += 1;
                continue;
            };
            summary.labeled += 1;
            records.push(ImageRecord {
                subject_id,
                domain: frame.domain,
                template_id: frame.template_id.clone(),
                media_id: format!("{}#{k}", frame.media_id),
                image_path: frame.image_path.clone(),
                bbox: Some(bbox),
                split: frame.split,
            });
        }
    }
    let base = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    Ok((DatasetManifest::new(records, base)?, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_and_drops() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.jsonl");
        let lines = [
            r#"{"media_id":"f1","image_path":"a.png","domain":"VIS","template_id":"v1","split":"train","body_boxes":[[0,0,10,10],[50,50,60,60]],"faces":[{"box":[0,0,10,5],"subject_id":"alice"}]}"#,
            r#"{"media_id":"f2","image_path":"b.png","domain":"LWIR","template_id":"v2","split":"test","body_boxes":[[0,0,10,10]],"faces":[{"box":[0,0,10,8],"subject_id":"alice"},{"box":[0,2,10,10],"subject_id":"bob"}]}"#,
        ];
        fs::write(&path, lines.join("\n")).unwrap();
        let (m, s) = ingest_detections(&path, 0.75).unwrap();
        assert_eq!(
            s,
            IngestSummary {
                frames: 2,
                body_boxes: 3,
                labeled: 1,
                dropped: 2
            }
        );
        assert_eq!(m.len(), 1);
        let r = &m.records()[0];
        assert_eq!(r.subject_id, "alice");
        assert_eq!(r.media_id, "f1#0");
        assert!(r.bbox.is_some());
    }

    #[test]
    fn malformed_frame_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.jsonl");
        fs::write(&path, "{\"media_id\":\"f1\"}\n").unwrap();
        let msg = ingest_detections(&path, 0.75).unwrap_err().to_string();
        assert!(msg.contains("line 1"), "{msg}");
    }
}
