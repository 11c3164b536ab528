//! Dataset model: spectral domains, media records, manifests, synthetic
//! generation and ingest of externally detected body boxes.

mod geometry;
mod images;
mod ingest;
mod manifest;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use geometry::{assign_labels_by_face_overlap, iou, BoundingBox, DEFAULT_FACE_IOU_THRESHOLD};
pub use images::{load_patches, patchify, ImageCache, PatchImage};
pub use ingest::{ingest_detections, DetectionFrame, FaceDetection, IngestSummary};
pub use manifest::{load_manifest, save_manifest};
pub(crate) use synth::mix_seed;
pub use synth::{
    generate_synthetic_dataset, render_subject_image, ChannelPolicy, DegradationSet,
    DomainDegradation, SubjectAppearance, SyntheticConfig,
};

/// Spectral band a media item was captured in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Domain {
    Vis,
    Swir,
    Mwir,
    Lwir,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::Vis, Domain::Swir, Domain::Mwir, Domain::Lwir];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Vis => "VIS",
            Domain::Swir => "SWIR",
            Domain::Mwir => "MWIR",
            Domain::Lwir => "LWIR",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "VIS" => Ok(Domain::Vis),
            "SWIR" => Ok(Domain::Swir),
            "MWIR" => Ok(Domain::Mwir),
            "LWIR" => Ok(Domain::Lwir),
            other => Err(Error::invalid(format!(
                "unknown domain `{other}` (expected VIS, SWIR, MWIR or LWIR)"
            ))),
        }
    }
}

/// Parses a comma separated domain list such as `VIS,SWIR`.
pub fn parse_domain_list(s: &str) -> Result<Vec<Domain>> {
    let mut out = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let d: Domain = part.parse()?;
        if out.contains(&d) {
            return Err(Error::invalid(format!("domain {d} listed twice")));
        }
        out.push(d);
    }
    if out.is_empty() {
        return Err(Error::invalid("empty domain list"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One media item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub subject_id: String,
    pub domain: Domain,
    pub template_id: String,
    pub media_id: String,
    pub image_path: String,
    #[serde(rename = "box")]
    pub bbox: Option<BoundingBox>,
    pub split: Split,
}

/// An ordered collection of records plus derived indices.
///
/// Relative image paths resolve against `base_dir`, which is the directory
/// the manifest was loaded from (or written to).
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    records: Vec<ImageRecord>,
    domains_present: BTreeSet<Domain>,
    subject_index: BTreeMap<String, Vec<usize>>,
    base_dir: PathBuf,
}

impl PartialEq for DatasetManifest {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
    }
}

impl DatasetManifest {
    /// Builds a manifest, enforcing record-level invariants.
    pub fn new(records: Vec<ImageRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        let mut duplicates = BTreeSet::new();
        for (i, r) in records.iter().enumerate() {
            if r.template_id.is_empty() {
                return Err(Error::Validation(format!(
                    "record {i} (media `{}`) has an empty template_id",
                    r.media_id
                )));
            }
            if r.subject_id.is_empty() {
                return Err(Error::Validation(format!(
                    "record {i} (media `{}`) has an empty subject_id",
                    r.media_id
                )));
            }
            if seen.insert(r.media_id.as_str(), i).is_some() {
                duplicates.insert(r.media_id.clone());
            }
        }
        if !duplicates.is_empty() {
            let list: Vec<_> = duplicates.into_iter().collect();
            return Err(Error::Validation(format!(
                "duplicate media_id: {}",
                list.join(", ")
            )));
        }
        let mut domains_present = BTreeSet::new();
        let mut subject_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            domains_present.insert(r.domain);
            subject_index
                .entry(r.subject_id.clone())
                .or_default()
                .push(i);
        }
        Ok(Self {
            records,
            domains_present,
            subject_index,
            base_dir: base_dir.into(),
        })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn domains_present(&self) -> &BTreeSet<Domain> {
        &self.domains_present
    }

    pub fn subject_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.subject_index
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn set_base_dir(&mut self, dir: impl Into<PathBuf>) {
        self.base_dir = dir.into();
    }

    /// Subject ids in lexicographic order.
    pub fn subjects(&self) -> impl Iterator<Item = &str> {
        self.subject_index.keys().map(String::as_str)
    }

    /// Resolves a record's image path, failing if the file does not exist.
    pub fn image_path(&self, idx: usize) -> Result<PathBuf> {
        let rec = self
            .records
            .get(idx)
            .ok_or_else(|| Error::invalid(format!("record index {idx} out of range")))?;
        let p = Path::new(&rec.image_path);
        let full = if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        };
        if !full.is_file() {
            return Err(Error::io(
                &full,
                std::io::Error::new(std::io::ErrorKind::NotFound, "image file not found"),
            ));
        }
        Ok(full)
    }

    /// New manifest holding the records that satisfy `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(&ImageRecord) -> bool) -> Self {
        let records = self.records.iter().filter(|r| keep(r)).cloned().collect();
        // Filtering cannot break uniqueness, so construction is infallible here.
        Self::new(records, self.base_dir.clone()).expect("subset of a valid manifest")
    }

    pub fn split(&self, split: Split) -> Self {
        self.filtered(|r| r.split == split)
    }

    /// Domains for which `subject` has at least one record.
    pub fn subject_domains(&self, subject: &str) -> BTreeSet<Domain> {
        self.subject_index
            .get(subject)
            .map(|idx| idx.iter().map(|&i| self.records[i].domain).collect())
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(media: &str, subject: &str, domain: Domain) -> ImageRecord {
        ImageRecord {
            subject_id: subject.into(),
            domain,
            template_id: format!("{subject}_{domain}"),
            media_id: media.into(),
            image_path: format!("{media}.png"),
            bbox: None,
            split: Split::Train,
        }
    }

    #[test]
    fn domain_round_trips_through_strings() {
        for d in Domain::ALL {
            assert_eq!(d.as_str().parse::<Domain>().unwrap(), d);
        }
        assert!("UV".parse::<Domain>().is_err());
        assert_eq!(
            parse_domain_list("VIS,swir").unwrap(),
            vec![Domain::Vis, Domain::Swir]
        );
        assert!(parse_domain_list("VIS,VIS").is_err());
        assert!(parse_domain_list("").is_err());
    }

    #[test]
    fn duplicate_media_ids_are_listed() {
        let err = DatasetManifest::new(
            vec![
                rec("a", "s1", Domain::Vis),
                rec("b", "s1", Domain::Swir),
                rec("a", "s2", Domain::Vis),
            ],
            ".",
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("duplicate media_id: a"), "{msg}");
    }

    #[test]
    fn empty_template_id_is_rejected() {
        let mut r = rec("a", "s1", Domain::Vis);
        r.template_id.clear();
        assert!(DatasetManifest::new(vec![r], ".").is_err());
    }

    #[test]
    fn subject_index_tracks_records() {
        let m = DatasetManifest::new(
            vec![
                rec("a", "s2", Domain::Vis),
                rec("b", "s1", Domain::Lwir),
                rec("c", "s2", Domain::Mwir),
            ],
            ".",
        )
        .unwrap();
        assert_eq!(m.subject_index()["s2"], vec![0, 2]);
        assert_eq!(m.subjects().collect::<Vec<_>>(), vec!["s1", "s2"]);
        assert_eq!(
            m.domains_present().iter().copied().collect::<Vec<_>>(),
            vec![Domain::Vis, Domain::Mwir, Domain::Lwir]
        );
        assert_eq!(
            m.subject_domains("s2"),
            [Domain::Vis, Domain::Mwir].into_iter().collect()
        );
    }

    #[test]
    fn missing_image_is_reported_lazily() {
        let m = DatasetManifest::new(vec![rec("a", "s1", Domain::Vis)], "/nonexistent").unwrap();
        assert!(m.image_path(0).is_err());
        assert!(m.image_path(3).is_err());
    }
}
