use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Domain};
use crate::error::{Error, Result};

/// How media are grouped into templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    /// One template per manifest `template_id`.
    TemplateId,
    /// All media of a subject within one domain.
    SubjectDomain,
    /// All media of a subject.
    Subject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub template_id: String,
    pub subject_id: String,
    pub domains: BTreeSet<Domain>,
    /// Contributing media, sorted.
    pub media_ids: Vec<String>,
    pub feature: Vec<f64>,
}

impl Template {
    pub fn media_count(&self) -> usize {
        self.media_ids.len()
    }
}

/// Elementwise mean of equally sized vectors.
pub fn mean_vector<'a>(vectors: impl IntoIterator<Item = &'a [f64]>) -> Result<Vec<f64>> {
    let mut it = vectors.into_iter();
    let first = it
        .next()
        .ok_or_else(|| Error::invalid("mean of an empty group"))?;
    let mut sum = first.to_vec();
    let mut n = 1usize;
    for v in it {
        if v.len() != sum.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{}", sum.len()),
                actual: format!("{}", v.len()),
            });
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        n += 1;
    }
    Ok(sum.into_iter().map(|s| s / n as f64).collect())
}

/// Averages the features of every record in `manifest` into templates,
/// returned sorted by template id.
pub fn build_templates(
    features: &BTreeMap<String, Vec<f64>>,
    manifest: &DatasetManifest,
    grouping: Grouping,
) -> Result<Vec<Template>> {
    let mut groups: BTreeMap<String, (String, BTreeSet<Domain>, Vec<String>)> = BTreeMap::new();
    for r in manifest.records() {
        let key = match grouping {
            Grouping::TemplateId => r.template_id.clone(),
            Grouping::SubjectDomain => format!("{}_{}", r.subject_id, r.domain),
            Grouping::Subject => r.subject_id.clone(),
        };
        let entry = groups
            .entry(key.clone())
            .or_insert_with(|| (r.subject_id.clone(), BTreeSet::new(), Vec::new()));
        if entry.0 != r.subject_id {
            return Err(Error::Validation(format!(
                "template `{key}` mixes subjects `{}` and `{}`",
                entry.0, r.subject_id
            )));
        }
        entry.1.insert(r.domain);
        entry.2.push(r.media_id.clone());
    }
    groups
        .into_iter()
        .map(|(template_id, (subject_id, domains, mut media_ids))| {
            media_ids.sort();
            let vectors = media_ids
                .iter()
                .map(|m| {
                    features
                        .get(m)
                        .map(Vec::as_slice)
                        .ok_or_else(|| Error::invalid(format!("no feature for media `{m}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            let feature = mean_vector(vectors)?;
            Ok(Template {
                template_id,
                subject_id,
                domains,
                media_ids,
                feature,
            })
        })
        .collect()
}
