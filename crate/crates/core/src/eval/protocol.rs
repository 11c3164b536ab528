use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::features::{store_from, FeatureStore, MediaBundle};
use super::metrics::{
    cmc, cosine_similarity_matrix, mean_average_precision, MapResult, SimilarityMatrix,
};
use super::templates::{build_templates, Grouping};
use crate::data::{DatasetManifest, Domain, Split};
use crate::error::{Error, Result};
use crate::model::{BodyTransformer, Region};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateMode {
    /// Match averaged templates.
    Template,
    /// Match single media, with exclusions.
    PerImage,
}

/// Gallery entries removed from a query's ranking in per-image mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exclusion {
    /// The query media itself.
    SameMedia,
    /// Media sharing the query's template (same capture session).
    SameTemplate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub gallery: Domain,
    pub queries: Vec<Domain>,
    pub ranks: Vec<usize>,
    pub mode: TemplateMode,
    pub gallery_grouping: Grouping,
    pub query_grouping: Grouping,
    pub exclusions: Vec<Exclusion>,
    pub map: bool,
    /// Keep similarity matrices in the report.
    pub keep_similarity: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            gallery: Domain::Vis,
            queries: vec![Domain::Swir, Domain::Mwir, Domain::Lwir],
            ranks: vec![1, 5, 10],
            mode: TemplateMode::Template,
            gallery_grouping: Grouping::SubjectDomain,
            query_grouping: Grouping::TemplateId,
            exclusions: vec![Exclusion::SameMedia, Exclusion::SameTemplate],
            map: true,
            keep_similarity: false,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries.is_empty() {
            return Err(Error::config("no query domains"));
        }
        if self.queries.contains(&self.gallery) {
            return Err(Error::config(format!(
                "gallery domain {} is also a query domain",
                self.gallery
            )));
        }
        let distinct: BTreeSet<_> = self.queries.iter().collect();
        if distinct.len() != self.queries.len() {
            return Err(Error::config("query domain listed twice"));
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return Err(Error::config(
                "ranks must be a non-empty list of positive integers",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub query_domain: Domain,
    pub gallery_size: usize,
    pub queries: usize,
    /// Queries whose subject has no gallery entry; not scored.
    pub queries_without_gallery_match: usize,
    /// `(k, accuracy)` for every configured rank.
    pub rank_k: Vec<(usize, f64)>,
    /// `cmc[k-1]` for `k = 1..=G`.
    pub cmc: Vec<f64>,
    pub map: Option<MapResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<SimilarityMatrix>,
}

impl DomainReport {
    pub fn rank1(&self) -> f64 {
        self.cmc[0]
    }

    pub fn rank(&self, k: usize) -> Option<f64> {
        self.rank_k.iter().find(|(r, _)| *r == k).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: ProtocolConfig,
    pub domains: Vec<DomainReport>,
    /// Free-form snapshot of the configuration that produced the features.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn domain(&self, d: Domain) -> Option<&DomainReport> {
        self.domains.iter().find(|r| r.query_domain == d)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Writes `sim_<DOMAIN>.csv` for every domain that kept its matrix.
    pub fn save_similarity_csv(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        let mut written = Vec::new();
        for d in &self.domains {
            if let Some(s) = &d.similarity {
                let p = dir.join(format!("sim_{}.csv", d.query_domain));
                write_atomic(&p, s.to_csv().as_bytes())?;
                written.push(p);
            }
        }
        Ok(written)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Item {
    label: String,
    subject: String,
    media: BTreeSet<String>,
    templates: BTreeSet<String>,
    vector: Vec<f64>,
}

fn items(
    vectors: &BTreeMap<String, Vec<f64>>,
    manifest: &DatasetManifest,
    mode: TemplateMode,
    grouping: Grouping,
) -> Result<Vec<Item>> {
    match mode {
        TemplateMode::Template => Ok(build_templates(vectors, manifest, grouping)?
            .into_iter()
            .map(|t| {
                let templates = manifest
                    .records()
                    .iter()
                    .filter(|r| t.media_ids.binary_search(&r.media_id).is_ok())
                    .map(|r| r.template_id.clone())
                    .collect();
                Item {
                    label: t.template_id,
                    subject: t.subject_id,
                    media: t.media_ids.into_iter().collect(),
                    templates,
                    vector: t.feature,
                }
            })
            .collect()),
        TemplateMode::PerImage => {
            let mut out: Vec<Item> = manifest
                .records()
                .iter()
                .map(|r| {
                    let vector = vectors.get(&r.media_id).cloned().ok_or_else(|| {
                        Error::invalid(format!("no feature for media `{}`", r.media_id))
                    })?;
                    Ok(Item {
                        label: r.media_id.clone(),
                        subject: r.subject_id.clone(),
                        media: [r.media_id.clone()].into(),
                        templates: [r.template_id.clone()].into(),
                        vector,
                    })
                })
                .collect::<Result<_>>()?;
            out.sort_by(|a, b| a.label.cmp(&b.label));
            Ok(out)
        }
    }
}

fn domain_report(
    vectors: &BTreeMap<String, Vec<f64>>,
    test: &DatasetManifest,
    cfg: &ProtocolConfig,
    query_domain: Domain,
) -> Result<DomainReport> {
    let gallery_m = test.filtered(|r| r.domain == cfg.gallery);
    let query_m = test.filtered(|r| r.domain == query_domain);
    if gallery_m.is_empty() {
        return Err(Error::MissingDomain(format!(
            "{} (gallery, test split)",
            cfg.gallery
        )));
    }
    if query_m.is_empty() {
        return Err(Error::MissingDomain(format!(
            "{query_domain} (query, test split)"
        )));
    }
    let gallery = items(vectors, &gallery_m, cfg.mode, cfg.gallery_grouping)?;
    let all_queries = items(vectors, &query_m, cfg.mode, cfg.query_grouping)?;
    let gallery_subjects: BTreeSet<&str> = gallery.iter().map(|g| g.subject.as_str()).collect();
    let (queries, unmatched): (Vec<&Item>, Vec<&Item>) = all_queries
        .iter()
        .partition(|q| gallery_subjects.contains(q.subject.as_str()));
    for q in &unmatched {
        log::warn!("query `{}` has no gallery subject; skipped", q.label);
    }
    if queries.is_empty() {
        return Err(Error::invalid(format!(
            "no {query_domain} query has a gallery match"
        )));
    }
    let q: Vec<(String, Vec<f64>)> = queries
        .iter()
        .map(|i| (i.label.clone(), i.vector.clone()))
        .collect();
    let g: Vec<(String, Vec<f64>)> = gallery
        .iter()
        .map(|i| (i.label.clone(), i.vector.clone()))
        .collect();
    let sim = cosine_similarity_matrix(&q, &g)?;
    let qs: Vec<String> = queries.iter().map(|i| i.subject.clone()).collect();
    let gs: Vec<String> = gallery.iter().map(|i| i.subject.clone()).collect();
    let curve = cmc(&sim, &qs, &gs, gallery.len())?;
    let rank_k = cfg
        .ranks
        .iter()
        .map(|&k| (k, curve[k.min(curve.len()) - 1]))
        .collect();
    let map = if cfg.map {
        let mask: Option<Vec<Vec<bool>>> = (cfg.mode == TemplateMode::PerImage).then(|| {
            queries
                .iter()
                .map(|qi| {
                    gallery
                        .iter()
                        .map(|gi| {
                            cfg.exclusions.iter().any(|e| match e {
                                Exclusion::SameMedia => !qi.media.is_disjoint(&gi.media),
                                Exclusion::SameTemplate => !qi.templates.is_disjoint(&gi.templates),
                            })
                        })
                        .collect()
                })
                .collect()
        });
        Some(mean_average_precision(&sim, &qs, &gs, mask.as_deref())?)
    } else {
        None
    };
    Ok(DomainReport {
        query_domain,
        gallery_size: gallery.len(),
        queries: queries.len(),
        queries_without_gallery_match: unmatched.len(),
        rank_k,
        cmc: curve,
        map,
        similarity: cfg.keep_similarity.then_some(sim),
    })
}

/// 1:N identification on the test split: gallery templates from the gallery
/// domain, one report per query domain.
pub fn run_identification_protocol(
    features: &FeatureStore,
    manifest: &DatasetManifest,
    cfg: &ProtocolConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let test = manifest.split(Split::Test);
    if test.is_empty() {
        return Err(Error::invalid("manifest has no test split"));
    }
    let vectors = features.vectors();
    let domains = cfg
        .queries
        .iter()
        .map(|&d| domain_report(&vectors, &test, cfg, d))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        protocol: cfg.clone(),
        domains,
        config: serde_json::Value::Null,
    })
}

/// Rank-1 for every ordered (gallery, query) pair of domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMatrix {
    pub domains: Vec<Domain>,
    /// `rank1[g][q]`; `None` on the diagonal.
    pub rank1: Vec<Vec<Option<f64>>>,
}

impl DomainMatrix {
    pub fn get(&self, gallery: Domain, query: Domain) -> Option<f64> {
        let g = self.domains.iter().position(|&d| d == gallery)?;
        let q = self.domains.iter().position(|&d| d == query)?;
        self.rank1[g][q]
    }

    /// Rows are gallery domains, columns query domains; the diagonal is empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gallery\\query");
        for d in &self.domains {
            out.push_str(&format!(",{d}"));
        }
        out.push('\n');
        for (g, row) in self.domains.iter().zip(&self.rank1) {
            out.push_str(g.as_str());
            for v in row {
                match v {
                    Some(v) => out.push_str(&format!(",{v}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn gallery_query_matrix(
    features: &FeatureStore,
    manifest: &DatasetManifest,
    base: &ProtocolConfig,
) -> Result<DomainMatrix> {
    let test = manifest.split(Split::Test);
    for d in Domain::ALL {
        if !test.domains_present().contains(&d) {
            return Err(Error::MissingDomain(format!("{d} (test split)")));
        }
    }
    let vectors = features.vectors();
    let mut rank1 = vec![vec![None; 4]; 4];
    for g in Domain::ALL {
        for q in Domain::ALL {
            if g == q {
                continue;
            }
            let cfg = ProtocolConfig {
                gallery: g,
                queries: vec![q],
                map: false,
                keep_similarity: false,
                ..base.clone()
            };
            rank1[g.index()][q.index()] = Some(domain_report(&vectors, &test, &cfg, q)?.rank1());
        }
    }
    Ok(DomainMatrix {
        domains: Domain::ALL.to_vec(),
        rank1,
    })
}

/// Region subsets of the standard ablation: all three regions, then each
/// region left out in turn.
pub fn default_ablation_subsets() -> Vec<Vec<Region>> {
    vec![
        vec![Region::Face, Region::Torso, Region::Lower],
        vec![Region::Torso, Region::Lower],
        vec![Region::Face, Region::Lower],
        vec![Region::Face, Region::Torso],
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Empty for the global-only row.
    pub regions: Vec<Region>,
    pub rank1: Vec<(Domain, f64)>,
}

impl AblationRow {
    pub fn label(&self) -> String {
        let mut s = String::from("global");
        for r in &self.regions {
            s.push_str(" + ");
            s.push_str(r.as_str());
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self, domains: &[Domain]) -> String {
        let mut out = String::from("features");
        for d in domains {
            out.push_str(&format!(",{d}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.label());
            for d in domains {
                let v = row.rank1.iter().find(|(x, _)| x == d).map(|(_, v)| *v);
                out.push_str(&v.map_or(String::from(","), |v| format!(",{v}")));
            }
            out.push('\n');
        }
        out
    }
}

/// Re-fuses `z_final` from region subsets of precomputed token outputs and
/// reruns the protocol for each. An empty subset means global only, with a
/// zero local feature, and needs `allow_global_only`.
pub fn ablation_from_bundles(
    model: &BodyTransformer,
    bundles: &BTreeMap<String, MediaBundle>,
    manifest: &DatasetManifest,
    cfg: &ProtocolConfig,
    subsets: &[Vec<Region>],
    allow_global_only: bool,
) -> Result<AblationTable> {
    use candle_core::{DType, Device, Tensor};
    let test = manifest.split(Split::Test);
    let mut rows = Vec::with_capacity(subsets.len());
    for subset in subsets {
        let distinct: BTreeSet<_> = subset.iter().collect();
        if distinct.len() != subset.len() {
            return Err(Error::config(format!("region listed twice in {subset:?}")));
        }
        if subset.is_empty() && !allow_global_only {
            return Err(Error::config(
                "empty region subset without a global-only row configured",
            ));
        }
        let store = store_from(&test, |media| {
            let b = bundles
                .get(media)
                .ok_or_else(|| Error::invalid(format!("no token outputs for media `{media}`")))?;
            let d = b.global.len();
            let to_t = |v: &[f64]| -> Result<Tensor> {
                Ok(Tensor::from_slice(v, (1, d), &Device::Cpu)?.to_dtype(model.dtype())?)
            };
            let local = if subset.is_empty() {
                Tensor::zeros((1, d), model.dtype(), &Device::Cpu)?
            } else {
                let parts = subset
                    .iter()
                    .map(|&r| to_t(b.region(r)))
                    .collect::<Result<Vec<_>>>()?;
                crate::model::average_regions(&parts.iter().collect::<Vec<_>>())?
            };
            let fused = model.fuse(&to_t(&b.global)?, &local)?;
            Ok(fused.squeeze(0)?.to_dtype(DType::F64)?.to_vec1()?)
        })?;
        let report = run_identification_protocol(&store, &test, cfg)?;
        rows.push(AblationRow {
            regions: subset.clone(),
            rank1: report
                .domains
                .iter()
                .map(|d| (d.query_domain, d.rank1()))
                .collect(),
        });
    }
    Ok(AblationTable { rows })
}

/// Extracts token outputs for the test split and runs
/// [`ablation_from_bundles`].
pub fn local_feature_ablation(
    model: &BodyTransformer,
    manifest: &DatasetManifest,
    cfg: &ProtocolConfig,
    subsets: &[Vec<Region>],
    allow_global_only: bool,
    batch_size: usize,
) -> Result<AblationTable> {
    let test = manifest.split(Split::Test);
    let bundles = super::features::extract_bundles(model, &test, batch_size)?;
    ablation_from_bundles(model, &bundles, &test, cfg, subsets, allow_global_only)
}

/// Extracts `z_final` for the test split and runs the protocol.
pub fn evaluate_model(
    model: &BodyTransformer,
    manifest: &DatasetManifest,
    cfg: &ProtocolConfig,
    batch_size: usize,
) -> Result<(FeatureStore, EvalReport)> {
    let test = manifest.split(Split::Test);
    let store = super::features::extract_features(model, &test, batch_size)?;
    let report = run_identification_protocol(&store, &test, cfg)?;
    Ok((store, report))
}
