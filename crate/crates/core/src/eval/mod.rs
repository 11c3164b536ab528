//! Templates, cosine matching, CMC and mAP, the cross-spectral 1:N protocol,
//! the gallery-by-query domain matrix and local-feature ablations.

mod features;
mod metrics;
mod protocol;
mod templates;

pub use features::{
    extract_bundles, extract_features, store_from, FeatureRecord, FeatureStore, MediaBundle,
};
pub use metrics::{
    cmc, cosine_similarity_matrix, match_ranks, mean_average_precision, ranked_columns, MapResult,
    SimilarityMatrix,
};
pub(crate) use protocol::write_atomic;
pub use protocol::{
    ablation_from_bundles, default_ablation_subsets, evaluate_model, gallery_query_matrix,
    local_feature_ablation, run_identification_protocol, AblationRow, AblationTable, DomainMatrix,
    DomainReport, EvalReport, Exclusion, ProtocolConfig, TemplateMode,
};
pub use templates::{build_templates, mean_vector, Grouping, Template};
