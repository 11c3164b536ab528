use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Query-by-gallery cosine similarities with row and column labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn cols(&self) -> usize {
        self.col_labels.len()
    }

    /// Comma separated values with a header row of column labels.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query");
        for c in &self.col_labels {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (label, row) in self.row_labels.iter().zip(&self.values) {
            out.push_str(label);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Entry `(i, j)` is `q_i · g_j / (|q_i| |g_j|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity_matrix(
    queries: &[(String, Vec<f64>)],
    gallery: &[(String, Vec<f64>)],
) -> Result<SimilarityMatrix> {
    let dim = queries
        .first()
        .or(gallery.first())
        .map_or(0, |(_, v)| v.len());
    let norms = |set: &[(String, Vec<f64>)]| -> Result<Vec<f64>> {
        set.iter()
            .map(|(label, v)| {
                if v.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: format!("feature dim {dim}"),
                        actual: format!("{} for `{label}`", v.len()),
                    });
                }
                let n = norm(v);
                if n == 0.0 || !n.is_finite() {
                    return Err(Error::invalid(format!("feature of `{label}` has norm {n}")));
                }
                Ok(n)
            })
            .collect()
    };
    let qn = norms(queries)?;
    let gn = norms(gallery)?;
    let values = queries
        .iter()
        .zip(&qn)
        .map(|((_, q), &a)| {
            gallery
                .iter()
                .zip(&gn)
                .map(|((_, g), &b)| {
                    let dot: f64 = q.iter().zip(g).map(|(x, y)| x * y).sum();
                    (dot / (a * b)).clamp(-1.0, 1.0)
                })
                .collect()
        })
        .collect();
    Ok(SimilarityMatrix {
        row_labels: queries.iter().map(|(l, _)| l.clone()).collect(),
        col_labels: gallery.iter().map(|(l, _)| l.clone()).collect(),
        values,
    })
}

/// Gallery columns of row `i` by descending similarity; equal scores are
/// ordered by column label, then column index.
pub fn ranked_columns(sim: &SimilarityMatrix, i: usize) -> Vec<usize> {
    let row = &sim.values[i];
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| sim.col_labels[a].cmp(&sim.col_labels[b]))
            .then(a.cmp(&b))
    });
    order
}

fn check_labels(sim: &SimilarityMatrix, queries: &[String], gallery: &[String]) -> Result<()> {
    if queries.len() != sim.rows() || gallery.len() != sim.cols() {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{} subject labels", sim.rows(), sim.cols()),
            actual: format!("{}x{}", queries.len(), gallery.len()),
        });
    }
    if sim.values.iter().any(|r| r.len() != sim.cols()) {
        return Err(Error::invalid("ragged similarity matrix"));
    }
    Ok(())
}

/// 1-based rank of the first gallery column whose subject matches each
/// query.
pub fn match_ranks(
    sim: &SimilarityMatrix,
    query_subjects: &[String],
    gallery_subjects: &[String],
) -> Result<Vec<usize>> {
    check_labels(sim, query_subjects, gallery_subjects)?;
    (0..sim.rows())
        .map(|i| {
            ranked_columns(sim, i)
                .iter()
                .position(|&j| gallery_subjects[j] == query_subjects[i])
                .map(|p| p + 1)
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "query `{}` (subject `{}`) has no gallery entry",
                        sim.row_labels[i], query_subjects[i]
                    ))
                })
        })
        .collect()
}

/// `cmc[k-1]` is the fraction of queries matched within the top `k`, for
/// `k` up to `min(k_max, G)`.
pub fn cmc(
    sim: &SimilarityMatrix,
    query_subjects: &[String],
    gallery_subjects: &[String],
    k_max: usize,
) -> Result<Vec<f64>> {
    let ranks = match_ranks(sim, query_subjects, gallery_subjects)?;
    if ranks.is_empty() {
        return Err(Error::invalid("no queries"));
    }
    let k_max = k_max.min(sim.cols());
    let mut hits = vec![0usize; k_max];
    for r in ranks {
        if r <= k_max {
            hits[r - 1] += 1;
        }
    }
    let n = query_subjects.len() as f64;
    let mut acc = 0;
    Ok(hits
        .into_iter()
        .map(|h| {
            acc += h;
            acc as f64 / n
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map: f64,
    pub scored_queries: usize,
    /// Queries left out because nothing relevant remained after exclusions.
    pub skipped_queries: usize,
}

/// Mean over queries of average precision. `excluded[i][j]` removes gallery
/// column `j` from query `i`'s ranking.
pub fn mean_average_precision(
    sim: &SimilarityMatrix,
    query_subjects: &[String],
    gallery_subjects: &[String],
    excluded: Option<&[Vec<bool>]>,
) -> Result<MapResult> {
    check_labels(sim, query_subjects, gallery_subjects)?;
    if let Some(ex) = excluded {
        if ex.len() != sim.rows() || ex.iter().any(|r| r.len() != sim.cols()) {
            return Err(Error::invalid(
                "exclusion mask shape differs from the similarity matrix",
            ));
        }
    }
    let mut total = 0.0;
    let mut scored = 0;
    let mut skipped = 0;
    for i in 0..sim.rows() {
        let mut hits = 0usize;
        let mut pos = 0usize;
        let mut ap = 0.0;
        for j in ranked_columns(sim, i) {
            if excluded.is_some_and(|ex| ex[i][j]) {
                continue;
            }
            pos += 1;
            if gallery_subjects[j] == query_subjects[i] {
                hits += 1;
                ap += hits as f64 / pos as f64;
            }
        }
        if hits == 0 {
            log::warn!("query `{}` has no relevant gallery item", sim.row_labels[i]);
            skipped += 1;
            continue;
        }
        total += ap / hits as f64;
        scored += 1;
    }
    if scored == 0 {
        return Err(Error::invalid("no query has a relevant gallery item"));
    }
    Ok(MapResult {
        map: total / scored as f64,
        scored_queries: scored,
        skipped_queries: skipped,
    })
}
