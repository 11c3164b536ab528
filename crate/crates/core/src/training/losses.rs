use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};

use super::mining::{AnchorMining, MiningRecord};
use crate::data::Domain;
use crate::error::{Error, Result};

/// Added under the square root so the distance stays differentiable at zero.
const DIST_EPS: f64 = 1e-12;

/// Mean cross-entropy of `(N, C)` logits against class indices.
pub fn identity_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, c) = logits.dims2().map_err(|_| Error::DimensionMismatch {
        expected: "(batch, classes) logits".into(),
        actual: format!("{:?}", logits.dims()),
    })?;
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: format!("{n} labels"),
            actual: format!("{}", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let log_probs = shifted.broadcast_sub(&lse)?;
    let idx: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let idx = Tensor::from_vec(idx, (n, 1), logits.device())?;
    let picked = log_probs.gather(&idx, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Euclidean distances between all rows, accumulated in f64.
pub fn pairwise_distances(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            out[i][j] = d;
            out[j][i] = d;
        }
    }
    out
}

/// Hardest positive (farthest same-label sample) and hardest negative
/// (nearest other-label sample) for every anchor. Ties go to the lowest
/// index.
pub fn mine_batch_hard(
    dist: &[Vec<f64>],
    labels: &[usize],
    domains: &[Domain],
) -> Result<MiningRecord> {
    let n = labels.len();
    if dist.len() != n || domains.len() != n {
        return Err(Error::DimensionMismatch {
            expected: format!("{n} distances, labels and domains"),
            actual: format!("{} distances, {} domains", dist.len(), domains.len()),
        });
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::config(format!(
            "identity {l} has a single sample in the batch; batch-hard mining needs at least two"
        )));
    }
    if counts.len() < 2 {
        return Err(Error::config(
            "batch-hard mining needs at least two identities per batch",
        ));
    }
    let mut anchors = Vec::with_capacity(n);
    for a in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                if pos.is_none_or(|p| dist[a][j] > dist[a][p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|q| dist[a][j] < dist[a][q]) {
                neg = Some(j);
            }
        }
        let (p, q) = (pos.expect("checked above"), neg.expect("checked above"));
        anchors.push(AnchorMining {
            anchor: a,
            anchor_domain: domains[a],
            positive: p,
            positive_domain: domains[p],
            positive_distance: dist[a][p],
            negative: q,
            negative_domain: domains[q],
            negative_distance: dist[a][q],
        });
    }
    Ok(MiningRecord { anchors })
}

fn row_distances(x: &Tensor, other: &Tensor) -> Result<Tensor> {
    Ok(((x - other)?.sqr()?.sum(D::Minus1)? + DIST_EPS)?.sqrt()?)
}

/// Batch-hard triplet loss `mean_a max(0, Δ + d(a, p) - d(a, n))` over
/// `(N, d)` features, plus the per-anchor mining outcome.
pub fn batch_hard_triplet_loss(
    features: &Tensor,
    labels: &[usize],
    domains: &[Domain],
    margin: f64,
) -> Result<(Tensor, MiningRecord)> {
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::config(format!(
            "triplet margin must be finite and >= 0, got {margin}"
        )));
    }
    let (n, _) = features.dims2().map_err(|_| Error::DimensionMismatch {
        expected: "(batch, dim) features".into(),
        actual: format!("{:?}", features.dims()),
    })?;
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: format!("{n} labels"),
            actual: format!("{}", labels.len()),
        });
    }
    let rows: Vec<Vec<f64>> = features.detach().to_dtype(DType::F64)?.to_vec2()?;
    let record = mine_batch_hard(&pairwise_distances(&rows), labels, domains)?;
    let pos: Vec<u32> = record.anchors.iter().map(|a| a.positive as u32).collect();
    let neg: Vec<u32> = record.anchors.iter().map(|a| a.negative as u32).collect();
    let pos = Tensor::new(pos.as_slice(), features.device())?;
    let neg = Tensor::new(neg.as_slice(), features.device())?;
    let dp = row_distances(features, &features.index_select(&pos, 0)?)?;
    let dn = row_distances(features, &features.index_select(&neg, 0)?)?;
    let loss = ((dp - dn)? + margin)?.relu()?.mean_all()?;
    Ok((loss, record))
}

/// `id + λ·tri`.
pub fn combined_loss(id_loss: &Tensor, triplet_loss: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config(format!(
            "loss weight must be finite and >= 0, got {lambda}"
        )));
    }
    Ok((id_loss + (triplet_loss * lambda)?)?)
}
