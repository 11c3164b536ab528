use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::error::{Error, Result};

/// Selection made for one anchor by batch-hard mining. Indices are batch
/// positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorMining {
    pub anchor: usize,
    pub anchor_domain: Domain,
    pub positive: usize,
    pub positive_domain: Domain,
    pub positive_distance: f64,
    pub negative: usize,
    pub negative_domain: Domain,
    pub negative_distance: f64,
}

impl AnchorMining {
    pub fn positive_cross_domain(&self) -> bool {
        self.positive_domain != self.anchor_domain
    }

    pub fn negative_same_domain(&self) -> bool {
        self.negative_domain == self.anchor_domain
    }
}

/// Mining outcome for one batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningRecord {
    pub anchors: Vec<AnchorMining>,
}

/// Share of anchors whose hard positive came from another domain and whose
/// hard negative came from the same domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningStats {
    pub anchors: usize,
    pub hard_pos_cross_domain: usize,
    pub hard_neg_same_domain: usize,
    pub pct_hard_pos_cross_domain: f64,
    pub pct_hard_neg_same_domain: f64,
}

impl MiningStats {
    pub fn from_counts(anchors: usize, pos_cross: usize, neg_same: usize) -> Result<Self> {
        if anchors == 0 {
            return Err(Error::invalid("mining statistics need at least one anchor"));
        }
        if pos_cross > anchors || neg_same > anchors {
            return Err(Error::invalid("mining counts exceed the anchor count"));
        }
        Ok(Self {
            anchors,
            hard_pos_cross_domain: pos_cross,
            hard_neg_same_domain: neg_same,
            pct_hard_pos_cross_domain: 100.0 * pos_cross as f64 / anchors as f64,
            pct_hard_neg_same_domain: 100.0 * neg_same as f64 / anchors as f64,
        })
    }
}

pub fn mining_statistics(records: &[MiningRecord]) -> Result<MiningStats> {
    let mut anchors = 0;
    let mut pos_cross = 0;
    let mut neg_same = 0;
    for a in records.iter().flat_map(|r| &r.anchors) {
        anchors += 1;
        pos_cross += a.positive_cross_domain() as usize;
        neg_same += a.negative_same_domain() as usize;
    }
    MiningStats::from_counts(anchors, pos_cross, neg_same)
}
