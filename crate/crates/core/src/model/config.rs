use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Body region read out by one of the three local tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Face,
    Torso,
    Lower,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Face, Region::Torso, Region::Lower];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Region::Face => "face",
            Region::Torso => "torso",
            Region::Lower => "lower",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "face" => Ok(Region::Face),
            "torso" => Ok(Region::Torso),
            "lower" | "lower-body" | "lower_body" => Ok(Region::Lower),
            other => Err(Error::invalid(format!("unknown region `{other}`"))),
        }
    }
}

/// Half-open range of patch-grid rows `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowRange {
    pub start: usize,
    pub end: usize,
}

impl RowRange {
    pub const fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionRows {
    pub face: RowRange,
    pub torso: RowRange,
    pub lower: RowRange,
}

impl RegionRows {
    pub fn get(&self, r: Region) -> RowRange {
        match r {
            Region::Face => self.face,
            Region::Torso => self.torso,
            Region::Lower => self.lower,
        }
    }

    /// Face, torso and lower body as 1/6, 5/12 and 5/12 of the grid rows,
    /// which is rows 0-3 / 4-13 / 14-23 on a 24-row grid.
    pub fn proportional(grid_rows: usize) -> Self {
        let face_end = (grid_rows / 6).max(1);
        let torso_end = (face_end + (grid_rows - face_end) / 2).max(face_end + 1);
        Self {
            face: RowRange::new(0, face_end),
            torso: RowRange::new(face_end, torso_end),
            lower: RowRange::new(torso_end, grid_rows),
        }
    }
}

/// Set of patch indices a region's local token may attend to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    pub region: Region,
    pub patches: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub fusion_hidden: usize,
    pub n_classes: usize,
    pub region_rows: RegionRows,
    /// Lets patch tokens attend to the global token. Turning it off makes
    /// each local token a function of its own region's pixels only.
    pub patches_attend_global: bool,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 384,
            image_width: 128,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_dim: 3072,
            fusion_hidden: 1536,
            n_classes: 1,
            region_rows: RegionRows::proportional(24),
            patches_attend_global: true,
            layer_norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// Small configuration with proportional region bands for the given image.
    pub fn compact(
        image_height: usize,
        image_width: usize,
        patch_size: usize,
        embed_dim: usize,
        depth: usize,
        heads: usize,
        n_classes: usize,
    ) -> Self {
        Self {
            image_height,
            image_width,
            patch_size,
            embed_dim,
            depth,
            heads,
            mlp_dim: 2 * embed_dim,
            fusion_hidden: 2 * embed_dim,
            n_classes,
            region_rows: RegionRows::proportional(image_height / patch_size),
            patches_attend_global: true,
            layer_norm_eps: 1e-6,
        }
    }

    pub fn grid_rows(&self) -> usize {
        self.image_height / self.patch_size
    }

    pub fn grid_cols(&self) -> usize {
        self.image_width / self.patch_size
    }

    /// `N = H·W / P²`.
    pub fn n_patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    /// Global token, three local tokens and `N` patch tokens.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 4
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn fused_dim(&self) -> usize {
        2 * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || !self.image_height.is_multiple_of(p) || !self.image_width.is_multiple_of(p) {
            return Err(Error::config(format!(
                "image {}x{} not divisible by patch size {p}",
                self.image_height, self.image_width
            )));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::config("image dimensions must be positive"));
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_dim == 0 || self.fusion_hidden == 0 {
            return Err(Error::config(
                "depth, mlp_dim and fusion_hidden must be positive",
            ));
        }
        if self.n_classes == 0 {
            return Err(Error::config("n_classes must be positive"));
        }
        let rows = self.grid_rows();
        let mut covered = vec![false; rows];
        for r in Region::ALL {
            let range = self.region_rows.get(r);
            if range.start >= range.end || range.end > rows {
                return Err(Error::config(format!(
                    "region {r} rows {}..{} invalid for a {rows}-row grid",
                    range.start, range.end
                )));
            }
            if let Some(row) = (range.start..range.end).find(|&row| covered[row]) {
                return Err(Error::config(format!("region rows overlap at row {row}")));
            }
            covered[range.start..range.end].fill(true);
        }
        if let Some(row) = covered.iter().position(|c| !c) {
            return Err(Error::config(format!(
                "patch row {row} belongs to no region"
            )));
        }
        Ok(())
    }

    pub fn region_mask(&self, region: Region) -> RegionMask {
        let range = self.region_rows.get(region);
        let cols = self.grid_cols();
        RegionMask {
            region,
            patches: (range.start * cols..range.end * cols).collect(),
        }
    }

    /// Region owning patch `p`.
    pub fn patch_region(&self, p: usize) -> Region {
        let row = p / self.grid_cols();
        Region::ALL
            .into_iter()
            .find(|&r| {
                let range = self.region_rows.get(r);
                row >= range.start && row < range.end
            })
            .expect("validated regions cover every row")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.rank == 0 || self.rank >= embed_dim {
            return Err(Error::config(format!(
                "LoRA rank must lie in [1, {embed_dim}), got {}",
                self.rank
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::config("LoRA alpha must be finite"));
        }
        Ok(())
    }
}
