//! Patch-aligned random masking.
//!
//! The image is tiled by mask units of `s×s` pixels, each covering
//! `(s / vit_patch)²` ViT patches. A fixed number of whole units is drawn
//! uniformly without replacement.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Result};
use crate::rng::rng_from;

/// Geometry shared by every mask of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskGeometry {
    /// ViT patches per side.
    pub grid: usize,
    pub patch_px: usize,
    pub unit_px: usize,
}

impl MaskGeometry {
    pub fn new(grid: usize, patch_px: usize, unit_px: usize) -> Result<Self> {
        if grid == 0 || patch_px == 0 || unit_px == 0 {
            return Err(invalid_config("mask geometry sizes must be positive"));
        }
        if !unit_px.is_multiple_of(patch_px) {
            return Err(invalid_config(format!(
                "mask unit {unit_px}px is not a multiple of the {patch_px}px patch"
            )));
        }
        if !(grid * patch_px).is_multiple_of(unit_px) {
            return Err(invalid_config(format!(
                "{}px image is not divisible into {unit_px}px mask units",
                grid * patch_px
            )));
        }
        Ok(Self { grid, patch_px, unit_px })
    }

    /// ViT patches per mask-unit side.
    pub fn unit_side(&self) -> usize {
        self.unit_px / self.patch_px
    }

    /// Patches per unit, `u`.
    pub fn patches_per_unit(&self) -> usize {
        self.unit_side() * self.unit_side()
    }

    /// Units per image, `U = G / u`.
    pub fn num_units(&self) -> usize {
        self.num_patches() / self.patches_per_unit()
    }

    /// Patches per image, `G`.
    pub fn num_patches(&self) -> usize {
        self.grid * self.grid
    }

    /// Units drawn for a target ratio: `⌈r·G/u⌉`.
    pub fn units_for_ratio(&self, ratio: f64) -> usize {
        let exact = ratio * self.num_patches() as f64 / self.patches_per_unit() as f64;
        // guard against 0.3*196/4 style products landing a hair above an integer
        let rounded = exact.round();
        let n = if (exact - rounded).abs() < 1e-9 { rounded } else { exact.ceil() };
        (n as usize).min(self.num_units())
    }

    /// Patch indices covered by unit `unit`, ascending.
    pub fn unit_patches(&self, unit: usize) -> Vec<usize> {
        let side = self.unit_side();
        let units_per_row = self.grid / side;
        let (ur, uc) = (unit / units_per_row, unit % units_per_row);
        let mut out = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                out.push((ur * side + r) * self.grid + uc * side + c);
            }
        }
        out
    }

    pub fn unit_of(&self, patch: usize) -> usize {
        let side = self.unit_side();
        let (r, c) = (patch / self.grid, patch % self.grid);
        (r / side) * (self.grid / side) + c / side
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    geometry: MaskGeometry,
    target_ratio: f64,
    /// Sorted ascending, unique.
    masked: Vec<usize>,
}

impl MaskSpec {
    pub fn empty(geometry: MaskGeometry) -> Self {
        Self { geometry, target_ratio: 0.0, masked: Vec::new() }
    }

    /// Builds a mask from explicit patch indices, checking range and
    /// uniqueness. Alignment to units is not required here.
    pub fn from_indices(geometry: MaskGeometry, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        let g = geometry.num_patches();
        if let Some(&bad) = indices.iter().find(|&&i| i >= g) {
            return Err(invalid_input(format!("mask index {bad} out of range for {g} patches")));
        }
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid_input("duplicate mask index"));
        }
        let ratio = indices.len() as f64 / g as f64;
        Ok(Self { geometry, target_ratio: ratio, masked: indices })
    }

    pub fn geometry(&self) -> MaskGeometry {
        self.geometry
    }

    pub fn target_ratio(&self) -> f64 {
        self.target_ratio
    }

    pub fn masked_indices(&self) -> &[usize] {
        &self.masked
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn achieved_ratio(&self) -> f64 {
        self.masked.len() as f64 / self.geometry.num_patches() as f64
    }

    pub fn contains(&self, patch: usize) -> bool {
        self.masked.binary_search(&patch).is_ok()
    }

    /// Per-patch boolean membership.
    pub fn to_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.geometry.num_patches()];
        for &i in &self.masked {
            flags[i] = true;
        }
        flags
    }

    /// True when every masked patch's unit-mates are masked too.
    pub fn is_unit_aligned(&self) -> bool {
        self.masked.iter().all(|&p| {
            self.geometry
                .unit_patches(self.geometry.unit_of(p))
                .iter()
                .all(|q| self.contains(*q))
        })
    }
}

/// Draws `⌈r·G/u⌉` whole units uniformly without replacement.
pub fn sample_mask(geometry: MaskGeometry, ratio: f64, seed: u64) -> Result<MaskSpec> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(invalid_config(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let n_units = geometry.units_for_ratio(ratio);
    let mut rng = rng_from(seed);
    let chosen = index::sample(&mut rng, geometry.num_units(), n_units);
    let mut masked: Vec<usize> = chosen.iter().flat_map(|u| geometry.unit_patches(u)).collect();
    masked.sort_unstable();
    Ok(MaskSpec { geometry, target_ratio: ratio, masked })
}

/// Replaces the rows of `tokens` (`G × dim`, patch tokens only) named by
/// `spec` with `msk_token`.
pub fn apply_mask(tokens: &mut [f64], dim: usize, spec: &MaskSpec, msk_token: &[f64]) -> Result<()> {
    let g = tokens.len() / dim.max(1);
    if tokens.len() != g * dim || msk_token.len() != dim {
        return Err(invalid_input("token buffer / mask token dimension mismatch"));
    }
    for &i in spec.masked_indices() {
        if i >= g {
            return Err(invalid_input(format!("mask index {i} out of range for {g} tokens")));
        }
        tokens[i * dim..(i + 1) * dim].copy_from_slice(msk_token);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_and_full_ratio() {
        let g = MaskGeometry::new(8, 4, 8).unwrap();
        assert!(sample_mask(g, 0.0, 1).unwrap().is_empty());
        assert_eq!(sample_mask(g, 1.0, 1).unwrap().len(), 64);
    }

    #[test]
    fn vit_b_geometry_count() {
        // 224px image, 16px patches, 32px units, ratio 0.3
        let g = MaskGeometry::new(14, 16, 32).unwrap();
        assert_eq!(g.patches_per_unit(), 4);
        assert_eq!(g.num_units(), 49);
        assert_eq!(g.units_for_ratio(0.3), 15);
        let m = sample_mask(g, 0.3, 42).unwrap();
        assert_eq!(m.len(), 60);
        assert!((m.achieved_ratio() - 60.0 / 196.0).abs() < 1e-12);
        assert!(m.is_unit_aligned());
    }

    #[test]
    fn rejects_non_divisible_geometry() {
        assert!(MaskGeometry::new(8, 4, 6).is_err());
        assert!(MaskGeometry::new(6, 4, 16).is_err());
        let g = MaskGeometry::new(8, 4, 8).unwrap();
        assert!(sample_mask(g, 1.5, 0).is_err());
    }

    #[test]
    fn apply_mask_changes_exactly_the_masked_rows() {
        let g = MaskGeometry::new(4, 4, 8).unwrap();
        let dim = 3;
        let input: Vec<f64> = (0..16 * dim).map(|i| i as f64).collect();
        let msk = vec![-1.0; dim];

        let mut out = input.clone();
        apply_mask(&mut out, dim, &MaskSpec::empty(g), &msk).unwrap();
        assert_eq!(out, input);

        let one_unit = MaskSpec::from_indices(g, g.unit_patches(3)).unwrap();
        let mut out = input.clone();
        apply_mask(&mut out, dim, &one_unit, &msk).unwrap();
        let changed = (0..16).filter(|r| out[r * dim..(r + 1) * dim] != input[r * dim..(r + 1) * dim]).count();
        assert_eq!(changed, g.patches_per_unit());

        let full = sample_mask(g, 1.0, 0).unwrap();
        let mut out = input;
        apply_mask(&mut out, dim, &full, &msk).unwrap();
        assert!(out.iter().all(|&v| v == -1.0));
    }

    #[test]
    fn same_seed_same_mask() {
        let g = MaskGeometry::new(8, 4, 8).unwrap();
        assert_eq!(sample_mask(g, 0.4, 9).unwrap(), sample_mask(g, 0.4, 9).unwrap());
        assert!(MaskSpec::from_indices(g, vec![64]).is_err());
        assert!(MaskSpec::from_indices(g, vec![1, 1]).is_err());
    }
}
