//! Grouping regions: greedy circular masks placed on successive peaks.

use serde::{Deserialize, Serialize};

use crate::attn::{weighted_centroid, AttentionMap, Cell, Coord};
use crate::error::{Error, Result};

/// Disk of radius `radius` around `center`; cell `(i, j)` is a member iff
/// `(i - c_h)^2 + (j - c_w)^2 <= r^2` on integer offsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircularMask {
    pub center: Cell,
    pub radius: f64,
}

impl CircularMask {
    pub fn new(center: Cell, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Validation(format!(
                "mask radius must be positive, got {radius}"
            )));
        }
        Ok(Self { center, radius })
    }

    /// Whether an arbitrary (possibly out-of-bounds) position lies in the disk.
    pub fn contains_offset(&self, dr: isize, dc: isize) -> bool {
        ((dr * dr + dc * dc) as f64) <= self.radius * self.radius
    }

    pub fn contains(&self, cell: Cell) -> bool {
        let dr = cell.row as isize - self.center.row as isize;
        let dc = cell.col as isize - self.center.col as isize;
        self.contains_offset(dr, dc)
    }

    /// Disk offsets `(dr, dc)` in row-major order, independent of map bounds.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let reach = self.radius.floor() as isize;
        let mut out = Vec::new();
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                if self.contains_offset(dr, dc) {
                    out.push((dr, dc));
                }
            }
        }
        out
    }

    /// Each disk slot mapped to its in-bounds cell, `None` where clipped.
    pub fn slots(&self, height: usize, width: usize) -> Vec<Option<Cell>> {
        self.offsets()
            .into_iter()
            .map(|(dr, dc)| {
                let r = self.center.row as isize + dr;
                let c = self.center.col as isize + dc;
                (r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width)
                    .then(|| Cell::new(r as usize, c as usize))
            })
            .collect()
    }

    /// In-bounds members, row-major.
    pub fn members(&self, height: usize, width: usize) -> Vec<Cell> {
        self.slots(height, width).into_iter().flatten().collect()
    }
}

/// Cells of one map under one mask, with their weighted centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupingRegion {
    pub mask: CircularMask,
    /// In-bounds members with their values, row-major.
    pub cells: Vec<(Cell, f64)>,
    /// Full-disk value vector in offset order; clipped slots are zero.
    pub disk: Vec<f64>,
    /// `None` only when every member value is zero.
    pub centroid: Option<Coord>,
}

impl GroupingRegion {
    /// Reads the mask's members off `map`.
    pub fn from_mask(map: &AttentionMap, mask: CircularMask) -> Self {
        let slots = mask.slots(map.height(), map.width());
        let mut cells = Vec::new();
        let mut disk = Vec::with_capacity(slots.len());
        for slot in slots {
            match slot {
                Some(cell) => {
                    let v = map.get(cell);
                    cells.push((cell, v));
                    disk.push(v);
                }
                None => disk.push(0.0),
            }
        }
        let centroid = weighted_centroid(cells.iter().copied()).ok();
        Self {
            mask,
            cells,
            disk,
            centroid,
        }
    }

    /// Number of in-bounds activations in the region.
    pub fn count(&self) -> usize {
        self.cells.len()
    }

    pub fn mass(&self) -> f64 {
        self.cells.iter().map(|(_, v)| v).sum()
    }

    pub fn centroid(&self) -> Result<Coord> {
        self.centroid.ok_or_else(|| {
            Error::ZeroMass(format!(
                "region centred at ({}, {}) has zero mass",
                self.mask.center.row, self.mask.center.col
            ))
        })
    }
}

/// Region count and radius for one search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub count: usize,
    pub radius: f64,
}

impl RegionConfig {
    pub fn new(count: usize, radius: f64) -> Result<Self> {
        let cfg = Self { count, radius };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Validation("region count must be >= 1".into()));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Validation(format!(
                "region radius must be positive, got {}",
                self.radius
            )));
        }
        Ok(())
    }
}

/// Greedy region search: take the largest cell not covered by any earlier
/// mask, centre a disk of radius `r` on it, repeat up to `count` times.
///
/// Covered cells are excluded from the peak search but keep their values, so
/// a later disk can still read them. Stops early once every uncovered cell is
/// zero; an all-zero map yields no regions.
pub fn identify_regions(map: &AttentionMap, cfg: &RegionConfig) -> Result<Vec<GroupingRegion>> {
    cfg.validate()?;
    let (h, w) = (map.height(), map.width());
    let mut covered = vec![false; h * w];
    let mut regions = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let mut peak: Option<(usize, f64)> = None;
        for (i, &v) in map.values().iter().enumerate() {
            if covered[i] || v <= 0.0 {
                continue;
            }
            if peak.is_none_or(|(_, best)| v > best) {
                peak = Some((i, v));
            }
        }
        let Some((index, _)) = peak else { break };
        let mask = CircularMask::new(map.cell_of(index), cfg.radius)?;
        for cell in mask.members(h, w) {
            covered[cell.row * w + cell.col] = true;
        }
        regions.push(GroupingRegion::from_mask(map, mask));
    }
    Ok(regions)
}

/// Linear radius ramp over the optimisation window:
/// `r_start + (r_end - r_start) * step / (total - 1)`.
pub fn radius_schedule(
    step_index: usize,
    total_opt_steps: usize,
    r_start: f64,
    r_end: f64,
) -> Result<f64> {
    if total_opt_steps == 0 {
        return Err(Error::Validation("total_opt_steps must be >= 1".into()));
    }
    if step_index >= total_opt_steps {
        return Err(Error::Validation(format!(
            "step {step_index} outside schedule of {total_opt_steps} steps"
        )));
    }
    if !(r_start > 0.0 && r_end > 0.0) {
        return Err(Error::Validation("radii must be positive".into()));
    }
    if total_opt_steps == 1 {
        return Ok(r_start);
    }
    Ok(r_start + (r_end - r_start) * step_index as f64 / (total_opt_steps - 1) as f64)
}

/// A radius that is either fixed or ramps linearly over the optimisation window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Radius {
    Fixed(f64),
    Linear { start: f64, end: f64 },
}

/// Region count plus a radius rule; resolves to a [`RegionConfig`] per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionRule {
    pub count: usize,
    pub radius: Radius,
}

impl RegionRule {
    pub fn fixed(count: usize, radius: f64) -> Self {
        Self {
            count,
            radius: Radius::Fixed(radius),
        }
    }

    pub fn linear(count: usize, start: f64, end: f64) -> Self {
        Self {
            count,
            radius: Radius::Linear { start, end },
        }
    }

    /// Radius at `step` of a `window`-step optimisation; steps past the window
    /// hold the final radius.
    pub fn resolve(&self, step: usize, window: usize) -> Result<RegionConfig> {
        let radius = match self.radius {
            Radius::Fixed(r) => r,
            Radius::Linear { start, end } => {
                let window = window.max(1);
                radius_schedule(step.min(window - 1), window, start, end)?
            }
        };
        RegionConfig::new(self.count, radius)
    }
}

/// Region settings for each token class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionRules {
    pub object: RegionRule,
    pub animal: RegionRule,
    pub attribute: RegionRule,
}

impl Default for RegionRules {
    /// Objects: 3 regions, r = 5. Animals: 2 regions, r ramping 2 to 8.
    /// Attributes: 3 regions, r = 6.
    fn default() -> Self {
        Self {
            object: RegionRule::fixed(3, 5.0),
            animal: RegionRule::linear(2, 2.0, 8.0),
            attribute: RegionRule::fixed(3, 6.0),
        }
    }
}

impl RegionRules {
    pub fn resolve(&self, step: usize, window: usize) -> Result<RegionConfigs> {
        Ok(RegionConfigs {
            object: self.object.resolve(step, window)?,
            animal: self.animal.resolve(step, window)?,
            attribute: self.attribute.resolve(step, window)?,
        })
    }
}

/// Resolved region settings for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionConfigs {
    pub object: RegionConfig,
    pub animal: RegionConfig,
    pub attribute: RegionConfig,
}

impl Default for RegionConfigs {
    fn default() -> Self {
        RegionRules::default()
            .resolve(0, 1)
            .expect("default rules are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bump(h: usize, w: usize, centers: &[(f64, f64)], sigma: f64) -> AttentionMap {
        AttentionMap::from_fn("a", h, w, |r, c| {
            centers
                .iter()
                .map(|&(ch, cw)| {
                    (-((r as f64 - ch).powi(2) + (c as f64 - cw).powi(2)) / (2.0 * sigma * sigma))
                        .exp()
                })
                .sum()
        })
        .unwrap()
    }

    #[test]
    fn single_peak() {
        let map = bump(16, 16, &[(8.0, 8.0)], 2.0);
        let regions = identify_regions(&map, &RegionConfig::new(1, 5.0).unwrap()).unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].mask.center, Cell::new(8, 8));
        let c = regions[0].centroid().unwrap();
        assert!((c.h - 8.0).abs() < 1e-12 && (c.w - 8.0).abs() < 1e-12);
    }

    #[test]
    fn two_equal_bumps_take_row_major_first() {
        let map = bump(16, 16, &[(2.0, 2.0), (13.0, 13.0)], 1.5);
        let regions = identify_regions(&map, &RegionConfig::new(2, 3.0).unwrap()).unwrap();
        let centers: Vec<Cell> = regions.iter().map(|r| r.mask.center).collect();
        assert_eq!(centers, vec![Cell::new(2, 2), Cell::new(13, 13)]);
    }

    #[test]
    fn all_zero_map_has_no_regions() {
        let map = AttentionMap::new("a", 4, 4, vec![0.0; 16]).unwrap();
        assert!(identify_regions(&map, &RegionConfig::new(3, 1.0).unwrap())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn stops_when_uncovered_cells_are_zero() {
        let mut vals = vec![0.0; 25];
        vals[12] = 1.0;
        let map = AttentionMap::new("a", 5, 5, vals).unwrap();
        let regions = identify_regions(&map, &RegionConfig::new(3, 1.0).unwrap()).unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].count(), 5);
    }

    #[test]
    fn clipping_at_corner() {
        let mut vals = vec![0.1; 16];
        vals[0] = 1.0;
        let map = AttentionMap::new("a", 4, 4, vals).unwrap();
        let regions = identify_regions(&map, &RegionConfig::new(1, 1.0).unwrap()).unwrap();
        // disk of radius 1 has 5 slots, 3 in bounds at the corner
        assert_eq!(regions[0].count(), 3);
        assert_eq!(regions[0].disk.len(), 5);
        assert_eq!(regions[0].disk.iter().filter(|v| **v == 0.0).count(), 2);
    }

    #[test]
    fn disk_membership_is_integer_exact() {
        let mask = CircularMask::new(Cell::new(5, 5), 1.5).unwrap();
        assert_eq!(mask.offsets().len(), 9);
        let mask = CircularMask::new(Cell::new(5, 5), 2.0).unwrap();
        assert_eq!(mask.offsets().len(), 13);
        assert!(mask.contains(Cell::new(3, 5)));
        assert!(!mask.contains(Cell::new(3, 4)));
    }

    #[test]
    fn invalid_config() {
        let map = bump(4, 4, &[(1.0, 1.0)], 1.0);
        assert!(identify_regions(
            &map,
            &RegionConfig {
                count: 0,
                radius: 1.0
            }
        )
        .is_err());
        assert!(identify_regions(
            &map,
            &RegionConfig {
                count: 1,
                radius: 0.0
            }
        )
        .is_err());
    }

    #[test]
    fn radius_schedule_values() {
        assert_eq!(radius_schedule(0, 25, 2.0, 8.0).unwrap(), 2.0);
        assert_eq!(radius_schedule(24, 25, 2.0, 8.0).unwrap(), 8.0);
        assert_eq!(radius_schedule(12, 25, 2.0, 8.0).unwrap(), 5.0);
        assert_eq!(radius_schedule(0, 1, 2.0, 8.0).unwrap(), 2.0);
        assert!(radius_schedule(25, 25, 2.0, 8.0).is_err());
        assert!(radius_schedule(0, 0, 2.0, 8.0).is_err());
    }

    #[test]
    fn rule_holds_final_radius_after_window() {
        let rule = RegionRule::linear(2, 2.0, 8.0);
        assert_eq!(rule.resolve(40, 25).unwrap().radius, 8.0);
        assert_eq!(
            RegionRule::fixed(3, 5.0).resolve(40, 25).unwrap().radius,
            5.0
        );
    }

    #[test]
    fn radius_rule_json_forms() {
        let fixed: RegionRule = serde_json::from_str(r#"{"count": 3, "radius": 5}"#).unwrap();
        assert_eq!(fixed, RegionRule::fixed(3, 5.0));
        let lin: RegionRule =
            serde_json::from_str(r#"{"count": 2, "radius": {"start": 2, "end": 8}}"#).unwrap();
        assert_eq!(lin, RegionRule::linear(2, 2.0, 8.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_map() -> impl Strategy<Value = AttentionMap> {
            (2usize..9, 2usize..9).prop_flat_map(|(h, w)| {
                proptest::collection::vec(0.0f64..1.0, h * w)
                    .prop_map(move |v| AttentionMap::new("a", h, w, v).unwrap())
            })
        }

        proptest! {
            #[test]
            fn later_centres_avoid_earlier_masks(map in arb_map(), count in 1usize..5, radius in 0.5f64..3.0) {
                let regions = identify_regions(&map, &RegionConfig::new(count, radius).unwrap()).unwrap();
                for (i, later) in regions.iter().enumerate() {
                    for earlier in &regions[..i] {
                        prop_assert!(!earlier.mask.contains(later.mask.center));
                        prop_assert!(earlier.mask.center != later.mask.center);
                    }
                }
                let again = identify_regions(&map, &RegionConfig::new(count, radius).unwrap()).unwrap();
                prop_assert_eq!(regions, again);
            }

            #[test]
            fn constant_offset_keeps_centres(map in arb_map(), c in 0.01f64..5.0) {
                let cfg = RegionConfig::new(3, 1.5).unwrap();
                let shifted = AttentionMap::new("a", map.height(), map.width(), map.values().iter().map(|v| v + c).collect()).unwrap();
                let a: Vec<Cell> = identify_regions(&map, &cfg).unwrap().iter().map(|r| r.mask.center).collect();
                let b: Vec<Cell> = identify_regions(&shifted, &cfg).unwrap().iter().map(|r| r.mask.center).collect();
                // an all-positive map always fills every slot; the zero-valued original may stop early
                prop_assert_eq!(&b[..a.len()], &a[..]);
            }

            #[test]
            fn huge_radius_covers_everything(map in arb_map()) {
                let total: f64 = map.total();
                prop_assume!(total > 0.0);
                let regions = identify_regions(&map, &RegionConfig::new(3, 100.0).unwrap()).unwrap();
                prop_assert_eq!(regions.len(), 1);
                prop_assert_eq!(regions[0].count(), map.len());
            }
        }
    }
}
