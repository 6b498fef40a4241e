//! Spatial statistics for scattering and overlap.

use serde::{Deserialize, Serialize};

use crate::attn::AttentionMap;
use crate::error::{Error, Result};
use crate::losses::agg_sub_loss;
use crate::regions::GroupingRegion;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adjacency {
    /// 4-neighbour contiguity.
    #[default]
    Rook,
    /// 8-neighbour contiguity.
    Queen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MoranConfig {
    pub adjacency: Adjacency,
}

/// Global Moran's I with binary contiguity weights (no row standardisation):
/// `I = (N / S0) * sum_ij w_ij (x_i - m)(x_j - m) / sum_i (x_i - m)^2`.
pub fn morans_i(map: &AttentionMap, cfg: MoranConfig) -> Result<f64> {
    let (h, w) = (map.height() as isize, map.width() as isize);
    let x = map.values();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let denom: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    // a rounded mean leaves a tiny nonzero variance on constant maps
    if x.iter().all(|&v| v == x[0]) || denom == 0.0 {
        return Err(Error::UndefinedMetric("Moran's I of a constant map".into()));
    }
    let neighbours: &[(isize, isize)] = match cfg.adjacency {
        Adjacency::Rook => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Adjacency::Queen => &[
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ],
    };
    let (mut num, mut s0) = (0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            let di = x[(r * w + c) as usize] - mean;
            for (dr, dc) in neighbours {
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= h || cc >= w {
                    continue;
                }
                num += di * (x[(rr * w + cc) as usize] - mean);
                s0 += 1.0;
            }
        }
    }
    if s0 == 0.0 {
        return Err(Error::UndefinedMetric(
            "map has no neighbouring cells".into(),
        ));
    }
    Ok(n / s0 * num / denom)
}

/// Indices of the cells holding the top `q` fraction of a map's mass: cells
/// sorted by value (descending, ties row-major) while the cumulative mass
/// stays within `q * total`. The top cell is always included.
pub fn top_mass_cells(map: &AttentionMap, q: f64) -> Vec<usize> {
    let vals = map.values();
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let budget = q * map.total();
    let mut cum = 0.0;
    let mut out = Vec::new();
    for i in order {
        cum += vals[i];
        if cum > budget && !out.is_empty() {
            break;
        }
        out.push(i);
    }
    out.sort_unstable();
    out
}

/// Intersection over union of the two maps' top-`q` mass cell sets.
pub fn overlap_ratio(map_m: &AttentionMap, map_n: &AttentionMap, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Validation(format!(
            "quantile must lie in (0, 1), got {q}"
        )));
    }
    if map_m.height() != map_n.height() || map_m.width() != map_n.width() {
        return Err(Error::Shape(
            "overlap of maps with different dimensions".into(),
        ));
    }
    let mut in_m = vec![false; map_m.len()];
    for i in top_mass_cells(map_m, q) {
        in_m[i] = true;
    }
    let set_n = top_mass_cells(map_n, q);
    let inter = set_n.iter().filter(|&&i| in_m[i]).count();
    let union = in_m.iter().filter(|&&b| b).count() + set_n.len() - inter;
    Ok(inter as f64 / union as f64)
}

/// Mean distance between region centroids over ordered pairs; 0 for a single
/// region. Equals `agg_sub_loss / (n (n - 1))`.
pub fn centroid_spread(regions: &[GroupingRegion]) -> Result<f64> {
    if regions.is_empty() {
        return Err(Error::Validation("centroid spread of no regions".into()));
    }
    let n = regions.len();
    if n < 2 {
        return Ok(0.0);
    }
    Ok(agg_sub_loss(regions)? / (n * (n - 1)) as f64)
}
