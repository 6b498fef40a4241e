//! Attention maps, token roles, and the cross-attention softmax.
//!
//! Maps are stored row-major. Coordinates are `(h, w)` = (row, column) with
//! the origin at the centre of the top-left cell.

use std::collections::HashSet;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = String;

/// A continuous position on a map, in cell units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coord {
    pub h: f64,
    pub w: f64,
}

impl Coord {
    pub fn new(h: f64, w: f64) -> Self {
        Self { h, w }
    }

    pub fn distance(&self, other: &Coord) -> f64 {
        (self.h - other.h).hypot(self.w - other.w)
    }
}

/// An integer cell index on a map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn coord(&self) -> Coord {
        Coord::new(self.row as f64, self.col as f64)
    }
}

/// One token's grid of non-negative attention scores.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub token: TokenId,
    pub timestep: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl AttentionMap {
    pub fn new(
        token: impl Into<TokenId>,
        height: usize,
        width: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "map must be at least 1x1, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation(format!(
                "map value at ({}, {}) is {}; values must be finite and >= 0",
                i / width,
                i % width,
                values[i]
            )));
        }
        Ok(Self {
            token: token.into(),
            timestep: 0,
            height,
            width,
            values,
        })
    }

    pub fn from_fn(
        token: impl Into<TokenId>,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::new(token, height, width, values)
    }

    pub fn with_timestep(mut self, t: usize) -> Self {
        self.timestep = t;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Row-major cell values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, cell: Cell) -> f64 {
        self.values[cell.row * self.width + cell.col]
    }

    pub fn cell_of(&self, index: usize) -> Cell {
        Cell::new(index / self.width, index % self.width)
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Every cell with its value, row-major.
    pub fn cells(&self) -> impl Iterator<Item = (Cell, f64)> + Clone + '_ {
        self.values
            .iter()
            .enumerate()
            .map(|(i, &v)| (self.cell_of(i), v))
    }

    /// Value-weighted centroid of the whole map.
    pub fn centroid(&self) -> Result<Coord> {
        weighted_centroid(self.cells()).map_err(|e| match e {
            Error::ZeroMass(_) => {
                Error::ZeroMass(format!("map for token {:?} is all zero", self.token))
            }
            other => other,
        })
    }

    /// Largest diagonal of the map, `sqrt(W^2 + H^2)`.
    pub fn max_distance(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    Subject,
    Attribute,
    /// Participates in the softmax but carries no loss (start-of-text,
    /// padding, background words).
    Context,
}

/// Role of one prompt token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenSpec {
    pub id: TokenId,
    pub kind: TokenRole,
    /// Subjects only: use the animal region rule instead of the object rule.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub animal: bool,
    /// Attributes only: the subject this attribute describes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<TokenId>,
}

impl TokenSpec {
    pub fn subject(id: impl Into<TokenId>) -> Self {
        Self {
            id: id.into(),
            kind: TokenRole::Subject,
            animal: false,
            subject: None,
        }
    }

    pub fn animal(id: impl Into<TokenId>) -> Self {
        Self {
            animal: true,
            ..Self::subject(id)
        }
    }

    pub fn attribute(id: impl Into<TokenId>, subject: impl Into<TokenId>) -> Self {
        Self {
            id: id.into(),
            kind: TokenRole::Attribute,
            animal: false,
            subject: Some(subject.into()),
        }
    }

    pub fn context(id: impl Into<TokenId>) -> Self {
        Self {
            id: id.into(),
            kind: TokenRole::Context,
            animal: false,
            subject: None,
        }
    }

    pub fn is_subject(&self) -> bool {
        self.kind == TokenRole::Subject
    }

    pub fn is_attribute(&self) -> bool {
        self.kind == TokenRole::Attribute
    }
}

/// Checks the token roles for internal consistency: unique ids, and every
/// attribute bound to exactly one subject of the same set.
pub fn validate_tokens(tokens: &[TokenSpec]) -> Result<()> {
    let mut seen = HashSet::new();
    for t in tokens {
        if !seen.insert(t.id.as_str()) {
            return Err(Error::Validation(format!("duplicate token id {:?}", t.id)));
        }
    }
    for t in tokens {
        match t.kind {
            TokenRole::Attribute => {
                let Some(s) = &t.subject else {
                    return Err(Error::Validation(format!(
                        "attribute {:?} has no subject",
                        t.id
                    )));
                };
                if !tokens.iter().any(|o| o.is_subject() && &o.id == s) {
                    return Err(Error::Validation(format!(
                        "attribute {:?} references unknown subject {:?}",
                        t.id, s
                    )));
                }
            }
            _ if t.subject.is_some() => {
                return Err(Error::Validation(format!(
                    "only attributes may name a subject ({:?})",
                    t.id
                )));
            }
            TokenRole::Context if t.animal => {
                return Err(Error::Validation(format!(
                    "only subjects may be animals ({:?})",
                    t.id
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Per-token attention maps sharing dimensions and timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    maps: Vec<AttentionMap>,
    /// Set when the stack came out of a per-position softmax.
    pub normalized: bool,
}

impl AttentionStack {
    pub fn new(maps: Vec<AttentionMap>) -> Result<Self> {
        let Some(first) = maps.first() else {
            return Err(Error::Shape("stack needs at least one map".into()));
        };
        let (h, w, t) = (first.height, first.width, first.timestep);
        for m in &maps {
            if m.height != h || m.width != w {
                return Err(Error::Shape(format!(
                    "map {:?} is {}x{}, expected {h}x{w}",
                    m.token, m.height, m.width
                )));
            }
            if m.timestep != t {
                return Err(Error::Validation(format!(
                    "map {:?} has timestep {}, expected {t}",
                    m.token, m.timestep
                )));
            }
        }
        Ok(Self {
            maps,
            normalized: false,
        })
    }

    /// Builds a normalized stack from token-major logits `[token][row * W + col]`
    /// by a softmax over tokens at every position.
    pub fn from_logits(
        tokens: &[TokenId],
        height: usize,
        width: usize,
        timestep: usize,
        logits: &[Vec<f64>],
    ) -> Result<Self> {
        let n = height * width;
        if tokens.len() != logits.len() {
            return Err(Error::Shape(format!(
                "{} token ids for {} logit planes",
                tokens.len(),
                logits.len()
            )));
        }
        if tokens.is_empty() || n == 0 {
            return Err(Error::Shape("empty logits".into()));
        }
        if let Some(p) = logits.iter().find(|p| p.len() != n) {
            return Err(Error::Shape(format!(
                "logit plane has {} cells, expected {n}",
                p.len()
            )));
        }
        if logits.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite logit".into()));
        }
        let t = tokens.len();
        let mut planes = vec![vec![0.0; n]; t];
        let mut column = vec![0.0; t];
        for p in 0..n {
            for (k, plane) in logits.iter().enumerate() {
                column[k] = plane[p];
            }
            softmax_in_place(&mut column);
            for (k, plane) in planes.iter_mut().enumerate() {
                plane[p] = column[k];
            }
        }
        let maps = tokens
            .iter()
            .zip(planes)
            .map(|(id, vals)| {
                AttentionMap::new(id.clone(), height, width, vals)
                    .map(|m| m.with_timestep(timestep))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut stack = Self::new(maps)?;
        stack.normalized = true;
        Ok(stack)
    }

    pub fn height(&self) -> usize {
        self.maps[0].height
    }

    pub fn width(&self) -> usize {
        self.maps[0].width
    }

    pub fn timestep(&self) -> usize {
        self.maps[0].timestep
    }

    pub fn maps(&self) -> &[AttentionMap] {
        &self.maps
    }

    pub fn map(&self, token: &str) -> Option<&AttentionMap> {
        self.maps.iter().find(|m| m.token == token)
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.maps.iter().position(|m| m.token == token)
    }

    pub fn token_ids(&self) -> Vec<TokenId> {
        self.maps.iter().map(|m| m.token.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Token-major copy of all values.
    pub fn planes(&self) -> Vec<Vec<f64>> {
        self.maps.iter().map(|m| m.values.clone()).collect()
    }

    /// Rebuilds a stack with the same ids and dimensions from new planes.
    pub fn with_planes(&self, planes: Vec<Vec<f64>>) -> Result<Self> {
        if planes.len() != self.maps.len() {
            return Err(Error::Shape(format!(
                "{} planes for {} maps",
                planes.len(),
                self.maps.len()
            )));
        }
        let maps = self
            .maps
            .iter()
            .zip(planes)
            .map(|(m, vals)| {
                AttentionMap::new(m.token.clone(), m.height, m.width, vals)
                    .map(|x| x.with_timestep(m.timestep))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(maps)
    }

    /// Largest deviation of the per-position token sum from 1.
    pub fn normalization_error(&self) -> f64 {
        let n = self.maps[0].values.len();
        (0..n)
            .map(|p| (self.maps.iter().map(|m| m.values[p]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Numerically stable softmax (max-subtracted) over a slice.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Cross-attention `softmax(Q K^T / sqrt(d_k))`, softmax taken over tokens at
/// each of the `N = height * width` query positions. Column `m` of the score
/// matrix becomes the map of `tokens[m]`, row-major.
pub fn compute_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    d_k: usize,
    height: usize,
    width: usize,
    tokens: &[TokenId],
    timestep: usize,
) -> Result<AttentionStack> {
    if d_k == 0 {
        return Err(Error::Validation("d_k must be positive".into()));
    }
    if q.ncols() != d_k || k.ncols() != d_k {
        return Err(Error::Shape(format!(
            "Q has inner dim {}, K has {}, expected d_k = {d_k}",
            q.ncols(),
            k.ncols()
        )));
    }
    if q.nrows() != height * width {
        return Err(Error::Shape(format!(
            "Q has {} rows, expected {height}x{width}",
            q.nrows()
        )));
    }
    if k.nrows() != tokens.len() {
        return Err(Error::Shape(format!(
            "K has {} rows for {} tokens",
            k.nrows(),
            tokens.len()
        )));
    }
    if q.iter().chain(k.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite entry in Q or K".into()));
    }
    let scores = q.dot(&k.t()) / (d_k as f64).sqrt();
    let logits: Vec<Vec<f64>> = scores.columns().into_iter().map(|c| c.to_vec()).collect();
    AttentionStack::from_logits(tokens, height, width, timestep, &logits)
}

/// `(sum h*v / sum v, sum w*v / sum v)` over the given cells.
pub fn weighted_centroid<I>(cells: I) -> Result<Coord>
where
    I: IntoIterator<Item = (Cell, f64)>,
{
    let cells: Vec<(Cell, f64)> = cells.into_iter().collect();
    if cells.is_empty() {
        return Err(Error::Validation("centroid of an empty cell list".into()));
    }
    let mut mass = 0.0;
    for &(cell, v) in &cells {
        if v < 0.0 || !v.is_finite() {
            return Err(Error::Validation(format!(
                "cell {:?} has invalid value {v}",
                cell
            )));
        }
        mass += v;
    }
    if mass <= 0.0 {
        return Err(Error::ZeroMass("all cell values are zero".into()));
    }
    // normalise weights first so a single cell lands exactly on itself
    let (mut h, mut w) = (0.0, 0.0);
    for (cell, v) in cells {
        let p = v / mass;
        h += cell.row as f64 * p;
        w += cell.col as f64 * p;
    }
    Ok(Coord::new(h, w))
}

/// Location and value of the largest cell; ties go to the first cell in
/// row-major order.
pub fn max_activation(map: &AttentionMap) -> (Cell, f64) {
    let mut best = 0;
    for (i, &v) in map.values.iter().enumerate() {
        if v > map.values[best] {
            best = i;
        }
    }
    (map.cell_of(best), map.values[best])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(n: usize) -> Vec<TokenId> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn zero_queries_give_uniform_maps() {
        let q = Array2::<f64>::zeros((4, 3));
        let k = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64);
        let stack = compute_attention(q.view(), k.view(), 3, 2, 2, &ids(4), 0).unwrap();
        assert!(stack.normalized);
        for m in stack.maps() {
            for &v in m.values() {
                assert_relative_eq!(v, 0.25, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn two_token_closed_form() {
        // scores [0, ln 3] after scaling by 1/sqrt(1)
        let q = Array2::from_elem((1, 1), 1.0);
        let k = Array2::from_shape_vec((2, 1), vec![0.0, 3f64.ln()]).unwrap();
        let stack = compute_attention(q.view(), k.view(), 1, 1, 1, &ids(2), 0).unwrap();
        assert_relative_eq!(stack.maps()[0].values()[0], 0.25, epsilon = 1e-15);
        assert_relative_eq!(stack.maps()[1].values()[0], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn random_grid_matches_scalar_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h, w, t, d) = (4, 4, 3, 2);
        let q = Array2::from_shape_fn((h * w, d), |_| rng.random_range(-2.0..2.0));
        let k = Array2::from_shape_fn((t, d), |_| rng.random_range(-2.0..2.0));
        let stack = compute_attention(q.view(), k.view(), d, h, w, &ids(t), 3).unwrap();
        assert_eq!(stack.timestep(), 3);
        assert!(stack.normalization_error() < 1e-12);
        for p in 0..h * w {
            let scores: Vec<f64> = (0..t)
                .map(|m| (0..d).map(|j| q[[p, j]] * k[[m, j]]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let denom: f64 = scores.iter().map(|s| s.exp()).sum();
            for m in 0..t {
                assert_relative_eq!(
                    stack.maps()[m].values()[p],
                    scores[m].exp() / denom,
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn attention_shape_errors() {
        let q = Array2::<f64>::zeros((4, 3));
        let k = Array2::<f64>::zeros((2, 2));
        assert!(matches!(
            compute_attention(q.view(), k.view(), 3, 2, 2, &ids(2), 0),
            Err(Error::Shape(_))
        ));
        let k = Array2::<f64>::zeros((2, 3));
        assert!(matches!(
            compute_attention(q.view(), k.view(), 3, 3, 3, &ids(2), 0),
            Err(Error::Shape(_))
        ));
        let mut q2 = q.clone();
        q2[[0, 0]] = f64::NAN;
        assert!(matches!(
            compute_attention(q2.view(), k.view(), 3, 2, 2, &ids(2), 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn centroid_examples() {
        let c = weighted_centroid([(Cell::new(3, 4), 0.7)]).unwrap();
        assert_eq!((c.h, c.w), (3.0, 4.0));
        let c = weighted_centroid([(Cell::new(0, 0), 0.5), (Cell::new(2, 2), 0.5)]).unwrap();
        assert_eq!((c.h, c.w), (1.0, 1.0));
        let c = weighted_centroid([(Cell::new(0, 0), 1.0), (Cell::new(0, 3), 3.0)]).unwrap();
        assert_eq!((c.h, c.w), (0.0, 2.25));
        assert!(matches!(
            weighted_centroid([(Cell::new(0, 0), 0.0), (Cell::new(1, 1), 0.0)]),
            Err(Error::ZeroMass(_))
        ));
    }

    #[test]
    fn max_activation_tie_break_and_unique() {
        let m = AttentionMap::new("a", 3, 3, vec![0.4; 9]).unwrap();
        assert_eq!(max_activation(&m), (Cell::new(0, 0), 0.4));
        let m = AttentionMap::from_fn("a", 16, 16, |r, c| if (r, c) == (5, 7) { 0.9 } else { 0.1 })
            .unwrap();
        assert_eq!(max_activation(&m), (Cell::new(5, 7), 0.9));
    }

    #[test]
    fn max_activation_matches_full_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = AttentionMap::from_fn("a", 16, 16, |_, _| rng.random::<f64>()).unwrap();
        let mut best = (Cell::new(0, 0), f64::NEG_INFINITY);
        for r in 0..16 {
            for c in 0..16 {
                let v = m.get(Cell::new(r, c));
                if v > best.1 {
                    best = (Cell::new(r, c), v);
                }
            }
        }
        assert_eq!(max_activation(&m), best);
    }

    #[test]
    fn map_rejects_bad_values() {
        assert!(AttentionMap::new("a", 2, 2, vec![0.0, -1.0, 0.0, 0.0]).is_err());
        assert!(AttentionMap::new("a", 2, 2, vec![0.0; 3]).is_err());
        assert!(AttentionMap::new("a", 0, 2, vec![]).is_err());
    }

    #[test]
    fn token_validation() {
        let ok = vec![
            TokenSpec::subject("cat"),
            TokenSpec::attribute("red", "cat"),
            TokenSpec::context("<sot>"),
        ];
        validate_tokens(&ok).unwrap();
        let dup = vec![TokenSpec::subject("cat"), TokenSpec::subject("cat")];
        assert!(validate_tokens(&dup).is_err());
        let dangling = vec![TokenSpec::attribute("red", "dog")];
        assert!(validate_tokens(&dangling).is_err());
        let bound_to_attr = vec![
            TokenSpec::subject("cat"),
            TokenSpec::attribute("a", "cat"),
            TokenSpec::attribute("b", "a"),
        ];
        assert!(validate_tokens(&bound_to_attr).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn permuting_keys_permutes_maps(seed in 0u64..500, shift in 1usize..3) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let q = Array2::from_shape_fn((9, 2), |_| rng.random_range(-1.0..1.0));
                let k = Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0));
                let perm: Vec<usize> = (0..3).map(|i| (i + shift) % 3).collect();
                let kp = Array2::from_shape_fn((3, 2), |(i, j)| k[[perm[i], j]]);
                let a = compute_attention(q.view(), k.view(), 2, 3, 3, &ids(3), 0).unwrap();
                let b = compute_attention(q.view(), kp.view(), 2, 3, 3, &ids(3), 0).unwrap();
                for i in 0..3 {
                    for (x, y) in b.maps()[i].values().iter().zip(a.maps()[perm[i]].values()) {
                        prop_assert!((x - y).abs() < 1e-12);
                    }
                }
            }

            #[test]
            fn softmax_shift_invariance(seed in 0u64..500, shift in -20.0f64..20.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let logits: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
                let offsets: Vec<f64> = (0..4).map(|p| shift * p as f64).collect();
                let shifted: Vec<Vec<f64>> = logits.iter().map(|pl| pl.iter().zip(&offsets).map(|(v, o)| v + o).collect()).collect();
                let a = AttentionStack::from_logits(&ids(3), 2, 2, 0, &logits).unwrap();
                let b = AttentionStack::from_logits(&ids(3), 2, 2, 0, &shifted).unwrap();
                for (ma, mb) in a.maps().iter().zip(b.maps()) {
                    for (x, y) in ma.values().iter().zip(mb.values()) {
                        prop_assert!((x - y).abs() < 1e-12);
                    }
                }
            }

            #[test]
            fn centroid_scale_invariance(vals in proptest::collection::vec(0.01f64..10.0, 1..20), c in 0.01f64..100.0) {
                let cells: Vec<(Cell, f64)> = vals.iter().enumerate().map(|(i, &v)| (Cell::new(i / 5, i % 5), v)).collect();
                let a = weighted_centroid(cells.iter().copied()).unwrap();
                let b = weighted_centroid(cells.iter().map(|&(cell, v)| (cell, v * c))).unwrap();
                prop_assert!((a.h - b.h).abs() < 1e-9 && (a.w - b.w).abs() < 1e-9);
            }

            #[test]
            fn centroid_of_single_coordinate(vals in proptest::collection::vec(0.01f64..10.0, 1..10), r in 0usize..16, col in 0usize..16) {
                let c = weighted_centroid(vals.iter().map(|&v| (Cell::new(r, col), v))).unwrap();
                prop_assert!((c.h - r as f64).abs() < 1e-12 && (c.w - col as f64).abs() < 1e-12);
            }
        }
    }
}
