//! Aggregation, isolation and max-activation losses, and their weighted total.
//!
//! Discrete choices (mask placement, argmax cell) live in a [`Selection`] so
//! that a loss can be re-evaluated on perturbed values with the choices held
//! fixed. [`total_loss`] recomputes the selection and then evaluates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attn::{
    max_activation, AttentionMap, AttentionStack, Cell, TokenId, TokenRole, TokenSpec,
};
use crate::error::{Error, Result};
use crate::regions::{identify_regions, CircularMask, GroupingRegion, RegionConfig, RegionConfigs};

/// Balancing weights of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub agg_sub: f64,
    pub iso: f64,
    pub max: f64,
    pub agg_attr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            agg_sub: 1.25,
            iso: 2.0,
            max: 0.25,
            agg_attr: 0.75,
        }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        agg_sub: 0.0,
        iso: 0.0,
        max: 0.0,
        agg_attr: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("agg_sub", self.agg_sub),
            ("iso", self.iso),
            ("max", self.max),
            ("agg_attr", self.agg_attr),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Validation(format!(
                    "weight {name} must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    Euclidean,
    Cosine,
}

impl MetricKind {
    pub fn short(&self) -> &'static str {
        match self {
            MetricKind::Euclidean => "euc",
            MetricKind::Cosine => "cos",
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euc" | "euclidean" => Ok(MetricKind::Euclidean),
            "cos" | "cosine" => Ok(MetricKind::Cosine),
            other => Err(Error::Validation(format!(
                "unknown metric {other:?}, expected euc or cos"
            ))),
        }
    }
}

/// Metric used by the aggregation terms (subject and attribute) and by the
/// isolation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub aggregation: MetricKind,
    pub isolation: MetricKind,
}

/// Everything needed to evaluate the loss on a stack besides the stack itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub tokens: Vec<TokenSpec>,
    pub weights: LossWeights,
    pub regions: RegionConfigs,
    pub metrics: Metrics,
}

impl Objective {
    pub fn new(tokens: Vec<TokenSpec>) -> Self {
        Self {
            tokens,
            weights: LossWeights::default(),
            regions: RegionConfigs::default(),
            metrics: Metrics::default(),
        }
    }

    pub fn with_weights(mut self, weights: LossWeights) -> Self {
        self.weights = weights;
        self
    }

    pub fn with_regions(mut self, regions: RegionConfigs) -> Self {
        self.regions = regions;
        self
    }

    pub fn with_metrics(mut self, metrics: Metrics) -> Self {
        self.metrics = metrics;
        self
    }

    /// Region settings for a token, or `None` for context tokens.
    pub fn region_config(&self, token: &TokenSpec) -> Option<RegionConfig> {
        match token.kind {
            TokenRole::Subject if token.animal => Some(self.regions.animal),
            TokenRole::Subject => Some(self.regions.object),
            TokenRole::Attribute => Some(self.regions.attribute),
            TokenRole::Context => None,
        }
    }

    pub fn subject_indices(&self) -> Vec<usize> {
        (0..self.tokens.len())
            .filter(|&i| self.tokens[i].is_subject())
            .collect()
    }

    pub fn attribute_indices(&self) -> Vec<usize> {
        (0..self.tokens.len())
            .filter(|&i| self.tokens[i].is_attribute())
            .collect()
    }

    /// Tokens must match the stack's maps one to one, in order.
    pub fn check(&self, stack: &AttentionStack) -> Result<()> {
        crate::attn::validate_tokens(&self.tokens)?;
        self.weights.validate()?;
        if self.tokens.len() != stack.len() {
            return Err(Error::Validation(format!(
                "{} token specs for {} maps",
                self.tokens.len(),
                stack.len()
            )));
        }
        for (spec, map) in self.tokens.iter().zip(stack.maps()) {
            if spec.id != map.token {
                return Err(Error::Validation(format!(
                    "token {:?} does not match map {:?}",
                    spec.id, map.token
                )));
            }
        }
        Ok(())
    }
}

/// Frozen discrete choices for one token.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenSelection {
    pub masks: Vec<CircularMask>,
    pub argmax: Option<Cell>,
}

/// Frozen discrete choices for a whole stack, indexed like the stack's maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub tokens: Vec<TokenSelection>,
}

impl Selection {
    /// Places grouping regions on subject and attribute maps and records each
    /// subject's argmax cell.
    pub fn compute(stack: &AttentionStack, objective: &Objective) -> Result<Self> {
        objective.check(stack)?;
        let tokens = objective
            .tokens
            .iter()
            .zip(stack.maps())
            .map(|(spec, map)| {
                let mut sel = TokenSelection::default();
                if let Some(cfg) = objective.region_config(spec) {
                    sel.masks = identify_regions(map, &cfg)?
                        .into_iter()
                        .map(|r| r.mask)
                        .collect();
                }
                if spec.is_subject() {
                    sel.argmax = Some(max_activation(map).0);
                }
                Ok(sel)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tokens })
    }

    /// Regions of token `index`, read off the current values of `map`.
    pub fn regions(&self, index: usize, map: &AttentionMap) -> Vec<GroupingRegion> {
        self.tokens[index]
            .masks
            .iter()
            .map(|m| GroupingRegion::from_mask(map, *m))
            .collect()
    }
}

/// The four loss terms, their weighted total, and each token's share of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub agg_sub: f64,
    pub iso: f64,
    pub max: f64,
    pub agg_attr: f64,
    pub total: f64,
    /// Weighted contribution per token; isolation pair terms are split evenly
    /// between the two subjects. Sums to `total`.
    pub per_token: BTreeMap<TokenId, f64>,
}

impl LossBreakdown {
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        w.agg_sub * self.agg_sub + w.iso * self.iso + w.max * self.max + w.agg_attr * self.agg_attr
    }
}

fn ordered_pair_sum(n: usize, mut f: impl FnMut(usize, usize) -> Result<f64>) -> Result<f64> {
    let mut sum = 0.0;
    for i in 0..n {
        for k in 0..n {
            if i != k {
                sum += f(i, k)?;
            }
        }
    }
    Ok(sum)
}

/// Sum over ordered pairs `i != k` of the Euclidean distance between region
/// centroids (each unordered pair counted twice).
pub fn agg_sub_loss(regions: &[GroupingRegion]) -> Result<f64> {
    let centroids = regions
        .iter()
        .map(|r| r.centroid())
        .collect::<Result<Vec<_>>>()?;
    ordered_pair_sum(centroids.len(), |i, k| {
        Ok(centroids[i].distance(&centroids[k]))
    })
}

/// Attribute aggregation; same formula as [`agg_sub_loss`] over the
/// attribute's own regions.
pub fn agg_attr_loss(attr_regions: &[GroupingRegion]) -> Result<f64> {
    agg_sub_loss(attr_regions)
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector("operand has zero norm".into()));
    }
    Ok(dot / (na * nb))
}

/// Sum over ordered pairs `i != k` of `1 - cos(a_i, a_k)` on the full-disk
/// region vectors.
pub fn agg_sub_loss_cos(regions: &[GroupingRegion]) -> Result<f64> {
    ordered_pair_sum(regions.len(), |i, k| {
        Ok(1.0 - cosine(&regions[i].disk, &regions[k].disk)?)
    })
}

fn same_dims(a: &AttentionMap, b: &AttentionMap) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "maps {}x{} and {}x{} differ",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `1 - d / d_max`, with `d` the distance between whole-map centroids and
/// `d_max = sqrt(W^2 + H^2)`.
pub fn iso_loss(map_m: &AttentionMap, map_n: &AttentionMap) -> Result<f64> {
    same_dims(map_m, map_n)?;
    let d = map_m.centroid()?.distance(&map_n.centroid()?);
    Ok(1.0 - d / map_m.max_distance())
}

/// Cosine similarity of the two flattened maps.
pub fn iso_loss_cos(map_m: &AttentionMap, map_n: &AttentionMap) -> Result<f64> {
    same_dims(map_m, map_n)?;
    cosine(map_m.values(), map_n.values())
}

/// `1 - v(max)`.
pub fn max_loss(map: &AttentionMap) -> f64 {
    1.0 - max_activation(map).1
}

fn subject_pairs(subjects: &[usize]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (a, &i) in subjects.iter().enumerate() {
        for &k in &subjects[a + 1..] {
            pairs.push((i, k));
        }
    }
    pairs
}

fn iso_pairs(
    stack: &AttentionStack,
    subjects: &[usize],
    metric: MetricKind,
) -> Result<Vec<((usize, usize), f64)>> {
    subject_pairs(subjects)
        .into_iter()
        .map(|(i, k)| {
            let (a, b) = (&stack.maps()[i], &stack.maps()[k]);
            let v = match metric {
                MetricKind::Euclidean => iso_loss(a, b)?,
                MetricKind::Cosine => iso_loss_cos(a, b)?,
            };
            Ok(((i, k), v))
        })
        .collect()
}

/// Mean Euclidean isolation loss over unordered subject pairs; 0 with fewer
/// than two subjects.
pub fn iso_loss_all(stack: &AttentionStack, tokens: &[TokenSpec]) -> Result<f64> {
    if tokens.len() != stack.len() {
        return Err(Error::Validation(format!(
            "{} token specs for {} maps",
            tokens.len(),
            stack.len()
        )));
    }
    let subjects: Vec<usize> = (0..tokens.len())
        .filter(|&i| tokens[i].is_subject())
        .collect();
    if subjects.is_empty() {
        return Err(Error::Validation(
            "isolation needs at least one subject".into(),
        ));
    }
    let pairs = iso_pairs(stack, &subjects, MetricKind::Euclidean)?;
    Ok(mean(pairs.iter().map(|p| p.1)))
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    if n == 0 {
        0.0
    } else {
        xs.sum::<f64>() / n as f64
    }
}

fn aggregation(regions: &[GroupingRegion], metric: MetricKind) -> Result<f64> {
    match metric {
        MetricKind::Euclidean => agg_sub_loss(regions),
        MetricKind::Cosine => agg_sub_loss_cos(regions),
    }
}

/// Evaluates all terms with the discrete choices in `selection` held fixed.
pub fn evaluate(
    stack: &AttentionStack,
    objective: &Objective,
    selection: &Selection,
) -> Result<LossBreakdown> {
    objective.check(stack)?;
    if selection.tokens.len() != stack.len() {
        return Err(Error::Validation("selection does not match stack".into()));
    }
    let w = &objective.weights;
    let maps = stack.maps();
    let subjects = objective.subject_indices();
    let attributes = objective.attribute_indices();
    let mut per_token: BTreeMap<TokenId, f64> = objective
        .tokens
        .iter()
        .map(|t| (t.id.clone(), 0.0))
        .collect();

    let ns = subjects.len().max(1) as f64;
    let (mut agg_sub, mut max) = (0.0, 0.0);
    for &i in &subjects {
        let a = aggregation(
            &selection.regions(i, &maps[i]),
            objective.metrics.aggregation,
        )?;
        let cell = selection.tokens[i]
            .argmax
            .ok_or_else(|| Error::Validation("subject without argmax".into()))?;
        let m = 1.0 - maps[i].get(cell);
        agg_sub += a / ns;
        max += m / ns;
        *per_token.get_mut(&maps[i].token).unwrap() += (w.agg_sub * a + w.max * m) / ns;
    }

    let na = attributes.len().max(1) as f64;
    let mut agg_attr = 0.0;
    for &i in &attributes {
        let a = aggregation(
            &selection.regions(i, &maps[i]),
            objective.metrics.aggregation,
        )?;
        agg_attr += a / na;
        *per_token.get_mut(&maps[i].token).unwrap() += w.agg_attr * a / na;
    }

    let pairs = iso_pairs(stack, &subjects, objective.metrics.isolation)?;
    let np = pairs.len().max(1) as f64;
    let mut iso = 0.0;
    for ((i, k), v) in pairs {
        iso += v / np;
        let share = w.iso * v / np / 2.0;
        *per_token.get_mut(&maps[i].token).unwrap() += share;
        *per_token.get_mut(&maps[k].token).unwrap() += share;
    }

    let mut out = LossBreakdown {
        agg_sub,
        iso,
        max,
        agg_attr,
        total: 0.0,
        per_token,
    };
    out.total = out.recombine(w);
    Ok(out)
}

/// Places regions and argmax cells on `stack`, then evaluates every term.
pub fn total_loss(stack: &AttentionStack, objective: &Objective) -> Result<LossBreakdown> {
    let selection = Selection::compute(stack, objective)?;
    evaluate(stack, objective, &selection)
}

/// Weights for the two text-encoder halves of a dual-encoder backbone:
/// each encoder's peak activation over their sum.
pub fn multi_encoder_weights(max_clip: f64, max_t5: f64) -> Result<(f64, f64)> {
    if !(max_clip >= 0.0 && max_t5 >= 0.0) || !max_clip.is_finite() || !max_t5.is_finite() {
        return Err(Error::Validation(format!(
            "peak activations must be finite and >= 0, got {max_clip}, {max_t5}"
        )));
    }
    let tau = max_clip + max_t5;
    if tau == 0.0 {
        return Err(Error::DivisionByZero(
            "both peak activations are zero".into(),
        ));
    }
    // divide out the smaller share and take the complement so the pair sums to one
    if max_clip <= max_t5 {
        let clip = max_clip / tau;
        Ok((clip, 1.0 - clip))
    } else {
        let t5 = max_t5 / tau;
        Ok((1.0 - t5, t5))
    }
}
