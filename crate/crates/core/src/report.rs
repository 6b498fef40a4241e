//! Summaries of one attention stack, and the seeded stacks used by gradient
//! check sweeps. The CLI prints these values as they come.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attn::{AttentionStack, Cell, Coord, TokenId, TokenSpec};
use crate::error::Result;
use crate::grad::{gradcheck, GradCheckConfig, GradCheckReport};
use crate::losses::{evaluate, iso_loss, LossBreakdown, Objective, Selection};
use crate::metrics::{morans_i, MoranConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub token: TokenId,
    /// Placement order, 0 first.
    pub index: usize,
    pub center: Cell,
    pub radius: f64,
    /// `None` when the region holds no mass.
    pub centroid: Option<Coord>,
    /// In-bounds cells under the mask.
    pub count: usize,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub first: TokenId,
    pub second: TokenId,
    /// Distance between whole-map centroids.
    pub distance: f64,
    pub d_over_dmax: f64,
    pub iso_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub loss: LossBreakdown,
    /// Per subject; `None` for a constant map.
    pub morans_i: BTreeMap<TokenId, Option<f64>>,
    pub pairs: Vec<PairRow>,
    pub regions: Vec<RegionRow>,
}

/// Token specs treating every map of `stack` as a plain subject.
pub fn all_subjects(stack: &AttentionStack) -> Vec<TokenSpec> {
    stack
        .token_ids()
        .into_iter()
        .map(TokenSpec::subject)
        .collect()
}

/// Grouping regions placed on every subject and attribute map.
pub fn region_table(stack: &AttentionStack, objective: &Objective) -> Result<Vec<RegionRow>> {
    let selection = Selection::compute(stack, objective)?;
    Ok(rows(stack, objective, &selection))
}

fn rows(stack: &AttentionStack, objective: &Objective, selection: &Selection) -> Vec<RegionRow> {
    let mut out = Vec::new();
    for (i, spec) in objective.tokens.iter().enumerate() {
        for (index, region) in selection
            .regions(i, &stack.maps()[i])
            .into_iter()
            .enumerate()
        {
            out.push(RegionRow {
                token: spec.id.clone(),
                index,
                center: region.mask.center,
                radius: region.mask.radius,
                centroid: region.centroid,
                count: region.count(),
                mass: region.mass(),
            });
        }
    }
    out
}

pub fn analyze(
    stack: &AttentionStack,
    objective: &Objective,
    moran: MoranConfig,
) -> Result<Analysis> {
    let selection = Selection::compute(stack, objective)?;
    let loss = evaluate(stack, objective, &selection)?;
    let maps = stack.maps();
    let subjects = objective.subject_indices();
    let morans = subjects
        .iter()
        .map(|&i| (maps[i].token.clone(), morans_i(&maps[i], moran).ok()))
        .collect();
    let mut pairs = Vec::new();
    for (a, &i) in subjects.iter().enumerate() {
        for &k in &subjects[a + 1..] {
            let distance = maps[i].centroid()?.distance(&maps[k].centroid()?);
            pairs.push(PairRow {
                first: maps[i].token.clone(),
                second: maps[k].token.clone(),
                distance,
                d_over_dmax: distance / maps[i].max_distance(),
                iso_loss: iso_loss(&maps[i], &maps[k])?,
            });
        }
    }
    Ok(Analysis {
        loss,
        morans_i: morans,
        pairs,
        regions: rows(stack, objective, &selection),
    })
}

/// Tokens of the sweep stacks: an object subject, an animal subject, and an
/// attribute bound to the object.
pub fn sweep_tokens() -> Vec<TokenSpec> {
    vec![
        TokenSpec::subject("cat"),
        TokenSpec::animal("dog"),
        TokenSpec::attribute("red", "cat"),
    ]
}

/// Token-major logits with i.i.d. standard normal entries times `scale`,
/// drawn from ChaCha8 seeded with `seed`.
pub fn random_logits(
    height: usize,
    width: usize,
    tokens: usize,
    scale: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..tokens)
        .map(|_| {
            (0..height * width)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    scale * e
                })
                .collect()
        })
        .collect()
}

pub const SWEEP_SIZE: usize = 16;
pub const SWEEP_LOGIT_SCALE: f64 = 1.5;

/// Gradient check of the full default objective on the 16 x 16 sweep stack
/// for `seed`.
pub fn sweep_gradcheck(seed: u64, config: &GradCheckConfig) -> Result<GradCheckReport> {
    let tokens = sweep_tokens();
    let logits = random_logits(
        SWEEP_SIZE,
        SWEEP_SIZE,
        tokens.len(),
        SWEEP_LOGIT_SCALE,
        seed,
    );
    gradcheck(
        SWEEP_SIZE,
        SWEEP_SIZE,
        &logits,
        &Objective::new(tokens),
        config,
    )
}
