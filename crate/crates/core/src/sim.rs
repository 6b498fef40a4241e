//! Desk-scale guidance loop: a latent is (optionally) blurred into logits,
//! softmaxed into an attention stack, the total loss is differentiated back
//! to the latent, and the latent takes a safeguarded gradient step
//! `z' = z - alpha * dL/dz`.
//!
//! Randomness comes from ChaCha8 seeded with `cfg.seed`. Stream 0 draws the
//! initial noise; stream `t + 1` draws the perturbation applied after step `t`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attn::{AttentionStack, Coord, TokenId, TokenSpec};
use crate::error::{Error, Result};
use crate::grad::{gradient_with, softmax_backward};
use crate::losses::{evaluate, LossBreakdown, LossWeights, Metrics, Objective, Selection};
use crate::metrics::{centroid_spread, morans_i, overlap_ratio, MoranConfig};
use crate::regions::{RegionConfigs, RegionRules};

/// One Gaussian bump added to a token's logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    /// `[row, col]` in cell units.
    pub center: [f64; 2],
    pub amplitude: f64,
    pub stddev: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenBlobs {
    /// Constant added to every logit of the token.
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub bumps: Vec<Bump>,
}

/// Initial logit layout per token id. Tokens without an entry start flat.
pub type BlobSpec = BTreeMap<TokenId, TokenBlobs>;

/// Token-major latent values `[token][row * W + col]` at a step. The
/// attention logits are the latent blurred by a Gaussian of width `blur`
/// (cells; 0 means the latent is the logits), a stand-in for the spatial
/// receptive field between a real latent and its attention maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<TokenId>,
    pub values: Vec<Vec<f64>>,
    pub blur: f64,
    pub step: usize,
}

impl Latent {
    pub fn with_blur(mut self, blur: f64) -> Self {
        self.blur = blur;
        self
    }

    pub fn logits(&self) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .map(|p| gaussian_blur(p, self.height, self.width, self.blur))
            .collect()
    }

    pub fn stack(&self) -> Result<AttentionStack> {
        AttentionStack::from_logits(
            &self.tokens,
            self.height,
            self.width,
            self.step,
            &self.logits(),
        )
    }
}

/// Zero-padded Gaussian blur of a row-major plane, kernel truncated at
/// `ceil(3 sigma)` and normalised to unit sum. The operator is symmetric, so
/// it is its own adjoint. `sigma == 0` copies the plane.
pub fn gaussian_blur(plane: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let reach = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-reach..=reach)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
    // separable: rows, then columns
    let (h, w) = (height as isize, width as isize);
    let mut tmp = vec![0.0; plane.len()];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let cc = c + k as isize - reach;
                if (0..w).contains(&cc) {
                    acc += t * plane[(r * w + cc) as usize];
                }
            }
            tmp[(r * w + c) as usize] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let rr = r + k as isize - reach;
                if (0..h).contains(&rr) {
                    acc += t * tmp[(rr * w + c) as usize];
                }
            }
            out[(r * w + c) as usize] = acc;
        }
    }
    out
}

/// Builds the initial latent: every token's bumps and offset, plus i.i.d.
/// Gaussian noise of scale `noise` drawn from stream 0 of `seed`. No blur.
pub fn init_latent(
    height: usize,
    width: usize,
    tokens: &[TokenSpec],
    blobs: &BlobSpec,
    noise: f64,
    seed: u64,
) -> Result<Latent> {
    if height == 0 || width == 0 || tokens.is_empty() {
        return Err(Error::Validation(
            "latent needs positive dimensions and at least one token".into(),
        ));
    }
    for (id, spec) in blobs {
        if !tokens.iter().any(|t| &t.id == id) {
            return Err(Error::Validation(format!(
                "blob spec names unknown token {id:?}"
            )));
        }
        for b in &spec.bumps {
            if !(b.stddev > 0.0)
                || !b.amplitude.is_finite()
                || b.center.iter().any(|c| !c.is_finite())
            {
                return Err(Error::Validation(format!("invalid bump for {id:?}: {b:?}")));
            }
        }
        if !spec.offset.is_finite() {
            return Err(Error::Validation(format!("non-finite offset for {id:?}")));
        }
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Validation(format!(
            "noise scale must be >= 0, got {noise}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut logits = Vec::with_capacity(tokens.len());
    for t in tokens {
        let spec = blobs.get(&t.id);
        let mut plane = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                let mut z = spec.map_or(0.0, |s| s.offset);
                for b in spec.map_or(&[][..], |s| &s.bumps[..]) {
                    let d2 = (r as f64 - b.center[0]).powi(2) + (c as f64 - b.center[1]).powi(2);
                    z += b.amplitude * (-d2 / (2.0 * b.stddev * b.stddev)).exp();
                }
                plane.push(z);
            }
        }
        logits.push(plane);
    }
    if noise > 0.0 {
        for plane in logits.iter_mut() {
            for z in plane.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *z += noise * e;
            }
        }
    }
    Ok(Latent {
        height,
        width,
        tokens: tokens.iter().map(|t| t.id.clone()).collect(),
        values: logits,
        blur: 0.0,
        step: 0,
    })
}

/// Step size: a constant, or a per-step list whose last entry repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSize {
    Constant(f64),
    Schedule(Vec<f64>),
}

impl StepSize {
    pub fn at(&self, step: usize) -> f64 {
        match self {
            StepSize::Constant(a) => *a,
            StepSize::Schedule(v) => v[step.min(v.len() - 1)],
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            StepSize::Constant(a) => *a > 0.0 && a.is_finite(),
            StepSize::Schedule(v) => !v.is_empty() && v.iter().all(|a| *a > 0.0 && a.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(
                "step sizes must be finite and > 0".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<TokenSpec>,
    pub total_steps: usize,
    /// Guidance is applied on steps `0..optimize_steps`.
    pub optimize_steps: usize,
    pub step_size: StepSize,
    /// Step-size halvings tried before a step is skipped.
    pub max_halvings: u32,
    pub weights: LossWeights,
    pub regions: RegionRules,
    pub metrics: Metrics,
    /// Scale of the initial latent noise.
    pub init_noise: f64,
    /// Width of the Gaussian blur from latent to logits; 0 disables it.
    pub latent_blur: f64,
    /// Scale of the per-step perturbation; decays linearly to 0 over the run.
    pub noise: f64,
    pub seed: u64,
    pub overlap_quantile: f64,
    pub moran: MoranConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            tokens: Vec::new(),
            total_steps: 50,
            optimize_steps: 25,
            step_size: StepSize::Constant(0.5),
            max_halvings: 10,
            weights: LossWeights::default(),
            regions: RegionRules::default(),
            metrics: Metrics::default(),
            init_noise: 0.0,
            latent_blur: 0.0,
            noise: 0.0,
            seed: 0,
            overlap_quantile: 0.7,
            moran: MoranConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Validation("height and width must be >= 1".into()));
        }
        if self.tokens.is_empty() {
            return Err(Error::Validation("at least one token is required".into()));
        }
        crate::attn::validate_tokens(&self.tokens)?;
        if self.optimize_steps > self.total_steps {
            return Err(Error::Validation(format!(
                "optimize_steps ({}) exceeds total_steps ({})",
                self.optimize_steps, self.total_steps
            )));
        }
        self.step_size.validate()?;
        self.weights.validate()?;
        self.regions.resolve(0, self.optimize_steps.max(1))?;
        if !(self.noise >= 0.0 && self.init_noise >= 0.0) {
            return Err(Error::Validation("noise scales must be >= 0".into()));
        }
        if !(self.latent_blur >= 0.0 && self.latent_blur.is_finite()) {
            return Err(Error::Validation(
                "latent_blur must be finite and >= 0".into(),
            ));
        }
        if !(self.overlap_quantile > 0.0 && self.overlap_quantile < 1.0) {
            return Err(Error::Validation(
                "overlap_quantile must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn region_configs(&self, step: usize) -> Result<RegionConfigs> {
        self.regions.resolve(step, self.optimize_steps.max(1))
    }

    pub fn objective(&self, step: usize) -> Result<Objective> {
        Ok(Objective {
            tokens: self.tokens.clone(),
            weights: self.weights,
            regions: self.region_configs(step)?,
            metrics: self.metrics,
        })
    }
}

/// Loss and spatial statistics of one attention stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub loss: LossBreakdown,
    /// Region centroids for subject and attribute tokens, in placement order.
    pub region_centroids: BTreeMap<TokenId, Vec<Coord>>,
    /// Mean pairwise region-centroid distance, subjects and attributes.
    pub centroid_spread: BTreeMap<TokenId, f64>,
    /// Whole-map centroids of subjects.
    pub map_centroids: BTreeMap<TokenId, Coord>,
    /// `None` when a subject map is constant.
    pub morans_i: BTreeMap<TokenId, Option<f64>>,
    pub max_activation: BTreeMap<TokenId, f64>,
    /// Mean over subject pairs of `d / d_max`; 0 with fewer than two subjects.
    pub d_over_dmax: f64,
    /// Mean over subject pairs of the top-mass overlap; 0 with fewer than two subjects.
    pub overlap_ratio: f64,
    pub normalization_error: f64,
}

impl Snapshot {
    pub fn measure(
        stack: &AttentionStack,
        objective: &Objective,
        selection: &Selection,
        quantile: f64,
        moran: MoranConfig,
    ) -> Result<Self> {
        let loss = evaluate(stack, objective, selection)?;
        let maps = stack.maps();
        let mut snap = Snapshot {
            loss,
            region_centroids: BTreeMap::new(),
            centroid_spread: BTreeMap::new(),
            map_centroids: BTreeMap::new(),
            morans_i: BTreeMap::new(),
            max_activation: BTreeMap::new(),
            d_over_dmax: 0.0,
            overlap_ratio: 0.0,
            normalization_error: if stack.normalized {
                stack.normalization_error()
            } else {
                0.0
            },
        };
        for (i, spec) in objective.tokens.iter().enumerate() {
            if objective.region_config(spec).is_none() {
                continue;
            }
            let regions = selection.regions(i, &maps[i]);
            snap.region_centroids.insert(
                spec.id.clone(),
                regions.iter().filter_map(|r| r.centroid).collect(),
            );
            if !regions.is_empty() {
                snap.centroid_spread
                    .insert(spec.id.clone(), centroid_spread(&regions)?);
            }
            if spec.is_subject() {
                snap.map_centroids
                    .insert(spec.id.clone(), maps[i].centroid()?);
                snap.morans_i
                    .insert(spec.id.clone(), morans_i(&maps[i], moran).ok());
                snap.max_activation
                    .insert(spec.id.clone(), crate::attn::max_activation(&maps[i]).1);
            }
        }
        let subjects = objective.subject_indices();
        let mut pairs = 0usize;
        for (a, &i) in subjects.iter().enumerate() {
            for &k in &subjects[a + 1..] {
                pairs += 1;
                let d = maps[i].centroid()?.distance(&maps[k].centroid()?);
                snap.d_over_dmax += d / maps[i].max_distance();
                snap.overlap_ratio += overlap_ratio(&maps[i], &maps[k], quantile)?;
            }
        }
        if pairs > 0 {
            snap.d_over_dmax /= pairs as f64;
            snap.overlap_ratio /= pairs as f64;
        }
        Ok(snap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub optimized: bool,
    /// Norm of dL/dz; 0 on unguided steps.
    pub grad_norm: f64,
    /// Step size actually applied; 0 when the step was skipped or unguided.
    pub alpha: f64,
    pub halvings: u32,
    /// State seen at the start of the step, before the update.
    pub state: Snapshot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    /// Attention stack seen at the start of each step.
    pub stacks: Vec<AttentionStack>,
    /// State after the last step.
    pub final_state: Snapshot,
    pub final_stack: AttentionStack,
    pub final_latent: Latent,
}

fn measure_latent(
    latent: &Latent,
    cfg: &SimConfig,
    objective: &Objective,
) -> Result<(AttentionStack, Selection, Snapshot)> {
    let stack = latent.stack()?;
    let selection = Selection::compute(&stack, objective)?;
    let snap = Snapshot::measure(
        &stack,
        objective,
        &selection,
        cfg.overlap_quantile,
        cfg.moran,
    )?;
    Ok((stack, selection, snap))
}

fn fresh_total(latent: &Latent, objective: &Objective) -> Result<f64> {
    let stack = latent.stack()?;
    let selection = Selection::compute(&stack, objective)?;
    Ok(evaluate(&stack, objective, &selection)?.total)
}

/// Advances `latent` by one step. Guided steps take `z - alpha * dL/dz` with
/// `alpha` halved (up to `max_halvings` times) until the loss, re-measured with
/// fresh region placement, does not exceed the current loss; if no halving
/// works the latent is left unchanged. Noise, when enabled, is added after.
pub fn sim_step(latent: &Latent, cfg: &SimConfig) -> Result<(Latent, StepRecord)> {
    let t = latent.step;
    if t >= cfg.total_steps {
        return Err(Error::Validation(format!(
            "step {t} is past the last step {}",
            cfg.total_steps
        )));
    }
    let objective = cfg.objective(t)?;
    let (stack, selection, state) = measure_latent(latent, cfg, &objective)?;
    let mut next = latent.clone();
    let mut record = StepRecord {
        step: t,
        optimized: false,
        grad_norm: 0.0,
        alpha: 0.0,
        halvings: 0,
        state,
    };

    if t < cfg.optimize_steps {
        record.optimized = true;
        let mut grad = softmax_backward(&stack, &gradient_with(&stack, &objective, &selection)?);
        for plane in grad.planes.iter_mut() {
            *plane = gaussian_blur(plane, latent.height, latent.width, latent.blur);
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                step: t,
                detail: format!(
                    "gradient has non-finite entries; loss {:?}",
                    record.state.loss
                ),
            });
        }
        record.grad_norm = grad.norm();
        if record.grad_norm > 0.0 {
            let current = record.state.loss.total;
            let mut alpha = cfg.step_size.at(t);
            for halving in 0..=cfg.max_halvings {
                let mut cand = latent.clone();
                for (plane, g) in cand.values.iter_mut().zip(&grad.planes) {
                    for (z, gz) in plane.iter_mut().zip(g) {
                        *z -= alpha * gz;
                    }
                }
                if fresh_total(&cand, &objective)? <= current {
                    next = cand;
                    record.alpha = alpha;
                    record.halvings = halving;
                    break;
                }
                record.halvings = halving;
                alpha *= 0.5;
            }
        }
    }

    if cfg.noise > 0.0 {
        let scale = cfg.noise * (1.0 - t as f64 / cfg.total_steps as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(t as u64 + 1);
        for plane in next.values.iter_mut() {
            for z in plane.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *z += scale * e;
            }
        }
    }
    if next.values.iter().flatten().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite {
            step: t,
            detail: "latent became non-finite".into(),
        });
    }
    next.step = t + 1;
    Ok((next, record))
}

/// Runs every step from a fresh latent and returns the full trajectory.
pub fn run(cfg: &SimConfig, blobs: &BlobSpec) -> Result<Trajectory> {
    cfg.validate()?;
    let mut latent = init_latent(
        cfg.height,
        cfg.width,
        &cfg.tokens,
        blobs,
        cfg.init_noise,
        cfg.seed,
    )?
    .with_blur(cfg.latent_blur);
    let mut records = Vec::with_capacity(cfg.total_steps);
    let mut stacks = Vec::with_capacity(cfg.total_steps);
    for _ in 0..cfg.total_steps {
        let (next, record) = sim_step(&latent, cfg)?;
        stacks.push(latent.stack()?);
        records.push(record);
        latent = next;
    }
    let objective = cfg.objective(latent.step)?;
    let (final_stack, _, final_state) = measure_latent(&latent, cfg, &objective)?;
    Ok(Trajectory {
        records,
        stacks,
        final_state,
        final_stack,
        final_latent: latent,
    })
}
