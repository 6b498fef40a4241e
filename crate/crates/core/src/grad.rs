//! Analytic gradients of the total loss, the softmax chain rule to latent
//! logits, and a central-difference checker.
//!
//! Region masks and argmax cells are taken from the unperturbed point and held
//! fixed: the gradient is exact for the loss with those selections frozen.

use serde::{Deserialize, Serialize};

use crate::attn::{AttentionMap, AttentionStack, Cell, Coord, TokenId};
use crate::error::{Error, Result};
use crate::losses::{cosine, evaluate, MetricKind, Objective, Selection};
use crate::regions::GroupingRegion;

/// Guard inside `sqrt(dh^2 + dw^2 + eps^2)` when differentiating distances.
pub const DISTANCE_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wrt {
    AttentionValues,
    LatentLogits,
}

/// Token-major gradient planes shaped like the stack they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<TokenId>,
    pub planes: Vec<Vec<f64>>,
    pub wrt: Wrt,
}

impl GradientField {
    pub fn zeros(height: usize, width: usize, tokens: Vec<TokenId>, wrt: Wrt) -> Self {
        let planes = vec![vec![0.0; height * width]; tokens.len()];
        Self {
            height,
            width,
            tokens,
            planes,
            wrt,
        }
    }

    pub fn get(&self, token: usize, cell: Cell) -> f64 {
        self.planes[token][cell.row * self.width + cell.col]
    }

    pub fn norm(&self) -> f64 {
        self.planes
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.planes.iter().flatten().all(|g| g.is_finite())
    }
}

fn guarded_unit(from: Coord, to: Coord) -> (f64, f64) {
    let (dh, dw) = (from.h - to.h, from.w - to.w);
    let d = (dh * dh + dw * dw + DISTANCE_GUARD * DISTANCE_GUARD).sqrt();
    (dh / d, dw / d)
}

/// Pushes an upstream gradient on a weighted centroid back onto the cells:
/// `dc/dv_j = (x_j - c) / S`.
fn centroid_backward<'a>(
    cells: impl Iterator<Item = (Cell, f64)> + Clone + 'a,
    centroid: Coord,
    upstream: (f64, f64),
    width: usize,
    out: &mut [f64],
) {
    let mass: f64 = cells.clone().map(|(_, v)| v).sum();
    for (cell, _) in cells {
        let g = upstream.0 * (cell.row as f64 - centroid.h)
            + upstream.1 * (cell.col as f64 - centroid.w);
        out[cell.row * width + cell.col] += g / mass;
    }
}

fn aggregation_backward(
    regions: &[GroupingRegion],
    metric: MetricKind,
    scale: f64,
    map: &AttentionMap,
    out: &mut [f64],
) -> Result<()> {
    let n = regions.len();
    if n < 2 || scale == 0.0 {
        return Ok(());
    }
    match metric {
        MetricKind::Euclidean => {
            let centroids = regions
                .iter()
                .map(|r| r.centroid())
                .collect::<Result<Vec<_>>>()?;
            for (i, region) in regions.iter().enumerate() {
                // every unordered pair appears twice in the loss
                let (mut gh, mut gw) = (0.0, 0.0);
                for k in (0..n).filter(|&k| k != i) {
                    let (uh, uw) = guarded_unit(centroids[i], centroids[k]);
                    gh += 2.0 * uh;
                    gw += 2.0 * uw;
                }
                centroid_backward(
                    region.cells.iter().copied(),
                    centroids[i],
                    (scale * gh, scale * gw),
                    map.width(),
                    out,
                );
            }
        }
        MetricKind::Cosine => {
            let norms: Vec<f64> = regions
                .iter()
                .map(|r| r.disk.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            for (i, region) in regions.iter().enumerate() {
                let mut g = vec![0.0; region.disk.len()];
                for k in (0..n).filter(|&k| k != i) {
                    let other = &regions[k];
                    let cos = cosine(&region.disk, &other.disk)?;
                    for (s, gs) in g.iter_mut().enumerate() {
                        let d_cos = other.disk[s] / (norms[i] * norms[k])
                            - cos * region.disk[s] / (norms[i] * norms[i]);
                        *gs -= 2.0 * d_cos;
                    }
                }
                for (slot, gs) in region
                    .mask
                    .slots(map.height(), map.width())
                    .into_iter()
                    .zip(g)
                {
                    if let Some(cell) = slot {
                        out[cell.row * map.width() + cell.col] += scale * gs;
                    }
                }
            }
        }
    }
    Ok(())
}

fn isolation_backward(
    m: &AttentionMap,
    n: &AttentionMap,
    metric: MetricKind,
    scale: f64,
    out_m: &mut [f64],
    out_n: &mut [f64],
) -> Result<()> {
    if scale == 0.0 {
        return Ok(());
    }
    match metric {
        MetricKind::Euclidean => {
            let (cm, cn) = (m.centroid()?, n.centroid()?);
            let (uh, uw) = guarded_unit(cm, cn);
            // d(1 - d/d_max)/d c_m = -u / d_max
            let k = scale / m.max_distance();
            centroid_backward(m.cells(), cm, (-k * uh, -k * uw), m.width(), out_m);
            centroid_backward(n.cells(), cn, (k * uh, k * uw), n.width(), out_n);
        }
        MetricKind::Cosine => {
            let cos = cosine(m.values(), n.values())?;
            let nm = m.values().iter().map(|x| x * x).sum::<f64>().sqrt();
            let nn = n.values().iter().map(|x| x * x).sum::<f64>().sqrt();
            for p in 0..m.len() {
                let (a, b) = (m.values()[p], n.values()[p]);
                out_m[p] += scale * (b / (nm * nn) - cos * a / (nm * nm));
                out_n[p] += scale * (a / (nm * nn) - cos * b / (nn * nn));
            }
        }
    }
    Ok(())
}

/// Gradient of the total loss with respect to attention values, with the
/// discrete choices in `selection` held fixed.
pub fn gradient_with(
    stack: &AttentionStack,
    objective: &Objective,
    selection: &Selection,
) -> Result<GradientField> {
    objective.check(stack)?;
    let w = &objective.weights;
    let maps = stack.maps();
    let mut field = GradientField::zeros(
        stack.height(),
        stack.width(),
        stack.token_ids(),
        Wrt::AttentionValues,
    );
    let subjects = objective.subject_indices();
    let attributes = objective.attribute_indices();

    let ns = subjects.len().max(1) as f64;
    for &i in &subjects {
        let regions = selection.regions(i, &maps[i]);
        aggregation_backward(
            &regions,
            objective.metrics.aggregation,
            w.agg_sub / ns,
            &maps[i],
            &mut field.planes[i],
        )?;
        if let Some(cell) = selection.tokens[i].argmax {
            field.planes[i][cell.row * stack.width() + cell.col] -= w.max / ns;
        }
    }

    let na = attributes.len().max(1) as f64;
    for &i in &attributes {
        let regions = selection.regions(i, &maps[i]);
        aggregation_backward(
            &regions,
            objective.metrics.aggregation,
            w.agg_attr / na,
            &maps[i],
            &mut field.planes[i],
        )?;
    }

    let npairs = subjects.len() * subjects.len().saturating_sub(1) / 2;
    if npairs > 0 {
        let scale = w.iso / npairs as f64;
        for (a, &i) in subjects.iter().enumerate() {
            for &k in &subjects[a + 1..] {
                let mut gi = std::mem::take(&mut field.planes[i]);
                let mut gk = std::mem::take(&mut field.planes[k]);
                isolation_backward(
                    &maps[i],
                    &maps[k],
                    objective.metrics.isolation,
                    scale,
                    &mut gi,
                    &mut gk,
                )?;
                field.planes[i] = gi;
                field.planes[k] = gk;
            }
        }
    }
    Ok(field)
}

/// Gradient of the total loss with respect to attention values. Regions and
/// argmax cells are placed on `stack` first and then treated as constants.
pub fn loss_gradient(stack: &AttentionStack, objective: &Objective) -> Result<GradientField> {
    let selection = Selection::compute(stack, objective)?;
    gradient_with(stack, objective, &selection)
}

/// Chains an attention-value gradient through the per-position softmax:
/// `dL/dz[p, t] = A[p, t] * (g[p, t] - sum_t' g[p, t'] A[p, t'])`.
pub fn softmax_backward(stack: &AttentionStack, upstream: &GradientField) -> GradientField {
    let n = stack.height() * stack.width();
    let mut out = GradientField::zeros(
        stack.height(),
        stack.width(),
        stack.token_ids(),
        Wrt::LatentLogits,
    );
    for p in 0..n {
        let dot: f64 = stack
            .maps()
            .iter()
            .zip(&upstream.planes)
            .map(|(m, g)| m.values()[p] * g[p])
            .sum();
        for (t, m) in stack.maps().iter().enumerate() {
            let a = m.values()[p];
            out.planes[t][p] = a * (upstream.planes[t][p] - dot);
        }
    }
    out
}

/// Gradient of the total loss with respect to latent logits
/// (`[token][row * W + col]`), through the per-position softmax.
pub fn latent_gradient(
    height: usize,
    width: usize,
    logits: &[Vec<f64>],
    objective: &Objective,
) -> Result<GradientField> {
    let ids: Vec<TokenId> = objective.tokens.iter().map(|t| t.id.clone()).collect();
    let stack = AttentionStack::from_logits(&ids, height, width, 0, logits)?;
    let upstream = loss_gradient(&stack, objective)?;
    Ok(softmax_backward(&stack, &upstream))
}

/// Central differences `(f(x + eps e) - f(x - eps e)) / (2 eps)` for every
/// coordinate of the token-major `point`.
pub fn finite_diff_gradient<F>(eval: F, point: &[Vec<f64>], eps: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Vec<f64>]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Validation(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut work = point.to_vec();
    let mut out: Vec<Vec<f64>> = point.iter().map(|p| vec![0.0; p.len()]).collect();
    for t in 0..point.len() {
        for i in 0..point[t].len() {
            let x = point[t][i];
            work[t][i] = x + eps;
            let up = eval(&work)?;
            work[t][i] = x - eps;
            let down = eval(&work)?;
            work[t][i] = x;
            if !(up.is_finite() && down.is_finite()) {
                return Err(Error::Validation(format!(
                    "non-finite evaluation at token {t}, index {i}"
                )));
            }
            out[t][i] = (up - down) / (2.0 * eps);
        }
    }
    Ok(out)
}

/// Deliberate corruption of the analytic gradient, for exercising the checker.
#[derive(Debug, Clone, PartialEq)]
pub struct FaultInjection {
    pub token: usize,
    pub cell: Cell,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub rel_tol: f64,
    /// Denominator floor in the relative error, so that cells whose true
    /// gradient is (near) zero are judged on absolute error instead.
    pub abs_floor: f64,
    pub wrt: Wrt,
    pub fault: Option<FaultInjection>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            rel_tol: 1e-5,
            abs_floor: 1e-2,
            wrt: Wrt::AttentionValues,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCell {
    pub token: TokenId,
    pub cell: Cell,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub worst: Option<WorstCell>,
    pub cells_checked: usize,
    pub pass: bool,
}

/// Error of one analytic/numeric pair: `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient against central differences on the point
/// given by `logits` (softmaxed into a stack first).
///
/// With `wrt = AttentionValues` the attention stack itself is perturbed; with
/// `LatentLogits` the logits are. Either way the selection is frozen from the
/// unperturbed stack.
pub fn gradcheck(
    height: usize,
    width: usize,
    logits: &[Vec<f64>],
    objective: &Objective,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let ids: Vec<TokenId> = objective.tokens.iter().map(|t| t.id.clone()).collect();
    let stack = AttentionStack::from_logits(&ids, height, width, 0, logits)?;
    let selection = Selection::compute(&stack, objective)?;
    let value_grad = gradient_with(&stack, objective, &selection)?;

    let (mut analytic, numeric) = match config.wrt {
        Wrt::AttentionValues => {
            let eval = |planes: &[Vec<f64>]| -> Result<f64> {
                let s = stack.with_planes(planes.to_vec())?;
                Ok(evaluate(&s, objective, &selection)?.total)
            };
            (
                value_grad,
                finite_diff_gradient(eval, &stack.planes(), config.eps)?,
            )
        }
        Wrt::LatentLogits => {
            let eval = |planes: &[Vec<f64>]| -> Result<f64> {
                let s = AttentionStack::from_logits(&ids, height, width, 0, planes)?;
                Ok(evaluate(&s, objective, &selection)?.total)
            };
            (
                softmax_backward(&stack, &value_grad),
                finite_diff_gradient(eval, logits, config.eps)?,
            )
        }
    };
    if let Some(f) = &config.fault {
        analytic.planes[f.token][f.cell.row * width + f.cell.col] += f.delta;
    }
    Ok(compare(&analytic, &numeric, config))
}

/// Cell-by-cell comparison of two gradient fields.
pub fn compare(
    analytic: &GradientField,
    numeric: &[Vec<f64>],
    config: &GradCheckConfig,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst: None,
        cells_checked: 0,
        pass: true,
    };
    for (t, (a_plane, n_plane)) in analytic.planes.iter().zip(numeric).enumerate() {
        for (i, (&a, &n)) in a_plane.iter().zip(n_plane).enumerate() {
            report.cells_checked += 1;
            let abs = (a - n).abs();
            let rel = relative_error(a, n, config.abs_floor);
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() || rel.is_nan() {
                report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = Some(WorstCell {
                    token: analytic.tokens[t].clone(),
                    cell: Cell::new(i / analytic.width, i % analytic.width),
                    analytic: a,
                    numeric: n,
                });
            }
        }
    }
    report.pass = report.max_rel_err <= config.rel_tol;
    report
}
