//! The meta-aggregator: client weighting on the probability simplex,
//! shrunk weighted aggregation, temperature adaptation, the sample-share
//! baseline and diagnostics for the convergence and optimality results.
//!
//! The iterative solvers minimize
//!
//! ```text
//! Φ(w) = Σ_k w_k·E_k + τ·Σ_k w_k·ln w_k    over the simplex,
//! ```
//!
//! whose exact minimizer is `softmax(−E/τ)`. With `τ = 1/α` the closed-form
//! weights and both iterative routes target the same point.

use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::datagen::ClientDataset;
use crate::error::{Error, Result};
use crate::metafeatures::{composite_errors, CompositeErrorConfig, MetaFeatures};
use crate::models::{local_loss, ModelSpec, PerformanceMetrics};
use crate::numerics::{project_simplex, softmax_neg, weighted_sum, ParamVector, Rng, WeightVector};

/// Floor applied to weights before taking logs in the projected solver.
pub const BOUNDARY_CLAMP: f64 = 1e-12;

/// Smallest fraction of `η` the projected solver's step may shrink to.
const MIN_STEP_FRACTION: f64 = 1e-12;

/// Relative increase of `Φ` the projected solver treats as rounding noise.
const PHI_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaParams {
    /// Softmax temperature of the closed-form weights.
    pub alpha: f64,
    /// Shrinkage of the aggregate toward zero.
    #[serde(default)]
    pub lambda: f64,
    /// Entropic strength of the iterative objective. `None` ties it to `1/α`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Step size of the iterative solvers.
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub c: CompositeErrorConfig,
}

fn default_eta() -> f64 {
    0.1
}

fn default_max_iters() -> usize {
    10_000
}

fn default_tol() -> f64 {
    1e-10
}

impl MetaParams {
    pub fn with_alpha(alpha: f64) -> Self {
        MetaParams {
            alpha,
            lambda: 0.0,
            tau: None,
            eta: default_eta(),
            max_iters: default_max_iters(),
            tol: default_tol(),
            c: CompositeErrorConfig::default(),
        }
    }

    /// `τ` in use: the explicit value, else `1/α`; `None` when `α = 0` and
    /// no explicit value is set, meaning the entropic term dominates and
    /// the optimum is uniform.
    pub fn effective_tau(&self) -> Option<f64> {
        match self.tau {
            Some(t) => Some(t),
            None if self.alpha > 0.0 => Some(1.0 / self.alpha),
            None => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.alpha) {
            return Err(Error::invalid("meta.alpha must be >= 0"));
        }
        if !nonneg(self.lambda) {
            return Err(Error::invalid("meta.lambda must be >= 0"));
        }
        if let Some(t) = self.tau {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::invalid("meta.tau must be > 0"));
            }
        }
        // η = 0 is accepted: it makes the solver step the identity map
        if !nonneg(self.eta) {
            return Err(Error::invalid("meta.eta must be >= 0"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("meta.max_iters must be >= 1"));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::invalid("meta.tol must be in (0,1)"));
        }
        self.c.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// Multiplicative (exponentiated-gradient) update with renormalization.
    Mirror,
    /// Gradient step followed by Euclidean projection onto the simplex.
    Projected,
}

impl Solver {
    fn name(self) -> &'static str {
        match self {
            Solver::Mirror => "mirror",
            Solver::Projected => "projected",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    ClosedForm,
    IterativeMirror,
    IterativeProjected,
}

/// What one client submits to the server after a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub client_id: usize,
    pub theta: ParamVector,
    pub perf: PerformanceMetrics,
    pub meta: MetaFeatures,
    pub n_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationOutcome {
    pub theta_g: ParamVector,
    pub weights: WeightVector,
    pub errors: Vec<f64>,
    pub phi_value: f64,
    pub solver_iters: usize,
    pub global_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOutcome {
    pub weights: WeightVector,
    pub iters: usize,
    /// Last `‖w⁺ − w‖∞`.
    pub residual: f64,
    /// Every step's `‖w⁺ − w‖∞`, in order.
    pub residuals: Vec<f64>,
}

fn check_errors(errors: &[f64]) -> Result<()> {
    if errors.is_empty() {
        return Err(Error::EmptyCohort);
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFiniteErrorMetric);
    }
    Ok(())
}

fn check_pair(w: &WeightVector, errors: &[f64], tau: f64) -> Result<()> {
    check_errors(errors)?;
    if w.len() != errors.len() {
        return Err(Error::LengthMismatch {
            what: "weights",
            expected: errors.len(),
            found: w.len(),
        });
    }
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::invalid(format!("tau must be finite and >= 0, got {tau}")));
    }
    Ok(())
}

/// `w_k ∝ exp(−α·E_k)`.
pub fn weights_closed_form(errors: &[f64], alpha: f64) -> Result<WeightVector> {
    softmax_neg(errors, alpha)
}

/// `Φ(w) = Σ w_k E_k + τ Σ w_k ln w_k`, with `0·ln 0 = 0`.
pub fn phi_objective(w: &WeightVector, errors: &[f64], tau: f64) -> Result<f64> {
    check_pair(w, errors, tau)?;
    let linear: f64 = w.iter().zip(errors).map(|(w, e)| w * e).sum();
    let neg_entropy: f64 = w.iter().filter(|w| **w > 0.0).map(|w| w * w.ln()).sum();
    let phi = linear + tau * neg_entropy;
    if !phi.is_finite() {
        return Err(Error::NonFinite("objective"));
    }
    Ok(phi)
}

/// `∂Φ/∂w_k = E_k + τ(1 + ln w_k)`; undefined on the simplex boundary.
pub fn phi_gradient(w: &WeightVector, errors: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_pair(w, errors, tau)?;
    if w.iter().any(|w| *w <= 0.0) {
        return Err(Error::BoundaryGradient);
    }
    Ok(gradient_at(w, errors, tau))
}

fn gradient_at(w: &[f64], errors: &[f64], tau: f64) -> Vec<f64> {
    w.iter()
        .zip(errors)
        .map(|(w, e)| e + tau * (1.0 + w.ln()))
        .collect()
}

fn phi_value_raw(w: &[f64], errors: &[f64], tau: f64) -> f64 {
    w.iter()
        .zip(errors)
        .map(|(w, e)| w * e + if *w > 0.0 { tau * w * w.ln() } else { 0.0 })
        .sum()
}

fn log_normalize(log_w: &mut [f64]) {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + log_w.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    log_w.iter_mut().for_each(|l| *l -= lse);
}

/// One mirror step `w ← normalize(w·exp(−η∇Φ))`, carried out on `ln w`.
fn mirror_step(log_w: &[f64], errors: &[f64], tau: f64, eta: f64) -> Vec<f64> {
    let mut next: Vec<f64> = log_w
        .iter()
        .zip(errors)
        .map(|(l, e)| l - eta * (e + tau * (1.0 + l)))
        .collect();
    log_normalize(&mut next);
    next
}

/// Minimizes `Φ` over the simplex from the uniform point until the step
/// residual `‖w⁺ − w‖∞` drops below `mp.tol` or `mp.max_iters` steps run.
///
/// The projected solver halves its step whenever a full step would raise
/// `Φ`, and keeps the reduced step from then on.
pub fn weights_iterative(errors: &[f64], mp: &MetaParams, solver: Solver) -> Result<SolverOutcome> {
    check_errors(errors)?;
    mp.validate()?;
    let k = errors.len();
    let uniform = WeightVector::uniform(k)?;
    let tau = match mp.effective_tau() {
        Some(t) if k > 1 => t,
        _ => {
            return Ok(SolverOutcome {
                weights: uniform,
                iters: 0,
                residual: 0.0,
                residuals: Vec::new(),
            })
        }
    };

    let mut w = uniform.into_inner();
    let mut log_w: Vec<f64> = w.iter().map(|x| x.ln()).collect();
    let mut residuals = Vec::new();
    let mut step_size = mp.eta;
    for iteration in 1..=mp.max_iters {
        let next = match solver {
            Solver::Mirror => {
                log_w = mirror_step(&log_w, errors, tau, mp.eta);
                log_w.iter().map(|l| l.exp()).collect::<Vec<f64>>()
            }
            Solver::Projected => {
                let clamped: Vec<f64> = w.iter().map(|x| x.max(BOUNDARY_CLAMP)).collect();
                let grad = gradient_at(&clamped, errors, tau);
                let current = phi_value_raw(&w, errors, tau);
                loop {
                    let step: Vec<f64> =
                        w.iter().zip(&grad).map(|(x, g)| x - step_size * g).collect();
                    if step.iter().any(|x| !x.is_finite()) {
                        return Err(Error::Divergence {
                            solver: solver.name(),
                            iteration,
                        });
                    }
                    let candidate = project_simplex(&step)?.into_inner();
                    // halve the step while it would increase Φ beyond rounding noise
                    let slack = PHI_SLACK * (1.0 + current.abs());
                    if phi_value_raw(&candidate, errors, tau) <= current + slack
                        || step_size <= mp.eta * MIN_STEP_FRACTION
                    {
                        break candidate;
                    }
                    step_size *= 0.5;
                }
            }
        };
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                solver: solver.name(),
                iteration,
            });
        }
        let residual = next
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        w = next;
        residuals.push(residual);
        if residual < mp.tol {
            break;
        }
    }
    let iters = residuals.len();
    let residual = residuals.last().copied().unwrap_or(0.0);
    Ok(SolverOutcome {
        weights: WeightVector::from_mass(w)?,
        iters,
        residual,
        residuals,
    })
}

fn check_cohort(reports: &[ClientReport]) -> Result<usize> {
    let first = reports.first().ok_or(Error::EmptyCohort)?;
    let dim = first.theta.dim();
    for (index, r) in reports.iter().enumerate() {
        if r.theta.dim() != dim {
            return Err(Error::DimensionMismatch {
                index,
                expected: dim,
                found: r.theta.dim(),
            });
        }
        if r.n_k == 0 {
            return Err(Error::invalid(format!("client {} reports n_k = 0", r.client_id)));
        }
    }
    Ok(dim)
}

/// `θ_g = (Σ w_k θ_k) / (1 + λ)`, the minimizer of
/// `Σ w_k‖θ − θ_k‖² + λ‖θ‖²`.
pub fn aggregate(reports: &[ClientReport], w: &WeightVector, lambda: f64) -> Result<ParamVector> {
    check_cohort(reports)?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::invalid("lambda must be >= 0"));
    }
    let thetas: Vec<ParamVector> = reports.iter().map(|r| r.theta.clone()).collect();
    let sum = weighted_sum(&thetas, w)?;
    if lambda == 0.0 {
        Ok(sum)
    } else {
        sum.scaled(1.0 / (1.0 + lambda))
    }
}

/// `Σ w_k·L_k(θ_k) + λ‖θ_g‖²`, with `L_k` the reported validation loss.
pub fn global_loss(
    reports: &[ClientReport],
    w: &WeightVector,
    theta_g: &ParamVector,
    lambda: f64,
) -> Result<f64> {
    if reports.len() != w.len() {
        return Err(Error::LengthMismatch {
            what: "weights",
            expected: reports.len(),
            found: w.len(),
        });
    }
    let loss: f64 = reports
        .iter()
        .zip(w.iter())
        .map(|(r, w)| w * r.perf.val_loss)
        .sum::<f64>()
        + lambda * theta_g.norm_sq();
    if !loss.is_finite() {
        return Err(Error::NonFinite("global loss"));
    }
    Ok(loss)
}

/// Sample-share weights `n_k / n`.
pub fn fedavg_weights(n: &[usize]) -> Result<WeightVector> {
    if n.is_empty() {
        return Err(Error::EmptyCohort);
    }
    if n.contains(&0) {
        return Err(Error::invalid("every client needs n_k >= 1"));
    }
    let total: usize = n.iter().sum();
    WeightVector::new(n.iter().map(|&k| k as f64 / total as f64).collect())
}

/// Composite errors for the cohort from reported losses and meta-features.
pub fn cohort_errors(reports: &[ClientReport], cfg: &CompositeErrorConfig) -> Result<Vec<f64>> {
    let losses: Vec<f64> = reports.iter().map(|r| r.perf.val_loss).collect();
    let metas: Vec<MetaFeatures> = reports.iter().map(|r| r.meta).collect();
    composite_errors(&losses, &metas, cfg)
}

/// Full server step: composite errors, weights, shrunk aggregate and the
/// value of the global objective.
pub fn meta_agg(
    reports: &[ClientReport],
    mp: &MetaParams,
    mode: AggregationMode,
) -> Result<AggregationOutcome> {
    check_cohort(reports)?;
    let errors = cohort_errors(reports, &mp.c)?;
    meta_agg_with_errors(reports, errors, mp, mode)
}

/// [`meta_agg`] with precomputed composite errors.
pub fn meta_agg_with_errors(
    reports: &[ClientReport],
    errors: Vec<f64>,
    mp: &MetaParams,
    mode: AggregationMode,
) -> Result<AggregationOutcome> {
    check_cohort(reports)?;
    mp.validate()?;
    if errors.len() != reports.len() {
        return Err(Error::LengthMismatch {
            what: "errors",
            expected: reports.len(),
            found: errors.len(),
        });
    }
    let (weights, solver_iters) = match mode {
        AggregationMode::ClosedForm => (weights_closed_form(&errors, mp.alpha)?, 0),
        AggregationMode::IterativeMirror => {
            let out = weights_iterative(&errors, mp, Solver::Mirror)?;
            (out.weights, out.iters)
        }
        AggregationMode::IterativeProjected => {
            let out = weights_iterative(&errors, mp, Solver::Projected)?;
            (out.weights, out.iters)
        }
    };
    let phi_value = phi_objective(&weights, &errors, mp.effective_tau().unwrap_or(0.0))?;
    let theta_g = aggregate(reports, &weights, mp.lambda)?;
    let global_loss = global_loss(reports, &weights, &theta_g, mp.lambda)?;
    Ok(AggregationOutcome {
        theta_g,
        weights,
        errors,
        phi_value,
        solver_iters,
        global_loss,
    })
}

/// Loss on `global_val` of the aggregate built with each candidate `α`.
/// Candidates are returned sorted ascending with duplicates removed.
pub fn score_alphas(
    mp: &MetaParams,
    candidates: &[f64],
    reports: &[ClientReport],
    spec: &ModelSpec,
    global_val: &ClientDataset,
) -> Result<Vec<(f64, f64)>> {
    if candidates.is_empty() {
        return Err(Error::invalid("alpha grid is empty"));
    }
    if let Some(a) = candidates.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(Error::invalid(format!("alpha candidate {a} must be finite and >= 0")));
    }
    let mut grid = candidates.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let errors = cohort_errors(reports, &mp.c)?;
    grid.into_iter()
        .map(|alpha| {
            let w = weights_closed_form(&errors, alpha)?;
            let theta = aggregate(reports, &w, mp.lambda)?;
            Ok((alpha, local_loss(spec, &theta, global_val)?))
        })
        .collect()
}

/// Grid search over `α` on the server's validation set; ties go to the
/// smallest `α`. Every other knob of `mp` is kept.
pub fn adapt_meta_params(
    mp: &MetaParams,
    candidates: &[f64],
    reports: &[ClientReport],
    spec: &ModelSpec,
    global_val: &ClientDataset,
) -> Result<MetaParams> {
    let scores = score_alphas(mp, candidates, reports, spec, global_val)?;
    let (best, _) = scores
        .iter()
        .copied()
        .fold((f64::NAN, f64::INFINITY), |(ba, bl), (a, l)| {
            if l < bl || ba.is_nan() {
                (a, l)
            } else {
                (ba, bl)
            }
        });
    Ok(MetaParams {
        alpha: best,
        ..mp.clone()
    })
}

/// Hilbert projective distance between two interior simplex points given
/// by their logs: `max ln(w/w′) − min ln(w/w′)`.
fn hilbert_distance_log(a: &[f64], b: &[f64]) -> f64 {
    let (lo, hi) = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)));
    hi - lo
}

/// Largest observed ratio `d(S(w), S(w′)) / d(w, w′)` over `samples`
/// uniformly drawn pairs, where `S` is one mirror step and `d` the Hilbert
/// projective metric on the open simplex. Pairs at distance zero are skipped.
pub fn contraction_estimate(
    errors: &[f64],
    mp: &MetaParams,
    samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    check_errors(errors)?;
    mp.validate()?;
    if samples == 0 {
        return Err(Error::invalid("samples must be >= 1"));
    }
    let k = errors.len();
    if k == 1 {
        return Ok(0.0);
    }
    let step = |log_w: &[f64]| -> Vec<f64> {
        if mp.eta == 0.0 {
            return log_w.to_vec();
        }
        match mp.effective_tau() {
            Some(tau) => mirror_step(log_w, errors, tau, mp.eta),
            None => vec![-(k as f64).ln(); k],
        }
    };
    let draw = |rng: &mut Rng| -> Vec<f64> {
        let mut log_w: Vec<f64> = (0..k)
            .map(|_| {
                let e: f64 = Exp1.sample(rng);
                e.max(f64::MIN_POSITIVE).ln()
            })
            .collect();
        log_normalize(&mut log_w);
        log_w
    };
    let mut sup: f64 = 0.0;
    for _ in 0..samples {
        let a = draw(rng);
        let b = draw(rng);
        let d = hilbert_distance_log(&a, &b);
        if d <= 0.0 {
            continue;
        }
        let ratio = hilbert_distance_log(&step(&a), &step(&b)) / d;
        if !ratio.is_finite() {
            return Err(Error::NonFinite("contraction ratio"));
        }
        sup = sup.max(ratio);
    }
    Ok(sup)
}

/// `Σ w_k·L(θ_k) − L(Σ w_k θ_k)` for an arbitrary loss `L`.
///
/// Both sums are taken relative to the first client, so a cohort of
/// identical parameters yields exactly zero.
pub fn jensen_gap_with<F>(mut loss: F, thetas: &[ParamVector], w: &WeightVector) -> Result<f64>
where
    F: FnMut(&ParamVector) -> Result<f64>,
{
    let anchor = thetas.first().ok_or(Error::EmptyCohort)?;
    let offsets = thetas
        .iter()
        .map(|t| {
            if t.dim() != anchor.dim() {
                return ParamVector::new(t.to_vec());
            }
            ParamVector::new(t.iter().zip(anchor.iter()).map(|(a, b)| a - b).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let shift = weighted_sum(&offsets, w)?;
    let mixed = ParamVector::new(anchor.iter().zip(shift.iter()).map(|(a, s)| a + s).collect())?;
    let base = loss(anchor)?;
    let mut mean = base;
    for (theta, wk) in thetas.iter().zip(w.iter()).skip(1) {
        mean += wk * (loss(theta)? - base);
    }
    Ok(mean - loss(&mixed)?)
}

/// Jensen gap of the mean cross-entropy on `data`; non-negative whenever
/// the model is linear (`hidden_dim == 0`), since the loss is then convex.
pub fn jensen_gap(
    spec: &ModelSpec,
    thetas: &[ParamVector],
    w: &WeightVector,
    data: &ClientDataset,
) -> Result<f64> {
    jensen_gap_with(|theta| local_loss(spec, theta, data), thetas, w)
}

/// `√(2·log_H/m) + √(2·kl_avg/m) + 1/√m`.
pub fn generalization_bound(log_h: f64, m: usize, kl_avg: f64) -> Result<f64> {
    if m == 0 {
        return Err(Error::invalid("sample count m must be >= 1"));
    }
    if !(log_h.is_finite() && log_h >= 0.0 && kl_avg.is_finite() && kl_avg >= 0.0) {
        return Err(Error::invalid("log_H and kl_avg must be finite and >= 0"));
    }
    let m = m as f64;
    Ok((2.0 * log_h / m).sqrt() + (2.0 * kl_avg / m).sqrt() + 1.0 / m.sqrt())
}
