//! Learnable width/depth distributions and their Gumbel-Softmax relaxation.
//!
//! A [`WidthDistribution`] attaches a logit to every candidate channel count
//! of a layer; a [`DepthDistribution`] does the same for the number of layers
//! executed in a stage. Sampling perturbs the log-probabilities with Gumbel
//! noise, tempers them by `tau`, and draws a small subset of candidates whose
//! weights are re-normalized over the subset so that only the sampled
//! fragments take part in the forward pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{cast, from_usize, Scalar};
use crate::tensor::Tensor;

/// Uniform draws are clamped to `[GUMBEL_EPS, 1 - GUMBEL_EPS]` before the
/// double logarithm.
pub const GUMBEL_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct WidthDistribution<T: Scalar> {
    pub logits: Tensor<T>,
    /// Strictly increasing candidate channel counts.
    pub candidates: Vec<usize>,
}

impl<T: Scalar> WidthDistribution<T> {
    /// Uniform distribution (zero logits) over `candidates`.
    pub fn new(candidates: Vec<usize>) -> Result<Self> {
        let n = candidates.len();
        Self::with_logits(candidates, vec![T::zero(); n])
    }

    pub fn with_logits(candidates: Vec<usize>, logits: Vec<T>) -> Result<Self> {
        if candidates.len() < 2 {
            return Err(Error::invalid(
                "width distribution",
                format!("needs at least 2 candidates, got {candidates:?}"),
            ));
        }
        if candidates[0] == 0 || candidates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "width distribution",
                format!("candidates must be positive and strictly increasing: {candidates:?}"),
            ));
        }
        let n = candidates.len();
        Ok(WidthDistribution {
            logits: Tensor::param(logits, &[n])?,
            candidates,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn max_width(&self) -> usize {
        *self.candidates.last().expect("non-empty candidate set")
    }

    /// Candidate probabilities, differentiable w.r.t. the logits.
    pub fn probs(&self) -> Tensor<T> {
        self.logits.softmax().expect("rank-1 logits")
    }

    pub fn prob_values(&self) -> Vec<T> {
        self.probs().to_vec()
    }

    /// Channel count with the highest logit; ties go to the wider candidate.
    pub fn argmax_width(&self) -> usize {
        self.candidates[argmax_prefer_last(&self.logits.data())]
    }

    pub fn soft_sample<R: Rng + ?Sized>(&self, tau: T, rng: &mut R) -> Result<GumbelSoft<T>> {
        gumbel_soft_sample(&self.logits, tau, rng)
    }

    /// Gap between the two largest candidate probabilities.
    pub fn discrepancy(&self) -> T {
        discrepancy(&self.prob_values())
    }
}

/// Distribution over the number of layers (1..=L) executed in a stage.
#[derive(Debug, Clone)]
pub struct DepthDistribution<T: Scalar> {
    pub logits: Tensor<T>,
}

impl<T: Scalar> DepthDistribution<T> {
    pub fn new(layers: usize) -> Result<Self> {
        Self::with_logits(vec![T::zero(); layers])
    }

    pub fn with_logits(logits: Vec<T>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::invalid("depth distribution", "a stage needs at least one layer"));
        }
        let n = logits.len();
        Ok(DepthDistribution {
            logits: Tensor::param(logits, &[n])?,
        })
    }

    /// Number of layers governed.
    pub fn max_depth(&self) -> usize {
        self.logits.numel()
    }

    pub fn probs(&self) -> Tensor<T> {
        self.logits.softmax().expect("rank-1 logits")
    }

    /// Depth with the highest logit; ties go to the deeper option.
    pub fn argmax_depth(&self) -> usize {
        argmax_prefer_last(&self.logits.data()) + 1
    }

    /// Gumbel-Softmax weights over all depths (no subset selection).
    pub fn soft_sample<R: Rng + ?Sized>(&self, tau: T, rng: &mut R) -> Result<Tensor<T>> {
        Ok(gumbel_soft_sample(&self.logits, tau, rng)?.soft)
    }
}

/// Relaxed sample before subset selection.
#[derive(Debug, Clone)]
pub struct GumbelSoft<T: Scalar> {
    /// `(log p + o) / tau`, on the differentiation graph.
    pub scores: Tensor<T>,
    /// `softmax(scores)`.
    pub soft: Tensor<T>,
}

/// Relaxed sample with the selected candidate subset.
#[derive(Debug, Clone)]
pub struct GumbelSample<T: Scalar> {
    pub scores: Tensor<T>,
    pub soft: Tensor<T>,
    /// Distinct selected candidate indices, in draw order.
    pub indices: Vec<usize>,
    /// Soft weights re-normalized over `indices` (same order).
    pub weights: Tensor<T>,
}

/// Perturbs `log softmax(logits)` with fresh Gumbel noise and tempers by `tau`.
///
/// The noise is treated as a constant; gradients flow to `logits` only.
pub fn gumbel_soft_sample<T: Scalar, R: Rng + ?Sized>(
    logits: &Tensor<T>,
    tau: T,
    rng: &mut R,
) -> Result<GumbelSoft<T>> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::invalid(
            "gumbel_soft_sample",
            format!("tau must be positive, got {tau}"),
        ));
    }
    if logits.ndim() != 1 {
        return Err(Error::shape(
            "gumbel_soft_sample",
            format!("logits {:?}", logits.shape()),
        ));
    }
    let n = logits.numel();
    let noise: Vec<T> = (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
            cast(-(-u.ln()).ln())
        })
        .collect();
    let noise = Tensor::new(noise, &[n])?;
    let scores = logits.log_softmax()?.add(&noise)?.scale(T::one() / tau);
    let soft = scores.softmax()?;
    Ok(GumbelSoft { scores, soft })
}

/// Draws `k` distinct indices sequentially with probability proportional to
/// the soft weights (renormalizing over the remaining ones after each draw)
/// and re-normalizes the relaxed weights over the chosen subset.
pub fn sample_subset<T: Scalar, R: Rng + ?Sized>(
    relaxed: GumbelSoft<T>,
    k: usize,
    rng: &mut R,
) -> Result<GumbelSample<T>> {
    let n = relaxed.soft.numel();
    if k == 0 || k > n {
        return Err(Error::invalid("sample_subset", format!("k = {k} with {n} candidates")));
    }
    let mut remaining: Vec<f64> = relaxed.soft.data().iter().map(|v| v.to_f64().unwrap_or(0.0)).collect();
    let mut indices = Vec::with_capacity(k);
    for _ in 0..k {
        indices.push(draw_index(&remaining, rng));
        remaining[*indices.last().unwrap()] = 0.0;
    }
    let weights = relaxed.scores.gather(&indices)?.softmax()?;
    Ok(GumbelSample {
        scores: relaxed.scores,
        soft: relaxed.soft,
        indices,
        weights,
    })
}

/// Index drawn with probability proportional to `weights`; zero entries are
/// never drawn while any positive mass remains.
fn draw_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        // all remaining mass underflowed: fall back to the first unused slot
        return weights.iter().position(|&w| w == 0.0 || w.is_nan()).unwrap_or(0);
    }
    let r = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last_positive = i;
        acc += w;
        if r < acc {
            return i;
        }
    }
    last_positive
}

/// Linear temperature decay from `start` at epoch 0 to `end` at the final epoch.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub total_epochs: usize,
}

impl TemperatureSchedule {
    pub fn new(start: f64, end: f64, total_epochs: usize) -> Result<Self> {
        if !(start > 0.0 && end > 0.0) || total_epochs == 0 {
            return Err(Error::invalid(
                "temperature schedule",
                format!("start {start}, end {end}, epochs {total_epochs}"),
            ));
        }
        Ok(TemperatureSchedule {
            start,
            end,
            total_epochs,
        })
    }

    pub fn value(&self, epoch: usize) -> f64 {
        if self.total_epochs <= 1 {
            return self.start;
        }
        let last = (self.total_epochs - 1) as f64;
        let frac = (epoch as f64 / last).min(1.0);
        self.start + (self.end - self.start) * frac
    }
}

/// Argmax selection for every distribution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchChoice {
    /// Chosen channel count per layer, in network order.
    pub widths: Vec<usize>,
    /// Chosen depth per stage.
    pub depths: Vec<usize>,
}

pub fn derive<T: Scalar>(widths: &[WidthDistribution<T>], depths: &[DepthDistribution<T>]) -> ArchChoice {
    ArchChoice {
        widths: widths.iter().map(|w| w.argmax_width()).collect(),
        depths: depths.iter().map(|d| d.argmax_depth()).collect(),
    }
}

/// `max(p) - second_max(p)`.
pub fn discrepancy<T: Scalar>(probs: &[T]) -> T {
    let mut top = T::neg_infinity();
    let mut second = T::neg_infinity();
    for &p in probs {
        if p > top {
            second = top;
            top = p;
        } else if p > second {
            second = p;
        }
    }
    if second == T::neg_infinity() {
        return T::zero();
    }
    top - second
}

/// Mean discrepancy over a set of width distributions.
pub fn mean_discrepancy<T: Scalar>(widths: &[WidthDistribution<T>]) -> T {
    if widths.is_empty() {
        return T::zero();
    }
    widths.iter().map(|w| w.discrepancy()).sum::<T>() / from_usize(widths.len())
}

fn argmax_prefer_last<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v >= values[best] {
            best = i;
        }
    }
    best
}
