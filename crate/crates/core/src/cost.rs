//! FLOP accounting and the cost-constrained validation objective.
//!
//! A multiply-add counts as 2 FLOPs; bias and batch-norm costs are ignored.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::supernet::{ArchParams, DerivedArch, SuperNetSpec};
use crate::tensor::Tensor;

/// Target FLOPs `R`, toleration ratio `t`, and loss weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub target: f64,
    pub toleration: f64,
    pub lambda: f64,
}

impl CostSpec {
    pub fn new(target: f64, toleration: f64, lambda: f64) -> Result<Self> {
        let spec = CostSpec {
            target,
            toleration,
            lambda,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target > 0.0) {
            return Err(Error::invalid(
                "cost spec",
                format!("target {} must be positive", self.target),
            ));
        }
        if !(0.0..=1.0).contains(&self.toleration) {
            return Err(Error::invalid(
                "cost spec",
                format!("toleration {} outside [0, 1]", self.toleration),
            ));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid(
                "cost spec",
                format!("lambda {} must be >= 0", self.lambda),
            ));
        }
        Ok(())
    }

    pub fn band(&self) -> (f64, f64) {
        (
            (1.0 - self.toleration) * self.target,
            (1.0 + self.toleration) * self.target,
        )
    }

    /// Which branch of the piecewise loss applies for actual cost `f`.
    /// Band boundaries belong to the zero branch.
    pub fn branch(&self, f: f64) -> CostBranch {
        let (lo, hi) = self.band();
        if f > hi {
            CostBranch::Above
        } else if f < lo {
            CostBranch::Below
        } else {
            CostBranch::Inside
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostBranch {
    Above,
    Inside,
    Below,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvCost {
    kernel: usize,
    out_pixels: usize,
}

/// Per-layer FLOP formulas for a supernet spec.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCostTable {
    in_channels: usize,
    num_classes: usize,
    stages: Vec<Vec<ConvCost>>,
    /// Spatial size entering the global pooling, per final stage depth.
    final_pixels: usize,
}

impl LayerCostTable {
    pub fn new(spec: &SuperNetSpec) -> Self {
        let geom = spec.geometry();
        let final_pixels = geom
            .last()
            .and_then(|s| s.last())
            .map(|g| g.out_h * g.out_w)
            .unwrap_or(1);
        LayerCostTable {
            in_channels: spec.in_channels,
            num_classes: spec.num_classes,
            stages: geom
                .iter()
                .map(|s| {
                    s.iter()
                        .map(|g| ConvCost {
                            kernel: g.kernel,
                            out_pixels: g.out_h * g.out_w,
                        })
                        .collect()
                })
                .collect(),
            final_pixels,
        }
    }

    /// FLOPs of convolution `layer` of `stage` at the given widths.
    pub fn conv_flops(&self, stage: usize, layer: usize, c_in: usize, c_out: usize) -> f64 {
        let g = self.stages[stage][layer];
        2.0 * (c_out * c_in * g.kernel * g.kernel * g.out_pixels) as f64
    }

    /// Global pooling plus the linear classifier on `c` channels.
    pub fn head_flops(&self, c: usize) -> f64 {
        (c * self.final_pixels) as f64 + 2.0 * (c * self.num_classes) as f64
    }
}

/// Actual FLOPs of a concrete architecture.
pub fn f_cost(arch: &DerivedArch, table: &LayerCostTable) -> f64 {
    let mut c_in = table.in_channels;
    let mut total = 0.0;
    for (s, (widths, &depth)) in arch.widths.iter().zip(&arch.depths).enumerate() {
        for (l, &c) in widths.iter().take(depth).enumerate() {
            total += table.conv_flops(s, l, c_in, c);
            c_in = c;
        }
    }
    total + table.head_flops(c_in)
}

/// Distribution of the channel count flowing between layers.
struct ChannelDist<T: Scalar> {
    counts: Vec<usize>,
    probs: Tensor<T>,
}

/// Exact expected FLOPs under independent per-layer width categoricals and
/// per-stage depth categoricals, differentiable w.r.t. every logit.
///
/// A layer's cost is weighted by the probability that its stage runs at
/// least that deep; the channel count leaving a stage is the mixture, over
/// depths, of the width distributions of the stage's last executed layer.
pub fn e_cost<T: Scalar>(arch: &ArchParams<T>, table: &LayerCostTable) -> Result<Tensor<T>> {
    if arch.depths.len() != table.stages.len() || arch.widths.len() != table.stages.iter().map(Vec::len).sum::<usize>()
    {
        return Err(Error::shape(
            "e_cost",
            "architecture parameters do not match the cost table",
        ));
    }
    let mut incoming = ChannelDist {
        counts: vec![table.in_channels],
        probs: Tensor::new(vec![T::one()], &[1])?,
    };
    let mut total: Option<Tensor<T>> = None;
    let mut idx = 0;
    for (s, stage) in table.stages.iter().enumerate() {
        let depth_len = stage.len();
        let q = arch.depths[s].probs();
        let mut layer_dists = Vec::with_capacity(depth_len);
        let mut prev = incoming;
        for l in 0..depth_len {
            let dist = &arch.widths[idx];
            idx += 1;
            let p = dist.probs();
            let (a, b) = (prev.counts.len(), dist.candidates.len());
            let mut flops = Vec::with_capacity(a * b);
            for &ci in &prev.counts {
                for &co in &dist.candidates {
                    flops.push(cast::<T>(table.conv_flops(s, l, ci, co)));
                }
            }
            let f = Tensor::new(flops, &[a, b])?;
            let mut expected = prev.probs.reshape(&[1, a])?.matmul(&f)?.reshape(&[b])?.mul(&p)?.sum();
            if l > 0 {
                // Pr[depth >= l + 1]
                let tail: Vec<usize> = (l..depth_len).collect();
                expected = expected.scale_by(&q.gather(&tail)?.sum())?;
            }
            total = Some(match total {
                None => expected,
                Some(t) => t.add(&expected)?,
            });
            prev = ChannelDist {
                counts: dist.candidates.clone(),
                probs: p,
            };
            layer_dists.push(ChannelDist {
                counts: prev.counts.clone(),
                probs: prev.probs.clone(),
            });
        }
        incoming = if depth_len == 1 {
            prev
        } else {
            let mut counts = Vec::new();
            let mut parts = Vec::with_capacity(depth_len);
            for (l, d) in layer_dists.iter().enumerate() {
                counts.extend_from_slice(&d.counts);
                parts.push(d.probs.scale_by(&q.gather(&[l])?)?);
            }
            ChannelDist {
                counts,
                probs: Tensor::concat(&parts)?,
            }
        };
    }
    let head: Vec<T> = incoming.counts.iter().map(|&c| cast(table.head_flops(c))).collect();
    let n = head.len();
    let head_cost = incoming.probs.mul(&Tensor::new(head, &[n])?)?.sum();
    let total = match total {
        None => head_cost,
        Some(t) => t.add(&head_cost)?,
    };
    Ok(total)
}

/// Piecewise cost loss: `log e` above the band, `0` inside, `-log e` below.
/// The branch depends only on `f`; the gradient flows through `e`.
pub fn cost_loss<T: Scalar>(e: &Tensor<T>, f: f64, spec: &CostSpec) -> Result<Tensor<T>> {
    if e.numel() != 1 {
        return Err(Error::shape(
            "cost_loss",
            format!("expected cost must be scalar, got {:?}", e.shape()),
        ));
    }
    if !(e.item() > T::zero()) {
        return Err(Error::invalid("cost_loss", "expected cost must be positive"));
    }
    Ok(match spec.branch(f) {
        CostBranch::Above => e.ln(),
        CostBranch::Inside => Tensor::scalar(T::zero()),
        CostBranch::Below => e.ln().neg(),
    })
}

/// Components of the validation objective.
#[derive(Debug, Clone)]
pub struct ValLoss<T: Scalar> {
    pub total: Tensor<T>,
    pub ce: T,
    pub cost: T,
}

/// Cross-entropy plus the weighted cost loss.
pub fn val_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    e: &Tensor<T>,
    f: f64,
    spec: &CostSpec,
) -> Result<ValLoss<T>> {
    let ce = logits.cross_entropy(labels)?;
    let cost = cost_loss(e, f, spec)?;
    let ce_value = ce.item();
    let cost_value = cost.item();
    let total = if spec.lambda == 0.0 || spec.branch(f) == CostBranch::Inside {
        ce
    } else {
        ce.add(&cost.scale(cast(spec.lambda)))?
    };
    Ok(ValLoss {
        total,
        ce: ce_value,
        cost: cost_value,
    })
}
