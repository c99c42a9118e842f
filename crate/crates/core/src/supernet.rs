//! The transformable plain CNN.
//!
//! A [`SuperNet`] holds one convolution per layer at its maximal width. During
//! search a layer computes its full-width output once, cuts the first `C_j`
//! channels for every sampled candidate `j`, aligns the fragments to the
//! widest sampled count with channel-wise interpolation (adaptive average
//! pooling over channels), and mixes them with the re-normalized Gumbel
//! weights. Stage outputs are mixed over candidate depths the same way.

use std::cell::RefCell;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::arch::{self, ArchChoice, DepthDistribution, GumbelSample, WidthDistribution};
use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::{conv_output_size, BatchNormMode, RunningStats, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    /// Maximal output channel count; equals the largest candidate.
    pub c_out_max: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Strictly increasing candidate output widths.
    pub candidates: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperNetSpec {
    pub in_channels: usize,
    pub image_size: [usize; 2],
    pub num_classes: usize,
    pub stages: Vec<Vec<ConvLayerSpec>>,
}

/// Resolved shape of one convolution at maximal width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerGeometry {
    pub c_in_max: usize,
    pub c_out_max: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Candidate channel counts `round(ratio * width)`, deduplicated, each at least 1.
pub fn candidates_from_ratios(width: usize, ratios: &[f64]) -> Vec<usize> {
    let mut out: Vec<usize> = ratios
        .iter()
        .map(|r| ((r * width as f64).round() as usize).max(1))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

impl SuperNetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("supernet spec", d));
        if self.in_channels == 0 || self.num_classes < 2 || self.image_size.contains(&0) {
            return bad(format!(
                "in_channels {}, classes {}, image {:?}",
                self.in_channels, self.num_classes, self.image_size
            ));
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.is_empty()) {
            return bad("every stage needs at least one layer".into());
        }
        let [mut h, mut w] = self.image_size;
        for (s, stage) in self.stages.iter().enumerate() {
            for (l, layer) in stage.iter().enumerate() {
                if layer.candidates.len() < 2
                    || layer.candidates.windows(2).any(|p| p[0] >= p[1])
                    || layer.candidates[0] == 0
                {
                    return bad(format!("stage {s} layer {l}: candidates {:?}", layer.candidates));
                }
                if layer.candidates.last() != Some(&layer.c_out_max) {
                    return bad(format!(
                        "stage {s} layer {l}: largest candidate must equal width {}",
                        layer.c_out_max
                    ));
                }
                let (Some(oh), Some(ow)) = (
                    conv_output_size(h, layer.kernel, layer.stride, layer.padding),
                    conv_output_size(w, layer.kernel, layer.stride, layer.padding),
                ) else {
                    return bad(format!("stage {s} layer {l}: kernel does not fit {h}x{w}"));
                };
                if l > 0 && (oh, ow) != (h, w) {
                    return bad(format!(
                        "stage {s} layer {l}: only the first layer of a stage may change resolution"
                    ));
                }
                (h, w) = (oh, ow);
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    pub fn stage_lengths(&self) -> Vec<usize> {
        self.stages.iter().map(Vec::len).collect()
    }

    /// Per-stage, per-layer geometry at maximal width and depth.
    pub fn geometry(&self) -> Vec<Vec<LayerGeometry>> {
        let [mut h, mut w] = self.image_size;
        let mut c_in = self.in_channels;
        self.stages
            .iter()
            .map(|stage| {
                stage
                    .iter()
                    .map(|l| {
                        h = conv_output_size(h, l.kernel, l.stride, l.padding).unwrap_or(1);
                        w = conv_output_size(w, l.kernel, l.stride, l.padding).unwrap_or(1);
                        let g = LayerGeometry {
                            c_in_max: c_in,
                            c_out_max: l.c_out_max,
                            kernel: l.kernel,
                            stride: l.stride,
                            padding: l.padding,
                            out_h: h,
                            out_w: w,
                        };
                        c_in = l.c_out_max;
                        g
                    })
                    .collect()
            })
            .collect()
    }

    /// The unpruned architecture.
    pub fn full_arch(&self) -> DerivedArch {
        DerivedArch {
            widths: self
                .stages
                .iter()
                .map(|s| s.iter().map(|l| l.c_out_max).collect())
                .collect(),
            depths: self.stage_lengths(),
        }
    }

    /// Checks that `arch` selects valid candidates and depths for this spec.
    pub fn check_arch(&self, arch: &DerivedArch) -> Result<()> {
        let mismatch = |d: String| Err(Error::invalid("derived architecture", d));
        if arch.widths.len() != self.stages.len() || arch.depths.len() != self.stages.len() {
            return mismatch(format!(
                "{} stages in arch vs {} in spec",
                arch.widths.len(),
                self.stages.len()
            ));
        }
        for (s, (stage, widths)) in self.stages.iter().zip(&arch.widths).enumerate() {
            if widths.len() != stage.len() {
                return mismatch(format!("stage {s}: {} widths for {} layers", widths.len(), stage.len()));
            }
            if arch.depths[s] == 0 || arch.depths[s] > stage.len() {
                return mismatch(format!(
                    "stage {s}: depth {} outside 1..={}",
                    arch.depths[s],
                    stage.len()
                ));
            }
            for (l, (layer, &c)) in stage.iter().zip(widths).enumerate() {
                if !layer.candidates.contains(&c) {
                    return mismatch(format!("stage {s} layer {l}: width {c} not a candidate"));
                }
            }
        }
        Ok(())
    }
}

/// A concrete width per layer and depth per stage.
///
/// `widths` lists every layer of the spec; layers beyond a stage's depth are
/// not executed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedArch {
    pub widths: Vec<Vec<usize>>,
    pub depths: Vec<usize>,
}

impl DerivedArch {
    pub fn from_choice(spec: &SuperNetSpec, choice: &ArchChoice) -> Result<Self> {
        let mut it = choice.widths.iter().copied();
        let widths: Vec<Vec<usize>> = spec
            .stages
            .iter()
            .map(|s| it.by_ref().take(s.len()).collect())
            .collect();
        let arch = DerivedArch {
            widths,
            depths: choice.depths.clone(),
        };
        spec.check_arch(&arch)?;
        Ok(arch)
    }

    /// Widths of executed layers only.
    pub fn active_widths(&self) -> Vec<Vec<usize>> {
        self.widths
            .iter()
            .zip(&self.depths)
            .map(|(w, &d)| w[..d].to_vec())
            .collect()
    }
}

/// One convolution + batch-norm + ReLU block.
#[derive(Debug)]
pub struct ConvLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: RefCell<RunningStats<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvLayer<T> {
    fn zeros(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvLayer {
            weight: param(
                vec![T::zero(); c_out * c_in * kernel * kernel],
                &[c_out, c_in, kernel, kernel],
            ),
            gamma: param(vec![T::one(); c_out], &[c_out]),
            beta: param(vec![T::zero(); c_out], &[c_out]),
            stats: RefCell::new(RunningStats::new(c_out)),
            stride,
            padding,
        }
    }

    fn he_init<R: Rng + ?Sized>(&self, rng: &mut R) {
        let s = self.weight.shape();
        let fan_in = (s[1] * s[2] * s[3]) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        for v in self.weight.data_mut().iter_mut() {
            *v = cast(normal.sample(rng));
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Conv → BN → ReLU, reading the first `x.channels` input channels of the
    /// weight tensor.
    fn forward(&self, x: &Tensor<T>, mode: BatchNormMode) -> Result<Tensor<T>> {
        let c = x.shape().get(1).copied().unwrap_or(0);
        if c == 0 || c > self.c_in() {
            return Err(Error::shape(
                "conv layer",
                format!("input has {c} channels, layer accepts at most {}", self.c_in()),
            ));
        }
        let w = self.weight.narrow(1, 0, c)?;
        let y = x.conv2d(&w, self.stride, self.padding)?;
        let y = y.batch_norm(
            &self.gamma,
            &self.beta,
            &mut self.stats.borrow_mut(),
            mode,
            cast(BN_MOMENTUM),
            cast(BN_EPS),
        )?;
        Ok(y.relu())
    }
}

fn param<T: Scalar>(data: Vec<T>, shape: &[usize]) -> Tensor<T> {
    Tensor::param(data, shape).expect("consistent parameter shape")
}

#[derive(Debug)]
pub struct Head<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Shape summary of a [`ConvNet`], enough to rebuild it from stored arrays.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetLayout {
    pub in_channels: usize,
    pub num_classes: usize,
    /// `(c_out, kernel, stride, padding)` per layer per stage.
    pub stages: Vec<Vec<(usize, usize, usize, usize)>>,
}

impl NetLayout {
    pub fn from_spec(spec: &SuperNetSpec) -> Self {
        Self::from_arch(spec, &spec.full_arch())
    }

    pub fn from_arch(spec: &SuperNetSpec, arch: &DerivedArch) -> Self {
        NetLayout {
            in_channels: spec.in_channels,
            num_classes: spec.num_classes,
            stages: spec
                .stages
                .iter()
                .zip(arch.active_widths())
                .map(|(stage, widths)| {
                    stage
                        .iter()
                        .zip(widths)
                        .map(|(l, c)| (c, l.kernel, l.stride, l.padding))
                        .collect()
                })
                .collect(),
        }
    }
}

/// Plain CNN parameters: stages of conv blocks, global pooling, linear head.
#[derive(Debug)]
pub struct ConvNet<T: Scalar> {
    pub stages: Vec<Vec<ConvLayer<T>>>,
    pub head: Head<T>,
}

impl<T: Scalar> ConvNet<T> {
    /// Zero-initialized network with the given layout.
    pub fn zeros(layout: &NetLayout) -> Self {
        let mut c_in = layout.in_channels;
        let stages = layout
            .stages
            .iter()
            .map(|stage| {
                stage
                    .iter()
                    .map(|&(c_out, k, stride, pad)| {
                        let l = ConvLayer::zeros(c_in, c_out, k, stride, pad);
                        c_in = c_out;
                        l
                    })
                    .collect()
            })
            .collect();
        ConvNet {
            stages,
            head: Head {
                weight: param(vec![T::zero(); layout.num_classes * c_in], &[layout.num_classes, c_in]),
                bias: param(vec![T::zero(); layout.num_classes], &[layout.num_classes]),
            },
        }
    }

    /// He-normal convolutions, uniform head, identity batch-norm.
    pub fn random<R: Rng + ?Sized>(layout: &NetLayout, rng: &mut R) -> Self {
        let net = Self::zeros(layout);
        for layer in net.layers() {
            layer.he_init(rng);
        }
        let fan_in = net.head.weight.shape()[1] as f64;
        let bound = 1.0 / fan_in.sqrt();
        let u = Uniform::new(-bound, bound).expect("valid bound");
        for v in net.head.weight.data_mut().iter_mut() {
            *v = cast(u.sample(rng));
        }
        net
    }

    pub fn layout(&self) -> NetLayout {
        NetLayout {
            in_channels: self.stages[0][0].c_in(),
            num_classes: self.head.weight.shape()[0],
            stages: self
                .stages
                .iter()
                .map(|s| s.iter().map(|l| (l.c_out(), l.kernel(), l.stride, l.padding)).collect())
                .collect(),
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &ConvLayer<T>> {
        self.stages.iter().flatten()
    }

    /// Trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        for l in self.layers() {
            out.extend([l.weight.clone(), l.gamma.clone(), l.beta.clone()]);
        }
        out.extend([self.head.weight.clone(), self.head.bias.clone()]);
        out
    }

    pub fn set_requires_grad(&self, on: bool) {
        for p in self.params() {
            p.set_requires_grad(on);
        }
    }

    pub fn zero_grad(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    /// Deep copy with independent storage.
    pub fn duplicate(&self) -> Self {
        let copy = Self::zeros(&self.layout());
        for (dst, src) in copy.params().iter().zip(self.params()) {
            dst.data_mut().copy_from_slice(&src.data());
        }
        for (dst, src) in copy.layers().zip(self.layers()) {
            *dst.stats.borrow_mut() = src.stats.borrow().clone();
        }
        copy
    }

    /// Ordinary forward pass with every layer at its stored width.
    pub fn forward(&self, x: &Tensor<T>, mode: BatchNormMode) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for layer in self.layers() {
            if h.shape()[1] != layer.c_in() {
                return Err(Error::shape(
                    "forward_fixed",
                    format!("{} channels into layer expecting {}", h.shape()[1], layer.c_in()),
                ));
            }
            h = layer.forward(&h, mode)?;
        }
        self.head_forward(&h)
    }

    fn head_forward(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = h.global_avg_pool()?;
        let c = pooled.shape()[1];
        let w = self.head.weight.narrow(1, 0, c)?;
        pooled.linear(&w, &self.head.bias)
    }

    /// Sliced copy: the first `c_out` / `c_in` channels of every executed layer.
    pub fn slice_to(&self, layout: &NetLayout) -> Result<Self> {
        if layout.stages.len() != self.stages.len() {
            return Err(Error::invalid("slice", "stage count differs"));
        }
        let out = Self::zeros(layout);
        for (dst_stage, src_stage) in out.stages.iter().zip(&self.stages) {
            if dst_stage.len() > src_stage.len() {
                return Err(Error::invalid("slice", "target deeper than source"));
            }
            for (dst, src) in dst_stage.iter().zip(src_stage) {
                if dst.c_out() > src.c_out() || dst.c_in() > src.c_in() || dst.kernel() != src.kernel() {
                    return Err(Error::invalid("slice", "target wider than source"));
                }
                copy_block(&src.weight, &dst.weight);
                dst.gamma.data_mut().copy_from_slice(&src.gamma.data()[..dst.c_out()]);
                dst.beta.data_mut().copy_from_slice(&src.beta.data()[..dst.c_out()]);
                let st = src.stats.borrow();
                let mut dt = dst.stats.borrow_mut();
                dt.mean.copy_from_slice(&st.mean[..dst.c_out()]);
                dt.var.copy_from_slice(&st.var[..dst.c_out()]);
            }
        }
        copy_block(&self.head.weight, &out.head.weight);
        out.head.bias.data_mut().copy_from_slice(&self.head.bias.data());
        Ok(out)
    }
}

/// Copies the leading sub-block of `src` matching `dst`'s shape (first two axes sliced).
fn copy_block<T: Scalar>(src: &Tensor<T>, dst: &Tensor<T>) {
    let ss = src.shape().to_vec();
    let ds = dst.shape().to_vec();
    let inner: usize = ds[2..].iter().product();
    let src_data = src.data();
    let mut dst_data = dst.data_mut();
    for o in 0..ds[0] {
        for i in 0..ds[1] {
            let s = (o * ss[1] + i) * inner;
            let d = (o * ds[1] + i) * inner;
            dst_data[d..d + inner].copy_from_slice(&src_data[s..s + inner]);
        }
    }
}

/// How a derived network gets its initial weights.
pub enum Init<'a, T: Scalar, R: Rng + ?Sized> {
    Random(&'a mut R),
    SliceFromTeacher(&'a ConvNet<T>),
}

/// Builds a compact network for `arch`.
pub fn instantiate_derived<T: Scalar, R: Rng + ?Sized>(
    spec: &SuperNetSpec,
    arch: &DerivedArch,
    init: Init<'_, T, R>,
) -> Result<ConvNet<T>> {
    spec.check_arch(arch)?;
    let layout = NetLayout::from_arch(spec, arch);
    match init {
        Init::Random(rng) => Ok(ConvNet::random(&layout, rng)),
        Init::SliceFromTeacher(teacher) => teacher.slice_to(&layout),
    }
}

/// All width and depth distributions of a supernet.
#[derive(Debug, Clone)]
pub struct ArchParams<T: Scalar> {
    /// One per layer, in network order.
    pub widths: Vec<WidthDistribution<T>>,
    /// One per stage.
    pub depths: Vec<DepthDistribution<T>>,
}

impl<T: Scalar> ArchParams<T> {
    pub fn uniform(spec: &SuperNetSpec) -> Result<Self> {
        Ok(ArchParams {
            widths: spec
                .stages
                .iter()
                .flatten()
                .map(|l| WidthDistribution::new(l.candidates.clone()))
                .collect::<Result<_>>()?,
            depths: spec
                .stages
                .iter()
                .map(|s| DepthDistribution::new(s.len()))
                .collect::<Result<_>>()?,
        })
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        self.widths
            .iter()
            .map(|w| w.logits.clone())
            .chain(self.depths.iter().map(|d| d.logits.clone()))
            .collect()
    }

    pub fn zero_grad(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    pub fn choice(&self) -> ArchChoice {
        arch::derive(&self.widths, &self.depths)
    }

    pub fn mean_discrepancy(&self) -> T {
        arch::mean_discrepancy(&self.widths)
    }

    /// Fresh Gumbel sample for every distribution. With `track_grad` false the
    /// logits are detached so no gradient reaches the architecture.
    pub fn sample<R: Rng + ?Sized>(&self, tau: T, k: usize, track_grad: bool, rng: &mut R) -> Result<ArchSample<T>> {
        let view = |t: &Tensor<T>| if track_grad { t.clone() } else { t.detach() };
        let widths = self
            .widths
            .iter()
            .map(|w| {
                let soft = arch::gumbel_soft_sample(&view(&w.logits), tau, rng)?;
                arch::sample_subset(soft, k.min(w.len()), rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let depths = self
            .depths
            .iter()
            .map(|d| {
                if d.max_depth() == 1 {
                    Ok(None)
                } else {
                    Ok(Some(arch::gumbel_soft_sample(&view(&d.logits), tau, rng)?.soft))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ArchSample {
            widths,
            depths,
            candidates: self.widths.iter().map(|w| w.candidates.clone()).collect(),
        })
    }
}

/// Per-forward-pass sampled fragments and depth weights.
#[derive(Debug, Clone)]
pub struct ArchSample<T: Scalar> {
    pub widths: Vec<GumbelSample<T>>,
    /// `None` for single-layer stages.
    pub depths: Vec<Option<Tensor<T>>>,
    pub candidates: Vec<Vec<usize>>,
}

impl<T: Scalar> ArchSample<T> {
    /// Deterministic sample selecting exactly the candidates of `arch`, each
    /// with weight 1, and a one-hot depth weight at the chosen depth.
    pub fn forced(spec: &SuperNetSpec, arch: &DerivedArch) -> Result<Self> {
        spec.check_arch(arch)?;
        let mut widths = Vec::new();
        let mut candidates = Vec::new();
        for (stage, chosen) in spec.stages.iter().zip(&arch.widths) {
            for (layer, &c) in stage.iter().zip(chosen) {
                let n = layer.candidates.len();
                let idx = layer.candidates.iter().position(|&x| x == c).expect("checked");
                let mut soft = vec![T::zero(); n];
                soft[idx] = T::one();
                widths.push(GumbelSample {
                    scores: Tensor::new(soft.clone(), &[n])?,
                    soft: Tensor::new(soft, &[n])?,
                    indices: vec![idx],
                    weights: Tensor::new(vec![T::one()], &[1])?,
                });
                candidates.push(layer.candidates.clone());
            }
        }
        let depths = spec
            .stages
            .iter()
            .zip(&arch.depths)
            .map(|(stage, &d)| {
                if stage.len() == 1 {
                    return Ok(None);
                }
                let mut q = vec![T::zero(); stage.len()];
                q[d - 1] = T::one();
                Ok(Some(Tensor::new(q, &[stage.len()])?))
            })
            .collect::<Result<_>>()?;
        Ok(ArchSample {
            widths,
            depths,
            candidates,
        })
    }
}

/// Sampled-subset aggregation for one layer.
///
/// Output has `max(C_I)` channels: every fragment (the first `C_j` channels of
/// the full-width block output) is channel-pooled to that width and the
/// fragments are mixed with the re-normalized weights.
pub fn forward_layer_search<T: Scalar>(
    layer: &ConvLayer<T>,
    input: &Tensor<T>,
    sample: &GumbelSample<T>,
    candidates: &[usize],
    mode: BatchNormMode,
) -> Result<Tensor<T>> {
    if sample.indices.is_empty() {
        return Err(Error::invalid("forward_layer_search", "empty candidate subset"));
    }
    let full = layer.forward(input, mode)?;
    let widths: Vec<usize> = sample.indices.iter().map(|&i| candidates[i]).collect();
    let target = *widths.iter().max().expect("non-empty");
    let mut acc: Option<Tensor<T>> = None;
    for (slot, &c) in widths.iter().enumerate() {
        let frag = full.narrow(1, 0, c)?.channel_pool(target)?;
        let w = sample.weights.gather(&[slot])?;
        let term = frag.scale_by(&w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Runs a stage's layers in sequence and mixes their outputs over depth.
pub fn forward_stage_search<T: Scalar>(
    layers: &[ConvLayer<T>],
    input: &Tensor<T>,
    samples: &[GumbelSample<T>],
    candidates: &[Vec<usize>],
    depth_weights: Option<&Tensor<T>>,
    mode: BatchNormMode,
) -> Result<Tensor<T>> {
    let mut outs = Vec::with_capacity(layers.len());
    let mut h = input.clone();
    for ((layer, s), cands) in layers.iter().zip(samples).zip(candidates) {
        h = forward_layer_search(layer, &h, s, cands, mode)?;
        outs.push(h.clone());
    }
    let Some(q) = depth_weights else {
        return Ok(h);
    };
    if q.numel() != outs.len() {
        return Err(Error::shape(
            "forward_stage_search",
            format!("{} depth weights for {} layers", q.numel(), outs.len()),
        ));
    }
    // Depths with exactly zero weight neither contribute nor widen the output.
    let weights = q.to_vec();
    let live: Vec<usize> = (0..outs.len()).filter(|&l| weights[l] != T::zero()).collect();
    let live = if live.is_empty() {
        (0..outs.len()).collect()
    } else {
        live
    };
    let c_out = live.iter().map(|&l| outs[l].shape()[1]).max().expect("non-empty stage");
    let (oh, ow) = (h.shape()[2], h.shape()[3]);
    let mut acc: Option<Tensor<T>> = None;
    for &l in &live {
        let o = &outs[l];
        let aligned = o.channel_pool(c_out)?.adaptive_avg_pool2d(oh, ow)?;
        let term = aligned.scale_by(&q.gather(&[l])?)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Maximal-width weights plus architecture distributions.
#[derive(Debug)]
pub struct SuperNet<T: Scalar> {
    pub spec: SuperNetSpec,
    pub net: ConvNet<T>,
    pub arch: ArchParams<T>,
}

impl<T: Scalar> SuperNet<T> {
    pub fn new<R: Rng + ?Sized>(spec: SuperNetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let net = ConvNet::random(&NetLayout::from_spec(&spec), rng);
        let arch = ArchParams::uniform(&spec)?;
        Ok(SuperNet { spec, net, arch })
    }

    /// Supernet whose weights start from a trained full-size network.
    pub fn from_weights(spec: SuperNetSpec, net: ConvNet<T>) -> Result<Self> {
        spec.validate()?;
        if net.layout() != NetLayout::from_spec(&spec) {
            return Err(Error::invalid("supernet", "weights do not match the spec layout"));
        }
        let arch = ArchParams::uniform(&spec)?;
        Ok(SuperNet { spec, net, arch })
    }

    /// Search-mode forward pass with a given sample.
    pub fn forward_search(&self, x: &Tensor<T>, sample: &ArchSample<T>, mode: BatchNormMode) -> Result<Tensor<T>> {
        let expected = [self.spec.in_channels, self.spec.image_size[0], self.spec.image_size[1]];
        if x.ndim() != 4 || x.shape()[1..] != expected {
            return Err(Error::shape(
                "forward_search",
                format!("batch {:?} vs input [N, {expected:?}]", x.shape()),
            ));
        }
        let mut h = x.clone();
        let mut offset = 0;
        for (s, stage) in self.net.stages.iter().enumerate() {
            let n = stage.len();
            h = forward_stage_search(
                stage,
                &h,
                &sample.widths[offset..offset + n],
                &sample.candidates[offset..offset + n],
                sample.depths[s].as_ref(),
                mode,
            )?;
            offset += n;
        }
        self.net.head_forward(&h)
    }

    /// Current argmax architecture.
    pub fn derive(&self) -> Result<DerivedArch> {
        DerivedArch::from_choice(&self.spec, &self.arch.choice())
    }
}
