#![allow(dead_code)]

pub mod grad_cases;

use netshrink::cost::{f_cost, LayerCostTable};
use netshrink::supernet::{ArchParams, ConvLayerSpec, DerivedArch, SuperNetSpec};
use netshrink::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::param(uniform(rng, n, -1.0, 1.0), shape).unwrap()
}

/// Contracts `out` with fixed random weights so every output entry carries
/// a distinct gradient.
pub fn project(out: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed ^ 0xabcd);
    let w = Tensor::new(uniform(&mut r, out.numel(), -1.0, 1.0), out.shape()).unwrap();
    out.mul(&w).unwrap().sum()
}

/// Relative error `|a - n| / max(|a|, |n|)` between the autodiff gradient
/// and central differences, over all entries of all `inputs` jointly.
pub fn gradcheck(inputs: &[Tensor<f64>], f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>) -> f64 {
    for t in inputs {
        t.zero_grad();
    }
    f(inputs).backward().unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for t in inputs {
        analytic.extend(t.grad().unwrap_or_else(|| vec![0.0; t.numel()]));
        for i in 0..t.numel() {
            let x0 = t.data()[i];
            t.data_mut()[i] = x0 + FD_STEP;
            let up = f(inputs).item();
            t.data_mut()[i] = x0 - FD_STEP;
            let down = f(inputs).item();
            t.data_mut()[i] = x0;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    let diff: f64 = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Runs `instances` gradient checks and asserts each one is within `tol`.
pub fn check_all(name: &str, instances: usize, tol: f64, mut one: impl FnMut(u64) -> f64) {
    for seed in 0..instances as u64 {
        let err = one(seed);
        assert!(err < tol, "{name}: instance {seed} relative error {err:e}");
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Channel-wise interpolation by a direct loop over the adaptive windows
/// `[floor(i*C/c), ceil((i+1)*C/c))`.
pub fn cwi_direct(x: &[f64], [n, c, h, w]: [usize; 4], target: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * target * h * w];
    for b in 0..n {
        for i in 0..target {
            let lo = i * c / target;
            let hi = ((i + 1) * c).div_ceil(target);
            for p in 0..h * w {
                let mut s = 0.0;
                for ch in lo..hi {
                    s += x[(b * c + ch) * h * w + p];
                }
                out[(b * target + i) * h * w + p] = s / (hi - lo) as f64;
            }
        }
    }
    out
}

/// FLOPs of a sub-network from first principles: 2 per multiply-add of each
/// executed convolution, `c*H*W` for global pooling, `2*c*K` for the head.
pub fn flops_direct(spec: &SuperNetSpec, arch: &DerivedArch) -> f64 {
    let (mut h, mut w) = (spec.image_size[0], spec.image_size[1]);
    let mut c_in = spec.in_channels;
    let mut total = 0.0;
    for (s, stage) in spec.stages.iter().enumerate() {
        for (l, ls) in stage.iter().enumerate() {
            h = (h + 2 * ls.padding - ls.kernel) / ls.stride + 1;
            w = (w + 2 * ls.padding - ls.kernel) / ls.stride + 1;
            if l < arch.depths[s] {
                let c = arch.widths[s][l];
                total += 2.0 * (c_in * c * ls.kernel * ls.kernel * h * w) as f64;
                c_in = c;
            }
        }
    }
    total + (c_in * h * w) as f64 + 2.0 * (c_in * spec.num_classes) as f64
}

/// Sum over every joint assignment of widths and depths.
pub fn enumerate_expected_flops(spec: &SuperNetSpec, arch: &ArchParams<f64>, with_f_cost: bool) -> (f64, usize) {
    let wp: Vec<Vec<f64>> = arch.widths.iter().map(|d| softmax(&d.logits.to_vec())).collect();
    let dp: Vec<Vec<f64>> = arch.depths.iter().map(|d| softmax(&d.logits.to_vec())).collect();
    let layers: Vec<&ConvLayerSpec> = spec.stages.iter().flatten().collect();
    let width_combos: usize = layers.iter().map(|l| l.candidates.len()).product();
    let depth_combos: usize = spec.stages.iter().map(Vec::len).product();
    let table = LayerCostTable::new(spec);
    let mut expected = 0.0;
    for wi in 0..width_combos {
        let mut rem = wi;
        let mut choice = Vec::new();
        let mut p = 1.0;
        for (k, l) in layers.iter().enumerate() {
            let j = rem % l.candidates.len();
            rem /= l.candidates.len();
            choice.push(l.candidates[j]);
            p *= wp[k][j];
        }
        for di in 0..depth_combos {
            let mut rem = di;
            let mut depths = Vec::new();
            let mut q = p;
            for (s, stage) in spec.stages.iter().enumerate() {
                let d = rem % stage.len();
                rem /= stage.len();
                depths.push(d + 1);
                q *= dp[s][d];
            }
            let mut widths = Vec::new();
            let mut it = choice.iter();
            for stage in &spec.stages {
                widths.push(it.by_ref().take(stage.len()).copied().collect());
            }
            let a = DerivedArch { widths, depths };
            let f = flops_direct(spec, &a);
            if with_f_cost {
                assert_eq!(f_cost(&a, &table), f, "{a:?}");
            }
            expected += q * f;
        }
    }
    (expected, width_combos * depth_combos)
}

pub fn layer_with(candidates: &[usize], stride: usize) -> ConvLayerSpec {
    ConvLayerSpec {
        c_out_max: *candidates.last().unwrap(),
        kernel: 3,
        stride,
        padding: 1,
        candidates: candidates.to_vec(),
    }
}

/// Supernets small enough to enumerate, with depth choices in most stages.
pub fn enumeration_specs() -> Vec<SuperNetSpec> {
    vec![
        // 2*2*3 widths * 2 depths = 24 networks
        SuperNetSpec {
            in_channels: 3,
            image_size: [8, 8],
            num_classes: 10,
            stages: vec![
                vec![layer_with(&[2, 4], 1), layer_with(&[3, 4], 1)],
                vec![layer_with(&[2, 5, 8], 2)],
            ],
        },
        // 2^4 widths * 3 depths = 48 networks
        SuperNetSpec {
            in_channels: 1,
            image_size: [6, 6],
            num_classes: 4,
            stages: vec![
                vec![layer_with(&[1, 3], 1), layer_with(&[2, 3], 1), layer_with(&[2, 4], 1)],
                vec![layer_with(&[3, 6], 2)],
            ],
        },
        // 2^4 widths * 2 * 2 depths = 64 networks
        SuperNetSpec {
            in_channels: 2,
            image_size: [5, 5],
            num_classes: 3,
            stages: vec![
                vec![layer_with(&[2, 4], 1), layer_with(&[1, 4], 1)],
                vec![layer_with(&[2, 6], 2), layer_with(&[3, 6], 1)],
            ],
        },
    ]
}
