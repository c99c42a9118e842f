//! One random gradient-check instance per call, keyed by seed; each returns
//! the relative error against central differences.

use netshrink::cost::{e_cost, LayerCostTable};
use netshrink::distill::match_loss;
use netshrink::supernet::{candidates_from_ratios, ArchParams, ConvLayerSpec, SuperNet, SuperNetSpec};
use netshrink::tensor::{BatchNormMode, RunningStats, Tensor};
use rand::Rng;

use super::{gradcheck, param, project, rng, uniform};

pub type Case = fn(u64) -> f64;

pub const ALL: &[(&str, Case)] = &[
    ("conv2d", conv2d),
    ("batch_norm train", batch_norm_train),
    ("batch_norm eval", batch_norm_eval),
    ("cwi", cwi),
    ("linear", linear),
    ("adaptive_avg_pool2d", adaptive_pooling),
    ("global_avg_pool", global_pooling),
    ("log_softmax", log_softmax),
    ("cross_entropy", cross_entropy),
    ("elementwise", elementwise),
    ("match_loss", match_loss_student),
    ("e_cost", expected_cost),
    ("search aggregation", aggregation),
];

pub fn conv2d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let stride = 1 + (seed as usize % 2);
    let padding = (seed as usize / 2) % 2;
    let k = [1, 3][seed as usize % 2];
    let x = param(&mut r, &[2, 3, 5, 5]);
    let w = param(&mut r, &[4, 3, k, k]);
    gradcheck(&[x, w], |t| {
        project(&t[0].conv2d(&t[1], stride, padding).unwrap(), seed)
    })
}

pub fn batch_norm_train(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = param(&mut r, &[3, 4, 3, 3]);
    let g = param(&mut r, &[4]);
    let b = param(&mut r, &[4]);
    gradcheck(&[x, g, b], |t| {
        let mut stats = RunningStats::new(4);
        let y = t[0]
            .batch_norm(&t[1], &t[2], &mut stats, BatchNormMode::Train, 0.1, 1e-5)
            .unwrap();
        project(&y, seed)
    })
}

pub fn batch_norm_eval(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = param(&mut r, &[2, 3, 2, 2]);
    let g = param(&mut r, &[3]);
    let b = param(&mut r, &[3]);
    let stats = RunningStats {
        mean: uniform(&mut r, 3, -1.0, 1.0),
        var: uniform(&mut r, 3, 0.5, 2.0),
    };
    gradcheck(&[x, g, b], |t| {
        let y = t[0]
            .batch_norm(&t[1], &t[2], &mut stats.clone(), BatchNormMode::Eval, 0.1, 1e-5)
            .unwrap();
        project(&y, seed)
    })
}

pub fn cwi(seed: u64) -> f64 {
    let mut r = rng(seed);
    let c = r.random_range(1..=8);
    let target = r.random_range(1..=8);
    let x = param(&mut r, &[2, c, 3, 3]);
    gradcheck(&[x], |t| project(&t[0].channel_pool(target).unwrap(), seed))
}

pub fn linear(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = param(&mut r, &[3, 5]);
    let w = param(&mut r, &[4, 5]);
    let b = param(&mut r, &[4]);
    gradcheck(&[x, w, b], |t| project(&t[0].linear(&t[1], &t[2]).unwrap(), seed))
}

pub fn adaptive_pooling(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (oh, ow) = (r.random_range(1..=5), r.random_range(1..=7));
    let x = param(&mut r, &[2, 3, 5, 7]);
    gradcheck(&[x], |t| project(&t[0].adaptive_avg_pool2d(oh, ow).unwrap(), seed))
}

pub fn global_pooling(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = param(&mut r, &[2, 3, 4, 3]);
    gradcheck(&[x], |t| project(&t[0].global_avg_pool().unwrap(), seed))
}

pub fn log_softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = param(&mut r, &[3, 6]);
    gradcheck(&[x], |t| project(&t[0].scale(3.0).log_softmax().unwrap(), seed))
}

pub fn cross_entropy(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = param(&mut r, &[4, 5]);
    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
    gradcheck(&[x], |t| t[0].cross_entropy(&labels).unwrap())
}

pub fn elementwise(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = param(&mut r, &[2, 3]);
    let b = param(&mut r, &[2, 3]);
    let s = Tensor::param(uniform(&mut r, 1, 0.5, 2.0), &[1]).unwrap();
    gradcheck(&[a, b, s], |t| {
        let y = t[0]
            .mul(&t[1])
            .unwrap()
            .exp()
            .add(&t[1].relu())
            .unwrap()
            .scale_by(&t[2])
            .unwrap();
        let z = y.add_scalar(1.0).ln().sub(&t[0]).unwrap();
        project(&z, seed)
    })
}

pub fn match_loss_student(seed: u64) -> f64 {
    let mut r = rng(seed);
    let student = param(&mut r, &[4, 5]);
    let teacher = Tensor::new(uniform(&mut r, 20, -3.0, 3.0), &[4, 5]).unwrap();
    let temp = [1.0, 2.0, 4.0, 8.0][seed as usize % 4];
    gradcheck(&[student], |t| match_loss(&t[0], &teacher, temp).unwrap())
}

fn layer(width: usize, stride: usize) -> ConvLayerSpec {
    ConvLayerSpec {
        c_out_max: width,
        kernel: 3,
        stride,
        padding: 1,
        candidates: candidates_from_ratios(width, &[0.25, 0.5, 0.75, 1.0]),
    }
}

fn two_stage_spec() -> SuperNetSpec {
    SuperNetSpec {
        in_channels: 2,
        image_size: [4, 4],
        num_classes: 3,
        stages: vec![
            vec![layer(4, 1), layer(4, 1), layer(4, 1)],
            vec![layer(8, 2), layer(8, 1)],
        ],
    }
}

fn random_arch(spec: &SuperNetSpec, seed: u64) -> ArchParams<f64> {
    let arch = ArchParams::uniform(spec).unwrap();
    let mut r = rng(seed);
    for p in arch.params() {
        let n = p.numel();
        p.data_mut().copy_from_slice(&uniform(&mut r, n, -2.0, 2.0));
    }
    arch
}

/// Expected FLOPs with respect to width and depth logits.
pub fn expected_cost(seed: u64) -> f64 {
    let spec = two_stage_spec();
    let table = LayerCostTable::new(&spec);
    let arch = random_arch(&spec, seed);
    gradcheck(&arch.params(), |_| e_cost(&arch, &table).unwrap())
}

/// Full search forward (fragment mixing and depth mixing) with respect to
/// architecture logits and network weights, Gumbel noise held fixed.
pub fn aggregation(seed: u64) -> f64 {
    let spec = two_stage_spec();
    let mut r = rng(seed);
    let sn = SuperNet::<f64>::new(spec.clone(), &mut r).unwrap();
    let sn = SuperNet {
        arch: random_arch(&spec, seed + 100),
        ..sn
    };
    let x = Tensor::new(uniform(&mut r, 3 * 2 * 16, -1.0, 1.0), &[3, 2, 4, 4]).unwrap();
    let labels = [0, 1, 2];
    let mut inputs = sn.arch.params();
    inputs.extend(sn.net.params());
    gradcheck(&inputs, |_| {
        let sample = sn.arch.sample(1.0, 2, true, &mut rng(seed + 7)).unwrap();
        sn.forward_search(&x, &sample, BatchNormMode::Train)
            .unwrap()
            .cross_entropy(&labels)
            .unwrap()
    })
}
