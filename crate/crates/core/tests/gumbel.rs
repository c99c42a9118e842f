//! Sampling statistics of the relaxed categorical and the sequential subset
//! draw.

mod common;

use common::{rng, softmax};
use netshrink::arch::{gumbel_soft_sample, sample_subset, GumbelSoft, TemperatureSchedule};
use netshrink::tensor::Tensor;

const SAMPLES: usize = 10_000;

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

#[test]
fn low_temperature_argmax_frequencies_follow_the_categorical() {
    let cases: [&[f64]; 3] = [
        &[0.0, 0.0, 0.0, 0.0],
        &[1.0, -0.5, 0.3, 2.0, 0.0],
        &[-1.0, 0.5, 0.2, 0.1, -0.3, 0.8, 0.0, 1.2],
    ];
    for (k, logits) in cases.iter().enumerate() {
        let p = softmax(logits);
        let t = Tensor::new(logits.to_vec(), &[logits.len()]).unwrap();
        let mut r = rng(k as u64);
        let mut counts = vec![0usize; logits.len()];
        for _ in 0..SAMPLES {
            let s = gumbel_soft_sample(&t, 0.1, &mut r).unwrap();
            counts[argmax(&s.soft.to_vec())] += 1;
        }
        for (i, (&c, &pi)) in counts.iter().zip(&p).enumerate() {
            let freq = c as f64 / SAMPLES as f64;
            assert!((freq - pi).abs() <= 0.02, "case {k} entry {i}: {freq} vs {pi}");
        }
    }
}

#[test]
fn low_temperature_samples_are_nearly_one_hot() {
    let t = Tensor::new(vec![0.2, -0.1, 0.4], &[3]).unwrap();
    let mut r = rng(9);
    let mut hard = 0;
    for _ in 0..SAMPLES {
        let s = gumbel_soft_sample(&t, 0.1, &mut r).unwrap().soft.to_vec();
        if s.iter().cloned().fold(0.0, f64::max) > 0.9 {
            hard += 1;
        }
    }
    assert!(hard as f64 / SAMPLES as f64 > 0.8, "{hard}");
}

#[test]
fn huge_temperature_is_uniform() {
    let logits = [3.0f64, -2.0, 0.5, 1.0, -4.0, 0.0];
    let t = Tensor::<f64>::new(logits.to_vec(), &[6]).unwrap();
    let mut r = rng(3);
    for _ in 0..SAMPLES {
        let s = gumbel_soft_sample(&t, 1e6, &mut r).unwrap();
        for v in s.soft.to_vec() {
            assert!((v - 1.0 / 6.0).abs() <= 1e-3, "{v}");
        }
    }
}

fn fixed_soft(p: &[f64]) -> GumbelSoft<f64> {
    let scores: Vec<f64> = p.iter().map(|v| v.ln()).collect();
    GumbelSoft {
        scores: Tensor::new(scores, &[p.len()]).unwrap(),
        soft: Tensor::new(p.to_vec(), &[p.len()]).unwrap(),
    }
}

#[test]
fn ordered_pairs_follow_sequential_draw_probabilities() {
    let p = [0.5, 0.3, 0.15, 0.05];
    let draws = 200_000;
    let mut counts = [[0usize; 4]; 4];
    let mut r = rng(11);
    for _ in 0..draws {
        let s = sample_subset(fixed_soft(&p), 2, &mut r).unwrap();
        counts[s.indices[0]][s.indices[1]] += 1;
    }
    for i in 0..4 {
        for j in 0..4 {
            let expect = if i == j { 0.0 } else { p[i] * p[j] / (1.0 - p[i]) };
            let freq = counts[i][j] as f64 / draws as f64;
            let sigma = (expect * (1.0 - expect) / draws as f64).sqrt();
            assert!(
                (freq - expect).abs() <= 5.0 * sigma + 1e-12,
                "({i},{j}): {freq} vs {expect}"
            );
        }
    }
}

#[test]
fn subset_weights_renormalize_the_soft_sample() {
    let p = [0.1, 0.2, 0.3, 0.4];
    let mut r = rng(5);
    for k in 1..=4 {
        let s = sample_subset(fixed_soft(&p), k, &mut r).unwrap();
        assert_eq!(s.indices.len(), k);
        let mut sorted = s.indices.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), k);
        let total: f64 = s.indices.iter().map(|&i| p[i]).sum();
        for (w, &i) in s.weights.to_vec().iter().zip(&s.indices) {
            assert!((w - p[i] / total).abs() < 1e-14);
        }
    }
}

#[test]
fn full_subset_weights_equal_the_soft_sample() {
    let t = Tensor::<f64>::new(vec![0.3, -0.7, 1.1], &[3]).unwrap();
    let mut r = rng(1);
    let s = sample_subset(gumbel_soft_sample(&t, 2.0, &mut r).unwrap(), 3, &mut r).unwrap();
    let soft = s.soft.to_vec();
    for (w, &i) in s.weights.to_vec().iter().zip(&s.indices) {
        assert!((w - soft[i]).abs() < 1e-14);
    }
}

#[test]
fn temperature_schedule_endpoints() {
    let s = TemperatureSchedule::new(10.0, 0.1, 50).unwrap();
    assert_eq!(s.value(0), 10.0);
    assert!((s.value(49) - 0.1).abs() < 1e-12);
    for e in 1..50 {
        assert!(s.value(e) < s.value(e - 1));
    }
}
