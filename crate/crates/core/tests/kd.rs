//! Properties of the distillation objective.

mod common;

use common::{rng, uniform};
use netshrink::distill::{kd_loss, match_loss, KDSpec, TransferMode};
use netshrink::tensor::Tensor;
use rand::Rng;

fn softmax_rows(v: &[f64], k: usize, t: f64) -> Vec<f64> {
    v.chunks(k)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| ((x - m) / t).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |x| x / s)
        })
        .collect()
}

fn spec(lambda: f64, temperature: f64) -> KDSpec {
    KDSpec {
        temperature,
        lambda,
        mode: TransferMode::Kd,
    }
}

#[test]
fn lambda_one_is_cross_entropy_bit_for_bit() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let z = Tensor::param(uniform(&mut r, 24, -4.0, 4.0), &[4, 6]).unwrap();
        let t = Tensor::new(uniform(&mut r, 24, -4.0, 4.0), &[4, 6]).unwrap();
        let y: Vec<usize> = (0..4).map(|_| r.random_range(0..6)).collect();
        let kd = kd_loss(&z, &t, &y, &spec(1.0, 4.0)).unwrap();
        let ce = z.cross_entropy(&y).unwrap();
        assert_eq!(kd.item().to_bits(), ce.item().to_bits());
        kd.backward().unwrap();
        let g_kd = z.grad().unwrap();
        z.zero_grad();
        ce.backward().unwrap();
        let g_ce = z.grad().unwrap();
        assert!(g_kd.iter().zip(&g_ce).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn lambda_zero_is_pure_matching() {
    let mut r = rng(4);
    let z = Tensor::param(uniform(&mut r, 12, -2.0, 2.0), &[3, 4]).unwrap();
    let t = Tensor::new(uniform(&mut r, 12, -2.0, 2.0), &[3, 4]).unwrap();
    let kd = kd_loss(&z, &t, &[0, 1, 2], &spec(0.0, 3.0)).unwrap();
    assert_eq!(kd.item().to_bits(), match_loss(&z, &t, 3.0).unwrap().item().to_bits());
}

#[test]
fn mixture_weights_components() {
    let mut r = rng(8);
    let z = Tensor::param(uniform(&mut r, 12, -2.0, 2.0), &[3, 4]).unwrap();
    let t = Tensor::new(uniform(&mut r, 12, -2.0, 2.0), &[3, 4]).unwrap();
    let y = [3, 1, 0];
    let kd = kd_loss(&z, &t, &y, &spec(0.9, 4.0)).unwrap().item();
    let expect = 0.9 * z.cross_entropy(&y).unwrap().item() + 0.1 * match_loss(&z, &t, 4.0).unwrap().item();
    assert!((kd - expect).abs() < 1e-14);
}

#[test]
fn matching_gradient_vanishes_when_student_equals_teacher() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let v = uniform(&mut r, 15, -6.0, 6.0);
        let z = Tensor::param(v.clone(), &[3, 5]).unwrap();
        let t = Tensor::new(v, &[3, 5]).unwrap();
        let temp = [1.0, 2.0, 4.0, 10.0][seed as usize % 4];
        match_loss(&z, &t, temp).unwrap().backward().unwrap();
        for g in z.grad().unwrap() {
            assert!(g.abs() <= 1e-10, "{g}");
        }
    }
}

#[test]
fn matching_gradient_matches_closed_form() {
    // per-example gradient (softmax(z/T) - softmax(t/T)) / T, averaged over the batch
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let n = 1 + seed as usize % 4;
        let k = 5;
        let zv = uniform(&mut r, n * k, -5.0, 5.0);
        let tv = uniform(&mut r, n * k, -5.0, 5.0);
        let temp = [1.0, 2.0, 4.0, 8.0][seed as usize % 4];
        let z = Tensor::param(zv.clone(), &[n, k]).unwrap();
        let t = Tensor::new(tv.clone(), &[n, k]).unwrap();
        match_loss(&z, &t, temp).unwrap().backward().unwrap();
        let ps = softmax_rows(&zv, k, temp);
        let pt = softmax_rows(&tv, k, temp);
        for ((g, a), b) in z.grad().unwrap().iter().zip(&ps).zip(&pt) {
            let expect = (a - b) / temp / n as f64;
            assert!((g - expect).abs() <= 1e-8, "{g} vs {expect}");
        }
    }
}

#[test]
fn teacher_receives_no_gradient() {
    let mut r = rng(2);
    let z = Tensor::param(uniform(&mut r, 8, -1.0, 1.0), &[2, 4]).unwrap();
    let t = Tensor::param(uniform(&mut r, 8, -1.0, 1.0), &[2, 4]).unwrap();
    kd_loss(&z, &t, &[0, 3], &spec(0.5, 4.0)).unwrap().backward().unwrap();
    assert!(t.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)));
}

#[test]
fn shape_mismatch_is_rejected() {
    let z = Tensor::<f64>::zeros(&[2, 4]);
    let t = Tensor::<f64>::zeros(&[2, 5]);
    assert!(match_loss(&z, &t, 4.0).is_err());
}
