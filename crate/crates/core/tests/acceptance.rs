//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.
//!
//! Criterion 9 reads CIFAR-10 binary batches from `$CIFAR10_DIR`.

mod common;

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{cwi_direct, enumerate_expected_flops, enumeration_specs, grad_cases, rng, softmax, uniform};
use netshrink::arch::gumbel_soft_sample;
use netshrink::checkpoint::{search_state_from, Checkpoint};
use netshrink::config::ExperimentConfig;
use netshrink::cost::{cost_loss, e_cost, CostBranch, CostSpec, LayerCostTable};
use netshrink::distill::{kd_loss, match_loss, KDSpec, TransferMode};
use netshrink::pipeline::{self, PhaseOptions, ARCH_RECORD, SEARCH_CKPT, TEACHER_CKPT};
use netshrink::supernet::{ArchParams, DerivedArch};
use netshrink::tensor::Tensor;
use netshrink::Error;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t <= limit, || {
        format!("took {:.0}s, limit {:.0}s", t.as_secs_f64(), limit.as_secs_f64())
    })
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: (f64, &str) = (0.0, "");
    for (name, case) in grad_cases::ALL {
        for seed in 0..20 {
            let err = case(seed);
            ensure(err < 1e-5, || format!("{name} instance {seed}: relative error {err:e}"))?;
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    within(Duration::from_secs(120), start)?;
    Ok(format!(
        "{} ops x 20 instances, worst {:.1e} ({}), {:.1}s",
        grad_cases::ALL.len(),
        worst.0,
        worst.1,
        start.elapsed().as_secs_f64()
    ))
}

fn cwi_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for c in 1..=8 {
        for target in 1..=8 {
            let shape = [2, c, 3, 2];
            let x = uniform(&mut rng((c * 8 + target) as u64), shape.iter().product(), -5.0, 5.0);
            let got = Tensor::new(x.clone(), &shape)
                .unwrap()
                .channel_pool(target)
                .unwrap()
                .to_vec();
            for (g, e) in got.iter().zip(cwi_direct(&x, shape, target)) {
                let err = (g - e).abs() / e.abs().max(1.0);
                ensure(err <= 4.0 * f64::EPSILON, || format!("C={c} c={target}: {g} vs {e}"))?;
                worst = worst.max(err);
            }
            if c == target {
                ensure(got == x, || format!("C=c={c} is not the identity"))?;
            }
        }
    }
    Ok(format!("64 (C, c) pairs, worst relative deviation {worst:.1e}"))
}

fn expected_cost_oracle() -> Outcome {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for spec in enumeration_specs() {
        let table = LayerCostTable::new(&spec);
        for seed in 0..10 {
            let arch = ArchParams::<f64>::uniform(&spec).unwrap();
            let mut r = rng(seed);
            for p in arch.params() {
                let n = p.numel();
                p.data_mut().copy_from_slice(&uniform(&mut r, n, -3.0, 3.0));
            }
            let (oracle, networks) = enumerate_expected_flops(&spec, &arch, true);
            ensure(networks <= 64, || format!("{networks} networks"))?;
            let got = e_cost(&arch, &table).unwrap().item();
            let err = ((got - oracle) / oracle).abs();
            ensure(err < 1e-9, || format!("{got} vs enumerated {oracle}"))?;
            worst = worst.max(err);
            cases += 1;
        }
    }
    Ok(format!(
        "{cases} supernets with depth choices, worst relative error {worst:.1e}"
    ))
}

fn gumbel_statistics() -> Outcome {
    let logits = [1.0, -0.5, 0.3, 2.0, 0.0];
    let p = softmax(&logits);
    let t = Tensor::new(logits.to_vec(), &[5]).unwrap();
    let mut r = rng(0);
    let mut counts = [0usize; 5];
    for _ in 0..10_000 {
        let s = gumbel_soft_sample(&t, 0.1, &mut r).unwrap().soft.to_vec();
        let best = (0..5).fold(0, |b, i| if s[i] > s[b] { i } else { b });
        counts[best] += 1;
    }
    let mut worst_freq = 0.0f64;
    for i in 0..5 {
        let d = (counts[i] as f64 / 10_000.0 - p[i]).abs();
        ensure(d <= 0.02, || format!("tau=0.1 entry {i}: off by {d:.4}"))?;
        worst_freq = worst_freq.max(d);
    }
    let mut worst_uniform = 0.0f64;
    for _ in 0..10_000 {
        for v in gumbel_soft_sample(&t, 1e6, &mut r).unwrap().soft.to_vec() {
            let d = (v - 0.2).abs();
            ensure(d <= 1e-3, || format!("tau=1e6 entry {v}"))?;
            worst_uniform = worst_uniform.max(d);
        }
    }
    Ok(format!(
        "tau=0.1 max |freq - p| {worst_freq:.4}; tau=1e6 max |p - 1/n| {worst_uniform:.1e}"
    ))
}

fn cost_loss_branches() -> Outcome {
    let spec = CostSpec::new(1000.0, 0.05, 2.0).unwrap();
    let (lo, hi) = spec.band();
    let e = Tensor::param(vec![800.0], &[1]).unwrap();
    for f in [lo, hi, 1000.0] {
        ensure(spec.branch(f) == CostBranch::Inside, || format!("f={f} not inside"))?;
        ensure(cost_loss(&e, f, &spec).unwrap().item() == 0.0, || {
            format!("nonzero loss at f={f}")
        })?;
    }
    let mut checked = 0;
    for e0 in [10.0, 500.0, 1000.0, 4000.0] {
        for (f, sign) in [(hi + 1.0, 1.0), (3000.0, 1.0), (lo - 1.0, -1.0), (10.0, -1.0)] {
            let e = Tensor::param(vec![e0], &[1]).unwrap();
            cost_loss(&e, f, &spec).unwrap().backward().unwrap();
            let g = e.grad().unwrap()[0];
            ensure(g * sign > 0.0, || {
                format!("f={f} e={e0}: gradient {g} points away from the band")
            })?;
            checked += 1;
        }
    }
    Ok(format!(
        "band edges inside; {checked} (e, f) pairs push toward the band"
    ))
}

fn search_config(dir: &Path, lambda: f64) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(&format!(
        r#"
seed = 0
output_dir = "{}"
[dataset]
kind = "synthetic"
classes = 4
train_samples = 2000
[supernet]
candidate_ratios = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
[cost]
lambda = {lambda:?}
toleration = 0.05
target_ratio = 0.5
[search]
epochs = 50
subset_size = 2
batch_size = 8
arch_lr = 0.05
"#,
        dir.display()
    ))
    .unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn unconstrained_search() -> Outcome {
    let start = Instant::now();
    let dir = scratch("c6");
    let cfg = search_config(&dir, 0.0);
    let arch = pipeline::run_search(&cfg, None, &PhaseOptions::default()).map_err(|e| e.to_string())?;
    within(Duration::from_secs(600), start)?;
    let spec = cfg.supernet_spec().unwrap();
    let full = spec.full_arch();
    ensure(arch.arch == full, || {
        format!("derived widths {:?}, expected {:?}", arch.arch.widths, full.widths)
    })?;
    let state = search_state_from::<f64>(&Checkpoint::load(&dir.join(SEARCH_CKPT)).unwrap()).unwrap();
    let initial = ArchParams::<f64>::uniform(&spec).unwrap().mean_discrepancy();
    let first = state.metrics[0].discrepancy;
    let last = state.metrics.last().unwrap().discrepancy;
    ensure(last > initial && last > first, || {
        format!("final discrepancy {last:.4} vs initial {initial:.4} / after epoch 0 {first:.4}")
    })?;
    Ok(format!(
        "widths {:?}, discrepancy {initial:.4} -> {first:.4} (epoch 0) -> {last:.4}, {:.1}s",
        arch.arch.widths,
        start.elapsed().as_secs_f64()
    ))
}

fn constrained_search() -> Outcome {
    let start = Instant::now();
    let dir = scratch("c7");
    let cfg = search_config(&dir, 2.0);
    let arch = pipeline::run_search(&cfg, None, &PhaseOptions::default()).map_err(|e| e.to_string())?;
    within(Duration::from_secs(600), start)?;
    let ratio = arch.flops / arch.max_flops;
    ensure((0.475..=0.525).contains(&ratio), || {
        format!("f_cost {ratio:.4} of max with widths {:?}", arch.arch.widths)
    })?;
    Ok(format!(
        "widths {:?}, f_cost {ratio:.4} of max, {:.1}s",
        arch.arch.widths,
        start.elapsed().as_secs_f64()
    ))
}

fn kd_properties() -> Outcome {
    let spec = |lambda| KDSpec {
        temperature: 4.0,
        lambda,
        mode: TransferMode::Kd,
    };
    let mut worst_zero = 0.0f64;
    let mut worst_analytic = 0.0f64;
    for seed in 0..20 {
        let mut r = rng(seed);
        let zv = uniform(&mut r, 15, -5.0, 5.0);
        let tv = uniform(&mut r, 15, -5.0, 5.0);
        let labels = [0, 2, 4];
        let z = Tensor::param(zv.clone(), &[3, 5]).unwrap();
        let t = Tensor::new(tv.clone(), &[3, 5]).unwrap();
        let kd = kd_loss(&z, &t, &labels, &spec(1.0)).unwrap().item();
        let ce = z.cross_entropy(&labels).unwrap().item();
        ensure(kd.to_bits() == ce.to_bits(), || format!("lambda=1: {kd} vs {ce}"))?;

        let same = Tensor::new(zv.clone(), &[3, 5]).unwrap();
        match_loss(&z, &same, 4.0).unwrap().backward().unwrap();
        for g in z.grad().unwrap() {
            ensure(g.abs() <= 1e-10, || format!("gradient {g} at z = teacher"))?;
            worst_zero = worst_zero.max(g.abs());
        }

        z.zero_grad();
        for row in 0..3 {
            // one example at a time, so the batch mean is the per-example loss
            let zr = Tensor::param(zv[row * 5..row * 5 + 5].to_vec(), &[1, 5]).unwrap();
            let tr = Tensor::new(tv[row * 5..row * 5 + 5].to_vec(), &[1, 5]).unwrap();
            match_loss(&zr, &tr, 4.0).unwrap().backward().unwrap();
            let ps = softmax(&zv[row * 5..row * 5 + 5].iter().map(|v| v / 4.0).collect::<Vec<_>>());
            let pt = softmax(&tv[row * 5..row * 5 + 5].iter().map(|v| v / 4.0).collect::<Vec<_>>());
            for (i, g) in zr.grad().unwrap().iter().enumerate() {
                let d = (g - (ps[i] - pt[i]) / 4.0).abs();
                ensure(d <= 1e-8, || format!("analytic gradient off by {d:e}"))?;
                worst_analytic = worst_analytic.max(d);
            }
        }
    }
    Ok(format!(
        "lambda=1 bit-exact; |grad| at z=t <= {worst_zero:.1e}; analytic gradient within {worst_analytic:.1e}"
    ))
}

fn cifar_config(dir: &Path, data: &Path, seed: u64) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(&format!(
        r#"
seed = {seed}
output_dir = "{}"
[dataset]
kind = "cifar10"
path = "{}"
subset = 5000
test_subset = 2000
seed = 0
[supernet]
stages = [[{{ width = 16 }}], [{{ width = 32, stride = 2 }}], [{{ width = 64, stride = 2 }}]]
[teacher]
epochs = 30
batch_size = 64
[search]
epochs = 30
batch_size = 32
arch_lr = 0.05
[student]
epochs = 30
batch_size = 64
"#,
        dir.display(),
        data.display()
    ))
    .unwrap()
}

fn transfer_ordering() -> Outcome {
    let start = Instant::now();
    let data = std::env::var_os("CIFAR10_DIR")
        .map(PathBuf::from)
        .ok_or("CIFAR10_DIR is not set; the CIFAR-10 binary batches are required")?;
    let all = PhaseOptions::default();
    let mut acc = [0.0f64; 3];
    let modes = [TransferMode::None, TransferMode::Init, TransferMode::Kd];
    for seed in 0..3 {
        let dir = scratch(&format!("c9-{seed}"));
        let cfg = cifar_config(&dir, &data, seed);
        pipeline::pretrain_teacher(&cfg, &all).map_err(|e| e.to_string())?;
        let teacher = dir.join(TEACHER_CKPT);
        pipeline::run_search(&cfg, Some(&teacher), &all).map_err(|e| e.to_string())?;
        for (k, mode) in modes.into_iter().enumerate() {
            let r =
                pipeline::transfer(&cfg, &dir.join(ARCH_RECORD), &teacher, mode, &all).map_err(|e| e.to_string())?;
            acc[k] += r.test_accuracy / 3.0;
        }
    }
    within(Duration::from_secs(3600), start)?;
    let [none, init, kd] = acc;
    let detail = format!("mean accuracy none {none:.4}, init {init:.4}, kd {kd:.4}");
    ensure(kd >= init && init >= none, || format!("ordering violated: {detail}"))?;
    Ok(detail)
}

#[derive(Debug, Clone, PartialEq)]
struct RunSummary {
    teacher_accuracy: f64,
    teacher_flops: f64,
    arch: DerivedArch,
    student_accuracy: f64,
    student_flops: f64,
    eval_accuracy: f64,
}

fn pipeline_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = search_config(dir, 2.0);
    cfg.teacher.epochs = 10;
    cfg.teacher.batch_size = 32;
    cfg.student.epochs = 10;
    cfg.student.batch_size = 32;
    cfg
}

/// Runs every phase, pausing each one after `pause` epochs per invocation
/// when given.
fn run_pipeline(dir: &Path, pause: Option<usize>) -> Result<RunSummary, String> {
    let cfg = pipeline_config(dir);
    let opts = PhaseOptions { max_epochs: pause };
    fn until_done<V>(mut f: impl FnMut() -> netshrink::Result<V>) -> Result<V, String> {
        loop {
            match f() {
                Err(Error::Interrupted { .. }) => continue,
                other => return other.map_err(|e| e.to_string()),
            }
        }
    }
    let teacher = until_done(|| pipeline::pretrain_teacher(&cfg, &opts))?;
    let tpath = dir.join(TEACHER_CKPT);
    until_done(|| pipeline::run_search(&cfg, Some(&tpath), &opts))?;
    let derived = pipeline::derive(&dir.join(SEARCH_CKPT)).map_err(|e| e.to_string())?;
    let student = until_done(|| pipeline::transfer(&cfg, &dir.join(ARCH_RECORD), &tpath, TransferMode::Kd, &opts))?;
    let eval = pipeline::eval_checkpoint(&dir.join(pipeline::student_ckpt_name(TransferMode::Kd)))
        .map_err(|e| e.to_string())?;
    pipeline::report(dir).map_err(|e| e.to_string())?;
    Ok(RunSummary {
        teacher_accuracy: teacher.test_accuracy,
        teacher_flops: teacher.record.flops,
        arch: derived.arch,
        student_accuracy: student.test_accuracy,
        student_flops: eval.record.flops,
        eval_accuracy: eval.test_accuracy,
    })
}

static REFERENCE_RUN: OnceLock<(Result<RunSummary, String>, Duration)> = OnceLock::new();

fn reference_run() -> &'static (Result<RunSummary, String>, Duration) {
    REFERENCE_RUN.get_or_init(|| {
        let start = Instant::now();
        let r = run_pipeline(&scratch("c10-a"), None);
        (r, start.elapsed())
    })
}

fn end_to_end() -> Outcome {
    let (run, took) = reference_run();
    let r = run.clone()?;
    ensure(*took <= Duration::from_secs(1800), || {
        format!("took {:.0}s", took.as_secs_f64())
    })?;
    ensure(r.eval_accuracy.to_bits() == r.student_accuracy.to_bits(), || {
        "eval disagrees with transfer".into()
    })?;
    let acc_ratio = r.student_accuracy / r.teacher_accuracy;
    let flop_ratio = r.student_flops / r.teacher_flops;
    let detail = format!(
        "teacher {:.4}, student {:.4} ({:.1}% of teacher) at {:.1}% of teacher FLOPs, widths {:?}, {:.1}s",
        r.teacher_accuracy,
        r.student_accuracy,
        100.0 * acc_ratio,
        100.0 * flop_ratio,
        r.arch.widths,
        took.as_secs_f64()
    );
    ensure(acc_ratio >= 0.9 && flop_ratio <= 0.55, || detail.clone())?;
    Ok(detail)
}

/// Checkpoint bytes without the embedded config, whose output directory
/// differs between runs.
fn checkpoint_content(path: &Path) -> Result<Vec<u8>, String> {
    let mut ck = Checkpoint::load(path).map_err(|e| e.to_string())?;
    ck.meta.remove("config");
    Ok(ck.to_bytes())
}

fn determinism_and_resume() -> Outcome {
    let a = reference_run().0.clone()?;
    let b = run_pipeline(&scratch("c11-b"), None)?;
    ensure(a == b, || format!("identical seeds differ: {a:?} vs {b:?}"))?;
    let c = run_pipeline(&scratch("c11-c"), Some(3))?;
    ensure(a == c, || format!("interrupted run differs: {a:?} vs {c:?}"))?;
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let names = [TEACHER_CKPT, SEARCH_CKPT, "student_kd.ckpt"];
    for name in names {
        let ref_bytes = checkpoint_content(&root.join("c10-a").join(name))?;
        for other in ["c11-b", "c11-c"] {
            ensure(checkpoint_content(&root.join(other).join(name))? == ref_bytes, || {
                format!("{name} differs in {other}")
            })?;
        }
    }
    Ok(format!(
        "two seeded runs and a run paused every 3 epochs agree bit-for-bit on {} and accuracies",
        names.join(", ")
    ))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient suite", gradient_suite),
        ("CWI oracle", cwi_oracle),
        ("expected-cost oracle", expected_cost_oracle),
        ("Gumbel statistics", gumbel_statistics),
        ("cost-loss branches", cost_loss_branches),
        ("unconstrained search", unconstrained_search),
        ("constrained search", constrained_search),
        ("KD properties", kd_properties),
        ("transfer ordering", transfer_ordering),
        ("end-to-end pipeline", end_to_end),
        ("determinism and resume", determinism_and_resume),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail}", i + 1),
            Err(why) => {
                println!("criterion {:>2} FAIL {name}: {why}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
