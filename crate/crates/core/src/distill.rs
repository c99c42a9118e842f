//! Teacher pretraining, soft-target matching and student transfer.

use serde::{Deserialize, Serialize};

use crate::data::{epoch_rng, shuffled_indices, Dataset};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, Sgd};
use crate::scalar::{cast, Scalar};
use crate::supernet::{instantiate_derived, ConvNet, DerivedArch, Init, NetLayout, SuperNetSpec};
use crate::tensor::{BatchNormMode, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    /// Random initialization, cross-entropy training.
    None,
    /// Weights sliced from the teacher, cross-entropy training.
    Init,
    /// Random initialization, distillation objective.
    Kd,
}

impl std::str::FromStr for TransferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TransferMode::None),
            "init" => Ok(TransferMode::Init),
            "kd" => Ok(TransferMode::Kd),
            other => Err(Error::invalid("transfer mode", format!("unknown mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for TransferMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TransferMode::None => "none",
            TransferMode::Init => "init",
            TransferMode::Kd => "kd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KDSpec {
    pub temperature: f64,
    /// Weight of the hard-label cross-entropy term.
    pub lambda: f64,
    pub mode: TransferMode,
}

impl Default for KDSpec {
    fn default() -> Self {
        KDSpec {
            temperature: 4.0,
            lambda: 0.9,
            mode: TransferMode::Kd,
        }
    }
}

impl KDSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(
                "kd",
                format!("temperature {} must be positive", self.temperature),
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid("kd", format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// `-mean_n sum_i softmax(t/T)_i * log_softmax(z/T)_i` with the teacher
/// logits `t` treated as constants.
pub fn match_loss<T: Scalar>(student: &Tensor<T>, teacher: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    if student.shape() != teacher.shape() || student.ndim() != 2 {
        return Err(Error::shape(
            "match_loss",
            format!("student {:?} vs teacher {:?}", student.shape(), teacher.shape()),
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(
            "match_loss",
            format!("temperature {temperature} must be positive"),
        ));
    }
    let inv_t: T = cast(1.0 / temperature);
    let soft = teacher.detach().scale(inv_t).softmax()?.detach();
    let n: T = cast(student.shape()[0] as f64);
    Ok(student
        .scale(inv_t)
        .log_softmax()?
        .mul(&soft)?
        .sum()
        .scale(-T::one() / n))
}

/// `lambda * CE(z, y) + (1 - lambda) * match_loss(z, t, T)`; the endpoints
/// return the single component unchanged.
pub fn kd_loss<T: Scalar>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
    labels: &[usize],
    spec: &KDSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    if spec.lambda == 1.0 {
        return student.cross_entropy(labels);
    }
    let matched = match_loss(student, teacher, spec.temperature)?;
    if spec.lambda == 0.0 {
        return Ok(matched);
    }
    let ce = student.cross_entropy(labels)?;
    ce.scale(cast(spec.lambda)).add(&matched.scale(cast(1.0 - spec.lambda)))
}

/// Plain SGD training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 256,
            lr_max: 0.1,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, key: &str) -> Result<()> {
        let bad = |field: &str, detail: String| Error::Config {
            key: format!("{key}.{field}"),
            detail,
        };
        if self.epochs == 0 {
            return Err(bad("epochs", "must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1".into()));
        }
        if !(self.lr_max > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr_max {
            return Err(bad(
                "lr_max",
                format!(
                    "need 0 <= lr_min <= lr_max, lr_max > 0 (got {} / {})",
                    self.lr_min, self.lr_max
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("momentum", format!("{} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(bad("weight_decay", format!("{} must be >= 0", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub lr: f64,
}

/// Everything needed to continue training at an epoch boundary.
#[derive(Debug)]
pub struct TrainState<T: Scalar> {
    pub net: ConvNet<T>,
    pub sgd: Sgd<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(net: ConvNet<T>, cfg: &TrainConfig, seed: u64) -> Self {
        let sgd = Sgd::new(&net.params(), cfg.momentum, cfg.weight_decay);
        TrainState {
            net,
            sgd,
            epoch: 0,
            seed,
            history: Vec::new(),
        }
    }
}

/// What the network is trained to minimize.
pub enum Objective<'a, T: Scalar> {
    CrossEntropy,
    /// The teacher runs in eval mode on the same augmented batch.
    Distill {
        teacher: &'a ConvNet<T>,
        spec: KDSpec,
    },
}

fn batch_accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    let data = logits.data();
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(&data[i * k..(i + 1) * k]) == y)
        .count()
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains until `cfg.epochs` epochs are complete, calling `on_epoch` after
/// each one. Epoch `e` draws all of its randomness from `epoch_rng(seed, e)`.
pub fn train_epochs<T: Scalar>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    data: &Dataset,
    objective: &Objective<'_, T>,
    on_epoch: &mut dyn FnMut(&TrainState<T>) -> Result<()>,
) -> Result<()> {
    cfg.validate("train")?;
    if data.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    if let Objective::Distill { teacher, spec } = objective {
        spec.validate()?;
        teacher.set_requires_grad(false);
    }
    let params = state.net.params();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
        let mut rng = epoch_rng(state.seed, epoch);
        let order = shuffled_indices(data.len(), &mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch::<T, _>(chunk, Some(&mut rng))?;
            let logits = state.net.forward(&x, BatchNormMode::Train)?;
            let loss = match objective {
                Objective::CrossEntropy => logits.cross_entropy(&y)?,
                Objective::Distill { teacher, spec } => {
                    let t = teacher.forward(&x, BatchNormMode::Eval)?;
                    kd_loss(&logits, &t, &y, spec)?
                }
            };
            let value = loss.item().to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            state.net.zero_grad();
            loss.backward()?;
            state.sgd.step(&params, lr)?;
            loss_sum += value * chunk.len() as f64;
            correct += batch_accuracy(&logits, &y);
        }
        state.history.push(EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
            lr,
        });
        state.epoch += 1;
        on_epoch(state)?;
    }
    Ok(())
}

/// Top-1 accuracy in eval mode.
pub fn evaluate<T: Scalar>(net: &ConvNet<T>, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("empty evaluation set".into()));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in all.chunks(batch_size.max(1)) {
        let (x, y) = data.batch::<T, rand_chacha::ChaCha8Rng>(chunk, None)?;
        let logits = net.forward(&x.detach(), BatchNormMode::Eval)?;
        correct += batch_accuracy(&logits, &y);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Fresh full-size network for teacher training.
pub fn teacher_state<T: Scalar>(spec: &SuperNetSpec, cfg: &TrainConfig, seed: u64) -> Result<TrainState<T>> {
    spec.validate()?;
    let mut rng = epoch_rng(seed, usize::MAX);
    let net = ConvNet::random(&NetLayout::from_spec(spec), &mut rng);
    Ok(TrainState::new(net, cfg, seed))
}

/// Trains the unpruned network with cross-entropy.
pub fn train_teacher<T: Scalar>(
    spec: &SuperNetSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainState<T>> {
    let mut state = teacher_state(spec, cfg, seed)?;
    train_epochs(&mut state, cfg, data, &Objective::CrossEntropy, &mut |_| Ok(()))?;
    Ok(state)
}

/// Student network for `arch`, initialized according to the transfer mode.
pub fn student_state<T: Scalar>(
    spec: &SuperNetSpec,
    arch: &DerivedArch,
    teacher: &ConvNet<T>,
    mode: TransferMode,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainState<T>> {
    let mut rng = epoch_rng(seed, usize::MAX);
    let net = match mode {
        TransferMode::Init => instantiate_derived::<T, dyn rand::RngCore>(spec, arch, Init::SliceFromTeacher(teacher))?,
        TransferMode::None | TransferMode::Kd => instantiate_derived(spec, arch, Init::Random(&mut rng))?,
    };
    Ok(TrainState::new(net, cfg, seed))
}

pub fn student_objective<'a, T: Scalar>(teacher: &'a ConvNet<T>, kd: &KDSpec) -> Objective<'a, T> {
    match kd.mode {
        TransferMode::Kd => Objective::Distill { teacher, spec: *kd },
        TransferMode::None | TransferMode::Init => Objective::CrossEntropy,
    }
}

/// Builds and trains a student, returning it with its test accuracy.
#[allow(clippy::too_many_arguments)]
pub fn train_student<T: Scalar>(
    spec: &SuperNetSpec,
    arch: &DerivedArch,
    teacher: &ConvNet<T>,
    train: &Dataset,
    test: &Dataset,
    kd: &KDSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(TrainState<T>, f64)> {
    kd.validate()?;
    let mut state = student_state(spec, arch, teacher, kd.mode, cfg, seed)?;
    train_epochs(&mut state, cfg, train, &student_objective(teacher, kd), &mut |_| Ok(()))?;
    let acc = evaluate(&state.net, test, cfg.batch_size)?;
    Ok((state, acc))
}
