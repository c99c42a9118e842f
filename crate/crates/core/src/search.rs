//! Alternating optimization of supernet weights and architecture
//! distributions.
//!
//! Each iteration takes one SGD step on the training split with the
//! architecture logits detached, then one Adam step on the architecture
//! logits from a validation batch with the network weights frozen.

use serde::{Deserialize, Serialize};

use crate::arch::TemperatureSchedule;
use crate::cost::{e_cost, f_cost, val_loss, CostSpec, LayerCostTable};
use crate::data::{epoch_rng, shuffled_indices, Dataset};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, Adam, Sgd};
use crate::scalar::{cast, Scalar};
use crate::supernet::{ConvNet, DerivedArch, SuperNet, SuperNetSpec};
use crate::tensor::BatchNormMode;

pub const METRICS_HEADER: &str = "epoch,train_loss,val_ce,cost_loss,e_cost,f_cost,discrepancy,tau";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Share of the training set used for weight updates; the rest drives
    /// the architecture updates.
    pub train_fraction: f64,
    /// Number of width candidates sampled per layer and forward pass.
    pub subset_size: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub weight_lr_max: f64,
    pub weight_lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub arch_lr: f64,
    pub arch_weight_decay: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 600,
            batch_size: 256,
            train_fraction: 0.5,
            subset_size: 2,
            tau_start: 10.0,
            tau_end: 0.1,
            weight_lr_max: 0.1,
            weight_lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            arch_lr: 1e-3,
            arch_weight_decay: 1e-3,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: String| Error::Config {
            key: format!("search.{field}"),
            detail,
        };
        if self.epochs == 0 {
            return Err(bad("epochs", "must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(bad("train_fraction", format!("{} outside (0, 1)", self.train_fraction)));
        }
        if self.subset_size == 0 {
            return Err(bad("subset_size", "must be at least 1".into()));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return Err(bad("tau_start", "temperatures must be positive".into()));
        }
        if !(self.weight_lr_max > 0.0) || !(self.weight_lr_min >= 0.0) || self.weight_lr_min > self.weight_lr_max {
            return Err(bad(
                "weight_lr_max",
                "need 0 <= weight_lr_min <= weight_lr_max, weight_lr_max > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("momentum", format!("{} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(bad("weight_decay", "must be >= 0".into()));
        }
        if !(self.arch_lr > 0.0) {
            return Err(bad("arch_lr", "must be positive".into()));
        }
        if !(self.arch_weight_decay >= 0.0) {
            return Err(bad("arch_weight_decay", "must be >= 0".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<TemperatureSchedule> {
        TemperatureSchedule::new(self.tau_start, self.tau_end, self.epochs)
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ce: f64,
    /// Mean unweighted cost loss over the epoch's validation steps.
    pub cost_loss: f64,
    /// Expected FLOPs at the end of the epoch.
    pub e_cost: f64,
    /// FLOPs of the argmax architecture at the end of the epoch.
    pub f_cost: f64,
    pub discrepancy: f64,
    pub tau: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.val_ce,
            self.cost_loss,
            self.e_cost,
            self.f_cost,
            self.discrepancy,
            self.tau
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Supernet, optimizer states and history at an epoch boundary.
#[derive(Debug)]
pub struct SearchState<T: Scalar> {
    pub supernet: SuperNet<T>,
    pub sgd: Sgd<T>,
    pub adam: Adam<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub metrics: Vec<EpochMetrics>,
}

impl<T: Scalar> SearchState<T> {
    /// Fresh state; weights start from `init` when given, otherwise He-random.
    pub fn new(spec: SuperNetSpec, cfg: &SearchConfig, seed: u64, init: Option<ConvNet<T>>) -> Result<Self> {
        cfg.validate()?;
        let supernet = match init {
            Some(net) => SuperNet::from_weights(spec, net)?,
            None => SuperNet::new(spec, &mut epoch_rng(seed, usize::MAX))?,
        };
        Self::from_parts(supernet, cfg, seed)
    }

    pub fn from_parts(supernet: SuperNet<T>, cfg: &SearchConfig, seed: u64) -> Result<Self> {
        let sgd = Sgd::new(&supernet.net.params(), cfg.momentum, cfg.weight_decay);
        let adam = Adam::new(&supernet.arch.params(), cfg.arch_lr, cfg.arch_weight_decay)?;
        Ok(SearchState {
            supernet,
            sgd,
            adam,
            epoch: 0,
            seed,
            metrics: Vec::new(),
        })
    }

    pub fn derived(&self) -> Result<DerivedArch> {
        self.supernet.derive()
    }
}

fn finite<T: Scalar>(v: T, epoch: usize) -> Result<f64> {
    let x = v.to_f64().unwrap_or(f64::NAN);
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Diverged { epoch, loss: x })
    }
}

/// Runs epochs until `cfg.epochs` are complete and returns the argmax
/// architecture. `on_epoch` runs after every completed epoch, so a
/// divergence leaves the last completed epoch persisted by the caller.
///
/// The validation order is reshuffled every epoch and wraps around when the
/// validation split is exhausted before the training split.
pub fn search<T: Scalar>(
    state: &mut SearchState<T>,
    cfg: &SearchConfig,
    cost: &CostSpec,
    train: &Dataset,
    val: &Dataset,
    on_epoch: &mut dyn FnMut(&SearchState<T>) -> Result<()>,
) -> Result<DerivedArch> {
    cfg.validate()?;
    cost.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset("search needs non-empty train and val splits".into()));
    }
    let schedule = cfg.schedule()?;
    let table = LayerCostTable::new(&state.supernet.spec);
    let net_params = state.supernet.net.params();
    let arch_params = state.supernet.arch.params();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let tau = schedule.value(epoch);
        let tau_t: T = cast(tau);
        let lr = cosine_lr(epoch, cfg.epochs, cfg.weight_lr_max, cfg.weight_lr_min);
        let mut rng = epoch_rng(state.seed, epoch);
        let order = shuffled_indices(train.len(), &mut rng);
        let mut val_order = shuffled_indices(val.len(), &mut rng);
        let mut val_pos = 0;
        let (mut train_sum, mut val_sum, mut cost_sum, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let sn = &state.supernet;

            let (x, y) = train.batch::<T, _>(chunk, Some(&mut rng))?;
            let sample = sn.arch.sample(tau_t, cfg.subset_size, false, &mut rng)?;
            let loss = sn
                .forward_search(&x, &sample, BatchNormMode::Train)?
                .cross_entropy(&y)?;
            train_sum += finite(loss.item(), epoch)?;
            sn.net.zero_grad();
            loss.backward()?;
            state.sgd.step(&net_params, lr)?;

            let mut vidx = Vec::with_capacity(cfg.batch_size);
            while vidx.len() < cfg.batch_size.min(val.len()) {
                if val_pos == val_order.len() {
                    val_order = shuffled_indices(val.len(), &mut rng);
                    val_pos = 0;
                }
                vidx.push(val_order[val_pos]);
                val_pos += 1;
            }
            let (xv, yv) = val.batch::<T, _>(&vidx, Some(&mut rng))?;
            sn.net.set_requires_grad(false);
            sn.arch.zero_grad();
            let sample = sn.arch.sample(tau_t, cfg.subset_size, true, &mut rng)?;
            let logits = sn.forward_search(&xv, &sample, BatchNormMode::Train);
            sn.net.set_requires_grad(true);
            let f = f_cost(&sn.derive()?, &table);
            let e = e_cost(&sn.arch, &table)?;
            let vl = val_loss(&logits?, &yv, &e, f, cost)?;
            val_sum += finite(vl.ce, epoch)?;
            cost_sum += finite(vl.cost, epoch)?;
            finite(vl.total.item(), epoch)?;
            vl.total.backward()?;
            state.adam.step(&arch_params)?;
            steps += 1;
        }
        let sn = &state.supernet;
        let e = e_cost(&sn.arch, &table)?.item();
        let steps_f = steps as f64;
        state.metrics.push(EpochMetrics {
            epoch,
            train_loss: train_sum / steps_f,
            val_ce: val_sum / steps_f,
            cost_loss: cost_sum / steps_f,
            e_cost: finite(e, epoch)?,
            f_cost: f_cost(&sn.derive()?, &table),
            discrepancy: sn.arch.mean_discrepancy().to_f64().unwrap_or(f64::NAN),
            tau,
        });
        state.epoch += 1;
        on_epoch(state)?;
    }
    state.derived()
}
