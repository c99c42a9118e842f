//! Versioned named-array checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "NSHRINK\0"
//! version  u32
//! phase    u8       0 teacher, 1 search, 2 student
//! hash     u32 length + UTF-8 config hash
//! epoch    u64      completed epochs
//! meta     u32 count, then (string key, string value) pairs
//! arrays   u32 count, then per array:
//!          string name, u32 rank, u64 extents, f64 values
//! ```
//!
//! Strings are a `u32` byte length followed by UTF-8. Values are stored as
//! `f64`, which represents every `f32` exactly, so loads are bit-exact for
//! both scalar types.

use std::collections::BTreeMap;
use std::path::Path;

use crate::arch::{DepthDistribution, WidthDistribution};
use crate::distill::{EpochRecord, TrainState};
use crate::error::{Error, Result};
use crate::optim::{Adam, Sgd};
use crate::scalar::{cast, Scalar};
use crate::search::{EpochMetrics, SearchState};
use crate::supernet::{ArchParams, ConvNet, NetLayout, SuperNet, SuperNetSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NSHRINK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Teacher,
    Search,
    Student,
}

impl Phase {
    fn tag(self) -> u8 {
        match self {
            Phase::Teacher => 0,
            Phase::Search => 1,
            Phase::Student => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Phase::Teacher),
            1 => Ok(Phase::Search),
            2 => Ok(Phase::Student),
            other => Err(Error::Checkpoint(format!("unknown phase tag {other}"))),
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Teacher => "teacher",
            Phase::Search => "search",
            Phase::Student => "student",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    pub config_hash: String,
    pub epoch: u64,
    pub meta: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, NamedArray>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn new(phase: Phase, config_hash: &str, epoch: usize) -> Self {
        Checkpoint {
            phase,
            config_hash: config_hash.to_string(),
            epoch: epoch as u64,
            meta: BTreeMap::new(),
            arrays: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.phase.tag());
        put_string(&mut out, &self.config_hash);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_string(&mut out, k);
            put_string(&mut out, v);
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            put_string(&mut out, name);
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let phase = Phase::from_tag(r.u8()?)?;
        let config_hash = r.string()?;
        let epoch = r.u64()?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            meta.insert(k, r.string()?);
        }
        let mut arrays = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("array too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.insert(name, NamedArray { shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            phase,
            config_hash,
            epoch,
            meta,
            arrays,
        })
    }

    /// Writes through a temporary sibling and renames it into place, so a
    /// crash never leaves a partial file at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn expect(&self, phase: Phase, config_hash: Option<&str>) -> Result<()> {
        if self.phase != phase {
            return Err(Error::Checkpoint(format!(
                "expected a {phase} checkpoint, found {}",
                self.phase
            )));
        }
        if let Some(h) = config_hash {
            if h != self.config_hash {
                return Err(Error::Checkpoint(format!(
                    "config hash mismatch: checkpoint {}, current {h}",
                    self.config_hash
                )));
            }
        }
        Ok(())
    }

    pub fn put<T: Scalar>(&mut self, name: &str, shape: &[usize], data: &[T]) {
        self.arrays.insert(
            name.to_string(),
            NamedArray {
                shape: shape.to_vec(),
                data: data.iter().map(|v| v.to_f64().expect("finite cast")).collect(),
            },
        );
    }

    pub fn put_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.put(name, t.shape(), &t.data());
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array '{name}'")))
    }

    pub fn get_vec<T: Scalar>(&self, name: &str, len: usize) -> Result<Vec<T>> {
        let a = self.get(name)?;
        if a.data.len() != len {
            return Err(Error::Checkpoint(format!(
                "array '{name}' has {} values, expected {len}",
                a.data.len()
            )));
        }
        Ok(a.data.iter().map(|&v| cast(v)).collect())
    }

    /// Overwrites `t`'s values from the stored array of the same shape.
    pub fn fill_tensor<T: Scalar>(&self, name: &str, t: &Tensor<T>) -> Result<()> {
        let a = self.get(name)?;
        if a.shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "array '{name}' shape {:?}, expected {:?}",
                a.shape,
                t.shape()
            )));
        }
        let mut d = t.data_mut();
        for (dst, &src) in d.iter_mut().zip(&a.data) {
            *dst = cast(src);
        }
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata '{key}'")))
    }

    pub fn meta_json<V: serde::de::DeserializeOwned>(&self, key: &str) -> Result<V> {
        serde_json::from_str(self.meta(key)?).map_err(|e| Error::Checkpoint(format!("metadata '{key}': {e}")))
    }

    pub fn set_meta_json<V: serde::Serialize>(&mut self, key: &str, v: &V) {
        self.meta
            .insert(key.to_string(), serde_json::to_string(v).expect("metadata serializes"));
    }
}

/// Writes `bytes` to a temporary file next to `path` and renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = dir.join(format!(".{name}.tmp"));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn store_net<T: Scalar>(ck: &mut Checkpoint, prefix: &str, net: &ConvNet<T>) {
    ck.set_meta_json(&format!("{prefix}.layout"), &net.layout());
    for (s, stage) in net.stages.iter().enumerate() {
        for (l, layer) in stage.iter().enumerate() {
            let p = format!("{prefix}.s{s}.l{l}");
            ck.put_tensor(&format!("{p}.weight"), &layer.weight);
            ck.put_tensor(&format!("{p}.gamma"), &layer.gamma);
            ck.put_tensor(&format!("{p}.beta"), &layer.beta);
            let st = layer.stats.borrow();
            ck.put(&format!("{p}.running_mean"), &[st.mean.len()], &st.mean);
            ck.put(&format!("{p}.running_var"), &[st.var.len()], &st.var);
        }
    }
    ck.put_tensor(&format!("{prefix}.head.weight"), &net.head.weight);
    ck.put_tensor(&format!("{prefix}.head.bias"), &net.head.bias);
}

pub fn load_net<T: Scalar>(ck: &Checkpoint, prefix: &str) -> Result<ConvNet<T>> {
    let layout: NetLayout = ck.meta_json(&format!("{prefix}.layout"))?;
    let net = ConvNet::zeros(&layout);
    for (s, stage) in net.stages.iter().enumerate() {
        for (l, layer) in stage.iter().enumerate() {
            let p = format!("{prefix}.s{s}.l{l}");
            ck.fill_tensor(&format!("{p}.weight"), &layer.weight)?;
            ck.fill_tensor(&format!("{p}.gamma"), &layer.gamma)?;
            ck.fill_tensor(&format!("{p}.beta"), &layer.beta)?;
            let mut st = layer.stats.borrow_mut();
            let c = st.mean.len();
            st.mean = ck.get_vec(&format!("{p}.running_mean"), c)?;
            st.var = ck.get_vec(&format!("{p}.running_var"), c)?;
        }
    }
    ck.fill_tensor(&format!("{prefix}.head.weight"), &net.head.weight)?;
    ck.fill_tensor(&format!("{prefix}.head.bias"), &net.head.bias)?;
    Ok(net)
}

fn store_sgd<T: Scalar>(ck: &mut Checkpoint, sgd: &Sgd<T>) {
    ck.put("sgd.hyper", &[2], &[sgd.momentum, sgd.weight_decay]);
    for (i, v) in sgd.velocity.iter().enumerate() {
        ck.put(&format!("sgd.velocity.{i}"), &[v.len()], v);
    }
}

fn load_sgd<T: Scalar>(ck: &Checkpoint, params: &[Tensor<T>]) -> Result<Sgd<T>> {
    let h: Vec<T> = ck.get_vec("sgd.hyper", 2)?;
    let velocity = params
        .iter()
        .enumerate()
        .map(|(i, p)| ck.get_vec(&format!("sgd.velocity.{i}"), p.numel()))
        .collect::<Result<_>>()?;
    Ok(Sgd {
        momentum: h[0],
        weight_decay: h[1],
        velocity,
    })
}

fn store_adam<T: Scalar>(ck: &mut Checkpoint, adam: &Adam<T>) {
    ck.put(
        "adam.hyper",
        &[5],
        &[adam.lr, adam.beta1, adam.beta2, adam.eps, adam.weight_decay],
    );
    ck.meta.insert("adam.steps".into(), adam.steps.to_string());
    for (i, (m, v)) in adam.m.iter().zip(&adam.v).enumerate() {
        ck.put(&format!("adam.m.{i}"), &[m.len()], m);
        ck.put(&format!("adam.v.{i}"), &[v.len()], v);
    }
}

fn load_adam<T: Scalar>(ck: &Checkpoint, params: &[Tensor<T>]) -> Result<Adam<T>> {
    let h: Vec<T> = ck.get_vec("adam.hyper", 5)?;
    let steps = ck
        .meta("adam.steps")?
        .parse()
        .map_err(|e| Error::Checkpoint(format!("adam.steps: {e}")))?;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (i, p) in params.iter().enumerate() {
        m.push(ck.get_vec(&format!("adam.m.{i}"), p.numel())?);
        v.push(ck.get_vec(&format!("adam.v.{i}"), p.numel())?);
    }
    Ok(Adam {
        lr: h[0],
        beta1: h[1],
        beta2: h[2],
        eps: h[3],
        weight_decay: h[4],
        m,
        v,
        steps,
    })
}

fn store_arch<T: Scalar>(ck: &mut Checkpoint, arch: &ArchParams<T>) {
    for (i, w) in arch.widths.iter().enumerate() {
        ck.put_tensor(&format!("arch.width.{i}"), &w.logits);
    }
    for (i, d) in arch.depths.iter().enumerate() {
        ck.put_tensor(&format!("arch.depth.{i}"), &d.logits);
    }
}

fn load_arch<T: Scalar>(ck: &Checkpoint, spec: &SuperNetSpec) -> Result<ArchParams<T>> {
    let widths = spec
        .stages
        .iter()
        .flatten()
        .enumerate()
        .map(|(i, l)| {
            let logits = ck.get_vec(&format!("arch.width.{i}"), l.candidates.len())?;
            WidthDistribution::with_logits(l.candidates.clone(), logits)
        })
        .collect::<Result<_>>()?;
    let depths = spec
        .stages
        .iter()
        .enumerate()
        .map(|(i, s)| DepthDistribution::with_logits(ck.get_vec(&format!("arch.depth.{i}"), s.len())?))
        .collect::<Result<_>>()?;
    Ok(ArchParams { widths, depths })
}

const METRIC_COLUMNS: usize = 8;

fn store_metrics(ck: &mut Checkpoint, rows: &[EpochMetrics]) {
    let data: Vec<f64> = rows
        .iter()
        .flat_map(|m| {
            [
                m.epoch as f64,
                m.train_loss,
                m.val_ce,
                m.cost_loss,
                m.e_cost,
                m.f_cost,
                m.discrepancy,
                m.tau,
            ]
        })
        .collect();
    ck.arrays.insert(
        "metrics".into(),
        NamedArray {
            shape: vec![rows.len(), METRIC_COLUMNS],
            data,
        },
    );
}

fn load_metrics(ck: &Checkpoint) -> Result<Vec<EpochMetrics>> {
    let a = ck.get("metrics")?;
    if a.shape.len() != 2 || a.shape[1] != METRIC_COLUMNS {
        return Err(Error::Checkpoint(format!("metrics shape {:?}", a.shape)));
    }
    Ok(a.data
        .chunks_exact(METRIC_COLUMNS)
        .map(|r| EpochMetrics {
            epoch: r[0] as usize,
            train_loss: r[1],
            val_ce: r[2],
            cost_loss: r[3],
            e_cost: r[4],
            f_cost: r[5],
            discrepancy: r[6],
            tau: r[7],
        })
        .collect())
}

/// Checkpoint of a search run at its current epoch. Each epoch's randomness
/// is derived from the seed and the epoch index, so the seed is the whole
/// generator state.
pub fn search_checkpoint<T: Scalar>(state: &SearchState<T>, config_hash: &str) -> Checkpoint {
    let mut ck = Checkpoint::new(Phase::Search, config_hash, state.epoch);
    ck.meta.insert("seed".into(), state.seed.to_string());
    ck.set_meta_json("spec", &state.supernet.spec);
    store_net(&mut ck, "net", &state.supernet.net);
    store_arch(&mut ck, &state.supernet.arch);
    store_sgd(&mut ck, &state.sgd);
    store_adam(&mut ck, &state.adam);
    store_metrics(&mut ck, &state.metrics);
    ck
}

pub fn search_state_from<T: Scalar>(ck: &Checkpoint) -> Result<SearchState<T>> {
    ck.expect(Phase::Search, None)?;
    let spec: SuperNetSpec = ck.meta_json("spec")?;
    let net = load_net(ck, "net")?;
    let arch = load_arch(ck, &spec)?;
    let sgd = load_sgd(ck, &net.params())?;
    let adam = load_adam(ck, &arch.params())?;
    let supernet = SuperNet::from_weights(spec, net)?;
    let supernet = SuperNet { arch, ..supernet };
    Ok(SearchState {
        supernet,
        sgd,
        adam,
        epoch: ck.epoch as usize,
        seed: parse_seed(ck)?,
        metrics: load_metrics(ck)?,
    })
}

fn parse_seed(ck: &Checkpoint) -> Result<u64> {
    ck.meta("seed")?
        .parse()
        .map_err(|e| Error::Checkpoint(format!("seed: {e}")))
}

const HISTORY_COLUMNS: usize = 4;

pub fn train_checkpoint<T: Scalar>(phase: Phase, state: &TrainState<T>, config_hash: &str) -> Checkpoint {
    let mut ck = Checkpoint::new(phase, config_hash, state.epoch);
    ck.meta.insert("seed".into(), state.seed.to_string());
    store_net(&mut ck, "net", &state.net);
    store_sgd(&mut ck, &state.sgd);
    let data: Vec<f64> = state
        .history
        .iter()
        .flat_map(|r| [r.epoch as f64, r.loss, r.train_accuracy, r.lr])
        .collect();
    ck.arrays.insert(
        "history".into(),
        NamedArray {
            shape: vec![state.history.len(), HISTORY_COLUMNS],
            data,
        },
    );
    ck
}

pub fn train_state_from<T: Scalar>(ck: &Checkpoint, phase: Phase) -> Result<TrainState<T>> {
    ck.expect(phase, None)?;
    let net = load_net(ck, "net")?;
    let sgd = load_sgd(ck, &net.params())?;
    let h = ck.get("history")?;
    let history = h
        .data
        .chunks_exact(HISTORY_COLUMNS)
        .map(|r| EpochRecord {
            epoch: r[0] as usize,
            loss: r[1],
            train_accuracy: r[2],
            lr: r[3],
        })
        .collect();
    Ok(TrainState {
        net,
        sgd,
        epoch: ck.epoch as usize,
        seed: parse_seed(ck)?,
        history,
    })
}
