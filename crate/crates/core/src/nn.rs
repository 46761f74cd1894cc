//! Named parameter storage, forward sessions, and the weight-file container.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Grads, Var};
use crate::error::{Error, Result};
use crate::ops::{self, BatchStats};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Learnable tensors plus non-learnable buffers (batch-norm running
/// statistics), both keyed by dotted names.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::data(format!("missing parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::data(format!("missing parameter {name}")))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .values()
            .chain(self.buffers.values())
            .all(Tensor::all_finite)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Folds observed batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats<T>)]) {
        let m = T::of(BN_MOMENTUM);
        for (prefix, stats) in updates {
            for (suffix, observed) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                if let Some(buf) = self.buffers.get_mut(&format!("{prefix}.{suffix}")) {
                    for (r, &o) in buf.data_mut().iter_mut().zip(observed) {
                        *r = (T::one() - m) * *r + m * o;
                    }
                }
            }
        }
    }
}

/// Builds [`ParamStore`]s with Kaiming-normal kernels (fan-in, LeakyReLU
/// gain), zero biases and identity batch norms.
pub struct Initializer {
    rng: ChaCha8Rng,
    slope: f64,
}

impl Initializer {
    pub fn new(seed: u64, leaky_slope: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            slope: leaky_slope,
        }
    }

    /// `2 / ((1 + slope²) · fan_in)`.
    pub fn kaiming_variance(slope: f64, fan_in: usize) -> f64 {
        2.0 / ((1.0 + slope * slope) * fan_in as f64)
    }

    pub fn conv<T: Real>(
        &mut self,
        store: &mut ParamStore<T>,
        name: &str,
        shape: &[usize],
        bias: bool,
    ) {
        let fan_in: usize = shape[1..].iter().product();
        let std = Self::kaiming_variance(self.slope, fan_in).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(normal.sample(&mut self.rng)))
            .collect();
        store
            .params
            .insert(format!("{name}.weight"), Tensor::from_vec(shape, data));
        if bias {
            store
                .params
                .insert(format!("{name}.bias"), Tensor::zeros(&[shape[0]]));
        }
    }

    pub fn batch_norm<T: Real>(&mut self, store: &mut ParamStore<T>, name: &str, channels: usize) {
        store
            .params
            .insert(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        store
            .params
            .insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
        store
            .buffers
            .insert(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        store.buffers.insert(
            format!("{name}.running_var"),
            Tensor::full(&[channels], T::one()),
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, recorded for running-stat updates.
    Train,
    /// Running statistics.
    Eval,
}

/// One forward pass over a [`ParamStore`].
///
/// Parameters become gradient-tracking leaves only when `track_grads` is
/// set; the same name always yields the same leaf so shared weights (the
/// ConvLSTM kernel across time steps) accumulate one gradient.
pub struct Session<'a, T: Real> {
    store: &'a ParamStore<T>,
    mode: Mode,
    track_grads: bool,
    leaves: RefCell<BTreeMap<String, Var<T>>>,
    bn_updates: RefCell<Vec<(String, BatchStats<T>)>>,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode, track_grads: bool) -> Self {
        Self {
            store,
            mode,
            track_grads,
            leaves: RefCell::default(),
            bn_updates: RefCell::default(),
        }
    }

    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self::new(store, Mode::Eval, false)
    }

    /// Pre-binds `name` to an existing variable, e.g. for gradient checks
    /// that perturb one parameter tensor.
    pub fn bind(&self, name: &str, var: Var<T>) {
        self.leaves.borrow_mut().insert(name.to_owned(), var);
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&self, name: &str) -> Result<Var<T>> {
        if let Some(v) = self.leaves.borrow().get(name) {
            return Ok(v.clone());
        }
        let t = self.store.param(name)?.clone();
        let v = if self.track_grads {
            Var::parameter(t)
        } else {
            Var::constant(t)
        };
        self.leaves.borrow_mut().insert(name.to_owned(), v.clone());
        Ok(v)
    }

    fn buffer(&self, name: &str) -> Result<&'a Tensor<T>> {
        self.store
            .buffers
            .get(name)
            .ok_or_else(|| Error::data(format!("missing buffer {name}")))
    }

    /// Same-padded convolution using `{name}.weight` and, if stored,
    /// `{name}.bias`.
    pub fn conv(&self, name: &str, x: &Var<T>) -> Result<Var<T>> {
        let w = self.param(&format!("{name}.weight"))?;
        let expected = w.shape()[1];
        if x.shape().get(1) != Some(&expected) {
            return Err(Error::data(format!(
                "{name}: channel mismatch, expected {expected} input channels, got {:?}",
                x.shape().get(1)
            )));
        }
        let bias_name = format!("{name}.bias");
        let b = if self.store.params.contains_key(&bias_name) {
            Some(self.param(&bias_name)?)
        } else {
            None
        };
        Ok(ops::conv(x, &w, b.as_ref()))
    }

    pub fn batch_norm(&self, name: &str, x: &Var<T>) -> Result<Var<T>> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = ops::batch_norm(x, &gamma, &beta, None, BN_EPS);
                if let Some(stats) = stats {
                    self.bn_updates.borrow_mut().push((name.to_owned(), stats));
                }
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.buffer(&format!("{name}.running_mean"))?;
                let rv = self.buffer(&format!("{name}.running_var"))?;
                Ok(ops::batch_norm(x, &gamma, &beta, Some((rm, rv)), BN_EPS).0)
            }
        }
    }

    /// 3×3 conv → batch norm → LeakyReLU.
    pub fn conv_bn_act(&self, name: &str, x: &Var<T>, slope: f64) -> Result<Var<T>> {
        let y = self.conv(&format!("{name}.conv"), x)?;
        let y = self.batch_norm(&format!("{name}.bn"), &y)?;
        Ok(ops::leaky_relu(&y, slope))
    }

    pub fn take_bn_updates(&self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }

    /// Gradients keyed by parameter name.
    pub fn named_grads(&self, grads: &mut Grads<T>) -> BTreeMap<String, Tensor<T>> {
        self.leaves
            .borrow()
            .iter()
            .filter_map(|(name, var)| grads.take(var).map(|g| (name.clone(), g)))
            .collect()
    }
}

const WEIGHTS_MAGIC: &[u8; 8] = b"PSEGWTS\0";
pub const WEIGHTS_VERSION: u32 = 1;

/// Writes a weight file: magic, version, a UTF-8 JSON metadata block, then
/// named tensors (`kind`, name, dtype, rank, dims, little-endian data).
pub fn save_weights<T: Real>(
    store: &ParamStore<T>,
    metadata: &serde_json::Value,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(metadata).map_err(|e| Error::data(e.to_string()))?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    let count = store.params.len() + store.buffers.len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (kind, map) in [(0u8, &store.params), (1u8, &store.buffers)] {
        for (name, t) in map {
            out.push(kind);
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(if T::DTYPE == "f32" { 1 } else { 2 });
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                if T::DTYPE == "f32" {
                    out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&v.f64().to_le_bytes());
                }
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a weight file, converting stored values to `T`.
pub fn load_weights<T: Real>(path: impl AsRef<Path>) -> Result<(ParamStore<T>, serde_json::Value)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cur.take(8)? != WEIGHTS_MAGIC {
        return Err(Error::format(path, "bad weight-file magic"));
    }
    let version = cur.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported weight-file version {version}"),
        ));
    }
    let meta_len = cur.u32()? as usize;
    let meta: serde_json::Value = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let count = cur.u32()?;
    let mut store = ParamStore::default();
    for _ in 0..count {
        let kind = cur.take(1)?[0];
        let name_len = u16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_owned();
        let dtype = cur.take(1)?[0];
        let rank = cur.take(1)?[0] as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let data: Vec<T> = match dtype {
            1 => cur
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| T::of(f64::from(f32::from_le_bytes(c.try_into().expect("4")))))
                .collect(),
            2 => cur
                .take(8 * n)?
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8"))))
                .collect(),
            d => return Err(Error::format(path, format!("unknown dtype code {d}"))),
        };
        let t = Tensor::from_vec(&shape, data);
        match kind {
            0 => store.params.insert(name, t),
            1 => store.buffers.insert(name, t),
            k => return Err(Error::format(path, format!("unknown tensor kind {k}"))),
        };
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after tensors"));
    }
    Ok((store, meta))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated weight file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore<f32> {
        let mut store = ParamStore::default();
        let mut init = Initializer::new(1, 0.01);
        init.conv(&mut store, "a.conv", &[4, 3, 3, 3], true);
        init.batch_norm(&mut store, "a.bn", 4);
        store
    }

    #[test]
    fn weights_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.weights");
        let store = sample_store();
        let meta = serde_json::json!({"model": "test"});
        save_weights(&store, &meta, &p).unwrap();
        let (back, m) = load_weights::<f32>(&p).unwrap();
        assert_eq!(back, store);
        assert_eq!(m, meta);
        save_weights(&back, &meta, dir.path().join("w2")).unwrap();
        assert_eq!(
            fs::read(&p).unwrap(),
            fs::read(dir.path().join("w2")).unwrap()
        );
    }

    #[test]
    fn truncated_weight_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w");
        save_weights(&sample_store(), &serde_json::json!({}), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_weights::<f32>(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn session_reuses_leaves_and_reports_channel_mismatch() {
        let store = sample_store();
        let s = Session::new(&store, Mode::Train, true);
        let a = s.param("a.conv.weight").unwrap();
        let b = s.param("a.conv.weight").unwrap();
        assert_eq!(a.id(), b.id());
        let x = Var::constant(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(s
            .conv("a.conv", &x)
            .unwrap_err()
            .to_string()
            .contains("channel mismatch"));
    }

    #[test]
    fn bn_running_stats_follow_momentum() {
        let mut store = sample_store();
        let stats = BatchStats {
            mean: vec![1.0; 4],
            var: vec![3.0; 4],
        };
        store.apply_bn_updates(&[("a.bn".into(), stats)]);
        assert!((store.buffers["a.bn.running_mean"].data()[0] - 0.1).abs() < 1e-7);
        assert!((store.buffers["a.bn.running_var"].data()[0] - 1.2).abs() < 1e-6);
    }
}
