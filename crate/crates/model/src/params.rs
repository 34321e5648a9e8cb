//! Named parameter storage, deterministic initialization and forward context.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// 64-bit FNV-1a; stable across platforms and compiler versions, unlike
/// `DefaultHasher`.
pub(crate) fn fnv1a(bytes: impl IntoIterator<Item = u8>, seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Trainable tensors keyed by dotted name, in sorted order.
///
/// Not `Clone`: a `Var` clone shares storage. Use [`ParamStore::deep_copy`].
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Independent copy whose values can change without affecting `self`.
    pub fn deep_copy(&self) -> Result<Self> {
        let mut out = Self::new(self.dtype, self.device.clone());
        for (name, var) in &self.vars {
            out.insert(name.clone(), var.as_tensor().copy()?)?;
        }
        Ok(out)
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&mut self, name: String, tensor: Tensor) -> Result<Tensor> {
        // `detach` drops any variable flag, so `from_tensor` always copies and
        // the store never aliases a caller's tensor.
        let var = Var::from_tensor(&tensor.to_dtype(self.dtype)?.to_device(&self.device)?.detach())?;
        let t = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Scalar count over parameters whose name satisfies `keep`.
    pub fn num_elements(&self, keep: impl Fn(&str) -> bool) -> usize {
        self.vars
            .iter()
            .filter(|(n, _)| keep(n))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn vars_where(&self, keep: impl Fn(&str) -> bool) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(n, _)| keep(n))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    /// Drops every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.vars.retain(|name, _| !name.starts_with(prefix));
    }

    /// Hash of the exact bit patterns of the selected parameters.
    pub fn checksum(&self, keep: impl Fn(&str) -> bool) -> Result<u64> {
        let mut h = 0u64;
        for (name, var) in self.vars.iter().filter(|(n, _)| keep(n)) {
            let values = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            h = fnv1a(name.bytes(), h);
            h = fnv1a(values.iter().flat_map(|v| v.to_bits().to_le_bytes()), h);
        }
        Ok(h)
    }

    /// Deep copy of every value, for best-epoch restoration.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, value) in snapshot {
            if let Some(var) = self.vars.get(name) {
                var.set(value)?;
            }
        }
        Ok(())
    }

    /// Tensors for serialization, names prefixed with `prefix`.
    pub fn tensors(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(n, v)| (format!("{prefix}{n}"), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites parameter values from `tensors` (names without prefix).
    pub fn load_values(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let value = tensors
                .get(name)
                .ok_or_else(|| Error::checkpoint(format!("missing parameter `{name}`")))?;
            if value.dims() != var.dims() {
                return Err(Error::checkpoint(format!(
                    "dimension mismatch for `{name}`: expected {:?}, found {:?}",
                    var.dims(),
                    value.dims()
                )));
            }
            var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

/// How a fresh parameter is filled when not loaded from a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Uniform(f64),
    Normal(f64),
    Const(f64),
}

/// Where parameter values come from.
#[derive(Debug, Clone)]
pub enum ParamSource {
    /// Every tensor drawn from a generator seeded by `(seed, name)`, so the
    /// value of a parameter does not depend on construction order.
    Random { seed: u64 },
    /// Pretrained tensors; names are tried bare and with each prefix.
    Loaded {
        tensors: HashMap<String, Tensor>,
        prefixes: Vec<String>,
    },
}

impl ParamSource {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        match self {
            ParamSource::Random { .. } => None,
            ParamSource::Loaded { tensors, prefixes } => tensors
                .get(name)
                .or_else(|| prefixes.iter().find_map(|p| tensors.get(&format!("{p}{name}")))),
        }
    }
}

/// Scoped view used while building a network, in the spirit of
/// `candle_nn::VarBuilder` but with seeded initialization.
pub struct ParamBuilder<'a> {
    store: &'a RefCell<ParamStore>,
    source: &'a ParamSource,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a RefCell<ParamStore>, source: &'a ParamSource) -> Self {
        Self {
            store,
            source,
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        Self {
            store: self.store,
            source: self.source,
            prefix: self.path(&name.to_string()),
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_owned()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn get(&self, dims: &[usize], name: &str, init: Init) -> Result<Tensor> {
        self.get_aliased(dims, name, &[], init)
    }

    /// Like [`Self::get`], also accepting `aliases` (e.g. legacy `gamma` /
    /// `beta` names) when loading.
    pub fn get_aliased(&self, dims: &[usize], name: &str, aliases: &[&str], init: Init) -> Result<Tensor> {
        let full = self.path(name);
        let (dtype, device) = {
            let store = self.store.borrow();
            (store.dtype(), store.device().clone())
        };
        let tensor = match self.source {
            ParamSource::Random { seed } => random_tensor(dims, init, fnv1a(full.bytes(), *seed), &device)?,
            ParamSource::Loaded { .. } => {
                let found = std::iter::once(full.clone())
                    .chain(aliases.iter().map(|a| self.path(a)))
                    .find_map(|n| self.source.lookup(&n))
                    .ok_or_else(|| Error::checkpoint(format!("missing parameter `{full}`")))?;
                if found.dims() != dims {
                    return Err(Error::checkpoint(format!(
                        "dimension mismatch for `{full}`: expected {dims:?}, found {:?}",
                        found.dims()
                    )));
                }
                found.clone()
            }
        };
        self.store.borrow_mut().insert(full, tensor.to_dtype(dtype)?)
    }
}

fn random_tensor(dims: &[usize], init: Init, seed: u64, device: &Device) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = match init {
        Init::Const(c) => vec![c; n],
        Init::Uniform(bound) => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        Init::Normal(std) => (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    };
    Ok(Tensor::from_vec(values, dims, device)?)
}

/// Train/eval switch plus the seeded generator behind dropout masks.
pub struct ForwardCtx {
    train: bool,
    dropout: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            train: false,
            dropout: 0.0,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            train: true,
            dropout,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Dropout at the context's default rate.
    pub fn dropout(&self, x: &Tensor) -> Result<Tensor> {
        self.dropout_p(x, self.dropout)
    }

    /// Inverted dropout with rate `p`; identity in eval mode.
    pub fn dropout_p(&self, x: &Tensor, p: f64) -> Result<Tensor> {
        if !self.train || p <= 0.0 {
            return Ok(x.clone());
        }
        if p >= 1.0 {
            return Err(Error::invalid(format!("dropout rate {p} must be below 1")));
        }
        let keep = 1.0 - p;
        let scale = 1.0 / keep;
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_init_is_order_independent() {
        let source = ParamSource::Random { seed: 7 };
        let a = RefCell::new(ParamStore::new(DType::F64, Device::Cpu));
        let b = RefCell::new(ParamStore::new(DType::F64, Device::Cpu));
        let ba = ParamBuilder::new(&a, &source);
        let bb = ParamBuilder::new(&b, &source);
        ba.get(&[3, 2], "x", Init::Normal(1.0)).unwrap();
        ba.pp("m").get(&[4], "y", Init::Uniform(0.5)).unwrap();
        bb.pp("m").get(&[4], "y", Init::Uniform(0.5)).unwrap();
        bb.get(&[3, 2], "x", Init::Normal(1.0)).unwrap();
        let (a, b) = (a.into_inner(), b.into_inner());
        assert_eq!(a.checksum(|_| true).unwrap(), b.checksum(|_| true).unwrap());
        assert_eq!(a.names().collect::<Vec<_>>(), vec!["m.y", "x"]);
    }

    #[test]
    fn loaded_source_checks_shapes_and_aliases() {
        let mut tensors = HashMap::new();
        tensors.insert("bert.ln.gamma".to_owned(), Tensor::ones(4, DType::F32, &Device::Cpu).unwrap());
        let source = ParamSource::Loaded {
            tensors,
            prefixes: vec!["bert.".into()],
        };
        let store = RefCell::new(ParamStore::new(DType::F64, Device::Cpu));
        let vb = ParamBuilder::new(&store, &source).pp("ln");
        let w = vb.get_aliased(&[4], "weight", &["gamma"], Init::Const(1.0)).unwrap();
        assert_eq!(w.dtype(), DType::F64);
        assert!(vb.get(&[4], "bias", Init::Const(0.0)).is_err());
        let err = vb.get_aliased(&[5], "weight", &["gamma"], Init::Const(1.0)).unwrap_err();
        assert!(err.to_string().contains("dimension mismatch"));
    }

    #[test]
    fn dropout_is_seeded_and_off_in_eval() {
        let x = Tensor::ones((4, 8), DType::F64, &Device::Cpu).unwrap();
        let eval = ForwardCtx::eval();
        assert_eq!(eval.dropout(&x).unwrap().to_vec2::<f64>().unwrap(), x.to_vec2::<f64>().unwrap());
        let a = ForwardCtx::train(0.5, 3).dropout(&x).unwrap().to_vec2::<f64>().unwrap();
        let b = ForwardCtx::train(0.5, 3).dropout(&x).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flatten().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn snapshot_restore_round_trips() {
        let source = ParamSource::Random { seed: 1 };
        let store = RefCell::new(ParamStore::new(DType::F32, Device::Cpu));
        ParamBuilder::new(&store, &source).get(&[3], "w", Init::Normal(1.0)).unwrap();
        let store = store.into_inner();
        let before = store.checksum(|_| true).unwrap();
        let snap = store.snapshot().unwrap();
        store.get("w").unwrap().set(&Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_ne!(store.checksum(|_| true).unwrap(), before);
        store.restore(&snap).unwrap();
        assert_eq!(store.checksum(|_| true).unwrap(), before);
    }
}
