//! Named parameters and the handful of layers the models are built from.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named, replaceable parameter tensor.
pub struct Param {
    name: String,
    value: RwLock<Tensor>,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> Tensor {
        self.value.read().expect("param lock").clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn set(&self, t: Tensor) -> Result<()> {
        let mut guard = self.value.write().expect("param lock");
        if guard.shape() != t.shape() {
            return Err(Error::shape(
                "param set",
                format!("{}: {:?} -> {:?}", self.name, guard.shape(), t.shape()),
            ));
        }
        *guard = t;
        Ok(())
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, {:?})", self.name, self.shape())
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `[-b, b]`.
    Uniform(f64),
}

impl Init {
    fn sample(self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Uniform(b) => {
                if b == 0.0 {
                    return vec![0.0; n];
                }
                let d = Uniform::new_inclusive(-b, b).expect("finite bound");
                (0..n).map(|_| d.sample(rng)).collect()
            }
        }
    }
}

/// Ordered collection of named parameters.
#[derive(Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Arc<Param>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Arc<Param> {
        let p = Arc::new(Param {
            name: name.to_string(),
            value: RwLock::new(value),
        });
        self.params.insert(name.to_string(), p.clone());
        p
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Param>> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<Param>> {
        self.params.values()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value().numel()).sum()
    }

    /// Make every parameter a tracked leaf (or a plain constant).
    pub fn set_trainable(&self, trainable: bool) {
        for p in self.params.values() {
            let v = p.value();
            let next = if trainable { v.into_var() } else { v.detach() };
            p.set(next).expect("same shape");
        }
    }

    /// Values keyed by name, untracked.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.value().detach()))
            .collect()
    }

    /// Overwrite every parameter from `values`; names and shapes must match.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, p) in &self.params {
            let v = values
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            p.set(v.detach())?;
        }
        Ok(())
    }

    /// Digest over names, shapes and raw values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            let v = p.value();
            h.update(name.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Creates parameters under a name prefix from a seeded stream.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn pp(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Arc<Param> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let n = shape.iter().product();
        let data = init.sample(n, self.rng);
        let t = Tensor::new(data, shape).expect("init shape");
        self.store.insert(&full, t)
    }

    /// Draws one value so that otherwise identical builders diverge.
    pub fn jitter(&mut self) -> u64 {
        self.rng.random()
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Arc<Param>,
    pub bias: Option<Arc<Param>>,
    pub stride: usize,
    pub pad: usize,
    pub reflect: bool,
}

impl Conv2d {
    /// Kaiming-uniform init with fan-in scaling.
    pub fn new(
        pb: &mut ParamBuilder,
        cin: usize,
        cout: usize,
        k: usize,
        pad: usize,
        reflect: bool,
    ) -> Self {
        let bound = (1.0 / (cin * k * k) as f64).sqrt();
        let gain_bound = bound * 6f64.sqrt() / 2f64.sqrt();
        Conv2d {
            weight: pb.param("weight", &[cout, cin, k, k], Init::Uniform(gain_bound)),
            bias: Some(pb.param("bias", &[cout], Init::Uniform(bound))),
            stride: 1,
            pad,
            reflect,
        }
    }

    pub fn with_init(
        pb: &mut ParamBuilder,
        (cin, cout, k): (usize, usize, usize),
        pad: usize,
        reflect: bool,
        weight: Init,
        bias: Init,
    ) -> Self {
        Conv2d {
            weight: pb.param("weight", &[cout, cin, k, k], weight),
            bias: Some(pb.param("bias", &[cout], bias)),
            stride: 1,
            pad,
            reflect,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if self.reflect {
            x.reflect_pad(self.pad)?
                .conv2d(&self.weight.value(), self.stride, 0)?
        } else {
            x.conv2d(&self.weight.value(), self.stride, self.pad)?
        };
        match &self.bias {
            Some(b) => {
                let b = b.value();
                let o = b.numel();
                y.add(&b.reshape(&[1, o, 1, 1])?)
            }
            None => Ok(y),
        }
    }
}

/// Dense layer with a `(out, in)` weight.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Arc<Param>,
    pub bias: Option<Arc<Param>>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, bias: bool) -> Self {
        let bound = (1.0 / cin as f64).sqrt();
        Linear {
            weight: pb.param("weight", &[cout, cin], Init::Uniform(bound)),
            bias: bias.then(|| pb.param("bias", &[cout], Init::Uniform(bound))),
        }
    }

    pub fn with_init(
        pb: &mut ParamBuilder,
        cin: usize,
        cout: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        Linear {
            weight: pb.param("weight", &[cout, cin], init),
            bias: bias.then(|| pb.param("bias", &[cout], Init::Zeros)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.value().t()?)?;
        match &self.bias {
            Some(b) => y.add(&b.value()),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Arc<Param>,
    pub bias: Arc<Param>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, dim: usize) -> Self {
        LayerNorm {
            weight: pb.param("weight", &[dim], Init::Ones),
            bias: pb.param("bias", &[dim], Init::Zeros),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.weight.value(), &self.bias.value(), self.eps)
    }
}

/// Reads every tensor of a safetensors file, widening to `f64`.
pub fn load_safetensors(path: &std::path::Path) -> Result<BTreeMap<String, Tensor>> {
    use safetensors::{Dtype, SafeTensors};
    let bytes = std::fs::read(path)?;
    let st = SafeTensors::deserialize(&bytes)?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        let raw = view.data();
        let data: Vec<f64> = match view.dtype() {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::BF16 => raw
                .chunks_exact(2)
                .map(|b| f32::from_bits((u16::from_le_bytes([b[0], b[1]]) as u32) << 16) as f64)
                .collect(),
            Dtype::F16 => raw
                .chunks_exact(2)
                .map(|b| half_to_f64(u16::from_le_bytes([b[0], b[1]])))
                .collect(),
            other => {
                return Err(Error::Config(format!(
                    "{}: tensor {name} has unsupported dtype {other:?}",
                    path.display()
                )))
            }
        };
        out.insert(name, Tensor::new(data, view.shape())?);
    }
    Ok(out)
}

fn half_to_f64(h: u16) -> f64 {
    let sign = if h >> 15 == 1 { -1.0 } else { 1.0 };
    let exp = ((h >> 10) & 0x1f) as i32;
    let frac = (h & 0x3ff) as f64;
    match exp {
        0 => sign * frac * 2f64.powi(-24),
        31 if frac == 0.0 => sign * f64::INFINITY,
        31 => f64::NAN,
        e => sign * (1.0 + frac / 1024.0) * 2f64.powi(e - 15),
    }
}

/// Copies tensors from `weights` into `store`, renaming with `map`.
pub fn assign_weights(
    store: &ParamStore,
    weights: &BTreeMap<String, Tensor>,
    map: impl Fn(&str) -> String,
) -> Result<()> {
    for p in store.iter() {
        let key = map(p.name());
        let v = weights
            .get(&key)
            .ok_or_else(|| Error::Config(format!("checkpoint has no tensor {key}")))?;
        let v = if v.shape() != p.shape().as_slice() && v.numel() == p.value().numel() {
            v.reshape(&p.shape())?
        } else {
            v.clone()
        };
        p.set(v)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn seeded_builders_are_reproducible() {
        let build = || {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            Conv2d::new(&mut pb.pp("conv"), 3, 4, 3, 1, true);
            store
        };
        let (a, b) = (build(), build());
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.names(), vec!["conv.bias", "conv.weight"]);
    }

    #[test]
    fn trainable_toggle_keeps_values() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut ParamBuilder::new(&mut store, &mut rng), 3, 2, true);
        let before = store.content_hash();
        store.set_trainable(true);
        assert!(lin.weight.value().is_tracked());
        store.set_trainable(false);
        assert!(!lin.weight.value().is_tracked());
        assert_eq!(before, store.content_hash());
    }

    #[test]
    fn half_precision_decoding() {
        assert_eq!(half_to_f64(0x3c00), 1.0);
        assert_eq!(half_to_f64(0xc000), -2.0);
        assert_eq!(half_to_f64(0x3555), 0.333251953125);
        assert_eq!(half_to_f64(0x0001), 2f64.powi(-24));
    }

    #[test]
    fn safetensors_round_trip() {
        use safetensors::tensor::{serialize, TensorView};
        use safetensors::Dtype;
        let vals: Vec<f32> = vec![1.5, -2.0, 0.25, 4.0, 5.0, 6.0];
        let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        let view = TensorView::new(Dtype::F32, vec![2, 3], &bytes).unwrap();
        let blob = serialize([("w", view)], None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        std::fs::write(&path, blob).unwrap();
        let loaded = load_safetensors(&path).unwrap();
        assert_eq!(loaded["w"].shape(), &[2, 3]);
        assert_eq!(loaded["w"].data(), &[1.5, -2.0, 0.25, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn conv_reflect_keeps_spatial_size() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new(
            &mut ParamBuilder::new(&mut store, &mut rng),
            2,
            5,
            3,
            1,
            true,
        );
        let x = Tensor::ones(&[1, 2, 6, 7]);
        assert_eq!(conv.forward(&x).unwrap().shape(), &[1, 5, 6, 7]);
    }
}
