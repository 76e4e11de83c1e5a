//! Named parameter storage with seeded initialization, plus the handful of
//! layers the networks are assembled from.
//!
//! Every layer is written against plain tensor ops so that autodiff covers
//! it end to end in both `f32` and `f64`.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Flat, name-sorted map of trainable variables.
#[derive(Debug, Clone)]
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

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Variables whose name starts with any of `prefixes`.
    pub fn vars_matching(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn vars_excluding(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| !prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Overwrites a variable in place; every layer holding it sees the update.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Zeroes every parameter whose name passes `pred`.
    pub fn zero_where(&self, pred: impl Fn(&str) -> bool) -> Result<()> {
        for (name, var) in &self.vars {
            if pred(name) {
                var.set(&var.zeros_like()?)?;
            }
        }
        Ok(())
    }

    fn insert(&mut self, name: String, var: Var) -> Result<()> {
        if self.vars.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.vars.insert(name, var);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum InitDist {
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    Uniform(f64),
}

/// Scoped builder that registers freshly initialized variables in a store.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn pp<'b>(&'b mut self, name: impl AsRef<str>) -> Init<'b> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn param(&mut self, name: &str, shape: &[usize], dist: InitDist) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match dist {
            InitDist::Zeros => vec![0.0; n],
            InitDist::Ones => vec![1.0; n],
            InitDist::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(self.rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
            InitDist::Uniform(bound) => (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.insert(full, var)?;
        Ok(tensor)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    inner: candle_nn::Linear,
}

impl Linear {
    pub fn new(init: &mut Init, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = init.param("weight", &[out_dim, in_dim], InitDist::TruncNormal(0.02))?;
        let bias = if bias {
            Some(init.param("bias", &[out_dim], InitDist::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            inner: candle_nn::Linear::new(weight, bias),
        })
    }

    pub fn weight(&self) -> &Tensor {
        self.inner.weight()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(x)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: init.param("weight", &[dim], InitDist::Ones)?,
            bias: init.param("bias", &[dim], InitDist::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// 2-D convolution with bias, square kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        init: &mut Init,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        Ok(Self {
            weight: init.param("weight", &[out_ch, in_ch, kernel, kernel], InitDist::Uniform(bound))?,
            bias: init.param("bias", &[out_ch], InitDist::Zeros)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let out_ch = self.bias.dims1()?;
        Ok(y.broadcast_add(&self.bias.reshape((1, out_ch, 1, 1))?)?)
    }
}

/// Two linear layers with an (exact, erf-based) GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut init.pp("fc1"), dim, hidden, true)?,
            fc2: Linear::new(&mut init.pp("fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

/// Flattens a tensor into `f64` values regardless of its dtype.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
