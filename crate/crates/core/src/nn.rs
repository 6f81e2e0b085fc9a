//! Minimal neural-network building blocks on top of `candle_core`.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names; modules hold
//! clones of the underlying tensors so gradients can be looked up by id and
//! optimizer updates are visible everywhere.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose, StreamRng};

pub const NEG_INF_BIAS: f64 = -1e9;

#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: StreamRng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: stream(seed, Purpose::Init, &[]),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn randn(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn from_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if values.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("{name}: {} values for {shape:?}", values.len())));
        }
        self.insert(name, values, shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite a parameter in place, keeping its identity.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::OutOfRange(format!("no parameter named {name}")))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Re-draw every parameter whose name passes `filter` from N(0, std²).
    /// Used by the oracle checks, which need non-degenerate predictor outputs.
    pub fn randomize(&mut self, std: f64, filter: impl Fn(&str) -> bool) -> Result<()> {
        let names: Vec<String> = self.vars.keys().filter(|n| filter(n)).cloned().collect();
        for name in names {
            let var = &self.vars[&name];
            let n = var.elem_count();
            let values: Vec<f64> = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z * std
                })
                .collect();
            let t = Tensor::from_vec(values, var.shape(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

/// Forward-pass context: train/eval mode plus the dropout stream.
pub struct Ctx {
    pub train: bool,
    dropout_rng: Option<StreamRng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            dropout_rng: None,
        }
    }

    pub fn train(rng: StreamRng) -> Self {
        Self {
            train: true,
            dropout_rng: Some(rng),
        }
    }

    pub fn dropout(&mut self, x: &Tensor, p: f64) -> Result<Tensor> {
        let rng = match (&mut self.dropout_rng, self.train && p > 0.0) {
            (Some(rng), true) => rng,
            _ => return Ok(x.clone()),
        };
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..x.elem_count())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep as f32 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        let weight = store.randn(&format!("{name}.weight"), &[fan_in, fan_out], std)?;
        let bias = if bias {
            Some(store.constant(&format!("{name}.bias"), &[fan_out], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = store.constant(&format!("{name}.weight"), &[fan_in, fan_out], 0.0)?;
        let bias = Some(store.constant(&format!("{name}.bias"), &[fan_out], 0.0)?);
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let fan_in = *dims.last().ok_or_else(|| Error::Shape("linear input has no dimensions".into()))?;
        let rows = x.elem_count() / fan_in.max(1);
        let mut out_dims = dims.clone();
        *out_dims.last_mut().expect("non-empty") = self.weight.dim(1)?;
        let y = x.reshape((rows, fan_in))?.matmul(&self.weight)?.reshape(out_dims)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Layer,
    Rms,
}

#[derive(Debug, Clone)]
pub struct Norm {
    kind: NormKind,
    gain: Tensor,
    shift: Option<Tensor>,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, kind: NormKind) -> Result<Self> {
        let gain = store.constant(&format!("{name}.gain"), &[width], 1.0)?;
        let shift = match kind {
            NormKind::Layer => Some(store.constant(&format!("{name}.shift"), &[width], 0.0)?),
            NormKind::Rms => None,
        };
        Ok(Self { kind, gain, shift })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = match self.kind {
            NormKind::Layer => x.broadcast_sub(&x.mean_keepdim(D::Minus1)?)?,
            NormKind::Rms => x.clone(),
        };
        let var = x.sqr()?.mean_keepdim(D::Minus1)?;
        let y = x.broadcast_div(&(var + 1e-6)?.sqrt()?)?.broadcast_mul(&self.gain)?;
        Ok(match &self.shift {
            Some(s) => y.broadcast_add(s)?,
            None => y,
        })
    }
}

/// Softmax over the last dimension with a detached max shift.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// log-sum-exp over the last dimension (reduced), with a detached max shift.
pub fn logsumexp_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&m)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok((s + m)?.squeeze(D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let lse = logsumexp_last(x)?.unsqueeze(D::Minus1)?;
    Ok(x.broadcast_sub(&lse)?)
}

/// log σ(x) = −softplus(−x), evaluated without overflow.
pub fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    let softplus_neg = (x.neg()?.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    Ok(softplus_neg.neg()?)
}

/// Rotary position tables gathered per position: `cos`/`sin` of shape (B, 1, L, hd/2).
#[derive(Debug, Clone)]
pub struct Rope {
    pub cos: Tensor,
    pub sin: Tensor,
}

impl Rope {
    pub fn new(positions: &[u32], batch: usize, head_dim: usize, dtype: DType) -> Result<Self> {
        let half = head_dim / 2;
        let len = positions.len() / batch;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let freq = 10000f64.powf(-((2 * i) as f64) / head_dim as f64);
                let angle = p as f64 * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        let dev = Device::Cpu;
        let cos = Tensor::from_vec(cos, (batch, 1, len, half), &dev)?.to_dtype(dtype)?;
        let sin = Tensor::from_vec(sin, (batch, 1, len, half), &dev)?.to_dtype(dtype)?;
        Ok(Self { cos, sin })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let hd = x.dim(D::Minus1)?;
        let half = hd / 2;
        let x1 = x.narrow(D::Minus1, 0, half)?;
        let x2 = x.narrow(D::Minus1, half, half)?;
        let a = (x1.broadcast_mul(&self.cos)? - x2.broadcast_mul(&self.sin)?)?;
        let b = (x1.broadcast_mul(&self.sin)? + x2.broadcast_mul(&self.cos)?)?;
        Ok(Tensor::cat(&[a, b], D::Minus1)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockShape {
    pub width: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub mlp_hidden: usize,
    pub norm: NormKind,
}

/// Per-layer key/value cache for incremental decoding.
#[derive(Debug, Clone, Default)]
pub struct LayerCache {
    pub keys: Option<Tensor>,
    pub values: Option<Tensor>,
}

/// Pre-norm transformer block: attention then MLP, each with a residual.
#[derive(Debug, Clone)]
pub struct Block {
    shape: BlockShape,
    norm_attn: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm_mlp: Norm,
    up: Linear,
    down: Linear,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, shape: BlockShape) -> Result<Self> {
        if shape.width % shape.heads != 0 || shape.heads % shape.kv_heads != 0 {
            return Err(Error::Config(format!(
                "width {} / heads {} / kv heads {} are incompatible",
                shape.width, shape.heads, shape.kv_heads
            )));
        }
        let hd = shape.width / shape.heads;
        Ok(Self {
            shape,
            norm_attn: Norm::new(store, &format!("{name}.norm_attn"), shape.width, shape.norm)?,
            q: Linear::new(store, &format!("{name}.q"), shape.width, shape.width, false)?,
            k: Linear::new(store, &format!("{name}.k"), shape.width, hd * shape.kv_heads, false)?,
            v: Linear::new(store, &format!("{name}.v"), shape.width, hd * shape.kv_heads, false)?,
            o: Linear::new(store, &format!("{name}.o"), shape.width, shape.width, false)?,
            norm_mlp: Norm::new(store, &format!("{name}.norm_mlp"), shape.width, shape.norm)?,
            up: Linear::new(store, &format!("{name}.up"), shape.width, shape.mlp_hidden, true)?,
            down: Linear::new(store, &format!("{name}.down"), shape.mlp_hidden, shape.width, true)?,
        })
    }

    fn head_dim(&self) -> usize {
        self.shape.width / self.shape.heads
    }

    fn split_heads(&self, x: &Tensor, heads: usize) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        Ok(x.reshape((b, l, heads, self.head_dim()))?.transpose(1, 2)?.contiguous()?)
    }

    fn repeat_kv(&self, x: Tensor) -> Result<Tensor> {
        let groups = self.shape.heads / self.shape.kv_heads;
        if groups == 1 {
            return Ok(x);
        }
        let (b, hkv, s, hd) = x.dims4()?;
        Ok(x
            .unsqueeze(2)?
            .broadcast_as((b, hkv, groups, s, hd))?
            .contiguous()?
            .reshape((b, hkv * groups, s, hd))?)
    }

    /// `bias` is an additive attention bias broadcastable to (B, H, L, S).
    /// When `cache` is given, new keys/values are appended and attention runs
    /// over the whole cached sequence.
    pub fn forward(
        &self,
        x: &Tensor,
        bias: Option<&Tensor>,
        rope: Option<&Rope>,
        cache: Option<&mut LayerCache>,
        ctx: &mut Ctx,
        dropout: f64,
    ) -> Result<Tensor> {
        let (b, l, w) = x.dims3()?;
        let h = self.norm_attn.forward(x)?;
        let mut q = self.split_heads(&self.q.forward(&h)?, self.shape.heads)?;
        let mut k = self.split_heads(&self.k.forward(&h)?, self.shape.kv_heads)?;
        let v = self.split_heads(&self.v.forward(&h)?, self.shape.kv_heads)?;
        if let Some(rope) = rope {
            q = rope.apply(&q)?;
            k = rope.apply(&k)?;
        }
        let (k, v) = match cache {
            Some(cache) => {
                let k = match &cache.keys {
                    Some(prev) => Tensor::cat(&[prev, &k], 2)?,
                    None => k,
                };
                let v = match &cache.values {
                    Some(prev) => Tensor::cat(&[prev, &v], 2)?,
                    None => v,
                };
                cache.keys = Some(k.clone());
                cache.values = Some(v.clone());
                (k, v)
            }
            None => (k, v),
        };
        let k = self.repeat_kv(k)?;
        let v = self.repeat_kv(v)?;
        let scale = 1.0 / (self.head_dim() as f64).sqrt();
        let mut att = (q.matmul(&k.t()?)? * scale)?;
        if let Some(bias) = bias {
            att = att.broadcast_add(bias)?;
        }
        let att = softmax_last(&att)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.reshape((b, l, w))?;
        let y = ctx.dropout(&self.o.forward(&y)?, dropout)?;
        let x = (x + y)?;
        let h = self.norm_mlp.forward(&x)?;
        let h = self.down.forward(&self.up.forward(&h)?.gelu()?)?;
        let h = ctx.dropout(&h, dropout)?;
        Ok((x + h)?)
    }
}

/// Read a tensor of any float dtype back as `f64` values.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}
