//! Transformer building blocks on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] so that initialization is seeded and
//! checkpoints can enumerate every array by name.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Additive bias used to exclude attention keys.
pub const NEG_INF: f64 = -1e9;
// Floor for the renormalizer of mask-weighted attention. When every
// weighted entry is zero the row stays zero.
const RENORM_FLOOR: f64 = 1e-30;

/// Named, seeded parameter arrays.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self, prefix: &str) -> Scope<'_> {
        Scope {
            store: self,
            prefix: prefix.to_string(),
        }
    }

    fn insert(&mut self, name: String, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Shape(format!("parameter `{name}` registered twice")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Overwrites a parameter in place, keeping its shape.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    /// Flattened copy of every parameter, in name order.
    pub fn snapshot(&self) -> Result<Vec<(String, Vec<f64>)>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let flat = v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                Ok((k.clone(), flat))
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

/// A name prefix inside a [`ParamStore`].
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn pp(&mut self, name: &str) -> Scope<'_> {
        Scope {
            prefix: format!("{}.{name}", self.prefix),
            store: &mut *self.store,
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn uniform(&mut self, leaf: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.store.rng.gen_range(-bound..=bound))
            .collect();
        let name = self.name(leaf);
        self.store.insert(name, shape, data)
    }

    pub fn tensor(&mut self, leaf: &str, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("{leaf}: {n} values expected, got {}", data.len())));
        }
        let name = self.name(leaf);
        self.store.insert(name, shape, data)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let name = self.name(leaf);
        self.store.insert(name, shape, vec![value; n])
    }
}

/// Fully connected layer with weight stored as `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(mut s: Scope<'_>, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = s.uniform("weight", &[d_in, d_out], bound)?;
        let bias = if bias {
            Some(s.constant("bias", &[d_out], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Applies the layer to the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        let d_in = dims[dims.len() - 1];
        let rows = x.elem_count() / d_in.max(1);
        let y = x.reshape((rows, d_in))?.matmul(&self.weight)?;
        let mut out_dims = dims.to_vec();
        *out_dims.last_mut().unwrap() = self.weight.dims()[1];
        let y = y.reshape(out_dims)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    const EPS: f64 = 1e-5;

    pub fn new(mut s: Scope<'_>, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.constant("gamma", &[d], 1.0)?,
            beta: s.constant("beta", &[d], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Learned positional table initialized with the sinusoidal encoding.
pub fn positional_table(mut s: Scope<'_>, n: usize, d: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(n * d);
    for pos in 0..n {
        for i in 0..d {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    s.tensor("table", &[n, d], data)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let z = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&z)?)
}

/// Multiplies attention rows by per-key weights and renormalizes them.
/// Rows whose weighted mass is zero become all-zero.
pub fn reweight_attention(probs: &Tensor, key_weights: &Tensor) -> Result<Tensor> {
    let weighted = probs.broadcast_mul(key_weights)?;
    let mass = weighted.sum_keepdim(D::Minus1)?.maximum(RENORM_FLOOR)?;
    Ok(weighted.broadcast_div(&mass)?)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(mut s: Scope<'_>, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} attention heads do not divide width {d}"
            )));
        }
        Ok(Self {
            q: Linear::new(s.pp("q"), d, d, true)?,
            k: Linear::new(s.pp("k"), d, d, true)?,
            v: Linear::new(s.pp("v"), d, d, true)?,
            o: Linear::new(s.pp("o"), d, d, true)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `bias` is added to the scores (`[B|1, 1, nq|1, nk]`); `key_weights`
    /// (`[B, 1, 1, nk]`) rescales post-softmax weights which are then
    /// renormalized over keys.
    pub fn forward(
        &self,
        xq: &Tensor,
        xkv: &Tensor,
        bias: Option<&Tensor>,
        key_weights: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (b, nq, d) = xq.dims3()?;
        let head_dim = d / self.heads;
        let q = self.split_heads(&self.q.forward(xq)?)?;
        let k = self.split_heads(&self.k.forward(xkv)?)?;
        let v = self.split_heads(&self.v.forward(xkv)?)?;
        let mut scores = (q.matmul(&k.t()?)? / (head_dim as f64).sqrt())?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(bias)?;
        }
        let mut probs = softmax_last(&scores)?;
        if let Some(w) = key_weights {
            probs = reweight_attention(&probs, w)?;
        }
        let ctx = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, nq, d))?;
        self.o.forward(&ctx)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(mut s: Scope<'_>, d: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(s.pp("up"), d, hidden, true)?,
            down: Linear::new(s.pp("down"), hidden, d, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu()?)
    }
}

/// Attention restrictions applied by a layer.
#[derive(Clone, Copy, Default)]
pub struct AttnMask<'a> {
    pub bias: Option<&'a Tensor>,
    pub key_weights: Option<&'a Tensor>,
}

/// Pre-norm self-attention encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(mut s: Scope<'_>, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(s.pp("ln_attn"), d)?,
            attn: MultiHeadAttention::new(s.pp("attn"), d, heads)?,
            ln_ffn: LayerNorm::new(s.pp("ln_ffn"), d)?,
            ffn: FeedForward::new(s.pp("ffn"), d, 4 * d)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: AttnMask<'_>) -> Result<Tensor> {
        let h = self.ln_attn.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, mask.bias, mask.key_weights)?)?;
        let h = self.ln_ffn.forward(&x)?;
        Ok((&x + self.ffn.forward(&h)?)?)
    }
}

/// Pre-norm decoder layer: self-attention, cross-attention, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(mut s: Scope<'_>, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_self: LayerNorm::new(s.pp("ln_self"), d)?,
            self_attn: MultiHeadAttention::new(s.pp("self_attn"), d, heads)?,
            ln_cross: LayerNorm::new(s.pp("ln_cross"), d)?,
            cross_attn: MultiHeadAttention::new(s.pp("cross_attn"), d, heads)?,
            ln_ffn: LayerNorm::new(s.pp("ln_ffn"), d)?,
            ffn: FeedForward::new(s.pp("ffn"), d, 4 * d)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        memory: &Tensor,
        self_mask: AttnMask<'_>,
        cross_mask: AttnMask<'_>,
    ) -> Result<Tensor> {
        let h = self.ln_self.forward(x)?;
        let x = (x + self
            .self_attn
            .forward(&h, &h, self_mask.bias, self_mask.key_weights)?)?;
        let h = self.ln_cross.forward(&x)?;
        let x = (&x
            + self
                .cross_attn
                .forward(&h, memory, cross_mask.bias, cross_mask.key_weights)?)?;
        let h = self.ln_ffn.forward(&x)?;
        Ok((&x + self.ffn.forward(&h)?)?)
    }
}

/// `[B, 1, 1, n]` additive bias hiding key positions at or beyond each
/// sequence's valid length.
pub fn padding_bias(valid_lens: &[usize], n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = valid_lens
        .iter()
        .flat_map(|&len| (0..n).map(move |j| if j < len { 0.0 } else { NEG_INF as f32 }))
        .collect();
    Ok(Tensor::from_vec(data, (valid_lens.len(), 1, 1, n), device)?.to_dtype(dtype)?)
}

/// `[1, 1, n, n]` bias letting position `i` see keys `<= i` only.
pub fn causal_bias(n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = (0..n)
        .flat_map(|i| (0..n).map(move |j| if j <= i { 0.0 } else { NEG_INF as f32 }))
        .collect();
    Ok(Tensor::from_vec(data, (1, 1, n, n), device)?.to_dtype(dtype)?)
}
