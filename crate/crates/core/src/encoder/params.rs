use serde::{Deserialize, Serialize};

use crate::corpus::MAX_SEQ_LEN;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, quantize_half, xavier_uniform_init, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Hidden size.
    pub d_h: usize,
    /// Feed-forward inner size.
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout_p: f64,
    pub vocab_size: usize,
}

impl EncoderConfig {
    /// Small-width defaults: `d_h = 64`, 4 heads, `d_ff = 256`.
    pub fn desk(vocab_size: usize, num_layers: usize) -> Self {
        EncoderConfig {
            num_layers,
            num_heads: 4,
            d_h: 64,
            d_ff: 256,
            max_seq_len: MAX_SEQ_LEN,
            dropout_p: 0.1,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.d_h == 0 || !self.d_h.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "hidden size {} not divisible by {} heads",
                self.d_h, self.num_heads
            )));
        }
        if self.d_ff == 0 || self.max_seq_len == 0 || self.vocab_size == 0 {
            return Err(Error::invalid("encoder sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid(format!("dropout {} not in [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

/// Affine map `x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

impl<T> Linear<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> Linear<U> {
        Linear {
            w: f(&format!("{prefix}.W"), &self.w),
            b: f(&format!("{prefix}.b"), &self.b),
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(&str, &'a mut T)) {
        f(&format!("{prefix}.W"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

impl Linear<Tensor> {
    pub fn xavier(fan_in: usize, fan_out: usize, seed: u64) -> Result<Self> {
        Ok(Linear {
            w: xavier_uniform_init(&[fan_in, fan_out], seed)?,
            b: Tensor::zeros([fan_out]),
        })
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Tensor::zeros([fan_in, fan_out]),
            b: Tensor::zeros([fan_out]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gamma: T,
    pub beta: T,
}

impl<T> LayerNormParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> LayerNormParams<U> {
        LayerNormParams {
            gamma: f(&format!("{prefix}.gamma"), &self.gamma),
            beta: f(&format!("{prefix}.beta"), &self.beta),
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(&str, &'a mut T)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

impl LayerNormParams<Tensor> {
    pub fn identity(d: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::full([d], 1.0),
            beta: Tensor::zeros([d]),
        }
    }
}

/// One post-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub attn_norm: LayerNormParams<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub ffn_norm: LayerNormParams<T>,
}

impl<T> LayerParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> LayerParams<U> {
        LayerParams {
            q: self.q.map(&format!("{prefix}.attn.q"), f),
            k: self.k.map(&format!("{prefix}.attn.k"), f),
            v: self.v.map(&format!("{prefix}.attn.v"), f),
            o: self.o.map(&format!("{prefix}.attn.o"), f),
            attn_norm: self.attn_norm.map(&format!("{prefix}.attn_norm"), f),
            ffn_in: self.ffn_in.map(&format!("{prefix}.ffn.in"), f),
            ffn_out: self.ffn_out.map(&format!("{prefix}.ffn.out"), f),
            ffn_norm: self.ffn_norm.map(&format!("{prefix}.ffn_norm"), f),
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(&str, &'a mut T)) {
        self.q.for_each_mut(&format!("{prefix}.attn.q"), f);
        self.k.for_each_mut(&format!("{prefix}.attn.k"), f);
        self.v.for_each_mut(&format!("{prefix}.attn.v"), f);
        self.o.for_each_mut(&format!("{prefix}.attn.o"), f);
        self.attn_norm.for_each_mut(&format!("{prefix}.attn_norm"), f);
        self.ffn_in.for_each_mut(&format!("{prefix}.ffn.in"), f);
        self.ffn_out.for_each_mut(&format!("{prefix}.ffn.out"), f);
        self.ffn_norm.for_each_mut(&format!("{prefix}.ffn_norm"), f);
    }
}

impl LayerParams<Tensor> {
    /// Xavier-initialized block.
    pub fn random(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        let d = cfg.d_h;
        let s = |i| derive_seed(seed, i);
        Ok(LayerParams {
            q: Linear::xavier(d, d, s(0))?,
            k: Linear::xavier(d, d, s(1))?,
            v: Linear::xavier(d, d, s(2))?,
            o: Linear::xavier(d, d, s(3))?,
            attn_norm: LayerNormParams::identity(d),
            ffn_in: Linear::xavier(d, cfg.d_ff, s(4))?,
            ffn_out: Linear::xavier(cfg.d_ff, d, s(5))?,
            ffn_norm: LayerNormParams::identity(d),
        })
    }

    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.d_h;
        LayerParams {
            q: Linear::zeros(d, d),
            k: Linear::zeros(d, d),
            v: Linear::zeros(d, d),
            o: Linear::zeros(d, d),
            attn_norm: LayerNormParams::identity(d),
            ffn_in: Linear::zeros(d, cfg.d_ff),
            ffn_out: Linear::zeros(cfg.d_ff, d),
            ffn_norm: LayerNormParams::identity(d),
        }
    }
}

/// Character and position embeddings plus the transformer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub emb_norm: LayerNormParams<T>,
    pub layers: Vec<LayerParams<T>>,
}

impl<T> EncoderParams<T> {
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&str, &'a T) -> U) -> EncoderParams<U> {
        EncoderParams {
            tok_emb: f("enc.tok_emb", &self.tok_emb),
            pos_emb: f("enc.pos_emb", &self.pos_emb),
            emb_norm: self.emb_norm.map("enc.emb_norm", f),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("enc.layer.{i}"), f))
                .collect(),
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(&str, &'a mut T)) {
        f("enc.tok_emb", &mut self.tok_emb);
        f("enc.pos_emb", &mut self.pos_emb);
        self.emb_norm.for_each_mut("enc.emb_norm", f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.for_each_mut(&format!("enc.layer.{i}"), f);
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

impl EncoderParams<Tensor> {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.num_layers)
            .map(|i| LayerParams::random(cfg, derive_seed(seed, 100 + i as u64)))
            .collect::<Result<_>>()?;
        Ok(EncoderParams {
            tok_emb: xavier_uniform_init(&[cfg.vocab_size, cfg.d_h], derive_seed(seed, 0))?,
            pos_emb: xavier_uniform_init(&[cfg.max_seq_len, cfg.d_h], derive_seed(seed, 1))?,
            emb_norm: LayerNormParams::identity(cfg.d_h),
            layers,
        })
    }

    pub fn zeros(cfg: &EncoderConfig) -> Self {
        EncoderParams {
            tok_emb: Tensor::zeros([cfg.vocab_size, cfg.d_h]),
            pos_emb: Tensor::zeros([cfg.max_seq_len, cfg.d_h]),
            emb_norm: LayerNormParams::identity(cfg.d_h),
            layers: (0..cfg.num_layers).map(|_| LayerParams::zeros(cfg)).collect(),
        }
    }

    /// Student encoder: the embedding tables and the bottom `k` blocks, copied.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k > self.layers.len() {
            return Err(Error::invalid(format!(
                "cannot keep {k} layers of a {}-layer encoder",
                self.layers.len()
            )));
        }
        Ok(EncoderParams {
            tok_emb: self.tok_emb.clone(),
            pos_emb: self.pos_emb.clone(),
            emb_norm: self.emb_norm.clone(),
            layers: self.layers[..k].to_vec(),
        })
    }

    /// Rounds the attention and feed-forward kernels to binary16. Embeddings,
    /// norms and biases stay at full precision.
    pub fn quantize_kernels(&self) -> Self {
        let mut out = self.clone();
        out.for_each_mut(&mut |name, t| {
            if is_half_kernel(name) {
                *t = quantize_half(t);
            }
        });
        out
    }
}

/// Names of the weights that run in binary16 under half-precision inference.
pub fn is_half_kernel(name: &str) -> bool {
    name.starts_with("enc.layer.") && (name.contains(".attn.") || name.contains(".ffn.")) && name.ends_with(".W")
}
