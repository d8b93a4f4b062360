//! The denoising network: a pre-norm bidirectional transformer over the joint
//! latent sequence that predicts `x_0` from `(x_t, t)`.
//!
//! Layout of one forward pass:
//!
//! ```text
//! u   = x W_in + b_in + slot[i] + time(t)
//! u  += Attn(LN1(u))          per layer
//! u  += FF(LN2(u))            per layer, FF = GELU MLP
//! out = LN_f(u) W_out + b_out
//! ```
//!
//! `time(t)` is a two-layer SiLU MLP on a sinusoidal embedding of the
//! (original-schedule) timestep. `slot[i]` is a learned per-slot vector in
//! model width; it lets the network tell caption slots apart once noise has
//! washed out the positional content of the latent itself.

use ndarray::{s, Array2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingTable, FeatureSpace, LatentSequence};
use crate::error::{invalid, Error, Result};
use crate::nn::{self, SeqLayout};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Latent (embedding) width H.
    pub embed_dim: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub img_len: usize,
    pub cap_len: usize,
    /// Largest timestep the network will be conditioned on.
    pub t_max: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub features: FeatureSpace,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ff_mult", self.ff_mult),
            ("img_len", self.img_len),
            ("cap_len", self.cap_len),
            ("t_max", self.t_max),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(invalid(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.d_model % 2 != 0 {
            return Err(invalid("d_model must be even for the sinusoidal timestep embedding"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.img_len + self.cap_len
    }

    pub fn max_slot_len(&self) -> usize {
        self.img_len.max(self.cap_len)
    }

    /// Closed-form parameter count; see README for the breakdown.
    pub fn param_count(&self) -> usize {
        let (h, d, f) = (self.embed_dim, self.d_model, self.ff_mult * self.d_model);
        let embedding = (self.vocab_size + self.features.width() + 2 + self.max_slot_len()) * h;
        let input = h * d + d + self.seq_len() * d;
        let time = 2 * (d * d + d);
        let layer = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        let output = 2 * d + d * h + h;
        embedding + input + time + self.n_layers * layer + output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Array2<f64>,
    pub ln1_bias: Array2<f64>,
    pub w_qkv: Array2<f64>,
    pub b_qkv: Array2<f64>,
    pub w_attn_out: Array2<f64>,
    pub b_attn_out: Array2<f64>,
    pub ln2_gain: Array2<f64>,
    pub ln2_bias: Array2<f64>,
    pub w_ff_in: Array2<f64>,
    pub b_ff_in: Array2<f64>,
    pub w_ff_out: Array2<f64>,
    pub b_ff_out: Array2<f64>,
}

/// Every trainable tensor, including the co-trained embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub table: EmbeddingTable,
    pub w_in: Array2<f64>,
    pub b_in: Array2<f64>,
    pub slots: Array2<f64>,
    pub w_time1: Array2<f64>,
    pub b_time1: Array2<f64>,
    pub w_time2: Array2<f64>,
    pub b_time2: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Array2<f64>,
    pub lnf_bias: Array2<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array2<f64>,
}

macro_rules! collect_tensors {
    ($self:ident, $out:ident, $($amp:tt)+) => {{
        $out.push(("embed.tokens".to_string(), $($amp)+ $self.table.tokens));
        $out.push(("embed.patch_projector".to_string(), $($amp)+ $self.table.patch_projector));
        $out.push(("embed.modality".to_string(), $($amp)+ $self.table.modality));
        $out.push(("embed.positions".to_string(), $($amp)+ $self.table.positions));
        $out.push(("input.weight".to_string(), $($amp)+ $self.w_in));
        $out.push(("input.bias".to_string(), $($amp)+ $self.b_in));
        $out.push(("input.slots".to_string(), $($amp)+ $self.slots));
        $out.push(("time.w1".to_string(), $($amp)+ $self.w_time1));
        $out.push(("time.b1".to_string(), $($amp)+ $self.b_time1));
        $out.push(("time.w2".to_string(), $($amp)+ $self.w_time2));
        $out.push(("time.b2".to_string(), $($amp)+ $self.b_time2));
        for (i, l) in ($($amp)+ $self.layers).into_iter().enumerate() {
            $out.push((format!("layers.{i}.ln1.gain"), $($amp)+ l.ln1_gain));
            $out.push((format!("layers.{i}.ln1.bias"), $($amp)+ l.ln1_bias));
            $out.push((format!("layers.{i}.attn.w_qkv"), $($amp)+ l.w_qkv));
            $out.push((format!("layers.{i}.attn.b_qkv"), $($amp)+ l.b_qkv));
            $out.push((format!("layers.{i}.attn.w_out"), $($amp)+ l.w_attn_out));
            $out.push((format!("layers.{i}.attn.b_out"), $($amp)+ l.b_attn_out));
            $out.push((format!("layers.{i}.ln2.gain"), $($amp)+ l.ln2_gain));
            $out.push((format!("layers.{i}.ln2.bias"), $($amp)+ l.ln2_bias));
            $out.push((format!("layers.{i}.ff.w_in"), $($amp)+ l.w_ff_in));
            $out.push((format!("layers.{i}.ff.b_in"), $($amp)+ l.b_ff_in));
            $out.push((format!("layers.{i}.ff.w_out"), $($amp)+ l.w_ff_out));
            $out.push((format!("layers.{i}.ff.b_out"), $($amp)+ l.b_ff_out));
        }
        $out.push(("final_ln.gain".to_string(), $($amp)+ $self.lnf_gain));
        $out.push(("final_ln.bias".to_string(), $($amp)+ $self.lnf_bias));
        $out.push(("output.weight".to_string(), $($amp)+ $self.w_out));
        $out.push(("output.bias".to_string(), $($amp)+ $self.b_out));
    }};
}

/// Uniform(-a, a) with variance `gain^2 / fan_in`.
fn scaled_uniform(rows: usize, cols: usize, fan_in: usize, gain: f64, rng: &mut Rng) -> Array2<f64> {
    let a = gain * (3.0 / fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}

/// Gains used by [`DenoiserParams::init`]: linear layers use 1.0 with their
/// fan-in, token rows have unit variance, each of the five active one-hot
/// slots of a patch contributes variance 1/5, and the additive segment/slot
/// vectors start at standard deviation 0.1.
pub const ADDITIVE_VECTOR_STD: f64 = 0.1;

impl DenoiserParams {
    pub fn init(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (h, d, f) = (config.embed_dim, config.d_model, config.ff_mult * config.d_model);
        let additive = |rows: usize, rng: &mut Rng| {
            scaled_uniform(rows, h, 1, ADDITIVE_VECTOR_STD, rng)
        };
        let table = EmbeddingTable {
            tokens: scaled_uniform(config.vocab_size, h, 1, 1.0, rng),
            patch_projector: scaled_uniform(config.features.width(), h, 5, 1.0, rng),
            modality: additive(2, rng),
            positions: additive(config.max_slot_len(), rng),
        };
        let w_in = scaled_uniform(h, d, h, 1.0, rng);
        let slots = scaled_uniform(config.seq_len(), d, 1, ADDITIVE_VECTOR_STD, rng);
        let w_time1 = scaled_uniform(d, d, d, 1.0, rng);
        let w_time2 = scaled_uniform(d, d, d, 1.0, rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Array2::ones((1, d)),
                ln1_bias: Array2::zeros((1, d)),
                w_qkv: scaled_uniform(d, 3 * d, d, 1.0, rng),
                b_qkv: Array2::zeros((1, 3 * d)),
                w_attn_out: scaled_uniform(d, d, d, 1.0, rng),
                b_attn_out: Array2::zeros((1, d)),
                ln2_gain: Array2::ones((1, d)),
                ln2_bias: Array2::zeros((1, d)),
                w_ff_in: scaled_uniform(d, f, d, 1.0, rng),
                b_ff_in: Array2::zeros((1, f)),
                w_ff_out: scaled_uniform(f, d, f, 1.0, rng),
                b_ff_out: Array2::zeros((1, d)),
            })
            .collect();
        let w_out = scaled_uniform(d, h, d, 1.0, rng);
        Ok(Self {
            config,
            table,
            w_in,
            b_in: Array2::zeros((1, d)),
            slots,
            w_time1,
            b_time1: Array2::zeros((1, d)),
            w_time2,
            b_time2: Array2::zeros((1, d)),
            layers,
            lnf_gain: Array2::ones((1, d)),
            lnf_bias: Array2::zeros((1, d)),
            w_out,
            b_out: Array2::zeros((1, h)),
        })
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.fill(0.0);
        }
        out
    }

    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = Vec::new();
        collect_tensors!(self, out, &);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> = Vec::new();
        collect_tensors!(self, out, &mut);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Checks tensor shapes against the config (used after loading).
    pub fn check_shapes(&self) -> Result<()> {
        let reference = DenoiserParams::init(self.config, &mut crate::rng::rng_from_seed(0))?;
        let mine = self.tensors();
        let theirs = reference.tensors();
        if mine.len() != theirs.len() {
            return Err(Error::Shape("tensor count does not match config".into()));
        }
        for ((name, a), (_, b)) in mine.iter().zip(theirs.iter()) {
            if a.dim() != b.dim() {
                return Err(Error::Shape(format!("{name}: {:?} vs expected {:?}", a.dim(), b.dim())));
            }
        }
        Ok(())
    }

    /// `f_theta(x_t, t)` for one latent sequence (dropout off).
    pub fn predict_x0(&self, x_t: &LatentSequence, t: usize) -> Result<LatentSequence> {
        if x_t.img_len != self.config.img_len || x_t.cap_len != self.config.cap_len {
            return Err(Error::Shape(format!(
                "segments {}+{} but model expects {}+{}",
                x_t.img_len, x_t.cap_len, self.config.img_len, self.config.cap_len
            )));
        }
        let out = self.predict_batch(&x_t.values, &[t])?;
        LatentSequence::new(out, x_t.img_len, x_t.cap_len)
    }

    /// Batched inference over stacked sequences (`timesteps.len()` of them).
    pub fn predict_batch(&self, x: &Array2<f64>, timesteps: &[usize]) -> Result<Array2<f64>> {
        self.check_input(x, timesteps)?;
        Ok(self.forward(x, timesteps, None).0)
    }

    pub(crate) fn check_input(&self, x: &Array2<f64>, timesteps: &[usize]) -> Result<()> {
        let n = self.config.seq_len();
        if x.ncols() != self.config.embed_dim || x.nrows() != n * timesteps.len() {
            return Err(Error::Shape(format!(
                "input {:?} for {} sequences of {n} x {}",
                x.dim(),
                timesteps.len(),
                self.config.embed_dim
            )));
        }
        if let Some(&t) = timesteps.iter().find(|&&t| t == 0 || t > self.config.t_max) {
            return Err(Error::OutOfRange(format!("timestep {t} outside 1..={}", self.config.t_max)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: timesteps[0], what: "denoiser input".into() });
        }
        Ok(())
    }

    /// Forward pass. With `dropout = Some(rng)` and a nonzero configured rate,
    /// residual branches are dropped.
    pub(crate) fn forward(&self, x: &Array2<f64>, timesteps: &[usize], dropout: Option<&mut Rng>) -> (Array2<f64>, ForwardCache) {
        let cfg = &self.config;
        let layout = SeqLayout { batch: timesteps.len(), seq_len: cfg.seq_len(), heads: cfg.n_heads };
        let mut rng = dropout;
        let p = if rng.is_some() { cfg.dropout } else { 0.0 };

        let time_sin = nn::timestep_embedding(timesteps, cfg.d_model);
        let time_pre = nn::linear(time_sin.view(), &self.w_time1, &self.b_time1);
        let time_act = nn::silu(&time_pre);
        let time_emb = nn::linear(time_act.view(), &self.w_time2, &self.b_time2);

        let mut u = nn::linear(x.view(), &self.w_in, &self.b_in);
        for b in 0..layout.batch {
            let mut block = u.slice_mut(s![b * layout.seq_len..(b + 1) * layout.seq_len, ..]);
            block += &self.slots;
            block += &time_emb.row(b);
        }

        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (a, ln1) = nn::layer_norm(&u, &l.ln1_gain, &l.ln1_bias);
            let qkv = nn::linear(a.view(), &l.w_qkv, &l.b_qkv);
            let (att, probs) = nn::attention(&qkv, layout);
            let mut o = nn::linear(att.view(), &l.w_attn_out, &l.b_attn_out);
            let mask_attn = rng.as_deref_mut().and_then(|r| nn::dropout_mask(o.nrows(), o.ncols(), p, r));
            if let Some(m) = &mask_attn {
                o *= m;
            }
            u += &o;

            let (bn, ln2) = nn::layer_norm(&u, &l.ln2_gain, &l.ln2_bias);
            let hidden = nn::linear(bn.view(), &l.w_ff_in, &l.b_ff_in);
            let act = nn::gelu(&hidden);
            let mut ff = nn::linear(act.view(), &l.w_ff_out, &l.b_ff_out);
            let mask_ff = rng.as_deref_mut().and_then(|r| nn::dropout_mask(ff.nrows(), ff.ncols(), p, r));
            if let Some(m) = &mask_ff {
                ff *= m;
            }
            u += &ff;
            layer_caches.push(LayerCache { a, ln1, qkv, probs, att, mask_attn, bn, ln2, hidden, act, mask_ff });
        }
        let (uf, lnf) = nn::layer_norm(&u, &self.lnf_gain, &self.lnf_bias);
        let y = nn::linear(uf.view(), &self.w_out, &self.b_out);
        let cache = ForwardCache { x: x.clone(), layout, time_sin, time_pre, time_act, layers: layer_caches, lnf, uf };
        (y, cache)
    }

    /// Accumulates parameter gradients into `grads` and returns `d loss / d x`.
    pub(crate) fn backward(&self, cache: &ForwardCache, dy: &Array2<f64>, grads: &mut DenoiserParams) -> Array2<f64> {
        let layout = cache.layout;
        let duf = nn::linear_backward(cache.uf.view(), &self.w_out, dy, &mut grads.w_out, &mut grads.b_out);
        let mut du = nn::layer_norm_backward(&cache.lnf, &self.lnf_gain, &duf, &mut grads.lnf_gain, &mut grads.lnf_bias);

        for ((l, c), g) in self.layers.iter().zip(&cache.layers).zip(grads.layers.iter_mut()).rev() {
            let mut dff = du.clone();
            if let Some(m) = &c.mask_ff {
                dff *= m;
            }
            let dact = nn::linear_backward(c.act.view(), &l.w_ff_out, &dff, &mut g.w_ff_out, &mut g.b_ff_out);
            let dhidden = nn::gelu_backward(&c.hidden, &dact);
            let dbn = nn::linear_backward(c.bn.view(), &l.w_ff_in, &dhidden, &mut g.w_ff_in, &mut g.b_ff_in);
            du += &nn::layer_norm_backward(&c.ln2, &l.ln2_gain, &dbn, &mut g.ln2_gain, &mut g.ln2_bias);

            let mut d_o = du.clone();
            if let Some(m) = &c.mask_attn {
                d_o *= m;
            }
            let datt = nn::linear_backward(c.att.view(), &l.w_attn_out, &d_o, &mut g.w_attn_out, &mut g.b_attn_out);
            let dqkv = nn::attention_backward(&c.qkv, &c.probs, &datt, layout);
            let da = nn::linear_backward(c.a.view(), &l.w_qkv, &dqkv, &mut g.w_qkv, &mut g.b_qkv);
            du += &nn::layer_norm_backward(&c.ln1, &l.ln1_gain, &da, &mut g.ln1_gain, &mut g.ln1_bias);
        }

        let mut dtime = Array2::zeros((layout.batch, self.config.d_model));
        for b in 0..layout.batch {
            let block = du.slice(s![b * layout.seq_len..(b + 1) * layout.seq_len, ..]);
            grads.slots += &block;
            let mut row = dtime.row_mut(b);
            row += &block.sum_axis(ndarray::Axis(0));
        }
        let dact = nn::linear_backward(cache.time_act.view(), &self.w_time2, &dtime, &mut grads.w_time2, &mut grads.b_time2);
        let dpre = nn::silu_backward(&cache.time_pre, &dact);
        let _ = nn::linear_backward(cache.time_sin.view(), &self.w_time1, &dpre, &mut grads.w_time1, &mut grads.b_time1);

        nn::linear_backward(cache.x.view(), &self.w_in, &du, &mut grads.w_in, &mut grads.b_in)
    }
}

pub(crate) struct LayerCache {
    a: Array2<f64>,
    ln1: nn::LayerNormCache,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    att: Array2<f64>,
    mask_attn: Option<Array2<f64>>,
    bn: Array2<f64>,
    ln2: nn::LayerNormCache,
    hidden: Array2<f64>,
    act: Array2<f64>,
    mask_ff: Option<Array2<f64>>,
}

pub(crate) struct ForwardCache {
    x: Array2<f64>,
    layout: SeqLayout,
    time_sin: Array2<f64>,
    time_pre: Array2<f64>,
    time_act: Array2<f64>,
    layers: Vec<LayerCache>,
    lnf: nn::LayerNormCache,
    uf: Array2<f64>,
}
