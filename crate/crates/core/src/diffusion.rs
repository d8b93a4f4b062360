//! Forward partial noising, the training objective and the reverse sampler.
//!
//! Only the caption segment is ever noised; the image segment rides along
//! unchanged and conditions the denoiser.
//!
//! Loss for one example, with `N = L_cap * H` and `x_0 ~ N(EMB, beta_0 I)`:
//!
//! ```text
//! t == 1:  anchor = |EMB(w_cap) - f(x_1, 1)_cap|^2 / N
//! t >= 2:  sum    = |x_0_cap    - f(x_t, t)_cap|^2 / N
//! reg = reg_weight * mean(x_0^2)
//! ce  = ce_weight  * mean_k  -log softmax(-|f_cap[k] - off_k - tok_v|^2)[w_k]
//! ```
//!
//! Gradients reach the embedding table through `x_0`, the regression target,
//! the regularizer and the rounding head.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserParams;
use crate::embedding::{EmbeddingTable, InputPair, LatentSequence, ViewPatchGrid, CAPTION_SEGMENT, IMAGE_SEGMENT};
use crate::error::{invalid, Error, Result};
use crate::rng::{rng_from_seed, standard_normal, Rng};
use crate::schedule::{NoiseSchedule, ScheduleKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: ScheduleKind,
    pub diffusion_steps: usize,
    pub batch_size: usize,
    pub train_steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Coefficient of `mean(x_0^2)`.
    pub reg_weight: f64,
    /// Coefficient of the rounding cross-entropy.
    pub ce_weight: f64,
    /// Clamp `x0_hat` inside the loss. Off by default.
    pub clamp_enabled: bool,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Keep the token table fixed (imported embeddings).
    #[serde(default)]
    pub freeze_token_embeddings: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleKind::Sqrt,
            diffusion_steps: 2000,
            batch_size: 16,
            train_steps: 10_000,
            learning_rate: 1e-3,
            warmup_steps: 200,
            reg_weight: 1e-3,
            ce_weight: 1.0,
            clamp_enabled: false,
            grad_clip: 1.0,
            freeze_token_embeddings: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.diffusion_steps == 0 || self.batch_size == 0 {
            return Err(invalid("diffusion_steps and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(self.reg_weight >= 0.0 && self.ce_weight >= 0.0 && self.grad_clip >= 0.0) {
            return Err(invalid("reg_weight, ce_weight and grad_clip must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub anchor_term: f64,
    pub sum_term: f64,
    pub reg_term: f64,
    pub ce_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.anchor_term + self.sum_term + self.reg_term + self.ce_term;
        self
    }

    fn scaled_add(&mut self, other: &LossBreakdown, w: f64) {
        self.anchor_term += w * other.anchor_term;
        self.sum_term += w * other.sum_term;
        self.reg_term += w * other.reg_term;
        self.ce_term += w * other.ce_term;
        self.total += w * other.total;
    }
}

/// `q(x_t | x_0)` on the caption segment; the image segment is copied.
pub fn forward_noise(x0: &LatentSequence, t: usize, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<LatentSequence> {
    let eps = Array2::from_shape_fn((x0.cap_len, x0.dim()), |_| standard_normal(rng));
    forward_noise_with(x0, t, schedule, &eps)
}

/// [`forward_noise`] with caller-supplied standard-normal noise.
pub fn forward_noise_with(x0: &LatentSequence, t: usize, schedule: &NoiseSchedule, eps: &Array2<f64>) -> Result<LatentSequence> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::OutOfRange(format!("timestep {t} outside 1..={}", schedule.steps())));
    }
    if eps.dim() != (x0.cap_len, x0.dim()) {
        return Err(Error::Shape(format!("noise {:?} for caption {}x{}", eps.dim(), x0.cap_len, x0.dim())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = x0.clone();
    let mut cap = out.values.slice_mut(s![x0.img_len.., ..]);
    cap.zip_mut_with(eps, |x, &e| *x = a * *x + b * e);
    Ok(out)
}

/// All randomness of one loss evaluation, drawn up front so the same draw can
/// be replayed (finite-difference checks, batched vs. per-example evaluation).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    /// Standard-normal jitter of `x_0` over the whole sequence.
    pub x0_noise: Array2<f64>,
    /// Standard-normal forward-process noise for the caption segment.
    pub eps: Array2<f64>,
}

impl NoiseDraw {
    pub fn sample(params: &DenoiserParams, schedule: &NoiseSchedule, rng: &mut Rng) -> Self {
        let cfg = &params.config;
        let t = rng.random_range(1..=schedule.steps());
        let x0_noise = Array2::from_shape_fn((cfg.seq_len(), cfg.embed_dim), |_| standard_normal(rng));
        let eps = Array2::from_shape_fn((cfg.cap_len, cfg.embed_dim), |_| standard_normal(rng));
        Self { t, x0_noise, eps }
    }
}

/// Mean loss over `pairs`. When `grads` is given, the exact gradient of the
/// returned total is accumulated into it.
pub fn batch_loss(
    params: &DenoiserParams,
    pairs: &[&InputPair],
    draws: &[NoiseDraw],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    grads: Option<&mut DenoiserParams>,
    dropout: Option<&mut Rng>,
) -> Result<LossBreakdown> {
    if pairs.is_empty() || pairs.len() != draws.len() {
        return Err(invalid("one noise draw per training pair is required"));
    }
    if schedule.steps() > params.config.t_max {
        return Err(invalid(format!("schedule has {} steps but the model supports {}", schedule.steps(), params.config.t_max)));
    }
    let cfg = params.config;
    let (n, il, cl, h) = (cfg.seq_len(), cfg.img_len, cfg.cap_len, cfg.embed_dim);
    let batch = pairs.len();
    let beta0 = schedule.beta0();
    let table = &params.table;

    // Clean embeddings, x_0 and x_t for every example, stacked.
    let mut clean = Vec::with_capacity(batch);
    let mut x0s = Vec::with_capacity(batch);
    let mut xt = Array2::zeros((batch * n, h));
    let mut timesteps = Vec::with_capacity(batch);
    for (b, (pair, d)) in pairs.iter().zip(draws).enumerate() {
        if pair.caption.len() != cl || pair.view.len() != il {
            return Err(Error::Shape(format!("pair of {}+{} slots, model expects {il}+{cl}", pair.view.len(), pair.caption.len())));
        }
        if d.t == 0 || d.t > schedule.steps() {
            return Err(Error::OutOfRange(format!("timestep {} outside 1..={}", d.t, schedule.steps())));
        }
        let emb = table.embed_pair(pair, &cfg.features)?;
        let mut x0 = emb.clone();
        x0.values.scaled_add(beta0.sqrt(), &d.x0_noise);
        let noised = forward_noise_with(&x0, d.t, schedule, &d.eps)?;
        xt.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&noised.values);
        timesteps.push(schedule.model_timestep(d.t));
        clean.push(emb);
        x0s.push(x0);
    }

    let (y, cache) = params.forward(&xt, &timesteps, dropout);
    let w = 1.0 / batch as f64;
    let mut total = LossBreakdown::default();
    let mut dy = Array2::zeros(y.raw_dim());
    // Gradient w.r.t. each example's x_0 and its clean embedding.
    let mut dx0 = Vec::with_capacity(batch);
    let mut demb = Vec::with_capacity(batch);
    let mut dtable = grads.as_ref().map(|_| EmbeddingTable::zeros(cfg.vocab_size, cfg.features.width(), cfg.max_slot_len(), h));

    for b in 0..batch {
        let pred = y.slice(s![b * n + il..(b + 1) * n, ..]);
        let t = draws[b].t;
        let target = if t == 1 { clean[b].caption() } else { x0s[b].caption() };
        let head = head_loss(table, pred, target, &pairs[b].caption, config, dtable.as_mut().map(|d| (d, w)))?;
        let mut terms = LossBreakdown {
            anchor_term: if t == 1 { head.mse } else { 0.0 },
            sum_term: if t == 1 { 0.0 } else { head.mse },
            reg_term: 0.0,
            ce_term: head.ce,
            total: 0.0,
        };
        let x0_sq = x0s[b].values.iter().map(|v| v * v).sum::<f64>() / x0s[b].values.len() as f64;
        terms.reg_term = config.reg_weight * x0_sq;
        let terms = terms.finish();
        if !terms.total.is_finite() {
            return Err(Error::NonFinite { step: t, what: "training loss".into() });
        }
        total.scaled_add(&terms, w);

        if grads.is_some() {
            dy.slice_mut(s![b * n + il..(b + 1) * n, ..]).assign(&(&head.d_pred * w));
            let mut g0 = &x0s[b].values * (2.0 * config.reg_weight / x0s[b].values.len() as f64 * w);
            let mut ge = Array2::zeros((n, h));
            let dtarget = &head.d_target * w;
            if t == 1 {
                ge.slice_mut(s![il.., ..]).assign(&dtarget);
            } else {
                let mut cap = g0.slice_mut(s![il.., ..]);
                cap += &dtarget;
            }
            dx0.push(g0);
            demb.push(ge);
        }
    }

    if let Some(grads) = grads {
        let dx = params.backward(&cache, &dy, grads);
        let mut dtable = dtable.expect("allocated with grads");
        for b in 0..batch {
            let sa = schedule.alpha_bar(draws[b].t).sqrt();
            let mut g = dx0[b].clone();
            {
                let dxb = dx.slice(s![b * n..(b + 1) * n, ..]);
                let mut gi = g.slice_mut(s![..il, ..]);
                gi += &dxb.slice(s![..il, ..]);
                let mut gc = g.slice_mut(s![il.., ..]);
                gc.scaled_add(sa, &dxb.slice(s![il.., ..]));
            }
            // x_0 = EMB + noise, so d/dEMB picks up d/dx_0 as is.
            g += &demb[b];
            embedding_backward(pairs[b], &g, &cfg.features, &mut dtable)?;
        }
        grads.table.tokens += &dtable.tokens;
        grads.table.patch_projector += &dtable.patch_projector;
        grads.table.modality += &dtable.modality;
        grads.table.positions += &dtable.positions;
    }
    Ok(total)
}

/// `training_loss` for a single pair: draws `t` and all noise from `rng`,
/// returns the loss and its gradient.
pub fn training_loss(
    params: &DenoiserParams,
    pair: &InputPair,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<(LossBreakdown, DenoiserParams)> {
    let draw = NoiseDraw::sample(params, schedule, rng);
    let mut grads = params.zeros_like();
    let loss = batch_loss(params, &[pair], &[draw], schedule, config, Some(&mut grads), None)?;
    Ok((loss, grads))
}

pub(crate) struct HeadLoss {
    pub mse: f64,
    pub ce: f64,
    pub d_pred: Array2<f64>,
    pub d_target: Array2<f64>,
}

/// Regression and rounding terms for one predicted caption segment.
/// Accumulates `scale` times the rounding head's table gradient into `dtable`.
pub(crate) fn head_loss(
    table: &EmbeddingTable,
    pred: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    caption: &[u32],
    config: &TrainConfig,
    dtable: Option<(&mut EmbeddingTable, f64)>,
) -> Result<HeadLoss> {
    let count = pred.len() as f64;
    let diff = &pred - &target;
    let mse = diff.iter().map(|v| v * v).sum::<f64>() / count;
    let mut d_pred = &diff * (2.0 / count);
    let d_target = -&d_pred;

    let mut ce = 0.0;
    if config.ce_weight > 0.0 {
        let cl = caption.len();
        let rounded;
        let head_in = if config.clamp_enabled {
            rounded = table.clamp_to_embedding(pred)?;
            rounded.view()
        } else {
            pred
        };
        let logits = table.rounding_logits(head_in);
        // G = dCE/dlogits = ce_weight * (softmax - onehot) / L_cap
        let mut g = Array2::zeros(logits.raw_dim());
        for (k, row) in logits.rows().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            ce += lse - row[caption[k] as usize];
            for (v, &l) in row.iter().enumerate() {
                g[[k, v]] = (l - lse).exp();
            }
            g[[k, caption[k] as usize]] -= 1.0;
        }
        ce *= config.ce_weight / cl as f64;
        g *= config.ce_weight / cl as f64;

        // logits[k, v] = -|c_k - tok_v|^2 with c_k = x_k - off_k.
        // Rows of G sum to zero, so dc_k = 2 * sum_v G[k, v] tok_v.
        let dc = g.dot(&table.tokens) * 2.0;
        if !config.clamp_enabled {
            d_pred += &dc;
        }
        if let Some((dt, scale)) = dtable {
            let g = &g * scale;
            let dc = &dc * scale;
            let c = &head_in - &table.caption_offsets(cl);
            let col_sums = g.sum_axis(Axis(0));
            dt.tokens += &(g.t().dot(&c) * 2.0);
            for (v, mut row) in dt.tokens.rows_mut().into_iter().enumerate() {
                row.scaled_add(-2.0 * col_sums[v], &table.tokens.row(v));
            }
            if !config.clamp_enabled {
                // The offsets enter c_k with a minus sign.
                let mut pos = dt.positions.slice_mut(s![..cl, ..]);
                pos -= &dc;
                let mut m = dt.modality.row_mut(CAPTION_SEGMENT);
                m -= &dc.sum_axis(Axis(0));
            }
        }
    }
    Ok(HeadLoss { mse, ce, d_pred, d_target })
}

/// Backpropagates a gradient on `EMB(pair)` into the table.
fn embedding_backward(
    pair: &InputPair,
    g: &Array2<f64>,
    space: &crate::embedding::FeatureSpace,
    dt: &mut EmbeddingTable,
) -> Result<()> {
    let il = pair.view.len();
    let gi = g.slice(s![..il, ..]);
    let gc = g.slice(s![il.., ..]);
    dt.patch_projector += &pair.view.one_hot(space).t().dot(&gi);
    {
        let mut m = dt.modality.row_mut(IMAGE_SEGMENT);
        m += &gi.sum_axis(Axis(0));
    }
    {
        let mut m = dt.modality.row_mut(CAPTION_SEGMENT);
        m += &gc.sum_axis(Axis(0));
    }
    {
        let mut p = dt.positions.slice_mut(s![..il, ..]);
        p += &gi;
    }
    {
        let mut p = dt.positions.slice_mut(s![..gc.nrows(), ..]);
        p += &gc;
    }
    for (k, &id) in pair.caption.iter().enumerate() {
        let mut row = dt.tokens.row_mut(id as usize);
        row += &gc.row(k);
    }
    Ok(())
}

/// Result of one reverse-diffusion run.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Final unclamped `x0_hat` for the caption segment (`L_cap x H`).
    pub x0_cap: Array2<f64>,
    pub tokens: Vec<u32>,
}

/// One reverse run: view to condition on and the seed of its private stream.
#[derive(Debug, Clone, Copy)]
pub struct SampleJob<'a> {
    pub view: &'a ViewPatchGrid,
    pub seed: u64,
}

/// Reverse diffusion for a single view.
pub fn sample_reverse(
    params: &DenoiserParams,
    view: &ViewPatchGrid,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    clamp_enabled: bool,
) -> Result<Sample> {
    let seed = rng.random::<u64>();
    Ok(sample_reverse_batch(params, &[SampleJob { view, seed }], schedule, clamp_enabled)?.remove(0))
}

/// Runs several independent reverse chains in lock-step through one batched
/// denoiser call per timestep. Each chain draws only from its own stream, so
/// its result does not depend on what else is in the batch.
pub fn sample_reverse_batch(
    params: &DenoiserParams,
    jobs: &[SampleJob<'_>],
    schedule: &NoiseSchedule,
    clamp_enabled: bool,
) -> Result<Vec<Sample>> {
    if jobs.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = params.config;
    let (n, il, cl, h) = (cfg.seq_len(), cfg.img_len, cfg.cap_len, cfg.embed_dim);
    if schedule.model_timestep(schedule.steps()) > cfg.t_max {
        return Err(invalid(format!("schedule reaches timestep {} beyond the model's {}", schedule.model_timestep(schedule.steps()), cfg.t_max)));
    }
    let table = &params.table;
    let mut rngs: Vec<Rng> = jobs.iter().map(|j| rng_from_seed(j.seed)).collect();
    let mut x = Array2::zeros((jobs.len() * n, h));
    let mut images = Vec::with_capacity(jobs.len());
    for (b, job) in jobs.iter().enumerate() {
        if job.view.len() != il {
            return Err(Error::Shape(format!("view of {} patches, model expects {il}", job.view.len())));
        }
        let img = table.embed_view(job.view, &cfg.features)?;
        x.slice_mut(s![b * n..b * n + il, ..]).assign(&img);
        let rng = &mut rngs[b];
        x.slice_mut(s![b * n + il..(b + 1) * n, ..]).mapv_inplace(|_| standard_normal(rng));
        images.push(img);
    }

    let mut x0_hat = vec![Array2::zeros((cl, h)); jobs.len()];
    for t in (1..=schedule.steps()).rev() {
        let model_t = schedule.model_timestep(t);
        let y = params.predict_batch(&x, &vec![model_t; jobs.len()]).map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::NonFinite { step: t, what },
            other => other,
        })?;
        let pc = schedule.posterior_coeffs(t)?;
        let sd = pc.var.sqrt();
        for b in 0..jobs.len() {
            let pred = y.slice(s![b * n + il..(b + 1) * n, ..]).to_owned();
            if pred.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step: t, what: "predicted x0".into() });
            }
            let guide = if clamp_enabled { table.clamp_to_embedding(pred.view())? } else { pred.clone() };
            let rng = &mut rngs[b];
            let mut cap = x.slice_mut(s![b * n + il..(b + 1) * n, ..]);
            ndarray::Zip::from(&mut cap).and(&guide).for_each(|xt, &g| {
                let z = if t > 1 { standard_normal(rng) } else { 0.0 };
                *xt = pc.c_xt * *xt + pc.c_x0 * g + sd * z;
            });
            x.slice_mut(s![b * n..b * n + il, ..]).assign(&images[b]);
            x0_hat[b] = pred;
        }
    }
    x0_hat
        .into_iter()
        .map(|x0_cap| {
            let (tokens, _) = table.round_to_tokens(x0_cap.view())?;
            Ok(Sample { x0_cap, tokens })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::tests::tiny_config;
    use crate::embedding::{Patch, ViewPatchGrid};

    fn tiny_pair() -> InputPair {
        let mut view = ViewPatchGrid::empty(2);
        view.set(0, 1, Patch::new(1, 0, 0, 0));
        view.set(1, 0, Patch::new(0, 1, 0, 0));
        InputPair { view, caption: vec![1, 4, 2] }
    }

    fn tiny_params(seed: u64) -> DenoiserParams {
        DenoiserParams::init(tiny_config(), &mut rng_from_seed(seed)).unwrap()
    }

    #[test]
    fn forward_noise_zero_eps_and_image_purity() {
        let s = NoiseSchedule::build(ScheduleKind::Sqrt, 50).unwrap();
        let vals = Array2::from_shape_fn((7, 4), |(i, j)| (i * 4 + j) as f64 * 0.1 - 1.0);
        let x0 = LatentSequence::new(vals, 4, 3).unwrap();
        let zero = forward_noise_with(&x0, 10, &s, &Array2::zeros((3, 4))).unwrap();
        let a = s.alpha_bar(10).sqrt();
        for (o, i) in zero.caption().iter().zip(x0.caption().iter()) {
            assert_eq!(*o, a * i);
        }
        let mut rng = rng_from_seed(3);
        for t in [1, 25, 50] {
            let y = forward_noise(&x0, t, &s, &mut rng).unwrap();
            assert_eq!(y.image(), x0.image());
        }
        assert!(forward_noise(&x0, 0, &s, &mut rng).is_err());
        assert!(forward_noise(&x0, 51, &s, &mut rng).is_err());
    }

    #[test]
    fn perfect_prediction_zeroes_the_regression_term() {
        let p = tiny_params(1);
        let cfg = TrainConfig { ce_weight: 0.0, ..TrainConfig::default() };
        let target = Array2::from_elem((3, 4), 0.3);
        let head = head_loss(&p.table, target.view(), target.view(), &[1, 4, 2], &cfg, None).unwrap();
        assert_eq!(head.mse, 0.0);
        assert!(head.d_pred.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn term_gating() {
        let p = tiny_params(2);
        let s = NoiseSchedule::build(ScheduleKind::Sqrt, 10).unwrap();
        let cfg = TrainConfig { reg_weight: 0.0, ce_weight: 0.0, ..TrainConfig::default() };
        for seed in 0..10 {
            let (l, _) = training_loss(&p, &tiny_pair(), &s, &cfg, &mut rng_from_seed(seed)).unwrap();
            assert_eq!(l.reg_term, 0.0);
            assert_eq!(l.ce_term, 0.0);
            assert_eq!(l.total, l.anchor_term + l.sum_term);
            assert!(l.anchor_term == 0.0 || l.sum_term == 0.0);
        }
    }

    fn loss_at(p: &DenoiserParams, pairs: &[&InputPair], draws: &[NoiseDraw], s: &NoiseSchedule, cfg: &TrainConfig) -> f64 {
        batch_loss(p, pairs, draws, s, cfg, None, None).unwrap().total
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut p = tiny_params(5);
        // Non-trivial biases and gains so every path is exercised.
        let mut r = rng_from_seed(9);
        for (_, t) in p.tensors_mut() {
            t.mapv_inplace(|v| v + 0.05 * standard_normal(&mut r));
        }
        assert!(p.param_count() <= 5000);
        let s = NoiseSchedule::build(ScheduleKind::Sqrt, 10).unwrap();
        let cfg = TrainConfig { reg_weight: 0.1, ce_weight: 0.5, ..TrainConfig::default() };
        let pair_a = tiny_pair();
        let mut pair_b = tiny_pair();
        pair_b.caption = vec![1, 5, 2];
        let pairs = [&pair_a, &pair_b];
        let mut rng = rng_from_seed(11);
        let mut draws: Vec<NoiseDraw> = (0..2).map(|_| NoiseDraw::sample(&p, &s, &mut rng)).collect();
        draws[0].t = 1;
        draws[1].t = 6;
        let mut grads = p.zeros_like();
        batch_loss(&p, &pairs, &draws, &s, &cfg, Some(&mut grads), None).unwrap();

        let h = 1e-5;
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        for (ti, name) in names.iter().enumerate() {
            let len = p.tensors()[ti].1.len();
            for idx in 0..len {
                let analytic = grads.tensors()[ti].1.as_slice().unwrap()[idx];
                let mut plus = p.clone();
                plus.tensors_mut()[ti].1.as_slice_mut().unwrap()[idx] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[ti].1.as_slice_mut().unwrap()[idx] -= h;
                let num = (loss_at(&plus, &pairs, &draws, &s, &cfg) - loss_at(&minus, &pairs, &draws, &s, &cfg)) / (2.0 * h);
                let err = (num - analytic).abs() / (num.abs().max(analytic.abs()).max(1e-6));
                assert!(err <= 1e-4 || (num - analytic).abs() < 1e-9, "{name}[{idx}]: fd {num} vs {analytic}");
            }
        }
    }

    #[test]
    fn sampler_is_seeded_and_batch_independent() {
        let p = tiny_params(7);
        let s = NoiseSchedule::build(ScheduleKind::Sqrt, 10).unwrap();
        let pair = tiny_pair();
        let mut other = pair.view.clone();
        other.set(1, 1, Patch::new(1, 1, 0, 0));
        let a = sample_reverse_batch(&p, &[SampleJob { view: &pair.view, seed: 5 }], &s, true).unwrap();
        let b = sample_reverse_batch(
            &p,
            &[SampleJob { view: &other, seed: 9 }, SampleJob { view: &pair.view, seed: 5 }],
            &s,
            true,
        )
        .unwrap();
        assert_eq!(a[0], b[1]);
        let again = sample_reverse_batch(&p, &[SampleJob { view: &pair.view, seed: 5 }], &s, true).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn identity_respacing_gives_the_same_trajectory() {
        let p = tiny_params(8);
        let s = NoiseSchedule::build(ScheduleKind::Sqrt, 10).unwrap();
        let r = s.respace(10).unwrap();
        let view = tiny_pair().view;
        for clamp in [false, true] {
            let a = sample_reverse(&p, &view, &s, &mut rng_from_seed(4), clamp).unwrap();
            let b = sample_reverse(&p, &view, &r, &mut rng_from_seed(4), clamp).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sampler_matches_a_hand_rolled_chain() {
        let p = tiny_params(9);
        let s = NoiseSchedule::from_betas(&[0.3, 0.5]).unwrap();
        let view = tiny_pair().view;
        let got = sample_reverse_batch(&p, &[SampleJob { view: &view, seed: 1 }], &s, false).unwrap();

        let mut rng = rng_from_seed(1);
        let img = p.table.embed_view(&view, &p.config.features).unwrap();
        let cap = Array2::from_shape_fn((3, 4), |_| standard_normal(&mut rng));
        let mut x = ndarray::concatenate(Axis(0), &[img.view(), cap.view()]).unwrap();
        let mut last = Array2::zeros((3, 4));
        for t in [2, 1] {
            let y = p.predict_batch(&x, &[t]).unwrap();
            let pred = y.slice(s![4.., ..]).to_owned();
            let pc = s.posterior_coeffs(t).unwrap();
            for (xv, &g) in x.slice_mut(s![4.., ..]).iter_mut().zip(pred.iter()) {
                let z = if t > 1 { standard_normal(&mut rng) } else { 0.0 };
                *xv = pc.c_xt * *xv + pc.c_x0 * g + pc.var.sqrt() * z;
            }
            last = pred;
        }
        assert_eq!(got[0].x0_cap, last);
        let (tokens, _) = p.table.round_to_tokens(last.view()).unwrap();
        assert_eq!(got[0].tokens, tokens);
    }
}
