//! Optimization loop around [`crate::diffusion::batch_loss`].
//!
//! Every step draws its minibatch, noise and dropout masks from a stream
//! seeded by `(seed, step)`, so a resumed run continues exactly where a
//! straight run would have been.

use std::collections::VecDeque;
use std::io::Write;

use ndarray::Zip;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserParams;
use crate::diffusion::{batch_loss, LossBreakdown, NoiseDraw, TrainConfig};
use crate::embedding::{InputPair, Vocabulary};
use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::schedule::NoiseSchedule;
use crate::synthdata::{Dataset, Split};

pub const MOVING_AVERAGE_WINDOW: usize = 500;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Learning rate decays linearly from the peak to this fraction at the final step.
const FINAL_LR_FRACTION: f64 = 0.1;
const FROZEN_TOKENS: &str = "embed.tokens";

/// Every (view, caption) combination of the shapes in `split`.
pub fn training_pairs(dataset: &Dataset, vocab: &Vocabulary, cap_len: usize, split: Option<Split>) -> Result<Vec<InputPair>> {
    let mut pairs = Vec::new();
    for r in dataset.records.iter().filter(|r| split.is_none_or(|s| r.split == s)) {
        for caption in &r.captions {
            let words: Vec<&str> = caption.split_whitespace().collect();
            let ids = vocab.encode(&words, cap_len)?;
            for view in &r.views {
                pairs.push(InputPair { view: view.clone(), caption: ids.clone() });
            }
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub loss: LossBreakdown,
    pub learning_rate: f64,
    pub moving_average: f64,
}

pub fn write_curve_header<W: Write>(mut out: W) -> Result<()> {
    writeln!(out, "step,anchor_term,sum_term,reg_term,ce_term,total,learning_rate,moving_average")?;
    Ok(())
}

pub fn write_curve_row<W: Write>(mut out: W, r: &CurveRow) -> Result<()> {
    writeln!(
        out,
        "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.6e},{:.9e}",
        r.step, r.loss.anchor_term, r.loss.sum_term, r.loss.reg_term, r.loss.ce_term, r.loss.total, r.learning_rate, r.moving_average
    )?;
    Ok(())
}

/// Optimizer state that has to survive a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: usize,
    pub adam_m: DenoiserParams,
    pub adam_v: DenoiserParams,
    /// Totals of the most recent steps, oldest first.
    pub recent: VecDeque<f64>,
}

impl TrainState {
    pub fn fresh(params: &DenoiserParams) -> Self {
        Self { step: 0, adam_m: params.zeros_like(), adam_v: params.zeros_like(), recent: VecDeque::new() }
    }
}

pub struct Trainer {
    pub params: DenoiserParams,
    pub state: TrainState,
    pub config: TrainConfig,
    schedule: NoiseSchedule,
}

impl Trainer {
    pub fn new(params: DenoiserParams, config: TrainConfig) -> Result<Self> {
        let state = TrainState::fresh(&params);
        Self::resume(params, state, config)
    }

    pub fn resume(params: DenoiserParams, state: TrainState, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        params.check_shapes()?;
        let schedule = NoiseSchedule::build(config.schedule, config.diffusion_steps)?;
        if config.diffusion_steps > params.config.t_max {
            return Err(invalid(format!(
                "{} diffusion steps exceed the model's t_max {}",
                config.diffusion_steps, params.config.t_max
            )));
        }
        Ok(Self { params, state, config, schedule })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        let c = &self.config;
        if step < c.warmup_steps {
            return c.learning_rate * (step + 1) as f64 / c.warmup_steps as f64;
        }
        let span = c.train_steps.saturating_sub(c.warmup_steps).max(1) as f64;
        let progress = ((step - c.warmup_steps) as f64 / span).min(1.0);
        c.learning_rate * (1.0 - (1.0 - FINAL_LR_FRACTION) * progress)
    }

    /// One optimizer step on a minibatch drawn from `pairs`.
    pub fn step(&mut self, pairs: &[InputPair]) -> Result<CurveRow> {
        if pairs.is_empty() {
            return Err(invalid("no training pairs"));
        }
        let step = self.state.step;
        let mut rng = rng_from_seed(derive_seed(self.config.seed, &[step as u64]));
        let batch: Vec<&InputPair> = (0..self.config.batch_size).map(|_| &pairs[rng.random_range(0..pairs.len())]).collect();
        let draws: Vec<NoiseDraw> = batch.iter().map(|_| NoiseDraw::sample(&self.params, &self.schedule, &mut rng)).collect();
        let mut grads = self.params.zeros_like();
        let loss = batch_loss(&self.params, &batch, &draws, &self.schedule, &self.config, Some(&mut grads), Some(&mut rng))
            .map_err(|e| match e {
                Error::NonFinite { what, .. } => Error::NonFinite { step: step + 1, what },
                other => other,
            })?;
        if !grads.is_finite() {
            return Err(Error::NonFinite { step: step + 1, what: "gradient".into() });
        }

        let norm = grads.tensors().iter().map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        let clip = if self.config.grad_clip > 0.0 && norm > self.config.grad_clip { self.config.grad_clip / norm } else { 1.0 };
        let lr = self.learning_rate(step);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let params = self.params.tensors_mut();
        let ms = self.state.adam_m.tensors_mut();
        let vs = self.state.adam_v.tensors_mut();
        for ((((name, p), (_, m)), (_, v)), (_, g)) in params.into_iter().zip(ms).zip(vs).zip(grads.tensors()) {
            if self.config.freeze_token_embeddings && name == FROZEN_TOKENS {
                continue;
            }
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * clip;
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
            });
        }
        if !self.params.is_finite() {
            return Err(Error::NonFinite { step: step + 1, what: "parameters".into() });
        }

        self.state.step += 1;
        self.state.recent.push_back(loss.total);
        while self.state.recent.len() > MOVING_AVERAGE_WINDOW {
            self.state.recent.pop_front();
        }
        let moving_average = self.state.recent.iter().sum::<f64>() / self.state.recent.len() as f64;
        Ok(CurveRow { step: self.state.step, loss, learning_rate: lr, moving_average })
    }

    /// Steps until `config.train_steps` have been completed, handing every row
    /// to `on_row`.
    pub fn run(&mut self, pairs: &[InputPair], mut on_row: impl FnMut(&CurveRow) -> Result<()>) -> Result<()> {
        while self.state.step < self.config.train_steps {
            let row = self.step(pairs)?;
            on_row(&row)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::tests::tiny_config;
    use crate::embedding::{Patch, ViewPatchGrid};

    fn pairs() -> Vec<InputPair> {
        let mut a = ViewPatchGrid::empty(2);
        a.set(0, 0, Patch::new(1, 0, 0, 0));
        let mut b = ViewPatchGrid::empty(2);
        b.set(1, 1, Patch::new(0, 1, 0, 0));
        vec![InputPair { view: a, caption: vec![1, 4, 2] }, InputPair { view: b, caption: vec![1, 5, 2] }]
    }

    fn config() -> TrainConfig {
        TrainConfig { diffusion_steps: 10, batch_size: 2, train_steps: 6, warmup_steps: 2, seed: 3, ..TrainConfig::default() }
    }

    fn trainer() -> Trainer {
        let p = DenoiserParams::init(tiny_config(), &mut rng_from_seed(1)).unwrap();
        Trainer::new(p, config()).unwrap()
    }

    #[test]
    fn one_step_moves_parameters() {
        let mut t = trainer();
        let before = t.params.clone();
        t.step(&pairs()).unwrap();
        assert_ne!(before, t.params);
        assert_eq!(t.state.step, 1);
    }

    #[test]
    fn runs_are_deterministic_and_resumable() {
        let mut a = trainer();
        let mut curve_a = Vec::new();
        a.run(&pairs(), |r| {
            curve_a.push(*r);
            Ok(())
        })
        .unwrap();

        let mut b = trainer();
        let mut curve_b = Vec::new();
        b.config.train_steps = 3;
        b.run(&pairs(), |r| {
            curve_b.push(*r);
            Ok(())
        })
        .unwrap();
        let mut resumed = Trainer::resume(b.params.clone(), b.state.clone(), config()).unwrap();
        resumed
            .run(&pairs(), |r| {
                curve_b.push(*r);
                Ok(())
            })
            .unwrap();
        assert_eq!(curve_a, curve_b);
        assert_eq!(a.params, resumed.params);
    }

    #[test]
    fn frozen_token_table_stays_put() {
        let mut t = trainer();
        t.config.freeze_token_embeddings = true;
        let before = t.params.clone();
        t.step(&pairs()).unwrap();
        assert_eq!(before.table.tokens, t.params.table.tokens);
        assert_ne!(before.w_in, t.params.w_in);
    }

    #[test]
    fn warmup_then_decay() {
        let t = trainer();
        let lr = t.config.learning_rate;
        assert!((t.learning_rate(0) - lr / 2.0).abs() < 1e-15);
        assert!((t.learning_rate(1) - lr).abs() < 1e-15);
        assert!((t.learning_rate(6) - lr * FINAL_LR_FRACTION).abs() < 1e-15);
    }
}
