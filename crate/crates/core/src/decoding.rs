//! Candidate generation, minimum-Bayes-risk selection, cross-view pooling and
//! the end-to-end `caption_shape` pipeline.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserParams;
use crate::diffusion::{sample_reverse_batch, SampleJob};
use crate::embedding::{ViewPatchGrid, BOS, EOS, PAD};
use crate::error::{invalid, Error, Result};
use crate::metrics::bleu;
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub tokens: Vec<u32>,
    #[serde(skip)]
    pub x0_cap: Array2<f64>,
    pub view_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateSet {
    pub view_index: usize,
    pub candidates: Vec<Candidate>,
}

/// Seed of candidate `s` of view `view_index` under `master`.
pub fn candidate_seed(master: u64, view_index: usize, s: usize) -> u64 {
    derive_seed(master, &[view_index as u64, s as u64])
}

/// `samples` independent reverse runs for one view.
pub fn generate_candidates(
    params: &DenoiserParams,
    view: &ViewPatchGrid,
    view_index: usize,
    samples: usize,
    schedule: &NoiseSchedule,
    master_seed: u64,
    clamp_enabled: bool,
) -> Result<CandidateSet> {
    let mut sets = generate_candidate_sets(params, &[view], samples, schedule, master_seed, clamp_enabled, view_index)?;
    Ok(sets.remove(0))
}

/// Candidate sets for several views, all chains run as one batch.
fn generate_candidate_sets(
    params: &DenoiserParams,
    views: &[&ViewPatchGrid],
    samples: usize,
    schedule: &NoiseSchedule,
    master_seed: u64,
    clamp_enabled: bool,
    first_index: usize,
) -> Result<Vec<CandidateSet>> {
    if samples == 0 {
        return Err(invalid("at least one candidate per view is required"));
    }
    let jobs: Vec<SampleJob<'_>> = views
        .iter()
        .enumerate()
        .flat_map(|(i, &view)| {
            (0..samples).map(move |s| SampleJob { view, seed: candidate_seed(master_seed, first_index + i, s) })
        })
        .collect();
    let mut out = sample_reverse_batch(params, &jobs, schedule, clamp_enabled)?.into_iter();
    Ok((0..views.len())
        .map(|i| CandidateSet {
            view_index: first_index + i,
            candidates: (&mut out)
                .take(samples)
                .map(|s| Candidate { tokens: s.tokens, x0_cap: s.x0_cap, view_index: first_index + i })
                .collect(),
        })
        .collect())
}

/// Expected risk of every item against the whole set (self-term included)
/// and the index of the smallest; ties go to the lowest index.
pub fn mbr_select<T>(items: &[T], loss: impl Fn(&T, &T) -> f64) -> Result<(usize, Vec<f64>)> {
    if items.is_empty() {
        return Err(invalid("MBR over an empty candidate set"));
    }
    let n = items.len() as f64;
    let risks: Vec<f64> = items.iter().map(|a| items.iter().map(|b| loss(a, b)).sum::<f64>() / n).collect();
    let mut best = 0;
    for (i, &r) in risks.iter().enumerate() {
        if r < risks[best] {
            best = i;
        }
    }
    Ok((best, risks))
}

/// Caption content: token ids without PAD/BOS/EOS framing.
pub fn content_tokens(tokens: &[u32]) -> Vec<u32> {
    tokens.iter().copied().filter(|&t| t != PAD && t != BOS && t != EOS).collect()
}

/// Default MBR loss: negative smoothed BLEU-4 on content tokens. Two empty
/// captions count as identical, an empty one against a non-empty one as
/// disjoint.
pub fn neg_bleu_loss(a: &[u32], b: &[u32]) -> f64 {
    let (a, b) = (content_tokens(a), content_tokens(b));
    match (a.is_empty(), b.is_empty()) {
        (true, true) => -1.0,
        (true, false) | (false, true) => 0.0,
        _ => -bleu(&a, &[&b], 4, true).expect("non-empty inputs"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Mean,
    Stochastic,
}

impl Pooling {
    pub const ALL: [Pooling; 3] = [Pooling::Max, Pooling::Mean, Pooling::Stochastic];

    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Max => "max",
            Pooling::Mean => "mean",
            Pooling::Stochastic => "stochastic",
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pooling::ALL
            .into_iter()
            .find(|p| p.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| invalid(format!("unknown pooling method '{s}'")))
    }
}

/// Element-wise pooling of per-view caption latents. Stochastic pooling picks,
/// for every element independently, the value of a uniformly drawn view.
pub fn aggregate_views(latents: &[Array2<f64>], method: Pooling, rng: &mut Rng) -> Result<Array2<f64>> {
    let first = latents.first().ok_or_else(|| invalid("no latents to aggregate"))?;
    if let Some(bad) = latents.iter().find(|l| l.dim() != first.dim()) {
        return Err(Error::Shape(format!("latent {:?} vs {:?}", bad.dim(), first.dim())));
    }
    let mut out = first.clone();
    match method {
        Pooling::Max => {
            for l in &latents[1..] {
                out.zip_mut_with(l, |o, &v| *o = o.max(v));
            }
        }
        Pooling::Mean => {
            for l in &latents[1..] {
                out += l;
            }
            out /= latents.len() as f64;
        }
        Pooling::Stochastic => {
            for (idx, o) in out.indexed_iter_mut() {
                *o = latents[rng.random_range(0..latents.len())][idx];
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeSettings {
    /// Candidates per view.
    pub samples: usize,
    pub pooling: Pooling,
    pub clamp_enabled: bool,
    pub seed: u64,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self { samples: 5, pooling: Pooling::Max, clamp_enabled: true, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewDecision {
    pub set: CandidateSet,
    pub risks: Vec<f64>,
    pub selected: usize,
}

impl ViewDecision {
    pub fn chosen(&self) -> &Candidate {
        &self.set.candidates[self.selected]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapeCaption {
    pub tokens: Vec<u32>,
    #[serde(skip)]
    pub pooled: Array2<f64>,
    pub views: Vec<ViewDecision>,
}

/// Per view: sample candidates and pick one by MBR; then pool the picked
/// latents across views and round the result.
pub fn caption_shape(
    params: &DenoiserParams,
    views: &[ViewPatchGrid],
    schedule: &NoiseSchedule,
    settings: &DecodeSettings,
) -> Result<ShapeCaption> {
    if views.is_empty() {
        return Err(invalid("at least one view is required"));
    }
    let refs: Vec<&ViewPatchGrid> = views.iter().collect();
    let sets = generate_candidate_sets(params, &refs, settings.samples, schedule, settings.seed, settings.clamp_enabled, 0)?;
    let mut decisions = Vec::with_capacity(sets.len());
    for set in sets {
        let (selected, risks) = mbr_select(&set.candidates, |a, b| neg_bleu_loss(&a.tokens, &b.tokens))?;
        decisions.push(ViewDecision { set, risks, selected });
    }
    let latents: Vec<Array2<f64>> = decisions.iter().map(|d| d.chosen().x0_cap.clone()).collect();
    let mut rng = rng_from_seed(derive_seed(settings.seed, &[u64::MAX]));
    let pooled = aggregate_views(&latents, settings.pooling, &mut rng)?;
    let (tokens, _) = params.table.round_to_tokens(pooled.view())?;
    Ok(ShapeCaption { tokens, pooled, views: decisions })
}
