//! Random patch masking for masked training and occlusion evaluation.
//!
//! A [`MaskPlan`] is a `{0,1}` matrix over (sample, patch) with 1 meaning
//! keep. Plans are index sets independent of token values, so generating
//! them before or after positional embedding makes no difference.

use mft_tensor::{ops, Index, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Mask ratios from the default hybrid set.
pub const DEFAULT_RATIO_SET: [f64; 4] = [0.0, 0.25, 0.5, 0.75];

/// Truncated kept-token count `int(L · (1 − ratio))`.
///
/// A tolerance of 1e-9 absorbs binary representation error so that, for
/// example, ratio 0.9 at L = 10 keeps one token rather than zero.
pub fn kept_count(num_tokens: usize, mask_ratio: f64) -> usize {
    let keep = num_tokens as f64 * (1.0 - mask_ratio);
    ((keep + 1e-9).floor().max(0.0) as usize).min(num_tokens)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// Row-major `batch × tokens`, 1 keep and 0 remove.
    pub mask: Vec<u8>,
    pub batch: usize,
    pub tokens: usize,
    pub kept_counts: Vec<usize>,
    pub sampled_ratios: Vec<f64>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn all_keep(batch: usize, tokens: usize) -> Self {
        Self {
            mask: vec![1; batch * tokens],
            batch,
            tokens,
            kept_counts: vec![tokens; batch],
            sampled_ratios: vec![0.0; batch],
            seed: 0,
        }
    }

    /// Builds a plan from explicit rows; ratios are recorded as the
    /// realized removed fraction.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let tokens = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != tokens || r.iter().any(|&v| v > 1)) {
            return Err(CoreError::Config("mask rows must be equal-length 0/1 vectors".into()));
        }
        let kept_counts: Vec<usize> = rows.iter().map(|r| r.iter().filter(|&&v| v == 1).count()).collect();
        let sampled_ratios = kept_counts
            .iter()
            .map(|&k| if tokens == 0 { 0.0 } else { 1.0 - k as f64 / tokens as f64 })
            .collect();
        Ok(Self {
            mask: rows.concat(),
            batch: rows.len(),
            tokens,
            kept_counts,
            sampled_ratios,
            seed: 0,
        })
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.mask[i * self.tokens..(i + 1) * self.tokens]
    }

    /// Kept positions of sample `i` in ascending order.
    pub fn kept_indices(&self, i: usize) -> Vec<usize> {
        self.row(i)
            .iter()
            .enumerate()
            .filter_map(|(j, &m)| (m == 1).then_some(j))
            .collect()
    }

    pub fn is_all_keep(&self) -> bool {
        self.mask.iter().all(|&m| m == 1)
    }

    pub fn check_dims(&self, batch: usize, tokens: usize) -> Result<()> {
        if self.batch != batch || self.tokens != tokens {
            return Err(CoreError::MaskShape {
                rows: self.batch,
                cols: self.tokens,
                batch,
                tokens,
            });
        }
        Ok(())
    }
}

/// Intermediate permutations of the hybrid construction, exposed for tests.
#[derive(Clone, Debug)]
pub struct MaskTrace {
    pub ids_shuffle: Index,
    pub ids_restore: Index,
}

/// Same keep count for every row; subsets drawn uniformly.
pub fn single_mask(batch: usize, tokens: usize, mask_ratio: f64, seed: u64) -> Result<MaskPlan> {
    check_ratio(mask_ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = kept_count(tokens, mask_ratio);
    let mut mask = vec![0u8; batch * tokens];
    for i in 0..batch {
        for j in rand::seq::index::sample(&mut rng, tokens, keep) {
            mask[i * tokens + j] = 1;
        }
    }
    Ok(MaskPlan {
        mask,
        batch,
        tokens,
        kept_counts: vec![keep; batch],
        sampled_ratios: vec![mask_ratio; batch],
        seed,
    })
}

/// One ratio drawn per sample from `ratio_set`, then noise → argsort →
/// argsort → gather to place the kept slots.
pub fn hybrid_mask(batch: usize, tokens: usize, ratio_set: &[f64], seed: u64) -> Result<MaskPlan> {
    hybrid_mask_traced(batch, tokens, ratio_set, seed).map(|(p, _)| p)
}

pub fn hybrid_mask_traced(
    batch: usize,
    tokens: usize,
    ratio_set: &[f64],
    seed: u64,
) -> Result<(MaskPlan, MaskTrace)> {
    if ratio_set.is_empty() {
        return Err(CoreError::Config("hybrid ratio set is empty".into()));
    }
    for &r in ratio_set {
        check_ratio(r)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // sample a mask ratio for each sample in the batch
    let num_keep: Vec<usize> = ratio_set.iter().map(|&r| kept_count(tokens, r)).collect();
    let choices: Vec<usize> = (0..batch).map(|_| rng.random_range(0..ratio_set.len())).collect();
    let kept_counts: Vec<usize> = choices.iter().map(|&c| num_keep[c]).collect();
    let sampled_ratios = choices.iter().map(|&c| ratio_set[c]).collect();

    // produce mask matrix
    let noise = Tensor::from_fn(vec![batch, tokens], |_| rng.random::<f32>());
    let ids_shuffle = ops::argsort_rows(&noise)?;
    let shuffle_f = Tensor::new(
        vec![batch, tokens],
        ids_shuffle.data().iter().map(|&i| i as f32).collect(),
    )?;
    let ids_restore = ops::argsort_rows(&shuffle_f)?;

    let mut sorted = Tensor::zeros(vec![batch, tokens]);
    for (i, &k) in kept_counts.iter().enumerate() {
        sorted.data_mut()[i * tokens..i * tokens + k].fill(1.0);
    }
    let mask = ops::gather(&sorted, 1, &ids_restore)?;
    let plan = MaskPlan {
        mask: mask.data().iter().map(|&v| v as u8).collect(),
        batch,
        tokens,
        kept_counts,
        sampled_ratios,
        seed,
    };
    Ok((plan, MaskTrace { ids_shuffle, ids_restore }))
}

fn check_ratio(r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(CoreError::Config(format!("mask ratio {r} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    None,
    Single,
    Hybrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskStrategy {
    pub kind: MaskKind,
    pub single_ratio: f64,
    pub ratio_set: Vec<f64>,
}

impl Default for MaskStrategy {
    fn default() -> Self {
        Self {
            kind: MaskKind::None,
            single_ratio: 0.75,
            ratio_set: DEFAULT_RATIO_SET.to_vec(),
        }
    }
}

impl MaskStrategy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn single(ratio: f64) -> Self {
        Self {
            kind: MaskKind::Single,
            single_ratio: ratio,
            ..Self::default()
        }
    }

    pub fn hybrid(ratio_set: Vec<f64>) -> Self {
        Self {
            kind: MaskKind::Hybrid,
            ratio_set,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_ratio(self.single_ratio)?;
        if self.kind == MaskKind::Hybrid && self.ratio_set.is_empty() {
            return Err(CoreError::Config("hybrid ratio set is empty".into()));
        }
        self.ratio_set.iter().try_for_each(|&r| check_ratio(r))
    }

    /// Plan for one batch, or `None` when masking is disabled.
    pub fn plan(&self, batch: usize, tokens: usize, seed: u64) -> Result<Option<MaskPlan>> {
        match self.kind {
            MaskKind::None => Ok(None),
            MaskKind::Single => single_mask(batch, tokens, self.single_ratio, seed).map(Some),
            MaskKind::Hybrid => hybrid_mask(batch, tokens, &self.ratio_set, seed).map(Some),
        }
    }

    /// Tag recorded in checkpoint metadata.
    pub fn training_kind(&self) -> &'static str {
        match self.kind {
            MaskKind::None => "full",
            MaskKind::Single => "masked-single",
            MaskKind::Hybrid => "masked-hybrid",
        }
    }
}

/// Kept tokens of one sample with their original positions.
#[derive(Clone, Debug, PartialEq)]
pub struct KeptTokens {
    /// `kept × dim`
    pub tokens: Tensor,
    pub indices: Vec<usize>,
}

/// Splits `tokens` (`batch × L × D`) into per-sample kept sequences in
/// original relative order.
pub fn apply(plan: &MaskPlan, tokens: &Tensor) -> Result<Vec<KeptTokens>> {
    let shape = tokens.shape();
    if shape.len() != 3 {
        return Err(CoreError::Config(format!("expected batch × tokens × dim, got {shape:?}")));
    }
    plan.check_dims(shape[0], shape[1])?;
    let dim = shape[2];
    (0..plan.batch)
        .map(|i| {
            let indices = plan.kept_indices(i);
            let sample = &tokens.data()[i * shape[1] * dim..(i + 1) * shape[1] * dim];
            let mut data = Vec::with_capacity(indices.len() * dim);
            for &j in &indices {
                data.extend_from_slice(&sample[j * dim..(j + 1) * dim]);
            }
            Ok(KeptTokens {
                tokens: Tensor::new(vec![indices.len(), dim], data)?,
                indices,
            })
        })
        .collect()
}
