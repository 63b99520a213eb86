//! Staged token-keep plans and the per-stage token selectors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selector {
    Random,
    Attention,
}

impl Selector {
    pub fn as_str(self) -> &'static str {
        match self {
            Selector::Random => "random",
            Selector::Attention => "attention",
        }
    }
}

impl std::str::FromStr for Selector {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Selector::Random),
            "attention" => Ok(Selector::Attention),
            other => Err(CoreError::Config(format!("unknown selector `{other}`"))),
        }
    }
}

/// Which block's class-token attention ranks tokens for the attention
/// selector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionSource {
    /// The block just before each pruning point, over the surviving tokens.
    #[default]
    Preceding,
    /// The last block of an unpruned pass over the same images.
    Last,
}

impl AttentionSource {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionSource::Preceding => "preceding",
            AttentionSource::Last => "last",
        }
    }
}

impl std::str::FromStr for AttentionSource {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "preceding" => Ok(AttentionSource::Preceding),
            "last" => Ok(AttentionSource::Last),
            other => Err(CoreError::Config(format!("unknown attention source `{other}`"))),
        }
    }
}

/// Tokens entering `block` onward are cut to `keep` patch tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneStage {
    pub block: usize,
    pub keep: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub stages: Vec<PruneStage>,
    pub selector: Selector,
    pub keep_ratio: f64,
    #[serde(default)]
    pub source: AttentionSource,
}

/// Even split of `num_stages` pruning points over the depth, each keeping
/// `floor(L · keep_ratio^s)` patch tokens.
pub fn make_schedule(
    config: &ModelConfig,
    keep_ratio: f64,
    num_stages: usize,
    selector: Selector,
) -> Result<PruneSchedule> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(CoreError::Schedule(format!("keep ratio {keep_ratio} outside (0, 1]")));
    }
    if num_stages == 0 || config.depth < num_stages + 1 {
        return Err(CoreError::Schedule(format!(
            "{num_stages} stages need depth >= {}, model has {}",
            num_stages + 1,
            config.depth
        )));
    }
    let tokens = config.num_patches() as f64;
    let stages = (1..=num_stages)
        .map(|s| {
            let keep = (tokens * keep_ratio.powi(s as i32) + 1e-9).floor() as usize;
            if keep == 0 {
                return Err(CoreError::Schedule(format!(
                    "stage {s} keeps 0 tokens; use a keep ratio above {keep_ratio} or fewer stages"
                )));
            }
            Ok(PruneStage {
                block: s * config.depth / (num_stages + 1),
                keep,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let schedule = PruneSchedule {
        stages,
        selector,
        keep_ratio,
        source: AttentionSource::default(),
    };
    schedule.validate(config)?;
    Ok(schedule)
}

impl PruneSchedule {
    pub fn with_source(mut self, source: AttentionSource) -> Self {
        self.source = source;
        self
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let fail = |m: String| Err(CoreError::Schedule(m));
        let mut prev: Option<PruneStage> = None;
        for st in &self.stages {
            if st.block >= config.depth {
                return fail(format!("block {} outside depth {}", st.block, config.depth));
            }
            if st.block == 0 && self.selector == Selector::Attention && self.source == AttentionSource::Preceding {
                return fail("attention selection needs a preceding block".into());
            }
            if st.keep == 0 || st.keep > config.num_patches() {
                return fail(format!("keep count {} outside 1..={}", st.keep, config.num_patches()));
            }
            if let Some(p) = prev {
                if st.block <= p.block {
                    return fail("stage blocks must be strictly increasing".into());
                }
                if st.keep > p.keep {
                    return fail("keep counts must not increase".into());
                }
            }
            prev = Some(*st);
        }
        Ok(())
    }

    pub fn stage_at(&self, block: usize) -> Option<&PruneStage> {
        self.stages.iter().find(|s| s.block == block)
    }

    /// Tokens (class token included) processed by each block.
    pub fn tokens_per_block(&self, config: &ModelConfig) -> Vec<usize> {
        let mut current = config.num_patches();
        (0..config.depth)
            .map(|b| {
                if let Some(st) = self.stage_at(b) {
                    current = st.keep;
                }
                current + 1
            })
            .collect()
    }

    pub fn is_noop(&self, config: &ModelConfig) -> bool {
        self.stages.iter().all(|s| s.keep == config.num_patches())
    }
}

/// Positions of the `k` largest scores, ties to the lower position,
/// returned in ascending position order.
pub fn top_k(scores: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    picked
}

/// Uniform `k`-subset of `0..n` in ascending order.
pub fn random_subset(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    let mut picked = rand::seq::index::sample(rng, n, k.min(n)).into_vec();
    picked.sort_unstable();
    picked
}
