//! Analytic inference cost in GFLOPs, one multiply-accumulate counted once.

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::schedule::PruneSchedule;

/// Cost of one block processing `tokens` tokens (class token included).
pub fn block_flops(config: &ModelConfig, tokens: usize) -> f64 {
    let n = tokens as f64;
    let d = config.embed_dim as f64;
    let linear = (4 + 2 * config.mlp_ratio) as f64 * n * d * d;
    let attention = 2.0 * n * n * d;
    linear + attention
}

pub fn patch_embed_flops(config: &ModelConfig) -> f64 {
    (config.num_patches() * config.embed_dim * config.patch_dim()) as f64
}

/// Total GFLOPs given the token count of every block.
pub fn flops(config: &ModelConfig, tokens_per_block: &[usize]) -> Result<f64> {
    if tokens_per_block.len() != config.depth {
        return Err(CoreError::Config(format!(
            "{} token counts for depth {}",
            tokens_per_block.len(),
            config.depth
        )));
    }
    let blocks: f64 = tokens_per_block.iter().map(|&n| block_flops(config, n)).sum();
    Ok((patch_embed_flops(config) + blocks) / 1e9)
}

pub fn dense_flops(config: &ModelConfig) -> f64 {
    let tokens = vec![config.num_patches() + 1; config.depth];
    flops(config, &tokens).expect("length equals depth")
}

pub fn schedule_flops(config: &ModelConfig, schedule: &PruneSchedule) -> f64 {
    flops(config, &schedule.tokens_per_block(config)).expect("length equals depth")
}
