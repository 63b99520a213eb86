//! Training-free pruned evaluation and fine-tuning under a prune schedule.

use mft_tensor::Tensor;

use crate::config::ModelConfig;
use crate::data::{Dataset, NormStats};
use crate::error::Result;
use crate::flops::schedule_flops;
use crate::model::{ForwardOptions, ForwardOutput, ViTModel};
use crate::schedule::PruneSchedule;
use crate::train::{evaluate, train, Accuracy, EpochLog, EvalOptions, TrainConfig};

pub fn prune_forward(model: &ViTModel, images: &Tensor, schedule: &PruneSchedule, seed: u64) -> Result<ForwardOutput> {
    model.forward(images, ForwardOptions::pruned(schedule, seed))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneEval {
    pub accuracy: Accuracy,
    pub gflops: f64,
}

pub fn eval_pruned(
    model: &ViTModel,
    ds: &Dataset,
    stats: &NormStats,
    schedule: &PruneSchedule,
    seed: u64,
) -> Result<PruneEval> {
    let accuracy = evaluate(
        model,
        ds,
        stats,
        EvalOptions {
            prune: Some(schedule),
            seed,
            ..EvalOptions::default()
        },
    )?;
    Ok(PruneEval {
        accuracy,
        gflops: schedule_flops(&model.config, schedule),
    })
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub model: ViTModel,
    /// Unpruned accuracy of the initialization.
    pub base_top1: f64,
    /// `(epoch, pruned top-1)`, starting with epoch 0 for the initialization.
    pub curve: Vec<(usize, f64)>,
    pub logs: Vec<EpochLog>,
}

/// Fine-tunes a copy of `init` with the pruned forward pass active.
#[allow(clippy::too_many_arguments)]
pub fn finetune_pruned(
    init: &ViTModel,
    expected: &ModelConfig,
    schedule: &PruneSchedule,
    train_set: &Dataset,
    test_set: &Dataset,
    stats: &NormStats,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<FinetuneResult> {
    expected.ensure_matches(&init.config)?;
    schedule.validate(expected)?;
    let base_top1 = evaluate(init, test_set, stats, EvalOptions::default())?.top1();
    let start = eval_pruned(init, test_set, stats, schedule, cfg.seed)?.accuracy.top1();
    let mut model = init.clone();
    let logs = train(&mut model, train_set, test_set, stats, cfg, None, Some(schedule), on_epoch)?;
    let mut curve = vec![(0, start)];
    curve.extend(logs.iter().map(|l| (l.epoch, l.test_top1)));
    Ok(FinetuneResult {
        model,
        base_top1,
        curve,
        logs,
    })
}
