//! Single-worker deterministic training and evaluation.

use mft_tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{epoch_order, Dataset, NormStats};
use crate::error::{CoreError, Result};
use crate::masking::{single_mask, MaskStrategy};
use crate::model::{ForwardOptions, MaskMode, Params, ViTModel};
use crate::objectives::{argmax_rows, total_loss, DistillConfig, DistillMode, TeacherInput};
use crate::schedule::PruneSchedule;

/// SplitMix64 over `seed` and two stream coordinates.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_epochs: usize,
    pub cosine: bool,
    pub min_lr: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_epochs: 5,
            cosine: true,
            min_lr: 1e-5,
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize, epochs: usize) -> f64 {
        let total = (epochs * steps_per_epoch).max(1);
        let warmup = (self.warmup_epochs * steps_per_epoch).min(total);
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup as f64;
        }
        if !self.cosine || total == warmup {
            return self.lr;
        }
        let progress = (step - warmup) as f64 / (total - warmup) as f64;
        self.min_lr + (self.lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam moments with decoupled weight decay on `.weight` matrices.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Params<Tensor>,
    v: Params<Tensor>,
    t: u32,
    cfg: OptimConfig,
}

impl AdamW {
    pub fn new(params: &Params<Tensor>, cfg: OptimConfig) -> Self {
        let zeros = params.map(|_, t| Tensor::zeros(t.shape().to_vec()));
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            cfg,
        }
    }

    pub fn step(&mut self, params: &mut Params<Tensor>, grads: &Params<Tensor>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (b1, b2, eps) = (b1 as f32, b2 as f32, self.cfg.eps as f32);
        let step = (lr / c1) as f32;
        let rc2 = (1.0 / c2.sqrt()) as f32;
        let wd = (lr * self.cfg.weight_decay) as f32;
        let entries = params
            .entries_mut()
            .into_iter()
            .zip(grads.entries())
            .zip(self.m.entries_mut().into_iter().zip(self.v.entries_mut()));
        for (((name, p), (_, g)), ((_, m), (_, v))) in entries {
            let decay = if name.ends_with(".weight") { wd } else { 0.0 };
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in it {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= decay * *p + step * *m / ((*v).sqrt() * rc2 + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub mask: MaskStrategy,
    pub distill: DistillConfig,
    pub augment: bool,
    pub seed: u64,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            optim: OptimConfig::default(),
            mask: MaskStrategy::none(),
            distill: DistillConfig::default(),
            augment: true,
            seed: 0,
            eval_batch: 250,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub ce_loss: f64,
    pub kl_loss: f64,
    /// Percent.
    pub test_top1: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    /// Top-1 in percent.
    pub fn top1(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions<'a> {
    /// Random occlusion applied at inference; `None` or 0 is plain eval.
    pub mask_ratio: Option<f64>,
    pub prune: Option<&'a PruneSchedule>,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        Self {
            mask_ratio: None,
            prune: None,
            seed: 0,
            batch_size: 250,
        }
    }
}

/// Top-1 accuracy; batch `b` uses RNG streams derived from `(seed, b)`.
pub fn evaluate(model: &ViTModel, ds: &Dataset, stats: &NormStats, opts: EvalOptions<'_>) -> Result<Accuracy> {
    if ds.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    if ds.num_classes != model.config.num_classes {
        return Err(CoreError::Config(format!(
            "dataset has {} classes, model {}",
            ds.num_classes, model.config.num_classes
        )));
    }
    let l = model.config.num_patches();
    let mut acc = Accuracy::default();
    let indices: Vec<usize> = (0..ds.len()).collect();
    for (b, chunk) in indices.chunks(opts.batch_size.max(1)).enumerate() {
        let (images, labels) = ds.batch(chunk, stats, None);
        let shard = derive_seed(opts.seed, 0xE7A1, b as u64);
        let plan = match opts.mask_ratio {
            Some(r) if r > 0.0 => Some(single_mask(chunk.len(), l, r, shard)?),
            _ => None,
        };
        let fwd = ForwardOptions {
            mask: plan.as_ref(),
            mode: MaskMode::Drop,
            prune: opts.prune,
            seed: shard,
        };
        let out = model.forward(&images, fwd)?;
        acc.correct += argmax_rows(&out.logits)
            .iter()
            .zip(&labels)
            .filter(|(p, y)| p == y)
            .count();
        acc.total += chunk.len();
    }
    Ok(acc)
}

/// Trains `model` in place. With `prune` set, every step runs the pruned
/// forward pass and evaluation uses the same schedule.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut ViTModel,
    train_set: &Dataset,
    test_set: &Dataset,
    stats: &NormStats,
    cfg: &TrainConfig,
    teacher: Option<&ViTModel>,
    prune: Option<&PruneSchedule>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.mask.validate()?;
    cfg.distill.validate()?;
    if let Some(s) = prune {
        s.validate(&model.config)?;
        if cfg.mask.plan(1, model.config.num_patches(), 0)?.is_some() {
            return Err(CoreError::Config("masking and pruning cannot be combined".into()));
        }
    }
    let teacher = match (cfg.distill.mode, teacher) {
        (DistillMode::None, _) => None,
        (DistillMode::Soft, None) => return Err(CoreError::MissingTeacher("soft")),
        (DistillMode::Hard, None) => return Err(CoreError::MissingTeacher("hard")),
        (_, Some(t)) => {
            if t.config.num_classes != model.config.num_classes || t.config.image_size != model.config.image_size {
                return Err(CoreError::Config("teacher and student disagree on classes or image size".into()));
            }
            Some(t)
        }
    };
    if train_set.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let batch = cfg.batch_size.max(1);
    let steps_per_epoch = train_set.len().div_ceil(batch);
    let l = model.config.num_patches();
    let mut opt = AdamW::new(&model.params, cfg.optim.clone());
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let (mut loss_sum, mut ce_sum, mut kl_sum) = (0.0f64, 0.0f64, 0.0f64);
        for (b, chunk) in order.chunks(batch).enumerate() {
            let stream = derive_seed(cfg.seed, epoch as u64, b as u64);
            let mut aug_rng = ChaCha8Rng::seed_from_u64(stream);
            let (images, labels) = train_set.batch(chunk, stats, cfg.augment.then_some(&mut aug_rng));
            let plan = cfg.mask.plan(chunk.len(), l, stream ^ 0x6D61_736B)?;

            let teacher_logits = match teacher {
                Some(t) => {
                    let opts = match (cfg.distill.teacher_input, plan.as_ref()) {
                        (TeacherInput::Masked, Some(p)) => ForwardOptions::masked(p, MaskMode::Drop),
                        _ => ForwardOptions::default(),
                    };
                    Some(t.forward(&images, opts)?.logits)
                }
                None => None,
            };

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let opts = ForwardOptions {
                mask: plan.as_ref(),
                mode: MaskMode::Drop,
                prune,
                seed: stream,
            };
            let out = model.forward_on_tape(&mut tape, &bound, &images, opts)?;
            let terms = total_loss(&mut tape, out.logits, &labels, teacher_logits.as_ref(), &cfg.distill)?;
            let mut grads = tape.backward(terms.total)?;
            let grads = bound.map(|_, v| grads.take(*v).expect("every parameter is trainable"));

            let lr = cfg.optim.lr_at(step, steps_per_epoch, cfg.epochs);
            opt.step(&mut model.params, &grads, lr);
            step += 1;

            let n = chunk.len() as f64;
            loss_sum += tape.value(terms.total).data()[0] as f64 * n;
            ce_sum += terms.ce as f64 * n;
            kl_sum += terms.distill as f64 * n;
        }
        let test = evaluate(
            model,
            test_set,
            stats,
            EvalOptions {
                prune,
                seed: cfg.seed,
                batch_size: cfg.eval_batch,
                ..EvalOptions::default()
            },
        )?;
        let n = train_set.len() as f64;
        let log = EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / n,
            ce_loss: ce_sum / n,
            kl_loss: kl_sum / n,
            test_top1: test.top1(),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_cosine() {
        let o = OptimConfig::default();
        assert!((o.lr_at(0, 10, 20) - 1e-4 * 0.2).abs() < 1e-12);
        assert!((o.lr_at(49, 10, 20) - 1e-3).abs() < 1e-12);
        assert!((o.lr_at(50, 10, 20) - 1e-3).abs() < 1e-12);
        assert!(o.lr_at(199, 10, 20) < 2e-5);
        let flat = OptimConfig {
            cosine: false,
            warmup_epochs: 0,
            ..o
        };
        assert_eq!(flat.lr_at(123, 10, 20), 1e-3);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let cfg = crate::config::ModelConfig {
            embed_dim: 6,
            depth: 1,
            heads: 2,
            mlp_ratio: 1,
            image_size: 8,
            patch_size: 4,
            ..Default::default()
        };
        let model = ViTModel::init(cfg, 0).unwrap();
        let mut params = model.params.clone();
        let grads = params.map(|_, t| Tensor::full(t.shape().to_vec(), 0.5));
        let mut opt = AdamW::new(
            &params,
            OptimConfig {
                weight_decay: 0.0,
                ..OptimConfig::default()
            },
        );
        opt.step(&mut params, &grads, 0.01);
        for ((_, a), (_, b)) in params.entries().into_iter().zip(model.params.entries()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((y - x - 0.01).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn seeds_mix() {
        assert_ne!(derive_seed(0, 0, 1), derive_seed(0, 1, 0));
        assert_eq!(derive_seed(5, 2, 3), derive_seed(5, 2, 3));
    }
}
