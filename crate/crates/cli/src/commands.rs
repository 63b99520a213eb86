//! Subcommand implementations. Each writes its outputs under the
//! configured output directory and returns the values it wrote.

use std::path::{Path, PathBuf};

use mft_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use mft_core::data::{Dataset, NormStats, Split};
use mft_core::flops::{dense_flops, schedule_flops};
use mft_core::model::ViTModel;
use mft_core::pruning::{eval_pruned, finetune_pruned, prune_forward};
use mft_core::schedule::{make_schedule, Selector};
use mft_core::train::{derive_seed, evaluate, train, EpochLog, EvalOptions};
use mft_core::ModelConfig;

use crate::config::ExperimentConfig;
use crate::error::{Category, CliError, Result};
use crate::pixmap;
use crate::table::{self, Table};

pub const CHECKPOINT_FILE: &str = "model.mftc";
pub const CONFIG_FILE: &str = "config.toml";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const OCCLUSION_FILE: &str = "occlusion.csv";
pub const PRUNE_FILE: &str = "prune.csv";
pub const KEPT_FILE: &str = "kept_tokens.csv";
pub const FINETUNE_FILE: &str = "finetune_curve.csv";
pub const FLOPS_FILE: &str = "flops.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const SAMPLES_DIR: &str = "samples";

pub const DEFAULT_GRID: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95];

pub fn sample_file(i: usize) -> String {
    format!("sample_{i}.ppm")
}

fn pct(v: f64) -> String {
    format!("{v:.2}")
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn open_checkpoint(path: &Path) -> Result<(ViTModel, CheckpointMeta)> {
    if !path.is_file() {
        return Err(CliError::new(Category::Io, format!("checkpoint {} not found", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

/// The explicit checkpoint, or the one in the output directory.
pub fn checkpoint_path(cfg: &ExperimentConfig, explicit: Option<&Path>) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir().join(CHECKPOINT_FILE))
}

fn check_dataset(meta: &CheckpointMeta, cfg: &ExperimentConfig) -> Result<()> {
    let want = cfg.dataset.as_str();
    if !meta.dataset.is_empty() && meta.dataset != want {
        return Err(CliError::new(
            Category::Mismatch,
            format!("checkpoint was trained on `{}`, config selects `{want}`", meta.dataset),
        ));
    }
    Ok(())
}

fn log_table(logs: &[EpochLog]) -> Table {
    let mut t = Table::new(table::TRAIN_LOG, &["epoch", "train_loss", "ce_loss", "kl_loss", "test_top1"]);
    for l in logs {
        t.push(vec![
            l.epoch.to_string(),
            format!("{:.6}", l.train_loss),
            format!("{:.6}", l.ce_loss),
            format!("{:.6}", l.kl_loss),
            pct(l.test_top1),
        ]);
    }
    t
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub model: ViTModel,
    pub logs: Vec<EpochLog>,
}

pub fn cmd_train(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = cfg.train_config()?;
    let teacher = match (&cfg.teacher, cfg.distill_config().uses_teacher()) {
        (Some(p), true) => {
            let (t, meta) = open_checkpoint(p)?;
            check_dataset(&meta, cfg)?;
            Some(t)
        }
        _ => None,
    };
    let train_set = cfg.load_split(Split::Train)?;
    let test_set = cfg.load_split(Split::Test)?;
    let stats = NormStats::compute(&train_set)?;
    let mut model = ViTModel::init(cfg.model(), tc.seed)?;
    let logs = train(&mut model, &train_set, &test_set, &stats, &tc, teacher.as_ref(), None, progress)?;

    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir)?;
    let mut meta = CheckpointMeta::new(cfg.model(), tc.mask.clone(), stats, tc.seed);
    meta.distill = tc.distill.clone();
    meta.epochs = tc.epochs;
    meta.dataset = cfg.dataset.as_str().to_string();
    save_checkpoint(&model, &meta, &dir.join(CHECKPOINT_FILE))?;
    log_table(&logs).note("training_kind", &meta.training_kind).write(&dir.join(TRAIN_LOG_FILE))?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    Ok(TrainOutcome { dir, model, logs })
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(CliError::new(Category::Config, "empty mask-ratio grid"));
    }
    match grid.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        Some(r) => Err(CliError::new(Category::Config, format!("mask ratio {r} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Top-1 under inference-time random occlusion, averaged over
/// `eval_seeds` consecutive seeds starting at the config seed.
pub fn occlusion_curve(
    model: &ViTModel,
    test_set: &Dataset,
    stats: &NormStats,
    grid: &[f64],
    seed: u64,
    eval_seeds: usize,
    batch_size: usize,
) -> Result<Vec<(f64, f64)>> {
    check_grid(grid)?;
    let seeds = eval_seeds.max(1);
    grid.iter()
        .map(|&r| {
            let mut sum = 0.0;
            for k in 0..seeds as u64 {
                let opts = EvalOptions {
                    mask_ratio: Some(r),
                    seed: seed + k,
                    batch_size,
                    ..EvalOptions::default()
                };
                sum += evaluate(model, test_set, stats, opts)?.top1();
            }
            Ok((r, sum / seeds as f64))
        })
        .collect()
}

pub fn cmd_eval_occlusion(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    grid: &[f64],
    eval_seeds: usize,
) -> Result<Vec<(f64, f64)>> {
    check_grid(grid)?;
    let seed = cfg.seed()?;
    let (model, meta) = open_checkpoint(checkpoint)?;
    check_dataset(&meta, cfg)?;
    let test_set = cfg.load_split(Split::Test)?;
    let curve = occlusion_curve(&model, &test_set, &meta.norm, grid, seed, eval_seeds, cfg.eval_batch)?;
    let mut t = Table::new(table::OCCLUSION, &["mask_ratio", "top1"])
        .note("training_kind", &meta.training_kind)
        .note("eval_seeds", eval_seeds.max(1));
    for &(r, a) in &curve {
        t.push(vec![num(r), pct(a)]);
    }
    t.write(&cfg.output_dir().join(OCCLUSION_FILE))?;
    Ok(curve)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneRow {
    pub keep_ratio: f64,
    pub selector: Selector,
    pub top1: f64,
    pub gflops: f64,
}

pub fn cmd_eval_prune(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    keep_ratios: &[f64],
    selectors: &[Selector],
    stages: usize,
    visualize: usize,
) -> Result<Vec<PruneRow>> {
    let seed = cfg.seed()?;
    let (model, meta) = open_checkpoint(checkpoint)?;
    check_dataset(&meta, cfg)?;
    let mc = &model.config;
    let schedules = keep_ratios
        .iter()
        .flat_map(|&k| selectors.iter().map(move |&s| (k, s)))
        .map(|(k, s)| Ok(make_schedule(mc, k, stages, s)?.with_source(cfg.attention_source)))
        .collect::<Result<Vec<_>>>()?;
    let test_set = cfg.load_split(Split::Test)?;
    let dir = cfg.output_dir();

    let mut rows = Vec::new();
    let mut t = Table::new(table::PRUNE, &["keep_ratio", "selector", "top1", "gflops"])
        .note("training_kind", &meta.training_kind)
        .note("stages", stages)
        .note("attention_source", cfg.attention_source.as_str());
    for s in &schedules {
        let r = eval_pruned(&model, &test_set, &meta.norm, s, seed)?;
        assert_eq!(r.gflops, schedule_flops(mc, s));
        let row = PruneRow {
            keep_ratio: s.keep_ratio,
            selector: s.selector,
            top1: r.accuracy.top1(),
            gflops: r.gflops,
        };
        t.push(vec![num(row.keep_ratio), row.selector.as_str().into(), pct(row.top1), format!("{:.6}", row.gflops)]);
        rows.push(row);
    }
    t.write(&dir.join(PRUNE_FILE))?;

    let n = visualize.min(test_set.len());
    let mut kept = Table::new(table::KEPT, &["selector", "keep_ratio", "sample", "label", "stage", "block", "kept"]);
    if n > 0 {
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = test_set.batch(&idx, &meta.norm, None);
        for i in 0..n {
            let img = pixmap::from_planar(test_set.image(i), test_set.channels, test_set.size);
            pixmap::save(&img, &dir.join(SAMPLES_DIR).join(sample_file(i)))?;
        }
        for s in &schedules {
            let out = prune_forward(&model, &images, s, derive_seed(seed, 0xE7A1, 0))?;
            for i in 0..n {
                let blocks = std::iter::once(0).chain(s.stages.iter().map(|st| st.block));
                for (stage, block) in blocks.enumerate() {
                    let ids = out.token_ids[stage][i].iter().map(|j| j.to_string()).collect::<Vec<_>>();
                    kept.push(vec![
                        s.selector.as_str().into(),
                        num(s.keep_ratio),
                        i.to_string(),
                        labels[i].to_string(),
                        stage.to_string(),
                        block.to_string(),
                        ids.join(" "),
                    ]);
                }
            }
        }
    }
    kept.note("patch_size", mc.patch_size).write(&dir.join(KEPT_FILE))?;
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: ViTModel,
    pub base_top1: f64,
    /// `(epoch, pruned top-1)` from epoch 0.
    pub curve: Vec<(usize, f64)>,
}

impl FinetuneOutcome {
    pub fn final_top1(&self) -> f64 {
        self.curve.last().map(|c| c.1).unwrap_or(f64::NAN)
    }
}

pub fn cmd_finetune_pruned(
    cfg: &ExperimentConfig,
    init: &Path,
    keep_ratio: f64,
    selector: Selector,
    stages: usize,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let tc = cfg.train_config()?;
    let (init_model, init_meta) = open_checkpoint(init)?;
    check_dataset(&init_meta, cfg)?;
    let expected = cfg.model();
    expected.ensure_matches(&init_model.config)?;
    let schedule = make_schedule(&expected, keep_ratio, stages, selector)?.with_source(cfg.attention_source);
    let train_set = cfg.load_split(Split::Train)?;
    let test_set = cfg.load_split(Split::Test)?;
    let stats = init_meta.norm.clone();
    let r = finetune_pruned(&init_model, &expected, &schedule, &train_set, &test_set, &stats, &tc, progress)?;

    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir)?;
    let mut meta = CheckpointMeta::new(expected, tc.mask.clone(), stats, tc.seed);
    meta.training_kind = init_meta.training_kind.clone();
    meta.epochs = tc.epochs;
    meta.dataset = cfg.dataset.as_str().to_string();
    meta.prune = Some(schedule.clone());
    save_checkpoint(&r.model, &meta, &dir.join(CHECKPOINT_FILE))?;
    let mut t = Table::new(table::FINETUNE, &["epoch", "top1", "top1_drop_vs_base"])
        .note("init_kind", &init_meta.training_kind)
        .note("keep_ratio", keep_ratio)
        .note("selector", selector.as_str())
        .note("attention_source", cfg.attention_source.as_str())
        .note("epochs", tc.epochs)
        .note("base_top1", pct(r.base_top1));
    for &(e, a) in &r.curve {
        t.push(vec![e.to_string(), pct(a), pct(a - r.base_top1)]);
    }
    t.write(&dir.join(FINETUNE_FILE))?;
    log_table(&r.logs).note("training_kind", "pruned").write(&dir.join(TRAIN_LOG_FILE))?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    Ok(FinetuneOutcome {
        model: r.model,
        base_top1: r.base_top1,
        curve: r.curve,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsRow {
    pub keep_ratio: f64,
    pub tokens_per_block: Vec<usize>,
    pub gflops: f64,
}

/// Dense row first, then one row per keep ratio.
pub fn flops_rows(model: &ModelConfig, keep_ratios: &[f64], stages: usize) -> Result<Vec<FlopsRow>> {
    let mut rows = vec![FlopsRow {
        keep_ratio: 1.0,
        tokens_per_block: vec![model.num_patches() + 1; model.depth],
        gflops: dense_flops(model),
    }];
    for &k in keep_ratios {
        let s = make_schedule(model, k, stages, Selector::Attention)?;
        rows.push(FlopsRow {
            keep_ratio: k,
            tokens_per_block: s.tokens_per_block(model),
            gflops: schedule_flops(model, &s),
        });
    }
    Ok(rows)
}

pub fn flops_table(name: &str, rows: &[FlopsRow]) -> Table {
    let mut t = Table::new(table::FLOPS, &["model", "keep_ratio", "tokens_per_block", "gflops"]);
    for r in rows {
        let tokens = r.tokens_per_block.iter().map(|n| n.to_string()).collect::<Vec<_>>();
        t.push(vec![name.into(), num(r.keep_ratio), tokens.join(" "), format!("{:.6}", r.gflops)]);
    }
    t
}
