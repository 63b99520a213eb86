//! Consolidation of run directories into one table of accuracies and
//! drops against each run's unpruned, unmasked accuracy.

use std::path::{Path, PathBuf};

use crate::commands::{
    sample_file, FINETUNE_FILE, KEPT_FILE, OCCLUSION_FILE, PRUNE_FILE, REPORT_FILE, SAMPLES_DIR, TRAIN_LOG_FILE,
};
use crate::error::{Category, CliError, Result};
use crate::pixmap;
use crate::table::{self, fmt_delta, parse_f64, Table};

const BASE_FILES: [&str; 4] = [TRAIN_LOG_FILE, OCCLUSION_FILE, PRUNE_FILE, KEPT_FILE];

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn is_finetune(dir: &Path) -> bool {
    dir.join(FINETUNE_FILE).is_file()
}

/// Every input the report needs that is absent.
pub fn missing_inputs(dirs: &[PathBuf]) -> Vec<PathBuf> {
    let mut missing = Vec::new();
    for d in dirs {
        if is_finetune(d) {
            continue;
        }
        missing.extend(BASE_FILES.iter().map(|f| d.join(f)).filter(|p| !p.is_file()));
    }
    missing
}

struct Row {
    run: String,
    table: &'static str,
    setting: String,
    top1: f64,
    base: f64,
}

fn base_rows(dir: &Path, run: &str, out: &mut Vec<Row>) -> Result<f64> {
    let occ = Table::read(&dir.join(OCCLUSION_FILE), table::OCCLUSION)?;
    let (rc, ac) = (occ.column("mask_ratio")?, occ.column("top1")?);
    let curve = occ
        .rows
        .iter()
        .map(|r| Ok((parse_f64(&r[rc])?, parse_f64(&r[ac])?)))
        .collect::<Result<Vec<_>>>()?;
    let base = match curve.iter().find(|(r, _)| *r == 0.0) {
        Some(&(_, a)) => a,
        None => {
            let log = Table::read(&dir.join(TRAIN_LOG_FILE), table::TRAIN_LOG)?;
            let c = log.column("test_top1")?;
            let last = log
                .rows
                .last()
                .ok_or_else(|| CliError::new(Category::Data, format!("{}: empty train log", dir.display())))?;
            parse_f64(&last[c])?
        }
    };
    for (r, a) in curve {
        out.push(Row {
            run: run.into(),
            table: "occlusion",
            setting: format!("mask_ratio={r}"),
            top1: a,
            base,
        });
    }
    let pr = Table::read(&dir.join(PRUNE_FILE), table::PRUNE)?;
    let (kc, sc, tc) = (pr.column("keep_ratio")?, pr.column("selector")?, pr.column("top1")?);
    for r in &pr.rows {
        out.push(Row {
            run: run.into(),
            table: "prune",
            setting: format!("keep_ratio={},selector={}", r[kc], r[sc]),
            top1: parse_f64(&r[tc])?,
            base,
        });
    }
    Ok(base)
}

fn finetune_rows(dir: &Path, run: &str, out: &mut Vec<Row>) -> Result<()> {
    let t = Table::read(&dir.join(FINETUNE_FILE), table::FINETUNE)?;
    let note = |k: &str| {
        t.note_value(k)
            .ok_or_else(|| CliError::new(Category::Data, format!("{}: missing `{k}` note", dir.display())))
    };
    let base = parse_f64(note("base_top1")?)?;
    let c = t.column("top1")?;
    let last = t
        .rows
        .last()
        .ok_or_else(|| CliError::new(Category::Data, format!("{}: empty curve", dir.display())))?;
    out.push(Row {
        run: run.into(),
        table: "finetune",
        setting: format!(
            "init={},keep_ratio={},selector={},epochs={}",
            note("init_kind")?,
            note("keep_ratio")?,
            note("selector")?,
            note("epochs")?
        ),
        top1: parse_f64(&last[c])?,
        base,
    });
    Ok(())
}

/// Overlay images for every row of the kept-token table.
fn overlays(dir: &Path, dest: &Path) -> Result<usize> {
    let kept = Table::read(&dir.join(KEPT_FILE), table::KEPT)?;
    let patch = kept
        .note_value("patch_size")
        .and_then(|p| p.parse::<u32>().ok())
        .ok_or_else(|| CliError::new(Category::Data, format!("{}: missing patch_size note", dir.display())))?;
    let col = |n| kept.column(n);
    let (sel, keep, sample, stage, ids) = (col("selector")?, col("keep_ratio")?, col("sample")?, col("stage")?, col("kept")?);
    let mut written = 0;
    for r in &kept.rows {
        let src = dir.join(SAMPLES_DIR).join(sample_file(r[sample].parse().unwrap_or(usize::MAX)));
        let img = pixmap::load(&src)?;
        let idx = r[ids]
            .split_whitespace()
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| CliError::new(Category::Data, format!("{}: bad kept list", dir.display())))?;
        let name = format!("{}_{}_s{}_stage{}.ppm", r[sel], r[keep], r[sample], r[stage]);
        pixmap::save(&pixmap::overlay(&img, patch, &idx), &dest.join(name))?;
        written += 1;
    }
    Ok(written)
}

#[derive(Clone, Debug)]
pub struct ReportOutcome {
    pub table: Table,
    pub overlays: usize,
}

pub fn cmd_report(dirs: &[PathBuf], out: &Path) -> Result<ReportOutcome> {
    if dirs.is_empty() {
        return Err(CliError::new(Category::Usage, "report needs at least one run directory"));
    }
    let missing = missing_inputs(dirs);
    if !missing.is_empty() {
        let list = missing.iter().map(|p| p.display().to_string()).collect::<Vec<_>>();
        return Err(CliError::new(Category::Io, format!("missing inputs: {}", list.join(", "))));
    }
    let mut rows = Vec::new();
    let mut written = 0;
    for (i, d) in dirs.iter().enumerate() {
        let run = run_name(d);
        if is_finetune(d) {
            finetune_rows(d, &run, &mut rows)?;
        } else {
            base_rows(d, &run, &mut rows)?;
            written += overlays(d, &out.join("overlays").join(format!("{i}_{run}")))?;
        }
    }
    let mut t = Table::new(table::REPORT, &["run", "table", "setting", "top1", "base_top1", "delta", "display"]);
    for r in &rows {
        t.push(vec![
            r.run.clone(),
            r.table.into(),
            r.setting.clone(),
            format!("{:.2}", r.top1),
            format!("{:.2}", r.base),
            format!("{:.2}", r.top1 - r.base),
            fmt_delta(r.top1, r.base),
        ]);
    }
    t.write(&out.join(REPORT_FILE))?;
    Ok(ReportOutcome {
        table: t,
        overlays: written,
    })
}
