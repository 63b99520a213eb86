//! Classification and distillation losses.
//!
//! All losses are recorded on a tape so the student logits receive
//! gradients. Teacher logits enter as constants.

use mft_tensor::{ops, Index, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillMode {
    #[default]
    None,
    Soft,
    Hard,
}

/// Which image the teacher sees during masked training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherInput {
    #[default]
    Full,
    Masked,
}

/// `StudentFirst` computes KL(student ‖ teacher); `TeacherFirst` computes
/// KL(teacher ‖ student).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    #[default]
    StudentFirst,
    TeacherFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub mode: DistillMode,
    pub temperature: f64,
    pub balance: f64,
    pub teacher_input: TeacherInput,
    pub kl_direction: KlDirection,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            mode: DistillMode::None,
            temperature: 1.0,
            balance: 1.0,
            teacher_input: TeacherInput::Full,
            kl_direction: KlDirection::StudentFirst,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(CoreError::Config(format!(
                "distill temperature must be finite and > 0, got {}",
                self.temperature
            )));
        }
        if !(self.balance.is_finite() && self.balance >= 0.0) {
            return Err(CoreError::Config(format!(
                "distill balance must be finite and >= 0, got {}",
                self.balance
            )));
        }
        Ok(())
    }

    pub fn uses_teacher(&self) -> bool {
        self.mode != DistillMode::None
    }
}

fn check_pair(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != 2 || a != b {
        return Err(CoreError::Tensor(mft_tensor::TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        }));
    }
    Ok(())
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(CoreError::Config(format!(
            "cross_entropy: logits {shape:?} for {} labels",
            labels.len()
        )));
    }
    let classes = shape[1];
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(CoreError::Label { label, classes });
    }
    let logp = tape.log_softmax(logits)?;
    let rows: Vec<Vec<usize>> = labels.iter().map(|&l| vec![l]).collect();
    let picked = tape.gather(logp, 1, &Index::rows(&rows)?)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}

/// Batch-mean KL divergence between temperature-softened distributions.
pub fn kl_distill(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    temperature: f64,
    direction: KlDirection,
) -> Result<Var> {
    check_pair("kl_distill", tape.shape(student), teacher.shape())?;
    let inv_t = (1.0 / temperature) as f32;
    let batch = teacher.shape()[0] as f32;
    let scaled = tape.scale(student, inv_t);
    let log_s = tape.log_softmax(scaled)?;
    let log_t = ops::log_softmax(&ops::scale(teacher, inv_t))?;
    let terms = match direction {
        KlDirection::StudentFirst => {
            let log_t = tape.constant(log_t);
            let diff = tape.sub(log_s, log_t)?;
            let p = tape.exp(log_s);
            tape.mul(p, diff)?
        }
        KlDirection::TeacherFirst => {
            let p = tape.constant(ops::map(&log_t, f32::exp));
            let log_t = tape.constant(log_t);
            let diff = tape.sub(log_t, log_s)?;
            tape.mul(p, diff)?
        }
    };
    let total = tape.sum(terms);
    Ok(tape.scale(total, 1.0 / batch))
}

/// Per-row argmax, ties to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Cross-entropy against the teacher's argmax labels.
pub fn hard_distill(tape: &mut Tape, student: Var, teacher: &Tensor) -> Result<Var> {
    check_pair("hard_distill", tape.shape(student), teacher.shape())?;
    cross_entropy(tape, student, &argmax_rows(teacher))
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ce: f32,
    /// Distillation term before weighting; 0 for `DistillMode::None`.
    pub distill: f32,
}

/// `L_CE + λ · L_distill` under `cfg`.
pub fn total_loss(
    tape: &mut Tape,
    student: Var,
    labels: &[usize],
    teacher: Option<&Tensor>,
    cfg: &DistillConfig,
) -> Result<LossTerms> {
    let ce = cross_entropy(tape, student, labels)?;
    let ce_value = tape.value(ce).data()[0];
    let term = match cfg.mode {
        DistillMode::None => None,
        mode => {
            let teacher = teacher.ok_or(CoreError::MissingTeacher(match mode {
                DistillMode::Soft => "soft",
                _ => "hard",
            }))?;
            Some(match mode {
                DistillMode::Soft => kl_distill(tape, student, teacher, cfg.temperature, cfg.kl_direction)?,
                _ => hard_distill(tape, student, teacher)?,
            })
        }
    };
    match term {
        None => Ok(LossTerms {
            total: ce,
            ce: ce_value,
            distill: 0.0,
        }),
        Some(t) => {
            let distill = tape.value(t).data()[0];
            let weighted = tape.scale(t, cfg.balance as f32);
            Ok(LossTerms {
                total: tape.add(ce, weighted)?,
                ce: ce_value,
                distill,
            })
        }
    }
}
