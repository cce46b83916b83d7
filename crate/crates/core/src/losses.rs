//! Task loss, adversarial hidden loss and their weighted combination.
//!
//! `total = ½·(task(clean) + task(adv)) + λ·hidden(clean, adv)`, where the
//! hidden term is the mean over selected encoder stages of the elementwise
//! squared distance between clean and adversarial features. Neither branch
//! is detached, so the hidden term pulls both representations together.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BoundParams, ModelParams, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenStages {
    All,
    /// Only the deepest encoder stage.
    Final,
    Only(Vec<usize>),
}

impl HiddenStages {
    pub fn resolve(&self, available: usize) -> Result<Vec<usize>> {
        let stages = match self {
            HiddenStages::All => (0..available).collect(),
            HiddenStages::Final => vec![available.saturating_sub(1)],
            HiddenStages::Only(list) => list.clone(),
        };
        if stages.is_empty() || available == 0 {
            return Err(Error::Config("hidden_stages must select at least one stage".into()));
        }
        if let Some(&bad) = stages.iter().find(|&&s| s >= available) {
            return Err(Error::Config(format!(
                "hidden stage {bad} out of range, model has {available} stages"
            )));
        }
        Ok(stages)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub hidden_stages: HiddenStages,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            hidden_stages: HiddenStages::All,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if let HiddenStages::Only(list) = &self.hidden_stages {
            if list.is_empty() {
                return Err(Error::Config("hidden_stages must not be empty".into()));
            }
        }
        Ok(())
    }
}

/// Mean per-pixel cross-entropy of `[batch, H, W, 2]` logits against a
/// flattened `{0, 1}` mask of `batch·H·W` entries.
pub fn task_loss(tape: &mut Tape, logits: Var, mask: &[u8]) -> Result<Var> {
    let numel = tape.value(logits).numel();
    if numel != mask.len() * NUM_CLASSES {
        return Err(Error::dim("task_loss", tape.shape(logits), &[mask.len()]));
    }
    let rows = tape.reshape(logits, &[mask.len(), NUM_CLASSES])?;
    let targets: Vec<usize> = mask.iter().map(|&m| m as usize).collect();
    tape.softmax_cross_entropy(rows, &targets)
}

/// Mean over the selected stages of the MSE between clean and adversarial
/// stage features.
pub fn hidden_loss(tape: &mut Tape, clean: &[Var], adv: &[Var], stages: &HiddenStages) -> Result<Var> {
    if clean.len() != adv.len() {
        return Err(Error::dim("hidden_loss", &[clean.len()], &[adv.len()]));
    }
    let selected = stages.resolve(clean.len())?;
    let mut acc: Option<Var> = None;
    for &s in &selected {
        if tape.shape(clean[s]) != tape.shape(adv[s]) {
            return Err(Error::StageShape {
                stage: s,
                lhs: tape.shape(clean[s]).to_vec(),
                rhs: tape.shape(adv[s]).to_vec(),
            });
        }
        let diff = tape.sub(clean[s], adv[s])?;
        let sq = tape.mul(diff, diff)?;
        let mse = tape.mean(sq);
        acc = Some(match acc {
            None => mse,
            Some(prev) => tape.add(prev, mse)?,
        });
    }
    let total = acc.expect("non-empty selection");
    tape.scale(total, 1.0 / selected.len() as f64)
}

/// Graph handles for every term of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct TotalLoss {
    pub total: Var,
    pub task_clean: Var,
    pub task_adv: Var,
    pub hidden: Var,
}

/// Plain values of the loss terms, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub task_clean: f64,
    pub task_adv: f64,
    pub hidden: f64,
}

impl TotalLoss {
    pub fn components(&self, tape: &Tape) -> LossComponents {
        LossComponents {
            total: tape.value(self.total).item(),
            task_clean: tape.value(self.task_clean).item(),
            task_adv: tape.value(self.task_adv).item(),
            hidden: tape.value(self.hidden).item(),
        }
    }
}

/// Runs both forward passes and assembles the combined objective.
pub fn total_loss(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &BoundParams,
    x_clean: Var,
    x_adv: Var,
    mask: &[u8],
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    if tape.shape(x_clean) != tape.shape(x_adv) {
        return Err(Error::dim("total_loss", tape.shape(x_clean), tape.shape(x_adv)));
    }
    let clean = params.forward(tape, bound, x_clean)?;
    let adv = params.forward(tape, bound, x_adv)?;
    let task_clean = task_loss(tape, clean.logits, mask)?;
    let task_adv = task_loss(tape, adv.logits, mask)?;
    let hidden = hidden_loss(tape, &clean.hidden, &adv.hidden, &cfg.hidden_stages)?;
    let mixed = tape.add(task_clean, task_adv)?;
    let mixed = tape.scale(mixed, 0.5)?;
    let total = if cfg.lambda == 0.0 {
        // Keeps λ = 0 bitwise equal to the plain mixed loss.
        mixed
    } else {
        let reg = tape.scale(hidden, cfg.lambda)?;
        tape.add(mixed, reg)?
    };
    Ok(TotalLoss {
        total,
        task_clean,
        task_adv,
        hidden,
    })
}
