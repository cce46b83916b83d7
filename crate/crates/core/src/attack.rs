//! L∞ projected gradient descent.
//!
//! Starting from `δ₀ ~ U(−ε, ε)` (or zero), each step moves the perturbation
//! by `α·sign(∇ₓ L)`, projects it back onto the ε-ball and clamps the
//! perturbed image to the valid pixel range. The attacked loss is the plain
//! pixel-wise cross-entropy unless a custom loss is supplied.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::task_loss;
use crate::model::{ForwardOutput, ModelParams};

/// Perturbation budget above which changes become visible.
pub const IMPERCEPTIBLE_EPSILON: f64 = 0.01;
pub const MAX_EPSILON: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    /// Per-step size α; `None` means ε/4.
    pub step_size: Option<f64>,
    pub steps: usize,
    pub random_start: bool,
    pub pixel_range: (f64, f64),
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: IMPERCEPTIBLE_EPSILON,
            step_size: None,
            steps: 10,
            random_start: true,
            pixel_range: (0.0, 1.0),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 4.0)
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_EPSILON).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "epsilon must lie in [0, {MAX_EPSILON}], got {}",
                self.epsilon
            )));
        }
        if self.epsilon > IMPERCEPTIBLE_EPSILON {
            log::warn!(
                "epsilon {} exceeds the imperceptibility threshold {IMPERCEPTIBLE_EPSILON}",
                self.epsilon
            );
        }
        if self.epsilon > 0.0 && !(self.step() > 0.0 && self.step().is_finite()) {
            return Err(Error::Config(format!(
                "step size must be positive, got {}",
                self.step()
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack needs at least one step".into()));
        }
        let (lo, hi) = self.pixel_range;
        if !(lo < hi) {
            return Err(Error::Config(format!("empty pixel range [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// Objective maximised by the attack, given the forward output and the
/// flattened target mask.
pub type AttackLoss<'a> = dyn Fn(&mut Tape, &ForwardOutput, &[u8]) -> Result<Var> + 'a;

/// Pixel-wise cross-entropy, the default attack objective.
pub fn cross_entropy_objective(tape: &mut Tape, out: &ForwardOutput, mask: &[u8]) -> Result<Var> {
    task_loss(tape, out.logits, mask)
}

/// `sign` with `sign(0) = 0`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// PGD against the cross-entropy loss.
pub fn pgd(params: &ModelParams, images: &Tensor, mask: &[u8], cfg: &AttackConfig) -> Result<Tensor> {
    pgd_with_loss(params, images, mask, &cross_entropy_objective, cfg)
}

/// PGD against an arbitrary objective. `images` is a `[batch, H, W, C]`
/// batch; since the batch loss is a positive-weighted sum of per-image
/// losses, every image is attacked exactly as it would be on its own.
pub fn pgd_with_loss(
    params: &ModelParams,
    images: &Tensor,
    mask: &[u8],
    loss_fn: &AttackLoss<'_>,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let (lo, hi) = cfg.pixel_range;
    if let Some(bad) = images.data().iter().find(|&&v| !(lo..=hi).contains(&v)) {
        return Err(Error::Domain {
            op: "pgd",
            detail: format!("pixel value {bad} outside [{lo}, {hi}]"),
        });
    }
    let eps = cfg.epsilon;
    if eps == 0.0 {
        return Ok(images.clone());
    }
    let alpha = cfg.step();
    let x = images.data();

    let mut adv: Vec<f64> = if cfg.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        x.iter()
            .map(|&v| (v + rng.gen_range(-eps..eps)).clamp(lo, hi))
            .collect()
    } else {
        x.to_vec()
    };

    for iteration in 0..cfg.steps {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let xv = tape.leaf(Tensor::new(images.shape().to_vec(), adv.clone())?, true);
        let out = params.forward(&mut tape, &bound, xv)?;
        let loss = loss_fn(&mut tape, &out, mask)?;
        tape.backward(loss)?;
        let grad = tape
            .grad_data(xv)
            .ok_or(Error::Attack { iteration })?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Attack { iteration });
        }
        for ((a, &x0), &g) in adv.iter_mut().zip(x).zip(grad) {
            let delta = (*a - x0 + alpha * sign(g)).clamp(-eps, eps);
            *a = (x0 + delta).clamp(lo, hi);
        }
        debug_assert!(adv
            .iter()
            .zip(x)
            .all(|(a, x0)| (a - x0).abs() <= eps + 1e-12 && (lo..=hi).contains(a)));
    }
    Tensor::new(images.shape().to_vec(), adv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub linf: f64,
    pub l2: f64,
    pub fraction_changed: f64,
}

pub fn perturbation_report(x: &Tensor, x_adv: &Tensor) -> Result<PerturbationReport> {
    if x.shape() != x_adv.shape() {
        return Err(Error::dim("perturbation_report", x.shape(), x_adv.shape()));
    }
    let mut linf = 0.0f64;
    let mut sq = 0.0;
    let mut changed = 0usize;
    for (a, b) in x.data().iter().zip(x_adv.data()) {
        let d = b - a;
        linf = linf.max(d.abs());
        sq += d * d;
        if d != 0.0 {
            changed += 1;
        }
    }
    Ok(PerturbationReport {
        linf,
        l2: sq.sqrt(),
        fraction_changed: changed as f64 / x.numel() as f64,
    })
}
