//! Seeded mini-batch SGD for the three training regimes.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalAttack};
use crate::losses::{self, LossComponents, LossConfig};
use crate::model::{ModelConfig, ModelParams};
use crate::synth::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Cross-entropy on clean images.
    Clean,
    /// Mixed clean/adversarial cross-entropy.
    Adversarial,
    /// Mixed cross-entropy plus λ times the hidden-feature distance.
    AdversarialHidden,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Clean => "clean",
            TrainMode::Adversarial => "adversarial",
            TrainMode::AdversarialHidden => "adversarial+hidden",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(TrainMode::Clean),
            "adversarial" | "at" => Ok(TrainMode::Adversarial),
            "adversarial+hidden" | "adversarial_hidden" | "hidden" => {
                Ok(TrainMode::AdversarialHidden)
            }
            other => Err(Error::Config(format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub attack: AttackConfig,
    pub loss: LossConfig,
    pub seed: u64,
    /// Epochs without validation-mIoU improvement before stopping.
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Clean,
            epochs: 50,
            batch_size: 16,
            learning_rate: 0.01,
            weight_decay: 5e-4,
            attack: AttackConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            early_stop_patience: 8,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        if self.mode != TrainMode::Clean {
            self.attack.validate()?;
            self.loss.validate()?;
        }
        Ok(())
    }

    /// λ actually applied by this mode.
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            TrainMode::Clean | TrainMode::Adversarial => 0.0,
            TrainMode::AdversarialHidden => self.loss.lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch-averaged loss terms.
    pub loss: LossComponents,
    pub validation_miou: f64,
    pub attack_calls: usize,
    /// Excluded from serialized records so reruns compare bitwise.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were returned.
    pub best_epoch: usize,
    pub best_validation_miou: f64,
    pub stopped_early: bool,
    pub steps: usize,
    pub attack_calls: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub report: TrainReport,
}

/// `p ← p − lr·(g + wd·p)` for every parameter tensor. `grads` is aligned
/// with [`ModelParams::tensors`].
pub fn sgd_step(params: &mut ModelParams, grads: &[Option<&[f64]>], lr: f64, weight_decay: f64) -> Result<()> {
    if grads.len() != params.tensors().len() {
        return Err(Error::Contract(format!(
            "expected {} gradients, got {}",
            params.tensors().len(),
            grads.len()
        )));
    }
    for (t, g) in params.tensors().iter().zip(grads) {
        match g {
            Some(g) if g.len() == t.tensor.numel() => {}
            Some(_) => return Err(Error::Contract(format!("gradient for {} has wrong size", t.name))),
            None => return Err(Error::Contract(format!("missing gradient for {}", t.name))),
        }
    }
    for (t, g) in params.tensors_mut().iter_mut().zip(grads) {
        let g = g.expect("checked above");
        for (p, &gi) in t.tensor.data_mut().iter_mut().zip(g) {
            *p -= lr * (gi + weight_decay * *p);
        }
    }
    Ok(())
}

/// Stacks samples into a `[batch, H, W, C]` tensor and a flattened mask.
pub fn stack(samples: &[&Sample]) -> Result<(Tensor, Vec<u8>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("cannot stack an empty batch".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    let mut mask = Vec::with_capacity(samples.len() * first.mask.len());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::dim("stack", &shape, s.image.shape()));
        }
        data.extend_from_slice(s.image.data());
        mask.extend_from_slice(&s.mask);
    }
    let mut full = vec![samples.len()];
    full.extend_from_slice(&shape);
    Ok((Tensor::new(full, data)?, mask))
}

pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded split of `n` indices into (train, validation).
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5a17));
    idx.shuffle(&mut rng);
    let n_val = if n < 2 || fraction == 0.0 {
        0
    } else {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    };
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Called once per optimisation step with `(epoch, step, components)`.
pub type StepHook<'a> = dyn FnMut(usize, usize, &LossComponents) + 'a;

pub fn train(samples: &[Sample], model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_hook(samples, model, cfg, &mut |_, _, _| {})
}

pub fn train_with_hook(
    samples: &[Sample],
    model: &ModelConfig,
    cfg: &TrainConfig,
    hook: &mut StepHook<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut params = ModelParams::init(model)?;
    let (train_idx, val_idx) = validation_split(samples.len(), cfg.validation_fraction, cfg.seed);
    let val: Vec<Sample> = val_idx.iter().map(|&i| samples[i].clone()).collect();

    let mut best = params.clone();
    let mut best_miou = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut records = Vec::new();
    let mut steps = 0;
    let mut attack_calls = 0;
    let mut stopped_early = false;
    let mut order = train_idx.clone();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut sums = LossComponents::default();
        let mut batches: usize = 0;
        let epoch_attacks_before = attack_calls;

        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (images, mask) = stack(&batch)?;
            let diverged = |detail: String| Error::Divergence {
                epoch,
                step,
                detail,
            };

            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let (loss, parts) = match cfg.mode {
                TrainMode::Clean => {
                    let x = tape.constant(images);
                    let out = params
                        .forward(&mut tape, &bound, x)
                        .map_err(|e| diverged(e.to_string()))?;
                    let l = losses::task_loss(&mut tape, out.logits, &mask)
                        .map_err(|e| diverged(e.to_string()))?;
                    let v = tape.value(l).item();
                    (
                        l,
                        LossComponents {
                            total: v,
                            task_clean: v,
                            task_adv: 0.0,
                            hidden: 0.0,
                        },
                    )
                }
                TrainMode::Adversarial | TrainMode::AdversarialHidden => {
                    let attack_cfg = AttackConfig {
                        seed: mix_seed(cfg.attack.seed ^ cfg.seed, (epoch as u64) << 32 | step as u64),
                        ..cfg.attack.clone()
                    };
                    let adv = attack::pgd(&params, &images, &mask, &attack_cfg).map_err(|e| match e {
                        Error::Attack { .. } => diverged(e.to_string()),
                        other => other,
                    })?;
                    attack_calls += 1;
                    let loss_cfg = LossConfig {
                        lambda: cfg.effective_lambda(),
                        ..cfg.loss.clone()
                    };
                    let xc = tape.constant(images);
                    let xa = tape.constant(adv);
                    let total = losses::total_loss(&mut tape, &params, &bound, xc, xa, &mask, &loss_cfg)
                        .map_err(|e| diverged(e.to_string()))?;
                    (total.total, total.components(&tape))
                }
            };
            if !parts.total.is_finite() {
                return Err(diverged("loss is not finite".into()));
            }
            tape.backward(loss)?;
            let grads: Vec<Option<&[f64]>> = bound.vars().iter().map(|&v| tape.grad_data(v)).collect();
            if grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(diverged("gradient is not finite".into()));
            }
            sgd_step(&mut params, &grads, cfg.learning_rate, cfg.weight_decay)?;
            if params.tensors().iter().any(|t| !t.tensor.all_finite()) {
                return Err(diverged("parameters are not finite".into()));
            }
            hook(epoch, step, &parts);
            sums.total += parts.total;
            sums.task_clean += parts.task_clean;
            sums.task_adv += parts.task_adv;
            sums.hidden += parts.hidden;
            batches += 1;
            steps += 1;
        }

        let n = batches.max(1) as f64;
        let mean = LossComponents {
            total: sums.total / n,
            task_clean: sums.task_clean / n,
            task_adv: sums.task_adv / n,
            hidden: sums.hidden / n,
        };
        let validation_miou = if val.is_empty() {
            f64::NAN
        } else {
            match evaluate(&params, &val, EvalAttack::None, cfg.batch_size) {
                Ok(r) => r.miou,
                Err(e @ Error::NonFinite { .. }) => {
                    return Err(Error::Divergence {
                        epoch,
                        step: batches.saturating_sub(1),
                        detail: format!("validation: {e}"),
                    })
                }
                Err(e) => return Err(e),
            }
        };
        records.push(EpochRecord {
            epoch,
            loss: mean,
            validation_miou,
            attack_calls: attack_calls - epoch_attacks_before,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        log::debug!(
            "epoch {epoch}: loss {:.5} hidden {:.3e} val mIoU {validation_miou:.4}",
            mean.total,
            mean.hidden
        );

        if val.is_empty() || validation_miou > best_miou {
            best_miou = if val.is_empty() { f64::NAN } else { validation_miou };
            best = params.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: best,
        report: TrainReport {
            config: cfg.clone(),
            model: model.clone(),
            epochs: records,
            best_epoch,
            best_validation_miou: best_miou,
            stopped_early,
            steps,
            attack_calls,
        },
    })
}
