//! Evaluation: mIoU on clean or attacked test sets, the four-row ablation
//! matrix and the λ / ε sweeps.

pub mod metrics;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, PerturbationReport};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::synth::{Dataset, Sample};
use crate::trainer::{self, mix_seed, stack, TrainConfig, TrainMode, TrainReport};

pub use metrics::{miou, Confusion, IoUReport};

/// Sweep values used when none are given.
pub const DEFAULT_LAMBDAS: [f64; 4] = [0.0, 0.1, 1.0, 10.0];
pub const DEFAULT_EPSILONS: [f64; 4] = [0.005, 0.01, 0.05, 0.1];

#[derive(Debug, Clone, Copy)]
pub enum EvalAttack<'a> {
    None,
    Pgd(&'a AttackConfig),
}

/// Dataset-level mIoU of `params` on `samples`, optionally after attacking
/// each batch. Batch `i` is attacked with seed `mix(cfg.seed, i)`.
pub fn evaluate(params: &ModelParams, samples: &[Sample], attack: EvalAttack<'_>, batch: usize) -> Result<IoUReport> {
    Ok(evaluate_detailed(params, samples, attack, batch)?.0)
}

/// As [`evaluate`], also returning the mean perturbation statistics.
pub fn evaluate_detailed(
    params: &ModelParams,
    samples: &[Sample],
    attack: EvalAttack<'_>,
    batch: usize,
) -> Result<(IoUReport, Option<PerturbationReport>)> {
    evaluate_threaded(params, samples, attack, batch, 1)
}

struct BatchResult {
    confusion: Confusion,
    perturbation: Option<PerturbationReport>,
    len: usize,
}

fn evaluate_batch(params: &ModelParams, chunk: &[Sample], index: usize, attack: EvalAttack<'_>) -> Result<BatchResult> {
    let refs: Vec<&Sample> = chunk.iter().collect();
    let (images, mask) = stack(&refs)?;
    let (input, perturbation) = match attack {
        EvalAttack::None => (images, None),
        EvalAttack::Pgd(cfg) => {
            let cfg = AttackConfig {
                seed: mix_seed(cfg.seed, index as u64),
                ..cfg.clone()
            };
            let adv = attack::pgd(params, &images, &mask, &cfg)?;
            let r = attack::perturbation_report(&images, &adv)?;
            (adv, Some(r))
        }
    };
    let mut confusion = Confusion::default();
    confusion.add(&params.predict(&input)?, &mask)?;
    Ok(BatchResult {
        confusion,
        perturbation,
        len: chunk.len(),
    })
}

/// As [`evaluate_detailed`], spreading batches over up to `threads` worker
/// threads. Batches are reduced in index order, so the result does not
/// depend on `threads`.
pub fn evaluate_threaded(
    params: &ModelParams,
    samples: &[Sample],
    attack: EvalAttack<'_>,
    batch: usize,
    threads: usize,
) -> Result<(IoUReport, Option<PerturbationReport>)> {
    if batch == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let chunks: Vec<&[Sample]> = samples.chunks(batch).collect();
    let workers = threads.clamp(1, chunks.len().max(1));
    let results: Vec<Result<BatchResult>> = if workers == 1 {
        chunks
            .iter()
            .enumerate()
            .map(|(i, c)| evaluate_batch(params, c, i, attack))
            .collect()
    } else {
        let mut slots: Vec<Option<Result<BatchResult>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let chunks = &chunks;
                    scope.spawn(move || {
                        (w..chunks.len())
                            .step_by(workers)
                            .map(|i| (i, evaluate_batch(params, chunks[i], i, attack)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("evaluation worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every batch evaluated")).collect()
    };

    let mut confusion = Confusion::default();
    let mut pert = PerturbationReport {
        linf: 0.0,
        l2: 0.0,
        fraction_changed: 0.0,
    };
    for r in results {
        let r = r?;
        confusion.merge(&r.confusion);
        if let Some(p) = r.perturbation {
            let w = r.len as f64;
            pert.linf = pert.linf.max(p.linf);
            pert.l2 += p.l2 * w;
            pert.fraction_changed += p.fraction_changed * w;
        }
    }
    let report = confusion.report(samples.len());
    let pert = match attack {
        EvalAttack::None => None,
        EvalAttack::Pgd(_) => {
            let n = samples.len().max(1) as f64;
            pert.l2 /= n;
            pert.fraction_changed /= n;
            Some(pert)
        }
    };
    Ok((report, pert))
}

/// Adversarial copies of `samples`, attacked batch by batch with the same
/// seeds [`evaluate`] uses.
pub fn attack_samples(params: &ModelParams, samples: &[Sample], cfg: &AttackConfig, batch: usize) -> Result<Vec<Sample>> {
    if batch == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(samples.len());
    for (i, chunk) in samples.chunks(batch).enumerate() {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, mask) = stack(&refs)?;
        let cfg = AttackConfig {
            seed: mix_seed(cfg.seed, i as u64),
            ..cfg.clone()
        };
        let adv = attack::pgd(params, &images, &mask, &cfg)?;
        let per = adv.numel() / chunk.len();
        for (k, s) in chunk.iter().enumerate() {
            out.push(Sample {
                image: Tensor::new(s.image.shape().to_vec(), adv.data()[k * per..(k + 1) * per].to_vec())?,
                ..s.clone()
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1); zero for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        MeanStd { mean, std }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// One ablation configuration: whether the test set is attacked and how the
/// evaluated model was trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub attack: bool,
    pub adversarial_training: bool,
    pub hidden_loss: bool,
}

impl AblationRow {
    pub const ALL: [AblationRow; 4] = [
        AblationRow {
            attack: false,
            adversarial_training: false,
            hidden_loss: false,
        },
        AblationRow {
            attack: true,
            adversarial_training: false,
            hidden_loss: false,
        },
        AblationRow {
            attack: true,
            adversarial_training: true,
            hidden_loss: false,
        },
        AblationRow {
            attack: true,
            adversarial_training: true,
            hidden_loss: true,
        },
    ];

    pub fn mode(&self) -> TrainMode {
        match (self.adversarial_training, self.hidden_loss) {
            (false, _) => TrainMode::Clean,
            (true, false) => TrainMode::Adversarial,
            (true, true) => TrainMode::AdversarialHidden,
        }
    }

    pub fn label(&self) -> &'static str {
        match (self.attack, self.mode()) {
            (false, _) => "no attack / no AT",
            (true, TrainMode::Clean) => "attack / no AT",
            (true, TrainMode::Adversarial) => "attack / AT",
            (true, TrainMode::AdversarialHidden) => "attack / AT + hidden",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub row: AblationRow,
    pub per_seed: Vec<f64>,
    pub summary: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationMatrix {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationCell>,
}

impl AblationMatrix {
    pub fn table(&self) -> String {
        let mut out = format!("{:<24} {:>18}  per-seed\n", "configuration", "mIoU");
        for cell in &self.rows {
            let seeds: Vec<String> = cell.per_seed.iter().map(|v| format!("{v:.4}")).collect();
            out.push_str(&format!(
                "{:<24} {:>18}  {}\n",
                cell.row.label(),
                cell.summary.to_string(),
                seeds.join(" ")
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub per_seed: Vec<f64>,
    pub summary: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSweep {
    pub seeds: Vec<u64>,
    pub points: Vec<SweepPoint>,
}

impl LambdaSweep {
    pub fn table(&self) -> String {
        sweep_table("lambda", &self.points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonPoint {
    pub epsilon: f64,
    pub report: IoUReport,
    pub perturbation: Option<PerturbationReport>,
}

fn sweep_table(name: &str, points: &[SweepPoint]) -> String {
    let mut out = format!("{name:<8} {:>18}\n", "mIoU");
    for p in points {
        out.push_str(&format!("{:<8} {:>18}\n", p.value, p.summary.to_string()));
    }
    out
}

/// Everything the ablation and sweeps share: data, architecture, the base
/// training recipe and the evaluation attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval_attack: AttackConfig,
    pub eval_batch: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval_attack: AttackConfig::default(),
            eval_batch: 32,
        }
    }
}

/// Key of a trained model. Adversarial training is the λ = 0 case of the
/// hidden-loss objective, so both share one key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct ModelKey {
    adversarial: bool,
    lambda_bits: u64,
    seed: u64,
}

/// A trained model together with its training report.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub report: TrainReport,
}

/// Trains models on demand and memoises them, so the ablation and the λ
/// sweep reuse shared runs.
pub struct Experiment<'d> {
    pub dataset: &'d Dataset,
    pub config: ExperimentConfig,
    cache: BTreeMap<ModelKey, TrainedModel>,
    on_trained: Option<Box<dyn FnMut(&TrainedModel) + 'd>>,
}

impl<'d> Experiment<'d> {
    pub fn new(dataset: &'d Dataset, config: ExperimentConfig) -> Self {
        Experiment {
            dataset,
            config,
            cache: BTreeMap::new(),
            on_trained: None,
        }
    }

    /// Called once for every model trained (not for cache hits).
    pub fn on_trained(mut self, f: impl FnMut(&TrainedModel) + 'd) -> Self {
        self.on_trained = Some(Box::new(f));
        self
    }

    pub fn trained_count(&self) -> usize {
        self.cache.len()
    }

    /// Model trained with `mode` (and `lambda` for the hidden-loss mode)
    /// from `seed`. The seed drives initialisation, shuffling and the
    /// training attack.
    pub fn model(&mut self, mode: TrainMode, lambda: f64, seed: u64) -> Result<&TrainedModel> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        let lambda = match mode {
            TrainMode::AdversarialHidden => lambda,
            _ => 0.0,
        };
        let key = ModelKey {
            adversarial: mode != TrainMode::Clean,
            lambda_bits: (lambda + 0.0).to_bits(),
            seed,
        };
        if !self.cache.contains_key(&key) {
            let model_cfg = ModelConfig {
                seed,
                ..self.config.model.clone()
            };
            let mut train_cfg = self.config.train.clone();
            train_cfg.mode = if !key.adversarial {
                TrainMode::Clean
            } else {
                TrainMode::AdversarialHidden
            };
            train_cfg.loss.lambda = lambda;
            train_cfg.seed = seed;
            let outcome = trainer::train(&self.dataset.train, &model_cfg, &train_cfg)?;
            let trained = TrainedModel {
                params: outcome.params,
                report: outcome.report,
            };
            if let Some(f) = self.on_trained.as_mut() {
                f(&trained);
            }
            self.cache.insert(key, trained);
        }
        Ok(&self.cache[&key])
    }

    fn attacked_miou(&mut self, mode: TrainMode, lambda: f64, seed: u64, attack: bool) -> Result<f64> {
        let batch = self.config.eval_batch;
        let attack_cfg = AttackConfig {
            seed: mix_seed(self.config.eval_attack.seed, seed),
            ..self.config.eval_attack.clone()
        };
        let test = &self.dataset.test;
        let params = &self.model(mode, lambda, seed)?.params;
        let how = if attack {
            EvalAttack::Pgd(&attack_cfg)
        } else {
            EvalAttack::None
        };
        Ok(evaluate(params, test, how, batch)?.miou)
    }

    /// The four ablation rows. Row 1 scores the clean-trained model on
    /// clean test images; the others attack every evaluated model afresh.
    /// `lambda` weights the hidden loss in the last row.
    pub fn run_ablation(&mut self, seeds: &[u64], lambda: f64) -> std::result::Result<AblationMatrix, Partial<AblationMatrix>> {
        let mut matrix = AblationMatrix {
            seeds: seeds.to_vec(),
            rows: AblationRow::ALL
                .iter()
                .map(|&row| AblationCell {
                    row,
                    per_seed: Vec::new(),
                    summary: MeanStd::of(&[]),
                })
                .collect(),
        };
        if seeds.len() < 3 {
            return Err(Partial {
                partial: matrix,
                error: Error::Config(format!("ablation needs at least 3 seeds, got {}", seeds.len())),
            });
        }
        for &seed in seeds {
            for cell in matrix.rows.iter_mut() {
                let r = cell.row;
                match self.attacked_miou(r.mode(), lambda, seed, r.attack) {
                    Ok(v) => cell.per_seed.push(v),
                    Err(error) => {
                        finish(&mut matrix);
                        return Err(Partial { partial: matrix, error });
                    }
                }
            }
        }
        finish(&mut matrix);
        Ok(matrix)
    }

    /// Attacked mIoU of hidden-loss models for every λ.
    pub fn lambda_sweep(&mut self, lambdas: &[f64], seeds: &[u64]) -> Result<LambdaSweep> {
        if let Some(bad) = lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {bad}")));
        }
        let mut points = Vec::with_capacity(lambdas.len());
        for &lambda in lambdas {
            let mut per_seed = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                per_seed.push(self.attacked_miou(TrainMode::AdversarialHidden, lambda, seed, true)?);
            }
            points.push(SweepPoint {
                value: lambda,
                summary: MeanStd::of(&per_seed),
                per_seed,
            });
        }
        Ok(LambdaSweep {
            seeds: seeds.to_vec(),
            points,
        })
    }
}

fn finish(matrix: &mut AblationMatrix) {
    for cell in &mut matrix.rows {
        cell.summary = MeanStd::of(&cell.per_seed);
    }
}

/// A failed run together with whatever finished before the failure.
#[derive(Debug)]
pub struct Partial<T> {
    pub partial: T,
    pub error: Error,
}

impl<T> fmt::Display for Partial<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl<T: fmt::Debug> std::error::Error for Partial<T> {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Attacked mIoU of one model at each ε; ε = 0 is scored on clean images.
pub fn epsilon_sweep(
    params: &ModelParams,
    samples: &[Sample],
    base: &AttackConfig,
    epsilons: &[f64],
    batch: usize,
) -> Result<Vec<EpsilonPoint>> {
    let mut out = Vec::with_capacity(epsilons.len());
    for &epsilon in epsilons {
        let (report, perturbation) = if epsilon == 0.0 {
            (evaluate(params, samples, EvalAttack::None, batch)?, None)
        } else {
            let cfg = base.with_epsilon(epsilon);
            cfg.validate()?;
            evaluate_detailed(params, samples, EvalAttack::Pgd(&cfg), batch)?
        };
        out.push(EpsilonPoint {
            epsilon,
            report,
            perturbation,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_split, SceneConfig, SplitConfig};

    fn tiny_dataset() -> Dataset {
        generate_split(&SplitConfig {
            n_positive: 6,
            n_challenging: 4,
            seed: 9,
            scene: SceneConfig {
                height: 8,
                width: 8,
                ..SceneConfig::default()
            },
        })
        .unwrap()
    }

    fn tiny_experiment(ds: &Dataset) -> Experiment<'_> {
        let mut config = ExperimentConfig {
            model: ModelConfig {
                height: 8,
                width: 8,
                stage_widths: vec![2, 4],
                decoder_width: 2,
                ..ModelConfig::default()
            },
            eval_batch: 3,
            ..ExperimentConfig::default()
        };
        config.train.epochs = 1;
        config.train.batch_size = 4;
        config.train.attack.steps = 2;
        Experiment::new(ds, config)
    }

    #[test]
    fn attacked_copies_reproduce_attacked_evaluation() {
        let ds = crate::synth::generate_split(&crate::synth::SplitConfig {
            n_positive: 2,
            n_challenging: 5,
            seed: 2,
            scene: crate::synth::SceneConfig {
                height: 16,
                width: 16,
                ..Default::default()
            },
        })
        .unwrap();
        let params = ModelParams::init(&ModelConfig {
            height: 16,
            width: 16,
            ..ModelConfig::default()
        })
        .unwrap();
        let cfg = AttackConfig {
            steps: 2,
            ..AttackConfig::default()
        };
        let adv = attack_samples(&params, &ds.test, &cfg, 2).unwrap();
        let direct = evaluate(&params, &ds.test, EvalAttack::Pgd(&cfg), 2).unwrap();
        let via_copies = evaluate(&params, &adv, EvalAttack::None, 2).unwrap();
        assert_eq!(direct, via_copies);
        assert!(adv.iter().zip(&ds.test).all(|(a, s)| a.mask == s.mask));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let ds = crate::synth::generate_split(&crate::synth::SplitConfig {
            n_positive: 2,
            n_challenging: 7,
            seed: 1,
            scene: crate::synth::SceneConfig {
                height: 16,
                width: 16,
                ..Default::default()
            },
        })
        .unwrap();
        let params = ModelParams::init(&ModelConfig {
            height: 16,
            width: 16,
            ..ModelConfig::default()
        })
        .unwrap();
        let cfg = AttackConfig {
            steps: 2,
            ..AttackConfig::default()
        };
        let one = evaluate_threaded(&params, &ds.test, EvalAttack::Pgd(&cfg), 2, 1).unwrap();
        for threads in [2, 3, 16] {
            let many = evaluate_threaded(&params, &ds.test, EvalAttack::Pgd(&cfg), 2, threads).unwrap();
            assert_eq!(serde_json::to_string(&many).unwrap(), serde_json::to_string(&one).unwrap());
        }
    }

    #[test]
    fn mean_std_examples() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.std, 1.0);
        assert_eq!(MeanStd::of(&[0.5]).std, 0.0);
        assert!(MeanStd::of(&[]).mean.is_nan());
    }

    #[test]
    fn zero_epsilon_matches_clean_evaluation() {
        let ds = tiny_dataset();
        let params = ModelParams::init(&tiny_experiment(&ds).config.model).unwrap();
        let clean = evaluate(&params, &ds.test, EvalAttack::None, 3).unwrap();
        let sweep = epsilon_sweep(&params, &ds.test, &AttackConfig::default(), &[0.0, 0.01], 3).unwrap();
        assert_eq!(sweep[0].report, clean);
        assert!(sweep[0].perturbation.is_none());
        let p = sweep[1].perturbation.unwrap();
        assert!(p.linf <= 0.01 + 1e-12);
        let zero = AttackConfig::default().with_epsilon(0.0);
        assert_eq!(evaluate(&params, &ds.test, EvalAttack::Pgd(&zero), 3).unwrap(), clean);
    }

    #[test]
    fn evaluation_pixel_count() {
        let ds = tiny_dataset();
        let params = ModelParams::init(&tiny_experiment(&ds).config.model).unwrap();
        let r = evaluate(&params, &ds.test, EvalAttack::None, 3).unwrap();
        assert_eq!(r.confusion.total(), 4 * 64);
        assert_eq!(r.samples, 4);
    }

    #[test]
    fn ablation_shape_and_cache_reuse() {
        let ds = tiny_dataset();
        let mut exp = tiny_experiment(&ds);
        let m = exp.run_ablation(&[1, 2, 3], 1.0).unwrap();
        assert_eq!(m.rows.len(), 4);
        assert!(m.rows.iter().all(|c| c.per_seed.len() == 3));
        assert_eq!(exp.trained_count(), 9);
        let sweep = exp.lambda_sweep(&[0.0, 1.0], &[1, 2, 3]).unwrap();
        assert_eq!(exp.trained_count(), 9);
        assert_eq!(sweep.points[0].per_seed, m.rows[2].per_seed);
        assert_eq!(sweep.points[1].per_seed, m.rows[3].per_seed);
        assert!(m.table().lines().count() == 5);
    }

    #[test]
    fn ablation_rejects_too_few_seeds() {
        let ds = tiny_dataset();
        let mut exp = tiny_experiment(&ds);
        let err = exp.run_ablation(&[1, 2], 1.0).unwrap_err();
        assert!(matches!(err.error, Error::Config(_)));
        assert!(exp.lambda_sweep(&[-1.0], &[1]).is_err());
    }

    #[test]
    fn ablation_is_deterministic() {
        let ds = tiny_dataset();
        let a = tiny_experiment(&ds).run_ablation(&[4, 5, 6], 0.1).unwrap();
        let b = tiny_experiment(&ds).run_ablation(&[4, 5, 6], 0.1).unwrap();
        assert_eq!(a, b);
    }
}
