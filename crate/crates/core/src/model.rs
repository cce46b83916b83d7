//! Toy hierarchical segmentation network.
//!
//! Encoder stage `i` merges non-overlapping 2×2 patches (space-to-depth),
//! projects to `stage_widths[i]`, applies GELU and then a token-mixing block:
//! a square linear map over the flattened spatial positions, added back to
//! its input. There are no positional encodings. The decoder projects every
//! stage to a common width, upsamples to half resolution, sums, applies GELU
//! and a per-pixel linear head, and finally upsamples to the input size.
//!
//! Internally features are laid out token-major, `[h, w, batch, channels]`,
//! so token mixing is a single `[N×N]·[N×(batch·channels)]` product.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Free space / not free space.
pub const NUM_CLASSES: usize = 2;
pub const CLASS_BLOCKED: u8 = 0;
pub const CLASS_FREE: u8 = 1;
/// Fixed input normalisation applied before the first stage.
pub const MAX_STAGES: usize = 6;
pub const MAX_SIDE: usize = 1024;
pub const MAX_WIDTH: usize = 1024;
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels_in: usize,
    pub stage_widths: Vec<usize>,
    pub decoder_width: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 32,
            width: 32,
            channels_in: 1,
            stage_widths: vec![8, 16, 32],
            decoder_width: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn stages(&self) -> usize {
        self.stage_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.stages();
        if stages < 2 {
            return Err(Error::Config(format!(
                "at least 2 encoder stages required, got {stages}"
            )));
        }
        if stages > MAX_STAGES {
            return Err(Error::Config(format!(
                "at most {MAX_STAGES} encoder stages supported, got {stages}"
            )));
        }
        if self.height > MAX_SIDE || self.width > MAX_SIDE {
            return Err(Error::Config(format!(
                "input size {}x{} exceeds {MAX_SIDE}",
                self.height, self.width
            )));
        }
        if self.stage_widths.iter().chain([&self.decoder_width]).any(|&w| w > MAX_WIDTH) {
            return Err(Error::Config(format!("widths are limited to {MAX_WIDTH}")));
        }
        let unit = 1usize << stages;
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(unit) || !self.width.is_multiple_of(unit)
        {
            return Err(Error::Config(format!(
                "input size {}x{} must be a positive multiple of {unit}",
                self.height, self.width
            )));
        }
        if !matches!(self.channels_in, 1 | 3) {
            return Err(Error::Config(format!(
                "channels_in must be 1 or 3, got {}",
                self.channels_in
            )));
        }
        if self.stage_widths.contains(&0) || self.decoder_width == 0 {
            return Err(Error::Config("widths must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size of encoder stage `i`'s output.
    pub fn stage_grid(&self, stage: usize) -> (usize, usize) {
        (self.height >> (stage + 1), self.width >> (stage + 1))
    }

    /// Name and shape of every parameter tensor, in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut layout = Vec::new();
        let mut prev = self.channels_in;
        for (i, &w) in self.stage_widths.iter().enumerate() {
            let (gh, gw) = self.stage_grid(i);
            layout.push((format!("encoder.{i}.proj.weight"), vec![4 * prev, w]));
            layout.push((format!("encoder.{i}.proj.bias"), vec![w]));
            layout.push((format!("encoder.{i}.mix.weight"), vec![gh * gw, gh * gw]));
            prev = w;
        }
        for (i, &w) in self.stage_widths.iter().enumerate() {
            layout.push((format!("decoder.{i}.weight"), vec![w, self.decoder_width]));
            layout.push((format!("decoder.{i}.bias"), vec![self.decoder_width]));
        }
        layout.push(("head.weight".into(), vec![self.decoder_width, NUM_CLASSES]));
        layout.push(("head.bias".into(), vec![NUM_CLASSES]));
        layout
    }

    pub fn param_count(&self) -> usize {
        self.param_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Model parameters θ together with the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<NamedTensor>,
}

/// Parameters registered on a tape, in the same order as
/// [`ModelParams::tensors`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Wraps caller-created leaves, in [`ModelParams::tensors`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        BoundParams { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[batch, H, W, 2]`.
    pub logits: Var,
    /// Per-stage encoder features, `[h_i, w_i, batch, stage_widths[i]]`.
    pub hidden: Vec<Var>,
}

impl ModelParams {
    /// Xavier-uniform weights, zero biases, deterministic in `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tensors = config
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                let tensor = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let n = shape[0] * shape[1];
                    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::new(shape, data).expect("layout shape")
                };
                NamedTensor { name, tensor }
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors, checking them against the
    /// layout implied by `config`.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<NamedTensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        if layout.len() != tensors.len() {
            return Err(Error::Format {
                what: "parameters",
                msg: format!("expected {} tensors, got {}", layout.len(), tensors.len()),
            });
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if *name != t.name || shape.as_slice() != t.tensor.shape() {
                return Err(Error::Format {
                    what: "parameters",
                    msg: format!(
                        "expected {name} {shape:?}, got {} {:?}",
                        t.name,
                        t.tensor.shape()
                    ),
                });
            }
            if !t.tensor.all_finite() {
                return Err(Error::Format {
                    what: "parameters",
                    msg: format!("{name} contains non-finite values"),
                });
            }
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &t.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors
            .iter_mut()
            .find(|t| t.name == name)
            .map(|t| &mut t.tensor)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.numel()).sum()
    }

    /// Registers every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.tensor.clone(), requires_grad))
                .collect(),
        }
    }

    /// Shape of an image batch accepted by [`forward`](Self::forward).
    pub fn batch_shape(&self, batch: usize) -> [usize; 4] {
        [
            batch,
            self.config.height,
            self.config.width,
            self.config.channels_in,
        ]
    }

    /// Forward pass over a `[batch, H, W, C]` (or single `[H, W, C]`) image.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, image: Var) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let shape = tape.shape(image).to_vec();
        let image = match shape.len() {
            3 => tape.reshape(image, &[1, shape[0], shape[1], shape[2]])?,
            _ => image,
        };
        let shape = tape.shape(image).to_vec();
        let batch = shape[0];
        if shape.len() != 4 || shape[1..] != [cfg.height, cfg.width, cfg.channels_in] {
            return Err(Error::dim("forward", &shape, &self.batch_shape(1)[1..]));
        }

        let shift = tape.constant(Tensor::scalar(-INPUT_MEAN));
        let image = tape.add(image, shift)?;
        let image = tape.scale(image, 1.0 / INPUT_STD)?;

        let stages = cfg.stages();
        let mut hidden = Vec::with_capacity(stages);
        let mut features = image;
        let mut channels = cfg.channels_in;
        for (i, &width) in cfg.stage_widths.iter().enumerate() {
            let (gh, gw) = cfg.stage_grid(i);
            let tokens = gh * gw;
            let index = if i == 0 {
                patch_merge_from_image(cfg.height, cfg.width, batch, channels)
            } else {
                patch_merge_from_tokens(gh * 2, gw * 2, batch, channels)
            };
            let merged = tape.gather(features, index, &[tokens * batch, 4 * channels])?;
            let w = bound.vars[3 * i];
            let b = bound.vars[3 * i + 1];
            let mix = bound.vars[3 * i + 2];
            let proj = tape.matmul(merged, w)?;
            let proj = tape.add(proj, b)?;
            let act = tape.gelu(proj)?;
            let flat = tape.reshape(act, &[tokens, batch * width])?;
            let mixed = tape.matmul(mix, flat)?;
            let out = tape.add(flat, mixed)?;
            let out = tape.reshape(out, &[gh, gw, batch, width])?;
            hidden.push(out);
            features = out;
            channels = width;
        }

        let (h0, w0) = cfg.stage_grid(0);
        let dw = cfg.decoder_width;
        let base = 3 * stages;
        let mut fused: Option<Var> = None;
        for (i, &width) in cfg.stage_widths.iter().enumerate() {
            let (gh, gw) = cfg.stage_grid(i);
            let rows = tape.reshape(hidden[i], &[gh * gw * batch, width])?;
            let p = tape.matmul(rows, bound.vars[base + 2 * i])?;
            let p = tape.add(p, bound.vars[base + 2 * i + 1])?;
            let up = if i == 0 {
                p
            } else {
                let index = upsample_tokens(gh, gw, 1 << i, batch, dw);
                tape.gather(p, index, &[h0 * w0 * batch, dw])?
            };
            fused = Some(match fused {
                None => up,
                Some(acc) => tape.add(acc, up)?,
            });
        }
        let fused = tape.gelu(fused.expect("at least two stages"))?;
        let head_w = bound.vars[base + 2 * stages];
        let head_b = bound.vars[base + 2 * stages + 1];
        let coarse = tape.matmul(fused, head_w)?;
        let coarse = tape.add(coarse, head_b)?;
        let index = upsample_to_image(h0, w0, batch, NUM_CLASSES);
        let logits = tape.gather(
            coarse,
            index,
            &[batch, cfg.height, cfg.width, NUM_CLASSES],
        )?;
        Ok(ForwardOutput { logits, hidden })
    }

    /// Logits for a batch without gradient tracking.
    pub fn infer(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<u8>> {
        Ok(predict_mask(&self.infer(images)?))
    }
}

/// Per-pixel argmax over the two class logits; ties go to the blocked class.
pub fn predict_mask(logits: &Tensor) -> Vec<u8> {
    logits
        .data()
        .chunks_exact(NUM_CLASSES)
        .map(|z| if z[1] > z[0] { CLASS_FREE } else { CLASS_BLOCKED })
        .collect()
}

// Image `[b, H, W, c]` → tokens `[r, q, b, (dy, dx, c)]`.
fn patch_merge_from_image(h: usize, w: usize, batch: usize, ch: usize) -> Arc<[usize]> {
    let mut index = Vec::with_capacity(h * w * batch * ch);
    for r in 0..h / 2 {
        for q in 0..w / 2 {
            for b in 0..batch {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let base = ((b * h + 2 * r + dy) * w + 2 * q + dx) * ch;
                        index.extend(base..base + ch);
                    }
                }
            }
        }
    }
    index.into()
}

// Tokens `[y, x, b, c]` on an h×w grid → `[r, q, b, (dy, dx, c)]`.
fn patch_merge_from_tokens(h: usize, w: usize, batch: usize, ch: usize) -> Arc<[usize]> {
    let mut index = Vec::with_capacity(h * w * batch * ch);
    for r in 0..h / 2 {
        for q in 0..w / 2 {
            for b in 0..batch {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let base = (((2 * r + dy) * w + 2 * q + dx) * batch + b) * ch;
                        index.extend(base..base + ch);
                    }
                }
            }
        }
    }
    index.into()
}

// Nearest-neighbour upsample of `[gh, gw, b, c]` by `factor` in both axes.
fn upsample_tokens(gh: usize, gw: usize, factor: usize, batch: usize, ch: usize) -> Arc<[usize]> {
    let (oh, ow) = (gh * factor, gw * factor);
    let mut index = Vec::with_capacity(oh * ow * batch * ch);
    for y in 0..oh {
        for x in 0..ow {
            for b in 0..batch {
                let base = (((y / factor) * gw + x / factor) * batch + b) * ch;
                index.extend(base..base + ch);
            }
        }
    }
    index.into()
}

// `[gh, gw, b, c]` → `[b, 2gh, 2gw, c]`.
fn upsample_to_image(gh: usize, gw: usize, batch: usize, ch: usize) -> Arc<[usize]> {
    let (oh, ow) = (gh * 2, gw * 2);
    let mut index = Vec::with_capacity(oh * ow * batch * ch);
    for b in 0..batch {
        for y in 0..oh {
            for x in 0..ow {
                let base = (((y / 2) * gw + x / 2) * batch + b) * ch;
                index.extend(base..base + ch);
            }
        }
    }
    index.into()
}
