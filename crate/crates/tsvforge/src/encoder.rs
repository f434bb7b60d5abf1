//! The representation encoder: per-timestamp input projection, timestamp
//! masking, a stack of causal dilated-convolution residual blocks with
//! exponentially growing dilation, and a 1×1 head producing the final
//! per-timestamp representation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Result, TsvError};
use crate::numerics::{GradTape, NodeId, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Channels of the raw series (D).
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub depth: usize,
    pub kernel_width: usize,
    pub mask_prob: f64,
}

impl EncoderConfig {
    pub fn new(input_dim: usize) -> Self {
        EncoderConfig {
            input_dim,
            hidden_dim: 64,
            output_dim: 320,
            depth: 10,
            kernel_width: 3,
            mask_prob: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.input_dim < 1 || self.hidden_dim < 1 || self.output_dim < 1 {
            return Err(TsvError::Config(
                "encoder dims and depth must be ≥ 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(TsvError::Config("mask_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Receptive field of the causal encoder in timesteps: each conv adds
    /// (W−1)·dilation of history and there are two convs per block.
    pub fn receptive_field(&self) -> usize {
        let per_block: usize = (0..self.depth)
            .map(|i| 2 * (self.kernel_width - 1) * (1usize << i))
            .sum();
        1 + per_block
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub conv1_kernel: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_kernel: Tensor,
    pub conv2_bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub proj_weight: Tensor, // [hidden × input]
    pub proj_bias: Tensor,   // [hidden]
    pub blocks: Vec<BlockParams>,
    pub head_kernel: Tensor, // [output × hidden × 1]
}

fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
}

impl EncoderParams {
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, o, w) = (
            config.input_dim,
            config.hidden_dim,
            config.output_dim,
            config.kernel_width,
        );
        let proj_weight = kaiming(&mut rng, &[h, d], d);
        let proj_bias = Tensor::zeros(&[h]);
        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                conv1_kernel: kaiming(&mut rng, &[h, h, w], h * w),
                conv1_bias: Tensor::zeros(&[h]),
                conv2_kernel: kaiming(&mut rng, &[h, h, w], h * w),
                conv2_bias: Tensor::zeros(&[h]),
            })
            .collect();
        let head_kernel = kaiming(&mut rng, &[o, h, 1], h);
        Ok(EncoderParams {
            proj_weight,
            proj_bias,
            blocks,
            head_kernel,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Named views in a stable order (checkpoint layout and optimizer slots).
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("proj_weight".to_string(), &self.proj_weight),
            ("proj_bias".to_string(), &self.proj_bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.conv1_kernel"), &b.conv1_kernel));
            out.push((format!("blocks.{i}.conv1_bias"), &b.conv1_bias));
            out.push((format!("blocks.{i}.conv2_kernel"), &b.conv2_kernel));
            out.push((format!("blocks.{i}.conv2_bias"), &b.conv2_bias));
        }
        out.push(("head_kernel".to_string(), &self.head_kernel));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.proj_weight, &mut self.proj_bias];
        for b in &mut self.blocks {
            out.push(&mut b.conv1_kernel);
            out.push(&mut b.conv1_bias);
            out.push(&mut b.conv2_kernel);
            out.push(&mut b.conv2_bias);
        }
        out.push(&mut self.head_kernel);
        out
    }

    pub fn to_checkpoint(&self, config: &EncoderConfig) -> Result<Checkpoint> {
        let meta = serde_json::json!({ "kind": "encoder", "config": config });
        let mut ckpt = Checkpoint::new(meta);
        for (name, t) in self.tensors() {
            ckpt.push(name, t.clone());
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, EncoderConfig)> {
        let config: EncoderConfig = serde_json::from_value(
            ckpt.meta
                .get("config")
                .cloned()
                .ok_or_else(|| TsvError::Data("encoder checkpoint missing config".into()))?,
        )?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            blocks.push(BlockParams {
                conv1_kernel: ckpt.get(&format!("blocks.{i}.conv1_kernel"))?.clone(),
                conv1_bias: ckpt.get(&format!("blocks.{i}.conv1_bias"))?.clone(),
                conv2_kernel: ckpt.get(&format!("blocks.{i}.conv2_kernel"))?.clone(),
                conv2_bias: ckpt.get(&format!("blocks.{i}.conv2_bias"))?.clone(),
            });
        }
        let params = EncoderParams {
            proj_weight: ckpt.get("proj_weight")?.clone(),
            proj_bias: ckpt.get("proj_bias")?.clone(),
            blocks,
            head_kernel: ckpt.get("head_kernel")?.clone(),
        };
        Ok((params, config))
    }

    /// Register every parameter as a tape leaf, in the same stable order as
    /// [`EncoderParams::tensors`].
    pub fn register(&self, tape: &mut GradTape) -> EncoderParamIds {
        EncoderParamIds {
            proj_weight: tape.leaf(self.proj_weight.clone()),
            proj_bias: tape.leaf(self.proj_bias.clone()),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParamIds {
                    conv1_kernel: tape.leaf(b.conv1_kernel.clone()),
                    conv1_bias: tape.leaf(b.conv1_bias.clone()),
                    conv2_kernel: tape.leaf(b.conv2_kernel.clone()),
                    conv2_bias: tape.leaf(b.conv2_bias.clone()),
                })
                .collect(),
            head_kernel: tape.leaf(self.head_kernel.clone()),
        }
    }
}

#[derive(Clone, Copy)]
pub struct BlockParamIds {
    pub conv1_kernel: NodeId,
    pub conv1_bias: NodeId,
    pub conv2_kernel: NodeId,
    pub conv2_bias: NodeId,
}

#[derive(Clone)]
pub struct EncoderParamIds {
    pub proj_weight: NodeId,
    pub proj_bias: NodeId,
    pub blocks: Vec<BlockParamIds>,
    pub head_kernel: NodeId,
}

impl EncoderParamIds {
    /// Flat list matching the order of [`EncoderParams::tensors`].
    pub fn flat(&self) -> Vec<NodeId> {
        let mut out = vec![self.proj_weight, self.proj_bias];
        for b in &self.blocks {
            out.push(b.conv1_kernel);
            out.push(b.conv1_bias);
            out.push(b.conv2_kernel);
            out.push(b.conv2_bias);
        }
        out.push(self.head_kernel);
        out
    }
}

/// Per-timestamp affine map of the raw series into latent space.
pub fn project_input(x: &Tensor, params: &EncoderParams) -> Result<Tensor> {
    if x.shape().len() != 2 || x.shape()[0] != params.proj_weight.shape()[1] {
        return Err(TsvError::Dimension(format!(
            "project_input: series {:?} vs proj_weight {:?}",
            x.shape(),
            params.proj_weight.shape()
        )));
    }
    let mut out = params.proj_weight.matmul(x)?;
    let (h, t) = (out.shape()[0], out.shape()[1]);
    for ch in 0..h {
        for j in 0..t {
            out.data_mut()[ch * t + j] += params.proj_bias.data()[ch];
        }
    }
    Ok(out)
}

/// Draw an i.i.d. Bernoulli(mask_prob) timestamp mask and zero the selected
/// columns. Deterministic given the seed.
pub fn mask_timestamps(latent: &Tensor, mask_prob: f64, rng_seed: u64) -> (Tensor, Vec<bool>) {
    let t = latent.shape()[1];
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mask = draw_mask(t, mask_prob, &mut rng);
    let mut out = latent.clone();
    let c = latent.shape()[0];
    for ch in 0..c {
        for (j, &m) in mask.iter().enumerate() {
            if m {
                out.data_mut()[ch * t + j] = 0.0;
            }
        }
    }
    (out, mask)
}

pub(crate) fn draw_mask(t: usize, mask_prob: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..t).map(|_| rng.gen::<f64>() < mask_prob).collect()
}

/// Tape-recorded encoder forward pass. `mask` zeroes latent columns after
/// the projection (training-time augmentation); pass None for inference.
pub fn encode_on_tape(
    tape: &mut GradTape,
    x: NodeId,
    ids: &EncoderParamIds,
    mask: Option<&[bool]>,
) -> Result<NodeId> {
    let proj = tape.matmul(ids.proj_weight, x)?;
    let mut u = tape.bias_add_cols(proj, ids.proj_bias)?;
    if let Some(m) = mask {
        u = tape.mask_cols(u, m)?;
    }
    for (i, b) in ids.blocks.iter().enumerate() {
        let dilation = 1usize << i;
        let c1 = tape.conv1d(u, b.conv1_kernel, dilation, true)?;
        let c1b = tape.bias_add_cols(c1, b.conv1_bias)?;
        let g = tape.gelu(c1b);
        let c2 = tape.conv1d(g, b.conv2_kernel, dilation, true)?;
        let c2b = tape.bias_add_cols(c2, b.conv2_bias)?;
        u = tape.add(u, c2b)?;
    }
    tape.conv1d(u, ids.head_kernel, 1, true)
}

/// Encode one series [D × T] into [output_dim × T]. With `training`, a fresh
/// Bernoulli mask drawn from `rng_seed` is applied after the projection.
pub fn encode(
    x: &Tensor,
    params: &EncoderParams,
    config: &EncoderConfig,
    training: bool,
    rng_seed: u64,
) -> Result<Tensor> {
    let mask = if training {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        Some(draw_mask(x.shape()[1], config.mask_prob, &mut rng))
    } else {
        None
    };
    let mut tape = GradTape::new();
    let ids = params.register(&mut tape);
    let x_id = tape.leaf(x.clone());
    let out = encode_on_tape(&mut tape, x_id, &ids, mask.as_deref())?;
    Ok(tape.value(out).clone())
}

/// Inference-time causal encoding: left-pad the series with `pad` zero
/// timesteps, encode without masking, drop the first `pad` output columns.
pub fn encode_causal_padded(
    full_series: &Tensor,
    params: &EncoderParams,
    config: &EncoderConfig,
    pad: usize,
) -> Result<Tensor> {
    let (d, t) = (full_series.shape()[0], full_series.shape()[1]);
    let mut padded = Tensor::zeros(&[d, t + pad]);
    for ch in 0..d {
        for j in 0..t {
            padded.data_mut()[ch * (t + pad) + pad + j] = full_series.data()[ch * t + j];
        }
    }
    let reps = encode(&padded, params, config, false, 0)?;
    let o = reps.shape()[0];
    let mut out = Tensor::zeros(&[o, t]);
    for ch in 0..o {
        for j in 0..t {
            out.data_mut()[ch * t + j] = reps.data()[ch * (t + pad) + pad + j];
        }
    }
    Ok(out)
}
