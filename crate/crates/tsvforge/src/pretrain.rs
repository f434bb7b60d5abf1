//! Contrastive pretraining loop: overlapping-crop view pairs, per-view
//! timestamp masking, the hierarchical loss, an optional masked-signal
//! reconstruction branch, and Adam.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{draw_mask, encode_on_tape, EncoderConfig, EncoderParams};
use crate::error::{Result, TsvError};
use crate::numerics::{GradTape, NodeId, Tensor};
use crate::objectives::{hierarchical_loss_on_tape, lambda_schedule, MsmConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub n_iters: usize,
    pub seed: u64,
    /// Enables the reconstruction branch when present.
    pub msm: Option<MsmConfig>,
    /// Training windows are capped at this many timesteps.
    pub max_train_length: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 0.001,
            batch_size: 8,
            n_iters: 200,
            seed: 0,
            msm: None,
            max_train_length: 3000,
        }
    }
}

/// One overlapping crop pair: view 1 spans [a1, b1), view 2 spans [a2, b2),
/// with a1 ≤ a2 < b1 ≤ b2 so the overlap is [a2, b1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub a1: usize,
    pub a2: usize,
    pub b1: usize,
    pub b2: usize,
}

impl Crop {
    pub fn overlap_len(&self) -> usize {
        self.b1 - self.a2
    }
}

/// Sample a crop pair over a window of length `t` (t ≥ 2): first the overlap
/// [a2, b1) of length ≥ 2, then independent left/right extensions.
pub fn sample_crops(t: usize, rng: &mut ChaCha8Rng) -> Result<Crop> {
    if t < 2 {
        return Err(TsvError::Contract(format!(
            "sample_crops needs a window of ≥ 2 timesteps, got {t}"
        )));
    }
    let overlap = rng.gen_range(2..=t);
    let a2 = rng.gen_range(0..=t - overlap);
    let b1 = a2 + overlap;
    let a1 = rng.gen_range(0..=a2);
    let b2 = rng.gen_range(b1..=t);
    Ok(Crop { a1, a2, b1, b2 })
}

/// Per-timestamp MLP decoder mapping representations back to the raw series
/// space, with GELU between layers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderParams {
    /// (weight [d_out × d_in], bias [d_out]) per layer.
    pub layers: Vec<(Tensor, Tensor)>,
}

impl DecoderParams {
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(TsvError::Config("decoder needs ≥ 2 dims".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            let (d_in, d_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / d_in as f64).sqrt()).unwrap();
            let weight = Tensor::new(
                vec![d_out, d_in],
                (0..d_out * d_in).map(|_| normal.sample(&mut rng)).collect(),
            )?;
            layers.push((weight, Tensor::zeros(&[d_out])));
        }
        Ok(DecoderParams { layers })
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn register(&self, tape: &mut GradTape) -> Vec<(NodeId, NodeId)> {
        self.layers
            .iter()
            .map(|(w, b)| (tape.leaf(w.clone()), tape.leaf(b.clone())))
            .collect()
    }
}

/// Tape-recorded decoder pass over a [C × T] representation.
pub fn decode_on_tape(
    tape: &mut GradTape,
    h: NodeId,
    ids: &[(NodeId, NodeId)],
) -> Result<NodeId> {
    let mut u = h;
    for (i, &(w, b)) in ids.iter().enumerate() {
        let m = tape.matmul(w, u)?;
        u = tape.bias_add_cols(m, b)?;
        if i + 1 < ids.len() {
            u = tape.gelu(u);
        }
    }
    Ok(u)
}

/// Adam with bias correction, one moment pair per parameter tensor.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[Vec<usize>]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TsvError::Contract(format!(
                "adam expects {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..g.len() {
                let gi = g.data()[i];
                m.data_mut()[i] = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                v.data_mut()[i] = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m.data()[i] / bc1;
                let v_hat = v.data()[i] / bc2;
                p.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub lambda: f64,
}

pub struct PretrainOutput {
    pub params: EncoderParams,
    pub decoder: Option<DecoderParams>,
    pub log: Vec<LogEntry>,
}

struct StepState {
    params: EncoderParams,
    decoder: Option<DecoderParams>,
    adam: Adam,
}

/// One optimization step over a batch of [D × t] windows sharing a crop pair.
/// Returns the combined loss value before the update.
fn train_step(
    state: &mut StepState,
    windows: &[Tensor],
    crop: Crop,
    enc_cfg: &EncoderConfig,
    lambda: f64,
    msm: bool,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = GradTape::new();
    let enc_ids = state.params.register(&mut tape);
    let dec_ids = state.decoder.as_ref().map(|d| d.register(&mut tape));

    let mut views_a = Vec::with_capacity(windows.len());
    let mut views_b = Vec::with_capacity(windows.len());
    let mut msm_terms: Vec<NodeId> = Vec::new();
    for window in windows {
        let t = window.shape()[1];
        let d = window.shape()[0];
        let slice = |lo: usize, hi: usize| -> Result<Tensor> {
            let mut v = Tensor::zeros(&[d, hi - lo]);
            for ch in 0..d {
                for j in lo..hi {
                    v.data_mut()[ch * (hi - lo) + (j - lo)] = window.data()[ch * t + j];
                }
            }
            Ok(v)
        };
        let x1 = tape.leaf(slice(crop.a1, crop.b1)?);
        let x2 = tape.leaf(slice(crop.a2, crop.b2)?);
        let mask1 = draw_mask(crop.b1 - crop.a1, enc_cfg.mask_prob, rng);
        let mask2 = draw_mask(crop.b2 - crop.a2, enc_cfg.mask_prob, rng);
        let r1 = encode_on_tape(&mut tape, x1, &enc_ids, Some(&mask1))?;
        let r2 = encode_on_tape(&mut tape, x2, &enc_ids, Some(&mask2))?;
        // overlap [a2, b1) inside each view's local coordinates
        let o1 = tape.slice_cols(r1, crop.a2 - crop.a1, crop.b1 - crop.a1)?;
        let o2 = tape.slice_cols(r2, 0, crop.b1 - crop.a2)?;
        views_a.push(o1);
        views_b.push(o2);
        if msm {
            let ids = dec_ids.as_ref().unwrap();
            let recon = decode_on_tape(&mut tape, r1, ids)?;
            msm_terms.push(tape.masked_mse(recon, x1, &mask1)?);
        }
    }
    let r = tape.stack_views(&views_a)?;
    let rp = tape.stack_views(&views_b)?;
    let contrastive = hierarchical_loss_on_tape(&mut tape, r, rp)?;

    let loss = if msm {
        let mut acc = msm_terms[0];
        for &term in &msm_terms[1..] {
            acc = tape.add(acc, term)?;
        }
        let msm_mean = tape.scale(acc, 1.0 / msm_terms.len() as f64);
        tape.lin_comb2(1.0 - lambda, contrastive, lambda, msm_mean)?
    } else {
        contrastive
    };

    let loss_value = tape.value(loss).scalar_value();
    if !loss_value.is_finite() {
        return Err(TsvError::Numeric(format!(
            "pretraining diverged: non-finite loss {loss_value}"
        )));
    }

    let grads = tape.backward(loss)?;
    let mut ids: Vec<NodeId> = enc_ids.flat();
    if let Some(d) = &dec_ids {
        for &(w, b) in d {
            ids.push(w);
            ids.push(b);
        }
    }
    let grad_tensors: Vec<Tensor> = ids.iter().map(|&id| grads.get(id)).collect();
    let mut tensors = state.params.tensors_mut();
    if let Some(d) = state.decoder.as_mut() {
        tensors.extend(d.tensors_mut());
    }
    state.adam.update(tensors, &grad_tensors)?;
    Ok(loss_value)
}

/// Pretrain an encoder on the train split of `dataset`. Only columns before
/// `train_end` are ever read; an unsplit dataset trains on the whole series.
pub fn pretrain(
    dataset: &crate::data::SeriesDataset,
    enc_cfg: &EncoderConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainOutput> {
    enc_cfg.validate()?;
    if let Some(m) = &cfg.msm {
        m.validate()?;
        if m.decoder_dims[0] != enc_cfg.output_dim
            || *m.decoder_dims.last().unwrap() != enc_cfg.input_dim
        {
            return Err(TsvError::Config(format!(
                "decoder dims {:?} do not bridge output {} to input {}",
                m.decoder_dims, enc_cfg.output_dim, enc_cfg.input_dim
            )));
        }
    }
    let full = dataset.input_values()?;
    let train_end = match dataset.splits {
        Some(_) => dataset.train_end()?,
        None => full.shape()[1],
    };
    let d = full.shape()[0];
    let mut train = Tensor::zeros(&[d, train_end]);
    for ch in 0..d {
        for j in 0..train_end {
            train.data_mut()[ch * train_end + j] = full.data()[ch * full.shape()[1] + j];
        }
    }
    if !train.all_finite() {
        return Err(TsvError::Data("train split contains non-finite values".into()));
    }
    let window_len = cfg.max_train_length.min(train_end);
    if window_len < 2 {
        return Err(TsvError::Contract(
            "pretrain needs ≥ 2 train timesteps".into(),
        ));
    }
    if cfg.batch_size == 0 || cfg.n_iters == 0 {
        return Err(TsvError::Config(
            "batch_size and n_iters must be positive".into(),
        ));
    }

    let params = EncoderParams::init(enc_cfg, cfg.seed)?;
    let decoder = match &cfg.msm {
        Some(m) => Some(DecoderParams::init(&m.decoder_dims, cfg.seed ^ 0x5eed)?),
        None => None,
    };
    let mut shapes: Vec<Vec<usize>> = params
        .tensors()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    if let Some(dec) = &decoder {
        for (w, b) in &dec.layers {
            shapes.push(w.shape().to_vec());
            shapes.push(b.shape().to_vec());
        }
    }
    let mut state = StepState {
        params,
        decoder,
        adam: Adam::new(cfg.lr, &shapes),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.n_iters);
    for step in 0..cfg.n_iters {
        let windows: Vec<Tensor> = (0..cfg.batch_size)
            .map(|_| {
                let start = rng.gen_range(0..=train_end - window_len);
                let mut w = Tensor::zeros(&[d, window_len]);
                for ch in 0..d {
                    for j in 0..window_len {
                        w.data_mut()[ch * window_len + j] =
                            train.data()[ch * train_end + start + j];
                    }
                }
                w
            })
            .collect();
        let crop = sample_crops(window_len, &mut rng)?;
        let lambda = match &cfg.msm {
            Some(m) => lambda_schedule(step, cfg.n_iters, m),
            None => 0.0,
        };
        let loss = train_step(
            &mut state,
            &windows,
            crop,
            enc_cfg,
            lambda,
            cfg.msm.is_some(),
            &mut rng,
        )?;
        log.push(LogEntry { step, loss, lambda });
    }
    if !state.params.all_finite() {
        return Err(TsvError::Numeric(
            "pretraining produced non-finite parameters".into(),
        ));
    }
    Ok(PretrainOutput {
        params: state.params,
        decoder: state.decoder,
        log,
    })
}
