//! Training losses: temporal and instance-wise contrastive terms, their
//! dual combination, hierarchical aggregation over max-pooled scales, and
//! the masked-signal-modeling branch with its warm-up schedule.

pub(crate) mod kernels;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TsvError};
use crate::numerics::{GradTape, NodeId, Tensor};

/// Representations of the two augmented views on their overlap, shaped
/// [B × T_overlap × C].
#[derive(Clone, Debug)]
pub struct ViewPair {
    pub r: Tensor,
    pub r_prime: Tensor,
}

impl ViewPair {
    pub fn new(r: Tensor, r_prime: Tensor) -> Result<Self> {
        if r.shape().len() != 3 || r.shape() != r_prime.shape() {
            return Err(TsvError::Dimension(format!(
                "view pair needs matching [B × T × C] shapes, got {:?} vs {:?}",
                r.shape(),
                r_prime.shape()
            )));
        }
        if r.shape()[0] < 1 || r.shape()[1] < 1 {
            return Err(TsvError::Contract(
                "view pair needs B ≥ 1 and T_overlap ≥ 1".into(),
            ));
        }
        Ok(ViewPair { r, r_prime })
    }

    pub fn batch(&self) -> usize {
        self.r.shape()[0]
    }

    pub fn overlap_len(&self) -> usize {
        self.r.shape()[1]
    }
}

/// Configuration of the masked-signal-modeling branch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MsmConfig {
    /// Final weight of the reconstruction term, in [0, 1].
    pub lambda_max: f64,
    /// Fraction of total iterations over which λ ramps up linearly.
    pub warmup_fraction: f64,
    /// Per-timestamp decoder widths, input to output. The last entry is the
    /// raw series dimension D.
    pub decoder_dims: Vec<usize>,
}

impl MsmConfig {
    pub fn with_input_dim(input_dim: usize, output_dim: usize) -> Self {
        MsmConfig {
            lambda_max: 0.5,
            warmup_fraction: 0.5,
            decoder_dims: vec![output_dim, 128, 64, input_dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_max) {
            return Err(TsvError::Config("lambda_max must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(TsvError::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        if self.decoder_dims.len() < 2 {
            return Err(TsvError::Config("decoder needs ≥ 2 dims".into()));
        }
        Ok(())
    }
}

pub fn temporal_loss(pair: &ViewPair) -> Result<f64> {
    Ok(kernels::temporal_loss_grad(&pair.r, &pair.r_prime, false)?.0)
}

pub fn instance_loss(pair: &ViewPair) -> Result<f64> {
    Ok(kernels::instance_loss_grad(&pair.r, &pair.r_prime, false)?.0)
}

pub fn dual_loss(pair: &ViewPair) -> Result<f64> {
    Ok(temporal_loss(pair)? + instance_loss(pair)?)
}

/// Dual loss summed over successively max-pooled (width 2) time scales,
/// divided by the number of levels. The final T=1 level contributes the
/// instance term only.
pub fn hierarchical_loss(pair: &ViewPair) -> Result<f64> {
    let mut tape = GradTape::new();
    let r = tape.leaf(pair.r.clone());
    let rp = tape.leaf(pair.r_prime.clone());
    let node = hierarchical_loss_on_tape(&mut tape, r, rp)?;
    Ok(tape.value(node).scalar_value())
}

/// Tape-recorded hierarchical loss, for use inside the training step.
pub fn hierarchical_loss_on_tape(
    tape: &mut GradTape,
    mut r: NodeId,
    mut rp: NodeId,
) -> Result<NodeId> {
    let mut terms: Vec<NodeId> = Vec::new();
    loop {
        let t = tape.value(r).shape()[1];
        if t > 1 {
            let tl = tape.temporal_loss(r, rp)?;
            let il = tape.instance_loss(r, rp)?;
            terms.push(tape.add(tl, il)?);
            r = tape.maxpool_btc(r, 2)?;
            rp = tape.maxpool_btc(rp, 2)?;
        } else {
            terms.push(tape.instance_loss(r, rp)?);
            break;
        }
    }
    let n = terms.len() as f64;
    let mut acc = terms[0];
    for &term in &terms[1..] {
        acc = tape.add(acc, term)?;
    }
    Ok(tape.scale(acc, 1.0 / n))
}

/// Number of levels the hierarchical loss visits for an overlap of length T.
pub fn hierarchical_levels(mut t: usize) -> usize {
    let mut levels = 1;
    while t > 1 {
        t = t.div_ceil(2);
        levels += 1;
    }
    levels
}

/// Reconstruction MSE over masked columns only; 0 when nothing was masked.
pub fn msm_loss(original: &Tensor, reconstruction: &Tensor, mask: &[bool]) -> Result<f64> {
    if original.shape() != reconstruction.shape()
        || original.shape().len() != 2
        || original.shape()[1] != mask.len()
    {
        return Err(TsvError::Dimension(format!(
            "msm_loss shapes {:?} vs {:?}, mask length {}",
            original.shape(),
            reconstruction.shape(),
            mask.len()
        )));
    }
    Ok(crate::numerics::masked_mse_value(
        reconstruction,
        original,
        mask,
    ))
}

/// (1−λ)·contrastive + λ·msm.
pub fn combined_loss(contrastive: f64, msm: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(TsvError::Contract(format!("λ = {lambda} out of [0, 1]")));
    }
    Ok((1.0 - lambda) * contrastive + lambda * msm)
}

/// Linear warm-up: 0 at iteration 0 up to lambda_max at
/// warmup_fraction·total_iters, constant afterwards.
pub fn lambda_schedule(iter: usize, total_iters: usize, cfg: &MsmConfig) -> f64 {
    let warm_end = cfg.warmup_fraction * total_iters as f64;
    if warm_end <= 0.0 {
        return cfg.lambda_max;
    }
    let frac = (iter as f64 / warm_end).min(1.0);
    frac * cfg.lambda_max
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_pair(rng: &mut ChaCha8Rng, b: usize, t: usize, c: usize) -> ViewPair {
        let gen = |rng: &mut ChaCha8Rng| {
            Tensor::new(
                vec![b, t, c],
                (0..b * t * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        ViewPair::new(gen(rng), gen(rng)).unwrap()
    }

    /// Triple-nested-loop transcription of the temporal loss.
    fn temporal_oracle(pair: &ViewPair) -> f64 {
        let (b, t, c) = (
            pair.r.shape()[0],
            pair.r.shape()[1],
            pair.r.shape()[2],
        );
        let dot = |x: &Tensor, i: usize, ti: usize, y: &Tensor, tj: usize| -> f64 {
            (0..c).map(|ch| x.at3(i, ti, ch) * y.at3(i, tj, ch)).sum()
        };
        let mut total = 0.0;
        for i in 0..b {
            for ti in 0..t {
                let num = dot(&pair.r, i, ti, &pair.r_prime, ti).exp();
                let mut den = 0.0;
                for tp in 0..t {
                    den += dot(&pair.r, i, ti, &pair.r_prime, tp).exp();
                    if tp != ti {
                        den += dot(&pair.r, i, ti, &pair.r, tp).exp();
                    }
                }
                total += -(num / den).ln();
            }
        }
        total / (b * t) as f64
    }

    /// Triple-nested-loop transcription of the instance-wise loss.
    fn instance_oracle(pair: &ViewPair) -> f64 {
        let (b, t, c) = (
            pair.r.shape()[0],
            pair.r.shape()[1],
            pair.r.shape()[2],
        );
        let dot = |i: usize, ti: usize, y: &Tensor, j: usize| -> f64 {
            (0..c)
                .map(|ch| pair.r.at3(i, ti, ch) * y.at3(j, ti, ch))
                .sum()
        };
        let mut total = 0.0;
        for i in 0..b {
            for ti in 0..t {
                let num = dot(i, ti, &pair.r_prime, i).exp();
                let mut den = 0.0;
                for j in 0..b {
                    den += dot(i, ti, &pair.r_prime, j).exp();
                    if j != i {
                        den += dot(i, ti, &pair.r, j).exp();
                    }
                }
                total += -(num / den).ln();
            }
        }
        total / (b * t) as f64
    }

    #[test]
    fn temporal_loss_collapses_at_single_timestamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pair = random_pair(&mut rng, 3, 1, 4);
        assert!(temporal_loss(&pair).unwrap().abs() < 1e-12);
    }

    #[test]
    fn instance_loss_collapses_at_single_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pair = random_pair(&mut rng, 1, 5, 4);
        assert!(instance_loss(&pair).unwrap().abs() < 1e-12);
    }

    #[test]
    fn temporal_loss_hand_computation_b1_t2() {
        // 2-dim vectors, B=1, T=2: direct evaluation of the loss formula.
        let r = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let rp = Tensor::new(vec![1, 2, 2], vec![0.5, 0.5, -0.5, 1.0]).unwrap();
        let pair = ViewPair::new(r, rp).unwrap();
        // t=0: num=exp(0.5); den=exp(0.5)+exp(-0.5)+exp(0)
        //   cross: r₀·r'₀ = 0.5, r₀·r'₁ = −0.5; self negative: r₀·r₁ = 0
        // t=1: num=exp(1.0); den=exp(0.5)+exp(1.0)+exp(0)
        //   cross: r₁·r'₀ = 0.5, r₁·r'₁ = 1.0; self negative: r₁·r₀ = 0
        let l0 = -(0.5f64.exp() / (0.5f64.exp() + (-0.5f64).exp() + 1.0)).ln();
        let l1 = -(1.0f64.exp() / (0.5f64.exp() + 1.0f64.exp() + 1.0)).ln();
        let expect = (l0 + l1) / 2.0;
        assert!((temporal_loss(&pair).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn temporal_loss_decreases_with_separation_scale() {
        // r = r' with scaled one-hot timestamp embeddings: larger scale makes
        // the positive dominate.
        let mut prev = f64::INFINITY;
        for scale in [1.0, 5.0, 10.0] {
            let mut data = vec![0.0; 3 * 3];
            for t in 0..3 {
                data[t * 3 + t] = scale;
            }
            let r = Tensor::new(vec![1, 3, 3], data).unwrap();
            let pair = ViewPair::new(r.clone(), r).unwrap();
            let loss = temporal_loss(&pair).unwrap();
            assert!(loss < prev, "loss should decrease in the scale");
            prev = loss;
        }
        assert!(prev < 0.1);
    }

    #[test]
    fn instance_loss_closed_form_orthogonal_pair() {
        // B=2, T=1, orthogonal unit vectors per instance, r = r':
        // per-term loss is −ln(e / (e + 2)).
        let r = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let pair = ViewPair::new(r.clone(), r).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((instance_loss(&pair).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn losses_match_brute_force_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let b = rng.gen_range(1..=4);
            let t = rng.gen_range(1..=4);
            let c = rng.gen_range(1..=4);
            let pair = random_pair(&mut rng, b, t, c);
            let tl = temporal_loss(&pair).unwrap();
            let il = instance_loss(&pair).unwrap();
            assert!((tl - temporal_oracle(&pair)).abs() < 1e-12);
            assert!((il - instance_oracle(&pair)).abs() < 1e-12);
            assert!((dual_loss(&pair).unwrap() - (tl + il)).abs() < 1e-12);
            assert!(tl >= -1e-12 && il >= -1e-12);
        }
    }

    #[test]
    fn instance_loss_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pair = random_pair(&mut rng, 4, 3, 5);
        let base = instance_loss(&pair).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permute = |x: &Tensor| {
            let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut out = Tensor::zeros(&[b, t, c]);
            for (dst, &src) in perm.iter().enumerate() {
                for ti in 0..t {
                    for ch in 0..c {
                        out.data_mut()[(dst * t + ti) * c + ch] = x.at3(src, ti, ch);
                    }
                }
            }
            out
        };
        let permuted = ViewPair::new(permute(&pair.r), permute(&pair.r_prime)).unwrap();
        assert!((instance_loss(&permuted).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn hierarchical_level_counts() {
        assert_eq!(hierarchical_levels(1), 1);
        assert_eq!(hierarchical_levels(2), 2);
        assert_eq!(hierarchical_levels(8), 4);
        // ceil(log2(T)) + 1 for powers of two
        for k in 0..6 {
            assert_eq!(hierarchical_levels(1 << k), k + 1);
        }
    }

    #[test]
    fn hierarchical_t1_is_instance_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pair = random_pair(&mut rng, 3, 1, 4);
        let h = hierarchical_loss(&pair).unwrap();
        assert!((h - instance_loss(&pair).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn hierarchical_t2_two_level_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pair = random_pair(&mut rng, 2, 2, 3);
        let h = hierarchical_loss(&pair).unwrap();
        // manual expansion: dual at T=2, instance at pooled T=1, halved
        let pool = |x: &Tensor| {
            let (b, c) = (x.shape()[0], x.shape()[2]);
            let mut out = Tensor::zeros(&[b, 1, c]);
            for i in 0..b {
                for ch in 0..c {
                    out.data_mut()[i * c + ch] = x.at3(i, 0, ch).max(x.at3(i, 1, ch));
                }
            }
            out
        };
        let pooled = ViewPair::new(pool(&pair.r), pool(&pair.r_prime)).unwrap();
        let expect = (dual_loss(&pair).unwrap() + instance_loss(&pooled).unwrap()) / 2.0;
        assert!((h - expect).abs() < 1e-12);
    }

    #[test]
    fn msm_loss_examples() {
        let orig = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let recon = Tensor::from_rows(&[vec![1.0, 4.0]]);
        assert_eq!(msm_loss(&orig, &orig, &[true, true]).unwrap(), 0.0);
        assert_eq!(msm_loss(&orig, &recon, &[false, false]).unwrap(), 0.0);
        assert_eq!(msm_loss(&orig, &recon, &[false, true]).unwrap(), 4.0);
        assert!(msm_loss(&orig, &Tensor::from_rows(&[vec![1.0]]), &[true]).is_err());
    }

    #[test]
    fn combined_loss_endpoints_and_midpoint() {
        assert_eq!(combined_loss(2.0, 4.0, 0.0).unwrap(), 2.0);
        assert_eq!(combined_loss(2.0, 4.0, 1.0).unwrap(), 4.0);
        assert_eq!(combined_loss(2.0, 4.0, 0.25).unwrap(), 2.5);
        assert!(combined_loss(1.0, 1.0, 1.5).is_err());
        assert!(combined_loss(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn lambda_schedule_linear_ramp() {
        let cfg = MsmConfig {
            lambda_max: 0.5,
            warmup_fraction: 0.5,
            decoder_dims: vec![320, 128, 64, 1],
        };
        assert_eq!(lambda_schedule(0, 100, &cfg), 0.0);
        assert!((lambda_schedule(25, 100, &cfg) - 0.25).abs() < 1e-12);
        assert_eq!(lambda_schedule(50, 100, &cfg), 0.5);
        assert_eq!(lambda_schedule(100, 100, &cfg), 0.5);
    }
}
