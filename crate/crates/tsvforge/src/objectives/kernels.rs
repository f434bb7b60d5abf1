//! Raw value-and-gradient kernels for the contrastive losses.
//!
//! Inputs are representation pairs shaped [B × T × C] (instances ×
//! overlap timestamps × channels). Dot products are clamped to
//! [−CLAMP, CLAMP] before exponentiation; the gradient is cut where the
//! clamp saturates.

use crate::error::{Result, TsvError};
use crate::numerics::Tensor;

pub(crate) const DOT_CLAMP: f64 = 50.0;

#[inline]
fn clamp_dot(s: f64) -> (f64, f64) {
    // (clamped value, gradient pass-through factor)
    if s > DOT_CLAMP {
        (DOT_CLAMP, 0.0)
    } else if s < -DOT_CLAMP {
        (-DOT_CLAMP, 0.0)
    } else {
        (s, 1.0)
    }
}

fn check_pair(r: &Tensor, rp: &Tensor) -> Result<(usize, usize, usize)> {
    if r.shape().len() != 3 || r.shape() != rp.shape() {
        return Err(TsvError::Dimension(format!(
            "loss expects matching [B × T × C] pairs, got {:?} vs {:?}",
            r.shape(),
            rp.shape()
        )));
    }
    let (b, t, c) = (r.shape()[0], r.shape()[1], r.shape()[2]);
    if b < 1 || t < 1 {
        return Err(TsvError::Contract("loss needs B ≥ 1 and T ≥ 1".into()));
    }
    Ok((b, t, c))
}

/// View of instance `i` of a [B × T × C] tensor as a [T × C] matrix.
fn instance_matrix(x: &Tensor, i: usize) -> Tensor {
    let (t, c) = (x.shape()[1], x.shape()[2]);
    let start = i * t * c;
    Tensor::new(vec![t, c], x.data()[start..start + t * c].to_vec()).unwrap()
}

fn add_instance_grad(acc: &mut Tensor, i: usize, g: &Tensor) {
    let (t, c) = (acc.shape()[1], acc.shape()[2]);
    let start = i * t * c;
    for (dst, src) in acc.data_mut()[start..start + t * c].iter_mut().zip(g.data()) {
        *dst += *src;
    }
}

/// Shared softmax-style accumulation over one similarity pair.
///
/// `s_cross[k][l] = a_k · b_l` where the positive sits on the diagonal and
/// `s_self[k][l] = a_k · a_l` supplies the extra negatives (diagonal
/// excluded). Returns the summed loss over rows; when grads are requested,
/// fills A1/A2 with d(sum·norm)/d(dot) entries.
fn contrast_block(
    s_cross: &Tensor,
    s_self: &Tensor,
    n: usize,
    norm: f64,
    mut grads: Option<(&mut Tensor, &mut Tensor)>,
) -> f64 {
    let mut total = 0.0;
    for k in 0..n {
        let mut den = 0.0;
        for l in 0..n {
            den += clamp_dot(s_cross.at2(k, l)).0.exp();
            if l != k {
                den += clamp_dot(s_self.at2(k, l)).0.exp();
            }
        }
        let (pos, _) = clamp_dot(s_cross.at2(k, k));
        total += -pos + den.ln();
        if let Some((a1, a2)) = grads.as_mut() {
            for l in 0..n {
                let (sc, pass_c) = clamp_dot(s_cross.at2(k, l));
                let mut g = sc.exp() / den;
                if l == k {
                    g -= 1.0;
                }
                a1.set2(k, l, g * pass_c * norm);
                if l != k {
                    let (ss, pass_s) = clamp_dot(s_self.at2(k, l));
                    a2.set2(k, l, ss.exp() / den * pass_s * norm);
                }
            }
        }
    }
    total
}

/// dA = A1·B + (A2 + A2ᵀ)·A and dB = A1ᵀ·A for a contrast block over rows of
/// A [n × C] against B [n × C].
fn contrast_block_grads(
    a1: &Tensor,
    a2: &Tensor,
    a: &Tensor,
    b: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut da = a1.matmul(b)?;
    da.axpy(1.0, &a2.matmul(a)?);
    da.axpy(1.0, &Tensor::matmul_ex(a2, true, a, false)?);
    let db = Tensor::matmul_ex(a1, true, a, false)?;
    Ok((da, db))
}

/// Temporal contrastive loss: for each instance, the positive is the same
/// timestamp in the other view; negatives are all other timestamps of the
/// overlap, from both views. Returns the mean loss and, when requested,
/// (dL/dr, dL/dr').
pub(crate) fn temporal_loss_grad(
    r: &Tensor,
    rp: &Tensor,
    with_grad: bool,
) -> Result<(f64, Option<(Tensor, Tensor)>)> {
    let (b, t, _c) = check_pair(r, rp)?;
    let norm = 1.0 / (b as f64 * t as f64);
    let mut total = 0.0;
    let mut d_r = with_grad.then(|| Tensor::zeros(r.shape()));
    let mut d_rp = with_grad.then(|| Tensor::zeros(rp.shape()));

    for i in 0..b {
        let ri = instance_matrix(r, i); // [T × C]
        let rpi = instance_matrix(rp, i);
        let s_cross = ri.matmul_t(&rpi)?; // [T × T], r_t · r'_{t'}
        let s_self = ri.matmul_t(&ri)?;

        if with_grad {
            let mut a1 = Tensor::zeros(&[t, t]);
            let mut a2 = Tensor::zeros(&[t, t]);
            total += contrast_block(&s_cross, &s_self, t, norm, Some((&mut a1, &mut a2)));
            let (d_ri, d_rpi) = contrast_block_grads(&a1, &a2, &ri, &rpi)?;
            add_instance_grad(d_r.as_mut().unwrap(), i, &d_ri);
            add_instance_grad(d_rp.as_mut().unwrap(), i, &d_rpi);
        } else {
            total += contrast_block(&s_cross, &s_self, t, norm, None);
        }
    }
    Ok((total * norm, d_r.zip(d_rp)))
}

/// Instance-wise contrastive loss: for each timestamp, the positive is the
/// same instance in the other view; negatives are all other instances in the
/// batch, from both views. Returns the mean loss and, when requested,
/// (dL/dr, dL/dr').
pub(crate) fn instance_loss_grad(
    r: &Tensor,
    rp: &Tensor,
    with_grad: bool,
) -> Result<(f64, Option<(Tensor, Tensor)>)> {
    let (b, t, c) = check_pair(r, rp)?;
    let norm = 1.0 / (b as f64 * t as f64);
    let mut total = 0.0;
    let mut d_r = with_grad.then(|| Tensor::zeros(r.shape()));
    let mut d_rp = with_grad.then(|| Tensor::zeros(rp.shape()));

    // Per-timestamp instance matrices [B × C].
    let slice_t = |x: &Tensor, tt: usize| -> Tensor {
        let mut m = Tensor::zeros(&[b, c]);
        for i in 0..b {
            for ch in 0..c {
                m.set2(i, ch, x.at3(i, tt, ch));
            }
        }
        m
    };

    for tt in 0..t {
        let rt = slice_t(r, tt);
        let rpt = slice_t(rp, tt);
        let g_cross = rt.matmul_t(&rpt)?; // [B × B]
        let g_self = rt.matmul_t(&rt)?;

        if with_grad {
            let mut a1 = Tensor::zeros(&[b, b]);
            let mut a2 = Tensor::zeros(&[b, b]);
            total += contrast_block(&g_cross, &g_self, b, norm, Some((&mut a1, &mut a2)));
            let (d_rt, d_rpt) = contrast_block_grads(&a1, &a2, &rt, &rpt)?;
            let (dr, drp) = (d_r.as_mut().unwrap(), d_rp.as_mut().unwrap());
            for i in 0..b {
                for ch in 0..c {
                    let idx = (i * t + tt) * c + ch;
                    dr.data_mut()[idx] += d_rt.at2(i, ch);
                    drp.data_mut()[idx] += d_rpt.at2(i, ch);
                }
            }
        } else {
            total += contrast_block(&g_cross, &g_self, b, norm, None);
        }
    }
    Ok((total * norm, d_r.zip(d_rp)))
}
