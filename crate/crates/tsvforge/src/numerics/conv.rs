use crate::error::{Result, TsvError};

use super::Tensor;

/// Copy of `x` [C × T] shifted along time by `s`: out[.., t] = x[.., t + s],
/// zero where t + s is out of range.
fn shift_cols(x: &Tensor, s: isize) -> Tensor {
    let (c, t) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(&[c, t]);
    for ch in 0..c {
        for j in 0..t {
            let src = j as isize + s;
            if src >= 0 && (src as usize) < t {
                out.data_mut()[ch * t + j] = x.data()[ch * t + src as usize];
            }
        }
    }
    out
}

/// Per-tap time offset for a width-W dilated conv. Causal convs see only the
/// past: left zero-padding of width (W−1)·d, realized as negative offsets.
/// Non-causal convs are centered ("same" padding).
fn tap_offset(k: usize, width: usize, dilation: usize, causal: bool) -> isize {
    let d = dilation as isize;
    if causal {
        k as isize * d - (width as isize - 1) * d
    } else {
        (k as isize - (width as isize - 1) / 2) * d
    }
}

/// Extract the [C_out × C_in] weight slice for tap `k` of kernel
/// [C_out × C_in × W].
fn tap_matrix(kernel: &Tensor, k: usize) -> Tensor {
    let (co, ci, w) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    let mut m = Tensor::zeros(&[co, ci]);
    for o in 0..co {
        for i in 0..ci {
            m.data_mut()[o * ci + i] = kernel.data()[(o * ci + i) * w + k];
        }
    }
    m
}

/// 1-D dilated convolution of `input` [C_in × T] with `kernel`
/// [C_out × C_in × W]. Output length equals input length. With `causal_pad`
/// the output at t depends only on inputs at positions ≤ t.
pub fn conv1d_dilated(
    input: &Tensor,
    kernel: &Tensor,
    dilation: usize,
    causal_pad: bool,
) -> Result<Tensor> {
    if input.shape().len() != 2 || kernel.shape().len() != 3 {
        return Err(TsvError::Dimension(
            "conv1d expects input [C_in × T] and kernel [C_out × C_in × W]".into(),
        ));
    }
    if dilation < 1 {
        return Err(TsvError::Contract("conv1d dilation must be ≥ 1".into()));
    }
    let (ci, t) = (input.shape()[0], input.shape()[1]);
    let (co, kci, w) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if ci != kci {
        return Err(TsvError::Dimension(format!(
            "conv1d input channels {} vs kernel channels {}",
            ci, kci
        )));
    }
    let mut out = Tensor::zeros(&[co, t]);
    for k in 0..w {
        let off = tap_offset(k, w, dilation, causal_pad);
        let shifted = shift_cols(input, off);
        let wk = tap_matrix(kernel, k);
        // out += W_k · shift(x, off)
        let contrib = wk.matmul(&shifted)?;
        out.axpy(1.0, &contrib);
    }
    Ok(out)
}

/// Gradients of conv1d_dilated w.r.t. input and kernel given upstream grad
/// `d_out` [C_out × T].
pub fn conv1d_dilated_backward(
    input: &Tensor,
    kernel: &Tensor,
    dilation: usize,
    causal_pad: bool,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (co, ci, w) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_kernel = Tensor::zeros(kernel.shape());
    for k in 0..w {
        let off = tap_offset(k, w, dilation, causal_pad);
        // dX += W_kᵀ · shift(dOut, −off)
        let wk = tap_matrix(kernel, k);
        let shifted_grad = shift_cols(d_out, -off);
        let dx = Tensor::matmul_ex(&wk, true, &shifted_grad, false)?;
        d_input.axpy(1.0, &dx);
        // dW_k = dOut · shift(x, off)ᵀ
        let shifted_in = shift_cols(input, off);
        let dwk = Tensor::matmul_ex(d_out, false, &shifted_in, true)?;
        for o in 0..co {
            for i in 0..ci {
                d_kernel.data_mut()[(o * ci + i) * w + k] += dwk.at2(o, i);
            }
        }
    }
    Ok((d_input, d_kernel))
}

/// Max-pool [C × T] along time with non-overlapping windows; the last window
/// may be partial. Output is [C × ceil(T/width)].
pub fn maxpool1d_time(input: &Tensor, width: usize) -> Result<Tensor> {
    if input.shape().len() != 2 {
        return Err(TsvError::Dimension("maxpool1d expects [C × T]".into()));
    }
    if width < 1 {
        return Err(TsvError::Contract("maxpool width must be ≥ 1".into()));
    }
    let (c, t) = (input.shape()[0], input.shape()[1]);
    let t_out = t.div_ceil(width);
    let mut out = Tensor::zeros(&[c, t_out]);
    for ch in 0..c {
        for j in 0..t_out {
            let lo = j * width;
            let hi = ((j + 1) * width).min(t);
            let m = (lo..hi)
                .map(|u| input.at2(ch, u))
                .fold(f64::NEG_INFINITY, f64::max);
            out.set2(ch, j, m);
        }
    }
    Ok(out)
}

/// Backward of maxpool1d_time: gradient routes to the first argmax in each
/// window.
pub fn maxpool1d_time_backward(input: &Tensor, width: usize, d_out: &Tensor) -> Tensor {
    let (c, t) = (input.shape()[0], input.shape()[1]);
    let t_out = t.div_ceil(width);
    let mut d_in = Tensor::zeros(&[c, t]);
    for ch in 0..c {
        for j in 0..t_out {
            let lo = j * width;
            let hi = ((j + 1) * width).min(t);
            let mut best = lo;
            for u in lo + 1..hi {
                if input.at2(ch, u) > input.at2(ch, best) {
                    best = u;
                }
            }
            d_in.data_mut()[ch * t + best] += d_out.at2(ch, j);
        }
    }
    d_in
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]);
        let k = Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let y = conv1d_dilated(&x, &k, 1, false).unwrap();
        assert_eq!(y, x);
        // Causal with center-tap identity shifts nothing either: the center
        // tap of a causal width-3 kernel reads position t−d.
        let yc = conv1d_dilated(&x, &k, 1, true).unwrap();
        assert_eq!(yc.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn causal_box_kernel_hand_convolution() {
        // input [[1,1,1,1]], kernel [[[1,1,1]]], dilation 1, left pad 2.
        let x = Tensor::from_rows(&[vec![1.0, 1.0, 1.0, 1.0]]);
        let k = Tensor::new(vec![1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let y = conv1d_dilated(&x, &k, 1, true).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn dilated_impulse_shifts_by_receptive_offset() {
        // kernel [[[1,0,0]]] at dilation 2 with causal pad reads x[t−4].
        let x = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0, 0.0]]);
        let k = Tensor::new(vec![1, 1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let y = conv1d_dilated(&x, &k, 2, true).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn conv_channel_mismatch_errors() {
        let x = Tensor::zeros(&[2, 4]);
        let k = Tensor::zeros(&[1, 3, 3]);
        assert!(conv1d_dilated(&x, &k, 1, true).is_err());
    }

    #[test]
    fn maxpool_windows() {
        let x = Tensor::from_rows(&[vec![1.0, 3.0, 2.0, 5.0]]);
        assert_eq!(maxpool1d_time(&x, 2).unwrap().data(), &[3.0, 5.0]);
        let single = Tensor::from_rows(&[vec![7.0]]);
        assert_eq!(maxpool1d_time(&single, 2).unwrap().data(), &[7.0]);
        let neg = Tensor::from_rows(&[vec![-1.0, -4.0, -2.0]]);
        assert_eq!(maxpool1d_time(&neg, 2).unwrap().data(), &[-1.0, -2.0]);
    }

    #[test]
    fn maxpool_width_one_is_identity() {
        let x = Tensor::from_rows(&[vec![0.5, -2.0, 9.0]]);
        assert_eq!(maxpool1d_time(&x, 1).unwrap(), x);
    }
}
