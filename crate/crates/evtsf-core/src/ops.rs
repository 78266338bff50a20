//! Dilated 1-D convolution and scalar activations.
//!
//! The convolution is "valid" only: no implicit padding, so the output is
//! shorter than the input by `dilation * (kernel_len - 1)` steps. Callers that
//! want a specific output length pad explicitly. Forward and backward are
//! provided both as tensor-level operations and as slice-level kernels that
//! the feature extractor calls in its hot loop.

use crate::tensor::{axpy, dot, Tensor};
use crate::{Error, Result};
// Inherent f64 methods win under std; this import supplies exp/sqrt/etc.
// via libm when built without it.
#[allow(unused_imports)]
use num_traits::Float;

/// Logistic sigmoid.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Output length of a valid dilated convolution, if positive.
pub fn conv_output_len(t_in: usize, kernel_len: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (kernel_len - 1);
    if t_in > span {
        Some(t_in - span)
    } else {
        None
    }
}

fn check_conv_shapes(input: &Tensor, kernel: &Tensor, dilation: usize) -> Result<usize> {
    if input.rank() != 2 || kernel.rank() != 3 {
        return Err(Error::Shape(alloc::format!(
            "dilated conv wants input (channels x time) and kernel (out x in x taps), got {:?} and {:?}",
            input.shape(),
            kernel.shape()
        )));
    }
    if dilation == 0 {
        return Err(Error::Config("dilation must be at least 1".into()));
    }
    if kernel.dim(1) != input.dim(0) {
        return Err(Error::Shape(alloc::format!(
            "kernel expects {} input channels but input has {}",
            kernel.dim(1),
            input.dim(0)
        )));
    }
    conv_output_len(input.dim(1), kernel.dim(2), dilation).ok_or_else(|| {
        Error::Shape(alloc::format!(
            "input length {} too short for {} taps at dilation {dilation}",
            input.dim(1),
            kernel.dim(2)
        ))
    })
}

/// Valid dilated convolution: `out[o][t] = sum_{c,k} kernel[o][c][k] * input[c][t + k*dilation]`.
pub fn dilated_conv1d(input: &Tensor, kernel: &Tensor, dilation: usize) -> Result<Tensor> {
    let t_out = check_conv_shapes(input, kernel, dilation)?;
    let (c_out, c_in, taps) = (kernel.dim(0), kernel.dim(1), kernel.dim(2));
    let mut out = Tensor::zeros(&[c_out, t_out]);
    conv_forward(
        input.data(),
        c_in,
        input.dim(1),
        kernel.data(),
        c_out,
        taps,
        dilation,
        out.data_mut(),
        t_out,
    );
    Ok(out)
}

/// Gradients of [`dilated_conv1d`] with respect to its input and kernel.
pub fn dilated_conv1d_backward(
    input: &Tensor,
    kernel: &Tensor,
    dilation: usize,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let t_out = check_conv_shapes(input, kernel, dilation)?;
    let (c_out, c_in, taps) = (kernel.dim(0), kernel.dim(1), kernel.dim(2));
    if d_out.shape() != [c_out, t_out] {
        return Err(Error::Shape(alloc::format!(
            "upstream gradient has shape {:?}, expected [{c_out}, {t_out}]",
            d_out.shape()
        )));
    }
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_kernel = Tensor::zeros(kernel.shape());
    conv_backward_input(
        d_input.data_mut(),
        c_in,
        input.dim(1),
        kernel.data(),
        c_out,
        taps,
        dilation,
        d_out.data(),
        t_out,
    );
    conv_backward_kernel(
        input.data(),
        c_in,
        input.dim(1),
        d_kernel.data_mut(),
        c_out,
        taps,
        dilation,
        d_out.data(),
        t_out,
    );
    Ok((d_input, d_kernel))
}

/// Slice-level forward kernel. `x` is `(c_in, t_in)` row-major, `w` is
/// `(c_out, c_in, taps)`, `out` is `(c_out, t_out)` and must be zeroed.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn conv_forward(
    x: &[f64],
    c_in: usize,
    t_in: usize,
    w: &[f64],
    c_out: usize,
    taps: usize,
    dilation: usize,
    out: &mut [f64],
    t_out: usize,
) {
    for o in 0..c_out {
        let out_lane = &mut out[o * t_out..(o + 1) * t_out];
        for c in 0..c_in {
            let x_lane = &x[c * t_in..(c + 1) * t_in];
            let w_base = (o * c_in + c) * taps;
            for tap in 0..taps {
                let shift = tap * dilation;
                axpy(out_lane, w[w_base + tap], &x_lane[shift..shift + t_out]);
            }
        }
    }
}

/// Slice-level input gradient: scatters `d_out` back through the taps.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn conv_backward_input(
    dx: &mut [f64],
    c_in: usize,
    t_in: usize,
    w: &[f64],
    c_out: usize,
    taps: usize,
    dilation: usize,
    d_out: &[f64],
    t_out: usize,
) {
    for o in 0..c_out {
        let dy_lane = &d_out[o * t_out..(o + 1) * t_out];
        for c in 0..c_in {
            let dx_lane = &mut dx[c * t_in..(c + 1) * t_in];
            let w_base = (o * c_in + c) * taps;
            for tap in 0..taps {
                let shift = tap * dilation;
                axpy(&mut dx_lane[shift..shift + t_out], w[w_base + tap], dy_lane);
            }
        }
    }
}

/// Slice-level kernel gradient: one dot product per tap.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn conv_backward_kernel(
    x: &[f64],
    c_in: usize,
    t_in: usize,
    dw: &mut [f64],
    c_out: usize,
    taps: usize,
    dilation: usize,
    d_out: &[f64],
    t_out: usize,
) {
    for o in 0..c_out {
        let dy_lane = &d_out[o * t_out..(o + 1) * t_out];
        for c in 0..c_in {
            let x_lane = &x[c * t_in..(c + 1) * t_in];
            let w_base = (o * c_in + c) * taps;
            for tap in 0..taps {
                let shift = tap * dilation;
                dw[w_base + tap] += dot(dy_lane, &x_lane[shift..shift + t_out]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use alloc::vec;
    use alloc::vec::Vec;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sigmoid_matches_reference_values() {
        assert_abs_diff_eq!(sigmoid(0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(sigmoid(2.0), 0.880_797_077_977_882_3, epsilon = 1e-12);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn unit_kernel_dilation_two_sums_strided_pairs() {
        let input = Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let kernel = Tensor::from_vec(&[1, 1, 2], vec![1.0, 1.0]).unwrap();
        let out = dilated_conv1d(&input, &kernel, 2).unwrap();
        assert_eq!(out.shape(), &[1, 2]);
        assert_eq!(out.data(), &[4.0, 6.0]);
    }

    #[test]
    fn impulse_kernel_is_identity() {
        let input = Tensor::from_vec(&[1, 5], vec![5.0, -1.0, 2.0, 0.5, 3.0]).unwrap();
        let kernel = Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap();
        let out = dilated_conv1d(&input, &kernel, 1).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn output_length_follows_dilation() {
        // 16 steps, 2 taps, dilation 4 -> 12 outputs.
        let input = Tensor::zeros(&[1, 16]);
        let kernel = Tensor::zeros(&[1, 1, 2]);
        let out = dilated_conv1d(&input, &kernel, 4).unwrap();
        assert_eq!(out.shape(), &[1, 12]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let input = Tensor::zeros(&[2, 6]);
        let kernel = Tensor::zeros(&[1, 3, 2]); // expects 3 input channels
        assert!(matches!(
            dilated_conv1d(&input, &kernel, 1),
            Err(Error::Shape(_))
        ));

        let short = Tensor::zeros(&[1, 4]);
        let wide = Tensor::zeros(&[1, 1, 3]);
        // span = 2*(3-1) = 4 >= t_in
        assert!(matches!(
            dilated_conv1d(&short, &wide, 2),
            Err(Error::Shape(_))
        ));

        assert!(matches!(
            dilated_conv1d(&short, &wide, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn conv_is_linear_in_its_input() {
        let mut rng = StreamRng::from_seed(31);
        let a = Tensor::randn(&[3, 10], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 10], 1.0, &mut rng);
        let kernel = Tensor::randn(&[2, 3, 2], 1.0, &mut rng);
        let mut sum = a.clone();
        sum.add_scaled(&b, 1.0);

        let out_sum = dilated_conv1d(&sum, &kernel, 3).unwrap();
        let mut expected = dilated_conv1d(&a, &kernel, 3).unwrap();
        expected.add_scaled(&dilated_conv1d(&b, &kernel, 3).unwrap(), 1.0);
        for (x, y) in out_sum.data().iter().zip(expected.data().iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = StreamRng::from_seed(77);
        let input = Tensor::randn(&[2, 9], 1.0, &mut rng);
        let kernel = Tensor::randn(&[3, 2, 2], 0.5, &mut rng);
        let dilation = 2;
        // Loss = weighted sum of outputs with fixed random weights.
        let weights = Tensor::randn(&[3, 7], 1.0, &mut rng);
        let loss = |inp: &Tensor, ker: &Tensor| -> f64 {
            let out = dilated_conv1d(inp, ker, dilation).unwrap();
            dot(out.data(), weights.data())
        };
        let (d_input, d_kernel) =
            dilated_conv1d_backward(&input, &kernel, dilation, &weights).unwrap();

        let eps = 1e-6;
        let numeric = |base: &Tensor, other: &Tensor, input_side: bool| -> Vec<f64> {
            let mut grads = Vec::new();
            for i in 0..base.numel() {
                let mut plus = base.clone();
                plus.data_mut()[i] += eps;
                let mut minus = base.clone();
                minus.data_mut()[i] -= eps;
                let (lp, lm) = if input_side {
                    (loss(&plus, other), loss(&minus, other))
                } else {
                    (loss(other, &plus), loss(other, &minus))
                };
                grads.push((lp - lm) / (2.0 * eps));
            }
            grads
        };

        for (a, n) in d_input.data().iter().zip(numeric(&input, &kernel, true)) {
            assert_abs_diff_eq!(a, &n, epsilon = 1e-6);
        }
        for (a, n) in d_kernel.data().iter().zip(numeric(&kernel, &input, false)) {
            assert_abs_diff_eq!(a, &n, epsilon = 1e-6);
        }
    }
}
