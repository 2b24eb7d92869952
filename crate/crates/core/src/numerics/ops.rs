//! Forward kernels shared by the autodiff graph and the eager API.
//!
//! All kernels operate on the trailing dimension; leading dimensions are
//! flattened into rows.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::tensor::Tensor;
use crate::error::{Error, Result};

fn expect_len(op: &'static str, operand: &'static str, t: &Tensor, d: usize) -> Result<()> {
    if t.shape() != [d] {
        return Err(Error::Shape {
            op,
            operand,
            expected: vec![d],
            got: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// Per-row normalization statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub rstd: Vec<f64>,
}

/// LayerNorm over the trailing dimension.
///
/// With `center = false` the mean is not subtracted and the variance is
/// replaced by the mean of squares. `beta = None` drops the additive bias.
/// Variance is the population (divide-by-d) variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: Option<&Tensor>, eps: f64, center: bool) -> Result<Tensor> {
    layer_norm_with_cache(x, gamma, beta, eps, center).map(|(y, _)| y)
}

pub fn layer_norm_with_cache(
    x: &Tensor,
    gamma: &Tensor,
    beta: Option<&Tensor>,
    eps: f64,
    center: bool,
) -> Result<(Tensor, LayerNormCache)> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "layer_norm eps must be >= 0, got {eps}"
        )));
    }
    let d = x.last_dim();
    expect_len("layer_norm", "gamma", gamma, d)?;
    if let Some(b) = beta {
        expect_len("layer_norm", "beta", b, d)?;
    }
    let rows = x.rows();
    let mut out = Tensor::zeros(x.shape());
    let mut normalized = Tensor::zeros(x.shape());
    let mut rstds = Vec::with_capacity(rows);
    let g = gamma.data();
    for r in 0..rows {
        let xs = x.row(r);
        let mean = if center { xs.iter().sum::<f64>() / d as f64 } else { 0.0 };
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        rstds.push(rstd);
        let n = &mut normalized.data_mut()[r * d..(r + 1) * d];
        for (ni, &xi) in n.iter_mut().zip(xs) {
            *ni = (xi - mean) * rstd;
        }
        let o = &mut out.data_mut()[r * d..(r + 1) * d];
        let n = &normalized.data()[r * d..(r + 1) * d];
        match beta {
            Some(b) => {
                for i in 0..d {
                    o[i] = n[i] * g[i] + b.data()[i];
                }
            }
            None => {
                for i in 0..d {
                    o[i] = n[i] * g[i];
                }
            }
        }
    }
    Ok((
        out,
        LayerNormCache {
            normalized,
            rstd: rstds,
        },
    ))
}

/// Softmax over one slice, in place, with max subtraction.
pub(crate) fn softmax_slice(s: &mut [f64]) {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in s.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in s.iter_mut() {
        *v /= z;
    }
}

pub fn softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let d = x.last_dim();
    for chunk in out.data_mut().chunks_mut(d) {
        softmax_slice(chunk);
    }
    out
}

/// Standard normal CDF via erf.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact (erf) GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn relu_squared_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x * x
    } else {
        0.0
    }
}

pub fn relu_squared_grad_scalar(x: f64) -> f64 {
    if x > 0.0 {
        2.0 * x
    } else {
        0.0
    }
}

pub fn relu_squared(x: &Tensor) -> Tensor {
    x.map(relu_squared_scalar)
}

fn matrix_dims(op: &'static str, operand: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Shape {
            op,
            operand,
            expected: vec![0, 0],
            got: t.shape().to_vec(),
        }),
    }
}

/// `a[m,k] · b[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims("matmul", "a", a)?;
    let (k2, n) = matrix_dims("matmul", "b", b)?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            operand: "b",
            expected: vec![k, n],
            got: vec![k2, n],
        });
    }
    let mut out = vec![0.0; m * n];
    gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `a[m,k] · b[n,k]ᵀ`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims("matmul_bt", "a", a)?;
    let (n, k2) = matrix_dims("matmul_bt", "b", b)?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul_bt",
            operand: "b",
            expected: vec![n, k],
            got: vec![n, k2],
        });
    }
    let mut out = vec![0.0; m * n];
    gemm_nt(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// out[m,n] += a[m,k] · b[k,n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (oj, &bj) in o.iter_mut().zip(br) {
                *oj += aip * bj;
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(ar, br);
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let o = &mut out[p * n..(p + 1) * n];
            for (oj, &bj) in o.iter_mut().zip(br) {
                *oj += aip * bj;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorize without reassociation flags
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_constant_input_yields_beta() {
        let x = Tensor::from_vec(vec![3.7; 3]);
        let g = Tensor::ones(&[3]);
        let b = Tensor::full(&[3], 0.5);
        let y = layer_norm(&x, &g, Some(&b), 1e-5, true).unwrap();
        for v in y.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_zero_gamma_yields_beta() {
        let x = Tensor::from_vec(vec![1.0, -4.0, 9.0, 0.25]);
        let b = Tensor::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        let y = layer_norm(&x, &Tensor::zeros(&[4]), Some(&b), 1e-5, true).unwrap();
        assert_eq!(y.data(), b.data());
    }

    #[test]
    fn layer_norm_shape_errors_name_operand() {
        let x = Tensor::zeros(&[2, 4]);
        let err = layer_norm(&x, &Tensor::ones(&[3]), None, 1e-5, true).unwrap_err();
        assert!(err.to_string().contains("gamma"), "{err}");
        let err = layer_norm(&x, &Tensor::ones(&[4]), Some(&Tensor::ones(&[5])), 1e-5, true).unwrap_err();
        assert!(err.to_string().contains("beta"), "{err}");
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = Tensor::new(
            vec![2, 6],
            vec![1.0, 5.0, -2.0, 0.5, 3.0, 8.0, 0.1, 0.2, 0.3, -0.4, 0.9, 2.0],
        )
        .unwrap();
        let y = layer_norm(&x, &Tensor::ones(&[6]), Some(&Tensor::zeros(&[6])), 1e-12, true).unwrap();
        for r in 0..2 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let y = softmax(&Tensor::zeros(&[4]));
        assert_eq!(y.data(), &[0.25; 4]);
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.5]);
        let a = softmax(&x);
        let b = softmax(&x.map(|v| v + 17.0));
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_and_relu_squared_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!(gelu_scalar(-10.0).abs() < 1e-6);
        assert_eq!(relu_squared_scalar(-3.0), 0.0);
        assert_eq!(relu_squared_scalar(2.0), 4.0);
        assert_eq!(relu_squared_grad_scalar(2.0), 4.0);
        assert_eq!(relu_squared_grad_scalar(-1.0), 0.0);
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        assert!(matmul(&a, &Tensor::zeros(&[3, 1])).is_err());
    }

    #[test]
    fn matmul_bt_matches_explicit_transpose() {
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 4.0, 0.0, 3.0]).unwrap();
        let b = Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let via_t = matmul(&a, &b.transpose()).unwrap();
        let direct = matmul_bt(&a, &b).unwrap();
        for (x, y) in via_t.data().iter().zip(direct.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
