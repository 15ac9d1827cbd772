//! Forward kernels shared by the recorded graph and by plain tensor code.

use crate::error::{Error, Result};

use super::Tensor;

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Row-major `rows × cols` boolean mask; `true` marks a blocked position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    blocked: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, blocked: Vec<bool>) -> Result<Self> {
        if blocked.len() != rows * cols {
            return Err(Error::dim("mask", &[rows, cols], &[blocked.len()]));
        }
        Ok(Mask {
            rows,
            cols,
            blocked,
        })
    }

    pub fn open(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            blocked: vec![false; rows * cols],
        }
    }

    /// Query `i` may see key `j` iff `j <= i`.
    pub fn causal(n: usize) -> Self {
        let blocked = (0..n * n).map(|idx| idx % n > idx / n).collect();
        Mask {
            rows: n,
            cols: n,
            blocked,
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn is_blocked(&self, row: usize, col: usize) -> bool {
        self.blocked[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.blocked[row * self.cols..(row + 1) * self.cols]
    }
}

/// In-place softmax over one row. Blocked entries become exactly zero.
/// Returns `false` when every entry is blocked.
pub(crate) fn softmax_row(row: &mut [f32], blocked: Option<&[bool]>) -> bool {
    let visible = |j: usize| blocked.is_none_or(|b| !b[j]);
    let mut max = f32::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if visible(j) && v > max {
            max = v;
        }
    }
    if max == f32::NEG_INFINITY {
        return false;
    }
    // Wide rows lose ~1e-5 of mass to f32 accumulation.
    let mut sum = 0.0f64;
    for (j, v) in row.iter_mut().enumerate() {
        if visible(j) {
            *v = (*v - max).exp();
            sum += *v as f64;
        } else {
            *v = 0.0;
        }
    }
    row.iter_mut().for_each(|v| *v = (*v as f64 / sum) as f32);
    true
}

pub fn masked_softmax_rows(x: &Tensor, mask: Option<&Mask>) -> Result<Tensor> {
    if x.rank() > 2 {
        return Err(Error::dim("masked_softmax_rows", x.shape(), &[]));
    }
    if let Some(m) = mask {
        if m.shape() != [x.rows(), x.cols()] {
            return Err(Error::dim("masked_softmax_rows", x.shape(), &m.shape()));
        }
    }
    let mut out = x.clone();
    let cols = x.cols();
    if cols == 0 {
        return if x.rows() == 0 {
            Ok(out)
        } else {
            Err(Error::FullyMasked { row: 0 })
        };
    }
    for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
        if !softmax_row(row, mask.map(|m| m.row(r))) {
            return Err(Error::FullyMasked { row: r });
        }
    }
    Ok(out)
}

/// Feature-axis statistics produced by [`layer_norm_forward`].
pub(crate) struct NormStats {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
}

/// Normalizes each column of a `d × L` matrix (or a single `d` vector).
pub(crate) fn layer_norm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f32,
) -> Result<(Tensor, NormStats)> {
    let d = x.rows();
    if x.rank() > 2 || gain.numel() != d || bias.numel() != d {
        return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
    }
    let l = x.cols();
    let xd = x.data();
    let mut mean = vec![0.0f32; l];
    for r in 0..d {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += xd[r * l + c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= d as f32);
    let mut var = vec![0.0f32; l];
    for r in 0..d {
        for c in 0..l {
            let diff = xd[r * l + c] - mean[c];
            var[c] += diff * diff;
        }
    }
    let inv_std: Vec<f32> = var
        .iter()
        .map(|v| 1.0 / (v / d as f32 + eps).sqrt())
        .collect();
    let mut xhat = vec![0.0f32; d * l];
    let mut out = vec![0.0f32; d * l];
    let (g, b) = (gain.data(), bias.data());
    for r in 0..d {
        for c in 0..l {
            let idx = r * l + c;
            let h = (xd[idx] - mean[c]) * inv_std[c];
            xhat[idx] = h;
            out[idx] = g[r] * h + b[r];
        }
    }
    Ok((
        Tensor::new(x.shape(), out)?,
        NormStats { xhat, inv_std },
    ))
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    layer_norm_forward(x, gain, bias, eps).map(|(t, _)| t)
}

pub fn sinusoidal_positions(max_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0f32; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    Tensor::new(&[max_len, d], data).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f32]) -> Tensor {
        Tensor::from_rows(&[v]).unwrap()
    }

    #[test]
    fn softmax_uniform_row() {
        let y = masked_softmax_rows(&row(&[0.0, 0.0, 0.0]), None).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_forced_one_hot() {
        let mask = Mask::new(1, 3, vec![true, false, true]).unwrap();
        let y = masked_softmax_rows(&row(&[5.0, 9.0, 2.0]), Some(&mask)).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_matches_f64_reference() {
        let y = masked_softmax_rows(&row(&[1.0, 2.0, 3.0]), None).unwrap();
        let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
        for (i, &v) in y.data().iter().enumerate() {
            let expected = ((i + 1) as f64).exp() / z;
            assert!((v as f64 - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mask = Mask::new(2, 2, vec![false, true, true, true]).unwrap();
        let x = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            masked_softmax_rows(&x, Some(&mask)),
            Err(Error::FullyMasked { row: 1 })
        ));
    }

    #[test]
    fn causal_mask_layout() {
        let m = Mask::causal(3);
        assert!(!m.is_blocked(0, 0));
        assert!(m.is_blocked(0, 1));
        assert!(!m.is_blocked(2, 1));
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let x = Tensor::vector(vec![3.0; 4]);
        let y = layer_norm(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), LAYER_NORM_EPS)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_symmetric_pair() {
        let x = Tensor::vector(vec![1.0, -1.0]);
        let y = layer_norm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), LAYER_NORM_EPS)
            .unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-4);
        assert!((y.data()[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn positions_start_with_sin_zero_cos_one() {
        let p = sinusoidal_positions(4, 6);
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((p.at(1, 0) - 1f32.sin()).abs() < 1e-7);
    }
}
