//! Row-major dense matrices and the handful of kernels the encoder needs.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(1, 1, vec![v])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        axpy(1.0, &other.data, &mut self.data);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`. Every element is summed over `k` in order
/// from zero and then added to `c`, whichever code path runs, so results do
/// not depend on the instruction set.
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "matmul operand sizes");
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was just checked.
        unsafe { matmul_avx2(a, b, c, m, k, n) };
        return;
    }
    matmul_tiled::<4, 4>(a, b, c, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_avx2(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_tiled::<4, 8>(a, b, c, m, k, n);
}

/// Accumulates `MR × NR` tiles of `c` in registers.
#[inline(always)]
fn matmul_tiled<const MR: usize, const NR: usize>(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let full_n = n - n % NR;
    let mut i = 0;
    while i + MR <= m {
        let rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
        for j in (0..full_n).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                let bp: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().expect("tile width");
                for r in 0..MR {
                    let x = rows[r][p];
                    for q in 0..NR {
                        acc[r][q] += x * bp[q];
                    }
                }
            }
            for r in 0..MR {
                let ci = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                for q in 0..NR {
                    ci[q] += acc[r][q];
                }
            }
        }
        for j in full_n..n {
            for r in 0..MR {
                let mut s = 0.0;
                for p in 0..k {
                    s += rows[r][p] * b[p * n + j];
                }
                c[(i + r) * n + j] += s;
            }
        }
        i += MR;
    }
    let mut acc = vec![0.0; n];
    for i in i..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], &mut acc);
        }
        axpy(1.0, &acc, &mut c[i * n..(i + 1) * n]);
    }
}

fn transposed(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_acc(a, &transposed(&b[..n * k], n, k), c, m, k, n);
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_acc(&transposed(&a[..m * k], m, k), b, c, k, m, n);
}

pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn kernels_match_naive() {
        for (m, k, n) in [(3, 5, 4), (9, 7, 13), (8, 1, 8), (4, 4, 3)] {
            check_kernels(m, k, n);
        }
    }

    #[test]
    fn tile_shapes_agree_bitwise() {
        let (m, k, n) = (11, 9, 19);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut x = vec![0.5; m * n];
        let mut y = x.clone();
        matmul_tiled::<4, 4>(&a, &b, &mut x, m, k, n);
        matmul_tiled::<4, 8>(&a, &b, &mut y, m, k, n);
        let mut z = vec![0.5; m * n];
        matmul_tiled::<1, 1>(&a, &b, &mut z, m, k, n);
        assert_eq!(x, y);
        assert_eq!(x, z);
    }

    fn check_kernels(m: usize, k: usize, n: usize) {
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let close = |c: &[f64]| c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12);

        let mut c = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut c, m, k, n);
        assert!(close(&c));

        let mut c = vec![0.0; m * n];
        matmul_nt_acc(&a, &transpose(&b, k, n), &mut c, m, k, n);
        assert!(close(&c));

        let mut c = vec![0.0; m * n];
        matmul_tn_acc(&transpose(&a, m, k), &b, &mut c, k, m, n);
        assert!(close(&c));
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut x = vec![1000.0, 1001.0, -5.0];
        softmax_in_place(&mut x);
        assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(x[1] > x[0] && x[0] > x[2]);
    }
}
