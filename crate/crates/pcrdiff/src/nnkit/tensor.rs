//! Dense row-major f64 tensor and the matrix-multiply kernel behind the
//! differentiable ops.

use rand::Rng;

/// Dense real array with shape; data is row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// Uniform values in `[lo, hi)`.
    pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a matrix, or 1 for a vector.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Columns of a matrix, or length for a vector.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transposed(&self) -> Tensor {
        assert_eq!(self.ndim(), 2);
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_vec(&[n, m], out)
    }
}

/// Above this many multiply-adds the gemm is split over row blocks in
/// parallel. Blocks are fixed-size, so the result does not depend on the
/// worker count.
const PAR_FLOP_THRESHOLD: usize = 1 << 21;
const PAR_ROW_BLOCK: usize = 256;

/// `alpha * op(a) · op(b)`, with `op` an optional transpose.
pub fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool, alpha: f64) -> Tensor {
    assert_eq!(a.ndim(), 2, "gemm lhs must be 2-D");
    assert_eq!(b.ndim(), 2, "gemm rhs must be 2-D");
    let (m, k) = if ta { (a.shape[1], a.shape[0]) } else { (a.shape[0], a.shape[1]) };
    let (kb, n) = if tb { (b.shape[1], b.shape[0]) } else { (b.shape[0], b.shape[1]) };
    assert_eq!(k, kb, "gemm inner dimensions disagree");

    let (rsa, csa) = if ta { (1isize, a.shape[1] as isize) } else { (a.shape[1] as isize, 1) };
    let (rsb, csb) = if tb { (1isize, b.shape[1] as isize) } else { (b.shape[1] as isize, 1) };

    let mut out = vec![0.0f64; m * n];
    let run = |rows: std::ops::Range<usize>, c: &mut [f64]| {
        let a_off = rows.start as isize * rsa;
        unsafe {
            matrixmultiply::dgemm(
                rows.len(),
                k,
                n,
                alpha,
                a.data.as_ptr().offset(a_off),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };

    if m * k * n >= PAR_FLOP_THRESHOLD && m > PAR_ROW_BLOCK {
        use rayon::prelude::*;
        out.par_chunks_mut(PAR_ROW_BLOCK * n).enumerate().for_each(|(bi, c)| {
            let r0 = bi * PAR_ROW_BLOCK;
            let r1 = (r0 + PAR_ROW_BLOCK).min(m);
            run(r0..r1, c);
        });
    } else {
        run(0..m, &mut out);
    }
    Tensor::from_vec(&[m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
        let at = if ta { a.transposed() } else { a.clone() };
        let bt = if tb { b.transposed() } else { b.clone() };
        let (m, k, n) = (at.shape[0], at.shape[1], bt.shape[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += at.data[i * k + l] * bt.data[l * n + j];
                }
                out.data[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn gemm_matches_naive_all_transpose_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(m, k, n) in &[(3usize, 4usize, 5usize), (17, 9, 13), (1, 7, 1)] {
            for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
                let a_shape = if ta { [k, m] } else { [m, k] };
                let b_shape = if tb { [n, k] } else { [k, n] };
                let a = Tensor::uniform(&mut rng, &a_shape, -1.0, 1.0);
                let b = Tensor::uniform(&mut rng, &b_shape, -1.0, 1.0);
                let got = gemm(&a, ta, &b, tb, 1.0);
                let want = naive(&a, ta, &b, tb);
                for (g, w) in got.data.iter().zip(want.data.iter()) {
                    assert!((g - w).abs() < 1e-12, "{g} vs {w}");
                }
            }
        }
    }

    #[test]
    fn gemm_parallel_path_is_accurate_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::uniform(&mut rng, &[700, 64], -1.0, 1.0);
        let b = Tensor::uniform(&mut rng, &[64, 80], -1.0, 1.0);
        let got = gemm(&a, false, &b, false, 1.0);
        let want = naive(&a, false, &b, false);
        for (g, w) in got.data.iter().zip(want.data.iter()) {
            assert!((g - w).abs() < 1e-10);
        }
        let again = gemm(&a, false, &b, false, 1.0);
        assert_eq!(got.data, again.data);
    }
}
