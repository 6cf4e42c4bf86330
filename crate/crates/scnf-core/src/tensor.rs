//! Dense row-major `f64` tensors and the matmul kernels behind the tape.
//!
//! Broadcasting follows trailing-dimension alignment: shapes are compared
//! right-aligned, and a dimension of size 1 stretches to the target size.

use crate::error::{Error, Result};

/// Dense multi-dimensional array of `f64` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Argument(format!(
                "tensor: shape {:?} wants {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Argument("from_rows: ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
        .into_ok()
    }

    fn into_ok(self) -> Result<Self> {
        Ok(self)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Row count for 2-D tensors, 1 for 1-D.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Extract row `i` of a 2-D tensor as a (1, cols) tensor.
    pub fn row_tensor(&self, i: usize) -> Tensor {
        Tensor {
            shape: vec![1, self.cols()],
            data: self.row(i).to_vec(),
        }
    }

    /// Gather the given rows of a 2-D tensor into a new (k, cols) tensor.
    pub fn take_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), c],
            data,
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Shape of the result of broadcasting `a` against `b` with
/// trailing-dimension alignment, or an error naming `op`.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Expand `src` to `target` (numpy semantics). `target` must be a valid
/// broadcast of `src.shape()`.
pub fn broadcast_to(src: &Tensor, target: &[usize]) -> Result<Tensor> {
    let merged = broadcast_shape("broadcast", src.shape(), target)?;
    if merged != target {
        return Err(Error::ShapeMismatch {
            op: "broadcast",
            lhs: src.shape().to_vec(),
            rhs: target.to_vec(),
        });
    }
    let nd = target.len();
    let src_shape = src.shape();
    let offset = nd - src_shape.len();
    // Stride 0 on broadcast axes.
    let mut strides = vec![0isize; nd];
    let mut acc = 1isize;
    for i in (0..src_shape.len()).rev() {
        strides[offset + i] = if src_shape[i] == 1 { 0 } else { acc };
        acc *= src_shape[i] as isize;
    }
    let total: usize = target.iter().product();
    let mut out = vec![0.0; total];
    let sdata = src.as_slice();
    let mut idx = vec![0usize; nd];
    let mut soff = 0isize;
    for o in out.iter_mut() {
        *o = sdata[soff as usize];
        // increment multi-index, updating the source offset
        for d in (0..nd).rev() {
            idx[d] += 1;
            soff += strides[d];
            if idx[d] < target[d] {
                break;
            }
            soff -= strides[d] * target[d] as isize;
            idx[d] = 0;
        }
    }
    Tensor::new(target.to_vec(), out)
}

/// Sum `grad` (shaped `from`) back down to `to` — the adjoint of
/// `broadcast_to`.
pub fn reduce_broadcast(grad: &Tensor, to: &[usize]) -> Tensor {
    let from = grad.shape();
    let nd = from.len();
    let offset = nd - to.len();
    let mut strides = vec![0isize; nd];
    let mut acc = 1isize;
    for i in (0..to.len()).rev() {
        strides[offset + i] = if to[i] == 1 { 0 } else { acc };
        acc *= to[i] as isize;
    }
    let total: usize = to.iter().product();
    let mut out = vec![0.0; total];
    let mut idx = vec![0usize; nd];
    let mut ooff = 0isize;
    for &g in grad.as_slice() {
        out[ooff as usize] += g;
        for d in (0..nd).rev() {
            idx[d] += 1;
            ooff += strides[d];
            if idx[d] < from[d] {
                break;
            }
            ooff -= strides[d] * from[d] as isize;
            idx[d] = 0;
        }
    }
    Tensor::new(to.to_vec(), out).expect("reduce_broadcast shape")
}

const PAR_FLOPS_MIN: usize = 1 << 18;

#[cfg(not(target_arch = "wasm32"))]
fn run_rows<F: Fn(usize, &mut [f64]) + Sync>(out: &mut [f64], n: usize, flops: usize, f: F) {
    use rayon::prelude::*;
    if flops >= PAR_FLOPS_MIN && crate::threads::pool_size() > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            f(i, row);
        }
    }
}

#[cfg(target_arch = "wasm32")]
fn run_rows<F: Fn(usize, &mut [f64]) + Sync>(out: &mut [f64], n: usize, _flops: usize, f: F) {
    for (i, row) in out.chunks_mut(n).enumerate() {
        f(i, row);
    }
}

/// C = A·B with A (m,k), B (k,n). Row-partitioned, so results are identical
/// for any worker count.
pub fn matmul_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    run_rows(out, n, m * k * n, |i, orow| {
        orow.fill(0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    });
}

/// C = A·Bᵀ with A (m,k), B (n,k).
pub fn matmul_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    run_rows(out, n, m * k * n, |i, orow| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    });
}

/// C = Aᵀ·B with A (m,k), B (m,n), C (k,n).
pub fn matmul_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    run_rows(out, n, m * k * n, |i, orow| {
        orow.fill(0.0);
        for p in 0..m {
            let av = a[p * k + i];
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] x [1,1]^T = [3,7]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 1.0];
        let mut out = [0.0; 2];
        matmul_nn(&a, 2, 2, &b, 1, &mut out);
        assert_eq!(out, [3.0, 7.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.37 - 1.0).collect(); // 3x4
        let b: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect(); // 4x5
        let mut c = vec![0.0; 15];
        matmul_nn(&a, 3, 4, &b, 5, &mut c);

        // B^T is 5x4; nt path must reproduce c
        let mut bt = vec![0.0; 20];
        for i in 0..4 {
            for j in 0..5 {
                bt[j * 4 + i] = b[i * 5 + j];
            }
        }
        let mut c2 = vec![0.0; 15];
        matmul_nt(&a, 3, 4, &bt, 5, &mut c2);
        assert_eq!(c, c2);

        // A^T is 4x3; tn path with A^T as input must reproduce c
        let mut at = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                at[j * 3 + i] = a[i * 4 + j];
            }
        }
        let mut c3 = vec![0.0; 15];
        matmul_tn(&at, 4, 3, &b, 5, &mut c3);
        assert_eq!(c, c3);
    }

    #[test]
    fn broadcast_row_and_col() {
        let row = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let out = broadcast_to(&row, &[2, 3]).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);

        let col = Tensor::new(vec![2, 1], vec![5.0, 7.0]).unwrap();
        let out = broadcast_to(&col, &[2, 3]).unwrap();
        assert_eq!(out.as_slice(), &[5.0, 5.0, 5.0, 7.0, 7.0, 7.0]);

        let mid = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = broadcast_to(&mid, &[2, 3, 2]).unwrap();
        assert_eq!(
            out.as_slice(),
            &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]
        );
    }

    #[test]
    fn reduce_is_adjoint_of_broadcast() {
        let g = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = reduce_broadcast(&g, &[1, 3]);
        assert_eq!(r.as_slice(), &[5.0, 7.0, 9.0]);
        let r = reduce_broadcast(&g, &[2, 1]);
        assert_eq!(r.as_slice(), &[6.0, 15.0]);
    }

    #[test]
    fn broadcast_incompatible_errors() {
        let t = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(broadcast_to(&t, &[2, 3]).is_err());
    }
}
