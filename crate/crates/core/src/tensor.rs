//! Dense row-major tensors of rank 1 to 3.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::ZERO; numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(&[rows.len(), cols], data)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::ONE;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Treats the tensor as a matrix: rank-1 tensors are a single row and
    /// rank-3 tensors fold their leading two axes.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            [a, b, c] => (a * b, *c),
            _ => unreachable!("rank checked at construction"),
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let (_, c) = self.dims2();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at2(&self, r: usize, c: usize) -> T {
        let (_, cols) = self.dims2();
        self.data[r * cols + c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.is_empty() || shape.len() > 3 {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let (r, c) = self.dims2();
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        // no early exit, so the scan vectorises
        self.data.chunks(256).all(|c| c.iter().fold(true, |ok, v| ok & v.is_finite()))
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        match (self.shape.as_slice(), other.shape.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => {
                let mut out = Tensor::zeros(&[*m, *n]);
                gemm_nn(*m, *k, *n, &self.data, &other.data, T::ZERO, &mut out.data);
                Ok(out)
            }
            _ => Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            }),
        }
    }
}

// Safe wrappers over the gemm kernel. Each asserts the operand lengths the
// kernel will address before dispatching.

/// c[m×n] = a[m×k] · b[k×n] + beta·c
pub(crate) fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if thin_gemm(m, k, n, a, (k, 1), b, (n, 1), beta, c) {
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// c[m×n] = a[m×k] · b[n×k]ᵀ + beta·c
pub(crate) fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if thin_gemm(m, k, n, a, (k, 1), b, (1, k), beta, c) {
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// c[m×n] = a[k×m]ᵀ · b[k×n] + beta·c
pub(crate) fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if thin_gemm(m, k, n, a, (1, m), b, (n, 1), beta, c) {
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

// Products with a unit dimension. The blocked kernel would pack a whole
// operand for O(1) arithmetic per element, so these run as dot products,
// axpys or outer products instead. `c` is row-major `[m × n]`; strides are
// (row, column) in elements. Returns false when no unit dimension applies.
#[allow(clippy::too_many_arguments)]
fn thin_gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
) -> bool {
    if m != 1 && n != 1 && k != 1 {
        return false;
    }
    let c = &mut c[..m * n];
    if beta == T::ZERO {
        c.fill(T::ZERO);
    } else if beta != T::ONE {
        c.iter_mut().for_each(|v| *v *= beta);
    }
    if k == 0 {
        return true;
    }
    if k == 1 {
        for i in 0..m {
            let ai = a[i * rsa];
            let row = &mut c[i * n..(i + 1) * n];
            if csb == 1 {
                axpy(ai, &b[..n], row);
            } else {
                for (j, v) in row.iter_mut().enumerate() {
                    *v += ai * b[j * csb];
                }
            }
        }
    } else if n == 1 {
        if csa == 1 && rsb == 1 {
            for (i, v) in c.iter_mut().enumerate() {
                *v += dot(&a[i * rsa..i * rsa + k], &b[..k]);
            }
        } else if rsa == 1 {
            for p in 0..k {
                axpy(b[p * rsb], &a[p * csa..p * csa + m], c);
            }
        } else {
            for (i, v) in c.iter_mut().enumerate() {
                *v += (0..k).fold(T::ZERO, |s, p| s + a[i * rsa + p * csa] * b[p * rsb]);
            }
        }
    } else if csb == 1 {
        // m == 1: accumulate rows of b
        for p in 0..k {
            axpy(a[p * csa], &b[p * rsb..p * rsb + n], c);
        }
    } else if rsb == 1 && csa == 1 {
        for (j, v) in c.iter_mut().enumerate() {
            *v += dot(&a[..k], &b[j * csb..j * csb + k]);
        }
    } else {
        for (j, v) in c.iter_mut().enumerate() {
            *v += (0..k).fold(T::ZERO, |s, p| s + a[p * csa] * b[p * rsb + j * csb]);
        }
    }
    true
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (v, &xv) in y.iter_mut().zip(x) {
        *v += alpha * xv;
    }
}

/// Dot product with eight independent partial sums.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::ZERO;
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Numerically stable softmax of a vector. Sums are accumulated in `f64`.
pub fn softmax<T: Real>(x: &[T]) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    let mut out = vec![T::ZERO; x.len()];
    softmax_into(x, &mut out);
    Ok(out)
}

pub(crate) fn softmax_into<T: Real>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(x[0], T::max);
    let mut total = 0.0f64;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        total += e.to_f64();
    }
    let inv = T::from_f64(1.0 / total);
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// `ln Σ exp(x)`, accumulated in `f64`.
pub(crate) fn log_sum_exp<T: Real>(x: &[T]) -> f64 {
    let max = x.iter().copied().fold(x[0], T::max).to_f64();
    let total: f64 = x.iter().map(|v| libm::exp(v.to_f64() - max)).sum();
    max + libm::log(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(&[1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::<f32>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
        let col = Tensor::from_rows(&[&[0.0], &[1.0]]).unwrap();
        assert_eq!(a.matmul(&col).unwrap().data(), &[2.0, 4.0]);
        let z = Tensor::<f32>::zeros(&[2, 3]);
        let any = Tensor::from_f64(&[3, 4], &[1.5; 12]).unwrap();
        assert_eq!(z.matmul(&any).unwrap(), Tensor::zeros(&[2, 4]));
        let err = a.matmul(&any).unwrap_err();
        assert_eq!(
            err,
            Error::Shape {
                op: "matmul",
                lhs: vec![2, 2],
                rhs: vec![3, 4]
            }
        );
    }

    #[test]
    fn softmax_closed_forms() {
        let s = softmax(&[0.0f64, core::f64::consts::LN_2]).unwrap();
        assert!((s[0] - 1.0 / 3.0).abs() < 1e-12 && (s[1] - 2.0 / 3.0).abs() < 1e-12);
        let s = softmax(&[5.0f32; 3]).unwrap();
        assert!(s.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-6));
        assert_eq!(softmax::<f32>(&[]), Err(Error::Empty("softmax")));
    }

    #[test]
    fn transpose_swaps_axes() {
        let a = Tensor::<f32>::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        let t = a.transpose().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn every_gemm_layout_matches_a_triple_loop() {
        let shapes = [(1, 1, 1), (1, 5, 1), (4, 1, 3), (1, 7, 9), (6, 7, 1), (1, 1, 5), (5, 9, 4), (3, 17, 2)];
        for &(m, k, n) in &shapes {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 5 % 13) as f64 - 6.0) / 4.0).collect();
            let at = |i: usize, p: usize| a[i * k + p];
            let bt = |p: usize, j: usize| b[p * n + j];
            for beta in [0.0, 1.0, 0.5] {
                let c0: Vec<f64> = (0..m * n).map(|i| i as f64 - 2.0).collect();
                let want: Vec<f64> = (0..m * n)
                    .map(|ij| {
                        let (i, j) = (ij / n, ij % n);
                        beta * c0[ij] + (0..k).map(|p| at(i, p) * bt(p, j)).sum::<f64>()
                    })
                    .collect();
                // a·b
                let mut c = c0.clone();
                gemm_nn(m, k, n, &a, &b, beta, &mut c);
                // a·(bᵀ)ᵀ with bᵀ stored [n × k]
                let bt_store: Vec<f64> = (0..n * k).map(|jp| bt(jp % k, jp / k)).collect();
                let mut c2 = c0.clone();
                gemm_nt(m, k, n, &a, &bt_store, beta, &mut c2);
                // (aᵀ)ᵀ·b with aᵀ stored [k × m]
                let at_store: Vec<f64> = (0..k * m).map(|pi| at(pi % m, pi / m)).collect();
                let mut c3 = c0.clone();
                gemm_tn(m, k, n, &at_store, &b, beta, &mut c3);
                for got in [&c, &c2, &c3] {
                    for (g, w) in got.iter().zip(&want) {
                        assert!((g - w).abs() < 1e-12, "{m}x{k}x{n} beta {beta}: {g} vs {w}");
                    }
                }
            }
        }
    }

    #[test]
    fn dot_handles_every_remainder() {
        for len in 0..20 {
            let a: Vec<f32> = (0..len).map(|i| i as f32).collect();
            let want: f32 = a.iter().map(|x| x * x).sum();
            assert_eq!(dot(&a, &a), want);
        }
    }
}
