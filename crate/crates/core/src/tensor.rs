//! Dense row-major tensors of `f64`.
//!
//! Image-like tensors are channels-last: a single feature map is `[H, W, C]`
//! and a batch is `[B, H, W, C]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        check_shape(shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    /// Uniform fill in `[lo, hi)` from a ChaCha8 stream seeded with `seed`.
    pub fn random_uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Err(Error::InvalidRange { lo, hi });
        }
        check_shape(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Symmetric uniform init with limit `sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, seed: u64) -> Result<Self> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::random_uniform(shape, seed, -limit, limit)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a scalar (single-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!("expected a scalar, got shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            acc * d + i
        })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn flatten(&self) -> Self {
        Tensor { shape: vec![self.data.len()], data: self.data.clone() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn relu(&self) -> Self {
        self.map(|x| x.max(0.0))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape(format!("matmul needs [m,k] x [k,n], got {:?} x {:?}", self.shape, other.shape)));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    pub fn transpose2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::Shape(format!("transpose needs rank 2, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data: out })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = self.axis_split(axis)?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| (o * len + t) * inner + i;
                let max = (0..len).map(|t| out[at(t)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for t in 0..len {
                    let e = (out[at(t)] - max).exp();
                    out[at(t)] = e;
                    total += e;
                }
                for t in 0..len {
                    out[at(t)] /= total;
                }
            }
        }
        Ok(Tensor { shape: self.shape.clone(), data: out })
    }

    /// Decomposes the shape around `axis` into (outer, axis length, inner).
    pub fn axis_split(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return Err(Error::Axis { axis, rank: self.rank() });
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }
}

/// `out += a[m,k] * b[k,n]`, all row-major. The reduction order over `k` is
/// fixed, so results never depend on how callers split work across threads.
pub fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a^T * b` where `a` is `[k,m]` and `b` is `[k,n]`; `out` is `[m,n]`.
pub fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a * b^T` where `a` is `[m,k]` and `b` is `[n,k]`; `out` is `[m,n]`.
pub fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_shapes() {
        let z = Tensor::zeros(&[2, 2]).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        assert_eq!(Tensor::zeros(&[1]).unwrap().data(), &[0.0]);
        let z = Tensor::zeros(&[3, 1, 2]).unwrap();
        assert_eq!(z.shape(), &[3, 1, 2]);
        assert_eq!(z.len(), 6);
        assert!(matches!(Tensor::zeros(&[2, 0]), Err(Error::InvalidShape(_))));
        assert!(matches!(Tensor::zeros(&[]), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn random_uniform_contract() {
        let a = Tensor::random_uniform(&[4, 5], 7, 0.0, 1.0).unwrap();
        let b = Tensor::random_uniform(&[4, 5], 7, 0.0, 1.0).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&x| (0.0..1.0).contains(&x)));
        let c = Tensor::random_uniform(&[4, 5], 8, 0.0, 1.0).unwrap();
        assert_ne!(a.data(), c.data());
        assert!(matches!(Tensor::random_uniform(&[2], 0, 1.0, 1.0), Err(Error::InvalidRange { .. })));
    }

    #[test]
    fn random_uniform_golden() {
        // Recorded from the ChaCha8 stream; guards against silent RNG changes.
        let t = Tensor::random_uniform(&[3], 42, 0.0, 1.0).unwrap();
        let golden = crate::testutil::read_golden_csv("random_uniform_seed42.csv");
        assert_eq!(t.data(), golden.as_slice());
    }

    #[test]
    fn matmul_cases() {
        let x = Tensor::random_uniform(&[3, 4], 1, -1.0, 1.0).unwrap();
        assert_eq!(Tensor::identity(3).unwrap().matmul(&x).unwrap(), x);
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&Tensor::identity(2).unwrap()).unwrap(), a);
        let b = Tensor::new(&[2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
        assert!(matches!(b.matmul(&a), Err(Error::Shape(_))));
    }

    #[test]
    fn gemm_variants_agree() {
        let a = Tensor::random_uniform(&[5, 3], 2, -1.0, 1.0).unwrap();
        let b = Tensor::random_uniform(&[3, 4], 3, -1.0, 1.0).unwrap();
        let ab = a.matmul(&b).unwrap();
        let mut tn = vec![0.0; 20];
        gemm_tn(a.transpose2().unwrap().data(), b.data(), &mut tn, 3, 5, 4);
        let mut nt = vec![0.0; 20];
        gemm_nt(a.data(), b.transpose2().unwrap().data(), &mut nt, 5, 3, 4);
        for i in 0..20 {
            assert!((tn[i] - ab.data()[i]).abs() < 1e-14);
            assert!((nt[i] - ab.data()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn relu_cases() {
        let t = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(t.relu().data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::full(&[4], -3.0).unwrap();
        assert!(neg.relu().data().iter().all(|&x| x == 0.0));
        let pos = Tensor::random_uniform(&[6], 5, 0.1, 2.0).unwrap();
        assert_eq!(pos.relu(), pos);
    }

    #[test]
    fn softmax_cases() {
        let t = Tensor::full(&[2, 5], 3.0).unwrap().softmax(1).unwrap();
        assert!(t.data().iter().all(|&x| (x - 0.2).abs() < 1e-15));
        let t = Tensor::new(&[2], vec![0.0, 0.0]).unwrap().softmax(0).unwrap();
        assert_eq!(t.data(), &[0.5, 0.5]);
        let t = Tensor::new(&[2], vec![1000.0, 1000.0]).unwrap().softmax(0).unwrap();
        assert_eq!(t.data(), &[0.5, 0.5]);
        assert!(matches!(t.softmax(1), Err(Error::Axis { axis: 1, rank: 1 })));
    }

    proptest! {
        #[test]
        fn reshape_round_trip(dims in proptest::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
            let t = Tensor::random_uniform(&dims, seed, -1.0, 1.0).unwrap();
            let back = t.flatten().reshape(&dims).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn softmax_sums_to_one(rows in 1usize..6, cols in 1usize..6, axis in 0usize..2, seed in any::<u64>()) {
            let t = Tensor::random_uniform(&[rows, cols], seed, -50.0, 50.0).unwrap();
            let s = t.softmax(axis).unwrap();
            let (outer, len, inner) = s.axis_split(axis).unwrap();
            for o in 0..outer {
                for i in 0..inner {
                    let total: f64 = (0..len).map(|k| s.data()[(o * len + k) * inner + i]).sum();
                    prop_assert!((total - 1.0).abs() <= 1e-12);
                }
            }
            prop_assert!(s.data().iter().all(|&x| x > 0.0));
        }
    }
}
