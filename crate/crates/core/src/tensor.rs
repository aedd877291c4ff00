//! Minimal dense tensor type and the three matmul orientations the
//! engine needs.
//!
//! Scalars are generic so the same model code runs in single precision
//! for training and double precision for verification oracles. Every
//! matmul accumulates along its contraction axis in a fixed sequential
//! order and each output element is written by exactly one task, so
//! results are bitwise identical with and without the `parallel`
//! feature and for any thread count.

use num_traits::Float;

/// Scalar precision for the engine: `f32` for training runs, `f64` for
/// verification oracles.
pub trait Scalar:
    Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length must match shape {shape:?}"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); len],
        }
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected a 2-D tensor");
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected a 2-D tensor");
        self.shape[1]
    }

    /// Element-converted copy (e.g. f32 checkpoint → f64 oracle model).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| T::from_f64(Scalar::to_f64(v)))
                .collect(),
        }
    }
}

/// Runs `body(row_index, row)` over consecutive `row_len` chunks of
/// `out`, in parallel when the feature is enabled.
pub fn for_each_row<S: Send, F>(out: &mut [S], row_len: usize, body: F)
where
    F: Fn(usize, &mut [S]) + Sync,
{
    debug_assert_eq!(out.len() % row_len.max(1), 0);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(r, row)| body(r, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (r, row) in out.chunks_mut(row_len).enumerate() {
            body(r, row);
        }
    }
}

/// `a [n,p] × b [p,q] → [n,q]`.
pub fn mm_nn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (n, p) = (a.rows(), a.cols());
    let (pb, q) = (b.rows(), b.cols());
    assert_eq!(p, pb, "inner dims {p} vs {pb}");
    let mut out = Tensor::zeros(vec![n, q]);
    let (ad, bd) = (a.data(), b.data());
    for_each_row(out.data_mut(), q, |r, row| {
        for k in 0..p {
            let s = ad[r * p + k];
            let brow = &bd[k * q..(k + 1) * q];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    });
    out
}

/// `a [n,q] × bᵀ, b [p,q] → [n,p]` (dot products of rows).
pub fn mm_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (n, q) = (a.rows(), a.cols());
    let (p, qb) = (b.rows(), b.cols());
    assert_eq!(q, qb, "inner dims {q} vs {qb}");
    let mut out = Tensor::zeros(vec![n, p]);
    let (ad, bd) = (a.data(), b.data());
    for_each_row(out.data_mut(), p, |r, row| {
        let arow = &ad[r * q..(r + 1) * q];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &bd[j * q..(j + 1) * q];
            let mut acc = S::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    });
    out
}

/// `aᵀ × b, a [n,p], b [n,q] → [p,q]` (the weight-gradient contraction).
pub fn mm_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (n, p) = (a.rows(), a.cols());
    let (nb, q) = (b.rows(), b.cols());
    assert_eq!(n, nb, "outer dims {n} vs {nb}");
    let mut out = Tensor::zeros(vec![p, q]);
    let (ad, bd) = (a.data(), b.data());
    for_each_row(out.data_mut(), q, |j, row| {
        for k in 0..n {
            let s = ad[k * p + j];
            let brow = &bd[k * q..(k + 1) * q];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, v)
    }

    #[test]
    fn matmul_hand_example() {
        // [1 2 3; 4 5 6] × [7 8; 9 10; 11 12] = [58 64; 139 154]
        let a = t(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = t(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]);
        assert_eq!(mm_nn(&a, &b).data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn transposed_variants_match_naive() {
        let a = t(vec![2, 3], vec![1., -2., 3., 0.5, 5., -6.]);
        let b = t(vec![4, 3], (0..12).map(|i| i as f64 * 0.25 - 1.0).collect());
        // a × bᵀ elementwise check.
        let nt = mm_nt(&a, &b);
        for r in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a.data()[r * 3 + k] * b.data()[j * 3 + k]).sum();
                assert!((nt.data()[r * 4 + j] - want).abs() < 1e-12);
            }
        }
        // aᵀ × c.
        let c = t(vec![2, 4], (0..8).map(|i| (i as f64).sin()).collect());
        let tn = mm_tn(&a, &c);
        assert_eq!(tn.shape(), &[3, 4]);
        for p in 0..3 {
            for q in 0..4 {
                let want: f64 = (0..2).map(|k| a.data()[k * 3 + p] * c.data()[k * 4 + q]).sum();
                assert!((tn.data()[p * 4 + q] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cast_round_trip() {
        let a = Tensor::<f32>::new(vec![2, 2], vec![1.5, -2.25, 0.125, 3.0]);
        let d: Tensor<f64> = a.cast();
        let back: Tensor<f32> = d.cast();
        assert_eq!(a, back);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn thread_count_does_not_change_bits() {
        use rand::Rng;
        let mut rng = crate::rng::Splitter::new(11).derive(&[1]).rng();
        let a = Tensor::<f32>::new(
            vec![17, 23],
            (0..17 * 23).map(|_| rng.random::<f32>() - 0.5).collect(),
        );
        let b = Tensor::<f32>::new(
            vec![23, 19],
            (0..23 * 19).map(|_| rng.random::<f32>() - 0.5).collect(),
        );
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| mm_nn(&a, &b));
        let many = rayon::ThreadPoolBuilder::new()
            .num_threads(8)
            .build()
            .unwrap()
            .install(|| mm_nn(&a, &b));
        assert_eq!(one.data(), many.data());
    }
}
