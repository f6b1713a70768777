//! Dense third-order tensors: unfoldings, mode-n products, HOSVD and the
//! truncated-HOSVD tail bound.
//!
//! Entries are stored row-major over `(i, j, k)`. The mode-n unfolding moves
//! axis `n` to the front and flattens the remaining two axes in their original
//! relative order, so for a `I x J x K` tensor
//!
//! ```text
//! mode 0: X_(0)[i, j*K + k]
//! mode 1: X_(1)[j, i*K + k]
//! mode 2: X_(2)[k, i*J + j]
//! ```

use std::ops::{Add, Mul, Sub};

use crate::error::{arg_err, Result};
use crate::matrix::Matrix;

pub type Shape = [usize; 3];
pub type Ranks = [usize; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor3 {
    /// Builds a tensor from row-major data. Zero-extent modes are allowed (an
    /// empty tensor); non-finite entries are not.
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return arg_err(format!("tensor data length {} != {:?}", data.len(), shape));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return arg_err("tensor entries must be finite");
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for k in 0..shape[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { shape, data }
    }

    pub(crate) fn from_raw(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Self { shape, data }
    }

    /// Outer product `a ∘ b ∘ c`.
    pub fn outer(a: &[f64], b: &[f64], c: &[f64]) -> Self {
        Self::from_fn([a.len(), b.len(), c.len()], |i, j, k| a[i] * b[j] * c[k])
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// Row-major entries.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Frobenius inner product. Panics on shape mismatch.
    pub fn inner(&self, other: &Tensor3) -> f64 {
        assert_eq!(self.shape, other.shape, "inner: shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn scale(&self, s: f64) -> Tensor3 {
        Tensor3::from_raw(self.shape, self.data.iter().map(|v| v * s).collect())
    }

    /// `self + s * other`. Panics on shape mismatch.
    pub fn add_scaled(&self, other: &Tensor3, s: f64) -> Tensor3 {
        assert_eq!(self.shape, other.shape, "add_scaled: shape mismatch");
        Tensor3::from_raw(
            self.shape,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + s * b)
                .collect(),
        )
    }

    /// Fallible difference for callers handling untrusted shapes.
    pub fn checked_sub(&self, other: &Tensor3) -> Result<Tensor3> {
        if self.shape != other.shape {
            return arg_err(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        Ok(self.add_scaled(other, -1.0))
    }

    pub fn distance(&self, other: &Tensor3) -> f64 {
        assert_eq!(self.shape, other.shape, "distance: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The leading `r0 x r1 x r2` block.
    pub fn leading_block(&self, ranks: Ranks) -> Result<Tensor3> {
        if (0..3).any(|n| ranks[n] > self.shape[n]) {
            return arg_err(format!("block {:?} exceeds shape {:?}", ranks, self.shape));
        }
        Ok(Tensor3::from_fn(ranks, |i, j, k| self.get(i, j, k)))
    }

    pub fn unfold(&self, mode: usize) -> Result<Matrix> {
        unfold(self, mode)
    }

    pub fn mode_product(&self, a: &Matrix, mode: usize) -> Result<Tensor3> {
        mode_n_product(self, a, mode)
    }
}

impl Add for &Tensor3 {
    type Output = Tensor3;
    fn add(self, rhs: &Tensor3) -> Tensor3 {
        self.add_scaled(rhs, 1.0)
    }
}

impl Sub for &Tensor3 {
    type Output = Tensor3;
    fn sub(self, rhs: &Tensor3) -> Tensor3 {
        self.add_scaled(rhs, -1.0)
    }
}

impl Mul<f64> for &Tensor3 {
    type Output = Tensor3;
    fn mul(self, rhs: f64) -> Tensor3 {
        self.scale(rhs)
    }
}

fn check_mode(mode: usize) -> Result<()> {
    if mode > 2 {
        return arg_err(format!("mode index {mode} out of range 0..=2"));
    }
    Ok(())
}

/// The two remaining axes of `mode`, in original order.
#[inline]
fn other_axes(mode: usize) -> (usize, usize) {
    match mode {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Mode-n unfolding: `I_mode x (product of the other two dims)`.
pub fn unfold(x: &Tensor3, mode: usize) -> Result<Matrix> {
    check_mode(mode)?;
    let s = x.shape;
    let (a, b) = other_axes(mode);
    let cols = s[a] * s[b];
    let mut out = vec![0.0; x.len()];
    let mut idx = [0usize; 3];
    for i in 0..s[0] {
        idx[0] = i;
        for j in 0..s[1] {
            idx[1] = j;
            for k in 0..s[2] {
                idx[2] = k;
                let row = idx[mode];
                let col = idx[a] * s[b] + idx[b];
                out[row * cols + col] = x.data[x.offset(i, j, k)];
            }
        }
    }
    Ok(Matrix::from_raw(s[mode], cols, out))
}

/// Inverse of [`unfold`].
pub fn fold(m: &Matrix, mode: usize, shape: Shape) -> Result<Tensor3> {
    check_mode(mode)?;
    let (a, b) = other_axes(mode);
    if m.rows() != shape[mode] || m.cols() != shape[a] * shape[b] {
        return arg_err(format!(
            "cannot fold {}x{} matrix along mode {mode} into {:?}",
            m.rows(),
            m.cols(),
            shape
        ));
    }
    let mut idx = [0usize; 3];
    let data = m.data();
    Ok(Tensor3::from_fn(shape, |i, j, k| {
        idx = [i, j, k];
        data[idx[mode] * m.cols() + idx[a] * shape[b] + idx[b]]
    }))
}

/// `X ×_mode A`: every mode-`mode` fiber is multiplied by `A`.
pub fn mode_n_product(x: &Tensor3, a: &Matrix, mode: usize) -> Result<Tensor3> {
    check_mode(mode)?;
    if a.cols() != x.shape[mode] {
        return arg_err(format!(
            "mode-{mode} product: matrix has {} columns, tensor dim is {}",
            a.cols(),
            x.shape[mode]
        ));
    }
    let xn = unfold(x, mode)?;
    let yn = a.mul_unchecked(&xn);
    let mut shape = x.shape;
    shape[mode] = a.rows();
    fold(&yn, mode, shape)
}

/// `X ×_mode Aᵀ` without forming the transpose.
pub(crate) fn mode_n_product_t(x: &Tensor3, a: &Matrix, mode: usize) -> Tensor3 {
    debug_assert_eq!(a.rows(), x.shape[mode]);
    let xn = unfold(x, mode).expect("mode checked by caller");
    let yn = a.tmul_unchecked(&xn);
    let mut shape = x.shape;
    shape[mode] = a.cols();
    fold(&yn, mode, shape).expect("shape consistent")
}

/// `G ×₁ A₀ ×₂ A₁ ×₃ A₂`.
pub fn multilinear_product(g: &Tensor3, factors: [&Matrix; 3]) -> Result<Tensor3> {
    let mut y = g.clone();
    for (mode, f) in factors.iter().enumerate() {
        y = mode_n_product(&y, f, mode)?;
    }
    Ok(y)
}

/// Full (untruncated) higher-order SVD.
#[derive(Clone, Debug, PartialEq)]
pub struct HosvdFactorization {
    /// `X ×₁ U⁽¹⁾ᵀ ×₂ U⁽²⁾ᵀ ×₃ U⁽³⁾ᵀ`, same shape as `X`.
    pub core: Tensor3,
    /// Square orthonormal left singular bases, `I_n x I_n`.
    pub factors: [Matrix; 3],
    /// Singular values of each unfolding, non-increasing, length `I_n`.
    pub svals: [Vec<f64>; 3],
}

impl HosvdFactorization {
    pub fn shape(&self) -> Shape {
        self.core.shape()
    }

    pub fn reconstruct(&self) -> Tensor3 {
        multilinear_product(
            &self.core,
            [&self.factors[0], &self.factors[1], &self.factors[2]],
        )
        .expect("factor shapes match core")
    }

    /// Multilinear rank with singular values above `tol * σ₁` counted.
    pub fn numerical_ranks(&self, tol: f64) -> Ranks {
        let mut r = [0; 3];
        for (n, s) in self.svals.iter().enumerate() {
            let top = s.first().copied().unwrap_or(0.0);
            r[n] = s.iter().filter(|&&v| top > 0.0 && v > tol * top).count();
        }
        r
    }
}

pub fn hosvd(x: &Tensor3) -> HosvdFactorization {
    let mut factors = Vec::with_capacity(3);
    let mut svals = Vec::with_capacity(3);
    for mode in 0..3 {
        let (u, s) = unfold(x, mode).expect("valid mode").left_singular();
        factors.push(u);
        svals.push(s);
    }
    let mut core = x.clone();
    for (mode, u) in factors.iter().enumerate() {
        core = mode_n_product_t(&core, u, mode);
    }
    let factors: [Matrix; 3] = factors.try_into().expect("three modes");
    let svals: [Vec<f64>; 3] = svals.try_into().expect("three modes");
    HosvdFactorization {
        core,
        factors,
        svals,
    }
}

fn check_ranks(shape: Shape, ranks: Ranks) -> Result<()> {
    for n in 0..3 {
        if ranks[n] > shape[n] {
            return arg_err(format!(
                "rank {} exceeds dimension {} in mode {n}",
                ranks[n], shape[n]
            ));
        }
    }
    Ok(())
}

/// `X ×₁ P₁ ×₂ P₂ ×₃ P₃` with `Pₙ` the projector onto the top-`rₙ` left
/// singular subspace of `X_(n)`.
pub fn truncated_reconstruct(f: &HosvdFactorization, ranks: Ranks) -> Result<Tensor3> {
    check_ranks(f.shape(), ranks)?;
    // X ×ₙ Pₙ = G ×ₙ (Uₙ[:, :rₙ] Uₙ[:, :rₙ]ᵀ Uₙ) = G[:r] ×ₙ Uₙ[:, :rₙ].
    let core = f.core.leading_block(ranks)?;
    let u: Vec<Matrix> = (0..3)
        .map(|n| f.factors[n].leading_columns(ranks[n]))
        .collect();
    multilinear_product(&core, [&u[0], &u[1], &u[2]])
}

/// `Σₙ Σ_{i>rₙ} σᵢ(X_(n))²`.
pub fn tail_energy(f: &HosvdFactorization, ranks: Ranks) -> Result<f64> {
    check_ranks(f.shape(), ranks)?;
    Ok((0..3)
        .map(|n| f.svals[n][ranks[n]..].iter().map(|s| s * s).sum::<f64>())
        .sum())
}
