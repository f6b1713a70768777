//! Stiefel and fixed multilinear-rank geometry.
//!
//! The Stiefel side follows the usual embedded-submanifold recipe: tangent
//! projection `G − U·sym(UᵀG)` and a QR retraction whose `R` factor is forced
//! to a positive diagonal. The Tucker side represents tangent vectors in the
//! horizontal gauge (core direction plus factor directions orthogonal to the
//! current factors) and retracts by truncated HOSVD of the moved tensor.

use crate::error::{arg_err, Error, Result};
use crate::matrix::{pseudo_inverse, thin_qr, Matrix};
use crate::tensor::{hosvd, mode_n_product_t, multilinear_product, unfold, Ranks, Shape, Tensor3};

/// Pivots of `R` at or below this magnitude are treated as rank deficiency.
pub const QR_PIVOT_TOL: f64 = 1e-12;
/// Retained singular values at or below this magnitude abort a Tucker retraction.
pub const RANK_COLLAPSE_TOL: f64 = 1e-12;
const ORTHONORMAL_TOL: f64 = 1e-10;

/// A matrix with orthonormal columns.
#[derive(Clone, Debug, PartialEq)]
pub struct StiefelPoint(Matrix);

impl StiefelPoint {
    pub fn new(u: Matrix) -> Result<Self> {
        if u.rows() < u.cols() {
            return arg_err(format!(
                "Stiefel point needs rows >= cols, got {:?}",
                u.shape()
            ));
        }
        let defect = u.orthonormality_defect();
        if defect > ORTHONORMAL_TOL {
            return arg_err(format!("columns not orthonormal (defect {defect:e})"));
        }
        Ok(Self(u))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }
}

/// `G − U·sym(UᵀG)`.
pub fn tangent_project_stiefel(u: &StiefelPoint, g: &Matrix) -> Result<Matrix> {
    if u.shape() != g.shape() {
        return arg_err(format!(
            "shape mismatch: U {:?}, G {:?}",
            u.shape(),
            g.shape()
        ));
    }
    let utg = u.0.tmul_unchecked(g).sym();
    g.sub(&u.0.mul_unchecked(&utg))
}

/// `‖Uᵀξ + ξᵀU‖_F`, zero for tangent vectors.
pub fn stiefel_tangency_residual(u: &StiefelPoint, xi: &Matrix) -> f64 {
    let a = u.0.tmul_unchecked(xi);
    a.add_scaled(&a.transpose(), 1.0)
        .map_or(f64::INFINITY, |m| m.frobenius_norm())
}

/// Q factor of a thin QR of `Y` with columns flipped so that `diag(R) > 0`.
pub fn qr_retraction(y: &Matrix) -> Result<StiefelPoint> {
    if y.rows() < y.cols() {
        return arg_err(format!(
            "QR retraction needs a tall matrix, got {:?}",
            y.shape()
        ));
    }
    if !y.is_finite() {
        return arg_err("non-finite input to QR retraction");
    }
    let (mut q, diag) = thin_qr(y);
    for (j, &r) in diag.iter().enumerate() {
        if r.abs() <= QR_PIVOT_TOL {
            return Err(Error::Singular {
                index: j,
                value: r.abs(),
            });
        }
        if r < 0.0 {
            for i in 0..q.rows() {
                *q.get_mut(i, j) = -q.get(i, j);
            }
        }
    }
    Ok(StiefelPoint(q))
}

/// `qr_retraction(U − η·P_U(G))`.
pub fn stiefel_step(u: &StiefelPoint, g: &Matrix, eta: f64) -> Result<StiefelPoint> {
    if !(eta > 0.0 && eta.is_finite()) {
        return arg_err(format!("step size must be positive, got {eta}"));
    }
    let xi = tangent_project_stiefel(u, g)?;
    qr_retraction(&u.0.add_scaled(&xi, -eta)?)
}

/// A point on the manifold of tensors with fixed multilinear rank, stored in
/// Tucker form.
#[derive(Clone, Debug, PartialEq)]
pub struct TuckerPoint {
    pub core: Tensor3,
    pub factors: [StiefelPoint; 3],
}

impl TuckerPoint {
    pub fn new(core: Tensor3, factors: [StiefelPoint; 3]) -> Result<Self> {
        for (n, f) in factors.iter().enumerate() {
            if f.shape().1 != core.shape()[n] {
                return arg_err(format!(
                    "factor {n} has {} columns but core dim is {}",
                    f.shape().1,
                    core.shape()[n]
                ));
            }
        }
        Ok(Self { core, factors })
    }

    /// Rank-`ranks` truncated HOSVD of `x`. Fails if any retained singular
    /// value is (numerically) zero, i.e. `x` sits below the requested rank.
    pub fn from_tensor(x: &Tensor3, ranks: Ranks) -> Result<Self> {
        let shape = x.shape();
        for n in 0..3 {
            if ranks[n] == 0 || ranks[n] > shape[n] {
                return arg_err(format!("rank {:?} invalid for shape {:?}", ranks, shape));
            }
        }
        if !x.is_finite() {
            return arg_err("non-finite tensor");
        }
        let f = hosvd(x);
        for (n, (sv, &rank)) in f.svals.iter().zip(&ranks).enumerate() {
            let s = sv[rank - 1];
            if s <= RANK_COLLAPSE_TOL {
                return Err(Error::RankDeficient {
                    mode: n,
                    rank,
                    value: s,
                });
            }
        }
        let core = f.core.leading_block(ranks)?;
        let [u0, u1, u2] = f.factors;
        let factors = [
            StiefelPoint(u0.leading_columns(ranks[0])),
            StiefelPoint(u1.leading_columns(ranks[1])),
            StiefelPoint(u2.leading_columns(ranks[2])),
        ];
        Ok(Self { core, factors })
    }

    pub fn ranks(&self) -> Ranks {
        self.core.shape()
    }

    pub fn ambient_shape(&self) -> Shape {
        [
            self.factors[0].shape().0,
            self.factors[1].shape().0,
            self.factors[2].shape().0,
        ]
    }

    /// The represented tensor `G ×₁ U₁ ×₂ U₂ ×₃ U₃`.
    pub fn to_tensor(&self) -> Tensor3 {
        let f = &self.factors;
        multilinear_product(&self.core, [&f[0].0, &f[1].0, &f[2].0]).expect("consistent shapes")
    }
}

/// Tangent vector at a [`TuckerPoint`] in the horizontal gauge:
/// `ξ = Ġ ×U + Σₙ G ×ₙ U̇ₙ ×_{m≠n} U_m` with `Uₙᵀ U̇ₙ = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct TuckerTangent {
    pub core: Tensor3,
    pub factors: [Matrix; 3],
}

impl TuckerTangent {
    pub fn zero(p: &TuckerPoint) -> Self {
        let shape = p.ambient_shape();
        let ranks = p.ranks();
        Self {
            core: Tensor3::zeros(ranks),
            factors: [
                Matrix::zeros(shape[0], ranks[0]),
                Matrix::zeros(shape[1], ranks[1]),
                Matrix::zeros(shape[2], ranks[2]),
            ],
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            core: self.core.scale(s),
            factors: [
                self.factors[0].scale(s),
                self.factors[1].scale(s),
                self.factors[2].scale(s),
            ],
        }
    }

    /// Ambient embedding at `p`.
    pub fn embed(&self, p: &TuckerPoint) -> Tensor3 {
        let u = [
            p.factors[0].matrix(),
            p.factors[1].matrix(),
            p.factors[2].matrix(),
        ];
        let mut out = multilinear_product(&self.core, u).expect("tangent matches point");
        for n in 0..3 {
            let mut mats = u;
            mats[n] = &self.factors[n];
            let term = multilinear_product(&p.core, mats).expect("tangent matches point");
            out = out.add_scaled(&term, 1.0);
        }
        out
    }

    /// Largest `‖Uₙᵀ U̇ₙ‖_F` over the three modes.
    pub fn gauge_residual(&self, p: &TuckerPoint) -> f64 {
        (0..3)
            .map(|n| {
                p.factors[n]
                    .matrix()
                    .tmul_unchecked(&self.factors[n])
                    .frobenius_norm()
            })
            .fold(0.0, f64::max)
    }
}

/// Orthogonal projection of an ambient gradient onto the tangent space at `p`.
pub fn riemannian_grad_tucker(p: &TuckerPoint, euclid_grad: &Tensor3) -> Result<TuckerTangent> {
    if euclid_grad.shape() != p.ambient_shape() {
        return arg_err(format!(
            "gradient shape {:?} != ambient shape {:?}",
            euclid_grad.shape(),
            p.ambient_shape()
        ));
    }
    let u = [
        p.factors[0].matrix(),
        p.factors[1].matrix(),
        p.factors[2].matrix(),
    ];

    let mut core = euclid_grad.clone();
    for (n, un) in u.iter().enumerate() {
        core = mode_n_product_t(&core, un, n);
    }

    let mut factors: Vec<Matrix> = Vec::with_capacity(3);
    for n in 0..3 {
        // W = E ×_{m≠n} U_mᵀ, then (I − UₙUₙᵀ) W_(n) G_(n)⁺.
        let mut w = euclid_grad.clone();
        for (m, um) in u.iter().enumerate() {
            if m != n {
                w = mode_n_product_t(&w, um, m);
            }
        }
        let wn = unfold(&w, n)?;
        let proj = wn.sub(&u[n].mul_unchecked(&u[n].tmul_unchecked(&wn)))?;
        let gn = unfold(&p.core, n)?;
        factors.push(proj.mul_unchecked(&pseudo_inverse(&gn)));
    }
    Ok(TuckerTangent {
        core,
        factors: factors.try_into().expect("three modes"),
    })
}

/// Metric-projection retraction: truncated HOSVD of `X + η·ξ` at the ranks of `p`.
pub fn tucker_retract(p: &TuckerPoint, direction: &TuckerTangent, eta: f64) -> Result<TuckerPoint> {
    if !(eta > 0.0 && eta.is_finite()) {
        return arg_err(format!("step size must be positive, got {eta}"));
    }
    let moved = p.to_tensor().add_scaled(&direction.embed(p), eta);
    TuckerPoint::from_tensor(&moved, p.ranks())
}

/// Retraction of an arbitrary ambient displacement (used by the optimizer
/// once the tangent vector has been embedded).
pub fn retract_ambient(p: &TuckerPoint, displacement: &Tensor3, eta: f64) -> Result<TuckerPoint> {
    let moved = p.to_tensor().add_scaled(displacement, eta);
    TuckerPoint::from_tensor(&moved, p.ranks())
}

/// Random point with Gaussian core and Haar-ish orthonormal factors.
pub fn random_tucker_point(
    rng: &mut crate::rng::SeededRng,
    shape: Shape,
    ranks: Ranks,
) -> Result<TuckerPoint> {
    for n in 0..3 {
        if ranks[n] == 0 || ranks[n] > shape[n] {
            return arg_err(format!("rank {:?} invalid for shape {:?}", ranks, shape));
        }
    }
    let core = rng.gaussian_tensor(ranks);
    let factors = [0, 1, 2].map(|n| StiefelPoint(rng.orthonormal(shape[n], ranks[n])));
    TuckerPoint::new(core, factors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn stiefel(rng: &mut SeededRng, n: usize, p: usize) -> StiefelPoint {
        StiefelPoint::new(rng.orthonormal(n, p)).unwrap()
    }

    fn projector(u: &Matrix) -> Matrix {
        u.mul_unchecked(&u.transpose())
    }

    #[test]
    fn stiefel_projection_basics() {
        let mut rng = SeededRng::new(21);
        let u = stiefel(&mut rng, 6, 3);
        assert!(
            tangent_project_stiefel(&u, u.matrix())
                .unwrap()
                .frobenius_norm()
                <= 1e-10
        );
        let g = rng.gaussian_matrix(6, 3);
        let xi = tangent_project_stiefel(&u, &g).unwrap();
        assert!(stiefel_tangency_residual(&u, &xi) <= 1e-10);
        let again = tangent_project_stiefel(&u, &xi).unwrap();
        assert!(again.max_abs_diff(&xi) <= 1e-12);
        assert!(tangent_project_stiefel(&u, &Matrix::zeros(5, 3)).is_err());
    }

    #[test]
    fn qr_retraction_fixes_orthonormal_and_scaled_inputs() {
        let mut rng = SeededRng::new(22);
        let u = stiefel(&mut rng, 5, 2);
        let q = qr_retraction(u.matrix()).unwrap();
        assert!(q.matrix().max_abs_diff(u.matrix()) <= 1e-12);
        let q3 = qr_retraction(&u.matrix().scale(3.0)).unwrap();
        assert!(q3.matrix().max_abs_diff(u.matrix()) <= 1e-12);
    }

    #[test]
    fn qr_retraction_preserves_span() {
        let mut rng = SeededRng::new(23);
        for _ in 0..10 {
            let y = rng.gaussian_matrix(7, 3);
            let q = qr_retraction(&y).unwrap();
            assert!(q.matrix().orthonormality_defect() <= 1e-10);
            // Projector onto span(Y) via the normal equations, independent of QR.
            let gram = y.transpose().mul_unchecked(&y);
            let py = y
                .mul_unchecked(&pseudo_inverse(&gram))
                .mul_unchecked(&y.transpose());
            assert!(projector(q.matrix()).max_abs_diff(&py) <= 1e-9);
        }
    }

    #[test]
    fn qr_retraction_rejects_rank_deficiency() {
        let y = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        assert!(matches!(
            qr_retraction(&y),
            Err(Error::Singular { index: 1, .. })
        ));
        assert!(qr_retraction(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn qr_retraction_is_deterministic() {
        let y = SeededRng::new(24).gaussian_matrix(6, 4);
        let a = qr_retraction(&y).unwrap();
        let b = qr_retraction(&y.clone()).unwrap();
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.matrix()), bits(b.matrix()));
    }

    #[test]
    fn stiefel_step_zero_gradient_and_slope() {
        let mut rng = SeededRng::new(25);
        let u = stiefel(&mut rng, 6, 2);
        let s = stiefel_step(&u, &Matrix::zeros(6, 2), 0.3).unwrap();
        assert!(s.matrix().max_abs_diff(u.matrix()) <= 1e-12);

        let g = rng.gaussian_matrix(6, 2);
        let d3 = stiefel_step(&u, &g, 1e-3)
            .unwrap()
            .matrix()
            .sub(u.matrix())
            .unwrap()
            .frobenius_norm();
        let d4 = stiefel_step(&u, &g, 1e-4)
            .unwrap()
            .matrix()
            .sub(u.matrix())
            .unwrap()
            .frobenius_norm();
        let ratio = d3 / d4;
        assert!((ratio - 10.0).abs() < 0.05, "displacement ratio {ratio}");
        assert!(stiefel_step(&u, &g, 0.0).is_err());
    }

    #[test]
    fn stiefel_step_descends_on_trace_objective() {
        let mut rng = SeededRng::new(26);
        let b = rng.gaussian_matrix(6, 6);
        let a = b
            .transpose()
            .mul_unchecked(&b)
            .add_scaled(&Matrix::identity(6), 1.0)
            .unwrap();
        let f = |u: &Matrix| {
            -u.tmul_unchecked(&a.mul_unchecked(u))
                .data()
                .iter()
                .step_by(u.cols() + 1)
                .sum::<f64>()
        };
        let mut u = stiefel(&mut rng, 6, 2);
        for _ in 0..20 {
            let egrad = a.mul_unchecked(u.matrix()).scale(-2.0);
            let next = stiefel_step(&u, &egrad, 1e-3).unwrap();
            assert!(f(next.matrix()) <= f(u.matrix()) + 1e-12);
            u = next;
        }
    }

    fn random_point(seed: u64) -> TuckerPoint {
        let mut rng = SeededRng::new(seed);
        random_tucker_point(&mut rng, [5, 4, 6], [2, 3, 2]).unwrap()
    }

    fn random_tangent(p: &TuckerPoint, rng: &mut SeededRng) -> TuckerTangent {
        let shape = p.ambient_shape();
        let ranks = p.ranks();
        let factors = [0, 1, 2].map(|n| {
            let raw = rng.gaussian_matrix(shape[n], ranks[n]);
            let u = p.factors[n].matrix();
            raw.sub(&u.mul_unchecked(&u.tmul_unchecked(&raw))).unwrap()
        });
        TuckerTangent {
            core: rng.gaussian_tensor(ranks),
            factors,
        }
    }

    #[test]
    fn riemannian_gradient_projection() {
        let p = random_point(31);
        let mut rng = SeededRng::new(32);
        let zero = riemannian_grad_tucker(&p, &Tensor3::zeros(p.ambient_shape())).unwrap();
        assert_eq!(zero.embed(&p).frobenius_norm(), 0.0);

        let xi = random_tangent(&p, &mut rng);
        let amb = xi.embed(&p);
        let back = riemannian_grad_tucker(&p, &amb).unwrap();
        assert!(back.embed(&p).max_abs_diff(&amb) <= 1e-9);

        let g = rng.gaussian_tensor(p.ambient_shape());
        let pg = riemannian_grad_tucker(&p, &g).unwrap();
        assert!(pg.gauge_residual(&p) <= 1e-10);
        // Orthogonal projection: residual is orthogonal to the tangent image.
        let resid = &g - &pg.embed(&p);
        assert!(resid.inner(&amb).abs() <= 1e-9 * g.frobenius_norm() * amb.frobenius_norm());
        assert!(riemannian_grad_tucker(&p, &Tensor3::zeros([5, 4, 5])).is_err());
    }

    #[test]
    fn tucker_retraction_zero_and_first_order() {
        let p = random_point(33);
        let mut rng = SeededRng::new(34);
        let x = p.to_tensor();
        let r0 = tucker_retract(&p, &TuckerTangent::zero(&p), 1.0).unwrap();
        assert!(r0.to_tensor().max_abs_diff(&x) <= 1e-10);

        let xi = random_tangent(&p, &mut rng);
        let amb = xi.embed(&p);
        let err = |h: f64| {
            let moved = tucker_retract(&p, &xi, h).unwrap().to_tensor();
            (&(&moved - &x) - &amb.scale(h)).frobenius_norm()
        };
        // Second-order remainder: halving h quarters the error (or better).
        let (e1, e2) = (err(1e-2), err(5e-3));
        assert!(e2 <= 0.3 * e1, "remainders {e1:e} {e2:e}");
    }

    #[test]
    fn tucker_steps_toward_target_decrease_distance() {
        let mut rng = SeededRng::new(35);
        let target = random_tucker_point(&mut rng, [5, 5, 5], [2, 2, 2])
            .unwrap()
            .to_tensor();
        let mut p = random_tucker_point(&mut rng, [5, 5, 5], [2, 2, 2]).unwrap();
        let mut prev = p.to_tensor().distance(&target);
        for _ in 0..50 {
            let g = riemannian_grad_tucker(&p, &(&p.to_tensor() - &target)).unwrap();
            p = tucker_retract(&p, &g.scale(-1.0), 0.1).unwrap();
            let d = p.to_tensor().distance(&target);
            assert!(d < prev, "distance rose {prev} -> {d}");
            prev = d;
        }
    }

    #[test]
    fn rank_collapse_is_an_error() {
        let x = Tensor3::outer(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[1.0, 1.0, 0.0]);
        assert!(matches!(
            TuckerPoint::from_tensor(&x, [2, 1, 1]),
            Err(Error::RankDeficient {
                mode: 0,
                rank: 2,
                ..
            })
        ));
    }
}
