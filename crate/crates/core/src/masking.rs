//! Adaptive spectral masking (ASM).
//!
//! Each mode keeps the singular directions with `σᵢ ≥ ε·σ₁` and the tensor is
//! projected onto the retained subspaces, `X ×ₙ (Uₙ Mₙ Uₙᵀ)` over all three
//! modes. A mode whose leading singular value is zero keeps nothing.

use crate::error::{arg_err, Result};
use crate::matrix::Matrix;
use crate::tensor::{hosvd, multilinear_product, HosvdFactorization, Ranks, Shape, Tensor3};

/// Per-mode masks at a given relative threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralMaskSet {
    pub eps_rel: f64,
    pub masks: [Vec<bool>; 3],
    pub ranks: Ranks,
}

/// Output of [`asm_compress`]: the masked core in the retained coordinates and
/// the retained factor columns.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedState {
    /// Shape `(r₁, r₂, r₃)`.
    pub masked_core: Tensor3,
    /// Factor `n` is `Iₙ x rₙ`.
    pub masked_factors: [Matrix; 3],
    pub maskset: SpectralMaskSet,
}

impl CompressedState {
    pub fn ranks(&self) -> Ranks {
        self.maskset.ranks
    }

    pub fn ambient_shape(&self) -> Shape {
        [
            self.masked_factors[0].rows(),
            self.masked_factors[1].rows(),
            self.masked_factors[2].rows(),
        ]
    }

    /// `Ψ_ASM(X)` in ambient coordinates.
    pub fn masked_tensor(&self) -> Tensor3 {
        let f = &self.masked_factors;
        multilinear_product(&self.masked_core, [&f[0], &f[1], &f[2]]).expect("consistent shapes")
    }

    pub fn budget(&self) -> u64 {
        budget(self.maskset.ranks)
    }
}

fn check_eps(eps_rel: f64) -> Result<()> {
    if !(eps_rel > 0.0 && eps_rel < 1.0) {
        return arg_err(format!("eps_rel must lie in (0, 1), got {eps_rel}"));
    }
    Ok(())
}

/// Literal threshold rule: `maskᵢ = σᵢ ≥ eps_rel·σ₁`.
///
/// Note that an all-zero spectrum yields all ones here; [`asm_compress`]
/// overrides that case.
pub fn spectral_mask(svals: &[f64], eps_rel: f64) -> Result<Vec<bool>> {
    check_eps(eps_rel)?;
    let Some(&top) = svals.first() else {
        return Ok(Vec::new());
    };
    let thresh = eps_rel * top;
    Ok(svals.iter().map(|&s| s >= thresh).collect())
}

/// Mask used by the compressor: the literal rule, except a zero spectrum keeps
/// nothing.
pub fn mode_mask(svals: &[f64], eps_rel: f64) -> Result<Vec<bool>> {
    let mut m = spectral_mask(svals, eps_rel)?;
    if svals.first().is_none_or(|&s| s <= 0.0) {
        m.iter_mut().for_each(|b| *b = false);
    }
    Ok(m)
}

pub fn mask_set(f: &HosvdFactorization, eps_rel: f64) -> Result<SpectralMaskSet> {
    let mut masks: [Vec<bool>; 3] = Default::default();
    let mut ranks = [0; 3];
    for n in 0..3 {
        masks[n] = mode_mask(&f.svals[n], eps_rel)?;
        ranks[n] = masks[n].iter().filter(|&&b| b).count();
    }
    Ok(SpectralMaskSet {
        eps_rel,
        masks,
        ranks,
    })
}

/// ASM from a precomputed factorization.
pub fn asm_from_hosvd(f: &HosvdFactorization, eps_rel: f64) -> Result<CompressedState> {
    let maskset = mask_set(f, eps_rel)?;
    let ranks = maskset.ranks;
    // Masks are prefixes because the spectra are sorted, so the retained
    // columns are the leading ones and Ĝ is the leading core block.
    let masked_core = f.core.leading_block(ranks)?;
    let masked_factors = [
        f.factors[0].leading_columns(ranks[0]),
        f.factors[1].leading_columns(ranks[1]),
        f.factors[2].leading_columns(ranks[2]),
    ];
    Ok(CompressedState {
        masked_core,
        masked_factors,
        maskset,
    })
}

pub fn asm_compress(x: &Tensor3, eps_rel: f64) -> Result<CompressedState> {
    check_eps(eps_rel)?;
    asm_from_hosvd(&hosvd(x), eps_rel)
}

/// Query budget proxy `r₁·r₂·r₃`.
pub fn budget(ranks: Ranks) -> u64 {
    ranks.iter().map(|&r| r as u64).product()
}

/// Multiplicative controller that nudges ε toward a budget cap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsController {
    pub up: f64,
    pub down: f64,
    pub eps_min: f64,
    pub eps_max: f64,
}

impl Default for EpsController {
    fn default() -> Self {
        Self {
            up: 1.1,
            down: 0.9,
            eps_min: 1e-6,
            eps_max: 0.999,
        }
    }
}

impl EpsController {
    /// Raise ε when over budget, lower it when under, hold on equality.
    pub fn adapt(&self, eps: f64, achieved_budget: u64, tau: u64) -> f64 {
        let next = match achieved_budget.cmp(&tau) {
            std::cmp::Ordering::Greater => eps * self.up,
            std::cmp::Ordering::Less => eps * self.down,
            std::cmp::Ordering::Equal => eps,
        };
        next.clamp(self.eps_min, self.eps_max)
    }

    /// Compress at `eps`, raising ε until the budget fits `tau` or ε saturates.
    /// Returns the state and the accepted ε.
    pub fn compress_within_budget(
        &self,
        f: &HosvdFactorization,
        mut eps: f64,
        tau: u64,
    ) -> Result<(CompressedState, f64)> {
        loop {
            let cs = asm_from_hosvd(f, eps)?;
            if cs.budget() <= tau || eps >= self.eps_max {
                return Ok((cs, eps));
            }
            eps = self.adapt(eps, cs.budget(), tau);
        }
    }
}

/// `adapt_epsilon` with the default controller constants.
pub fn adapt_epsilon(eps: f64, achieved_budget: u64, tau: u64) -> f64 {
    EpsController::default().adapt(eps, achieved_budget, tau)
}
