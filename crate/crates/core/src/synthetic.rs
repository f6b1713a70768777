//! Synthetic low-rank instances.

use crate::error::{arg_err, Result};
use crate::manifold::{StiefelPoint, TuckerPoint};
use crate::rng::SeededRng;
use crate::tensor::{Ranks, Shape, Tensor3};

/// A target of exact multilinear rank and a noisy observation of it.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticInstance {
    /// `target + noise_floor · N(0, 1)` entrywise.
    pub instance: Tensor3,
    /// Gaussian core times random orthonormal factors.
    pub target: Tensor3,
    /// The target in Tucker form.
    pub target_point: TuckerPoint,
}

/// Deterministic per `seed`.
pub fn gen_synthetic(
    shape: Shape,
    true_ranks: Ranks,
    noise_floor: f64,
    seed: u64,
) -> Result<SyntheticInstance> {
    for n in 0..3 {
        if shape[n] == 0 {
            return arg_err(format!("shape {shape:?} must be positive"));
        }
        if true_ranks[n] == 0 || true_ranks[n] > shape[n] {
            return arg_err(format!("rank {true_ranks:?} invalid for shape {shape:?}"));
        }
    }
    if !(noise_floor >= 0.0 && noise_floor.is_finite()) {
        return arg_err(format!(
            "noise floor must be finite and >= 0, got {noise_floor}"
        ));
    }
    let mut rng = SeededRng::derive(seed, 0x7a7a);
    let core = rng.gaussian_tensor(true_ranks);
    let factors = [0, 1, 2].map(|n| rng.orthonormal(shape[n], true_ranks[n]));
    let target_point = TuckerPoint::new(
        core,
        factors.map(|f| StiefelPoint::new(f).expect("QR output")),
    )?;
    let target = target_point.to_tensor();
    let instance = if noise_floor == 0.0 {
        target.clone()
    } else {
        let mut noise = SeededRng::derive(seed, 0x6e6f);
        target.add_scaled(&noise.gaussian_tensor(shape), noise_floor)
    };
    Ok(SyntheticInstance {
        instance,
        target,
        target_point,
    })
}
