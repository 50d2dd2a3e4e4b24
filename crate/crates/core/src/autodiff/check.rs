use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Options for the finite-difference gradient oracle.
#[derive(Debug, Clone)]
pub struct FdOptions {
    /// Central-difference step; must lie in [1e-7, 1e-3].
    pub eps: f64,
    /// Check at most this many coordinates; larger parameter sets are
    /// subsampled with the given seed. At least 256 coordinates are kept
    /// whenever the parameter set has that many.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { eps: 1e-5, max_coords: 256, seed: 0 }
    }
}

/// Compare an analytic gradient against central differences of `loss_fn`.
///
/// Returns the maximum relative error |g_a - g_fd| / max(1, |g_a|, |g_fd|)
/// over the checked coordinates. `loss_fn` must be deterministic; two
/// identical forward calls that disagree are a contract violation.
pub fn finite_difference_check(
    mut loss_fn: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    opts: &FdOptions,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::Contract(format!("eps {} outside [1e-7, 1e-3]", opts.eps)));
    }
    if params.len() != analytic.len() {
        return Err(Error::Contract("params/analytic length mismatch".into()));
    }
    let l0 = loss_fn(params);
    let l1 = loss_fn(params);
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::Contract("loss_fn is not deterministic".into()));
    }

    let n = params.len();
    let coords: Vec<usize> = if n <= opts.max_coords.max(256) {
        (0..n).collect()
    } else {
        let keep = opts.max_coords.max(256);
        let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
        let mut picked = std::collections::BTreeSet::new();
        while picked.len() < keep {
            picked.insert(rng.gen_range(0..n));
        }
        picked.into_iter().collect()
    };

    let mut scratch = params.to_vec();
    let mut max_rel = 0.0f64;
    for &i in &coords {
        let orig = scratch[i];
        scratch[i] = orig + opts.eps;
        let lp = loss_fn(&scratch);
        scratch[i] = orig - opts.eps;
        let lm = loss_fn(&scratch);
        scratch[i] = orig;
        let g_fd = (lp - lm) / (2.0 * opts.eps);
        let g_a = analytic[i];
        let rel = (g_a - g_fd).abs() / 1.0f64.max(g_a.abs()).max(g_fd.abs());
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
