//! Test-only oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use curio_core::factorization::{MfHyper, Rating};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Ground-truth low-rank ratings `3 + U V^T + noise`, split into train and
/// held-out parts. Returns `(train, held_out, noiseless truth of held_out)`.
pub struct LowRank {
    pub train: Vec<Rating>,
    pub held_out: Vec<Rating>,
}

pub fn low_rank_ratings(users: usize, items: usize, rank: usize, noise_std: f64, density: f64, seed: u64) -> LowRank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Factor entries scaled so a rating's signal has unit variance.
    let factor = Normal::new(0.0, (rank as f64).powf(-0.25)).unwrap();
    let noise = Normal::new(0.0, noise_std).unwrap();
    let u: Vec<Vec<f64>> = (0..users)
        .map(|_| (0..rank).map(|_| factor.sample(&mut rng)).collect())
        .collect();
    let v: Vec<Vec<f64>> = (0..items)
        .map(|_| (0..rank).map(|_| factor.sample(&mut rng)).collect())
        .collect();
    let mut train = Vec::new();
    let mut held_out = Vec::new();
    for a in 0..users {
        for b in 0..items {
            if rng.random::<f64>() >= density {
                continue;
            }
            let mut signal = 0.0;
            for k in 0..rank {
                signal += u[a][k] * v[b][k];
            }
            let r = Rating {
                user_id: a as u32,
                item_id: b as u32,
                value: 3.0 + signal + noise.sample(&mut rng),
            };
            if rng.random::<f64>() < 0.1 {
                held_out.push(r);
            } else {
                train.push(r);
            }
        }
    }
    LowRank { train, held_out }
}

/// Relative error with an absolute floor, used by all gradient checks.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central finite difference of `f` with respect to `params[idx]`.
pub fn central_diff(params: &mut [f64], idx: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = params[idx];
    params[idx] = orig + h;
    let plus = f(params);
    params[idx] = orig - h;
    let minus = f(params);
    params[idx] = orig;
    (plus - minus) / (2.0 * h)
}

/// Hyper-parameters for the synthetic low-rank recovery check.
pub fn synthetic_hyper() -> MfHyper {
    MfHyper {
        dim: 80,
        lr: 0.03,
        reg: 0.02,
        epochs: 20,
        init_std: 0.05,
    }
}
