//! Seeded sample sets and grids used by the certification routines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_SEED: u64 = 0x5eed;

/// Default number of points per axis for condition checks.
pub const CHECK_POINTS: usize = 201;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` equally spaced points from `lo` to `hi`, both included.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => {
            let h = (hi - lo) / (n - 1) as f64;
            (0..n)
                .map(|i| if i + 1 == n { hi } else { lo + i as f64 * h })
                .collect()
        }
    }
}

/// Symmetric grid on `[-horizon, horizon]` with logarithmic spacing away from
/// the origin: `0`, and `±horizon * 10^(-4 (1 - j/m))` for `j = 0..m`.
/// An even `n` is rounded up to the next odd count.
pub fn log_symmetric_grid(horizon: f64, n: usize) -> Vec<f64> {
    let m = n.max(3) / 2;
    let mut pos: Vec<f64> = (0..m)
        .map(|j| {
            let e = -4.0 * (1.0 - j as f64 / (m - 1).max(1) as f64);
            horizon * 10f64.powf(e)
        })
        .collect();
    pos.dedup();
    let mut out: Vec<f64> = pos.iter().rev().map(|x| -x).collect();
    out.push(0.0);
    out.extend(pos);
    out
}

/// All pairs `(t, s)` from `grid × grid` with `t >= s`.
pub fn pairs_ge(grid: &[f64]) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(grid.len() * (grid.len() + 1) / 2);
    for &t in grid {
        for &s in grid {
            if t >= s {
                out.push((t, s));
            }
        }
    }
    out
}

pub fn uniform_pairs(rng: &mut ChaCha8Rng, lo: f64, hi: f64, n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|_| (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)))
        .collect()
}

pub fn uniform_triples(rng: &mut ChaCha8Rng, lo: f64, hi: f64, n: usize) -> Vec<(f64, f64, f64)> {
    (0..n)
        .map(|_| {
            (
                rng.gen_range(lo..=hi),
                rng.gen_range(lo..=hi),
                rng.gen_range(lo..=hi),
            )
        })
        .collect()
}

pub fn point_in_box(rng: &mut ChaCha8Rng, half_width: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.gen_range(-half_width..=half_width))
        .collect()
}
