//! Seeded k-means on embedding rows with k-means++ initialization and a
//! fixed restart-to-seed mapping, so results do not depend on scheduling.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub(crate) struct KmeansOutcome {
    pub labels: Vec<usize>,
    pub distortion: f64,
}

const MAX_LLOYD_ITER: usize = 300;

fn restart_seed(seed: u64, restart: u64) -> u64 {
    seed.wrapping_add((restart + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Lowest-distortion labeling over `restarts` independent runs. Ties keep
/// the earliest restart.
pub(crate) fn cluster(data: &Array2<f64>, k: usize, seed: u64, restarts: usize) -> KmeansOutcome {
    let mut best: Option<KmeansOutcome> = None;
    for r in 0..restarts {
        let outcome = single_run(data, k, restart_seed(seed, r as u64));
        let better = match &best {
            None => true,
            Some(b) => outcome.distortion < b.distortion,
        };
        if better {
            best = Some(outcome);
        }
    }
    best.expect("at least one restart")
}

fn single_run(data: &Array2<f64>, k: usize, seed: u64) -> KmeansOutcome {
    let n = data.nrows();
    let dim = data.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row = |i: usize| data.row(i).to_slice().expect("standard layout");

    // k-means++ seeding.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(row(rng.random_range(0..n)).to_vec());
    let mut dist2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // Degenerate data: every point coincides with a center.
            rng.random_range(0..n)
        };
        centers.push(row(next).to_vec());
        for i in 0..n {
            let d = sq_dist(row(i), centers.last().unwrap());
            if d < dist2[i] {
                dist2[i] = d;
            }
        }
    }

    let mut labels = vec![0usize; n];
    for _ in 0..MAX_LLOYD_ITER {
        let mut changed = false;
        for i in 0..n {
            let mut best_c = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(row(i), center);
                if d < best_d {
                    best_d = d;
                    best_c = c;
                }
            }
            if labels[i] != best_c {
                labels[i] = best_c;
                changed = true;
            }
        }

        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0f64; dim]; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            let r = row(i);
            for (s, &x) in sums[labels[i]].iter_mut().zip(r.iter()) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (ctr, s) in centers[c].iter_mut().zip(sums[c].iter()) {
                    *ctr = s / counts[c] as f64;
                }
            } else {
                // Re-seed an empty cluster with the point farthest from its
                // current center (first index wins ties).
                let mut far_i = 0usize;
                let mut far_d = -1.0;
                for i in 0..n {
                    let d = sq_dist(row(i), &centers[labels[i]]);
                    if d > far_d {
                        far_d = d;
                        far_i = i;
                    }
                }
                centers[c] = row(far_i).to_vec();
                labels[far_i] = c;
                changed = true;
            }
        }

        if !changed {
            break;
        }
    }

    let distortion: f64 = (0..n).map(|i| sq_dist(row(i), &centers[labels[i]])).sum();
    KmeansOutcome { labels, distortion }
}
