//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use acip::autodiff::Tensor;
use acip::linalg::SvdFactors;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
    Tensor::matrix(m, n, (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn gram_error(q: &Tensor) -> f64 {
    let (rows, r) = (q.rows(), q.cols());
    let d = q.data();
    let mut worst = 0.0f64;
    for a in 0..r {
        for b in 0..r {
            let dot: f64 = (0..rows).map(|i| d[i * r + a] * d[i * r + b]).sum();
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

/// `Σ_{i∈keep} σ_i u_i v_iᵀ` assembled entry by entry.
pub fn partial_sum(f: &SvdFactors, keep: &[usize]) -> Tensor {
    let (m, n, r) = (f.rows(), f.cols(), f.rank());
    let (u, v) = (f.u.data(), f.v.data());
    let mut out = vec![0.0; m * n];
    for &c in keep {
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += f.s[c] * u[i * r + c] * v[j * r + c];
            }
        }
    }
    Tensor::matrix(m, n, out).unwrap()
}

pub fn subsets(r: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << r).filter(|mask| mask.count_ones() as usize == k).map(|mask| (0..r).filter(|i| mask & (1 << i) != 0).collect()).collect()
}
