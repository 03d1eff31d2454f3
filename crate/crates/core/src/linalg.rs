//! Compact SVD by one-sided Jacobi rotations, plus truncation helpers.

use crate::autodiff::Tensor;

/// Relative off-diagonal level below which a column pair counts as orthogonal.
const JACOBI_TOL: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 60;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("Jacobi SVD did not converge within {sweeps} sweeps")]
    NonConvergence { sweeps: usize },
    #[error("singular index {index} out of range for rank {rank}")]
    IndexOutOfRange { index: usize, rank: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("expected a 2-D matrix, got shape {0:?}")]
    NotAMatrix(Vec<usize>),
}

/// `W = U · diag(S) · Vᵀ` with `U: m×r`, `V: n×r`, `r = min(m, n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

impl SvdFactors {
    pub fn rows(&self) -> usize {
        self.u.rows()
    }

    pub fn cols(&self) -> usize {
        self.v.rows()
    }

    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// Dense `U · diag(S) · Vᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        self.reconstruct_scaled(&self.s)
    }

    /// Dense `U · diag(weights) · Vᵀ` for an arbitrary per-component weight.
    pub fn reconstruct_scaled(&self, weights: &[f64]) -> Tensor {
        let (m, n, r) = (self.rows(), self.cols(), self.rank());
        let (u, v) = (self.u.data(), self.v.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for k in 0..r {
                let a = u[i * r + k] * weights[k];
                if a == 0.0 {
                    continue;
                }
                let row = &mut out[i * n..(i + 1) * n];
                for (j, x) in row.iter_mut().enumerate() {
                    *x += a * v[j * r + k];
                }
            }
        }
        Tensor::new(vec![m, n], out).expect("m×n buffer")
    }
}

/// Compact SVD of an `m × n` matrix.
pub fn svd(w: &Tensor) -> Result<SvdFactors, LinalgError> {
    let (m, n) = match w.shape() {
        [m, n] => (*m, *n),
        other => return Err(LinalgError::NotAMatrix(other.to_vec())),
    };
    if !w.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let (mut u, s, mut v) = if m >= n {
        jacobi_tall(w.data(), m, n)?
    } else {
        let (u, s, v) = jacobi_tall(w.transpose().data(), n, m)?;
        (v, s, u)
    };
    let r = s.len();
    // Make the largest-magnitude entry of every left vector non-negative.
    for k in 0..r {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for i in 0..m {
            let x = u[i * r + k];
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            for i in 0..m {
                u[i * r + k] = -u[i * r + k];
            }
            for j in 0..n {
                v[j * r + k] = -v[j * r + k];
            }
        }
    }
    Ok(SvdFactors { u: Tensor::new(vec![m, r], u).expect("m×r"), s, v: Tensor::new(vec![n, r], v).expect("n×r") })
}

/// Hestenes one-sided Jacobi for `m ≥ n`. Returns row-major `U (m×n)`,
/// descending `S`, row-major `V (n×n)`.
fn jacobi_tall(a: &[f64], m: usize, n: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), LinalgError> {
    // Column-major working copies.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for i in 0..m {
                        al += cp[i] * cp[i];
                        be += cq[i] * cq[i];
                        ga += cp[i] * cq[i];
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(LinalgError::NonConvergence { sweeps: MAX_SWEEPS });
    }

    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();

    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let mut u: Vec<f64> = if s[k] > 0.0 { cols[j].iter().map(|x| x / s[k]).collect() } else { vec![0.0; m] };
        // Re-orthogonalize against earlier (larger) vectors; small singular
        // values inherit a relative error of order eps·σ_max/σ otherwise.
        if !orthonormalize(&mut u, &ucols) {
            u = complete_basis(&ucols, m);
        }
        ucols.push(u);
    }

    let mut u = vec![0.0; m * n];
    let mut v = vec![0.0; n * n];
    for (k, &j) in order.iter().enumerate() {
        for i in 0..m {
            u[i * n + k] = ucols[k][i];
        }
        for i in 0..n {
            v[i * n + k] = vcols[j][i];
        }
    }
    Ok((u, s, v))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for i in 0..cp.len() {
        let x = cp[i];
        let y = cq[i];
        cp[i] = c * x - s * y;
        cq[i] = s * x + c * y;
    }
}

/// Two passes of modified Gram-Schmidt against `basis`, then normalize.
/// Returns false when the vector collapses.
fn orthonormalize(u: &mut [f64], basis: &[Vec<f64>]) -> bool {
    let start: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if start == 0.0 {
        return false;
    }
    for _ in 0..2 {
        for b in basis {
            let d: f64 = u.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in u.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
    }
    let norm: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-8 * start {
        return false;
    }
    u.iter_mut().for_each(|x| *x /= norm);
    true
}

/// First standard basis direction that survives orthogonalization.
fn complete_basis(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    for e in 0..m {
        let mut u = vec![0.0; m];
        u[e] = 1.0;
        if orthonormalize(&mut u, basis) {
            return u;
        }
    }
    unreachable!("fewer than m orthonormal vectors always admit a completion")
}

/// Restricts factors to the singular components in `keep` (ascending order).
pub fn truncate(factors: &SvdFactors, keep: &[usize]) -> Result<SvdFactors, LinalgError> {
    let r = factors.rank();
    let mut idx: Vec<usize> = keep.to_vec();
    idx.sort_unstable();
    idx.dedup();
    if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
        return Err(LinalgError::IndexOutOfRange { index: bad, rank: r });
    }
    let pick = |t: &Tensor| {
        let rows = t.rows();
        let mut out = Vec::with_capacity(rows * idx.len());
        for i in 0..rows {
            out.extend(idx.iter().map(|&k| t.data()[i * r + k]));
        }
        Tensor::new(vec![rows, idx.len()], out).expect("rows×k")
    };
    Ok(SvdFactors { u: pick(&factors.u), s: idx.iter().map(|&k| factors.s[k]).collect(), v: pick(&factors.v) })
}

pub fn frobenius_norm(t: &Tensor) -> f64 {
    t.data().iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn frobenius_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
        Tensor::new(vec![m, n], (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn gram_error(q: &Tensor) -> f64 {
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

    fn check_invariants(w: &Tensor, f: &SvdFactors) {
        assert!(gram_error(&f.u) <= 1e-8, "UᵀU");
        assert!(gram_error(&f.v) <= 1e-8, "VᵀV");
        assert!(f.s.windows(2).all(|p| p[0] >= p[1]));
        assert!(f.s.iter().all(|&x| x >= 0.0));
        let res = frobenius_distance(&f.reconstruct(), w) / frobenius_norm(w).max(1e-300);
        assert!(res <= 1e-10, "reconstruction residual {res:e}");
    }

    #[test]
    fn identity() {
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let f = svd(&w).unwrap();
        assert_eq!(f.s, vec![1.0, 1.0]);
        let uvt = f.reconstruct_scaled(&[1.0, 1.0]);
        assert!(frobenius_distance(&uvt, &w) < 1e-15);
    }

    #[test]
    fn diagonal() {
        let w = Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        let f = svd(&w).unwrap();
        assert_eq!(f.s, vec![3.0, 2.0]);
        check_invariants(&w, &f);
    }

    #[test]
    fn random_shapes_satisfy_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (m, n) in [(5, 4), (4, 5), (1, 3), (3, 1), (8, 8), (64, 16), (16, 64)] {
            let w = random(&mut rng, m, n);
            let f = svd(&w).unwrap();
            assert_eq!(f.rank(), m.min(n));
            check_invariants(&w, &f);
        }
    }

    #[test]
    fn rank_deficient_and_zero_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random(&mut rng, 6, 1);
        let b = random(&mut rng, 1, 4);
        let w = Tensor::new(
            vec![6, 4],
            crate::autodiff::gemm::matmul(crate::autodiff::gemm::MatRef::new(a.data(), 6, 1), crate::autodiff::gemm::MatRef::new(b.data(), 1, 4)),
        )
        .unwrap();
        let f = svd(&w).unwrap();
        check_invariants(&w, &f);
        assert!(f.s[1] < 1e-12 * f.s[0]);
        let z = Tensor::zeros(&[3, 2]);
        let fz = svd(&z).unwrap();
        assert_eq!(fz.s, vec![0.0, 0.0]);
        assert!(gram_error(&fz.u) <= 1e-8 && gram_error(&fz.v) <= 1e-8);
    }

    #[test]
    fn sign_convention_is_applied() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = random(&mut rng, 7, 5);
        let f = svd(&w).unwrap();
        let r = f.rank();
        for k in 0..r {
            let col: Vec<f64> = (0..7).map(|i| f.u.data()[i * r + k]).collect();
            let max = col.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(max >= 0.0);
        }
        let g = svd(&w).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn transpose_has_same_singular_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let w = random(&mut rng, 6, 5);
        let a = svd(&w).unwrap();
        let b = svd(&w.transpose()).unwrap();
        for (x, y) in a.s.iter().zip(&b.s) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let w = Tensor::new(vec![1, 2], vec![f64::NAN, 1.0]).unwrap();
        assert_eq!(svd(&w), Err(LinalgError::NonFinite));
        assert!(matches!(svd(&Tensor::zeros(&[2, 2, 2])), Err(LinalgError::NotAMatrix(_))));
    }

    #[test]
    fn truncation_error_equals_dropped_singular_value() {
        let w = Tensor::new(vec![3, 3], vec![3.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let f = svd(&w).unwrap();
        let t = truncate(&f, &[0, 1]).unwrap();
        assert!((frobenius_distance(&t.reconstruct(), &w) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_truncation_is_exact() {
        let w = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0]).unwrap();
        let f = svd(&w).unwrap();
        let t = truncate(&f, &[0]).unwrap();
        assert!(frobenius_distance(&t.reconstruct(), &w) < 1e-12);
    }

    #[test]
    fn truncate_rejects_out_of_range() {
        let f = svd(&Tensor::zeros(&[3, 2])).unwrap();
        assert_eq!(truncate(&f, &[2]), Err(LinalgError::IndexOutOfRange { index: 2, rank: 2 }));
    }
}
