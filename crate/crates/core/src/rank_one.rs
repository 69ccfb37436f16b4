//! Sums of weighted rank-one projectors in three dimensions.
//!
//! The Wiener matrix, the lattice sum behind the ion block and every Schur
//! complement of the energy operator onto the ion displacements have the form
//!
//! ```text
//! P = sum_i w_i u_i u_i^T,    w_i >= 0,  |u_i| = 1.
//! ```
//!
//! For rapidly decaying charge densities the weights span thirty or more
//! orders of magnitude, so forming `P` and calling a symmetric eigensolver
//! loses the small eigenvalues entirely. Instead `P = V^T V` with rows
//! `sqrt(w_i) u_i`, and the spectrum is read off the singular values of `V`:
//! rows sorted by norm, Householder QR with column pivoting, then one-sided
//! Jacobi on the transposed triangular factor. That sequence keeps high
//! relative accuracy for row-graded `V`, which is exactly the structure here.

/// `sum_i w_i u_i u_i^T` stored through its factor rows `sqrt(w_i) u_i`.
#[derive(Clone, Debug, Default)]
pub struct ProjectorSum {
    rows: Vec<[f64; 3]>,
}

/// Eigenpairs of a 3x3 symmetric positive semidefinite matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eigen3 {
    /// Ascending.
    pub values: [f64; 3],
    /// `vectors[k]` is the unit eigenvector for `values[k]`.
    pub vectors: [[f64; 3]; 3],
}

impl ProjectorSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            rows: Vec::with_capacity(n),
        }
    }

    /// Adds `weight * dir dir^T / |dir|^2`. Zero weights and zero directions
    /// are skipped.
    pub fn push(&mut self, weight: f64, dir: [f64; 3]) {
        assert!(weight >= 0.0, "negative projector weight {weight}");
        let len = norm3(dir);
        if weight == 0.0 || len == 0.0 {
            return;
        }
        let s = weight.sqrt() / len;
        self.rows.push([dir[0] * s, dir[1] * s, dir[2] * s]);
    }

    /// Appends every term of `other` with its weight multiplied by `factor`.
    pub fn extend_scaled(&mut self, other: &ProjectorSum, factor: f64) {
        assert!(factor >= 0.0);
        if factor == 0.0 {
            return;
        }
        let s = factor.sqrt();
        self.rows
            .extend(other.rows.iter().map(|r| [r[0] * s, r[1] * s, r[2] * s]));
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// The assembled matrix. Accurate entrywise, but not suited for
    /// extracting small eigenvalues.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for r in &self.rows {
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += r[i] * r[j];
                }
            }
        }
        m
    }

    pub fn trace(&self) -> f64 {
        self.rows.iter().map(|r| r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sum()
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigen().values[0]
    }

    pub fn eigen(&self) -> Eigen3 {
        if self.rows.is_empty() {
            return Eigen3 {
                values: [0.0; 3],
                vectors: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            };
        }
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| norm3(*b).total_cmp(&norm3(*a)));
        let (r, perm) = pivoted_qr(&mut rows);
        jacobi_right_vectors(&r, &perm)
    }
}

fn norm3(v: [f64; 3]) -> f64 {
    scaled_norm(&v)
}

/// Euclidean norm with scaling against under/overflow.
fn scaled_norm(v: &[f64]) -> f64 {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    scale * v.iter().map(|x| (x / scale) * (x / scale)).sum::<f64>().sqrt()
}

/// Householder QR with column pivoting of an n x 3 matrix (n may be < 3).
/// Returns the 3x3 upper triangular factor in pivoted column order and the
/// permutation: pivoted column k is original column `perm[k]`.
fn pivoted_qr(a: &mut [[f64; 3]]) -> ([[f64; 3]; 3], [usize; 3]) {
    let n = a.len();
    let mut perm = [0usize, 1, 2];
    let mut r = [[0.0f64; 3]; 3];
    let mut col = Vec::with_capacity(n);
    for k in 0..3 {
        if k >= n {
            break;
        }
        // pivot on the largest trailing column norm, recomputed exactly
        let mut best = k;
        let mut best_norm = -1.0;
        for j in k..3 {
            col.clear();
            col.extend(a[k..].iter().map(|row| row[j]));
            let nrm = scaled_norm(&col);
            if nrm > best_norm {
                best_norm = nrm;
                best = j;
            }
        }
        if best != k {
            perm.swap(k, best);
            for row in a.iter_mut() {
                row.swap(k, best);
            }
            for row in r.iter_mut().take(k) {
                row.swap(k, best);
            }
        }
        col.clear();
        col.extend(a[k..].iter().map(|row| row[k]));
        let alpha_abs = scaled_norm(&col);
        if alpha_abs == 0.0 {
            continue;
        }
        let alpha = if col[0] >= 0.0 { -alpha_abs } else { alpha_abs };
        // v = x - alpha e1, normalized
        let mut v = col.clone();
        v[0] -= alpha;
        let vn = scaled_norm(&v);
        for x in v.iter_mut() {
            *x /= vn;
        }
        for j in k..3 {
            let s: f64 = v.iter().zip(&a[k..]).map(|(vi, row)| vi * row[j]).sum();
            for (vi, row) in v.iter().zip(a[k..].iter_mut()) {
                row[j] -= 2.0 * vi * s;
            }
        }
        r[k][k] = alpha;
        for j in k + 1..3 {
            r[k][j] = a[k][j];
        }
    }
    (r, perm)
}

/// One-sided Jacobi on `X = R^T`. The right singular vectors of `R` (the
/// eigenvectors of `R^T R`) are the normalized columns of `X J`.
fn jacobi_right_vectors(r: &[[f64; 3]; 3], perm: &[usize; 3]) -> Eigen3 {
    // columns of X are the rows of R
    let mut x = *r;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..2 {
            for q in p + 1..3 {
                let a = dot3(&x[p], &x[p]);
                let b = dot3(&x[q], &x[q]);
                let c = dot3(&x[p], &x[q]);
                if c == 0.0 || c.abs() <= 1e-17 * (a.sqrt() * b.sqrt()) {
                    continue;
                }
                rotated = true;
                let zeta = (b - a) / (2.0 * c);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for i in 0..3 {
                    let xp = x[p][i];
                    let xq = x[q][i];
                    x[p][i] = cs * xp - sn * xq;
                    x[q][i] = sn * xp + cs * xq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut pairs: Vec<(f64, [f64; 3])> = x
        .iter()
        .map(|col| {
            let s = scaled_norm(col);
            let dir = if s > 0.0 {
                [col[0] / s, col[1] / s, col[2] / s]
            } else {
                [0.0; 3]
            };
            (s * s, dir)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    complete_basis(&mut pairs);
    let mut values = [0.0; 3];
    let mut vectors = [[0.0; 3]; 3];
    for (k, (val, dir)) in pairs.into_iter().enumerate() {
        values[k] = val;
        for (i, &d) in dir.iter().enumerate() {
            vectors[k][perm[i]] = d;
        }
    }
    Eigen3 { values, vectors }
}

/// Fills zero directions (null singular values) with orthonormal completions.
fn complete_basis(pairs: &mut [(f64, [f64; 3])]) {
    let known: Vec<[f64; 3]> = pairs
        .iter()
        .filter(|p| p.1 != [0.0; 3])
        .map(|p| p.1)
        .collect();
    if known.len() == 3 {
        return;
    }
    let mut basis = known;
    for p in pairs.iter_mut() {
        if p.1 != [0.0; 3] {
            continue;
        }
        let mut best = [0.0; 3];
        let mut best_norm = -1.0;
        for e in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] {
            let mut v = e;
            for b in &basis {
                let d = dot3(&v, b);
                for i in 0..3 {
                    v[i] -= d * b[i];
                }
            }
            let n = scaled_norm(&v);
            if n > best_norm {
                best_norm = n;
                best = [v[0] / n, v[1] / n, v[2] / n];
            }
        }
        basis.push(best);
        p.1 = best;
    }
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
