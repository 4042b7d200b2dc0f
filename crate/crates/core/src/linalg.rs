//! Dense symmetric eigen-decomposition and SVD by cyclic Jacobi sweeps,
//! plus rank correlation. Everything is deterministic: fixed sweep order and
//! a fixed sign convention on every returned vector.

use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 100;

/// Eigenvalues (descending) and matching unit eigenvectors as columns of a
/// `n x n` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Tensor,
}

/// Flip `v` so its first entry with magnitude above `tol` is positive.
pub fn fix_sign(v: &mut [f64]) {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = scale * 1e-12;
    if let Some(&x) = v.iter().find(|x| x.abs() > tol) {
        if x < 0.0 {
            v.iter_mut().for_each(|y| *y = -*y);
        }
    }
}

/// Cyclic Jacobi on a symmetric matrix. Only the upper triangle is read.
pub fn symmetric_eigen(m: &Tensor) -> SymmetricEigen {
    let n = m.rows();
    assert_eq!(n, m.cols(), "symmetric_eigen needs a square matrix");
    let mut a: Vec<f64> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            if i <= j {
                m.get(i, j)
            } else {
                m.get(j, i)
            }
        })
        .collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let total: f64 = a.iter().map(|x| x * x).sum();
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off <= total * 1e-30 || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[p * n + p], a[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Tensor::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        let mut e: Vec<f64> = (0..n).map(|k| v[k * n + i]).collect();
        fix_sign(&mut e);
        for (k, x) in e.into_iter().enumerate() {
            vectors.set(k, col, x);
        }
    }
    SymmetricEigen { values, vectors }
}

/// Thin SVD `M = U diag(sigma) V^T` with `min(rows, cols)` components,
/// singular values descending. Left vectors follow the sign convention of
/// [`fix_sign`]; right vectors are derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct Svd {
    pub sigma: Vec<f64>,
    /// `rows x r`.
    pub u: Tensor,
    /// `cols x r`.
    pub v: Tensor,
}

pub fn svd(m: &Tensor) -> Svd {
    let (rows, cols) = m.shape();
    let r = rows.min(cols);
    // Eigen-solve the smaller Gram matrix; its vectors are one side's
    // singular vectors and the other side follows by projection.
    let tall = rows >= cols;
    let gram = if tall {
        m.transpose().matmul(m)
    } else {
        m.matmul(&m.transpose())
    }
    .expect("gram shapes agree");
    let eig = symmetric_eigen(&gram);
    let sigma: Vec<f64> = eig
        .values
        .iter()
        .take(r)
        .map(|&x| x.max(0.0).sqrt())
        .collect();
    let mut u = Tensor::zeros(rows, r);
    let mut v = Tensor::zeros(cols, r);
    let top = sigma.first().copied().unwrap_or(0.0);
    for k in 0..r {
        let small: Vec<f64> = (0..eig.vectors.rows())
            .map(|i| eig.vectors.get(i, k))
            .collect();
        // Project through M to get the other side.
        let mut other = vec![0.0; if tall { rows } else { cols }];
        if tall {
            for (i, o) in other.iter_mut().enumerate() {
                *o = (0..cols).map(|j| m.get(i, j) * small[j]).sum();
            }
        } else {
            for (j, o) in other.iter_mut().enumerate() {
                *o = (0..rows).map(|i| m.get(i, j) * small[i]).sum();
            }
        }
        let norm = other.iter().map(|x| x * x).sum::<f64>().sqrt();
        let degenerate = sigma[k] <= top * 1e-12 || norm == 0.0;
        let (mut left, mut right) = if tall { (other, small) } else { (small, other) };
        let projected = if tall { &mut left } else { &mut right };
        if degenerate {
            let done = if tall { &u } else { &v };
            *projected = orthogonal_completion(done, k);
        } else {
            projected.iter_mut().for_each(|x| *x /= norm);
        }
        if !degenerate {
            // Fix the sign on the left vector and carry it to the right.
            let before = left.clone();
            fix_sign(&mut left);
            if left != before {
                right.iter_mut().for_each(|x| *x = -*x);
            }
        }
        for (i, x) in left.into_iter().enumerate() {
            u.set(i, k, x);
        }
        for (j, x) in right.into_iter().enumerate() {
            v.set(j, k, x);
        }
    }
    Svd { sigma, u, v }
}

/// A unit vector orthogonal to the first `k` columns of `basis`, built from
/// the first standard basis vector that leaves a usable residual.
fn orthogonal_completion(basis: &Tensor, k: usize) -> Vec<f64> {
    let n = basis.rows();
    for e in 0..n {
        let mut x = vec![0.0; n];
        x[e] = 1.0;
        for _ in 0..2 {
            for c in 0..k {
                let d: f64 = (0..n).map(|i| x[i] * basis.get(i, c)).sum();
                for (i, xi) in x.iter_mut().enumerate() {
                    *xi -= d * basis.get(i, c);
                }
            }
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.5 {
            return x.into_iter().map(|v| v / norm).collect();
        }
    }
    vec![0.0; n]
}

/// Average ranks, ties share the mean of their positions (1-based).
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0))
}
