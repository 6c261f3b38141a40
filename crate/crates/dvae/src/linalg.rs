//! Small dense linear algebra for D x D latent-space matrices.
//!
//! Latent dimensions stay tiny (D <= 64), so LU with partial pivoting and
//! modified Gram-Schmidt are plenty. Nothing here is performance critical.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// LU factorization with partial pivoting. Returns (packed LU, row permutation,
/// permutation sign), or an error for a singular matrix.
fn lu_decompose(m: &Tensor) -> Result<(Vec<f64>, Vec<usize>, f64)> {
    let d = m.nrows();
    if m.rank() != 2 || m.ncols() != d {
        return Err(Error::Shape { op: "lu", detail: format!("need square, got {:?}", m.shape()) });
    }
    let mut a = m.data().to_vec();
    let mut perm: Vec<usize> = (0..d).collect();
    let mut sign = 1.0;
    for col in 0..d {
        let mut pivot = col;
        let mut best = a[col * d + col].abs();
        for row in col + 1..d {
            let v = a[row * d + col].abs();
            if v > best {
                best = v;
                pivot = row;
            }
        }
        if best == 0.0 {
            return Err(Error::Numeric("singular matrix in LU factorization".into()));
        }
        if pivot != col {
            for j in 0..d {
                a.swap(col * d + j, pivot * d + j);
            }
            perm.swap(col, pivot);
            sign = -sign;
        }
        let diag = a[col * d + col];
        for row in col + 1..d {
            let f = a[row * d + col] / diag;
            a[row * d + col] = f;
            for j in col + 1..d {
                a[row * d + j] -= f * a[col * d + j];
            }
        }
    }
    Ok((a, perm, sign))
}

/// Determinant of a square matrix.
pub fn det(m: &Tensor) -> Result<f64> {
    match lu_decompose(m) {
        Ok((lu, _, sign)) => {
            let d = m.nrows();
            let mut out = sign;
            for i in 0..d {
                out *= lu[i * d + i];
            }
            Ok(out)
        }
        Err(Error::Numeric(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Solve m x = b for x.
pub fn solve(m: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    let d = m.nrows();
    if b.len() != d {
        return Err(Error::Shape { op: "solve", detail: format!("rhs {} vs {}", b.len(), d) });
    }
    let (lu, perm, _) = lu_decompose(m)?;
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut v = b[perm[i]];
        for j in 0..i {
            v -= lu[i * d + j] * y[j];
        }
        y[i] = v;
    }
    for i in (0..d).rev() {
        let mut v = y[i];
        for j in i + 1..d {
            v -= lu[i * d + j] * y[j];
        }
        y[i] = v / lu[i * d + i];
    }
    Ok(y)
}

/// Orthonormalize the columns of `m` in place with two rounds of modified
/// Gram-Schmidt. Errors when the columns are numerically dependent.
pub fn orthonormalize_columns(m: &mut Tensor) -> Result<()> {
    let (r, c) = (m.nrows(), m.ncols());
    for _round in 0..2 {
        for j in 0..c {
            for k in 0..j {
                let mut dot = 0.0;
                for i in 0..r {
                    dot += m.get2(i, k) * m.get2(i, j);
                }
                for i in 0..r {
                    let v = m.get2(i, j) - dot * m.get2(i, k);
                    m.set2(i, j, v);
                }
            }
            let mut norm = 0.0;
            for i in 0..r {
                norm += m.get2(i, j) * m.get2(i, j);
            }
            let norm = norm.sqrt();
            if norm < 1e-300 {
                return Err(Error::Numeric("dependent columns in orthonormalization".into()));
            }
            for i in 0..r {
                m.set2(i, j, m.get2(i, j) / norm);
            }
        }
    }
    Ok(())
}

/// max_ij |RᵀR - I|, a cheap orthogonality defect.
pub fn orthogonality_defect(r: &Tensor) -> Result<f64> {
    let gram = r.transpose()?.matmul(r)?;
    let d = gram.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram.get2(i, j) - target).abs());
        }
    }
    Ok(worst)
}

/// Uniform-ish random rotation: orthonormalized Gaussian matrix with the last
/// column flipped when needed to pin det = +1.
pub fn random_rotation(d: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let data: Vec<f64> = (0..d * d).map(|_| rng.sample(StandardNormal)).collect();
    let mut q = Tensor::new(vec![d, d], data)?;
    orthonormalize_columns(&mut q)?;
    if det(&q)? < 0.0 {
        for i in 0..d {
            q.set2(i, d - 1, -q.get2(i, d - 1));
        }
    }
    Ok(q)
}

/// 2-d rotation by `theta` radians.
pub fn rotation_2d(theta: f64) -> Tensor {
    let (s, c) = theta.sin_cos();
    Tensor::new(vec![2, 2], vec![c, -s, s, c]).expect("static shape")
}

/// Top `k` singular values of `x` (rows = samples), after centering columns.
/// Orthogonal iteration on the smaller Gram matrix.
pub fn top_singular_values(x: &Tensor, k: usize) -> Result<Vec<f64>> {
    let (n, p) = (x.nrows(), x.ncols());
    if k == 0 || k > n.min(p) {
        return Err(Error::InvalidSpec(format!(
            "need 1 <= k <= min(n, p), got k={} for {}x{}",
            k, n, p
        )));
    }
    // Center columns.
    let mut xc = x.clone();
    for j in 0..p {
        let mut mean = 0.0;
        for i in 0..n {
            mean += xc.get2(i, j);
        }
        mean /= n as f64;
        for i in 0..n {
            let v = xc.get2(i, j) - mean;
            xc.set2(i, j, v);
        }
    }
    // Gram matrix on the smaller side; eigenvalues are squared singular values.
    let gram = if p <= n {
        xc.transpose()?.matmul(&xc)?
    } else {
        xc.matmul(&xc.transpose()?)?
    };
    let g = gram.nrows();
    // Deterministic full-rank-ish start.
    let mut v = Tensor::new(
        vec![g, k],
        (0..g * k).map(|i| (1.37 * (i as f64 + 1.0)).sin()).collect(),
    )?;
    orthonormalize_columns(&mut v)?;
    let mut eigs = vec![0.0; k];
    for _ in 0..500 {
        let mut w = gram.matmul(&v)?;
        orthonormalize_columns(&mut w)?;
        let gv = gram.matmul(&w)?;
        let mut new_eigs = vec![0.0; k];
        for j in 0..k {
            let mut dot = 0.0;
            for i in 0..g {
                dot += w.get2(i, j) * gv.get2(i, j);
            }
            new_eigs[j] = dot;
        }
        let moved = new_eigs
            .iter()
            .zip(&eigs)
            .map(|(a, b)| (a - b).abs() / (1.0 + a.abs()))
            .fold(0.0_f64, f64::max);
        v = w;
        eigs = new_eigs;
        if moved < 1e-13 {
            break;
        }
    }
    let mut sv: Vec<f64> = eigs.iter().map(|&e| e.max(0.0).sqrt()).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    Ok(sv)
}
