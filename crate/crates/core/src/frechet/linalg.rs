//! Symmetric eigendecomposition by cyclic Jacobi rotations.

use super::NEGATIVE_FLOOR;
use crate::error::{LabError, Result};

pub const JACOBI_TOLERANCE: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

fn check_square(a: &[f64], d: usize) -> Result<f64> {
    if a.len() != d * d {
        return Err(LabError::Dimension {
            op: "symmetric matrix",
            lhs: vec![a.len()],
            rhs: vec![d, d],
        });
    }
    let scale = a.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    for i in 0..d {
        for j in i + 1..d {
            if (a[i * d + j] - a[j * d + i]).abs() > SYMMETRY_TOLERANCE * scale {
                return Err(LabError::Contract(format!(
                    "matrix is not symmetric at ({i},{j}): {} vs {}",
                    a[i * d + j],
                    a[j * d + i]
                )));
            }
        }
    }
    Ok(scale)
}

/// Eigenvalues and (if requested) row-major eigenvectors stored column-wise:
/// `v[k*d + j]` is component k of eigenvector j.
pub fn sym_eigen(a: &[f64], d: usize, vectors: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    check_square(a, d)?;
    let mut m = a.to_vec();
    let mut v = if vectors {
        let mut v = vec![0.0; d * d];
        (0..d).for_each(|i| v[i * d + i] = 1.0);
        v
    } else {
        Vec::new()
    };
    let total: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut converged = total == 0.0;
    let mut sweep = 0;
    while !converged && sweep < JACOBI_MAX_SWEEPS {
        sweep += 1;
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let tau = (m[q * d + q] - m[p * d + p]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (kp, kq) = (m[k * d + p], m[k * d + q]);
                    m[k * d + p] = c * kp - s * kq;
                    m[k * d + q] = s * kp + c * kq;
                }
                for k in 0..d {
                    let (pk, qk) = (m[p * d + k], m[q * d + k]);
                    m[p * d + k] = c * pk - s * qk;
                    m[q * d + k] = s * pk + c * qk;
                }
                if vectors {
                    for k in 0..d {
                        let (kp, kq) = (v[k * d + p], v[k * d + q]);
                        v[k * d + p] = c * kp - s * kq;
                        v[k * d + q] = s * kp + c * kq;
                    }
                }
            }
        }
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * d + j] * m[i * d + j])
            .sum::<f64>()
            .sqrt();
        converged = off <= JACOBI_TOLERANCE * total;
    }
    if !converged {
        log::warn!("Jacobi eigensolver stopped after {JACOBI_MAX_SWEEPS} sweeps without converging");
    }
    Ok(((0..d).map(|i| m[i * d + i]).collect(), v))
}

/// Square roots of eigenvalues of a PSD matrix. Eigenvalues at rounding
/// level (below d·eps of the largest) are zeroed, since taking their square
/// root would turn 1e-16 noise into 1e-8 errors.
pub(crate) fn clamped_roots(eig: &[f64], d: usize) -> Result<Vec<f64>> {
    let top = eig.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let noise = d as f64 * f64::EPSILON * top;
    eig.iter()
        .map(|&l| {
            if l < -NEGATIVE_FLOOR * top.max(1.0) {
                Err(LabError::Data(format!("matrix is not PSD: eigenvalue {l:e}")))
            } else if l <= noise {
                Ok(0.0)
            } else {
                Ok(l.sqrt())
            }
        })
        .collect()
}

/// Principal square root of a symmetric PSD matrix; small negative
/// eigenvalues are clamped to zero, larger ones are a data error.
pub fn matrix_sqrt_psd(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let (eig, v) = sym_eigen(a, d, true)?;
    let root = clamped_roots(&eig, d)?;
    // S = V diag(root) Vᵀ
    let mut s = vec![0.0; d * d];
    let mut vs = vec![0.0; d * d];
    for k in 0..d {
        for j in 0..d {
            vs[k * d + j] = v[k * d + j] * root[j];
        }
    }
    crate::tensor::kernels::gemm(d, d, d, &vs, false, &v, true, 0.0, &mut s);
    for i in 0..d {
        for j in i + 1..d {
            let x = 0.5 * (s[i * d + j] + s[j * d + i]);
            s[i * d + j] = x;
            s[j * d + i] = x;
        }
    }
    Ok(s)
}
