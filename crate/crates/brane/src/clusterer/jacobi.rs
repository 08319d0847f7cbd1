//! Cyclic Jacobi eigendecomposition for small dense symmetric matrices.
//! Deterministic rotation order, so repeated runs produce identical bits.

/// Full eigendecomposition of a symmetric n x n matrix (row-major).
/// Returns (eigenvalues, V) with `a = V diag(w) V^T`; V is row-major with
/// eigenvector j in column j. Eigenvalues come back in diagonal order, not
/// sorted.
pub(crate) fn eigh(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    if n <= 1 {
        return (m, v);
    }

    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let stop = 1e-14 * (1.0 + norm);
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += 2.0 * m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() <= stop {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                rotate(&mut m, &mut v, n, p, q);
            }
        }
    }
    let w: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    (w, v)
}

/// One Jacobi rotation zeroing m[p][q], accumulating into v's columns.
fn rotate(m: &mut [f64], v: &mut [f64], n: usize, p: usize, q: usize) {
    let apq = m[p * n + q];
    if apq == 0.0 {
        return;
    }
    let app = m[p * n + p];
    let aqq = m[q * n + q];
    let theta = (aqq - app) / (2.0 * apq);
    let t = if theta >= 0.0 {
        1.0 / (theta + (theta * theta + 1.0).sqrt())
    } else {
        -1.0 / (-theta + (theta * theta + 1.0).sqrt())
    };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let tau = s / (1.0 + c);

    m[p * n + p] = app - t * apq;
    m[q * n + q] = aqq + t * apq;
    m[p * n + q] = 0.0;
    m[q * n + p] = 0.0;
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = m[k * n + p];
        let akq = m[k * n + q];
        let new_p = akp - s * (akq + tau * akp);
        let new_q = akq + s * (akp - tau * akq);
        m[k * n + p] = new_p;
        m[p * n + k] = new_p;
        m[k * n + q] = new_q;
        m[q * n + k] = new_q;
    }
    for k in 0..n {
        let vkp = v[k * n + p];
        let vkq = v[k * n + q];
        v[k * n + p] = vkp - s * (vkq + tau * vkp);
        v[k * n + q] = vkq + s * (vkp - tau * vkq);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn reconstruct(w: &[f64], v: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut sum = 0.0;
                for k in 0..n {
                    sum += v[i * n + k] * w[k] * v[j * n + k];
                }
                out[i * n + j] = sum;
            }
        }
        out
    }

    #[test]
    fn diagonal_matrices_pass_through() {
        let a = [3.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.5];
        let (w, v) = eigh(&a, 3);
        assert_eq!(w, vec![3.0, -1.0, 0.5]);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(v[i * 3 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn known_two_by_two() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3.
        let (mut w, _) = eigh(&[2.0, 1.0, 1.0, 2.0], 2);
        w.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((w[0] - 1.0).abs() <= 1e-12);
        assert!((w[1] - 3.0).abs() <= 1e-12);
    }

    #[test]
    fn random_symmetric_reconstructs_orthonormally() {
        let n = 7;
        let mut r = rng::from_seed(42);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let x: f64 = r.gen_range(-2.0..2.0);
                a[i * n + j] = x;
                a[j * n + i] = x;
            }
        }
        let (w, v) = eigh(&a, n);
        let back = reconstruct(&w, &v, n);
        for (x, y) in a.iter().zip(&back) {
            assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
        }
        for i in 0..n {
            for j in 0..n {
                let mut dot = 0.0;
                for k in 0..n {
                    dot += v[k * n + i] * v[k * n + j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn repeated_eigenvalues_are_fine() {
        let n = 4;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = 2.0;
        }
        let (w, _) = eigh(&a, n);
        assert!(w.iter().all(|&x| (x - 2.0).abs() <= 1e-12));
    }
}
