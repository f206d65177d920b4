//! Dense linear-algebra helpers shared by the controller and funnel code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Replace `m` by its symmetric part.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// `vᵀ S v`.
pub fn quad_form(s: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    let n = v.len();
    let mut acc = 0.0;
    for j in 0..n {
        let mut col = 0.0;
        for i in 0..n {
            col += s[(i, j)] * v[i];
        }
        acc += col * v[j];
    }
    acc
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    max_abs(&(m - m.transpose()))
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Solves `Aᵀ X + X A + C = 0` by the Kronecker (vectorised) formulation.
///
/// Intended for the small state dimensions handled here (n ≤ ~30).
pub fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let at = a.transpose();
    let nn = n * n;
    let mut big = DMatrix::<f64>::zeros(nn, nn);
    // vec(AᵀX) = (I ⊗ Aᵀ) vec X, vec(XA) = (Aᵀ ⊗ I) vec X, column-major vec.
    for blk in 0..n {
        for i in 0..n {
            for j in 0..n {
                big[(blk * n + i, blk * n + j)] += at[(i, j)];
            }
        }
    }
    for bi in 0..n {
        for bj in 0..n {
            let coeff = at[(bi, bj)];
            if coeff == 0.0 {
                continue;
            }
            for i in 0..n {
                big[(bi * n + i, bj * n + i)] += coeff;
            }
        }
    }
    let rhs = DVector::from_iterator(nn, c.iter().map(|v| -v));
    let sol = big
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("Lyapunov operator is singular".into()))?;
    let mut x = DMatrix::from_column_slice(n, n, sol.as_slice());
    symmetrize(&mut x);
    Ok(x)
}

/// Residual of the continuous algebraic Riccati equation,
/// `Aᵀ S + S A − S B R⁻¹ Bᵀ S + Q`.
pub fn care_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> DMatrix<f64> {
    let sb = s * b;
    a.transpose() * s + s * a - &sb * r_inv * sb.transpose() + q
}

/// Result of [`solve_care`].
#[derive(Debug, Clone)]
pub struct CareSolution {
    pub s: DMatrix<f64>,
    /// `R⁻¹ Bᵀ S`.
    pub k: DMatrix<f64>,
    /// Max-norm residual after each refinement step.
    pub residual_history: Vec<f64>,
}

/// Stabilising solution of the continuous algebraic Riccati equation.
///
/// An initial solution comes from the matrix-sign iteration on the
/// Hamiltonian; Newton–Kleinman steps then polish it until the residual
/// is below `1e-10·‖Q‖_max` (or stops improving).
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<CareSolution> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::Input("CARE: inconsistent A/B/Q dimensions".into()));
    }
    let m = b.ncols();
    if r.nrows() != m || r.ncols() != m {
        return Err(Error::Input("CARE: R must be square with B's column count".into()));
    }
    let r_inv = r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Input("CARE: R must be positive definite".into()))?
        .inverse();
    let g = b * &r_inv * b.transpose();

    let mut h = DMatrix::<f64>::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let mut z = h;
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..200 {
        let lu = z.clone().lu();
        let det = lu.determinant();
        if !det.is_finite() || det == 0.0 {
            return Err(Error::Numerical(
                "CARE: Hamiltonian has eigenvalues on the imaginary axis (pair not stabilisable/detectable)".into(),
            ));
        }
        let z_inv = lu
            .try_inverse()
            .ok_or_else(|| Error::Numerical("CARE: sign iteration hit a singular matrix".into()))?;
        let c = det.abs().powf(1.0 / (2.0 * n as f64));
        let next = (&z / c + &z_inv * c) * 0.5;
        let delta = max_abs(&(&next - &z)) / max_abs(&next).max(1.0);
        z = next;
        if delta < 1e-13 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical("CARE: matrix sign iteration did not converge".into()));
    }

    // [W12; W22 + I] S = -[W11 + I; W21]
    let w11 = z.view((0, 0), (n, n)).into_owned();
    let w12 = z.view((0, n), (n, n)).into_owned();
    let w21 = z.view((n, 0), (n, n)).into_owned();
    let w22 = z.view((n, n), (n, n)).into_owned();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::<f64>::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w12);
    lhs.view_mut((n, 0), (n, n)).copy_from(&(w22 + &eye));
    let mut rhs = DMatrix::<f64>::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(w11 + &eye)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-w21));
    let normal = lhs.transpose() * &lhs;
    let mut s = normal
        .lu()
        .solve(&(lhs.transpose() * rhs))
        .ok_or_else(|| Error::Numerical("CARE: sign-function projection is singular".into()))?;
    symmetrize(&mut s);

    let q_scale = max_abs(q).max(f64::MIN_POSITIVE);
    let mut res = max_abs(&care_residual(a, b, q, &r_inv, &s));
    history.push(res);
    for _ in 0..20 {
        if res <= 1e-10 * q_scale {
            break;
        }
        let k = &r_inv * b.transpose() * &s;
        let acl = a - b * &k;
        let rhs = q + k.transpose() * r * &k;
        let candidate = match solve_lyapunov(&acl, &rhs) {
            Ok(x) => x,
            Err(_) => break,
        };
        let cand_res = max_abs(&care_residual(a, b, q, &r_inv, &candidate));
        if !(cand_res < res) {
            break;
        }
        s = candidate;
        res = cand_res;
        history.push(res);
    }

    if !s.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!(
            "CARE: non-finite solution, residual history {history:?}"
        )));
    }
    if res > 1e-8 * q_scale {
        return Err(Error::Numerical(format!(
            "CARE: residual {res:.3e} above tolerance, history {history:?}"
        )));
    }
    let k = &r_inv * b.transpose() * &s;
    let spectral_abscissa = (a - b * &k)
        .complex_eigenvalues()
        .iter()
        .fold(f64::NEG_INFINITY, |acc, ev| acc.max(ev.re));
    if !(spectral_abscissa < 0.0) {
        return Err(Error::Numerical(format!(
            "CARE: solution is not stabilising (max Re λ = {spectral_abscissa:.3e}); is (A, B) stabilisable?"
        )));
    }
    Ok(CareSolution {
        s,
        k,
        residual_history: history,
    })
}

/// Symmetric band matrix stored by its lower band, factorised in place by
/// Cholesky.
#[derive(Debug, Clone)]
pub struct BandSpd {
    n: usize,
    bw: usize,
    /// row `i` holds entries `(i, i−bw) … (i, i)`
    data: Vec<f64>,
}

impl BandSpd {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (self.bw - (i - j))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Adds `v` to entry `(i, j)` (and implicitly `(j, i)`).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        assert!(i - j <= self.bw, "entry ({i}, {j}) outside the band");
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    /// Zeroes row/column `i` and puts `1` on the diagonal.
    pub fn pin_identity(&mut self, i: usize) {
        let lo = i.saturating_sub(self.bw);
        for j in lo..=i {
            let k = self.idx(i, j);
            self.data[k] = 0.0;
        }
        for r in (i + 1)..(i + 1 + self.bw).min(self.n) {
            let k = self.idx(r, i);
            self.data[k] = 0.0;
        }
        let k = self.idx(i, i);
        self.data[k] = 1.0;
    }

    /// In-place Cholesky `A = L Lᵀ`; `false` if not positive definite.
    pub fn factorize(&mut self) -> bool {
        let bw = self.bw;
        for j in 0..self.n {
            let lo = j.saturating_sub(bw);
            let mut d = self.data[self.idx(j, j)];
            for k in lo..j {
                let l = self.data[self.idx(j, k)];
                d -= l * l;
            }
            if !(d > 0.0) || !d.is_finite() {
                return false;
            }
            let d = d.sqrt();
            let jj = self.idx(j, j);
            self.data[jj] = d;
            for i in (j + 1)..(j + 1 + bw).min(self.n) {
                let lo_i = i.saturating_sub(bw).max(lo);
                let mut v = self.data[self.idx(i, j)];
                for k in lo_i..j {
                    v -= self.data[self.idx(i, k)] * self.data[self.idx(j, k)];
                }
                let ij = self.idx(i, j);
                self.data[ij] = v / d;
            }
        }
        true
    }

    /// Solve with a matrix already passed through [`BandSpd::factorize`].
    pub fn solve_factored(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let bw = self.bw;
        let mut y = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut v = y[i];
            for k in lo..i {
                v -= self.data[self.idx(i, k)] * y[k];
            }
            y[i] = v / self.data[self.idx(i, i)];
        }
        for i in (0..n).rev() {
            let hi = (i + 1 + bw).min(n);
            let mut v = y[i];
            for k in (i + 1)..hi {
                v -= self.data[self.idx(k, i)] * y[k];
            }
            y[i] = v / self.data[self.idx(i, i)];
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_cholesky_matches_dense_solve() {
        let n = 9;
        let bw = 2;
        let mut band = BandSpd::zeros(n, bw);
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(bw)..=i {
                let v = if i == j { 4.0 + i as f64 } else { 0.3 * ((i * 7 + j) as f64).sin() };
                band.add(i, j, v);
                dense[(i, j)] = v;
                dense[(j, i)] = v;
            }
        }
        band.pin_identity(4);
        for j in 0..n {
            dense[(4, j)] = 0.0;
            dense[(j, 4)] = 0.0;
        }
        dense[(4, 4)] = 1.0;
        let b: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
        assert!(band.factorize());
        let x = band.solve_factored(&b);
        let expected = dense.lu().solve(&DVector::from_vec(b)).unwrap();
        for i in 0..n {
            assert!((x[i] - expected[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn band_cholesky_detects_indefinite() {
        let mut band = BandSpd::zeros(2, 1);
        band.add(0, 0, 1.0);
        band.add(1, 1, 1.0);
        band.add(1, 0, 2.0);
        assert!(!band.factorize());
    }

    #[test]
    fn lyapunov_scalar() {
        // 2·a·x + c = 0
        let a = DMatrix::from_element(1, 1, -2.0);
        let c = DMatrix::from_element(1, 1, 4.0);
        let x = solve_lyapunov(&a, &c).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn lyapunov_residual_random() {
        let a = DMatrix::from_row_slice(3, 3, &[-1.0, 0.3, 0.0, 0.2, -2.0, 0.5, 0.0, 0.1, -0.7]);
        let c = DMatrix::from_row_slice(3, 3, &[2.0, 0.1, 0.0, 0.1, 1.0, 0.2, 0.0, 0.2, 3.0]);
        let x = solve_lyapunov(&a, &c).unwrap();
        let res = a.transpose() * &x + &x * &a + &c;
        assert!(max_abs(&res) < 1e-12);
    }

    #[test]
    fn quad_form_matches_matrix_product() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let v = DVector::from_vec(vec![1.0, -2.0]);
        let direct = (v.transpose() * &s * &v)[(0, 0)];
        assert!((quad_form(&s, &v) - direct).abs() < 1e-14);
    }

    #[test]
    fn care_rejects_indefinite_r() {
        let a = DMatrix::from_element(1, 1, 0.0);
        let b = DMatrix::from_element(1, 1, 1.0);
        let q = DMatrix::from_element(1, 1, 1.0);
        let r = DMatrix::from_element(1, 1, -1.0);
        assert!(solve_care(&a, &b, &q, &r).is_err());
    }

    #[test]
    fn care_rejects_unstabilisable_pair() {
        // unstable mode with no actuation
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        assert!(solve_care(&a, &b, &q, &r).is_err());
    }
}
