//! Small dense matrix kernels.
//!
//! Everything here is sized for d, u ≤ 4: Gram matrices instead of an SVD,
//! closed forms where they exist and a cyclic Jacobi sweep otherwise.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance subtracted by certificates that rely on these kernels.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat{}x{}[", self.rows, self.cols)?;
        for i in 0..self.rows {
            if i > 0 {
                write!(f, "; ")?;
            }
            for j in 0..self.cols {
                if j > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{}", self[(i, j)])?;
            }
        }
        write!(f, "]")
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be positive");
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Mat::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be positive");
        Mat { rows, cols, data }
    }

    /// Builds from rows; all rows must share one length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::Dimension("matrix needs at least one row".into()));
        }
        let c = rows[0].as_ref().len();
        if c == 0 {
            return Err(Error::Dimension("matrix needs at least one column".into()));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            let row = row.as_ref();
            if row.len() != c {
                return Err(Error::Dimension(format!("ragged rows: expected {c} entries, got {}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("matrix entries must be finite".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(Mat { rows: r, cols: c, data })
    }

    pub fn block_diag(blocks: &[Mat]) -> Self {
        let rows: usize = blocks.iter().map(|b| b.rows).sum();
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut m = Mat::zeros(rows, cols);
        let (mut r0, mut c0) = (0, 0);
        for b in blocks {
            for i in 0..b.rows {
                for j in 0..b.cols {
                    m[(r0 + i, c0 + j)] = b[(i, j)];
                }
            }
            r0 += b.rows;
            c0 += b.cols;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.rows).all(|i| (0..self.cols).all(|j| i == j || self[(i, j)] == 0.0))
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }

    /// `out += self * v`, without allocating.
    pub fn mul_vec_add(&self, v: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate().take(self.rows) {
            let mut s = 0.0;
            for (a, b) in self.row(i).iter().zip(v) {
                s += a * b;
            }
            *o += s;
        }
    }

    /// A·Aᵀ.
    pub fn gram(&self) -> Mat {
        let mut g = Mat::zeros(self.rows, self.rows);
        for i in 0..self.rows {
            for j in 0..=i {
                let s: f64 = self.row(i).iter().zip(self.row(j)).map(|(a, b)| a * b).sum();
                g[(i, j)] = s;
                g[(j, i)] = s;
            }
        }
        g
    }

    pub fn pow(&self, n: u32) -> Mat {
        assert!(self.is_square());
        let mut result = Mat::identity(self.rows);
        let mut base = self.clone();
        let mut e = n;
        while e > 0 {
            if e & 1 == 1 {
                result = &result * &base;
            }
            e >>= 1;
            if e > 0 {
                base = &base * &base;
            }
        }
        result
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Determinant by LU with partial pivoting.
    pub fn det(&self) -> f64 {
        assert!(self.is_square(), "determinant of a non-square matrix");
        let n = self.rows;
        match n {
            1 => return self.data[0],
            2 => return self.data[0] * self.data[3] - self.data[1] * self.data[2],
            _ => {}
        }
        let mut a = self.data.clone();
        let mut det = 1.0;
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs())).unwrap();
            if a[p * n + k] == 0.0 {
                return 0.0;
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
                det = -det;
            }
            let pivot = a[k * n + k];
            det *= pivot;
            for i in k + 1..n {
                let factor = a[i * n + k] / pivot;
                if factor != 0.0 {
                    for j in k..n {
                        a[i * n + j] -= factor * a[k * n + j];
                    }
                }
            }
        }
        det
    }

    /// Inverse by Gauss–Jordan; `None` when numerically singular.
    pub fn inverse(&self) -> Option<Mat> {
        assert!(self.is_square(), "inverse of a non-square matrix");
        let n = self.rows;
        let scale = self.max_abs();
        if scale == 0.0 {
            return None;
        }
        let mut a = self.data.clone();
        let mut inv = Mat::identity(n).data;
        for k in 0..n {
            let p = (k..n).max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs())).unwrap();
            if a[p * n + k].abs() <= 1e-14 * scale {
                return None;
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                    inv.swap(k * n + j, p * n + j);
                }
            }
            let pivot = a[k * n + k];
            for j in 0..n {
                a[k * n + j] /= pivot;
                inv[k * n + j] /= pivot;
            }
            for i in 0..n {
                if i == k {
                    continue;
                }
                let factor = a[i * n + k];
                if factor != 0.0 {
                    for j in 0..n {
                        a[i * n + j] -= factor * a[k * n + j];
                        inv[i * n + j] -= factor * inv[k * n + j];
                    }
                }
            }
        }
        Some(Mat { rows: n, cols: n, data: inv })
    }

    /// Spectral norm.
    pub fn op_norm(&self) -> f64 {
        if self.rows == 1 || self.cols == 1 {
            return self.frobenius();
        }
        let g = if self.rows <= self.cols { self.gram() } else { self.transpose().gram() };
        let ev = sym_eigenvalues(&g);
        ev.last().copied().unwrap_or(0.0).max(0.0).sqrt()
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Mul for &Mat {
    type Output = Mat;
    fn mul(self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.rows, "inner dimensions differ");
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..rhs.cols {
                    out.data[i * rhs.cols + j] += a * rhs.data[k * rhs.cols + j];
                }
            }
        }
        out
    }
}

impl Add for &Mat {
    type Output = Mat;
    fn add(self, rhs: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect() }
    }
}

impl Sub for &Mat {
    type Output = Mat;
    fn sub(self, rhs: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect() }
    }
}

impl Neg for &Mat {
    type Output = Mat;
    fn neg(self) -> Mat {
        self.scale(-1.0)
    }
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(s: &Mat) -> Vec<f64> {
    assert!(s.is_square());
    let n = s.rows;
    match n {
        1 => vec![s[(0, 0)]],
        2 => {
            let (a, b, c) = (s[(0, 0)], s[(0, 1)], s[(1, 1)]);
            let mean = 0.5 * (a + c);
            let rad = (0.5 * (a - c)).hypot(b);
            let hi = mean + rad;
            let lo = if hi != 0.0 && mean > 0.0 { (a * c - b * b) / hi } else { mean - rad };
            vec![lo.min(hi), hi]
        }
        _ => jacobi_eigenvalues(s),
    }
}

fn jacobi_eigenvalues(s: &Mat) -> Vec<f64> {
    let n = s.rows;
    let mut a = s.data.clone();
    let scale: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if scale == 0.0 {
        return vec![0.0; n];
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() <= 1e-17 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - sn * akq;
                    a[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - sn * aqk;
                    a[q * n + k] = sn * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// 𝔪(A): the d-th singular value of a d×u matrix with d ≤ u.
pub fn smallest_singular(a: &Mat) -> Result<f64> {
    let (d, u) = (a.rows, a.cols);
    if d > u {
        return Err(Error::Dimension(format!("smallest_singular needs rows ≤ cols, got {d}×{u}")));
    }
    Ok(smallest_singular_unchecked(a))
}

pub(crate) fn smallest_singular_unchecked(a: &Mat) -> f64 {
    smallest_singular_rows(a.rows, a.cols, &a.data)
}

/// 𝔪 of a row-major d×u block with d ≤ u.
pub(crate) fn smallest_singular_rows(d: usize, u: usize, data: &[f64]) -> f64 {
    match d {
        1 => data.iter().map(|v| v * v).sum::<f64>().sqrt(),
        2 => {
            let (r0, r1) = (&data[..u], &data[u..2 * u]);
            // Cauchy–Binet keeps det(AAᵀ) accurate for nearly parallel rows.
            let mut det = 0.0;
            for j in 0..u {
                for k in j + 1..u {
                    let m = r0[j] * r1[k] - r0[k] * r1[j];
                    det += m * m;
                }
            }
            let g00: f64 = r0.iter().map(|v| v * v).sum();
            let g11: f64 = r1.iter().map(|v| v * v).sum();
            let g01: f64 = r0.iter().zip(r1).map(|(x, y)| x * y).sum();
            let hi = 0.5 * (g00 + g11) + (0.5 * (g00 - g11)).hypot(g01);
            if hi <= 0.0 {
                0.0
            } else {
                (det / hi).max(0.0).sqrt()
            }
        }
        _ => sym_eigenvalues(&Mat::from_vec(d, u, data.to_vec()).gram())[0].max(0.0).sqrt(),
    }
}

/// Bracket (D/√d, D) around 𝔪(M), where D is the smallest distance from a
/// row to the span of the others.
pub fn row_distance_bounds(m: &Mat) -> Result<(f64, f64)> {
    let (d, u) = (m.rows, m.cols);
    if d > u {
        return Err(Error::Dimension(format!("row_distance_bounds needs rows ≤ cols, got {d}×{u}")));
    }
    let mut best = f64::INFINITY;
    for i in 0..d {
        let others: Vec<&[f64]> = (0..d).filter(|&k| k != i).map(|k| m.row(k)).collect();
        best = best.min(distance_to_span(m.row(i), &others));
    }
    Ok((best / (d as f64).sqrt(), best))
}

fn distance_to_span(v: &[f64], spanning: &[&[f64]]) -> f64 {
    let scale = spanning.iter().flat_map(|r| r.iter()).chain(v.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for w in spanning {
        let mut w = w.to_vec();
        // Two passes of modified Gram–Schmidt.
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in w.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-13 * scale.max(f64::MIN_POSITIVE) {
            basis.push(w.into_iter().map(|x| x / n).collect());
        }
    }
    let mut r = v.to_vec();
    for _ in 0..2 {
        for b in &basis {
            let p: f64 = r.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in r.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
    }
    r.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Volume of the unit ball in R^d.
pub fn unit_ball_volume(d: usize) -> f64 {
    match d {
        0 => 1.0,
        1 => 2.0,
        _ => unit_ball_volume(d - 2) * 2.0 * std::f64::consts::PI / d as f64,
    }
}

/// C_d = 1/V_d, so that m_d(B(z,r)) = r^d / C_d.
pub fn cd_constant(d: usize) -> f64 {
    1.0 / unit_ball_volume(d)
}

/// ∫₀^φ sin^d, by the reduction formula.
fn sin_power_integral(d: usize, phi: f64) -> f64 {
    match d {
        0 => phi,
        1 => 1.0 - phi.cos(),
        _ => {
            let n = d as f64;
            -phi.sin().powi(d as i32 - 1) * phi.cos() / n + (n - 1.0) / n * sin_power_integral(d - 2, phi)
        }
    }
}

/// vol(B(0,r) ∩ B(t·e₁,r)) in R^d for d ∈ 1..=4.
///
/// The lens is two caps of height r − t/2. Substituting s = r·cos φ turns the
/// cap integral V_{d-1}∫(r²−s²)^{(d−1)/2} ds into V_{d-1} r^d ∫₀^{φ₀} sin^d φ dφ,
/// which the reduction formula evaluates exactly.
pub fn ball_intersection_volume(dist: f64, r: f64, d: usize) -> Result<f64> {
    if !(1..=4).contains(&d) {
        return Err(Error::UnsupportedDimension(d));
    }
    if !(r > 0.0) || !(dist >= 0.0) || !dist.is_finite() {
        return Err(Error::InvalidInput(format!("need dist ≥ 0 and r > 0, got dist={dist}, r={r}")));
    }
    Ok(ball_intersection_volume_unchecked(dist, r, d))
}

pub(crate) fn ball_intersection_volume_unchecked(dist: f64, r: f64, d: usize) -> f64 {
    if dist >= 2.0 * r {
        return 0.0;
    }
    match d {
        1 => 2.0 * r - dist,
        3 => {
            let h = 2.0 * r - dist;
            std::f64::consts::PI * h * h * (4.0 * r + dist) / 12.0
        }
        _ => {
            let phi0 = (dist / (2.0 * r)).clamp(-1.0, 1.0).acos();
            2.0 * unit_ball_volume(d - 1) * r.powi(d as i32) * sin_power_integral(d, phi0)
        }
    }
}
