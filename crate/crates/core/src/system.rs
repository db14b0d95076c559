//! The skew product T(x, y) = (E x mod 1, C y + f(x)) on T^u × R^d and its
//! derived constants.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eigenvalues, Mat};

const TWO_PI: f64 = 2.0 * PI;

/// Integer matrix acting on T^u.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExpandingMap {
    entries: Vec<Vec<i64>>,
    #[serde(skip)]
    mat: Option<Mat>,
    #[serde(skip)]
    inv: Option<Mat>,
}

impl ExpandingMap {
    pub fn new(entries: Vec<Vec<i64>>) -> Result<Self> {
        let u = entries.len();
        if u == 0 || entries.iter().any(|r| r.len() != u) {
            return Err(Error::Dimension("E must be a non-empty square matrix".into()));
        }
        let rows: Vec<Vec<f64>> = entries.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let mat = Mat::from_rows(&rows)?;
        if integer_det(&entries) == 0 {
            return Err(Error::InvalidInput("E must be invertible".into()));
        }
        let inv = mat.inverse().ok_or_else(|| Error::InvalidInput("E must be invertible".into()))?;
        Ok(ExpandingMap { entries, mat: Some(mat), inv: Some(inv) })
    }

    pub fn diagonal(diag: &[i64]) -> Result<Self> {
        let u = diag.len();
        let entries = (0..u).map(|i| (0..u).map(|j| if i == j { diag[i] } else { 0 }).collect()).collect();
        Self::new(entries)
    }

    /// Multiplication by m on T¹.
    pub fn scalar(m: i64) -> Self {
        Self::new(vec![vec![m]]).expect("non-zero multiplier")
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[Vec<i64>] {
        &self.entries
    }

    pub fn matrix(&self) -> &Mat {
        self.mat.as_ref().expect("constructed through new")
    }

    pub fn inverse(&self) -> &Mat {
        self.inv.as_ref().expect("constructed through new")
    }

    /// Exact |det E|.
    pub fn degree(&self) -> u64 {
        integer_det(&self.entries).unsigned_abs() as u64
    }

    pub fn det(&self) -> i64 {
        integer_det(&self.entries)
    }

    pub fn is_diagonal(&self) -> bool {
        let u = self.dim();
        (0..u).all(|i| (0..u).all(|j| i == j || self.entries[i][j] == 0))
    }

    /// True when every row and column has exactly one non-zero entry.
    pub fn is_monomial(&self) -> bool {
        let u = self.dim();
        let rows_ok = self.entries.iter().all(|r| r.iter().filter(|&&v| v != 0).count() == 1);
        let cols_ok = (0..u).all(|j| self.entries.iter().filter(|r| r[j] != 0).count() == 1);
        rows_ok && cols_ok
    }

    /// μ̲ = 1/‖E⁻¹‖.
    pub fn mu_lower(&self) -> f64 {
        1.0 / self.inverse().op_norm()
    }

    /// μ̄ = ‖E‖.
    pub fn mu_upper(&self) -> f64 {
        self.matrix().op_norm()
    }

    /// E x mod 1.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.entries
            .iter()
            .map(|row| {
                let s: f64 = row.iter().zip(x).map(|(&e, &xi)| e as f64 * xi).sum();
                s.rem_euclid(1.0)
            })
            .collect()
    }
}

/// Bareiss fraction-free determinant.
pub(crate) fn integer_det(m: &[Vec<i64>]) -> i64 {
    let n = m.len();
    let mut a: Vec<Vec<i128>> = m.iter().map(|r| r.iter().map(|&v| v as i128).collect()).collect();
    let mut sign = 1i128;
    let mut prev = 1i128;
    for k in 0..n {
        if a[k][k] == 0 {
            match (k + 1..n).find(|&i| a[i][k] != 0) {
                Some(p) => {
                    a.swap(k, p);
                    sign = -sign;
                }
                None => return 0,
            }
        }
        for i in k + 1..n {
            for j in k + 1..n {
                a[i][j] = (a[i][j] * a[k][k] - a[i][k] * a[k][j]) / prev;
            }
        }
        prev = a[k][k];
    }
    (sign * a[n - 1][n - 1]) as i64
}

/// Linear fiber map C on R^d.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Contraction {
    mat: Mat,
    #[serde(skip)]
    inv: Option<Mat>,
}

impl Contraction {
    pub fn new(mat: Mat) -> Result<Self> {
        if !mat.is_square() {
            return Err(Error::Dimension("C must be square".into()));
        }
        let inv = mat.inverse().ok_or_else(|| Error::InvalidInput("C must be invertible".into()))?;
        Ok(Contraction { mat, inv: Some(inv) })
    }

    pub fn scalar(lambda: f64) -> Result<Self> {
        Self::new(Mat::diag(&[lambda]))
    }

    pub fn dim(&self) -> usize {
        self.mat.rows()
    }

    pub fn matrix(&self) -> &Mat {
        &self.mat
    }

    pub fn inverse(&self) -> &Mat {
        self.inv.as_ref().expect("constructed through new")
    }

    /// λ̄ = ‖C‖.
    pub fn lambda_upper(&self) -> f64 {
        self.mat.op_norm()
    }

    /// λ̲ = 1/‖C⁻¹‖.
    pub fn lambda_lower(&self) -> f64 {
        1.0 / self.inverse().op_norm()
    }

    pub fn det(&self) -> f64 {
        self.mat.det()
    }
}

/// One term cos-part·cos(2π k·x) + sin-part·sin(2π k·x).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub k: Vec<i64>,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

/// Real trigonometric polynomial T^u → R^d.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigPolynomial {
    u: usize,
    d: usize,
    terms: Vec<TrigTerm>,
}

impl TrigPolynomial {
    pub fn new(u: usize, d: usize, terms: Vec<TrigTerm>) -> Result<Self> {
        if u == 0 || d == 0 {
            return Err(Error::Dimension("trig polynomial needs u, d ≥ 1".into()));
        }
        for (i, t) in terms.iter().enumerate() {
            if t.k.len() != u || t.cos.len() != d || t.sin.len() != d {
                return Err(Error::Dimension(format!(
                    "term {i}: expected k of length {u} and coefficient vectors of length {d}"
                )));
            }
            if t.cos.iter().chain(&t.sin).any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("term {i}: coefficients must be finite")));
            }
        }
        Ok(TrigPolynomial { u, d, terms })
    }

    pub fn zero(u: usize, d: usize) -> Self {
        TrigPolynomial { u, d, terms: Vec::new() }
    }

    pub fn constant(u: usize, c: &[f64]) -> Self {
        let d = c.len();
        TrigPolynomial { u, d, terms: vec![TrigTerm { k: vec![0; u], cos: c.to_vec(), sin: vec![0.0; d] }] }
    }

    /// ε·cos(2πx) on T¹ → R.
    pub fn cosine(eps: f64) -> Self {
        TrigPolynomial { u: 1, d: 1, terms: vec![TrigTerm { k: vec![1], cos: vec![eps], sin: vec![0.0] }] }
    }

    pub fn u(&self) -> usize {
        self.u
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn terms(&self) -> &[TrigTerm] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.cos.iter().chain(&t.sin).all(|&v| v == 0.0))
    }

    /// Σ of two polynomials with the same dimensions; terms are concatenated.
    pub fn add_scaled(&self, other: &TrigPolynomial, s: f64) -> Result<TrigPolynomial> {
        if (self.u, self.d) != (other.u, other.d) {
            return Err(Error::Dimension("trig polynomials of different shapes".into()));
        }
        let mut terms = self.terms.clone();
        for t in &other.terms {
            terms.push(TrigTerm {
                k: t.k.clone(),
                cos: t.cos.iter().map(|v| v * s).collect(),
                sin: t.sin.iter().map(|v| v * s).collect(),
            });
        }
        Ok(TrigPolynomial { u: self.u, d: self.d, terms })
    }

    #[inline]
    fn phase(k: &[i64], x: &[f64]) -> f64 {
        TWO_PI * k.iter().zip(x).map(|(&ki, &xi)| ki as f64 * xi).sum::<f64>()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.eval_add(x, 1.0, &mut out);
        out
    }

    /// out += s·f(x).
    pub fn eval_add(&self, x: &[f64], s: f64, out: &mut [f64]) {
        for t in &self.terms {
            let (sn, cs) = Self::phase(&t.k, x).sin_cos();
            for i in 0..self.d {
                out[i] += s * (t.cos[i] * cs + t.sin[i] * sn);
            }
        }
    }

    /// Df(x) as a d×u matrix.
    pub fn jacobian(&self, x: &[f64]) -> Mat {
        let mut m = Mat::zeros(self.d, self.u);
        self.jacobian_add(x, 1.0, m.as_mut_slice());
        m
    }

    /// out (row-major d×u) += s·Df(x).
    pub fn jacobian_add(&self, x: &[f64], s: f64, out: &mut [f64]) {
        for t in &self.terms {
            if t.k.iter().all(|&k| k == 0) {
                continue;
            }
            let (sn, cs) = Self::phase(&t.k, x).sin_cos();
            for i in 0..self.d {
                let w = s * TWO_PI * (t.sin[i] * cs - t.cos[i] * sn);
                if w == 0.0 {
                    continue;
                }
                for (j, &k) in t.k.iter().enumerate() {
                    out[i * self.u + j] += w * k as f64;
                }
            }
        }
    }

    /// Hessian of component i, as a u×u matrix.
    pub fn hessian(&self, x: &[f64], i: usize) -> Mat {
        let mut h = Mat::zeros(self.u, self.u);
        for t in &self.terms {
            let (sn, cs) = Self::phase(&t.k, x).sin_cos();
            let w = -TWO_PI * TWO_PI * (t.cos[i] * cs + t.sin[i] * sn);
            for a in 0..self.u {
                for b in 0..self.u {
                    h[(a, b)] += w * (t.k[a] * t.k[b]) as f64;
                }
            }
        }
        h
    }

    /// Per-term amplitude g = sup_θ ‖c cos θ + s sin θ‖ (exact, via the 2×2 Gram).
    fn amplitudes(&self) -> Vec<f64> {
        self.terms
            .iter()
            .map(|t| {
                if t.k.iter().all(|&k| k == 0) {
                    return t.cos.iter().map(|v| v * v).sum::<f64>().sqrt();
                }
                let cc: f64 = t.cos.iter().map(|v| v * v).sum();
                let ss: f64 = t.sin.iter().map(|v| v * v).sum();
                let cs: f64 = t.cos.iter().zip(&t.sin).map(|(a, b)| a * b).sum();
                let g = Mat::from_vec(2, 2, vec![cc, cs, cs, ss]);
                sym_eigenvalues(&g)[1].max(0.0).sqrt()
            })
            .collect()
    }

    /// Upper bounds on (sup‖f‖, sup‖Df‖, sup‖D²f‖) from the coefficients.
    ///
    /// With W = Σ g_k and M = λ_max(Σ g_k k kᵀ), Cauchy–Schwarz gives
    /// ‖Df‖ ≤ 2π√(W·M) and ‖D²f‖ ≤ (2π)²·M.
    pub fn derivative_bounds(&self) -> [f64; 3] {
        let g = self.amplitudes();
        let w: f64 = g.iter().sum();
        let mut s = Mat::zeros(self.u, self.u);
        for (t, &gk) in self.terms.iter().zip(&g) {
            for a in 0..self.u {
                for b in 0..self.u {
                    s[(a, b)] += gk * (t.k[a] * t.k[b]) as f64;
                }
            }
        }
        let m = sym_eigenvalues(&s).last().copied().unwrap_or(0.0).max(0.0);
        [w, TWO_PI * (w * m).sqrt(), TWO_PI * TWO_PI * m]
    }

    pub fn sup_norm_bound(&self) -> f64 {
        self.derivative_bounds()[0]
    }

    pub fn c1_bound(&self) -> f64 {
        self.derivative_bounds()[1]
    }
}

/// ‖f‖_{C²} upper bound: max of the three coefficient bounds.
pub fn c2_norm_bound(f: &TrigPolynomial) -> f64 {
    let [a, b, c] = f.derivative_bounds();
    a.max(b).max(c)
}

/// Derived constants of a skew product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub u: usize,
    pub d: usize,
    /// |det E|
    pub n: u64,
    /// |det E · det C|
    pub j: f64,
    pub theta: f64,
    pub alpha0: f64,
    pub lambda_lower: f64,
    pub lambda_upper: f64,
    pub mu_lower: f64,
    pub mu_upper: f64,
    /// Attractor box half-width.
    pub k: f64,
    pub c2_norm: f64,
    pub sup_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkewProduct {
    pub e: ExpandingMap,
    pub c: Contraction,
    pub f: TrigPolynomial,
    pub constants: Constants,
}

pub fn derive_constants(e: ExpandingMap, c: Contraction, f: TrigPolynomial) -> Result<SkewProduct> {
    let (u, d) = (e.dim(), c.dim());
    if f.u() != u || f.d() != d {
        return Err(Error::Dimension(format!("f maps T^{} → R^{}, but E is {u}×{u} and C is {d}×{d}", f.u(), f.d())));
    }
    let lambda_upper = c.lambda_upper();
    if !(lambda_upper < 1.0) {
        return Err(Error::NotContracting { norm: lambda_upper });
    }
    let mu_lower = e.mu_lower();
    if !(mu_lower > 1.0) {
        return Err(Error::NotExpanding { mu_lower });
    }
    let n = e.degree();
    let j = (n as f64) * c.det().abs();
    if !(j > 1.0) {
        return Err(Error::NotVolumeExpanding { j });
    }
    let c2 = c2_norm_bound(&f);
    let sup = f.sup_norm_bound();
    let constants = Constants {
        u,
        d,
        n,
        j,
        theta: lambda_upper / mu_lower,
        alpha0: c2 / (1.0 - lambda_upper),
        lambda_lower: c.lambda_lower(),
        lambda_upper,
        mu_lower,
        mu_upper: e.mu_upper(),
        k: attractor_box(&f, &c),
        c2_norm: c2,
        sup_norm: sup,
    };
    Ok(SkewProduct { e, c, f, constants })
}

/// Half-width K of an invariant box T^u × [−K, K]^d.
pub fn attractor_box(f: &TrigPolynomial, c: &Contraction) -> f64 {
    f.sup_norm_bound() / (1.0 - c.lambda_upper()) * (1.0 + 1e-6)
}

/// Membership in C(d;E): |det C| > 1/N and ‖C‖ < μ̲ / N^{1/(u−d+1)}.
pub fn in_cde(e: &ExpandingMap, c: &Contraction) -> bool {
    let (u, d) = (e.dim(), c.dim());
    if d > u {
        return false;
    }
    let n = e.degree() as f64;
    let expo = 1.0 / (u - d + 1) as f64;
    c.det().abs() > 1.0 / n && c.lambda_upper() < e.mu_lower() / n.powf(expo)
}

impl SkewProduct {
    pub fn u(&self) -> usize {
        self.e.dim()
    }

    pub fn d(&self) -> usize {
        self.c.dim()
    }

    pub fn apply(&self, x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let x1 = self.e.apply(x);
        let mut y1 = self.c.matrix().mul_vec(y);
        self.f.eval_add(x, 1.0, &mut y1);
        (x1, y1)
    }

    /// Same system with a different forcing term.
    pub fn with_forcing(&self, f: TrigPolynomial) -> Result<SkewProduct> {
        derive_constants(self.e.clone(), self.c.clone(), f)
    }
}

/// Product of one-dimensional-fiber systems: block-diagonal E and C and
/// f(x₁,…,x_d) = (f₁(x₁),…,f_d(x_d)).
pub fn product_system(factors: &[SkewProduct]) -> Result<SkewProduct> {
    if factors.is_empty() {
        return Err(Error::InvalidInput("product of an empty factor list".into()));
    }
    if let Some(i) = factors.iter().position(|s| s.d() != 1) {
        return Err(Error::Dimension(format!("factor {i} has fiber dimension {}", factors[i].d())));
    }
    let u: usize = factors.iter().map(|s| s.u()).sum();
    let d = factors.len();
    let mut e_rows = vec![vec![0i64; u]; u];
    let mut lambdas = Vec::with_capacity(d);
    let mut terms = Vec::new();
    let mut off = 0;
    for (i, s) in factors.iter().enumerate() {
        let ui = s.u();
        for (a, row) in s.e.entries().iter().enumerate() {
            for (b, &v) in row.iter().enumerate() {
                e_rows[off + a][off + b] = v;
            }
        }
        lambdas.push(s.c.matrix()[(0, 0)]);
        for t in s.f.terms() {
            let mut k = vec![0i64; u];
            k[off..off + ui].copy_from_slice(&t.k);
            let mut cos = vec![0.0; d];
            let mut sin = vec![0.0; d];
            cos[i] = t.cos[0];
            sin[i] = t.sin[0];
            terms.push(TrigTerm { k, cos, sin });
        }
        off += ui;
    }
    derive_constants(
        ExpandingMap::new(e_rows)?,
        Contraction::new(Mat::diag(&lambdas))?,
        TrigPolynomial::new(u, d, terms)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn doubling(lambda: f64, f: TrigPolynomial) -> Result<SkewProduct> {
        derive_constants(ExpandingMap::scalar(2), Contraction::scalar(lambda)?, f)
    }

    #[test]
    fn scalar_constants() {
        let t = doubling(0.7, TrigPolynomial::cosine(1.0)).unwrap();
        let k = &t.constants;
        assert_eq!(k.n, 2);
        assert!((k.j - 1.4).abs() < 1e-15);
        assert!((k.theta - 0.35).abs() < 1e-15);
        assert!((k.lambda_lower - 0.7).abs() < 1e-15 && (k.lambda_upper - 0.7).abs() < 1e-15);
        assert!((k.mu_lower - 2.0).abs() < 1e-15 && (k.mu_upper - 2.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_systems() {
        let f = TrigPolynomial::zero(1, 1);
        assert!(matches!(doubling(0.4, f.clone()), Err(Error::NotVolumeExpanding { .. })));
        assert!(matches!(doubling(1.2, f.clone()), Err(Error::NotContracting { .. })));
        let shear = ExpandingMap::new(vec![vec![1, 1], vec![0, 1]]).unwrap();
        let r = derive_constants(shear, Contraction::scalar(0.9).unwrap(), TrigPolynomial::zero(2, 1));
        assert!(matches!(r, Err(Error::NotExpanding { .. })));
    }

    #[test]
    fn alpha0_for_small_cosine() {
        let t = doubling(0.7, TrigPolynomial::cosine(0.1)).unwrap();
        assert!((t.constants.c2_norm - 0.1 * (2.0 * PI).powi(2)).abs() < 1e-12);
        assert!((t.constants.alpha0 - 13.1594).abs() < 1e-4);
    }

    #[test]
    fn c2_bound_examples() {
        assert_eq!(c2_norm_bound(&TrigPolynomial::zero(1, 1)), 0.0);
        assert!((c2_norm_bound(&TrigPolynomial::cosine(1.0)) - (2.0 * PI).powi(2)).abs() < 1e-12);
        let f = TrigPolynomial::new(
            2,
            2,
            vec![
                TrigTerm { k: vec![1, 0], cos: vec![1.0, 0.0], sin: vec![0.0, 0.0] },
                TrigTerm { k: vec![0, 1], cos: vec![0.0, 1.0], sin: vec![0.0, 0.0] },
            ],
        )
        .unwrap();
        assert!((c2_norm_bound(&f) - (2.0 * PI).powi(2)).abs() < 1e-12);
    }

    /// Sampled sup of ‖f‖, ‖Df‖, ‖D²f‖ never exceeds the coefficient bounds.
    #[test]
    fn c2_bound_dominates_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..40 {
            let u = rng.gen_range(1..=2);
            let d = rng.gen_range(1..=2);
            let terms = (0..rng.gen_range(1..=4))
                .map(|_| TrigTerm {
                    k: (0..u).map(|_| rng.gen_range(-2..=2)).collect(),
                    cos: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    sin: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                })
                .collect();
            let f = TrigPolynomial::new(u, d, terms).unwrap();
            let [b0, b1, b2] = f.derivative_bounds();
            for _ in 0..400 {
                let x: Vec<f64> = (0..u).map(|_| rng.gen::<f64>()).collect();
                let v = f.eval(&x);
                assert!(v.iter().map(|a| a * a).sum::<f64>().sqrt() <= b0 + 1e-12);
                assert!(f.jacobian(&x).op_norm() <= b1 + 1e-9);
                // Second derivative as a bilinear map: sup over unit v, w of ‖(vᵀH_i w)_i‖.
                let hs: Vec<Mat> = (0..d).map(|i| f.hessian(&x, i)).collect();
                for _ in 0..8 {
                    let mut p: Vec<f64> = (0..u).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let mut q: Vec<f64> = (0..u).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let np = p.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
                    let nq = q.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
                    p.iter_mut().for_each(|a| *a /= np);
                    q.iter_mut().for_each(|a| *a /= nq);
                    let val: f64 = hs
                        .iter()
                        .map(|h| {
                            let hq = h.mul_vec(&q);
                            let s: f64 = p.iter().zip(&hq).map(|(a, b)| a * b).sum();
                            s * s
                        })
                        .sum::<f64>()
                        .sqrt();
                    assert!(val <= b2 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn dense_grid_matches_cosine_bounds() {
        let f = TrigPolynomial::cosine(0.1);
        let (mut s0, mut s1, mut s2) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..10_000 {
            let x = [i as f64 / 10_000.0];
            s0 = s0.max(f.eval(&x)[0].abs());
            s1 = s1.max(f.jacobian(&x)[(0, 0)].abs());
            s2 = s2.max(f.hessian(&x, 0)[(0, 0)].abs());
        }
        let [b0, b1, b2] = f.derivative_bounds();
        assert!((s0 - b0).abs() < 1e-9 && (s1 - b1).abs() < 1e-6 && (s2 - b2).abs() < 1e-9);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let f = TrigPolynomial::new(
            2,
            2,
            vec![
                TrigTerm { k: vec![1, -2], cos: vec![0.3, -0.1], sin: vec![0.2, 0.5] },
                TrigTerm { k: vec![0, 1], cos: vec![0.0, 0.4], sin: vec![-0.7, 0.0] },
            ],
        )
        .unwrap();
        let x = [0.31, 0.77];
        let jac = f.jacobian(&x);
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let (fp, fm) = (f.eval(&xp), f.eval(&xm));
            for i in 0..2 {
                assert!((jac[(i, j)] - (fp[i] - fm[i]) / (2.0 * h)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn cde_membership() {
        let e2 = ExpandingMap::scalar(2);
        assert!(in_cde(&e2, &Contraction::scalar(0.7).unwrap()));
        assert!(!in_cde(&e2, &Contraction::scalar(0.4).unwrap()));
        let e22 = ExpandingMap::diagonal(&[2, 2]).unwrap();
        assert!(in_cde(&e22, &Contraction::scalar(0.9).unwrap()));
    }

    #[test]
    fn attractor_box_contains_orbits() {
        let f = TrigPolynomial::cosine(0.1);
        let t = doubling(0.7, f).unwrap();
        let k = t.constants.k;
        assert!((k - 1.0 / 3.0).abs() < 1e-5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let x = [rng.gen::<f64>()];
            let y = [rng.gen_range(-k..k)];
            let (_, y1) = t.apply(&x, &y);
            assert!(y1[0].abs() <= k);
        }
        assert_eq!(attractor_box(&TrigPolynomial::zero(1, 1), &t.c), 0.0);
    }

    #[test]
    fn constant_forcing_fixed_point() {
        let c = Contraction::new(Mat::from_rows(&[[0.5, 0.1], [0.0, 0.6]]).unwrap()).unwrap();
        let e = ExpandingMap::diagonal(&[3, 3]).unwrap();
        let t = derive_constants(e, c.clone(), TrigPolynomial::constant(2, &[1.0, -2.0])).unwrap();
        let ic = &Mat::identity(2) - c.matrix();
        let fixed = ic.inverse().unwrap().mul_vec(&[1.0, -2.0]);
        let k = t.constants.k;
        assert!(fixed.iter().all(|v| v.abs() <= k));
        let (mut x, mut y) = (vec![0.2, 0.7], vec![5.0, 5.0]);
        for _ in 0..200 {
            (x, y) = t.apply(&x, &y);
        }
        assert!((y[0] - fixed[0]).abs() < 1e-12 && (y[1] - fixed[1]).abs() < 1e-12);
    }

    #[test]
    fn apply_examples() {
        let t = doubling(0.7, TrigPolynomial::zero(1, 1)).unwrap();
        let (x, y) = t.apply(&[0.75], &[0.0]);
        assert_eq!(x, vec![0.5]);
        assert_eq!(y, vec![0.0]);
    }

    #[test]
    fn product_of_two_doublings() {
        let f = TrigPolynomial::cosine(0.2);
        let t = doubling(0.7, f).unwrap();
        let p = product_system(&[t.clone(), t.clone()]).unwrap();
        assert_eq!((p.u(), p.d(), p.constants.n), (2, 2, 4));
        assert!((p.constants.j - 1.96).abs() < 1e-12);
        let blocks = Mat::block_diag(&[p.e.matrix().clone(), p.c.matrix().clone()]);
        assert!((blocks.det().abs() - p.constants.j).abs() < 1e-12);
        let x = [0.13, 0.58];
        let v = p.f.eval(&x);
        assert!((v[0] - t.f.eval(&[0.13])[0]).abs() < 1e-15);
        assert!((v[1] - t.f.eval(&[0.58])[0]).abs() < 1e-15);
        let single = product_system(&[t.clone()]).unwrap();
        assert_eq!(single.constants, t.constants);
        assert!(product_system(&[]).is_err());
    }

    #[test]
    fn integer_determinants() {
        assert_eq!(integer_det(&[vec![2, 1], vec![1, 3]]), 5);
        assert_eq!(integer_det(&[vec![0, 1], vec![1, 0]]), -1);
        assert_eq!(integer_det(&[vec![2, 0, 0], vec![0, 0, 3], vec![0, 5, 0]]), -30);
    }

    #[test]
    fn each_point_has_degree_many_preimages() {
        let e = ExpandingMap::new(vec![vec![2, 1], vec![1, 3]]).unwrap();
        let inv = e.inverse().clone();
        let n = e.degree() as usize;
        for gi in 0..5 {
            for gj in 0..5 {
                let x = [(gi as f64 + 0.37) / 5.0, (gj as f64 + 0.61) / 5.0];
                let mut pre: Vec<Vec<f64>> = Vec::new();
                for k0 in -4..8 {
                    for k1 in -4..8 {
                        let z: Vec<f64> = inv
                            .mul_vec(&[x[0] + k0 as f64, x[1] + k1 as f64])
                            .iter()
                            .map(|v| v.rem_euclid(1.0))
                            .collect();
                        if !pre.iter().any(|p| (p[0] - z[0]).abs() < 1e-9 && (p[1] - z[1]).abs() < 1e-9) {
                            pre.push(z);
                        }
                    }
                }
                assert_eq!(pre.len(), n);
                for z in pre {
                    let back = e.apply(&z);
                    assert!((back[0] - x[0]).abs() < 1e-9 && (back[1] - x[1]).abs() < 1e-9);
                }
            }
        }
    }
}
