//! Perturbation families and the tools around genericity of transversality:
//! the constants n₀, D₀, κ₀, the ν condition, localized bump families,
//! the affine maps ψ_{x,σ} with their Jacobians, sampled n-genericity checks
//! and parameter sweeps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::markov::{MarkovCode, Word};
use crate::system::{
    derive_constants, in_cde, Constants, Contraction, ExpandingMap, SkewProduct, TrigPolynomial, TrigTerm,
};
use crate::transversality::{genericity_p, tau_upper, TauOptions};

/// p(q) = ⌊(−q ln θ + ln √d)/ln μ̲⌋ + 1.
pub fn p_of_q(k: &Constants, q: usize) -> usize {
    genericity_p(k, q)
}

/// B = ln θ⁻¹ / ln μ̲, the limit of p(q)/q.
pub fn b_constant(k: &Constants) -> f64 {
    -k.theta.ln() / k.mu_lower.ln()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenericityConstants {
    pub n0: u64,
    pub d0: u64,
    pub kappa0: u64,
    pub b: f64,
    pub theta: f64,
    pub j: f64,
    pub degree: u64,
    /// Re-evaluated inequalities, in the order (n₀), (κ₀), (D₀ vs κ₀), (D₀ vs n₀).
    pub checks: [bool; 4],
}

fn base_quantities(e: &ExpandingMap, c: &Contraction) -> (f64, f64, f64, usize) {
    let theta = c.lambda_upper() / e.mu_lower();
    let j = e.degree() as f64 * c.det().abs();
    (theta, j, -theta.ln() / e.mu_lower().ln(), e.dim() + 1 - c.dim())
}

/// The four defining inequalities evaluated at (n₀, D₀, κ₀).
pub fn genericity_inequalities(e: &ExpandingMap, c: &Contraction, n0: u64, d0: u64, kappa0: u64) -> [bool; 4] {
    let (theta, j, b, w) = base_quantities(e, c);
    let ln_n = (e.degree() as f64).ln();
    let (n0f, d0f, kf) = (n0 as f64, d0 as f64, kappa0 as f64);
    [
        (d0f + 1.0).ln() - 0.5 * n0f * j.ln() < -std::f64::consts::LN_2,
        (kf + b + 1.0) * ln_n + (w as f64) * kf * theta.ln() < 0.0,
        kf + 1.0 < d0f / (2.0 * n0f),
        (n0 as u128).pow(3) < d0 as u128,
    ]
}

/// Smallest κ₀ ≥ 2, then smallest n₀ ≥ 2 with its smallest D₀, satisfying the
/// four inequalities. Infeasible exactly when C ∉ C(d;E).
pub fn genericity_constants(e: &ExpandingMap, c: &Contraction) -> Result<GenericityConstants> {
    let (u, d) = (e.dim(), c.dim());
    if d > u {
        return Err(Error::InfeasibleOutsideCdE(format!("fiber dimension {d} exceeds base dimension {u}")));
    }
    let (theta, j, b, w) = base_quantities(e, c);
    let ln_n = (e.degree() as f64).ln();
    let slope = -(w as f64) * theta.ln() - ln_n;
    if !(slope > 0.0) {
        return Err(Error::InfeasibleOutsideCdE(format!(
            "θ^(u−d+1) = {:.6} is not below 1/N = {:.6}, so no κ₀ satisfies N^(κ₀+B+1)·θ^((u−d+1)κ₀) < 1",
            theta.powi(w as i32),
            1.0 / e.degree() as f64
        )));
    }
    if !(j > 1.0) {
        return Err(Error::InfeasibleOutsideCdE(format!(
            "J = N|det C| = {j:.6} ≤ 1, so (D₀+1)J^(−n₀/2) < 1/2 has no solution"
        )));
    }
    // (κ + B + 1) ln N < κ·slope' where slope' = −w ln θ, i.e. κ > (B+1) ln N / slope.
    let bound = (b + 1.0) * ln_n / slope;
    let mut kappa0 = (bound.floor() as u64 + 1).max(2);
    while !genericity_inequalities(e, c, 2, u64::MAX, kappa0)[1] {
        kappa0 += 1;
    }
    let mut n0 = 2u64;
    loop {
        let d0 = (n0.pow(3)).max(2 * n0 * (kappa0 + 1)) + 1;
        let checks = genericity_inequalities(e, c, n0, d0, kappa0);
        if checks.iter().all(|&v| v) {
            return Ok(GenericityConstants { n0, d0, kappa0, b, theta, j, degree: e.degree(), checks });
        }
        n0 += 1;
        if n0 > 2_000_000 {
            return Err(Error::InfeasibleOutsideCdE(format!("no n₀ below 2·10⁶ for J = {j}")));
        }
    }
}

/// Agrees with [`in_cde`]: true iff [`genericity_constants`] is feasible.
pub fn genericity_feasible(e: &ExpandingMap, c: &Contraction) -> bool {
    genericity_constants(e, c).is_ok()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NuCheck {
    pub n: usize,
    pub nu: usize,
    /// ε(ν) = 4du²Nⁿ λ̄^ν μ̲^{−ν} (1 − λ̄/μ̲)⁻¹
    pub epsilon: f64,
    /// (1 − ε(ν))^{Nⁿud}; absent when 1 − ε(ν) ≤ 0.
    pub lhs: Option<f64>,
    pub feasible: bool,
}

pub fn nu_feasibility(k: &Constants, n: usize, nu: usize) -> Result<NuCheck> {
    let ratio = k.lambda_upper / k.mu_lower;
    if !(ratio < 1.0) {
        return Err(Error::InvalidInput(format!("λ̄/μ̲ = {ratio} must be below 1")));
    }
    let (u, d) = (k.u as f64, k.d as f64);
    let nn = (k.n as f64).powi(n as i32);
    let epsilon = 4.0 * d * u * u * nn * ratio.powi(nu as i32) / (1.0 - ratio);
    let inner = 1.0 - epsilon;
    let lhs = (inner > 0.0).then(|| (nn * u * d * inner.ln()).exp());
    Ok(NuCheck { n, nu, epsilon, lhs, feasible: lhs.is_some_and(|v| v > 0.5) })
}

/// Smallest ν ≤ `max_nu` passing [`nu_feasibility`] (the condition is monotone in ν).
pub fn smallest_nu(k: &Constants, n: usize, max_nu: usize) -> Result<Option<usize>> {
    for nu in 0..=max_nu {
        if nu_feasibility(k, n, nu)?.feasible {
            return Ok(Some(nu));
        }
    }
    Ok(None)
}

// Radial profile: ρ ≡ 1 on [0, 1/3], ρ ≡ 0 on [1, ∞), with −ρ′ a smooth
// plateau of height h on [1/3, 1] and shoulders of width η.
const INNER: f64 = 1.0 / 3.0;
const SHOULDER: f64 = 0.05;

fn bump_exp(t: f64) -> f64 {
    if t > 0.0 {
        (-1.0 / t).exp()
    } else {
        0.0
    }
}

/// C^∞ step from 0 on (−∞, 0] to 1 on [1, ∞).
fn smooth_step(t: f64) -> f64 {
    let a = bump_exp(t);
    let b = bump_exp(1.0 - t);
    if a + b == 0.0 {
        return if t >= 1.0 { 1.0 } else { 0.0 };
    }
    a / (a + b)
}

/// ∫₀ᵗ smooth_step, t ∈ [0, 1], by composite Simpson.
fn smooth_step_integral(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    if t == 0.0 {
        return 0.0;
    }
    let m = 256;
    let h = t / m as f64;
    let mut s = smooth_step(0.0) + smooth_step(t);
    for i in 1..m {
        s += smooth_step(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// (ρ(s), ρ′(s)) of the flat-top profile.
pub fn flat_top_profile(s: f64) -> (f64, f64) {
    let (a, b, eta) = (INNER, 1.0, SHOULDER);
    if s <= a {
        return (1.0, 0.0);
    }
    if s >= b {
        return (0.0, 0.0);
    }
    let h = 1.0 / (b - a - eta);
    let beta = smooth_step((s - a) / eta) * smooth_step((b - s) / eta);
    let integral = if s <= a + eta {
        eta * smooth_step_integral((s - a) / eta)
    } else if s <= b - eta {
        eta / 2.0 + (s - a - eta)
    } else {
        eta / 2.0 + (b - a - 2.0 * eta) + eta * (0.5 - smooth_step_integral((b - s) / eta))
    };
    ((1.0 - h * integral).max(0.0), -h * beta)
}

/// Nearest representative of y − c on the torus.
fn torus_offset(y: &[f64], c: &[f64], out: &mut [f64]) {
    for i in 0..y.len() {
        let v = y[i] - c[i];
        out[i] = v - v.round();
    }
}

fn torus_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| {
            let v = p - q;
            let v = v - v.round();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// φ(y) = ρ(|z|/R)·M z with z = y − centre on the torus.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Bump {
    pub word: Word,
    pub centre: Vec<f64>,
    /// Fiber row i′ and base column j′ of the unit matrix E_{i′j′}.
    pub row: usize,
    pub col: usize,
    /// M = C^{−n+1}·E_{i′j′}·Eⁿ (d × u).
    pub matrix: Mat,
    pub outer: f64,
    pub inner: f64,
    /// 2λ̲^{−n+1}μ̄ⁿ
    pub deriv_bound: f64,
}

impl Bump {
    pub fn eval_add(&self, y: &[f64], s: f64, out: &mut [f64]) {
        let mut z = vec![0.0; y.len()];
        torus_offset(y, &self.centre, &mut z);
        let r = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r >= self.outer {
            return;
        }
        let (rho, _) = flat_top_profile(r / self.outer);
        let mz = self.matrix.mul_vec(&z);
        for (o, v) in out.iter_mut().zip(mz) {
            *o += s * rho * v;
        }
    }

    /// Dφ(y) = ρ·M + (ρ′/R)·(M z)(z/|z|)ᵀ, added into a row-major d × u buffer.
    pub fn jacobian_add(&self, y: &[f64], s: f64, out: &mut [f64]) {
        let u = y.len();
        let mut z = vec![0.0; u];
        torus_offset(y, &self.centre, &mut z);
        let r = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r >= self.outer {
            return;
        }
        let (rho, drho) = flat_top_profile(r / self.outer);
        let m = self.matrix.as_slice();
        for (o, v) in out.iter_mut().zip(m) {
            *o += s * rho * v;
        }
        if drho != 0.0 {
            let mz = self.matrix.mul_vec(&z);
            let w = s * drho / (self.outer * r);
            for (i, mzi) in mz.iter().enumerate() {
                for (j, zj) in z.iter().enumerate() {
                    out[i * u + j] += w * mzi * zj;
                }
            }
        }
    }

    pub fn jacobian(&self, y: &[f64]) -> Mat {
        let mut m = Mat::zeros(self.matrix.rows(), self.matrix.cols());
        self.jacobian_add(y, 1.0, m.as_mut_slice());
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Perturbation {
    Trig(TrigPolynomial),
    Bump(Bump),
}

impl Perturbation {
    pub fn eval_add(&self, y: &[f64], s: f64, out: &mut [f64]) {
        match self {
            Perturbation::Trig(p) => p.eval_add(y, s, out),
            Perturbation::Bump(b) => b.eval_add(y, s, out),
        }
    }

    pub fn jacobian_add(&self, y: &[f64], s: f64, out: &mut [f64]) {
        match self {
            Perturbation::Trig(p) => p.jacobian_add(y, s, out),
            Perturbation::Bump(b) => b.jacobian_add(y, s, out),
        }
    }

    /// Bound on sup‖Dφ‖.
    pub fn c1_bound(&self) -> f64 {
        match self {
            Perturbation::Trig(p) => p.c1_bound(),
            Perturbation::Bump(b) => b.deriv_bound,
        }
    }
}

/// f_t = f₀ + Σ t_k φ_k.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerturbationFamily {
    pub base: TrigPolynomial,
    pub perturbations: Vec<Perturbation>,
}

impl PerturbationFamily {
    pub fn new(base: TrigPolynomial, perturbations: Vec<Perturbation>) -> Self {
        PerturbationFamily { base, perturbations }
    }

    pub fn trig(base: TrigPolynomial, perturbations: Vec<TrigPolynomial>) -> Result<Self> {
        for p in &perturbations {
            if p.u() != base.u() || p.d() != base.d() {
                return Err(Error::Dimension("perturbations must share the base polynomial's dimensions".into()));
            }
        }
        Ok(PerturbationFamily { base, perturbations: perturbations.into_iter().map(Perturbation::Trig).collect() })
    }

    pub fn len(&self) -> usize {
        self.perturbations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perturbations.is_empty()
    }

    pub fn eval(&self, y: &[f64], t: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.base.d()];
        self.base.eval_add(y, 1.0, &mut out);
        for (p, &s) in self.perturbations.iter().zip(t) {
            p.eval_add(y, s, &mut out);
        }
        out
    }

    pub fn jacobian(&self, y: &[f64], t: &[f64]) -> Mat {
        let mut m = Mat::zeros(self.base.d(), self.base.u());
        self.base.jacobian_add(y, 1.0, m.as_mut_slice());
        for (p, &s) in self.perturbations.iter().zip(t) {
            p.jacobian_add(y, s, m.as_mut_slice());
        }
        m
    }

    /// f_t as a single trig polynomial (terms with equal frequency merged),
    /// or `None` if the family contains bumps.
    pub fn to_trig(&self, t: &[f64]) -> Result<Option<TrigPolynomial>> {
        if t.len() != self.len() {
            return Err(Error::Dimension(format!("expected {} parameters, got {}", self.len(), t.len())));
        }
        let mut terms: Vec<TrigTerm> = self.base.terms().to_vec();
        for (p, &s) in self.perturbations.iter().zip(t) {
            let Perturbation::Trig(p) = p else { return Ok(None) };
            for term in p.terms() {
                let scaled = TrigTerm {
                    k: term.k.clone(),
                    cos: term.cos.iter().map(|v| v * s).collect(),
                    sin: term.sin.iter().map(|v| v * s).collect(),
                };
                match terms.iter_mut().find(|x| x.k == scaled.k) {
                    Some(x) => {
                        x.cos.iter_mut().zip(&scaled.cos).for_each(|(a, b)| *a += b);
                        x.sin.iter_mut().zip(&scaled.sin).for_each(|(a, b)| *a += b);
                    }
                    None => terms.push(scaled),
                }
            }
        }
        Ok(Some(TrigPolynomial::new(self.base.u(), self.base.d(), terms)?))
    }
}

/// The words of length n admissible at x, I^n(x).
pub fn words_at(code: &MarkovCode, x: &[f64], n: usize, cap: u64) -> Result<Vec<Word>> {
    Ok(code.enumerate_words(n, cap)?.into_iter().filter(|a| code.in_domain(a, x)).collect())
}

/// True when a(x) = E^i(b(x)) for some 0 ≤ i ≤ `horizon`.
pub fn in_orbit_class(e: &ExpandingMap, b_point: &[f64], a_point: &[f64], horizon: usize) -> bool {
    let mut p = b_point.to_vec();
    for _ in 0..=horizon {
        if torus_distance(&p, a_point) < 1e-9 {
            return true;
        }
        p = e.apply(&p);
    }
    false
}

/// Largest ε₀ for which E^i(B(b(x), ε₀)) ∩ B(a(x), ε₀) = ∅ for all i ≤ n + ν
/// and all pairs with a outside the orbit class of b, via the sufficient
/// condition ε₀(1 + ‖E^i‖) < dist(E^i b(x), a(x)); also capped by γ.
pub fn separation_radius(sys: &SkewProduct, code: &MarkovCode, x: &[f64], n: usize, nu: usize) -> Result<f64> {
    let words = words_at(code, x, n, crate::markov::DEFAULT_WORD_CAP)?;
    let points: Vec<Vec<f64>> = words.iter().map(|a| code.preimage_point(a, x)).collect::<Result<_>>()?;
    let horizon = n + nu;
    let norms: Vec<f64> = (0..=horizon as u32).map(|i| sys.e.matrix().pow(i).op_norm()).collect();
    let mut best = code.gamma();
    for b in &points {
        let mut orbit = Vec::with_capacity(horizon + 1);
        let mut p = b.clone();
        for _ in 0..=horizon {
            orbit.push(p.clone());
            p = sys.e.apply(&p);
        }
        for a in &points {
            if in_orbit_class(&sys.e, b, a, horizon + n) {
                continue;
            }
            for (i, q) in orbit.iter().enumerate() {
                best = best.min(torus_distance(q, a) / (1.0 + norms[i]));
            }
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BumpCheck {
    pub index: usize,
    pub support_ok: bool,
    pub inner_ok: bool,
    pub bound_ok: bool,
    pub max_inner_error: f64,
    pub max_derivative: f64,
    pub deriv_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BumpFamily {
    pub n: usize,
    pub nu: usize,
    pub x: Vec<f64>,
    pub eps0: f64,
    pub max_eps0: f64,
    pub words: Vec<Word>,
    pub family: PerturbationFamily,
    pub checks: Vec<BumpCheck>,
}

impl BumpFamily {
    pub fn all_verified(&self) -> bool {
        self.checks.iter().all(|c| c.support_ok && c.inner_ok && c.bound_ok)
    }

    /// Parameter index of the bump for word `w` and entry (row, col).
    pub fn index(&self, w: usize, row: usize, col: usize, u: usize, d: usize) -> usize {
        (w * d + row) * u + col
    }
}

/// Samples per bump in [`verify_bump`].
pub const BUMP_SAMPLES: usize = 10_000;

/// Dense-sample check of the support, the inner-third derivative and the
/// global derivative bound.
pub fn verify_bump(b: &Bump, index: usize, samples: usize, seed: u64) -> BumpCheck {
    let u = b.centre.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (mut support_ok, mut inner_err, mut max_d) = (true, 0.0f64, 0.0f64);
    let mut y = vec![0.0; u];
    let mut dir = vec![0.0; u];
    for k in 0..samples {
        // Radii cover [0, 1.5R]: a third inside the inner ball, the rest spread out.
        let s = match k % 3 {
            0 => rng.gen::<f64>() * b.inner / b.outer,
            1 => rng.gen::<f64>(),
            _ => 1.0 + 0.5 * rng.gen::<f64>(),
        };
        loop {
            dir.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            let nrm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm > 1e-3 && nrm <= 1.0 {
                dir.iter_mut().for_each(|v| *v /= nrm);
                break;
            }
        }
        for i in 0..u {
            y[i] = (b.centre[i] + s * b.outer * dir[i]).rem_euclid(1.0);
        }
        let jac = b.jacobian(&y);
        let mut val = vec![0.0; b.matrix.rows()];
        b.eval_add(&y, 1.0, &mut val);
        if s >= 1.0 {
            support_ok &= jac.max_abs() == 0.0 && val.iter().all(|&v| v == 0.0);
        } else {
            max_d = max_d.max(jac.op_norm());
            if s <= b.inner / b.outer {
                inner_err = inner_err.max((&jac - &b.matrix).max_abs());
            }
        }
    }
    BumpCheck {
        index,
        support_ok,
        inner_ok: inner_err <= 1e-12 * b.matrix.max_abs().max(1.0),
        bound_ok: max_d < b.deriv_bound,
        max_inner_error: inner_err,
        max_derivative: max_d,
        deriv_bound: b.deriv_bound,
    }
}

/// One bump per (a, i′, j′) with a ∈ Iⁿ(x), centred at a(x).
pub fn build_bump_family(
    sys: &SkewProduct,
    code: &MarkovCode,
    n: usize,
    x: &[f64],
    eps0: f64,
    nu: usize,
) -> Result<BumpFamily> {
    let (u, d) = (sys.u(), sys.d());
    if n == 0 || x.len() != u {
        return Err(Error::InvalidInput("need n ≥ 1 and a base point in 𝕋^u".into()));
    }
    let max_eps0 = separation_radius(sys, code, x, n, nu)?;
    if !(eps0 > 0.0) || eps0 >= max_eps0 {
        return Err(Error::SeparationFailure(format!(
            "ε₀ = {eps0} must lie in (0, {max_eps0:.6e}) for the preimages of x at depth n + ν = {}",
            n + nu
        )));
    }
    let k = &sys.constants;
    let words = words_at(code, x, n, crate::markov::DEFAULT_WORD_CAP)?;
    let mu_bar_n = k.mu_upper.powi(n as i32);
    let outer = eps0 / mu_bar_n;
    let deriv_bound = 2.0 * k.lambda_lower.powi(-(n as i32 - 1)) * mu_bar_n;
    let cinv = sys.c.inverse().pow(n as u32 - 1);
    let en = sys.e.matrix().pow(n as u32);
    let mut perturbations = Vec::with_capacity(words.len() * u * d);
    for a in &words {
        let centre = code.preimage_point(a, x)?;
        for row in 0..d {
            for col in 0..u {
                let mut unit = Mat::zeros(d, u);
                unit[(row, col)] = 1.0;
                let matrix = &(&cinv * &unit) * &en;
                perturbations.push(Perturbation::Bump(Bump {
                    word: a.clone(),
                    centre: centre.clone(),
                    row,
                    col,
                    matrix,
                    outer,
                    inner: outer / 3.0,
                    deriv_bound,
                }));
            }
        }
    }
    let checks = perturbations
        .par_iter()
        .enumerate()
        .map(|(i, p)| match p {
            Perturbation::Bump(b) => verify_bump(b, i, BUMP_SAMPLES, 0),
            Perturbation::Trig(_) => unreachable!(),
        })
        .collect();
    Ok(BumpFamily {
        n,
        nu,
        x: x.to_vec(),
        eps0,
        max_eps0,
        words,
        family: PerturbationFamily::new(TrigPolynomial::zero(u, d), perturbations),
        checks,
    })
}

/// ψ(t) = offset + L·t ∈ (ℝ^{ud})^k, the graph-derivative differences
/// DS(x, a_l; t) − DS(x, a_0; t) for l = 1..k, each flattened row-major.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PsiMap {
    pub x: Vec<f64>,
    pub words: Vec<Word>,
    pub depth: usize,
    pub offset: Vec<f64>,
    pub linear: Mat,
    /// Bound on the entries dropped by truncating each series at `depth`,
    /// per unit of |t_k| (linear part) and for the offset.
    pub tail_linear: f64,
    pub tail_offset: f64,
}

fn det_sqrt_gram(m: &Mat) -> f64 {
    if m.rows() == 0 || m.cols() == 0 {
        return 0.0;
    }
    let g = if m.cols() >= m.rows() { m * &m.transpose() } else { &m.transpose() * m };
    g.det().max(0.0).sqrt()
}

impl PsiMap {
    pub fn eval(&self, t: &[f64]) -> Vec<f64> {
        let mut out = self.offset.clone();
        self.linear.mul_vec_add(t, &mut out);
        out
    }

    pub fn target_dim(&self) -> usize {
        self.linear.rows()
    }

    /// Supremum over subspaces of dimension min(s, target) of |det Dψ|_W|:
    /// the product of the singular values of L.
    pub fn jacobian_sup(&self) -> f64 {
        det_sqrt_gram(&self.linear)
    }

    /// |det| of ψ restricted to the coordinate subspace of the given parameters.
    pub fn jacobian_on(&self, params: &[usize]) -> Result<f64> {
        let s = self.linear.cols();
        if params.iter().any(|&p| p >= s) {
            return Err(Error::Dimension(format!("parameter index out of range (s = {s})")));
        }
        let mut sub = Mat::zeros(self.linear.rows(), params.len());
        for i in 0..self.linear.rows() {
            for (c, &p) in params.iter().enumerate() {
                sub[(i, c)] = self.linear[(i, p)];
            }
        }
        Ok(det_sqrt_gram(&sub))
    }

    /// Jacobian on the span of the columns of `basis` (s × w, orthonormal columns).
    pub fn jacobian_on_basis(&self, basis: &Mat) -> Result<f64> {
        if basis.rows() != self.linear.cols() {
            return Err(Error::Dimension("basis rows must equal the parameter count".into()));
        }
        Ok(det_sqrt_gram(&(&self.linear * basis)))
    }
}

/// Σ_{i=1}^{depth} C^{i−1}·Dg(z_i)·E^{−i} along a branch chain.
fn derivative_series(
    chain: &[Vec<f64>],
    cpow: &[Mat],
    einv: &[Mat],
    d: usize,
    u: usize,
    g: impl Fn(&[f64], &mut [f64]),
) -> Mat {
    let mut acc = Mat::zeros(d, u);
    let mut buf = Mat::zeros(d, u);
    for (i, z) in chain.iter().enumerate() {
        buf.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        g(z, buf.as_mut_slice());
        if buf.max_abs() == 0.0 {
            continue;
        }
        acc = &acc + &(&(&cpow[i] * &buf) * &einv[i]);
    }
    acc
}

pub fn psi_map(
    sys: &SkewProduct,
    code: &MarkovCode,
    family: &PerturbationFamily,
    x: &[f64],
    sigma: &[Word],
    depth: usize,
) -> Result<PsiMap> {
    let (u, d) = (sys.u(), sys.d());
    if sigma.len() < 2 || depth == 0 {
        return Err(Error::InvalidInput("σ needs at least two words and depth ≥ 1".into()));
    }
    if family.base.u() != u || family.base.d() != d {
        return Err(Error::Dimension("family does not match the system".into()));
    }
    let mut words = Vec::with_capacity(sigma.len());
    for w in sigma {
        if w.len() < depth {
            return Err(Error::InvalidInput(format!("word {w} is shorter than depth {depth}")));
        }
        words.push(w.truncate(depth));
    }
    let cpow: Vec<Mat> = (0..depth as u32).map(|i| sys.c.matrix().pow(i)).collect();
    let einv: Vec<Mat> = (1..=depth as u32).map(|i| sys.e.inverse().pow(i)).collect();
    let chains: Vec<Vec<Vec<f64>>> = words.iter().map(|w| code.branch_chain(w, x)).collect::<Result<_>>()?;
    let s = family.len();
    let k = words.len() - 1;
    let ud = u * d;
    let base: Vec<Mat> = chains
        .iter()
        .map(|ch| derivative_series(ch, &cpow, &einv, d, u, |z, o| family.base.jacobian_add(z, 1.0, o)))
        .collect();
    let per: Vec<Vec<Mat>> = family
        .perturbations
        .par_iter()
        .map(|p| {
            chains
                .iter()
                .map(|ch| derivative_series(ch, &cpow, &einv, d, u, |z, o| p.jacobian_add(z, 1.0, o)))
                .collect()
        })
        .collect();
    let mut offset = vec![0.0; k * ud];
    let mut linear = Mat::zeros(k * ud, s);
    for l in 1..=k {
        let diff = &base[l] - &base[0];
        offset[(l - 1) * ud..l * ud].copy_from_slice(diff.as_slice());
        for (c, pm) in per.iter().enumerate() {
            let diff = &pm[l] - &pm[0];
            for (r, v) in diff.as_slice().iter().enumerate() {
                linear[((l - 1) * ud + r, c)] = *v;
            }
        }
    }
    let kc = &sys.constants;
    let ratio = kc.lambda_upper / kc.mu_lower;
    let geo = 2.0 * kc.lambda_upper.powi(depth as i32) * kc.mu_lower.powi(-(depth as i32) - 1) / (1.0 - ratio);
    let tail_linear = geo * family.perturbations.iter().map(|p| p.c1_bound()).fold(0.0, f64::max);
    Ok(PsiMap { x: x.to_vec(), words, depth, offset, linear, tail_linear, tail_offset: geo * family.base.c1_bound() })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenericTrial {
    pub words: Vec<Word>,
    /// Indices into `words` of the subsequence found, starting with 0.
    pub witness: Option<Vec<usize>>,
    pub jacobian: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenericReport {
    pub n: usize,
    pub big_d: usize,
    pub kappa: usize,
    pub depth: usize,
    /// #Iⁿ(x)
    pub truncations: usize,
    /// Fewer than D + 1 distinct n-truncations exist, so the definition holds vacuously.
    pub vacuous: bool,
    pub trials: Vec<GenericTrial>,
    pub passed: usize,
    /// Sampled sequences checked; exhaustive verification is not attempted.
    pub coverage: String,
    pub holds_on_sample: bool,
}

/// Random subsequences tried after the greedy choice fails.
const RETRIES: usize = 32;

/// Sampled check of n-genericity at x: sequences of D + 1 words with distinct
/// n-truncations, and a subsequence of length ⌊D/2n⌋ + 1 starting at a₀ with
/// Jac ψ > ½. The subsequence is chosen greedily, skipping words in a chosen
/// word's orbit class and words whose bump supports meet another chosen
/// word's chain.
#[allow(clippy::too_many_arguments)]
pub fn n_generic_check(
    sys: &SkewProduct,
    code: &MarkovCode,
    family: &PerturbationFamily,
    n: usize,
    x: &[f64],
    big_d: usize,
    trials: usize,
    depth: usize,
    seed: u64,
) -> Result<GenericReport> {
    if n == 0 || (big_d as u128) < (n as u128).pow(3) {
        return Err(Error::InvalidInput(format!("D = {big_d} must be at least n³ = {}", n.pow(3))));
    }
    if depth < n {
        return Err(Error::InvalidInput(format!("depth {depth} must be at least n = {n}")));
    }
    let kappa = big_d / (2 * n);
    let truncs = words_at(code, x, n, crate::markov::DEFAULT_WORD_CAP)?;
    let mut report = GenericReport {
        n,
        big_d,
        kappa,
        depth,
        truncations: truncs.len(),
        vacuous: truncs.len() < big_d + 1,
        trials: Vec::new(),
        passed: 0,
        coverage: String::new(),
        holds_on_sample: true,
    };
    if report.vacuous {
        report.coverage = format!("vacuous: #I^{n}(x) = {} < D + 1 = {}", truncs.len(), big_d + 1);
        return Ok(report);
    }
    let supports: Vec<(Vec<f64>, f64)> = family
        .perturbations
        .iter()
        .filter_map(|p| match p {
            Perturbation::Bump(b) => Some((b.centre.clone(), b.outer)),
            Perturbation::Trig(_) => None,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let mut chosen: Vec<Word> = truncs.choose_multiple(&mut rng, big_d + 1).cloned().collect();
        for w in chosen.iter_mut() {
            let mut syms = w.0.clone();
            while syms.len() < depth {
                let pred = code.predecessors(syms[0]);
                syms.insert(0, pred[rng.gen_range(0..pred.len())]);
            }
            *w = Word(syms);
        }
        let chains: Vec<Vec<Vec<f64>>> = chosen.iter().map(|w| code.branch_chain(w, x)).collect::<Result<_>>()?;
        let centres: Vec<&Vec<f64>> = chains.iter().map(|c| &c[n - 1]).collect();
        // Does the chain of word i pass through a support centred at word j's n-point?
        let hits = |i: usize, j: usize| -> bool {
            supports.iter().any(|(c, r)| {
                torus_distance(c, centres[j]) < 1e-12 && chains[i].iter().any(|z| torus_distance(z, c) < *r)
            })
        };
        let compatible = |sel: &[usize], c: usize| -> bool {
            sel.iter().all(|&b| {
                !in_orbit_class(&sys.e, centres[b], centres[c], depth)
                    && !in_orbit_class(&sys.e, centres[c], centres[b], depth)
                    && (b == 0 || !hits(c, b))
                    && !hits(b, c)
            })
        };
        let mut greedy = vec![0usize];
        for c in 1..chosen.len() {
            if greedy.len() == kappa + 1 {
                break;
            }
            if compatible(&greedy, c) {
                greedy.push(c);
            }
        }
        let jac_of = |sel: &[usize]| -> Result<f64> {
            let sigma: Vec<Word> = sel.iter().map(|&i| chosen[i].clone()).collect();
            Ok(psi_map(sys, code, family, x, &sigma, depth)?.jacobian_sup())
        };
        let mut best = (0.0, None);
        if greedy.len() == kappa + 1 {
            let j = jac_of(&greedy)?;
            best = (j, Some(greedy.clone()));
        }
        let mut tries = 0;
        while best.0 <= 0.5 && tries < RETRIES {
            tries += 1;
            let mut rest: Vec<usize> = (1..chosen.len()).collect();
            rest.shuffle(&mut rng);
            let mut sel = vec![0usize];
            sel.extend(rest.into_iter().take(kappa));
            sel[1..].sort();
            let j = jac_of(&sel)?;
            if j > best.0 || best.1.is_none() {
                best = (j, Some(sel));
            }
        }
        let pass = best.0 > 0.5;
        report.passed += pass as usize;
        report.trials.push(GenericTrial { words: chosen, witness: best.1, jacobian: best.0, pass });
    }
    report.holds_on_sample = report.passed == report.trials.len();
    report.coverage =
        format!("{} sampled sequences of {} words out of #I^{n}(x) = {}", trials, big_d + 1, truncs.len());
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub t: Vec<f64>,
    pub tau_upper: u64,
    pub jq: f64,
    pub condition_holds: bool,
    pub margin: Option<f64>,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub q: usize,
    pub p: usize,
    pub grid_step: f64,
    pub points: Vec<SweepPoint>,
    pub certified: usize,
    pub certified_fraction: f64,
}

impl SweepReport {
    /// One row per grid point: t components, τ, J^q, verdict and margin.
    pub fn to_csv(&self) -> String {
        let s = self.points.first().map_or(0, |p| p.t.len());
        let mut out: Vec<String> = (0..s).map(|i| format!("t{i}")).collect();
        out.extend(["tau_upper", "jq", "condition_holds", "margin"].map(String::from));
        let mut text = out.join(",") + "\n";
        for p in &self.points {
            let mut row: Vec<String> = p.t.iter().map(|v| format!("{v}")).collect();
            row.push(p.tau_upper.to_string());
            row.push(format!("{}", p.jq));
            row.push(p.condition_holds.to_string());
            row.push(p.margin.map_or(String::new(), |m| format!("{m}")));
            text.push_str(&row.join(","));
            text.push('\n');
        }
        text
    }
}

/// τ(q) and the condition margin of T_t for every t on the grid.
pub fn parameter_sweep(
    e: &ExpandingMap,
    c: &Contraction,
    code: &MarkovCode,
    family: &PerturbationFamily,
    t_grid: &[Vec<f64>],
    q: usize,
    p: usize,
    opts: &TauOptions,
) -> Result<SweepReport> {
    let opts = TauOptions { margin: true, ..opts.clone() };
    let points: Vec<SweepPoint> = t_grid
        .iter()
        .map(|t| {
            let f = family
                .to_trig(t)?
                .ok_or_else(|| Error::InvalidInput("parameter sweeps need trig-polynomial perturbations".into()))?;
            let sys = derive_constants(e.clone(), c.clone(), f)?;
            let r = tau_upper(&sys, code, q, p, &opts)?;
            Ok(SweepPoint {
                t: t.clone(),
                tau_upper: r.tau_upper,
                jq: r.jq,
                condition_holds: r.condition_holds,
                margin: r.margin,
                threshold: r.threshold,
            })
        })
        .collect::<Result<_>>()?;
    let certified = points.iter().filter(|p| p.condition_holds).count();
    Ok(SweepReport {
        q,
        p,
        grid_step: opts.grid_step,
        certified,
        certified_fraction: if points.is_empty() { 0.0 } else { certified as f64 / points.len() as f64 },
        points,
    })
}

/// Agreement of [`genericity_feasible`] with [`in_cde`] for a pair (E, C).
pub fn cde_consistent(e: &ExpandingMap, c: &Contraction) -> bool {
    genericity_feasible(e, c) == in_cde(e, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::build_partition;

    fn system(m: i64, lambda: f64, f: TrigPolynomial) -> (SkewProduct, MarkovCode) {
        let e = ExpandingMap::scalar(m);
        let code = build_partition(&e, 0).unwrap();
        (derive_constants(e, Contraction::scalar(lambda).unwrap(), f).unwrap(), code)
    }

    fn bumps(sys: &SkewProduct, code: &MarkovCode, n: usize, x: &[f64], nu: usize) -> BumpFamily {
        let eps0 = 0.5 * separation_radius(sys, code, x, n, nu).unwrap();
        build_bump_family(sys, code, n, x, eps0, nu).unwrap()
    }

    #[test]
    fn p_and_b() {
        let (sys, _) = system(2, 0.7, TrigPolynomial::cosine(1.0));
        let k = &sys.constants;
        assert!((b_constant(k) - 1.514573172829758).abs() < 1e-12);
        assert_eq!(p_of_q(k, 4), 7);
        for q in 1..40 {
            let p = p_of_q(k, q) as i32;
            let holds = |p: i32| (k.d as f64).sqrt() * k.mu_lower.powi(-p) < k.theta.powi(q as i32);
            assert!(holds(p));
            assert!(!holds(p - 1));
        }
    }

    #[test]
    fn kappa_for_doubling() {
        let e = ExpandingMap::scalar(2);
        let c = Contraction::scalar(0.7).unwrap();
        let s = genericity_constants(&e, &c).unwrap();
        assert_eq!(s.kappa0, 5);
        assert!(!genericity_inequalities(&e, &c, s.n0, s.d0, 4)[1]);
        assert!(genericity_inequalities(&e, &c, s.n0, s.d0, 5)[1]);
        assert!(s.checks.iter().all(|&v| v));
        assert_eq!(genericity_inequalities(&e, &c, s.n0, s.d0, s.kappa0), [true; 4]);
        // Minimality of n₀ with its smallest D₀.
        let n = s.n0 - 1;
        let d0 = n.pow(3).max(2 * n * (s.kappa0 + 1)) + 1;
        assert!(!genericity_inequalities(&e, &c, n, d0, s.kappa0).iter().all(|&v| v));
    }

    #[test]
    fn weak_contraction_is_feasible_but_large() {
        let s = genericity_constants(&ExpandingMap::scalar(2), &Contraction::scalar(0.99).unwrap()).unwrap();
        assert!(s.kappa0 > 100);
        assert!(s.checks.iter().all(|&v| v));
    }

    #[test]
    fn infeasibility_matches_cde() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let m = rng.gen_range(2..5);
            let e = if rng.gen() {
                ExpandingMap::scalar(m)
            } else {
                ExpandingMap::diagonal(&[m, rng.gen_range(2..5)]).unwrap()
            };
            let d = rng.gen_range(1..=e.dim());
            let c = Contraction::new(Mat::diag(&(0..d).map(|_| rng.gen_range(0.05..1.2)).collect::<Vec<_>>())).unwrap();
            assert!(cde_consistent(&e, &c));
            if let Err(err) = genericity_constants(&e, &c) {
                assert_eq!(err.kind(), "InfeasibleOutsideCdE");
            }
        }
    }

    #[test]
    fn nu_condition() {
        let (sys, _) = system(2, 0.7, TrigPolynomial::cosine(1.0));
        let k = &sys.constants;
        let big = nu_feasibility(k, 2, 200).unwrap();
        assert!(big.feasible && (big.lhs.unwrap() - 1.0).abs() < 1e-9);
        let zero = nu_feasibility(k, 2, 0).unwrap();
        assert!(zero.lhs.is_none() && !zero.feasible);
        let nu = smallest_nu(k, 2, 100).unwrap().unwrap();
        // Oracle: (1 − 4·4·0.35^ν/0.65)^4 > 1/2.
        let oracle = (0..100usize).find(|&v| {
            let inner = 1.0 - 16.0 * 0.35f64.powi(v as i32) / 0.65;
            inner > 0.0 && inner.powi(4) > 0.5
        });
        assert_eq!(Some(nu), oracle);
        assert_eq!(nu, 5);
        for v in nu..nu + 20 {
            assert!(nu_feasibility(k, 2, v).unwrap().feasible);
        }
    }

    #[test]
    fn profile_shape() {
        assert_eq!(flat_top_profile(0.2), (1.0, 0.0));
        assert_eq!(flat_top_profile(1.0), (0.0, 0.0));
        assert!(flat_top_profile(0.999_999).0 < 1e-9);
        let mut worst: f64 = 0.0;
        let mut prev = 1.0;
        for i in 0..=10_000 {
            let s = i as f64 / 10_000.0;
            let (r, dr) = flat_top_profile(s);
            assert!(r <= prev + 1e-12);
            prev = r;
            worst = worst.max(r + s * dr.abs());
            if i > 0 && i < 10_000 {
                let h = 1e-6;
                let fd = (flat_top_profile(s + h).0 - flat_top_profile(s - h).0) / (2.0 * h);
                assert!((fd - dr).abs() < 1e-5, "s={s}: {fd} vs {dr}");
            }
        }
        assert!(worst < 1.7, "{worst}");
    }

    #[test]
    fn doubling_bumps_at_level_one() {
        let (sys, code) = system(2, 0.7, TrigPolynomial::cosine(1.0));
        let fam = bumps(&sys, &code, 1, &[0.1], 5);
        assert_eq!(fam.family.len(), 2);
        let centres: Vec<f64> = fam
            .family
            .perturbations
            .iter()
            .map(|p| match p {
                Perturbation::Bump(b) => b.centre[0],
                _ => unreachable!(),
            })
            .collect();
        let mut sorted = centres.clone();
        sorted.sort_by(f64::total_cmp);
        assert!((sorted[0] - 0.05).abs() < 1e-12 && (sorted[1] - 0.55).abs() < 1e-12);
        for p in &fam.family.perturbations {
            let Perturbation::Bump(b) = p else { unreachable!() };
            assert!((b.jacobian(&b.centre)[(0, 0)] - 2.0).abs() < 1e-15);
            assert!(2.0 * b.outer < (sorted[1] - sorted[0]));
        }
        assert!(fam.all_verified(), "{:?}", fam.checks);
        assert!(matches!(build_bump_family(&sys, &code, 1, &[0.1], 0.01, 5), Err(Error::SeparationFailure(_))));
    }

    #[test]
    fn bumps_in_two_dimensions() {
        let e = ExpandingMap::diagonal(&[2, 3]).unwrap();
        let code = build_partition(&e, 0).unwrap();
        let f = TrigPolynomial::new(2, 1, vec![TrigTerm { k: vec![1, 1], cos: vec![1.0], sin: vec![0.0] }]).unwrap();
        let sys = derive_constants(e, Contraction::scalar(0.5).unwrap(), f).unwrap();
        let x = [0.137, 0.291];
        let max = separation_radius(&sys, &code, &x, 2, 2).unwrap();
        let fam = build_bump_family(&sys, &code, 2, &x, 0.5 * max, 2).unwrap();
        assert_eq!(fam.family.len(), 36 * 2);
        assert!(fam.all_verified(), "{:?}", fam.checks.iter().find(|c| !(c.support_ok && c.inner_ok && c.bound_ok)));
    }

    #[test]
    fn bump_jacobian_matches_differences() {
        let (sys, code) = system(3, 0.6, TrigPolynomial::cosine(1.0));
        let fam = bumps(&sys, &code, 2, &[0.3], 3);
        let Perturbation::Bump(b) = &fam.family.perturbations[4] else { unreachable!() };
        for s in [0.2, 0.4, 0.55, 0.7, 0.9] {
            let y = [b.centre[0] + s * b.outer];
            let h = 1e-4 * b.outer;
            let mut p = [0.0];
            let mut m = [0.0];
            b.eval_add(&[y[0] + h], 1.0, &mut p);
            b.eval_add(&[y[0] - h], 1.0, &mut m);
            let fd = (p[0] - m[0]) / (2.0 * h);
            let an = b.jacobian(&y)[(0, 0)];
            assert!((fd - an).abs() < 1e-5 * an.abs().max(1.0), "{s}: {fd} vs {an}");
        }
    }

    fn separated_sigma(fam: &BumpFamily, code: &MarkovCode, x: &[f64], k: usize) -> Vec<Word> {
        let supports: Vec<(Vec<f64>, f64)> = fam
            .family
            .perturbations
            .iter()
            .map(|p| match p {
                Perturbation::Bump(b) => (b.centre.clone(), b.outer),
                _ => unreachable!(),
            })
            .collect();
        let chains: Vec<Vec<Vec<f64>>> = fam.words.iter().map(|w| code.branch_chain(w, x).unwrap()).collect();
        let mut sel = vec![0usize];
        for c in 1..fam.words.len() {
            if sel.len() == k + 1 {
                break;
            }
            let ok = sel.iter().all(|&b| {
                let hit = |i: usize, j: usize| {
                    supports.iter().any(|(ctr, r)| {
                        torus_distance(ctr, &chains[j][fam.n - 1]) < 1e-12
                            && chains[i].iter().any(|z| torus_distance(z, ctr) < *r)
                    })
                };
                !hit(c, b) && !hit(b, c)
            });
            if ok {
                sel.push(c);
            }
        }
        sel.into_iter().map(|i| fam.words[i].clone()).collect()
    }

    #[test]
    fn aligned_family_has_unit_jacobian() {
        let (sys, code) = system(3, 0.6, TrigPolynomial::cosine(1.0));
        let x = [0.3];
        let fam = bumps(&sys, &code, 2, &x, 3);
        let sigma = separated_sigma(&fam, &code, &x, 3);
        assert_eq!(sigma.len(), 4);
        let psi = psi_map(&sys, &code, &fam.family, &x, &sigma, 2).unwrap();
        let w0: Vec<usize> = sigma[1..].iter().map(|w| fam.words.iter().position(|v| v == w).unwrap()).collect();
        let block: Vec<usize> = w0.iter().map(|&w| fam.index(w, 0, 0, 1, 1)).collect();
        assert!((psi.jacobian_on(&block).unwrap() - 1.0).abs() < 1e-9);
        assert!(psi.jacobian_sup() >= 1.0 - 1e-9);
        let zero = PerturbationFamily::new(
            TrigPolynomial::zero(1, 1),
            vec![Perturbation::Trig(TrigPolynomial::zero(1, 1)); 9],
        );
        let psi0 = psi_map(&sys, &code, &zero, &x, &sigma, 2).unwrap();
        assert_eq!(psi0.jacobian_sup(), 0.0);
    }

    #[test]
    fn psi_is_affine() {
        let (sys, code) = system(3, 0.6, TrigPolynomial::cosine(1.0));
        let fam = PerturbationFamily::trig(
            TrigPolynomial::cosine(1.0),
            vec![
                TrigPolynomial::cosine(0.5),
                TrigPolynomial::new(1, 1, vec![TrigTerm { k: vec![2], cos: vec![0.0], sin: vec![1.0] }]).unwrap(),
            ],
        )
        .unwrap();
        let x = [0.42];
        let sigma: Vec<Word> = ["0.1.2.0", "2.2.1.1", "1.0.0.2"].iter().map(|s| s.parse().unwrap()).collect();
        let psi = psi_map(&sys, &code, &fam, &x, &sigma, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let t1: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t2: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sum: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| a + b).collect();
            let lhs: Vec<f64> = psi.eval(&sum).iter().zip(psi.eval(&t1)).map(|(a, b)| a - b).collect();
            let rhs: Vec<f64> = psi.eval(&t2).iter().zip(psi.eval(&[0.0, 0.0])).map(|(a, b)| a - b).collect();
            for (a, b) in lhs.iter().zip(&rhs) {
                assert!((a - b).abs() < 1e-12);
            }
            // ψ(t) agrees with graph derivatives of the system f_t.
            let f = fam.to_trig(&t1).unwrap().unwrap();
            let st = derive_constants(sys.e.clone(), sys.c.clone(), f).unwrap();
            let ds: Vec<Mat> = sigma.iter().map(|w| crate::graph::s_derivative(&st, &code, w, &x).unwrap()).collect();
            let v = psi.eval(&t1);
            for l in 1..3 {
                assert!((v[l - 1] - (ds[l][(0, 0)] - ds[0][(0, 0)])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perturbed_identity_determinant_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for dim in [2usize, 4, 6] {
            for eps in [0.01, 0.05, 0.1] {
                let mut p = Mat::zeros(dim, dim);
                p.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
                let p = p.scale(eps / p.op_norm());
                let l = &Mat::identity(dim) + &p;
                let psi = PsiMap {
                    x: vec![0.0],
                    words: Vec::new(),
                    depth: 1,
                    offset: vec![0.0; dim],
                    linear: l.clone(),
                    tail_linear: 0.0,
                    tail_offset: 0.0,
                };
                let all: Vec<usize> = (0..dim).collect();
                let j = psi.jacobian_on(&all).unwrap();
                assert!((j - l.det().abs()).abs() < 1e-12);
                assert!(j >= (1.0 - eps).powi(dim as i32) - 1e-12);
            }
        }
    }

    #[test]
    fn genericity_sampling() {
        let (sys, code) = system(3, 0.6, TrigPolynomial::cosine(1.0));
        let x = [0.3];
        let fam = bumps(&sys, &code, 2, &x, 3);
        let rep = n_generic_check(&sys, &code, &fam.family, 2, &x, 8, 5, 5, 11).unwrap();
        assert!(!rep.vacuous);
        assert_eq!(rep.kappa, 2);
        assert!(rep.holds_on_sample, "{rep:?}");
        for t in &rep.trials {
            assert_eq!(t.witness.as_ref().unwrap()[0], 0);
            assert_eq!(t.witness.as_ref().unwrap().len(), 3);
        }
        let zero = PerturbationFamily::new(
            TrigPolynomial::zero(1, 1),
            vec![Perturbation::Trig(TrigPolynomial::zero(1, 1)); 9],
        );
        let rep0 = n_generic_check(&sys, &code, &zero, 2, &x, 8, 2, 5, 11).unwrap();
        assert!(!rep0.holds_on_sample && rep0.passed == 0);
        assert!(matches!(n_generic_check(&sys, &code, &zero, 2, &x, 7, 1, 5, 1), Err(Error::InvalidInput(_))));
        let (s2, c2) = system(2, 0.7, TrigPolynomial::cosine(1.0));
        let f2 = bumps(&s2, &c2, 2, &[0.1], 5);
        let vac = n_generic_check(&s2, &c2, &f2.family, 2, &[0.1], 8, 3, 7, 1).unwrap();
        assert!(vac.vacuous && vac.trials.is_empty());
        let again = n_generic_check(&sys, &code, &fam.family, 2, &x, 8, 5, 5, 11).unwrap();
        assert_eq!(rep, again);
    }

    #[test]
    fn sweep_margins() {
        let e = ExpandingMap::scalar(3);
        let c = Contraction::scalar(0.7).unwrap();
        let code = build_partition(&e, 0).unwrap();
        let phi = TrigPolynomial::new(1, 1, vec![TrigTerm { k: vec![2], cos: vec![0.0], sin: vec![1.0] }]).unwrap();
        let fam = PerturbationFamily::trig(TrigPolynomial::cosine(1.0), vec![phi.clone()]).unwrap();
        let grid: Vec<Vec<f64>> = (0..9).map(|i| vec![-0.2 + 0.05 * i as f64]).collect();
        let opts = TauOptions { grid_step: 0.01, ..TauOptions::default() };
        let rep = parameter_sweep(&e, &c, &code, &fam, &grid, 2, 2, &opts).unwrap();
        assert_eq!(rep.points.len(), 9);
        assert_eq!(rep, parameter_sweep(&e, &c, &code, &fam, &grid, 2, 2, &opts).unwrap());
        for p in &rep.points {
            assert_eq!(p.margin.unwrap() > 0.0, p.condition_holds);
        }
        // Lipschitz in t: DS moves by ≤ c1(φ)/(μ̲ − λ̄) per unit t; the
        // threshold and grid correction scale with the C² bound.
        let k0 = derive_constants(e.clone(), c.clone(), TrigPolynomial::cosine(1.0)).unwrap().constants;
        let c2 = crate::system::c2_norm_bound(&phi);
        let lip = 2.0 * c2 / (k0.mu_lower - k0.lambda_upper) + 10.0 * c2;
        for w in rep.points.windows(2) {
            let dm = (w[1].margin.unwrap() - w[0].margin.unwrap()).abs();
            assert!(dm <= lip * 0.05, "{dm}");
        }
        let zero = PerturbationFamily::trig(TrigPolynomial::zero(1, 1), vec![TrigPolynomial::cosine(1.0)]).unwrap();
        let r0 = parameter_sweep(&e, &c, &code, &zero, &[vec![0.0]], 2, 2, &opts).unwrap();
        assert!(!r0.points[0].condition_holds);
    }
}
