//! Graph maps S(x,a) = Σ C^{i−1} f([a]_i(x)) and their derivatives
//! DS(x,a) = Σ C^{i−1} Df([a]_i(x)) E^{−i}.
//!
//! Infinite words are never formed: a finite word comes with rigorous tail
//! radii for every possible extension.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::markov::{Cylinder, MarkovCode, Word};
use crate::system::{Constants, SkewProduct};

/// Value and derivative of S(·,a) at a point, with tail radii.
#[derive(Clone, Debug, Serialize)]
pub struct GraphJet {
    pub value: Vec<f64>,
    pub derivative: Mat,
    pub depth: usize,
    /// Bound on ‖S(x,w·a) − S(x,a)‖ over all extensions w.
    pub tail_value: f64,
    /// Bound on ‖DS(x,w·a) − DS(x,a)‖ over all extensions w.
    pub tail_deriv: f64,
}

/// λ̄ⁿ‖f‖_∞/(1−λ̄).
pub fn tail_value(k: &Constants, n: usize) -> f64 {
    k.lambda_upper.powi(n as i32) * k.sup_norm / (1.0 - k.lambda_upper)
}

/// (θ^q α₀, 3θ^q α₀).
pub fn tail_bounds(k: &Constants, q: usize) -> (f64, f64) {
    let t = k.theta.powi(q as i32) * k.alpha0;
    (t, 3.0 * t)
}

/// Σ_{i=1}^n λ̄^{i−1}‖f‖_{C²}μ̲^{−2i}: a Lipschitz constant of x ↦ DS(x,a)
/// for words of length n.
pub fn hessian_bound(k: &Constants, n: usize) -> f64 {
    let r = k.mu_lower.powi(-2);
    let mut term = k.c2_norm * r;
    let mut sum = 0.0;
    for _ in 0..n {
        sum += term;
        term *= k.lambda_upper * r;
    }
    sum
}

/// The n → ∞ limit of [`hessian_bound`].
pub fn hessian_bound_limit(k: &Constants) -> f64 {
    let r = k.mu_lower.powi(-2);
    k.c2_norm * r / (1.0 - k.lambda_upper * r)
}

/// S along a branch chain ([a]_1(x), …, [a]_n(x)).
pub fn s_value_on_chain(sys: &SkewProduct, chain: &[Vec<f64>]) -> Vec<f64> {
    let d = sys.d();
    let mut out = vec![0.0; d];
    let mut cpow = Mat::identity(d);
    for z in chain {
        let fz = sys.f.eval(z);
        cpow.mul_vec_add(&fz, &mut out);
        cpow = &cpow * sys.c.matrix();
    }
    out
}

/// DS along a branch chain.
pub fn s_derivative_on_chain(sys: &SkewProduct, chain: &[Vec<f64>]) -> Mat {
    let (u, d) = (sys.u(), sys.d());
    let mut out = Mat::zeros(d, u);
    let mut cpow = Mat::identity(d);
    let mut einv = Mat::identity(u);
    for z in chain {
        einv = &einv * sys.e.inverse();
        let term = &(&cpow * &sys.f.jacobian(z)) * &einv;
        out = &out + &term;
        cpow = &cpow * sys.c.matrix();
    }
    out
}

pub fn s_value(sys: &SkewProduct, code: &MarkovCode, a: &Word, x: &[f64]) -> Result<Vec<f64>> {
    Ok(s_value_on_chain(sys, &code.branch_chain(a, x)?))
}

pub fn s_derivative(sys: &SkewProduct, code: &MarkovCode, a: &Word, x: &[f64]) -> Result<Mat> {
    Ok(s_derivative_on_chain(sys, &code.branch_chain(a, x)?))
}

pub fn graph_jet(sys: &SkewProduct, code: &MarkovCode, a: &Word, x: &[f64]) -> Result<GraphJet> {
    let chain = code.branch_chain(a, x)?;
    let n = a.len();
    Ok(GraphJet {
        value: s_value_on_chain(sys, &chain),
        derivative: s_derivative_on_chain(sys, &chain),
        depth: n,
        tail_value: tail_value(&sys.constants, n),
        tail_deriv: tail_bounds(&sys.constants, n).0,
    })
}

/// Branch chain of a word anchored at an interior point x0 and continued
/// affinely: z_i(x) = z_i(x0) + E^{−i}(x − x0). This evaluates S_c on the
/// closure of a cylinder, boundary points included.
#[derive(Clone, Debug)]
pub struct AnchoredChain {
    x0: Vec<f64>,
    anchors: Vec<Vec<f64>>,
    einv: Vec<Mat>,
}

impl AnchoredChain {
    pub fn new(sys: &SkewProduct, code: &MarkovCode, a: &Word, x0: &[f64]) -> Result<AnchoredChain> {
        let anchors = code.branch_chain(a, x0)?;
        let mut einv = Vec::with_capacity(a.len());
        let mut m = Mat::identity(sys.u());
        for _ in 0..a.len() {
            m = &m * sys.e.inverse();
            einv.push(m.clone());
        }
        Ok(AnchoredChain { x0: x0.to_vec(), anchors, einv })
    }

    pub fn chain_at(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let delta: Vec<f64> = x.iter().zip(&self.x0).map(|(a, b)| a - b).collect();
        self.anchors
            .iter()
            .zip(&self.einv)
            .map(|(z, m)| {
                let mut p = z.clone();
                m.mul_vec_add(&delta, &mut p);
                p
            })
            .collect()
    }

    pub fn value(&self, sys: &SkewProduct, x: &[f64]) -> Vec<f64> {
        s_value_on_chain(sys, &self.chain_at(x))
    }

    pub fn derivative(&self, sys: &SkewProduct, x: &[f64]) -> Mat {
        s_derivative_on_chain(sys, &self.chain_at(x))
    }
}

/// DS(x, a) for every a ∈ I^q(c) at the points x = centre(c) + offset.
/// Entries are stored as `values[(word · points + point) · du ..][..du]`,
/// each block a row-major d×u matrix.
#[derive(Clone, Debug)]
pub struct DsTable {
    pub words: Vec<Word>,
    pub points: usize,
    pub du: usize,
    pub values: Vec<f64>,
}

impl DsTable {
    pub fn get(&self, word: usize, point: usize) -> &[f64] {
        let s = (word * self.points + point) * self.du;
        &self.values[s..s + self.du]
    }

    pub fn word_block(&self, word: usize) -> &[f64] {
        let s = word * self.points * self.du;
        &self.values[s..s + self.points * self.du]
    }
}

/// Builds a [`DsTable`] by a depth-first walk of the landing-word tree, so
/// that words sharing their nearest symbols share partial sums.
pub fn ds_table(
    sys: &SkewProduct,
    code: &MarkovCode,
    cyl: &Cylinder,
    q: usize,
    offsets: &[Vec<f64>],
    cap: u64,
) -> Result<DsTable> {
    let count = code.count_landing(q, &cyl.word);
    if count * offsets.len() as f64 > cap as f64 * 64.0 || count > cap as f64 {
        return Err(Error::CombinatorialBlowup { what: "landing words".into(), count, cap });
    }
    let (u, d) = (sys.u(), sys.d());
    let du = u * d;
    // Per-depth E^{−i}, E^{−i}·offset and C^{i−1}.
    let mut einv = Vec::with_capacity(q);
    let mut cpow = Vec::with_capacity(q);
    let mut m = Mat::identity(u);
    let mut c = Mat::identity(d);
    for _ in 0..q {
        m = &m * sys.e.inverse();
        einv.push(m.clone());
        cpow.push(c.clone());
        c = &c * sys.c.matrix();
    }
    let shifted: Vec<Vec<Vec<f64>>> = einv.iter().map(|m| offsets.iter().map(|o| m.mul_vec(o)).collect()).collect();
    let mut walk = Walk {
        sys,
        code,
        q,
        du,
        einv: &einv,
        cpow: &cpow,
        shifted: &shifted,
        stack: Vec::with_capacity(q),
        words: Vec::with_capacity(count as usize),
        values: Vec::with_capacity(count as usize * offsets.len() * du),
        scratch: vec![0.0; du],
    };
    let base = vec![0.0; offsets.len() * du];
    for &s in code.predecessors(cyl.word.first()) {
        walk.visit(s, &cyl.centre, &base)?;
    }
    Ok(DsTable { words: walk.words, points: offsets.len(), du, values: walk.values })
}

struct Walk<'a> {
    sys: &'a SkewProduct,
    code: &'a MarkovCode,
    q: usize,
    du: usize,
    einv: &'a [Mat],
    cpow: &'a [Mat],
    shifted: &'a [Vec<Vec<f64>>],
    stack: Vec<u32>,
    words: Vec<Word>,
    values: Vec<f64>,
    scratch: Vec<f64>,
}

impl Walk<'_> {
    fn visit(&mut self, s: u32, parent_anchor: &[f64], parent: &[f64]) -> Result<()> {
        let anchor = self.code.branch(s, parent_anchor).ok_or(Error::WordNotAdmissibleAtPoint)?;
        let depth = self.stack.len();
        let (u, d) = (self.sys.u(), self.sys.d());
        let einv = &self.einv[depth];
        let cpow = &self.cpow[depth];
        let mut partial = parent.to_vec();
        let mut z = vec![0.0; u];
        let mut cdf = vec![0.0; self.du];
        for (g, off) in self.shifted[depth].iter().enumerate() {
            for k in 0..u {
                z[k] = anchor[k] + off[k];
            }
            self.scratch.iter_mut().for_each(|v| *v = 0.0);
            self.sys.f.jacobian_add(&z, 1.0, &mut self.scratch);
            // C^{i−1}·Df
            for r in 0..d {
                for col in 0..u {
                    cdf[r * u + col] = (0..d).map(|t| cpow[(r, t)] * self.scratch[t * u + col]).sum();
                }
            }
            // ·E^{−i}
            let out = &mut partial[g * self.du..(g + 1) * self.du];
            for r in 0..d {
                for col in 0..u {
                    out[r * u + col] += (0..u).map(|t| cdf[r * u + t] * einv[(t, col)]).sum::<f64>();
                }
            }
        }
        self.stack.push(s);
        if self.stack.len() == self.q {
            self.words.push(Word(self.stack.iter().rev().copied().collect()));
            self.values.extend_from_slice(&partial);
        } else {
            let preds = self.code.predecessors(s).to_vec();
            for p in preds {
                self.visit(p, &anchor, &partial)?;
            }
        }
        self.stack.pop();
        Ok(())
    }
}
