//! Certified pairwise transversality and the τ(q) < J^q condition.
//!
//! A pair (a, b) of landing words is certified on a cylinder R(c) when a
//! rigorous lower bound for min_{x,y} 𝔪(DS(x,a) − DS(y,b)) over the closure
//! of R(c) exceeds 3θ^qα₀. The bound comes from a finite grid: 𝔪 is
//! 1-Lipschitz in the operator norm and x ↦ DS(x,a) is H-Lipschitz, so
//! moving each point by at most the grid-cell circumradius ρ changes the
//! value by at most 2Hρ.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{ds_table, hessian_bound, tail_bounds, AnchoredChain, DsTable};
use crate::linalg::{smallest_singular_rows, DEFAULT_TOL};
use crate::markov::{Cylinder, MarkovCode, Word, DEFAULT_WORD_CAP};
use crate::system::{Constants, SkewProduct};

/// Largest number of per-(c, a) counts stored verbatim in a report.
pub const KEEP_COUNTS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Verdict {
    CertifiedTransversal,
    NotCertified,
}

#[derive(Clone, Debug, Serialize)]
pub struct TransversalityCertificate {
    pub c: Word,
    pub a: Word,
    pub b: Word,
    pub q: usize,
    pub p: usize,
    /// Certified lower bound of 𝔪 over all closure pairs.
    pub lower_bound: f64,
    pub threshold: f64,
    pub margin: f64,
    pub grid_step: f64,
    pub grid: usize,
    pub lipschitz_used: f64,
    pub correction: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug)]
pub struct TauOptions {
    /// Target spacing of grid points in torus coordinates.
    pub grid_step: f64,
    /// Added to the Lipschitz correction to absorb rounding.
    pub tol: f64,
    pub word_cap: u64,
    /// Also compute the condition margin (slower: every pair bound is exact).
    pub margin: bool,
}

impl Default for TauOptions {
    fn default() -> Self {
        TauOptions { grid_step: 1e-3, tol: DEFAULT_TOL, word_cap: DEFAULT_WORD_CAP, margin: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairCount {
    pub c: Word,
    pub a: Word,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CountSummary {
    pub max: u64,
    pub mean: f64,
    /// (count, number of (c, a) with that count)
    pub histogram: Vec<(u64, u64)>,
    pub worst_c: Word,
    pub worst_a: Word,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TauReport {
    pub q: usize,
    pub p: usize,
    pub grid_step: f64,
    pub threshold: f64,
    pub lipschitz_used: f64,
    pub tau_upper: u64,
    pub jq: f64,
    pub condition_holds: bool,
    pub base_words: u64,
    pub pairs: f64,
    pub certified_pairs: u64,
    /// Per-(c, a) non-certified counts when there are at most
    /// [`KEEP_COUNTS`] of them.
    pub counts: Option<Vec<PairCount>>,
    pub summary: CountSummary,
    /// min over (c, a) of (k-th smallest pair bound − threshold) with
    /// k = ⌈J^q⌉; positive exactly when the condition holds.
    pub margin: Option<f64>,
}

/// Rule for choosing the base-word length p from q.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PRule {
    Fixed(usize),
    /// p(q) = ⌊(−q ln θ + ln √d)/ln μ̲⌋ + 1.
    Genericity,
}

impl PRule {
    pub fn p_for(&self, k: &Constants, q: usize) -> usize {
        match *self {
            PRule::Fixed(p) => p,
            PRule::Genericity => genericity_p(k, q),
        }
    }
}

/// Smallest p with μ̲^{−p}√d < θ^q.
pub fn genericity_p(k: &Constants, q: usize) -> usize {
    let v = (-(q as f64) * k.theta.ln() + (k.d as f64).sqrt().ln()) / k.mu_lower.ln();
    v.floor().max(0.0) as usize + 1
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionReport {
    pub trail: Vec<TauReport>,
    /// Smallest q in the list at which τ(q) < J^q was certified.
    pub first_q: Option<usize>,
    pub exhausted: bool,
    /// Set when the scan stopped at a q that exceeded a size cap.
    pub stopped: Option<String>,
}

/// Certificate grid of a base word: the cylinder and the number of cells
/// per axis (a power of two).
fn grid_setup(code: &MarkovCode, c: &Word, grid_step: f64) -> Result<(Cylinder, usize)> {
    if !(grid_step > 0.0) {
        return Err(Error::InvalidInput(format!("grid step must be positive, got {grid_step}")));
    }
    let cyl = code.cylinder(c)?;
    let g = cyl.grid_for_step(grid_step);
    Ok((cyl, g))
}

/// DS values of a set of words on nested grids over the closure of R(c):
/// level l has 2^l cells per axis and the last level is the certificate
/// grid. A descendant cell centre lies within ρ_l − ρ_L of its ancestor's,
/// which makes coarse-level pruning exact.
struct Pyramid {
    u: usize,
    d: usize,
    words: Vec<Word>,
    grids: Vec<usize>,
    rho: Vec<f64>,
    /// values[l][(word · points_l + point) · du ..][..du]
    values: Vec<Vec<f64>>,
}

struct Scratch {
    diff: Vec<f64>,
    stack: Vec<(usize, usize, usize)>,
    cx: Vec<usize>,
    cy: Vec<usize>,
}

impl Scratch {
    fn new(du: usize) -> Scratch {
        Scratch { diff: vec![0.0; du], stack: Vec::new(), cx: Vec::new(), cy: Vec::new() }
    }
}

impl Pyramid {
    fn levels(cyl: &Cylinder, g: usize) -> (Vec<usize>, Vec<f64>, Vec<Vec<Vec<f64>>>) {
        let mut grids = Vec::new();
        let mut rho = Vec::new();
        let mut offsets = Vec::new();
        let mut level = 1;
        loop {
            let (o, r) = cyl.grid(level);
            grids.push(level);
            rho.push(r);
            offsets.push(o);
            if level >= g {
                break;
            }
            level *= 2;
        }
        (grids, rho, offsets)
    }

    /// All landing words of length q, evaluated by the shared-suffix walk.
    fn landing(sys: &SkewProduct, code: &MarkovCode, cyl: &Cylinder, g: usize, q: usize, cap: u64) -> Result<Pyramid> {
        let (grids, rho, offsets) = Self::levels(cyl, g);
        let mut values = Vec::with_capacity(grids.len());
        let mut words = Vec::new();
        for o in &offsets {
            let t = ds_table(sys, code, cyl, q, o, cap)?;
            words = t.words;
            values.push(t.values);
        }
        Ok(Pyramid { u: sys.u(), d: sys.d(), words, grids, rho, values })
    }

    /// An explicit list of words, evaluated one chain at a time.
    fn explicit(sys: &SkewProduct, code: &MarkovCode, cyl: &Cylinder, g: usize, words: &[Word]) -> Result<Pyramid> {
        let (grids, rho, offsets) = Self::levels(cyl, g);
        let chains: Vec<AnchoredChain> =
            words.iter().map(|w| AnchoredChain::new(sys, code, w, &cyl.centre)).collect::<Result<_>>()?;
        let values = offsets
            .iter()
            .map(|o| {
                let mut v = Vec::new();
                for chain in &chains {
                    for off in o {
                        let x: Vec<f64> = cyl.centre.iter().zip(off).map(|(p, q)| p + q).collect();
                        v.extend_from_slice(chain.derivative(sys, &x).as_slice());
                    }
                }
                v
            })
            .collect();
        Ok(Pyramid { u: sys.u(), d: sys.d(), words: words.to_vec(), grids, rho, values })
    }

    fn top(&self) -> usize {
        self.grids.len() - 1
    }

    fn block(&self, l: usize, w: usize, i: usize) -> &[f64] {
        let du = self.u * self.d;
        let s = (w * self.grids[l].pow(self.u as u32) + i) * du;
        &self.values[l][s..s + du]
    }

    fn children(&self, l: usize, i: usize, out: &mut Vec<usize>) {
        let g = self.grids[l];
        out.clear();
        for mask in 0..1usize << self.u {
            let (mut lin, mut stride, mut rem) = (0, 1, i);
            for k in 0..self.u {
                let ik = rem % g;
                rem /= g;
                lin += (2 * ik + (mask >> k & 1)) * stride;
                stride *= 2 * g;
            }
            out.push(lin);
        }
    }

    fn m(&self, l: usize, a: usize, i: usize, b: usize, j: usize, diff: &mut [f64]) -> f64 {
        let (x, y) = (self.block(l, a, i), self.block(l, b, j));
        if x.len() == 1 {
            return (x[0] - y[0]).abs();
        }
        for k in 0..x.len() {
            diff[k] = x[k] - y[k];
        }
        smallest_singular_rows(self.d, self.u, diff)
    }

    fn push_children(&self, l: usize, i: usize, j: usize, s: &mut Scratch) {
        let (mut cx, mut cy) = (std::mem::take(&mut s.cx), std::mem::take(&mut s.cy));
        self.children(l, i, &mut cx);
        self.children(l, j, &mut cy);
        for &x in &cx {
            for &y in &cy {
                s.stack.push((l + 1, x, y));
            }
        }
        s.cx = cx;
        s.cy = cy;
    }

    /// Whether some pair of finest cells has m − 2Hρ − tol ≤ thr.
    fn pair_fails(&self, a: usize, b: usize, h: f64, tol: f64, thr: f64, s: &mut Scratch) -> bool {
        let top = self.top();
        s.stack.clear();
        s.stack.push((0, 0, 0));
        while let Some((l, i, j)) = s.stack.pop() {
            let m = self.m(l, a, i, b, j, &mut s.diff);
            if m - 2.0 * h * self.rho[l] - tol > thr {
                continue;
            }
            if l == top {
                return true;
            }
            self.push_children(l, i, j, s);
        }
        false
    }

    /// Exact minimum of m over pairs of finest cells.
    fn pair_min(&self, a: usize, b: usize, h: f64, s: &mut Scratch) -> f64 {
        let top = self.top();
        let mut best = f64::INFINITY;
        s.stack.clear();
        s.stack.push((0, 0, 0));
        while let Some((l, i, j)) = s.stack.pop() {
            let m = self.m(l, a, i, b, j, &mut s.diff);
            if l == top {
                best = best.min(m);
                continue;
            }
            if m - 2.0 * h * (self.rho[l] - self.rho[top]) >= best {
                continue;
            }
            self.push_children(l, i, j, s);
        }
        best
    }
}

fn check_dims(sys: &SkewProduct) -> Result<()> {
    if sys.d() > sys.u() {
        return Err(Error::Dimension(format!("transversality needs d ≤ u, got d = {} and u = {}", sys.d(), sys.u())));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn certificate(
    c: &Word,
    a: &Word,
    b: &Word,
    q: usize,
    m: f64,
    correction: f64,
    thr: f64,
    grid_step: f64,
    grid: usize,
    h: f64,
) -> TransversalityCertificate {
    let lower = m - correction;
    let margin = lower - thr;
    TransversalityCertificate {
        c: c.clone(),
        a: a.clone(),
        b: b.clone(),
        q,
        p: c.len(),
        lower_bound: lower,
        threshold: thr,
        margin,
        grid_step,
        grid,
        lipschitz_used: h,
        correction,
        verdict: if margin > 0.0 { Verdict::CertifiedTransversal } else { Verdict::NotCertified },
    }
}

/// Certifies one pair on the closure of R(c).
pub fn certify_pair(
    sys: &SkewProduct,
    code: &MarkovCode,
    c: &Word,
    a: &Word,
    b: &Word,
    grid_step: f64,
) -> Result<TransversalityCertificate> {
    check_dims(sys)?;
    if !code.is_admissible(c.symbols()) {
        return Err(Error::InvalidInput(format!("base word {c} is not admissible")));
    }
    for w in [a, b] {
        if !code.is_admissible(w.symbols()) || !code.lands(w, c) {
            return Err(Error::WordsNotLanding(w.to_string()));
        }
    }
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!("words {a} and {b} have different lengths")));
    }
    let q = a.len();
    let (cyl, g) = grid_setup(code, c, grid_step)?;
    let k = &sys.constants;
    let h = hessian_bound(k, q);
    let thr = tail_bounds(k, q).1;
    let pyr = Pyramid::explicit(sys, code, &cyl, g, &[a.clone(), b.clone()])?;
    let m = pyr.pair_min(0, 1, h, &mut Scratch::new(sys.u() * sys.d()));
    let correction = 2.0 * h * pyr.rho[pyr.top()] + DEFAULT_TOL;
    Ok(certificate(c, a, b, q, m, correction, thr, grid_step, g, h))
}

/// Per-base-word outcome.
struct BaseResult {
    words: Vec<Word>,
    counts: Vec<u32>,
    certified: u64,
    margin: f64,
}

struct Ctx<'a> {
    sys: &'a SkewProduct,
    code: &'a MarkovCode,
    q: usize,
    thr: f64,
    h: f64,
    /// ⌈J^q⌉: the smallest count that breaks the condition.
    kth: usize,
    opts: &'a TauOptions,
}

impl Ctx<'_> {
    fn run(&self, c: &Word) -> Result<BaseResult> {
        let (cyl, g) = grid_setup(self.code, c, self.opts.grid_step)?;
        if self.sys.u() == 1 && self.sys.d() == 1 {
            let (offsets, rho) = cyl.grid(g);
            let table = ds_table(self.sys, self.code, &cyl, self.q, &offsets, self.opts.word_cap)?;
            Ok(self.run_scalar(rho, table))
        } else {
            let pyr = Pyramid::landing(self.sys, self.code, &cyl, g, self.q, self.opts.word_cap)?;
            Ok(self.run_generic(pyr))
        }
    }

    /// u = d = 1: the minimum over grid pairs is the gap between the value
    /// ranges of the two words whenever the verdict can be positive, so
    /// counting reduces to sorting.
    fn run_scalar(&self, rho: f64, table: DsTable) -> BaseResult {
        let m = table.words.len();
        let corr = 2.0 * self.h * rho + self.opts.tol;
        let t = self.thr + corr;
        let mut lo = Vec::with_capacity(m);
        let mut hi = Vec::with_capacity(m);
        for w in 0..m {
            let block = table.word_block(w);
            lo.push(block.iter().copied().fold(f64::INFINITY, f64::min));
            hi.push(block.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
        let mut slo = lo.clone();
        let mut shi = hi.clone();
        slo.sort_by(f64::total_cmp);
        shi.sort_by(f64::total_cmp);
        let mut counts = Vec::with_capacity(m);
        let mut certified = 0u64;
        for a in 0..m {
            let near = slo.partition_point(|&v| v <= hi[a] + t);
            let below = shi.partition_point(|&v| v < lo[a] - t);
            let n = (near - below) as u32;
            certified += (m as u64) - n as u64;
            counts.push(n);
        }
        let mut margin = f64::INFINITY;
        if self.opts.margin && self.kth <= m {
            let mut bounds = vec![0.0; m];
            for a in 0..m {
                for b in 0..m {
                    let gap = (lo[b] - hi[a]).max(lo[a] - hi[b]).max(0.0);
                    bounds[b] = gap - corr;
                }
                let (_, kth, _) = bounds.select_nth_unstable_by(self.kth - 1, f64::total_cmp);
                margin = margin.min(*kth - self.thr);
            }
        }
        BaseResult { words: table.words, counts, certified, margin }
    }

    fn run_generic(&self, pyr: Pyramid) -> BaseResult {
        let m = pyr.words.len();
        let corr = 2.0 * self.h * pyr.rho[pyr.top()] + self.opts.tol;
        let mut s = Scratch::new(self.sys.u() * self.sys.d());
        let mut counts = vec![1u32; m];
        let mut certified = 0u64;
        let mut bounds: Vec<Vec<f64>> = if self.opts.margin { vec![vec![0.0; m]; m] } else { Vec::new() };
        for a in 0..m {
            for b in a + 1..m {
                let fails = if self.opts.margin {
                    let v = pyr.pair_min(a, b, self.h, &mut s) - corr;
                    bounds[a][b] = v;
                    bounds[b][a] = v;
                    v <= self.thr
                } else {
                    pyr.pair_fails(a, b, self.h, self.opts.tol, self.thr, &mut s)
                };
                if fails {
                    counts[a] += 1;
                    counts[b] += 1;
                } else {
                    certified += 2;
                }
            }
        }
        let mut margin = f64::INFINITY;
        if self.opts.margin && self.kth <= m {
            for (a, row) in bounds.iter_mut().enumerate() {
                row[a] = -corr;
                let (_, kth, _) = row.select_nth_unstable_by(self.kth - 1, f64::total_cmp);
                margin = margin.min(*kth - self.thr);
            }
        }
        BaseResult { words: pyr.words, counts, certified, margin }
    }
}

/// Upper bound for τ(q) evaluated at base-word length p.
pub fn tau_upper(sys: &SkewProduct, code: &MarkovCode, q: usize, p: usize, opts: &TauOptions) -> Result<TauReport> {
    check_dims(sys)?;
    if q == 0 || p == 0 {
        return Err(Error::InvalidInput("q and p must be ≥ 1".into()));
    }
    let bases = code.enumerate_words(p, opts.word_cap)?;
    let max_landing = bases.iter().map(|c| code.count_landing(q, c)).fold(0.0, f64::max);
    if max_landing * max_landing > opts.word_cap as f64 {
        return Err(Error::CombinatorialBlowup {
            what: "word pairs per base word".into(),
            count: max_landing * max_landing,
            cap: opts.word_cap,
        });
    }
    let k = &sys.constants;
    let jq = k.j.powi(q as i32);
    let ctx =
        Ctx { sys, code, q, thr: tail_bounds(k, q).1, h: hessian_bound(k, q), kth: jq.ceil().max(1.0) as usize, opts };
    let results: Vec<BaseResult> = bases.par_iter().map(|c| ctx.run(c)).collect::<Result<_>>()?;

    let total: usize = results.iter().map(|r| r.counts.len()).sum();
    let keep = total <= KEEP_COUNTS;
    let mut kept = Vec::new();
    let mut hist: BTreeMap<u64, u64> = BTreeMap::new();
    let (mut max, mut sum, mut certified, mut pairs) = (0u64, 0u64, 0u64, 0f64);
    let mut worst = (Word(vec![]), Word(vec![]));
    let mut margin = f64::INFINITY;
    for (c, r) in bases.iter().zip(&results) {
        pairs += (r.words.len() * r.words.len()) as f64;
        certified += r.certified;
        margin = margin.min(r.margin);
        for (a, &n) in r.words.iter().zip(&r.counts) {
            let n = n as u64;
            *hist.entry(n).or_default() += 1;
            sum += n;
            if n > max || worst.0.is_empty() {
                worst = (c.clone(), a.clone());
                max = n;
            }
            if keep {
                kept.push(PairCount { c: c.clone(), a: a.clone(), count: n });
            }
        }
    }
    Ok(TauReport {
        q,
        p,
        grid_step: opts.grid_step,
        threshold: ctx.thr,
        lipschitz_used: ctx.h,
        tau_upper: max,
        jq,
        condition_holds: (max as f64) < jq,
        base_words: bases.len() as u64,
        pairs,
        certified_pairs: certified,
        counts: keep.then_some(kept),
        summary: CountSummary {
            max,
            mean: if total > 0 { sum as f64 / total as f64 } else { 0.0 },
            histogram: hist.into_iter().collect(),
            worst_c: worst.0,
            worst_a: worst.1,
        },
        margin: opts.margin.then_some(margin),
    })
}

/// Scans q in order and stops at the first q where τ(q) < J^q is certified.
pub fn check_condition(
    sys: &SkewProduct,
    code: &MarkovCode,
    q_list: &[usize],
    rule: PRule,
    opts: &TauOptions,
) -> Result<ConditionReport> {
    let mut trail = Vec::new();
    for &q in q_list {
        let p = rule.p_for(&sys.constants, q);
        match tau_upper(sys, code, q, p, opts) {
            Ok(r) => {
                let holds = r.condition_holds;
                trail.push(r);
                if holds {
                    return Ok(ConditionReport { trail, first_q: Some(q), exhausted: false, stopped: None });
                }
            }
            Err(e) if e.is_cap() => {
                return Ok(ConditionReport { trail, first_q: None, exhausted: false, stopped: Some(e.to_string()) });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ConditionReport { trail, first_q: None, exhausted: true, stopped: None })
}

/// Certificates for every ordered pair, base word by base word, up to `limit`.
pub fn pair_certificates(
    sys: &SkewProduct,
    code: &MarkovCode,
    q: usize,
    p: usize,
    grid_step: f64,
    limit: usize,
    cap: u64,
) -> Result<Vec<TransversalityCertificate>> {
    check_dims(sys)?;
    let k = &sys.constants;
    let (h, thr) = (hessian_bound(k, q), tail_bounds(k, q).1);
    let mut s = Scratch::new(sys.u() * sys.d());
    let mut out = Vec::new();
    for c in code.enumerate_words(p, cap)? {
        if out.len() >= limit {
            break;
        }
        let (cyl, g) = grid_setup(code, &c, grid_step)?;
        let pyr = Pyramid::landing(sys, code, &cyl, g, q, cap)?;
        let correction = 2.0 * h * pyr.rho[pyr.top()] + DEFAULT_TOL;
        for (ia, a) in pyr.words.iter().enumerate() {
            for (ib, b) in pyr.words.iter().enumerate() {
                if out.len() >= limit {
                    return Ok(out);
                }
                let m = pyr.pair_min(ia, ib, h, &mut s);
                out.push(certificate(&c, a, b, q, m, correction, thr, grid_step, g, h));
            }
        }
    }
    Ok(out)
}
