//! Markov partitions for linear expanding torus maps and the symbolic coding
//! built on them.
//!
//! Words are forward itineraries: a = (a₁,…,aₙ) names the points y with
//! y ∈ R(a₁), E y ∈ R(a₂), …, E^{n−1} y ∈ R(aₙ). The preimage a(x) of a base
//! point x is the y with Eⁿ y = x, so the branch nearest to x is the one
//! through R(aₙ) and the truncation [a]_p keeps the last p symbols.
//! Symbols are 0-based cell indices.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::config::SourceMap;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::system::ExpandingMap;

pub type Rat = Ratio<i128>;

/// Default cap on enumerated words (and on word pairs per base word).
pub const DEFAULT_WORD_CAP: u64 = 10_000_000;

/// Half-open box Π [lo_i, hi_i) ⊂ [0,1)^u with rational corners.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RatBox {
    pub lo: Vec<Rat>,
    pub hi: Vec<Rat>,
}

impl RatBox {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> Rat {
        self.lo.iter().zip(&self.hi).fold(Rat::one(), |v, (l, h)| v * (h - l))
    }

    fn interiors_meet(&self, other: &RatBox) -> bool {
        (0..self.dim()).all(|i| self.lo[i].max(other.lo[i]) < self.hi[i].min(other.hi[i]))
    }

    pub fn lo_f64(&self) -> Vec<f64> {
        self.lo.iter().map(rat_f64).collect()
    }

    pub fn hi_f64(&self) -> Vec<f64> {
        self.hi.iter().map(rat_f64).collect()
    }
}

impl fmt::Display for RatBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.lo.iter().zip(&self.hi).map(|(l, h)| format!("[{l}, {h})")).collect();
        write!(f, "{}", parts.join(" × "))
    }
}

pub(crate) fn rat_f64(r: &Rat) -> f64 {
    r.numer().to_f64().unwrap() / r.denom().to_f64().unwrap()
}

/// A finite admissible word, stored in forward order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Word(pub Vec<u32>);

impl Word {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn symbols(&self) -> &[u32] {
        &self.0
    }

    pub fn first(&self) -> u32 {
        self.0[0]
    }

    pub fn last(&self) -> u32 {
        *self.0.last().expect("words are non-empty")
    }

    /// [a]_p: the p symbols nearest to the base point.
    pub fn truncate(&self, p: usize) -> Word {
        Word(self.0[self.0.len() - p..].to_vec())
    }

    /// The word `deeper · self`, which continues the backward orbit past the
    /// first symbol of `self`.
    pub fn extend(&self, deeper: &Word) -> Word {
        let mut v = deeper.0.clone();
        v.extend_from_slice(&self.0);
        Word(v)
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", s.join("."))
    }
}

impl FromStr for Word {
    type Err = Error;
    fn from_str(s: &str) -> Result<Word> {
        let v: std::result::Result<Vec<u32>, _> =
            s.split(['.', ',']).filter(|t| !t.trim().is_empty()).map(|t| t.trim().parse::<u32>()).collect();
        match v {
            Ok(v) if !v.is_empty() => Ok(Word(v)),
            _ => Err(Error::InvalidInput(format!("cannot parse word '{s}'"))),
        }
    }
}

/// Result of checking a candidate partition.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarkovCheck {
    pub ok: bool,
    pub violations: Vec<String>,
    /// A[i][j] = E(R(j)) ∩ R(i) ≠ ∅ (interiors), when computable.
    pub transition: Option<Vec<Vec<bool>>>,
}

/// A verified Markov partition with its transition structure.
#[derive(Clone, Debug)]
pub struct MarkovCode {
    e: ExpandingMap,
    cells: Vec<RatBox>,
    lo: Vec<Vec<f64>>,
    hi: Vec<Vec<f64>>,
    transition: Vec<Vec<bool>>,
    /// pred[i] = { j : A[i][j] }: the symbols that may precede i.
    pred: Vec<Vec<u32>>,
    coset_reps: Vec<Vec<f64>>,
    grid: Option<Vec<u64>>,
    gamma: f64,
    max_diam: f64,
}

/// Canonical partition for a diagonal E, refined `refine` times by E-preimages
/// (cells of side m_i^{−(refine+1)} along axis i).
pub fn build_partition(e: &ExpandingMap, refine: u32) -> Result<MarkovCode> {
    if !e.is_diagonal() {
        return Err(Error::NonDiagonalUnsupported);
    }
    let u = e.dim();
    let m: Vec<i64> = (0..u).map(|i| e.entries()[i][i]).collect();
    if m.iter().any(|&v| v < 2) {
        return Err(Error::InvalidInput("diagonal entries must be integers ≥ 2".into()));
    }
    let divs: Vec<u64> = m.iter().map(|&v| (v as u64).pow(refine + 1)).collect();
    let total: u64 = divs.iter().product();
    if total > 1_000_000 {
        return Err(Error::CombinatorialBlowup { what: "partition cells".into(), count: total as f64, cap: 1_000_000 });
    }
    let mut cells = Vec::with_capacity(total as usize);
    for idx in 0..total {
        let mut rem = idx;
        let mut lo = vec![Rat::zero(); u];
        let mut hi = vec![Rat::zero(); u];
        for axis in (0..u).rev() {
            let l = rem % divs[axis];
            rem /= divs[axis];
            lo[axis] = Rat::new(l as i128, divs[axis] as i128);
            hi[axis] = Rat::new(l as i128 + 1, divs[axis] as i128);
        }
        cells.push(RatBox { lo, hi });
    }
    let mut code = MarkovCode::from_cells(e, cells)?;
    code.grid = Some(divs);
    Ok(code)
}

/// Checks disjointness, covering and the Markov property by exact box
/// arithmetic.
pub fn verify_markov(cells: &[RatBox], e: &ExpandingMap) -> MarkovCheck {
    let u = e.dim();
    let mut violations = Vec::new();
    for (i, c) in cells.iter().enumerate() {
        if c.dim() != u {
            violations.push(format!("cell {i} has dimension {} (expected {u})", c.dim()));
            continue;
        }
        for a in 0..u {
            if !(Rat::zero() <= c.lo[a] && c.lo[a] < c.hi[a] && c.hi[a] <= Rat::one()) {
                violations.push(format!("cell {i} is empty or leaves [0,1) along axis {a}: {c}"));
            }
        }
    }
    if !violations.is_empty() || cells.is_empty() {
        if cells.is_empty() {
            violations.push("no cells".into());
        }
        return MarkovCheck { ok: false, violations, transition: None };
    }
    for i in 0..cells.len() {
        for j in i + 1..cells.len() {
            if cells[i].interiors_meet(&cells[j]) {
                violations.push(format!("cells {i} and {j} overlap"));
                return MarkovCheck { ok: false, violations, transition: None };
            }
        }
    }
    let vol: Rat = cells.iter().map(|c| c.volume()).fold(Rat::zero(), |a, b| a + b);
    if vol != Rat::one() {
        violations.push(format!("cells do not cover the torus (total volume {vol})"));
        return MarkovCheck { ok: false, violations, transition: None };
    }

    let r = cells.len();
    let mut a = vec![vec![false; r]; r];
    if e.is_monomial() {
        for j in 0..r {
            let arcs = monomial_image_arcs(e, &cells[j]);
            for i in 0..r {
                let (meets, contained) = arcs_vs_box(&arcs, &cells[i]);
                a[i][j] = meets;
                if meets && !contained {
                    violations.push(format!("image of cell {j} cuts cell {i} without containing it"));
                }
            }
        }
    } else {
        let n = Rat::from_integer(e.degree() as i128);
        for j in 0..r {
            if cells[j].volume() * n == Rat::one() && injective_on_box(e, &cells[j]) {
                for row in a.iter_mut() {
                    row[j] = true;
                }
            } else {
                violations.push(format!(
                    "cell {j}: image is not the whole torus; only full-branch cells are supported for non-monomial E"
                ));
            }
        }
    }
    MarkovCheck { ok: violations.is_empty(), violations, transition: Some(a) }
}

/// Per-axis image arcs (start mod 1, length) of a box under a monomial E.
fn monomial_image_arcs(e: &ExpandingMap, b: &RatBox) -> Vec<(Rat, Rat)> {
    let u = e.dim();
    (0..u)
        .map(|i| {
            let (j, m) = e.entries()[i].iter().enumerate().find(|(_, &v)| v != 0).map(|(j, &v)| (j, v)).unwrap();
            let m = Rat::from_integer(m as i128);
            let (p, q) = (m * b.lo[j], m * b.hi[j]);
            let (start, end) = if p <= q { (p, q) } else { (q, p) };
            let len = end - start;
            let start = start - start.floor();
            (start, len)
        })
        .collect()
}

/// (interiors meet, closure of box inside the closed image) for a product of arcs.
fn arcs_vs_box(arcs: &[(Rat, Rat)], b: &RatBox) -> (bool, bool) {
    let one = Rat::one();
    let mut meets = true;
    let mut contained = true;
    for (axis, (start, len)) in arcs.iter().enumerate() {
        let (lo, hi) = (b.lo[axis], b.hi[axis]);
        if *len >= one {
            continue;
        }
        let pieces = [(*start, start + len), (start - one, start + len - one)];
        let m = pieces.iter().any(|(a, z)| lo < *z && hi > *a);
        let c = pieces.iter().any(|(a, z)| lo >= *a && hi <= *z);
        meets &= m;
        contained &= c;
    }
    (meets, contained)
}

/// No two distinct points of the box differ by an element of E⁻¹Z^u.
fn injective_on_box(e: &ExpandingMap, b: &RatBox) -> bool {
    let u = e.dim();
    let det = e.det() as i128;
    let adj = adjugate(e.entries());
    let w: Vec<Rat> = (0..u).map(|i| b.hi[i] - b.lo[i]).collect();
    // v = E⁻¹k lies in (−w, w) only if k = E v lies in the box of radius Σ_j |E_ij| w_j.
    let bound: Vec<i128> = (0..u)
        .map(|i| {
            let s: Rat = (0..u)
                .map(|j| Rat::from_integer(e.entries()[i][j].abs() as i128) * w[j])
                .fold(Rat::zero(), |a, b| a + b);
            s.ceil().to_integer()
        })
        .collect();
    let mut k = bound.iter().map(|b| -b).collect::<Vec<_>>();
    loop {
        if k.iter().any(|&v| v != 0) {
            let inside = (0..u).all(|i| {
                let num: i128 = (0..u).map(|j| adj[i][j] * k[j]).sum();
                Rat::new(num, det).abs() < w[i]
            });
            if inside {
                return false;
            }
        }
        let mut axis = 0;
        loop {
            if axis == u {
                return true;
            }
            k[axis] += 1;
            if k[axis] <= bound[axis] {
                break;
            }
            k[axis] = -bound[axis];
            axis += 1;
        }
    }
}

fn adjugate(m: &[Vec<i64>]) -> Vec<Vec<i128>> {
    let n = m.len();
    if n == 1 {
        return vec![vec![1]];
    }
    let mut adj = vec![vec![0i128; n]; n];
    for i in 0..n {
        for j in 0..n {
            let minor: Vec<Vec<i64>> =
                (0..n).filter(|&r| r != j).map(|r| (0..n).filter(|&c| c != i).map(|c| m[r][c]).collect()).collect();
            let sign = if (i + j) % 2 == 0 { 1 } else { -1 };
            adj[i][j] = sign * crate::system::integer_det(&minor) as i128;
        }
    }
    adj
}

/// Integer vectors k with E⁻¹k ∈ [0,1)^u: one per inverse branch.
fn coset_representatives(e: &ExpandingMap) -> Vec<Vec<i64>> {
    let u = e.dim();
    let det = e.det() as i128;
    let adj = adjugate(e.entries());
    let bound: Vec<i64> = (0..u).map(|i| e.entries()[i].iter().map(|v| v.abs()).sum()).collect();
    let mut reps = Vec::new();
    let mut k: Vec<i64> = bound.iter().map(|b| -b).collect();
    'outer: loop {
        let ok = (0..u).all(|i| {
            let num: i128 = (0..u).map(|j| adj[i][j] * k[j] as i128).sum();
            let v = Rat::new(num, det);
            v >= Rat::zero() && v < Rat::one()
        });
        if ok {
            reps.push(k.clone());
        }
        let mut axis = 0;
        loop {
            if axis == u {
                break 'outer;
            }
            k[axis] += 1;
            if k[axis] <= bound[axis] {
                break;
            }
            k[axis] = -bound[axis];
            axis += 1;
        }
    }
    reps
}

impl MarkovCode {
    /// Verifies a user-supplied cell list and builds the code.
    pub fn from_cells(e: &ExpandingMap, cells: Vec<RatBox>) -> Result<MarkovCode> {
        let check = verify_markov(&cells, e);
        if !check.ok {
            return Err(Error::NotMarkov(check.violations.join("; ")));
        }
        let transition = check.transition.expect("verified partitions carry transitions");
        let r = cells.len();
        let pred: Vec<Vec<u32>> =
            (0..r).map(|i| (0..r).filter(|&j| transition[i][j]).map(|j| j as u32).collect()).collect();
        let n = e.degree() as usize;
        if let Some(i) = pred.iter().position(|p| p.len() != n) {
            return Err(Error::NotMarkov(format!("cell {i} has {} predecessors, expected {n}", pred[i].len())));
        }
        let coset_reps: Vec<Vec<f64>> =
            coset_representatives(e).into_iter().map(|k| k.into_iter().map(|v| v as f64).collect()).collect();
        debug_assert_eq!(coset_reps.len(), n);
        let lo: Vec<Vec<f64>> = cells.iter().map(|c| c.lo_f64()).collect();
        let hi: Vec<Vec<f64>> = cells.iter().map(|c| c.hi_f64()).collect();
        let max_diam = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| l.iter().zip(h).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        Ok(MarkovCode {
            e: e.clone(),
            cells,
            lo,
            hi,
            transition,
            pred,
            coset_reps,
            grid: None,
            gamma: 0.5 * e.mu_lower(),
            max_diam,
        })
    }

    pub fn expanding_map(&self) -> &ExpandingMap {
        &self.e
    }

    /// Integer vectors k_r with E⁻¹(w + k_r) running over all preimages of w.
    pub fn coset_reps(&self) -> &[Vec<f64>] {
        &self.coset_reps
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[RatBox] {
        &self.cells
    }

    pub fn cell_bounds(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.lo[i], &self.hi[i])
    }

    pub fn transition(&self) -> &[Vec<bool>] {
        &self.transition
    }

    pub fn predecessors(&self, i: u32) -> &[u32] {
        &self.pred[i as usize]
    }

    /// Inverse-branch radius γ = μ̲/2.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn max_diameter(&self) -> f64 {
        self.max_diam
    }

    /// diam R(i) < γ for every cell.
    pub fn diameters_ok(&self) -> bool {
        self.max_diam < self.gamma
    }

    pub fn degree(&self) -> usize {
        self.coset_reps.len()
    }

    pub fn dim(&self) -> usize {
        self.e.dim()
    }

    pub fn is_full_shift(&self) -> bool {
        self.transition.iter().all(|r| r.iter().all(|&v| v))
    }

    /// Transition matrix of the backward symbolic chain: P_ij = 1/N when R(i) ⊂ E(R(j)).
    pub fn backward_chain(&self) -> Vec<Vec<f64>> {
        let n = self.degree() as f64;
        self.transition.iter().map(|row| row.iter().map(|&t| if t { 1.0 / n } else { 0.0 }).collect()).collect()
    }

    pub fn is_admissible(&self, w: &[u32]) -> bool {
        !w.is_empty()
            && w.iter().all(|&s| (s as usize) < self.cells.len())
            && w.windows(2).all(|p| self.transition[p[1] as usize][p[0] as usize])
    }

    fn check_word(&self, w: &Word) -> Result<()> {
        if self.is_admissible(&w.0) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("word {w} is not admissible")))
        }
    }

    /// True when `a` lands on `c`, i.e. a ∈ I^q(c).
    pub fn lands(&self, a: &Word, c: &Word) -> bool {
        self.transition[c.first() as usize][a.last() as usize]
    }

    fn contains_half_open(&self, i: usize, x: &[f64]) -> bool {
        x.iter().zip(&self.lo[i]).zip(&self.hi[i]).all(|((v, l), h)| *l <= *v && *v < *h)
    }

    /// Distance (sup norm) from x to the closed box of cell i.
    pub(crate) fn outside_distance(&self, i: usize, x: &[f64]) -> f64 {
        x.iter().zip(&self.lo[i]).zip(&self.hi[i]).map(|((v, l), h)| (l - v).max(v - h).max(0.0)).fold(0.0, f64::max)
    }

    /// π(x): the half-open cell containing x, falling back to the lowest id
    /// whose closure contains it.
    pub fn assign_symbol(&self, x: &[f64]) -> u32 {
        if let Some(divs) = &self.grid {
            let mut idx = 0u64;
            for (v, &g) in x.iter().zip(divs) {
                let l = ((v.rem_euclid(1.0)) * g as f64).floor().clamp(0.0, (g - 1) as f64) as u64;
                idx = idx * g + l;
            }
            return idx as u32;
        }
        if let Some(i) = (0..self.cells.len()).find(|&i| self.contains_half_open(i, x)) {
            return i as u32;
        }
        (0..self.cells.len())
            .min_by(|&i, &j| self.outside_distance(i, x).total_cmp(&self.outside_distance(j, x)))
            .unwrap() as u32
    }

    /// All N preimages of x, reduced to [0,1)^u.
    pub fn preimages(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.coset_reps
            .iter()
            .map(|k| {
                let shifted: Vec<f64> = x.iter().zip(k).map(|(a, b)| a + b).collect();
                self.e.inverse().mul_vec(&shifted).into_iter().map(|v| v.rem_euclid(1.0)).collect()
            })
            .collect()
    }

    /// The preimage of w lying in (the closure of) cell j.
    pub fn branch(&self, j: u32, w: &[f64]) -> Option<Vec<f64>> {
        let j = j as usize;
        let mut best: Option<(f64, Vec<f64>)> = None;
        for z in self.preimages(w) {
            if self.contains_half_open(j, &z) {
                return Some(z);
            }
            let dist = self.outside_distance(j, &z);
            // Near the right edge a point may have wrapped to 0.
            let wrapped: Vec<f64> = z
                .iter()
                .zip(&self.hi[j])
                .map(|(&v, &h)| if v < 1e-9 && h >= 1.0 - 1e-12 { v + 1.0 } else { v })
                .collect();
            let dist_w = self.outside_distance(j, &wrapped);
            let (dist, z) = if dist_w < dist { (dist_w, wrapped) } else { (dist, z) };
            if best.as_ref().is_none_or(|(b, _)| dist < *b) {
                best = Some((dist, z));
            }
        }
        best.filter(|(d, _)| *d <= 1e-9).map(|(_, z)| z)
    }

    /// D(a): the cells i with A[i][aₙ].
    pub fn domain(&self, a: &Word) -> Vec<u32> {
        let last = a.last() as usize;
        (0..self.cells.len()).filter(|&i| self.transition[i][last]).map(|i| i as u32).collect()
    }

    pub fn in_domain(&self, a: &Word, x: &[f64]) -> bool {
        self.transition[self.assign_symbol(x) as usize][a.last() as usize]
    }

    /// The backward branch chain ([a]_1(x), …, [a]_n(x)), nearest first.
    pub fn branch_chain(&self, a: &Word, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_word(a)?;
        if !self.in_domain(a, x) {
            return Err(Error::WordNotAdmissibleAtPoint);
        }
        let mut chain = Vec::with_capacity(a.len());
        let mut w = x.to_vec();
        for &s in a.0.iter().rev() {
            w = self.branch(s, &w).ok_or(Error::WordNotAdmissibleAtPoint)?;
            chain.push(w.clone());
        }
        Ok(chain)
    }

    /// a(x): the point of R(a) with Eⁿ a(x) = x.
    pub fn preimage_point(&self, a: &Word, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.branch_chain(a, x)?.pop().expect("non-empty word"))
    }

    /// Number of admissible words of length q ending in each symbol.
    fn ending_counts(&self, q: usize) -> Vec<f64> {
        let r = self.cells.len();
        let mut ways = vec![1.0f64; r];
        for _ in 1..q {
            ways = (0..r).map(|s| self.pred[s].iter().map(|&j| ways[j as usize]).sum()).collect();
        }
        ways
    }

    /// #I^q.
    pub fn count_words(&self, q: usize) -> f64 {
        if q == 0 {
            return 0.0;
        }
        self.ending_counts(q).iter().sum()
    }

    /// #I^q(c).
    pub fn count_landing(&self, q: usize, c: &Word) -> f64 {
        if q == 0 {
            return 0.0;
        }
        let ways = self.ending_counts(q);
        self.pred[c.first() as usize].iter().map(|&j| ways[j as usize]).sum()
    }

    /// I^q, depth-first.
    pub fn enumerate_words(&self, q: usize, cap: u64) -> Result<Vec<Word>> {
        if q == 0 {
            return Err(Error::InvalidInput("word length must be ≥ 1".into()));
        }
        let count = self.count_words(q);
        check_cap("words", count, cap)?;
        let mut out = Vec::with_capacity(count as usize);
        for s in 0..self.cells.len() as u32 {
            self.dfs_backward(s, q, &mut Vec::with_capacity(q), &mut out);
        }
        Ok(out)
    }

    /// I^q(c), depth-first.
    pub fn enumerate_landing(&self, q: usize, c: &Word, cap: u64) -> Result<Vec<Word>> {
        if q == 0 {
            return Err(Error::InvalidInput("word length must be ≥ 1".into()));
        }
        self.check_word(c)?;
        let count = self.count_landing(q, c);
        check_cap("landing words", count, cap)?;
        let mut out = Vec::with_capacity(count as usize);
        for &s in &self.pred[c.first() as usize] {
            self.dfs_backward(s, q, &mut Vec::with_capacity(q), &mut out);
        }
        Ok(out)
    }

    fn dfs_backward(&self, s: u32, q: usize, stack: &mut Vec<u32>, out: &mut Vec<Word>) {
        stack.push(s);
        if stack.len() == q {
            out.push(Word(stack.iter().rev().copied().collect()));
        } else {
            for &p in &self.pred[s as usize] {
                self.dfs_backward(p, q, stack, out);
            }
        }
        stack.pop();
    }

    /// Geometry of the cylinder R(c).
    pub fn cylinder(&self, c: &Word) -> Result<Cylinder> {
        self.check_word(c)?;
        let p = c.len();
        let last = c.last() as usize;
        let base_lo = self.lo[last].clone();
        let base_hi = self.hi[last].clone();
        let centre: Vec<f64> = base_lo.iter().zip(&base_hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let mut z = centre.clone();
        for &s in c.0[..p - 1].iter().rev() {
            z = self.branch(s, &z).ok_or_else(|| Error::InvalidInput(format!("cylinder {c} is empty")))?;
        }
        let einv = self.e.inverse();
        Ok(Cylinder {
            word: c.clone(),
            base_lo,
            base_hi,
            base_centre: centre,
            centre: z,
            linear: einv.pow((p - 1) as u32),
        })
    }
}

fn check_cap(what: &str, count: f64, cap: u64) -> Result<()> {
    if count > cap as f64 {
        Err(Error::CombinatorialBlowup { what: what.into(), count, cap })
    } else {
        Ok(())
    }
}

/// R(c) as the affine image of the base cell R(c_p):
/// x = centre + E^{−(p−1)}(w − base_centre) for w in the closed base box.
#[derive(Clone, Debug)]
pub struct Cylinder {
    pub word: Word,
    pub base_lo: Vec<f64>,
    pub base_hi: Vec<f64>,
    pub base_centre: Vec<f64>,
    pub centre: Vec<f64>,
    pub linear: Mat,
}

impl Cylinder {
    /// Point of the closed cylinder with base-box coordinates s ∈ [0,1]^u.
    pub fn point(&self, s: &[f64]) -> Vec<f64> {
        let off: Vec<f64> = (0..s.len())
            .map(|i| self.base_lo[i] + s[i] * (self.base_hi[i] - self.base_lo[i]) - self.base_centre[i])
            .collect();
        let mut x = self.centre.clone();
        self.linear.mul_vec_add(&off, &mut x);
        x
    }

    /// Offsets x − centre of the cell centres of a G^u grid, and the common
    /// circumradius of the grid cells.
    pub fn grid(&self, g: usize) -> (Vec<Vec<f64>>, f64) {
        let u = self.base_lo.len();
        let mut offsets = Vec::with_capacity(g.pow(u as u32));
        let mut idx = vec![0usize; u];
        loop {
            let s: Vec<f64> = idx.iter().map(|&i| (i as f64 + 0.5) / g as f64).collect();
            let p = self.point(&s);
            offsets.push(p.iter().zip(&self.centre).map(|(a, b)| a - b).collect());
            let mut axis = 0;
            loop {
                if axis == u {
                    return (offsets, self.cell_radius(g));
                }
                idx[axis] += 1;
                if idx[axis] < g {
                    break;
                }
                idx[axis] = 0;
                axis += 1;
            }
        }
    }

    /// Circumradius of one cell of the G^u grid, in torus coordinates.
    pub fn cell_radius(&self, g: usize) -> f64 {
        let u = self.base_lo.len();
        let half: Vec<f64> = (0..u).map(|i| 0.5 * (self.base_hi[i] - self.base_lo[i]) / g as f64).collect();
        let mut best = 0.0f64;
        for signs in 0..(1usize << u) {
            let v: Vec<f64> = (0..u).map(|i| if signs >> i & 1 == 1 { half[i] } else { -half[i] }).collect();
            let w = self.linear.mul_vec(&v);
            best = best.max(w.iter().map(|a| a * a).sum::<f64>().sqrt());
        }
        best
    }

    /// Smallest power-of-two G with cell side 2ρ/√u ≤ step.
    pub fn grid_for_step(&self, step: f64) -> usize {
        let u = self.base_lo.len() as f64;
        let mut g = 1usize;
        while 2.0 * self.cell_radius(g) / u.sqrt() > step && g < (1 << 20) {
            g *= 2;
        }
        g
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPartition {
    cell: Vec<Spanned<RawCell>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCell {
    lo: Vec<RawRat>,
    hi: Vec<RawRat>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawRat {
    Int(i64),
    Text(String),
}

impl RawRat {
    fn to_rat(&self) -> Option<Rat> {
        match self {
            RawRat::Int(v) => Some(Rat::from_integer(*v as i128)),
            RawRat::Text(s) => Rat::from_str(s.trim()).ok(),
        }
    }
}

/// Partition file: `[[cell]]` tables with `lo`/`hi` arrays of rationals
/// written as integers or strings like `"1/3"`.
pub fn parse_partition(text: &str, source_name: &str, e: &ExpandingMap) -> Result<MarkovCode> {
    let src = SourceMap { name: source_name, text };
    let raw: RawPartition = toml::from_str(text).map_err(|err| src.parse_error(err))?;
    let mut cells = Vec::with_capacity(raw.cell.len());
    for c in &raw.cell {
        let span = c.span();
        let c = c.get_ref();
        if c.lo.len() != e.dim() || c.hi.len() != e.dim() {
            return Err(src.error(span, format!("cell corners must have {} entries", e.dim())));
        }
        let conv = |v: &[RawRat]| -> Result<Vec<Rat>> {
            v.iter().map(|r| r.to_rat().ok_or_else(|| src.error(span.clone(), "cannot parse rational"))).collect()
        };
        cells.push(RatBox { lo: conv(&c.lo)?, hi: conv(&c.hi)? });
    }
    MarkovCode::from_cells(e, cells).map_err(|err| src.error(0..0, err.to_string()))
}

pub fn load_partition(path: &Path, e: &ExpandingMap) -> Result<MarkovCode> {
    let text = std::fs::read_to_string(path)
        .map_err(|err| Error::InvalidInput(format!("cannot read {}: {err}", path.display())))?;
    parse_partition(&text, &path.display().to_string(), e)
}
