//! Sampling the SRB measure, binned densities, the r-scale semi-norms and
//! the Main Inequality diagnostics.
//!
//! The SRB measure is the push-forward of Lebesgue × (uniform backward
//! symbolic chain) under h(x, a) = (x, S(x, a)). Every symbol has exactly N
//! admissible predecessors, so the uniform chain is the same thing as a
//! uniformly chosen inverse branch at every step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{ball_intersection_volume_unchecked, Mat};
use crate::markov::MarkovCode;
use crate::system::{Constants, SkewProduct};

/// Points per RNG substream; fixed so results do not depend on thread count.
const SHARD: usize = 1 << 16;

/// Columns with fewer samples are left out of semi-norm averages.
pub const MIN_COLUMN_SAMPLES: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Method {
    Symbolic,
    Orbit,
    Fiber,
    Synthetic,
}

/// Points (x, y) ∈ 𝕋^u × ℝ^d stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleCloud {
    pub u: usize,
    pub d: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub depth: usize,
    pub seed: u64,
    pub method: Method,
    /// Bound on the distance of each y from its infinite-word value.
    pub tail_radius: f64,
}

impl SampleCloud {
    pub fn new(u: usize, d: usize, x: Vec<f64>, y: Vec<f64>, method: Method) -> Result<SampleCloud> {
        if u == 0 || d == 0 || x.len() % u != 0 || y.len() % d != 0 || x.len() / u != y.len() / d {
            return Err(Error::Dimension(format!(
                "cloud arrays of length {} and {} do not fit u = {u}, d = {d}",
                x.len(),
                y.len()
            )));
        }
        Ok(SampleCloud { u, d, x, y, depth: 0, seed: 0, method, tail_radius: 0.0 })
    }

    pub fn len(&self) -> usize {
        self.x.len() / self.u
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn base(&self, i: usize) -> &[f64] {
        &self.x[i * self.u..(i + 1) * self.u]
    }

    pub fn fiber(&self, i: usize) -> &[f64] {
        &self.y[i * self.d..(i + 1) * self.d]
    }

    /// T applied to every point.
    pub fn push_forward(&self, sys: &SkewProduct) -> SampleCloud {
        let mut x = Vec::with_capacity(self.x.len());
        let mut y = Vec::with_capacity(self.y.len());
        for i in 0..self.len() {
            let (a, b) = sys.apply(self.base(i), self.fiber(i));
            x.extend(a);
            y.extend(b);
        }
        SampleCloud { x, y, depth: self.depth + 1, ..self.clone() }
    }
}

/// Allocation-free inverse branches z = E⁻¹(w + k_r) mod 1.
struct Branches {
    u: usize,
    einv: Vec<f64>,
    reps: Vec<Vec<f64>>,
}

impl Branches {
    fn new(code: &MarkovCode) -> Branches {
        let e = code.expanding_map();
        Branches { u: e.dim(), einv: e.inverse().as_slice().to_vec(), reps: code.coset_reps().to_vec() }
    }

    fn n(&self) -> usize {
        self.reps.len()
    }

    fn apply(&self, r: usize, w: &[f64], out: &mut [f64]) {
        let k = &self.reps[r];
        for i in 0..self.u {
            let mut s = 0.0;
            for j in 0..self.u {
                s += self.einv[i * self.u + j] * (w[j] + k[j]);
            }
            out[i] = s.rem_euclid(1.0);
        }
    }
}

/// n = ⌈ln(tol)/ln λ̄⌉: depth at which the tail weight λ̄ⁿ drops below tol.
pub fn default_depth(k: &Constants, tol: f64) -> usize {
    if k.lambda_upper <= 0.0 {
        return 1;
    }
    ((tol.ln() / k.lambda_upper.ln()).ceil() as usize).max(1)
}

fn tail_radius(k: &Constants, n: usize) -> f64 {
    k.lambda_upper.powi(n as i32) * k.sup_norm / (1.0 - k.lambda_upper)
}

/// Source of inverse-branch indices: base-N digits of a stratified
/// t ∈ [0,1) while they carry precision, then fresh draws.
struct Digits {
    t: f64,
    left: usize,
    n: usize,
}

impl Digits {
    fn new(t: Option<f64>, n: usize) -> Digits {
        let left = match t {
            Some(_) => (48.0 / (n as f64).log2()).floor() as usize,
            None => 0,
        };
        Digits { t: t.unwrap_or(0.0), left, n }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.left > 0 {
            self.left -= 1;
            self.t *= self.n as f64;
            let r = (self.t.floor() as usize).min(self.n - 1);
            self.t -= r as f64;
            r
        } else {
            rng.gen_range(0..self.n)
        }
    }
}

/// Accumulates y = Σ C^{i−1} f(z_i) along a random backward chain from x.
fn backward_value(
    sys: &SkewProduct,
    br: &Branches,
    x: &[f64],
    depth: usize,
    digits: &mut Digits,
    rng: &mut ChaCha8Rng,
    y: &mut [f64],
) {
    let (u, d) = (sys.u(), sys.d());
    let mut w = x.to_vec();
    let mut z = vec![0.0; u];
    let mut cpow = Mat::identity(d);
    let mut fz = vec![0.0; d];
    y.iter_mut().for_each(|v| *v = 0.0);
    let scalar = d == 1;
    let lambda = sys.c.matrix()[(0, 0)];
    let mut weight = 1.0;
    for _ in 0..depth {
        br.apply(digits.next(rng), &w, &mut z);
        fz.iter_mut().for_each(|v| *v = 0.0);
        sys.f.eval_add(&z, 1.0, &mut fz);
        if scalar {
            y[0] += weight * fz[0];
            weight *= lambda;
        } else {
            cpow.mul_vec_add(&fz, y);
            cpow = &cpow * sys.c.matrix();
        }
        std::mem::swap(&mut w, &mut z);
    }
}

/// Options for [`symbolic_sample`].
#[derive(Clone, Debug)]
pub struct SymbolicOptions {
    /// Jittered stratification: the base is split into `columns`^u cells and
    /// the symbol sequence of each point is read from a stratified t ∈ [0,1)
    /// within its cell. `None` gives plain Monte Carlo.
    pub columns: Option<usize>,
}

impl Default for SymbolicOptions {
    fn default() -> Self {
        SymbolicOptions { columns: None }
    }
}

/// x uniform on 𝕋^u, a backward word from the uniform chain, y = S(x, a).
pub fn symbolic_sample(
    sys: &SkewProduct,
    code: &MarkovCode,
    depth: usize,
    count: usize,
    seed: u64,
    opts: &SymbolicOptions,
) -> Result<SampleCloud> {
    if depth == 0 {
        return Err(Error::InvalidInput("sampling depth must be ≥ 1".into()));
    }
    let (u, d) = (sys.u(), sys.d());
    let br = Branches::new(code);
    let cells = opts.columns.map(|m| m.max(1).pow(u as u32));
    let strata = cells.map(|c| count.div_ceil(c));
    let shards: Vec<(Vec<f64>, Vec<f64>)> = (0..count.div_ceil(SHARD))
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let lo = s * SHARD;
            let hi = ((s + 1) * SHARD).min(count);
            let mut xs = Vec::with_capacity((hi - lo) * u);
            let mut ys = vec![0.0; (hi - lo) * d];
            let mut x = vec![0.0; u];
            for (k, i) in (lo..hi).enumerate() {
                let t = match (opts.columns, cells, strata) {
                    (Some(m), Some(c), Some(st)) => {
                        let mut cell = i % c;
                        for xa in x.iter_mut() {
                            *xa = ((cell % m) as f64 + rng.gen::<f64>()) / m as f64;
                            cell /= m;
                        }
                        Some(((i / c) as f64 + rng.gen::<f64>()) / st as f64)
                    }
                    _ => {
                        x.iter_mut().for_each(|v| *v = rng.gen());
                        None
                    }
                };
                let mut digits = Digits::new(t, br.n());
                backward_value(sys, &br, &x, depth, &mut digits, &mut rng, &mut ys[k * d..(k + 1) * d]);
                xs.extend_from_slice(&x);
            }
            (xs, ys)
        })
        .collect();
    let mut cloud = concat(u, d, shards, Method::Symbolic);
    cloud.depth = depth;
    cloud.seed = seed;
    cloud.tail_radius = tail_radius(&sys.constants, depth);
    Ok(cloud)
}

/// `per_column` fiber samples over each of the `columns`^u column centres.
pub fn fiber_sample(
    sys: &SkewProduct,
    code: &MarkovCode,
    depth: usize,
    columns: usize,
    per_column: usize,
    seed: u64,
) -> Result<SampleCloud> {
    if depth == 0 || columns == 0 || per_column == 0 {
        return Err(Error::InvalidInput("depth, columns and per_column must be ≥ 1".into()));
    }
    let (u, d) = (sys.u(), sys.d());
    let br = Branches::new(code);
    let ncol = columns.pow(u as u32);
    let shards: Vec<(Vec<f64>, Vec<f64>)> = (0..ncol)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let mut x = vec![0.0; u];
            let mut cell = c;
            for xa in x.iter_mut() {
                *xa = ((cell % columns) as f64 + 0.5) / columns as f64;
                cell /= columns;
            }
            let mut xs = Vec::with_capacity(per_column * u);
            let mut ys = vec![0.0; per_column * d];
            for k in 0..per_column {
                // Stratify the symbolic coordinate within the column.
                let t = (k as f64 + rng.gen::<f64>()) / per_column as f64;
                let mut digits = Digits::new(Some(t), br.n());
                backward_value(sys, &br, &x, depth, &mut digits, &mut rng, &mut ys[k * d..(k + 1) * d]);
                xs.extend_from_slice(&x);
            }
            (xs, ys)
        })
        .collect();
    let mut cloud = concat(u, d, shards, Method::Fiber);
    cloud.depth = depth;
    cloud.seed = seed;
    cloud.tail_radius = tail_radius(&sys.constants, depth);
    Ok(cloud)
}

fn concat(u: usize, d: usize, shards: Vec<(Vec<f64>, Vec<f64>)>, method: Method) -> SampleCloud {
    let n: usize = shards.iter().map(|s| s.0.len()).sum();
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n / u * d);
    for (a, b) in shards {
        x.extend(a);
        y.extend(b);
    }
    SampleCloud { u, d, x, y, depth: 0, seed: 0, method, tail_radius: 0.0 }
}

/// Forward orbits of T from random starts in 𝕋^u × [−K, K]^d.
///
/// The base coordinate is kept in 64-bit fixed point; each step appends a
/// fresh uniform digit below the last bit, X' = E X + ⌊E δ⌋ mod 2^64, which
/// is exact in distribution for a Lebesgue-random start.
pub fn orbit_sample(sys: &SkewProduct, burn_in: usize, count: usize, chains: usize, seed: u64) -> Result<SampleCloud> {
    if burn_in == 0 || chains == 0 {
        return Err(Error::InvalidInput("burn-in and chain count must be ≥ 1".into()));
    }
    let (u, d) = (sys.u(), sys.d());
    let e: Vec<i64> = sys.e.entries().iter().flatten().copied().collect();
    let ef: Vec<f64> = e.iter().map(|&v| v as f64).collect();
    let k = sys.constants.k;
    let scale = 2f64.powi(-64);
    let per_chain = count.div_ceil(chains);
    let shards: Vec<(Vec<f64>, Vec<f64>)> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let mut big: Vec<u64> = (0..u).map(|_| rng.gen()).collect();
            let mut y: Vec<f64> = (0..d).map(|_| rng.gen_range(-k..=k)).collect();
            let take = per_chain.min(count.saturating_sub(c * per_chain));
            let mut xs = Vec::with_capacity(take * u);
            let mut ys = Vec::with_capacity(take * d);
            let mut x = vec![0.0; u];
            let mut delta = vec![0.0; u];
            let mut next = vec![0u64; u];
            for step in 0..burn_in + take {
                for i in 0..u {
                    x[i] = big[i] as f64 * scale;
                }
                let mut y1 = sys.c.matrix().mul_vec(&y);
                sys.f.eval_add(&x, 1.0, &mut y1);
                y = y1;
                delta.iter_mut().for_each(|v| *v = rng.gen());
                for i in 0..u {
                    let mut acc = 0u64;
                    let mut carry = 0.0;
                    for j in 0..u {
                        acc = acc.wrapping_add(big[j].wrapping_mul(e[i * u + j] as u64));
                        carry += ef[i * u + j] * delta[j];
                    }
                    next[i] = acc.wrapping_add(carry.floor() as i64 as u64);
                }
                big.copy_from_slice(&next);
                if step >= burn_in {
                    xs.extend(big.iter().map(|&b| b as f64 * scale));
                    ys.extend_from_slice(&y);
                }
            }
            (xs, ys)
        })
        .collect();
    let mut cloud = concat(u, d, shards, Method::Orbit);
    cloud.depth = burn_in;
    cloud.seed = seed;
    cloud.tail_radius = sys.constants.lambda_upper.powi(burn_in as i32) * 2.0 * k;
    Ok(cloud)
}

/// Kolmogorov–Smirnov distance of a sample to the uniform law on [0,1).
pub fn ks_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().map(|(i, &x)| (x - i as f64 / n).max((i + 1) as f64 / n - x)).fold(0.0, f64::max)
}

/// Counts on a product grid over 𝕋^u × [−K, K]^d.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub u: usize,
    pub d: usize,
    pub torus_bins: usize,
    pub fiber_bins: usize,
    pub half_width: f64,
    pub counts: Vec<u64>,
    pub total: u64,
    pub out_of_range: u64,
}

impl Histogram {
    pub fn bin_volume(&self) -> f64 {
        (self.torus_bins as f64).powi(-(self.u as i32))
            * (2.0 * self.half_width / self.fiber_bins as f64).powi(self.d as i32)
    }

    /// Probability of each bin.
    pub fn masses(&self) -> Vec<f64> {
        let t = self.total.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }

    /// Bin centres (base coordinates, then fiber coordinates) with densities.
    pub fn density_rows(&self) -> Vec<(Vec<f64>, f64)> {
        let vol = self.bin_volume();
        let t = self.total.max(1) as f64;
        let dims: Vec<(usize, f64, f64)> = (0..self.u)
            .map(|_| (self.torus_bins, 0.0, 1.0))
            .chain((0..self.d).map(|_| (self.fiber_bins, -self.half_width, self.half_width)))
            .collect();
        self.counts
            .iter()
            .enumerate()
            .map(|(idx, &c)| {
                let mut rem = idx;
                let mut centre = vec![0.0; dims.len()];
                for (a, &(bins, lo, hi)) in dims.iter().enumerate().rev() {
                    let b = rem % bins;
                    rem /= bins;
                    centre[a] = lo + (b as f64 + 0.5) * (hi - lo) / bins as f64;
                }
                (centre, c as f64 / (t * vol))
            })
            .collect()
    }

    /// CSV dump: one row per bin with its centre and density.
    pub fn density_csv(&self) -> String {
        let mut out = String::new();
        let names: Vec<String> =
            (0..self.u).map(|i| format!("x{i}")).chain((0..self.d).map(|i| format!("y{i}"))).collect();
        out.push_str(&names.join(","));
        out.push_str(",density\n");
        for (c, v) in self.density_rows() {
            let cells: Vec<String> = c.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push_str(&format!(",{v}\n"));
        }
        out
    }
}

pub fn histogram(cloud: &SampleCloud, torus_bins: usize, fiber_bins: usize, half_width: f64) -> Result<Histogram> {
    if torus_bins == 0 || fiber_bins == 0 || !(half_width > 0.0) {
        return Err(Error::InvalidInput("histogram needs positive bin counts and half-width".into()));
    }
    let (u, d) = (cloud.u, cloud.d);
    let size = (torus_bins as u128).pow(u as u32) * (fiber_bins as u128).pow(d as u32);
    if size > 1 << 28 {
        return Err(Error::CombinatorialBlowup { what: "histogram bins".into(), count: size as f64, cap: 1 << 28 });
    }
    let mut counts = vec![0u64; size as usize];
    let mut out = 0u64;
    'points: for i in 0..cloud.len() {
        let mut idx = 0usize;
        for &x in cloud.base(i) {
            let b = ((x.rem_euclid(1.0) * torus_bins as f64) as usize).min(torus_bins - 1);
            idx = idx * torus_bins + b;
        }
        for &y in cloud.fiber(i) {
            let s = (y + half_width) / (2.0 * half_width);
            if !(0.0..1.0).contains(&s) {
                out += 1;
                continue 'points;
            }
            idx = idx * fiber_bins + ((s * fiber_bins as f64) as usize).min(fiber_bins - 1);
        }
        counts[idx] += 1;
    }
    Ok(Histogram { u, d, torus_bins, fiber_bins, half_width, counts, total: cloud.len() as u64, out_of_range: out })
}

/// Σ |p_i − q_i| over bins, the out-of-range mass counted as one more bin.
pub fn l1_distance(a: &Histogram, b: &Histogram) -> Result<f64> {
    if a.counts.len() != b.counts.len() || a.half_width != b.half_width || a.torus_bins != b.torus_bins {
        return Err(Error::Dimension("histograms are on different grids".into()));
    }
    let (ta, tb) = (a.total.max(1) as f64, b.total.max(1) as f64);
    let inner: f64 = a.counts.iter().zip(&b.counts).map(|(&x, &y)| (x as f64 / ta - y as f64 / tb).abs()).sum();
    Ok(inner + (a.out_of_range as f64 / ta - b.out_of_range as f64 / tb).abs())
}

/// Unbiased binned estimate of ∫ρ²: Σ c(c−1) / (n(n−1)·bin volume).
pub fn l2_density_estimate(h: &Histogram) -> f64 {
    let n = h.total as f64;
    if n < 2.0 {
        return f64::NAN;
    }
    let s: f64 = h.counts.iter().map(|&c| c as f64 * (c as f64 - 1.0)).sum();
    s / (n * (n - 1.0) * h.bin_volume())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct L2Check {
    pub estimate: f64,
    pub refined: f64,
    pub ratio: f64,
    /// The estimate grew by more than 25% when the fiber bins were halved.
    pub singular: bool,
}

/// L² density estimate and its stability under doubling the fiber bins.
pub fn l2_density_check(cloud: &SampleCloud, torus_bins: usize, fiber_bins: usize, half_width: f64) -> Result<L2Check> {
    let a = l2_density_estimate(&histogram(cloud, torus_bins, fiber_bins, half_width)?);
    let b = l2_density_estimate(&histogram(cloud, torus_bins, 2 * fiber_bins, half_width)?);
    let ratio = b / a;
    Ok(L2Check { estimate: a, refined: b, ratio, singular: !(ratio <= 1.25) })
}

/// Σ_{i≠j} V(‖y_i − y_j‖, r) over ordered pairs of one fiber cloud, with V the
/// volume of the intersection of two r-balls.
pub fn fiber_pair_sum(points: &[f64], d: usize, r: f64) -> (f64, u64) {
    let n = points.len() / d;
    if n < 2 {
        return (0.0, 0);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[a * d].total_cmp(&points[b * d]));
    let two_r = 2.0 * r;
    if d == 1 {
        // Σ_{i<j, y_j − y_i < 2r} (2r − (y_j − y_i)) with prefix sums.
        let mean = points.iter().sum::<f64>() / n as f64;
        let ys: Vec<f64> = order.iter().map(|&i| points[i] - mean).collect();
        let mut prefix = vec![0.0; n + 1];
        for i in 0..n {
            prefix[i + 1] = prefix[i] + ys[i];
        }
        let (mut lo, mut sum, mut pairs) = (0usize, 0.0, 0u64);
        for j in 0..n {
            while ys[j] - ys[lo] >= two_r {
                lo += 1;
            }
            let cnt = (j - lo) as f64;
            sum += cnt * (two_r - ys[j]) + (prefix[j] - prefix[lo]);
            pairs += (j - lo) as u64;
        }
        return (2.0 * sum, 2 * pairs);
    }
    let (mut sum, mut pairs) = (0.0, 0u64);
    for a in 0..n {
        let pa = &points[order[a] * d..order[a] * d + d];
        for &ob in &order[a + 1..] {
            let pb = &points[ob * d..ob * d + d];
            if pb[0] - pa[0] >= two_r {
                break;
            }
            let dist = pa.iter().zip(pb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            if dist < two_r {
                sum += ball_intersection_volume_unchecked(dist, r, d);
                pairs += 1;
            }
        }
    }
    (2.0 * sum, 2 * pairs)
}

/// Estimate of ‖ν‖²_r = Σ_{i≠j} V(‖y_i − y_j‖, r) / (n(n−1)) for one fiber cloud.
pub fn fiber_norm_sq(points: &[f64], d: usize, r: f64) -> f64 {
    let n = (points.len() / d) as f64;
    fiber_pair_sum(points, d, r).0 / (n * (n - 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeminormEstimate {
    pub r: f64,
    /// |||μ|||_r
    pub value: f64,
    /// |||μ|||²_r
    pub value_sq: f64,
    pub std_error: f64,
    pub std_error_sq: f64,
    pub column_width: f64,
    pub pair_count: u64,
    pub columns: usize,
    pub flagged_columns: usize,
}

/// |||μ|||²_r = ∫ ‖μ_x‖²_r dx / r^{2d}, with μ_x approximated by the samples
/// whose base point falls in the same column. Errors are leave-one-column-out
/// jackknife estimates.
pub fn seminorm(cloud: &SampleCloud, r: f64, column_width: f64) -> Result<SeminormEstimate> {
    if !(r > 0.0) || !(column_width > 0.0) || column_width > 1.0 {
        return Err(Error::InvalidInput("r must be positive and the column width in (0, 1]".into()));
    }
    let (u, d) = (cloud.u, cloud.d);
    let per_axis = (1.0 / column_width).ceil() as usize;
    let ncol = (per_axis as u128).pow(u as u32);
    if ncol > 1 << 24 {
        return Err(Error::CombinatorialBlowup { what: "columns".into(), count: ncol as f64, cap: 1 << 24 });
    }
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); ncol as usize];
    for i in 0..cloud.len() {
        let mut idx = 0;
        for &x in cloud.base(i) {
            idx = idx * per_axis + ((x.rem_euclid(1.0) / column_width) as usize).min(per_axis - 1);
        }
        members[idx].push(i as u32);
    }
    // Column volume (the last column along an axis may be cut short).
    let axis_len = |b: usize| ((b + 1) as f64 * column_width).min(1.0) - b as f64 * column_width;
    let per_col: Vec<Option<(f64, f64, u64)>> = members
        .par_iter()
        .enumerate()
        .map(|(c, m)| {
            if m.len() < MIN_COLUMN_SAMPLES {
                return None;
            }
            let mut pts = Vec::with_capacity(m.len() * d);
            for &i in m {
                pts.extend_from_slice(cloud.fiber(i as usize));
            }
            let (s, pairs) = fiber_pair_sum(&pts, d, r);
            let n = m.len() as f64;
            let mut vol = 1.0;
            let mut rem = c;
            for _ in 0..u {
                vol *= axis_len(rem % per_axis);
                rem /= per_axis;
            }
            Some((s / (n * (n - 1.0)) / r.powi(2 * d as i32), vol, pairs))
        })
        .collect();
    let valid: Vec<(f64, f64, u64)> = per_col.iter().flatten().copied().collect();
    let flagged = per_col.len() - valid.len();
    if valid.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "{} of {} columns have at least {MIN_COLUMN_SAMPLES} samples",
            valid.len(),
            per_col.len()
        )));
    }
    let wsum: f64 = valid.iter().map(|v| v.1).sum();
    let total: f64 = valid.iter().map(|v| v.0 * v.1).sum();
    let est = total / wsum;
    let m = valid.len() as f64;
    let loo: Vec<f64> = valid.iter().map(|v| (total - v.0 * v.1) / (wsum - v.1)).collect();
    let mean_loo = loo.iter().sum::<f64>() / m;
    let se_sq = ((m - 1.0) / m * loo.iter().map(|t| (t - mean_loo).powi(2)).sum::<f64>()).sqrt();
    let value = est.max(0.0).sqrt();
    Ok(SeminormEstimate {
        r,
        value,
        value_sq: est,
        std_error: if value > 0.0 { se_sq / (2.0 * value) } else { 0.0 },
        std_error_sq: se_sq,
        column_width,
        pair_count: valid.iter().map(|v| v.2).sum(),
        columns: valid.len(),
        flagged_columns: flagged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InequalityLevel {
    pub k: usize,
    pub r: f64,
    pub estimate: SeminormEstimate,
    /// |||μ|||²_{r_k} − ρ·|||μ|||²_{r_{k−1}} (absent at k = 0).
    pub implied_c1: Option<f64>,
    pub within_forecast: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MainInequalityReport {
    pub q: usize,
    pub tau_upper: u64,
    pub jq: f64,
    /// ρ = τ/J^q
    pub rho: f64,
    pub r0: f64,
    /// Radius ratio per level, λ̲^q.
    pub shrink: f64,
    /// C₁ fitted on the first step.
    pub c1: Option<f64>,
    /// |||μ|||²_{r0} + C₁/(1−ρ); absent when ρ ≥ 1.
    pub forecast: Option<f64>,
    pub levels: Vec<InequalityLevel>,
    /// max_k |||μ|||_{r_k} / |||μ|||_{r_0}
    pub max_ratio: f64,
    /// |||μ|||_{r_last} / |||μ|||_{r_0}
    pub growth: f64,
    pub pass: bool,
}

/// Semi-norms along r_k = λ̲^{qk}·r0 against the recursion
/// |||μ|||²_{r_{k+1}} ≤ ρ|||μ|||²_{r_k} + C₁.
pub fn main_inequality_report(
    k: &Constants,
    q: usize,
    tau_upper: u64,
    cloud: &SampleCloud,
    r0: f64,
    levels: usize,
    column_width: f64,
) -> Result<MainInequalityReport> {
    let jq = k.j.powi(q as i32);
    let rho = tau_upper as f64 / jq;
    let shrink = k.lambda_lower.powi(q as i32);
    let mut ests = Vec::with_capacity(levels + 1);
    for lvl in 0..=levels {
        ests.push(seminorm(cloud, r0 * shrink.powi(lvl as i32), column_width)?);
    }
    let c1 = (ests.len() > 1).then(|| (ests[1].value_sq - rho * ests[0].value_sq).max(0.0));
    let forecast = match c1 {
        Some(c) if rho < 1.0 => Some(ests[0].value_sq + c / (1.0 - rho)),
        _ => None,
    };
    let mut out = Vec::with_capacity(ests.len());
    for (lvl, e) in ests.iter().enumerate() {
        let within = forecast.is_some_and(|f| e.value_sq <= f + 3.0 * e.std_error_sq);
        out.push(InequalityLevel {
            k: lvl,
            r: e.r,
            estimate: e.clone(),
            implied_c1: (lvl > 0).then(|| e.value_sq - rho * ests[lvl - 1].value_sq),
            within_forecast: within,
        });
    }
    let v0 = ests[0].value;
    let max_ratio = ests.iter().map(|e| e.value / v0).fold(0.0, f64::max);
    let growth = ests.last().unwrap().value / v0;
    let pass = forecast.is_some() && out.iter().all(|l| l.within_forecast);
    Ok(MainInequalityReport { q, tau_upper, jq, rho, r0, shrink, c1, forecast, levels: out, max_ratio, growth, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::s_value;
    use crate::markov::{build_partition, Word};
    use crate::system::{derive_constants, Contraction, ExpandingMap, TrigPolynomial, TrigTerm};

    fn system(m: i64, lambda: f64, f: TrigPolynomial) -> (SkewProduct, MarkovCode) {
        let e = ExpandingMap::scalar(m);
        let code = build_partition(&e, 0).unwrap();
        (derive_constants(e, Contraction::scalar(lambda).unwrap(), f).unwrap(), code)
    }

    fn uniform_cloud(n: usize, seed: u64) -> SampleCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        SampleCloud::new(1, 1, x, y, Method::Synthetic).unwrap()
    }

    #[test]
    fn zero_and_constant_forcing() {
        let (sys, code) = system(2, 0.7, TrigPolynomial::zero(1, 1));
        let c = symbolic_sample(&sys, &code, 10, 1000, 1, &SymbolicOptions::default()).unwrap();
        assert!(c.y.iter().all(|&v| v == 0.0));
        let (sys, code) = system(2, 0.7, TrigPolynomial::constant(1, &[1.5]));
        let n = 20;
        let c = symbolic_sample(&sys, &code, n, 1000, 1, &SymbolicOptions::default()).unwrap();
        let fixed = 1.5 / 0.3;
        for &y in &c.y {
            assert!((y - fixed).abs() <= 0.7f64.powi(n as i32) * 1.5 / 0.3 + 1e-12);
            assert!((y - fixed).abs() <= c.tail_radius + 1e-12);
        }
    }

    #[test]
    fn branch_choice_is_the_uniform_predecessor_chain() {
        for code in [
            build_partition(&ExpandingMap::scalar(3), 1).unwrap(),
            build_partition(&ExpandingMap::diagonal(&[2, 3]).unwrap(), 0).unwrap(),
        ] {
            let br = Branches::new(&code);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for _ in 0..200 {
                let w: Vec<f64> = (0..code.dim()).map(|_| rng.gen()).collect();
                let mut syms: Vec<u32> = (0..br.n())
                    .map(|r| {
                        let mut z = vec![0.0; code.dim()];
                        br.apply(r, &w, &mut z);
                        code.assign_symbol(&z)
                    })
                    .collect();
                syms.sort();
                assert_eq!(syms, code.predecessors(code.assign_symbol(&w)).to_vec());
            }
        }
    }

    #[test]
    fn symbolic_values_are_graph_values() {
        let (sys, code) = system(3, 0.7, TrigPolynomial::cosine(1.0));
        let br = Branches::new(&code);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x = [rng.gen::<f64>()];
            let mut choice = ChaCha8Rng::seed_from_u64(rng.gen());
            let mut replay = choice.clone();
            let mut y = [0.0];
            backward_value(&sys, &br, &x, 8, &mut Digits::new(None, 3), &mut choice, &mut y);
            // Rebuild the word from the same branch choices.
            let mut w = x.to_vec();
            let mut word = Vec::new();
            for _ in 0..8 {
                let r = replay.gen_range(0..3);
                let mut z = vec![0.0];
                br.apply(r, &w, &mut z);
                word.push(code.assign_symbol(&z));
                w = z;
            }
            word.reverse();
            let s = s_value(&sys, &code, &Word(word), &x).unwrap();
            assert!((s[0] - y[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn base_marginals_are_uniform() {
        let (sys, code) = system(3, 0.7, TrigPolynomial::cosine(1.0));
        let n = 20_000;
        let bound = 1.63 / (n as f64).sqrt();
        for cloud in [
            symbolic_sample(&sys, &code, 30, n, 5, &SymbolicOptions::default()).unwrap(),
            symbolic_sample(&sys, &code, 30, n, 5, &SymbolicOptions { columns: Some(16) }).unwrap(),
            orbit_sample(&sys, 50, n, 100, 5).unwrap(),
        ] {
            assert_eq!(cloud.len(), n);
            assert!(ks_uniform(&cloud.x) <= bound, "{:?}", cloud.method);
            let k = sys.constants.k;
            assert!(cloud.y.iter().all(|v| v.abs() <= k));
        }
    }

    #[test]
    fn planar_orbits_stay_uniform() {
        let e = ExpandingMap::new(vec![vec![3, 1], vec![1, 2]]).unwrap();
        let f = TrigPolynomial::new(2, 1, vec![TrigTerm { k: vec![1, 0], cos: vec![1.0], sin: vec![0.0] }]).unwrap();
        let sys = derive_constants(e, Contraction::scalar(0.6).unwrap(), f).unwrap();
        let n = 20_000;
        let cloud = orbit_sample(&sys, 100, n, 50, 3).unwrap();
        let bound = 1.63 / (n as f64).sqrt();
        for axis in 0..2 {
            let xs: Vec<f64> = (0..n).map(|i| cloud.base(i)[axis]).collect();
            assert!(ks_uniform(&xs) <= bound);
        }
    }

    #[test]
    fn orbits_of_zero_forcing_decay() {
        let (sys, _) = system(2, 0.7, TrigPolynomial::zero(1, 1));
        let c = orbit_sample(&sys, 1, 40, 1, 8).unwrap();
        for i in 1..c.len() {
            let (a, b) = (c.fiber(i - 1)[0], c.fiber(i)[0]);
            assert!((b - 0.7 * a).abs() <= 1e-15 * a.abs());
        }
    }

    #[test]
    fn samplers_are_deterministic() {
        let (sys, code) = system(3, 0.7, TrigPolynomial::cosine(1.0));
        let a = symbolic_sample(&sys, &code, 20, 100_000, 7, &SymbolicOptions::default()).unwrap();
        let b = symbolic_sample(&sys, &code, 20, 100_000, 7, &SymbolicOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(orbit_sample(&sys, 20, 1000, 7, 7).unwrap(), orbit_sample(&sys, 20, 1000, 7, 7).unwrap());
        assert_ne!(a, symbolic_sample(&sys, &code, 20, 100_000, 8, &SymbolicOptions::default()).unwrap());
    }

    #[test]
    fn samplers_agree_at_moderate_resolution() {
        let (sys, code) = system(3, 0.7, TrigPolynomial::cosine(1.0));
        let k = sys.constants.k;
        let a = symbolic_sample(&sys, &code, 40, 200_000, 1, &SymbolicOptions::default()).unwrap();
        let b = orbit_sample(&sys, 60, 200_000, 200, 2).unwrap();
        let (ha, hb) = (histogram(&a, 16, 16, k).unwrap(), histogram(&b, 16, 16, k).unwrap());
        let d = l1_distance(&ha, &hb).unwrap();
        assert!(d < 0.06, "{d}");
        let hc = histogram(&a.push_forward(&sys), 16, 16, k).unwrap();
        assert!(l1_distance(&ha, &hc).unwrap() < 0.06);
    }

    #[test]
    fn histogram_bookkeeping() {
        let cloud =
            SampleCloud::new(1, 1, vec![0.1, 0.6, 0.6, 0.99], vec![0.0, 0.5, -2.0, 0.9], Method::Synthetic).unwrap();
        let h = histogram(&cloud, 2, 4, 1.0).unwrap();
        assert_eq!(h.counts.iter().sum::<u64>() + h.out_of_range, h.total);
        assert_eq!(h.out_of_range, 1);
        assert!(h.bin_volume() > 0.0);
        assert_eq!(h.counts[2], 1);
        assert_eq!(h.counts[4 + 3], 2);
        let csv = h.density_csv();
        assert!(csv.starts_with("x0,y0,density\n"));
        assert_eq!(csv.lines().count(), 9);
        assert_eq!(l1_distance(&h, &h).unwrap(), 0.0);
    }

    #[test]
    fn l2_density_of_uniform_and_atomic_clouds() {
        let cloud = uniform_cloud(400_000, 3);
        let h = histogram(&cloud, 32, 32, 1.0).unwrap();
        // Uniform on 𝕋 × [0,1) inside the box [−1,1]: density 1 on half the bins.
        assert!((l2_density_estimate(&h) - 1.0).abs() < 0.05);
        assert!(!l2_density_check(&cloud, 32, 32, 1.0).unwrap().singular);
        let atoms = SampleCloud::new(1, 1, cloud.x.clone(), vec![0.01; cloud.len()], Method::Synthetic).unwrap();
        assert!(l2_density_check(&atoms, 32, 32, 1.0).unwrap().singular);
    }

    #[test]
    fn interval_overlap_law() {
        let cloud = uniform_cloud(200_000, 4);
        for r in [0.05, 0.02] {
            let e = seminorm(&cloud, r, 0.05).unwrap();
            let exact = (4.0 * r * r - 8.0 * r * r * r / 3.0) / (r * r);
            assert!(
                (e.value_sq - exact).abs() < 3.0 * e.std_error_sq.max(1e-3 * exact),
                "{r}: {} vs {exact}",
                e.value_sq
            );
        }
    }

    #[test]
    fn atom_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..50_000).map(|_| rng.gen()).collect();
        let y: Vec<f64> = x.iter().map(|&v| (v * 20.0).floor()).collect();
        let cloud = SampleCloud::new(1, 1, x, y, Method::Synthetic).unwrap();
        for r in [0.1, 0.01, 0.001] {
            let e = seminorm(&cloud, r, 0.05).unwrap();
            assert!((e.value_sq * r * r / (2.0 * r) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn separated_clouds_have_zero_cross_form() {
        let r = 0.1;
        let a = [0.0, 0.05, 0.1];
        let b = [0.5, 0.55];
        let both: Vec<f64> = a.iter().chain(&b).copied().collect();
        let (sa, sb, sab) = (fiber_pair_sum(&a, 1, r).0, fiber_pair_sum(&b, 1, r).0, fiber_pair_sum(&both, 1, r).0);
        assert!((sab - sa - sb).abs() < 1e-15);
    }

    #[test]
    fn pair_sums_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for d in 1..=3 {
            let pts: Vec<f64> = (0..300 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r = 0.3;
            let mut brute = 0.0;
            for i in 0..300 {
                for j in 0..300 {
                    if i != j {
                        let dist = (0..d).map(|k| (pts[i * d + k] - pts[j * d + k]).powi(2)).sum::<f64>().sqrt();
                        brute += ball_intersection_volume_unchecked(dist, r, d);
                    }
                }
            }
            assert!((fiber_pair_sum(&pts, d, r).0 - brute).abs() < 1e-9 * brute.max(1.0));
        }
    }

    /// ‖A_*ν‖²_r ≤ |det A|·‖ν‖²_{r/λ̲} pairwise for A = C^q with smallest
    /// singular value λ̲^q.
    #[test]
    fn contraction_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = Mat::from_rows(&[[0.7, 0.2], [0.0, 0.6]]).unwrap();
        let contraction = Contraction::new(c.clone()).unwrap();
        for q in 1..4u32 {
            let a = c.pow(q);
            let ll = contraction.lambda_lower().powi(q as i32);
            let det = a.det().abs();
            let pts: Vec<f64> = (0..2000).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut pushed = Vec::with_capacity(pts.len());
            for p in pts.chunks(2) {
                let mut v = vec![0.3, -0.1];
                a.mul_vec_add(p, &mut v);
                pushed.extend(v);
            }
            for r in [0.01, 0.05] {
                let lhs = fiber_norm_sq(&pushed, 2, r);
                let rhs = det * fiber_norm_sq(&pts, 2, r / ll);
                assert!(lhs <= rhs * (1.0 + 1e-9), "q={q} r={r}: {lhs} > {rhs}");
            }
        }
    }

    #[test]
    fn main_inequality_on_synthetic_clouds() {
        let (sys, _) = system(3, 0.7, TrigPolynomial::cosine(1.0));
        let k = &sys.constants;
        let flat = uniform_cloud(200_000, 8);
        let rep = main_inequality_report(k, 1, 1, &flat, 0.1, 3, 0.05).unwrap();
        assert!(rep.rho < 1.0 && rep.pass, "{rep:?}");
        assert!(rep.max_ratio < 1.2);
        let atoms = SampleCloud::new(1, 1, flat.x.clone(), vec![0.0; flat.len()], Method::Synthetic).unwrap();
        let rep = main_inequality_report(k, 1, 1, &atoms, 0.1, 3, 0.05).unwrap();
        assert!(!rep.pass);
        let expected = (1.0 / 0.7f64).powf(1.5);
        assert!((rep.growth - expected).abs() < 1e-9);
    }

    #[test]
    fn fiber_columns_and_flags() {
        let (sys, code) = system(3, 0.7, TrigPolynomial::cosine(1.0));
        let cloud = fiber_sample(&sys, &code, 30, 8, 100, 3).unwrap();
        assert_eq!(cloud.len(), 800);
        let e = seminorm(&cloud, 0.1, 1.0 / 8.0).unwrap();
        assert_eq!(e.columns, 8);
        assert_eq!(e.flagged_columns, 0);
        let e = seminorm(&cloud, 0.1, 1.0 / 64.0).unwrap();
        assert_eq!(e.columns, 8);
        assert_eq!(e.flagged_columns, 56);
        let sparse = SampleCloud::new(1, 1, vec![0.5; 10], vec![0.0; 10], Method::Synthetic).unwrap();
        assert!(matches!(seminorm(&sparse, 0.1, 0.1), Err(Error::InsufficientSamples(_))));
    }

    #[test]
    fn depth_rule() {
        let (sys, _) = system(3, 0.7, TrigPolynomial::cosine(1.0));
        let n = default_depth(&sys.constants, 1e-6);
        assert!(0.7f64.powi(n as i32) < 1e-6 && 0.7f64.powi(n as i32 - 1) >= 1e-6);
    }
}
