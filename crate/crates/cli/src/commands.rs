use std::path::Path;

use serde_json::{json, Value};
use skewcert::config::{load_system, system_to_toml, SystemConfig};
use skewcert::genericity::{
    b_constant, build_bump_family, genericity_constants, n_generic_check, nu_feasibility, p_of_q, parameter_sweep,
    separation_radius, smallest_nu, PerturbationFamily,
};
use skewcert::markov::load_partition;
use skewcert::srb::{
    default_depth, fiber_sample, histogram, ks_uniform, l2_density_check, main_inequality_report, orbit_sample,
    seminorm, symbolic_sample, Method, SampleCloud, SymbolicOptions,
};
use skewcert::system::{in_cde, product_system};
use skewcert::transversality::{check_condition, pair_certificates, tau_upper, PRule, TauOptions};
use skewcert::{build_partition, Error, MarkovCode, SkewProduct, Word};

use crate::report::{csv_rows, invalid, to_value, CliResult, Failure, Output};
use crate::{Cli, Command, SampleMethod};

/// Tail weight used for default sampling depths.
const DEPTH_TOL: f64 = 1e-12;

struct Loaded {
    cfg: SystemConfig,
    code: MarkovCode,
    echo: Value,
}

fn load(cli: &Cli) -> CliResult<Loaded> {
    let g = &cli.global;
    let path = g.system.as_ref().ok_or_else(|| invalid("this command needs --system <file>"))?;
    let cfg = load_system(path)?;
    let raw = std::fs::read_to_string(path)?;
    let (code, part) = match &g.partition {
        Some(p) => (load_partition(p, &cfg.system.e)?, json!({ "path": p, "text": std::fs::read_to_string(p)? })),
        None => (build_partition(&cfg.system.e, g.refine)?, json!({ "canonical_refinements": g.refine })),
    };
    let echo = json!({
        "path": path,
        "text": raw,
        "canonical": system_to_toml(&cfg.system, &cfg.perturbations),
        "partition": part,
    });
    Ok(Loaded { cfg, code, echo })
}

fn seed(cli: &Cli) -> CliResult<u64> {
    cli.global.seed.ok_or_else(|| invalid("this command samples at random and needs --seed"))
}

fn check_samples(cli: &Cli, count: u64) -> CliResult<()> {
    if count > cli.global.sample_cap {
        return Err(Failure::Core(Error::CombinatorialBlowup {
            what: "samples".into(),
            count: count as f64,
            cap: cli.global.sample_cap,
        }));
    }
    Ok(())
}

fn opts(cli: &Cli, grid: f64, margin: bool) -> CliResult<TauOptions> {
    if !(grid > 0.0) {
        return Err(invalid("--grid must be positive"));
    }
    Ok(TauOptions { grid_step: grid, word_cap: cli.global.word_cap, margin, ..TauOptions::default() })
}

fn inputs(cli: &Cli, system: Option<&Value>) -> Value {
    json!({
        "global": to_value(&cli.global),
        "args": to_value(&cli.command),
        "system": system.cloned().unwrap_or(Value::Null),
    })
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Constants => "constants",
        Command::CheckCde => "check-cde",
        Command::Words(_) => "words",
        Command::Transversality(_) => "transversality",
        Command::Tau(_) => "tau",
        Command::SrbSample(_) => "srb-sample",
        Command::Seminorm(_) => "seminorm",
        Command::MainInequality(_) => "main-inequality",
        Command::Product(_) => "product",
        Command::GenericityConstants(_) => "genericity-constants",
        Command::NuCheck(_) => "nu-check",
        Command::Bumps(_) => "bumps",
        Command::GenericCheck(_) => "generic-check",
        Command::Sweep(_) => "sweep",
    }
}

pub fn run(cli: &Cli) -> CliResult<String> {
    let name = command_name(&cli.command);
    let (out, results) = match &cli.command {
        Command::Product(a) => {
            let mut out = Output::new(name, inputs(cli, None));
            let r = product(cli, a, &mut out)?;
            (out, r)
        }
        _ => {
            let l = load(cli)?;
            let mut out = Output::new(name, inputs(cli, Some(&l.echo)));
            let r = dispatch(cli, &l, &mut out)?;
            (out, r)
        }
    };
    out.finish(results, cli.global.out.as_deref())
}

fn dispatch(cli: &Cli, l: &Loaded, out: &mut Output) -> CliResult<Value> {
    let sys = &l.cfg.system;
    let code = &l.code;
    let k = &sys.constants;
    if !code.diameters_ok() {
        out.warn(format!(
            "partition diameter {:.4} is not below γ = {:.4}; consider --refine",
            code.max_diameter(),
            code.gamma()
        ));
    }
    match &cli.command {
        Command::Constants => Ok(json!({
            "constants": to_value(k),
            "in_cde": in_cde(&sys.e, &sys.c),
            "partition": {
                "cells": code.num_cells(),
                "full_shift": code.is_full_shift(),
                "max_diameter": code.max_diameter(),
                "gamma": code.gamma(),
            },
        })),
        Command::CheckCde => {
            let n = k.n as f64;
            let w = (k.u + 1).saturating_sub(k.d).max(1) as f64;
            let det = sys.c.det().abs();
            Ok(json!({
                "in_cde": in_cde(&sys.e, &sys.c),
                "fiber_dim_ok": k.d <= k.u,
                "det_condition": { "abs_det_c": det, "bound": 1.0 / n, "holds": det > 1.0 / n },
                "norm_condition": {
                    "lambda_upper": k.lambda_upper,
                    "bound": k.mu_lower / n.powf(1.0 / w),
                    "holds": k.lambda_upper < k.mu_lower / n.powf(1.0 / w),
                },
            }))
        }
        Command::Words(a) => {
            let mut r = json!({ "n": a.n, "count": code.count_words(a.n) });
            if let Some(b) = &a.base {
                let c: Word = b.parse().map_err(|e: Error| Failure::Core(e))?;
                if !code.is_admissible(&c.0) {
                    return Err(invalid(format!("base word {c} is not admissible")));
                }
                r["base"] = json!(c.to_string());
                r["landing_count"] = json!(code.count_landing(a.n, &c));
            }
            if let Some(x) = &a.x {
                let words = skewcert::genericity::words_at(code, x, a.n, cli.global.word_cap)?;
                let rows: Vec<Value> = words
                    .iter()
                    .map(|w| Ok(json!({ "word": w.to_string(), "point": code.preimage_point(w, x)? })))
                    .collect::<Result<_, Error>>()?;
                r["at_x"] = json!({ "x": x, "words": rows });
            }
            if a.list {
                let words = code.enumerate_words(a.n, cli.global.word_cap)?;
                out.csv("list", csv_rows(&["word"], words.iter().map(|w| [w.to_string()])));
                r["listed"] = json!(words.len());
            }
            Ok(r)
        }
        Command::Transversality(a) => {
            let o = opts(cli, a.grid, a.margin)?;
            let rep = tau_upper(sys, code, a.q, a.p, &o)?;
            let certs = pair_certificates(sys, code, a.q, a.p, a.grid, a.pairs_limit, cli.global.word_cap)?;
            out.csv(
                "pairs",
                csv_rows(
                    &["c", "a", "b", "lower_bound", "threshold", "margin", "grid", "correction", "verdict"],
                    certs.iter().map(|c| {
                        [
                            c.c.to_string(),
                            c.a.to_string(),
                            c.b.to_string(),
                            c.lower_bound.to_string(),
                            c.threshold.to_string(),
                            c.margin.to_string(),
                            c.grid.to_string(),
                            c.correction.to_string(),
                            format!("{:?}", c.verdict),
                        ]
                    }),
                ),
            );
            if certs.len() == a.pairs_limit {
                out.warn(format!("pair certificates truncated at --pairs-limit {}", a.pairs_limit));
            }
            Ok(json!({ "tau": to_value(&rep), "pair_certificates": certs.len() }))
        }
        Command::Tau(a) => {
            let rule = a.p.map_or(PRule::Genericity, PRule::Fixed);
            let rep = check_condition(sys, code, &a.q, rule, &opts(cli, a.grid, a.margin)?)?;
            if let Some(s) = &rep.stopped {
                return Err(Failure::Core(Error::CombinatorialBlowup {
                    what: format!("scan stopped after {} values of q: {s}", rep.trail.len()),
                    count: f64::NAN,
                    cap: cli.global.word_cap,
                }));
            }
            Ok(to_value(&rep))
        }
        Command::SrbSample(a) => {
            let seed = seed(cli)?;
            check_samples(cli, a.count as u64)?;
            let depth = a.n.unwrap_or_else(|| default_depth(k, DEPTH_TOL));
            let cloud = match a.method {
                SampleMethod::Symbolic => {
                    symbolic_sample(sys, code, depth, a.count, seed, &SymbolicOptions { columns: a.stratify })?
                }
                SampleMethod::Orbit => orbit_sample(sys, depth, a.count, a.chains, seed)?,
                SampleMethod::Fiber => {
                    let cols = a.columns.pow(k.u as u32);
                    fiber_sample(sys, code, depth, a.columns, a.count.div_ceil(cols), seed)?
                }
            };
            let h = histogram(&cloud, a.torus_bins, a.fiber_bins, k.k)?;
            let l2 = l2_density_check(&cloud, a.torus_bins, a.fiber_bins, k.k)?;
            if l2.singular {
                out.warn("binned L² density grows under fiber refinement: the sample looks singular");
            }
            out.csv("histogram", h.density_csv());
            if a.dump_cloud {
                out.csv("cloud", cloud_csv(&cloud));
            }
            let ks: Vec<f64> = (0..cloud.u)
                .map(|i| ks_uniform(&(0..cloud.len()).map(|j| cloud.base(j)[i]).collect::<Vec<_>>()))
                .collect();
            Ok(json!({
                "method": to_value(&cloud.method),
                "count": cloud.len(),
                "depth": cloud.depth,
                "tail_radius": cloud.tail_radius,
                "half_width": k.k,
                "ks_base": ks,
                "out_of_range": h.out_of_range,
                "l2_density": to_value(&l2),
            }))
        }
        Command::Seminorm(a) => {
            let cloud = match &a.cloud {
                Some(p) => read_cloud(p, k.u, k.d)?,
                None => {
                    let seed = seed(cli)?;
                    let cols = (1.0 / a.column_width).round().max(1.0) as usize;
                    check_samples(cli, (cols.pow(k.u as u32) * a.per_column) as u64)?;
                    let depth = a.n.unwrap_or_else(|| default_depth(k, DEPTH_TOL));
                    fiber_sample(sys, code, depth, cols, a.per_column, seed)?
                }
            };
            let est: Vec<Value> =
                a.r.iter()
                    .map(|&r| Ok(to_value(&seminorm(&cloud, r, a.column_width)?)))
                    .collect::<Result<_, Error>>()?;
            Ok(json!({ "samples": cloud.len(), "estimates": est }))
        }
        Command::MainInequality(a) => {
            let seed = seed(cli)?;
            let p = a.p.unwrap_or_else(|| p_of_q(k, a.q));
            let tau = tau_upper(sys, code, a.q, p, &opts(cli, a.grid, false)?)?;
            check_samples(cli, (a.columns.pow(k.u as u32) * a.per_column) as u64)?;
            let depth = a.n.unwrap_or_else(|| default_depth(k, DEPTH_TOL));
            let cloud = fiber_sample(sys, code, depth, a.columns, a.per_column, seed)?;
            let rep = main_inequality_report(k, a.q, tau.tau_upper, &cloud, a.r0, a.levels, 1.0 / a.columns as f64)?;
            if rep.rho >= 1.0 {
                out.warn(format!("ρ = τ/J^q = {:.4} ≥ 1: the recursion gives no bound", rep.rho));
            }
            Ok(json!({ "tau": to_value(&tau), "main_inequality": to_value(&rep) }))
        }
        Command::GenericityConstants(a) => {
            let s = genericity_constants(&sys.e, &sys.c)?;
            let table: Vec<Value> = (1..=a.q_max).map(|q| json!({ "q": q, "p": p_of_q(k, q) })).collect();
            Ok(json!({ "genericity_constants": to_value(&s), "b": b_constant(k), "p_of_q": table }))
        }
        Command::NuCheck(a) => {
            let smallest = smallest_nu(k, a.n, a.max_nu)?;
            let check = match a.nu {
                Some(nu) => Some(to_value(&nu_feasibility(k, a.n, nu)?)),
                None => None,
            };
            Ok(json!({ "n": a.n, "check": check, "smallest_nu": smallest, "searched_up_to": a.max_nu }))
        }
        Command::Bumps(a) => {
            let nu = resolve_nu(k, a.n, a.nu)?;
            let eps0 = match a.eps0 {
                Some(e) => e,
                None => 0.5 * separation_radius(sys, code, &a.x, a.n, nu)?,
            };
            let fam = build_bump_family(sys, code, a.n, &a.x, eps0, nu)?;
            out.csv(
                "checks",
                csv_rows(
                    &[
                        "index",
                        "support_ok",
                        "inner_ok",
                        "bound_ok",
                        "max_inner_error",
                        "max_derivative",
                        "deriv_bound",
                    ],
                    fam.checks.iter().map(|c| {
                        [
                            c.index.to_string(),
                            c.support_ok.to_string(),
                            c.inner_ok.to_string(),
                            c.bound_ok.to_string(),
                            c.max_inner_error.to_string(),
                            c.max_derivative.to_string(),
                            c.deriv_bound.to_string(),
                        ]
                    }),
                ),
            );
            Ok(json!({
                "n": fam.n,
                "nu": fam.nu,
                "x": fam.x,
                "eps0": fam.eps0,
                "max_eps0": fam.max_eps0,
                "parameters": fam.family.len(),
                "words": fam.words.iter().map(|w| w.to_string()).collect::<Vec<_>>(),
                "all_verified": fam.all_verified(),
                "checks": to_value(&fam.checks),
            }))
        }
        Command::GenericCheck(a) => {
            let seed = seed(cli)?;
            let nu = resolve_nu(k, a.n, a.nu)?;
            let eps0 = match a.eps0 {
                Some(e) => e,
                None => 0.5 * separation_radius(sys, code, &a.x, a.n, nu)?,
            };
            let fam = build_bump_family(sys, code, a.n, &a.x, eps0, nu)?;
            let depth = a.depth.unwrap_or(a.n + nu);
            let rep = n_generic_check(sys, code, &fam.family, a.n, &a.x, a.big_d, a.trials, depth, seed)?;
            out.warn(rep.coverage.clone());
            Ok(json!({ "nu": nu, "eps0": eps0, "parameters": fam.family.len(), "report": to_value(&rep) }))
        }
        Command::Sweep(a) => {
            if l.cfg.perturbations.is_empty() {
                return Err(invalid("the system file declares no [[phi]] perturbation directions"));
            }
            let grid = read_grid(&a.t_grid, l.cfg.perturbations.len())?;
            let fam = PerturbationFamily::trig(sys.f.clone(), l.cfg.perturbations.clone())?;
            let p = a.p.unwrap_or_else(|| p_of_q(k, a.q));
            let rep = parameter_sweep(&sys.e, &sys.c, code, &fam, &grid, a.q, p, &opts(cli, a.grid, true)?)?;
            out.csv("points", rep.to_csv());
            Ok(to_value(&rep))
        }
        Command::Product(_) => unreachable!("handled before loading a system"),
    }
}

fn resolve_nu(k: &skewcert::Constants, n: usize, nu: Option<usize>) -> CliResult<usize> {
    match nu {
        Some(v) => Ok(v),
        None => smallest_nu(k, n, 1000)?.ok_or_else(|| invalid("no feasible ν up to 1000; pass --nu")),
    }
}

fn product(cli: &Cli, a: &crate::ProductArgs, out: &mut Output) -> CliResult<Value> {
    let mut factors: Vec<SkewProduct> = Vec::new();
    let mut echo = Vec::new();
    for p in &a.factors {
        let cfg = load_system(p)?;
        echo.push(json!({ "path": p, "canonical": system_to_toml(&cfg.system, &[]) }));
        factors.push(cfg.system);
    }
    out.inputs["factors"] = json!(echo);
    let prod = product_system(&factors)?;
    let mut r = json!({
        "constants": to_value(&prod.constants),
        "in_cde": in_cde(&prod.e, &prod.c),
        "system": system_to_toml(&prod, &[]),
    });
    if let Some(q) = a.q {
        let o = opts(cli, a.grid, false)?;
        let mut taus = Vec::new();
        for f in &factors {
            let code = build_partition(&f.e, 0)?;
            taus.push(to_value(&tau_upper(f, &code, q, a.p, &o)?));
        }
        let code = build_partition(&prod.e, 0)?;
        r["factor_tau"] = json!(taus);
        r["product_tau"] = to_value(&tau_upper(&prod, &code, q, a.p, &o)?);
    }
    Ok(r)
}

fn cloud_csv(c: &SampleCloud) -> String {
    let header: Vec<String> = (0..c.u).map(|i| format!("x{i}")).chain((0..c.d).map(|i| format!("y{i}"))).collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_rows(&h, (0..c.len()).map(|i| c.base(i).iter().chain(c.fiber(i)).map(|v| format!("{v:?}")).collect::<Vec<_>>()))
}

fn read_cloud(path: &Path, u: usize, d: usize) -> CliResult<SampleCloud> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        if rec.len() != u + d {
            return Err(invalid(format!(
                "{}: row {} has {} columns, expected {}",
                path.display(),
                i + 2,
                rec.len(),
                u + d
            )));
        }
        for (j, f) in rec.iter().enumerate() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| invalid(format!("{}: row {}: bad number {f:?}", path.display(), i + 2)))?;
            if j < u {
                x.push(v);
            } else {
                y.push(v);
            }
        }
    }
    Ok(SampleCloud::new(u, d, x, y, Method::Synthetic)?)
}

fn read_grid(path: &Path, s: usize) -> CliResult<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let mut grid = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let row: Vec<f64> = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| invalid(format!("{}: line {}: bad number {f:?}", path.display(), i + 1)))
            })
            .collect::<CliResult<_>>()?;
        if row.len() != s {
            return Err(invalid(format!("{}: line {} has {} values, expected {s}", path.display(), i + 1, row.len())));
        }
        grid.push(row);
    }
    if grid.is_empty() {
        return Err(invalid(format!("{}: empty parameter grid", path.display())));
    }
    Ok(grid)
}
