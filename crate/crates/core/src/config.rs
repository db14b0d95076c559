//! TOML system files.
//!
//! ```toml
//! u = 1
//! d = 1
//! E = [[3]]
//! C = [[0.7]]
//! f = [{ k = [1], cos = [1.0], sin = [0.0] }]
//!
//! # optional perturbation directions for sweeps
//! [[phi]]
//! f = [{ k = [1], sin = [1.0] }]
//! ```
//!
//! Every validation error carries the line and column of the offending value.

use std::ops::Range;
use std::path::Path;

use serde::de::{self, Deserializer, Visitor};
use serde::Deserialize;
use toml::Spanned;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::system::{derive_constants, Contraction, ExpandingMap, SkewProduct, TrigPolynomial, TrigTerm};

/// A TOML number that may be written as an integer or a float.
#[derive(Clone, Copy, Debug)]
struct Real(f64);

impl<'de> Deserialize<'de> for Real {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Real;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a number")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Real, E> {
                Ok(Real(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Real, E> {
                Ok(Real(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Real, E> {
                Ok(Real(v as f64))
            }
        }
        deserializer.deserialize_any(V)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTerm {
    k: Vec<i64>,
    #[serde(default)]
    cos: Option<Vec<Real>>,
    #[serde(default)]
    sin: Option<Vec<Real>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPerturbation {
    #[serde(default)]
    f: Vec<Spanned<RawTerm>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    u: Spanned<i64>,
    d: Spanned<i64>,
    #[serde(rename = "E")]
    e: Spanned<Vec<Vec<i64>>>,
    #[serde(rename = "C")]
    c: Spanned<Vec<Vec<Real>>>,
    #[serde(default)]
    f: Vec<Spanned<RawTerm>>,
    #[serde(default)]
    phi: Vec<Spanned<RawPerturbation>>,
}

/// A loaded system file.
#[derive(Clone, Debug)]
pub struct SystemConfig {
    pub system: SkewProduct,
    /// Perturbation directions φ_k declared under `[[phi]]`.
    pub perturbations: Vec<TrigPolynomial>,
}

/// Locates byte offsets in a source text.
pub(crate) struct SourceMap<'a> {
    pub name: &'a str,
    pub text: &'a str,
}

impl SourceMap<'_> {
    pub fn line_col(&self, offset: usize) -> (usize, usize) {
        let offset = offset.min(self.text.len());
        let before = &self.text[..offset];
        let line = before.matches('\n').count() + 1;
        let col = before.rfind('\n').map_or(offset, |p| offset - p - 1) + 1;
        (line, col)
    }

    pub fn error(&self, span: Range<usize>, message: impl Into<String>) -> Error {
        let (line, column) = self.line_col(span.start);
        Error::Config { source_name: self.name.to_string(), line, column, message: message.into() }
    }

    pub fn parse_error(&self, e: toml::de::Error) -> Error {
        let span = e.span().unwrap_or(0..0);
        self.error(span, e.message().to_string())
    }
}

pub fn load_system(path: &Path) -> Result<SystemConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    parse_system(&text, &path.display().to_string())
}

pub fn parse_system(text: &str, source_name: &str) -> Result<SystemConfig> {
    let src = SourceMap { name: source_name, text };
    let raw: RawSystem = toml::from_str(text).map_err(|e| src.parse_error(e))?;

    let u = positive_dim(&src, &raw.u, "u")?;
    let d = positive_dim(&src, &raw.d, "d")?;
    if d > u {
        return Err(src.error(raw.d.span(), format!("need d ≤ u, got d = {d} > u = {u}")));
    }

    let e_rows = raw.e.get_ref();
    if e_rows.len() != u || e_rows.iter().any(|r| r.len() != u) {
        return Err(src.error(raw.e.span(), format!("E must be a {u}×{u} integer matrix")));
    }
    let e = ExpandingMap::new(e_rows.clone()).map_err(|err| src.error(raw.e.span(), err.to_string()))?;

    let c_rows = raw.c.get_ref();
    if c_rows.len() != d || c_rows.iter().any(|r| r.len() != d) {
        return Err(src.error(raw.c.span(), format!("C must be a {d}×{d} real matrix")));
    }
    let c_vals: Vec<Vec<f64>> = c_rows.iter().map(|r| r.iter().map(|v| v.0).collect()).collect();
    let c_mat = Mat::from_rows(&c_vals).map_err(|err| src.error(raw.c.span(), err.to_string()))?;
    let c = Contraction::new(c_mat).map_err(|err| src.error(raw.c.span(), err.to_string()))?;

    let f = trig_from_terms(&src, &raw.f, u, d)?;
    let mut perturbations = Vec::with_capacity(raw.phi.len());
    for p in &raw.phi {
        perturbations.push(trig_from_terms(&src, &p.get_ref().f, u, d)?);
    }

    let system = derive_constants(e, c, f).map_err(|err| {
        let span = match err {
            Error::NotContracting { .. } => raw.c.span(),
            Error::NotExpanding { .. } => raw.e.span(),
            _ => raw.c.span().start.min(raw.e.span().start)..raw.c.span().end.max(raw.e.span().end),
        };
        src.error(span, err.to_string())
    })?;
    Ok(SystemConfig { system, perturbations })
}

fn positive_dim(src: &SourceMap, v: &Spanned<i64>, name: &str) -> Result<usize> {
    let n = *v.get_ref();
    if !(1..=8).contains(&n) {
        return Err(src.error(v.span(), format!("{name} must be between 1 and 8, got {n}")));
    }
    Ok(n as usize)
}

fn trig_from_terms(src: &SourceMap, raw: &[Spanned<RawTerm>], u: usize, d: usize) -> Result<TrigPolynomial> {
    let mut terms = Vec::with_capacity(raw.len());
    for t in raw {
        let span = t.span();
        let t = t.get_ref();
        if t.k.len() != u {
            return Err(src.error(span, format!("frequency k must have {u} entries, got {}", t.k.len())));
        }
        let coef = |v: &Option<Vec<Real>>, name: &str| -> Result<Vec<f64>> {
            match v {
                None => Ok(vec![0.0; d]),
                Some(v) if v.len() == d => {
                    let out: Vec<f64> = v.iter().map(|x| x.0).collect();
                    if out.iter().any(|x| !x.is_finite()) {
                        return Err(src.error(span.clone(), format!("{name} coefficients must be finite")));
                    }
                    Ok(out)
                }
                Some(v) => Err(src.error(span.clone(), format!("{name} must have {d} entries, got {}", v.len()))),
            }
        };
        terms.push(TrigTerm { k: t.k.clone(), cos: coef(&t.cos, "cos")?, sin: coef(&t.sin, "sin")? });
    }
    TrigPolynomial::new(u, d, terms).map_err(|e| src.error(0..0, e.to_string()))
}

/// Renders a system back to the file format.
pub fn system_to_toml(s: &SkewProduct, perturbations: &[TrigPolynomial]) -> String {
    let mut out = String::new();
    out.push_str(&format!("u = {}\nd = {}\n", s.u(), s.d()));
    let e_rows: Vec<String> =
        s.e.entries()
            .iter()
            .map(|r| format!("[{}]", r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")))
            .collect();
    out.push_str(&format!("E = [{}]\n", e_rows.join(", ")));
    let c_rows: Vec<String> =
        s.c.matrix()
            .to_rows()
            .iter()
            .map(|r| format!("[{}]", r.iter().map(|v| format_real(*v)).collect::<Vec<_>>().join(", ")))
            .collect();
    out.push_str(&format!("C = [{}]\n", c_rows.join(", ")));
    out.push_str(&format!("f = [{}]\n", terms_to_toml(&s.f)));
    for p in perturbations {
        out.push_str(&format!("\n[[phi]]\nf = [{}]\n", terms_to_toml(p)));
    }
    out
}

fn terms_to_toml(f: &TrigPolynomial) -> String {
    let vec_f = |v: &[f64]| format!("[{}]", v.iter().map(|x| format_real(*x)).collect::<Vec<_>>().join(", "));
    f.terms()
        .iter()
        .map(|t| {
            format!(
                "\n  {{ k = [{}], cos = {}, sin = {} }}",
                t.k.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", "),
                vec_f(&t.cos),
                vec_f(&t.sin)
            )
        })
        .collect::<Vec<_>>()
        .join(",")
        + if f.terms().is_empty() { "" } else { "\n" }
}

fn format_real(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}
