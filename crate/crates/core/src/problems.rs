//! Problem documents: a small text format describing a weighted map between
//! charts, a curated gallery of worked examples, and deterministic random
//! problem generators for property checks.
//!
//! Document format, line oriented with `#` comments:
//!
//! ```text
//! [problem]
//! name = cylinder-f-biharmonic
//! description = Flat strip wrapped onto a round cylinder.
//!
//! [params]
//! R = 1.0
//!
//! [domain]
//! coords = x, y
//! metric = euclidean
//! region = -9..9, -9..9
//! guard = x^2 + y^2        # optional, with guard_margin
//! guard_margin = 0.25
//!
//! [target]
//! coords = p, q, r
//! metric = conformal: exp(p/R)
//! region = -2..2, -2..2, -10..10
//!
//! [map]
//! p = cos(x)
//! q = sin(x)
//! r = y
//!
//! [weight]
//! f = exp(-y)
//! ```
//!
//! `metric` is `euclidean`, `conformal: <expr>`, or `matrix: <e11>; <e12>;
//! ...` listing the upper triangle row by row. The `[weight]` section is
//! optional and defaults to the constant 1. Identifiers that are not chart
//! coordinates are parameters and must be bound in `[params]`.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::expr::{parse_expr, Expr, ExprError, ParamEnv};
use crate::geometry::{ChartManifold, GeometryError, Guard, MetricSpec};
use crate::mapcalc::{MapError, MapProblem};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("missing section [{0}]")]
    MissingSection(&'static str),
    #[error("section [{section}] is missing key `{key}`")]
    MissingKey { section: &'static str, key: String },
    #[error("line {line}: in `{context}`: {source}")]
    BadExpr {
        line: usize,
        context: String,
        #[source]
        source: ExprError,
    },
    #[error("parameter `{0}` is used but not bound in [params]")]
    UnboundParam(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Map(#[from] MapError),
}

type Result<T> = std::result::Result<T, ProblemError>;

/// A fully assembled problem: named, validated, with its parameter bindings.
#[derive(Debug, Clone)]
pub struct ProblemDoc {
    pub name: String,
    pub description: String,
    pub params: ParamEnv,
    pub problem: MapProblem,
}

const SECTIONS: [&str; 6] = ["problem", "params", "domain", "target", "map", "weight"];

struct RawSection {
    entries: Vec<(String, String, usize)>,
}

impl RawSection {
    fn get(&self, key: &str) -> Option<(&str, usize)> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, l)| (v.as_str(), *l))
    }

    fn require(&self, section: &'static str, key: &str) -> Result<(&str, usize)> {
        self.get(key).ok_or_else(|| ProblemError::MissingKey {
            section,
            key: key.to_owned(),
        })
    }
}

fn split_sections(text: &str) -> Result<BTreeMap<String, RawSection>> {
    let mut sections: BTreeMap<String, RawSection> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| ProblemError::Syntax {
                    line: line_no,
                    message: "unterminated section header".into(),
                })?
                .trim()
                .to_owned();
            if !SECTIONS.contains(&name.as_str()) {
                return Err(ProblemError::Syntax {
                    line: line_no,
                    message: format!("unknown section [{name}]"),
                });
            }
            if sections.contains_key(&name) {
                return Err(ProblemError::Syntax {
                    line: line_no,
                    message: format!("duplicate section [{name}]"),
                });
            }
            sections.insert(name.clone(), RawSection { entries: Vec::new() });
            current = Some(name);
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ProblemError::Syntax {
                line: line_no,
                message: "expected `key = value` or a [section] header".into(),
            });
        };
        let section = current.as_ref().ok_or_else(|| ProblemError::Syntax {
            line: line_no,
            message: "key outside of any section".into(),
        })?;
        let key = key.trim().to_owned();
        let sec = sections.get_mut(section).unwrap();
        if sec.entries.iter().any(|(k, _, _)| *k == key) {
            return Err(ProblemError::Syntax {
                line: line_no,
                message: format!("duplicate key `{key}` in [{section}]"),
            });
        }
        sec.entries.push((key, value.trim().to_owned(), line_no));
    }
    Ok(sections)
}

fn parse_coords(value: &str, line: usize) -> Result<Vec<String>> {
    let coords: Vec<String> = value
        .split(',')
        .map(|c| c.trim().to_owned())
        .filter(|c| !c.is_empty())
        .collect();
    if coords.is_empty() {
        return Err(ProblemError::Syntax { line, message: "empty coordinate list".into() });
    }
    Ok(coords)
}

fn parse_region(value: &str, line: usize) -> Result<Vec<(f64, f64)>> {
    value
        .split(',')
        .map(|piece| {
            let piece = piece.trim();
            let (lo, hi) = piece.split_once("..").ok_or_else(|| ProblemError::Syntax {
                line,
                message: format!("expected `lo..hi`, found `{piece}`"),
            })?;
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|_| ProblemError::Syntax {
                    line,
                    message: format!("`{}` is not a number", s.trim()),
                })
            };
            Ok((parse(lo)?, parse(hi)?))
        })
        .collect()
}

fn expr_in(
    value: &str,
    coords: &[String],
    line: usize,
    context: &str,
) -> Result<Expr> {
    let refs: Vec<&str> = coords.iter().map(|s| s.as_str()).collect();
    parse_expr(value, &refs).map_err(|source| ProblemError::BadExpr {
        line,
        context: context.to_owned(),
        source,
    })
}

fn parse_metric(
    value: &str,
    coords: &[String],
    line: usize,
    which: &str,
) -> Result<MetricSpec> {
    if value == "euclidean" {
        return Ok(MetricSpec::Euclidean);
    }
    if let Some(rest) = value.strip_prefix("conformal:") {
        let factor = expr_in(rest.trim(), coords, line, &format!("{which} conformal factor"))?;
        return Ok(MetricSpec::Conformal(factor));
    }
    if let Some(rest) = value.strip_prefix("matrix:") {
        let m = coords.len();
        let entries: Vec<&str> = rest.split(';').map(|s| s.trim()).collect();
        let expected = m * (m + 1) / 2;
        if entries.len() != expected {
            return Err(ProblemError::Syntax {
                line,
                message: format!(
                    "matrix metric for {m} coordinates needs {expected} upper-triangle entries, found {}",
                    entries.len()
                ),
            });
        }
        let mut rows = vec![vec![Expr::zero(); m]; m];
        let mut it = entries.into_iter();
        for i in 0..m {
            for j in i..m {
                let e = expr_in(
                    it.next().unwrap(),
                    coords,
                    line,
                    &format!("{which} metric entry ({},{})", i + 1, j + 1),
                )?;
                rows[i][j] = e.clone();
                rows[j][i] = e;
            }
        }
        return Ok(MetricSpec::Matrix(rows));
    }
    Err(ProblemError::Syntax {
        line,
        message: format!("unknown metric `{value}` (expected euclidean, conformal: ..., or matrix: ...)"),
    })
}

fn parse_chart(sec: &RawSection, which: &'static str) -> Result<ChartManifold> {
    let (coords_str, cline) = sec.require(which, "coords")?;
    let coords = parse_coords(coords_str, cline)?;
    let (metric_str, mline) = sec.require(which, "metric")?;
    let spec = parse_metric(metric_str, &coords, mline, which)?;
    let (region_str, rline) = sec.require(which, "region")?;
    let region = parse_region(region_str, rline)?;
    let guard = match sec.get("guard") {
        Some((gexpr, gline)) => {
            let (margin_str, mgline) = sec.require(which, "guard_margin")?;
            let margin = margin_str.parse::<f64>().map_err(|_| ProblemError::Syntax {
                line: mgline,
                message: format!("`{margin_str}` is not a number"),
            })?;
            Some(Guard {
                expr: expr_in(gexpr, &coords, gline, &format!("{which} guard"))?,
                margin,
            })
        }
        None => None,
    };
    Ok(ChartManifold::new(coords, spec, region, guard)?)
}

/// Parses and validates one problem document.
pub fn parse_problem(text: &str) -> Result<ProblemDoc> {
    let sections = split_sections(text)?;
    let require_section = |name: &'static str| {
        sections.get(name).ok_or(ProblemError::MissingSection(name))
    };

    let meta = require_section("problem")?;
    let (name, _) = meta.require("problem", "name")?;
    let name = name.to_owned();
    let description = meta.get("description").map(|(v, _)| v.to_owned()).unwrap_or_default();

    let mut params = ParamEnv::new();
    if let Some(sec) = sections.get("params") {
        for (key, value, line) in &sec.entries {
            let v = value.parse::<f64>().map_err(|_| ProblemError::Syntax {
                line: *line,
                message: format!("parameter `{key}` must be a number, found `{value}`"),
            })?;
            if !params.insert(key, v) {
                return Err(ProblemError::Syntax {
                    line: *line,
                    message: format!("parameter `{key}` bound twice"),
                });
            }
        }
    }

    let domain = parse_chart(require_section("domain")?, "domain")?;
    let target = parse_chart(require_section("target")?, "target")?;

    let map_sec = require_section("map")?;
    let mut map = Vec::with_capacity(target.dim());
    for tc in target.coords() {
        let (value, line) = map_sec
            .get(tc)
            .ok_or_else(|| ProblemError::MissingKey { section: "map", key: tc.clone() })?;
        map.push(expr_in(value, domain.coords(), line, &format!("map component {tc}"))?);
    }
    for (key, _, line) in &map_sec.entries {
        if !target.coords().contains(key) {
            return Err(ProblemError::Syntax {
                line: *line,
                message: format!("map component `{key}` does not name a target coordinate"),
            });
        }
    }

    let weight = match sections.get("weight") {
        Some(sec) => {
            let (value, line) = sec.require("weight", "f")?;
            expr_in(value, domain.coords(), line, "weight")?
        }
        None => Expr::one(),
    };

    // Every free parameter must be bound up front so evaluation cannot fail
    // later with an unbound name.
    let mut free = BTreeSet::new();
    for e in domain.metric_exprs().iter().flatten() {
        free.extend(e.free_params());
    }
    for e in target.metric_exprs().iter().flatten() {
        free.extend(e.free_params());
    }
    if let Some(g) = domain.guard() {
        free.extend(g.expr.free_params());
    }
    if let Some(g) = target.guard() {
        free.extend(g.expr.free_params());
    }
    for e in &map {
        free.extend(e.free_params());
    }
    free.extend(weight.free_params());
    for name in free {
        if params.get(&name).is_none() {
            return Err(ProblemError::UnboundParam(name));
        }
    }

    let problem = MapProblem::new(domain, target, map, weight, &params)?;
    Ok(ProblemDoc { name, description, params, problem })
}

// ----- gallery -----

/// Sign of the target sectional curvature, used to decide whether
/// curvature-sign-dependent checks apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurvatureSign {
    Flat,
    Negative,
    Positive,
}

impl CurvatureSign {
    /// Non-positively curved targets admit the convexity-based estimates.
    pub fn is_non_positive(self) -> bool {
        matches!(self, CurvatureSign::Flat | CurvatureSign::Negative)
    }
}

/// Which operators vanish identically for an entry. `true` means the
/// corresponding residual is zero everywhere on the chart.
#[derive(Debug, Clone, Copy)]
pub struct EntryFlags {
    pub harmonic: bool,
    pub f_harmonic: bool,
    pub biharmonic: bool,
    pub f_biharmonic: bool,
    pub bi_f_harmonic: bool,
    pub target_curvature: CurvatureSign,
}

/// A worked example shipped with the crate.
#[derive(Debug, Clone, Copy)]
pub struct GalleryEntry {
    pub name: &'static str,
    pub summary: &'static str,
    pub source: &'static str,
    pub flags: EntryFlags,
    /// Operators flagged `false` must show a sampled sup-norm at least this
    /// large, so a sign mistake collapsing them to zero is caught.
    pub residual_floor: f64,
}

impl GalleryEntry {
    pub fn load(&self) -> Result<ProblemDoc> {
        let doc = parse_problem(self.source)?;
        debug_assert_eq!(doc.name, self.name);
        Ok(doc)
    }
}

macro_rules! entry {
    ($name:literal, $summary:literal, $floor:literal,
     harmonic: $h:literal, f_harmonic: $fh:literal, biharmonic: $b:literal,
     f_biharmonic: $fb:literal, bi_f_harmonic: $bf:literal, curvature: $c:ident) => {
        GalleryEntry {
            name: $name,
            summary: $summary,
            source: include_str!(concat!("../problems/", $name, ".problem")),
            flags: EntryFlags {
                harmonic: $h,
                f_harmonic: $fh,
                biharmonic: $b,
                f_biharmonic: $fb,
                bi_f_harmonic: $bf,
                target_curvature: CurvatureSign::$c,
            },
            residual_floor: $floor,
        }
    };
}

pub const GALLERY: &[GalleryEntry] = &[
    entry!(
        "identity-flat-3",
        "Identity map of flat 3-space; every operator in the family vanishes.",
        0.0,
        harmonic: true, f_harmonic: true, biharmonic: true,
        f_biharmonic: true, bi_f_harmonic: true, curvature: Flat
    ),
    entry!(
        "identity-hyperbolic-2",
        "Identity map of the upper half-plane; harmonic with a curved metric.",
        0.0,
        harmonic: true, f_harmonic: true, biharmonic: true,
        f_biharmonic: true, bi_f_harmonic: true, curvature: Negative
    ),
    entry!(
        "constant-flat-2",
        "Constant map with a genuinely non-constant weight; all residuals vanish.",
        0.0,
        harmonic: true, f_harmonic: true, biharmonic: true,
        f_biharmonic: true, bi_f_harmonic: true, curvature: Flat
    ),
    entry!(
        "inversion-f-biharmonic-m3",
        "Inversion of flat 3-space on an annulus, weight |x|^4: weighted-biharmonic.",
        1.0,
        harmonic: false, f_harmonic: false, biharmonic: false,
        f_biharmonic: true, bi_f_harmonic: false, curvature: Flat
    ),
    entry!(
        "inversion-f-biharmonic-m4",
        "Inversion of flat 4-space, weight |x|^4: weighted-biharmonic and biharmonic.",
        1.0,
        harmonic: false, f_harmonic: false, biharmonic: true,
        f_biharmonic: true, bi_f_harmonic: false, curvature: Flat
    ),
    entry!(
        "inversion-f-biharmonic-m5",
        "Inversion of flat 5-space on an annulus, weight |x|^4: weighted-biharmonic.",
        1.0,
        harmonic: false, f_harmonic: false, biharmonic: false,
        f_biharmonic: true, bi_f_harmonic: false, curvature: Flat
    ),
    entry!(
        "inversion-bi-f-harmonic-m3",
        "Inversion with conformal domain metric |x|^(-8/3) dx^2 and weight |x|^(4/3).",
        0.05,
        harmonic: false, f_harmonic: false, biharmonic: false,
        f_biharmonic: false, bi_f_harmonic: true, curvature: Flat
    ),
    entry!(
        "inversion-bi-f-harmonic-m4",
        "Inversion with conformal domain metric |x|^(-2) dx^2 and weight |x|^2.",
        0.05,
        harmonic: false, f_harmonic: false, biharmonic: false,
        f_biharmonic: false, bi_f_harmonic: true, curvature: Flat
    ),
    entry!(
        "inversion-bi-f-harmonic-m5",
        "Inversion with conformal domain metric |x|^(-8/5) dx^2 and weight |x|^(12/5).",
        0.05,
        harmonic: false, f_harmonic: false, biharmonic: false,
        f_biharmonic: false, bi_f_harmonic: true, curvature: Flat
    ),
    entry!(
        "cylinder-biharmonic",
        "Strip with metric e^y (dx^2+dy^2) wrapped onto the unit cylinder: biharmonic.",
        1.0,
        harmonic: false, f_harmonic: false, biharmonic: true,
        f_biharmonic: true, bi_f_harmonic: true, curvature: Flat
    ),
    entry!(
        "cylinder-f-biharmonic",
        "Flat strip onto the unit cylinder with weight e^{-y}: weighted-biharmonic.",
        0.5,
        harmonic: false, f_harmonic: false, biharmonic: false,
        f_biharmonic: true, bi_f_harmonic: false, curvature: Flat
    ),
    entry!(
        "scalar-bif-quadratic",
        "Real function x^2 with weight x on an interval: classically biharmonic only.",
        1.0,
        harmonic: false, f_harmonic: false, biharmonic: true,
        f_biharmonic: true, bi_f_harmonic: false, curvature: Flat
    ),
    entry!(
        "scalar-bif-linear",
        "Real function x with weight 1+x^2: harmonic but not doubly-weighted-biharmonic.",
        0.5,
        harmonic: true, f_harmonic: false, biharmonic: true,
        f_biharmonic: true, bi_f_harmonic: false, curvature: Flat
    ),
    entry!(
        "hyperbolic-target-harmonic",
        "Geodesic composed with a linear function, into the hyperbolic plane.",
        0.02,
        harmonic: true, f_harmonic: false, biharmonic: true,
        f_biharmonic: true, bi_f_harmonic: false, curvature: Negative
    ),
    entry!(
        "sphere-equator-geodesic",
        "Line run along the sphere's equator at unit speed, with weight e^{t/5}.",
        0.02,
        harmonic: true, f_harmonic: false, biharmonic: true,
        f_biharmonic: true, bi_f_harmonic: false, curvature: Positive
    ),
];

pub fn gallery_entry(name: &str) -> Option<&'static GalleryEntry> {
    GALLERY.iter().find(|e| e.name == name)
}

// ----- random problem generators -----

const SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub(crate) fn small_scalar(rng: &mut ChaCha8Rng, coords: &[String], amplitude: f64) -> Expr {
    let m = coords.len();
    let coord = |i: usize| Expr::coord(&coords[i], i);
    let mut e = Expr::number(rng.gen_range(-amplitude..amplitude));
    for i in 0..m {
        e = e.add(&Expr::number(rng.gen_range(-amplitude..amplitude)).mul(&coord(i)));
    }
    let i = rng.gen_range(0..m);
    let j = rng.gen_range(0..m);
    e = e.add(&Expr::number(rng.gen_range(-amplitude..amplitude)).mul(&coord(i)).mul(&coord(j)));
    let k = rng.gen_range(0..m);
    e = e.add(&Expr::number(rng.gen_range(-amplitude..amplitude)).mul(&coord(k).sin()));
    e
}

fn random_metric(rng: &mut ChaCha8Rng, coords: &[String]) -> MetricSpec {
    match rng.gen_range(0..3u8) {
        0 => MetricSpec::Euclidean,
        1 => MetricSpec::Conformal(small_scalar(rng, coords, 0.3).exp()),
        _ => {
            let m = coords.len();
            let mut rows = vec![vec![Expr::zero(); m]; m];
            for (i, row) in rows.iter_mut().enumerate() {
                row[i] = small_scalar(rng, coords, 0.25).exp();
            }
            // One small constant off-diagonal pair keeps the matrix
            // diagonally dominant, hence positive definite.
            if m >= 2 {
                let c = Expr::number(rng.gen_range(-0.2..0.2));
                rows[0][1] = c.clone();
                rows[1][0] = c;
            }
            MetricSpec::Matrix(rows)
        }
    }
}

/// Deterministic random weighted map problem on `[-1,1]^m`. The same seed
/// always yields the same problem. Targets are flat or conformally curved.
pub fn random_map_problem(m: usize, n: usize, seed: u64) -> MapProblem {
    assert!((1..=5).contains(&m) && (1..=5).contains(&n), "dimensions must be in 1..=5");
    let env = ParamEnv::new();
    for attempt in 0..64u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SEED_SALT ^ (attempt << 32));
        let dc: Vec<String> = (1..=m).map(|i| format!("x{i}")).collect();
        let tc: Vec<String> = (1..=n).map(|i| format!("y{i}")).collect();
        let domain = ChartManifold::new(
            dc.clone(),
            random_metric(&mut rng, &dc),
            vec![(-1.0, 1.0); m],
            None,
        );
        let target_spec = if rng.gen_bool(0.5) {
            MetricSpec::Euclidean
        } else {
            MetricSpec::Conformal(small_scalar(&mut rng, &tc, 0.2).exp())
        };
        let target = ChartManifold::new(tc, target_spec, vec![(-4.0, 4.0); n], None);
        let (Ok(domain), Ok(target)) = (domain, target) else {
            continue;
        };
        let map: Vec<Expr> = (0..n).map(|_| small_scalar(&mut rng, &dc, 0.35)).collect();
        let weight = small_scalar(&mut rng, &dc, 0.3).exp();
        if let Ok(p) = MapProblem::new(domain, target, map, weight, &env) {
            return p;
        }
    }
    unreachable!("random problem generation failed for seed {seed}");
}

/// Deterministic random scalar problem: a chart, a positive weight, and a
/// test function, all on `[-1,1]^m`.
pub fn random_scalar_problem(m: usize, seed: u64) -> (ChartManifold, Expr, Expr) {
    assert!((1..=5).contains(&m), "dimension must be in 1..=5");
    for attempt in 0..64u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SEED_SALT.rotate_left(17) ^ (attempt << 32));
        let dc: Vec<String> = (1..=m).map(|i| format!("x{i}")).collect();
        let chart = ChartManifold::new(
            dc.clone(),
            random_metric(&mut rng, &dc),
            vec![(-1.0, 1.0); m],
            None,
        );
        let Ok(chart) = chart else { continue };
        let weight = small_scalar(&mut rng, &dc, 0.3).exp();
        let u = small_scalar(&mut rng, &dc, 0.5);
        return (chart, weight, u);
    }
    unreachable!("random scalar problem generation failed for seed {seed}");
}

/// Wraps a scalar function `u` on `chart` as a map into the real line, so the
/// full section machinery applies to weighted scalar operators. The target
/// box is sized generously; callers whose `u` exceeds `±64` on the chart
/// should build the [`MapProblem`] directly.
pub fn scalar_as_map_problem(
    chart: ChartManifold,
    weight: Expr,
    u: Expr,
    env: &ParamEnv,
) -> std::result::Result<MapProblem, crate::mapcalc::MapError> {
    let target = ChartManifold::euclidean(vec!["scalar_value".into()], vec![(-64.0, 64.0)])
        .expect("static line chart is valid");
    MapProblem::new(chart, target, vec![u], weight, env)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> ParamEnv {
        ParamEnv::new()
    }

    #[test]
    fn gallery_entries_all_parse_and_validate() {
        assert_eq!(GALLERY.len(), 15);
        let mut names = BTreeSet::new();
        for entry in GALLERY {
            let doc = entry.load().unwrap_or_else(|e| panic!("{}: {e}", entry.name));
            assert_eq!(doc.name, entry.name);
            assert!(!doc.description.is_empty(), "{} has no description", entry.name);
            assert!(names.insert(entry.name), "duplicate gallery name {}", entry.name);
        }
    }

    #[test]
    fn gallery_flags_match_measured_residuals() {
        // For each entry, operators flagged as vanishing must be zero at all
        // sampled points, and the others must reach the entry's floor.
        for entry in GALLERY {
            let doc = entry.load().unwrap();
            let p = &doc.problem;
            let pts = p.domain().sample_points(60, 2024, &doc.params).unwrap();
            let ops: [(&str, bool, &crate::mapcalc::SectionField); 5] = [
                ("tension", entry.flags.harmonic, p.tension_field()),
                ("f-tension", entry.flags.f_harmonic, p.f_tension_field()),
                ("bitension", entry.flags.biharmonic, p.bitension_field()),
                ("f-bitension", entry.flags.f_biharmonic, p.f_bitension_field()),
                ("bi-f-tension", entry.flags.bi_f_harmonic, p.bi_f_tension_field()),
            ];
            for (label, vanishes, field) in ops {
                let mut sup = 0.0f64;
                for x in &pts {
                    for c in field.components() {
                        sup = sup.max(c.evaluate(x, &doc.params).unwrap().abs());
                    }
                }
                if vanishes {
                    assert!(
                        sup <= 1e-8,
                        "{}: {label} flagged zero but sup = {sup:e}",
                        entry.name
                    );
                } else {
                    assert!(
                        sup >= entry.residual_floor,
                        "{}: {label} flagged nonzero but sup = {sup:e} < {}",
                        entry.name,
                        entry.residual_floor
                    );
                }
            }
        }
    }

    #[test]
    fn document_errors_carry_line_numbers() {
        let text = "[problem]\nname = broken\n[domain]\ncoords = x\nmetric = euclidean\nregion = 0..1..2\n";
        match parse_problem(text) {
            Err(ProblemError::Syntax { line, .. }) => assert_eq!(line, 6),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_map_key_is_rejected() {
        let text = "\
[problem]
name = bad-map
[domain]
coords = x
metric = euclidean
region = -1..1
[target]
coords = w
metric = euclidean
region = -2..2
[map]
w = x
z = x
";
        match parse_problem(text) {
            Err(ProblemError::Syntax { line, message }) => {
                assert_eq!(line, 13);
                assert!(message.contains("z"));
            }
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn unbound_parameter_is_rejected() {
        let text = "\
[problem]
name = free-param
[domain]
coords = x
metric = euclidean
region = -1..1
[target]
coords = w
metric = euclidean
region = -5..5
[map]
w = k * x
";
        match parse_problem(text) {
            Err(ProblemError::UnboundParam(name)) => assert_eq!(name, "k"),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn bad_expression_reports_context_and_line() {
        let text = "\
[problem]
name = bad-expr
[domain]
coords = x
metric = conformal: exp(x
region = -1..1
[target]
coords = w
metric = euclidean
region = -5..5
[map]
w = x
";
        match parse_problem(text) {
            Err(ProblemError::BadExpr { line, context, .. }) => {
                assert_eq!(line, 5);
                assert!(context.contains("conformal"));
            }
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn random_problems_are_deterministic_and_valid() {
        for m in 1..=3 {
            for n in 1..=3 {
                let a = random_map_problem(m, n, 7);
                let b = random_map_problem(m, n, 7);
                assert_eq!(a.map_exprs().to_vec(), b.map_exprs().to_vec());
                assert_eq!(a.weight_expr(), b.weight_expr());
                let pts = a.domain().sample_points(5, 1, &env()).unwrap();
                for x in pts {
                    a.bi_f_tension(&x, &env()).unwrap();
                }
            }
        }
    }

    #[test]
    fn random_scalar_problems_are_deterministic() {
        let (c1, f1, u1) = random_scalar_problem(3, 11);
        let (c2, f2, u2) = random_scalar_problem(3, 11);
        assert_eq!(f1, f2);
        assert_eq!(u1, u2);
        assert_eq!(c1.metric_exprs().to_vec(), c2.metric_exprs().to_vec());
        let x = [0.3, -0.2, 0.5];
        assert!(f1.evaluate(&x, &env()).unwrap() > 0.0);
    }
}
