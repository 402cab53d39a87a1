//! Riemannian geometry on a single coordinate chart.
//!
//! A [`ChartManifold`] is a box-shaped sampling region in `R^m` together with
//! a symmetric metric whose components are [`Expr`]s in the chart
//! coordinates. All derived objects (inverse metric, volume density,
//! Christoffel symbols, curvature) are built symbolically from the metric
//! expressions on first use and cached on the chart, so higher operators that
//! re-differentiate them stay exact.
//!
//! Conventions, fixed once here and relied on throughout the crate:
//!
//! * `Γ^k_{ij} = ½ g^{kl} (∂_i g_{jl} + ∂_j g_{il} − ∂_l g_{ij})`;
//! * `R^a_{bcd} = ∂_c Γ^a_{db} − ∂_d Γ^a_{cb} + Γ^a_{ce}Γ^e_{db} −
//!   Γ^a_{de}Γ^e_{cb}`, i.e. `R(∂_c,∂_d)∂_b = R^a_{bcd} ∂_a` for
//!   `R(X,Y) = [∇_X,∇_Y] − ∇_{[X,Y]}`;
//! * `Δu = (1/√det g) ∂_i (√det g · g^{ij} ∂_j u)`, the trace of the Hessian,
//!   so the Euclidean Laplacian of `|x|²` is `2m`;
//! * `conformal_rescale(F)` produces `ḡ = F^{−2} g`.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::expr::{EvalError, Expr, Node, ParamEnv};

/// Identifiers that cannot be used as coordinate or parameter names.
pub const RESERVED_NAMES: [&str; 5] = ["sin", "cos", "exp", "log", "sqrt"];

/// Determinants at or below this threshold count as singular.
pub const SINGULAR_DET: f64 = 1e-14;

#[derive(Debug, Clone, Error)]
pub enum GeometryError {
    #[error("invalid chart: {0}")]
    InvalidChart(String),
    #[error("metric is singular at {point:?} (det = {det:e})")]
    SingularMetric { point: Vec<f64>, det: f64 },
    #[error("metric is not positive definite at {point:?}")]
    NotPositiveDefinite { point: Vec<f64> },
    #[error("factor must be positive on the region: value {value} at {point:?}")]
    NonPositiveFactor { point: Vec<f64>, value: f64 },
    #[error("sampling rejected {attempts} consecutive draws; guard excludes too much of the region")]
    SamplingExhausted { attempts: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

type Result<T> = std::result::Result<T, GeometryError>;

/// How the metric was written down. Shorthands keep the diagonal fast paths.
#[derive(Debug, Clone)]
pub enum MetricSpec {
    /// `δ_ij`.
    Euclidean,
    /// `λ · δ_ij` for a positive factor `λ`.
    Conformal(Expr),
    /// Full symmetric component matrix.
    Matrix(Vec<Vec<Expr>>),
}

/// Singular-set guard: points with `|expr| < margin` are never sampled.
#[derive(Debug, Clone)]
pub struct Guard {
    pub expr: Expr,
    pub margin: f64,
}

/// A coordinate chart with metric, sampling box and optional guard.
#[derive(Debug, Clone)]
pub struct ChartManifold {
    coords: Vec<String>,
    spec: MetricSpec,
    metric: Vec<Vec<Expr>>,
    region: Vec<(f64, f64)>,
    guard: Option<Guard>,
    diagonal: bool,
    inv: OnceLock<Vec<Vec<Expr>>>,
    det: OnceLock<Expr>,
    sqrt_det: OnceLock<Expr>,
    dg: OnceLock<Vec<Vec<Vec<Expr>>>>,
    gamma: OnceLock<Vec<Vec<Vec<Expr>>>>,
    dgamma: OnceLock<Vec<Vec<Vec<Vec<Expr>>>>>,
    riemann: OnceLock<Vec<Expr>>,
}

impl ChartManifold {
    pub fn new(
        coords: Vec<String>,
        spec: MetricSpec,
        region: Vec<(f64, f64)>,
        guard: Option<Guard>,
    ) -> Result<Self> {
        let m = coords.len();
        if m == 0 {
            return Err(GeometryError::InvalidChart("no coordinates".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &coords {
            if !is_identifier(c) {
                return Err(GeometryError::InvalidChart(format!(
                    "`{c}` is not a valid coordinate name"
                )));
            }
            if RESERVED_NAMES.contains(&c.as_str()) {
                return Err(GeometryError::InvalidChart(format!(
                    "`{c}` is a reserved function name"
                )));
            }
            if !seen.insert(c.clone()) {
                return Err(GeometryError::InvalidChart(format!("duplicate coordinate `{c}`")));
            }
        }
        if region.len() != m {
            return Err(GeometryError::InvalidChart(format!(
                "region has {} intervals for {m} coordinates",
                region.len()
            )));
        }
        for (i, (lo, hi)) in region.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(GeometryError::InvalidChart(format!(
                    "bad interval [{lo}, {hi}] for coordinate `{}`",
                    coords[i]
                )));
            }
        }
        let metric = expand_metric(&spec, m)?;
        for row in &metric {
            for e in row {
                validate_coord_refs(e, &coords)?;
            }
        }
        if let Some(g) = &guard {
            validate_coord_refs(&g.expr, &coords)?;
            if !g.margin.is_finite() || g.margin <= 0.0 {
                return Err(GeometryError::InvalidChart("guard margin must be positive".into()));
            }
        }
        let diagonal = (0..m).all(|i| {
            (0..m).all(|j| i == j || metric[i][j].as_const() == Some(0.0))
        });
        Ok(ChartManifold {
            coords,
            spec,
            metric,
            region,
            guard,
            diagonal,
            inv: OnceLock::new(),
            det: OnceLock::new(),
            sqrt_det: OnceLock::new(),
            dg: OnceLock::new(),
            gamma: OnceLock::new(),
            dgamma: OnceLock::new(),
            riemann: OnceLock::new(),
        })
    }

    pub fn euclidean(coords: Vec<String>, region: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(coords, MetricSpec::Euclidean, region, None)
    }

    pub fn conformal(
        coords: Vec<String>,
        factor: Expr,
        region: Vec<(f64, f64)>,
        guard: Option<Guard>,
    ) -> Result<Self> {
        Self::new(coords, MetricSpec::Conformal(factor), region, guard)
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[String] {
        &self.coords
    }

    pub fn coord_strs(&self) -> Vec<&str> {
        self.coords.iter().map(|s| s.as_str()).collect()
    }

    pub fn metric_spec(&self) -> &MetricSpec {
        &self.spec
    }

    pub fn metric_exprs(&self) -> &[Vec<Expr>] {
        &self.metric
    }

    pub fn region(&self) -> &[(f64, f64)] {
        &self.region
    }

    pub fn guard(&self) -> Option<&Guard> {
        self.guard.as_ref()
    }

    /// `g^{ij}` as expressions (diagonal fast path, else adjugate over det).
    pub fn inverse_metric_exprs(&self) -> &[Vec<Expr>] {
        self.inv.get_or_init(|| {
            let m = self.dim();
            if self.diagonal {
                let mut inv = vec![vec![Expr::zero(); m]; m];
                for (i, row) in inv.iter_mut().enumerate() {
                    row[i] = self.metric[i][i].powi(-1);
                }
                inv
            } else {
                let det = self.det_expr().clone();
                let mut inv = vec![vec![Expr::zero(); m]; m];
                for i in 0..m {
                    for j in i..m {
                        let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                        let minor = sym_det(&strike(&self.metric, j, i));
                        let entry = Expr::number(sign).mul(&minor).div(&det);
                        inv[i][j] = entry.clone();
                        inv[j][i] = entry;
                    }
                }
                inv
            }
        })
    }

    pub fn det_expr(&self) -> &Expr {
        self.det.get_or_init(|| {
            if self.diagonal {
                let mut acc = Expr::one();
                for i in 0..self.dim() {
                    acc = acc.mul(&self.metric[i][i]);
                }
                acc
            } else {
                sym_det(&self.metric)
            }
        })
    }

    pub fn sqrt_det_expr(&self) -> &Expr {
        self.sqrt_det.get_or_init(|| self.det_expr().sqrt())
    }

    /// `∂_k g_{ij}`, indexed `[k][i][j]`.
    fn metric_derivs(&self) -> &Vec<Vec<Vec<Expr>>> {
        self.dg.get_or_init(|| {
            let m = self.dim();
            (0..m)
                .map(|k| {
                    self.metric
                        .iter()
                        .map(|row| row.iter().map(|e| e.differentiate(&self.coords[k])).collect())
                        .collect()
                })
                .collect()
        })
    }

    /// `Γ^k_{ij}` as expressions, indexed `[k][i][j]`.
    pub fn christoffel_exprs(&self) -> &Vec<Vec<Vec<Expr>>> {
        self.gamma.get_or_init(|| {
            let m = self.dim();
            let inv = self.inverse_metric_exprs();
            let dg = self.metric_derivs();
            let mut gamma = vec![vec![vec![Expr::zero(); m]; m]; m];
            for k in 0..m {
                for i in 0..m {
                    for j in i..m {
                        let mut terms = Vec::with_capacity(m);
                        for l in 0..m {
                            if self.diagonal && l != k {
                                continue;
                            }
                            let bracket = dg[i][j][l].add(&dg[j][i][l]).sub(&dg[l][i][j]);
                            terms.push(inv[k][l].mul(&bracket));
                        }
                        let s = Expr::number(0.5).mul(&Expr::sum(terms.iter()));
                        gamma[k][i][j] = s.clone();
                        gamma[k][j][i] = s;
                    }
                }
            }
            gamma
        })
    }

    /// `∂_l Γ^k_{ij}`, indexed `[l][k][i][j]`.
    fn christoffel_derivs(&self) -> &Vec<Vec<Vec<Vec<Expr>>>> {
        self.dgamma.get_or_init(|| {
            let m = self.dim();
            let gamma = self.christoffel_exprs();
            (0..m)
                .map(|l| {
                    gamma
                        .iter()
                        .map(|gk| {
                            gk.iter()
                                .map(|gi| {
                                    gi.iter().map(|e| e.differentiate(&self.coords[l])).collect()
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
    }

    /// `R^a_{bcd}` as expressions, flattened with [`idx4`].
    pub fn riemann_exprs(&self) -> &Vec<Expr> {
        self.riemann.get_or_init(|| {
            let m = self.dim();
            let gamma = self.christoffel_exprs();
            let dgamma = self.christoffel_derivs();
            let mut out = vec![Expr::zero(); m * m * m * m];
            for a in 0..m {
                for b in 0..m {
                    for c in 0..m {
                        for d in 0..m {
                            let mut e = dgamma[c][a][d][b].sub(&dgamma[d][a][c][b]);
                            for l in 0..m {
                                e = e.add(&gamma[a][c][l].mul(&gamma[l][d][b]));
                                e = e.sub(&gamma[a][d][l].mul(&gamma[l][c][b]));
                            }
                            out[idx4(m, a, b, c, d)] = e;
                        }
                    }
                }
            }
            out
        })
    }

    /// Gradient components `(grad u)^i = g^{ij} ∂_j u`.
    pub fn grad_exprs(&self, u: &Expr) -> Vec<Expr> {
        let m = self.dim();
        let inv = self.inverse_metric_exprs();
        let du: Vec<Expr> = (0..m).map(|j| u.differentiate(&self.coords[j])).collect();
        (0..m)
            .map(|i| Expr::sum((0..m).map(|j| inv[i][j].mul(&du[j])).collect::<Vec<_>>().iter()))
            .collect()
    }

    /// `g(grad u, grad v) = g^{ij} ∂_i u ∂_j v`.
    pub fn grad_pairing_expr(&self, u: &Expr, v: &Expr) -> Expr {
        let m = self.dim();
        let inv = self.inverse_metric_exprs();
        let du: Vec<Expr> = (0..m).map(|i| u.differentiate(&self.coords[i])).collect();
        let dv: Vec<Expr> = (0..m).map(|j| v.differentiate(&self.coords[j])).collect();
        let mut terms = Vec::new();
        for i in 0..m {
            for j in 0..m {
                if self.diagonal && i != j {
                    continue;
                }
                terms.push(inv[i][j].mul(&du[i]).mul(&dv[j]));
            }
        }
        Expr::sum(terms.iter())
    }

    /// Divergence of a coordinate vector field: `(1/√g) ∂_i (√g Y^i)`.
    pub fn divergence_expr(&self, field: &[Expr]) -> Expr {
        assert_eq!(field.len(), self.dim(), "field has wrong dimension");
        let sd = self.sqrt_det_expr();
        let mut terms = Vec::new();
        for (i, y) in field.iter().enumerate() {
            terms.push(sd.mul(y).differentiate(&self.coords[i]));
        }
        Expr::sum(terms.iter()).div(sd)
    }

    /// Laplace–Beltrami in divergence form.
    pub fn laplace_beltrami_expr(&self, u: &Expr) -> Expr {
        self.divergence_expr(&self.grad_exprs(u))
    }

    // ----- numeric point operations -----

    pub fn metric_at(&self, x: &[f64], env: &ParamEnv) -> Result<Vec<Vec<f64>>> {
        let m = self.dim();
        let mut g = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in i..m {
                let v = self.metric[i][j].evaluate(x, env)?;
                g[i][j] = v;
                g[j][i] = v;
            }
        }
        Ok(g)
    }

    /// Checks the metric is usable at `x`: positive-definite with determinant
    /// above the singularity threshold.
    pub fn check_metric_at(&self, x: &[f64], env: &ParamEnv) -> Result<()> {
        let g = self.metric_at(x, env)?;
        let d = num_det(&g);
        if d.abs() <= SINGULAR_DET {
            return Err(GeometryError::SingularMetric { point: x.to_vec(), det: d });
        }
        if !leading_minors_positive(&g) {
            return Err(GeometryError::NotPositiveDefinite { point: x.to_vec() });
        }
        Ok(())
    }

    pub fn christoffel(&self, x: &[f64], env: &ParamEnv) -> Result<Christoffel> {
        self.check_metric_at(x, env)?;
        let m = self.dim();
        let gamma = self.christoffel_exprs();
        let mut vals = vec![0.0; m * m * m];
        for k in 0..m {
            for i in 0..m {
                for j in i..m {
                    let v = gamma[k][i][j].evaluate(x, env)?;
                    vals[(k * m + i) * m + j] = v;
                    vals[(k * m + j) * m + i] = v;
                }
            }
        }
        Ok(Christoffel { dim: m, vals })
    }

    pub fn riemann(&self, x: &[f64], env: &ParamEnv) -> Result<CurvatureValue> {
        self.check_metric_at(x, env)?;
        let m = self.dim();
        let exprs = self.riemann_exprs();
        let mut up = vec![0.0; m * m * m * m];
        for (i, e) in exprs.iter().enumerate() {
            up[i] = e.evaluate(x, env)?;
        }
        let g = self.metric_at(x, env)?;
        let mut low = vec![0.0; m * m * m * m];
        for a in 0..m {
            for b in 0..m {
                for c in 0..m {
                    for d in 0..m {
                        let mut s = 0.0;
                        for e in 0..m {
                            s += g[a][e] * up[idx4(m, e, b, c, d)];
                        }
                        low[idx4(m, a, b, c, d)] = s;
                    }
                }
            }
        }
        Ok(CurvatureValue { dim: m, g, up, low })
    }

    pub fn grad(&self, u: &Expr, x: &[f64], env: &ParamEnv) -> Result<Vec<f64>> {
        self.check_metric_at(x, env)?;
        self.grad_exprs(u)
            .iter()
            .map(|e| e.evaluate(x, env).map_err(Into::into))
            .collect()
    }

    pub fn laplace_beltrami(&self, u: &Expr, x: &[f64], env: &ParamEnv) -> Result<f64> {
        self.check_metric_at(x, env)?;
        Ok(self.laplace_beltrami_expr(u).evaluate(x, env)?)
    }

    /// `√det g` at `x`.
    pub fn volume_density(&self, x: &[f64], env: &ParamEnv) -> Result<f64> {
        self.check_metric_at(x, env)?;
        Ok(self.sqrt_det_expr().evaluate(x, env)?)
    }

    pub fn metric_jet(&self, x: &[f64], env: &ParamEnv) -> Result<MetricJet> {
        MetricJet::at(self, x, env)
    }

    /// `ḡ = F^{−2} g`. `factor` must be positive on the region; positivity is
    /// spot-checked on 64 deterministic samples plus the region centre.
    pub fn conformal_rescale(&self, factor: &Expr, env: &ParamEnv) -> Result<ChartManifold> {
        validate_coord_refs(factor, &self.coords)?;
        let mut probes = self.sample_points(64, CONFORMAL_PROBE_SEED, env)?;
        probes.push(self.region.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect());
        for p in &probes {
            if let Some(g) = &self.guard {
                if g.expr.evaluate(&p[..], env)?.abs() < g.margin {
                    continue;
                }
            }
            let v = factor.evaluate(&p[..], env)?;
            if !v.is_finite() || v <= 0.0 {
                return Err(GeometryError::NonPositiveFactor { point: p.clone(), value: v });
            }
        }
        let scale = factor.powi(-2);
        let spec = match &self.spec {
            MetricSpec::Euclidean => MetricSpec::Conformal(scale),
            MetricSpec::Conformal(lam) => MetricSpec::Conformal(scale.mul(lam)),
            MetricSpec::Matrix(rows) => MetricSpec::Matrix(
                rows.iter()
                    .map(|row| row.iter().map(|e| scale.mul(e)).collect())
                    .collect(),
            ),
        };
        ChartManifold::new(self.coords.clone(), spec, self.region.clone(), self.guard.clone())
    }

    /// Deterministic uniform samples from the region box, rejecting points
    /// the guard excludes.
    pub fn sample_points(&self, n: usize, seed: u64, env: &ParamEnv) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let mut rejected = 0usize;
            loop {
                let p: Vec<f64> = self
                    .region
                    .iter()
                    .map(|(lo, hi)| rng.gen_range(*lo..*hi))
                    .collect();
                let ok = match &self.guard {
                    Some(g) => g.expr.evaluate(&p, env)?.abs() >= g.margin,
                    None => true,
                };
                if ok {
                    out.push(p);
                    break;
                }
                rejected += 1;
                if rejected > 10_000 {
                    return Err(GeometryError::SamplingExhausted { attempts: rejected });
                }
            }
        }
        Ok(out)
    }

    /// True when `x` lies in the closed region box.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(&self.region)
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }
}

const CONFORMAL_PROBE_SEED: u64 = 0xfac7_0a1e;

/// Numeric Christoffel symbols at a point, `vals[(k·m+i)·m+j] = Γ^k_{ij}`.
#[derive(Debug, Clone)]
pub struct Christoffel {
    dim: usize,
    vals: Vec<f64>,
}

impl Christoffel {
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.vals[(k * self.dim + i) * self.dim + j]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Numeric curvature at a point: `up` holds `R^a_{bcd}`, `low` holds
/// `R_{abcd} = g_{ae} R^e_{bcd}`, both flattened with [`idx4`].
#[derive(Debug, Clone)]
pub struct CurvatureValue {
    dim: usize,
    g: Vec<Vec<f64>>,
    up: Vec<f64>,
    low: Vec<f64>,
}

impl CurvatureValue {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn up(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        self.up[idx4(self.dim, a, b, c, d)]
    }

    pub fn low(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        self.low[idx4(self.dim, a, b, c, d)]
    }

    /// Sectional curvature of the coordinate 2-plane spanned by `∂_i, ∂_j`.
    pub fn sectional(&self, i: usize, j: usize) -> f64 {
        let g = &self.g;
        let denom = g[i][i] * g[j][j] - g[i][j] * g[i][j];
        self.low(i, j, i, j) / denom
    }
}

/// Numeric metric data at one point: the metric, its partials to third
/// order, the inverse, Christoffel symbols and their first partials, and the
/// volume density. Everything an operator evaluation needs at the point,
/// computed once.
#[derive(Debug, Clone)]
pub struct MetricJet {
    pub point: Vec<f64>,
    /// `g_{ij}`.
    pub g: Vec<Vec<f64>>,
    /// `dg[k][i][j] = ∂_k g_{ij}`.
    pub dg: Vec<Vec<Vec<f64>>>,
    /// `d2g[k][l][i][j] = ∂_k ∂_l g_{ij}`.
    pub d2g: Vec<Vec<Vec<Vec<f64>>>>,
    /// `d3g[k][l][n][i][j] = ∂_k ∂_l ∂_n g_{ij}`.
    pub d3g: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
    /// `g^{ij}`.
    pub g_inv: Vec<Vec<f64>>,
    /// `gamma[k][i][j] = Γ^k_{ij}`.
    pub gamma: Vec<Vec<Vec<f64>>>,
    /// `dgamma[l][k][i][j] = ∂_l Γ^k_{ij}`.
    pub dgamma: Vec<Vec<Vec<Vec<f64>>>>,
    /// `√det g`.
    pub sqrt_det: f64,
}

impl MetricJet {
    fn at(chart: &ChartManifold, x: &[f64], env: &ParamEnv) -> Result<MetricJet> {
        chart.check_metric_at(x, env)?;
        let m = chart.dim();
        let coords = &chart.coords;
        let ev = |e: &Expr| -> Result<f64> { Ok(e.evaluate(x, env)?) };

        let g = chart.metric_at(x, env)?;
        let dg_exprs = chart.metric_derivs();
        let mut dg = vec![vec![vec![0.0; m]; m]; m];
        let mut d2g = vec![vec![vec![vec![0.0; m]; m]; m]; m];
        let mut d3g = vec![vec![vec![vec![vec![0.0; m]; m]; m]; m]; m];
        for k in 0..m {
            for i in 0..m {
                for j in 0..m {
                    dg[k][i][j] = ev(&dg_exprs[k][i][j])?;
                    for l in 0..m {
                        let e2 = dg_exprs[k][i][j].differentiate(&coords[l]);
                        d2g[k][l][i][j] = ev(&e2)?;
                        for n in 0..m {
                            d3g[k][l][n][i][j] = ev(&e2.differentiate(&coords[n]))?;
                        }
                    }
                }
            }
        }

        let inv_exprs = chart.inverse_metric_exprs();
        let mut g_inv = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                g_inv[i][j] = ev(&inv_exprs[i][j])?;
            }
        }

        let gamma_exprs = chart.christoffel_exprs();
        let dgamma_exprs = chart.christoffel_derivs();
        let mut gamma = vec![vec![vec![0.0; m]; m]; m];
        let mut dgamma = vec![vec![vec![vec![0.0; m]; m]; m]; m];
        for k in 0..m {
            for i in 0..m {
                for j in 0..m {
                    gamma[k][i][j] = ev(&gamma_exprs[k][i][j])?;
                    for l in 0..m {
                        dgamma[l][k][i][j] = ev(&dgamma_exprs[l][k][i][j])?;
                    }
                }
            }
        }

        let sqrt_det = ev(chart.sqrt_det_expr())?;
        Ok(MetricJet {
            point: x.to_vec(),
            g,
            dg,
            d2g,
            d3g,
            g_inv,
            gamma,
            dgamma,
            sqrt_det,
        })
    }
}

pub(crate) fn idx4(m: usize, a: usize, b: usize, c: usize, d: usize) -> usize {
    ((a * m + b) * m + c) * m + d
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Every coordinate reference must name a chart coordinate at its declared
/// index, so expressions cannot be evaluated against the wrong chart.
pub(crate) fn validate_coord_refs(e: &Expr, coords: &[String]) -> Result<()> {
    match e.node() {
        Node::Var { name, index } => {
            if coords.get(*index).map(|c| c.as_str()) != Some(name.as_ref()) {
                return Err(GeometryError::InvalidChart(format!(
                    "expression references coordinate `{name}` (index {index}) not declared by this chart"
                )));
            }
        }
        Node::Unary(_, u) | Node::Pow(u, _) => validate_coord_refs(u, coords)?,
        Node::Binary(_, a, b) => {
            validate_coord_refs(a, coords)?;
            validate_coord_refs(b, coords)?;
        }
        _ => {}
    }
    Ok(())
}

fn expand_metric(spec: &MetricSpec, m: usize) -> Result<Vec<Vec<Expr>>> {
    match spec {
        MetricSpec::Euclidean => {
            let mut g = vec![vec![Expr::zero(); m]; m];
            for (i, row) in g.iter_mut().enumerate() {
                row[i] = Expr::one();
            }
            Ok(g)
        }
        MetricSpec::Conformal(lam) => {
            let mut g = vec![vec![Expr::zero(); m]; m];
            for (i, row) in g.iter_mut().enumerate() {
                row[i] = lam.clone();
            }
            Ok(g)
        }
        MetricSpec::Matrix(rows) => {
            if rows.len() != m || rows.iter().any(|r| r.len() != m) {
                return Err(GeometryError::InvalidChart(format!(
                    "metric matrix must be {m}x{m}"
                )));
            }
            for i in 0..m {
                for j in (i + 1)..m {
                    if rows[i][j] != rows[j][i] {
                        return Err(GeometryError::InvalidChart(format!(
                            "metric matrix is not symmetric at ({i},{j})"
                        )));
                    }
                }
            }
            Ok(rows.clone())
        }
    }
}

/// Symbolic determinant by cofactor expansion along the first row.
fn sym_det(mat: &[Vec<Expr>]) -> Expr {
    let n = mat.len();
    if n == 1 {
        return mat[0][0].clone();
    }
    if n == 2 {
        return mat[0][0].mul(&mat[1][1]).sub(&mat[0][1].mul(&mat[1][0]));
    }
    let mut acc = Expr::zero();
    for j in 0..n {
        if mat[0][j].as_const() == Some(0.0) {
            continue;
        }
        let minor = sym_det(&strike(mat, 0, j));
        let term = mat[0][j].mul(&minor);
        acc = if j % 2 == 0 { acc.add(&term) } else { acc.sub(&term) };
    }
    acc
}

/// Copy of `mat` with row `r` and column `c` removed.
fn strike(mat: &[Vec<Expr>], r: usize, c: usize) -> Vec<Vec<Expr>> {
    mat.iter()
        .enumerate()
        .filter(|(i, _)| *i != r)
        .map(|(_, row)| {
            row.iter()
                .enumerate()
                .filter(|(j, _)| *j != c)
                .map(|(_, e)| e.clone())
                .collect()
        })
        .collect()
}

/// Numeric determinant via LU with partial pivoting (matrices here are at
/// most 5×5).
pub(crate) fn num_det(mat: &[Vec<f64>]) -> f64 {
    let n = mat.len();
    let mut a: Vec<Vec<f64>> = mat.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let (pivot, pval) = (col..n)
            .map(|r| (r, a[r][col].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        if pval == 0.0 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
            det = -det;
        }
        det *= a[col][col];
        for r in (col + 1)..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    det
}

/// Numeric inverse via Gauss-Jordan with partial pivoting. `None` when a
/// pivot vanishes.
pub(crate) fn num_inverse(mat: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = mat.len();
    let mut a = mat.to_vec();
    let mut inv = vec![vec![0.0; n]; n];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..n {
        let (pivot, pval) = (col..n)
            .map(|r| (r, a[r][col].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        if pval == 0.0 {
            return None;
        }
        a.swap(pivot, col);
        inv.swap(pivot, col);
        let d = a[col][col];
        for c in 0..n {
            a[col][c] /= d;
            inv[col][c] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r][col];
            if f == 0.0 {
                continue;
            }
            for c in 0..n {
                a[r][c] -= f * a[col][c];
                inv[r][c] -= f * inv[col][c];
            }
        }
    }
    Some(inv)
}

pub(crate) fn leading_minors_positive(mat: &[Vec<f64>]) -> bool {
    (1..=mat.len()).all(|k| {
        let sub: Vec<Vec<f64>> = mat[..k].iter().map(|row| row[..k].to_vec()).collect();
        num_det(&sub) > 0.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;

    fn env() -> ParamEnv {
        ParamEnv::new()
    }

    /// Conformal plane `e^{y/R}(dx² + dy²)` with `R = 1`.
    fn conformal_plane() -> ChartManifold {
        let lam = parse_expr("exp(y/R)", &["x", "y"]).unwrap();
        ChartManifold::conformal(
            vec!["x".into(), "y".into()],
            lam,
            vec![(-6.0, 6.0), (-2.0, 2.0)],
            None,
        )
        .unwrap()
    }

    fn hyperbolic_half_plane() -> ChartManifold {
        let lam = parse_expr("1/v^2", &["u", "v"]).unwrap();
        ChartManifold::conformal(
            vec!["u".into(), "v".into()],
            lam,
            vec![(-2.0, 2.0), (0.2, 4.0)],
            Some(Guard { expr: parse_expr("v", &["u", "v"]).unwrap(), margin: 0.1 }),
        )
        .unwrap()
    }

    fn sphere_chart() -> ChartManifold {
        let g22 = parse_expr("sin(theta)^2", &["theta", "psi"]).unwrap();
        ChartManifold::new(
            vec!["theta".into(), "psi".into()],
            MetricSpec::Matrix(vec![
                vec![Expr::one(), Expr::zero()],
                vec![Expr::zero(), g22],
            ]),
            vec![(0.3, 2.8), (0.0, 6.2)],
            None,
        )
        .unwrap()
    }

    fn r_env() -> ParamEnv {
        let mut e = ParamEnv::new();
        e.insert("R", 1.0);
        e
    }

    #[test]
    fn euclidean_christoffels_vanish() {
        let m = ChartManifold::euclidean(
            vec!["x1".into(), "x2".into(), "x3".into()],
            vec![(-1.0, 1.0); 3],
        )
        .unwrap();
        let c = m.christoffel(&[0.3, -0.2, 0.9], &env()).unwrap();
        for k in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(c.get(k, i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn conformal_plane_christoffels() {
        let m = conformal_plane();
        let c = m.christoffel(&[0.0, 0.0], &r_env()).unwrap();
        // λ = e^y: Γ^x_{xy} = 1/2, Γ^y_{xx} = −1/2, Γ^y_{yy} = 1/2.
        assert!((c.get(0, 0, 1) - 0.5).abs() < 1e-14);
        assert!((c.get(0, 1, 0) - 0.5).abs() < 1e-14);
        assert!((c.get(1, 0, 0) + 0.5).abs() < 1e-14);
        assert!((c.get(1, 1, 1) - 0.5).abs() < 1e-14);
        assert!(c.get(0, 0, 0).abs() < 1e-14);
        assert!(c.get(1, 0, 1).abs() < 1e-14);
    }

    #[test]
    fn hyperbolic_christoffels() {
        let m = hyperbolic_half_plane();
        let c = m.christoffel(&[0.0, 1.0], &env()).unwrap();
        assert!((c.get(0, 0, 1) + 1.0).abs() < 1e-14); // Γ^u_{uv} = −1
        assert!((c.get(1, 0, 0) - 1.0).abs() < 1e-14); // Γ^v_{uu} = 1
        assert!((c.get(1, 1, 1) + 1.0).abs() < 1e-14); // Γ^v_{vv} = −1
    }

    #[test]
    fn hyperbolic_sectional_curvature_is_minus_one() {
        let m = hyperbolic_half_plane();
        for p in m.sample_points(25, 7, &env()).unwrap() {
            let r = m.riemann(&p, &env()).unwrap();
            assert!(
                (r.sectional(0, 1) + 1.0).abs() < 1e-10,
                "K = {} at {p:?}",
                r.sectional(0, 1)
            );
        }
    }

    #[test]
    fn sphere_sectional_curvature_is_plus_one() {
        let m = sphere_chart();
        for p in m.sample_points(25, 8, &env()).unwrap() {
            let r = m.riemann(&p, &env()).unwrap();
            assert!(
                (r.sectional(0, 1) - 1.0).abs() < 1e-10,
                "K = {} at {p:?}",
                r.sectional(0, 1)
            );
        }
    }

    #[test]
    fn curvature_symmetries_hold() {
        for chart in [conformal_plane(), hyperbolic_half_plane(), sphere_chart()] {
            let env = r_env();
            for p in chart.sample_points(50, 11, &env).unwrap() {
                let r = chart.riemann(&p, &env).unwrap();
                let m = chart.dim();
                for a in 0..m {
                    for b in 0..m {
                        for c in 0..m {
                            for d in 0..m {
                                let v = r.low(a, b, c, d);
                                assert!((v + r.low(b, a, c, d)).abs() < 1e-10);
                                assert!((v + r.low(a, b, d, c)).abs() < 1e-10);
                                // First Bianchi identity.
                                let bianchi =
                                    v + r.low(a, c, d, b) + r.low(a, d, b, c);
                                assert!(bianchi.abs() < 1e-10);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn flat_charts_have_zero_riemann() {
        let m = ChartManifold::euclidean(vec!["x1".into(), "x2".into()], vec![(-1.0, 1.0); 2])
            .unwrap();
        for e in m.riemann_exprs() {
            assert_eq!(e.as_const(), Some(0.0));
        }
    }

    #[test]
    fn euclidean_gradient() {
        let m = ChartManifold::euclidean(vec!["x1".into(), "x2".into()], vec![(-3.0, 3.0); 2])
            .unwrap();
        let u = parse_expr("x1^2 + x2^2", &["x1", "x2"]).unwrap();
        let g = m.grad(&u, &[1.0, 2.0], &env()).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-14);
        assert!((g[1] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn laplacian_of_inverse_square_norm_in_r4() {
        let coords = ["x1", "x2", "x3", "x4"];
        let m = ChartManifold::euclidean(
            coords.iter().map(|s| s.to_string()).collect(),
            vec![(-2.0, 2.0); 4],
        )
        .unwrap();
        let u = parse_expr("(x1^2 + x2^2 + x3^2 + x4^2)^(-1)", &coords).unwrap();
        let v = m.laplace_beltrami(&u, &[1.0, 0.0, 0.0, 0.0], &env()).unwrap();
        assert!(v.abs() < 1e-12, "Δu = {v}");
    }

    #[test]
    fn hyperbolic_laplacian_of_log_v() {
        let m = hyperbolic_half_plane();
        let u = parse_expr("log(v)", &["u", "v"]).unwrap();
        let v = m.laplace_beltrami(&u, &[0.0, 1.0], &env()).unwrap();
        assert!((v + 1.0).abs() < 1e-12, "Δ log v = {v}");
    }

    #[test]
    fn conformal_2d_laplacian_scales_by_inverse_factor() {
        let m = conformal_plane();
        let flat = ChartManifold::euclidean(vec!["x".into(), "y".into()], vec![(-6.0, 6.0), (-2.0, 2.0)]).unwrap();
        let u = parse_expr("sin(x)*exp(y/3) + x^2*y", &["x", "y"]).unwrap();
        let env = r_env();
        for p in m.sample_points(50, 3, &env).unwrap() {
            let lam = (p[1]).exp();
            let a = m.laplace_beltrami(&u, &p, &env).unwrap();
            let b = flat.laplace_beltrami(&u, &p, &env).unwrap();
            assert!(
                (a - b / lam).abs() <= 1e-10 * b.abs().max(1.0),
                "at {p:?}: {a} vs {}",
                b / lam
            );
        }
    }

    #[test]
    fn volume_density_hyperbolic() {
        let m = hyperbolic_half_plane();
        let v = m.volume_density(&[0.0, 2.0], &env()).unwrap();
        assert!((v - 0.25).abs() < 1e-14);
    }

    #[test]
    fn conformal_rescale_scales_density_by_inverse_power() {
        let m = conformal_plane();
        let env = r_env();
        let f = parse_expr("exp(x/4 + y/5)", &["x", "y"]).unwrap();
        let rescaled = m.conformal_rescale(&f, &env).unwrap();
        for p in m.sample_points(20, 5, &env).unwrap() {
            let before = m.volume_density(&p, &env).unwrap();
            let after = rescaled.volume_density(&p, &env).unwrap();
            let fv = f.evaluate(&p, &env).unwrap();
            let expected = before * fv.powi(-(m.dim() as i32));
            assert!((after - expected).abs() <= 1e-12 * expected.abs());
        }
    }

    #[test]
    fn conformal_rescale_rejects_sign_changing_factor() {
        let m = ChartManifold::euclidean(vec!["x".into(), "y".into()], vec![(-1.0, 1.0); 2])
            .unwrap();
        let f = parse_expr("x", &["x", "y"]).unwrap();
        assert!(matches!(
            m.conformal_rescale(&f, &env()),
            Err(GeometryError::NonPositiveFactor { .. })
        ));
    }

    #[test]
    fn metric_jet_inverse_consistency() {
        for chart in [conformal_plane(), hyperbolic_half_plane(), sphere_chart()] {
            let env = r_env();
            for p in chart.sample_points(10, 13, &env).unwrap() {
                let jet = chart.metric_jet(&p, &env).unwrap();
                let m = chart.dim();
                for i in 0..m {
                    for j in 0..m {
                        let mut s = 0.0;
                        for k in 0..m {
                            s += jet.g_inv[i][k] * jet.g[k][j];
                        }
                        let want = if i == j { 1.0 } else { 0.0 };
                        assert!((s - want).abs() < 1e-12, "g·g⁻¹ at {p:?}");
                    }
                }
                // Γ symmetry and agreement with the point operation.
                let c = chart.christoffel(&p, &env).unwrap();
                for k in 0..m {
                    for i in 0..m {
                        for j in 0..m {
                            assert_eq!(jet.gamma[k][i][j], jet.gamma[k][j][i]);
                            assert_eq!(jet.gamma[k][i][j], c.get(k, i, j));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_respects_guard() {
        let m = hyperbolic_half_plane();
        let a = m.sample_points(40, 42, &env()).unwrap();
        let b = m.sample_points(40, 42, &env()).unwrap();
        assert_eq!(a, b);
        for p in &a {
            assert!(m.contains(p));
            assert!(p[1] >= 0.1);
        }
    }

    #[test]
    fn singular_metric_is_reported() {
        let g11 = parse_expr("x^2", &["x"]).unwrap();
        let m = ChartManifold::new(
            vec!["x".into()],
            MetricSpec::Matrix(vec![vec![g11]]),
            vec![(-1.0, 1.0)],
            None,
        )
        .unwrap();
        assert!(matches!(
            m.christoffel(&[0.0], &env()),
            Err(GeometryError::SingularMetric { .. })
        ));
    }

    #[test]
    fn non_diagonal_metric_inverse_is_correct() {
        let off = parse_expr("x/4", &["x", "y"]).unwrap();
        let m = ChartManifold::new(
            vec!["x".into(), "y".into()],
            MetricSpec::Matrix(vec![
                vec![Expr::number(2.0), off.clone()],
                vec![off, Expr::number(1.0)],
            ]),
            vec![(-1.0, 1.0); 2],
            None,
        )
        .unwrap();
        let env = env();
        for p in m.sample_points(20, 17, &env).unwrap() {
            let jet = m.metric_jet(&p, &env).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    let s: f64 = (0..2).map(|k| jet.g[i][k] * jet.g_inv[k][j]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((s - want).abs() < 1e-13);
                }
            }
        }
    }
}
