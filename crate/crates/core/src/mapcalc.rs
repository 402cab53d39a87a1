//! Operator calculus for maps between Riemannian charts.
//!
//! A [`MapProblem`] bundles a domain chart `(M, g)`, a target chart `(N, h)`,
//! map components `φ^a` written in domain coordinates, and a positive scalar
//! weight `f` on the domain. All tensor fields along the map live in the
//! pulled-back bundle `φ*TN`; a [`SectionField`] stores their target
//! components as expressions in domain coordinates.
//!
//! Operator conventions, matching the curvature and Laplacian conventions in
//! [`crate::geometry`]:
//!
//! * tension: `τ^a = g^{ij} (∂_i∂_jφ^a − Γ^k_{ij}(g) ∂_kφ^a +
//!   Γ^a_{bc}(h)∘φ ∂_iφ^b ∂_jφ^c)`, so the identity map of any chart has
//!   `τ = 0`;
//! * weighted tension: `τ_f = f τ + dφ(grad f)`;
//! * pullback connection: `(∇^φ_i V)^a = ∂_i V^a + Γ^a_{bc}(h)∘φ ∂_iφ^b V^c`;
//! * rough Laplacian: `Δ^φ V = g^{ij} (∇^φ_i ∇^φ_j V − Γ^k_{ij} ∇^φ_k V)`;
//! * curvature action: `[R(X, Y)Z]^a = R^a_{bcd} Z^b X^c Y^d`;
//! * Jacobi operator: `J(V) = −Δ^φ V + g^{ij} R(dφ_i, V) dφ_j`;
//! * bitension: `τ_2 = −J(τ)`;
//! * weighted bitension: `τ_{f,2} = −J(f τ)`, with the product-rule expansion
//!   `f τ_2 + (Δf) τ + 2 ∇^φ_{grad f} τ` kept as a second, independently
//!   assembled route;
//! * doubly weighted bitension: `τ_{2,f} = −f J(τ_f) + ∇^φ_{grad f} τ_f`.
//!
//! The scalar operators at the bottom mirror the same family for real-valued
//! functions: `Δ_f u = f Δu + g(grad f, grad u)`, its square `Δ_f(Δ_f u)`,
//! and `Δ(f Δu)`.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use thiserror::Error;

use crate::expr::{EvalError, Expr, ParamEnv};
use crate::geometry::{idx4, validate_coord_refs, ChartManifold, GeometryError};

#[derive(Debug, Clone, Error)]
pub enum MapError {
    #[error("invalid map problem: {0}")]
    Invalid(String),
    #[error("domain and target share the coordinate name `{0}`")]
    CoordinateClash(String),
    #[error("weight must be positive on the domain: value {value} at {point:?}")]
    NonPositiveWeight { point: Vec<f64>, value: f64 },
    #[error("map sends {point:?} to {image:?}, which leaves the target chart")]
    ImageOutsideTarget { point: Vec<f64>, image: Vec<f64> },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

type Result<T> = std::result::Result<T, MapError>;

/// A section of the pulled-back tangent bundle `φ*TN`: one expression per
/// target coordinate, each written in domain coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionField {
    components: Vec<Expr>,
}

impl SectionField {
    pub fn components(&self) -> &[Expr] {
        &self.components
    }

    pub fn component(&self, a: usize) -> &Expr {
        &self.components[a]
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }
}

/// The value of a section at one domain point.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionValue {
    pub point: Vec<f64>,
    pub components: Vec<f64>,
}

impl SectionValue {
    /// Euclidean norm of the raw components. For norms in the target metric
    /// use [`MapProblem::section_normsq_expr`].
    pub fn component_norm(&self) -> f64 {
        self.components.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A weighted map between two charts with cached symbolic operator fields.
#[derive(Debug, Clone)]
pub struct MapProblem {
    domain: ChartManifold,
    target: ChartManifold,
    map: Vec<Expr>,
    weight: Expr,
    dmap: OnceLock<Vec<Vec<Expr>>>,
    pulled_metric: OnceLock<Vec<Vec<Expr>>>,
    pulled_gamma: OnceLock<Vec<Vec<Vec<Expr>>>>,
    pulled_riemann: OnceLock<Vec<Expr>>,
    tension: OnceLock<SectionField>,
    f_tension: OnceLock<SectionField>,
    bitension: OnceLock<SectionField>,
    f_bitension: OnceLock<SectionField>,
    f_bitension_expanded: OnceLock<SectionField>,
    bi_f_tension: OnceLock<SectionField>,
}

const VALIDATION_PROBE_SEED: u64 = 0x5eed_ba5e;

impl MapProblem {
    /// Validates and assembles a problem. The parameter environment is used
    /// for spot checks: the weight must be positive and the map must land
    /// inside the target chart on 64 deterministic domain samples.
    pub fn new(
        domain: ChartManifold,
        target: ChartManifold,
        map: Vec<Expr>,
        weight: Expr,
        env: &ParamEnv,
    ) -> Result<MapProblem> {
        if map.len() != target.dim() {
            return Err(MapError::Invalid(format!(
                "map has {} components for a {}-dimensional target",
                map.len(),
                target.dim()
            )));
        }
        for c in domain.coords() {
            if target.coords().contains(c) {
                return Err(MapError::CoordinateClash(c.clone()));
            }
        }
        for comp in &map {
            validate_coord_refs(comp, domain.coords())?;
        }
        validate_coord_refs(&weight, domain.coords())?;

        let problem = MapProblem {
            domain,
            target,
            map,
            weight,
            dmap: OnceLock::new(),
            pulled_metric: OnceLock::new(),
            pulled_gamma: OnceLock::new(),
            pulled_riemann: OnceLock::new(),
            tension: OnceLock::new(),
            f_tension: OnceLock::new(),
            bitension: OnceLock::new(),
            f_bitension: OnceLock::new(),
            f_bitension_expanded: OnceLock::new(),
            bi_f_tension: OnceLock::new(),
        };
        problem.spot_check(env)?;
        Ok(problem)
    }

    fn spot_check(&self, env: &ParamEnv) -> Result<()> {
        let mut probes = self.domain.sample_points(64, VALIDATION_PROBE_SEED, env)?;
        let centre: Vec<f64> = self
            .domain
            .region()
            .iter()
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect();
        if self.domain.guard().is_none_or(|g| {
            g.expr
                .evaluate(&centre, env)
                .map(|v| v.abs() >= g.margin)
                .unwrap_or(false)
        }) {
            probes.push(centre);
        }
        for p in &probes {
            let w = self.weight.evaluate(p, env)?;
            if !w.is_finite() || w <= 0.0 {
                return Err(MapError::NonPositiveWeight { point: p.clone(), value: w });
            }
            let image = self.map_image(p, env)?;
            let clear_of_guard = match self.target.guard() {
                Some(g) => g.expr.evaluate(&image, env)?.abs() >= g.margin,
                None => true,
            };
            if !self.target.contains(&image) || !clear_of_guard {
                return Err(MapError::ImageOutsideTarget { point: p.clone(), image });
            }
            self.target.check_metric_at(&image, env)?;
        }
        Ok(())
    }

    pub fn domain(&self) -> &ChartManifold {
        &self.domain
    }

    pub fn target(&self) -> &ChartManifold {
        &self.target
    }

    pub fn map_exprs(&self) -> &[Expr] {
        &self.map
    }

    pub fn weight_expr(&self) -> &Expr {
        &self.weight
    }

    pub fn map_image(&self, x: &[f64], env: &ParamEnv) -> Result<Vec<f64>> {
        self.map
            .iter()
            .map(|c| c.evaluate(x, env).map_err(Into::into))
            .collect()
    }

    /// Wraps target components as a section after validating shape and
    /// coordinate references.
    pub fn section(&self, components: Vec<Expr>) -> Result<SectionField> {
        if components.len() != self.target.dim() {
            return Err(MapError::Invalid(format!(
                "section has {} components for a {}-dimensional target",
                components.len(),
                self.target.dim()
            )));
        }
        for c in &components {
            validate_coord_refs(c, self.domain.coords())?;
        }
        Ok(SectionField { components })
    }

    /// `∂_i φ^a`, indexed `[i][a]`.
    pub fn dmap_exprs(&self) -> &Vec<Vec<Expr>> {
        self.dmap.get_or_init(|| {
            self.domain
                .coords()
                .iter()
                .map(|xi| self.map.iter().map(|c| c.differentiate(xi)).collect())
                .collect()
        })
    }

    fn pullback_subs(&self) -> BTreeMap<String, Expr> {
        self.target
            .coords()
            .iter()
            .cloned()
            .zip(self.map.iter().cloned())
            .collect()
    }

    /// `h_{ab} ∘ φ` as expressions in domain coordinates.
    pub fn pulled_metric_exprs(&self) -> &Vec<Vec<Expr>> {
        self.pulled_metric.get_or_init(|| {
            let subs = self.pullback_subs();
            self.target
                .metric_exprs()
                .iter()
                .map(|row| row.iter().map(|e| e.substitute(&subs)).collect())
                .collect()
        })
    }

    /// `Γ^a_{bc}(h) ∘ φ`, indexed `[a][b][c]`.
    fn pulled_gamma_exprs(&self) -> &Vec<Vec<Vec<Expr>>> {
        self.pulled_gamma.get_or_init(|| {
            let subs = self.pullback_subs();
            self.target
                .christoffel_exprs()
                .iter()
                .map(|ga| {
                    ga.iter()
                        .map(|gb| gb.iter().map(|e| e.substitute(&subs)).collect())
                        .collect()
                })
                .collect()
        })
    }

    /// `R^a_{bcd}(h) ∘ φ`, flattened like the target's curvature table.
    fn pulled_riemann_exprs(&self) -> &Vec<Expr> {
        self.pulled_riemann.get_or_init(|| {
            let subs = self.pullback_subs();
            self.target
                .riemann_exprs()
                .iter()
                .map(|e| e.substitute(&subs))
                .collect()
        })
    }

    /// `(∇^φ_i V)^a = ∂_i V^a + Γ^a_{bc}∘φ ∂_iφ^b V^c`, indexed `[i][a]`.
    pub fn pullback_derivative_exprs(&self, v: &SectionField) -> Vec<Vec<Expr>> {
        let m = self.domain.dim();
        let n = self.target.dim();
        let dphi = self.dmap_exprs();
        let gamma = self.pulled_gamma_exprs();
        (0..m)
            .map(|i| {
                (0..n)
                    .map(|a| {
                        let mut terms =
                            vec![v.components[a].differentiate(&self.domain.coords()[i])];
                        for b in 0..n {
                            for c in 0..n {
                                if gamma[a][b][c].as_const() == Some(0.0) {
                                    continue;
                                }
                                terms.push(
                                    gamma[a][b][c].mul(&dphi[i][b]).mul(&v.components[c]),
                                );
                            }
                        }
                        Expr::sum(terms.iter())
                    })
                    .collect()
            })
            .collect()
    }

    /// `∇^φ_X V = X^i ∇^φ_i V` for a domain vector field `X`.
    pub fn directional_derivative_field(&self, v: &SectionField, x: &[Expr]) -> SectionField {
        assert_eq!(x.len(), self.domain.dim(), "direction has wrong dimension");
        let nabla = self.pullback_derivative_exprs(v);
        let comps = (0..self.target.dim())
            .map(|a| {
                let terms: Vec<Expr> =
                    (0..x.len()).map(|i| x[i].mul(&nabla[i][a])).collect();
                Expr::sum(terms.iter())
            })
            .collect();
        SectionField { components: comps }
    }

    /// Rough Laplacian on sections,
    /// `Δ^φ V = g^{ij} (∇^φ_i ∇^φ_j V − Γ^k_{ij} ∇^φ_k V)`.
    pub fn rough_laplacian_field(&self, v: &SectionField) -> SectionField {
        let m = self.domain.dim();
        let n = self.target.dim();
        let ginv = self.domain.inverse_metric_exprs();
        let gamma_dom = self.domain.christoffel_exprs();
        let dphi = self.dmap_exprs();
        let gamma_tgt = self.pulled_gamma_exprs();
        let first = self.pullback_derivative_exprs(v);
        let diagonal_domain = (0..m).all(|i| {
            (0..m).all(|j| i == j || ginv[i][j].as_const() == Some(0.0))
        });

        let comps = (0..n)
            .map(|a| {
                let mut terms = Vec::new();
                for i in 0..m {
                    for j in 0..m {
                        if diagonal_domain && i != j {
                            continue;
                        }
                        // (∇^φ_i (∇^φ V))_j^a, with the target correction on
                        // the section index and the domain correction on j.
                        let mut second =
                            vec![first[j][a].differentiate(&self.domain.coords()[i])];
                        for b in 0..n {
                            for c in 0..n {
                                if gamma_tgt[a][b][c].as_const() == Some(0.0) {
                                    continue;
                                }
                                second.push(
                                    gamma_tgt[a][b][c].mul(&dphi[i][b]).mul(&first[j][c]),
                                );
                            }
                        }
                        for k in 0..m {
                            if gamma_dom[k][i][j].as_const() == Some(0.0) {
                                continue;
                            }
                            second.push(gamma_dom[k][i][j].mul(&first[k][a]).neg());
                        }
                        terms.push(ginv[i][j].mul(&Expr::sum(second.iter())));
                    }
                }
                Expr::sum(terms.iter())
            })
            .collect();
        SectionField { components: comps }
    }

    /// `g^{ij} R(dφ_i, V) dφ_j` in the curvature convention of this crate:
    /// component `a` is `g^{ij} R^a_{bcd}∘φ (dφ_j)^b (dφ_i)^c V^d`.
    pub fn curvature_trace_field(&self, v: &SectionField) -> SectionField {
        let m = self.domain.dim();
        let n = self.target.dim();
        let ginv = self.domain.inverse_metric_exprs();
        let dphi = self.dmap_exprs();
        let riem = self.pulled_riemann_exprs();
        let diagonal_domain = (0..m).all(|i| {
            (0..m).all(|j| i == j || ginv[i][j].as_const() == Some(0.0))
        });

        let comps = (0..n)
            .map(|a| {
                let mut terms = Vec::new();
                for b in 0..n {
                    for c in 0..n {
                        for d in 0..n {
                            let r = &riem[idx4(n, a, b, c, d)];
                            if r.as_const() == Some(0.0) {
                                continue;
                            }
                            for i in 0..m {
                                for j in 0..m {
                                    if diagonal_domain && i != j {
                                        continue;
                                    }
                                    terms.push(
                                        ginv[i][j]
                                            .mul(r)
                                            .mul(&dphi[j][b])
                                            .mul(&dphi[i][c])
                                            .mul(&v.components[d]),
                                    );
                                }
                            }
                        }
                    }
                }
                Expr::sum(terms.iter())
            })
            .collect();
        SectionField { components: comps }
    }

    /// Jacobi operator `J(V) = −Δ^φ V + g^{ij} R(dφ_i, V) dφ_j`.
    pub fn jacobi_field(&self, v: &SectionField) -> SectionField {
        let lap = self.rough_laplacian_field(v);
        let tr = self.curvature_trace_field(v);
        let comps = lap
            .components
            .iter()
            .zip(&tr.components)
            .map(|(l, t)| t.sub(l))
            .collect();
        SectionField { components: comps }
    }

    fn neg_jacobi_field(&self, v: &SectionField) -> SectionField {
        let lap = self.rough_laplacian_field(v);
        let tr = self.curvature_trace_field(v);
        let comps = lap
            .components
            .iter()
            .zip(&tr.components)
            .map(|(l, t)| l.sub(t))
            .collect();
        SectionField { components: comps }
    }

    /// Tension field `τ(φ)`.
    pub fn tension_field(&self) -> &SectionField {
        self.tension.get_or_init(|| {
            let m = self.domain.dim();
            let n = self.target.dim();
            let ginv = self.domain.inverse_metric_exprs();
            let gamma_dom = self.domain.christoffel_exprs();
            let gamma_tgt = self.pulled_gamma_exprs();
            let dphi = self.dmap_exprs();
            let diagonal_domain = (0..m).all(|i| {
                (0..m).all(|j| i == j || ginv[i][j].as_const() == Some(0.0))
            });

            let comps = (0..n)
                .map(|a| {
                    let mut terms = Vec::new();
                    for i in 0..m {
                        for j in 0..m {
                            if diagonal_domain && i != j {
                                continue;
                            }
                            let mut local =
                                vec![dphi[j][a].differentiate(&self.domain.coords()[i])];
                            for k in 0..m {
                                if gamma_dom[k][i][j].as_const() == Some(0.0) {
                                    continue;
                                }
                                local.push(gamma_dom[k][i][j].mul(&dphi[k][a]).neg());
                            }
                            for b in 0..n {
                                for c in 0..n {
                                    if gamma_tgt[a][b][c].as_const() == Some(0.0) {
                                        continue;
                                    }
                                    local.push(
                                        gamma_tgt[a][b][c].mul(&dphi[i][b]).mul(&dphi[j][c]),
                                    );
                                }
                            }
                            terms.push(ginv[i][j].mul(&Expr::sum(local.iter())));
                        }
                    }
                    Expr::sum(terms.iter())
                })
                .collect();
            SectionField { components: comps }
        })
    }

    /// `dφ(X) = X^i ∂_iφ^a ∂_a` for a domain vector field `X`.
    pub fn push_forward_field(&self, x: &[Expr]) -> SectionField {
        assert_eq!(x.len(), self.domain.dim(), "vector field has wrong dimension");
        let dphi = self.dmap_exprs();
        let comps = (0..self.target.dim())
            .map(|a| {
                let terms: Vec<Expr> =
                    (0..x.len()).map(|i| x[i].mul(&dphi[i][a])).collect();
                Expr::sum(terms.iter())
            })
            .collect();
        SectionField { components: comps }
    }

    /// Weighted tension `τ_f = f τ + dφ(grad f)`.
    pub fn f_tension_field(&self) -> &SectionField {
        self.f_tension.get_or_init(|| {
            let tau = self.tension_field();
            let grad_f = self.domain.grad_exprs(&self.weight);
            let push = self.push_forward_field(&grad_f);
            let comps = tau
                .components
                .iter()
                .zip(&push.components)
                .map(|(t, p)| self.weight.mul(t).add(p))
                .collect();
            SectionField { components: comps }
        })
    }

    /// Bitension `τ_2 = Δ^φ τ − g^{ij} R(dφ_i, τ) dφ_j = −J(τ)`.
    pub fn bitension_field(&self) -> &SectionField {
        self.bitension
            .get_or_init(|| self.neg_jacobi_field(self.tension_field()))
    }

    /// Weighted bitension `τ_{f,2} = Δ^φ(f τ) − g^{ij} R(dφ_i, f τ) dφ_j`,
    /// assembled directly from the weighted tension `f τ`.
    pub fn f_bitension_field(&self) -> &SectionField {
        self.f_bitension.get_or_init(|| {
            let tau = self.tension_field();
            let f_tau = SectionField {
                components: tau.components.iter().map(|t| self.weight.mul(t)).collect(),
            };
            self.neg_jacobi_field(&f_tau)
        })
    }

    /// The same operator assembled through the product rule:
    /// `f τ_2 + (Δf) τ + 2 ∇^φ_{grad f} τ`. Kept as a separate construction
    /// so the two routes can be compared numerically.
    pub fn f_bitension_expanded_field(&self) -> &SectionField {
        self.f_bitension_expanded.get_or_init(|| {
            let tau = self.tension_field();
            let tau2 = self.bitension_field();
            let lap_f = self.domain.laplace_beltrami_expr(&self.weight);
            let grad_f = self.domain.grad_exprs(&self.weight);
            let nabla_grad_f = self.directional_derivative_field(tau, &grad_f);
            let comps = (0..self.target.dim())
                .map(|a| {
                    self.weight
                        .mul(&tau2.components[a])
                        .add(&lap_f.mul(&tau.components[a]))
                        .add(&Expr::number(2.0).mul(&nabla_grad_f.components[a]))
                })
                .collect();
            SectionField { components: comps }
        })
    }

    /// Doubly weighted bitension `τ_{2,f} = −f J(τ_f) + ∇^φ_{grad f} τ_f`.
    pub fn bi_f_tension_field(&self) -> &SectionField {
        self.bi_f_tension.get_or_init(|| {
            let tau_f = self.f_tension_field().clone();
            let neg_j = self.neg_jacobi_field(&tau_f);
            let grad_f = self.domain.grad_exprs(&self.weight);
            let nabla = self.directional_derivative_field(&tau_f, &grad_f);
            let comps = (0..self.target.dim())
                .map(|a| {
                    self.weight
                        .mul(&neg_j.components[a])
                        .add(&nabla.components[a])
                })
                .collect();
            SectionField { components: comps }
        })
    }

    /// `h(V, W) ∘ φ` for two sections.
    pub fn section_pairing_expr(&self, v: &SectionField, w: &SectionField) -> Expr {
        let n = self.target.dim();
        let h = self.pulled_metric_exprs();
        let mut terms = Vec::new();
        for a in 0..n {
            for b in 0..n {
                if h[a][b].as_const() == Some(0.0) {
                    continue;
                }
                terms.push(h[a][b].mul(&v.components[a]).mul(&w.components[b]));
            }
        }
        Expr::sum(terms.iter())
    }

    /// `|V|²_h ∘ φ`.
    pub fn section_normsq_expr(&self, v: &SectionField) -> Expr {
        self.section_pairing_expr(v, v)
    }

    /// `|dφ|² = g^{ij} h_{ab}∘φ ∂_iφ^a ∂_jφ^b`.
    pub fn dmap_normsq_expr(&self) -> Expr {
        let m = self.domain.dim();
        let n = self.target.dim();
        let ginv = self.domain.inverse_metric_exprs();
        let h = self.pulled_metric_exprs();
        let dphi = self.dmap_exprs();
        let mut terms = Vec::new();
        for i in 0..m {
            for j in 0..m {
                if ginv[i][j].as_const() == Some(0.0) {
                    continue;
                }
                for a in 0..n {
                    for b in 0..n {
                        if h[a][b].as_const() == Some(0.0) {
                            continue;
                        }
                        terms.push(
                            ginv[i][j].mul(&h[a][b]).mul(&dphi[i][a]).mul(&dphi[j][b]),
                        );
                    }
                }
            }
        }
        Expr::sum(terms.iter())
    }

    /// `|∇^φ V|² = g^{ij} h_{ab}∘φ (∇^φ_i V)^a (∇^φ_j V)^b`.
    pub fn pullback_derivative_normsq_expr(&self, v: &SectionField) -> Expr {
        let m = self.domain.dim();
        let n = self.target.dim();
        let ginv = self.domain.inverse_metric_exprs();
        let h = self.pulled_metric_exprs();
        let nabla = self.pullback_derivative_exprs(v);
        let mut terms = Vec::new();
        for i in 0..m {
            for j in 0..m {
                if ginv[i][j].as_const() == Some(0.0) {
                    continue;
                }
                for a in 0..n {
                    for b in 0..n {
                        if h[a][b].as_const() == Some(0.0) {
                            continue;
                        }
                        terms.push(
                            ginv[i][j].mul(&h[a][b]).mul(&nabla[i][a]).mul(&nabla[j][b]),
                        );
                    }
                }
            }
        }
        Expr::sum(terms.iter())
    }

    // ----- numeric point evaluation -----

    fn eval_section(&self, f: &SectionField, x: &[f64], env: &ParamEnv) -> Result<SectionValue> {
        self.domain.check_metric_at(x, env)?;
        let components = f
            .components
            .iter()
            .map(|e| e.evaluate(x, env))
            .collect::<std::result::Result<Vec<f64>, _>>()?;
        Ok(SectionValue { point: x.to_vec(), components })
    }

    pub fn tension(&self, x: &[f64], env: &ParamEnv) -> Result<SectionValue> {
        self.eval_section(&self.tension_field().clone(), x, env)
    }

    pub fn f_tension(&self, x: &[f64], env: &ParamEnv) -> Result<SectionValue> {
        self.eval_section(&self.f_tension_field().clone(), x, env)
    }

    pub fn bitension(&self, x: &[f64], env: &ParamEnv) -> Result<SectionValue> {
        self.eval_section(&self.bitension_field().clone(), x, env)
    }

    pub fn f_bitension(&self, x: &[f64], env: &ParamEnv) -> Result<SectionValue> {
        self.eval_section(&self.f_bitension_field().clone(), x, env)
    }

    pub fn bi_f_tension(&self, x: &[f64], env: &ParamEnv) -> Result<SectionValue> {
        self.eval_section(&self.bi_f_tension_field().clone(), x, env)
    }

    pub fn jacobi(&self, v: &SectionField, x: &[f64], env: &ParamEnv) -> Result<SectionValue> {
        let field = self.jacobi_field(v);
        self.eval_section(&field, x, env)
    }

    pub fn rough_laplacian(
        &self,
        v: &SectionField,
        x: &[f64],
        env: &ParamEnv,
    ) -> Result<SectionValue> {
        let field = self.rough_laplacian_field(v);
        self.eval_section(&field, x, env)
    }

    /// Numeric `(∇^φ_i V)^a`, indexed `[i][a]`.
    pub fn pullback_derivative(
        &self,
        v: &SectionField,
        x: &[f64],
        env: &ParamEnv,
    ) -> Result<Vec<Vec<f64>>> {
        self.domain.check_metric_at(x, env)?;
        self.pullback_derivative_exprs(v)
            .iter()
            .map(|row| {
                row.iter()
                    .map(|e| e.evaluate(x, env).map_err(Into::into))
                    .collect()
            })
            .collect()
    }

    /// Target-metric norm of a section value, evaluated at its own point.
    pub fn section_norm(&self, v: &SectionValue, env: &ParamEnv) -> Result<f64> {
        let n = self.target.dim();
        let h = self.pulled_metric_exprs();
        let mut s = 0.0;
        for a in 0..n {
            for b in 0..n {
                if h[a][b].as_const() == Some(0.0) {
                    continue;
                }
                s += h[a][b].evaluate(&v.point, env)? * v.components[a] * v.components[b];
            }
        }
        Ok(s.max(0.0).sqrt())
    }
}

// ----- scalar operator family -----

/// `Δ_f u = f Δu + g(grad f, grad u)`.
pub fn f_laplacian_expr(chart: &ChartManifold, f: &Expr, u: &Expr) -> Expr {
    f.mul(&chart.laplace_beltrami_expr(u))
        .add(&chart.grad_pairing_expr(f, u))
}

/// `Δ_f(Δ_f u)`, the square of the weighted Laplacian.
pub fn bi_f_laplacian_expr(chart: &ChartManifold, f: &Expr, u: &Expr) -> Expr {
    let inner = f_laplacian_expr(chart, f, u);
    f_laplacian_expr(chart, f, &inner)
}

/// `Δ(f Δu)`.
pub fn f_bi_laplacian_expr(chart: &ChartManifold, f: &Expr, u: &Expr) -> Expr {
    chart.laplace_beltrami_expr(&f.mul(&chart.laplace_beltrami_expr(u)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;
    use crate::geometry::MetricSpec;

    fn env() -> ParamEnv {
        ParamEnv::new()
    }

    fn flat(coords: &[&str], lo: f64, hi: f64) -> ChartManifold {
        ChartManifold::euclidean(
            coords.iter().map(|s| s.to_string()).collect(),
            vec![(lo, hi); coords.len()],
        )
        .unwrap()
    }

    /// `(x, y) ↦ (cos x, sin x, y)` into flat 3-space, weight `e^{−y}`.
    fn cylinder_problem(weight: &str) -> MapProblem {
        let domain = flat(&["x", "y"], -6.0, 6.0);
        let target = flat(&["p", "q", "r"], -8.0, 8.0);
        let map = vec![
            parse_expr("cos(x)", &["x", "y"]).unwrap(),
            parse_expr("sin(x)", &["x", "y"]).unwrap(),
            parse_expr("y", &["x", "y"]).unwrap(),
        ];
        let w = parse_expr(weight, &["x", "y"]).unwrap();
        MapProblem::new(domain, target, map, w, &env()).unwrap()
    }

    fn inversion_problem(m: usize) -> MapProblem {
        let names: Vec<String> = (1..=m).map(|i| format!("x{i}")).collect();
        let tnames: Vec<String> = (1..=m).map(|i| format!("y{i}")).collect();
        let coord_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        let rsq = names
            .iter()
            .map(|n| format!("{n}^2"))
            .collect::<Vec<_>>()
            .join(" + ");
        let guard = crate::geometry::Guard {
            expr: parse_expr(&rsq, &coord_refs).unwrap(),
            margin: 0.25,
        };
        let domain = ChartManifold::new(
            names.clone(),
            MetricSpec::Euclidean,
            vec![(-2.0, 2.0); m],
            Some(guard),
        )
        .unwrap();
        let target = ChartManifold::euclidean(tnames, vec![(-5.0, 5.0); m]).unwrap();
        let map = names
            .iter()
            .map(|n| parse_expr(&format!("{n} / ({rsq})"), &coord_refs).unwrap())
            .collect();
        MapProblem::new(domain, target, map, Expr::one(), &env()).unwrap()
    }

    #[test]
    fn identity_maps_are_harmonic() {
        let hyper = ChartManifold::conformal(
            vec!["u".into(), "v".into()],
            parse_expr("1/v^2", &["u", "v"]).unwrap(),
            vec![(-2.0, 2.0), (0.3, 3.0)],
            None,
        )
        .unwrap();
        let target = ChartManifold::conformal(
            vec!["s".into(), "t".into()],
            parse_expr("1/t^2", &["s", "t"]).unwrap(),
            vec![(-2.5, 2.5), (0.2, 3.5)],
            None,
        )
        .unwrap();
        let map = vec![
            parse_expr("u", &["u", "v"]).unwrap(),
            parse_expr("v", &["u", "v"]).unwrap(),
        ];
        let p = MapProblem::new(hyper, target, map, Expr::one(), &env()).unwrap();
        for x in p.domain().sample_points(20, 3, &env()).unwrap() {
            let tau = p.tension(&x, &env()).unwrap();
            for c in tau.components {
                assert!(c.abs() < 1e-12, "τ = {c} at {x:?}");
            }
        }
    }

    #[test]
    fn cylinder_tension_and_weighted_tension() {
        let p = cylinder_problem("exp(-y)");
        let x = [0.7, -0.4];
        let tau = p.tension(&x, &env()).unwrap();
        assert!((tau.components[0] + x[0].cos()).abs() < 1e-14);
        assert!((tau.components[1] + x[0].sin()).abs() < 1e-14);
        assert!(tau.components[2].abs() < 1e-14);

        // τ_f = e^{−y} (−cos x, −sin x, −1).
        let tf = p.f_tension(&x, &env()).unwrap();
        let e = (-x[1]).exp();
        assert!((tf.components[0] + e * x[0].cos()).abs() < 1e-14);
        assert!((tf.components[1] + e * x[0].sin()).abs() < 1e-14);
        assert!((tf.components[2] + e).abs() < 1e-14);

        let nsq = p.dmap_normsq_expr().evaluate(&x, &env()).unwrap();
        assert!((nsq - 2.0).abs() < 1e-14);
    }

    #[test]
    fn cylinder_is_f_biharmonic_for_exponential_weight() {
        let p = cylinder_problem("exp(-y)");
        for x in p.domain().sample_points(25, 5, &env()).unwrap() {
            let a = p.f_bitension(&x, &env()).unwrap();
            let b = p
                .eval_section(&p.f_bitension_expanded_field().clone(), &x, &env())
                .unwrap();
            for (va, vb) in a.components.iter().zip(&b.components) {
                assert!(va.abs() < 1e-10, "definition route: {va} at {x:?}");
                assert!(vb.abs() < 1e-10, "product-rule route: {vb} at {x:?}");
            }
        }
    }

    #[test]
    fn conformal_domain_makes_cylinder_biharmonic() {
        let domain = ChartManifold::conformal(
            vec!["x".into(), "y".into()],
            parse_expr("exp(y)", &["x", "y"]).unwrap(),
            vec![(-6.0, 6.0), (-2.0, 2.0)],
            None,
        )
        .unwrap();
        let target = flat(&["p", "q", "r"], -8.0, 8.0);
        let map = vec![
            parse_expr("cos(x)", &["x", "y"]).unwrap(),
            parse_expr("sin(x)", &["x", "y"]).unwrap(),
            parse_expr("y", &["x", "y"]).unwrap(),
        ];
        let p = MapProblem::new(domain, target, map, Expr::one(), &env()).unwrap();
        for x in p.domain().sample_points(25, 9, &env()).unwrap() {
            let tau = p.tension(&x, &env()).unwrap();
            // τ = −e^{−y} (cos x, sin x, 0): not harmonic.
            let e = (-x[1]).exp();
            assert!((tau.components[0] + e * x[0].cos()).abs() < 1e-12);
            assert!((tau.components[1] + e * x[0].sin()).abs() < 1e-12);
            let tau2 = p.bitension(&x, &env()).unwrap();
            for c in tau2.components {
                assert!(c.abs() < 1e-10, "τ₂ = {c} at {x:?}");
            }
        }
    }

    #[test]
    fn quartic_line_map_has_constant_bitension() {
        let domain = flat(&["x"], -2.0, 2.0);
        let target = flat(&["w"], -20.0, 20.0);
        let map = vec![parse_expr("x^4", &["x"]).unwrap()];
        let p = MapProblem::new(domain, target, map, Expr::one(), &env()).unwrap();
        let tau2 = p.bitension(&[0.37], &env()).unwrap();
        assert!((tau2.components[0] - 24.0).abs() < 1e-12);
    }

    #[test]
    fn inversion_tension_and_bitension_profiles() {
        for m in [3usize, 4, 5] {
            let p = inversion_problem(m);
            for x in p.domain().sample_points(15, 21, &env()).unwrap() {
                let rsq: f64 = x.iter().map(|v| v * v).sum();
                let tau = p.tension(&x, &env()).unwrap();
                let tau2 = p.bitension(&x, &env()).unwrap();
                for a in 0..m {
                    // τ^a = −2(m−2) x_a / |x|⁴.
                    let want = -2.0 * (m as f64 - 2.0) * x[a] / rsq.powi(2);
                    assert!(
                        (tau.components[a] - want).abs() < 1e-9 * want.abs().max(1.0),
                        "m={m}: τ^{a} = {} want {want}",
                        tau.components[a]
                    );
                    // τ₂^a = 8(m−2)(m−4) x_a / |x|⁶.
                    let want2 =
                        8.0 * (m as f64 - 2.0) * (m as f64 - 4.0) * x[a] / rsq.powi(3);
                    assert!(
                        (tau2.components[a] - want2).abs()
                            < 1e-8 * want2.abs().max(1.0),
                        "m={m}: τ₂^{a} = {} want {want2}",
                        tau2.components[a]
                    );
                }
            }
        }
    }

    #[test]
    fn jacobi_of_transverse_field_along_equator() {
        let domain = flat(&["t"], -3.0, 3.0);
        let g22 = parse_expr("sin(theta)^2", &["theta", "psi"]).unwrap();
        let target = ChartManifold::new(
            vec!["theta".into(), "psi".into()],
            MetricSpec::Matrix(vec![
                vec![Expr::one(), Expr::zero()],
                vec![Expr::zero(), g22],
            ]),
            vec![(0.3, 2.8), (-4.0, 4.0)],
            None,
        )
        .unwrap();
        let map = vec![
            parse_expr("1.5707963267948966", &["t"]).unwrap(),
            parse_expr("t", &["t"]).unwrap(),
        ];
        let p = MapProblem::new(domain, target, map, Expr::one(), &env()).unwrap();

        // The equator is a geodesic.
        let tau = p.tension(&[0.4], &env()).unwrap();
        assert!(tau.components[0].abs() < 1e-12);
        assert!(tau.components[1].abs() < 1e-12);

        // For the constant transverse field V = ∂_θ the rough Laplacian
        // vanishes and the curvature trace gives R^θ_{ψψθ} = −sin²θ = −1.
        let v = p.section(vec![Expr::one(), Expr::zero()]).unwrap();
        let j = p.jacobi(&v, &[0.4], &env()).unwrap();
        assert!((j.components[0] + 1.0).abs() < 1e-12, "J(V)^θ = {}", j.components[0]);
        assert!(j.components[1].abs() < 1e-12);
    }

    #[test]
    fn pullback_derivative_matches_partial_for_flat_target() {
        let p = cylinder_problem("exp(-y)");
        let tau = p.tension_field().clone();
        let x = [1.1, 0.3];
        let nabla = p.pullback_derivative(&tau, &x, &env()).unwrap();
        // Flat target: ∇^φ_x τ = ∂_x τ = (sin x, −cos x, 0).
        assert!((nabla[0][0] - x[0].sin()).abs() < 1e-14);
        assert!((nabla[0][1] + x[0].cos()).abs() < 1e-14);
        assert!(nabla[0][2].abs() < 1e-14);
        assert!(nabla[1][0].abs() < 1e-14);
    }

    #[test]
    fn unit_weight_degenerates_to_unweighted_operators() {
        let p = cylinder_problem("1");
        for x in p.domain().sample_points(10, 31, &env()).unwrap() {
            let tau = p.tension(&x, &env()).unwrap();
            let tf = p.f_tension(&x, &env()).unwrap();
            let tau2 = p.bitension(&x, &env()).unwrap();
            let tf2 = p.f_bitension(&x, &env()).unwrap();
            let t2f = p.bi_f_tension(&x, &env()).unwrap();
            for a in 0..3 {
                assert!((tau.components[a] - tf.components[a]).abs() < 1e-12);
                assert!((tau2.components[a] - tf2.components[a]).abs() < 1e-12);
                assert!((tau2.components[a] - t2f.components[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weighted_bitension_routes_agree_on_curved_target() {
        let domain = flat(&["t", "s"], -1.0, 1.0);
        let lam = parse_expr("1/w2^2", &["w1", "w2"]).unwrap();
        let target = ChartManifold::conformal(
            vec!["w1".into(), "w2".into()],
            lam,
            vec![(-4.0, 4.0), (0.05, 6.0)],
            None,
        )
        .unwrap();
        let map = vec![
            parse_expr("t + s/2", &["t", "s"]).unwrap(),
            parse_expr("2 + sin(t)*0.3 + s^2*0.2", &["t", "s"]).unwrap(),
        ];
        let w = parse_expr("exp(t/3 + s/5)", &["t", "s"]).unwrap();
        let p = MapProblem::new(domain, target, map, w, &env()).unwrap();
        for x in p.domain().sample_points(20, 41, &env()).unwrap() {
            let a = p.f_bitension(&x, &env()).unwrap();
            let b = p
                .eval_section(&p.f_bitension_expanded_field().clone(), &x, &env())
                .unwrap();
            for (va, vb) in a.components.iter().zip(&b.components) {
                let scale = va.abs().max(vb.abs()).max(1.0);
                assert!((va - vb).abs() < 1e-10 * scale, "{va} vs {vb} at {x:?}");
            }
        }
    }

    #[test]
    fn scalar_weighted_laplacian_fixtures() {
        let chart = ChartManifold::euclidean(vec!["x".into()], vec![(0.25, 3.0)]).unwrap();
        let x = parse_expr("x", &["x"]).unwrap();

        // Δ_f(x²) with f = x is 4x.
        let u = parse_expr("x^2", &["x"]).unwrap();
        let lf = f_laplacian_expr(&chart, &x, &u);
        assert!((lf.evaluate(&[1.0], &env()).unwrap() - 4.0).abs() < 1e-12);
        assert!((lf.evaluate(&[2.0], &env()).unwrap() - 8.0).abs() < 1e-12);

        // Δ(f Δu) with u = x⁴, f = x² is Δ(12x⁴) = 144x².
        let u4 = parse_expr("x^4", &["x"]).unwrap();
        let f2 = parse_expr("x^2", &["x"]).unwrap();
        let lf2 = f_bi_laplacian_expr(&chart, &f2, &u4);
        assert!((lf2.evaluate(&[1.0], &env()).unwrap() - 144.0).abs() < 1e-12);

        // Δ_f(Δ_f u) with u = x, f = 1 + x² is 4x.
        let f3 = parse_expr("1 + x^2", &["x"]).unwrap();
        let lf3 = bi_f_laplacian_expr(&chart, &f3, &x);
        assert!((lf3.evaluate(&[1.0], &env()).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn line_map_bi_f_tension_matches_scalar_operator() {
        // φ(x) = x into the line, weight 1 + x²: the doubly weighted
        // bitension of a real-valued map reduces to Δ_f(Δ_f u).
        let domain = flat(&["x"], -2.0, 2.0);
        let target = flat(&["w"], -3.0, 3.0);
        let map = vec![parse_expr("x", &["x"]).unwrap()];
        let f = parse_expr("1 + x^2", &["x"]).unwrap();
        let p = MapProblem::new(domain, target, map, f.clone(), &env()).unwrap();
        let scalar = bi_f_laplacian_expr(p.domain(), &f, &parse_expr("x", &["x"]).unwrap());
        for x in [-1.5, -0.4, 0.0, 0.8, 1.0] {
            let t2f = p.bi_f_tension(&[x], &env()).unwrap();
            let want = scalar.evaluate(&[x], &env()).unwrap();
            assert!(
                (t2f.components[0] - want).abs() < 1e-11 * want.abs().max(1.0),
                "τ_{{2,f}} = {} vs Δ_f² = {want} at {x}",
                t2f.components[0]
            );
        }
        let at_one = p.bi_f_tension(&[1.0], &env()).unwrap();
        assert!((at_one.components[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn coordinate_clash_is_rejected() {
        let domain = flat(&["x", "y"], -1.0, 1.0);
        let target = flat(&["x", "q"], -9.0, 9.0);
        let map = vec![
            parse_expr("x", &["x", "y"]).unwrap(),
            parse_expr("y", &["x", "y"]).unwrap(),
        ];
        assert!(matches!(
            MapProblem::new(domain, target, map, Expr::one(), &env()),
            Err(MapError::CoordinateClash(_))
        ));
    }

    #[test]
    fn non_positive_weight_is_rejected() {
        let domain = flat(&["x"], -1.0, 1.0);
        let target = flat(&["w"], -2.0, 2.0);
        let map = vec![parse_expr("x", &["x"]).unwrap()];
        let w = parse_expr("x", &["x"]).unwrap();
        assert!(matches!(
            MapProblem::new(domain, target, map, w, &env()),
            Err(MapError::NonPositiveWeight { .. })
        ));
    }

    #[test]
    fn image_outside_target_is_rejected() {
        let domain = flat(&["x"], -1.0, 1.0);
        let target = flat(&["w"], -0.5, 0.5);
        let map = vec![parse_expr("2*x", &["x"]).unwrap()];
        assert!(matches!(
            MapProblem::new(domain, target, map, Expr::one(), &env()),
            Err(MapError::ImageOutsideTarget { .. })
        ));
    }

    #[test]
    fn section_shape_is_validated() {
        let p = cylinder_problem("1");
        assert!(p.section(vec![Expr::one(), Expr::zero()]).is_err());
        assert!(p
            .section(vec![Expr::one(), Expr::zero(), Expr::zero()])
            .is_ok());
    }
}
