//! The identity catalogue and its verification engine.
//!
//! Each [`IdentityId`] names either an equality between two independently
//! assembled operator expressions or a pointwise inequality. [`verify`]
//! samples the identity at deterministic points of the domain chart, records
//! per-sample residuals and renders a [`VerificationReport`].
//!
//! The two sides of every equality are built through *disjoint* pipelines —
//! e.g. the doubly weighted bitension on the original chart versus the
//! weighted bitension on a conformally rescaled chart — so a sign or factor
//! mistake in either pipeline shows up as a nonzero residual instead of
//! cancelling silently.
//!
//! The module also ships a finite-difference oracle ([`fd_oracle`]) that
//! recomputes the first-order operators purely from pointwise evaluation of
//! the metric, map, and weight — never from symbolic differentiation — so the
//! symbolic derivative stack can be cross-checked against an independent
//! numerical route.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::expr::{EvalError, Expr, ParamEnv, Program, Rational};
use crate::geometry::{self, ChartManifold, GeometryError};
use crate::mapcalc::{bi_f_laplacian_expr, f_bi_laplacian_expr, MapError, MapProblem, SectionField};
use crate::problems::EntryFlags;

type Result<T, E = IdentityError> = std::result::Result<T, E>;

/// Default step for the finite-difference oracle. Second-order central
/// differences balance truncation (`O(step^2)`) against roundoff
/// (`O(eps/step^2)`); `1e-4` puts both near `1e-8` for well-scaled data.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Steps below this make the roundoff term `eps/step^2` exceed `1e-2`; the
/// oracle still answers but attaches a warning.
const FD_STEP_WARNING_FLOOR: f64 = 1e-8;

/// Squared-norm gate for [`IdentityId::WeightedSubharmonicity`]: samples with
/// `|V|^2` at or below this (i.e. `|V| <= 1e-6`) are skipped, since the norm
/// is not differentiable at its zeros.
const SMALL_SECTION_FLOOR: f64 = 1e-12;

/// Regularisation offsets checked by [`IdentityId::RegularizedNorm`].
const REGULARIZATIONS: [f64; 3] = [1.0, 1e-2, 1e-4];

/// At most this many per-sample evaluation failures are spelled out in a
/// report; the rest are summarised in one trailing line.
const MAX_REPORTED_ERRORS: usize = 8;

const PROBE_SECTION_SALT: u64 = 0x90be_5ec7;
const PROBE_FACTOR_SALT: u64 = 0x90be_fac7;

#[derive(Debug, Error)]
pub enum IdentityError {
    /// The identity's hypotheses fail for this problem. The reason names the
    /// violated predicate.
    #[error("identity {identity} does not apply: {reason}")]
    Inapplicable {
        identity: &'static str,
        reason: String,
    },
    #[error("unknown identity `{0}`")]
    UnknownIdentity(String),
    #[error("finite-difference oracle: {0}")]
    Oracle(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Whether an identity asserts an equality of two expressions or a one-sided
/// bound on a single expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityKind {
    Equality,
    Inequality,
}

/// The catalogue. Variant names describe the mathematical content; the
/// stable string keys used on the command line and in reports come from
/// [`IdentityId::name`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IdentityId {
    /// `τ_{2,f}(φ; g) = f^{m/(m-2)} · τ_{f̄,2}(φ; ḡ)` with `ḡ = f^{2/(m-2)} g`
    /// and `f̄ = f^{m/(m-2)}`; the right side assembled by the definition
    /// route `-f̄·J_ḡ(τ_{f̄}) ... = -J_ḡ(f̄ τ_ḡ)`.
    ConformalBitension,
    /// `τ(φ; ḡ) = F²(τ(φ; g) - (m-2)·dφ(grad_g ln F))` for `ḡ = F^{-2} g`,
    /// checked with a seeded positive probe factor `F`.
    ConformalTension,
    /// `τ_f(φ; g) = f^{m/(m-2)} · τ(φ; ḡ)` with `ḡ = f^{2/(m-2)} g`.
    ConformalFTension,
    /// `J_g(X) = f^{2/(m-2)} J_ḡ(X) + f^{-1} ∇^φ_{grad_g f} X` for a seeded
    /// probe section `X`.
    ConformalJacobi,
    /// `J(fX) = f·J(X) - (Δf)·X - 2∇^φ_{grad f} X` for a seeded probe `X`.
    JacobiProduct,
    /// Same statement as [`IdentityId::ConformalBitension`], but the right
    /// side assembled by the product-rule expansion
    /// `f̄ τ_2 + (Δf̄) τ + 2∇^φ_{grad f̄} τ` instead of the definition.
    ConformalBitensionExpanded,
    /// Scalar reduction: `Δ_f² u = f^{m/(m-2)} · Δ̄(f^{m/(m-2)} Δ̄ u)` on the
    /// rescaled chart, for real-valued `u` on a flat line target.
    ScalarConformalReduction,
    /// `½ Δ|V|² = |∇^φ V|² + ⟨Δ^φ V, V⟩` with `V = τ_f`.
    Weitzenbock,
    /// `div Y = |τ_f|² + ⟨f dφ, ∇^φ τ_f⟩` for the 1-form
    /// `Y_j = f ⟨dφ_j, τ_f⟩` raised by the domain metric.
    StressDivergence,
    /// `Δ(|V|²+ε)^{1/2} = (|V|²+ε)^{-3/2} ( ½(|V|²+ε)Δ|V|² - ¼|∇|V|²|² )`
    /// with `V = τ_f`, stacked over ε ∈ {1, 1e-2, 1e-4}.
    RegularizedNorm,
    /// For targets declared non-positively curved:
    /// `|∇^φ τ_f|² + ⟨tr R^N(τ_f, dφ)dφ, τ_f⟩ ≥ 0`.
    ConvexityNonnegativity,
    /// For problems declared bi-f-harmonic into non-positively curved
    /// targets: `Δ|τ_f| + ⟨∇|τ_f|, ∇ ln f⟩ ≥ 0` wherever `|τ_f| > 1e-6`.
    WeightedSubharmonicity,
}

impl IdentityId {
    pub const ALL: [IdentityId; 12] = [
        IdentityId::ConformalBitension,
        IdentityId::ConformalTension,
        IdentityId::ConformalFTension,
        IdentityId::ConformalJacobi,
        IdentityId::JacobiProduct,
        IdentityId::ConformalBitensionExpanded,
        IdentityId::ScalarConformalReduction,
        IdentityId::Weitzenbock,
        IdentityId::StressDivergence,
        IdentityId::RegularizedNorm,
        IdentityId::ConvexityNonnegativity,
        IdentityId::WeightedSubharmonicity,
    ];

    /// Stable key used by the command line and in serialized reports.
    pub fn name(self) -> &'static str {
        match self {
            IdentityId::ConformalBitension => "THM1",
            IdentityId::ConformalTension => "CONF-TENSION",
            IdentityId::ConformalFTension => "CONF-FTENSION",
            IdentityId::ConformalJacobi => "JAC-CONF",
            IdentityId::JacobiProduct => "JAC-PRODUCT",
            IdentityId::ConformalBitensionExpanded => "COR1",
            IdentityId::ScalarConformalReduction => "PROP2",
            IdentityId::Weitzenbock => "WEITZENBOCK",
            IdentityId::StressDivergence => "DIV-OMEGA",
            IdentityId::RegularizedNorm => "EPS-REG",
            IdentityId::ConvexityNonnegativity => "NPC-INEQ",
            IdentityId::WeightedSubharmonicity => "GD31-INEQ",
        }
    }

    /// Case-insensitive lookup by the stable key.
    pub fn parse(key: &str) -> Result<IdentityId> {
        let want = key.to_ascii_uppercase();
        IdentityId::ALL
            .into_iter()
            .find(|id| id.name() == want)
            .ok_or_else(|| IdentityError::UnknownIdentity(key.to_string()))
    }

    pub fn kind(self) -> IdentityKind {
        match self {
            IdentityId::ConvexityNonnegativity | IdentityId::WeightedSubharmonicity => {
                IdentityKind::Inequality
            }
            _ => IdentityKind::Equality,
        }
    }

    /// One-line human description for listings.
    pub fn describe(self) -> &'static str {
        match self {
            IdentityId::ConformalBitension => {
                "doubly weighted bitension equals the rescaled weighted bitension (definition route)"
            }
            IdentityId::ConformalTension => {
                "tension under a conformal change of the domain metric"
            }
            IdentityId::ConformalFTension => {
                "weighted tension as a rescaled unweighted tension"
            }
            IdentityId::ConformalJacobi => {
                "Jacobi operator under a conformal change of the domain metric"
            }
            IdentityId::JacobiProduct => "Jacobi operator applied to a weighted section",
            IdentityId::ConformalBitensionExpanded => {
                "doubly weighted bitension equals the rescaled weighted bitension (expanded route)"
            }
            IdentityId::ScalarConformalReduction => {
                "scalar reduction of the conformal correspondence for real-valued maps"
            }
            IdentityId::Weitzenbock => "Bochner formula for the squared norm of the weighted tension",
            IdentityId::StressDivergence => {
                "divergence of the weighted stress 1-form against the weighted tension"
            }
            IdentityId::RegularizedNorm => {
                "Laplacian of the regularised norm (|V|^2 + eps)^(1/2)"
            }
            IdentityId::ConvexityNonnegativity => {
                "nonnegativity of the Bochner right side for non-positively curved targets"
            }
            IdentityId::WeightedSubharmonicity => {
                "weighted subharmonicity of |tau_f| for bi-f-harmonic maps into non-positively curved targets"
            }
        }
    }
}

impl std::fmt::Display for IdentityId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Facts about a problem that cannot be derived from its chart data alone and
/// must be declared by whoever poses it (gallery flags, a caller's promise).
/// `None` means "not declared", which makes the identities that need the fact
/// inapplicable rather than silently assumed.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProblemTraits {
    /// The target is known to have non-positive sectional curvature.
    pub npc_target: Option<bool>,
    /// The doubly weighted bitension is known to vanish identically.
    pub bi_f_harmonic: Option<bool>,
}

impl ProblemTraits {
    pub fn from_flags(flags: &EntryFlags) -> ProblemTraits {
        ProblemTraits {
            npc_target: Some(flags.target_curvature.is_non_positive()),
            bi_f_harmonic: Some(flags.bi_f_harmonic),
        }
    }
}

/// Checks the hypotheses of `id` against the problem and its declared traits.
/// `Err` carries a sentence naming the violated predicate.
pub fn applicability(
    id: IdentityId,
    problem: &MapProblem,
    traits: ProblemTraits,
) -> std::result::Result<(), String> {
    let m = problem.domain().dim();
    let needs_conformal_exponent = matches!(
        id,
        IdentityId::ConformalBitension
            | IdentityId::ConformalFTension
            | IdentityId::ConformalJacobi
            | IdentityId::ConformalBitensionExpanded
            | IdentityId::ScalarConformalReduction
    );
    if needs_conformal_exponent && m == 2 {
        return Err(
            "the conformal exponent 1/(m-2) is undefined for a 2-dimensional domain".into(),
        );
    }
    if id == IdentityId::ScalarConformalReduction {
        let target = problem.target();
        let flat_line = target.dim() == 1
            && target.metric_exprs()[0][0].as_const() == Some(1.0);
        if !flat_line {
            return Err(
                "needs a real-valued map: the target must be the Euclidean line".into(),
            );
        }
    }
    if matches!(
        id,
        IdentityId::ConvexityNonnegativity | IdentityId::WeightedSubharmonicity
    ) {
        match traits.npc_target {
            Some(true) => {}
            Some(false) => {
                return Err("the declared target curvature is not non-positive".into());
            }
            None => return Err("the target curvature sign has not been declared".into()),
        }
    }
    if id == IdentityId::WeightedSubharmonicity {
        match traits.bi_f_harmonic {
            Some(true) => {}
            Some(false) => {
                return Err(
                    "the problem is declared not bi-f-harmonic, so the bound is not asserted"
                        .into(),
                );
            }
            None => {
                return Err(
                    "the problem has not been declared bi-f-harmonic (the doubly weighted \
                     bitension must vanish identically)"
                        .into(),
                );
            }
        }
    }
    Ok(())
}

/// `(-1/(m-2), m/(m-2))`: the exponent of the rescale factor `F = f^{-1/(m-2)}`
/// and of the partner weight `f̄ = f^{m/(m-2)}`. `None` for `m = 2`.
fn conformal_exponents(m: usize) -> Option<(Rational, Rational)> {
    let d = m as i64 - 2;
    if d == 0 {
        return None;
    }
    Some((Rational::new(-1, d), Rational::new(m as i64, d)))
}

/// The conformally rescaled partner problem `(φ, ḡ = f^{2/(m-2)} g)` with
/// weight `f̄ = f^{m/(m-2)}`, plus `f̄` itself.
fn conformal_partner(problem: &MapProblem, env: &ParamEnv) -> Result<(MapProblem, Expr)> {
    let m = problem.domain().dim();
    let (rescale_exp, weight_exp) =
        conformal_exponents(m).expect("applicability rules out 2-dimensional domains");
    let f = problem.weight_expr();
    let factor = f.powr(rescale_exp);
    let fbar = f.powr(weight_exp);
    let domain = problem.domain().conformal_rescale(&factor, env)?;
    let partner = MapProblem::new(
        domain,
        problem.target().clone(),
        problem.map_exprs().to_vec(),
        fbar.clone(),
        env,
    )?;
    Ok((partner, fbar))
}

/// Deterministic probe section with small polynomial-plus-sine components.
fn probe_section(problem: &MapProblem, seed: u64) -> Result<SectionField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROBE_SECTION_SALT);
    let coords = problem.domain().coords();
    let components = (0..problem.target().dim())
        .map(|_| crate::problems::small_scalar(&mut rng, coords, 0.4))
        .collect();
    Ok(problem.section(components)?)
}

/// Deterministic probe exponent `s`; the conformal probe factor is `e^s > 0`.
fn probe_log_factor(chart: &ChartManifold, seed: u64) -> Expr {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROBE_FACTOR_SALT);
    crate::problems::small_scalar(&mut rng, chart.coords(), 0.3)
}

/// Assembled sampling recipe: equalities fill `lhs` and `rhs` in parallel,
/// inequalities put the sampled value in `lhs` and leave `rhs` empty.
struct Recipe {
    lhs: Vec<Expr>,
    rhs: Vec<Expr>,
    /// Skip a sample when this gate expression is at or below the floor.
    skip_when_below: Option<(Expr, f64)>,
}

impl Recipe {
    fn equality(lhs: Vec<Expr>, rhs: Vec<Expr>) -> Recipe {
        debug_assert_eq!(lhs.len(), rhs.len());
        Recipe {
            lhs,
            rhs,
            skip_when_below: None,
        }
    }

    fn inequality(value: Expr, skip_when_below: Option<(Expr, f64)>) -> Recipe {
        Recipe {
            lhs: vec![value],
            rhs: Vec::new(),
            skip_when_below,
        }
    }
}

fn build_recipe(
    id: IdentityId,
    problem: &MapProblem,
    env: &ParamEnv,
    seed: u64,
) -> Result<Recipe> {
    let n = problem.target().dim();
    match id {
        IdentityId::ConformalBitension | IdentityId::ConformalBitensionExpanded => {
            let (partner, fbar) = conformal_partner(problem, env)?;
            let lhs = problem.bi_f_tension_field().components().to_vec();
            let partner_field = if id == IdentityId::ConformalBitension {
                partner.f_bitension_field()
            } else {
                partner.f_bitension_expanded_field()
            };
            let rhs = partner_field
                .components()
                .iter()
                .map(|c| fbar.mul(c))
                .collect();
            Ok(Recipe::equality(lhs, rhs))
        }
        IdentityId::ConformalTension => {
            let m = problem.domain().dim();
            let s = probe_log_factor(problem.domain(), seed);
            let factor = s.exp();
            let rescaled = problem.domain().conformal_rescale(&factor, env)?;
            let partner = MapProblem::new(
                rescaled,
                problem.target().clone(),
                problem.map_exprs().to_vec(),
                Expr::one(),
                env,
            )?;
            let lhs = partner.tension_field().components().to_vec();
            // grad_g ln F = grad_g s, pushed forward through dφ.
            let grad_s = problem.domain().grad_exprs(&s);
            let push = problem.push_forward_field(&grad_s);
            let factor_sq = factor.powi(2);
            let excess = Expr::number(m as f64 - 2.0);
            let tau = problem.tension_field();
            let rhs = (0..n)
                .map(|a| {
                    factor_sq.mul(&tau.component(a).sub(&excess.mul(push.component(a))))
                })
                .collect();
            Ok(Recipe::equality(lhs, rhs))
        }
        IdentityId::ConformalFTension => {
            let (partner, fbar) = conformal_partner(problem, env)?;
            let lhs = problem.f_tension_field().components().to_vec();
            let rhs = partner
                .tension_field()
                .components()
                .iter()
                .map(|c| fbar.mul(c))
                .collect();
            Ok(Recipe::equality(lhs, rhs))
        }
        IdentityId::ConformalJacobi => {
            let m = problem.domain().dim();
            let x = probe_section(problem, seed)?;
            let (partner, _) = conformal_partner(problem, env)?;
            let f = problem.weight_expr();
            let scale = f.powr(Rational::new(2, m as i64 - 2));
            let grad_f = problem.domain().grad_exprs(f);
            let advect = problem.directional_derivative_field(&x, &grad_f);
            let f_inv = f.powi(-1);
            let lhs = problem.jacobi_field(&x).components().to_vec();
            let partner_jac = partner.jacobi_field(&x);
            let rhs = (0..n)
                .map(|a| {
                    scale
                        .mul(partner_jac.component(a))
                        .add(&f_inv.mul(advect.component(a)))
                })
                .collect();
            Ok(Recipe::equality(lhs, rhs))
        }
        IdentityId::JacobiProduct => {
            let x = probe_section(problem, seed)?;
            let f = problem.weight_expr();
            let weighted = problem.section(
                x.components().iter().map(|c| f.mul(c)).collect(),
            )?;
            let lhs = problem.jacobi_field(&weighted).components().to_vec();
            let jac = problem.jacobi_field(&x);
            let lap_f = problem.domain().laplace_beltrami_expr(f);
            let grad_f = problem.domain().grad_exprs(f);
            let advect = problem.directional_derivative_field(&x, &grad_f);
            let two = Expr::number(2.0);
            let rhs = (0..n)
                .map(|a| {
                    f.mul(jac.component(a))
                        .sub(&lap_f.mul(x.component(a)))
                        .sub(&two.mul(advect.component(a)))
                })
                .collect();
            Ok(Recipe::equality(lhs, rhs))
        }
        IdentityId::ScalarConformalReduction => {
            let chart = problem.domain();
            let m = chart.dim();
            let f = problem.weight_expr();
            let u = &problem.map_exprs()[0];
            let (rescale_exp, weight_exp) =
                conformal_exponents(m).expect("applicability rules out m = 2");
            let factor = f.powr(rescale_exp);
            let fbar = f.powr(weight_exp);
            let rescaled = chart.conformal_rescale(&factor, env)?;
            let lhs = vec![bi_f_laplacian_expr(chart, f, u)];
            let rhs = vec![fbar.mul(&f_bi_laplacian_expr(&rescaled, &fbar, u))];
            Ok(Recipe::equality(lhs, rhs))
        }
        IdentityId::Weitzenbock => {
            let v = problem.f_tension_field();
            let normsq = problem.section_normsq_expr(v);
            let lhs = vec![
                Expr::number(0.5).mul(&problem.domain().laplace_beltrami_expr(&normsq)),
            ];
            let rough = problem.rough_laplacian_field(v);
            let rhs = vec![problem
                .pullback_derivative_normsq_expr(v)
                .add(&problem.section_pairing_expr(&rough, v))];
            Ok(Recipe::equality(lhs, rhs))
        }
        IdentityId::StressDivergence => {
            let m = problem.domain().dim();
            let v = problem.f_tension_field();
            let f = problem.weight_expr();
            let dmap = problem.dmap_exprs();
            let h = problem.pulled_metric_exprs();
            let inv = problem.domain().inverse_metric_exprs();
            // ω_j = f ⟨dφ(∂_j), τ_f⟩_h, raised to the vector Y^i = g^{ij} ω_j.
            let omega: Vec<Expr> = (0..m)
                .map(|j| {
                    let mut acc = Expr::zero();
                    for a in 0..n {
                        for b in 0..n {
                            acc = acc.add(&h[a][b].mul(&dmap[j][a]).mul(v.component(b)));
                        }
                    }
                    f.mul(&acc)
                })
                .collect();
            let raised: Vec<Expr> = (0..m)
                .map(|i| {
                    (0..m).fold(Expr::zero(), |acc, j| acc.add(&inv[i][j].mul(&omega[j])))
                })
                .collect();
            let lhs = vec![problem.domain().divergence_expr(&raised)];
            let nabla = problem.pullback_derivative_exprs(v);
            let mut pairing = Expr::zero();
            for i in 0..m {
                for j in 0..m {
                    let mut fibre = Expr::zero();
                    for a in 0..n {
                        for b in 0..n {
                            fibre = fibre.add(&h[a][b].mul(&dmap[i][a]).mul(&nabla[j][b]));
                        }
                    }
                    pairing = pairing.add(&inv[i][j].mul(&f.mul(&fibre)));
                }
            }
            let rhs = vec![problem.section_normsq_expr(v).add(&pairing)];
            Ok(Recipe::equality(lhs, rhs))
        }
        IdentityId::RegularizedNorm => {
            let chart = problem.domain();
            let v = problem.f_tension_field();
            let normsq = problem.section_normsq_expr(v);
            let lap_normsq = chart.laplace_beltrami_expr(&normsq);
            let grad_normsq_sq = chart.grad_pairing_expr(&normsq, &normsq);
            let half = Expr::number(0.5);
            let quarter = Expr::number(0.25);
            let mut lhs = Vec::with_capacity(REGULARIZATIONS.len());
            let mut rhs = Vec::with_capacity(REGULARIZATIONS.len());
            for eps in REGULARIZATIONS {
                let shifted = normsq.add(&Expr::number(eps));
                lhs.push(chart.laplace_beltrami_expr(&shifted.sqrt()));
                rhs.push(shifted.powr(Rational::new(-3, 2)).mul(
                    &half
                        .mul(&shifted)
                        .mul(&lap_normsq)
                        .sub(&quarter.mul(&grad_normsq_sq)),
                ));
            }
            Ok(Recipe::equality(lhs, rhs))
        }
        IdentityId::ConvexityNonnegativity => {
            let v = problem.f_tension_field();
            let trace = problem.curvature_trace_field(v);
            let value = problem
                .pullback_derivative_normsq_expr(v)
                .add(&problem.section_pairing_expr(&trace, v));
            Ok(Recipe::inequality(value, None))
        }
        IdentityId::WeightedSubharmonicity => {
            let chart = problem.domain();
            let v = problem.f_tension_field();
            let normsq = problem.section_normsq_expr(v);
            let norm = normsq.sqrt();
            let log_weight = problem.weight_expr().log();
            let value = chart
                .laplace_beltrami_expr(&norm)
                .add(&chart.grad_pairing_expr(&norm, &log_weight));
            Ok(Recipe::inequality(
                value,
                Some((normsq, SMALL_SECTION_FLOOR)),
            ))
        }
    }
}

/// Pass/fail verdict of a verification run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

/// Outcome of sampling one identity on one problem.
///
/// For equalities the per-sample residual is the componentwise sup-norm of
/// `lhs - rhs` and the relative residual divides by
/// `max(1, ‖lhs‖∞, ‖rhs‖∞)`; the verdict passes iff the worst relative
/// residual stays within tolerance. For inequalities `residuals` holds the
/// sampled values themselves, `min_value` their minimum, and the verdict
/// passes iff `min_value ≥ -tolerance`. Samples that fail to evaluate are
/// recorded in `errors` and force a failing verdict; samples excluded by an
/// identity's gate (e.g. near zeros of `|τ_f|`) are counted in `skipped` and
/// are not failures.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub identity: String,
    pub problem: String,
    pub kind: IdentityKind,
    pub seed: u64,
    pub samples: usize,
    pub evaluated: usize,
    pub skipped: usize,
    pub residuals: Vec<f64>,
    pub max_abs_residual: f64,
    pub max_rel_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_value: Option<f64>,
    pub tolerance: f64,
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
    pub errors: Vec<String>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    /// Drops the wall-time field so that reports from repeated runs compare
    /// and serialize identically.
    pub fn strip_timing(&mut self) {
        self.wall_time_ms = None;
    }

    /// One-line rendering for text output.
    pub fn summary_line(&self) -> String {
        let verdict = match self.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
        };
        let detail = match self.kind {
            IdentityKind::Equality => format!("max_rel {:.3e}", self.max_rel_residual),
            IdentityKind::Inequality => match self.min_value {
                Some(v) => format!("min_value {:.3e}", v),
                None => "all samples skipped".to_string(),
            },
        };
        format!(
            "{} on {}: {} ({}; {} samples, {} evaluated, {} skipped, {} errors)",
            self.identity,
            self.problem,
            verdict,
            detail,
            self.samples,
            self.evaluated,
            self.skipped,
            self.errors.len()
        )
    }
}

/// Samples `id` on `problem` at `samples` deterministic chart points and
/// reports residual statistics. Fails with
/// [`IdentityError::Inapplicable`] when the identity's hypotheses do not hold
/// for this problem.
#[allow(clippy::too_many_arguments)]
pub fn verify(
    id: IdentityId,
    problem: &MapProblem,
    problem_name: &str,
    traits: ProblemTraits,
    env: &ParamEnv,
    samples: usize,
    seed: u64,
    tol: f64,
) -> Result<VerificationReport> {
    if let Err(reason) = applicability(id, problem, traits) {
        return Err(IdentityError::Inapplicable {
            identity: id.name(),
            reason,
        });
    }
    let start = Instant::now();
    let recipe = build_recipe(id, problem, env, seed)?;
    let points = problem.domain().sample_points(samples, seed, env)?;

    let n_lhs = recipe.lhs.len();
    let mut outputs: Vec<Expr> = Vec::with_capacity(n_lhs + recipe.rhs.len());
    outputs.extend(recipe.lhs.iter().cloned());
    outputs.extend(recipe.rhs.iter().cloned());
    let program = Program::compile(&outputs, env)?;
    // The gate runs as its own program *before* the main outputs: gated
    // identities are exactly the ones whose expressions stop being defined
    // past the gate (e.g. Δ|V| at zeros of |V|).
    let gate_program = match &recipe.skip_when_below {
        Some((gate, floor)) => Some((Program::compile(std::slice::from_ref(gate), env)?, *floor)),
        None => None,
    };

    let mut scratch = Vec::new();
    let mut out = Vec::new();
    let mut residuals = Vec::with_capacity(points.len());
    let mut errors: Vec<String> = Vec::new();
    let mut error_count = 0usize;
    let mut skipped = 0usize;
    let mut evaluated = 0usize;
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut min_value: Option<f64> = None;

    let record_error = |errors: &mut Vec<String>, count: &mut usize, msg: String| {
        *count += 1;
        if errors.len() < MAX_REPORTED_ERRORS {
            errors.push(msg);
        }
    };

    for point in &points {
        if let Some((gate, floor)) = &gate_program {
            match gate.eval_into(point, &mut scratch, &mut out) {
                Err(e) => {
                    record_error(
                        &mut errors,
                        &mut error_count,
                        format!("gate at {point:?}: {e}"),
                    );
                    continue;
                }
                Ok(()) => {
                    if out[0] <= *floor {
                        skipped += 1;
                        continue;
                    }
                }
            }
        }
        if let Err(e) = program.eval_into(point, &mut scratch, &mut out) {
            record_error(
                &mut errors,
                &mut error_count,
                format!("at {point:?}: {e}"),
            );
            continue;
        }
        match id.kind() {
            IdentityKind::Equality => {
                let mut diff = 0.0f64;
                let mut scale = 1.0f64;
                let mut finite = true;
                for k in 0..n_lhs {
                    let l = out[k];
                    let r = out[n_lhs + k];
                    if !l.is_finite() || !r.is_finite() {
                        finite = false;
                        break;
                    }
                    diff = diff.max((l - r).abs());
                    scale = scale.max(l.abs()).max(r.abs());
                }
                if !finite {
                    record_error(
                        &mut errors,
                        &mut error_count,
                        format!("non-finite value at {point:?}"),
                    );
                    continue;
                }
                evaluated += 1;
                residuals.push(diff);
                max_abs = max_abs.max(diff);
                max_rel = max_rel.max(diff / scale);
            }
            IdentityKind::Inequality => {
                let value = out[0];
                if !value.is_finite() {
                    record_error(
                        &mut errors,
                        &mut error_count,
                        format!("non-finite value at {point:?}"),
                    );
                    continue;
                }
                evaluated += 1;
                residuals.push(value);
                min_value = Some(min_value.map_or(value, |m| m.min(value)));
                let violation = (-value).max(0.0);
                max_abs = max_abs.max(violation);
                max_rel = max_rel.max(violation);
            }
        }
    }
    if error_count > errors.len() {
        let hidden = error_count - errors.len();
        errors.push(format!("... {hidden} further evaluation failures"));
    }

    let clean = error_count == 0;
    let within = match id.kind() {
        IdentityKind::Equality => max_rel <= tol,
        IdentityKind::Inequality => min_value.is_none_or(|v| v >= -tol),
    };
    Ok(VerificationReport {
        identity: id.name().to_string(),
        problem: problem_name.to_string(),
        kind: id.kind(),
        seed,
        samples,
        evaluated,
        skipped,
        residuals,
        max_abs_residual: max_abs,
        max_rel_residual: max_rel,
        min_value,
        tolerance: tol,
        verdict: if clean && within {
            Verdict::Pass
        } else {
            Verdict::Fail
        },
        wall_time_ms: Some(start.elapsed().as_secs_f64() * 1e3),
        errors,
    })
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

/// Which operator the oracle recomputes.
#[derive(Debug, Clone, Copy)]
pub enum OracleQuantity<'a> {
    /// Tension field of the map at a domain point.
    Tension,
    /// Weighted tension field of the map at a domain point.
    FTension,
    /// Laplace–Beltrami operator of a scalar on the domain chart, in
    /// divergence form.
    LaplaceBeltrami(&'a Expr),
    /// Pullback covariant derivative of a section along the coordinate
    /// direction of the given index.
    PullbackDerivative(&'a SectionField, usize),
}

/// Oracle output: the component values plus an optional warning about the
/// requested step size.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleValue {
    pub values: Vec<f64>,
    pub warning: Option<String>,
}

/// Recomputes `quantity` at `point` using second-order central differences of
/// *pointwise evaluations only*: the metric, map, weight, and section are
/// queried as black-box functions and never differentiated symbolically. This
/// makes the oracle an independent cross-check of the symbolic derivative
/// stack.
pub fn fd_oracle(
    problem: &MapProblem,
    quantity: OracleQuantity<'_>,
    point: &[f64],
    step: f64,
    env: &ParamEnv,
) -> Result<OracleValue> {
    if !step.is_finite() || step <= 0.0 {
        return Err(IdentityError::Oracle(format!(
            "step must be a positive finite number, got {step}"
        )));
    }
    if point.len() != problem.domain().dim() {
        return Err(IdentityError::Oracle(format!(
            "point has dimension {}, domain has dimension {}",
            point.len(),
            problem.domain().dim()
        )));
    }
    let warning = (step < FD_STEP_WARNING_FLOOR).then(|| {
        format!(
            "step {step:.1e} is below {FD_STEP_WARNING_FLOOR:.0e}; roundoff in the \
             second differences likely dominates the result"
        )
    });
    let values = match quantity {
        OracleQuantity::Tension => tension_fd(problem, point, step, env)?,
        OracleQuantity::FTension => {
            let tau = tension_fd(problem, point, step, env)?;
            let f = problem.weight_expr().evaluate(point, env)?;
            let grad_f = grad_fd(problem.domain(), problem.weight_expr(), point, step, env)?;
            let dmap = dmap_fd(problem, point, step, env)?;
            let n = problem.target().dim();
            let m = problem.domain().dim();
            (0..n)
                .map(|a| {
                    let push: f64 = (0..m).map(|i| grad_f[i] * dmap[i][a]).sum();
                    f * tau[a] + push
                })
                .collect()
        }
        OracleQuantity::LaplaceBeltrami(u) => {
            vec![laplace_fd(problem.domain(), u, point, step, env)?]
        }
        OracleQuantity::PullbackDerivative(section, direction) => {
            if direction >= problem.domain().dim() {
                return Err(IdentityError::Oracle(format!(
                    "direction index {direction} out of range for dimension {}",
                    problem.domain().dim()
                )));
            }
            pullback_derivative_fd(problem, section, direction, point, step, env)?
        }
    };
    Ok(OracleValue { values, warning })
}

fn shifted(point: &[f64], axis: usize, delta: f64) -> Vec<f64> {
    let mut y = point.to_vec();
    y[axis] += delta;
    y
}

fn metric_num(chart: &ChartManifold, point: &[f64], env: &ParamEnv) -> Result<Vec<Vec<f64>>> {
    chart
        .metric_exprs()
        .iter()
        .map(|row| {
            row.iter()
                .map(|e| e.evaluate(point, env).map_err(IdentityError::from))
                .collect()
        })
        .collect()
}

fn inverse_metric_num(
    chart: &ChartManifold,
    point: &[f64],
    env: &ParamEnv,
) -> Result<Vec<Vec<f64>>> {
    let g = metric_num(chart, point, env)?;
    geometry::num_inverse(&g).ok_or_else(|| {
        IdentityError::Oracle(format!("metric is singular at stencil point {point:?}"))
    })
}

/// Central difference of a scalar expression along one axis.
fn scalar_diff_fd(
    e: &Expr,
    point: &[f64],
    axis: usize,
    step: f64,
    env: &ParamEnv,
) -> Result<f64> {
    let plus = e.evaluate(&shifted(point, axis, step), env)?;
    let minus = e.evaluate(&shifted(point, axis, -step), env)?;
    Ok((plus - minus) / (2.0 * step))
}

/// Riemannian gradient `g^{ij} ∂_j u` from differences of `u` and a numeric
/// metric inverse.
fn grad_fd(
    chart: &ChartManifold,
    u: &Expr,
    point: &[f64],
    step: f64,
    env: &ParamEnv,
) -> Result<Vec<f64>> {
    let m = chart.dim();
    let inv = inverse_metric_num(chart, point, env)?;
    let mut du = vec![0.0; m];
    for (j, slot) in du.iter_mut().enumerate() {
        *slot = scalar_diff_fd(u, point, j, step, env)?;
    }
    Ok((0..m)
        .map(|i| (0..m).map(|j| inv[i][j] * du[j]).sum())
        .collect())
}

/// Christoffel symbols `Γ^k_{ij}` from central differences of the metric
/// components and a numeric inverse; indexed `[k][i][j]`.
fn christoffel_fd(
    chart: &ChartManifold,
    point: &[f64],
    step: f64,
    env: &ParamEnv,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let m = chart.dim();
    let inv = inverse_metric_num(chart, point, env)?;
    // dg[k][i][j] = ∂_k g_{ij}
    let mut dg = vec![vec![vec![0.0; m]; m]; m];
    for k in 0..m {
        let plus = metric_num(chart, &shifted(point, k, step), env)?;
        let minus = metric_num(chart, &shifted(point, k, -step), env)?;
        for i in 0..m {
            for j in 0..m {
                dg[k][i][j] = (plus[i][j] - minus[i][j]) / (2.0 * step);
            }
        }
    }
    let mut gamma = vec![vec![vec![0.0; m]; m]; m];
    for k in 0..m {
        for i in 0..m {
            for j in 0..m {
                let mut acc = 0.0;
                for l in 0..m {
                    acc += inv[k][l] * (dg[i][j][l] + dg[j][i][l] - dg[l][i][j]);
                }
                gamma[k][i][j] = 0.5 * acc;
            }
        }
    }
    Ok(gamma)
}

fn map_num(problem: &MapProblem, point: &[f64], env: &ParamEnv) -> Result<Vec<f64>> {
    problem
        .map_exprs()
        .iter()
        .map(|e| e.evaluate(point, env).map_err(IdentityError::from))
        .collect()
}

/// `∂_i φ^a` by central differences; indexed `[i][a]`.
fn dmap_fd(
    problem: &MapProblem,
    point: &[f64],
    step: f64,
    env: &ParamEnv,
) -> Result<Vec<Vec<f64>>> {
    let m = problem.domain().dim();
    (0..m)
        .map(|i| {
            let plus = map_num(problem, &shifted(point, i, step), env)?;
            let minus = map_num(problem, &shifted(point, i, -step), env)?;
            Ok(plus
                .iter()
                .zip(&minus)
                .map(|(p, q)| (p - q) / (2.0 * step))
                .collect())
        })
        .collect()
}

/// `∂_i ∂_j φ^a` by central second differences; indexed `[i][j][a]`.
fn d2map_fd(
    problem: &MapProblem,
    point: &[f64],
    step: f64,
    env: &ParamEnv,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let m = problem.domain().dim();
    let n = problem.target().dim();
    let centre = map_num(problem, point, env)?;
    let mut out = vec![vec![vec![0.0; n]; m]; m];
    for i in 0..m {
        let plus = map_num(problem, &shifted(point, i, step), env)?;
        let minus = map_num(problem, &shifted(point, i, -step), env)?;
        for a in 0..n {
            out[i][i][a] = (plus[a] - 2.0 * centre[a] + minus[a]) / (step * step);
        }
        for j in (i + 1)..m {
            let pp = map_num(problem, &shifted(&shifted(point, i, step), j, step), env)?;
            let pm = map_num(problem, &shifted(&shifted(point, i, step), j, -step), env)?;
            let mp = map_num(problem, &shifted(&shifted(point, i, -step), j, step), env)?;
            let mm = map_num(
                problem,
                &shifted(&shifted(point, i, -step), j, -step),
                env,
            )?;
            for a in 0..n {
                let mixed = (pp[a] - pm[a] - mp[a] + mm[a]) / (4.0 * step * step);
                out[i][j][a] = mixed;
                out[j][i][a] = mixed;
            }
        }
    }
    Ok(out)
}

fn tension_fd(
    problem: &MapProblem,
    point: &[f64],
    step: f64,
    env: &ParamEnv,
) -> Result<Vec<f64>> {
    let m = problem.domain().dim();
    let n = problem.target().dim();
    let inv = inverse_metric_num(problem.domain(), point, env)?;
    let gamma_dom = christoffel_fd(problem.domain(), point, step, env)?;
    let image = map_num(problem, point, env)?;
    let gamma_tgt = christoffel_fd(problem.target(), &image, step, env)?;
    let dmap = dmap_fd(problem, point, step, env)?;
    let d2map = d2map_fd(problem, point, step, env)?;
    let mut tau = vec![0.0; n];
    for a in 0..n {
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..m {
                if inv[i][j] == 0.0 {
                    continue;
                }
                let mut hess = d2map[i][j][a];
                for k in 0..m {
                    hess -= gamma_dom[k][i][j] * dmap[k][a];
                }
                for b in 0..n {
                    for c in 0..n {
                        hess += gamma_tgt[a][b][c] * dmap[i][b] * dmap[j][c];
                    }
                }
                acc += inv[i][j] * hess;
            }
        }
        tau[a] = acc;
    }
    Ok(tau)
}

/// Laplace–Beltrami in divergence form with a nested stencil: the flux
/// `F_i(y) = √det g(y) · g^{ij}(y) ∂_j u(y)` is itself assembled from central
/// differences at each outer stencil point.
fn laplace_fd(
    chart: &ChartManifold,
    u: &Expr,
    point: &[f64],
    step: f64,
    env: &ParamEnv,
) -> Result<f64> {
    let m = chart.dim();
    let flux_component = |y: &[f64], i: usize| -> Result<f64> {
        let g = metric_num(chart, y, env)?;
        let det = geometry::num_det(&g);
        if !det.is_finite() || det <= 0.0 {
            return Err(IdentityError::Oracle(format!(
                "metric determinant {det} is not positive at stencil point {y:?}"
            )));
        }
        let inv = geometry::num_inverse(&g).ok_or_else(|| {
            IdentityError::Oracle(format!("metric is singular at stencil point {y:?}"))
        })?;
        let mut acc = 0.0;
        for j in 0..m {
            if inv[i][j] == 0.0 {
                continue;
            }
            acc += inv[i][j] * scalar_diff_fd(u, y, j, step, env)?;
        }
        Ok(det.sqrt() * acc)
    };
    let mut divergence = 0.0;
    for i in 0..m {
        let plus = flux_component(&shifted(point, i, step), i)?;
        let minus = flux_component(&shifted(point, i, -step), i)?;
        divergence += (plus - minus) / (2.0 * step);
    }
    let g0 = metric_num(chart, point, env)?;
    let det0 = geometry::num_det(&g0);
    if !det0.is_finite() || det0 <= 0.0 {
        return Err(IdentityError::Oracle(format!(
            "metric determinant {det0} is not positive at {point:?}"
        )));
    }
    Ok(divergence / det0.sqrt())
}

/// `(∇^φ_i V)^a = ∂_i V^a + Γ^a_{bc}(φ(x)) ∂_i φ^b V^c` with every ingredient
/// taken from pointwise evaluations.
fn pullback_derivative_fd(
    problem: &MapProblem,
    section: &SectionField,
    direction: usize,
    point: &[f64],
    step: f64,
    env: &ParamEnv,
) -> Result<Vec<f64>> {
    let n = problem.target().dim();
    let image = map_num(problem, point, env)?;
    let gamma_tgt = christoffel_fd(problem.target(), &image, step, env)?;
    let dmap = dmap_fd(problem, point, step, env)?;
    let values: Vec<f64> = section
        .components()
        .iter()
        .map(|e| e.evaluate(point, env).map_err(IdentityError::from))
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; n];
    for a in 0..n {
        let mut acc = scalar_diff_fd(section.component(a), point, direction, step, env)?;
        for b in 0..n {
            for c in 0..n {
                acc += gamma_tgt[a][b][c] * dmap[direction][b] * values[c];
            }
        }
        out[a] = acc;
    }
    Ok(out)
}
