//! Midpoint tensor-grid quadrature for the energy functionals and radial
//! growth profiles.
//!
//! Integrals run over a [`Region`] mask laid on a uniform tensor grid of cell
//! centres inside the region's bounding box. Cells whose centre falls within
//! the chart's singular-set guard (plus a hard skin of
//! [`GUARD_EXCLUSION_SKIN`]) are excluded from the sum and *counted* in the
//! result, so exclusion is always visible, never silent. Summation is
//! pairwise, which is deterministic and keeps roundoff near `1e-13` relative
//! even for large grids.

use serde::Serialize;
use thiserror::Error;

use crate::expr::{EvalError, Expr, ParamEnv, Program};
use crate::geometry::{ChartManifold, GeometryError};
use crate::mapcalc::{MapError, MapProblem};

type Result<T, E = QuadratureError> = std::result::Result<T, E>;

/// Default grid resolution per axis.
pub const DEFAULT_RESOLUTION: usize = 128;

/// Extra skin added to a chart's guard margin when masking grid cells: a cell
/// centre `x` is excluded when `|guard(x)| < margin + skin`. The skin keeps
/// midpoint cells from straddling the singular core.
pub const GUARD_EXCLUSION_SKIN: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum QuadratureError {
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error("region extends outside the chart box: {0}")]
    RegionOutsideChart(String),
    #[error("resolution must be at least 2, got {0}")]
    Resolution(usize),
    #[error("the singular-set guard excludes every grid cell of the region")]
    GuardSwallowedRegion,
    #[error("region contains no grid cells")]
    EmptyRegion,
    #[error("unknown energy functional `{0}`")]
    UnknownFunctional(String),
    #[error("integrand evaluation failed at {point:?}: {source}")]
    Eval { point: Vec<f64>, source: EvalError },
    #[error("compiling integrand: {0}")]
    Compile(EvalError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Map(#[from] MapError),
}

/// A compact integration region inside a chart's coordinate box.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    Box { bounds: Vec<(f64, f64)> },
    Ball { center: Vec<f64>, radius: f64 },
    Annulus { center: Vec<f64>, inner: f64, outer: f64 },
}

impl Region {
    pub fn bounded_box(bounds: Vec<(f64, f64)>) -> Result<Region> {
        if bounds.is_empty() {
            return Err(QuadratureError::InvalidRegion("box has no axes".into()));
        }
        for &(lo, hi) in &bounds {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(QuadratureError::InvalidRegion(format!(
                    "box interval {lo}..{hi} is not a positive finite extent"
                )));
            }
        }
        Ok(Region::Box { bounds })
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Region> {
        if center.is_empty() || center.iter().any(|c| !c.is_finite()) {
            return Err(QuadratureError::InvalidRegion(
                "ball centre must be finite and non-empty".into(),
            ));
        }
        if !radius.is_finite() || radius <= 0.0 {
            return Err(QuadratureError::InvalidRegion(format!(
                "ball radius {radius} is not positive"
            )));
        }
        Ok(Region::Ball { center, radius })
    }

    pub fn annulus(center: Vec<f64>, inner: f64, outer: f64) -> Result<Region> {
        if center.is_empty() || center.iter().any(|c| !c.is_finite()) {
            return Err(QuadratureError::InvalidRegion(
                "annulus centre must be finite and non-empty".into(),
            ));
        }
        if !inner.is_finite() || !outer.is_finite() || inner < 0.0 || outer <= inner {
            return Err(QuadratureError::InvalidRegion(format!(
                "annulus radii {inner}..{outer} must satisfy 0 <= inner < outer"
            )));
        }
        Ok(Region::Annulus {
            center,
            inner,
            outer,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Region::Box { bounds } => bounds.len(),
            Region::Ball { center, .. } | Region::Annulus { center, .. } => center.len(),
        }
    }

    /// Smallest axis-aligned box containing the region.
    pub fn bounding_box(&self) -> Vec<(f64, f64)> {
        match self {
            Region::Box { bounds } => bounds.clone(),
            Region::Ball { center, radius } => center
                .iter()
                .map(|c| (c - radius, c + radius))
                .collect(),
            Region::Annulus { center, outer, .. } => center
                .iter()
                .map(|c| (c - outer, c + outer))
                .collect(),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Region::Box { bounds } => x
                .iter()
                .zip(bounds)
                .all(|(xi, (lo, hi))| *lo <= *xi && *xi <= *hi),
            Region::Ball { center, radius } => {
                dist_sq(x, center) <= radius * radius
            }
            Region::Annulus {
                center,
                inner,
                outer,
            } => {
                let d2 = dist_sq(x, center);
                inner * inner <= d2 && d2 <= outer * outer
            }
        }
    }
}

fn dist_sq(x: &[f64], c: &[f64]) -> f64 {
    x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// The five energy functionals. All are `½ ∫ (integrand) √det g dx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EnergyKind {
    /// `E`: integrand `|dφ|²`.
    #[serde(rename = "E")]
    Energy,
    /// `E_f`: integrand `f |dφ|²`.
    #[serde(rename = "E_f")]
    WeightedEnergy,
    /// `E_2`: integrand `|τ(φ)|²`.
    #[serde(rename = "E_2")]
    Bienergy,
    /// `E_f2`: integrand `f |τ(φ)|²`.
    #[serde(rename = "E_f2")]
    WeightedBienergy,
    /// `E_2f`: integrand `|τ_f(φ)|²`.
    #[serde(rename = "E_2f")]
    BiWeightedEnergy,
}

impl EnergyKind {
    pub const ALL: [EnergyKind; 5] = [
        EnergyKind::Energy,
        EnergyKind::WeightedEnergy,
        EnergyKind::Bienergy,
        EnergyKind::WeightedBienergy,
        EnergyKind::BiWeightedEnergy,
    ];

    /// Canonical key used on the command line and in reports.
    pub fn key(self) -> &'static str {
        match self {
            EnergyKind::Energy => "E",
            EnergyKind::WeightedEnergy => "E_f",
            EnergyKind::Bienergy => "E_2",
            EnergyKind::WeightedBienergy => "E_f2",
            EnergyKind::BiWeightedEnergy => "E_2f",
        }
    }

    /// Case-insensitive lookup tolerating underscore/brace/comma decoration,
    /// so `E_f2`, `e_f_2` and `E_{f,2}` all name the same functional.
    pub fn parse(key: &str) -> Result<EnergyKind> {
        let normalized: String = key
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match normalized.as_str() {
            "e" => Ok(EnergyKind::Energy),
            "ef" => Ok(EnergyKind::WeightedEnergy),
            "e2" => Ok(EnergyKind::Bienergy),
            "ef2" => Ok(EnergyKind::WeightedBienergy),
            "e2f" => Ok(EnergyKind::BiWeightedEnergy),
            _ => Err(QuadratureError::UnknownFunctional(key.to_string())),
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            EnergyKind::Energy => "Dirichlet energy 1/2 ∫ |dφ|² dv",
            EnergyKind::WeightedEnergy => "weighted Dirichlet energy 1/2 ∫ f |dφ|² dv",
            EnergyKind::Bienergy => "bienergy 1/2 ∫ |τ(φ)|² dv",
            EnergyKind::WeightedBienergy => "weighted bienergy 1/2 ∫ f |τ(φ)|² dv",
            EnergyKind::BiWeightedEnergy => "bi-weighted energy 1/2 ∫ |τ_f(φ)|² dv",
        }
    }

    /// `½ · (density) · √det g`, ready for pointwise evaluation.
    fn integrand(self, problem: &MapProblem) -> Expr {
        let density = match self {
            EnergyKind::Energy => problem.dmap_normsq_expr(),
            EnergyKind::WeightedEnergy => problem.weight_expr().mul(&problem.dmap_normsq_expr()),
            EnergyKind::Bienergy => problem.section_normsq_expr(problem.tension_field()),
            EnergyKind::WeightedBienergy => problem
                .weight_expr()
                .mul(&problem.section_normsq_expr(problem.tension_field())),
            EnergyKind::BiWeightedEnergy => {
                problem.section_normsq_expr(problem.f_tension_field())
            }
        };
        Expr::number(0.5)
            .mul(&density)
            .mul(problem.domain().sqrt_det_expr())
    }
}

/// Result of one energy quadrature.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyResult {
    pub kind: &'static str,
    pub region: Region,
    pub resolution: usize,
    pub value: f64,
    /// Grid cells whose centre lies in the region (before guard exclusion).
    pub cells_in_region: usize,
    /// Cells excluded because their centre sits inside the guard skin.
    pub cells_excluded_by_guard: usize,
    /// `|value(resolution) - value(resolution/2)|`: a Richardson-style error
    /// indicator (the midpoint rule is second order, so the true error is
    /// roughly a third of this).
    pub refinement_estimate: f64,
}

/// One radius row of a [`GrowthProfile`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthRow {
    pub radius: f64,
    /// `sup` of the weight over the closed coordinate ball, by dense grid max.
    pub sup_weight: f64,
    pub sup_weight_over_r2: f64,
    /// `∫_{B_r} f |τ_f(φ)|² dv`.
    pub weighted_tension_energy: f64,
    /// `∫_{B_r} f dv`.
    pub weight_volume: f64,
}

/// Radial growth data for the weight and the weighted tension energy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthProfile {
    pub center: Vec<f64>,
    pub resolution: usize,
    /// Coordinate balls coincide with geodesic balls only for the identity
    /// metric; on curved domains the profile is still computed on coordinate
    /// balls, and this flag says so.
    pub curved_domain_caveat: bool,
    pub rows: Vec<GrowthRow>,
}

/// Deterministic pairwise summation.
fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 32 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Iterator over midpoint-grid cell centres of `bounds` at `resolution` cells
/// per axis; yields each centre into a caller-provided buffer.
struct MidpointGrid {
    bounds: Vec<(f64, f64)>,
    resolution: usize,
    index: Vec<usize>,
    done: bool,
}

impl MidpointGrid {
    fn new(bounds: Vec<(f64, f64)>, resolution: usize) -> MidpointGrid {
        let dim = bounds.len();
        MidpointGrid {
            bounds,
            resolution,
            index: vec![0; dim],
            done: false,
        }
    }

    fn cell_volume(&self) -> f64 {
        self.bounds
            .iter()
            .map(|(lo, hi)| (hi - lo) / self.resolution as f64)
            .product()
    }

    fn next_centre(&mut self, out: &mut Vec<f64>) -> bool {
        if self.done {
            return false;
        }
        out.clear();
        for (k, (lo, hi)) in self.index.iter().zip(&self.bounds) {
            let w = (hi - lo) / self.resolution as f64;
            out.push(lo + (*k as f64 + 0.5) * w);
        }
        // Odometer increment.
        for axis in (0..self.index.len()).rev() {
            self.index[axis] += 1;
            if self.index[axis] < self.resolution {
                return true;
            }
            self.index[axis] = 0;
        }
        self.done = true;
        true
    }
}

fn check_region_in_chart(region: &Region, chart: &ChartManifold) -> Result<()> {
    if region.dim() != chart.dim() {
        return Err(QuadratureError::InvalidRegion(format!(
            "region has dimension {}, chart has dimension {}",
            region.dim(),
            chart.dim()
        )));
    }
    let bbox = region.bounding_box();
    for (axis, ((rlo, rhi), (clo, chi))) in bbox.iter().zip(chart.region()).enumerate() {
        if rlo < clo || rhi > chi {
            return Err(QuadratureError::RegionOutsideChart(format!(
                "axis {axis}: region spans {rlo}..{rhi}, chart spans {clo}..{chi}"
            )));
        }
    }
    Ok(())
}

/// Compiled guard test: `true` means the point must be excluded.
struct GuardMask {
    program: Option<(Program, f64)>,
}

impl GuardMask {
    fn new(chart: &ChartManifold, env: &ParamEnv) -> Result<GuardMask> {
        let program = match chart.guard() {
            None => None,
            Some(guard) => {
                let compiled = Program::compile(std::slice::from_ref(&guard.expr), env)
                    .map_err(QuadratureError::Compile)?;
                Some((compiled, guard.margin + GUARD_EXCLUSION_SKIN))
            }
        };
        Ok(GuardMask { program })
    }

    fn excludes(
        &self,
        point: &[f64],
        scratch: &mut Vec<f64>,
        out: &mut Vec<f64>,
    ) -> Result<bool> {
        match &self.program {
            None => Ok(false),
            Some((program, cutoff)) => {
                program
                    .eval_into(point, scratch, out)
                    .map_err(|source| QuadratureError::Eval {
                        point: point.to_vec(),
                        source,
                    })?;
                Ok(out[0].abs() < *cutoff)
            }
        }
    }
}

/// Midpoint integral of a compiled single-output program over `region`.
/// Returns `(value, cells_in_region, cells_excluded)`.
fn integrate(
    program: &Program,
    region: &Region,
    guard: &GuardMask,
    resolution: usize,
) -> Result<(f64, usize, usize)> {
    let mut grid = MidpointGrid::new(region.bounding_box(), resolution);
    let cell_volume = grid.cell_volume();
    let mut centre = Vec::new();
    let mut scratch = Vec::new();
    let mut out = Vec::new();
    let mut values = Vec::new();
    let mut in_region = 0usize;
    let mut excluded = 0usize;
    while grid.next_centre(&mut centre) {
        if !region.contains(&centre) {
            continue;
        }
        in_region += 1;
        if guard.excludes(&centre, &mut scratch, &mut out)? {
            excluded += 1;
            continue;
        }
        program
            .eval_into(&centre, &mut scratch, &mut out)
            .map_err(|source| QuadratureError::Eval {
                point: centre.clone(),
                source,
            })?;
        values.push(out[0]);
    }
    if in_region == 0 {
        return Err(QuadratureError::EmptyRegion);
    }
    if values.is_empty() {
        return Err(QuadratureError::GuardSwallowedRegion);
    }
    Ok((pairwise_sum(&values) * cell_volume, in_region, excluded))
}

/// Midpoint tensor-grid value of the energy functional `kind` over `region`,
/// together with a half-resolution refinement estimate.
pub fn energy(
    problem: &MapProblem,
    kind: EnergyKind,
    region: &Region,
    resolution: usize,
    env: &ParamEnv,
) -> Result<EnergyResult> {
    if resolution < 2 {
        return Err(QuadratureError::Resolution(resolution));
    }
    check_region_in_chart(region, problem.domain())?;
    let integrand = kind.integrand(problem);
    let program = Program::compile(std::slice::from_ref(&integrand), env)
        .map_err(QuadratureError::Compile)?;
    let guard = GuardMask::new(problem.domain(), env)?;
    let (value, cells_in_region, cells_excluded_by_guard) =
        integrate(&program, region, &guard, resolution)?;
    let (coarse, _, _) = integrate(&program, region, &guard, resolution / 2)?;
    Ok(EnergyResult {
        kind: kind.key(),
        region: region.clone(),
        resolution,
        value,
        cells_in_region,
        cells_excluded_by_guard,
        refinement_estimate: (value - coarse).abs(),
    })
}

fn is_identity_metric(chart: &ChartManifold) -> bool {
    chart.metric_exprs().iter().enumerate().all(|(i, row)| {
        row.iter()
            .enumerate()
            .all(|(j, e)| e.as_const() == Some(if i == j { 1.0 } else { 0.0 }))
    })
}

/// Sup of the weight and the weighted integrals over coordinate balls
/// `B_r(center)` for each radius. Sups are taken over a *closed* node grid
/// (boundary included, odd node count) so extrema on the sphere are hit
/// exactly; integrals use the midpoint rule with the same guard exclusion as
/// [`energy`].
pub fn growth_profile(
    problem: &MapProblem,
    center: &[f64],
    radii: &[f64],
    resolution: usize,
    env: &ParamEnv,
) -> Result<GrowthProfile> {
    if resolution < 2 {
        return Err(QuadratureError::Resolution(resolution));
    }
    if radii.is_empty() {
        return Err(QuadratureError::InvalidRegion("no radii given".into()));
    }
    if radii.iter().any(|r| !r.is_finite()) {
        return Err(QuadratureError::InvalidRegion("radii must be finite".into()));
    }
    for pair in radii.windows(2) {
        if pair[0] >= pair[1] {
            return Err(QuadratureError::InvalidRegion(
                "radii must be strictly increasing".into(),
            ));
        }
    }
    if radii[0] <= 0.0 {
        return Err(QuadratureError::InvalidRegion(
            "radii must be positive".into(),
        ));
    }
    let chart = problem.domain();
    let weight = problem.weight_expr();
    let f_volume = weight.mul(chart.sqrt_det_expr());
    let f_tension_sq = weight
        .mul(&problem.section_normsq_expr(problem.f_tension_field()))
        .mul(chart.sqrt_det_expr());
    let integrals = Program::compile(&[f_volume, f_tension_sq], env)
        .map_err(QuadratureError::Compile)?;
    let sup_program = Program::compile(std::slice::from_ref(weight), env)
        .map_err(QuadratureError::Compile)?;
    let guard = GuardMask::new(chart, env)?;
    // Odd node count so the centre and the axis-aligned boundary points are
    // exact grid nodes.
    let nodes = if resolution % 2 == 1 {
        resolution
    } else {
        resolution + 1
    };

    let mut rows = Vec::with_capacity(radii.len());
    let mut scratch = Vec::new();
    let mut out = Vec::new();
    for &radius in radii {
        let ball = Region::ball(center.to_vec(), radius)?;
        check_region_in_chart(&ball, chart)?;

        // Dense closed-grid sup of the weight over the ball.
        let bbox = ball.bounding_box();
        let mut sup = f64::NEG_INFINITY;
        let mut node = vec![0usize; bbox.len()];
        let mut point = vec![0.0; bbox.len()];
        'nodes: loop {
            for (axis, (lo, hi)) in bbox.iter().enumerate() {
                point[axis] = lo + (hi - lo) * node[axis] as f64 / (nodes - 1) as f64;
            }
            if ball.contains(&point) && !guard.excludes(&point, &mut scratch, &mut out)? {
                sup_program
                    .eval_into(&point, &mut scratch, &mut out)
                    .map_err(|source| QuadratureError::Eval {
                        point: point.clone(),
                        source,
                    })?;
                sup = sup.max(out[0]);
            }
            for axis in (0..node.len()).rev() {
                node[axis] += 1;
                if node[axis] < nodes {
                    continue 'nodes;
                }
                node[axis] = 0;
            }
            break;
        }
        if sup == f64::NEG_INFINITY {
            return Err(QuadratureError::GuardSwallowedRegion);
        }

        // Midpoint integrals over the ball.
        let mut grid = MidpointGrid::new(bbox, resolution);
        let cell_volume = grid.cell_volume();
        let mut centre = Vec::new();
        let mut volumes = Vec::new();
        let mut energies = Vec::new();
        while grid.next_centre(&mut centre) {
            if !ball.contains(&centre) {
                continue;
            }
            if guard.excludes(&centre, &mut scratch, &mut out)? {
                continue;
            }
            integrals
                .eval_into(&centre, &mut scratch, &mut out)
                .map_err(|source| QuadratureError::Eval {
                    point: centre.clone(),
                    source,
                })?;
            volumes.push(out[0]);
            energies.push(out[1]);
        }
        rows.push(GrowthRow {
            radius,
            sup_weight: sup,
            sup_weight_over_r2: sup / (radius * radius),
            weighted_tension_energy: pairwise_sum(&energies) * cell_volume,
            weight_volume: pairwise_sum(&volumes) * cell_volume,
        });
    }
    Ok(GrowthProfile {
        center: center.to_vec(),
        resolution,
        curved_domain_caveat: !is_identity_metric(chart),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::gallery_entry;

    fn cylinder() -> (MapProblem, ParamEnv) {
        let doc = gallery_entry("cylinder-f-biharmonic")
            .unwrap()
            .load()
            .unwrap();
        (doc.problem, doc.params)
    }

    fn strip_region() -> Region {
        Region::bounded_box(vec![(0.0, std::f64::consts::TAU), (0.0, 1.0)]).unwrap()
    }

    #[test]
    fn cylinder_dirichlet_energy_is_exact() {
        let (p, params) = cylinder();
        let r = energy(&p, EnergyKind::Energy, &strip_region(), 256, &params).unwrap();
        // |dφ|² = 2 identically, so the integrand is the constant 1 and the
        // midpoint rule is exact up to roundoff.
        assert!(
            (r.value - std::f64::consts::TAU).abs() <= 1e-9,
            "E = {}",
            r.value
        );
        assert_eq!(r.cells_in_region, 256 * 256);
        assert_eq!(r.cells_excluded_by_guard, 0);
    }

    #[test]
    fn cylinder_weighted_bienergy_matches_the_closed_form() {
        let (p, params) = cylinder();
        let want = std::f64::consts::PI * (1.0 - (-1.0f64).exp());
        let r = energy(
            &p,
            EnergyKind::WeightedBienergy,
            &strip_region(),
            256,
            &params,
        )
        .unwrap();
        assert!((r.value - want).abs() <= 1e-4, "E_f2 = {}", r.value);
    }

    #[test]
    fn refinement_converges_at_second_order() {
        let (p, params) = cylinder();
        let want = std::f64::consts::PI * (1.0 - (-1.0f64).exp());
        let fine = energy(
            &p,
            EnergyKind::WeightedBienergy,
            &strip_region(),
            64,
            &params,
        )
        .unwrap();
        let coarse = energy(
            &p,
            EnergyKind::WeightedBienergy,
            &strip_region(),
            32,
            &params,
        )
        .unwrap();
        let ratio = (coarse.value - want).abs() / (fine.value - want).abs();
        assert!(
            (3.5..=4.5).contains(&ratio),
            "refinement ratio {ratio} (errors {} / {})",
            (coarse.value - want).abs(),
            (fine.value - want).abs()
        );
        assert!(fine.refinement_estimate > 0.0);
    }

    #[test]
    fn unit_weight_collapses_the_weighted_functionals() {
        let (p, params) = cylinder();
        let unweighted = MapProblem::new(
            p.domain().clone(),
            p.target().clone(),
            p.map_exprs().to_vec(),
            Expr::one(),
            &params,
        )
        .unwrap();
        let region = strip_region();
        let plain = energy(&unweighted, EnergyKind::Energy, &region, 64, &params).unwrap();
        let weighted =
            energy(&unweighted, EnergyKind::WeightedEnergy, &region, 64, &params).unwrap();
        assert!((plain.value - weighted.value).abs() <= 1e-14);
        let bi = energy(&unweighted, EnergyKind::Bienergy, &region, 64, &params).unwrap();
        let bi_weighted =
            energy(&unweighted, EnergyKind::BiWeightedEnergy, &region, 64, &params).unwrap();
        assert!((bi.value - bi_weighted.value).abs() <= 1e-14);
    }

    #[test]
    fn harmonic_maps_have_vanishing_bienergy() {
        let doc = gallery_entry("identity-flat-3").unwrap().load().unwrap();
        let region = Region::bounded_box(vec![(-0.8, 0.8); 3]).unwrap();
        let r = energy(&doc.problem, EnergyKind::Bienergy, &region, 24, &doc.params).unwrap();
        assert!(r.value.abs() <= 1e-12, "E_2 = {}", r.value);
    }

    #[test]
    fn ball_and_annulus_masks_measure_area() {
        // Identity map of the flat plane with f ≡ 1: E_f over a region is
        // exactly its area (½·|dφ|²·f = 1).
        let doc = gallery_entry("identity-flat-3").unwrap().load().unwrap();
        let ball = Region::ball(vec![0.0; 3], 0.8).unwrap();
        let r = energy(&doc.problem, EnergyKind::WeightedEnergy, &ball, 96, &doc.params);
        let want = 1.5 * 4.0 / 3.0 * std::f64::consts::PI * 0.8f64.powi(3);
        // |dφ|² = 3 for the 3-dimensional identity, so E_f = 3/2 · vol.
        let got = r.unwrap().value;
        assert!((got - want).abs() <= 0.02, "ball integral {got} vs {want}");

        let annulus = Region::annulus(vec![0.0; 3], 0.4, 0.8).unwrap();
        let got = energy(&doc.problem, EnergyKind::WeightedEnergy, &annulus, 96, &doc.params)
            .unwrap()
            .value;
        let want = 1.5 * 4.0 / 3.0 * std::f64::consts::PI * (0.8f64.powi(3) - 0.4f64.powi(3));
        assert!((got - want).abs() <= 0.02, "annulus integral {got} vs {want}");
    }

    #[test]
    fn guard_exclusion_is_counted_not_silent() {
        let doc = gallery_entry("inversion-f-biharmonic-m3")
            .unwrap()
            .load()
            .unwrap();
        // Annulus reaching inside the guard radius 0.5: the cells within the
        // guarded core are excluded, and the result says so.
        let region = Region::annulus(vec![0.0; 3], 0.4, 1.5).unwrap();
        let r = energy(&doc.problem, EnergyKind::WeightedEnergy, &region, 48, &doc.params)
            .unwrap();
        assert!(r.cells_excluded_by_guard > 0);
        assert!(r.value.is_finite() && r.value > 0.0);

        // A ball inside the guarded core has no usable cells at all.
        let core = Region::ball(vec![0.0; 3], 0.4).unwrap();
        let err = energy(&doc.problem, EnergyKind::WeightedEnergy, &core, 16, &doc.params)
            .unwrap_err();
        assert!(matches!(err, QuadratureError::GuardSwallowedRegion), "{err}");
    }

    #[test]
    fn regions_must_sit_inside_the_chart() {
        let (p, params) = cylinder();
        let region = Region::bounded_box(vec![(0.0, 20.0), (0.0, 1.0)]).unwrap();
        let err = energy(&p, EnergyKind::Energy, &region, 16, &params).unwrap_err();
        assert!(matches!(err, QuadratureError::RegionOutsideChart(_)), "{err}");
        let err = energy(&p, EnergyKind::Energy, &strip_region(), 1, &params).unwrap_err();
        assert!(matches!(err, QuadratureError::Resolution(1)), "{err}");
    }

    #[test]
    fn growth_profile_hits_the_boundary_sup() {
        let (p, params) = cylinder();
        let profile =
            growth_profile(&p, &[0.0, 0.0], &[1.0, 2.0, 4.0], 129, &params).unwrap();
        assert!(!profile.curved_domain_caveat);
        for row in &profile.rows {
            let want = row.radius.exp();
            assert!(
                (row.sup_weight - want).abs() <= 1e-3,
                "sup at r={} is {}, want {}",
                row.radius,
                row.sup_weight,
                want
            );
            assert!((row.sup_weight_over_r2 - want / (row.radius * row.radius)).abs() <= 1e-3);
        }
    }

    #[test]
    fn growth_profile_shows_divergent_weighted_tension_energy() {
        let (p, params) = cylinder();
        let profile = growth_profile(&p, &[0.0, 0.0], &[2.0, 4.0, 8.0], 128, &params).unwrap();
        let e: Vec<f64> = profile
            .rows
            .iter()
            .map(|r| r.weighted_tension_energy)
            .collect();
        assert!(
            e[0] > 0.0 && e[1] > 2.0 * e[0] && e[2] > 2.0 * e[1],
            "energies {e:?} do not grow"
        );
        let v: Vec<f64> = profile.rows.iter().map(|r| r.weight_volume).collect();
        assert!(v[0] < v[1] && v[1] < v[2]);
    }

    #[test]
    fn growth_profile_flags_curved_domains() {
        let doc = gallery_entry("cylinder-biharmonic").unwrap().load().unwrap();
        let profile =
            growth_profile(&doc.problem, &[0.0, 0.0], &[1.0], 65, &doc.params).unwrap();
        assert!(profile.curved_domain_caveat);
    }

    #[test]
    fn functional_keys_parse_with_decoration() {
        assert_eq!(EnergyKind::parse("E").unwrap(), EnergyKind::Energy);
        assert_eq!(EnergyKind::parse("e_f").unwrap(), EnergyKind::WeightedEnergy);
        assert_eq!(EnergyKind::parse("E_{f,2}").unwrap(), EnergyKind::WeightedBienergy);
        assert_eq!(EnergyKind::parse("e_2_f").unwrap(), EnergyKind::BiWeightedEnergy);
        assert_eq!(EnergyKind::parse("E_2").unwrap(), EnergyKind::Bienergy);
        assert!(matches!(
            EnergyKind::parse("E_3"),
            Err(QuadratureError::UnknownFunctional(_))
        ));
        for kind in EnergyKind::ALL {
            assert_eq!(EnergyKind::parse(kind.key()).unwrap(), kind);
        }
    }

    #[test]
    fn quadrature_is_deterministic() {
        let (p, params) = cylinder();
        let a = energy(&p, EnergyKind::WeightedBienergy, &strip_region(), 64, &params).unwrap();
        let b = energy(&p, EnergyKind::WeightedBienergy, &strip_region(), 64, &params).unwrap();
        assert_eq!(a, b);
        let json = serde_json::to_string(&a).unwrap();
        assert!(json.contains("\"kind\":\"E_f2\""), "{json}");
        assert!(json.contains("\"refinement_estimate\""), "{json}");
    }
}
