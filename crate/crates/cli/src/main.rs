//! Command-line front end: evaluate operators, verify identities, integrate
//! energies, profile growth, browse the gallery, and run the whole suite.
//!
//! Exit codes: `0` success (and all verifications passed), `1` at least one
//! verification failed, `2` usage or load errors.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tensionlab::expr::parse_expr;
use tensionlab::identities::{self, IdentityId, ProblemTraits, VerificationReport};
use tensionlab::mapcalc::{bi_f_laplacian_expr, f_laplacian_expr, f_bi_laplacian_expr};
use tensionlab::problems::{
    gallery_entry, parse_problem, random_scalar_problem, scalar_as_map_problem, CurvatureSign,
    GalleryEntry, ProblemDoc, GALLERY,
};
use tensionlab::quadrature::{self, EnergyKind, Region};
use tensionlab::{ChartManifold, ParamEnv};

/// Exit code for a failed verification (the run worked; the identity didn't).
const EXIT_VERIFICATION_FAILED: u8 = 1;
/// Exit code for usage and load errors.
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "tensionlab",
    version,
    about = "Chart-based calculus for weighted harmonic map operators",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate an operator of a problem at a chart point.
    Eval(EvalArgs),
    /// Verify a catalogue identity by deterministic seeded sampling.
    Verify(VerifyArgs),
    /// Integrate an energy functional over a region of the domain chart.
    Energy(EnergyArgs),
    /// Tabulate the weight sup and weighted energies over growing balls.
    Growth(GrowthArgs),
    /// List the built-in problem gallery, or show one entry in full.
    Gallery(GalleryArgs),
    /// Run every gallery entry against every applicable identity plus the
    /// fixture checks; deterministic for a fixed seed.
    Suite(SuiteArgs),
}

#[derive(Args)]
struct SourceArgs {
    /// Path to a problem document.
    #[arg(long, value_name = "PATH", conflicts_with = "gallery")]
    problem: Option<PathBuf>,
    /// Name of a built-in gallery entry (see `gallery`).
    #[arg(long, value_name = "NAME")]
    gallery: Option<String>,
}

impl SourceArgs {
    fn load(&self) -> Result<(ProblemDoc, Option<&'static GalleryEntry>)> {
        match (&self.problem, &self.gallery) {
            (Some(path), None) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                let doc = parse_problem(&text)
                    .with_context(|| format!("loading {}", path.display()))?;
                Ok((doc, None))
            }
            (None, Some(name)) => {
                let entry = gallery_entry(name).ok_or_else(|| {
                    anyhow!(
                        "unknown gallery entry `{name}`; run `tensionlab gallery` for the list"
                    )
                })?;
                let doc = entry.load().context("loading gallery entry")?;
                Ok((doc, Some(entry)))
            }
            _ => bail!("exactly one of --problem <PATH> or --gallery <NAME> is required"),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct OutputArgs {
    /// Write the report to this file instead of stdout.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Report format.
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

impl OutputArgs {
    fn emit<T: Serialize>(&self, value: &T, text: String) -> Result<()> {
        let rendered = match self.format {
            Format::Text => text,
            Format::Json => {
                let mut s = serde_json::to_string_pretty(value)?;
                s.push('\n');
                s
            }
        };
        match &self.out {
            None => {
                print!("{rendered}");
                Ok(())
            }
            Some(path) => std::fs::write(path, rendered)
                .with_context(|| format!("writing {}", path.display())),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OpName {
    /// Map differential dφ (one row per domain coordinate).
    Differential,
    /// Image φ(x) in target coordinates.
    Image,
    /// Energy density |dφ|².
    EnergyDensity,
    /// Weight f at the point.
    Weight,
    Tension,
    FTension,
    Bitension,
    FBitension,
    /// Weighted bitension assembled by the product-rule expansion.
    FBitensionExpanded,
    BiFTension,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Operator to evaluate.
    #[arg(long, value_enum)]
    op: OpName,
    /// Comma-separated domain coordinates, e.g. `0.5,-1`.
    #[arg(long, value_name = "X1,X2,...")]
    point: String,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Identity key, e.g. THM1 or CONF-TENSION (see `gallery <entry>` for
    /// applicability).
    #[arg(long, value_name = "KEY")]
    identity: String,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Declare the target non-positively curved (gallery entries already
    /// carry this; file-based problems need it for the inequality checks).
    #[arg(long)]
    npc_target: bool,
    /// Declare the doubly weighted bitension identically zero.
    #[arg(long)]
    bi_f_harmonic: bool,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct EnergyArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Functional key: E, E_f, E_2, E_f2, or E_2f.
    #[arg(long, value_name = "KEY")]
    functional: String,
    /// Region: `box:lo..hi,...` | `ball:c1,c2,...:r` | `annulus:c1,...:rin:rout`.
    #[arg(long, value_name = "SPEC")]
    region: String,
    #[arg(long, default_value_t = quadrature::DEFAULT_RESOLUTION)]
    resolution: usize,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct GrowthArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Ball radii, ascending, e.g. `1,2,4`.
    #[arg(long, value_delimiter = ',', value_name = "R1,R2,...")]
    radii: Vec<f64>,
    /// Ball centre (defaults to the origin).
    #[arg(long, value_name = "C1,C2,...")]
    center: Option<String>,
    #[arg(long, default_value_t = quadrature::DEFAULT_RESOLUTION)]
    resolution: usize,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct GalleryArgs {
    /// Show this entry in full (flags, applicable identities, document).
    name: Option<String>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct SuiteArgs {
    #[arg(long, default_value_t = 48)]
    samples: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[command(flatten)]
    output: OutputArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Eval(args) => run_eval(&args),
        Command::Verify(args) => run_verify(&args),
        Command::Energy(args) => run_energy(&args),
        Command::Growth(args) => run_growth(&args),
        Command::Gallery(args) => run_gallery(&args),
        Command::Suite(args) => run_suite(&args),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_VERIFICATION_FAILED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn parse_point(text: &str, expected_dim: usize, what: &str) -> Result<Vec<f64>> {
    let point: Vec<f64> = text
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .with_context(|| format!("parsing {what} component `{t}`"))
        })
        .collect::<Result<_>>()?;
    if point.len() != expected_dim {
        bail!("{what} has {} components, expected {expected_dim}", point.len());
    }
    Ok(point)
}

fn parse_region(spec: &str) -> Result<Region> {
    let (kind, rest) = spec
        .split_once(':')
        .ok_or_else(|| anyhow!("region spec `{spec}` is missing a kind prefix"))?;
    let region = match kind {
        "box" => {
            let bounds = rest
                .split(',')
                .map(|axis| {
                    let (lo, hi) = axis
                        .split_once("..")
                        .ok_or_else(|| anyhow!("box interval `{axis}` is not `lo..hi`"))?;
                    Ok((lo.trim().parse::<f64>()?, hi.trim().parse::<f64>()?))
                })
                .collect::<Result<Vec<_>>>()?;
            Region::bounded_box(bounds)?
        }
        "ball" => {
            let (center, radius) = rest
                .rsplit_once(':')
                .ok_or_else(|| anyhow!("ball spec `{rest}` is not `c1,c2,...:r`"))?;
            let center: Vec<f64> = center
                .split(',')
                .map(|t| Ok(t.trim().parse::<f64>()?))
                .collect::<Result<_>>()?;
            Region::ball(center, radius.trim().parse()?)?
        }
        "annulus" => {
            let (rest2, outer) = rest
                .rsplit_once(':')
                .ok_or_else(|| anyhow!("annulus spec `{rest}` is not `c1,...:rin:rout`"))?;
            let (center, inner) = rest2
                .rsplit_once(':')
                .ok_or_else(|| anyhow!("annulus spec `{rest}` is not `c1,...:rin:rout`"))?;
            let center: Vec<f64> = center
                .split(',')
                .map(|t| Ok(t.trim().parse::<f64>()?))
                .collect::<Result<_>>()?;
            Region::annulus(center, inner.trim().parse()?, outer.trim().parse()?)?
        }
        other => bail!("unknown region kind `{other}` (expected box, ball, or annulus)"),
    };
    Ok(region)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EvalReport {
    problem: String,
    op: String,
    point: Vec<f64>,
    /// One row for most operators; one row per domain coordinate for the
    /// differential.
    values: Vec<Vec<f64>>,
}

fn run_eval(args: &EvalArgs) -> Result<bool> {
    let (doc, _) = args.source.load()?;
    let problem = &doc.problem;
    let env = &doc.params;
    let point = parse_point(&args.point, problem.domain().dim(), "--point")?;
    let (op_key, values): (&str, Vec<Vec<f64>>) = match args.op {
        OpName::Differential => {
            let rows = problem
                .dmap_exprs()
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|e| e.evaluate(&point, env))
                        .collect::<Result<Vec<f64>, _>>()
                })
                .collect::<Result<Vec<_>, _>>()?;
            ("differential", rows)
        }
        OpName::Image => ("image", vec![problem.map_image(&point, env)?]),
        OpName::EnergyDensity => (
            "energy_density",
            vec![vec![problem.dmap_normsq_expr().evaluate(&point, env)?]],
        ),
        OpName::Weight => (
            "weight",
            vec![vec![problem.weight_expr().evaluate(&point, env)?]],
        ),
        OpName::Tension => ("tension", vec![problem.tension(&point, env)?.components]),
        OpName::FTension => ("f_tension", vec![problem.f_tension(&point, env)?.components]),
        OpName::Bitension => ("bitension", vec![problem.bitension(&point, env)?.components]),
        OpName::FBitension => (
            "f_bitension",
            vec![problem.f_bitension(&point, env)?.components],
        ),
        OpName::FBitensionExpanded => {
            let field = problem.f_bitension_expanded_field();
            let row = field
                .components()
                .iter()
                .map(|e| e.evaluate(&point, env))
                .collect::<Result<Vec<f64>, _>>()?;
            ("f_bitension_expanded", vec![row])
        }
        OpName::BiFTension => (
            "bi_f_tension",
            vec![problem.bi_f_tension(&point, env)?.components],
        ),
    };
    let report = EvalReport {
        problem: doc.name.clone(),
        op: op_key.to_string(),
        point,
        values,
    };
    let mut text = format!("{} of {} at {:?}:\n", report.op, report.problem, report.point);
    for row in &report.values {
        let rendered: Vec<String> = row.iter().map(|v| format!("{v:+.12e}")).collect();
        let _ = writeln!(text, "  ({})", rendered.join(", "));
    }
    args.output.emit(&report, text)?;
    Ok(true)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

fn run_verify(args: &VerifyArgs) -> Result<bool> {
    let (doc, entry) = args.source.load()?;
    let id = IdentityId::parse(&args.identity)?;
    let mut traits = entry
        .map(|e| ProblemTraits::from_flags(&e.flags))
        .unwrap_or_default();
    if args.npc_target {
        traits.npc_target = Some(true);
    }
    if args.bi_f_harmonic {
        traits.bi_f_harmonic = Some(true);
    }
    let report = identities::verify(
        id,
        &doc.problem,
        &doc.name,
        traits,
        &doc.params,
        args.samples,
        args.seed,
        args.tol,
    )?;
    let mut text = report.summary_line();
    text.push('\n');
    if let Some(ms) = report.wall_time_ms {
        let _ = writeln!(text, "  wall time: {ms:.1} ms");
    }
    for err in &report.errors {
        let _ = writeln!(text, "  error: {err}");
    }
    let passed = report.passed();
    args.output.emit(&report, text)?;
    Ok(passed)
}

// ---------------------------------------------------------------------------
// energy / growth
// ---------------------------------------------------------------------------

fn run_energy(args: &EnergyArgs) -> Result<bool> {
    let (doc, _) = args.source.load()?;
    let kind = EnergyKind::parse(&args.functional)?;
    let region = parse_region(&args.region)?;
    let result = quadrature::energy(&doc.problem, kind, &region, args.resolution, &doc.params)?;
    let text = format!(
        "{} of {} = {:.9e}\n  region {:?}, resolution {}, cells {} ({} excluded by guard)\n  refinement estimate {:.3e}\n",
        result.kind,
        doc.name,
        result.value,
        region,
        result.resolution,
        result.cells_in_region,
        result.cells_excluded_by_guard,
        result.refinement_estimate,
    );
    args.output.emit(&result, text)?;
    Ok(true)
}

fn run_growth(args: &GrowthArgs) -> Result<bool> {
    let (doc, _) = args.source.load()?;
    let dim = doc.problem.domain().dim();
    let center = match &args.center {
        Some(text) => parse_point(text, dim, "--center")?,
        None => vec![0.0; dim],
    };
    if args.radii.is_empty() {
        bail!("--radii requires at least one radius");
    }
    let profile = quadrature::growth_profile(
        &doc.problem,
        &center,
        &args.radii,
        args.resolution,
        &doc.params,
    )?;
    let mut text = format!(
        "growth profile of {} around {:?} (resolution {})\n",
        doc.name, profile.center, profile.resolution
    );
    if profile.curved_domain_caveat {
        text.push_str(
            "  note: domain metric is not the identity; coordinate balls are not geodesic balls\n",
        );
    }
    text.push_str("  radius | sup f       | sup f / r^2 | int f |tau_f|^2 dv | int f dv\n");
    for row in &profile.rows {
        let _ = writeln!(
            text,
            "  {:>6} | {:<11.5e} | {:<11.5e} | {:<17.5e} | {:<11.5e}",
            row.radius,
            row.sup_weight,
            row.sup_weight_over_r2,
            row.weighted_tension_energy,
            row.weight_volume
        );
    }
    args.output.emit(&profile, text)?;
    Ok(true)
}

// ---------------------------------------------------------------------------
// gallery
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct GalleryItem {
    name: String,
    summary: String,
    harmonic: bool,
    f_harmonic: bool,
    biharmonic: bool,
    f_biharmonic: bool,
    bi_f_harmonic: bool,
    target_curvature: String,
    applicable_identities: Vec<String>,
}

fn curvature_name(sign: CurvatureSign) -> &'static str {
    match sign {
        CurvatureSign::Flat => "flat",
        CurvatureSign::Negative => "negative",
        CurvatureSign::Positive => "positive",
    }
}

fn gallery_item(entry: &GalleryEntry) -> Result<GalleryItem> {
    let doc = entry.load()?;
    let traits = ProblemTraits::from_flags(&entry.flags);
    let applicable = IdentityId::ALL
        .into_iter()
        .filter(|id| identities::applicability(*id, &doc.problem, traits).is_ok())
        .map(|id| id.name().to_string())
        .collect();
    Ok(GalleryItem {
        name: entry.name.to_string(),
        summary: entry.summary.to_string(),
        harmonic: entry.flags.harmonic,
        f_harmonic: entry.flags.f_harmonic,
        biharmonic: entry.flags.biharmonic,
        f_biharmonic: entry.flags.f_biharmonic,
        bi_f_harmonic: entry.flags.bi_f_harmonic,
        target_curvature: curvature_name(entry.flags.target_curvature).to_string(),
        applicable_identities: applicable,
    })
}

fn run_gallery(args: &GalleryArgs) -> Result<bool> {
    match &args.name {
        None => {
            let items: Vec<GalleryItem> = GALLERY
                .iter()
                .map(gallery_item)
                .collect::<Result<_>>()?;
            let mut text = String::new();
            for item in &items {
                let _ = writeln!(text, "{:<28} {}", item.name, item.summary);
            }
            args.output.emit(&items, text)?;
        }
        Some(name) => {
            let entry = gallery_entry(name)
                .ok_or_else(|| anyhow!("unknown gallery entry `{name}`"))?;
            let item = gallery_item(entry)?;
            let mut text = format!("{}\n  {}\n", item.name, item.summary);
            let _ = writeln!(
                text,
                "  flags: harmonic={} f_harmonic={} biharmonic={} f_biharmonic={} bi_f_harmonic={} target={}",
                item.harmonic,
                item.f_harmonic,
                item.biharmonic,
                item.f_biharmonic,
                item.bi_f_harmonic,
                item.target_curvature
            );
            let _ = writeln!(
                text,
                "  applicable identities: {}",
                item.applicable_identities.join(", ")
            );
            text.push_str("  document:\n");
            for line in entry.source.lines() {
                let _ = writeln!(text, "    {line}");
            }
            args.output.emit(&item, text)?;
        }
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// suite
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SkippedCheck {
    identity: String,
    problem: String,
    reason: String,
}

#[derive(Serialize)]
struct FixtureCheck {
    name: String,
    passed: bool,
    detail: String,
}

#[derive(Serialize)]
struct SuiteReport {
    seed: u64,
    samples: usize,
    tolerance: f64,
    identity_checks: Vec<VerificationReport>,
    skipped: Vec<SkippedCheck>,
    fixtures: Vec<FixtureCheck>,
    passed: bool,
}

fn run_suite(args: &SuiteArgs) -> Result<bool> {
    let mut identity_checks = Vec::new();
    let mut skipped = Vec::new();
    for entry in GALLERY {
        let doc = entry
            .load()
            .with_context(|| format!("loading gallery entry {}", entry.name))?;
        let traits = ProblemTraits::from_flags(&entry.flags);
        for id in IdentityId::ALL {
            if let Err(reason) = identities::applicability(id, &doc.problem, traits) {
                skipped.push(SkippedCheck {
                    identity: id.name().to_string(),
                    problem: doc.name.clone(),
                    reason,
                });
                continue;
            }
            let mut report = identities::verify(
                id,
                &doc.problem,
                &doc.name,
                traits,
                &doc.params,
                args.samples,
                args.seed,
                args.tol,
            )?;
            report.strip_timing();
            identity_checks.push(report);
        }
    }
    let fixtures = fixture_checks()?;
    let passed =
        identity_checks.iter().all(|r| r.passed()) && fixtures.iter().all(|f| f.passed);
    let report = SuiteReport {
        seed: args.seed,
        samples: args.samples,
        tolerance: args.tol,
        identity_checks,
        skipped,
        fixtures,
        passed,
    };

    let mut text = String::new();
    for check in &report.identity_checks {
        let _ = writeln!(text, "{}", check.summary_line());
    }
    for skip in &report.skipped {
        let _ = writeln!(
            text,
            "{} on {}: SKIP ({})",
            skip.identity, skip.problem, skip.reason
        );
    }
    for fixture in &report.fixtures {
        let _ = writeln!(
            text,
            "fixture {}: {} ({})",
            fixture.name,
            if fixture.passed { "PASS" } else { "FAIL" },
            fixture.detail
        );
    }
    let _ = writeln!(
        text,
        "suite: {} ({} identity checks, {} skips, {} fixtures)",
        if report.passed { "PASS" } else { "FAIL" },
        report.identity_checks.len(),
        report.skipped.len(),
        report.fixtures.len()
    );
    let passed = report.passed;
    args.output.emit(&report, text)?;
    Ok(passed)
}

fn approx(name: &str, got: &[f64], want: &[f64], tol: f64) -> FixtureCheck {
    let worst = got
        .iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs())
        .fold(0.0f64, f64::max);
    FixtureCheck {
        name: name.to_string(),
        passed: worst <= tol && got.len() == want.len(),
        detail: format!("max deviation {worst:.3e} (tolerance {tol:.0e})"),
    }
}

fn fixture_checks() -> Result<Vec<FixtureCheck>> {
    let mut checks = Vec::new();
    let env = ParamEnv::new();

    // Flat cylinder map: tension and energy density have closed forms.
    let cylinder = gallery_entry("cylinder-f-biharmonic")
        .ok_or_else(|| anyhow!("missing cylinder entry"))?
        .load()?;
    let tau = cylinder.problem.tension(&[0.0, 0.0], &cylinder.params)?;
    checks.push(approx(
        "cylinder-tension-at-origin",
        &tau.components,
        &[-1.0, 0.0, 0.0],
        1e-12,
    ));
    let density = cylinder.problem.dmap_normsq_expr();
    let points = cylinder
        .problem
        .domain()
        .sample_points(25, 42, &cylinder.params)?;
    let worst = points
        .iter()
        .map(|p| density.evaluate(p, &cylinder.params).map(|v| (v - 2.0).abs()))
        .collect::<Result<Vec<f64>, _>>()?
        .into_iter()
        .fold(0.0f64, f64::max);
    checks.push(FixtureCheck {
        name: "cylinder-energy-density".to_string(),
        passed: worst <= 1e-12,
        detail: format!("max |dphi|^2 deviation from 2 is {worst:.3e} at 25 points"),
    });

    // Inversion in four dimensions: tension at the first basis point.
    let inversion = gallery_entry("inversion-f-biharmonic-m4")
        .ok_or_else(|| anyhow!("missing inversion entry"))?
        .load()?;
    let tau = inversion
        .problem
        .tension(&[1.0, 0.0, 0.0, 0.0], &inversion.params)?;
    checks.push(approx(
        "inversion-m4-tension",
        &tau.components,
        &[-4.0, 0.0, 0.0, 0.0],
        1e-10,
    ));

    // Scalar weighted-Laplacian fixtures on the line.
    let line = ChartManifold::euclidean(vec!["x".into()], vec![(0.25, 2.25)])?;
    let x = parse_expr("x", &["x"]).map_err(|e| anyhow!("{e}"))?;
    let u = x.mul(&x);
    let value = f_laplacian_expr(&line, &x, &u).evaluate(&[1.0], &env)?;
    checks.push(approx("line-weighted-laplacian", &[value], &[4.0], 1e-12));
    let f = x.mul(&x);
    let u4 = u.mul(&u);
    let value = f_bi_laplacian_expr(&line, &f, &u4).evaluate(&[1.0], &env)?;
    checks.push(approx("line-f-bi-laplacian", &[value], &[144.0], 1e-12));

    // The doubly weighted bitension of a real-valued map reduces to the
    // iterated weighted Laplacian, with a plus sign.
    let (chart, weight, u_rand) = random_scalar_problem(2, 4242);
    let scalar = bi_f_laplacian_expr(&chart, &weight, &u_rand);
    let problem = scalar_as_map_problem(chart, weight, u_rand, &env)?;
    let points = problem.domain().sample_points(20, 42, &env)?;
    let mut worst = 0.0f64;
    for p in &points {
        let op = problem.bi_f_tension(p, &env)?.components[0];
        let direct = scalar.evaluate(p, &env)?;
        let scale = op.abs().max(direct.abs()).max(1.0);
        worst = worst.max((op - direct).abs() / scale);
    }
    checks.push(FixtureCheck {
        name: "scalar-reduction-sign".to_string(),
        passed: worst <= 1e-10,
        detail: format!("max relative deviation {worst:.3e} over 20 points"),
    });

    // Curvature normalisation of the curved charts used by the inequalities.
    let hyperbolic = gallery_entry("identity-hyperbolic-2")
        .ok_or_else(|| anyhow!("missing hyperbolic entry"))?
        .load()?;
    let chart = hyperbolic.problem.domain();
    let points = chart.sample_points(25, 42, &hyperbolic.params)?;
    let mut worst = 0.0f64;
    for p in &points {
        let k = chart.riemann(p, &hyperbolic.params)?.sectional(0, 1);
        worst = worst.max((k + 1.0).abs());
    }
    checks.push(FixtureCheck {
        name: "hyperbolic-plane-curvature".to_string(),
        passed: worst <= 1e-10,
        detail: format!("max |K + 1| = {worst:.3e} at 25 points"),
    });

    let sphere = gallery_entry("sphere-equator-geodesic")
        .ok_or_else(|| anyhow!("missing sphere entry"))?
        .load()?;
    let chart = sphere.problem.target();
    let points = chart.sample_points(25, 42, &sphere.params)?;
    let mut worst = 0.0f64;
    for p in &points {
        let k = chart.riemann(p, &sphere.params)?.sectional(0, 1);
        worst = worst.max((k - 1.0).abs());
    }
    checks.push(FixtureCheck {
        name: "sphere-curvature".to_string(),
        passed: worst <= 1e-10,
        detail: format!("max |K - 1| = {worst:.3e} at 25 points"),
    });

    Ok(checks)
}
