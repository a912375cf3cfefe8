//! Scenario documents: a problem family solved on a grid ladder, then audited.
//!
//! Every audit's parameters are checked against every grid before the first
//! solve; nothing is written when a check fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::expr::Expr;
use crate::grid::{BoxDomain, Grid, GridField};
use crate::harness::{
    self, borderline_potential_trend, inner_region, middle_region, sample_points, BmoConfig, ContinuityConfig,
    DecayConfig, EstimateAudit, GradientConfig, Instance, MappingConfig, Verdict, VmoConfig, W1qConfig,
};
use crate::potentials::{potential_chain_audit, ChainAuditConfig, MIN_LEVELS};
use crate::pucci::OperatorSpec;
use crate::report::AuditReport;
use crate::solver::{solve, Problem, MIN_SOLVE_CELLS, MIN_TOL};
use crate::symmat::SymMatrix;
use crate::{Error, Result};

const BUILTINS: [(&str, &str, &str); 6] = [
    (
        "poisson-radial",
        "Laplacian with f = 4 and u = |x|^2: gradient, VMO, continuity and W1q audits",
        include_str!("../scenarios/poisson-radial.toml"),
    ),
    (
        "bellman-manufactured",
        "ten manufactured Bellman problems: gradient potential estimate under refinement and r-halving",
        include_str!("../scenarios/bellman-manufactured.toml"),
    ),
    (
        "borderline-lorentz-witness",
        "L(2,1) and L^2 minus L(2,1) radial witnesses: potential term under pair shrinking",
        include_str!("../scenarios/borderline-lorentz-witness.toml"),
    ),
    (
        "bmo-witness",
        "constant and 1/|x| right-hand sides: VMO and BMO classification",
        include_str!("../scenarios/bmo-witness.toml"),
    ),
    (
        "mapping-sweep",
        "f = |x|^-a across the Lorentz integrability threshold",
        include_str!("../scenarios/mapping-sweep.toml"),
    ),
    (
        "excess-decay-search",
        "harmonic problems: smallest ratio with excess decay by 1/3, plus an amplitude ladder",
        include_str!("../scenarios/excess-decay-search.toml"),
    ),
];

/// `(name, description)` of every built-in scenario.
pub fn builtins() -> Vec<(&'static str, &'static str)> {
    BUILTINS.iter().map(|(n, d, _)| (*n, *d)).collect()
}

pub fn builtin(name: &str) -> Option<Scenario> {
    BUILTINS
        .iter()
        .find(|(n, _, _)| *n == name)
        .map(|(_, _, text)| Scenario::from_toml(text).expect("built-in scenarios parse"))
}

pub fn builtin_source(name: &str) -> Option<&'static str> {
    BUILTINS.iter().find(|(n, _, _)| *n == name).map(|(_, _, t)| *t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub grids: Vec<usize>,
    #[serde(default = "unit_box")]
    pub domain: BoxDomain,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default, rename = "problem")]
    pub problems: Vec<ProblemSpec>,
    #[serde(default, rename = "audit")]
    pub audits: Vec<AuditSpec>,
}

fn unit_box() -> BoxDomain {
    BoxDomain::cube(2, -1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tol: 1e-8,
            max_iter: 50,
        }
    }
}

/// One problem `F(x, D^2 u) = f` with Dirichlet data. Either `rhs` is given
/// (boundary data from `boundary`, else `exact`, else zero), or `exact` and
/// its `hessian` manufacture `f = F(x, D^2 exact)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    #[serde(default)]
    pub label: String,
    pub operator: OperatorSpec,
    #[serde(default)]
    pub rhs: Option<Expr>,
    #[serde(default)]
    pub boundary: Option<Expr>,
    #[serde(default)]
    pub exact: Option<Expr>,
    #[serde(default)]
    pub hessian: Option<Vec<Vec<Expr>>>,
}

impl ProblemSpec {
    fn validate(&self) -> Result<()> {
        self.operator.validate()?;
        if self.operator.dim != 2 {
            return Err(Error::arg("the solver handles n = 2 only"));
        }
        match (&self.rhs, &self.hessian) {
            (Some(_), Some(_)) => return Err(Error::arg("give either rhs or hessian, not both")),
            (None, None) => return Err(Error::arg("give rhs or exact with hessian")),
            (None, Some(h)) => {
                if self.exact.is_none() {
                    return Err(Error::arg("a hessian needs the exact solution"));
                }
                if h.len() != 2 || h.iter().any(|r| r.len() != 2) {
                    return Err(Error::arg("hessian must be 2x2"));
                }
            }
            _ => {}
        }
        let exprs = [&self.rhs, &self.boundary, &self.exact];
        if exprs.iter().filter_map(|e| e.as_ref()).any(|e| e.required_dim() > 2) {
            return Err(Error::arg("expression uses a coordinate beyond x2"));
        }
        Ok(())
    }

    pub fn problem(&self, grid: &Grid) -> Result<Problem> {
        let rhs = match (&self.rhs, &self.hessian) {
            (Some(f), _) => GridField::from_expr(grid, f)?,
            (None, Some(h)) => {
                let mut v = Vec::with_capacity(grid.len());
                for c in 0..grid.len() {
                    let x = grid.center(c);
                    let m = SymMatrix::from_rows(&[
                        vec![h[0][0].eval(&x), h[0][1].eval(&x)],
                        vec![h[1][0].eval(&x), h[1][1].eval(&x)],
                    ])?;
                    v.push(self.operator.evaluate(&x, &m)?);
                }
                GridField::scalar(grid.clone(), v)?
            }
            (None, None) => return Err(Error::arg("problem has no right-hand side")),
        };
        let boundary = match self.boundary.as_ref().or(self.exact.as_ref()) {
            Some(b) => GridField::from_expr(grid, b)?,
            None => GridField::zeros(grid),
        };
        Problem::new(self.operator.clone(), rhs, boundary)
    }
}

/// Sample points: an explicit list, or `random` uniform points in a region
/// (`inner`, `middle`, `domain`, or a box `{ low, high }`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PointSpec {
    List(Vec<Vec<f64>>),
    Random {
        random: usize,
        #[serde(default)]
        region: Region,
        #[serde(default)]
        extra: Vec<Vec<f64>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Region {
    Named(String),
    Box(BoxDomain),
}

impl Default for Region {
    fn default() -> Self {
        Region::Named("inner".into())
    }
}

impl Region {
    fn resolve(&self, grid: &Grid) -> Result<BoxDomain> {
        Ok(match self {
            Region::Named(n) => match n.as_str() {
                "inner" => inner_region(grid),
                "middle" => middle_region(grid),
                "domain" => grid.domain(),
                other => return Err(Error::arg(format!("unknown region `{other}`"))),
            },
            Region::Box(b) => b.clone(),
        })
    }
}

impl PointSpec {
    fn resolve(&self, grid: &Grid, seed: u64) -> Result<Vec<Vec<f64>>> {
        Ok(match self {
            PointSpec::List(v) => v.clone(),
            PointSpec::Random { random, region, extra } => {
                let mut v = sample_points(&region.resolve(grid)?, *random, seed);
                v.extend(extra.iter().cloned());
                v
            }
        })
    }
}

/// Point pairs: an explicit list, or `random` pairs with a first point in
/// `region` and separation uniform in `[min_sep, max_sep]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PairSpec {
    List(Vec<(Vec<f64>, Vec<f64>)>),
    Random {
        random: usize,
        #[serde(default)]
        region: Region,
        min_sep: f64,
        max_sep: f64,
    },
}

impl PairSpec {
    fn resolve(&self, grid: &Grid, seed: u64) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        use rand::{Rng, SeedableRng};
        Ok(match self {
            PairSpec::List(v) => v.clone(),
            PairSpec::Random {
                random,
                region,
                min_sep,
                max_sep,
            } => {
                let b = region.resolve(grid)?;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let mut out = Vec::with_capacity(*random);
                while out.len() < *random {
                    let a: Vec<f64> = (0..2).map(|k| rng.gen_range(b.low[k]..b.high[k])).collect();
                    let d = rng.gen_range(*min_sep..=*max_sep);
                    let t: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    let c = vec![a[0] + d * t.cos(), a[1] + d * t.sin()];
                    if b.contains(&c, 0.0) {
                        out.push((a, c));
                    }
                }
                out
            }
        })
    }
}

fn default_levels() -> usize {
    MIN_LEVELS
}

fn yes() -> bool {
    true
}

/// An audit with its parameters. `problems` and `grids` select a subset of
/// the scenario's problems and ladder; `record_only` turns the verdict into
/// `recorded`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditSpec {
    #[serde(default)]
    pub problems: Option<Vec<usize>>,
    #[serde(default)]
    pub grids: Option<Vec<usize>>,
    #[serde(default)]
    pub record_only: bool,
    #[serde(flatten)]
    pub kind: AuditKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AuditKind {
    GradientPotential {
        p: f64,
        q: f64,
        r: f64,
        points: PointSpec,
        #[serde(default = "yes")]
        halving: bool,
        #[serde(default)]
        sigma: Option<f64>,
        #[serde(default)]
        n_e: Option<f64>,
    },
    ExcessDecay {
        q: f64,
        r: f64,
        sigmas: Vec<f64>,
        points: PointSpec,
        #[serde(default)]
        sigma_max: Option<f64>,
    },
    VmoDecay {
        p: f64,
        q: f64,
        sigma: f64,
        r: f64,
        rho_fractions: Vec<f64>,
        points: PointSpec,
        #[serde(default)]
        n_e: Option<f64>,
    },
    ContinuityModulus {
        p: f64,
        delta: f64,
        /// The decay ratio; `alpha = -log 3 / log sigma`.
        sigma: f64,
        pairs: PairSpec,
        #[serde(default)]
        n_e: Option<f64>,
    },
    BorderlineTrend {
        p: f64,
        delta: f64,
        point: Vec<f64>,
        sep_cells: usize,
        /// `true` where the potential term is expected to vanish, per problem.
        expect_vanishing: Vec<bool>,
    },
    BmoVmo {
        p: f64,
        q: f64,
        sigma: f64,
        r: f64,
        rho_fractions: Vec<f64>,
        points: PointSpec,
        radii: Vec<f64>,
        #[serde(default)]
        weak_norm: Option<f64>,
        #[serde(default)]
        expect: Option<String>,
        #[serde(default)]
        n_e: Option<f64>,
    },
    W1q {
        p: f64,
        q: f64,
        center: Vec<f64>,
        radius: f64,
    },
    Mapping {
        p: f64,
        q: f64,
        gamma: f64,
        exponents: Vec<f64>,
        #[serde(default)]
        s: Option<f64>,
    },
    PotentialChain {
        p: f64,
        points: PointSpec,
        radii: Vec<f64>,
        #[serde(default)]
        sigma: Option<f64>,
        #[serde(default = "default_levels")]
        levels: usize,
    },
}

impl AuditKind {
    pub fn name(&self) -> &'static str {
        match self {
            AuditKind::GradientPotential { .. } => "gradient-potential",
            AuditKind::ExcessDecay { .. } => "excess-decay",
            AuditKind::VmoDecay { .. } => "vmo-decay",
            AuditKind::ContinuityModulus { .. } => "continuity-modulus",
            AuditKind::BorderlineTrend { .. } => "borderline-trend",
            AuditKind::BmoVmo { .. } => "bmo-vmo",
            AuditKind::W1q { .. } => "w1q",
            AuditKind::Mapping { .. } => "mapping",
            AuditKind::PotentialChain { .. } => "potential-chain",
        }
    }
}

/// A prepared audit with its grid ladder and problem selection.
type Plan = (Prepared, Vec<usize>, Vec<usize>);

/// An audit with points resolved and its configuration checked.
#[derive(Clone, Debug)]
enum Prepared {
    Gradient(GradientConfig),
    Decay(DecayConfig),
    Vmo(VmoConfig),
    Continuity(ContinuityConfig),
    Borderline {
        p: f64,
        delta: f64,
        point: Vec<f64>,
        sep_cells: usize,
        expect: Vec<bool>,
    },
    Bmo(BmoConfig, Option<String>),
    W1q(W1qConfig),
    Mapping(MappingConfig),
    Chain(ChainAuditConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
#[allow(clippy::large_enum_variant)]
pub enum AuditOutput {
    Estimate(EstimateAudit),
    Chain(AuditReport),
}

impl AuditOutput {
    pub fn verdict(&self) -> Verdict {
        match self {
            AuditOutput::Estimate(a) => a.verdict,
            AuditOutput::Chain(r) if r.passed() => Verdict::Pass,
            AuditOutput::Chain(_) => Verdict::Fail,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Re-labels an error with the offending item, keeping its kind.
fn context(e: Error, what: &str) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("{what}: {m}")),
        Error::Domain(m) => Error::Domain(format!("{what}: {m}")),
        Error::Argument(m) => Error::Argument(format!("{what}: {m}")),
        Error::Resolution(m) => Error::Resolution(format!("{what}: {m}")),
        Error::Input(m) => Error::Input(format!("{what}: {m}")),
        Error::Parse(m) => Error::Parse(format!("{what}: {m}")),
        other => other,
    }
}

/// Argument-type failures found during validation count as malformed input.
fn as_parse(e: Error) -> Error {
    match e {
        Error::Argument(m) | Error::Domain(m) | Error::Input(m) => Error::Parse(m),
        other => other,
    }
}

impl AuditSpec {
    fn prepare(&self, grid: &Grid, seed: u64) -> Result<Prepared> {
        let n = grid.dim();
        Ok(match &self.kind {
            AuditKind::GradientPotential {
                p,
                q,
                r,
                points,
                halving,
                sigma,
                n_e,
            } => {
                let cfg = GradientConfig {
                    p: *p,
                    q: *q,
                    r: *r,
                    points: points.resolve(grid, seed)?,
                    n_e: *n_e,
                    halving: *halving,
                    sigma: *sigma,
                    levels: MIN_LEVELS,
                    seed,
                };
                cfg.validate(n)?;
                Prepared::Gradient(cfg)
            }
            AuditKind::ExcessDecay {
                q,
                r,
                sigmas,
                points,
                sigma_max,
            } => {
                let cfg = DecayConfig {
                    q: *q,
                    r: *r,
                    sigmas: sigmas.clone(),
                    points: points.resolve(grid, seed)?,
                    threshold: 1.0 / 3.0,
                    fraction: 0.95,
                    sigma_max: sigma_max.unwrap_or(0.2),
                    seed,
                };
                cfg.validate()?;
                Prepared::Decay(cfg)
            }
            AuditKind::VmoDecay {
                p,
                q,
                sigma,
                r,
                rho_fractions,
                points,
                n_e,
            } => {
                let cfg = VmoConfig {
                    p: *p,
                    q: *q,
                    sigma: *sigma,
                    r: *r,
                    rho_fractions: rho_fractions.clone(),
                    points: points.resolve(grid, seed)?,
                    n_e: *n_e,
                    levels: MIN_LEVELS,
                    seed,
                };
                cfg.validate(n)?;
                Prepared::Vmo(cfg)
            }
            AuditKind::ContinuityModulus {
                p,
                delta,
                sigma,
                pairs,
                n_e,
            } => {
                if !(*sigma > 0.0 && *sigma < 1.0 / 3.0 + 1e-15) {
                    return Err(Error::arg("continuity needs sigma in (0, 1/3] so that alpha <= 1"));
                }
                let cfg = ContinuityConfig {
                    p: *p,
                    delta: *delta,
                    alpha: harness::decay_exponent(*sigma),
                    pairs: pairs.resolve(grid, seed)?,
                    n_e: *n_e,
                    levels: MIN_LEVELS,
                    seed,
                };
                cfg.validate(n)?;
                Prepared::Continuity(cfg)
            }
            AuditKind::BorderlineTrend {
                p,
                delta,
                point,
                sep_cells,
                expect_vanishing,
            } => {
                if !(*p >= 1.0) || !(*delta > 0.0 && *delta <= 1.0) || *sep_cells < 4 || point.len() != n {
                    return Err(Error::arg("borderline trend needs p >= 1, delta in (0, 1], sep_cells >= 4"));
                }
                Prepared::Borderline {
                    p: *p,
                    delta: *delta,
                    point: point.clone(),
                    sep_cells: *sep_cells,
                    expect: expect_vanishing.clone(),
                }
            }
            AuditKind::BmoVmo {
                p,
                q,
                sigma,
                r,
                rho_fractions,
                points,
                radii,
                weak_norm,
                expect,
                n_e,
            } => {
                let cfg = BmoConfig {
                    p: *p,
                    q: *q,
                    sigma: *sigma,
                    r: *r,
                    rho_fractions: rho_fractions.clone(),
                    points: points.resolve(grid, seed)?,
                    radii: radii.clone(),
                    weak_norm: *weak_norm,
                    n_e: *n_e,
                    seed,
                };
                cfg.validate(n)?;
                if let Some(e) = expect {
                    if e != "vmo" && e != "bmo" {
                        return Err(Error::arg(format!("expect must be vmo or bmo, got `{e}`")));
                    }
                }
                Prepared::Bmo(cfg, expect.clone())
            }
            AuditKind::W1q { p, q, center, radius } => {
                let cfg = W1qConfig {
                    p: *p,
                    q: *q,
                    center: center.clone(),
                    radius: *radius,
                    seed,
                };
                cfg.validate(n)?;
                Prepared::W1q(cfg)
            }
            AuditKind::Mapping { p, q, gamma, exponents, s } => {
                let cfg = MappingConfig {
                    p: *p,
                    q: *q,
                    gamma: *gamma,
                    exponents: exponents.clone(),
                    s: *s,
                    seed,
                };
                cfg.validate(n)?;
                Prepared::Mapping(cfg)
            }
            AuditKind::PotentialChain {
                p,
                points,
                radii,
                sigma,
                levels,
            } => {
                if !(*p > 1.0 && *p < n as f64) || radii.is_empty() {
                    return Err(Error::arg("potential chain needs 1 < p < n and radii"));
                }
                Prepared::Chain(ChainAuditConfig {
                    p: *p,
                    x_samples: points.resolve(grid, seed)?,
                    r_samples: radii.clone(),
                    levels: *levels,
                    sigma: *sigma,
                    havin_mazya: false,
                    seed,
                })
            }
        })
    }
}

/// Static per-grid checks of a prepared audit.
fn check_grid(prep: &Prepared, grid: &Grid) -> Result<()> {
    let h = grid.h();
    let at_least = |v: f64, cells: f64, what: &str| -> Result<()> {
        if v < cells * h * (1.0 - 1e-12) {
            return Err(Error::Resolution(format!(
                "{what} = {v} is below {cells}h = {} on the {}-cell grid",
                cells * h,
                grid.cells()[0]
            )));
        }
        Ok(())
    };
    let inside = |pts: &[Vec<f64>], r: f64| -> Result<()> {
        for x in pts {
            let k = grid
                .cell_containing(x)
                .ok_or_else(|| Error::domain(format!("point {x:?} is outside the grid")))?;
            let ball = crate::grid::Ball::new(grid.center(k), r)?;
            if !grid.contains_ball(&ball) {
                return Err(Error::domain(format!("ball of radius {r} at {x:?} leaves the grid box")));
            }
        }
        Ok(())
    };
    match prep {
        Prepared::Gradient(c) => {
            c.validate_grid(h)?;
            inside(&c.points, c.r)?;
        }
        Prepared::Decay(c) => inside(&c.points, c.r)?,
        Prepared::Vmo(c) => {
            let smallest = c.rho_fractions.iter().copied().fold(f64::INFINITY, f64::min);
            at_least(smallest * c.r, 2.0, "smallest rho")?;
            inside(&c.points, c.r)?;
        }
        Prepared::Continuity(c) => {
            for (a, b) in &c.pairs {
                at_least(harness_distance(a, b), 4.0, "pair separation")?;
            }
        }
        Prepared::Borderline { .. } => {}
        Prepared::Bmo(c, _) => {
            let smallest = c.rho_fractions.iter().copied().fold(f64::INFINITY, f64::min);
            at_least(smallest * c.r, 2.0, "smallest rho")?;
            at_least(c.radii.iter().copied().fold(f64::INFINITY, f64::min), 2.0, "modulus radius")?;
            inside(&c.points, c.r)?;
        }
        Prepared::W1q(c) => {
            at_least(c.radius / 2.0, 2.0, "half radius")?;
            inside(std::slice::from_ref(&c.center), c.radius)?;
        }
        Prepared::Mapping(_) => {}
        Prepared::Chain(c) => {
            for r in &c.r_samples {
                at_least(*r, 4.0, "potential radius")?;
            }
        }
    }
    Ok(())
}

fn harness_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub grids: Option<Vec<usize>>,
    pub jobs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditVerdict {
    pub audit: String,
    pub kind: String,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub grids: Vec<usize>,
    pub verdicts: Vec<AuditVerdict>,
    /// Wall-clock seconds per stage; not reproducible.
    pub timings: BTreeMap<String, f64>,
}

impl RunSummary {
    /// Every audit passed or is a documented negative control.
    pub fn all_reached(&self) -> bool {
        self.verdicts.iter().all(|v| v.verdict.reached())
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Scenario::from_toml(&text).map_err(|e| context(e, &path.display().to_string()))
    }

    fn grid(&self, m: usize) -> Result<Grid> {
        let cells = vec![m; self.domain.dim()];
        Grid::new(self.domain.low.clone(), self.domain.high.clone(), cells)
    }

    fn audit_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1)
    }

    fn audit_label(i: usize, a: &AuditSpec) -> String {
        format!("audit {i} ({})", a.kind.name())
    }

    /// The ladder an audit runs on.
    fn audit_grids(&self, a: &AuditSpec, ladder: &[usize]) -> Result<Vec<usize>> {
        match &a.grids {
            None => Ok(ladder.to_vec()),
            Some(g) => {
                if let Some(m) = g.iter().find(|m| !ladder.contains(m)) {
                    return Err(Error::arg(format!("grid {m} is not on the scenario ladder")));
                }
                Ok(g.clone())
            }
        }
    }

    fn audit_problems(&self, a: &AuditSpec) -> Result<Vec<usize>> {
        let all: Vec<usize> = (0..self.problems.len()).collect();
        let p = a.problems.clone().unwrap_or(all);
        if p.is_empty() {
            return Err(Error::arg("audit selects no problem"));
        }
        if let Some(k) = p.iter().find(|&&k| k >= self.problems.len()) {
            return Err(Error::arg(format!("problem {k} does not exist")));
        }
        Ok(p)
    }

    /// Static validation of the whole scenario against `ladder`.
    fn prepare(&self, ladder: &[usize]) -> Result<Vec<Plan>> {
        if self.domain.dim() != 2 {
            return Err(Error::Parse("scenarios are two-dimensional".into()));
        }
        if ladder.is_empty() || ladder.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Parse(format!("grid ladder {ladder:?} must be non-empty and strictly refining")));
        }
        for &m in ladder {
            self.grid(m).map_err(as_parse)?;
        }
        if ladder[0] < MIN_SOLVE_CELLS {
            return Err(Error::Resolution(format!(
                "the solver needs at least {MIN_SOLVE_CELLS} cells per axis, the ladder starts at {}",
                ladder[0]
            )));
        }
        if !(self.solver.tol >= MIN_TOL) || self.solver.max_iter == 0 {
            return Err(Error::Parse(format!(
                "solver needs tol >= {MIN_TOL} and max_iter > 0, got {} and {}",
                self.solver.tol, self.solver.max_iter
            )));
        }
        for (k, p) in self.problems.iter().enumerate() {
            p.validate().map_err(|e| as_parse(context(e, &format!("problem {k}"))))?;
        }
        if self.problems.is_empty() && !self.audits.is_empty() {
            return Err(Error::Parse("audits need at least one problem".into()));
        }
        let reference = self.grid(ladder[0]).map_err(as_parse)?;
        self.audits
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let label = Self::audit_label(i, a);
                let wrap = |e: Error| as_parse(context(e, &label));
                let grids = self.audit_grids(a, ladder).map_err(wrap)?;
                let problems = self.audit_problems(a).map_err(wrap)?;
                let prep = a.prepare(&reference, self.audit_seed(i)).map_err(wrap)?;
                if let Prepared::Mapping(c) = &prep {
                    if c.exponents.len() != problems.len() {
                        return Err(wrap(Error::arg("one problem per exponent is required")));
                    }
                }
                if let Prepared::Borderline { expect, .. } = &prep {
                    if expect.len() != problems.len() {
                        return Err(wrap(Error::arg("one expectation per problem is required")));
                    }
                }
                let min_grids = match prep {
                    Prepared::Mapping(_) => 3,
                    Prepared::Borderline { .. } => 2,
                    Prepared::Chain(_) => 1,
                    _ => 2,
                };
                if grids.len() < min_grids {
                    return Err(wrap(Error::arg(format!("needs at least {min_grids} grids"))));
                }
                for &m in &grids {
                    let g = self.grid(m).map_err(as_parse)?;
                    check_grid(&prep, &g).map_err(|e| match e {
                        Error::Resolution(_) => context(e, &label),
                        other => wrap(other),
                    })?;
                }
                Ok((prep, grids, problems))
            })
            .collect()
    }

    /// Checks the scenario against `ladder` (the scenario's own when `None`)
    /// without solving anything.
    pub fn validate(&self, ladder: Option<&[usize]>) -> Result<()> {
        self.prepare(ladder.unwrap_or(&self.grids)).map(|_| ())
    }

    /// Solves, audits, and writes every artifact under `out`.
    pub fn run(&self, out: &Path, opts: &RunOptions) -> Result<RunSummary> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs.unwrap_or(0))
            .build()
            .map_err(|e| Error::arg(e.to_string()))?;
        pool.install(|| self.run_inner(out, opts))
    }

    fn run_inner(&self, out: &Path, opts: &RunOptions) -> Result<RunSummary> {
        let ladder = opts.grids.clone().unwrap_or_else(|| self.grids.clone());
        let prepared = self.prepare(&ladder)?;
        let mut timings = BTreeMap::new();
        let mut solved: BTreeMap<usize, Vec<Instance>> = BTreeMap::new();
        let mut solve_docs = Vec::new();
        for &m in &ladder {
            let grid = self.grid(m)?;
            let mut level = Vec::new();
            for (k, spec) in self.problems.iter().enumerate() {
                let what = format!("problem {k} on the {m}-cell grid");
                let t = Instant::now();
                let prob = spec.problem(&grid).map_err(|e| context(e, &what))?;
                let res = solve(&prob, self.solver.tol, self.solver.max_iter).map_err(|e| context(e, &what))?;
                timings.insert(format!("solve/{m}/{k}"), t.elapsed().as_secs_f64());
                solve_docs.push((
                    m,
                    k,
                    json!({
                        "cells": m,
                        "problem": k,
                        "label": spec.label,
                        "iterations": res.iterations,
                        "sweeps": res.sweeps,
                        "residual": res.residual,
                    }),
                    res.history.clone(),
                    res.u.clone(),
                ));
                level.push(Instance::new(res.u, prob.rhs)?);
            }
            solved.insert(m, level);
        }
        let mut outputs = Vec::new();
        for (i, ((prep, grids, problems), spec)) in prepared.iter().zip(&self.audits).enumerate() {
            let label = Self::audit_label(i, spec);
            let t = Instant::now();
            let levels: Vec<Vec<Instance>> = grids
                .iter()
                .map(|m| problems.iter().map(|&k| solved[m][k].clone()).collect())
                .collect();
            let mut output = run_audit(prep, &levels).map_err(|e| context(e, &label))?;
            if spec.record_only {
                if let AuditOutput::Estimate(a) = &mut output {
                    a.verdict = Verdict::Recorded;
                }
            }
            timings.insert(format!("audit/{i}"), t.elapsed().as_secs_f64());
            outputs.push((i, spec.kind.name(), output));
        }
        fs::create_dir_all(out)?;
        for (m, k, doc, history, u) in &solve_docs {
            let stem = out.join(format!("solve-{m}-{k}"));
            fs::write(stem.with_extension("json"), serde_json::to_string_pretty(doc)?)?;
            let mut csv = String::from("iteration,residual\n");
            for (j, r) in history.iter().enumerate() {
                csv.push_str(&format!("{j},{r:e}\n"));
            }
            fs::write(stem.with_extension("csv"), csv)?;
            u.write_binary(&out.join(format!("u-{m}-{k}.bin")))?;
        }
        let mut verdicts = Vec::new();
        for (i, kind, output) in &outputs {
            let path = out.join(format!("audit-{i}-{kind}.json"));
            match output {
                AuditOutput::Estimate(a) => a.write(&path)?,
                AuditOutput::Chain(r) => fs::write(&path, r.to_json()?)?,
            }
            verdicts.push(AuditVerdict {
                audit: format!("audit-{i}-{kind}"),
                kind: kind.to_string(),
                verdict: output.verdict(),
            });
        }
        let summary = RunSummary {
            scenario: self.name.clone(),
            seed: self.seed,
            grids: ladder,
            verdicts,
            timings,
        };
        fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        Ok(summary)
    }
}

fn run_audit(prep: &Prepared, levels: &[Vec<Instance>]) -> Result<AuditOutput> {
    Ok(match prep {
        Prepared::Gradient(c) => AuditOutput::Estimate(harness::gradient_potential_audit(levels, c)?),
        Prepared::Decay(c) => AuditOutput::Estimate(harness::excess_decay_audit(levels, c)?),
        Prepared::Vmo(c) => AuditOutput::Estimate(harness::vmo_decay_audit(levels, c)?),
        Prepared::Continuity(c) => AuditOutput::Estimate(harness::continuity_modulus_audit(levels, c)?),
        Prepared::Borderline {
            p,
            delta,
            point,
            sep_cells,
            expect,
        } => AuditOutput::Estimate(borderline_audit(levels, *p, *delta, point, *sep_cells, expect)?),
        Prepared::Bmo(c, expect) => {
            let mut a = harness::bmo_vmo_criteria_audit(levels, c)?;
            if let Some(e) = expect {
                if a.labels.get("input-class") != Some(e) || a.labels.get("gradient-class") != Some(e) {
                    a.verdict = Verdict::Fail;
                    a.notes.push(format!("expected {e}"));
                }
            }
            AuditOutput::Estimate(a)
        }
        Prepared::W1q(c) => AuditOutput::Estimate(harness::w1q_bound_audit(levels, c)?),
        Prepared::Mapping(c) => AuditOutput::Estimate(harness::mapping_property_audit(levels, c)?),
        Prepared::Chain(c) => {
            let mut total = AuditReport::new("potential-chain", c.seed);
            for level in levels {
                for (k, inst) in level.iter().enumerate() {
                    let r = potential_chain_audit(&inst.f, c)?;
                    let cells = inst.grid().cells()[0];
                    merge_report(&mut total, r, &format!("{cells}/{k}"));
                }
            }
            AuditOutput::Chain(total)
        }
    })
}

fn merge_report(total: &mut AuditReport, r: AuditReport, tag: &str) {
    for c in r.checks {
        match total.checks.iter_mut().find(|t| t.name == c.name) {
            Some(t) => {
                t.samples += c.samples;
                t.violations += c.violations;
                t.worst_margin = t.worst_margin.min(c.worst_margin);
            }
            None => total.checks.push(c),
        }
    }
    total.samples += r.samples;
    total.violations += r.violations;
    total.worst_margin = total.worst_margin.min(r.worst_margin);
    for mut v in r.failures {
        v.detail = format!("{tag}: {}", v.detail);
        total.failures.push(v);
    }
    for (key, v) in r.measured {
        total.measure(format!("{key}@{tag}"), v);
    }
}

/// The potential term of the continuity estimate under pair shrinking for
/// each selected right-hand side. Non-vanishing terms that were expected to
/// persist make the audit a negative control.
fn borderline_audit(
    levels: &[Vec<Instance>],
    p: f64,
    delta: f64,
    point: &[f64],
    sep_cells: usize,
    expect: &[bool],
) -> Result<EstimateAudit> {
    let mut a = EstimateAudit::new("borderline-trend", 0)
        .param("p", p)
        .param("delta", delta)
        .param("sep_cells", sep_cells as f64);
    let mut ok = true;
    for (k, &want) in expect.iter().enumerate() {
        let fields: Vec<GridField> = levels.iter().map(|l| l[k].f.clone()).collect();
        let t = borderline_potential_trend(&fields, point, p, delta, sep_cells, MIN_LEVELS)?;
        ok &= t.vanishing == want;
        a.labels.insert(
            format!("problem {k}"),
            if t.vanishing { "vanishing" } else { "non-vanishing" }.into(),
        );
        a.measured.insert(format!("loglog_slope/{k}"), t.loglog_slope);
        for (j, (&cells, &v)) in t.cells.iter().zip(&t.values).enumerate() {
            a.samples.push(harness::EstimateSample {
                cells,
                variant: format!("problem {k}"),
                problem: k,
                x: point.to_vec(),
                r: t.separations[j],
                lhs: v,
                rhs: 1.0,
            });
        }
    }
    a.trend = a.samples.iter().filter(|s| s.problem == 0).map(|s| s.lhs).collect();
    a.verdict = if !ok {
        Verdict::Fail
    } else if expect.iter().any(|w| !w) {
        a.notes.push("a non-vanishing potential term is the expected sharpness signal".into());
        Verdict::NegativeControl
    } else {
        Verdict::Pass
    };
    Ok(a)
}
