use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::chain::{build_chain, max_depth};
use super::{
    cells_of, excess_of_gradient, inner_region, ladder_spacings, lq_on, middle_region, sup_on, EstimateAudit,
    EstimateSample, Instance, Verdict,
};
use crate::grid::{unit_ball_volume, Ball, GridField};
use crate::potentials::{convi_rhs, modified_riesz, MIN_LEVELS};
use crate::report::AuditReport;
use crate::spaces::{fit_slope, marcinkiewicz_holder, oscillation_modulus, Rearrangement};
use crate::{Error, Result};

/// Smallest `r / h` for the gradient estimate.
pub const MIN_RADIUS_CELLS: f64 = 16.0;
/// Log-log slope above which a modulus counts as vanishing.
pub const VANISHING_SLOPE: f64 = 0.25;
/// Relative tolerance of the Marcinkiewicz-space Holder check.
pub const HOLDER_TOL: f64 = 0.05;

/// `alpha = -log 3 / log sigma`, computed as `log 3 / log(1/sigma)`.
pub fn decay_exponent(sigma: f64) -> f64 {
    3f64.ln() / (1.0 / sigma).ln()
}

fn default_n_e(n: usize) -> f64 {
    n as f64 / 2.0 + 0.01 * n as f64
}

fn check_p(p: f64, n: usize, n_e: Option<f64>) -> Result<f64> {
    let lo = n_e.unwrap_or_else(|| default_n_e(n));
    if !(p > lo && p <= n as f64) {
        return Err(Error::arg(format!("p = {p} outside ({lo}, {n}]")));
    }
    Ok(lo)
}

fn check_inside(inst: &Instance, ball: &Ball) -> Result<()> {
    if !inst.grid().contains_ball(ball) {
        return Err(Error::domain(format!(
            "ball of radius {} at {:?} leaves the grid box",
            ball.radius, ball.center
        )));
    }
    Ok(())
}

fn potential(inst: &Instance, x: &[f64], r: f64, p: f64, levels: usize) -> Result<f64> {
    Ok(modified_riesz(&inst.f, x, r, p, levels)?.value())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientConfig {
    pub p: f64,
    pub q: f64,
    pub r: f64,
    pub points: Vec<Vec<f64>>,
    #[serde(default)]
    pub n_e: Option<f64>,
    /// Also fit at `r/2` and compare.
    #[serde(default = "yes")]
    pub halving: bool,
    /// Ratio of the dyadic chains checked at every sample.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default = "min_levels")]
    pub levels: usize,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

fn min_levels() -> usize {
    MIN_LEVELS
}

impl GradientConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.q > n as f64) {
            return Err(Error::arg(format!("q = {} must exceed n = {n}", self.q)));
        }
        check_p(self.p, n, self.n_e)?;
        if !(self.r > 0.0) || self.points.is_empty() {
            return Err(Error::arg("need r > 0 and at least one sample point"));
        }
        if let Some(s) = self.sigma {
            if !(0.05..=0.5).contains(&s) {
                return Err(Error::arg(format!("sigma must lie in [0.05, 0.5], got {s}")));
            }
        }
        Ok(())
    }

    /// Radius requirements on a grid of spacing `h`.
    pub fn validate_grid(&self, h: f64) -> Result<()> {
        if self.r < MIN_RADIUS_CELLS * h * (1.0 - 1e-12) {
            return Err(Error::Resolution(format!(
                "r = {} is below 16h = {}",
                self.r,
                MIN_RADIUS_CELLS * h
            )));
        }
        Ok(())
    }
}

/// `|Du(x0)| <= c [I_p(x0, r) + (mean_{B_r} |Du|^q)^{1/q}]` at the cell
/// centres nearest the sample points.
pub fn gradient_potential_audit(levels: &[Vec<Instance>], cfg: &GradientConfig) -> Result<EstimateAudit> {
    let hs = ladder_spacings(levels)?;
    let n = levels[0][0].grid().dim();
    cfg.validate(n)?;
    for &h in hs.values() {
        cfg.validate_grid(h)?;
    }
    let mut audit = EstimateAudit::new("gradient-potential", cfg.seed)
        .param("n", n as f64)
        .param("p", cfg.p)
        .param("q", cfg.q)
        .param("r", cfg.r)
        .param("n_e", cfg.n_e.unwrap_or_else(|| default_n_e(n)));
    let mut checks = AuditReport::new("gradient-potential chains", cfg.seed);
    let mut kappa = 0.0f64;
    for level in levels {
        let h = level[0].grid().h();
        let mut variants = vec![("r", cfg.r)];
        if cfg.halving && cfg.r / 2.0 >= MIN_RADIUS_CELLS * h * (1.0 - 1e-12) {
            variants.push(("r/2", cfg.r / 2.0));
        }
        for (variant, r) in variants {
            for (k, inst) in level.iter().enumerate() {
                let rows = cfg
                    .points
                    .par_iter()
                    .map(|x| {
                        let (flat, x0) = inst.snap(x)?;
                        let ball = Ball::new(x0.clone(), r)?;
                        check_inside(inst, &ball)?;
                        let lhs = inst.du.magnitude(flat);
                        let rhs = potential(inst, &x0, r, cfg.p, cfg.levels)? + inst.du.lp_ball_average(&ball, cfg.q)?;
                        let chain = match cfg.sigma {
                            Some(s) if variant == "r" => {
                                let d = max_depth(r, s, h);
                                Some(build_chain(&inst.du, &inst.f, &x0, r, s, cfg.p, cfg.q, d)?)
                            }
                            _ => None,
                        };
                        Ok((
                            EstimateSample {
                                cells: cells_of(level),
                                variant: variant.into(),
                                problem: k,
                                x: x0,
                                r,
                                lhs,
                                rhs,
                            },
                            chain,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                for (s, chain) in rows {
                    if let Some(c) = chain {
                        kappa = kappa.max(c.audit_into(&mut checks, audit.samples.len()));
                    }
                    audit.samples.push(s);
                }
            }
        }
    }
    let compare: &[&str] = if cfg.halving { &["r/2"] } else { &[] };
    audit.finish(&hs, "r", compare);
    if let Some(s) = cfg.sigma {
        audit.parameters.insert("sigma".into(), s);
        checks.measure("max_kappa", kappa);
        if !checks.passed() {
            audit.verdict = Verdict::Fail;
            audit.notes.push("a chain telescoping inequality failed".into());
        }
        audit.checks = Some(checks);
    }
    Ok(audit)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VmoConfig {
    pub p: f64,
    pub q: f64,
    pub sigma: f64,
    pub r: f64,
    /// Values of `rho / r`, each in `(0, 1]`.
    pub rho_fractions: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    #[serde(default)]
    pub n_e: Option<f64>,
    #[serde(default = "min_levels")]
    pub levels: usize,
    #[serde(default)]
    pub seed: u64,
}

impl VmoConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        check_p(self.p, n, self.n_e)?;
        if !(self.q >= 1.0) || !(self.sigma > 0.0 && self.sigma < 1.0) || !(self.r > 0.0) {
            return Err(Error::arg("need q >= 1, 0 < sigma < 1 and r > 0"));
        }
        if self.rho_fractions.is_empty() || self.rho_fractions.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::arg("rho fractions must lie in (0, 1]"));
        }
        if self.points.is_empty() {
            return Err(Error::arg("need at least one sample point"));
        }
        Ok(())
    }
}

fn check_in_inner(inst: &Instance, x0: &[f64]) -> Result<()> {
    if !inner_region(inst.grid()).contains(x0, 1e-12) {
        return Err(Error::domain(format!("sample {x0:?} is outside the inner region")));
    }
    Ok(())
}

fn check_radius(rho: f64, h: f64, cells: f64, what: &str) -> Result<()> {
    if rho < cells * h * (1.0 - 1e-12) {
        return Err(Error::Resolution(format!("{what} {rho} is below {cells}h = {}", cells * h)));
    }
    Ok(())
}

/// `E_q(B_rho) <= c [(rho/r)^alpha |Du|_{inf, Omega''} + I_p(x0, 2r)]` with
/// `alpha = -log 3 / log sigma`.
pub fn vmo_decay_audit(levels: &[Vec<Instance>], cfg: &VmoConfig) -> Result<EstimateAudit> {
    let hs = ladder_spacings(levels)?;
    let n = levels[0][0].grid().dim();
    cfg.validate(n)?;
    let alpha = decay_exponent(cfg.sigma);
    let mut audit = EstimateAudit::new("vmo-decay", cfg.seed)
        .param("p", cfg.p)
        .param("q", cfg.q)
        .param("sigma", cfg.sigma)
        .param("alpha", alpha)
        .param("r", cfg.r);
    for level in levels {
        let h = level[0].grid().h();
        for t in &cfg.rho_fractions {
            check_radius(t * cfg.r, h, 2.0, "rho")?;
        }
        for (k, inst) in level.iter().enumerate() {
            let sup = sup_on(&inst.du, &middle_region(inst.grid()));
            let rows = cfg
                .points
                .par_iter()
                .map(|x| {
                    let (_, x0) = inst.snap(x)?;
                    check_in_inner(inst, &x0)?;
                    let pot = potential(inst, &x0, 2.0 * cfg.r, cfg.p, cfg.levels)?;
                    cfg.rho_fractions
                        .iter()
                        .map(|t| {
                            let rho = t * cfg.r;
                            Ok(EstimateSample {
                                cells: cells_of(level),
                                variant: "all".into(),
                                problem: k,
                                x: x0.clone(),
                                r: rho,
                                lhs: excess_of_gradient(&inst.du, &Ball::new(x0.clone(), rho)?, cfg.q)?,
                                rhs: t.powf(alpha) * sup + pot,
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            audit.samples.extend(rows.into_iter().flatten());
        }
    }
    audit.finish(&hs, "all", &[]);
    Ok(audit)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuityConfig {
    pub p: f64,
    pub delta: f64,
    pub alpha: f64,
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
    #[serde(default)]
    pub n_e: Option<f64>,
    #[serde(default = "min_levels")]
    pub levels: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ContinuityConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        check_p(self.p, n, self.n_e)?;
        if !(self.delta > 0.0 && self.delta <= 1.0) || !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::arg("need delta and alpha in (0, 1]"));
        }
        if self.pairs.is_empty() {
            return Err(Error::arg("need at least one point pair"));
        }
        Ok(())
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `|Du(x1) - Du(x2)| <= c [|Du|_inf d^{alpha(1-delta)} + max_i I_p(x_i, 4 d^delta)]`
/// with `d = |x1 - x2|` (variant `potential`), and the same with the
/// rearrangement bound of the potential (variant `lorentz`).
pub fn continuity_modulus_audit(levels: &[Vec<Instance>], cfg: &ContinuityConfig) -> Result<EstimateAudit> {
    let hs = ladder_spacings(levels)?;
    let n = levels[0][0].grid().dim();
    cfg.validate(n)?;
    let mut audit = EstimateAudit::new("continuity-modulus", cfg.seed)
        .param("p", cfg.p)
        .param("delta", cfg.delta)
        .param("alpha", cfg.alpha);
    for level in levels {
        let h = level[0].grid().h();
        for (k, inst) in level.iter().enumerate() {
            let sup = sup_on(&inst.du, &middle_region(inst.grid()));
            let fp = Rearrangement::of(&inst.f.magnitude_pow(cfg.p));
            let rows = cfg
                .pairs
                .par_iter()
                .map(|(a, b)| {
                    let (ka, xa) = inst.snap(a)?;
                    let (kb, xb) = inst.snap(b)?;
                    check_in_inner(inst, &xa)?;
                    check_in_inner(inst, &xb)?;
                    let d = distance(&xa, &xb);
                    check_radius(d, h, 4.0, "pair separation")?;
                    let lhs = distance(inst.du.vector_at(ka), inst.du.vector_at(kb));
                    let rho = 4.0 * d.powf(cfg.delta);
                    let pot = potential(inst, &xa, rho, cfg.p, cfg.levels)?
                        .max(potential(inst, &xb, rho, cfg.p, cfg.levels)?);
                    let head = sup * d.powf(cfg.alpha * (1.0 - cfg.delta));
                    let lorentz = convi_rhs(&fp, n, cfg.p, rho)?;
                    let sample = |variant: &str, rhs: f64| EstimateSample {
                        cells: cells_of(level),
                        variant: variant.into(),
                        problem: k,
                        x: xa.iter().chain(&xb).copied().collect(),
                        r: d,
                        lhs,
                        rhs,
                    };
                    Ok([sample("potential", head + pot), sample("lorentz", head + lorentz)])
                })
                .collect::<Result<Vec<_>>>()?;
            audit.samples.extend(rows.into_iter().flatten());
        }
    }
    audit.finish(&hs, "potential", &[]);
    if let Some(c) = audit.fits.iter().rev().find(|f| f.variant == "lorentz") {
        audit.measured.insert("lorentz_fitted_c".into(), c.c);
    }
    Ok(audit)
}

/// Potential term of the continuity estimate at a point under pair shrinking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BorderlineTrend {
    pub cells: Vec<usize>,
    pub separations: Vec<f64>,
    pub values: Vec<f64>,
    /// Slope of `ln value` against `ln ln(1/h)`.
    pub loglog_slope: f64,
    pub vanishing: bool,
}

/// A term decaying like `1/log(1/h)` has log-log slope `-1`, a term with a
/// positive limit slope `0`; the cut sits between.
pub const VANISHING_LOGLOG_SLOPE: f64 = -0.5;

/// `max_{x in {x1, x2}} I_p(x, 4 d^delta)` with `x1` the cell containing
/// `x`, `x2 = x1 + d e_1` and `d = sep_cells h`, over a refinement ladder.
pub fn borderline_potential_trend(
    fields: &[GridField],
    x: &[f64],
    p: f64,
    delta: f64,
    sep_cells: usize,
    levels: usize,
) -> Result<BorderlineTrend> {
    if fields.len() < 2 || sep_cells < 4 {
        return Err(Error::arg("need at least two grids and a separation of at least 4 cells"));
    }
    let mut cells = Vec::new();
    let mut separations = Vec::new();
    let mut values = Vec::new();
    for f in fields {
        let g = f.grid();
        let k = g
            .cell_containing(x)
            .ok_or_else(|| Error::domain(format!("point {x:?} is outside the grid")))?;
        let x1 = g.center(k);
        let d = sep_cells as f64 * g.h();
        let mut x2 = x1.clone();
        x2[0] += d;
        let rho = 4.0 * d.powf(delta);
        let v = modified_riesz(f, &x1, rho, p, levels)?
            .value()
            .max(modified_riesz(f, &x2, rho, p, levels)?.value());
        cells.push(g.cells()[0]);
        separations.push(d);
        values.push(v);
    }
    let x: Vec<f64> = fields.iter().map(|f| (1.0 / f.grid().h()).ln().ln()).collect();
    let y: Vec<f64> = values.iter().map(|v| v.max(1e-300).ln()).collect();
    let loglog_slope = fit_slope(&x, &y);
    Ok(BorderlineTrend {
        cells,
        separations,
        values,
        loglog_slope,
        vanishing: loglog_slope < VANISHING_LOGLOG_SLOPE,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BmoConfig {
    pub p: f64,
    pub q: f64,
    pub sigma: f64,
    pub r: f64,
    pub rho_fractions: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    /// Radii of the `M` and oscillation moduli.
    pub radii: Vec<f64>,
    /// Known weak-`L^n` norm of `f`; enables the Marcinkiewicz-space Holder
    /// check on every sample ball.
    #[serde(default)]
    pub weak_norm: Option<f64>,
    #[serde(default)]
    pub n_e: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl BmoConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        check_p(self.p, n, self.n_e)?;
        if !(self.q >= 1.0) || !(self.sigma > 0.0 && self.sigma < 1.0) || !(self.r > 0.0) {
            return Err(Error::arg("need q >= 1, 0 < sigma < 1 and r > 0"));
        }
        if self.rho_fractions.is_empty() || self.rho_fractions.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::arg("rho fractions must lie in (0, 1]"));
        }
        if self.radii.len() < 2 || self.points.is_empty() {
            return Err(Error::arg("need at least two modulus radii and one sample point"));
        }
        if self.weak_norm.is_some() && !(self.p < n as f64) {
            return Err(Error::arg("the Holder check needs p < n"));
        }
        Ok(())
    }
}

/// `M(r) = sup_{rho <= r} (rho^{p-n} int_{B_rho} |f|^p)^{1/p}` over radii
/// `2h 2^{k/4}` and `r`, with `int_{B_rho} = omega_n rho^n` times the lattice mean.
pub fn morrey_maximal(f: &GridField, x: &[f64], r: f64, p: f64) -> Result<f64> {
    let g = f.grid();
    let wn = unit_ball_volume(g.dim());
    let mut rho = 2.0 * g.h();
    let mut best = 0.0f64;
    let mut radii = Vec::new();
    while rho < r {
        radii.push(rho);
        rho *= 2f64.powf(0.25);
    }
    radii.push(r);
    for rho in radii {
        let mean = f.lp_ball_average(&Ball::new(x.to_vec(), rho)?, p)?;
        best = best.max(wn.powf(1.0 / p) * rho * mean);
    }
    Ok(best)
}

/// `"vanishing"` when the log-log slope of `values` against `radii` exceeds
/// [`VANISHING_SLOPE`] (or all values vanish), `"bounded"` otherwise.
pub fn classify_modulus(radii: &[f64], values: &[f64]) -> (&'static str, f64) {
    if values.iter().all(|v| *v <= 1e-14) {
        return ("vanishing", f64::INFINITY);
    }
    let x: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
    let y: Vec<f64> = values.iter().map(|v| v.max(1e-300).ln()).collect();
    let s = fit_slope(&x, &y);
    (if s > VANISHING_SLOPE { "vanishing" } else { "bounded" }, s)
}

/// BMO/VMO criteria: fits
/// `E_q(B_rho) <= c [r^{-n/q} (rho/r)^alpha |Du|_{L^q(Omega'')} + M(r)]`, and
/// classifies the moduli of `M` and of the mean oscillation of `Du`.
pub fn bmo_vmo_criteria_audit(levels: &[Vec<Instance>], cfg: &BmoConfig) -> Result<EstimateAudit> {
    let hs = ladder_spacings(levels)?;
    let n = levels[0][0].grid().dim();
    cfg.validate(n)?;
    let alpha = decay_exponent(cfg.sigma);
    let mut audit = EstimateAudit::new("bmo-vmo-criteria", cfg.seed)
        .param("p", cfg.p)
        .param("q", cfg.q)
        .param("sigma", cfg.sigma)
        .param("alpha", alpha)
        .param("r", cfg.r);
    let mut checks = AuditReport::new("marcinkiewicz-holder", cfg.seed);
    let mut consistent = true;
    let mut radii = cfg.radii.clone();
    radii.sort_by(f64::total_cmp);
    let mut worst_holder = 0.0f64;
    for level in levels {
        let h = level[0].grid().h();
        let cells = cells_of(level);
        for t in &cfg.rho_fractions {
            check_radius(t * cfg.r, h, 2.0, "rho")?;
        }
        check_radius(radii[0], h, 2.0, "modulus radius")?;
        for (k, inst) in level.iter().enumerate() {
            let lq = lq_on(&inst.du, &middle_region(inst.grid()), cfg.q);
            let snapped = cfg.points.iter().map(|x| Ok(inst.snap(x)?.1)).collect::<Result<Vec<_>>>()?;
            for x0 in &snapped {
                check_in_inner(inst, x0)?;
            }
            let m_curve = radii
                .par_iter()
                .map(|&r| {
                    snapped
                        .iter()
                        .map(|x0| morrey_maximal(&inst.f, x0, r, cfg.p))
                        .try_fold(0.0f64, |a, v| v.map(|v| a.max(v)))
                })
                .collect::<Result<Vec<_>>>()?;
            let osc: Vec<f64> = oscillation_modulus(&inst.du, &radii)?.into_iter().map(|(_, w)| w).collect();
            let (input, s_in) = classify_modulus(&radii, &m_curve);
            let (output, s_out) = classify_modulus(&radii, &osc);
            audit.labels.insert(format!("input@{cells}/{k}"), input.into());
            audit.labels.insert(format!("gradient@{cells}/{k}"), output.into());
            audit.measured.insert(format!("input_slope@{cells}/{k}"), s_in);
            audit.measured.insert(format!("gradient_slope@{cells}/{k}"), s_out);
            consistent &= input == output;
            let rows = snapped
                .par_iter()
                .map(|x0| {
                    let m = morrey_maximal(&inst.f, x0, cfg.r, cfg.p)?;
                    let mut out = Vec::new();
                    let mut holder = Vec::new();
                    for t in &cfg.rho_fractions {
                        let rho = t * cfg.r;
                        let ball = Ball::new(x0.clone(), rho)?;
                        out.push(EstimateSample {
                            cells,
                            variant: "all".into(),
                            problem: k,
                            x: x0.clone(),
                            r: rho,
                            lhs: excess_of_gradient(&inst.du, &ball, cfg.q)?,
                            rhs: cfg.r.powf(-(n as f64) / cfg.q) * t.powf(alpha) * lq + m,
                        });
                        if let Some(w) = cfg.weak_norm {
                            holder.push(marcinkiewicz_holder(&inst.f, &ball, cfg.p, Some(w))?);
                        }
                    }
                    Ok((out, holder))
                })
                .collect::<Result<Vec<_>>>()?;
            for (out, holder) in rows {
                for (lhs, rhs) in holder {
                    worst_holder = worst_holder.max(lhs / rhs);
                    let i = checks.samples;
                    checks.record("holder", HOLDER_TOL, i, 1.0 - lhs / rhs, || {
                        format!("int |f|^p = {lhs:e} exceeds {rhs:e}")
                    });
                }
                audit.samples.extend(out);
            }
        }
    }
    let finest = cells_of(levels.last().unwrap());
    for (key, prefix) in [("input-class", "input"), ("gradient-class", "gradient")] {
        let vanishing = audit.labels.get(&format!("{prefix}@{finest}/0")).map(String::as_str) == Some("vanishing");
        audit.labels.insert(key.into(), if vanishing { "vmo" } else { "bmo" }.into());
    }
    audit.finish(&hs, "all", &[]);
    if !consistent {
        audit.verdict = Verdict::Fail;
        audit.notes.push("input and gradient moduli disagree".into());
    }
    if cfg.weak_norm.is_some() {
        checks.measure("max_ratio", worst_holder);
        if !checks.passed() {
            audit.verdict = Verdict::Fail;
        }
        audit.checks = Some(checks);
    }
    Ok(audit)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct W1qConfig {
    pub p: f64,
    pub q: f64,
    pub center: Vec<f64>,
    pub radius: f64,
    #[serde(default)]
    pub seed: u64,
}

impl W1qConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let nf = n as f64;
        let top = if self.p < nf { nf * self.p / (nf - self.p) } else { f64::INFINITY };
        if !(self.p >= 1.0) || !(self.q >= 1.0 && self.q < top) {
            return Err(Error::arg(format!("need p >= 1 and 1 <= q < {top}, got p = {}, q = {}", self.p, self.q)));
        }
        if !(self.radius > 0.0) || self.center.len() != n {
            return Err(Error::arg("need a positive radius and a centre of the grid dimension"));
        }
        Ok(())
    }
}

/// `(mean_{B_{R/2}} |Du|^q)^{1/q} <= c [sup_{B_R} |u| / R + R (mean_{B_R} |f|^p)^{1/p}]`,
/// the unit-ball bound after rescaling `B_R` to `B_1`.
pub fn w1q_bound_audit(levels: &[Vec<Instance>], cfg: &W1qConfig) -> Result<EstimateAudit> {
    let hs = ladder_spacings(levels)?;
    let n = levels[0][0].grid().dim();
    cfg.validate(n)?;
    let mut audit = EstimateAudit::new("w1q-bound", cfg.seed)
        .param("p", cfg.p)
        .param("q", cfg.q)
        .param("radius", cfg.radius);
    for level in levels {
        let h = level[0].grid().h();
        check_radius(cfg.radius / 2.0, h, 2.0, "half radius")?;
        for (k, inst) in level.iter().enumerate() {
            let ball = Ball::new(cfg.center.clone(), cfg.radius)?;
            check_inside(inst, &ball)?;
            let half = Ball::new(cfg.center.clone(), cfg.radius / 2.0)?;
            let mut sup = 0.0f64;
            inst.grid().for_each_in_ball(&ball, |c, _| {
                if let Some(c) = c {
                    sup = sup.max(inst.u.value(c).abs());
                }
            });
            let lhs = inst.du.lp_ball_average(&half, cfg.q)?;
            let rhs = sup / cfg.radius + cfg.radius * inst.f.lp_ball_average(&ball, cfg.p)?;
            audit.samples.push(EstimateSample {
                cells: cells_of(level),
                variant: "all".into(),
                problem: k,
                x: cfg.center.clone(),
                r: cfg.radius,
                lhs,
                rhs,
            });
            if std::ptr::eq(level, levels.last().unwrap()) {
                audit.measured.insert(format!("ratio/{k}"), if rhs > 0.0 { lhs / rhs } else { 0.0 });
            }
        }
    }
    audit.finish(&hs, "all", &[]);
    Ok(audit)
}


#[cfg(test)]
mod tests {
    use super::super::{inner_region, sample_points, Verdict};
    use super::*;
    use crate::grid::Grid;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(m: usize) -> Grid {
        Grid::cube(2, -1.0, 1.0, m).unwrap()
    }

    fn instance(m: usize, u: impl Fn(&[f64]) -> f64, f: impl Fn(&[f64]) -> f64) -> Instance {
        let g = grid(m);
        Instance::new(GridField::from_fn(&g, u).unwrap(), GridField::from_fn(&g, f).unwrap()).unwrap()
    }

    fn radial_square(m: usize) -> Instance {
        instance(m, |x| x[0] * x[0] + x[1] * x[1], |_| 4.0)
    }

    fn gradient_cfg(r: f64, points: Vec<Vec<f64>>) -> GradientConfig {
        GradientConfig {
            p: 1.5,
            q: 3.0,
            r,
            points,
            n_e: None,
            halving: true,
            sigma: None,
            levels: MIN_LEVELS,
            seed: 7,
        }
    }

    #[test]
    fn alpha_from_sigma() {
        assert_eq!(decay_exponent(1.0 / 3.0), 1.0);
        assert_relative_eq!(decay_exponent(1.0 / 9.0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn gradient_affine_null_case() {
        let levels: Vec<Vec<Instance>> = [64, 128]
            .iter()
            .map(|&m| vec![instance(m, |x| 1.0 + 2.0 * x[0] - x[1], |_| 0.0)])
            .collect();
        let mut cfg = gradient_cfg(0.5, sample_points(&inner_region(levels[0][0].grid()), 16, 1));
        cfg.sigma = Some(0.5);
        let a = gradient_potential_audit(&levels, &cfg).unwrap();
        assert!((a.fitted_c - 1.0).abs() < 1e-12, "{}", a.fitted_c);
        for f in &a.fits {
            assert!((f.c - 1.0).abs() < 1e-12);
        }
        assert_eq!(a.verdict, Verdict::Pass);
        assert!(a.checks.as_ref().unwrap().passed());
    }

    #[test]
    fn gradient_poisson_radial() {
        let levels: Vec<Vec<Instance>> = [256, 384].iter().map(|&m| vec![radial_square(m)]).collect();
        let box08 = crate::grid::BoxDomain::cube(2, -0.8, 0.8);
        let mut points = sample_points(&box08, 60, 3);
        points.extend([vec![0.8, 0.8], vec![-0.8, 0.8], vec![0.8, -0.8], vec![-0.8, -0.8]]);
        let a = gradient_potential_audit(&levels, &gradient_cfg(0.17, points)).unwrap();
        assert!(a.fitted_c <= 3.0);
        assert_eq!(a.verdict, Verdict::Pass, "{:?} {:?}", a.variation, a.fits);
        assert!(a.to_csv().lines().count() > 64);
    }

    #[test]
    fn gradient_preconditions() {
        let levels = vec![vec![radial_square(32)], vec![radial_square(64)]];
        let pts = vec![vec![0.0, 0.0]];
        let mut cfg = gradient_cfg(0.5, pts.clone());
        cfg.q = 2.0;
        assert!(matches!(gradient_potential_audit(&levels, &cfg), Err(Error::Argument(_))));
        cfg.q = 3.0;
        cfg.p = 1.0;
        assert!(matches!(gradient_potential_audit(&levels, &cfg), Err(Error::Argument(_))));
        let cfg = gradient_cfg(0.4, pts);
        assert!(matches!(gradient_potential_audit(&levels, &cfg), Err(Error::Resolution(_))));
        let levels = vec![vec![radial_square(64)], vec![radial_square(128)]];
        let cfg = gradient_cfg(0.5, vec![vec![0.8, 0.0]]);
        assert!(matches!(gradient_potential_audit(&levels, &cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn vmo_decay_poisson_radial() {
        let levels: Vec<Vec<Instance>> = [128, 256].iter().map(|&m| vec![radial_square(m)]).collect();
        let cfg = VmoConfig {
            p: 1.5,
            q: 3.0,
            sigma: 1.0 / 3.0,
            r: 0.25,
            rho_fractions: vec![0.125, 0.25, 0.5, 1.0],
            points: sample_points(&inner_region(levels[0][0].grid()), 24, 2),
            n_e: None,
            levels: MIN_LEVELS,
            seed: 0,
        };
        let a = vmo_decay_audit(&levels, &cfg).unwrap();
        assert_eq!(a.parameters["alpha"], 1.0);
        assert_eq!(a.verdict, Verdict::Pass, "{:?}", a.trend);
        let bad = VmoConfig {
            points: vec![vec![0.9, 0.0]],
            ..cfg
        };
        assert!(matches!(vmo_decay_audit(&levels, &bad), Err(Error::Domain(_))));
    }

    fn pairs(count: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let a: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.4..0.4)).collect();
                let d = rng.gen_range(0.07..0.12);
                let t: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let b = vec![a[0] + d * t.cos(), a[1] + d * t.sin()];
                (a, b)
            })
            .collect()
    }

    fn continuity_cfg(pairs: Vec<(Vec<f64>, Vec<f64>)>) -> ContinuityConfig {
        ContinuityConfig {
            p: 1.5,
            delta: 0.5,
            alpha: 1.0,
            pairs,
            n_e: None,
            levels: MIN_LEVELS,
            seed: 0,
        }
    }

    #[test]
    fn continuity_of_quadratic_and_affine() {
        let levels: Vec<Vec<Instance>> = [128, 256].iter().map(|&m| vec![radial_square(m)]).collect();
        let a = continuity_modulus_audit(&levels, &continuity_cfg(pairs(64, 5))).unwrap();
        assert!(a.fitted_c <= 5.0);
        assert_eq!(a.verdict, Verdict::Pass, "{:?}", a.trend);
        assert!(a.measured["lorentz_fitted_c"] > 0.0);
        let affine: Vec<Vec<Instance>> = [128, 256]
            .iter()
            .map(|&m| vec![instance(m, |x| x[0] - 3.0 * x[1], |_| 0.0)])
            .collect();
        let a = continuity_modulus_audit(&affine, &continuity_cfg(pairs(8, 6))).unwrap();
        assert!(a.samples.iter().all(|s| s.lhs < 1e-12));
        assert_eq!(a.fitted_c, 0.0);
    }

    fn witness(m: usize, k: f64) -> GridField {
        GridField::from_fn(&grid(m), |x| {
            let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
            1.0 / (r * (1f64.exp() / r).ln().powf(k))
        })
        .unwrap()
    }

    #[test]
    fn borderline_sharpness_signal() {
        let cells = [64, 128, 256];
        let l21: Vec<GridField> = cells.iter().map(|&m| witness(m, 2.0)).collect();
        let l2: Vec<GridField> = cells.iter().map(|&m| witness(m, 1.0)).collect();
        let a = borderline_potential_trend(&l21, &[0.0, 0.0], 1.5, 0.5, 4, MIN_LEVELS).unwrap();
        let b = borderline_potential_trend(&l2, &[0.0, 0.0], 1.5, 0.5, 4, MIN_LEVELS).unwrap();
        assert!(a.vanishing, "{a:?}");
        assert!(!b.vanishing, "{b:?}");
        assert!(a.values.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn bmo_criteria_constant_and_weak_witness() {
        let base = BmoConfig {
            p: 1.5,
            q: 3.0,
            sigma: 1.0 / 3.0,
            r: 0.25,
            rho_fractions: vec![0.25, 0.5, 1.0],
            points: vec![vec![0.0, 0.0], vec![0.2, -0.1], vec![-0.3, 0.25]],
            radii: vec![0.0625, 0.125, 0.25],
            weak_norm: None,
            n_e: None,
            seed: 0,
        };
        let smooth: Vec<Vec<Instance>> = [128, 256].iter().map(|&m| vec![radial_square(m)]).collect();
        let a = bmo_vmo_criteria_audit(&smooth, &base).unwrap();
        assert_eq!(a.labels["input-class"], "vmo");
        assert_eq!(a.labels["gradient-class"], "vmo");
        assert_eq!(a.verdict, Verdict::Pass, "{:?} {:?}", a.trend, a.notes);

        // u = |x| solves the Laplace equation with f = 1/|x| away from the origin
        let weak: Vec<Vec<Instance>> = [128, 256]
            .iter()
            .map(|&m| {
                vec![instance(
                    m,
                    |x| (x[0] * x[0] + x[1] * x[1]).sqrt(),
                    |x| 1.0 / (x[0] * x[0] + x[1] * x[1]).sqrt(),
                )]
            })
            .collect();
        let cfg = BmoConfig {
            weak_norm: Some(std::f64::consts::PI.sqrt()),
            ..base
        };
        let a = bmo_vmo_criteria_audit(&weak, &cfg).unwrap();
        assert_eq!(a.labels["input-class"], "bmo");
        assert_eq!(a.labels["gradient-class"], "bmo");
        let checks = a.checks.as_ref().unwrap();
        assert!(checks.passed(), "{checks:?}");
        assert!(checks.measured["max_ratio"] > 0.8);
    }

    #[test]
    fn w1q_bound_affine_and_ladder() {
        let cfg = W1qConfig {
            p: 1.5,
            q: 3.0,
            center: vec![0.0, 0.0],
            radius: 0.8,
            seed: 0,
        };
        let affine: Vec<Vec<Instance>> = [64, 128]
            .iter()
            .map(|&m| vec![instance(m, |x| 0.5 + x[0], |_| 0.0)])
            .collect();
        let a = w1q_bound_audit(&affine, &cfg).unwrap();
        assert!(a.fitted_c.is_finite() && a.fitted_c > 0.0);
        assert_eq!(a.verdict, Verdict::Pass);
        // zero boundary data, f = t: u = t (|x|^2 - 1) / 4 scales linearly in t
        let ladder: Vec<Vec<Instance>> = [64, 128]
            .iter()
            .map(|&m| {
                [1.0, 10.0, 100.0]
                    .iter()
                    .map(|&t| instance(m, move |x| t * (x[0] * x[0] + x[1] * x[1] - 1.0) / 4.0, move |_| t))
                    .collect()
            })
            .collect();
        let a = w1q_bound_audit(&ladder, &cfg).unwrap();
        assert_relative_eq!(a.measured["ratio/0"], a.measured["ratio/2"], max_relative = 1e-10);
        let bad = W1qConfig { q: 6.0, ..cfg };
        assert!(matches!(w1q_bound_audit(&ladder, &bad), Err(Error::Argument(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn potential_term_grows_with_radius(seed in 0u64..1000, r in 0.25f64..0.6, grow in 1.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = grid(32);
            let v: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = GridField::scalar(g, v).unwrap();
            let a = modified_riesz(&f, &[0.03125, 0.03125], r, 1.5, MIN_LEVELS).unwrap().value();
            let b = modified_riesz(&f, &[0.03125, 0.03125], r * grow, 1.5, MIN_LEVELS).unwrap().value();
            prop_assert!(b >= a * (1.0 - 1e-12), "{} < {}", b, a);
        }
    }
}
