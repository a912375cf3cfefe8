//! Truncated and modified Riesz potentials, Wolff, Riesz and Havin-Mazya
//! potentials, and the chain of inequalities between them.
//!
//! Scale integrals `int_0^r ... d rho` run over a geometric ladder from
//! `rho = 2h` up to `r` (ratio at most `2^{1/4}`) with the midpoint rule on
//! each rung; on `(0, 2h]` the smallest-ball average is taken as constant and
//! integrated in closed form.
//!
//! ```
//! use gradpot::{potentials, Grid, GridField};
//!
//! let g = Grid::cube(2, -1.0, 1.0, 64).unwrap();
//! let f = GridField::constant(&g, 3.0);
//! let c = potentials::modified_riesz(&f, &[0.0, 0.0], 0.5, 2.0, 8).unwrap();
//! assert!((c.value() - 1.5).abs() < 1e-10);
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{unit_ball_volume, Grid, GridField, RadialProfile};
use crate::report::AuditReport;
use crate::spaces::{maximal_rearrangement, Rearrangement};

/// Largest ratio between consecutive ladder radii.
pub const LADDER_RATIO: f64 = 1.189_207_115_002_721; // 2^{1/4}
pub const MIN_LEVELS: usize = 8;

/// Radii `2h = rho_0 < rho_1 < ... < rho_K = r`, geometric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ladder {
    pub nodes: Vec<f64>,
    pub ratio: f64,
}

impl Ladder {
    /// At least `levels` rungs, and enough rungs that the ratio is at most `2^{1/4}`.
    pub fn new(h: f64, r: f64, levels: usize) -> Result<Self> {
        if levels < MIN_LEVELS {
            return Err(Error::arg(format!("ladder needs at least {MIN_LEVELS} levels, got {levels}")));
        }
        if !(r >= 4.0 * h * (1.0 - 1e-12)) {
            return Err(Error::Resolution(format!("potential radius {r} is below 4h = {}", 4.0 * h)));
        }
        let bottom = 2.0 * h;
        let span = (r / bottom).ln();
        let k = levels.max((span / LADDER_RATIO.ln() - 1e-9).ceil() as usize);
        let ratio = (span / k as f64).exp();
        let mut nodes: Vec<f64> = (0..=k).map(|i| bottom * ratio.powi(i as i32)).collect();
        nodes[k] = r;
        Ok(Ladder { nodes, ratio })
    }

    pub fn bottom(&self) -> f64 {
        self.nodes[0]
    }

    pub fn top(&self) -> f64 {
        *self.nodes.last().expect("ladder is non-empty")
    }

    /// `(a, b, midpoint)` per rung.
    pub fn rungs(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.nodes.windows(2).map(|w| (w[0], w[1], 0.5 * (w[0] + w[1])))
    }

    /// Every radius at which a ball statistic is needed: the bottom and all midpoints.
    pub fn sample_radii(&self) -> Vec<f64> {
        std::iter::once(self.bottom()).chain(self.rungs().map(|r| r.2)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PotentialKind {
    I1,
    IpModified { p: f64 },
    Wolff { beta: f64, pp1: f64 },
    Riesz { beta: f64 },
    HavinMazya { beta: f64, p: f64 },
}

/// `r -> potential(x, r)` on the ladder nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialCurve {
    pub base_point: Vec<f64>,
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    #[serde(flatten)]
    pub kind: PotentialKind,
    pub ladder_ratio: f64,
}

impl PotentialCurve {
    /// Value at the largest radius.
    pub fn value(&self) -> f64 {
        *self.values.last().expect("curves are non-empty")
    }

    /// Writes `r,value` rows to `path` and a JSON header next to it.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "r,value")?;
        for (r, v) in self.radii.iter().zip(&self.values) {
            writeln!(w, "{r:e},{v:e}")?;
        }
        w.flush()?;
        let header = serde_json::json!({
            "kind": self.kind,
            "base_point": self.base_point,
            "ladder_ratio": self.ladder_ratio,
            "bottom": self.radii.first(),
            "rows": self.radii.len(),
        });
        fs::write(path.with_extension("json"), serde_json::to_string_pretty(&header)?)?;
        Ok(())
    }
}

/// Lattice counts and sums of a nonnegative weight over the balls `B_rho(x)`
/// for every radius a ladder needs.
struct BallStats {
    counts: Vec<f64>,
    sums: Vec<f64>,
}

impl BallStats {
    fn new(grid: &Grid, x: &[f64], weight: &[f64], radii: &[f64]) -> Result<Self> {
        let top = radii.iter().copied().fold(0.0, f64::max);
        let prof = RadialProfile::new(grid, x, top * (1.0 + 1e-12))?;
        let prefix = prof.prefix(|c| weight[c]);
        let mut counts = Vec::with_capacity(radii.len());
        let mut sums = Vec::with_capacity(radii.len());
        for &rho in radii {
            let k = prof.count(rho);
            if k == 0 {
                return Err(Error::domain(format!("ball of radius {rho} at {x:?} contains no cell centre")));
            }
            counts.push(k as f64);
            sums.push(prefix[k]);
        }
        Ok(BallStats { counts, sums })
    }

    fn mean(&self, i: usize) -> f64 {
        self.sums[i] / self.counts[i]
    }
}

/// Integrates `phi(i, rho)` over the ladder: `bottom` is the closed-form
/// integral over `(0, 2h]`, and `phi(i, rho_mid)` is the integrand on rung `i`.
fn integrate_ladder(ladder: &Ladder, bottom: f64, mut phi: impl FnMut(usize, f64) -> f64) -> Vec<f64> {
    let mut values = Vec::with_capacity(ladder.nodes.len());
    let mut acc = bottom;
    values.push(acc);
    for (i, (a, b, mid)) in ladder.rungs().enumerate() {
        acc += phi(i + 1, mid) * (b - a);
        values.push(acc);
    }
    values
}

fn check_point(grid: &Grid, x: &[f64]) -> Result<()> {
    if x.len() != grid.dim() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg(format!("base point {x:?} does not match the grid")));
    }
    Ok(())
}

/// `I_1^f(x, r) = int_0^r mean_{B_rho(x)} |f| d rho`.
pub fn truncated_riesz(f: &GridField, x: &[f64], r: f64, levels: usize) -> Result<PotentialCurve> {
    let mut c = modified_riesz(f, x, r, 1.0, levels)?;
    c.kind = PotentialKind::I1;
    Ok(c)
}

/// `Ĩ_p^f(x, r) = int_0^r (mean_{B_rho(x)} |f|^p)^{1/p} d rho`.
pub fn modified_riesz(f: &GridField, x: &[f64], r: f64, p: f64, levels: usize) -> Result<PotentialCurve> {
    if !(p >= 1.0) {
        return Err(Error::arg(format!("exponent p must be >= 1, got {p}")));
    }
    let grid = f.grid();
    check_point(grid, x)?;
    let ladder = Ladder::new(grid.h(), r, levels)?;
    let weight: Vec<f64> = f.magnitude_pow(p).into_values();
    modified_riesz_on(grid, &weight, x, &ladder, p)
}

/// Same as [`modified_riesz`] with `|f|^p` already tabulated.
pub fn modified_riesz_on(grid: &Grid, fp: &[f64], x: &[f64], ladder: &Ladder, p: f64) -> Result<PotentialCurve> {
    let stats = BallStats::new(grid, x, fp, &ladder.sample_radii())?;
    let root = |m: f64| if p == 1.0 { m } else { m.powf(1.0 / p) };
    let bottom = ladder.bottom() * root(stats.mean(0));
    let values = integrate_ladder(ladder, bottom, |i, _| root(stats.mean(i)));
    Ok(PotentialCurve {
        base_point: x.to_vec(),
        radii: ladder.nodes.clone(),
        values,
        kind: if p == 1.0 {
            PotentialKind::I1
        } else {
            PotentialKind::IpModified { p }
        },
        ladder_ratio: ladder.ratio,
    })
}

/// `W^mu_{beta, pp1}(x, r) = int_0^r (mu(B_rho)/rho^{n - beta pp1})^{1/(pp1-1)} d rho/rho`
/// with `mu(B_rho) = omega_n rho^n * (mean density over the lattice points of
/// the ball)`, i.e. the density integrated with the same quadrature as every
/// ball average.
pub fn wolff_potential(mu: &GridField, x: &[f64], r: f64, beta: f64, pp1: f64, levels: usize) -> Result<PotentialCurve> {
    let grid = mu.grid();
    check_point(grid, x)?;
    let n = grid.dim() as f64;
    if !(pp1 > 1.0) || !(beta > 0.0) || beta > n / pp1 + 1e-12 {
        return Err(Error::arg(format!(
            "wolff potential needs pp1 > 1 and 0 < beta <= n/pp1, got beta={beta}, pp1={pp1}"
        )));
    }
    let ladder = Ladder::new(grid.h(), r, levels)?;
    let density = mu.abs().into_values();
    let stats = BallStats::new(grid, x, &density, &ladder.sample_radii())?;
    let wn = unit_ball_volume(grid.dim());
    let inv = 1.0 / (pp1 - 1.0);
    let e = beta * pp1 * inv;
    let bottom = (wn * stats.mean(0)).powf(inv) * ladder.bottom().powf(e) / e;
    let values = integrate_ladder(&ladder, bottom, |i, rho| {
        let mass = wn * rho.powf(n) * stats.mean(i);
        (mass / rho.powf(n - beta * pp1)).powf(inv) / rho
    });
    Ok(PotentialCurve {
        base_point: x.to_vec(),
        radii: ladder.nodes.clone(),
        values,
        kind: PotentialKind::Wolff { beta, pp1 },
        ladder_ratio: ladder.ratio,
    })
}

/// Exact `int_{B_a(0)} |y|^{beta-n} dy` for the ball of a cell's volume.
fn singular_cell_integral(grid: &Grid, beta: f64) -> f64 {
    let n = grid.dim();
    let wn = unit_ball_volume(n);
    let a = (grid.cell_volume() / wn).powf(1.0 / n as f64);
    n as f64 * wn * a.powf(beta) / beta
}

/// `I_beta mu(x) = sum_cells mu(cell) |x - y|^{beta - n}`; the cell containing
/// `x` is integrated exactly over the equal-volume ball centred at `x`.
pub fn riesz_potential(mu: &GridField, x: &[f64], beta: f64) -> Result<f64> {
    let grid = mu.grid();
    check_point(grid, x)?;
    let n = grid.dim();
    if !(beta > 0.0) || beta > n as f64 {
        return Err(Error::arg(format!("riesz potential needs 0 < beta <= n, got {beta}")));
    }
    let own = grid.cell_containing(x);
    Ok(riesz_sum(grid, mu.values(), mu.components(), x, beta, own))
}

fn riesz_sum(grid: &Grid, values: &[f64], comps: usize, x: &[f64], beta: f64, own: Option<usize>) -> f64 {
    let n = grid.dim();
    let e = 0.5 * (beta - n as f64);
    let vol = grid.cell_volume();
    let mut y = vec![0.0; n];
    let mut sum = 0.0;
    for c in 0..grid.len() {
        let m = if comps == 1 {
            values[c].abs()
        } else {
            values[c * comps..(c + 1) * comps].iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        if m == 0.0 {
            continue;
        }
        if Some(c) == own {
            sum += m * singular_cell_integral(grid, beta);
            continue;
        }
        grid.center_into(c, &mut y);
        let d2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
        sum += m * vol * if e == 0.0 { 1.0 } else { d2.powf(e) };
    }
    sum
}

/// `(I_beta |mu|)^{1/p}` at every cell centre; the shared inner layer of the
/// Havin-Mazya potential.
pub fn havin_mazya_inner(mu: &GridField, beta: f64, p: f64) -> Result<GridField> {
    let grid = mu.grid();
    let n = grid.dim() as f64;
    if !(beta > 0.0) || !(p > 0.0) || beta * (p + 1.0) >= n {
        return Err(Error::arg(format!("havin-mazya potential needs beta (p+1) < n, got beta={beta}, p={p}")));
    }
    let vals: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|c| riesz_sum(grid, mu.values(), mu.components(), &grid.center(c), beta, Some(c)).powf(1.0 / p))
        .collect();
    GridField::scalar(grid.clone(), vals)
}

/// `V_{beta, p+1}(mu)(x) = I_beta((I_beta |mu|)^{1/p})(x)`; both layers
/// integrate over the grid box, where `mu` lives.
pub fn havin_mazya_potential(mu: &GridField, x: &[f64], beta: f64, p: f64) -> Result<f64> {
    let inner = havin_mazya_inner(mu, beta, p)?;
    riesz_potential(&inner, x, beta)
}

/// `(log 2)^{-1} 2^{-n/p} + (-log sigma)^{-1} sigma^{-n/p}` as printed.
pub fn tri_bracket(n: usize, p: f64, sigma: f64) -> f64 {
    let np = n as f64 / p;
    2f64.powf(-np) / 2f64.ln() + sigma.powf(-np) / (-sigma.ln())
}

/// The same bracket with `2^{+n/p}` in the first term, which is what the
/// comparison of `B_{r/2}` with `B_rho`, `rho in (r/2, r)`, yields.
pub fn tri_bracket_corrected(n: usize, p: f64, sigma: f64) -> f64 {
    let np = n as f64 / p;
    2f64.powf(np) / 2f64.ln() + sigma.powf(-np) / (-sigma.ln())
}

/// `sum_i r_i (mean_{B_i} |f|^p)^{1/p}` over `r_i = sigma^i r / 2`. Balls
/// below `2h` use the `2h` average, as the ladder bottom does, so the tail is
/// summed in closed form.
pub fn dyadic_sum(f: &GridField, x: &[f64], r: f64, sigma: f64, p: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(Error::arg(format!("sigma must lie in (0, 1), got {sigma}")));
    }
    let grid = f.grid();
    check_point(grid, x)?;
    let bottom = 2.0 * grid.h();
    let mut radii = Vec::new();
    let mut ri = r / 2.0;
    while ri >= bottom {
        radii.push(ri);
        ri *= sigma;
    }
    radii.push(bottom);
    let fp = f.magnitude_pow(p).into_values();
    let stats = BallStats::new(grid, x, &fp, &radii)?;
    let root = |m: f64| m.powf(1.0 / p);
    let k = radii.len() - 1;
    let mut sum: f64 = (0..k).map(|i| radii[i] * root(stats.mean(i))).sum();
    // r_k, r_k sigma, ... all below 2h
    sum += ri / (1.0 - sigma) * root(stats.mean(k));
    Ok(sum)
}

/// Settings for [`potential_chain_audit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainAuditConfig {
    pub p: f64,
    pub x_samples: Vec<Vec<f64>>,
    pub r_samples: Vec<f64>,
    pub levels: usize,
    /// Check the dyadic-sum comparison with this ratio as well.
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Fit the Havin-Mazya domination constant (quadratic cost in the grid size).
    #[serde(default)]
    pub havin_mazya: bool,
    #[serde(default)]
    pub seed: u64,
}

/// Tolerance of `I_1 <= Ĩ_p`.
pub const JENSEN_TOL: f64 = 1e-10;
/// Relative tolerance of the Wolff identity.
pub const WOLFF_TOL: f64 = 1e-9;
/// Slack of the rearrangement and dyadic-sum bounds.
pub const CHAIN_SLACK: f64 = 1e-6;

/// Runs, for every `(x, r)`:
/// (a) `I_1 <= Ĩ_p`; (b) `Ĩ_p = omega_n^{-1/p} W^{|f|^p}_{p/(p+1), p+1}`;
/// (c) the fitted constant in `Ĩ_p <= C V_{p/(p+1), p+1}(|f|^p)`;
/// (d) `Ĩ_p(x, r) <= int_0^r [g**(|B_rho|)]^{1/p} d rho` with `g = |f|^p`,
/// on the same ladder and with `|B_rho|` the lattice measure of the ball;
/// and with `sigma` set, the dyadic-sum comparison with the printed bracket.
pub fn potential_chain_audit(f: &GridField, cfg: &ChainAuditConfig) -> Result<AuditReport> {
    let grid = f.grid();
    let n = grid.dim();
    let p = cfg.p;
    if !(p > 1.0 && p < n as f64) {
        return Err(Error::arg(format!("chain audit needs 1 < p < n, got {p}")));
    }
    let fp = f.magnitude_pow(p);
    let g = Rearrangement::of(&fp);
    let wn = unit_ball_volume(n);
    let beta = p / (p + 1.0);
    let inner = if cfg.havin_mazya {
        Some(havin_mazya_inner(&fp, beta, p)?)
    } else {
        None
    };
    let jobs: Vec<(usize, &Vec<f64>, f64)> = cfg
        .x_samples
        .iter()
        .flat_map(|x| cfg.r_samples.iter().map(move |&r| (x, r)))
        .enumerate()
        .map(|(k, (x, r))| (k, x, r))
        .collect();
    struct Row {
        i1: f64,
        ip: f64,
        wolff: f64,
        hm: Option<f64>,
        convi: f64,
        convi_continuum: f64,
        dyadic: Option<(f64, f64)>,
    }
    let rows: Vec<Row> = jobs
        .par_iter()
        .map(|&(_, x, r)| -> Result<Row> {
            let ladder = Ladder::new(grid.h(), r, cfg.levels)?;
            let ip_curve = modified_riesz_on(grid, fp.values(), x, &ladder, p)?;
            let ip = ip_curve.value();
            let i1 = modified_riesz(f, x, r, 1.0, cfg.levels)?.value();
            let wolff = wolff_potential(&fp, x, r, beta, p + 1.0, cfg.levels)?.value();
            let hm = match &inner {
                Some(v) => Some(riesz_potential(v, x, beta)?),
                None => None,
            };
            let counts = BallStats::new(grid, x, fp.values(), &ladder.sample_radii())?.counts;
            let vol = grid.cell_volume();
            let gss = |k: f64| maximal_rearrangement(&g, k * vol).map(|v| v.powf(1.0 / p));
            let mut convi = ladder.bottom() * gss(counts[0])?;
            for (i, (a, b, _)) in ladder.rungs().enumerate() {
                convi += gss(counts[i + 1])? * (b - a);
            }
            let convi_continuum = convi_rhs(&g, n, p, r)?;
            let dyadic = match cfg.sigma {
                Some(s) => Some((dyadic_sum(f, x, r, s, p)?, tri_bracket(n, p, s) * ip)),
                None => None,
            };
            Ok(Row {
                i1,
                ip,
                wolff,
                hm,
                convi,
                convi_continuum,
                dyadic,
            })
        })
        .collect::<Result<_>>()?;
    let mut report = AuditReport::new("potential-chain", cfg.seed);
    let mut hm_c = 0.0f64;
    let mut cont_ratio = 0.0f64;
    let mut tri_ratio = 0.0f64;
    for (&(k, x, r), row) in jobs.iter().zip(&rows) {
        report.record("I1<=Ip", JENSEN_TOL, k, row.ip - row.i1, || format!("x={x:?} r={r} I1={} Ip={}", row.i1, row.ip));
        let w = row.wolff * wn.powf(-1.0 / p);
        report.record("wolff-identity", WOLFF_TOL, k, -(w - row.ip).abs() / row.ip.abs().max(1.0), || {
            format!("x={x:?} r={r} Ip={} wolff={w}", row.ip)
        });
        report.record("convi", CHAIN_SLACK, k, row.convi - row.ip, || {
            format!("x={x:?} r={r} Ip={} rhs={}", row.ip, row.convi)
        });
        if row.convi_continuum > 0.0 {
            cont_ratio = cont_ratio.max(row.ip / row.convi_continuum);
        }
        if let Some(v) = row.hm {
            if v > 0.0 {
                hm_c = hm_c.max(row.ip / v);
            }
        }
        if let Some((lhs, rhs)) = row.dyadic {
            report.record("tri", CHAIN_SLACK, k, rhs - lhs, || format!("x={x:?} r={r} sum={lhs} bound={rhs}"));
            if rhs > 0.0 {
                tri_ratio = tri_ratio.max(lhs / rhs);
            }
        }
    }
    report.measure("convi_continuum_max_ratio", cont_ratio);
    if cfg.havin_mazya {
        report.measure("havin_mazya_constant", hm_c);
    }
    if cfg.sigma.is_some() {
        report.measure("tri_max_ratio", tri_ratio);
    }
    Ok(report)
}

/// `(n omega_n^{1/n})^{-1} int_0^{omega_n r^n} [g**(t) t^{p/n}]^{1/p} dt/t`,
/// the rearrangement bound after the change of variables `t = omega_n rho^n`,
/// by a fine midpoint rule in `rho`.
pub fn convi_rhs(g: &Rearrangement, n: usize, p: f64, r: f64) -> Result<f64> {
    let wn = unit_ball_volume(n);
    let steps = 4096;
    let mut sum = 0.0;
    // int_0^r [g**(omega_n rho^n)]^{1/p} d rho, geometric in rho below the first cell
    let first = (g.cell_measure() / wn).powf(1.0 / n as f64).min(r);
    // g** is constant (= g*(0)) on (0, cell measure]
    sum += first * g.values().first().copied().unwrap_or(0.0).powf(1.0 / p);
    let (a, b) = (first.ln(), r.ln());
    if b > a {
        for i in 0..steps {
            let l0 = a + (b - a) * i as f64 / steps as f64;
            let l1 = a + (b - a) * (i + 1) as f64 / steps as f64;
            let rho = (0.5 * (l0 + l1)).exp();
            let v = maximal_rearrangement(g, wn * rho.powi(n as i32))?;
            sum += v.powf(1.0 / p) * (l1.exp() - l0.exp());
        }
    }
    Ok(sum)
}
