//! Rearrangements and the Lorentz, Marcinkiewicz, Morrey and BMO functionals.
//!
//! Distribution-function integrals are evaluated exactly on the step function
//! given by the cell values; only the Morrey and BMO suprema are taken over a
//! finite probe family of balls (centres every [`PROBE_STRIDE`] cells, dyadic
//! radii, balls inside the grid box).
//!
//! ```
//! use gradpot::{spaces, Grid, GridField};
//!
//! let g = Grid::cube(2, 0.0, 1.0, 16).unwrap();
//! let one = GridField::constant(&g, 1.0);
//! // L(2,1) functional of the indicator of the unit square
//! let v = spaces::lorentz_n1_functional(&one, 2).unwrap().value;
//! assert!((v - 1.0).abs() < 1e-12);
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{unit_ball_volume, Ball, Grid, GridField};

/// Probe-ball centres sit on every `PROBE_STRIDE`-th cell.
pub const PROBE_STRIDE: usize = 4;

/// Non-increasing rearrangement of `|g|` as a step function: each cell value
/// occupies an interval of length `cell_measure`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rearrangement {
    values: Vec<f64>,
    prefix: Vec<f64>,
    cell_measure: f64,
    total_measure: f64,
}

impl Rearrangement {
    pub fn new(mut values: Vec<f64>, cell_measure: f64) -> Result<Self> {
        if !(cell_measure > 0.0) {
            return Err(Error::arg("cell measure must be positive"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("rearrangement of non-finite values".into()));
        }
        for v in values.iter_mut() {
            *v = v.abs();
        }
        values.sort_by(|a, b| b.total_cmp(a));
        let mut prefix = Vec::with_capacity(values.len() + 1);
        prefix.push(0.0);
        let mut acc = 0.0;
        for v in &values {
            acc += v;
            prefix.push(acc);
        }
        let total_measure = values.len() as f64 * cell_measure;
        Ok(Rearrangement {
            values,
            prefix,
            cell_measure,
            total_measure,
        })
    }

    /// Rearrangement of `|g|` over the whole grid (magnitudes for vector fields).
    pub fn of(g: &GridField) -> Self {
        let vals = (0..g.grid().len()).map(|k| g.magnitude(k)).collect();
        Rearrangement::new(vals, g.grid().cell_volume()).expect("grid fields are finite")
    }

    /// Rearrangement of `|g|` restricted to the lattice points of `ball`; points
    /// outside the grid count with value zero.
    pub fn in_ball(g: &GridField, ball: &Ball) -> Result<Self> {
        let mut vals = Vec::new();
        g.grid().for_each_in_ball(ball, |c, _| vals.push(c.map_or(0.0, |c| g.magnitude(c))));
        if vals.is_empty() {
            return Err(Error::domain("ball contains no cell centre"));
        }
        Rearrangement::new(vals, g.grid().cell_volume())
    }

    /// Sorted values, largest first.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cell_measure(&self) -> f64 {
        self.cell_measure
    }

    pub fn total_measure(&self) -> f64 {
        self.total_measure
    }

    /// `g*(s)`, right-continuous, zero beyond the total measure.
    pub fn value_at(&self, s: f64) -> f64 {
        if s < 0.0 {
            return self.values.first().copied().unwrap_or(0.0);
        }
        let k = (s / self.cell_measure).floor();
        if k >= self.values.len() as f64 {
            0.0
        } else {
            self.values[k as usize]
        }
    }

    /// `int_0^s g*(t) dt`, exact.
    pub fn integral(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        let k = (s / self.cell_measure).floor();
        if k >= self.values.len() as f64 {
            return self.prefix[self.values.len()] * self.cell_measure;
        }
        let k = k as usize;
        self.prefix[k] * self.cell_measure + (s - k as f64 * self.cell_measure) * self.values[k]
    }

    /// `|{|g| > t}|`.
    pub fn distribution(&self, t: f64) -> f64 {
        self.values.partition_point(|&v| v > t) as f64 * self.cell_measure
    }

    /// Distinct positive levels `u_1 > u_2 > ...` with the measure of
    /// `{|g| >= u_j}`.
    pub fn levels(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.values.len() && self.values[i] > 0.0 {
            let u = self.values[i];
            while i < self.values.len() && self.values[i] == u {
                i += 1;
            }
            out.push((u, i as f64 * self.cell_measure));
        }
        out
    }
}

/// `g**(s) = s^{-1} int_0^s g*`.
pub fn maximal_rearrangement(r: &Rearrangement, s: f64) -> Result<f64> {
    if !(s > 0.0) {
        return Err(Error::arg(format!("g** needs s > 0, got {s}")));
    }
    Ok(r.integral(s) / s)
}

/// Which functional a [`NormReport`] holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "space", rename_all = "kebab-case")]
pub enum Space {
    Lorentz { q: f64, gamma: f64 },
    Marcinkiewicz { q: f64 },
    Morrey { q: f64, s: f64 },
    Bmo { r: f64 },
}

impl Space {
    /// Parses `lorentz:q,gamma`, `marcinkiewicz:q`, `morrey:q,s` or `bmo:R`.
    pub fn parse(text: &str) -> Result<Self> {
        let (name, args) = text
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("space `{text}` needs the form name:args")))?;
        let nums: Vec<f64> = args
            .split(',')
            .map(|a| {
                a.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad number `{a}` in `{text}`")))
            })
            .collect::<Result<_>>()?;
        let want = |k: usize| -> Result<()> {
            if nums.len() == k {
                Ok(())
            } else {
                Err(Error::Parse(format!("`{name}` takes {k} argument(s), got {}", nums.len())))
            }
        };
        match name.trim().to_ascii_lowercase().as_str() {
            "lorentz" => {
                want(2)?;
                Ok(Space::Lorentz {
                    q: nums[0],
                    gamma: nums[1],
                })
            }
            "marcinkiewicz" => {
                want(1)?;
                Ok(Space::Marcinkiewicz { q: nums[0] })
            }
            "morrey" => {
                want(2)?;
                Ok(Space::Morrey { q: nums[0], s: nums[1] })
            }
            "bmo" => {
                want(1)?;
                Ok(Space::Bmo { r: nums[0] })
            }
            other => Err(Error::Parse(format!("unknown space `{other}`"))),
        }
    }
}

/// Probe family used for a supremum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub center_stride: usize,
    pub radii: Vec<f64>,
    pub balls: usize,
    pub inside_domain_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    #[serde(flatten)]
    pub space: Space,
    pub value: f64,
    pub quadrature: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_config: Option<ProbeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attaining_ball: Option<Ball>,
}

/// `int_0^inf (t^q |{|g| > t}|)^{gamma/q} dt/t`, exact for step distributions.
pub fn lorentz_functional(g: &GridField, q: f64, gamma: f64) -> Result<NormReport> {
    if !(q > 1.0) || !(gamma > 0.0) {
        return Err(Error::arg(format!("lorentz needs q > 1 and gamma > 0, got ({q}, {gamma})")));
    }
    Ok(NormReport {
        space: Space::Lorentz { q, gamma },
        value: lorentz_of(&Rearrangement::of(g), q, gamma),
        quadrature: "exact step distribution".into(),
        probe_config: None,
        attaining_ball: None,
    })
}

/// Lorentz integral of a rearrangement; see [`lorentz_functional`].
pub fn lorentz_of(r: &Rearrangement, q: f64, gamma: f64) -> f64 {
    let levels = r.levels();
    let mut sum = 0.0;
    for (j, &(u, mu)) in levels.iter().enumerate() {
        let below = levels.get(j + 1).map_or(0.0, |l| l.0);
        sum += mu.powf(gamma / q) * (u.powf(gamma) - below.powf(gamma)) / gamma;
    }
    sum
}

/// `sup_t t^q |{|g| > t}|`, attained as `t` increases to a jump level.
pub fn marcinkiewicz_functional(g: &GridField, q: f64) -> Result<NormReport> {
    if !(q >= 1.0) {
        return Err(Error::arg(format!("marcinkiewicz needs q >= 1, got {q}")));
    }
    Ok(NormReport {
        space: Space::Marcinkiewicz { q },
        value: marcinkiewicz_of(&Rearrangement::of(g), q),
        quadrature: "exact step distribution".into(),
        probe_config: None,
        attaining_ball: None,
    })
}

pub fn marcinkiewicz_of(r: &Rearrangement, q: f64) -> f64 {
    r.levels().iter().map(|&(u, mu)| u.powf(q) * mu).fold(0.0, f64::max)
}

/// `int_0^inf |{|f| > t}|^{1/n} dt`.
pub fn lorentz_n1_functional(f: &GridField, n: usize) -> Result<NormReport> {
    if n != f.grid().dim() {
        return Err(Error::arg(format!("L(n,1) needs n = grid dimension {}, got {n}", f.grid().dim())));
    }
    lorentz_functional(f, n as f64, 1.0)
}

/// Centres of the probe lattice and the dyadic radii `2h 2^k` that fit in
/// the grid box.
fn probe_family(grid: &Grid, max_radius: f64) -> (Vec<usize>, Vec<f64>) {
    let stride = PROBE_STRIDE;
    let centres: Vec<usize> = (0..grid.len())
        .filter(|&c| grid.multi_index(c).iter().all(|i| i % stride == stride / 2))
        .collect();
    let half_width = (0..grid.dim())
        .map(|a| 0.5 * (grid.high()[a] - grid.low()[a]))
        .fold(f64::INFINITY, f64::min);
    let mut radii = Vec::new();
    let mut r = 2.0 * grid.h();
    while r <= max_radius.min(half_width) * (1.0 + 1e-12) {
        radii.push(r);
        r *= 2.0;
    }
    (centres, radii)
}

/// `sup rho^s mean_{B_rho} |g|^q` over probe balls inside the grid box.
pub fn morrey_functional(g: &GridField, q: f64, s: f64) -> Result<NormReport> {
    let n = g.grid().dim() as f64;
    if !(q >= 1.0) || !(0.0..=n).contains(&s) {
        return Err(Error::arg(format!("morrey needs q >= 1 and 0 <= s <= n, got ({q}, {s})")));
    }
    let grid = g.grid();
    let (centres, radii) = probe_family(grid, f64::INFINITY);
    let gq = g.magnitude_pow(q);
    let radii: Vec<f64> = radii
        .into_iter()
        .filter(|&rho| {
            centres.iter().any(|&c| {
                grid.contains_ball(&Ball {
                    center: grid.center(c),
                    radius: rho,
                })
            })
        })
        .collect();
    let (best, ball, count) = radii
        .par_iter()
        .map(|&rho| {
            let mut best = (f64::NEG_INFINITY, None, 0usize);
            for &c in &centres {
                let ball = Ball {
                    center: grid.center(c),
                    radius: rho,
                };
                if !grid.contains_ball(&ball) {
                    continue;
                }
                best.2 += 1;
                let v = rho.powf(s) * gq.ball_average(&ball).unwrap_or(0.0);
                if v > best.0 {
                    best.0 = v;
                    best.1 = Some(ball);
                }
            }
            best
        })
        .reduce(
            || (f64::NEG_INFINITY, None, 0),
            |a, b| {
                let n = a.2 + b.2;
                if b.0 > a.0 {
                    (b.0, b.1, n)
                } else {
                    (a.0, a.1, n)
                }
            },
        );
    if ball.is_none() {
        return Err(Error::Resolution("no probe ball fits inside the grid".into()));
    }
    Ok(NormReport {
        space: Space::Morrey { q, s },
        value: best,
        quadrature: "cell-centre midpoint".into(),
        probe_config: Some(ProbeConfig {
            center_stride: PROBE_STRIDE,
            radii,
            balls: count,
            inside_domain_only: true,
        }),
        attaining_ball: ball,
    })
}

/// Mean oscillation `mean_B |g - (g)_B|` (Euclidean norm for vector fields).
pub fn mean_oscillation(g: &GridField, ball: &Ball) -> Result<f64> {
    let avg = g.ball_average_vector(ball)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    g.grid().for_each_in_ball(ball, |c, _| {
        count += 1;
        let d2: f64 = match c {
            Some(c) => g.vector_at(c).iter().zip(&avg).map(|(v, a)| (v - a) * (v - a)).sum(),
            None => avg.iter().map(|a| a * a).sum(),
        };
        sum += d2.sqrt();
    });
    Ok(sum / count as f64)
}

/// `omega_g(R)` for each requested `R`: sup of the mean oscillation over probe
/// balls inside the grid box with radius `<= R`. Radii `2h 2^k <= R` and `R`
/// itself are probed; the result is a running maximum over the sorted `R`.
pub fn oscillation_modulus(g: &GridField, radii: &[f64]) -> Result<Vec<(f64, f64)>> {
    let grid = g.grid();
    if let Some(r) = radii.iter().find(|&&r| r < 2.0 * grid.h() * (1.0 - 1e-12)) {
        return Err(Error::Resolution(format!("oscillation radius {r} is below 2h = {}", 2.0 * grid.h())));
    }
    let mut sorted = radii.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (centres, mut probe_radii) = probe_family(grid, sorted.last().copied().unwrap_or(0.0));
    probe_radii.extend(sorted.iter().copied());
    probe_radii.sort_by(f64::total_cmp);
    probe_radii.dedup();
    let per_radius: Vec<f64> = probe_radii
        .par_iter()
        .map(|&rho| {
            let mut best = 0.0f64;
            for &c in &centres {
                let ball = Ball {
                    center: grid.center(c),
                    radius: rho,
                };
                if grid.contains_ball(&ball) {
                    if let Ok(v) = mean_oscillation(g, &ball) {
                        best = best.max(v);
                    }
                }
            }
            best
        })
        .collect();
    let mut running = 0.0f64;
    Ok(sorted
        .iter()
        .map(|&r| {
            for (rho, v) in probe_radii.iter().zip(&per_radius) {
                if *rho <= r * (1.0 + 1e-12) {
                    running = running.max(*v);
                }
            }
            (r, running)
        })
        .collect())
}

/// Dispatches on `space`; `bmo:R` reports `omega_g(R)`.
pub fn norm(g: &GridField, space: &Space) -> Result<NormReport> {
    match *space {
        Space::Lorentz { q, gamma } => lorentz_functional(g, q, gamma),
        Space::Marcinkiewicz { q } => marcinkiewicz_functional(g, q),
        Space::Morrey { q, s } => morrey_functional(g, q, s),
        Space::Bmo { r } => {
            let v = oscillation_modulus(g, &[r])?;
            let (centres, radii) = probe_family(g.grid(), r);
            Ok(NormReport {
                space: space.clone(),
                value: v[0].1,
                quadrature: "cell-centre midpoint".into(),
                probe_config: Some(ProbeConfig {
                    center_stride: PROBE_STRIDE,
                    radii,
                    balls: centres.len(),
                    inside_domain_only: true,
                }),
                attaining_ball: None,
            })
        }
    }
}

/// `mean_{B} g <= g**(|B|)` with the lattice count as the ball measure, for
/// `g >= 0`. Returns `(mean, g**(omega_n rho^n), g**(N h^n))`.
pub fn hardy_littlewood(g: &GridField, r: &Rearrangement, ball: &Ball) -> Result<(f64, f64, f64)> {
    let mean = g.abs().ball_average(ball)?;
    let n = g.grid().dim();
    let count = g.grid().lattice_count(ball) as f64;
    let cont = maximal_rearrangement(r, unit_ball_volume(n) * ball.radius.powi(n as i32))?;
    let disc = maximal_rearrangement(r, count * g.grid().cell_volume())?;
    Ok((mean, cont, disc))
}

/// The two sides of the Marcinkiewicz-space Holder inequality on `ball`:
/// `int_B |f|^p` and `omega_n^{1-p/n} n/(n-p) r^{n-p} W^p`, where `W` is
/// `weak` when given and otherwise the discrete `sup_t t |{x in B: |f|>t}|^{1/n}`.
/// The discrete supremum is attained on the few cells next to a singularity
/// and overshoots the continuum value there; pass the known norm for audits.
pub fn marcinkiewicz_holder(f: &GridField, ball: &Ball, p: f64, weak: Option<f64>) -> Result<(f64, f64)> {
    let n = f.grid().dim() as f64;
    if !(1.0..n).contains(&p) {
        return Err(Error::arg(format!("need 1 <= p < n, got {p}")));
    }
    let r = Rearrangement::in_ball(f, ball)?;
    let lhs = r.values().iter().map(|v| v.powf(p)).sum::<f64>() * r.cell_measure();
    let weak = weak.unwrap_or_else(|| weak_norm_of(&r, n));
    let wn = unit_ball_volume(n as usize);
    let rhs = wn.powf(1.0 - p / n) * n / (n - p) * ball.radius.powf(n - p) * weak.powf(p);
    Ok((lhs, rhs))
}

/// `sup_t t |{|g| > t}|^{1/n}`.
pub fn weak_norm_of(r: &Rearrangement, n: f64) -> f64 {
    r.levels().iter().map(|&(u, mu)| u * mu.powf(1.0 / n)).fold(0.0, f64::max)
}

/// Values of a functional over a refinement ladder with least-squares growth
/// laws against `log(1/h)` and `log log(1/h)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrend {
    pub cells: Vec<usize>,
    pub values: Vec<f64>,
    /// Slope of value against `ln(1/h)`.
    pub log_slope: f64,
    /// Slope of `ln(value)` against `ln(1/h)`.
    pub power_slope: f64,
    pub increasing: bool,
}

impl RefinementTrend {
    pub fn new(cells: Vec<usize>, hs: &[f64], values: Vec<f64>) -> Self {
        let x: Vec<f64> = hs.iter().map(|h| (1.0 / h).ln()).collect();
        let log_slope = fit_slope(&x, &values);
        let lv: Vec<f64> = values.iter().map(|v| v.abs().max(1e-300).ln()).collect();
        let power_slope = fit_slope(&x, &lv);
        let increasing = values.windows(2).all(|w| w[1] > w[0]);
        RefinementTrend {
            cells,
            values,
            log_slope,
            power_slope,
            increasing,
        }
    }
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(seed: u64, m: usize) -> GridField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Grid::cube(2, -1.0, 1.0, m).unwrap();
        // repeated values exercise the level bookkeeping
        let vals = (0..g.len())
            .map(|_| (rng.gen_range(-8.0f64..8.0) * 4.0).round() / 4.0)
            .collect();
        GridField::scalar(g, vals).unwrap()
    }

    fn indicator(m: usize) -> (GridField, f64) {
        let g = Grid::cube(2, 0.0, 1.0, m).unwrap();
        let f = GridField::from_fn(&g, |x| if x[0] < 0.25 { 1.0 } else { 0.0 }).unwrap();
        (f, 0.25)
    }

    #[test]
    fn indicator_rearrangement() {
        let (f, m) = indicator(16);
        let r = Rearrangement::of(&f);
        assert_eq!(r.value_at(0.0), 1.0);
        assert_eq!(r.value_at(m - 1e-9), 1.0);
        assert_eq!(r.value_at(m), 0.0);
        for s in [0.01, 0.1, 0.25, 0.5, 1.0, 3.0] {
            let want = (m / s).min(1.0);
            assert!((maximal_rearrangement(&r, s).unwrap() - want).abs() < 1e-14);
        }
        assert!(maximal_rearrangement(&r, 0.0).is_err());
        let neg = f.scaled(-1.0);
        assert_eq!(Rearrangement::of(&neg), r);
    }

    #[test]
    fn radial_rearrangement_matches_inversion() {
        let g = Grid::cube(2, -1.0, 1.0, 256).unwrap();
        let h = g.h();
        let f = GridField::from_fn(&g, |x| {
            let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
            if r < 1.0 {
                r.powf(-0.5)
            } else {
                0.0
            }
        })
        .unwrap();
        let r = Rearrangement::of(&f);
        let pi = std::f64::consts::PI;
        let mut worst = 0.0f64;
        // shell-counting noise is O(h / rho); below ~40 cells it exceeds 5%
        let mut s = 40.0 * h * h;
        while s < 0.95 * pi {
            let want = (s / pi).powf(-0.25);
            worst = worst.max((r.value_at(s) - want).abs() / want);
            s *= 1.1;
        }
        assert!(worst <= 0.05, "{worst}");
    }

    #[test]
    fn lorentz_of_indicator() {
        let (f, m) = indicator(16);
        for (q, gamma) in [(2.0, 1.0), (3.0, 0.5), (1.5, 4.0)] {
            let v = lorentz_functional(&f, q, gamma).unwrap().value;
            let want = m.powf(gamma / q) / gamma;
            assert!((v - want).abs() < 1e-14 * want.max(1.0), "{v} {want}");
        }
        assert!((lorentz_n1_functional(&f, 2).unwrap().value - m.sqrt()).abs() < 1e-14);
        assert!((marcinkiewicz_functional(&f, 2.0).unwrap().value - m).abs() < 1e-15);
        assert!(lorentz_functional(&f, 1.0, 1.0).is_err());
        assert!(lorentz_functional(&f, 2.0, 0.0).is_err());
        assert!(lorentz_n1_functional(&f, 3).is_err());
    }

    #[test]
    fn lorentz_matches_dense_quadrature() {
        let f = random_field(5, 8);
        let r = Rearrangement::of(&f);
        let (q, gamma) = (2.5, 1.3);
        let top = r.values()[0];
        let steps = 400_000;
        let dt = top / steps as f64;
        let mut sum = 0.0;
        for i in 0..steps {
            let t = (i as f64 + 0.5) * dt;
            sum += t.powf(gamma - 1.0) * r.distribution(t).powf(gamma / q) * dt;
        }
        let v = lorentz_of(&r, q, gamma);
        assert!((v - sum).abs() < 1e-6 * v, "{v} {sum}");
    }

    #[test]
    fn weak_lq_of_power_is_refinement_stable() {
        // |x|^{-n/q} has |{g > t}| = omega_n t^{-q}; the functional is pi
        let q = 4.0;
        let mut vals = Vec::new();
        for m in [64, 128, 256] {
            let g = Grid::cube(2, -1.0, 1.0, m).unwrap();
            let f = GridField::from_fn(&g, |x| (x[0] * x[0] + x[1] * x[1]).sqrt().powf(-2.0 / q)).unwrap();
            vals.push(marcinkiewicz_functional(&f, q).unwrap().value);
        }
        for v in &vals {
            assert!((v / vals[2] - 1.0).abs() <= 0.10, "{vals:?}");
        }
    }

    #[test]
    fn l_n1_borderline_witness_grows() {
        // |x|^{-1} / log(e/|x|) is in L^2 but not L(2,1): the functional grows like log log(1/h)
        let mut vals = Vec::new();
        let mut hs = Vec::new();
        for m in [64, 128, 256] {
            let g = Grid::cube(2, -1.0, 1.0, m).unwrap();
            let f = GridField::from_fn(&g, |x| {
                let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
                if r < 1.0 {
                    1.0 / (r * (std::f64::consts::E / r).ln())
                } else {
                    0.0
                }
            })
            .unwrap();
            vals.push(lorentz_n1_functional(&f, 2).unwrap().value);
            hs.push(g.h());
        }
        let t = RefinementTrend::new(vec![64, 128, 256], &hs, vals.clone());
        assert!(t.increasing, "{vals:?}");
        // radial oracle: sqrt(pi) int_{h/2}^1 rho |f'(rho)| d rho, to leading order log log growth
        let oracle = |h: f64| {
            let pi = std::f64::consts::PI;
            let (a, b) = ((h / 2.0f64).ln(), 0.0f64);
            let k = 20_000;
            let mut s = 0.0;
            for i in 0..k {
                let lr = a + (b - a) * (i as f64 + 0.5) / k as f64;
                let r = lr.exp();
                let l = (std::f64::consts::E / r).ln();
                // f = 1/(r l), |f'| = (l - 1)/(r^2 l^2)
                s += pi.sqrt() * r * (l - 1.0) / (r * r * l * l) * r * (b - a) / k as f64;
            }
            s
        };
        let growth = vals[2] - vals[0];
        let want = oracle(hs[2]) - oracle(hs[0]);
        assert!((growth / want - 1.0).abs() < 0.25, "growth {growth} oracle {want}");
    }

    #[test]
    fn morrey_examples() {
        let g = Grid::cube(2, -1.0, 1.0, 32).unwrap();
        let c = GridField::constant(&g, 3.0);
        let rep = morrey_functional(&c, 2.0, 1.0).unwrap();
        let rmax = *rep.probe_config.as_ref().unwrap().radii.last().unwrap();
        assert!((rep.value - 9.0 * rmax).abs() < 1e-12);
        let f = random_field(2, 32);
        let rep = morrey_functional(&f, 3.0, 0.0).unwrap();
        let ball = rep.attaining_ball.clone().unwrap();
        let direct = f.lp_ball_average(&ball, 3.0).unwrap();
        assert!((rep.value.powf(1.0 / 3.0) - direct).abs() < 1e-12);
        // every probe ball is dominated
        let (centres, radii) = probe_family(&g, f64::INFINITY);
        for &cc in centres.iter().step_by(7) {
            for &rho in &radii {
                let b = Ball::new(g.center(cc), rho).unwrap();
                if g.contains_ball(&b) {
                    assert!(f.lp_ball_average(&b, 3.0).unwrap() <= rep.value.powf(1.0 / 3.0) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn morrey_power_weight_stable() {
        // g = |x|^{-s/q}: rho^s mean_{B_rho(0)} |g|^q = 2 pi / (pi (2 - s)) = 2/(2-s) for n = 2
        let (q, s) = (2.0, 1.0);
        let mut vals = Vec::new();
        for m in [64, 128, 256] {
            let g = Grid::cube(2, -1.0, 1.0, m).unwrap();
            let f = GridField::from_fn(&g, |x| (x[0] * x[0] + x[1] * x[1]).sqrt().powf(-s / q)).unwrap();
            let rep = morrey_functional(&f, q, s).unwrap();
            let b = rep.attaining_ball.unwrap();
            let d = (b.center[0].powi(2) + b.center[1].powi(2)).sqrt();
            assert!(d <= b.radius, "attained away from the origin: {b:?}");
            vals.push(rep.value);
        }
        for v in &vals {
            assert!((v / vals[2] - 1.0).abs() <= 0.10, "{vals:?}");
        }
    }

    #[test]
    fn oscillation_examples() {
        let g = Grid::cube(2, -1.0, 1.0, 64).unwrap();
        let radii = [0.125, 0.25, 0.5];
        let c = GridField::constant(&g, 2.0);
        assert!(oscillation_modulus(&c, &radii).unwrap().iter().all(|(_, w)| w.abs() < 1e-12));
        let s = GridField::from_fn(&g, |x| x[0].signum()).unwrap();
        for (_, w) in oscillation_modulus(&s, &radii).unwrap() {
            assert!(w > 0.7, "{w}");
        }
        let lin = GridField::from_fn(&g, |x| x[0]).unwrap();
        let w = oscillation_modulus(&lin, &radii).unwrap();
        // mean |x1| over a disc of radius rho is 4 rho / (3 pi)
        for (r, v) in &w {
            let want = 4.0 * r / (3.0 * std::f64::consts::PI);
            assert!((v / want - 1.0).abs() < 0.1, "R={r} {v} {want}");
        }
        assert!(oscillation_modulus(&lin, &[0.01]).is_err());
    }

    #[test]
    fn hardy_littlewood_on_random_fields() {
        for seed in 0..5 {
            let f = random_field(seed, 32).abs();
            let r = Rearrangement::of(&f);
            let g = f.grid().clone();
            for &c in [0usize, 100, 500, 1000].iter() {
                for rho in [0.1, 0.3, 0.7] {
                    let b = Ball::new(g.center(c), rho).unwrap();
                    let (mean, _, disc) = hardy_littlewood(&f, &r, &b).unwrap();
                    assert!(mean <= disc + 1e-12);
                }
            }
        }
    }

    #[test]
    fn marcinkiewicz_holder_on_inverse_radius() {
        // f = |x|^{-1}, weak-L^2 norm sqrt(pi) on every centred ball: equality case
        let g = Grid::cube(2, -1.0, 1.0, 256).unwrap();
        let f = GridField::from_fn(&g, |x| 1.0 / (x[0] * x[0] + x[1] * x[1]).sqrt()).unwrap();
        let weak = std::f64::consts::PI.sqrt();
        for p in [1.0, 1.5] {
            for r in [0.25, 0.5] {
                let b = Ball::new(vec![0.0, 0.0], r).unwrap();
                let (lhs, rhs) = marcinkiewicz_holder(&f, &b, p, Some(weak)).unwrap();
                assert!(lhs <= 1.05 * rhs, "p={p} r={r} {lhs} {rhs}");
                assert!(lhs >= 0.9 * rhs, "p={p} r={r} {lhs} {rhs}");
            }
        }
    }

    #[test]
    fn space_parsing() {
        assert_eq!(Space::parse("lorentz:2,1").unwrap(), Space::Lorentz { q: 2.0, gamma: 1.0 });
        assert_eq!(Space::parse("bmo:0.25").unwrap(), Space::Bmo { r: 0.25 });
        assert!(Space::parse("lorentz:2").is_err());
        assert!(Space::parse("sobolev:1").is_err());
        assert!(Space::parse("morrey").is_err());
    }

    #[test]
    fn norm_report_json() {
        let (f, _) = indicator(16);
        let rep = norm(&f, &Space::parse("morrey:2,1").unwrap()).unwrap();
        let text = serde_json::to_string(&rep).unwrap();
        assert!(text.contains("\"space\":\"morrey\""));
        let back: NormReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, rep);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn lorentz_scaling(seed in 0u64..1000, c in 0.1f64..10.0, q in 1.1f64..5.0, gamma in 0.2f64..4.0) {
            let f = random_field(seed, 8);
            let a = lorentz_functional(&f, q, gamma).unwrap().value;
            let b = lorentz_functional(&f.scaled(-c), q, gamma).unwrap().value;
            prop_assert!((b - c.powf(gamma) * a).abs() <= 1e-10 * b.abs().max(1.0));
        }

        /// `|g|^p` in `L(q/p, gamma/p)` against `g` in `L(q, gamma)`: substituting
        /// `t = s^p` gives a factor `p`.
        #[test]
        fn power_inclusion_identity(seed in 0u64..1000, p in 1.0f64..3.0, q in 3.0f64..6.0, gamma in 0.5f64..3.0) {
            let f = random_field(seed, 8);
            let fp = f.magnitude_pow(p);
            let lhs = lorentz_functional(&fp, q / p, gamma / p);
            prop_assert!(lhs.is_ok() || q / p <= 1.0);
            if let Ok(lhs) = lhs {
                let rhs = p * lorentz_functional(&f, q, gamma).unwrap().value;
                prop_assert!((lhs.value - rhs).abs() <= 1e-9 * rhs.max(1.0));
            }
        }

        #[test]
        fn weak_dominated_by_lorentz(seed in 0u64..1000, q in 1.1f64..5.0, gamma in 0.2f64..4.0) {
            let f = random_field(seed, 8);
            let m = marcinkiewicz_functional(&f, q).unwrap().value;
            let l = lorentz_functional(&f, q, gamma).unwrap().value;
            prop_assert!(m.powf(1.0 / q) <= gamma.powf(1.0 / gamma) * l.powf(1.0 / gamma) * (1.0 + 1e-12));
        }

        #[test]
        fn maximal_dominates_and_decreases(seed in 0u64..1000) {
            let f = random_field(seed, 8);
            let r = Rearrangement::of(&f);
            let mut prev = f64::INFINITY;
            let mut s = 1e-4;
            while s < 5.0 {
                let gss = maximal_rearrangement(&r, s).unwrap();
                prop_assert!(gss + 1e-12 >= r.value_at(s));
                prop_assert!(gss <= prev + 1e-12);
                prev = gss;
                s *= 1.3;
            }
        }

        #[test]
        fn distribution_duality(seed in 0u64..1000) {
            let f = random_field(seed, 8);
            let r = Rearrangement::of(&f);
            let mut s = 0.0;
            while s < r.total_measure() {
                prop_assert!(r.distribution(r.value_at(s)) <= s + 1e-12);
                s += 0.037;
            }
        }

        #[test]
        fn marcinkiewicz_monotone(seed in 0u64..1000, q in 1.0f64..4.0) {
            let f = random_field(seed, 8).abs();
            let bigger = f.add(&GridField::constant(f.grid(), 0.5)).unwrap();
            prop_assert!(marcinkiewicz_functional(&f, q).unwrap().value <= marcinkiewicz_functional(&bigger, q).unwrap().value + 1e-12);
        }
    }
}
