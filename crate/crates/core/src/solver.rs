//! Dirichlet solver for `F(x, D^2 u) = f` on the grid box, `n = 2`.
//!
//! Second derivatives are second differences along the eight primitive
//! directions with components at most 2. Linear terms `tr(A D^2 u)` are
//! split over these directions by Selling's decomposition; Pucci terms take
//! the best of four orthogonal direction frames. Every discrete operator is
//! monotone, and the nonlinear system is solved by policy iteration with
//! four-colour SOR for the frozen linear problems. The two outermost cell
//! layers carry the boundary data.
//!
//! ```
//! use gradpot::solver::{solve, Problem};
//! use gradpot::{Grid, GridField, OperatorSpec};
//!
//! let g = Grid::cube(2, -1.0, 1.0, 32).unwrap();
//! let f = GridField::constant(&g, 4.0);
//! let b = GridField::from_fn(&g, |x| x[0] * x[0] + x[1] * x[1]).unwrap();
//! let p = Problem::new(OperatorSpec::laplacian(2), f, b).unwrap();
//! let s = solve(&p, 1e-9, 50).unwrap();
//! let k = g.cell_containing(&[0.3, 0.2]).unwrap();
//! let x = g.center(k);
//! assert!((s.u.value(k) - (x[0] * x[0] + x[1] * x[1])).abs() < 1e-8);
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Ball, Grid, GridField, GridSpec};
use crate::pucci::{averaged_operator, ellipticity_audit, EllipticityPair, OpNode, OperatorSpec};
use crate::symmat::SymMatrix;

/// Cells of boundary data on each side.
pub const STENCIL_WIDTH: usize = 2;
pub const DIRECTIONS: [[i64; 2]; 8] = [[1, 0], [0, 1], [1, 1], [1, -1], [2, 1], [1, 2], [2, -1], [1, -2]];
const NORM2: [f64; 8] = [1.0, 1.0, 2.0, 2.0, 5.0, 5.0, 5.0, 5.0];
/// Orthogonal pairs of [`DIRECTIONS`].
const FRAMES: [(usize, usize); 4] = [(0, 1), (2, 3), (4, 7), (5, 6)];
pub const DAMPING: f64 = 0.5;
pub const MIN_SOLVE_CELLS: usize = 32;
pub const MIN_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 40_000;
const CHECK_EVERY: usize = 10;
const STALL_CHECKS: usize = 50;

type Weights = [f64; 8];

/// `F(x, D^2 u) = f` with Dirichlet data taken from `boundary` on the outer layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Problem {
    pub operator: OperatorSpec,
    pub rhs: GridField,
    pub boundary: GridField,
}

#[derive(Serialize, Deserialize)]
struct ProblemDoc {
    operator: OperatorSpec,
    grid: GridSpec,
    rhs: Vec<f64>,
    boundary: Vec<f64>,
}

impl Problem {
    pub fn new(operator: OperatorSpec, rhs: GridField, boundary: GridField) -> Result<Self> {
        let grid = rhs.grid();
        if grid.dim() != 2 || operator.dim != 2 {
            return Err(Error::arg("the solver handles n = 2 only"));
        }
        if boundary.grid() != grid {
            return Err(Error::arg("rhs and boundary live on different grids"));
        }
        if rhs.components() != 1 || boundary.components() != 1 {
            return Err(Error::arg("rhs and boundary must be scalar fields"));
        }
        if grid.cells().iter().any(|&m| m < 2 * STENCIL_WIDTH + 4) {
            return Err(Error::Resolution(format!("grid {:?} is too coarse for the stencil", grid.cells())));
        }
        operator.validate()?;
        let probe = match &operator.domain {
            Some(_) => operator.clone(),
            None => operator.clone().with_domain(grid.domain()),
        };
        let audit = ellipticity_audit(&probe, operator.ellipticity, 64, 0)?;
        if !audit.passed() {
            return Err(Error::arg(format!(
                "operator violates its ellipticity pair: {:?}",
                audit.failures.first().map(|v| &v.detail)
            )));
        }
        Ok(Problem {
            operator,
            rhs,
            boundary,
        })
    }

    pub fn with_boundary_fn(operator: OperatorSpec, rhs: GridField, g: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let b = GridField::from_fn(rhs.grid(), g)?;
        Problem::new(operator, rhs, b)
    }

    pub fn grid(&self) -> &Grid {
        self.rhs.grid()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ProblemDoc {
            operator: self.operator.clone(),
            grid: self.grid().spec(),
            rhs: self.rhs.values().to_vec(),
            boundary: self.boundary.values().to_vec(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ProblemDoc = serde_json::from_str(text)?;
        let g = Grid::from_spec(&doc.grid)?;
        Problem::new(
            doc.operator,
            GridField::scalar(g.clone(), doc.rhs)?,
            GridField::scalar(g, doc.boundary)?,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scheme {
    pub stencil_width: usize,
    pub directions: usize,
    pub damping: f64,
    pub damped_steps: usize,
    pub omega: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveResult {
    pub u: GridField,
    /// Policy iterations.
    pub iterations: usize,
    /// SOR sweeps over all policy iterations.
    pub sweeps: usize,
    /// Max over interior cells of `|F_h(x, D_h^2 u) - f|`.
    pub residual: f64,
    pub history: Vec<f64>,
    pub scheme: Scheme,
}

impl SolveResult {
    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "iteration,residual")?;
        for (i, r) in self.history.iter().enumerate() {
            writeln!(w, "{i},{r:e}")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Weights `w_k >= 0` with `A = sum_k w_k v_k v_k^T` over [`DIRECTIONS`].
pub fn selling_weights(a: &SymMatrix) -> Result<Weights> {
    if a.dim() != 2 {
        return Err(Error::arg("selling decomposition is two-dimensional"));
    }
    let m = [[a.get(0, 0), a.get(0, 1)], [a.get(1, 0), a.get(1, 1)]];
    if !(m[0][0] > 0.0 && m[0][0] * m[1][1] - m[0][1] * m[0][1] > 0.0) {
        return Err(Error::arg(format!("matrix {:?} is not positive definite", a.to_rows())));
    }
    let dot = |e: [i64; 2], f: [i64; 2]| {
        let (e0, e1, f0, f1) = (e[0] as f64, e[1] as f64, f[0] as f64, f[1] as f64);
        e0 * (m[0][0] * f0 + m[0][1] * f1) + e1 * (m[1][0] * f0 + m[1][1] * f1)
    };
    let eps = 1e-14 * (m[0][0] + m[1][1]);
    let mut e = [[1i64, 0], [0, 1], [-1, -1]];
    let pairs = [(0, 1, 2), (0, 2, 1), (1, 2, 0)];
    for _ in 0..64 {
        match pairs.iter().find(|&&(i, j, _)| dot(e[i], e[j]) > eps) {
            Some(&(i, j, k)) => {
                let (ei, ej) = (e[i], e[j]);
                e[i] = [-ei[0], -ei[1]];
                e[k] = [ei[0] - ej[0], ei[1] - ej[1]];
            }
            None => break,
        }
    }
    let mut w = [0.0; 8];
    for &(i, j, k) in &pairs {
        let rho = -dot(e[i], e[j]);
        if rho <= eps {
            continue;
        }
        let v = [-e[k][1], e[k][0]];
        let idx = DIRECTIONS
            .iter()
            .position(|d| (d[0] == v[0] && d[1] == v[1]) || (d[0] == -v[0] && d[1] == -v[1]))
            .ok_or_else(|| {
                Error::arg(format!(
                    "matrix {:?} is too anisotropic for a stencil of width {STENCIL_WIDTH}",
                    a.to_rows()
                ))
            })?;
        w[idx] += rho;
    }
    Ok(w)
}

/// A frozen operator node with linear terms already decomposed.
#[derive(Clone, Debug)]
enum Compiled {
    Lin(Weights),
    Pucci { plus: bool, e: EllipticityPair },
    Max(Vec<Compiled>),
    Min(Vec<Compiled>),
    Mean(Vec<Compiled>),
}

impl Compiled {
    fn new(node: &OpNode) -> Result<Self> {
        Ok(match node {
            OpNode::Trace(a) => Compiled::Lin(selling_weights(a)?),
            OpNode::PucciPlus(e) => Compiled::Pucci { plus: true, e: *e },
            OpNode::PucciMinus(e) => Compiled::Pucci { plus: false, e: *e },
            OpNode::Max(v) => Compiled::Max(v.iter().map(Compiled::new).collect::<Result<_>>()?),
            OpNode::Min(v) => Compiled::Min(v.iter().map(Compiled::new).collect::<Result<_>>()?),
            OpNode::Mean(v) => Compiled::Mean(v.iter().map(Compiled::new).collect::<Result<_>>()?),
        })
    }

    /// Value at the directional second differences `d`; adds `scale` times
    /// the weights of the attaining linear operator to `w`. Ties go to the
    /// lowest index.
    fn eval(&self, d: &Weights, w: &mut Weights, scale: f64) -> f64 {
        match self {
            Compiled::Lin(a) => {
                let mut s = 0.0;
                for k in 0..8 {
                    s += a[k] * d[k];
                    w[k] += scale * a[k];
                }
                s
            }
            Compiled::Pucci { plus, e } => {
                let coef = |s: f64| {
                    if (s > 0.0) == *plus {
                        e.big_lambda
                    } else {
                        e.lambda
                    }
                };
                let mut best = (0usize, 0.0, 0.0, 0.0);
                for (f, &(k1, k2)) in FRAMES.iter().enumerate() {
                    let (s1, s2) = (d[k1] / NORM2[k1], d[k2] / NORM2[k2]);
                    let (c1, c2) = (coef(s1), coef(s2));
                    let v = c1 * s1 + c2 * s2;
                    if f == 0 || (*plus && v > best.1) || (!*plus && v < best.1) {
                        best = (f, v, c1, c2);
                    }
                }
                let (k1, k2) = FRAMES[best.0];
                w[k1] += scale * best.2 / NORM2[k1];
                w[k2] += scale * best.3 / NORM2[k2];
                best.1
            }
            Compiled::Max(v) | Compiled::Min(v) => {
                let is_max = matches!(self, Compiled::Max(_));
                let mut best = 0;
                let mut val = 0.0;
                let mut bw = [0.0; 8];
                for (i, c) in v.iter().enumerate() {
                    let mut tw = [0.0; 8];
                    let x = c.eval(d, &mut tw, 1.0);
                    if i == 0 || (is_max && x > val) || (!is_max && x < val) {
                        best = i;
                        val = x;
                        bw = tw;
                    }
                }
                let _ = best;
                for k in 0..8 {
                    w[k] += scale * bw[k];
                }
                val
            }
            Compiled::Mean(v) => {
                let s = 1.0 / v.len() as f64;
                v.iter().map(|c| c.eval(d, w, scale * s)).sum::<f64>() * s
            }
        }
    }
}

enum Ops {
    Shared(Compiled),
    PerCell(Vec<Option<Compiled>>),
}

impl Ops {
    fn at(&self, c: usize) -> &Compiled {
        match self {
            Ops::Shared(op) => op,
            Ops::PerCell(v) => v[c].as_ref().expect("interior cell has an operator"),
        }
    }
}

struct Discretization<'a> {
    grid: &'a Grid,
    inv_h2: f64,
    offsets: [usize; 8],
    colors: [Vec<usize>; 4],
    interior: Vec<usize>,
    ops: Ops,
}

impl<'a> Discretization<'a> {
    fn new(op: &OperatorSpec, grid: &'a Grid) -> Result<Self> {
        let cells = grid.cells();
        let (m0, m1) = (cells[0], cells[1]);
        let w = STENCIL_WIDTH;
        if m0 < 2 * w + 4 || m1 < 2 * w + 4 {
            return Err(Error::Resolution(format!("grid {cells:?} is too coarse for the stencil")));
        }
        let s0 = grid.strides()[0] as i64;
        let mut offsets = [0usize; 8];
        for (k, d) in DIRECTIONS.iter().enumerate() {
            offsets[k] = (d[0] * s0 + d[1]) as usize;
        }
        let mut colors: [Vec<usize>; 4] = Default::default();
        let mut interior = Vec::new();
        for i in w..m0 - w {
            for j in w..m1 - w {
                let c = grid.flat_index(&[i, j]);
                colors[(i % 2) * 2 + j % 2].push(c);
                interior.push(c);
            }
        }
        let ops = if op.is_x_independent() {
            let x = grid.domain().center();
            Ops::Shared(Compiled::new(&op.node_at(&x)?)?)
        } else {
            let compiled: Vec<(usize, Compiled)> = interior
                .par_iter()
                .map(|&c| Ok((c, Compiled::new(&op.node_at(&grid.center(c))?)?)))
                .collect::<Result<_>>()?;
            let mut v: Vec<Option<Compiled>> = vec![None; grid.len()];
            for (c, op) in compiled {
                v[c] = Some(op);
            }
            Ops::PerCell(v)
        };
        Ok(Discretization {
            grid,
            inv_h2: 1.0 / (grid.h() * grid.h()),
            offsets,
            colors,
            interior,
            ops,
        })
    }

    fn diffs(&self, u: &[f64], c: usize) -> Weights {
        let mut d = [0.0; 8];
        for k in 0..8 {
            let o = self.offsets[k];
            d[k] = (u[c + o] + u[c - o] - 2.0 * u[c]) * self.inv_h2;
        }
        d
    }

    /// Greedy policy for `u` and the nonlinear residual.
    fn policy(&self, u: &[f64], f: &[f64]) -> (f64, Vec<Weights>) {
        let rows: Vec<(f64, Weights)> = self
            .interior
            .par_iter()
            .with_min_len(256)
            .map(|&c| {
                let d = self.diffs(u, c);
                let mut w = [0.0; 8];
                let v = self.ops.at(c).eval(&d, &mut w, 1.0);
                ((v - f[c]).abs(), w)
            })
            .collect();
        let mut weights = vec![[0.0; 8]; self.grid.len()];
        let mut res = 0.0f64;
        for (&c, (r, w)) in self.interior.iter().zip(rows) {
            res = if r.is_nan() { f64::NAN } else { res.max(r) };
            weights[c] = w;
        }
        (res, weights)
    }

    fn linear_residual(&self, u: &[f64], f: &[f64], w: &[Weights]) -> f64 {
        self.interior
            .par_iter()
            .with_min_len(256)
            .map(|&c| {
                let d = self.diffs(u, c);
                let v: f64 = (0..8).map(|k| w[c][k] * d[k]).sum();
                (v - f[c]).abs()
            })
            .reduce(|| 0.0, |a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) })
    }

    /// Four-colour SOR on `sum_k w_k D_k u = f`; returns (sweeps, residual).
    fn sor(&self, u: &mut [f64], f: &[f64], w: &[Weights], tol: f64, omega: &mut f64) -> (usize, f64) {
        let h2 = 1.0 / self.inv_h2;
        let mut best = self.linear_residual(u, f, w);
        if best <= tol {
            return (0, best);
        }
        let mut sweeps = 0;
        let mut res = best;
        let mut stalled = 0;
        while sweeps < MAX_SWEEPS {
            for color in &self.colors {
                let om = *omega;
                let uu: &[f64] = u;
                let new: Vec<f64> = color
                    .par_iter()
                    .with_min_len(256)
                    .map(|&c| {
                        let wc = &w[c];
                        let mut num = -f[c] * h2;
                        let mut den = 0.0;
                        for k in 0..8 {
                            if wc[k] != 0.0 {
                                let o = self.offsets[k];
                                num += wc[k] * (uu[c + o] + uu[c - o]);
                                den += 2.0 * wc[k];
                            }
                        }
                        (1.0 - om) * uu[c] + om * num / den
                    })
                    .collect();
                for (&c, v) in color.iter().zip(new) {
                    u[c] = v;
                }
            }
            sweeps += 1;
            if sweeps % CHECK_EVERY == 0 {
                res = self.linear_residual(u, f, w);
                if res <= tol || res.is_nan() {
                    break;
                }
                if res > 100.0 * best && *omega > 1.0 {
                    *omega = 1.0 + 0.5 * (*omega - 1.0);
                }
                if res < 0.999 * best {
                    best = res;
                    stalled = 0;
                } else {
                    stalled += 1;
                    if stalled >= STALL_CHECKS {
                        break;
                    }
                }
            }
        }
        (sweeps, res)
    }
}

/// Solves `prob` to max residual `tol` with at most `max_iter` policy iterations.
pub fn solve(prob: &Problem, tol: f64, max_iter: usize) -> Result<SolveResult> {
    if prob.grid().cells().iter().any(|&m| m < MIN_SOLVE_CELLS) {
        return Err(Error::Resolution(format!(
            "solver needs at least {MIN_SOLVE_CELLS} cells per axis, got {:?}",
            prob.grid().cells()
        )));
    }
    solve_on(&prob.operator, &prob.rhs, &prob.boundary, tol, max_iter, None)
}

fn solve_on(
    op: &OperatorSpec,
    rhs: &GridField,
    boundary: &GridField,
    tol: f64,
    max_iter: usize,
    start: Option<&[f64]>,
) -> Result<SolveResult> {
    if !(tol >= MIN_TOL) {
        return Err(Error::arg(format!("tolerance must be at least {MIN_TOL}, got {tol}")));
    }
    if max_iter == 0 {
        return Err(Error::arg("max_iter must be positive"));
    }
    let grid = rhs.grid();
    let disc = Discretization::new(op, grid)?;
    let f = rhs.values();
    let mut u: Vec<f64> = boundary.values().to_vec();
    match start {
        Some(s) => {
            for &c in &disc.interior {
                u[c] = s[c];
            }
        }
        None => {
            for &c in &disc.interior {
                u[c] = 0.0;
            }
        }
    }
    let m = grid.cells().iter().copied().max().unwrap_or(8) - 2 * STENCIL_WIDTH;
    let mut omega = 2.0 / (1.0 + (std::f64::consts::PI / (m as f64 + 1.0)).sin());
    let mut history = Vec::new();
    let mut sweeps = 0;
    let mut damped = 0;
    let mut prev: Option<(f64, Vec<f64>)> = None;
    for it in 0..max_iter {
        let (res, w) = disc.policy(&u, f);
        if res.is_nan() {
            return Err(Error::Numerical("residual became NaN".into()));
        }
        history.push(res);
        if res <= tol {
            return Ok(SolveResult {
                u: GridField::scalar(grid.clone(), u)?,
                iterations: it,
                sweeps,
                residual: res,
                history,
                scheme: Scheme {
                    stencil_width: STENCIL_WIDTH,
                    directions: DIRECTIONS.len(),
                    damping: DAMPING,
                    damped_steps: damped,
                    omega,
                },
            });
        }
        if let Some((pres, pu)) = &prev {
            if res > *pres {
                damped += 1;
                for &c in &disc.interior {
                    u[c] = pu[c] + DAMPING * (u[c] - pu[c]);
                }
                continue;
            }
        }
        prev = Some((res, u.clone()));
        let (s, _) = disc.sor(&mut u, f, &w, 0.5 * tol, &mut omega);
        sweeps += s;
    }
    let (res, _) = disc.policy(&u, f);
    history.push(res);
    Err(Error::Convergence {
        iterations: max_iter,
        residual: res,
        history,
    })
}

/// Max over interior cells of `|F_h(x, D_h^2 u) - f|` for an arbitrary `u`.
pub fn discrete_residual(prob: &Problem, u: &GridField) -> Result<f64> {
    let disc = Discretization::new(&prob.operator, prob.grid())?;
    Ok(disc.policy(u.values(), prob.rhs.values()).0)
}

/// `f := F(x, D^2 u*)` from the exact Hessian, boundary data `u*`.
pub fn manufacture(
    u_exact: impl Fn(&[f64]) -> f64,
    hessian: impl Fn(&[f64]) -> SymMatrix + Sync,
    op: OperatorSpec,
    grid: &Grid,
) -> Result<Problem> {
    let f: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|c| {
            let x = grid.center(c);
            op.evaluate(&x, &hessian(&x))
        })
        .collect::<Result<_>>()?;
    let rhs = GridField::scalar(grid.clone(), f)?;
    Problem::with_boundary_fn(op, rhs, u_exact)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenSolve {
    /// `h` on the square inscribed in the ball.
    pub h: SolveResult,
    /// `max |u - h|` over the cells of that square.
    pub distance: f64,
}

/// Cells of `grid` whose centres lie in the square inscribed in `ball`, as a grid.
pub fn inscribed_subgrid(grid: &Grid, ball: &Ball) -> Result<(Grid, Vec<usize>)> {
    if !grid.contains_ball(ball) {
        return Err(Error::domain("ball is not inside the grid"));
    }
    let half = ball.radius / std::f64::consts::SQRT_2;
    let h = grid.h();
    let mut lo = Vec::new();
    let mut cells = Vec::new();
    let mut first = Vec::new();
    for a in 0..grid.dim() {
        let m = grid.cells()[a];
        let idx: Vec<usize> = (0..m)
            .filter(|&i| (grid.coord(a, i as i64) - ball.center[a]).abs() < half)
            .collect();
        if idx.len() < 2 * STENCIL_WIDTH + 4 {
            return Err(Error::Resolution(format!(
                "ball of radius {} holds only {} cells across",
                ball.radius,
                idx.len()
            )));
        }
        first.push(idx[0]);
        cells.push(idx.len());
        lo.push(grid.low()[a] + idx[0] as f64 * h);
    }
    let high: Vec<f64> = lo.iter().zip(&cells).map(|(l, &m)| l + m as f64 * h).collect();
    let sub = Grid::new(lo, high, cells.clone())?;
    let mut map = Vec::with_capacity(sub.len());
    for k in 0..sub.len() {
        let idx = sub.multi_index(k);
        let full: Vec<usize> = idx.iter().zip(&first).map(|(i, f)| i + f).collect();
        map.push(grid.flat_index(&full));
    }
    Ok((sub, map))
}

/// Solves `(F)_B(D^2 h) = 0` on the square inscribed in `ball` with `h = u`
/// on its boundary layers.
pub fn frozen_coefficient_solve(prob: &Problem, u: &GridField, ball: &Ball, tol: f64, max_iter: usize) -> Result<FrozenSolve> {
    let grid = prob.grid();
    if u.grid() != grid {
        return Err(Error::arg("u lives on a different grid"));
    }
    let (sub, map) = inscribed_subgrid(grid, ball)?;
    let avg = averaged_operator(&prob.operator, grid, ball)?;
    let trace = GridField::scalar(sub.clone(), map.iter().map(|&c| u.value(c)).collect())?;
    let zero = GridField::zeros(&sub);
    let h = solve_on(&avg, &zero, &trace, tol, max_iter, Some(trace.values()))?;
    let distance = h
        .u
        .values()
        .iter()
        .zip(trace.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(FrozenSolve { h, distance })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    pub cells: Vec<usize>,
    pub h: Vec<f64>,
    pub errors: Vec<f64>,
    pub iterations: Vec<usize>,
    /// `log(e_i / e_{i+1}) / log(h_i / h_{i+1})`.
    pub orders: Vec<f64>,
    /// Least-squares slope of `log e` against `log h`; absent when every error is at round-off.
    pub fitted_order: Option<f64>,
}

/// Round-off level below which no order is fitted.
pub const ROUNDOFF_ERROR: f64 = 1e-10;

/// Solves `make(m)` for each `m` in `grids` and compares with the exact solution.
pub fn convergence_study(
    grids: &[usize],
    make: impl Fn(usize) -> Result<(Problem, GridField)>,
    tol: f64,
    max_iter: usize,
) -> Result<ConvergenceStudy> {
    if grids.len() < 2 || grids.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::arg("convergence study needs a strictly refining grid list"));
    }
    let mut study = ConvergenceStudy {
        cells: grids.to_vec(),
        h: Vec::new(),
        errors: Vec::new(),
        iterations: Vec::new(),
        orders: Vec::new(),
        fitted_order: None,
    };
    for &m in grids {
        let (prob, exact) = make(m)?;
        let s = solve(&prob, tol, max_iter)?;
        let e = s
            .u
            .values()
            .iter()
            .zip(exact.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        study.h.push(prob.grid().h());
        study.errors.push(e);
        study.iterations.push(s.iterations);
    }
    if study.errors.iter().all(|&e| e < ROUNDOFF_ERROR) {
        return Ok(study);
    }
    study.orders = study
        .errors
        .windows(2)
        .zip(study.h.windows(2))
        .map(|(e, h)| (e[0] / e[1]).ln() / (h[0] / h[1]).ln())
        .collect();
    let lh: Vec<f64> = study.h.iter().map(|h| h.ln()).collect();
    let le: Vec<f64> = study.errors.iter().map(|e| e.ln()).collect();
    study.fitted_order = Some(crate::spaces::fit_slope(&lh, &le));
    Ok(study)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pucci::{pucci_plus, MatrixField};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn sq(x: &[f64]) -> f64 {
        x[0] * x[0] + x[1] * x[1]
    }

    #[test]
    fn selling_reconstructs() {
        let cases = [
            [[1.0, 0.0], [0.0, 1.0]],
            [[2.0, 0.5], [0.5, 1.0]],
            [[1.0, -0.9], [-0.9, 1.0]],
            [[3.0, 1.0], [1.0, 0.5]],
            [[0.6, 0.3], [0.3, 2.5]],
        ];
        for m in cases {
            let a = SymMatrix::from_rows(&[m[0].to_vec(), m[1].to_vec()]).unwrap();
            let w = selling_weights(&a).unwrap();
            let mut b = [[0.0; 2]; 2];
            for (k, d) in DIRECTIONS.iter().enumerate() {
                assert!(w[k] >= 0.0);
                for i in 0..2 {
                    for j in 0..2 {
                        b[i][j] += w[k] * (d[i] * d[j]) as f64;
                    }
                }
            }
            for i in 0..2 {
                for j in 0..2 {
                    assert!((b[i][j] - m[i][j]).abs() < 1e-12, "{m:?} {b:?}");
                }
            }
        }
        let thin = SymMatrix::from_rows(&[vec![100.0, 31.0], vec![31.0, 10.0]]).unwrap();
        assert!(selling_weights(&thin).is_err());
    }

    #[test]
    fn laplacian_exact_on_quadratics() {
        let g = Grid::cube(2, -1.0, 1.0, 64).unwrap();
        let f = GridField::constant(&g, 4.0);
        let p = Problem::with_boundary_fn(OperatorSpec::laplacian(2), f, sq).unwrap();
        let s = solve(&p, 1e-10, 20).unwrap();
        assert!(s.residual <= 1e-10);
        let err = (0..g.len()).map(|c| (s.u.value(c) - sq(&g.center(c))).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn affine_data_is_harmonic_for_every_form() {
        let g = Grid::cube(2, -1.0, 1.0, 32).unwrap();
        let e = EllipticityPair::new(0.5, 2.0).unwrap();
        let d = MatrixField::Constant(SymMatrix::from_diag(&[2.0, 1.0]));
        let ops = [
            OperatorSpec::pucci_plus(2, e),
            OperatorSpec::pucci_minus(2, e),
            OperatorSpec::bellman(vec![MatrixField::Constant(SymMatrix::identity(2)), d], e).unwrap(),
        ];
        for op in ops {
            let p = Problem::with_boundary_fn(op, GridField::zeros(&g), |x| 1.0 + 2.0 * x[0] - 0.5 * x[1]).unwrap();
            let s = solve(&p, 1e-10, 50).unwrap();
            let err = (0..g.len())
                .map(|c| {
                    let x = g.center(c);
                    (s.u.value(c) - (1.0 + 2.0 * x[0] - 0.5 * x[1])).abs()
                })
                .fold(0.0, f64::max);
            assert!(err < 1e-9, "{err}");
        }
    }

    fn bellman_sin_cos(m: usize) -> Result<(Problem, GridField)> {
        let g = Grid::cube(2, -1.0, 1.0, m)?;
        let e = EllipticityPair::new(1.0, 2.0)?;
        let op = OperatorSpec::bellman(
            vec![
                MatrixField::Constant(SymMatrix::identity(2)),
                MatrixField::Constant(SymMatrix::from_diag(&[2.0, 1.0])),
            ],
            e,
        )?;
        let u = |x: &[f64]| x[0].sin() * x[1].cos();
        let hess = |x: &[f64]| {
            let (s0, c0, s1, c1) = (x[0].sin(), x[0].cos(), x[1].sin(), x[1].cos());
            SymMatrix::from_rows(&[vec![-s0 * c1, -c0 * s1], vec![-c0 * s1, -s0 * c1]]).unwrap()
        };
        let p = manufacture(u, hess, op, &g)?;
        let exact = GridField::from_fn(&g, u)?;
        Ok((p, exact))
    }

    #[test]
    fn bellman_manufactured_converges() {
        let st = convergence_study(&[32, 64, 128], bellman_sin_cos, 1e-10, 50).unwrap();
        let order = st.fitted_order.unwrap();
        assert!(order >= 0.9, "{st:?}");
        assert!(st.errors.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn quadratic_study_skips_fit() {
        let st = convergence_study(
            &[32, 64],
            |m| {
                let g = Grid::cube(2, -1.0, 1.0, m)?;
                let p = Problem::with_boundary_fn(OperatorSpec::laplacian(2), GridField::constant(&g, 4.0), sq)?;
                Ok((p, GridField::from_fn(&g, sq)?))
            },
            1e-10,
            20,
        )
        .unwrap();
        assert!(st.fitted_order.is_none());
    }

    #[test]
    fn manufacture_examples() {
        let g = Grid::cube(2, -1.0, 1.0, 32).unwrap();
        let e = EllipticityPair::new(0.5, 3.0).unwrap();
        let h = SymMatrix::from_rows(&[vec![1.0, 0.4], vec![0.4, -2.0]]).unwrap();
        let p = manufacture(|x| 0.5 * (x[0] * x[0] - 2.0 * x[1] * x[1]), |_| h.clone(), OperatorSpec::pucci_plus(2, e), &g).unwrap();
        let want = pucci_plus(&h, e).unwrap();
        assert!(p.rhs.values().iter().all(|v| (v - want).abs() < 1e-12));
        // |x|^4: Hessian on the x1 axis is diag(12 x1^2, 4 x1^2)
        let p = manufacture(
            |x| sq(x).powi(2),
            |x| {
                let r2 = sq(x);
                SymMatrix::from_rows(&[
                    vec![4.0 * r2 + 8.0 * x[0] * x[0], 8.0 * x[0] * x[1]],
                    vec![8.0 * x[0] * x[1], 4.0 * r2 + 8.0 * x[1] * x[1]],
                ])
                .unwrap()
            },
            OperatorSpec::pucci_minus(2, e),
            &g,
        )
        .unwrap();
        let k = g.flat_index(&[20, 16]);
        let x = g.center(k);
        assert!(x[1].abs() < g.h());
        let r2 = sq(&x);
        let hx = SymMatrix::from_rows(&[
            vec![4.0 * r2 + 8.0 * x[0] * x[0], 8.0 * x[0] * x[1]],
            vec![8.0 * x[0] * x[1], 4.0 * r2 + 8.0 * x[1] * x[1]],
        ])
        .unwrap();
        let eig = hx.eigenvalues().unwrap();
        assert!((p.rhs.value(k) - 0.5 * (eig[0] + eig[1])).abs() < 1e-12);
        let p = manufacture(|x| x[0] - x[1], |_| SymMatrix::zeros(2), OperatorSpec::laplacian(2), &g).unwrap();
        assert!(p.rhs.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_bad_input() {
        let g = Grid::cube(2, -1.0, 1.0, 16).unwrap();
        let p = Problem::with_boundary_fn(OperatorSpec::laplacian(2), GridField::zeros(&g), |_| 0.0).unwrap();
        assert!(matches!(solve(&p, 1e-8, 10), Err(Error::Resolution(_))));
        let g = Grid::cube(2, -1.0, 1.0, 32).unwrap();
        let p = Problem::with_boundary_fn(OperatorSpec::laplacian(2), GridField::zeros(&g), |_| 0.0).unwrap();
        assert!(solve(&p, 1e-12, 10).is_err());
        let bad = OperatorSpec::trace_linear(
            MatrixField::Constant(SymMatrix::from_diag(&[5.0, 1.0])),
            EllipticityPair::new(1.0, 2.0).unwrap(),
        );
        assert!(bad.is_err() || Problem::with_boundary_fn(bad.unwrap(), GridField::zeros(&g), |_| 0.0).is_err());
    }

    #[test]
    fn non_convergence_reports_history() {
        let g = Grid::cube(2, -1.0, 1.0, 32).unwrap();
        let f = GridField::from_fn(&g, |x| (3.0 * x[0]).sin()).unwrap();
        let e = EllipticityPair::new(0.5, 2.0).unwrap();
        let p = Problem::with_boundary_fn(OperatorSpec::pucci_plus(2, e), f, |_| 0.0).unwrap();
        match solve(&p, 1e-10, 1) {
            Err(Error::Convergence { history, .. }) => assert!(!history.is_empty()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pucci_solve_and_residual() {
        let g = Grid::cube(2, -1.0, 1.0, 48).unwrap();
        let e = EllipticityPair::new(0.5, 2.0).unwrap();
        let f = GridField::from_fn(&g, |x| 1.0 + x[0]).unwrap();
        let p = Problem::with_boundary_fn(OperatorSpec::pucci_minus(2, e), f, |x| x[1]).unwrap();
        let s = solve(&p, 1e-9, 60).unwrap();
        assert!(discrete_residual(&p, &s.u).unwrap() <= 1e-9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        s.write_history_csv(&path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), s.history.len() + 1);
    }

    #[test]
    fn problem_json_round_trip() {
        let g = Grid::cube(2, -1.0, 1.0, 32).unwrap();
        let p = Problem::with_boundary_fn(OperatorSpec::laplacian(2), GridField::constant(&g, 1.0), sq).unwrap();
        let back = Problem::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn frozen_solve_of_x_independent_problem() {
        let g = Grid::cube(2, -1.0, 1.0, 64).unwrap();
        let p = Problem::with_boundary_fn(OperatorSpec::laplacian(2), GridField::zeros(&g), |x| x[0] * x[0] - x[1] * x[1]).unwrap();
        let s = solve(&p, 1e-10, 20).unwrap();
        let b = Ball::new(vec![0.1, 0.0], 0.5).unwrap();
        let fz = frozen_coefficient_solve(&p, &s.u, &b, 1e-10, 20).unwrap();
        assert!(fz.distance < 1e-9, "{}", fz.distance);
    }

    #[test]
    fn frozen_distance_tracks_rhs_amplitude() {
        let g = Grid::cube(2, -1.0, 1.0, 64).unwrap();
        let b = Ball::new(vec![0.0, 0.0], 0.6).unwrap();
        let mut last = f64::INFINITY;
        for amp in [1.0, 0.5, 0.25, 0.125] {
            let f = GridField::from_fn(&g, |x| amp * (1.0 + x[0] * x[1])).unwrap();
            let p = Problem::with_boundary_fn(OperatorSpec::laplacian(2), f, |x| x[0]).unwrap();
            let s = solve(&p, 1e-10, 20).unwrap();
            let d = frozen_coefficient_solve(&p, &s.u, &b, 1e-10, 20).unwrap().distance;
            assert!(d < last, "{amp} {d} {last}");
            last = d;
        }
    }

    #[test]
    fn scaling_consistency() {
        // u on [-1,1]^2 at 64 cells; the sub-box [-0.5,0.5]^2 rescaled to [-1,1]^2 at 32 cells
        let g = Grid::cube(2, -1.0, 1.0, 64).unwrap();
        let e = EllipticityPair::new(0.5, 2.0).unwrap();
        let op = OperatorSpec::pucci_plus(2, e);
        let f = GridField::from_fn(&g, |x| 1.0 + x[0] * x[1]).unwrap();
        let p = Problem::with_boundary_fn(op.clone(), f, |x| x[0] * x[1]).unwrap();
        let u = solve(&p, 1e-10, 80).unwrap().u;
        let (a, r) = (3.0, 0.5);
        let gs = Grid::cube(2, -1.0, 1.0, 32).unwrap();
        let sub = |k: usize| {
            let idx = gs.multi_index(k);
            g.flat_index(&[idx[0] + 16, idx[1] + 16])
        };
        let ft = GridField::scalar(gs.clone(), (0..gs.len()).map(|k| p.rhs.value(sub(k)) / a).collect()).unwrap();
        let bt = GridField::scalar(gs.clone(), (0..gs.len()).map(|k| u.value(sub(k)) / (a * r * r)).collect()).unwrap();
        // F~(X) = F(A X)/A = F(X) for a positively homogeneous F
        let pt = Problem::new(op, ft, bt).unwrap();
        let ut = solve(&pt, 1e-10, 80).unwrap().u;
        let err = (0..gs.len()).map(|k| (ut.value(k) * a * r * r - u.value(sub(k))).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]

        #[test]
        fn discrete_comparison(a in -1.0f64..1.0, b in -1.0f64..1.0, gap in 0.0f64..2.0) {
            let g = Grid::cube(2, -1.0, 1.0, 32).unwrap();
            let e = EllipticityPair::new(0.5, 2.0).unwrap();
            let op = OperatorSpec::bellman(
                vec![
                    MatrixField::Constant(SymMatrix::identity(2)),
                    MatrixField::Constant(SymMatrix::from_diag(&[2.0, 1.0])),
                ],
                e,
            ).unwrap();
            let f1 = GridField::from_fn(&g, |x| a * x[0] + b).unwrap();
            let f2 = GridField::from_fn(&g, |x| a * x[0] + b + gap * (1.0 + x[1] * x[1])).unwrap();
            let bd = |x: &[f64]| (x[0] - x[1]).sin();
            let u1 = solve(&Problem::with_boundary_fn(op.clone(), f1, bd).unwrap(), 1e-10, 60).unwrap().u;
            let u2 = solve(&Problem::with_boundary_fn(op, f2, bd).unwrap(), 1e-10, 60).unwrap().u;
            let worst = u1.values().iter().zip(u2.values()).map(|(p, q)| p - q).fold(f64::INFINITY, f64::min);
            prop_assert!(worst >= -1e-9, "{}", worst);
        }
    }
}
