//! Pucci extremal operators and concrete uniformly elliptic families
//! `F(x, X)`.
//!
//! ```
//! use gradpot::{pucci::{pucci_minus, pucci_plus, EllipticityPair}, SymMatrix};
//!
//! let e = EllipticityPair::new(1.0, 2.0).unwrap();
//! let x = SymMatrix::from_diag(&[1.0, -1.0]);
//! assert_eq!(pucci_minus(&x, e).unwrap(), -1.0);
//! assert_eq!(pucci_plus(&x, e).unwrap(), 1.0);
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grid::{Ball, BoxDomain, Grid, GridSpec};
use crate::report::AuditReport;
use crate::symmat::SymMatrix;

/// Two-sided sample tolerance of [`ellipticity_audit`].
pub const ELLIPTICITY_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPair")]
pub struct EllipticityPair {
    pub lambda: f64,
    #[serde(rename = "Lambda")]
    pub big_lambda: f64,
}

#[derive(Deserialize)]
struct RawPair {
    lambda: f64,
    #[serde(rename = "Lambda")]
    big_lambda: f64,
}

impl TryFrom<RawPair> for EllipticityPair {
    type Error = Error;
    fn try_from(r: RawPair) -> Result<Self> {
        EllipticityPair::new(r.lambda, r.big_lambda)
    }
}

impl EllipticityPair {
    pub fn new(lambda: f64, big_lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && big_lambda >= lambda && big_lambda.is_finite()) {
            return Err(Error::arg(format!(
                "ellipticity needs 0 < lambda <= Lambda, got ({lambda}, {big_lambda})"
            )));
        }
        Ok(EllipticityPair { lambda, big_lambda })
    }

    pub fn unit() -> Self {
        EllipticityPair {
            lambda: 1.0,
            big_lambda: 1.0,
        }
    }

    /// True when every eigenvalue of `a` lies in `[lambda, Lambda]` up to `tol`.
    pub fn admits(&self, a: &SymMatrix, tol: f64) -> Result<bool> {
        let ev = a.eigenvalues()?;
        Ok(ev[0] <= self.big_lambda + tol && ev[ev.len() - 1] >= self.lambda - tol)
    }
}

pub fn pucci_plus_eigs(eigs: &[f64], e: EllipticityPair) -> f64 {
    eigs.iter()
        .map(|&v| if v > 0.0 { e.big_lambda * v } else { e.lambda * v })
        .sum()
}

pub fn pucci_minus_eigs(eigs: &[f64], e: EllipticityPair) -> f64 {
    eigs.iter()
        .map(|&v| if v > 0.0 { e.lambda * v } else { e.big_lambda * v })
        .sum()
}

/// `Lambda * (sum of positive eigenvalues) + lambda * (sum of negative ones)`.
pub fn pucci_plus(x: &SymMatrix, e: EllipticityPair) -> Result<f64> {
    Ok(pucci_plus_eigs(&x.eigenvalues()?, e))
}

/// `lambda * (sum of positive eigenvalues) + Lambda * (sum of negative ones)`.
pub fn pucci_minus(x: &SymMatrix, e: EllipticityPair) -> Result<f64> {
    Ok(pucci_minus_eigs(&x.eigenvalues()?, e))
}

/// A symmetric-matrix-valued coefficient `x -> A(x)`.
#[derive(Clone, Debug, PartialEq)]
pub enum MatrixField {
    Constant(SymMatrix),
    /// Entry expressions, full rows; only the upper triangle is read.
    Expr(Vec<Vec<Expr>>),
    /// Piecewise constant on the cells of a grid; `entries` holds the packed
    /// upper triangle (row by row) of each cell in flat cell order.
    Tabulated { grid: Grid, entries: Vec<f64> },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NumOrText {
    Num(f64),
    Text(String),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawMatrixField {
    Numbers(Vec<Vec<f64>>),
    Mixed(Vec<Vec<NumOrText>>),
    Table { grid: GridSpec, entries: Vec<f64> },
}

impl Serialize for MatrixField {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MatrixField::Constant(m) => RawMatrixField::Numbers(m.to_rows()).serialize(s),
            MatrixField::Expr(rows) => RawMatrixField::Mixed(
                rows.iter()
                    .map(|r| r.iter().map(|e| NumOrText::Text(e.source().to_string())).collect())
                    .collect(),
            )
            .serialize(s),
            MatrixField::Tabulated { grid, entries } => RawMatrixField::Table {
                grid: grid.spec(),
                entries: entries.clone(),
            }
            .serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for MatrixField {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = RawMatrixField::deserialize(d)?;
        let out = match raw {
            RawMatrixField::Numbers(rows) => SymMatrix::from_rows(&rows).map(MatrixField::Constant),
            RawMatrixField::Mixed(rows) => MatrixField::from_expr_rows(rows),
            RawMatrixField::Table { grid, entries } => {
                Grid::from_spec(&grid).and_then(|g| MatrixField::tabulated(g, entries))
            }
        };
        out.map_err(D::Error::custom)
    }
}

impl MatrixField {
    fn from_expr_rows(rows: Vec<Vec<NumOrText>>) -> Result<Self> {
        let n = rows.len();
        if n < 2 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Parse("coefficient matrix must be square, at least 2x2".into()));
        }
        let exprs: Vec<Vec<Expr>> = rows
            .into_iter()
            .map(|r| {
                r.into_iter()
                    .map(|v| match v {
                        NumOrText::Num(x) => Ok(Expr::constant(x)),
                        NumOrText::Text(s) => Expr::parse(&s),
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        if exprs.iter().all(|r| r.iter().all(Expr::is_constant)) {
            let m = SymMatrix::from_fn(n, |i, j| exprs[i.min(j)][i.max(j)].eval(&[]));
            return Ok(MatrixField::Constant(m));
        }
        Ok(MatrixField::Expr(exprs))
    }

    pub fn expr(rows: &[&[&str]]) -> Result<Self> {
        MatrixField::from_expr_rows(
            rows.iter()
                .map(|r| r.iter().map(|s| NumOrText::Text(s.to_string())).collect())
                .collect(),
        )
    }

    pub fn tabulated(grid: Grid, entries: Vec<f64>) -> Result<Self> {
        let n = grid.dim();
        if entries.len() != grid.len() * n * (n + 1) / 2 {
            return Err(Error::Input("tabulated coefficient has the wrong entry count".into()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("tabulated coefficient has non-finite entries".into()));
        }
        Ok(MatrixField::Tabulated { grid, entries })
    }

    pub fn dim(&self) -> usize {
        match self {
            MatrixField::Constant(m) => m.dim(),
            MatrixField::Expr(rows) => rows.len(),
            MatrixField::Tabulated { grid, .. } => grid.dim(),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, MatrixField::Constant(_))
    }

    pub fn at(&self, x: &[f64]) -> Result<SymMatrix> {
        match self {
            MatrixField::Constant(m) => Ok(m.clone()),
            MatrixField::Expr(rows) => {
                let m = SymMatrix::from_fn(rows.len(), |i, j| rows[i.min(j)][i.max(j)].eval(x));
                if !m.is_finite() {
                    return Err(Error::Numerical(format!("coefficient is not finite at {x:?}")));
                }
                Ok(m)
            }
            MatrixField::Tabulated { grid, entries } => {
                let k = grid
                    .cell_containing(x)
                    .ok_or_else(|| Error::domain(format!("{x:?} is outside the coefficient grid")))?;
                let n = grid.dim();
                let w = n * (n + 1) / 2;
                let packed = &entries[k * w..(k + 1) * w];
                let mut m = SymMatrix::zeros(n);
                let mut t = 0;
                for i in 0..n {
                    for j in i..n {
                        m.set(i, j, packed[t]);
                        t += 1;
                    }
                }
                Ok(m)
            }
        }
    }
}

/// The structural shape of `F(x, .)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum OperatorForm {
    /// `tr(A(x) X)`.
    TraceLinear { matrix: MatrixField },
    /// `max_k tr(A_k(x) X)`.
    Bellman { matrices: Vec<MatrixField> },
    /// `min_i max_j tr(A_ij(x) X)`.
    Isaacs { matrices: Vec<Vec<MatrixField>> },
    PucciPlus,
    PucciMinus,
    /// Mean of x-independent operators, as produced by [`averaged_operator`].
    Mean { parts: Vec<OperatorSpec> },
}

/// A concrete operator with its ellipticity pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub dim: usize,
    pub ellipticity: EllipticityPair,
    #[serde(flatten)]
    pub form: OperatorForm,
    /// Where `x`-dependent coefficients may be evaluated. Unrestricted when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<BoxDomain>,
}

/// `F(x, .)` with its coefficients frozen at one point.
#[derive(Clone, Debug, PartialEq)]
pub enum OpNode {
    Trace(SymMatrix),
    Max(Vec<OpNode>),
    Min(Vec<OpNode>),
    Mean(Vec<OpNode>),
    PucciPlus(EllipticityPair),
    PucciMinus(EllipticityPair),
}

impl OpNode {
    pub fn eval(&self, x: &SymMatrix) -> Result<f64> {
        Ok(match self {
            OpNode::Trace(a) => a.frobenius_dot(x),
            OpNode::Max(v) => {
                let mut best = f64::NEG_INFINITY;
                for c in v {
                    best = best.max(c.eval(x)?);
                }
                best
            }
            OpNode::Min(v) => {
                let mut best = f64::INFINITY;
                for c in v {
                    best = best.min(c.eval(x)?);
                }
                best
            }
            OpNode::Mean(v) => {
                let mut s = 0.0;
                for c in v {
                    s += c.eval(x)?;
                }
                s / v.len() as f64
            }
            OpNode::PucciPlus(e) => pucci_plus(x, *e)?,
            OpNode::PucciMinus(e) => pucci_minus(x, *e)?,
        })
    }

    /// Every coefficient matrix appearing in the node.
    pub fn matrices(&self) -> Vec<&SymMatrix> {
        match self {
            OpNode::Trace(a) => vec![a],
            OpNode::Max(v) | OpNode::Min(v) | OpNode::Mean(v) => v.iter().flat_map(|c| c.matrices()).collect(),
            _ => Vec::new(),
        }
    }
}

impl OperatorSpec {
    pub fn new(dim: usize, ellipticity: EllipticityPair, form: OperatorForm) -> Result<Self> {
        let spec = OperatorSpec {
            dim,
            ellipticity,
            form,
            domain: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `tr(X)` with `lambda = Lambda = 1`.
    pub fn laplacian(dim: usize) -> Self {
        OperatorSpec {
            dim,
            ellipticity: EllipticityPair::unit(),
            form: OperatorForm::TraceLinear {
                matrix: MatrixField::Constant(SymMatrix::identity(dim)),
            },
            domain: None,
        }
    }

    pub fn trace_linear(matrix: MatrixField, e: EllipticityPair) -> Result<Self> {
        OperatorSpec::new(matrix.dim(), e, OperatorForm::TraceLinear { matrix })
    }

    pub fn bellman(matrices: Vec<MatrixField>, e: EllipticityPair) -> Result<Self> {
        let dim = matrices.first().map(MatrixField::dim).unwrap_or(0);
        OperatorSpec::new(dim, e, OperatorForm::Bellman { matrices })
    }

    pub fn isaacs(matrices: Vec<Vec<MatrixField>>, e: EllipticityPair) -> Result<Self> {
        let dim = matrices
            .first()
            .and_then(|v| v.first())
            .map(MatrixField::dim)
            .unwrap_or(0);
        OperatorSpec::new(dim, e, OperatorForm::Isaacs { matrices })
    }

    pub fn pucci_plus(dim: usize, e: EllipticityPair) -> Self {
        OperatorSpec {
            dim,
            ellipticity: e,
            form: OperatorForm::PucciPlus,
            domain: None,
        }
    }

    pub fn pucci_minus(dim: usize, e: EllipticityPair) -> Self {
        OperatorSpec {
            dim,
            ellipticity: e,
            form: OperatorForm::PucciMinus,
            domain: None,
        }
    }

    pub fn with_domain(mut self, domain: BoxDomain) -> Self {
        self.domain = Some(domain);
        self
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: OperatorSpec = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Structural checks: dimensions agree, lists are non-empty, constant
    /// coefficients have spectra inside `[lambda, Lambda]`. Expression
    /// coefficients are only checked by sampling, see [`ellipticity_audit`].
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.dim) {
            return Err(Error::arg(format!("operator dimension must be 2..=4, got {}", self.dim)));
        }
        let check = |m: &MatrixField| -> Result<()> {
            if m.dim() != self.dim {
                return Err(Error::arg(format!(
                    "coefficient is {}x{}, operator dimension is {}",
                    m.dim(),
                    m.dim(),
                    self.dim
                )));
            }
            if let MatrixField::Expr(rows) = m {
                if rows.iter().flatten().any(|e| e.required_dim() > self.dim) {
                    return Err(Error::arg("coefficient expression uses too many coordinates"));
                }
            }
            if let MatrixField::Constant(a) = m {
                if !self.ellipticity.admits(a, 1e-12)? {
                    return Err(Error::arg(format!(
                        "coefficient {:?} has spectrum outside [{}, {}]",
                        a.to_rows(),
                        self.ellipticity.lambda,
                        self.ellipticity.big_lambda
                    )));
                }
            }
            Ok(())
        };
        match &self.form {
            OperatorForm::TraceLinear { matrix } => check(matrix)?,
            OperatorForm::Bellman { matrices } => {
                if matrices.is_empty() {
                    return Err(Error::arg("bellman form needs at least one matrix"));
                }
                matrices.iter().try_for_each(check)?;
            }
            OperatorForm::Isaacs { matrices } => {
                if matrices.is_empty() || matrices.iter().any(Vec::is_empty) {
                    return Err(Error::arg("isaacs form needs non-empty matrix lists"));
                }
                matrices.iter().flatten().try_for_each(check)?;
            }
            OperatorForm::PucciPlus | OperatorForm::PucciMinus => {}
            OperatorForm::Mean { parts } => {
                if parts.is_empty() {
                    return Err(Error::arg("mean form needs at least one part"));
                }
                for p in parts {
                    if p.dim != self.dim || !p.is_x_independent() {
                        return Err(Error::arg("mean parts must be x-independent and of equal dimension"));
                    }
                    p.validate()?;
                }
            }
        }
        Ok(())
    }

    pub fn is_x_independent(&self) -> bool {
        match &self.form {
            OperatorForm::TraceLinear { matrix } => matrix.is_constant(),
            OperatorForm::Bellman { matrices } => matrices.iter().all(MatrixField::is_constant),
            OperatorForm::Isaacs { matrices } => matrices.iter().flatten().all(MatrixField::is_constant),
            OperatorForm::PucciPlus | OperatorForm::PucciMinus => true,
            OperatorForm::Mean { parts } => parts.iter().all(OperatorSpec::is_x_independent),
        }
    }

    /// The operator at `x` with coefficients evaluated.
    pub fn node_at(&self, x: &[f64]) -> Result<OpNode> {
        if x.len() != self.dim {
            return Err(Error::arg(format!("point has {} coordinates, operator needs {}", x.len(), self.dim)));
        }
        if let Some(d) = &self.domain {
            if !d.contains(x, 1e-12) {
                return Err(Error::domain(format!("{x:?} is outside the coefficient domain")));
            }
        }
        Ok(match &self.form {
            OperatorForm::TraceLinear { matrix } => OpNode::Trace(matrix.at(x)?),
            OperatorForm::Bellman { matrices } => {
                OpNode::Max(matrices.iter().map(|m| m.at(x).map(OpNode::Trace)).collect::<Result<_>>()?)
            }
            OperatorForm::Isaacs { matrices } => OpNode::Min(
                matrices
                    .iter()
                    .map(|row| {
                        row.iter()
                            .map(|m| m.at(x).map(OpNode::Trace))
                            .collect::<Result<Vec<_>>>()
                            .map(OpNode::Max)
                    })
                    .collect::<Result<_>>()?,
            ),
            OperatorForm::PucciPlus => OpNode::PucciPlus(self.ellipticity),
            OperatorForm::PucciMinus => OpNode::PucciMinus(self.ellipticity),
            OperatorForm::Mean { parts } => {
                OpNode::Mean(parts.iter().map(|p| p.node_at(x)).collect::<Result<_>>()?)
            }
        })
    }

    /// `F(x, X)`.
    pub fn evaluate(&self, x: &[f64], m: &SymMatrix) -> Result<f64> {
        if m.dim() != self.dim {
            return Err(Error::arg("matrix dimension does not match the operator"));
        }
        self.node_at(x)?.eval(m)
    }

    /// Copy of the operator with coefficients frozen at `x`.
    pub fn freeze(&self, x: &[f64]) -> Result<OperatorSpec> {
        let c = |m: &MatrixField| m.at(x).map(MatrixField::Constant);
        let form = match &self.form {
            OperatorForm::TraceLinear { matrix } => OperatorForm::TraceLinear { matrix: c(matrix)? },
            OperatorForm::Bellman { matrices } => OperatorForm::Bellman {
                matrices: matrices.iter().map(c).collect::<Result<_>>()?,
            },
            OperatorForm::Isaacs { matrices } => OperatorForm::Isaacs {
                matrices: matrices
                    .iter()
                    .map(|r| r.iter().map(c).collect::<Result<_>>())
                    .collect::<Result<_>>()?,
            },
            f => f.clone(),
        };
        if let Some(d) = &self.domain {
            if !d.contains(x, 1e-12) {
                return Err(Error::domain(format!("{x:?} is outside the coefficient domain")));
            }
        }
        Ok(OperatorSpec {
            dim: self.dim,
            ellipticity: self.ellipticity,
            form,
            domain: None,
        })
    }
}

/// Symmetric matrix with independent uniform entries in `[-1, 1]`.
pub fn random_symmetric(dim: usize, rng: &mut impl Rng) -> SymMatrix {
    SymMatrix::from_fn(dim, |_, _| rng.gen_range(-1.0..=1.0))
}

/// Checks `P-(X - Y) <= F(x, X) - F(x, Y) <= P+(X - Y)` on the rank-one
/// probes `e_i e_i^T` and on `samples` random triples.
pub fn ellipticity_audit(f: &OperatorSpec, e: EllipticityPair, samples: usize, seed: u64) -> Result<AuditReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domain = f
        .domain
        .clone()
        .unwrap_or_else(|| BoxDomain::cube(f.dim, -1.0, 1.0));
    let n = f.dim;
    let mut triples = Vec::with_capacity(samples + 2 * n);
    let centre = domain.center();
    for i in 0..n {
        let mut d = vec![0.0; n];
        d[i] = 1.0;
        triples.push((centre.clone(), SymMatrix::from_diag(&d), SymMatrix::zeros(n)));
        d[i] = -1.0;
        triples.push((centre.clone(), SymMatrix::from_diag(&d), SymMatrix::zeros(n)));
    }
    for _ in 0..samples {
        let x: Vec<f64> = domain
            .low
            .iter()
            .zip(&domain.high)
            .map(|(l, h)| rng.gen_range(*l..=*h))
            .collect();
        let scale = 10f64.powf(rng.gen_range(-2.0..2.0));
        let a = random_symmetric(n, &mut rng).scale(scale);
        let b = random_symmetric(n, &mut rng).scale(scale);
        triples.push((x, a, b));
    }
    let mut report = AuditReport::new("ellipticity", seed);
    for (k, (x, a, b)) in triples.iter().enumerate() {
        let diff = f.evaluate(x, a)? - f.evaluate(x, b)?;
        let z = a.sub(b);
        let eigs = z.eigenvalues()?;
        let lo = pucci_minus_eigs(&eigs, e);
        let hi = pucci_plus_eigs(&eigs, e);
        let detail = || format!("x={x:?} X-Y={:?} F-diff={diff}", z.to_rows());
        report.record("lower", ELLIPTICITY_TOL, k, diff - lo, detail);
        report.record("upper", ELLIPTICITY_TOL, k, hi - diff, || {
            format!("x={x:?} X-Y={:?} F-diff={diff} P+={hi}", z.to_rows())
        });
    }
    report.samples = triples.len();
    Ok(report)
}

/// `(F)_B(Y)`: the mean of `F(x, Y)` over the grid cell centres strictly
/// inside `ball`. The result does not depend on `x`.
pub fn averaged_operator(f: &OperatorSpec, grid: &Grid, ball: &Ball) -> Result<OperatorSpec> {
    if f.is_x_independent() {
        return Ok(OperatorSpec { domain: None, ..f.clone() });
    }
    let mut cells = Vec::new();
    grid.for_each_in_ball(ball, |c, _| {
        if let Some(c) = c {
            cells.push(c);
        }
    });
    if cells.is_empty() {
        return Err(Error::domain("ball contains no grid cell centre"));
    }
    let frozen: Vec<OperatorSpec> = cells
        .iter()
        .map(|&c| f.freeze(&grid.center(c)))
        .collect::<Result<_>>()?;
    if let OperatorForm::TraceLinear { .. } = f.form {
        let mut sum = SymMatrix::zeros(f.dim);
        for p in &frozen {
            if let OperatorForm::TraceLinear {
                matrix: MatrixField::Constant(a),
            } = &p.form
            {
                sum = sum.add(a);
            }
        }
        return OperatorSpec::trace_linear(
            MatrixField::Constant(sum.scale(1.0 / frozen.len() as f64)),
            f.ellipticity,
        );
    }
    OperatorSpec::new(f.dim, f.ellipticity, OperatorForm::Mean { parts: frozen })
}

/// Finite probe set for [`coefficient_bmo_modulus`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulusProbes {
    /// Radii `R, R/2, ..., R/2^(levels-1)` are probed for each requested `R`.
    pub levels: usize,
    pub matrices: usize,
    /// Ball centres on every `center_stride`-th cell.
    pub center_stride: usize,
    pub seed: u64,
}

impl Default for ModulusProbes {
    fn default() -> Self {
        ModulusProbes {
            levels: 9,
            matrices: 64,
            center_stride: 4,
            seed: 0,
        }
    }
}

/// Lower estimate of the coefficient oscillation `omega(R)` with `|Y|` the
/// Frobenius norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientModulus {
    pub radii: Vec<f64>,
    pub omega_values: Vec<f64>,
    pub balls: usize,
    pub probe_matrices: usize,
    pub norm: String,
}

pub fn coefficient_bmo_modulus(
    f: &OperatorSpec,
    grid: &Grid,
    radii: &[f64],
    probes: &ModulusProbes,
) -> Result<CoefficientModulus> {
    if radii.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::arg("coefficient modulus radii must be positive"));
    }
    if grid.dim() != f.dim {
        return Err(Error::arg("grid and operator dimensions differ"));
    }
    let mut sorted = radii.to_vec();
    sorted.sort_by(f64::total_cmp);
    let out_probes = probes.matrices.max(1);
    if f.is_x_independent() {
        return Ok(CoefficientModulus {
            radii: sorted.clone(),
            omega_values: vec![0.0; sorted.len()],
            balls: 0,
            probe_matrices: out_probes,
            norm: "frobenius".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(probes.seed);
    let ys: Vec<SymMatrix> = (0..out_probes)
        .map(|_| {
            let y = random_symmetric(f.dim, &mut rng);
            let s = y.frobenius_norm();
            y.scale(1.0 / s)
        })
        .collect();
    // F(x, Y_k) for every cell, probe-major
    let k_count = ys.len();
    let values: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|c| -> Result<Vec<f64>> {
            let node = f.node_at(&grid.center(c))?;
            ys.iter().map(|y| node.eval(y)).collect()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let stride = probes.center_stride.max(1);
    let centres: Vec<usize> = (0..grid.len())
        .filter(|&c| grid.multi_index(c).iter().all(|i| i % stride == stride / 2))
        .collect();
    let mut omega = Vec::with_capacity(sorted.len());
    let mut balls = 0;
    let mut running = 0.0f64;
    for &r in &sorted {
        let rhos: Vec<f64> = (0..probes.levels.max(1)).map(|k| r / 2f64.powi(k as i32)).collect();
        let (best, count) = rhos
            .par_iter()
            .map(|&rho| {
                let mut best = 0.0f64;
                let mut count = 0usize;
                for &c in &centres {
                    let ball = Ball {
                        center: grid.center(c),
                        radius: rho,
                    };
                    if !grid.contains_ball(&ball) {
                        continue;
                    }
                    let mut cells = Vec::new();
                    grid.for_each_in_ball(&ball, |cell, _| cells.extend(cell));
                    if cells.is_empty() {
                        continue;
                    }
                    count += 1;
                    let m = cells.len() as f64;
                    for k in 0..k_count {
                        let mean = cells.iter().map(|&x| values[x * k_count + k]).sum::<f64>() / m;
                        let osc = cells
                            .iter()
                            .map(|&x| (values[x * k_count + k] - mean).abs())
                            .sum::<f64>()
                            / m;
                        best = best.max(osc);
                    }
                }
                (best, count)
            })
            .reduce(|| (0.0, 0), |a, b| (a.0.max(b.0), a.1 + b.1));
        balls += count;
        running = running.max(best);
        omega.push(running);
    }
    Ok(CoefficientModulus {
        radii: sorted,
        omega_values: omega,
        balls,
        probe_matrices: k_count,
        norm: "frobenius".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn e(l: f64, big: f64) -> EllipticityPair {
        EllipticityPair::new(l, big).unwrap()
    }

    #[test]
    fn pucci_examples() {
        let x = SymMatrix::from_diag(&[1.0, -1.0]);
        assert_eq!(pucci_minus(&x, e(1.0, 2.0)).unwrap(), -1.0);
        assert_eq!(pucci_plus(&x, e(1.0, 2.0)).unwrap(), 1.0);
        assert_eq!(pucci_minus(&SymMatrix::identity(3), e(1.0, 2.0)).unwrap(), 3.0);
        assert_eq!(pucci_plus(&SymMatrix::scaled_identity(2, -1.0), e(1.0, 2.0)).unwrap(), -2.0);
    }

    #[test]
    fn pucci_against_nalgebra_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = e(0.5, 3.0);
        for _ in 0..200 {
            let x = random_symmetric(4, &mut rng);
            let m = nalgebra::DMatrix::from_fn(4, 4, |i, j| x.get(i, j));
            let ev = m.symmetric_eigen().eigenvalues;
            let plus: f64 = ev.iter().map(|&v| if v > 0.0 { 3.0 * v } else { 0.5 * v }).sum();
            let minus: f64 = ev.iter().map(|&v| if v > 0.0 { 0.5 * v } else { 3.0 * v }).sum();
            assert!((pucci_plus(&x, ep).unwrap() - plus).abs() < 1e-12);
            assert!((pucci_minus(&x, ep).unwrap() - minus).abs() < 1e-12);
        }
    }

    #[test]
    fn ellipticity_pair_validation() {
        assert!(EllipticityPair::new(0.0, 1.0).is_err());
        assert!(EllipticityPair::new(2.0, 1.0).is_err());
        assert!(toml::from_str::<EllipticityPair>("lambda = 2.0\nLambda = 1.0").is_err());
    }

    #[test]
    fn evaluate_examples() {
        let lap = OperatorSpec::laplacian(2);
        assert_eq!(lap.evaluate(&[0.0, 0.0], &SymMatrix::from_diag(&[2.0, 3.0])).unwrap(), 5.0);
        let b = OperatorSpec::bellman(
            vec![
                MatrixField::Constant(SymMatrix::identity(2)),
                MatrixField::Constant(SymMatrix::scaled_identity(2, 2.0)),
            ],
            e(1.0, 2.0),
        )
        .unwrap();
        assert_eq!(b.evaluate(&[0.0, 0.0], &SymMatrix::from_diag(&[1.0, -1.0])).unwrap(), 0.0);
        let b = OperatorSpec::bellman(
            vec![
                MatrixField::Constant(SymMatrix::from_diag(&[1.0, 2.0])),
                MatrixField::Constant(SymMatrix::from_diag(&[2.0, 1.0])),
            ],
            e(1.0, 2.0),
        )
        .unwrap();
        assert_eq!(b.evaluate(&[0.0, 0.0], &SymMatrix::from_diag(&[1.0, -1.0])).unwrap(), 1.0);
    }

    #[test]
    fn isaacs_is_min_of_max() {
        let d = |a: f64, b: f64| MatrixField::Constant(SymMatrix::from_diag(&[a, b]));
        let f = OperatorSpec::isaacs(vec![vec![d(1.0, 2.0), d(2.0, 1.0)], vec![d(1.0, 1.0)]], e(1.0, 2.0)).unwrap();
        let x = SymMatrix::from_diag(&[1.0, -1.0]);
        assert_eq!(f.evaluate(&[0.0, 0.0], &x).unwrap(), 0.0);
    }

    #[test]
    fn domain_errors() {
        let f = OperatorSpec::trace_linear(MatrixField::expr(&[&["1 + x1^2", "0"], &["0", "1 + x1^2"]]).unwrap(), e(1.0, 2.0))
            .unwrap()
            .with_domain(BoxDomain::cube(2, -1.0, 1.0));
        assert!(matches!(f.evaluate(&[1.5, 0.0], &SymMatrix::identity(2)), Err(Error::Domain(_))));
        let g = Grid::cube(2, 0.0, 1.0, 8).unwrap();
        let t = MatrixField::tabulated(g, [1.0, 0.0, 1.0].repeat(64)).unwrap();
        assert!(matches!(t.at(&[2.0, 0.5]), Err(Error::Domain(_))));
        assert_eq!(t.at(&[0.5, 0.5]).unwrap(), SymMatrix::identity(2));
    }

    #[test]
    fn toml_roundtrip() {
        let text = r#"
dim = 2
form = "bellman"
ellipticity = { lambda = 1.0, Lambda = 2.0 }
matrices = [ [[1, 0], [0, 1]], [["1 + 0.5*sin(x1)", 0], [0, 1]] ]
"#;
        let f = OperatorSpec::from_toml(text).unwrap();
        assert!(!f.is_x_independent());
        let back = OperatorSpec::from_toml(&f.to_toml().unwrap()).unwrap();
        assert_eq!(back, f);
        let x = SymMatrix::from_diag(&[1.0, 0.0]);
        assert!((f.evaluate(&[1.0, 0.0], &x).unwrap() - (1.0 + 0.5 * 1f64.sin())).abs() < 1e-15);
    }

    #[test]
    fn malformed_documents_rejected() {
        assert!(OperatorSpec::from_toml("dim = 2\nform = \"nope\"\nellipticity = { lambda = 1.0, Lambda = 1.0 }").is_err());
        let bad_spectrum = "dim = 2\nform = \"trace-linear\"\nellipticity = { lambda = 1.0, Lambda = 2.0 }\nmatrix = [[3, 0], [0, 1]]";
        assert!(OperatorSpec::from_toml(bad_spectrum).is_err());
        let asym = "dim = 2\nform = \"trace-linear\"\nellipticity = { lambda = 1.0, Lambda = 2.0 }\nmatrix = [[1, 0.5], [0, 1]]";
        assert!(OperatorSpec::from_toml(asym).is_err());
    }

    #[test]
    fn laplacian_saturates_both_sides() {
        let r = ellipticity_audit(&OperatorSpec::laplacian(2), e(1.0, 1.0), 500, 1).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.worst_margin.abs() < 1e-9);
    }

    #[test]
    fn bellman_with_admissible_spectra_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mats: Vec<MatrixField> = (0..4)
            .map(|_| {
                let q = random_symmetric(3, &mut rng).eigen().unwrap();
                let d: Vec<f64> = (0..3).map(|_| rng.gen_range(0.7..=2.5)).collect();
                let a = SymMatrix::from_fn(3, |i, j| (0..3).map(|k| q.vectors[i][k] * d[k] * q.vectors[j][k]).sum());
                MatrixField::Constant(a)
            })
            .collect();
        let f = OperatorSpec::bellman(mats, e(0.7, 2.5)).unwrap();
        let r = ellipticity_audit(&f, e(0.7, 2.5), 1000, 2).unwrap();
        assert!(r.passed(), "{:?}", r.failures);
    }

    #[test]
    fn misdeclared_ellipticity_is_caught() {
        let f = OperatorSpec {
            dim: 2,
            ellipticity: e(1.0, 3.0),
            form: OperatorForm::TraceLinear {
                matrix: MatrixField::Constant(SymMatrix::from_diag(&[3.0, 1.0])),
            },
            domain: None,
        };
        let r = ellipticity_audit(&f, e(1.0, 2.0), 100, 3).unwrap();
        assert!(r.violations >= 1);
    }

    #[test]
    fn averaging_x_independent_is_identity() {
        let g = Grid::cube(2, -1.0, 1.0, 32).unwrap();
        let f = OperatorSpec::pucci_plus(2, e(1.0, 2.0));
        let avg = averaged_operator(&f, &g, &Ball::new(vec![0.0, 0.0], 0.5).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let y = random_symmetric(2, &mut rng);
            let a = avg.evaluate(&[0.3, 0.3], &y).unwrap();
            let b = f.evaluate(&[0.3, 0.3], &y).unwrap();
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn averaged_trace_matrix_matches_cell_sum() {
        let g = Grid::cube(2, -1.0, 1.0, 32).unwrap();
        let f = OperatorSpec::trace_linear(MatrixField::expr(&[&["1 + x1^2", "0"], &["0", "1 + x1^2"]]).unwrap(), e(1.0, 2.0)).unwrap();
        let ball = Ball::new(vec![0.0, 0.0], 0.6).unwrap();
        let avg = averaged_operator(&f, &g, &ball).unwrap();
        let mut s = 0.0;
        let mut c = 0.0;
        for k in 0..g.len() {
            let x = g.center(k);
            if x[0] * x[0] + x[1] * x[1] < 0.36 {
                s += x[0] * x[0];
                c += 1.0;
            }
        }
        let want = 1.0 + s / c;
        match &avg.form {
            OperatorForm::TraceLinear {
                matrix: MatrixField::Constant(a),
            } => {
                assert!((a.get(0, 0) - want).abs() < 1e-13);
                assert!((a.get(1, 1) - want).abs() < 1e-13);
                assert!(a.get(0, 1).abs() < 1e-15);
            }
            other => panic!("unexpected form {other:?}"),
        }
    }

    #[test]
    fn averaged_bellman_keeps_ellipticity() {
        let g = Grid::cube(2, -1.0, 1.0, 16).unwrap();
        let f = OperatorSpec::bellman(
            vec![
                MatrixField::expr(&[&["1.5 + 0.5*sin(3*x1)", "0"], &["0", "1"]]).unwrap(),
                MatrixField::expr(&[&["1", "0"], &["0", "1.5 + 0.5*cos(2*x2)"]]).unwrap(),
            ],
            e(1.0, 2.0),
        )
        .unwrap();
        assert!(ellipticity_audit(&f, e(1.0, 2.0), 300, 5).unwrap().passed());
        let avg = averaged_operator(&f, &g, &Ball::new(vec![0.1, -0.2], 0.5).unwrap()).unwrap();
        assert!(avg.is_x_independent());
        let r = ellipticity_audit(&avg, e(1.0, 2.0), 300, 5).unwrap();
        assert!(r.passed(), "{:?}", r.failures);
    }

    #[test]
    fn modulus_zero_for_x_independent() {
        let g = Grid::cube(2, -1.0, 1.0, 16).unwrap();
        let m = coefficient_bmo_modulus(&OperatorSpec::laplacian(2), &g, &[0.25, 0.5], &ModulusProbes::default()).unwrap();
        assert!(m.omega_values.iter().all(|w| w.abs() <= 1e-12));
        assert!(coefficient_bmo_modulus(&OperatorSpec::laplacian(2), &g, &[0.0], &ModulusProbes::default()).is_err());
    }

    /// For `A = a(x) I` the oscillation is `|a - (a)_B| |tr Y| / |Y|`, and
    /// `|tr Y| <= sqrt(n) |Y|` bounds the estimate by the scalar oscillation.
    #[test]
    fn modulus_of_oscillating_scalar_coefficient() {
        let g = Grid::cube(2, -1.0, 1.0, 32).unwrap();
        let probes = ModulusProbes {
            levels: 4,
            matrices: 32,
            center_stride: 4,
            seed: 1,
        };
        let mut prev = 0.0;
        for eps in [0.1, 0.2, 0.4] {
            let s = format!("1 + {eps}*sin(x1/0.1)");
            let f = OperatorSpec::trace_linear(MatrixField::expr(&[&[&s, "0"], &["0", &s]]).unwrap(), e(1.0 - eps, 1.0 + eps)).unwrap();
            let m = coefficient_bmo_modulus(&f, &g, &[0.4], &probes).unwrap();
            let w = m.omega_values[0];
            // scalar profile oscillation over the same probe balls
            let mut scalar: f64 = 0.0;
            for c in 0..g.len() {
                let idx = g.multi_index(c);
                if !idx.iter().all(|i| i % 4 == 2) {
                    continue;
                }
                for k in 0..4 {
                    let ball = Ball::new(g.center(c), 0.4 / 2f64.powi(k)).unwrap();
                    if !g.contains_ball(&ball) {
                        continue;
                    }
                    let mut v = Vec::new();
                    g.for_each_in_ball(&ball, |cell, _| {
                        if let Some(cell) = cell {
                            v.push(eps * (g.center(cell)[0] / 0.1).sin());
                        }
                    });
                    let mean = v.iter().sum::<f64>() / v.len() as f64;
                    scalar = scalar.max(v.iter().map(|a| (a - mean).abs()).sum::<f64>() / v.len() as f64);
                }
            }
            assert!(w <= 2f64.sqrt() * scalar + 1e-12, "eps={eps} w={w} bound={}", 2f64.sqrt() * scalar);
            assert!(w >= 0.3 * scalar, "eps={eps} w={w} scalar={scalar}");
            assert!(w > prev);
            prev = w;
        }
    }

    #[test]
    fn modulus_monotone_in_radius() {
        let g = Grid::cube(2, -1.0, 1.0, 32).unwrap();
        let f = OperatorSpec::trace_linear(MatrixField::expr(&[&["1.5 + 0.5*sign(x1)", "0"], &["0", "1"]]).unwrap(), e(1.0, 2.0)).unwrap();
        let m = coefficient_bmo_modulus(&f, &g, &[0.1, 0.2, 0.4, 0.8], &ModulusProbes { matrices: 16, ..Default::default() }).unwrap();
        for w in m.omega_values.windows(2) {
            assert!(w[0] <= w[1] + 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pucci_invariants(seed in 0u64..1_000_000, l in 0.1f64..2.0, gap in 0.0f64..3.0, t in 0.0f64..10.0, n in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ep = e(l, l + gap);
            let x = random_symmetric(n, &mut rng);
            let p = pucci_plus(&x, ep).unwrap();
            let m = pucci_minus(&x, ep).unwrap();
            prop_assert!(m <= p + 1e-10);
            prop_assert!((pucci_plus(&x.scale(t), ep).unwrap() - t * p).abs() <= 1e-10 * (1.0 + t));
            prop_assert!((pucci_plus(&x.scale(-1.0), ep).unwrap() + m).abs() <= 1e-12);
            let eq = e(l, l);
            prop_assert!((pucci_plus(&x, eq).unwrap() - l * x.trace()).abs() <= 1e-10);
            prop_assert!((pucci_minus(&x, eq).unwrap() - l * x.trace()).abs() <= 1e-10);
        }
    }
}
