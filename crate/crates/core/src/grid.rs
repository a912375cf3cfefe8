//! Uniform Cartesian grids over boxes, cell-centred fields and ball averages.
//!
//! Every quadrature in the crate is the midpoint rule on cell centres: a ball
//! contains the cells whose centres lie strictly inside it. Fields are
//! extended by zero outside the grid box, so a ball that leaves the box still
//! counts the (virtual) lattice points outside with value zero.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;

/// Minimum number of cells per axis.
pub const MIN_CELLS: usize = 8;

/// Axis-aligned box `[low_i, high_i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl BoxDomain {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.len() != high.len() || low.is_empty() {
            return Err(Error::arg("box corners must have equal, positive length"));
        }
        if low.iter().zip(&high).any(|(l, h)| !(l < h)) {
            return Err(Error::arg("box must have low < high on every axis"));
        }
        Ok(BoxDomain { low, high })
    }

    pub fn cube(dim: usize, low: f64, high: f64) -> Self {
        BoxDomain {
            low: vec![low; dim],
            high: vec![high; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.low.iter().zip(&self.high))
                .all(|(v, (l, h))| *v >= l - tol && *v <= h + tol)
    }

    pub fn center(&self) -> Vec<f64> {
        self.low.iter().zip(&self.high).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    /// The concentric box obtained by removing `fraction` of the width on
    /// each side of every axis.
    pub fn shrink(&self, fraction: f64) -> BoxDomain {
        let (low, high) = self
            .low
            .iter()
            .zip(&self.high)
            .map(|(l, h)| {
                let m = fraction * (h - l);
                (l + m, h - m)
            })
            .unzip();
        BoxDomain { low, high }
    }
}

/// Euclidean ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::arg(format!("ball radius must be positive, got {radius}")));
        }
        Ok(Ball { center, radius })
    }

    /// `omega_n r^n`.
    pub fn volume(&self) -> f64 {
        unit_ball_volume(self.center.len()) * self.radius.powi(self.center.len() as i32)
    }
}

/// Volume of the unit ball, `pi^{n/2} / Gamma(n/2 + 1)`.
pub fn unit_ball_volume(n: usize) -> f64 {
    // V_n = V_{n-2} 2 pi / n
    let mut v = if n.is_multiple_of(2) { 1.0 } else { 2.0 };
    let mut k = if n.is_multiple_of(2) { 2 } else { 3 };
    while k <= n {
        v *= 2.0 * std::f64::consts::PI / k as f64;
        k += 2;
    }
    v
}

/// Uniform grid of `cells[i]` cells of common width `h` over a box.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    low: Vec<f64>,
    high: Vec<f64>,
    cells: Vec<usize>,
    h: f64,
    strides: Vec<usize>,
}

/// Serialized grid description: `{dim, extent, cells}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub extent: Vec<[f64; 2]>,
    pub cells: Vec<usize>,
}

impl Grid {
    pub fn new(low: Vec<f64>, high: Vec<f64>, cells: Vec<usize>) -> Result<Self> {
        let dim = low.len();
        if !(2..=4).contains(&dim) || high.len() != dim || cells.len() != dim {
            return Err(Error::arg("grids must have 2 to 4 axes with matching extents"));
        }
        BoxDomain::new(low.clone(), high.clone())?;
        if let Some(c) = cells.iter().find(|&&c| c < MIN_CELLS) {
            return Err(Error::arg(format!("grids need at least {MIN_CELLS} cells per axis, got {c}")));
        }
        let h = (high[0] - low[0]) / cells[0] as f64;
        for i in 1..dim {
            let hi = (high[i] - low[i]) / cells[i] as f64;
            if (hi - h).abs() > 1e-14 * h.abs().max(1.0) {
                return Err(Error::arg("cell width must be identical on every axis"));
            }
        }
        let mut strides = vec![1; dim];
        for i in (0..dim - 1).rev() {
            strides[i] = strides[i + 1] * cells[i + 1];
        }
        Ok(Grid {
            low,
            high,
            cells,
            h,
            strides,
        })
    }

    /// `m^dim` cells over `[low, high]^dim`.
    pub fn cube(dim: usize, low: f64, high: f64, m: usize) -> Result<Self> {
        Grid::new(vec![low; dim], vec![high; dim], vec![m; dim])
    }

    pub fn from_spec(spec: &GridSpec) -> Result<Self> {
        if spec.extent.len() != spec.dim {
            return Err(Error::arg("grid extent does not match its dimension"));
        }
        Grid::new(
            spec.extent.iter().map(|e| e[0]).collect(),
            spec.extent.iter().map(|e| e[1]).collect(),
            spec.cells.clone(),
        )
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            dim: self.dim(),
            extent: self.low.iter().zip(&self.high).map(|(l, h)| [*l, *h]).collect(),
            cells: self.cells.clone(),
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.low.len()
    }

    #[inline]
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn low(&self) -> &[f64] {
        &self.low
    }

    pub fn high(&self) -> &[f64] {
        &self.high
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn domain(&self) -> BoxDomain {
        BoxDomain {
            low: self.low.clone(),
            high: self.high.clone(),
        }
    }

    /// Total number of cells.
    pub fn len(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim() as i32)
    }

    /// Lebesgue measure of the grid box.
    pub fn measure(&self) -> f64 {
        self.len() as f64 * self.cell_volume()
    }

    #[inline]
    pub fn coord(&self, axis: usize, i: i64) -> f64 {
        self.low[axis] + (i as f64 + 0.5) * self.h
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for (a, s) in self.strides.iter().enumerate() {
            idx[a] = flat / s;
            flat %= s;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn center(&self, flat: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.center_into(flat, &mut x);
        x
    }

    pub fn center_into(&self, mut flat: usize, x: &mut [f64]) {
        for (a, s) in self.strides.iter().enumerate() {
            let i = flat / s;
            flat %= s;
            x[a] = self.coord(a, i as i64);
        }
    }

    /// Cell whose closed extent contains `x`, if any.
    pub fn cell_containing(&self, x: &[f64]) -> Option<usize> {
        let mut flat = 0;
        for a in 0..self.dim() {
            let t = ((x[a] - self.low[a]) / self.h).floor();
            if !(t >= 0.0) {
                return None;
            }
            let mut i = t as usize;
            if i == self.cells[a] && x[a] <= self.high[a] {
                i -= 1;
            }
            if i >= self.cells[a] {
                return None;
            }
            flat += i * self.strides[a];
        }
        Some(flat)
    }

    /// True when the closed ball lies inside the grid box.
    pub fn contains_ball(&self, ball: &Ball) -> bool {
        ball.center.len() == self.dim()
            && (0..self.dim()).all(|a| {
                ball.center[a] - ball.radius >= self.low[a] - 1e-12
                    && ball.center[a] + ball.radius <= self.high[a] + 1e-12
            })
    }

    /// Visits every lattice point (cell centre of the infinitely extended
    /// lattice) strictly inside `ball`, passing the flat index when the point
    /// belongs to the grid and its squared distance to the ball centre.
    pub fn for_each_in_ball(&self, ball: &Ball, mut visit: impl FnMut(Option<usize>, f64)) {
        let n = self.dim();
        let r2 = ball.radius * ball.radius;
        let mut lo = vec![0i64; n];
        let mut hi = vec![0i64; n];
        for a in 0..n {
            lo[a] = ((ball.center[a] - ball.radius - self.low[a]) / self.h - 0.5).ceil() as i64;
            hi[a] = ((ball.center[a] + ball.radius - self.low[a]) / self.h - 0.5).floor() as i64;
        }
        self.visit_axis(0, &lo, &hi, ball, r2, 0.0, Some(0), &mut visit);
    }

    #[allow(clippy::too_many_arguments)]
    fn visit_axis(
        &self,
        axis: usize,
        lo: &[i64],
        hi: &[i64],
        ball: &Ball,
        r2: f64,
        partial: f64,
        flat: Option<usize>,
        visit: &mut impl FnMut(Option<usize>, f64),
    ) {
        let last = axis + 1 == self.dim();
        for i in lo[axis]..=hi[axis] {
            let d = self.coord(axis, i) - ball.center[axis];
            let d2 = partial + d * d;
            if d2 >= r2 {
                continue;
            }
            let inside = i >= 0 && (i as usize) < self.cells[axis];
            let f = match (flat, inside) {
                (Some(f), true) => Some(f + i as usize * self.strides[axis]),
                _ => None,
            };
            if last {
                visit(f, d2);
            } else {
                self.visit_axis(axis + 1, lo, hi, ball, r2, d2, f, visit);
            }
        }
    }

    /// Number of lattice points strictly inside the ball (zero-extended lattice).
    pub fn lattice_count(&self, ball: &Ball) -> usize {
        let mut c = 0;
        self.for_each_in_ball(ball, |_, _| c += 1);
        c
    }
}

impl Serialize for Grid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.spec().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Grid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let spec = GridSpec::deserialize(d)?;
        Grid::from_spec(&spec).map_err(serde::de::Error::custom)
    }
}

/// Lattice points around a fixed centre sorted by distance, for evaluating
/// averages over many concentric balls at once.
#[derive(Clone, Debug)]
pub struct RadialProfile {
    dist2: Vec<f64>,
    cells: Vec<Option<usize>>,
}

impl RadialProfile {
    pub fn new(grid: &Grid, center: &[f64], max_radius: f64) -> Result<Self> {
        let ball = Ball::new(center.to_vec(), max_radius)?;
        let mut pts: Vec<(f64, Option<usize>)> = Vec::new();
        grid.for_each_in_ball(&ball, |f, d2| pts.push((d2, f)));
        // ties broken by lattice order so the result is deterministic
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (dist2, cells) = pts.into_iter().unzip();
        Ok(RadialProfile { dist2, cells })
    }

    /// Lattice points strictly inside the ball of radius `rho`.
    pub fn count(&self, rho: f64) -> usize {
        let r2 = rho * rho;
        self.dist2.partition_point(|&d| d < r2)
    }

    /// Prefix sums of `weight(cell)` over the sorted points; points outside the
    /// grid contribute zero. `prefix[k]` sums the first `k` points.
    pub fn prefix(&self, mut weight: impl FnMut(usize) -> f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.cells.len() + 1);
        let mut acc = 0.0;
        out.push(0.0);
        for c in &self.cells {
            if let Some(f) = c {
                acc += weight(*f);
            }
            out.push(acc);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.dist2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dist2.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Scalar,
    Vector,
}

/// Samples at cell centres: one value per cell, or `dim` values per cell
/// (interleaved) for vector fields.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    grid: Grid,
    kind: FieldKind,
    values: Vec<f64>,
}

impl GridField {
    pub fn scalar(grid: Grid, values: Vec<f64>) -> Result<Self> {
        Self::with_kind(grid, FieldKind::Scalar, values)
    }

    pub fn vector(grid: Grid, values: Vec<f64>) -> Result<Self> {
        Self::with_kind(grid, FieldKind::Vector, values)
    }

    pub fn with_kind(grid: Grid, kind: FieldKind, values: Vec<f64>) -> Result<Self> {
        let comps = match kind {
            FieldKind::Scalar => 1,
            FieldKind::Vector => grid.dim(),
        };
        if values.len() != grid.len() * comps {
            return Err(Error::Input(format!(
                "field has {} values, grid needs {}",
                values.len(),
                grid.len() * comps
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite field value at index {k}")));
        }
        Ok(GridField { grid, kind, values })
    }

    pub fn constant(grid: &Grid, c: f64) -> Self {
        GridField {
            grid: grid.clone(),
            kind: FieldKind::Scalar,
            values: vec![c; grid.len()],
        }
    }

    pub fn zeros(grid: &Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    /// Samples `f` at every cell centre. Fails if any sample is not finite.
    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut x = vec![0.0; grid.dim()];
        let values = (0..grid.len())
            .map(|k| {
                grid.center_into(k, &mut x);
                f(&x)
            })
            .collect();
        Self::scalar(grid.clone(), values)
    }

    pub fn from_vector_fn(grid: &Grid, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let mut x = vec![0.0; grid.dim()];
        let mut values = Vec::with_capacity(grid.len() * grid.dim());
        for k in 0..grid.len() {
            grid.center_into(k, &mut x);
            values.extend(f(&x));
        }
        Self::vector(grid.clone(), values)
    }

    pub fn from_expr(grid: &Grid, e: &Expr) -> Result<Self> {
        if e.required_dim() > grid.dim() {
            return Err(Error::arg(format!(
                "expression `{e}` uses more coordinates than the grid has"
            )));
        }
        Self::from_fn(grid, |x| e.eval(x))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn components(&self) -> usize {
        match self.kind {
            FieldKind::Scalar => 1,
            FieldKind::Vector => self.grid.dim(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn value(&self, flat: usize) -> f64 {
        debug_assert_eq!(self.kind, FieldKind::Scalar);
        self.values[flat]
    }

    #[inline]
    pub fn vector_at(&self, flat: usize) -> &[f64] {
        let c = self.components();
        &self.values[flat * c..(flat + 1) * c]
    }

    /// `|g(x)|`: absolute value for scalars, Euclidean length for vectors.
    #[inline]
    pub fn magnitude(&self, flat: usize) -> f64 {
        match self.kind {
            FieldKind::Scalar => self.values[flat].abs(),
            FieldKind::Vector => self.vector_at(flat).iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }

    /// Scalar field of `|g|`.
    pub fn abs(&self) -> GridField {
        self.magnitude_pow(1.0)
    }

    /// Scalar field of `|g|^p`.
    pub fn magnitude_pow(&self, p: f64) -> GridField {
        let values = (0..self.grid.len())
            .map(|k| {
                let m = self.magnitude(k);
                if p == 1.0 {
                    m
                } else {
                    m.powf(p)
                }
            })
            .collect();
        GridField {
            grid: self.grid.clone(),
            kind: FieldKind::Scalar,
            values,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<GridField> {
        GridField::with_kind(
            self.grid.clone(),
            self.kind,
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn scaled(&self, s: f64) -> GridField {
        GridField {
            grid: self.grid.clone(),
            kind: self.kind,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &GridField) -> Result<GridField> {
        if self.grid != other.grid || self.kind != other.kind {
            return Err(Error::arg("fields live on different grids"));
        }
        Ok(GridField {
            grid: self.grid.clone(),
            kind: self.kind,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn max_magnitude(&self) -> f64 {
        (0..self.grid.len()).map(|k| self.magnitude(k)).fold(0.0, f64::max)
    }

    /// Mean of the field over the lattice points strictly inside `ball`,
    /// with zero outside the grid box. Vector fields average componentwise.
    pub fn ball_average_vector(&self, ball: &Ball) -> Result<Vec<f64>> {
        let c = self.components();
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        self.grid.for_each_in_ball(ball, |f, _| {
            count += 1;
            if let Some(f) = f {
                for (s, v) in sum.iter_mut().zip(&self.values[f * c..(f + 1) * c]) {
                    *s += v;
                }
            }
        });
        if count == 0 {
            return Err(Error::domain(format!(
                "ball of radius {} at {:?} contains no cell centre",
                ball.radius, ball.center
            )));
        }
        Ok(sum.into_iter().map(|s| s / count as f64).collect())
    }

    /// Scalar ball average; see [`GridField::ball_average_vector`].
    pub fn ball_average(&self, ball: &Ball) -> Result<f64> {
        if self.kind != FieldKind::Scalar {
            return Err(Error::arg("ball_average needs a scalar field"));
        }
        Ok(self.ball_average_vector(ball)?[0])
    }

    /// `(mean over the ball of |g|^p)^{1/p}`.
    pub fn lp_ball_average(&self, ball: &Ball, p: f64) -> Result<f64> {
        if !(p >= 1.0) {
            return Err(Error::arg(format!("exponent p must be >= 1, got {p}")));
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        self.grid.for_each_in_ball(ball, |f, _| {
            count += 1;
            if let Some(f) = f {
                sum += self.magnitude(f).powf(p);
            }
        });
        if count == 0 {
            return Err(Error::domain("ball contains no cell centre"));
        }
        Ok((sum / count as f64).powf(1.0 / p))
    }

    /// Discrete gradient: second-order central differences in the interior,
    /// second-order one-sided differences on the outermost cells.
    pub fn gradient(&self) -> Result<GridField> {
        if self.kind != FieldKind::Scalar {
            return Err(Error::arg("gradient needs a scalar field"));
        }
        let g = &self.grid;
        let n = g.dim();
        if g.cells().iter().any(|&c| c < 3) {
            return Err(Error::Resolution("gradient needs 3 cells per axis".into()));
        }
        let inv2h = 0.5 / g.h();
        let mut out = vec![0.0; g.len() * n];
        for k in 0..g.len() {
            let idx = g.multi_index(k);
            for a in 0..n {
                let s = g.strides()[a];
                let m = g.cells()[a];
                let u = &self.values;
                let d = if idx[a] == 0 {
                    -3.0 * u[k] + 4.0 * u[k + s] - u[k + 2 * s]
                } else if idx[a] == m - 1 {
                    3.0 * u[k] - 4.0 * u[k - s] + u[k - 2 * s]
                } else {
                    u[k + s] - u[k - s]
                };
                out[k * n + a] = d * inv2h;
            }
        }
        GridField::vector(g.clone(), out)
    }

    /// Writes raw little-endian `f64` values to `path` and a JSON sidecar
    /// `{dim, extent, cells, kind}` next to it (same stem, `.json`).
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        let header = FieldHeader {
            spec: self.grid.spec(),
            kind: self.kind,
        };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&header)?)?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let header: FieldHeader = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        let grid = Grid::from_spec(&header.spec)?;
        let bytes = fs::read(path)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Input("binary field length is not a multiple of 8".into()));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        GridField::with_kind(grid, header.kind, values)
    }

    /// CSV with one row per cell: integer indices then the value(s).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        let n = self.grid.dim();
        let mut head: Vec<String> = (0..n).map(|a| format!("i{a}")).collect();
        match self.kind {
            FieldKind::Scalar => head.push("value".into()),
            FieldKind::Vector => head.extend((0..n).map(|a| format!("v{a}"))),
        }
        writeln!(w, "{}", head.join(","))?;
        for k in 0..self.grid.len() {
            let idx = self.grid.multi_index(k);
            let mut row: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
            row.extend(self.vector_at(k).iter().map(|v| format!("{v:e}")));
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct FieldHeader {
    #[serde(flatten)]
    spec: GridSpec,
    kind: FieldKind,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}
