use serde::{Deserialize, Serialize};

use super::excess_of_gradient;
use crate::grid::{Ball, GridField};
use crate::report::AuditReport;
use crate::{Error, Result};

pub const TELESCOPING_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub radius: f64,
    pub excess: f64,
    /// `r_i (mean_{B_i} |f|^p)^{1/p}`.
    pub data: f64,
    pub mean_gradient: Vec<f64>,
}

/// Concentric balls `B_i = B_{sigma^i r}(x0)`, `i = 0..=depth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DyadicChain {
    pub center: Vec<f64>,
    pub radius: f64,
    pub sigma: f64,
    pub p: f64,
    pub q: f64,
    pub balls: Vec<ChainRecord>,
}

#[allow(clippy::too_many_arguments)]
pub fn build_chain(
    du: &GridField,
    f: &GridField,
    x0: &[f64],
    r: f64,
    sigma: f64,
    p: f64,
    q: f64,
    depth: usize,
) -> Result<DyadicChain> {
    if !(0.05..=0.5).contains(&sigma) {
        return Err(Error::arg(format!("sigma must lie in [0.05, 0.5], got {sigma}")));
    }
    if !(p >= 1.0) {
        return Err(Error::arg(format!("p must be >= 1, got {p}")));
    }
    let h = du.grid().h();
    let smallest = r * sigma.powi(depth as i32);
    if smallest < 2.0 * h * (1.0 - 1e-12) {
        return Err(Error::Resolution(format!(
            "chain of depth {depth} reaches radius {smallest:e} below 2h = {:e}",
            2.0 * h
        )));
    }
    let balls = (0..=depth)
        .map(|i| {
            let radius = r * sigma.powi(i as i32);
            let ball = Ball::new(x0.to_vec(), radius)?;
            Ok(ChainRecord {
                radius,
                excess: excess_of_gradient(du, &ball, q)?,
                data: radius * f.lp_ball_average(&ball, p)?,
                mean_gradient: du.ball_average_vector(&ball)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DyadicChain {
        center: x0.to_vec(),
        radius: r,
        sigma,
        p,
        q,
        balls,
    })
}

/// Deepest chain whose smallest radius stays `>= 2h`.
pub(crate) fn max_depth(r: f64, sigma: f64, h: f64) -> usize {
    let mut d = 0;
    while r * sigma.powi(d as i32 + 1) >= 2.0 * h * (1.0 - 1e-12) {
        d += 1;
    }
    d
}

impl DyadicChain {
    /// `sum |(Du)_{B_{i+1}} - (Du)_{B_i}|`.
    pub fn mean_increments(&self) -> f64 {
        self.balls
            .windows(2)
            .map(|w| {
                w[0].mean_gradient
                    .iter()
                    .zip(&w[1].mean_gradient)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum()
    }

    /// Geometric mean of successive excess ratios over balls with
    /// non-degenerate excess.
    pub fn excess_ratio(&self) -> Option<f64> {
        let logs: Vec<f64> = self
            .balls
            .windows(2)
            .filter(|w| w[0].excess > super::DEGENERATE_EXCESS && w[1].excess > super::DEGENERATE_EXCESS)
            .map(|w| (w[1].excess / w[0].excess).ln())
            .collect();
        (!logs.is_empty()).then(|| (logs.iter().sum::<f64>() / logs.len() as f64).exp())
    }

    /// `kappa = max E_{i+1} / (E_i + r_i F_i)`.
    pub fn measured_contraction(&self) -> f64 {
        self.balls
            .windows(2)
            .map(|w| {
                let d = w[0].excess + w[0].data;
                if d > 0.0 {
                    w[1].excess / d
                } else if w[1].excess > super::DEGENERATE_EXCESS {
                    f64::INFINITY
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    }

    /// Records the telescoping inequalities of this chain into `report`:
    /// the Holder step with its explicit factor `sigma^{-n/q}`, and the summed
    /// decay with the measured contraction `kappa` when `kappa < 1`.
    /// Returns `kappa`.
    pub fn audit_into(&self, report: &mut AuditReport, sample: usize) -> f64 {
        let n = self.center.len() as f64;
        let factor = self.sigma.powf(-n / self.q);
        let j = self.balls.len() - 1;
        let lhs = self.mean_increments();
        let rhs = factor * self.balls[..j].iter().map(|b| b.excess).sum::<f64>();
        report.record("telescoping", TELESCOPING_TOL, sample, rhs - lhs, || {
            format!("sum |increments| = {lhs:e} > {rhs:e} at {:?}", self.center)
        });
        let kappa = self.measured_contraction();
        if kappa < 1.0 && j >= 1 {
            let a = kappa / (1.0 - kappa);
            let lhs: f64 = self.balls[1..].iter().map(|b| b.excess).sum();
            let rhs = a * self.balls[0].excess + a * self.balls[..j].iter().map(|b| b.data).sum::<f64>();
            report.record("summed-decay", TELESCOPING_TOL, sample, rhs - lhs, || {
                format!("kappa = {kappa}, sum E = {lhs:e} > {rhs:e}")
            });
        }
        kappa
    }
}
