use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cells_of, excess_of_gradient, ladder_spacings, EstimateAudit, EstimateSample, Instance, Verdict};
use super::DEGENERATE_EXCESS;
use crate::grid::Ball;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayConfig {
    pub q: f64,
    pub r: f64,
    pub sigmas: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    #[serde(default = "third")]
    pub threshold: f64,
    /// Share of centres that must reach the threshold.
    #[serde(default = "share")]
    pub fraction: f64,
    /// Largest ratio that counts for the pass rule.
    #[serde(default = "sigma_max")]
    pub sigma_max: f64,
    #[serde(default)]
    pub seed: u64,
}

fn third() -> f64 {
    1.0 / 3.0
}

fn share() -> f64 {
    0.95
}

fn sigma_max() -> f64 {
    0.2
}

impl DecayConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q >= 1.0) || !(self.r > 0.0) || self.points.is_empty() {
            return Err(Error::arg("need q >= 1, r > 0 and sample points"));
        }
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(*s > 0.0 && *s < 1.0)) {
            return Err(Error::arg("sigmas must lie in (0, 1)"));
        }
        Ok(())
    }
}

fn label(sigma: f64) -> String {
    format!("sigma={sigma}")
}

/// Share of samples of `variant` with `lhs <= threshold * rhs`.
fn share_below(samples: &[EstimateSample], cells: usize, variant: &str, problem: Option<usize>, t: f64) -> Option<f64> {
    let group: Vec<&EstimateSample> = samples
        .iter()
        .filter(|s| s.cells == cells && s.variant == variant && problem.is_none_or(|p| s.problem == p))
        .collect();
    (!group.is_empty()).then(|| group.iter().filter(|s| s.lhs <= t * s.rhs).count() as f64 / group.len() as f64)
}

/// Ratios `E_q(B_{sigma r}) / E_q(B_r)` over a grid of `sigma`. Excess is
/// invariant under subtracting affine functions, so no renormalization is
/// applied. Centres with `E_q(B_r) < 1e-12` are skipped.
///
/// Passes when on both finest grids some `sigma <= sigma_max` reaches the
/// threshold at the required share of centres and the largest such `sigma`
/// agrees. `trend` holds the largest achieving `sigma` per grid.
pub fn excess_decay_audit(levels: &[Vec<Instance>], cfg: &DecayConfig) -> Result<EstimateAudit> {
    let hs = ladder_spacings(levels)?;
    cfg.validate()?;
    let mut sigmas = cfg.sigmas.clone();
    sigmas.sort_by(f64::total_cmp);
    let mut audit = EstimateAudit::new("excess-decay", cfg.seed)
        .param("q", cfg.q)
        .param("r", cfg.r)
        .param("threshold", cfg.threshold)
        .param("fraction", cfg.fraction)
        .param("sigma_max", cfg.sigma_max);
    let mut skipped = 0usize;
    let mut achieved = Vec::new();
    for level in levels {
        let cells = cells_of(level);
        let h = level[0].grid().h();
        let usable: Vec<f64> = sigmas.iter().copied().filter(|s| s * cfg.r >= 2.0 * h * (1.0 - 1e-12)).collect();
        if usable.len() < sigmas.len() {
            audit.notes.push(format!("{cells}: {} ratios below 2h skipped", sigmas.len() - usable.len()));
        }
        for (k, inst) in level.iter().enumerate() {
            let rows = cfg
                .points
                .par_iter()
                .map(|x| {
                    let (_, x0) = inst.snap(x)?;
                    let top = excess_of_gradient(&inst.du, &Ball::new(x0.clone(), cfg.r)?, cfg.q)?;
                    if top < DEGENERATE_EXCESS {
                        return Ok(None);
                    }
                    usable
                        .iter()
                        .map(|&s| {
                            Ok(EstimateSample {
                                cells,
                                variant: label(s),
                                problem: k,
                                x: x0.clone(),
                                r: s * cfg.r,
                                lhs: excess_of_gradient(&inst.du, &Ball::new(x0.clone(), s * cfg.r)?, cfg.q)?,
                                rhs: top,
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                        .map(Some)
                })
                .collect::<Result<Vec<_>>>()?;
            for row in rows {
                match row {
                    Some(r) => audit.samples.extend(r),
                    None => skipped += 1,
                }
            }
            let best = usable
                .iter()
                .rev()
                .find(|&&s| {
                    share_below(&audit.samples, cells, &label(s), Some(k), cfg.threshold)
                        .is_some_and(|v| v >= cfg.fraction)
                })
                .copied();
            audit.measured.insert(format!("sigma@{cells}/{k}"), best.unwrap_or(f64::NAN));
        }
        for &s in &usable {
            if let Some(v) = share_below(&audit.samples, cells, &label(s), None, cfg.threshold) {
                audit.measured.insert(format!("share@{cells}/{}", label(s)), v);
            }
        }
        let best = usable
            .iter()
            .rev()
            .find(|&&s| {
                share_below(&audit.samples, cells, &label(s), None, cfg.threshold).is_some_and(|v| v >= cfg.fraction)
            })
            .copied();
        let small = usable.iter().any(|&s| {
            s <= cfg.sigma_max
                && share_below(&audit.samples, cells, &label(s), None, cfg.threshold).is_some_and(|v| v >= cfg.fraction)
        });
        achieved.push((best, small));
    }
    audit.measured.insert("skipped_degenerate".into(), skipped as f64);
    audit.fit_groups(&hs);
    audit.trend = achieved.iter().map(|(b, _)| b.unwrap_or(f64::NAN)).collect();
    let finest = &achieved[achieved.len() - 1];
    audit.fitted_c = finest.0.unwrap_or(f64::NAN);
    let ok = achieved.len() >= 2 && {
        let prev = &achieved[achieved.len() - 2];
        prev.1 && finest.1 && prev.0 == finest.0
    };
    if achieved.len() < 2 {
        audit.notes.push("fewer than two grids".into());
    }
    audit.verdict = if ok { Verdict::Pass } else { Verdict::Fail };
    Ok(audit)
}
