use serde::{Deserialize, Serialize};

use super::{cells_of, ladder_spacings, EstimateAudit, EstimateSample, Instance, Verdict};
use crate::spaces::{lorentz_of, morrey_functional, Rearrangement, RefinementTrend};
use crate::{Error, Result};

/// Audits `f in L(q, gamma) => Du in L(nq/(n-q), gamma)` on a family
/// `f = |x|^{-a}`, problem `k` of every level carrying exponent `a_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingConfig {
    pub p: f64,
    pub q: f64,
    pub gamma: f64,
    pub exponents: Vec<f64>,
    /// Morrey exponent; enables the Morrey variant report.
    #[serde(default)]
    pub s: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl MappingConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let nf = n as f64;
        if !(self.p >= 1.0 && self.p < self.q && self.q < nf) || !(self.gamma > 0.0) {
            return Err(Error::arg(format!(
                "need 1 <= p < q < n and gamma > 0, got p = {}, q = {}",
                self.p, self.q
            )));
        }
        if let Some(s) = self.s {
            if !(self.q < s && s <= nf) {
                return Err(Error::arg(format!("need q < s <= n, got s = {s}")));
            }
        }
        let t = nf / self.q;
        if self.exponents.is_empty() || self.exponents.iter().any(|a| (a - t).abs() < 0.05 || !(*a >= 0.0)) {
            return Err(Error::arg(format!("exponents must be >= 0 and away from n/q = {t}")));
        }
        Ok(())
    }

    pub fn target_exponent(&self, n: usize) -> f64 {
        let nf = n as f64;
        nf * self.q / (nf - self.q)
    }

    /// Predicted log-log growth of the functionals against `1/h`.
    pub fn predicted_slope(&self, n: usize, a: f64) -> f64 {
        self.gamma * (a - n as f64 / self.q).max(0.0)
    }
}

/// Classifies each refinement trend as finite or divergent against half the
/// smallest predicted divergent slope, and checks input and output agree with
/// the prediction. The fitted constant is the output/input functional ratio
/// over the finite members.
pub fn mapping_property_audit(levels: &[Vec<Instance>], cfg: &MappingConfig) -> Result<EstimateAudit> {
    let hs = ladder_spacings(levels)?;
    let n = levels[0][0].grid().dim();
    cfg.validate(n)?;
    if levels.iter().any(|l| l.len() != cfg.exponents.len()) {
        return Err(Error::arg("every level needs one problem per exponent"));
    }
    if levels.len() < 3 {
        return Err(Error::arg("mapping audit needs three grids"));
    }
    let target = cfg.target_exponent(n);
    let mut audit = EstimateAudit::new("mapping-property", cfg.seed)
        .param("p", cfg.p)
        .param("q", cfg.q)
        .param("gamma", cfg.gamma)
        .param("target_q", target);
    let gap = cfg
        .exponents
        .iter()
        .map(|a| (a - n as f64 / cfg.q).abs())
        .fold(f64::INFINITY, f64::min);
    let cut = 0.5 * cfg.gamma * gap;
    audit.parameters.insert("slope_cut".into(), cut);
    let cells: Vec<usize> = levels.iter().map(|l| cells_of(l)).collect();
    let h: Vec<f64> = levels.iter().map(|l| l[0].grid().h()).collect();
    let mut ok = true;
    for (k, &a) in cfg.exponents.iter().enumerate() {
        let input: Vec<f64> = levels
            .iter()
            .map(|l| lorentz_of(&Rearrangement::of(&l[k].f), cfg.q, cfg.gamma))
            .collect();
        let output: Vec<f64> = levels
            .iter()
            .map(|l| lorentz_of(&Rearrangement::of(&l[k].du), target, cfg.gamma))
            .collect();
        let ti = RefinementTrend::new(cells.clone(), &h, input.clone());
        let to = RefinementTrend::new(cells.clone(), &h, output.clone());
        let predicted = cfg.predicted_slope(n, a);
        let class = |s: f64| if s > cut { "divergent" } else { "finite" };
        let expect = class(predicted);
        let (ci, co) = (class(ti.power_slope), class(to.power_slope));
        ok &= ci == expect && co == expect;
        audit.labels.insert(format!("a={a}"), format!("predicted {expect}, input {ci}, output {co}"));
        audit.measured.insert(format!("input_slope/a={a}"), ti.power_slope);
        audit.measured.insert(format!("output_slope/a={a}"), to.power_slope);
        audit.measured.insert(format!("predicted_slope/a={a}"), predicted);
        if expect == "finite" {
            for j in 0..levels.len() {
                audit.samples.push(EstimateSample {
                    cells: cells[j],
                    variant: "finite".into(),
                    problem: k,
                    x: vec![a],
                    r: 0.0,
                    lhs: output[j],
                    rhs: input[j],
                });
            }
        }
        if let (Some(s), Some(l)) = (cfg.s, levels.last()) {
            let adams = s * cfg.q / (s - cfg.q);
            let fin = morrey_functional(&l[k].f, cfg.q, s)?.value;
            let fout = morrey_functional(&l[k].du, adams, s)?.value;
            audit.measured.insert(format!("morrey_input/a={a}"), fin);
            audit.measured.insert(format!("morrey_output/a={a}"), fout);
        }
    }
    if let Some(s) = cfg.s {
        let q = cfg.q;
        let adams = s * q / (s - q);
        audit.parameters.insert("s".into(), s);
        audit.labels.insert("mol-verbatim".into(), "L^{θq/(s−q),θ}".into());
        audit
            .labels
            .insert("mol-adams".into(), format!("L^{{{adams},{s}}} = L^{{sq/(s−q),s}}"));
        audit.measured.insert("adams_exponent".into(), adams);
        audit.measured.insert("verbatim_at_theta_s".into(), s * q / (s - q));
        audit
            .notes
            .push("θ is not defined where the target space is stated; θ := s gives the Adams exponents".into());
    }
    audit.finish(&hs, "finite", &[]);
    if !ok {
        audit.verdict = Verdict::Fail;
        audit.notes.push("a refinement trend disagrees with the predicted integrability".into());
    }
    Ok(audit)
}
