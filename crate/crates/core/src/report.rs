//! Structured outcome of an inequality audit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// How many individual violations a report keeps verbatim.
const KEEP_VIOLATIONS: usize = 16;

/// Per-sample margins are `rhs - lhs`; a sample violates a check when its
/// margin is below `-tolerance`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub name: String,
    pub samples: usize,
    pub worst_margin: f64,
    pub violations: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<CheckSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<Violation>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub measured: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub name: String,
    pub tolerance: f64,
    pub samples: usize,
    pub worst_margin: f64,
    pub violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub check: String,
    pub sample: usize,
    pub margin: f64,
    pub detail: String,
}

impl AuditReport {
    pub fn new(name: impl Into<String>, seed: u64) -> Self {
        AuditReport {
            name: name.into(),
            samples: 0,
            worst_margin: f64::INFINITY,
            violations: 0,
            seed,
            checks: Vec::new(),
            failures: Vec::new(),
            measured: BTreeMap::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    /// Records one sample of the named check. `detail` is only evaluated for
    /// violations.
    pub fn record(
        &mut self,
        check: &str,
        tolerance: f64,
        sample: usize,
        margin: f64,
        detail: impl FnOnce() -> String,
    ) {
        let idx = match self.checks.iter().position(|c| c.name == check) {
            Some(i) => i,
            None => {
                self.checks.push(CheckSummary {
                    name: check.to_string(),
                    tolerance,
                    samples: 0,
                    worst_margin: f64::INFINITY,
                    violations: 0,
                });
                self.checks.len() - 1
            }
        };
        let c = &mut self.checks[idx];
        c.samples += 1;
        self.samples += 1;
        let violated = margin.is_nan() || margin < -tolerance;
        let m = if margin.is_nan() { f64::NEG_INFINITY } else { margin };
        c.worst_margin = c.worst_margin.min(m);
        self.worst_margin = self.worst_margin.min(m);
        if violated {
            c.violations += 1;
            self.violations += 1;
            if self.failures.len() < KEEP_VIOLATIONS {
                self.failures.push(Violation {
                    check: check.to_string(),
                    sample,
                    margin: m,
                    detail: detail(),
                });
            }
        }
    }

    pub fn check(&self, name: &str) -> Option<&CheckSummary> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn measure(&mut self, key: impl Into<String>, value: f64) {
        self.measured.insert(key.into(), value);
    }

    pub fn to_json(&self) -> crate::Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
