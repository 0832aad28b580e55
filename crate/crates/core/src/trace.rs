//! Per-step learner records and their CSV form.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Critic and Fisher statistics recorded by the actor-critic learners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcStats {
    pub w_norm: f64,
    pub td_error_mean: f64,
    pub fisher_min_eig: f64,
}

/// One learner iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based iteration index.
    pub step: u64,
    pub pi: Vec<f64>,
    /// Exact value where available, otherwise the learner's estimate.
    pub value: f64,
    pub grad_norm: f64,
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ac: Option<AcStats>,
    /// Cumulative suboptimality, for learners that know the optimum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regret: Option<f64>,
}

/// Everything a learner run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<StepRecord>,
    pub seed: u64,
    /// Fingerprint of the configuration that produced the run.
    pub config_hash: String,
    /// Whether `value` holds exact values rather than estimates.
    pub exact_values: bool,
    /// Parameter returned by the learner, when it differs from the last
    /// iterate (the actor-critic learners return a uniformly drawn iterate).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_theta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Set when the run stopped early; records hold everything up to then.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

impl RunTrace {
    pub fn new(seed: u64, config_hash: String, exact_values: bool) -> Self {
        RunTrace {
            records: Vec::new(),
            seed,
            config_hash,
            exact_values,
            output_theta: None,
            warnings: Vec::new(),
            aborted: None,
        }
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    /// Final mixture weights, if any step was recorded.
    pub fn final_pi(&self) -> Option<&[f64]> {
        self.records.last().map(|r| r.pi.as_slice())
    }

    fn has_ac(&self) -> bool {
        self.records.iter().any(|r| r.ac.is_some())
    }

    fn has_regret(&self) -> bool {
        self.records.iter().any(|r| r.regret.is_some())
    }

    /// CSV header for this trace's columns.
    pub fn csv_header(&self) -> String {
        let m = self.records.first().map_or(0, |r| r.pi.len());
        let mut cols = vec!["trial".to_string(), "step".to_string()];
        cols.extend((0..m).map(|i| format!("pi_{i}")));
        cols.push("value".into());
        cols.push("grad_norm".into());
        if self.has_ac() {
            cols.extend(["w_norm", "td_error_mean", "fisher_min_eig"].map(String::from));
        }
        if self.has_regret() {
            cols.push("regret".into());
        }
        cols.join(",")
    }

    /// Renders the trace as CSV with a header line.
    pub fn to_csv(&self, trial: usize) -> String {
        let (ac, regret) = (self.has_ac(), self.has_regret());
        let mut out = self.csv_header();
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{trial},{}", r.step);
            for p in &r.pi {
                let _ = write!(out, ",{}", fmt_f64(*p));
            }
            let _ = write!(out, ",{},{}", fmt_f64(r.value), fmt_f64(r.grad_norm));
            if ac {
                let s = r.ac.unwrap_or(AcStats { w_norm: f64::NAN, td_error_mean: f64::NAN, fisher_min_eig: f64::NAN });
                let _ = write!(out, ",{},{},{}", fmt_f64(s.w_norm), fmt_f64(s.td_error_mean), fmt_f64(s.fisher_min_eig));
            }
            if regret {
                let _ = write!(out, ",{}", fmt_f64(r.regret.unwrap_or(f64::NAN)));
            }
            out.push('\n');
        }
        out
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() && x == x.trunc() && x.abs() < 1e15 {
        // Integral values without the trailing ".0" Debug would print.
        format!("{}", x as i64)
    } else {
        format!("{x:?}")
    }
}

/// Stable 64-bit FNV-1a fingerprint rendered as hex.
pub fn fingerprint(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Whether `step` (1-based) of a run of length `horizon` should be stored
/// when keeping every `every`-th record. The last step is always kept.
pub fn should_record(step: u64, horizon: u64, every: u64) -> bool {
    every <= 1 || step.is_multiple_of(every) || step == horizon || step == 1
}
