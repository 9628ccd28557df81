//! Run reports: machine-readable JSON plus a human-readable table.

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub l_align: f64,
    pub l_router: f64,
    pub l_gen: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    /// Correspondence accuracy on held-out utterances of seen languages.
    pub seen_accuracy: f64,
    /// Correspondence accuracy on the zero-shot languages under the same
    /// matchings (no refitting).
    pub unseen_accuracy: f64,
    /// Learned phoneme code -> learned viseme code.
    pub code_match: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingSummary {
    /// Timesteps routed (top-1) to each expert during evaluation.
    pub expert_usage: Vec<u64>,
    /// Normalized mutual information between ground-truth phoneme id and the
    /// top-1 selected expert.
    pub nmi_phoneme_expert: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub seen_lse_d: f64,
    pub seen_tmdc: f64,
    pub unseen_lse_d: f64,
    pub unseen_tmdc: f64,
}

/// Wall-clock measurements; excluded from determinism comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_secs: f64,
    pub tokens_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub alignment: AlignmentSummary,
    pub routing: RoutingSummary,
    pub metrics: MetricSummary,
    pub timing: Timing,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Canonical JSON with the timing block removed, for bit-exact
    /// reproducibility comparisons.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("timing");
        }
        Ok(serde_json::to_string(&value)?)
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("run report (seed {})\n", self.seed));
        out.push_str("epoch     l_align   l_router      l_gen      total\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{:5} {:>10.4} {:>10.4} {:>10.4} {:>10.4}\n",
                e.epoch, e.l_align, e.l_router, e.l_gen, e.total
            ));
        }
        out.push_str(&format!(
            "alignment accuracy: seen {:.4}  zero-shot {:.4}\n",
            self.alignment.seen_accuracy, self.alignment.unseen_accuracy
        ));
        out.push_str(&format!(
            "routing: nmi(phoneme, expert) {:.4}  usage {:?}\n",
            self.routing.nmi_phoneme_expert, self.routing.expert_usage
        ));
        out.push_str(&format!(
            "metrics: seen LSE-D {:.4} TMDC {:.4} | zero-shot LSE-D {:.4} TMDC {:.4}\n",
            self.metrics.seen_lse_d,
            self.metrics.seen_tmdc,
            self.metrics.unseen_lse_d,
            self.metrics.unseen_tmdc
        ));
        out.push_str(&format!(
            "wall clock {:.2}s ({:.0} tokens/sec)\n",
            self.timing.wall_clock_secs, self.timing.tokens_per_sec
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunReport {
        RunReport {
            seed: 3,
            epochs: vec![EpochRecord {
                epoch: 0,
                l_align: -0.5,
                l_router: 1.25,
                l_gen: 0.125,
                total: 0.875,
            }],
            alignment: AlignmentSummary {
                seen_accuracy: 0.97,
                unseen_accuracy: 0.94,
                code_match: vec![2, 0, 1],
            },
            routing: RoutingSummary {
                expert_usage: vec![10, 20, 30, 40],
                nmi_phoneme_expert: 0.66,
            },
            metrics: MetricSummary {
                seen_lse_d: 0.02,
                seen_tmdc: 0.91,
                unseen_lse_d: 0.03,
                unseen_tmdc: 0.89,
            },
            timing: Timing {
                wall_clock_secs: 12.5,
                tokens_per_sec: 4000.0,
            },
        }
    }

    #[test]
    fn report_round_trips_losslessly() {
        let r = sample();
        let json = r.to_json().unwrap();
        let back = RunReport::from_json(&json).unwrap();
        assert_eq!(r, back);
    }

    #[test]
    fn deterministic_json_strips_timing_only() {
        let a = sample();
        let mut b = sample();
        b.timing.wall_clock_secs = 99.0;
        assert_eq!(a.deterministic_json().unwrap(), b.deterministic_json().unwrap());
        let mut c = sample();
        c.alignment.seen_accuracy = 0.5;
        assert_ne!(a.deterministic_json().unwrap(), c.deterministic_json().unwrap());
    }

    #[test]
    fn table_mentions_the_key_numbers() {
        let text = sample().render_table();
        assert!(text.contains("0.9700"));
        assert!(text.contains("nmi(phoneme, expert)"));
    }
}
