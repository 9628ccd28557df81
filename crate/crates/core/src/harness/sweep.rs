//! Hyperparameter sweep over the (S, M, K) axes.

use std::io::Write as IoWrite;

use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::harness::trainer::{train, ModelNets};
use crate::synthcorpus::Corpus;

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub s: usize,
    pub m: usize,
    pub k: usize,
    pub skipped: bool,
    pub l_align: f64,
    pub l_router: f64,
    pub l_gen: f64,
    pub total: f64,
    pub seen_accuracy: f64,
    pub tokens_per_sec: f64,
    pub param_count: usize,
}

/// Train one configuration per (s, m, k) combination. Combinations with
/// S > M are emitted as skipped rows rather than failing the sweep.
pub fn run_sweep(
    base: &ExperimentConfig,
    corpus: &Corpus,
    s_axis: &[usize],
    m_axis: &[usize],
    k_axis: &[usize],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &k in k_axis {
        for &m in m_axis {
            for &s in s_axis {
                let mut cfg = base.clone();
                cfg.s = s;
                cfg.m = m;
                cfg.k = k;
                if s > m || cfg.validate().is_err() {
                    log::warn!("sweep: skipping invalid combination s={s} m={m} k={k}");
                    rows.push(SweepRow {
                        s,
                        m,
                        k,
                        skipped: true,
                        l_align: 0.0,
                        l_router: 0.0,
                        l_gen: 0.0,
                        total: 0.0,
                        seen_accuracy: 0.0,
                        tokens_per_sec: 0.0,
                        param_count: 0,
                    });
                    continue;
                }
                let outcome = train(&cfg, corpus, None)?;
                let last = outcome.report.epochs.last();
                rows.push(SweepRow {
                    s,
                    m,
                    k,
                    skipped: false,
                    l_align: last.map_or(0.0, |e| e.l_align),
                    l_router: last.map_or(0.0, |e| e.l_router),
                    l_gen: last.map_or(0.0, |e| e.l_gen),
                    total: last.map_or(0.0, |e| e.total),
                    seen_accuracy: outcome.report.alignment.seen_accuracy,
                    tokens_per_sec: outcome.report.timing.tokens_per_sec,
                    param_count: ModelNets::parameter_count(&outcome.model.nets),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: IoWrite>(out: &mut W, rows: &[SweepRow]) -> Result<()> {
    writeln!(
        out,
        "s,m,k,status,l_align,l_router,l_gen,total,seen_accuracy,tokens_per_sec,param_count"
    )?;
    for r in rows {
        if r.skipped {
            writeln!(out, "{},{},{},skipped,,,,,,,", r.s, r.m, r.k)?;
        } else {
            writeln!(
                out,
                "{},{},{},ok,{},{},{},{},{},{:.1},{}",
                r.s,
                r.m,
                r.k,
                r.l_align,
                r.l_router,
                r.l_gen,
                r.total,
                r.seen_accuracy,
                r.tokens_per_sec,
                r.param_count
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_marks_skipped_rows() {
        let rows = vec![
            SweepRow {
                s: 3,
                m: 2,
                k: 8,
                skipped: true,
                l_align: 0.0,
                l_router: 0.0,
                l_gen: 0.0,
                total: 0.0,
                seen_accuracy: 0.0,
                tokens_per_sec: 0.0,
                param_count: 0,
            },
            SweepRow {
                s: 1,
                m: 2,
                k: 8,
                skipped: false,
                l_align: -0.1,
                l_router: 0.9,
                l_gen: 0.2,
                total: 1.0,
                seen_accuracy: 0.95,
                tokens_per_sec: 1234.5,
                param_count: 4321,
            },
        ];
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("3,2,8,skipped"));
        assert!(text.contains("1,2,8,ok"));
    }
}
