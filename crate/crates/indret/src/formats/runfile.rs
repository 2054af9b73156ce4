//! Ranked-run text format: one line per result,
//! `query_id target_id rank score` with 1-based ranks and six-decimal
//! scores. Lines are grouped by query in rank order.

use std::fmt::Write as _;
use std::path::Path;

use indret_core::evalkit::{RetrievalRun, RunEntry};

use crate::error::{AppError, Result};

pub fn format_runs(runs: &[RetrievalRun]) -> String {
    let mut out = String::new();
    for run in runs {
        for (i, e) in run.entries().iter().enumerate() {
            writeln!(
                out,
                "{} {} {} {:.6}",
                run.query_id,
                e.target_id,
                i + 1,
                e.score
            )
            .expect("writing to String cannot fail");
        }
    }
    out
}

pub fn save(path: &Path, runs: &[RetrievalRun]) -> Result<()> {
    std::fs::write(path, format_runs(runs))?;
    Ok(())
}

pub fn parse(text: &str) -> Result<Vec<RetrievalRun>> {
    let mut order: Vec<String> = Vec::new();
    let mut per_query: std::collections::BTreeMap<String, Vec<(usize, RunEntry)>> =
        std::collections::BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(AppError::Validation(format!(
                "run line {}: expected 4 fields, found {}",
                ln + 1,
                fields.len()
            )));
        }
        let rank: usize = fields[2]
            .parse()
            .map_err(|_| AppError::Validation(format!("run line {}: bad rank", ln + 1)))?;
        let score: f64 = fields[3]
            .parse()
            .map_err(|_| AppError::Validation(format!("run line {}: bad score", ln + 1)))?;
        if rank == 0 {
            return Err(AppError::Validation(format!(
                "run line {}: ranks are 1-based",
                ln + 1
            )));
        }
        let qid = fields[0].to_string();
        if !per_query.contains_key(&qid) {
            order.push(qid.clone());
        }
        per_query.entry(qid).or_default().push((
            rank,
            RunEntry {
                target_id: fields[1].to_string(),
                score,
            },
        ));
    }
    let mut runs = Vec::with_capacity(order.len());
    for qid in order {
        let mut entries = per_query.remove(&qid).expect("inserted above");
        entries.sort_by_key(|(rank, _)| *rank);
        for (want, (rank, _)) in entries.iter().enumerate() {
            if *rank != want + 1 {
                return Err(AppError::Validation(format!(
                    "query {qid}: ranks are not consecutive from 1"
                )));
            }
        }
        let entries: Vec<RunEntry> = entries.into_iter().map(|(_, e)| e).collect();
        runs.push(
            RetrievalRun::new(&qid, entries)
                .map_err(|e| AppError::Validation(format!("query {qid}: {e}")))?,
        );
    }
    Ok(runs)
}

pub fn load(path: &Path) -> Result<Vec<RetrievalRun>> {
    parse(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<RetrievalRun> {
        vec![
            RetrievalRun::new(
                "q0",
                vec![
                    RunEntry { target_id: "a".into(), score: 0.91234567 },
                    RunEntry { target_id: "b".into(), score: 0.25 },
                ],
            )
            .unwrap(),
            RetrievalRun::new(
                "q1",
                vec![RunEntry { target_id: "c".into(), score: -0.5 }],
            )
            .unwrap(),
        ]
    }

    #[test]
    fn format_is_line_per_entry_with_six_decimals() {
        let text = format_runs(&sample());
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, vec![
            "q0 a 1 0.912346",
            "q0 b 2 0.250000",
            "q1 c 1 -0.500000",
        ]);
    }

    #[test]
    fn round_trip_preserves_ranking() {
        let runs = sample();
        let back = parse(&format_runs(&runs)).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].query_id, "q0");
        assert_eq!(back[0].entries()[0].target_id, "a");
        assert_eq!(back[1].entries()[0].score, -0.5);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(parse("q a 1").is_err());
        assert!(parse("q a 0 0.5").is_err());
        assert!(parse("q a one 0.5").is_err());
        assert!(parse("q a 2 0.5").is_err()); // not starting at rank 1
    }
}
