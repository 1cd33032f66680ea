//! Per-iteration diagnostics CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gradsurgery::StepReport;

pub const DIAGNOSTICS_HEADER: &str =
    "iter,loss,loss_F,loss_R,loss_T,grad_ratio,cos_RT,cos_RF,cos_TF,conflicts,mae,max_f";

/// One row of the diagnostics CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub iter: usize,
    pub loss: f64,
    pub loss_f: f64,
    pub loss_r: f64,
    pub loss_t: f64,
    pub grad_ratio: f64,
    pub cos_rt: f64,
    pub cos_rf: f64,
    pub cos_tf: f64,
    pub conflicts: usize,
    pub mae: f64,
    pub max_f: f64,
}

impl MetricsRecord {
    pub fn from_report(iter: usize, r: &StepReport) -> Self {
        MetricsRecord {
            iter,
            loss: r.losses.total,
            loss_f: r.losses.fusion,
            loss_r: r.losses.r,
            loss_t: r.losses.t,
            grad_ratio: r.grad_ratio,
            cos_rt: r.cos_rt,
            cos_rf: r.cos_rf,
            cos_tf: r.cos_tf,
            conflicts: r.conflicts,
            mae: r.mae,
            max_f: r.max_f,
        }
    }
}

/// Nine significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.8e}")
}

/// Renders the CSV text. Fails on an empty record list.
pub fn render_diagnostics(records: &[MetricsRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::invalid("no diagnostics records to write"));
    }
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(DIAGNOSTICS_HEADER);
    out.push('\n');
    for r in records {
        let floats = [
            r.loss, r.loss_f, r.loss_r, r.loss_t, r.grad_ratio, r.cos_rt, r.cos_rf, r.cos_tf,
        ];
        write!(out, "{}", r.iter).expect("write to String");
        for v in floats {
            write!(out, ",{}", format_float(v)).expect("write to String");
        }
        writeln!(out, ",{},{},{}", r.conflicts, format_float(r.mae), format_float(r.max_f))
            .expect("write to String");
    }
    Ok(out)
}

pub fn write_diagnostics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let text = render_diagnostics(records)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_diagnostics(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(DIAGNOSTICS_HEADER) {
        return Err(Error::format("diagnostics csv", "unexpected header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| {
            let bad = |what: &str| Error::format("diagnostics csv", format!("line {}: bad {what}", n + 2));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 12 {
                return Err(bad("field count"));
            }
            let f = |i: usize| fields[i].parse::<f64>().map_err(|_| bad(fields[i]));
            let u = |i: usize| fields[i].parse::<usize>().map_err(|_| bad(fields[i]));
            Ok(MetricsRecord {
                iter: u(0)?,
                loss: f(1)?,
                loss_f: f(2)?,
                loss_r: f(3)?,
                loss_t: f(4)?,
                grad_ratio: f(5)?,
                cos_rt: f(6)?,
                cos_rf: f(7)?,
                cos_tf: f(8)?,
                conflicts: u(9)?,
                mae: f(10)?,
                max_f: f(11)?,
            })
        })
        .collect()
}

pub fn read_diagnostics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_diagnostics(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(iter: usize) -> MetricsRecord {
        MetricsRecord {
            iter,
            loss: 2.123456789123,
            loss_f: 0.7,
            loss_r: 0.6,
            loss_t: 0.823456789,
            grad_ratio: 1.5e-3,
            cos_rt: -0.25,
            cos_rf: 0.5,
            cos_tf: 0.0,
            conflicts: 2,
            mae: 0.1,
            max_f: 0.9,
        }
    }

    #[test]
    fn one_record_gives_two_lines() {
        let text = render_diagnostics(&[record(0)]).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().starts_with("0,2.12345679e0,"));
    }

    #[test]
    fn empty_records_are_rejected_without_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("diag.csv");
        assert!(write_diagnostics_csv(&[], &path).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("diag.csv");
        assert!(matches!(write_diagnostics_csv(&[record(0)], &path), Err(Error::Io { .. })));
    }

    #[test]
    fn parse_rejects_bad_input() {
        assert!(parse_diagnostics("iter,loss\n").is_err());
        let text = format!("{DIAGNOSTICS_HEADER}\n1,2,3\n");
        assert!(parse_diagnostics(&text).is_err());
    }
}
