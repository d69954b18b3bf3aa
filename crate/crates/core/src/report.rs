//! Writing reports: pretty JSON with a trailing newline, or CSV for the
//! loss log. Output is byte-identical for identical input.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::nav::TransitionReport;
use crate::train::LossLog;

/// Reports whose numbers must all be finite before they are written.
pub trait FiniteReport {
    /// Every number in the report with a label naming it.
    fn numbers(&self) -> Vec<(String, f64)>;

    fn check_finite(&self) -> Result<()> {
        match self.numbers().into_iter().find(|(_, x)| !x.is_finite()) {
            Some((name, x)) => Err(Error::NonFinite(format!("metric {name} = {x}"))),
            None => Ok(()),
        }
    }
}

impl FiniteReport for MetricsReport {
    fn numbers(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("recall_at_1".to_string(), self.recall_at_1),
            ("attribute_map".to_string(), self.attribute_map),
            ("category_map".to_string(), self.category_map),
        ];
        out.extend(self.recall.iter().map(|r| (format!("recall@{}", r.k), r.recall)));
        out.extend(
            self.attribute_value_ap
                .iter()
                .map(|v| (format!("ap {}={}", v.attribute, v.value), v.ap)),
        );
        out.extend(self.attribute_map_per_attribute.iter().map(|s| (format!("map {}", s.name), s.score)));
        out.extend(self.category_ap.iter().map(|s| (format!("ap {}", s.name), s.score)));
        for o in &self.ordered {
            out.push((format!("mae {}", o.attribute), o.mae));
            out.push((format!("mrr {}", o.attribute), o.mrr));
            out.push((format!("order residual {}", o.attribute), o.order_residual));
        }
        out
    }
}

impl FiniteReport for TransitionReport {
    fn numbers(&self) -> Vec<(String, f64)> {
        let mut out = vec![("total_cost".to_string(), self.total_cost)];
        out.extend(self.hop_weights.iter().enumerate().map(|(i, w)| (format!("hop {i}"), *w)));
        out
    }
}

impl FiniteReport for LossLog {
    fn numbers(&self) -> Vec<(String, f64)> {
        self.steps.iter().map(|s| (format!("loss at step {}", s.step), s.loss)).collect()
    }
}

/// Pretty JSON followed by a newline; field order is declaration order.
pub fn json_bytes<T: Serialize + FiniteReport>(report: &T) -> Result<Vec<u8>> {
    report.check_finite()?;
    let mut bytes = serde_json::to_vec_pretty(report).expect("reports serialise");
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn emit_json<T: Serialize + FiniteReport>(report: &T, path: &Path) -> Result<()> {
    let bytes = json_bytes(report)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn emit_loss_log(log: &LossLog, path: &Path) -> Result<()> {
    log.check_finite()?;
    fs::write(path, log.to_csv()).map_err(|e| Error::io(path, e))
}
