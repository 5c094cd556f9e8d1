use serde::{Deserialize, Serialize};

use super::{run_logo_cv, EvalConfig, ExperimentReport};
use crate::data::MultiDeviceDataset;
use crate::error::{Error, Result};
use crate::train::{Method, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    /// One entry per fraction; `None` where the method was not run.
    pub cells: Vec<Option<(f64, f64)>>,
    pub reports: Vec<ExperimentReport>,
    /// Smallest fraction whose mean macro-F1 exceeds the reference.
    pub min_fraction_beating_reference: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub fractions: Vec<f64>,
    pub rows: Vec<SweepRow>,
    /// Supervised-single trained on every label, the point of comparison.
    pub reference: ExperimentReport,
}

impl SweepTable {
    /// Mean ± std per method and fraction; the reference cell is starred.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for f in &self.fractions {
            out.push_str(&format!(",f{f}_mean,f{f}_std"));
        }
        out.push_str(",min_fraction_beating_reference\n");
        for row in &self.rows {
            let reference = row.method == self.reference.method;
            out.push_str(&row.method);
            if reference {
                out.push('*');
            }
            for c in &row.cells {
                match c {
                    Some((m, s)) => out.push_str(&format!(",{m},{s}")),
                    None => out.push_str(",,"),
                }
            }
            let min = row.min_fraction_beating_reference.map(|f| f.to_string()).unwrap_or_default();
            out.push_str(&format!(",{min}\n"));
        }
        out
    }
}

/// Evaluates every method at every label fraction. Supervised-single is
/// only trained with all labels and serves as the reference.
pub fn sweep_label_fractions(ds: &MultiDeviceDataset, methods: &[Method], fractions: &[f64], cfg: &EvalConfig) -> Result<SweepTable> {
    if fractions.is_empty() {
        return Err(Error::Config("no label fractions given".into()));
    }
    let with_fraction = |f: f64| EvalConfig { train: TrainConfig { label_fraction: f, ..cfg.train.clone() }, ..cfg.clone() };
    let reference = run_logo_cv(ds, Method::SupervisedSingle, &with_fraction(1.0))?;
    let mut rows = Vec::new();
    for &method in methods {
        let mut cells = Vec::with_capacity(fractions.len());
        let mut reports = Vec::new();
        for &f in fractions {
            let report = if method == Method::SupervisedSingle {
                (f == 1.0).then(|| reference.clone())
            } else {
                Some(run_logo_cv(ds, method, &with_fraction(f))?)
            };
            cells.push(report.as_ref().map(|r| (r.mean_f1, r.std_f1)));
            reports.extend(report);
        }
        let min_fraction_beating_reference = if method == Method::SupervisedSingle {
            None
        } else {
            fractions.iter().zip(&cells).filter(|(_, c)| c.is_some_and(|(m, _)| m > reference.mean_f1)).map(|(&f, _)| f).reduce(f64::min)
        };
        rows.push(SweepRow { method: method.name().into(), cells, reports, min_fraction_beating_reference });
    }
    Ok(SweepTable { fractions: fractions.to_vec(), rows, reference })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::tests::tiny;

    #[test]
    fn table_shape_and_reference() {
        let (ds, cfg) = tiny();
        let t = sweep_label_fractions(&ds, &[Method::RandomFrozen, Method::SupervisedSingle], &[0.5, 1.0], &cfg).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert!(t.rows.iter().all(|r| r.cells.len() == 2));
        assert_eq!(t.rows[1].cells[0], None);
        assert_eq!(t.rows[1].cells[1], Some((t.reference.mean_f1, t.reference.std_f1)));
        assert_eq!(t.reference.label_fraction, 1.0);
        let csv = t.to_csv();
        assert!(csv.contains("supervised_single*"), "{csv}");
        assert_eq!(csv.lines().count(), 3);
    }
}
