//! Result files: `metrics.json`, `metrics.csv`, `curves.csv`.
//!
//! The JSON file is the full record — a list of reports with their complete
//! configurations and curves. The CSV is the flat view for spreadsheets and
//! plotting: one row per run and variable group, with the oracle-gap column
//! on each run's `overall` row and the forgetting column on its `continual`
//! row (the groups those comparisons are defined on). Curves get their own
//! file, one row per epoch.

use crate::{fmt_f64, read_input, to_json_string, write_output, IoError, Result};
use evtsf_core::metrics::GroupScores;
use evtsf_core::train::{EpochRecord, MetricsReport};
use serde::Serialize;
use std::path::Path;

pub const METRICS_JSON_FILE: &str = "metrics.json";
pub const METRICS_CSV_FILE: &str = "metrics.csv";
pub const CURVES_FILE: &str = "curves.csv";

/// Serialized token of a unit enum (`"stev"`, `"flats_nf"`, …), reused so
/// the CSV and JSON vocabularies cannot drift apart.
fn token<T: Serialize>(value: &T) -> String {
    match serde_json::to_value(value) {
        Ok(serde_json::Value::String(s)) => s,
        other => unreachable!("enum serialized to {other:?}, not a string"),
    }
}

fn opt_f64(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// Flat table of a set of runs.
pub fn metrics_csv_string(reports: &[MetricsReport]) -> String {
    let mut out = String::from("strategy,variant,seed,group,mae,rmse,delta,afmae\n");
    for r in reports {
        let groups: [(&str, Option<GroupScores>); 3] = [
            ("continual", r.test.continual),
            ("expanding", r.test.expanding),
            ("overall", r.test.overall),
        ];
        for (group, scores) in groups {
            let Some(s) = scores else { continue };
            let delta = if group == "overall" {
                r.delta_mae
            } else {
                None
            };
            let afmae = if group == "continual" { r.afmae } else { None };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                token(&r.config.strategy),
                token(&r.config.variant),
                r.config.seed,
                group,
                fmt_f64(s.mae),
                fmt_f64(s.rmse),
                opt_f64(delta),
                opt_f64(afmae),
            ));
        }
    }
    out
}

/// One row per epoch; the contrastive column is empty for forecast-only
/// runs.
pub fn curves_csv_string(curves: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,train_cl,val_mae\n");
    for r in curves {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch,
            fmt_f64(r.train_loss),
            opt_f64(r.train_cl),
            fmt_f64(r.val_mae),
        ));
    }
    out
}

/// Writes `metrics.json` and `metrics.csv` into `dir`.
pub fn write_reports(dir: &Path, reports: &[MetricsReport]) -> Result<()> {
    write_output(&dir.join(METRICS_JSON_FILE), &to_json_string(&reports)?)?;
    write_output(&dir.join(METRICS_CSV_FILE), &metrics_csv_string(reports))
}

pub fn write_curves(path: &Path, curves: &[EpochRecord]) -> Result<()> {
    write_output(path, &curves_csv_string(curves))
}

/// Reads a `metrics.json` holding exactly one report — the shape the
/// comparison flags (`--oracle-report`, `--reference-report`) expect.
pub fn read_single_report(path: &Path) -> Result<MetricsReport> {
    let reports: Vec<MetricsReport> = serde_json::from_str(&read_input(path)?)
        .map_err(|e| IoError::Input(format!("malformed report {}: {e}", path.display())))?;
    match <[MetricsReport; 1]>::try_from(reports) {
        Ok([r]) => Ok(r),
        Err(v) => Err(IoError::Input(format!(
            "{} holds {} reports; a comparison file must hold exactly one",
            path.display(),
            v.len()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use evtsf_core::metrics::SplitMetrics;
    use evtsf_core::model::{ModelConfig, Variant};
    use evtsf_core::train::{Strategy, TrainConfig};

    fn stub_report() -> MetricsReport {
        let scores = |mae: f64| GroupScores {
            mae,
            rmse: mae * 1.25,
            cells: 12,
        };
        let mut config = TrainConfig::new(ModelConfig::new(6, 12, 6, 3));
        config.variant = Variant::FlatsNf;
        config.strategy = Strategy::Oversample;
        config.seed = 7;
        MetricsReport {
            config,
            best_epoch: 2,
            best_val_mae: 1.5,
            test: SplitMetrics {
                continual: Some(scores(2.0)),
                expanding: Some(scores(3.0)),
                overall: Some(scores(2.25)),
            },
            delta_mae: Some(0.0144),
            delta_rmse: Some(0.02),
            afmae: Some(-0.22),
            curves: vec![
                EpochRecord {
                    epoch: 1,
                    train_loss: 4.0,
                    train_cl: Some(2.5),
                    val_mae: 1.75,
                },
                EpochRecord {
                    epoch: 2,
                    train_loss: 3.0,
                    train_cl: None,
                    val_mae: 1.5,
                },
            ],
        }
    }

    #[test]
    fn csv_places_comparisons_on_their_defining_groups() {
        let text = metrics_csv_string(&[stub_report()]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "strategy,variant,seed,group,mae,rmse,delta,afmae");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "oversample,flats_nf,7,continual,2,2.5,,-0.22");
        assert_eq!(lines[2], "oversample,flats_nf,7,expanding,3,3.75,,");
        assert_eq!(
            lines[3],
            "oversample,flats_nf,7,overall,2.25,2.8125,0.0144,"
        );
    }

    #[test]
    fn absent_groups_produce_no_rows() {
        let mut report = stub_report();
        report.test.expanding = None;
        report.delta_mae = None;
        report.afmae = None;
        let text = metrics_csv_string(&[report]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].ends_with(",continual,2,2.5,,"));
        assert!(lines[2].ends_with(",overall,2.25,2.8125,,"));
    }

    #[test]
    fn curves_leave_the_contrastive_cell_empty_when_absent() {
        let text = curves_csv_string(&stub_report().curves);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,train_cl,val_mae");
        assert_eq!(lines[1], "1,4,2.5,1.75");
        assert_eq!(lines[2], "2,3,,1.5");
    }

    #[test]
    fn json_roundtrip_and_single_report_contract() {
        let dir = tempfile::tempdir().unwrap();
        let report = stub_report();
        write_reports(dir.path(), std::slice::from_ref(&report)).unwrap();
        let back = read_single_report(&dir.path().join(METRICS_JSON_FILE)).unwrap();
        assert_eq!(back, report);

        write_reports(dir.path(), &[report.clone(), report]).unwrap();
        let err = read_single_report(&dir.path().join(METRICS_JSON_FILE)).unwrap_err();
        assert!(err.to_string().contains("exactly one"));
    }
}
