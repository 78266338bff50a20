//! Dataset persistence: `manifest.json` + `values.csv`.
//!
//! The manifest carries everything about a panel except the readings:
//! calendar geometry, variable membership, sensor coordinates, split
//! boundaries, and the per-variable normalization statistics its training
//! ranges imply. The values file has one row per time slot and one column
//! per variable; a cell is empty exactly where the variable is not yet
//! observed, so the observation mask survives the roundtrip and values a
//! consumer may not read are never persisted at all.

use crate::{fmt_f64, read_input, to_json_string, write_output, IoError, Result};
use evtsf_core::data::{EvtsDataset, Normalizer, SplitSpec};
use evtsf_core::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VALUES_FILE: &str = "values.csv";

/// Sidecar metadata for one panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub steps_per_day: usize,
    /// Slots at which expansion stages come online, ascending.
    pub expansion_steps: Vec<usize>,
    /// All variable ids, ascending — the column order of `values.csv`.
    pub variable_ids: Vec<usize>,
    /// Variables observed from slot 0.
    pub initial_ids: Vec<usize>,
    /// Per variable: first slot at which it is observed.
    pub activation_step: Vec<usize>,
    /// Sensor coordinates in km, parallel to `variable_ids`.
    pub coords: Vec<(f64, f64)>,
    pub splits: SplitSpec,
    /// Per-variable z-score statistics implied by the training ranges,
    /// recorded so downstream tooling can scale without re-deriving them.
    pub normalization: Normalizer,
}

/// Writes `manifest.json` and `values.csv` into `dir`.
pub fn save_dataset(ds: &EvtsDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    let manifest = Manifest {
        steps_per_day: ds.steps_per_day,
        expansion_steps: ds.expansion_steps.clone(),
        variable_ids: ds.v2_ids.clone(),
        initial_ids: ds.v1_ids.clone(),
        activation_step: ds.activation_step.clone(),
        coords: ds.coords.clone(),
        splits: ds.splits,
        normalization: Normalizer::fit(ds)?,
    };
    write_output(&dir.join(MANIFEST_FILE), &to_json_string(&manifest)?)?;

    let mut csv = String::new();
    let header: Vec<String> = ds.v2_ids.iter().map(|v| format!("v{v}")).collect();
    csv.push_str(&header.join(","));
    csv.push('\n');
    for t in 0..ds.t_total() {
        let mut cells = Vec::with_capacity(ds.n_vars());
        for c in 0..ds.n_vars() {
            if ds.is_observed(t, ds.v2_ids[c]) {
                cells.push(fmt_f64(ds.values.at2(t, c)));
            } else {
                cells.push(String::new());
            }
        }
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    write_output(&dir.join(VALUES_FILE), &csv)
}

/// Loads a panel saved by [`save_dataset`], re-validating its invariants.
/// Unobserved cells load as masked zeros; the manifest's normalization
/// statistics must agree with the loaded values.
pub fn load_dataset(dir: &Path) -> Result<EvtsDataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_str(&read_input(&manifest_path)?)
        .map_err(|e| IoError::Input(format!("malformed {}: {e}", manifest_path.display())))?;

    let values_path = dir.join(VALUES_FILE);
    let text = read_input(&values_path)?;
    let bad = |line: usize, what: String| {
        IoError::Input(format!("{} line {line}: {what}", values_path.display()))
    };
    let n = manifest.variable_ids.len();
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| bad(1, "missing header".into()))?;
    let expected: Vec<String> = manifest
        .variable_ids
        .iter()
        .map(|v| format!("v{v}"))
        .collect();
    if header.split(',').ne(expected.iter().map(String::as_str)) {
        return Err(bad(
            1,
            "columns do not match the manifest's variables".into(),
        ));
    }

    let mut flat = Vec::new();
    let mut observed = Vec::new();
    let mut t_total = 0usize;
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n {
            return Err(bad(i + 2, format!("{} cells, expected {n}", cells.len())));
        }
        for cell in cells {
            if cell.is_empty() {
                flat.push(0.0);
                observed.push(false);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|e| bad(i + 2, format!("bad number {cell:?}: {e}")))?;
                flat.push(v);
                observed.push(true);
            }
        }
        t_total += 1;
    }

    let values = Tensor::from_vec(&[t_total, n], flat)?;
    let ds = EvtsDataset {
        values,
        observed,
        steps_per_day: manifest.steps_per_day,
        coords: manifest.coords,
        v1_ids: manifest.initial_ids,
        v2_ids: manifest.variable_ids,
        expansion_steps: manifest.expansion_steps,
        activation_step: manifest.activation_step,
        splits: manifest.splits,
    };
    ds.validate()
        .map_err(|e| IoError::Input(format!("{} is inconsistent: {e}", manifest_path.display())))?;

    // The statistics are a pure function of the observed values; a mismatch
    // means one of the two files was edited or truncated.
    let refit = Normalizer::fit(&ds)?;
    let close = |a: &[f64], b: &[f64]| {
        a.len() == b.len()
            && a.iter()
                .zip(b)
                .all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + x.abs().max(y.abs())))
    };
    if !close(&refit.mean, &manifest.normalization.mean)
        || !close(&refit.std, &manifest.normalization.std)
    {
        return Err(IoError::Input(format!(
            "normalization statistics in {} do not match the values file",
            manifest_path.display()
        )));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use evtsf_core::data::{generate_synthetic, GenConfig};
    use evtsf_core::rng::StreamRng;

    fn small_panel() -> EvtsDataset {
        let cfg = GenConfig {
            n_continual: 4,
            n_expanding: vec![2],
            steps_per_day: 12,
            days_p1: 10,
            days_p2: vec![2],
            days_valid: 1,
            days_test: 2,
            ..GenConfig::default()
        };
        generate_synthetic(&cfg, &StreamRng::from_seed(21)).unwrap()
    }

    #[test]
    fn roundtrip_preserves_every_observed_cell() {
        let ds = small_panel();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();

        assert_eq!(back.observed, ds.observed);
        assert_eq!(back.steps_per_day, ds.steps_per_day);
        assert_eq!(back.v1_ids, ds.v1_ids);
        assert_eq!(back.v2_ids, ds.v2_ids);
        assert_eq!(back.expansion_steps, ds.expansion_steps);
        assert_eq!(back.activation_step, ds.activation_step);
        assert_eq!(back.coords, ds.coords);
        assert_eq!(back.splits, ds.splits);
        for t in 0..ds.t_total() {
            for c in 0..ds.n_vars() {
                if ds.is_observed(t, ds.v2_ids[c]) {
                    // Bitwise: the shortest-roundtrip float format is exact.
                    assert_eq!(back.values.at2(t, c), ds.values.at2(t, c));
                } else {
                    assert_eq!(back.values.at2(t, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn saving_twice_yields_identical_bytes() {
        let ds = small_panel();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_dataset(&ds, a.path()).unwrap();
        save_dataset(&ds, b.path()).unwrap();
        for name in [MANIFEST_FILE, VALUES_FILE] {
            let x = std::fs::read(a.path().join(name)).unwrap();
            let y = std::fs::read(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name} differs between identical saves");
        }
    }

    #[test]
    fn tampered_values_are_rejected() {
        let ds = small_panel();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();

        // Nudge one observed cell: the manifest's statistics no longer match.
        let path = dir.path().join(VALUES_FILE);
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let row = 1; // first data line
        let first_cell_end = lines[row].find(',').unwrap();
        lines[row] = format!("999.0{}", &lines[row][first_cell_end..]);
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();

        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, IoError::Input(_)));
        assert!(err.to_string().contains("normalization"));
    }

    #[test]
    fn structural_damage_is_an_input_error() {
        let ds = small_panel();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();

        // Truncate the values file mid-panel.
        let path = dir.path().join(VALUES_FILE);
        let text = std::fs::read_to_string(&path).unwrap();
        let keep: Vec<&str> = text.lines().take(20).collect();
        std::fs::write(&path, keep.join("\n") + "\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(IoError::Input(_))));

        // And a missing directory altogether.
        assert!(matches!(
            load_dataset(&dir.path().join("nowhere")),
            Err(IoError::Input(_))
        ));
    }
}
