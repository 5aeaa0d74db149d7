//! Mean and standard deviation over seeds, and per-panel CSV emission.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context as _, Result};
use serde::Serialize;

use crate::experiment::CellRecord;

/// Mean and population standard deviation (divide by `n`).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub dataset: String,
    pub x: f64,
    pub series: String,
    pub runs: usize,
    pub failed: usize,
    /// Percent.
    pub intent_accuracy_mean: f64,
    pub intent_accuracy_std: f64,
    pub slot_f1_mean: f64,
    pub slot_f1_std: f64,
}

type GroupKey = (String, String, u64, String);

/// One row per (experiment, dataset, x, series), successful seeds only.
pub fn summarize(records: &[CellRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<GroupKey, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for r in records {
        let key = (r.experiment.clone(), r.dataset.clone(), r.x.to_bits(), r.series.clone());
        let g = groups.entry(key).or_default();
        match (&r.report, r.is_ok()) {
            (Some(rep), true) => {
                g.0.push(100.0 * rep.intent_accuracy);
                g.1.push(rep.slot_f1);
            }
            _ => g.2 += 1,
        }
    }
    let mut rows: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((experiment, dataset, x, series), (acc, f1, failed))| {
            let (am, asd) = mean_std(&acc);
            let (fm, fsd) = mean_std(&f1);
            SummaryRow {
                experiment,
                dataset,
                x: f64::from_bits(x),
                series,
                runs: acc.len(),
                failed,
                intent_accuracy_mean: am,
                intent_accuracy_std: asd,
                slot_f1_mean: fm,
                slot_f1_std: fsd,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        (&a.experiment, &a.dataset, &a.series)
            .cmp(&(&b.experiment, &b.dataset, &b.series))
            .then(a.x.total_cmp(&b.x))
    });
    rows
}

/// Active-learning cells of one (dataset, budget, seed) whose initial sets
/// disagree. Empty when every method shared its initial set.
pub fn initial_set_mismatches(records: &[CellRecord]) -> Vec<String> {
    let mut seen: BTreeMap<(String, u64, u64), (String, String)> = BTreeMap::new();
    let mut bad = Vec::new();
    for r in records.iter().filter(|r| r.experiment == "al") {
        let Some(h) = &r.initial_hash else { continue };
        let key = (r.dataset.clone(), r.x.to_bits(), r.seed);
        match seen.get(&key) {
            Some((first, owner)) if first != h => bad.push(format!("{} disagrees with {}", r.key, owner)),
            Some(_) => {}
            None => {
                seen.insert(key, (h.clone(), r.key.clone()));
            }
        }
    }
    bad
}

#[derive(Serialize)]
struct PanelRow<'a> {
    x: f64,
    series: &'a str,
    mean: f64,
    std: f64,
    runs: usize,
}

/// `summary.csv` plus one long-format CSV per (experiment, dataset, metric) panel.
pub fn write_outputs(rows: &[SummaryRow], dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    let summary = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    written.push(summary);

    let mut panels: BTreeMap<(String, String), Vec<&SummaryRow>> = BTreeMap::new();
    for r in rows {
        panels.entry((r.experiment.clone(), r.dataset.clone())).or_default().push(r);
    }
    for ((exp, ds), rows) in panels {
        for metric in ["intent", "slot"] {
            let path = dir.join(format!("panel_{exp}_{ds}_{metric}.csv"));
            let mut w = csv::Writer::from_path(&path)?;
            for r in &rows {
                let (mean, std) = if metric == "intent" {
                    (r.intent_accuracy_mean, r.intent_accuracy_std)
                } else {
                    (r.slot_f1_mean, r.slot_f1_std)
                };
                w.serialize(PanelRow {
                    x: r.x,
                    series: &r.series,
                    mean,
                    std,
                    runs: r.runs,
                })?;
            }
            w.flush()?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_scores_have_zero_std() {
        assert_eq!(mean_std(&[1.0; 8]), (1.0, 0.0));
    }

    #[test]
    fn population_convention() {
        assert_eq!(mean_std(&[0.0, 2.0]), (1.0, 1.0));
    }
}
