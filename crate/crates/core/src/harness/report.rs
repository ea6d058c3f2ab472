//! Tables and charts rendered from a metrics file.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use crate::attacks::mean_std;
use crate::error::{DfaError, Result};

use super::metrics::{MetricsRecord, RecordKind};
use super::plot::bar_chart_svg;

pub const NO_DATA: &str = "_no data_";

/// Distinct values in order of first appearance.
fn ordered<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    for s in items {
        if !seen.iter().any(|x| x == s) {
            seen.push(s.to_string());
        }
    }
    seen
}

fn num(v: Option<f64>, digits: usize) -> String {
    match v {
        Some(v) if v.is_finite() => format!("{v:.digits$}"),
        Some(v) => format!("{v}"),
        None => "-".into(),
    }
}

fn md_table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
}

fn csv(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

/// One row per model: clean accuracy, one column per attack, then mean and
/// population standard deviation over that model's attacks.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub model: String,
    pub clean: Option<f64>,
    pub attacks: Vec<Option<f64>>,
    pub mean: f64,
    pub std: f64,
}

pub fn accuracy_table(records: &[MetricsRecord]) -> (Vec<String>, Vec<AccuracyRow>) {
    let attacks: Vec<&MetricsRecord> = records.iter().filter(|r| r.kind == RecordKind::Attack).collect();
    let names = ordered(attacks.iter().map(|r| r.name.as_str()));
    let models = ordered(attacks.iter().map(|r| r.model.as_str()));
    let rows = models
        .into_iter()
        .map(|model| {
            let mine: Vec<&&MetricsRecord> = attacks.iter().filter(|r| r.model == model).collect();
            let clean = mine.iter().rev().find_map(|r| r.get("clean_accuracy"));
            let per: Vec<Option<f64>> = names
                .iter()
                .map(|n| mine.iter().rev().find(|r| &r.name == n).and_then(|r| r.get("accuracy")))
                .collect();
            let present: Vec<f64> = per.iter().flatten().copied().collect();
            let (mean, std) = mean_std(&present);
            AccuracyRow {
                model,
                clean,
                attacks: per,
                mean,
                std,
            }
        })
        .collect();
    (names, rows)
}

/// Rendered report: file name → contents, in a fixed order.
pub fn render(records: &[MetricsRecord]) -> Vec<(String, String)> {
    let mut files = Vec::new();
    let mut md = String::from("# Report\n\n");
    if records.is_empty() {
        let _ = writeln!(md, "{NO_DATA}");
        files.push(("report.md".to_string(), md));
        return files;
    }

    md.push_str("## Robustness (accuracy %)\n\n");
    let (names, rows) = accuracy_table(records);
    if rows.is_empty() {
        let _ = writeln!(md, "{NO_DATA}\n");
    } else {
        let mut header = vec!["model".to_string(), "clean".to_string()];
        header.extend(names.iter().cloned());
        let cells: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                let mut c = vec![r.model.clone(), num(r.clean, 2)];
                c.extend(r.attacks.iter().map(|a| num(*a, 2)));
                c
            })
            .collect();
        let mut md_header = header.clone();
        md_header.push("mean ± std".into());
        let md_rows: Vec<Vec<String>> = cells
            .iter()
            .zip(&rows)
            .map(|(c, r)| {
                let mut c = c.clone();
                c.push(format!("{:.2} ± {:.2}", r.mean, r.std));
                c
            })
            .collect();
        md_table(&mut md, &md_header, &md_rows);
        md.push('\n');
        header.extend(["mean".to_string(), "std".to_string()]);
        let csv_rows: Vec<Vec<String>> = cells
            .into_iter()
            .zip(&rows)
            .map(|(mut c, r)| {
                c.push(num(Some(r.mean), 4));
                c.push(num(Some(r.std), 4));
                c
            })
            .collect();
        files.push(("accuracy.csv".to_string(), csv(&header, &csv_rows)));
    }

    md.push_str("## Training\n\n");
    let epochs: Vec<&MetricsRecord> = records.iter().filter(|r| r.kind == RecordKind::Epoch).collect();
    if epochs.is_empty() {
        let _ = writeln!(md, "{NO_DATA}\n");
    } else {
        let keys = ["lr", "l_a", "l_c", "l_t", "clean_accuracy"];
        let mut header = vec!["model".to_string(), "config_hash".to_string(), "epoch".to_string()];
        header.extend(keys.iter().map(|k| k.to_string()));
        let rows: Vec<Vec<String>> = epochs
            .iter()
            .map(|r| {
                let mut c = vec![r.model.clone(), r.config_hash.clone(), r.name.clone()];
                c.extend(keys.iter().map(|k| num(r.get(k), 6)));
                c
            })
            .collect();
        files.push(("training.csv".to_string(), csv(&header, &rows)));
        let models = ordered(epochs.iter().map(|r| r.model.as_str()));
        let last: Vec<Vec<String>> = models
            .iter()
            .filter_map(|m| epochs.iter().rev().find(|r| &r.model == m))
            .map(|r| {
                let mut c = vec![r.model.clone(), r.config_hash.clone(), r.name.clone()];
                c.extend(keys.iter().map(|k| num(r.get(k), 4)));
                c
            })
            .collect();
        md.push_str("Final epoch per model (all epochs in training.csv).\n\n");
        md_table(&mut md, &header, &last);
        md.push('\n');
    }

    md.push_str("## Out-of-distribution detection\n\n");
    let oods: Vec<&MetricsRecord> = records.iter().filter(|r| r.kind == RecordKind::Ood).collect();
    if oods.is_empty() {
        let _ = writeln!(md, "{NO_DATA}\n");
    } else {
        let header: Vec<String> = ["model", "name", "best_f1", "best_threshold", "n_id", "n_ood"].map(String::from).to_vec();
        let rows: Vec<Vec<String>> = oods
            .iter()
            .map(|r| {
                vec![
                    r.model.clone(),
                    r.name.clone(),
                    num(r.get("best_f1"), 4),
                    num(r.get("best_threshold"), 6),
                    num(r.get("n_id"), 0),
                    num(r.get("n_ood"), 0),
                ]
            })
            .collect();
        md_table(&mut md, &header, &rows);
        md.push('\n');
        files.push(("ood.csv".to_string(), csv(&header, &rows)));
    }

    md.push_str("## Embedding analysis\n\n");
    let compact: Vec<&MetricsRecord> = records
        .iter()
        .filter(|r| r.kind == RecordKind::Analysis && r.name == "compactness")
        .collect();
    let lips: Vec<&MetricsRecord> = records
        .iter()
        .filter(|r| r.kind == RecordKind::Analysis && r.name == "lipschitz")
        .collect();
    if compact.is_empty() && lips.is_empty() {
        let _ = writeln!(md, "{NO_DATA}");
    }
    if !compact.is_empty() {
        let n_classes = compact.iter().map(|r| r.series.get("per_class_std").map_or(0, Vec::len)).max().unwrap_or(0);
        let mut categories: Vec<String> = (0..n_classes).map(|k| k.to_string()).collect();
        categories.push("Total".into());
        let mut header = vec!["model".to_string()];
        header.extend(categories.iter().cloned());
        header.push("class mean".into());
        let mut series = Vec::new();
        let rows: Vec<Vec<String>> = compact
            .iter()
            .map(|r| {
                let per = r.series.get("per_class_std").cloned().unwrap_or_default();
                let mut values: Vec<f64> = (0..n_classes).map(|k| per.get(k).copied().unwrap_or(f64::NAN)).collect();
                values.push(r.get("total_std").unwrap_or(f64::NAN));
                let mut c = vec![r.model.clone()];
                c.extend(values.iter().map(|&v| num(Some(v), 5)));
                c.push(num(r.get("mean_class_std"), 5));
                series.push((r.model.clone(), values));
                c
            })
            .collect();
        md.push_str("Compactness (mean per-dimension std of embeddings).\n\n");
        md_table(&mut md, &header, &rows);
        md.push('\n');
        files.push(("compactness.csv".to_string(), csv(&header, &rows)));
        files.push(("compactness.svg".to_string(), bar_chart_svg("Embedding compactness", &categories, &series)));
    }
    if !lips.is_empty() {
        let header: Vec<String> = ["model", "pairs", "mean residual", "max residual"].map(String::from).to_vec();
        let rows: Vec<Vec<String>> = lips
            .iter()
            .map(|r| vec![r.model.clone(), num(r.get("pairs"), 0), num(r.get("mean"), 6), num(r.get("max"), 6)])
            .collect();
        md.push_str("Lipschitz residual.\n\n");
        md_table(&mut md, &header, &rows);
        md.push('\n');
    }

    files.insert(0, ("report.md".to_string(), md));
    files
}

/// Writes the rendered files into `dir`, returning their paths.
pub fn write_report(records: &[MetricsRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| DfaError::io(dir, e))?;
    render(records)
        .into_iter()
        .map(|(name, text)| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| DfaError::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
