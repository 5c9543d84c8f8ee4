//! Aggregated result tables: one row per (target, method) with the clean
//! model and backdoored model each measured on clean and patched data, plus
//! an arithmetic-mean Average row.

use serde::{Deserialize, Serialize};

/// Eight-column row of the headline table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantRow {
    pub label: String,
    pub method: String,
    pub clean_model_clean_acc: f64,
    pub clean_model_clean_fp: f64,
    pub clean_model_patched_acc: f64,
    pub clean_model_patched_fp: f64,
    pub bd_model_clean_acc: f64,
    pub bd_model_clean_fp: f64,
    pub bd_model_patched_acc: f64,
    pub bd_model_patched_fp: f64,
}

impl QuadrantRow {
    pub fn values(&self) -> [f64; 8] {
        [
            self.clean_model_clean_acc,
            self.clean_model_clean_fp,
            self.clean_model_patched_acc,
            self.clean_model_patched_fp,
            self.bd_model_clean_acc,
            self.bd_model_clean_fp,
            self.bd_model_patched_acc,
            self.bd_model_patched_fp,
        ]
    }
}

/// Arithmetic mean over rows, column by column.
pub fn average_rows(rows: &[QuadrantRow]) -> Option<QuadrantRow> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let mut acc = [0.0f64; 8];
    for row in rows {
        for (a, v) in acc.iter_mut().zip(row.values()) {
            *a += v;
        }
    }
    for a in acc.iter_mut() {
        *a /= n;
    }
    Some(QuadrantRow {
        label: "Average".into(),
        method: rows[0].method.clone(),
        clean_model_clean_acc: acc[0],
        clean_model_clean_fp: acc[1],
        clean_model_patched_acc: acc[2],
        clean_model_patched_fp: acc[3],
        bd_model_clean_acc: acc[4],
        bd_model_clean_fp: acc[5],
        bd_model_patched_acc: acc[6],
        bd_model_patched_fp: acc[7],
    })
}

/// Full report document: body rows plus the computed average.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema_version: u32,
    pub dataset: String,
    pub rows: Vec<QuadrantRow>,
    pub average: Option<QuadrantRow>,
}

impl ReportDocument {
    pub fn new(dataset: &str, rows: Vec<QuadrantRow>) -> Self {
        let average = average_rows(&rows);
        ReportDocument {
            schema_version: 1,
            dataset: dataset.to_string(),
            rows,
            average,
        }
    }
}

/// Render rows in the headline-table shape: Clean model / Backdoored model
/// by Clean data / Patched data, Acc and FP per cell.
pub fn render_rows(rows: &[QuadrantRow], average: Option<&QuadrantRow>) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<22}{:<10}|{:>23}|{:>23}|\n",
        "", "", "Clean model", "Backdoored model"
    ));
    out.push_str(&format!(
        "{:<22}{:<10}|{:>11}|{:>11}|{:>11}|{:>11}|\n",
        "Target (label)", "Method", "Clean data", "Patched", "Clean data", "Patched"
    ));
    out.push_str(&format!(
        "{:<22}{:<10}|{:>5} {:>5}|{:>5} {:>5}|{:>5} {:>5}|{:>5} {:>5}|\n",
        "", "", "Acc", "FP", "Acc", "FP", "Acc", "FP", "Acc", "FP"
    ));
    let mut line = |row: &QuadrantRow| {
        out.push_str(&format!(
            "{:<22}{:<10}|{:>5.1} {:>5.1}|{:>5.1} {:>5.1}|{:>5.1} {:>5.1}|{:>5.1} {:>5.1}|\n",
            row.label,
            row.method,
            row.clean_model_clean_acc,
            row.clean_model_clean_fp,
            row.clean_model_patched_acc,
            row.clean_model_patched_fp,
            row.bd_model_clean_acc,
            row.bd_model_clean_fp,
            row.bd_model_patched_acc,
            row.bd_model_patched_fp,
        ));
    };
    for row in rows {
        line(row);
    }
    if let Some(avg) = average {
        line(avg);
    }
    out
}
