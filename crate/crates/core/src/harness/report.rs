//! Report persistence: `report.json`, `per_rep.csv` and `curves.csv`.

use std::fmt::Write as _;
use std::path::Path;

use super::McReport;
use crate::error::{Error, Result};

/// Header of the plot-ready curve file; fixed by the output schema.
pub const CURVES_HEADER: &str = "v,empirical_Tmse,limit_eq70,limit_sstar";

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn emit_report(report: &McReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Serialization {
        path: json_path.clone(),
        message: e.to_string(),
    })?;
    write_text(&json_path, &json)?;

    let mut keys: Vec<&String> = report.per_rep.iter().flat_map(|r| r.values.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut csv = String::from("index,error");
    for k in &keys {
        csv.push(',');
        csv.push_str(k);
    }
    csv.push('\n');
    for r in &report.per_rep {
        // Commas and quotes would break the row; errors are free text.
        let err = r.error.as_deref().unwrap_or("").replace([',', '"', '\n'], " ");
        let _ = write!(csv, "{},{}", r.index, err);
        for k in &keys {
            match r.values.get(*k) {
                Some(v) => {
                    let _ = write!(csv, ",{v:.16e}");
                }
                None => csv.push(','),
            }
        }
        csv.push('\n');
    }
    write_text(&dir.join("per_rep.csv"), &csv)?;

    let mut curves = format!("{CURVES_HEADER}\n");
    for c in &report.curves {
        let _ = writeln!(
            curves,
            "{:.16e},{:.16e},{:.16e},{:.16e}",
            c.v, c.empirical_tmse, c.limit_double_cross, c.limit_sstar
        );
    }
    write_text(&dir.join("curves.csv"), &curves)
}

pub fn load_report(path: &Path) -> Result<McReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serialization {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
