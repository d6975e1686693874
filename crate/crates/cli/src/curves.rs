//! Tidy validation curves from a run's `metrics.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use mhc_ssm::config::RunConfig;
use mhc_ssm::{Error, Result};

pub const CURVES_HEADER: &str = "variant,step,val_loss,ppl";

/// Step key used for the end-of-training row.
pub const FINAL_STEP: i64 = -1;

/// Convert metrics rows to curve rows. Training rows are dropped; the
/// final evaluation is keyed by [`FINAL_STEP`].
pub fn curve_rows(variant: &str, metrics: &str) -> Result<Vec<String>> {
    let mut lines = metrics.lines();
    match lines.next() {
        Some(h) if h.trim() == mhc_ssm::trainer::METRICS_HEADER => {}
        _ => return Err(Error::Data("metrics.csv has no header row".into())),
    }
    let mut out = Vec::new();
    for (no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::Data(format!(
                "metrics.csv line {}: expected 5 fields, got {}",
                no + 2,
                f.len()
            )));
        }
        let step = match f[1] {
            "val" => f[0].to_string(),
            "final" => FINAL_STEP.to_string(),
            _ => continue,
        };
        out.push(format!("{variant},{step},{},{}", f[2], f[3]));
    }
    Ok(out)
}

/// Write `curves.csv` next to `metrics.csv`, taking the variant name from
/// the run's `config.txt`.
pub fn emit_training_curves(run_dir: &Path) -> Result<PathBuf> {
    let metrics_path = run_dir.join("metrics.csv");
    let metrics = fs::read_to_string(&metrics_path)
        .map_err(|e| Error::Data(format!("missing metrics {}: {e}", metrics_path.display())))?;
    let variant = RunConfig::load(run_dir.join("config.txt"))?.model.variant;
    let rows = curve_rows(variant.name(), &metrics)?;
    let path = run_dir.join("curves.csv");
    let mut text = String::from(CURVES_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    fs::write(&path, text).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn val_and_final_rows_only() {
        let metrics = "step,split,loss,ppl,elapsed_s\n\
                       10,train,9.1,8955.29,1.0\n\
                       500,val,8.8672,7095.36,2.0\n\
                       3000,val,6.4632,641.11,9.0\n\
                       3000,final,6.2889,538.54,9.5\n";
        let rows = curve_rows("mhc_static", metrics).unwrap();
        assert_eq!(
            rows,
            [
                "mhc_static,500,8.8672,7095.36",
                "mhc_static,3000,6.4632,641.11",
                "mhc_static,-1,6.2889,538.54",
            ]
        );
    }

    #[test]
    fn header_is_required() {
        assert!(matches!(
            curve_rows("baseline", "10,val,1,2,3\n"),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn missing_metrics_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_training_curves(dir.path()),
            Err(Error::Data(_))
        ));
    }
}
