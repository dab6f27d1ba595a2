//! CSV emission for training histories and reports (RFC-4180 style, header
//! row, `\n` line endings). Numeric formatting is deterministic: the shortest
//! round-trip representation, an `inf` sentinel for infinities, and an empty
//! field for not-applicable values (NaN).

use std::path::Path;

use crate::train::HistoryRow;
use crate::Result;

pub const HISTORY_HEADER: &str = "epoch,lr,ce_loss,l2_loss,psnr,ssim,accuracy";

/// One numeric CSV field: NaN means "not applicable" and becomes empty.
pub fn csv_field(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

pub fn history_to_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch,
            csv_field(r.lr),
            csv_field(r.ce_loss),
            csv_field(r.l2_loss),
            csv_field(r.psnr),
            csv_field(r.ssim),
            csv_field(r.accuracy),
        ));
    }
    out
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    std::fs::write(path, history_to_csv(rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fields_format_deterministically() {
        assert_eq!(csv_field(0.0001), "0.0001");
        assert_eq!(csv_field(f64::NAN), "");
        assert_eq!(csv_field(f64::INFINITY), "inf");
        assert_eq!(csv_field(f64::NEG_INFINITY), "-inf");
        assert_eq!(csv_field(38.5), "38.5");
    }

    #[test]
    fn history_layout() {
        let rows = vec![
            HistoryRow {
                epoch: 0,
                lr: 1e-4,
                ce_loss: f64::NAN,
                l2_loss: 12.25,
                psnr: f64::INFINITY,
                ssim: 1.0,
                accuracy: f64::NAN,
            },
            HistoryRow {
                epoch: 1,
                lr: 1e-4,
                ce_loss: 1.6094,
                l2_loss: 10.0,
                psnr: 30.25,
                ssim: 0.75,
                accuracy: 0.2,
            },
        ];
        let csv = history_to_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], HISTORY_HEADER);
        assert_eq!(lines[1], "0,0.0001,,12.25,inf,1,");
        assert_eq!(lines[2], "1,0.0001,1.6094,10,30.25,0.75,0.2");
        assert!(csv.ends_with('\n'));
    }
}
