//! Metrics log and report tables.

use super::MetricsRow;
use std::fmt::Write as _;
use std::io::{self, Write};

pub const METRICS_HEADER: &str = "step,lr,train_loss,val_text_ppl,val_image_ppl";

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn metrics_line(row: &MetricsRow) -> String {
    let (t, i) = row.val.map_or((None, None), |v| (v.text_ppl, v.image_ppl));
    format!("{},{},{},{},{}", row.step, row.lr, opt(row.train_loss), opt(t), opt(i))
}

/// Appends rows to a metrics log; the header is written only when `with_header`.
pub fn write_metrics<W: Write>(mut w: W, rows: &[MetricsRow], with_header: bool) -> io::Result<()> {
    if with_header {
        writeln!(w, "{METRICS_HEADER}")?;
    }
    for r in rows {
        writeln!(w, "{}", metrics_line(r))?;
    }
    Ok(())
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = Vec::new();
    write_metrics(&mut out, rows, true).expect("in-memory write");
    String::from_utf8(out).expect("ASCII")
}

/// A titled table rendered as CSV or aligned text.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(title: &str, columns: &[&str]) -> Self {
        Self {
            title: title.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|c| {
                self.rows
                    .iter()
                    .map(|r| r[c].len())
                    .chain([self.columns[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            padded.join("  ").trim_end().to_string()
        };
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.title);
        let _ = writeln!(s, "{}", line(&self.columns));
        let _ = writeln!(s, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        for r in &self.rows {
            let _ = writeln!(s, "{}", line(r));
        }
        s
    }
}

/// Fixed-precision cell for report tables.
pub fn cell(x: f64) -> String {
    format!("{x:.4}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::ValMetrics;

    #[test]
    fn metrics_rows_leave_missing_values_blank() {
        let rows = [
            MetricsRow {
                step: 0,
                lr: 0.0,
                train_loss: None,
                val: Some(ValMetrics { text_ppl: Some(31.5), image_ppl: None }),
            },
            MetricsRow { step: 1, lr: 0.5, train_loss: Some(4.25), val: None },
        ];
        assert_eq!(metrics_csv(&rows), format!("{METRICS_HEADER}\n0,0,,31.5,\n1,0.5,4.25,,\n"));
    }

    #[test]
    fn tables_render_both_ways() {
        let mut t = Table::new("T", &["variant", "ppl"]);
        t.push(vec!["uniform".into(), cell(12.0)]);
        assert_eq!(t.to_csv(), "variant,ppl\nuniform,12.0000\n");
        assert_eq!(t.to_text(), "T\nvariant      ppl\n-------  -------\nuniform  12.0000\n");
    }
}
