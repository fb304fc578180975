use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{BenchResult, EvalSummary};
use crate::error::{Error, Result};

/// Writes `path` as CSV (`class,precision,recall,f1`, one row per class,
/// then `macro_avg` and an `accuracy` row whose percentage sits in the
/// `f1` column) and a plain-text table next to it with a `.txt`
/// extension.
pub fn emit_eval_report(s: &EvalSummary, path: &Path) -> Result<()> {
    if s.total == 0 || s.per_class.is_empty() {
        return Err(Error::InvalidInput("empty evaluation summary".into()));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["class", "precision", "recall", "f1"])?;
    for c in &s.per_class {
        w.write_record([
            c.label.clone(),
            format!("{:.6}", c.precision),
            format!("{:.6}", c.recall),
            format!("{:.6}", c.f1),
        ])?;
    }
    let n = s.per_class.len() as f64;
    let mean = |f: fn(&super::ClassMetrics) -> f64| s.per_class.iter().map(f).sum::<f64>() / n;
    w.write_record([
        "macro_avg".to_string(),
        format!("{:.6}", mean(|c| c.precision)),
        format!("{:.6}", mean(|c| c.recall)),
        format!("{:.6}", s.macro_f1),
    ])?;
    w.write_record(["accuracy", "", "", &format!("{:.4}", s.accuracy)])?;
    w.flush().map_err(|e| Error::io(path, e))?;

    let mut t = String::new();
    let _ = writeln!(t, "accuracy  {:.2}% ({}/{} correct, {} invalid)", s.accuracy, s.correct, s.total, s.invalid);
    let _ = writeln!(t, "F1 (macro-averaged over classes)  {:.4}\n", s.macro_f1);
    let _ = writeln!(t, "{:<16} {:>9} {:>9} {:>9} {:>8}", "class", "precision", "recall", "f1", "support");
    for c in &s.per_class {
        let _ = writeln!(
            t,
            "{:<16} {:>9.4} {:>9.4} {:>9.4} {:>8}",
            c.label, c.precision, c.recall, c.f1, c.support
        );
    }
    let _ = writeln!(t, "\nconfusion (rows expected, columns predicted)");
    let _ = write!(t, "{:<16}", "");
    for l in &s.labels {
        let _ = write!(t, " {l:>10}");
    }
    let _ = writeln!(t, " {:>10}", "invalid");
    for (l, row) in s.labels.iter().zip(&s.confusion) {
        let _ = write!(t, "{l:<16}");
        for v in row {
            let _ = write!(t, " {v:>10}");
        }
        let _ = writeln!(t);
    }
    let txt = path.with_extension("txt");
    fs::write(&txt, t).map_err(|e| Error::io(&txt, e))
}

/// One CSV row per benchmark cell:
/// `instances,background,mean_rate,aggregate_rate,min_rate,max_rate,mean_wall_time`.
pub fn emit_bench_report(results: &[BenchResult], path: &Path) -> Result<()> {
    if results.is_empty() {
        return Err(Error::InvalidInput("no benchmark results".into()));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "instances",
        "background",
        "mean_rate",
        "aggregate_rate",
        "min_rate",
        "max_rate",
        "mean_wall_time",
    ])?;
    let mut t = format!(
        "{:>9}  {:<20} {:>10} {:>10} {:>10}\n",
        "instances", "background", "mean tok/s", "sum tok/s", "wall s"
    );
    for r in results {
        let min = r.eval_rates.iter().copied().fold(f64::INFINITY, f64::min);
        let max = r.eval_rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let wall = r.wall_times.iter().sum::<f64>() / r.wall_times.len().max(1) as f64;
        w.write_record([
            r.instance_count.to_string(),
            r.background.clone(),
            format!("{:.4}", r.mean_rate()),
            format!("{:.4}", r.aggregate_rate),
            format!("{min:.4}"),
            format!("{max:.4}"),
            format!("{wall:.4}"),
        ])?;
        let _ = writeln!(
            t,
            "{:>9}  {:<20} {:>10.2} {:>10.2} {:>10.2}",
            r.instance_count,
            r.background,
            r.mean_rate(),
            r.aggregate_rate,
            wall
        );
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let txt = path.with_extension("txt");
    fs::write(&txt, t).map_err(|e| Error::io(&txt, e))
}
