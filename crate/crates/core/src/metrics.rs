//! Metrics CSV emission, parsing, and the aggregated report.
//!
//! Column contract: `run_id, seed, method, alpha, r, epoch, train_loss,
//! test_top1, test_nll, test_l2, pruning_ratio`. Each run contributes one row
//! per epoch (1-based) plus a summary row carrying `epoch = 0`; fields that do
//! not apply to a method hold NaN so every numeric column parses as a real.
//! Joint-training runs emit two row streams, one per evaluation head
//! (`joint-sc` for the student classifier, `joint-tc` for the reused teacher
//! classifier).

use std::collections::BTreeMap;
use std::path::Path;

use crate::distill::TrainReport;
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 11] = [
    "run_id",
    "seed",
    "method",
    "alpha",
    "r",
    "epoch",
    "train_loss",
    "test_top1",
    "test_nll",
    "test_l2",
    "pruning_ratio",
];

/// Epoch index of the per-run summary row.
pub const SUMMARY_EPOCH: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub method: String,
    pub alpha: f64,
    pub r: f64,
    pub epoch: usize,
    pub train_loss: f64,
    pub test_top1: f64,
    pub test_nll: f64,
    pub test_l2: f64,
    pub pruning_ratio: f64,
}

fn opt(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

/// Flatten a training report into its CSV rows.
pub fn report_rows(report: &TrainReport, run_id: &str) -> Vec<MetricsRow> {
    let is_joint = report.method == "joint";
    let alpha = opt(report.alpha);
    let r = report.r.map(|r| r as f64).unwrap_or(f64::NAN);
    let mut rows = Vec::new();

    let mut push_stream = |id: String, method: String, second_head: bool| {
        for e in &report.epochs {
            let (top1, nll) = if second_head {
                (opt(e.second_top1), opt(e.second_nll))
            } else {
                (e.test_top1, e.test_nll)
            };
            rows.push(MetricsRow {
                run_id: id.clone(),
                seed: report.seed,
                method: method.clone(),
                alpha,
                r,
                epoch: e.epoch,
                train_loss: e.train_loss,
                test_top1: top1,
                test_nll: nll,
                test_l2: opt(e.test_l2),
                pruning_ratio: f64::NAN,
            });
        }
        let (top1, nll) = if second_head {
            (opt(report.final_second_top1), f64::NAN)
        } else {
            (report.final_top1, report.final_nll)
        };
        rows.push(MetricsRow {
            run_id: id,
            seed: report.seed,
            method,
            alpha,
            r,
            epoch: SUMMARY_EPOCH,
            train_loss: opt(report.final_train_loss),
            test_top1: top1,
            test_nll: nll,
            test_l2: opt(report.final_l2),
            pruning_ratio: opt(report.pruning_ratio),
        });
    };

    if is_joint {
        push_stream(format!("{run_id}:sc"), "joint-sc".to_string(), false);
        if report.epochs.iter().any(|e| e.second_top1.is_some())
            || report.final_second_top1.is_some()
        {
            push_stream(format!("{run_id}:tc"), "joint-tc".to_string(), true);
        }
    } else {
        push_stream(run_id.to_string(), report.method.clone(), false);
    }
    rows
}

/// Append rows, writing the header when the file is new or empty.
pub fn append_rows(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    if !exists {
        w.write_record(CSV_HEADER)?;
    }
    for row in rows {
        w.write_record(&[
            row.run_id.clone(),
            row.seed.to_string(),
            row.method.clone(),
            row.alpha.to_string(),
            row.r.to_string(),
            row.epoch.to_string(),
            row.train_loss.to_string(),
            row.test_top1.to_string(),
            row.test_nll.to_string(),
            row.test_l2.to_string(),
            row.pruning_ratio.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Input(format!("csv: {e}"))
    }
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let rec = record?;
        if rec.len() != CSV_HEADER.len() {
            return Err(Error::input(format!(
                "{}: expected {} columns, got {}",
                path.display(),
                CSV_HEADER.len(),
                rec.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|_| {
                Error::input(format!(
                    "{}: column {} is not numeric: {}",
                    path.display(),
                    CSV_HEADER[i],
                    &rec[i]
                ))
            })
        };
        rows.push(MetricsRow {
            run_id: rec[0].to_string(),
            seed: rec[1]
                .parse()
                .map_err(|_| Error::input(format!("bad seed: {}", &rec[1])))?,
            method: rec[2].to_string(),
            alpha: num(3)?,
            r: num(4)?,
            epoch: rec[5]
                .parse()
                .map_err(|_| Error::input(format!("bad epoch: {}", &rec[5])))?,
            train_loss: num(6)?,
            test_top1: num(7)?,
            test_nll: num(8)?,
            test_l2: num(9)?,
            pruning_ratio: num(10)?,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// aggregation
// ---------------------------------------------------------------------------

/// Two-pass mean and sample standard deviation (n-1 denominator; 0 for a
/// single run).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n > 0, "mean_std over empty slice");
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// `75.56 ± 0.27` formatting.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2} ± {std:.2}")
}

#[derive(Debug, Clone)]
pub struct GroupSummary {
    pub method: String,
    pub alpha: f64,
    pub r: f64,
    pub runs: usize,
    pub top1_mean: f64,
    pub top1_std: f64,
    pub nll_mean: f64,
    pub l2_mean: f64,
    pub pruning_mean: f64,
}

fn group_key(row: &MetricsRow) -> (String, String, String) {
    (
        row.method.clone(),
        format!("{}", row.alpha),
        format!("{}", row.r),
    )
}

/// Aggregate summary rows by (method, alpha, r) across seeds.
pub fn summarize(rows: &[MetricsRow]) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<(String, String, String), Vec<&MetricsRow>> = BTreeMap::new();
    for row in rows.iter().filter(|r| r.epoch == SUMMARY_EPOCH) {
        groups.entry(group_key(row)).or_default().push(row);
    }
    let nanmean = |vals: Vec<f64>| -> f64 {
        let clean: Vec<f64> = vals.into_iter().filter(|v| v.is_finite()).collect();
        if clean.is_empty() {
            f64::NAN
        } else {
            clean.iter().sum::<f64>() / clean.len() as f64
        }
    };
    groups
        .into_values()
        .map(|rows| {
            let top1: Vec<f64> = rows.iter().map(|r| r.test_top1).collect();
            let (m, s) = mean_std(&top1);
            GroupSummary {
                method: rows[0].method.clone(),
                alpha: rows[0].alpha,
                r: rows[0].r,
                runs: rows.len(),
                top1_mean: m,
                top1_std: s,
                nll_mean: nanmean(rows.iter().map(|r| r.test_nll).collect()),
                l2_mean: nanmean(rows.iter().map(|r| r.test_l2).collect()),
                pruning_mean: nanmean(rows.iter().map(|r| r.pruning_ratio).collect()),
            }
        })
        .collect()
}

fn fmt_opt(v: f64, f: impl Fn(f64) -> String) -> String {
    if v.is_finite() {
        f(v)
    } else {
        "-".to_string()
    }
}

/// Render the aggregate report: the per-method summary, and the three
/// observational tables (joint two-head alpha sweep, sequential vs. reused
/// classifier, tail-reuse trade-off) whenever the relevant runs are present.
pub fn render_report(rows: &[MetricsRow]) -> String {
    let summaries = summarize(rows);
    let mut out = String::new();
    out.push_str("== summary: top-1 over seeds (mean ± std) ==\n");
    out.push_str(&format!(
        "{:<12} {:>6} {:>4} {:>5}  {:<16} {:>8} {:>10} {:>9}\n",
        "method", "alpha", "r", "runs", "top1", "nll", "l2", "pruning"
    ));
    for s in &summaries {
        out.push_str(&format!(
            "{:<12} {:>6} {:>4} {:>5}  {:<16} {:>8} {:>10} {:>9}\n",
            s.method,
            fmt_opt(s.alpha, |v| format!("{v}")),
            fmt_opt(s.r, |v| format!("{v}")),
            s.runs,
            format_mean_std(s.top1_mean, s.top1_std),
            fmt_opt(s.nll_mean, |v| format!("{v:.4}")),
            fmt_opt(s.l2_mean, |v| format!("{v:.4}")),
            fmt_opt(s.pruning_mean, |v| format!("{:.2}%", v * 100.0)),
        ));
    }

    // Joint-training alpha sweep with both heads side by side.
    let joint: Vec<&GroupSummary> = summaries
        .iter()
        .filter(|s| s.method.starts_with("joint"))
        .collect();
    if !joint.is_empty() {
        let mut alphas: Vec<f64> = joint.iter().map(|s| s.alpha).collect();
        alphas.sort_by(|a, b| a.partial_cmp(b).expect("alphas are finite"));
        alphas.dedup();
        out.push_str("\n== joint training: alpha sweep, both heads ==\n");
        out.push_str(&format!(
            "{:<8} {:<18} {:<18}\n",
            "alpha", "student classifier", "teacher classifier"
        ));
        for a in alphas {
            let find = |m: &str| {
                joint
                    .iter()
                    .find(|s| s.method == m && s.alpha == a)
                    .map(|s| format_mean_std(s.top1_mean, s.top1_std))
                    .unwrap_or_else(|| "--".to_string())
            };
            out.push_str(&format!(
                "{:<8} {:<18} {:<18}\n",
                a,
                find("joint-sc"),
                find("joint-tc")
            ));
        }
    }

    // Sequential training against classifier reuse.
    let sequential = summaries.iter().find(|s| s.method == "sequential");
    let simkd = summaries.iter().find(|s| s.method == "simkd");
    if let Some(seq) = sequential {
        out.push_str("\n== sequential (fresh classifier) vs reused classifier ==\n");
        out.push_str(&format!(
            "{:<12} {}\n",
            "sequential",
            format_mean_std(seq.top1_mean, seq.top1_std)
        ));
        if let Some(sk) = simkd {
            out.push_str(&format!(
                "{:<12} {}\n",
                "simkd",
                format_mean_std(sk.top1_mean, sk.top1_std)
            ));
        }
    }

    // Tail-reuse accuracy/pruning trade-off.
    let plus: Vec<&GroupSummary> = summaries
        .iter()
        .filter(|s| s.method == "simkd" || s.method.starts_with("simkd+"))
        .collect();
    if plus.iter().any(|s| s.method.starts_with("simkd+")) {
        out.push_str("\n== tail reuse: accuracy vs pruning ratio ==\n");
        out.push_str(&format!(
            "{:<10} {:<16} {:>8} {:>9}\n",
            "method", "top1", "nll", "pruning"
        ));
        for s in plus {
            out.push_str(&format!(
                "{:<10} {:<16} {:>8} {:>9}\n",
                s.method,
                format_mean_std(s.top1_mean, s.top1_std),
                fmt_opt(s.nll_mean, |v| format!("{v:.4}")),
                fmt_opt(s.pruning_mean, |v| format!("{:.2}%", v * 100.0)),
            ));
        }
    }
    out
}
