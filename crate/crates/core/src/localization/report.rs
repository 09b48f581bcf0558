use std::fmt::Write as _;

use super::{EvalReport, GtMatching, ReportRow, SizeBucket};

#[derive(Debug, Clone, Default)]
pub struct TableOptions {
    /// Print the argmax τ of each δ block.
    pub show_tau: bool,
    pub title: Option<String>,
}

fn fmt_acc(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn csv_string(header: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

impl EvalReport {
    fn deltas(&self) -> Vec<f64> {
        self.config.delta_set.clone()
    }

    /// One line per `(method, δ)`: overall and per-size accuracy at the argmax τ.
    pub fn summary_csv(&self, config_hash: &str) -> String {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut v = vec![
                    config_hash.to_string(),
                    r.method.to_string(),
                    format!("{:.2}", r.delta),
                    format!("{:.6}", r.box_acc()),
                ];
                v.extend(SizeBucket::ALL.iter().map(|&b| r.size_acc(b).map_or("n/a".into(), |a| format!("{a:.6}"))));
                v.push(format!("{:.2}", r.argmax_tau));
                v.push(r.n().to_string());
                v.extend(SizeBucket::ALL.iter().map(|&b| r.size_tally(b).n.to_string()));
                v
            })
            .collect();
        csv_string(
            &[
                "config_hash", "method", "delta", "box_acc", "box_acc_s", "box_acc_m", "box_acc_l", "argmax_tau", "n", "n_s",
                "n_m", "n_l",
            ],
            rows,
        )
    }

    /// Per-class accuracy at each row's argmax τ.
    pub fn per_class_csv(&self, config_hash: &str) -> String {
        let mut rows = Vec::new();
        for r in &self.rows {
            for (class, t) in r.class_tallies() {
                rows.push(vec![
                    config_hash.to_string(),
                    r.method.to_string(),
                    format!("{:.2}", r.delta),
                    class.clone(),
                    t.accuracy().map_or("n/a".into(), |a| format!("{a:.6}")),
                    t.hits.to_string(),
                    t.n.to_string(),
                    format!("{:.2}", r.argmax_tau),
                ]);
            }
        }
        csv_string(&["config_hash", "method", "delta", "class", "box_acc", "hits", "n", "argmax_tau"], rows)
    }

    /// Overall accuracy at every τ of the grid.
    pub fn curve_csv(&self, config_hash: &str) -> String {
        let mut rows = Vec::new();
        for r in &self.rows {
            for p in &r.curve {
                rows.push(vec![
                    config_hash.to_string(),
                    r.method.to_string(),
                    format!("{:.2}", r.delta),
                    format!("{:.2}", p.tau),
                    format!("{:.6}", p.overall.accuracy().unwrap_or(0.0)),
                    p.overall.hits.to_string(),
                    p.overall.n.to_string(),
                ]);
            }
        }
        csv_string(&["config_hash", "method", "delta", "tau", "box_acc", "hits", "n"], rows)
    }

    /// Methods as rows; for each δ the columns BoxAcc, BoxAcc_S, BoxAcc_M,
    /// BoxAcc_L (and τ when requested).
    pub fn table(&self, opts: &TableOptions) -> String {
        let deltas = self.deltas();
        let mut methods: Vec<_> = self.rows.iter().map(|r| r.method).collect();
        methods.dedup();
        let cols = if opts.show_tau { 5 } else { 4 };
        let cell = 9;
        let name_w = 14;
        let block_w = cols * cell + (cols - 1);
        let mut out = String::new();
        if let Some(t) = &opts.title {
            let _ = writeln!(out, "{t}");
        }
        let _ = write!(out, "{:name_w$}", "");
        for d in &deltas {
            let _ = write!(out, " | {:^block_w$}", format!("IoU >= {d:.2}"));
        }
        out.push('\n');
        let _ = write!(out, "{:name_w$}", "Method");
        for _ in &deltas {
            let mut heads = vec!["BoxAcc", "BoxAcc_S", "BoxAcc_M", "BoxAcc_L"];
            if opts.show_tau {
                heads.push("tau");
            }
            let _ = write!(out, " | {}", heads.iter().map(|h| format!("{h:>cell$}")).collect::<Vec<_>>().join(" "));
        }
        out.push('\n');
        let _ = writeln!(out, "{}", "-".repeat(name_w + deltas.len() * (block_w + 3)));
        for m in methods {
            let _ = write!(out, "{:name_w$}", m.display_name());
            for &d in &deltas {
                let Some(r) = self.row(m, d) else {
                    let _ = write!(out, " | {:block_w$}", "");
                    continue;
                };
                let mut cells = vec![fmt_acc(Some(r.box_acc()))];
                cells.extend(SizeBucket::ALL.iter().map(|&b| fmt_acc(r.size_acc(b))));
                if opts.show_tau {
                    cells.push(format!("{:.2}", r.argmax_tau));
                }
                let _ = write!(out, " | {}", cells.iter().map(|c| format!("{c:>cell$}")).collect::<Vec<_>>().join(" "));
            }
            out.push('\n');
        }
        out.push_str(&self.footer());
        out
    }

    fn footer(&self) -> String {
        let c = &self.config;
        let n = self.rows.first().map(ReportRow::n).unwrap_or(0);
        let grid = match (c.tau_grid.first(), c.tau_grid.last()) {
            (Some(a), Some(b)) => format!("{a:.2}..{b:.2} ({} points)", c.tau_grid.len()),
            _ => "empty".into(),
        };
        let matching = match c.gt_matching {
            GtMatching::AnyBox => "any-box",
            GtMatching::SingleBox => "single-box",
        };
        format!(
            "N = {n}; tau grid {grid}; matching {matching}; size buckets S <= {:.2}% of image area, M <= {:.2}%, L above\n",
            c.size_cutoffs.small * 100.0,
            c.size_cutoffs.medium * 100.0
        )
    }
}
