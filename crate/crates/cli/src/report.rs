use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "status", content = "error")]
pub enum RowStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub strategy: String,
    pub status: RowStatus,
    /// One entry per report task; `None` when skipped or failed.
    pub task_auc: Vec<Option<f64>>,
    pub avg_auc: Option<f64>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

impl CompareRow {
    pub fn failed(strategy: &str, n_tasks: usize, error: String) -> Self {
        Self {
            strategy: strategy.to_string(),
            status: RowStatus::Failed(error),
            task_auc: vec![None; n_tasks],
            avg_auc: None,
            initial_loss: None,
            final_loss: None,
        }
    }
}

/// Strategy × task AUC table with per-strategy smoothed losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub config_hash: String,
    pub seed: u64,
    pub smoothing_window: usize,
    pub tasks: Vec<String>,
    pub rows: Vec<CompareRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

impl CompareReport {
    pub fn row(&self, strategy: &str) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    /// Tab-separated table; values use shortest round-trip formatting.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("strategy");
        for t in &self.tasks {
            s += "\t";
            s += t;
        }
        s += "\tavg\tinitial_loss\tfinal_loss\tconfig_hash\tstatus\n";
        for r in &self.rows {
            s += &r.strategy;
            for a in &r.task_auc {
                let _ = write!(s, "\t{}", cell(*a));
            }
            let status = match &r.status {
                RowStatus::Ok => "ok".to_string(),
                RowStatus::Failed(e) => format!("failed: {}", e.replace(['\t', '\n'], " ")),
            };
            let _ = writeln!(
                s,
                "\t{}\t{}\t{}\t{}\t{}",
                cell(r.avg_auc),
                cell(r.initial_loss),
                cell(r.final_loss),
                self.config_hash,
                status
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_layout() {
        let rep = CompareReport {
            config_hash: "abc".into(),
            seed: 7,
            smoothing_window: 100,
            tasks: vec!["label_0".into(), "label_1".into()],
            rows: vec![
                CompareRow {
                    strategy: "causal".into(),
                    status: RowStatus::Ok,
                    task_auc: vec![Some(0.75), None],
                    avg_auc: Some(0.75),
                    initial_loss: Some(4.5),
                    final_loss: Some(2.0),
                },
                CompareRow::failed("ggsm", 2, "numeric failure:\tboom".into()),
            ],
        };
        let tsv = rep.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], "strategy\tlabel_0\tlabel_1\tavg\tinitial_loss\tfinal_loss\tconfig_hash\tstatus");
        assert_eq!(lines[1], "causal\t0.75\t-\t0.75\t4.5\t2\tabc\tok");
        assert_eq!(lines[2], "ggsm\t-\t-\t-\t-\t-\tabc\tfailed: numeric failure: boom");
        let back: CompareReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
    }
}
