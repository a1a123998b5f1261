//! Run-directory artifacts shared by the CLI and tests: resolved configs,
//! metrics.json, selections.csv, and the consolidated report.

use crate::error::{Error, Result};
use crate::trainer::eval::Metrics;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Schema of metrics.json emitted by training and evaluation runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsJson {
    pub regime: Option<String>,
    pub gamma: Option<f64>,
    pub policy: String,
    pub accuracy: f64,
    pub accuracy_sub_legible: Option<f64>,
    pub n_instances: usize,
    pub n_sub_legible: usize,
    pub mean_flops: f64,
    pub mean_scale: f64,
    pub histogram: Option<HistogramJson>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistogramJson {
    pub scales: Vec<f64>,
    pub counts: Vec<usize>,
    pub proportions: Vec<f64>,
}

impl MetricsJson {
    pub fn from_metrics(m: &Metrics, scales: &[f64], policy: &str, regime: Option<String>, gamma: Option<f64>) -> Self {
        let histogram = m.histogram.as_ref().map(|h| {
            let total: usize = h.iter().sum();
            HistogramJson {
                scales: scales.to_vec(),
                counts: h.clone(),
                proportions: h.iter().map(|&c| c as f64 / total.max(1) as f64).collect(),
            }
        });
        MetricsJson {
            regime,
            gamma,
            policy: policy.to_string(),
            accuracy: m.accuracy,
            accuracy_sub_legible: m.accuracy_sub_legible,
            n_instances: m.n_instances,
            n_sub_legible: m.n_sub_legible,
            mean_flops: m.mean_flops,
            mean_scale: m.mean_scale,
            histogram,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("metrics serialize");
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        serde_json::from_str(&json).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Per-sample selection log (sample_id, p..., chosen, tau).
pub fn selections_csv(selections: &[crate::trainer::eval::SelectionRow], scales: &[f64]) -> String {
    let mut out = String::from("sample_id");
    for s in scales {
        out.push_str(&format!(",p_{s}"));
    }
    out.push_str(",chosen,tau\n");
    for row in selections {
        out.push_str(&format!("{}", row.sample_id));
        for v in &row.p {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{},{}\n", row.chosen, row.tau));
    }
    out
}

/// Create a run directory, refusing to reuse a non-empty one unless forced.
pub fn prepare_out_dir(path: &Path, force: bool) -> Result<()> {
    if path.exists() {
        let non_empty = std::fs::read_dir(path)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} exists and is not empty (use --force to overwrite)",
                path.display()
            )));
        }
    }
    std::fs::create_dir_all(path)?;
    Ok(())
}

/// One consolidated report row per run directory.
#[derive(Clone, Debug)]
pub struct ReportRow {
    pub regime: String,
    pub gamma: Option<f64>,
    pub accuracy: f64,
    pub accuracy_sub_legible: Option<f64>,
    pub mean_flops: f64,
    pub mean_scale: f64,
}

pub fn build_report(run_dirs: &[std::path::PathBuf]) -> Result<(String, String)> {
    if run_dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut rows = Vec::new();
    for dir in run_dirs {
        let m = MetricsJson::read(&dir.join("metrics.json"))
            .map_err(|e| Error::Io(std::io::Error::other(format!("unreadable run dir {}: {e}", dir.display()))))?;
        rows.push(ReportRow {
            regime: m.regime.unwrap_or_else(|| m.policy.clone()),
            gamma: m.gamma,
            accuracy: m.accuracy,
            accuracy_sub_legible: m.accuracy_sub_legible,
            mean_flops: m.mean_flops,
            mean_scale: m.mean_scale,
        });
    }
    rows.sort_by(|a, b| {
        a.regime
            .cmp(&b.regime)
            .then(a.gamma.unwrap_or(-1.0).partial_cmp(&b.gamma.unwrap_or(-1.0)).expect("finite gammas"))
    });

    let mut summary = String::from("regime,gamma,accuracy,accuracy_sub_legible,mean_flops,mean_scale\n");
    for r in &rows {
        summary.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.regime,
            r.gamma.map(|g| g.to_string()).unwrap_or_default(),
            r.accuracy,
            r.accuracy_sub_legible.map(|v| v.to_string()).unwrap_or_default(),
            r.mean_flops,
            r.mean_scale
        ));
    }

    let mut by_flops = rows.clone();
    by_flops.sort_by(|a, b| a.mean_flops.partial_cmp(&b.mean_flops).expect("finite flops"));
    let mut plot = String::from("# mean_flops accuracy\n");
    for r in &by_flops {
        plot.push_str(&format!("{} {}\n", r.mean_flops, r.accuracy));
    }
    Ok((summary, plot))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_dir_semantics() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        prepare_out_dir(&run, false).unwrap();
        // empty existing dir is fine
        prepare_out_dir(&run, false).unwrap();
        std::fs::write(run.join("x"), "y").unwrap();
        assert!(matches!(prepare_out_dir(&run, false), Err(Error::Config(_))));
        prepare_out_dir(&run, true).unwrap();
    }

    #[test]
    fn report_rows_are_sorted_and_schema_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |name: &str, regime: &str, gamma: Option<f64>, acc: f64, flops: f64| {
            let d = dir.path().join(name);
            std::fs::create_dir_all(&d).unwrap();
            MetricsJson {
                regime: Some(regime.into()),
                gamma,
                policy: "dynamic".into(),
                accuracy: acc,
                accuracy_sub_legible: None,
                n_instances: 10,
                n_sub_legible: 0,
                mean_flops: flops,
                mean_scale: 0.5,
                histogram: None,
            }
            .write(&d.join("metrics.json"))
            .unwrap();
            d
        };
        let dirs = vec![
            mk("b", "dld", Some(0.3), 0.8, 2.0),
            mk("a", "dld", Some(0.1), 0.9, 3.0),
            mk("c", "vanilla_multiscale", None, 0.7, 5.0),
        ];
        let (summary, plot) = build_report(&dirs).unwrap();
        let lines: Vec<&str> = summary.lines().collect();
        assert_eq!(lines[0], "regime,gamma,accuracy,accuracy_sub_legible,mean_flops,mean_scale");
        assert!(lines[1].starts_with("dld,0.1"));
        assert!(lines[2].starts_with("dld,0.3"));
        assert!(lines[3].starts_with("vanilla_multiscale"));
        assert!(plot.starts_with("# mean_flops accuracy"));
        assert!(build_report(&[dir.path().join("missing")]).is_err());
    }
}
