//! Per-epoch training log and its CSV form.
//!
//! Columns: epoch,lr,tau,l_rec,l_acc,l_flops,l_drs,l_roi,l_con,l_seq,
//! l_logit,acc_hi,acc_policy,mean_selected_scale,mean_flops. Loss columns
//! not produced by the active regime stay empty.

use std::fmt::Write as _;

#[derive(Clone, Debug, Default)]
pub struct EpochRow {
    pub epoch: u32,
    pub lr: f64,
    pub tau: Option<f64>,
    pub l_rec: Option<f64>,
    pub l_acc: Option<f64>,
    pub l_flops: Option<f64>,
    pub l_drs: Option<f64>,
    pub l_roi: Option<f64>,
    pub l_con: Option<f64>,
    pub l_seq: Option<f64>,
    pub l_logit: Option<f64>,
    pub acc_hi: f64,
    pub acc_policy: f64,
    pub mean_selected_scale: f64,
    pub mean_flops: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
}

pub const CSV_HEADER: &str =
    "epoch,lr,tau,l_rec,l_acc,l_flops,l_drs,l_roi,l_con,l_seq,l_logit,acc_hi,acc_policy,mean_selected_scale,mean_flops";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.lr,
                opt(r.tau),
                opt(r.l_rec),
                opt(r.l_acc),
                opt(r.l_flops),
                opt(r.l_drs),
                opt(r.l_roi),
                opt(r.l_con),
                opt(r.l_seq),
                opt(r.l_logit),
                r.acc_hi,
                r.acc_policy,
                r.mean_selected_scale,
                r.mean_flops,
            );
        }
        out
    }

    pub fn validate_contiguous(&self) -> bool {
        self.rows.iter().enumerate().all(|(i, r)| r.epoch == i as u32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_fixed_schema_and_contiguous_epochs() {
        let mut log = TrainLog::default();
        for e in 0..3 {
            log.rows.push(EpochRow { epoch: e, lr: 1e-3, acc_hi: 0.5, ..Default::default() });
        }
        assert!(log.validate_contiguous());
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1].split(',').count(), CSV_HEADER.split(',').count());
    }
}
