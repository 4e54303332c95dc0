use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// Trailing window of the smoothed entropy column.
pub const SMOOTHING_WINDOW: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochPoint {
    pub epoch: usize,
    pub entropy: f64,
    pub val_mse: f64,
}

/// Per-epoch trajectory of one training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsLog {
    pub label: String,
    pub points: Vec<EpochPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRow {
    pub epoch: usize,
    /// One entry per configuration, `None` where that run had stopped.
    pub entropy: Vec<Option<f64>>,
    pub entropy_smoothed: Vec<Option<f64>>,
    pub val_mse: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct DynamicsTable {
    pub labels: Vec<String>,
    pub rows: Vec<DynamicsRow>,
}

fn trailing_mean(values: &[f64]) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(SMOOTHING_WINDOW);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Aligns several trajectories on the union of their epochs.
pub fn track_dynamics(logs: &[DynamicsLog]) -> DynamicsTable {
    let epochs: BTreeSet<usize> = logs.iter().flat_map(|l| l.points.iter().map(|p| p.epoch)).collect();
    let mut sorted: Vec<Vec<&EpochPoint>> = logs
        .iter()
        .map(|l| {
            let mut pts: Vec<&EpochPoint> = l.points.iter().collect();
            pts.sort_by_key(|p| p.epoch);
            pts
        })
        .collect();
    let smoothed: Vec<Vec<f64>> = sorted
        .iter()
        .map(|pts| trailing_mean(&pts.iter().map(|p| p.entropy).collect::<Vec<_>>()))
        .collect();
    let rows = epochs
        .into_iter()
        .map(|epoch| {
            let mut row = DynamicsRow {
                epoch,
                entropy: vec![],
                entropy_smoothed: vec![],
                val_mse: vec![],
            };
            for (pts, sm) in sorted.iter_mut().zip(&smoothed) {
                match pts.iter().position(|p| p.epoch == epoch) {
                    Some(i) => {
                        row.entropy.push(Some(pts[i].entropy));
                        row.entropy_smoothed.push(Some(sm[i]));
                        row.val_mse.push(Some(pts[i].val_mse));
                    }
                    None => {
                        row.entropy.push(None);
                        row.entropy_smoothed.push(None);
                        row.val_mse.push(None);
                    }
                }
            }
            row
        })
        .collect();
    DynamicsTable {
        labels: logs.iter().map(|l| l.label.clone()).collect(),
        rows,
    }
}

impl DynamicsTable {
    /// Flat CSV with three columns per configuration.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch");
        for l in &self.labels {
            out.push_str(&format!(",{l}_entropy,{l}_entropy_smoothed,{l}_val_mse"));
        }
        out.push('\n');
        let cell = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&r.epoch.to_string());
            for i in 0..self.labels.len() {
                out.push_str(&format!(
                    ",{},{},{}",
                    cell(&r.entropy[i]),
                    cell(&r.entropy_smoothed[i]),
                    cell(&r.val_mse[i])
                ));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(label: &str, entropies: &[f64]) -> DynamicsLog {
        DynamicsLog {
            label: label.into(),
            points: entropies
                .iter()
                .enumerate()
                .map(|(i, &e)| EpochPoint {
                    epoch: i + 1,
                    entropy: e,
                    val_mse: 1.0 / (i + 1) as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn empty_and_single() {
        assert!(track_dynamics(&[]).rows.is_empty());
        let t = track_dynamics(&[log("a", &[2.0])]);
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].entropy_smoothed[0], Some(2.0));
    }

    #[test]
    fn smoothing_by_hand() {
        let t = track_dynamics(&[log("a", &[1.0, 3.0, 2.0, 6.0, 4.0])]);
        let sm: Vec<f64> = t.rows.iter().map(|r| r.entropy_smoothed[0].unwrap()).collect();
        let expect = [1.0, 2.0, 2.0, 11.0 / 3.0, 4.0];
        for (a, b) in sm.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn alignment_pads_shorter_runs() {
        let t = track_dynamics(&[log("k0", &[1.0, 2.0, 3.0]), log("k3", &[1.5])]);
        assert_eq!(t.rows.len(), 3);
        assert_eq!(t.rows[2].entropy, vec![Some(3.0), None]);
        let csv = t.to_csv();
        assert!(csv.starts_with("epoch,k0_entropy,"));
        assert_eq!(csv.lines().count(), 4);
    }
}
