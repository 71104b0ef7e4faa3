use serde::{Deserialize, Serialize};

/// One record per (task, epoch) of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// 1-based task index (for meta-training, the index of the current subtask).
    pub task_index: usize,
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Test accuracy on every task of the sequence after this epoch.
    pub accuracies: Vec<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub rows: Vec<MetricRow>,
    pub final_accuracies: Vec<f64>,
    pub average_accuracy: f64,
}

impl RunMetrics {
    pub(crate) fn finish(&mut self, final_accuracies: Vec<f64>) {
        self.average_accuracy = mean(&final_accuracies);
        self.final_accuracies = final_accuracies;
    }
}

/// Sequential mean; zero for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().fold(0.0, |a, b| a + b) / values.len() as f64
    }
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss = values.iter().fold(0.0, |a, v| a + (v - m) * (v - m));
    (ss / (values.len() - 1) as f64).sqrt()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => 0.0,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}
