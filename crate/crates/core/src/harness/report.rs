//! Machine-readable training and evaluation records.

use serde::{Deserialize, Serialize};

/// One self-describing training record; emitted as one JSON object per line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricRecord {
    pub category: String,
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub train_miou: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_miou: Option<f64>,
    pub wall_ms: u64,
}

/// Evaluation results for one category.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: String,
    pub shape_count: usize,
    pub mean_miou: f64,
    /// Score of the constant majority-label predictor, for contrast.
    pub majority_baseline_miou: f64,
    pub per_shape_miou: Vec<f64>,
    /// confusion[gt][pred] point counts.
    pub confusion: Vec<Vec<u64>>,
}

/// Full evaluation report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub seed: u64,
    pub config_digest: String,
    /// Mean of every shape's mIoU (shape-count weighted across categories).
    pub overall_miou: f64,
    pub per_category: Vec<CategoryReport>,
    pub wall_ms: u64,
}

impl EvalReport {
    /// Human-readable summary table.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>7} {:>10} {:>10}\n",
            "category", "shapes", "mIoU", "baseline"
        ));
        for c in &self.per_category {
            out.push_str(&format!(
                "{:<12} {:>7} {:>10.4} {:>10.4}\n",
                c.category, c.shape_count, c.mean_miou, c.majority_baseline_miou
            ));
        }
        out.push_str(&format!(
            "{:<12} {:>7} {:>10.4}\n",
            "overall",
            self.per_category
                .iter()
                .map(|c| c.shape_count)
                .sum::<usize>(),
            self.overall_miou
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_roundtrips_through_json() {
        let report = EvalReport {
            model: "pdnet".into(),
            seed: 7,
            config_digest: "abc".into(),
            overall_miou: 0.9,
            per_category: vec![CategoryReport {
                category: "barbell".into(),
                shape_count: 2,
                mean_miou: 0.9,
                majority_baseline_miou: 0.3,
                per_shape_miou: vec![0.85, 0.95],
                confusion: vec![vec![10, 0], vec![1, 9]],
            }],
            wall_ms: 12,
        };
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.per_category[0].per_shape_miou.len(), 2);
        assert!(report.summary_table().contains("barbell"));
    }
}
