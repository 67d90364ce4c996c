use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class: String,
    pub n_test: usize,
    pub n_correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split_id: usize,
    pub n_test: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassResult>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Evaluation over all splits. Stage timings live in a separate file so that
/// reruns produce byte-identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub splits: Vec<SplitResult>,
    pub mean_accuracy: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl SplitResult {
    pub fn from_predictions(split_id: usize, classes: &[String], truth: &[usize], predicted: &[usize]) -> Self {
        let k = classes.len();
        let mut confusion = vec![vec![0usize; k]; k];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        let per_class: Vec<ClassResult> = classes
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let n_test = confusion[c].iter().sum();
                let n_correct = confusion[c][c];
                ClassResult {
                    class: name.clone(),
                    n_test,
                    n_correct,
                    accuracy: ratio(n_correct, n_test),
                }
            })
            .collect();
        let n_correct = per_class.iter().map(|c| c.n_correct).sum();
        SplitResult {
            split_id,
            n_test: truth.len(),
            n_correct,
            accuracy: ratio(n_correct, truth.len()),
            per_class,
            confusion,
        }
    }
}

impl EvalReport {
    pub fn new(classes: Vec<String>, splits: Vec<SplitResult>) -> Self {
        let mean_accuracy = if splits.is_empty() {
            0.0
        } else {
            splits.iter().map(|s| s.accuracy).sum::<f64>() / splits.len() as f64
        };
        Self {
            classes,
            splits,
            mean_accuracy,
        }
    }

    /// Columns `split_id,class,n_test,n_correct,accuracy`; each split also
    /// gets an `all` row, and a final `mean` row carries the mean accuracy.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split_id,class,n_test,n_correct,accuracy\n");
        for s in &self.splits {
            for c in &s.per_class {
                let _ = writeln!(out, "{},{},{},{},{:.6}", s.split_id, c.class, c.n_test, c.n_correct, c.accuracy);
            }
            let _ = writeln!(out, "{},all,{},{},{:.6}", s.split_id, s.n_test, s.n_correct, s.accuracy);
        }
        let total: usize = self.splits.iter().map(|s| s.n_test).sum();
        let correct: usize = self.splits.iter().map(|s| s.n_correct).sum();
        let _ = writeln!(out, "mean,all,{total},{correct},{:.6}", self.mean_accuracy);
        out
    }
}
