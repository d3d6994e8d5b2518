//! Memory purity, memory diversity and test accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::{argmax, Model};
use crate::stream::Example;

/// Per-task record emitted by the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub task: usize,
    pub sampler: String,
    pub robust_mode: String,
    pub noise_type: String,
    pub noise_ratio: f64,
    pub alpha_mode: String,
    pub accuracy: f64,
    pub purity: f64,
    pub diversity: f64,
    pub alpha_mean: f64,
    pub seed: u64,
    /// Stream examples consumed when the record was taken.
    #[serde(skip)]
    pub timestamp: u64,
}

pub const METRICS_HEADER: &str =
    "run_id,task,sampler,robust_mode,noise_type,noise_ratio,alpha_mode,accuracy,purity,diversity,alpha_mean,seed";

impl RunRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.task,
            self.sampler,
            self.robust_mode,
            self.noise_type,
            self.noise_ratio,
            self.alpha_mode,
            self.accuracy,
            self.purity,
            self.diversity,
            self.alpha_mean,
            self.seed
        )
    }
}

/// Fraction of entries whose stored label equals the ground truth.
pub fn memory_purity<'a>(memory: impl IntoIterator<Item = &'a Example>) -> Result<f64> {
    let (mut n, mut clean) = (0usize, 0usize);
    for e in memory {
        n += 1;
        clean += usize::from(e.is_clean());
    }
    if n == 0 {
        return Err(Error::Input("purity of an empty memory is undefined".into()));
    }
    Ok(clean as f64 / n as f64)
}

/// Mean over true classes (with at least two members) of the mean pairwise
/// L2 distance between oracle representations.
pub fn memory_diversity<'a>(
    memory: impl IntoIterator<Item = &'a Example>,
    oracle: &Model,
) -> Result<f64> {
    let mut classes: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for e in memory {
        classes
            .entry(e.true_label)
            .or_default()
            .push(oracle.forward(&e.x)?.representation);
    }
    let mut terms = Vec::new();
    for reps in classes.values().filter(|r| r.len() >= 2) {
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..reps.len() {
            for j in i + 1..reps.len() {
                sum += l2(&reps[i], &reps[j]);
                pairs += 1;
            }
        }
        terms.push(sum / pairs as f64);
    }
    if terms.is_empty() {
        log::warn!("memory diversity: no class has two or more members");
        return Ok(0.0);
    }
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Share of test examples whose argmax prediction (lowest index on ties)
/// matches the true label.
pub fn evaluate_accuracy(model: &Model, test: &[Example]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Input("accuracy on an empty test set".into()));
    }
    let mut hits = 0usize;
    for e in test {
        hits += usize::from(argmax(&model.probs(&e.x)?) == e.true_label);
    }
    Ok(hits as f64 / test.len() as f64)
}
