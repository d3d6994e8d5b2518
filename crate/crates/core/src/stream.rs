//! Datasets, label-noise injection and blurry task streams.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub x: Vec<f64>,
    /// Label observed by learners.
    pub noisy_label: usize,
    /// Ground truth; only metrics and noise injection may read it.
    pub true_label: usize,
}

impl Example {
    pub fn clean(id: u64, x: Vec<f64>, label: usize) -> Self {
        Self {
            id,
            x,
            noisy_label: label,
            true_label: label,
        }
    }

    pub fn is_clean(&self) -> bool {
        self.noisy_label == self.true_label
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    num_classes: usize,
    dim: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    /// Validates label ranges, feature dimensions and id uniqueness.
    pub fn new(num_classes: usize, dim: usize, examples: Vec<Example>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Input("dataset needs at least one class".into()));
        }
        let mut ids = HashSet::with_capacity(examples.len());
        for ex in &examples {
            if ex.x.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    actual: ex.x.len(),
                });
            }
            if ex.noisy_label >= num_classes || ex.true_label >= num_classes {
                return Err(Error::Input(format!(
                    "example {} has a label outside [0, {num_classes})",
                    ex.id
                )));
            }
            if !ids.insert(ex.id) {
                return Err(Error::Input(format!("duplicate example id {}", ex.id)));
            }
        }
        Ok(Self {
            num_classes,
            dim,
            examples,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    fn with_examples(&self, examples: Vec<Example>) -> Self {
        Self {
            num_classes: self.num_classes,
            dim: self.dim,
            examples,
        }
    }

    /// Per-feature population standard deviation.
    pub fn feature_std(&self) -> Vec<f64> {
        let n = self.examples.len().max(1) as f64;
        let mut mean = vec![0.0; self.dim];
        for ex in &self.examples {
            for (m, v) in mean.iter_mut().zip(&ex.x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; self.dim];
        for ex in &self.examples {
            for ((s, v), m) in var.iter_mut().zip(&ex.x).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        var.into_iter().map(f64::sqrt).collect()
    }

    /// All labels reset to the ground truth.
    pub fn cleaned(&self) -> Self {
        let examples = self
            .examples
            .iter()
            .map(|e| Example {
                noisy_label: e.true_label,
                ..e.clone()
            })
            .collect();
        self.with_examples(examples)
    }

    pub fn noise_fraction(&self) -> f64 {
        let flipped = self.examples.iter().filter(|e| !e.is_clean()).count();
        flipped as f64 / self.examples.len().max(1) as f64
    }
}

/// Stratified split by true label. Returns `(train, test)`.
pub fn train_test_split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!(
            "test fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    let mut rng = rng_for(seed, "train-test-split");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..dataset.num_classes {
        let mut members: Vec<&Example> = dataset
            .examples
            .iter()
            .filter(|e| e.true_label == class)
            .collect();
        members.shuffle(&mut rng);
        let n_test = (members.len() as f64 * test_fraction).round() as usize;
        for (i, ex) in members.into_iter().enumerate() {
            let mut ex = ex.clone();
            if i < n_test {
                // evaluation data is always clean
                ex.noisy_label = ex.true_label;
                test.push(ex);
            } else {
                train.push(ex);
            }
        }
    }
    train.sort_by_key(|e| e.id);
    test.sort_by_key(|e| e.id);
    Ok((dataset.with_examples(train), dataset.with_examples(test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NoiseType {
    #[default]
    #[serde(rename = "sym")]
    Symmetric,
    #[serde(rename = "asym")]
    Asymmetric,
}

impl NoiseType {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseType::Symmetric => "sym",
            NoiseType::Asymmetric => "asym",
        }
    }
}

impl std::str::FromStr for NoiseType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sym" => Ok(NoiseType::Symmetric),
            "asym" => Ok(NoiseType::Asymmetric),
            other => Err(Error::Config(format!("unknown noise type {other:?}"))),
        }
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if (0.0..1.0).contains(&ratio) {
        Ok(())
    } else {
        Err(Error::Config(format!("noise ratio must be in [0, 1), got {ratio}")))
    }
}

/// Flips each label with probability `ratio` to a uniformly chosen other
/// class. Noise is drawn from the true label, so re-injecting is idempotent
/// in distribution.
pub fn inject_symmetric_noise(dataset: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    check_ratio(ratio)?;
    let c = dataset.num_classes;
    let mut rng = rng_for(seed, "noise-sym");
    let examples = dataset
        .examples
        .iter()
        .map(|e| {
            let mut e = e.clone();
            e.noisy_label = e.true_label;
            if c > 1 && rng.random_bool(ratio) {
                let other = rng.random_range(0..c - 1);
                e.noisy_label = if other >= e.true_label { other + 1 } else { other };
            }
            e
        })
        .collect();
    Ok(dataset.with_examples(examples))
}

/// Class-conditional flip target; `None` leaves the class untouched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap(Vec<Option<usize>>);

impl ClassMap {
    pub fn new(map: Vec<Option<usize>>) -> Result<Self> {
        let c = map.len();
        for (from, to) in map.iter().enumerate() {
            if let Some(to) = *to {
                if to == from {
                    return Err(Error::Config(format!("class map sends {from} to itself")));
                }
                if to >= c {
                    return Err(Error::Config(format!("class map target {to} out of range")));
                }
            }
        }
        Ok(Self(map))
    }

    /// `c -> (c + 1) mod C`.
    pub fn circular(num_classes: usize) -> Self {
        Self(
            (0..num_classes)
                .map(|c| (num_classes > 1).then_some((c + 1) % num_classes))
                .collect(),
        )
    }

    pub fn get(&self, class: usize) -> Option<usize> {
        self.0.get(class).copied().flatten()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn inject_asymmetric_noise(
    dataset: &Dataset,
    ratio: f64,
    class_map: &ClassMap,
    seed: u64,
) -> Result<Dataset> {
    check_ratio(ratio)?;
    if class_map.len() != dataset.num_classes {
        return Err(Error::Config(format!(
            "class map covers {} classes, dataset has {}",
            class_map.len(),
            dataset.num_classes
        )));
    }
    let mut rng = rng_for(seed, "noise-asym");
    let examples = dataset
        .examples
        .iter()
        .map(|e| {
            let mut e = e.clone();
            e.noisy_label = e.true_label;
            if let Some(to) = class_map.get(e.true_label) {
                if rng.random_bool(ratio) {
                    e.noisy_label = to;
                }
            }
            e
        })
        .collect();
    Ok(dataset.with_examples(examples))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub task_id: usize,
    pub examples: Vec<Example>,
    pub major_classes: BTreeSet<usize>,
    pub minor_classes: BTreeSet<usize>,
}

impl TaskStream {
    /// Consecutive mini-batches in stream order; the last one may be short.
    pub fn batches(&self, batch_size: usize) -> std::slice::Chunks<'_, Example> {
        assert!(batch_size >= 1, "batch size must be positive");
        self.examples.chunks(batch_size)
    }

    /// Examples whose true class is minor in this task.
    pub fn minor_count(&self) -> usize {
        self.examples
            .iter()
            .filter(|e| self.minor_classes.contains(&e.true_label))
            .count()
    }
}

/// Free-function form of [`TaskStream::batches`].
pub fn batches(task: &TaskStream, batch_size: usize) -> std::slice::Chunks<'_, Example> {
    task.batches(batch_size)
}

/// Number of major classes per task: `C / T` each, with the remainder
/// handed out one per task starting from the last task.
pub fn major_counts(num_classes: usize, num_tasks: usize) -> Vec<usize> {
    let base = num_classes / num_tasks;
    let extra = num_classes % num_tasks;
    (0..num_tasks)
        .map(|t| base + usize::from(t >= num_tasks - extra))
        .collect()
}

/// Splits a dataset into `num_tasks` blurry tasks keyed on true labels.
///
/// Majors are disjoint and cover every class. In each task a share
/// `minor_share` of the examples comes from the classes that are not major
/// there, split evenly across those classes.
pub fn split_blurry_tasks(
    dataset: &Dataset,
    num_tasks: usize,
    minor_share: f64,
    seed: u64,
) -> Result<Vec<TaskStream>> {
    let c = dataset.num_classes;
    if num_tasks == 0 {
        return Err(Error::Config("number of tasks must be positive".into()));
    }
    if num_tasks > c {
        return Err(Error::Config(format!(
            "{num_tasks} tasks requested but only {c} classes"
        )));
    }
    if !(0.0..1.0).contains(&minor_share) {
        return Err(Error::Config(format!(
            "blurry share L must be in [0, 1), got {minor_share}"
        )));
    }
    let mut rng = rng_for(seed, "blurry-split");

    let mut class_order: Vec<usize> = (0..c).collect();
    class_order.shuffle(&mut rng);
    let mut majors: Vec<BTreeSet<usize>> = Vec::with_capacity(num_tasks);
    let mut task_of_class = vec![0; c];
    let mut cursor = 0;
    for (t, n) in major_counts(c, num_tasks).into_iter().enumerate() {
        let set: BTreeSet<usize> = class_order[cursor..cursor + n].iter().copied().collect();
        for &cls in &set {
            task_of_class[cls] = t;
        }
        majors.push(set);
        cursor += n;
    }

    let mut pools: Vec<Vec<&Example>> = vec![Vec::new(); c];
    for ex in &dataset.examples {
        pools[ex.true_label].push(ex);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let sizes: Vec<usize> = pools.iter().map(Vec::len).collect();

    let blurry = minor_share > 0.0 && num_tasks > 1;
    let minors: Vec<BTreeSet<usize>> = majors
        .iter()
        .map(|m| {
            if blurry {
                (0..c).filter(|cls| !m.contains(cls)).collect()
            } else {
                BTreeSet::new()
            }
        })
        .collect();

    // donations[t][c]: examples of class c placed in task t as a minor.
    let mut donations = vec![vec![0usize; c]; num_tasks];
    if blurry {
        let ratio = minor_share / (1.0 - minor_share);
        for _ in 0..200 {
            let mut next = vec![vec![0usize; c]; num_tasks];
            for t in 0..num_tasks {
                let major_total: usize = majors[t]
                    .iter()
                    .map(|&cls| {
                        let given: usize = (0..num_tasks).map(|u| donations[u][cls]).sum();
                        sizes[cls].saturating_sub(given)
                    })
                    .sum();
                let want = (ratio * major_total as f64).round() as usize;
                let minor_list: Vec<usize> = minors[t].iter().copied().collect();
                let k = minor_list.len();
                let (base, rem) = (want / k, want % k);
                for i in 0..k {
                    // rotate the remainder so it does not always land on the same class
                    let cls = minor_list[(i + t) % k];
                    next[t][cls] = base + usize::from(i < rem);
                }
            }
            if next == donations {
                break;
            }
            donations = next;
        }
        for cls in 0..c {
            let given: usize = (0..num_tasks).map(|u| donations[u][cls]).sum();
            if given >= sizes[cls] {
                return Err(Error::Config(format!(
                    "class {cls} has {} examples, too few to supply minor share {minor_share}",
                    sizes[cls]
                )));
            }
        }
    }

    let mut buckets: Vec<Vec<Example>> = vec![Vec::new(); num_tasks];
    for (cls, pool) in pools.iter().enumerate() {
        let mut it = pool.iter();
        for (t, row) in donations.iter().enumerate() {
            if t == task_of_class[cls] {
                continue;
            }
            buckets[t].extend(it.by_ref().take(row[cls]).map(|e| (*e).clone()));
        }
        buckets[task_of_class[cls]].extend(it.map(|e| (*e).clone()));
    }

    Ok(buckets
        .into_iter()
        .zip(majors)
        .zip(minors)
        .enumerate()
        .map(|(t, ((mut examples, major_classes), minor_classes))| {
            examples.shuffle(&mut rng);
            TaskStream {
                task_id: t,
                examples,
                major_classes,
                minor_classes,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(classes: usize, per_class: usize) -> Dataset {
        let mut examples = Vec::new();
        let mut id = 0;
        for c in 0..classes {
            for i in 0..per_class {
                examples.push(Example::clean(id, vec![c as f64, i as f64], c));
                id += 1;
            }
        }
        Dataset::new(classes, 2, examples).unwrap()
    }

    #[test]
    fn rejects_duplicate_ids_and_bad_labels() {
        let dup = vec![
            Example::clean(1, vec![0.0], 0),
            Example::clean(1, vec![1.0], 1),
        ];
        assert!(Dataset::new(2, 1, dup).is_err());
        let bad = vec![Example::clean(1, vec![0.0], 5)];
        assert!(Dataset::new(2, 1, bad).is_err());
    }

    #[test]
    fn single_task_takes_everything() {
        let ds = toy(4, 10);
        let tasks = split_blurry_tasks(&ds, 1, 0.3, 1).unwrap();
        assert_eq!(tasks.len(), 1);
        assert_eq!(tasks[0].major_classes.len(), 4);
        assert!(tasks[0].minor_classes.is_empty());
        assert_eq!(tasks[0].examples.len(), 40);
    }

    #[test]
    fn zero_share_is_disjoint() {
        let ds = toy(6, 20);
        let tasks = split_blurry_tasks(&ds, 3, 0.0, 2).unwrap();
        for t in &tasks {
            assert!(t.minor_classes.is_empty());
            assert!(t.examples.iter().all(|e| t.major_classes.contains(&e.true_label)));
        }
    }

    #[test]
    fn config_errors() {
        let ds = toy(3, 10);
        assert!(matches!(split_blurry_tasks(&ds, 4, 0.1, 0), Err(Error::Config(_))));
        assert!(matches!(split_blurry_tasks(&ds, 2, 1.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn uneven_classes_give_extra_majors_to_the_end() {
        assert_eq!(major_counts(101, 5), vec![20, 20, 20, 20, 21]);
        assert_eq!(major_counts(11, 4), vec![2, 3, 3, 3]);
        assert_eq!(major_counts(10, 5), vec![2; 5]);
    }

    #[test]
    fn batching_partitions_the_stream() {
        let ds = toy(2, 5);
        let t = split_blurry_tasks(&ds, 1, 0.0, 3).unwrap().remove(0);
        let b: Vec<_> = t.batches(16).collect();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 10);

        let ds = toy(2, 16);
        let t = split_blurry_tasks(&ds, 1, 0.0, 3).unwrap().remove(0);
        let sizes: Vec<usize> = t.batches(16).map(<[Example]>::len).collect();
        assert_eq!(sizes, vec![16, 16]);
        let sizes: Vec<usize> = batches(&t, 10).map(<[Example]>::len).collect();
        assert_eq!(sizes, vec![10, 10, 10, 2]);
        let joined: Vec<u64> = t.batches(7).flatten().map(|e| e.id).collect();
        let order: Vec<u64> = t.examples.iter().map(|e| e.id).collect();
        assert_eq!(joined, order);
    }

    #[test]
    fn zero_noise_is_identity_on_labels() {
        let ds = toy(5, 20);
        let sym = inject_symmetric_noise(&ds, 0.0, 9).unwrap();
        assert!(sym.examples.iter().all(Example::is_clean));
        let asym = inject_asymmetric_noise(&ds, 0.0, &ClassMap::circular(5), 9).unwrap();
        assert_eq!(asym, ds);
    }

    #[test]
    fn symmetric_flips_never_keep_true_label() {
        let ds = toy(3, 200);
        let noisy = inject_symmetric_noise(&ds, 0.5, 4).unwrap();
        let flipped: Vec<_> = noisy.examples.iter().filter(|e| !e.is_clean()).collect();
        assert!(!flipped.is_empty());
        for (a, b) in ds.examples.iter().zip(&noisy.examples) {
            assert_eq!(a.x, b.x);
            assert_eq!(a.id, b.id);
            assert_eq!(a.true_label, b.true_label);
        }
    }

    #[test]
    fn class_map_rejects_self_loops() {
        assert!(ClassMap::new(vec![Some(1), Some(1)]).is_err());
        assert!(ClassMap::new(vec![Some(1), None]).is_ok());
        assert_eq!(ClassMap::circular(3).get(2), Some(0));
    }

    #[test]
    fn split_is_deterministic() {
        let ds = toy(10, 50);
        let a = split_blurry_tasks(&ds, 5, 0.1, 11).unwrap();
        let b = split_blurry_tasks(&ds, 5, 0.1, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_test_split_is_stratified_and_clean() {
        let ds = inject_symmetric_noise(&toy(4, 50), 0.4, 1).unwrap();
        let (train, test) = train_test_split(&ds, 0.2, 5).unwrap();
        assert_eq!(train.len(), 160);
        assert_eq!(test.len(), 40);
        for c in 0..4 {
            assert_eq!(test.examples.iter().filter(|e| e.true_label == c).count(), 10);
        }
        assert!(test.examples.iter().all(Example::is_clean));
    }
}
