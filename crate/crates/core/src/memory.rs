//! Episodic memory and the samplers that maintain it.
//!
//! Three policies are provided: PuriDivER score-based eviction (small loss
//! plus low same-label similarity in the relevant representation),
//! reservoir sampling, and greedy class balancing.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::{cross_entropy_hard, dot, Model};
use crate::stream::Example;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub example: Example,
    /// Monotone insertion counter; smaller is older.
    pub inserted: u64,
}

/// Row of the memory snapshot export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub id: u64,
    pub noisy_label: usize,
    pub true_label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodicMemory {
    capacity: usize,
    entries: Vec<MemoryEntry>,
    /// Positions into `entries`, keyed by noisy label.
    by_class: BTreeMap<usize, Vec<usize>>,
    next_index: u64,
}

impl EpisodicMemory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("memory capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            entries: Vec::with_capacity(capacity + 1),
            by_class: BTreeMap::new(),
            next_index: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn examples(&self) -> impl Iterator<Item = &Example> {
        self.entries.iter().map(|e| &e.example)
    }

    /// Positions of the members stored under `label`.
    pub fn class_members(&self, label: usize) -> &[usize] {
        self.by_class.get(&label).map_or(&[], Vec::as_slice)
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        self.by_class
            .iter()
            .map(|(&c, v)| (c, v.len()))
            .filter(|&(_, n)| n > 0)
            .collect()
    }

    fn push(&mut self, example: Example) {
        let pos = self.entries.len();
        self.by_class.entry(example.noisy_label).or_default().push(pos);
        self.entries.push(MemoryEntry {
            example,
            inserted: self.next_index,
        });
        self.next_index += 1;
    }

    fn remove_at(&mut self, pos: usize) -> Example {
        let entry = self.entries.remove(pos);
        self.reindex();
        entry.example
    }

    fn replace_at(&mut self, pos: usize, example: Example) -> Example {
        let entry = MemoryEntry {
            example,
            inserted: self.next_index,
        };
        self.next_index += 1;
        let old = std::mem::replace(&mut self.entries[pos], entry);
        self.reindex();
        old.example
    }

    fn reindex(&mut self) {
        self.by_class.clear();
        for (pos, e) in self.entries.iter().enumerate() {
            self.by_class.entry(e.example.noisy_label).or_default().push(pos);
        }
    }

    /// Inserts without eviction while there is room. Returns the candidate
    /// back when the memory is already full.
    pub fn try_insert(&mut self, example: Example) -> Option<Example> {
        if self.is_full() {
            Some(example)
        } else {
            self.push(example);
            None
        }
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.entries.len() > self.capacity {
            return Err(Error::Input(format!(
                "memory holds {} entries, capacity {}",
                self.entries.len(),
                self.capacity
            )));
        }
        let mut seen = 0;
        for (&label, positions) in &self.by_class {
            for &p in positions {
                let e = self
                    .entries
                    .get(p)
                    .ok_or_else(|| Error::Input(format!("class index points past end: {p}")))?;
                if e.example.noisy_label != label {
                    return Err(Error::Input(format!(
                        "class index {label} lists entry with label {}",
                        e.example.noisy_label
                    )));
                }
                seen += 1;
            }
        }
        if seen != self.entries.len() {
            return Err(Error::Input("class index does not cover every entry".into()));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<SnapshotEntry> {
        self.examples()
            .map(|e| SnapshotEntry {
                id: e.id,
                noisy_label: e.noisy_label,
                true_label: e.true_label,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SamplerKind {
    #[default]
    #[serde(rename = "puridiver")]
    PuriDivER,
    #[serde(rename = "reservoir")]
    Reservoir,
    #[serde(rename = "gbs")]
    GreedyBalanced,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::PuriDivER => "puridiver",
            SamplerKind::Reservoir => "reservoir",
            SamplerKind::GreedyBalanced => "gbs",
        }
    }

    pub fn uses_alpha(self) -> bool {
        self == SamplerKind::PuriDivER
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "puridiver" => Ok(SamplerKind::PuriDivER),
            "reservoir" => Ok(SamplerKind::Reservoir),
            "gbs" => Ok(SamplerKind::GreedyBalanced),
            other => Err(Error::Config(format!("unknown sampler {other:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Balancing coefficient

/// `0.5 * min(1 / mean_loss, 1)`; a zero loss maps to the 0.5 cap.
pub fn adaptive_alpha(batch_mean_loss: f64) -> Result<f64> {
    if !(batch_mean_loss >= 0.0) {
        return Err(Error::Input(format!(
            "batch mean loss must be non-negative, got {batch_mean_loss}"
        )));
    }
    if batch_mean_loss == 0.0 {
        return Ok(0.5);
    }
    Ok(0.5 * (1.0 / batch_mean_loss).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum AlphaMode {
    #[default]
    Adaptive,
    Fixed(f64),
}

impl AlphaMode {
    pub fn alpha_for(self, batch_mean_loss: f64) -> Result<f64> {
        match self {
            AlphaMode::Adaptive => adaptive_alpha(batch_mean_loss),
            AlphaMode::Fixed(a) => Ok(a),
        }
    }

    pub fn label(self) -> String {
        match self {
            AlphaMode::Adaptive => "adaptive".to_string(),
            AlphaMode::Fixed(a) => format!("fixed:{a}"),
        }
    }
}

impl std::str::FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "adaptive" {
            return Ok(AlphaMode::Adaptive);
        }
        let value = s
            .strip_prefix("fixed:")
            .ok_or_else(|| Error::Config(format!("unknown alpha_mode {s:?}")))?;
        let a: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad fixed alpha {value:?}")))?;
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Config(format!("fixed alpha must be in [0, 1], got {a}")));
        }
        Ok(AlphaMode::Fixed(a))
    }
}

impl std::fmt::Display for AlphaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

impl Serialize for AlphaMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for AlphaMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Relevant representation and scoring

/// Hidden units `e` whose class-`class` weight exceeds the mean weight over
/// all classes. Falls back to every unit when no unit qualifies.
pub fn relevant_mask(model: &Model, class: usize) -> Vec<usize> {
    let c = model.num_classes() as f64;
    let mask: Vec<usize> = (0..model.hidden_dim())
        .filter(|&e| {
            let mean = (0..model.num_classes()).map(|k| model.fc_weight(e, k)).sum::<f64>() / c;
            model.fc_weight(e, class) > mean
        })
        .collect();
    if mask.is_empty() {
        (0..model.hidden_dim()).collect()
    } else {
        mask
    }
}

fn gather(values: &[f64], mask: &[usize]) -> Vec<f64> {
    mask.iter().map(|&e| values[e]).collect()
}

pub fn relevant_representation(model: &Model, x: &[f64], class: usize) -> Result<Vec<f64>> {
    let fwd = model.forward(x)?;
    Ok(gather(&fwd.representation, &relevant_mask(model, class)))
}

/// Cosine similarity, defined as 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Score of a candidate that is not (yet) in memory:
/// `(1 - alpha) * loss + alpha * mean cos(f_rel(x), f_rel(x_hat))` over the
/// stored examples sharing its noisy label. Lower is better.
pub fn sample_score(
    model: &Model,
    memory: &EpisodicMemory,
    x: &[f64],
    label: usize,
    alpha: f64,
) -> Result<f64> {
    let fwd = model.forward(x)?;
    let loss = cross_entropy_hard(&fwd.probs, label);
    let mask = relevant_mask(model, label);
    let rel = gather(&fwd.representation, &mask);
    let members = memory.class_members(label);
    let diversity = if members.is_empty() {
        0.0
    } else {
        let mut total = 0.0;
        for &p in members {
            let other = model.forward(&memory.entries[p].example.x)?;
            total += cosine(&rel, &gather(&other.representation, &mask));
        }
        total / members.len() as f64
    };
    Ok((1.0 - alpha) * loss + alpha * diversity)
}

/// Per-example forward results under one fixed model.
///
/// Within a stream mini-batch the model does not change, so each stored
/// example needs only one forward pass for all the updates of that batch.
/// Call [`ScoreCache::clear`] whenever the model changes.
#[derive(Debug, Default)]
pub struct ScoreCache {
    items: HashMap<u64, Scored>,
    masks: HashMap<usize, Vec<usize>>,
}

#[derive(Debug, Clone)]
struct Scored {
    representation: Vec<f64>,
    loss: f64,
}

impl ScoreCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.items.clear();
        self.masks.clear();
    }

    fn scored(&mut self, model: &Model, ex: &Example) -> Result<&Scored> {
        if !self.items.contains_key(&ex.id) {
            let fwd = model.forward(&ex.x)?;
            let loss = cross_entropy_hard(&fwd.probs, ex.noisy_label);
            self.items.insert(
                ex.id,
                Scored {
                    representation: fwd.representation,
                    loss,
                },
            );
        }
        Ok(&self.items[&ex.id])
    }

    fn mask(&mut self, model: &Model, class: usize) -> &[usize] {
        self.masks
            .entry(class)
            .or_insert_with(|| relevant_mask(model, class))
    }
}

/// Scores of every stored entry; a member's diversity term averages over
/// the other members with the same noisy label.
pub fn member_scores(
    model: &Model,
    memory: &EpisodicMemory,
    alpha: f64,
    cache: &mut ScoreCache,
) -> Result<Vec<f64>> {
    let mut scores = vec![0.0; memory.len()];
    for (&label, positions) in &memory.by_class {
        if positions.is_empty() {
            continue;
        }
        let mask = cache.mask(model, label).to_vec();
        let mut rel = Vec::with_capacity(positions.len());
        let mut losses = Vec::with_capacity(positions.len());
        for &p in positions {
            let s = cache.scored(model, &memory.entries[p].example)?;
            rel.push(gather(&s.representation, &mask));
            losses.push(s.loss);
        }
        let n = positions.len();
        let mut sims = vec![0.0; n];
        for i in 0..n {
            for j in i + 1..n {
                let c = cosine(&rel[i], &rel[j]);
                sims[i] += c;
                sims[j] += c;
            }
        }
        for (k, &p) in positions.iter().enumerate() {
            let diversity = if n > 1 { sims[k] / (n - 1) as f64 } else { 0.0 };
            scores[p] = (1.0 - alpha) * losses[k] + alpha * diversity;
        }
    }
    Ok(scores)
}

/// Position of the highest score; ties evict the oldest entry.
fn eviction_choice(memory: &EpisodicMemory, scores: &[f64]) -> usize {
    let mut best = 0;
    for p in 1..scores.len() {
        let better = scores[p] > scores[best]
            || (scores[p] == scores[best]
                && memory.entries[p].inserted < memory.entries[best].inserted);
        if better {
            best = p;
        }
    }
    best
}

/// PuriDivER memory update. Below capacity the candidate is stored; at
/// capacity it is stored provisionally and the highest-scoring of the
/// `K + 1` members is dropped. Returns the example that left, if any.
pub fn puridiver_update(
    memory: &mut EpisodicMemory,
    candidate: Example,
    model: &Model,
    alpha: f64,
) -> Result<Option<Example>> {
    puridiver_update_cached(memory, candidate, model, alpha, &mut ScoreCache::new())
}

/// [`puridiver_update`] reusing forward passes from `cache`, which must have
/// been filled under the same `model`.
pub fn puridiver_update_cached(
    memory: &mut EpisodicMemory,
    candidate: Example,
    model: &Model,
    alpha: f64,
    cache: &mut ScoreCache,
) -> Result<Option<Example>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Input(format!("alpha must be in [0, 1], got {alpha}")));
    }
    if !memory.is_full() {
        memory.push(candidate);
        return Ok(None);
    }
    memory.push(candidate);
    let scores = member_scores(model, memory, alpha, cache)?;
    let evict = eviction_choice(memory, &scores);
    let gone = memory.remove_at(evict);
    cache.items.remove(&gone.id);
    Ok(Some(gone))
}

/// Reservoir sampling. `n_seen` counts every stream example so far,
/// including `candidate`.
pub fn reservoir_update<R: Rng + ?Sized>(
    memory: &mut EpisodicMemory,
    candidate: Example,
    n_seen: u64,
    rng: &mut R,
) -> Option<Example> {
    if !memory.is_full() {
        memory.push(candidate);
        return None;
    }
    let slot = rng.random_range(0..n_seen.max(1));
    if (slot as usize) < memory.capacity {
        Some(memory.replace_at(slot as usize, candidate))
    } else {
        Some(candidate)
    }
}

/// Greedy class-balanced update: at capacity the candidate is stored
/// provisionally, then a uniformly random member of a largest noisy-label
/// class among the `K + 1` (ties broken uniformly) is evicted. Counting the
/// candidate keeps class counts within one of each other under balanced flow.
pub fn greedy_balanced_update<R: Rng + ?Sized>(
    memory: &mut EpisodicMemory,
    candidate: Example,
    rng: &mut R,
) -> Option<Example> {
    if !memory.is_full() {
        memory.push(candidate);
        return None;
    }
    memory.push(candidate);
    let counts = memory.class_counts();
    let largest = counts.values().copied().max().unwrap_or(0);
    let tied: Vec<usize> = counts
        .iter()
        .filter(|&(_, &n)| n == largest)
        .map(|(&c, _)| c)
        .collect();
    let class = tied[rng.random_range(0..tied.len())];
    let members = memory.class_members(class);
    let pos = members[rng.random_range(0..members.len())];
    Some(memory.remove_at(pos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ex(id: u64, x: Vec<f64>, noisy: usize, truth: usize) -> Example {
        Example {
            id,
            x,
            noisy_label: noisy,
            true_label: truth,
        }
    }

    /// Two classes split by the sign of x[0]; confident everywhere away from 0.
    fn separating_model(scale: f64) -> Model {
        // h0 = relu(x0), h1 = relu(-x0)
        let w1 = vec![1.0, 0.0, -1.0, 0.0];
        let w2 = vec![scale, 0.0, 0.0, scale];
        Model::from_parts(2, 2, 2, w1, vec![0.0; 2], w2, vec![0.0; 2]).unwrap()
    }

    #[test]
    fn adaptive_alpha_values() {
        assert_eq!(adaptive_alpha(2.0).unwrap(), 0.25);
        assert_eq!(adaptive_alpha(0.5).unwrap(), 0.5);
        assert_abs_diff_eq!(adaptive_alpha(10.0).unwrap(), 0.05, epsilon = 1e-15);
        assert_eq!(adaptive_alpha(0.0).unwrap(), 0.5);
        assert!(adaptive_alpha(-1.0).is_err());
        assert!(adaptive_alpha(f64::NAN).is_err());
    }

    #[test]
    fn alpha_mode_parsing() {
        assert_eq!("adaptive".parse::<AlphaMode>().unwrap(), AlphaMode::Adaptive);
        assert_eq!("fixed:0.3".parse::<AlphaMode>().unwrap(), AlphaMode::Fixed(0.3));
        assert!("fixed:1.5".parse::<AlphaMode>().is_err());
        assert!("sometimes".parse::<AlphaMode>().is_err());
    }

    #[test]
    fn equal_fc_weights_fall_back_to_full_mask() {
        let m = Model::from_parts(1, 4, 3, vec![1.0; 4], vec![0.0; 4], vec![0.7; 12], vec![0.0; 3])
            .unwrap();
        assert_eq!(relevant_mask(&m, 1), vec![0, 1, 2, 3]);
    }

    #[test]
    fn dominant_unit_is_the_only_relevant_one() {
        // class 0 weights (0, 0, 0, 5), class 1 all zero; unit 3 mean = 2.5 < 5
        let mut w2 = vec![0.0; 8];
        w2[3] = 5.0;
        let m = Model::from_parts(1, 4, 2, vec![1.0; 4], vec![0.0; 4], w2, vec![0.0; 2]).unwrap();
        assert_eq!(relevant_mask(&m, 0), vec![3]);
        // class 1 sits at or below the mean everywhere
        assert_eq!(relevant_mask(&m, 1), vec![0, 1, 2, 3]);
        let a = relevant_representation(&m, &[2.0], 0).unwrap();
        let b = relevant_representation(&m, &[-3.0], 0).unwrap();
        assert_eq!(a, vec![2.0]);
        assert_eq!(b.len(), a.len());
    }

    #[test]
    fn cosine_of_zero_vector_is_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        assert_abs_diff_eq!(cosine(&[1.0, 2.0], &[2.0, 4.0]), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn score_reduces_to_loss_at_alpha_zero() {
        let m = separating_model(3.0);
        let mut mem = EpisodicMemory::new(4).unwrap();
        mem.try_insert(ex(0, vec![1.0, 0.0], 0, 0));
        let x = [0.5, 0.0];
        let loss = m.loss(&x, crate::nnkit::Target::Hard(1)).unwrap();
        assert_eq!(sample_score(&m, &mem, &x, 1, 0.0).unwrap(), loss);
    }

    #[test]
    fn score_is_zero_at_alpha_one_with_no_peers() {
        let m = separating_model(3.0);
        let mem = EpisodicMemory::new(4).unwrap();
        assert_eq!(sample_score(&m, &mem, &[0.5, 0.0], 1, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn score_of_duplicate_under_uniform_model() {
        // W2 = 0 gives uniform probs over 10 classes and loss ln 10; the
        // relevant mask falls back to the full (non-zero) representation.
        let m = Model::from_parts(
            2,
            3,
            10,
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
            vec![0.0; 3],
            vec![0.0; 30],
            vec![0.0; 10],
        )
        .unwrap();
        let mut mem = EpisodicMemory::new(4).unwrap();
        mem.try_insert(ex(0, vec![1.0, 2.0], 3, 3));
        let s = sample_score(&m, &mem, &[1.0, 2.0], 3, 0.5).unwrap();
        assert_abs_diff_eq!(s, 0.5 * 10f64.ln() + 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s, 1.6513, epsilon = 1e-4);
    }

    #[test]
    fn puridiver_fills_before_evicting() {
        let m = separating_model(3.0);
        let mut mem = EpisodicMemory::new(3).unwrap();
        for i in 0..3 {
            let out = puridiver_update(&mut mem, ex(i, vec![1.0, 0.0], 0, 0), &m, 0.3).unwrap();
            assert!(out.is_none());
        }
        let out = puridiver_update(&mut mem, ex(9, vec![1.0, 0.0], 0, 0), &m, 0.3).unwrap();
        assert!(out.is_some());
        assert_eq!(mem.len(), 3);
    }

    #[test]
    fn pure_loss_retention_evicts_high_loss() {
        let m = separating_model(5.0);
        let mut mem = EpisodicMemory::new(1).unwrap();
        // stored example is labelled against the model
        mem.try_insert(ex(0, vec![1.0, 0.0], 1, 0));
        let stored_loss = m.loss(&[1.0, 0.0], crate::nnkit::Target::Hard(1)).unwrap();
        let cand_loss = m.loss(&[1.0, 0.0], crate::nnkit::Target::Hard(0)).unwrap();
        assert!(stored_loss > 4.9 && cand_loss < 0.1);
        let gone = puridiver_update(&mut mem, ex(1, vec![1.0, 0.0], 0, 0), &m, 0.0)
            .unwrap()
            .unwrap();
        assert_eq!(gone.id, 0);
        assert_eq!(mem.entries()[0].example.id, 1);
    }

    #[test]
    fn eviction_ties_drop_the_oldest() {
        let m = Model::zeros(2, 2, 2);
        let mut mem = EpisodicMemory::new(2).unwrap();
        mem.try_insert(ex(5, vec![1.0, 0.0], 0, 0));
        mem.try_insert(ex(6, vec![1.0, 0.0], 1, 1));
        let gone = puridiver_update(&mut mem, ex(7, vec![1.0, 0.0], 1, 1), &m, 0.0)
            .unwrap()
            .unwrap();
        assert_eq!(gone.id, 5);
    }

    #[test]
    fn cached_and_fresh_scoring_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m = Model::new(3, 6, 3, &mut rng);
        let mut a = EpisodicMemory::new(8).unwrap();
        let mut b = EpisodicMemory::new(8).unwrap();
        let mut cache = ScoreCache::new();
        for id in 0..60 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let label = rng.random_range(0..3);
            let e = ex(id, x, label, label);
            let ga = puridiver_update(&mut a, e.clone(), &m, 0.4).unwrap();
            let gb = puridiver_update_cached(&mut b, e, &m, 0.4, &mut cache).unwrap();
            assert_eq!(ga.map(|g| g.id), gb.map(|g| g.id));
        }
        assert_eq!(a, b);
    }

    #[test]
    fn scaling_scores_keeps_the_eviction_choice() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Model::new(3, 6, 3, &mut rng);
        let mut mem = EpisodicMemory::new(12).unwrap();
        for id in 0..12 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            mem.try_insert(ex(id, x, (id % 3) as usize, 0));
        }
        let scores = member_scores(&m, &mem, 0.3, &mut ScoreCache::new()).unwrap();
        let scaled: Vec<f64> = scores.iter().map(|s| s * 7.5).collect();
        assert_eq!(eviction_choice(&mem, &scores), eviction_choice(&mem, &scaled));
    }

    #[test]
    fn mislabeled_duplicates_are_filtered_at_alpha_zero() {
        let m = separating_model(6.0);
        let mut mem = EpisodicMemory::new(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for id in 0..80u64 {
            let truth = (id % 2) as usize;
            let sign = if truth == 0 { 1.0 } else { -1.0 };
            let x = vec![sign * rng.random_range(0.5..2.0), 0.0];
            // every other pair is a mislabeled duplicate
            let noisy = if (id / 2) % 2 == 0 { truth } else { 1 - truth };
            puridiver_update(&mut mem, ex(id, x, noisy, truth), &m, 0.0).unwrap();
        }
        assert!(mem.examples().all(Example::is_clean));
    }

    #[test]
    fn reservoir_fills_then_replaces() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mem = EpisodicMemory::new(3).unwrap();
        for n in 1..=3u64 {
            assert!(reservoir_update(&mut mem, ex(n, vec![0.0], 0, 0), n, &mut rng).is_none());
        }
        for n in 4..=50u64 {
            assert!(reservoir_update(&mut mem, ex(n, vec![0.0], 0, 0), n, &mut rng).is_some());
            assert_eq!(mem.len(), 3);
        }
    }

    #[test]
    fn reservoir_replays_with_fixed_rng() {
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mem = EpisodicMemory::new(5).unwrap();
            for n in 1..=100u64 {
                reservoir_update(&mut mem, ex(n, vec![0.0], 0, 0), n, &mut rng);
            }
            mem.snapshot()
        };
        assert_eq!(run(4), run(4));
    }

    #[test]
    fn greedy_balance_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mem = EpisodicMemory::new(4).unwrap();
        assert!(greedy_balanced_update(&mut mem, ex(0, vec![0.0], 0, 0), &mut rng).is_none());
        mem.try_insert(ex(1, vec![0.0], 0, 0));
        mem.try_insert(ex(2, vec![0.0], 0, 0));
        mem.try_insert(ex(3, vec![0.0], 1, 1));
        let gone = greedy_balanced_update(&mut mem, ex(4, vec![0.0], 1, 1), &mut rng).unwrap();
        assert_eq!(gone.noisy_label, 0);
        let counts = mem.class_counts();
        assert_eq!(counts[&0], 2);
        assert_eq!(counts[&1], 2);
    }

    #[test]
    fn greedy_balance_holds_under_round_robin_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mem = EpisodicMemory::new(10).unwrap();
        for id in 0..600u64 {
            let label = (id % 3) as usize;
            greedy_balanced_update(&mut mem, ex(id, vec![0.0], label, label), &mut rng);
            if mem.is_full() {
                let counts = mem.class_counts();
                let max = counts.values().max().unwrap();
                let min = counts.values().min().unwrap();
                assert!(max - min <= 1, "{counts:?}");
            }
        }
    }

    #[derive(Debug, Clone)]
    enum Op {
        Puri(u64, usize, f64),
        Reservoir(u64, usize),
        Greedy(u64, usize),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u64..1000, 0usize..4, 0.0f64..1.0).prop_map(|(s, l, a)| Op::Puri(s, l, a)),
            (0u64..1000, 0usize..4).prop_map(|(s, l)| Op::Reservoir(s, l)),
            (0u64..1000, 0usize..4).prop_map(|(s, l)| Op::Greedy(s, l)),
        ]
    }

    proptest! {
        #[test]
        fn capacity_and_index_survive_any_update_sequence(
            cap in 1usize..8,
            ops in prop::collection::vec(op(), 1..60),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(cap as u64);
            let model = Model::new(2, 4, 4, &mut rng);
            let mut mem = EpisodicMemory::new(cap).unwrap();
            for (n, op) in ops.into_iter().enumerate() {
                let id = n as u64;
                match op {
                    Op::Puri(s, l, a) => {
                        let x = vec![(s % 7) as f64 - 3.0, (s % 5) as f64 - 2.0];
                        puridiver_update(&mut mem, ex(id, x, l, l), &model, a).unwrap();
                    }
                    Op::Reservoir(s, l) => {
                        let x = vec![s as f64, 0.0];
                        reservoir_update(&mut mem, ex(id, x, l, l), id + 1, &mut rng);
                    }
                    Op::Greedy(s, l) => {
                        let x = vec![s as f64, 0.0];
                        greedy_balanced_update(&mut mem, ex(id, x, l, l), &mut rng);
                    }
                }
                prop_assert!(mem.len() <= cap);
                prop_assert!(mem.check_invariants().is_ok());
            }
        }

        #[test]
        fn score_rises_with_loss(seed in 0u64..500, bump in 0.1f64..3.0, alpha in 0.0f64..0.99) {
            // Raising another class's output bias raises the candidate's loss
            // while leaving representations and masks untouched.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model = Model::new(3, 5, 3, &mut rng);
            let mut mem = EpisodicMemory::new(6).unwrap();
            for id in 0..6u64 {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                mem.try_insert(ex(id, x, (id % 3) as usize, 0));
            }
            let x = [0.3, -1.0, 0.8];
            let before = sample_score(&model, &mem, &x, 0, alpha).unwrap();
            model.parameters_mut()[3][1] += bump;
            let after = sample_score(&model, &mem, &x, 0, alpha).unwrap();
            prop_assert!(after > before);
        }

        #[test]
        fn adaptive_alpha_range(loss in 1e-9f64..1e6) {
            let a = adaptive_alpha(loss).unwrap();
            prop_assert!(a > 0.0 && a <= 0.5);
        }
    }
}
