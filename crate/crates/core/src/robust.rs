//! Robust use of a possibly contaminated memory.
//!
//! The memory is split by a two-component GMM on per-example loss into a
//! clean set and a noisy set; the noisy set is split again by a GMM on
//! predictive uncertainty into examples that get soft re-labels and
//! examples that are only used through a consistency penalty.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::{
    argmax, cross_entropy, cross_entropy_hard, predictive_uncertainty, Gradients, Model,
    Target, TrainSample,
};
use crate::seed::rng_for;
use crate::stream::Example;

pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Weight below which a floored component counts as collapsed.
const COLLAPSE_WEIGHT: f64 = 1e-3;

// ---------------------------------------------------------------------------
// 1-D two-component Gaussian mixture

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub mean_small: f64,
    pub mean_large: f64,
    pub var_small: f64,
    pub var_large: f64,
    pub weight_small: f64,
    pub weight_large: f64,
    /// Set when the values carry no bimodal structure (all identical, or a
    /// component collapsed). Callers then treat everything as the small side.
    pub degenerate: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

struct Components {
    mean: [f64; 2],
    var: [f64; 2],
    weight: [f64; 2],
}

impl Components {
    fn log_joint(&self, x: f64, k: usize) -> f64 {
        self.weight[k].ln() + log_normal(x, self.mean[k], self.var[k])
    }
}

pub fn fit_gmm_1d(values: &[f64], opts: EmOptions) -> Result<GmmFit> {
    fit_gmm_1d_traced(values, opts).map(|(fit, _)| fit)
}

/// EM fit that also returns the log-likelihood of every visited iterate.
///
/// Initialization: means at the 25th/75th percentiles (min/max when those
/// coincide), equal weights, shared variance equal to the sample variance.
pub fn fit_gmm_1d_traced(values: &[f64], opts: EmOptions) -> Result<(GmmFit, Vec<f64>)> {
    if values.len() < 2 {
        return Err(Error::Input(format!(
            "GMM fit needs at least 2 values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("GMM fit on non-finite values".into()));
    }
    let n = values.len() as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if sorted[0] == sorted[sorted.len() - 1] || var <= VARIANCE_FLOOR {
        let v = sorted[0];
        let fit = GmmFit {
            mean_small: v,
            mean_large: v,
            var_small: VARIANCE_FLOOR,
            var_large: VARIANCE_FLOOR,
            weight_small: 0.5,
            weight_large: 0.5,
            degenerate: true,
            iterations: 0,
        };
        return Ok((fit, Vec::new()));
    }
    let (mut lo, mut hi) = (percentile(&sorted, 0.25), percentile(&sorted, 0.75));
    if lo == hi {
        lo = sorted[0];
        hi = sorted[sorted.len() - 1];
    }
    let mut c = Components {
        mean: [lo, hi],
        var: [var, var],
        weight: [0.5, 0.5],
    };

    let mut trace = Vec::new();
    let mut resp = vec![0.0; values.len()];
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        iterations += 1;
        // E-step
        let mut ll = 0.0;
        for (r, &x) in resp.iter_mut().zip(values) {
            let l0 = c.log_joint(x, 0);
            let l1 = c.log_joint(x, 1);
            let lse = log_add_exp(l0, l1);
            ll += lse;
            *r = (l0 - lse).exp();
        }
        let converged = trace.last().is_some_and(|&prev: &f64| (ll - prev).abs() < opts.tol);
        trace.push(ll);
        if converged {
            break;
        }
        // M-step
        for k in 0..2 {
            let w = |r: f64| if k == 0 { r } else { 1.0 - r };
            let nk: f64 = resp.iter().map(|&r| w(r)).sum();
            c.weight[k] = nk / n;
            if nk <= f64::MIN_POSITIVE {
                c.var[k] = VARIANCE_FLOOR;
                continue;
            }
            let mk = resp.iter().zip(values).map(|(&r, &x)| w(r) * x).sum::<f64>() / nk;
            let vk = resp
                .iter()
                .zip(values)
                .map(|(&r, &x)| w(r) * (x - mk) * (x - mk))
                .sum::<f64>()
                / nk;
            c.mean[k] = mk;
            c.var[k] = vk.max(VARIANCE_FLOOR);
        }
    }

    let (s, l) = if c.mean[0] <= c.mean[1] { (0, 1) } else { (1, 0) };
    let collapsed = (0..2).any(|k| c.weight[k] < COLLAPSE_WEIGHT && c.var[k] <= VARIANCE_FLOOR * 1.000_001);
    let fit = GmmFit {
        mean_small: c.mean[s],
        mean_large: c.mean[l],
        var_small: c.var[s],
        var_large: c.var[l],
        weight_small: c.weight[s],
        weight_large: c.weight[l],
        degenerate: collapsed,
        iterations,
    };
    Ok((fit, trace))
}

impl GmmFit {
    fn log_joints(&self, value: f64) -> (f64, f64) {
        (
            self.weight_small.ln() + log_normal(value, self.mean_small, self.var_small),
            self.weight_large.ln() + log_normal(value, self.mean_large, self.var_large),
        )
    }

    /// Mixture log-likelihood of `values`.
    pub fn log_likelihood(&self, values: &[f64]) -> f64 {
        values
            .iter()
            .map(|&v| {
                let (a, b) = self.log_joints(v);
                log_add_exp(a, b)
            })
            .sum()
    }
}

/// Bayes posterior of the small-mean component. Degenerate fits return 1.
pub fn posterior_small(gmm: &GmmFit, value: f64) -> f64 {
    if gmm.degenerate {
        return 1.0;
    }
    let (s, l) = gmm.log_joints(value);
    1.0 / (1.0 + (l - s).exp())
}

pub fn posterior_large(gmm: &GmmFit, value: f64) -> f64 {
    if gmm.degenerate {
        return 0.0;
    }
    let (s, l) = gmm.log_joints(value);
    1.0 / (1.0 + (s - l).exp())
}

/// Posterior used for set membership: `value` is clamped into
/// `[mean_small, mean_large]` first, so a value below the small mean is
/// never judged less "small" than the mean itself (and symmetrically for
/// the large side). Without this, unequal variances let the wider
/// component win in the far tails.
pub fn small_side_posterior(gmm: &GmmFit, value: f64) -> f64 {
    posterior_small(gmm, value.clamp(gmm.mean_small, gmm.mean_large))
}

// ---------------------------------------------------------------------------
// Partitioning

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RobustMode {
    /// Plain replay on the stored labels.
    None,
    /// Clean set plus every noisy example re-labeled.
    RelabelOnly,
    /// Clean set plus every noisy example used only for consistency.
    ConsistencyOnly,
    #[default]
    Full,
}

impl RobustMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RobustMode::None => "none",
            RobustMode::RelabelOnly => "relabel_only",
            RobustMode::ConsistencyOnly => "consistency_only",
            RobustMode::Full => "full",
        }
    }

    pub const ALL: [RobustMode; 4] = [
        RobustMode::None,
        RobustMode::RelabelOnly,
        RobustMode::ConsistencyOnly,
        RobustMode::Full,
    ];
}

impl std::str::FromStr for RobustMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RobustMode::None),
            "relabel_only" => Ok(RobustMode::RelabelOnly),
            "consistency_only" => Ok(RobustMode::ConsistencyOnly),
            "full" => Ok(RobustMode::Full),
            other => Err(Error::Config(format!("unknown robust_mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSplit {
    /// Positions into the input slice.
    pub clean: Vec<usize>,
    pub noisy: Vec<usize>,
    pub losses: Vec<f64>,
    pub gmm: Option<GmmFit>,
}

/// Below this mean loss a mixture component still fits its stored labels
/// (probability above one half), so it is not treated as the noisy side.
pub const FIT_LOSS: f64 = std::f64::consts::LN_2;

/// Clean iff the small-loss posterior is at least 0.5. When even the
/// large-loss component has mean below [`FIT_LOSS`], everything is clean.
pub fn split_clean_noisy(examples: &[&Example], model: &Model) -> Result<LossSplit> {
    if examples.is_empty() {
        return Err(Error::Input("cannot split an empty memory".into()));
    }
    let losses = examples
        .iter()
        .map(|e| model.loss(&e.x, Target::Hard(e.noisy_label)))
        .collect::<Result<Vec<_>>>()?;
    if losses.len() < 2 {
        return Ok(LossSplit {
            clean: vec![0],
            noisy: Vec::new(),
            losses,
            gmm: None,
        });
    }
    let gmm = fit_gmm_1d(&losses, EmOptions::default())?;
    let (clean, noisy) = if gmm.mean_large < FIT_LOSS {
        ((0..examples.len()).collect(), Vec::new())
    } else {
        (0..examples.len()).partition(|&i| small_side_posterior(&gmm, losses[i]) >= 0.5)
    };
    Ok(LossSplit {
        clean,
        noisy,
        losses,
        gmm: Some(gmm),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintySplit {
    /// `(position, posterior of the low-uncertainty component)`.
    pub relabel: Vec<(usize, f64)>,
    pub unlabeled: Vec<usize>,
    pub uncertainties: Vec<f64>,
    pub gmm: Option<GmmFit>,
}

/// Splits the noisy positions by predictive uncertainty; the GMM is fit on
/// the noisy set only. Fewer than two members all go to the re-label set.
pub fn split_relabel_unlabeled(
    examples: &[&Example],
    noisy: &[usize],
    model: &Model,
) -> Result<UncertaintySplit> {
    let uncertainties = noisy
        .iter()
        .map(|&i| Ok(predictive_uncertainty(&model.probs(&examples[i].x)?)))
        .collect::<Result<Vec<_>>>()?;
    if noisy.len() < 2 {
        return Ok(UncertaintySplit {
            relabel: noisy.iter().map(|&i| (i, 1.0)).collect(),
            unlabeled: Vec::new(),
            uncertainties,
            gmm: None,
        });
    }
    let gmm = fit_gmm_1d(&uncertainties, EmOptions::default())?;
    let mut relabel = Vec::new();
    let mut unlabeled = Vec::new();
    for (&i, &u) in noisy.iter().zip(&uncertainties) {
        let p = small_side_posterior(&gmm, u);
        if p >= 0.5 {
            relabel.push((i, p));
        } else {
            unlabeled.push(i);
        }
    }
    Ok(UncertaintySplit {
        relabel,
        unlabeled,
        uncertainties,
        gmm: Some(gmm),
    })
}

/// `p_u * probs + (1 - p_u) * onehot(noisy_label)`.
pub fn relabel_distribution(probs: &[f64], noisy_label: usize, p_u: f64) -> Vec<f64> {
    let p_u = p_u.clamp(0.0, 1.0);
    let mut out: Vec<f64> = probs.iter().map(|p| p_u * p).collect();
    out[noisy_label] += 1.0 - p_u;
    out
}

pub fn relabel(example: &Example, model: &Model, p_u: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&p_u) {
        return Err(Error::Input(format!("p_u must be in [0, 1], got {p_u}")));
    }
    let probs = model.probs(&example.x)?;
    Ok(relabel_distribution(&probs, example.noisy_label, p_u))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Relabeled {
    pub pos: usize,
    pub p_u: f64,
    pub soft_label: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryPartition {
    pub clean: Vec<usize>,
    pub relabel: Vec<Relabeled>,
    pub unlabeled: Vec<usize>,
}

impl MemoryPartition {
    /// Every position in `0..len` appears in exactly one set.
    pub fn check(&self, len: usize) -> Result<()> {
        let mut seen = vec![false; len];
        let all = self
            .clean
            .iter()
            .copied()
            .chain(self.relabel.iter().map(|r| r.pos))
            .chain(self.unlabeled.iter().copied());
        for p in all {
            match seen.get_mut(p) {
                Some(s) if !*s => *s = true,
                Some(_) => return Err(Error::Input(format!("position {p} in two sets"))),
                None => return Err(Error::Input(format!("position {p} out of range"))),
            }
        }
        if seen.iter().all(|&s| s) {
            Ok(())
        } else {
            Err(Error::Input("partition does not cover the memory".into()))
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.clean.len(), self.relabel.len(), self.unlabeled.len())
    }
}

/// Builds the clean / re-label / unlabeled partition for `mode`.
pub fn partition_memory(examples: &[&Example], model: &Model, mode: RobustMode) -> Result<MemoryPartition> {
    if examples.is_empty() {
        return Err(Error::Input("cannot partition an empty memory".into()));
    }
    if mode == RobustMode::None {
        return Ok(MemoryPartition {
            clean: (0..examples.len()).collect(),
            ..Default::default()
        });
    }
    let loss_split = split_clean_noisy(examples, model)?;
    let unc = split_relabel_unlabeled(examples, &loss_split.noisy, model)?;
    let soft = |pos: usize, p_u: f64| -> Result<Relabeled> {
        Ok(Relabeled {
            pos,
            p_u,
            soft_label: relabel(examples[pos], model, p_u)?,
        })
    };
    let mut part = MemoryPartition {
        clean: loss_split.clean,
        ..Default::default()
    };
    match mode {
        RobustMode::Full => {
            part.relabel = unc
                .relabel
                .iter()
                .map(|&(pos, p)| soft(pos, p))
                .collect::<Result<_>>()?;
            part.unlabeled = unc.unlabeled;
        }
        RobustMode::RelabelOnly => {
            // every noisy example is re-labeled with its own confidence
            part.relabel = loss_split
                .noisy
                .iter()
                .zip(&unc.uncertainties)
                .map(|(&pos, &u)| {
                    let p = match &unc.gmm {
                        Some(g) => small_side_posterior(g, u),
                        None => 1.0,
                    };
                    soft(pos, p)
                })
                .collect::<Result<_>>()?;
        }
        RobustMode::ConsistencyOnly => part.unlabeled = loss_split.noisy,
        RobustMode::None => unreachable!(),
    }
    Ok(part)
}

// ---------------------------------------------------------------------------
// Feature-space augmentation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Augmenter {
    /// Per-feature scale for the additive noise.
    pub feature_std: Vec<f64>,
    pub weak_sigma: f64,
    pub strong_drop: f64,
    pub strong_sigma: f64,
}

impl Augmenter {
    pub fn new(feature_std: Vec<f64>) -> Self {
        Self {
            feature_std,
            weak_sigma: 0.05,
            strong_drop: 0.2,
            strong_sigma: 0.15,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            feature_std: vec![0.0; dim],
            weak_sigma: 0.0,
            strong_drop: 0.0,
            strong_sigma: 0.0,
        }
    }

    /// Additive Gaussian noise, `sigma_w * std` per feature.
    pub fn weak<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        self.jitter(x, self.weak_sigma, rng)
    }

    /// Coordinate dropout with probability `p_s`, then `sigma_s * std` noise.
    pub fn strong<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let dropped: Vec<f64> = x
            .iter()
            .map(|&v| {
                if self.strong_drop > 0.0 && rng.random_bool(self.strong_drop) {
                    0.0
                } else {
                    v
                }
            })
            .collect();
        self.jitter(&dropped, self.strong_sigma, rng)
    }

    fn jitter<R: Rng + ?Sized>(&self, x: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
        if sigma == 0.0 {
            return x.to_vec();
        }
        x.iter()
            .zip(&self.feature_std)
            .map(|(&v, &s)| {
                let z: f64 = rng.sample(StandardNormal);
                v + sigma * s * z
            })
            .collect()
    }
}

pub fn weak_aug<R: Rng + ?Sized>(aug: &Augmenter, x: &[f64], rng: &mut R) -> Vec<f64> {
    aug.weak(x, rng)
}

pub fn strong_aug<R: Rng + ?Sized>(aug: &Augmenter, x: &[f64], rng: &mut R) -> Vec<f64> {
    aug.strong(x, rng)
}

// ---------------------------------------------------------------------------
// Losses

/// Adds `scale * grad ||p(strong) - p(weak)||_2` and returns the norm.
/// Both branches are differentiated.
fn accumulate_consistency<R: Rng + ?Sized>(
    model: &Model,
    x: &[f64],
    aug: &Augmenter,
    rng: &mut R,
    scale: f64,
    grads: Option<&mut Gradients>,
) -> Result<f64> {
    let xs = aug.strong(x, rng);
    let xw = aug.weak(x, rng);
    let fs = model.forward(&xs)?;
    let fw = model.forward(&xw)?;
    let diff: Vec<f64> = fs.probs.iter().zip(&fw.probs).map(|(a, b)| a - b).collect();
    let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    if let Some(grads) = grads {
        if norm > 0.0 {
            let unit: Vec<f64> = diff.iter().map(|d| d / norm).collect();
            model.backprop_probs(&xs, &fs, &unit, scale, grads);
            model.backprop_probs(&xw, &fw, &unit, -scale, grads);
        }
    }
    Ok(norm)
}

/// Mean L2 distance between predictions on strong and weak views.
pub fn consistency_loss<R: Rng + ?Sized>(
    unlabeled: &[&Example],
    model: &Model,
    aug: &Augmenter,
    rng: &mut R,
) -> Result<f64> {
    if unlabeled.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for e in unlabeled {
        total += accumulate_consistency(model, &e.x, aug, rng, 0.0, None)?;
    }
    Ok(total / unlabeled.len() as f64)
}

/// Mean cross-entropy over the clean set (stored labels) and the re-label
/// set (soft labels), normalised by their combined size.
pub fn classification_loss(
    clean: &[&Example],
    relabeled: &[(&Example, &[f64])],
    model: &Model,
) -> Result<f64> {
    let n = clean.len() + relabeled.len();
    if n == 0 {
        log::warn!("classification loss over empty clean and re-label sets");
        return Ok(0.0);
    }
    let mut total = 0.0;
    for e in clean {
        total += cross_entropy_hard(&model.probs(&e.x)?, e.noisy_label);
    }
    for (e, soft) in relabeled {
        total += cross_entropy(&model.probs(&e.x)?, soft);
    }
    Ok(total / n as f64)
}

// ---------------------------------------------------------------------------
// Memory training

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochParams {
    pub mode: RobustMode,
    pub eta: f64,
    pub lr: f64,
    pub batch_size: usize,
}

/// Per-epoch partition audit. Purities use ground truth and are `None`
/// for empty sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionAudit {
    pub epoch: usize,
    pub clean: usize,
    pub relabel: usize,
    pub unlabeled: usize,
    pub purity_clean: Option<f64>,
    pub purity_relabel: Option<f64>,
    pub purity_unlabeled: Option<f64>,
    /// Share of the re-label set whose soft-label argmax is the true class.
    pub relabel_precision: Option<f64>,
    pub mean_loss: f64,
}

fn purity_of(examples: &[&Example], positions: impl Iterator<Item = usize>) -> Option<f64> {
    let (mut n, mut ok) = (0usize, 0usize);
    for p in positions {
        n += 1;
        ok += usize::from(examples[p].is_clean());
    }
    (n > 0).then(|| ok as f64 / n as f64)
}

impl PartitionAudit {
    pub fn new(epoch: usize, examples: &[&Example], part: &MemoryPartition, mean_loss: f64) -> Self {
        let precision = if part.relabel.is_empty() {
            None
        } else {
            let hits = part
                .relabel
                .iter()
                .filter(|r| argmax(&r.soft_label) == examples[r.pos].true_label)
                .count();
            Some(hits as f64 / part.relabel.len() as f64)
        };
        Self {
            epoch,
            clean: part.clean.len(),
            relabel: part.relabel.len(),
            unlabeled: part.unlabeled.len(),
            purity_clean: purity_of(examples, part.clean.iter().copied()),
            purity_relabel: purity_of(examples, part.relabel.iter().map(|r| r.pos)),
            purity_unlabeled: purity_of(examples, part.unlabeled.iter().copied()),
            relabel_precision: precision,
            mean_loss,
        }
    }
}

/// Cycles through a shuffled index list, `take` items at a time.
struct Cycler {
    order: Vec<usize>,
    cursor: usize,
}

impl Cycler {
    fn new<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Self { order, cursor: 0 }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        (0..k)
            .map(|_| {
                let v = self.order[self.cursor % self.order.len()];
                self.cursor += 1;
                v
            })
            .collect()
    }
}

fn share(batch_size: usize, set: usize, total: usize) -> usize {
    if set == 0 {
        0
    } else {
        (batch_size * set).div_ceil(total)
    }
}

/// One pass over a fixed partition. Each step draws co-indexed batches from
/// C, R and U sized in proportion to the sets and takes one SGD step on
/// `l_cls + eta * l_reg`. Returns the mean step loss.
///
/// C, R, U and the augmentations draw from independent child streams of
/// `rng`, so with `eta = 0` the trajectory equals training without U.
pub fn train_on_partition<R: Rng + ?Sized>(
    examples: &[&Example],
    part: &MemoryPartition,
    model: &mut Model,
    params: &EpochParams,
    aug: &Augmenter,
    rng: &mut R,
) -> Result<f64> {
    if params.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let total = examples.len();
    if total == 0 {
        return Err(Error::Input("cannot train on an empty memory".into()));
    }
    let base = rng.next_u64();
    let mut rng_c = rng_for(base, "clean");
    let mut rng_r = rng_for(base, "relabel");
    let mut rng_u = rng_for(base, "unlabeled");
    let mut rng_aug = rng_for(base, "augment");

    let mut cyc_c = Cycler::new(part.clean.len(), &mut rng_c);
    let mut cyc_r = Cycler::new(part.relabel.len(), &mut rng_r);
    let use_u = params.eta != 0.0 && !part.unlabeled.is_empty();
    let mut cyc_u = Cycler::new(if use_u { part.unlabeled.len() } else { 0 }, &mut rng_u);

    let k_c = share(params.batch_size, part.clean.len(), total);
    let k_r = share(params.batch_size, part.relabel.len(), total);
    let k_u = share(params.batch_size, part.unlabeled.len(), total);
    let steps = total.div_ceil(params.batch_size);

    let mut loss_sum = 0.0;
    for _ in 0..steps {
        let bc: Vec<usize> = cyc_c.take(k_c).into_iter().map(|i| part.clean[i]).collect();
        let br: Vec<&Relabeled> = cyc_r.take(k_r).into_iter().map(|i| &part.relabel[i]).collect();
        let bu: Vec<usize> = if use_u {
            cyc_u.take(k_u).into_iter().map(|i| part.unlabeled[i]).collect()
        } else {
            Vec::new()
        };

        let mut grads = Gradients::zeros_like(model);
        let mut step_loss = 0.0;
        let n_sup = bc.len() + br.len();
        if n_sup > 0 {
            let scale = 1.0 / n_sup as f64;
            for &p in &bc {
                let e = examples[p];
                let s = TrainSample {
                    id: e.id,
                    x: &e.x,
                    target: Target::Hard(e.noisy_label),
                    weight: 1.0,
                };
                step_loss += scale * model.accumulate_cross_entropy(&s, scale, &mut grads)?;
            }
            for r in &br {
                let e = examples[r.pos];
                let s = TrainSample {
                    id: e.id,
                    x: &e.x,
                    target: Target::Soft(&r.soft_label),
                    weight: 1.0,
                };
                step_loss += scale * model.accumulate_cross_entropy(&s, scale, &mut grads)?;
            }
        }
        if !bu.is_empty() {
            let scale = params.eta / bu.len() as f64;
            for &p in &bu {
                let e = examples[p];
                let norm =
                    accumulate_consistency(model, &e.x, aug, &mut rng_aug, scale, Some(&mut grads))?;
                step_loss += scale * norm;
            }
        }
        if n_sup == 0 && bu.is_empty() {
            continue;
        }
        if !grads.is_finite() {
            let id = bc
                .first()
                .map(|&p| examples[p].id)
                .or_else(|| br.first().map(|r| examples[r.pos].id))
                .or_else(|| bu.first().map(|&p| examples[p].id))
                .unwrap_or(0);
            return Err(Error::NonFinite { id });
        }
        model.apply_gradients(&grads, params.lr);
        loss_sum += step_loss;
    }
    Ok(loss_sum / steps as f64)
}

/// One epoch of memory training: re-partition under the current model,
/// then [`train_on_partition`].
pub fn memory_train_epoch<R: Rng + ?Sized>(
    examples: &[&Example],
    model: &mut Model,
    params: &EpochParams,
    aug: &Augmenter,
    epoch: usize,
    rng: &mut R,
) -> Result<PartitionAudit> {
    let part = partition_memory(examples, model, params.mode)?;
    part.check(examples.len())?;
    let mut audit = PartitionAudit::new(epoch, examples, &part, 0.0);
    audit.mean_loss = train_on_partition(examples, &part, model, params, aug, rng)?;
    Ok(audit)
}
