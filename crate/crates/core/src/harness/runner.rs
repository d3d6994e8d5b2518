//! The online experiment loop, sweeps and result persistence.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::data::{generate_synthetic_full, load_dataset_csv};
use crate::error::{Error, Result};
use crate::memory::{
    greedy_balanced_update, puridiver_update_cached, reservoir_update, AlphaMode, EpisodicMemory,
    SamplerKind, ScoreCache, SnapshotEntry,
};
use crate::metrics::{evaluate_accuracy, memory_diversity, memory_purity, RunRecord, METRICS_HEADER};
use crate::nnkit::{Model, Target, TrainSample};
use crate::robust::{memory_train_epoch, Augmenter, EpochParams, PartitionAudit};
use crate::seed::rng_for;
use crate::stream::{
    inject_asymmetric_noise, inject_symmetric_noise, split_blurry_tasks, train_test_split, ClassMap,
    Dataset, Example, NoiseType, TaskStream,
};

/// Everything a run needs that does not depend on the sampler, the robust
/// mode or α. Built once per seed and shared across a sweep.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    /// Training split with injected label noise.
    pub train: Dataset,
    /// Clean test split.
    pub test: Dataset,
    pub tasks: Vec<TaskStream>,
    /// Jointly trained model on the clean training split, used for diversity.
    pub oracle: Model,
}

/// Loads or synthesizes data, splits it, trains the oracle, injects noise
/// and cuts the blurry task stream.
pub fn prepare(config: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    config.validate()?;
    let full = if config.is_synthetic() {
        generate_synthetic_full(&config.synthetic_spec(), seed)?
    } else {
        load_dataset_csv(Path::new(&config.dataset), Some(config.classes))?
    };
    if full.dim() != config.dim {
        return Err(Error::Config(format!(
            "dataset has {} features but dim = {}",
            full.dim(),
            config.dim
        )));
    }
    let (clean_train, test) = train_test_split(&full, config.test_fraction, seed)?;
    let oracle = train_oracle(&clean_train, config, seed)?;
    let train = match config.noise_type {
        NoiseType::Symmetric => inject_symmetric_noise(&clean_train, config.noise_ratio, seed)?,
        NoiseType::Asymmetric => inject_asymmetric_noise(
            &clean_train,
            config.noise_ratio,
            &ClassMap::circular(config.classes),
            seed,
        )?,
    };
    let tasks = split_blurry_tasks(&train, config.tasks, config.blurry, seed)?;
    Ok(Prepared {
        seed,
        train,
        test,
        tasks,
        oracle,
    })
}

/// Plain shuffled mini-batch SGD on clean labels.
pub fn train_oracle(clean: &Dataset, config: &ExperimentConfig, seed: u64) -> Result<Model> {
    let mut init = rng_for(seed, "oracle-init");
    let mut model = Model::new(clean.dim(), config.hidden, clean.num_classes(), &mut init);
    let mut rng = rng_for(seed, "oracle");
    let mut order: Vec<usize> = (0..clean.len()).collect();
    for _ in 0..config.oracle_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TrainSample<'_>> = chunk
                .iter()
                .map(|&i| hard_sample(&clean.examples[i]))
                .collect();
            model.sgd_step(&batch, config.lr)?;
        }
    }
    Ok(model)
}

fn hard_sample(e: &Example) -> TrainSample<'_> {
    TrainSample {
        id: e.id,
        x: &e.x,
        target: Target::Hard(e.noisy_label),
        weight: 1.0,
    }
}

pub fn run_id(config: &ExperimentConfig, seed: u64) -> String {
    format!(
        "{}-{}-{}{}-{}-s{}",
        config.sampler.as_str(),
        config.robust_mode.as_str(),
        config.noise_type.as_str(),
        config.noise_ratio,
        config.alpha_mode.label(),
        seed
    )
}

/// One seed's records and side artifacts.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub run_id: String,
    pub records: Vec<RunRecord>,
    /// `(task, memory contents)` after each task's memory phase.
    pub snapshots: Vec<(usize, Vec<SnapshotEntry>)>,
    /// `(task, audit)` for every memory epoch.
    pub audits: Vec<(usize, PartitionAudit)>,
}

/// Runs the stream and memory phases for every task on prepared data.
pub fn run_prepared(config: &ExperimentConfig, prep: &Prepared) -> Result<RunOutput> {
    config.validate()?;
    let seed = prep.seed;
    let id = run_id(config, seed);
    let mut init = rng_for(seed, "model-init");
    let mut model = Model::new(prep.train.dim(), config.hidden, prep.train.num_classes(), &mut init);
    let mut sampler_rng = rng_for(seed, "memory-sampler");
    let mut memory = EpisodicMemory::new(config.memory_size)?;
    let mut cache = ScoreCache::new();
    let mut aug = Augmenter::new(prep.train.feature_std());
    aug.weak_sigma = config.weak_sigma;
    aug.strong_drop = config.strong_drop;
    aug.strong_sigma = config.strong_sigma;

    let mut n_seen: u64 = 0;
    let mut out = RunOutput {
        run_id: id.clone(),
        records: Vec::with_capacity(prep.tasks.len()),
        snapshots: Vec::new(),
        audits: Vec::new(),
    };

    for task in &prep.tasks {
        let (mut alpha_sum, mut alpha_n) = (0.0, 0usize);
        for batch in task.batches(config.batch_size) {
            let samples: Vec<TrainSample<'_>> = batch.iter().map(hard_sample).collect();
            let loss = model.sgd_step(&samples, config.lr)?;
            let alpha = config.alpha_mode.alpha_for(loss)?;
            alpha_sum += alpha;
            alpha_n += 1;
            cache.clear();
            for e in batch {
                n_seen += 1;
                match config.sampler {
                    SamplerKind::PuriDivER => {
                        puridiver_update_cached(&mut memory, e.clone(), &model, alpha, &mut cache)?;
                    }
                    SamplerKind::Reservoir => {
                        reservoir_update(&mut memory, e.clone(), n_seen, &mut sampler_rng);
                    }
                    SamplerKind::GreedyBalanced => {
                        greedy_balanced_update(&mut memory, e.clone(), &mut sampler_rng);
                    }
                }
            }
            memory.check_invariants()?;
        }

        if !memory.is_empty() && config.memory_epochs > 0 {
            let mut rng = rng_for(seed, &format!("memory-train-{}", task.task_id));
            let stored: Vec<&Example> = memory.examples().collect();
            for epoch in 0..config.memory_epochs {
                let params = EpochParams {
                    mode: config.robust_mode,
                    eta: config.eta,
                    lr: config.lr_schedule.at(config.lr, epoch, config.memory_epochs),
                    batch_size: config.batch_size,
                };
                let audit = memory_train_epoch(&stored, &mut model, &params, &aug, epoch, &mut rng)?;
                out.audits.push((task.task_id, audit));
            }
        }

        let accuracy = evaluate_accuracy(&model, &prep.test.examples)?;
        let (purity, diversity) = if memory.is_empty() {
            (0.0, 0.0)
        } else {
            (
                memory_purity(memory.examples())?,
                memory_diversity(memory.examples(), &prep.oracle)?,
            )
        };
        log::info!(
            "{id} task {}: accuracy {accuracy:.4} purity {purity:.4} diversity {diversity:.4}",
            task.task_id
        );
        out.records.push(RunRecord {
            run_id: id.clone(),
            task: task.task_id,
            sampler: config.sampler.as_str().to_string(),
            robust_mode: config.robust_mode.as_str().to_string(),
            noise_type: config.noise_type.as_str().to_string(),
            noise_ratio: config.noise_ratio,
            alpha_mode: config.alpha_mode.label(),
            accuracy,
            purity,
            diversity,
            alpha_mean: if alpha_n > 0 { alpha_sum / alpha_n as f64 } else { 0.0 },
            seed,
            timestamp: n_seen,
        });
        out.snapshots.push((task.task_id, memory.snapshot()));
    }
    Ok(out)
}

/// Prepares every configured seed (in parallel) in seed order.
pub fn prepare_all(config: &ExperimentConfig) -> Result<Vec<Prepared>> {
    config.validate()?;
    config.seeds.par_iter().map(|&s| prepare(config, s)).collect()
}

/// Runs one configuration over pre-built seeds. Output order follows `preps`.
pub fn run_with(config: &ExperimentConfig, preps: &[Prepared]) -> Result<Vec<RunOutput>> {
    config.validate()?;
    preps.par_iter().map(|p| run_prepared(config, p)).collect()
}

/// Runs every seed of `config` and returns the per-task records.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    let preps = prepare_all(config)?;
    Ok(run_with(config, &preps)?
        .into_iter()
        .flat_map(|o| o.records)
        .collect())
}

/// Runs `config` and writes every artifact into `dir`.
pub fn run_to_dir(config: &ExperimentConfig, dir: &Path) -> Result<Vec<RunRecord>> {
    let preps = prepare_all(config)?;
    let outputs = run_with(config, &preps)?;
    write_outputs(config, &outputs, dir)?;
    Ok(outputs.into_iter().flat_map(|o| o.records).collect())
}

/// Writes `metrics.csv` with one row per record.
pub fn write_results(records: &[RunRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(fs::File::create(dir.join("metrics.csv"))?);
    writeln!(out, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct AuditLine<'a> {
    run_id: &'a str,
    task: usize,
    #[serde(flatten)]
    audit: &'a PartitionAudit,
}

#[derive(Serialize)]
struct SnapshotFile<'a> {
    run_id: &'a str,
    task: usize,
    entries: &'a [SnapshotEntry],
}

/// Writes metrics, the resolved config, partition audits and memory snapshots.
pub fn write_outputs(config: &ExperimentConfig, outputs: &[RunOutput], dir: &Path) -> Result<()> {
    let records: Vec<RunRecord> = outputs.iter().flat_map(|o| o.records.clone()).collect();
    write_results(&records, dir)?;
    fs::write(dir.join("config.echo"), config.to_toml_string())?;
    let mut audits = BufWriter::new(fs::File::create(dir.join("partition_audit.jsonl"))?);
    for o in outputs {
        for (task, audit) in &o.audits {
            let line = AuditLine {
                run_id: &o.run_id,
                task: *task,
                audit,
            };
            writeln!(audits, "{}", serde_json::to_string(&line)?)?;
        }
        let run_dir = dir.join("runs").join(&o.run_id);
        fs::create_dir_all(&run_dir)?;
        for (task, entries) in &o.snapshots {
            let file = SnapshotFile {
                run_id: &o.run_id,
                task: *task,
                entries,
            };
            fs::write(
                run_dir.join(format!("memory_task{task}.json")),
                serde_json::to_string_pretty(&file)?,
            )?;
        }
    }
    audits.flush()?;
    Ok(())
}

/// Seed means of the final task's metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FinalSummary {
    pub accuracy: f64,
    pub purity: f64,
    pub diversity: f64,
    pub runs: usize,
}

/// Averages the last-task record of every run in `records`.
pub fn final_summary(records: &[RunRecord]) -> FinalSummary {
    let last = records.iter().map(|r| r.task).max().unwrap_or(0);
    let finals: Vec<&RunRecord> = records.iter().filter(|r| r.task == last).collect();
    let n = finals.len().max(1) as f64;
    FinalSummary {
        accuracy: finals.iter().map(|r| r.accuracy).sum::<f64>() / n,
        purity: finals.iter().map(|r| r.purity).sum::<f64>() / n,
        diversity: finals.iter().map(|r| r.diversity).sum::<f64>() / n,
        runs: finals.len(),
    }
}

/// One row of a static-α sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    #[serde(flatten)]
    pub summary: FinalSummary,
}

/// One run per `(α, seed)` with `alpha_mode = fixed:α`, sharing prepared data.
pub fn sweep_alpha_with(
    config: &ExperimentConfig,
    alphas: &[f64],
    preps: &[Prepared],
) -> Result<(Vec<SweepRow>, Vec<RunOutput>)> {
    if alphas.is_empty() {
        return Err(Error::Config("alpha sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    let mut outputs = Vec::new();
    for &alpha in alphas {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {alpha}")));
        }
        let cfg = ExperimentConfig {
            alpha_mode: AlphaMode::Fixed(alpha),
            ..config.clone()
        };
        let outs = run_with(&cfg, preps)?;
        let records: Vec<RunRecord> = outs.iter().flat_map(|o| o.records.clone()).collect();
        rows.push(SweepRow {
            alpha,
            summary: final_summary(&records),
        });
        outputs.extend(outs);
    }
    Ok((rows, outputs))
}

/// Runs the sweep and returns all records.
pub fn sweep_alpha(config: &ExperimentConfig, alphas: &[f64]) -> Result<Vec<RunRecord>> {
    let preps = prepare_all(config)?;
    let (_, outputs) = sweep_alpha_with(config, alphas, &preps)?;
    Ok(outputs.into_iter().flat_map(|o| o.records).collect())
}

/// Runs the sweep and writes the usual artifacts plus `alpha_sweep.csv`.
pub fn sweep_alpha_to_dir(config: &ExperimentConfig, alphas: &[f64], dir: &Path) -> Result<Vec<SweepRow>> {
    let preps = prepare_all(config)?;
    let (rows, outputs) = sweep_alpha_with(config, alphas, &preps)?;
    write_outputs(config, &outputs, dir)?;
    let mut out = BufWriter::new(fs::File::create(dir.join("alpha_sweep.csv"))?);
    writeln!(out, "alpha,accuracy,purity,diversity,runs")?;
    for r in &rows {
        let s = r.summary;
        writeln!(out, "{},{},{},{},{}", r.alpha, s.accuracy, s.purity, s.diversity, s.runs)?;
    }
    out.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robust::RobustMode;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            classes: 4,
            dim: 6,
            per_class: 40,
            tasks: 2,
            memory_size: 20,
            hidden: 8,
            memory_epochs: 2,
            oracle_epochs: 2,
            seeds: vec![5],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn records_one_row_per_task() {
        let recs = run_experiment(&tiny()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].task, 0);
        assert_eq!(recs[1].task, 1);
        assert_eq!(recs[1].timestamp, 128);
        for r in &recs {
            assert!((0.0..=1.0).contains(&r.accuracy));
            assert!((0.0..=1.0).contains(&r.purity));
            assert!(r.diversity >= 0.0);
            assert!((0.0..=0.5).contains(&r.alpha_mean));
        }
        assert_eq!(recs[0].run_id, "puridiver-full-sym0.4-adaptive-s5");
    }

    #[test]
    fn every_mode_and_sampler_runs() {
        for sampler in [SamplerKind::PuriDivER, SamplerKind::Reservoir, SamplerKind::GreedyBalanced] {
            for mode in RobustMode::ALL {
                let cfg = ExperimentConfig {
                    sampler,
                    robust_mode: mode,
                    ..tiny()
                };
                let out = run_with(&cfg, &prepare_all(&cfg).unwrap()).unwrap();
                assert_eq!(out[0].audits.len(), 4);
                assert!(out[0].snapshots.iter().all(|(_, s)| s.len() <= 20));
            }
        }
    }

    #[test]
    fn single_alpha_sweep_matches_a_run() {
        let cfg = tiny();
        let fixed = ExperimentConfig {
            alpha_mode: AlphaMode::Fixed(0.3),
            ..cfg.clone()
        };
        assert_eq!(sweep_alpha(&cfg, &[0.3]).unwrap(), run_experiment(&fixed).unwrap());
        assert!(sweep_alpha(&cfg, &[1.5]).is_err());
    }
}
