//! Experiment orchestration: source training, online and offline
//! adaptation runs, evaluation, stream-order and memory-size sweeps, and
//! metrics/report emission.

mod config;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{print_schema, schema, RunConfig, RunMode, SchemaEntry, Settings};

use crate::adapt::{adapt_one, argmax, predict, EncoderParams, StepMetrics, StudentTeacherState};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::losses::pseudo_label_loss;
use crate::memory::{MemoryBank, ProjectionSet};
use crate::numerics::sgd_step_in_place;
use crate::streamsim::{
    evaluation_set, gen_source, gen_source_holdout, gen_target_stream, LabeledDataset, StreamSample,
};

/// Noise level of the initial projection matrices around identity.
pub const PROJECTION_INIT_STD: f64 = 0.01;

/// Fraction of instances whose argmax class matches the label.
pub fn evaluate(params: &EncoderParams, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let probs = predict(params, &data.instances)?.class_probs;
    let correct = probs
        .row_iter()
        .zip(&data.labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Result of supervised source training.
#[derive(Debug, Clone)]
pub struct SourceModel {
    pub checkpoint: Checkpoint,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
}

/// Supervised cross-entropy training on the source domain with per-instance
/// momentum SGD, followed by deployment initialization (student = teacher =
/// source model, fresh projections and memory).
pub fn train_source(config: &RunConfig) -> Result<SourceModel> {
    config.validate()?;
    if config.source_epochs == 0 {
        return Err(Error::invalid("source training needs at least one epoch"));
    }
    let domain = &config.domain;
    let train = gen_source(domain, config.source_size)?;
    let holdout = gen_source_holdout(domain, config.holdout_size)?;
    let mut params = EncoderParams::init(domain.dim, config.feature_dim, domain.n_classes, config.seeds().model)?;
    let mut v_enc = vec![0.0; params.encoder.as_slice().len()];
    let mut v_cls = vec![0.0; params.classifier.as_slice().len()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seeds().source_order);
    for _ in 0..config.source_epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let x = train.instances.select_rows(&[i]);
            let fwd = predict(&params, &x)?;
            let (_, d_logits) = pseudo_label_loss(&fwd.logits, &[(0, train.labels[i])])?;
            let d_cls = fwd.features.t_matmul(&d_logits)?;
            let d_enc = x.t_matmul(&d_logits.matmul_t(&params.classifier)?)?;
            sgd_step_in_place(
                params.encoder.as_mut_slice(),
                d_enc.as_slice(),
                config.source_lr,
                &mut v_enc,
                config.source_momentum,
            )?;
            sgd_step_in_place(
                params.classifier.as_mut_slice(),
                d_cls.as_slice(),
                config.source_lr,
                &mut v_cls,
                config.source_momentum,
            )?;
        }
    }
    params.encoder.ensure_finite("source encoder")?;
    params.classifier.ensure_finite("source classifier")?;
    let train_accuracy = evaluate(&params, &train)?;
    let holdout_accuracy = evaluate(&params, &holdout)?;
    let projections = ProjectionSet::init(config.feature_dim, config.seeds().projections, PROJECTION_INIT_STD)?;
    let bank = MemoryBank::init(config.adapt.n_memory, config.feature_dim, config.seeds().memory)?;
    Ok(SourceModel {
        checkpoint: Checkpoint {
            state: StudentTeacherState::from_source(params, projections)?,
            bank,
        },
        train_accuracy,
        holdout_accuracy,
    })
}

/// Everything a run produced. Serializes deterministically: wall times are
/// kept in the metrics CSV only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub config: RunConfig,
    pub steps: Vec<StepMetrics>,
    pub source_only_accuracy: f64,
    pub final_accuracy: f64,
    /// Which network `final_accuracy` refers to.
    pub evaluated: String,
    pub failed_steps: usize,
    pub samples_consumed: usize,
    /// Largest number of times any single sample was handed to adaptation.
    pub max_reads_per_sample: usize,
}

impl RunReport {
    /// Running teacher accuracy after each step.
    pub fn accuracy_curve(&self) -> Vec<f64> {
        self.steps.iter().filter_map(|s| s.teacher_acc_running).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Final state alongside the report.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub checkpoint: Checkpoint,
}

fn variant_name(config: &RunConfig) -> String {
    let method = if config.adapt.use_memclr { "memclr" } else { "student-teacher" };
    match config.mode {
        RunMode::Online => format!("{method}/online/N_l={}", config.adapt.n_memory),
        RunMode::Offline { epochs } => format!("{method}/offline-{epochs}/N_l={}", config.adapt.n_memory),
    }
}

/// Bank from the checkpoint when its size matches the config, otherwise a
/// fresh one seeded like [`train_source`] would.
fn starting_bank(config: &RunConfig, ckpt: &Checkpoint) -> Result<MemoryBank> {
    if ckpt.bank.n_items() == config.adapt.n_memory {
        Ok(ckpt.bank.clone())
    } else {
        MemoryBank::init(config.adapt.n_memory, ckpt.bank.dim(), config.seeds().memory)
    }
}

fn check_dims(config: &RunConfig, ckpt: &Checkpoint) -> Result<()> {
    let (d, c, k, _) = ckpt.dims();
    if d != config.domain.dim || k != config.domain.n_classes || c != config.feature_dim {
        return Err(Error::shape(
            "checkpoint vs config",
            format!("D={} C={} K={}", config.domain.dim, config.feature_dim, config.domain.n_classes),
            format!("D={d} C={c} K={k}"),
        ));
    }
    Ok(())
}

/// Hands out each sample of a pass exactly once and counts reads.
struct AuditedPass<'a> {
    samples: &'a [StreamSample],
    reads: &'a mut [usize],
}

impl<'a> Iterator for AuditedPass<'a> {
    type Item = &'a StreamSample;

    fn next(&mut self) -> Option<Self::Item> {
        let (first, rest) = self.samples.split_first()?;
        self.samples = rest;
        self.reads[first.id] += 1;
        Some(first)
    }
}

struct Adapter<'a> {
    config: &'a RunConfig,
    state: StudentTeacherState,
    bank: MemoryBank,
    eval: &'a LabeledDataset,
    steps: Vec<StepMetrics>,
    failed: usize,
}

impl Adapter<'_> {
    fn evaluated(&self) -> &EncoderParams {
        if self.config.eval_student {
            &self.state.student
        } else {
            &self.state.teacher
        }
    }

    fn step(&mut self, sample: &StreamSample) -> Result<()> {
        let labels = sample.labels.reveal_for_evaluation();
        let sample_acc = |params: &EncoderParams| -> Result<Option<f64>> {
            if labels.is_empty() {
                return Ok(None);
            }
            let data = LabeledDataset {
                instances: sample.observation.weak.clone(),
                labels: labels.to_vec(),
            };
            evaluate(params, &data).map(Some)
        };
        let teacher_acc = sample_acc(&self.state.teacher)?;
        let student_acc = sample_acc(&self.state.student)?;
        let mut metrics = match adapt_one(&self.state, &self.bank, &sample.observation, &self.config.adapt) {
            Ok((state, bank, metrics)) => {
                self.state = state;
                self.bank = bank;
                metrics
            }
            Err(e) => {
                log::warn!("step {} (sample {}) failed and was skipped: {e}", self.steps.len(), sample.id);
                self.failed += 1;
                StepMetrics {
                    n_instances: labels.len(),
                    ..StepMetrics::default()
                }
            }
        };
        metrics.teacher_acc = teacher_acc;
        metrics.student_acc = student_acc;
        metrics.teacher_acc_running = Some(evaluate(self.evaluated(), self.eval)?);
        self.steps.push(metrics);
        Ok(())
    }
}

/// Adapts over `passes` (each a slice of samples, in order) and evaluates on
/// `eval_samples`.
fn adapt_passes(
    config: &RunConfig,
    ckpt: &Checkpoint,
    passes: &[Vec<StreamSample>],
    eval_samples: &[StreamSample],
    n_ids: usize,
) -> Result<RunOutcome> {
    config.validate()?;
    check_dims(config, ckpt)?;
    let eval = evaluation_set(config.domain.dim, eval_samples)?;
    let source_only_accuracy = evaluate(
        if config.eval_student { &ckpt.state.student } else { &ckpt.state.teacher },
        &eval,
    )?;
    let mut adapter = Adapter {
        config,
        state: ckpt.state.clone(),
        bank: starting_bank(config, ckpt)?,
        eval: &eval,
        steps: Vec::with_capacity(passes.iter().map(Vec::len).sum()),
        failed: 0,
    };
    let mut reads = vec![0usize; n_ids];
    for pass in passes {
        for sample in (AuditedPass { samples: pass, reads: &mut reads }) {
            adapter.step(sample)?;
        }
    }
    let final_accuracy = evaluate(adapter.evaluated(), &eval)?;
    let report = RunReport {
        variant: variant_name(config),
        config: config.clone(),
        steps: adapter.steps,
        source_only_accuracy,
        final_accuracy,
        evaluated: if config.eval_student { "student" } else { "teacher" }.into(),
        failed_steps: adapter.failed,
        samples_consumed: reads.iter().filter(|&&r| r > 0).count(),
        max_reads_per_sample: reads.iter().copied().max().unwrap_or(0),
    };
    Ok(RunOutcome {
        report,
        checkpoint: Checkpoint {
            state: adapter.state,
            bank: adapter.bank,
        },
    })
}

fn target_stream(config: &RunConfig) -> Result<Vec<StreamSample>> {
    gen_target_stream(
        &config.domain,
        &config.shift,
        config.stream_length,
        config.order_seed,
        config.jitter_std,
    )
}

/// Single pass over the target stream, each sample seen once, then the
/// evaluated network is scored on every instance of the stream.
pub fn run_online(config: &RunConfig, ckpt: &Checkpoint) -> Result<RunOutcome> {
    let stream = target_stream(config)?;
    run_online_on(config, ckpt, &stream)
}

/// [`run_online`] over an explicit stream.
pub fn run_online_on(config: &RunConfig, ckpt: &Checkpoint, stream: &[StreamSample]) -> Result<RunOutcome> {
    let n_ids = stream.iter().map(|s| s.id + 1).max().unwrap_or(0);
    adapt_passes(config, ckpt, &[stream.to_vec()], stream, n_ids)
}

/// Splits the generated target data into train/test by sample id using the
/// run seed.
pub fn offline_split(config: &RunConfig) -> Result<(Vec<StreamSample>, Vec<StreamSample>)> {
    let stream = target_stream(config)?;
    let mut ids: Vec<usize> = stream.iter().map(|s| s.id).collect();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seeds().split));
    let n_train = ((stream.len() as f64) * config.offline_train_fraction).round() as usize;
    let mut in_train = vec![false; stream.len()];
    for &id in &ids[..n_train] {
        in_train[id] = true;
    }
    let (train, test): (Vec<_>, Vec<_>) = stream.into_iter().partition(|s| in_train[s.id]);
    Ok((train, test))
}

/// Multi-epoch adaptation on the train split, evaluated on the test split.
pub fn run_offline(config: &RunConfig, ckpt: &Checkpoint) -> Result<RunOutcome> {
    let (train, test) = offline_split(config)?;
    run_offline_on(config, ckpt, &train, &test)
}

/// [`run_offline`] over explicit splits. Epoch 0 visits `train` in the given
/// order; later epochs reshuffle it by seed.
pub fn run_offline_on(
    config: &RunConfig,
    ckpt: &Checkpoint,
    train: &[StreamSample],
    test: &[StreamSample],
) -> Result<RunOutcome> {
    let epochs = match config.mode {
        RunMode::Offline { epochs } => epochs,
        RunMode::Online => 1,
    };
    if epochs == 0 {
        return Err(Error::invalid("offline adaptation needs at least one epoch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seeds().epoch_order);
    let mut passes = vec![train.to_vec()];
    for _ in 1..epochs {
        let mut pass = train.to_vec();
        pass.shuffle(&mut rng);
        passes.push(pass);
    }
    let n_ids = train.iter().chain(test).map(|s| s.id + 1).max().unwrap_or(0);
    adapt_passes(config, ckpt, &passes, test, n_ids)
}

/// Final accuracies across stream orderings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    pub order_seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n − 1).
    pub std: f64,
    pub curves: Vec<Vec<f64>>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 || xs.iter().all(|&x| x == xs[0]) {
        return (xs.first().copied().unwrap_or(f64::NAN), 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs [`run_online`] under `n_orders` order seeds (`order_seed`,
/// `order_seed + 1`, …) on the same sample multiset.
pub fn ordering_experiment(config: &RunConfig, ckpt: &Checkpoint, n_orders: usize) -> Result<OrderingReport> {
    if n_orders < 2 {
        return Err(Error::invalid(format!("ordering experiment needs >= 2 orders, got {n_orders}")));
    }
    let order_seeds: Vec<u64> = (0..n_orders as u64).map(|k| config.order_seed.wrapping_add(k)).collect();
    let reports = order_seeds
        .par_iter()
        .map(|&seed| {
            let cfg = RunConfig {
                order_seed: seed,
                ..config.clone()
            };
            run_online(&cfg, ckpt).map(|o| o.report)
        })
        .collect::<Result<Vec<_>>>()?;
    let accuracies: Vec<f64> = reports.iter().map(|r| r.final_accuracy).collect();
    let (mean, std) = mean_std(&accuracies);
    Ok(OrderingReport {
        order_seeds,
        accuracies,
        mean,
        std,
        curves: reports.iter().map(RunReport::accuracy_curve).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub n_memory: usize,
    pub final_accuracy: f64,
    pub source_only_accuracy: f64,
}

/// One independent online run per distinct memory size, in first-seen order.
pub fn ablate_memory(config: &RunConfig, ckpt: &Checkpoint, sizes: &[usize]) -> Result<Vec<AblationRow>> {
    if sizes.is_empty() {
        return Err(Error::invalid("memory ablation needs at least one size"));
    }
    let mut distinct = Vec::new();
    for &s in sizes {
        if !distinct.contains(&s) {
            distinct.push(s);
        }
    }
    distinct
        .par_iter()
        .map(|&n_memory| {
            let mut cfg = config.clone();
            cfg.adapt.n_memory = n_memory;
            let report = run_online(&cfg, ckpt)?.report;
            Ok(AblationRow {
                n_memory,
                final_accuracy: report.final_accuracy,
                source_only_accuracy: report.source_only_accuracy,
            })
        })
        .collect()
}

pub const METRICS_CSV_HEADER: &str = "step,loss_total,loss_pl,loss_memclr,n_pseudo,teacher_acc_running,wall_ms";

/// One row per step under [`METRICS_CSV_HEADER`].
pub fn write_metrics_csv<W: Write>(mut w: W, steps: &[StepMetrics]) -> Result<()> {
    writeln!(w, "{METRICS_CSV_HEADER}")?;
    for (i, s) in steps.iter().enumerate() {
        let acc = s.teacher_acc_running.map_or(String::new(), |a| a.to_string());
        writeln!(
            w,
            "{i},{},{},{},{},{acc},{:.3}",
            s.losses.total, s.losses.pl, s.losses.memclr, s.n_pseudo_labels, s.wall_ms
        )?;
    }
    Ok(())
}

pub fn write_ablation_csv<W: Write>(mut w: W, rows: &[AblationRow]) -> Result<()> {
    writeln!(w, "n_memory,final_accuracy,source_only_accuracy")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.n_memory, r.final_accuracy, r.source_only_accuracy)?;
    }
    Ok(())
}

pub fn write_ordering_csv<W: Write>(mut w: W, report: &OrderingReport) -> Result<()> {
    writeln!(w, "order_seed,final_accuracy")?;
    for (s, a) in report.order_seeds.iter().zip(&report.accuracies) {
        writeln!(w, "{s},{a}")?;
    }
    Ok(())
}

/// Writes `metrics.csv` and `report.json` for a run into `dir`.
pub fn write_run_outputs(dir: &Path, report: &RunReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.csv"))?);
    write_metrics_csv(&mut csv, &report.steps)?;
    csv.flush()?;
    std::fs::write(dir.join("report.json"), report.to_json())?;
    Ok(())
}
