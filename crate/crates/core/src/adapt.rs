//! Student–teacher online adaptation.
//!
//! One call to [`adapt_one`] consumes one observation: the teacher labels
//! the weak view and writes the memory, the student reads the memory with
//! its strong-view features, and the student takes one momentum-SGD step on
//! pseudo-label cross-entropy plus the memory contrastive loss. The teacher
//! then tracks the student by EMA.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{memclr_loss, pseudo_label_loss, total_loss, LossGradients, LossValue, MemClrConfig};
use crate::memory::{MemoryBank, ProjectionSet};
use crate::numerics::{sgd_step_in_place, softmax_rows, DenseMatrix};
use crate::streamsim::Observation;

/// Linear proxy backbone: `features = x · encoder`, `logits = features · classifier`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `D × C`
    pub encoder: DenseMatrix,
    /// `C × K`
    pub classifier: DenseMatrix,
}

impl EncoderParams {
    /// Gaussian init scaled by `1/√fan_in`.
    pub fn init(input_dim: usize, feature_dim: usize, n_classes: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || feature_dim == 0 || n_classes < 2 {
            return Err(Error::invalid(format!(
                "model needs D >= 1, C >= 1, K >= 2; got D={input_dim}, C={feature_dim}, K={n_classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaussian = |rows: usize, cols: usize| {
            let dist = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("positive std");
            DenseMatrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
        };
        Ok(Self {
            encoder: gaussian(input_dim, feature_dim),
            classifier: gaussian(feature_dim, n_classes),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.cols()
    }

    fn same_shape(&self, other: &EncoderParams) -> bool {
        self.encoder.shape() == other.encoder.shape() && self.classifier.shape() == other.classifier.shape()
    }
}

/// Forward pass outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub features: DenseMatrix,
    pub logits: DenseMatrix,
    pub class_probs: DenseMatrix,
}

pub fn predict(params: &EncoderParams, instances: &DenseMatrix) -> Result<Prediction> {
    if instances.cols() != params.input_dim() {
        return Err(Error::shape("predict", format!("instance dim {}", params.input_dim()), instances.cols()));
    }
    let features = instances.matmul(&params.encoder)?;
    let logits = features.matmul(&params.classifier)?;
    let class_probs = softmax_rows(&logits)?;
    Ok(Prediction {
        features,
        logits,
        class_probs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    pub instance: usize,
    pub class: usize,
    pub confidence: f64,
}

/// Confident teacher labels, in instance order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoLabelSet {
    pub labels: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.labels.iter().map(|l| (l.instance, l.class)).collect()
    }
}

/// First index of the row maximum.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Keeps instance `i` with its argmax class iff that probability is strictly
/// above `threshold`.
pub fn filter_pseudo_labels(class_probs: &DenseMatrix, threshold: f64) -> PseudoLabelSet {
    let labels = class_probs
        .row_iter()
        .enumerate()
        .filter_map(|(instance, row)| {
            let class = argmax(row);
            let confidence = row[class];
            (confidence > threshold).then_some(PseudoLabel {
                instance,
                class,
                confidence,
            })
        })
        .collect();
    PseudoLabelSet { labels }
}

fn ema_matrix(teacher: &DenseMatrix, student: &DenseMatrix, alpha: f64) -> DenseMatrix {
    let mut out = teacher.clone();
    for (t, s) in out.as_mut_slice().iter_mut().zip(student.as_slice()) {
        *t = alpha * *t + (1.0 - alpha) * s;
    }
    out
}

/// `θ_tch ← α·θ_tch + (1 − α)·θ_std` for every parameter.
pub fn ema_update(teacher: &EncoderParams, student: &EncoderParams, alpha: f64) -> Result<EncoderParams> {
    if !teacher.same_shape(student) {
        return Err(Error::shape(
            "ema_update",
            format!("{:?}/{:?}", teacher.encoder.shape(), teacher.classifier.shape()),
            format!("{:?}/{:?}", student.encoder.shape(), student.classifier.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("EMA rate must lie in [0, 1], got {alpha}")));
    }
    Ok(EncoderParams {
        encoder: ema_matrix(&teacher.encoder, &student.encoder, alpha),
        classifier: ema_matrix(&teacher.classifier, &student.classifier, alpha),
    })
}

/// Scalar hyperparameters of the adaptation loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Teacher EMA rate.
    pub alpha: f64,
    /// Student learning rate.
    pub gamma: f64,
    /// Heavy-ball momentum.
    pub mu: f64,
    /// Pseudo-label confidence threshold (strict).
    pub conf_threshold: f64,
    pub n_memory: usize,
    pub neg_ratio: f64,
    pub memclr: MemClrConfig,
    /// Disable to run the plain student–teacher baseline.
    pub use_memclr: bool,
    /// EMA-tie the write projections `W_k`, `W_v` to the trained `W_q`.
    pub tie_write_projections: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            alpha: 0.99,
            gamma: 0.001,
            mu: 0.9,
            conf_threshold: 0.9,
            n_memory: 1024,
            neg_ratio: 0.1,
            memclr: MemClrConfig::default(),
            use_memclr: true,
            tie_write_projections: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid(msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(0.0..1.0).contains(&self.mu) {
            return fail(format!("mu must lie in [0, 1), got {}", self.mu));
        }
        if !(self.conf_threshold > 0.0 && self.conf_threshold < 1.0) {
            return fail(format!("conf_threshold must lie in (0, 1), got {}", self.conf_threshold));
        }
        if self.n_memory == 0 {
            return fail("n_memory must be >= 1".into());
        }
        if !(self.neg_ratio > 0.0 && self.neg_ratio <= 1.0) {
            return fail(format!("neg_ratio must lie in (0, 1], got {}", self.neg_ratio));
        }
        if !(self.memclr.temperature > 0.0 && self.memclr.temperature.is_finite()) {
            return fail(format!("temperature must be > 0, got {}", self.memclr.temperature));
        }
        Ok(())
    }
}

/// Heavy-ball velocities for every trained parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumBuffers {
    pub encoder: DenseMatrix,
    pub classifier: DenseMatrix,
    pub w_q: DenseMatrix,
}

impl MomentumBuffers {
    pub fn zeros(params: &EncoderParams) -> Self {
        let c = params.feature_dim();
        Self {
            encoder: DenseMatrix::zeros(params.input_dim(), c),
            classifier: DenseMatrix::zeros(c, params.n_classes()),
            w_q: DenseMatrix::zeros(c, c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentTeacherState {
    pub student: EncoderParams,
    pub teacher: EncoderParams,
    pub projections: ProjectionSet,
    pub momentum: MomentumBuffers,
    pub step_count: u64,
}

impl StudentTeacherState {
    /// Student and teacher both start at the source model; momentum starts at zero.
    pub fn from_source(source: EncoderParams, projections: ProjectionSet) -> Result<Self> {
        if projections.dim() != source.feature_dim() {
            return Err(Error::shape("StudentTeacherState", source.feature_dim(), projections.dim()));
        }
        Ok(Self {
            momentum: MomentumBuffers::zeros(&source),
            teacher: source.clone(),
            student: source,
            projections,
            step_count: 0,
        })
    }
}

/// What one adaptation step did. Accuracy fields are filled by the
/// evaluation side, which alone can see labels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepMetrics {
    pub losses: LossValue,
    pub n_instances: usize,
    pub n_pseudo_labels: usize,
    pub skipped_memory_rows: usize,
    pub teacher_acc: Option<f64>,
    pub student_acc: Option<f64>,
    pub teacher_acc_running: Option<f64>,
    /// Excluded from serialized reports so they stay reproducible.
    #[serde(skip)]
    pub wall_ms: f64,
}

/// Student objective (pseudo-label CE + optional contrastive term) and its
/// gradients, with the memory bank and pseudo-labels held fixed.
pub fn student_objective(
    student: &EncoderParams,
    w_q: &DenseMatrix,
    bank: &MemoryBank,
    strong_view: &DenseMatrix,
    pseudo: &PseudoLabelSet,
    cfg: &AdaptConfig,
) -> Result<(LossValue, LossGradients)> {
    let fwd = predict(student, strong_view)?;
    let (pl, d_logits) = pseudo_label_loss(&fwd.logits, &pseudo.pairs())?;
    let d_classifier = fwd.features.t_matmul(&d_logits)?;
    let mut d_features = d_logits.matmul_t(&student.classifier)?;

    let c = student.feature_dim();
    let (memclr, d_wq) = if cfg.use_memclr && !strong_view.is_empty() {
        let mut proj = ProjectionSet::identity(c);
        proj.w_q = w_q.clone();
        let read = bank.read(&fwd.features, &proj, cfg.neg_ratio)?;
        let (l, g) = memclr_loss(&fwd.features, &read, bank, w_q, &cfg.memclr)?;
        d_features.add_assign(&g.d_features)?;
        (l, g.d_wq)
    } else {
        (0.0, DenseMatrix::zeros(c, c))
    };
    let d_encoder = strong_view.t_matmul(&d_features)?;
    Ok((
        total_loss(pl, memclr),
        LossGradients {
            d_encoder,
            d_classifier,
            d_wq,
        },
    ))
}

/// One online step. On any error the inputs are untouched and nothing is
/// returned, so callers can skip the sample without partial updates.
pub fn adapt_one(
    state: &StudentTeacherState,
    bank: &MemoryBank,
    obs: &Observation,
    cfg: &AdaptConfig,
) -> Result<(StudentTeacherState, MemoryBank, StepMetrics)> {
    let started = Instant::now();
    cfg.validate()?;
    let d = state.student.input_dim();
    if obs.weak.cols() != d || obs.strong.shape() != obs.weak.shape() {
        return Err(Error::shape(
            "adapt_one",
            format!("weak/strong views of width {d}"),
            format!("weak {:?}, strong {:?}", obs.weak.shape(), obs.strong.shape()),
        ));
    }
    if bank.dim() != state.student.feature_dim() {
        return Err(Error::shape("adapt_one", format!("bank dim {}", state.student.feature_dim()), bank.dim()));
    }

    let mut next = state.clone();
    let mut next_bank = bank.clone();
    let mut metrics = StepMetrics {
        n_instances: obs.weak.rows(),
        ..StepMetrics::default()
    };
    if obs.weak.is_empty() {
        next.step_count += 1;
        metrics.wall_ms = started.elapsed().as_secs_f64() * 1e3;
        return Ok((next, next_bank, metrics));
    }

    // teacher: weak view → pseudo-labels, memory write
    let teacher_out = predict(&state.teacher, &obs.weak)?;
    let pseudo = filter_pseudo_labels(&teacher_out.class_probs, cfg.conf_threshold);
    metrics.n_pseudo_labels = pseudo.len();
    metrics.skipped_memory_rows = next_bank.write(&teacher_out.features, &state.projections)?;

    // student: strong view → read the freshly written bank, losses, gradients
    let (losses, grads) = student_objective(
        &state.student,
        &state.projections.w_q,
        &next_bank,
        &obs.strong,
        &pseudo,
        cfg,
    )?;
    metrics.losses = losses;

    let m = &mut next.momentum;
    sgd_step_in_place(
        next.student.encoder.as_mut_slice(),
        grads.d_encoder.as_slice(),
        cfg.gamma,
        m.encoder.as_mut_slice(),
        cfg.mu,
    )?;
    sgd_step_in_place(
        next.student.classifier.as_mut_slice(),
        grads.d_classifier.as_slice(),
        cfg.gamma,
        m.classifier.as_mut_slice(),
        cfg.mu,
    )?;
    sgd_step_in_place(
        next.projections.w_q.as_mut_slice(),
        grads.d_wq.as_slice(),
        cfg.gamma,
        m.w_q.as_mut_slice(),
        cfg.mu,
    )?;
    next.student.encoder.ensure_finite("student encoder")?;
    next.student.classifier.ensure_finite("student classifier")?;
    next.projections.w_q.ensure_finite("W_q")?;

    next.teacher = ema_update(&state.teacher, &next.student, cfg.alpha)?;
    if cfg.tie_write_projections {
        let p = &mut next.projections;
        p.w_k = ema_matrix(&p.w_k, &p.w_q, cfg.alpha);
        p.w_v = ema_matrix(&p.w_v, &p.w_q, cfg.alpha);
    }
    next.step_count += 1;
    metrics.wall_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok((next, next_bank, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, GradReport};
    use approx::assert_abs_diff_eq;
    use rand_distr::StandardNormal;

    fn random_matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
    }

    fn observation(weak: DenseMatrix, jitter_seed: u64) -> Observation {
        let noise = random_matrix(weak.rows(), weak.cols(), jitter_seed, 0.1);
        let mut strong = weak.clone();
        strong.add_assign(&noise).unwrap();
        Observation { weak, strong }
    }

    fn small_state(d: usize, c: usize, k: usize, seed: u64) -> StudentTeacherState {
        let params = EncoderParams::init(d, c, k, seed).unwrap();
        StudentTeacherState::from_source(params, ProjectionSet::init(c, seed + 1, 0.01).unwrap()).unwrap()
    }

    #[test]
    fn predict_examples() {
        let params = EncoderParams {
            encoder: DenseMatrix::identity(3),
            classifier: {
                let mut m = DenseMatrix::identity(3);
                m.scale(20.0);
                m
            },
        };
        let x = DenseMatrix::new(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let out = predict(&params, &x).unwrap();
        assert_eq!(argmax(out.class_probs.row(0)), 1);
        assert!(out.class_probs.get(0, 1) > 0.99);

        let zero = DenseMatrix::zeros(2, 3);
        let out = predict(&params, &zero).unwrap();
        for v in out.class_probs.as_slice() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }

        let params = EncoderParams::init(4, 3, 2, 5).unwrap();
        let x = random_matrix(2, 4, 6, 1.0);
        let out = predict(&params, &x).unwrap();
        for i in 0..2 {
            for c in 0..3 {
                let f: f64 = (0..4).map(|d| x.get(i, d) * params.encoder.get(d, c)).sum();
                assert_abs_diff_eq!(out.features.get(i, c), f, epsilon = 1e-12);
            }
            for k in 0..2 {
                let z: f64 = (0..3).map(|c| out.features.get(i, c) * params.classifier.get(c, k)).sum();
                assert_abs_diff_eq!(out.logits.get(i, k), z, epsilon = 1e-12);
            }
        }
        assert!(predict(&params, &DenseMatrix::zeros(1, 5)).is_err());
    }

    #[test]
    fn pseudo_label_threshold_is_strict() {
        let probs = DenseMatrix::from_rows(&[vec![0.95, 0.05], vec![0.15, 0.85], vec![0.9, 0.1], vec![0.02, 0.98]])
            .unwrap();
        let set = filter_pseudo_labels(&probs, 0.9);
        assert_eq!(set.pairs(), vec![(0, 0), (3, 1)]);
        assert!(set.labels.iter().all(|l| l.confidence > 0.9));
    }

    #[test]
    fn pseudo_labels_are_permutation_equivariant() {
        let probs = softmax_rows(&random_matrix(12, 3, 77, 3.0)).unwrap();
        let set = filter_pseudo_labels(&probs, 0.7);
        let order: Vec<usize> = (0..12).rev().collect();
        let permuted = filter_pseudo_labels(&probs.select_rows(&order), 0.7);
        let mut relabeled: Vec<(usize, usize)> = permuted.pairs().into_iter().map(|(i, c)| (order[i], c)).collect();
        relabeled.sort_unstable();
        assert_eq!(relabeled, set.pairs());
    }

    #[test]
    fn ema_examples() {
        let zeros = EncoderParams {
            encoder: DenseMatrix::zeros(1, 1),
            classifier: DenseMatrix::zeros(1, 2),
        };
        let ones = EncoderParams {
            encoder: DenseMatrix::new(1, 1, vec![1.0]).unwrap(),
            classifier: DenseMatrix::new(1, 2, vec![1.0, 1.0]).unwrap(),
        };
        let t = ema_update(&zeros, &ones, 0.99).unwrap();
        assert_abs_diff_eq!(t.encoder.get(0, 0), 0.01, epsilon = 1e-15);
        assert_eq!(ema_update(&ones, &zeros, 1.0).unwrap(), ones);
        assert!(ema_update(&zeros, &ones, 1.5).is_err());
        let wrong = EncoderParams::init(2, 1, 2, 0).unwrap();
        assert!(ema_update(&zeros, &wrong, 0.5).is_err());
    }

    #[test]
    fn ema_gap_decays_geometrically() {
        let student = EncoderParams::init(3, 4, 2, 1).unwrap();
        let mut teacher = EncoderParams::init(3, 4, 2, 2).unwrap();
        let gap0: Vec<f64> = teacher.encoder.as_slice().iter().zip(student.encoder.as_slice()).map(|(t, s)| t - s).collect();
        for _ in 0..100 {
            teacher = ema_update(&teacher, &student, 0.99).unwrap();
        }
        let factor = 0.99f64.powi(100);
        for ((t, s), g) in teacher.encoder.as_slice().iter().zip(student.encoder.as_slice()).zip(&gap0) {
            assert_abs_diff_eq!(t - s, factor * g, epsilon = 1e-9);
        }
    }

    #[test]
    fn frozen_config_leaves_parameters_but_writes_memory() {
        let state = small_state(4, 5, 3, 10);
        let bank = MemoryBank::init(8, 5, 11).unwrap();
        let cfg = AdaptConfig {
            alpha: 1.0,
            gamma: 0.0,
            n_memory: 8,
            ..AdaptConfig::default()
        };
        let obs = observation(random_matrix(3, 4, 12, 1.0), 13);
        let (next, next_bank, _) = adapt_one(&state, &bank, &obs, &cfg).unwrap();
        assert_eq!(next.student, state.student);
        assert_eq!(next.teacher, state.teacher);
        assert_eq!(next.projections, state.projections);
        assert_eq!(next.step_count, 1);
        assert_ne!(next_bank, bank);
    }

    #[test]
    fn empty_sample_only_counts_the_step() {
        let state = small_state(4, 5, 3, 10);
        let bank = MemoryBank::init(8, 5, 11).unwrap();
        let obs = Observation {
            weak: DenseMatrix::zeros(0, 4),
            strong: DenseMatrix::zeros(0, 4),
        };
        let (next, next_bank, metrics) = adapt_one(&state, &bank, &obs, &AdaptConfig::default()).unwrap();
        assert_eq!(next.step_count, 1);
        assert_eq!(next.student, state.student);
        assert_eq!(next_bank, bank);
        assert_eq!(metrics.n_instances, 0);
    }

    #[test]
    fn adapt_one_is_deterministic() {
        let state = small_state(6, 8, 4, 3);
        let bank = MemoryBank::init(16, 8, 4).unwrap();
        let obs = observation(random_matrix(4, 6, 5, 2.0), 6);
        let cfg = AdaptConfig { gamma: 0.05, n_memory: 16, ..AdaptConfig::default() };
        let (a, ba, _) = adapt_one(&state, &bank, &obs, &cfg).unwrap();
        let (b, bb, _) = adapt_one(&state, &bank, &obs, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ba.to_bytes(), bb.to_bytes());
    }

    #[test]
    fn failed_step_is_transactional() {
        let state = small_state(4, 5, 3, 10);
        let bank = MemoryBank::init(8, 5, 11).unwrap();
        // an all-zero strong view has zero features, which cannot be normalized
        let obs = Observation {
            weak: random_matrix(2, 4, 1, 1.0),
            strong: DenseMatrix::zeros(2, 4),
        };
        let before = (state.clone(), bank.clone());
        assert!(adapt_one(&state, &bank, &obs, &AdaptConfig::default()).is_err());
        assert_eq!((state, bank), before);
    }

    #[test]
    fn teacher_stays_between_old_teacher_and_new_student() {
        let mut state = small_state(6, 8, 3, 21);
        state.teacher = EncoderParams::init(6, 8, 3, 22).unwrap();
        let bank = MemoryBank::init(16, 8, 23).unwrap();
        let cfg = AdaptConfig { gamma: 0.1, conf_threshold: 0.4, n_memory: 16, ..AdaptConfig::default() };
        let obs = observation(random_matrix(4, 6, 24, 2.0), 25);
        let (next, _, _) = adapt_one(&state, &bank, &obs, &cfg).unwrap();
        let between = |old: &DenseMatrix, new_t: &DenseMatrix, new_s: &DenseMatrix| {
            old.as_slice().iter().zip(new_t.as_slice()).zip(new_s.as_slice()).all(|((o, t), s)| {
                let (lo, hi) = if o <= s { (o, s) } else { (s, o) };
                *t >= lo - 1e-15 && *t <= hi + 1e-15
            })
        };
        assert!(between(&state.teacher.encoder, &next.teacher.encoder, &next.student.encoder));
        assert!(between(&state.teacher.classifier, &next.teacher.classifier, &next.student.classifier));
    }

    #[test]
    fn read_sees_the_bank_written_in_the_same_step() {
        // sentinel: W_v is huge, so the write drags every item toward the
        // teacher's value direction; the contrastive loss must differ from
        // the one computed against the pre-write bank
        let mut state = small_state(4, 4, 2, 30);
        state.projections.w_v.scale(1e3);
        let bank = MemoryBank::init(6, 4, 31).unwrap();
        let obs = observation(random_matrix(2, 4, 32, 1.0), 33);
        let cfg = AdaptConfig { n_memory: 6, neg_ratio: 0.5, ..AdaptConfig::default() };
        let (_, written, metrics) = adapt_one(&state, &bank, &obs, &cfg).unwrap();
        let pseudo = {
            let t = predict(&state.teacher, &obs.weak).unwrap();
            filter_pseudo_labels(&t.class_probs, cfg.conf_threshold)
        };
        let (post, _) = student_objective(&state.student, &state.projections.w_q, &written, &obs.strong, &pseudo, &cfg).unwrap();
        let (pre, _) = student_objective(&state.student, &state.projections.w_q, &bank, &obs.strong, &pseudo, &cfg).unwrap();
        assert_eq!(metrics.losses, post);
        assert_ne!(metrics.losses.memclr, pre.memclr);
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        for seed in 0..5u64 {
            let (d, c, k, n_f, n_l) = (5, 6, 3, 3, 12);
            let state = small_state(d, c, k, seed);
            let mut bank = MemoryBank::init(n_l, c, seed + 50).unwrap();
            let x = random_matrix(n_f, d, seed + 60, 1.5);
            let t = predict(&state.teacher, &x).unwrap();
            bank.write(&t.features, &state.projections).unwrap();
            let pseudo = filter_pseudo_labels(&t.class_probs, 0.3);
            let cfg = AdaptConfig { n_memory: n_l, neg_ratio: 0.25, ..AdaptConfig::default() };
            let (_, g) = student_objective(&state.student, &state.projections.w_q, &bank, &x, &pseudo, &cfg).unwrap();
            let obj = |student: &EncoderParams, wq: &DenseMatrix| {
                student_objective(student, wq, &bank, &x, &pseudo, &cfg).unwrap().0.total
            };
            let mut s = state.student.clone();
            let num_enc = finite_diff_grad(
                |v| {
                    s.encoder = DenseMatrix::new(d, c, v.to_vec()).unwrap();
                    obj(&s, &state.projections.w_q)
                },
                state.student.encoder.as_slice(),
                1e-6,
            )
            .unwrap();
            let mut s = state.student.clone();
            let num_cls = finite_diff_grad(
                |v| {
                    s.classifier = DenseMatrix::new(c, k, v.to_vec()).unwrap();
                    obj(&s, &state.projections.w_q)
                },
                state.student.classifier.as_slice(),
                1e-6,
            )
            .unwrap();
            let num_wq = finite_diff_grad(
                |v| obj(&state.student, &DenseMatrix::new(c, c, v.to_vec()).unwrap()),
                state.projections.w_q.as_slice(),
                1e-6,
            )
            .unwrap();
            let mut report = GradReport::default();
            report.record("encoder", g.d_encoder.as_slice(), &num_enc);
            report.record("classifier", g.d_classifier.as_slice(), &num_cls);
            report.record("W_q", g.d_wq.as_slice(), &num_wq);
            assert!(report.max_rel_err <= 1e-5, "seed {seed}: {report:?}");
        }
    }
}
