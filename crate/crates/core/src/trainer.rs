//! The training loop over a class-incremental stream, per-task evaluation,
//! the two summary metrics, the experience-replay baseline, ablation
//! switches, and the online-vs-bank prototype similarity diagnostic.
//!
//! One step of the full method: draw the replay batch (confusion-guided when
//! a cached pair distribution exists), build two views of incoming and
//! replay data, embed everything, form per-view online prototypes, combine
//! the prototype, instance, and replay cross-entropy terms, take one Adam
//! step, push the incoming batch into the memory bank, and cache the replay
//! prototype distribution for the next step's sampler.

use std::collections::BTreeSet;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::apf::{apf_sample, ApfConfig, MixedSample};
use crate::error::{Error, Result};
use crate::losses::{l_pro, replay_ce, supcon_group, LossBreakdown};
use crate::memory::MemoryBank;
use crate::model::{ModelGrads, ModelParams, ModelSpec};
use crate::numerics::{dot, AdamConfig, AdamState, Tensor2};
use crate::prototypes::{pair_probabilities, PairProbability, PrototypeSet};
use crate::stream::{augment_features, AugmentConfig, Sample, StreamEvent, TaskStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    OnPro,
    Er,
}

/// Hyperparameters and ablation switches for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    #[serde(default = "defaults::method")]
    pub method: Method,
    #[serde(default = "defaults::yes")]
    pub use_ope_new: bool,
    #[serde(default = "defaults::yes")]
    pub use_ope_seen: bool,
    #[serde(default = "defaults::yes")]
    pub use_ins: bool,
    /// Off means plain uniform replay without any mixup.
    #[serde(default = "defaults::yes")]
    pub use_apf: bool,
    /// Drop current-task classes from the seen-prototype term.
    #[serde(default)]
    pub seen_excludes_new: bool,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::replay_batch_size")]
    pub replay_batch_size: usize,
    #[serde(default = "defaults::memory_capacity")]
    pub memory_capacity: usize,
    #[serde(default = "defaults::tau")]
    pub tau: f64,
    #[serde(default = "defaults::tau_prime")]
    pub tau_prime: f64,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::mixup_concentration")]
    pub mixup_concentration: f64,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default = "defaults::hidden_dims")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "defaults::embedding_dim")]
    pub embedding_dim: usize,
    /// Emit the per-step online-vs-bank prototype similarity series.
    #[serde(default = "defaults::yes")]
    pub track_prototype_similarity: bool,
    /// Evaluate on all seen test sets after every step (slow; for curves).
    #[serde(default)]
    pub per_step_eval: bool,
}

mod defaults {
    use super::Method;

    pub fn method() -> Method {
        Method::OnPro
    }
    pub fn yes() -> bool {
        true
    }
    pub fn batch_size() -> usize {
        10
    }
    pub fn replay_batch_size() -> usize {
        64
    }
    pub fn memory_capacity() -> usize {
        100
    }
    pub fn tau() -> f64 {
        0.5
    }
    pub fn tau_prime() -> f64 {
        0.07
    }
    pub fn alpha() -> f64 {
        0.25
    }
    pub fn mixup_concentration() -> f64 {
        1.0
    }
    pub fn hidden_dims() -> Vec<usize> {
        vec![64, 64]
    }
    pub fn embedding_dim() -> usize {
        128
    }
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self::onpro()
    }
}

impl MethodConfig {
    pub fn onpro() -> Self {
        Self {
            method: Method::OnPro,
            use_ope_new: true,
            use_ope_seen: true,
            use_ins: true,
            use_apf: true,
            seen_excludes_new: false,
            batch_size: defaults::batch_size(),
            replay_batch_size: defaults::replay_batch_size(),
            memory_capacity: defaults::memory_capacity(),
            tau: defaults::tau(),
            tau_prime: defaults::tau_prime(),
            alpha: defaults::alpha(),
            mixup_concentration: defaults::mixup_concentration(),
            optimizer: AdamConfig::default(),
            augment: AugmentConfig::default(),
            hidden_dims: defaults::hidden_dims(),
            embedding_dim: defaults::embedding_dim(),
            track_prototype_similarity: true,
            per_step_eval: false,
        }
    }

    /// Uniform reservoir replay and a single cross-entropy on the combined
    /// batch; no prototypes, no contrastive terms, no mixup.
    pub fn er() -> Self {
        Self {
            method: Method::Er,
            use_ope_new: false,
            use_ope_seen: false,
            use_ins: false,
            use_apf: false,
            ..Self::onpro()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.replay_batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if !(self.tau > 0.0) || !(self.tau_prime > 0.0) {
            return Err(Error::Config("temperatures must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must lie in [0, 1]".into()));
        }
        if !(self.mixup_concentration > 0.0) {
            return Err(Error::Config("mixup_concentration must be > 0".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden_dims must be nonempty and positive".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be >= 1".into()));
        }
        self.optimizer.validate()?;
        self.augment.validate()?;
        Ok(())
    }

    fn apf_config(&self) -> ApfConfig {
        ApfConfig {
            alpha: self.alpha,
            replay_batch_size: self.replay_batch_size,
            mixup_concentration: self.mixup_concentration,
        }
    }
}

/// Lower-triangular accuracy table: `rows[i][j]` is the accuracy on task j's
/// test set after training through task i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self { rows: Vec::new() }
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Metric(format!(
                "row {} must hold {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Metric("accuracies must lie in [0, 1]".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    fn check_complete(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Metric("empty accuracy matrix".into()));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::Metric(format!("row {i} holds {} entries", row.len())));
            }
        }
        Ok(())
    }

    /// Mean of the final row.
    pub fn average_accuracy(&self) -> Result<f64> {
        self.check_complete()?;
        let last = self.rows.last().expect("nonempty");
        Ok(last.iter().sum::<f64>() / last.len() as f64)
    }

    /// Mean over tasks `j < T` of `max_{k<T} a[k][j] - a[T-1][j]`.
    pub fn average_forgetting(&self) -> Result<f64> {
        self.check_complete()?;
        let t = self.rows.len();
        if t < 2 {
            return Err(Error::Metric("forgetting needs at least two tasks".into()));
        }
        let last = &self.rows[t - 1];
        let mut total = 0.0;
        for j in 0..t - 1 {
            let best = (j..t - 1)
                .map(|k| self.rows[k][j])
                .fold(f64::NEG_INFINITY, f64::max);
            total += best - last[j];
        }
        Ok(total / (t - 1) as f64)
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

/// Fraction of test samples whose argmax logit hits the label; ties break
/// toward the lowest class id. No augmentation at test time.
pub fn evaluate(params: &ModelParams, test: &[Sample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Eval);
    }
    let rows: Vec<Vec<f64>> = test.iter().map(|s| s.features.clone()).collect();
    let x = Tensor2::from_rows(&rows)?;
    let logits = params.classify(&x)?;
    let mut correct = 0usize;
    for (i, sample) in test.iter().enumerate() {
        let row = logits.row(i);
        let mut best = 0usize;
        for (c, v) in row.iter().enumerate().skip(1) {
            if *v > row[best] {
                best = c;
            }
        }
        if best == sample.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Cosine similarity between each online prototype and the normalized mean
/// embedding of all bank samples of that class. Classes absent from the bank
/// are omitted.
pub fn prototype_similarity_probe(
    params: &ModelParams,
    bank: &MemoryBank,
    online: &PrototypeSet,
) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for (idx, &class) in online.classes().iter().enumerate() {
        let members = bank.samples_of_class(class);
        if members.is_empty() {
            continue;
        }
        let rows: Vec<Vec<f64>> = members.iter().map(|s| s.features.clone()).collect();
        let z = params.embed(&Tensor2::from_rows(&rows)?)?;
        let mut mean = vec![0.0; z.cols()];
        for i in 0..z.rows() {
            for (m, v) in mean.iter_mut().zip(z.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= z.rows() as f64;
        }
        let global = crate::numerics::l2_normalize(&mean)?;
        let sim = dot(online.prototypes().row(idx), &global).clamp(-1.0, 1.0);
        out.push((class, sim));
    }
    Ok(out)
}

/// Fully materialized inputs of one training step: both views of the
/// incoming batch and (when the bank had anything to replay) both views of
/// the replay batch with dominant labels and soft cross-entropy targets.
/// Loss and gradients are a pure function of these plus the parameters.
#[derive(Debug, Clone)]
pub struct StepInputs {
    pub incoming_view1: Tensor2,
    pub incoming_view2: Tensor2,
    pub incoming_labels: Vec<usize>,
    pub replay_view1: Option<Tensor2>,
    pub replay_view2: Option<Tensor2>,
    pub replay_labels: Vec<usize>,
    pub ce_targets: Option<Tensor2>,
    pub current_task_classes: BTreeSet<usize>,
}

/// Builds step inputs from an incoming batch and an already-drawn replay
/// batch. View 1 is the identity view; view 2 is augmented. Draw order:
/// incoming augmentations in batch order, then replay augmentations.
pub fn prepare_step_inputs<R: Rng>(
    batch: &[Sample],
    replay: &[MixedSample],
    num_classes: usize,
    augment: &AugmentConfig,
    rng: &mut R,
) -> Result<StepInputs> {
    if batch.is_empty() {
        return Err(Error::Config("empty incoming batch".into()));
    }
    let incoming_rows: Vec<Vec<f64>> = batch.iter().map(|s| s.features.clone()).collect();
    let incoming_view1 = Tensor2::from_rows(&incoming_rows)?;
    let aug_rows: Vec<Vec<f64>> = batch
        .iter()
        .map(|s| augment_features(&s.features, augment, rng))
        .collect();
    let incoming_view2 = Tensor2::from_rows(&aug_rows)?;
    let incoming_labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let current_task_classes: BTreeSet<usize> = incoming_labels.iter().copied().collect();

    let (replay_view1, replay_view2, replay_labels, ce_targets) = if replay.is_empty() {
        (None, None, Vec::new(), None)
    } else {
        let rows: Vec<Vec<f64>> = replay.iter().map(|m| m.features.clone()).collect();
        let aug: Vec<Vec<f64>> = replay
            .iter()
            .map(|m| augment_features(&m.features, augment, rng))
            .collect();
        let labels: Vec<usize> = replay.iter().map(MixedSample::dominant_label).collect();
        let targets: Vec<Vec<f64>> = replay.iter().map(|m| m.soft_target(num_classes)).collect();
        (
            Some(Tensor2::from_rows(&rows)?),
            Some(Tensor2::from_rows(&aug)?),
            labels,
            Some(Tensor2::from_rows(&targets)?),
        )
    };
    Ok(StepInputs {
        incoming_view1,
        incoming_view2,
        incoming_labels,
        replay_view1,
        replay_view2,
        replay_labels,
        ce_targets,
        current_task_classes,
    })
}

/// Result of the loss-and-gradient evaluation of one step.
pub struct StepComputation {
    pub breakdown: LossBreakdown,
    pub grads: ModelGrads,
    /// Confusion distribution from this step's replay view-1 prototypes,
    /// cached by the driver for the next step's sampler.
    pub next_pair_probabilities: Option<PairProbability>,
    /// View-1 prototypes of the incoming batch, for the similarity probe.
    pub incoming_prototypes: PrototypeSet,
}

fn add_rows(dst: &mut Tensor2, src: &Tensor2, src_offset: usize) {
    for i in 0..dst.rows() {
        for (d, s) in dst.row_mut(i).iter_mut().zip(src.row(src_offset + i)) {
            *d += s;
        }
    }
}

/// Loss and parameter gradients of one step of the full method, honoring the
/// ablation switches. Pure in `(params, inputs, cfg)`.
pub fn onpro_loss_and_grads(
    params: &ModelParams,
    inputs: &StepInputs,
    cfg: &MethodConfig,
) -> Result<StepComputation> {
    let f_in1 = params.forward(&inputs.incoming_view1, false)?;
    let f_in2 = params.forward(&inputs.incoming_view2, false)?;
    let replay_passes = match (&inputs.replay_view1, &inputs.replay_view2) {
        (Some(v1), Some(v2)) => Some((params.forward(v1, false)?, params.forward(v2, true)?)),
        _ => None,
    };

    let n = inputs.incoming_view1.rows();
    let dim = f_in1.embeddings.cols();
    let mut d_in1 = Tensor2::zeros(n, dim);
    let mut d_in2 = Tensor2::zeros(n, dim);

    let incoming_prototypes = PrototypeSet::compute(&f_in1.embeddings, &inputs.incoming_labels)?;

    // New-classes prototype term.
    let mut l_ope_new = 0.0;
    if cfg.use_ope_new {
        let p_hat = PrototypeSet::compute(&f_in2.embeddings, &inputs.incoming_labels)?;
        let (l, g) = l_pro(&incoming_prototypes, &p_hat, cfg.tau)?;
        l_ope_new = l;
        incoming_prototypes.backprop(&g.d_p, &mut d_in1)?;
        p_hat.backprop(&g.d_p_hat, &mut d_in2)?;
    }

    // Seen-classes prototype term and the next confusion distribution.
    let mut l_ope_seen = 0.0;
    let mut l_ce = 0.0;
    let mut next_pair_probabilities = None;
    let mut replay_grads = None;
    if let Some((f_rep1, f_rep2)) = &replay_passes {
        let m = f_rep1.embeddings.rows();
        let mut d_rep1 = Tensor2::zeros(m, dim);
        let mut d_rep2 = Tensor2::zeros(m, dim);

        let pb = PrototypeSet::compute(&f_rep1.embeddings, &inputs.replay_labels)?;
        next_pair_probabilities = match pair_probabilities(&pb) {
            Ok(p) => Some(p),
            Err(Error::InsufficientClasses(_)) => None,
            Err(e) => return Err(e),
        };
        if cfg.use_ope_seen {
            let pb_hat = PrototypeSet::compute(&f_rep2.embeddings, &inputs.replay_labels)?;
            let (pb_used, pb_hat_used) = if cfg.seen_excludes_new {
                (
                    pb.without_classes(&inputs.current_task_classes),
                    pb_hat.without_classes(&inputs.current_task_classes),
                )
            } else {
                (pb.clone(), pb_hat)
            };
            let (l, g) = l_pro(&pb_used, &pb_hat_used, cfg.tau)?;
            l_ope_seen = l;
            pb_used.backprop(&g.d_p, &mut d_rep1)?;
            pb_hat_used.backprop(&g.d_p_hat, &mut d_rep2)?;
        }

        // Replay cross-entropy reads the augmented view's logits only.
        let logits = f_rep2.logits.as_ref().expect("replay view 2 ran with logits");
        let targets = inputs.ce_targets.as_ref().expect("targets built with replay");
        let (ce, d_logits) = replay_ce(logits, targets)?;
        l_ce = ce;
        replay_grads = Some((d_rep1, d_rep2, d_logits));
    }

    // Instance-level term over both view groups. Each group's anchor sum is
    // normalized by its anchor count before entering the total: the
    // prototype terms and the cross-entropy are per-anchor means, and an
    // unnormalized instance sum (hundreds of anchors) would monopolize the
    // encoder's gradient direction and starve the classifier.
    let mut l_ins = 0.0;
    if cfg.use_ins {
        let z_in = f_in1.embeddings.vstack(&f_in2.embeddings)?;
        let mut labels2 = inputs.incoming_labels.clone();
        labels2.extend_from_slice(&inputs.incoming_labels);
        let (l, mut d_z) = supcon_group(&z_in, &labels2, cfg.tau_prime)?;
        let scale = 1.0 / z_in.rows() as f64;
        for g in d_z.as_mut_slice() {
            *g *= scale;
        }
        l_ins += l * scale;
        add_rows(&mut d_in1, &d_z, 0);
        add_rows(&mut d_in2, &d_z, n);

        if let (Some((f_rep1, f_rep2)), Some((d_rep1, d_rep2, _))) =
            (&replay_passes, &mut replay_grads)
        {
            let z_rep = f_rep1.embeddings.vstack(&f_rep2.embeddings)?;
            let mut rep_labels2 = inputs.replay_labels.clone();
            rep_labels2.extend_from_slice(&inputs.replay_labels);
            let (l, mut d_z) = supcon_group(&z_rep, &rep_labels2, cfg.tau_prime)?;
            let scale = 1.0 / z_rep.rows() as f64;
            for g in d_z.as_mut_slice() {
                *g *= scale;
            }
            l_ins += l * scale;
            add_rows(d_rep1, &d_z, 0);
            add_rows(d_rep2, &d_z, f_rep1.embeddings.rows());
        }
    }

    let mut grads = params.zero_grads();
    params.backward(&f_in1, Some(&d_in1), None, &mut grads)?;
    params.backward(&f_in2, Some(&d_in2), None, &mut grads)?;
    if let (Some((f_rep1, f_rep2)), Some((d_rep1, d_rep2, d_logits))) =
        (&replay_passes, &replay_grads)
    {
        params.backward(f_rep1, Some(d_rep1), None, &mut grads)?;
        params.backward(f_rep2, Some(d_rep2), Some(d_logits), &mut grads)?;
    }

    Ok(StepComputation {
        breakdown: LossBreakdown::new(l_ope_new, l_ope_seen, l_ins, l_ce),
        grads,
        next_pair_probabilities,
        incoming_prototypes,
    })
}

/// Per-step loss record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub task: usize,
    pub losses: LossBreakdown,
}

/// One probe reading: similarity of a class's online prototype to its
/// whole-bank prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub step: usize,
    pub task: usize,
    pub class: usize,
    pub similarity: f64,
}

/// Mean accuracy over all seen test sets at one step (per-step evaluation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementalRecord {
    pub step: usize,
    pub task: usize,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub loss_series: Vec<StepRecord>,
    pub similarity_series: Vec<SimilarityRecord>,
    pub incremental_accuracy: Vec<IncrementalRecord>,
}

pub struct RunOutcome {
    pub params: ModelParams,
    pub matrix: AccuracyMatrix,
    pub diagnostics: RunDiagnostics,
}

struct TrainerState {
    params: ModelParams,
    flat: Vec<f64>,
    adam: AdamState,
    bank: MemoryBank,
    cached_pairs: Option<PairProbability>,
    rng: ChaCha8Rng,
}

impl TrainerState {
    fn apply_update(&mut self, grads: &ModelGrads) -> Result<()> {
        self.flat.clear();
        self.flat.extend(self.params.flatten());
        let g = grads.flatten();
        self.adam.step(&mut self.flat, &g)?;
        self.params.unflatten_from(&self.flat)
    }
}

/// Runs the configured method over the whole stream, evaluating on all seen
/// test sets at every task boundary. Deterministic under `seed`: the master
/// generator yields the model-init seed then the training seed; training
/// draws are, per step, replay sampling, incoming and replay augmentation,
/// then the reservoir update.
pub fn run_stream(
    stream: TaskStream,
    test_sets: &[Vec<Sample>],
    cfg: &MethodConfig,
    seed: u64,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if test_sets.len() != stream.num_tasks() {
        return Err(Error::Config(format!(
            "{} test sets for {} tasks",
            test_sets.len(),
            stream.num_tasks()
        )));
    }
    if test_sets.iter().any(Vec::is_empty) {
        return Err(Error::Config("every task needs a nonempty test set".into()));
    }
    if stream.batch_size() != cfg.batch_size {
        return Err(Error::Config(format!(
            "stream batch size {} != configured batch size {}",
            stream.batch_size(),
            cfg.batch_size
        )));
    }
    let num_classes = stream.num_classes();
    if (0..stream.num_tasks())
        .flat_map(|t| stream.task_classes(t).iter())
        .any(|&c| c >= num_classes)
    {
        return Err(Error::Config("labels must form the range 0..num_classes".into()));
    }

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let init_seed = master.next_u64();
    let train_seed = master.next_u64();
    let spec = ModelSpec {
        input_dim: stream.feature_dim(),
        hidden_dims: cfg.hidden_dims.clone(),
        embedding_dim: cfg.embedding_dim,
        num_classes,
    };
    let params = ModelParams::init(spec, init_seed)?;
    let adam = AdamState::new(params.num_params(), cfg.optimizer);
    let mut state = TrainerState {
        flat: Vec::with_capacity(params.num_params()),
        adam,
        params,
        bank: MemoryBank::new(cfg.memory_capacity),
        cached_pairs: None,
        rng: ChaCha8Rng::seed_from_u64(train_seed),
    };

    let mut stream = stream;
    let mut matrix = AccuracyMatrix::new();
    let mut diagnostics = RunDiagnostics::default();
    let mut step = 0usize;
    let mut task = 0usize;
    loop {
        match stream.next_batch() {
            StreamEvent::Batch(batch) => {
                let losses = match cfg.method {
                    Method::OnPro => {
                        onpro_train_step(&mut state, &batch, cfg, num_classes, step, task, &mut diagnostics)?
                    }
                    Method::Er => er_train_step(&mut state, &batch, cfg, num_classes)?,
                };
                diagnostics.loss_series.push(StepRecord { step, task, losses });
                if cfg.per_step_eval {
                    let mut total = 0.0;
                    for tests in test_sets.iter().take(task + 1) {
                        total += evaluate(&state.params, tests)?;
                    }
                    diagnostics.incremental_accuracy.push(IncrementalRecord {
                        step,
                        task,
                        mean_accuracy: total / (task + 1) as f64,
                    });
                }
                step += 1;
            }
            StreamEvent::TaskEnd(t) => {
                let mut row = Vec::with_capacity(t + 1);
                for tests in test_sets.iter().take(t + 1) {
                    row.push(evaluate(&state.params, tests)?);
                }
                matrix.push_row(row)?;
                task = t + 1;
            }
            StreamEvent::StreamEnd => break,
        }
    }
    Ok(RunOutcome { params: state.params, matrix, diagnostics })
}

/// The experience-replay baseline: identical loop skeleton with uniform
/// retrieval and one cross-entropy over the augmented combined batch.
pub fn run_er_baseline(
    stream: TaskStream,
    test_sets: &[Vec<Sample>],
    cfg: &MethodConfig,
    seed: u64,
) -> Result<RunOutcome> {
    let mut cfg = cfg.clone();
    cfg.method = Method::Er;
    cfg.use_ope_new = false;
    cfg.use_ope_seen = false;
    cfg.use_ins = false;
    cfg.use_apf = false;
    run_stream(stream, test_sets, &cfg, seed)
}

#[allow(clippy::too_many_arguments)]
fn onpro_train_step(
    state: &mut TrainerState,
    batch: &[Sample],
    cfg: &MethodConfig,
    num_classes: usize,
    step: usize,
    task: usize,
    diagnostics: &mut RunDiagnostics,
) -> Result<LossBreakdown> {
    let replay: Vec<MixedSample> = if cfg.use_apf {
        apf_sample(&state.bank, state.cached_pairs.as_ref(), &cfg.apf_config(), &mut state.rng)?
    } else {
        state
            .bank
            .sample_uniform(cfg.replay_batch_size, &mut state.rng)
            .iter()
            .map(MixedSample::from_plain)
            .collect()
    };
    let inputs =
        prepare_step_inputs(batch, &replay, num_classes, &cfg.augment, &mut state.rng)?;
    let computed = onpro_loss_and_grads(&state.params, &inputs, cfg)?;

    // Bank update precedes the probe so a freshly-seen class compares its
    // online prototype against exactly the stored batch; the parameter
    // update comes after so both sides use the same weights.
    state.bank.update(batch, &mut state.rng);
    if cfg.track_prototype_similarity {
        let sims =
            prototype_similarity_probe(&state.params, &state.bank, &computed.incoming_prototypes)?;
        for (class, similarity) in sims {
            diagnostics.similarity_series.push(SimilarityRecord {
                step,
                task,
                class,
                similarity,
            });
        }
    }
    state.apply_update(&computed.grads)?;
    // An empty replay batch carries no information about seen classes, so
    // the previous cache survives it.
    if !replay.is_empty() {
        state.cached_pairs = computed.next_pair_probabilities;
    }
    Ok(computed.breakdown)
}

fn er_train_step(
    state: &mut TrainerState,
    batch: &[Sample],
    cfg: &MethodConfig,
    num_classes: usize,
) -> Result<LossBreakdown> {
    let replay = state.bank.sample_uniform(cfg.replay_batch_size, &mut state.rng);
    let combined: Vec<&Sample> = batch.iter().chain(replay.iter()).collect();
    let rows: Vec<Vec<f64>> = combined
        .iter()
        .map(|s| augment_features(&s.features, &cfg.augment, &mut state.rng))
        .collect();
    let x = Tensor2::from_rows(&rows)?;
    let pass = state.params.forward(&x, true)?;
    let mut targets = Tensor2::zeros(combined.len(), num_classes);
    for (i, s) in combined.iter().enumerate() {
        targets.row_mut(i)[s.label] = 1.0;
    }
    let (l_ce, d_logits) = replay_ce(pass.logits.as_ref().expect("er forward"), &targets)?;
    let mut grads = state.params.zero_grads();
    state.params.backward(&pass, None, Some(&d_logits), &mut grads)?;
    state.bank.update(batch, &mut state.rng);
    state.apply_update(&grads)?;
    Ok(LossBreakdown::new(0.0, 0.0, 0.0, l_ce))
}
