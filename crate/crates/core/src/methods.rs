//! Continual training loops: fine-tuning, ER, DER, DER++, optionally joined
//! by the auxiliary stream and MAH head mapping, plus auxiliary pre-training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::buffer::{self, BufferEntry, Reservoir};
use crate::data::{augment, AuxiliaryPool, MixedStream, TaskLoader, TaskSequence, TaskSpec};
use crate::error::{Error, Result};
use crate::mah::{self, HeadMap};
use crate::metrics::{self, EvalRecord};
use crate::model::{BackboneConfig, Model};
use crate::seed::{self, Rng, Stream};
use crate::tensor::{Graph, Tensor};

/// Zero padding used by the random-crop augmentation.
pub const CROP_PAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Finetune,
    Er,
    Der,
    Derpp,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Er => "er",
            Method::Der => "der",
            Method::Derpp => "derpp",
        }
    }

    fn uses_buffer(self) -> bool {
        self != Method::Finetune
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    pub use_aux: bool,
    pub use_mah: bool,
    /// Weight of the stored-logit matching term.
    pub alpha: f64,
    /// Weight of the replayed cross-entropy term.
    pub beta: f64,
    pub lr: f64,
    pub epochs_per_task: usize,
    pub task_batch: usize,
    pub aux_batch: usize,
    pub replay_batch: usize,
    pub buffer_size: usize,
    /// Epochs of supervised pre-training on the whole auxiliary pool; 0 skips it.
    pub pretrain_epochs: usize,
    /// Random crop + flip on task, replay and auxiliary inputs.
    pub augment: bool,
    pub seed: u64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            method: Method::Derpp,
            use_aux: false,
            use_mah: false,
            alpha: 0.5,
            beta: 0.5,
            lr: 0.03,
            epochs_per_task: 5,
            task_batch: 32,
            aux_batch: 32,
            replay_batch: 32,
            buffer_size: 200,
            pretrain_epochs: 0,
            augment: false,
            seed: 0,
        }
    }
}

impl MethodConfig {
    pub fn validate(&self) -> Result<()> {
        if self.use_mah && !self.use_aux {
            return Err(Error::Config("MAH mapping requires the auxiliary stream".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.task_batch == 0 {
            return Err(Error::Config("task batch size must be positive".into()));
        }
        if self.method.uses_buffer() && (self.buffer_size == 0 || self.replay_batch == 0) {
            return Err(Error::Config(format!(
                "{} needs a non-empty buffer and replay batch",
                self.method.name()
            )));
        }
        Ok(())
    }
}

/// Losses of one optimizer step. The replay terms are already weighted, so
/// `total == classification + replay_mse + replay_ce`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLoss {
    pub total: f64,
    pub classification: f64,
    pub replay_mse: f64,
    pub replay_ce: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub iterations: Vec<IterationLoss>,
    /// Index of the first iteration of each task.
    pub boundaries: Vec<usize>,
    /// Per task, cumulative absolute gradient reaching each head's output
    /// weights and bias.
    pub head_grad: Vec<Vec<f64>>,
}

impl TrainTrace {
    fn append(&mut self, other: TrainTrace) {
        let offset = self.iterations.len();
        self.boundaries.extend(other.boundaries.iter().map(|b| b + offset));
        self.iterations.extend(other.iterations);
        self.head_grad.extend(other.head_grad);
    }
}

/// Mutable state carried across the tasks of one run.
#[derive(Debug)]
pub struct RunState {
    pub model: Model,
    pub head_map: HeadMap,
    pub buffer: Reservoir,
    aux_sampler: crate::data::AuxSampler,
    reservoir_rng: Rng,
    replay_rng: Rng,
    augment_rng: Rng,
    aux_augment_rng: Rng,
    seed: u64,
    step: usize,
}

impl RunState {
    pub fn new(model: Model, head_map: HeadMap, cfg: &MethodConfig) -> Self {
        let s = cfg.seed;
        Self {
            model,
            head_map,
            buffer: Reservoir::new(cfg.buffer_size),
            aux_sampler: crate::data::AuxSampler::new(seed::rng(s, Stream::AuxOrder)),
            reservoir_rng: seed::rng(s, Stream::Reservoir),
            replay_rng: seed::rng(s, Stream::Replay),
            augment_rng: seed::rng(s, Stream::Augment),
            aux_augment_rng: seed::rng(s, Stream::AuxAugment),
            seed: s,
            step: 0,
        }
    }
}

impl Clone for RunState {
    fn clone(&self) -> Self {
        Self {
            model: self.model.clone(),
            head_map: self.head_map.clone(),
            buffer: self.buffer.clone(),
            aux_sampler: self.aux_sampler.clone(),
            reservoir_rng: self.reservoir_rng.clone(),
            replay_rng: self.replay_rng.clone(),
            augment_rng: self.augment_rng.clone(),
            aux_augment_rng: self.aux_augment_rng.clone(),
            seed: self.seed,
            step: self.step,
        }
    }
}

fn maybe_augment(x: Tensor, on: bool, rng: &mut Rng) -> Result<Tensor> {
    if on {
        augment(&x, CROP_PAD, rng)
    } else {
        Ok(x)
    }
}

/// Trains on one task for `epochs_per_task` passes over its data.
///
/// Each step minimizes cross-entropy over the task batch joined with the
/// auxiliary batch (one softmax over all heads), plus the method's replay
/// terms over independent buffer samples. Task samples then enter the
/// reservoir together with the logits of that same forward pass.
pub fn train_task(
    state: &mut RunState,
    task: &TaskSpec,
    pool: &AuxiliaryPool,
    cfg: &MethodConfig,
) -> Result<TrainTrace> {
    if let Some(&c) = task
        .classes
        .iter()
        .find(|&&c| state.head_map.head_of_class(c).is_none())
    {
        return Err(Error::State(format!("class {c} of task {} has no head", task.index)));
    }
    let sample_shape = task.train.source().sample_shape().to_vec();
    let heads = state.model.num_heads();
    let task_rng = Rng::seed_from_u64(seed::splitmix64(
        seed::derive(state.seed, Stream::TaskOrder) ^ task.index as u64,
    ));
    let mut stream = MixedStream::new(task.train.len(), task_rng, seed::rng(0, Stream::AuxOrder));
    std::mem::swap(&mut stream.aux, &mut state.aux_sampler);
    let aux_bs = if cfg.use_aux { cfg.aux_batch } else { 0 };
    let iters = cfg.epochs_per_task * TaskLoader::batches_per_epoch(task.train.len(), cfg.task_batch);

    let mut trace = TrainTrace {
        boundaries: vec![0],
        head_grad: vec![vec![0.0; heads]],
        ..Default::default()
    };
    let result = (|| {
        for _ in 0..iters {
            let mb = stream.next_mixed_batch(task, pool, &state.head_map, cfg.task_batch, aux_bs)?;
            let n_task = mb.task.heads.len();
            let task_x = maybe_augment(mb.task.inputs.clone(), cfg.augment, &mut state.augment_rng)?;
            let (x, y) = match &mb.aux {
                Some(aux) => {
                    let aux_x = maybe_augment(aux.inputs.clone(), cfg.augment, &mut state.aux_augment_rng)?;
                    let mut y = mb.task.heads.clone();
                    y.extend_from_slice(&aux.heads);
                    (Tensor::concat_rows(&[&task_x, &aux_x])?, y)
                }
                None => (task_x, mb.task.heads.clone()),
            };

            let mut g = Graph::new();
            let fwd = state.model.forward(&mut g, &x)?;
            let ce = g.softmax_cross_entropy(fwd.logits, &y)?;
            let mut total = ce;
            let mut forwards = vec![fwd];
            let mut replay_mse = None;
            let mut replay_ce = None;

            if !state.buffer.is_empty() {
                if matches!(cfg.method, Method::Der | Method::Derpp) {
                    let picked = state.buffer.sample(cfg.replay_batch, &mut state.replay_rng);
                    let (bx, stored) = buffer::stack(&picked, &sample_shape);
                    let bx = maybe_augment(bx, cfg.augment, &mut state.augment_rng)?;
                    let f = state.model.forward(&mut g, &bx)?;
                    let target = g.constant(stored);
                    let m = g.mse(f.logits, target)?;
                    let m = g.scale(m, cfg.alpha);
                    total = g.add(total, m)?;
                    replay_mse = Some(m);
                    forwards.push(f);
                }
                if matches!(cfg.method, Method::Er | Method::Derpp) {
                    let weight = if cfg.method == Method::Er { 1.0 } else { cfg.beta };
                    let picked = state.buffer.sample(cfg.replay_batch, &mut state.replay_rng);
                    let labels = picked
                        .iter()
                        .map(|e| {
                            state
                                .head_map
                                .head_of_class(e.label)
                                .ok_or_else(|| Error::State(format!("buffered class {} lost its head", e.label)))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let (bx, _) = buffer::stack(&picked, &sample_shape);
                    let bx = maybe_augment(bx, cfg.augment, &mut state.augment_rng)?;
                    let f = state.model.forward(&mut g, &bx)?;
                    let c = g.softmax_cross_entropy(f.logits, &labels)?;
                    let c = g.scale(c, weight);
                    total = g.add(total, c)?;
                    replay_ce = Some(c);
                    forwards.push(f);
                }
            }

            let grads = g.backward(total)?;
            for f in &forwards {
                state.model.accumulate(f, &grads)?;
            }
            accumulate_head_grad(&state.model, trace.head_grad.last_mut().expect("one row"));
            let task_logits = g.value(forwards[0].logits).clone();
            state.model.step(cfg.lr)?;

            let value = |v: Option<crate::tensor::Var>| v.map_or(0.0, |v| g.value(v).item());
            trace.iterations.push(IterationLoss {
                total: g.value(total).item(),
                classification: g.value(ce).item(),
                replay_mse: value(replay_mse),
                replay_ce: value(replay_ce),
            });

            if cfg.method.uses_buffer() {
                for i in 0..n_task {
                    state.buffer.insert(
                        BufferEntry {
                            input: mb.task.inputs.row(i).to_vec(),
                            label: mb.task_classes[i],
                            stored_logits: task_logits.row(i).to_vec(),
                            insertion_step: state.step,
                        },
                        &mut state.reservoir_rng,
                    );
                }
            }
            state.step += 1;
        }
        Ok(())
    })();
    std::mem::swap(&mut stream.aux, &mut state.aux_sampler);
    result.map(|_| trace)
}

fn accumulate_head_grad(model: &Model, acc: &mut [f64]) {
    let params = model.params();
    let n = params.len();
    let heads = acc.len();
    if let Some(w) = &params[n - 2].grad {
        for (i, g) in w.data().iter().enumerate() {
            acc[i % heads] += g.abs();
        }
    }
    if let Some(b) = &params[n - 1].grad {
        for (a, g) in acc.iter_mut().zip(b.data()) {
            *a += g.abs();
        }
    }
}

/// Supervised training of the whole network on every auxiliary class, each
/// on its own unit of a temporary output layer. The output layer is then
/// re-initialized with the original head count. `epochs == 0` is a no-op.
pub fn pretrain_on_aux(
    model: &mut Model,
    pool: &AuxiliaryPool,
    epochs: usize,
    lr: f64,
    batch: usize,
    rng: &mut Rng,
) -> Result<()> {
    if epochs == 0 {
        return Ok(());
    }
    let samples = pool.all_samples();
    if samples.is_empty() {
        return Err(Error::Config("pre-training needs auxiliary data".into()));
    }
    let classes = pool.classes();
    let heads = model.num_heads();
    model.reset_output(classes.len(), rng);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch.max(1)) {
            let idx: Vec<usize> = chunk.iter().map(|&k| samples[k].0).collect();
            let labels: Vec<usize> = chunk
                .iter()
                .map(|&k| classes.binary_search(&samples[k].1).expect("pool class"))
                .collect();
            let x = pool.source().gather(&idx);
            let mut g = Graph::new();
            let f = model.forward(&mut g, &x)?;
            let loss = g.softmax_cross_entropy(f.logits, &labels)?;
            let grads = g.backward(loss)?;
            model.accumulate(&f, &grads)?;
            model.step(lr)?;
        }
    }
    model.reset_output(heads, rng);
    Ok(())
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub eval: EvalRecord,
    pub trace: TrainTrace,
    pub head_map: HeadMap,
    /// `(class, head)` pairs chosen for each task.
    pub assignments: Vec<Vec<(u32, usize)>>,
    /// Aux-owned head count after each task's mapping.
    pub aux_counts: Vec<usize>,
    pub buffer_labels: Vec<u32>,
    pub model: Model,
}

/// Trains on every task in order and evaluates after each.
///
/// The first task takes heads `0..|C_1|`; with the auxiliary stream the
/// selected auxiliary classes fill the remaining heads. Every later task is
/// mapped by MAH when enabled, otherwise onto the lowest free heads.
pub fn run_sequence(
    backbone: &BackboneConfig,
    cfg: &MethodConfig,
    sequence: &TaskSequence,
    pool: &AuxiliaryPool,
    peak_window: usize,
) -> Result<RunResult> {
    cfg.validate()?;
    if sequence.is_empty() {
        return Err(Error::Config("empty task sequence".into()));
    }
    if backbone.num_heads != sequence.total_classes() {
        return Err(Error::Config(format!(
            "{} heads for {} classes",
            backbone.num_heads,
            sequence.total_classes()
        )));
    }
    if cfg.use_aux && pool.selected().len() != sequence.future_classes() {
        return Err(Error::Config(format!(
            "auxiliary pool too small: need {} aux classes, have {}",
            sequence.future_classes(),
            pool.classes().len()
        )));
    }

    let mut model = Model::new(backbone.clone(), cfg.seed, &mut seed::rng(cfg.seed, Stream::ModelInit))?;
    if cfg.pretrain_epochs > 0 {
        let mut rng = seed::rng(cfg.seed, Stream::Pretrain);
        pretrain_on_aux(&mut model, pool, cfg.pretrain_epochs, cfg.lr, cfg.task_batch, &mut rng)?;
    }
    let mut head_map = HeadMap::new(backbone.num_heads);
    head_map.assign_first_task(&sequence.tasks[0].classes)?;
    if cfg.use_aux {
        head_map.place_aux(pool.selected())?;
    }
    let mut state = RunState::new(model, head_map, cfg);
    let mut trace = TrainTrace::default();
    let mut assignments = vec![sequence.tasks[0].classes.iter().copied().zip(0..).collect()];
    let mut aux_counts = vec![state.head_map.aux_count()];
    let mut class_il = Vec::new();
    let mut task_il = Vec::new();

    for (t, task) in sequence.tasks.iter().enumerate() {
        if t > 0 {
            let pairs = if cfg.use_mah {
                state.model.freeze();
                let profiles = mah::compute_profiles(&state.model, task);
                state.model.unfreeze();
                mah::assign_heads(&profiles?, &mut state.head_map)?
            } else {
                mah::sequential_assign(task, &mut state.head_map)?
            };
            assignments.push(pairs);
            aux_counts.push(state.head_map.aux_count());
        }
        trace.append(train_task(&mut state, task, pool, cfg)?);
        let seen = &sequence.tasks[..=t];
        class_il.push(metrics::eval_class_il(&state.model, seen, &state.head_map)?);
        task_il.push(
            seen.iter()
                .map(|s| metrics::eval_task_il(&state.model, s, &state.head_map))
                .collect::<Result<Vec<_>>>()?,
        );
    }

    let peaks = if sequence.len() > 1 {
        metrics::boundary_peaks(&trace, peak_window).unwrap_or_default()
    } else {
        vec![]
    };
    Ok(RunResult {
        eval: EvalRecord::from_matrices(class_il, task_il, peaks),
        trace,
        head_map: state.head_map,
        assignments,
        aux_counts,
        buffer_labels: state.buffer.entries().iter().map(|e| e.label).collect(),
        model: state.model,
    })
}
