//! Datasets, class-incremental task sequences, the auxiliary pool and the
//! mixed task/auxiliary mini-batch stream.

mod augment;
mod cifar;
mod synthetic;

pub use augment::{augment, crop_sample, flip_sample};
pub use cifar::{
    load_cifar10, load_cifar100, parse_cifar10, parse_cifar100, Cifar100Labels, CIFAR10_TEST_FILE, CIFAR10_TRAIN_FILES,
};
pub use synthetic::{make_synthetic, MeanLayout, SyntheticSpec};

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::mah::HeadMap;
use crate::seed::{self, Rng, Stream};
use crate::tensor::Tensor;

/// Labeled samples of one shape, stored compactly as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    features: Vec<f32>,
    labels: Vec<u32>,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, features: Vec<f32>, labels: Vec<u32>) -> Result<Self> {
        let w: usize = sample_shape.iter().product();
        if w == 0 || features.len() != w * labels.len() {
            return Err(Error::Dimension(format!(
                "{} features for {} samples of shape {sample_shape:?}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self {
            sample_shape,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let w = self.sample_len();
        &self.features[i * w..(i + 1) * w]
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<u32> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn indices_of(&self, class: u32) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Stacks the given samples into a `[n, ...sample_shape]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let w = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend(self.sample(i).iter().map(|&x| x as f64));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::new(shape, data).expect("shape matches")
    }

    /// FNV-1a digest over shape, labels and feature bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        self.sample_shape.iter().for_each(|&d| mix(d as u64));
        self.labels.iter().for_each(|&l| mix(l as u64));
        self.features.iter().for_each(|f| mix(f.to_bits() as u64));
        h
    }
}

/// Train and test partitions sharing a label space.
#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub train: Arc<Dataset>,
    pub test: Arc<Dataset>,
}

/// A subset of a shared dataset, by index.
#[derive(Clone, Debug)]
pub struct DataView {
    source: Arc<Dataset>,
    indices: Vec<usize>,
}

impl DataView {
    pub fn new(source: Arc<Dataset>, indices: Vec<usize>) -> Self {
        Self { source, indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn source(&self) -> &Dataset {
        &self.source
    }

    /// Source indices of the members.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn label(&self, k: usize) -> u32 {
        self.source.labels()[self.indices[k]]
    }

    /// Stacks members at positions `ks` (positions within the view).
    pub fn gather(&self, ks: &[usize]) -> Tensor {
        let idx: Vec<usize> = ks.iter().map(|&k| self.indices[k]).collect();
        self.source.gather(&idx)
    }

    pub fn all(&self) -> Tensor {
        self.source.gather(&self.indices)
    }

    pub fn labels(&self) -> Vec<u32> {
        self.indices.iter().map(|&i| self.source.labels()[i]).collect()
    }
}

/// One task of the sequence: its class set and data.
#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub index: usize,
    pub classes: Vec<u32>,
    pub train: DataView,
    pub test: DataView,
}

impl TaskSpec {
    /// Training-sample count per class, in `classes` order.
    pub fn class_counts(&self) -> Vec<(u32, usize)> {
        let labels = self.train.labels();
        self.classes
            .iter()
            .map(|&c| (c, labels.iter().filter(|&&l| l == c).count()))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TaskSequence {
    pub tasks: Vec<TaskSpec>,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn total_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.classes.len()).sum()
    }

    /// Number of classes in every task after the first: the minimum
    /// auxiliary class count.
    pub fn future_classes(&self) -> usize {
        self.tasks.iter().skip(1).map(|t| t.classes.len()).sum()
    }

    pub fn all_classes(&self) -> Vec<u32> {
        self.tasks.iter().flat_map(|t| t.classes.iter().copied()).collect()
    }
}

/// Partitions `candidates` into `num_tasks` disjoint tasks of
/// `classes_per_task` classes, in a seed-determined order.
pub fn build_sequence(
    data: &SplitDataset,
    candidates: &[u32],
    classes_per_task: usize,
    num_tasks: usize,
    seed: u64,
) -> Result<TaskSequence> {
    let mut pool = candidates.to_vec();
    pool.sort_unstable();
    pool.dedup();
    if pool.len() != candidates.len() {
        return Err(Error::Config("duplicate class ids in task class list".into()));
    }
    let need = classes_per_task * num_tasks;
    if classes_per_task == 0 || num_tasks == 0 {
        return Err(Error::Config("need at least one task and one class per task".into()));
    }
    if pool.len() < need {
        return Err(Error::Config(format!(
            "{num_tasks} tasks of {classes_per_task} classes need {need} classes, dataset offers {}",
            pool.len()
        )));
    }
    let mut rng = seed::rng(seed, Stream::Split);
    pool.shuffle(&mut rng);
    let mut tasks = Vec::with_capacity(num_tasks);
    for (t, classes) in pool[..need].chunks(classes_per_task).enumerate() {
        let train = select(&data.train, classes)?;
        let test = select(&data.test, classes)?;
        tasks.push(TaskSpec {
            index: t,
            classes: classes.to_vec(),
            train: DataView::new(data.train.clone(), train),
            test: DataView::new(data.test.clone(), test),
        });
    }
    Ok(TaskSequence { tasks })
}

fn select(ds: &Dataset, classes: &[u32]) -> Result<Vec<usize>> {
    for &c in classes {
        if !ds.labels().contains(&c) {
            return Err(Error::Config(format!("class {c} has no samples")));
        }
    }
    Ok((0..ds.len()).filter(|&i| classes.contains(&ds.labels()[i])).collect())
}

/// Auxiliary classes and data, disjoint from the task stream.
///
/// Which auxiliary classes are currently active, and on which heads, is
/// recorded in the [`HeadMap`]; the pool only holds the data.
#[derive(Clone, Debug)]
pub struct AuxiliaryPool {
    classes: Vec<u32>,
    source: Arc<Dataset>,
    by_class: BTreeMap<u32, Vec<usize>>,
    selected: Vec<u32>,
}

impl AuxiliaryPool {
    /// All auxiliary classes `C_A`.
    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    /// The initial active subset, in head-placement order.
    pub fn selected(&self) -> &[u32] {
        &self.selected
    }

    pub fn source(&self) -> &Dataset {
        &self.source
    }

    /// Source indices of the samples of one auxiliary class.
    pub fn class_indices(&self, class: u32) -> &[usize] {
        self.by_class.get(&class).map_or(&[], Vec::as_slice)
    }

    /// Every auxiliary sample with its class, over all of `C_A`.
    pub fn all_samples(&self) -> Vec<(usize, u32)> {
        self.by_class
            .iter()
            .flat_map(|(&c, idx)| idx.iter().map(move |&i| (i, c)))
            .collect()
    }

    /// An empty pool for runs without auxiliary data.
    pub fn empty(source: Arc<Dataset>) -> Self {
        Self {
            classes: vec![],
            source,
            by_class: BTreeMap::new(),
            selected: vec![],
        }
    }
}

/// Builds the auxiliary pool and draws the initial active subset.
///
/// `shares_label_space` is true when auxiliary and task classes come from
/// the same dataset, in which case their ids must not overlap.
pub fn build_aux_pool(
    source: Arc<Dataset>,
    aux_classes: &[u32],
    sequence: &TaskSequence,
    shares_label_space: bool,
    seed: u64,
) -> Result<AuxiliaryPool> {
    let mut classes = aux_classes.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() != aux_classes.len() {
        return Err(Error::Config("duplicate class ids in auxiliary class list".into()));
    }
    let need = sequence.future_classes();
    if classes.len() < need {
        return Err(Error::Config(format!(
            "auxiliary pool too small: need {need} aux classes, have {}",
            classes.len()
        )));
    }
    if shares_label_space {
        let task = sequence.all_classes();
        let overlap: Vec<u32> = classes.iter().copied().filter(|c| task.contains(c)).collect();
        if !overlap.is_empty() {
            return Err(Error::Config(format!(
                "auxiliary classes {overlap:?} also appear in the task stream"
            )));
        }
    }
    let mut by_class = BTreeMap::new();
    for &c in &classes {
        let idx = source.indices_of(c);
        if idx.is_empty() {
            return Err(Error::Config(format!("auxiliary class {c} has no samples")));
        }
        by_class.insert(c, idx);
    }
    let mut rng = seed::rng(seed, Stream::AuxSelect);
    let selected = rand::seq::index::sample(&mut rng, classes.len(), need)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    Ok(AuxiliaryPool {
        classes,
        source,
        by_class,
        selected,
    })
}

/// Inputs plus head-index labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Tensor,
    pub heads: Vec<usize>,
}

/// One training step's worth of task and auxiliary samples.
#[derive(Clone, Debug)]
pub struct MixedBatch {
    /// Un-augmented task inputs.
    pub task: Batch,
    /// Global class ids of the task samples.
    pub task_classes: Vec<u32>,
    /// Un-augmented auxiliary inputs with labels already remapped to heads.
    /// `None` when no auxiliary class is active or the aux batch size is 0.
    pub aux: Option<Batch>,
}

/// Shuffled epoch iteration over a task's training set.
#[derive(Clone, Debug)]
pub struct TaskLoader {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl TaskLoader {
    pub fn new(len: usize, rng: Rng) -> Self {
        let mut loader = Self {
            order: (0..len).collect(),
            pos: len,
            rng,
        };
        loader.reshuffle();
        loader
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    /// Next chunk of view positions. The final chunk of an epoch may be short;
    /// the following call starts a reshuffled epoch.
    pub fn next_chunk(&mut self, bs: usize) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.reshuffle();
        }
        let end = (self.pos + bs).min(self.order.len());
        let chunk = self.order[self.pos..end].to_vec();
        self.pos = end;
        chunk
    }

    pub fn batches_per_epoch(len: usize, bs: usize) -> usize {
        len.div_ceil(bs.max(1))
    }
}

/// Round-robin sampler over the active auxiliary classes, with a shuffled
/// cursor per class.
#[derive(Clone, Debug)]
pub struct AuxSampler {
    cursors: BTreeMap<u32, (Vec<usize>, usize)>,
    next_class: usize,
    rng: Rng,
}

impl AuxSampler {
    pub fn new(rng: Rng) -> Self {
        Self {
            cursors: BTreeMap::new(),
            next_class: 0,
            rng,
        }
    }

    /// Draws `k` auxiliary samples balanced across the active classes.
    pub fn draw(&mut self, pool: &AuxiliaryPool, head_map: &HeadMap, k: usize) -> Option<Batch> {
        let active = head_map.aux_assignments();
        if k == 0 || active.is_empty() {
            return None;
        }
        let mut idx = Vec::with_capacity(k);
        let mut heads = Vec::with_capacity(k);
        for _ in 0..k {
            let (head, class) = active[self.next_class % active.len()];
            self.next_class = (self.next_class + 1) % active.len();
            let members = pool.class_indices(class);
            let (order, pos) = self
                .cursors
                .entry(class)
                .or_insert_with(|| (members.to_vec(), members.len()));
            if *pos >= order.len() {
                order.shuffle(&mut self.rng);
                *pos = 0;
            }
            idx.push(order[*pos]);
            *pos += 1;
            heads.push(head);
        }
        Some(Batch {
            inputs: pool.source().gather(&idx),
            heads,
        })
    }
}

/// Task loader and auxiliary sampler driven together, one call per step.
#[derive(Debug)]
pub struct MixedStream {
    pub task: TaskLoader,
    pub aux: AuxSampler,
}

impl MixedStream {
    pub fn new(task_len: usize, task_rng: Rng, aux_rng: Rng) -> Self {
        Self {
            task: TaskLoader::new(task_len, task_rng),
            aux: AuxSampler::new(aux_rng),
        }
    }

    /// `task_bs` samples of `D_t` (class labels mapped to heads) plus
    /// `aux_bs` samples of the active auxiliary classes.
    pub fn next_mixed_batch(
        &mut self,
        task: &TaskSpec,
        pool: &AuxiliaryPool,
        head_map: &HeadMap,
        task_bs: usize,
        aux_bs: usize,
    ) -> Result<MixedBatch> {
        if task.train.is_empty() {
            return Err(Error::State(format!("task {} has no training data", task.index)));
        }
        let ks = self.task.next_chunk(task_bs);
        let task_classes: Vec<u32> = ks.iter().map(|&k| task.train.label(k)).collect();
        let heads = task_classes
            .iter()
            .map(|&c| {
                head_map
                    .head_of_class(c)
                    .ok_or_else(|| Error::State(format!("class {c} has no head")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MixedBatch {
            task: Batch {
                inputs: task.train.gather(&ks),
                heads,
            },
            task_classes,
            aux: self.aux.draw(pool, head_map, aux_bs),
        })
    }
}
