//! Declarative experiment configs, grid execution and result aggregation.
//!
//! A config is a TOML document with `version = 1`; see the repository README
//! for the full key reference. One grid cell is a (method, buffer size,
//! setting, pretrain flag) combination; every cell runs once per seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{
    build_aux_pool, build_sequence, load_cifar10, load_cifar100, make_synthetic, AuxiliaryPool, Cifar100Labels,
    Dataset, MeanLayout, SplitDataset, SyntheticSpec, TaskSequence,
};
use crate::error::{Error, Result};
use crate::mah::HeadMap;
use crate::methods::{run_sequence, Method, MethodConfig, TrainTrace};
use crate::metrics::{mean_std, EvalRecord, DEFAULT_PEAK_WINDOW};
use crate::model::{digest_json, BackboneConfig, BackboneKind};
use crate::seed::{self, Stream};

pub const CONFIG_VERSION: u32 = 1;
/// Default output directory when the config names none.
pub const OUTPUT_DIR_ENV: &str = "AUXCL_OUTPUT_DIR";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PLAN_FILE: &str = "plan.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    #[serde(default = "one")]
    pub workers: usize,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub aux: AuxConfig,
    pub sequence: SequenceConfig,
    #[serde(default)]
    pub backbone: BackboneSection,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub grid: GridConfig,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory of the binary CIFAR files.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    /// Fixes the synthetic data across run seeds; by default each run seed
    /// generates its own data.
    #[serde(default)]
    pub data_seed: Option<u64>,
    /// Classes eligible for the task stream; all non-auxiliary classes when absent.
    #[serde(default)]
    pub task_classes: Option<Vec<u32>>,
    /// Keep only the first `n` training samples of each class.
    #[serde(default)]
    pub max_train_per_class: Option<usize>,
    #[serde(default)]
    pub max_test_per_class: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxSource {
    #[default]
    None,
    /// Held-out classes of the task dataset.
    Same,
    Synthetic,
    Cifar10,
    Cifar100,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelGranularity {
    #[default]
    Coarse,
    Fine,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxConfig {
    #[serde(default)]
    pub source: AuxSource,
    /// `C_A`. Defaults to every class of a separate source, or to the
    /// non-task classes when the source is the task dataset.
    #[serde(default)]
    pub classes: Option<Vec<u32>>,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub labels: LabelGranularity,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub max_per_class: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    /// Fixes the class order across run seeds; by default each run seed
    /// draws its own order.
    #[serde(default)]
    pub split_seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    /// Defaults to `mlp` for flat data and `small_cnn` for images.
    #[serde(default)]
    pub kind: Option<BackboneKind>,
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub channels: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs_per_task: usize,
    pub lr: f64,
    pub task_batch: usize,
    pub aux_batch: usize,
    pub replay_batch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub augment: bool,
    /// Pre-training epochs used by cells with the pretrain flag.
    pub pretrain_epochs: usize,
    pub peak_window: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let m = MethodConfig::default();
        Self {
            epochs_per_task: m.epochs_per_task,
            lr: m.lr,
            task_batch: m.task_batch,
            aux_batch: m.aux_batch,
            replay_batch: m.replay_batch,
            alpha: m.alpha,
            beta: m.beta,
            augment: m.augment,
            pretrain_epochs: 5,
            peak_window: DEFAULT_PEAK_WINDOW,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Vanilla,
    Aux,
    AuxMah,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::Vanilla => "vanilla",
            Setting::Aux => "aux",
            Setting::AuxMah => "aux_mah",
        }
    }

    fn flags(self) -> (bool, bool) {
        match self {
            Setting::Vanilla => (false, false),
            Setting::Aux => (true, false),
            Setting::AuxMah => (true, true),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub methods: Vec<Method>,
    pub buffer_sizes: Vec<usize>,
    pub settings: Vec<Setting>,
    pub pretrain: Vec<bool>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Derpp],
            buffer_sizes: vec![200],
            settings: vec![Setting::Vanilla],
            pretrain: vec![false],
        }
    }
}

/// One grid cell for one seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cell {
    pub method: Method,
    pub buffer: usize,
    pub setting: Setting,
    pub pretrain: bool,
    pub seed: u64,
}

impl Cell {
    /// Setting column of the metrics file, e.g. `aux_mah` or `vanilla+pretrain`.
    pub fn setting_label(&self) -> String {
        if self.pretrain {
            format!("{}+pretrain", self.setting.name())
        } else {
            self.setting.name().to_string()
        }
    }

    pub fn file_stem(&self) -> String {
        format!(
            "{}_b{}_{}_s{}",
            self.method.name(),
            self.buffer,
            self.setting_label().replace('+', "_"),
            self.seed
        )
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
    if cfg.version != CONFIG_VERSION {
        return Err(Error::Config(format!(
            "unsupported config version {} (expected {CONFIG_VERSION})",
            cfg.version
        )));
    }
    Ok(cfg)
}

/// Output directory: the explicit override, then the config, then the
/// environment, then `auxcl-out`.
pub fn output_dir(cfg: &ExperimentConfig, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("auxcl-out"))
}

impl ExperimentConfig {
    /// Every cell in output order: methods, buffers, settings, pretrain
    /// flags, seeds. Fine-tuning keeps no buffer and runs once with size 0.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &method in &self.grid.methods {
            let buffers: Vec<usize> = if method == Method::Finetune {
                vec![0]
            } else {
                self.grid.buffer_sizes.clone()
            };
            for &buffer in &buffers {
                for &setting in &self.grid.settings {
                    for &pretrain in &self.grid.pretrain {
                        for &seed in &self.seeds {
                            out.push(Cell {
                                method,
                                buffer,
                                setting,
                                pretrain,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn method_config(&self, cell: &Cell) -> MethodConfig {
        let t = &self.training;
        let (use_aux, use_mah) = cell.setting.flags();
        MethodConfig {
            method: cell.method,
            use_aux,
            use_mah,
            alpha: t.alpha,
            beta: t.beta,
            lr: t.lr,
            epochs_per_task: t.epochs_per_task,
            task_batch: t.task_batch,
            aux_batch: t.aux_batch,
            replay_batch: t.replay_batch,
            buffer_size: cell.buffer,
            pretrain_epochs: if cell.pretrain { t.pretrain_epochs } else { 0 },
            augment: t.augment,
            seed: cell.seed,
        }
    }

    fn needs_aux(&self) -> bool {
        self.grid.settings.iter().any(|s| s.flags().0) || self.grid.pretrain.contains(&true)
    }

    /// Static checks that need no data.
    pub fn check(&self) -> Result<()> {
        let cfg_err = |m: &str| Err(Error::Config(m.into()));
        if self.seeds.is_empty() {
            return cfg_err("at least one seed is required");
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return cfg_err("duplicate seeds");
        }
        if self.workers == 0 {
            return cfg_err("workers must be positive");
        }
        let g = &self.grid;
        if g.methods.is_empty() || g.settings.is_empty() || g.pretrain.is_empty() {
            return cfg_err("grid has no cells");
        }
        if g.buffer_sizes.is_empty() && g.methods.iter().any(|&m| m != Method::Finetune) {
            return cfg_err("grid.buffer_sizes is empty");
        }
        if self.training.peak_window == 0 {
            return cfg_err("training.peak_window must be positive");
        }
        if self.needs_aux() && self.aux.source == AuxSource::None {
            return cfg_err("auxiliary settings or pre-training need an [aux] source");
        }
        if self.grid.pretrain.contains(&true) && self.training.pretrain_epochs == 0 {
            return cfg_err("pretrain cells need training.pretrain_epochs > 0");
        }
        for cell in self.cells() {
            self.method_config(&cell).validate()?;
        }
        Ok(())
    }
}

/// Task data, sequence and auxiliary pool of one seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub sequence: TaskSequence,
    pub pool: AuxiliaryPool,
    pub backbone: BackboneConfig,
}

/// Datasets read from disk once and shared by every seed.
#[derive(Clone, Debug, Default)]
struct Loaded {
    task: Option<SplitDataset>,
    aux: Option<Arc<Dataset>>,
}

fn cap_per_class(ds: Dataset, cap: Option<usize>) -> Result<Dataset> {
    let Some(cap) = cap else { return Ok(ds) };
    let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
    let mut keep = Vec::new();
    for (i, &l) in ds.labels().iter().enumerate() {
        let n = seen.entry(l).or_default();
        if *n < cap {
            *n += 1;
            keep.push(i);
        }
    }
    let mut features = Vec::with_capacity(keep.len() * ds.sample_len());
    for &i in &keep {
        features.extend_from_slice(ds.sample(i));
    }
    let labels = keep.iter().map(|&i| ds.labels()[i]).collect();
    Dataset::new(ds.sample_shape().to_vec(), features, labels)
}

fn required<'a, T>(v: &'a Option<T>, what: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Config(format!("{what} is required")))
}

fn synthetic_spec<'a>(v: &'a Option<SyntheticSpec>, what: &str) -> Result<&'a SyntheticSpec> {
    let spec = required(v, what)?;
    spec.validate()?;
    Ok(spec)
}

impl Loaded {
    fn read(cfg: &ExperimentConfig) -> Result<Self> {
        let d = &cfg.dataset;
        let task = match d.kind {
            DatasetKind::Synthetic => None,
            DatasetKind::Cifar10 => {
                let s = load_cifar10(required(&d.path, "dataset.path")?)?;
                Some(SplitDataset {
                    train: Arc::new(cap_per_class(Arc::unwrap_or_clone(s.train), d.max_train_per_class)?),
                    test: Arc::new(cap_per_class(Arc::unwrap_or_clone(s.test), d.max_test_per_class)?),
                })
            }
        };
        let a = &cfg.aux;
        let aux = if !cfg.needs_aux() {
            None
        } else {
            match a.source {
                AuxSource::Cifar10 => Some(load_cifar10(required(&a.path, "aux.path")?)?.train),
                AuxSource::Cifar100 => {
                    let labels = match a.labels {
                        LabelGranularity::Coarse => Cifar100Labels::Coarse,
                        LabelGranularity::Fine => Cifar100Labels::Fine,
                    };
                    Some(load_cifar100(required(&a.path, "aux.path")?, labels)?.train)
                }
                _ => None,
            }
        };
        let aux = aux
            .map(|ds| cap_per_class(Arc::unwrap_or_clone(ds), a.max_per_class).map(Arc::new))
            .transpose()?;
        Ok(Self { task, aux })
    }

    fn prepare(&self, cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
        let d = &cfg.dataset;
        let data = match d.kind {
            DatasetKind::Synthetic => {
                let spec = synthetic_spec(&d.synthetic, "dataset.synthetic")?;
                make_synthetic(spec, d.data_seed.unwrap_or(seed))
            }
            DatasetKind::Cifar10 => self.task.clone().expect("loaded"),
        };
        let all = data.train.classes();
        let same = cfg.aux.source == AuxSource::Same;
        let task_classes = match (&d.task_classes, &cfg.aux.classes) {
            (Some(t), _) => t.clone(),
            (None, Some(a)) if same => all.iter().copied().filter(|c| !a.contains(c)).collect(),
            (None, None) if same && cfg.needs_aux() => {
                return Err(Error::Config(
                    "aux.source = \"same\" needs dataset.task_classes or aux.classes".into(),
                ))
            }
            (None, _) => all.clone(),
        };
        let s = &cfg.sequence;
        let split = s.split_seed.unwrap_or(seed);
        let sequence = build_sequence(&data, &task_classes, s.classes_per_task, s.num_tasks, split)?;

        let pool = if !cfg.needs_aux() {
            AuxiliaryPool::empty(data.train.clone())
        } else {
            let (source, shared) = match cfg.aux.source {
                AuxSource::None => unreachable!("checked"),
                AuxSource::Same => (data.train.clone(), true),
                AuxSource::Synthetic => {
                    let spec = synthetic_spec(&cfg.aux.synthetic, "aux.synthetic")?;
                    let aux_seed = seed::derive(d.data_seed.unwrap_or(seed), Stream::AuxData);
                    let ds = Arc::unwrap_or_clone(make_synthetic(spec, aux_seed).train);
                    (Arc::new(cap_per_class(ds, cfg.aux.max_per_class)?), false)
                }
                AuxSource::Cifar10 | AuxSource::Cifar100 => (self.aux.clone().expect("loaded"), false),
            };
            if source.sample_shape() != data.train.sample_shape() {
                return Err(Error::Config(format!(
                    "auxiliary samples have shape {:?}, task samples {:?}",
                    source.sample_shape(),
                    data.train.sample_shape()
                )));
            }
            let aux_classes = match &cfg.aux.classes {
                Some(c) => c.clone(),
                None if shared => all.iter().copied().filter(|c| !task_classes.contains(c)).collect(),
                None => source.classes(),
            };
            build_aux_pool(source, &aux_classes, &sequence, shared, seed)?
        };

        let shape = data.train.sample_shape().to_vec();
        let heads = sequence.total_classes();
        let b = &cfg.backbone;
        let kind = b.kind.unwrap_or(if shape.len() == 3 {
            BackboneKind::SmallCnn
        } else {
            BackboneKind::Mlp
        });
        let mut backbone = match kind {
            BackboneKind::Mlp => {
                let mut bb = BackboneConfig::mlp(shape.iter().product(), heads);
                bb.input_shape = shape.clone();
                bb
            }
            BackboneKind::SmallCnn => {
                let [c, h, w] = shape[..] else {
                    return Err(Error::Config(format!("small_cnn needs image data, got shape {shape:?}")));
                };
                BackboneConfig::small_cnn([c, h, w], heads)
            }
        };
        if let Some(h) = &b.hidden {
            backbone.hidden = h.clone();
        }
        if let Some(c) = &b.channels {
            backbone.channels = c.clone();
        }
        if cfg.training.augment && shape.len() != 3 {
            return Err(Error::Config("augmentation needs image data".into()));
        }
        Ok(Prepared {
            sequence,
            pool,
            backbone,
        })
    }
}

/// Digest of everything that defines a cell apart from its seed.
pub fn cell_digest(cfg: &ExperimentConfig, cell: &Cell, backbone: &BackboneConfig) -> String {
    let mut method = cfg.method_config(cell);
    method.seed = 0;
    #[derive(Serialize)]
    struct Key<'a> {
        version: u32,
        dataset: &'a DatasetConfig,
        aux: &'a AuxConfig,
        sequence: &'a SequenceConfig,
        backbone: &'a BackboneConfig,
        method: MethodConfig,
        peak_window: usize,
    }
    digest_json(&Key {
        version: cfg.version,
        dataset: &cfg.dataset,
        aux: &cfg.aux,
        sequence: &cfg.sequence,
        backbone,
        method,
        peak_window: cfg.training.peak_window,
    })
}

/// Result of one cell, without the model.
#[derive(Clone, Debug, Serialize)]
pub struct CellRun {
    pub config_digest: String,
    pub seed: u64,
    pub method: Method,
    pub buffer: usize,
    pub setting: String,
    pub method_config: MethodConfig,
    pub backbone: BackboneConfig,
    pub task_classes: Vec<Vec<u32>>,
    pub eval: EvalRecord,
    pub head_map: HeadMap,
    pub assignments: Vec<Vec<(u32, usize)>>,
    pub aux_counts: Vec<usize>,
    pub buffer_labels: Vec<u32>,
    pub model_checksum: u64,
    #[serde(skip)]
    pub trace: TrainTrace,
    #[serde(skip)]
    pub stem: String,
}

/// Validates the config and prepares every seed without training.
/// Returns the number of runs the grid would execute.
pub fn dry_run(cfg: &ExperimentConfig) -> Result<usize> {
    cfg.check()?;
    let loaded = Loaded::read(cfg)?;
    for &s in &cfg.seeds {
        loaded.prepare(cfg, s)?;
    }
    Ok(cfg.cells().len())
}

/// Runs the whole grid and returns the cell results in grid order.
pub fn execute(cfg: &ExperimentConfig) -> Result<Vec<CellRun>> {
    use rayon::prelude::*;

    cfg.check()?;
    let loaded = Loaded::read(cfg)?;
    let prepared: BTreeMap<u64, Prepared> = cfg
        .seeds
        .iter()
        .map(|&s| loaded.prepare(cfg, s).map(|p| (s, p)))
        .collect::<Result<_>>()?;
    let cells = cfg.cells();
    let run = |cell: &Cell| -> Result<CellRun> {
        let p = &prepared[&cell.seed];
        let mcfg = cfg.method_config(cell);
        let r = run_sequence(&p.backbone, &mcfg, &p.sequence, &p.pool, cfg.training.peak_window)?;
        Ok(CellRun {
            config_digest: cell_digest(cfg, cell, &p.backbone),
            seed: cell.seed,
            method: cell.method,
            buffer: cell.buffer,
            setting: cell.setting_label(),
            method_config: mcfg,
            backbone: p.backbone.clone(),
            task_classes: p.sequence.tasks.iter().map(|t| t.classes.clone()).collect(),
            eval: r.eval,
            head_map: r.head_map,
            assignments: r.assignments,
            aux_counts: r.aux_counts,
            buffer_labels: r.buffer_labels,
            model_checksum: r.model.checksum(),
            trace: r.trace,
            stem: cell.file_stem(),
        })
    };
    if cfg.workers == 1 {
        return cells.iter().map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::State(format!("worker pool: {e}")))?;
    pool.install(|| cells.par_iter().map(run).collect())
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

/// Metrics CSV: one row per run, in grid order.
pub fn metrics_csv(runs: &[CellRun], num_tasks: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["seed", "method", "buffer", "setting", "class_il", "task_il", "task_il_final"]
        .map(String::from)
        .to_vec();
    header.extend((0..num_tasks).map(|t| format!("acc_task_{t}")));
    header.extend(["mean_boundary_peak".to_string(), "config_digest".to_string()]);
    w.write_record(&header).map_err(csv_err)?;
    for r in runs {
        let mut row = vec![
            r.seed.to_string(),
            r.method.name().to_string(),
            r.buffer.to_string(),
            r.setting.clone(),
            f6(r.eval.class_il_final),
            f6(r.eval.task_il_avg),
            f6(r.eval.task_il_final),
        ];
        let last = r.eval.class_il.last().cloned().unwrap_or_default();
        row.extend((0..num_tasks).map(|t| last.get(t).map_or(String::new(), |&a| f6(a))));
        row.push(r.eval.mean_boundary_peak().map_or(String::new(), f6));
        row.push(r.config_digest.clone());
        w.write_record(&row).map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::State(e.to_string()))?)
        .map_err(|e| Error::State(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Per-iteration losses of one run.
pub fn trace_csv(trace: &TrainTrace) -> String {
    let mut out = String::from("iteration,task,total,classification,replay_mse,replay_ce\n");
    let mut task = 0;
    for (i, it) in trace.iterations.iter().enumerate() {
        while task + 1 < trace.boundaries.len() && trace.boundaries[task + 1] <= i {
            task += 1;
        }
        out.push_str(&format!(
            "{i},{task},{},{},{},{}\n",
            it.total, it.classification, it.replay_mse, it.replay_ce
        ));
    }
    out
}

/// A planned (method, buffer, setting) cell, used by [`report`] to spot
/// missing or partial results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedCell {
    pub method: String,
    pub buffer: usize,
    pub setting: String,
    pub config_digest: String,
    pub seeds: Vec<u64>,
}

/// Writes metrics, per-run summaries, traces, the plan and a normalized copy
/// of the config. Existing files of the same names are overwritten.
pub fn write_outputs(cfg: &ExperimentConfig, runs: &[CellRun], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("runs"))?;
    fs::create_dir_all(dir.join("traces"))?;
    fs::write(dir.join(METRICS_FILE), metrics_csv(runs, cfg.sequence.num_tasks)?)?;
    let mut plan: Vec<PlannedCell> = Vec::new();
    for r in runs {
        let json = serde_json::to_string_pretty(r).map_err(|e| Error::State(e.to_string()))?;
        fs::write(dir.join("runs").join(format!("{}.json", r.stem)), json + "\n")?;
        fs::write(dir.join("traces").join(format!("{}.csv", r.stem)), trace_csv(&r.trace))?;
        match plan.iter_mut().find(|p| p.config_digest == r.config_digest) {
            Some(p) => p.seeds.push(r.seed),
            None => plan.push(PlannedCell {
                method: r.method.name().into(),
                buffer: r.buffer,
                setting: r.setting.clone(),
                config_digest: r.config_digest.clone(),
                seeds: vec![r.seed],
            }),
        }
    }
    let plan = serde_json::to_string_pretty(&plan).map_err(|e| Error::State(e.to_string()))?;
    fs::write(dir.join(PLAN_FILE), plan + "\n")?;
    let cfg_text = toml::to_string(cfg).map_err(|e| Error::State(e.to_string()))?;
    fs::write(dir.join("config.toml"), cfg_text)?;
    Ok(())
}

/// Executes the grid and writes everything into `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<CellRun>> {
    let runs = execute(cfg)?;
    write_outputs(cfg, &runs, dir)?;
    Ok(runs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
}

/// Mean and sample deviation of one metric over the seeds of a cell.
pub type Stat = (f64, f64);

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub buffer: usize,
    pub setting: String,
    pub config_digest: String,
    pub seeds: usize,
    pub class_il: Option<Stat>,
    pub task_il: Option<Stat>,
    pub task_il_final: Option<Stat>,
    pub peak: Option<Stat>,
    pub flags: Vec<String>,
}

fn stat(xs: &[f64]) -> Option<Stat> {
    (!xs.is_empty()).then(|| mean_std(xs))
}

/// Aggregates `metrics.csv` in `dir` per (method, buffer, setting, digest).
///
/// Rows with different digests are never pooled. Cells with fewer seeds than
/// planned, planned cells without rows, and settings split across digests
/// are flagged rather than rejected.
pub fn report(dir: &Path) -> Result<Vec<ReportRow>> {
    let path = dir.join(METRICS_FILE);
    let mut rdr = csv::Reader::from_path(&path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("{METRICS_FILE} lacks column {name}")))
    };
    let (c_method, c_buffer, c_setting, c_digest) =
        (col("method")?, col("buffer")?, col("setting")?, col("config_digest")?);
    let (c_cil, c_til, c_tilf, c_peak) = (
        col("class_il")?,
        col("task_il")?,
        col("task_il_final")?,
        col("mean_boundary_peak")?,
    );

    struct Acc {
        key: (String, usize, String, String),
        vals: [Vec<f64>; 4],
        seeds: usize,
    }
    let mut groups: Vec<Acc> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let num = |c: usize| -> Result<Option<f64>> {
            let s = rec.get(c).unwrap_or("");
            if s.is_empty() {
                return Ok(None);
            }
            s.parse()
                .map(Some)
                .map_err(|_| Error::Format(format!("row {}: bad number {s:?}", line + 2)))
        };
        let buffer = rec[c_buffer]
            .parse()
            .map_err(|_| Error::Format(format!("row {}: bad buffer size", line + 2)))?;
        let key = (
            rec[c_method].to_string(),
            buffer,
            rec[c_setting].to_string(),
            rec[c_digest].to_string(),
        );
        let idx = match groups.iter().position(|g| g.key == key) {
            Some(i) => i,
            None => {
                groups.push(Acc {
                    key,
                    vals: Default::default(),
                    seeds: 0,
                });
                groups.len() - 1
            }
        };
        let g = &mut groups[idx];
        g.seeds += 1;
        for (slot, c) in g.vals.iter_mut().zip([c_cil, c_til, c_tilf, c_peak]) {
            if let Some(v) = num(c)? {
                slot.push(v);
            }
        }
    }

    let plan: Vec<PlannedCell> = match fs::read_to_string(dir.join(PLAN_FILE)) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| Error::Format(format!("{PLAN_FILE}: {e}")))?,
        Err(_) => vec![],
    };
    let mut rows: Vec<ReportRow> = groups
        .into_iter()
        .map(|g| {
            let (method, buffer, setting, config_digest) = g.key;
            let mut flags = vec![];
            if let Some(p) = plan.iter().find(|p| p.config_digest == config_digest) {
                if g.seeds < p.seeds.len() {
                    flags.push(format!("partial {}/{}", g.seeds, p.seeds.len()));
                }
            }
            if g.vals[0].len() < g.seeds {
                flags.push("missing values".into());
            }
            ReportRow {
                method,
                buffer,
                setting,
                config_digest,
                seeds: g.seeds,
                class_il: stat(&g.vals[0]),
                task_il: stat(&g.vals[1]),
                task_il_final: stat(&g.vals[2]),
                peak: stat(&g.vals[3]),
                flags,
            }
        })
        .collect();
    for p in &plan {
        if !rows.iter().any(|r| r.config_digest == p.config_digest) {
            rows.push(ReportRow {
                method: p.method.clone(),
                buffer: p.buffer,
                setting: p.setting.clone(),
                config_digest: p.config_digest.clone(),
                seeds: 0,
                class_il: None,
                task_il: None,
                task_il_final: None,
                peak: None,
                flags: vec![format!("missing 0/{}", p.seeds.len())],
            });
        }
    }
    let mut split: BTreeMap<(String, usize, String), usize> = BTreeMap::new();
    for r in &rows {
        *split.entry((r.method.clone(), r.buffer, r.setting.clone())).or_default() += 1;
    }
    for r in &mut rows {
        if split[&(r.method.clone(), r.buffer, r.setting.clone())] > 1 {
            r.flags.push("digest mismatch".into());
        }
    }
    Ok(rows)
}

pub fn render_report(rows: &[ReportRow], format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from(
                "method,buffer,setting,config_digest,seeds,class_il_mean,class_il_std,task_il_mean,task_il_std,\
                 task_il_final_mean,task_il_final_std,peak_mean,peak_std,flags\n",
            );
            for r in rows {
                let pair = |s: Option<Stat>| s.map_or(",".to_string(), |(m, d)| format!("{},{}", f6(m), f6(d)));
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    r.method,
                    r.buffer,
                    r.setting,
                    r.config_digest,
                    r.seeds,
                    pair(r.class_il),
                    pair(r.task_il),
                    pair(r.task_il_final),
                    pair(r.peak),
                    r.flags.join(";")
                ));
            }
            out
        }
        ReportFormat::Text => {
            let pct = |s: Option<Stat>| s.map_or("-".to_string(), |(m, d)| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * d));
            let raw = |s: Option<Stat>| s.map_or("-".to_string(), |(m, d)| format!("{m:.3} ± {d:.3}"));
            let header = [
                "method", "buffer", "setting", "seeds", "Class-IL", "Task-IL", "Task-IL (final)", "peak", "digest", "flags",
            ];
            let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
            for r in rows {
                table.push(vec![
                    r.method.clone(),
                    r.buffer.to_string(),
                    r.setting.clone(),
                    r.seeds.to_string(),
                    pct(r.class_il),
                    pct(r.task_il),
                    pct(r.task_il_final),
                    raw(r.peak),
                    r.config_digest.clone(),
                    r.flags.join("; "),
                ]);
            }
            let widths: Vec<usize> = (0..header.len())
                .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
                .collect();
            let mut out = String::new();
            for row in &table {
                let cells: Vec<String> = row
                    .iter()
                    .zip(&widths)
                    .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                    .collect();
                out.push_str(cells.join("  ").trim_end());
                out.push('\n');
            }
            out
        }
    }
}

/// The benchmark used by the ablation checks: ten task classes in five
/// two-class tasks, a separately generated forty-class auxiliary set, a
/// narrow MLP and a 50-sample buffer.
pub fn synthetic_ablation_config(seeds: Vec<u64>) -> ExperimentConfig {
    let task = SyntheticSpec {
        num_classes: 10,
        train_per_class: 50,
        test_per_class: 100,
        sample_shape: vec![64],
        separation: 4.0,
        noise: 0.5,
        latent_dim: Some(6),
        means: MeanLayout::Hypercube,
    };
    let aux = SyntheticSpec {
        num_classes: 40,
        test_per_class: 10,
        ..task.clone()
    };
    ExperimentConfig {
        version: CONFIG_VERSION,
        output_dir: None,
        seeds,
        workers: 1,
        dataset: DatasetConfig {
            kind: DatasetKind::Synthetic,
            path: None,
            synthetic: Some(task),
            data_seed: None,
            task_classes: None,
            max_train_per_class: None,
            max_test_per_class: None,
        },
        aux: AuxConfig {
            source: AuxSource::Synthetic,
            synthetic: Some(aux),
            ..Default::default()
        },
        sequence: SequenceConfig {
            num_tasks: 5,
            classes_per_task: 2,
            split_seed: None,
        },
        backbone: BackboneSection {
            kind: Some(BackboneKind::Mlp),
            hidden: Some(vec![8, 3]),
            ..Default::default()
        },
        training: TrainingConfig {
            epochs_per_task: 5,
            lr: 0.1,
            task_batch: 8,
            aux_batch: 8,
            replay_batch: 32,
            alpha: 0.2,
            beta: 0.5,
            ..Default::default()
        },
        grid: GridConfig {
            methods: vec![Method::Derpp],
            buffer_sizes: vec![50],
            settings: vec![Setting::Vanilla, Setting::Aux, Setting::AuxMah],
            pretrain: vec![false],
        },
    }
}

