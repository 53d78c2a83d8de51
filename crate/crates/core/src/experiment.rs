//! Experiment configuration and the end-to-end commands behind the CLI:
//! splitting, pretraining, prompt training, evaluation, full seed × trial
//! runs, and embedding export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{
    pretrain, Arch, ArchSpec, GnnModel, PretrainConfig, DEFAULT_HIDDEN, DEFAULT_LAYERS,
};
use crate::graphdata::{
    load_tu_dataset, synth_node_graph, synth_shift_dataset, unify_node_task, Dataset, Graph,
    SynthSpec, DEFAULT_EGO_HOPS,
};
use crate::prompting::{PromptFunction, PromptParams};
use crate::shiftsplit::{
    graph_scores, mean_of, node_scores, Property, Role, Side, SplitManifest, GRAPH_RATIOS,
    NODE_RATIOS,
};
use crate::trainer::{imp, infer, macro_f1, train_prompt, PromptConfig, PromptOutcome};

/// Overrides `output_dir` from the config file when set.
pub const OUTPUT_DIR_ENV: &str = "GPROMPT_OUTPUT_DIR";

pub const RESULTS_HEADER: &str = "seed,trial,method,f1,imp";
pub const SUMMARY_HEADER: &str = "method,runs,f1_mean,f1_std,imp_mean,imp_std,cell";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Graph,
    Node,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graph" => Ok(Task::Graph),
            "node" => Ok(Task::Node),
            other => Err(Error::Usage(format!(
                "unknown task '{other}' (expected graph or node)"
            ))),
        }
    }
}

/// Feature perturbation applied to every target-side graph.
///
/// Each node receives `offset`, plus a per-class offset of norm
/// `class_scale` in a seeded random direction (keyed by the graph label),
/// and then each feature entry is zeroed with probability `mask_noise`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetShift {
    pub offset: Vec<f64>,
    pub class_scale: f64,
    pub mask_noise: f64,
    pub seed: u64,
}

impl TargetShift {
    pub fn constant(offset: Vec<f64>) -> Self {
        Self {
            offset,
            ..Self::default()
        }
    }

    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if !self.offset.is_empty() && self.offset.len() != feature_dim {
            return Err(Error::Config(format!(
                "target_shift.offset has {} entries for feature dim {feature_dim}",
                self.offset.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_noise) || !(self.class_scale >= 0.0) {
            return Err(Error::Config(
                "target_shift needs mask_noise in [0, 1] and class_scale >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        self.validate(ds.feature_dim)?;
        let d = ds.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let class_dirs: Vec<Vec<f64>> = (0..ds.num_classes)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v
                    .iter()
                    .map(|a| a * a)
                    .sum::<f64>()
                    .sqrt()
                    .max(f64::MIN_POSITIVE);
                v.iter().map(|a| self.class_scale * a / norm).collect()
            })
            .collect();
        let graphs = ds
            .graphs
            .iter()
            .map(|g| {
                let class = g.y.and_then(|y| class_dirs.get(y));
                let x = g
                    .x
                    .iter()
                    .map(|row| {
                        row.iter()
                            .enumerate()
                            .map(|(j, &v)| {
                                let shifted = v
                                    + self.offset.get(j).copied().unwrap_or(0.0)
                                    + class.map_or(0.0, |c| c[j]);
                                if self.mask_noise > 0.0 && rng.random::<f64>() < self.mask_noise {
                                    0.0
                                } else {
                                    shifted
                                }
                            })
                            .collect()
                    })
                    .collect();
                g.with_features(x)
            })
            .collect::<Result<Vec<Graph>>>()?;
        Dataset::new(ds.name.clone(), ds.num_classes, d, graphs)
    }
}

/// One experiment: data source, shift axis, base model, prompt
/// hyperparameters and the seed × trial protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// JSON dataset file or TU-format directory.
    pub dataset: Option<PathBuf>,
    pub task: Task,
    pub property: Property,
    pub base_gnn: Arch,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub ego_hops: usize,
    /// Train/val/test fractions per side; task default when absent.
    pub ratios: Option<[f64; 3]>,
    pub seed: u64,
    pub n_seeds: usize,
    pub n_trials: usize,
    pub output_dir: PathBuf,
    /// Generated data, used when `dataset` is absent.
    pub synth: Option<SynthSpec>,
    pub target_shift: Option<TargetShift>,
    pub pretrain: PretrainConfig,
    pub prompt: PromptConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            task: Task::Graph,
            property: Property::EdgeHomophily,
            base_gnn: Arch::Gcn,
            hidden_dim: DEFAULT_HIDDEN,
            num_layers: DEFAULT_LAYERS,
            ego_hops: DEFAULT_EGO_HOPS,
            ratios: None,
            seed: 0,
            n_seeds: 10,
            n_trials: 5,
            output_dir: PathBuf::from("out"),
            synth: None,
            target_shift: None,
            pretrain: PretrainConfig::default(),
            prompt: PromptConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a TOML config and applies `key=value` overrides, where keys are
    /// dotted paths (`prompt.tau=0.5`) and values are TOML literals (bare
    /// words are taken as strings).
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let cfg = Self::load_unchecked(path, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// As [`ExperimentConfig::load`], leaving validation to the caller.
    pub fn load_unchecked(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        parse_with_overrides(&text, overrides)
    }

    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let cfg = parse_with_overrides(text, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// This config with `key=value` overrides applied; not validated.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        parse_with_overrides(&self.to_toml_string()?, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_some() == self.synth.is_some() {
            return Err(Error::Config(
                "set exactly one of `dataset` or `[synth]`".into(),
            ));
        }
        if self.n_seeds == 0 || self.n_trials == 0 {
            return Err(Error::Config("n_seeds and n_trials must be >= 1".into()));
        }
        if self.hidden_dim == 0 || self.num_layers == 0 {
            return Err(Error::Config(
                "hidden_dim and num_layers must be >= 1".into(),
            ));
        }
        if self.task == Task::Graph && self.property == Property::Pagerank {
            return Err(Error::Usage(
                "pagerank shift is defined for node tasks only".into(),
            ));
        }
        let (a, b, c) = self.ratios();
        if a <= 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "ratios ({a}, {b}, {c}) must be non-negative and sum to 1"
            )));
        }
        self.prompt.validate()
    }

    pub fn ratios(&self) -> (f64, f64, f64) {
        match (self.ratios, self.task) {
            (Some([a, b, c]), _) => (a, b, c),
            (None, Task::Graph) => GRAPH_RATIOS,
            (None, Task::Node) => NODE_RATIOS,
        }
    }

    /// `output_dir`, unless the environment override is set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        std::env::var_os(OUTPUT_DIR_ENV).map_or_else(|| self.output_dir.clone(), PathBuf::from)
    }
}

fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    for ov in overrides {
        apply_override(&mut table, ov)?;
    }
    table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override '{assignment}' is not key=value")))?;
    let value = parse_toml_literal(raw.trim());
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Error::Usage("empty override key".into()))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Usage(format!("override path '{key}' crosses a non-table value"))
            })?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_toml_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Loaded data as graph-level samples (ego subgraphs for node tasks) plus
/// the per-sample shift property.
pub struct TaskData {
    pub dataset: Dataset,
    pub scores: Vec<f64>,
}

pub fn load_dataset_path(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::Ingestion {
            path: path.to_path_buf(),
            reason: "not found".into(),
        });
    }
    if path.is_dir() {
        load_tu_dataset(path)
    } else {
        Dataset::load_json(path)
    }
}

pub fn load_task_data(cfg: &ExperimentConfig) -> Result<TaskData> {
    match cfg.task {
        Task::Graph => {
            let dataset = match (&cfg.dataset, &cfg.synth) {
                (Some(p), _) => load_dataset_path(p)?,
                (None, Some(spec)) => synth_shift_dataset(spec)?,
                (None, None) => return Err(Error::Config("no data source".into())),
            };
            let scores = graph_scores(&dataset, cfg.property)?;
            Ok(TaskData { dataset, scores })
        }
        Task::Node => {
            let graph = match (&cfg.dataset, &cfg.synth) {
                (Some(p), _) => {
                    let ds = load_dataset_path(p)?;
                    if ds.len() != 1 {
                        return Err(Error::Format(format!(
                            "node task expects one graph, found {}",
                            ds.len()
                        )));
                    }
                    ds.graphs.into_iter().next().expect("one graph")
                }
                (None, Some(spec)) => synth_node_graph(
                    spec.nodes_per_graph,
                    spec.num_classes,
                    spec.feature_dim,
                    spec.seed,
                )?,
                (None, None) => return Err(Error::Config("no data source".into())),
            };
            let dataset = unify_node_task(&graph, cfg.ego_hops)?;
            let scores = node_scores(&graph, &dataset, cfg.property)?;
            Ok(TaskData { dataset, scores })
        }
    }
}

/// Seeds for one (seed index, trial) cell of the protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSeeds {
    pub split: u64,
    pub model: u64,
    pub prompt: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RunSeeds {
    /// The split depends on the seed index only; initializations also vary
    /// with the trial.
    pub fn derive(base: u64, seed_index: usize, trial: usize) -> Self {
        let split = base.wrapping_add(seed_index as u64);
        let cell = splitmix(splitmix(split) ^ trial as u64);
        Self {
            split,
            model: splitmix(cell ^ 1),
            prompt: splitmix(cell ^ 2),
        }
    }
}

/// Source and target partitions for one split seed; target partitions carry
/// the configured shift.
pub struct Splits {
    pub manifest: SplitManifest,
    pub source_train: Dataset,
    pub source_val: Dataset,
    pub source_test: Dataset,
    pub target_train: Dataset,
    pub target_val: Dataset,
    pub target_test: Dataset,
}

impl Splits {
    pub fn build(cfg: &ExperimentConfig, data: &TaskData, split_seed: u64) -> Result<Self> {
        let manifest = SplitManifest::build(&data.scores, cfg.property, split_seed, cfg.ratios())?;
        manifest.validate(data.dataset.len())?;
        let part = |side, role| data.dataset.subset(&manifest.ids(side, role));
        let shift = |ds: Dataset| match &cfg.target_shift {
            Some(s) => s.apply(&ds),
            None => Ok(ds),
        };
        Ok(Self {
            source_train: part(Side::Source, Role::Train),
            source_val: part(Side::Source, Role::Val),
            source_test: part(Side::Source, Role::Test),
            target_train: shift(part(Side::Target, Role::Train))?,
            target_val: shift(part(Side::Target, Role::Val))?,
            target_test: shift(part(Side::Target, Role::Test))?,
            manifest,
        })
    }
}

pub fn new_model(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<GnnModel> {
    let spec = ArchSpec::new(cfg.base_gnn, data.feature_dim, data.num_classes)
        .with_hidden(cfg.hidden_dim)
        .with_layers(cfg.num_layers);
    GnnModel::new(spec, seed)
}

/// Pretrains a fresh model on the source partitions and freezes it.
pub fn pretrain_source(
    cfg: &ExperimentConfig,
    splits: &Splits,
    seeds: RunSeeds,
) -> Result<GnnModel> {
    let model = new_model(cfg, &splits.source_train, seeds.model)?;
    let pcfg = PretrainConfig {
        seed: seeds.model,
        ..cfg.pretrain.clone()
    };
    let outcome = pretrain(&model, &splits.source_train, &splits.source_val, &pcfg)?;
    log::info!(
        "pretrained: best epoch {}, source val F1 {:.4}, train F1 {:.4}",
        outcome.best_epoch,
        outcome.val_f1,
        outcome.train_f1
    );
    model.freeze();
    Ok(model)
}

pub fn train_target_prompt(
    cfg: &ExperimentConfig,
    model: &GnnModel,
    splits: &Splits,
    seeds: RunSeeds,
) -> Result<PromptOutcome> {
    let pcfg = PromptConfig {
        seed: seeds.prompt,
        ..cfg.prompt.clone()
    };
    train_prompt(model, &splits.target_train, &splits.target_val, &pcfg)
}

/// Macro-F1 of the model on `ds`, through `prompt` when given.
pub fn score(model: &GnnModel, prompt: Option<&dyn PromptFunction>, ds: &Dataset) -> Result<f64> {
    let scores = match prompt {
        Some(p) => infer(model, p, ds)?,
        None => model.predict(&ds.graphs)?,
    };
    Ok(macro_f1(&scores, &ds.labels()?, model.spec.num_classes)?.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub seed: usize,
    pub trial: usize,
    pub method: &'static str,
    pub f1: f64,
    pub imp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: &'static str,
    pub runs: usize,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub imp_mean: f64,
    pub imp_std: f64,
}

impl SummaryRow {
    /// Percent F1 as `mean±std`, one decimal.
    pub fn cell(&self) -> String {
        format!("{:.1}±{:.1}", 100.0 * self.f1_mean, 100.0 * self.f1_std)
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunReport {
    pub rows: Vec<RunRow>,
    pub failures: Vec<(usize, usize, String)>,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl RunReport {
    pub fn summary(&self) -> Vec<SummaryRow> {
        ["base", "ugprompt"]
            .into_iter()
            .map(|method| {
                let rows: Vec<&RunRow> = self.rows.iter().filter(|r| r.method == method).collect();
                let (f1_mean, f1_std) = mean_std(&rows.iter().map(|r| r.f1).collect::<Vec<_>>());
                let (imp_mean, imp_std) = mean_std(&rows.iter().map(|r| r.imp).collect::<Vec<_>>());
                SummaryRow {
                    method,
                    runs: rows.len(),
                    f1_mean,
                    f1_std,
                    imp_mean,
                    imp_std,
                }
            })
            .collect()
    }

    pub fn results_csv(&self) -> String {
        let mut out = format!("{RESULTS_HEADER}\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.seed, r.trial, r.method, r.f1, r.imp
            )
            .expect("string write");
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = format!("{SUMMARY_HEADER}\n");
        for s in self.summary() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.method,
                s.runs,
                s.f1_mean,
                s.f1_std,
                s.imp_mean,
                s.imp_std,
                s.cell()
            )
            .expect("string write");
        }
        out
    }
}

fn run_cell(
    cfg: &ExperimentConfig,
    data: &TaskData,
    seed_index: usize,
    trial: usize,
) -> Result<(f64, f64)> {
    let seeds = RunSeeds::derive(cfg.seed, seed_index, trial);
    let splits = Splits::build(cfg, data, seeds.split)?;
    let model = pretrain_source(cfg, &splits, seeds)?;
    let base = score(&model, None, &splits.target_test)?;
    let snapshot = model.snapshot();
    let outcome = train_target_prompt(cfg, &model, &splits, seeds)?;
    if model.snapshot() != snapshot {
        return Err(Error::Contract(
            "model parameters changed during prompt training".into(),
        ));
    }
    let prompted = score(&model, Some(&outcome.params), &splits.target_test)?;
    Ok((base, prompted))
}

/// Every (seed, trial) cell: split, pretrain, base eval, prompt training,
/// prompted eval. A failing cell is logged and skipped.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let data = load_task_data(cfg)?;
    let mut report = RunReport::default();
    for s in 0..cfg.n_seeds {
        for t in 0..cfg.n_trials {
            let cell = run_cell(cfg, &data, s, t)
                .and_then(|(base, prompted)| Ok((base, prompted, imp(prompted, base)?)));
            match cell {
                Ok((base, prompted, gain)) => {
                    log::info!(
                        "seed {s} trial {t}: base {base:.4} ugprompt {prompted:.4} imp {gain}"
                    );
                    report.rows.push(RunRow {
                        seed: s,
                        trial: t,
                        method: "base",
                        f1: base,
                        imp: 0.0,
                    });
                    report.rows.push(RunRow {
                        seed: s,
                        trial: t,
                        method: "ugprompt",
                        f1: prompted,
                        imp: gain,
                    });
                }
                Err(e) => {
                    log::warn!("seed {s} trial {t} aborted: {e}");
                    report.failures.push((s, t, e.to_string()));
                }
            }
        }
    }
    Ok(report)
}

/// Runs the experiment and writes `results.csv` and `summary.csv` under
/// the output directory.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<(RunReport, PathBuf)> {
    let report = run_experiment(cfg)?;
    if report.rows.is_empty() {
        return Err(Error::Numeric(format!(
            "all {} runs failed",
            report.failures.len()
        )));
    }
    let dir = cfg.resolved_output_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("results.csv"), report.results_csv())?;
    fs::write(dir.join("summary.csv"), report.summary_csv())?;
    Ok((report, dir))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSummary {
    pub manifest: SplitManifest,
    pub source_mean: f64,
    pub target_mean: f64,
}

/// Builds and writes the split manifest for one split seed.
pub fn cmd_split(cfg: &ExperimentConfig, split_seed: u64, out: &Path) -> Result<SplitSummary> {
    cfg.validate()?;
    let data = load_task_data(cfg)?;
    let manifest = SplitManifest::build(&data.scores, cfg.property, split_seed, cfg.ratios())?;
    create_parent(out)?;
    manifest.save_json(out)?;
    Ok(SplitSummary {
        source_mean: mean_of(&data.scores, &manifest.source),
        target_mean: mean_of(&data.scores, &manifest.target),
        manifest,
    })
}

/// One graph embedding per dataset sample and variant. Columns: id, side,
/// label, variant, then the d_h embedding components.
pub fn cmd_export_embeddings(
    cfg: &ExperimentConfig,
    model_path: &Path,
    prompt_path: Option<&Path>,
    seeds: RunSeeds,
    out: &Path,
) -> Result<usize> {
    let model = load_checkpoint(model_path, |p| GnnModel::load(p))?;
    let data = load_task_data(cfg)?;
    let prompt = match prompt_path {
        Some(p) => load_checkpoint(p, |p| PromptParams::load(p))?,
        None => PromptParams::zeros(1, data.dataset.feature_dim)?,
    };
    let manifest = SplitManifest::build(&data.scores, cfg.property, seeds.split, cfg.ratios())?;
    let mut side = vec![Side::Source; data.dataset.len()];
    for &i in &manifest.target {
        side[i] = Side::Target;
    }
    let shifted = match &cfg.target_shift {
        Some(s) => s.apply(&data.dataset.subset(&manifest.target))?,
        None => data.dataset.subset(&manifest.target),
    };
    let mut graphs: Vec<Graph> = data.dataset.graphs.clone();
    for (k, &i) in manifest.target.iter().enumerate() {
        graphs[i] = shifted.graphs[k].clone();
    }

    let d_h = model.spec.hidden_dim;
    let mut csv = String::from("id,side,label,variant");
    for j in 0..d_h {
        write!(csv, ",z{j}").expect("string write");
    }
    csv.push('\n');
    let mut rows = 0;
    for (i, g) in graphs.iter().enumerate() {
        let label = g.y.map_or(String::new(), |y| y.to_string());
        let side = match side[i] {
            Side::Source => "source",
            Side::Target => "target",
        };
        let plain = model.encode(g)?.0.to_vec();
        let p = prompt.apply(g)?;
        let prompted = model.encode_features(&p.graph, &p.x)?.0.to_vec();
        for (variant, z) in [("non-prompted", plain), ("prompted", prompted)] {
            write!(csv, "{i},{side},{label},{variant}").expect("string write");
            for v in z {
                write!(csv, ",{v}").expect("string write");
            }
            csv.push('\n');
            rows += 1;
        }
    }
    create_parent(out)?;
    fs::write(out, csv)?;
    Ok(rows)
}

/// Data, splits and seeds for one protocol cell.
pub fn prepare(
    cfg: &ExperimentConfig,
    seed_index: usize,
    trial: usize,
) -> Result<(Splits, RunSeeds)> {
    cfg.validate()?;
    let data = load_task_data(cfg)?;
    let seeds = RunSeeds::derive(cfg.seed, seed_index, trial);
    Ok((Splits::build(cfg, &data, seeds.split)?, seeds))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub source_val_f1: f64,
    pub source_test_f1: f64,
    pub target_test_f1: f64,
}

/// Pretrains on the source side of one cell and writes the checkpoint.
pub fn cmd_pretrain(
    cfg: &ExperimentConfig,
    seed_index: usize,
    trial: usize,
    out: &Path,
) -> Result<PretrainReport> {
    let (splits, seeds) = prepare(cfg, seed_index, trial)?;
    let model = pretrain_source(cfg, &splits, seeds)?;
    create_parent(out)?;
    model.save(out)?;
    let maybe = |ds: &Dataset| {
        if ds.is_empty() {
            Ok(f64::NAN)
        } else {
            score(&model, None, ds)
        }
    };
    Ok(PretrainReport {
        source_val_f1: maybe(&splits.source_val)?,
        source_test_f1: maybe(&splits.source_test)?,
        target_test_f1: maybe(&splits.target_test)?,
    })
}

/// Trains a prompt for a saved model on the target side of one cell; writes
/// the tokens and, when `log_out` is given, the per-epoch CSV log.
pub fn cmd_prompt_train(
    cfg: &ExperimentConfig,
    model_path: &Path,
    seed_index: usize,
    trial: usize,
    out: &Path,
    log_out: Option<&Path>,
) -> Result<PromptOutcome> {
    let model = load_checkpoint(model_path, |p| GnnModel::load(p))?;
    model.freeze();
    let (splits, seeds) = prepare(cfg, seed_index, trial)?;
    let outcome = train_target_prompt(cfg, &model, &splits, seeds)?;
    create_parent(out)?;
    outcome.params.save(out)?;
    if let Some(path) = log_out {
        let mut csv = format!("{}\n", crate::trainer::EpochLog::CSV_HEADER);
        for e in &outcome.log {
            writeln!(csv, "{e}").expect("string write");
        }
        create_parent(path)?;
        fs::write(path, csv)?;
    }
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub base_f1: f64,
    pub prompted_f1: Option<f64>,
}

impl EvalReport {
    pub fn imp(&self) -> Option<Result<f64>> {
        self.prompted_f1.map(|p| imp(p, self.base_f1))
    }
}

/// Target-test macro-F1 of a saved model, with and without a saved prompt.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    model_path: &Path,
    prompt_path: Option<&Path>,
    seed_index: usize,
    trial: usize,
) -> Result<EvalReport> {
    let model = load_checkpoint(model_path, |p| GnnModel::load(p))?;
    let prompt = prompt_path
        .map(|p| load_checkpoint(p, |p| PromptParams::load(p)))
        .transpose()?;
    let (splits, _) = prepare(cfg, seed_index, trial)?;
    let base_f1 = score(&model, None, &splits.target_test)?;
    let prompted_f1 = match &prompt {
        Some(p) => Some(score(&model, Some(p), &splits.target_test)?),
        None => None,
    };
    Ok(EvalReport {
        base_f1,
        prompted_f1,
    })
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

/// A missing artifact is a usage problem, not a data problem.
pub fn load_checkpoint<T>(path: &Path, load: impl Fn(&Path) -> Result<T>) -> Result<T> {
    if !path.exists() {
        return Err(Error::Usage(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    load(path)
}
