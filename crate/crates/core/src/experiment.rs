//! Experiment configuration and the end-to-end pipeline: collect data, fit
//! dynamics models, search a controller in dreams, test it once for real.
//!
//! Every stage reads and writes a run directory with a fixed layout, so the
//! stages can run one at a time or back to back with identical results.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::{cma_optimize, evaluate_real, CmaConfig, CmaOutcome, ControllerParams, FeatureSpec, RealEval};
use crate::dream::{DreamConfig, DreamEnv, RandomizationPolicy, ZInit};
use crate::envs::{collect_trajectories, load_dataset, save_dataset, Dataset, DatasetInfo, EnvConfig, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;
use crate::trainer::{evaluate_loss_scaled, model_meta, train_dynamics, LossReport, TrainConfig};
use crate::world_model::{load_checkpoint, save_checkpoint, WorldModelParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_trajectories: usize,
    pub test_trajectories: usize,
    /// Probability of taking the scripted expert's action at each step.
    pub mix_expert_prob: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_trajectories: 200,
            test_trajectories: 50,
            mix_expert_prob: 0.9,
        }
    }
}

/// Scale for kept units of inference-time masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceScaling {
    /// `1 / (1 - p_infer)`
    Active,
    /// `1 / (1 - p_train)` of the model being rolled out.
    Train,
    /// Kept units pass unscaled.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DreamSection {
    pub p_infer: f64,
    pub policy: RandomizationPolicy,
    pub mc_samples: usize,
    pub z_init: ZInit,
    pub max_ep_len: usize,
    pub noise_sigma: f64,
    /// Independently trained models in the population; 1 disables it.
    pub ensemble_size: usize,
    pub scaling: InferenceScaling,
}

impl Default for DreamSection {
    fn default() -> Self {
        let d = DreamConfig::default();
        DreamSection {
            p_infer: d.p_infer,
            policy: d.policy,
            mc_samples: d.mc_samples,
            z_init: d.z_init,
            max_ep_len: d.max_ep_len,
            noise_sigma: d.noise_sigma,
            ensemble_size: 1,
            scaling: InferenceScaling::Active,
        }
    }
}

impl DreamSection {
    pub fn to_config(&self, p_train: f64) -> DreamConfig {
        let keep_scale = match self.scaling {
            InferenceScaling::Active => None,
            InferenceScaling::Train => Some(1.0 / (1.0 - p_train)),
            InferenceScaling::None => Some(1.0),
        };
        DreamConfig {
            p_infer: self.p_infer,
            policy: self.policy,
            mc_samples: self.mc_samples,
            z_init: self.z_init,
            max_ep_len: self.max_ep_len,
            noise_sigma: self.noise_sigma,
            keep_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerSection {
    pub features: FeatureSpec,
}

impl Default for ControllerSection {
    fn default() -> Self {
        ControllerSection { features: FeatureSpec::Zh }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Real-environment episodes for the final test.
    pub episodes: usize,
    /// Mask repetitions when measuring test loss under inference dropout.
    pub loss_mask_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 100,
            loss_mask_samples: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    /// Run directory; empty means derived from the output root and config hash.
    pub output_dir: String,
    pub env: EnvConfig,
    pub data: DataConfig,
    pub model: TrainConfig,
    pub dream: DreamSection,
    pub controller: ControllerSection,
    pub cma: CmaConfig,
    pub eval: EvalConfig,
}

const DATA_STREAM: u64 = 10;
const MODEL_STREAM: u64 = 20;
const CMA_STREAM: u64 = 30;
const REAL_STREAM: u64 = 40;
const LOSS_STREAM: u64 = 50;

fn sub_seed(seed: u64, path: &[u64]) -> u64 {
    SeededRng::derive(seed, path).next_seed()
}

fn short_hash<T: Serialize>(value: &T) -> String {
    // serde_json maps are ordered by key, so this encoding is canonical.
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.build()?;
        if self.data.train_trajectories == 0 {
            return Err(Error::Config("data.train_trajectories must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.data.mix_expert_prob) {
            return Err(Error::Config("data.mix_expert_prob must lie in [0, 1]".into()));
        }
        self.model.validate()?;
        self.dream.to_config(self.model.p_train).validate(self.dream.ensemble_size)?;
        self.cma.validate()?;
        if self.eval.episodes == 0 || self.eval.loss_mask_samples == 0 {
            return Err(Error::Config("eval counts must be positive".into()));
        }
        Ok(())
    }

    /// Hash of everything that affects results (the output location does not).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir.clear();
        short_hash(&c)
    }

    /// Hash of the setting with the seed removed, shared by all seeds of one setting.
    pub fn setting_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir.clear();
        c.seed = 0;
        short_hash(&c)
    }

    fn data_key(&self) -> String {
        short_hash(&(self.seed, &self.env, &self.data))
    }

    fn model_key(&self) -> String {
        short_hash(&(self.data_key(), &self.model, self.dream.ensemble_size))
    }

    /// Training settings for ensemble member `member`, seeded from the run seed.
    pub fn train_config(&self, member: usize) -> TrainConfig {
        TrainConfig {
            seed: sub_seed(self.seed, &[MODEL_STREAM, member as u64]),
            ..self.model.clone()
        }
    }

    pub fn cma_config(&self) -> CmaConfig {
        CmaConfig {
            seed: sub_seed(self.seed, &[CMA_STREAM]),
            ..self.cma.clone()
        }
    }

    /// Sets a dotted key such as `dream.p_infer` from its TOML literal.
    /// Bare words that are not valid TOML are taken as strings.
    pub fn with_override(&self, key: &str, raw: &str) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(&self.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
        let value = parse_literal(raw);
        let parts: Vec<&str> = key.split('.').collect();
        if parts == ["env", "name"] {
            // Switching environments starts from the new environment's defaults.
            let mut env = toml::Table::new();
            env.insert("name".into(), value);
            table.insert("env".into(), toml::Value::Table(env));
        } else {
            let (last, path) = parts.split_last().ok_or_else(|| Error::Config("empty key".into()))?;
            let mut node = &mut table;
            for p in path {
                node = match node.get_mut(*p) {
                    Some(toml::Value::Table(t)) => t,
                    _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
                };
            }
            if !node.contains_key(*last) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            node.insert((*last).to_string(), value);
        }
        let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("`{key} = {raw}`: {e}")))
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Short names accepted for sweep axes, mapped to config keys.
pub fn axis_key(name: &str) -> &str {
    match name {
        "p_infer" => "dream.p_infer",
        "policy" => "dream.policy",
        "mc_samples" => "dream.mc_samples",
        "noise_sigma" => "dream.noise_sigma",
        "ensemble_size" | "ensemble" => "dream.ensemble_size",
        "scaling" => "dream.scaling",
        "p_train" => "model.p_train",
        "alpha_r" => "model.alpha_r",
        "alpha_d" => "model.alpha_d",
        other => other,
    }
}

/// Fixed file layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("data").join("train.dataset")
    }

    pub fn test_data(&self) -> PathBuf {
        self.root.join("data").join("test.dataset")
    }

    pub fn model(&self, member: usize) -> PathBuf {
        self.root.join("model").join(format!("model-{member}.ckpt"))
    }

    pub fn loss_csv(&self, member: usize) -> PathBuf {
        self.root.join("model").join(format!("loss-{member}.csv"))
    }

    pub fn leaderboard(&self) -> PathBuf {
        self.root.join("controller").join("leaderboard.csv")
    }

    pub fn generations(&self) -> PathBuf {
        self.root.join("controller").join("generations.csv")
    }

    pub fn controller(&self) -> PathBuf {
        self.root.join("controller").join("controller.ckpt")
    }

    pub fn returns(&self) -> PathBuf {
        self.root.join("eval").join("returns.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    fn ensure(&self, sub: &str) -> Result<()> {
        std::fs::create_dir_all(self.root.join(sub))?;
        Ok(())
    }
}

/// Writes the effective config into the run directory, refusing to mix runs.
pub fn echo_config(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<()> {
    std::fs::create_dir_all(&paths.root)?;
    let text = cfg.to_toml();
    if let Ok(existing) = std::fs::read_to_string(paths.config()) {
        let previous = ExperimentConfig::from_toml(&existing)?;
        if previous.hash() != cfg.hash() {
            return Err(Error::Config(format!(
                "{} already holds a run with config hash {} (this config has {})",
                paths.root.display(),
                previous.hash(),
                cfg.hash()
            )));
        }
    }
    std::fs::write(paths.config(), text)?;
    Ok(())
}

/// Train and test sets, collected with separate streams.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

impl DataSplit {
    /// One dataset holding both sets with the train/test split recorded.
    pub fn combined(&self) -> Result<Dataset> {
        let n_train = self.train.trajectories.len();
        let mut trajectories: Vec<Trajectory> = self.train.trajectories.clone();
        trajectories.extend(self.test.trajectories.iter().cloned());
        let test = (n_train..trajectories.len()).collect();
        Dataset::new(self.train.info.clone(), trajectories, (0..n_train).collect(), test)
    }

    pub fn start_states(&self) -> Vec<Vec<f64>> {
        self.train.start_states()
    }
}

pub fn collect_data(cfg: &ExperimentConfig) -> Result<DataSplit> {
    let mut env = cfg.env.build()?;
    let info = DatasetInfo {
        env: env.name().to_string(),
        state_dim: env.state_dim(),
        action_dim: env.action_dim(),
        mix_expert_prob: cfg.data.mix_expert_prob,
        seed: cfg.seed,
    };
    let mix = cfg.data.mix_expert_prob;
    let train = collect_trajectories(env.as_mut(), cfg.data.train_trajectories, mix, sub_seed(cfg.seed, &[DATA_STREAM, 0]))?;
    let test = if cfg.data.test_trajectories > 0 {
        collect_trajectories(env.as_mut(), cfg.data.test_trajectories, mix, sub_seed(cfg.seed, &[DATA_STREAM, 1]))?
    } else {
        Vec::new()
    };
    Ok(DataSplit {
        train: Dataset::all_train(info.clone(), train)?,
        test: Dataset::new(info, test.clone(), Vec::new(), (0..test.len()).collect())?,
    })
}

#[derive(Clone, Debug)]
pub struct TrainedModels {
    pub members: Vec<WorldModelParams>,
    pub reports: Vec<LossReport>,
}

pub fn train_models(cfg: &ExperimentConfig, data: &DataSplit) -> Result<TrainedModels> {
    let ds = data.combined()?;
    let mut members = Vec::new();
    let mut reports = Vec::new();
    for m in 0..cfg.dream.ensemble_size {
        let (params, report) = train_dynamics(&ds, &cfg.train_config(m))?;
        members.push(params);
        reports.push(report);
    }
    Ok(TrainedModels { members, reports })
}

pub fn train_controller(cfg: &ExperimentConfig, models: &[WorldModelParams], starts: &[Vec<f64>]) -> Result<CmaOutcome> {
    let dream = cfg.dream.to_config(cfg.model.p_train);
    let template = ControllerParams::for_model(cfg.controller.features, models[0].dims());
    cma_optimize(|| DreamEnv::new(models, starts, dream.clone()), &template, &cfg.cma_config())
}

pub fn test_loss(cfg: &ExperimentConfig, model: &WorldModelParams, data: &DataSplit) -> Result<Option<(f64, f64)>> {
    if data.test.trajectories.is_empty() {
        return Ok(None);
    }
    let trajs: Vec<&Trajectory> = data.test.trajectories.iter().collect();
    let keep = cfg.dream.to_config(cfg.model.p_train).resolved_keep_scale();
    let est = evaluate_loss_scaled(
        model,
        &trajs,
        cfg.dream.p_infer,
        keep,
        cfg.eval.loss_mask_samples,
        sub_seed(cfg.seed, &[LOSS_STREAM]),
        cfg.model.loss_weights(),
    )?;
    Ok(Some((est.mean, est.std_err)))
}

pub fn real_eval(cfg: &ExperimentConfig, ctrl: &ControllerParams, model: &WorldModelParams) -> Result<RealEval> {
    let mut env = cfg.env.build()?;
    evaluate_real(ctrl, model, env.as_mut(), cfg.eval.episodes, sub_seed(cfg.seed, &[REAL_STREAM]))
}

/// Everything a report row needs, written as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub setting_hash: String,
    pub seed: u64,
    pub env: String,
    pub p_train: f64,
    pub p_infer: f64,
    pub policy: RandomizationPolicy,
    pub mc_samples: usize,
    pub noise_sigma: f64,
    pub ensemble_size: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_loss_se: Option<f64>,
    pub dream_generation: usize,
    pub dream_mean: f64,
    pub dream_std: f64,
    pub real_mean: f64,
    pub real_std: f64,
    pub real_episodes: usize,
}

pub const SUMMARY_COLUMNS: &[&str] = &[
    "config_hash",
    "setting_hash",
    "seed",
    "env",
    "p_train",
    "p_infer",
    "policy",
    "mc_samples",
    "noise_sigma",
    "ensemble_size",
    "train_loss",
    "test_loss",
    "test_loss_se",
    "dream_generation",
    "dream_mean",
    "dream_std",
    "real_mean",
    "real_std",
    "real_episodes",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunSummary {
    pub fn csv_fields(&self) -> Vec<String> {
        let policy = serde_json::to_value(self.policy).expect("policy serializes");
        vec![
            self.config_hash.clone(),
            self.setting_hash.clone(),
            self.seed.to_string(),
            self.env.clone(),
            self.p_train.to_string(),
            self.p_infer.to_string(),
            policy.as_str().unwrap_or_default().to_string(),
            self.mc_samples.to_string(),
            self.noise_sigma.to_string(),
            self.ensemble_size.to_string(),
            self.train_loss.to_string(),
            opt(self.test_loss),
            opt(self.test_loss_se),
            self.dream_generation.to_string(),
            self.dream_mean.to_string(),
            self.dream_std.to_string(),
            self.real_mean.to_string(),
            self.real_std.to_string(),
            self.real_episodes.to_string(),
        ]
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn generations_csv(outcome: &CmaOutcome) -> String {
    let mut out = String::from("generation,best_fitness,mean_fitness,sigma,masks_sampled,dream_steps,non_finite\n");
    for g in &outcome.history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            g.generation, g.best_fitness, g.mean_fitness, g.sigma, g.masks_sampled, g.dream_steps, g.non_finite
        );
    }
    out
}

/// Runs pipeline stages against run directories, reusing datasets and
/// models across runs that share them.
#[derive(Default)]
pub struct Pipeline {
    data: HashMap<String, Arc<DataSplit>>,
    models: HashMap<String, Arc<TrainedModels>>,
}

impl Pipeline {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn collect(&mut self, cfg: &ExperimentConfig, paths: &RunPaths) -> Result<Arc<DataSplit>> {
        echo_config(cfg, paths)?;
        let key = cfg.data_key();
        let data = match self.data.get(&key) {
            Some(d) => d.clone(),
            None => {
                let d = Arc::new(collect_data(cfg)?);
                self.data.insert(key, d.clone());
                d
            }
        };
        paths.ensure("data")?;
        save_dataset(&data.train, &paths.train_data())?;
        save_dataset(&data.test, &paths.test_data())?;
        Ok(data)
    }

    fn load_data(&mut self, cfg: &ExperimentConfig, paths: &RunPaths) -> Result<Arc<DataSplit>> {
        if let Some(d) = self.data.get(&cfg.data_key()) {
            return Ok(d.clone());
        }
        let d = Arc::new(DataSplit {
            train: load_dataset(&paths.train_data()).map_err(|e| missing("dataset", &paths.train_data(), e))?,
            test: load_dataset(&paths.test_data()).map_err(|e| missing("dataset", &paths.test_data(), e))?,
        });
        self.data.insert(cfg.data_key(), d.clone());
        Ok(d)
    }

    pub fn train_dynamics(&mut self, cfg: &ExperimentConfig, paths: &RunPaths) -> Result<Arc<TrainedModels>> {
        echo_config(cfg, paths)?;
        let data = self.load_data(cfg, paths)?;
        let key = cfg.model_key();
        let models = match self.models.get(&key) {
            Some(m) => m.clone(),
            None => {
                let m = Arc::new(train_models(cfg, &data)?);
                self.models.insert(key, m.clone());
                m
            }
        };
        paths.ensure("model")?;
        for (i, (params, report)) in models.members.iter().zip(&models.reports).enumerate() {
            let meta = model_meta(&cfg.train_config(i), cfg.env.name(), i);
            save_checkpoint(&paths.model(i), params, &meta)?;
            report.write_csv(&paths.loss_csv(i))?;
        }
        Ok(models)
    }

    fn load_models(&mut self, cfg: &ExperimentConfig, paths: &RunPaths) -> Result<Arc<TrainedModels>> {
        if let Some(m) = self.models.get(&cfg.model_key()) {
            return Ok(m.clone());
        }
        let mut members = Vec::new();
        let mut reports = Vec::new();
        for i in 0..cfg.dream.ensemble_size {
            let (params, _) = load_checkpoint(&paths.model(i)).map_err(|e| missing("model", &paths.model(i), e))?;
            members.push(params);
            reports.push(read_loss_csv(&paths.loss_csv(i))?);
        }
        let m = Arc::new(TrainedModels { members, reports });
        self.models.insert(cfg.model_key(), m.clone());
        Ok(m)
    }

    pub fn train_controller(&mut self, cfg: &ExperimentConfig, paths: &RunPaths) -> Result<CmaOutcome> {
        echo_config(cfg, paths)?;
        let data = self.load_data(cfg, paths)?;
        let models = self.load_models(cfg, paths)?;
        let outcome = train_controller(cfg, &models.members, &data.start_states())?;
        paths.ensure("controller")?;
        outcome.board.write_csv(&paths.leaderboard())?;
        std::fs::write(paths.generations(), generations_csv(&outcome))?;
        outcome.best.save(&paths.controller())?;
        Ok(outcome)
    }

    /// Final real-environment test plus the run summary.
    pub fn eval_real(&mut self, cfg: &ExperimentConfig, paths: &RunPaths) -> Result<RunSummary> {
        echo_config(cfg, paths)?;
        let data = self.load_data(cfg, paths)?;
        let models = self.load_models(cfg, paths)?;
        let ctrl = ControllerParams::load(&paths.controller()).map_err(|e| missing("controller", &paths.controller(), e))?;
        let board = read_leaderboard(&paths.leaderboard())?;
        let real = real_eval(cfg, &ctrl, &models.members[0])?;
        let loss = test_loss(cfg, &models.members[0], &data)?;
        paths.ensure("eval")?;
        let mut returns = String::from("episode,return\n");
        for (i, r) in real.returns.iter().enumerate() {
            let _ = writeln!(returns, "{i},{r}");
        }
        std::fs::write(paths.returns(), returns)?;
        let (dream_generation, dream_mean, dream_std) = board
            .into_iter()
            .fold(None, |best: Option<(usize, f64, f64)>, e| match best {
                Some(b) if b.1 >= e.1 => Some(b),
                _ => Some(e),
            })
            .ok_or_else(|| Error::Corrupt("empty leader board".into()))?;
        let summary = RunSummary {
            config_hash: cfg.hash(),
            setting_hash: cfg.setting_hash(),
            seed: cfg.seed,
            env: cfg.env.name().to_string(),
            p_train: cfg.model.p_train,
            p_infer: cfg.dream.p_infer,
            policy: cfg.dream.policy,
            mc_samples: cfg.dream.mc_samples,
            noise_sigma: cfg.dream.noise_sigma,
            ensemble_size: cfg.dream.ensemble_size,
            train_loss: models.reports[0].final_train_loss().unwrap_or(f64::NAN),
            test_loss: loss.map(|l| l.0),
            test_loss_se: loss.map(|l| l.1),
            dream_generation,
            dream_mean,
            dream_std,
            real_mean: real.mean,
            real_std: real.std,
            real_episodes: real.returns.len(),
        };
        write_json(&paths.summary(), &summary)?;
        Ok(summary)
    }

    pub fn run(&mut self, cfg: &ExperimentConfig, paths: &RunPaths) -> Result<RunSummary> {
        self.collect(cfg, paths)?;
        self.train_dynamics(cfg, paths)?;
        self.train_controller(cfg, paths)?;
        self.eval_real(cfg, paths)
    }
}

fn missing(what: &str, path: &Path, e: Error) -> Error {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::Config(format!(
            "no {what} at {}; run the earlier pipeline stage first",
            path.display()
        )),
        other => other,
    }
}

fn read_loss_csv(path: &Path) -> Result<LossReport> {
    use crate::trainer::EpochLoss;
    use crate::world_model::LossTerms;
    let text = std::fs::read_to_string(path).map_err(|e| missing("loss report", path, e.into()))?;
    let mut report = LossReport::default();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Corrupt(format!("bad number `{s}` in {}", path.display())));
        if f.len() != 6 {
            return Err(Error::Corrupt(format!("bad row in {}", path.display())));
        }
        let test = if f[2].is_empty() {
            None
        } else {
            Some(LossTerms { total: num(f[2])?, ..Default::default() })
        };
        report.epochs.push(EpochLoss {
            epoch: f[0].parse().map_err(|_| Error::Corrupt("bad epoch".into()))?,
            train: LossTerms {
                total: num(f[1])?,
                latent: num(f[3])?,
                reward: num(f[4])?,
                done: num(f[5])?,
                steps: 1,
            },
            test,
        });
    }
    Ok(report)
}

fn read_leaderboard(path: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| missing("leader board", path, e.into()))?;
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Corrupt(format!("bad leader-board row `{line}`"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok((
                f[0].parse().map_err(|_| bad())?,
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

/// One sweep axis: a config key and the values it takes.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub name: String,
    pub key: String,
    pub values: Vec<String>,
}

impl Axis {
    /// Parses `name=v1,v2,...`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (name, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("axis `{spec}` must look like name=v1,v2")))?;
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("axis `{name}` has no values")));
        }
        Ok(Axis {
            name: name.trim().to_string(),
            key: axis_key(name.trim()).to_string(),
            values,
        })
    }
}

/// Every combination of axis values applied to `base`, in row-major order.
pub fn sweep_points(base: &ExperimentConfig, axes: &[Axis]) -> Result<Vec<(Vec<String>, ExperimentConfig)>> {
    let mut points = vec![(Vec::new(), base.clone())];
    for axis in axes {
        let mut next = Vec::with_capacity(points.len() * axis.values.len());
        for (labels, cfg) in &points {
            for v in &axis.values {
                let c = cfg
                    .with_override(&axis.key, v)
                    .map_err(|e| Error::Config(format!("axis `{}`: {e}", axis.name)))?;
                let mut l = labels.clone();
                l.push(v.clone());
                next.push((l, c));
            }
        }
        points = next;
    }
    Ok(points)
}

pub fn point_dir(root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    root.join("points").join(cfg.hash())
}

/// Runs the full pipeline at every sweep point and writes `ablation.csv`
/// under `root`, one row per point.
pub fn ablate(base: &ExperimentConfig, axes: &[Axis], root: &Path) -> Result<Vec<RunSummary>> {
    let points = sweep_points(base, axes)?;
    let mut pipeline = Pipeline::new();
    let mut csv = String::new();
    let header: Vec<String> = axes
        .iter()
        .map(|a| format!("axis_{}", a.name))
        .chain(SUMMARY_COLUMNS.iter().map(|s| s.to_string()))
        .collect();
    let _ = writeln!(csv, "{}", header.join(","));
    let mut out = Vec::with_capacity(points.len());
    for (labels, cfg) in points {
        let dir = point_dir(root, &cfg);
        let summary = pipeline.run(&cfg, &RunPaths::new(&dir))?;
        let row: Vec<String> = labels.into_iter().chain(summary.csv_fields()).collect();
        let _ = writeln!(csv, "{}", row.join(","));
        out.push(summary);
    }
    std::fs::create_dir_all(root)?;
    std::fs::write(root.join("ablation.csv"), csv)?;
    Ok(out)
}

/// Finds every `summary.json` under `dir`, sorted by path.
pub fn find_summaries(dir: &Path) -> Result<Vec<RunSummary>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else if path.file_name().is_some_and(|n| n == "summary.json") {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut paths = Vec::new();
    walk(dir, &mut paths)?;
    paths.sort();
    paths
        .iter()
        .map(|p| Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?))
        .collect()
}

/// Per-run rows, and per-setting mean ± std of the real return across seeds.
pub fn report_tables(summaries: &[RunSummary]) -> (String, String) {
    let mut runs = String::new();
    let _ = writeln!(runs, "{}", SUMMARY_COLUMNS.join(","));
    for s in summaries {
        let _ = writeln!(runs, "{}", s.csv_fields().join(","));
    }
    let mut groups: BTreeMap<&str, Vec<&RunSummary>> = BTreeMap::new();
    for s in summaries {
        groups.entry(&s.setting_hash).or_default().push(s);
    }
    let mut table = String::from("setting_hash,env,p_train,p_infer,policy,mc_samples,noise_sigma,ensemble_size,seeds,real_mean,real_std,dream_mean\n");
    for (hash, rows) in groups {
        let real: Vec<f64> = rows.iter().map(|r| r.real_mean).collect();
        let dream: Vec<f64> = rows.iter().map(|r| r.dream_mean).collect();
        let (m, sd) = crate::envs::mean_std(&real);
        let (dm, _) = crate::envs::mean_std(&dream);
        let r = rows[0];
        let f = r.csv_fields();
        let _ = writeln!(
            table,
            "{hash},{},{},{},{},{},{},{},{},{m},{sd},{dm}",
            r.env, f[4], f[5], f[6], f[7], f[8], f[9], rows.len()
        );
    }
    (runs, table)
}
