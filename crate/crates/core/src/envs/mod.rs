//! Ground-truth environments, trajectory collection and dataset files.

mod dodge;
mod track;

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

pub use dodge::{DodgeConfig, DodgeWorld};
pub use track::{TrackConfig, TrackWorld};

use crate::container::{self, Block};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

pub const DATASET_KIND: &str = "dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EnvStep {
    pub z: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// Ended by the step limit rather than by the task.
    pub truncated: bool,
}

/// An episodic environment whose observation is its raw state vector.
pub trait Environment: Send {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn max_episode_len(&self) -> usize;
    fn reset(&mut self, rng: &mut SeededRng) -> Vec<f64>;
    /// Actions outside `[-1, 1]` are clamped.
    fn step(&mut self, action: &[f64], rng: &mut SeededRng) -> Result<EnvStep>;
    /// Scripted reference controller for the current state.
    fn expert_action(&self) -> Vec<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum EnvConfig {
    Track(TrackConfig),
    Dodge(DodgeConfig),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::Track(TrackConfig::default())
    }
}

impl EnvConfig {
    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvConfig::Track(c) => Box::new(TrackWorld::new(c.clone())?),
            EnvConfig::Dodge(c) => Box::new(DodgeWorld::new(c.clone())?),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Track(_) => "track",
            EnvConfig::Dodge(_) => "dodge",
        }
    }
}

pub fn random_action(dim: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..dim).map(|_| 2.0 * rng.uniform() - 1.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajStep {
    pub z: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub d: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub env: String,
    pub policy: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajStep>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.r).sum()
    }
}

fn policy_name(mix_expert_prob: f64) -> String {
    if mix_expert_prob == 0.0 {
        "random".into()
    } else if mix_expert_prob == 1.0 {
        "expert".into()
    } else {
        format!("mixed({mix_expert_prob})")
    }
}

/// Runs one episode, taking the expert action with probability
/// `mix_expert_prob` at every step and a uniform random action otherwise.
pub fn collect_episode(
    env: &mut dyn Environment,
    mix_expert_prob: f64,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = SeededRng::new(seed);
    let mut z = env.reset(&mut rng);
    let mut steps = Vec::new();
    loop {
        let a = if mix_expert_prob > 0.0 && rng.bernoulli(mix_expert_prob) {
            env.expert_action()
        } else {
            random_action(env.action_dim(), &mut rng)
        };
        let st = env.step(&a, &mut rng)?;
        steps.push(TrajStep {
            z: std::mem::replace(&mut z, st.z),
            a,
            r: st.reward,
            d: st.done,
        });
        if st.done {
            break;
        }
    }
    Ok(Trajectory {
        steps,
        meta: TrajectoryMeta {
            env: env.name().into(),
            policy: policy_name(mix_expert_prob),
            seed,
        },
    })
}

/// Collects `count` trajectories; trajectory `i` uses a stream derived from
/// `(seed, i)`, so collection order does not affect the data.
pub fn collect_trajectories(
    env: &mut dyn Environment,
    count: usize,
    mix_expert_prob: f64,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if count == 0 {
        return Err(Error::invalid("trajectory count must be at least 1"));
    }
    if !(0.0..=1.0).contains(&mix_expert_prob) {
        return Err(Error::invalid(format!("mix_expert_prob must lie in [0, 1], got {mix_expert_prob}")));
    }
    (0..count as u64)
        .map(|i| {
            let episode_seed = SeededRng::derive(seed, &[i]).next_seed();
            collect_episode(env, mix_expert_prob, episode_seed)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub env: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub mix_expert_prob: f64,
    pub seed: u64,
}

/// Trajectories plus a whole-trajectory train/test split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub trajectories: Vec<Trajectory>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn new(info: DatasetInfo, trajectories: Vec<Trajectory>, train: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        let n = trajectories.len();
        let mut seen = vec![false; n];
        for &i in train.iter().chain(&test) {
            if i >= n {
                return Err(Error::invalid(format!("split index {i} out of range")));
            }
            if seen[i] {
                return Err(Error::invalid(format!("trajectory {i} appears twice in the split")));
            }
            seen[i] = true;
        }
        for t in &trajectories {
            validate_trajectory(t, &info)?;
        }
        Ok(Dataset {
            info,
            trajectories,
            train,
            test,
        })
    }

    /// Every trajectory in the training split.
    pub fn all_train(info: DatasetInfo, trajectories: Vec<Trajectory>) -> Result<Self> {
        let train = (0..trajectories.len()).collect();
        Self::new(info, trajectories, train, Vec::new())
    }

    pub fn empty(info: DatasetInfo) -> Self {
        Dataset {
            info,
            trajectories: Vec::new(),
            train: Vec::new(),
            test: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn train_trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.train.iter().map(|&i| &self.trajectories[i])
    }

    pub fn test_trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.test.iter().map(|&i| &self.trajectories[i])
    }

    /// First observation of every training trajectory.
    pub fn start_states(&self) -> Vec<Vec<f64>> {
        self.train_trajectories()
            .filter_map(|t| t.steps.first().map(|s| s.z.clone()))
            .collect()
    }
}

fn validate_trajectory(t: &Trajectory, info: &DatasetInfo) -> Result<()> {
    let last = t.steps.len().saturating_sub(1);
    for (i, s) in t.steps.iter().enumerate() {
        if s.z.len() != info.state_dim || s.a.len() != info.action_dim {
            return Err(Error::invalid("trajectory step dimensions disagree with dataset"));
        }
        if s.d != (i == last) {
            return Err(Error::invalid("termination flag must be set on exactly the final step"));
        }
    }
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut header = Map::new();
    header.insert("info".into(), serde_json::to_value(&ds.info)?);
    header.insert("train".into(), json!(ds.train));
    header.insert("test".into(), json!(ds.test));
    let width = ds.info.state_dim + ds.info.action_dim + 2;
    let blocks: Vec<Block> = ds
        .trajectories
        .iter()
        .map(|t| {
            let mut data = Vec::with_capacity(t.len() * width);
            for s in &t.steps {
                data.extend_from_slice(&s.z);
                data.extend_from_slice(&s.a);
                data.push(s.r);
                data.push(if s.d { 1.0 } else { 0.0 });
            }
            Block::new("trajectory", data)
                .with_meta("steps", json!(t.len()))
                .with_meta("meta", serde_json::to_value(&t.meta).expect("meta serializes"))
        })
        .collect();
    container::write(path, DATASET_KIND, DATASET_VERSION, &header, &blocks)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let c = container::read(path, DATASET_KIND, DATASET_VERSION)?;
    let info: DatasetInfo = c.header_field("info")?;
    let train: Vec<usize> = c.header_field("train")?;
    let test: Vec<usize> = c.header_field("test")?;
    let width = info.state_dim + info.action_dim + 2;
    let mut trajectories = Vec::with_capacity(c.blocks.len());
    for b in &c.blocks {
        let steps = b.meta.get("steps").and_then(Value::as_u64).unwrap_or(u64::MAX) as usize;
        if b.name != "trajectory" || steps.checked_mul(width) != Some(b.data.len()) {
            return Err(Error::Corrupt("trajectory block has the wrong size".into()));
        }
        let meta: TrajectoryMeta = serde_json::from_value(
            b.meta.get("meta").cloned().ok_or_else(|| Error::Corrupt("trajectory without metadata".into()))?,
        )?;
        let steps = b
            .data
            .chunks_exact(width)
            .map(|row| {
                let (z, rest) = row.split_at(info.state_dim);
                let (a, rest) = rest.split_at(info.action_dim);
                TrajStep {
                    z: z.to_vec(),
                    a: a.to_vec(),
                    r: rest[0],
                    d: rest[1] != 0.0,
                }
            })
            .collect();
        trajectories.push(Trajectory { steps, meta });
    }
    Dataset::new(info, trajectories, train, test).map_err(|e| Error::Corrupt(e.to_string()))
}

/// Mean return of `episodes` rollouts under a fixed expert-mixing policy.
pub fn policy_mean_return(env: &mut dyn Environment, mix_expert_prob: f64, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    let trajs = collect_trajectories(env, episodes, mix_expert_prob, seed)?;
    let returns: Vec<f64> = trajs.iter().map(Trajectory::total_reward).collect();
    Ok(mean_std(&returns))
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
