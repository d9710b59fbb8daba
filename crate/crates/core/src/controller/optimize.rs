use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cmaes::CmaState;
use super::ControllerParams;
use crate::dream::DreamEnv;
use crate::dropout_lstm::{LstmState, MaskSet, StepWorkspace};
use crate::envs::{mean_std, Environment};
use crate::error::{check_dim, Error, Result};
use crate::numerics::SeededRng;
use crate::world_model::WorldModelParams;

const EPISODE_STREAM: u64 = 1;
const BOARD_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmaConfig {
    /// Candidates per generation.
    pub population: usize,
    /// Dream episodes averaged per candidate.
    pub trials: usize,
    pub generations: usize,
    pub sigma0: f64,
    /// Generations between leader-board re-evaluations.
    pub eval_cadence: usize,
    /// Set from the experiment seed rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for CmaConfig {
    fn default() -> Self {
        CmaConfig {
            population: 16,
            trials: 4,
            generations: 200,
            sigma0: 0.5,
            eval_cadence: 25,
            seed: 0,
        }
    }
}

impl CmaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 4 {
            return Err(Error::Config(format!("population must be at least 4, got {}", self.population)));
        }
        if self.trials == 0 || self.generations == 0 {
            return Err(Error::Config("trials and generations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeaderEntry {
    pub generation: usize,
    pub controller: ControllerParams,
    pub dream_mean: f64,
    pub dream_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LeaderBoard {
    pub entries: Vec<LeaderEntry>,
}

impl LeaderBoard {
    /// Entry with the highest dream mean; the earliest wins ties.
    pub fn best(&self) -> Option<&LeaderEntry> {
        self.entries.iter().fold(None, |best: Option<&LeaderEntry>, e| match best {
            Some(b) if b.dream_mean >= e.dream_mean => Some(b),
            _ => Some(e),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("generation,dream_mean,dream_std\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{}", e.generation, e.dream_mean, e.dream_std);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub sigma: f64,
    /// Dropout masks drawn while evaluating this generation's candidates.
    pub masks_sampled: u64,
    pub dream_steps: u64,
    pub non_finite: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PopulationEval {
    /// Mean dream return per candidate.
    pub fitness: Vec<f64>,
    pub masks_sampled: u64,
    pub dream_steps: u64,
}

#[derive(Clone, Debug)]
pub struct CmaOutcome {
    pub board: LeaderBoard,
    pub best: ControllerParams,
    pub history: Vec<GenerationStats>,
}

fn episode_seed(seed: u64, path: &[u64]) -> u64 {
    SeededRng::derive(seed, path).next_seed()
}

struct Returns {
    returns: Vec<f64>,
    masks: u64,
    steps: u64,
}

fn play<'a, F>(make_env: &F, ctrl: &ControllerParams, seeds: &[u64]) -> Result<Returns>
where
    F: Fn() -> Result<DreamEnv<'a>>,
{
    let mut env = make_env()?;
    ctrl.check_model(env.dims())?;
    let mut returns = Vec::with_capacity(seeds.len());
    let mut steps = 0;
    for &s in seeds {
        let out = env.run_episode(s, |z, st| ctrl.act(z, st))?;
        returns.push(out.total_reward);
        steps += out.steps as u64;
    }
    Ok(Returns {
        returns,
        masks: env.masks_sampled(),
        steps,
    })
}

/// Mean dream return of each candidate over `cfg.trials` episodes. Episode
/// randomness is keyed by `(generation, member, trial)`, so results do not
/// depend on evaluation order.
pub fn evaluate_population<'a, F>(
    make_env: &F,
    members: &[ControllerParams],
    generation: usize,
    cfg: &CmaConfig,
) -> Result<PopulationEval>
where
    F: Fn() -> Result<DreamEnv<'a>> + Sync,
{
    let results: Vec<Result<Returns>> = members
        .par_iter()
        .enumerate()
        .map(|(m, ctrl)| {
            let seeds: Vec<u64> = (0..cfg.trials)
                .map(|t| episode_seed(cfg.seed, &[EPISODE_STREAM, generation as u64, m as u64, t as u64]))
                .collect();
            play(make_env, ctrl, &seeds)
        })
        .collect();
    let mut eval = PopulationEval {
        fitness: Vec::with_capacity(members.len()),
        masks_sampled: 0,
        dream_steps: 0,
    };
    for r in results {
        let r = r?;
        eval.fitness.push(r.returns.iter().sum::<f64>() / r.returns.len() as f64);
        eval.masks_sampled += r.masks;
        eval.dream_steps += r.steps;
    }
    Ok(eval)
}

fn board_entry<'a, F>(make_env: &F, ctrl: &ControllerParams, generation: usize, cfg: &CmaConfig) -> Result<LeaderEntry>
where
    F: Fn() -> Result<DreamEnv<'a>> + Sync,
{
    let n = cfg.population * cfg.trials;
    let chunks: Vec<Vec<u64>> = (0..n)
        .map(|i| episode_seed(cfg.seed, &[BOARD_STREAM, generation as u64, i as u64]))
        .collect::<Vec<_>>()
        .chunks(cfg.trials)
        .map(<[u64]>::to_vec)
        .collect();
    let parts: Vec<Result<Returns>> = chunks.par_iter().map(|s| play(make_env, ctrl, s)).collect();
    let mut returns = Vec::with_capacity(n);
    for p in parts {
        returns.extend(p?.returns);
    }
    let (mean, std) = mean_std(&returns);
    Ok(LeaderEntry {
        generation,
        controller: ctrl.clone(),
        dream_mean: mean,
        dream_std: std,
    })
}

/// Searches controller parameters with CMA-ES inside dream environments.
///
/// Every `eval_cadence` generations the generation's best candidate is
/// re-evaluated over `population × trials` fresh dream episodes and logged;
/// the returned controller is the board entry with the highest dream mean.
pub fn cma_optimize<'a, F>(make_env: F, template: &ControllerParams, cfg: &CmaConfig) -> Result<CmaOutcome>
where
    F: Fn() -> Result<DreamEnv<'a>> + Sync,
{
    cfg.validate()?;
    let mut cma = CmaState::new(vec![0.0; template.num_params()], cfg.sigma0, cfg.population, cfg.seed)?;
    let mut board = LeaderBoard::default();
    let mut history = Vec::with_capacity(cfg.generations);
    for generation in 0..cfg.generations {
        let candidates = cma.ask();
        let members: Vec<ControllerParams> = candidates
            .iter()
            .map(|c| template.with_flat(c))
            .collect::<Result<_>>()?;
        let eval = evaluate_population(&make_env, &members, generation, cfg)?;
        let update = cma.tell(&candidates, &eval.fitness)?;
        let best = update.order[0];
        let finite: Vec<f64> = eval.fitness.iter().copied().filter(|f| f.is_finite()).collect();
        history.push(GenerationStats {
            generation: generation + 1,
            best_fitness: eval.fitness[best],
            mean_fitness: finite.iter().sum::<f64>() / finite.len().max(1) as f64,
            sigma: cma.sigma(),
            masks_sampled: eval.masks_sampled,
            dream_steps: eval.dream_steps,
            non_finite: update.non_finite.len(),
        });
        let last = generation + 1 == cfg.generations;
        let on_cadence = cfg.eval_cadence > 0 && (generation + 1) % cfg.eval_cadence == 0;
        if on_cadence || (last && board.entries.is_empty()) {
            board.entries.push(board_entry(&make_env, &members[best], generation + 1, cfg)?);
        }
    }
    let best = board.best().expect("board has at least one entry").controller.clone();
    Ok(CmaOutcome { board, best, history })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealEval {
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

/// Runs the controller in the real environment. The model runs without
/// dropout and only supplies the recurrent features; nothing is updated.
pub fn evaluate_real(
    ctrl: &ControllerParams,
    model: &WorldModelParams,
    env: &mut dyn Environment,
    n_episodes: usize,
    seed: u64,
) -> Result<RealEval> {
    let dims = model.dims();
    ctrl.check_model(dims)?;
    check_dim("environment state size vs model", dims.latent, env.state_dim())?;
    check_dim("environment action size vs controller", env.action_dim(), ctrl.action_dim())?;
    if n_episodes == 0 {
        return Err(Error::invalid("n_episodes must be at least 1"));
    }
    let ones = MaskSet::ones(dims.input(), dims.hidden);
    let mut ws = StepWorkspace::new(&model.lstm);
    let mut returns = Vec::with_capacity(n_episodes);
    let mut x = vec![0.0; dims.input()];
    for ep in 0..n_episodes {
        let mut rng = SeededRng::derive(seed, &[ep as u64]);
        let mut z = env.reset(&mut rng);
        let mut state = LstmState::zeros(dims.hidden);
        let mut next = LstmState::zeros(dims.hidden);
        let mut total = 0.0;
        loop {
            let a = ctrl.act(&z, &state)?;
            let st = env.step(&a, &mut rng)?;
            total += st.reward;
            if st.done {
                break;
            }
            x[..dims.latent].copy_from_slice(&z);
            x[dims.latent..].copy_from_slice(&a);
            ws.step(&model.lstm, &state, &x, &ones, &mut next)?;
            std::mem::swap(&mut state, &mut next);
            z = st.z;
        }
        returns.push(total);
    }
    let (mean, std) = mean_std(&returns);
    Ok(RealEval { mean, std, returns })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::FeatureSpec;
    use crate::dream::{DreamConfig, RandomizationPolicy, ZInit};
    use crate::world_model::ModelDims;

    fn model() -> WorldModelParams {
        let dims = ModelDims {
            latent: 2,
            action: 1,
            hidden: 4,
            mixtures: 2,
        };
        let mut m = WorldModelParams::init(dims, &mut SeededRng::new(9)).unwrap();
        m.done_b[0] = -4.0;
        m
    }

    fn dream_cfg() -> DreamConfig {
        DreamConfig {
            p_infer: 0.1,
            policy: RandomizationPolicy::Step,
            z_init: ZInit::StandardNormal,
            max_ep_len: 30,
            ..Default::default()
        }
    }

    #[test]
    fn cadence_sets_board_size() {
        let models = [model()];
        let cfg = CmaConfig {
            population: 4,
            trials: 1,
            generations: 8,
            eval_cadence: 2,
            seed: 1,
            ..Default::default()
        };
        let template = ControllerParams::for_model(FeatureSpec::Zh, models[0].dims());
        let out = cma_optimize(|| DreamEnv::new(&models, &[], dream_cfg()), &template, &cfg).unwrap();
        assert_eq!(out.board.entries.len(), 4);
        assert_eq!(out.history.len(), 8);
        let best = out.board.best().unwrap();
        assert!(out.board.entries.iter().all(|e| e.dream_mean <= best.dream_mean));
        assert_eq!(out.best, best.controller);
        assert_eq!(out.board.to_csv().lines().count(), 5);
    }

    #[test]
    fn population_eval_is_order_independent() {
        let models = [model()];
        let cfg = CmaConfig { population: 4, trials: 2, ..Default::default() };
        let template = ControllerParams::for_model(FeatureSpec::Zh, models[0].dims());
        let members: Vec<ControllerParams> = (0..4)
            .map(|m| {
                let flat: Vec<f64> = (0..template.num_params()).map(|i| ((m * 7 + i) as f64).sin()).collect();
                template.with_flat(&flat).unwrap()
            })
            .collect();
        let make = || DreamEnv::new(&models, &[], dream_cfg());
        let a = evaluate_population(&make, &members, 3, &cfg).unwrap();
        let b = evaluate_population(&make, &members, 3, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
