//! Episodic simulators driven by a trained dynamics model.
//!
//! Each transition is sampled from the mixture head after one LSTM step under
//! the active dropout mask, so every distinct mask is a distinct environment.
//! The same type also provides the baselines: Monte Carlo averaging over
//! masks, additive latent noise, and a population of independently trained
//! models.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dropout_lstm::{LstmState, MaskSet, StepWorkspace};
use crate::error::{check_dim, Error, Result};
use crate::numerics::SeededRng;
use crate::world_model::{sample_transition, ModelDims, Prediction, WorldModelParams};

/// When a new dropout mask is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RandomizationPolicy {
    /// All-ones mask throughout.
    Off,
    /// One mask per episode, drawn at reset.
    Episode,
    /// A fresh mask before every step.
    Step,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZInit {
    StandardNormal,
    /// First latent of a uniformly chosen stored trajectory.
    DatasetStarts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DreamConfig {
    pub p_infer: f64,
    pub policy: RandomizationPolicy,
    /// Forward passes averaged per step; 0 disables Monte Carlo averaging.
    pub mc_samples: usize,
    pub z_init: ZInit,
    pub max_ep_len: usize,
    /// Std of Gaussian noise added to each sampled latent; 0 disables it.
    pub noise_sigma: f64,
    /// Scale applied to kept units of inference masks. `None` uses `1 / (1 - p_infer)`.
    pub keep_scale: Option<f64>,
}

impl Default for DreamConfig {
    fn default() -> Self {
        DreamConfig {
            p_infer: 0.1,
            policy: RandomizationPolicy::Step,
            mc_samples: 0,
            z_init: ZInit::DatasetStarts,
            max_ep_len: 1000,
            noise_sigma: 0.0,
            keep_scale: None,
        }
    }
}

impl DreamConfig {
    pub fn validate(&self, ensemble_size: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_infer) {
            return Err(Error::Config(format!("p_infer must lie in [0, 1), got {}", self.p_infer)));
        }
        if self.max_ep_len == 0 {
            return Err(Error::Config("max_ep_len must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be finite and non-negative, got {}", self.noise_sigma)));
        }
        if let Some(s) = self.keep_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("keep_scale must be positive, got {s}")));
            }
        }
        if ensemble_size == 0 {
            return Err(Error::Config("a dream needs at least one model".into()));
        }
        let variants = [self.mc_samples > 0, self.noise_sigma > 0.0, ensemble_size > 1];
        if variants.iter().filter(|&&v| v).count() > 1 {
            return Err(Error::Config(
                "mc_samples, noise_sigma and an ensemble cannot be combined".into(),
            ));
        }
        Ok(())
    }

    pub fn resolved_keep_scale(&self) -> f64 {
        self.keep_scale.unwrap_or(1.0 / (1.0 - self.p_infer))
    }
}

/// Stream ids under an episode seed; each concern draws from its own stream.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_MASK: u64 = 1;
pub const STREAM_TRANSITION: u64 = 2;
pub const STREAM_MEMBER: u64 = 3;
pub const STREAM_NOISE: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct DreamStep {
    pub z: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// Forced by the step limit rather than sampled.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub z_hat: Vec<f64>,
    pub action: Vec<f64>,
    pub r_hat: f64,
    pub d_hat: f64,
    pub mask_id: u64,
    pub member: usize,
    pub truncated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub total_reward: f64,
    pub steps: usize,
    pub truncated: bool,
}

struct Streams {
    mask: SeededRng,
    transition: SeededRng,
    member: SeededRng,
    noise: SeededRng,
}

pub struct DreamEnv<'a> {
    models: &'a [WorldModelParams],
    starts: &'a [Vec<f64>],
    cfg: DreamConfig,
    dims: ModelDims,
    action_dims: Vec<usize>,
    keep_scale: f64,
    ws: StepWorkspace,
    state: LstmState,
    next: LstmState,
    pred: Prediction,
    x: Vec<f64>,
    z: Vec<f64>,
    ones: MaskSet,
    mask: MaskSet,
    member: usize,
    t: usize,
    done: bool,
    streams: Option<Streams>,
    masks_sampled: u64,
    mc: Option<McScratch>,
    trace: Option<Vec<TraceRecord>>,
}

struct McScratch {
    sum_state: LstmState,
    sum_pred: Prediction,
    pass_state: LstmState,
    pass_pred: Prediction,
}

impl<'a> DreamEnv<'a> {
    /// `models` holds one model, or several for a population ensemble.
    /// `starts` is the pool for [`ZInit::DatasetStarts`].
    pub fn new(models: &'a [WorldModelParams], starts: &'a [Vec<f64>], cfg: DreamConfig) -> Result<Self> {
        cfg.validate(models.len())?;
        let dims = models[0].dims();
        if models.iter().any(|m| m.dims() != dims) {
            return Err(Error::Config("ensemble members must share dimensions".into()));
        }
        let ones = MaskSet::ones(dims.input(), dims.hidden);
        let mc = (cfg.mc_samples > 0).then(|| McScratch {
            sum_state: LstmState::zeros(dims.hidden),
            sum_pred: Prediction::empty(dims),
            pass_state: LstmState::zeros(dims.hidden),
            pass_pred: Prediction::empty(dims),
        });
        Ok(DreamEnv {
            models,
            starts,
            keep_scale: cfg.resolved_keep_scale(),
            cfg,
            dims,
            action_dims: dims.action_indices(),
            ws: StepWorkspace::new(&models[0].lstm),
            state: LstmState::zeros(dims.hidden),
            next: LstmState::zeros(dims.hidden),
            pred: Prediction::empty(dims),
            x: vec![0.0; dims.input()],
            z: vec![0.0; dims.latent],
            mask: ones.clone(),
            ones,
            member: 0,
            t: 0,
            done: true,
            streams: None,
            masks_sampled: 0,
            mc,
            trace: None,
        })
    }

    pub fn config(&self) -> &DreamConfig {
        &self.cfg
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn latent(&self) -> &[f64] {
        &self.z
    }

    pub fn lstm_state(&self) -> &LstmState {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Index of the ensemble member that produced the last transition.
    pub fn active_member(&self) -> usize {
        self.member
    }

    pub fn active_mask(&self) -> &MaskSet {
        &self.mask
    }

    /// Masks drawn since construction, across all episodes.
    pub fn masks_sampled(&self) -> u64 {
        self.masks_sampled
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    /// Writes the trace as one JSON object per line.
    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in self.trace() {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    fn draw_mask(&mut self) -> Result<()> {
        let streams = self.streams.as_mut().expect("reset before sampling");
        self.mask = MaskSet::sample_scaled(
            self.cfg.p_infer,
            self.keep_scale,
            self.dims.input(),
            self.dims.hidden,
            &self.action_dims,
            &mut streams.mask,
        )?;
        self.masks_sampled += 1;
        Ok(())
    }

    fn draw_member(&mut self) {
        if self.models.len() > 1 {
            let streams = self.streams.as_mut().expect("reset before sampling");
            self.member = streams.member.below(self.models.len());
        }
    }

    /// Starts an episode whose randomness is fully determined by `seed`.
    /// Returns the initial latent; the hidden state is zero.
    pub fn reset(&mut self, seed: u64) -> Result<Vec<f64>> {
        let mut init = SeededRng::derive(seed, &[STREAM_INIT]);
        self.z = match self.cfg.z_init {
            ZInit::StandardNormal => (0..self.dims.latent).map(|_| init.normal()).collect(),
            ZInit::DatasetStarts => {
                if self.starts.is_empty() {
                    return Err(Error::EmptyDataset);
                }
                let z = &self.starts[init.below(self.starts.len())];
                check_dim("dream start state", self.dims.latent, z.len())?;
                z.clone()
            }
        };
        self.streams = Some(Streams {
            mask: SeededRng::derive(seed, &[STREAM_MASK]),
            transition: SeededRng::derive(seed, &[STREAM_TRANSITION]),
            member: SeededRng::derive(seed, &[STREAM_MEMBER]),
            noise: SeededRng::derive(seed, &[STREAM_NOISE]),
        });
        self.state = LstmState::zeros(self.dims.hidden);
        self.t = 0;
        self.done = false;
        self.member = 0;
        self.mask = self.ones.clone();
        if self.cfg.mc_samples == 0 && self.cfg.noise_sigma == 0.0 && self.cfg.policy == RandomizationPolicy::Episode {
            self.draw_mask()?;
        }
        if self.cfg.policy == RandomizationPolicy::Episode {
            self.draw_member();
        }
        if let Some(tr) = self.trace.as_mut() {
            tr.clear();
        }
        Ok(self.z.clone())
    }

    fn check_step(&mut self, action: &[f64]) -> Result<()> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        check_dim("dream action", self.dims.action, action.len())?;
        let n = self.dims.latent;
        self.x[..n].copy_from_slice(&self.z);
        self.x[n..].copy_from_slice(action);
        Ok(())
    }

    /// Advances one step according to the configured variant.
    pub fn step(&mut self, action: &[f64]) -> Result<DreamStep> {
        if self.cfg.mc_samples > 0 {
            return self.mc_step(action);
        }
        self.check_step(action)?;
        let noisy = self.cfg.noise_sigma > 0.0;
        if !noisy && self.cfg.policy == RandomizationPolicy::Step {
            self.draw_mask()?;
        }
        if self.cfg.policy == RandomizationPolicy::Step {
            self.draw_member();
        }
        let model = &self.models[self.member];
        let mask = if noisy { &self.ones } else { &self.mask };
        self.ws.step(&model.lstm, &self.state, &self.x, mask, &mut self.next)?;
        model.heads_into(&self.next.h, &mut self.pred);
        std::mem::swap(&mut self.state, &mut self.next);
        self.finish_step(action)
    }

    /// Averages the next state and the head outputs over `mc_samples`
    /// independently masked passes, then samples from the averaged mixture.
    pub fn mc_step(&mut self, action: &[f64]) -> Result<DreamStep> {
        let k = self.cfg.mc_samples.max(1);
        self.check_step(action)?;
        let mut mc = self.mc.take().unwrap_or_else(|| McScratch {
            sum_state: LstmState::zeros(self.dims.hidden),
            sum_pred: Prediction::empty(self.dims),
            pass_state: LstmState::zeros(self.dims.hidden),
            pass_pred: Prediction::empty(self.dims),
        });
        let model = &self.models[0];
        // mean = first + Σ (pass − first) / K, so identical passes reproduce
        // the single-pass values exactly.
        for pass in 0..k {
            self.draw_mask()?;
            if pass == 0 {
                self.ws.step(&model.lstm, &self.state, &self.x, &self.mask, &mut self.next)?;
                model.heads_into(&self.next.h, &mut self.pred);
                zero_state(&mut mc.sum_state);
                zero_pred(&mut mc.sum_pred);
                continue;
            }
            self.ws.step(&model.lstm, &self.state, &self.x, &self.mask, &mut mc.pass_state)?;
            model.heads_into(&mc.pass_state.h, &mut mc.pass_pred);
            acc_diff(&mut mc.sum_state.h, &mc.pass_state.h, &self.next.h);
            acc_diff(&mut mc.sum_state.c, &mc.pass_state.c, &self.next.c);
            let (s, p, b) = (&mut mc.sum_pred, &mc.pass_pred, &self.pred);
            acc_diff(&mut s.mdn.pi, &p.mdn.pi, &b.mdn.pi);
            acc_diff(&mut s.mdn.mu, &p.mdn.mu, &b.mdn.mu);
            acc_diff(&mut s.mdn.sigma, &p.mdn.sigma, &b.mdn.sigma);
            s.r_hat += p.r_hat - b.r_hat;
            s.d_hat += p.d_hat - b.d_hat;
        }
        if k > 1 {
            let kf = k as f64;
            apply_mean(&mut self.next.h, &mc.sum_state.h, kf);
            apply_mean(&mut self.next.c, &mc.sum_state.c, kf);
            let (p, s) = (&mut self.pred, &mc.sum_pred);
            apply_mean(&mut p.mdn.pi, &s.mdn.pi, kf);
            apply_mean(&mut p.mdn.mu, &s.mdn.mu, kf);
            apply_mean(&mut p.mdn.sigma, &s.mdn.sigma, kf);
            p.r_hat += s.r_hat / kf;
            p.d_hat += s.d_hat / kf;
            // Logs are refreshed only where averaging moved a value, so
            // identical passes leave the prediction bit-for-bit unchanged.
            for ((lp, &pi), &d) in p.mdn.log_pi.iter_mut().zip(&p.mdn.pi).zip(&s.mdn.pi) {
                if d != 0.0 {
                    *lp = pi.ln();
                }
            }
            for ((ls, &sg), &d) in p.mdn.log_sigma.iter_mut().zip(&p.mdn.sigma).zip(&s.mdn.sigma) {
                if d != 0.0 {
                    *ls = sg.ln();
                }
            }
            if s.d_hat != 0.0 {
                p.done_logit = (p.d_hat / (1.0 - p.d_hat)).ln();
            }
        }
        self.mc = Some(mc);
        std::mem::swap(&mut self.state, &mut self.next);
        self.finish_step(action)
    }

    /// Prediction behind the last transition.
    pub fn last_prediction(&self) -> &Prediction {
        &self.pred
    }

    fn finish_step(&mut self, action: &[f64]) -> Result<DreamStep> {
        let streams = self.streams.as_mut().expect("reset before stepping");
        let sampled = sample_transition(&self.pred, &mut streams.transition);
        let mut z = sampled.z;
        if self.cfg.noise_sigma > 0.0 {
            for v in z.iter_mut() {
                *v += self.cfg.noise_sigma * streams.noise.normal();
            }
        }
        self.t += 1;
        let truncated = !sampled.done && self.t >= self.cfg.max_ep_len;
        self.done = sampled.done || truncated;
        self.z.clone_from(&z);
        if let Some(tr) = self.trace.as_mut() {
            tr.push(TraceRecord {
                t: self.t,
                z_hat: z.clone(),
                action: action.to_vec(),
                r_hat: self.pred.r_hat,
                d_hat: self.pred.d_hat,
                mask_id: self.mask.id(),
                member: self.member,
                truncated,
            });
        }
        Ok(DreamStep {
            z,
            reward: sampled.reward,
            done: self.done,
            truncated,
        })
    }

    /// Plays one episode with `policy(z, state)` choosing each action.
    pub fn run_episode<F>(&mut self, seed: u64, mut policy: F) -> Result<EpisodeOutcome>
    where
        F: FnMut(&[f64], &LstmState) -> Result<Vec<f64>>,
    {
        self.reset(seed)?;
        let mut total = 0.0;
        loop {
            let action = policy(&self.z, &self.state)?;
            let st = self.step(&action)?;
            total += st.reward;
            if st.done {
                return Ok(EpisodeOutcome {
                    total_reward: total,
                    steps: self.t,
                    truncated: st.truncated,
                });
            }
        }
    }
}

fn zero_state(s: &mut LstmState) {
    s.h.iter_mut().for_each(|v| *v = 0.0);
    s.c.iter_mut().for_each(|v| *v = 0.0);
}

fn zero_pred(p: &mut Prediction) {
    for v in [&mut p.mdn.pi, &mut p.mdn.mu, &mut p.mdn.sigma] {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
    p.r_hat = 0.0;
    p.d_hat = 0.0;
}

fn acc_diff(sum: &mut [f64], pass: &[f64], base: &[f64]) {
    for ((s, p), b) in sum.iter_mut().zip(pass).zip(base) {
        *s += p - b;
    }
}

fn apply_mean(base: &mut [f64], sum: &[f64], k: f64) {
    for (b, s) in base.iter_mut().zip(sum) {
        *b += s / k;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dropout_lstm::lstm_step;

    fn dims() -> ModelDims {
        ModelDims {
            latent: 3,
            action: 2,
            hidden: 6,
            mixtures: 2,
        }
    }

    fn model(seed: u64) -> WorldModelParams {
        WorldModelParams::init(dims(), &mut SeededRng::new(seed)).unwrap()
    }

    fn cfg(policy: RandomizationPolicy, p: f64) -> DreamConfig {
        DreamConfig {
            p_infer: p,
            policy,
            z_init: ZInit::StandardNormal,
            max_ep_len: 50,
            ..Default::default()
        }
    }

    fn rollout(env: &mut DreamEnv, seed: u64, steps: usize) -> Vec<(Vec<f64>, f64, bool)> {
        env.reset(seed).unwrap();
        let mut out = Vec::new();
        for t in 0..steps {
            let a = [(t as f64 * 0.3).sin(), 0.5];
            let st = env.step(&a).unwrap();
            out.push((st.z, st.reward, st.done));
            if st.done {
                break;
            }
        }
        out
    }

    #[test]
    fn reset_zeroes_hidden_state() {
        let models = [model(1)];
        let mut env = DreamEnv::new(&models, &[], cfg(RandomizationPolicy::Step, 0.1)).unwrap();
        rollout(&mut env, 3, 5);
        env.reset(4).unwrap();
        assert!(env.lstm_state().h.iter().chain(&env.lstm_state().c).all(|&v| v == 0.0));
        assert_eq!(env.steps(), 0);
    }

    #[test]
    fn off_policy_matches_mask_free_rollout() {
        let models = [model(2)];
        let mut env = DreamEnv::new(&models, &[], cfg(RandomizationPolicy::Off, 0.3)).unwrap();
        let got = rollout(&mut env, 11, 20);

        let m = &models[0];
        let mut init = SeededRng::derive(11, &[STREAM_INIT]);
        let mut z: Vec<f64> = (0..3).map(|_| init.normal()).collect();
        let mut trans = SeededRng::derive(11, &[STREAM_TRANSITION]);
        let mut s = LstmState::zeros(6);
        let ones = MaskSet::ones(5, 6);
        for (t, (gz, gr, gd)) in got.iter().enumerate() {
            let a = [(t as f64 * 0.3).sin(), 0.5];
            let x: Vec<f64> = z.iter().chain(&a).copied().collect();
            s = lstm_step(&m.lstm, &s, &x, &ones).unwrap();
            let pred = m.heads_forward(&s.h).unwrap();
            let tr = sample_transition(&pred, &mut trans);
            assert_eq!(&tr.z, gz);
            assert_eq!(tr.reward, *gr);
            assert_eq!(tr.done || t + 1 == 50, *gd);
            z = tr.z;
        }
    }

    #[test]
    fn mask_counts_follow_policy() {
        let models = [model(3)];
        let mut zeroed = models[0].clone();
        zeroed.done_w.iter_mut().for_each(|w| *w = 0.0);
        zeroed.done_b[0] = -50.0;
        let models = [zeroed];
        for (policy, expected) in [(RandomizationPolicy::Episode, 1), (RandomizationPolicy::Step, 50), (RandomizationPolicy::Off, 0)] {
            let mut env = DreamEnv::new(&models, &[], cfg(policy, 0.1)).unwrap();
            let out = env.run_episode(5, |_, _| Ok(vec![0.0, 0.0])).unwrap();
            assert_eq!(out.steps, 50);
            assert!(out.truncated);
            assert_eq!(env.masks_sampled(), expected, "{policy:?}");
        }
    }

    #[test]
    fn stepping_a_finished_episode_fails() {
        let models = [model(4)];
        let mut c = cfg(RandomizationPolicy::Step, 0.1);
        c.max_ep_len = 1;
        let mut env = DreamEnv::new(&models, &[], c).unwrap();
        env.reset(1).unwrap();
        assert!(env.step(&[0.0, 0.0]).unwrap().done);
        assert!(matches!(env.step(&[0.0, 0.0]), Err(Error::EpisodeDone)));
        assert!(env.step(&[0.0]).is_err());
    }

    #[test]
    fn dataset_starts_come_from_the_pool() {
        let models = [model(5)];
        let starts = vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 1.0]];
        let c = DreamConfig { z_init: ZInit::DatasetStarts, ..cfg(RandomizationPolicy::Step, 0.1) };
        let mut env = DreamEnv::new(&models, &starts, c.clone()).unwrap();
        for seed in 0..50 {
            let z = env.reset(seed).unwrap();
            assert!(starts.contains(&z));
        }
        let mut empty = DreamEnv::new(&models, &[], c).unwrap();
        assert!(matches!(empty.reset(0), Err(Error::EmptyDataset)));
    }

    #[test]
    fn variants_are_mutually_exclusive() {
        let models = [model(6), model(7)];
        let noisy = DreamConfig { noise_sigma: 0.1, ..cfg(RandomizationPolicy::Step, 0.0) };
        assert!(DreamEnv::new(&models, &[], noisy.clone()).is_err());
        assert!(DreamEnv::new(&models[..1], &[], noisy).is_ok());
        let both = DreamConfig { noise_sigma: 0.1, mc_samples: 4, ..cfg(RandomizationPolicy::Step, 0.1) };
        assert!(DreamEnv::new(&models[..1], &[], both).is_err());
        let bad = cfg(RandomizationPolicy::Step, 1.0);
        assert!(DreamEnv::new(&models[..1], &[], bad).is_err());
    }

    #[test]
    fn trace_records_every_step() {
        let models = [model(8)];
        let mut env = DreamEnv::new(&models, &[], cfg(RandomizationPolicy::Step, 0.1)).unwrap();
        env.enable_trace();
        let out = env.run_episode(2, |_, _| Ok(vec![0.1, -0.1])).unwrap();
        assert_eq!(env.trace().len(), out.steps);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        env.write_trace(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let first: TraceRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first, env.trace()[0]);
    }
}
