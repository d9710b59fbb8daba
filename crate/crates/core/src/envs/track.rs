//! A tile-crossing driving task on a closed-form track.
//!
//! State `[s, v, y, ψ, κ(s)]`: progress along the track in `[0, 1]`, speed,
//! lateral offset (off track beyond `|y| > 1`), heading error, and the track
//! curvature at the current position. Actions are `[steer, throttle]` in
//! `[-1, 1]²`; negative throttle brakes. Steering authority falls with
//! speed, so curves must be taken slower than straights. Driving past the
//! playfield edge at `|y| = 2` ends the episode.
//!
//! The scripted expert draws a target pace and a lateral racing line per
//! episode, so its runs cover slow and fast driving as well as the grass.

use serde::{Deserialize, Serialize};

use super::{EnvStep, Environment};
use crate::error::{check_dim, Error, Result};
use crate::numerics::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    pub n_tiles: usize,
    pub max_ep_len: usize,
    pub noise_std: f64,
    /// Peak curvature of the sinusoidal track.
    pub curvature: f64,
    /// Number of full left/right curve cycles along the track.
    pub curve_cycles: f64,
    /// Progress per step at unit speed.
    pub step_length: f64,
    /// Range of the expert's per-episode speed multiplier.
    pub expert_pace: (f64, f64),
    /// Largest lateral offset of the expert's per-episode racing line.
    pub expert_line: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            n_tiles: 20,
            max_ep_len: 1000,
            noise_std: 0.01,
            curvature: 1.0,
            curve_cycles: 3.0,
            step_length: 1.0 / 50.0,
            expert_pace: (0.6, 1.6),
            expert_line: 1.9,
        }
    }
}

const ACCEL: f64 = 0.1;
const BRAKE: f64 = 0.2;
const DRAG: f64 = 0.02;
const GRASS_DRAG: f64 = 0.15;
const STEER_GAIN: f64 = 1.5;
const TURN_RATE: f64 = 0.2;
const MAX_HEADING: f64 = 1.2;
const MAX_OFFSET: f64 = 2.0;

#[derive(Clone, Debug)]
pub struct TrackWorld {
    cfg: TrackConfig,
    s: f64,
    v: f64,
    y: f64,
    psi: f64,
    pace: f64,
    line: f64,
    tiles_crossed: usize,
    steps: usize,
    done: bool,
}

impl TrackWorld {
    pub fn new(cfg: TrackConfig) -> Result<Self> {
        if cfg.n_tiles == 0 || cfg.max_ep_len == 0 {
            return Err(Error::Config("track needs at least one tile and one step".into()));
        }
        let (lo, hi) = cfg.expert_pace;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("expert_pace must be a positive range, got ({lo}, {hi})")));
        }
        if !(0.0..MAX_OFFSET).contains(&cfg.expert_line) {
            return Err(Error::Config(format!("expert_line must lie in [0, {MAX_OFFSET}), got {}", cfg.expert_line)));
        }
        Ok(TrackWorld {
            cfg,
            s: 0.0,
            v: 0.0,
            y: 0.0,
            psi: 0.0,
            pace: 1.0,
            line: 0.0,
            tiles_crossed: 0,
            steps: 0,
            done: true,
        })
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        self.cfg.curvature * (2.0 * std::f64::consts::PI * self.cfg.curve_cycles * s).sin()
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.s, self.v, self.y, self.psi, self.curvature_at(self.s)]
    }

    /// Heading change per unit of distance travelled at full steering lock.
    fn steer_authority(v: f64) -> f64 {
        STEER_GAIN / (0.5 + 0.5 * v * v)
    }

    pub fn tiles_crossed(&self) -> usize {
        self.tiles_crossed
    }

    /// Places the car at an arbitrary state (used by tests and scripted checks).
    pub fn set_state(&mut self, s: f64, v: f64, y: f64, psi: f64) {
        self.s = s;
        self.v = v;
        self.y = y;
        self.psi = psi;
        self.tiles_crossed = ((s * self.cfg.n_tiles as f64).floor() as usize).min(self.cfg.n_tiles);
        self.steps = 0;
        self.done = false;
    }
}

impl Environment for TrackWorld {
    fn name(&self) -> &'static str {
        "track"
    }

    fn state_dim(&self) -> usize {
        5
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn max_episode_len(&self) -> usize {
        self.cfg.max_ep_len
    }

    fn reset(&mut self, rng: &mut SeededRng) -> Vec<f64> {
        self.s = 0.0;
        self.v = 0.0;
        self.y = 0.1 * rng.normal();
        self.psi = 0.05 * rng.normal();
        let (lo, hi) = self.cfg.expert_pace;
        self.pace = lo + (hi - lo) * rng.uniform();
        self.line = self.cfg.expert_line * (2.0 * rng.uniform() - 1.0);
        self.tiles_crossed = 0;
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: &[f64], rng: &mut SeededRng) -> Result<EnvStep> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        check_dim("TrackWorld action", 2, action.len())?;
        let steer = action[0].clamp(-1.0, 1.0);
        let throttle = action[1].clamp(-1.0, 1.0);
        let noise = self.cfg.noise_std;

        let kappa = self.curvature_at(self.s);
        let mut v = self.v + ACCEL * throttle.max(0.0) - BRAKE * (-throttle).max(0.0) - DRAG * self.v;
        if self.y.abs() > 1.0 {
            v -= GRASS_DRAG * self.v;
        }
        v = (v + noise * rng.normal()).max(0.0);
        let dist = TURN_RATE * v;
        let psi = (self.psi + (Self::steer_authority(v) * steer - kappa) * dist + noise * rng.normal())
            .clamp(-MAX_HEADING, MAX_HEADING);
        let y = (self.y + dist * psi.sin() + noise * rng.normal()).clamp(-MAX_OFFSET, MAX_OFFSET);
        let crashed = y.abs() >= MAX_OFFSET;
        let s = (self.s + self.cfg.step_length * v * psi.cos()).clamp(0.0, 1.0);

        self.v = v;
        self.psi = psi;
        self.y = y;
        self.s = s;
        self.steps += 1;

        let n = self.cfg.n_tiles;
        let reached = ((s * n as f64).floor() as usize).min(n);
        let new_tiles = reached.saturating_sub(self.tiles_crossed);
        self.tiles_crossed = self.tiles_crossed.max(reached);
        let reward = new_tiles as f64 * 100.0 / n as f64 - 0.1;

        let finished = self.tiles_crossed == n;
        let truncated = !finished && !crashed && self.steps >= self.cfg.max_ep_len;
        self.done = finished || crashed || truncated;
        Ok(EnvStep {
            z: self.observe(),
            reward,
            done: self.done,
            truncated,
        })
    }

    fn expert_action(&self) -> Vec<f64> {
        // Slow down for curves; feed-forward the curvature and correct offset
        // and heading.
        let kappa = self.curvature_at(self.s);
        let target_v = self.pace * (1.5 - 0.5 * kappa.abs() / self.cfg.curvature.max(1e-9));
        let throttle = (4.0 * (target_v - self.v)).clamp(-1.0, 1.0);
        let authority = Self::steer_authority(self.v.max(0.1));
        let steer = (kappa / authority - 1.5 * (self.y - self.line) - 2.5 * self.psi).clamp(-1.0, 1.0);
        vec![steer, throttle]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parked_car_collects_only_time_penalty() {
        let mut env = TrackWorld::new(TrackConfig { noise_std: 0.0, ..Default::default() }).unwrap();
        let mut rng = SeededRng::new(0);
        env.reset(&mut rng);
        let mut ret = 0.0;
        let mut steps = 0;
        loop {
            let st = env.step(&[0.0, -1.0], &mut rng).unwrap();
            ret += st.reward;
            steps += 1;
            if st.done {
                assert!(st.truncated);
                break;
            }
        }
        assert_eq!(steps, 1000);
        assert!((ret + 100.0).abs() < 1e-9);
        assert!(matches!(env.step(&[0.0, 0.0], &mut rng), Err(Error::EpisodeDone)));
    }

    #[test]
    fn full_lap_in_two_hundred_steps_returns_eighty() {
        // Straight track, constant speed chosen so the last tile is crossed on step 200.
        let cfg = TrackConfig {
            noise_std: 0.0,
            curvature: 0.0,
            step_length: 1.0 / 200.0,
            ..Default::default()
        };
        let mut env = TrackWorld::new(cfg).unwrap();
        let mut rng = SeededRng::new(0);
        env.reset(&mut rng);
        env.set_state(0.0, 1.0, 0.0, 0.0);
        let mut ret = 0.0;
        let mut steps = 0;
        loop {
            // Throttle that exactly balances drag keeps v = 1.
            let st = env.step(&[0.0, DRAG / ACCEL], &mut rng).unwrap();
            ret += st.reward;
            steps += 1;
            if st.done {
                assert!(!st.truncated);
                break;
            }
        }
        assert_eq!(steps, 200);
        assert!((ret - 80.0).abs() < 1e-6, "return {ret}");
    }

    #[test]
    fn expert_finishes_the_track() {
        let mut env = TrackWorld::new(TrackConfig::default()).unwrap();
        let mut rng = SeededRng::new(12);
        env.reset(&mut rng);
        let mut ret = 0.0;
        loop {
            let a = env.expert_action();
            let st = env.step(&a, &mut rng).unwrap();
            ret += st.reward;
            if st.done {
                assert!(!st.truncated);
                break;
            }
        }
        assert!(ret > 70.0, "expert return {ret}");
    }

    #[test]
    fn leaving_the_playfield_ends_the_episode() {
        let mut env = TrackWorld::new(TrackConfig { noise_std: 0.0, ..Default::default() }).unwrap();
        let mut rng = SeededRng::new(0);
        env.reset(&mut rng);
        env.set_state(0.3, 1.0, 1.9, 1.0);
        let mut steps = 0;
        loop {
            let st = env.step(&[1.0, 1.0], &mut rng).unwrap();
            steps += 1;
            if st.done {
                assert!(!st.truncated);
                assert_eq!(st.z[2], 2.0);
                break;
            }
        }
        assert!(steps < 10, "took {steps} steps");
    }

    #[test]
    fn rejects_bad_expert_ranges() {
        let bad = [
            TrackConfig { expert_pace: (0.0, 1.0), ..Default::default() },
            TrackConfig { expert_pace: (1.5, 1.0), ..Default::default() },
            TrackConfig { expert_line: 2.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(TrackWorld::new(cfg), Err(Error::Config(_))));
        }
    }
}
