//! Survive falling hazards by moving along a line.
//!
//! State `[x, h₁ˣ, h₁ʸ, …, h_Hˣ, h_Hʸ]`: agent position in `[-1, 1]` and each
//! hazard's horizontal position and height. Hazards fall at a constant rate
//! and respawn at the top after reaching the ground; landing within
//! `radius` of the agent ends the episode. Reward is +1 per surviving step.

use serde::{Deserialize, Serialize};

use super::{EnvStep, Environment};
use crate::error::{check_dim, Error, Result};
use crate::numerics::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DodgeConfig {
    pub hazards: usize,
    pub max_ep_len: usize,
    pub noise_std: f64,
    pub radius: f64,
    pub fall_speed: f64,
    pub move_speed: f64,
}

impl Default for DodgeConfig {
    fn default() -> Self {
        DodgeConfig {
            hazards: 2,
            max_ep_len: 2100,
            noise_std: 0.01,
            radius: 0.25,
            fall_speed: 0.025,
            move_speed: 0.08,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DodgeWorld {
    cfg: DodgeConfig,
    agent: f64,
    hazards: Vec<(f64, f64)>,
    steps: usize,
    done: bool,
}

impl DodgeWorld {
    pub fn new(cfg: DodgeConfig) -> Result<Self> {
        if cfg.max_ep_len == 0 || !(cfg.fall_speed > 0.0) {
            return Err(Error::Config("dodge needs a positive horizon and fall speed".into()));
        }
        Ok(DodgeWorld {
            hazards: vec![(0.0, 1.0); cfg.hazards],
            cfg,
            agent: 0.0,
            steps: 0,
            done: true,
        })
    }

    fn observe(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(1 + 2 * self.hazards.len());
        z.push(self.agent);
        for &(x, y) in &self.hazards {
            z.push(x);
            z.push(y);
        }
        z
    }
}

impl Environment for DodgeWorld {
    fn name(&self) -> &'static str {
        "dodge"
    }

    fn state_dim(&self) -> usize {
        1 + 2 * self.cfg.hazards
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn max_episode_len(&self) -> usize {
        self.cfg.max_ep_len
    }

    fn reset(&mut self, rng: &mut SeededRng) -> Vec<f64> {
        self.agent = 0.2 * (2.0 * rng.uniform() - 1.0);
        let h = self.hazards.len();
        for (i, hz) in self.hazards.iter_mut().enumerate() {
            // Staggered heights so landings are spread out in time.
            *hz = (2.0 * rng.uniform() - 1.0, 1.0 + i as f64 / h as f64);
        }
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: &[f64], rng: &mut SeededRng) -> Result<EnvStep> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        check_dim("DodgeWorld action", 1, action.len())?;
        let a = action[0].clamp(-1.0, 1.0);
        self.agent = (self.agent + self.cfg.move_speed * a + self.cfg.noise_std * rng.normal())
            .clamp(-1.0, 1.0);
        let mut hit = false;
        for hz in self.hazards.iter_mut() {
            hz.1 -= self.cfg.fall_speed;
            if hz.1 <= 0.0 {
                if (hz.0 - self.agent).abs() < self.cfg.radius {
                    hit = true;
                }
                *hz = (2.0 * rng.uniform() - 1.0, hz.1 + 1.0);
            }
        }
        self.steps += 1;
        let truncated = !hit && self.steps >= self.cfg.max_ep_len;
        self.done = hit || truncated;
        Ok(EnvStep {
            z: self.observe(),
            reward: if hit { 0.0 } else { 1.0 },
            done: self.done,
            truncated,
        })
    }

    fn expert_action(&self) -> Vec<f64> {
        // Step away from the nearest hazard that threatens to land on us,
        // going around it through the side with more room.
        let r = self.cfg.radius + 0.1;
        let threat = self
            .hazards
            .iter()
            .filter(|(x, _)| (x - self.agent).abs() < r)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        let a = match threat {
            Some(&(x, _)) => {
                let away = if self.agent >= x { 1.0 } else { -1.0 };
                let room = if away > 0.0 { 1.0 - x } else { x + 1.0 };
                if room > r {
                    away
                } else {
                    -away
                }
            }
            None => -self.agent.clamp(-1.0, 1.0),
        };
        vec![a]
    }
}
