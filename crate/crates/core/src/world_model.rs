//! The dynamics model: a masked LSTM followed by a per-feature Gaussian
//! mixture head for the next latent, a scalar reward head and a termination
//! head.

use std::ops::{Add, AddAssign};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Map;

use crate::container::{self, Block};
use crate::dropout_lstm::{forward_sequence, LstmState, LstmWeights, MaskSet, StepWorkspace};
use crate::error::{check_dim, Error, Result};
use crate::numerics::{
    gaussian_logpdf, log_sum_exp_unchecked, sigmoid, Matrix, SeededRng, LOG_NORM_CONST,
};

/// Termination probabilities are clamped to `[DONE_EPS, 1 - DONE_EPS]` inside the log.
pub const DONE_EPS: f64 = 1e-7;

/// Raw log-σ outputs are clamped to `±LOG_SIGMA_LIMIT`; clamped entries get no gradient.
pub const LOG_SIGMA_LIMIT: f64 = 15.0;

pub const CHECKPOINT_KIND: &str = "world-model";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Latent size `n`.
    pub latent: usize,
    pub action: usize,
    /// LSTM width `d`.
    pub hidden: usize,
    /// Mixture components `k` per latent feature.
    pub mixtures: usize,
}

impl ModelDims {
    pub fn input(&self) -> usize {
        self.latent + self.action
    }

    /// Input positions holding the action; these are never masked.
    pub fn action_indices(&self) -> Vec<usize> {
        (self.latent..self.latent + self.action).collect()
    }

    fn mdn_outputs(&self) -> usize {
        3 * self.latent * self.mixtures
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldModelParams {
    dims: ModelDims,
    pub lstm: LstmWeights,
    /// Rows `[0, nk)` are mixture logits, `[nk, 2nk)` means, `[2nk, 3nk)` log-σ;
    /// feature `i`, component `j` sits at offset `i * k + j` in each band.
    pub mdn_w: Matrix,
    pub mdn_b: Vec<f64>,
    pub reward_w: Vec<f64>,
    pub reward_b: Vec<f64>,
    pub done_w: Vec<f64>,
    pub done_b: Vec<f64>,
}

impl WorldModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        WorldModelParams {
            dims,
            lstm: LstmWeights::zeros(dims.hidden, dims.input()),
            mdn_w: Matrix::zeros(dims.mdn_outputs(), dims.hidden),
            mdn_b: vec![0.0; dims.mdn_outputs()],
            reward_w: vec![0.0; dims.hidden],
            reward_b: vec![0.0],
            done_w: vec![0.0; dims.hidden],
            done_b: vec![0.0],
        }
    }

    pub fn init(dims: ModelDims, rng: &mut SeededRng) -> Result<Self> {
        if dims.latent == 0 || dims.hidden == 0 || dims.mixtures == 0 {
            return Err(Error::invalid("latent, hidden and mixture sizes must be positive"));
        }
        let mut p = Self::zeros(dims);
        p.lstm = LstmWeights::init(dims.hidden, dims.input(), rng);
        let bound = 1.0 / (dims.hidden as f64).sqrt();
        p.mdn_w = Matrix::uniform(dims.mdn_outputs(), dims.hidden, bound, rng);
        // Components start as near-copies of the first with equal weight, so
        // they fit the data jointly and split only where it is multimodal.
        let (n, k) = (dims.latent, dims.mixtures);
        for i in 0..n {
            for j in 0..k {
                for c in 0..dims.hidden {
                    p.mdn_w.set(i * k + j, c, 0.0);
                    if j > 0 {
                        for band in [n * k, 2 * n * k] {
                            let base = p.mdn_w.get(band + i * k, c);
                            p.mdn_w.set(band + i * k + j, c, base + 0.01 * bound * (2.0 * rng.uniform() - 1.0));
                        }
                    }
                }
            }
        }
        for v in p.reward_w.iter_mut().chain(p.done_w.iter_mut()) {
            *v = (2.0 * rng.uniform() - 1.0) * bound;
        }
        Ok(p)
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = self.lstm.blocks();
        out.extend([
            self.mdn_w.as_slice(),
            &self.mdn_b[..],
            &self.reward_w[..],
            &self.reward_b[..],
            &self.done_w[..],
            &self.done_b[..],
        ]);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.lstm.blocks_mut();
        out.push(self.mdn_w.as_mut_slice());
        out.push(&mut self.mdn_b[..]);
        out.push(&mut self.reward_w[..]);
        out.push(&mut self.reward_b[..]);
        out.push(&mut self.done_w[..]);
        out.push(&mut self.done_b[..]);
        out
    }

    fn block_names() -> Vec<String> {
        let gates = ["i", "f", "w", "o"];
        let mut names: Vec<String> = Vec::new();
        names.extend(gates.iter().map(|g| format!("lstm.w_x{g}")));
        names.extend(gates.iter().map(|g| format!("lstm.w_h{g}")));
        names.extend(gates.iter().map(|g| format!("lstm.b_{g}")));
        names.extend(
            ["mdn.w", "mdn.b", "reward.w", "reward.b", "done.w", "done.b"]
                .iter()
                .map(|s| s.to_string()),
        );
        names
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("WorldModelParams::set_flat", self.num_params(), flat.len())?;
        let mut off = 0;
        for b in self.blocks_mut() {
            let n = b.len();
            b.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Applies the output heads to a hidden state.
    pub fn heads_forward(&self, h: &[f64]) -> Result<Prediction> {
        check_dim("heads_forward", self.dims.hidden, h.len())?;
        let mut pred = Prediction::empty(self.dims);
        self.heads_into(h, &mut pred);
        Ok(pred)
    }

    pub(crate) fn heads_into(&self, h: &[f64], pred: &mut Prediction) {
        let (n, k) = (self.dims.latent, self.dims.mixtures);
        let nk = n * k;
        let mut raw = self.mdn_b.clone();
        self.mdn_w.matvec_acc(h, &mut raw);
        let out = &mut pred.mdn;
        for i in 0..n {
            let logits = &raw[i * k..(i + 1) * k];
            let lse = log_sum_exp_unchecked(logits);
            for j in 0..k {
                let idx = i * k + j;
                out.log_pi[idx] = logits[j] - lse;
                out.pi[idx] = out.log_pi[idx].exp();
                out.mu[idx] = raw[nk + idx];
                out.log_sigma[idx] = raw[2 * nk + idx].clamp(-LOG_SIGMA_LIMIT, LOG_SIGMA_LIMIT);
                out.sigma[idx] = out.log_sigma[idx].exp();
            }
        }
        pred.r_hat = self.reward_b[0] + crate::numerics::dot(&self.reward_w, h);
        pred.done_logit = self.done_b[0] + crate::numerics::dot(&self.done_w, h);
        pred.d_hat = sigmoid(pred.done_logit);
    }
}

/// Per-feature mixture parameters, stored `n × k` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MdnOutput {
    pub latent: usize,
    pub mixtures: usize,
    pub pi: Vec<f64>,
    pub log_pi: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl MdnOutput {
    pub fn new(latent: usize, mixtures: usize, pi: Vec<f64>, mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let nk = latent * mixtures;
        check_dim("MdnOutput pi", nk, pi.len())?;
        check_dim("MdnOutput mu", nk, mu.len())?;
        check_dim("MdnOutput sigma", nk, sigma.len())?;
        Ok(MdnOutput {
            latent,
            mixtures,
            log_pi: pi.iter().map(|p| p.ln()).collect(),
            log_sigma: sigma.iter().map(|s| s.ln()).collect(),
            pi,
            mu,
            sigma,
        })
    }

    fn zeros(latent: usize, mixtures: usize) -> Self {
        let nk = latent * mixtures;
        MdnOutput {
            latent,
            mixtures,
            pi: vec![0.0; nk],
            log_pi: vec![0.0; nk],
            mu: vec![0.0; nk],
            sigma: vec![0.0; nk],
            log_sigma: vec![0.0; nk],
        }
    }

    pub fn pi_row(&self, feature: usize) -> &[f64] {
        &self.pi[feature * self.mixtures..(feature + 1) * self.mixtures]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mdn: MdnOutput,
    pub r_hat: f64,
    pub d_hat: f64,
    pub done_logit: f64,
}

impl Prediction {
    pub(crate) fn empty(dims: ModelDims) -> Self {
        Prediction {
            mdn: MdnOutput::zeros(dims.latent, dims.mixtures),
            r_hat: 0.0,
            d_hat: 0.5,
            done_logit: 0.0,
        }
    }
}

/// Negative log-likelihood of `z` under the per-feature mixtures.
pub fn mdn_loss(out: &MdnOutput, z: &[f64]) -> Result<f64> {
    check_dim("mdn_loss", out.latent, z.len())?;
    if let Some(s) = out.sigma.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::invalid(format!("mixture sigma must be positive, got {s}")));
    }
    let k = out.mixtures;
    let mut terms = vec![0.0; k];
    let mut total = 0.0;
    for (i, &zi) in z.iter().enumerate() {
        for j in 0..k {
            let idx = i * k + j;
            terms[j] = out.log_pi[idx] + gaussian_logpdf(zi, out.mu[idx], out.sigma[idx])?;
        }
        total -= log_sum_exp_unchecked(&terms);
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_r: f64,
    pub alpha_d: f64,
}

/// Supervision for one step: next latent (absent after the final step),
/// observed reward and termination flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub z_next: Option<Vec<f64>>,
    pub reward: f64,
    pub done: bool,
}

/// A training window: model inputs `[z_t; a_t]` and the per-step targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Transition>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Loss components summed over some number of transitions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// `L^z + α_r L^r + α_d L^d`
    pub total: f64,
    pub latent: f64,
    pub reward: f64,
    pub done: f64,
    pub steps: usize,
}

impl LossTerms {
    /// Per-transition averages.
    pub fn per_step(&self) -> LossTerms {
        let n = self.steps.max(1) as f64;
        LossTerms {
            total: self.total / n,
            latent: self.latent / n,
            reward: self.reward / n,
            done: self.done / n,
            steps: 1,
        }
    }
}

impl Add for LossTerms {
    type Output = LossTerms;
    fn add(self, o: LossTerms) -> LossTerms {
        LossTerms {
            total: self.total + o.total,
            latent: self.latent + o.latent,
            reward: self.reward + o.reward,
            done: self.done + o.done,
            steps: self.steps + o.steps,
        }
    }
}

impl AddAssign for LossTerms {
    fn add_assign(&mut self, o: LossTerms) {
        *self = *self + o;
    }
}

fn clamped_done(d_hat: f64) -> (f64, bool) {
    let c = d_hat.clamp(DONE_EPS, 1.0 - DONE_EPS);
    (c, c != d_hat)
}

/// Loss of one transition: latent NLL plus weighted reward and termination terms.
pub fn transition_loss(pred: &Prediction, target: &Transition, w: LossWeights) -> Result<LossTerms> {
    let latent = match &target.z_next {
        Some(z) => mdn_loss(&pred.mdn, z)?,
        None => 0.0,
    };
    let reward = (target.reward - pred.r_hat).powi(2);
    let (d_hat, _) = clamped_done(pred.d_hat);
    let done = if target.done { -d_hat.ln() } else { -(1.0 - d_hat).ln() };
    Ok(LossTerms {
        total: latent + w.alpha_r * reward + w.alpha_d * done,
        latent,
        reward,
        done,
        steps: 1,
    })
}

/// Loss of one transition and its gradient w.r.t. the head parameters
/// (accumulated into `grad`) and w.r.t. `h` (added into `dh`).
fn head_loss_and_grad(
    params: &WorldModelParams,
    h: &[f64],
    pred: &Prediction,
    target: &Transition,
    w: LossWeights,
    grad: &mut WorldModelParams,
    dh: &mut [f64],
    d_out: &mut [f64],
) -> LossTerms {
    let dims = params.dims;
    let (n, k) = (dims.latent, dims.mixtures);
    let nk = n * k;
    let m = &pred.mdn;
    d_out.iter_mut().for_each(|v| *v = 0.0);
    let mut latent = 0.0;
    if let Some(z) = &target.z_next {
        let mut terms = vec![0.0; k];
        for (i, &zi) in z.iter().enumerate() {
            for j in 0..k {
                let idx = i * k + j;
                let u = (zi - m.mu[idx]) / m.sigma[idx];
                terms[j] = m.log_pi[idx] + LOG_NORM_CONST - m.log_sigma[idx] - 0.5 * u * u;
            }
            let lse = log_sum_exp_unchecked(&terms);
            latent -= lse;
            for j in 0..k {
                let idx = i * k + j;
                let post = (terms[j] - lse).exp();
                let u = (zi - m.mu[idx]) / m.sigma[idx];
                d_out[idx] = m.pi[idx] - post;
                d_out[nk + idx] = -post * u / m.sigma[idx];
                d_out[2 * nk + idx] = if m.log_sigma[idx].abs() < LOG_SIGMA_LIMIT {
                    -post * (u * u - 1.0)
                } else {
                    0.0
                };
            }
        }
    }
    let reward = (target.reward - pred.r_hat).powi(2);
    let d_reward = -2.0 * w.alpha_r * (target.reward - pred.r_hat);
    let (d_hat, clamped) = clamped_done(pred.d_hat);
    let dflag = if target.done { 1.0 } else { 0.0 };
    let done = if target.done { -d_hat.ln() } else { -(1.0 - d_hat).ln() };
    let d_done = if clamped { 0.0 } else { w.alpha_d * (pred.d_hat - dflag) };

    grad.mdn_w.rank1_acc(d_out, h);
    for (g, &v) in grad.mdn_b.iter_mut().zip(d_out.iter()) {
        *g += v;
    }
    params.mdn_w.matvec_t_acc(d_out, dh);
    for j in 0..dims.hidden {
        grad.reward_w[j] += d_reward * h[j];
        grad.done_w[j] += d_done * h[j];
        dh[j] += d_reward * params.reward_w[j] + d_done * params.done_w[j];
    }
    grad.reward_b[0] += d_reward;
    grad.done_b[0] += d_done;
    LossTerms {
        total: latent + w.alpha_r * reward + w.alpha_d * done,
        latent,
        reward,
        done,
        steps: 1,
    }
}

fn check_sequence(params: &WorldModelParams, seq: &Sequence, masks: &[&MaskSet]) -> Result<()> {
    check_dim("sequence targets", seq.inputs.len(), seq.targets.len())?;
    check_dim("sequence masks", seq.inputs.len(), masks.len())?;
    for t in &seq.targets {
        if let Some(z) = &t.z_next {
            check_dim("sequence latent target", params.dims.latent, z.len())?;
        }
    }
    Ok(())
}

/// Summed loss of a sequence unrolled from the zero state, and the gradient
/// of that sum with respect to every parameter (accumulated into `grad`).
pub fn sequence_loss_and_grad(
    params: &WorldModelParams,
    seq: &Sequence,
    masks: &[&MaskSet],
    w: LossWeights,
    grad: &mut WorldModelParams,
) -> Result<LossTerms> {
    check_sequence(params, seq, masks)?;
    let dims = params.dims;
    let tape = forward_sequence(&params.lstm, &LstmState::zeros(dims.hidden), &seq.inputs, masks)?;
    let mut pred = Prediction::empty(dims);
    let mut upstream = vec![vec![0.0; dims.hidden]; seq.len()];
    let mut d_out = vec![0.0; dims.mdn_outputs()];
    let mut terms = LossTerms::default();
    for t in 0..seq.len() {
        let h = tape.hidden(t);
        params.heads_into(h, &mut pred);
        terms += head_loss_and_grad(params, h, &pred, &seq.targets[t], w, grad, &mut upstream[t], &mut d_out);
    }
    tape.backward_into(&params.lstm, masks, &upstream, &mut grad.lstm)?;
    Ok(terms)
}

/// Summed loss of a sequence without gradients.
pub fn sequence_loss(
    params: &WorldModelParams,
    seq: &Sequence,
    masks: &[&MaskSet],
    w: LossWeights,
) -> Result<LossTerms> {
    check_sequence(params, seq, masks)?;
    let dims = params.dims;
    let mut ws = StepWorkspace::new(&params.lstm);
    let mut state = LstmState::zeros(dims.hidden);
    let mut next = LstmState::zeros(dims.hidden);
    let mut pred = Prediction::empty(dims);
    let mut terms = LossTerms::default();
    for t in 0..seq.len() {
        ws.step(&params.lstm, &state, &seq.inputs[t], masks[t], &mut next)?;
        std::mem::swap(&mut state, &mut next);
        params.heads_into(&state.h, &mut pred);
        terms += transition_loss(&pred, &seq.targets[t], w)?;
    }
    Ok(terms)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledTransition {
    pub z: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Index drawn from a categorical distribution given its probabilities.
#[inline]
fn draw_component(pi: &[f64], rng: &mut SeededRng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (j, &p) in pi.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    // Rounding can leave the cumulative sum a hair under 1.
    pi.iter().rposition(|&p| p > 0.0).unwrap_or(pi.len() - 1)
}

/// Draws the next latent feature-by-feature from the mixture, takes the
/// predicted reward as-is and draws termination from `Bernoulli(d_hat)`.
pub fn sample_transition(pred: &Prediction, rng: &mut SeededRng) -> SampledTransition {
    let z = sample_latent(&pred.mdn, rng);
    let done = rng.bernoulli(pred.d_hat);
    SampledTransition {
        z,
        reward: pred.r_hat,
        done,
    }
}

pub fn sample_latent(mdn: &MdnOutput, rng: &mut SeededRng) -> Vec<f64> {
    let k = mdn.mixtures;
    (0..mdn.latent)
        .map(|i| {
            let j = draw_component(mdn.pi_row(i), rng);
            let idx = i * k + j;
            mdn.mu[idx] + mdn.sigma[idx] * rng.normal()
        })
        .collect()
}

/// Which component each feature would select; exposed for distribution tests.
pub fn sample_components(mdn: &MdnOutput, rng: &mut SeededRng) -> Vec<usize> {
    (0..mdn.latent).map(|i| draw_component(mdn.pi_row(i), rng)).collect()
}

/// Training provenance stored alongside model weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub p_train: f64,
    pub alpha_r: f64,
    pub alpha_d: f64,
    pub seed: u64,
    pub epochs: usize,
    #[serde(default)]
    pub env: String,
    #[serde(default)]
    pub member: usize,
}

pub fn save_checkpoint(path: &Path, params: &WorldModelParams, meta: &ModelMeta) -> Result<()> {
    let mut header = Map::new();
    header.insert("dims".into(), serde_json::to_value(params.dims)?);
    header.insert("meta".into(), serde_json::to_value(meta)?);
    let blocks: Vec<Block> = WorldModelParams::block_names()
        .into_iter()
        .zip(params.blocks())
        .map(|(name, data)| Block::new(name, data.to_vec()))
        .collect();
    container::write(path, CHECKPOINT_KIND, CHECKPOINT_VERSION, &header, &blocks)
}

pub fn load_checkpoint(path: &Path) -> Result<(WorldModelParams, ModelMeta)> {
    let c = container::read(path, CHECKPOINT_KIND, CHECKPOINT_VERSION)?;
    let dims: ModelDims = c.header_field("dims")?;
    let meta: ModelMeta = c.header_field("meta")?;
    let mut params = WorldModelParams::zeros(dims);
    let names = WorldModelParams::block_names();
    for (name, dst) in names.iter().zip(params.blocks_mut()) {
        let src = &c.block(name)?.data;
        if src.len() != dst.len() {
            return Err(Error::Corrupt(format!(
                "block `{name}` has {} values, expected {}",
                src.len(),
                dst.len()
            )));
        }
        dst.copy_from_slice(src);
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("checkpoint weights".into()));
    }
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            latent: 4,
            action: 2,
            hidden: 8,
            mixtures: 3,
        }
    }

    #[test]
    fn zero_heads_give_neutral_prediction() {
        let p = WorldModelParams::zeros(dims());
        let pred = p.heads_forward(&[0.3; 8]).unwrap();
        assert!(pred.mdn.pi.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(pred.mdn.sigma.iter().all(|&v| v == 1.0));
        assert_eq!(pred.d_hat, 0.5);
        assert_eq!(pred.r_hat, 0.0);
    }

    #[test]
    fn done_head_saturates() {
        let mut p = WorldModelParams::zeros(dims());
        p.done_b[0] = 50.0;
        let pred = p.heads_forward(&[0.0; 8]).unwrap();
        assert!((pred.d_hat - 1.0).abs() < 1e-9);
        assert!(p.heads_forward(&[0.0; 7]).is_err());
    }

    #[test]
    fn mdn_loss_standard_normal_at_mean() {
        let z = [0.5, -1.0, 2.0];
        let out = MdnOutput::new(3, 1, vec![1.0; 3], z.to_vec(), vec![1.0; 3]).unwrap();
        let l = mdn_loss(&out, &z).unwrap();
        assert!((l - 3.0 * 0.918_938_533_204_672_8).abs() < 1e-12);
    }

    #[test]
    fn mdn_loss_matches_naive_density_sum() {
        let out = MdnOutput::new(1, 2, vec![0.3, 0.7], vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
        let z = 0.5f64;
        let dens = |mu: f64| (-(z - mu).powi(2) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let naive = -(0.3 * dens(0.0) + 0.7 * dens(1.0)).ln();
        assert!((mdn_loss(&out, &[z]).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn mdn_loss_rejects_bad_sigma() {
        let out = MdnOutput::new(1, 2, vec![0.5, 0.5], vec![0.0, 1.0], vec![1.0, 0.0]).unwrap();
        assert!(mdn_loss(&out, &[0.0]).is_err());
    }

    #[test]
    fn mdn_loss_permutation_invariant() {
        let out = MdnOutput::new(1, 3, vec![0.2, 0.5, 0.3], vec![0.0, 1.0, -2.0], vec![0.5, 1.5, 2.0]).unwrap();
        let perm = MdnOutput::new(1, 3, vec![0.3, 0.2, 0.5], vec![-2.0, 0.0, 1.0], vec![2.0, 0.5, 1.5]).unwrap();
        let a = mdn_loss(&out, &[0.7]).unwrap();
        let b = mdn_loss(&perm, &[0.7]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    fn bare_prediction(r_hat: f64, d_hat: f64) -> Prediction {
        let mut p = Prediction::empty(ModelDims {
            latent: 1,
            action: 0,
            hidden: 1,
            mixtures: 1,
        });
        p.r_hat = r_hat;
        p.d_hat = d_hat;
        p
    }

    #[test]
    fn transition_loss_examples() {
        let w = LossWeights { alpha_r: 1.0, alpha_d: 1.0 };
        let t = Transition { z_next: None, reward: 0.25, done: true };
        let l = transition_loss(&bare_prediction(0.25, 0.5), &t, w).unwrap();
        assert!((l.total - std::f64::consts::LN_2).abs() < 1e-12);

        let t = Transition { z_next: None, reward: 1.0, done: false };
        let l = transition_loss(&bare_prediction(0.0, DONE_EPS / 10.0), &t, LossWeights { alpha_r: 1.0, alpha_d: 0.0 }).unwrap();
        assert!((l.total - 1.0).abs() < 1e-12);

        let l = transition_loss(&bare_prediction(-3.0, 0.5), &t, LossWeights { alpha_r: 0.0, alpha_d: 0.0 }).unwrap();
        assert_eq!(l.total, 0.0);
        assert_eq!(l.reward, 16.0);

        // Clamping keeps the cross-entropy finite at d_hat = 0 and 1.
        let t_done = Transition { z_next: None, reward: 0.0, done: true };
        let l = transition_loss(&bare_prediction(0.0, 0.0), &t_done, w).unwrap();
        assert!((l.done + DONE_EPS.ln()).abs() < 1e-9);
        let l = transition_loss(&bare_prediction(0.0, 1.0), &t, LossWeights { alpha_r: 0.0, alpha_d: 1.0 }).unwrap();
        assert!(l.total.is_finite());
    }

    #[test]
    fn degenerate_mixtures_sample_deterministically() {
        let mut rng = SeededRng::new(4);
        let out = MdnOutput::new(2, 3, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], vec![1e-9; 6]).unwrap();
        for _ in 0..1000 {
            assert_eq!(sample_components(&out, &mut rng), vec![2, 2]);
            let z = sample_latent(&out, &mut rng);
            assert!((z[0] - 2.0).abs() < 1e-6 && (z[1] - 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = SeededRng::new(8);
        let p = WorldModelParams::init(dims(), &mut rng).unwrap();
        let meta = ModelMeta { p_train: 0.05, alpha_r: 1.0, alpha_d: 1.0, seed: 3, epochs: 2, env: "track".into(), member: 0 };
        save_checkpoint(&path, &p, &meta).unwrap();
        let (q, m) = load_checkpoint(&path).unwrap();
        assert_eq!(m, meta);
        let a: Vec<u64> = p.to_flat().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = q.to_flat().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
}
