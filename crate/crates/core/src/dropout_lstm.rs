//! LSTM cell with per-gate input and hidden dropout masks.
//!
//! Each of the four gates (input, forget, cell candidate, output) has its own
//! input mask over `x` and hidden mask over `h_{t-1}`. Masks are applied with
//! inverted-dropout scaling: kept units are multiplied by the mask's keep
//! scale (`1 / (1 - p)` unless configured otherwise). Input entries that carry
//! the action are never dropped and never rescaled.
//!
//! Nonlinearities are applied after the masked affine maps:
//! `c_t = σ(i) ⊙ tanh(w) + σ(f) ⊙ c_{t-1}` and `h_t = σ(o) ⊙ tanh(c_t)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{fnv1a, sigmoid, Matrix, SeededRng};

pub const GATES: usize = 4;

/// Gate index, in the order the weight arrays are stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Cell = 2,
    Output = 3,
}

/// The eight Boolean masks of one masked LSTM instance.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    rate: f64,
    keep_scale: f64,
    input: [Vec<bool>; GATES],
    hidden: [Vec<bool>; GATES],
    input_factors: [Vec<f64>; GATES],
    hidden_factors: [Vec<f64>; GATES],
}

fn validate_rate(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::invalid(format!("dropout rate must lie in [0, 1), got {p}")))
    }
}

impl MaskSet {
    /// The identity mask: nothing dropped, nothing rescaled.
    pub fn ones(input_dim: usize, hidden_dim: usize) -> Self {
        let input: [Vec<bool>; GATES] = std::array::from_fn(|_| vec![true; input_dim]);
        let hidden: [Vec<bool>; GATES] = std::array::from_fn(|_| vec![true; hidden_dim]);
        MaskSet {
            rate: 0.0,
            keep_scale: 1.0,
            input_factors: std::array::from_fn(|_| vec![1.0; input_dim]),
            hidden_factors: std::array::from_fn(|_| vec![1.0; hidden_dim]),
            input,
            hidden,
        }
    }

    /// Samples all eight masks at drop rate `p` with keep scale `1 / (1 - p)`.
    pub fn sample(
        p: f64,
        input_dim: usize,
        hidden_dim: usize,
        action_dims: &[usize],
        rng: &mut SeededRng,
    ) -> Result<Self> {
        validate_rate(p)?;
        Self::sample_scaled(p, 1.0 / (1.0 - p), input_dim, hidden_dim, action_dims, rng)
    }

    /// Samples masks at drop rate `p`, multiplying kept non-action units by `keep_scale`.
    ///
    /// `p == 0` consumes no randomness and yields all-ones masks.
    pub fn sample_scaled(
        p: f64,
        keep_scale: f64,
        input_dim: usize,
        hidden_dim: usize,
        action_dims: &[usize],
        rng: &mut SeededRng,
    ) -> Result<Self> {
        validate_rate(p)?;
        if !(keep_scale.is_finite() && keep_scale > 0.0) {
            return Err(Error::invalid(format!("keep scale must be positive, got {keep_scale}")));
        }
        if let Some(&bad) = action_dims.iter().find(|&&j| j >= input_dim) {
            return Err(Error::invalid(format!(
                "action index {bad} outside input dimension {input_dim}"
            )));
        }
        if p == 0.0 {
            let mut m = Self::ones(input_dim, hidden_dim);
            m.keep_scale = keep_scale;
            return Ok(m);
        }
        let mut is_action = vec![false; input_dim];
        for &j in action_dims {
            is_action[j] = true;
        }
        let input: [Vec<bool>; GATES] = std::array::from_fn(|_| {
            (0..input_dim)
                .map(|j| is_action[j] || !rng.bernoulli(p))
                .collect()
        });
        let hidden: [Vec<bool>; GATES] =
            std::array::from_fn(|_| (0..hidden_dim).map(|_| !rng.bernoulli(p)).collect());
        let input_factors = std::array::from_fn(|g| {
            input[g]
                .iter()
                .zip(&is_action)
                .map(|(&keep, &act)| match (keep, act) {
                    (_, true) => 1.0,
                    (true, false) => keep_scale,
                    (false, false) => 0.0,
                })
                .collect()
        });
        let hidden_factors = std::array::from_fn(|g| {
            hidden[g]
                .iter()
                .map(|&keep| if keep { keep_scale } else { 0.0 })
                .collect()
        });
        Ok(MaskSet {
            rate: p,
            keep_scale,
            input,
            hidden,
            input_factors,
            hidden_factors,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn keep_scale(&self) -> f64 {
        self.keep_scale
    }

    pub fn input_dim(&self) -> usize {
        self.input[0].len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden[0].len()
    }

    pub fn input_mask(&self, gate: Gate) -> &[bool] {
        &self.input[gate as usize]
    }

    pub fn hidden_mask(&self, gate: Gate) -> &[bool] {
        &self.hidden[gate as usize]
    }

    /// Multipliers applied to `x` for a gate (0, 1 or the keep scale).
    pub fn input_factors(&self, gate: Gate) -> &[f64] {
        &self.input_factors[gate as usize]
    }

    pub fn hidden_factors(&self, gate: Gate) -> &[f64] {
        &self.hidden_factors[gate as usize]
    }

    pub fn is_all_ones(&self) -> bool {
        self.input.iter().chain(&self.hidden).all(|m| m.iter().all(|&b| b))
    }

    /// Content hash of the eight masks; equal masks have equal ids.
    pub fn id(&self) -> u64 {
        let bits = self
            .input
            .iter()
            .chain(&self.hidden)
            .flat_map(|m| m.iter().map(|&b| b as u8).chain(std::iter::once(0xff)));
        fnv1a(bits)
    }
}

/// Gate weight matrices and biases, in gate order `i, f, w, o`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmWeights {
    pub input: [Matrix; GATES],
    pub hidden: [Matrix; GATES],
    pub bias: [Vec<f64>; GATES],
}

impl LstmWeights {
    pub fn zeros(hidden_dim: usize, input_dim: usize) -> Self {
        LstmWeights {
            input: std::array::from_fn(|_| Matrix::zeros(hidden_dim, input_dim)),
            hidden: std::array::from_fn(|_| Matrix::zeros(hidden_dim, hidden_dim)),
            bias: std::array::from_fn(|_| vec![0.0; hidden_dim]),
        }
    }

    /// Uniform `±1/√fan_in` weights, zero biases except forget bias = 1.
    pub fn init(hidden_dim: usize, input_dim: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / ((input_dim + hidden_dim) as f64).sqrt();
        let input = std::array::from_fn(|_| Matrix::uniform(hidden_dim, input_dim, bound, rng));
        let hidden = std::array::from_fn(|_| Matrix::uniform(hidden_dim, hidden_dim, bound, rng));
        let mut bias: [Vec<f64>; GATES] = std::array::from_fn(|_| vec![0.0; hidden_dim]);
        bias[Gate::Forget as usize].iter_mut().for_each(|b| *b = 1.0);
        LstmWeights { input, hidden, bias }
    }

    pub fn hidden_dim(&self) -> usize {
        self.bias[0].len()
    }

    pub fn input_dim(&self) -> usize {
        self.input[0].cols()
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(3 * GATES);
        out.extend(self.input.iter().map(Matrix::as_slice));
        out.extend(self.hidden.iter().map(Matrix::as_slice));
        out.extend(self.bias.iter().map(Vec::as_slice));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(3 * GATES);
        out.extend(self.input.iter_mut().map(Matrix::as_mut_slice));
        out.extend(self.hidden.iter_mut().map(Matrix::as_mut_slice));
        out.extend(self.bias.iter_mut().map(Vec::as_mut_slice));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden_dim: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden_dim],
            c: vec![0.0; hidden_dim],
        }
    }
}

/// Everything one step needs to be differentiated later.
#[derive(Clone, Debug)]
pub(crate) struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// σ(i), σ(f), tanh(w), σ(o)
    act: [Vec<f64>; GATES],
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

fn check_step_dims(w: &LstmWeights, s: &LstmState, x: &[f64], mask: &MaskSet) -> Result<()> {
    let d = w.hidden_dim();
    check_dim("lstm_step input", w.input_dim(), x.len())?;
    check_dim("lstm_step hidden state", d, s.h.len())?;
    check_dim("lstm_step cell state", d, s.c.len())?;
    check_dim("lstm_step input mask", w.input_dim(), mask.input_dim())?;
    check_dim("lstm_step hidden mask", d, mask.hidden_dim())
}

/// Computes the four masked gate pre-activations into `pre` (length `4d`).
#[inline]
pub(crate) fn preactivations(
    w: &LstmWeights,
    h_prev: &[f64],
    x: &[f64],
    mask: &MaskSet,
    pre: &mut [f64],
    scratch_x: &mut [f64],
    scratch_h: &mut [f64],
) {
    let d = w.hidden_dim();
    for g in 0..GATES {
        let out = &mut pre[g * d..(g + 1) * d];
        out.copy_from_slice(&w.bias[g]);
        for ((s, &xi), &f) in scratch_x.iter_mut().zip(x).zip(&mask.input_factors[g]) {
            *s = xi * f;
        }
        w.input[g].matvec_acc(scratch_x, out);
        for ((s, &hi), &f) in scratch_h.iter_mut().zip(h_prev).zip(&mask.hidden_factors[g]) {
            *s = hi * f;
        }
        w.hidden[g].matvec_acc(scratch_h, out);
    }
}

fn step_cached(w: &LstmWeights, s: &LstmState, x: &[f64], mask: &MaskSet) -> StepCache {
    let d = w.hidden_dim();
    let mut pre = vec![0.0; GATES * d];
    let mut sx = vec![0.0; x.len()];
    let mut sh = vec![0.0; d];
    preactivations(w, &s.h, x, mask, &mut pre, &mut sx, &mut sh);
    let act: [Vec<f64>; GATES] = std::array::from_fn(|g| {
        let block = &pre[g * d..(g + 1) * d];
        if g == Gate::Cell as usize {
            block.iter().map(|v| v.tanh()).collect()
        } else {
            block.iter().map(|&v| sigmoid(v)).collect()
        }
    });
    let mut c = vec![0.0; d];
    let mut tanh_c = vec![0.0; d];
    let mut h = vec![0.0; d];
    for j in 0..d {
        c[j] = act[0][j] * act[2][j] + act[1][j] * s.c[j];
        tanh_c[j] = c[j].tanh();
        h[j] = act[3][j] * tanh_c[j];
    }
    StepCache {
        x: x.to_vec(),
        h_prev: s.h.clone(),
        c_prev: s.c.clone(),
        act,
        c,
        tanh_c,
        h,
    }
}

/// One masked LSTM update.
pub fn lstm_step(w: &LstmWeights, s: &LstmState, x: &[f64], mask: &MaskSet) -> Result<LstmState> {
    check_step_dims(w, s, x, mask)?;
    let cache = step_cached(w, s, x, mask);
    Ok(LstmState {
        h: cache.h,
        c: cache.c,
    })
}

/// Allocation-light step used in rollouts: writes the new state into `out`.
pub struct StepWorkspace {
    pre: Vec<f64>,
    sx: Vec<f64>,
    sh: Vec<f64>,
}

impl StepWorkspace {
    pub fn new(w: &LstmWeights) -> Self {
        StepWorkspace {
            pre: vec![0.0; GATES * w.hidden_dim()],
            sx: vec![0.0; w.input_dim()],
            sh: vec![0.0; w.hidden_dim()],
        }
    }

    pub fn step(
        &mut self,
        w: &LstmWeights,
        s: &LstmState,
        x: &[f64],
        mask: &MaskSet,
        out: &mut LstmState,
    ) -> Result<()> {
        check_step_dims(w, s, x, mask)?;
        let d = w.hidden_dim();
        preactivations(w, &s.h, x, mask, &mut self.pre, &mut self.sx, &mut self.sh);
        let (pi, rest) = self.pre.split_at(d);
        let (pf, rest) = rest.split_at(d);
        let (pw, po) = rest.split_at(d);
        for j in 0..d {
            let c = sigmoid(pi[j]) * pw[j].tanh() + sigmoid(pf[j]) * s.c[j];
            out.c[j] = c;
            out.h[j] = sigmoid(po[j]) * c.tanh();
        }
        Ok(())
    }
}

/// Forward pass over a sequence, retaining what backpropagation needs.
#[derive(Clone, Debug)]
pub struct LstmTape {
    steps: Vec<StepCache>,
}

impl LstmTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn hidden(&self, t: usize) -> &[f64] {
        &self.steps[t].h
    }

    pub fn cell(&self, t: usize) -> &[f64] {
        &self.steps[t].c
    }

    /// Reverse-mode gradients, accumulated into `grad`. Returns input gradients
    /// and the gradient on the initial state.
    pub fn backward_into(
        &self,
        w: &LstmWeights,
        masks: &[&MaskSet],
        upstream_h: &[Vec<f64>],
        grad: &mut LstmWeights,
    ) -> Result<(Vec<Vec<f64>>, LstmState)> {
        let t_len = self.steps.len();
        check_dim("lstm_bptt masks", t_len, masks.len())?;
        check_dim("lstm_bptt upstream", t_len, upstream_h.len())?;
        let d = w.hidden_dim();
        let r = w.input_dim();
        let mut dh_next = vec![0.0; d];
        let mut dc_next = vec![0.0; d];
        let mut input_grads = vec![Vec::new(); t_len];
        let mut da: [Vec<f64>; GATES] = std::array::from_fn(|_| vec![0.0; d]);
        let mut xg = vec![0.0; r];
        let mut hg = vec![0.0; d];
        for t in (0..t_len).rev() {
            let st = &self.steps[t];
            let mask = masks[t];
            check_dim("lstm_bptt upstream step", d, upstream_h[t].len())?;
            let [si, sf, tw, so] = &st.act;
            for j in 0..d {
                let dh = upstream_h[t][j] + dh_next[j];
                let t_c = st.tanh_c[j];
                da[3][j] = dh * t_c * so[j] * (1.0 - so[j]);
                let dc = dh * so[j] * (1.0 - t_c * t_c) + dc_next[j];
                da[0][j] = dc * tw[j] * si[j] * (1.0 - si[j]);
                da[2][j] = dc * si[j] * (1.0 - tw[j] * tw[j]);
                da[1][j] = dc * st.c_prev[j] * sf[j] * (1.0 - sf[j]);
                dc_next[j] = dc * sf[j];
            }
            let mut dx = vec![0.0; r];
            let mut dh_prev = vec![0.0; d];
            let mut tmp_x = vec![0.0; r];
            let mut tmp_h = vec![0.0; d];
            for g in 0..GATES {
                for ((s, &xi), &f) in xg.iter_mut().zip(&st.x).zip(&mask.input_factors[g]) {
                    *s = xi * f;
                }
                for ((s, &hi), &f) in hg.iter_mut().zip(&st.h_prev).zip(&mask.hidden_factors[g]) {
                    *s = hi * f;
                }
                grad.input[g].rank1_acc(&da[g], &xg);
                grad.hidden[g].rank1_acc(&da[g], &hg);
                for (b, &v) in grad.bias[g].iter_mut().zip(&da[g]) {
                    *b += v;
                }
                tmp_x.iter_mut().for_each(|v| *v = 0.0);
                w.input[g].matvec_t_acc(&da[g], &mut tmp_x);
                for ((o, &v), &f) in dx.iter_mut().zip(&tmp_x).zip(&mask.input_factors[g]) {
                    *o += v * f;
                }
                tmp_h.iter_mut().for_each(|v| *v = 0.0);
                w.hidden[g].matvec_t_acc(&da[g], &mut tmp_h);
                for ((o, &v), &f) in dh_prev.iter_mut().zip(&tmp_h).zip(&mask.hidden_factors[g]) {
                    *o += v * f;
                }
            }
            input_grads[t] = dx;
            dh_next = dh_prev;
        }
        Ok((
            input_grads,
            LstmState {
                h: dh_next,
                c: dc_next,
            },
        ))
    }
}

/// Unrolls the cell over `inputs` from `init`, one mask per step.
pub fn forward_sequence(
    w: &LstmWeights,
    init: &LstmState,
    inputs: &[Vec<f64>],
    masks: &[&MaskSet],
) -> Result<LstmTape> {
    check_dim("forward_sequence masks", inputs.len(), masks.len())?;
    let mut steps = Vec::with_capacity(inputs.len());
    let mut state = init.clone();
    for (x, mask) in inputs.iter().zip(masks) {
        check_step_dims(w, &state, x, mask)?;
        let cache = step_cached(w, &state, x, mask);
        state = LstmState {
            h: cache.h.clone(),
            c: cache.c.clone(),
        };
        steps.push(cache);
    }
    Ok(LstmTape { steps })
}

/// Gradients of an unrolled masked LSTM.
#[derive(Clone, Debug)]
pub struct LstmGrads {
    pub weights: LstmWeights,
    pub inputs: Vec<Vec<f64>>,
    pub init: LstmState,
}

/// Backpropagation through time from zero initial state, given per-step
/// gradients of the loss with respect to each `h_t`.
pub fn lstm_bptt(
    w: &LstmWeights,
    inputs: &[Vec<f64>],
    masks: &[&MaskSet],
    upstream_h: &[Vec<f64>],
) -> Result<LstmGrads> {
    check_dim("lstm_bptt upstream", inputs.len(), upstream_h.len())?;
    let init = LstmState::zeros(w.hidden_dim());
    let tape = forward_sequence(w, &init, inputs, masks)?;
    let mut weights = LstmWeights::zeros(w.hidden_dim(), w.input_dim());
    let (inputs, init) = tape.backward_into(w, masks, upstream_h, &mut weights)?;
    Ok(LstmGrads {
        weights,
        inputs,
        init,
    })
}
