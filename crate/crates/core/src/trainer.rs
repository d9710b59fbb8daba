//! Mini-batch training of the dynamics model with per-sequence dropout masks,
//! and test-loss evaluation under inference-time dropout.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dropout_lstm::MaskSet;
use crate::envs::{Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;
use crate::world_model::{
    sequence_loss, sequence_loss_and_grad, LossTerms, LossWeights, ModelDims, ModelMeta, Sequence,
    Transition, WorldModelParams,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub p_train: f64,
    pub alpha_r: f64,
    pub alpha_d: f64,
    pub hidden: usize,
    pub mixtures: usize,
    pub sequence_length: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    /// Set from the experiment seed rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            p_train: 0.05,
            alpha_r: 1.0,
            alpha_d: 1.0,
            hidden: 32,
            mixtures: 3,
            sequence_length: 32,
            batch_size: 16,
            epochs: 20,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_train) {
            return Err(Error::Config(format!("p_train must lie in [0, 1), got {}", self.p_train)));
        }
        if self.sequence_length == 0 || self.batch_size == 0 || self.hidden == 0 || self.mixtures == 0 {
            return Err(Error::Config("sequence length, batch size, hidden and mixtures must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha_r: self.alpha_r,
            alpha_d: self.alpha_d,
        }
    }
}

/// Adam with global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip_norm: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            clip_norm: cfg.clip_norm,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i] * scale;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

fn model_input(z: &[f64], a: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(z.len() + a.len());
    x.extend_from_slice(z);
    x.extend_from_slice(a);
    x
}

/// The steps `[start, start + len)` of a trajectory as a supervised sequence.
/// The final step of the trajectory has no next-latent target.
pub fn sequence_from(traj: &Trajectory, start: usize, len: usize) -> Sequence {
    let end = start + len;
    let inputs = traj.steps[start..end].iter().map(|s| model_input(&s.z, &s.a)).collect();
    let targets = (start..end)
        .map(|t| Transition {
            z_next: traj.steps.get(t + 1).map(|s| s.z.clone()),
            reward: traj.steps[t].r,
            done: traj.steps[t].d,
        })
        .collect();
    Sequence { inputs, targets }
}

/// Cuts a trajectory into consecutive windows of `len` steps, plus one window
/// aligned to the end so the terminal step is always covered. Trajectories
/// shorter than `len` yield nothing.
pub fn windows(traj: &Trajectory, len: usize) -> Vec<Sequence> {
    let t = traj.len();
    if t < len || len == 0 {
        return Vec::new();
    }
    let mut starts: Vec<usize> = (0..=t - len).step_by(len).collect();
    if *starts.last().expect("at least one window") != t - len {
        starts.push(t - len);
    }
    starts.into_iter().map(|s| sequence_from(traj, s, len)).collect()
}

/// Full trajectory as one sequence.
pub fn whole_sequence(traj: &Trajectory) -> Sequence {
    sequence_from(traj, 0, traj.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Per-transition training loss under the training masks.
    pub train: LossTerms,
    /// Per-transition held-out loss without dropout.
    pub test: Option<LossTerms>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epochs: Vec<EpochLoss>,
}

impl LossReport {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train.total)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,test_loss,loss_z,loss_r,loss_d\n");
        for e in &self.epochs {
            let test = e.test.map(|t| t.total.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.epoch, e.train.total, test, e.train.latent, e.train.reward, e.train.done
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// How training masks are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// One mask per sequence sampled at `p_train`.
    Sampled,
    /// All-ones masks with no random draws: the mask-free reference.
    Identity,
}

/// What the trainer saw for one sequence of one batch.
#[derive(Clone, Debug)]
pub struct SequenceRecord {
    pub epoch: usize,
    pub batch: usize,
    pub mask_ids: Vec<u64>,
}

/// Parameters plus optimizer state.
pub struct DynamicsTrainer {
    pub params: WorldModelParams,
    adam: Adam,
    weights: LossWeights,
}

impl DynamicsTrainer {
    pub fn new(params: WorldModelParams, cfg: &TrainConfig) -> Self {
        let adam = Adam::new(params.num_params(), cfg);
        DynamicsTrainer {
            params,
            adam,
            weights: cfg.loss_weights(),
        }
    }

    /// One optimizer step on the batch-averaged summed-over-time loss.
    /// `masks[i]` is held fixed across every step of `batch[i]`.
    pub fn train_batch(&mut self, batch: &[&Sequence], masks: &[MaskSet]) -> Result<LossTerms> {
        if batch.len() != masks.len() || batch.is_empty() {
            return Err(Error::invalid("batch and mask counts must agree and be non-zero"));
        }
        let params = &self.params;
        let weights = self.weights;
        let per_seq: Vec<Result<(Vec<f64>, LossTerms)>> = batch
            .par_iter()
            .zip(masks.par_iter())
            .map(|(seq, mask)| {
                let mut grad = WorldModelParams::zeros(params.dims());
                let step_masks = vec![mask; seq.len()];
                let terms = sequence_loss_and_grad(params, seq, &step_masks, weights, &mut grad)?;
                Ok((grad.to_flat(), terms))
            })
            .collect();
        // Reduce in batch order so the sum does not depend on scheduling.
        let mut total = vec![0.0; params.num_params()];
        let mut terms = LossTerms::default();
        for r in per_seq {
            let (g, t) = r?;
            for (a, b) in total.iter_mut().zip(&g) {
                *a += b;
            }
            terms += t;
        }
        if !terms.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss is {} (latent {}, reward {}, done {})",
                terms.total, terms.latent, terms.reward, terms.done
            )));
        }
        let inv = 1.0 / batch.len() as f64;
        total.iter_mut().for_each(|g| *g *= inv);
        let mut flat = self.params.to_flat();
        self.adam.step(&mut flat, &total);
        self.params.set_flat(&flat)?;
        Ok(terms)
    }
}

pub fn model_dims(ds: &Dataset, cfg: &TrainConfig) -> ModelDims {
    ModelDims {
        latent: ds.info.state_dim,
        action: ds.info.action_dim,
        hidden: cfg.hidden,
        mixtures: cfg.mixtures,
    }
}

pub fn train_dynamics(ds: &Dataset, cfg: &TrainConfig) -> Result<(WorldModelParams, LossReport)> {
    train_dynamics_with(ds, cfg, MaskMode::Sampled, &mut |_| {})
}

/// Training loop with a choice of mask source and a per-sequence observer.
pub fn train_dynamics_with(
    ds: &Dataset,
    cfg: &TrainConfig,
    mode: MaskMode,
    observer: &mut dyn FnMut(&SequenceRecord),
) -> Result<(WorldModelParams, LossReport)> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sequences: Vec<Sequence> = ds
        .train_trajectories()
        .flat_map(|t| windows(t, cfg.sequence_length))
        .collect();
    if sequences.is_empty() {
        return Err(Error::invalid(format!(
            "no training trajectory is at least {} steps long",
            cfg.sequence_length
        )));
    }
    let test: Vec<&Trajectory> = ds.test_trajectories().collect();
    let dims = model_dims(ds, cfg);
    let action_dims = dims.action_indices();
    let params = WorldModelParams::init(dims, &mut SeededRng::derive(cfg.seed, &[0]))?;
    let mut trainer = DynamicsTrainer::new(params, cfg);
    let mut report = LossReport::default();
    let mut order: Vec<usize> = (0..sequences.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = SeededRng::derive(cfg.seed, &[1, epoch as u64]);
        shuffle(&mut order, &mut shuffle_rng);
        let mut epoch_terms = LossTerms::default();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sequence> = chunk.iter().map(|&i| &sequences[i]).collect();
            let mut mask_rng = SeededRng::derive(cfg.seed, &[2, epoch as u64, b as u64]);
            let masks: Vec<MaskSet> = batch
                .iter()
                .map(|_| match mode {
                    MaskMode::Sampled => MaskSet::sample(cfg.p_train, dims.input(), dims.hidden, &action_dims, &mut mask_rng),
                    MaskMode::Identity => Ok(MaskSet::ones(dims.input(), dims.hidden)),
                })
                .collect::<Result<_>>()?;
            for (seq, m) in batch.iter().zip(&masks) {
                observer(&SequenceRecord {
                    epoch,
                    batch: b,
                    mask_ids: vec![m.id(); seq.len()],
                });
            }
            epoch_terms += trainer.train_batch(&batch, &masks)?;
        }
        let test_terms = if test.is_empty() {
            None
        } else {
            Some(evaluate_loss(&trainer.params, &test, 0.0, 1, 0, cfg.loss_weights())?.terms)
        };
        report.epochs.push(EpochLoss {
            epoch: epoch + 1,
            train: epoch_terms.per_step(),
            test: test_terms,
        });
    }
    Ok((trainer.params, report))
}

fn shuffle(v: &mut [usize], rng: &mut SeededRng) {
    for i in (1..v.len()).rev() {
        let j = rng.below(i + 1);
        v.swap(i, j);
    }
}

pub fn model_meta(cfg: &TrainConfig, env: &str, member: usize) -> ModelMeta {
    ModelMeta {
        p_train: cfg.p_train,
        alpha_r: cfg.alpha_r,
        alpha_d: cfg.alpha_d,
        seed: cfg.seed,
        epochs: cfg.epochs,
        env: env.to_string(),
        member,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    /// Mean per-transition loss over sequences and mask repetitions.
    pub mean: f64,
    pub std_err: f64,
    /// Per-transition breakdown pooled over everything evaluated.
    pub terms: LossTerms,
    pub samples: usize,
}

/// Test loss with a fresh dropout mask at every step, as in step-randomized
/// dreams. Each trajectory is unrolled from the zero state and evaluated
/// `n_mask_samples` times with independent mask streams.
pub fn evaluate_loss(
    params: &WorldModelParams,
    trajectories: &[&Trajectory],
    p_infer: f64,
    n_mask_samples: usize,
    seed: u64,
    weights: LossWeights,
) -> Result<LossEstimate> {
    evaluate_loss_scaled(params, trajectories, p_infer, 1.0 / (1.0 - p_infer), n_mask_samples, seed, weights)
}

/// [`evaluate_loss`] with an explicit keep scale for kept units.
pub fn evaluate_loss_scaled(
    params: &WorldModelParams,
    trajectories: &[&Trajectory],
    p_infer: f64,
    keep_scale: f64,
    n_mask_samples: usize,
    seed: u64,
    weights: LossWeights,
) -> Result<LossEstimate> {
    if !(0.0..1.0).contains(&p_infer) {
        return Err(Error::invalid(format!("p_infer must lie in [0, 1), got {p_infer}")));
    }
    if trajectories.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if n_mask_samples == 0 {
        return Err(Error::invalid("n_mask_samples must be at least 1"));
    }
    let dims = params.dims();
    let action_dims = dims.action_indices();
    let jobs: Vec<(usize, usize)> = (0..trajectories.len())
        .flat_map(|i| (0..n_mask_samples).map(move |r| (i, r)))
        .collect();
    let results: Vec<Result<LossTerms>> = jobs
        .par_iter()
        .map(|&(i, rep)| {
            let seq = whole_sequence(trajectories[i]);
            let mut rng = SeededRng::derive(seed, &[i as u64, rep as u64]);
            let masks: Vec<MaskSet> = (0..seq.len())
                .map(|_| MaskSet::sample_scaled(p_infer, keep_scale, dims.input(), dims.hidden, &action_dims, &mut rng))
                .collect::<Result<_>>()?;
            let refs: Vec<&MaskSet> = masks.iter().collect();
            sequence_loss(params, &seq, &refs, weights)
        })
        .collect();
    let mut pooled = LossTerms::default();
    let mut per_seq = Vec::with_capacity(results.len());
    for r in results {
        let t = r?;
        if !t.total.is_finite() {
            return Err(Error::NonFinite(format!("evaluation loss {}", t.total)));
        }
        per_seq.push(t.per_step().total);
        pooled += t;
    }
    let n = per_seq.len() as f64;
    let mean = per_seq.iter().sum::<f64>() / n;
    let var = if per_seq.len() > 1 {
        per_seq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(LossEstimate {
        mean,
        std_err: (var / n).sqrt(),
        terms: pooled.per_step(),
        samples: per_seq.len(),
    })
}
