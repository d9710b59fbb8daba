//! Single-layer controller, CMA-ES, and the search and evaluation protocol.

pub mod cmaes;
mod optimize;

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Map;

pub use cmaes::{CmaState, RankedUpdate};
pub use optimize::{
    cma_optimize, evaluate_population, evaluate_real, CmaConfig, CmaOutcome, GenerationStats, LeaderBoard,
    LeaderEntry, PopulationEval, RealEval,
};

use crate::container::{self, Block};
use crate::dropout_lstm::LstmState;
use crate::error::{check_dim, Error, Result};
use crate::numerics::Matrix;
use crate::world_model::ModelDims;

pub const CONTROLLER_KIND: &str = "controller";
pub const CONTROLLER_VERSION: u32 = 1;

/// Which model features the controller reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSpec {
    /// `[z, h]`
    Zh,
    /// `[z, h, c]`
    Zhc,
}

impl FeatureSpec {
    pub fn feature_dim(self, latent: usize, hidden: usize) -> usize {
        match self {
            FeatureSpec::Zh => latent + hidden,
            FeatureSpec::Zhc => latent + 2 * hidden,
        }
    }
}

/// `action = tanh(W · features + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerParams {
    pub spec: FeatureSpec,
    latent: usize,
    hidden: usize,
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl ControllerParams {
    pub fn zeros(spec: FeatureSpec, latent: usize, hidden: usize, action: usize) -> Self {
        ControllerParams {
            spec,
            latent,
            hidden,
            weights: Matrix::zeros(action, spec.feature_dim(latent, hidden)),
            bias: vec![0.0; action],
        }
    }

    pub fn for_model(spec: FeatureSpec, dims: ModelDims) -> Self {
        Self::zeros(spec, dims.latent, dims.hidden, dims.action)
    }

    pub fn latent_dim(&self) -> usize {
        self.latent
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn action_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn num_params(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }

    /// Weights row-major followed by the bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weights.as_slice().to_vec();
        v.extend_from_slice(&self.bias);
        v
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        check_dim("controller parameters", self.num_params(), flat.len())?;
        let nw = self.weights.as_slice().len();
        let mut out = self.clone();
        out.weights.as_mut_slice().copy_from_slice(&flat[..nw]);
        out.bias.copy_from_slice(&flat[nw..]);
        Ok(out)
    }

    /// Checks that the controller reads features of this model and drives its actions.
    pub fn check_model(&self, dims: ModelDims) -> Result<()> {
        check_dim("controller latent size vs model", dims.latent, self.latent)?;
        check_dim("controller hidden size vs model", dims.hidden, self.hidden)?;
        check_dim("controller action size vs model", dims.action, self.action_dim())
    }

    pub fn features(&self, z: &[f64], state: &LstmState) -> Result<Vec<f64>> {
        check_dim("controller z", self.latent, z.len())?;
        check_dim("controller h", self.hidden, state.h.len())?;
        let mut f = Vec::with_capacity(self.feature_dim());
        f.extend_from_slice(z);
        f.extend_from_slice(&state.h);
        if self.spec == FeatureSpec::Zhc {
            check_dim("controller c", self.hidden, state.c.len())?;
            f.extend_from_slice(&state.c);
        }
        Ok(f)
    }

    pub fn act(&self, z: &[f64], state: &LstmState) -> Result<Vec<f64>> {
        let f = self.features(z, state)?;
        let mut a = self.bias.clone();
        self.weights.matvec_acc(&f, &mut a);
        a.iter_mut().for_each(|v| *v = v.tanh());
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = Map::new();
        header.insert("spec".into(), serde_json::to_value(self.spec)?);
        header.insert("latent".into(), self.latent.into());
        header.insert("hidden".into(), self.hidden.into());
        header.insert("action".into(), self.action_dim().into());
        let blocks = [
            Block::new("weights", self.weights.as_slice().to_vec()),
            Block::new("bias", self.bias.clone()),
        ];
        container::write(path, CONTROLLER_KIND, CONTROLLER_VERSION, &header, &blocks)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = container::read(path, CONTROLLER_KIND, CONTROLLER_VERSION)?;
        let spec: FeatureSpec = c.header_field("spec")?;
        let latent: usize = c.header_field("latent")?;
        let hidden: usize = c.header_field("hidden")?;
        let action: usize = c.header_field("action")?;
        let template = Self::zeros(spec, latent, hidden, action);
        let mut flat = c.block("weights")?.data.clone();
        flat.extend_from_slice(&c.block("bias")?.data);
        template
            .with_flat(&flat)
            .map_err(|e| Error::Corrupt(format!("controller blocks: {e}")))
    }
}
