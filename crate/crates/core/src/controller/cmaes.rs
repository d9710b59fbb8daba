//! (μ/μ_w, λ)-CMA-ES with cumulative step-size adaptation and rank-μ update.
//!
//! Fitness is maximized. Selection uses only the order of fitness values, so
//! any strictly increasing transform of the fitness leaves every update
//! unchanged.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};
use crate::numerics::SeededRng;

#[derive(Clone, Debug)]
pub struct CmaState {
    dim: usize,
    lambda: usize,
    seed: u64,
    generation: u64,
    mean: DVector<f64>,
    sigma: f64,
    cov: DMatrix<f64>,
    /// Eigenvectors of `cov` as columns.
    basis: DMatrix<f64>,
    /// Square roots of the eigenvalues of `cov`.
    scales: DVector<f64>,
    pc: DVector<f64>,
    ps: DVector<f64>,
    weights: Vec<f64>,
    mu_eff: f64,
    cc: f64,
    cs: f64,
    c1: f64,
    cmu: f64,
    damps: f64,
    chi_n: f64,
}

/// What one `tell` did, for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedUpdate {
    /// Candidate indices from best to worst.
    pub order: Vec<usize>,
    /// Indices whose fitness was not finite.
    pub non_finite: Vec<usize>,
}

impl CmaState {
    /// Default population size `4 + ⌊3 ln n⌋`.
    pub fn default_population(dim: usize) -> usize {
        4 + (3.0 * (dim as f64).ln()).floor() as usize
    }

    pub fn new(mean: Vec<f64>, sigma: f64, lambda: usize, seed: u64) -> Result<Self> {
        let n = mean.len();
        if n == 0 {
            return Err(Error::invalid("CMA-ES needs at least one dimension"));
        }
        if lambda < 4 {
            return Err(Error::Config(format!("population must be at least 4, got {lambda}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("initial step size must be positive, got {sigma}")));
        }
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - (i as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let nf = n as f64;
        let cc = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
        let cs = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
        let c1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
        let cmu = (1.0 - c1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
        let damps = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + cs;
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
        Ok(CmaState {
            dim: n,
            lambda,
            seed,
            generation: 0,
            mean: DVector::from_vec(mean),
            sigma,
            cov: DMatrix::identity(n, n),
            basis: DMatrix::identity(n, n),
            scales: DVector::from_element(n, 1.0),
            pc: DVector::zeros(n),
            ps: DVector::zeros(n),
            weights,
            mu_eff,
            cc,
            cs,
            c1,
            cmu,
            damps,
            chi_n,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn population(&self) -> usize {
        self.lambda
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Candidates for the current generation, drawn from a stream keyed by
    /// `(seed, generation)`.
    pub fn ask(&self) -> Vec<Vec<f64>> {
        let mut rng = SeededRng::derive(self.seed, &[self.generation]);
        let bd = &self.basis * DMatrix::from_diagonal(&self.scales);
        (0..self.lambda)
            .map(|_| {
                let z = DVector::from_fn(self.dim, |_, _| rng.normal());
                let x = &self.mean + self.sigma * (&bd * z);
                x.as_slice().to_vec()
            })
            .collect()
    }

    /// Updates the search distribution from fitness values (higher is better).
    /// Non-finite fitness ranks below every finite value.
    pub fn tell(&mut self, candidates: &[Vec<f64>], fitness: &[f64]) -> Result<RankedUpdate> {
        check_dim("CMA-ES fitness", self.lambda, fitness.len())?;
        check_dim("CMA-ES candidates", self.lambda, candidates.len())?;
        for c in candidates {
            check_dim("CMA-ES candidate", self.dim, c.len())?;
        }
        let non_finite: Vec<usize> = (0..fitness.len()).filter(|&i| !fitness[i].is_finite()).collect();
        let mut order: Vec<usize> = (0..self.lambda).collect();
        order.sort_by(|&a, &b| {
            let (fa, fb) = (fitness[a], fitness[b]);
            match (fa.is_finite(), fb.is_finite()) {
                (true, true) => fb.total_cmp(&fa),
                (true, false) => std::cmp::Ordering::Less,
                (false, true) => std::cmp::Ordering::Greater,
                (false, false) => std::cmp::Ordering::Equal,
            }
        });

        let n = self.dim as f64;
        let old = self.mean.clone();
        let steps: Vec<DVector<f64>> = order[..self.weights.len()]
            .iter()
            .map(|&i| (DVector::from_column_slice(&candidates[i]) - &old) / self.sigma)
            .collect();
        let mut y_w = DVector::zeros(self.dim);
        for (w, y) in self.weights.iter().zip(&steps) {
            y_w += *w * y;
        }
        self.mean = &old + self.sigma * &y_w;

        let inv_sqrt = &self.basis
            * DMatrix::from_diagonal(&self.scales.map(|s| 1.0 / s))
            * self.basis.transpose();
        self.ps = (1.0 - self.cs) * &self.ps + (self.cs * (2.0 - self.cs) * self.mu_eff).sqrt() * (&inv_sqrt * &y_w);
        let gen = (self.generation + 1) as i32;
        let ps_norm = self.ps.norm();
        let hsig = ps_norm / (1.0 - (1.0 - self.cs).powi(2 * gen)).sqrt() / self.chi_n < 1.4 + 2.0 / (n + 1.0);
        let hsig_f = if hsig { 1.0 } else { 0.0 };
        self.pc = (1.0 - self.cc) * &self.pc + hsig_f * (self.cc * (2.0 - self.cc) * self.mu_eff).sqrt() * &y_w;

        let mut rank_mu = DMatrix::zeros(self.dim, self.dim);
        for (w, y) in self.weights.iter().zip(&steps) {
            rank_mu += *w * (y * y.transpose());
        }
        let rank_one = &self.pc * self.pc.transpose() + (1.0 - hsig_f) * self.cc * (2.0 - self.cc) * &self.cov;
        self.cov = (1.0 - self.c1 - self.cmu) * &self.cov + self.c1 * rank_one + self.cmu * rank_mu;
        self.cov = 0.5 * (&self.cov + self.cov.transpose());
        self.sigma *= ((self.cs / self.damps) * (ps_norm / self.chi_n - 1.0)).exp();
        if !self.sigma.is_finite() || !self.mean.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("CMA-ES state became non-finite".into()));
        }
        self.decompose()?;
        self.generation += 1;
        Ok(RankedUpdate { order, non_finite })
    }

    fn decompose(&mut self) -> Result<()> {
        let eig = SymmetricEigen::new(self.cov.clone());
        if let Some(&bad) = eig.eigenvalues.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Numerical(format!(
                "covariance is not positive definite (eigenvalue {bad:e})"
            )));
        }
        self.scales = eig.eigenvalues.map(f64::sqrt);
        self.basis = eig.eigenvectors;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(x: &[f64]) -> f64 {
        -x.iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn default_weights_sum_to_one() {
        let s = CmaState::new(vec![0.0; 10], 0.5, 10, 0).unwrap();
        assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.weights.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(CmaState::default_population(10), 10);
    }

    #[test]
    fn small_population_is_rejected() {
        assert!(CmaState::new(vec![0.0; 3], 0.5, 3, 0).is_err());
        assert!(CmaState::new(vec![0.0; 3], 0.0, 8, 0).is_err());
    }

    #[test]
    fn non_finite_fitness_ranks_last() {
        let mut s = CmaState::new(vec![0.0; 2], 0.5, 6, 1).unwrap();
        let cands = s.ask();
        let mut f: Vec<f64> = cands.iter().map(|c| sphere(c)).collect();
        f[0] = f64::NAN;
        f[3] = f64::INFINITY;
        let up = s.tell(&cands, &f).unwrap();
        assert_eq!(up.non_finite, vec![0, 3]);
        assert_eq!(&up.order[4..], &[0, 3]);
    }

    #[test]
    fn sphere_converges() {
        let mut s = CmaState::new(vec![1.0; 5], 0.5, 8, 3).unwrap();
        for _ in 0..300 {
            let c = s.ask();
            let f: Vec<f64> = c.iter().map(|x| sphere(x)).collect();
            s.tell(&c, &f).unwrap();
        }
        assert!(s.mean().iter().all(|v| v.abs() < 1e-6), "{:?}", s.mean());
    }
}
