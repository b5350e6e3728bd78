//! (μ/μ_w, λ)-CMA-ES with cumulative step-size adaptation.
//!
//! Small problems adapt a full covariance matrix. Above
//! [`FULL_COVARIANCE_LIMIT`] dimensions the covariance is kept diagonal
//! (separable CMA-ES with its enlarged learning rates), since an
//! eigendecomposition of a 17 000-dimensional matrix per generation is
//! out of reach.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FULL_COVARIANCE_LIMIT: usize = 200;

#[derive(Clone, Debug)]
enum Covariance {
    Full {
        c: DMatrix<f64>,
        b: DMatrix<f64>,
        d: DVector<f64>,
    },
    Diagonal(DVector<f64>),
}

#[derive(Clone, Debug)]
pub struct CmaEs {
    n: usize,
    lambda: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c1: f64,
    c_mu: f64,
    chi_n: f64,
    sigma0: f64,
    pub mean: DVector<f64>,
    pub sigma: f64,
    p_sigma: DVector<f64>,
    p_c: DVector<f64>,
    cov: Covariance,
    generation: u64,
    rng: ChaCha8Rng,
    /// Standard-normal draws of the last `ask`, used by `tell`.
    pending: Vec<DVector<f64>>,
    pub restarts: usize,
}

impl CmaEs {
    pub fn new(x0: &[f64], sigma0: f64, seed: u64) -> Self {
        let n = x0.len().max(1);
        let lambda = 4 + (3.0 * (n as f64).ln()).floor() as usize;
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - (i as f64).ln())
            .collect();
        let sum: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let nf = n as f64;
        let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
        let mut c1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
        let mut c_mu = (2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff)).min(1.0 - c1);
        let diagonal = n > FULL_COVARIANCE_LIMIT;
        if diagonal {
            let s = (nf + 2.0) / 3.0;
            c1 *= s;
            c_mu = (c_mu * s).min(1.0 - c1);
        }
        let cov = if diagonal {
            Covariance::Diagonal(DVector::from_element(n, 1.0))
        } else {
            Covariance::Full {
                c: DMatrix::identity(n, n),
                b: DMatrix::identity(n, n),
                d: DVector::from_element(n, 1.0),
            }
        };
        let mut mean = DVector::zeros(n);
        for (m, x) in mean.iter_mut().zip(x0) {
            *m = *x;
        }
        Self {
            n,
            lambda,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c1,
            c_mu,
            chi_n: nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf)),
            sigma0,
            mean,
            sigma: sigma0,
            p_sigma: DVector::zeros(n),
            p_c: DVector::zeros(n),
            cov,
            generation: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pending: Vec::new(),
            restarts: 0,
        }
    }

    pub fn population_size(&self) -> usize {
        self.lambda
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.cov, Covariance::Diagonal(_))
    }

    /// Samples one generation of candidates.
    pub fn ask(&mut self) -> Vec<Vec<f64>> {
        let n = self.n;
        self.pending = (0..self.lambda)
            .map(|_| DVector::from_fn(n, |_, _| StandardNormal.sample(&mut self.rng)))
            .collect();
        self.pending
            .iter()
            .map(|z| {
                let y = self.transform(z);
                (&self.mean + self.sigma * y).iter().copied().collect()
            })
            .collect()
    }

    /// `B·D·z`
    fn transform(&self, z: &DVector<f64>) -> DVector<f64> {
        match &self.cov {
            Covariance::Full { b, d, .. } => b * z.component_mul(d),
            Covariance::Diagonal(c) => z.component_mul(&c.map(f64::sqrt)),
        }
    }

    /// `C^{-1/2}·y` for `y = B·D·z`, which is `B·z`.
    fn whiten(&self, z: &DVector<f64>) -> DVector<f64> {
        match &self.cov {
            Covariance::Full { b, .. } => b * z,
            Covariance::Diagonal(_) => z.clone(),
        }
    }

    /// Updates the distribution from the fitness of the last `ask`.
    pub fn tell(&mut self, fitness: &[f64]) {
        assert_eq!(fitness.len(), self.pending.len(), "one fitness per candidate");
        let mut order: Vec<usize> = (0..fitness.len()).collect();
        order.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]));
        let n = self.n;
        let ys: Vec<DVector<f64>> = order[..self.weights.len()]
            .iter()
            .map(|&i| self.transform(&self.pending[i]))
            .collect();
        let mut y_w = DVector::zeros(n);
        let mut z_w = DVector::zeros(n);
        for (k, &i) in order[..self.weights.len()].iter().enumerate() {
            y_w += self.weights[k] * &ys[k];
            z_w += self.weights[k] * &self.pending[i];
        }
        self.mean += self.sigma * &y_w;

        let cs = self.c_sigma;
        self.p_sigma = (1.0 - cs) * &self.p_sigma + (cs * (2.0 - cs) * self.mu_eff).sqrt() * self.whiten(&z_w);
        self.generation += 1;
        let ps_norm = self.p_sigma.norm();
        let denom = (1.0 - (1.0 - cs).powf(2.0 * self.generation as f64)).sqrt();
        let h_sigma = ps_norm / denom < (1.4 + 2.0 / (n as f64 + 1.0)) * self.chi_n;
        let h = if h_sigma { 1.0 } else { 0.0 };
        let cc = self.c_c;
        self.p_c = (1.0 - cc) * &self.p_c + h * (cc * (2.0 - cc) * self.mu_eff).sqrt() * &y_w;
        let (c1, cmu) = (self.c1, self.c_mu);
        let delta = (1.0 - h) * cc * (2.0 - cc);
        match &mut self.cov {
            Covariance::Full { c, .. } => {
                let mut rank_mu = DMatrix::zeros(n, n);
                for (k, y) in ys.iter().enumerate() {
                    rank_mu.ger(self.weights[k], y, y, 1.0);
                }
                *c = (1.0 - c1 - cmu) * &*c + c1 * (&self.p_c * self.p_c.transpose() + delta * &*c) + cmu * rank_mu;
            }
            Covariance::Diagonal(c) => {
                for j in 0..n {
                    let rm: f64 = ys.iter().zip(&self.weights).map(|(y, w)| w * y[j] * y[j]).sum();
                    c[j] = (1.0 - c1 - cmu) * c[j] + c1 * (self.p_c[j] * self.p_c[j] + delta * c[j]) + cmu * rm;
                }
            }
        }
        self.sigma *= ((cs / self.d_sigma) * (ps_norm / self.chi_n - 1.0)).exp();
        if !self.decompose() || !self.sigma.is_finite() || self.sigma <= 0.0 {
            self.restart();
        }
    }

    /// Refreshes `B`, `D`; false when the covariance is no longer positive
    /// definite.
    fn decompose(&mut self) -> bool {
        match &mut self.cov {
            Covariance::Full { c, b, d } => {
                // Enforce exact symmetry against round-off.
                let sym = (&*c + c.transpose()) * 0.5;
                *c = sym;
                if c.iter().any(|x| !x.is_finite()) {
                    return false;
                }
                let eig = SymmetricEigen::new(c.clone());
                if eig.eigenvalues.iter().any(|&l| l <= 0.0 || !l.is_finite()) {
                    return false;
                }
                *b = eig.eigenvectors;
                *d = eig.eigenvalues.map(f64::sqrt);
                true
            }
            Covariance::Diagonal(c) => c.iter().all(|&x| x > 0.0 && x.is_finite()),
        }
    }

    /// Resets covariance, paths and step size; keeps the mean.
    fn restart(&mut self) {
        let n = self.n;
        self.cov = match self.cov {
            Covariance::Full { .. } => Covariance::Full {
                c: DMatrix::identity(n, n),
                b: DMatrix::identity(n, n),
                d: DVector::from_element(n, 1.0),
            },
            Covariance::Diagonal(_) => Covariance::Diagonal(DVector::from_element(n, 1.0)),
        };
        self.p_sigma.fill(0.0);
        self.p_c.fill(0.0);
        self.sigma = self.sigma0;
        self.generation = 0;
        self.restarts += 1;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmaResult {
    pub x_best: Vec<f64>,
    pub f_best: f64,
    pub evals: usize,
}

/// Minimizes `f` within `max_evals` evaluations; stops early once
/// `f_best <= target`.
pub fn cma_es_minimize(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    sigma0: f64,
    max_evals: usize,
    target: f64,
    seed: u64,
) -> CmaResult {
    let mut best = CmaResult {
        x_best: x0.to_vec(),
        f_best: f64::INFINITY,
        evals: 0,
    };
    if max_evals == 0 || x0.is_empty() {
        return best;
    }
    let mut es = CmaEs::new(x0, sigma0, seed);
    while best.evals < max_evals {
        let pop = es.ask();
        let mut fit = Vec::with_capacity(pop.len());
        for x in &pop {
            let v = f(x);
            best.evals += 1;
            if v < best.f_best {
                best.f_best = v;
                best.x_best.clone_from(x);
            }
            if best.evals == max_evals || best.f_best <= target {
                return best;
            }
            fit.push(if v.is_nan() { f64::INFINITY } else { v });
        }
        es.tell(&fit);
    }
    best
}
