//! Random-walk proposals whose scale and shape are tuned during burn-in and
//! frozen afterwards.

use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug)]
pub(crate) struct AdaptiveProposal {
    dim: usize,
    log_scale: f64,
    /// Lower-triangular factor, row-major `dim × dim`.
    chol: Vec<f64>,
    target: f64,
    adapting: bool,
    shaped: bool,
    // burn-in state moments (Welford)
    n: usize,
    mean: Vec<f64>,
    comoment: Vec<f64>,
    window_tried: usize,
    window_accepted: usize,
    tried: usize,
    accepted: usize,
}

impl AdaptiveProposal {
    pub fn new(initial_sd: &[f64]) -> Self {
        let dim = initial_sd.len();
        let mut chol = vec![0.0; dim * dim];
        for (i, sd) in initial_sd.iter().enumerate() {
            chol[i * dim + i] = *sd;
        }
        AdaptiveProposal {
            dim,
            log_scale: 0.0,
            chol,
            target: if dim == 1 { 0.40 } else { 0.30 },
            adapting: true,
            shaped: false,
            n: 0,
            mean: vec![0.0; dim],
            comoment: vec![0.0; dim * dim],
            window_tried: 0,
            window_accepted: 0,
            tried: 0,
            accepted: 0,
        }
    }

    pub fn propose<R: Rng + ?Sized>(&self, current: &[f64], rng: &mut R, out: &mut [f64]) {
        let scale = self.log_scale.exp();
        let z: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..self.dim {
            let row = &self.chol[i * self.dim..i * self.dim + i + 1];
            let step: f64 = row.iter().zip(&z).map(|(l, zi)| l * zi).sum();
            out[i] = current[i] + scale * step;
        }
    }

    /// Records the outcome of one proposal and the state after it.
    pub fn record(&mut self, accepted: bool, state: &[f64]) {
        if self.adapting {
            self.window_tried += 1;
            self.window_accepted += accepted as usize;
            self.n += 1;
            let n = self.n as f64;
            let delta: Vec<f64> = state.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
            for (m, d) in self.mean.iter_mut().zip(&delta) {
                *m += d / n;
            }
            for i in 0..self.dim {
                for j in 0..self.dim {
                    self.comoment[i * self.dim + j] += delta[i] * (state[j] - self.mean[j]);
                }
            }
        } else {
            self.tried += 1;
            self.accepted += accepted as usize;
        }
    }

    /// Discards the accumulated state moments, e.g. once the early transient
    /// is over.
    pub fn reset_moments(&mut self) {
        self.n = 0;
        self.mean.iter_mut().for_each(|m| *m = 0.0);
        self.comoment.iter_mut().for_each(|m| *m = 0.0);
    }

    pub fn end_window(&mut self) {
        if !self.adapting || self.window_tried == 0 {
            return;
        }
        let rate = self.window_accepted as f64 / self.window_tried as f64;
        self.log_scale = (self.log_scale + 2.0 * (rate - self.target)).clamp(-12.0, 6.0);
        self.window_tried = 0;
        self.window_accepted = 0;

        if self.n >= 20 * self.dim.max(2) {
            if let Some(chol) = self.empirical_factor() {
                self.chol = chol;
                if !self.shaped {
                    self.shaped = true;
                    self.log_scale = 0.0;
                }
            }
        }
    }

    fn empirical_factor(&self) -> Option<Vec<f64>> {
        let d = self.dim;
        let denom = (self.n - 1) as f64;
        let factor = 2.38 * 2.38 / d as f64;
        let mut cov: Vec<f64> = self.comoment.iter().map(|c| factor * c / denom).collect();
        for i in 0..d {
            let diag = cov[i * d + i];
            cov[i * d + i] = diag + 1e-10 + 1e-6 * diag.abs();
        }
        cholesky(&cov, d)
    }

    pub fn freeze(&mut self) {
        self.adapting = false;
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.tried == 0 {
            0.0
        } else {
            self.accepted as f64 / self.tried as f64
        }
    }
}

fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum();
            if i == j {
                let v = a[i * d + i] - s;
                if !(v > 0.0) || !v.is_finite() {
                    return None;
                }
                l[i * d + j] = v.sqrt();
            } else {
                l[i * d + j] = (a[i * d + j] - s) / l[j * d + j];
            }
        }
    }
    Some(l)
}
