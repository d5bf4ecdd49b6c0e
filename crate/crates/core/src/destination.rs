//! Explicit destination modeling with a per-agent bivariate Gaussian
//! mixture: head parameterization, log-density, the destination
//! likelihood objective, the anti-mode-collapse hinge regularizer, and
//! destination sampling.
//!
//! Two representations coexist: tape-side `MixtureVars` for training
//! (f32, differentiable) and the plain f64 [`DestinationMixture`] used
//! for sampling and density evaluation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::tape::{GradError, Tape, Var};

const LN_2PI: f64 = 1.8378770664093453;

/// Saturation guards: keep sigma = exp(g3) finite and positive and
/// |rho| strictly below one for any finite head output.
const LOG_SIGMA_LIMIT: f64 = 15.0;
const LOGIT_LIMIT: f64 = 30.0;
const RHO_SCALE: f64 = 1.0 - 1e-6;

/// Mixture parameters for a batch of agents, living on the tape.
pub struct MixtureVars {
    pub k: usize,
    /// Clamped logits, `N x K`.
    pub pi: Var,
    /// Softmax weights, `N x K`.
    pub c: Var,
    /// Component means, `N x 2K` as (x0, y0, x1, y1, ...).
    pub mu: Var,
    /// Log standard deviations, `N x 2K`.
    pub log_sigma: Var,
    /// Standard deviations, `N x 2K`.
    pub sigma: Var,
    /// Correlations, `N x K`, strictly inside (-1, 1).
    pub rho: Var,
}

/// pi = g1(e), mu = g2(e), sigma = exp(g3(e)), rho = tanh(g4(e)),
/// c = softmax(pi). Logits and log-sigmas are clamped and tanh is
/// scaled by (1 - 1e-6) so the mixture invariants (weights positive,
/// sigma positive, |rho| < 1) hold for any finite head output.
pub fn predict_mixture(
    tape: &mut Tape,
    g1: (Var, Var),
    g2: (Var, Var),
    g3: (Var, Var),
    g4: (Var, Var),
    e: Var,
    k: usize,
) -> Result<MixtureVars, GradError> {
    let head = |tape: &mut Tape, (w, b): (Var, Var)| -> Result<Var, GradError> {
        let x = tape.matmul(e, w)?;
        tape.add(x, b)
    };
    let pi_raw = head(tape, g1)?;
    let pi = tape.clamp(pi_raw, -LOGIT_LIMIT, LOGIT_LIMIT)?;
    let c = tape.softmax(pi)?;
    let mu = head(tape, g2)?;
    let ls_raw = head(tape, g3)?;
    let log_sigma = tape.clamp(ls_raw, -LOG_SIGMA_LIMIT, LOG_SIGMA_LIMIT)?;
    let sigma = tape.exp(log_sigma)?;
    let rho_raw = head(tape, g4)?;
    let rho_t = tape.tanh(rho_raw)?;
    let rho = tape.affine(rho_t, RHO_SCALE, 0.0)?;
    Ok(MixtureVars {
        k,
        pi,
        c,
        mu,
        log_sigma,
        sigma,
        rho,
    })
}

/// Per-agent log mixture density at the agents' destinations,
/// `N x 1`, via log-sum-exp over components.
pub fn log_density_vars(
    tape: &mut Tape,
    m: &MixtureVars,
    dest: Var,
) -> Result<Var, GradError> {
    let log_c = tape.log_softmax(m.pi)?;
    let mut cols = Vec::with_capacity(m.k);
    for k in 0..m.k {
        let mu_k = tape.slice_cols(m.mu, 2 * k, 2 * k + 2)?;
        let sig_k = tape.slice_cols(m.sigma, 2 * k, 2 * k + 2)?;
        let diff = tape.sub(dest, mu_k)?;
        let u = tape.div(diff, sig_k)?;
        let ux = tape.slice_cols(u, 0, 1)?;
        let uy = tape.slice_cols(u, 1, 2)?;
        let rho_k = tape.slice_cols(m.rho, k, k + 1)?;

        let ux2 = tape.mul(ux, ux)?;
        let uy2 = tape.mul(uy, uy)?;
        let uxy = tape.mul(ux, uy)?;
        let ruxy = tape.mul(rho_k, uxy)?;
        let sum_sq = tape.add(ux2, uy2)?;
        let cross = tape.affine(ruxy, -2.0, 0.0)?;
        let q_num = tape.add(sum_sq, cross)?;

        let rho2 = tape.mul(rho_k, rho_k)?;
        let one_m_r2 = tape.affine(rho2, -1.0, 1.0)?;
        let q = tape.div(q_num, one_m_r2)?;

        let lsx = tape.slice_cols(m.log_sigma, 2 * k, 2 * k + 1)?;
        let lsy = tape.slice_cols(m.log_sigma, 2 * k + 1, 2 * k + 2)?;
        let ls_sum = tape.add(lsx, lsy)?;
        let log_omr2 = tape.log(one_m_r2)?;

        // log N = -ln(2pi) - log sx - log sy - 0.5 log(1-r^2) - q/2
        let t1 = tape.affine(ls_sum, -1.0, -LN_2PI)?;
        let t2 = tape.affine(log_omr2, -0.5, 0.0)?;
        let t3 = tape.affine(q, -0.5, 0.0)?;
        let log_n = {
            let a = tape.add(t1, t2)?;
            tape.add(a, t3)?
        };
        let log_c_k = tape.slice_cols(log_c, k, k + 1)?;
        cols.push(tape.add(log_c_k, log_n)?);
    }
    let stacked = tape.concat_cols(&cols)?;
    tape.row_logsumexp(stacked)
}

/// Mean negative log-likelihood of the ground-truth destinations.
pub fn destination_nll(
    tape: &mut Tape,
    m: &MixtureVars,
    dest: Var,
) -> Result<Var, GradError> {
    assert!(dest.rows > 0, "destination NLL needs at least one agent");
    let ll = log_density_vars(tape, m, dest)?;
    let total = tape.sum(ll)?;
    tape.affine(total, -1.0 / dest.rows as f64, 0.0)
}

#[derive(Debug, Clone, Copy)]
pub struct RegularizerConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
}

/// Hinge penalties against mode collapse, summed over agents:
/// ordered component pairs closer than `1/beta1`, weights above
/// `1/beta2`, and sigma norms above `1/beta3`.
pub fn mode_collapse_loss(
    tape: &mut Tape,
    m: &MixtureVars,
    cfg: &RegularizerConfig,
) -> Result<Var, GradError> {
    let mut total = tape.scalar(0.0)?;
    // Pairwise center distances, both orderings of each pair.
    if cfg.alpha1 > 0.0 {
        for k1 in 0..m.k {
            for k2 in 0..m.k {
                if k1 == k2 {
                    continue;
                }
                let mu1 = tape.slice_cols(m.mu, 2 * k1, 2 * k1 + 2)?;
                let mu2 = tape.slice_cols(m.mu, 2 * k2, 2 * k2 + 2)?;
                let diff = tape.sub(mu1, mu2)?;
                let sq = tape.mul(diff, diff)?;
                let d2 = tape.row_sum(sq)?;
                // Tiny offset keeps sqrt differentiable when centers coincide.
                let d2e = tape.affine(d2, 1.0, 1e-12)?;
                let dist = tape.sqrt(d2e)?;
                let arg = tape.affine(dist, -cfg.beta1, 1.0)?;
                let h = tape.relu(arg)?;
                let s = tape.sum(h)?;
                let weighted = tape.affine(s, cfg.alpha1, 0.0)?;
                total = tape.add(total, weighted)?;
            }
        }
    }
    for k in 0..m.k {
        if cfg.alpha2 > 0.0 {
            let c_k = tape.slice_cols(m.c, k, k + 1)?;
            let arg = tape.affine(c_k, cfg.beta2, -1.0)?;
            let h = tape.relu(arg)?;
            let s = tape.sum(h)?;
            let weighted = tape.affine(s, cfg.alpha2, 0.0)?;
            total = tape.add(total, weighted)?;
        }
        if cfg.alpha3 > 0.0 {
            let sig_k = tape.slice_cols(m.sigma, 2 * k, 2 * k + 2)?;
            let sq = tape.mul(sig_k, sig_k)?;
            let n2 = tape.row_sum(sq)?;
            let n2e = tape.affine(n2, 1.0, 1e-12)?;
            let norm = tape.sqrt(n2e)?;
            let arg = tape.affine(norm, cfg.beta3, -1.0)?;
            let h = tape.relu(arg)?;
            let s = tape.sum(h)?;
            let weighted = tape.affine(s, cfg.alpha3, 0.0)?;
            total = tape.add(total, weighted)?;
        }
    }
    Ok(total)
}

/// max(0, x) with the subgradient convention h'(0) = 0.
pub fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

/// A materialized per-agent mixture in f64, used for sampling,
/// density evaluation, and reporting.
#[derive(Debug, Clone)]
pub struct DestinationMixture {
    pub weights: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    pub sigmas: Vec<[f64; 2]>,
    pub rhos: Vec<f64>,
}

impl DestinationMixture {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// Covariance of component `k`: [[sx^2, r sx sy], [r sx sy, sy^2]].
    pub fn component_covariance(&self, k: usize) -> [[f64; 2]; 2] {
        let [sx, sy] = self.sigmas[k];
        let r = self.rhos[k];
        debug_assert!(sx > 0.0 && sy > 0.0 && r.abs() < 1.0);
        [[sx * sx, r * sx * sy], [r * sx * sy, sy * sy]]
    }

    /// Log mixture density at `d`, computed per component in closed
    /// form and combined with log-sum-exp.
    pub fn log_density(&self, d: [f64; 2]) -> f64 {
        let mut terms = Vec::with_capacity(self.k());
        for k in 0..self.k() {
            let [sx, sy] = self.sigmas[k];
            let r = self.rhos[k];
            let ux = (d[0] - self.means[k][0]) / sx;
            let uy = (d[1] - self.means[k][1]) / sy;
            let omr2 = 1.0 - r * r;
            let q = (ux * ux - 2.0 * r * ux * uy + uy * uy) / omr2;
            let log_n = -LN_2PI - sx.ln() - sy.ln() - 0.5 * omr2.ln() - 0.5 * q;
            terms.push(self.weights[k].ln() + log_n);
        }
        let m = terms.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        m + terms.iter().map(|&t| (t - m).exp()).sum::<f64>().ln()
    }

    pub fn density(&self, d: [f64; 2]) -> f64 {
        self.log_density(d).exp()
    }

    /// Draw a destination: pick a component by weight, then transform
    /// two unit normals through the Cholesky factor of its covariance.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        let total: f64 = self.weights.iter().sum();
        let mut u: f64 = rng.gen_range(0.0..total);
        let mut k = self.k() - 1;
        for (idx, &w) in self.weights.iter().enumerate() {
            if u < w {
                k = idx;
                break;
            }
            u -= w;
        }
        let [sx, sy] = self.sigmas[k];
        let r = self.rhos[k];
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        // L = [[sx, 0], [r sy, sy sqrt(1 - r^2)]] satisfies L L^T = cov.
        [
            self.means[k][0] + sx * z1,
            self.means[k][1] + r * sy * z1 + sy * (1.0 - r * r).sqrt() * z2,
        ]
    }

    pub fn validate(&self) -> Result<(), String> {
        let k = self.k();
        if k == 0 || self.means.len() != k || self.sigmas.len() != k || self.rhos.len() != k {
            return Err("inconsistent component counts".into());
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(format!("weights sum to {sum}"));
        }
        for i in 0..k {
            if !(self.weights[i] > 0.0) {
                return Err(format!("weight {i} = {} not positive", self.weights[i]));
            }
            if !(self.sigmas[i][0] > 0.0 && self.sigmas[i][1] > 0.0) {
                return Err(format!("sigma {i} = {:?} not positive", self.sigmas[i]));
            }
            if !(self.rhos[i].abs() < 1.0) {
                return Err(format!("rho {i} = {} not inside (-1, 1)", self.rhos[i]));
            }
            let cov = self.component_covariance(i);
            let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
            if !(det > 0.0) {
                return Err(format!("covariance {i} not positive definite"));
            }
        }
        Ok(())
    }
}

/// Extract per-agent f64 mixtures from the tape values.
pub fn materialize_mixtures(tape: &Tape, m: &MixtureVars, n: usize) -> Vec<DestinationMixture> {
    let pi = tape.value(m.pi);
    let mu = tape.value(m.mu);
    let ls = tape.value(m.log_sigma);
    let rho = tape.value(m.rho);
    let k = m.k;
    (0..n)
        .map(|i| {
            // Softmax recomputed in f64 from the clamped logits.
            let logits: Vec<f64> = (0..k).map(|j| pi[i * k + j]).collect();
            let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            DestinationMixture {
                weights: exps.iter().map(|&e| e / sum).collect(),
                means: (0..k)
                    .map(|j| [mu[i * 2 * k + 2 * j], mu[i * 2 * k + 2 * j + 1]])
                    .collect(),
                sigmas: (0..k)
                    .map(|j| {
                        [
                            ls[i * 2 * k + 2 * j].exp(),
                            ls[i * 2 * k + 2 * j + 1].exp(),
                        ]
                    })
                    .collect(),
                rhos: (0..k).map(|j| rho[i * k + j]).collect(),
            }
        })
        .collect()
}
