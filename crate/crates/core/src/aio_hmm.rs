//! Autoregressive input-output HMM for one maneuver class.
//!
//! Hidden state `i` evolves with input-dependent transitions
//! `P(j | i, x_t) = softmax_j(w_ij · [1; x_t])` and emits the inside feature
//! `z_t ~ N((1 + a_i·x_t + b_i·z_{t−1}) μ_i, Σ_i)`, with `z_0 = 0`. The IO
//! variant pins `b = 0`; the plain HMM also pins `a = 0` and keeps only the
//! bias column of `w`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{dot, log_sum_exp, softmax, softmax_unchecked, Mat, Rng};
use crate::sample::{EventSet, SequenceSample};
use crate::synth::split_folds;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Aio,
    Io,
    Hmm,
}

impl Variant {
    fn learns_a(self) -> bool {
        self != Variant::Hmm
    }

    fn learns_b(self) -> bool {
        self == Variant::Aio
    }

    fn input_transitions(self) -> bool {
        self != Variant::Hmm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AioHmmModel {
    pub variant: Variant,
    pub x_dim: usize,
    pub z_dim: usize,
    pub mu: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub sigma: Vec<Mat>,
    /// `w[i]` has one row per destination state over `[1; x]`.
    pub w: Vec<Mat>,
    pub pi: Vec<f64>,
}

impl AioHmmModel {
    /// Zero means and couplings, identity covariances, uniform transitions.
    pub fn blank(variant: Variant, states: usize, x_dim: usize, z_dim: usize) -> Result<Self> {
        if states == 0 || z_dim == 0 {
            return Err(Error::Config("an HMM needs at least one state and a non-empty z".into()));
        }
        Ok(AioHmmModel {
            variant,
            x_dim,
            z_dim,
            mu: vec![vec![0.0; z_dim]; states],
            a: vec![vec![0.0; x_dim]; states],
            b: vec![vec![0.0; z_dim]; states],
            sigma: vec![Mat::identity(z_dim); states],
            w: vec![Mat::zeros(states, x_dim + 1); states],
            pi: vec![1.0 / states as f64; states],
        })
    }

    pub fn states(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.states();
        if s == 0 {
            return Err(Error::Config("an HMM needs at least one state".into()));
        }
        for i in 0..s {
            ensure_dim("mu", self.z_dim, self.mu[i].len())?;
            ensure_dim("a", self.x_dim, self.a[i].len())?;
            ensure_dim("b", self.z_dim, self.b[i].len())?;
            ensure_dim("sigma rows", self.z_dim, self.sigma[i].rows())?;
            ensure_dim("sigma cols", self.z_dim, self.sigma[i].cols())?;
            ensure_dim("w rows", s, self.w[i].rows())?;
            ensure_dim("w cols", self.x_dim + 1, self.w[i].cols())?;
        }
        for v in [&self.a, &self.b].iter().flat_map(|v| v.iter()).chain(&self.mu).chain([&self.pi]) {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("HMM parameter".into()));
            }
        }
        if self.pi.iter().any(|p| *p < 0.0) || (self.pi.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid("initial distribution must be non-negative and sum to 1".into()));
        }
        if !self.variant.learns_b() && self.b.iter().flatten().any(|v| *v != 0.0) {
            return Err(Error::Invalid(format!("{:?} variant requires b = 0", self.variant)));
        }
        if !self.variant.learns_a() && self.a.iter().flatten().any(|v| *v != 0.0) {
            return Err(Error::Invalid("HMM variant requires a = 0".into()));
        }
        if !self.variant.input_transitions()
            && self.w.iter().any(|w| (0..s).any(|j| w.row(j)[1..].iter().any(|v| *v != 0.0)))
        {
            return Err(Error::Invalid("HMM variant requires input-free transitions".into()));
        }
        Gaussians::new(self).map(|_| ())
    }

    /// Distribution over next states from state `i` given input `x`.
    pub fn transition_row(&self, i: usize, x: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("transition input", self.x_dim, x.len())?;
        if i >= self.states() {
            return Err(Error::Invalid(format!("state {i} out of range")));
        }
        softmax(&self.transition_logits(i, x))
    }

    fn transition_logits(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let w = &self.w[i];
        (0..self.states())
            .map(|j| {
                let r = w.row(j);
                r[0] + dot(&r[1..], x)
            })
            .collect()
    }

    fn transitions(&self, x: &[f64]) -> Vec<Vec<f64>> {
        (0..self.states())
            .map(|i| softmax_unchecked(&self.transition_logits(i, x)))
            .collect()
    }

    /// The mean multiplier `1 + a_i·x + b_i·z_prev`.
    pub fn scale(&self, i: usize, x: &[f64], z_prev: &[f64]) -> f64 {
        1.0 + dot(&self.a[i], x) + dot(&self.b[i], z_prev)
    }

    /// Log density of `z` under state `i`.
    pub fn emission_logpdf(&self, i: usize, z: &[f64], x: &[f64], z_prev: &[f64]) -> Result<f64> {
        ensure_dim("emission z", self.z_dim, z.len())?;
        ensure_dim("emission z_prev", self.z_dim, z_prev.len())?;
        ensure_dim("emission x", self.x_dim, x.len())?;
        let g = Gaussians::new(self)?;
        Ok(g.logpdf(self, i, z, x, z_prev))
    }

    fn check_streams(&self, xs: &[Vec<f64>], zs: &[Vec<f64>]) -> Result<()> {
        if xs.is_empty() {
            return Err(Error::Empty("observation sequence"));
        }
        ensure_dim("stream length", xs.len(), zs.len())?;
        for (x, z) in xs.iter().zip(zs) {
            ensure_dim("x", self.x_dim, x.len())?;
            ensure_dim("z", self.z_dim, z.len())?;
        }
        Ok(())
    }

    /// `log P(z_1..T | x_1..T)` by the scaled forward pass.
    pub fn log_likelihood(&self, xs: &[Vec<f64>], zs: &[Vec<f64>]) -> Result<f64> {
        self.check_streams(xs, zs)?;
        let mut f = self.filter()?;
        let mut ll = 0.0;
        for (x, z) in xs.iter().zip(zs) {
            ll = f.push(x, z)?;
        }
        Ok(ll)
    }

    pub fn filter(&self) -> Result<ForwardFilter<'_>> {
        Ok(ForwardFilter {
            model: self,
            gauss: Gaussians::new(self)?,
            alpha: Vec::new(),
            loglik: 0.0,
            z_prev: vec![0.0; self.z_dim],
            t: 0,
        })
    }
}

/// Cached precisions and normalizers of every state's Gaussian.
struct Gaussians {
    prec: Vec<Mat>,
    log_norm: Vec<f64>,
}

impl Gaussians {
    fn new(m: &AioHmmModel) -> Result<Self> {
        let mut prec = Vec::with_capacity(m.states());
        let mut log_norm = Vec::with_capacity(m.states());
        for (i, s) in m.sigma.iter().enumerate() {
            let (p, logdet) = precision(s).ok_or_else(|| Error::Invalid(format!("covariance of state {i} is not positive definite")))?;
            prec.push(p);
            log_norm.push(-0.5 * (m.z_dim as f64 * LN_2PI + logdet));
        }
        Ok(Gaussians { prec, log_norm })
    }

    fn logpdf(&self, m: &AioHmmModel, i: usize, z: &[f64], x: &[f64], z_prev: &[f64]) -> f64 {
        let s = m.scale(i, x, z_prev);
        let r: Vec<f64> = z.iter().zip(&m.mu[i]).map(|(z, mu)| z - s * mu).collect();
        self.log_norm[i] - 0.5 * quad(&self.prec[i], &r)
    }
}

fn quad(p: &Mat, r: &[f64]) -> f64 {
    (0..r.len()).map(|a| r[a] * dot(p.row(a), r)).sum()
}

fn to_dmatrix(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn from_dmatrix(d: &DMatrix<f64>) -> Mat {
    let rows: Vec<Vec<f64>> = (0..d.nrows()).map(|r| d.row(r).iter().copied().collect()).collect();
    Mat::from_rows(&rows).expect("finite matrix")
}

/// Inverse and log-determinant via Cholesky; `None` when not PD.
fn precision(s: &Mat) -> Option<(Mat, f64)> {
    if s.as_slice().iter().any(|v| !v.is_finite()) {
        return None;
    }
    let d = to_dmatrix(s);
    if (&d - d.transpose()).abs().max() > 1e-9 * (1.0 + d.abs().max()) {
        return None;
    }
    let chol = d.cholesky()?;
    let l = chol.l_dirty();
    let logdet = 2.0 * (0..s.rows()).map(|k| l[(k, k)].ln()).sum::<f64>();
    Some((from_dmatrix(&chol.inverse()), logdet))
}

/// Streaming forward recursion; each push returns the prefix log-likelihood.
pub struct ForwardFilter<'a> {
    model: &'a AioHmmModel,
    gauss: Gaussians,
    alpha: Vec<f64>,
    loglik: f64,
    z_prev: Vec<f64>,
    t: usize,
}

impl ForwardFilter<'_> {
    pub fn push(&mut self, x: &[f64], z: &[f64]) -> Result<f64> {
        let m = self.model;
        ensure_dim("x", m.x_dim, x.len())?;
        ensure_dim("z", m.z_dim, z.len())?;
        self.t += 1;
        let le: Vec<f64> = (0..m.states())
            .map(|j| self.gauss.logpdf(m, j, z, x, &self.z_prev))
            .collect();
        let prior = if self.alpha.is_empty() {
            m.pi.clone()
        } else {
            propagate(&self.alpha, &m.transitions(x))
        };
        let (alpha, c, mx) = absorb(&prior, &le, self.t)?;
        self.alpha = alpha;
        self.loglik += c.ln() + mx;
        self.z_prev = z.to_vec();
        Ok(self.loglik)
    }

    pub fn loglik(&self) -> f64 {
        self.loglik
    }

    /// Current filtered state distribution.
    pub fn state_posterior(&self) -> &[f64] {
        &self.alpha
    }
}

fn propagate(alpha: &[f64], trans: &[Vec<f64>]) -> Vec<f64> {
    let s = alpha.len();
    let mut out = vec![0.0; s];
    for i in 0..s {
        for j in 0..s {
            out[j] += alpha[i] * trans[i][j];
        }
    }
    out
}

/// Multiplies a predicted distribution by max-shifted emissions and
/// normalizes. Returns (normalized alpha, scale, shift).
fn absorb(prior: &[f64], le: &[f64], step: usize) -> Result<(Vec<f64>, f64, f64)> {
    let mx = le.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Err(Error::Numerical {
            step,
            reason: "no state assigns finite density to the observation".into(),
        });
    }
    let mut alpha: Vec<f64> = prior.iter().zip(le).map(|(p, l)| p * (l - mx).exp()).collect();
    let c: f64 = alpha.iter().sum();
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Numerical {
            step,
            reason: "zero likelihood under every reachable state".into(),
        });
    }
    alpha.iter_mut().for_each(|a| *a /= c);
    Ok((alpha, c, mx))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStats {
    /// `gamma[t][j] = P(s_t = j | data)`.
    pub gamma: Vec<Vec<f64>>,
    /// `xi[t-1][i][j] = P(s_{t-1} = i, s_t = j | data)` for `t = 1..T-1` (0-based).
    pub xi: Vec<Vec<Vec<f64>>>,
    pub loglik: f64,
}

/// Scaled forward-backward over the input-dependent chain.
pub fn forward_backward(m: &AioHmmModel, xs: &[Vec<f64>], zs: &[Vec<f64>]) -> Result<PosteriorStats> {
    m.check_streams(xs, zs)?;
    let g = Gaussians::new(m)?;
    let s = m.states();
    let len = xs.len();
    let zero = vec![0.0; m.z_dim];
    let trans: Vec<Vec<Vec<f64>>> = xs.iter().map(|x| m.transitions(x)).collect();
    let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(len);
    let mut emis: Vec<Vec<f64>> = Vec::with_capacity(len);
    let mut scale = Vec::with_capacity(len);
    let mut loglik = 0.0;
    for t in 0..len {
        let z_prev = if t == 0 { &zero } else { &zs[t - 1] };
        let le: Vec<f64> = (0..s).map(|j| g.logpdf(m, j, &zs[t], &xs[t], z_prev)).collect();
        let prior = if t == 0 { m.pi.clone() } else { propagate(&alpha[t - 1], &trans[t]) };
        let (a, c, mx) = absorb(&prior, &le, t + 1)?;
        loglik += c.ln() + mx;
        emis.push(le.iter().map(|l| (l - mx).exp()).collect::<Vec<f64>>());
        alpha.push(a);
        scale.push(c);
    }
    let mut beta = vec![vec![1.0; s]; len];
    for t in (0..len - 1).rev() {
        for i in 0..s {
            let mut acc = 0.0;
            for j in 0..s {
                acc += trans[t + 1][i][j] * emis[t + 1][j] * beta[t + 1][j];
            }
            beta[t][i] = acc / scale[t + 1];
        }
    }
    let gamma: Vec<Vec<f64>> = (0..len)
        .map(|t| {
            let mut g: Vec<f64> = (0..s).map(|j| alpha[t][j] * beta[t][j]).collect();
            let n: f64 = g.iter().sum();
            g.iter_mut().for_each(|v| *v /= n);
            g
        })
        .collect();
    let xi = (1..len)
        .map(|t| {
            let mut x = vec![vec![0.0; s]; s];
            let mut n = 0.0;
            for i in 0..s {
                for j in 0..s {
                    let v = alpha[t - 1][i] * trans[t][i][j] * emis[t][j] * beta[t][j];
                    x[i][j] = v;
                    n += v;
                }
            }
            x.iter_mut().flatten().for_each(|v| *v /= n);
            x
        })
        .collect();
    Ok(PosteriorStats { gamma, xi, loglik })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub states: usize,
    pub variant: Variant,
    pub max_iter: usize,
    /// Stop when the relative log-likelihood gain falls below this.
    pub tol: f64,
    /// Alternations between the μ and (a, b) solves per M-step.
    pub inner_rounds: usize,
    pub w_step: f64,
    pub w_iters: usize,
    pub cov_floor: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            states: 3,
            variant: Variant::Aio,
            max_iter: 100,
            tol: 1e-6,
            inner_rounds: 3,
            w_step: 1e-2,
            w_iters: 25,
            cov_floor: 1e-6,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.states == 0 {
            return Err(Error::Config("states must be >= 1".into()));
        }
        if !(self.tol >= 0.0) || !(self.w_step > 0.0) || !(self.cov_floor > 0.0) {
            return Err(Error::Config("tol, w_step and cov_floor must be positive".into()));
        }
        Ok(())
    }
}

fn z_prev_at<'a>(zs: &'a [Vec<f64>], t: usize, zero: &'a [f64]) -> &'a [f64] {
    if t == 0 {
        zero
    } else {
        &zs[t - 1]
    }
}

/// Expected complete-data emission log-likelihood of state `i`.
fn emission_q(data: &[SequenceSample], stats: &[PosteriorStats], i: usize, mu: &[f64], a: &[f64], b: &[f64], sigma: &Mat) -> Option<f64> {
    let (p, logdet) = precision(sigma)?;
    let d = mu.len();
    let zero = vec![0.0; d];
    let norm = -0.5 * (d as f64 * LN_2PI + logdet);
    let mut q = 0.0;
    for (seq, st) in data.iter().zip(stats) {
        for t in 0..seq.len() {
            let g = st.gamma[t][i];
            if g == 0.0 {
                continue;
            }
            let s = 1.0 + dot(a, &seq.xs[t]) + dot(b, z_prev_at(&seq.zs, t, &zero));
            let r: Vec<f64> = seq.zs[t].iter().zip(mu).map(|(z, m)| z - s * m).collect();
            q += g * (norm - 0.5 * quad(&p, &r));
        }
    }
    Some(q)
}

struct EmissionUpdate<'a> {
    data: &'a [SequenceSample],
    stats: &'a [PosteriorStats],
    i: usize,
    learn_a: bool,
    learn_b: bool,
}

impl EmissionUpdate<'_> {
    fn q(&self, mu: &[f64], a: &[f64], b: &[f64], sigma: &Mat) -> f64 {
        emission_q(self.data, self.stats, self.i, mu, a, b, sigma).unwrap_or(f64::NEG_INFINITY)
    }

    /// `μ = Σγ s z / Σγ s²` for fixed (a, b).
    fn solve_mu(&self, a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
        let d = b.len();
        let zero = vec![0.0; d];
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        for (seq, st) in self.data.iter().zip(self.stats) {
            for t in 0..seq.len() {
                let g = st.gamma[t][self.i];
                let s = 1.0 + dot(a, &seq.xs[t]) + dot(b, z_prev_at(&seq.zs, t, &zero));
                num.iter_mut().zip(&seq.zs[t]).for_each(|(n, z)| *n += g * s * z);
                den += g * s * s;
            }
        }
        (den > 1e-12).then(|| num.into_iter().map(|n| n / den).collect())
    }

    /// Weighted least squares for the free coordinates of (a, b) given μ:
    /// `q Σγ u uᵀ θ = Σγ c u` with `q = μᵀPμ`, `c = μᵀP(z − μ)`.
    fn solve_ab(&self, mu: &[f64], a: &[f64], b: &[f64], sigma: &Mat) -> Option<(Vec<f64>, Vec<f64>)> {
        let (p, _) = precision(sigma)?;
        let pmu: Vec<f64> = (0..mu.len()).map(|r| dot(p.row(r), mu)).collect();
        let q = dot(mu, &pmu);
        if !(q > 1e-12) {
            return None;
        }
        let xa = if self.learn_a { a.len() } else { 0 };
        let xb = if self.learn_b { b.len() } else { 0 };
        let dim = xa + xb;
        if dim == 0 {
            return None;
        }
        let zero = vec![0.0; b.len()];
        let mut gram = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);
        let mut u = vec![0.0; dim];
        for (seq, st) in self.data.iter().zip(self.stats) {
            for t in 0..seq.len() {
                let g = st.gamma[t][self.i];
                if g == 0.0 {
                    continue;
                }
                u[..xa].copy_from_slice(&seq.xs[t][..xa]);
                u[xa..].copy_from_slice(&z_prev_at(&seq.zs, t, &zero)[..xb]);
                let c: f64 = seq.zs[t].iter().zip(mu).zip(&pmu).map(|((z, m), pm)| (z - m) * pm).sum();
                for r in 0..dim {
                    rhs[r] += g * c * u[r];
                    for k in 0..dim {
                        gram[(r, k)] += g * q * u[r] * u[k];
                    }
                }
            }
        }
        let theta = match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => {
                let ridge = 1e-8 * (gram.trace() / dim as f64 + 1.0);
                log::warn!("state {}: singular design for (a, b); ridge {ridge:e}", self.i);
                (gram + DMatrix::identity(dim, dim) * ridge).cholesky()?.solve(&rhs)
            }
        };
        let mut a_new = a.to_vec();
        let mut b_new = b.to_vec();
        if self.learn_a {
            a_new.copy_from_slice(&theta.as_slice()[..xa]);
        }
        if self.learn_b {
            b_new.copy_from_slice(&theta.as_slice()[xa..]);
        }
        Some((a_new, b_new))
    }

    /// γ-weighted residual covariance with eigenvalues floored.
    fn solve_sigma(&self, mu: &[f64], a: &[f64], b: &[f64], floor: f64) -> Option<Mat> {
        let d = mu.len();
        let zero = vec![0.0; d];
        let mut acc = DMatrix::<f64>::zeros(d, d);
        let mut wsum = 0.0;
        for (seq, st) in self.data.iter().zip(self.stats) {
            for t in 0..seq.len() {
                let g = st.gamma[t][self.i];
                let s = 1.0 + dot(a, &seq.xs[t]) + dot(b, z_prev_at(&seq.zs, t, &zero));
                let r = DVector::from_iterator(d, seq.zs[t].iter().zip(mu).map(|(z, m)| z - s * m));
                acc += (&r * r.transpose()) * g;
                wsum += g;
            }
        }
        if !(wsum > 1e-12) {
            return None;
        }
        let cov = (&acc + acc.transpose()) * (0.5 / wsum);
        let mut eig = SymmetricEigen::new(cov);
        let mut floored = 0;
        for v in eig.eigenvalues.iter_mut() {
            if *v < floor {
                *v = floor;
                floored += 1;
            }
        }
        if floored == d {
            log::warn!("state {}: every covariance eigenvalue hit the floor", self.i);
        }
        let rebuilt = eig.recompose();
        Some(from_dmatrix(&((&rebuilt + rebuilt.transpose()) * 0.5)))
    }
}

/// Expected transition log-likelihood of source state `i` for weight rows `w`.
fn transition_q(w: &Mat, rows: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    rows.iter()
        .map(|(u, xi)| {
            let logits: Vec<f64> = (0..w.rows()).map(|j| dot(w.row(j), u)).collect();
            let lse = log_sum_exp(&logits);
            xi.iter().zip(&logits).map(|(x, l)| if *x > 0.0 { x * (l - lse) } else { 0.0 }).sum::<f64>()
        })
        .sum()
}

fn transition_grad(w: &Mat, rows: &[(Vec<f64>, Vec<f64>)], cols: usize) -> Mat {
    let mut g = Mat::zeros(w.rows(), w.cols());
    for (u, xi) in rows {
        let logits: Vec<f64> = (0..w.rows()).map(|j| dot(w.row(j), u)).collect();
        let p = softmax_unchecked(&logits);
        let mass: f64 = xi.iter().sum();
        for j in 0..w.rows() {
            let coef = xi[j] - mass * p[j];
            for (gk, uk) in g.row_mut(j)[..cols].iter_mut().zip(u) {
                *gk += coef * uk;
            }
        }
    }
    g
}

/// One generalized M-step. Every sub-update is kept only if it does not
/// lower its part of the expected complete-data log-likelihood.
pub fn m_step(data: &[SequenceSample], stats: &[PosteriorStats], m: &AioHmmModel, cfg: &EmConfig) -> Result<AioHmmModel> {
    ensure_dim("posterior stats", data.len(), stats.len())?;
    let s = m.states();
    let mut out = m.clone();
    let pinned = s == 1;
    for i in 0..s {
        let up = EmissionUpdate {
            data,
            stats,
            i,
            learn_a: m.variant.learns_a() && !pinned,
            learn_b: m.variant.learns_b() && !pinned,
        };
        let (mut mu, mut a, mut b) = (m.mu[i].clone(), m.a[i].clone(), m.b[i].clone());
        let sigma = m.sigma[i].clone();
        let mut q = up.q(&mu, &a, &b, &sigma);
        for _ in 0..cfg.inner_rounds.max(1) {
            if let Some(cand) = up.solve_mu(&a, &b) {
                let qc = up.q(&cand, &a, &b, &sigma);
                if qc >= q {
                    mu = cand;
                    q = qc;
                }
            }
            if up.learn_a || up.learn_b {
                if let Some((ca, cb)) = up.solve_ab(&mu, &a, &b, &sigma) {
                    let qc = up.q(&mu, &ca, &cb, &sigma);
                    if qc >= q {
                        a = ca;
                        b = cb;
                        q = qc;
                    }
                }
            }
        }
        let mut sig = sigma;
        if let Some(cand) = up.solve_sigma(&mu, &a, &b, cfg.cov_floor) {
            if up.q(&mu, &a, &b, &cand) >= q {
                sig = cand;
            }
        }
        out.mu[i] = mu;
        out.a[i] = a;
        out.b[i] = b;
        out.sigma[i] = sig;
    }

    if s > 1 {
        let cols = if m.variant.input_transitions() { m.x_dim + 1 } else { 1 };
        for i in 0..s {
            let rows: Vec<(Vec<f64>, Vec<f64>)> = data
                .iter()
                .zip(stats)
                .flat_map(|(seq, st)| {
                    (1..seq.len()).map(move |t| {
                        let mut u = Vec::with_capacity(m.x_dim + 1);
                        u.push(1.0);
                        u.extend_from_slice(&seq.xs[t]);
                        (u, st.xi[t - 1][i].clone())
                    })
                })
                .collect();
            if rows.is_empty() {
                break;
            }
            let mut w = out.w[i].clone();
            let mut q = transition_q(&w, &rows);
            for _ in 0..cfg.w_iters {
                let g = transition_grad(&w, &rows, cols);
                let mut step = cfg.w_step;
                let mut moved = false;
                for _ in 0..40 {
                    let mut cand = w.clone();
                    cand.as_mut_slice().iter_mut().zip(g.as_slice()).for_each(|(c, gv)| *c += step * gv);
                    let qc = transition_q(&cand, &rows);
                    if qc >= q {
                        moved = qc > q;
                        w = cand;
                        q = qc;
                        break;
                    }
                    step *= 0.5;
                }
                if !moved {
                    break;
                }
            }
            out.w[i] = w;
        }
    }

    let mut pi = vec![0.0; s];
    for st in stats {
        pi.iter_mut().zip(&st.gamma[0]).for_each(|(p, g)| *p += g);
    }
    let total: f64 = pi.iter().sum();
    if total > 0.0 {
        out.pi = pi.into_iter().map(|p| p / total).collect();
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: AioHmmModel,
    /// Total training log-likelihood after each M-step (entry 0 is the
    /// initialization).
    pub trace: Vec<f64>,
    pub converged: bool,
}

impl EmFit {
    /// `iteration,loglik` rows.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iteration,loglik\n");
        for (i, l) in self.trace.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        s
    }
}

/// Soft responsibilities from distances to `S` randomly chosen observations.
fn initial_stats(data: &[SequenceSample], states: usize, rng: &mut Rng) -> Vec<PosteriorStats> {
    let all: Vec<&Vec<f64>> = data.iter().flat_map(|s| s.zs.iter()).collect();
    let centers: Vec<&Vec<f64>> = (0..states).map(|_| all[rng.index(all.len())]).collect();
    let d2 = |z: &[f64], c: &[f64]| z.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let spread = all
        .iter()
        .map(|z| centers.iter().map(|c| d2(z, c)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / all.len() as f64;
    let spread = spread.max(1e-6);
    data.iter()
        .map(|seq| {
            let gamma: Vec<Vec<f64>> = seq
                .zs
                .iter()
                .map(|z| {
                    let logits: Vec<f64> = centers
                        .iter()
                        .map(|c| -d2(z, c) / (2.0 * spread) + 0.1 * rng.normal())
                        .collect();
                    softmax_unchecked(&logits)
                })
                .collect();
            let xi = (1..seq.len())
                .map(|t| {
                    (0..states)
                        .map(|i| (0..states).map(|j| gamma[t - 1][i] * gamma[t][j]).collect())
                        .collect()
                })
                .collect();
            PosteriorStats { gamma, xi, loglik: 0.0 }
        })
        .collect()
}

/// Expectation-maximization on the sequences of a single maneuver.
pub fn fit_em(data: &[SequenceSample], cfg: &EmConfig) -> Result<EmFit> {
    cfg.validate()?;
    let (x_dim, z_dim) = crate::sample::stream_dims(data)?;
    if data.iter().all(|s| s.zs == data[0].zs) && data.len() > 1 {
        log::warn!("all sequences share identical z; covariances will sit on the floor");
    }
    let mut rng = Rng::new(cfg.seed);
    let blank = AioHmmModel::blank(cfg.variant, cfg.states, x_dim, z_dim)?;
    let mut model = m_step(data, &initial_stats(data, cfg.states, &mut rng), &blank, cfg)?;
    let mut trace = Vec::new();
    let mut converged = false;
    for iter in 0..=cfg.max_iter {
        let stats = data
            .iter()
            .map(|s| forward_backward(&model, &s.xs, &s.zs))
            .collect::<Result<Vec<_>>>()?;
        let ll: f64 = stats.iter().map(|s| s.loglik).sum();
        if let Some(&prev) = trace.last() {
            let gain = (ll - prev) / f64::abs(prev).max(1e-300);
            if gain < -1e-8 {
                log::warn!("EM iteration {iter}: log-likelihood fell from {prev} to {ll}");
            }
            if gain < cfg.tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        if iter == cfg.max_iter {
            break;
        }
        model = m_step(data, &stats, &model, cfg)?;
    }
    log::debug!("EM finished after {} evaluations, loglik {:?}", trace.len(), trace.last());
    Ok(EmFit { model, trace, converged })
}

/// Posterior over maneuvers from per-model log-likelihoods.
pub fn posterior_from_logliks(logliks: &[f64], prior: Option<&[f64]>) -> Result<Vec<f64>> {
    if logliks.len() < 2 {
        return Err(Error::Invalid("maneuver inference needs at least two models".into()));
    }
    let scores: Vec<f64> = match prior {
        None => logliks.to_vec(),
        Some(p) => {
            ensure_dim("prior", logliks.len(), p.len())?;
            if p.iter().any(|v| *v < 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid("prior must be a distribution".into()));
            }
            logliks.iter().zip(p).map(|(l, p)| l + p.ln()).collect()
        }
    };
    softmax(&scores)
}

/// `P(M | data) ∝ P(z | x, M) P(M)`, uniform prior by default.
pub fn infer_maneuver(models: &[AioHmmModel], xs: &[Vec<f64>], zs: &[Vec<f64>], prior: Option<&[f64]>) -> Result<Vec<f64>> {
    if models.len() < 2 {
        return Err(Error::Invalid("maneuver inference needs at least two models".into()));
    }
    let lls = models
        .iter()
        .map(|m| m.log_likelihood(xs, zs))
        .collect::<Result<Vec<_>>>()?;
    posterior_from_logliks(&lls, prior)
}

/// One fitted model per event, index-aligned with the event set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManeuverHmms {
    pub events: EventSet,
    pub models: Vec<AioHmmModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<Vec<f64>>,
}

impl ManeuverHmms {
    pub fn posterior(&self, xs: &[Vec<f64>], zs: &[Vec<f64>]) -> Result<Vec<f64>> {
        infer_maneuver(&self.models, xs, zs, self.prior.as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        ensure_dim("models per event", self.events.len(), self.models.len())?;
        for m in &self.models {
            m.validate()?;
            ensure_dim("shared x", self.models[0].x_dim, m.x_dim)?;
            ensure_dim("shared z", self.models[0].z_dim, m.z_dim)?;
        }
        Ok(())
    }
}

/// Mean held-out log-likelihood per step over `folds` splits.
pub fn held_out_loglik(data: &[SequenceSample], cfg: &EmConfig, folds: usize) -> Result<f64> {
    let splits = split_folds(data.len(), folds, cfg.seed)?;
    let mut total = 0.0;
    let mut steps = 0usize;
    for test in &splits {
        let train: Vec<SequenceSample> = (0..data.len())
            .filter(|i| test.binary_search(i).is_err())
            .map(|i| data[i].clone())
            .collect();
        let fit = fit_em(&train, cfg)?;
        for &i in test {
            total += fit.model.log_likelihood(&data[i].xs, &data[i].zs)?;
            steps += data[i].len();
        }
    }
    Ok(total / steps as f64)
}

/// Fits one model per event, picking each model's state count from `grid`
/// by held-out log-likelihood when the class has at least `folds` samples.
/// Also returns the chosen counts and each final fit's trace.
pub fn fit_per_maneuver(
    data: &[SequenceSample],
    events: &EventSet,
    cfg: &EmConfig,
    grid: &[usize],
    folds: usize,
) -> Result<(ManeuverHmms, Vec<usize>, Vec<Vec<f64>>)> {
    let mut models = Vec::with_capacity(events.len());
    let mut chosen = Vec::with_capacity(events.len());
    let mut traces = Vec::with_capacity(events.len());
    for (k, &ev) in events.events().iter().enumerate() {
        let class: Vec<SequenceSample> = data.iter().filter(|s| s.label == ev).cloned().collect();
        if class.is_empty() {
            return Err(Error::Empty("training samples for a maneuver"));
        }
        let mut states = cfg.states;
        if grid.len() > 1 && folds >= 2 && class.len() >= folds {
            let mut best = f64::NEG_INFINITY;
            for &s in grid {
                let c = EmConfig { states: s, seed: cfg.seed.wrapping_add(k as u64), ..cfg.clone() };
                let score = held_out_loglik(&class, &c, folds)?;
                log::debug!("{ev}: S={s} held-out loglik/step {score:.4}");
                if score > best {
                    best = score;
                    states = s;
                }
            }
        } else if let [s] = grid {
            states = *s;
        }
        let c = EmConfig { states, seed: cfg.seed.wrapping_add(k as u64), ..cfg.clone() };
        let fit = fit_em(&class, &c)?;
        models.push(fit.model);
        traces.push(fit.trace);
        chosen.push(states);
    }
    Ok((
        ManeuverHmms {
            events: events.clone(),
            models,
            prior: None,
        },
        chosen,
        traces,
    ))
}

/// Draws a sequence from the generative model (state path, x given).
pub fn sample_sequence(m: &AioHmmModel, xs: &[Vec<f64>], rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    m.validate()?;
    let chols = m
        .sigma
        .iter()
        .map(|s| to_dmatrix(s).cholesky().map(|c| c.l()))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Invalid("covariance not positive definite".into()))?;
    let pick = |p: &[f64], rng: &mut Rng| {
        let u = rng.unit();
        let mut acc = 0.0;
        for (k, v) in p.iter().enumerate() {
            acc += v;
            if u < acc {
                return k;
            }
        }
        p.len() - 1
    };
    let mut zs: Vec<Vec<f64>> = Vec::with_capacity(xs.len());
    let mut state = pick(&m.pi, rng);
    let zero = vec![0.0; m.z_dim];
    for (t, x) in xs.iter().enumerate() {
        if t > 0 {
            state = pick(&m.transition_row(state, x)?, rng);
        }
        let z_prev = if t == 0 { &zero } else { &zs[t - 1] };
        let s = m.scale(state, x, z_prev);
        let e = DVector::from_iterator(m.z_dim, (0..m.z_dim).map(|_| rng.normal()));
        let noise = &chols[state] * e;
        zs.push((0..m.z_dim).map(|d| s * m.mu[state][d] + noise[d]).collect());
    }
    Ok(zs)
}
