//! Hidden semi-Markov model over the concatenated two-agent latent space.
//!
//! One model per interaction class: `K` full-covariance Gaussian components
//! on the joint latent space, an initial distribution, a transition matrix,
//! and per-state Gaussian duration statistics over dwell steps. The forward
//! recursion runs entirely in log space; the per-step state weights `h` are
//! the normalized forward variable and always sum to one.
//!
//! Responsibilities below `H_CLAMP` are clamped to zero and the remainder
//! renormalized before `h` is handed out.

use std::collections::VecDeque;

use crate::gauss::{BlockSplit, MultivariateGaussian};
use crate::numkit::{default_jitter, regularize_spd, Matrix};
use crate::{Error, Result};

/// Responsibility clamp applied to every emitted `h`.
pub const H_CLAMP: f64 = 1e-8;
/// Mass placed on the first state at initialization.
const PI_EPS: f64 = 1e-6;
/// Self-transition mass of the left-to-right initialization.
const SELF_TRANS_INIT: f64 = 0.8;

/// Gaussian dwell-length statistics of one state, in steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DurationStats {
    pub mean: f64,
    pub std: f64,
}

/// EM fitting knobs.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub max_iters: usize,
    /// Absolute log-likelihood change that counts as converged.
    pub tol: f64,
    /// Lower bound on duration standard deviations, in steps.
    pub dur_std_floor: f64,
    /// Duration support bound as a multiple of the longest observed dwell.
    pub d_max_factor: f64,
    /// Total responsibility below which a component is re-seeded.
    pub reseed_threshold: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-5,
            dur_std_floor: 0.5,
            d_max_factor: 2.0,
            reseed_threshold: 1e-6,
        }
    }
}

/// Per-fit diagnostics.
#[derive(Debug, Clone)]
pub struct FitReport {
    /// Total log-likelihood at each EM iteration, evaluated before that
    /// iteration's parameter update.
    pub loglik_history: Vec<f64>,
    /// Components re-seeded after their responsibility mass collapsed.
    pub reseeds: usize,
}

impl FitReport {
    pub fn final_loglik(&self) -> f64 {
        *self.loglik_history.last().unwrap_or(&f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecursionMode {
    /// Plain Markov recursion, no duration model.
    Hmm,
    /// Duration-weighted semi-Markov recursion.
    Hsmm,
}

/// What the forward recursion is conditioned on.
#[derive(Debug, Clone, Copy)]
pub enum ForwardInput<'a> {
    /// Joint-space observations, one row per step.
    Full(&'a Matrix),
    /// Agent-1 latent observations evaluated under the agent-1 marginals.
    MarginalAgent1(&'a Matrix),
    /// No observations; emission terms dropped.
    Dropped { len: usize },
}

#[derive(Debug, Clone)]
pub struct HsmmModel {
    pi: Vec<f64>,
    trans: Matrix,
    components: Vec<MultivariateGaussian>,
    durations: Vec<DurationStats>,
    d_max: usize,
    split: BlockSplit,
}

impl HsmmModel {
    pub fn new(
        pi: Vec<f64>,
        trans: Matrix,
        components: Vec<MultivariateGaussian>,
        durations: Vec<DurationStats>,
        d_max: usize,
        split: BlockSplit,
    ) -> Result<Self> {
        let k = components.len();
        if k == 0 {
            return Err(Error::ShapeMismatch("need at least one component".into()));
        }
        if pi.len() != k || trans.rows() != k || trans.cols() != k || durations.len() != k {
            return Err(Error::ShapeMismatch(format!(
                "inconsistent component count: pi {}, trans {}x{}, durations {}",
                pi.len(),
                trans.rows(),
                trans.cols(),
                durations.len()
            )));
        }
        let dim = components[0].dim();
        if components.iter().any(|c| c.dim() != dim) || split.dim() != dim {
            return Err(Error::ShapeMismatch(
                "component/split dimensions disagree".into(),
            ));
        }
        if (pi.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::ShapeMismatch("pi must sum to 1".into()));
        }
        for i in 0..k {
            let s: f64 = trans.row(i).iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::ShapeMismatch(format!("trans row {i} must sum to 1")));
            }
        }
        if d_max == 0 {
            return Err(Error::ShapeMismatch("d_max must be >= 1".into()));
        }
        if durations.iter().any(|d| !(d.std > 0.0) || !d.mean.is_finite()) {
            return Err(Error::ShapeMismatch("invalid duration statistics".into()));
        }
        Ok(Self {
            pi,
            trans,
            components,
            durations,
            d_max,
            split,
        })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn trans(&self) -> &Matrix {
        &self.trans
    }

    pub fn components(&self) -> &[MultivariateGaussian] {
        &self.components
    }

    pub fn durations(&self) -> &[DurationStats] {
        &self.durations
    }

    pub fn d_max(&self) -> usize {
        self.d_max
    }

    pub fn split(&self) -> &BlockSplit {
        &self.split
    }

    /// Normalized duration log-pmf over `1..=d_max` for every state.
    fn log_duration_table(&self) -> Matrix {
        let k = self.k();
        let mut tab = Matrix::zeros(k, self.d_max);
        for i in 0..k {
            let DurationStats { mean, std } = self.durations[i];
            for d in 1..=self.d_max {
                let z = (d as f64 - mean) / std;
                tab[(i, d - 1)] = -0.5 * z * z;
            }
            let lse = log_sum_exp(tab.row(i));
            for d in 0..self.d_max {
                tab[(i, d)] -= lse;
            }
        }
        tab
    }

    /// Starts an incremental forward recursion.
    pub fn forward_pass(&self, mode: RecursionMode, kind: EmissionKind) -> ForwardPass<'_> {
        let marginals1 = match kind {
            EmissionKind::MarginalAgent1 => self
                .components
                .iter()
                .map(|c| c.marginal(self.split.first()).expect("marginal of valid component"))
                .collect(),
            _ => Vec::new(),
        };
        ForwardPass {
            model: self,
            mode,
            kind,
            marginals1,
            log_dur: self.log_duration_table(),
            log_pi: self.pi.iter().map(|p| p.ln()).collect(),
            log_trans: Matrix::from_fn(self.k(), self.k(), |i, j| self.trans[(i, j)].ln()),
            t: 0,
            alpha_hist: VecDeque::new(),
            cum_hist: VecDeque::from([vec![0.0; self.k()]]),
        }
    }

    /// Runs the forward recursion over a whole sequence and returns the
    /// `T x K` matrix of per-step state weights.
    pub fn forward_variable(&self, input: ForwardInput, mode: RecursionMode) -> Result<Matrix> {
        let (len, obs, kind) = match input {
            ForwardInput::Full(m) => (m.rows(), Some(m), EmissionKind::Full),
            ForwardInput::MarginalAgent1(m) => (m.rows(), Some(m), EmissionKind::MarginalAgent1),
            ForwardInput::Dropped { len } => (len, None, EmissionKind::Dropped),
        };
        if len == 0 {
            return Err(Error::EmptySequence);
        }
        let mut pass = self.forward_pass(mode, kind);
        let mut h = Matrix::zeros(len, self.k());
        for t in 0..len {
            let row = pass.step(obs.map(|m| m.row(t)))?;
            h.row_mut(t).copy_from_slice(&row);
        }
        Ok(h)
    }

    /// Most likely component at step `t` under the duration-aware recursion
    /// with emissions dropped (ties resolve to the lowest index), plus the
    /// per-agent marginals of that component.
    pub fn prior_component(
        &self,
        t: usize,
    ) -> Result<(usize, MultivariateGaussian, MultivariateGaussian)> {
        let idx = *self.prior_schedule(t + 1)?.last().unwrap();
        let m1 = self.components[idx].marginal(self.split.first())?;
        let m2 = self.components[idx].marginal(self.split.second())?;
        Ok((idx, m1, m2))
    }

    /// Argmax component index for every step `0..len` of the observation-free
    /// duration-aware recursion.
    pub fn prior_schedule(&self, len: usize) -> Result<Vec<usize>> {
        let h = self.forward_variable(ForwardInput::Dropped { len }, RecursionMode::Hsmm)?;
        Ok((0..len).map(|t| argmax_ties_low(h.row(t))).collect())
    }

    /// Starts an incremental mixture-regression pass that maps agent-1
    /// latent observations to agent-2 latent estimates.
    pub fn gmr_pass(&self) -> GmrPass<'_> {
        GmrPass {
            fwd: self.forward_pass(RecursionMode::Hsmm, EmissionKind::MarginalAgent1),
        }
    }

    /// Conditions the model on an agent-1 latent sequence (rows) and
    /// returns the agent-2 latent sequence with per-step moment-matched
    /// covariances. Causal: step `t` depends only on rows `0..=t`.
    pub fn gmr_condition(&self, z1: &Matrix) -> Result<GmrSequence> {
        if z1.cols() != self.split.first().len() {
            return Err(Error::DimensionMismatch {
                expected: self.split.first().len(),
                got: z1.cols(),
                context: "gmr agent-1 latent dims",
            });
        }
        if z1.rows() == 0 {
            return Err(Error::EmptySequence);
        }
        let d2 = self.split.second().len();
        let mut means = Matrix::zeros(z1.rows(), d2);
        let mut covs = Vec::with_capacity(z1.rows());
        let mut pass = self.gmr_pass();
        for t in 0..z1.rows() {
            let (mean, cov) = pass.step(z1.row(t))?;
            means.row_mut(t).copy_from_slice(&mean);
            covs.push(cov);
        }
        Ok(GmrSequence { means, covs })
    }
}

/// Output of [`HsmmModel::gmr_condition`].
#[derive(Debug, Clone)]
pub struct GmrSequence {
    /// `T x d2` conditional means.
    pub means: Matrix,
    /// Per-step moment-matched mixture covariance.
    pub covs: Vec<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmissionKind {
    Full,
    MarginalAgent1,
    Dropped,
}

/// Incremental forward recursion. Keeps just enough history (the last
/// `d_max` log-alpha rows and cumulative emission sums) to run indefinitely
/// on a stream.
pub struct ForwardPass<'a> {
    model: &'a HsmmModel,
    mode: RecursionMode,
    kind: EmissionKind,
    marginals1: Vec<MultivariateGaussian>,
    log_dur: Matrix,
    log_pi: Vec<f64>,
    log_trans: Matrix,
    t: usize,
    /// log-alpha rows for steps `t - alpha_hist.len() .. t`.
    alpha_hist: VecDeque<Vec<f64>>,
    /// Cumulative per-state log-emission sums for steps ending at
    /// `t - 1 - i` counting from the back; front entry is the zero row for
    /// the virtual step before the sequence.
    cum_hist: VecDeque<Vec<f64>>,
}

impl ForwardPass<'_> {
    fn log_emission(&self, obs: Option<&[f64]>) -> Result<Vec<f64>> {
        let k = self.model.k();
        match self.kind {
            EmissionKind::Dropped => Ok(vec![0.0; k]),
            EmissionKind::Full => {
                let x = obs.ok_or(Error::EmptySequence)?;
                self.model
                    .components
                    .iter()
                    .map(|c| c.logpdf(x))
                    .collect()
            }
            EmissionKind::MarginalAgent1 => {
                let x = obs.ok_or(Error::EmptySequence)?;
                self.marginals1.iter().map(|c| c.logpdf(x)).collect()
            }
        }
    }

    /// Advances one step and returns the clamped, normalized state weights.
    pub fn step(&mut self, obs: Option<&[f64]>) -> Result<Vec<f64>> {
        let k = self.model.k();
        let lb = self.log_emission(obs)?;
        let t = self.t;

        // cumulative emission sums (needed by the duration recursion)
        let prev_cum = self.cum_hist.back().unwrap().clone();
        let cum: Vec<f64> = prev_cum.iter().zip(&lb).map(|(a, b)| a + b).collect();
        self.cum_hist.push_back(cum);

        let la = match self.mode {
            RecursionMode::Hmm => {
                let mut la = vec![0.0; k];
                if t == 0 {
                    for i in 0..k {
                        la[i] = self.log_pi[i] + lb[i];
                    }
                } else {
                    let prev = self.alpha_hist.back().unwrap();
                    let mut buf = vec![0.0; k];
                    for (i, lai) in la.iter_mut().enumerate() {
                        for (kk, b) in buf.iter_mut().enumerate() {
                            *b = prev[kk] + self.log_trans[(kk, i)];
                        }
                        *lai = log_sum_exp(&buf) + lb[i];
                    }
                }
                la
            }
            RecursionMode::Hsmm => {
                // alpha_i(t) = sum over segment lengths d of
                //   entry(t-d+1, i) * p_i(d) * prod of emissions over the segment
                // entry(0, i) = pi_i, entry(s, i) = sum_k alpha_k(s-1) T_ki
                let d_max = self.model.d_max;
                let hist = self.alpha_hist.len();
                let mut la = vec![0.0; k];
                let mut terms = Vec::with_capacity(d_max);
                let mut buf = vec![0.0; k];
                let cum_t = self.cum_hist.back().unwrap().clone();
                for (i, lai) in la.iter_mut().enumerate() {
                    terms.clear();
                    let d_hi = d_max.min(t + 1);
                    for d in 1..=d_hi {
                        let ldur = self.log_dur[(i, d - 1)];
                        // segment emission sum: cum(t) - cum(t-d)
                        let back = self.cum_hist.len() - 1 - d;
                        let seg = cum_t[i] - self.cum_hist[back][i];
                        let entry = if d == t + 1 {
                            self.log_pi[i]
                        } else {
                            // alpha row for step t-d is hist entries back by d
                            let row = &self.alpha_hist[hist - d];
                            for (kk, b) in buf.iter_mut().enumerate() {
                                *b = row[kk] + self.log_trans[(kk, i)];
                            }
                            log_sum_exp(&buf)
                        };
                        terms.push(entry + ldur + seg);
                    }
                    *lai = log_sum_exp(&terms);
                }
                la
            }
        };

        let h = clamp_normalize(&softmax(&la));
        self.alpha_hist.push_back(la);
        let keep = match self.mode {
            RecursionMode::Hmm => 1,
            RecursionMode::Hsmm => self.model.d_max,
        };
        while self.alpha_hist.len() > keep {
            self.alpha_hist.pop_front();
        }
        while self.cum_hist.len() > keep + 1 {
            self.cum_hist.pop_front();
        }
        self.t += 1;
        Ok(h)
    }
}

/// Incremental Gaussian mixture regression over the forward weights.
pub struct GmrPass<'a> {
    fwd: ForwardPass<'a>,
}

impl GmrPass<'_> {
    /// Consumes one agent-1 latent row, returns the agent-2 conditional
    /// mean and moment-matched covariance.
    pub fn step(&mut self, z1: &[f64]) -> Result<(Vec<f64>, Matrix)> {
        let model = self.fwd.model;
        let d2 = model.split.second().len();
        let h = self.fwd.step(Some(z1))?;
        let mut mean = vec![0.0; d2];
        let mut second = Matrix::zeros(d2, d2); // sum h_k (C_k + m_k m_k^T)
        for (kk, &hk) in h.iter().enumerate() {
            if hk == 0.0 {
                continue;
            }
            let cond = model.components[kk].condition(&model.split, z1)?;
            let m = cond.mean();
            let c = cond.covariance();
            for (mi, &mk) in mean.iter_mut().zip(m) {
                *mi += hk * mk;
            }
            for i in 0..d2 {
                for j in 0..d2 {
                    second[(i, j)] += hk * (c[(i, j)] + m[i] * m[j]);
                }
            }
        }
        let mut cov = second;
        for i in 0..d2 {
            for j in 0..d2 {
                cov[(i, j)] -= mean[i] * mean[j];
            }
        }
        Ok((mean, cov))
    }
}

/// Seeds a model by splitting every demo into `K` equal temporal slices and
/// fitting component `i` to the pooled `i`-th slices. The initial state
/// distribution is dominated by state 0 and transitions are left-to-right
/// with self-transition mass.
pub fn init_temporal_split(demos: &[Matrix], k: usize, split: BlockSplit) -> Result<HsmmModel> {
    if demos.is_empty() {
        return Err(Error::InsufficientData("no demonstrations".into()));
    }
    if k == 0 {
        return Err(Error::InsufficientData("K must be >= 1".into()));
    }
    let dim = demos[0].cols();
    for d in demos {
        if d.cols() != dim {
            return Err(Error::ShapeMismatch("demo dimensions disagree".into()));
        }
        if d.rows() < k {
            return Err(Error::InsufficientData(format!(
                "demo length {} shorter than K = {k}",
                d.rows()
            )));
        }
    }
    let mut components = Vec::with_capacity(k);
    for i in 0..k {
        let slice = pooled_slice(demos, i, k);
        if slice.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "temporal slice {i} has {} points, need at least 2",
                slice.len()
            )));
        }
        components.push(fit_gaussian(&slice, dim)?);
    }

    let pi = if k == 1 {
        vec![1.0]
    } else {
        let mut pi = vec![PI_EPS / (k - 1) as f64; k];
        pi[0] = 1.0 - PI_EPS;
        pi
    };
    let mut trans = Matrix::zeros(k, k);
    for i in 0..k {
        if i + 1 < k {
            trans[(i, i)] = SELF_TRANS_INIT;
            trans[(i, i + 1)] = 1.0 - SELF_TRANS_INIT;
        } else {
            trans[(i, i)] = 1.0;
        }
    }

    let mean_len = demos.iter().map(|d| d.rows() as f64).sum::<f64>() / demos.len() as f64;
    let opts = FitOptions::default();
    let dur_mean = mean_len / k as f64;
    let dur_std = (mean_len / (2 * k) as f64).max(opts.dur_std_floor);
    let durations = vec![
        DurationStats {
            mean: dur_mean,
            std: dur_std,
        };
        k
    ];
    let d_max = (2.0 * dur_mean).ceil().max(1.0) as usize;
    HsmmModel::new(pi, trans, components, durations, d_max, split)
}

/// Rows of the `i`-th of `k` equal temporal slices, pooled over all demos.
fn pooled_slice(demos: &[Matrix], i: usize, k: usize) -> Vec<Vec<f64>> {
    let mut rows = Vec::new();
    for d in demos {
        let t = d.rows();
        let lo = i * t / k;
        let hi = (i + 1) * t / k;
        for r in lo..hi {
            rows.push(d.row(r).to_vec());
        }
    }
    rows
}

fn fit_gaussian(rows: &[Vec<f64>], dim: usize) -> Result<MultivariateGaussian> {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = Matrix::zeros(dim, dim);
    for r in rows {
        for i in 0..dim {
            let di = r[i] - mean[i];
            for j in 0..=i {
                cov[(i, j)] += di * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..dim {
        for j in 0..=i {
            cov[(i, j)] /= n;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    let cov = regularize_spd(&cov, default_jitter(&cov));
    MultivariateGaussian::from_mean_cov_regularized(mean, &cov)
}

/// Baum-Welch over the Markov parameters (initial distribution, transition
/// matrix, full-covariance emissions), followed by duration statistics
/// estimated from the most-likely state segmentation of each demo. The
/// duration model stays out of the E-step.
pub fn fit_em(
    model: &HsmmModel,
    demos: &[Matrix],
    opts: &FitOptions,
) -> Result<(HsmmModel, FitReport)> {
    if demos.is_empty() {
        return Err(Error::InsufficientData("no demonstrations".into()));
    }
    let k = model.k();
    let dim = model.dim();
    for d in demos {
        if d.cols() != dim {
            return Err(Error::ShapeMismatch("demo dimensions disagree".into()));
        }
        if d.rows() == 0 {
            return Err(Error::EmptySequence);
        }
    }

    let mut cur = model.clone();
    let mut history = Vec::new();
    let mut reseeds = 0usize;
    for _iter in 0..opts.max_iters.max(1) {
        let stats = e_step(&cur, demos)?;
        history.push(stats.loglik);
        let converged = history.len() >= 2
            && (history[history.len() - 1] - history[history.len() - 2]).abs() < opts.tol;
        if converged {
            break;
        }
        reseeds += m_step(&mut cur, demos, &stats, opts)?;
    }

    // durations from most-likely-path dwell lengths
    let mut dwells: Vec<Vec<f64>> = vec![Vec::new(); k];
    for d in demos {
        let path = viterbi(&cur, d)?;
        let mut run_state = path[0];
        let mut run_len = 1usize;
        for &s in &path[1..] {
            if s == run_state {
                run_len += 1;
            } else {
                dwells[run_state].push(run_len as f64);
                run_state = s;
                run_len = 1;
            }
        }
        dwells[run_state].push(run_len as f64);
    }
    let mut durations = cur.durations.clone();
    let mut max_dwell = 1.0f64;
    for i in 0..k {
        if dwells[i].is_empty() {
            continue;
        }
        let n = dwells[i].len() as f64;
        let mean = dwells[i].iter().sum::<f64>() / n;
        let var = dwells[i].iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
        durations[i] = DurationStats {
            mean,
            std: var.sqrt().max(opts.dur_std_floor),
        };
        max_dwell = max_dwell.max(dwells[i].iter().cloned().fold(0.0, f64::max));
    }
    let d_max = (opts.d_max_factor * max_dwell).ceil().max(1.0) as usize;

    let fitted = HsmmModel::new(
        cur.pi,
        cur.trans,
        cur.components,
        durations,
        d_max,
        cur.split,
    )?;
    Ok((
        fitted,
        FitReport {
            loglik_history: history,
            reseeds,
        },
    ))
}

struct EStats {
    loglik: f64,
    /// Sum of gamma_0 over demos, length K.
    gamma0: Vec<f64>,
    /// Sum of xi over demos and steps, K x K.
    xi: Matrix,
    /// Total responsibility per state.
    gamma_sum: Vec<f64>,
    /// Responsibility-weighted observation sums, K x dim.
    obs_sum: Matrix,
    /// Responsibility-weighted scatter per state.
    scatter: Vec<Matrix>,
}

fn e_step(model: &HsmmModel, demos: &[Matrix]) -> Result<EStats> {
    let k = model.k();
    let dim = model.dim();
    let log_pi: Vec<f64> = model.pi.iter().map(|p| p.ln()).collect();
    let log_trans = Matrix::from_fn(k, k, |i, j| model.trans[(i, j)].ln());

    let mut stats = EStats {
        loglik: 0.0,
        gamma0: vec![0.0; k],
        xi: Matrix::zeros(k, k),
        gamma_sum: vec![0.0; k],
        obs_sum: Matrix::zeros(k, dim),
        scatter: vec![Matrix::zeros(dim, dim); k],
    };

    for demo in demos {
        let t_len = demo.rows();
        let mut logb = Matrix::zeros(t_len, k);
        for t in 0..t_len {
            for i in 0..k {
                logb[(t, i)] = model.components[i].logpdf(demo.row(t))?;
            }
        }
        // forward
        let mut la = Matrix::zeros(t_len, k);
        let mut buf = vec![0.0; k];
        for i in 0..k {
            la[(0, i)] = log_pi[i] + logb[(0, i)];
        }
        for t in 1..t_len {
            for i in 0..k {
                for kk in 0..k {
                    buf[kk] = la[(t - 1, kk)] + log_trans[(kk, i)];
                }
                la[(t, i)] = log_sum_exp(&buf) + logb[(t, i)];
            }
        }
        let loglik = log_sum_exp(la.row(t_len - 1));
        stats.loglik += loglik;
        // backward
        let mut lbeta = Matrix::zeros(t_len, k);
        for t in (0..t_len.saturating_sub(1)).rev() {
            for i in 0..k {
                for kk in 0..k {
                    buf[kk] = log_trans[(i, kk)] + logb[(t + 1, kk)] + lbeta[(t + 1, kk)];
                }
                lbeta[(t, i)] = log_sum_exp(&buf);
            }
        }
        // gamma and xi accumulation
        for t in 0..t_len {
            let x = demo.row(t);
            for i in 0..k {
                let g = (la[(t, i)] + lbeta[(t, i)] - loglik).exp();
                if t == 0 {
                    stats.gamma0[i] += g;
                }
                stats.gamma_sum[i] += g;
                for (j, xv) in x.iter().enumerate() {
                    stats.obs_sum[(i, j)] += g * xv;
                }
                let sc = &mut stats.scatter[i];
                for a in 0..dim {
                    let ga = g * x[a];
                    for b in 0..=a {
                        sc[(a, b)] += ga * x[b];
                    }
                }
            }
        }
        for t in 0..t_len.saturating_sub(1) {
            for i in 0..k {
                for j in 0..k {
                    let v = (la[(t, i)] + log_trans[(i, j)] + logb[(t + 1, j)]
                        + lbeta[(t + 1, j)]
                        - loglik)
                        .exp();
                    stats.xi[(i, j)] += v;
                }
            }
        }
    }
    Ok(stats)
}

/// Returns the number of re-seeded components.
fn m_step(
    model: &mut HsmmModel,
    demos: &[Matrix],
    stats: &EStats,
    opts: &FitOptions,
) -> Result<usize> {
    let k = model.k();
    let dim = model.dim();
    let n_demos = demos.len() as f64;

    let mut pi: Vec<f64> = stats.gamma0.iter().map(|g| g / n_demos).collect();
    let pi_sum: f64 = pi.iter().sum();
    for p in &mut pi {
        *p /= pi_sum;
    }

    let mut trans = model.trans.clone();
    for i in 0..k {
        let row_sum: f64 = (0..k).map(|j| stats.xi[(i, j)]).sum();
        if row_sum > 0.0 {
            for j in 0..k {
                trans[(i, j)] = stats.xi[(i, j)] / row_sum;
            }
        }
        // states with no outgoing mass keep their previous row
    }

    let mut reseeds = 0usize;
    let mut components = Vec::with_capacity(k);
    for i in 0..k {
        if stats.gamma_sum[i] < opts.reseed_threshold {
            // collapsed component: re-seed from the highest-variance slice
            reseeds += 1;
            let slice = highest_variance_slice(demos, k);
            components.push(fit_gaussian(&slice, dim)?);
            continue;
        }
        let g = stats.gamma_sum[i];
        let mean: Vec<f64> = (0..dim).map(|j| stats.obs_sum[(i, j)] / g).collect();
        let mut cov = Matrix::zeros(dim, dim);
        for a in 0..dim {
            for b in 0..=a {
                let v = stats.scatter[i][(a, b)] / g - mean[a] * mean[b];
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        let cov = regularize_spd(&cov, default_jitter(&cov));
        components.push(MultivariateGaussian::from_mean_cov_regularized(mean, &cov)?);
    }

    model.pi = pi;
    model.trans = trans;
    model.components = components;
    Ok(reseeds)
}

fn highest_variance_slice(demos: &[Matrix], k: usize) -> Vec<Vec<f64>> {
    let mut best = (0usize, f64::NEG_INFINITY);
    for i in 0..k {
        let rows = pooled_slice(demos, i, k);
        if rows.len() < 2 {
            continue;
        }
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mut var_trace = 0.0;
        for j in 0..dim {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            var_trace += rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        }
        if var_trace > best.1 {
            best = (i, var_trace);
        }
    }
    pooled_slice(demos, best.0, k)
}

/// Most likely state path (internal; duration statistics estimation only).
fn viterbi(model: &HsmmModel, demo: &Matrix) -> Result<Vec<usize>> {
    let k = model.k();
    let t_len = demo.rows();
    let log_pi: Vec<f64> = model.pi.iter().map(|p| p.ln()).collect();
    let log_trans = Matrix::from_fn(k, k, |i, j| model.trans[(i, j)].ln());
    let mut delta = Matrix::zeros(t_len, k);
    let mut back = vec![vec![0usize; k]; t_len];
    for i in 0..k {
        delta[(0, i)] = log_pi[i] + model.components[i].logpdf(demo.row(0))?;
    }
    for t in 1..t_len {
        for i in 0..k {
            let mut best = (0usize, f64::NEG_INFINITY);
            for kk in 0..k {
                let v = delta[(t - 1, kk)] + log_trans[(kk, i)];
                if v > best.1 {
                    best = (kk, v);
                }
            }
            back[t][i] = best.0;
            delta[(t, i)] = best.1 + model.components[i].logpdf(demo.row(t))?;
        }
    }
    let mut path = vec![0usize; t_len];
    path[t_len - 1] = argmax_ties_low(delta.row(t_len - 1));
    for t in (1..t_len).rev() {
        path[t - 1] = back[t][path[t]];
    }
    Ok(path)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax(la: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(la);
    la.iter().map(|x| (x - lse).exp()).collect()
}

fn clamp_normalize(h: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = h
        .iter()
        .map(|&v| if v < H_CLAMP { 0.0 } else { v })
        .collect();
    let s: f64 = out.iter().sum();
    if s > 0.0 {
        for v in &mut out {
            *v /= s;
        }
    } else {
        out.copy_from_slice(h);
    }
    out
}

fn argmax_ties_low(xs: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::RngState;

    fn toy_split(d1: usize, d2: usize) -> BlockSplit {
        BlockSplit::contiguous(d1, d2)
    }

    fn random_model(k: usize, d1: usize, d2: usize, rng: &mut RngState) -> HsmmModel {
        let dim = d1 + d2;
        let mut pi: Vec<f64> = (0..k).map(|_| rng.uniform(0.2, 1.0)).collect();
        let s: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= s);
        let mut trans = Matrix::from_fn(k, k, |_, _| rng.uniform(0.1, 1.0));
        for i in 0..k {
            let s: f64 = trans.row(i).iter().sum();
            for j in 0..k {
                trans[(i, j)] /= s;
            }
        }
        let components = (0..k)
            .map(|_| {
                let a = Matrix::from_fn(dim, dim, |_, _| rng.normal());
                let mut cov = a.matmul_transa(&a);
                for i in 0..dim {
                    cov[(i, i)] += 0.5;
                }
                let mean: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
                MultivariateGaussian::from_mean_cov(mean, &cov).unwrap()
            })
            .collect();
        let durations = (0..k)
            .map(|_| DurationStats {
                mean: rng.uniform(1.0, 4.0),
                std: rng.uniform(0.5, 2.0),
            })
            .collect();
        HsmmModel::new(pi, trans, components, durations, 4, toy_split(d1, d2)).unwrap()
    }

    /// Straight linear-space transcription of the implemented recursion
    /// (explicit loops, no log tricks) for small T.
    fn naive_forward(
        model: &HsmmModel,
        logb: &Matrix, // T x K log emissions (zeros when dropped)
        mode: RecursionMode,
    ) -> Matrix {
        let k = model.k();
        let t_len = logb.rows();
        let b = Matrix::from_fn(t_len, k, |t, i| logb[(t, i)].exp());
        // duration pmf normalized over support
        let mut dur = Matrix::zeros(k, model.d_max());
        for i in 0..k {
            let DurationStats { mean, std } = model.durations()[i];
            let mut s = 0.0;
            for d in 1..=model.d_max() {
                let z = (d as f64 - mean) / std;
                let v = (-0.5 * z * z).exp();
                dur[(i, d - 1)] = v;
                s += v;
            }
            for d in 0..model.d_max() {
                dur[(i, d)] /= s;
            }
        }
        let mut alpha = Matrix::zeros(t_len, k);
        for t in 0..t_len {
            for i in 0..k {
                match mode {
                    RecursionMode::Hmm => {
                        if t == 0 {
                            alpha[(t, i)] = model.pi()[i] * b[(t, i)];
                        } else {
                            let mut s = 0.0;
                            for kk in 0..k {
                                s += alpha[(t - 1, kk)] * model.trans()[(kk, i)];
                            }
                            alpha[(t, i)] = s * b[(t, i)];
                        }
                    }
                    RecursionMode::Hsmm => {
                        let mut total = 0.0;
                        for d in 1..=model.d_max().min(t + 1) {
                            let entry = if d == t + 1 {
                                model.pi()[i]
                            } else {
                                let mut s = 0.0;
                                for kk in 0..k {
                                    s += alpha[(t - d, kk)] * model.trans()[(kk, i)];
                                }
                                s
                            };
                            let mut emit = 1.0;
                            for tau in t + 1 - d..=t {
                                emit *= b[(tau, i)];
                            }
                            total += entry * dur[(i, d - 1)] * emit;
                        }
                        alpha[(t, i)] = total;
                    }
                }
            }
        }
        Matrix::from_fn(t_len, k, |t, i| {
            let s: f64 = alpha.row(t).iter().sum();
            let h: Vec<f64> = alpha.row(t).iter().map(|a| a / s).collect();
            clamp_normalize(&h)[i]
        })
    }

    #[test]
    fn init_slices_one_demo() {
        let demo = Matrix::from_fn(10, 2, |i, j| (i * 2 + j) as f64);
        let m = init_temporal_split(&[demo.clone()], 2, toy_split(1, 1)).unwrap();
        // component 0 from steps 0..5, component 1 from 5..10
        let mean0: Vec<f64> = (0..2)
            .map(|j| (0..5).map(|t| demo[(t, j)]).sum::<f64>() / 5.0)
            .collect();
        let mean1: Vec<f64> = (0..2)
            .map(|j| (5..10).map(|t| demo[(t, j)]).sum::<f64>() / 5.0)
            .collect();
        for j in 0..2 {
            assert!((m.components()[0].mean()[j] - mean0[j]).abs() < 1e-12);
            assert!((m.components()[1].mean()[j] - mean1[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn init_constant_demo_floor_covariance() {
        let demo = Matrix::from_fn(8, 2, |_, _| 3.5);
        let m = init_temporal_split(&[demo], 2, toy_split(1, 1)).unwrap();
        for c in m.components() {
            assert_eq!(c.mean(), &[3.5, 3.5]);
            let cov = c.covariance();
            // zero scatter leaves exactly the absolute jitter floor
            assert!((cov[(0, 0)] - crate::numkit::DEFAULT_EPS_ABS).abs() < 1e-20);
            assert!(cov[(0, 1)].abs() < 1e-20);
        }
    }

    #[test]
    fn init_duration_mean_from_mixed_lengths() {
        let mut rng = RngState::new(1);
        let demos: Vec<Matrix> = [40usize, 60]
            .iter()
            .map(|&t| Matrix::from_fn(t, 2, |_, _| rng.normal()))
            .collect();
        let m = init_temporal_split(&demos, 10, toy_split(1, 1)).unwrap();
        for d in m.durations() {
            assert!((d.mean - 5.0).abs() < 1e-12);
            assert!((d.std - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn init_insufficient_data() {
        let demo = Matrix::from_fn(2, 2, |_, _| 0.0);
        assert!(matches!(
            init_temporal_split(&[demo], 2, toy_split(1, 1)),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn forward_single_state_all_modes() {
        let mut rng = RngState::new(2);
        let m = random_model(1, 1, 1, &mut rng);
        let obs = Matrix::from_fn(5, 2, |_, _| rng.normal());
        for mode in [RecursionMode::Hmm, RecursionMode::Hsmm] {
            for h in [
                m.forward_variable(ForwardInput::Full(&obs), mode).unwrap(),
                m.forward_variable(ForwardInput::Dropped { len: 5 }, mode).unwrap(),
            ] {
                for t in 0..5 {
                    assert_eq!(h[(t, 0)], 1.0);
                }
            }
        }
    }

    #[test]
    fn forward_absorbing_state() {
        let mut rng = RngState::new(3);
        let mut m = random_model(3, 1, 1, &mut rng);
        m.pi = vec![1.0, 0.0, 0.0];
        m.trans = Matrix::identity(3);
        let h = m
            .forward_variable(ForwardInput::Dropped { len: 6 }, RecursionMode::Hmm)
            .unwrap();
        for t in 0..6 {
            assert_eq!(h[(t, 0)], 1.0);
            assert_eq!(h[(t, 1)], 0.0);
        }
    }

    #[test]
    fn forward_matches_naive_reference() {
        let mut rng = RngState::new(4);
        for trial in 0..10 {
            let m = random_model(3, 1, 1, &mut rng);
            let obs = Matrix::from_fn(6, 2, |_, _| rng.normal());
            let mut logb_full = Matrix::zeros(6, 3);
            let mut logb_m1 = Matrix::zeros(6, 3);
            let marg: Vec<MultivariateGaussian> = m
                .components()
                .iter()
                .map(|c| c.marginal(m.split().first()).unwrap())
                .collect();
            for t in 0..6 {
                for i in 0..3 {
                    logb_full[(t, i)] = m.components()[i].logpdf(obs.row(t)).unwrap();
                    logb_m1[(t, i)] = marg[i].logpdf(&obs.row(t)[..1]).unwrap();
                }
            }
            let obs1 = Matrix::from_fn(6, 1, |t, _| obs[(t, 0)]);
            for mode in [RecursionMode::Hmm, RecursionMode::Hsmm] {
                let cases = [
                    (m.forward_variable(ForwardInput::Full(&obs), mode).unwrap(), &logb_full),
                    (m.forward_variable(ForwardInput::MarginalAgent1(&obs1), mode).unwrap(), &logb_m1),
                    (
                        m.forward_variable(ForwardInput::Dropped { len: 6 }, mode).unwrap(),
                        &Matrix::zeros(6, 3),
                    ),
                ];
                for (got, logb) in cases {
                    let want = naive_forward(&m, logb, mode);
                    assert!(
                        got.max_abs_diff(&want) < 1e-10,
                        "trial {trial} mode {mode:?}: diff {}",
                        got.max_abs_diff(&want)
                    );
                }
            }
        }
    }

    #[test]
    fn hsmm_with_unit_durations_reduces_to_hmm() {
        let mut rng = RngState::new(5);
        let mut m = random_model(3, 1, 1, &mut rng);
        m.durations = vec![DurationStats { mean: 1.0, std: 0.05 }; 3];
        m.d_max = 6;
        let obs = Matrix::from_fn(8, 2, |_, _| rng.normal());
        let hmm = m
            .forward_variable(ForwardInput::Full(&obs), RecursionMode::Hmm)
            .unwrap();
        let hsmm = m
            .forward_variable(ForwardInput::Full(&obs), RecursionMode::Hsmm)
            .unwrap();
        assert!(hmm.max_abs_diff(&hsmm) < 1e-8);
    }

    #[test]
    fn forward_rows_sum_to_one() {
        let mut rng = RngState::new(6);
        let m = random_model(4, 2, 2, &mut rng);
        let obs = Matrix::from_fn(20, 4, |_, _| rng.normal() * 2.0);
        for mode in [RecursionMode::Hmm, RecursionMode::Hsmm] {
            let h = m.forward_variable(ForwardInput::Full(&obs), mode).unwrap();
            for t in 0..20 {
                let s: f64 = h.row(t).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        let mut rng = RngState::new(7);
        let m = random_model(2, 1, 1, &mut rng);
        assert!(matches!(
            m.forward_variable(ForwardInput::Dropped { len: 0 }, RecursionMode::Hmm),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn prior_component_single_state() {
        let mut rng = RngState::new(8);
        let m = random_model(1, 1, 1, &mut rng);
        for t in 0..5 {
            let (idx, m1, m2) = m.prior_component(t).unwrap();
            assert_eq!(idx, 0);
            assert_eq!(m1.dim(), 1);
            assert_eq!(m2.dim(), 1);
        }
    }

    #[test]
    fn prior_component_tracks_duration_means() {
        // strict left-right chain, dwell ~5 steps per state
        let mut rng = RngState::new(9);
        let mut m = random_model(2, 1, 1, &mut rng);
        m.pi = vec![1.0, 0.0];
        m.trans = Matrix::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]);
        m.durations = vec![DurationStats { mean: 5.0, std: 1.0 }; 2];
        m.d_max = 10;
        assert_eq!(m.prior_component(2).unwrap().0, 0);
        assert_eq!(m.prior_component(7).unwrap().0, 1);
    }

    #[test]
    fn prior_component_tie_takes_lowest_index() {
        let mut rng = RngState::new(10);
        let mut m = random_model(2, 1, 1, &mut rng);
        m.pi = vec![0.5, 0.5];
        m.trans = Matrix::new(2, 2, vec![0.5, 0.5, 0.5, 0.5]);
        m.durations = vec![DurationStats { mean: 2.0, std: 1.0 }; 2];
        let (idx, _, _) = m.prior_component(3).unwrap();
        assert_eq!(idx, 0);
    }

    #[test]
    fn em_single_state_collapses_to_sample_moments() {
        let mut rng = RngState::new(11);
        let demo = Matrix::from_fn(50, 2, |_, _| rng.normal() + 1.0);
        let init = init_temporal_split(&[demo.clone()], 1, toy_split(1, 1)).unwrap();
        let (m, _) = fit_em(&init, &[demo.clone()], &FitOptions::default()).unwrap();
        assert_eq!(m.trans()[(0, 0)], 1.0);
        let n = 50.0;
        let mean: Vec<f64> = (0..2)
            .map(|j| (0..50).map(|t| demo[(t, j)]).sum::<f64>() / n)
            .collect();
        for j in 0..2 {
            assert!((m.components()[0].mean()[j] - mean[j]).abs() < 1e-9);
        }
        let mut cov = Matrix::zeros(2, 2);
        for t in 0..50 {
            for a in 0..2 {
                for b in 0..2 {
                    cov[(a, b)] += (demo[(t, a)] - mean[a]) * (demo[(t, b)] - mean[b]) / n;
                }
            }
        }
        // within jitter of the sample covariance
        assert!(m.components()[0].covariance().max_abs_diff(&cov) < 1e-5);
    }

    /// Samples a trajectory from a planted model (test-side generator).
    fn sample_left_right(
        means: &[Vec<f64>],
        dwell: usize,
        t_len: usize,
        noise: f64,
        rng: &mut RngState,
    ) -> Matrix {
        let dim = means[0].len();
        Matrix::from_fn(t_len, dim, |t, j| {
            let state = (t / dwell).min(means.len() - 1);
            means[state][j] + noise * rng.normal()
        })
    }

    #[test]
    fn em_recovers_planted_two_state_model() {
        let mut rng = RngState::new(12);
        let means = vec![vec![-2.0, 0.0], vec![2.0, 1.0]];
        let demos: Vec<Matrix> = (0..20)
            .map(|_| sample_left_right(&means, 100, 200, 0.3, &mut rng))
            .collect();
        let init = init_temporal_split(&demos, 2, toy_split(1, 1)).unwrap();
        let (m, report) = fit_em(&init, &demos, &FitOptions::default()).unwrap();
        for w in report.loglik_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-6, "log-likelihood decreased: {w:?}");
        }
        for (c, truth) in m.components().iter().zip(&means) {
            for (a, b) in c.mean().iter().zip(truth) {
                assert!((a - b).abs() < 0.1, "mean {a} vs planted {b}");
            }
        }
        // dwell statistics reflect the planted segment length
        assert!((m.durations()[0].mean - 100.0).abs() < 10.0);
    }

    #[test]
    fn em_fixed_point_on_refit() {
        let mut rng = RngState::new(13);
        let demos: Vec<Matrix> = (0..4)
            .map(|_| Matrix::from_fn(30, 2, |t, j| (t as f64 / 10.0) + 0.1 * rng.normal() + j as f64))
            .collect();
        let opts = FitOptions::default();
        let init = init_temporal_split(&demos, 2, toy_split(1, 1)).unwrap();
        let (m, _) = fit_em(&init, &demos, &opts).unwrap();
        let (_, report2) = fit_em(&m, &demos, &opts).unwrap();
        assert_eq!(report2.loglik_history.len(), 2);
        let d = report2.loglik_history[1] - report2.loglik_history[0];
        assert!(d.abs() < opts.tol, "refit moved log-likelihood by {d}");
    }

    #[test]
    fn gmr_independent_blocks_ignores_input() {
        let mean = vec![0.5, -0.5, 3.0, 4.0];
        let cov = Matrix::identity(4);
        let comp = MultivariateGaussian::from_mean_cov(mean, &cov).unwrap();
        let m = HsmmModel::new(
            vec![1.0],
            Matrix::identity(1),
            vec![comp],
            vec![DurationStats { mean: 3.0, std: 1.0 }],
            5,
            toy_split(2, 2),
        )
        .unwrap();
        let mut rng = RngState::new(14);
        let z1 = Matrix::from_fn(6, 2, |_, _| rng.normal() * 3.0);
        let out = m.gmr_condition(&z1).unwrap();
        for t in 0..6 {
            assert!((out.means[(t, 0)] - 3.0).abs() < 1e-12);
            assert!((out.means[(t, 1)] - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gmr_at_component_mean_returns_mu2() {
        let mut rng = RngState::new(15);
        let m = random_model(1, 2, 2, &mut rng);
        let mu = m.components()[0].mean().to_vec();
        let z1 = Matrix::from_rows(&vec![mu[..2].to_vec(); 4]);
        let out = m.gmr_condition(&z1).unwrap();
        for t in 0..4 {
            assert!((out.means[(t, 0)] - mu[2]).abs() < 1e-10);
            assert!((out.means[(t, 1)] - mu[3]).abs() < 1e-10);
        }
    }

    /// Gauss-Jordan inverse, oracle-side only.
    fn invert_dense(m: &Matrix) -> Matrix {
        let n = m.rows();
        let mut a = m.clone();
        let mut inv = Matrix::identity(n);
        for col in 0..n {
            let mut piv = col;
            for r in col + 1..n {
                if a[(r, col)].abs() > a[(piv, col)].abs() {
                    piv = r;
                }
            }
            for j in 0..n {
                let tmp = a[(col, j)];
                a[(col, j)] = a[(piv, j)];
                a[(piv, j)] = tmp;
                let tmp = inv[(col, j)];
                inv[(col, j)] = inv[(piv, j)];
                inv[(piv, j)] = tmp;
            }
            let p = a[(col, col)];
            for j in 0..n {
                a[(col, j)] /= p;
                inv[(col, j)] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = a[(r, col)];
                    for j in 0..n {
                        a[(r, j)] -= f * a[(col, j)];
                        inv[(r, j)] -= f * inv[(col, j)];
                    }
                }
            }
        }
        inv
    }

    /// Independent straight-line mixture regression with dense inverses
    /// (shares no code with the implementation).
    fn gmr_oracle(model: &HsmmModel, z1: &Matrix) -> Matrix {
        let k = model.k();
        let d1 = model.split().first().len();
        let d2 = model.split().second().len();
        // linear-space forward with agent-1 marginal emissions, duration-aware
        let t_len = z1.rows();
        let mut logb = Matrix::zeros(t_len, k);
        for t in 0..t_len {
            for i in 0..k {
                let marg = model.components()[i].marginal(model.split().first()).unwrap();
                logb[(t, i)] = marg.logpdf(z1.row(t)).unwrap();
            }
        }
        let h = naive_forward(model, &logb, RecursionMode::Hsmm);
        let mut out = Matrix::zeros(t_len, d2);
        for t in 0..t_len {
            for i in 0..k {
                let cov = model.components()[i].covariance();
                let s11 = cov.sub_square(model.split().first());
                let s21 = cov.sub_block(model.split().second(), model.split().first());
                let inv11 = invert_dense(&s11);
                let gain = s21.matmul(&inv11);
                let mu = model.components()[i].mean();
                let diff: Vec<f64> = (0..d1)
                    .map(|j| z1[(t, j)] - mu[model.split().first()[j]])
                    .collect();
                let adj = gain.matvec(&diff);
                for j in 0..d2 {
                    out[(t, j)] += h[(t, i)] * (mu[model.split().second()[j]] + adj[j]);
                }
            }
        }
        out
    }

    #[test]
    fn gmr_matches_independent_oracle() {
        let mut rng = RngState::new(16);
        for _ in 0..5 {
            let m = random_model(2, 2, 2, &mut rng);
            let z1 = Matrix::from_fn(5, 2, |_, _| rng.normal());
            let got = m.gmr_condition(&z1).unwrap();
            let want = gmr_oracle(&m, &z1);
            assert!(got.means.max_abs_diff(&want) < 1e-9);
        }
    }

    #[test]
    fn gmr_equivariant_under_component_permutation() {
        let mut rng = RngState::new(17);
        let m = random_model(3, 2, 2, &mut rng);
        let perm = [2usize, 0, 1];
        let pm = HsmmModel::new(
            perm.iter().map(|&i| m.pi()[i]).collect(),
            Matrix::from_fn(3, 3, |i, j| m.trans()[(perm[i], perm[j])]),
            perm.iter().map(|&i| m.components()[i].clone()).collect(),
            perm.iter().map(|&i| m.durations()[i]).collect(),
            m.d_max(),
            m.split().clone(),
        )
        .unwrap();
        let z1 = Matrix::from_fn(8, 2, |_, _| rng.normal());
        let a = m.gmr_condition(&z1).unwrap();
        let b = pm.gmr_condition(&z1).unwrap();
        assert!(a.means.max_abs_diff(&b.means) < 1e-9);
        for (ca, cb) in a.covs.iter().zip(&b.covs) {
            assert!(ca.max_abs_diff(cb) < 1e-9);
        }
    }

    #[test]
    fn gmr_covariances_are_spd() {
        let mut rng = RngState::new(18);
        let m = random_model(3, 2, 3, &mut rng);
        let z1 = Matrix::from_fn(10, 2, |_, _| rng.normal() * 2.0);
        let out = m.gmr_condition(&z1).unwrap();
        for c in &out.covs {
            assert!(crate::numkit::cholesky(c).is_ok());
        }
    }

    #[test]
    fn gmr_rejects_wrong_width() {
        let mut rng = RngState::new(19);
        let m = random_model(2, 2, 2, &mut rng);
        let z1 = Matrix::zeros(3, 3);
        assert!(matches!(
            m.gmr_condition(&z1),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
