//! Orchestration: the alternating training loop (one epoch of VAE updates
//! against fixed per-class mixture priors, then a fresh refit of every
//! class's semi-Markov model on the new encodings), online conditional
//! generation, and checkpoint persistence.
//!
//! # Checkpoint layout
//!
//! Little-endian binary, all floats as raw `f64` bits, bit-exact round
//! trips:
//!
//! ```text
//! magic    8  bytes  "DYADMDL\0"
//! version  u32
//! confhash 32 bytes  sha256 of the config block
//! created  u64       unix seconds; writers default to 0 so identical
//!                    training runs produce identical files
//! config   length-prefixed block (see serialize_config)
//! vae      2 agents x 4 networks (layer dims, activation tags, weights)
//! hsmms    count, then per class: label, pi, transitions, components
//!          (mean + Cholesky factor), duration stats, d_max, block split
//! checksum 32 bytes  sha256 of everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::dataio::InteractionDataset;
use crate::gauss::{BlockSplit, MultivariateGaussian};
use crate::hsmm::{fit_em, init_temporal_split, FitOptions, GmrPass, HsmmModel};
use crate::nnet::{AdamW, Dense, DenseNet, OptimizerState};
use crate::numkit::{Matrix, RngState};
use crate::vae::{VaeAgent, VaePair};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"DYADMDL\0";
const FORMAT_VERSION: u32 = 1;

/// Optional early stopping on a held-out fraction of demonstrations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStop {
    /// Fraction of each class's demos held out of training.
    pub holdout_frac: f64,
    /// Epochs without improvement before stopping.
    pub patience: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            holdout_frac: 0.1,
            patience: 20,
        }
    }
}

/// Full hyperparameter record; sufficient to re-run training
/// deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub components: usize,
    pub window: usize,
    pub hidden: Vec<usize>,
    pub kl_scale: f64,
    pub n_samples: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub em_iters: usize,
    pub em_tol: f64,
    /// After each refit, widen every component covariance by this fraction
    /// of the class's global latent variance (per dimension). Keeps the
    /// prior's precision bounded even when early-epoch encodings collapse,
    /// which would otherwise let the KL term overwhelm reconstruction.
    pub prior_reg: f64,
    /// Refit the mixtures from sampled latents instead of posterior means.
    pub hsmm_from_samples: bool,
    /// Warm-start each refit from the previous epoch's model instead of a
    /// fresh temporal split.
    pub warm_start_hsmm: bool,
    /// Initialize agent 2's hidden layers from agent 1 before training.
    pub transfer_hidden: bool,
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 5,
            components: 10,
            window: 40,
            hidden: vec![250, 150],
            kl_scale: 1e-3,
            n_samples: 10,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            epochs: 200,
            seed: 0,
            em_iters: 10,
            em_tol: 1e-4,
            prior_reg: 1e-2,
            hsmm_from_samples: false,
            warm_start_hsmm: false,
            transfer_hidden: false,
            early_stop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0
            || self.components == 0
            || self.window == 0
            || self.n_samples == 0
            || self.epochs == 0
            || self.em_iters == 0
            || self.hidden.is_empty()
        {
            return Err(Error::InvalidConfig(
                "latent_dim, components, window, n_samples, epochs, em_iters and hidden must be nonzero".into(),
            ));
        }
        if !(self.kl_scale >= 0.0) || !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(
                "kl_scale/weight_decay must be >= 0 and learning_rate > 0".into(),
            ));
        }
        if !(self.prior_reg >= 0.0) {
            return Err(Error::InvalidConfig("prior_reg must be >= 0".into()));
        }
        if let Some(es) = &self.early_stop {
            if !(es.holdout_frac > 0.0 && es.holdout_frac < 1.0) {
                return Err(Error::InvalidConfig("holdout_frac must be in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

/// Trained bundle: the VAE pair plus one semi-Markov model per class.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub vae: VaePair,
    pub hsmms: BTreeMap<String, HsmmModel>,
    pub config: TrainConfig,
    /// Unix seconds stamped into the checkpoint header; 0 by default so
    /// equal-seed runs stay byte-identical.
    pub created_unix: u64,
}

/// One per-epoch, per-class log record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub class: String,
    /// Mean reconstruction loss over the class's demos (both agents).
    pub recon: f64,
    /// Mean unscaled KL over the class's demos (both agents).
    pub kl: f64,
    /// Log-likelihood of the class's refit at the end of the epoch.
    pub hsmm_loglik: f64,
    pub wall_secs: f64,
    /// Hash of the prior parameters used for every gradient step of this
    /// epoch (0 means the standard-normal bootstrap prior).
    pub prior_sig: u64,
}

/// Append-only training log.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Epoch at which early stopping triggered, if it did.
    pub stopped_early_at: Option<usize>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,class,recon,kl,hsmm_loglik,wall_secs,prior_sig\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, r.class, r.recon, r.kl, r.hsmm_loglik, r.wall_secs, r.prior_sig
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Per-class prior lookup for one epoch: the per-agent marginals of every
/// component plus the argmax schedule per demo length. Built once per epoch
/// so every gradient step of the epoch sees the same frozen parameters.
struct PriorTable {
    marginals: Vec<(MultivariateGaussian, MultivariateGaussian)>,
    schedules: BTreeMap<usize, Vec<usize>>,
}

impl PriorTable {
    /// `reg` widens each marginal's covariance diagonal by that fraction of
    /// the mixture-implied global variance (mean within-component variance
    /// plus between-component mean spread). This bounds the prior's
    /// precision during training; the stored model itself is never touched,
    /// so conditioning stays an exact regression on the fitted components.
    fn build(hsmm: &HsmmModel, lengths: &[usize], reg: f64) -> Result<Self> {
        let dim = hsmm.dim();
        let k = hsmm.k() as f64;
        let mut floor = vec![0.0; dim];
        if reg > 0.0 {
            let mut mom = vec![0.0; dim];
            for c in hsmm.components() {
                for (m, v) in mom.iter_mut().zip(c.mean()) {
                    *m += v / k;
                }
            }
            for c in hsmm.components() {
                let cov = c.covariance();
                for j in 0..dim {
                    let d = c.mean()[j] - mom[j];
                    floor[j] += (cov[(j, j)] + d * d) / k;
                }
            }
            for f in &mut floor {
                *f = reg * *f + 1e-10;
            }
        }
        let widen = |g: MultivariateGaussian, dims: &[usize]| -> Result<MultivariateGaussian> {
            if reg == 0.0 {
                return Ok(g);
            }
            let mut cov = g.covariance();
            for (jj, &dj) in dims.iter().enumerate() {
                cov[(jj, jj)] += floor[dj];
            }
            MultivariateGaussian::from_mean_cov_regularized(g.mean().to_vec(), &cov)
        };
        let marginals = hsmm
            .components()
            .iter()
            .map(|c| {
                Ok((
                    widen(c.marginal(hsmm.split().first())?, hsmm.split().first())?,
                    widen(c.marginal(hsmm.split().second())?, hsmm.split().second())?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut schedules = BTreeMap::new();
        for &len in lengths {
            schedules.entry(len).or_insert(hsmm.prior_schedule(len)?);
        }
        Ok(Self {
            marginals,
            schedules,
        })
    }

    fn priors(&self, len: usize, agent: usize) -> Vec<MultivariateGaussian> {
        let schedule = &self.schedules[&len];
        schedule
            .iter()
            .map(|&i| {
                let (m1, m2) = &self.marginals[i];
                if agent == 0 { m1.clone() } else { m2.clone() }
            })
            .collect()
    }

    fn signature(&self) -> u64 {
        let mut h = Fnv::new();
        for (m1, m2) in &self.marginals {
            for g in [m1, m2] {
                for v in g.mean() {
                    h.write_f64(*v);
                }
                for v in g.chol().data() {
                    h.write_f64(*v);
                }
            }
        }
        h.finish()
    }
}

/// Hash of the prior parameters a class's model would contribute next
/// epoch under the given `prior_reg`. Matches [`EpochRecord::prior_sig`].
pub fn prior_signature(hsmm: &HsmmModel, prior_reg: f64) -> Result<u64> {
    let lengths: [usize; 0] = [];
    Ok(PriorTable::build(hsmm, &lengths, prior_reg)?.signature())
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf29ce484222325)
    }
    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }
    fn write_f64(&mut self, v: f64) {
        self.write(&v.to_le_bytes());
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

fn rng_tag(epoch: usize, demo: usize, lane: usize) -> u64 {
    0x9000_0000_0000_0000 ^ ((epoch as u64) << 36) ^ ((demo as u64) << 4) ^ lane as u64
}

struct AgentLane {
    agent: VaeAgent,
    opt: OptimizerState,
}

impl AgentLane {
    fn step(
        &mut self,
        batch: &Matrix,
        priors: &[MultivariateGaussian],
        n_samples: usize,
        kl_scale: f64,
        rng: &mut RngState,
    ) -> Result<crate::vae::ElboBreakdown> {
        let (breakdown, grads) = self
            .agent
            .elbo_loss(batch, priors, n_samples, kl_scale, rng)?;
        let mut params = self.agent.params_vec();
        self.opt.update(&mut params, &grads.flatten())?;
        self.agent.set_params_vec(&params);
        Ok(breakdown)
    }
}

/// Trains the VAE pair and per-class semi-Markov models.
///
/// Each epoch runs one gradient step per demonstration per agent (the
/// demo's windows form the batch), with per-window priors looked up from
/// the previous epoch's per-class models (standard normal on the first
/// epoch), then re-encodes everything with posterior means and refits each
/// class's model from a fresh temporal-split initialization.
pub fn train(dataset: &InteractionDataset, config: &TrainConfig) -> Result<(TrainedModel, TrainLog)> {
    config.validate()?;
    if dataset.demos.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.window != config.window {
        return Err(Error::InvalidConfig(format!(
            "dataset windowed at {} but config.window is {}",
            dataset.window, config.window
        )));
    }
    let d1 = dataset.demos[0].agent1.cols();
    let d2 = dataset.demos[0].agent2.cols();
    for d in &dataset.demos {
        if d.agent1.cols() != d1 || d.agent2.cols() != d2 {
            return Err(Error::ShapeMismatch(
                "inconsistent window dimensions across demos".into(),
            ));
        }
        if d.agent1.rows() != d.agent2.rows() || d.agent1.rows() == 0 {
            return Err(Error::ShapeMismatch(
                "agents must share a nonzero number of windows".into(),
            ));
        }
        if !d.agent1.is_finite() || !d.agent2.is_finite() {
            return Err(Error::ShapeMismatch("non-finite values in dataset".into()));
        }
    }
    let classes = dataset.classes();
    let root = RngState::new(config.seed);

    // holdout selection (per class, seeded shuffle)
    let mut is_holdout = vec![false; dataset.demos.len()];
    if let Some(es) = &config.early_stop {
        let mut hrng = root.derive(2);
        for class in &classes {
            let mut idx: Vec<usize> = dataset
                .demos
                .iter()
                .enumerate()
                .filter(|(_, d)| &d.class_label == class)
                .map(|(i, _)| i)
                .collect();
            // Fisher-Yates
            for i in (1..idx.len()).rev() {
                let j = hrng.index(i + 1);
                idx.swap(i, j);
            }
            let n = idx.len();
            let take = ((es.holdout_frac * n as f64).round() as usize).clamp(0, n.saturating_sub(1));
            for &i in idx.iter().take(take) {
                is_holdout[i] = true;
            }
        }
    }
    for class in &classes {
        let any_train = dataset
            .demos
            .iter()
            .enumerate()
            .any(|(i, d)| &d.class_label == class && !is_holdout[i]);
        if !any_train {
            return Err(Error::EmptyClass(class.clone()));
        }
    }

    let mut rng_init = root.derive(1);
    let mut pair = VaePair::new(d1, d2, &config.hidden, config.latent_dim, &mut rng_init);
    if config.transfer_hidden {
        pair.transfer_hidden_to_agent2();
    }
    let hyper = AdamW {
        learning_rate: config.learning_rate,
        weight_decay: config.weight_decay,
        ..AdamW::default()
    };
    let mut lane1 = AgentLane {
        opt: OptimizerState::new(pair.agent1.param_count(), hyper),
        agent: pair.agent1,
    };
    let mut lane2 = AgentLane {
        opt: OptimizerState::new(pair.agent2.param_count(), hyper),
        agent: pair.agent2,
    };

    let em_opts = FitOptions {
        max_iters: config.em_iters,
        tol: config.em_tol,
        ..FitOptions::default()
    };
    let latent_split = BlockSplit::contiguous(config.latent_dim, config.latent_dim);

    let mut hsmms: BTreeMap<String, HsmmModel> = BTreeMap::new();
    let mut log = TrainLog::default();
    let mut best_holdout = f64::INFINITY;
    let mut bad_epochs = 0usize;

    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();

        // freeze this epoch's priors
        let mut tables: BTreeMap<String, Option<PriorTable>> = BTreeMap::new();
        for class in &classes {
            let lengths: Vec<usize> = dataset
                .demos
                .iter()
                .filter(|d| &d.class_label == class)
                .map(|d| d.len())
                .collect();
            let table = match hsmms.get(class) {
                Some(h) => Some(PriorTable::build(h, &lengths, config.prior_reg)?),
                None => None,
            };
            tables.insert(class.clone(), table);
        }

        let mut sums: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
        for (di, demo) in dataset.demos.iter().enumerate() {
            if is_holdout[di] {
                continue;
            }
            let table = tables[&demo.class_label].as_ref();
            let len = demo.len();
            let std_prior =
                || vec![MultivariateGaussian::standard(config.latent_dim); len];
            let p1 = table.map_or_else(std_prior, |t| t.priors(len, 0));
            let p2 = table.map_or_else(std_prior, |t| t.priors(len, 1));
            let mut rng1 = root.derive(rng_tag(epoch, di, 0));
            let mut rng2 = root.derive(rng_tag(epoch, di, 1));
            // disjoint parameters: the two agents may update concurrently
            let (r1, r2) = rayon::join(
                || lane1.step(&demo.agent1, &p1, config.n_samples, config.kl_scale, &mut rng1),
                || lane2.step(&demo.agent2, &p2, config.n_samples, config.kl_scale, &mut rng2),
            );
            let (b1, b2) = (r1?, r2?);
            if !b1.total.is_finite() || !b2.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    class: demo.class_label.clone(),
                });
            }
            let e = sums.entry(demo.class_label.clone()).or_insert((0.0, 0.0, 0));
            e.0 += b1.recon + b2.recon;
            e.1 += b1.kl + b2.kl;
            e.2 += 1;
        }
        if !lane1.agent.all_finite() || !lane2.agent.all_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                class: "<parameters>".into(),
            });
        }

        // refit every class on fresh encodings (training demos only)
        let mut logliks: BTreeMap<String, f64> = BTreeMap::new();
        for class in &classes {
            let mut zdemos = Vec::new();
            for (di, demo) in dataset.demos.iter().enumerate() {
                if is_holdout[di] || &demo.class_label != class {
                    continue;
                }
                let z = encode_joint_latents(
                    &lane1.agent,
                    &lane2.agent,
                    demo,
                    config.hsmm_from_samples,
                    &root,
                    epoch,
                    di,
                )?;
                zdemos.push(z);
            }
            let init = match (config.warm_start_hsmm, hsmms.get(class)) {
                (true, Some(prev)) => prev.clone(),
                _ => init_temporal_split(&zdemos, config.components, latent_split.clone())?,
            };
            let (fitted, report) = fit_em(&init, &zdemos, &em_opts)?;
            logliks.insert(class.clone(), report.final_loglik());
            hsmms.insert(class.clone(), fitted);
        }

        let wall = epoch_start.elapsed().as_secs_f64();
        for class in &classes {
            let (recon_sum, kl_sum, n) = sums.get(class).copied().unwrap_or((0.0, 0.0, 0));
            let n = n.max(1) as f64;
            log.records.push(EpochRecord {
                epoch,
                class: class.clone(),
                recon: recon_sum / n,
                kl: kl_sum / n,
                hsmm_loglik: logliks[class],
                wall_secs: wall,
                prior_sig: tables[class].as_ref().map_or(0, |t| t.signature()),
            });
        }

        // optional early stop on held-out loss under the fresh priors
        if let Some(es) = &config.early_stop {
            let mut tables_now: BTreeMap<String, PriorTable> = BTreeMap::new();
            for class in &classes {
                let lengths: Vec<usize> = dataset
                    .demos
                    .iter()
                    .enumerate()
                    .filter(|(i, d)| is_holdout[*i] && &d.class_label == class)
                    .map(|(_, d)| d.len())
                    .collect();
                if !lengths.is_empty() {
                    tables_now.insert(
                        class.clone(),
                        PriorTable::build(&hsmms[class], &lengths, config.prior_reg)?,
                    );
                }
            }
            let mut total = 0.0;
            let mut any = false;
            let mut hrng = root.derive(0xE500_0000 ^ epoch as u64);
            for (di, demo) in dataset.demos.iter().enumerate() {
                if !is_holdout[di] {
                    continue;
                }
                any = true;
                let t = &tables_now[&demo.class_label];
                let p1 = t.priors(demo.len(), 0);
                let p2 = t.priors(demo.len(), 1);
                let (b1, _) = lane1.agent.elbo_loss(
                    &demo.agent1,
                    &p1,
                    config.n_samples,
                    config.kl_scale,
                    &mut hrng,
                )?;
                let (b2, _) = lane2.agent.elbo_loss(
                    &demo.agent2,
                    &p2,
                    config.n_samples,
                    config.kl_scale,
                    &mut hrng,
                )?;
                total += b1.total + b2.total;
            }
            if any {
                if total < best_holdout {
                    best_holdout = total;
                    bad_epochs = 0;
                } else {
                    bad_epochs += 1;
                    if bad_epochs > es.patience {
                        log.stopped_early_at = Some(epoch);
                        break;
                    }
                }
            }
        }
    }

    let model = TrainedModel {
        vae: VaePair {
            agent1: lane1.agent,
            agent2: lane2.agent,
        },
        hsmms,
        config: config.clone(),
        created_unix: 0,
    };
    Ok((model, log))
}

/// Encodes one demo into the joint latent sequence `[z1 | z2]` per window,
/// using posterior means (deterministic) or one posterior sample per window
/// when configured.
fn encode_joint_latents(
    agent1: &VaeAgent,
    agent2: &VaeAgent,
    demo: &crate::dataio::WindowedDemo,
    from_samples: bool,
    root: &RngState,
    epoch: usize,
    demo_idx: usize,
) -> Result<Matrix> {
    let (z1, z2) = if from_samples {
        let mut rng1 = root.derive(rng_tag(epoch, demo_idx, 2));
        let mut rng2 = root.derive(rng_tag(epoch, demo_idx, 3));
        let sample_all = |posts: Vec<MultivariateGaussian>, rng: &mut RngState| {
            let rows: Vec<Vec<f64>> = posts.iter().map(|p| p.sample(rng)).collect();
            Matrix::from_rows(&rows)
        };
        (
            sample_all(agent1.encode(&demo.agent1)?, &mut rng1),
            sample_all(agent2.encode(&demo.agent2)?, &mut rng2),
        )
    } else {
        (
            agent1.encode_means(&demo.agent1)?,
            agent2.encode_means(&demo.agent2)?,
        )
    };
    let l = z1.cols();
    Ok(Matrix::from_fn(z1.rows(), 2 * l, |t, j| {
        if j < l {
            z1[(t, j)]
        } else {
            z2[(t, j - l)]
        }
    }))
}

impl TrainedModel {
    pub fn classes(&self) -> Vec<String> {
        self.hsmms.keys().cloned().collect()
    }

    /// Starts a streaming conditioner for one class.
    pub fn conditioner(&self, class: &str) -> Result<Conditioner<'_>> {
        let hsmm = self.hsmms.get(class).ok_or_else(|| Error::UnknownClass {
            class: class.to_string(),
            known: self.classes(),
        })?;
        Ok(Conditioner {
            model: self,
            gmr: hsmm.gmr_pass(),
        })
    }

    /// Short human-readable description (config plus per-class summaries).
    pub fn summary(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let c = &self.config;
        writeln!(
            s,
            "latent_dim={} components={} window={} hidden={:?} kl_scale={} n_samples={} lr={} weight_decay={} epochs={} seed={}",
            c.latent_dim, c.components, c.window, c.hidden, c.kl_scale, c.n_samples,
            c.learning_rate, c.weight_decay, c.epochs, c.seed
        )
        .unwrap();
        writeln!(
            s,
            "agent1 input_dim={} agent2 input_dim={}",
            self.vae.agent1.input_dim, self.vae.agent2.input_dim
        )
        .unwrap();
        for (class, h) in &self.hsmms {
            let dur: Vec<String> = h
                .durations()
                .iter()
                .map(|d| format!("{:.1}±{:.1}", d.mean, d.std))
                .collect();
            writeln!(
                s,
                "class {class}: K={} dim={} d_max={} durations=[{}]",
                h.k(),
                h.dim(),
                h.d_max(),
                dur.join(", ")
            )
            .unwrap();
        }
        s
    }
}

/// Streaming conditional generator: push agent-1 windows, receive agent-2
/// window predictions one at a time. Causal by construction.
pub struct Conditioner<'a> {
    model: &'a TrainedModel,
    gmr: GmrPass<'a>,
}

impl Conditioner<'_> {
    /// Consumes one agent-1 window and returns the predicted agent-2
    /// window.
    pub fn push(&mut self, window: &[f64]) -> Result<Vec<f64>> {
        let agent1 = &self.model.vae.agent1;
        if window.len() != agent1.input_dim {
            return Err(Error::DimensionMismatch {
                expected: agent1.input_dim,
                got: window.len(),
                context: "conditioner input window",
            });
        }
        let x = Matrix::from_rows(&[window.to_vec()]);
        let z1 = agent1.encode_means(&x)?;
        let (z2, _) = self.gmr.step(z1.row(0))?;
        let out = self.model.vae.agent2.decode(&Matrix::from_rows(&[z2]))?;
        Ok(out.row(0).to_vec())
    }
}

/// Conditions the model on observed agent-1 windows and returns predicted
/// agent-2 windows. Implemented as a fold over the streaming conditioner,
/// so batch and streaming outputs are identical. Deterministic: encoding
/// uses posterior means, no sampling.
pub fn condition(model: &TrainedModel, class: &str, x1_windows: &Matrix) -> Result<Matrix> {
    if x1_windows.rows() == 0 {
        return Err(Error::EmptySequence);
    }
    let mut cond = model.conditioner(class)?;
    let d2 = model.vae.agent2.input_dim;
    let mut out = Matrix::zeros(x1_windows.rows(), d2);
    for t in 0..x1_windows.rows() {
        let pred = cond.push(x1_windows.row(t))?;
        out.row_mut(t).copy_from_slice(&pred);
    }
    Ok(out)
}

// --- checkpoint serialization ---

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for v in vs {
            self.f64(*v);
        }
    }
    fn string(&mut self, s: &str) {
        let b = s.as_bytes();
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptChecksum);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > self.buf.len() / 8 {
            return Err(Error::CorruptChecksum);
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptChecksum)
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn serialize_config(c: &TrainConfig) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u32(c.latent_dim as u32);
    w.u32(c.components as u32);
    w.u32(c.window as u32);
    w.u32(c.n_samples as u32);
    w.u32(c.epochs as u32);
    w.u32(c.em_iters as u32);
    w.u64(c.seed);
    w.f64(c.kl_scale);
    w.f64(c.learning_rate);
    w.f64(c.weight_decay);
    w.f64(c.em_tol);
    w.f64(c.prior_reg);
    w.u32(c.hidden.len() as u32);
    for h in &c.hidden {
        w.u32(*h as u32);
    }
    w.u8(c.hsmm_from_samples as u8);
    w.u8(c.warm_start_hsmm as u8);
    w.u8(c.transfer_hidden as u8);
    match &c.early_stop {
        Some(es) => {
            w.u8(1);
            w.f64(es.holdout_frac);
            w.u32(es.patience as u32);
        }
        None => w.u8(0),
    }
    w.buf
}

fn deserialize_config(r: &mut ByteReader) -> Result<TrainConfig> {
    let latent_dim = r.u32()? as usize;
    let components = r.u32()? as usize;
    let window = r.u32()? as usize;
    let n_samples = r.u32()? as usize;
    let epochs = r.u32()? as usize;
    let em_iters = r.u32()? as usize;
    let seed = r.u64()?;
    let kl_scale = r.f64()?;
    let learning_rate = r.f64()?;
    let weight_decay = r.f64()?;
    let em_tol = r.f64()?;
    let prior_reg = r.f64()?;
    let nh = r.u32()? as usize;
    let hidden = (0..nh).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
    let hsmm_from_samples = r.u8()? != 0;
    let warm_start_hsmm = r.u8()? != 0;
    let transfer_hidden = r.u8()? != 0;
    let early_stop = if r.u8()? != 0 {
        Some(EarlyStop {
            holdout_frac: r.f64()?,
            patience: r.u32()? as usize,
        })
    } else {
        None
    };
    Ok(TrainConfig {
        latent_dim,
        components,
        window,
        hidden,
        kl_scale,
        n_samples,
        learning_rate,
        weight_decay,
        epochs,
        seed,
        em_iters,
        em_tol,
        prior_reg,
        hsmm_from_samples,
        warm_start_hsmm,
        transfer_hidden,
        early_stop,
    })
}

fn write_net(w: &mut ByteWriter, net: &DenseNet) {
    w.u32(net.layers.len() as u32);
    w.f64(net.leaky_slope);
    for l in &net.layers {
        w.u32(l.w.rows() as u32);
        w.u32(l.w.cols() as u32);
        w.u8(match l.act {
            crate::nnet::Activation::Linear => 0,
            crate::nnet::Activation::LeakyRelu => 1,
        });
        w.f64s(l.w.data());
        w.f64s(&l.b);
    }
}

fn read_net(r: &mut ByteReader) -> Result<DenseNet> {
    let n = r.u32()? as usize;
    let leaky_slope = r.f64()?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let act = match r.u8()? {
            0 => crate::nnet::Activation::Linear,
            1 => crate::nnet::Activation::LeakyRelu,
            _ => return Err(Error::CorruptChecksum),
        };
        let wdata = r.f64s()?;
        if wdata.len() != rows * cols {
            return Err(Error::CorruptChecksum);
        }
        let b = r.f64s()?;
        if b.len() != rows {
            return Err(Error::CorruptChecksum);
        }
        layers.push(Dense {
            w: Matrix::new(rows, cols, wdata),
            b,
            act,
        });
    }
    Ok(DenseNet {
        layers,
        leaky_slope,
    })
}

fn write_agent(w: &mut ByteWriter, a: &VaeAgent) {
    w.u32(a.input_dim as u32);
    w.u32(a.latent_dim as u32);
    write_net(w, &a.trunk);
    write_net(w, &a.head_mean);
    write_net(w, &a.head_tri);
    write_net(w, &a.decoder);
}

fn read_agent(r: &mut ByteReader) -> Result<VaeAgent> {
    let input_dim = r.u32()? as usize;
    let latent_dim = r.u32()? as usize;
    Ok(VaeAgent {
        input_dim,
        latent_dim,
        trunk: read_net(r)?,
        head_mean: read_net(r)?,
        head_tri: read_net(r)?,
        decoder: read_net(r)?,
    })
}

fn write_hsmm(w: &mut ByteWriter, h: &HsmmModel) {
    w.u32(h.k() as u32);
    w.u32(h.dim() as u32);
    w.u32(h.d_max() as u32);
    w.f64s(h.pi());
    w.f64s(h.trans().data());
    for c in h.components() {
        w.f64s(c.mean());
        w.f64s(c.chol().data());
    }
    for d in h.durations() {
        w.f64(d.mean);
        w.f64(d.std);
    }
    let split = h.split();
    w.u32(split.first().len() as u32);
    for &i in split.first() {
        w.u32(i as u32);
    }
    w.u32(split.second().len() as u32);
    for &i in split.second() {
        w.u32(i as u32);
    }
}

fn read_hsmm(r: &mut ByteReader) -> Result<HsmmModel> {
    let k = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let d_max = r.u32()? as usize;
    let pi = r.f64s()?;
    let tdata = r.f64s()?;
    if tdata.len() != k * k {
        return Err(Error::CorruptChecksum);
    }
    let trans = Matrix::new(k, k, tdata);
    let mut components = Vec::with_capacity(k);
    for _ in 0..k {
        let mean = r.f64s()?;
        let cdata = r.f64s()?;
        if mean.len() != dim || cdata.len() != dim * dim {
            return Err(Error::CorruptChecksum);
        }
        components.push(MultivariateGaussian::from_mean_chol(
            mean,
            Matrix::new(dim, dim, cdata),
        ));
    }
    let durations = (0..k)
        .map(|_| {
            Ok(crate::hsmm::DurationStats {
                mean: r.f64()?,
                std: r.f64()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n1 = r.u32()? as usize;
    let first = (0..n1).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
    let n2 = r.u32()? as usize;
    let second = (0..n2).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
    let split = BlockSplit::new(first, second)?;
    HsmmModel::new(pi, trans, components, durations, d_max, split)
}

/// Serializes a model to the documented checkpoint bytes.
pub fn to_bytes(model: &TrainedModel) -> Vec<u8> {
    let config_block = serialize_config(&model.config);
    let config_hash = Sha256::digest(&config_block);

    let mut w = ByteWriter::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.buf.extend_from_slice(&config_hash);
    w.u64(model.created_unix);
    w.u64(config_block.len() as u64);
    w.buf.extend_from_slice(&config_block);
    write_agent(&mut w, &model.vae.agent1);
    write_agent(&mut w, &model.vae.agent2);
    w.u32(model.hsmms.len() as u32);
    for (class, h) in &model.hsmms {
        w.string(class);
        write_hsmm(&mut w, h);
    }
    let checksum = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&checksum);
    w.buf
}

/// Parses checkpoint bytes, verifying version and checksum.
pub fn from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::CorruptChecksum);
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::CorruptChecksum);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            got: version,
        });
    }
    let body = &bytes[..bytes.len() - 32];
    let stored = &bytes[bytes.len() - 32..];
    let computed = Sha256::digest(body);
    if stored != computed.as_slice() {
        return Err(Error::CorruptChecksum);
    }

    let mut r = ByteReader::new(&body[12..]);
    let stored_hash = r.take(32)?.to_vec();
    let created_unix = r.u64()?;
    let clen = r.u64()? as usize;
    let config_block = r.take(clen)?.to_vec();
    if Sha256::digest(&config_block).as_slice() != stored_hash {
        return Err(Error::CorruptChecksum);
    }
    let mut cr = ByteReader::new(&config_block);
    let config = deserialize_config(&mut cr)?;
    let agent1 = read_agent(&mut r)?;
    let agent2 = read_agent(&mut r)?;
    let n = r.u32()? as usize;
    let mut hsmms = BTreeMap::new();
    for _ in 0..n {
        let class = r.string()?;
        hsmms.insert(class, read_hsmm(&mut r)?);
    }
    if !r.done() {
        return Err(Error::CorruptChecksum);
    }
    Ok(TrainedModel {
        vae: VaePair { agent1, agent2 },
        hsmms,
        config,
        created_unix,
    })
}

/// Writes the checkpoint file.
pub fn save(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

/// Loads a checkpoint file, verifying version and checksum.
pub fn load(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_interactions, SynthConfig};

    fn tiny_dataset(seed: u64) -> InteractionDataset {
        let cfg = SynthConfig {
            classes: 2,
            modes: 2,
            demos: 3,
            len: 24,
            sigma: 0.01,
            seed,
        };
        let (demos, _) = synth_interactions(&cfg).unwrap();
        InteractionDataset::from_raw(&demos, 3).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            latent_dim: 3,
            components: 3,
            window: 3,
            hidden: vec![16, 8],
            epochs: 2,
            seed: 11,
            em_iters: 3,
            n_samples: 4,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_hsmm_per_class() {
        let ds = tiny_dataset(1);
        let (model, log) = train(&ds, &tiny_config()).unwrap();
        assert_eq!(model.classes(), vec!["class0".to_string(), "class1".to_string()]);
        assert_eq!(model.hsmms.len(), 2);
        // one record per epoch per class
        assert_eq!(log.records.len(), 2 * 2);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset(2);
        let cfg = tiny_config();
        let (m1, l1) = train(&ds, &cfg).unwrap();
        let (m2, l2) = train(&ds, &cfg).unwrap();
        assert_eq!(to_bytes(&m1), to_bytes(&m2));
        for (a, b) in l1.records.iter().zip(&l2.records) {
            assert_eq!(a.epoch, b.epoch);
            assert_eq!(a.class, b.class);
            assert_eq!(a.recon.to_bits(), b.recon.to_bits());
            assert_eq!(a.kl.to_bits(), b.kl.to_bits());
            assert_eq!(a.hsmm_loglik.to_bits(), b.hsmm_loglik.to_bits());
            assert_eq!(a.prior_sig, b.prior_sig);
        }
    }

    #[test]
    fn epoch_priors_come_from_previous_refit() {
        let ds = tiny_dataset(3);
        let mut cfg = tiny_config();
        cfg.epochs = 2;
        let (m2, _) = train(&ds, &cfg).unwrap();
        cfg.epochs = 3;
        let (_, l3) = train(&ds, &cfg).unwrap();
        // epoch 0 used the standard-normal bootstrap
        for r in l3.records.iter().filter(|r| r.epoch == 0) {
            assert_eq!(r.prior_sig, 0);
        }
        // epoch 2's priors hash to the models refit at the end of epoch 1,
        // which are exactly the output of the 2-epoch run
        for r in l3.records.iter().filter(|r| r.epoch == 2) {
            let want = prior_signature(&m2.hsmms[&r.class], cfg.prior_reg).unwrap();
            assert_eq!(r.prior_sig, want, "class {}", r.class);
        }
    }

    #[test]
    fn condition_preserves_length_and_is_deterministic() {
        let ds = tiny_dataset(4);
        let (model, _) = train(&ds, &tiny_config()).unwrap();
        let demo = &ds.demos[0];
        let a = condition(&model, &demo.class_label, &demo.agent1).unwrap();
        let b = condition(&model, &demo.class_label, &demo.agent1).unwrap();
        assert_eq!(a.rows(), demo.agent1.rows());
        assert_eq!(a.cols(), demo.agent2.cols());
        assert_eq!(a.data(), b.data());
        // single window in, single prediction out
        let one = Matrix::from_rows(&[demo.agent1.row(0).to_vec()]);
        let p = condition(&model, &demo.class_label, &one).unwrap();
        assert_eq!(p.rows(), 1);
    }

    #[test]
    fn condition_is_causal() {
        let ds = tiny_dataset(5);
        let (model, _) = train(&ds, &tiny_config()).unwrap();
        let demo = &ds.demos[1];
        let full = condition(&model, &demo.class_label, &demo.agent1).unwrap();
        // truncating the future must not change earlier predictions
        let t = 4;
        let prefix_rows: Vec<Vec<f64>> = (0..t).map(|i| demo.agent1.row(i).to_vec()).collect();
        let prefix = condition(&model, &demo.class_label, &Matrix::from_rows(&prefix_rows)).unwrap();
        for i in 0..t {
            for j in 0..prefix.cols() {
                assert_eq!(prefix[(i, j)].to_bits(), full[(i, j)].to_bits());
            }
        }
    }

    #[test]
    fn streaming_matches_batch_conditioning() {
        let ds = tiny_dataset(6);
        let (model, _) = train(&ds, &tiny_config()).unwrap();
        let demo = &ds.demos[2];
        let batch = condition(&model, &demo.class_label, &demo.agent1).unwrap();
        let mut cond = model.conditioner(&demo.class_label).unwrap();
        for t in 0..demo.agent1.rows() {
            let pred = cond.push(demo.agent1.row(t)).unwrap();
            for j in 0..pred.len() {
                assert_eq!(pred[j].to_bits(), batch[(t, j)].to_bits());
            }
        }
    }

    #[test]
    fn unknown_class_lists_known() {
        let ds = tiny_dataset(7);
        let (model, _) = train(&ds, &tiny_config()).unwrap();
        match condition(&model, "nope", &ds.demos[0].agent1) {
            Err(Error::UnknownClass { class, known }) => {
                assert_eq!(class, "nope");
                assert_eq!(known, vec!["class0".to_string(), "class1".to_string()]);
            }
            other => panic!("expected UnknownClass, got {other:?}"),
        }
    }

    #[test]
    fn save_load_roundtrip_bit_exact() {
        let ds = tiny_dataset(8);
        let (model, _) = train(&ds, &tiny_config()).unwrap();
        let bytes = to_bytes(&model);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(bytes, to_bytes(&back));
        // loaded model conditions identically
        let demo = &ds.demos[0];
        let a = condition(&model, &demo.class_label, &demo.agent1).unwrap();
        let b = condition(&back, &demo.class_label, &demo.agent1).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let ds = tiny_dataset(9);
        let (model, _) = train(&ds, &tiny_config()).unwrap();
        let bytes = to_bytes(&model);
        for cut in [bytes.len() - 1, bytes.len() / 2, 20] {
            assert!(matches!(
                from_bytes(&bytes[..cut]),
                Err(Error::CorruptChecksum)
            ));
        }
        // flipped byte in the middle
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0xFF;
        assert!(matches!(from_bytes(&bad), Err(Error::CorruptChecksum)));
    }

    #[test]
    fn version_mismatch_detected() {
        let ds = tiny_dataset(10);
        let (model, _) = train(&ds, &tiny_config()).unwrap();
        let mut bytes = to_bytes(&model);
        bytes[8] = 99; // version field
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::VersionMismatch { got: 99, .. })
        ));
    }

    #[test]
    fn refits_are_class_isolated() {
        // dropping one class leaves the other's refit untouched given
        // fixed weights
        let ds = tiny_dataset(12);
        let (model, _) = train(&ds, &tiny_config()).unwrap();
        let root = RngState::new(model.config.seed);
        let latent_split = BlockSplit::contiguous(model.config.latent_dim, model.config.latent_dim);
        let opts = FitOptions {
            max_iters: model.config.em_iters,
            tol: model.config.em_tol,
            ..FitOptions::default()
        };
        let refit = |classes: &[&str]| -> HsmmModel {
            let mut zdemos = Vec::new();
            for (di, demo) in ds.demos.iter().enumerate() {
                if !classes.contains(&demo.class_label.as_str()) || demo.class_label != "class0" {
                    continue;
                }
                zdemos.push(
                    encode_joint_latents(&model.vae.agent1, &model.vae.agent2, demo, false, &root, 0, di)
                        .unwrap(),
                );
            }
            let init = init_temporal_split(&zdemos, model.config.components, latent_split.clone()).unwrap();
            fit_em(&init, &zdemos, &opts).unwrap().0
        };
        let with_both = refit(&["class0", "class1"]);
        let alone = refit(&["class0"]);
        assert_eq!(
            prior_signature(&with_both, model.config.prior_reg).unwrap(),
            prior_signature(&alone, model.config.prior_reg).unwrap()
        );
    }

    #[test]
    fn early_stop_holds_out_and_still_trains() {
        let ds = tiny_dataset(13);
        let mut cfg = tiny_config();
        cfg.early_stop = Some(EarlyStop {
            holdout_frac: 0.34,
            patience: 1,
        });
        cfg.epochs = 4;
        let (model, log) = train(&ds, &cfg).unwrap();
        assert_eq!(model.hsmms.len(), 2);
        assert!(!log.records.is_empty());
    }

    #[test]
    fn non_finite_input_rejected_up_front() {
        let ds = tiny_dataset(14);
        let mut bad = ds.clone();
        bad.demos[0].agent1.data_mut()[0] = f64::NAN;
        assert!(matches!(
            train(&bad, &tiny_config()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn trainlog_csv_has_header_and_rows() {
        let ds = tiny_dataset(15);
        let (_, log) = train(&ds, &tiny_config()).unwrap();
        let csv = log.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,class,recon,kl,hsmm_loglik,wall_secs,prior_sig"
        );
        assert_eq!(lines.count(), log.records.len());
    }
}
