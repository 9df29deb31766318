//! Per-agent variational autoencoder with a full-covariance Gaussian
//! posterior parameterized by its Cholesky factor.
//!
//! The encoder runs a shared trunk and two linear heads: one for the
//! posterior mean, one for the `d(d+1)/2` entries of the lower-triangular
//! factor. Diagonal entries pass through `l = 2|l|` plus a small additive
//! floor so the factor stays invertible for any weights; off-diagonal
//! entries are used raw. Reconstruction decodes several reparameterized
//! samples per input and averages their squared error; the KL term is the
//! closed form against the per-example prior Gaussian.

use crate::gauss::{kl_divergence_with_grad, MultivariateGaussian};
use crate::nnet::{Activation, DenseNet, NetGradients};
use crate::numkit::{Matrix, RngState};
use crate::{Error, Result};

/// Additive floor applied to the posterior factor diagonal after the
/// `2|l|` transform.
pub const DIAG_FLOOR: f64 = 1e-4;

/// One agent's encoder/decoder pair.
#[derive(Debug, Clone)]
pub struct VaeAgent {
    /// Encoder trunk: input through the hidden stack.
    pub trunk: DenseNet,
    /// Linear head producing the posterior mean.
    pub head_mean: DenseNet,
    /// Linear head producing the lower-triangle entries.
    pub head_tri: DenseNet,
    /// Mirror-image decoder back to the input space.
    pub decoder: DenseNet,
    pub input_dim: usize,
    pub latent_dim: usize,
}

/// The two agents' VAEs. Latent dimensions must agree so the joint latent
/// space is well-formed.
#[derive(Debug, Clone)]
pub struct VaePair {
    pub agent1: VaeAgent,
    pub agent2: VaeAgent,
}

/// Loss decomposition from one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ElboBreakdown {
    /// `recon + kl_scale * kl`.
    pub total: f64,
    /// Squared reconstruction error summed over dims, averaged over batch
    /// and samples.
    pub recon: f64,
    /// Mean KL divergence over the batch (unscaled).
    pub kl: f64,
}

/// Gradients for all four networks of one agent.
#[derive(Debug, Clone)]
pub struct VaeGradients {
    pub trunk: NetGradients,
    pub head_mean: NetGradients,
    pub head_tri: NetGradients,
    pub decoder: NetGradients,
}

impl VaeGradients {
    /// Flat layout matching [`VaeAgent::params_vec`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.trunk.flatten();
        v.extend(self.head_mean.flatten());
        v.extend(self.head_tri.flatten());
        v.extend(self.decoder.flatten());
        v
    }
}

pub fn tri_count(latent_dim: usize) -> usize {
    latent_dim * (latent_dim + 1) / 2
}

impl VaeAgent {
    /// Builds encoder trunk `input -> hidden...`, linear mean/triangle
    /// heads, and the mirrored decoder `latent -> hidden_rev... -> input`.
    pub fn new(input_dim: usize, hidden: &[usize], latent_dim: usize, rng: &mut RngState) -> Self {
        assert!(!hidden.is_empty(), "need at least one hidden layer");
        assert!(input_dim > 0 && latent_dim > 0);
        let mut trunk_dims = vec![input_dim];
        trunk_dims.extend_from_slice(hidden);
        let trunk_acts = vec![Activation::LeakyRelu; hidden.len()];
        let trunk = DenseNet::new(&trunk_dims, &trunk_acts, rng);

        let h_last = *hidden.last().unwrap();
        let head_mean = DenseNet::new(&[h_last, latent_dim], &[Activation::Linear], rng);
        let head_tri = DenseNet::new(&[h_last, tri_count(latent_dim)], &[Activation::Linear], rng);

        let mut dec_dims = vec![latent_dim];
        dec_dims.extend(hidden.iter().rev());
        dec_dims.push(input_dim);
        let mut dec_acts = vec![Activation::LeakyRelu; hidden.len()];
        dec_acts.push(Activation::Linear);
        let decoder = DenseNet::new(&dec_dims, &dec_acts, rng);

        Self {
            trunk,
            head_mean,
            head_tri,
            decoder,
            input_dim,
            latent_dim,
        }
    }

    /// Posterior Gaussians for a batch of inputs (row per example).
    pub fn encode(&self, x: &Matrix) -> Result<Vec<MultivariateGaussian>> {
        let (mu, tri, _, _, _) = self.encode_cached(x)?;
        Ok((0..x.rows())
            .map(|i| {
                MultivariateGaussian::from_mean_chol(
                    mu.row(i).to_vec(),
                    assemble_chol(tri.row(i), self.latent_dim),
                )
            })
            .collect())
    }

    /// Posterior means only, `n x latent_dim`.
    pub fn encode_means(&self, x: &Matrix) -> Result<Matrix> {
        let (h, _) = self.trunk.forward(x)?;
        let (mu, _) = self.head_mean.forward(&h)?;
        Ok(mu)
    }

    fn encode_cached(
        &self,
        x: &Matrix,
    ) -> Result<(
        Matrix,
        Matrix,
        crate::nnet::ForwardCache,
        crate::nnet::ForwardCache,
        crate::nnet::ForwardCache,
    )> {
        if x.cols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.cols(),
                context: "encoder input",
            });
        }
        let (h, trunk_cache) = self.trunk.forward(x)?;
        let (mu, mean_cache) = self.head_mean.forward(&h)?;
        let (tri, tri_cache) = self.head_tri.forward(&h)?;
        Ok((mu, tri, trunk_cache, mean_cache, tri_cache))
    }

    /// Deterministic decoder mean output for a batch of latents.
    pub fn decode(&self, z: &Matrix) -> Result<Matrix> {
        if z.cols() != self.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: self.latent_dim,
                got: z.cols(),
                context: "decoder input",
            });
        }
        Ok(self.decoder.forward(z)?.0)
    }

    /// Objective value and gradients for one batch. `priors` supplies the
    /// per-example prior Gaussian (the mixture component selected for that
    /// timestep, or the standard normal before any mixture exists).
    ///
    /// Loss: mean over the batch of the per-example squared reconstruction
    /// error (summed over dims, averaged over the `n_samples` decoded
    /// posterior samples) plus `kl_scale` times the closed-form KL to the
    /// prior. Summing over dims keeps the reconstruction term commensurate
    /// with the Gaussian log-likelihood it stands in for, so the KL scale
    /// behaves the same at any input width. One encoder pass is shared by
    /// all samples of an example.
    pub fn elbo_loss(
        &self,
        x: &Matrix,
        priors: &[MultivariateGaussian],
        n_samples: usize,
        kl_scale: f64,
        rng: &mut RngState,
    ) -> Result<(ElboBreakdown, VaeGradients)> {
        let n = x.rows();
        if priors.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} priors for a batch of {n}",
                priors.len()
            )));
        }
        for p in priors {
            if p.dim() != self.latent_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.latent_dim,
                    got: p.dim(),
                    context: "prior dimension",
                });
            }
        }
        assert!(n_samples >= 1, "need at least one posterior sample");
        let (mu, tri, trunk_cache, mean_cache, tri_cache) = self.encode_cached(x)?;
        let ld = self.latent_dim;
        let s = n_samples;

        // reparameterized samples, one decoder batch of n*s rows
        let chols: Vec<Matrix> = (0..n).map(|i| assemble_chol(tri.row(i), ld)).collect();
        let mut eps = Matrix::zeros(n * s, ld);
        rng.fill_normal(eps.data_mut());
        let mut z = Matrix::zeros(n * s, ld);
        for i in 0..n {
            for si in 0..s {
                let row = i * s + si;
                let e = eps.row(row);
                let zr = z.row_mut(row);
                for a in 0..ld {
                    let mut v = mu[(i, a)];
                    for b in 0..=a {
                        v += chols[i][(a, b)] * e[b];
                    }
                    zr[a] = v;
                }
            }
        }

        let (xhat, dec_cache) = self.decoder.forward(&z)?;
        let norm = 1.0 / (n as f64 * s as f64);
        let mut recon = 0.0;
        let mut up = Matrix::zeros(n * s, self.input_dim);
        for i in 0..n {
            let target = x.row(i);
            for si in 0..s {
                let row = i * s + si;
                let pred = xhat.row(row);
                let urow = up.row_mut(row);
                for (j, (p, t)) in pred.iter().zip(target).enumerate() {
                    let r = p - t;
                    recon += r * r * norm;
                    urow[j] = 2.0 * r * norm;
                }
            }
        }
        let dec_grads = self.decoder.backward(&dec_cache, &up)?;

        // pull sample gradients back to the posterior parameters
        let dz = &dec_grads.dinput;
        let mut dmu = Matrix::zeros(n, ld);
        let mut dchol: Vec<Matrix> = (0..n).map(|_| Matrix::zeros(ld, ld)).collect();
        for i in 0..n {
            for si in 0..s {
                let row = i * s + si;
                let g = dz.row(row);
                let e = eps.row(row);
                let dm = dmu.row_mut(i);
                for a in 0..ld {
                    dm[a] += g[a];
                }
                let dc = &mut dchol[i];
                for a in 0..ld {
                    for b in 0..=a {
                        dc[(a, b)] += g[a] * e[b];
                    }
                }
            }
        }

        // KL against the per-example prior
        let kl_norm = 1.0 / n as f64;
        let mut kl_total = 0.0;
        for i in 0..n {
            let post = MultivariateGaussian::from_mean_chol(mu.row(i).to_vec(), chols[i].clone());
            let (kl, gmean, gchol) = kl_divergence_with_grad(&post, &priors[i])?;
            kl_total += kl * kl_norm;
            let w = kl_scale * kl_norm;
            let dm = dmu.row_mut(i);
            for a in 0..ld {
                dm[a] += w * gmean[a];
            }
            dchol[i].axpy(w, &gchol);
        }

        // factor gradients back through the diagonal transform
        let mut dtri = Matrix::zeros(n, tri_count(ld));
        for i in 0..n {
            let raw = tri.row(i);
            let dt = dtri.row_mut(i);
            let mut idx = 0usize;
            for a in 0..ld {
                for b in 0..=a {
                    dt[idx] = if a == b {
                        // l = 2|raw| + floor, subgradient 0 at raw == 0
                        2.0 * raw[idx].signum_or_zero() * dchol[i][(a, b)]
                    } else {
                        dchol[i][(a, b)]
                    };
                    idx += 1;
                }
            }
        }

        let mean_grads = self.head_mean.backward(&mean_cache, &dmu)?;
        let tri_grads = self.head_tri.backward(&tri_cache, &dtri)?;
        let mut dh = mean_grads.dinput.clone();
        dh.axpy(1.0, &tri_grads.dinput);
        let trunk_grads = self.trunk.backward(&trunk_cache, &dh)?;

        let breakdown = ElboBreakdown {
            total: recon + kl_scale * kl_total,
            recon,
            kl: kl_total,
        };
        Ok((
            breakdown,
            VaeGradients {
                trunk: trunk_grads,
                head_mean: mean_grads,
                head_tri: tri_grads,
                decoder: dec_grads,
            },
        ))
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count()
            + self.head_mean.param_count()
            + self.head_tri.param_count()
            + self.decoder.param_count()
    }

    pub fn params_vec(&self) -> Vec<f64> {
        let mut v = self.trunk.params_vec();
        v.extend(self.head_mean.params_vec());
        v.extend(self.head_tri.params_vec());
        v.extend(self.decoder.params_vec());
        v
    }

    pub fn set_params_vec(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.param_count());
        let mut off = 0;
        for net in [
            &mut self.trunk,
            &mut self.head_mean,
            &mut self.head_tri,
            &mut self.decoder,
        ] {
            let n = net.param_count();
            net.set_params_vec(&v[off..off + n]);
            off += n;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.trunk.all_finite()
            && self.head_mean.all_finite()
            && self.head_tri.all_finite()
            && self.decoder.all_finite()
    }
}

impl VaePair {
    pub fn new(
        input_dim1: usize,
        input_dim2: usize,
        hidden: &[usize],
        latent_dim: usize,
        rng: &mut RngState,
    ) -> Self {
        let agent1 = VaeAgent::new(input_dim1, hidden, latent_dim, rng);
        let agent2 = VaeAgent::new(input_dim2, hidden, latent_dim, rng);
        Self { agent1, agent2 }
    }

    pub fn latent_dim(&self) -> usize {
        self.agent1.latent_dim
    }

    pub fn agent(&self, idx: usize) -> &VaeAgent {
        match idx {
            0 => &self.agent1,
            1 => &self.agent2,
            _ => panic!("agent index must be 0 or 1"),
        }
    }

    pub fn agent_mut(&mut self, idx: usize) -> &mut VaeAgent {
        match idx {
            0 => &mut self.agent1,
            1 => &mut self.agent2,
            _ => panic!("agent index must be 0 or 1"),
        }
    }

    /// Copies every shape-compatible hidden layer of agent 1's networks
    /// into agent 2 (used when agent 2 has few demonstrations).
    pub fn transfer_hidden_to_agent2(&mut self) {
        crate::nnet::transfer_matching_layers(&self.agent1.trunk, &mut self.agent2.trunk);
        crate::nnet::transfer_matching_layers(&self.agent1.head_mean, &mut self.agent2.head_mean);
        crate::nnet::transfer_matching_layers(&self.agent1.head_tri, &mut self.agent2.head_tri);
        crate::nnet::transfer_matching_layers(&self.agent1.decoder, &mut self.agent2.decoder);
    }
}

/// Draws `n` reparameterized samples `mu + L * eps` from a posterior.
pub fn sample_posterior(
    posterior: &MultivariateGaussian,
    n: usize,
    rng: &mut RngState,
) -> Vec<Vec<f64>> {
    assert!(n >= 1);
    (0..n).map(|_| posterior.sample(rng)).collect()
}

/// Builds the lower-triangular factor from the raw head output: entries in
/// row-major lower-triangle order, diagonal transformed by `2|l|` plus the
/// floor.
pub fn assemble_chol(raw: &[f64], latent_dim: usize) -> Matrix {
    assert_eq!(raw.len(), tri_count(latent_dim), "triangle entry count");
    let mut l = Matrix::zeros(latent_dim, latent_dim);
    let mut idx = 0usize;
    for i in 0..latent_dim {
        for j in 0..=i {
            l[(i, j)] = if i == j {
                2.0 * raw[idx].abs() + DIAG_FLOOR
            } else {
                raw[idx]
            };
            idx += 1;
        }
    }
    l
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    /// `signum` with the subgradient convention `sign(0) = 0`.
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}
