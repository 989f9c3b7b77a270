//! One β-VAE per modality: MLP encoder to (mu, logvar), MLP decoder, and the
//! single-modality reconstruction loss.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const LOGVAR_CLAMP: f64 = 10.0;

/// Initial logvar-head bias: start with tight posteriors so early samples
/// track the mean and reconstruction learning is not swamped by unit-variance
/// sampling noise.
pub const LOGVAR_BIAS_INIT: f64 = -2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Likelihood {
    GaussianUnitVar,
    Bernoulli,
}

#[derive(Debug, Clone, Copy)]
pub struct VaeConfig {
    pub beta: f64,
    pub likelihood: Likelihood,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            likelihood: Likelihood::GaussianUnitVar,
            input_dim: 32,
            hidden_dim: 64,
            latent_dim: 16,
        }
    }
}

/// Encoder/decoder layout for one modality. Parameters live in a shared
/// [`ParamStore`] under the `vae.<modality>.` prefix.
#[derive(Debug, Clone, Copy)]
pub struct ModalityVae {
    pub modality_id: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
}

fn init_linear<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    let scale = (2.0 / fan_in as f64).sqrt();
    let w = Tensor::randn(&[fan_in, fan_out], rng).map(|v| v * scale);
    store.insert(format!("{prefix}.w"), w);
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

impl ModalityVae {
    pub fn new(modality_id: usize, cfg: &VaeConfig) -> Self {
        Self {
            modality_id,
            input_dim: cfg.input_dim,
            hidden_dim: cfg.hidden_dim,
            latent_dim: cfg.latent_dim,
        }
    }

    pub fn prefix(&self) -> String {
        format!("vae.{}.", self.modality_id)
    }

    /// Insert freshly initialized parameters for this modality.
    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let p = format!("vae.{}", self.modality_id);
        let (i, h, d) = (self.input_dim, self.hidden_dim, self.latent_dim);
        init_linear(store, &format!("{p}.enc1"), i, h, rng);
        init_linear(store, &format!("{p}.enc2"), h, h, rng);
        init_linear(store, &format!("{p}.mu"), h, d, rng);
        init_linear(store, &format!("{p}.logvar"), h, d, rng);
        store.set_value(
            &format!("{p}.logvar.b"),
            Tensor::new(vec![d], vec![LOGVAR_BIAS_INIT; d]).unwrap(),
        );
        init_linear(store, &format!("{p}.dec1"), d, h, rng);
        init_linear(store, &format!("{p}.dec2"), h, h, rng);
        init_linear(store, &format!("{p}.out"), h, i, rng);
    }

    pub fn param_names(&self) -> Vec<String> {
        let p = format!("vae.{}", self.modality_id);
        ["enc1", "enc2", "mu", "logvar", "dec1", "dec2", "out"]
            .iter()
            .flat_map(|layer| {
                [
                    format!("{p}.{layer}.w"),
                    format!("{p}.{layer}.b"),
                ]
            })
            .collect()
    }

    pub fn decoder_param_names(&self) -> Vec<String> {
        let p = format!("vae.{}", self.modality_id);
        ["dec1", "dec2", "out"]
            .iter()
            .flat_map(|layer| [format!("{p}.{layer}.w"), format!("{p}.{layer}.b")])
            .collect()
    }

    fn layer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        name: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let p = format!("vae.{}.{name}", self.modality_id);
        let wn = format!("{p}.w");
        let bn = format!("{p}.b");
        let w = g.leaf(wn.clone(), store.value(&wn).clone());
        let b = g.leaf(bn.clone(), store.value(&bn).clone());
        g.linear(x, w, b)
    }

    /// Encoder trunk shared by the mu and logvar heads; logvar is clamped to
    /// [-LOGVAR_CLAMP, LOGVAR_CLAMP].
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let h1 = self.layer(g, store, "enc1", x)?;
        let h1 = g.relu(h1);
        let h2 = self.layer(g, store, "enc2", h1)?;
        let h2 = g.relu(h2);
        let mu = self.layer(g, store, "mu", h2)?;
        let lv = self.layer(g, store, "logvar", h2)?;
        let lv = g.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP);
        Ok((mu, lv))
    }

    pub fn decode(&self, g: &mut Graph, store: &ParamStore, z: NodeId) -> Result<NodeId> {
        let h1 = self.layer(g, store, "dec1", z)?;
        let h1 = g.relu(h1);
        let h2 = self.layer(g, store, "dec2", h1)?;
        let h2 = g.relu(h2);
        self.layer(g, store, "out", h2)
    }

    /// Decode using an explicit tensor map instead of the live store (used for
    /// cached shared decoders at inference time; not differentiable).
    pub fn decode_with(
        &self,
        g: &mut Graph,
        tensors: &std::collections::BTreeMap<String, Tensor>,
        z: NodeId,
    ) -> Result<NodeId> {
        let p = format!("vae.{}", self.modality_id);
        let layer = |g: &mut Graph, name: &str, x: NodeId| -> Result<NodeId> {
            let w = g.constant(tensors[&format!("{p}.{name}.w")].clone());
            let b = g.constant(tensors[&format!("{p}.{name}.b")].clone());
            g.linear(x, w, b)
        };
        let h1 = layer(g, "dec1", z)?;
        let h1 = g.relu(h1);
        let h2 = layer(g, "dec2", h1)?;
        let h2 = g.relu(h2);
        layer(g, "out", h2)
    }

    /// Reconstruction NLL for the configured likelihood family.
    pub fn recon_loss(
        &self,
        g: &mut Graph,
        likelihood: Likelihood,
        xhat: NodeId,
        x: &Tensor,
    ) -> Result<NodeId> {
        match likelihood {
            Likelihood::GaussianUnitVar => g.recon_gaussian(xhat, x),
            Likelihood::Bernoulli => g.recon_bernoulli(xhat, x),
        }
    }

    /// L_single: reconstruction term plus β-weighted KL, with the sampling
    /// noise supplied by the caller.
    pub fn single_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &Tensor,
        cfg: &VaeConfig,
        noise: Tensor,
    ) -> Result<NodeId> {
        let x_in = g.constant(x.clone());
        let (mu, lv) = self.encode(g, store, x_in)?;
        let z = g.reparameterize(mu, lv, noise)?;
        let xhat = self.decode(g, store, z)?;
        let recon = self.recon_loss(g, cfg.likelihood, xhat, x)?;
        let kl = g.gaussian_kl(mu, lv)?;
        let kl_scaled = g.scale(kl, cfg.beta);
        g.add(recon, kl_scaled)
    }

    /// Deterministic encoder mean for plain-tensor inputs (inference path).
    pub fn encode_mean(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x_in = g.constant(x.clone());
        let (mu, _) = self.encode(&mut g, store, x_in)?;
        Ok(g.value(mu).clone())
    }
}
