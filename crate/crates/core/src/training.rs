//! Local-round optimization (imputation loss with iterated target selection
//! plus per-modality reconstruction) and the two inference paths: missing
//! modality imputation and downstream feature concatenation.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::fusion::{fuse, poe_fuse_graph, FusionStack};
use crate::graph::{Graph, NodeId};
use crate::params::{Adam, ParamStore};
use crate::tensor::Tensor;
use crate::vae::{ModalityVae, VaeConfig};

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub lambda: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            beta: 1.0,
            learning_rate: 1e-3,
            batch_size: 64,
            local_steps: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.local_steps == 0 {
            return Err(Error::Config("local_steps must be >= 1".into()));
        }
        if self.lambda < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("lambda and beta must be non-negative".into()));
        }
        Ok(())
    }
}

/// Fusion mechanism: the GNN stack, or the product-of-experts baseline that
/// replaces it while keeping everything else identical.
#[derive(Debug, Clone, Copy)]
pub enum FusionKind {
    Gnn(FusionStack),
    Poe,
}

/// Per-client (or global) model: VAE layouts for all modalities, parameters
/// for the locally trained subset, and a read-only cache of all shared
/// decoders for inference-time imputation.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub vaes: BTreeMap<usize, ModalityVae>,
    pub trained: BTreeSet<usize>,
    pub fusion: FusionKind,
    pub vae_cfg: VaeConfig,
    pub params: ParamStore,
    pub decoder_cache: BTreeMap<String, Tensor>,
}

impl ModelBundle {
    /// Build a bundle holding parameters for `trained` modalities (plus the
    /// fusion stack for the GNN method). `modalities` is the total count M.
    pub fn new<R: Rng>(
        modalities: usize,
        trained: BTreeSet<usize>,
        fusion: FusionKind,
        vae_cfg: VaeConfig,
        rng: &mut R,
    ) -> Self {
        let vaes: BTreeMap<usize, ModalityVae> = (0..modalities)
            .map(|m| (m, ModalityVae::new(m, &vae_cfg)))
            .collect();
        let mut params = ParamStore::new();
        for m in &trained {
            vaes[m].init_params(&mut params, rng);
        }
        if let FusionKind::Gnn(stack) = &fusion {
            stack.init_params(&mut params, rng);
        }
        Self {
            vaes,
            trained,
            fusion,
            vae_cfg,
            params,
            decoder_cache: BTreeMap::new(),
        }
    }

    pub fn modalities(&self) -> usize {
        self.vaes.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.vae_cfg.latent_dim
    }

    /// Fused target latent from conditional posteriors, for either method.
    /// During training conditionals are reparameterized samples; at inference
    /// they are encoder means.
    fn fuse_target<R: Rng>(
        &self,
        g: &mut Graph,
        cond: &BTreeMap<usize, NodeId>,
        posteriors: &BTreeMap<usize, (NodeId, NodeId)>,
        target_m: usize,
        sample_fused: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        match &self.fusion {
            FusionKind::Gnn(stack) => {
                let out = fuse(g, &self.params, stack, cond, &[target_m], rng)?;
                Ok(out[&target_m])
            }
            FusionKind::Poe => {
                let experts: Vec<(NodeId, NodeId)> = posteriors.values().copied().collect();
                let (mu, lv) = poe_fuse_graph(g, &experts, true)?;
                if sample_fused {
                    let shape = g.value(mu).shape().to_vec();
                    let noise = Tensor::randn(&shape, rng);
                    g.reparameterize(mu, lv, noise)
                } else {
                    Ok(mu)
                }
            }
        }
    }

    /// L_impute for one target choice: encode conditionals, sample, fuse,
    /// decode with the target's decoder, score against the true view.
    pub fn impute_loss<R: Rng>(
        &self,
        g: &mut Graph,
        batch: &BTreeMap<usize, Tensor>,
        target_m: usize,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !batch.contains_key(&target_m) {
            return Err(Error::Precondition(format!(
                "target modality {target_m} missing from batch"
            )));
        }
        if batch.len() < 2 {
            return Err(Error::Precondition(
                "imputation needs at least one conditional modality besides the target".into(),
            ));
        }
        let mut cond = BTreeMap::new();
        let mut posteriors = BTreeMap::new();
        for (&m, x) in batch {
            if m == target_m {
                continue;
            }
            let x_in = g.constant(x.clone());
            let (mu, lv) = self.vaes[&m].encode(g, &self.params, x_in)?;
            let noise = Tensor::randn(&[x.rows(), self.latent_dim()], rng);
            let z = g.reparameterize(mu, lv, noise)?;
            cond.insert(m, z);
            posteriors.insert(m, (mu, lv));
        }
        let z_target = self.fuse_target(g, &cond, &posteriors, target_m, true, rng)?;
        let xhat = self.vaes[&target_m].decode(g, &self.params, z_target)?;
        self.vaes[&target_m].recon_loss(g, self.vae_cfg.likelihood, xhat, &batch[&target_m])
    }

    /// L_local: mean imputation loss over every target choice plus lambda
    /// times the mean single-modality loss. Single-modality clients fall back
    /// to the reconstruction term alone.
    pub fn local_loss<R: Rng>(
        &self,
        g: &mut Graph,
        batch: &BTreeMap<usize, Tensor>,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let observed: Vec<usize> = batch.keys().copied().collect();
        let mut single_terms = Vec::new();
        for &m in &observed {
            let noise = Tensor::randn(&[batch[&m].rows(), self.latent_dim()], rng);
            let mut vcfg = self.vae_cfg;
            vcfg.beta = cfg.beta;
            single_terms.push(self.vaes[&m].single_loss(g, &self.params, &batch[&m], &vcfg, noise)?);
        }
        let single_mean = {
            let sum = g.add_n(&single_terms)?;
            g.scale(sum, 1.0 / single_terms.len() as f64)
        };
        if observed.len() == 1 {
            return Ok(single_mean);
        }
        let mut impute_terms = Vec::new();
        for &target in &observed {
            impute_terms.push(self.impute_loss(g, batch, target, rng)?);
        }
        let impute_mean = {
            let sum = g.add_n(&impute_terms)?;
            g.scale(sum, 1.0 / impute_terms.len() as f64)
        };
        let weighted_single = g.scale(single_mean, cfg.lambda);
        g.add(impute_mean, weighted_single)
    }

    /// Impute each missing modality from all observed ones. Conditional
    /// features are encoder means; virtual-node initialization is fixed by
    /// `virtual_seed`.
    pub fn infer_impute(
        &self,
        observed: &BTreeMap<usize, Tensor>,
        missing: &BTreeSet<usize>,
        virtual_seed: u64,
    ) -> Result<BTreeMap<usize, Tensor>> {
        if missing.is_empty() {
            return Ok(BTreeMap::new());
        }
        if observed.is_empty() {
            return Err(Error::Precondition("no observed modalities".into()));
        }
        if missing.iter().any(|m| observed.contains_key(m)) {
            return Err(Error::Precondition(
                "missing set overlaps observed modalities".into(),
            ));
        }
        let mut g = Graph::new();
        let mut cond = BTreeMap::new();
        let mut posteriors = BTreeMap::new();
        for (&m, x) in observed {
            let x_in = g.constant(x.clone());
            let (mu, lv) = self.vaes[&m].encode(&mut g, &self.params, x_in)?;
            cond.insert(m, mu);
            posteriors.insert(m, (mu, lv));
        }
        let latents = self.infer_missing_latents(&mut g, &cond, &posteriors, missing, virtual_seed)?;
        let mut out = BTreeMap::new();
        for (&m, &z) in &latents {
            let xhat = self.decode_any(&mut g, m, z)?;
            out.insert(m, g.value(xhat).clone());
        }
        Ok(out)
    }

    fn infer_missing_latents(
        &self,
        g: &mut Graph,
        cond: &BTreeMap<usize, NodeId>,
        posteriors: &BTreeMap<usize, (NodeId, NodeId)>,
        missing: &BTreeSet<usize>,
        virtual_seed: u64,
    ) -> Result<BTreeMap<usize, NodeId>> {
        let mut rng = ChaCha20Rng::seed_from_u64(virtual_seed);
        match &self.fusion {
            FusionKind::Gnn(stack) => {
                let targets: Vec<usize> = missing.iter().copied().collect();
                fuse(g, &self.params, stack, cond, &targets, &mut rng)
            }
            FusionKind::Poe => {
                let experts: Vec<(NodeId, NodeId)> = posteriors.values().copied().collect();
                let (mu, _) = poe_fuse_graph(g, &experts, true)?;
                Ok(missing.iter().map(|&m| (m, mu)).collect())
            }
        }
    }

    /// Decode modality `m` from its latent, preferring live parameters and
    /// falling back to the broadcast decoder cache.
    fn decode_any(&self, g: &mut Graph, m: usize, z: NodeId) -> Result<NodeId> {
        let vae = &self.vaes[&m];
        let probe = format!("vae.{m}.dec1.w");
        if self.params.contains(&probe) {
            vae.decode(g, &self.params, z)
        } else if self.decoder_cache.contains_key(&probe) {
            vae.decode_with(g, &self.decoder_cache, z)
        } else {
            Err(Error::MissingDecoder(m))
        }
    }

    /// Concatenated downstream features: encoder means for observed
    /// modalities, fused latents for missing ones, in ascending modality
    /// order. Width is always M * d.
    pub fn infer_features(
        &self,
        observed: &BTreeMap<usize, Tensor>,
        missing: &BTreeSet<usize>,
        virtual_seed: u64,
    ) -> Result<Tensor> {
        if observed.is_empty() {
            return Err(Error::Precondition("no observed modalities".into()));
        }
        if missing.iter().any(|m| observed.contains_key(m)) {
            return Err(Error::Precondition(
                "missing set overlaps observed modalities".into(),
            ));
        }
        let mut g = Graph::new();
        let mut cond = BTreeMap::new();
        let mut posteriors = BTreeMap::new();
        for (&m, x) in observed {
            let x_in = g.constant(x.clone());
            let (mu, lv) = self.vaes[&m].encode(&mut g, &self.params, x_in)?;
            cond.insert(m, mu);
            posteriors.insert(m, (mu, lv));
        }
        let fused = if missing.is_empty() {
            BTreeMap::new()
        } else {
            self.infer_missing_latents(&mut g, &cond, &posteriors, missing, virtual_seed)?
        };
        let mut slots: Vec<NodeId> = Vec::with_capacity(self.modalities());
        for m in 0..self.modalities() {
            if let Some(&id) = cond.get(&m) {
                slots.push(id);
            } else if let Some(&id) = fused.get(&m) {
                slots.push(id);
            } else {
                return Err(Error::Precondition(format!(
                    "modality {m} neither observed nor in the missing set"
                )));
            }
        }
        let cat = g.concat_cols(&slots);
        Ok(g.value(cat).clone())
    }
}

/// Assemble per-modality `(batch, dim)` tensors for the given sample indices.
pub fn batch_from_samples(
    shard: &[Sample],
    indices: &[usize],
    modalities: &BTreeSet<usize>,
) -> BTreeMap<usize, Tensor> {
    let mut out = BTreeMap::new();
    for &m in modalities {
        let dim = shard[indices[0]].views[m].len();
        let mut t = Tensor::zeros(&[indices.len(), dim]);
        for (row, &idx) in indices.iter().enumerate() {
            for j in 0..dim {
                t.set(row, j, shard[idx].views[m].data()[j]);
            }
        }
        out.insert(m, t);
    }
    out
}

/// Run `local_steps` Adam steps on minibatches drawn from the shard with the
/// supplied rng; returns the loss trace. Mutates only this bundle.
pub fn local_round<R: Rng>(
    bundle: &mut ModelBundle,
    opt: &mut Adam,
    shard: &[Sample],
    observed: &BTreeSet<usize>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if shard.is_empty() {
        return Err(Error::Precondition("empty shard".into()));
    }
    let mut trace = Vec::with_capacity(cfg.local_steps);
    for _ in 0..cfg.local_steps {
        let indices: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..shard.len()))
            .collect();
        let batch = batch_from_samples(shard, &indices, observed);
        let mut g = Graph::new();
        let loss = bundle.local_loss(&mut g, &batch, cfg, rng)?;
        let value = g.value(loss).scalar_value();
        bundle.params.zero_grads();
        g.backward(loss)?;
        g.accumulate_grads(&mut bundle.params);
        opt.step(&mut bundle.params);
        trace.push(value);
    }
    Ok(trace)
}
