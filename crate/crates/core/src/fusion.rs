//! GNN-based modality fusion: a complete modality-modality graph with virtual
//! target nodes, stacked blocks of grouped graph convolution, channel shuffle,
//! a two-layer FFN with residual, and LayerNorm. A product-of-experts fusion
//! operator is provided as the baseline.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Modality graph: conditional nodes form a complete subgraph, each target
/// (virtual) node connects to every conditional node, no target-target edges.
/// Adjacency is D^(-1/2) (A + I) D^(-1/2).
#[derive(Debug, Clone)]
pub struct FusionGraph {
    pub node_ids: Vec<usize>,
    pub cond_count: usize,
    pub target_count: usize,
    pub adjacency: Tensor,
}

pub fn build_graph(cond_ids: &[usize], target_ids: &[usize]) -> Result<FusionGraph> {
    if cond_ids.is_empty() {
        return Err(Error::Precondition(
            "fusion graph needs at least one conditional modality".into(),
        ));
    }
    let mut cond: Vec<usize> = cond_ids.to_vec();
    cond.sort_unstable();
    cond.dedup();
    let mut target: Vec<usize> = target_ids.to_vec();
    target.sort_unstable();
    target.dedup();
    if target.iter().any(|t| cond.contains(t)) {
        return Err(Error::Precondition(
            "conditional and target modality sets must be disjoint".into(),
        ));
    }
    let nc = cond.len();
    let nt = target.len();
    let n = nc + nt;
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        a.set(i, i, 1.0); // self-loop
    }
    for i in 0..nc {
        for j in 0..nc {
            if i != j {
                a.set(i, j, 1.0);
            }
        }
        for t in 0..nt {
            a.set(i, nc + t, 1.0);
            a.set(nc + t, i, 1.0);
        }
    }
    let mut deg = vec![0.0; n];
    for i in 0..n {
        deg[i] = (0..n).map(|j| a.at(i, j)).sum();
    }
    let mut adj = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let v = a.at(i, j) / (deg[i] * deg[j]).sqrt();
            adj.set(i, j, v);
        }
    }
    let mut node_ids = cond;
    node_ids.extend_from_slice(&target);
    Ok(FusionGraph {
        node_ids,
        cond_count: nc,
        target_count: nt,
        adjacency: adj,
    })
}

/// Virtual-node initialization: i.i.d. standard normal features.
pub fn init_target_nodes<R: Rng>(target_count: usize, d: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[target_count, d], rng)
}

#[derive(Debug, Clone, Copy)]
pub struct FusionConfig {
    pub n_blocks: usize,
    pub groups: usize,
    pub latent_dim: usize,
    pub ffn_hidden: usize,
}

impl FusionConfig {
    pub fn new(latent_dim: usize, n_blocks: usize, groups: usize) -> Self {
        Self {
            n_blocks,
            groups,
            latent_dim,
            ffn_hidden: 2 * latent_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.latent_dim % self.groups != 0 {
            return Err(Error::Config(format!(
                "groups ({}) must divide latent_dim ({})",
                self.groups, self.latent_dim
            )));
        }
        if self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self::new(16, 2, 4)
    }
}

/// Identical repeated blocks; parameters live under the `fusion.` prefix.
#[derive(Debug, Clone, Copy)]
pub struct FusionStack {
    pub cfg: FusionConfig,
}

impl FusionStack {
    pub fn new(cfg: FusionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.cfg.latent_dim;
        let per = d / self.cfg.groups;
        let h = self.cfg.ffn_hidden;
        for b in 0..self.cfg.n_blocks {
            for k in 0..self.cfg.groups {
                let scale = (2.0 / per as f64).sqrt();
                let w = Tensor::randn(&[per, per], rng).map(|v| v * scale);
                store.insert(format!("fusion.b{b}.conv.g{k}.w"), w);
            }
            let s1 = (2.0 / d as f64).sqrt();
            store.insert(
                format!("fusion.b{b}.ffn1.w"),
                Tensor::randn(&[d, h], rng).map(|v| v * s1),
            );
            store.insert(format!("fusion.b{b}.ffn1.b"), Tensor::zeros(&[h]));
            let s2 = (2.0 / h as f64).sqrt();
            store.insert(
                format!("fusion.b{b}.ffn2.w"),
                Tensor::randn(&[h, d], rng).map(|v| v * s2),
            );
            store.insert(format!("fusion.b{b}.ffn2.b"), Tensor::zeros(&[d]));
            store.insert(
                format!("fusion.b{b}.ln.gamma"),
                Tensor::new(vec![d], vec![1.0; d]).expect("shape"),
            );
            store.insert(format!("fusion.b{b}.ln.beta"), Tensor::zeros(&[d]));
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for b in 0..self.cfg.n_blocks {
            for k in 0..self.cfg.groups {
                names.push(format!("fusion.b{b}.conv.g{k}.w"));
            }
            for tail in ["ffn1.w", "ffn1.b", "ffn2.w", "ffn2.b", "ln.gamma", "ln.beta"] {
                names.push(format!("fusion.b{b}.{tail}"));
            }
        }
        names
    }
}

/// Grouped graph convolution over per-node feature tensors (each `(n, d)`,
/// one per graph node, all sharing the batch size `n`):
/// per group k, H'ₖ = Â Hₖ Wₖ; groups concatenated, then ReLU.
pub fn grouped_gcn_nodes(
    g: &mut Graph,
    nodes: &[NodeId],
    adjacency: &Tensor,
    conv_weights: &[NodeId],
    groups: usize,
) -> Result<Vec<NodeId>> {
    let n_nodes = nodes.len();
    assert_eq!(adjacency.rows(), n_nodes, "adjacency / node count mismatch");
    let d = g.value(nodes[0]).cols();
    if groups == 0 || d % groups != 0 {
        return Err(Error::Config(format!(
            "grouped_gcn: groups ({groups}) must divide feature dim ({d})"
        )));
    }
    let per = d / groups;
    // per node and group: projected slice X_i[:, k] W_k
    let mut projected: Vec<Vec<NodeId>> = Vec::with_capacity(n_nodes);
    for &node in nodes {
        let mut per_group = Vec::with_capacity(groups);
        for k in 0..groups {
            let slice = g.slice_cols(node, k * per, per);
            per_group.push(g.matmul(slice, conv_weights[k])?);
        }
        projected.push(per_group);
    }
    // message passing: out_j = sum_i adj[j, i] * proj_i, per group
    let mut out = Vec::with_capacity(n_nodes);
    for j in 0..n_nodes {
        let mut group_outputs = Vec::with_capacity(groups);
        for k in 0..groups {
            let mut terms = Vec::new();
            for (i, proj) in projected.iter().enumerate() {
                let w = adjacency.at(j, i);
                if w != 0.0 {
                    terms.push(g.scale(proj[k], w));
                }
            }
            group_outputs.push(g.add_n(&terms)?);
        }
        let cat = g.concat_cols(&group_outputs);
        out.push(g.relu(cat));
    }
    Ok(out)
}

/// Grouped graph convolution on a stacked `(N, d)` node-feature matrix.
pub fn grouped_gcn(
    g: &mut Graph,
    h: NodeId,
    adjacency: &Tensor,
    conv_weights: &[NodeId],
    groups: usize,
) -> Result<NodeId> {
    let n = g.value(h).rows();
    let nodes: Vec<NodeId> = (0..n).map(|i| g.slice_rows(h, i, 1)).collect();
    let out = grouped_gcn_nodes(g, &nodes, adjacency, conv_weights, groups)?;
    Ok(g.concat_rows(&out))
}

fn fusion_block(
    g: &mut Graph,
    store: &ParamStore,
    stack: &FusionStack,
    block: usize,
    nodes: &[NodeId],
    adjacency: &Tensor,
) -> Result<Vec<NodeId>> {
    let groups = stack.cfg.groups;
    let conv_weights: Vec<NodeId> = (0..groups)
        .map(|k| {
            let name = format!("fusion.b{block}.conv.g{k}.w");
            g.leaf(name.clone(), store.value(&name).clone())
        })
        .collect();
    let convolved = grouped_gcn_nodes(g, nodes, adjacency, &conv_weights, groups)?;

    let w1n = format!("fusion.b{block}.ffn1.w");
    let b1n = format!("fusion.b{block}.ffn1.b");
    let w2n = format!("fusion.b{block}.ffn2.w");
    let b2n = format!("fusion.b{block}.ffn2.b");
    let gn = format!("fusion.b{block}.ln.gamma");
    let bn = format!("fusion.b{block}.ln.beta");
    let w1 = g.leaf(w1n.clone(), store.value(&w1n).clone());
    let b1 = g.leaf(b1n.clone(), store.value(&b1n).clone());
    let w2 = g.leaf(w2n.clone(), store.value(&w2n).clone());
    let b2 = g.leaf(b2n.clone(), store.value(&b2n).clone());
    let gamma = g.leaf(gn.clone(), store.value(&gn).clone());
    let beta = g.leaf(bn.clone(), store.value(&bn).clone());

    let mut out = Vec::with_capacity(convolved.len());
    for t in convolved {
        let shuffled = g.channel_shuffle(t, groups)?;
        let h1 = g.linear(shuffled, w1, b1)?;
        let h1 = g.relu(h1);
        let ffn = g.linear(h1, w2, b2)?;
        let residual = g.add(shuffled, ffn)?;
        out.push(g.layer_norm(residual, gamma, beta, LAYER_NORM_EPS)?);
    }
    Ok(out)
}

/// Run the full fusion stack: build the modality graph, initialize virtual
/// target nodes from the rng, run all blocks, and return the final features
/// of the target nodes (map modality id -> node id of an `(n, d)` tensor).
///
/// `cond_latents` maps modality id to an `(n, d)` graph node (iteration is
/// over the sorted map, so insertion order never matters).
pub fn fuse<R: Rng>(
    g: &mut Graph,
    store: &ParamStore,
    stack: &FusionStack,
    cond_latents: &BTreeMap<usize, NodeId>,
    target_ids: &[usize],
    rng: &mut R,
) -> Result<BTreeMap<usize, NodeId>> {
    if cond_latents.is_empty() {
        return Err(Error::Precondition(
            "fuse requires at least one conditional latent".into(),
        ));
    }
    let cond_ids: Vec<usize> = cond_latents.keys().copied().collect();
    let graph = build_graph(&cond_ids, target_ids)?;
    let batch = g.value(*cond_latents.values().next().unwrap()).rows();
    let d = stack.cfg.latent_dim;

    let mut nodes: Vec<NodeId> = Vec::with_capacity(graph.node_ids.len());
    for id in &graph.node_ids[..graph.cond_count] {
        nodes.push(cond_latents[id]);
    }
    let init = init_target_nodes(graph.target_count, d, rng);
    for t in 0..graph.target_count {
        let mut row = Tensor::zeros(&[1, d]);
        for j in 0..d {
            row.set(0, j, init.at(t, j));
        }
        let leaf = g.constant(row);
        nodes.push(g.broadcast_rows(leaf, batch));
    }

    let mut current = nodes;
    for b in 0..stack.cfg.n_blocks {
        current = fusion_block(g, store, stack, b, &current, &graph.adjacency)?;
    }

    let mut out = BTreeMap::new();
    for (t, id) in graph.node_ids[graph.cond_count..].iter().enumerate() {
        out.insert(*id, current[graph.cond_count + t]);
    }
    Ok(out)
}

/// Differentiable product-of-experts fusion of Gaussian posteriors.
pub fn poe_fuse_graph(
    g: &mut Graph,
    experts: &[(NodeId, NodeId)],
    include_prior: bool,
) -> Result<(NodeId, NodeId)> {
    if experts.is_empty() {
        return Err(Error::Precondition("poe_fuse requires experts".into()));
    }
    let mut precisions = Vec::with_capacity(experts.len());
    let mut weighted = Vec::with_capacity(experts.len());
    for &(mu, lv) in experts {
        let neg = g.scale(lv, -1.0);
        let prec = g.exp(neg);
        weighted.push(g.mul(prec, mu)?);
        precisions.push(prec);
    }
    let mut total = g.add_n(&precisions)?;
    if include_prior {
        total = g.add_scalar(total, 1.0); // N(0, 1) prior expert
    }
    let num = g.add_n(&weighted)?;
    let mu = g.div(num, total)?;
    let ln_total = g.ln(total);
    let lv = g.scale(ln_total, -1.0);
    Ok((mu, lv))
}

/// Plain-tensor product-of-experts fusion (precision-weighted mean).
pub fn poe_fuse(experts: &[(Tensor, Tensor)], include_prior: bool) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let ids: Vec<(NodeId, NodeId)> = experts
        .iter()
        .map(|(mu, lv)| (g.constant(mu.clone()), g.constant(lv.clone())))
        .collect();
    let (mu, lv) = poe_fuse_graph(&mut g, &ids, include_prior)?;
    Ok((g.value(mu).clone(), g.value(lv).clone()))
}
