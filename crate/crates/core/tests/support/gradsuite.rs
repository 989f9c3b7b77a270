//! Central-difference gradient checks for every differentiable op and for the
//! end-to-end losses, on seeded random instances.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use graphpl_core::fusion::{self, FusionConfig, FusionStack};
use graphpl_core::gradcheck::{grad_check, NamedTensors};
use graphpl_core::graph::{Graph, NodeId};
use graphpl_core::params::ParamStore;
use graphpl_core::tensor::Tensor;
use graphpl_core::training::{FusionKind, ModelBundle, TrainConfig};
use graphpl_core::vae::{Likelihood, VaeConfig};
use graphpl_core::Result;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;
const INSTANCES: u64 = 10;

/// Run every check in the suite; panics on the first failure.
#[allow(dead_code)]
pub fn run_all() {
    linear_gradients();
    relu_gradients();
    layer_norm_gradients();
    reparameterize_gradients();
    gaussian_kl_gradients();
    recon_gaussian_gradients();
    recon_bernoulli_gradients();
    channel_shuffle_gradients();
    grouped_gcn_gradients();
    poe_fuse_gradients();
    fuse_pipeline_gradients();
    single_loss_gradients();
    impute_loss_gradients_gnn();
    impute_loss_gradients_poe();
    local_loss_gradients();
    decode_latent_gradients();
    finiteness_through_full_local_loss();
}

fn run_graph(
    inputs: &NamedTensors,
    build: impl Fn(&mut Graph, &BTreeMap<String, NodeId>) -> Result<NodeId>,
) -> Result<(f64, NamedTensors)> {
    let mut g = Graph::new();
    let ids: BTreeMap<String, NodeId> = inputs
        .iter()
        .map(|(k, v)| (k.clone(), g.leaf(k.clone(), v.clone())))
        .collect();
    let loss = build(&mut g, &ids)?;
    let value = g.value(loss).scalar_value();
    g.backward(loss)?;
    Ok((value, g.named_grads()))
}

fn check_instances(
    mut make_inputs: impl FnMut(&mut ChaCha20Rng) -> NamedTensors,
    build: impl Fn(&mut Graph, &BTreeMap<String, NodeId>) -> Result<NodeId> + Copy,
) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha20Rng::seed_from_u64(1000 + seed);
        let inputs = make_inputs(&mut rng);
        let err = grad_check(|ins| run_graph(ins, build), &inputs, EPS).unwrap();
        assert!(err < TOL, "seed {seed}: max relative error {err}");
    }
}

pub fn linear_gradients() {
    check_instances(
        |rng| {
            let mut m = NamedTensors::new();
            m.insert("x".into(), Tensor::randn(&[3, 4], rng));
            m.insert("w".into(), Tensor::randn(&[4, 5], rng));
            m.insert("b".into(), Tensor::randn(&[5], rng));
            m
        },
        |g, ids| {
            let y = g.linear(ids["x"], ids["w"], ids["b"])?;
            Ok(g.sum_all(y))
        },
    );
}

pub fn relu_gradients() {
    check_instances(
        |rng| {
            let mut m = NamedTensors::new();
            m.insert("x".into(), Tensor::randn(&[4, 6], rng));
            m
        },
        |g, ids| {
            let y = g.relu(ids["x"]);
            // square after relu so the loss is nonlinear in x
            let y2 = g.mul(y, y)?;
            Ok(g.sum_all(y2))
        },
    );
}

pub fn layer_norm_gradients() {
    check_instances(
        |rng| {
            let mut m = NamedTensors::new();
            m.insert("x".into(), Tensor::randn(&[3, 6], rng));
            m.insert("gamma".into(), Tensor::randn(&[6], rng));
            m.insert("beta".into(), Tensor::randn(&[6], rng));
            m
        },
        |g, ids| {
            let y = g.layer_norm(ids["x"], ids["gamma"], ids["beta"], 1e-5)?;
            let y2 = g.mul(y, y)?;
            Ok(g.sum_all(y2))
        },
    );
}

pub fn reparameterize_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha20Rng::seed_from_u64(2000 + seed);
        let mut inputs = NamedTensors::new();
        inputs.insert("mu".into(), Tensor::randn(&[2, 5], &mut rng));
        inputs.insert("logvar".into(), Tensor::randn(&[2, 5], &mut rng));
        let noise = Tensor::randn(&[2, 5], &mut rng);
        let err = grad_check(
            |ins| {
                run_graph(ins, |g, ids| {
                    let z = g.reparameterize(ids["mu"], ids["logvar"], noise.clone())?;
                    let z2 = g.mul(z, z)?;
                    Ok(g.sum_all(z2))
                })
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

pub fn gaussian_kl_gradients() {
    check_instances(
        |rng| {
            let mut m = NamedTensors::new();
            m.insert("mu".into(), Tensor::randn(&[2, 8], rng));
            m.insert("logvar".into(), Tensor::randn(&[2, 8], rng));
            m
        },
        |g, ids| g.gaussian_kl(ids["mu"], ids["logvar"]),
    );
}

pub fn recon_gaussian_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha20Rng::seed_from_u64(3000 + seed);
        let target = Tensor::randn(&[3, 4], &mut rng);
        let mut inputs = NamedTensors::new();
        inputs.insert("xhat".into(), Tensor::randn(&[3, 4], &mut rng));
        let err = grad_check(
            |ins| run_graph(ins, |g, ids| g.recon_gaussian(ids["xhat"], &target)),
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

pub fn recon_bernoulli_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha20Rng::seed_from_u64(4000 + seed);
        let target = Tensor::randn(&[2, 5], &mut rng).map(|v| 1.0 / (1.0 + (-v).exp()));
        let mut inputs = NamedTensors::new();
        inputs.insert("logits".into(), Tensor::randn(&[2, 5], &mut rng));
        let err = grad_check(
            |ins| run_graph(ins, |g, ids| g.recon_bernoulli(ids["logits"], &target)),
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

pub fn channel_shuffle_gradients() {
    check_instances(
        |rng| {
            let mut m = NamedTensors::new();
            m.insert("x".into(), Tensor::randn(&[3, 8], rng));
            m
        },
        |g, ids| {
            let y = g.channel_shuffle(ids["x"], 4)?;
            let y2 = g.mul(y, y)?;
            Ok(g.sum_all(y2))
        },
    );
}

pub fn grouped_gcn_gradients() {
    let graph_spec = fusion::build_graph(&[0, 1, 2], &[3]).unwrap();
    for seed in 0..INSTANCES {
        let mut rng = ChaCha20Rng::seed_from_u64(5000 + seed);
        let mut inputs = NamedTensors::new();
        inputs.insert("h".into(), Tensor::randn(&[4, 8], &mut rng));
        inputs.insert("w0".into(), Tensor::randn(&[4, 4], &mut rng));
        inputs.insert("w1".into(), Tensor::randn(&[4, 4], &mut rng));
        let adj = graph_spec.adjacency.clone();
        let err = grad_check(
            |ins| {
                run_graph(ins, |g, ids| {
                    let y = fusion::grouped_gcn(g, ids["h"], &adj, &[ids["w0"], ids["w1"]], 2)?;
                    let y2 = g.mul(y, y)?;
                    Ok(g.sum_all(y2))
                })
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

pub fn poe_fuse_gradients() {
    check_instances(
        |rng| {
            let mut m = NamedTensors::new();
            for i in 0..3 {
                m.insert(format!("mu{i}"), Tensor::randn(&[1, 4], rng));
                m.insert(format!("lv{i}"), Tensor::randn(&[1, 4], rng));
            }
            m
        },
        |g, ids| {
            let experts: Vec<(NodeId, NodeId)> = (0..3)
                .map(|i| (ids[&format!("mu{i}")], ids[&format!("lv{i}")]))
                .collect();
            let (mu, lv) = fusion::poe_fuse_graph(g, &experts, true)?;
            let m2 = g.mul(mu, mu)?;
            let sum_mu = g.sum_all(m2);
            let sum_lv = g.sum_all(lv);
            g.add(sum_mu, sum_lv)
        },
    );
}

/// Full fusion pipeline: 3 conditional latents, 1 target, d = 8, end-to-end.
pub fn fuse_pipeline_gradients() {
    let stack = FusionStack::new(FusionConfig::new(8, 2, 4)).unwrap();
    for seed in 0..INSTANCES {
        let mut rng = ChaCha20Rng::seed_from_u64(6000 + seed);
        let mut store = ParamStore::new();
        stack.init_params(&mut store, &mut rng);
        jitter(&mut store, &mut rng);
        let mut inputs: NamedTensors = store.snapshot(|_| true);
        for m in 0..3 {
            inputs.insert(format!("lat{m}"), Tensor::randn(&[1, 8], &mut rng));
        }
        let err = grad_check(
            |ins| {
                let mut store = ParamStore::new();
                for (name, value) in ins {
                    if !name.starts_with("lat") {
                        store.insert(name.clone(), value.clone());
                    }
                }
                let mut g = Graph::new();
                let mut cond = BTreeMap::new();
                for m in 0..3usize {
                    cond.insert(m, g.leaf(format!("lat{m}"), ins[&format!("lat{m}")].clone()));
                }
                let mut vrng = ChaCha20Rng::seed_from_u64(99);
                let out = fusion::fuse(&mut g, &store, &stack, &cond, &[3], &mut vrng)?;
                let target = out[&3];
                let t2 = g.mul(target, target)?;
                let loss = g.sum_all(t2);
                let value = g.value(loss).scalar_value();
                g.backward(loss)?;
                Ok((value, g.named_grads()))
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

/// Add small noise to every parameter. Fresh layers have zero biases, so a
/// fully dead relu row makes the next preactivation exactly zero and central
/// differences straddle the kink; jitter moves the check off that point.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha20Rng) {
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let mut t = store.value(&name).clone();
        let noise = Tensor::randn(t.shape(), rng);
        t.add_scaled(&noise, 0.05);
        store.set_value(&name, t);
    }
}

fn tiny_bundle(seed: u64, fusion_kind: FusionKind) -> ModelBundle {
    let vae_cfg = VaeConfig {
        beta: 1.0,
        likelihood: Likelihood::GaussianUnitVar,
        input_dim: 4,
        hidden_dim: 5,
        latent_dim: 4,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut bundle = ModelBundle::new(3, (0..3).collect(), fusion_kind, vae_cfg, &mut rng);
    jitter(&mut bundle.params, &mut rng);
    bundle
}

fn gnn_kind() -> FusionKind {
    FusionKind::Gnn(FusionStack::new(FusionConfig::new(4, 1, 2)).unwrap())
}

fn bundle_with_params(reference: &ModelBundle, params: &NamedTensors) -> ModelBundle {
    let mut bundle = reference.clone();
    for (name, value) in params {
        bundle.params.set_value(name, value.clone());
    }
    bundle
}

/// Gradient-check a bundle loss over every parameter the loss reaches.
/// `expect_reached` must hold for the set of touched parameter names.
fn check_bundle_loss(
    seed_base: u64,
    fusion_kind: FusionKind,
    loss_of: impl Fn(&ModelBundle, &BTreeMap<usize, Tensor>) -> Result<(f64, NamedTensors)>,
    expect_reached: impl Fn(&BTreeSet<String>) -> bool,
) {
    for seed in 0..INSTANCES {
        let reference = tiny_bundle(seed_base + seed, fusion_kind);
        let mut rng = ChaCha20Rng::seed_from_u64(seed_base + 1000 + seed);
        let batch: BTreeMap<usize, Tensor> = (0..3)
            .map(|m| (m, Tensor::randn(&[2, 4], &mut rng)))
            .collect();
        let (_, reference_grads) = loss_of(&reference, &batch).unwrap();
        let reached: BTreeSet<String> = reference_grads.keys().cloned().collect();
        assert!(expect_reached(&reached), "seed {seed}: reached {reached:?}");
        let inputs = reference.params.snapshot(|name| reached.contains(name));
        let err = grad_check(
            |ins| {
                let bundle = bundle_with_params(&reference, ins);
                loss_of(&bundle, &batch)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

pub fn single_loss_gradients() {
    check_bundle_loss(
        7300,
        gnn_kind(),
        |bundle, batch| {
            let mut g = Graph::new();
            let mut rng = ChaCha20Rng::seed_from_u64(42);
            let noise = Tensor::randn(&[2, 4], &mut rng);
            let loss = bundle.vaes[&0].single_loss(
                &mut g,
                &bundle.params,
                &batch[&0],
                &bundle.vae_cfg,
                noise,
            )?;
            let value = g.value(loss).scalar_value();
            g.backward(loss)?;
            Ok((value, g.named_grads()))
        },
        |reached| {
            reached.iter().all(|n| n.starts_with("vae.0."))
                && reached.iter().filter(|n| n.ends_with(".w")).count() == 7
        },
    );
}

pub fn impute_loss_gradients_gnn() {
    // target 1: its encoder stays untouched, its decoder and the conditional
    // encoders plus the fusion stack all receive gradients
    check_bundle_loss(
        7000,
        gnn_kind(),
        |bundle, batch| {
            let mut g = Graph::new();
            let mut rng = ChaCha20Rng::seed_from_u64(43);
            let loss = bundle.impute_loss(&mut g, batch, 1, &mut rng)?;
            let value = g.value(loss).scalar_value();
            g.backward(loss)?;
            Ok((value, g.named_grads()))
        },
        |reached| {
            reached.contains("vae.0.enc1.w")
                && reached.contains("vae.2.mu.w")
                && reached.contains("vae.1.dec1.w")
                && reached.contains("fusion.b0.conv.g0.w")
                && !reached.contains("vae.1.enc1.w")
        },
    );
}

pub fn impute_loss_gradients_poe() {
    check_bundle_loss(
        7000,
        FusionKind::Poe,
        |bundle, batch| {
            let mut g = Graph::new();
            let mut rng = ChaCha20Rng::seed_from_u64(44);
            let loss = bundle.impute_loss(&mut g, batch, 2, &mut rng)?;
            let value = g.value(loss).scalar_value();
            g.backward(loss)?;
            Ok((value, g.named_grads()))
        },
        |reached| {
            reached.contains("vae.0.logvar.w")
                && reached.contains("vae.1.logvar.w")
                && reached.contains("vae.2.out.w")
                && !reached.contains("vae.2.enc1.w")
        },
    );
}

pub fn local_loss_gradients() {
    let cfg = TrainConfig {
        lambda: 0.7,
        beta: 0.5,
        ..TrainConfig::default()
    };
    let reference = tiny_bundle(1, gnn_kind());
    let all_names: BTreeSet<String> = reference.params.names().cloned().collect();
    check_bundle_loss(
        7000,
        gnn_kind(),
        move |bundle, batch| {
            let mut g = Graph::new();
            let mut rng = ChaCha20Rng::seed_from_u64(45);
            let loss = bundle.local_loss(&mut g, batch, &cfg, &mut rng)?;
            let value = g.value(loss).scalar_value();
            g.backward(loss)?;
            Ok((value, g.named_grads()))
        },
        move |reached| *reached == all_names,
    );
}

/// Gradient of the imputation reconstruction w.r.t. the latent input.
pub fn decode_latent_gradients() {
    let reference = tiny_bundle(70, gnn_kind());
    for seed in 0..INSTANCES {
        let mut rng = ChaCha20Rng::seed_from_u64(9000 + seed);
        let target = Tensor::randn(&[2, 4], &mut rng);
        let mut inputs = NamedTensors::new();
        inputs.insert("z".into(), Tensor::randn(&[2, 4], &mut rng));
        let err = grad_check(
            |ins| {
                let mut g = Graph::new();
                let z = g.leaf("z", ins["z"].clone());
                let xhat = reference.vaes[&0].decode(&mut g, &reference.params, z)?;
                let loss = g.recon_gaussian(xhat, &target)?;
                let value = g.value(loss).scalar_value();
                g.backward(loss)?;
                Ok((value, g.named_grads()))
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

/// Forward ops on finite inputs produce finite outputs and gradients.
pub fn finiteness_through_full_local_loss() {
    let bundle = tiny_bundle(80, gnn_kind());
    let mut rng = ChaCha20Rng::seed_from_u64(81);
    let batch: BTreeMap<usize, Tensor> = (0..3)
        .map(|m| (m, Tensor::randn(&[3, 4], &mut rng)))
        .collect();
    let cfg = TrainConfig::default();
    let mut g = Graph::new();
    let loss = bundle.local_loss(&mut g, &batch, &cfg, &mut rng).unwrap();
    assert!(g.value(loss).scalar_value().is_finite());
    g.backward(loss).unwrap();
    for (_, grad) in g.named_grads() {
        assert!(grad.all_finite());
    }
}
