//! Client/server simulation of synchronous federated rounds: parameter
//! packaging, sample-count-weighted FedAvg with per-modality coverage,
//! broadcast, and the orchestration loop. Message passing is modeled by
//! explicit package/broadcast calls at round barriers.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::params::Adam;
use crate::tensor::Tensor;
use crate::training::{local_round, FusionKind, ModelBundle, TrainConfig};
use crate::vae::VaeConfig;

#[derive(Debug)]
pub struct ClientState {
    pub client_id: usize,
    pub observed: BTreeSet<usize>,
    pub shard: Vec<Sample>,
    pub bundle: ModelBundle,
    pub optimizer: Adam,
    pub sample_count: usize,
}

/// Named tensors uploaded by one client: its observed-modality VAEs plus the
/// fusion parameters, deep-copied at the barrier.
#[derive(Debug, Clone)]
pub struct ParamPackage {
    pub client_id: usize,
    pub weight: usize,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone)]
pub struct GlobalModel {
    pub tensors: BTreeMap<String, Tensor>,
    pub round_index: usize,
}

impl GlobalModel {
    /// FNV-1a over sorted names and little-endian value bytes.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, tensor) in &self.tensors {
            eat(name.as_bytes());
            for &v in tensor.data() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }
}

/// Deep copy of the client's uploadable parameters; later mutation of the
/// live bundle does not affect the package.
pub fn package(client: &ClientState) -> ParamPackage {
    let observed = client.observed.clone();
    let tensors = client.bundle.params.snapshot(|name| {
        if name.starts_with("fusion.") {
            return true;
        }
        observed
            .iter()
            .any(|m| name.starts_with(&format!("vae.{m}.")))
    });
    ParamPackage {
        client_id: client.client_id,
        weight: client.sample_count,
        tensors,
    }
}

/// Sample-count-weighted average per named tensor over the packages that
/// contain it; uncovered names retain the previous global value. Accumulation
/// runs in client-id order, and a name contributed by a single client (or by
/// clients holding bit-identical tensors) is copied bit-exactly.
pub fn fedavg(packages: &[ParamPackage], prev: &GlobalModel) -> Result<GlobalModel> {
    if packages.is_empty() {
        return Err(Error::Precondition("fedavg requires packages".into()));
    }
    let mut ordered: Vec<&ParamPackage> = packages.iter().collect();
    ordered.sort_by_key(|p| p.client_id);

    let mut names: BTreeSet<&String> = prev.tensors.keys().collect();
    for p in &ordered {
        names.extend(p.tensors.keys());
    }

    let mut tensors = BTreeMap::new();
    for name in names {
        let contributors: Vec<&ParamPackage> = ordered
            .iter()
            .copied()
            .filter(|p| p.tensors.contains_key(name))
            .collect();
        if contributors.is_empty() {
            tensors.insert(name.clone(), prev.tensors[name].clone());
            continue;
        }
        let first = &contributors[0].tensors[name];
        for p in &contributors[1..] {
            if !p.tensors[name].same_shape(first) {
                return Err(Error::Aggregation {
                    name: name.clone(),
                    lhs: first.shape().to_vec(),
                    rhs: p.tensors[name].shape().to_vec(),
                });
            }
        }
        let all_identical = contributors[1..]
            .iter()
            .all(|p| p.tensors[name] == *first);
        if all_identical {
            tensors.insert(name.clone(), first.clone());
            continue;
        }
        let total: f64 = contributors.iter().map(|p| p.weight as f64).sum();
        let mut acc = Tensor::zeros(first.shape());
        for p in &contributors {
            acc.add_scaled(&p.tensors[name], p.weight as f64);
        }
        tensors.insert(name.clone(), acc.map(|v| v / total));
    }
    Ok(GlobalModel {
        tensors,
        round_index: prev.round_index + 1,
    })
}

/// Overwrite each client's trainable parameters from the global model and
/// refresh its cache of all shared decoders.
pub fn broadcast(global: &GlobalModel, clients: &mut [ClientState]) {
    for client in clients.iter_mut() {
        let names: Vec<String> = client.bundle.params.names().cloned().collect();
        for name in names {
            if let Some(value) = global.tensors.get(&name) {
                client.bundle.params.set_value(&name, value.clone());
            }
        }
        let mut cache = BTreeMap::new();
        for (m, vae) in client.bundle.vaes.clone() {
            if client.observed.contains(&m) {
                continue; // own decoder is live
            }
            for name in vae.decoder_param_names() {
                if let Some(value) = global.tensors.get(&name) {
                    cache.insert(name, value.clone());
                }
            }
        }
        client.bundle.decoder_cache = cache;
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Per-client, per-round rng seed derived from the master seed; independent
/// of scheduling order.
pub fn client_round_seed(master_seed: u64, client_id: usize, round: usize) -> u64 {
    splitmix64(
        master_seed
            .wrapping_mul(0x5851f42d4c957f2d)
            .wrapping_add((client_id as u64) << 32)
            .wrapping_add(round as u64),
    )
}

#[derive(Debug, Clone)]
pub struct FederationConfig {
    pub global_rounds: usize,
    pub train: TrainConfig,
    pub master_seed: u64,
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub round: usize,
    /// (client_id, mean local loss over the round's trace)
    pub client_losses: Vec<(usize, f64)>,
}

/// Initialize the global model (all M modalities plus fusion) and one client
/// per patchwork entry, then broadcast so everyone starts identical.
pub fn init_clients(
    shards: Vec<Vec<Sample>>,
    patchwork: &[BTreeSet<usize>],
    modalities: usize,
    vae_cfg: VaeConfig,
    fusion: FusionKind,
    master_seed: u64,
) -> Result<(Vec<ClientState>, GlobalModel)> {
    if shards.len() != patchwork.len() {
        return Err(Error::Precondition(
            "shard count must match patchwork size".into(),
        ));
    }
    let mut init_rng = ChaCha20Rng::seed_from_u64(splitmix64(master_seed));
    let server_bundle = ModelBundle::new(
        modalities,
        (0..modalities).collect(),
        fusion,
        vae_cfg,
        &mut init_rng,
    );
    let global = GlobalModel {
        tensors: server_bundle.params.snapshot(|_| true),
        round_index: 0,
    };
    let mut clients = Vec::with_capacity(shards.len());
    for (client_id, (shard, observed)) in shards.into_iter().zip(patchwork.iter()).enumerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(client_round_seed(master_seed, client_id, 0));
        let bundle = ModelBundle::new(modalities, observed.clone(), fusion, vae_cfg, &mut rng);
        let sample_count = shard.len();
        clients.push(ClientState {
            client_id,
            observed: observed.clone(),
            shard,
            bundle,
            optimizer: Adam::new(0.0), // lr set by run_federation from the train config
            sample_count,
        });
    }
    broadcast(&global, &mut clients);
    Ok((clients, global))
}

fn run_client_round(
    client: &mut ClientState,
    cfg: &FederationConfig,
    round: usize,
) -> Result<f64> {
    let seed = client_round_seed(cfg.master_seed, client.client_id, round + 1);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let trace = local_round(
        &mut client.bundle,
        &mut client.optimizer,
        &client.shard,
        &client.observed.clone(),
        &cfg.train,
        &mut rng,
    )?;
    Ok(trace.iter().sum::<f64>() / trace.len() as f64)
}

/// Alternate local rounds on every client with fedavg + broadcast for
/// `global_rounds` iterations. Client rounds may run on multiple workers;
/// per-client determinism makes the result schedule-independent.
pub fn run_federation(
    clients: &mut [ClientState],
    global: &mut GlobalModel,
    cfg: &FederationConfig,
    mut on_round: impl FnMut(usize, &GlobalModel),
) -> Result<Vec<RoundMetrics>> {
    if clients.is_empty() {
        return Err(Error::Precondition("no clients".into()));
    }
    for client in clients.iter_mut() {
        client.optimizer.lr = cfg.train.learning_rate;
    }
    let workers = cfg.workers.max(1);
    let mut metrics = Vec::with_capacity(cfg.global_rounds);
    for round in 0..cfg.global_rounds {
        let mut losses: Vec<(usize, f64)> = if workers == 1 || clients.len() == 1 {
            clients
                .iter_mut()
                .map(|c| Ok((c.client_id, run_client_round(c, cfg, round)?)))
                .collect::<Result<Vec<_>>>()?
        } else {
            let mut buckets: Vec<Vec<&mut ClientState>> = (0..workers).map(|_| Vec::new()).collect();
            for (i, client) in clients.iter_mut().enumerate() {
                buckets[i % workers].push(client);
            }
            std::thread::scope(|scope| {
                let handles: Vec<_> = buckets
                    .into_iter()
                    .map(|mut bucket| {
                        scope.spawn(move || {
                            bucket
                                .iter_mut()
                                .map(|c| Ok((c.client_id, run_client_round(c, cfg, round)?)))
                                .collect::<Result<Vec<_>>>()
                        })
                    })
                    .collect();
                let mut all = Vec::new();
                for handle in handles {
                    all.extend(handle.join().expect("worker panicked")?);
                }
                Ok::<_, Error>(all)
            })?
        };
        losses.sort_by_key(|(id, _)| *id);

        let packages: Vec<ParamPackage> = clients.iter().map(|c| package(c)).collect();
        *global = fedavg(&packages, global)?;
        broadcast(global, clients);
        metrics.push(RoundMetrics {
            round: round + 1,
            client_losses: losses,
        });
        on_round(round + 1, global);
    }
    Ok(metrics)
}

/// Rebuild a full (all-modality) bundle from global tensors, for evaluation.
pub fn bundle_from_global(
    global: &GlobalModel,
    modalities: usize,
    vae_cfg: VaeConfig,
    fusion: FusionKind,
) -> Result<ModelBundle> {
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut bundle = ModelBundle::new(
        modalities,
        (0..modalities).collect(),
        fusion,
        vae_cfg,
        &mut rng,
    );
    let names: Vec<String> = bundle.params.names().cloned().collect();
    for name in names {
        match global.tensors.get(&name) {
            Some(value) => bundle.params.set_value(&name, value.clone()),
            None => {
                return Err(Error::Checkpoint(format!(
                    "global model missing tensor '{name}'"
                )))
            }
        }
    }
    Ok(bundle)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"GPL1";

/// Portable binary checkpoint: magic "GPL1", u32 tensor count, then per
/// tensor a length-prefixed UTF-8 name, u32 rank, u32 dims, and f64 values,
/// all little-endian.
pub fn save_checkpoint(global: &GlobalModel, path: &Path) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(global.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &global.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<GlobalModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };
    let magic = take(&mut cursor, 4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 tensor name".into()))?;
        let rank = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|_| Error::Checkpoint("inconsistent tensor shape".into()))?;
        tensors.insert(name, tensor);
    }
    Ok(GlobalModel {
        tensors,
        round_index: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{FusionConfig, FusionStack};

    fn scalar_package(client_id: usize, weight: usize, pairs: &[(&str, f64)]) -> ParamPackage {
        ParamPackage {
            client_id,
            weight,
            tensors: pairs
                .iter()
                .map(|(k, v)| (k.to_string(), Tensor::vector(&[*v])))
                .collect(),
        }
    }

    fn empty_global() -> GlobalModel {
        GlobalModel {
            tensors: BTreeMap::new(),
            round_index: 0,
        }
    }

    #[test]
    fn fedavg_arithmetic_mean() {
        let packages = vec![
            scalar_package(0, 1, &[("p", 1.0)]),
            scalar_package(1, 1, &[("p", 3.0)]),
        ];
        let out = fedavg(&packages, &empty_global()).unwrap();
        assert_eq!(out.tensors["p"].data(), &[2.0]);
        assert_eq!(out.round_index, 1);
    }

    #[test]
    fn fedavg_weighted_mean() {
        let packages = vec![
            scalar_package(0, 1, &[("p", 0.0)]),
            scalar_package(1, 3, &[("p", 4.0)]),
        ];
        let out = fedavg(&packages, &empty_global()).unwrap();
        assert_eq!(out.tensors["p"].data(), &[3.0]);
    }

    #[test]
    fn fedavg_singleton_is_bit_exact() {
        let value = 0.1 + 0.2; // not exactly representable as 0.3
        let packages = vec![
            scalar_package(0, 7, &[("vae.1.enc1.w", value)]),
            scalar_package(1, 3, &[("other", 1.0)]),
        ];
        let out = fedavg(&packages, &empty_global()).unwrap();
        assert_eq!(out.tensors["vae.1.enc1.w"].data()[0].to_bits(), value.to_bits());
    }

    #[test]
    fn fedavg_identical_tensors_returned_exactly() {
        let v = 0.1;
        let packages = vec![
            scalar_package(0, 1, &[("p", v)]),
            scalar_package(1, 1, &[("p", v)]),
            scalar_package(2, 1, &[("p", v)]),
        ];
        let out = fedavg(&packages, &empty_global()).unwrap();
        assert_eq!(out.tensors["p"].data()[0].to_bits(), v.to_bits());
    }

    #[test]
    fn fedavg_permutation_invariant() {
        let a = scalar_package(0, 2, &[("p", 0.125)]);
        let b = scalar_package(1, 5, &[("p", -1.75)]);
        let c = scalar_package(2, 1, &[("p", 3.5)]);
        let out1 = fedavg(&[a.clone(), b.clone(), c.clone()], &empty_global()).unwrap();
        let out2 = fedavg(&[c, a, b], &empty_global()).unwrap();
        assert_eq!(
            out1.tensors["p"].data()[0].to_bits(),
            out2.tensors["p"].data()[0].to_bits()
        );
    }

    #[test]
    fn fedavg_uncovered_name_retains_previous() {
        let mut prev = empty_global();
        prev.tensors.insert("stale".into(), Tensor::vector(&[9.0]));
        let packages = vec![scalar_package(0, 1, &[("p", 1.0)])];
        let out = fedavg(&packages, &prev).unwrap();
        assert_eq!(out.tensors["stale"].data(), &[9.0]);
    }

    #[test]
    fn fedavg_shape_mismatch_identifies_name() {
        let mut a = scalar_package(0, 1, &[]);
        a.tensors.insert("p".into(), Tensor::vector(&[1.0, 2.0]));
        let b = scalar_package(1, 1, &[("p", 1.0)]);
        let err = fedavg(&[a, b], &empty_global()).unwrap_err();
        assert!(err.to_string().contains("'p'"));
    }

    fn desk_setup(
        master_seed: u64,
    ) -> (Vec<ClientState>, GlobalModel, FederationConfig) {
        use crate::data::{build_patchwork, build_prototypes, generate, split_heterogeneous, DropPolicy, SyntheticSpec};
        let spec = SyntheticSpec {
            dim: 8,
            sigma_data: 0.3,
            ..SyntheticSpec::default()
        };
        let protos = build_prototypes(&spec).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
        let samples = generate(&spec, &protos, 200, &mut rng);
        let shards = split_heterogeneous(samples, 3, spec.n_classes, 5, &mut rng).unwrap();
        let patchwork =
            build_patchwork(3, spec.modalities, &DropPolicy::DropExactly { k: 1 }, &mut rng)
                .unwrap();
        let vae_cfg = VaeConfig {
            input_dim: 8,
            hidden_dim: 16,
            latent_dim: 8,
            ..VaeConfig::default()
        };
        let stack = FusionStack::new(FusionConfig::new(8, 1, 2)).unwrap();
        let (clients, global) = init_clients(
            shards,
            &patchwork,
            spec.modalities,
            vae_cfg,
            FusionKind::Gnn(stack),
            master_seed,
        )
        .unwrap();
        let cfg = FederationConfig {
            global_rounds: 3,
            train: TrainConfig {
                local_steps: 5,
                batch_size: 8,
                ..TrainConfig::default()
            },
            master_seed,
            workers: 1,
        };
        (clients, global, cfg)
    }

    #[test]
    fn package_names_respect_coverage() {
        let (clients, _, _) = desk_setup(3);
        for client in &clients {
            let pkg = package(client);
            assert_eq!(pkg.weight, client.sample_count);
            assert!(pkg.tensors.keys().any(|k| k.starts_with("fusion.")));
            for m in 0..3usize {
                let has = pkg.tensors.keys().any(|k| k.starts_with(&format!("vae.{m}.")));
                assert_eq!(has, client.observed.contains(&m), "modality {m}");
            }
        }
    }

    #[test]
    fn package_is_deep_copy() {
        let (mut clients, _, _) = desk_setup(4);
        let pkg = package(&clients[0]);
        let name = pkg.tensors.keys().next().unwrap().clone();
        let before = pkg.tensors[&name].clone();
        let shape = clients[0].bundle.params.value(&name).shape().to_vec();
        clients[0]
            .bundle
            .params
            .set_value(&name, Tensor::zeros(&shape).map(|_| 123.0));
        assert_eq!(pkg.tensors[&name], before);
    }

    #[test]
    fn broadcast_synchronizes_shared_modalities() {
        let (mut clients, global, _) = desk_setup(5);
        broadcast(&global, &mut clients);
        for m in 0..3usize {
            let holders: Vec<&ClientState> =
                clients.iter().filter(|c| c.observed.contains(&m)).collect();
            for pair in holders.windows(2) {
                let name = format!("vae.{m}.enc1.w");
                assert_eq!(
                    pair[0].bundle.params.value(&name),
                    pair[1].bundle.params.value(&name)
                );
            }
        }
        // broadcast then package round-trips fusion params bit-exactly
        let pkg = package(&clients[0]);
        for (name, tensor) in &pkg.tensors {
            if name.starts_with("fusion.") {
                assert_eq!(tensor, &global.tensors[name]);
            }
        }
    }

    #[test]
    fn global_model_covers_all_modalities_after_round() {
        let (mut clients, mut global, cfg) = desk_setup(6);
        run_federation(&mut clients, &mut global, &cfg, |_, _| {}).unwrap();
        for m in 0..3usize {
            assert!(global.tensors.contains_key(&format!("vae.{m}.dec1.w")));
            assert!(global.tensors.contains_key(&format!("vae.{m}.enc1.w")));
        }
        assert_eq!(global.round_index, cfg.global_rounds);
    }

    #[test]
    fn federation_deterministic_and_schedule_independent() {
        let run = |workers: usize| {
            let (mut clients, mut global, mut cfg) = desk_setup(7);
            cfg.workers = workers;
            run_federation(&mut clients, &mut global, &cfg, |_, _| {}).unwrap();
            global.checksum()
        };
        let a = run(1);
        let b = run(1);
        let c = run(3);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn federation_training_progress() {
        let (mut clients, mut global, mut cfg) = desk_setup(8);
        cfg.global_rounds = 12;
        cfg.train.local_steps = 20;
        let metrics = run_federation(&mut clients, &mut global, &cfg, |_, _| {}).unwrap();
        let mean = |m: &RoundMetrics| {
            m.client_losses.iter().map(|(_, l)| l).sum::<f64>() / m.client_losses.len() as f64
        };
        assert!(mean(metrics.last().unwrap()) < mean(&metrics[0]));
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let (_, global, _) = desk_setup(9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gpl1");
        save_checkpoint(&global, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.tensors.len(), global.tensors.len());
        for (name, tensor) in &global.tensors {
            let other = &loaded.tensors[name];
            assert_eq!(tensor.shape(), other.shape());
            for (a, b) in tensor.data().iter().zip(other.data().iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.gpl1");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
