//! Synthetic multi-modal data with known class structure, heterogeneous
//! client partitioning, and the noise-interpolation corruption used by the
//! robustness probe.
//!
//! Every modality renders the same class label through its own set of class
//! prototypes; views are prototype + isotropic Gaussian noise. Prototypes are
//! separated by a margin wide enough that nearest-prototype classification is
//! near-perfect, which makes it usable as the evaluation oracle.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub modalities: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub sigma_data: f64,
    /// Optional per-modality noise levels (heterogeneous-noise regimes);
    /// when set it must have one entry per modality and overrides
    /// `sigma_data`.
    pub sigma_per_modality: Option<Vec<f64>>,
    pub prototype_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            modalities: 3,
            n_classes: 10,
            dim: 32,
            sigma_data: 1.2,
            sigma_per_modality: None,
            prototype_scale: 8.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Noise level of modality `m`.
    pub fn sigma(&self, m: usize) -> f64 {
        match &self.sigma_per_modality {
            Some(v) => v[m],
            None => self.sigma_data,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub label: usize,
    /// views[m] is the `dim`-vector rendering of the label in modality m.
    pub views: Vec<Tensor>,
}

/// Per-modality, per-class prototype vectors.
#[derive(Debug, Clone)]
pub struct Prototypes {
    /// indexed [modality][class]
    pub vectors: Vec<Vec<Tensor>>,
    pub scale: f64,
}

impl Prototypes {
    /// Minimum pairwise prototype distance within modality `m`.
    pub fn margin_of(&self, m: usize) -> f64 {
        let per_modality = &self.vectors[m];
        let mut min = f64::INFINITY;
        for i in 0..per_modality.len() {
            for j in (i + 1)..per_modality.len() {
                let d = per_modality[i].squared_distance(&per_modality[j]).sqrt();
                min = min.min(d);
            }
        }
        min
    }

    /// Minimum pairwise prototype distance over all modalities.
    pub fn min_margin(&self) -> f64 {
        (0..self.vectors.len())
            .map(|m| self.margin_of(m))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Draw class prototypes, redrawing (bounded) until each modality's margin
/// exceeds 6 times that modality's noise level.
pub fn build_prototypes(spec: &SyntheticSpec) -> Result<Prototypes> {
    if let Some(v) = &spec.sigma_per_modality {
        if v.len() != spec.modalities {
            return Err(Error::Config(format!(
                "sigma_per_modality has {} entries for {} modalities",
                v.len(),
                spec.modalities
            )));
        }
    }
    for attempt in 0..100u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed.wrapping_add(attempt.wrapping_mul(0x9e37)));
        let vectors: Vec<Vec<Tensor>> = (0..spec.modalities)
            .map(|_| {
                (0..spec.n_classes)
                    .map(|_| {
                        let raw = Tensor::randn(&[spec.dim], &mut rng);
                        let norm = raw.norm().max(1e-12);
                        raw.map(|v| v * spec.prototype_scale / norm)
                    })
                    .collect()
            })
            .collect();
        let protos = Prototypes {
            vectors,
            scale: spec.prototype_scale,
        };
        if (0..spec.modalities).all(|m| protos.margin_of(m) > 6.0 * spec.sigma(m)) {
            return Ok(protos);
        }
    }
    Err(Error::Config(
        "could not draw prototypes with margin > 6 * sigma; increase prototype_scale or lower the noise"
            .into(),
    ))
}

/// Generate `n` samples: uniform labels, view = prototype + sigma * N(0, I).
pub fn generate<R: Rng>(
    spec: &SyntheticSpec,
    protos: &Prototypes,
    n: usize,
    rng: &mut R,
) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let label = rng.gen_range(0..spec.n_classes);
            let views = (0..spec.modalities)
                .map(|m| {
                    let noise = Tensor::randn(&[spec.dim], rng);
                    let mut v = protos.vectors[m][label].clone();
                    v.add_scaled(&noise, spec.sigma(m));
                    v
                })
                .collect();
            Sample { label, views }
        })
        .collect()
}

/// Class-imbalanced split: each client is assigned `classes_per_client`
/// classes (covering all classes), then samples are dealt to a uniformly
/// chosen client among those holding the sample's class.
pub fn split_heterogeneous<R: Rng>(
    samples: Vec<Sample>,
    n_clients: usize,
    n_classes: usize,
    classes_per_client: usize,
    rng: &mut R,
) -> Result<Vec<Vec<Sample>>> {
    if classes_per_client == 0 || classes_per_client > n_classes {
        return Err(Error::Config(format!(
            "classes_per_client ({classes_per_client}) must be in 1..={n_classes}"
        )));
    }
    if n_clients * classes_per_client < n_classes {
        return Err(Error::Config(format!(
            "{n_clients} clients x {classes_per_client} classes cannot cover {n_classes} classes"
        )));
    }
    // deal a shuffled class list round-robin so every class is covered, then
    // fill remaining slots with classes the client does not yet hold
    let mut class_order: Vec<usize> = (0..n_classes).collect();
    shuffle(&mut class_order, rng);
    let mut assigned: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_clients];
    for (i, c) in class_order.iter().enumerate() {
        assigned[i % n_clients].insert(*c);
    }
    for set in assigned.iter_mut() {
        while set.len() < classes_per_client {
            let c = rng.gen_range(0..n_classes);
            set.insert(c);
        }
        while set.len() > classes_per_client {
            // only possible when n_classes > n_clients * classes_per_client,
            // which the feasibility check rules out
            let last = *set.iter().last().unwrap();
            set.remove(&last);
        }
    }
    let mut shards: Vec<Vec<Sample>> = vec![Vec::new(); n_clients];
    for sample in samples {
        let holders: Vec<usize> = (0..n_clients)
            .filter(|&i| assigned[i].contains(&sample.label))
            .collect();
        if holders.is_empty() {
            continue; // label not held by any client (cannot happen with coverage)
        }
        let pick = holders[rng.gen_range(0..holders.len())];
        shards[pick].push(sample);
    }
    Ok(shards)
}

fn shuffle<R: Rng>(v: &mut [usize], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// Noise interpolation: (1 - s) * view + s * noise, with the noise scaled to
/// the prototype magnitude so s = 1 is indistinguishable from a random view
/// direction.
pub fn corrupt<R: Rng>(view: &Tensor, s: f64, proto_scale: f64, rng: &mut R) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Domain(format!(
            "corruption scale {s} outside [0, 1]"
        )));
    }
    let dim = view.len();
    let component_sigma = proto_scale / (dim as f64).sqrt();
    let noise = Tensor::randn(&[dim], rng).map(|v| v * component_sigma);
    let mut out = view.map(|v| v * (1.0 - s));
    out.add_scaled(&noise, s);
    Ok(out)
}

/// Per-client observed-modality sets.
#[derive(Debug, Clone, PartialEq)]
pub enum DropPolicy {
    /// Drop each modality independently with probability p.
    Probabilistic { p: f64 },
    /// Drop exactly k modalities per client.
    DropExactly { k: usize },
}

impl DropPolicy {
    pub fn validate(&self, modalities: usize) -> Result<()> {
        match self {
            DropPolicy::Probabilistic { p } => {
                if !(0.0..1.0).contains(p) {
                    return Err(Error::Config(format!("drop probability {p} outside [0, 1)")));
                }
            }
            DropPolicy::DropExactly { k } => {
                if *k >= modalities {
                    return Err(Error::Config(format!(
                        "cannot drop {k} of {modalities} modalities"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Build the patchwork: per-client observed-modality sets such that every
/// client keeps at least one modality and every modality is observed by at
/// least one client. Redraws (bounded) when a draw violates either rule.
pub fn build_patchwork<R: Rng>(
    n_clients: usize,
    modalities: usize,
    policy: &DropPolicy,
    rng: &mut R,
) -> Result<Vec<BTreeSet<usize>>> {
    if modalities < 2 {
        return Err(Error::Precondition(
            "patchwork needs at least 2 modalities".into(),
        ));
    }
    policy.validate(modalities)?;
    for _ in 0..1000 {
        let draw: Vec<BTreeSet<usize>> = (0..n_clients)
            .map(|_| draw_observed(modalities, policy, rng))
            .collect();
        let nonempty = draw.iter().all(|s| !s.is_empty());
        let covered = (0..modalities).all(|m| draw.iter().any(|s| s.contains(&m)));
        if nonempty && covered {
            return Ok(draw);
        }
    }
    Err(Error::Config(
        "drop policy too aggressive: retry budget exhausted while seeking modality coverage".into(),
    ))
}

fn draw_observed<R: Rng>(modalities: usize, policy: &DropPolicy, rng: &mut R) -> BTreeSet<usize> {
    match policy {
        DropPolicy::Probabilistic { p } => (0..modalities)
            .filter(|_| rng.gen::<f64>() >= *p)
            .collect(),
        DropPolicy::DropExactly { k } => {
            let mut ids: Vec<usize> = (0..modalities).collect();
            shuffle(&mut ids, rng);
            ids[*k..].iter().copied().collect()
        }
    }
}
