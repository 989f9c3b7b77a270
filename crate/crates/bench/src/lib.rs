//! Shared fixtures for the criterion benches.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use graphpl_core::data::{self, SyntheticSpec};
use graphpl_core::fusion::{FusionConfig, FusionStack};
use graphpl_core::training::{FusionKind, ModelBundle};
use graphpl_core::vae::VaeConfig;
use graphpl_core::Tensor;

pub fn default_bundle(seed: u64) -> ModelBundle {
    let stack = FusionStack::new(FusionConfig::default()).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    ModelBundle::new(
        3,
        (0..3).collect(),
        FusionKind::Gnn(stack),
        VaeConfig::default(),
        &mut rng,
    )
}

pub fn default_batch(rows: usize, seed: u64) -> BTreeMap<usize, Tensor> {
    let spec = SyntheticSpec::default();
    let protos = data::build_prototypes(&spec).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let samples = data::generate(&spec, &protos, rows, &mut rng);
    (0..spec.modalities)
        .map(|m| {
            let rows: Vec<Vec<f64>> = samples
                .iter()
                .map(|s| s.views[m].data().to_vec())
                .collect();
            (m, Tensor::from_rows(&rows))
        })
        .collect()
}
