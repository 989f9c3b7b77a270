//! Evaluation: generation quality (oracle-classified imputations),
//! representation quality (per-client logistic-regression probe over
//! concatenated features), the noise-robustness sweep, and a per-modality
//! collapse diagnostic.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::data::{corrupt, Prototypes, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::ModelBundle;

/// Nearest-prototype classifier: analytically optimal on the synthetic data.
#[derive(Debug, Clone)]
pub struct OracleClassifier {
    pub prototypes: Prototypes,
}

impl OracleClassifier {
    pub fn new(prototypes: Prototypes) -> Self {
        Self { prototypes }
    }

    pub fn classify(&self, modality: usize, view: &Tensor) -> usize {
        let protos = &self.prototypes.vectors[modality];
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, p) in protos.iter().enumerate() {
            let d = view.squared_distance(p);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }
}

fn views_tensor(samples: &[Sample], modality: usize) -> Tensor {
    let dim = samples[0].views[modality].len();
    let mut t = Tensor::zeros(&[samples.len(), dim]);
    for (i, s) in samples.iter().enumerate() {
        for j in 0..dim {
            t.set(i, j, s.views[modality].data()[j]);
        }
    }
    t
}

fn row_tensor(t: &Tensor, i: usize) -> Tensor {
    Tensor::vector(t.row(i))
}

/// Fraction of imputed views whose oracle label matches ground truth,
/// averaged over missing modalities and samples. `observed_override`, when
/// given, replaces the observed inputs (used by the noise sweep).
pub fn generation_quality(
    bundle: &ModelBundle,
    test: &[Sample],
    missing: &BTreeSet<usize>,
    oracle: &OracleClassifier,
    observed_override: Option<&BTreeMap<usize, Tensor>>,
    virtual_seed: u64,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Precondition("empty test set".into()));
    }
    if missing.is_empty() {
        // vacuous truth: nothing to impute
        return Ok(1.0);
    }
    let observed: BTreeMap<usize, Tensor> = match observed_override {
        Some(map) => map.clone(),
        None => (0..bundle.modalities())
            .filter(|m| !missing.contains(m))
            .map(|m| (m, views_tensor(test, m)))
            .collect(),
    };
    let imputed = bundle.infer_impute(&observed, missing, virtual_seed)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (&m, views) in &imputed {
        for (i, sample) in test.iter().enumerate() {
            let label = oracle.classify(m, &row_tensor(views, i));
            correct += (label == sample.label) as usize;
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Multinomial logistic regression over concatenated features, trained by
/// full-batch gradient descent with L2 regularization.
#[derive(Debug, Clone)]
pub struct ProbeClassifier {
    pub weights: Tensor,
    pub bias: Tensor,
    pub n_classes: usize,
}

pub const PROBE_L2: f64 = 1e-3;
pub const PROBE_STEPS: usize = 500;
pub const PROBE_LR: f64 = 0.1;

impl ProbeClassifier {
    /// Deterministic training: zero init, fixed step count cap.
    pub fn train(features: &Tensor, labels: &[usize], n_classes: usize) -> Self {
        let (n, f) = (features.rows(), features.cols());
        let mut w = Tensor::zeros(&[f, n_classes]);
        let mut b = Tensor::zeros(&[n_classes]);
        for _ in 0..PROBE_STEPS {
            // p = softmax(X W + b), grad = X^T (p - Y) / n + l2 W
            let mut gw = Tensor::zeros(&[f, n_classes]);
            let mut gb = Tensor::zeros(&[n_classes]);
            for i in 0..n {
                let mut logits = vec![0.0; n_classes];
                for c in 0..n_classes {
                    let mut z = b.data()[c];
                    for j in 0..f {
                        z += features.at(i, j) * w.at(j, c);
                    }
                    logits[c] = z;
                }
                let max = logits.iter().cloned().fold(f64::MIN, f64::max);
                let mut probs: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
                let sum: f64 = probs.iter().sum();
                probs.iter_mut().for_each(|p| *p /= sum);
                for c in 0..n_classes {
                    let delta = probs[c] - if c == labels[i] { 1.0 } else { 0.0 };
                    gb.data_mut()[c] += delta / n as f64;
                    for j in 0..f {
                        gw.data_mut()[j * n_classes + c] += features.at(i, j) * delta / n as f64;
                    }
                }
            }
            for idx in 0..w.len() {
                gw.data_mut()[idx] += PROBE_L2 * w.data()[idx];
                w.data_mut()[idx] -= PROBE_LR * gw.data()[idx];
            }
            for c in 0..n_classes {
                b.data_mut()[c] -= PROBE_LR * gb.data()[c];
            }
        }
        Self {
            weights: w,
            bias: b,
            n_classes,
        }
    }

    pub fn predict(&self, feature_row: &[f64]) -> usize {
        let f = self.weights.rows();
        let mut best = 0;
        let mut best_z = f64::MIN;
        for c in 0..self.n_classes {
            let mut z = self.bias.data()[c];
            for j in 0..f {
                z += feature_row[j] * self.weights.at(j, c);
            }
            if z > best_z {
                best_z = z;
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, features: &Tensor, labels: &[usize]) -> f64 {
        let n = features.rows();
        let correct = (0..n)
            .filter(|&i| self.predict(features.row(i)) == labels[i])
            .count();
        correct as f64 / n as f64
    }
}

#[derive(Debug, Clone)]
pub struct ClientRq {
    pub client_id: usize,
    pub accuracy: f64,
    /// true when the train split held a single class and the probe degenerated
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct RqReport {
    pub per_client: Vec<ClientRq>,
    pub mean: f64,
}

/// Representation quality: per client, build concatenated features (imputing
/// the client's missing modalities), train a local probe on an 80/20 split of
/// its shard, report test accuracy.
pub fn representation_quality(
    bundle: &ModelBundle,
    shards: &[Vec<Sample>],
    observed_sets: &[BTreeSet<usize>],
    n_classes: usize,
    seed: u64,
) -> Result<RqReport> {
    let mut per_client = Vec::new();
    for (client_id, (shard, observed_set)) in shards.iter().zip(observed_sets.iter()).enumerate() {
        if shard.is_empty() {
            continue;
        }
        let mut order: Vec<usize> = (0..shard.len()).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(client_id as u64));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let split = (shard.len() * 4) / 5;
        let (train_idx, test_idx) = order.split_at(split.max(1).min(shard.len() - 1));

        let missing: BTreeSet<usize> = (0..bundle.modalities())
            .filter(|m| !observed_set.contains(m))
            .collect();
        let features_of = |indices: &[usize]| -> Result<(Tensor, Vec<usize>)> {
            let subset: Vec<Sample> = indices.iter().map(|&i| shard[i].clone()).collect();
            let observed: BTreeMap<usize, Tensor> = observed_set
                .iter()
                .map(|&m| (m, views_tensor(&subset, m)))
                .collect();
            let feats = bundle.infer_features(&observed, &missing, seed)?;
            let labels = subset.iter().map(|s| s.label).collect();
            Ok((feats, labels))
        };
        let (train_x, train_y) = features_of(train_idx)?;
        let (test_x, test_y) = features_of(test_idx)?;
        let degenerate = train_y.iter().collect::<BTreeSet<_>>().len() < 2;
        let probe = ProbeClassifier::train(&train_x, &train_y, n_classes);
        per_client.push(ClientRq {
            client_id,
            accuracy: probe.accuracy(&test_x, &test_y),
            degenerate,
        });
    }
    if per_client.is_empty() {
        return Err(Error::Precondition("no nonempty client shards".into()));
    }
    let mean = per_client.iter().map(|c| c.accuracy).sum::<f64>() / per_client.len() as f64;
    Ok(RqReport { per_client, mean })
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub noised_modality: usize,
    pub scale: f64,
    pub gq: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub method: String,
    pub scales: Vec<f64>,
    pub cells: Vec<SweepCell>,
    /// min over noised modalities per scale, aligned with `scales`
    pub min_per_scale: Vec<f64>,
}

pub const DEFAULT_SWEEP_GRID: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Noise-interpolation robustness sweep: for each conditional modality m and
/// scale s, corrupt only modality m's observed inputs and recompute GQ for
/// the fixed missing modality.
pub fn robustness_sweep(
    bundle: &ModelBundle,
    test: &[Sample],
    missing_modality: usize,
    s_grid: &[f64],
    oracle: &OracleClassifier,
    method: &str,
    seed: u64,
) -> Result<SweepResult> {
    let mut scales = s_grid.to_vec();
    scales.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if !scales.iter().any(|&s| s == 0.0) {
        return Err(Error::Precondition("s_grid must include 0".into()));
    }
    let missing: BTreeSet<usize> = [missing_modality].into();
    let cond: Vec<usize> = (0..bundle.modalities())
        .filter(|m| *m != missing_modality)
        .collect();
    let clean: BTreeMap<usize, Tensor> =
        cond.iter().map(|&m| (m, views_tensor(test, m))).collect();

    let mut cells = Vec::new();
    let mut min_per_scale = vec![f64::INFINITY; scales.len()];
    for &m in &cond {
        for (si, &s) in scales.iter().enumerate() {
            let mut observed = clean.clone();
            if s > 0.0 {
                let mut rng =
                    ChaCha20Rng::seed_from_u64(seed ^ ((m as u64) << 17) ^ (si as u64));
                let noised = corrupt_rows(&clean[&m], s, oracle.prototypes.scale, &mut rng)?;
                observed.insert(m, noised);
            }
            let gq = generation_quality(bundle, test, &missing, oracle, Some(&observed), seed)?;
            min_per_scale[si] = min_per_scale[si].min(gq);
            cells.push(SweepCell {
                noised_modality: m,
                scale: s,
                gq,
            });
        }
    }
    Ok(SweepResult {
        method: method.to_string(),
        scales,
        cells,
        min_per_scale,
    })
}

fn corrupt_rows<R: Rng>(views: &Tensor, s: f64, proto_scale: f64, rng: &mut R) -> Result<Tensor> {
    let (n, d) = (views.rows(), views.cols());
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let row = Tensor::vector(views.row(i));
        let corrupted = corrupt(&row, s, proto_scale, rng)?;
        for j in 0..d {
            out.set(i, j, corrupted.data()[j]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CollapseReport {
    /// sensitivity[i] pairs the conditional modality id with
    /// GQ(clean) - GQ(that modality fully noised)
    pub sensitivity: Vec<(usize, f64)>,
    /// max/min sensitivity ratio; infinity when some modality is ignored
    pub score: f64,
    pub gq_clean: f64,
}

/// Per-modality sensitivity to full noising of one conditional input. A
/// model that leans on a subset of modalities shows very uneven
/// sensitivities, hence a large score.
pub fn collapse_diagnostic(
    bundle: &ModelBundle,
    test: &[Sample],
    missing_modality: usize,
    oracle: &OracleClassifier,
    seed: u64,
) -> Result<CollapseReport> {
    let missing: BTreeSet<usize> = [missing_modality].into();
    let gq_clean = generation_quality(bundle, test, &missing, oracle, None, seed)?;
    if gq_clean == 0.0 {
        return Err(Error::Precondition(
            "clean GQ is zero; collapse diagnostic undefined".into(),
        ));
    }
    let cond: Vec<usize> = (0..bundle.modalities())
        .filter(|m| *m != missing_modality)
        .collect();
    let clean: BTreeMap<usize, Tensor> =
        cond.iter().map(|&m| (m, views_tensor(test, m))).collect();
    let mut sensitivity = Vec::new();
    for &m in &cond {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ ((m as u64) << 23));
        let mut observed = clean.clone();
        observed.insert(m, corrupt_rows(&clean[&m], 1.0, oracle.prototypes.scale, &mut rng)?);
        let gq = generation_quality(bundle, test, &missing, oracle, Some(&observed), seed)?;
        sensitivity.push((m, gq_clean - gq));
    }
    let max = sensitivity.iter().map(|(_, s)| *s).fold(f64::MIN, f64::max);
    let min = sensitivity.iter().map(|(_, s)| *s).fold(f64::MAX, f64::min);
    let score = if min <= 0.0 { f64::INFINITY } else { max / min };
    Ok(CollapseReport {
        sensitivity,
        score,
        gq_clean,
    })
}
