//! Drives one experiment end to end: data generation, federated training,
//! evaluation, and artifact output (manifest, CSVs, checkpoint).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use graphpl_core::data::{self, Prototypes, Sample};
use graphpl_core::eval::{
    self, CollapseReport, OracleClassifier, RqReport, SweepResult, DEFAULT_SWEEP_GRID,
};
use graphpl_core::federation::{
    self, splitmix64, FederationConfig, GlobalModel, RoundMetrics,
};
use graphpl_core::training::ModelBundle;
use graphpl_core::{Error, Result};

use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;

/// Seed streams independent of the master seed's other consumers.
const STREAM_DATA: u64 = 0x11;
const STREAM_SPLIT: u64 = 0x22;
const STREAM_PATCHWORK: u64 = 0x33;
const STREAM_TEST: u64 = 0x44;
const STREAM_EVAL: u64 = 0x55;

fn stream_rng(master: u64, stream: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(splitmix64(master ^ stream.wrapping_mul(0x9e3779b97f4a7c15)))
}

pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub metrics_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub sweep_csv: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub final_gq: Option<f64>,
    pub final_rq: Option<RqReport>,
    pub global_checksum: u64,
}

struct EvalPoint {
    gq: Option<f64>,
    rq: Option<RqReport>,
}

/// Headline GQ: mean over target modalities of single-modality imputation
/// accuracy on the shared test set.
pub fn headline_gq(
    bundle: &ModelBundle,
    test: &[Sample],
    oracle: &OracleClassifier,
    seed: u64,
) -> Result<f64> {
    let modalities = bundle.modalities();
    let mut total = 0.0;
    for m in 0..modalities {
        let missing: BTreeSet<usize> = [m].into();
        total += eval::generation_quality(bundle, test, &missing, oracle, None, seed)?;
    }
    Ok(total / modalities as f64)
}

pub fn run(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let out_dir = PathBuf::from(&config.out);
    std::fs::create_dir_all(&out_dir)?;

    let config_text = config.to_toml();
    std::fs::write(out_dir.join("config.toml"), &config_text)?;
    let manifest_path = out_dir.join("manifest.json");
    let mut manifest = RunManifest::start(config, &config_text);
    manifest.write(&manifest_path)?;

    let spec = config.synthetic_spec();
    let protos = data::build_prototypes(&spec)?;
    let oracle = OracleClassifier::new(protos.clone());

    let n_train = config.dataset.samples_per_client * config.patchwork.n_clients;
    let train_samples = data::generate(
        &spec,
        &protos,
        n_train,
        &mut stream_rng(config.seed, STREAM_DATA),
    );
    if config.dataset.export {
        export_dataset(&out_dir.join("dataset.csv"), &train_samples, spec.dim)?;
    }
    let shards = data::split_heterogeneous(
        train_samples,
        config.patchwork.n_clients,
        config.dataset.n_classes,
        config.dataset.classes_per_client,
        &mut stream_rng(config.seed, STREAM_SPLIT),
    )?;
    let patchwork = data::build_patchwork(
        config.patchwork.n_clients,
        config.dataset.modalities,
        &config.drop_policy(),
        &mut stream_rng(config.seed, STREAM_PATCHWORK),
    )?;
    let test_samples = data::generate(
        &spec,
        &protos,
        config.dataset.test_samples,
        &mut stream_rng(config.seed, STREAM_TEST),
    );

    let vae_cfg = config.vae_config();
    let fusion = config.fusion_kind()?;
    let (mut clients, mut global) = federation::init_clients(
        shards.clone(),
        &patchwork,
        config.dataset.modalities,
        vae_cfg,
        fusion,
        config.seed,
    )?;

    let fed_cfg = FederationConfig {
        global_rounds: config.train.global_rounds,
        train: config.train_config(),
        master_seed: config.seed,
        workers: config.workers,
    };

    let eval_seed = splitmix64(config.seed ^ STREAM_EVAL);
    let mut eval_points: BTreeMap<usize, EvalPoint> = BTreeMap::new();
    let mut eval_err: Option<Error> = None;
    let rounds = config.train.global_rounds;
    let metrics: Vec<RoundMetrics> =
        federation::run_federation(&mut clients, &mut global, &fed_cfg, |round, model| {
            if eval_err.is_some() {
                return;
            }
            let due = round % config.eval.every == 0 || round == rounds;
            if !due || !(config.eval.gq || config.eval.rq) {
                return;
            }
            match eval_round(
                config, model, &test_samples, &shards, &patchwork, &oracle, eval_seed,
            ) {
                Ok(point) => {
                    eval_points.insert(round, point);
                }
                Err(e) => eval_err = Some(e),
            }
        })?;
    if let Some(e) = eval_err {
        return Err(e);
    }

    let metrics_csv = out_dir.join("metrics.csv");
    write_metrics_csv(&metrics_csv, &metrics, &eval_points)?;

    let checkpoint = out_dir.join("checkpoint.gpl1");
    federation::save_checkpoint(&global, &checkpoint)?;

    let bundle = federation::bundle_from_global(
        &global,
        config.dataset.modalities,
        vae_cfg,
        fusion,
    )?;

    let sweep = if config.eval.sweep {
        Some(eval::robustness_sweep(
            &bundle,
            &test_samples,
            config.eval.sweep_missing_modality,
            &DEFAULT_SWEEP_GRID,
            &oracle,
            config.method.tag(),
            eval_seed,
        )?)
    } else {
        None
    };
    let sweep_csv = match &sweep {
        Some(result) => {
            let path = out_dir.join("sweep.csv");
            write_sweep_csv(&path, result, config.seed)?;
            Some(path)
        }
        None => None,
    };

    let collapse = if config.eval.collapse {
        Some(eval::collapse_diagnostic(
            &bundle,
            &test_samples,
            config.eval.sweep_missing_modality,
            &oracle,
            eval_seed,
        )?)
    } else {
        None
    };

    let final_point = eval_points.get(&rounds);
    let final_gq = final_point.and_then(|p| p.gq);
    let final_rq = final_point.and_then(|p| p.rq.clone());
    let summary_csv = out_dir.join("summary.csv");
    write_summary_csv(
        &summary_csv,
        config,
        final_gq,
        final_rq.as_ref(),
        collapse.as_ref(),
    )?;

    manifest.finish(&[
        ("config", "config.toml"),
        ("metrics", "metrics.csv"),
        ("summary", "summary.csv"),
        ("checkpoint", "checkpoint.gpl1"),
    ]);
    if sweep_csv.is_some() {
        manifest.add_artifact("sweep", "sweep.csv");
    }
    manifest.write(&manifest_path)?;

    Ok(RunArtifacts {
        out_dir,
        metrics_csv,
        summary_csv,
        sweep_csv,
        checkpoint,
        manifest: manifest_path,
        final_gq,
        final_rq,
        global_checksum: global.checksum(),
    })
}

fn eval_round(
    config: &ExperimentConfig,
    model: &GlobalModel,
    test: &[Sample],
    shards: &[Vec<Sample>],
    patchwork: &[BTreeSet<usize>],
    oracle: &OracleClassifier,
    eval_seed: u64,
) -> Result<EvalPoint> {
    let bundle = federation::bundle_from_global(
        model,
        config.dataset.modalities,
        config.vae_config(),
        config.fusion_kind()?,
    )?;
    let gq = if config.eval.gq {
        Some(headline_gq(&bundle, test, oracle, eval_seed)?)
    } else {
        None
    };
    let rq = if config.eval.rq {
        Some(eval::representation_quality(
            &bundle,
            shards,
            patchwork,
            config.dataset.n_classes,
            eval_seed,
        )?)
    } else {
        None
    };
    Ok(EvalPoint { gq, rq })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn write_metrics_csv(
    path: &Path,
    metrics: &[RoundMetrics],
    eval_points: &BTreeMap<usize, EvalPoint>,
) -> Result<()> {
    let mut out = String::from("round,client_id,mean_local_loss,gq,rq\n");
    for round in metrics {
        let point = eval_points.get(&round.round);
        for &(client_id, loss) in &round.client_losses {
            let gq = point.and_then(|p| p.gq);
            let rq = point.and_then(|p| {
                p.rq.as_ref().and_then(|r| {
                    r.per_client
                        .iter()
                        .find(|c| c.client_id == client_id)
                        .map(|c| c.accuracy)
                })
            });
            writeln!(
                out,
                "{},{},{},{},{}",
                round.round,
                client_id,
                loss,
                fmt_opt(gq),
                fmt_opt(rq)
            )
            .expect("write to string");
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_sweep_csv(path: &Path, sweep: &SweepResult, seed: u64) -> Result<()> {
    let mut out = String::from("method,seed,noised_modality,scale,gq\n");
    for cell in &sweep.cells {
        writeln!(
            out,
            "{},{},{},{},{}",
            sweep.method, seed, cell.noised_modality, cell.scale, cell.gq
        )
        .expect("write to string");
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_summary_csv(
    path: &Path,
    config: &ExperimentConfig,
    gq: Option<f64>,
    rq: Option<&RqReport>,
    collapse: Option<&CollapseReport>,
) -> Result<()> {
    let mut out = String::from("method,seed,gq,rq_mean,collapse_score\n");
    writeln!(
        out,
        "{},{},{},{},{}",
        config.method.tag(),
        config.seed,
        fmt_opt(gq),
        fmt_opt(rq.map(|r| r.mean)),
        fmt_opt(collapse.map(|c| c.score)),
    )
    .expect("write to string");
    std::fs::write(path, out)?;
    Ok(())
}

fn export_dataset(path: &Path, samples: &[Sample], dim: usize) -> Result<()> {
    let mut header = String::from("sample_id,label,modality_id");
    for j in 0..dim {
        write!(header, ",v{j}").expect("write to string");
    }
    header.push('\n');
    let mut out = header;
    for (id, sample) in samples.iter().enumerate() {
        for (m, view) in sample.views.iter().enumerate() {
            write!(out, "{},{},{}", id, sample.label, m).expect("write to string");
            for &v in view.data() {
                write!(out, ",{v}").expect("write to string");
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Representation quality of a freshly initialized (untrained) model under the
/// same data, patchwork, and evaluation seed a run with this config would use.
pub fn untrained_rq(config: &ExperimentConfig) -> Result<RqReport> {
    let spec = config.synthetic_spec();
    let protos = data::build_prototypes(&spec)?;
    let n_train = config.dataset.samples_per_client * config.patchwork.n_clients;
    let train_samples = data::generate(
        &spec,
        &protos,
        n_train,
        &mut stream_rng(config.seed, STREAM_DATA),
    );
    let shards = data::split_heterogeneous(
        train_samples,
        config.patchwork.n_clients,
        config.dataset.n_classes,
        config.dataset.classes_per_client,
        &mut stream_rng(config.seed, STREAM_SPLIT),
    )?;
    let patchwork = data::build_patchwork(
        config.patchwork.n_clients,
        config.dataset.modalities,
        &config.drop_policy(),
        &mut stream_rng(config.seed, STREAM_PATCHWORK),
    )?;
    let (_, global) = federation::init_clients(
        shards.clone(),
        &patchwork,
        config.dataset.modalities,
        config.vae_config(),
        config.fusion_kind()?,
        config.seed,
    )?;
    let bundle = federation::bundle_from_global(
        &global,
        config.dataset.modalities,
        config.vae_config(),
        config.fusion_kind()?,
    )?;
    eval::representation_quality(
        &bundle,
        &shards,
        &patchwork,
        config.dataset.n_classes,
        splitmix64(config.seed ^ STREAM_EVAL),
    )
}

/// Re-derive the oracle and test set for a saved run (used by tests and by
/// checkpoint-based evaluation).
pub fn rebuild_eval_inputs(
    config: &ExperimentConfig,
) -> Result<(Prototypes, OracleClassifier, Vec<Sample>)> {
    let spec = config.synthetic_spec();
    let protos = data::build_prototypes(&spec)?;
    let oracle = OracleClassifier::new(protos.clone());
    let test = data::generate(
        &spec,
        &protos,
        config.dataset.test_samples,
        &mut stream_rng(config.seed, STREAM_TEST),
    );
    Ok((protos, oracle, test))
}

pub fn eval_stream_seed(master: u64) -> u64 {
    splitmix64(master ^ STREAM_EVAL)
}
