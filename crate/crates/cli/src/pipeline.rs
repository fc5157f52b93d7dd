//! Stage orchestration, caches and report writing.
//!
//! Stages always run in the order case1 → case2 → case3. Case 1 writes the
//! zero-noise latents of every dataset to `out/cache/<model>__<concept>/`;
//! case 2 reads them (computing them first if case 1 has never run) and
//! caches the latent-cloud cluster labels; case 3 needs both. Every cache
//! file has a `.sha256` sidecar that is checked on read, and the labels
//! record the hash of the latents they were computed from.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stratgeo::geostruct::{case2_report, Case2Config, ClusterAssignment};
use stratgeo::intervene::{case3_sweep, InterventionConfig, LossKind};
use stratgeo::perturb::{frequency_ranking, NoiseSpec};
use stratgeo::saecore::SaeParams;
use stratgeo::seed::derive_seed;
use stratgeo::strata::{case1_sweep, encode_level};
use stratgeo::tensorio::{decode_bundle, load_bundle, TensorBundle};
use stratgeo::{ActivationTensor, LatentTensor, Tensor3};

use crate::config::{parse_nonlinearity, Dataset, RunConfig};
use crate::{CliError, GIT_DESCRIBE};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Case1,
    Case2,
    Case3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Case1, Stage::Case2, Stage::Case3];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Case1 => "case1",
            Stage::Case2 => "case2",
            Stage::Case3 => "case3",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Case1Row {
    pub concept: String,
    pub model: String,
    pub noise_std: f64,
    pub r1: usize,
    pub r2: usize,
    pub r3: usize,
    pub agd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Case2Row {
    pub model: String,
    pub concept: String,
    pub clusters_resid: usize,
    pub clusters_latent: usize,
    pub avg_id_twonn_resid: f64,
    pub avg_id_twonn_latent: f64,
    pub avg_id_pca_resid: f64,
    pub avg_id_pca_latent: f64,
    pub betti0_resid: f64,
    pub betti0_latent: f64,
    pub mstw_resid: f64,
    pub mstw_latent: f64,
    pub procrustes: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Case3Row {
    pub concept: String,
    pub model: String,
    pub loss_kind: LossKind,
    pub alpha: f64,
    pub d_gw: f64,
    pub mse: f64,
    pub aedp_orig: f64,
    pub aedp_best: f64,
    pub inv_aedp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
}

/// Per-dataset facts that do not fit the CSV schemas.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct DatasetSummary {
    pub model: String,
    pub concept: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels_sha256: Option<String>,
    /// Pearson correlation of best AEDP and MSE over the α sweep.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub aedp_mse_correlation: Vec<(LossKind, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub git_describe: String,
    pub stages_run: Vec<Stage>,
    pub config: RunConfig,
    pub wall_clock: Vec<StageTiming>,
    pub datasets: Vec<DatasetSummary>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub case1: Vec<Case1Row>,
    pub case2: Vec<Case2Row>,
    pub case3: Vec<Case3Row>,
    pub summary: Summary,
}

struct Loaded {
    ds: Dataset,
    x: ActivationTensor,
    params: SaeParams,
}

fn load_dataset(ds: &Dataset) -> Result<Loaded, CliError> {
    let bundle = load_bundle(&ds.bundle)?;
    let x = bundle.activation_tensor(&ds.resid_key, &ds.mask_key)?;
    let nonlinearity = match (&ds.nonlinearity, bundle.metadata().get("nonlinearity")) {
        (Some(n), _) => *n,
        (None, Some(name)) => parse_nonlinearity(name)?,
        (None, None) => {
            return Err(CliError::Config(format!(
                "{}: no `nonlinearity` in the config or the bundle metadata; declare one",
                ds.bundle.display()
            )))
        }
    };
    let params = SaeParams::from_bundle(&bundle, nonlinearity).map_err(|e| analysis(ds, e))?;
    if params.d_model() != x.d_model() {
        return Err(CliError::Config(format!(
            "{}: SAE expects d_model {} but residuals have {}",
            ds.bundle.display(),
            params.d_model(),
            x.d_model()
        )));
    }
    Ok(Loaded { ds: ds.clone(), x, params })
}

fn analysis(ds: &Dataset, e: impl Into<stratgeo::Error>) -> CliError {
    CliError::Analysis { model: ds.model.clone(), concept: ds.concept.clone(), source: e.into() }
}

/// Runs `f` for every dataset, concurrently when built with `parallel`;
/// results come back in config order.
fn per_dataset<T, F>(items: &[Loaded], f: F) -> Result<Vec<T>, CliError>
where
    T: Send,
    F: Fn(&Loaded) -> Result<T, CliError> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Directory holding the caches of one dataset.
pub fn cache_dir(out_dir: &Path, ds: &Dataset) -> PathBuf {
    out_dir.join("cache").join(format!("{}__{}", ds.model, ds.concept))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Writes `bundle` and its hash sidecar; returns the hash.
fn write_cached(path: &Path, bundle: &TensorBundle) -> Result<String, CliError> {
    let bytes = bundle.to_bytes()?;
    let hash = sha256_hex(&bytes);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_file(path, &bytes)?;
    write_file(&path.with_extension("sha256"), hash.as_bytes())?;
    Ok(hash)
}

/// Reads a cached bundle after checking it against its sidecar; `None`
/// when the cache file is absent.
fn read_cached(path: &Path) -> Result<Option<(TensorBundle, String)>, CliError> {
    if !path.exists() {
        return Ok(None);
    }
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let sidecar = path.with_extension("sha256");
    let recorded = std::fs::read_to_string(&sidecar).map_err(|e| CliError::io(&sidecar, e))?;
    let hash = sha256_hex(&bytes);
    if recorded.trim() != hash {
        return Err(CliError::CacheMismatch { path: path.to_path_buf() });
    }
    Ok(Some((decode_bundle(&bytes)?, hash)))
}

fn latent_cache_path(out: &Path, ds: &Dataset) -> PathBuf {
    cache_dir(out, ds).join("latents0.bundle")
}

fn labels_cache_path(out: &Path, ds: &Dataset) -> PathBuf {
    cache_dir(out, ds).join("labels.bundle")
}

fn latent_to_bundle(z: &LatentTensor) -> Result<TensorBundle, CliError> {
    let [b, s, d] = z.shape();
    let mut bundle = TensorBundle::new();
    bundle.insert_f32("latents", &[b, s, d], z.data().as_slice())?;
    let mask: Vec<u8> = z.mask().iter().map(|&m| u8::from(m)).collect();
    bundle.insert_u8("mask", &[b, s], &mask)?;
    if let Some(map) = z.feature_index_map() {
        let idx: Vec<i64> = map.iter().map(|&i| i as i64).collect();
        bundle.insert_i64("feature_index", &[d], &idx)?;
    }
    Ok(bundle)
}

fn latent_from_bundle(bundle: &TensorBundle, path: &Path) -> Result<LatentTensor, CliError> {
    let data: Tensor3<f32> = bundle.tensor3("latents")?;
    let (_, mask) = bundle.u8_array("mask")?;
    let map = if bundle.contains("feature_index") {
        let (_, idx) = bundle.i64_array("feature_index")?;
        Some(idx.into_iter().map(|i| i as usize).collect())
    } else {
        None
    };
    LatentTensor::new(data, mask.into_iter().map(|m| m != 0).collect(), map)
        .map_err(|e| CliError::Config(format!("{}: corrupt latent cache: {e}", path.display())))
}

fn noise_spec(cfg: &RunConfig, ds: &Dataset) -> NoiseSpec {
    NoiseSpec {
        noise_std: 0.0,
        top_k: cfg.noise.top_k,
        hi_scale: cfg.noise.hi_scale,
        lo_scale: cfg.noise.lo_scale,
        seed: derive_seed(cfg.seed, &["case1".into(), ds.model.as_str().into(), ds.concept.as_str().into()]),
    }
}

/// The latents every later stage consumes: the noise-free encoding after
/// feature downsampling.
fn zero_noise_latents(cfg: &RunConfig, d: &Loaded) -> Result<LatentTensor, CliError> {
    let spec = noise_spec(cfg, &d.ds);
    let hi = frequency_ranking(&d.x, spec.top_k).map_err(|e| analysis(&d.ds, e))?;
    encode_level(&d.x, &d.params, &spec, &hi, 0.0, cfg.case1.feature_cap).map_err(|e| analysis(&d.ds, e))
}

fn run_case1(cfg: &RunConfig, d: &Loaded) -> Result<(Vec<Case1Row>, String), CliError> {
    let spec = noise_spec(cfg, &d.ds);
    let records = case1_sweep(&d.x, &d.params, &cfg.noise.levels, &spec, &cfg.case1).map_err(|e| analysis(&d.ds, e))?;
    let hash = write_cached(&latent_cache_path(&cfg.out_dir, &d.ds), &latent_to_bundle(&zero_noise_latents(cfg, d)?)?)?;
    let rows = records
        .iter()
        .map(|r| Case1Row {
            concept: d.ds.concept.clone(),
            model: d.ds.model.clone(),
            noise_std: r.noise_std,
            r1: r.triplet.r1,
            r2: r.triplet.r2,
            r3: r.triplet.r3,
            agd: r.agd,
        })
        .collect();
    Ok((rows, hash))
}

/// Cached zero-noise latents; with `create` the cache is filled when
/// absent, otherwise absence is a missing dependency.
fn cached_latents(cfg: &RunConfig, d: &Loaded, create: bool) -> Result<(LatentTensor, String), CliError> {
    let path = latent_cache_path(&cfg.out_dir, &d.ds);
    match read_cached(&path)? {
        Some((bundle, hash)) => Ok((latent_from_bundle(&bundle, &path)?, hash)),
        None if create => {
            log::info!("{}/{}: no zero-noise cache, encoding now", d.ds.model, d.ds.concept);
            let z = zero_noise_latents(cfg, d)?;
            let hash = write_cached(&path, &latent_to_bundle(&z)?)?;
            Ok((z, hash))
        }
        None => Err(CliError::MissingDependency(format!(
            "{}/{}: no zero-noise latent cache at {}; run case1 or case2 first",
            d.ds.model,
            d.ds.concept,
            path.display()
        ))),
    }
}

fn run_case2(cfg: &RunConfig, d: &Loaded) -> Result<(Case2Row, String, String), CliError> {
    let (z, latent_hash) = cached_latents(cfg, d, true)?;
    let c = &cfg.case2;
    let case2_cfg = Case2Config {
        target_dim: c.target_dim,
        reduction: c.reduction,
        min_cluster_size: c.min_cluster_size,
        tau_dim: c.tau_dim,
        tau_pers: c.tau_pers,
        seed: derive_seed(cfg.seed, &["case2".into(), d.ds.model.as_str().into(), d.ds.concept.as_str().into()]),
    };
    let report = case2_report(&d.x, &z, &case2_cfg).map_err(|e| analysis(&d.ds, e))?;

    let mut labels = TensorBundle::new();
    let l = report.latent.labels.labels();
    labels.insert_i64("labels", &[l.len()], l)?;
    labels.set_metadata("latent_sha256", latent_hash.clone());
    let labels_hash = write_cached(&labels_cache_path(&cfg.out_dir, &d.ds), &labels)?;

    let row = Case2Row {
        model: d.ds.model.clone(),
        concept: d.ds.concept.clone(),
        clusters_resid: report.resid.labels.k(),
        clusters_latent: report.latent.labels.k(),
        avg_id_twonn_resid: report.resid.local.avg_id_twonn,
        avg_id_twonn_latent: report.latent.local.avg_id_twonn,
        avg_id_pca_resid: report.resid.local.avg_id_pca,
        avg_id_pca_latent: report.latent.local.avg_id_pca,
        betti0_resid: report.resid.local.avg_betti0,
        betti0_latent: report.latent.local.avg_betti0,
        mstw_resid: report.resid.global.mstw,
        mstw_latent: report.latent.global.mstw,
        procrustes: report.procrustes,
    };
    Ok((row, latent_hash, labels_hash))
}

type Case3Out = (Vec<Case3Row>, Vec<(LossKind, Option<f64>)>);

fn run_case3(cfg: &RunConfig, d: &Loaded) -> Result<Case3Out, CliError> {
    let (z, latent_hash) = cached_latents(cfg, d, false)?;
    let path = labels_cache_path(&cfg.out_dir, &d.ds);
    let (bundle, _) = read_cached(&path)?.ok_or_else(|| {
        CliError::MissingDependency(format!(
            "{}/{}: no cluster labels at {}; run case2 first",
            d.ds.model,
            d.ds.concept,
            path.display()
        ))
    })?;
    if bundle.metadata().get("latent_sha256") != Some(&latent_hash) {
        return Err(CliError::MissingDependency(format!(
            "{}: labels were computed from different latents; rerun case2",
            path.display()
        )));
    }
    let (_, raw) = bundle.i64_array("labels")?;
    let labels = ClusterAssignment::new(raw)
        .map_err(|e| CliError::Config(format!("{}: corrupt labels: {e}", path.display())))?;

    let c = &cfg.case3;
    let base = InterventionConfig {
        iterations: c.iterations,
        lambda_mse: c.lambda_mse,
        subsample: c.subsample,
        gw: c.gw,
        seed: derive_seed(cfg.seed, &["case3".into(), d.ds.model.as_str().into(), d.ds.concept.as_str().into()]),
        ..InterventionConfig::default()
    };
    let result =
        case3_sweep(&z, &labels, &d.params, &d.x, &c.alphas, &c.loss_kinds, &base).map_err(|e| analysis(&d.ds, e))?;
    let rows = result
        .records
        .iter()
        .map(|r| Case3Row {
            concept: d.ds.concept.clone(),
            model: d.ds.model.clone(),
            loss_kind: r.loss_kind,
            alpha: r.alpha,
            d_gw: r.d_gw,
            mse: r.mse,
            aedp_orig: r.aedp_orig,
            aedp_best: r.aedp_best,
            inv_aedp: r.inv_aedp,
        })
        .collect();
    Ok((rows, result.correlations))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Validates `cfg`, runs the requested stages and writes
/// `case{1,2,3}.csv` plus `summary.json` into `cfg.out_dir`.
pub fn run(cfg: &RunConfig, stages: &[Stage]) -> Result<Report, CliError> {
    cfg.validate()?;
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    if stages.is_empty() {
        return Err(CliError::Config("no stage selected".into()));
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::io(&cfg.out_dir, e))?;

    let loaded = cfg.datasets.iter().map(load_dataset).collect::<Result<Vec<_>, _>>()?;
    if stages.contains(&Stage::Case1) {
        for d in &loaded {
            if cfg.noise.top_k > d.x.d_model() {
                return Err(CliError::Config(format!(
                    "noise.top_k = {} exceeds d_model = {} of {}/{}",
                    cfg.noise.top_k,
                    d.x.d_model(),
                    d.ds.model,
                    d.ds.concept
                )));
            }
        }
    }

    let mut summaries: Vec<DatasetSummary> = loaded
        .iter()
        .map(|d| DatasetSummary { model: d.ds.model.clone(), concept: d.ds.concept.clone(), ..Default::default() })
        .collect();
    let (mut case1, mut case2, mut case3) = (Vec::new(), Vec::new(), Vec::new());
    let mut wall_clock = Vec::new();
    let mut outputs = Vec::new();

    for &stage in &stages {
        let start = Instant::now();
        log::info!("running {} on {} dataset(s)", stage.name(), loaded.len());
        match stage {
            Stage::Case1 => {
                for (s, (rows, hash)) in summaries.iter_mut().zip(per_dataset(&loaded, |d| run_case1(cfg, d))?) {
                    case1.extend(rows);
                    s.latent_sha256 = Some(hash);
                }
                write_csv(&cfg.out_dir.join("case1.csv"), &case1)?;
            }
            Stage::Case2 => {
                for (s, (row, lh, bh)) in summaries.iter_mut().zip(per_dataset(&loaded, |d| run_case2(cfg, d))?) {
                    case2.push(row);
                    s.latent_sha256 = Some(lh);
                    s.labels_sha256 = Some(bh);
                }
                write_csv(&cfg.out_dir.join("case2.csv"), &case2)?;
            }
            Stage::Case3 => {
                for (s, (rows, corr)) in summaries.iter_mut().zip(per_dataset(&loaded, |d| run_case3(cfg, d))?) {
                    case3.extend(rows);
                    s.aedp_mse_correlation = corr;
                }
                write_csv(&cfg.out_dir.join("case3.csv"), &case3)?;
            }
        }
        outputs.push(format!("{}.csv", stage.name()));
        wall_clock.push(StageTiming { stage, seconds: start.elapsed().as_secs_f64() });
    }

    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        git_describe: GIT_DESCRIBE.to_string(),
        stages_run: stages,
        config: cfg.clone(),
        wall_clock,
        datasets: summaries,
        outputs,
    };
    let path = cfg.out_dir.join("summary.json");
    let json = serde_json::to_vec_pretty(&summary).expect("summary serializes");
    write_file(&path, &json)?;
    Ok(Report { case1, case2, case3, summary })
}
