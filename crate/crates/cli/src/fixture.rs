//! Small ground-truth world for end-to-end runs and oracle tests.
//!
//! Residuals `(8, 16, 32)`: three clusters, each a uniform disk of radius 1
//! on its own 2-D subspace, centred on mutually orthogonal axes at distance
//! 10 from the origin (centre gaps ≈ 14 ≥ 10× the radius). Position 0 of
//! every sequence is masked out. The SAE has `M = 128` features built from
//! a random `64 × 32` matrix `Q` with orthonormal columns:
//! `W_enc = [Q; −Q]`, `W_dec = [Qᵀ, −Qᵀ]`, zero biases, ReLU. It
//! reconstructs every input exactly, since `relu(v) − relu(−v) = v`.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use stratgeo::saecore::{Nonlinearity, SaeParams};
use stratgeo::seed::{derive_seed, rng_from_seed};
use stratgeo::tensorio::{save_bundle, TensorBundle};

use crate::CliError;

pub const BATCH: usize = 8;
pub const SEQ: usize = 16;
pub const D_MODEL: usize = 32;
pub const D_SAE: usize = 128;
pub const N_CLUSTERS: usize = 3;
pub const SUBSPACE_DIM: usize = 2;
pub const RADIUS: f64 = 1.0;
pub const CENTER_NORM: f64 = 10.0;

/// Sidecar describing what was planted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub n_clusters: usize,
    pub subspace_dim: usize,
    pub radius: f64,
    /// Smallest distance between two cluster centres.
    pub separation: f64,
    /// One label per token in row-major `(batch, seq)` order; `-1` where
    /// the mask drops the token.
    pub token_labels: Vec<i64>,
    pub centers: Vec<Vec<f64>>,
}

impl GroundTruth {
    /// Labels of the kept tokens only, in row-major order.
    pub fn masked_labels(&self) -> Vec<i64> {
        self.token_labels.iter().copied().filter(|&l| l >= 0).collect()
    }
}

pub struct Fixture {
    pub bundle: TensorBundle,
    pub truth: GroundTruth,
}

fn orthonormal_columns(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
    g.qr().q()
}

pub fn make_synthetic_fixture(seed: u64) -> Fixture {
    let mut rng = rng_from_seed(derive_seed(seed, &["fixture".into()]));
    let basis = orthonormal_columns(D_MODEL, D_MODEL, &mut rng);
    let center = |c: usize| basis.column(c) * CENTER_NORM;

    let mut data = vec![0f32; BATCH * SEQ * D_MODEL];
    let mut mask = vec![0u8; BATCH * SEQ];
    let mut token_labels = vec![-1i64; BATCH * SEQ];
    let mut kept = 0usize;
    for t in 0..BATCH * SEQ {
        let row = &mut data[t * D_MODEL..(t + 1) * D_MODEL];
        if t % SEQ == 0 {
            // dropped token: large unstructured vector the mask must hide
            for v in row.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *v = (3.0 * g) as f32;
            }
            continue;
        }
        let c = kept % N_CLUSTERS;
        kept += 1;
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let r = RADIUS * rng.random_range(0.0f64..1.0).sqrt();
        let p = center(c)
            + basis.column(N_CLUSTERS + SUBSPACE_DIM * c) * (r * theta.cos())
            + basis.column(N_CLUSTERS + SUBSPACE_DIM * c + 1) * (r * theta.sin());
        for (v, x) in row.iter_mut().zip(p.iter()) {
            *v = *x as f32;
        }
        mask[t] = 1;
        token_labels[t] = c as i64;
    }

    let q = orthonormal_columns(D_SAE / 2, D_MODEL, &mut rng).map(|v| v as f32);
    let mut w_enc = DMatrix::zeros(D_SAE, D_MODEL);
    w_enc.rows_mut(0, D_SAE / 2).copy_from(&q);
    w_enc.rows_mut(D_SAE / 2, D_SAE / 2).copy_from(&(-&q));
    let w_dec = w_enc.transpose();
    let params = SaeParams::new(w_enc, DVector::zeros(D_SAE), w_dec, DVector::zeros(D_MODEL), Nonlinearity::Relu)
        .expect("fixture SAE shapes are consistent");

    let mut bundle = TensorBundle::new();
    bundle.insert_f32("resid", &[BATCH, SEQ, D_MODEL], &data).expect("fixture resid");
    bundle.insert_u8("mask", &[BATCH, SEQ], &mask).expect("fixture mask");
    params.write_to_bundle(&mut bundle).expect("fixture SAE");
    bundle.set_metadata("model", "synthetic");
    bundle.set_metadata("concept", "planted");
    bundle.set_metadata("nonlinearity", "relu");
    bundle.set_metadata("seed", seed.to_string());

    let centers: Vec<Vec<f64>> = (0..N_CLUSTERS).map(|c| center(c).iter().copied().collect()).collect();
    let truth = GroundTruth {
        seed,
        n_clusters: N_CLUSTERS,
        subspace_dim: SUBSPACE_DIM,
        radius: RADIUS,
        separation: CENTER_NORM * std::f64::consts::SQRT_2,
        token_labels,
        centers,
    };
    Fixture { bundle, truth }
}

/// Paths written by [`write_fixture`].
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureFiles {
    pub bundle: PathBuf,
    pub truth: PathBuf,
    pub config: PathBuf,
}

/// Writes `synthetic.bundle`, its ground-truth sidecar and a ready-to-run
/// `config.json` (output under `dir/out`) into `dir`.
pub fn write_fixture(dir: &Path, seed: u64) -> Result<FixtureFiles, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let f = make_synthetic_fixture(seed);
    let files = FixtureFiles {
        bundle: dir.join("synthetic.bundle"),
        truth: dir.join("synthetic.truth.json"),
        config: dir.join("config.json"),
    };
    save_bundle(&f.bundle, &files.bundle)?;
    let write = |path: &Path, value: &serde_json::Value| {
        let text = serde_json::to_string_pretty(value).expect("json serializes");
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    };
    write(&files.truth, &serde_json::to_value(&f.truth).expect("truth serializes"))?;
    let config = serde_json::json!({
        "datasets": [{"model": "synthetic", "concept": "planted", "bundle": "synthetic.bundle"}],
        "seed": seed,
        "out_dir": "out",
        "noise": {"top_k": 8}
    });
    write(&files.config, &config)?;
    Ok(files)
}
