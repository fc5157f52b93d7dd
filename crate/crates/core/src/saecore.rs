//! Sparse-autoencoder inference: encoding with a sparsity nonlinearity,
//! decoding through the dictionary, feature downsampling and reconstruction
//! error.
//!
//! Weight shapes follow the column-vector convention: `W_enc` is
//! `(M, n)`, `W_dec` is `(n, M)`, where `n` is the residual width and `M`
//! the dictionary size. Masked-out tokens are encoded and decoded like any
//! other token; the mask only gates statistics (variance, covariance, MSE).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::tensor::{ActivationTensor, LatentTensor, Tensor3, TensorError};
use crate::tensorio::{BundleError, TensorBundle};

/// Default number of features retained by [`downsample_features`].
pub const DEFAULT_FEATURE_CAP: usize = 2048;
/// Additive constant inside the downsampling score.
pub const SCORE_EPSILON: f64 = 1e-8;

const TOKEN_CHUNK: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum SaeError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid SAE parameters: {0}")]
    InvalidParams(String),
    #[error("need at least 2 masked tokens for feature statistics, got {0}")]
    TooFewTokens(usize),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

/// Sparsity-enforcing activation applied to the encoder pre-activations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Nonlinearity {
    /// No nonlinearity; used for algebraic checks.
    Identity,
    Relu,
    /// Keep the `k` largest pre-activations (ties to the lower index).
    TopK {
        k: usize,
    },
    /// Keep values strictly above `theta`.
    JumpRelu {
        theta: f32,
    },
}

impl Nonlinearity {
    /// Applies the activation in place to one token's pre-activations.
    pub fn apply(&self, pre: &mut [f32]) {
        match *self {
            Nonlinearity::Identity => {}
            Nonlinearity::Relu => pre.iter_mut().for_each(|v| *v = v.max(0.0)),
            Nonlinearity::JumpRelu { theta } => pre.iter_mut().for_each(|v| {
                if *v <= theta {
                    *v = 0.0
                }
            }),
            Nonlinearity::TopK { k } => {
                if k >= pre.len() {
                    return;
                }
                let mut idx: Vec<usize> = (0..pre.len()).collect();
                let cmp = |a: &usize, b: &usize| pre[*b].total_cmp(&pre[*a]).then(a.cmp(b));
                idx.select_nth_unstable_by(k, cmp);
                let mut keep = vec![false; pre.len()];
                for &i in &idx[..k] {
                    keep[i] = true;
                }
                for (v, k) in pre.iter_mut().zip(keep) {
                    if !k {
                        *v = 0.0;
                    }
                }
            }
        }
    }
}

/// Encoder/decoder weights and biases of a pretrained SAE.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    w_enc: DMatrix<f32>,
    b_enc: DVector<f32>,
    w_dec: DMatrix<f32>,
    b_dec: DVector<f32>,
    nonlinearity: Nonlinearity,
}

impl SaeParams {
    pub fn new(
        w_enc: DMatrix<f32>,
        b_enc: DVector<f32>,
        w_dec: DMatrix<f32>,
        b_dec: DVector<f32>,
        nonlinearity: Nonlinearity,
    ) -> Result<Self, SaeError> {
        let (m, n) = w_enc.shape();
        if m == 0 || n == 0 {
            return Err(SaeError::InvalidParams(format!("W_enc has shape ({m}, {n})")));
        }
        if w_dec.shape() != (n, m) {
            return Err(SaeError::InvalidParams(format!("W_dec has shape {:?}, expected ({n}, {m})", w_dec.shape())));
        }
        if b_enc.len() != m {
            return Err(SaeError::InvalidParams(format!("b_enc has length {}, expected {m}", b_enc.len())));
        }
        if b_dec.len() != n {
            return Err(SaeError::InvalidParams(format!("b_dec has length {}, expected {n}", b_dec.len())));
        }
        match nonlinearity {
            Nonlinearity::TopK { k } if k == 0 || k > m => {
                return Err(SaeError::InvalidParams(format!("TopK k={k} must be in 1..={m}")));
            }
            Nonlinearity::JumpRelu { theta } if !(theta >= 0.0) => {
                return Err(SaeError::InvalidParams(format!("JumpReLU theta={theta} must be >= 0")));
            }
            _ => {}
        }
        Ok(Self { w_enc, b_enc, w_dec, b_dec, nonlinearity })
    }

    /// Reads `W_enc`, `b_enc`, `W_dec` and `b_dec` (row-major f32) from a bundle.
    pub fn from_bundle(bundle: &TensorBundle, nonlinearity: Nonlinearity) -> Result<Self, SaeError> {
        let matrix = |name: &str| -> Result<DMatrix<f32>, SaeError> {
            let (shape, v) = bundle.f32_array(name)?;
            if shape.len() != 2 {
                return Err(SaeError::InvalidParams(format!("{name} must be 2-D, got {shape:?}")));
            }
            Ok(DMatrix::from_row_slice(shape[0], shape[1], &v))
        };
        let vector = |name: &str| -> Result<DVector<f32>, SaeError> {
            let (shape, v) = bundle.f32_array(name)?;
            if shape.len() != 1 {
                return Err(SaeError::InvalidParams(format!("{name} must be 1-D, got {shape:?}")));
            }
            Ok(DVector::from_vec(v))
        };
        Self::new(matrix("W_enc")?, vector("b_enc")?, matrix("W_dec")?, vector("b_dec")?, nonlinearity)
    }

    /// Writes the weights into `bundle` under the conventional names.
    pub fn write_to_bundle(&self, bundle: &mut TensorBundle) -> Result<(), BundleError> {
        let row_major = |m: &DMatrix<f32>| -> Vec<f32> { m.transpose().as_slice().to_vec() };
        bundle.insert_f32("W_enc", &[self.d_sae(), self.d_model()], &row_major(&self.w_enc))?;
        bundle.insert_f32("b_enc", &[self.d_sae()], self.b_enc.as_slice())?;
        bundle.insert_f32("W_dec", &[self.d_model(), self.d_sae()], &row_major(&self.w_dec))?;
        bundle.insert_f32("b_dec", &[self.d_model()], self.b_dec.as_slice())
    }

    pub fn d_model(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn d_sae(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    pub fn w_enc(&self) -> &DMatrix<f32> {
        &self.w_enc
    }

    pub fn w_dec(&self) -> &DMatrix<f32> {
        &self.w_dec
    }

    pub fn b_dec(&self) -> &DVector<f32> {
        &self.b_dec
    }

    /// f64 decoder restricted to `features` (all features when `None`).
    pub fn decoder(&self, features: Option<&[usize]>) -> Result<Decoder, SaeError> {
        let cols: Vec<usize> = match features {
            Some(map) => map.to_vec(),
            None => (0..self.d_sae()).collect(),
        };
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.d_sae()) {
            return Err(SaeError::DimMismatch(format!("feature index {bad} >= d_sae {}", self.d_sae())));
        }
        let n = self.d_model();
        // stored transposed: (k, n), so rows of latents multiply directly
        let weights = DMatrix::from_fn(cols.len(), n, |r, c| self.w_dec[(c, cols[r])] as f64);
        let bias = self.b_dec.iter().map(|&v| v as f64).collect();
        Ok(Decoder { weights, bias })
    }
}

/// Dense f64 decoder over a fixed feature subset.
#[derive(Debug, Clone)]
pub struct Decoder {
    weights: DMatrix<f64>,
    bias: Vec<f64>,
}

impl Decoder {
    pub fn n_features(&self) -> usize {
        self.weights.nrows()
    }

    /// Decodes each row of `latents` (N × k) into a residual row (N × n).
    pub fn decode_rows(&self, latents: &DMatrix<f64>) -> Result<DMatrix<f64>, SaeError> {
        if latents.ncols() != self.weights.nrows() {
            return Err(SaeError::DimMismatch(format!(
                "latent width {} vs decoder features {}",
                latents.ncols(),
                self.weights.nrows()
            )));
        }
        let mut out = latents * &self.weights;
        for mut row in out.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(out)
    }
}

fn token_rows(t: &Tensor3<f32>, start: usize, end: usize) -> DMatrix<f32> {
    let w = t.shape()[2];
    DMatrix::from_row_slice(end - start, w, &t.as_slice()[start * w..end * w])
}

/// `f = σ(W_enc·x + b_enc)` for every token.
pub fn encode(params: &SaeParams, x: &ActivationTensor) -> Result<LatentTensor, SaeError> {
    let [b, s, n] = x.shape();
    if n != params.d_model() {
        return Err(SaeError::DimMismatch(format!("input width {n} vs SAE d_model {}", params.d_model())));
    }
    let m = params.d_sae();
    let n_tokens = b * s;
    let w_enc_t = params.w_enc.transpose();
    let n_chunks = n_tokens.div_ceil(TOKEN_CHUNK);
    let chunks = crate::par::map_range(n_chunks, |ci| {
        let start = ci * TOKEN_CHUNK;
        let end = (start + TOKEN_CHUNK).min(n_tokens);
        let pre = token_rows(x.data(), start, end) * &w_enc_t;
        let mut out = Vec::with_capacity((end - start) * m);
        let mut row = vec![0f32; m];
        for r in 0..(end - start) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = pre[(r, j)] + params.b_enc[j];
            }
            params.nonlinearity.apply(&mut row);
            out.extend_from_slice(&row);
        }
        out
    });
    let data = Tensor3::from_vec([b, s, m], chunks.concat())?;
    Ok(LatentTensor::new(data, x.mask().to_vec(), None)?)
}

/// `x̂ = W_dec·f + b_dec` for every token, using only the mapped decoder
/// columns when `f` carries a feature index map.
pub fn decode(params: &SaeParams, f: &LatentTensor) -> Result<ActivationTensor, SaeError> {
    let [b, s, k] = f.shape();
    let expected = f.feature_index_map().map_or(params.d_sae(), |m| m.len());
    if k != expected || (f.feature_index_map().is_none() && k != params.d_sae()) {
        return Err(SaeError::DimMismatch(format!("latent width {k} vs SAE d_sae {}", params.d_sae())));
    }
    let dec = params.decoder(f.feature_index_map())?;
    let n = params.d_model();
    let n_tokens = b * s;
    let n_chunks = n_tokens.div_ceil(TOKEN_CHUNK);
    let chunks = crate::par::map_range(n_chunks, |ci| {
        let start = ci * TOKEN_CHUNK;
        let end = (start + TOKEN_CHUNK).min(n_tokens);
        let rows = token_rows(f.data(), start, end).map(|v| v as f64);
        let out = dec.decode_rows(&rows).expect("width checked above");
        let mut flat = Vec::with_capacity((end - start) * n);
        for r in 0..(end - start) {
            flat.extend((0..n).map(|c| out[(r, c)] as f32));
        }
        flat
    });
    let data = Tensor3::from_vec([b, s, n], chunks.concat())?;
    Ok(ActivationTensor::new(data, f.mask().to_vec())?)
}

/// Per-feature downsampling scores `Var(f_j)·(Σ_{i≠j}|Cov(f_i,f_j)| + ε)`
/// over masked tokens, with population normalisation.
pub fn feature_scores(f: &LatentTensor) -> Result<Vec<f64>, SaeError> {
    let n_masked = f.n_masked();
    if n_masked < 2 {
        return Err(SaeError::TooFewTokens(n_masked));
    }
    let rows = f.masked_rows();
    let d = rows.ncols();
    let inv_n = 1.0 / n_masked as f64;
    let centered = crate::linalg::center_columns(&rows);
    let var: Vec<f64> = (0..d).map(|j| centered.column(j).norm_squared() * inv_n).collect();
    // zero-variance features have zero covariance with everything
    let active: Vec<usize> = (0..d).filter(|&j| var[j] > 0.0).collect();
    let act = DMatrix::from_fn(n_masked, active.len(), |r, c| centered[(r, active[c])]);
    const BLOCK: usize = 128;
    let n_blocks = active.len().div_ceil(BLOCK);
    let block_sums = crate::par::map_range(n_blocks, |bi| {
        let lo = bi * BLOCK;
        let hi = (lo + BLOCK).min(active.len());
        let cov = act.columns(lo, hi - lo).transpose() * &act * inv_n;
        (0..hi - lo)
            .map(|r| {
                let total: f64 = cov.row(r).iter().map(|v| v.abs()).sum();
                total - cov[(r, lo + r)].abs()
            })
            .collect::<Vec<f64>>()
    });
    let mut cov_sum = vec![0.0; d];
    for (j, s) in active.iter().zip(block_sums.into_iter().flatten()) {
        cov_sum[*j] = s;
    }
    Ok((0..d).map(|j| var[j] * (cov_sum[j] + SCORE_EPSILON)).collect())
}

/// Keeps the `cap` highest-scoring features (ties to the lower index),
/// preserving their original order. Identity when `d_sae <= cap`.
pub fn downsample_features(f: &LatentTensor, cap: usize) -> Result<LatentTensor, SaeError> {
    if cap == 0 {
        return Err(SaeError::InvalidParams("feature cap must be positive".into()));
    }
    if f.n_masked() < 2 {
        return Err(SaeError::TooFewTokens(f.n_masked()));
    }
    let d = f.d_sae();
    if d <= cap {
        return Ok(f.clone());
    }
    let scores = feature_scores(f)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..cap].to_vec();
    kept.sort_unstable();
    let [b, s, _] = f.shape();
    let src = f.data();
    let data = Tensor3::from_fn([b, s, cap], |a, bb, c| src.get(a, bb, kept[c]))?;
    let map = match f.feature_index_map() {
        Some(prev) => kept.iter().map(|&k| prev[k]).collect(),
        None => kept,
    };
    Ok(LatentTensor::new(data, f.mask().to_vec(), Some(map))?)
}

/// Mean of `(x̂ − x)²` over masked tokens (of `x`) and all coordinates.
pub fn mse(x: &ActivationTensor, x_hat: &ActivationTensor) -> Result<f64, SaeError> {
    if x.shape() != x_hat.shape() {
        return Err(SaeError::ShapeMismatch(x.shape(), x_hat.shape()));
    }
    let n = x.d_model();
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, &keep) in x.mask().iter().enumerate() {
        if keep {
            for (a, b) in x.data().token(t).iter().zip(x_hat.data().token(t)) {
                let d = *b as f64 - *a as f64;
                total += d * d;
            }
            count += n;
        }
    }
    Ok(total / count as f64)
}

/// Mean squared difference between two equally shaped row matrices.
pub fn mse_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64, SaeError> {
    if a.shape() != b.shape() {
        return Err(SaeError::DimMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok((a - b).norm_squared() / (a.len() as f64))
}
