use serde::{Deserialize, Serialize};

use super::bures::{agd, AgdMetric};
use super::spectrum::{rank_triplet, sspd, QuantileDomain, RankTriplet, SspdMatrix, DEFAULT_EPSILON};
use super::unfold::Mode;
use super::StrataError;
use crate::perturb::{frequency_ranking, inject_noise, NoiseSpec};
use crate::saecore::{downsample_features, encode, SaeParams, DEFAULT_FEATURE_CAP};
use crate::tensor::{ActivationTensor, LatentTensor};
use crate::Error;

/// Upper bound on the number of token groups used as AGD samples.
pub const MAX_AGD_GROUPS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Case1Config {
    pub feature_cap: usize,
    pub epsilon: f64,
    pub quantile_domain: QuantileDomain,
    pub agd_metric: AgdMetric,
}

impl Default for Case1Config {
    fn default() -> Self {
        Self {
            feature_cap: DEFAULT_FEATURE_CAP,
            epsilon: DEFAULT_EPSILON,
            quantile_domain: QuantileDomain::Effective,
            agd_metric: AgdMetric::Bures,
        }
    }
}

/// One noise level of the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub noise_std: f64,
    pub triplet: RankTriplet,
    pub agd: f64,
}

/// Feature-mode Gram matrices of `min(16, batch, masked)` contiguous groups
/// of masked tokens (row-major order, group sizes differing by at most one).
pub fn group_sspds(t: &LatentTensor, epsilon: f64) -> Result<Vec<SspdMatrix>, StrataError> {
    let kept: Vec<usize> = (0..t.mask().len()).filter(|&i| t.mask()[i]).collect();
    let n_groups = MAX_AGD_GROUPS.min(t.shape()[0]).min(kept.len());
    if n_groups < 2 {
        return Err(StrataError::TooFewSamples(n_groups));
    }
    let d = t.d_sae();
    let base = kept.len() / n_groups;
    let extra = kept.len() % n_groups;
    let mut bounds = Vec::with_capacity(n_groups);
    let mut start = 0;
    for g in 0..n_groups {
        let len = base + usize::from(g < extra);
        bounds.push((start, start + len));
        start += len;
    }
    let out = crate::par::map_slice(&bounds, |&(lo, hi)| {
        let f = nalgebra::DMatrix::from_fn(d, hi - lo, |c, col| t.data().token(kept[lo + col])[c] as f64);
        sspd(&f, epsilon, Mode::Feature)
    });
    out.into_iter().collect()
}

/// Perturbs `x` at `noise_std`, encodes it and downsamples the latents.
pub fn encode_level(
    x: &ActivationTensor,
    params: &SaeParams,
    spec: &NoiseSpec,
    hi_set: &[usize],
    noise_std: f64,
    feature_cap: usize,
) -> Result<LatentTensor, Error> {
    let noisy = inject_noise(x, &spec.with_std(noise_std), hi_set)?;
    let latent = encode(params, &noisy)?;
    Ok(downsample_features(&latent, feature_cap)?)
}

fn level_record(
    x: &ActivationTensor,
    params: &SaeParams,
    spec: &NoiseSpec,
    hi_set: &[usize],
    noise_std: f64,
    cfg: &Case1Config,
) -> Result<SweepRecord, Error> {
    let latent = encode_level(x, params, spec, hi_set, noise_std, cfg.feature_cap)?;
    let triplet = rank_triplet(&latent, cfg.epsilon, cfg.quantile_domain)?;
    let groups = group_sspds(&latent, cfg.epsilon)?;
    let agd = agd(&groups, cfg.agd_metric)?;
    Ok(SweepRecord { noise_std, triplet, agd })
}

/// Noise sweep: for every level, inject noise, encode, downsample, then
/// report the rank triplet and AGD. The high-noise coordinate set is ranked
/// once on the clean input. Records come back in level order.
pub fn case1_sweep(
    x: &ActivationTensor,
    params: &SaeParams,
    levels: &[f64],
    spec: &NoiseSpec,
    cfg: &Case1Config,
) -> Result<Vec<SweepRecord>, Error> {
    if levels.is_empty() {
        return Err(StrataError::Invalid("noise level list is empty".into()).into());
    }
    if let Some(bad) = levels.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
        return Err(StrataError::Invalid(format!("noise level {bad} must be finite and >= 0")).into());
    }
    spec.validate(x.d_model())?;
    let hi_set = frequency_ranking(x, spec.top_k)?;
    let records = crate::par::map_slice(levels, |&level| level_record(x, params, spec, &hi_set, level, cfg));
    records.into_iter().collect()
}
