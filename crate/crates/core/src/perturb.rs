//! Feature-directed Gaussian noise on residual streams.
//!
//! The `top_k` most frequently active residual coordinates receive noise
//! with standard deviation `hi_scale · noise_std`; all other coordinates get
//! `lo_scale · noise_std`. A coordinate's activation frequency is the
//! fraction of masked tokens whose absolute value exceeds the median absolute
//! value of the whole masked tensor.
//!
//! Noise draws come from two ChaCha8 streams, one per coordinate class,
//! seeded with `derive_seed(seed, ["noise", class, noise_std])` where class
//! is `"hi"` or `"lo"`. Elements are visited in row-major order and each
//! draws one standard normal (ziggurat) from its class stream. Noise is
//! added in f64 and rounded to f32 once.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::seed::{derive_seed, rng_from_seed};
use crate::tensor::{ActivationTensor, Tensor3, TensorError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PerturbError {
    #[error("top_k {top_k} exceeds d_model {d_model}")]
    TopKTooLarge { top_k: usize, d_model: usize },
    #[error("coordinate index {index} out of range for d_model {d_model}")]
    IndexOutOfRange { index: usize, d_model: usize },
    #[error("invalid noise spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub noise_std: f64,
    pub top_k: usize,
    pub hi_scale: f64,
    pub lo_scale: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { noise_std: 0.0, top_k: 100, hi_scale: 2.0, lo_scale: 0.2, seed: 0 }
    }
}

impl NoiseSpec {
    pub fn with_std(self, noise_std: f64) -> Self {
        Self { noise_std, ..self }
    }

    pub fn validate(&self, d_model: usize) -> Result<(), PerturbError> {
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(PerturbError::InvalidSpec(format!("noise_std {} must be finite and >= 0", self.noise_std)));
        }
        if self.top_k == 0 {
            return Err(PerturbError::InvalidSpec("top_k must be positive".into()));
        }
        if self.top_k > d_model {
            return Err(PerturbError::TopKTooLarge { top_k: self.top_k, d_model });
        }
        if !(self.lo_scale >= 0.0 && self.hi_scale >= self.lo_scale) {
            return Err(PerturbError::InvalidSpec(format!(
                "need hi_scale >= lo_scale >= 0, got {} / {}",
                self.hi_scale, self.lo_scale
            )));
        }
        Ok(())
    }
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Per-coordinate activation frequency over masked tokens.
pub fn activation_frequency(x: &ActivationTensor) -> Vec<f64> {
    let rows = x.masked_rows();
    let mut abs: Vec<f64> = rows.iter().map(|v| v.abs()).collect();
    let threshold = median(&mut abs);
    let n = rows.nrows() as f64;
    (0..rows.ncols()).map(|c| rows.column(c).iter().filter(|v| v.abs() > threshold).count() as f64 / n).collect()
}

/// The `top_k` coordinates with the highest activation frequency, most
/// frequent first, ties to the lower index.
pub fn frequency_ranking(x: &ActivationTensor, top_k: usize) -> Result<Vec<usize>, PerturbError> {
    let d = x.d_model();
    if top_k > d {
        return Err(PerturbError::TopKTooLarge { top_k, d_model: d });
    }
    let freq = activation_frequency(x);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| freq[b].total_cmp(&freq[a]).then(a.cmp(&b)));
    order.truncate(top_k);
    Ok(order)
}

/// Returns `x + η` with class-dependent Gaussian `η`. Masked and unmasked
/// tokens are treated alike.
pub fn inject_noise(
    x: &ActivationTensor,
    spec: &NoiseSpec,
    hi_set: &[usize],
) -> Result<ActivationTensor, PerturbError> {
    let d = x.d_model();
    if let Some(&index) = hi_set.iter().find(|&&i| i >= d) {
        return Err(PerturbError::IndexOutOfRange { index, d_model: d });
    }
    if !(spec.noise_std >= 0.0) || !spec.noise_std.is_finite() {
        return Err(PerturbError::InvalidSpec(format!("noise_std {} must be finite and >= 0", spec.noise_std)));
    }
    let mut is_hi = vec![false; d];
    for &i in hi_set {
        is_hi[i] = true;
    }
    let hi_std = spec.hi_scale * spec.noise_std;
    let lo_std = spec.lo_scale * spec.noise_std;
    let mut hi_rng = rng_from_seed(derive_seed(spec.seed, &["noise".into(), "hi".into(), spec.noise_std.into()]));
    let mut lo_rng = rng_from_seed(derive_seed(spec.seed, &["noise".into(), "lo".into(), spec.noise_std.into()]));

    let mut out: Vec<f32> = x.data().as_slice().to_vec();
    for (i, v) in out.iter_mut().enumerate() {
        let c = i % d;
        let (std, rng) = if is_hi[c] { (hi_std, &mut hi_rng) } else { (lo_std, &mut lo_rng) };
        if std == 0.0 {
            continue;
        }
        let z: f64 = StandardNormal.sample(rng);
        *v = (*v as f64 + std * z) as f32;
    }
    let data = Tensor3::from_vec(x.shape(), out)?;
    Ok(ActivationTensor::new(data, x.mask().to_vec())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn columns(values: &[[f32; 4]]) -> ActivationTensor {
        let flat: Vec<f32> = values.iter().flatten().copied().collect();
        ActivationTensor::unmasked(Tensor3::from_vec([1, values.len(), 4], flat).unwrap())
    }

    #[test]
    fn full_ranking_returns_all() {
        let x = columns(&[[1.0, 2.0, 3.0, 4.0], [0.0, 5.0, 0.0, 1.0]]);
        let mut r = frequency_ranking(&x, 4).unwrap();
        r.sort();
        assert_eq!(r, vec![0, 1, 2, 3]);
    }

    #[test]
    fn constant_strong_column_ranks_first() {
        let x = columns(&[[0.0, 0.0, 10.0, 0.0]; 5]);
        assert_eq!(frequency_ranking(&x, 1).unwrap(), vec![2]);
        let x = columns(&[[10.0, 0.0, 0.0, 0.0]; 5]);
        assert_eq!(frequency_ranking(&x, 1).unwrap(), vec![0]);
    }

    #[test]
    fn identical_columns_tie_to_lower_index() {
        let x = columns(&[[0.0, 3.0, 3.0, 0.1], [0.0, -4.0, -4.0, 0.2], [0.0, 5.0, 5.0, 0.0]]);
        assert_eq!(frequency_ranking(&x, 1).unwrap(), vec![1]);
    }

    #[test]
    fn ranking_ignores_masked_tokens() {
        let t = Tensor3::from_vec([1, 3, 2], vec![0.0, 9.0, 0.0, 9.0, 9.0, 0.0]).unwrap();
        let x = ActivationTensor::new(t, vec![true, true, false]).unwrap();
        assert_eq!(frequency_ranking(&x, 1).unwrap(), vec![1]);
    }

    #[test]
    fn top_k_too_large() {
        let x = columns(&[[1.0; 4]]);
        assert_eq!(frequency_ranking(&x, 5), Err(PerturbError::TopKTooLarge { top_k: 5, d_model: 4 }));
    }

    #[test]
    fn zero_noise_is_bitwise_identity() {
        let x = columns(&[[-0.0, 1.5, f32::MIN_POSITIVE, -3.25]; 3]);
        let spec = NoiseSpec { noise_std: 0.0, top_k: 1, seed: 99, ..Default::default() };
        let y = inject_noise(&x, &spec, &[0]).unwrap();
        let bits = |t: &ActivationTensor| t.data().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x), bits(&y));
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let x = columns(&[[1.0, 2.0, 3.0, 4.0]; 8]);
        let spec = NoiseSpec { noise_std: 0.7, top_k: 2, seed: 5, ..Default::default() };
        let a = inject_noise(&x, &spec, &[1, 3]).unwrap();
        let b = inject_noise(&x, &spec, &[1, 3]).unwrap();
        assert_eq!(a, b);
        let c = inject_noise(&x, &NoiseSpec { seed: 6, ..spec }, &[1, 3]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn out_of_range_index() {
        let x = columns(&[[1.0; 4]]);
        let spec = NoiseSpec { noise_std: 1.0, top_k: 1, ..Default::default() };
        assert_eq!(inject_noise(&x, &spec, &[4]), Err(PerturbError::IndexOutOfRange { index: 4, d_model: 4 }));
    }

    #[test]
    fn spec_validation() {
        let ok = NoiseSpec { top_k: 4, ..Default::default() };
        assert!(ok.validate(4).is_ok());
        assert!(ok.validate(3).is_err());
        assert!(NoiseSpec { hi_scale: 0.1, ..ok }.validate(4).is_err());
        assert!(NoiseSpec { noise_std: -1.0, ..ok }.validate(4).is_err());
    }

    #[test]
    fn monte_carlo_std_per_class() {
        let n = 100_000;
        let x = ActivationTensor::unmasked(Tensor3::filled([1, n, 3], 0.0).unwrap());
        let spec = NoiseSpec { noise_std: 1.0, top_k: 1, seed: 1234, ..Default::default() };
        let y = inject_noise(&x, &spec, &[0]).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..n).map(|t| y.data().token(t)[c] as f64).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            let target = if c == 0 { 2.0 } else { 0.2 };
            assert!((sd - target).abs() <= 0.05 * target, "coord {c}: sd {sd}");
            // mean within 5 standard errors of zero
            assert!(mean.abs() <= 5.0 * target / (n as f64).sqrt(), "coord {c}: mean {mean}");
        }
    }

    #[test]
    fn masked_tokens_are_perturbed_like_unmasked() {
        let data = Tensor3::filled([2, 3, 2], 1.0).unwrap();
        let spec = NoiseSpec { noise_std: 0.3, top_k: 1, seed: 8, ..Default::default() };
        let a = inject_noise(&ActivationTensor::unmasked(data.clone()), &spec, &[1]).unwrap();
        let masked = ActivationTensor::new(data, vec![true, false, true, false, false, true]).unwrap();
        let b = inject_noise(&masked, &spec, &[1]).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(b.shape(), [2, 3, 2]);
    }
}
