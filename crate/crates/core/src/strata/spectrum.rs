use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::unfold::{unfold, Mode};
use super::StrataError;
use crate::linalg::sym_eigen_desc;
use crate::tensor::LatentTensor;

/// Ridge added to every Gram matrix.
pub const DEFAULT_EPSILON: f64 = 1e-5;
/// Eigenvalues at or below this fraction of the largest are not effective.
pub const EFFECTIVE_CUTOFF: f64 = 1e-6;
const DEGENERATE_TAU: f64 = 1.0 - 1e-12;

/// `FFᵀ + εI` for one unfolding mode.
#[derive(Debug, Clone, PartialEq)]
pub struct SspdMatrix {
    data: DMatrix<f64>,
    epsilon: f64,
    mode: Mode,
}

impl SspdMatrix {
    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    /// Wraps an existing symmetric matrix (tests and external callers).
    pub fn from_symmetric(data: DMatrix<f64>, epsilon: f64, mode: Mode) -> Result<Self, StrataError> {
        if !data.is_square() || data.nrows() == 0 {
            return Err(StrataError::EmptyMatrix);
        }
        if data != data.transpose() {
            return Err(StrataError::Invalid("matrix is not symmetric".into()));
        }
        Ok(Self { data, epsilon, mode })
    }
}

/// `S = (FFᵀ + (FFᵀ)ᵀ)/2 + εI`, computed in f64 and exactly symmetric.
pub fn sspd(f: &DMatrix<f64>, epsilon: f64, mode: Mode) -> Result<SspdMatrix, StrataError> {
    if f.nrows() == 0 || f.ncols() == 0 {
        return Err(StrataError::EmptyMatrix);
    }
    if !(epsilon >= 0.0) {
        return Err(StrataError::Invalid(format!("epsilon {epsilon} must be >= 0")));
    }
    let gram = f * f.transpose();
    let m = gram.nrows();
    let mut s = DMatrix::zeros(m, m);
    for i in 0..m {
        s[(i, i)] = gram[(i, i)] + epsilon;
        for j in (i + 1)..m {
            let v = 0.5 * (gram[(i, j)] + gram[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    Ok(SspdMatrix { data: s, epsilon, mode })
}

/// Eigenvalues of `S` in descending order (equal to its singular values,
/// since `S` is symmetric positive definite). Values that differ from the
/// ridge `ε` only by round-off are reported as exactly `ε`.
pub fn spectrum(s: &SspdMatrix) -> Result<Vec<f64>, StrataError> {
    let (mut values, _) = sym_eigen_desc(&s.data)
        .ok_or_else(|| StrataError::NumericalFailure("symmetric eigendecomposition did not converge".into()))?;
    let top = values.first().copied().unwrap_or(0.0).abs();
    let tol = 8.0 * (s.dim() as f64) * f64::EPSILON * top;
    for v in values.iter_mut() {
        if (*v - s.epsilon).abs() <= tol {
            *v = s.epsilon;
        }
    }
    Ok(values)
}

/// Linear-interpolation (type 7) quantile of ascending-sorted `sorted`.
pub fn type7_quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty set");
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Which normalised eigenvalues enter the first-quartile threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileDomain {
    /// Only effective eigenvalues `λ_j > 1e-6·λ_1`.
    #[default]
    Effective,
    /// Every eigenvalue, including those under the effective cutoff.
    All,
}

/// Effective rank with the default quantile domain.
pub fn effective_rank(s: &SspdMatrix) -> Result<(usize, f64), StrataError> {
    effective_rank_with(s, QuantileDomain::Effective)
}

/// `rank = #{j : λ_j/λ_1 > τ}` where `τ` is the first quartile of the
/// normalised eigenvalues in `domain`. When all of those ratios are equal
/// (`τ ≥ 1 − 1e-12`) the rank is the size of the effective set.
pub fn effective_rank_with(s: &SspdMatrix, domain: QuantileDomain) -> Result<(usize, f64), StrataError> {
    let values = spectrum(s)?;
    let top = values[0];
    if !(top > 0.0) {
        return Ok((0, 0.0));
    }
    let ratios: Vec<f64> = values.iter().map(|v| v / top).collect();
    let effective = values.iter().filter(|&&v| v > EFFECTIVE_CUTOFF * top).count();
    let mut pool: Vec<f64> = match domain {
        QuantileDomain::Effective => ratios[..effective].to_vec(),
        QuantileDomain::All => ratios.clone(),
    };
    pool.sort_by(f64::total_cmp);
    let tau = type7_quantile(&pool, 0.25);
    if tau >= DEGENERATE_TAU {
        return Ok((effective, tau));
    }
    Ok((ratios.iter().filter(|&&r| r > tau).count(), tau))
}

/// Effective ranks and thresholds of the three mode Gram matrices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankTriplet {
    pub r1: usize,
    pub r2: usize,
    pub r3: usize,
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
}

impl RankTriplet {
    pub fn ranks(&self) -> (usize, usize, usize) {
        (self.r1, self.r2, self.r3)
    }
}

/// Rank triplet of a latent tensor. Masked-out tokens are zeroed first so
/// they contribute nothing to any Gram matrix.
pub fn rank_triplet(t: &LatentTensor, epsilon: f64, domain: QuantileDomain) -> Result<RankTriplet, StrataError> {
    let data = t.with_masked_zeroed();
    let per_mode = crate::par::map_range(3, |i| {
        let mode = Mode::ALL[i];
        let s = sspd(&unfold(&data, mode), epsilon, mode)?;
        effective_rank_with(&s, domain)
    });
    let mut out = [(0usize, 0f64); 3];
    for (slot, r) in out.iter_mut().zip(per_mode) {
        *slot = r?;
    }
    Ok(RankTriplet { r1: out[0].0, r2: out[1].0, r3: out[2].0, tau1: out[0].1, tau2: out[1].1, tau3: out[2].1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor3;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_gives_ridge() {
        let s = sspd(&DMatrix::zeros(3, 5), 1e-5, Mode::Batch).unwrap();
        assert_eq!(s.data(), &(DMatrix::identity(3, 3) * 1e-5));
    }

    #[test]
    fn identity_input() {
        let s = sspd(&DMatrix::identity(2, 2), 1e-5, Mode::Batch).unwrap();
        assert_eq!(s.data(), &(DMatrix::identity(2, 2) * (1.0 + 1e-5)));
    }

    #[test]
    fn matches_direct_gram_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-2.0..2.0));
        let s = sspd(&f, 1e-5, Mode::Seq).unwrap();
        let oracle = &f * f.transpose() + DMatrix::identity(3, 3) * 1e-5;
        assert!((s.data() - &oracle).amax() <= 1e-12);
        assert_eq!(s.data(), &s.data().transpose());
        let min_eig = spectrum(&s).unwrap().last().copied().unwrap();
        assert!(min_eig >= 1e-5 - 1e-9);
    }

    #[test]
    fn empty_matrix_rejected() {
        assert_eq!(sspd(&DMatrix::zeros(0, 3), 1e-5, Mode::Batch), Err(StrataError::EmptyMatrix));
    }

    #[test]
    fn quantile_type7() {
        assert_eq!(type7_quantile(&[0.25, 1.0], 0.25), 0.4375);
        assert_eq!(type7_quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.25), 2.0);
        assert_eq!(type7_quantile(&[7.0], 0.25), 7.0);
    }

    #[test]
    fn isotropic_ridge_hits_degenerate_guard() {
        let s = sspd(&DMatrix::zeros(4, 2), 1e-5, Mode::Feature).unwrap();
        for d in [QuantileDomain::Effective, QuantileDomain::All] {
            let (rank, tau) = effective_rank_with(&s, d).unwrap();
            assert_eq!(rank, 4);
            assert_relative_eq!(tau, 1.0);
        }
    }

    fn two_row_f() -> DMatrix<f64> {
        let mut f = DMatrix::zeros(5, 8);
        f[(0, 0)] = 10.0;
        f[(1, 1)] = 5.0;
        f
    }

    #[test]
    fn rank_two_construction_effective_domain() {
        // spectrum {100+ε, 25+ε, ε, ε, ε}; ε/λ1 < 1e-6 so only two ratios are
        // effective: {1, 0.25} -> Q1 = 0.4375 -> one ratio above it
        let s = sspd(&two_row_f(), 1e-5, Mode::Batch).unwrap();
        let (rank, tau) = effective_rank_with(&s, QuantileDomain::Effective).unwrap();
        let l1 = 100.0 + 1e-5;
        let r2 = (25.0 + 1e-5) / l1;
        assert_relative_eq!(tau, r2 + 0.25 * (1.0 - r2), max_relative = 1e-12);
        assert_eq!(rank, 1);
    }

    #[test]
    fn rank_two_construction_all_domain() {
        // all five ratios: three equal floor values put Q1 on the floor
        let s = sspd(&two_row_f(), 1e-5, Mode::Batch).unwrap();
        let (rank, tau) = effective_rank_with(&s, QuantileDomain::All).unwrap();
        assert_relative_eq!(tau, 1e-5 / (100.0 + 1e-5), max_relative = 1e-12);
        assert_eq!(rank, 2);
    }

    fn planted_rank(r: usize, m: usize, seed: u64) -> DMatrix<f64> {
        // orthonormal rows scaled 10^r, ..., 10
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let q = g.qr().q();
        let mut f = DMatrix::zeros(m, m);
        for k in 0..r {
            let scale = 10f64.powi((r - k) as i32);
            for c in 0..m {
                f[(k, c)] = scale * q[(c, k)];
            }
        }
        f
    }

    #[test]
    fn planted_power_spectrum_all_domain_recovers_rank() {
        for r in 1..=4 {
            let s = sspd(&planted_rank(r, 12, r as u64), 1e-5, Mode::Feature).unwrap();
            assert_eq!(effective_rank_with(&s, QuantileDomain::All).unwrap().0, r, "r = {r}");
        }
    }

    #[test]
    fn rank_one_outer_product_is_one_on_every_mode() {
        let (u, v, w) = ([1.0, -2.0, 0.5, 3.0], [2.0, 1.0, -1.0], [0.3, 0.1, -0.4, 0.9, 0.2, -0.7, 0.5, 0.1]);
        let data = Tensor3::from_fn([4, 3, 8], |a, b, c| (u[a] * v[b] * w[c]) as f32).unwrap();
        let t = LatentTensor::new(data, vec![true; 12], None).unwrap();
        for d in [QuantileDomain::Effective, QuantileDomain::All] {
            let tr = rank_triplet(&t, 1e-5, d).unwrap();
            assert_eq!(tr.ranks(), (1, 1, 1));
        }
    }

    #[test]
    fn zero_latent_is_full_rank_by_guard() {
        let t = LatentTensor::new(Tensor3::filled([4, 3, 8], 0.0).unwrap(), vec![true; 12], None).unwrap();
        let tr = rank_triplet(&t, 1e-5, QuantileDomain::Effective).unwrap();
        assert_eq!(tr.ranks(), (4, 3, 8));
    }

    #[test]
    fn masked_tokens_do_not_contribute() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = Tensor3::from_fn([3, 4, 6], |_, _, _| rng.random_range(-1.0f32..1.0)).unwrap();
        let mask: Vec<bool> = (0..12).map(|t| t != 5).collect();
        let mut poisoned = base.clone();
        poisoned.as_mut_slice()[5 * 6..6 * 6].fill(100.0);
        let a = rank_triplet(&LatentTensor::new(base.clone(), mask.clone(), None).unwrap(), 1e-5, Default::default());
        let b = rank_triplet(&LatentTensor::new(poisoned, mask, None).unwrap(), 1e-5, Default::default());
        assert_eq!(a, b);
    }
}
