use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::gw::{gw_distance_with, GwOptions};
use super::{aedp, cluster_centers, normalized_distance_matrix, InterveneError, MetricMatrix};
use crate::geostruct::{select_rows, ClusterAssignment};
use crate::saecore::{mse_rows, Decoder, SaeParams};
use crate::seed::{derive_seed, rng_from_seed};
use crate::tensor::{ActivationTensor, LatentTensor};

pub const DEFAULT_ALPHAS: [f64; 5] = [0.5, 0.8, 1.0, 1.2, 1.5];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `d_GW(D_original, D_intervened) + λ·MSE`
    #[default]
    Gw,
    /// `1 / AEDP + λ·MSE`
    InvAedp,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Gw => "gw",
            LossKind::InvAedp => "inv_aedp",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gw" => Ok(LossKind::Gw),
            "inv_aedp" => Ok(LossKind::InvAedp),
            other => Err(format!("unknown loss kind {other:?} (expected gw or inv_aedp)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterventionConfig {
    pub alpha: f64,
    pub iterations: usize,
    pub lambda_mse: f64,
    pub loss_kind: LossKind,
    /// Cap on the points behind the distance matrices.
    pub subsample: usize,
    pub seed: u64,
    pub gw: GwOptions,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            iterations: 10,
            lambda_mse: 1.0,
            loss_kind: LossKind::Gw,
            subsample: 256,
            seed: 0,
            gw: GwOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub loss_kind: LossKind,
    pub alpha: f64,
    /// GW distance between the original and the incumbent geometry.
    pub d_gw: f64,
    pub mse: f64,
    pub aedp_orig: f64,
    pub aedp_best: f64,
    /// `1 / aedp_best` for the inverse-AEDP loss.
    pub inv_aedp: Option<f64>,
    /// Incumbent loss after each iteration.
    pub loss_trace: Vec<f64>,
}

/// Indices of at most `cap` rows, allocated to clusters (and the noise
/// group) in proportion to their size by largest remainder, drawn without
/// replacement, and returned in ascending order.
pub fn stratified_subsample(labels: &ClusterAssignment, cap: usize, seed: u64) -> Vec<usize> {
    let n = labels.len();
    if n <= cap {
        return (0..n).collect();
    }
    // stratum 0 is noise, 1..=k the clusters
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); labels.k() + 1];
    for (i, &l) in labels.labels().iter().enumerate() {
        strata[(l + 1) as usize].push(i);
    }
    let exact: Vec<f64> = strata.iter().map(|s| cap as f64 * s.len() as f64 / n as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = cap - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..strata.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for s in order {
        if left == 0 {
            break;
        }
        if quota[s] < strata[s].len() {
            quota[s] += 1;
            left -= 1;
        }
    }
    let mut rng = rng_from_seed(derive_seed(seed, &["subsample".into()]));
    let mut out = Vec::with_capacity(cap);
    for (members, q) in strata.iter_mut().zip(quota) {
        members.shuffle(&mut rng);
        out.extend_from_slice(&members[..q]);
    }
    out.sort_unstable();
    out
}

/// `K × d` matrix of independent unit-norm Gaussian rows.
fn unit_directions(k: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    let mut g = DMatrix::zeros(k, d);
    for r in 0..k {
        loop {
            for c in 0..d {
                g[(r, c)] = StandardNormal.sample(&mut rng);
            }
            let norm = g.row(r).norm();
            if norm > 0.0 {
                g.row_mut(r).unscale_mut(norm);
                break;
            }
        }
    }
    g
}

fn translate(latents: &DMatrix<f64>, labels: &ClusterAssignment, shift: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = latents.clone();
    for (i, &l) in labels.labels().iter().enumerate() {
        if l >= 0 {
            for c in 0..out.ncols() {
                out[(i, c)] += shift[(l as usize, c)];
            }
        }
    }
    out
}

struct Problem {
    latents: DMatrix<f64>,
    target: DMatrix<f64>,
    decoder: Decoder,
}

fn prepare(
    latents: &LatentTensor,
    labels: &ClusterAssignment,
    params: &SaeParams,
    x: &ActivationTensor,
) -> Result<Problem, InterveneError> {
    if latents.mask() != x.mask() {
        return Err(InterveneError::Invalid("latent and residual tensors must share one mask".into()));
    }
    let rows = latents.masked_rows();
    if labels.len() != rows.nrows() {
        return Err(InterveneError::Invalid(format!("{} labels for {} masked tokens", labels.len(), rows.nrows())));
    }
    let decoder = params.decoder(latents.feature_index_map())?;
    Ok(Problem { latents: rows, target: x.masked_rows(), decoder })
}

/// Reconstruction error of the untouched latents, computed exactly as
/// inside [`random_search_intervene`].
pub fn baseline_mse(latents: &LatentTensor, params: &SaeParams, x: &ActivationTensor) -> Result<f64, InterveneError> {
    let labels = ClusterAssignment::canonical(&vec![-1; latents.n_masked()]);
    let p = prepare(latents, &labels, params, x)?;
    Ok(mse_rows(&p.target, &p.decoder.decode_rows(&p.latents)?)?)
}

/// Random-search translation of cluster centres.
///
/// Every iteration draws unit directions `G` (seeded by `cfg.seed` and the
/// iteration index only, so different `α` share directions), proposes
/// `centers + α·G` from the original latents, moves every member with its
/// centre, and scores the proposal. The incumbent starts empty (loss `+∞`)
/// and is replaced only by a strictly better proposal.
pub fn random_search_intervene(
    latents: &LatentTensor,
    labels: &ClusterAssignment,
    params: &SaeParams,
    x: &ActivationTensor,
    cfg: &InterventionConfig,
) -> Result<InterventionRecord, InterveneError> {
    if !(cfg.alpha >= 0.0) || !cfg.alpha.is_finite() {
        return Err(InterveneError::Invalid(format!("alpha must be finite and >= 0, got {}", cfg.alpha)));
    }
    if cfg.iterations == 0 || cfg.subsample < 2 {
        return Err(InterveneError::Invalid("iterations must be >= 1 and subsample >= 2".into()));
    }
    let p = prepare(latents, labels, params, x)?;
    let centers = cluster_centers(&p.latents, labels)?;
    if centers.nrows() < 2 {
        return Err(InterveneError::TooFewClusters(centers.nrows()));
    }
    let sub = stratified_subsample(labels, cfg.subsample, cfg.seed);
    let d0 = normalized_distance_matrix(&select_rows(&p.latents, &sub))?;
    let aedp_orig = aedp(&centers)?;
    let uniform = vec![1.0 / sub.len() as f64; sub.len()];
    let gw = |d1: &MetricMatrix| -> Result<f64, InterveneError> {
        Ok(gw_distance_with(&d0, d1, &uniform, &uniform, &cfg.gw)?.distance)
    };

    struct Incumbent {
        loss: f64,
        shift: DMatrix<f64>,
        d_gw: Option<f64>,
        mse: f64,
        aedp: f64,
    }
    let mut best: Option<Incumbent> = None;
    let mut trace = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let g = unit_directions(
            centers.nrows(),
            centers.ncols(),
            derive_seed(cfg.seed, &["direction".into(), (t as u64).into()]),
        );
        let shift = g * cfg.alpha;
        let moved = translate(&p.latents, labels, &shift);
        let mse = mse_rows(&p.target, &p.decoder.decode_rows(&moved)?)?;
        let new_centers = &centers + &shift;
        let sep = aedp(&new_centers)?;
        let (structural, d_gw) = match cfg.loss_kind {
            LossKind::Gw => {
                let d = gw(&normalized_distance_matrix(&select_rows(&moved, &sub))?)?;
                (d, Some(d))
            }
            LossKind::InvAedp => (1.0 / sep, None),
        };
        let loss = structural + cfg.lambda_mse * mse;
        if best.as_ref().is_none_or(|b| loss < b.loss) {
            best = Some(Incumbent { loss, shift, d_gw, mse, aedp: sep });
        }
        trace.push(best.as_ref().map_or(f64::INFINITY, |b| b.loss));
    }
    let best = best.ok_or_else(|| InterveneError::NumericalFailure("no finite proposal".into()))?;
    let d_gw = match best.d_gw {
        Some(d) => d,
        None => gw(&normalized_distance_matrix(&select_rows(&translate(&p.latents, labels, &best.shift), &sub))?)?,
    };
    Ok(InterventionRecord {
        loss_kind: cfg.loss_kind,
        alpha: cfg.alpha,
        d_gw,
        mse: best.mse,
        aedp_orig,
        aedp_best: best.aedp,
        inv_aedp: (cfg.loss_kind == LossKind::InvAedp).then(|| 1.0 / best.aedp),
        loss_trace: trace,
    })
}

/// Pearson correlation; `None` with fewer than two values or zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case3Result {
    /// Loss-kind major, then in `alphas` order.
    pub records: Vec<InterventionRecord>,
    /// Pearson(aedp_best, mse) over each loss kind's records.
    pub correlations: Vec<(LossKind, Option<f64>)>,
}

/// One intervention per `(loss kind, α)`.
pub fn case3_sweep(
    latents: &LatentTensor,
    labels: &ClusterAssignment,
    params: &SaeParams,
    x: &ActivationTensor,
    alphas: &[f64],
    kinds: &[LossKind],
    base: &InterventionConfig,
) -> Result<Case3Result, InterveneError> {
    if alphas.is_empty() || kinds.is_empty() {
        return Err(InterveneError::Invalid("need at least one alpha and one loss kind".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
        return Err(InterveneError::Invalid(format!("alphas must be positive, got {a}")));
    }
    let jobs: Vec<(LossKind, f64)> = kinds.iter().flat_map(|&k| alphas.iter().map(move |&a| (k, a))).collect();
    let records = crate::par::map_slice(&jobs, |&(loss_kind, alpha)| {
        random_search_intervene(latents, labels, params, x, &InterventionConfig { alpha, loss_kind, ..*base })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let correlations = kinds
        .iter()
        .map(|&k| {
            let (a, m): (Vec<f64>, Vec<f64>) =
                records.iter().filter(|r| r.loss_kind == k).map(|r| (r.aedp_best, r.mse)).unzip();
            (k, pearson(&a, &m))
        })
        .collect();
    Ok(Case3Result { records, correlations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::saecore::Nonlinearity;
    use crate::tensor::Tensor3;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two clusters in 3-D, encoder `z = s·x`, identity decoder.
    fn world(seed: u64, s: f32) -> (ActivationTensor, LatentTensor, SaeParams, ClusterAssignment) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centres = [[4.0f32, 0.0, 0.0], [-4.0, 0.0, 0.0]];
        let data = Tensor3::from_fn([2, 12, 3], |a, _, c| centres[a][c] + rng.random_range(-0.5..0.5)).unwrap();
        let x = ActivationTensor::unmasked(data);
        let eye = DMatrix::<f32>::identity(3, 3);
        let params =
            SaeParams::new(eye.clone() * s, DVector::zeros(3), eye, DVector::zeros(3), Nonlinearity::Identity).unwrap();
        let latents = crate::saecore::encode(&params, &x).unwrap();
        let labels = ClusterAssignment::new((0..24).map(|t| (t / 12) as i64).collect()).unwrap();
        (x, latents, params, labels)
    }

    #[test]
    fn null_intervention_reproduces_baseline() {
        let (x, z, p, labels) = world(1, 0.7);
        for kind in [LossKind::Gw, LossKind::InvAedp] {
            let cfg = InterventionConfig { alpha: 0.0, loss_kind: kind, ..Default::default() };
            let rec = random_search_intervene(&z, &labels, &p, &x, &cfg).unwrap();
            assert_eq!(rec.mse, baseline_mse(&z, &p, &x).unwrap());
            assert!(rec.d_gw <= 1e-8);
            assert_eq!(rec.aedp_best, rec.aedp_orig);
        }
    }

    #[test]
    fn trace_never_increases() {
        let (x, z, p, labels) = world(2, 0.5);
        for seed in 0..10 {
            let cfg = InterventionConfig { alpha: 1.0, seed, iterations: 8, ..Default::default() };
            let rec = random_search_intervene(&z, &labels, &p, &x, &cfg).unwrap();
            assert_eq!(rec.loss_trace.len(), 8);
            assert!(rec.loss_trace.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn sweep_is_deterministic_and_ordered() {
        let (x, z, p, labels) = world(3, 0.6);
        let base = InterventionConfig { iterations: 4, seed: 5, ..Default::default() };
        let kinds = [LossKind::Gw, LossKind::InvAedp];
        let a = case3_sweep(&z, &labels, &p, &x, &DEFAULT_ALPHAS, &kinds, &base).unwrap();
        let b = case3_sweep(&z, &labels, &p, &x, &DEFAULT_ALPHAS, &kinds, &base).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 10);
        assert_eq!(a.records[5].loss_kind, LossKind::InvAedp);
        assert_eq!(a.records[6].alpha, 0.8);
        assert!(a.records[5].inv_aedp.is_some() && a.records[0].inv_aedp.is_none());
        assert!(case3_sweep(&z, &labels, &p, &x, &[0.0], &kinds, &base).is_err());
    }

    #[test]
    fn needs_two_clusters() {
        let (x, z, p, _) = world(4, 0.5);
        let one = ClusterAssignment::new(vec![0; 24]).unwrap();
        let cfg = InterventionConfig::default();
        assert!(matches!(random_search_intervene(&z, &one, &p, &x, &cfg), Err(InterveneError::TooFewClusters(1))));
        let none = ClusterAssignment::new(vec![-1; 24]).unwrap();
        assert!(matches!(random_search_intervene(&z, &none, &p, &x, &cfg), Err(InterveneError::NoClusters)));
    }

    #[test]
    fn subsample_is_stratified_and_sorted() {
        let raw: Vec<i64> = (0..100)
            .map(|i| {
                if i < 60 {
                    0
                } else if i < 90 {
                    1
                } else {
                    -1
                }
            })
            .collect();
        let labels = ClusterAssignment::canonical(&raw);
        let s = stratified_subsample(&labels, 10, 7);
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        let counts = [s.iter().filter(|&&i| i < 60).count(), s.iter().filter(|&&i| (60..90).contains(&i)).count()];
        assert_eq!(counts, [6, 3]);
        assert_eq!(s, stratified_subsample(&labels, 10, 7));
        assert_eq!(stratified_subsample(&labels, 500, 7).len(), 100);
    }

    #[test]
    fn pearson_examples() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]), Some(1.0));
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(pearson(&[1.0, 1.0], &[3.0, 2.0]), None);
        assert_eq!(pearson(&[1.0], &[3.0]), None);
    }

    #[test]
    fn loss_kind_parses() {
        assert_eq!("gw".parse::<LossKind>(), Ok(LossKind::Gw));
        assert_eq!("inv_aedp".parse::<LossKind>(), Ok(LossKind::InvAedp));
        assert!("other".parse::<LossKind>().is_err());
    }
}
