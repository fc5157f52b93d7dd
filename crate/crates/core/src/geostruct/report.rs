use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{
    betti0, centroids, hdbscan, match_centroids, mst_weight, pca_id, procrustes_disparity, reduce, select_rows,
    standardize, twonn_id, ClusterAssignment, GeoError, PointCloud, Provenance, Reduction, DEFAULT_MIN_CLUSTER_SIZE,
    DEFAULT_TARGET_DIM, DEFAULT_TAU_DIM, DEFAULT_TAU_PERS,
};
use crate::seed::derive_seed;
use crate::tensor::{ActivationTensor, LatentTensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Case2Config {
    pub target_dim: usize,
    pub reduction: Reduction,
    pub min_cluster_size: usize,
    pub tau_dim: f64,
    pub tau_pers: f64,
    pub seed: u64,
}

impl Default for Case2Config {
    fn default() -> Self {
        Self {
            target_dim: DEFAULT_TARGET_DIM,
            reduction: Reduction::Pca,
            min_cluster_size: DEFAULT_MIN_CLUSTER_SIZE,
            tau_dim: DEFAULT_TAU_DIM,
            tau_pers: DEFAULT_TAU_PERS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub label: usize,
    pub size: usize,
    /// `None` when every member is duplicated or all ratios are 1.
    pub id_twonn: Option<f64>,
    pub id_pca: usize,
    pub betti0: usize,
}

/// Per-cluster statistics and their means (NaN when there are no clusters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalStats {
    pub clusters: Vec<ClusterStats>,
    pub avg_id_twonn: f64,
    pub avg_id_pca: f64,
    pub avg_betti0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalStats {
    pub mstw: f64,
    /// Cluster centres in the reduced space, one row per cluster.
    pub centers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudReport {
    pub provenance: Provenance,
    pub labels: ClusterAssignment,
    pub local: LocalStats,
    pub global: GlobalStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case2Report {
    pub target_dim: usize,
    pub resid: CloudReport,
    pub latent: CloudReport,
    /// `(resid cluster, latent cluster)` pairs used for the disparity.
    pub matched: Vec<(usize, usize)>,
    /// `None` with fewer than two matched pairs or coincident centres.
    pub procrustes: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn cluster_stats(
    points: &DMatrix<f64>,
    label: usize,
    members: &[usize],
    cfg: &Case2Config,
) -> Result<ClusterStats, GeoError> {
    let sub = select_rows(points, members);
    let id_twonn = match twonn_id(&sub) {
        Ok(v) => Some(v),
        Err(GeoError::AllDuplicates | GeoError::DegenerateConfiguration(_) | GeoError::TooFewPoints { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(ClusterStats {
        label,
        size: members.len(),
        id_twonn,
        id_pca: pca_id(&sub, cfg.tau_dim)?,
        betti0: betti0(&sub, cfg.tau_pers),
    })
}

fn analyse(
    raw: DMatrix<f64>,
    provenance: Provenance,
    target_dim: usize,
    cfg: &Case2Config,
) -> Result<(CloudReport, DMatrix<f64>), GeoError> {
    let cloud = standardize(&PointCloud::new(raw, provenance)?)?;
    let tag = match provenance {
        Provenance::Residual => "resid",
        Provenance::Latent => "latent",
    };
    let seed = derive_seed(cfg.seed, &["case2".into(), tag.into()]);
    let reduced = reduce(&cloud, target_dim, cfg.reduction, seed)?.into_points();
    let labels = hdbscan(&reduced, cfg.min_cluster_size);
    let members = labels.members();
    let per: Vec<Result<ClusterStats, GeoError>> =
        crate::par::map_range(members.len(), |k| cluster_stats(&reduced, k, &members[k], cfg));
    let clusters = per.into_iter().collect::<Result<Vec<_>, _>>()?;
    let centers = centroids(&reduced, &labels);
    let local = LocalStats {
        avg_id_twonn: mean(clusters.iter().filter_map(|c| c.id_twonn)),
        avg_id_pca: mean(clusters.iter().map(|c| c.id_pca as f64)),
        avg_betti0: mean(clusters.iter().map(|c| c.betti0 as f64)),
        clusters,
    };
    let global = GlobalStats {
        mstw: mst_weight(&centers),
        centers: centers.row_iter().map(|r| r.iter().copied().collect()).collect(),
    };
    Ok((CloudReport { provenance, labels, local, global }, centers))
}

/// Full structure analysis of the masked tokens of a residual tensor and
/// its latent tensor.
///
/// Both clouds are standardised and reduced to a common dimension
/// `min(target_dim, d_resid, d_latent, N − 1)` (`N − 2` for the neighbour
/// embedding) so their centre sets can be aligned; centres are matched
/// greedily before the Procrustes disparity is taken.
pub fn case2_report(
    resid: &ActivationTensor,
    latent: &LatentTensor,
    cfg: &Case2Config,
) -> Result<Case2Report, GeoError> {
    if resid.mask() != latent.mask() {
        return Err(GeoError::InvalidParameter("residual and latent tensors must share one mask".into()));
    }
    let n = resid.n_masked();
    let slack = match cfg.reduction {
        Reduction::Pca => 1,
        Reduction::Neighbor => 2,
    };
    let target_dim = cfg.target_dim.min(resid.d_model()).min(latent.d_sae()).min(n.saturating_sub(slack));
    if target_dim == 0 {
        return Err(GeoError::TooFewPoints { needed: slack + 1, got: n });
    }
    let (r, l) = crate::par::join(
        || analyse(resid.masked_rows(), Provenance::Residual, target_dim, cfg),
        || analyse(latent.masked_rows(), Provenance::Latent, target_dim, cfg),
    );
    let ((resid, rc), (latent, lc)) = (r?, l?);
    let matched = match_centroids(&rc, &lc)?;
    let procrustes = if matched.len() >= 2 {
        let a = select_rows(&rc, &matched.iter().map(|m| m.0).collect::<Vec<_>>());
        let b = select_rows(&lc, &matched.iter().map(|m| m.1).collect::<Vec<_>>());
        match procrustes_disparity(&a, &b) {
            Ok(v) => Some(v),
            Err(GeoError::DegenerateConfiguration(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(Case2Report { target_dim, resid, latent, matched, procrustes })
}
