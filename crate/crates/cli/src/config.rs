//! Run configuration: one JSON document, parsed strictly and validated
//! before any work starts.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stratgeo::geostruct::{Reduction, DEFAULT_MIN_CLUSTER_SIZE, DEFAULT_TARGET_DIM, DEFAULT_TAU_DIM, DEFAULT_TAU_PERS};
use stratgeo::intervene::{GwOptions, LossKind, DEFAULT_ALPHAS};
use stratgeo::saecore::Nonlinearity;
use stratgeo::strata::Case1Config;

use crate::CliError;

/// Noise levels swept by case 1 when the config gives none.
pub const DEFAULT_NOISE_LEVELS: [f64; 10] = [0.0, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0];

/// One `(model, concept)` input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub model: String,
    pub concept: String,
    /// Bundle path; relative paths are resolved against the config file.
    pub bundle: PathBuf,
    #[serde(default = "default_resid_key")]
    pub resid_key: String,
    #[serde(default = "default_mask_key")]
    pub mask_key: String,
    /// Overrides the bundle's `nonlinearity` metadata.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonlinearity: Option<Nonlinearity>,
}

fn default_resid_key() -> String {
    "resid".into()
}

fn default_mask_key() -> String {
    "mask".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub levels: Vec<f64>,
    pub top_k: usize,
    pub hi_scale: f64,
    pub lo_scale: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { levels: DEFAULT_NOISE_LEVELS.to_vec(), top_k: 100, hi_scale: 2.0, lo_scale: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Case2Settings {
    pub target_dim: usize,
    pub reduction: Reduction,
    pub min_cluster_size: usize,
    pub tau_dim: f64,
    pub tau_pers: f64,
}

impl Default for Case2Settings {
    fn default() -> Self {
        Self {
            target_dim: DEFAULT_TARGET_DIM,
            reduction: Reduction::Pca,
            min_cluster_size: DEFAULT_MIN_CLUSTER_SIZE,
            tau_dim: DEFAULT_TAU_DIM,
            tau_pers: DEFAULT_TAU_PERS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Case3Settings {
    pub alphas: Vec<f64>,
    pub loss_kinds: Vec<LossKind>,
    pub iterations: usize,
    pub lambda_mse: f64,
    pub subsample: usize,
    pub gw: GwOptions,
}

impl Default for Case3Settings {
    fn default() -> Self {
        Self {
            alphas: DEFAULT_ALPHAS.to_vec(),
            loss_kinds: vec![LossKind::Gw, LossKind::InvAedp],
            iterations: 10,
            lambda_mse: 1.0,
            subsample: 256,
            gw: GwOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub datasets: Vec<Dataset>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub case1: Case1Config,
    #[serde(default)]
    pub case2: Case2Settings,
    #[serde(default)]
    pub case3: Case3Settings,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    /// Parses `path` and resolves relative bundle and output paths against
    /// its directory. Does not validate.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for d in &mut cfg.datasets {
            if d.bundle.is_relative() {
                d.bundle = base.join(&d.bundle);
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.datasets.is_empty() {
            return Err(config_err("at least one dataset is required"));
        }
        let mut seen = HashSet::new();
        for d in &self.datasets {
            for (what, name) in [("model", &d.model), ("concept", &d.concept)] {
                let ok = !name.is_empty()
                    && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
                    && !name.starts_with('.');
                if !ok {
                    return Err(config_err(format!("{what} name {name:?} must be non-empty [A-Za-z0-9._-]")));
                }
            }
            if !seen.insert((&d.model, &d.concept)) {
                return Err(config_err(format!("duplicate dataset {}/{}", d.model, d.concept)));
            }
            if !d.bundle.is_file() {
                return Err(config_err(format!("bundle {} does not exist", d.bundle.display())));
            }
        }

        let n = &self.noise;
        if n.levels.is_empty() || n.levels.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(config_err("noise levels must be a non-empty list of finite values >= 0"));
        }
        if n.top_k == 0 {
            return Err(config_err("noise.top_k must be positive"));
        }
        if ![n.hi_scale, n.lo_scale].iter().all(|s| s.is_finite() && *s >= 0.0) {
            return Err(config_err("noise scales must be finite and >= 0"));
        }

        let c1 = &self.case1;
        if c1.feature_cap == 0 || !(c1.epsilon > 0.0) || !c1.epsilon.is_finite() {
            return Err(config_err("case1 needs feature_cap >= 1 and a finite epsilon > 0"));
        }

        let c2 = &self.case2;
        if c2.target_dim == 0 || c2.min_cluster_size < 2 {
            return Err(config_err("case2 needs target_dim >= 1 and min_cluster_size >= 2"));
        }
        if !(c2.tau_dim > 0.0 && c2.tau_dim < 1.0) || !(c2.tau_pers >= 0.0) || !c2.tau_pers.is_finite() {
            return Err(config_err("case2 needs tau_dim in (0, 1) and a finite tau_pers >= 0"));
        }

        let c3 = &self.case3;
        if c3.alphas.is_empty() || c3.alphas.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(config_err("case3 alphas must be a non-empty list of finite values > 0"));
        }
        if c3.loss_kinds.is_empty() {
            return Err(config_err("case3 needs at least one loss kind"));
        }
        if c3.iterations == 0 || c3.subsample < 2 {
            return Err(config_err("case3 needs iterations >= 1 and subsample >= 2"));
        }
        if !c3.lambda_mse.is_finite() || c3.lambda_mse < 0.0 {
            return Err(config_err("case3 lambda_mse must be finite and >= 0"));
        }
        if c3.gw.max_iter == 0 || !(c3.gw.tol >= 0.0) || !(c3.gw.entropic_reg > 0.0) {
            return Err(config_err("case3 gw options out of range"));
        }
        Ok(())
    }
}

/// Reads `relu`, `identity`, `topk:<k>` or `jumprelu:<theta>`.
pub fn parse_nonlinearity(s: &str) -> Result<Nonlinearity, CliError> {
    let s = s.trim().to_ascii_lowercase();
    let (name, arg) = match s.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (s.as_str(), None),
    };
    let bad = || config_err(format!("unknown nonlinearity {s:?}"));
    match (name, arg) {
        ("relu", None) => Ok(Nonlinearity::Relu),
        ("identity", None) => Ok(Nonlinearity::Identity),
        ("topk", Some(k)) => Ok(Nonlinearity::TopK { k: k.parse().map_err(|_| bad())? }),
        ("jumprelu", Some(t)) => Ok(Nonlinearity::JumpRelu { theta: t.parse().map_err(|_| bad())? }),
        _ => Err(bad()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn defaults_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "x.bundle", "");
        let p = write(dir.path(), "c.json", r#"{"datasets":[{"model":"m","concept":"c","bundle":"x.bundle"}]}"#);
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.datasets[0].bundle, dir.path().join("x.bundle"));
        assert_eq!(cfg.out_dir, dir.path().join("out"));
        assert_eq!(cfg.noise.levels, DEFAULT_NOISE_LEVELS);
        assert_eq!(cfg.case3.alphas, DEFAULT_ALPHAS);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "x.bundle", "");
        let ds = r#""datasets":[{"model":"m","concept":"c","bundle":"x.bundle"}]"#;
        let p = write(dir.path(), "a.json", &format!("{{{ds},\"sede\":1}}"));
        assert!(matches!(RunConfig::load(&p), Err(CliError::Config(_))));
        for extra in [
            r#""noise":{"levels":[-1]}"#,
            r#""case3":{"alphas":[0]}"#,
            r#""case2":{"min_cluster_size":1}"#,
            r#""case3":{"loss_kinds":[]}"#,
        ] {
            let p = write(dir.path(), "b.json", &format!("{{{ds},{extra}}}"));
            let cfg = RunConfig::load(&p).unwrap();
            assert!(matches!(cfg.validate(), Err(CliError::Config(_))), "{extra}");
        }
        let p = write(dir.path(), "c.json", r#"{"datasets":[{"model":"a/b","concept":"c","bundle":"x.bundle"}]}"#);
        assert!(RunConfig::load(&p).unwrap().validate().is_err());
        let p = write(dir.path(), "d.json", r#"{"datasets":[{"model":"m","concept":"c","bundle":"nope"}]}"#);
        assert!(RunConfig::load(&p).unwrap().validate().is_err());
    }

    #[test]
    fn nonlinearity_names() {
        assert_eq!(parse_nonlinearity("ReLU").unwrap(), Nonlinearity::Relu);
        assert_eq!(parse_nonlinearity("topk:32").unwrap(), Nonlinearity::TopK { k: 32 });
        assert_eq!(parse_nonlinearity("jumprelu:0.5").unwrap(), Nonlinearity::JumpRelu { theta: 0.5 });
        assert!(parse_nonlinearity("gelu").is_err());
        assert!(parse_nonlinearity("topk:x").is_err());
    }
}
