//! Experiment configuration files.
//!
//! One experiment per TOML file. Every section other than `[model]` has
//! defaults; unknown keys are rejected so typos surface as errors.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use gac_core::bounds::NRule;
use gac_core::moments::{ConstraintSet, SignalConstraint, ThetaConstraint};
use gac_core::{cyclic_shift_group, FiniteGroup, GroupDistribution, Projection, Signal};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    Moments,
    Cutoff,
    DivergenceSweep,
    BoundSweep,
    MleSweep,
    Verify,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Moments => "moments",
            Self::Cutoff => "cutoff",
            Self::DivergenceSweep => "divergence-sweep",
            Self::BoundSweep => "bound-sweep",
            Self::MleSweep => "mle-sweep",
            Self::Verify => "verify",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GroupSpec {
    /// Cyclic shifts of the signal coordinates; `L` defaults to the signal
    /// length.
    Cyclic {
        #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
        len: Option<usize>,
    },
    /// Orthogonal matrices given row by row.
    Explicit { matrices: Vec<Vec<Vec<f64>>> },
}

impl Default for GroupSpec {
    fn default() -> Self {
        Self::Cyclic { len: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ThetaSpec {
    #[default]
    Uniform,
    PointMass {
        index: usize,
    },
    Weights {
        weights: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProjectionSpec {
    #[default]
    Identity,
    /// Zero-based coordinates kept in order.
    Select {
        coords: Vec<usize>,
    },
    General {
        matrix: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub signal: Vec<f64>,
    #[serde(default)]
    pub group: GroupSpec,
    #[serde(default)]
    pub theta: ThetaSpec,
    #[serde(default)]
    pub projection: ProjectionSpec,
    /// Noise levels swept by the experiment.
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NRuleSpec {
    Explicit { values: Vec<u64> },
    /// `N = round(c σ^{2m})`.
    Power { c: f64, m: u32 },
}

/// An alternative model sharing the group and projection of `[model]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AltSpec {
    pub signal: Vec<f64>,
    #[serde(default)]
    pub theta: ThetaSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodSpec {
    Quadrature,
    MonteCarlo,
    LeadingOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaModeSpec {
    KnownFixed,
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaKnowledge {
    Known,
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateOptions {
    pub replicates: u64,
    /// Directory receiving one binary batch file per noise level and
    /// replicate, named `sigma{i}_rep{r}.gacb`.
    pub binary_dir: Option<PathBuf>,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            replicates: 1,
            binary_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentsOptions {
    pub orders: Vec<usize>,
    /// Also estimate moments from simulated data at every grid point.
    pub empirical: bool,
    pub debias: bool,
}

impl Default for MomentsOptions {
    fn default() -> Self {
        Self {
            orders: vec![1, 2, 3],
            empirical: false,
            debias: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CutoffOptions {
    pub max_order: usize,
    pub restarts: usize,
    pub match_tol: f64,
    pub orbit_floor: f64,
    /// Coordinate known to be zero.
    pub zero_at: Option<usize>,
    pub theta: ThetaKnowledge,
}

impl Default for CutoffOptions {
    fn default() -> Self {
        Self {
            max_order: 4,
            restarts: 64,
            match_tol: 1e-9,
            orbit_floor: 1e-3,
            zero_at: None,
            theta: ThetaKnowledge::Known,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivergenceOptions {
    pub alternative: Option<AltSpec>,
    pub methods: Vec<MethodSpec>,
    pub budget: usize,
    /// Also report the KL divergence.
    pub kl: bool,
}

impl Default for DivergenceOptions {
    fn default() -> Self {
        Self {
            alternative: None,
            methods: vec![MethodSpec::Quadrature, MethodSpec::LeadingOrder],
            budget: 100_000,
            kl: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundOptions {
    pub witnesses: Vec<AltSpec>,
    /// How the single-sample χ² is obtained.
    pub mode: MethodSpec,
    pub budget: usize,
}

impl Default for BoundOptions {
    fn default() -> Self {
        Self {
            witnesses: Vec::new(),
            mode: MethodSpec::LeadingOrder,
            budget: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MleSpec {
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub theta_mode: ThetaModeSpec,
    pub init_scale: f64,
    pub replicates: u64,
    /// Fit this stored batch (binary, or CSV when the extension is `.csv`)
    /// instead of simulating; needs a single noise level.
    pub batch: Option<PathBuf>,
}

impl Default for MleSpec {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_iters: 500,
            tol: 1e-9,
            theta_mode: ThetaModeSpec::KnownFixed,
            init_scale: 1.0,
            replicates: 10,
            batch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyOptions {
    /// Example 1 signal is `(0, b, c)`.
    pub example1_b: f64,
    pub example1_c: f64,
    /// Example 2 signal is `(a, b)`.
    pub example2_a: f64,
    pub example2_b: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            example1_b: 1.0,
            example1_c: 2.0,
            example2_a: 1.0,
            example2_b: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional; must agree with the subcommand when given.
    #[serde(default)]
    pub experiment: Option<ExperimentKind>,
    #[serde(default)]
    pub seed: u64,
    /// Excluded from the digest.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub n_rule: Option<NRuleSpec>,
    #[serde(default)]
    pub simulate: SimulateOptions,
    #[serde(default)]
    pub moments: MomentsOptions,
    #[serde(default)]
    pub cutoff: CutoffOptions,
    #[serde(default)]
    pub divergence: DivergenceOptions,
    #[serde(default)]
    pub bound: BoundOptions,
    #[serde(default)]
    pub mle: MleSpec,
    #[serde(default)]
    pub verify: VerifyOptions,
}

/// The `[model]` section turned into toolkit objects.
#[derive(Debug, Clone)]
pub struct Model {
    pub x: Signal,
    pub theta: GroupDistribution,
    pub projection: Projection,
    pub sigmas: Vec<f64>,
}

impl Model {
    pub fn group(&self) -> &Arc<FiniteGroup> {
        self.theta.group()
    }

    pub fn alternative(&self, alt: &AltSpec, path: &str) -> Result<(Signal, GroupDistribution), ConfigError> {
        if alt.signal.len() != self.x.len() {
            return Err(invalid(
                &format!("{path}.signal"),
                format!("length {} does not match the model signal length {}", alt.signal.len(), self.x.len()),
            ));
        }
        let theta = build_theta(&alt.theta, self.group(), &format!("{path}.theta"))?;
        Ok((DVector::from_row_slice(&alt.signal), theta))
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], path: &str) -> Result<DMatrix<f64>, ConfigError> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(invalid(path, "matrix rows must be nonempty and of equal length"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn build_theta(spec: &ThetaSpec, group: &Arc<FiniteGroup>, path: &str) -> Result<GroupDistribution, ConfigError> {
    let err = |e: gac_core::Error| invalid(path, e.to_string());
    match spec {
        ThetaSpec::Uniform => Ok(GroupDistribution::uniform(group.clone())),
        ThetaSpec::PointMass { index } => GroupDistribution::point_mass(group.clone(), *index).map_err(err),
        ThetaSpec::Weights { weights } => GroupDistribution::new(group.clone(), weights.clone()).map_err(err),
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<Model, ConfigError> {
        let len = self.signal.len();
        if len == 0 {
            return Err(invalid("model.signal", "signal must be nonempty"));
        }
        if self.sigma.is_empty() {
            return Err(invalid("model.sigma", "sigma grid must be nonempty"));
        }
        if let Some(s) = self.sigma.iter().find(|s| **s <= 0.0 || !s.is_finite()) {
            return Err(invalid("model.sigma", format!("noise levels must be positive and finite, got {s}")));
        }
        let group = match &self.group {
            GroupSpec::Cyclic { len: l } => {
                let l = l.unwrap_or(len);
                if l != len {
                    return Err(invalid("model.group.L", format!("L = {l} but the signal has length {len}")));
                }
                cyclic_shift_group(l).map_err(|e| invalid("model.group", e.to_string()))?
            }
            GroupSpec::Explicit { matrices } => {
                let mats = matrices
                    .iter()
                    .enumerate()
                    .map(|(i, m)| rows_to_matrix(m, &format!("model.group.matrices[{i}]")))
                    .collect::<Result<Vec<_>, _>>()?;
                FiniteGroup::from_matrices(mats).map_err(|e| invalid("model.group.matrices", e.to_string()))?
            }
        };
        if group.dim() != len {
            return Err(invalid(
                "model.group",
                format!("group acts on dimension {} but the signal has length {len}", group.dim()),
            ));
        }
        let group = Arc::new(group);
        let theta = build_theta(&self.theta, &group, "model.theta")?;
        let projection = match &self.projection {
            ProjectionSpec::Identity => Projection::identity(len),
            ProjectionSpec::Select { coords } => {
                Projection::select(len, coords).map_err(|e| invalid("model.projection.coords", e.to_string()))?
            }
            ProjectionSpec::General { matrix } => {
                let m = rows_to_matrix(matrix, "model.projection.matrix")?;
                if m.ncols() != len {
                    return Err(invalid(
                        "model.projection.matrix",
                        format!("{} columns for a signal of length {len}", m.ncols()),
                    ));
                }
                Projection::general(m).map_err(|e| invalid("model.projection.matrix", e.to_string()))?
            }
        };
        Ok(Model {
            x: DVector::from_row_slice(&self.signal),
            theta,
            projection,
            sigmas: self.sigma.clone(),
        })
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn model(&self) -> Result<Model, ConfigError> {
        self.model
            .as_ref()
            .ok_or_else(|| invalid("model", "this experiment needs a [model] section"))?
            .build()
    }

    pub fn n_rule(&self) -> Result<NRule, ConfigError> {
        match &self.n_rule {
            None => Err(invalid("n_rule", "this experiment needs an [n_rule] section")),
            Some(NRuleSpec::Explicit { values }) => Ok(NRule::Explicit(values.clone())),
            Some(NRuleSpec::Power { c, m }) => Ok(NRule::Power { c: *c, m: *m }),
        }
    }

    /// Sample sizes along the sigma grid.
    pub fn sample_sizes(&self, sigmas: &[f64]) -> Result<Vec<u64>, ConfigError> {
        self.n_rule()?.samples(sigmas).map_err(|e| invalid("n_rule", e.to_string()))
    }

    pub fn constraints(&self) -> ConstraintSet {
        ConstraintSet {
            signal: match self.cutoff.zero_at {
                Some(i) => SignalConstraint::ZeroAt(i),
                None => SignalConstraint::Free,
            },
            theta: match self.cutoff.theta {
                ThetaKnowledge::Known => ThetaConstraint::Known,
                ThetaKnowledge::Free => ThetaConstraint::Free,
            },
        }
    }

    /// Checks everything the given experiment will need.
    pub fn validate(&self, kind: ExperimentKind) -> Result<(), ConfigError> {
        if let Some(declared) = self.experiment {
            if declared != kind {
                return Err(invalid(
                    "experiment",
                    format!("file declares {} but {} was requested", declared.as_str(), kind.as_str()),
                ));
            }
        }
        if kind == ExperimentKind::Verify {
            return Ok(());
        }
        let model = self.model()?;
        let needs_n = matches!(kind, ExperimentKind::Simulate | ExperimentKind::BoundSweep)
            || (kind == ExperimentKind::MleSweep && self.mle.batch.is_none())
            || (kind == ExperimentKind::Moments && self.moments.empirical);
        if needs_n {
            self.sample_sizes(&model.sigmas)?;
        }
        match kind {
            ExperimentKind::Moments if self.moments.orders.is_empty() || self.moments.orders.contains(&0) => {
                Err(invalid("moments.orders", "orders must be a nonempty list of positive integers"))
            }
            ExperimentKind::DivergenceSweep => {
                let alt = self
                    .divergence
                    .alternative
                    .as_ref()
                    .ok_or_else(|| invalid("divergence.alternative", "an alternative model is required"))?;
                model.alternative(alt, "divergence.alternative")?;
                if self.divergence.methods.is_empty() {
                    return Err(invalid("divergence.methods", "at least one method is required"));
                }
                Ok(())
            }
            ExperimentKind::BoundSweep => {
                if self.bound.witnesses.is_empty() {
                    return Err(invalid("bound.witnesses", "at least one witness is required"));
                }
                for (i, w) in self.bound.witnesses.iter().enumerate() {
                    model.alternative(w, &format!("bound.witnesses[{i}]"))?;
                }
                Ok(())
            }
            ExperimentKind::MleSweep if self.mle.replicates == 0 || self.mle.restarts == 0 => {
                Err(invalid("mle", "replicates and restarts must be positive"))
            }
            ExperimentKind::MleSweep if self.mle.batch.is_some() && model.sigmas.len() != 1 => {
                Err(invalid("mle.batch", "fitting a stored batch needs exactly one noise level in model.sigma"))
            }
            ExperimentKind::Cutoff if self.cutoff.max_order == 0 || self.cutoff.restarts == 0 => {
                Err(invalid("cutoff", "max_order and restarts must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Hex SHA-256 prefix of every semantic field; the output path is
    /// excluded.
    pub fn digest(&self) -> String {
        let mut semantic = self.clone();
        semantic.output = None;
        let canonical = serde_json::to_string(&semantic).expect("config serializes");
        hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 5
[model]
signal = [0.0, 1.0, 2.0]
sigma = [2.0, 4.0]
projection = { kind = "select", coords = [0, 1] }
[n_rule]
kind = "power"
c = 1.0
m = 3
"#;

    #[test]
    fn parses_and_builds() {
        let c = ExperimentConfig::from_toml(BASE).unwrap();
        let m = c.model().unwrap();
        assert_eq!(m.group().order(), 3);
        assert_eq!(m.projection.output_dim(), 2);
        assert_eq!(c.sample_sizes(&m.sigmas).unwrap(), vec![64, 4096]);
        c.validate(ExperimentKind::Moments).unwrap();
    }

    #[test]
    fn digest_tracks_semantic_fields_only() {
        let a = ExperimentConfig::from_toml(BASE).unwrap();
        let mut b = a.clone();
        b.output = Some("elsewhere.csv".into());
        assert_eq!(a.digest(), b.digest());
        b.seed = 6;
        assert_ne!(a.digest(), b.digest());
        let mut c = a.clone();
        c.model.as_mut().unwrap().sigma[1] = 4.5;
        assert_ne!(a.digest(), c.digest());
        // spelling out a default does not change the digest
        let d = ExperimentConfig::from_toml(&format!("{BASE}\n[cutoff]\nrestarts = 64\n")).unwrap();
        assert_eq!(a.digest(), d.digest());
    }

    #[test]
    fn errors_name_the_field() {
        let bad = BASE.replace("coords = [0, 1]", "coords = [0, 7]");
        let err = ExperimentConfig::from_toml(&bad).unwrap().model().unwrap_err();
        assert!(err.to_string().starts_with("model.projection.coords:"), "{err}");

        let bad = BASE.replace("sigma = [2.0, 4.0]", "sigma = []");
        let err = ExperimentConfig::from_toml(&bad).unwrap().model().unwrap_err();
        assert!(err.to_string().starts_with("model.sigma:"));

        let err = ExperimentConfig::from_toml(&format!("{BASE}\n[mle]\nrestart = 3\n")).unwrap_err();
        assert!(err.to_string().contains("restart"), "{err}");

        let c = ExperimentConfig::from_toml(BASE).unwrap();
        let err = c.validate(ExperimentKind::BoundSweep).unwrap_err();
        assert!(err.to_string().starts_with("bound.witnesses:"));

        let c = ExperimentConfig::from_toml(&format!("experiment = \"cutoff\"\n{BASE}")).unwrap();
        assert!(c.validate(ExperimentKind::Moments).is_err());
        c.validate(ExperimentKind::Cutoff).unwrap();
    }

    #[test]
    fn explicit_group() {
        let text = r#"
[model]
signal = [1.0, 2.0]
sigma = [1.0]
group = { kind = "explicit", matrices = [[[1.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [1.0, 0.0]]] }
theta = { kind = "weights", weights = [0.25, 0.75] }
"#;
        let m = ExperimentConfig::from_toml(text).unwrap().model().unwrap();
        assert_eq!(m.theta.weights(), &[0.25, 0.75]);
        let bad = text.replace("[0.0, 1.0], [1.0, 0.0]", "[0.0, 2.0], [1.0, 0.0]");
        let err = ExperimentConfig::from_toml(&bad).unwrap().model().unwrap_err();
        assert!(err.to_string().starts_with("model.group.matrices:"));
    }

    #[test]
    fn cyclic_group_by_name_and_length() {
        let text = BASE.replace("[model]\n", "[model]\ngroup = { kind = \"cyclic\", L = 3 }\n");
        let m = ExperimentConfig::from_toml(&text).unwrap().model().unwrap();
        assert_eq!(m.group().order(), 3);
        let wrong = text.replace("L = 3", "L = 4");
        let err = ExperimentConfig::from_toml(&wrong).unwrap().model().unwrap_err();
        assert!(err.to_string().starts_with("model.group.L:"));
    }
}
