//! Pipeline configuration: a TOML file with one table per stage, validated
//! up front, plus the content hashes that tie artifacts to the settings that
//! produced them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decomposition::TrainConfig;
use crate::dynamics::{BoxDomain, ResonatorParams, SamplingPlan, System};
use crate::neuralnet::AdamConfig;
use crate::quasipotential::Projection;
use crate::rng::sub_seed;
use crate::sparse::Sr3Config;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemName {
    Archetypal,
    Resonator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub name: SystemName,
    /// Resonator parameters; defaults apply to omitted keys.
    #[serde(default)]
    pub resonator: Option<ResonatorParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    /// Per-axis `[lo, hi]` bounds of Ω.
    pub domain: Vec<[f64; 2]>,
    pub trajectories: usize,
    pub snapshots: usize,
    pub h: f64,
    pub stride: f64,
    /// RK4 step; `h / 5` when omitted.
    #[serde(default)]
    pub integrator_step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub v_hidden: Vec<usize>,
    pub g_hidden: Vec<usize>,
}

fn default_delta() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub lambda_orth: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub batch_size: usize,
    /// Representative points per step in the orthogonality term.
    pub orth_batch: usize,
    pub steps: u64,
    /// Radius `r` of the representative subset.
    pub subset_radius: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Write a resumable checkpoint every this many steps (0 = only at the end).
    #[serde(default)]
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionInit {
    /// Separate sparse fits of the potential and circulation blocks.
    Decoupled,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionSection {
    /// Regression points satisfy `V_θ(x) < min V_θ + threshold_offset`.
    pub threshold_offset: f64,
    pub v_degree: u32,
    pub g_degree: u32,
    /// Library degree for the field block; the larger of the two above by default.
    #[serde(default)]
    pub library_degree: Option<u32>,
    pub lambda: f64,
    pub nu: f64,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "yes")]
    pub normalize_columns: bool,
    #[serde(default)]
    pub normalize_targets: bool,
    #[serde(default = "yes")]
    pub polish: bool,
    #[serde(default = "default_init")]
    pub init: RegressionInit,
    /// Fit `V_θ − min V_θ` so that the identified potential vanishes at its minimum.
    #[serde(default = "yes")]
    pub shift_potential: bool,
}

fn default_iters() -> usize {
    10_000
}
fn default_tol() -> f64 {
    1e-10
}
fn yes() -> bool {
    true
}
fn default_init() -> RegressionInit {
    RegressionInit::Decoupled
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HoldoutRegion {
    Domain,
    /// The regression sub-level set `{V_θ < τ}`.
    Sublevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    Slice,
    Marginalize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Noise strengths for normalization constants and densities.
    pub eps: Vec<f64>,
    pub holdout_count: usize,
    pub holdout_region: HoldoutRegion,
    /// Quadrature box is Ω scaled by this factor about its center.
    #[serde(default = "default_search")]
    pub search_factor: f64,
    #[serde(default = "default_intervals")]
    pub quadrature_intervals: usize,
    #[serde(default = "default_resolution")]
    pub grid_resolution: usize,
    #[serde(default = "default_projection")]
    pub projection: ProjectionMode,
    /// Starting points per axis for the local-minimum search.
    #[serde(default = "default_starts")]
    pub minima_starts: usize,
    #[serde(default = "default_residual_points")]
    pub residual_points: usize,
}

fn default_search() -> f64 {
    1.0
}
fn default_intervals() -> usize {
    200
}
fn default_resolution() -> usize {
    101
}
fn default_projection() -> ProjectionMode {
    ProjectionMode::Slice
}
fn default_starts() -> usize {
    5
}
fn default_residual_points() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub run: RunSection,
    pub system: SystemSection,
    pub sampling: SamplingSection,
    pub network: NetworkSection,
    pub training: TrainingSection,
    pub regression: RegressionSection,
    pub analysis: AnalysisSection,
}

/// Content hashes of each stage's inputs; every stage folds in its upstream hash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageHashes {
    pub config: String,
    pub sample: String,
    pub train: String,
    /// Like `train` but blind to the step budget and checkpoint cadence, so a
    /// checkpoint can seed a longer run of the same training trajectory.
    pub train_run: String,
    pub regress: String,
    pub analyze: String,
}

fn hash_parts(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn json<S: Serialize>(v: &S) -> String {
    serde_json::to_string(v).expect("config sections serialize")
}

fn invalid(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {msg}"))
}

impl PipelineConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        cfg.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", origin.display())),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&crate::io::read_text(path)?, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every section and reports the first offending key.
    pub fn validate(&self) -> Result<()> {
        let s = &self.sampling;
        let d = s.domain.len();
        let dim = match self.system.name {
            SystemName::Archetypal => 3,
            SystemName::Resonator => 2,
        };
        if d != dim {
            return Err(invalid("sampling.domain", format!("{:?} is {dim}-dimensional, got {d} bounds", self.system.name)));
        }
        if self.system.name == SystemName::Archetypal && self.system.resonator.is_some() {
            return Err(invalid("system.resonator", "only valid for the resonator"));
        }
        self.sampling_plan().validate().map_err(|e| invalid("sampling", e))?;
        let n = &self.network;
        for (key, widths) in [("network.v_hidden", &n.v_hidden), ("network.g_hidden", &n.g_hidden)] {
            if widths.is_empty() || widths.contains(&0) {
                return Err(invalid(key, "needs at least one hidden layer of positive width"));
            }
        }
        let t = &self.training;
        self.train_config().validate().map_err(|e| invalid("training", e))?;
        if t.orth_batch == 0 {
            return Err(invalid("training.orth_batch", "must be positive"));
        }
        if !(t.subset_radius > 0.0 && t.subset_radius.is_finite()) {
            return Err(invalid("training.subset_radius", format!("must be positive, got {}", t.subset_radius)));
        }
        let a = &t.adam;
        if !(a.lr0 > 0.0 && a.gamma > 0.0 && a.gamma <= 1.0 && a.decay_steps > 0.0) {
            return Err(invalid("training.adam", "needs lr0 > 0, 0 < gamma <= 1, decay_steps > 0"));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(invalid("training.adam", "needs beta1, beta2 in [0, 1) and eps > 0"));
        }
        let r = &self.regression;
        if !(r.threshold_offset > 0.0 && r.threshold_offset.is_finite()) {
            return Err(invalid("regression.threshold_offset", format!("must be positive, got {}", r.threshold_offset)));
        }
        let top = self.library_degree();
        if r.v_degree > top || r.g_degree > top {
            return Err(invalid("regression.library_degree", format!("{top} is below v_degree {} or g_degree {}", r.v_degree, r.g_degree)));
        }
        if r.v_degree == 0 || top > 12 {
            return Err(invalid("regression", "degrees must satisfy 1 <= v_degree and library_degree <= 12"));
        }
        self.sr3_config().validate().map_err(|e| invalid("regression", e))?;
        let an = &self.analysis;
        if an.eps.is_empty() || an.eps.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(invalid("analysis.eps", "needs at least one positive noise strength"));
        }
        if !(an.search_factor >= 1.0 && an.search_factor.is_finite()) {
            return Err(invalid("analysis.search_factor", "must be >= 1"));
        }
        if an.quadrature_intervals < 4 || !an.quadrature_intervals.is_multiple_of(4) {
            return Err(invalid("analysis.quadrature_intervals", "must be a positive multiple of 4"));
        }
        if an.grid_resolution < 3 || an.minima_starts == 0 {
            return Err(invalid("analysis", "grid_resolution must be >= 3 and minima_starts >= 1"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.sampling.domain.len()
    }

    pub fn system(&self) -> System<f64> {
        match self.system.name {
            SystemName::Archetypal => System::Archetypal,
            SystemName::Resonator => System::resonator(self.system.resonator.unwrap_or_default()),
        }
    }

    pub fn domain(&self) -> BoxDomain {
        BoxDomain { bounds: self.sampling.domain.clone() }
    }

    pub fn sampling_plan(&self) -> SamplingPlan {
        let s = &self.sampling;
        let mut plan = SamplingPlan::new(self.domain(), s.trajectories, s.snapshots, s.h, s.stride, self.seed_for("sample"));
        if let Some(dt) = s.integrator_step {
            plan.integrator_step = dt;
        }
        plan
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            lambda_orth: t.lambda_orth,
            delta: t.delta,
            h: self.sampling.h,
            batch_size: t.batch_size,
            orth_batch: t.orth_batch,
            steps: t.steps,
            seed: self.seed_for("train"),
            adam: t.adam,
        }
    }

    pub fn library_degree(&self) -> u32 {
        let r = &self.regression;
        r.library_degree.unwrap_or(r.v_degree.max(r.g_degree))
    }

    pub fn sr3_config(&self) -> Sr3Config {
        let r = &self.regression;
        Sr3Config {
            lambda: r.lambda,
            nu: r.nu,
            max_iters: r.max_iters,
            tol: r.tol,
            normalize_columns: r.normalize_columns,
            normalize_targets: r.normalize_targets,
            polish: r.polish,
            free_columns: (0..self.dim()).collect(),
            sparsity_mask: None,
        }
    }

    pub fn projection(&self) -> Projection {
        match self.analysis.projection {
            ProjectionMode::Slice => Projection::default(),
            ProjectionMode::Marginalize => Projection::Marginalize,
        }
    }

    /// Labeled sub-seed of the global seed (`"sample"`, `"init"`, `"train"`, ...).
    pub fn seed_for(&self, label: &str) -> u64 {
        sub_seed(self.run.seed, label)
    }

    pub fn hashes(&self) -> StageHashes {
        let seed = self.run.seed.to_string();
        let sample = hash_parts(&["sample", &seed, &json(&self.system), &json(&self.sampling)]);
        let train = hash_parts(&["train", &sample, &json(&self.network), &json(&self.training)]);
        let mut run = self.training.clone();
        run.steps = 0;
        run.checkpoint_every = 0;
        let train_run = hash_parts(&["train-run", &sample, &json(&self.network), &json(&run)]);
        let regress = hash_parts(&["regress", &train, &json(&self.regression)]);
        let analyze = hash_parts(&["analyze", &regress, &json(&self.analysis)]);
        let mut whole = self.clone();
        whole.run.out = None;
        StageHashes {
            config: hash_parts(&["config", &json(&whole)]),
            sample,
            train,
            train_run,
            regress,
            analyze,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
[run]
seed = 7

[system]
name = "archetypal"

[sampling]
domain = [[-2.0, 2.0], [-1.5, 1.5], [-1.5, 1.5]]
trajectories = 10
snapshots = 5
h = 0.01
stride = 0.1

[network]
v_hidden = [8, 8]
g_hidden = [8, 8]

[training]
lambda_orth = 10.0
batch_size = 20
orth_batch = 10
steps = 5
subset_radius = 0.1

[regression]
threshold_offset = 2.0
v_degree = 4
g_degree = 3
lambda = 0.1
nu = 1e-5

[analysis]
eps = [0.1]
holdout_count = 3
holdout_region = "domain"
"#;

    fn small() -> PipelineConfig {
        PipelineConfig::from_toml(SMALL, Path::new("small.cfg")).unwrap()
    }

    #[test]
    fn parses_with_defaults() {
        let c = small();
        assert_eq!(c.training.delta, 0.1);
        assert_eq!(c.training.adam, AdamConfig::default());
        assert_eq!(c.library_degree(), 4);
        assert_eq!(c.sampling_plan().integrator_step, 0.002);
        assert_eq!(c.sr3_config().free_columns, vec![0, 1, 2]);
        let back = PipelineConfig::from_toml(&c.to_toml(), Path::new("echo")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors_name_the_key() {
        let bad = SMALL.replace("steps = 5", "steps = 5\nstep = 3");
        let e = PipelineConfig::from_toml(&bad, Path::new("a.cfg")).unwrap_err().to_string();
        assert!(e.contains("a.cfg") && e.contains("step"), "{e}");
        let bad = SMALL.replace("domain = [[-2.0, 2.0], [-1.5, 1.5], [-1.5, 1.5]]", "domain = [[-2.0, 2.0]]");
        let e = PipelineConfig::from_toml(&bad, Path::new("a.cfg")).unwrap_err().to_string();
        assert!(e.contains("sampling.domain"), "{e}");
        let bad = SMALL.replace("eps = [0.1]", "eps = [-0.1]");
        assert!(PipelineConfig::from_toml(&bad, Path::new("a.cfg")).unwrap_err().to_string().contains("analysis.eps"));
        let bad = SMALL.replace("v_degree = 4", "v_degree = 4\nlibrary_degree = 3");
        assert!(matches!(PipelineConfig::from_toml(&bad, Path::new("a.cfg")), Err(Error::Config(_))));
        let bad = SMALL.replace("h = 0.01", "h = \"x\"");
        let e = PipelineConfig::from_toml(&bad, Path::new("a.cfg")).unwrap_err().to_string();
        assert!(e.contains("line"), "{e}");
    }

    #[test]
    fn hashes_follow_the_stage_chain() {
        let a = small();
        let ha = a.hashes();
        let mut b = a.clone();
        b.analysis.eps = vec![0.2];
        let hb = b.hashes();
        assert_eq!((ha.sample.clone(), ha.train.clone(), ha.regress.clone()), (hb.sample, hb.train, hb.regress));
        assert_ne!(ha.analyze, hb.analyze);
        let mut c = a.clone();
        c.run.seed = 8;
        let hc = c.hashes();
        assert_ne!(ha.sample, hc.sample);
        assert_ne!(ha.analyze, hc.analyze);
        let mut d = a.clone();
        d.run.out = Some("elsewhere".into());
        assert_eq!(d.hashes(), ha);
        assert_eq!(ha.config.len(), 64);
        let mut e = a.clone();
        e.training.steps = 50;
        let he = e.hashes();
        assert_ne!(ha.train, he.train);
        assert_eq!(ha.train_run, he.train_run);
    }

    #[test]
    fn presets_load() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
        let mut seen = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            let cfg = PipelineConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            if cfg.system.name == SystemName::Resonator {
                assert!(cfg.regression.normalize_targets && cfg.training.adam.eps < 1e-12);
            }
            seen += 1;
        }
        assert_eq!(seen, 4);
    }
}
