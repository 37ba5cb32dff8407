//! The end-to-end pipeline: demonstration collection, splits, policy
//! training, masks-once rollouts, evaluation, and the ablation suites.

mod ablate;
mod data;
mod rollout;
mod training;

pub use ablate::{ablate, AblateBudget, AblationReport, ArmResult, Suite, ABLATION_NOISE};
pub use data::{collect_demos, dataset_hash, make_splits, record_episode, SplitAssignment};
pub use rollout::{evaluate, rollout, EvalRequest, EvalReport, EvalRow, EvalSummary, RolloutResult};
pub use training::{
    build_grounder_dataset, evaluate_grounder, grounder_eval_set, load_episodes, train_policy,
    LoadedEpisode, MaskProvider, TrainedPolicy,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon;
use crate::catalog::{CatalogConfig, CatalogError};
use crate::grounder::{GrounderConfig, GrounderError, NoiseConfig};
use crate::instr::{InstrError, InstructionKind};
use crate::policy::{PolicyConfig, PolicyError};
use crate::store::StoreError;
use crate::world::{SceneConfig, WorldConfig, WorldError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{kind} episode generation exhausted {attempts} retries; last failing stage: {stage}")]
    RetryExhausted {
        kind: String,
        stage: String,
        attempts: usize,
    },
    #[error("dataset has no episodes")]
    EmptyDataset,
    #[error("split: {0}")]
    BadSplit(String),
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
    #[error("config: {0}")]
    BadConfig(String),
    #[error("manifest: {0}")]
    BadManifest(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Instr(#[from] InstrError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Grounder(#[from] GrounderError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    /// Stable machine-readable tag for this error, suitable for tooling
    /// that matches on failures without parsing messages.
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::RetryExhausted { .. } => "retry-exhausted",
            PipelineError::EmptyDataset => "empty-dataset",
            PipelineError::BadSplit(_) => "bad-split",
            PipelineError::MissingCheckpoint(_) => "missing-checkpoint",
            PipelineError::BadConfig(_) => "bad-config",
            PipelineError::BadManifest(_) => "bad-manifest",
            PipelineError::World(_) => "world",
            PipelineError::Instr(_) => "instruction",
            PipelineError::Catalog(_) => "catalog",
            PipelineError::Grounder(_) => "grounder",
            PipelineError::Policy(_) => "policy",
            PipelineError::Store(e) => e.code(),
            PipelineError::Io(_) => "io",
            PipelineError::Json(_) => "json",
        }
    }
}

/// Which object pool an episode or evaluation draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    Seen,
    UnseenInstance,
    UnseenClass,
}

impl SplitTag {
    pub const ALL: [SplitTag; 3] = [SplitTag::Seen, SplitTag::UnseenInstance, SplitTag::UnseenClass];

    pub fn name(&self) -> &'static str {
        match self {
            SplitTag::Seen => "seen",
            SplitTag::UnseenInstance => "unseen-instance",
            SplitTag::UnseenClass => "unseen-class",
        }
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        SplitTag::ALL
            .into_iter()
            .find(|t| t.name() == text)
            .ok_or_else(|| {
                let names: Vec<&str> = SplitTag::ALL.iter().map(|t| t.name()).collect();
                PipelineError::BadConfig(format!(
                    "split {text:?}; want one of {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeMeta {
    /// Episode file name, relative to the manifest's directory.
    pub path: String,
    /// Instruction category tag.
    pub category: String,
    pub split: SplitTag,
}

/// Index of a collected dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub master_seed: u64,
    pub catalog_hash: String,
    pub episodes: Vec<EpisodeMeta>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    /// Hash of the manifest's canonical JSON.  Deterministic collection
    /// makes this a pure function of (catalog, generation config, seed).
    pub fn content_hash(&self) -> String {
        canon::canonical_hash(self)
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Check the manifest against its directory: every episode file must
    /// exist, and the catalog hash must match when a catalog is given.
    pub fn validate(&self, dir: &Path, catalog_hash: Option<&str>) -> Result<(), PipelineError> {
        for meta in &self.episodes {
            let p = dir.join(&meta.path);
            if !p.is_file() {
                return Err(PipelineError::BadManifest(format!(
                    "missing episode file {}",
                    p.display()
                )));
            }
        }
        if let Some(h) = catalog_hash {
            if h != self.catalog_hash {
                return Err(PipelineError::BadManifest(format!(
                    "catalog hash {h} does not match manifest's {}",
                    self.catalog_hash
                )));
            }
        }
        Ok(())
    }
}

/// Where rollout and training masks come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MaskSource {
    Oracle,
    Learned { checkpoint: PathBuf },
    Noisy { noise: NoiseConfig },
    None,
}

impl MaskSource {
    /// Parse the compact CLI form: `oracle`, `none`, `learned:PATH`, or
    /// `noisy:{json}` (empty config when the suffix is omitted).
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let (head, rest) = match text.split_once(':') {
            Some((h, r)) => (h, Some(r)),
            None => (text, None),
        };
        match (head, rest) {
            ("oracle", None) => Ok(MaskSource::Oracle),
            ("none", None) => Ok(MaskSource::None),
            ("learned", Some(p)) if !p.is_empty() => Ok(MaskSource::Learned {
                checkpoint: PathBuf::from(p),
            }),
            ("noisy", None) => Ok(MaskSource::Noisy {
                noise: NoiseConfig::default(),
            }),
            ("noisy", Some(json)) => Ok(MaskSource::Noisy {
                noise: serde_json::from_str(json)?,
            }),
            _ => Err(PipelineError::BadConfig(format!(
                "mask source {text:?}; want oracle, none, learned:PATH, or noisy[:json]"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MaskSource::Oracle => "oracle",
            MaskSource::Learned { .. } => "learned",
            MaskSource::Noisy { .. } => "noisy",
            MaskSource::None => "none",
        }
    }
}

/// Held-out fractions for [`make_splits`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Fraction of whole categories held out as unseen-class.
    pub class_fraction: f64,
    /// Per remaining category, fraction of objects held out as
    /// unseen-instance.
    pub instance_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            class_fraction: 0.2,
            instance_fraction: 0.25,
        }
    }
}

/// Demonstration generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Instruction categories to generate.
    pub kinds: Vec<InstructionKind>,
    /// Scene/instruction retries per episode before giving up.
    pub max_retries: usize,
    pub splits: SplitConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            kinds: InstructionKind::ALL.to_vec(),
            max_retries: 50,
            splits: SplitConfig::default(),
        }
    }
}

/// Policy optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine-decay the step size to zero over `steps`.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            learning_rate: 3e-4,
            cosine_decay: true,
        }
    }
}

/// Evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes_per_category: usize,
    pub seeds: Vec<u64>,
    pub split: SplitTag,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes_per_category: 100,
            seeds: vec![1, 2, 3],
            split: SplitTag::Seen,
        }
    }
}

/// The full nested run configuration; unknown keys are rejected at every
/// level.  A serialized snapshot accompanies every artifact directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub scene: SceneConfig,
    pub catalog: CatalogConfig,
    pub gen: GenConfig,
    pub grounder: GrounderConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn content_hash(&self) -> String {
        canon::canonical_hash(self)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.policy
            .validate()
            .map_err(|e| PipelineError::BadConfig(e.to_string()))?;
        if self.policy.image_size != self.world.image_size {
            return Err(PipelineError::BadConfig(format!(
                "policy image size {} != world image size {}",
                self.policy.image_size, self.world.image_size
            )));
        }
        if self.grounder.image_size != self.world.image_size {
            return Err(PipelineError::BadConfig(format!(
                "grounder image size {} != world image size {}",
                self.grounder.image_size, self.world.image_size
            )));
        }
        for (name, f) in [
            ("class_fraction", self.gen.splits.class_fraction),
            ("instance_fraction", self.gen.splits.instance_fraction),
        ] {
            if !(0.0..1.0).contains(&f) || f <= 0.0 {
                return Err(PipelineError::BadConfig(format!(
                    "{name} {f} outside (0,1)"
                )));
            }
        }
        if self.gen.kinds.is_empty() {
            return Err(PipelineError::BadConfig("no instruction kinds".into()));
        }
        if self.train.batch_size == 0 || self.train.steps == 0 {
            return Err(PipelineError::BadConfig(
                "train.steps and train.batch_size must be positive".into(),
            ));
        }
        if self.eval.seeds.is_empty() {
            return Err(PipelineError::BadConfig("eval.seeds is empty".into()));
        }
        Ok(())
    }
}

/// Write the exact config snapshot next to an artifact.
pub fn write_snapshot(dir: &Path, config: &RunConfig) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(config)?;
    std::fs::write(dir.join("run_config.json"), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_round_trips_and_rejects_unknown_keys() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.content_hash(), cfg.content_hash());

        let bad = text.replacen("\"world\"", "\"wrold\"", 1);
        assert!(RunConfig::from_json(&bad).is_err());

        let nested_bad = text.replacen("\"a_max\"", "\"a_mx\"", 1);
        assert!(RunConfig::from_json(&nested_bad).is_err());
    }

    #[test]
    fn run_config_cross_checks_resolutions() {
        let mut cfg = RunConfig::default();
        cfg.world.image_size = 32;
        assert!(matches!(cfg.validate(), Err(PipelineError::BadConfig(_))));
    }

    #[test]
    fn split_tags_parse_back_and_errors_carry_codes() {
        for tag in SplitTag::ALL {
            assert_eq!(SplitTag::parse(tag.name()).unwrap(), tag);
        }
        let err = SplitTag::parse("test").unwrap_err();
        assert_eq!(err.code(), "bad-config");
        assert_eq!(PipelineError::EmptyDataset.code(), "empty-dataset");
        let store = PipelineError::Store(crate::store::StoreError::BadMagic {
            expected: *b"RGEP",
            found: *b"nope",
        });
        assert_eq!(store.code(), "bad-magic");
    }

    #[test]
    fn mask_source_parse_forms() {
        assert_eq!(MaskSource::parse("oracle").unwrap(), MaskSource::Oracle);
        assert_eq!(MaskSource::parse("none").unwrap(), MaskSource::None);
        assert_eq!(
            MaskSource::parse("learned:runs/g.ckpt").unwrap(),
            MaskSource::Learned {
                checkpoint: PathBuf::from("runs/g.ckpt")
            }
        );
        assert_eq!(
            MaskSource::parse("noisy").unwrap(),
            MaskSource::Noisy {
                noise: NoiseConfig::default()
            }
        );
        let parsed = MaskSource::parse("noisy:{\"dropout_p\":1.0}").unwrap();
        match parsed {
            MaskSource::Noisy { noise } => assert_eq!(noise.dropout_p, 1.0),
            other => panic!("wrong parse: {other:?}"),
        }
        assert!(MaskSource::parse("learned").is_err());
        assert!(MaskSource::parse("wat").is_err());
    }

    #[test]
    fn manifest_save_load_validate() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("e0.rgep"), b"x").unwrap();
        let manifest = DatasetManifest {
            master_seed: 7,
            catalog_hash: "abc".into(),
            episodes: vec![EpisodeMeta {
                path: "e0.rgep".into(),
                category: "easy".into(),
                split: SplitTag::Seen,
            }],
        };
        manifest.save(dir.path()).unwrap();
        let back = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(back, manifest);
        back.validate(dir.path(), Some("abc")).unwrap();
        assert!(back.validate(dir.path(), Some("zzz")).is_err());
        let mut missing = back.clone();
        missing.episodes[0].path = "gone.rgep".into();
        assert!(missing.validate(dir.path(), None).is_err());
    }
}
