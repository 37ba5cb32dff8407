//! Ablation suites: arms that differ in one knob, trained and evaluated
//! on paired episodes, written out as a comparison report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::build_catalog;
use crate::grounder::NoiseConfig;
use crate::instr::InstructionKind;
use crate::policy::{FillScope, MaskMode, PolicyConfig};
use crate::rng::{derive, stream};

use super::data::{collect_demos, dataset_hash, make_splits};
use super::rollout::{evaluate, EvalReport, EvalRequest};
use super::training::{train_policy, MaskProvider};
use super::{DatasetManifest, MaskSource, PipelineError, RunConfig};

/// Mask corruption used by the grounder-quality suite's noisy arm.
pub const ABLATION_NOISE: NoiseConfig = NoiseConfig {
    shift_radius: 3,
    morph_radius: 2,
    dropout_p: 0.1,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    /// Instruction mix in the demonstrations: easy-only versus all kinds,
    /// crossed with oracle versus absent masks.
    DataMix,
    /// Mask conditioning channels and attention fill, each on or off.
    MaskModules,
    /// Grounding representation: mask, bbox, or point, as image channels
    /// or low-dim state features.
    Representations,
    /// Mask source at training and rollout: oracle, learned, noisy, none.
    GrounderQuality,
}

impl Suite {
    pub const ALL: [Suite; 4] = [
        Suite::DataMix,
        Suite::MaskModules,
        Suite::Representations,
        Suite::GrounderQuality,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::DataMix => "data-mix",
            Suite::MaskModules => "mask-modules",
            Suite::Representations => "representations",
            Suite::GrounderQuality => "grounder-quality",
        }
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        Suite::ALL
            .into_iter()
            .find(|s| s.name() == text)
            .ok_or_else(|| {
                let names: Vec<&str> = Suite::ALL.iter().map(|s| s.name()).collect();
                PipelineError::BadConfig(format!(
                    "suite {text:?}; want one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// Episode counts for one suite run; optimizer settings come from the run
/// configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateBudget {
    /// Demonstrations collected per instruction kind, shared by all arms.
    pub train_episodes_per_kind: usize,
    /// Evaluation episodes per instruction kind, per seed, per arm.
    pub eval_episodes_per_kind: usize,
}

impl Default for AblateBudget {
    fn default() -> Self {
        AblateBudget {
            train_episodes_per_kind: 100,
            eval_episodes_per_kind: 25,
        }
    }
}

pub(crate) struct ArmSpec {
    pub name: String,
    pub mode: MaskMode,
    pub fill: bool,
    pub source: MaskSource,
    /// Train only on the easy-kind episodes of the shared dataset.
    pub easy_only: bool,
}

fn arm(name: &str, mode: MaskMode, fill: bool, source: MaskSource, easy_only: bool) -> ArmSpec {
    ArmSpec {
        name: name.to_string(),
        mode,
        fill,
        source,
        easy_only,
    }
}

pub(crate) fn suite_arms(
    suite: Suite,
    grounder_checkpoint: Option<&Path>,
) -> (Vec<ArmSpec>, Vec<String>) {
    let mut warnings = Vec::new();
    let arms = match suite {
        Suite::DataMix => vec![
            arm("easy-only-oracle", MaskMode::Mask, true, MaskSource::Oracle, true),
            arm("easy-only-none", MaskMode::Mask, true, MaskSource::None, true),
            arm("all-oracle", MaskMode::Mask, true, MaskSource::Oracle, false),
            arm("all-none", MaskMode::Mask, true, MaskSource::None, false),
        ],
        Suite::MaskModules => vec![
            arm("mask-fill", MaskMode::Mask, true, MaskSource::Oracle, false),
            arm("mask-no-fill", MaskMode::Mask, false, MaskSource::Oracle, false),
            arm("none-fill", MaskMode::None, true, MaskSource::Oracle, false),
            arm("none-no-fill", MaskMode::None, false, MaskSource::Oracle, false),
        ],
        Suite::Representations => vec![
            arm("point-lowdim", MaskMode::PointLowdim, false, MaskSource::Oracle, false),
            arm("point-image", MaskMode::PointImage, true, MaskSource::Oracle, false),
            arm("bbox-lowdim", MaskMode::BboxLowdim, false, MaskSource::Oracle, false),
            arm("bbox-image", MaskMode::BboxImage, true, MaskSource::Oracle, false),
            arm("mask", MaskMode::Mask, true, MaskSource::Oracle, false),
        ],
        Suite::GrounderQuality => {
            let mut arms = vec![arm("oracle", MaskMode::Mask, true, MaskSource::Oracle, false)];
            match grounder_checkpoint {
                Some(p) if p.is_file() => {
                    arms.push(arm(
                        "learned",
                        MaskMode::Mask,
                        true,
                        MaskSource::Learned {
                            checkpoint: p.to_path_buf(),
                        },
                        false,
                    ));
                }
                Some(p) => warnings.push(format!(
                    "learned arm skipped: grounder checkpoint {} not found",
                    p.display()
                )),
                None => warnings
                    .push("learned arm skipped: no grounder checkpoint given".to_string()),
            }
            arms.push(arm(
                "noisy",
                MaskMode::Mask,
                true,
                MaskSource::Noisy {
                    noise: ABLATION_NOISE,
                },
                false,
            ));
            arms.push(arm("none", MaskMode::Mask, true, MaskSource::None, false));
            arms
        }
    };
    (arms, warnings)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub suite: String,
    pub budget: AblateBudget,
    /// Content hash of the run configuration all arms shared.
    pub config_hash: String,
    /// Content hash of the demonstration set all arms trained on.
    pub dataset_hash: String,
    pub arms: Vec<ArmResult>,
    pub warnings: Vec<String>,
}

impl AblationReport {
    pub fn to_markdown(&self) -> String {
        let mut s = format!("# Ablation: {}\n\n", self.suite);
        s.push_str("| arm | category | episodes | contact | success | mIoU |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for arm in &self.arms {
            for row in &arm.report.summaries {
                s.push_str(&format!(
                    "| {} | {} | {} | {} / {} ({:.1}%) | {} / {} ({:.1}%) | {:.3} |\n",
                    arm.name,
                    row.kind,
                    row.episodes,
                    row.contacts,
                    row.episodes,
                    100.0 * row.contact_rate,
                    row.successes,
                    row.episodes,
                    100.0 * row.success_rate,
                    row.miou,
                ));
            }
        }
        if !self.warnings.is_empty() {
            s.push_str("\nWarnings:\n");
            for w in &self.warnings {
                s.push_str(&format!("- {w}\n"));
            }
        }
        s
    }

    /// One row per category per arm, aggregated over seeds.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,category,episodes,contacts,successes,miou\n");
        for arm in &self.arms {
            for row in &arm.report.summaries {
                s.push_str(&format!(
                    "{},{},{},{},{},{:.6}\n",
                    arm.name, row.kind, row.episodes, row.contacts, row.successes, row.miou,
                ));
            }
        }
        s
    }
}

fn easy_subset(manifest: &DatasetManifest) -> Result<DatasetManifest, PipelineError> {
    let easy = InstructionKind::Easy.name();
    let episodes: Vec<_> = manifest
        .episodes
        .iter()
        .filter(|e| e.category == easy)
        .cloned()
        .collect();
    if episodes.is_empty() {
        return Err(PipelineError::BadConfig(
            "data-mix suite needs easy-kind episodes in the dataset".into(),
        ));
    }
    Ok(DatasetManifest {
        master_seed: manifest.master_seed,
        catalog_hash: manifest.catalog_hash.clone(),
        episodes,
    })
}

/// Run one ablation suite end to end: collect a shared demonstration set,
/// train every arm with the same seed, evaluate all arms on identical
/// episode sets, and write `report.json`, `report.md`, and per-arm policy
/// checkpoints under `out_dir`.
pub fn ablate(
    cfg: &RunConfig,
    suite: Suite,
    budget: &AblateBudget,
    grounder_checkpoint: Option<&Path>,
    seed: u64,
    out_dir: &Path,
) -> Result<AblationReport, PipelineError> {
    cfg.validate()?;
    if budget.train_episodes_per_kind == 0 || budget.eval_episodes_per_kind == 0 {
        return Err(PipelineError::BadConfig(
            "ablation budget must be positive".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let catalog = build_catalog(&cfg.catalog, derive(seed, stream::CATALOG))?;
    let assignment = make_splits(&catalog, &cfg.gen.splits, seed)?;
    let data_dir = out_dir.join("data");
    let manifest = collect_demos(
        &catalog,
        &cfg.gen,
        &cfg.scene,
        &cfg.world,
        budget.train_episodes_per_kind,
        seed,
        &data_dir,
    )?;
    let models_dir = out_dir.join("models");
    std::fs::create_dir_all(&models_dir)?;

    let (arms, mut warnings) = suite_arms(suite, grounder_checkpoint);
    let eval_pool = assignment.pool(cfg.eval.split);
    let mut results = Vec::new();
    for spec in &arms {
        let arm_manifest = if spec.easy_only {
            easy_subset(&manifest)?
        } else {
            manifest.clone()
        };
        let policy_cfg = PolicyConfig {
            mask_mode: spec.mode,
            fill_enabled: spec.fill,
            fill_scope: FillScope::Global,
            ..cfg.policy.clone()
        };
        let trained = train_policy(
            &data_dir,
            &arm_manifest,
            &policy_cfg,
            &cfg.train,
            &cfg.world,
            &spec.source,
            seed,
        )?;
        trained
            .model
            .save(&models_dir.join(format!("{}.ckpt", spec.name)))?;
        let provider = MaskProvider::from_source(&spec.source)?;
        let req = EvalRequest {
            catalog: &catalog,
            allowed: eval_pool,
            kinds: &cfg.gen.kinds,
            scene_cfg: &cfg.scene,
            world: &cfg.world,
            episodes_per_kind: budget.eval_episodes_per_kind,
            max_retries: cfg.gen.max_retries,
            seeds: &cfg.eval.seeds,
        };
        let report = evaluate(&trained.model, &provider, &req)?;
        warnings.extend(report.warnings.iter().map(|w| format!("{}: {w}", spec.name)));
        results.push(ArmResult {
            name: spec.name.clone(),
            report,
        });
    }

    let report = AblationReport {
        suite: suite.name().to_string(),
        budget: budget.clone(),
        config_hash: cfg.content_hash(),
        dataset_hash: dataset_hash(&data_dir, &manifest)?,
        arms: results,
        warnings,
    };
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    std::fs::write(out_dir.join("report.md"), report.to_markdown())?;
    std::fs::write(out_dir.join("report.csv"), report.to_csv())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::CatalogConfig;
    use crate::pipeline::{EvalConfig, GenConfig, TrainConfig};
    use crate::world::{SceneConfig, WorldConfig};

    #[test]
    fn suite_names_parse_back() {
        for suite in Suite::ALL {
            assert_eq!(Suite::parse(suite.name()).unwrap(), suite);
        }
        assert!(Suite::parse("everything").is_err());
    }

    #[test]
    fn data_mix_arms_cross_mix_and_source() {
        let (arms, warnings) = suite_arms(Suite::DataMix, None);
        assert!(warnings.is_empty());
        let names: Vec<&str> = arms.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(
            names,
            vec!["easy-only-oracle", "easy-only-none", "all-oracle", "all-none"]
        );
        assert_eq!(
            arms.iter().map(|a| a.easy_only).collect::<Vec<_>>(),
            vec![true, true, false, false]
        );
        assert!(arms.iter().all(|a| a.mode == MaskMode::Mask && a.fill));
        assert_eq!(arms[0].source, MaskSource::Oracle);
        assert_eq!(arms[1].source, MaskSource::None);
    }

    #[test]
    fn mask_module_arms_cross_channels_and_fill() {
        let (arms, _) = suite_arms(Suite::MaskModules, None);
        let got: Vec<(&str, MaskMode, bool)> = arms
            .iter()
            .map(|a| (a.name.as_str(), a.mode, a.fill))
            .collect();
        assert_eq!(
            got,
            vec![
                ("mask-fill", MaskMode::Mask, true),
                ("mask-no-fill", MaskMode::Mask, false),
                ("none-fill", MaskMode::None, true),
                ("none-no-fill", MaskMode::None, false),
            ]
        );
        assert!(arms.iter().all(|a| a.source == MaskSource::Oracle));
    }

    #[test]
    fn representation_arms_are_ordered_and_consistent() {
        let (arms, _) = suite_arms(Suite::Representations, None);
        let got: Vec<(&str, MaskMode, bool)> = arms
            .iter()
            .map(|a| (a.name.as_str(), a.mode, a.fill))
            .collect();
        assert_eq!(
            got,
            vec![
                ("point-lowdim", MaskMode::PointLowdim, false),
                ("point-image", MaskMode::PointImage, true),
                ("bbox-lowdim", MaskMode::BboxLowdim, false),
                ("bbox-image", MaskMode::BboxImage, true),
                ("mask", MaskMode::Mask, true),
            ]
        );
    }

    #[test]
    fn grounder_quality_arms_depend_on_checkpoint() {
        let (arms, warnings) = suite_arms(Suite::GrounderQuality, None);
        let names: Vec<&str> = arms.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names, vec!["oracle", "noisy", "none"]);
        assert_eq!(warnings.len(), 1);

        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("g.ckpt");
        let (_, warnings) = suite_arms(Suite::GrounderQuality, Some(&missing));
        assert!(warnings[0].contains("g.ckpt"));

        std::fs::write(&missing, b"stub").unwrap();
        let (arms, warnings) = suite_arms(Suite::GrounderQuality, Some(&missing));
        assert!(warnings.is_empty());
        let names: Vec<&str> = arms.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names, vec!["oracle", "learned", "noisy", "none"]);
        match &arms[1].source {
            MaskSource::Learned { checkpoint } => assert_eq!(checkpoint, &missing),
            other => panic!("wrong source {other:?}"),
        }
    }

    #[test]
    fn micro_suite_runs_end_to_end() {
        let cfg = RunConfig {
            world: WorldConfig {
                image_size: 16,
                t_max: 60,
                ..WorldConfig::default()
            },
            scene: SceneConfig {
                distractors: 2,
                ..SceneConfig::default()
            },
            catalog: CatalogConfig::default(),
            gen: GenConfig {
                kinds: vec![InstructionKind::Easy],
                ..GenConfig::default()
            },
            policy: crate::policy::PolicyConfig {
                image_size: 16,
                patch_size: 8,
                queries_per_group: 2,
                visual_dim: 8,
                perceived_dim: 8,
                attention_dim: 8,
                perceiver_layers: 1,
                history: 2,
                heads: 2,
                temporal_layers: 1,
                vocab: 64,
                text_embed_dim: 8,
                ..crate::policy::PolicyConfig::default()
            },
            grounder: crate::grounder::GrounderConfig {
                image_size: 16,
                ..crate::grounder::GrounderConfig::default()
            },
            train: TrainConfig {
                steps: 2,
                batch_size: 2,
                learning_rate: 1e-3,
                cosine_decay: true,
            },
            eval: EvalConfig {
                episodes_per_category: 1,
                seeds: vec![1],
                ..EvalConfig::default()
            },
        };
        let budget = AblateBudget {
            train_episodes_per_kind: 1,
            eval_episodes_per_kind: 1,
        };
        let out = tempfile::tempdir().unwrap();
        let report = ablate(&cfg, Suite::MaskModules, &budget, None, 17, out.path()).unwrap();
        assert_eq!(report.suite, "mask-modules");
        assert_eq!(report.arms.len(), 4);
        for arm in &report.arms {
            assert_eq!(arm.report.rows.len(), 1);
            assert_eq!(arm.report.rows[0].episodes, 1);
        }
        assert!(out.path().join("report.json").is_file());
        assert!(out.path().join("report.md").is_file());
        assert!(out.path().join("report.csv").is_file());
        assert!(out.path().join("models/mask-fill.ckpt").is_file());
        assert!(out.path().join("data/manifest.json").is_file());
        assert_eq!(report.config_hash, cfg.content_hash());
        assert_eq!(report.dataset_hash.len(), 64);
        let md = report.to_markdown();
        assert!(md.contains("mask-no-fill"));
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 1 + 4);
        assert!(csv.lines().nth(1).unwrap().starts_with("mask-fill,easy,"));
    }
}
