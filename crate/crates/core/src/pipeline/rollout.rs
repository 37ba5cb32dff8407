//! Closed-loop policy rollouts and the paired evaluation harness.

use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::grounder::{miou_outputs, GrounderOutput};
use crate::instr::{default_scenario_table, InstructionKind};
use crate::policy::{encode_frame, predict_cached, FrameCache, PolicyModel};
use crate::rng::{derive, stream};
use crate::world::{judge, render, step, Action, Judgment, Scene, SceneConfig, WorldConfig};

use super::data::build_task;
use super::training::MaskProvider;
use super::PipelineError;

/// Outcome of one closed-loop episode.
#[derive(Clone, Debug)]
pub struct RolloutResult {
    pub judgment: Judgment,
    /// Actions executed before success or the step budget.
    pub steps: usize,
    /// Grounding calls made: one per episode, zero on an empty budget.
    pub grounder_calls: usize,
    /// The masks the policy saw, frozen at the first frame.
    pub masks: GrounderOutput,
}

/// Run the policy on a scene.  The mask provider is consulted exactly once,
/// on the first rendered frame; the masks stay frozen for the whole episode.
/// Per-frame features are cached, so each new timestep encodes one frame and
/// re-runs only the temporal transformer.  The episode ends at success or
/// after `t_max` actions.  `seed` only feeds noisy mask corruption.
pub fn rollout(
    model: &PolicyModel,
    provider: &MaskProvider,
    world: &WorldConfig,
    scene: &Scene,
    instruction: &str,
    seed: u64,
) -> Result<RolloutResult, PipelineError> {
    let n = world.image_size;
    if world.t_max == 0 {
        return Ok(RolloutResult {
            judgment: judge(scene, false),
            steps: 0,
            grounder_calls: 0,
            masks: GrounderOutput::new(
                ndarray::Array2::zeros((n, n)),
                ndarray::Array2::zeros((n, n)),
            ),
        });
    }

    let mut scene = scene.clone();
    let first_obs = render(&scene, n);
    let masks = provider.rollout_masks(&first_obs, instruction, derive(seed, stream::NOISE))?;

    let history = model.config.history;
    let mut ring: Vec<FrameCache> = Vec::with_capacity(history);
    let mut contact = false;
    let mut steps = 0usize;
    let mut obs = first_obs;
    loop {
        let cache = encode_frame(model, &obs.image, &masks, obs.state)?;
        if ring.len() == history {
            ring.remove(0);
        }
        ring.push(cache);
        let decision = predict_cached(model, &ring, instruction)?;
        let action = Action {
            arm: [
                decision.arm[0] * world.a_max,
                decision.arm[1] * world.a_max,
            ],
            grip_close: decision.grip_close,
        };
        contact |= step(&mut scene, world, &action).contact;
        steps += 1;
        let judgment = judge(&scene, contact);
        if judgment.success || steps == world.t_max {
            return Ok(RolloutResult {
                judgment,
                steps,
                grounder_calls: 1,
                masks,
            });
        }
        obs = render(&scene, n);
    }
}

/// One evaluation arm: the object pool, instruction kinds, scene shape,
/// episode counts, and the seeds that pair scenes across arms.
pub struct EvalRequest<'a> {
    pub catalog: &'a Catalog,
    pub allowed: &'a [u32],
    pub kinds: &'a [InstructionKind],
    pub scene_cfg: &'a SceneConfig,
    pub world: &'a WorldConfig,
    pub episodes_per_kind: usize,
    pub max_retries: usize,
    pub seeds: &'a [u64],
}

/// Counts for one (instruction kind, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub kind: String,
    pub seed: u64,
    pub episodes: usize,
    pub contacts: usize,
    pub successes: usize,
    /// Mean IoU of the masks the policy saw against ground truth at the
    /// grounding frame.
    pub miou: f64,
}

/// Per-kind aggregate across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub kind: String,
    pub episodes: usize,
    pub contacts: usize,
    pub successes: usize,
    pub contact_rate: f64,
    pub success_rate: f64,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<EvalRow>,
    pub summaries: Vec<EvalSummary>,
    pub warnings: Vec<String>,
}

/// Evaluate one policy arm.  Scenes and instructions are a pure function
/// of (catalog, pool, kind, scene config, seed), so two arms evaluated
/// with the same request face identical episodes.  A kind whose generator
/// cannot be satisfied by the pool is skipped with a warning.
pub fn evaluate(
    model: &PolicyModel,
    provider: &MaskProvider,
    req: &EvalRequest,
) -> Result<EvalReport, PipelineError> {
    let table = default_scenario_table();
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for &seed in req.seeds {
        let root = derive(seed, stream::EVAL);
        for (ki, &kind) in req.kinds.iter().enumerate() {
            let mut episodes = 0usize;
            let mut contacts = 0usize;
            let mut successes = 0usize;
            let mut predictions = Vec::new();
            let mut truths = Vec::new();
            for i in 0..req.episodes_per_kind {
                let task_seed = derive(root, (ki * req.episodes_per_kind + i) as u64);
                let task = match build_task(
                    req.catalog,
                    req.allowed,
                    kind,
                    req.scene_cfg,
                    &table,
                    req.max_retries,
                    task_seed,
                ) {
                    Ok(t) => t,
                    Err(e) => {
                        warnings.push(format!(
                            "{} seed {seed}: skipped after episode {i}: {e}",
                            kind.name()
                        ));
                        break;
                    }
                };
                let gt = render(&task.scene, req.world.image_size);
                let result = rollout(
                    model,
                    provider,
                    req.world,
                    &task.scene,
                    &task.instruction.text,
                    task_seed,
                )?;
                episodes += 1;
                contacts += result.judgment.contact as usize;
                successes += result.judgment.success as usize;
                predictions.push(result.masks);
                truths.push(GrounderOutput::new(gt.object_mask, gt.placement_mask));
            }
            if episodes > 0 {
                rows.push(EvalRow {
                    kind: kind.name().to_string(),
                    seed,
                    episodes,
                    contacts,
                    successes,
                    miou: miou_outputs(&predictions, &truths)?,
                });
            }
        }
    }
    let summaries = summarize(req.kinds, &rows);
    Ok(EvalReport {
        seeds: req.seeds.to_vec(),
        rows,
        summaries,
        warnings,
    })
}

fn summarize(kinds: &[InstructionKind], rows: &[EvalRow]) -> Vec<EvalSummary> {
    let mut out = Vec::new();
    for kind in kinds {
        let name = kind.name();
        let mine: Vec<&EvalRow> = rows.iter().filter(|r| r.kind == name).collect();
        let episodes: usize = mine.iter().map(|r| r.episodes).sum();
        if episodes == 0 {
            continue;
        }
        let contacts: usize = mine.iter().map(|r| r.contacts).sum();
        let successes: usize = mine.iter().map(|r| r.successes).sum();
        let miou = mine
            .iter()
            .map(|r| r.miou * r.episodes as f64)
            .sum::<f64>()
            / episodes as f64;
        out.push(EvalSummary {
            kind: name.to_string(),
            episodes,
            contacts,
            successes,
            contact_rate: contacts as f64 / episodes as f64,
            success_rate: successes as f64 / episodes as f64,
            miou,
        });
    }
    out
}

impl EvalReport {
    /// Per-seed success counts followed by the per-kind mean over seeds.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(|v| v.to_string()).collect();
        s.push_str(&format!("Seeds: {}\n\n", seeds.join(", ")));
        s.push_str("Per seed:\n\n");
        s.push_str("| category | seed | episodes | success |\n");
        s.push_str("|---|---|---|---|\n");
        for row in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {} / {} ({:.1}%) |\n",
                row.kind,
                row.seed,
                row.episodes,
                row.successes,
                row.episodes,
                100.0 * row.successes as f64 / row.episodes as f64,
            ));
        }
        s.push_str("\nMean over seeds:\n\n");
        s.push_str("| category | episodes | contact | success | mIoU |\n");
        s.push_str("|---|---|---|---|---|\n");
        for row in &self.summaries {
            s.push_str(&format!(
                "| {} | {} | {} / {} ({:.1}%) | {} / {} ({:.1}%) | {:.3} |\n",
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
        for w in &self.warnings {
            s.push_str(&format!("\nWarning: {w}\n"));
        }
        s
    }

    /// One line per (kind, seed) cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,seed,episodes,contacts,successes,miou\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.kind, r.seed, r.episodes, r.contacts, r.successes, r.miou
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{build_catalog, CatalogConfig};
    use crate::policy::{init_policy, FillScope, MaskMode, PolicyConfig};

    fn tiny_world(t_max: usize) -> WorldConfig {
        WorldConfig {
            image_size: 16,
            t_max,
            ..WorldConfig::default()
        }
    }

    fn tiny_policy_model() -> PolicyModel {
        let cfg = PolicyConfig {
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
            mask_mode: MaskMode::Mask,
            fill_enabled: true,
            fill_scope: FillScope::Global,
        };
        init_policy(&cfg, 3).unwrap()
    }

    fn sample_task(seed: u64) -> super::super::data::Task {
        let catalog = build_catalog(&CatalogConfig::default(), 3).unwrap();
        let allowed: Vec<u32> = catalog.entries.iter().map(|e| e.id).collect();
        let scene_cfg = SceneConfig {
            distractors: 2,
            ..SceneConfig::default()
        };
        build_task(
            &catalog,
            &allowed,
            InstructionKind::Easy,
            &scene_cfg,
            &default_scenario_table(),
            50,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn zero_horizon_never_grounds() {
        let model = tiny_policy_model();
        let task = sample_task(1);
        let provider = MaskProvider::Oracle;
        let r = rollout(
            &model,
            &provider,
            &tiny_world(0),
            &task.scene,
            &task.instruction.text,
            1,
        )
        .unwrap();
        assert_eq!(r.steps, 0);
        assert_eq!(r.grounder_calls, 0);
        assert!(!r.judgment.success);
    }

    #[test]
    fn rollout_grounds_once_within_budget() {
        let model = tiny_policy_model();
        let task = sample_task(2);
        let provider = MaskProvider::Oracle;
        let world = tiny_world(6);
        let r = rollout(&model, &provider, &world, &task.scene, &task.instruction.text, 2).unwrap();
        assert_eq!(r.grounder_calls, 1);
        assert!(r.steps >= 1 && r.steps <= 6);
        assert!(r.judgment.success <= r.judgment.contact);
        assert_eq!(r.masks.object_mask.dim(), (16, 16));

        let again = rollout(&model, &provider, &world, &task.scene, &task.instruction.text, 2).unwrap();
        assert_eq!(again.steps, r.steps);
        assert_eq!(again.judgment, r.judgment);
        assert_eq!(again.masks.object_mask, r.masks.object_mask);
    }

    #[test]
    fn noisy_rollout_is_seeded() {
        let model = tiny_policy_model();
        let task = sample_task(3);
        let provider = MaskProvider::Noisy(crate::grounder::NoiseConfig {
            shift_radius: 2,
            morph_radius: 1,
            dropout_p: 0.0,
        });
        let world = tiny_world(3);
        let a = rollout(&model, &provider, &world, &task.scene, &task.instruction.text, 9).unwrap();
        let b = rollout(&model, &provider, &world, &task.scene, &task.instruction.text, 9).unwrap();
        assert_eq!(a.masks.object_mask, b.masks.object_mask);
        assert_eq!(a.steps, b.steps);
    }

    #[test]
    fn evaluation_reports_paired_deterministic_counts() {
        let model = tiny_policy_model();
        let catalog = build_catalog(&CatalogConfig::default(), 3).unwrap();
        let allowed: Vec<u32> = catalog.entries.iter().map(|e| e.id).collect();
        let scene_cfg = SceneConfig {
            distractors: 2,
            ..SceneConfig::default()
        };
        let world = tiny_world(4);
        let req = EvalRequest {
            catalog: &catalog,
            allowed: &allowed,
            kinds: &[InstructionKind::Easy],
            scene_cfg: &scene_cfg,
            world: &world,
            episodes_per_kind: 2,
            max_retries: 50,
            seeds: &[1, 2],
        };
        let report = evaluate(&model, &MaskProvider::Oracle, &req).unwrap();
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            assert_eq!(row.episodes, 2);
            assert!(row.successes <= row.contacts);
            assert_eq!(row.miou, 1.0, "oracle masks must score perfect IoU");
        }
        assert_eq!(report.summaries.len(), 1);
        assert_eq!(report.summaries[0].episodes, 4);
        assert_eq!(
            report.summaries[0].contacts,
            report.rows.iter().map(|r| r.contacts).sum::<usize>()
        );
        assert!(report.warnings.is_empty());

        let again = evaluate(&model, &MaskProvider::Oracle, &req).unwrap();
        assert_eq!(again, report, "evaluation must be deterministic");

        let blind = evaluate(&model, &MaskProvider::Empty, &req).unwrap();
        assert!(blind.rows.iter().all(|r| r.miou < 0.5));

        let md = report.to_markdown();
        assert!(md.contains("easy"));
        assert!(md.contains(" / "));
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 1 + report.rows.len());
        assert!(csv.starts_with("kind,seed,"));
    }

    #[test]
    fn unsatisfiable_kind_is_skipped_with_warning() {
        let model = tiny_policy_model();
        let catalog = build_catalog(&CatalogConfig::default(), 3).unwrap();
        let allowed: Vec<u32> = catalog.entries.iter().map(|e| e.id).collect();
        let solo = SceneConfig {
            distractors: 0,
            ..SceneConfig::default()
        };
        let world = tiny_world(3);
        let req = EvalRequest {
            catalog: &catalog,
            allowed: &allowed,
            kinds: &[InstructionKind::Spatial],
            scene_cfg: &solo,
            world: &world,
            episodes_per_kind: 2,
            max_retries: 2,
            seeds: &[1],
        };
        let report = evaluate(&model, &MaskProvider::Oracle, &req).unwrap();
        assert!(report.rows.is_empty());
        assert!(report.summaries.is_empty());
        assert_eq!(report.warnings.len(), 1);
        assert!(report.warnings[0].contains("spatial"));
    }
}
