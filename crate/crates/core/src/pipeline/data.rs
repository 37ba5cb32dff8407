//! Demonstration collection and object splits.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::catalog::Catalog;
use crate::embed::default_embedder;
use crate::instr::{
    default_scenario_table, gen_appearance, gen_commonsense, gen_easy, gen_spatial, Instruction,
    InstructionKind, ScenarioTable,
};
use crate::rng::{chacha, derive, stream};
use crate::store::{quantize_unit, write_episode, Episode};
use crate::world::{
    render, sample_scene_with, step, ForcedChoices, Judgment, Scene, SceneConfig, ScriptedExpert,
    WorldConfig,
};

use super::{
    DatasetManifest, EpisodeMeta, GenConfig, PipelineError, SplitConfig, SplitTag,
};

/// Seeded partition of catalog objects into evaluation pools.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitAssignment {
    pub seen: Vec<u32>,
    pub unseen_instance: Vec<u32>,
    pub unseen_class: Vec<u32>,
    /// Categories whose every object is unseen-class.
    pub unseen_categories: Vec<String>,
}

impl SplitAssignment {
    pub fn pool(&self, tag: SplitTag) -> &[u32] {
        match tag {
            SplitTag::Seen => &self.seen,
            SplitTag::UnseenInstance => &self.unseen_instance,
            SplitTag::UnseenClass => &self.unseen_class,
        }
    }
}

/// Partition the catalog: a seeded `class_fraction` of whole categories
/// becomes unseen-class; of each remaining category, a seeded
/// `instance_fraction` of objects becomes unseen-instance; the rest is the
/// seen pool that training draws from.
pub fn make_splits(
    catalog: &Catalog,
    config: &SplitConfig,
    seed: u64,
) -> Result<SplitAssignment, PipelineError> {
    for (name, f) in [
        ("class_fraction", config.class_fraction),
        ("instance_fraction", config.instance_fraction),
    ] {
        if f <= 0.0 || f >= 1.0 {
            return Err(PipelineError::BadSplit(format!("{name} {f} outside (0,1)")));
        }
    }
    let mut by_category: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
    for e in &catalog.entries {
        by_category.entry(e.category.as_str()).or_default().push(e.id);
    }
    let categories: Vec<&str> = by_category.keys().copied().collect();
    let n_class = (categories.len() as f64 * config.class_fraction).round() as usize;
    if n_class >= categories.len() {
        return Err(PipelineError::BadSplit(format!(
            "class fraction {} holds out all {} categories",
            config.class_fraction,
            categories.len()
        )));
    }

    let mut rng = chacha(derive(seed, stream::SPLIT));
    let mut order: Vec<usize> = (0..categories.len()).collect();
    for i in 0..n_class {
        let j = rng.gen_range(i..order.len());
        order.swap(i, j);
    }
    let mut unseen_categories: Vec<String> =
        order[..n_class].iter().map(|&i| categories[i].to_string()).collect();
    unseen_categories.sort();

    let mut assignment = SplitAssignment {
        seen: Vec::new(),
        unseen_instance: Vec::new(),
        unseen_class: Vec::new(),
        unseen_categories,
    };
    for (category, ids) in &by_category {
        if assignment.unseen_categories.iter().any(|c| c == category) {
            assignment.unseen_class.extend(ids);
            continue;
        }
        let n_hold = (ids.len() as f64 * config.instance_fraction).round() as usize;
        if n_hold >= ids.len() {
            return Err(PipelineError::BadSplit(format!(
                "instance fraction {} empties category {category}",
                config.instance_fraction
            )));
        }
        let mut order: Vec<usize> = (0..ids.len()).collect();
        for i in 0..n_hold {
            let j = rng.gen_range(i..order.len());
            order.swap(i, j);
        }
        let mut held: Vec<usize> = order[..n_hold].to_vec();
        held.sort_unstable();
        for (idx, &id) in ids.iter().enumerate() {
            if held.binary_search(&idx).is_ok() {
                assignment.unseen_instance.push(id);
            } else {
                assignment.seen.push(id);
            }
        }
    }
    if assignment.seen.is_empty() {
        return Err(PipelineError::BadSplit("seen pool is empty".into()));
    }
    Ok(assignment)
}

/// A built scene paired with its instruction, ready for an expert run or
/// a policy rollout.
#[derive(Clone, Debug)]
pub struct Task {
    pub scene: Scene,
    pub instruction: Instruction,
}

/// Sample a scene restricted to `allowed` catalog ids and attach an
/// instruction of the requested kind, retrying fresh scenes on generator
/// failures.  Appearance rebuilds the scene around the generator's ranked
/// distractors before re-validating.
#[allow(clippy::too_many_arguments)]
pub(crate) fn build_task(
    catalog: &Catalog,
    allowed: &[u32],
    kind: InstructionKind,
    scene_cfg: &SceneConfig,
    table: &ScenarioTable,
    max_retries: usize,
    seed: u64,
) -> Result<Task, PipelineError> {
    assert!(!allowed.is_empty(), "empty object pool");
    let pool = catalog.blueprints();
    let mut last_stage = "scene";
    for attempt in 0..max_retries.max(1) {
        let attempt_seed = derive(seed, attempt as u64);
        let mut rng = chacha(derive(attempt_seed, stream::SCENE));

        let target_id = allowed[rng.gen_range(0..allowed.len())];
        let target_category = &catalog.entries[target_id as usize].category;
        let mut eligible: Vec<u32> = allowed
            .iter()
            .copied()
            .filter(|&id| {
                id != target_id && catalog.entries[id as usize].category != *target_category
            })
            .collect();
        if eligible.len() < scene_cfg.distractors {
            last_stage = "scene";
            continue;
        }
        for i in 0..scene_cfg.distractors {
            let j = rng.gen_range(i..eligible.len());
            eligible.swap(i, j);
        }
        let distractors: Vec<usize> = eligible[..scene_cfg.distractors]
            .iter()
            .map(|&id| id as usize)
            .collect();
        let forced = ForcedChoices {
            target_index: Some(target_id as usize),
            distractor_indices: Some(distractors),
            region_id: None,
        };
        let scene = match sample_scene_with(&pool, scene_cfg, derive(attempt_seed, 0), Some(&forced)) {
            Ok(s) => s,
            Err(_) => {
                last_stage = "scene";
                continue;
            }
        };

        let instr_seed = derive(attempt_seed, stream::INSTRUCTION);
        let built = match kind {
            InstructionKind::Easy => gen_easy(&scene, instr_seed).map(|i| (scene, i)),
            InstructionKind::Spatial => gen_spatial(&scene, instr_seed).map(|i| (scene, i)),
            InstructionKind::Commonsense => {
                gen_commonsense(&scene, table, instr_seed, None).map(|i| (scene, i))
            }
            InstructionKind::Appearance => {
                let provider = default_embedder();
                match gen_appearance(&scene, catalog, &provider, instr_seed) {
                    Ok((instruction, ranked)) => {
                        let want = scene.objects.len() - 1;
                        let swapped: Vec<usize> = ranked
                            .iter()
                            .copied()
                            .filter(|id| allowed.contains(id))
                            .take(want)
                            .map(|id| id as usize)
                            .collect();
                        if swapped.len() < want {
                            Err(crate::instr::InstrError::NoUniqueAttribute)
                        } else {
                            let forced = ForcedChoices {
                                target_index: Some(target_id as usize),
                                distractor_indices: Some(swapped),
                                region_id: Some(instruction.region_id),
                            };
                            sample_scene_with(&pool, scene_cfg, derive(attempt_seed, 1), Some(&forced))
                                .map_err(|_| crate::instr::InstrError::NoUniqueAttribute)
                                .map(|rebuilt| (rebuilt, instruction))
                        }
                    }
                    Err(e) => Err(e),
                }
            }
        };
        match built {
            Ok((scene, instruction)) => return Ok(Task { scene, instruction }),
            Err(_) => {
                last_stage = kind.name();
                continue;
            }
        }
    }
    Err(PipelineError::RetryExhausted {
        kind: kind.name().to_string(),
        stage: last_stage.to_string(),
        attempts: max_retries.max(1),
    })
}

/// Run the scripted expert on a task and record every frame: rendered
/// image, ground-truth masks, proprioception, and the executed action.
/// Returns the episode and the final judgment.
pub fn record_episode(
    task: &Task,
    world: &WorldConfig,
    seed: u64,
) -> (Episode, Judgment) {
    let mut scene = task.scene.clone();
    let mut expert = ScriptedExpert::new(derive(seed, stream::EXPERT), world.expert_noise);
    let n = world.image_size;
    let mut images: Vec<u8> = Vec::new();
    let mut mask_obj: Vec<u8> = Vec::new();
    let mut mask_plc: Vec<u8> = Vec::new();
    let mut states: Vec<f32> = Vec::new();
    let mut actions: Vec<f32> = Vec::new();
    let mut contact = false;
    let mut t = 0usize;
    while t < world.t_max {
        let obs = render(&scene, n);
        let Some(action) = expert.next_action(&scene, world) else {
            break;
        };
        images.extend(obs.image.iter().map(|&v| quantize_unit(v)));
        mask_obj.extend(obs.object_mask.iter());
        mask_plc.extend(obs.placement_mask.iter());
        states.extend(obs.state.iter().map(|&v| v as f32));
        actions.extend([
            action.arm[0] as f32,
            action.arm[1] as f32,
            if action.grip_close { 1.0 } else { 0.0 },
        ]);
        contact |= step(&mut scene, world, &action).contact;
        t += 1;
    }
    let judgment = crate::world::judge(&scene, contact);
    let episode = Episode {
        instruction: task.instruction.text.clone(),
        category: task.instruction.kind.name().to_string(),
        target_object_id: task.instruction.target_object_id,
        region_id: task.instruction.region_id,
        scene: serde_json::to_value(&task.scene).expect("scene serializes"),
        seed,
        images: Array4::from_shape_vec((t, n, n, 3), images).expect("frame count"),
        mask_obj: Array3::from_shape_vec((t, n, n), mask_obj).expect("frame count"),
        mask_plc: Array3::from_shape_vec((t, n, n), mask_plc).expect("frame count"),
        states: Array2::from_shape_vec((t, 4), states).expect("frame count"),
        actions: Array2::from_shape_vec((t, 3), actions).expect("frame count"),
    };
    (episode, judgment)
}

/// Collect expert demonstrations: `n_per_category` successful episodes for
/// each configured instruction kind, drawn from the seen object pool, and
/// write them with a manifest under `out_dir`.
pub fn collect_demos(
    catalog: &Catalog,
    gen: &GenConfig,
    scene_cfg: &SceneConfig,
    world: &WorldConfig,
    n_per_category: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest, PipelineError> {
    if gen.kinds.is_empty() || n_per_category == 0 {
        return Err(PipelineError::BadConfig(
            "no instruction kinds or zero episodes requested".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let assignment = make_splits(catalog, &gen.splits, seed)?;
    let table = default_scenario_table();
    let mut manifest = DatasetManifest {
        master_seed: seed,
        catalog_hash: catalog.content_hash(),
        episodes: Vec::new(),
    };
    let episode_root = derive(seed, stream::EPISODE);
    let mut seq = 0u64;
    for &kind in &gen.kinds {
        for produced in 0..n_per_category {
            let mut done = false;
            for _attempt in 0..gen.max_retries {
                let ep_seed = derive(episode_root, seq);
                seq += 1;
                let task = build_task(
                    catalog,
                    &assignment.seen,
                    kind,
                    scene_cfg,
                    &table,
                    gen.max_retries,
                    ep_seed,
                )?;
                let (episode, judgment) = record_episode(&task, world, ep_seed);
                if !judgment.success || episode.steps() == 0 {
                    continue;
                }
                let name = format!("{}_{:05}.rgep", kind.name(), produced);
                write_episode(&out_dir.join(&name), &episode)?;
                manifest.episodes.push(EpisodeMeta {
                    path: name,
                    category: kind.name().to_string(),
                    split: SplitTag::Seen,
                });
                done = true;
                break;
            }
            if !done {
                return Err(PipelineError::RetryExhausted {
                    kind: kind.name().to_string(),
                    stage: "expert".to_string(),
                    attempts: gen.max_retries,
                });
            }
        }
    }
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// SHA-256 over the manifest's canonical JSON followed by every episode
/// file's bytes in manifest order: byte identity for the whole dataset.
pub fn dataset_hash(dir: &Path, manifest: &DatasetManifest) -> Result<String, PipelineError> {
    let mut hasher = Sha256::new();
    hasher.update(crate::canon::to_canonical_json(manifest).as_bytes());
    for meta in &manifest.episodes {
        hasher.update(std::fs::read(dir.join(&meta.path))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{build_catalog, CatalogConfig};

    fn tiny_world() -> WorldConfig {
        WorldConfig {
            image_size: 16,
            t_max: 60,
            ..WorldConfig::default()
        }
    }

    fn small_scene_cfg() -> SceneConfig {
        SceneConfig {
            distractors: 2,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn splits_match_contract_arithmetic() {
        let catalog = build_catalog(&CatalogConfig::default(), 3).unwrap();
        let a = make_splits(&catalog, &SplitConfig::default(), 11).unwrap();
        assert_eq!(a.unseen_categories.len(), 8);
        let per_cat = catalog.entries.len() / 40;
        assert_eq!(a.unseen_class.len(), 8 * per_cat);
        let hold_per_cat = (per_cat as f64 * 0.25).round() as usize;
        assert_eq!(a.unseen_instance.len(), 32 * hold_per_cat);
        assert_eq!(
            a.seen.len() + a.unseen_instance.len() + a.unseen_class.len(),
            catalog.entries.len()
        );

        let mut all: Vec<u32> = a
            .seen
            .iter()
            .chain(&a.unseen_instance)
            .chain(&a.unseen_class)
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), catalog.entries.len(), "splits overlap");

        let b = make_splits(&catalog, &SplitConfig::default(), 11).unwrap();
        assert_eq!(a, b, "same seed must reproduce the split");
        let c = make_splits(&catalog, &SplitConfig::default(), 12).unwrap();
        assert_ne!(a.unseen_categories, c.unseen_categories);
    }

    #[test]
    fn splits_reject_emptying_fractions() {
        let catalog = build_catalog(&CatalogConfig::default(), 3).unwrap();
        for bad in [
            SplitConfig { class_fraction: 0.999, instance_fraction: 0.25 },
            SplitConfig { class_fraction: 0.2, instance_fraction: 0.96 },
            SplitConfig { class_fraction: 0.0, instance_fraction: 0.25 },
        ] {
            assert!(
                matches!(make_splits(&catalog, &bad, 1), Err(PipelineError::BadSplit(_))),
                "{bad:?} accepted"
            );
        }
    }

    #[test]
    fn collect_produces_tagged_successful_episodes() {
        let catalog = build_catalog(&CatalogConfig::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let gen = GenConfig::default();
        let manifest = collect_demos(
            &catalog,
            &gen,
            &small_scene_cfg(),
            &tiny_world(),
            1,
            21,
            dir.path(),
        )
        .unwrap();
        assert_eq!(manifest.episodes.len(), 4);
        let cats: Vec<&str> = manifest.episodes.iter().map(|e| e.category.as_str()).collect();
        assert_eq!(cats, vec!["easy", "appearance", "spatial", "commonsense"]);
        assert!(manifest.episodes.iter().all(|e| e.split == SplitTag::Seen));
        manifest.validate(dir.path(), Some(&catalog.content_hash())).unwrap();

        let assignment = make_splits(&catalog, &gen.splits, 21).unwrap();
        for meta in &manifest.episodes {
            let ep = crate::store::read_episode(&dir.path().join(&meta.path)).unwrap();
            assert!(ep.steps() > 0);
            assert_eq!(ep.resolution(), 16);
            assert_eq!(ep.category, meta.category);
            let scene: Scene = serde_json::from_value(ep.scene.clone()).unwrap();
            let (judgment, _) = replay(&scene, &ep, &tiny_world());
            assert!(judgment.success, "{} demo must replay to success", meta.category);
            for obj in &scene.objects {
                let entry = catalog
                    .entries
                    .iter()
                    .find(|e| {
                        e.category == obj.category && e.attributes == obj.attributes
                    })
                    .expect("object from catalog");
                assert!(
                    assignment.seen.contains(&entry.id),
                    "unseen object {} in training scene",
                    entry.id
                );
            }
        }
    }

    fn replay(
        scene: &Scene,
        ep: &crate::store::Episode,
        world: &WorldConfig,
    ) -> (Judgment, Scene) {
        let actions: Vec<crate::world::Action> = (0..ep.steps())
            .map(|t| crate::world::Action {
                arm: [f64::from(ep.actions[[t, 0]]), f64::from(ep.actions[[t, 1]])],
                grip_close: ep.actions[[t, 2]] > 0.5,
            })
            .collect();
        crate::world::run_trajectory(scene.clone(), world, &actions)
    }

    #[test]
    fn same_seed_gives_byte_identical_datasets() {
        let catalog = build_catalog(&CatalogConfig::default(), 3).unwrap();
        let gen = GenConfig {
            kinds: vec![InstructionKind::Easy, InstructionKind::Spatial],
            ..GenConfig::default()
        };
        let run = |seed: u64| {
            let dir = tempfile::tempdir().unwrap();
            let manifest = collect_demos(
                &catalog,
                &gen,
                &small_scene_cfg(),
                &tiny_world(),
                2,
                seed,
                dir.path(),
            )
            .unwrap();
            dataset_hash(dir.path(), &manifest).unwrap()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn one_object_scenes_exhaust_spatial_retries() {
        let catalog = build_catalog(&CatalogConfig::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let gen = GenConfig {
            kinds: vec![InstructionKind::Spatial],
            max_retries: 5,
            ..GenConfig::default()
        };
        let solo = SceneConfig {
            distractors: 0,
            ..SceneConfig::default()
        };
        let err = collect_demos(&catalog, &gen, &solo, &tiny_world(), 1, 3, dir.path()).unwrap_err();
        match err {
            PipelineError::RetryExhausted { kind, stage, .. } => {
                assert_eq!(kind, "spatial");
                assert_eq!(stage, "spatial");
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn appearance_episodes_have_attribute_unique_targets() {
        let catalog = build_catalog(&CatalogConfig::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let gen = GenConfig {
            kinds: vec![InstructionKind::Appearance],
            ..GenConfig::default()
        };
        let manifest = collect_demos(
            &catalog,
            &gen,
            &small_scene_cfg(),
            &tiny_world(),
            3,
            9,
            dir.path(),
        )
        .unwrap();
        for meta in &manifest.episodes {
            let ep = crate::store::read_episode(&dir.path().join(&meta.path)).unwrap();
            let scene: Scene = serde_json::from_value(ep.scene.clone()).unwrap();
            assert_eq!(scene.objects.len(), 3);
            assert!(
                !ep.instruction
                    .contains(&scene.target_object().unwrap().category),
                "appearance instruction must not name the category: {:?}",
                ep.instruction
            );
        }
    }
}
