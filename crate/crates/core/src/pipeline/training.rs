//! Policy training on recorded demonstrations, plus grounder dataset
//! assembly and evaluation.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis, IxDyn};

use maskgrip_grad::{cosine_lr, Adam, Arr, Graph};

use crate::catalog::Catalog;
use crate::grounder::{
    ground_learned, ground_noisy, ground_oracle, miou_outputs, GrounderOutput, GrounderSample,
    LearnedGrounder, NoiseConfig,
};
use crate::instr::{default_scenario_table, InstructionKind};
use crate::nn::Bound;
use crate::policy::{
    init_policy, policy_forward, policy_loss_graph, Frame, LossRecord, PolicyConfig, PolicyModel,
};
use crate::rng::{chacha, derive, stream};
use crate::store::{dequantize_unit, read_episode};
use crate::world::{render, Observation, SceneConfig, WorldConfig};

use super::data::build_task;
use super::{DatasetManifest, MaskSource, PipelineError, TrainConfig};

/// An episode decoded for training.  Images and masks stay in their
/// stored byte form; frames are dequantized on access.
pub struct LoadedEpisode {
    pub instruction: String,
    pub category: String,
    pub seed: u64,
    images: Array4<u8>,
    mask_obj: Array3<u8>,
    mask_plc: Array3<u8>,
    states: Vec<[f64; 4]>,
    arms: Vec<[f64; 2]>,
    grips: Vec<f64>,
}

impl LoadedEpisode {
    pub fn from_episode(ep: crate::store::Episode) -> Self {
        let t = ep.steps();
        let states = (0..t)
            .map(|i| {
                [
                    f64::from(ep.states[[i, 0]]),
                    f64::from(ep.states[[i, 1]]),
                    f64::from(ep.states[[i, 2]]),
                    f64::from(ep.states[[i, 3]]),
                ]
            })
            .collect();
        let arms = (0..t)
            .map(|i| [f64::from(ep.actions[[i, 0]]), f64::from(ep.actions[[i, 1]])])
            .collect();
        let grips = (0..t).map(|i| f64::from(ep.actions[[i, 2]])).collect();
        LoadedEpisode {
            instruction: ep.instruction,
            category: ep.category,
            seed: ep.seed,
            images: ep.images,
            mask_obj: ep.mask_obj,
            mask_plc: ep.mask_plc,
            states,
            arms,
            grips,
        }
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Ok(Self::from_episode(read_episode(path)?))
    }

    pub fn steps(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn resolution(&self) -> usize {
        self.images.shape()[1]
    }

    /// Frame `t` dequantized to `[H, W, 3]` values in [0, 1].
    pub fn image(&self, t: usize) -> Array3<f64> {
        self.images.index_axis(Axis(0), t).mapv(dequantize_unit)
    }

    /// Ground-truth masks recorded at frame `t`.
    pub fn gt_masks(&self, t: usize) -> GrounderOutput {
        GrounderOutput::new(
            self.mask_obj.index_axis(Axis(0), t).to_owned(),
            self.mask_plc.index_axis(Axis(0), t).to_owned(),
        )
    }

    pub fn state(&self, t: usize) -> [f64; 4] {
        self.states[t]
    }

    /// The expert's arm displacement at frame `t`, in world units.
    pub fn arm(&self, t: usize) -> [f64; 2] {
        self.arms[t]
    }

    /// The expert's gripper command at frame `t`, 0.0 or 1.0.
    pub fn grip(&self, t: usize) -> f64 {
        self.grips[t]
    }
}

/// Read every episode listed in a manifest.
pub fn load_episodes(
    dir: &Path,
    manifest: &DatasetManifest,
) -> Result<Vec<LoadedEpisode>, PipelineError> {
    let mut out = Vec::with_capacity(manifest.episodes.len());
    for meta in &manifest.episodes {
        let ep = LoadedEpisode::load(&dir.join(&meta.path))?;
        if ep.steps() > 0 {
            out.push(ep);
        }
    }
    if out.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    Ok(out)
}

/// Concrete mask supplier behind a [`MaskSource`].  Training windows take
/// ground truth from the recorded episode; rollouts take it from the
/// rendered observation.
pub enum MaskProvider {
    Oracle,
    Learned(Box<LearnedGrounder>),
    Noisy(NoiseConfig),
    Empty,
}

impl MaskProvider {
    pub fn from_source(source: &MaskSource) -> Result<Self, PipelineError> {
        match source {
            MaskSource::Oracle => Ok(MaskProvider::Oracle),
            MaskSource::Learned { checkpoint } => {
                if !checkpoint.is_file() {
                    return Err(PipelineError::MissingCheckpoint(checkpoint.clone()));
                }
                Ok(MaskProvider::Learned(Box::new(LearnedGrounder::load(
                    checkpoint,
                )?)))
            }
            MaskSource::Noisy { noise } => Ok(MaskProvider::Noisy(*noise)),
            MaskSource::None => Ok(MaskProvider::Empty),
        }
    }

    fn empty(n: usize) -> GrounderOutput {
        GrounderOutput::new(Array2::zeros((n, n)), Array2::zeros((n, n)))
    }

    /// Masks for a training window whose oldest frame is `t`.  `seed`
    /// only feeds the noisy variant.
    pub fn window_masks(
        &self,
        ep: &LoadedEpisode,
        t: usize,
        seed: u64,
    ) -> Result<GrounderOutput, PipelineError> {
        match self {
            MaskProvider::Oracle => Ok(ep.gt_masks(t)),
            MaskProvider::Learned(model) => {
                Ok(ground_learned(model, &ep.image(t), &ep.instruction)?)
            }
            MaskProvider::Noisy(noise) => Ok(ground_noisy(&ep.gt_masks(t), noise, seed)),
            MaskProvider::Empty => Ok(Self::empty(ep.resolution())),
        }
    }

    /// Masks for a rollout's single grounding call.
    pub fn rollout_masks(
        &self,
        obs: &Observation,
        instruction: &str,
        seed: u64,
    ) -> Result<GrounderOutput, PipelineError> {
        match self {
            MaskProvider::Oracle => Ok(ground_oracle(obs)),
            MaskProvider::Learned(model) => Ok(ground_learned(model, &obs.image, instruction)?),
            MaskProvider::Noisy(noise) => Ok(ground_noisy(&ground_oracle(obs), noise, seed)),
            MaskProvider::Empty => Ok(Self::empty(obs.object_mask.nrows())),
        }
    }
}

/// A policy checkpoint together with its training curve.
pub struct TrainedPolicy {
    pub model: PolicyModel,
    /// Mean batch loss after each optimizer step.
    pub curve: Vec<LossRecord>,
}

struct WindowSpec {
    ep: usize,
    first: usize,
    t_end: usize,
    masks: GrounderOutput,
}

fn window_loss(
    model: &PolicyModel,
    world: &WorldConfig,
    episodes: &[LoadedEpisode],
    item: &WindowSpec,
) -> Result<(LossRecord, Vec<Arr>), PipelineError> {
    let cfg = &model.config;
    let ep = &episodes[item.ep];
    let images: Vec<Array3<f64>> = (item.first..=item.t_end).map(|t| ep.image(t)).collect();
    let frames: Vec<Frame> = images
        .iter()
        .enumerate()
        .map(|(j, image)| Frame {
            image,
            masks: &item.masks,
            state: ep.state(item.first + j),
        })
        .collect();

    let n_real = item.t_end - item.first + 1;
    let mut arm_target = Array2::<f64>::zeros((n_real, 2));
    let mut grip_target = Vec::with_capacity(n_real);
    for (row, t) in (item.first..=item.t_end).enumerate() {
        let a = ep.arm(t);
        arm_target[[row, 0]] = a[0] / world.a_max;
        arm_target[[row, 1]] = a[1] / world.a_max;
        grip_target.push(ep.grip(t));
    }

    let mut g = Graph::new();
    let b = Bound::new(&model.params, &mut g);
    let (pred, pad) = policy_forward(&mut g, &b, cfg, &frames, &ep.instruction)?;
    let valid: Vec<bool> = pad.iter().map(|&p| !p).collect();
    let (arm_l, grip_l, total) = policy_loss_graph(&mut g, &pred, &valid, &arm_target, &grip_target)?;
    let grads = g.backward(total);
    let flat: Vec<Arr> = (0..model.params.len())
        .map(|i| {
            let v = b.var(model.params.name(i));
            grads.get_or_zeros(v, model.params.value(i).shape())
        })
        .collect();
    let record = LossRecord {
        arm: g.value(arm_l)[IxDyn(&[])],
        gripper: g.value(grip_l)[IxDyn(&[])],
        total: g.value(total)[IxDyn(&[])],
    };
    Ok((record, flat))
}

/// Behaviour-clone the policy on a collected dataset.  Windows are drawn
/// by their final frame, so every frame of every episode is a valid
/// sample; frames before the episode start are left-padded.  Masks are
/// computed at each window's oldest frame and frozen across it, matching
/// the single grounding call of a rollout.  Arm targets are scaled by the
/// world's per-step clamp.  Gradients accumulate in sample-index order,
/// so results are identical with and without data parallelism.
pub fn train_policy(
    dir: &Path,
    manifest: &DatasetManifest,
    policy_cfg: &PolicyConfig,
    train: &TrainConfig,
    world: &WorldConfig,
    mask_source: &MaskSource,
    seed: u64,
) -> Result<TrainedPolicy, PipelineError> {
    policy_cfg
        .validate()
        .map_err(|e| PipelineError::BadConfig(e.to_string()))?;
    if train.batch_size == 0 || train.steps == 0 {
        return Err(PipelineError::BadConfig(
            "train.steps and train.batch_size must be positive".into(),
        ));
    }
    let episodes = load_episodes(dir, manifest)?;
    for ep in &episodes {
        if ep.resolution() != policy_cfg.image_size {
            return Err(PipelineError::BadConfig(format!(
                "episode resolution {} != policy image size {}",
                ep.resolution(),
                policy_cfg.image_size
            )));
        }
    }
    let provider = MaskProvider::from_source(mask_source)?;

    let mut model = init_policy(policy_cfg, derive(seed, stream::INIT))?;
    let mut adam = Adam::new(&model.params, train.learning_rate);
    let mut rng = chacha(derive(seed, stream::TRAIN));
    let noise_root = derive(seed, stream::NOISE);
    let mut learned_cache: HashMap<(usize, usize), GrounderOutput> = HashMap::new();
    let mut curve = Vec::with_capacity(train.steps);

    for step_i in 0..train.steps {
        if train.cosine_decay {
            adam.set_lr(cosine_lr(train.learning_rate, step_i, train.steps));
        }
        let mut batch = Vec::with_capacity(train.batch_size);
        for _ in 0..train.batch_size {
            use rand::Rng;
            let ep = rng.gen_range(0..episodes.len());
            let t_end = rng.gen_range(0..episodes[ep].steps());
            let first = t_end.saturating_sub(policy_cfg.history - 1);
            let masks = if matches!(provider, MaskProvider::Learned(_)) {
                match learned_cache.get(&(ep, first)) {
                    Some(m) => m.clone(),
                    None => {
                        let m = provider.window_masks(&episodes[ep], first, 0)?;
                        learned_cache.insert((ep, first), m.clone());
                        m
                    }
                }
            } else {
                let mask_seed = derive(derive(noise_root, ep as u64), first as u64);
                provider.window_masks(&episodes[ep], first, mask_seed)?
            };
            batch.push(WindowSpec {
                ep,
                first,
                t_end,
                masks,
            });
        }

        let results = crate::par::map_indexed(batch.len(), |i| {
            window_loss(&model, world, &episodes, &batch[i])
        });
        let scale = 1.0 / batch.len() as f64;
        let mut mean = LossRecord {
            arm: 0.0,
            gripper: 0.0,
            total: 0.0,
        };
        let mut grads: Vec<Arr> = model
            .params
            .iter()
            .map(|(_, v)| Arr::zeros(v.raw_dim()))
            .collect();
        for result in results {
            let (record, sample_grads) = result?;
            mean.arm += record.arm * scale;
            mean.gripper += record.gripper * scale;
            mean.total += record.total * scale;
            for (acc, g) in grads.iter_mut().zip(sample_grads) {
                acc.scaled_add(scale, &g);
            }
        }
        adam.step(&mut model.params, &grads);
        curve.push(mean);
    }
    Ok(TrainedPolicy { model, curve })
}

/// First frame of every episode in a manifest, paired with its
/// instruction and ground-truth masks: the grounder's training set.
pub fn build_grounder_dataset(
    dir: &Path,
    manifest: &DatasetManifest,
) -> Result<Vec<GrounderSample>, PipelineError> {
    let mut out = Vec::with_capacity(manifest.episodes.len());
    for meta in &manifest.episodes {
        let ep = LoadedEpisode::load(&dir.join(&meta.path))?;
        if ep.steps() == 0 {
            continue;
        }
        let masks = ep.gt_masks(0);
        out.push(GrounderSample {
            image: ep.image(0),
            instruction: ep.instruction.clone(),
            object_mask: masks.object_mask,
            placement_mask: masks.placement_mask,
        });
    }
    if out.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    Ok(out)
}

/// Fresh scenes and instructions rendered once: a held-out grounder
/// evaluation set that never touches the training episodes.
#[allow(clippy::too_many_arguments)]
pub fn grounder_eval_set(
    catalog: &Catalog,
    allowed: &[u32],
    kinds: &[InstructionKind],
    scene_cfg: &SceneConfig,
    image_size: usize,
    n_per_kind: usize,
    max_retries: usize,
    seed: u64,
) -> Result<Vec<GrounderSample>, PipelineError> {
    let table = default_scenario_table();
    let root = derive(seed, stream::EVAL);
    let mut out = Vec::with_capacity(kinds.len() * n_per_kind);
    for (ki, &kind) in kinds.iter().enumerate() {
        for i in 0..n_per_kind {
            let task_seed = derive(root, (ki * n_per_kind + i) as u64);
            let task = build_task(catalog, allowed, kind, scene_cfg, &table, max_retries, task_seed)?;
            let obs = render(&task.scene, image_size);
            out.push(GrounderSample {
                image: obs.image,
                instruction: task.instruction.text,
                object_mask: obs.object_mask,
                placement_mask: obs.placement_mask,
            });
        }
    }
    Ok(out)
}

/// Mean IoU of the learned grounder over a sample set, both channels
/// pooled.
pub fn evaluate_grounder(
    model: &LearnedGrounder,
    samples: &[GrounderSample],
) -> Result<f64, PipelineError> {
    if samples.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let mut predictions = Vec::with_capacity(samples.len());
    let mut truths = Vec::with_capacity(samples.len());
    for s in samples {
        predictions.push(ground_learned(model, &s.image, &s.instruction)?);
        truths.push(GrounderOutput::new(
            s.object_mask.clone(),
            s.placement_mask.clone(),
        ));
    }
    Ok(miou_outputs(&predictions, &truths)?)
}
