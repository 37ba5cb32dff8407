//! Scripted pick-and-place expert.
//!
//! The phase is re-derived from the scene every call, so the controller
//! recovers from noise perturbations: approach the target until the
//! gripper is within closing range, close to attach, carry to the
//! placement region center, open to release, then idle.  Arm actions get
//! optional Gaussian noise and are clamped per component to the action
//! limit; the trailing noiseless controller keeps demonstrations succeeding
//! at the default noise level.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::rng::{chacha, derive, stream};

use super::{Action, Scene, WorldConfig};

pub struct ScriptedExpert {
    rng: ChaCha8Rng,
    noise: Normal<f64>,
}

/// Close once the gripper is this deep inside the pick ring; a fraction of
/// the pick radius leaves slack for noise on the final approach step.
const CLOSE_AT: f64 = 0.5;
/// Release once within this distance of the region center.
const RELEASE_AT: f64 = 0.02;

impl ScriptedExpert {
    pub fn new(seed: u64, noise_sigma: f64) -> Self {
        Self {
            rng: chacha(derive(seed, stream::EXPERT)),
            noise: Normal::new(0.0, noise_sigma.max(0.0)).expect("sigma is non-negative"),
        }
    }

    /// Next action for the current scene.  Returns `None` once the task is
    /// complete (target released inside the region).
    pub fn next_action(&mut self, scene: &Scene, cfg: &WorldConfig) -> Option<Action> {
        let target = scene.target_object()?;
        let region = scene.target_region()?;
        let gripper = scene.robot.gripper;
        let holding_target = scene.robot.held_object == Some(target.id);

        if !holding_target {
            if let Some(held) = scene.robot.held_object {
                // Wrong object in hand (possible after a noisy grab near a
                // cluttered target): drop it where it is and start over.
                debug_assert_ne!(held, target.id);
                return Some(Action {
                    arm: [0.0, 0.0],
                    grip_close: false,
                });
            }
            if region.contains(target.position) {
                return None;
            }
            let sdf = target.sdf_at(gripper);
            let would_grab =
                super::nearest_attachable(scene, gripper, cfg.pick_radius) == Some(target.id);
            if sdf <= cfg.pick_radius * CLOSE_AT && would_grab {
                return Some(Action {
                    arm: [0.0, 0.0],
                    grip_close: true,
                });
            }
            return Some(self.move_toward(gripper, target.position, cfg, false));
        }

        let center = region.center();
        let d = ((gripper[0] - center[0]).powi(2) + (gripper[1] - center[1]).powi(2)).sqrt();
        if d <= RELEASE_AT {
            return Some(Action {
                arm: [0.0, 0.0],
                grip_close: false,
            });
        }
        Some(self.move_toward(gripper, center, cfg, true))
    }

    fn move_toward(
        &mut self,
        from: [f64; 2],
        to: [f64; 2],
        cfg: &WorldConfig,
        keep_closed: bool,
    ) -> Action {
        let mut arm = [to[0] - from[0], to[1] - from[1]];
        for a in &mut arm {
            *a = a.clamp(-cfg.a_max, cfg.a_max);
            *a = (*a + self.noise.sample(&mut self.rng)).clamp(-cfg.a_max, cfg.a_max);
        }
        Action {
            arm,
            grip_close: keep_closed,
        }
    }

    /// Expose the rng for callers that interleave other draws.
    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Run the expert to completion, returning the executed actions and the
/// judgment.  Stops at the episode cap or when the expert signals done.
pub fn run_expert(
    scene: &mut Scene,
    cfg: &WorldConfig,
    seed: u64,
) -> (Vec<Action>, super::Judgment) {
    let mut expert = ScriptedExpert::new(seed, cfg.expert_noise);
    let mut actions = Vec::new();
    let mut contact = false;
    for _ in 0..cfg.t_max {
        let Some(action) = expert.next_action(scene, cfg) else {
            break;
        };
        contact |= super::step(scene, cfg, &action).contact;
        actions.push(action);
    }
    (actions, super::judge(scene, contact))
}

#[cfg(test)]
mod tests {
    use super::super::testutil::simple_scene;
    use super::super::{sample_scene, SceneConfig, WorldConfig};
    use super::*;
    use crate::world::testutil::blueprint;
    use crate::world::FootprintKind;

    #[test]
    fn expert_completes_simple_scene_within_cap() {
        let mut scene = simple_scene();
        let cfg = WorldConfig::default();
        let (actions, judgment) = run_expert(&mut scene, &cfg, 5);
        assert!(judgment.success, "expert failed in {} steps", actions.len());
        assert!(judgment.contact);
        assert!(actions.len() < cfg.t_max);
    }

    #[test]
    fn noiseless_expert_is_bit_reproducible() {
        let cfg = WorldConfig {
            expert_noise: 0.0,
            ..WorldConfig::default()
        };
        let mut a = simple_scene();
        let mut b = simple_scene();
        let (acts_a, _) = run_expert(&mut a, &cfg, 9);
        let (acts_b, _) = run_expert(&mut b, &cfg, 9);
        assert_eq!(acts_a, acts_b);
        assert_eq!(a.to_canonical_json(), b.to_canonical_json());
    }

    #[test]
    fn expert_succeeds_across_sampled_scenes_at_default_noise() {
        let pool: Vec<_> = (0..12)
            .map(|i| {
                let kind = match i % 3 {
                    0 => FootprintKind::Disc,
                    1 => FootprintKind::Square,
                    _ => FootprintKind::Triangle,
                };
                blueprint(&format!("cat{i}"), kind, 0.05 + 0.004 * (i % 4) as f64)
            })
            .collect();
        let scene_cfg = SceneConfig::default();
        let cfg = WorldConfig::default();
        let mut successes = 0;
        let total = 40;
        for seed in 0..total {
            let mut scene = sample_scene(&pool, &scene_cfg, 1000 + seed).unwrap();
            let (_, judgment) = run_expert(&mut scene, &cfg, 2000 + seed);
            if judgment.success {
                successes += 1;
            }
        }
        assert!(
            successes >= total - 1,
            "expert succeeded on only {successes}/{total} scenes"
        );
    }

    #[test]
    fn success_implies_contact_on_every_expert_run() {
        let pool: Vec<_> = (0..8)
            .map(|i| blueprint(&format!("c{i}"), FootprintKind::Disc, 0.06))
            .collect();
        let scene_cfg = SceneConfig::default();
        let cfg = WorldConfig::default();
        for seed in 0..20 {
            let mut scene = sample_scene(&pool, &scene_cfg, 7000 + seed).unwrap();
            let (_, judgment) = run_expert(&mut scene, &cfg, 7100 + seed);
            if judgment.success {
                assert!(judgment.contact);
            }
        }
    }
}
