//! Deterministic 2D tabletop world.
//!
//! The table is the unit square with x rightward and y away from the robot;
//! placement regions sit along the far edge (y ≥ 0.70), objects spawn on
//! the counter area below them, and the gripper starts in a strip near the
//! robot edge.  The world is kinematic: a step moves the gripper by a
//! clamped displacement, a close command within the pick radius of an
//! object's footprint attaches it, and an open command releases it in
//! place.  All randomness is seeded and all state is plain data, so scenes,
//! renders, and noiseless rollouts are bit-reproducible.

pub mod expert;
pub mod render;

pub use expert::ScriptedExpert;
pub use render::{render, Observation};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::canon;
use crate::rng::{chacha, derive, stream};

/// Maximum distractor objects a scene may hold.
pub const MAX_DISTRACTORS: usize = 10;

/// Object spawn band (footprint-inclusive): below the regions, above the
/// gripper strip.
pub const SPAWN_Y: (f64, f64) = (0.10, 0.68);
pub const SPAWN_X: (f64, f64) = (0.02, 0.98);
/// Gripper spawn strip along the robot edge.
pub const GRIPPER_SPAWN_Y: (f64, f64) = (0.02, 0.08);
pub const GRIPPER_SPAWN_X: (f64, f64) = (0.30, 0.70);

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("scene-too-dense: no collision-free placement after {attempts} attempts")]
    SceneTooDense { attempts: usize },
    #[error("requested {requested} distractors, maximum is {max}")]
    TooManyDistractors { requested: usize, max: usize },
    #[error("catalog pool is empty")]
    EmptyCatalog,
    #[error("catalog pool has only {available} eligible entries, need {needed}")]
    InsufficientPool { available: usize, needed: usize },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FootprintKind {
    Disc,
    Square,
    Triangle,
}

/// Object footprint: a convex shape centered on the object position with a
/// characteristic radius (disc radius, square half-side, triangle
/// circumradius).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Footprint {
    pub kind: FootprintKind,
    pub radius: f64,
}

impl Footprint {
    /// Signed distance from the footprint boundary at offset `(dx, dy)`
    /// from the object center; negative inside.
    pub fn sdf(&self, dx: f64, dy: f64) -> f64 {
        match self.kind {
            FootprintKind::Disc => (dx * dx + dy * dy).sqrt() - self.radius,
            FootprintKind::Square => dx.abs().max(dy.abs()) - self.radius,
            FootprintKind::Triangle => {
                // Equilateral triangle, apex up, vertices at circumradius r,
                // listed counter-clockwise.
                let r = self.radius;
                let verts = [
                    (0.0, r),
                    (-r * 0.866_025_403_784_438_6, -0.5 * r),
                    (r * 0.866_025_403_784_438_6, -0.5 * r),
                ];
                convex_polygon_sdf(&verts, dx, dy)
            }
        }
    }

    pub fn contains(&self, dx: f64, dy: f64) -> bool {
        self.sdf(dx, dy) <= 0.0
    }

    /// Radius of the smallest circle covering the footprint; used for
    /// conservative collision checks and raster bounding boxes.
    pub fn bounding_radius(&self) -> f64 {
        match self.kind {
            FootprintKind::Disc | FootprintKind::Triangle => self.radius,
            FootprintKind::Square => self.radius * std::f64::consts::SQRT_2,
        }
    }
}

/// Signed distance to a convex polygon given counter-clockwise vertices.
fn convex_polygon_sdf(verts: &[(f64, f64)], px: f64, py: f64) -> f64 {
    let n = verts.len();
    let mut max_halfplane = f64::NEG_INFINITY;
    let mut min_segment = f64::INFINITY;
    let mut inside = true;
    for i in 0..n {
        let (ax, ay) = verts[i];
        let (bx, by) = verts[(i + 1) % n];
        let (ex, ey) = (bx - ax, by - ay);
        let (wx, wy) = (px - ax, py - ay);
        // Outward normal of a CCW edge points right of the edge direction.
        let len = (ex * ex + ey * ey).sqrt();
        let halfplane = (wx * ey - wy * ex) / len;
        max_halfplane = max_halfplane.max(halfplane);
        if halfplane > 0.0 {
            inside = false;
        }
        let t = ((wx * ex + wy * ey) / (len * len)).clamp(0.0, 1.0);
        let (cx, cy) = (ax + t * ex - px, ay + t * ey - py);
        min_segment = min_segment.min((cx * cx + cy * cy).sqrt());
    }
    if inside {
        max_halfplane
    } else {
        min_segment
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrKey {
    Color,
    Shape,
    Material,
    Size,
}

impl AttrKey {
    pub const ALL: [AttrKey; 4] = [
        AttrKey::Color,
        AttrKey::Shape,
        AttrKey::Material,
        AttrKey::Size,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttrKey::Color => "color",
            AttrKey::Shape => "shape",
            AttrKey::Material => "material",
            AttrKey::Size => "size",
        }
    }
}

/// One attribute as a lowercase keyword plus a descriptive phrase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttrValue {
    pub keyword: String,
    pub phrase: String,
}

/// The four attributes every object carries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attributes {
    pub color: AttrValue,
    pub shape: AttrValue,
    pub material: AttrValue,
    pub size: AttrValue,
}

impl Attributes {
    pub fn get(&self, key: AttrKey) -> &AttrValue {
        match key {
            AttrKey::Color => &self.color,
            AttrKey::Shape => &self.shape,
            AttrKey::Material => &self.material,
            AttrKey::Size => &self.size,
        }
    }
}

/// Everything the world needs to instantiate an object; the catalog carries
/// one of these per entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectBlueprint {
    pub category: String,
    pub attributes: Attributes,
    pub footprint: Footprint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectInstance {
    pub id: u32,
    pub category: String,
    pub attributes: Attributes,
    pub position: [f64; 2],
    pub footprint: Footprint,
    pub held: bool,
}

impl ObjectInstance {
    pub fn sdf_at(&self, point: [f64; 2]) -> f64 {
        self.footprint
            .sdf(point[0] - self.position[0], point[1] - self.position[1])
    }

    pub fn contains(&self, point: [f64; 2]) -> bool {
        self.sdf_at(point) <= 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementRegion {
    pub id: u32,
    pub name: String,
    /// `[x0, y0, x1, y1]` with `x0 < x1`, `y0 < y1`.
    pub bounds: [f64; 4],
}

impl PlacementRegion {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.bounds[0]
            && p[0] <= self.bounds[2]
            && p[1] >= self.bounds[1]
            && p[1] <= self.bounds[3]
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.bounds[0] + self.bounds[2]),
            0.5 * (self.bounds[1] + self.bounds[3]),
        ]
    }
}

/// The three default placement regions along the far edge.
pub fn default_regions() -> Vec<PlacementRegion> {
    vec![
        PlacementRegion {
            id: 0,
            name: "sink".into(),
            bounds: [0.05, 0.70, 0.35, 0.95],
        },
        PlacementRegion {
            id: 1,
            name: "stove".into(),
            bounds: [0.40, 0.70, 0.60, 0.95],
        },
        PlacementRegion {
            id: 2,
            name: "shelf".into(),
            bounds: [0.65, 0.70, 0.95, 0.95],
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotState {
    pub gripper: [f64; 2],
    pub grip_closed: bool,
    pub held_object: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub object_id: u32,
    pub region_id: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub objects: Vec<ObjectInstance>,
    pub regions: Vec<PlacementRegion>,
    pub robot: RobotState,
    pub target: TargetSpec,
    pub seed: u64,
}

impl Scene {
    pub fn object(&self, id: u32) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn object_mut(&mut self, id: u32) -> Option<&mut ObjectInstance> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    pub fn target_object(&self) -> Option<&ObjectInstance> {
        self.object(self.target.object_id)
    }

    pub fn target_region(&self) -> Option<&PlacementRegion> {
        self.regions.iter().find(|r| r.id == self.target.region_id)
    }

    /// Canonical JSON (sorted keys, 9-significant-digit floats); byte
    /// equality of two scenes' canonical forms is the determinism contract.
    pub fn to_canonical_json(&self) -> String {
        canon::to_canonical_json(self)
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if self.objects.len() > MAX_DISTRACTORS + 1 {
            return Err(WorldError::InvalidScene(format!(
                "{} objects exceeds target + {MAX_DISTRACTORS} distractors",
                self.objects.len()
            )));
        }
        if self.target_object().is_none() {
            return Err(WorldError::InvalidScene("target object id missing".into()));
        }
        if self.target_region().is_none() {
            return Err(WorldError::InvalidScene("target region id missing".into()));
        }
        for o in &self.objects {
            if o.footprint.radius <= 0.0 {
                return Err(WorldError::InvalidScene(format!(
                    "object {} has non-positive radius",
                    o.id
                )));
            }
            if !(0.0..=1.0).contains(&o.position[0]) || !(0.0..=1.0).contains(&o.position[1]) {
                return Err(WorldError::InvalidScene(format!(
                    "object {} outside table bounds",
                    o.id
                )));
            }
        }
        for (i, a) in self.objects.iter().enumerate() {
            for b in &self.objects[i + 1..] {
                if a.held || b.held {
                    continue;
                }
                let d = dist(a.position, b.position);
                if d <= a.footprint.bounding_radius() + b.footprint.bounding_radius() {
                    return Err(WorldError::InvalidScene(format!(
                        "objects {} and {} overlap",
                        a.id, b.id
                    )));
                }
            }
        }
        for r in &self.regions {
            let [x0, y0, x1, y1] = r.bounds;
            if !(x0 < x1 && y0 < y1 && x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0) {
                return Err(WorldError::InvalidScene(format!(
                    "region {} has invalid bounds",
                    r.id
                )));
            }
        }
        for (i, a) in self.regions.iter().enumerate() {
            for b in &self.regions[i + 1..] {
                let overlap_x = a.bounds[0] < b.bounds[2] && b.bounds[0] < a.bounds[2];
                let overlap_y = a.bounds[1] < b.bounds[3] && b.bounds[1] < a.bounds[3];
                if overlap_x && overlap_y {
                    return Err(WorldError::InvalidScene(format!(
                        "regions {} and {} overlap",
                        a.id, b.id
                    )));
                }
            }
        }
        if self.robot.held_object.is_some() && !self.robot.grip_closed {
            return Err(WorldError::InvalidScene(
                "held object with open gripper".into(),
            ));
        }
        Ok(())
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Action {
    /// Continuous arm displacement, clamped per component to ±a_max.
    pub arm: [f64; 2],
    /// Binary gripper command: true = close, false = open.
    pub grip_close: bool,
}

impl Action {
    pub const NOOP: Action = Action {
        arm: [0.0, 0.0],
        grip_close: false,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Rendered image side in pixels (square frames).
    pub image_size: usize,
    /// Per-component arm displacement limit, table units per step.
    pub a_max: f64,
    /// A close command attaches the nearest object whose footprint signed
    /// distance is at most this radius.
    pub pick_radius: f64,
    /// Episode cap; evaluation truncation counts as failure.
    pub t_max: usize,
    /// Gaussian noise sigma on scripted-expert arm actions.
    pub expert_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            a_max: 0.05,
            pick_radius: 0.03,
            t_max: 80,
            expert_noise: 0.003,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Distractor object count, at most [`MAX_DISTRACTORS`].
    pub distractors: usize,
    /// Placement attempts before giving up on a scene.
    pub n_retry: usize,
    /// Placement regions available to scenes.
    pub regions: Vec<PlacementRegion>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            distractors: 4,
            n_retry: 1000,
            regions: default_regions(),
        }
    }
}

/// Sample a collision-free scene.  The target blueprint is drawn uniformly
/// from `pool` and distractors are drawn without replacement from the
/// remaining entries, excluding the target's category so referring
/// instructions stay unambiguous.  Pass `forced` to pin the target and/or
/// distractor pool indices (the instruction pipeline pre-selects them).
pub fn sample_scene(
    pool: &[ObjectBlueprint],
    cfg: &SceneConfig,
    seed: u64,
) -> Result<Scene, WorldError> {
    sample_scene_with(pool, cfg, seed, None)
}

/// Pre-selected blueprint indices for [`sample_scene_with`].
#[derive(Clone, Debug, Default)]
pub struct ForcedChoices {
    pub target_index: Option<usize>,
    pub distractor_indices: Option<Vec<usize>>,
    pub region_id: Option<u32>,
}

pub fn sample_scene_with(
    pool: &[ObjectBlueprint],
    cfg: &SceneConfig,
    seed: u64,
    forced: Option<&ForcedChoices>,
) -> Result<Scene, WorldError> {
    if pool.is_empty() {
        return Err(WorldError::EmptyCatalog);
    }
    if cfg.distractors > MAX_DISTRACTORS {
        return Err(WorldError::TooManyDistractors {
            requested: cfg.distractors,
            max: MAX_DISTRACTORS,
        });
    }
    let mut rng = chacha(derive(seed, stream::SCENE));
    let none = ForcedChoices::default();
    let forced = forced.unwrap_or(&none);

    let target_idx = match forced.target_index {
        Some(i) => i,
        None => rng.gen_range(0..pool.len()),
    };
    let target_bp = &pool[target_idx];

    let distractor_idxs: Vec<usize> = match &forced.distractor_indices {
        Some(v) => v.clone(),
        None => {
            let mut eligible: Vec<usize> = (0..pool.len())
                .filter(|&i| i != target_idx && pool[i].category != target_bp.category)
                .collect();
            if eligible.len() < cfg.distractors {
                return Err(WorldError::InsufficientPool {
                    available: eligible.len(),
                    needed: cfg.distractors,
                });
            }
            // Partial Fisher-Yates for a seeded sample without replacement.
            for i in 0..cfg.distractors {
                let j = rng.gen_range(i..eligible.len());
                eligible.swap(i, j);
            }
            eligible.truncate(cfg.distractors);
            eligible
        }
    };

    let region_id = match forced.region_id {
        Some(r) => r,
        None => cfg.regions[rng.gen_range(0..cfg.regions.len())].id,
    };

    // Place target first, then distractors, rejecting collisions.
    let mut objects: Vec<ObjectInstance> = Vec::with_capacity(1 + distractor_idxs.len());
    let mut attempts = 0usize;
    for (slot, &bp_idx) in std::iter::once(&target_idx)
        .chain(distractor_idxs.iter())
        .enumerate()
    {
        let bp = &pool[bp_idx];
        let br = bp.footprint.bounding_radius();
        let (y_lo, y_hi) = (SPAWN_Y.0 + br, SPAWN_Y.1 - br);
        let (x_lo, x_hi) = ((SPAWN_X.0 + br).max(br), (SPAWN_X.1 - br).min(1.0 - br));
        let mut placed = false;
        while attempts < cfg.n_retry {
            attempts += 1;
            let pos = [rng.gen_range(x_lo..x_hi), rng.gen_range(y_lo..y_hi)];
            let collides = objects.iter().any(|o| {
                dist(o.position, pos) <= o.footprint.bounding_radius() + br + 0.01
            });
            if !collides {
                objects.push(ObjectInstance {
                    id: slot as u32,
                    category: bp.category.clone(),
                    attributes: bp.attributes.clone(),
                    position: pos,
                    footprint: bp.footprint.clone(),
                    held: false,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(WorldError::SceneTooDense { attempts });
        }
    }

    let robot = RobotState {
        gripper: [
            rng.gen_range(GRIPPER_SPAWN_X.0..GRIPPER_SPAWN_X.1),
            rng.gen_range(GRIPPER_SPAWN_Y.0..GRIPPER_SPAWN_Y.1),
        ],
        grip_closed: false,
        held_object: None,
    };

    let scene = Scene {
        objects,
        regions: cfg.regions.clone(),
        robot,
        target: TargetSpec {
            object_id: 0,
            region_id,
        },
        seed,
    };
    scene.validate()?;
    Ok(scene)
}

/// The object a close command would attach at `point`: smallest footprint
/// signed distance within `pick_radius`, ties broken by lowest id.
pub fn nearest_attachable(scene: &Scene, point: [f64; 2], pick_radius: f64) -> Option<u32> {
    let mut best: Option<(f64, u32)> = None;
    for o in &scene.objects {
        let d = o.sdf_at(point);
        if d <= pick_radius {
            let better = match best {
                None => true,
                Some((bd, bid)) => d < bd || (d == bd && o.id < bid),
            };
            if better {
                best = Some((d, o.id));
            }
        }
    }
    best.map(|(_, id)| id)
}

/// Events produced by one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepEvents {
    /// Gripper point inside the target footprint after the move, or the
    /// target was attached this step (attachment from the pick ring counts
    /// as contact, keeping success ⇒ contact).
    pub contact: bool,
    pub attached: Option<u32>,
    pub released: Option<u32>,
}

/// Advance the world by one action: clamped move, clip to table, then the
/// grip command (close attaches the nearest object within the pick radius;
/// open releases in place).  Total: every action is legal.
pub fn step(scene: &mut Scene, cfg: &WorldConfig, action: &Action) -> StepEvents {
    let mut events = StepEvents::default();
    let dx = action.arm[0].clamp(-cfg.a_max, cfg.a_max);
    let dy = action.arm[1].clamp(-cfg.a_max, cfg.a_max);
    let g = &mut scene.robot.gripper;
    g[0] = (g[0] + dx).clamp(0.0, 1.0);
    g[1] = (g[1] + dy).clamp(0.0, 1.0);
    let gripper = *g;

    if let Some(id) = scene.robot.held_object {
        if let Some(obj) = scene.object_mut(id) {
            obj.position = gripper;
        }
    }

    if action.grip_close {
        scene.robot.grip_closed = true;
        if scene.robot.held_object.is_none() {
            if let Some(id) = nearest_attachable(scene, gripper, cfg.pick_radius) {
                scene.robot.held_object = Some(id);
                if let Some(obj) = scene.object_mut(id) {
                    obj.held = true;
                    obj.position = gripper;
                }
                events.attached = Some(id);
            }
        }
    } else {
        if let Some(id) = scene.robot.held_object.take() {
            if let Some(obj) = scene.object_mut(id) {
                obj.held = false;
            }
            events.released = Some(id);
        }
        scene.robot.grip_closed = false;
    }

    let target_contact = scene
        .target_object()
        .is_some_and(|t| t.contains(scene.robot.gripper));
    let target_attached = events.attached == Some(scene.target.object_id);
    events.contact = target_contact || target_attached;
    events
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Judgment {
    pub contact: bool,
    pub success: bool,
}

/// Judge a finished trajectory: `contact_seen` accumulates per-step contact
/// events; success requires the target centroid inside the placement bounds
/// with the gripper open and empty.
pub fn judge(final_scene: &Scene, contact_seen: bool) -> Judgment {
    let success = match (final_scene.target_object(), final_scene.target_region()) {
        (Some(obj), Some(region)) => {
            region.contains(obj.position)
                && !final_scene.robot.grip_closed
                && final_scene.robot.held_object.is_none()
        }
        _ => false,
    };
    Judgment {
        contact: contact_seen,
        success,
    }
}

/// Replay an action sequence from `scene` and judge the result.
pub fn run_trajectory(
    mut scene: Scene,
    cfg: &WorldConfig,
    actions: &[Action],
) -> (Judgment, Scene) {
    let mut contact = false;
    for a in actions {
        contact |= step(&mut scene, cfg, a).contact;
    }
    (judge(&scene, contact), scene)
}
