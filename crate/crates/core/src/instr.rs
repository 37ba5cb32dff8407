//! Instruction generators and diversity metrics.
//!
//! Four generators bind natural-language instructions to scenes: easy
//! (category + region templates), appearance (a seeded unique attribute,
//! never the category name), spatial (nearest object in a 30-degree
//! direction cone from a category-unique reference), and commonsense (a
//! curated scenario table keyed by category, with an optional remote
//! text-generation hook).  All generators are pure functions of
//! (scene, catalog, seed).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{filter_unique_attribute, find_entry, rank_distractors, Catalog};
use crate::embed::{cosine, EmbeddingProvider};
use crate::remote::TextGenClient;
use crate::rng::{chacha, derive, stream};
use crate::world::{AttrKey, Scene};

#[derive(Debug, thiserror::Error)]
pub enum InstrError {
    #[error("no-unique-attribute: every attribute keyword of the target is shared in the scene")]
    NoUniqueAttribute,
    #[error("no-spatial-relation: no (reference, direction) pair satisfies the cone predicates")]
    NoSpatialRelation,
    #[error("no-scenario: no unique-affordance scenario available for the target")]
    NoScenario,
    #[error("scene target has no matching catalog entry")]
    TargetNotInCatalog,
    #[error("scene is missing its target object or region")]
    IncompleteScene,
    #[error("diversity metrics need at least 2 instructions, got {0}")]
    TooFewInstructions(usize),
    #[error("text generation client: {0}")]
    Client(#[from] crate::remote::RemoteError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionKind {
    Easy,
    Appearance,
    Spatial,
    Commonsense,
}

impl InstructionKind {
    pub const ALL: [InstructionKind; 4] = [
        InstructionKind::Easy,
        InstructionKind::Appearance,
        InstructionKind::Spatial,
        InstructionKind::Commonsense,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InstructionKind::Easy => "easy",
            InstructionKind::Appearance => "appearance",
            InstructionKind::Spatial => "spatial",
            InstructionKind::Commonsense => "commonsense",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instruction {
    pub text: String,
    pub kind: InstructionKind,
    pub target_object_id: u32,
    pub region_id: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
    Front,
    Behind,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Left,
        Direction::Right,
        Direction::Front,
        Direction::Behind,
    ];

    /// Unit vector in the robot frame (x rightward, y away from the robot).
    pub fn unit(self) -> [f64; 2] {
        match self {
            Direction::Left => [-1.0, 0.0],
            Direction::Right => [1.0, 0.0],
            Direction::Front => [0.0, 1.0],
            Direction::Behind => [0.0, -1.0],
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            Direction::Left => "to the left of",
            Direction::Right => "to the right of",
            Direction::Front => "in front of",
            Direction::Behind => "behind",
        }
    }
}

/// A validated spatial reference: the bound scene's target lies inside the
/// 30-degree cone from the reference along the direction, closer than any
/// other object in that cone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialRelation {
    pub reference_id: u32,
    pub direction: Direction,
}

/// cos 30°, the inclusive cone half-angle bound.
pub const COS_CONE_HALF_ANGLE: f64 = 0.866_025_403_784_438_6;

const EASY_TEMPLATES: [&str; 3] = [
    "pick the {cat} from the counter and place it in the {reg}",
    "take the {cat} off the counter and put it in the {reg}",
    "move the {cat} from the counter to the {reg}",
];

const APPEARANCE_TEMPLATES: [&str; 3] = [
    "pick up the {phrase} object and place it in the {reg}",
    "find the {phrase} object and put it in the {reg}",
    "grab the {phrase} object and move it to the {reg}",
];

const SPATIAL_TEMPLATES: [&str; 2] = [
    "pick the object {dir} the {cat} and place it in the {reg}",
    "grab the object {dir} the {cat} and put it in the {reg}",
];

fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in pairs {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

/// Category + region template instruction with a seeded choice among the
/// three fixed phrasings.
pub fn gen_easy(scene: &Scene, seed: u64) -> Result<Instruction, InstrError> {
    let target = scene.target_object().ok_or(InstrError::IncompleteScene)?;
    let region = scene.target_region().ok_or(InstrError::IncompleteScene)?;
    let mut rng = chacha(derive(seed, stream::INSTRUCTION));
    let template = EASY_TEMPLATES[rng.gen_range(0..EASY_TEMPLATES.len())];
    Ok(Instruction {
        text: fill(template, &[("cat", &target.category), ("reg", &region.name)]),
        kind: InstructionKind::Easy,
        target_object_id: target.id,
        region_id: region.id,
    })
}

/// Attribute-referenced instruction.  Picks one attribute key seeded
/// uniformly among those whose target keyword is unique within the scene,
/// phrases the target by that attribute only, and returns the catalog-wide
/// ranked distractor ids for that key (the scene builder swaps them in).
pub fn gen_appearance(
    scene: &Scene,
    catalog: &Catalog,
    provider: &dyn EmbeddingProvider,
    seed: u64,
) -> Result<(Instruction, Vec<u32>), InstrError> {
    let target = scene.target_object().ok_or(InstrError::IncompleteScene)?;
    let region = scene.target_region().ok_or(InstrError::IncompleteScene)?;
    let entry = find_entry(catalog, &target.category, &target.attributes)
        .ok_or(InstrError::TargetNotInCatalog)?;

    let unique_keys: Vec<AttrKey> = AttrKey::ALL
        .into_iter()
        .filter(|&key| {
            let kw = &target.attributes.get(key).keyword;
            scene
                .objects
                .iter()
                .all(|o| o.id == target.id || &o.attributes.get(key).keyword != kw)
        })
        .collect();
    if unique_keys.is_empty() {
        return Err(InstrError::NoUniqueAttribute);
    }

    let mut rng = chacha(derive(seed, stream::INSTRUCTION));
    let key = unique_keys[rng.gen_range(0..unique_keys.len())];
    let template = APPEARANCE_TEMPLATES[rng.gen_range(0..APPEARANCE_TEMPLATES.len())];

    let filtered = filter_unique_attribute(entry, key, &catalog.entries);
    let want = scene.objects.len().saturating_sub(1);
    let ranked = rank_distractors(entry, &filtered, provider, want);
    let distractor_ids: Vec<u32> = ranked.iter().map(|e| e.id).collect();

    let phrase = &target.attributes.get(key).phrase;
    let instruction = Instruction {
        text: fill(template, &[("phrase", phrase), ("reg", &region.name)]),
        kind: InstructionKind::Appearance,
        target_object_id: target.id,
        region_id: region.id,
    };
    Ok((instruction, distractor_ids))
}

/// All (reference, direction) pairs for which the scene's target is a
/// valid spatial referent.
fn valid_spatial_pairs(scene: &Scene) -> Vec<SpatialRelation> {
    let Some(target) = scene.target_object() else {
        return Vec::new();
    };
    let mut pairs = Vec::new();
    for reference in &scene.objects {
        if reference.id == target.id {
            continue;
        }
        let unique = scene
            .objects
            .iter()
            .filter(|o| o.category == reference.category)
            .count()
            == 1;
        if !unique {
            continue;
        }
        for direction in Direction::ALL {
            if in_cone(reference.position, direction, target.position)
                && nearest_in_cone(scene, reference.position, direction)
                    == Some((distance(reference.position, target.position), target.id))
            {
                pairs.push(SpatialRelation {
                    reference_id: reference.id,
                    direction,
                });
            }
        }
    }
    pairs
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn in_cone(origin: [f64; 2], direction: Direction, point: [f64; 2]) -> bool {
    let v = [point[0] - origin[0], point[1] - origin[1]];
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if n == 0.0 {
        return false;
    }
    let d = direction.unit();
    (v[0] * d[0] + v[1] * d[1]) / n >= COS_CONE_HALF_ANGLE
}

/// Strictly nearest object in the cone, or None on emptiness or a distance
/// tie (a tie means "the nearest" is ill-defined, disqualifying the pair).
fn nearest_in_cone(scene: &Scene, origin: [f64; 2], direction: Direction) -> Option<(f64, u32)> {
    let mut best: Option<(f64, u32)> = None;
    let mut tied = false;
    for o in &scene.objects {
        if o.position == origin || !in_cone(origin, direction, o.position) {
            continue;
        }
        let d = distance(origin, o.position);
        match best {
            None => best = Some((d, o.id)),
            Some((bd, _)) if d < bd => {
                best = Some((d, o.id));
                tied = false;
            }
            Some((bd, _)) if d == bd => tied = true,
            _ => {}
        }
    }
    if tied {
        None
    } else {
        best
    }
}

/// Spatial-reference instruction: target described only by its relation to
/// a category-unique reference object.
pub fn gen_spatial(scene: &Scene, seed: u64) -> Result<Instruction, InstrError> {
    let target = scene.target_object().ok_or(InstrError::IncompleteScene)?;
    let region = scene.target_region().ok_or(InstrError::IncompleteScene)?;
    let pairs = valid_spatial_pairs(scene);
    if pairs.is_empty() {
        return Err(InstrError::NoSpatialRelation);
    }
    let mut rng = chacha(derive(seed, stream::INSTRUCTION));
    let pair = pairs[rng.gen_range(0..pairs.len())];
    let template = SPATIAL_TEMPLATES[rng.gen_range(0..SPATIAL_TEMPLATES.len())];
    let reference = scene
        .object(pair.reference_id)
        .ok_or(InstrError::IncompleteScene)?;
    Ok(Instruction {
        text: fill(
            template,
            &[
                ("dir", pair.direction.phrase()),
                ("cat", &reference.category),
                ("reg", &region.name),
            ],
        ),
        kind: InstructionKind::Spatial,
        target_object_id: target.id,
        region_id: region.id,
    })
}

/// Exhaustive brute-force enumeration of every valid (reference,
/// direction, target) triple, for verifying gen_spatial in tests.  Written
/// against the angle formulation rather than the dot-product one so the
/// two implementations fail independently.
pub fn spatial_oracle(scene: &Scene) -> Vec<(u32, Direction, u32)> {
    let mut out = Vec::new();
    for reference in &scene.objects {
        let same_category = scene
            .objects
            .iter()
            .filter(|o| o.category == reference.category)
            .count();
        if same_category != 1 {
            continue;
        }
        for direction in Direction::ALL {
            let d = direction.unit();
            let axis_angle = d[1].atan2(d[0]);
            for candidate in &scene.objects {
                if candidate.id == reference.id {
                    continue;
                }
                let v = [
                    candidate.position[0] - reference.position[0],
                    candidate.position[1] - reference.position[1],
                ];
                let r = (v[0] * v[0] + v[1] * v[1]).sqrt();
                if r == 0.0 {
                    continue;
                }
                let mut angle = (v[1].atan2(v[0]) - axis_angle).abs();
                if angle > std::f64::consts::PI {
                    angle = 2.0 * std::f64::consts::PI - angle;
                }
                if angle.to_degrees() > 30.0 + 1e-9 {
                    continue;
                }
                // Candidate must be strictly nearer than every other
                // object inside the same cone.
                let blocked = scene.objects.iter().any(|other| {
                    if other.id == candidate.id || other.id == reference.id {
                        return false;
                    }
                    let w = [
                        other.position[0] - reference.position[0],
                        other.position[1] - reference.position[1],
                    ];
                    let wr = (w[0] * w[0] + w[1] * w[1]).sqrt();
                    if wr == 0.0 {
                        return false;
                    }
                    let mut wa = (w[1].atan2(w[0]) - axis_angle).abs();
                    if wa > std::f64::consts::PI {
                        wa = 2.0 * std::f64::consts::PI - wa;
                    }
                    wa.to_degrees() <= 30.0 + 1e-9 && wr <= r
                });
                if !blocked {
                    out.push((reference.id, direction, candidate.id));
                }
            }
        }
    }
    out
}

/// Scenario texts keyed by category.
pub type ScenarioTable = BTreeMap<String, Vec<String>>;

/// Commonsense instruction: a daily-life scenario implying the target by
/// affordance, never by name, plus the placement clause.  When a remote
/// text-generation client is given, its output replaces the table text
/// after the same validation.
pub fn gen_commonsense(
    scene: &Scene,
    table: &ScenarioTable,
    seed: u64,
    client: Option<&TextGenClient>,
) -> Result<Instruction, InstrError> {
    let target = scene.target_object().ok_or(InstrError::IncompleteScene)?;
    let region = scene.target_region().ok_or(InstrError::IncompleteScene)?;

    let same_category = scene
        .objects
        .iter()
        .filter(|o| o.category == target.category)
        .count();
    if same_category != 1 {
        return Err(InstrError::NoScenario);
    }

    let scenario = if let Some(client) = client {
        let summary = scene_summary(scene);
        let text = client.generate(&summary, &target.category, &region.name)?;
        validate_scenario(&text, scene)?;
        return Ok(Instruction {
            text,
            kind: InstructionKind::Commonsense,
            target_object_id: target.id,
            region_id: region.id,
        });
    } else {
        let scenarios = table
            .get(&target.category)
            .ok_or(InstrError::NoScenario)?;
        let valid: Vec<&String> = scenarios
            .iter()
            .filter(|s| validate_scenario(s, scene).is_ok())
            .collect();
        if valid.is_empty() {
            return Err(InstrError::NoScenario);
        }
        let mut rng = chacha(derive(seed, stream::INSTRUCTION));
        valid[rng.gen_range(0..valid.len())].clone()
    };

    Ok(Instruction {
        text: format!(
            "{scenario} — fetch what I need and put it in the {}",
            region.name
        ),
        kind: InstructionKind::Commonsense,
        target_object_id: target.id,
        region_id: region.id,
    })
}

/// A scenario is valid for a scene when it names no category present in
/// the scene: the target must be implied by affordance alone, and no
/// distractor may be named by accident.
fn validate_scenario(text: &str, scene: &Scene) -> Result<(), InstrError> {
    if text.trim().is_empty() {
        return Err(InstrError::NoScenario);
    }
    for o in &scene.objects {
        if text.to_lowercase().contains(&o.category.to_lowercase()) {
            return Err(InstrError::NoScenario);
        }
    }
    Ok(())
}

/// One-line scene description passed to the remote text-generation hook.
pub fn scene_summary(scene: &Scene) -> String {
    let objects: Vec<String> = scene
        .objects
        .iter()
        .map(|o| {
            format!(
                "{} {} {}",
                o.attributes.color.keyword, o.attributes.size.keyword, o.category
            )
        })
        .collect();
    format!("objects: {}", objects.join(", "))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DiversityMetrics {
    pub mean: f64,
    pub variance: f64,
}

/// Mean and population variance of pairwise cosine similarities over the
/// strict upper triangle of the instruction-embedding similarity matrix.
pub fn diversity_metrics(
    texts: &[String],
    provider: &dyn EmbeddingProvider,
) -> Result<DiversityMetrics, InstrError> {
    if texts.len() < 2 {
        return Err(InstrError::TooFewInstructions(texts.len()));
    }
    let embeddings: Vec<Vec<f64>> = texts.iter().map(|t| provider.embed(t)).collect();
    let mut sims = Vec::with_capacity(texts.len() * (texts.len() - 1) / 2);
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            sims.push(cosine(&embeddings[i], &embeddings[j]));
        }
    }
    let n = sims.len() as f64;
    let mean = sims.iter().sum::<f64>() / n;
    let variance = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok(DiversityMetrics { mean, variance })
}

/// Offline scenario table: three affordance scenarios per category, none
/// naming any catalog category.
pub fn default_scenario_table() -> ScenarioTable {
    const DATA: [(&str, [&str; 3]); 40] = [
        (
            "mug",
            [
                "I could use some hot coffee right now",
                "time for my morning brew",
                "I want to sip some tea while it is warm",
            ],
        ),
        (
            "plate",
            [
                "dinner is ready to be served",
                "I need something flat to serve this meal on",
                "set a place setting for our guest",
            ],
        ),
        (
            "bowl",
            [
                "this soup needs something to hold it",
                "I want to toss a salad for lunch",
                "cereal time, grab what holds it",
            ],
        ),
        (
            "fork",
            [
                "I need something to twirl this pasta",
                "help me pick up these noodles",
                "something with tines for the salad please",
            ],
        ),
        (
            "knife",
            [
                "I need to slice these vegetables",
                "the roast will not carve itself",
                "something sharp for the chopping board",
            ],
        ),
        (
            "spoon",
            [
                "this soup needs stirring",
                "I want to scoop some sugar",
                "something to taste the sauce with",
            ],
        ),
        (
            "spatula",
            [
                "these flapjacks need flipping",
                "help me flip things without breaking them",
                "something to scrape the batter",
            ],
        ),
        (
            "whisk",
            [
                "the batter needs beating until fluffy",
                "help me get the lumps out of this mix",
                "the cream will not whip itself",
            ],
        ),
        (
            "ladle",
            [
                "serve the soup into dishes at the table",
                "I need to portion out this stew",
                "something deep to scoop the broth",
            ],
        ),
        (
            "tongs",
            [
                "flip the hot food without burning my fingers",
                "I need to grab the salad safely",
                "something to turn the skewers",
            ],
        ),
        (
            "pot",
            [
                "the pasta water needs somewhere to boil",
                "I want to simmer a big batch of stew",
                "something deep to cook the rice in",
            ],
        ),
        (
            "pan",
            [
                "I need a hot surface to fry breakfast",
                "I want to sear this steak",
                "something flat and hot for the crepes",
            ],
        ),
        (
            "kettle",
            [
                "boil some water for tea",
                "I need hot water in a hurry",
                "the tea break needs boiling water",
            ],
        ),
        (
            "teapot",
            [
                "steep the leaves properly",
                "I want to brew loose leaf for guests",
                "something to let the tea steep in",
            ],
        ),
        (
            "cup",
            [
                "pour me something small to drink",
                "I want a short drink of juice",
                "something modest to hold my espresso",
            ],
        ),
        (
            "tumbler",
            [
                "pour me a tall cold drink",
                "I want iced water with dinner",
                "something tall for the cold cider",
            ],
        ),
        (
            "pitcher",
            [
                "the juice needs pouring at the table",
                "bring what holds enough drink for everyone",
                "something with a spout for the iced tea",
            ],
        ),
        (
            "jar",
            [
                "these preserves need storing",
                "seal up the leftovers airtight",
                "somewhere to keep the pickles",
            ],
        ),
        (
            "canister",
            [
                "the flour needs a dry home",
                "store the ground coffee somewhere sealed",
                "keep the sugar from going stale",
            ],
        ),
        (
            "bottle",
            [
                "the oil needs a container with a neck",
                "something to hold the vinegar",
                "cork up the dressing for later",
            ],
        ),
        (
            "apple",
            [
                "I want a crisp snack from the orchard",
                "something to keep the doctor away",
                "a fruit for the lunchbox",
            ],
        ),
        (
            "banana",
            [
                "a curved yellow fruit for the smoothie",
                "something sweet that peels easily",
                "I want the soft fruit for my cereal",
            ],
        ),
        (
            "tangerine",
            [
                "I want a small citrus to peel",
                "peel me something sweet and segmented",
                "juicy segments would be great right now",
            ],
        ),
        (
            "lemon",
            [
                "something sour to squeeze over the fish",
                "the tea needs a citrus twist",
                "I need tart juice for the dressing",
            ],
        ),
        (
            "tomato",
            [
                "the salad needs something red and juicy",
                "I want to make a fresh pasta sauce",
                "slice something ripe for the sandwich",
            ],
        ),
        (
            "carrot",
            [
                "something long and crunchy for the stew",
                "I want a root vegetable for juicing",
                "the soup needs something sweet and crunchy",
            ],
        ),
        (
            "onion",
            [
                "the stir fry needs something that makes me cry",
                "a pungent bulb for the soup base",
                "something layered for the curry",
            ],
        ),
        (
            "potato",
            [
                "I want to mash a starchy side",
                "something to bake in its jacket",
                "the fries have to start somewhere",
            ],
        ),
        (
            "loaf",
            [
                "toast for breakfast sounds good",
                "I need slices for sandwiches",
                "something baked to go with the soup",
            ],
        ),
        (
            "cheese",
            [
                "grate something savory over the pasta",
                "I want a slice of dairy on my sandwich",
                "the crackers need a rich topping",
            ],
        ),
        (
            "egg",
            [
                "the omelette needs its main ingredient",
                "something to crack into the skillet",
                "I want to boil a quick protein",
            ],
        ),
        (
            "sponge",
            [
                "these dishes will not scrub themselves",
                "I need to wipe down the counter",
                "something absorbent for the spill",
            ],
        ),
        (
            "towel",
            [
                "my hands are dripping wet",
                "dry the dishes before they streak",
                "something soft to dry up this mess",
            ],
        ),
        (
            "soap",
            [
                "my hands need a good wash",
                "the grease will not come off without suds",
                "something to lather up with",
            ],
        ),
        (
            "brush",
            [
                "scrub the stuck bits off this cookware",
                "scrub deep inside the narrow glassware",
                "something bristled for the crevices",
            ],
        ),
        (
            "grater",
            [
                "shred this for the tacos",
                "I want fine zest for the cake",
                "something to turn the block into shreds",
            ],
        ),
        (
            "peeler",
            [
                "strip the skins off these spuds",
                "the root vegetables need their skins removed",
                "something to shave the skins thin",
            ],
        ),
        (
            "timer",
            [
                "do not let the cookies burn, set a reminder",
                "the roast needs exactly forty minutes",
                "count down the boil for me",
            ],
        ),
        (
            "scale",
            [
                "weigh out the flour precisely",
                "this recipe is by grams not guesses",
                "I need exact weights for the dough",
            ],
        ),
        (
            "opener",
            [
                "these tins will not open by hand",
                "pop the lid off this preserved food",
                "get into this sealed tin for me",
            ],
        ),
    ];
    DATA.iter()
        .map(|(category, scenarios)| {
            (
                category.to_string(),
                scenarios.iter().map(|s| s.to_string()).collect(),
            )
        })
        .collect()
}
