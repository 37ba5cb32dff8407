//! Procedural object catalog.
//!
//! Each entry pairs a kitchen category with a sampled attribute tuple
//! (color, shape, material, size), carried both as lowercase keywords and
//! as descriptive phrases, plus the sprite parameters the renderer needs.
//! Sampling is seeded and rejects duplicate tuples within a category, so a
//! requested instance count always yields exactly that many distinct
//! entries.  Ids are dense and category-major: entry `id` lives at
//! `entries[id]`.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::canon;
use crate::embed::{cosine, EmbeddingProvider};
use crate::rng::{chacha, derive, stream};
use crate::world::render::color_rgb;
use crate::world::{AttrKey, AttrValue, Attributes, Footprint, FootprintKind, ObjectBlueprint};

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("category list is empty")]
    EmptyCategories,
    #[error("requested {requested} instances per category, attribute space has {space}")]
    AttributeSpaceExhausted { requested: usize, space: usize },
    #[error("catalog JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// The forty object categories.
pub const CATEGORIES: [&str; 40] = [
    "mug", "plate", "bowl", "fork", "knife", "spoon", "spatula", "whisk", "ladle", "tongs",
    "pot", "pan", "kettle", "teapot", "cup", "tumbler", "pitcher", "jar", "canister", "bottle",
    "apple", "banana", "tangerine", "lemon", "tomato", "carrot", "onion", "potato", "loaf", "cheese",
    "egg", "sponge", "towel", "soap", "brush", "grater", "peeler", "timer", "scale", "opener",
];

const COLORS: [(&str, &str); 14] = [
    ("red", "crimson red"),
    ("blue", "deep blue"),
    ("green", "forest green"),
    ("yellow", "golden yellow"),
    ("orange", "burnt orange"),
    ("purple", "royal purple"),
    ("pink", "pale pink"),
    ("brown", "chestnut brown"),
    ("black", "matte black"),
    ("white", "chalk white"),
    ("gray", "slate gray"),
    ("cyan", "bright cyan"),
    ("magenta", "vivid magenta"),
    ("beige", "warm beige"),
];

const SHAPES: [(&str, &str, FootprintKind); 3] = [
    ("round", "smoothly rounded", FootprintKind::Disc),
    ("square", "square-edged", FootprintKind::Square),
    ("triangular", "triangular", FootprintKind::Triangle),
];

const MATERIALS: [(&str, &str); 8] = [
    ("steel", "brushed steel"),
    ("wood", "oiled wood"),
    ("plastic", "glossy plastic"),
    ("glass", "clear glass"),
    ("ceramic", "glazed ceramic"),
    ("rubber", "matte rubber"),
    ("stone", "polished stone"),
    ("copper", "hammered copper"),
];

const SIZES: [(&str, &str, f64); 4] = [
    ("tiny", "tiny", 0.050),
    ("small", "small", 0.065),
    ("medium", "medium-sized", 0.080),
    ("large", "oversized", 0.095),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CatalogConfig {
    pub categories: Vec<String>,
    pub instances_per_category: usize,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self {
            categories: CATEGORIES.iter().map(|s| s.to_string()).collect(),
            instances_per_category: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogEntry {
    pub id: u32,
    pub category: String,
    pub attributes: Attributes,
    pub footprint: Footprint,
    /// Sprite body color; derived from the color keyword's render palette.
    pub rgb: [u8; 3],
}

impl CatalogEntry {
    pub fn blueprint(&self) -> ObjectBlueprint {
        ObjectBlueprint {
            category: self.category.clone(),
            attributes: self.attributes.clone(),
            footprint: self.footprint.clone(),
        }
    }

    /// Full descriptive phrase, the text side of distractor ranking.
    pub fn describe(&self) -> String {
        format!(
            "{} {} {} {} {}",
            self.attributes.size.phrase,
            self.attributes.color.phrase,
            self.attributes.shape.phrase,
            self.attributes.material.phrase,
            self.category
        )
    }

    /// Canonical sprite-descriptor string, the visual side of distractor
    /// ranking (e.g. "disc r=0.08 rgb=200,30,30").
    pub fn sprite_descriptor(&self) -> String {
        let kind = match self.footprint.kind {
            FootprintKind::Disc => "disc",
            FootprintKind::Square => "square",
            FootprintKind::Triangle => "triangle",
        };
        format!(
            "{kind} r={:.2} rgb={},{},{}",
            self.footprint.radius, self.rgb[0], self.rgb[1], self.rgb[2]
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Catalog {
    pub entries: Vec<CatalogEntry>,
}

impl Catalog {
    pub fn entry(&self, id: u32) -> Option<&CatalogEntry> {
        self.entries.get(id as usize)
    }

    /// World-sampler pool; pool index equals entry id.
    pub fn blueprints(&self) -> Vec<ObjectBlueprint> {
        self.entries.iter().map(CatalogEntry::blueprint).collect()
    }

    /// Content hash over the canonical JSON of all entries; recorded in
    /// dataset manifests so downstream runs can detect catalog drift.
    pub fn content_hash(&self) -> String {
        canon::canonical_hash(&self.entries)
    }

    pub fn to_json(&self) -> Result<String, CatalogError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, CatalogError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Find the unique catalog entry matching a scene object's category and
/// attribute keywords.  Entries are deduplicated on that tuple, so at most
/// one can match.
pub fn find_entry<'a>(
    catalog: &'a Catalog,
    category: &str,
    attributes: &Attributes,
) -> Option<&'a CatalogEntry> {
    catalog.entries.iter().find(|e| {
        e.category == category
            && AttrKey::ALL
                .iter()
                .all(|&k| e.attributes.get(k).keyword == attributes.get(k).keyword)
    })
}

fn attr_value(keyword: &str, phrase: &str) -> AttrValue {
    AttrValue {
        keyword: keyword.to_string(),
        phrase: phrase.to_string(),
    }
}

/// Sample the catalog: for each category in order, draw distinct attribute
/// tuples until the instance count is met.  Same (config, seed) yields a
/// byte-identical catalog.
pub fn build_catalog(config: &CatalogConfig, seed: u64) -> Result<Catalog, CatalogError> {
    if config.categories.is_empty() {
        return Err(CatalogError::EmptyCategories);
    }
    let space = COLORS.len() * SHAPES.len() * MATERIALS.len() * SIZES.len();
    if config.instances_per_category > space {
        return Err(CatalogError::AttributeSpaceExhausted {
            requested: config.instances_per_category,
            space,
        });
    }
    let mut rng = chacha(derive(seed, stream::CATALOG));
    let mut entries = Vec::with_capacity(config.categories.len() * config.instances_per_category);
    for category in &config.categories {
        let mut taken: HashSet<(usize, usize, usize, usize)> = HashSet::new();
        while taken.len() < config.instances_per_category {
            let tuple = (
                rng.gen_range(0..COLORS.len()),
                rng.gen_range(0..SHAPES.len()),
                rng.gen_range(0..MATERIALS.len()),
                rng.gen_range(0..SIZES.len()),
            );
            if !taken.insert(tuple) {
                continue;
            }
            let (ck, cp) = COLORS[tuple.0];
            let (sk, sp, kind) = SHAPES[tuple.1];
            let (mk, mp) = MATERIALS[tuple.2];
            let (zk, zp, radius) = SIZES[tuple.3];
            let f64_rgb = color_rgb(ck);
            let rgb = [
                (f64_rgb[0] * 255.0).round() as u8,
                (f64_rgb[1] * 255.0).round() as u8,
                (f64_rgb[2] * 255.0).round() as u8,
            ];
            entries.push(CatalogEntry {
                id: entries.len() as u32,
                category: category.clone(),
                attributes: Attributes {
                    color: attr_value(ck, cp),
                    shape: attr_value(sk, sp),
                    material: attr_value(mk, mp),
                    size: attr_value(zk, zp),
                },
                footprint: Footprint { kind, radius },
                rgb,
            });
        }
    }
    Ok(Catalog { entries })
}

/// Pool members whose keyword for `key` differs from the target's; the
/// target itself is excluded.
pub fn filter_unique_attribute<'a>(
    target: &CatalogEntry,
    key: AttrKey,
    pool: &'a [CatalogEntry],
) -> Vec<&'a CatalogEntry> {
    let target_kw = &target.attributes.get(key).keyword;
    pool.iter()
        .filter(|e| e.id != target.id && &e.attributes.get(key).keyword != target_kw)
        .collect()
}

/// Similarity of two entries under a provider: unweighted mean of the
/// full-phrase text cosine and the sprite-descriptor cosine.
pub fn entry_similarity(
    a: &CatalogEntry,
    b: &CatalogEntry,
    provider: &dyn EmbeddingProvider,
) -> f64 {
    let text = cosine(&provider.embed(&a.describe()), &provider.embed(&b.describe()));
    let visual = cosine(
        &provider.embed(&a.sprite_descriptor()),
        &provider.embed(&b.sprite_descriptor()),
    );
    0.5 * (text + visual)
}

/// Top-m candidates by similarity to the target, ties broken by ascending
/// id.  The order is a pure function of the candidate set, not its order.
pub fn rank_distractors<'a>(
    target: &CatalogEntry,
    candidates: &[&'a CatalogEntry],
    provider: &dyn EmbeddingProvider,
    m: usize,
) -> Vec<&'a CatalogEntry> {
    rank_distractors_with(target, candidates, provider, m, 0.0, 0)
}

/// Ranking with an optional sampling temperature: 0 keeps the
/// deterministic top-m; above 0 draws without replacement with weights
/// exp(score / temperature) from the seeded stream.
pub fn rank_distractors_with<'a>(
    target: &CatalogEntry,
    candidates: &[&'a CatalogEntry],
    provider: &dyn EmbeddingProvider,
    m: usize,
    temperature: f64,
    seed: u64,
) -> Vec<&'a CatalogEntry> {
    let mut scored: Vec<(f64, &CatalogEntry)> = candidates
        .iter()
        .map(|&c| (entry_similarity(target, c, provider), c))
        .collect();
    scored.sort_by(|(sa, ea), (sb, eb)| {
        sb.partial_cmp(sa)
            .expect("similarities are finite")
            .then(ea.id.cmp(&eb.id))
    });
    let m = m.min(scored.len());
    if temperature <= 0.0 {
        return scored.into_iter().take(m).map(|(_, e)| e).collect();
    }
    let mut rng = chacha(derive(seed, stream::INSTRUCTION));
    let mut out = Vec::with_capacity(m);
    let mut weights: Vec<f64> = scored.iter().map(|(s, _)| (s / temperature).exp()).collect();
    for _ in 0..m {
        let total: f64 = weights.iter().sum();
        let mut draw = rng.gen_range(0.0..total);
        let mut pick = 0;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            if draw < w {
                pick = i;
                break;
            }
            draw -= w;
            pick = i;
        }
        out.push(scored[pick].1);
        weights[pick] = 0.0;
    }
    out
}
