//! The mask-guided imitation policy.
//!
//! Forward path per frame: the grounding masks are fused into the image as
//! extra channels (per the configured representation mode), a small ViT
//! encodes the fused image into a CLS token and patch tokens, and a
//! grounded perceiver compresses the patches into 3k query tokens while
//! mask-filled attention steers the object and placement query groups
//! toward their masked patches.  Frames are then assembled into per-step
//! token groups (CLS, perceived, text, state, ACT), run through a
//! block-causal temporal transformer, and linear heads read each step's
//! ACT output as an arm displacement pair plus a gripper logit.
//!
//! Training differentiates the whole stack end to end; inference caches
//! per-frame encodings and executes only the final step's action.

use maskgrip_grad::{Arr, FillMode, Graph, ParamSet, Var};
use ndarray::{Array2, Array3, Ix2, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounder::{tokenize, GrounderOutput};
use crate::nn::{self, Bound, ATTN_NEG};
use crate::rng::{chacha, derive, stream};
use crate::store::{load_checkpoint, save_checkpoint, StoreError};

/// Gripper closes when the predicted probability reaches this value.
pub const GRIP_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("image is {found_h}x{found_w}, config expects {expected}x{expected}")]
    ResolutionMismatch {
        expected: usize,
        found_h: usize,
        found_w: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("got {given} steps, history holds at most {max}")]
    BadSteps { given: usize, max: usize },
    #[error("checkpoint kind {found:?}, expected {expected:?}")]
    WrongKind { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Store(#[from] StoreError),
    #[error("checkpoint config: {0}")]
    Config(#[from] serde_json::Error),
}

/// How grounding masks reach the policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Full binary masks as image channels.
    Mask,
    /// Filled tight bounding rectangle per mask as an image channel.
    BboxImage,
    /// 3x3 blob at the mask centroid as an image channel.
    PointImage,
    /// Zero image channels; (cx, cy, w, h) per mask appended to the state.
    BboxLowdim,
    /// Zero image channels; (cx, cy) per mask appended to the state.
    PointLowdim,
    /// No mask information anywhere.
    None,
}

impl MaskMode {
    pub const ALL: [MaskMode; 6] = [
        MaskMode::Mask,
        MaskMode::BboxImage,
        MaskMode::PointImage,
        MaskMode::BboxLowdim,
        MaskMode::PointLowdim,
        MaskMode::None,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MaskMode::Mask => "mask",
            MaskMode::BboxImage => "bbox-image",
            MaskMode::PointImage => "point-image",
            MaskMode::BboxLowdim => "bbox-lowdim",
            MaskMode::PointLowdim => "point-lowdim",
            MaskMode::None => "none",
        }
    }
}

/// Which pre-fill maximum replaces masked attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FillScope {
    /// Maximum of the whole logit matrix.
    Global,
    /// Maximum of each row.
    Row,
}

impl From<FillScope> for FillMode {
    fn from(s: FillScope) -> FillMode {
        match s {
            FillScope::Global => FillMode::GlobalMax,
            FillScope::Row => FillMode::RowMax,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Images are `image_size` x `image_size` RGB.
    pub image_size: usize,
    pub patch_size: usize,
    /// Queries per perceiver group (k); groups are global, object, placement.
    pub queries_per_group: usize,
    /// Patch-token width (D_v).
    pub visual_dim: usize,
    /// Perceived-token and sequence width (D_p).
    pub perceived_dim: usize,
    /// Perceiver attention width (d).
    pub attention_dim: usize,
    /// Perceiver depth (L).
    pub perceiver_layers: usize,
    /// History length (N).
    pub history: usize,
    /// Attention heads in the patch encoder and temporal transformer.
    pub heads: usize,
    /// Temporal transformer depth.
    pub temporal_layers: usize,
    /// Rows in the hashed-token text embedding table.
    pub vocab: usize,
    /// Width of one text token embedding before pooling projection.
    pub text_embed_dim: usize,
    pub mask_mode: MaskMode,
    /// Gate for mask-filled attention in the perceiver.
    pub fill_enabled: bool,
    pub fill_scope: FillScope,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            image_size: 64,
            patch_size: 8,
            queries_per_group: 9,
            visual_dim: 64,
            perceived_dim: 64,
            attention_dim: 64,
            perceiver_layers: 2,
            history: 4,
            heads: 4,
            temporal_layers: 2,
            vocab: 512,
            text_embed_dim: 32,
            mask_mode: MaskMode::Mask,
            fill_enabled: true,
            fill_scope: FillScope::Global,
        }
    }
}

impl PolicyConfig {
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn perceived_tokens(&self) -> usize {
        3 * self.queries_per_group
    }

    pub fn step_tokens(&self) -> usize {
        self.perceived_tokens() + 4
    }

    pub fn sequence_tokens(&self) -> usize {
        self.history * self.step_tokens()
    }

    /// Proprioception width after the mode's low-dim mask features.
    pub fn state_dim(&self) -> usize {
        4 + match self.mask_mode {
            MaskMode::PointLowdim => 4,
            MaskMode::BboxLowdim => 8,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |msg: String| Err(PolicyError::BadConfig(msg));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.queries_per_group < 1 {
            return bad("queries per group must be >= 1".into());
        }
        if self.history < 1 {
            return bad("history must be >= 1".into());
        }
        if self.perceiver_layers < 1 || self.temporal_layers < 1 {
            return bad("layer counts must be >= 1".into());
        }
        if self.heads < 1 || !self.visual_dim.is_multiple_of(self.heads) || !self.perceived_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "head count {} must divide visual dim {} and perceived dim {}",
                self.heads, self.visual_dim, self.perceived_dim
            ));
        }
        if self.attention_dim < 1 || self.visual_dim < 1 || self.perceived_dim < 1 {
            return bad("embedding dims must be >= 1".into());
        }
        if self.vocab < 1 || self.text_embed_dim < 1 {
            return bad("text encoder dims must be >= 1".into());
        }
        Ok(())
    }
}

pub struct PolicyModel {
    pub config: PolicyConfig,
    pub params: ParamSet,
}

const CHECKPOINT_KIND: &str = "policy";
const PATCH_ENCODER_LAYERS: usize = 2;

pub fn init_policy(config: &PolicyConfig, seed: u64) -> Result<PolicyModel, PolicyError> {
    config.validate()?;
    let mut rng = chacha(derive(seed, stream::INIT));
    let mut ps = ParamSet::new();
    let dv = config.visual_dim;
    let dp = config.perceived_dim;
    let d = config.attention_dim;
    let k = config.queries_per_group;
    let patch_in = 3 * config.patch_size * config.patch_size;

    nn::init_conv(&mut ps, &mut rng, "fuse", 3, 5, 1);
    nn::init_linear(&mut ps, &mut rng, "patch.proj", patch_in, dv);
    nn::init_normal(&mut ps, &mut rng, "patch.cls", &[1, dv], 0.02);
    for i in 0..PATCH_ENCODER_LAYERS {
        nn::init_block(&mut ps, &mut rng, &format!("patch.blk{i}"), dv, 2 * dv);
    }
    nn::init_layer_norm(&mut ps, "patch.ln", dv);

    for group in ["q_g", "q_o", "q_p"] {
        nn::init_normal(&mut ps, &mut rng, &format!("perc.{group}"), &[k, dp], 0.02);
    }
    for l in 0..config.perceiver_layers {
        nn::init_linear(&mut ps, &mut rng, &format!("perc.l{l}.q"), dp, d);
        nn::init_linear(&mut ps, &mut rng, &format!("perc.l{l}.p"), dv, d);
        nn::init_linear(&mut ps, &mut rng, &format!("perc.l{l}.o"), d, dp);
        nn::init_linear(&mut ps, &mut rng, &format!("perc.l{l}.ffn.in"), dp, 2 * dp);
        nn::init_linear(&mut ps, &mut rng, &format!("perc.l{l}.ffn.out"), 2 * dp, dp);
    }
    nn::init_linear(&mut ps, &mut rng, "perc.out", dp, dp);

    nn::init_table(&mut ps, &mut rng, "text.table", config.vocab, config.text_embed_dim);
    nn::init_linear(&mut ps, &mut rng, "text.proj", config.text_embed_dim, dp);
    nn::init_linear(&mut ps, &mut rng, "state.in", config.state_dim(), dp);
    nn::init_linear(&mut ps, &mut rng, "state.out", dp, dp);
    nn::init_linear(&mut ps, &mut rng, "seq.cls_proj", dv, dp);
    nn::init_normal(&mut ps, &mut rng, "seq.act", &[1, dp], 0.02);
    nn::init_normal(&mut ps, &mut rng, "seq.type", &[5, dp], 0.02);

    for i in 0..config.temporal_layers {
        nn::init_block(&mut ps, &mut rng, &format!("temp.blk{i}"), dp, 2 * dp);
    }
    nn::init_layer_norm(&mut ps, "temp.ln", dp);
    nn::init_linear(&mut ps, &mut rng, "head.arm", dp, 2);
    nn::init_linear(&mut ps, &mut rng, "head.grip", dp, 1);

    Ok(PolicyModel {
        config: config.clone(),
        params: ps,
    })
}

impl PolicyModel {
    pub fn save(&self, path: &std::path::Path) -> Result<(), PolicyError> {
        let config = serde_json::to_value(&self.config)?;
        save_checkpoint(path, CHECKPOINT_KIND, &config, &self.params)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PolicyError> {
        let ckpt = load_checkpoint(path)?;
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(PolicyError::WrongKind {
                expected: CHECKPOINT_KIND.to_string(),
                found: ckpt.kind,
            });
        }
        let config: PolicyConfig = serde_json::from_value(ckpt.config)?;
        Ok(PolicyModel {
            config,
            params: ckpt.params,
        })
    }
}

/// Tight bounding rectangle of the set pixels, inclusive (r0, c0, r1, c1).
pub fn mask_bbox(mask: &Array2<u8>) -> Option<(usize, usize, usize, usize)> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for ((r, c), &v) in mask.indexed_iter() {
        if v == 0 {
            continue;
        }
        bounds = Some(match bounds {
            None => (r, c, r, c),
            Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
        });
    }
    bounds
}

/// Mean pixel index of the set pixels, rounded to the nearest pixel.
pub fn mask_centroid(mask: &Array2<u8>) -> Option<(usize, usize)> {
    let mut n = 0usize;
    let (mut sr, mut sc) = (0.0f64, 0.0f64);
    for ((r, c), &v) in mask.indexed_iter() {
        if v != 0 {
            n += 1;
            sr += r as f64;
            sc += c as f64;
        }
    }
    if n == 0 {
        return None;
    }
    let (h, w) = mask.dim();
    let r = (sr / n as f64).round() as usize;
    let c = (sc / n as f64).round() as usize;
    Some((r.min(h - 1), c.min(w - 1)))
}

/// Filled tight bounding rectangle as a {0, 1} channel.
pub fn bbox_channel(mask: &Array2<u8>) -> Array2<f64> {
    let mut out = Array2::zeros(mask.dim());
    if let Some((r0, c0, r1, c1)) = mask_bbox(mask) {
        for r in r0..=r1 {
            for c in c0..=c1 {
                out[[r, c]] = 1.0;
            }
        }
    }
    out
}

/// 3x3 blob at the rounded centroid, clipped at the borders.
pub fn point_channel(mask: &Array2<u8>) -> Array2<f64> {
    let (h, w) = mask.dim();
    let mut out = Array2::zeros((h, w));
    if let Some((r, c)) = mask_centroid(mask) {
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let nr = r as i64 + dr;
                let nc = c as i64 + dc;
                if nr >= 0 && nr < h as i64 && nc >= 0 && nc < w as i64 {
                    out[[nr as usize, nc as usize]] = 1.0;
                }
            }
        }
    }
    out
}

/// Low-dim mask features, normalized to [0, 1]: (cx, cy) of the exact
/// centroid, plus (w, h) of the bounding rectangle when `bbox` is set.
/// Empty masks yield zeros.
pub fn lowdim_features(mask: &Array2<u8>, bbox: bool) -> Vec<f64> {
    let (h, w) = mask.dim();
    let len = if bbox { 4 } else { 2 };
    let mut out = vec![0.0; len];
    let mut n = 0usize;
    let (mut sr, mut sc) = (0.0f64, 0.0f64);
    for ((r, c), &v) in mask.indexed_iter() {
        if v != 0 {
            n += 1;
            sr += r as f64;
            sc += c as f64;
        }
    }
    if n == 0 {
        return out;
    }
    out[0] = (sc / n as f64 + 0.5) / w as f64;
    out[1] = (sr / n as f64 + 0.5) / h as f64;
    if bbox {
        let (r0, c0, r1, c1) = mask_bbox(mask).expect("non-empty mask has a bbox");
        out[2] = (c1 - c0 + 1) as f64 / w as f64;
        out[3] = (r1 - r0 + 1) as f64 / h as f64;
    }
    out
}

/// Patch-level binary vector, length g²: a patch is 1 iff any of its
/// pixels is set.  The mask resolution must divide into the patch grid.
pub fn downsample_mask(mask: &Array2<u8>, grid_side: usize) -> Vec<u8> {
    let (h, w) = mask.dim();
    assert!(
        grid_side > 0 && h % grid_side == 0 && w % grid_side == 0,
        "mask {h}x{w} does not divide into a {grid_side}x{grid_side} grid"
    );
    let (ph, pw) = (h / grid_side, w / grid_side);
    let mut out = vec![0u8; grid_side * grid_side];
    for ((r, c), &v) in mask.indexed_iter() {
        if v != 0 {
            out[(r / ph) * grid_side + (c / pw)] = 1;
        }
    }
    out
}

/// CLS and patch tokens for one frame.
pub struct ImageEncoding {
    /// `[1, D_v]`
    pub cls: Var,
    /// `[g², D_v]`
    pub patches: Var,
}

fn mode_channels(cfg: &PolicyConfig, object: &Array2<u8>, placement: &Array2<u8>) -> (Array2<f64>, Array2<f64>) {
    let zeros = || Array2::zeros(object.dim());
    match cfg.mask_mode {
        MaskMode::Mask => (object.mapv(f64::from), placement.mapv(f64::from)),
        MaskMode::BboxImage => (bbox_channel(object), bbox_channel(placement)),
        MaskMode::PointImage => (point_channel(object), point_channel(placement)),
        MaskMode::BboxLowdim | MaskMode::PointLowdim | MaskMode::None => (zeros(), zeros()),
    }
}

/// Encode one frame: 5-channel stack (RGB + two mask-derived channels),
/// per-pixel linear fuse to 3 channels, then a 2-layer ViT with a
/// learnable CLS token and fixed sinusoidal positions.
pub fn encode_image(
    g: &mut Graph,
    b: &Bound,
    cfg: &PolicyConfig,
    image: &Array3<f64>,
    object_mask: &Array2<u8>,
    placement_mask: &Array2<u8>,
) -> Result<ImageEncoding, PolicyError> {
    let n = cfg.image_size;
    let (h, w, ch) = image.dim();
    if h != n || w != n || ch != 3 {
        return Err(PolicyError::ResolutionMismatch {
            expected: n,
            found_h: h,
            found_w: w,
        });
    }
    if object_mask.dim() != (n, n) || placement_mask.dim() != (n, n) {
        return Err(PolicyError::ShapeMismatch(format!(
            "masks {:?}/{:?} vs image {n}x{n}",
            object_mask.dim(),
            placement_mask.dim()
        )));
    }

    let (mo, mp) = mode_channels(cfg, object_mask, placement_mask);
    let mut stack = Arr::zeros(IxDyn(&[5, n, n]));
    for r in 0..n {
        for c in 0..n {
            for i in 0..3 {
                stack[[i, r, c]] = image[[r, c, i]];
            }
            stack[[3, r, c]] = mo[[r, c]];
            stack[[4, r, c]] = mp[[r, c]];
        }
    }
    let stack = g.constant(stack);
    let fuse_w = b.var("fuse.w");
    let fuse_b = b.var("fuse.b");
    let fused = g.conv2d(stack, fuse_w, fuse_b, 1, 0);

    let flat = g.patchify(fused, cfg.patch_size);
    let patches = nn::linear(g, b, "patch.proj", flat);
    let cls = b.var("patch.cls");
    let mut tokens = g.concat(&[cls, patches], 0);
    let pos = g.constant(
        nn::sinusoid_table(cfg.num_patches() + 1, cfg.visual_dim).into_dyn(),
    );
    tokens = g.add(tokens, pos);
    for i in 0..PATCH_ENCODER_LAYERS {
        tokens = nn::transformer_block(g, b, &format!("patch.blk{i}"), tokens, cfg.heads, None);
    }
    tokens = nn::layer_norm(g, b, "patch.ln", tokens);
    let cls = g.slice(tokens, 0, 0, 1);
    let patches = g.slice(tokens, 0, 1, cfg.num_patches() + 1);
    Ok(ImageEncoding { cls, patches })
}

/// Per-layer attention matrices recorded by the perceiver, before and
/// after mask filling (equal when filling was skipped).
pub struct PerceiverTrace {
    pub prefill: Vec<Array2<f64>>,
    pub filled: Vec<Array2<f64>>,
}

fn to2(a: &Arr) -> Array2<f64> {
    a.clone().into_dimensionality::<Ix2>().expect("2-d value")
}

/// Compress patch tokens into 3k perceived tokens.  Query groups in order
/// (global, object, placement), k rows each.  Per layer, queries and
/// patches are projected to the attention width, K = V = the projected
/// patches with the projected queries appended, and masked patch columns
/// of the object and placement rows are filled with the pre-fill maximum
/// before softmax.  Patch features stay fixed across layers.
pub fn grounded_perceiver(
    g: &mut Graph,
    b: &Bound,
    cfg: &PolicyConfig,
    patches: Var,
    object_patches: &[u8],
    placement_patches: &[u8],
) -> (Var, PerceiverTrace) {
    let k = cfg.queries_per_group;
    let gg = cfg.num_patches();
    assert_eq!(object_patches.len(), gg, "object patch mask length");
    assert_eq!(placement_patches.len(), gg, "placement patch mask length");

    let q_g = b.var("perc.q_g");
    let q_o = b.var("perc.q_o");
    let q_p = b.var("perc.q_p");
    let mut state = g.concat(&[q_g, q_o, q_p], 0);

    let any_obj = object_patches.iter().any(|&v| v != 0);
    let any_plc = placement_patches.iter().any(|&v| v != 0);
    let fill_mask = if cfg.fill_enabled && (any_obj || any_plc) {
        let mut m = ndarray::ArrayD::<bool>::from_elem(IxDyn(&[3 * k, gg + 3 * k]), false);
        for (p, &set) in object_patches.iter().enumerate() {
            if set != 0 {
                for row in k..2 * k {
                    m[[row, p]] = true;
                }
            }
        }
        for (p, &set) in placement_patches.iter().enumerate() {
            if set != 0 {
                for row in 2 * k..3 * k {
                    m[[row, p]] = true;
                }
            }
        }
        Some(m)
    } else {
        None
    };

    let scale = 1.0 / (cfg.attention_dim as f64).sqrt();
    let mut trace = PerceiverTrace {
        prefill: Vec::with_capacity(cfg.perceiver_layers),
        filled: Vec::with_capacity(cfg.perceiver_layers),
    };
    for l in 0..cfg.perceiver_layers {
        let qd = nn::linear(g, b, &format!("perc.l{l}.q"), state);
        let pd = nn::linear(g, b, &format!("perc.l{l}.p"), patches);
        let kv = g.concat(&[pd, qd], 0);
        let logits = g.matmul_nt(qd, kv);
        let mut logits = g.scale(logits, scale);
        trace.prefill.push(to2(g.value(logits)));
        if let Some(mask) = &fill_mask {
            logits = g.mask_fill(logits, mask, cfg.fill_scope.into());
        }
        trace.filled.push(to2(g.value(logits)));
        let attn = g.softmax(logits);
        let mixed = g.matmul(attn, kv);
        let out = nn::linear(g, b, &format!("perc.l{l}.o"), mixed);
        state = g.add(state, out);
        let f = nn::ffn(g, b, &format!("perc.l{l}.ffn"), state);
        state = g.add(state, f);
    }
    (nn::linear(g, b, "perc.out", state), trace)
}

/// Pooled text token `[1, D_p]` from the hashed token table.
pub fn text_token(g: &mut Graph, b: &Bound, cfg: &PolicyConfig, instruction: &str) -> Var {
    let ids = tokenize(instruction, cfg.vocab);
    let table = b.var("text.table");
    let rows = g.rows(table, &ids);
    let pooled = g.mean_axis(rows, 0);
    nn::linear(g, b, "text.proj", pooled)
}

/// State token `[1, D_p]` from the 2-layer state MLP.
pub fn state_token(g: &mut Graph, b: &Bound, cfg: &PolicyConfig, state: &[f64]) -> Result<Var, PolicyError> {
    if state.len() != cfg.state_dim() {
        return Err(PolicyError::ShapeMismatch(format!(
            "state vector length {} vs configured {}",
            state.len(),
            cfg.state_dim()
        )));
    }
    let v = Arr::from_shape_vec(IxDyn(&[1, state.len()]), state.to_vec()).unwrap();
    let x = g.constant(v);
    let h = nn::linear(g, b, "state.in", x);
    let h = g.gelu(h);
    Ok(nn::linear(g, b, "state.out", h))
}

/// Per-frame inputs to sequence assembly.
#[derive(Clone, Copy)]
pub struct StepFeatures {
    /// `[1, D_v]` CLS from the patch encoder.
    pub cls: Var,
    /// `[3k, D_p]` perceived tokens.
    pub perceived: Var,
    /// `[1, D_p]` state token.
    pub state: Var,
}

/// The assembled token matrix with its attention bias.
pub struct AssembledSequence {
    /// `[N*(3k+4), D_p]`
    pub tokens: Var,
    /// Additive attention bias, 0 = allowed, large negative = banned.
    pub bias: Arr,
    /// Which history slots are left-padding.
    pub pad: Vec<bool>,
}

/// Assemble N steps of (CLS, 3k perceived, text, state, ACT) tokens with a
/// block-causal bias: full attention within a step, causal across steps.
/// Fewer than N steps left-pads by repeating the earliest step; padded
/// steps are flagged and hidden from the real steps' attention.
pub fn assemble_sequence(
    g: &mut Graph,
    b: &Bound,
    cfg: &PolicyConfig,
    steps: &[StepFeatures],
    text: Var,
) -> Result<AssembledSequence, PolicyError> {
    let n = cfg.history;
    if steps.is_empty() || steps.len() > n {
        return Err(PolicyError::BadSteps {
            given: steps.len(),
            max: n,
        });
    }
    let pad_count = n - steps.len();
    let mut pad = vec![true; pad_count];
    pad.extend(std::iter::repeat_n(false, steps.len()));

    let st = cfg.step_tokens();
    let three_k = cfg.perceived_tokens();
    let type_table = b.var("seq.type");
    let mut type_ids = vec![0usize];
    type_ids.extend(std::iter::repeat_n(1, three_k));
    type_ids.extend([2, 3, 4]);
    let type_rows = g.rows(type_table, &type_ids);
    let slot_pos = g.constant(nn::sinusoid_table(st, cfg.perceived_dim).into_dyn());
    let step_pos_table = nn::sinusoid_table(n, cfg.perceived_dim);

    let act = b.var("seq.act");
    let mut step_vars = Vec::with_capacity(n);
    for s in 0..n {
        let src = &steps[s.saturating_sub(pad_count)];
        let cls = nn::linear(g, b, "seq.cls_proj", src.cls);
        let rows = g.concat(&[cls, src.perceived, text, src.state, act], 0);
        let rows = g.add(rows, type_rows);
        let rows = g.add(rows, slot_pos);
        let step_pos = g.constant(
            step_pos_table
                .row(s)
                .insert_axis(ndarray::Axis(0))
                .to_owned()
                .into_dyn(),
        );
        step_vars.push(g.add(rows, step_pos));
    }
    let tokens = g.concat(&step_vars, 0);

    let total = n * st;
    let mut bias = Arr::zeros(IxDyn(&[total, total]));
    for i in 0..total {
        let si = i / st;
        for j in 0..total {
            let sj = j / st;
            let allowed = sj <= si && (pad[si] || !pad[sj]);
            if !allowed {
                bias[[i, j]] = ATTN_NEG;
            }
        }
    }
    Ok(AssembledSequence { tokens, bias, pad })
}

/// Per-step action outputs.
pub struct ActionPrediction {
    /// `[N, 2]` arm displacement pairs, in units of the world's per-step
    /// clamp.
    pub arm: Var,
    /// `[N, 1]` gripper logits.
    pub gripper: Var,
}

/// Run the temporal transformer and read the heads off each step's ACT
/// token.  Only the final step's action is executed at inference.
pub fn predict_actions(g: &mut Graph, b: &Bound, cfg: &PolicyConfig, seq: &AssembledSequence) -> ActionPrediction {
    let bias = g.constant(seq.bias.clone());
    let mut tokens = seq.tokens;
    for i in 0..cfg.temporal_layers {
        tokens = nn::transformer_block(g, b, &format!("temp.blk{i}"), tokens, cfg.heads, Some(bias));
    }
    tokens = nn::layer_norm(g, b, "temp.ln", tokens);
    let st = cfg.step_tokens();
    let act_rows: Vec<Var> = (0..cfg.history)
        .map(|s| {
            let idx = s * st + st - 1;
            g.slice(tokens, 0, idx, idx + 1)
        })
        .collect();
    let acts = g.concat(&act_rows, 0);
    ActionPrediction {
        arm: nn::linear(g, b, "head.arm", acts),
        gripper: nn::linear(g, b, "head.grip", acts),
    }
}

/// Arm Smooth-L1, gripper BCE, and their exact sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub arm: f64,
    pub gripper: f64,
    pub total: f64,
}

/// Imitation loss over aligned steps: mean Smooth-L1 (beta = 1) on arm
/// displacements plus mean BCE on gripper logits; the total is their
/// exact sum.
pub fn policy_loss(
    arm_pred: &Array2<f64>,
    grip_logits: &[f64],
    arm_target: &Array2<f64>,
    grip_target: &[f64],
) -> Result<LossRecord, PolicyError> {
    if arm_pred.dim() != arm_target.dim() || arm_pred.ncols() != 2 {
        return Err(PolicyError::ShapeMismatch(format!(
            "arm {:?} vs target {:?}",
            arm_pred.dim(),
            arm_target.dim()
        )));
    }
    if grip_logits.len() != grip_target.len() || grip_logits.len() != arm_pred.nrows() {
        return Err(PolicyError::ShapeMismatch(format!(
            "gripper {} vs target {} vs steps {}",
            grip_logits.len(),
            grip_target.len(),
            arm_pred.nrows()
        )));
    }
    if arm_pred.is_empty() {
        return Err(PolicyError::ShapeMismatch("zero steps".into()));
    }
    let mut arm = 0.0;
    for (&p, &t) in arm_pred.iter().zip(arm_target.iter()) {
        let e = (p - t).abs();
        arm += if e < 1.0 { 0.5 * e * e } else { e - 0.5 };
    }
    arm /= arm_pred.len() as f64;
    let mut gripper = 0.0;
    for (&l, &t) in grip_logits.iter().zip(grip_target) {
        let soft = if l >= 0.0 {
            l + (1.0 + (-l).exp()).ln()
        } else {
            (1.0 + l.exp()).ln()
        };
        gripper += soft - l * t;
    }
    gripper /= grip_logits.len() as f64;
    Ok(LossRecord {
        arm,
        gripper,
        total: arm + gripper,
    })
}

/// Graph version of [`policy_loss`] restricted to the non-padded steps.
/// Returns (arm, gripper, total) nodes.
pub fn policy_loss_graph(
    g: &mut Graph,
    pred: &ActionPrediction,
    valid: &[bool],
    arm_target: &Array2<f64>,
    grip_target: &[f64],
) -> Result<(Var, Var, Var), PolicyError> {
    let live: Vec<usize> = (0..valid.len()).filter(|&s| valid[s]).collect();
    if live.is_empty() {
        return Err(PolicyError::ShapeMismatch("no valid steps in window".into()));
    }
    if arm_target.nrows() != live.len() || grip_target.len() != live.len() {
        return Err(PolicyError::ShapeMismatch(format!(
            "targets cover {} steps, window has {} valid",
            arm_target.nrows(),
            live.len()
        )));
    }
    let contiguous = live[0] + live.len() == valid.len();
    let (arm, grip) = if contiguous && live.len() == valid.len() {
        (pred.arm, pred.gripper)
    } else {
        let arm_rows: Vec<Var> = live.iter().map(|&s| g.slice(pred.arm, 0, s, s + 1)).collect();
        let grip_rows: Vec<Var> = live.iter().map(|&s| g.slice(pred.gripper, 0, s, s + 1)).collect();
        (g.concat(&arm_rows, 0), g.concat(&grip_rows, 0))
    };
    let at = g.constant(arm_target.clone().into_dyn());
    let arm_loss = g.smooth_l1_mean(arm, at, 1.0);
    let gt = Arr::from_shape_vec(IxDyn(&[grip_target.len(), 1]), grip_target.to_vec()).unwrap();
    let gt = g.constant(gt);
    let grip_loss = g.bce_with_logits_mean(grip, gt);
    let total = g.add(arm_loss, grip_loss);
    Ok((arm_loss, grip_loss, total))
}

/// One frame of policy input: the rendered image, the (frozen) grounding
/// masks, and the 4-dim proprioception.
pub struct Frame<'a> {
    pub image: &'a Array3<f64>,
    pub masks: &'a GrounderOutput,
    pub state: [f64; 4],
}

fn extended_state(cfg: &PolicyConfig, base: [f64; 4], masks: &GrounderOutput) -> Vec<f64> {
    let mut v = base.to_vec();
    match cfg.mask_mode {
        MaskMode::PointLowdim => {
            v.extend(lowdim_features(&masks.object_mask, false));
            v.extend(lowdim_features(&masks.placement_mask, false));
        }
        MaskMode::BboxLowdim => {
            v.extend(lowdim_features(&masks.object_mask, true));
            v.extend(lowdim_features(&masks.placement_mask, true));
        }
        _ => {}
    }
    v
}

fn frame_features(
    g: &mut Graph,
    b: &Bound,
    cfg: &PolicyConfig,
    frame: &Frame,
) -> Result<StepFeatures, PolicyError> {
    let enc = encode_image(g, b, cfg, frame.image, &frame.masks.object_mask, &frame.masks.placement_mask)?;
    let side = cfg.grid_side();
    let (obj, plc) = if cfg.fill_enabled {
        // The fill bias sees the mode's rendering, not the raw masks.
        let (mo, mp) = mode_channels(cfg, &frame.masks.object_mask, &frame.masks.placement_mask);
        let bits = |m: &Array2<f64>| m.mapv(|v| u8::from(v != 0.0));
        (
            downsample_mask(&bits(&mo), side),
            downsample_mask(&bits(&mp), side),
        )
    } else {
        (vec![0; cfg.num_patches()], vec![0; cfg.num_patches()])
    };
    let (perceived, _) = grounded_perceiver(g, b, cfg, enc.patches, &obj, &plc);
    let state = extended_state(cfg, frame.state, frame.masks);
    let state = state_token(g, b, cfg, &state)?;
    Ok(StepFeatures {
        cls: enc.cls,
        perceived,
        state,
    })
}

/// End-to-end differentiable forward over up to N frames.
pub fn policy_forward(
    g: &mut Graph,
    b: &Bound,
    cfg: &PolicyConfig,
    frames: &[Frame],
    instruction: &str,
) -> Result<(ActionPrediction, Vec<bool>), PolicyError> {
    let mut steps = Vec::with_capacity(frames.len());
    for f in frames {
        steps.push(frame_features(g, b, cfg, f)?);
    }
    let text = text_token(g, b, cfg, instruction);
    let seq = assemble_sequence(g, b, cfg, &steps, text)?;
    let pad = seq.pad.clone();
    let pred = predict_actions(g, b, cfg, &seq);
    Ok((pred, pad))
}

/// Cached per-frame encoding for incremental rollout: the frame passes
/// through the patch encoder and perceiver once, later timesteps reuse
/// the values.
#[derive(Clone, Debug)]
pub struct FrameCache {
    cls: Arr,
    perceived: Arr,
    state: Vec<f64>,
}

pub fn encode_frame(
    model: &PolicyModel,
    image: &Array3<f64>,
    masks: &GrounderOutput,
    state: [f64; 4],
) -> Result<FrameCache, PolicyError> {
    let cfg = &model.config;
    let mut g = Graph::new();
    let b = Bound::new(&model.params, &mut g);
    let frame = Frame { image, masks, state };
    let feats = frame_features(&mut g, &b, cfg, &frame)?;
    Ok(FrameCache {
        cls: g.value(feats.cls).clone(),
        perceived: g.value(feats.perceived).clone(),
        state: extended_state(cfg, state, masks),
    })
}

/// The executed decision for one timestep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyDecision {
    /// Arm displacement in units of the world's per-step clamp.
    pub arm: [f64; 2],
    pub grip_probability: f64,
    pub grip_close: bool,
}

/// Predict from cached frames (the most recent last) and return only the
/// final step's action.
pub fn predict_cached(
    model: &PolicyModel,
    caches: &[FrameCache],
    instruction: &str,
) -> Result<PolicyDecision, PolicyError> {
    let cfg = &model.config;
    let mut g = Graph::new();
    let b = Bound::new(&model.params, &mut g);
    let mut steps = Vec::with_capacity(caches.len());
    for cache in caches {
        let cls = g.constant(cache.cls.clone());
        let perceived = g.constant(cache.perceived.clone());
        let h = {
            let v = Arr::from_shape_vec(IxDyn(&[1, cache.state.len()]), cache.state.clone()).unwrap();
            let x = g.constant(v);
            let h = nn::linear(&mut g, &b, "state.in", x);
            let h = g.gelu(h);
            nn::linear(&mut g, &b, "state.out", h)
        };
        steps.push(StepFeatures {
            cls,
            perceived,
            state: h,
        });
    }
    let text = text_token(&mut g, &b, cfg, instruction);
    let seq = assemble_sequence(&mut g, &b, cfg, &steps, text)?;
    let pred = predict_actions(&mut g, &b, cfg, &seq);
    let arm = g.value(pred.arm);
    let grip = g.value(pred.gripper);
    let last = cfg.history - 1;
    let logit = grip[[last, 0]];
    let p = 1.0 / (1.0 + (-logit).exp());
    Ok(PolicyDecision {
        arm: [arm[[last, 0]], arm[[last, 1]]],
        grip_probability: p,
        grip_close: p >= GRIP_THRESHOLD,
    })
}
