//! Grounding models: map (image, instruction) to binary masks for the
//! target object and the placement area.
//!
//! Three implementations share the [`GrounderOutput`] contract: an oracle
//! that returns the renderer's ground-truth masks, a learned conditioned
//! segmenter, and a seeded corruptor for robustness probes.  [`miou`]
//! scores any of them against ground truth.
//!
//! The learned model is a small fully-convolutional U-Net: a three-stage
//! stride-2 encoder whose stages are feature-wise conditioned on a pooled
//! instruction embedding, a two-conv bottleneck, and a nearest-neighbour
//! upsampling decoder with skip connections that emits two logit maps
//! (channel 0 = object, channel 1 = placement) at input resolution.

use maskgrip_grad::{Adam, Arr, Graph, ParamSet, Var};
use ndarray::{Array2, Array3, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::fnv1a64;
use crate::nn::{self, Bound};
use crate::rng::{chacha, derive, stream};
use crate::store::{load_checkpoint, save_checkpoint, StoreError};
use crate::world::Observation;

pub const MASK_THRESHOLD: f64 = 0.5;
pub const DICE_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GrounderError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("image is {found_h}x{found_w}, model expects {expected}x{expected}")]
    ResolutionMismatch {
        expected: usize,
        found_h: usize,
        found_w: usize,
    },
    #[error("mask shapes disagree: {0}")]
    ShapeMismatch(String),
    #[error("mask lists are empty")]
    EmptyList,
    #[error("mask lists have different lengths ({preds} vs {gts})")]
    LengthMismatch { preds: usize, gts: usize },
    #[error("checkpoint kind {found:?}, expected {expected:?}")]
    WrongKind { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Store(#[from] StoreError),
    #[error("checkpoint config: {0}")]
    Config(#[from] serde_json::Error),
}

/// Binary masks produced by any grounding implementation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrounderOutput {
    pub object_mask: Array2<u8>,
    pub placement_mask: Array2<u8>,
    pub placement_present: bool,
}

impl GrounderOutput {
    pub fn new(object_mask: Array2<u8>, placement_mask: Array2<u8>) -> Self {
        let placement_present = placement_mask.iter().any(|&v| v != 0);
        GrounderOutput {
            object_mask,
            placement_mask,
            placement_present,
        }
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.object_mask.dim()
    }
}

/// One supervised example for [`train_grounder`]: the episode's first
/// frame, its instruction, and the ground-truth masks.
#[derive(Clone, Debug)]
pub struct GrounderSample {
    pub image: Array3<f64>,
    pub instruction: String,
    pub object_mask: Array2<u8>,
    pub placement_mask: Array2<u8>,
}

/// Hyperparameters of the learned grounder and its trainer.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GrounderConfig {
    /// Input images are `image_size` x `image_size` RGB.
    pub image_size: usize,
    /// Channel widths of the three stride-2 encoder stages.
    pub widths: [usize; 3],
    /// Rows in the hashed-token embedding table.
    pub vocab: usize,
    /// Width of one token embedding.
    pub embed_dim: usize,
    /// Width of the pooled conditioning vector.
    pub cond_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for GrounderConfig {
    fn default() -> Self {
        GrounderConfig {
            image_size: 64,
            widths: [16, 32, 64],
            vocab: 512,
            embed_dim: 32,
            cond_dim: 64,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 8,
        }
    }
}

/// The conditioned segmenter: configuration plus parameters.
pub struct LearnedGrounder {
    pub config: GrounderConfig,
    pub params: ParamSet,
}

const CHECKPOINT_KIND: &str = "grounder";

/// Input channels fed to the encoder: RGB plus the two pixel-centre
/// coordinate planes, which give the fully-convolutional net a notion of
/// absolute position (placement regions live at fixed table coordinates).
const IN_CHANNELS: usize = 5;

pub fn init_grounder(config: &GrounderConfig, seed: u64) -> LearnedGrounder {
    assert!(
        config.image_size.is_multiple_of(8) && config.image_size >= 8,
        "image size must be a positive multiple of 8"
    );
    let mut rng = chacha(derive(seed, stream::INIT));
    let mut ps = ParamSet::new();
    let [w0, w1, w2] = config.widths;

    nn::init_table(&mut ps, &mut rng, "embed.table", config.vocab, config.embed_dim);
    nn::init_linear(&mut ps, &mut rng, "embed.proj", config.embed_dim, config.cond_dim);

    let stage_io = [(IN_CHANNELS, w0), (w0, w1), (w1, w2)];
    for (s, (c_in, c_out)) in stage_io.into_iter().enumerate() {
        nn::init_conv(&mut ps, &mut rng, &format!("enc{s}"), c_out, c_in, 3);
        nn::init_linear(&mut ps, &mut rng, &format!("film{s}.gain"), config.cond_dim, c_out);
        nn::init_linear(&mut ps, &mut rng, &format!("film{s}.bias"), config.cond_dim, c_out);
    }
    nn::init_conv(&mut ps, &mut rng, "mid0", w2, w2, 3);
    nn::init_conv(&mut ps, &mut rng, "mid1", w2, w2, 3);
    nn::init_conv(&mut ps, &mut rng, "dec0", w1, w2, 3);
    nn::init_conv(&mut ps, &mut rng, "dec1", w0, w1, 3);
    nn::init_conv(&mut ps, &mut rng, "dec2", w0, w0, 3);
    nn::init_conv(&mut ps, &mut rng, "head", 2, w0, 1);

    LearnedGrounder {
        config: config.clone(),
        params: ps,
    }
}

impl LearnedGrounder {
    pub fn save(&self, path: &std::path::Path) -> Result<(), GrounderError> {
        let config = serde_json::to_value(&self.config)?;
        save_checkpoint(path, CHECKPOINT_KIND, &config, &self.params)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, GrounderError> {
        let ckpt = load_checkpoint(path)?;
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(GrounderError::WrongKind {
                expected: CHECKPOINT_KIND.to_string(),
                found: ckpt.kind,
            });
        }
        let config: GrounderConfig = serde_json::from_value(ckpt.config)?;
        Ok(LearnedGrounder {
            config,
            params: ckpt.params,
        })
    }
}

/// Hash words to embedding-table rows.  Lowercased alphanumeric runs;
/// an instruction with no words maps to the single reserved row 0.
pub fn tokenize(text: &str, vocab: usize) -> Vec<usize> {
    let lower = text.to_lowercase();
    let mut ids: Vec<usize> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| (fnv1a64(w.as_bytes()) % vocab as u64) as usize)
        .collect();
    if ids.is_empty() {
        ids.push(0);
    }
    ids
}

/// Stack an `[H, W, 3]` image into the `[5, H, W]` network input: RGB
/// first, then the x and y pixel-centre coordinate planes in [0, 1].
pub fn image_to_input(image: &Array3<f64>) -> Arr {
    let (h, w, _) = image.dim();
    let mut out = Arr::zeros(IxDyn(&[IN_CHANNELS, h, w]));
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                out[[ch, r, c]] = image[[r, c, ch]];
            }
            out[[3, r, c]] = (c as f64 + 0.5) / w as f64;
            out[[4, r, c]] = (r as f64 + 0.5) / h as f64;
        }
    }
    out
}

fn film(g: &mut Graph, b: &Bound, name: &str, h: Var, z: Var, width: usize) -> Var {
    let gain = nn::linear(g, b, &format!("{name}.gain"), z);
    let bias = nn::linear(g, b, &format!("{name}.bias"), z);
    let gain = g.add_scalar(gain, 1.0);
    let gain = g.reshape(gain, &[width, 1, 1]);
    let bias = g.reshape(bias, &[width, 1, 1]);
    let scaled = g.mul(h, gain);
    g.add(scaled, bias)
}

fn conv(g: &mut Graph, b: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Var {
    let w = b.var(&format!("{name}.w"));
    let bias = b.var(&format!("{name}.b"));
    g.conv2d(x, w, bias, stride, pad)
}

/// Build the forward pass; returns the `[2, H, W]` logit maps.
pub fn grounder_logits(
    g: &mut Graph,
    b: &Bound,
    config: &GrounderConfig,
    input: Var,
    token_ids: &[usize],
) -> Var {
    let [w0, w1, w2] = config.widths;

    let table = b.var("embed.table");
    let tokens = g.rows(table, token_ids);
    let pooled = g.mean_axis(tokens, 0);
    let z = nn::linear(g, b, "embed.proj", pooled);

    let mut h = input;
    let mut skips = Vec::with_capacity(2);
    for (s, width) in [w0, w1, w2].into_iter().enumerate() {
        h = conv(g, b, &format!("enc{s}"), h, 2, 1);
        h = film(g, b, &format!("film{s}"), h, z, width);
        h = g.gelu(h);
        if s < 2 {
            skips.push(h);
        }
    }

    h = conv(g, b, "mid0", h, 1, 1);
    h = g.gelu(h);
    h = conv(g, b, "mid1", h, 1, 1);
    h = g.gelu(h);

    h = g.upsample_nearest2(h);
    h = conv(g, b, "dec0", h, 1, 1);
    h = g.add(h, skips[1]);
    h = g.gelu(h);
    h = g.upsample_nearest2(h);
    h = conv(g, b, "dec1", h, 1, 1);
    h = g.add(h, skips[0]);
    h = g.gelu(h);
    h = g.upsample_nearest2(h);
    h = conv(g, b, "dec2", h, 1, 1);
    h = g.gelu(h);
    conv(g, b, "head", h, 1, 0)
}

/// Return the observation's ground-truth masks verbatim.
pub fn ground_oracle(obs: &Observation) -> GrounderOutput {
    GrounderOutput::new(obs.object_mask.clone(), obs.placement_mask.clone())
}

/// Run the learned model and binarize: `sigmoid(logit) >= 0.5` per pixel,
/// channel 0 = object, channel 1 = placement.  Inference is deterministic.
pub fn ground_learned(
    model: &LearnedGrounder,
    image: &Array3<f64>,
    instruction: &str,
) -> Result<GrounderOutput, GrounderError> {
    let (h, w, _) = image.dim();
    let n = model.config.image_size;
    if h != n || w != n {
        return Err(GrounderError::ResolutionMismatch {
            expected: n,
            found_h: h,
            found_w: w,
        });
    }
    let mut g = Graph::new();
    let b = Bound::new(&model.params, &mut g);
    let input = g.input(image_to_input(image));
    let tokens = tokenize(instruction, model.config.vocab);
    let logits = grounder_logits(&mut g, &b, &model.config, input, &tokens);
    let lv = g.value(logits);
    let mut object = Array2::<u8>::zeros((h, w));
    let mut placement = Array2::<u8>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let po = 1.0 / (1.0 + (-lv[[0, r, c]]).exp());
            let pp = 1.0 / (1.0 + (-lv[[1, r, c]]).exp());
            object[[r, c]] = (po >= MASK_THRESHOLD) as u8;
            placement[[r, c]] = (pp >= MASK_THRESHOLD) as u8;
        }
    }
    Ok(GrounderOutput::new(object, placement))
}

/// Soft DICE distance between a probability map and a binary target:
/// `1 - 2*sum(p*g) / (sum(p) + sum(g) + eps)`.
pub fn soft_dice(p: &[f64], g: &[f64]) -> f64 {
    assert_eq!(p.len(), g.len());
    let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    let mass: f64 = p.iter().sum::<f64>() + g.iter().sum::<f64>();
    1.0 - 2.0 * inter / (mass + DICE_EPS)
}

fn mask_plane(mask: &Array2<u8>) -> Arr {
    let (h, w) = mask.dim();
    let mut out = Arr::zeros(IxDyn(&[1, h, w]));
    for r in 0..h {
        for c in 0..w {
            out[[0, r, c]] = f64::from(mask[[r, c]]);
        }
    }
    out
}

/// Graph version of [`grounder_loss`] for training: per channel, mean
/// binary cross-entropy plus soft DICE, summed over both channels with
/// unit weights.
pub fn grounder_loss_graph(
    g: &mut Graph,
    logits: Var,
    object_mask: &Array2<u8>,
    placement_mask: &Array2<u8>,
) -> Var {
    let mut total: Option<Var> = None;
    for (ch, mask) in [object_mask, placement_mask].into_iter().enumerate() {
        let logit = g.slice(logits, 0, ch, ch + 1);
        let target = g.constant(mask_plane(mask));
        let bce = g.bce_with_logits_mean(logit, target);
        let p = g.sigmoid(logit);
        let pg = g.mul(p, target);
        let inter = g.sum_all(pg);
        let p_sum = g.sum_all(p);
        let g_sum = g.sum_all(target);
        let mass = g.add(p_sum, g_sum);
        let mass = g.add_scalar(mass, DICE_EPS);
        let num = g.scale(inter, 2.0);
        let frac = g.div(num, mass);
        let neg = g.neg(frac);
        let dice = g.add_scalar(neg, 1.0);
        let term = g.add(bce, dice);
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    total.expect("two channels")
}

/// Scalar loss for a `[2, H, W]` logit map against ground-truth masks.
pub fn grounder_loss(
    logits: &Array3<f64>,
    object_mask: &Array2<u8>,
    placement_mask: &Array2<u8>,
) -> Result<f64, GrounderError> {
    let (ch, h, w) = logits.dim();
    if ch != 2 || object_mask.dim() != (h, w) || placement_mask.dim() != (h, w) {
        return Err(GrounderError::ShapeMismatch(format!(
            "logits {:?}, object {:?}, placement {:?}",
            logits.dim(),
            object_mask.dim(),
            placement_mask.dim()
        )));
    }
    let mut g = Graph::new();
    let l = g.input(logits.clone().into_dyn());
    let loss = grounder_loss_graph(&mut g, l, object_mask, placement_mask);
    Ok(g.value(loss)[IxDyn(&[])])
}

fn sample_loss(model_params: &ParamSet, config: &GrounderConfig, sample: &PreparedSample) -> (f64, Vec<Arr>) {
    let mut g = Graph::new();
    let b = Bound::new(model_params, &mut g);
    let input = g.constant(sample.input.clone());
    let logits = grounder_logits(&mut g, &b, config, input, &sample.tokens);
    let loss = grounder_loss_graph(&mut g, logits, &sample.object_mask, &sample.placement_mask);
    let grads = g.backward(loss);
    let flat = (0..model_params.len())
        .map(|i| {
            let v = b.var(model_params.name(i));
            grads.get_or_zeros(v, model_params.value(i).shape())
        })
        .collect();
    (g.value(loss)[IxDyn(&[])], flat)
}

struct PreparedSample {
    input: Arr,
    tokens: Vec<usize>,
    object_mask: Array2<u8>,
    placement_mask: Array2<u8>,
}

/// Mini-batch Adam training.  Returns the trained model and the mean
/// batch loss after each step.  Gradients accumulate in sample-index
/// order, so the result is identical with and without data parallelism.
pub fn train_grounder(
    dataset: &[GrounderSample],
    config: &GrounderConfig,
    seed: u64,
) -> Result<(LearnedGrounder, Vec<f64>), GrounderError> {
    if dataset.is_empty() {
        return Err(GrounderError::EmptyDataset);
    }
    let n = config.image_size;
    for s in dataset {
        let (h, w, _) = s.image.dim();
        if h != n || w != n {
            return Err(GrounderError::ResolutionMismatch {
                expected: n,
                found_h: h,
                found_w: w,
            });
        }
    }
    let prepared: Vec<PreparedSample> = dataset
        .iter()
        .map(|s| PreparedSample {
            input: image_to_input(&s.image),
            tokens: tokenize(&s.instruction, config.vocab),
            object_mask: s.object_mask.clone(),
            placement_mask: s.placement_mask.clone(),
        })
        .collect();

    let mut model = init_grounder(config, seed);
    let mut adam = Adam::new(&model.params, config.learning_rate);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut shuffle_rng = chacha(derive(seed, stream::TRAIN));
    let batch = config.batch_size.max(1);
    let mut curve = Vec::new();

    for _ in 0..config.epochs {
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(batch) {
            let results = crate::par::map_indexed(chunk.len(), |i| {
                sample_loss(&model.params, config, &prepared[chunk[i]])
            });
            let scale = 1.0 / chunk.len() as f64;
            let mut mean_loss = 0.0;
            let mut grads: Vec<Arr> = model
                .params
                .iter()
                .map(|(_, v)| Arr::zeros(v.raw_dim()))
                .collect();
            for (loss, sample_grads) in results {
                mean_loss += loss * scale;
                for (acc, g) in grads.iter_mut().zip(sample_grads) {
                    acc.scaled_add(scale, &g);
                }
            }
            adam.step(&mut model.params, &grads);
            curve.push(mean_loss);
        }
    }
    Ok((model, curve))
}

/// Seeded mask corruption for robustness probes.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Maximum per-axis translation in pixels; the offset is drawn
    /// uniformly from `[-r, r]` per axis.
    pub shift_radius: u32,
    /// Chebyshev radius of morphological dilation (> 0) or erosion (< 0).
    pub morph_radius: i32,
    /// Probability of replacing a mask with all zeros.
    pub dropout_p: f64,
}

impl NoiseConfig {
    pub fn is_zero(&self) -> bool {
        self.shift_radius == 0 && self.morph_radius == 0 && self.dropout_p == 0.0
    }
}

/// Translate a mask by `(dr, dc)`, clipping at the borders.
pub fn shift_mask(mask: &Array2<u8>, dr: i64, dc: i64) -> Array2<u8> {
    let (h, w) = mask.dim();
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] == 0 {
                continue;
            }
            let nr = r as i64 + dr;
            let nc = c as i64 + dc;
            if nr >= 0 && nr < h as i64 && nc >= 0 && nc < w as i64 {
                out[[nr as usize, nc as usize]] = 1;
            }
        }
    }
    out
}

/// Morphological dilation (`radius > 0`) or erosion (`radius < 0`) with a
/// square structuring element of the given Chebyshev radius.
pub fn morph_mask(mask: &Array2<u8>, radius: i32) -> Array2<u8> {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let r = radius.unsigned_abs() as i64;
    let dilate = radius > 0;
    let mut out = Array2::zeros((h, w));
    for row in 0..h {
        for col in 0..w {
            let mut any = false;
            let mut all = true;
            for dr in -r..=r {
                for dc in -r..=r {
                    let nr = row as i64 + dr;
                    let nc = col as i64 + dc;
                    let v = if nr >= 0 && nr < h as i64 && nc >= 0 && nc < w as i64 {
                        mask[[nr as usize, nc as usize]] != 0
                    } else {
                        false
                    };
                    any |= v;
                    all &= v;
                }
            }
            out[[row, col]] = u8::from(if dilate { any } else { all });
        }
    }
    out
}

/// Corrupt a grounding output with seeded shift, dilation/erosion, and
/// mask dropout.  An all-zero config returns the input unchanged.
pub fn ground_noisy(base: &GrounderOutput, noise: &NoiseConfig, seed: u64) -> GrounderOutput {
    if noise.is_zero() {
        return base.clone();
    }
    let mut rng = chacha(derive(seed, stream::NOISE));
    let mut corrupt = |mask: &Array2<u8>| -> Array2<u8> {
        let mut m = mask.clone();
        if noise.shift_radius > 0 {
            let r = noise.shift_radius as i64;
            let dr = rng.gen_range(-r..=r);
            let dc = rng.gen_range(-r..=r);
            m = shift_mask(&m, dr, dc);
        }
        if noise.morph_radius != 0 {
            m = morph_mask(&m, noise.morph_radius);
        }
        if noise.dropout_p > 0.0 && rng.gen_range(0.0..1.0) < noise.dropout_p {
            m.fill(0);
        }
        m
    };
    let object = corrupt(&base.object_mask);
    let placement = corrupt(&base.placement_mask);
    GrounderOutput::new(object, placement)
}

/// Mean intersection-over-union across aligned mask pairs.  The IoU of
/// two empty masks is 1.0.
pub fn miou(predictions: &[Array2<u8>], ground_truths: &[Array2<u8>]) -> Result<f64, GrounderError> {
    if predictions.is_empty() || ground_truths.is_empty() {
        return Err(GrounderError::EmptyList);
    }
    if predictions.len() != ground_truths.len() {
        return Err(GrounderError::LengthMismatch {
            preds: predictions.len(),
            gts: ground_truths.len(),
        });
    }
    let mut total = 0.0;
    for (p, g) in predictions.iter().zip(ground_truths) {
        if p.dim() != g.dim() {
            return Err(GrounderError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                p.dim(),
                g.dim()
            )));
        }
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in p.iter().zip(g.iter()) {
            let a = a != 0;
            let b = b != 0;
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(total / predictions.len() as f64)
}

/// mIoU over grounding outputs: each pair contributes its object and its
/// placement channel as separate mask pairs.
pub fn miou_outputs(predictions: &[GrounderOutput], ground_truths: &[GrounderOutput]) -> Result<f64, GrounderError> {
    if predictions.len() != ground_truths.len() {
        return Err(GrounderError::LengthMismatch {
            preds: predictions.len(),
            gts: ground_truths.len(),
        });
    }
    let mut preds = Vec::with_capacity(2 * predictions.len());
    let mut gts = Vec::with_capacity(2 * ground_truths.len());
    for (p, g) in predictions.iter().zip(ground_truths) {
        preds.push(p.object_mask.clone());
        gts.push(g.object_mask.clone());
        preds.push(p.placement_mask.clone());
        gts.push(g.placement_mask.clone());
    }
    miou(&preds, &gts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use maskgrip_grad::{central_difference, relative_error};
    use ndarray::{arr2, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> GrounderConfig {
        GrounderConfig {
            image_size: 8,
            widths: [3, 4, 5],
            vocab: 64,
            embed_dim: 6,
            cond_dim: 8,
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 1,
        }
    }

    fn blob_mask(size: usize, r0: usize, c0: usize, side: usize) -> Array2<u8> {
        let mut m = Array2::zeros((size, size));
        for r in r0..(r0 + side).min(size) {
            for c in c0..(c0 + side).min(size) {
                m[[r, c]] = 1;
            }
        }
        m
    }

    fn synthetic_sample(size: usize, seed: u64) -> GrounderSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let object_mask = blob_mask(size, size / 4, size / 4, size / 4);
        let placement_mask = blob_mask(size, 0, size / 2, size / 3);
        let mut image = Array3::zeros((size, size, 3));
        for r in 0..size {
            for c in 0..size {
                let base: f64 = rng.gen_range(0.0..0.2);
                let obj = f64::from(object_mask[[r, c]]);
                let plc = f64::from(placement_mask[[r, c]]);
                image[[r, c, 0]] = base + 0.8 * obj;
                image[[r, c, 1]] = base + 0.8 * plc;
                image[[r, c, 2]] = base;
            }
        }
        GrounderSample {
            image,
            instruction: "put the red block in the green zone".to_string(),
            object_mask,
            placement_mask,
        }
    }

    fn obs_from_masks(object: Array2<u8>, placement: Array2<u8>) -> Observation {
        let (h, w) = object.dim();
        Observation {
            image: Array3::zeros((h, w, 3)),
            state: [0.0; 4],
            object_mask: object,
            placement_mask: placement,
        }
    }

    #[test]
    fn oracle_returns_gt_verbatim_and_is_idempotent() {
        let obj = blob_mask(8, 1, 1, 3);
        let plc = blob_mask(8, 4, 4, 2);
        let obs = obs_from_masks(obj.clone(), plc.clone());
        let out = ground_oracle(&obs);
        assert_eq!(out.object_mask, obj);
        assert_eq!(out.placement_mask, plc);
        assert!(out.placement_present);
        assert_eq!(ground_oracle(&obs), out);

        let empty = obs_from_masks(obj, Array2::zeros((8, 8)));
        let out = ground_oracle(&empty);
        assert!(!out.placement_present);
        assert!(out.placement_mask.iter().all(|&v| v == 0));
    }

    #[test]
    fn loss_closed_forms() {
        let obj = arr2(&[[1u8, 1], [0, 0]]);
        let plc = obj.clone();
        let zeros = Array3::zeros((2, 2, 2));
        let loss = grounder_loss(&zeros, &obj, &plc).unwrap();
        let bce = std::f64::consts::LN_2;
        let dice = 1.0 - 2.0 * (0.5 * 2.0) / (0.5 * 4.0 + 2.0 + DICE_EPS);
        assert!((dice - 0.5).abs() < 1e-6);
        assert!((loss - 2.0 * (bce + dice)).abs() < 1e-9, "loss {loss}");

        let mut exact = Array3::zeros((2, 2, 2));
        for r in 0..2 {
            for c in 0..2 {
                let v = if obj[[r, c]] == 1 { 30.0 } else { -30.0 };
                exact[[0, r, c]] = v;
                exact[[1, r, c]] = v;
            }
        }
        assert!(grounder_loss(&exact, &obj, &plc).unwrap() < 1e-6);
    }

    #[test]
    fn soft_dice_examples() {
        assert!((soft_dice(&[0.0; 4], &[1.0; 4]) - 1.0).abs() < 1e-12);
        let p = [1.0, 1.0, 0.0, 0.0];
        assert!(soft_dice(&p, &p) < 1e-6);
    }

    #[test]
    fn loss_matches_independent_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut logits = Array3::zeros((2, 4, 4));
        let mut obj = Array2::zeros((4, 4));
        let mut plc = Array2::zeros((4, 4));
        for r in 0..4 {
            for c in 0..4 {
                logits[[0, r, c]] = rng.gen_range(-2.0..2.0);
                logits[[1, r, c]] = rng.gen_range(-2.0..2.0);
                obj[[r, c]] = u8::from(rng.gen_range(0.0..1.0) < 0.4);
                plc[[r, c]] = u8::from(rng.gen_range(0.0..1.0) < 0.4);
            }
        }
        let loss = grounder_loss(&logits, &obj, &plc).unwrap();

        let mut expect = 0.0;
        for (ch, mask) in [&obj, &plc].into_iter().enumerate() {
            let mut probs = Vec::new();
            let mut gts = Vec::new();
            let mut bce = 0.0;
            for r in 0..4 {
                for c in 0..4 {
                    let l: f64 = logits[[ch, r, c]];
                    let p = 1.0 / (1.0 + (-l).exp());
                    let g = f64::from(mask[[r, c]]);
                    bce -= (g * p.ln() + (1.0 - g) * (1.0 - p).ln()) / 16.0;
                    probs.push(p);
                    gts.push(g);
                }
            }
            expect += bce + soft_dice(&probs, &gts);
        }
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
    }

    #[test]
    fn loss_shape_mismatch_is_rejected() {
        let logits = Array3::zeros((2, 4, 4));
        let obj = Array2::zeros((4, 4));
        let bad = Array2::zeros((3, 4));
        assert!(matches!(
            grounder_loss(&logits, &obj, &bad),
            Err(GrounderError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn learned_grounder_shapes_determinism_and_resolution_check() {
        let config = tiny_config();
        let model = init_grounder(&config, 0);
        let sample = synthetic_sample(8, 1);
        let a = ground_learned(&model, &sample.image, &sample.instruction).unwrap();
        let b = ground_learned(&model, &sample.image, &sample.instruction).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.resolution(), (8, 8));

        let zero_img = Array3::zeros((8, 8, 3));
        let c = ground_learned(&model, &zero_img, "").unwrap();
        let d = ground_learned(&model, &zero_img, "").unwrap();
        assert_eq!(c, d);

        let wrong = Array3::zeros((16, 16, 3));
        assert!(matches!(
            ground_learned(&model, &wrong, "x"),
            Err(GrounderError::ResolutionMismatch { expected: 8, .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences_on_8x8() {
        let config = tiny_config();
        let model = init_grounder(&config, 0);
        let sample = synthetic_sample(8, 2);
        let prepared = PreparedSample {
            input: image_to_input(&sample.image),
            tokens: tokenize(&sample.instruction, config.vocab),
            object_mask: sample.object_mask.clone(),
            placement_mask: sample.placement_mask.clone(),
        };
        let (_, grads) = sample_loss(&model.params, &config, &prepared);

        let mut ps = model.params;
        let mut probe = ChaCha8Rng::seed_from_u64(9);
        let mut worst = 0.0f64;
        for (pi, grad) in grads.iter().enumerate() {
            let scalars = ps.value(pi).len();
            let base: usize = (0..pi).map(|i| ps.value(i).len()).sum();
            for _ in 0..3 {
                let offset = probe.gen_range(0..scalars);
                let flat = base + offset;
                let analytic = grad.as_slice().unwrap()[offset];
                let numeric = central_difference(&mut ps, flat, 1e-5, |p| {
                    sample_loss(p, &config, &prepared).0
                });
                if analytic.abs().max(numeric.abs()) < 1e-8 {
                    continue;
                }
                let err = relative_error(analytic, numeric);
                worst = worst.max(err);
                assert!(
                    err < 1e-4,
                    "param {} offset {offset}: analytic {analytic} numeric {numeric} rel {err}",
                    ps.name(pi)
                );
            }
        }
        assert!(worst > 0.0, "finite-difference probe never hit a live coordinate");
    }

    #[test]
    fn one_sample_training_reduces_loss_and_is_seeded() {
        let config = GrounderConfig {
            image_size: 16,
            widths: [6, 8, 10],
            vocab: 64,
            embed_dim: 8,
            cond_dim: 12,
            learning_rate: 1e-3,
            batch_size: 1,
            epochs: 200,
        };
        let dataset = vec![synthetic_sample(16, 5)];
        let (_, curve) = train_grounder(&dataset, &config, 11).unwrap();
        assert_eq!(curve.len(), 200);
        let initial = curve[0];
        let final_loss = *curve.last().unwrap();
        assert!(
            final_loss < initial / 4.0,
            "initial {initial}, final {final_loss}"
        );

        let short = GrounderConfig { epochs: 30, ..config };
        let (_, c1) = train_grounder(&dataset, &short, 11).unwrap();
        let (_, c2) = train_grounder(&dataset, &short, 11).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(c1.last().unwrap().to_bits(), c2.last().unwrap().to_bits());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(
            train_grounder(&[], &tiny_config(), 0),
            Err(GrounderError::EmptyDataset)
        ));
    }

    #[test]
    fn noise_zero_config_is_identity() {
        let base = GrounderOutput::new(blob_mask(8, 1, 1, 3), blob_mask(8, 4, 4, 2));
        let out = ground_noisy(&base, &NoiseConfig::default(), 123);
        assert_eq!(out, base);
    }

    #[test]
    fn noise_dropout_one_zeroes_both_masks() {
        let base = GrounderOutput::new(blob_mask(8, 1, 1, 3), blob_mask(8, 4, 4, 2));
        let noise = NoiseConfig {
            dropout_p: 1.0,
            ..NoiseConfig::default()
        };
        let out = ground_noisy(&base, &noise, 7);
        assert!(out.object_mask.iter().all(|&v| v == 0));
        assert!(out.placement_mask.iter().all(|&v| v == 0));
        assert!(!out.placement_present);
    }

    #[test]
    fn shift_translates_and_clips() {
        let blob = blob_mask(8, 0, 0, 3);
        let shifted = shift_mask(&blob, 2, 0);
        assert_eq!(shifted, blob_mask(8, 2, 0, 3));

        let low = blob_mask(8, 6, 6, 3);
        let clipped = shift_mask(&low, 2, 2);
        assert!(clipped.iter().all(|&v| v == 0), "blob pushed fully off the edge");

        let mid = blob_mask(8, 3, 3, 2);
        let back = shift_mask(&shift_mask(&mid, 1, -2), -1, 2);
        assert_eq!(back, mid);
    }

    #[test]
    fn noise_is_seeded_and_shift_stays_in_radius() {
        let base = GrounderOutput::new(blob_mask(16, 6, 6, 4), blob_mask(16, 1, 1, 3));
        let noise = NoiseConfig {
            shift_radius: 2,
            morph_radius: 0,
            dropout_p: 0.0,
        };
        let a = ground_noisy(&base, &noise, 42);
        let b = ground_noisy(&base, &noise, 42);
        assert_eq!(a, b);
        assert_eq!(
            a.object_mask.iter().filter(|&&v| v != 0).count(),
            16,
            "interior blob keeps its area under a radius-2 shift"
        );
    }

    #[test]
    fn morphology_dilates_and_erodes() {
        let blob = blob_mask(9, 3, 3, 3);
        let grown = morph_mask(&blob, 1);
        assert_eq!(grown, blob_mask(9, 2, 2, 5));
        let shrunk = morph_mask(&grown, -1);
        assert_eq!(shrunk, blob);
        let gone = morph_mask(&blob, -2);
        assert!(gone.iter().all(|&v| v == 0));
    }

    #[test]
    fn miou_examples_and_errors() {
        let a = blob_mask(8, 0, 0, 2);
        assert_eq!(miou(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap(), 1.0);

        let b = blob_mask(8, 4, 4, 2);
        assert_eq!(miou(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap(), 0.0);

        let mut p = Array2::zeros((4, 4));
        p[[0, 0]] = 1;
        p[[0, 1]] = 1;
        let mut q = Array2::zeros((4, 4));
        q[[0, 1]] = 1;
        q[[0, 2]] = 1;
        let got = miou(&[p.clone()], &[q.clone()]).unwrap();
        assert!((got - 1.0 / 3.0).abs() < 1e-12);

        let empty = Array2::zeros((4, 4));
        assert_eq!(miou(std::slice::from_ref(&empty), std::slice::from_ref(&empty)).unwrap(), 1.0);

        assert!(matches!(miou(&[], &[]), Err(GrounderError::EmptyList)));
        assert!(matches!(
            miou(&[p.clone()], &[q.clone(), p.clone()]),
            Err(GrounderError::LengthMismatch { .. })
        ));

        let forward = miou(&[p.clone(), a], &[q.clone(), b]).unwrap();
        let backward = miou(&[q, blob_mask(8, 4, 4, 2)], &[p, blob_mask(8, 0, 0, 2)]).unwrap();
        assert_eq!(forward, backward);
    }

    #[test]
    fn miou_permutation_invariance() {
        let masks: Vec<Array2<u8>> = (0..4).map(|i| blob_mask(8, i, i, 2)).collect();
        let gts: Vec<Array2<u8>> = (0..4).map(|i| blob_mask(8, i, 0, 2)).collect();
        let direct = miou(&masks, &gts).unwrap();
        let perm = [2usize, 0, 3, 1];
        let pm: Vec<_> = perm.iter().map(|&i| masks[i].clone()).collect();
        let pg: Vec<_> = perm.iter().map(|&i| gts[i].clone()).collect();
        assert!((miou(&pm, &pg).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip_preserves_behaviour() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let config = tiny_config();
        let mut model = init_grounder(&config, 3);
        for i in 0..model.params.len() {
            let v = model.params.value(i).clone();
            *model.params.value_mut(i) = v.mapv(|x| (x as f32) as f64);
        }
        model.save(&path).unwrap();
        let loaded = LearnedGrounder::load(&path).unwrap();
        assert_eq!(loaded.config, config);

        let sample = synthetic_sample(8, 4);
        let a = ground_learned(&model, &sample.image, &sample.instruction).unwrap();
        let b = ground_learned(&loaded, &sample.image, &sample.instruction).unwrap();
        assert_eq!(a, b);

        let path2 = dir.path().join("g2.ckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
