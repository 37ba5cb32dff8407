//! Shared building blocks for the grounder and policy networks.
//!
//! Everything here is a thin composition of [`maskgrip_grad`] primitives:
//! seeded parameter initialisation on a [`ParamSet`], name-based lookup of
//! bound graph variables, and the standard layers (linear, layer norm,
//! feed-forward, multi-head attention, pre-LN transformer block) that both
//! networks assemble their graphs from.
//!
//! Parameter names form a dot-separated hierarchy (`"enc.blk0.attn.q.w"`).
//! The `init_*` helpers register parameters under such prefixes and the
//! `Bound` map resolves the same names to graph variables, so a builder and
//! its initialiser only have to agree on the prefix.

use std::collections::HashMap;

use maskgrip_grad::{Arr, Graph, ParamSet, Var};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive value used to exclude a key from attention.  Large enough that
/// the post-softmax weight underflows to zero, small enough that the logits
/// stay finite.
pub const ATTN_NEG: f64 = -1e9;

pub fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

fn normal_array<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Arr {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Arr::from_shape_vec(ndarray::IxDyn(shape), data).expect("shape/product mismatch")
}

pub fn init_normal<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, shape: &[usize], std: f64) {
    ps.register(name, normal_array(rng, shape, std));
}

pub fn init_zeros(ps: &mut ParamSet, name: &str, shape: &[usize]) {
    ps.register(name, Arr::zeros(ndarray::IxDyn(shape)));
}

pub fn init_ones(ps: &mut ParamSet, name: &str, shape: &[usize]) {
    ps.register(name, Arr::ones(ndarray::IxDyn(shape)));
}

/// Register `{name}.w` as `[fan_in, fan_out]` (Xavier) and `{name}.b` as
/// zeros `[fan_out]`.
pub fn init_linear<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) {
    init_normal(ps, rng, &format!("{name}.w"), &[fan_in, fan_out], xavier_std(fan_in, fan_out));
    init_zeros(ps, &format!("{name}.b"), &[fan_out]);
}

/// Register `{name}.w` as `[c_out, c_in, k, k]` (He over the receptive
/// field) and `{name}.b` as zeros `[c_out]`.
pub fn init_conv<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, c_out: usize, c_in: usize, k: usize) {
    init_normal(ps, rng, &format!("{name}.w"), &[c_out, c_in, k, k], he_std(c_in * k * k));
    init_zeros(ps, &format!("{name}.b"), &[c_out]);
}

/// Register `{name}.g` (ones) and `{name}.b` (zeros), both `[dim]`.
pub fn init_layer_norm(ps: &mut ParamSet, name: &str, dim: usize) {
    init_ones(ps, &format!("{name}.g"), &[dim]);
    init_zeros(ps, &format!("{name}.b"), &[dim]);
}

/// Register an embedding table `[rows, dim]` with std 0.02.
pub fn init_table<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, rows: usize, dim: usize) {
    init_normal(ps, rng, name, &[rows, dim], 0.02);
}

/// Register the four projections of a multi-head attention layer under
/// `{name}.q/.k/.v/.o`.
pub fn init_attention<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, d: usize) {
    for proj in ["q", "k", "v", "o"] {
        init_linear(ps, rng, &format!("{name}.{proj}"), d, d);
    }
}

/// Register a pre-LN transformer block under `{name}`: `ln1`, `attn`,
/// `ln2`, and a GELU feed-forward `ffn.in`/`ffn.out` with the given hidden
/// width.
pub fn init_block<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, d: usize, hidden: usize) {
    init_layer_norm(ps, &format!("{name}.ln1"), d);
    init_attention(ps, rng, &format!("{name}.attn"), d);
    init_layer_norm(ps, &format!("{name}.ln2"), d);
    init_linear(ps, rng, &format!("{name}.ffn.in"), d, hidden);
    init_linear(ps, rng, &format!("{name}.ffn.out"), hidden, d);
}

/// Name-indexed view of one [`ParamSet`] bound into one [`Graph`].
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn new(ps: &ParamSet, g: &mut Graph) -> Self {
        let bound = ps.bind(g);
        let vars = bound
            .into_iter()
            .enumerate()
            .map(|(i, v)| (ps.name(i).to_string(), v))
            .collect();
        Bound { vars }
    }

    /// Graph variable for a registered parameter.  Panics on unknown names:
    /// a miss is always a builder/initialiser prefix mismatch.
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unregistered parameter {name:?}"))
    }
}

/// `x @ w + b` where `x` is `[.., fan_in]` and the parameters live under
/// `{name}.w` / `{name}.b`.
pub fn linear(g: &mut Graph, b: &Bound, name: &str, x: Var) -> Var {
    let w = b.var(&format!("{name}.w"));
    let bias = b.var(&format!("{name}.b"));
    let y = g.matmul(x, w);
    g.add(y, bias)
}

/// Layer norm over the last axis with learned gain/bias `{name}.g` /
/// `{name}.b`.
pub fn layer_norm(g: &mut Graph, b: &Bound, name: &str, x: Var) -> Var {
    let last = g.value(x).ndim() - 1;
    let mean = g.mean_axis(x, last);
    let centered = g.sub(x, mean);
    let sq = g.mul(centered, centered);
    let var = g.mean_axis(sq, last);
    let var_eps = g.add_scalar(var, LAYER_NORM_EPS);
    let std = g.sqrt(var_eps);
    let normed = g.div(centered, std);
    let gain = b.var(&format!("{name}.g"));
    let bias = b.var(&format!("{name}.b"));
    let scaled = g.mul(normed, gain);
    g.add(scaled, bias)
}

/// Two-layer GELU feed-forward under `{name}.in` / `{name}.out`.
pub fn ffn(g: &mut Graph, b: &Bound, name: &str, x: Var) -> Var {
    let h = linear(g, b, &format!("{name}.in"), x);
    let h = g.gelu(h);
    linear(g, b, &format!("{name}.out"), h)
}

/// Multi-head attention with queries from `q_in` `[n, d]` and keys/values
/// from `kv_in` `[m, d]`.  `bias`, if given, is an additive `[n, m]` logit
/// term applied identically to every head (0 to keep, [`ATTN_NEG`] to
/// exclude).  Logits scale by `1/sqrt(d / heads)`.
pub fn multihead_attention(
    g: &mut Graph,
    b: &Bound,
    name: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    bias: Option<Var>,
) -> Var {
    let d = g.value(q_in).shape()[1];
    assert!(heads >= 1 && d.is_multiple_of(heads), "head count {heads} must divide width {d}");
    let dh = d / heads;
    let q = linear(g, b, &format!("{name}.q"), q_in);
    let k = linear(g, b, &format!("{name}.k"), kv_in);
    let v = linear(g, b, &format!("{name}.v"), kv_in);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice(q, 1, lo, hi);
        let kh = g.slice(k, 1, lo, hi);
        let vh = g.slice(v, 1, lo, hi);
        let logits = g.matmul_nt(qh, kh);
        let mut logits = g.scale(logits, scale);
        if let Some(bias) = bias {
            logits = g.add(logits, bias);
        }
        let attn = g.softmax(logits);
        outs.push(g.matmul(attn, vh));
    }
    let merged = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1) };
    linear(g, b, &format!("{name}.o"), merged)
}

/// Pre-LN transformer block: `x + MHA(LN(x))`, then `h + FFN(LN(h))`.
/// Self-attention over `x` `[n, d]`; `bias` as in
/// [`multihead_attention`].
pub fn transformer_block(g: &mut Graph, b: &Bound, name: &str, x: Var, heads: usize, bias: Option<Var>) -> Var {
    let normed = layer_norm(g, b, &format!("{name}.ln1"), x);
    let attn = multihead_attention(g, b, &format!("{name}.attn"), normed, normed, heads, bias);
    let h = g.add(x, attn);
    let normed = layer_norm(g, b, &format!("{name}.ln2"), h);
    let f = ffn(g, b, &format!("{name}.ffn"), normed);
    g.add(h, f)
}

/// Fixed sinusoidal position table `[n_pos, dim]`: even columns
/// `sin(pos / 10000^(2i/dim))`, odd columns the matching cosine.
pub fn sinusoid_table(n_pos: usize, dim: usize) -> Array2<f64> {
    let mut table = Array2::zeros((n_pos, dim));
    for pos in 0..n_pos {
        for i in 0..dim {
            let freq = 10000f64.powf(-((2 * (i / 2)) as f64) / dim as f64);
            let angle = pos as f64 * freq;
            table[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use maskgrip_grad::{central_difference, relative_error};
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn input(g: &mut Graph, shape: &[usize], seed: u64) -> Var {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let v = normal_array(&mut r, shape, 1.0);
        g.input(v)
    }

    #[test]
    fn linear_matches_manual_product() {
        let mut ps = ParamSet::new();
        let mut r = rng();
        init_linear(&mut ps, &mut r, "fc", 3, 2);
        let mut g = Graph::new();
        let b = Bound::new(&ps, &mut g);
        let x = g.input(ndarray::arr2(&[[1.0, 2.0, 3.0]]).into_dyn());
        let y = linear(&mut g, &b, "fc", x);
        let w = ps.value(0).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let expect: f64 = (0..3).map(|i| [1.0, 2.0, 3.0][i] * w[[i, 0]]).sum();
        assert!((g.value(y)[[0, 0]] - expect).abs() < 1e-12);
        assert_eq!(g.value(y).shape(), &[1, 2]);
    }

    #[test]
    fn layer_norm_standardises_rows() {
        let mut ps = ParamSet::new();
        init_layer_norm(&mut ps, "ln", 8);
        let mut g = Graph::new();
        let b = Bound::new(&ps, &mut g);
        let x = input(&mut g, &[4, 8], 3);
        let y = layer_norm(&mut g, &b, "ln", x);
        let yv = g.value(y);
        for r in 0..4 {
            let row: Vec<f64> = (0..8).map(|c| yv[[r, c]]).collect();
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "row {r} var {var}");
        }
    }

    #[test]
    fn single_head_attention_matches_manual() {
        let mut ps = ParamSet::new();
        let mut r = rng();
        init_attention(&mut ps, &mut r, "attn", 4);
        let mut g = Graph::new();
        let b = Bound::new(&ps, &mut g);
        let x = input(&mut g, &[3, 4], 5);
        let y = multihead_attention(&mut g, &b, "attn", x, x, 1, None);
        assert_eq!(g.value(y).shape(), &[3, 4]);

        let mut g2 = Graph::new();
        let b2 = Bound::new(&ps, &mut g2);
        let x2 = input(&mut g2, &[3, 4], 5);
        let q = linear(&mut g2, &b2, "attn.q", x2);
        let k = linear(&mut g2, &b2, "attn.k", x2);
        let v = linear(&mut g2, &b2, "attn.v", x2);
        let logits = g2.matmul_nt(q, k);
        let logits = g2.scale(logits, 0.5);
        let a = g2.softmax(logits);
        let o = g2.matmul(a, v);
        let y2 = linear(&mut g2, &b2, "attn.o", o);
        assert_eq!(g.value(y), g2.value(y2));
    }

    #[test]
    fn attention_bias_excludes_keys() {
        let mut ps = ParamSet::new();
        let mut r = rng();
        init_attention(&mut ps, &mut r, "attn", 4);

        let run = |kv_seed: u64| -> Arr {
            let mut g = Graph::new();
            let b = Bound::new(&ps, &mut g);
            let q = input(&mut g, &[2, 4], 11);
            let mut kv = {
                let mut r = ChaCha8Rng::seed_from_u64(9);
                normal_array(&mut r, &[3, 4], 1.0)
            };
            // Perturb only the last key/value row; the bias hides it.
            let mut r2 = ChaCha8Rng::seed_from_u64(kv_seed);
            for c in 0..4 {
                kv[[2, c]] = r2.sample(rand_distr::StandardNormal);
            }
            let kv = g.input(kv);
            let mut bias = Arr::zeros(IxDyn(&[2, 3]));
            bias[[0, 2]] = ATTN_NEG;
            bias[[1, 2]] = ATTN_NEG;
            let bias = g.constant(bias);
            let y = multihead_attention(&mut g, &b, "attn", q, kv, 2, Some(bias));
            g.value(y).clone()
        };

        assert_eq!(run(100), run(200));
    }

    #[test]
    fn transformer_block_gradients_match_finite_differences() {
        let mut ps = ParamSet::new();
        let mut r = rng();
        init_block(&mut ps, &mut r, "blk", 4, 8);

        let loss_of = |ps: &ParamSet| -> (f64, Vec<Arr>) {
            let mut g = Graph::new();
            let b = Bound::new(ps, &mut g);
            let x = input(&mut g, &[3, 4], 21);
            let y = transformer_block(&mut g, &b, "blk", x, 2, None);
            let sq = g.mul(y, y);
            let loss = g.mean_all(sq);
            let grads = g.backward(loss);
            let flat: Vec<Arr> = (0..ps.len())
                .map(|i| {
                    let v = b.var(ps.name(i));
                    grads.get_or_zeros(v, ps.value(i).shape())
                })
                .collect();
            (g.value(loss)[ndarray::IxDyn(&[])], flat)
        };

        let (_, grads) = loss_of(&ps);
        let mut ps_mut = ps;
        let mut checked = 0;
        let total = ps_mut.num_scalars();
        let mut probe = ChaCha8Rng::seed_from_u64(4);
        while checked < 25 {
            let flat = probe.gen_range(0..total);
            let (idx, offset) = ps_mut.locate(flat);
            let analytic = grads[idx].as_slice().unwrap()[offset];
            let numeric = central_difference(&mut ps_mut, flat, 1e-5, |p| loss_of(p).0);
            assert!(
                relative_error(analytic, numeric) < 1e-5,
                "param {flat}: analytic {analytic} numeric {numeric}"
            );
            checked += 1;
        }
    }

    #[test]
    fn sinusoid_table_matches_formula_and_separates_positions() {
        let t = sinusoid_table(16, 8);
        assert!((t[[0, 0]] - 0.0).abs() < 1e-12);
        assert!((t[[0, 1]] - 1.0).abs() < 1e-12);
        assert!((t[[3, 0]] - 3f64.sin()).abs() < 1e-12);
        let freq = 10000f64.powf(-2.0 / 8.0);
        assert!((t[[5, 2]] - (5.0 * freq).sin()).abs() < 1e-12);
        assert!((t[[5, 3]] - (5.0 * freq).cos()).abs() < 1e-12);
        for a in 0..16 {
            for b in (a + 1)..16 {
                let d: f64 = (0..8).map(|c| (t[[a, c]] - t[[b, c]]).powi(2)).sum();
                assert!(d > 1e-6, "positions {a} and {b} collide");
            }
        }
    }
}
