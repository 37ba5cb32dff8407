//! maskgrip: a desk-scale, fully testable study of grounding-mask-guided
//! manipulation.
//!
//! The crate implements a complete closed loop on a 2D kinematic tabletop:
//!
//! * [`world`] — deterministic scene sampling, rendering with ground-truth
//!   masks, action stepping, a scripted expert, and contact/success judging.
//! * [`catalog`] — a procedural object catalog with attribute keywords and
//!   phrases, plus the embedding providers used for distractor ranking.
//! * [`instr`] — the four instruction generators (easy, appearance, spatial,
//!   commonsense) and diversity metrics over instruction sets.
//! * [`grounder`] — (image, instruction) → target/placement masks: oracle,
//!   learned (FiLM-conditioned conv encoder/decoder), and noisy variants,
//!   with BCE+DICE training and mIoU evaluation.
//! * [`policy`] — the mask-guided imitation policy: channel-concat fusion,
//!   patch encoder, grounded perceiver with mask-fill attention, block-causal
//!   temporal transformer, and Smooth-L1 + BCE action losses.
//! * [`pipeline`] — demonstration collection, split construction, policy
//!   training, masks-once rollouts, evaluation reports, and ablation suites.
//! * [`store`] — binary episode files, dataset manifests, checkpoints, and
//!   the run configuration schema.
//!
//! Everything is deterministic under explicit seeds: parallel code paths
//! reduce in index order so results are identical at any thread count.

pub mod canon;
pub mod catalog;
pub mod embed;
pub mod grounder;
pub mod instr;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod policy;
pub mod remote;
pub mod rng;
pub mod store;
pub mod world;
