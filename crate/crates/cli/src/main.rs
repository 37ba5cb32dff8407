//! Command-line driver: demonstration generation, grounder and policy
//! training, paired evaluation, ablation suites, episode inspection, and
//! report rendering.
//!
//! Every command exits 0 on success.  Usage errors exit 2 with clap's
//! usage text; runtime failures exit 1 with a machine-readable JSON
//! object `{"error":{"code","message"}}` on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::{ArrayView2, ArrayView3, Axis};

use maskgrip_core::catalog::build_catalog;
use maskgrip_core::grounder::train_grounder;
use maskgrip_core::pipeline::{
    ablate, build_grounder_dataset, collect_demos, dataset_hash, evaluate, make_splits,
    train_policy, write_snapshot, AblateBudget, AblationReport, DatasetManifest, EvalReport,
    EvalRequest, MaskProvider, MaskSource, PipelineError, RunConfig, SplitTag, Suite,
};
use maskgrip_core::policy::PolicyModel;
use maskgrip_core::rng::{derive, stream};
use maskgrip_core::store::read_episode;

#[derive(Parser)]
#[command(name = "maskgrip", version, about = "Mask-guided manipulation testbed")]
struct Cli {
    /// Run configuration JSON; defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed for every derived random stream.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Output directory; defaults to runs/<command>.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect expert demonstrations into an episode dataset.
    GenData {
        /// Successful episodes to record per instruction kind.
        #[arg(long, default_value_t = 100)]
        episodes: usize,
    },
    /// Train the grounder on a dataset's first frames.
    TrainGrounder {
        /// Dataset directory written by gen-data.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Behaviour-clone the policy on a dataset.
    TrainPolicy {
        /// Dataset directory written by gen-data.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Mask source: oracle, none, learned:PATH, or noisy[:json].
        #[arg(long, default_value = "oracle")]
        masks: String,
    },
    /// Evaluate a policy checkpoint on fresh paired episodes.
    Eval {
        /// Policy checkpoint to evaluate.
        #[arg(long, value_name = "FILE")]
        policy: PathBuf,
        /// Mask source: oracle, none, learned:PATH, or noisy[:json].
        #[arg(long, default_value = "oracle")]
        masks: String,
        /// Object pool: seen, unseen-instance, or unseen-class.
        #[arg(long)]
        split: Option<String>,
    },
    /// Run one ablation suite end to end.
    Ablate {
        /// data-mix, mask-modules, representations, or grounder-quality.
        #[arg(long)]
        suite: String,
        /// Grounder checkpoint for the learned arm of grounder-quality.
        #[arg(long, value_name = "FILE")]
        grounder: Option<PathBuf>,
        /// Demonstrations collected per instruction kind.
        #[arg(long, default_value_t = 100)]
        train_episodes: usize,
        /// Evaluation episodes per instruction kind, per seed, per arm.
        #[arg(long, default_value_t = 25)]
        eval_episodes: usize,
    },
    /// Dump an episode's frames and mask overlays as PNG files.
    Inspect {
        /// Episode file to render.
        episode: PathBuf,
    },
    /// Render a stored eval or ablation report JSON as markdown.
    Report {
        /// report JSON written by eval or ablate.
        report: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl CliError {
    fn code(&self) -> &'static str {
        match self {
            CliError::Pipeline(e) => e.code(),
            CliError::Image(_) => "image",
        }
    }
}

impl From<maskgrip_core::catalog::CatalogError> for CliError {
    fn from(e: maskgrip_core::catalog::CatalogError) -> Self {
        CliError::Pipeline(e.into())
    }
}

impl From<maskgrip_core::grounder::GrounderError> for CliError {
    fn from(e: maskgrip_core::grounder::GrounderError) -> Self {
        CliError::Pipeline(e.into())
    }
}

impl From<maskgrip_core::policy::PolicyError> for CliError {
    fn from(e: maskgrip_core::policy::PolicyError) -> Self {
        CliError::Pipeline(e.into())
    }
}

impl From<maskgrip_core::store::StoreError> for CliError {
    fn from(e: maskgrip_core::store::StoreError) -> Self {
        CliError::Pipeline(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Pipeline(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Pipeline(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload = serde_json::json!({
                "error": { "code": e.code(), "message": e.to_string() }
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed;
    match cli.command {
        Command::GenData { episodes } => {
            gen_data(&cfg, seed, &out_dir(&cli.out, "gen-data"), episodes)
        }
        Command::TrainGrounder { data } => {
            train_grounder_cmd(&cfg, seed, &out_dir(&cli.out, "train-grounder"), &data)
        }
        Command::TrainPolicy { data, masks } => {
            train_policy_cmd(&cfg, seed, &out_dir(&cli.out, "train-policy"), &data, &masks)
        }
        Command::Eval {
            policy,
            masks,
            split,
        } => eval_cmd(
            &cfg,
            seed,
            &out_dir(&cli.out, "eval"),
            &policy,
            &masks,
            split.as_deref(),
        ),
        Command::Ablate {
            suite,
            grounder,
            train_episodes,
            eval_episodes,
        } => ablate_cmd(
            &cfg,
            seed,
            &out_dir(&cli.out, "ablate"),
            &suite,
            grounder.as_deref(),
            train_episodes,
            eval_episodes,
        ),
        Command::Inspect { episode } => inspect_cmd(&episode, &out_dir(&cli.out, "inspect")),
        Command::Report { report } => report_cmd(&report, cli.out.as_deref()),
    }
}

fn out_dir(out: &Option<PathBuf>, name: &str) -> PathBuf {
    out.clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(name))
}

fn gen_data(cfg: &RunConfig, seed: u64, out: &Path, episodes: usize) -> Result<(), CliError> {
    write_snapshot(out, cfg)?;
    let catalog = build_catalog(&cfg.catalog, derive(seed, stream::CATALOG))?;
    let manifest = collect_demos(
        &catalog, &cfg.gen, &cfg.scene, &cfg.world, episodes, seed, out,
    )?;
    let hash = dataset_hash(out, &manifest)?;
    println!("episodes {}", manifest.episodes.len());
    println!("dataset-hash {hash}");
    Ok(())
}

fn train_grounder_cmd(cfg: &RunConfig, seed: u64, out: &Path, data: &Path) -> Result<(), CliError> {
    let manifest = DatasetManifest::load(data)?;
    manifest.validate(data, None)?;
    let samples = build_grounder_dataset(data, &manifest)?;
    let (model, curve) = train_grounder(&samples, &cfg.grounder, seed)?;
    write_snapshot(out, cfg)?;
    let ckpt = out.join("grounder.ckpt");
    model.save(&ckpt)?;
    std::fs::write(out.join("curve.json"), serde_json::to_string_pretty(&curve)?)?;
    println!("samples {}", samples.len());
    if let Some(last) = curve.last() {
        println!("final-loss {last:.6}");
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn train_policy_cmd(
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
    data: &Path,
    masks: &str,
) -> Result<(), CliError> {
    let source = MaskSource::parse(masks)?;
    let manifest = DatasetManifest::load(data)?;
    manifest.validate(data, None)?;
    let trained = train_policy(
        data,
        &manifest,
        &cfg.policy,
        &cfg.train,
        &cfg.world,
        &source,
        seed,
    )?;
    write_snapshot(out, cfg)?;
    let ckpt = out.join("policy.ckpt");
    trained.model.save(&ckpt)?;
    std::fs::write(
        out.join("curve.json"),
        serde_json::to_string_pretty(&trained.curve)?,
    )?;
    println!("steps {}", trained.curve.len());
    if let Some(last) = trained.curve.last() {
        println!("final-loss {:.6}", last.total);
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn eval_cmd(
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
    policy: &Path,
    masks: &str,
    split: Option<&str>,
) -> Result<(), CliError> {
    let model = PolicyModel::load(policy)?;
    if model.config.image_size != cfg.world.image_size {
        return Err(PipelineError::BadConfig(format!(
            "checkpoint expects {}px frames but the world renders {}px",
            model.config.image_size, cfg.world.image_size
        ))
        .into());
    }
    let source = MaskSource::parse(masks)?;
    let provider = MaskProvider::from_source(&source)?;
    let tag = match split {
        Some(s) => SplitTag::parse(s)?,
        None => cfg.eval.split,
    };
    let catalog = build_catalog(&cfg.catalog, derive(seed, stream::CATALOG))?;
    let assignment = make_splits(&catalog, &cfg.gen.splits, seed)?;
    let req = EvalRequest {
        catalog: &catalog,
        allowed: assignment.pool(tag),
        kinds: &cfg.gen.kinds,
        scene_cfg: &cfg.scene,
        world: &cfg.world,
        episodes_per_kind: cfg.eval.episodes_per_category,
        max_retries: cfg.gen.max_retries,
        seeds: &cfg.eval.seeds,
    };
    let report = evaluate(&model, &provider, &req)?;
    write_snapshot(out, cfg)?;
    std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(out.join("eval.csv"), report.to_csv())?;
    std::fs::write(out.join("eval.md"), report.to_markdown())?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn ablate_cmd(
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
    suite: &str,
    grounder: Option<&Path>,
    train_episodes: usize,
    eval_episodes: usize,
) -> Result<(), CliError> {
    let suite = Suite::parse(suite)?;
    let budget = AblateBudget {
        train_episodes_per_kind: train_episodes,
        eval_episodes_per_kind: eval_episodes,
    };
    write_snapshot(out, cfg)?;
    let report = ablate(cfg, suite, &budget, grounder, seed, out)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn inspect_cmd(episode: &Path, out: &Path) -> Result<(), CliError> {
    let ep = read_episode(episode)?;
    std::fs::create_dir_all(out)?;
    let steps = ep.steps();
    for t in 0..steps {
        let img = ep.images.index_axis(Axis(0), t);
        frame_image(img).save(out.join(format!("frame_{t:03}.png")))?;
        let obj = ep.mask_obj.index_axis(Axis(0), t);
        let plc = ep.mask_plc.index_axis(Axis(0), t);
        overlay_image(img, obj, plc).save(out.join(format!("overlay_{t:03}.png")))?;
    }
    println!("instruction {:?}", ep.instruction);
    println!("category {}", ep.category);
    println!("steps {steps}");
    println!("images {} in {}", 2 * steps, out.display());
    Ok(())
}

fn frame_image(img: ArrayView3<u8>) -> image::RgbImage {
    let (h, w, _) = img.dim();
    let mut px = Vec::with_capacity(h * w * 3);
    px.extend(img.iter().copied());
    image::RgbImage::from_raw(w as u32, h as u32, px).expect("pixel buffer matches dimensions")
}

/// The frame with the target mask pushed towards red and the placement
/// mask towards green; overlap reads as yellow.
fn overlay_image(img: ArrayView3<u8>, obj: ArrayView2<u8>, plc: ArrayView2<u8>) -> image::RgbImage {
    let (h, w, _) = img.dim();
    let mut px = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (mut r, mut g, mut b) = (img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]);
            let on_obj = obj[[y, x]] != 0;
            if on_obj {
                r = 255;
                g /= 2;
                b /= 2;
            }
            if plc[[y, x]] != 0 {
                g = 255;
                b /= 2;
                if !on_obj {
                    r /= 2;
                }
            }
            px.extend([r, g, b]);
        }
    }
    image::RgbImage::from_raw(w as u32, h as u32, px).expect("pixel buffer matches dimensions")
}

fn report_cmd(path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path)?;
    let md = if let Ok(r) = serde_json::from_str::<AblationReport>(&text) {
        r.to_markdown()
    } else if let Ok(r) = serde_json::from_str::<EvalReport>(&text) {
        r.to_markdown()
    } else {
        return Err(PipelineError::BadConfig(format!(
            "{} is neither an ablation report nor an evaluation report",
            path.display()
        ))
        .into());
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.md"), &md)?;
    }
    print!("{md}");
    Ok(())
}
