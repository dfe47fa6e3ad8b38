//! `psm` — label-free cell recognition via prior self-activation maps.
//!
//! Every pipeline stage is independently invokable; `run` chains them. Seeds
//! default to the `PSM_SEED` environment variable (flags > config file >
//! environment > 42). Exit code 0 only when all requested stages succeed.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use psm_core::imageio;
use psm_core::nn::{ScoreNet, ZReduce};
use psm_core::pipeline::{
    self, env_seed, render_instance_tint, render_label_tint, render_points, render_psm,
    render_voronoi, Canvas, PipelineConfig, RenderKind, RunContext,
};
use psm_core::proxy::ProxyTask;
use psm_core::psm::{MaskTask, MiddleCluster};
use psm_core::synth::{self, OverlapPolicy, SynthConfig};
use psm_core::tensor::read_psmt_file;
use psm_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "psm",
    version,
    about = "Unsupervised cell recognition with prior self-activation maps"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic histology dataset with ground truth.
    Synth {
        /// Number of images.
        #[arg(long)]
        n: usize,
        /// Image side length in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Base seed (default: $PSM_SEED or 42).
        #[arg(long)]
        seed: Option<u64>,
        /// Probability that a cell is class 1 (positive/brown).
        #[arg(long, default_value_t = 0.5)]
        class_mix: f64,
        /// Minimum cells per image.
        #[arg(long, default_value_t = 3)]
        cells_min: usize,
        /// Maximum cells per image.
        #[arg(long, default_value_t = 8)]
        cells_max: usize,
        /// Gaussian pixel-noise standard deviation.
        #[arg(long, default_value_t = 0.03)]
        noise: f64,
        /// Class-1 stain color as `r,g,b` in [0,1].
        #[arg(long)]
        color_pos: Option<String>,
        /// Class-2 stain color as `r,g,b` in [0,1].
        #[arg(long)]
        color_neg: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the activation net on a self-supervised proxy task.
    TrainProxy {
        /// Proxy task: similarity | contrastive.
        #[arg(long, default_value = "similarity")]
        task: String,
        #[arg(long, default_value_t = 2)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory of training images.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute prior self-activation maps from a trained checkpoint.
    Psm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Gradient-tap depth (1 = shallowest block).
        #[arg(long, default_value_t = 1)]
        depth: usize,
        /// Embedding scalarization: sum | l1.
        #[arg(long, default_value = "sum")]
        z_reduce: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse PSMs with raw images and cluster into pseudo masks.
    Cluster {
        #[arg(long)]
        data: PathBuf,
        /// Directory of psm_*.psmt files.
        #[arg(long)]
        psm: PathBuf,
        /// Target task: seg | det.
        #[arg(long, default_value = "seg")]
        task: String,
        /// Fusion weight (default: 2.5 for seg, 4 for det).
        #[arg(long)]
        beta: Option<f64>,
        /// Number of K-Means piles (the pseudo-mask rule needs 3).
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Middle-PSM pile policy for seg: background | ignore.
        #[arg(long, default_value = "background")]
        middle: String,
        /// K-Means restarts per image.
        #[arg(long, default_value_t = 10)]
        restarts: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Voronoi-partition pseudo-mask centroids into partial labels.
    Voronoi {
        /// Directory of sg_*.png pseudo masks.
        #[arg(long)]
        masks: PathBuf,
        /// Seed-disk radius in pixels.
        #[arg(long, default_value_t = 2)]
        radius: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the segmentation score net on pseudo + Voronoi labels.
    TrainSeg {
        #[arg(long)]
        data: PathBuf,
        /// Directory of sg_*.png pseudo masks.
        #[arg(long)]
        sg: PathBuf,
        /// Directory of vor_*.png Voronoi labels.
        #[arg(long)]
        vor: PathBuf,
        /// Voronoi-branch weight in the partial cross-entropy.
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 2)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the detection score net on two-class pseudo masks.
    TrainDet {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sg: PathBuf,
        /// Detection classes (score-map channels).
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 2)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run inference on one image or a whole directory: instance mask (seg)
    /// or points CSV (det).
    Infer {
        /// Task: seg | det.
        #[arg(long)]
        task: String,
        /// Input image, or a data directory (then --out is a directory).
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Foreground threshold (seg).
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
        /// Local-extremum window radius (det).
        #[arg(long, default_value_t = 3)]
        window_radius: usize,
        /// Minimum peak score (det).
        #[arg(long, default_value_t = 0.3)]
        min_score: f32,
        /// Accept ties in the extremum window (det).
        #[arg(long, default_value_t = false)]
        tie_break: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate predictions against ground truth; one CSV row per image
    /// plus an aggregate row.
    Eval {
        /// Task: seg | det.
        #[arg(long)]
        task: String,
        /// Directory of inst_*.png or points_*.csv predictions.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth directory (synth manifest or mask_*/points_* files).
        #[arg(long)]
        gt: PathBuf,
        /// Point-match radius (det).
        #[arg(long, default_value_t = 6.0)]
        radius: f64,
        /// Output report CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rerun the pipeline across a hyperparameter axis: depth | proxy.
    Ablate {
        /// Axis: depth | proxy.
        #[arg(long)]
        kind: String,
        /// Comma-separated tap depths (depth ablation).
        #[arg(long, default_value = "1,4")]
        depths: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Flat key = value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Render an artifact over its base image as a PNG overlay.
    Render {
        /// Artifact kind: psm | mask | voronoi | points.
        #[arg(long)]
        kind: String,
        /// Artifact path (.psmt, .png label/instance map, or .csv points).
        #[arg(long)]
        artifact: PathBuf,
        /// Base RGB image.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full unsupervised loop (train → pseudo-label → train → infer,
    /// with optional eval).
    Run {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Flat key = value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
}

/// Config overrides shared by `run` and `ablate`; any flag given here wins
/// over the config file, which wins over defaults.
#[derive(Args)]
struct OverrideArgs {
    /// Task: seg | det.
    #[arg(long)]
    task: Option<String>,
    /// Proxy task: similarity | contrastive.
    #[arg(long)]
    proxy: Option<String>,
    /// Gradient-tap depth.
    #[arg(long)]
    depth: Option<usize>,
    /// Embedding scalarization: sum | l1.
    #[arg(long)]
    z_reduce: Option<String>,
    /// Fusion weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Voronoi-branch loss weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// K-Means piles.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    proxy_epochs: Option<usize>,
    #[arg(long)]
    train_epochs: Option<usize>,
    /// Base learning rate for both training stages.
    #[arg(long)]
    lr: Option<f64>,
    /// Proxy-stage learning rate (overrides --lr).
    #[arg(long)]
    proxy_lr: Option<f64>,
    /// Downstream-stage learning rate (overrides --lr).
    #[arg(long)]
    train_lr: Option<f64>,
    /// K-Means restarts per image.
    #[arg(long)]
    restarts: Option<usize>,
    /// Middle-PSM pile policy: background | ignore.
    #[arg(long)]
    middle: Option<String>,
    /// Voronoi seed-disk radius.
    #[arg(long)]
    voronoi_radius: Option<usize>,
    /// Detection classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Segmentation foreground threshold.
    #[arg(long)]
    threshold: Option<f32>,
    /// Detection window radius.
    #[arg(long)]
    window_radius: Option<usize>,
    /// Detection minimum peak score.
    #[arg(long)]
    min_score: Option<f32>,
    /// Accept extremum-window ties.
    #[arg(long)]
    tie_break: Option<bool>,
    /// Evaluation point-match radius.
    #[arg(long)]
    match_radius: Option<f64>,
    /// Run the eval stage (requires ground truth in --data).
    #[arg(long)]
    eval: Option<bool>,
}

impl OverrideArgs {
    fn apply(&self, cfg: &mut PipelineConfig) -> Result<()> {
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut push_opt = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k.to_string(), v));
            }
        };
        push_opt("task", self.task.clone());
        push_opt("proxy", self.proxy.clone());
        push_opt("depth", self.depth.map(|v| v.to_string()));
        push_opt("z_reduce", self.z_reduce.clone());
        push_opt("beta", self.beta.map(|v| v.to_string()));
        push_opt("lambda", self.lambda.map(|v| v.to_string()));
        push_opt("k", self.k.map(|v| v.to_string()));
        push_opt("seed", self.seed.map(|v| v.to_string()));
        push_opt("proxy_epochs", self.proxy_epochs.map(|v| v.to_string()));
        push_opt("train_epochs", self.train_epochs.map(|v| v.to_string()));
        push_opt("lr", self.lr.map(|v| v.to_string()));
        push_opt("proxy_lr", self.proxy_lr.map(|v| v.to_string()));
        push_opt("train_lr", self.train_lr.map(|v| v.to_string()));
        push_opt("restarts", self.restarts.map(|v| v.to_string()));
        push_opt("middle", self.middle.clone());
        push_opt("voronoi_radius", self.voronoi_radius.map(|v| v.to_string()));
        push_opt("classes", self.classes.map(|v| v.to_string()));
        push_opt("threshold", self.threshold.map(|v| v.to_string()));
        push_opt("window_radius", self.window_radius.map(|v| v.to_string()));
        push_opt("min_score", self.min_score.map(|v| v.to_string()));
        push_opt("tie_break", self.tie_break.map(|v| v.to_string()));
        push_opt("match_radius", self.match_radius.map(|v| v.to_string()));
        push_opt("eval", self.eval.map(|v| v.to_string()));
        for (k, v) in kv {
            cfg.apply_kv(&k, &v)?;
        }
        Ok(())
    }
}

/// Seed precedence for standalone stages: flag > environment > 42.
fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    match flag {
        Some(s) => Ok(s),
        None => env_seed(),
    }
}

/// Parses `r,g,b` with components in [0,1].
fn parse_rgb(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "expected `r,g,b`, got `{s}`"
        )));
    }
    let mut rgb = [0f64; 3];
    for (slot, p) in rgb.iter_mut().zip(&parts) {
        let v: f64 = p
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad color component `{p}`")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!(
                "color component {v} outside [0,1]"
            )));
        }
        *slot = v;
    }
    Ok(rgb)
}

/// Config assembly for `run`/`ablate`: defaults (+ env seed), then file,
/// then flags.
fn assemble_config(config: &Option<PathBuf>, overrides: &OverrideArgs) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default_with_env()?;
    if let Some(path) = config {
        cfg.apply_file(path)?;
    }
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth {
            n,
            size,
            seed,
            class_mix,
            cells_min,
            cells_max,
            noise,
            color_pos,
            color_neg,
            out,
        } => {
            let mut cfg = SynthConfig {
                size,
                cells_min,
                cells_max,
                class_mix,
                noise,
                overlap: OverlapPolicy::None,
                seed: resolve_seed(seed)?,
                ..SynthConfig::default()
            };
            if let Some(s) = color_pos {
                cfg.color_pos = parse_rgb(&s)?;
            }
            if let Some(s) = color_neg {
                cfg.color_neg = parse_rgb(&s)?;
            }
            let entries = synth::generate_dataset(&cfg, n, &out)?;
            println!("wrote {} images to {}", entries.len(), out.display());
        }
        Cmd::TrainProxy {
            task,
            epochs,
            lr,
            seed,
            data,
            out,
        } => {
            let ctx = RunContext::with_progress();
            let report = pipeline::stage_train_proxy(
                &ctx,
                &data,
                ProxyTask::parse(&task)?,
                epochs,
                lr,
                resolve_seed(seed)?,
                &out,
            )?;
            for (i, loss) in report.epoch_losses.iter().enumerate() {
                println!("epoch {i}: mean loss {loss:.6}");
            }
            println!("checkpoint saved to {}", out.display());
        }
        Cmd::Psm {
            data,
            ckpt,
            depth,
            z_reduce,
            out,
        } => {
            let ctx = RunContext::with_progress();
            let paths = pipeline::stage_psm(
                &ctx,
                &data,
                &ckpt,
                depth,
                ZReduce::parse(&z_reduce)?,
                &out,
            )?;
            println!("wrote {} activation maps to {}", paths.len(), out.display());
        }
        Cmd::Cluster {
            data,
            psm,
            task,
            beta,
            k,
            middle,
            restarts,
            seed,
            out,
        } => {
            let task = MaskTask::parse(&task)?;
            let beta = beta.unwrap_or(match task {
                MaskTask::Segmentation => 2.5,
                MaskTask::MulticlassDetection => 4.0,
            });
            let ctx = RunContext::with_progress();
            let outcome = pipeline::stage_cluster(
                &ctx,
                &data,
                &psm,
                task,
                beta,
                k,
                MiddleCluster::parse(&middle)?,
                restarts,
                resolve_seed(seed)?,
                &out,
            )?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "wrote {} pseudo masks to {}",
                outcome.paths.len(),
                out.display()
            );
        }
        Cmd::Voronoi { masks, radius, out } => {
            let ctx = RunContext::with_progress();
            let outcome = pipeline::stage_voronoi(&ctx, &masks, radius, &out)?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "wrote {} Voronoi label maps to {}",
                outcome.paths.len(),
                out.display()
            );
        }
        Cmd::TrainSeg {
            data,
            sg,
            vor,
            lambda,
            epochs,
            lr,
            seed,
            out,
        } => {
            let ctx = RunContext::with_progress();
            let report = pipeline::stage_train_seg(
                &ctx,
                &data,
                &sg,
                &vor,
                lambda,
                epochs,
                lr,
                resolve_seed(seed)?,
                &out,
            )?;
            for (i, loss) in report.epoch_losses.iter().enumerate() {
                println!("epoch {i}: mean loss {loss:.6}");
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("checkpoint saved to {}", out.display());
        }
        Cmd::TrainDet {
            data,
            sg,
            classes,
            epochs,
            lr,
            seed,
            out,
        } => {
            let ctx = RunContext::with_progress();
            let report = pipeline::stage_train_det(
                &ctx,
                &data,
                &sg,
                classes,
                epochs,
                lr,
                resolve_seed(seed)?,
                &out,
            )?;
            for (i, loss) in report.epoch_losses.iter().enumerate() {
                println!("epoch {i}: mean loss {loss:.6}");
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("checkpoint saved to {}", out.display());
        }
        Cmd::Infer {
            task,
            input,
            ckpt,
            threshold,
            window_radius,
            min_score,
            tie_break,
            out,
        } => {
            let task = MaskTask::parse(&task)?;
            let params = pipeline::InferParams {
                threshold,
                window_radius,
                min_score,
                tie_break,
            };
            if input.is_dir() {
                let ctx = RunContext::with_progress();
                let paths = pipeline::stage_infer(&ctx, &input, &ckpt, task, params, &out)?;
                println!("{} predictions -> {}", paths.len(), out.display());
            } else {
                let net = ScoreNet::<f32>::load(&ckpt)?;
                let image = imageio::load_rgb::<f32>(&input)?;
                match task {
                    MaskTask::Segmentation => {
                        let inst = pipeline::infer_seg_image(&net, image, threshold)?;
                        imageio::save_instance_mask(&out, &inst)?;
                        let n = inst.data().iter().copied().max().unwrap_or(0);
                        println!("{n} instances -> {}", out.display());
                    }
                    MaskTask::MulticlassDetection => {
                        let pts = pipeline::infer_det_image(
                            &net,
                            image,
                            window_radius,
                            min_score,
                            tie_break,
                        )?;
                        imageio::save_points_csv(&out, &pts)?;
                        println!("{} points -> {}", pts.len(), out.display());
                    }
                }
            }
        }
        Cmd::Eval {
            task,
            pred,
            gt,
            radius,
            out,
        } => {
            let ctx = RunContext::with_progress();
            match MaskTask::parse(&task)? {
                MaskTask::Segmentation => {
                    let s = pipeline::stage_eval_seg(&ctx, &pred, &gt, Some(&out))?;
                    println!(
                        "{} images: pixel IoU {:.4}, pixel F1 {:.4}, AJI {:.4}, object Dice {:.4}",
                        s.rows.len(),
                        s.mean_iou,
                        s.mean_f1,
                        s.mean_aji,
                        s.mean_dice
                    );
                }
                MaskTask::MulticlassDetection => {
                    let s = pipeline::stage_eval_det(&ctx, &pred, &gt, radius, Some(&out))?;
                    println!(
                        "{} images: P {:.4}, R {:.4}, F1 {:.4}, MP {:.2}, MN {:.2}",
                        s.rows.len(),
                        s.precision,
                        s.recall,
                        s.f1,
                        s.mp,
                        s.mn
                    );
                }
            }
            println!("report -> {}", out.display());
        }
        Cmd::Ablate {
            kind,
            depths,
            data,
            out,
            config,
            overrides,
        } => {
            let cfg = assemble_config(&config, &overrides)?;
            let ctx = RunContext::with_progress();
            let rows = match kind.as_str() {
                "depth" => {
                    let depths: Vec<usize> = depths
                        .split(',')
                        .map(|d| {
                            d.trim().parse().map_err(|_| {
                                psm_core::Error::InvalidArgument(format!(
                                    "bad depth `{d}` in --depths"
                                ))
                            })
                        })
                        .collect::<Result<_>>()?;
                    pipeline::ablate_depth(&ctx, &cfg, &depths, &data, &out)?
                }
                "proxy" => pipeline::ablate_proxy(&ctx, &cfg, &data, &out)?,
                other => {
                    return Err(psm_core::Error::InvalidArgument(format!(
                        "unknown ablation kind `{other}` (expected depth|proxy)"
                    )))
                }
            };
            for r in &rows {
                println!(
                    "{}: pixel F1 {:.4}, AJI {:.4}",
                    r.variant, r.pixel_f1, r.aji
                );
            }
            println!("tables -> {}", out.display());
        }
        Cmd::Render {
            kind,
            artifact,
            base,
            out,
        } => {
            let canvas = Canvas::from_tensor(&imageio::load_rgb::<f32>(&base)?)?;
            let rendered = match RenderKind::parse(&kind)? {
                RenderKind::Psm => {
                    let t = read_psmt_file::<f32>(&artifact)?;
                    render_psm(&canvas, &imageio::tensor_to_map(&t)?)?
                }
                RenderKind::Mask => {
                    // 16-bit PNGs hold instance ids, 8-bit PNGs class labels
                    if imageio::png_is_16bit(&artifact)? {
                        render_instance_tint(&canvas, &imageio::load_instance_mask(&artifact)?)?
                    } else {
                        render_label_tint(&canvas, &imageio::load_label_map(&artifact)?)?
                    }
                }
                RenderKind::Voronoi => {
                    render_voronoi(&canvas, &imageio::load_label_map(&artifact)?)?
                }
                RenderKind::Points => {
                    render_points(&canvas, &imageio::load_points_csv(&artifact)?)?
                }
            };
            rendered.save(&out)?;
            println!("rendered {} -> {}", artifact.display(), out.display());
        }
        Cmd::Run {
            data,
            out,
            config,
            overrides,
        } => {
            let cfg = assemble_config(&config, &overrides)?;
            let ctx = RunContext::with_progress();
            let report = pipeline::run_pipeline(&ctx, &cfg, &data, &out)?;
            for (section, key, value) in &report.rows {
                if section == "metric" {
                    println!("{key} = {value}");
                }
            }
            let total: f64 = report.timings.iter().map(|(_, s)| s).sum();
            println!("total {total:.1}s; artifacts -> {}", out.display());
        }
    }
    Ok(())
}
