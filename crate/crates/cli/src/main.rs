use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use mvs_core::config::RunConfig;
use mvs_core::data::pfm::{read_pfm, write_pfm};
use mvs_core::data::synthetic::{generate_synthetic_dataset, SyntheticConfig};
use mvs_core::data::{load_mvs_scene, save_image};
use mvs_core::fusion_eval::ply::{read_ply, write_ply, PlyFormat};
use mvs_core::fusion_eval::{
    evaluate_depth_accuracy, evaluate_point_cloud, filter_depth_maps, fuse_point_cloud, mean_abs_depth_error, EvalReport, FusionConfig,
};
use mvs_core::geometry::Camera;
use mvs_core::trainer::{render_debug, run_inference, run_training, write_inference, Checkpoint, TrainingSet};
use mvs_autograd::Tensor;

#[derive(Parser)]
#[command(name = "mvs", version, about = "Unsupervised multi-view stereo: training, inference, fusion and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train both branches from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict depth and confidence maps for every view of a scene.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Views per prediction, reference included.
        #[arg(long, default_value_t = 5)]
        views: usize,
    },
    /// Filter depth maps and fuse them into a point cloud.
    Fuse(FuseArgs),
    /// Accuracy, completeness and overall distance between two clouds.
    EvalCloud {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 20.0)]
        max_dist: f64,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Fraction of pixels within each depth threshold.
    EvalDepth {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        thresholds: Vec<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Generate synthetic scenes with ground-truth depth.
    GenData(GenArgs),
    /// Write the synthesised image, rendered depth and backbone depth of one view.
    RenderDebug {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        view: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Output of `infer` (with `depths/` and `confidence/`), or a directory of depth PFMs.
    #[arg(long)]
    depths: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    conf: f64,
    #[arg(long, default_value_t = 1.0)]
    reproj: f64,
    #[arg(long, default_value_t = 0.01)]
    reldepth: f64,
    #[arg(long, default_value_t = 3)]
    views: usize,
    /// Deduplication voxel edge; 0 keeps every point.
    #[arg(long, default_value_t = 1e-3)]
    voxel: f64,
    /// Write ASCII instead of binary PLY.
    #[arg(long)]
    ascii: bool,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of scenes with specular materials.
    #[arg(long, default_value_t = 1.0 / 3.0)]
    specular: f64,
    /// Fraction of scenes with a thin occluder.
    #[arg(long, default_value_t = 0.0)]
    occluders: f64,
    #[arg(long, default_value_t = 5)]
    views: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 80)]
    width: usize,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { config, seed } => train(&config, seed),
        Command::Infer { checkpoint, scene, out, views } => infer(&checkpoint, &scene, &out, views),
        Command::Fuse(a) => fuse(&a),
        Command::EvalCloud { pred, reference, max_dist, json } => {
            let p = read_ply(&pred)?;
            let r = read_ply(&reference)?;
            let report = EvalReport { cloud: Some(evaluate_point_cloud(&p, &r, max_dist)?), ..Default::default() };
            print_report(&report, json)
        }
        Command::EvalDepth { pred, gt, thresholds, json } => eval_depth(&pred, &gt, &thresholds, json),
        Command::GenData(a) => {
            let cfg = SyntheticConfig {
                height: a.height,
                width: a.width,
                views: a.views,
                scenes: a.scenes,
                seed: a.seed,
                specular_fraction: a.specular,
                occluder_fraction: a.occluders,
                ..Default::default()
            };
            let dirs = generate_synthetic_dataset(&a.out, &cfg)?;
            info!("wrote {} scenes to {}", dirs.len(), a.out.display());
            Ok(())
        }
        Command::RenderDebug { checkpoint, scene, view, out } => debug_render(&checkpoint, &scene, view, &out),
    }
}

fn train(config: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if cfg.data.root.as_os_str().is_empty() {
        bail!("{}: data.root is not set", config.display());
    }
    let data = TrainingSet::load(&cfg.data.root, cfg.train.n_views, cfg.backbone.stages.len())?;
    std::fs::create_dir_all(&cfg.output)?;
    std::fs::write(cfg.output.join("config.toml"), cfg.to_toml()?)?;
    let report = run_training(cfg, data)?;
    info!("metric log: {}", report.metric_log.display());
    if let Some(last) = report.checkpoints.last() {
        info!("final checkpoint: {}", last.display());
    }
    Ok(())
}

fn infer(checkpoint: &Path, scene: &Path, out: &Path, views: usize) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let scene = load_mvs_scene(scene)?;
    let results = run_inference(&ck, &scene, views, None)?;
    write_inference(out, &results)?;
    info!("wrote {} depth maps to {}", results.len(), out.display());
    Ok(())
}

fn fuse(a: &FuseArgs) -> Result<()> {
    let cfg = FusionConfig { confidence: a.conf, reproj_px: a.reproj, rel_depth: a.reldepth, min_views: a.views, voxel_size: a.voxel, ..Default::default() };
    let scene = load_mvs_scene(&a.scene)?;
    let (depth_dir, conf_dir) = if a.depths.join("depths").is_dir() {
        (a.depths.join("depths"), Some(a.depths.join("confidence")))
    } else {
        let sibling = a.depths.parent().map(|p| p.join("confidence")).filter(|p| p.is_dir());
        (a.depths.clone(), sibling)
    };
    let (mut depths, mut confs, mut cams, mut images) = (Vec::new(), Vec::new(), Vec::<Camera>::new(), Vec::new());
    for v in &scene.views {
        let name = format!("{:08}.pfm", v.view_id);
        let d = read_pfm(&depth_dir.join(&name))?;
        let c = match &conf_dir {
            Some(dir) if dir.join(&name).exists() => read_pfm(&dir.join(&name))?,
            _ => {
                warn!("no confidence map for view {}; treating every pixel as confident", v.view_id);
                Tensor::ones(d.shape())
            }
        };
        if d.shape() != [v.image.dim(1), v.image.dim(2)] {
            bail!("{}: depth map {:?} does not match image size", depth_dir.join(&name).display(), d.shape());
        }
        depths.push(d);
        confs.push(c);
        cams.push(v.camera.clone());
        images.push(v.image.clone());
    }
    let filtered = filter_depth_maps(&depths, &confs, &cams, None, &cfg)?;
    let cloud = fuse_point_cloud(&filtered, &cams, Some(&images), cfg.voxel_size)?;
    let format = if a.ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
    write_ply(&a.out, &cloud, format)?;
    info!("fused {} points into {}", cloud.len(), a.out.display());
    Ok(())
}

fn eval_depth(pred: &Path, gt: &Path, thresholds: &[f64], json: bool) -> Result<()> {
    let pred_dir = if pred.join("depths").is_dir() { pred.join("depths") } else { pred.to_path_buf() };
    let mut names: Vec<PathBuf> = std::fs::read_dir(&pred_dir)
        .with_context(|| format!("reading {}", pred_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pfm"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no .pfm depth maps in {}", pred_dir.display());
    }
    let (mut all_p, mut all_g) = (Vec::new(), Vec::new());
    for p in &names {
        let g = gt.join(p.file_name().expect("file name"));
        let (dp, dg) = (read_pfm(p)?, read_pfm(&g)?);
        if dp.shape() != dg.shape() {
            bail!("{} and {} differ in size", p.display(), g.display());
        }
        all_p.extend_from_slice(dp.data());
        all_g.extend_from_slice(dg.data());
    }
    let n = all_p.len();
    let (tp, tg) = (Tensor::new(&[n], all_p), Tensor::new(&[n], all_g));
    let fractions = evaluate_depth_accuracy(&tp, &tg, None, thresholds)?;
    let report = EvalReport {
        depth_thresholds: thresholds.iter().copied().zip(fractions).collect(),
        mean_abs_error: Some(mean_abs_depth_error(&tp, &tg, None)?),
        ..Default::default()
    };
    print_report(&report, json)
}

fn print_report(report: &EvalReport, json: bool) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(report)?);
    } else {
        print!("{}", report.table());
    }
    Ok(())
}

/// Grey-scale `[3, H, W]` image of a depth map, near = bright.
fn depth_image(d: &Tensor, lo: f64, hi: f64) -> Tensor {
    let span = (hi - lo).max(1e-12);
    let hw = d.len();
    Tensor::from_fn(&[3, d.dim(0), d.dim(1)], |i| (1.0 - (d.data()[i % hw] - lo) / span).clamp(0.0, 1.0))
}

fn side_by_side(parts: &[&Tensor]) -> Tensor {
    let (h, widths): (usize, Vec<usize>) = (parts[0].dim(1), parts.iter().map(|p| p.dim(2)).collect());
    let total: usize = widths.iter().sum();
    let mut out = Tensor::zeros(&[3, h, total]);
    let mut x0 = 0;
    for (p, w) in parts.iter().zip(&widths) {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..*w {
                    out.data_mut()[(c * h + y) * total + x0 + x] = p.data()[(c * h + y) * w + x];
                }
            }
        }
        x0 += w;
    }
    out
}

fn debug_render(checkpoint: &Path, scene: &Path, view: usize, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let scene = load_mvs_scene(scene)?;
    let r = render_debug(&ck, &scene, view, ck.config.train.seed)?;
    let cam = &scene.view(view)?.camera;
    let (lo, hi) = (cam.depth_min, cam.depth_max);
    let rendered = depth_image(&r.rendered_depth, lo, hi);
    let backbone = depth_image(&r.backbone_depth, lo, hi);
    std::fs::create_dir_all(out)?;
    save_image(&out.join("synthesized.png"), &r.rgb)?;
    save_image(&out.join("rendered_depth.png"), &rendered)?;
    save_image(&out.join("backbone_depth.png"), &backbone)?;
    save_image(&out.join("side_by_side.png"), &side_by_side(&[&scene.view(view)?.image, &r.rgb, &rendered, &backbone]))?;
    write_pfm(&out.join("rendered_depth.pfm"), &r.rendered_depth)?;
    write_pfm(&out.join("backbone_depth.pfm"), &r.backbone_depth)?;
    info!("wrote debug images to {}", out.display());
    Ok(())
}
