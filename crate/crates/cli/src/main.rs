//! Pipeline driver: generate or ingest a scene, partition it into ground-plane
//! blocks, train each block independently (optionally in parallel), fuse the
//! trained blocks, render, and evaluate.
//!
//! Artifacts live under one run directory: `config.txt` (the resolved
//! configuration, reapplied by every later stage), `partition/` (grid, block
//! manifest, visibility masks), `blocks/` (per-block checkpoints and metrics),
//! `fused/` (refiltered block models), `renders/` and `eval.jsonl`.
//!
//! Configuration precedence, lowest to highest: built-in defaults, the run
//! directory's `config.txt`, command-line flags, then `--config FILE` — an
//! explicit config file wins over flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lodsplat_core::binio::{ByteReader, ByteWriter};
use lodsplat_core::colmap::{load_colmap_text, write_colmap_text};
use lodsplat_core::config::PipelineConfig;
use lodsplat_core::fusion::{evaluate, fuse, render_global, FusedScene};
use lodsplat_core::image::{write_image, write_mask_png};
use lodsplat_core::model::{read_block_model, write_block_model, BlockModel};
use lodsplat_core::partition::{
    assign_views, build_visibility_mask, partition_uniform, BlockData, BlockGrid, BlockRecord,
};
use lodsplat_core::rasterize::RasterOpts;
use lodsplat_core::scene::SceneBundle;
use lodsplat_core::synth::{generate_synthetic_scene, SynthSpec};
use lodsplat_core::trainer::train_block;

#[derive(Parser)]
#[command(
    name = "lodsplat",
    about = "Block-wise hierarchical Gaussian splatting at desk scale",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Config file applied last (overrides flags).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (flag-level override).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic scene in COLMAP text layout.
    Synth {
        /// Output scene directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        points: usize,
        #[arg(long, default_value_t = 36)]
        views: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        /// Scene box side lengths, comma separated.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [8.0, 8.0, 2.0])]
        extent: Vec<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Partition a scene into ground-plane blocks and write the manifest.
    Partition {
        /// Scene directory (COLMAP text).
        #[arg(long = "in")]
        input: PathBuf,
        /// Run directory for all derived artifacts.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        nx: Option<usize>,
        #[arg(long)]
        ny: Option<usize>,
        #[arg(long)]
        tau_p: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a single block.
    TrainBlock {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Block grid index as `ix,iy`.
        #[arg(long)]
        block: String,
        #[arg(long)]
        iterations: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train every block with at least one assigned view.
    TrainAll {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Worker processes to run concurrently (one block each).
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        #[arg(long)]
        iterations: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Refilter trained blocks and assemble the fused scene.
    Fuse {
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render views of the fused scene to PNG.
    Render {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// View id; omit to render every view in the scene.
        #[arg(long)]
        view: Option<u32>,
        /// Explicit output file (single view only).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score the fused scene against ground-truth images.
    Eval {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Comma-separated view ids; defaults to views assigned to no block.
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<u32>>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {:#}", e);
        std::process::exit(1);
    }
}

/// Resolve the effective config: defaults → run config.txt → flags → --config.
/// `flags` applies the subcommand's own overrides; the --config file is layered
/// on last so its settings win over anything given on the command line.
fn resolve_config(
    run: Option<&Path>,
    args: &ConfigArgs,
    flags: impl FnOnce(&mut PipelineConfig),
) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(run) = run {
        let path = run.join("config.txt");
        if path.exists() {
            cfg.apply_file(&path)?;
        }
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    flags(&mut cfg);
    if let Some(file) = &args.config {
        cfg.apply_file(file)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_scene(dir: &Path) -> Result<SceneBundle> {
    load_colmap_text(dir).with_context(|| format!("loading scene from {}", dir.display()))
}

/// Deterministically re-derive the partition a run trains on.
fn partition_scene(
    bundle: &SceneBundle,
    cfg: &PipelineConfig,
) -> Result<(BlockGrid, Vec<BlockData>)> {
    let (grid, mut blocks) = partition_uniform(bundle, cfg.grid_nx, cfg.grid_ny)?;
    assign_views(&mut blocks, &bundle.views, cfg.tau_p);
    Ok((grid, blocks))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn raster_opts(cfg: &PipelineConfig) -> RasterOpts {
    RasterOpts {
        near_plane: cfg.near_plane,
        support_sigma: cfg.support_sigma,
        min_transmittance: cfg.min_transmittance,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { out, points, views, width, height, extent, cfg } => {
            let cfg = resolve_config(None, &cfg, |_| {})?;
            let spec = SynthSpec {
                n_points: points,
                n_views: views,
                extent: [extent[0], extent[1], extent[2]],
                width,
                height,
                seed: cfg.seed,
                ..SynthSpec::default()
            };
            let bundle = generate_synthetic_scene(&spec)?;
            fs::create_dir_all(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            write_colmap_text(&bundle, &out)?;
            println!(
                "wrote scene: {} points, {} views -> {}",
                bundle.cloud.len(),
                bundle.views.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::Partition { input, run, nx, ny, tau_p, cfg } => {
            let cfg = resolve_config(Some(&run), &cfg, |c| {
                if let Some(nx) = nx {
                    c.grid_nx = nx;
                }
                if let Some(ny) = ny {
                    c.grid_ny = ny;
                }
                if let Some(tau_p) = tau_p {
                    c.tau_p = tau_p;
                }
            })?;
            let bundle = load_scene(&input)?;
            let (grid, mut blocks) = partition_scene(&bundle, &cfg)?;
            let pdir = run.join("partition");
            let mdir = pdir.join("masks");
            fs::create_dir_all(&mdir)
                .with_context(|| format!("creating {}", mdir.display()))?;
            fs::write(run.join("config.txt"), cfg.to_text())
                .context("writing resolved config")?;
            fs::write(pdir.join("grid.json"), serde_json::to_string_pretty(&grid)?)
                .context("writing grid")?;
            let mut records = Vec::with_capacity(blocks.len());
            for b in blocks.iter_mut() {
                let mut mask_files = std::collections::BTreeMap::new();
                for vid in b.assigned_views.clone() {
                    let view = bundle.view_by_id(vid).expect("assigned view exists");
                    let mask =
                        build_visibility_mask(b, view, cfg.mask_cell_px, cfg.mask_dilation_px);
                    let name = format!("b{}_{}_v{:04}.png", b.block.0, b.block.1, vid);
                    write_mask_png(&mask, &mdir.join(&name))?;
                    mask_files.insert(vid, format!("partition/masks/{}", name));
                    b.masks.insert(vid, mask);
                }
                records.push(BlockRecord {
                    block: b.block,
                    point_count: b.points.len(),
                    views: b.assigned_views.clone(),
                    mask_files,
                });
            }
            write_jsonl(&pdir.join("blocks.jsonl"), &records)?;
            println!(
                "partitioned {} points into {}x{} blocks; manifest at {}",
                bundle.cloud.len(),
                grid.nx,
                grid.ny,
                pdir.join("blocks.jsonl").display()
            );
            Ok(())
        }
        Cmd::TrainBlock { input, run, block, iterations, cfg } => {
            let cfg = resolve_config(Some(&run), &cfg, |c| {
                if let Some(it) = iterations {
                    c.iterations = it;
                }
            })?;
            let (ix, iy) = parse_block_index(&block)?;
            let bundle = load_scene(&input)?;
            let (grid, blocks) = partition_scene(&bundle, &cfg)?;
            if ix >= grid.nx || iy >= grid.ny {
                bail!("block {},{} outside the {}x{} grid", ix, iy, grid.nx, grid.ny);
            }
            let target = &blocks[grid.linear(ix, iy)];
            let bdir = run.join("blocks");
            fs::create_dir_all(&bdir)
                .with_context(|| format!("creating {}", bdir.display()))?;
            train_one(&bundle, target, &grid, &cfg, &bdir)?;
            Ok(())
        }
        Cmd::TrainAll { input, run, parallelism, iterations, cfg } => {
            let cfg = resolve_config(Some(&run), &cfg, |c| {
                if let Some(it) = iterations {
                    c.iterations = it;
                }
            })?;
            if parallelism == 0 {
                bail!("parallelism must be at least 1");
            }
            let bundle = load_scene(&input)?;
            let (grid, blocks) = partition_scene(&bundle, &cfg)?;
            let bdir = run.join("blocks");
            fs::create_dir_all(&bdir)
                .with_context(|| format!("creating {}", bdir.display()))?;
            let trainable: Vec<&BlockData> = blocks
                .iter()
                .filter(|b| {
                    if b.assigned_views.is_empty() || b.points.is_empty() {
                        log::warn!(
                            "skipping block {:?}: {} points, {} assigned views",
                            b.block,
                            b.points.len(),
                            b.assigned_views.len()
                        );
                        false
                    } else {
                        true
                    }
                })
                .collect();
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(parallelism)
                .build()
                .context("building worker pool")?;
            let results: Vec<(String, Result<()>)> = pool.install(|| {
                use rayon::prelude::*;
                trainable
                    .par_iter()
                    .map(|b| {
                        let tag = format!("{},{}", b.block.0, b.block.1);
                        (tag, train_one(&bundle, b, &grid, &cfg, &bdir))
                    })
                    .collect()
            });
            let mut failed = Vec::new();
            for (tag, r) in &results {
                match r {
                    Ok(()) => {}
                    Err(e) => {
                        eprintln!("block {} failed: {:#}", tag, e);
                        failed.push(tag.clone());
                    }
                }
            }
            if !failed.is_empty() {
                bail!("{} of {} blocks failed: {}", failed.len(), results.len(), failed.join("; "));
            }
            println!("trained {} blocks", results.len());
            Ok(())
        }
        Cmd::Fuse { run, cfg } => {
            let cfg = resolve_config(Some(&run), &cfg, |_| {})?;
            let models = load_trained_blocks(&run)?;
            if models.is_empty() {
                bail!("no trained block models under {}", run.join("blocks").display());
            }
            let scene = fuse(models, cfg.background())?;
            let fdir = run.join("fused");
            fs::create_dir_all(&fdir)
                .with_context(|| format!("creating {}", fdir.display()))?;
            #[derive(serde::Serialize)]
            struct FusedRecord {
                block: (usize, usize),
                file: String,
                anchors: usize,
            }
            let mut manifest = Vec::new();
            for m in &scene.blocks {
                let name = format!("block_{}_{}.bin", m.block.0, m.block.1);
                let mut w = ByteWriter::new();
                write_block_model(m, &mut w);
                fs::write(fdir.join(&name), w.finish())
                    .with_context(|| format!("writing fused block {}", name))?;
                manifest.push(FusedRecord {
                    block: m.block,
                    file: format!("fused/{}", name),
                    anchors: m.anchors.anchors.len(),
                });
            }
            write_jsonl(&fdir.join("manifest.jsonl"), &manifest)?;
            println!(
                "fused {} blocks, {} anchors total",
                scene.blocks.len(),
                scene.blocks.iter().map(|m| m.anchors.anchors.len()).sum::<usize>()
            );
            Ok(())
        }
        Cmd::Render { input, run, view, out, cfg } => {
            let cfg = resolve_config(Some(&run), &cfg, |_| {})?;
            let bundle = load_scene(&input)?;
            let scene = load_fused_scene(&run, &cfg)?;
            let opts = raster_opts(&cfg);
            let targets: Vec<u32> = match view {
                Some(id) => vec![id],
                None => bundle.views.iter().map(|v| v.id).collect(),
            };
            if out.is_some() && targets.len() != 1 {
                bail!("--out requires --view");
            }
            let rdir = run.join("renders");
            fs::create_dir_all(&rdir)
                .with_context(|| format!("creating {}", rdir.display()))?;
            for id in targets {
                let v = bundle
                    .view_by_id(id)
                    .with_context(|| format!("view {} not in scene", id))?;
                let img = render_global(&scene, v, cfg.guard_band, &opts)?.into_image();
                let path = out
                    .clone()
                    .unwrap_or_else(|| rdir.join(format!("view_{:04}.png", id)));
                write_image(&img, &path)?;
                println!("rendered view {} -> {}", id, path.display());
            }
            Ok(())
        }
        Cmd::Eval { input, run, views, cfg } => {
            let cfg = resolve_config(Some(&run), &cfg, |_| {})?;
            let bundle = load_scene(&input)?;
            let scene = load_fused_scene(&run, &cfg)?;
            let test_views = match views {
                Some(ids) => {
                    let mut vs = Vec::with_capacity(ids.len());
                    for id in ids {
                        vs.push(
                            bundle
                                .view_by_id(id)
                                .with_context(|| format!("view {} not in scene", id))?
                                .clone(),
                        );
                    }
                    vs
                }
                None => {
                    // default protocol: views assigned to no block are held out
                    let (_, blocks) = partition_scene(&bundle, &cfg)?;
                    let assigned: std::collections::BTreeSet<u32> =
                        blocks.iter().flat_map(|b| b.assigned_views.iter().copied()).collect();
                    let held: Vec<_> = bundle
                        .views
                        .iter()
                        .filter(|v| !assigned.contains(&v.id))
                        .cloned()
                        .collect();
                    if held.is_empty() {
                        bail!(
                            "every view is assigned to a block; pass --views to pick a test set"
                        );
                    }
                    held
                }
            };
            let report = evaluate(&scene, &test_views, cfg.guard_band, &raster_opts(&cfg))?;
            write_jsonl(&run.join("eval.jsonl"), &report.views)?;
            let summary = serde_json::json!({
                "views": report.views.len(),
                "mean_psnr": report.mean_psnr,
                "mean_ssim": report.mean_ssim,
            });
            fs::write(run.join("eval_summary.json"), serde_json::to_string_pretty(&summary)?)
                .context("writing eval summary")?;
            println!(
                "evaluated {} views: mean PSNR {:.2} dB, mean SSIM {:.4}",
                report.views.len(),
                report.mean_psnr,
                report.mean_ssim
            );
            Ok(())
        }
    }
}

fn parse_block_index(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        bail!("--block expects `ix,iy`, got `{}`", s);
    }
    Ok((parts[0].trim().parse()?, parts[1].trim().parse()?))
}

fn train_one(
    bundle: &SceneBundle,
    block: &BlockData,
    grid: &BlockGrid,
    cfg: &PipelineConfig,
    bdir: &Path,
) -> Result<()> {
    let (model, records) = train_block(bundle, block, grid, cfg, Some(bdir))?;
    let metrics = bdir.join(format!("block_{}_{}_metrics.jsonl", model.block.0, model.block.1));
    write_jsonl(&metrics, &records)?;
    let last = records.last().map(|r| r.loss.total);
    println!(
        "block {},{}: {} iterations, {} anchors, final loss {}",
        model.block.0,
        model.block.1,
        records.len(),
        model.anchors.anchors.len(),
        last.map_or("n/a".to_string(), |l| format!("{:.5}", l)),
    );
    Ok(())
}

/// Final (non-checkpoint) block models written by training.
fn load_trained_blocks(run: &Path) -> Result<Vec<BlockModel>> {
    let bdir = run.join("blocks");
    let mut models = Vec::new();
    let entries = fs::read_dir(&bdir)
        .with_context(|| format!("reading {}", bdir.display()))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| {
            // block_{ix}_{iy}.bin, excluding iteration checkpoints
            n.starts_with("block_") && n.ends_with(".bin") && !n.contains("_iter")
        })
        .collect();
    names.sort();
    for name in names {
        let path = bdir.join(&name);
        let bytes =
            fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        let mut r = ByteReader::new(&bytes, "block model");
        models.push(read_block_model(&mut r)?);
    }
    Ok(models)
}

fn load_fused_scene(run: &Path, cfg: &PipelineConfig) -> Result<FusedScene> {
    let fdir = run.join("fused");
    let mut models = Vec::new();
    let entries = fs::read_dir(&fdir).with_context(|| {
        format!("reading {} (run `fuse` first)", fdir.display())
    })?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("block_") && n.ends_with(".bin"))
        .collect();
    names.sort();
    for name in names {
        let path = fdir.join(&name);
        let bytes =
            fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        let mut r = ByteReader::new(&bytes, "fused block model");
        models.push(read_block_model(&mut r)?);
    }
    if models.is_empty() {
        bail!("no fused blocks under {}; run `fuse` first", fdir.display());
    }
    Ok(FusedScene { blocks: models, background: cfg.background() })
}
