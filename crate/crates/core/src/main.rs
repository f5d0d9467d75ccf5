//! `spikevim` command line tool.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use spikevim::checkpoint::Checkpoint;
use spikevim::config::RunConfig;
use spikevim::data::{generate, list_images, load_dataset, parse_name, read_pnm, stack_images, write_dataset, write_ppm, Image, View};
use spikevim::embedding::Embeddings;
use spikevim::model::{embed, prune_for_inference};
use spikevim::retrieval::{metrics_tsv, offline_rerank, random_keep_patches, rank_gallery, KeepPatchSpec, Metric, RankedResult};
use spikevim::train::{energy_reports, split_dataset, Trainer};
use spikevim::{Error, Result};

const GRID_RATIOS: [f64; 5] = [20.0, 40.0, 60.0, 80.0, 100.0];
const GRID_PATCHES: [usize; 2] = [5, 10];

#[derive(Parser)]
#[command(name = "spikevim", version, about = "Spike-driven cross-view retrieval toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path (file or directory depending on the subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic paired-view dataset of PPM images.
    Generate,
    /// Trains on a dataset directory and writes a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Per-step loss log (TSV); stdout when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Embeds every image of a directory with the pruned backbone.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Keep only one view (`sat` or `drone`).
        #[arg(long)]
        view: Option<String>,
    },
    /// Retrieval metrics in both directions between two embedding files.
    Evaluate {
        /// Drone-side embeddings.
        #[arg(long)]
        query: PathBuf,
        /// Satellite-side embeddings.
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        rerank: bool,
        #[arg(long, default_value_t = 0.7)]
        alpha: f64,
        #[arg(long, default_value_t = 15)]
        k: usize,
    },
    /// Keeps only randomly placed patches of every image.
    Corrupt {
        #[arg(long)]
        images: PathBuf,
        /// Retention ratio in percent.
        #[arg(long, default_value_t = 100.0)]
        ratio: f64,
        #[arg(long, default_value_t = 1)]
        patches: usize,
        /// Writes every grid setting into `<out>/r<R>_p<P>/`.
        #[arg(long)]
        grid: bool,
    },
    /// Theoretical energy of the full and the pruned model.
    Energy {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample images; a synthetic batch is used when omitted.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_out(common: &Common) -> Result<&Path> {
    common.out.as_deref().ok_or_else(|| Error::Usage("--out is required for this subcommand".into()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn warn_failures(failures: &[(PathBuf, Error)]) {
    for (p, e) in failures {
        log::warn!("skipping {}: {e}", p.display());
    }
}

fn cmd_generate(common: &Common) -> Result<()> {
    let cfg = run_config(common)?;
    let out = require_out(common)?;
    let spec = spikevim::data::SyntheticSpec { seed: cfg.seed, ..cfg.data };
    let ds = generate(&spec)?;
    write_dataset(&ds, out)?;
    println!("wrote {} images to {}", ds.samples.len(), out.display());
    Ok(())
}

fn cmd_train(common: &Common, data: &Path, log_path: Option<&Path>) -> Result<()> {
    let cfg = run_config(common)?;
    let out = require_out(common)?;
    let (ds, failures) = load_dataset(data)?;
    warn_failures(&failures);
    if ds.samples.is_empty() {
        return Err(Error::Format(format!("no readable images in {}", data.display())));
    }
    if ds.num_classes() != cfg.model.num_classes {
        return Err(Error::Format(format!(
            "dataset has {} classes, configuration expects {}",
            ds.num_classes(),
            cfg.model.num_classes
        )));
    }
    let split = split_dataset(&ds)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut log = String::from("epoch\tstep\tl1\tl2\tcurrent\thistorical\tinfonce\ttotal\n");
    let epochs = trainer.fit(&ds, &split, |s| {
        let _ = writeln!(
            log,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            s.epoch, s.step, s.l1, s.l2, s.current, s.historical, s.infonce, s.total
        );
    })?;
    for e in &epochs {
        let r1 = e.heldout_r1.map_or("-".to_string(), |r| format!("{r:.2}"));
        let _ = writeln!(log, "# epoch {}\tmean_total {:.6}\theldout_r1 {r1}", e.epoch, e.mean_total);
    }
    emit(log_path, &log)?;
    let ck = Checkpoint {
        params: trainer.params,
        config: cfg,
        step: trainer.step,
    };
    ck.save(out)?;
    log::info!("checkpoint written to {}", out.display());
    Ok(())
}

/// Reads every image of `dir`, skipping unreadable or misnamed files.
fn read_images(dir: &Path, view: Option<View>) -> Result<Vec<(String, Image)>> {
    let mut out = Vec::new();
    for path in list_images(dir)? {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let Some((_, v, _)) = parse_name(&name) else {
            log::warn!("skipping {}: name is not <class>_<view>_<idx>", path.display());
            continue;
        };
        if view.is_some_and(|want| want != v) {
            continue;
        }
        match read_pnm(&path) {
            Ok(img) => out.push((name.rsplit_once('.').map_or(name.clone(), |(s, _)| s.to_string()), img)),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    Ok(out)
}

fn cmd_embed(common: &Common, checkpoint: &Path, images: &Path, view: Option<&str>) -> Result<()> {
    let out = require_out(common)?;
    let view = match view {
        None => None,
        Some("sat") => Some(View::Satellite),
        Some("drone") => Some(View::Drone),
        Some(v) => return Err(Error::Usage(format!("--view must be sat or drone, got {v:?}"))),
    };
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = &ck.config.model;
    let pruned = prune_for_inference(&ck.params);
    let items = read_images(images, view)?;
    let size = cfg.image_size;
    let (ids, imgs): (Vec<String>, Vec<Image>) = items
        .into_iter()
        .filter(|(id, img)| {
            let ok = img.width == size && img.height == size;
            if !ok {
                log::warn!("skipping {id}: {}x{} does not match the model input {size}x{size}", img.width, img.height);
            }
            ok
        })
        .unzip();
    let mut rows = Vec::with_capacity(ids.len() * cfg.embed_dim());
    for chunk in imgs.chunks(64) {
        let refs: Vec<&Image> = chunk.iter().collect();
        rows.extend(embed(cfg, &pruned, &stack_images::<f32>(&refs)?)?.to_f64_vec());
    }
    let matrix = Array2::from_shape_vec((ids.len(), cfg.embed_dim()), rows).map_err(|e| Error::Format(e.to_string()))?;
    let emb = Embeddings::new(ids, matrix)?;
    emb.save(out)?;
    log::info!("embedded {} images into {}", emb.ids.len(), out.display());
    Ok(())
}

fn cmd_evaluate(common: &Common, query: &Path, gallery: &Path, rerank: bool, alpha: f64, k: usize) -> Result<()> {
    let q = Embeddings::load(query)?;
    let g = Embeddings::load(gallery)?;
    if q.dim() != g.dim() {
        return Err(Error::Usage(format!("query dimension {} differs from gallery dimension {}", q.dim(), g.dim())));
    }
    if rerank && !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Usage(format!("--alpha must lie in [0, 1], got {alpha}")));
    }
    let (ql, gl) = (q.labels()?, g.labels()?);
    let mut text = String::new();
    for (name, a, al, b, bl) in [
        ("drone->satellite", &q, &ql, &g, &gl),
        ("satellite->drone", &g, &gl, &q, &ql),
    ] {
        let order = if rerank {
            offline_rerank(a.matrix.view(), b.matrix.view(), k, alpha)?
        } else {
            rank_gallery(a.matrix.view(), b.matrix.view(), Metric::Cosine)?
        };
        let r = RankedResult::from_labels(order, al, bl);
        let _ = writeln!(text, "# {name}");
        text.push_str(&metrics_tsv(&r, &[1, 5, 10]));
    }
    emit(common.out.as_deref(), &text)
}

fn corrupt_dir(images: &[(String, Image)], out: &Path, ratio: f64, patches: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (i, (id, img)) in images.iter().enumerate() {
        let spec = KeepPatchSpec {
            ratio,
            patches,
            seed: seed.wrapping_add(i as u64),
        };
        let kept = random_keep_patches(&img.to_tensor::<f64>(), &spec)?;
        write_ppm(&out.join(format!("{id}.ppm")), &Image::from_tensor(&kept)?)?;
    }
    Ok(())
}

fn cmd_corrupt(common: &Common, images: &Path, ratio: f64, patches: usize, grid: bool) -> Result<()> {
    let cfg = run_config(common)?;
    let out = require_out(common)?;
    let items = read_images(images, None)?;
    if grid {
        for r in GRID_RATIOS {
            for p in GRID_PATCHES {
                corrupt_dir(&items, &out.join(format!("r{r}_p{p}")), r, p, cfg.seed)?;
            }
        }
        println!("wrote {} variants of {} images", GRID_RATIOS.len() * GRID_PATCHES.len(), items.len());
    } else {
        corrupt_dir(&items, out, ratio, patches, cfg.seed)?;
        println!("wrote {} images", items.len());
    }
    Ok(())
}

fn cmd_energy(common: &Common, checkpoint: &Path, images: Option<&Path>, batch: usize) -> Result<()> {
    if batch == 0 {
        return Err(Error::Usage("--batch must be positive".into()));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = &ck.config;
    let imgs: Vec<Image> = match images {
        Some(dir) => read_images(dir, None)?.into_iter().map(|(_, i)| i).take(batch).collect(),
        None => {
            let spec = spikevim::data::SyntheticSpec { seed: cfg.seed, ..cfg.data };
            generate(&spec)?.samples.into_iter().map(|s| s.image).take(batch).collect()
        }
    };
    if imgs.is_empty() {
        return Err(Error::Format("no sample images for the energy pass".into()));
    }
    let refs: Vec<&Image> = imgs.iter().collect();
    let (full, pruned) = energy_reports(&cfg.model, &ck.params, &stack_images(&refs)?)?;
    let text = format!("# full model\n{}# pruned model\n{}", full.to_tsv(), pruned.to_tsv());
    emit(common.out.as_deref(), &text)
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Generate => cmd_generate(c),
        Command::Train { data, log } => cmd_train(c, data, log.as_deref()),
        Command::Embed { checkpoint, images, view } => cmd_embed(c, checkpoint, images, view.as_deref()),
        Command::Evaluate {
            query,
            gallery,
            rerank,
            alpha,
            k,
        } => cmd_evaluate(c, query, gallery, *rerank, *alpha, *k),
        Command::Corrupt {
            images,
            ratio,
            patches,
            grid,
        } => cmd_corrupt(c, images, *ratio, *patches, *grid),
        Command::Energy { checkpoint, images, batch } => cmd_energy(c, checkpoint, images.as_deref(), *batch),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
