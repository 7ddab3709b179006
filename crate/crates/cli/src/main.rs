//! Command line front end: preprocess -> tiles -> embed-graph ->
//! features -> train -> evaluate -> query, governed by one run config
//! file. Logs go to stderr, data goes to files.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use deepi2t_core::checkpoint::load_checkpoint;
use deepi2t_core::config::RunConfig;
use deepi2t_core::error::Error;
use deepi2t_core::estimation::{Estimator, NeighborIndex, OdQuery};
use deepi2t_core::model::{ImageBank, ModelState};
use deepi2t_core::pipeline::{self, RunPaths};
use deepi2t_core::tiles::ImageArchive;
use deepi2t_core::trajectory::read_corpus;
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "deepi2t",
    about = "Travel time estimation from trajectory grid sequences and map layout images",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory for inputs and outputs.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Recompute outputs even if they already exist.
    #[arg(long)]
    redo: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, clean, date-split and grid the raw corpus.
    Preprocess(Common),
    /// Layout image acquisition.
    Tiles {
        #[command(subcommand)]
        command: TilesCommand,
    },
    /// Train LINE embeddings over the grid proximity graph.
    EmbedGraph(Common),
    /// Build the training-split flow table.
    Features(Common),
    /// Train the model.
    Train {
        /// Run configuration file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Directory with the preprocessed artifacts.
        #[arg(long, default_value = "run")]
        data: PathBuf,
        /// Output directory for checkpoints and history (defaults to
        /// the data directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train the image-free ablation instead of the full model.
        #[arg(long)]
        ablate: bool,
        #[arg(long)]
        redo: bool,
    },
    /// Evaluate trained checkpoints on the test split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Run directory with artifacts and checkpoints.
        #[arg(long, default_value = "run")]
        data: PathBuf,
        /// Report output directory (defaults to <data>/reports).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Which split to evaluate (only "test" is supported).
        #[arg(long, default_value = "test")]
        split: String,
        /// Accept artifacts whose config hash does not match.
        #[arg(long)]
        force: bool,
    },
    /// Answer trip queries from a file.
    Query {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "run")]
        data: PathBuf,
        /// Checkpoint to load (defaults to <data>/checkpoint-best.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// aware: full paths (generic trip CSV); blind: OD rows.
        #[arg(long)]
        mode: QueryMode,
        /// Input CSV file.
        #[arg(long)]
        input: PathBuf,
        /// Output CSV file.
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Synthetic city generation.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
}

#[derive(Subcommand)]
enum TilesCommand {
    /// Fetch, stitch and cache slippy tiles for every grid cell.
    Fetch {
        #[command(flatten)]
        common: Common,
        /// Override the region as min_lon,min_lat,max_lon,max_lat.
        #[arg(long)]
        region: Option<String>,
        /// Override the tile zoom level.
        #[arg(long)]
        zoom: Option<u32>,
    },
    /// Render deterministic synthetic layout images.
    RenderSynthetic {
        #[command(flatten)]
        common: Common,
        /// Override the synthetic city seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Emit the synthetic corpus and image archive.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Grid size as WxH, e.g. 30x30.
        #[arg(long)]
        cells: Option<String>,
        #[arg(long)]
        trips: Option<usize>,
        #[arg(long)]
        days: Option<u32>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum QueryMode {
    Aware,
    Blind,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        log::error!("{e:#}");
        std::process::exit(1);
    }
}

fn load_config(path: &PathBuf) -> anyhow::Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Preprocess(common) => {
            let config = load_config(&common.config)?;
            let paths = RunPaths::new(&common.out);
            pipeline::stage_preprocess(&config, &paths, common.redo)?;
        }
        Command::Tiles { command } => match command {
            TilesCommand::Fetch { common, region, zoom } => {
                let mut config = load_config(&common.config)?;
                if let Some(region) = region {
                    let parts: Vec<f64> = region
                        .split(',')
                        .map(|p| p.trim().parse())
                        .collect::<Result<_, _>>()
                        .context("parsing --region as min_lon,min_lat,max_lon,max_lat")?;
                    if parts.len() != 4 {
                        bail!("--region needs four comma-separated values");
                    }
                    config.grid = Some(deepi2t_core::config::GridConfig {
                        min_lon: parts[0],
                        min_lat: parts[1],
                        max_lon: parts[2],
                        max_lat: parts[3],
                        cell_size_m: config.grid.map(|g| g.cell_size_m).unwrap_or(200.0),
                    });
                }
                if let Some(z) = zoom {
                    match config.tiles.as_mut() {
                        Some(t) => t.zoom = z,
                        None => bail!("--zoom override needs a [tiles] section in the config"),
                    }
                }
                let paths = RunPaths::new(&common.out);
                pipeline::stage_tiles(&config, &paths, common.redo)?;
            }
            TilesCommand::RenderSynthetic { common, seed } => {
                let mut config = load_config(&common.config)?;
                if let Some(seed) = seed {
                    match config.synth.as_mut() {
                        Some(s) => s.seed = seed,
                        None => bail!("--seed override needs a [synth] section in the config"),
                    }
                }
                let paths = RunPaths::new(&common.out);
                pipeline::stage_tiles(&config, &paths, common.redo)?;
            }
        },
        Command::EmbedGraph(common) => {
            let config = load_config(&common.config)?;
            let paths = RunPaths::new(&common.out);
            pipeline::stage_embed_graph(&config, &paths, common.redo)?;
        }
        Command::Features(common) => {
            let config = load_config(&common.config)?;
            let paths = RunPaths::new(&common.out);
            pipeline::stage_features(&config, &paths, common.redo)?;
        }
        Command::Train { config, data, out, ablate, redo } => {
            let config = load_config(&config)?;
            let data_paths = RunPaths::new(&data);
            let out_paths = out.map(RunPaths::new).unwrap_or_else(|| data_paths.clone());
            pipeline::stage_train_into(&config, &data_paths, &out_paths, redo, ablate)?;
        }
        Command::Evaluate { config, data, report, split, force } => {
            if split != "test" {
                bail!("only --split test is supported");
            }
            let config = load_config(&config)?;
            let paths = RunPaths::new(&data);
            if !paths.checkpoint_best().exists() {
                return Err(Error::Config {
                    key: "checkpoint".into(),
                    reason: format!(
                        "no trained checkpoint at {} (run the train stage first)",
                        paths.checkpoint_best().display()
                    ),
                }
                .into());
            }
            let report_dir = report.unwrap_or_else(|| paths.reports_dir());
            pipeline::stage_evaluate_into(&config, &paths, &report_dir, force)?;
        }
        Command::Query { config, data, checkpoint, mode, input, output, force } => {
            let config = load_config(&config)?;
            let paths = RunPaths::new(&data);
            run_query(&config, &paths, checkpoint, mode, &input, &output, force)?;
        }
        Command::Synth { command } => match command {
            SynthCommand::Generate { common, seed, cells, trips, days } => {
                let mut config = load_config(&common.config)?;
                {
                    let synth = config.synth.as_mut().ok_or_else(|| Error::Config {
                        key: "synth".into(),
                        reason: "synth generate needs a [synth] section".into(),
                    })?;
                    if let Some(seed) = seed {
                        synth.seed = seed;
                    }
                    if let Some(cells) = cells {
                        let (w, h) = cells
                            .split_once('x')
                            .ok_or_else(|| Error::Config {
                                key: "cells".into(),
                                reason: "expected WxH, e.g. 30x30".into(),
                            })?;
                        synth.cells_wide = w.trim().parse().context("parsing --cells width")?;
                        synth.cells_high = h.trim().parse().context("parsing --cells height")?;
                    }
                    if let Some(trips) = trips {
                        synth.trips = trips;
                    }
                    if let Some(days) = days {
                        synth.days = days;
                    }
                }
                let paths = RunPaths::new(&common.out);
                pipeline::stage_synth(&config, &paths, common.redo)?;
            }
        },
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_query(
    config: &RunConfig,
    paths: &RunPaths,
    checkpoint: Option<PathBuf>,
    mode: QueryMode,
    input: &PathBuf,
    output: &PathBuf,
    force: bool,
) -> anyhow::Result<()> {
    let spec = config.grid_spec()?;
    let clock = config.clock();
    let hash = config.hash();

    let ckpt_path = checkpoint.unwrap_or_else(|| paths.checkpoint_best());
    let ckpt = load_checkpoint(&ckpt_path)
        .with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
    if ckpt.config_hash != hash && !force {
        return Err(Error::ConfigHashMismatch {
            artifact: ckpt_path.display().to_string(),
        }
        .into());
    }
    let model: ModelState = ckpt.model;

    let (flow, flow_hash) = deepi2t_core::features::read_flow_table(&paths.flow_table())?;
    if flow_hash != hash && !force {
        return Err(Error::ConfigHashMismatch {
            artifact: paths.flow_table().display().to_string(),
        }
        .into());
    }
    let mut archive = ImageArchive::open(&paths.images())?;
    let images = ImageBank::from_archive(
        &mut archive,
        &spec,
        (config.model.image_height, config.model.image_width),
    )?;
    let estimator = Estimator {
        model: &model,
        spec: &spec,
        flow: &flow,
        registry: &ckpt.registry,
        clock: &clock,
        images: &images,
    };

    let mut out = std::io::BufWriter::new(std::fs::File::create(output)?);
    match mode {
        QueryMode::Aware => {
            let (corpus, _) = deepi2t_core::trajectory::parse_generic_csv(input)?;
            writeln!(out, "# config={hash}")?;
            writeln!(out, "trip,estimate_s")?;
            for (i, traj) in corpus.trips.iter().enumerate() {
                match estimator.path_aware(traj, 0) {
                    Ok(est) => writeln!(out, "{i},{est}")?,
                    Err(e) => {
                        log::warn!("trip {i}: {e}");
                        writeln!(out, "{i},")?;
                    }
                }
            }
        }
        QueryMode::Blind => {
            let train = read_corpus(&paths.train_trips())?;
            let index = NeighborIndex::build(&train.corpus, &spec)?;
            writeln!(out, "# config={hash}")?;
            writeln!(out, "query,estimate_s")?;
            let text = std::fs::read_to_string(input)?;
            let mut i = 0usize;
            for line in text.lines() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') || line.starts_with("origin") {
                    continue;
                }
                let fields: Vec<f64> = line
                    .split(',')
                    .map(|f| f.trim().parse())
                    .collect::<Result<_, _>>()
                    .with_context(|| format!("parsing blind query row {i:?}: {line}"))?;
                if fields.len() < 5 {
                    bail!("blind query rows need origin_lon,origin_lat,dest_lon,dest_lat,departure");
                }
                let query = OdQuery {
                    origin_lon: fields[0],
                    origin_lat: fields[1],
                    dest_lon: fields[2],
                    dest_lat: fields[3],
                    departure: fields[4] as i64,
                    weather_code: 0,
                };
                match estimator.path_blind(&query, &index) {
                    Ok(est) => writeln!(out, "{i},{est}")?,
                    Err(e) => {
                        log::warn!("query {i}: {e}");
                        writeln!(out, "{i},")?;
                    }
                }
                i += 1;
            }
        }
    }
    log::info!("wrote {}", output.display());
    Ok(())
}
