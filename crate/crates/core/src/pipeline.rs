//! Stage orchestration: preprocess, tiles, graph embedding, features,
//! training and evaluation, both as resumable file-based stages and as
//! an in-memory synthetic end-to-end run.

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{DatasetKind, RunConfig};
use crate::error::{Error, Result};
use crate::estimation::{
    AvgBaseline, Estimator, HourlySpeedReference, LrBaseline, NeighborIndex, OdQuery,
    TempBaseline,
};
use crate::features::{build_flow_table, ClockContext, DriverRegistry, FlowTable};
use crate::graph::{build_graph, train_line, NodeEmbedding};
use crate::grid::{build_sequence, GridSequence, GridSpec, SequenceSet};
use crate::model::{ImageBank, ModelState};
use crate::report::{self, TripRow};
use crate::synth::{generate_city, sample_trips, trips_to_corpus, SyntheticCity, SYNTH_EPOCH};
use crate::tiles::{fetch_cell_image, render_synthetic_image, ImageArchive, LayoutImage, TileFetcher};
use crate::trajectory::{clean_trips, split_by_timestamp, Corpus, Provenance};
use crate::training::{prepare_examples, EpochStats, RegistryMode, TrainExample, Trainer};
use std::path::{Path, PathBuf};

/// Canonical file layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn raw_trips(&self) -> PathBuf {
        self.root.join("raw.trips")
    }
    pub fn train_trips(&self) -> PathBuf {
        self.root.join("train.trips")
    }
    pub fn test_trips(&self) -> PathBuf {
        self.root.join("test.trips")
    }
    pub fn train_seqs(&self) -> PathBuf {
        self.root.join("train.seqs")
    }
    pub fn test_seqs(&self) -> PathBuf {
        self.root.join("test.seqs")
    }
    pub fn images(&self) -> PathBuf {
        self.root.join("images.bin")
    }
    pub fn line_embedding(&self) -> PathBuf {
        self.root.join("line.bin")
    }
    pub fn flow_table(&self) -> PathBuf {
        self.root.join("flow.bin")
    }
    pub fn checkpoint_last(&self) -> PathBuf {
        self.root.join("checkpoint-last.ckpt")
    }
    pub fn checkpoint_best(&self) -> PathBuf {
        self.root.join("checkpoint-best.ckpt")
    }
    pub fn checkpoint_ablated(&self) -> PathBuf {
        self.root.join("checkpoint-ablated.ckpt")
    }
    pub fn history_csv(&self) -> PathBuf {
        self.root.join("history.csv")
    }
    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn ensure_root(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root)?;
        Ok(())
    }
}

fn check_hash(expected: &str, found: Option<&str>, artifact: &Path, force: bool) -> Result<()> {
    match found {
        Some(h) if h == expected => Ok(()),
        None => Ok(()),
        Some(_) if force => {
            log::warn!("config hash mismatch on {} overridden by --force", artifact.display());
            Ok(())
        }
        Some(_) => Err(Error::ConfigHashMismatch { artifact: artifact.display().to_string() }),
    }
}

// ---------------------------------------------------------------------------
// Shared building blocks
// ---------------------------------------------------------------------------

/// Grid every trip of a corpus, counting the ones that collapse to a
/// single cell.
pub fn corpus_to_sequences(corpus: &Corpus, spec: &GridSpec) -> Result<(Vec<GridSequence>, usize)> {
    let mut sequences = Vec::with_capacity(corpus.len());
    let mut skipped = 0usize;
    for traj in &corpus.trips {
        match build_sequence(traj, spec) {
            Ok(seq) => sequences.push(seq),
            Err(Error::SingleCell) | Err(Error::OutOfRegion { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((sequences, skipped))
}

/// Render every city cell into the in-memory bank (no archive file).
pub fn render_bank(city: &SyntheticCity, spec: &GridSpec, hw: (usize, usize)) -> Result<ImageBank> {
    let mut bank = ImageBank::empty(spec.num_cells(), hw);
    for idx in 0..spec.num_cells() {
        let img = render_synthetic_image(city, spec.cell_from_index(idx))?;
        bank.insert(spec, &img);
    }
    Ok(bank)
}

/// Carve a validation split off the training sequences: the trips of
/// the last training day. Early stopping watches this split, the test
/// set stays untouched until evaluation.
pub fn split_validation(
    sequences: Vec<GridSequence>,
    clock: &ClockContext,
) -> (Vec<GridSequence>, Vec<GridSequence>) {
    let last_day = sequences.iter().map(|s| clock.day_number(s.departure)).max();
    let Some(last_day) = last_day else {
        return (sequences, Vec::new());
    };
    let mut train = Vec::new();
    let mut val = Vec::new();
    for seq in sequences {
        if clock.day_number(seq.departure) == last_day {
            val.push(seq);
        } else {
            train.push(seq);
        }
    }
    if train.is_empty() {
        // single-day corpus: train on everything, no early stop signal
        return (val, Vec::new());
    }
    (train, val)
}

pub struct TrainedModel {
    pub model: ModelState,
    pub registry: DriverRegistry,
    pub history: Vec<EpochStats>,
    pub train_examples: Vec<TrainExample>,
}

/// Train one model end to end from prepared inputs. The best
/// validation checkpoint wins when early stopping triggers.
#[allow(clippy::too_many_arguments)]
pub fn train_model(
    config: &RunConfig,
    spec: &GridSpec,
    flow: &FlowTable,
    line: &NodeEmbedding,
    images: &ImageBank,
    train_seqs: &[GridSequence],
    val_seqs: &[GridSequence],
    ablate: bool,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainedModel> {
    let clock = config.clock();
    let mut model_config = config.model_config(spec)?;
    model_config.ablate_image = ablate;
    let mut model = ModelState::new(model_config);
    model.init_line_table(line)?;

    let mut registry = DriverRegistry::new(config.tables.driver_rows);
    let train_examples =
        prepare_examples(train_seqs, spec, flow, RegistryMode::Assign(&mut registry), &clock)?;
    // fix output units from the supervised sub-path labels
    let all_labels: Vec<f64> = train_examples
        .iter()
        .flat_map(|e| {
            e.labels.iter().zip(&e.mask).filter(|(_, &m)| m).map(|(l, _)| *l).collect::<Vec<_>>()
        })
        .collect();
    if !all_labels.is_empty() {
        let mean = all_labels.iter().sum::<f64>() / all_labels.len() as f64;
        let var = all_labels.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>()
            / all_labels.len() as f64;
        model.set_output_scaling(mean, var.sqrt());
    }
    let val_examples =
        prepare_examples(val_seqs, spec, flow, RegistryMode::Frozen(&registry), &clock)?;

    let mut trainer = Trainer::new(&model, config.train);
    trainer.run(&mut model, &train_examples, &val_examples, images, |s| on_epoch(s))?;
    if let Some(best) = trainer.best_store.take() {
        model.store = best;
    }
    Ok(TrainedModel { model, registry, history: trainer.history, train_examples })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

pub struct EvalInputs<'a> {
    pub config: &'a RunConfig,
    pub spec: &'a GridSpec,
    pub flow: &'a FlowTable,
    pub images: &'a ImageBank,
    pub registry: &'a DriverRegistry,
    pub model: &'a ModelState,
    pub ablated: Option<&'a ModelState>,
    pub train_corpus: &'a Corpus,
    pub test_corpus: &'a Corpus,
}

/// Score every test trip with the model (path-aware and path-blind),
/// the ablation, and the three baselines.
pub fn evaluate(inputs: &EvalInputs) -> Result<Vec<TripRow>> {
    let clock = inputs.config.clock();
    let index = NeighborIndex::build(inputs.train_corpus, inputs.spec)?;
    let lr = LrBaseline::fit_index(&index)?;
    let reference = HourlySpeedReference::build(&index, &clock)?;
    let avg = AvgBaseline { index: &index, spec: inputs.spec };
    let temp = TempBaseline { index: &index, spec: inputs.spec, reference: &reference, clock: &clock };

    let estimator = Estimator {
        model: inputs.model,
        spec: inputs.spec,
        flow: inputs.flow,
        registry: inputs.registry,
        clock: &clock,
        images: inputs.images,
    };
    let ablated_estimator = inputs.ablated.map(|m| Estimator {
        model: m,
        spec: inputs.spec,
        flow: inputs.flow,
        registry: inputs.registry,
        clock: &clock,
        images: inputs.images,
    });

    let mut rows = Vec::with_capacity(inputs.test_corpus.len());
    for (trip_id, traj) in inputs.test_corpus.trips.iter().enumerate() {
        let label = crate::trajectory::trip_label(traj);
        if label.travel_time_s <= 0.0 {
            continue;
        }
        let first = traj.footprints.first().unwrap();
        let last = traj.footprints.last().unwrap();
        let query = OdQuery {
            origin_lon: first.lon,
            origin_lat: first.lat,
            dest_lon: last.lon,
            dest_lat: last.lat,
            departure: traj.departure(),
            weather_code: 0,
        };

        let aware = match estimator.path_aware(traj, 0) {
            Ok(v) => Some(v),
            Err(Error::SingleCell) | Err(Error::OutOfRegion { .. }) => None,
            Err(e) => return Err(e),
        };
        if aware.is_none() {
            continue; // trip cannot be gridded at all
        }
        let ablated = match &ablated_estimator {
            None => None,
            Some(est) => Some(est.path_aware(traj, 0)?),
        };
        let blind = match estimator.path_blind(&query, &index) {
            Ok(v) => Some(v),
            Err(Error::NoNeighbors) | Err(Error::Degenerate(_)) => None,
            Err(e) => return Err(e),
        };
        let l1 = inputs.spec.l1_distance_m(first.lon, first.lat, last.lon, last.lat);
        let lr_est = Some(lr.predict(l1));
        let avg_est = match avg.predict(&query) {
            Ok(v) => Some(v),
            Err(Error::NoNeighbors) | Err(Error::Degenerate(_)) | Err(Error::OutOfRegion { .. }) => None,
            Err(e) => return Err(e),
        };
        let temp_est = match temp.predict(&query) {
            Ok(v) => Some(v),
            Err(Error::NoNeighbors) | Err(Error::Degenerate(_)) | Err(Error::OutOfRegion { .. }) => None,
            Err(e) => return Err(e),
        };
        rows.push(TripRow {
            trip_id,
            departure: traj.departure(),
            actual_s: label.travel_time_s,
            aware,
            blind,
            ablated,
            lr: lr_est,
            avg: avg_est,
            temp: temp_est,
        });
    }
    if rows.is_empty() {
        return Err(Error::Empty("no evaluable test trips".into()));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// In-memory synthetic end-to-end
// ---------------------------------------------------------------------------

/// Everything a synthetic end-to-end run reports. Wall-clock fields
/// are excluded from `reported_metrics`, which is the bit-exact
/// determinism surface.
pub struct E2eOutcome {
    pub history: Vec<EpochStats>,
    pub ablated_history: Vec<EpochStats>,
    pub rows: Vec<TripRow>,
    pub n_test_queries: usize,
    pub blind_answered: usize,
}

impl E2eOutcome {
    pub fn blind_coverage(&self) -> f64 {
        self.blind_answered as f64 / self.n_test_queries as f64
    }

    /// Flat list of every deterministic reported number.
    pub fn reported_metrics(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for h in &self.history {
            out.push((format!("train_loss[{}]", h.epoch), h.train_loss));
            out.push((format!("train_mape[{}]", h.epoch), h.train_mape));
            out.push((format!("eval_mape[{}]", h.epoch), h.eval_mape));
        }
        for h in &self.ablated_history {
            out.push((format!("ablated_train_loss[{}]", h.epoch), h.train_loss));
        }
        out.push(("blind_coverage".into(), self.blind_coverage()));
        let table = [
            ("aware", report::method_metrics(&self.rows, |r| r.aware)),
            ("blind", report::method_metrics(&self.rows, |r| r.blind)),
            ("ablated", report::method_metrics(&self.rows, |r| r.ablated)),
            ("lr", report::method_metrics(&self.rows, |r| r.lr)),
            ("avg", report::method_metrics(&self.rows, |r| r.avg)),
            ("temp", report::method_metrics(&self.rows, |r| r.temp)),
        ];
        for (name, metrics) in table {
            if let Some(m) = metrics {
                out.push((format!("{name}.mae"), m.mae_s));
                out.push((format!("{name}.mape"), m.mape_pct));
                out.push((format!("{name}.sr"), m.sr_pct));
                out.push((format!("{name}.count"), m.count as f64));
            }
        }
        out
    }

    /// Rows where every neighbor-based method answered, for
    /// apples-to-apples comparisons.
    pub fn common_rows(&self) -> Vec<TripRow> {
        self.rows
            .iter()
            .filter(|r| r.blind.is_some() && r.avg.is_some() && r.temp.is_some())
            .cloned()
            .collect()
    }
}

/// The full synthetic pipeline in memory: city, corpus, features,
/// LINE, two trained models (full and ablation), baselines and
/// evaluation.
pub fn run_synthetic_e2e(config: &RunConfig, verbose: bool) -> Result<E2eOutcome> {
    let synth = config.synth.as_ref().ok_or_else(|| Error::Config {
        key: "synth".into(),
        reason: "synthetic end-to-end needs a [synth] section".into(),
    })?;
    let spec = config.grid_spec()?;
    let clock = config.clock();

    let city = generate_city(synth.seed, &spec, &synth.city)?;
    let trips = sample_trips(&city, synth.trips, synth.days);
    let corpus = trips_to_corpus(&trips, synth.vehicles);
    let (corpus, clean_report) = clean_trips(&corpus, &config.clean);
    if verbose {
        log::info!(
            "synthetic corpus: {} trips kept ({} too short, {} too long, {} few points)",
            clean_report.kept,
            clean_report.removed_too_short,
            clean_report.removed_too_long,
            clean_report.removed_few_points
        );
    }

    // date split: last ~20% of days (at least one) form the test side
    let train_days = (synth.days - (synth.days / 5).max(1)) as i64;
    let cutoff_ts = SYNTH_EPOCH + train_days * 86400;
    let (train_corpus, test_corpus) = split_by_timestamp(&corpus, cutoff_ts);

    let (train_sequences, skipped_train) = corpus_to_sequences(&train_corpus, &spec)?;
    if verbose && skipped_train > 0 {
        log::info!("{skipped_train} training trips collapsed to one cell");
    }
    let (train_seqs, val_seqs) = split_validation(train_sequences, &clock);

    let flow = build_flow_table(
        &SequenceSet { sequences: train_seqs.clone(), provenance: Provenance::Train },
        &spec,
        &clock,
    )?;

    let graph = build_graph(&spec);
    let mut line_config = config.line;
    line_config.dim = config.tables.line_dim;
    let (line, _) = train_line(&graph, &line_config)?;

    let images = render_bank(&city, &spec, (config.model.image_height, config.model.image_width))?;

    let full = train_model(
        config, &spec, &flow, &line, &images, &train_seqs, &val_seqs, false,
        |s| {
            if verbose {
                log::info!(
                    "epoch {}: loss {:.4} train MAPE {:.2}% val MAPE {:.2}% ({:.1}s)",
                    s.epoch, s.train_loss, s.train_mape, s.eval_mape, s.wall_s
                );
            }
        },
    )?;
    let ablated = train_model(
        config, &spec, &flow, &line, &images, &train_seqs, &val_seqs, true,
        |s| {
            if verbose {
                log::info!(
                    "ablation epoch {}: loss {:.4} train MAPE {:.2}% val MAPE {:.2}%",
                    s.epoch, s.train_loss, s.train_mape, s.eval_mape
                );
            }
        },
    )?;

    let rows = evaluate(&EvalInputs {
        config,
        spec: &spec,
        flow: &flow,
        images: &images,
        registry: &full.registry,
        model: &full.model,
        ablated: Some(&ablated.model),
        train_corpus: &train_corpus,
        test_corpus: &test_corpus,
    })?;

    let n_test_queries = rows.len();
    let blind_answered = rows.iter().filter(|r| r.blind.is_some()).count();
    Ok(E2eOutcome {
        history: full.history,
        ablated_history: ablated.history,
        rows,
        n_test_queries,
        blind_answered,
    })
}

// ---------------------------------------------------------------------------
// File-based stages
// ---------------------------------------------------------------------------

fn exists_all(paths: &[PathBuf]) -> bool {
    paths.iter().all(|p| p.exists())
}

/// Generate the synthetic corpus and image archive on disk.
pub fn stage_synth(config: &RunConfig, paths: &RunPaths, redo: bool) -> Result<()> {
    paths.ensure_root()?;
    let synth = config.synth.as_ref().ok_or_else(|| Error::Config {
        key: "synth".into(),
        reason: "missing [synth] section".into(),
    })?;
    let hash = config.hash();
    if !redo && exists_all(&[paths.raw_trips(), paths.images()]) {
        log::info!("synth outputs exist, skipping (use --redo to regenerate)");
        return Ok(());
    }
    let spec = config.grid_spec()?;
    let city = generate_city(synth.seed, &spec, &synth.city)?;
    let trips = sample_trips(&city, synth.trips, synth.days);
    let corpus = trips_to_corpus(&trips, synth.vehicles);
    crate::trajectory::write_corpus(&paths.raw_trips(), &corpus, &hash)?;

    let mut images = Vec::with_capacity(spec.num_cells());
    for idx in 0..spec.num_cells() {
        images.push(render_synthetic_image(&city, spec.cell_from_index(idx))?);
    }
    crate::tiles::write_image_archive(&paths.images(), &images, &hash)?;
    log::info!("wrote {} trips and {} cell images", corpus.len(), spec.num_cells());
    Ok(())
}

/// Parse/clean/split the raw corpus and grid it into sequences.
pub fn stage_preprocess(config: &RunConfig, paths: &RunPaths, redo: bool) -> Result<()> {
    paths.ensure_root()?;
    let hash = config.hash();
    let outputs = [paths.train_trips(), paths.test_trips(), paths.train_seqs(), paths.test_seqs()];
    if !redo && exists_all(&outputs) {
        log::info!("preprocess outputs exist, skipping");
        return Ok(());
    }
    let spec = config.grid_spec()?;
    let corpus = match config.data.dataset {
        DatasetKind::Porto => {
            let raw = config.data.raw.as_ref().ok_or_else(|| Error::Config {
                key: "data.raw".into(),
                reason: "porto dataset needs a raw CSV path".into(),
            })?;
            let (corpus, stats) = crate::trajectory::parse_porto_csv(raw)?;
            log::info!("parsed {} rows, {} trips, {} skipped", stats.rows, stats.parsed, stats.skipped);
            corpus
        }
        DatasetKind::Generic => {
            let raw = config.data.raw.as_ref().ok_or_else(|| Error::Config {
                key: "data.raw".into(),
                reason: "generic dataset needs a raw CSV path".into(),
            })?;
            let (corpus, stats) = crate::trajectory::parse_generic_csv(raw)?;
            log::info!("parsed {} rows into {} trips", stats.rows, stats.parsed);
            corpus
        }
        DatasetKind::Synthetic => {
            let file = crate::trajectory::read_corpus(&paths.raw_trips())?;
            check_hash(&hash, file.config_hash.as_deref(), &paths.raw_trips(), false)?;
            file.corpus
        }
    };

    let (corpus, report) = clean_trips(&corpus, &config.clean);
    log::info!(
        "clean: kept {} (dropped {} short, {} long, {} few-point)",
        report.kept, report.removed_too_short, report.removed_too_long, report.removed_few_points
    );

    let (train, test) = match (config.split_date()?, &config.data.dataset) {
        (Some(date), _) => crate::trajectory::split_by_date(&corpus, date, config.data.utc_offset_s),
        (None, DatasetKind::Synthetic) => {
            let synth = config.synth.as_ref().expect("synthetic config");
            let train_days = (synth.days - (synth.days / 5).max(1)) as i64;
            split_by_timestamp(&corpus, SYNTH_EPOCH + train_days * 86400)
        }
        (None, _) => {
            return Err(Error::Config {
                key: "data.split_date".into(),
                reason: "a split date is required".into(),
            })
        }
    };
    log::info!("split: {} train trips, {} test trips", train.len(), test.len());
    crate::trajectory::write_corpus(&paths.train_trips(), &train, &hash)?;
    crate::trajectory::write_corpus(&paths.test_trips(), &test, &hash)?;

    for (corpus, out) in [(&train, paths.train_seqs()), (&test, paths.test_seqs())] {
        let (sequences, skipped) = corpus_to_sequences(corpus, &spec)?;
        if skipped > 0 {
            log::info!("{skipped} trips collapsed to a single cell in {}", out.display());
        }
        crate::grid::write_sequences(
            &out,
            &SequenceSet { sequences, provenance: corpus.provenance },
            &hash,
        )?;
    }
    Ok(())
}

/// Produce the layout image archive: synthetic rendering or slippy
/// tile fetching depending on the dataset.
pub fn stage_tiles(config: &RunConfig, paths: &RunPaths, redo: bool) -> Result<()> {
    paths.ensure_root()?;
    if !redo && paths.images().exists() {
        log::info!("image archive exists, skipping");
        return Ok(());
    }
    let hash = config.hash();
    let spec = config.grid_spec()?;
    match config.data.dataset {
        DatasetKind::Synthetic => {
            let synth = config.synth.as_ref().expect("synthetic config");
            let city = generate_city(synth.seed, &spec, &synth.city)?;
            let mut images = Vec::with_capacity(spec.num_cells());
            for idx in 0..spec.num_cells() {
                images.push(render_synthetic_image(&city, spec.cell_from_index(idx))?);
            }
            crate::tiles::write_image_archive(&paths.images(), &images, &hash)?;
        }
        _ => {
            let source = config.tiles.clone().ok_or_else(|| Error::Config {
                key: "tiles".into(),
                reason: "tile fetching needs a [tiles] section".into(),
            })?;
            let fetcher = TileFetcher::new(source)?;
            let mut images: Vec<LayoutImage> = Vec::with_capacity(spec.num_cells());
            for idx in 0..spec.num_cells() {
                let cell = spec.cell_from_index(idx);
                images.push(fetch_cell_image(&fetcher, &spec, cell)?);
                if (idx + 1) % 100 == 0 {
                    log::info!("fetched {}/{} cells", idx + 1, spec.num_cells());
                }
            }
            crate::tiles::write_image_archive(&paths.images(), &images, &hash)?;
        }
    }
    log::info!("wrote image archive {}", paths.images().display());
    Ok(())
}

/// Train LINE embeddings over the grid proximity graph.
pub fn stage_embed_graph(config: &RunConfig, paths: &RunPaths, redo: bool) -> Result<()> {
    paths.ensure_root()?;
    if !redo && paths.line_embedding().exists() {
        log::info!("embedding exists, skipping");
        return Ok(());
    }
    let spec = config.grid_spec()?;
    let graph = build_graph(&spec);
    let mut line_config = config.line;
    line_config.dim = config.tables.line_dim;
    let (embedding, history) = train_line(&graph, &line_config)?;
    if let (Some(first), Some(last)) = (history.epoch_loss.first(), history.epoch_loss.last()) {
        log::info!("LINE loss {first:.4} -> {last:.4} over {} epochs", history.epoch_loss.len());
    }
    crate::graph::write_embedding(&paths.line_embedding(), &spec, &embedding, &config.hash())?;
    Ok(())
}

/// Build the training-split flow table.
pub fn stage_features(config: &RunConfig, paths: &RunPaths, redo: bool) -> Result<()> {
    paths.ensure_root()?;
    if !redo && paths.flow_table().exists() {
        log::info!("flow table exists, skipping");
        return Ok(());
    }
    let hash = config.hash();
    let spec = config.grid_spec()?;
    let file = crate::grid::read_sequences(&paths.train_seqs())?;
    check_hash(&hash, file.config_hash.as_deref(), &paths.train_seqs(), false)?;
    let flow = build_flow_table(&file.set, &spec, &config.clock())?;
    crate::features::write_flow_table(&paths.flow_table(), &flow, &hash)?;
    Ok(())
}

/// Train the model (optionally the image-free ablation), reading
/// artifacts from `data` and writing checkpoints plus the history CSV
/// into `out`.
pub fn stage_train_into(
    config: &RunConfig,
    data: &RunPaths,
    out: &RunPaths,
    redo: bool,
    ablate: bool,
) -> Result<()> {
    out.ensure_root()?;
    let hash = config.hash();
    let target = if ablate { out.checkpoint_ablated() } else { out.checkpoint_best() };
    if !redo && target.exists() {
        log::info!("checkpoint {} exists, skipping", target.display());
        return Ok(());
    }
    let spec = config.grid_spec()?;
    let clock = config.clock();

    let seq_file = crate::grid::read_sequences(&data.train_seqs())?;
    check_hash(&hash, seq_file.config_hash.as_deref(), &data.train_seqs(), false)?;
    let (flow, flow_hash) = crate::features::read_flow_table(&data.flow_table())?;
    check_hash(&hash, Some(&flow_hash), &data.flow_table(), false)?;
    let (line, line_hash) = crate::graph::read_embedding(&data.line_embedding(), &spec)?;
    check_hash(&hash, Some(&line_hash), &data.line_embedding(), false)?;
    let mut archive = ImageArchive::open(&data.images())?;
    check_hash(&hash, Some(&archive.config_hash.clone()), &data.images(), false)?;
    let images = ImageBank::from_archive(
        &mut archive,
        &spec,
        (config.model.image_height, config.model.image_width),
    )?;

    let (train_seqs, val_seqs) = split_validation(seq_file.set.sequences, &clock);
    let trained = train_model(
        config, &spec, &flow, &line, &images, &train_seqs, &val_seqs, ablate,
        |s| {
            log::info!(
                "epoch {}: loss {:.4} train MAPE {:.2}% val MAPE {:.2}% ({:.1}s)",
                s.epoch, s.train_loss, s.train_mape, s.eval_mape, s.wall_s
            );
        },
    )?;

    save_checkpoint(&target, &trained.model, &trained.registry, None, &hash)?;
    if !ablate {
        save_checkpoint(&out.checkpoint_last(), &trained.model, &trained.registry, None, &hash)?;
        report::write_history_csv(&out.history_csv(), &trained.history, &hash)?;
    }
    log::info!("wrote {}", target.display());
    Ok(())
}

pub struct EvalArtifacts {
    pub rows: Vec<TripRow>,
    pub aggregate: Vec<(&'static str, Option<crate::estimation::MetricsReport>)>,
}

/// Evaluate the trained checkpoints over the test corpus and write the
/// report files into the run's reports directory.
pub fn stage_evaluate(config: &RunConfig, paths: &RunPaths, force: bool) -> Result<EvalArtifacts> {
    let reports = paths.reports_dir();
    stage_evaluate_into(config, paths, &reports, force)
}

/// Evaluate with an explicit report directory.
pub fn stage_evaluate_into(
    config: &RunConfig,
    paths: &RunPaths,
    reports: &Path,
    force: bool,
) -> Result<EvalArtifacts> {
    let hash = config.hash();
    let spec = config.grid_spec()?;

    let ckpt = load_checkpoint(&paths.checkpoint_best())?;
    check_hash(&hash, Some(&ckpt.config_hash), &paths.checkpoint_best(), force)?;
    let ablated = if paths.checkpoint_ablated().exists() {
        let a = load_checkpoint(&paths.checkpoint_ablated())?;
        check_hash(&hash, Some(&a.config_hash), &paths.checkpoint_ablated(), force)?;
        Some(a.model)
    } else {
        None
    };

    let (flow, flow_hash) = crate::features::read_flow_table(&paths.flow_table())?;
    check_hash(&hash, Some(&flow_hash), &paths.flow_table(), force)?;
    let mut archive = ImageArchive::open(&paths.images())?;
    check_hash(&hash, Some(&archive.config_hash.clone()), &paths.images(), force)?;
    let images = ImageBank::from_archive(
        &mut archive,
        &spec,
        (config.model.image_height, config.model.image_width),
    )?;

    let train_file = crate::trajectory::read_corpus(&paths.train_trips())?;
    check_hash(&hash, train_file.config_hash.as_deref(), &paths.train_trips(), force)?;
    let test_file = crate::trajectory::read_corpus(&paths.test_trips())?;
    check_hash(&hash, test_file.config_hash.as_deref(), &paths.test_trips(), force)?;

    let rows = evaluate(&EvalInputs {
        config,
        spec: &spec,
        flow: &flow,
        images: &images,
        registry: &ckpt.registry,
        model: &ckpt.model,
        ablated: ablated.as_ref(),
        train_corpus: &train_file.corpus,
        test_corpus: &test_file.corpus,
    })?;

    std::fs::create_dir_all(reports)?;
    report::write_trip_csv(&reports.join("trips.csv"), &rows, &hash)?;
    let aggregate: Vec<(&'static str, Option<crate::estimation::MetricsReport>)> = vec![
        ("deepi2t_path_aware", report::method_metrics(&rows, |r| r.aware)),
        ("deepi2t_path_blind", report::method_metrics(&rows, |r| r.blind)),
        ("gridlstm_ablation", report::method_metrics(&rows, |r| r.ablated)),
        ("lr", report::method_metrics(&rows, |r| r.lr)),
        ("avg", report::method_metrics(&rows, |r| r.avg)),
        ("temp", report::method_metrics(&rows, |r| r.temp)),
    ];
    report::write_aggregate_csv(&reports.join("aggregate.csv"), &aggregate, &hash)?;
    let clock = config.clock();
    report::write_hourly_report(
        &reports.join("hourly.csv"),
        &reports.join("hourly.png"),
        &rows,
        |r| r.aware,
        &clock,
        &hash,
    )?;
    report::write_duration_report(
        &reports.join("duration.csv"),
        &reports.join("duration.png"),
        &rows,
        |r| r.aware,
        250.0,
        &hash,
    )?;
    for (name, metrics) in &aggregate {
        if let Some(m) = metrics {
            log::info!(
                "{name}: MAE {:.1}s MAPE {:.2}% SR {:.1}% (n={})",
                m.mae_s, m.mape_pct, m.sr_pct, m.count
            );
        }
    }
    Ok(EvalArtifacts { rows, aggregate })
}
