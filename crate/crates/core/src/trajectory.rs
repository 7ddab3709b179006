//! Raw trip ingestion: the Porto public CSV format, a generic CSV
//! format, trip labeling, date splits and cleaning filters.

use crate::error::{Error, Result};
use crate::geo;
use chrono::NaiveDate;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// One GPS fix: unix seconds plus WGS84 coordinates.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Footprint {
    pub t: i64,
    pub lon: f64,
    pub lat: f64,
}

/// An ordered trip of footprints for one vehicle.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Trajectory {
    pub vehicle_id: String,
    pub footprints: Vec<Footprint>,
}

impl Trajectory {
    pub fn new(vehicle_id: String, footprints: Vec<Footprint>) -> Result<Self> {
        if footprints.is_empty() {
            return Err(Error::Empty("trajectory has no footprints".into()));
        }
        for w in footprints.windows(2) {
            if w[1].t < w[0].t {
                return Err(Error::ParseRecord {
                    row: 0,
                    reason: "timestamps must be non-decreasing".into(),
                });
            }
        }
        for f in &footprints {
            if !(-180.0..=180.0).contains(&f.lon) || !(-90.0..=90.0).contains(&f.lat) {
                return Err(Error::ParseRecord {
                    row: 0,
                    reason: format!("coordinate out of range: ({}, {})", f.lon, f.lat),
                });
            }
        }
        Ok(Self { vehicle_id, footprints })
    }

    pub fn departure(&self) -> i64 {
        self.footprints[0].t
    }

    pub fn arrival(&self) -> i64 {
        self.footprints[self.footprints.len() - 1].t
    }
}

/// Trip-level supervision targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripLabel {
    pub travel_time_s: f64,
    pub travel_distance_km: f64,
}

/// Travel time is last minus first timestamp; distance accumulates
/// great-circle hops between consecutive footprints.
pub fn trip_label(traj: &Trajectory) -> TripLabel {
    let travel_time_s = (traj.arrival() - traj.departure()) as f64;
    let travel_distance_km = traj
        .footprints
        .windows(2)
        .map(|w| geo::haversine_km(w[0].lon, w[0].lat, w[1].lon, w[1].lat))
        .sum();
    TripLabel { travel_time_s, travel_distance_km }
}

/// Which split a corpus belongs to. Feature tables may only be built
/// from the training split and check this tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Provenance {
    Unsplit,
    Train,
    Test,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Unsplit => "unsplit",
            Provenance::Train => "train",
            Provenance::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unsplit" => Some(Provenance::Unsplit),
            "train" => Some(Provenance::Train),
            "test" => Some(Provenance::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub trips: Vec<Trajectory>,
    pub provenance: Provenance,
}

impl Corpus {
    pub fn new(trips: Vec<Trajectory>) -> Self {
        Self { trips, provenance: Provenance::Unsplit }
    }

    pub fn len(&self) -> usize {
        self.trips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trips.is_empty()
    }

    /// Deterministic order regardless of how rows were ingested:
    /// sort on (departure, vehicle_id).
    pub fn sort_canonical(&mut self) {
        self.trips
            .sort_by(|a, b| (a.departure(), &a.vehicle_id).cmp(&(b.departure(), &b.vehicle_id)));
    }
}

// ---------------------------------------------------------------------------
// Porto public CSV
// ---------------------------------------------------------------------------

/// Porto raw rows carry a single departure timestamp and a polyline of
/// [lon, lat] pairs sampled every 15 seconds.
pub const PORTO_SAMPLE_INTERVAL_S: i64 = 15;

/// Column view of one Porto CSV record.
pub struct PortoRow<'a> {
    pub taxi_id: &'a str,
    pub timestamp: &'a str,
    pub missing_data: &'a str,
    pub polyline: &'a str,
}

/// Parse one Porto record into a trajectory, synthesizing per-point
/// timestamps at the fixed 15 s cadence.
pub fn parse_porto_row(row: &PortoRow, row_index: usize) -> Result<Trajectory> {
    let err = |reason: String| Error::ParseRecord { row: row_index, reason };

    if row.missing_data.trim().eq_ignore_ascii_case("true") {
        return Err(err("MISSING_DATA flag set".into()));
    }
    let departure: i64 = row
        .timestamp
        .trim()
        .parse()
        .map_err(|e| err(format!("bad TIMESTAMP: {e}")))?;
    if departure <= 0 {
        return Err(err(format!("non-positive TIMESTAMP {departure}")));
    }
    let points: Vec<[f64; 2]> = serde_json::from_str(row.polyline.trim())
        .map_err(|e| err(format!("bad POLYLINE: {e}")))?;
    if points.is_empty() {
        return Err(err("empty POLYLINE".into()));
    }
    let footprints = points
        .iter()
        .enumerate()
        .map(|(i, p)| Footprint {
            t: departure + PORTO_SAMPLE_INTERVAL_S * i as i64,
            lon: p[0],
            lat: p[1],
        })
        .collect();
    Trajectory::new(row.taxi_id.trim().to_string(), footprints)
        .map_err(|e| err(e.to_string()))
}

#[derive(Debug, Default, Clone)]
pub struct ParseStats {
    pub rows: usize,
    pub parsed: usize,
    pub skipped: usize,
}

/// Read a whole Porto CSV (skip-and-log policy for bad rows) and
/// return the corpus in canonical order.
pub fn parse_porto_csv(path: &Path) -> Result<(Corpus, ParseStats)> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                reason: format!("missing column {name}"),
            })
    };
    let taxi_id = col("TAXI_ID")?;
    let timestamp = col("TIMESTAMP")?;
    let missing_data = col("MISSING_DATA")?;
    let polyline = col("POLYLINE")?;

    let mut stats = ParseStats::default();
    let mut trips = Vec::new();
    for (i, record) in reader.records().enumerate() {
        stats.rows += 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                log::warn!("row {i}: unreadable record: {e}");
                stats.skipped += 1;
                continue;
            }
        };
        let row = PortoRow {
            taxi_id: record.get(taxi_id).unwrap_or(""),
            timestamp: record.get(timestamp).unwrap_or(""),
            missing_data: record.get(missing_data).unwrap_or(""),
            polyline: record.get(polyline).unwrap_or(""),
        };
        match parse_porto_row(&row, i) {
            Ok(traj) => {
                trips.push(traj);
                stats.parsed += 1;
            }
            Err(e) => {
                if stats.skipped < 20 {
                    log::warn!("{e}");
                }
                stats.skipped += 1;
            }
        }
    }
    let mut corpus = Corpus::new(trips);
    corpus.sort_canonical();
    Ok((corpus, stats))
}

/// Generic CSV: `trip_id,vehicle_id,t,lon,lat`, one footprint per row,
/// rows of one trip contiguous and time-ordered.
pub fn parse_generic_csv(path: &Path) -> Result<(Corpus, ParseStats)> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut stats = ParseStats::default();
    let mut trips: Vec<Trajectory> = Vec::new();
    let mut current: Option<(String, String, Vec<Footprint>)> = None;

    let flush = |cur: &mut Option<(String, String, Vec<Footprint>)>,
                     trips: &mut Vec<Trajectory>,
                     stats: &mut ParseStats| {
        if let Some((_, vehicle, pts)) = cur.take() {
            match Trajectory::new(vehicle, pts) {
                Ok(t) => trips.push(t),
                Err(e) => {
                    log::warn!("dropping trip: {e}");
                    stats.skipped += 1;
                }
            }
        }
    };

    for (i, record) in reader.records().enumerate() {
        stats.rows += 1;
        let record = record?;
        let get = |j: usize| -> Result<&str> {
            record.get(j).ok_or_else(|| Error::ParseRecord {
                row: i,
                reason: "short record".into(),
            })
        };
        let trip_id = get(0)?.to_string();
        let vehicle = get(1)?.to_string();
        let fp = Footprint {
            t: get(2)?.trim().parse().map_err(|e| Error::ParseRecord {
                row: i,
                reason: format!("bad t: {e}"),
            })?,
            lon: get(3)?.trim().parse().map_err(|e| Error::ParseRecord {
                row: i,
                reason: format!("bad lon: {e}"),
            })?,
            lat: get(4)?.trim().parse().map_err(|e| Error::ParseRecord {
                row: i,
                reason: format!("bad lat: {e}"),
            })?,
        };
        match &mut current {
            Some((id, _, pts)) if *id == trip_id => pts.push(fp),
            _ => {
                flush(&mut current, &mut trips, &mut stats);
                current = Some((trip_id, vehicle, vec![fp]));
            }
        }
    }
    flush(&mut current, &mut trips, &mut stats);
    stats.parsed = trips.len();
    let mut corpus = Corpus::new(trips);
    corpus.sort_canonical();
    Ok((corpus, stats))
}

// ---------------------------------------------------------------------------
// Split and cleaning
// ---------------------------------------------------------------------------

/// Half-open date split: departures strictly before the cutoff
/// midnight go to train, the rest (including the midnight itself) to
/// test. `utc_offset_s` shifts the notion of "local midnight".
pub fn split_by_date(corpus: &Corpus, cutoff: NaiveDate, utc_offset_s: i64) -> (Corpus, Corpus) {
    let cutoff_ts = cutoff.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp() - utc_offset_s;
    split_by_timestamp(corpus, cutoff_ts)
}

pub fn split_by_timestamp(corpus: &Corpus, cutoff_ts: i64) -> (Corpus, Corpus) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for trip in &corpus.trips {
        if trip.departure() < cutoff_ts {
            train.push(trip.clone());
        } else {
            test.push(trip.clone());
        }
    }
    if train.is_empty() {
        log::warn!("date split produced an empty training corpus");
    }
    if test.is_empty() {
        log::warn!("date split produced an empty test corpus");
    }
    (
        Corpus { trips: train, provenance: Provenance::Train },
        Corpus { trips: test, provenance: Provenance::Test },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleanRules {
    pub min_travel_time_s: f64,
    pub max_travel_time_s: f64,
    pub min_points: usize,
}

impl Default for CleanRules {
    fn default() -> Self {
        Self { min_travel_time_s: 60.0, max_travel_time_s: 7200.0, min_points: 2 }
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq)]
pub struct CleanReport {
    pub kept: usize,
    pub removed_few_points: usize,
    pub removed_too_short: usize,
    pub removed_too_long: usize,
}

/// Drop trips outside the travel-time bounds or with too few points.
pub fn clean_trips(corpus: &Corpus, rules: &CleanRules) -> (Corpus, CleanReport) {
    let mut report = CleanReport::default();
    let mut kept = Vec::new();
    for trip in &corpus.trips {
        if trip.footprints.len() < rules.min_points {
            report.removed_few_points += 1;
            continue;
        }
        let label = trip_label(trip);
        if label.travel_time_s < rules.min_travel_time_s {
            report.removed_too_short += 1;
            continue;
        }
        if label.travel_time_s > rules.max_travel_time_s {
            report.removed_too_long += 1;
            continue;
        }
        kept.push(trip.clone());
    }
    report.kept = kept.len();
    (Corpus { trips: kept, provenance: corpus.provenance }, report)
}

// ---------------------------------------------------------------------------
// Canonical trip-record persistence
// ---------------------------------------------------------------------------

const CORPUS_MAGIC: &str = "#deepi2t-trips";
const CORPUS_VERSION: u32 = 1;

/// Write the corpus in the canonical newline-delimited text schema:
/// one trip per line as `version vehicle_id departure N (t lon lat)*`.
pub fn write_corpus(path: &Path, corpus: &Corpus, config_hash: &str) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "{CORPUS_MAGIC} v{CORPUS_VERSION} split={} config={config_hash}",
        corpus.provenance.as_str()
    )?;
    for trip in &corpus.trips {
        if trip.vehicle_id.contains(char::is_whitespace) || trip.vehicle_id.is_empty() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("vehicle id {:?} not storable in the text schema", trip.vehicle_id),
            });
        }
        write!(
            out,
            "{CORPUS_VERSION} {} {} {}",
            trip.vehicle_id,
            trip.departure(),
            trip.footprints.len()
        )?;
        for f in &trip.footprints {
            write!(out, " {} {} {}", f.t, f.lon, f.lat)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub struct CorpusFile {
    pub corpus: Corpus,
    pub config_hash: Option<String>,
}

pub fn read_corpus(path: &Path) -> Result<CorpusFile> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };

    let mut provenance = Provenance::Unsplit;
    let mut config_hash = None;
    let mut trips = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(CORPUS_MAGIC) {
            for field in rest.split_whitespace() {
                if let Some(s) = field.strip_prefix("split=") {
                    provenance = Provenance::parse(s)
                        .ok_or_else(|| bad(format!("unknown split tag {s}")))?;
                } else if let Some(h) = field.strip_prefix("config=") {
                    config_hash = Some(h.to_string());
                }
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let mut it = line.split_ascii_whitespace();
        let version: u32 = it
            .next()
            .ok_or_else(|| bad(format!("line {lineno}: empty record")))?
            .parse()
            .map_err(|_| bad(format!("line {lineno}: bad version field")))?;
        if version != CORPUS_VERSION {
            return Err(bad(format!("line {lineno}: unsupported record version {version}")));
        }
        let vehicle_id = it
            .next()
            .ok_or_else(|| bad(format!("line {lineno}: missing vehicle id")))?
            .to_string();
        let _departure: i64 = it
            .next()
            .ok_or_else(|| bad(format!("line {lineno}: missing departure")))?
            .parse()
            .map_err(|_| bad(format!("line {lineno}: bad departure")))?;
        let n: usize = it
            .next()
            .ok_or_else(|| bad(format!("line {lineno}: missing point count")))?
            .parse()
            .map_err(|_| bad(format!("line {lineno}: bad point count")))?;
        let mut footprints = Vec::with_capacity(n);
        for _ in 0..n {
            let t: i64 = it
                .next()
                .ok_or_else(|| bad(format!("line {lineno}: truncated points")))?
                .parse()
                .map_err(|_| bad(format!("line {lineno}: bad t")))?;
            let lon: f64 = it
                .next()
                .ok_or_else(|| bad(format!("line {lineno}: truncated points")))?
                .parse()
                .map_err(|_| bad(format!("line {lineno}: bad lon")))?;
            let lat: f64 = it
                .next()
                .ok_or_else(|| bad(format!("line {lineno}: truncated points")))?
                .parse()
                .map_err(|_| bad(format!("line {lineno}: bad lat")))?;
            footprints.push(Footprint { t, lon, lat });
        }
        if it.next().is_some() {
            return Err(bad(format!("line {lineno}: trailing fields")));
        }
        trips.push(
            Trajectory::new(vehicle_id, footprints).map_err(|e| bad(format!("line {lineno}: {e}")))?,
        );
    }
    Ok(CorpusFile { corpus: Corpus { trips, provenance }, config_hash })
}
