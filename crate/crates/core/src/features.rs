//! Time-varying flow features per grid and embedding-table indices
//! for trip attributes (start time, driver, weather).

use crate::error::{Error, Result};
use crate::grid::{GridSpec, SequenceSet};
use crate::trajectory::Provenance;
use chrono::{DateTime, Datelike, Timelike};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

pub const MINUTES_PER_WEEK: u32 = 7 * 24 * 60;

/// Embedding table dimensions. The attribute tables concatenate to a
/// 50-dimension vector (30 + 10 + 10).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingTableSpec {
    pub direction_dim: usize,
    pub flow_rows: usize,
    pub flow_dim: usize,
    pub start_time_rows: usize,
    pub start_time_dim: usize,
    pub driver_rows: usize,
    pub driver_dim: usize,
    pub weather_rows: usize,
    pub weather_dim: usize,
    pub line_dim: usize,
}

impl Default for EmbeddingTableSpec {
    fn default() -> Self {
        Self {
            direction_dim: 200,
            flow_rows: 1000,
            flow_dim: 50,
            start_time_rows: 10080,
            start_time_dim: 30,
            driver_rows: 25000,
            driver_dim: 10,
            weather_rows: 400,
            weather_dim: 10,
            line_dim: 100,
        }
    }
}

impl EmbeddingTableSpec {
    pub fn attr_dim(&self) -> usize {
        self.start_time_dim + self.driver_dim + self.weather_dim
    }

    /// Dimension of the fused per-step vector.
    pub fn fused_dim(&self) -> usize {
        self.direction_dim + self.line_dim + self.flow_dim + self.attr_dim()
    }
}

// ---------------------------------------------------------------------------
// Flow
// ---------------------------------------------------------------------------

/// Mean vehicle visits per grid per hour-of-day over training days.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTable {
    pub width: u32,
    pub height: u32,
    values: Vec<f64>, // cell-major, 24 hours per cell
}

impl FlowTable {
    pub fn zeros(spec: &GridSpec) -> Self {
        Self { width: spec.width, height: spec.height, values: vec![0.0; spec.num_cells() * 24] }
    }

    pub fn get(&self, cell: crate::grid::CellId, hour: u32) -> f64 {
        let idx = (cell.row as usize * self.width as usize + cell.col as usize) * 24 + hour as usize;
        self.values[idx]
    }

    fn get_mut(&mut self, cell_index: usize, hour: usize) -> &mut f64 {
        &mut self.values[cell_index * 24 + hour]
    }
}

/// Local clock context: a plain UTC offset, enough for single-city
/// datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ClockContext {
    pub utc_offset_s: i64,
}

impl Default for ClockContext {
    fn default() -> Self {
        Self { utc_offset_s: 0 }
    }
}

impl ClockContext {
    fn local(&self, unix_s: i64) -> DateTime<chrono::Utc> {
        DateTime::from_timestamp(unix_s + self.utc_offset_s, 0).expect("timestamp in range")
    }

    pub fn hour_of_day(&self, unix_s: i64) -> u32 {
        self.local(unix_s).hour()
    }

    pub fn day_number(&self, unix_s: i64) -> i64 {
        (unix_s + self.utc_offset_s).div_euclid(86400)
    }

    /// Minute of week with Monday 00:00 = 0.
    pub fn minute_of_week(&self, unix_s: i64) -> u32 {
        let dt = self.local(unix_s);
        dt.weekday().num_days_from_monday() * 1440 + dt.hour() * 60 + dt.minute()
    }
}

/// Average distinct trip visits per cell per hour-of-day over the
/// training days present in the set. A trip counts at most once per
/// (cell, hour); the day count comes from distinct departure dates.
pub fn build_flow_table(
    set: &SequenceSet,
    spec: &GridSpec,
    clock: &ClockContext,
) -> Result<FlowTable> {
    if set.provenance != Provenance::Train {
        return Err(Error::Config {
            key: "flow".into(),
            reason: format!(
                "flow table must be built from the train split, got {}",
                set.provenance.as_str()
            ),
        });
    }
    let mut table = FlowTable::zeros(spec);
    let mut days: Vec<i64> = Vec::new();
    let mut seen: Vec<(usize, u32)> = Vec::new();
    for seq in &set.sequences {
        days.push(clock.day_number(seq.departure));
        seen.clear();
        for step in &seq.steps {
            let ts = seq.departure + step.enter_time_s.floor() as i64;
            let hour = clock.hour_of_day(ts);
            let cell_index = spec.cell_index(step.cell);
            if !seen.contains(&(cell_index, hour)) {
                seen.push((cell_index, hour));
                *table.get_mut(cell_index, hour as usize) += 1.0;
            }
        }
    }
    days.sort_unstable();
    days.dedup();
    let n_days = days.len().max(1) as f64;
    for v in &mut table.values {
        *v /= n_days;
    }
    Ok(table)
}

/// Bucket a mean hourly flow in units of 100 vehicles, saturating at
/// the last table row.
pub fn flow_bucket(flow: f64) -> usize {
    ((flow / 100.0).floor() as usize).min(999)
}

const FLOW_MAGIC: &[u8; 8] = b"I2TFLOW\x01";

pub fn write_flow_table(path: &Path, table: &FlowTable, config_hash: &str) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(FLOW_MAGIC)?;
    let hash = config_hash.as_bytes();
    out.write_all(&(hash.len() as u32).to_le_bytes())?;
    out.write_all(hash)?;
    out.write_all(&table.width.to_le_bytes())?;
    out.write_all(&table.height.to_le_bytes())?;
    out.write_all(&24u32.to_le_bytes())?;
    for v in &table.values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_flow_table(path: &Path) -> Result<(FlowTable, String)> {
    let mut input = BufReader::new(std::fs::File::open(path)?);
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != FLOW_MAGIC {
        return Err(bad("not a flow table file"));
    }
    let mut len4 = [0u8; 4];
    input.read_exact(&mut len4)?;
    let mut hash = vec![0u8; u32::from_le_bytes(len4) as usize];
    input.read_exact(&mut hash)?;
    let hash = String::from_utf8(hash).map_err(|_| bad("bad hash encoding"))?;
    let mut dims = [0u8; 12];
    input.read_exact(&mut dims)?;
    let width = u32::from_le_bytes(dims[0..4].try_into().unwrap());
    let height = u32::from_le_bytes(dims[4..8].try_into().unwrap());
    let hours = u32::from_le_bytes(dims[8..12].try_into().unwrap());
    if hours != 24 {
        return Err(bad("unexpected hour count"));
    }
    let n = width as usize * height as usize * 24;
    let mut values = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        input.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    Ok((FlowTable { width, height, values }, hash))
}

// ---------------------------------------------------------------------------
// Attributes
// ---------------------------------------------------------------------------

/// Indices into the three attribute embedding tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttributeIndices {
    pub start_time_idx: u32,
    pub driver_idx: u32,
    pub weather_idx: u16,
}

/// Driver id 0 is reserved for drivers unseen at training time (and
/// for overflow once the table is full).
pub const UNKNOWN_DRIVER: u32 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct DriverRegistry {
    map: HashMap<String, u32>,
    order: Vec<String>,
    capacity: usize,
    pub overflow_count: u64,
}

impl DriverRegistry {
    pub fn new(capacity: usize) -> Self {
        Self { map: HashMap::new(), order: Vec::new(), capacity, overflow_count: 0 }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Dense id in first-seen order (training path). Ids start at 1;
    /// once the table is full new drivers collapse to the reserved id.
    pub fn assign(&mut self, driver: &str) -> u32 {
        if let Some(&idx) = self.map.get(driver) {
            return idx;
        }
        // row 0 is the reserved id, so capacity-1 real drivers fit
        if self.order.len() + 1 >= self.capacity {
            self.overflow_count += 1;
            if self.overflow_count == 1 {
                log::warn!("driver registry full ({} rows); mapping new drivers to id 0", self.capacity);
            }
            return UNKNOWN_DRIVER;
        }
        let idx = self.order.len() as u32 + 1;
        self.map.insert(driver.to_string(), idx);
        self.order.push(driver.to_string());
        idx
    }

    /// Frozen lookup (inference path): unseen drivers map to id 0.
    pub fn lookup(&self, driver: &str) -> u32 {
        self.map.get(driver).copied().unwrap_or(UNKNOWN_DRIVER)
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "#deepi2t-drivers v1 capacity={}", self.capacity)?;
        for (i, driver) in self.order.iter().enumerate() {
            writeln!(out, "{driver}\t{}", i + 1)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes).expect("in-memory write");
        bytes
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(BufReader::new(bytes), Path::new("<registry>"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        Self::read_from(reader, path)
    }

    fn read_from(reader: impl BufRead, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let mut capacity = 25000;
        let mut map = HashMap::new();
        let mut order = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#deepi2t-drivers") {
                for field in rest.split_whitespace() {
                    if let Some(c) = field.strip_prefix("capacity=") {
                        capacity = c.parse().map_err(|_| bad("bad capacity".into()))?;
                    }
                }
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let (driver, idx) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("bad registry line {line:?}")))?;
            let idx: u32 = idx.parse().map_err(|_| bad(format!("bad index in {line:?}")))?;
            if idx as usize != order.len() + 1 {
                return Err(bad("registry indices must be dense and ordered".into()));
            }
            map.insert(driver.to_string(), idx);
            order.push(driver.to_string());
        }
        Ok(Self { map, order, capacity, overflow_count: 0 })
    }
}

/// Categorical weather codes; index 0 is the "unknown" default.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WeatherCodes {
    pub codes: Vec<String>,
}

impl Default for WeatherCodes {
    fn default() -> Self {
        Self { codes: vec!["unknown".to_string()] }
    }
}

impl WeatherCodes {
    pub fn index(&self, code: &str) -> u16 {
        self.codes.iter().position(|c| c == code).unwrap_or(0) as u16
    }
}

/// Start-time index in minutes of week, Monday 00:00 = 0.
pub fn start_time_index(departure: i64, clock: &ClockContext) -> u32 {
    clock.minute_of_week(departure)
}

pub fn encode_attributes(
    departure: i64,
    driver_idx: u32,
    weather_idx: u16,
    clock: &ClockContext,
) -> AttributeIndices {
    AttributeIndices { start_time_idx: start_time_index(departure, clock), driver_idx, weather_idx }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{CellId, GridSequence, GridStep};
    use proptest::prelude::*;

    fn spec() -> GridSpec {
        GridSpec { min_lon: 0.0, min_lat: 0.0, cell_size_m: 200.0, width: 5, height: 5, ref_lat: 0.0 }
    }

    fn seq_visiting(cell: CellId, departure: i64, enters: &[f64]) -> GridSequence {
        GridSequence {
            steps: enters
                .iter()
                .map(|&e| GridStep {
                    cell,
                    direction: 0,
                    enter_time_s: e,
                    cumulative_time_s: e,
                    padded: false,
                })
                .collect(),
            vehicle_id: "v".into(),
            departure,
            weather_code: 0,
        }
    }

    // 2013-07-01 was a Monday
    const MONDAY_MIDNIGHT: i64 = 1372636800;

    #[test]
    fn flow_daily_visit_averages_to_one() {
        let spec = spec();
        let cell = CellId::new(2, 2);
        // one trip visiting the cell at 08:10 on each of 10 days
        let sequences: Vec<GridSequence> = (0..10)
            .map(|d| seq_visiting(cell, MONDAY_MIDNIGHT + d * 86400 + 8 * 3600 + 600, &[0.0]))
            .collect();
        let set = SequenceSet { sequences, provenance: Provenance::Train };
        let table = build_flow_table(&set, &spec, &ClockContext::default()).unwrap();
        assert_eq!(table.get(cell, 8), 1.0);
        assert_eq!(table.get(cell, 9), 0.0);
        // never-visited cell is zero at all hours
        for h in 0..24 {
            assert_eq!(table.get(CellId::new(0, 0), h), 0.0);
        }
    }

    #[test]
    fn flow_dedups_within_trip_and_hour() {
        let spec = spec();
        let cell = CellId::new(1, 1);
        // one trip entering the cell twice within hour 8, one training day
        let seq = seq_visiting(cell, MONDAY_MIDNIGHT + 8 * 3600, &[0.0, 300.0]);
        let set = SequenceSet { sequences: vec![seq], provenance: Provenance::Train };
        let table = build_flow_table(&set, &spec, &ClockContext::default()).unwrap();
        // brute-force recount with the dedup rule
        assert_eq!(table.get(cell, 8), 1.0);
    }

    #[test]
    fn flow_refuses_non_train_split() {
        let set = SequenceSet { sequences: vec![], provenance: Provenance::Test };
        assert!(build_flow_table(&set, &spec(), &ClockContext::default()).is_err());
    }

    #[test]
    fn flow_buckets() {
        assert_eq!(flow_bucket(0.0), 0);
        assert_eq!(flow_bucket(250.0), 2);
        assert_eq!(flow_bucket(1_000_000.0), 999);
    }

    #[test]
    fn flow_table_file_round_trip() {
        let spec = spec();
        let cell = CellId::new(1, 1);
        let seq = seq_visiting(cell, MONDAY_MIDNIGHT, &[0.0]);
        let set = SequenceSet { sequences: vec![seq], provenance: Provenance::Train };
        let table = build_flow_table(&set, &spec, &ClockContext::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flow.bin");
        write_flow_table(&path, &table, "abc123").unwrap();
        let (read, hash) = read_flow_table(&path).unwrap();
        assert_eq!(read, table);
        assert_eq!(hash, "abc123");
    }

    #[test]
    fn start_time_week_bounds() {
        let clock = ClockContext::default();
        assert_eq!(start_time_index(MONDAY_MIDNIGHT, &clock), 0);
        // Sunday 23:59 of the same week
        let sunday_2359 = MONDAY_MIDNIGHT + 6 * 86400 + 23 * 3600 + 59 * 60;
        assert_eq!(start_time_index(sunday_2359, &clock), 10079);
    }

    #[test]
    fn driver_registry_assign_and_lookup() {
        let mut reg = DriverRegistry::new(25000);
        assert_eq!(reg.assign("a"), 1);
        assert_eq!(reg.assign("b"), 2);
        assert_eq!(reg.assign("a"), 1);
        assert_eq!(reg.lookup("b"), 2);
        assert_eq!(reg.lookup("never-seen"), UNKNOWN_DRIVER);
    }

    #[test]
    fn driver_registry_overflow_maps_to_reserved() {
        let mut reg = DriverRegistry::new(3); // ids 1 and 2 fit
        assert_eq!(reg.assign("a"), 1);
        assert_eq!(reg.assign("b"), 2);
        assert_eq!(reg.assign("c"), UNKNOWN_DRIVER);
        assert_eq!(reg.overflow_count, 1);
    }

    #[test]
    fn driver_registry_file_round_trip() {
        let mut reg = DriverRegistry::new(100);
        reg.assign("x");
        reg.assign("y");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("drivers.tsv");
        reg.save(&path).unwrap();
        let loaded = DriverRegistry::load(&path).unwrap();
        assert_eq!(loaded.lookup("x"), 1);
        assert_eq!(loaded.lookup("y"), 2);
        assert_eq!(loaded.len(), 2);
    }

    #[test]
    fn weather_defaults_to_unknown() {
        let codes = WeatherCodes { codes: vec!["unknown".into(), "rain".into()] };
        assert_eq!(codes.index("rain"), 1);
        assert_eq!(codes.index("snowstorm"), 0);
        assert_eq!(WeatherCodes::default().index("anything"), 0);
    }

    proptest! {
        #[test]
        fn flow_bucket_monotone(a in 0.0f64..1e7, b in 0.0f64..1e7) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(flow_bucket(lo) <= flow_bucket(hi));
            prop_assert!(flow_bucket(hi) <= 999);
        }

        #[test]
        fn start_time_round_trips(day in 0u32..7, hour in 0u32..24, minute in 0u32..60) {
            let clock = ClockContext::default();
            let ts = MONDAY_MIDNIGHT + (day * 86400 + hour * 3600 + minute * 60) as i64;
            let idx = start_time_index(ts, &clock);
            prop_assert_eq!(idx / 1440, day);
            prop_assert_eq!(idx % 1440 / 60, hour);
            prop_assert_eq!(idx % 60, minute);
        }
    }
}
