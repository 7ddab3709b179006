//! Trip query answering: path-aware via direct model inference,
//! path-blind via l1-weighted neighboring trips, plus the LR/AVG/TEMP
//! baselines and the MAE/MAPE/SR metrics.

use crate::error::{Error, Result};
use crate::features::{ClockContext, DriverRegistry, FlowTable};
use crate::grid::{build_sequence, CellId, GridSequence, GridSpec};
use crate::model::{ConvBatch, ImageBank, ModelState};
use crate::trajectory::{trip_label, Corpus, Trajectory};
use crate::training::{prepare_example, RegistryMode};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Origin/destination query: the path-blind case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdQuery {
    pub origin_lon: f64,
    pub origin_lat: f64,
    pub dest_lon: f64,
    pub dest_lat: f64,
    pub departure: i64,
    pub weather_code: u16,
}

/// At most this many neighbors are scored per path-blind query,
/// sampled deterministically.
pub const NEIGHBOR_CAP: usize = 50;

/// One historical trip as seen by the neighbor index.
#[derive(Debug, Clone)]
pub struct NeighborTrip {
    pub seq: GridSequence,
    pub od_l1_m: f64,
    pub travel_time_s: f64,
    pub departure: i64,
}

/// Training-split trips bucketed by (origin cell, destination cell).
pub struct NeighborIndex {
    trips: Vec<NeighborTrip>,
    by_od: HashMap<(CellId, CellId), Vec<u32>>,
}

impl NeighborIndex {
    /// Index every training trip that grids successfully. Trips whose
    /// own endpoints l1-collapse are skipped (their speed and ratio
    /// terms would be degenerate).
    pub fn build(corpus: &Corpus, spec: &GridSpec) -> Result<Self> {
        let mut trips = Vec::new();
        let mut by_od: HashMap<(CellId, CellId), Vec<u32>> = HashMap::new();
        for traj in &corpus.trips {
            let seq = match build_sequence(traj, spec) {
                Ok(s) => s,
                Err(Error::SingleCell) | Err(Error::OutOfRegion { .. }) => continue,
                Err(e) => return Err(e),
            };
            let first = traj.footprints.first().unwrap();
            let last = traj.footprints.last().unwrap();
            let od_l1_m = spec.l1_distance_m(first.lon, first.lat, last.lon, last.lat);
            let label = trip_label(traj);
            if od_l1_m < 1.0 || label.travel_time_s <= 0.0 {
                continue;
            }
            let origin = seq.steps.first().unwrap().cell;
            let dest = seq.steps.last().unwrap().cell;
            let idx = trips.len() as u32;
            trips.push(NeighborTrip {
                seq,
                od_l1_m,
                travel_time_s: label.travel_time_s,
                departure: traj.departure(),
            });
            by_od.entry((origin, dest)).or_default().push(idx);
        }
        Ok(Self { trips, by_od })
    }

    pub fn len(&self) -> usize {
        self.trips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trips.is_empty()
    }

    pub fn trips(&self) -> &[NeighborTrip] {
        &self.trips
    }

    fn exact(&self, origin: CellId, dest: CellId) -> Vec<u32> {
        self.by_od.get(&(origin, dest)).cloned().unwrap_or_default()
    }

    /// Same-OD trips, expanding each endpoint to its 8-neighborhood
    /// (one round) when the exact bucket is empty; capped and
    /// deterministically subsampled.
    pub fn neighbors(&self, spec: &GridSpec, origin: CellId, dest: CellId) -> Vec<u32> {
        let mut found = self.exact(origin, dest);
        if found.is_empty() {
            for oc in neighborhood(spec, origin) {
                for dc in neighborhood(spec, dest) {
                    if oc == origin && dc == dest {
                        continue;
                    }
                    found.extend(self.exact(oc, dc));
                }
            }
            found.sort_unstable();
            found.dedup();
        }
        if found.len() > NEIGHBOR_CAP {
            let seed = 0x0D5E ^ ((spec.cell_index(origin) as u64) << 20 ^ spec.cell_index(dest) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            found.shuffle(&mut rng);
            found.truncate(NEIGHBOR_CAP);
            found.sort_unstable();
        }
        found
    }
}

/// The queried cell plus its 8 surrounding cells, within bounds.
fn neighborhood(spec: &GridSpec, cell: CellId) -> Vec<CellId> {
    let mut cells = Vec::with_capacity(9);
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            let col = cell.col as i64 + dc;
            let row = cell.row as i64 + dr;
            if col >= 0 && row >= 0 {
                let c = CellId::new(col as u32, row as u32);
                if spec.contains(c) {
                    cells.push(c);
                }
            }
        }
    }
    cells
}

/// The neighboring-trips combination rule: the mean of the neighbors'
/// estimates, each rescaled by the trip-length ratio.
pub fn combine_neighbor_estimates(l_test_m: f64, neighbors: &[(f64, f64)]) -> f64 {
    let n = neighbors.len() as f64;
    neighbors.iter().map(|&(l_i, t_hat)| (l_test_m / l_i) * t_hat).sum::<f64>() / n
}

/// Read-only inference context over a trained model.
pub struct Estimator<'a> {
    pub model: &'a ModelState,
    pub spec: &'a GridSpec,
    pub flow: &'a FlowTable,
    pub registry: &'a DriverRegistry,
    pub clock: &'a ClockContext,
    pub images: &'a ImageBank,
}

impl Estimator<'_> {
    /// Whole-trip estimate for a fully specified path.
    pub fn path_aware(&self, traj: &Trajectory, weather_code: u16) -> Result<f64> {
        let mut seq = build_sequence(traj, self.spec)?;
        seq.weather_code = weather_code;
        self.path_aware_seq(&seq)
    }

    pub fn path_aware_seq(&self, seq: &GridSequence) -> Result<f64> {
        let mut frozen = RegistryMode::Frozen(self.registry);
        let ex = prepare_example(seq, self.spec, self.flow, &mut frozen, self.clock)?;
        let mut conv_batch = ConvBatch::new(false);
        let est = self.model.predict_seq(&ex.input, &mut conv_batch, self.images)?;
        Ok(*est.last().unwrap())
    }

    /// Path-blind estimate: neighboring training trips are re-dated to
    /// the query departure, estimated path-aware and combined by their
    /// l1 ratios.
    pub fn path_blind(&self, query: &OdQuery, index: &NeighborIndex) -> Result<f64> {
        let origin = self.spec.locate(query.origin_lon, query.origin_lat)?;
        let dest = self.spec.locate(query.dest_lon, query.dest_lat)?;
        if origin == dest {
            return Err(Error::Degenerate("origin and destination share a cell".into()));
        }
        let l_test = self.spec.l1_distance_m(
            query.origin_lon,
            query.origin_lat,
            query.dest_lon,
            query.dest_lat,
        );
        let picked = index.neighbors(self.spec, origin, dest);
        if picked.is_empty() {
            return Err(Error::NoNeighbors);
        }
        let mut scored = Vec::with_capacity(picked.len());
        for &i in &picked {
            let neighbor = &index.trips[i as usize];
            // re-date: same spatial sequence and driver, the query's
            // departure time and weather
            let mut seq = neighbor.seq.clone();
            seq.departure = query.departure;
            seq.weather_code = query.weather_code;
            let estimate = self.path_aware_seq(&seq)?;
            scored.push((neighbor.od_l1_m, estimate));
        }
        Ok(combine_neighbor_estimates(l_test, &scored))
    }
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

/// Ordinary least squares of travel time on OD l1 distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrBaseline {
    pub slope: f64,
    pub intercept: f64,
}

impl LrBaseline {
    pub fn fit(samples: &[(f64, f64)]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Degenerate("need at least two trips".into()));
        }
        let n = samples.len() as f64;
        let mean_x = samples.iter().map(|s| s.0).sum::<f64>() / n;
        let mean_y = samples.iter().map(|s| s.1).sum::<f64>() / n;
        let sxx: f64 = samples.iter().map(|s| (s.0 - mean_x) * (s.0 - mean_x)).sum();
        if sxx == 0.0 {
            return Err(Error::Degenerate("all trip distances are equal".into()));
        }
        let sxy: f64 = samples.iter().map(|s| (s.0 - mean_x) * (s.1 - mean_y)).sum();
        let slope = sxy / sxx;
        Ok(Self { slope, intercept: mean_y - slope * mean_x })
    }

    pub fn fit_index(index: &NeighborIndex) -> Result<Self> {
        let samples: Vec<(f64, f64)> =
            index.trips().iter().map(|t| (t.od_l1_m, t.travel_time_s)).collect();
        Self::fit(&samples)
    }

    pub fn predict(&self, l1_m: f64) -> f64 {
        self.slope * l1_m + self.intercept
    }
}

/// Mean-of-neighbor-speeds estimate.
pub fn avg_combine(l_test_m: f64, speeds: &[f64]) -> f64 {
    let mean = speeds.iter().sum::<f64>() / speeds.len() as f64;
    l_test_m / mean
}

/// The AVG baseline: average the historical speeds of same-OD trips.
pub struct AvgBaseline<'a> {
    pub index: &'a NeighborIndex,
    pub spec: &'a GridSpec,
}

impl AvgBaseline<'_> {
    pub fn predict(&self, query: &OdQuery) -> Result<f64> {
        let origin = self.spec.locate(query.origin_lon, query.origin_lat)?;
        let dest = self.spec.locate(query.dest_lon, query.dest_lat)?;
        let picked = self.index.neighbors(self.spec, origin, dest);
        if picked.is_empty() {
            return Err(Error::NoNeighbors);
        }
        let l_test = self.spec.l1_distance_m(
            query.origin_lon,
            query.origin_lat,
            query.dest_lon,
            query.dest_lat,
        );
        let speeds: Vec<f64> = picked
            .iter()
            .map(|&i| {
                let t = &self.index.trips[i as usize];
                t.od_l1_m / t.travel_time_s
            })
            .collect();
        Ok(avg_combine(l_test, &speeds))
    }
}

/// Citywide mean speed per departure hour; empty buckets fall back to
/// the all-hours mean (flagged).
#[derive(Debug, Clone)]
pub struct HourlySpeedReference {
    pub by_hour: [f64; 24],
    pub fallback_hours: Vec<u32>,
}

impl HourlySpeedReference {
    pub fn build(index: &NeighborIndex, clock: &ClockContext) -> Result<Self> {
        let mut sums = [0.0f64; 24];
        let mut counts = [0usize; 24];
        let mut total = 0.0;
        let mut n = 0usize;
        for t in index.trips() {
            let speed = t.od_l1_m / t.travel_time_s;
            let hour = clock.hour_of_day(t.departure) as usize;
            sums[hour] += speed;
            counts[hour] += 1;
            total += speed;
            n += 1;
        }
        if n == 0 {
            return Err(Error::Empty("no trips for the hourly speed reference".into()));
        }
        let overall = total / n as f64;
        let mut by_hour = [0.0; 24];
        let mut fallback_hours = Vec::new();
        for h in 0..24 {
            if counts[h] > 0 {
                by_hour[h] = sums[h] / counts[h] as f64;
            } else {
                by_hour[h] = overall;
                fallback_hours.push(h as u32);
            }
        }
        Ok(Self { by_hour, fallback_hours })
    }
}

/// The TEMP baseline: AVG with each neighbor speed rescaled by the
/// citywide hourly reference (query hour over neighbor hour).
pub struct TempBaseline<'a> {
    pub index: &'a NeighborIndex,
    pub spec: &'a GridSpec,
    pub reference: &'a HourlySpeedReference,
    pub clock: &'a ClockContext,
}

impl TempBaseline<'_> {
    pub fn predict(&self, query: &OdQuery) -> Result<f64> {
        let origin = self.spec.locate(query.origin_lon, query.origin_lat)?;
        let dest = self.spec.locate(query.dest_lon, query.dest_lat)?;
        let picked = self.index.neighbors(self.spec, origin, dest);
        if picked.is_empty() {
            return Err(Error::NoNeighbors);
        }
        let l_test = self.spec.l1_distance_m(
            query.origin_lon,
            query.origin_lat,
            query.dest_lon,
            query.dest_lat,
        );
        let q_ref = self.reference.by_hour[self.clock.hour_of_day(query.departure) as usize];
        let speeds: Vec<f64> = picked
            .iter()
            .map(|&i| {
                let t = &self.index.trips[i as usize];
                let n_ref = self.reference.by_hour[self.clock.hour_of_day(t.departure) as usize];
                (t.od_l1_m / t.travel_time_s) * (q_ref / n_ref)
            })
            .collect();
        Ok(avg_combine(l_test, &speeds))
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct MetricsReport {
    pub mae_s: f64,
    pub mape_pct: f64,
    pub sr_pct: f64,
    pub count: usize,
}

/// MAE, MAPE and satisfaction rate over (actual, estimated) pairs; the
/// 10% SR boundary counts as satisfied.
pub fn compute_metrics(pairs: &[(f64, f64)]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("metrics over an empty set".into()));
    }
    let mut abs_sum = 0.0;
    let mut ape_sum = 0.0;
    let mut satisfied = 0usize;
    for &(actual, estimated) in pairs {
        if actual <= 0.0 {
            return Err(Error::NonPositiveLabel(actual));
        }
        let err = (actual - estimated).abs();
        abs_sum += err;
        let ape = err / actual;
        ape_sum += ape;
        if ape <= 0.10 {
            satisfied += 1;
        }
    }
    let n = pairs.len() as f64;
    Ok(MetricsReport {
        mae_s: abs_sum / n,
        mape_pct: 100.0 * ape_sum / n,
        sr_pct: 100.0 * satisfied as f64 / n,
        count: pairs.len(),
    })
}

/// Metrics broken down by departure hour; rows carry (hour, report).
pub fn per_hour_metrics(
    items: &[(i64, f64, f64)],
    clock: &ClockContext,
) -> Vec<(u32, MetricsReport)> {
    let mut buckets: Vec<Vec<(f64, f64)>> = vec![Vec::new(); 24];
    for &(departure, actual, estimated) in items {
        buckets[clock.hour_of_day(departure) as usize].push((actual, estimated));
    }
    buckets
        .into_iter()
        .enumerate()
        .filter(|(_, b)| !b.is_empty())
        .map(|(h, b)| (h as u32, compute_metrics(&b).expect("bucket non-empty")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Footprint;
    use proptest::prelude::*;

    fn spec() -> GridSpec {
        GridSpec { min_lon: 0.0, min_lat: 0.0, cell_size_m: 200.0, width: 10, height: 10, ref_lat: 0.0 }
    }

    fn trip_between(spec: &GridSpec, from_m: (f64, f64), to_m: (f64, f64), dep: i64, dur: i64) -> Trajectory {
        let proj = spec.projection();
        let (lon0, lat0) = proj.to_lonlat(from_m.0, from_m.1);
        let (lon1, lat1) = proj.to_lonlat(to_m.0, to_m.1);
        Trajectory::new(
            "n".into(),
            vec![
                Footprint { t: dep, lon: lon0, lat: lat0 },
                Footprint { t: dep + dur / 2, lon: (lon0 + lon1) / 2.0, lat: (lat0 + lat1) / 2.0 },
                Footprint { t: dep + dur, lon: lon1, lat: lat1 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn eq3_single_neighbor_identity() {
        assert_eq!(combine_neighbor_estimates(1000.0, &[(1000.0, 600.0)]), 600.0);
    }

    #[test]
    fn eq3_two_neighbor_hand_example() {
        // L_test = 4 km; (L_1 = 2 km, T_1 = 300 s), (L_2 = 4 km, T_2 = 600 s)
        let estimate = combine_neighbor_estimates(4000.0, &[(2000.0, 300.0), (4000.0, 600.0)]);
        assert_eq!(estimate, 600.0);
    }

    #[test]
    fn eq3_equal_lengths_reduce_to_mean() {
        let estimate = combine_neighbor_estimates(500.0, &[(500.0, 100.0), (500.0, 200.0), (500.0, 330.0)]);
        assert!((estimate - 210.0).abs() < 1e-12);
    }

    #[test]
    fn neighbor_index_exact_and_expanded() {
        let spec = spec();
        let corpus = Corpus::new(vec![
            trip_between(&spec, (100.0, 100.0), (900.0, 100.0), 1000, 300),
            trip_between(&spec, (150.0, 150.0), (950.0, 150.0), 2000, 400),
            trip_between(&spec, (100.0, 900.0), (900.0, 900.0), 3000, 500),
        ]);
        let index = NeighborIndex::build(&corpus, &spec).unwrap();
        assert_eq!(index.len(), 3);
        // exact OD bucket
        let exact = index.neighbors(&spec, CellId::new(0, 0), CellId::new(4, 0));
        assert_eq!(exact.len(), 2);
        // off-by-one origin: expansion finds the same trips
        let expanded = index.neighbors(&spec, CellId::new(1, 1), CellId::new(4, 1));
        assert!(!expanded.is_empty());
        // far corner: nothing
        let none = index.neighbors(&spec, CellId::new(9, 9), CellId::new(0, 9));
        assert!(none.is_empty());
    }

    #[test]
    fn lr_recovers_exact_linear_data() {
        let samples: Vec<(f64, f64)> = (1..=20).map(|i| (i as f64 * 100.0, i as f64 * 100.0 * 100.0)).collect();
        let lr = LrBaseline::fit(&samples).unwrap();
        assert!((lr.slope - 100.0).abs() < 1e-9);
        assert!(lr.intercept.abs() < 1e-6);
        assert!((lr.predict(0.0) - lr.intercept).abs() < 1e-12);
    }

    #[test]
    fn lr_matches_hand_normal_equations() {
        // three points: (1, 2), (2, 2.5), (4, 5)
        // slope = sxy/sxx with means (7/3, 19/6)
        let lr = LrBaseline::fit(&[(1.0, 2.0), (2.0, 2.5), (4.0, 5.0)]).unwrap();
        let mean_x: f64 = 7.0 / 3.0;
        let mean_y: f64 = 19.0 / 6.0;
        let sxx = (1.0 - mean_x) * (1.0 - mean_x) + (2.0 - mean_x) * (2.0 - mean_x) + (4.0 - mean_x) * (4.0 - mean_x);
        let sxy = (1.0 - mean_x) * (2.0 - mean_y) + (2.0 - mean_x) * (2.5 - mean_y) + (4.0 - mean_x) * (5.0 - mean_y);
        assert!((lr.slope - sxy / sxx).abs() < 1e-12);
        assert!((lr.intercept - (mean_y - lr.slope * mean_x)).abs() < 1e-12);
    }

    #[test]
    fn lr_degenerate_design_rejected() {
        assert!(LrBaseline::fit(&[(5.0, 1.0), (5.0, 2.0), (5.0, 3.0)]).is_err());
    }

    #[test]
    fn avg_hand_example() {
        // speeds 10 and 20 m/s, L_test = 300 m -> 300 / 15 = 20 s
        assert_eq!(avg_combine(300.0, &[10.0, 20.0]), 20.0);
    }

    #[test]
    fn metrics_hand_values() {
        let m = compute_metrics(&[(100.0, 110.0)]).unwrap();
        assert_eq!(m.mae_s, 10.0);
        assert!((m.mape_pct - 10.0).abs() < 1e-12);
        assert_eq!(m.sr_pct, 100.0); // boundary inclusive

        let m = compute_metrics(&[(100.0, 100.0)]).unwrap();
        assert_eq!((m.mae_s, m.mape_pct, m.sr_pct), (0.0, 0.0, 100.0));

        let m = compute_metrics(&[(100.0, 90.0), (200.0, 260.0)]).unwrap();
        assert_eq!(m.mae_s, 35.0);
        assert!((m.mape_pct - 20.0).abs() < 1e-12);
        assert_eq!(m.sr_pct, 50.0);
    }

    #[test]
    fn metrics_empty_set_is_an_error() {
        assert!(compute_metrics(&[]).is_err());
    }

    #[test]
    fn per_hour_counts_partition_the_set() {
        let clock = ClockContext::default();
        let items: Vec<(i64, f64, f64)> = (0..50)
            .map(|i| (1_372_636_800 + i * 3600, 100.0, 105.0))
            .collect();
        let rows = per_hour_metrics(&items, &clock);
        let total: usize = rows.iter().map(|(_, m)| m.count).sum();
        assert_eq!(total, items.len());
    }

    proptest! {
        #[test]
        fn metrics_scale_invariance(c in 0.1f64..100.0) {
            let pairs = [(100.0, 91.0), (250.0, 300.0), (400.0, 399.0)];
            let scaled: Vec<(f64, f64)> = pairs.iter().map(|&(a, b)| (a * c, b * c)).collect();
            let m1 = compute_metrics(&pairs).unwrap();
            let m2 = compute_metrics(&scaled).unwrap();
            prop_assert!((m1.mape_pct - m2.mape_pct).abs() < 1e-9);
            prop_assert_eq!(m1.sr_pct, m2.sr_pct);
            prop_assert!((m2.mae_s - m1.mae_s * c).abs() < 1e-9 * m1.mae_s.max(1.0));
        }

        #[test]
        fn eq3_with_equal_lengths_is_arithmetic_mean(
            estimates in proptest::collection::vec(10.0f64..1000.0, 1..20),
            l in 100.0f64..5000.0,
        ) {
            let neighbors: Vec<(f64, f64)> = estimates.iter().map(|&t| (l, t)).collect();
            let combined = combine_neighbor_estimates(l, &neighbors);
            let mean = estimates.iter().sum::<f64>() / estimates.len() as f64;
            prop_assert!((combined - mean).abs() < 1e-9);
        }
    }
}
