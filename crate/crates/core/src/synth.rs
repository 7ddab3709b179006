//! Deterministic synthetic city: a vector layout plan (roads, blocks,
//! water, parks), a congestion field tied to built density and time of
//! day, and a trip sampler emitting labeled trajectories. This is the
//! ground-truth substrate for desk-scale end-to-end runs.

use crate::error::{Error, Result};
use crate::grid::{CellId, GridSpec};
use crate::trajectory::{Corpus, Footprint, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BinaryHeap;

/// Fraction of speed lost under full congestion.
pub const CONGESTION_SLOWDOWN: f64 = 0.7;

/// Two-peak rush profile (morning 7-9, evening 16-18), in [0, 1].
pub const RUSH_PROFILE: [f64; 24] = [
    0.1, 0.1, 0.1, 0.1, 0.1, 0.1, // 0-5
    0.3, // 6
    1.0, 1.0, // 7-8
    0.6, // 9
    0.3, 0.3, 0.3, 0.3, 0.3, 0.3, // 10-15
    1.0, 1.0, // 16-17
    0.6, // 18
    0.3, // 19
    0.1, 0.1, 0.1, 0.1, // 20-23
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoadClass {
    Local,
    Arterial,
}

impl RoadClass {
    pub fn base_speed_m_s(self) -> f64 {
        match self {
            RoadClass::Local => 6.0,
            RoadClass::Arterial => 12.0,
        }
    }
}

/// Built-environment description of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellFeatures {
    pub road: RoadClass,
    pub building_density: f64,
    pub water: bool,
    pub park: bool,
    pub landmark: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthCityConfig {
    pub arterial_spacing: u32,
    pub density_centers: usize,
    pub density_sigma_cells: f64,
    pub parks: usize,
}

impl Default for SynthCityConfig {
    fn default() -> Self {
        Self { arterial_spacing: 5, density_centers: 4, density_sigma_cells: 3.5, parks: 2 }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCity {
    pub seed: u64,
    pub spec: GridSpec,
    pub cells: Vec<CellFeatures>,
    /// Cells of the main connected component of the road graph, the
    /// only ones trips are sampled from.
    routable: Vec<bool>,
    od_weights: Vec<f64>,
}

impl SyntheticCity {
    pub fn features(&self, cell: CellId) -> &CellFeatures {
        &self.cells[self.spec.cell_index(cell)]
    }

    /// Cells with water are passable only where an arterial bridges
    /// them.
    pub fn passable(&self, cell: CellId) -> bool {
        let f = self.features(cell);
        !f.water || f.road == RoadClass::Arterial
    }

    /// Congestion level: built density scaled by the time-of-day rush
    /// profile. Monotone in density at fixed hour.
    pub fn congestion(&self, cell: CellId, hour: u32) -> f64 {
        self.features(cell).building_density * RUSH_PROFILE[hour as usize % 24]
    }

    /// Effective speed when traversing a cell at an hour.
    pub fn speed_m_s(&self, cell: CellId, hour: u32) -> f64 {
        self.features(cell).road.base_speed_m_s()
            * (1.0 - CONGESTION_SLOWDOWN * self.congestion(cell, hour))
    }
}

/// Deterministic city from a seed: arterial grid, density blobs around
/// landmark centers, a river with arterial bridges, rectangular parks.
pub fn generate_city(seed: u64, spec: &GridSpec, config: &SynthCityConfig) -> Result<SyntheticCity> {
    if spec.width > 40 || spec.height > 40 {
        return Err(Error::Config {
            key: "synth.cells".into(),
            reason: format!("synthetic cities are desk scale (<= 40x40), got {}x{}", spec.width, spec.height),
        });
    }
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let offset = config.arterial_spacing / 2;
    let arterial = |c: CellId| {
        c.col % config.arterial_spacing == offset || c.row % config.arterial_spacing == offset
    };

    // river: eastward random walk across the map
    let mut water = vec![false; spec.num_cells()];
    if w >= 8 && h >= 8 {
        let mut row = (h as f64 * rng.gen_range(0.3..0.7)) as i64;
        for col in 0..w {
            for dr in 0..2i64 {
                let r = row + dr;
                if r >= 0 && (r as u32) < h {
                    water[spec.cell_index(CellId::new(col, r as u32))] = true;
                }
            }
            row += rng.gen_range(-1..=1);
            row = row.clamp(1, h as i64 - 2);
        }
    }

    // parks: small rectangles away from the implicit map edges
    let mut park = vec![false; spec.num_cells()];
    for _ in 0..config.parks {
        if w < 6 || h < 6 {
            break;
        }
        let pw = rng.gen_range(2..=3u32);
        let ph = rng.gen_range(2..=3u32);
        let c0 = rng.gen_range(0..w - pw);
        let r0 = rng.gen_range(0..h - ph);
        for r in r0..r0 + ph {
            for c in c0..c0 + pw {
                park[spec.cell_index(CellId::new(c, r))] = true;
            }
        }
    }

    // density blobs around landmark centers
    let mut centers = Vec::new();
    for _ in 0..config.density_centers {
        centers.push((rng.gen_range(0.15..0.85) * w as f64, rng.gen_range(0.15..0.85) * h as f64));
    }
    let sigma2 = config.density_sigma_cells * config.density_sigma_cells;
    let mut cells = Vec::with_capacity(spec.num_cells());
    for idx in 0..spec.num_cells() {
        let cell = spec.cell_from_index(idx);
        let (cx, cy) = (cell.col as f64 + 0.5, cell.row as f64 + 0.5);
        let mut density: f64 = 0.0;
        for &(mx, my) in &centers {
            let d2 = (cx - mx).powi(2) + (cy - my).powi(2);
            density = density.max((-d2 / (2.0 * sigma2)).exp());
        }
        density += rng.gen_range(0.0..0.05);
        if water[idx] {
            density = 0.0;
        } else if park[idx] {
            density *= 0.2;
        }
        let landmark = centers
            .iter()
            .any(|&(mx, my)| (cx - mx).abs() < 1.0 && (cy - my).abs() < 1.0);
        cells.push(CellFeatures {
            road: if arterial(cell) { RoadClass::Arterial } else { RoadClass::Local },
            building_density: density.clamp(0.0, 1.0),
            water: water[idx],
            park: park[idx],
            landmark,
        });
    }

    let mut city = SyntheticCity {
        seed,
        spec: *spec,
        cells,
        routable: vec![false; spec.num_cells()],
        od_weights: vec![0.0; spec.num_cells()],
    };

    // largest connected component of passable cells under 8-neighbor moves
    let mut component = vec![u32::MAX; spec.num_cells()];
    let mut sizes = Vec::new();
    for start in 0..spec.num_cells() {
        if component[start] != u32::MAX || !city.passable(spec.cell_from_index(start)) {
            continue;
        }
        let label = sizes.len() as u32;
        let mut queue = vec![start];
        component[start] = label;
        let mut size = 0usize;
        while let Some(idx) = queue.pop() {
            size += 1;
            let cell = spec.cell_from_index(idx);
            for (nc, nr) in neighbors8(cell, w, h) {
                let n = CellId::new(nc, nr);
                let nidx = spec.cell_index(n);
                if component[nidx] == u32::MAX && city.passable(n) {
                    component[nidx] = label;
                    queue.push(nidx);
                }
            }
        }
        sizes.push(size);
    }
    let main = sizes
        .iter()
        .enumerate()
        .max_by_key(|(_, s)| **s)
        .map(|(i, _)| i as u32)
        .unwrap_or(0);
    for idx in 0..spec.num_cells() {
        city.routable[idx] = component[idx] == main;
        // cubic weight concentrates origins and destinations around the
        // density centers so historical neighbors exist for most queries
        city.od_weights[idx] = if city.routable[idx] {
            (0.02 + city.cells[idx].building_density).powi(3)
        } else {
            0.0
        };
    }
    Ok(city)
}

fn neighbors8(cell: CellId, w: u32, h: u32) -> impl Iterator<Item = (u32, u32)> {
    let (c, r) = (cell.col as i64, cell.row as i64);
    [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]
        .into_iter()
        .filter_map(move |(dc, dr)| {
            let (nc, nr) = (c + dc, r + dr);
            (nc >= 0 && nr >= 0 && (nc as u32) < w && (nr as u32) < h)
                .then_some((nc as u32, nr as u32))
        })
}

// ---------------------------------------------------------------------------
// Trip sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SyntheticTrip {
    pub origin: CellId,
    pub destination: CellId,
    pub departure: i64,
    pub footprints: Vec<Footprint>,
    pub true_travel_time_s: f64,
}

/// Footprint cadence, mirroring the Porto sampling interval.
pub const EMIT_INTERVAL_S: i64 = 15;

/// Base date all synthetic departures are offset from (a Monday
/// midnight, so minute-of-week indices start at zero).
pub const SYNTH_EPOCH: i64 = 1_372_636_800;

struct HeapEntry {
    cost: f64,
    node: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cost == other.cost && self.node == other.node
    }
}
impl Eq for HeapEntry {}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // min-heap on cost, ties broken by node index for determinism
        other
            .cost
            .partial_cmp(&self.cost)
            .unwrap()
            .then_with(|| other.node.cmp(&self.node))
    }
}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Free-flow shortest path over passable cells, 8-neighbor moves.
fn route(city: &SyntheticCity, from: CellId, to: CellId) -> Option<Vec<CellId>> {
    let spec = &city.spec;
    let n = spec.num_cells();
    let (w, h) = (spec.width, spec.height);
    let size = spec.cell_size_m;
    let diag = size * std::f64::consts::SQRT_2;

    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let start = spec.cell_index(from);
    let goal = spec.cell_index(to);
    dist[start] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(HeapEntry { cost: 0.0, node: start });
    while let Some(HeapEntry { cost, node }) = heap.pop() {
        if node == goal {
            break;
        }
        if cost > dist[node] {
            continue;
        }
        let cell = spec.cell_from_index(node);
        for (nc, nr) in neighbors8(cell, w, h) {
            let next = CellId::new(nc, nr);
            if !city.passable(next) {
                continue;
            }
            let nidx = spec.cell_index(next);
            let hop = if nc != cell.col && nr != cell.row { diag } else { size };
            let t = hop / city.features(next).road.base_speed_m_s();
            let cand = cost + t;
            if cand < dist[nidx] {
                dist[nidx] = cand;
                prev[nidx] = node;
                heap.push(HeapEntry { cost: cand, node: nidx });
            }
        }
    }
    if dist[goal].is_infinite() {
        return None;
    }
    let mut path = vec![to];
    let mut cur = goal;
    while cur != start {
        cur = prev[cur];
        path.push(spec.cell_from_index(cur));
    }
    path.reverse();
    Some(path)
}

fn draw_weighted(weights: &[f64], total: f64, rng: &mut impl Rng) -> usize {
    let mut x: f64 = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        x -= w;
        if x <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Sample labeled trips: density-biased OD pairs, free-flow routes,
/// congestion-adjusted traversal times, 15 s footprint cadence.
pub fn sample_trips(city: &SyntheticCity, n: usize, days: u32) -> Vec<SyntheticTrip> {
    let spec = &city.spec;
    let total_w: f64 = city.od_weights.iter().sum();
    let hour_weights: Vec<f64> = RUSH_PROFILE.iter().map(|r| 0.25 + r).collect();
    let hour_total: f64 = hour_weights.iter().sum();
    let size = spec.cell_size_m;
    let diag = size * std::f64::consts::SQRT_2;

    let mut trips = Vec::with_capacity(n);
    for i in 0..n {
        // independent per-trip stream from the master seed
        let mut rng = ChaCha8Rng::seed_from_u64(city.seed);
        rng.set_stream(1 + i as u64);

        let (path, origin, destination) = loop {
            let o = spec.cell_from_index(draw_weighted(&city.od_weights, total_w, &mut rng));
            let d = spec.cell_from_index(draw_weighted(&city.od_weights, total_w, &mut rng));
            if o == d {
                continue;
            }
            if let Some(p) = route(city, o, d) {
                break (p, o, d);
            }
        };

        let day = rng.gen_range(0..days) as i64;
        let hour = draw_weighted(&hour_weights, hour_total, &mut rng) as i64;
        let minute = rng.gen_range(0..60i64);
        let second = rng.gen_range(0..60i64);
        let departure = SYNTH_EPOCH + day * 86400 + hour * 3600 + minute * 60 + second;

        // walk the route with congestion-adjusted per-hop times
        let mut elapsed = 0.0f64;
        let mut vertex_times = vec![0.0f64];
        for wpair in path.windows(2) {
            let (a, b) = (wpair[0], wpair[1]);
            let hop = if a.col != b.col && a.row != b.row { diag } else { size };
            let hour_now = (((departure + elapsed as i64) % 86400).div_euclid(3600)) as u32;
            elapsed += hop / city.speed_m_s(b, hour_now);
            vertex_times.push(elapsed);
        }
        let true_travel_time_s = elapsed;

        // emit footprints along the center polyline at fixed cadence,
        // closing with the exact (rounded) arrival
        let centers: Vec<(f64, f64)> = path.iter().map(|&c| spec.cell_center_m(c)).collect();
        let mut footprints = Vec::new();
        let position_at = |t: f64| -> (f64, f64) {
            let mut seg = 0;
            while seg + 1 < vertex_times.len() - 1 && vertex_times[seg + 1] <= t {
                seg += 1;
            }
            let (t0, t1) = (vertex_times[seg], vertex_times[seg + 1]);
            let f = if t1 > t0 { ((t - t0) / (t1 - t0)).clamp(0.0, 1.0) } else { 0.0 };
            let (x0, y0) = centers[seg];
            let (x1, y1) = centers[seg + 1];
            (x0 + f * (x1 - x0), y0 + f * (y1 - y0))
        };
        let arrival_offset = true_travel_time_s.round() as i64;
        let mut k = 0i64;
        while k * EMIT_INTERVAL_S < arrival_offset {
            let t = k * EMIT_INTERVAL_S;
            let (x, y) = position_at(t as f64);
            let (lon, lat) = spec.projection().to_lonlat(x, y);
            footprints.push(Footprint { t: departure + t, lon, lat });
            k += 1;
        }
        let (lon, lat) = {
            let (x, y) = *centers.last().unwrap();
            spec.projection().to_lonlat(x, y)
        };
        footprints.push(Footprint { t: departure + arrival_offset, lon, lat });

        trips.push(SyntheticTrip {
            origin,
            destination,
            departure,
            footprints,
            true_travel_time_s,
        });
    }
    trips
}

/// Wrap sampled trips in the canonical corpus type, assigning vehicle
/// ids round-robin from a fixed pool.
pub fn trips_to_corpus(trips: &[SyntheticTrip], num_vehicles: usize) -> Corpus {
    let trajectories = trips
        .iter()
        .enumerate()
        .map(|(i, trip)| {
            Trajectory::new(format!("v{:04}", i % num_vehicles.max(1)), trip.footprints.clone())
                .expect("synthetic trips are well formed")
        })
        .collect();
    let mut corpus = Corpus::new(trajectories);
    corpus.sort_canonical();
    corpus
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_30() -> GridSpec {
        GridSpec { min_lon: 0.0, min_lat: 0.0, cell_size_m: 200.0, width: 30, height: 30, ref_lat: 0.0 }
    }

    fn city() -> SyntheticCity {
        generate_city(42, &spec_30(), &SynthCityConfig::default()).unwrap()
    }

    #[test]
    fn same_seed_identical_city() {
        let a = city();
        let b = city();
        assert_eq!(a.cells, b.cells);
    }

    #[test]
    fn density_in_unit_interval() {
        let c = city();
        assert!(c.cells.iter().all(|f| (0.0..=1.0).contains(&f.building_density)));
    }

    #[test]
    fn arterial_lines_follow_the_plan() {
        let c = city();
        let spacing = SynthCityConfig::default().arterial_spacing;
        let offset = spacing / 2;
        for idx in 0..c.spec.num_cells() {
            let cell = c.spec.cell_from_index(idx);
            let expected = cell.col % spacing == offset || cell.row % spacing == offset;
            assert_eq!(c.cells[idx].road == RoadClass::Arterial, expected);
        }
    }

    #[test]
    fn congestion_bounds_and_rush_ratio() {
        let c = city();
        for idx in [0usize, 45, 450, 899] {
            let cell = c.spec.cell_from_index(idx);
            for hour in 0..24 {
                let cong = c.congestion(cell, hour);
                assert!((0.0..=1.0).contains(&cong));
            }
        }
        // speed formula arithmetic: c=1 vs c=0 is a 1/(1-0.7) slowdown
        let v_free = 10.0 * (1.0 - CONGESTION_SLOWDOWN * 0.0);
        let v_rush = 10.0 * (1.0 - CONGESTION_SLOWDOWN * 1.0);
        assert!((v_free / v_rush - 1.0 / (1.0 - 0.7)).abs() < 1e-12);
    }

    #[test]
    fn trip_through_free_cells_at_base_speed() {
        // zero congestion: traversing 1 km of local road at 6 m/s
        let c = city();
        let hops = 1000.0 / c.spec.cell_size_m;
        let t = (0..hops as usize)
            .map(|_| c.spec.cell_size_m / RoadClass::Local.base_speed_m_s())
            .sum::<f64>();
        assert!((t - 1000.0 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn sampled_corpus_is_reproducible() {
        let c = city();
        let t1 = sample_trips(&c, 20, 3);
        let t2 = sample_trips(&c, 20, 3);
        assert_eq!(t1.len(), t2.len());
        for (a, b) in t1.iter().zip(&t2) {
            assert_eq!(a.footprints, b.footprints);
            assert_eq!(a.true_travel_time_s, b.true_travel_time_s);
        }
    }

    #[test]
    fn labels_consistent_with_footprints() {
        let c = city();
        for trip in sample_trips(&c, 50, 5) {
            let span = (trip.footprints.last().unwrap().t - trip.footprints[0].t) as f64;
            assert!(
                (span - trip.true_travel_time_s).abs() <= 1.0,
                "footprint span {span} vs true {})",
                trip.true_travel_time_s
            );
        }
    }

    #[test]
    fn rush_hour_slower_in_dense_cells() {
        let c = city();
        // observed mean speeds at rush (hour 8) split by density
        let mut dense = Vec::new();
        let mut sparse = Vec::new();
        for idx in 0..c.spec.num_cells() {
            let cell = c.spec.cell_from_index(idx);
            if !c.passable(cell) {
                continue;
            }
            let v = c.speed_m_s(cell, 8);
            let f = &c.cells[idx];
            if f.building_density > 0.6 {
                dense.push(v / f.road.base_speed_m_s());
            } else if f.building_density < 0.2 {
                sparse.push(v / f.road.base_speed_m_s());
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(!dense.is_empty() && !sparse.is_empty());
        assert!(mean(&dense) < mean(&sparse));
    }

    #[test]
    fn oversized_city_rejected() {
        let spec = GridSpec { min_lon: 0.0, min_lat: 0.0, cell_size_m: 200.0, width: 50, height: 50, ref_lat: 0.0 };
        assert!(generate_city(1, &spec, &SynthCityConfig::default()).is_err());
    }
}
