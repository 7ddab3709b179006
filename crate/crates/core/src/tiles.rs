//! Morphological layout images per grid cell: slippy-map tile
//! download, stitching and caching, a deterministic synthetic
//! renderer, and the consolidated raster archive used for training.

use crate::error::{Error, Result};
use crate::grid::{CellId, GridSpec};
use crate::synth::{CellFeatures, RoadClass, SyntheticCity};
use image::{imageops, ImageReader, RgbImage};
use std::collections::HashMap;
use std::io::{BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

/// Layout raster dimensions (channels x height x width).
pub const IMG_CHANNELS: usize = 3;
pub const IMG_HEIGHT: usize = 436;
pub const IMG_WIDTH: usize = 373;
pub const IMG_BYTES: usize = IMG_CHANNELS * IMG_HEIGHT * IMG_WIDTH;

/// One cell's layout image: interleaved RGB rows, exactly
/// 436 x 373 pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutImage {
    pub cell: CellId,
    pub rgb: Vec<u8>,
}

impl LayoutImage {
    pub fn new(cell: CellId, rgb: Vec<u8>) -> Result<Self> {
        if rgb.len() != IMG_BYTES {
            return Err(Error::Shape {
                expected: format!("{IMG_CHANNELS}x{IMG_HEIGHT}x{IMG_WIDTH} ({IMG_BYTES} bytes)"),
                actual: format!("{} bytes", rgb.len()),
            });
        }
        Ok(Self { cell, rgb })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * IMG_WIDTH + x) * 3;
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(IMG_WIDTH as u32, IMG_HEIGHT as u32, self.rgb.clone())
            .expect("buffer length checked at construction")
    }

    pub fn from_rgb_image(cell: CellId, img: &RgbImage) -> Result<Self> {
        if img.width() as usize != IMG_WIDTH || img.height() as usize != IMG_HEIGHT {
            return Err(Error::Shape {
                expected: format!("{IMG_WIDTH}x{IMG_HEIGHT}"),
                actual: format!("{}x{}", img.width(), img.height()),
            });
        }
        Ok(Self { cell, rgb: img.as_raw().clone() })
    }
}

/// Geographic bounding box of a cell; adjacent cells share edge
/// coordinates bit-exactly.
pub fn cell_bbox(spec: &GridSpec, cell: CellId) -> (f64, f64, f64, f64) {
    (
        spec.lon_edge(cell.col),
        spec.lat_edge(cell.row),
        spec.lon_edge(cell.col + 1),
        spec.lat_edge(cell.row + 1),
    )
}

// ---------------------------------------------------------------------------
// Synthetic rendering
// ---------------------------------------------------------------------------

/// The fixed 8-color palette of the synthetic renderer. Pixel-level
/// tests key on these exact values.
pub mod palette {
    pub const BACKGROUND: [u8; 3] = [236, 233, 225];
    pub const ROAD_LOCAL: [u8; 3] = [255, 255, 255];
    pub const ROAD_ARTERIAL: [u8; 3] = [252, 214, 108];
    pub const WATER: [u8; 3] = [170, 211, 223];
    pub const PARK: [u8; 3] = [200, 250, 204];
    pub const BLOCK_LOW: [u8; 3] = [216, 208, 200];
    pub const BLOCK_MID: [u8; 3] = [180, 168, 160];
    pub const BLOCK_HIGH: [u8; 3] = [120, 110, 104];
}

fn fill_rect(buf: &mut [u8], x0: usize, y0: usize, x1: usize, y1: usize, color: [u8; 3]) {
    for y in y0..y1.min(IMG_HEIGHT) {
        for x in x0..x1.min(IMG_WIDTH) {
            let o = (y * IMG_WIDTH + x) * 3;
            buf[o..o + 3].copy_from_slice(&color);
        }
    }
}

const BLOCK_COLS: usize = 5;
const BLOCK_ROWS: usize = 6;
const STREET_PX: usize = 10;
const ARTERIAL_HALF_PX: usize = 20;

/// Render one cell's features into the fixed-size raster. Pure
/// function of (features, salt): identical inputs yield byte-identical
/// images. The salt varies the block pattern between cells.
pub fn render_cell_features(f: &CellFeatures, salt: u64) -> Vec<u8> {
    let mut buf = vec![0u8; IMG_BYTES];
    fill_rect(&mut buf, 0, 0, IMG_WIDTH, IMG_HEIGHT, palette::BACKGROUND);

    if f.park {
        fill_rect(&mut buf, 0, 0, IMG_WIDTH, IMG_HEIGHT, palette::PARK);
    }
    if f.water {
        fill_rect(&mut buf, 0, 0, IMG_WIDTH, IMG_HEIGHT, palette::WATER);
    }

    // building blocks separated by local streets; block count tracks
    // density, block color tracks its level
    let n_blocks = (f.building_density * (BLOCK_COLS * BLOCK_ROWS) as f64).round() as usize;
    if !f.water && n_blocks > 0 {
        let color = if f.building_density < 1.0 / 3.0 {
            palette::BLOCK_LOW
        } else if f.building_density < 2.0 / 3.0 {
            palette::BLOCK_MID
        } else {
            palette::BLOCK_HIGH
        };
        // deterministic per-cell permutation of block slots
        let mut order: Vec<usize> = (0..BLOCK_COLS * BLOCK_ROWS).collect();
        let mut state = salt.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        for i in (1..order.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (state >> 33) as usize % (i + 1));
        }
        let bw = (IMG_WIDTH - (BLOCK_COLS + 1) * STREET_PX) / BLOCK_COLS;
        let bh = (IMG_HEIGHT - (BLOCK_ROWS + 1) * STREET_PX) / BLOCK_ROWS;
        // street grid behind the blocks
        fill_rect(&mut buf, 0, 0, IMG_WIDTH, IMG_HEIGHT, palette::ROAD_LOCAL);
        for slot in 0..BLOCK_COLS * BLOCK_ROWS {
            let (bc, br) = (slot % BLOCK_COLS, slot / BLOCK_COLS);
            let x0 = STREET_PX + bc * (bw + STREET_PX);
            let y0 = STREET_PX + br * (bh + STREET_PX);
            let filled = order.iter().position(|&s| s == slot).unwrap() < n_blocks;
            let c = if filled {
                color
            } else if f.park {
                palette::PARK
            } else {
                palette::BACKGROUND
            };
            fill_rect(&mut buf, x0, y0, x0 + bw, y0 + bh, c);
        }
    }

    if f.road == RoadClass::Arterial {
        // band through the center; drawn over water as a bridge
        let cx = IMG_WIDTH / 2;
        fill_rect(&mut buf, cx - ARTERIAL_HALF_PX, 0, cx + ARTERIAL_HALF_PX, IMG_HEIGHT, palette::ROAD_ARTERIAL);
        let cy = IMG_HEIGHT / 2;
        fill_rect(&mut buf, 0, cy - ARTERIAL_HALF_PX, IMG_WIDTH, cy + ARTERIAL_HALF_PX, palette::ROAD_ARTERIAL);
    }

    if f.landmark {
        let (cx, cy) = (IMG_WIDTH / 2, IMG_HEIGHT / 2);
        fill_rect(&mut buf, cx - 30, cy - 30, cx + 30, cy + 30, palette::BLOCK_HIGH);
    }

    buf
}

/// Deterministic layout image for a synthetic city cell.
pub fn render_synthetic_image(city: &SyntheticCity, cell: CellId) -> Result<LayoutImage> {
    if !city.spec.contains(cell) {
        return Err(Error::CellOutOfBounds { col: cell.col as i64, row: cell.row as i64 });
    }
    let salt = city.seed ^ ((city.spec.cell_index(cell) as u64) << 17);
    LayoutImage::new(cell, render_cell_features(city.features(cell), salt))
}

// ---------------------------------------------------------------------------
// Rate limiting
// ---------------------------------------------------------------------------

/// Reservation-based limiter enforcing a minimum spacing of
/// `1/rate` seconds between requests, so any half-open window of
/// length T holds at most `rate * T` requests.
#[derive(Debug)]
pub struct RateLimiter {
    interval_s: f64,
    next_slot_s: f64,
}

impl RateLimiter {
    pub fn new(rate_per_s: f64) -> Self {
        assert!(rate_per_s > 0.0, "rate limit must be positive");
        Self { interval_s: 1.0 / rate_per_s, next_slot_s: 0.0 }
    }

    /// Reserve the next slot; returns how long the caller must wait
    /// from `now_s` before issuing the request.
    pub fn reserve(&mut self, now_s: f64) -> f64 {
        let at = self.next_slot_s.max(now_s);
        self.next_slot_s = at + self.interval_s;
        at - now_s
    }
}

// ---------------------------------------------------------------------------
// Slippy map math
// ---------------------------------------------------------------------------

const TILE_PX: u32 = 256;

/// Global Web Mercator pixel coordinates at a zoom level.
pub fn lonlat_to_global_px(lon: f64, lat: f64, zoom: u32) -> (f64, f64) {
    let n = (1u64 << zoom) as f64 * TILE_PX as f64;
    let x = (lon + 180.0) / 360.0 * n;
    let lat_r = lat.to_radians();
    let y = (1.0 - (lat_r.tan() + 1.0 / lat_r.cos()).ln() / std::f64::consts::PI) / 2.0 * n;
    (x, y)
}

/// XYZ tile source with local cache.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileSource {
    /// URL with `{z}`, `{x}`, `{y}` placeholders.
    pub url_template: String,
    pub zoom: u32,
    pub cache_dir: PathBuf,
    /// Maximum requests per second against the tile server.
    pub rate_limit: f64,
    pub user_agent: String,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

fn default_concurrency() -> usize {
    4
}

pub struct TileFetcher {
    source: TileSource,
    client: reqwest::blocking::Client,
    limiter: Mutex<RateLimiter>,
    started: std::time::Instant,
}

impl TileFetcher {
    pub fn new(source: TileSource) -> Result<Self> {
        if source.rate_limit <= 0.0 {
            return Err(Error::Config {
                key: "tiles.rate_limit".into(),
                reason: "must be positive".into(),
            });
        }
        let client = reqwest::blocking::Client::builder()
            .user_agent(source.user_agent.clone())
            .timeout(std::time::Duration::from_secs(30))
            .build()
            .map_err(|e| Error::Config { key: "tiles".into(), reason: e.to_string() })?;
        Ok(Self {
            limiter: Mutex::new(RateLimiter::new(source.rate_limit)),
            source,
            client,
            started: std::time::Instant::now(),
        })
    }

    pub fn source(&self) -> &TileSource {
        &self.source
    }

    fn tile_url(&self, z: u32, x: u32, y: u32) -> String {
        self.source
            .url_template
            .replace("{z}", &z.to_string())
            .replace("{x}", &x.to_string())
            .replace("{y}", &y.to_string())
    }

    pub fn tile_cache_path(&self, z: u32, x: u32, y: u32) -> PathBuf {
        self.source.cache_dir.join(z.to_string()).join(x.to_string()).join(format!("{y}.png"))
    }

    fn wait_for_slot(&self) {
        let now = self.started.elapsed().as_secs_f64();
        let wait = self.limiter.lock().unwrap().reserve(now);
        if wait > 0.0 {
            std::thread::sleep(std::time::Duration::from_secs_f64(wait));
        }
    }

    fn http_get(&self, z: u32, x: u32, y: u32) -> Result<Vec<u8>> {
        let url = self.tile_url(z, x, y);
        let mut last_err = String::new();
        for attempt in 0..3 {
            if attempt > 0 {
                std::thread::sleep(std::time::Duration::from_millis(100 << attempt));
            }
            self.wait_for_slot();
            match self.client.get(&url).send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return Ok(resp.bytes().map_err(|e| Error::TileFetch {
                            z,
                            x,
                            y,
                            reason: e.to_string(),
                        })?.to_vec());
                    }
                    last_err = format!("HTTP {status}");
                    if status.is_client_error() {
                        break; // 4xx is permanent
                    }
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::TileFetch { z, x, y, reason: last_err })
    }

    /// Tile image, cache-first with atomic cache writes; corrupt cache
    /// entries are dropped and refetched.
    pub fn get_tile(&self, z: u32, x: u32, y: u32) -> Result<RgbImage> {
        let path = self.tile_cache_path(z, x, y);
        if path.exists() {
            match decode_png(&path) {
                Ok(img) => return Ok(img),
                Err(e) => {
                    log::warn!("invalid cached tile {}: {e}; refetching", path.display());
                    let _ = std::fs::remove_file(&path);
                }
            }
        }
        let bytes = self.http_get(z, x, y)?;
        let img = image::load_from_memory(&bytes)
            .map_err(|e| Error::TileFetch { z, x, y, reason: format!("bad image payload: {e}") })?
            .to_rgb8();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("png.tmp");
        {
            let mut out = std::fs::File::create(&tmp)?;
            out.write_all(&bytes)?;
            out.sync_all()?;
        }
        std::fs::rename(&tmp, &path)?;
        Ok(img)
    }

    /// Prefetch a list of tiles with a bounded worker pool sharing the
    /// rate limiter.
    pub fn prefetch(&self, tiles: &[(u32, u32, u32)]) -> Result<usize> {
        let queue = Mutex::new(tiles.to_vec());
        let fetched = Mutex::new(0usize);
        let first_error: Mutex<Option<Error>> = Mutex::new(None);
        let workers = self.source.concurrency.max(1).min(tiles.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let job = queue.lock().unwrap().pop();
                    let Some((z, x, y)) = job else { break };
                    match self.get_tile(z, x, y) {
                        Ok(_) => *fetched.lock().unwrap() += 1,
                        Err(e) => {
                            let mut slot = first_error.lock().unwrap();
                            if slot.is_none() {
                                *slot = Some(e);
                            }
                        }
                    }
                });
            }
        });
        if let Some(e) = first_error.into_inner().unwrap() {
            return Err(e);
        }
        Ok(fetched.into_inner().unwrap())
    }
}

fn decode_png(path: &Path) -> Result<RgbImage> {
    Ok(ImageReader::open(path)?.decode()?.to_rgb8())
}

fn cell_cache_path(cache_dir: &Path, cell: CellId) -> PathBuf {
    cache_dir.join("cells").join(format!("{}_{}.png", cell.col, cell.row))
}

/// Fetch, stitch, crop and resample the tiles covering one cell into
/// its layout image. Cache-first at both the tile and the cell level.
pub fn fetch_cell_image(fetcher: &TileFetcher, spec: &GridSpec, cell: CellId) -> Result<LayoutImage> {
    if !spec.contains(cell) {
        return Err(Error::CellOutOfBounds { col: cell.col as i64, row: cell.row as i64 });
    }
    let cell_path = cell_cache_path(&fetcher.source.cache_dir, cell);
    if cell_path.exists() {
        match decode_png(&cell_path) {
            Ok(img) => match LayoutImage::from_rgb_image(cell, &img) {
                Ok(layout) => return Ok(layout),
                Err(e) => {
                    log::warn!("cached cell image {} has wrong shape: {e}", cell_path.display());
                    let _ = std::fs::remove_file(&cell_path);
                }
            },
            Err(e) => {
                log::warn!("invalid cached cell image {}: {e}", cell_path.display());
                let _ = std::fs::remove_file(&cell_path);
            }
        }
    }

    let zoom = fetcher.source.zoom;
    let (min_lon, min_lat, max_lon, max_lat) = cell_bbox(spec, cell);
    let (x0, y0) = lonlat_to_global_px(min_lon, max_lat, zoom); // NW corner
    let (x1, y1) = lonlat_to_global_px(max_lon, min_lat, zoom); // SE corner

    let tx0 = (x0 / TILE_PX as f64).floor() as u32;
    let ty0 = (y0 / TILE_PX as f64).floor() as u32;
    let tx1 = ((x1 - 1e-9) / TILE_PX as f64).floor() as u32;
    let ty1 = ((y1 - 1e-9) / TILE_PX as f64).floor() as u32;

    let cols = tx1 - tx0 + 1;
    let rows = ty1 - ty0 + 1;
    let mut canvas = RgbImage::new(cols * TILE_PX, rows * TILE_PX);
    for ty in ty0..=ty1 {
        for tx in tx0..=tx1 {
            let tile = fetcher.get_tile(zoom, tx, ty).map_err(|e| Error::CellFetch {
                col: cell.col,
                row: cell.row,
                reason: e.to_string(),
            })?;
            imageops::replace(
                &mut canvas,
                &tile,
                ((tx - tx0) * TILE_PX) as i64,
                ((ty - ty0) * TILE_PX) as i64,
            );
        }
    }

    let left = (x0 - (tx0 * TILE_PX) as f64).floor().max(0.0) as u32;
    let top = (y0 - (ty0 * TILE_PX) as f64).floor().max(0.0) as u32;
    let width = ((x1 - x0).round() as u32).max(1).min(canvas.width() - left);
    let height = ((y1 - y0).round() as u32).max(1).min(canvas.height() - top);
    let cropped = imageops::crop_imm(&canvas, left, top, width, height).to_image();
    let resized = imageops::resize(
        &cropped,
        IMG_WIDTH as u32,
        IMG_HEIGHT as u32,
        imageops::FilterType::Triangle,
    );

    if let Some(parent) = cell_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = cell_path.with_extension("png.tmp");
    resized.save_with_format(&tmp, image::ImageFormat::Png)?;
    std::fs::rename(&tmp, &cell_path)?;
    LayoutImage::from_rgb_image(cell, &resized)
}

// ---------------------------------------------------------------------------
// Consolidated raster archive
// ---------------------------------------------------------------------------

const ARCHIVE_MAGIC: &[u8; 8] = b"I2TIMGA\x01";

/// Write the consolidated archive: header (magic, version, hash,
/// image width/height, count), cell index, then fixed-stride rasters.
pub fn write_image_archive(path: &Path, images: &[LayoutImage], config_hash: &str) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(ARCHIVE_MAGIC)?;
    let hash = config_hash.as_bytes();
    out.write_all(&(hash.len() as u32).to_le_bytes())?;
    out.write_all(hash)?;
    out.write_all(&(IMG_WIDTH as u32).to_le_bytes())?;
    out.write_all(&(IMG_HEIGHT as u32).to_le_bytes())?;
    out.write_all(&(images.len() as u32).to_le_bytes())?;
    for img in images {
        out.write_all(&img.cell.col.to_le_bytes())?;
        out.write_all(&img.cell.row.to_le_bytes())?;
    }
    for img in images {
        out.write_all(&img.rgb)?;
    }
    Ok(())
}

/// Random-access reader over the archive.
pub struct ImageArchive {
    file: std::fs::File,
    index: HashMap<CellId, u64>,
    rasters_at: u64,
    pub config_hash: String,
    pub cells: Vec<CellId>,
}

impl ImageArchive {
    pub fn open(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
        let mut magic = [0u8; 8];
        reader.read_exact(&mut magic)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(bad("not an image archive"));
        }
        let mut len4 = [0u8; 4];
        reader.read_exact(&mut len4)?;
        let mut hash = vec![0u8; u32::from_le_bytes(len4) as usize];
        reader.read_exact(&mut hash)?;
        let config_hash = String::from_utf8(hash).map_err(|_| bad("bad hash encoding"))?;
        let mut dims = [0u8; 12];
        reader.read_exact(&mut dims)?;
        let width = u32::from_le_bytes(dims[0..4].try_into().unwrap());
        let height = u32::from_le_bytes(dims[4..8].try_into().unwrap());
        if width as usize != IMG_WIDTH || height as usize != IMG_HEIGHT {
            return Err(bad("unexpected raster dimensions"));
        }
        let count = u32::from_le_bytes(dims[8..12].try_into().unwrap()) as usize;
        let mut index = HashMap::with_capacity(count);
        let mut cells = Vec::with_capacity(count);
        let mut cell8 = [0u8; 8];
        for i in 0..count {
            reader.read_exact(&mut cell8)?;
            let cell = CellId::new(
                u32::from_le_bytes(cell8[0..4].try_into().unwrap()),
                u32::from_le_bytes(cell8[4..8].try_into().unwrap()),
            );
            index.insert(cell, i as u64);
            cells.push(cell);
        }
        let rasters_at = reader.stream_position()?;
        Ok(Self { file: reader.into_inner(), index, rasters_at, config_hash, cells })
    }

    pub fn contains(&self, cell: CellId) -> bool {
        self.index.contains_key(&cell)
    }

    pub fn get(&mut self, cell: CellId) -> Result<LayoutImage> {
        let slot = *self.index.get(&cell).ok_or(Error::UnknownCell(cell))?;
        self.file.seek(SeekFrom::Start(self.rasters_at + slot * IMG_BYTES as u64))?;
        let mut rgb = vec![0u8; IMG_BYTES];
        self.file.read_exact(&mut rgb)?;
        LayoutImage::new(cell, rgb)
    }
}
