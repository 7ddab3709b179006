//! Grid proximity network and LINE node embeddings capturing spatial
//! correlation between grids.

use crate::error::{Error, Result};
use crate::grid::{CellId, GridSpec};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufReader, Read, Write};
use std::path::Path;

/// Grids within this many Manhattan hops are connected.
pub const MAX_HOPS: u32 = 5;

/// Undirected weighted proximity graph over all grid cells; edge
/// weight is the reciprocal Manhattan distance.
#[derive(Debug, Clone)]
pub struct GridGraph {
    pub num_nodes: usize,
    /// Each unordered pair stored once, `a < b`.
    pub edges: Vec<(u32, u32, f64)>,
}

/// Connect every cell pair with Manhattan distance 1..=5 at weight
/// 1/d.
pub fn build_graph(spec: &GridSpec) -> GridGraph {
    let (w, h) = (spec.width as i64, spec.height as i64);
    let hops = MAX_HOPS as i64;
    let mut edges = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let a = (row * w + col) as u32;
            // enumerate each unordered pair once: strictly above, or
            // same row to the right
            for dy in 0..=hops {
                let lo = if dy == 0 { 1 } else { -hops + dy };
                for dx in lo..=(hops - dy) {
                    let (nc, nr) = (col + dx, row + dy);
                    if nc < 0 || nc >= w || nr >= h {
                        continue;
                    }
                    let d = dx.abs() + dy;
                    debug_assert!((1..=hops).contains(&d));
                    let b = (nr * w + nc) as u32;
                    edges.push((a, b, 1.0 / d as f64));
                }
            }
        }
    }
    GridGraph { num_nodes: (w * h) as usize, edges }
}

impl GridGraph {
    pub fn degree(&self, node: u32) -> usize {
        self.edges.iter().filter(|(a, b, _)| *a == node || *b == node).count()
    }
}

/// Learned node vectors; `contexts` is present when second-order
/// training was used.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbedding {
    pub vectors: Array2<f64>,
    pub contexts: Option<Array2<f64>>,
}

impl NodeEmbedding {
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        let va = self.vectors.row(a);
        let vb = self.vectors.row(b);
        let dot: f64 = va.dot(&vb);
        let na = va.dot(&va).sqrt();
        let nb = vb.dot(&vb).sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LineConfig {
    pub dim: usize,
    /// One epoch draws as many samples as there are directed edges.
    pub epochs: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    pub second_order: bool,
    pub seed: u64,
}

impl Default for LineConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            epochs: 100,
            negatives: 5,
            learning_rate: 0.025,
            second_order: true,
            seed: 7,
        }
    }
}

/// Per-epoch mean objective (negative log likelihood of the sampled
/// edge and its negatives).
pub struct LineHistory {
    pub epoch_loss: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Cumulative-weight sampler over an arbitrary weight list.
struct CumSampler {
    cumulative: Vec<f64>,
    total: f64,
}

impl CumSampler {
    fn new(weights: impl Iterator<Item = f64>) -> Self {
        let mut cumulative = Vec::new();
        let mut total = 0.0;
        for w in weights {
            total += w;
            cumulative.push(total);
        }
        Self { cumulative, total }
    }

    fn draw(&self, rng: &mut impl Rng) -> usize {
        let x: f64 = rng.gen_range(0.0..self.total);
        match self.cumulative.binary_search_by(|c| c.partial_cmp(&x).unwrap()) {
            Ok(i) => i + 1,
            Err(i) => i,
        }
        .min(self.cumulative.len() - 1)
    }
}

/// Train LINE embeddings by weighted edge sampling with negative
/// sampling. Deterministic for a fixed seed (single threaded).
pub fn train_line(
    graph: &GridGraph,
    config: &LineConfig,
) -> Result<(NodeEmbedding, LineHistory)> {
    let n = graph.num_nodes;
    let dim = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // init: small uniform vertex vectors, zero contexts
    let mut vectors = Array2::zeros((n, dim));
    let span = 0.5 / dim as f64;
    for v in vectors.iter_mut() {
        *v = rng.gen_range(-span..span);
    }
    let mut contexts = Array2::zeros((n, dim));
    if !config.second_order {
        for v in contexts.iter_mut() {
            *v = rng.gen_range(-span..span);
        }
    }

    if graph.edges.is_empty() || config.epochs == 0 {
        let contexts = config.second_order.then_some(contexts);
        return Ok((NodeEmbedding { vectors, contexts }, LineHistory { epoch_loss: vec![] }));
    }

    // directed edge list: both directions of every undirected edge
    let mut directed: Vec<(u32, u32, f64)> = Vec::with_capacity(graph.edges.len() * 2);
    for &(a, b, w) in &graph.edges {
        directed.push((a, b, w));
        directed.push((b, a, w));
    }
    let edge_sampler = CumSampler::new(directed.iter().map(|e| e.2));

    // noise distribution over nodes: weighted degree ^ 0.75
    let mut wdeg = vec![0.0f64; n];
    for &(a, b, w) in &graph.edges {
        wdeg[a as usize] += w;
        wdeg[b as usize] += w;
    }
    let noise = CumSampler::new(wdeg.iter().map(|d| d.powf(0.75)));

    let samples_per_epoch = directed.len();
    let total_samples = (samples_per_epoch * config.epochs) as f64;
    let mut seen = 0usize;
    let mut history = Vec::with_capacity(config.epochs);
    let mut grad_u = vec![0.0f64; dim];

    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..samples_per_epoch {
            // linear learning rate decay, floored
            let progress = seen as f64 / total_samples;
            let lr = config.learning_rate * (1.0 - progress).max(1e-4);
            seen += 1;

            let (u, v, _) = directed[edge_sampler.draw(&mut rng)];
            let u = u as usize;
            grad_u.iter_mut().for_each(|g| *g = 0.0);
            let u_vec: Vec<f64> = vectors.row(u).to_vec();

            for k in 0..=config.negatives {
                let (target, label) = if k == 0 {
                    (v as usize, 1.0)
                } else {
                    let mut t = noise.draw(&mut rng);
                    let mut tries = 0;
                    while (t == u || t == v as usize) && tries < 10 {
                        t = noise.draw(&mut rng);
                        tries += 1;
                    }
                    (t, 0.0)
                };
                let mut tgt_row = if config.second_order {
                    contexts.row_mut(target)
                } else {
                    vectors.row_mut(target)
                };
                let dot: f64 = tgt_row.iter().zip(&u_vec).map(|(a, b)| a * b).sum();
                let f = sigmoid(dot);
                loss_sum -= if label == 1.0 { f.max(1e-15).ln() } else { (1.0 - f).max(1e-15).ln() };
                let g = (label - f) * lr;
                for ((gu, t), uv) in grad_u.iter_mut().zip(tgt_row.iter_mut()).zip(&u_vec) {
                    *gu += g * *t;
                    *t += g * uv;
                }
            }
            let mut u_row = vectors.row_mut(u);
            for (uv, g) in u_row.iter_mut().zip(&grad_u) {
                *uv += *g;
            }
        }
        let mean = loss_sum / samples_per_epoch as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite { context: format!("LINE loss at epoch {epoch}") });
        }
        history.push(mean);
    }

    let contexts = config.second_order.then_some(contexts);
    Ok((NodeEmbedding { vectors, contexts }, LineHistory { epoch_loss: history }))
}

// ---------------------------------------------------------------------------
// Embedding persistence
// ---------------------------------------------------------------------------

const EMB_MAGIC: &[u8; 8] = b"I2TLINE\x01";

/// Per-node records carry the cell address so the file stands alone.
pub fn write_embedding(
    path: &Path,
    spec: &GridSpec,
    emb: &NodeEmbedding,
    config_hash: &str,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(EMB_MAGIC)?;
    let hash = config_hash.as_bytes();
    out.write_all(&(hash.len() as u32).to_le_bytes())?;
    out.write_all(hash)?;
    out.write_all(&(emb.vectors.nrows() as u32).to_le_bytes())?;
    out.write_all(&(emb.dim() as u32).to_le_bytes())?;
    for i in 0..emb.vectors.nrows() {
        let cell = spec.cell_from_index(i);
        out.write_all(&cell.col.to_le_bytes())?;
        out.write_all(&cell.row.to_le_bytes())?;
        for v in emb.vectors.row(i) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_embedding(path: &Path, spec: &GridSpec) -> Result<(NodeEmbedding, String)> {
    let mut input = BufReader::new(std::fs::File::open(path)?);
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != EMB_MAGIC {
        return Err(bad("not an embedding file"));
    }
    let mut len4 = [0u8; 4];
    input.read_exact(&mut len4)?;
    let mut hash = vec![0u8; u32::from_le_bytes(len4) as usize];
    input.read_exact(&mut hash)?;
    let hash = String::from_utf8(hash).map_err(|_| bad("bad hash encoding"))?;
    input.read_exact(&mut len4)?;
    let count = u32::from_le_bytes(len4) as usize;
    input.read_exact(&mut len4)?;
    let dim = u32::from_le_bytes(len4) as usize;
    if count != spec.num_cells() {
        return Err(bad("node count does not match the grid"));
    }
    let mut vectors = Array2::zeros((count, dim));
    let mut buf8 = [0u8; 8];
    for _ in 0..count {
        let mut col4 = [0u8; 4];
        input.read_exact(&mut col4)?;
        let col = u32::from_le_bytes(col4);
        input.read_exact(&mut col4)?;
        let row = u32::from_le_bytes(col4);
        let cell = CellId::new(col, row);
        if !spec.contains(cell) {
            return Err(bad("cell outside the grid"));
        }
        let idx = spec.cell_index(cell);
        for d in 0..dim {
            input.read_exact(&mut buf8)?;
            vectors[(idx, d)] = f64::from_le_bytes(buf8);
        }
    }
    Ok((NodeEmbedding { vectors, contexts: None }, hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lattice(width: u32, height: u32) -> GridSpec {
        GridSpec { min_lon: 0.0, min_lat: 0.0, cell_size_m: 200.0, width, height, ref_lat: 0.0 }
    }

    /// Brute-force pair scan for the same connection rule.
    fn brute_force_edges(width: u32, height: u32) -> Vec<(u32, u32, f64)> {
        let mut edges = Vec::new();
        let n = (width * height) as u32;
        for a in 0..n {
            for b in (a + 1)..n {
                let (ac, ar) = (a % width, a / width);
                let (bc, br) = (b % width, b / width);
                let d = ac.abs_diff(bc) + ar.abs_diff(br);
                if (1..=MAX_HOPS).contains(&d) {
                    edges.push((a, b, 1.0 / d as f64));
                }
            }
        }
        edges
    }

    #[test]
    fn two_cell_grid_has_single_unit_edge() {
        let g = build_graph(&lattice(2, 1));
        assert_eq!(g.edges, vec![(0, 1, 1.0)]);
    }

    #[test]
    fn five_hop_cutoff_on_a_line() {
        let g = build_graph(&lattice(7, 1));
        assert!(!g.edges.iter().any(|&(a, b, _)| (a, b) == (0, 6)));
        assert!(g.edges.iter().any(|&(a, b, w)| (a, b) == (0, 5) && w == 0.2));
    }

    #[test]
    fn interior_degree_is_sixty() {
        // lattice points with 1 <= |dx|+|dy| <= 5 around an interior node
        let g = build_graph(&lattice(12, 12));
        let center = 6 * 12 + 6;
        assert_eq!(g.degree(center), 60);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let g = build_graph(&lattice(3, 3));
        let config = LineConfig { epochs: 0, dim: 8, ..Default::default() };
        let (e1, h) = train_line(&g, &config).unwrap();
        let (e2, _) = train_line(&g, &config).unwrap();
        assert_eq!(e1.vectors, e2.vectors);
        assert!(h.epoch_loss.is_empty());
        // init is the seeded uniform draw, not zeros
        assert!(e1.vectors.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let g = build_graph(&lattice(4, 4));
        let config = LineConfig { epochs: 3, dim: 16, ..Default::default() };
        let (e1, _) = train_line(&g, &config).unwrap();
        let (e2, _) = train_line(&g, &config).unwrap();
        assert_eq!(e1.vectors, e2.vectors);
        assert_eq!(e1.contexts, e2.contexts);
    }

    #[test]
    fn connected_pair_beats_disjoint_pair() {
        // two components: nodes {0,1} joined, {2,3} joined
        let g = GridGraph { num_nodes: 4, edges: vec![(0, 1, 1.0), (2, 3, 1.0)] };
        let config = LineConfig { epochs: 400, dim: 8, seed: 3, ..Default::default() };
        let (emb, _) = train_line(&g, &config).unwrap();
        let within = emb.cosine(0, 1);
        let across = emb.cosine(0, 2);
        assert!(
            within > across,
            "within-component cosine {within} should exceed across-component {across}"
        );
    }

    #[test]
    fn loss_trace_improves_on_smoothed_average() {
        let g = build_graph(&lattice(6, 6));
        let config = LineConfig { epochs: 40, dim: 16, ..Default::default() };
        let (_, h) = train_line(&g, &config).unwrap();
        let first: f64 = h.epoch_loss[..5].iter().sum::<f64>() / 5.0;
        let last: f64 = h.epoch_loss[h.epoch_loss.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(last <= first, "smoothed loss should not increase: {first} -> {last}");
    }

    #[test]
    fn embedding_file_round_trip() {
        let spec = lattice(3, 2);
        let g = build_graph(&spec);
        let config = LineConfig { epochs: 2, dim: 5, ..Default::default() };
        let (emb, _) = train_line(&g, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("line.bin");
        write_embedding(&path, &spec, &emb, "ffee").unwrap();
        let (read, hash) = read_embedding(&path, &spec).unwrap();
        assert_eq!(read.vectors, emb.vectors);
        assert_eq!(hash, "ffee");
    }

    proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(20))]
        #[test]
        fn graph_matches_brute_force(width in 1u32..13, height in 1u32..13) {
            let mut got = build_graph(&lattice(width, height)).edges;
            got.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
            let expect = brute_force_edges(width, height);
            prop_assert_eq!(got, expect);
        }
    }
}
