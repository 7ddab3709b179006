//! The run configuration file: one TOML document governs a whole run
//! and its hash is embedded in every artifact for provenance.

use crate::error::{Error, Result};
use crate::features::{ClockContext, EmbeddingTableSpec, WeatherCodes};
use crate::graph::LineConfig;
use crate::grid::GridSpec;
use crate::model::conv::ConvNetSpec;
use crate::model::ModelConfig;
use crate::synth::SynthCityConfig;
use crate::tiles::TileSource;
use crate::trajectory::CleanRules;
use crate::training::TrainConfig;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DatasetKind {
    Porto,
    Generic,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// Raw input file (Porto/generic CSV); unused for synthetic runs.
    #[serde(default)]
    pub raw: Option<PathBuf>,
    /// Trips departing on or after this date form the test split.
    #[serde(default)]
    pub split_date: Option<String>,
    #[serde(default)]
    pub utc_offset_s: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
    pub cell_size_m: f64,
}

impl GridConfig {
    pub fn to_spec(&self) -> Result<GridSpec> {
        GridSpec::from_bbox(self.min_lon, self.min_lat, self.max_lon, self.max_lat, self.cell_size_m)
    }
}

fn default_profile() -> String {
    "full".to_string()
}

fn default_image_hw() -> usize {
    32
}

fn default_lstm_hidden() -> usize {
    128
}

fn default_residual_blocks() -> usize {
    2
}

fn default_init_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// "full" uses the published architecture on 436x373 rasters;
    /// "test" runs the downscaled profile for desk-scale work.
    #[serde(default = "default_profile")]
    pub profile: String,
    #[serde(default = "default_image_hw")]
    pub image_height: usize,
    #[serde(default = "default_image_hw")]
    pub image_width: usize,
    #[serde(default = "default_lstm_hidden")]
    pub lstm_hidden: usize,
    #[serde(default = "default_residual_blocks")]
    pub residual_blocks: usize,
    #[serde(default)]
    pub ablate_image: bool,
    #[serde(default = "default_init_seed")]
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            profile: default_profile(),
            image_height: default_image_hw(),
            image_width: default_image_hw(),
            lstm_hidden: default_lstm_hidden(),
            residual_blocks: default_residual_blocks(),
            ablate_image: false,
            init_seed: default_init_seed(),
        }
    }
}

fn default_synth_trips() -> usize {
    5000
}

fn default_synth_days() -> u32 {
    14
}

fn default_synth_vehicles() -> usize {
    120
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub seed: u64,
    pub cells_wide: u32,
    pub cells_high: u32,
    #[serde(default = "default_synth_trips")]
    pub trips: usize,
    #[serde(default = "default_synth_days")]
    pub days: u32,
    #[serde(default = "default_synth_vehicles")]
    pub vehicles: usize,
    #[serde(default)]
    pub city: SynthCityConfig,
}

fn default_version() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub data: DataConfig,
    /// Study region; optional for synthetic runs, whose grid comes
    /// from the synth section (anchored at lon/lat 0 on the equator).
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub clean: CleanRules,
    #[serde(default)]
    pub tables: EmbeddingTableSpec,
    #[serde(default)]
    pub line: LineConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub tiles: Option<TileSource>,
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(default)]
    pub weather: WeatherCodes,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config {
            key: e
                .span()
                .map(|s| format!("offset {}..{}", s.start, s.end))
                .unwrap_or_else(|| "document".into()),
            reason: e.message().to_string(),
        })
    }

    /// Stable hex digest over the canonical JSON form; embedded in
    /// every produced artifact.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex_string(&digest)
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        if let (DatasetKind::Synthetic, Some(synth)) = (&self.data.dataset, &self.synth) {
            let cell_size_m = self.grid.map(|g| g.cell_size_m).unwrap_or(200.0);
            return Ok(GridSpec {
                min_lon: 0.0,
                min_lat: 0.0,
                cell_size_m,
                width: synth.cells_wide,
                height: synth.cells_high,
                ref_lat: 0.0,
            });
        }
        self.grid
            .ok_or_else(|| Error::Config {
                key: "grid".into(),
                reason: "a study region is required for non-synthetic datasets".into(),
            })?
            .to_spec()
    }

    pub fn clock(&self) -> ClockContext {
        ClockContext { utc_offset_s: self.data.utc_offset_s }
    }

    pub fn model_config(&self, spec: &GridSpec) -> Result<ModelConfig> {
        let conv = match self.model.profile.as_str() {
            "full" => ConvNetSpec::full(),
            "test" => ConvNetSpec::test_profile(self.model.image_height, self.model.image_width),
            other => {
                return Err(Error::Config {
                    key: "model.profile".into(),
                    reason: format!("unknown profile {other:?} (expected \"full\" or \"test\")"),
                })
            }
        };
        Ok(ModelConfig {
            tables: self.tables,
            conv,
            lstm_hidden: self.model.lstm_hidden,
            residual_blocks: self.model.residual_blocks,
            grid_width: spec.width,
            grid_height: spec.height,
            ablate_image: self.model.ablate_image,
            init_seed: self.model.init_seed,
            head_scale: 1.0,
            head_shift: 0.0,
        })
    }

    pub fn split_date(&self) -> Result<Option<chrono::NaiveDate>> {
        match &self.data.split_date {
            None => Ok(None),
            Some(s) => chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .map(Some)
                .map_err(|e| Error::Config {
                    key: "data.split_date".into(),
                    reason: format!("expected YYYY-MM-DD: {e}"),
                }),
        }
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [data]
        dataset = "synthetic"

        [synth]
        seed = 7
        cells_wide = 30
        cells_high = 30
    "#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let config = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(config.version, 1);
        assert_eq!(config.train.batch_size, 32);
        assert_eq!(config.tables.fused_dim(), 400);
        assert_eq!(config.model.profile, "full");
        assert!(config.synth.is_some());
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let bad = format!("{MINIMAL}\n[trainn]\nepochs = 3\n");
        let err = RunConfig::parse(&bad).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
    }

    #[test]
    fn synthetic_grid_derived_from_synth_section() {
        let config = RunConfig::parse(MINIMAL).unwrap();
        let spec = config.grid_spec().unwrap();
        assert_eq!((spec.width, spec.height), (30, 30));
        assert_eq!(spec.cell_size_m, 200.0);
    }

    #[test]
    fn non_synthetic_requires_grid() {
        let config = RunConfig::parse(
            "[data]\ndataset = \"porto\"\nraw = \"train.csv\"\n",
        )
        .unwrap();
        assert!(config.grid_spec().is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::parse(MINIMAL).unwrap();
        let b = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = RunConfig::parse(MINIMAL).unwrap();
        c.train.epochs += 1;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn unknown_model_profile_is_a_config_error() {
        let mut config = RunConfig::parse(MINIMAL).unwrap();
        config.model.profile = "tiny".into();
        let spec = config.grid_spec().unwrap();
        assert!(config.model_config(&spec).is_err());
    }
}
