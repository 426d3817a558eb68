use cegcl::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Written as `manifest.json` at the top of every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Option<TrainConfig>,
    pub dataset_paths: Vec<String>,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    /// Hex SHA-256 of the command line, resolved config and input files.
    pub input_hash: String,
}
