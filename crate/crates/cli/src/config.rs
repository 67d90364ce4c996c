use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tdd_core::convnet::NetSpec;
use tdd_core::encoding::{FisherOptions, GmmParams, SvmParams};
use tdd_core::flow::FlowParams;
use tdd_core::pooling::Summation;
use tdd_core::tensor::{ScaleSet, Stream};
use tdd_core::trajectory::TrackerConfig;

use crate::error::{CliError, Result};
use crate::synth::SynthConfig;

/// Which flow feeds the temporal network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalInput {
    #[default]
    Raw,
    /// Flow recomputed after undoing the estimated camera motion.
    Warped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Dataset directory holding `dataset.json` and `splits.json`.
    pub dataset: PathBuf,
    pub work_dir: PathBuf,
    /// Optional directory of precomputed `.tdt` maps, named like the work-dir ones.
    #[serde(default)]
    pub external_maps: Option<PathBuf>,
    pub seed: u64,
    #[serde(default)]
    pub jobs: usize,
    #[serde(default)]
    pub flow: FlowParams,
    /// Flow magnitude mapped onto the ends of the 0–255 range.
    pub flow_bound: f32,
    /// Flow fields per temporal-network input volume.
    pub flow_depth: usize,
    #[serde(default)]
    pub temporal_input: TemporalInput,
    #[serde(default)]
    pub tracker: TrackerConfig,
    pub scales: ScaleSet,
    /// `"compact"`, `"reference"` or a path to a NetSpec JSON file.
    pub spatial_net: String,
    pub temporal_net: String,
    #[serde(default)]
    pub summation: Summation,
    pub pca_dim: usize,
    #[serde(default)]
    pub gmm: GmmParams,
    #[serde(default)]
    pub fisher: FisherOptions,
    #[serde(default)]
    pub svm: SvmParams,
    #[serde(default)]
    pub synth: SynthConfig,
    /// Keys starting with `_` are comments.
    #[serde(flatten)]
    pub comments: BTreeMap<String, serde_json::Value>,
}

impl PipelineConfig {
    /// Reads a config; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            serde_json::from_slice(&bytes).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        if let Some(bad) = cfg.comments.keys().find(|k| !k.starts_with('_')) {
            return Err(CliError::config(format!("{}: unknown key \"{bad}\"", path.display())));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset = base.join(&cfg.dataset);
        cfg.work_dir = base.join(&cfg.work_dir);
        cfg.external_maps = cfg.external_maps.map(|p| base.join(p));
        for net in [&mut cfg.spatial_net, &mut cfg.temporal_net] {
            if !matches!(net.as_str(), "compact" | "reference") {
                *net = base.join(&*net).display().to_string();
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        self.tracker.validate()?;
        let bad = |m: &str| Err(CliError::config(m.to_string()));
        if self.flow_bound <= 0.0 {
            return bad("flow_bound must be positive");
        }
        if self.flow_depth == 0 {
            return bad("flow_depth must be at least 1");
        }
        if self.pca_dim == 0 {
            return bad("pca_dim must be at least 1");
        }
        if self.gmm.k == 0 {
            return bad("gmm.k must be at least 1");
        }
        if self.svm.c <= 0.0 {
            return bad("svm.c must be positive");
        }
        Ok(())
    }

    pub fn net_spec(&self, stream: Stream, input_channels: usize) -> Result<NetSpec> {
        let name = match stream {
            Stream::Spatial => &self.spatial_net,
            Stream::Temporal => &self.temporal_net,
        };
        let spec = match name.as_str() {
            "compact" => NetSpec::compact(stream, input_channels),
            "reference" => NetSpec::reference(stream, input_channels),
            path => {
                let bytes = fs::read(path).map_err(|e| CliError::config(format!("{path}: {e}")))?;
                let spec: NetSpec = serde_json::from_slice(&bytes)
                    .map_err(|e| CliError::config(format!("{path}: NetSpec parse failure: {e}")))?;
                if spec.stream != stream || spec.input_channels != input_channels {
                    return Err(CliError::config(format!(
                        "{path}: expected a {stream} net with {input_channels} input channels"
                    )));
                }
                spec
            }
        };
        spec.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(spec)
    }

    /// GMM parameters with the seed derived from the pipeline seed and split.
    pub fn gmm_params(&self, split: usize) -> GmmParams {
        GmmParams {
            seed: self.seed ^ 0x6a11_0000 ^ split as u64,
            ..self.gmm
        }
    }

    pub fn svm_params(&self, split: usize) -> SvmParams {
        SvmParams {
            seed: self.seed ^ 0x05f3_0000 ^ split as u64,
            ..self.svm
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("cfg.json");
        fs::write(&p, body).unwrap();
        p
    }

    const MINIMAL: &str = r#"{"dataset": "d", "work_dir": "w", "seed": 1, "flow_bound": 20,
        "flow_depth": 10, "scales": [1.0], "spatial_net": "compact", "temporal_net": "nets/t.json",
        "pca_dim": 16, "_note": "ignored"}"#;

    #[test]
    fn paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::load(&write(dir.path(), MINIMAL)).unwrap();
        assert_eq!(cfg.dataset, dir.path().join("d"));
        assert_eq!(cfg.work_dir, dir.path().join("w"));
        assert_eq!(cfg.spatial_net, "compact");
        assert_eq!(PathBuf::from(&cfg.temporal_net), dir.path().join("nets/t.json"));
        assert_eq!(cfg.gmm.k, 16);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let typo = MINIMAL.replace("\"_note\"", "\"note\"");
        let e = PipelineConfig::load(&write(dir.path(), &typo)).unwrap_err();
        assert_eq!((e.kind, e.message.contains("\"note\"")), (crate::error::ExitKind::Config, true));
        let bad = MINIMAL.replace("\"flow_depth\": 10", "\"flow_depth\": 0");
        assert_eq!(PipelineConfig::load(&write(dir.path(), &bad)).unwrap_err().kind, crate::error::ExitKind::Config);
    }

    #[test]
    fn shipped_desk_config_loads() {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
        let cfg = PipelineConfig::load(&p).unwrap();
        assert_eq!((cfg.gmm.k, cfg.pca_dim, cfg.scales.len()), (16, 16, 3));
    }
}
