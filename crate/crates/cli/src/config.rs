use std::fs;
use std::path::{Path, PathBuf};

use attentropy::LayerAggregation;
use serde::Deserialize;

use crate::CliError;

/// Optional defaults shared by the pipeline commands. Command-line flags win
/// over values read from the file.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Model weights directory.
    pub model: Option<PathBuf>,
    pub aggregation: Option<LayerAggregation>,
    /// Selection report, fitted weights or bare aggregation JSON.
    pub aggregation_file: Option<PathBuf>,
    /// `[width, height]` of the grid layers are averaged on.
    pub common_grid: Option<[usize; 2]>,
    pub threshold: Option<f64>,
    pub thresholds: Option<Vec<f64>>,
    pub stride: Option<usize>,
    pub renormalize: Option<bool>,
    pub seed: Option<u64>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let config: Self =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), CliError> {
        for path in [&self.model, &self.aggregation_file].into_iter().flatten() {
            if !path.exists() {
                return Err(CliError::Config(format!("configured path {} does not exist", path.display())));
            }
        }
        if self.aggregation.is_some() && self.aggregation_file.is_some() {
            return Err(CliError::Config("set either aggregation or aggregation_file, not both".into()));
        }
        if let Some([w, h]) = self.common_grid {
            if w == 0 || h == 0 {
                return Err(CliError::Config("common_grid sides must be positive".into()));
            }
        }
        if self.stride == Some(0) {
            return Err(CliError::Config("stride must be positive".into()));
        }
        if self.threshold.is_some_and(f64::is_nan) {
            return Err(CliError::Config("threshold must not be NaN".into()));
        }
        Ok(())
    }
}

/// Reads an aggregation from any JSON document this tool writes: an object
/// with an `aggregation` field, or a bare aggregation.
pub fn load_aggregation(path: &Path) -> Result<LayerAggregation, CliError> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let inner = value.get("aggregation").cloned().unwrap_or(value);
    serde_json::from_value(inner)
        .map_err(|e| CliError::Config(format!("{}: not an aggregation document ({e})", path.display())))
}

/// `"0,2,5"` as a uniform subset.
pub fn parse_layers(spec: &str) -> Result<LayerAggregation, CliError> {
    let subset = spec
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Config(format!("bad layer list '{spec}': {e}")))?;
    Ok(LayerAggregation::UniformSubset { subset })
}

/// `"48x48"` as `(width, height)`.
pub fn parse_grid(spec: &str) -> Result<(usize, usize), String> {
    let (w, h) = spec.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got '{spec}'"))?;
    let w: usize = w.trim().parse().map_err(|e| format!("bad width in '{spec}': {e}"))?;
    let h: usize = h.trim().parse().map_err(|e| format!("bad height in '{spec}': {e}"))?;
    if w == 0 || h == 0 {
        return Err(format!("grid sides must be positive, got '{spec}'"));
    }
    Ok((w, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_and_layers() {
        assert_eq!(parse_grid("48x32"), Ok((48, 32)));
        assert!(parse_grid("0x4").is_err());
        assert!(parse_grid("12").is_err());
        assert_eq!(
            parse_layers("1, 3").unwrap(),
            LayerAggregation::UniformSubset { subset: vec![1, 3] }
        );
        assert!(parse_layers("1,a").is_err());
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"threshold": 0.5, "bogus": 1}"#).unwrap();
        assert!(matches!(PipelineConfig::load(&path), Err(CliError::Config(_))));
        fs::write(&path, r#"{"threshold": -2.0, "aggregation": {"mode": "uniform_subset", "subset": [0]}}"#).unwrap();
        let c = PipelineConfig::load(&path).unwrap();
        assert_eq!(c.threshold, Some(-2.0));
    }

    #[test]
    fn aggregation_from_wrapped_or_bare() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        fs::write(&path, r#"{"selection": [1], "aggregation": {"mode": "uniform_subset", "subset": [1]}}"#).unwrap();
        assert_eq!(load_aggregation(&path).unwrap(), LayerAggregation::UniformSubset { subset: vec![1] });
        fs::write(&path, r#"{"mode": "weighted", "weights": [0.5], "bias": 1.0}"#).unwrap();
        assert!(load_aggregation(&path).unwrap().is_weighted());
    }
}
