//! Self-describing serialization of a trained model bundle.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constraint::ToleranceReport;
use crate::decomp::DecompositionModel;
use crate::error::{Error, Result};
use crate::vi::{EncoderState, FitResult, FitStatus, SparsityMasks, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to reload and reuse a fitted model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format_version: u32,
    pub train_config: TrainConfig,
    pub model: DecompositionModel,
    pub encoder: EncoderState,
    pub masks: Option<SparsityMasks>,
    pub status: FitStatus,
    pub tolerance: ToleranceReport,
}

impl ModelBundle {
    pub fn from_fit(result: &FitResult, cfg: &TrainConfig) -> Self {
        ModelBundle {
            format_version: FORMAT_VERSION,
            train_config: cfg.clone(),
            model: result.model.clone(),
            encoder: result.encoder.clone(),
            masks: result.masks.clone(),
            status: result.status.clone(),
            tolerance: result.tolerance.clone(),
        }
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let bundle: ModelBundle = serde_json::from_str(&text)?;
        if bundle.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported bundle format version {} (expected {FORMAT_VERSION})",
                bundle.format_version
            )));
        }
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_fig1, Generator, SyntheticSpec};
    use crate::vi::{fit, TrainConfig};

    #[test]
    fn bundle_round_trips_through_json() {
        let spec = SyntheticSpec::new(Generator::Fig1Toy, 30, 0.05, 1).unwrap();
        let (data, _) = generate_fig1(&spec).unwrap();
        let cfg = TrainConfig {
            iterations: 5,
            grid_size: 8,
            hidden_units: 8,
            encoder_hidden: 8,
            seed: 2,
            ..TrainConfig::default()
        };
        let result = fit(&data, &cfg).unwrap();
        let bundle = ModelBundle::from_fit(&result, &cfg);
        let json = bundle.to_json_string().unwrap();
        let loaded: ModelBundle = serde_json::from_str(&json).unwrap();
        assert_eq!(loaded.format_version, FORMAT_VERSION);
        let x = ndarray::array![[0.3, -0.4], [-1.0, 0.2]];
        let a = bundle.model.decode(&x.view(), None).unwrap();
        let b = loaded.model.decode(&x.view(), None).unwrap();
        assert_eq!(a, b);
    }
}
