//! Saved runs and reliability map exports.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dmqa::{dmqa_assess, FeatureMap, ReliabilityResult};
use crate::error::{Error, Result};
use crate::graddiff::{Batch, ParamSet, Variant};
use crate::missing::{apply_missing, AvailabilitySchedule, DegradationSpec, Modality};
use crate::numerics::{write_tensor, TensorHeader};

use super::config::ExperimentConfig;
use super::train::TrainSpec;

const MODEL_FILE: &str = "model.json";
const PROJECTOR_BASE: &str = "projector";

/// Everything needed to rebuild and evaluate a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub spec: TrainSpec,
    pub params: ParamSet,
}

impl SavedModel {
    pub fn new(config: &ExperimentConfig, spec: TrainSpec, params: ParamSet) -> Self {
        Self {
            config_hash: config.hash(),
            config: config.clone(),
            spec,
            params,
        }
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    /// Writes `model.json` and a tensor dump of the projector `Q` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MODEL_FILE), serde_json::to_string_pretty(self)?)?;
        self.params.projector.write(&dir.join(PROJECTOR_BASE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let model: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        model.config.validate()?;
        if !model.params.is_finite() {
            return Err(Error::NonFinite { op: "SavedModel::load" });
        }
        Ok(model)
    }
}

/// Per-modality reliability maps of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityMaps {
    pub optical: ReliabilityResult,
    pub sar: ReliabilityResult,
}

impl ReliabilityMaps {
    /// Assesses `batch` after `schedule` and `policy` are applied.
    pub fn compute(
        params: &ParamSet,
        batch: &Batch,
        schedule: &AvailabilitySchedule,
        policy: &DegradationSpec,
    ) -> Result<Self> {
        let (optical, sar) = apply_missing(&batch.optical, &batch.sar, schedule, policy)?;
        Self::of_maps(params, &optical, &sar)
    }

    pub fn of_maps(params: &ParamSet, optical: &FeatureMap, sar: &FeatureMap) -> Result<Self> {
        Ok(Self {
            optical: dmqa_assess(optical, &params.tokens_r, &params.dmqa)?,
            sar: dmqa_assess(sar, &params.tokens_s, &params.dmqa)?,
        })
    }

    fn get(&self, m: Modality) -> &ReliabilityResult {
        match m {
            Modality::Optical => &self.optical,
            Modality::Sar => &self.sar,
        }
    }

    /// Writes `<modality>_{L,D,R}` dumps of shape `[samples, positions]` and
    /// `summary.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for m in Modality::ALL {
            let r = self.get(m);
            let header = TensorHeader::new(&[r.samples, r.positions]).with("modality", m.name());
            for (name, values) in [("L", &r.magnitude), ("D", &r.direction), ("R", &r.combined)] {
                write_tensor(&dir.join(format!("{}_{name}", m.name())), &header, values)?;
            }
        }
        let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
        w.write_record(["sample_id", "modality", "mean_L", "mean_D", "mean_R"])?;
        for b in 0..self.optical.samples {
            for m in Modality::ALL {
                let r = self.get(m);
                let span = b * r.positions..(b + 1) * r.positions;
                let mean = |v: &[f64]| v[span.clone()].iter().sum::<f64>() / r.positions as f64;
                w.write_record([
                    b.to_string(),
                    m.name().to_string(),
                    mean(&r.magnitude).to_string(),
                    mean(&r.direction).to_string(),
                    mean(&r.combined).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
