use std::fs;
use std::path::{Path, PathBuf};

use collossl::data::adapters::{load_opportunity, load_pamap2, load_realworld, RealWorldOptions};
use collossl::data::{load_dataset, load_raw, segment_windows, MultiDeviceDataset, RawRecording, SegmentConfig};
use collossl::eval::EvalConfig;
use collossl::synth::{generate_raw, segment_config, SynthConfig};
use collossl::train::TrainConfig;
use collossl::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generated from `[synth]`.
    #[default]
    Synth,
    /// A directory in the native layout (manifest.toml plus CSVs or windows).
    Dir,
    Realworld,
    Pamap2,
    Opportunity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    /// Window length for the public-dataset adapters.
    pub window_seconds: f64,
    /// RealWorld body positions; all seven when empty.
    pub positions: Vec<String>,
    /// Subject filter for RealWorld; every subject when empty.
    pub subjects: Vec<u32>,
    /// PAMAP2 is resampled to this rate when set.
    pub resample_hz: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { source: DataSource::Synth, path: None, window_seconds: 2.0, positions: Vec::new(), subjects: Vec::new(), resample_hz: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub num_groups: usize,
    pub max_folds: Option<usize>,
    pub split_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self { num_groups: e.num_groups, max_folds: e.max_folds, split_seed: e.split_seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub fractions: Vec<f64>,
    pub methods: Vec<String>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            fractions: vec![0.1, 0.25, 0.5, 0.75, 1.0],
            methods: vec!["collossl".into(), "random_frozen".into(), "supervised_single".into(), "supervised_multi".into(), "autoencoder_single".into(), "autoencoder_multi".into()],
        }
    }
}

/// Everything a command can read. Flags override the matching fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds training and generation when set.
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub method: Option<String>,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Pushes the top-level seed down into every seeded section.
    pub fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            self.synth.seed = seed;
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig { train: self.train.clone(), num_groups: self.eval.num_groups, max_folds: self.eval.max_folds, split_seed: self.eval.split_seed }
    }

    fn data_path(&self) -> Result<&Path> {
        self.data.path.as_deref().ok_or_else(|| Error::Config(format!("data.source = {:?} needs data.path", self.data.source)))
    }

    /// Continuous streams and how to cut them into windows, for sources that
    /// keep them. `Dir` sources stored only as windows have none.
    pub fn load_raw(&self) -> Result<Option<(RawRecording, SegmentConfig)>> {
        let seg = SegmentConfig::new(self.data.window_seconds);
        Ok(Some(match self.data.source {
            DataSource::Synth => (generate_raw(&self.synth)?, segment_config(&self.synth)),
            DataSource::Dir => {
                let root = self.data_path()?;
                if root.join("windows").join("index.csv").exists() {
                    return Ok(None);
                }
                let (raw, manifest) = load_raw(root)?;
                (raw, manifest.segment_config()?)
            }
            DataSource::Realworld => {
                let mut opts = RealWorldOptions::default();
                if !self.data.positions.is_empty() {
                    opts.positions = self.data.positions.clone();
                }
                if !self.data.subjects.is_empty() {
                    opts.subjects = Some(self.data.subjects.clone());
                }
                (load_realworld(self.data_path()?, &opts)?, seg)
            }
            DataSource::Pamap2 => (load_pamap2(self.data_path()?, self.data.resample_hz)?, seg),
            DataSource::Opportunity => (load_opportunity(self.data_path()?)?, seg),
        }))
    }

    pub fn load_dataset(&self) -> Result<MultiDeviceDataset> {
        match self.load_raw()? {
            Some((raw, seg)) => segment_windows(&raw, &seg),
            None => load_dataset(self.data_path()?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nlearning_rate = 1.0\n").is_err());
        assert!(toml::from_str::<RunConfig>("colour = 1\n").is_err());
    }

    #[test]
    fn sections_parse_and_seed_propagates() {
        let mut c: RunConfig = toml::from_str(
            "seed = 9\nmethod = \"collossl\"\n[synth]\nnum_devices = 3\n[train]\nanchor_id = \"device1\"\nbatch_size = 64\n[eval]\nnum_groups = 2\n",
        )
        .unwrap();
        c.apply_seed();
        assert_eq!((c.train.seed, c.synth.seed, c.synth.num_devices), (9, 9, 3));
        let e = c.eval_config();
        assert_eq!((e.num_groups, e.train.batch_size, e.train.anchor_id.as_str()), (2, 64, "device1"));
    }
}
