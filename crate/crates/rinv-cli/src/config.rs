//! The run configuration document: one TOML file with `[data]`,
//! `[model]`, `[train]` and optional `[selection]` / `[verify]`
//! sections, each mirroring the typed configs of the core crate.
//! Parsing rejects unknown keys, and `canonical` re-renders a parsed
//! document so that parse -> canonicalize -> parse is a fixed point.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rinv_core::data::{load_idx, synth_shapes, Dataset};
use rinv_core::model::ModelConfig;
use rinv_core::rng::split_seed;
use rinv_core::selection::SelectionConfig;
use rinv_core::train::TrainConfig;
use rinv_core::{Error, Result};

/// Where the images and labels come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// Procedurally rendered rotated glyphs; the test split draws from
    /// an independent seed stream.
    Synth {
        n: usize,
        test_n: usize,
        size: usize,
        classes: usize,
        seed: u64,
    },
    /// Pre-rendered IDX image/label file pairs.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        classes: usize,
    },
}

impl DataConfig {
    pub fn classes(&self) -> usize {
        match self {
            DataConfig::Synth { classes, .. } | DataConfig::Idx { classes, .. } => *classes,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DataConfig::Synth { n, test_n, .. } => {
                if *n == 0 || *test_n == 0 {
                    return Err(Error::config("data.n and data.test_n must be positive"));
                }
                Ok(())
            }
            DataConfig::Idx { .. } => Ok(()),
        }
    }

    /// Materialize the train and test splits.
    pub fn load(&self) -> Result<(Dataset<f32>, Dataset<f32>)> {
        match self {
            DataConfig::Synth {
                n,
                test_n,
                size,
                classes,
                seed,
            } => Ok((
                synth_shapes(*n, *size, *classes, *seed)?,
                synth_shapes(*test_n, *size, *classes, split_seed(*seed, "test-data"))?,
            )),
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes,
            } => Ok((
                load_idx(train_images, train_labels, *classes)?,
                load_idx(test_images, test_labels, *classes)?,
            )),
        }
    }
}

/// Defaults for `rinv verify` when driven from a config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "default_suite")]
    pub suite: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_alpha: Option<usize>,
}

fn default_suite() -> String {
    "all".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyConfig>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Cross-section checks, each error prefixed with its field path.
    pub fn validate(&self) -> Result<()> {
        self.data.validate().map_err(section("data"))?;
        self.model.validate().map_err(section("model"))?;
        self.train.validate().map_err(section("train"))?;
        if let Some(selection) = &self.selection {
            selection.validate().map_err(section("selection"))?;
        }
        let data_size = match &self.data {
            DataConfig::Synth { size, .. } => Some(*size),
            DataConfig::Idx { .. } => None,
        };
        if let Some(size) = data_size {
            if size != self.model.image_size {
                return Err(Error::config(format!(
                    "model.image_size is {} but data.size is {size}",
                    self.model.image_size
                )));
            }
        }
        if self.data.classes() != self.model.classes {
            return Err(Error::config(format!(
                "model.classes is {} but data declares {} classes",
                self.model.classes,
                self.data.classes()
            )));
        }
        Ok(())
    }

    /// Canonical rendering; parsing it again yields the same document.
    pub fn canonical(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::config(format!("cannot render config: {e}")))
    }
}

fn section(name: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Config(msg) => Error::config(format!("{name}: {msg}")),
        other => Error::config(format!("{name}: {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"
        [data]
        source = "synth"
        n = 32
        test_n = 16
        size = 8
        classes = 2
        seed = 3

        [model]
        image_size = 8
        classes = 2
        n_alpha = 4
        n_f = 4
        kernel_size = 3
        conv = [{ channels = 2 }]
        dense = []

        [model.head]
        kind = "monomial"
        distances = [[0.0, 1.0]]

        [train]
        optimizer = "adam"
        learning_rate = 1e-3
        batch_size = 8
        epochs = 1
        seed = 7
    "#;

    #[test]
    fn canonical_form_is_a_parse_fixed_point() {
        let parsed = RunConfig::parse(TINY).unwrap();
        let once = parsed.canonical().unwrap();
        let twice = RunConfig::parse(&once).unwrap().canonical().unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn unknown_keys_are_rejected_in_every_section() {
        for (needle, patch) in [
            ("seed = 3", "seed = 3\nfrobnicate = 1"),
            ("epochs = 1", "epochs = 1\nwarmup = 5"),
            ("kernel_size = 3", "kernel_size = 3\nstride = 2"),
        ] {
            let bad = TINY.replace(needle, patch);
            assert!(RunConfig::parse(&bad).is_err(), "patch not caught: {patch}");
        }
    }

    #[test]
    fn mismatched_data_and_model_shapes_are_reported_with_field_paths() {
        let bad = TINY.replace("\n        size = 8", "\n        size = 12");
        let err = RunConfig::parse(&bad).unwrap_err().to_string();
        assert!(err.contains("image_size"), "got: {err}");

        let bad = TINY.replace("classes = 2\n        seed = 3", "classes = 4\n        seed = 3");
        let err = RunConfig::parse(&bad).unwrap_err().to_string();
        assert!(err.contains("classes"), "got: {err}");
    }

    #[test]
    fn synth_split_loads_disjoint_train_and_test_sets() {
        let config = RunConfig::parse(TINY).unwrap();
        let (train, test) = config.data.load().unwrap();
        assert_eq!(train.len(), 32);
        assert_eq!(test.len(), 16);
        assert_ne!(train.checksum(), test.checksum());
    }
}
