//! Run configuration: flat `key = value` text, every key optional.

use std::path::PathBuf;

use anyhow::{Context, Result};
use sqa_core::audio::Task;
use sqa_core::model::ModelConfig;
use sqa_core::textconf::KeyValues;
use sqa_core::train::TrainConfig;

const TRAIN_KEYS: [&str; 8] = [
    "alpha",
    "lr",
    "batch_size",
    "epochs",
    "seed",
    "beta1",
    "beta2",
    "eps",
];
const PATH_KEYS: [&str; 3] = ["train_manifest", "val_manifest", "out_dir"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::new(Task::Mos, false, false);
        Self {
            train: TrainConfig::for_model(&model),
            model,
            train_manifest: None,
            val_manifest: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let allowed: Vec<&str> = ModelConfig::KEYS
            .iter()
            .chain(&TRAIN_KEYS)
            .chain(&PATH_KEYS)
            .copied()
            .collect();
        kv.reject_unknown(&allowed)?;
        let mut model = ModelConfig::new(Task::Mos, false, false);
        model.apply_keys(&kv)?;
        // batch size defaults depend on the model flags
        let mut train = TrainConfig::for_model(&model);
        if let Some(v) = kv.parsed("alpha")? {
            train.alpha = v;
        }
        if let Some(v) = kv.parsed("lr")? {
            train.adam.lr = v;
        }
        if let Some(v) = kv.parsed("batch_size")? {
            train.batch_size = v;
        }
        if let Some(v) = kv.parsed("epochs")? {
            train.epochs = v;
        }
        if let Some(v) = kv.parsed("seed")? {
            train.seed = v;
        }
        if let Some(v) = kv.parsed("beta1")? {
            train.adam.beta1 = v;
        }
        if let Some(v) = kv.parsed("beta2")? {
            train.adam.beta2 = v;
        }
        if let Some(v) = kv.parsed("eps")? {
            train.adam.eps = v;
        }
        train.validate()?;
        Ok(Self {
            model,
            train,
            train_manifest: kv.get("train_manifest").map(PathBuf::from),
            val_manifest: kv.get("val_manifest").map(PathBuf::from),
            out_dir: kv.get("out_dir").map(PathBuf::from),
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Every effective value; parsing it back yields `self`.
    pub fn to_text(&self) -> String {
        let mut kv = KeyValues::new();
        self.model.write_keys(&mut kv);
        let t = &self.train;
        kv.set("alpha", t.alpha);
        kv.set("lr", t.adam.lr);
        kv.set("batch_size", t.batch_size);
        kv.set("epochs", t.epochs);
        kv.set("seed", t.seed);
        kv.set("beta1", t.adam.beta1);
        kv.set("beta2", t.adam.beta2);
        kv.set("eps", t.adam.eps);
        for (k, v) in [
            ("train_manifest", &self.train_manifest),
            ("val_manifest", &self.val_manifest),
            ("out_dir", &self.out_dir),
        ] {
            if let Some(p) = v {
                kv.set(k, p.display());
            }
        }
        kv.to_text()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::parse("# empty\n").unwrap();
        assert_eq!(c, RunConfig::default());
        let c = RunConfig::parse("use_gqt = true\nuse_el = true\nlr = 0.001").unwrap();
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.train.adam.lr, 0.001);
        let c = RunConfig::parse("use_gqt = true\nuse_el = true\nbatch_size = 4").unwrap();
        assert_eq!(c.train.batch_size, 4);
    }

    #[test]
    fn unknown_and_bad_values_rejected() {
        let e = RunConfig::parse("learning_rate = 0.1").unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
        assert!(RunConfig::parse("epochs = many").is_err());
        assert!(RunConfig::parse("batch_size = 0").is_err());
        assert!(RunConfig::parse("task = speech").is_err());
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut c =
            RunConfig::parse("task = similarity\nuse_el = true\nseed = 9\nalpha = 0.3").unwrap();
        c.train_manifest = Some("/data/train.csv".into());
        c.out_dir = Some("/runs/x".into());
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
