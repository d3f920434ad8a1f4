//! Run-level configuration: every component config plus the shared seed,
//! fold count, adversarial strength and inference options, serialized as one
//! sectioned `key = value` file.

use std::path::Path;

use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::inference::Grid;
use crate::kv::KvDoc;
use crate::model::MilConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Drives data generation, fold planning and training.
    pub seed: u64,
    pub folds: usize,
    /// Reversal scale and, unless `train.grl_single_lambda`, gender-loss weight.
    pub lambda_adv: f64,
    pub tta: bool,
    pub grid: Grid,
    pub generator: GeneratorConfig,
    pub model: MilConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            folds: 5,
            lambda_adv: 0.1,
            tta: true,
            grid: Grid::default(),
            generator: GeneratorConfig::default(),
            model: MilConfig::default(),
            train: TrainConfig::default(),
        };
        cfg.sync();
        cfg
    }
}

impl RunConfig {
    /// Pushes the shared keys down into the component configs.
    pub fn sync(&mut self) {
        self.generator.seed = self.seed;
        self.train.seed = self.seed;
        self.model.lambda_adv = self.lambda_adv;
        self.train.loss.lambda_adv = self.lambda_adv;
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be >= 2, got {}", self.folds)));
        }
        if self.model.input_dim != self.generator.input_dim {
            return Err(Error::Config(format!(
                "model.input_dim {} differs from generator.input_dim {}",
                self.model.input_dim, self.generator.input_dim
            )));
        }
        self.grid.points()?;
        self.generator.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("seed", self.seed);
        doc.set("folds", self.folds);
        doc.set("lambda_adv", self.lambda_adv);
        doc.set("tta", self.tta);
        doc.set("grid.lo", self.grid.lo);
        doc.set("grid.hi", self.grid.hi);
        doc.set("grid.step", self.grid.step);

        let mut g = KvDoc::new();
        self.generator.write_kv(&mut g);
        g.take_str("seed");
        doc.insert_section("generator.", &g);

        let mut m = KvDoc::new();
        self.model.write_kv(&mut m);
        m.take_str("lambda_adv");
        doc.insert_section("model.", &m);

        let mut t = KvDoc::new();
        self.train.write_kv(&mut t);
        doc.insert_section("train.", &t);
        doc
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }

    /// Applies the keys of `doc` on top of `self`. Unknown keys are errors.
    pub fn apply(&mut self, mut doc: KvDoc) -> Result<()> {
        doc.take_into("seed", &mut self.seed)?;
        doc.take_into("folds", &mut self.folds)?;
        doc.take_into("lambda_adv", &mut self.lambda_adv)?;
        doc.take_into("tta", &mut self.tta)?;
        doc.take_into("grid.lo", &mut self.grid.lo)?;
        doc.take_into("grid.hi", &mut self.grid.hi)?;
        doc.take_into("grid.step", &mut self.grid.step)?;
        for (prefix, what) in [("generator.", 0), ("model.", 1), ("train.", 2)] {
            let mut section = doc.take_section(prefix);
            match what {
                0 => self.generator.take_kv(&mut section)?,
                1 => self.model.take_kv(&mut section)?,
                _ => self.train.take_kv(&mut section)?,
            }
            section
                .expect_consumed()
                .map_err(|e| Error::Config(format!("[{prefix}] {e}")))?;
        }
        doc.expect_consumed()?;
        self.sync();
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(KvDoc::read(path)?)?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_kv().write(path)
    }
}
