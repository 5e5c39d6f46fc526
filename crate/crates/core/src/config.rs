//! TOML experiment configuration. Sections mirror the field names of the
//! model, training, loss and phantom settings; every key is optional.

use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{generate_phantom, MultiModalCase, PhantomProfiles, PhantomSpec};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub phantom: PhantomConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.phantom.spec(0)?.validate()
    }
}

/// Phantom dataset: `count` cases on `grid_size`, each with its own seed
/// drawn from `seed`. Unset shape fields fall back to the grid-scaled
/// defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub count: usize,
    pub grid_size: [usize; 3],
    pub seed: u64,
    pub center_jitter: Option<f64>,
    pub r_et: Option<f64>,
    pub r_tc: Option<f64>,
    pub r_wt: Option<f64>,
    pub brain_radius: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub profiles: Option<PhantomProfiles>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            count: 4,
            grid_size: [32; 3],
            seed: 0,
            center_jitter: None,
            r_et: None,
            r_tc: None,
            r_wt: None,
            brain_radius: None,
            noise_sigma: None,
            profiles: None,
        }
    }
}

impl PhantomConfig {
    pub fn case_seed(&self, index: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(2 * index as u128);
        rng.next_u64()
    }

    pub fn case_id(index: usize) -> String {
        format!("phantom_{index:03}")
    }

    pub fn spec(&self, index: usize) -> Result<PhantomSpec> {
        let mut s = PhantomSpec::desk(self.grid_size, self.case_seed(index));
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut s.center_jitter, self.center_jitter);
        set(&mut s.r_et, self.r_et);
        set(&mut s.r_tc, self.r_tc);
        set(&mut s.r_wt, self.r_wt);
        set(&mut s.brain_radius, self.brain_radius);
        set(&mut s.noise_sigma, self.noise_sigma);
        if let Some(p) = &self.profiles {
            s.profiles = p.clone();
        }
        s.validate()?;
        Ok(s)
    }

    pub fn generate(&self) -> Result<Vec<MultiModalCase>> {
        (0..self.count)
            .map(|i| generate_phantom(&self.spec(i)?, &Self::case_id(i)))
            .collect()
    }
}
