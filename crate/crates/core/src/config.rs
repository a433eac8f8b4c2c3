//! Training configuration.
//!
//! A config file is flat TOML: one `key = value` line per field, every field
//! optional. Overrides given as `key=value` strings are applied on top of the
//! file and win. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::TaskFamily;
use crate::error::{Error, Result};
use crate::representation::LatentNorm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub family: TaskFamily,
    pub seed: u64,
    pub epochs: usize,

    // tasks and episodes
    pub n_train: usize,
    pub n_meta: usize,
    pub n_vt: usize,
    pub m: usize,
    pub horizon: usize,
    pub init_noise: f64,
    pub n_exp: usize,
    pub n_rl: usize,
    pub h_freq: usize,

    // networks
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub rl_hidden: Vec<usize>,
    pub latent_norm: LatentNorm,

    // optimisation
    pub lr_model: f64,
    pub lr_disc: f64,
    pub lr_rl: f64,
    pub k_model: usize,
    pub k_rl: usize,
    pub disc_steps: usize,
    pub n_c: usize,
    pub n_avg: usize,
    pub rl_batch: usize,
    pub buffer_capacity: usize,
    pub on_buffer_capacity: usize,

    // model loss
    pub lambda_bisim: f64,
    pub lambda_recon: f64,
    pub lambda_on_off: f64,
    pub lambda_center: f64,
    pub lambda_wgan: f64,
    pub lambda_tp: f64,
    pub lambda_gp: f64,
    pub eta: f64,

    // virtual tasks
    pub beta: f64,
    pub eps_reg: f64,
    pub lambda_vt: f64,
    pub dropout: f64,

    // soft actor-critic
    pub lambda_rew: f64,
    pub lambda_ent: f64,
    pub gamma: f64,
    pub tau: f64,

    // evaluation
    pub eval_every: usize,
    pub tracked_tasks: usize,

    // ablations
    pub no_vt: bool,
    pub no_gen: bool,
    pub no_onoff: bool,
    pub recon_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            family: TaskFamily::PointGoal,
            seed: 0,
            epochs: 20,
            n_train: 16,
            n_meta: 8,
            n_vt: 5,
            m: 3,
            horizon: 64,
            init_noise: 0.0,
            n_exp: 2,
            n_rl: 3,
            h_freq: 20,
            latent_dim: 10,
            encoder_hidden: vec![64, 64],
            decoder_hidden: vec![64, 64],
            disc_hidden: vec![64, 64],
            rl_hidden: vec![64, 64],
            latent_norm: LatentNorm::L1,
            lr_model: 3e-4,
            lr_disc: 3e-4,
            lr_rl: 3e-4,
            k_model: 100,
            k_rl: 200,
            disc_steps: 5,
            n_c: 128,
            n_avg: 4,
            rl_batch: 256,
            buffer_capacity: 100_000,
            on_buffer_capacity: 10_000,
            lambda_bisim: 100.0,
            lambda_recon: 200.0,
            lambda_on_off: 100.0,
            lambda_center: 10.0,
            lambda_wgan: 1.0,
            lambda_tp: 100.0,
            lambda_gp: 5.0,
            eta: 0.1,
            beta: 2.0,
            eps_reg: 0.1,
            lambda_vt: 1.0,
            dropout: 0.1,
            lambda_rew: 1.0,
            lambda_ent: 0.2,
            gamma: 0.99,
            tau: 0.005,
            eval_every: 1,
            tracked_tasks: 4,
            no_vt: false,
            no_gen: false,
            no_onoff: false,
            recon_only: false,
        }
    }
}

/// Which parts of the method are active after applying ablation switches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Switches {
    /// Virtual tasks are built and used in the RL losses.
    pub virtual_tasks: bool,
    /// The critic and the generator loss are trained.
    pub adversarial: bool,
    pub lambda_bisim: f64,
    pub lambda_on_off: f64,
    pub lambda_vt: f64,
    pub decoder_dropout: f64,
}

impl TrainConfig {
    /// Parses a flat TOML document and applies `key=value` overrides.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
            let key = key.trim();
            let value = value.trim();
            let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
                Ok(mut t) => t.remove("v").expect("key present"),
                Err(_) => toml::Value::String(value.to_string()),
            };
            table.insert(key.to_string(), parsed);
        }
        let config: TrainConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let coefficients = [
            ("lambda_bisim", self.lambda_bisim),
            ("lambda_recon", self.lambda_recon),
            ("lambda_on_off", self.lambda_on_off),
            ("lambda_center", self.lambda_center),
            ("lambda_wgan", self.lambda_wgan),
            ("lambda_tp", self.lambda_tp),
            ("lambda_gp", self.lambda_gp),
            ("lambda_rew", self.lambda_rew),
            ("lambda_ent", self.lambda_ent),
            ("eta", self.eta),
            ("lr_model", self.lr_model),
            ("lr_disc", self.lr_disc),
            ("lr_rl", self.lr_rl),
        ];
        for (name, v) in coefficients {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda_vt) {
            return fail(format!("lambda_vt must lie in [0, 1], got {}", self.lambda_vt));
        }
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return fail(format!("beta must be >= 1, got {}", self.beta));
        }
        if !(0.0..=1.0).contains(&self.eps_reg) {
            return fail(format!("eps_reg must lie in [0, 1], got {}", self.eps_reg));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.tau) {
            return fail("gamma and tau must lie in [0, 1]".into());
        }
        let positive = [
            ("n_train", self.n_train),
            ("n_meta", self.n_meta),
            ("m", self.m),
            ("horizon", self.horizon),
            ("h_freq", self.h_freq),
            ("latent_dim", self.latent_dim),
            ("n_c", self.n_c),
            ("n_avg", self.n_avg),
            ("rl_batch", self.rl_batch),
            ("buffer_capacity", self.buffer_capacity),
            ("on_buffer_capacity", self.on_buffer_capacity),
            ("disc_steps", self.disc_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if self.n_meta > self.n_train {
            return fail(format!("n_meta ({}) exceeds n_train ({})", self.n_meta, self.n_train));
        }
        if self.encoder_hidden.is_empty() {
            return fail("encoder_hidden needs at least one layer".into());
        }
        Ok(())
    }

    /// SHA-256 of the configuration without the epoch count, hex encoded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn switches(&self) -> Switches {
        let virtual_tasks = !self.no_vt && self.lambda_vt > 0.0;
        let adversarial = virtual_tasks && !self.no_gen && !self.recon_only;
        Switches {
            virtual_tasks,
            adversarial,
            lambda_bisim: if self.recon_only { 0.0 } else { self.lambda_bisim },
            lambda_on_off: if self.recon_only || self.no_onoff { 0.0 } else { self.lambda_on_off },
            lambda_vt: if self.no_vt { 0.0 } else { self.lambda_vt },
            decoder_dropout: if self.recon_only { self.dropout } else { 0.0 },
        }
    }

    /// Next-state weight for virtual RL contexts. Families whose dynamics do
    /// not depend on the task keep the real next state.
    pub fn effective_eps_reg(&self) -> f64 {
        if self.family.varies_dynamics() {
            self.eps_reg
        } else {
            0.0
        }
    }
}
