//! Flat `key=value` run configuration: `#` starts a comment, blank lines
//! are ignored and a repeated key keeps its last value.

use crate::net::{Ablation, NetConfig};
use crate::train::TrainParams;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value `{value}` for `{key}`")]
    BadValue { line: usize, key: String, value: String },
    #[error("line {line}: expected `key=value`")]
    Syntax { line: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub resolution: usize,
    pub channels: Vec<usize>,
    pub offset_o: i32,
    pub seed: u64,
    pub deep_supervision: bool,
    pub use_ddc: bool,
    pub use_cdc: bool,
    pub use_dilated: bool,
    pub use_serank: bool,
    pub use_pe: bool,
    pub use_lsff: bool,
    /// Explicit strategy names; override the module switches when set.
    pub encoder: Option<String>,
    pub attention: Option<String>,
    pub fusion: Option<String>,
    pub threshold: f64,
    pub noise_sigma: f64,
    pub weight_decay: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epochs: 1500,
            lr: 1e-4,
            batch: 4,
            resolution: 512,
            channels: vec![64, 128, 256, 512, 1024],
            offset_o: 3,
            seed: 0,
            deep_supervision: true,
            use_ddc: true,
            use_cdc: true,
            use_dilated: true,
            use_serank: true,
            use_pe: true,
            use_lsff: true,
            encoder: None,
            attention: None,
            fusion: None,
            threshold: 0.5,
            noise_sigma: 0.0,
            weight_decay: 1e-2,
        }
    }
}

pub const KEYS: &[&str] = &[
    "epochs",
    "lr",
    "batch",
    "resolution",
    "channels",
    "offset_o",
    "seed",
    "deep_supervision",
    "use_ddc",
    "use_cdc",
    "use_dilated",
    "use_serank",
    "use_pe",
    "use_lsff",
    "encoder",
    "attention",
    "fusion",
    "threshold",
    "noise_sigma",
    "weight_decay",
];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
            cfg.set(n + 1, key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            line,
            key: key.to_string(),
            value: value.to_string(),
        };
        fn num<V: std::str::FromStr>(v: &str, bad: impl Fn() -> ConfigError) -> Result<V, ConfigError> {
            v.parse().map_err(|_| bad())
        }
        match key {
            "epochs" => self.epochs = num(value, bad)?,
            "lr" => self.lr = num(value, bad)?,
            "batch" => self.batch = num(value, bad)?,
            "resolution" => self.resolution = num(value, bad)?,
            "channels" => {
                self.channels = value
                    .split(',')
                    .map(|v| v.trim().parse().map_err(|_| bad()))
                    .collect::<Result<_, _>>()?
            }
            "offset_o" => self.offset_o = num(value, bad)?,
            "seed" => self.seed = num(value, bad)?,
            "deep_supervision" => self.deep_supervision = num(value, bad)?,
            "use_ddc" => self.use_ddc = num(value, bad)?,
            "use_cdc" => self.use_cdc = num(value, bad)?,
            "use_dilated" => self.use_dilated = num(value, bad)?,
            "use_serank" => self.use_serank = num(value, bad)?,
            "use_pe" => self.use_pe = num(value, bad)?,
            "use_lsff" => self.use_lsff = num(value, bad)?,
            "encoder" => self.encoder = Some(value.to_string()),
            "attention" => self.attention = Some(value.to_string()),
            "fusion" => self.fusion = Some(value.to_string()),
            "threshold" => self.threshold = num(value, bad)?,
            "noise_sigma" => self.noise_sigma = num(value, bad)?,
            "weight_decay" => self.weight_decay = num(value, bad)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            ddc: self.use_ddc,
            cdc: self.use_cdc,
            dilated: self.use_dilated,
            serank: self.use_serank,
            pe: self.use_pe,
            lsff: self.use_lsff,
        }
    }

    pub fn net_config(&self) -> NetConfig {
        let mut cfg = NetConfig {
            channels: self.channels.clone(),
            offset_o: self.offset_o,
            deep_supervision: self.deep_supervision,
            ..NetConfig::default()
        }
        .with_ablation(self.ablation());
        if let Some(e) = &self.encoder {
            cfg.encoder = e.clone();
        }
        if let Some(a) = &self.attention {
            cfg.attention = a.clone();
        }
        if let Some(f) = &self.fusion {
            cfg.fusion = f.clone();
        }
        cfg
    }

    pub fn train_params(&self) -> TrainParams {
        TrainParams {
            epochs: self.epochs,
            lr: self.lr,
            batch: self.batch,
            resolution: self.resolution,
            seed: self.seed,
            weight_decay: self.weight_decay,
            ..TrainParams::default()
        }
    }
}
