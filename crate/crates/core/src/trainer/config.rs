use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::FusionMode;
use crate::error::{Error, Result};
use crate::kv::{pairs, parse_bool, parse_num};
use crate::losses::LossWeights;
use crate::model::ModelConfig;

/// Every hyperparameter of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    /// Reserved: parameter momentum for SGD. Only 0 is supported.
    pub sgd_momentum: f64,
    pub alpha: f64,
    pub beta: f64,
    pub m0: f64,
    pub momentum_power: f64,
    pub num_classes: usize,
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
    pub head_hidden: Option<usize>,
    pub fusion: FusionMode,
    /// `false` trains the baseline without the memory path.
    pub mcibi: bool,
    pub use_cosine: bool,
    pub use_poly_schedule: bool,
    pub clustering_init: bool,
    pub use_rcl: bool,
    pub use_within_image: bool,
    /// Samples at the end of the dataset held out for evaluation.
    pub holdout: usize,
    /// Save a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 10,
            batch_size: 8,
            base_lr: 0.05,
            poly_power: 0.9,
            weight_decay: 1e-4,
            sgd_momentum: 0.0,
            alpha: 0.4,
            beta: 1.0,
            m0: 0.9,
            momentum_power: 0.9,
            num_classes: 5,
            channels: 16,
            blocks: 4,
            stride: 1,
            head_hidden: None,
            fusion: FusionMode::Concat,
            mcibi: true,
            use_cosine: true,
            use_poly_schedule: true,
            clustering_init: false,
            use_rcl: true,
            use_within_image: false,
            holdout: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (key, v) in pairs(text)? {
            let v = v.as_str();
            let k = key.as_str();
            match k {
                "seed" => c.seed = parse_num(k, v)?,
                "epochs" => c.epochs = parse_num(k, v)?,
                "batch_size" => c.batch_size = parse_num(k, v)?,
                "base_lr" => c.base_lr = parse_num(k, v)?,
                "poly_power" => c.poly_power = parse_num(k, v)?,
                "weight_decay" => c.weight_decay = parse_num(k, v)?,
                "sgd_momentum" => c.sgd_momentum = parse_num(k, v)?,
                "alpha" => c.alpha = parse_num(k, v)?,
                "beta" => c.beta = parse_num(k, v)?,
                "m0" => c.m0 = parse_num(k, v)?,
                "momentum_power" => c.momentum_power = parse_num(k, v)?,
                "num_classes" => c.num_classes = parse_num(k, v)?,
                "channels" => c.channels = parse_num(k, v)?,
                "blocks" => c.blocks = parse_num(k, v)?,
                "stride" => c.stride = parse_num(k, v)?,
                "head_hidden" => c.head_hidden = if v == "auto" { None } else { Some(parse_num(k, v)?) },
                "fusion" => c.fusion = v.parse()?,
                "mcibi" => c.mcibi = parse_bool(k, v)?,
                "use_cosine" => c.use_cosine = parse_bool(k, v)?,
                "use_poly_schedule" => c.use_poly_schedule = parse_bool(k, v)?,
                "clustering_init" => c.clustering_init = parse_bool(k, v)?,
                "use_rcl" => c.use_rcl = parse_bool(k, v)?,
                "use_within_image" => c.use_within_image = parse_bool(k, v)?,
                "holdout" => c.holdout = parse_num(k, v)?,
                "checkpoint_every" => c.checkpoint_every = parse_num(k, v)?,
                _ => return Err(Error::Validation(format!("unknown config key {k:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        for (what, v) in [("base_lr", self.base_lr), ("poly_power", self.poly_power), ("momentum_power", self.momentum_power)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Range { what, value: v, lo: 0.0, hi: f64::INFINITY });
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Range { what: "weight_decay", value: self.weight_decay, lo: 0.0, hi: f64::INFINITY });
        }
        if self.sgd_momentum != 0.0 {
            return Err(Error::Validation("sgd_momentum is reserved; only 0 is supported".into()));
        }
        if !(self.m0 > 0.0 && self.m0 < 1.0) {
            return Err(Error::Range { what: "m0", value: self.m0, lo: 0.0, hi: 1.0 });
        }
        LossWeights::new(self.alpha, self.beta)?;
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha, beta: self.beta }
    }

    pub fn model_config(&self, in_channels: usize) -> ModelConfig {
        ModelConfig {
            in_channels,
            num_classes: self.num_classes,
            channels: self.channels,
            blocks: self.blocks,
            stride: self.stride,
            head_hidden: self.head_hidden,
            fusion: self.fusion,
            within_image: self.use_within_image,
            mcibi: self.mcibi,
        }
    }

    /// Canonical `key = value` rendering; parsing it yields the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let hidden = self.head_hidden.map_or("auto".to_string(), |h| h.to_string());
        let rows: [(&str, String); 25] = [
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("poly_power", self.poly_power.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("sgd_momentum", self.sgd_momentum.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("m0", self.m0.to_string()),
            ("momentum_power", self.momentum_power.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("channels", self.channels.to_string()),
            ("blocks", self.blocks.to_string()),
            ("stride", self.stride.to_string()),
            ("head_hidden", hidden),
            ("fusion", self.fusion.to_string()),
            ("mcibi", self.mcibi.to_string()),
            ("use_cosine", self.use_cosine.to_string()),
            ("use_poly_schedule", self.use_poly_schedule.to_string()),
            ("clustering_init", self.clustering_init.to_string()),
            ("use_rcl", self.use_rcl.to_string()),
            ("use_within_image", self.use_within_image.to_string()),
            ("holdout", self.holdout.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Hex SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_hash() {
        let c = TrainConfig {
            seed: 17,
            head_hidden: Some(12),
            fusion: FusionMode::WeightedAdd,
            use_rcl: false,
            ..TrainConfig::default()
        };
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.hash(), TrainConfig::default().hash());
        assert_eq!(TrainConfig::parse("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::parse("learning_rate = 0.1").unwrap_err().is_validation());
        assert!(TrainConfig::parse("base_lr = 0").is_err());
        assert!(TrainConfig::parse("m0 = 1.0").is_err());
        assert!(TrainConfig::parse("fusion = mean").is_err());
        assert!(TrainConfig::parse("sgd_momentum = 0.9").is_err());
        assert!(TrainConfig::parse("use_rcl = perhaps").is_err());
        assert!(TrainConfig::parse("alpha = -1").is_err());
    }
}
