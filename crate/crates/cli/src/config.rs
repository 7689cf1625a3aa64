//! `key=value` training configuration with `#` comments.
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `learning_rate` | AdamW step size | `1e-4` |
//! | `adam_beta1`, `adam_beta2`, `adam_eps` | AdamW moments | `0.9`, `0.999`, `1e-8` |
//! | `weight_decay` | decoupled decay | `1e-4` |
//! | `steps` | optimizer steps | `1000` |
//! | `support_k` | supports per episode | `8` |
//! | `selection_strategy` | `clip` or `random` | `clip` |
//! | `image_size` | square training resolution | `32` |
//! | `seed` | master seed | `0` |
//! | `augment` | `true` or `false` | `true` |
//! | `lambda_dice`, `lambda_bce`, `lambda_focal` | loss weights | `0.6`, `0.3`, `0.3` |
//! | `focal_gamma` | focusing exponent | `2` |
//! | `focal_alpha` | class balance, or `none` | `0.25` |
//! | `levels` | encoder/decoder depth | `3` |
//! | `channels` | comma list, one per level | `16,32,64` |
//! | `attention_ratio` | channel reduction in attention | `2` |
//! | `attention` | `true`, or `false` for pass-through | `true` |
//! | `leaky_slope` | negative slope | `0.01` |
//! | `provider` | `desk` or `file:PATH`, used when no `--emb` is given | `desk` |

use anyhow::{anyhow, bail, Context, Result};
use matchseg::retrieval::Provider;
use matchseg::trainer::TrainConfig;

pub struct CliConfig {
    pub train: TrainConfig,
    pub provider: Provider,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            train: TrainConfig::default(),
            provider: Provider::Desk,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow!("bad value `{value}` for `{key}`"))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => bail!("bad value `{value}` for `{key}` (true|false)"),
    }
}

impl CliConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "learning_rate" => t.learning_rate = num(key, value)?,
            "adam_beta1" => t.adam_beta1 = num(key, value)?,
            "adam_beta2" => t.adam_beta2 = num(key, value)?,
            "adam_eps" => t.adam_eps = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "steps" => t.steps = num(key, value)?,
            "support_k" => t.support_k = num(key, value)?,
            "selection_strategy" => t.strategy = value.parse()?,
            "image_size" => t.image_size = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "augment" => t.augment = boolean(key, value)?,
            "lambda_dice" => t.loss_weights.lambda1 = num(key, value)?,
            "lambda_bce" => t.loss_weights.lambda2 = num(key, value)?,
            "lambda_focal" => t.loss_weights.lambda3 = num(key, value)?,
            "focal_gamma" => t.focal.gamma = num(key, value)?,
            "focal_alpha" => {
                t.focal.alpha = if value == "none" { None } else { Some(num(key, value)?) }
            }
            "levels" => t.network.levels = num(key, value)?,
            "channels" => {
                t.network.channels = value
                    .split(',')
                    .map(|c| num(key, c.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "attention_ratio" => t.network.ratio = num(key, value)?,
            "attention" => t.network.attention = boolean(key, value)?,
            "leaky_slope" => t.network.leaky_slope = num(key, value)?,
            "provider" => self.provider = value.parse()?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    /// Applies one `key=value` pair.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| anyhow!("expected key=value, got `{pair}`"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = CliConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.set_pair(line).with_context(|| format!("config line {}", n + 1))?;
        }
        Ok(cfg)
    }
}
