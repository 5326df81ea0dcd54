//! Flat `key=value` run configuration.
//!
//! Values come from built-in defaults, then an optional config file, then
//! command-line flags; later sources win. Unknown keys are rejected at
//! every layer.

use std::collections::BTreeMap;
use std::str::FromStr;

use hgn_core::data::{builtin_action, SyntheticGenConfig};
use hgn_core::graph::skeleton::{DEFAULT_BONE_LENGTHS_MM, N_JOINTS};
use hgn_core::graph::HemScore;
use hgn_core::layers::GConvKind;
use hgn_core::model::{HgnConfig, Variant};
use hgn_core::training::{LossWeights, LrSchedule, TrainConfig};

use crate::CliError;

/// Every accepted key with its default value.
pub const KEYS: &[(&str, &str)] = &[
    // shared
    ("seed", "0"),
    ("hierarchy", "hierarchy"),
    ("dataset", "data.jsonl"),
    ("checkpoint", "model.ckpt"),
    ("report", "report.jsonl"),
    // coarsen
    ("graph", ""),
    ("targets", "96,48"),
    ("hem_score", "normalized_cut"),
    ("mesh_vertices", "6890"),
    ("mesh_seed", "0"),
    // gen-data
    ("n_samples", "2048"),
    ("bone_lengths_mm", ""),
    ("actions", "walk,reach,sit,bend"),
    ("yaw_range_deg", "-45,45"),
    ("focal", "1145"),
    ("distance_range_mm", "4000,6000"),
    ("noise_std_2d", "0"),
    ("subject", "synthetic"),
    // model
    ("channels", "128"),
    ("gconv", "semantic"),
    ("variant", "full"),
    ("blocks_per_scale", "4,4,2"),
    ("top_scale_join_stage", "3"),
    ("transfer_channel_maps", "false"),
    ("scale_node_counts", ""),
    // train
    ("epochs", "100"),
    ("batch_size", "64"),
    ("base_lr", "0.001"),
    ("lr_decay", "0.9"),
    ("lr_decay_every", "20"),
    ("lr_schedule", "step"),
    ("max_norm_threshold", "1"),
    ("flip_augment", "false"),
    ("lambda_p", "1"),
    ("lambda_m", "0.01"),
    ("val_fraction", "0.1"),
    ("split_seed", "0"),
    ("eval_train", "false"),
    ("trainable_prefixes", ""),
    ("timing", "false"),
    ("init_checkpoint", ""),
    // eval
    ("out_dir", "eval"),
    ("eval_split", "all"),
    ("eval_batch_size", "256"),
    ("flip_eval", "false"),
    ("compare", ""),
    // param-count
    ("param_variants", ""),
];

/// Where a value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    Default,
    Inherited,
    File,
    Flag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, (String, Source)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(k, v)| (k.to_string(), (v.to_string(), Source::Default))).collect() }
    }
}

fn is_known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str, source: Source) -> Result<(), CliError> {
        if !is_known(key) {
            return Err(CliError::usage(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), (value.trim().to_string(), source));
        Ok(())
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn merge_text(&mut self, text: &str, source: Source) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::parse(format!("config line {}: expected `key=value`, got `{line}`", i + 1)));
            };
            self.set(k.trim(), v, source)?;
        }
        Ok(())
    }

    /// Takes over keys recorded in an earlier artifact, skipping any this
    /// version no longer knows.
    pub fn inherit(&mut self, echo: &BTreeMap<String, String>) {
        for (k, v) in echo {
            if is_known(k) {
                self.values.insert(k.clone(), (v.clone(), Source::Inherited));
            }
        }
    }

    pub fn source(&self, key: &str) -> Source {
        self.values[key].1
    }

    pub fn str(&self, key: &str) -> &str {
        &self.values.get(key).unwrap_or_else(|| panic!("unregistered key {key}")).0
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.str(key);
        raw.parse().map_err(|_| CliError::parse(format!("invalid value `{raw}` for `{key}`")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        let raw = self.str(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| s.trim().parse().map_err(|_| CliError::parse(format!("invalid entry `{s}` in `{key}`"))))
            .collect()
    }

    fn array<const N: usize, T: FromStr + Copy + Default>(&self, key: &str) -> Result<[T; N], CliError> {
        let v: Vec<T> = self.list(key)?;
        v.try_into().map_err(|v: Vec<T>| CliError::parse(format!("`{key}` needs {N} values, got {}", v.len())))
    }

    /// The effective configuration, as echoed into artifacts.
    pub fn echo(&self) -> BTreeMap<String, String> {
        self.values.iter().map(|(k, (v, _))| (k.clone(), v.clone())).collect()
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, (v, _))| format!("{k}={v}\n")).collect()
    }

    pub fn hem_score(&self) -> Result<HemScore, CliError> {
        self.str("hem_score").parse().map_err(CliError::from)
    }

    pub fn model(&self) -> Result<HgnConfig, CliError> {
        let counts: Vec<usize> = self.list("scale_node_counts")?;
        let scale_node_counts = match counts.len() {
            0 => None,
            3 => Some([counts[0], counts[1], counts[2]]),
            n => return Err(CliError::parse(format!("`scale_node_counts` needs 3 values, got {n}"))),
        };
        let cfg = HgnConfig {
            channels: self.get("channels")?,
            gconv_kind: self.str("gconv").parse::<GConvKind>()?,
            blocks_per_scale: self.array("blocks_per_scale")?,
            scale_node_counts,
            top_scale_join_stage: self.get("top_scale_join_stage")?,
            variant: self.str("variant").parse::<Variant>()?,
            transfer_channel_maps: self.get("transfer_channel_maps")?,
            seed: self.get("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            epochs: self.get("epochs")?,
            batch_size: self.get("batch_size")?,
            base_lr: self.get("base_lr")?,
            lr_decay: self.get("lr_decay")?,
            lr_decay_every: self.get("lr_decay_every")?,
            lr_schedule: self.str("lr_schedule").parse::<LrSchedule>()?,
            max_norm_threshold: self.get("max_norm_threshold")?,
            flip_augment: self.get("flip_augment")?,
            loss: LossWeights { lambda_p: self.get("lambda_p")?, lambda_m: self.get("lambda_m")? },
            seed: self.get("seed")?,
            val_fraction: self.get("val_fraction")?,
            split_seed: self.get("split_seed")?,
            eval_train: self.get("eval_train")?,
            trainable_prefixes: self.list("trainable_prefixes")?,
            timing: self.get("timing")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn generator(&self) -> Result<SyntheticGenConfig, CliError> {
        let bones: Vec<f64> = self.list("bone_lengths_mm")?;
        let bone_lengths_mm = match bones.len() {
            0 => DEFAULT_BONE_LENGTHS_MM,
            N_JOINTS => bones.try_into().unwrap(),
            n => return Err(CliError::parse(format!("`bone_lengths_mm` needs {N_JOINTS} values, got {n}"))),
        };
        let actions = self
            .list::<String>("actions")?
            .iter()
            .map(|a| builtin_action(a).ok_or_else(|| CliError::parse(format!("unknown action `{a}`"))))
            .collect::<Result<_, _>>()?;
        let cfg = SyntheticGenConfig {
            n_samples: self.get("n_samples")?,
            seed: self.get("seed")?,
            bone_lengths_mm,
            actions,
            yaw_range_deg: self.array("yaw_range_deg")?,
            focal: self.get("focal")?,
            distance_range_mm: self.array("distance_range_mm")?,
            n_mesh_vertices: self.get("mesh_vertices")?,
            mesh_seed: self.get("mesh_seed")?,
            noise_std_2d: self.get("noise_std_2d")?,
            subject: self.str("subject").to_string(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
