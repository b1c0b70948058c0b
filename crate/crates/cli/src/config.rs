//! Options for `must adapt`. Every flag can also be given in a TOML file
//! under the same name; flags win over the file.

use std::path::{Path, PathBuf};

use clap::Args;
use must_core::trainer::{Mode, TrainConfig};
use must_core::TopK;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct AdaptOptions {
    /// Manifest listing train/test images and class names.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Class embedding file used to build the zero-shot head.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Checkpoint holding the pretrained backbone.
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
    /// Output directory for the checkpoint, metrics and summary.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    pub max_steps: Option<u64>,

    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub layer_decay: Option<f64>,
    /// Pseudo-label confidence threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    /// Side of a mask unit in pixels.
    #[arg(long)]
    pub mask_patch_size: Option<usize>,
    #[arg(long)]
    pub lambda_align: Option<f64>,
    #[arg(long)]
    pub lambda_reg: Option<f64>,
    #[arg(long)]
    pub ema_mu0: Option<f64>,
    /// Step at which the EMA decay reaches its final value.
    #[arg(long)]
    pub ema_mun: Option<u64>,
    /// `all`, or the number of nearest masked tokens to align with.
    #[arg(long)]
    #[serde(default, deserialize_with = "de_top_k")]
    pub align_top_k: Option<TopK>,
    /// `standard` or `transductive`.
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub freeze_classifier: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn de_top_k<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<TopK>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(usize),
        Text(String),
    }
    let parsed = match Raw::deserialize(d)? {
        Raw::Num(k) => k.to_string().parse(),
        Raw::Text(s) => s.parse(),
    };
    parsed.map(Some).map_err(serde::de::Error::custom)
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($field:ident),* $(,)?) => {
        $( if $src.$field.is_some() { $dst.$field = $src.$field.clone(); } )*
    };
}

impl AdaptOptions {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text, path)
    }

    /// `self` with every option set in `top` replaced.
    pub fn overlaid(mut self, top: &AdaptOptions) -> Self {
        overlay!(self, top;
            manifest, embeddings, init_checkpoint, out, resume, max_steps,
            base_lr, batch_size, epochs, weight_decay, layer_decay, threshold,
            mask_ratio, mask_patch_size, lambda_align, lambda_reg, ema_mu0, ema_mun,
            align_top_k, mode, freeze_classifier, seed,
        );
        self
    }

    /// Training hyperparameters on top of `base`.
    pub fn train_config(&self, base: TrainConfig) -> TrainConfig {
        let mut c = base;
        macro_rules! set {
            ($($opt:ident => $field:ident),* $(,)?) => {
                $( if let Some(v) = self.$opt.clone() { c.$field = v; } )*
            };
        }
        set!(
            base_lr => base_lr, batch_size => batch_size, epochs => epochs,
            weight_decay => weight_decay, layer_decay => layer_decay, threshold => threshold,
            mask_ratio => mask_ratio, mask_patch_size => mask_patch_size,
            lambda_align => lambda_align, lambda_reg => lambda_reg, ema_mu0 => ema_mu0,
            ema_mun => ema_mu_n, align_top_k => align_top_k, mode => mode,
            freeze_classifier => freeze_classifier, seed => seed,
        );
        c
    }

    pub fn required<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
        value.as_ref().ok_or_else(|| CliError::Usage(format!("missing required option --{flag}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_keys_match_flag_names() {
        let text = "base-lr = 1e-3\nema-mun = 50\nalign-top-k = 3\nmode = \"transductive\"\nfreeze-classifier = true\n";
        let o = AdaptOptions::from_toml(text, Path::new("c.toml")).unwrap();
        let c = o.train_config(TrainConfig::default());
        assert_eq!(c.base_lr, 1e-3);
        assert_eq!(c.ema_mu_n, 50);
        assert_eq!(c.align_top_k, TopK::Nearest(3));
        assert_eq!(c.mode, Mode::Transductive);
        assert!(c.freeze_classifier);
    }

    #[test]
    fn unknown_key_is_a_usage_error() {
        let err = AdaptOptions::from_toml("learning-rate = 1.0", Path::new("c.toml")).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
    }

    #[test]
    fn flags_override_file() {
        let file = AdaptOptions { epochs: Some(3), threshold: Some(0.5), ..Default::default() };
        let flags = AdaptOptions { epochs: Some(7), ..Default::default() };
        let merged = file.overlaid(&flags);
        assert_eq!(merged.epochs, Some(7));
        assert_eq!(merged.threshold, Some(0.5));
    }

    #[test]
    fn align_top_k_accepts_all_as_text() {
        let o = AdaptOptions::from_toml("align-top-k = \"all\"", Path::new("c.toml")).unwrap();
        assert_eq!(o.align_top_k, Some(TopK::All));
    }
}
