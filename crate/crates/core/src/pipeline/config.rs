//! Flat key-value run configuration.
//!
//! One text file drives dataset synthesis, model geometry, the sampler, the
//! losses, and the training loop. Unknown keys are hard errors, command-line
//! overrides reuse the same parser, and every run writes its resolved config
//! next to its outputs (it is also embedded into checkpoints so a model can
//! be rebuilt from its file alone).

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::fusion::LossConfig;
use crate::mpsa::MpsaConfig;
use crate::saccade::SamplerParams;

/// Reference source side at which `nms_sigma` is calibrated; other source
/// sizes rescale the kernel proportionally.
pub const SIGMA_REFERENCE_SIDE: f64 = 512.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    Uniform,
    CenterBiased,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Priority-map sampling with learned fixation weights.
    Saccadic,
    /// No fixations: plain training on the peripheral view.
    Peripheral,
    /// Uniform-random fixation positions with uniform pooling weights.
    Random,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Saccadic => "saccadic",
            TrainMode::Peripheral => "peripheral",
            TrainMode::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // dataset
    pub canvas_side: usize,
    pub glyph_side: usize,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub clutter_density: f64,
    pub placement: Placement,
    pub data_seed: u64,
    /// Directory-per-class pixmap dataset; empty selects the generator.
    pub data_dir: String,
    // model
    pub input_side: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub stage_channels: Vec<usize>,
    pub parts: Vec<usize>,
    pub disable_position_bias: bool,
    // sampler
    pub n_train: usize,
    pub n_test: usize,
    pub temperature: f64,
    pub nms_sigma: f64,
    pub nms_strength: f64,
    pub squared_kernel: bool,
    // fusion and losses
    pub boltzmann_temperature: f64,
    pub lambda_per: f64,
    pub lambda_fix: f64,
    pub confidence_penalty: f64,
    pub printed_penalty_sign: bool,
    pub label_smoothing: f64,
    // training
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub early_stop_patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            canvas_side: 256,
            glyph_side: 16,
            classes: 10,
            train_per_class: 50,
            test_per_class: 20,
            clutter_density: 0.0004,
            placement: Placement::Uniform,
            data_seed: 7,
            data_dir: String::new(),
            input_side: 32,
            in_channels: 1,
            patch_size: 2,
            stage_channels: vec![16, 32],
            parts: vec![8, 8],
            disable_position_bias: false,
            n_train: 4,
            n_test: 4,
            temperature: 0.1,
            nms_sigma: 50.0,
            nms_strength: 0.95,
            squared_kernel: false,
            boltzmann_temperature: 0.1,
            lambda_per: 0.5,
            lambda_fix: 0.5,
            confidence_penalty: 0.1,
            printed_penalty_sign: false,
            label_smoothing: 0.1,
            mode: TrainMode::Saccadic,
            epochs: 40,
            batch_size: 20,
            learning_rate: 0.05,
            warmup_epochs: 5,
            weight_decay: 0.001,
            momentum: 0.9,
            early_stop_patience: 10,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $field:ident : $kind:ident),+ $(,)?) => {
        impl RunConfig {
            /// Applies one `key = value` assignment.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => { self.$field = parse_value!($kind, key, value)?; Ok(()) })+
                    _ => Err(Error::Config(format!("unknown config key '{key}'"))),
                }
            }

            /// Deterministic text form; parsing it back reproduces the config.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", $key, render_value!($kind, &self.$field)));)+
                out
            }
        }
    };
}

macro_rules! parse_value {
    (usize, $key:expr, $v:expr) => {
        $v.parse::<usize>()
            .map_err(|_| Error::Config(format!("{}: expected integer, got '{}'", $key, $v)))
    };
    (u64, $key:expr, $v:expr) => {
        $v.parse::<u64>()
            .map_err(|_| Error::Config(format!("{}: expected integer, got '{}'", $key, $v)))
    };
    (f64, $key:expr, $v:expr) => {
        $v.parse::<f64>()
            .map_err(|_| Error::Config(format!("{}: expected number, got '{}'", $key, $v)))
    };
    (bool, $key:expr, $v:expr) => {
        match $v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(Error::Config(format!("{}: expected true/false, got '{}'", $key, $v))),
        }
    };
    (string, $key:expr, $v:expr) => {
        Ok::<String, Error>($v.to_string())
    };
    (usize_list, $key:expr, $v:expr) => {
        $v.split(',')
            .map(|p| {
                p.trim().parse::<usize>().map_err(|_| {
                    Error::Config(format!("{}: expected comma-separated integers, got '{}'", $key, $v))
                })
            })
            .collect::<Result<Vec<usize>>>()
    };
    (placement, $key:expr, $v:expr) => {
        match $v {
            "uniform" => Ok(Placement::Uniform),
            "center" => Ok(Placement::CenterBiased),
            _ => Err(Error::Config(format!("{}: expected uniform|center, got '{}'", $key, $v))),
        }
    };
    (mode, $key:expr, $v:expr) => {
        match $v {
            "saccadic" => Ok(TrainMode::Saccadic),
            "peripheral" => Ok(TrainMode::Peripheral),
            "random" => Ok(TrainMode::Random),
            _ => Err(Error::Config(format!(
                "{}: expected saccadic|peripheral|random, got '{}'",
                $key, $v
            ))),
        }
    };
}

macro_rules! render_value {
    (usize, $v:expr) => {
        format!("{}", $v)
    };
    (u64, $v:expr) => {
        format!("{}", $v)
    };
    (f64, $v:expr) => {
        format!("{}", $v)
    };
    (bool, $v:expr) => {
        format!("{}", $v)
    };
    (string, $v:expr) => {
        $v.to_string()
    };
    (usize_list, $v:expr) => {
        $v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
    };
    (placement, $v:expr) => {
        match $v {
            Placement::Uniform => "uniform".to_string(),
            Placement::CenterBiased => "center".to_string(),
        }
    };
    (mode, $v:expr) => {
        $v.as_str().to_string()
    };
}

config_keys! {
    "canvas_side" => canvas_side: usize,
    "glyph_side" => glyph_side: usize,
    "classes" => classes: usize,
    "train_per_class" => train_per_class: usize,
    "test_per_class" => test_per_class: usize,
    "clutter_density" => clutter_density: f64,
    "placement" => placement: placement,
    "data_seed" => data_seed: u64,
    "data_dir" => data_dir: string,
    "input_side" => input_side: usize,
    "in_channels" => in_channels: usize,
    "patch_size" => patch_size: usize,
    "stage_channels" => stage_channels: usize_list,
    "parts" => parts: usize_list,
    "disable_position_bias" => disable_position_bias: bool,
    "n_train" => n_train: usize,
    "n_test" => n_test: usize,
    "temperature" => temperature: f64,
    "nms_sigma" => nms_sigma: f64,
    "nms_strength" => nms_strength: f64,
    "squared_kernel" => squared_kernel: bool,
    "boltzmann_temperature" => boltzmann_temperature: f64,
    "lambda_per" => lambda_per: f64,
    "lambda_fix" => lambda_fix: f64,
    "confidence_penalty" => confidence_penalty: f64,
    "printed_penalty_sign" => printed_penalty_sign: bool,
    "label_smoothing" => label_smoothing: f64,
    "mode" => mode: mode,
    "epochs" => epochs: usize,
    "batch_size" => batch_size: usize,
    "learning_rate" => learning_rate: f64,
    "warmup_epochs" => warmup_epochs: usize,
    "weight_decay" => weight_decay: f64,
    "momentum" => momentum: f64,
    "early_stop_patience" => early_stop_patience: usize,
    "val_fraction" => val_fraction: f64,
    "seed" => seed: u64,
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.glyph_side == 0 || self.glyph_side % 4 != 0 {
            return Err(Error::Config("glyph_side must be a positive multiple of 4".into()));
        }
        if self.glyph_side + 16 > self.canvas_side {
            return Err(Error::Config("glyph must fit the canvas with margin".into()));
        }
        if self.input_side > self.canvas_side {
            return Err(Error::Config(
                "input_side (the fixation window) cannot exceed the canvas".into(),
            ));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.stage_channels.len() != self.parts.len() {
            return Err(Error::Config("stage_channels and parts must have equal length".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        self.backbone_config().validate()?;
        self.loss_config().validate()?;
        self.sampler_params(0, self.n_train.max(self.n_test)).validate()?;
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            input_side: self.input_side,
            in_channels: self.in_channels,
            patch_size: self.patch_size,
            stage_channels: self.stage_channels.clone(),
        }
    }

    pub fn mpsa_config(&self) -> MpsaConfig {
        MpsaConfig {
            parts: self.parts.clone(),
            num_classes: self.classes,
            disable_position_bias: self.disable_position_bias,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_per: self.lambda_per,
            lambda_fix: self.lambda_fix,
            confidence_penalty: self.confidence_penalty,
            num_classes: self.classes,
            label_smoothing: self.label_smoothing,
            printed_penalty_sign: self.printed_penalty_sign,
        }
    }

    /// Sampler parameters with sigma rescaled from the 512px reference to
    /// this config's source size.
    pub fn sampler_params(&self, seed: u64, fixations: usize) -> SamplerParams {
        SamplerParams {
            temperature: self.temperature,
            nms_sigma: (self.nms_sigma * self.canvas_side as f64 / SIGMA_REFERENCE_SIDE).max(1e-6),
            nms_strength: self.nms_strength,
            squared_kernel: self.squared_kernel,
            fixations,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_lossless() {
        let mut cfg = RunConfig::default();
        cfg.stage_channels = vec![8, 16, 24];
        cfg.parts = vec![4, 4, 4];
        cfg.placement = Placement::CenterBiased;
        cfg.mode = TrainMode::Random;
        cfg.learning_rate = 0.0125;
        let parsed = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        assert!(matches!(
            RunConfig::parse("nonsense = 4\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("# a comment\n\nepochs = 3 # trailing\n").unwrap();
        assert_eq!(cfg.epochs, 3);
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::parse("epochs = banana\n").is_err());
        assert!(RunConfig::parse("placement = sideways\n").is_err());
        assert!(RunConfig::parse("mode = hover\n").is_err());
        assert!(RunConfig::parse("nms_strength = 1.5\n").is_err());
        assert!(RunConfig::parse("input_side = 512\n").is_err());
    }

    #[test]
    fn sigma_rescales_with_canvas() {
        let cfg = RunConfig::default();
        let p = cfg.sampler_params(0, 4);
        assert!((p.nms_sigma - 25.0).abs() < 1e-12, "256/512 of 50");
    }
}
