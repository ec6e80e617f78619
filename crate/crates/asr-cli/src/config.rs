//! The flat `section.key = value` run configuration.
//!
//! Every tunable of the pipeline lives here with a typed default; a
//! config file (and `--set` flags, which win) override them. Unknown
//! keys are rejected. The same keys travel inside checkpoint metadata
//! so that `eval` and `transcribe` rebuild the exact model and front
//! end they were trained with.

use std::collections::BTreeMap;
use std::path::Path;

use asr_core::augment::{AugmentPolicy, MaskFill};
use asr_core::dataset::{VocabUnit, Vocabulary};
use asr_core::features::{FrameConfig, WindowKind};
use asr_core::model::{Arch, CheckpointMeta, ConvSpec, ModelConfig};
use asr_core::optim::{OptHyper, TrainOptions};

use crate::CliError;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub window: WindowKind,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_epsilon: f64,

    pub n_freq_masks: usize,
    pub max_freq_width: usize,
    pub n_time_masks: usize,
    pub max_time_width: usize,
    pub fill: MaskFill,

    pub arch: Arch,
    pub blocks: usize,
    pub sub_blocks: usize,
    pub channels: usize,
    pub kernels: Vec<usize>,
    pub dropout: f64,
    pub prologue_kernel: usize,
    pub prologue_stride: usize,
    pub epilogue_channels: usize,
    pub epilogue_kernel: usize,
    pub epilogue_dilation: usize,

    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,

    pub unit: VocabUnit,
    pub n_utterances: usize,
    pub n_speakers: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub noise_amplitude: f64,
    pub fractions: (f64, f64, f64),
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            win_length: 400,
            hop_length: 160,
            n_fft: 512,
            window: WindowKind::Hann,
            n_mels: 64,
            f_min: 0.0,
            f_max: 8000.0,
            log_epsilon: 1e-10,

            n_freq_masks: 1,
            max_freq_width: 8,
            n_time_masks: 1,
            max_time_width: 10,
            fill: MaskFill::Zero,

            arch: Arch::Quartznet,
            blocks: 2,
            sub_blocks: 1,
            channels: 32,
            kernels: vec![11, 13, 15, 17],
            dropout: 0.0,
            prologue_kernel: 11,
            prologue_stride: 2,
            epilogue_channels: 64,
            epilogue_kernel: 29,
            epilogue_dilation: 2,

            learning_rate: 0.001,
            weight_decay: 0.001,
            beta1: 0.95,
            beta2: 0.5,
            epsilon: 1e-8,
            batch_size: 8,
            epochs: 5,

            unit: VocabUnit::Char,
            n_utterances: 20,
            n_speakers: 4,
            min_tokens: 2,
            max_tokens: 4,
            noise_amplitude: 0.01,
            fractions: (0.6, 0.2, 0.2),
        }
    }
}

fn window_str(w: WindowKind) -> &'static str {
    match w {
        WindowKind::Hann => "hann",
        WindowKind::Rectangular => "rectangular",
    }
}

fn fill_str(f: MaskFill) -> &'static str {
    match f {
        MaskFill::Zero => "zero",
        MaskFill::UtteranceMean => "mean",
    }
}

fn unit_str(u: VocabUnit) -> &'static str {
    match u {
        VocabUnit::Char => "char",
        VocabUnit::Word => "word",
    }
}

fn kernels_str(kernels: &[usize]) -> String {
    kernels
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Every key with its current value and a one-line description.
    pub fn entries(&self) -> Vec<(&'static str, String, &'static str)> {
        vec![
            ("audio.sample_rate", self.sample_rate.to_string(), "pipeline sample rate in Hz; inputs are resampled to it"),
            ("features.win_length", self.win_length.to_string(), "analysis window in samples"),
            ("features.hop_length", self.hop_length.to_string(), "hop between frames in samples"),
            ("features.n_fft", self.n_fft.to_string(), "FFT size, a power of two >= win_length"),
            ("features.window", window_str(self.window).into(), "window function: hann | rectangular"),
            ("features.n_mels", self.n_mels.to_string(), "mel bands per frame"),
            ("features.f_min", self.f_min.to_string(), "filterbank lower edge in Hz"),
            ("features.f_max", self.f_max.to_string(), "filterbank upper edge in Hz"),
            ("features.log_epsilon", self.log_epsilon.to_string(), "floor added before the log"),
            ("augment.n_freq_masks", self.n_freq_masks.to_string(), "frequency masks per utterance"),
            ("augment.max_freq_width", self.max_freq_width.to_string(), "max mel rows per frequency mask"),
            ("augment.n_time_masks", self.n_time_masks.to_string(), "time masks per utterance"),
            ("augment.max_time_width", self.max_time_width.to_string(), "max frames per time mask"),
            ("augment.fill", fill_str(self.fill).into(), "mask fill: zero | mean"),
            ("model.arch", self.arch.as_str().into(), "block convolution flavor: jasper | quartznet"),
            ("model.blocks", self.blocks.to_string(), "number of residual blocks (B)"),
            ("model.sub_blocks", self.sub_blocks.to_string(), "sub-blocks per block (R)"),
            ("model.channels", self.channels.to_string(), "channels in the prologue and every block"),
            ("model.kernels", kernels_str(&self.kernels), "block kernel widths, cycled across blocks"),
            ("model.dropout", self.dropout.to_string(), "dropout rate in every stage"),
            ("model.prologue_kernel", self.prologue_kernel.to_string(), "prologue conv kernel width"),
            ("model.prologue_stride", self.prologue_stride.to_string(), "prologue conv stride"),
            ("model.epilogue_channels", self.epilogue_channels.to_string(), "channels in the epilogue convs"),
            ("model.epilogue_kernel", self.epilogue_kernel.to_string(), "kernel width of the dilated epilogue conv"),
            ("model.epilogue_dilation", self.epilogue_dilation.to_string(), "dilation of the first epilogue conv"),
            ("optim.learning_rate", self.learning_rate.to_string(), "NovoGrad learning rate"),
            ("optim.weight_decay", self.weight_decay.to_string(), "decoupled weight decay on conv weights"),
            ("optim.beta1", self.beta1.to_string(), "first-moment decay"),
            ("optim.beta2", self.beta2.to_string(), "second-moment decay"),
            ("optim.epsilon", self.epsilon.to_string(), "denominator stabilizer"),
            ("optim.batch_size", self.batch_size.to_string(), "utterances per step; the gradient is their mean"),
            ("optim.epochs", self.epochs.to_string(), "training epochs"),
            ("data.unit", unit_str(self.unit).into(), "vocabulary unit: char | word"),
            ("data.n_utterances", self.n_utterances.to_string(), "synthetic utterances to generate"),
            ("data.n_speakers", self.n_speakers.to_string(), "synthetic speakers, assigned round-robin"),
            ("data.min_tokens", self.min_tokens.to_string(), "fewest tokens per synthetic utterance"),
            ("data.max_tokens", self.max_tokens.to_string(), "most tokens per synthetic utterance"),
            ("data.noise_amplitude", self.noise_amplitude.to_string(), "uniform noise added to synthetic audio"),
            ("data.fractions", format!("{},{},{}", self.fractions.0, self.fractions.1, self.fractions.2), "train,dev,test speaker fractions"),
        ]
    }

    /// Sets one key from its string form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let usage = |msg: String| CliError::Usage(msg);
        let bad = |key: &str, value: &str, what: &str| {
            CliError::Usage(format!("config key {key}: cannot parse {value:?} as {what}"))
        };
        macro_rules! parse {
            ($what:literal) => {
                value.parse().map_err(|_| bad(key, value, $what))?
            };
        }
        match key {
            "audio.sample_rate" => self.sample_rate = parse!("a positive integer"),
            "features.win_length" => self.win_length = parse!("an integer"),
            "features.hop_length" => self.hop_length = parse!("an integer"),
            "features.n_fft" => self.n_fft = parse!("an integer"),
            "features.window" => {
                self.window = match value {
                    "hann" => WindowKind::Hann,
                    "rectangular" => WindowKind::Rectangular,
                    _ => return Err(bad(key, value, "hann | rectangular")),
                }
            }
            "features.n_mels" => self.n_mels = parse!("an integer"),
            "features.f_min" => self.f_min = parse!("a number"),
            "features.f_max" => self.f_max = parse!("a number"),
            "features.log_epsilon" => self.log_epsilon = parse!("a number"),
            "augment.n_freq_masks" => self.n_freq_masks = parse!("an integer"),
            "augment.max_freq_width" => self.max_freq_width = parse!("an integer"),
            "augment.n_time_masks" => self.n_time_masks = parse!("an integer"),
            "augment.max_time_width" => self.max_time_width = parse!("an integer"),
            "augment.fill" => {
                self.fill = match value {
                    "zero" => MaskFill::Zero,
                    "mean" => MaskFill::UtteranceMean,
                    _ => return Err(bad(key, value, "zero | mean")),
                }
            }
            "model.arch" => self.arch = Arch::parse(value).map_err(|e| usage(e.to_string()))?,
            "model.blocks" => self.blocks = parse!("an integer"),
            "model.sub_blocks" => self.sub_blocks = parse!("an integer"),
            "model.channels" => self.channels = parse!("an integer"),
            "model.kernels" => {
                let kernels: Result<Vec<usize>, _> =
                    value.split(',').map(|p| p.trim().parse()).collect();
                self.kernels = kernels.map_err(|_| bad(key, value, "a list like 11,13,15"))?;
                if self.kernels.is_empty() {
                    return Err(usage(format!("config key {key}: need at least one kernel")));
                }
            }
            "model.dropout" => self.dropout = parse!("a number"),
            "model.prologue_kernel" => self.prologue_kernel = parse!("an integer"),
            "model.prologue_stride" => self.prologue_stride = parse!("an integer"),
            "model.epilogue_channels" => self.epilogue_channels = parse!("an integer"),
            "model.epilogue_kernel" => self.epilogue_kernel = parse!("an integer"),
            "model.epilogue_dilation" => self.epilogue_dilation = parse!("an integer"),
            "optim.learning_rate" => self.learning_rate = parse!("a number"),
            "optim.weight_decay" => self.weight_decay = parse!("a number"),
            "optim.beta1" => self.beta1 = parse!("a number"),
            "optim.beta2" => self.beta2 = parse!("a number"),
            "optim.epsilon" => self.epsilon = parse!("a number"),
            "optim.batch_size" => self.batch_size = parse!("an integer"),
            "optim.epochs" => self.epochs = parse!("an integer"),
            "data.unit" => {
                self.unit = match value {
                    "char" => VocabUnit::Char,
                    "word" => VocabUnit::Word,
                    _ => return Err(bad(key, value, "char | word")),
                }
            }
            "data.n_utterances" => self.n_utterances = parse!("an integer"),
            "data.n_speakers" => self.n_speakers = parse!("an integer"),
            "data.min_tokens" => self.min_tokens = parse!("an integer"),
            "data.max_tokens" => self.max_tokens = parse!("an integer"),
            "data.noise_amplitude" => self.noise_amplitude = parse!("a number"),
            "data.fractions" => {
                let parts: Result<Vec<f64>, _> = value.split(',').map(|p| p.trim().parse()).collect();
                match parts.map_err(|_| bad(key, value, "three numbers like 0.6,0.2,0.2"))?[..] {
                    [a, b, c] => self.fractions = (a, b, c),
                    _ => return Err(bad(key, value, "three numbers like 0.6,0.2,0.2")),
                }
            }
            other => return Err(usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a config file of `key = value` lines. `#` starts a comment.
    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "{}:{}: expected `key = value`, got {raw:?}",
                    path.display(),
                    idx + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies `--set key=value` overrides (these win over the file).
    pub fn apply_sets(&mut self, sets: &[String]) -> Result<(), CliError> {
        for s in sets {
            let (key, value) = s.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("--set expects KEY=VALUE, got {s:?}"))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn frame_config(&self) -> FrameConfig {
        FrameConfig {
            win_length: self.win_length,
            hop_length: self.hop_length,
            n_fft: self.n_fft,
            window: self.window,
            n_mels: self.n_mels,
            f_min: self.f_min,
            f_max: self.f_max,
            log_epsilon: self.log_epsilon,
        }
    }

    pub fn augment_policy(&self) -> AugmentPolicy {
        AugmentPolicy {
            n_freq_masks: self.n_freq_masks,
            max_freq_width: self.max_freq_width,
            n_time_masks: self.n_time_masks,
            max_time_width: self.max_time_width,
            fill: self.fill,
        }
    }

    pub fn model_config(&self, n_outputs: usize) -> ModelConfig {
        let stage = |channels: usize, kernel: usize| ConvSpec {
            channels,
            kernel,
            stride: 1,
            dilation: 1,
            dropout: self.dropout,
        };
        ModelConfig {
            arch: self.arch,
            n_mels: self.n_mels,
            n_outputs,
            prologue: ConvSpec {
                stride: self.prologue_stride,
                ..stage(self.channels, self.prologue_kernel)
            },
            blocks: (0..self.blocks)
                .map(|b| stage(self.channels, self.kernels[b % self.kernels.len()]))
                .collect(),
            sub_blocks: self.sub_blocks,
            epilogue: vec![
                ConvSpec {
                    dilation: self.epilogue_dilation,
                    ..stage(self.epilogue_channels, self.epilogue_kernel)
                },
                stage(self.epilogue_channels, 1),
            ],
        }
    }

    pub fn synth_spec(&self, seed: u64) -> asr_core::audio::SynthSpec {
        asr_core::audio::SynthSpec {
            n_utterances: self.n_utterances,
            tokens_per_utterance: (self.min_tokens, self.max_tokens),
            noise_amplitude: self.noise_amplitude,
            seed,
            n_speakers: self.n_speakers,
            sample_rate: self.sample_rate,
            ..asr_core::audio::SynthSpec::default()
        }
    }

    pub fn train_options(&self, seed: u64, augment: bool) -> TrainOptions {
        TrainOptions {
            hp: OptHyper {
                learning_rate: self.learning_rate,
                weight_decay: self.weight_decay,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            augment: augment.then(|| self.augment_policy()),
        }
    }

    /// The `--help` appendix listing every key and its default.
    pub fn help_text() -> String {
        let defaults = RunConfig::default();
        let width = defaults
            .entries()
            .iter()
            .map(|(k, v, _)| k.len() + v.len())
            .max()
            .unwrap_or(0);
        let mut out = String::from(
            "Configuration keys (set via --config FILE with `key = value` lines,\n\
             or --set KEY=VALUE; --set wins). Defaults shown:\n\n",
        );
        for (key, value, help) in defaults.entries() {
            let pad = width + 3 - key.len() - value.len();
            out.push_str(&format!("  {key} = {value}{:pad$}{help}\n", ""));
        }
        out
    }
}

/// Everything `eval`/`transcribe` must reconstruct from a checkpoint.
pub struct TrainedArtifacts {
    pub model_config: ModelConfig,
    pub frame_config: FrameConfig,
    pub vocab: Vocabulary,
    pub augment: bool,
}

/// Serializes the model/front-end description and vocabulary into
/// checkpoint metadata.
pub fn to_meta(config: &RunConfig, vocab: &Vocabulary, augment: bool, seed: u64) -> CheckpointMeta {
    let mut meta = BTreeMap::new();
    for (key, value, _) in config.entries() {
        if key.starts_with("model.") || key.starts_with("features.") || key == "audio.sample_rate" {
            meta.insert(key.to_string(), value);
        }
    }
    meta.insert("vocab.unit".into(), unit_str(vocab.unit()).into());
    meta.insert(
        "vocab.tokens".into(),
        serde_json::to_string(vocab.tokens()).expect("tokens serialize"),
    );
    meta.insert("train.augment".into(), augment.to_string());
    meta.insert("train.seed".into(), seed.to_string());
    meta
}

/// Rebuilds the artifacts recorded by [`to_meta`].
pub fn from_meta(meta: &CheckpointMeta) -> Result<TrainedArtifacts, CliError> {
    let missing = |key: &str| CliError::Data(format!("checkpoint metadata is missing {key:?}"));
    let mut config = RunConfig::default();
    for (key, value) in meta {
        if key.starts_with("model.") || key.starts_with("features.") || key == "audio.sample_rate" {
            config.set(key, value).map_err(|_| {
                CliError::Data(format!("checkpoint metadata has bad value for {key:?}: {value:?}"))
            })?;
        }
    }
    let unit = match meta.get("vocab.unit").ok_or_else(|| missing("vocab.unit"))?.as_str() {
        "char" => VocabUnit::Char,
        "word" => VocabUnit::Word,
        other => return Err(CliError::Data(format!("bad vocab.unit {other:?} in checkpoint"))),
    };
    let tokens: Vec<String> =
        serde_json::from_str(meta.get("vocab.tokens").ok_or_else(|| missing("vocab.tokens"))?)
            .map_err(|e| CliError::Data(format!("bad vocab.tokens in checkpoint: {e}")))?;
    let vocab = Vocabulary::new(unit, tokens);
    let augment = meta.get("train.augment").is_some_and(|v| v == "true");
    Ok(TrainedArtifacts {
        model_config: config.model_config(vocab.n_outputs()),
        frame_config: config.frame_config(),
        vocab,
        augment,
    })
}
