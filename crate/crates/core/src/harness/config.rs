use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::Reduction;
use crate::encoder::DEFAULT_GCN_LAYERS;
use crate::error::{Error, Result};
use crate::evalsuite::BleuOptions;
use crate::fusion::FusionStrategy;
use crate::generator::tokenizer::EOS;
use crate::generator::BeamConfig;
use crate::model::ModelConfig;
use crate::templates::INSTRUCTION;

/// Every knob of a run. Serialized as flat `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    // data
    pub n_samples: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub cooccurrence_boost: f64,
    pub noise_std: f64,
    pub signature_scale: f64,
    pub graph_file: Option<PathBuf>,
    // model
    pub patches: usize,
    pub patch_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub gcn_layers: usize,
    pub allow_gcn_override: bool,
    pub decoder_layers: usize,
    pub max_context: usize,
    pub fusion: FusionStrategy,
    pub use_gcn: bool,
    pub instruction: String,
    // optimization
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss_reduction: Reduction,
    // decoding and scoring
    pub beam_width: usize,
    pub max_gen_len: usize,
    pub length_norm: bool,
    pub bleu_smoothing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_samples: 704,
            train_ratio: 8.0 / 11.0,
            val_ratio: 1.0 / 11.0,
            test_ratio: 2.0 / 11.0,
            cooccurrence_boost: 3.0,
            noise_std: 0.5,
            signature_scale: 1.0,
            graph_file: None,
            patches: 16,
            patch_dim: 32,
            d_model: 128,
            heads: 4,
            gcn_layers: DEFAULT_GCN_LAYERS,
            allow_gcn_override: false,
            decoder_layers: 2,
            max_context: 128,
            fusion: FusionStrategy::Modality,
            use_gcn: true,
            instruction: INSTRUCTION.to_string(),
            lr: 1e-4,
            batch_size: 8,
            epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss_reduction: Reduction::Mean,
            beam_width: 3,
            max_gen_len: 80,
            length_norm: false,
            bleu_smoothing: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

/// Accepts plain decimals and `a/b` fractions.
fn parse_ratio(key: &str, value: &str) -> Result<f64> {
    match value.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (parse_num(key, a.trim())?, parse_num(key, b.trim())?);
            if b == 0.0 {
                return Err(Error::Config(format!("{key}: zero denominator")));
            }
            Ok(a / b)
        }
        None => parse_num(key, value),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 31] = [
        "seed",
        "n_samples",
        "train_ratio",
        "val_ratio",
        "test_ratio",
        "cooccurrence_boost",
        "noise_std",
        "signature_scale",
        "graph_file",
        "patches",
        "patch_dim",
        "d_model",
        "heads",
        "gcn_layers",
        "allow_gcn_override",
        "decoder_layers",
        "max_context",
        "fusion",
        "use_gcn",
        "instruction",
        "lr",
        "batch_size",
        "epochs",
        "beta1",
        "beta2",
        "adam_eps",
        "loss_reduction",
        "beam_width",
        "max_gen_len",
        "length_norm",
        "bleu_smoothing",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "n_samples" => self.n_samples = parse_num(key, v)?,
            "train_ratio" => self.train_ratio = parse_ratio(key, v)?,
            "val_ratio" => self.val_ratio = parse_ratio(key, v)?,
            "test_ratio" => self.test_ratio = parse_ratio(key, v)?,
            "cooccurrence_boost" => self.cooccurrence_boost = parse_num(key, v)?,
            "noise_std" => self.noise_std = parse_num(key, v)?,
            "signature_scale" => self.signature_scale = parse_num(key, v)?,
            "graph_file" => self.graph_file = (!v.is_empty()).then(|| PathBuf::from(v)),
            "patches" => self.patches = parse_num(key, v)?,
            "patch_dim" => self.patch_dim = parse_num(key, v)?,
            "d_model" => self.d_model = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "gcn_layers" => self.gcn_layers = parse_num(key, v)?,
            "allow_gcn_override" => self.allow_gcn_override = parse_bool(key, v)?,
            "decoder_layers" => self.decoder_layers = parse_num(key, v)?,
            "max_context" => self.max_context = parse_num(key, v)?,
            "fusion" => self.fusion = v.parse()?,
            "use_gcn" => self.use_gcn = parse_bool(key, v)?,
            "instruction" => self.instruction = v.to_string(),
            "lr" => self.lr = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "beta1" => self.beta1 = parse_num(key, v)?,
            "beta2" => self.beta2 = parse_num(key, v)?,
            "adam_eps" => self.adam_eps = parse_num(key, v)?,
            "loss_reduction" => {
                self.loss_reduction = match v {
                    "mean" => Reduction::Mean,
                    "sum" => Reduction::Sum,
                    _ => return Err(Error::Config(format!("loss_reduction: expected mean or sum, got {v:?}"))),
                }
            }
            "beam_width" => self.beam_width = parse_num(key, v)?,
            "max_gen_len" => self.max_gen_len = parse_num(key, v)?,
            "length_norm" => self.length_norm = parse_bool(key, v)?,
            "bleu_smoothing" => self.bleu_smoothing = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let b = |v: bool| v.to_string();
        vec![
            ("seed", self.seed.to_string()),
            ("n_samples", self.n_samples.to_string()),
            ("train_ratio", format!("{:?}", self.train_ratio)),
            ("val_ratio", format!("{:?}", self.val_ratio)),
            ("test_ratio", format!("{:?}", self.test_ratio)),
            ("cooccurrence_boost", format!("{:?}", self.cooccurrence_boost)),
            ("noise_std", format!("{:?}", self.noise_std)),
            ("signature_scale", format!("{:?}", self.signature_scale)),
            (
                "graph_file",
                self.graph_file.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("patches", self.patches.to_string()),
            ("patch_dim", self.patch_dim.to_string()),
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("gcn_layers", self.gcn_layers.to_string()),
            ("allow_gcn_override", b(self.allow_gcn_override)),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("max_context", self.max_context.to_string()),
            ("fusion", self.fusion.to_string()),
            ("use_gcn", b(self.use_gcn)),
            ("instruction", self.instruction.clone()),
            ("lr", format!("{:?}", self.lr)),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("adam_eps", format!("{:?}", self.adam_eps)),
            (
                "loss_reduction",
                match self.loss_reduction {
                    Reduction::Mean => "mean".into(),
                    Reduction::Sum => "sum".into(),
                },
            ),
            ("beam_width", self.beam_width.to_string()),
            ("max_gen_len", self.max_gen_len.to_string()),
            ("length_norm", b(self.length_norm)),
            ("bleu_smoothing", b(self.bleu_smoothing)),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Keys whose values differ between two configs.
    pub fn diff(&self, other: &TrainConfig) -> Vec<&'static str> {
        self.entries()
            .into_iter()
            .zip(other.entries())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, _)| a.0)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ratios = [self.train_ratio, self.val_ratio, self.test_ratio];
        if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam hyperparameters out of range".into()));
        }
        if self.cooccurrence_boost <= 0.0 || self.noise_std < 0.0 {
            return Err(Error::Config("cooccurrence_boost must be positive and noise_std nonnegative".into()));
        }
        if self.patches == 0 || self.patch_dim == 0 || self.d_model == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        self.beam().validate()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            patches: self.patches,
            patch_dim: self.patch_dim,
            d_model: self.d_model,
            heads: self.heads,
            gcn_layers: self.gcn_layers,
            allow_gcn_override: self.allow_gcn_override,
            decoder_layers: self.decoder_layers,
            max_context: self.max_context,
            fusion: self.fusion,
            use_gcn: self.use_gcn,
            instruction: self.instruction.clone(),
        }
    }

    pub fn beam(&self) -> BeamConfig {
        BeamConfig {
            width: self.beam_width,
            max_len: self.max_gen_len,
            length_norm: self.length_norm,
            eos: EOS,
        }
    }

    pub fn bleu(&self) -> BleuOptions {
        BleuOptions {
            smoothing: self.bleu_smoothing,
        }
    }
}
