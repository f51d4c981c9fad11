//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::Regression;
use crate::data::SynthKind;
use crate::deconv::{DeconvConfig, DeconvLayerSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Environment variable that overrides `train.seed`.
pub const SEED_ENV: &str = "DECONVDEC_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub emb_dim: usize,
    pub hidden: usize,
    pub target_len: usize,
    /// `None` means three `4/2/1/emb_dim` layers.
    pub deconv_layers: Option<Vec<DeconvLayerSpec>>,
    pub deconv_enabled: bool,
    pub regression: Regression,

    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub patience: usize,
    pub target_bleu: Option<f64>,
    pub seed: u64,

    pub max_len: usize,
    pub vocab_cap: usize,
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub valid_src: Option<PathBuf>,
    pub valid_tgt: Option<PathBuf>,

    pub beam: usize,
    pub output_dir: PathBuf,

    pub synth_kind: Option<SynthKind>,
    pub synth_vocab: usize,
    pub synth_pairs: usize,
    pub synth_valid_pairs: usize,
    pub synth_max_len: usize,
}

impl Default for RunConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        RunConfig {
            emb_dim: 64,
            hidden: 64,
            target_len: 12,
            deconv_layers: None,
            deconv_enabled: true,
            regression: Regression::SmoothL1,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            clip: 10.0,
            dropout: 0.1,
            epochs: 30,
            patience: 5,
            target_bleu: None,
            seed: 1,
            max_len: 50,
            vocab_cap: 1000,
            train_src: None,
            train_tgt: None,
            valid_src: None,
            valid_tgt: None,
            beam: 10,
            output_dir: PathBuf::from("run"),
            synth_kind: None,
            synth_vocab: 20,
            synth_pairs: 2000,
            synth_valid_pairs: 200,
            synth_max_len: 10,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

/// `k/s/p/f` per layer, comma separated.
pub fn parse_layers(value: &str) -> Result<Vec<DeconvLayerSpec>> {
    value
        .split(',')
        .map(|layer| {
            let parts: Vec<&str> = layer.trim().split('/').collect();
            let [k, s, p, f] = parts.as_slice() else {
                return Err(Error::Config(format!("deconv.layers: {layer:?} is not k/s/p/f")));
            };
            Ok(DeconvLayerSpec::new(
                parse_num("deconv.layers", k)?,
                parse_num("deconv.layers", s)?,
                parse_num("deconv.layers", p)?,
                parse_num("deconv.layers", f)?,
            ))
        })
        .collect()
}

fn format_layers(layers: &[DeconvLayerSpec]) -> String {
    layers
        .iter()
        .map(|l| format!("{}/{}/{}/{}", l.kernel, l.stride, l.padding, l.filters))
        .collect::<Vec<_>>()
        .join(",")
}

fn regression_name(r: Regression) -> &'static str {
    match r {
        Regression::SmoothL1 => "smooth_l1",
        Regression::L1 => "l1",
        Regression::L2 => "l2",
    }
}

impl RunConfig {
    /// Dimensions and schedule of the large-scale setup: 512-wide model,
    /// `T = 30` from four `4/2/1/512` layers (2, 4, 8, 16, 32, cropped).
    pub fn large() -> Self {
        RunConfig {
            emb_dim: 512,
            hidden: 512,
            target_len: 30,
            deconv_layers: Some(vec![DeconvLayerSpec::new(4, 2, 1, 512); 4]),
            batch_size: 64,
            lr: 3e-4,
            dropout: 0.3,
            vocab_cap: 30000,
            ..Self::default()
        }
    }

    pub fn deconv(&self) -> DeconvConfig {
        match &self.deconv_layers {
            Some(layers) => DeconvConfig {
                layers: layers.clone(),
                target_len: self.target_len,
            },
            None => DeconvConfig::standard(self.emb_dim, self.target_len),
        }
    }

    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            emb_dim: self.emb_dim,
            hidden: self.hidden,
            deconv: self.deconv(),
            use_deconv: self.deconv_enabled,
            regression: self.regression,
        }
    }

    /// Parses `key = value` lines. `#` starts a comment. A `preset` key
    /// (`desk` or `large`) selects the base values wherever it appears.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match entries.iter().find(|(k, _)| k == "preset").map(|(_, v)| v.as_str()) {
            None | Some("desk") => RunConfig::default(),
            Some("large") => RunConfig::large(),
            Some(other) => return Err(Error::Config(format!("preset: unknown preset {other:?} (desk, large)"))),
        };
        for (k, v) in &entries {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = |v: &str| Some(PathBuf::from(v));
        match key {
            "model.emb_dim" => self.emb_dim = parse_num(key, value)?,
            "model.hidden" => self.hidden = parse_num(key, value)?,
            "deconv.target_len" => self.target_len = parse_num(key, value)?,
            "deconv.layers" => self.deconv_layers = Some(parse_layers(value)?),
            "deconv.enabled" => self.deconv_enabled = parse_bool(key, value)?,
            "train.regression" => {
                self.regression = match value {
                    "smooth_l1" => Regression::SmoothL1,
                    "l1" => Regression::L1,
                    "l2" => Regression::L2,
                    _ => return Err(Error::Config(format!("{key}: expected smooth_l1, l1 or l2, got {value:?}"))),
                }
            }
            "train.batch_size" => self.batch_size = parse_num(key, value)?,
            "train.lr" => self.lr = parse_num(key, value)?,
            "train.beta1" => self.beta1 = parse_num(key, value)?,
            "train.beta2" => self.beta2 = parse_num(key, value)?,
            "train.eps" => self.adam_eps = parse_num(key, value)?,
            "train.clip" => self.clip = parse_num(key, value)?,
            "train.dropout" => self.dropout = parse_num(key, value)?,
            "train.epochs" => self.epochs = parse_num(key, value)?,
            "train.patience" => self.patience = parse_num(key, value)?,
            "train.target_bleu" => {
                self.target_bleu = if value == "none" { None } else { Some(parse_num(key, value)?) }
            }
            "train.seed" => self.seed = parse_num(key, value)?,
            "data.max_len" => self.max_len = parse_num(key, value)?,
            "data.vocab_cap" => self.vocab_cap = parse_num(key, value)?,
            "data.train_src" => self.train_src = path(value),
            "data.train_tgt" => self.train_tgt = path(value),
            "data.valid_src" => self.valid_src = path(value),
            "data.valid_tgt" => self.valid_tgt = path(value),
            "decode.beam" => self.beam = parse_num(key, value)?,
            "output.dir" => self.output_dir = PathBuf::from(value),
            "precision" => {
                if value != "f64" {
                    return Err(Error::Config(format!("precision: only f64 is supported, got {value:?}")));
                }
            }
            "synth.kind" => self.synth_kind = Some(value.parse()?),
            "synth.vocab" => self.synth_vocab = parse_num(key, value)?,
            "synth.pairs" => self.synth_pairs = parse_num(key, value)?,
            "synth.valid_pairs" => self.synth_valid_pairs = parse_num(key, value)?,
            "synth.max_len" => self.synth_max_len = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.emb_dim", self.emb_dim),
            ("model.hidden", self.hidden),
            ("train.batch_size", self.batch_size),
            ("data.max_len", self.max_len),
            ("data.vocab_cap", self.vocab_cap),
            ("decode.beam", self.beam),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("train.dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.lr > 0.0 && self.clip > 0.0 && self.adam_eps > 0.0) {
            return Err(Error::Config("train.lr, train.clip and train.eps must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("train.beta1 and train.beta2 must be in [0, 1)".into()));
        }
        self.deconv().validate(self.emb_dim)?;
        Ok(())
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse_num(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    /// Every key with its current value, in a form [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("writing to a string");
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        put("model.emb_dim", self.emb_dim.to_string());
        put("model.hidden", self.hidden.to_string());
        put("deconv.target_len", self.target_len.to_string());
        put("deconv.layers", format_layers(&self.deconv().layers));
        put("deconv.enabled", self.deconv_enabled.to_string());
        put("train.regression", regression_name(self.regression).to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.lr", format!("{:?}", self.lr));
        put("train.beta1", format!("{:?}", self.beta1));
        put("train.beta2", format!("{:?}", self.beta2));
        put("train.eps", format!("{:?}", self.adam_eps));
        put("train.clip", format!("{:?}", self.clip));
        put("train.dropout", format!("{:?}", self.dropout));
        put("train.epochs", self.epochs.to_string());
        put("train.patience", self.patience.to_string());
        put("train.target_bleu", self.target_bleu.map_or("none".into(), |b| format!("{b:?}")));
        put("train.seed", self.seed.to_string());
        put("data.max_len", self.max_len.to_string());
        put("data.vocab_cap", self.vocab_cap.to_string());
        for (k, v) in [
            ("data.train_src", &self.train_src),
            ("data.train_tgt", &self.train_tgt),
            ("data.valid_src", &self.valid_src),
            ("data.valid_tgt", &self.valid_tgt),
        ] {
            if let Some(p) = opt_path(v) {
                put(k, p);
            }
        }
        put("decode.beam", self.beam.to_string());
        put("output.dir", self.output_dir.display().to_string());
        put("precision", "f64".into());
        if let Some(k) = self.synth_kind {
            put("synth.kind", k.to_string());
        }
        put("synth.vocab", self.synth_vocab.to_string());
        put("synth.pairs", self.synth_pairs.to_string());
        put("synth.valid_pairs", self.synth_valid_pairs.to_string());
        put("synth.max_len", self.synth_max_len.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_desk_scale() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!((c.emb_dim, c.hidden, c.target_len, c.batch_size, c.vocab_cap), (64, 64, 12, 16, 1000));
        assert_eq!((c.lr, c.beta1, c.beta2, c.adam_eps, c.clip, c.beam), (1e-3, 0.9, 0.98, 1e-9, 10.0, 10));
        assert_eq!(c.deconv().layer_lengths().unwrap(), vec![4, 8, 16]);
    }

    #[test]
    fn large_preset() {
        let c = RunConfig::parse("preset = large\n").unwrap();
        assert_eq!((c.emb_dim, c.batch_size, c.lr, c.target_len, c.vocab_cap), (512, 64, 3e-4, 30, 30000));
        assert_eq!(c.deconv().layer_lengths().unwrap(), vec![4, 8, 16, 32]);
    }

    #[test]
    fn round_trip() {
        let text = "model.emb_dim = 8 # small\nmodel.hidden=6\ndeconv.layers = 3/1/0/5, 4/2/1/8\ndeconv.target_len=6\ntrain.target_bleu=95\ndata.train_src=a b.txt\nsynth.kind=reverse\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.deconv().layer_lengths().unwrap(), vec![4, 8]);
        assert_eq!(c.train_src, Some(PathBuf::from("a b.txt")));
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap().deconv(), RunConfig::default().deconv());
    }

    #[test]
    fn rejections() {
        for bad in [
            "model.size = 3",
            "train.lr = fast",
            "no equals sign",
            "precision = f32",
            "deconv.target_len = 17",
            "deconv.layers = 4/2/1",
            "deconv.layers = 4/2/1/32",
            "train.dropout = 1.0",
            "decode.beam = 0",
            "preset = huge",
        ] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
