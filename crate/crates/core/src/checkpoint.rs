//! Single-file checkpoints: a text header naming every tensor, followed by the
//! tensor payloads as little-endian `f64`.
//!
//! ```text
//! deconvnmt-checkpoint 1
//! epoch 3
//! step 375
//! adam 375 0.001 0.9 0.98 1e-9
//! history 12.5 40.25 61
//! config model.emb_dim = 64
//! vocab.src the
//! vocab.tgt der
//! tensor src_embed 1004x64
//! tensor adam.m.src_embed 1004x64
//! end
//! ```

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::{Vocabulary, RESERVED};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Adam;
use crate::tensor::Tensor;

const MAGIC: &str = "deconvnmt-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub params: Vec<(String, Tensor)>,
    pub adam: Option<Adam>,
    pub epoch: usize,
    pub step: u64,
    /// Validation BLEU after each finished epoch.
    pub history: Vec<f64>,
}

impl Checkpoint {
    pub fn capture(
        model: &Model,
        adam: Option<&Adam>,
        config: &RunConfig,
        src_vocab: &Vocabulary,
        tgt_vocab: &Vocabulary,
        epoch: usize,
        history: &[f64],
    ) -> Self {
        Checkpoint {
            config: config.clone(),
            src_vocab: src_vocab.clone(),
            tgt_vocab: tgt_vocab.clone(),
            params: model.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            adam: adam.cloned(),
            epoch,
            step: adam.map_or(0, |a| a.step),
            history: history.to_vec(),
        }
    }

    /// Rebuilds the model described by the stored configuration and loads the weights.
    pub fn model(&self) -> Result<Model> {
        let mc = self.config.model_config(self.src_vocab.len(), self.tgt_vocab.len());
        let mut model = Model::new(mc, 0)?;
        if model.store.len() != self.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "configuration expects {} tensors, checkpoint holds {}",
                model.store.len(),
                self.params.len()
            )));
        }
        model.store.load_values(self.params.clone())?;
        if let Some(adam) = &self.adam {
            adam.check_against(&model.store)?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC} {VERSION}\nepoch {}\nstep {}\n", self.epoch, self.step);
        if let Some(a) = &self.adam {
            header.push_str(&format!("adam {} {:?} {:?} {:?} {:?}\n", a.step, a.lr, a.beta1, a.beta2, a.eps));
        }
        header.push_str("history");
        for b in &self.history {
            header.push_str(&format!(" {b:?}"));
        }
        header.push('\n');
        for line in self.config.to_text().lines() {
            header.push_str(&format!("config {line}\n"));
        }
        for (key, vocab) in [("vocab.src", &self.src_vocab), ("vocab.tgt", &self.tgt_vocab)] {
            for t in &vocab.tokens()[RESERVED.len()..] {
                header.push_str(&format!("{key} {t}\n"));
            }
        }
        let mut tensors: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        if let Some(a) = &self.adam {
            for ((name, _), (m, v)) in self.params.iter().zip(a.m.iter().zip(&a.v)) {
                tensors.push((format!("adam.m.{name}"), m));
                tensors.push((format!("adam.v.{name}"), v));
            }
        }
        for (name, t) in &tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor {name} {}\n", dims.join("x")));
        }
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        for (_, t) in &tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("checkpoint: {m}"));
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let len = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            pos += len + 1;
            std::str::from_utf8(&rest[..len]).map_err(|_| bad("header is not UTF-8".into()))
        };
        let first = next_line()?;
        if first != format!("{MAGIC} {VERSION}") {
            return Err(bad(format!("unsupported header {first:?}")));
        }
        let (mut epoch, mut step) = (0, 0);
        let mut adam_header: Option<(u64, [f64; 4])> = None;
        let mut history = Vec::new();
        let mut config_text = String::new();
        let (mut src_words, mut tgt_words) = (Vec::new(), Vec::new());
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            let num = |v: &str| v.parse::<u64>().map_err(|_| bad(format!("bad number in {line:?}")));
            match key {
                "epoch" => epoch = num(rest)? as usize,
                "step" => step = num(rest)?,
                "adam" => {
                    let mut it = rest.split_whitespace();
                    let s = num(it.next().unwrap_or(""))?;
                    let mut h = [0.0; 4];
                    for slot in &mut h {
                        *slot = it
                            .next()
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| bad(format!("bad optimizer line {line:?}")))?;
                    }
                    adam_header = Some((s, h));
                }
                "history" => {
                    history = rest
                        .split_whitespace()
                        .map(|v| v.parse().map_err(|_| bad(format!("bad history value {v:?}"))))
                        .collect::<Result<_>>()?
                }
                "config" => {
                    config_text.push_str(rest);
                    config_text.push('\n');
                }
                "vocab.src" => src_words.push(rest.to_string()),
                "vocab.tgt" => tgt_words.push(rest.to_string()),
                "tensor" => {
                    let (name, dims) = rest.rsplit_once(' ').ok_or_else(|| bad(format!("bad tensor line {line:?}")))?;
                    let dims = dims
                        .split('x')
                        .map(|d| d.parse().map_err(|_| bad(format!("bad shape in {line:?}"))))
                        .collect::<Result<Vec<usize>>>()?;
                    shapes.push((name.to_string(), dims));
                }
                _ => return Err(bad(format!("unknown header line {line:?}"))),
            }
        }
        let mut tensors = Vec::with_capacity(shapes.len());
        for (name, dims) in shapes {
            let n: usize = dims.iter().product();
            let end = pos + 8 * n;
            if end > bytes.len() {
                return Err(bad(format!("payload truncated in {name}")));
            }
            let data = bytes[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            pos = end;
            tensors.push((name, Tensor::new(&dims, data)?));
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        let config = RunConfig::parse(&config_text)?;
        let (moments, params): (Vec<_>, Vec<_>) = tensors.into_iter().partition(|(n, _)| n.starts_with("adam."));
        let adam = match adam_header {
            None => None,
            Some((s, [lr, beta1, beta2, eps])) => {
                let find = |prefix: &str, name: &str| {
                    let key = format!("{prefix}{name}");
                    moments
                        .iter()
                        .find(|(n, _)| *n == key)
                        .map(|(_, t)| t.clone())
                        .ok_or_else(|| Error::CheckpointMismatch(format!("missing optimizer tensor {key}")))
                };
                Some(Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    step: s,
                    m: params.iter().map(|(n, _)| find("adam.m.", n)).collect::<Result<_>>()?,
                    v: params.iter().map(|(n, _)| find("adam.v.", n)).collect::<Result<_>>()?,
                })
            }
        };
        Ok(Checkpoint {
            config,
            src_vocab: Vocabulary::from_words(src_words)?,
            tgt_vocab: Vocabulary::from_words(tgt_words)?,
            params,
            adam,
            epoch,
            step,
            history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
