use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::datapipe::ToyConfig;
use crate::decoding::{DecodeConfig, Decoder};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// Every tunable of a run. Built from a `key = value` file and `--set`
/// overrides; `seed` has no default.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub toy: ToyConfig,
    pub bpe_merges: i64,
    /// `vocab_size` is filled in from the subword model.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub switch_prob: f64,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

/// Splits `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected key = value, got {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut seed = None;
        let mut c = RunConfig {
            seed: 0,
            toy: ToyConfig::default(),
            bpe_merges: 500,
            model: ModelConfig::desk(0),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            switch_prob: 0.5,
        };
        for (k, v) in pairs {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "seed" => seed = Some(parse(k, v)?),
                "toy.vocab_size" => c.toy.vocab_size = parse(k, v)?,
                "toy.synonyms" => c.toy.synonyms = parse(k, v)?,
                "toy.sentences" => c.toy.sentences = parse(k, v)?,
                "toy.min_len" => c.toy.min_len = parse(k, v)?,
                "toy.max_len" => c.toy.max_len = parse(k, v)?,
                "toy.swap_rate" => c.toy.swap_rate = parse(k, v)?,
                "bpe.merges" => c.bpe_merges = parse(k, v)?,
                "model.d_model" => c.model.d_model = parse(k, v)?,
                "model.heads" => c.model.heads = parse(k, v)?,
                "model.enc_layers" => c.model.enc_layers = parse(k, v)?,
                "model.dec_layers" => c.model.dec_layers = parse(k, v)?,
                "model.ffn_size" => c.model.ffn_size = parse(k, v)?,
                "model.dropout" => c.model.dropout = parse(k, v)?,
                "model.max_len" => c.model.max_len = parse(k, v)?,
                "model.attn_integration" => c.model.attn_integration = parse(k, v)?,
                "model.output_integration" => c.model.output_integration = parse(k, v)?,
                "train.alpha" => c.train.alpha = parse(k, v)?,
                "train.beta" => c.train.beta = parse(k, v)?,
                "train.label_smoothing" => c.train.label_smoothing = parse(k, v)?,
                "train.adam_beta1" => c.train.adam_beta1 = parse(k, v)?,
                "train.adam_beta2" => c.train.adam_beta2 = parse(k, v)?,
                "train.adam_eps" => c.train.adam_eps = parse(k, v)?,
                "train.warmup_steps" => c.train.warmup_steps = parse(k, v)?,
                "train.stage1_steps" => c.train.stage1_steps = parse(k, v)?,
                "train.stage2_steps" => c.train.stage2_steps = parse(k, v)?,
                "train.batch_tokens" => c.train.batch_tokens = parse(k, v)?,
                "train.log_interval" => c.train.log_interval = parse(k, v)?,
                "train.clip_norm" => {
                    c.train.clip_norm = match v {
                        "none" => None,
                        _ => Some(parse(k, v)?),
                    }
                }
                "decode.decoder" => c.decode.decoder = Decoder::from_str(v)?,
                "decode.beam" => c.decode.beam = parse(k, v)?,
                "decode.max_len_a" => c.decode.max_len_a = parse(k, v)?,
                "decode.max_len_b" => c.decode.max_len_b = parse(k, v)?,
                "switch.prob" => c.switch_prob = parse(k, v)?,
                _ => return Err(Error::Config(format!("unknown config key {k:?}"))),
            }
        }
        c.seed = seed.ok_or_else(|| Error::Config("seed is required".into()))?;
        c.toy.seed = c.seed;
        c.train.seed = c.seed;
        c.train.validate()?;
        if c.decode.beam == 0 {
            return Err(Error::Config("decode.beam must be at least 1".into()));
        }
        Ok(c)
    }

    /// File values first, then overrides in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match file {
            Some(p) => parse_pairs(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    /// Every key with its effective value, loadable by [`from_pairs`](Self::from_pairs).
    pub fn to_text(&self) -> String {
        let (t, m, tr, d) = (&self.toy, &self.model, &self.train, &self.decode);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("toy.vocab_size", t.vocab_size.to_string());
        kv("toy.synonyms", t.synonyms.to_string());
        kv("toy.sentences", t.sentences.to_string());
        kv("toy.min_len", t.min_len.to_string());
        kv("toy.max_len", t.max_len.to_string());
        kv("toy.swap_rate", t.swap_rate.to_string());
        kv("bpe.merges", self.bpe_merges.to_string());
        kv("model.d_model", m.d_model.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.enc_layers", m.enc_layers.to_string());
        kv("model.dec_layers", m.dec_layers.to_string());
        kv("model.ffn_size", m.ffn_size.to_string());
        kv("model.dropout", m.dropout.to_string());
        kv("model.max_len", m.max_len.to_string());
        kv("model.attn_integration", m.attn_integration.to_string());
        kv("model.output_integration", m.output_integration.to_string());
        kv("train.alpha", tr.alpha.to_string());
        kv("train.beta", tr.beta.to_string());
        kv("train.label_smoothing", tr.label_smoothing.to_string());
        kv("train.adam_beta1", tr.adam_beta1.to_string());
        kv("train.adam_beta2", tr.adam_beta2.to_string());
        kv("train.adam_eps", tr.adam_eps.to_string());
        kv("train.warmup_steps", tr.warmup_steps.to_string());
        kv("train.stage1_steps", tr.stage1_steps.to_string());
        kv("train.stage2_steps", tr.stage2_steps.to_string());
        kv("train.batch_tokens", tr.batch_tokens.to_string());
        kv("train.log_interval", tr.log_interval.to_string());
        kv(
            "train.clip_norm",
            tr.clip_norm.map_or("none".into(), |c| c.to_string()),
        );
        let dec = match d.decoder {
            Decoder::Beam => "beam",
            Decoder::Vdba => "vdba",
        };
        kv("decode.decoder", dec.into());
        kv("decode.beam", d.beam.to_string());
        kv("decode.max_len_a", d.max_len_a.to_string());
        kv("decode.max_len_b", d.max_len_b.to_string());
        kv("switch.prob", self.switch_prob.to_string());
        s
    }
}
