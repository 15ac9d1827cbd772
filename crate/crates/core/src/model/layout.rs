use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{ParamGroup, ParamId, ParamStore, Tensor};

use super::ModelConfig;

#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Two `d × d` maps with a ReLU between them.
#[derive(Clone, Copy, Debug)]
pub struct AdaptIds {
    pub w1: ParamId,
    pub w2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct EncLayerIds {
    pub ln1: NormIds,
    pub self_attn: AttnIds,
    pub ln2: NormIds,
    pub ffn: FfnIds,
    pub adapt_k: AdaptIds,
    pub adapt_v: AdaptIds,
}

#[derive(Clone, Copy, Debug)]
pub struct DecLayerIds {
    pub ln1: NormIds,
    pub self_attn: AttnIds,
    pub ln2: NormIds,
    pub cross: AttnIds,
    pub ln3: NormIds,
    pub ffn: FfnIds,
    pub adapt_k: AdaptIds,
    pub adapt_v: AdaptIds,
}

#[derive(Clone, Copy, Debug)]
pub struct GateIds {
    pub w1: ParamId,
    pub w2: ParamId,
    /// `2d × 1`; the first `d` rows weight the token term.
    pub w3: ParamId,
}

/// Handles to every tensor of the model inside its [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Layout {
    /// `|V| × d`, shared by source, target and constraint lookups and
    /// transposed as the output embedding matrix.
    pub embed: ParamId,
    pub enc: Vec<EncLayerIds>,
    pub enc_ln: NormIds,
    pub dec: Vec<DecLayerIds>,
    pub dec_ln: NormIds,
    pub align: AttnIds,
    pub gate: GateIds,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f32) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f32, std).expect("positive std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    fn xavier(&mut self, rows: usize, cols: usize) -> Tensor {
        self.normal(&[rows, cols], (2.0 / (rows + cols) as f32).sqrt())
    }
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    init: Init,
    d: usize,
}

impl Builder<'_> {
    fn add(&mut self, name: String, t: Tensor, group: ParamGroup) -> ParamId {
        self.store.add(name, t, group)
    }

    fn matrix(&mut self, name: String, rows: usize, cols: usize, group: ParamGroup) -> ParamId {
        let t = self.init.xavier(rows, cols);
        self.add(name, t, group)
    }

    fn attn(&mut self, prefix: &str, group: ParamGroup) -> AttnIds {
        let d = self.d;
        AttnIds {
            wq: self.matrix(format!("{prefix}.wq"), d, d, group),
            wk: self.matrix(format!("{prefix}.wk"), d, d, group),
            wv: self.matrix(format!("{prefix}.wv"), d, d, group),
            wo: self.matrix(format!("{prefix}.wo"), d, d, group),
        }
    }

    fn norm(&mut self, prefix: &str) -> NormIds {
        let d = self.d;
        NormIds {
            gain: self.add(format!("{prefix}.g"), Tensor::full(&[d], 1.0), ParamGroup::Base),
            bias: self.add(format!("{prefix}.b"), Tensor::zeros(&[d]), ParamGroup::Base),
        }
    }

    fn ffn(&mut self, prefix: &str, hidden: usize) -> FfnIds {
        let d = self.d;
        FfnIds {
            w1: self.matrix(format!("{prefix}.w1"), hidden, d, ParamGroup::Base),
            b1: self.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden]), ParamGroup::Base),
            w2: self.matrix(format!("{prefix}.w2"), d, hidden, ParamGroup::Base),
            b2: self.add(format!("{prefix}.b2"), Tensor::zeros(&[d]), ParamGroup::Base),
        }
    }

    fn adapt(&mut self, prefix: &str) -> AdaptIds {
        let d = self.d;
        AdaptIds {
            w1: self.matrix(format!("{prefix}.w1"), d, d, ParamGroup::Constraint),
            w2: self.matrix(format!("{prefix}.w2"), d, d, ParamGroup::Constraint),
        }
    }
}

impl Layout {
    /// Registers freshly initialised tensors for `config` in `store`.
    pub fn build(config: &ModelConfig, store: &mut ParamStore, seed: u64) -> Layout {
        let d = config.d_model;
        let v = config.vocab_size;
        let mut b = Builder {
            store,
            init: Init {
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
            d,
        };
        // Lookups are scaled by sqrt(d), so inputs start at unit variance.
        let embed_t = b.init.normal(&[v, d], (d as f32).powf(-0.5));
        let embed = b.add("embed".into(), embed_t, ParamGroup::Base);
        let enc = (0..config.enc_layers)
            .map(|i| EncLayerIds {
                ln1: b.norm(&format!("enc.{i}.ln1")),
                self_attn: b.attn(&format!("enc.{i}.self"), ParamGroup::Base),
                ln2: b.norm(&format!("enc.{i}.ln2")),
                ffn: b.ffn(&format!("enc.{i}.ffn"), config.ffn_size),
                adapt_k: b.adapt(&format!("enc.{i}.adapt_k")),
                adapt_v: b.adapt(&format!("enc.{i}.adapt_v")),
            })
            .collect();
        let enc_ln = b.norm("enc.ln");
        let dec = (0..config.dec_layers)
            .map(|j| DecLayerIds {
                ln1: b.norm(&format!("dec.{j}.ln1")),
                self_attn: b.attn(&format!("dec.{j}.self"), ParamGroup::Base),
                ln2: b.norm(&format!("dec.{j}.ln2")),
                cross: b.attn(&format!("dec.{j}.cross"), ParamGroup::Base),
                ln3: b.norm(&format!("dec.{j}.ln3")),
                ffn: b.ffn(&format!("dec.{j}.ffn"), config.ffn_size),
                adapt_k: b.adapt(&format!("dec.{j}.adapt_k")),
                adapt_v: b.adapt(&format!("dec.{j}.adapt_v")),
            })
            .collect();
        let dec_ln = b.norm("dec.ln");
        let align = b.attn("align", ParamGroup::Constraint);
        let gate = GateIds {
            w1: b.matrix("gate.w1".into(), d, d, ParamGroup::Constraint),
            w2: b.matrix("gate.w2".into(), d, d, ParamGroup::Constraint),
            // A small output weight keeps the untrained gate close to 0.5.
            w3: {
                let t = b.init.normal(&[2 * d, 1], 0.01);
                b.add("gate.w3".into(), t, ParamGroup::Constraint)
            },
        };
        Layout {
            embed,
            enc,
            enc_ln,
            dec,
            dec_ln,
            align,
            gate,
        }
    }
}
