//! Helpers shared by the integration tests: tiny model configurations and a
//! plain `f64` re-implementation of the forward pass.

#![allow(dead_code)]

use lexcon::constraints::ConstraintSet;
use lexcon::model::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BOS: usize = 1;
pub const EOS: usize = 2;

pub fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_size: 16,
        vocab_size: vocab,
        dropout: 0.0,
        max_len: 32,
        attn_integration: true,
        output_integration: true,
    }
}

pub fn tiny_model(vocab: usize, seed: u64) -> Model {
    Model::new(tiny_config(vocab), seed).unwrap()
}

/// Random content tokens, avoiding the three reserved ids.
pub fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(3..vocab)).collect()
}

pub fn random_set(rng: &mut ChaCha8Rng, vocab: usize, n: usize) -> ConstraintSet {
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..n)
        .map(|_| {
            let ls = rng.random_range(1..=3);
            let lt = rng.random_range(1..=3);
            (random_tokens(rng, vocab, ls), random_tokens(rng, vocab, lt))
        })
        .collect();
    let refs: Vec<(&[usize], &[usize])> =
        pairs.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
    ConstraintSet::from_ids(&refs).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

type Col = Vec<f64>;

/// Row-major matrix copied out of a model parameter.
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn apply(&self, x: &[f64]) -> Col {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self.data[i * self.cols + j] * x[j]).sum())
            .collect()
    }

    /// `xᵀ M` for a row vector `x`.
    fn left(&self, x: &[f64]) -> Col {
        assert_eq!(x.len(), self.rows);
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| x[i] * self.data[i * self.cols + j]).sum())
            .collect()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Col {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn relu(a: Col) -> Col {
    a.into_iter().map(|v| v.max(0.0)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(x: &[f64]) -> Col {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Col = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Independent double-precision evaluation of a [`Model`], one sentence at
/// a time, written directly from the architecture description.
pub struct Reference<'a> {
    model: &'a Model,
    d: usize,
}

struct AttnW {
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
}

impl<'a> Reference<'a> {
    pub fn new(model: &'a Model) -> Self {
        Reference {
            model,
            d: model.config().d_model,
        }
    }

    fn mat(&self, name: &str) -> Mat {
        let store = self.model.params();
        let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let t = store.get(id);
        let (rows, cols) = if t.rank() == 1 { (t.numel(), 1) } else { (t.rows(), t.cols()) };
        Mat {
            rows,
            cols,
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    fn vec(&self, name: &str) -> Col {
        self.mat(name).data
    }

    fn attn_w(&self, prefix: &str) -> AttnW {
        AttnW {
            wq: self.mat(&format!("{prefix}.wq")),
            wk: self.mat(&format!("{prefix}.wk")),
            wv: self.mat(&format!("{prefix}.wv")),
            wo: self.mat(&format!("{prefix}.wo")),
        }
    }

    fn position(&self, pos: usize) -> Col {
        let d = self.d;
        (0..d)
            .map(|i| {
                let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                if i % 2 == 0 { angle.sin() } else { angle.cos() }
            })
            .collect()
    }

    /// Scaled word embedding plus the position counted from 0.
    pub fn embed(&self, tokens: &[usize]) -> Vec<Col> {
        let e = self.mat("embed");
        let s = (self.d as f64).sqrt();
        tokens
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                let w: Col = e.row(t).iter().map(|v| v * s).collect();
                add(&w, &self.position(k))
            })
            .collect()
    }

    fn norm(&self, prefix: &str, x: &[Col]) -> Vec<Col> {
        let (g, b) = (self.vec(&format!("{prefix}.g")), self.vec(&format!("{prefix}.b")));
        x.iter()
            .map(|c| {
                let n = c.len() as f64;
                let mean = c.iter().sum::<f64>() / n;
                let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + 1e-5).sqrt();
                c.iter()
                    .enumerate()
                    .map(|(i, v)| g[i] * (v - mean) * inv + b[i])
                    .collect()
            })
            .collect()
    }

    fn ffn(&self, prefix: &str, x: &[Col]) -> Vec<Col> {
        let (w1, b1) = (self.mat(&format!("{prefix}.w1")), self.vec(&format!("{prefix}.b1")));
        let (w2, b2) = (self.mat(&format!("{prefix}.w2")), self.vec(&format!("{prefix}.b2")));
        x.iter()
            .map(|c| {
                let h = relu(add(&w1.apply(c), &b1));
                add(&w2.apply(&h), &b2)
            })
            .collect()
    }

    fn adapt(&self, prefix: &str, x: &[Col]) -> Vec<Col> {
        let (w1, w2) = (self.mat(&format!("{prefix}.w1")), self.mat(&format!("{prefix}.w2")));
        x.iter().map(|c| w2.apply(&relu(w1.apply(c)))).collect()
    }

    /// Multi-head attention; query `i` sees keys `0..visible(i)`.
    fn attention(
        &self,
        w: &AttnW,
        q: &[Col],
        k: &[Col],
        v: &[Col],
        visible: impl Fn(usize) -> usize,
    ) -> Vec<Col> {
        let heads = self.model.config().heads;
        let dh = self.d / heads;
        let kp: Vec<Col> = k.iter().map(|c| w.wk.apply(c)).collect();
        let vp: Vec<Col> = v.iter().map(|c| w.wv.apply(c)).collect();
        q.iter()
            .enumerate()
            .map(|(i, qc)| {
                let qp = w.wq.apply(qc);
                let n = visible(i);
                let mut out = vec![0.0; self.d];
                for h in 0..heads {
                    let r = h * dh..(h + 1) * dh;
                    let scores: Col = kp[..n]
                        .iter()
                        .map(|kc| dot(&qp[r.clone()], &kc[r.clone()]) / (dh as f64).sqrt())
                        .collect();
                    let a = softmax(&scores);
                    for (aj, vc) in a.iter().zip(&vp) {
                        for x in r.clone() {
                            out[x] += aj * vc[x];
                        }
                    }
                }
                w.wo.apply(&out)
            })
            .collect()
    }

    /// `(K_c, V_c)` as column lists.
    pub fn constraint_kv(&self, set: &ConstraintSet) -> (Vec<Col>, Vec<Col>) {
        let align = self.attn_w("align");
        let (mut keys, mut values) = (Vec::new(), Vec::new());
        for p in set.pairs() {
            let s = self.embed(&p.source_tokens);
            let t = self.embed(&p.target_tokens);
            values.extend(self.attention(&align, &s, &t, &t, |_| t.len()));
            keys.extend(s);
        }
        (keys, values)
    }

    fn memory(&self, prefix: &str, kv: &(Vec<Col>, Vec<Col>), m: &[Col]) -> (Vec<Col>, Vec<Col>) {
        if !self.model.config().attn_integration {
            return (m.to_vec(), m.to_vec());
        }
        let mut k = self.adapt(&format!("{prefix}.adapt_k"), &kv.0);
        let mut v = self.adapt(&format!("{prefix}.adapt_v"), &kv.1);
        k.extend_from_slice(m);
        v.extend_from_slice(m);
        (k, v)
    }

    pub fn encode(&self, source: &[usize], set: &ConstraintSet) -> Vec<Col> {
        let kv = self.constraint_kv(set);
        let mut h = self.embed(source);
        for i in 0..self.model.config().enc_layers {
            let p = format!("enc.{i}");
            let z = self.norm(&format!("{p}.ln1"), &h);
            let (mk, mv) = self.memory(&p, &kv, &z);
            let a = self.attention(&self.attn_w(&format!("{p}.self")), &z, &mk, &mv, |_| mk.len());
            h = h.iter().zip(&a).map(|(x, y)| add(x, y)).collect();
            let z = self.norm(&format!("{p}.ln2"), &h);
            let f = self.ffn(&format!("{p}.ffn"), &z);
            h = h.iter().zip(&f).map(|(x, y)| add(x, y)).collect();
        }
        self.norm("enc.ln", &h)
    }

    /// Final decoder states for the input sequence `inputs` (which starts
    /// with `<s>`).
    pub fn decode(&self, enc: &[Col], set: &ConstraintSet, inputs: &[usize]) -> Vec<Col> {
        let kv = self.constraint_kv(set);
        let mut h = self.embed(inputs);
        for j in 0..self.model.config().dec_layers {
            let p = format!("dec.{j}");
            let z = self.norm(&format!("{p}.ln1"), &h);
            let a = self.attention(&self.attn_w(&format!("{p}.self")), &z, &z, &z, |i| i + 1);
            h = h.iter().zip(&a).map(|(x, y)| add(x, y)).collect();
            let z = self.norm(&format!("{p}.ln2"), &h);
            let (mk, mv) = self.memory(&p, &kv, enc);
            let c = self.attention(&self.attn_w(&format!("{p}.cross")), &z, &mk, &mv, |_| mk.len());
            h = h.iter().zip(&c).map(|(x, y)| add(x, y)).collect();
            let z = self.norm(&format!("{p}.ln3"), &h);
            let f = self.ffn(&format!("{p}.ffn"), &z);
            h = h.iter().zip(&f).map(|(x, y)| add(x, y)).collect();
        }
        self.norm("dec.ln", &h)
    }

    pub fn gate(&self, y: usize, h: &[f64]) -> f64 {
        let e = self.mat("embed");
        let (w1, w2, w3) = (self.mat("gate.w1"), self.mat("gate.w2"), self.vec("gate.w3"));
        let a: Col = w1.left(e.row(y)).into_iter().map(f64::tanh).collect();
        let b: Col = w2.left(h).into_iter().map(f64::tanh).collect();
        sigmoid(dot(&a, &w3[..self.d]) + dot(&b, &w3[self.d..]))
    }

    /// Next-token distribution for decoder state `h`.
    pub fn output(&self, h: &[f64], set: &ConstraintSet) -> Col {
        let e = self.mat("embed");
        let vocab = e.rows;
        let logits: Col = (0..vocab).map(|y| dot(e.row(y), h)).collect();
        let p = softmax(&logits);
        if !self.model.config().output_integration {
            return p;
        }
        let cons = set.target_token_set();
        let hn = dot(h, h).sqrt();
        let mix: Col = (0..vocab)
            .map(|y| {
                let g = self.gate(y, h);
                let plug = if cons.contains(&y) {
                    let w = e.row(y);
                    (dot(w, h) / (dot(w, w).sqrt() * hn)).max(0.0)
                } else {
                    0.0
                };
                (1.0 - g) * p[y] + g * plug
            })
            .collect();
        let s: f64 = mix.iter().sum();
        mix.into_iter().map(|v| v / s).collect()
    }

    /// Distributions after every prefix of `[<s>] + target`.
    pub fn teacher_forced(&self, source: &[usize], set: &ConstraintSet, target: &[usize]) -> Vec<Col> {
        let enc = self.encode(source, set);
        let inputs: Vec<usize> = std::iter::once(BOS).chain(target.iter().copied()).collect();
        self.decode(&enc, set, &inputs)
            .iter()
            .map(|h| self.output(h, set))
            .collect()
    }
}

/// The weighted, label-smoothed training loss evaluated by [`Reference`].
pub fn reference_loss(model: &Model, ex: &lexcon::model::Example, alpha: f64, beta: f64, eps: f64) -> f64 {
    let probs = Reference::new(model).teacher_forced(&ex.source, &ex.constraints, &ex.target);
    let cons = ex.constraints.target_token_set();
    let gold = ex.target.iter().copied().chain(std::iter::once(EOS));
    let v = probs[0].len() as f64;
    probs
        .iter()
        .zip(gold)
        .map(|(p, y)| {
            let w = if cons.contains(&y) { alpha } else { beta };
            let smooth: f64 = p.iter().map(|q| q.ln()).sum::<f64>() / v;
            -w * ((1.0 - eps) * p[y].ln() + eps * smooth)
        })
        .sum()
}
