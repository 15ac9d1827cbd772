use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};

use super::forward::CrossMemory;
use super::{Ctx, Model};

/// Encoder output for one sentence with everything the decoder needs,
/// detached from any graph.
#[derive(Clone, Debug)]
pub struct EncodedSource {
    pub h_enc: Tensor,
    mem_k: Vec<Tensor>,
    mem_v: Vec<Tensor>,
    /// Sorted, deduplicated constraint target tokens.
    pub constraint_tokens: Vec<usize>,
}

/// Read-only decoding helper that caches the vocabulary-wide gate term.
pub struct Inference<'m> {
    model: &'m Model,
    gate_vocab: Option<Tensor>,
    continues: Vec<bool>,
}

impl Model {
    pub fn encode_source(&self, source: &[usize], set: &ConstraintSet) -> Result<EncodedSource> {
        let mut g = Graph::new();
        let mut ctx = Ctx::eval();
        let kv = self.constraint_kv(&mut g, &[set], &mut ctx)?;
        let enc = self.encode_batch(&mut g, &[source], &kv, &mut ctx)?;
        let mems = self.cross_memories(&mut g, &enc, &kv)?;
        Ok(EncodedSource {
            h_enc: g.value(enc.h).clone(),
            mem_k: mems.iter().map(|m| g.value(m.k).clone()).collect(),
            mem_v: mems.iter().map(|m| g.value(m.v).clone()).collect(),
            constraint_tokens: set.target_token_set(),
        })
    }

    /// Final encoder states `d × |x|`.
    pub fn encoder_forward(&self, source: &[usize], set: &ConstraintSet) -> Result<Tensor> {
        Ok(self.encode_source(source, set)?.h_enc)
    }

    /// Decoder states `d × |y|` for a prefix that starts with `<s>`.
    pub fn decoder_forward(&self, enc: &EncodedSource, prefix: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let mems = enc.memories(&mut g);
        let h = self.decode_batch(&mut g, &[prefix], &[0], &mems, &mut Ctx::eval())?;
        Ok(g.value(h).clone())
    }

    /// The gate for one vocabulary embedding `w_y` and decoder state `h`.
    pub fn gate_value(&self, w_y: &[f32], h: &[f32]) -> Result<f32> {
        let d = self.config.d_model;
        if w_y.len() != d || h.len() != d {
            return Err(Error::dim("gate_value", &[w_y.len(), h.len()], &[d]));
        }
        let gate = &self.layout.gate;
        let w1 = self.params.get(gate.w1);
        let w2 = self.params.get(gate.w2);
        let w3 = self.params.get(gate.w3);
        let a = Tensor::new(&[1, d], w_y.to_vec())?.matmul(w1)?;
        let b = Tensor::new(&[1, d], h.to_vec())?.matmul(w2)?;
        let z: f32 = a
            .data()
            .iter()
            .chain(b.data())
            .zip(w3.data())
            .map(|(x, w)| x.tanh() * w)
            .sum();
        Ok(crate::numerics::sigmoid(z))
    }

    /// Next-token distribution for a single decoder state.
    pub fn output_distribution(&self, h: &[f32], set: &ConstraintSet) -> Result<Vec<f32>> {
        let d = self.config.d_model;
        let mut g = Graph::new();
        let hv = g.input(Tensor::new(&[d, 1], h.to_vec())?);
        let out = self.output_layer(&mut g, hv, &[set.target_token_set()], &[0], None)?;
        Ok(g.value(out.probs).data().to_vec())
    }

    pub fn inference(&self) -> Result<Inference<'_>> {
        let gate_vocab = if self.config.output_integration {
            let mut g = Graph::new();
            let a = self.gate_vocab_term(&mut g)?;
            Some(g.value(a).clone())
        } else {
            None
        };
        Ok(Inference {
            model: self,
            gate_vocab,
            continues: Vec::new(),
        })
    }
}

impl EncodedSource {
    fn memories(&self, g: &mut Graph) -> Vec<CrossMemory> {
        self.mem_k
            .iter()
            .zip(&self.mem_v)
            .map(|(k, v)| CrossMemory {
                k: g.input(k.clone()),
                v: g.input(v.clone()),
                blocks: vec![(0, k.cols())],
            })
            .collect()
    }

    pub fn source_len(&self) -> usize {
        self.h_enc.cols()
    }
}

impl Inference<'_> {
    pub fn model(&self) -> &Model {
        self.model
    }

    /// Marks vocabulary entries that continue into the next token, so that
    /// decoding counts constraint matches on whole words.
    pub fn with_word_pieces(mut self, continues: Vec<bool>) -> Self {
        self.continues = continues;
        self
    }

    pub fn continues_word(&self, token: usize) -> bool {
        self.continues.get(token).copied().unwrap_or(false)
    }

    /// Next-token distributions after each prefix, computed in one batch.
    pub fn next_token_probs(
        &self,
        enc: &EncodedSource,
        prefixes: &[&[usize]],
    ) -> Result<Vec<Vec<f32>>> {
        if prefixes.is_empty() {
            return Ok(Vec::new());
        }
        let m = self.model;
        let mut g = Graph::new();
        let mems = enc.memories(&mut g);
        let source_of = vec![0; prefixes.len()];
        let h = m.decode_batch(&mut g, prefixes, &source_of, &mems, &mut Ctx::eval())?;
        let mut last = Vec::with_capacity(prefixes.len());
        let mut off = 0;
        for p in prefixes {
            off += p.len();
            last.push(g.slice_cols(h, off - 1, 1)?);
        }
        let h = g.concat_cols(&last, m.config.d_model)?;
        let gate = self.gate_vocab.as_ref().map(|t| g.input(t.clone()));
        let rows = vec![0; prefixes.len()];
        let out = m.output_layer(
            &mut g,
            h,
            std::slice::from_ref(&enc.constraint_tokens),
            &rows,
            gate,
        )?;
        let probs = g.value(out.probs);
        Ok((0..prefixes.len()).map(|r| probs.row(r).to_vec()).collect())
    }
}
