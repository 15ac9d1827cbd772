use std::rc::Rc;

use rand::Rng;

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::numerics::{AttnSegment, Graph, Mask, SegmentMask, Tensor, Var, LAYER_NORM_EPS};

use super::layout::{AdaptIds, AttnIds, FfnIds, NormIds};
use super::{Ctx, Model};

/// One training or scoring example. `target` carries neither start nor end
/// markers.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub constraints: ConstraintSet,
}

/// Constraint keys and values for a batch of constraint sets, laid out set
/// after set in pair order.
pub struct BatchKv {
    pub keys: Var,
    pub values: Var,
    /// `(start, len)` column range of each set.
    pub spans: Vec<(usize, usize)>,
    /// `(start, len)` column range of each pair, flattened over sets.
    pub boundaries: Vec<(usize, usize)>,
}

pub struct EncodedBatch {
    /// Final normalised encoder states, `d × Σ|x|`.
    pub h: Var,
    /// `(start, len)` column range of each source sentence.
    pub spans: Vec<(usize, usize)>,
    /// Residual stream after every layer, before the final norm.
    pub layers: Vec<Var>,
}

/// Projected cross-attention keys and values for one decoder layer.
pub struct CrossMemory {
    pub k: Var,
    pub v: Var,
    /// `(start, len)` key range per source sentence.
    pub blocks: Vec<(usize, usize)>,
}

pub struct OutputTerms {
    /// Final next-token distribution, one row per state.
    pub probs: Var,
    pub model_probs: Var,
    pub gate: Option<Var>,
    /// Gated mixture before renormalisation.
    pub mixture: Option<Var>,
}

pub struct TeacherForced {
    pub out: OutputTerms,
    /// Gold next token for every row of `out.probs`.
    pub gold: Vec<usize>,
    /// Example index of every row.
    pub row_example: Vec<usize>,
}

fn spans_of<T>(seqs: &[T], len: impl Fn(&T) -> usize) -> Vec<(usize, usize)> {
    let mut off = 0;
    seqs.iter()
        .map(|s| {
            let l = len(s);
            let span = (off, l);
            off += l;
            span
        })
        .collect()
}

impl Model {
    fn p(&self, g: &mut Graph, id: crate::numerics::ParamId) -> Var {
        g.param(&self.params, id)
    }

    pub(crate) fn dropout(&self, g: &mut Graph, x: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
        let rate = self.config.dropout;
        let Some(rng) = ctx.rng.as_deref_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
            .collect();
        let mask = g.input(Tensor::new(&shape, data)?);
        g.mul(x, mask)
    }

    /// Word embeddings plus sinusoidal positions restarting at 0 for every
    /// sequence, laid out side by side.
    pub(crate) fn embed_seqs(&self, g: &mut Graph, seqs: &[&[usize]]) -> Result<Var> {
        let d = self.config.d_model;
        let total: usize = seqs.iter().map(|s| s.len()).sum();
        let mut pos = vec![0.0f32; d * total];
        let mut flat = Vec::with_capacity(total);
        let mut col = 0;
        for s in seqs {
            if s.len() > self.config.max_len {
                return Err(Error::Invalid(format!(
                    "sequence of length {} exceeds max_len {}",
                    s.len(),
                    self.config.max_len
                )));
            }
            for (k, &id) in s.iter().enumerate() {
                for (r, &v) in self.positions.row(k).iter().enumerate() {
                    pos[r * total + col] = v;
                }
                flat.push(id);
                col += 1;
            }
        }
        let table = self.p(g, self.layout.embed);
        let emb = g.embedding(table, &flat)?;
        let emb = g.scale(emb, (d as f32).sqrt());
        let pos = g.input(Tensor::new(&[d, total], pos)?);
        g.add(emb, pos)
    }

    fn norm(&self, g: &mut Graph, ids: NormIds, x: Var) -> Result<Var> {
        let gain = self.p(g, ids.gain);
        let bias = self.p(g, ids.bias);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }

    fn ffn(&self, g: &mut Graph, ids: FfnIds, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            self.p(g, ids.w1),
            self.p(g, ids.b1),
            self.p(g, ids.w2),
            self.p(g, ids.b2),
        );
        let h = g.matmul(w1, x)?;
        let h = g.add_col_bias(h, b1)?;
        let h = g.relu(h);
        let o = g.matmul(w2, h)?;
        g.add_col_bias(o, b2)
    }

    pub(crate) fn adapt(&self, g: &mut Graph, ids: AdaptIds, x: Var) -> Result<Var> {
        let (w1, w2) = (self.p(g, ids.w1), self.p(g, ids.w2));
        let h = g.matmul(w1, x)?;
        let h = g.relu(h);
        g.matmul(w2, h)
    }

    pub(crate) fn project_kv(&self, g: &mut Graph, ids: AttnIds, k: Var, v: Var) -> Result<(Var, Var)> {
        let (wk, wv) = (self.p(g, ids.wk), self.p(g, ids.wv));
        Ok((g.matmul(wk, k)?, g.matmul(wv, v)?))
    }

    /// Query projection, batched attention over pre-projected keys and
    /// values, and the output projection.
    pub(crate) fn attend(
        &self,
        g: &mut Graph,
        ids: AttnIds,
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<AttnSegment>,
    ) -> Result<Var> {
        let (wq, wo) = (self.p(g, ids.wq), self.p(g, ids.wo));
        let q = g.matmul(wq, q)?;
        let o = g.attention(q, k, v, self.config.heads, Rc::new(segments))?;
        g.matmul(wo, o)
    }

    /// Multi-head attention of `q` (`d × Lq`) over `k`, `v` (`d × Lk`),
    /// with an optional `Lq × Lk` mask.
    pub fn multi_head_attention(
        &self,
        g: &mut Graph,
        ids: AttnIds,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<Mask>,
    ) -> Result<Var> {
        let (lq, lk) = (g.shape(q)[1], g.shape(k)[1]);
        let mask = match mask {
            None => SegmentMask::Full,
            Some(m) if m.shape() == [lq, lk] => SegmentMask::Custom(Rc::new(m)),
            Some(m) => return Err(Error::dim("multi_head_attention", &m.shape(), &[lq, lk])),
        };
        let (k, v) = self.project_kv(g, ids, k, v)?;
        let seg = AttnSegment {
            q_start: 0,
            q_len: lq,
            k_start: 0,
            k_len: lk,
            mask,
        };
        self.attend(g, ids, q, k, v, vec![seg])
    }

    /// Vectorises every pair of every set and aligns target to source
    /// embeddings with the shared aligner, one pair at a time.
    pub fn constraint_kv(
        &self,
        g: &mut Graph,
        sets: &[&ConstraintSet],
        ctx: &mut Ctx<'_>,
    ) -> Result<BatchKv> {
        let pairs: Vec<_> = sets.iter().flat_map(|s| s.pairs()).collect();
        let src: Vec<&[usize]> = pairs.iter().map(|p| p.source_tokens.as_slice()).collect();
        let tgt: Vec<&[usize]> = pairs.iter().map(|p| p.target_tokens.as_slice()).collect();
        let s = self.embed_seqs(g, &src)?;
        let s = self.dropout(g, s, ctx)?;
        let t = self.embed_seqs(g, &tgt)?;
        let t = self.dropout(g, t, ctx)?;
        let sb = spans_of(&src, |x| x.len());
        let tb = spans_of(&tgt, |x| x.len());
        let values = if pairs.is_empty() {
            g.input(Tensor::zeros(&[self.config.d_model, 0]))
        } else {
            let (k, v) = self.project_kv(g, self.layout.align, t, t)?;
            let segs = sb
                .iter()
                .zip(&tb)
                .map(|(&(qs, ql), &(ks, kl))| AttnSegment {
                    q_start: qs,
                    q_len: ql,
                    k_start: ks,
                    k_len: kl,
                    mask: SegmentMask::Full,
                })
                .collect();
            self.attend(g, self.layout.align, s, k, v, segs)?
        };
        let spans = spans_of(sets, |x| x.total_source_len());
        Ok(BatchKv {
            keys: s,
            values,
            spans,
            boundaries: sb,
        })
    }

    /// Interleaves each sentence's adapted constraint columns with its own
    /// memory columns: `[c₀; m₀; c₁; m₁; …]`. Returns the block of each
    /// sentence.
    fn interleave(
        &self,
        g: &mut Graph,
        c: Var,
        c_spans: &[(usize, usize)],
        m: Var,
        m_spans: &[(usize, usize)],
    ) -> Result<(Var, Vec<(usize, usize)>)> {
        let mut parts = Vec::with_capacity(2 * m_spans.len());
        let mut blocks = Vec::with_capacity(m_spans.len());
        let mut off = 0;
        for (&(cs, cl), &(ms, ml)) in c_spans.iter().zip(m_spans) {
            parts.push(g.slice_cols(c, cs, cl)?);
            parts.push(g.slice_cols(m, ms, ml)?);
            blocks.push((off, cl + ml));
            off += cl + ml;
        }
        Ok((g.concat_cols(&parts, self.config.d_model)?, blocks))
    }

    pub fn encode_batch(
        &self,
        g: &mut Graph,
        sources: &[&[usize]],
        kv: &BatchKv,
        ctx: &mut Ctx<'_>,
    ) -> Result<EncodedBatch> {
        if sources.is_empty() || sources.iter().any(|s| s.is_empty()) {
            return Err(Error::Invalid("every source sentence needs at least one token".into()));
        }
        if kv.spans.len() != sources.len() {
            return Err(Error::Invalid(format!(
                "{} constraint sets for {} sources",
                kv.spans.len(),
                sources.len()
            )));
        }
        let spans = spans_of(sources, |s| s.len());
        let x = self.embed_seqs(g, sources)?;
        let mut h = self.dropout(g, x, ctx)?;
        let mut layers = Vec::with_capacity(self.layout.enc.len());
        for layer in &self.layout.enc {
            let z = self.norm(g, layer.ln1, h)?;
            let (mk, mv, blocks) = if self.config.attn_integration {
                let ck = self.adapt(g, layer.adapt_k, kv.keys)?;
                let cv = self.adapt(g, layer.adapt_v, kv.values)?;
                let (mk, blocks) = self.interleave(g, ck, &kv.spans, z, &spans)?;
                let (mv, _) = self.interleave(g, cv, &kv.spans, z, &spans)?;
                (mk, mv, blocks)
            } else {
                (z, z, spans.clone())
            };
            let (k, v) = self.project_kv(g, layer.self_attn, mk, mv)?;
            let segs = spans
                .iter()
                .zip(&blocks)
                .map(|(&(qs, ql), &(ks, kl))| AttnSegment {
                    q_start: qs,
                    q_len: ql,
                    k_start: ks,
                    k_len: kl,
                    mask: SegmentMask::Full,
                })
                .collect();
            let a = self.attend(g, layer.self_attn, z, k, v, segs)?;
            let a = self.dropout(g, a, ctx)?;
            h = g.add(h, a)?;
            let z = self.norm(g, layer.ln2, h)?;
            let f = self.ffn(g, layer.ffn, z)?;
            let f = self.dropout(g, f, ctx)?;
            h = g.add(h, f)?;
            layers.push(h);
        }
        let h = self.norm(g, self.layout.enc_ln, h)?;
        Ok(EncodedBatch { h, spans, layers })
    }

    /// Cross-attention keys and values for every decoder layer.
    pub fn cross_memories(
        &self,
        g: &mut Graph,
        enc: &EncodedBatch,
        kv: &BatchKv,
    ) -> Result<Vec<CrossMemory>> {
        let mut out = Vec::with_capacity(self.layout.dec.len());
        for layer in &self.layout.dec {
            let (mk, mv, blocks) = if self.config.attn_integration {
                let ck = self.adapt(g, layer.adapt_k, kv.keys)?;
                let cv = self.adapt(g, layer.adapt_v, kv.values)?;
                let (mk, blocks) = self.interleave(g, ck, &kv.spans, enc.h, &enc.spans)?;
                let (mv, _) = self.interleave(g, cv, &kv.spans, enc.h, &enc.spans)?;
                (mk, mv, blocks)
            } else {
                (enc.h, enc.h, enc.spans.clone())
            };
            let (k, v) = self.project_kv(g, layer.cross, mk, mv)?;
            out.push(CrossMemory { k, v, blocks });
        }
        Ok(out)
    }

    /// Decoder states for each input prefix; `source_of[i]` names the
    /// memory block prefix `i` attends to.
    pub fn decode_batch(
        &self,
        g: &mut Graph,
        inputs: &[&[usize]],
        source_of: &[usize],
        mems: &[CrossMemory],
        ctx: &mut Ctx<'_>,
    ) -> Result<Var> {
        if inputs.len() != source_of.len() || mems.len() != self.layout.dec.len() {
            return Err(Error::Invalid("decoder inputs and memories disagree".into()));
        }
        if inputs.iter().any(|s| s.is_empty()) {
            return Err(Error::Invalid("decoder prefixes must start with <s>".into()));
        }
        let spans = spans_of(inputs, |s| s.len());
        let y = self.embed_seqs(g, inputs)?;
        let mut h = self.dropout(g, y, ctx)?;
        for (layer, mem) in self.layout.dec.iter().zip(mems) {
            let z = self.norm(g, layer.ln1, h)?;
            let (k, v) = self.project_kv(g, layer.self_attn, z, z)?;
            let segs = spans
                .iter()
                .map(|&(s, l)| AttnSegment {
                    q_start: s,
                    q_len: l,
                    k_start: s,
                    k_len: l,
                    mask: SegmentMask::Causal,
                })
                .collect();
            let a = self.attend(g, layer.self_attn, z, k, v, segs)?;
            let a = self.dropout(g, a, ctx)?;
            h = g.add(h, a)?;

            let z = self.norm(g, layer.ln2, h)?;
            let mut segs = Vec::with_capacity(spans.len());
            for (&(s, l), &src) in spans.iter().zip(source_of) {
                let &(ks, kl) = mem
                    .blocks
                    .get(src)
                    .ok_or_else(|| Error::Invalid(format!("no memory block {src}")))?;
                segs.push(AttnSegment {
                    q_start: s,
                    q_len: l,
                    k_start: ks,
                    k_len: kl,
                    mask: SegmentMask::Full,
                });
            }
            let c = self.attend(g, layer.cross, z, mem.k, mem.v, segs)?;
            let c = self.dropout(g, c, ctx)?;
            h = g.add(h, c)?;

            let z = self.norm(g, layer.ln3, h)?;
            let f = self.ffn(g, layer.ffn, z)?;
            let f = self.dropout(g, f, ctx)?;
            h = g.add(h, f)?;
        }
        self.norm(g, self.layout.dec_ln, h)
    }

    /// The token half of the gate pre-activation for the whole vocabulary,
    /// `tanh(E·W1)·W3[..d]`, as a `|V| × 1` column.
    pub fn gate_vocab_term(&self, g: &mut Graph) -> Result<Var> {
        let d = self.config.d_model;
        let e = self.p(g, self.layout.embed);
        let w1 = self.p(g, self.layout.gate.w1);
        let w3 = self.p(g, self.layout.gate.w3);
        let w3a = g.slice_rows(w3, 0, d)?;
        let a = g.matmul(e, w1)?;
        let a = g.tanh(a);
        g.matmul(a, w3a)
    }

    /// Next-token distributions for the columns of `h`. Row `n` uses the
    /// constraint tokens `sets[row_set[n]]`, which must be sorted and
    /// deduplicated.
    pub fn output_layer(
        &self,
        g: &mut Graph,
        h: Var,
        sets: &[Vec<usize>],
        row_set: &[usize],
        gate_vocab: Option<Var>,
    ) -> Result<OutputTerms> {
        let d = self.config.d_model;
        let vocab = self.config.vocab_size;
        let n = g.shape(h)[1];
        if row_set.len() != n {
            return Err(Error::dim("output_layer", &[n], &[row_set.len()]));
        }
        let ht = g.transpose(h);
        let e = self.p(g, self.layout.embed);
        let w = g.transpose(e);
        let logits = g.matmul(ht, w)?;
        let model_probs = g.masked_softmax_rows(logits, None)?;
        if !self.config.output_integration {
            return Ok(OutputTerms {
                probs: model_probs,
                model_probs,
                gate: None,
                mixture: None,
            });
        }

        let a = match gate_vocab {
            Some(a) => a,
            None => self.gate_vocab_term(g)?,
        };
        let w2 = self.p(g, self.layout.gate.w2);
        let w3 = self.p(g, self.layout.gate.w3);
        let w3b = g.slice_rows(w3, d, d)?;
        let b = g.matmul(ht, w2)?;
        let b = g.tanh(b);
        let b = g.matmul(b, w3b)?;
        let ones_v = g.input(Tensor::full(&[1, vocab], 1.0));
        let ones_n = g.input(Tensor::full(&[n, 1], 1.0));
        let at = g.transpose(a);
        let row_term = g.matmul(b, ones_v)?;
        let col_term = g.matmul(ones_n, at)?;
        let pre = g.add(row_term, col_term)?;
        let gate = g.sigmoid(pre);
        let one_minus = g.scale(gate, -1.0);
        let one_minus = g.add_scalar(one_minus, 1.0);
        let kept = g.mul(one_minus, model_probs)?;

        let mut union: Vec<usize> = sets.iter().flatten().copied().collect();
        union.sort_unstable();
        union.dedup();
        let mixture = if union.is_empty() {
            kept
        } else {
            if let Some(&bad) = union.iter().find(|&&t| t >= vocab) {
                return Err(Error::TokenId { id: bad, size: vocab });
            }
            let u = union.len();
            let mut mask = vec![0.0f32; n * u];
            for (r, &s) in row_set.iter().enumerate() {
                let set = sets
                    .get(s)
                    .ok_or_else(|| Error::Invalid(format!("no constraint set {s}")))?;
                for (c, tok) in union.iter().enumerate() {
                    if set.binary_search(tok).is_ok() {
                        mask[r * u + c] = 1.0;
                    }
                }
            }
            let mut sel = vec![0.0f32; u * vocab];
            for (c, &tok) in union.iter().enumerate() {
                sel[c * vocab + tok] = 1.0;
            }
            let table = self.p(g, self.layout.embed);
            let wy = g.embedding(table, &union)?;
            let wy = g.normalize_cols(wy);
            let hn = g.normalize_cols(h);
            let hnt = g.transpose(hn);
            let cos = g.matmul(hnt, wy)?;
            let cos = g.relu(cos);
            let mask = g.input(Tensor::new(&[n, u], mask)?);
            let plug = g.mul(cos, mask)?;
            let sel = g.input(Tensor::new(&[u, vocab], sel)?);
            let plug = g.matmul(plug, sel)?;
            let gated = g.mul(gate, plug)?;
            g.add(kept, gated)?
        };
        let probs = g.normalize_rows(mixture)?;
        Ok(OutputTerms {
            probs,
            model_probs,
            gate: Some(gate),
            mixture: Some(mixture),
        })
    }

    /// Runs the full model with gold prefixes. Rows of the output follow
    /// examples in order, one per target token plus the end marker.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        batch: &[&Example],
        ctx: &mut Ctx<'_>,
    ) -> Result<TeacherForced> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let (bos, eos) = (1, 2);
        let sets: Vec<&ConstraintSet> = batch.iter().map(|e| &e.constraints).collect();
        let kv = self.constraint_kv(g, &sets, ctx)?;
        let sources: Vec<&[usize]> = batch.iter().map(|e| e.source.as_slice()).collect();
        let enc = self.encode_batch(g, &sources, &kv, ctx)?;
        let mems = self.cross_memories(g, &enc, &kv)?;
        let inputs: Vec<Vec<usize>> = batch
            .iter()
            .map(|e| std::iter::once(bos).chain(e.target.iter().copied()).collect())
            .collect();
        let input_refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        let source_of: Vec<usize> = (0..batch.len()).collect();
        let h = self.decode_batch(g, &input_refs, &source_of, &mems, ctx)?;

        let mut gold = Vec::new();
        let mut row_example = Vec::new();
        for (i, e) in batch.iter().enumerate() {
            gold.extend(e.target.iter().copied());
            gold.push(eos);
            row_example.extend(std::iter::repeat_n(i, e.target.len() + 1));
        }
        let token_sets: Vec<Vec<usize>> = sets.iter().map(|s| s.target_token_set()).collect();
        let out = self.output_layer(g, h, &token_sets, &row_example, None)?;
        Ok(TeacherForced {
            out,
            gold,
            row_example,
        })
    }
}
