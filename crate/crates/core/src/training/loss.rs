use crate::constraints::{classify_target_tokens, ConstraintSet};
use crate::error::{Error, Result};
use crate::model::TeacherForced;
use crate::numerics::{Graph, Tensor, Var};

/// Weighted, label-smoothed negative log-likelihood summed over tokens.
pub struct LossTerms {
    pub total: Var,
    pub tokens: usize,
    pub constrained_tokens: usize,
}

/// Per-row flag telling whether the gold token is a constraint token of its
/// example.
pub fn constrained_rows(tf: &TeacherForced, sets: &[&ConstraintSet]) -> Vec<bool> {
    let mut out = Vec::with_capacity(tf.gold.len());
    let mut start = 0;
    while start < tf.gold.len() {
        let ex = tf.row_example[start];
        let end = tf.row_example[start..]
            .iter()
            .position(|&e| e != ex)
            .map_or(tf.gold.len(), |p| start + p);
        out.extend(classify_target_tokens(&tf.gold[start..end], sets[ex]));
        start = end;
    }
    out
}

/// `-(α Σ_{constrained} ℓ + β Σ_{other} ℓ)` where each `ℓ` is the smoothed
/// log-likelihood `(1-ε) log p(y) + ε/|V| Σ_v log p(v)`.
pub fn constrained_loss(
    g: &mut Graph,
    probs: Var,
    gold: &[usize],
    constrained: &[bool],
    alpha: f32,
    beta: f32,
    smoothing: f32,
) -> Result<LossTerms> {
    let shape = g.shape(probs).to_vec();
    let (n, vocab) = (shape[0], shape[1]);
    if n == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    if gold.len() != n || constrained.len() != n {
        return Err(Error::dim("constrained_loss", &shape, &[gold.len()]));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!("label smoothing {smoothing} not in [0, 1)")));
    }
    let mut coef = vec![0.0f32; n * vocab];
    for (r, (&y, &c)) in gold.iter().zip(constrained).enumerate() {
        if y >= vocab {
            return Err(Error::TokenId { id: y, size: vocab });
        }
        let w = if c { alpha } else { beta };
        let row = &mut coef[r * vocab..(r + 1) * vocab];
        row.iter_mut().for_each(|v| *v = -w * smoothing / vocab as f32);
        row[y] -= w * (1.0 - smoothing);
    }
    let logp = g.ln(probs);
    let coef = g.input(Tensor::new(&[n, vocab], coef)?);
    let weighted = g.mul(logp, coef)?;
    Ok(LossTerms {
        total: g.sum(weighted),
        tokens: n,
        constrained_tokens: constrained.iter().filter(|&&c| c).count(),
    })
}
