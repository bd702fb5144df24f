//! Multi-modal self attention: each word is appended to every frame, the
//! resulting `T×2D` sequence attends over time, and the per-word outputs are
//! averaged into the query-guided video representation.
//!
//! All words share one set of projections, so the output does not depend on
//! the query length beyond the average.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParameterStore, Session};
use crate::tape::Var;

/// Projection names `{prefix}.W_q`, `.W_k`, `.W_v`, `.W_b`, each `2D×2D`.
#[derive(Clone, Debug)]
pub struct MmsaParams {
    pub prefix: String,
    /// Joint width `2D`.
    pub width: usize,
}

pub struct Attended {
    pub output: Var,
    /// `T×T` attention weights, rows summing to one.
    pub weights: Var,
}

impl MmsaParams {
    pub fn new(prefix: impl Into<String>, d_model: usize) -> Self {
        MmsaParams {
            prefix: prefix.into(),
            width: 2 * d_model,
        }
    }

    pub fn name(&self, p: &str) -> String {
        format!("{}.{p}", self.prefix)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for p in ["W_q", "W_k", "W_v", "W_b"] {
            store.init_weight(self.name(p), self.width, self.width, rng)?;
        }
        Ok(())
    }
}

/// `f_t = [v_t ; q]` for every frame: `T×D` and `1×D` give `T×2D`.
pub fn concat_word_video(sess: &mut Session, video: Var, word: Var) -> Result<Var> {
    let (vs, ws) = (
        sess.tape.value(video).shape().to_vec(),
        sess.tape.value(word).shape().to_vec(),
    );
    let t = match (vs.as_slice(), ws.as_slice()) {
        ([t, d], [1, dq]) if d == dq => *t,
        _ => return Err(Error::dim("concat_word_video", &vs, &ws)),
    };
    let repeated = sess.tape.gather_rows(word, &vec![Some(0); t])?;
    sess.tape.concat(&[video, repeated], 1)
}

/// Unscaled dot-product self attention over the rows of `f` with a residual
/// output projection: `softmax(F W_q (F W_k)ᵀ) F W_v W_b + F`.
pub fn per_word_self_attention(sess: &mut Session, f: Var, params: &MmsaParams) -> Result<Attended> {
    let width = sess.tape.value(f).cols();
    if width != params.width {
        return Err(Error::dim(
            "per_word_self_attention",
            sess.tape.value(f).shape(),
            &[params.width],
        ));
    }
    let w_q = sess.param(&params.name("W_q"))?;
    let w_k = sess.param(&params.name("W_k"))?;
    let w_v = sess.param(&params.name("W_v"))?;
    let w_b = sess.param(&params.name("W_b"))?;
    let q = sess.tape.matmul(f, w_q)?;
    let k = sess.tape.matmul(f, w_k)?;
    let v = sess.tape.matmul(f, w_v)?;
    let kt = sess.tape.transpose(k)?;
    let logits = sess.tape.matmul(q, kt)?;
    let weights = sess.tape.softmax(logits, 1)?;
    let attended = sess.tape.matmul(weights, v)?;
    let projected = sess.tape.matmul(attended, w_b)?;
    let output = sess.tape.add(projected, f)?;
    Ok(Attended { output, weights })
}

/// `F̂ = (1/N) Σ_n attention([V ; q_n])`, a `T×2D` matrix.
pub fn mmsa_forward(sess: &mut Session, video: Var, query: Var, params: &MmsaParams) -> Result<Var> {
    let n_words = sess.tape.value(query).rows();
    if n_words == 0 {
        return Err(Error::EmptySequence("query"));
    }
    let mut total: Option<Var> = None;
    for n in 0..n_words {
        let word = sess.tape.slice(query, 0, n..n + 1)?;
        let f_n = concat_word_video(sess, video, word)?;
        let out = per_word_self_attention(sess, f_n, params)?.output;
        total = Some(match total {
            None => out,
            Some(acc) => sess.tape.add(acc, out)?,
        });
    }
    let total = total.expect("at least one word");
    Ok(sess.tape.scale(total, 1.0 / n_words as f64))
}
