//! Multi-context biaffine localization.
//!
//! The query-guided video features pass through a BiLSTM, then each biaffine
//! head (one per local window size) augments every frame with its
//! aggregated local/global context and scores all `T×T` start/end pairs.
//! Head logits are averaged before the final sigmoid.

use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, SigmoidPlacement};
use crate::encoders::{BiRnn, CellKind};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{ParameterStore, Session};
use crate::tape::{ReduceKind, Var};
use crate::tensor::Tensor;

/// Attention block used to refine context banks:
/// `LayerNorm(Q + Dropout(softmax(Q P_q (K P_k)ᵀ) K P_v P_o))`.
#[derive(Clone, Debug)]
pub struct NlBlockParams {
    pub prefix: String,
    pub width: usize,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl NlBlockParams {
    pub fn new(prefix: impl Into<String>, width: usize, dropout: f64, ln_eps: f64) -> Self {
        NlBlockParams {
            prefix: prefix.into(),
            width,
            dropout,
            ln_eps,
        }
    }

    pub fn name(&self, p: &str) -> String {
        format!("{}.{p}", self.prefix)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for p in ["P_q", "P_k", "P_v", "P_o"] {
            store.init_weight(self.name(p), self.width, self.width, rng)?;
        }
        store.init_ones(self.name("ln.gain"), &[1, self.width])?;
        store.init_zeros(self.name("ln.bias"), &[1, self.width])
    }
}

/// Non-local block: the `n` rows of `queries` attend over the `m` rows of `keys`.
pub fn nl_block(sess: &mut Session, keys: Var, queries: Var, p: &NlBlockParams) -> Result<Var> {
    let (ks, qs) = (
        sess.tape.value(keys).shape().to_vec(),
        sess.tape.value(queries).shape().to_vec(),
    );
    if ks.len() != 2 || qs.len() != 2 || ks[1] != p.width || qs[1] != p.width {
        return Err(Error::dim("nl_block", &ks, &qs));
    }
    if ks[0] == 0 {
        return Err(Error::EmptySequence("non-local context"));
    }
    let p_q = sess.param(&p.name("P_q"))?;
    let p_k = sess.param(&p.name("P_k"))?;
    let p_v = sess.param(&p.name("P_v"))?;
    let p_o = sess.param(&p.name("P_o"))?;
    let gain = sess.param(&p.name("ln.gain"))?;
    let bias = sess.param(&p.name("ln.bias"))?;

    let q = sess.tape.matmul(queries, p_q)?;
    let k = sess.tape.matmul(keys, p_k)?;
    let v = sess.tape.matmul(keys, p_v)?;
    let kt = sess.tape.transpose(k)?;
    let logits = sess.tape.matmul(q, kt)?;
    let weights = sess.tape.softmax(logits, 1)?;
    let attended = sess.tape.matmul(weights, v)?;
    let out = sess.tape.matmul(attended, p_o)?;
    let out = sess.dropout(out, p.dropout)?;
    let residual = sess.tape.add(queries, out)?;
    sess.tape.layer_norm(residual, gain, bias, p.ln_eps)
}

fn window_index(t_len: usize, t: usize, k_l: usize) -> impl Iterator<Item = Option<usize>> {
    let half = (k_l / 2) as isize;
    (-half..=half).map(move |o| {
        let i = t as isize + o;
        (0..t_len as isize).contains(&i).then_some(i as usize)
    })
}

fn check_local_scale(k_l: usize) -> Result<()> {
    if k_l == 0 || k_l.is_multiple_of(2) {
        return Err(Error::Config(format!("local window size must be odd, got {k_l}")));
    }
    Ok(())
}

/// `K_l×D` window of `f̃` centred on frame `t`, zero rows outside `[0, T)`.
pub fn local_context(sess: &mut Session, features: Var, t: usize, k_l: usize) -> Result<Var> {
    check_local_scale(k_l)?;
    let t_len = sess.tape.value(features).rows();
    if t >= t_len {
        return Err(Error::Index(format!("frame {t} outside sequence of {t_len}")));
    }
    let index: Vec<Option<usize>> = window_index(t_len, t, k_l).collect();
    sess.tape.gather_rows(features, &index)
}

/// All `T` windows stacked: rows `t·K_l .. (t+1)·K_l` hold the window of frame `t`.
pub fn local_windows(sess: &mut Session, features: Var, k_l: usize) -> Result<Var> {
    check_local_scale(k_l)?;
    let t_len = sess.tape.value(features).rows();
    let index: Vec<Option<usize>> = (0..t_len).flat_map(|t| window_index(t_len, t, k_l)).collect();
    sess.tape.gather_rows(features, &index)
}

/// Snippet bank: row `k` is the elementwise max of frames `[k·K_g, (k+1)·K_g)`.
/// When `K_g` does not divide `T` the last snippet pools only the frames that
/// exist, which is the same as right-padding and ignoring the padded rows.
pub fn global_spans(sess: &mut Session, features: Var, k_g: usize) -> Result<Var> {
    let t_len = sess.tape.value(features).rows();
    if k_g == 0 || k_g > t_len {
        return Err(Error::Config(format!(
            "global span {k_g} must lie in 1..={t_len}"
        )));
    }
    if k_g == 1 {
        return Ok(features);
    }
    sess.tape.max_pool_rows(features, k_g)
}

/// Local/global context aggregation for one local window size.
#[derive(Clone, Debug)]
pub struct ContextAggregator {
    pub k_l: usize,
    pub global_scales: Vec<usize>,
    /// `(global refinement, global-guided local)` blocks, one pair per global scale.
    pub blocks: Vec<(NlBlockParams, NlBlockParams)>,
    pub combine: Linear,
}

impl ContextAggregator {
    pub fn new(prefix: &str, k_l: usize, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let blocks = (0..cfg.global_scales.len())
            .map(|j| {
                (
                    NlBlockParams::new(format!("{prefix}.g{j}.global"), d, cfg.dropout, cfg.ln_eps),
                    NlBlockParams::new(format!("{prefix}.g{j}.local"), d, cfg.dropout, cfg.ln_eps),
                )
            })
            .collect();
        let width = cfg.global_scales.len() * (k_l + 1) * d;
        ContextAggregator {
            k_l,
            global_scales: cfg.global_scales.clone(),
            blocks,
            combine: Linear::new(format!("{prefix}.combine"), width, cfg.d_context),
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for (g, l) in &self.blocks {
            g.init(store, rng)?;
            l.init(store, rng)?;
        }
        self.combine.init(store, rng)
    }

    /// Global scales larger than the sequence collapse to one whole-video snippet.
    fn effective_scale(k_g: usize, t_len: usize) -> usize {
        k_g.min(t_len)
    }

    /// Context vector (`1×D_c`) for frame `t` alone.
    pub fn aggregate_contexts(&self, sess: &mut Session, features: Var, t: usize) -> Result<Var> {
        let t_len = sess.tape.value(features).rows();
        let d = sess.tape.value(features).cols();
        let mut parts = Vec::with_capacity(2 * self.blocks.len());
        for (&k_g, (global, local)) in self.global_scales.iter().zip(&self.blocks) {
            let bank = global_spans(sess, features, Self::effective_scale(k_g, t_len))?;
            let refined = nl_block(sess, bank, bank, global)?;
            let window = local_context(sess, features, t, self.k_l)?;
            let guided = nl_block(sess, refined, window, local)?;
            parts.push(sess.tape.reshape(guided, vec![1, self.k_l * d])?);
            parts.push(sess.tape.reduce(refined, ReduceKind::Mean, 0)?);
        }
        let joined = sess.tape.concat(&parts, 1)?;
        self.combine.forward(sess, joined)
    }

    /// Context vectors for every frame at once (`T×D_c`); row `t` equals
    /// [`aggregate_contexts`](Self::aggregate_contexts) at `t`.
    pub fn aggregate_all(&self, sess: &mut Session, features: Var) -> Result<Var> {
        let t_len = sess.tape.value(features).rows();
        let d = sess.tape.value(features).cols();
        let windows = local_windows(sess, features, self.k_l)?;
        let mut parts = Vec::with_capacity(2 * self.blocks.len());
        for (&k_g, (global, local)) in self.global_scales.iter().zip(&self.blocks) {
            let bank = global_spans(sess, features, Self::effective_scale(k_g, t_len))?;
            let refined = nl_block(sess, bank, bank, global)?;
            let guided = nl_block(sess, refined, windows, local)?;
            parts.push(sess.tape.reshape(guided, vec![t_len, self.k_l * d])?);
            let summary = sess.tape.reduce(refined, ReduceKind::Mean, 0)?;
            parts.push(sess.tape.gather_rows(summary, &vec![Some(0); t_len])?);
        }
        let joined = sess.tape.concat(&parts, 1)?;
        self.combine.forward(sess, joined)
    }
}

/// Start/end projections and the biaffine form
/// `h_s U_m h_eᵀ + (h_s + h_e) W_m + b_m`.
#[derive(Clone, Debug)]
pub struct BiaffineHead {
    pub prefix: String,
    pub start: Linear,
    pub end: Linear,
    pub d_h: usize,
}

impl BiaffineHead {
    pub fn new(prefix: &str, input: usize, d_h: usize) -> Self {
        BiaffineHead {
            prefix: prefix.to_owned(),
            start: Linear::new(format!("{prefix}.start"), input, d_h),
            end: Linear::new(format!("{prefix}.end"), input, d_h),
            d_h,
        }
    }

    pub fn name(&self, p: &str) -> String {
        format!("{}.{p}", self.prefix)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.start.init(store, rng)?;
        self.end.init(store, rng)?;
        store.init_weight(self.name("U_m"), self.d_h, self.d_h, rng)?;
        store.init_weight(self.name("W_m"), self.d_h, 1, rng)?;
        store.init_zeros(self.name("b_m"), &[1, 1])
    }

    /// `T×T` logits from start and end representations (`T×d_h` each);
    /// entry `(s, e)` pairs start row `s` with end row `e`.
    pub fn biaffine_logits(&self, sess: &mut Session, h_s: Var, h_e: Var) -> Result<Var> {
        let u = sess.param(&self.name("U_m"))?;
        let w = sess.param(&self.name("W_m"))?;
        let b = sess.param(&self.name("b_m"))?;
        let su = sess.tape.matmul(h_s, u)?;
        let het = sess.tape.transpose(h_e)?;
        let bilinear = sess.tape.matmul(su, het)?;
        let start_lin = sess.tape.matmul(h_s, w)?;
        let end_lin = sess.tape.matmul(h_e, w)?;
        let end_lin = sess.tape.transpose(end_lin)?;
        let z = sess.tape.add(bilinear, start_lin)?;
        let z = sess.tape.add(z, end_lin)?;
        sess.tape.add(z, b)
    }

    /// Logit for a single start/end pair.
    pub fn biaffine_score(&self, sess: &mut Session, h_s: &[f64], h_e: &[f64]) -> Result<f64> {
        if h_s.len() != self.d_h || h_e.len() != self.d_h {
            return Err(Error::dim("biaffine_score", &[h_s.len()], &[h_e.len()]));
        }
        let s = sess.tape.constant(Tensor::matrix(1, self.d_h, h_s.to_vec())?);
        let e = sess.tape.constant(Tensor::matrix(1, self.d_h, h_e.to_vec())?);
        let z = self.biaffine_logits(sess, s, e)?;
        Ok(sess.tape.value(z).data()[0])
    }

    /// Projects frame features to start/end representations and scores all pairs.
    pub fn score(&self, sess: &mut Session, features: Var) -> Result<Var> {
        let h_s = self.start.forward(sess, features)?;
        let h_e = self.end.forward(sess, features)?;
        self.biaffine_logits(sess, h_s, h_e)
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub context: Option<ContextAggregator>,
    pub biaffine: BiaffineHead,
}

impl Head {
    /// `T×T` logits of this head from the BiLSTM features `f̃`.
    pub fn logits(&self, sess: &mut Session, features: Var) -> Result<Var> {
        let augmented = match &self.context {
            Some(ctx) => {
                let c = ctx.aggregate_all(sess, features)?;
                sess.tape.concat(&[features, c], 1)?
            }
            None => features,
        };
        self.biaffine.score(sess, augmented)
    }
}

#[derive(Clone, Debug)]
pub struct Mcbl {
    pub lstm: BiRnn,
    pub heads: Vec<Head>,
    pub sigmoid: SigmoidPlacement,
}

impl Mcbl {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let lstm = BiRnn::new("mcbl.lstm", CellKind::Lstm, 2 * d, cfg.hidden, d);
        let heads = if cfg.contexts {
            cfg.local_scales
                .iter()
                .enumerate()
                .map(|(i, &k_l)| {
                    let prefix = format!("mcbl.head{i}");
                    Head {
                        context: Some(ContextAggregator::new(&format!("{prefix}.ctx"), k_l, cfg)),
                        biaffine: BiaffineHead::new(&prefix, d + cfg.d_context, cfg.d_boundary),
                    }
                })
                .collect()
        } else {
            vec![Head {
                context: None,
                biaffine: BiaffineHead::new("mcbl.head0", d, cfg.d_boundary),
            }]
        };
        Mcbl {
            lstm,
            heads,
            sigmoid: cfg.sigmoid,
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.lstm.init(store, rng)?;
        for h in &self.heads {
            if let Some(c) = &h.context {
                c.init(store, rng)?;
            }
            h.biaffine.init(store, rng)?;
        }
        Ok(())
    }

    /// `F̃ = BiLSTM(F̂)` projected back to `T×D`.
    pub fn aggregate_sequence(&self, sess: &mut Session, fused: Var) -> Result<Var> {
        self.lstm.forward(sess, fused)
    }

    /// Score map from BiLSTM features, skipping the BiLSTM itself.
    pub fn score_features(&self, sess: &mut Session, features: Var) -> Result<Var> {
        let t_len = sess.tape.value(features).rows();
        if t_len < 2 {
            return Err(Error::Input(format!("score map needs T >= 2, got {t_len}")));
        }
        let mut total: Option<Var> = None;
        for head in &self.heads {
            let mut z = head.logits(sess, features)?;
            if self.sigmoid == SigmoidPlacement::PerHead {
                z = sess.tape.sigmoid(z);
            }
            total = Some(match total {
                None => z,
                Some(acc) => sess.tape.add(acc, z)?,
            });
        }
        let total = total.ok_or_else(|| Error::Config("model has no biaffine heads".into()))?;
        let mean = sess.tape.scale(total, 1.0 / self.heads.len() as f64);
        Ok(match self.sigmoid {
            SigmoidPlacement::AfterAverage => sess.tape.sigmoid(mean),
            SigmoidPlacement::PerHead => mean,
        })
    }

    /// `T×2D` query-guided features to the `T×T` score map.
    pub fn forward(&self, sess: &mut Session, fused: Var) -> Result<Var> {
        let t_len = sess.tape.value(fused).rows();
        if t_len < 2 {
            return Err(Error::Input(format!("score map needs T >= 2, got {t_len}")));
        }
        let features = self.aggregate_sequence(sess, fused)?;
        self.score_features(sess, features)
    }
}
