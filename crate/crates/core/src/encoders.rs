//! Video and query encoders: input projection or embedding lookup,
//! sinusoidal positional encoding, then a bidirectional recurrent layer
//! projected back to `d_model`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{ParameterStore, Session};
use crate::tape::Var;
use crate::tensor::Tensor;

/// `PE(t, 2i) = sin(t / 10000^(2i/D))`, `PE(t, 2i+1) = cos(t / 10000^(2i/D))`.
pub fn positional_encoding(t: usize, d: usize) -> Result<Tensor> {
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding needs an even width, got {d}"
        )));
    }
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::matrix(t, d, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Gru,
    Lstm,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }
}

/// One recurrent direction. Gate weights are stacked column-wise:
/// `W_x: input×(G·H)`, `W_h: H×(G·H)`, biases `1×(G·H)`, with gate order
/// reset/update/candidate for GRU and input/forget/cell/output for LSTM.
#[derive(Clone, Debug)]
pub struct RecurrentCell {
    pub prefix: String,
    pub kind: CellKind,
    pub input: usize,
    pub hidden: usize,
}

impl RecurrentCell {
    pub fn new(prefix: impl Into<String>, kind: CellKind, input: usize, hidden: usize) -> Self {
        RecurrentCell {
            prefix: prefix.into(),
            kind,
            input,
            hidden,
        }
    }

    fn name(&self, p: &str) -> String {
        format!("{}.{p}", self.prefix)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let width = self.kind.gates() * self.hidden;
        // Both weight blocks use the hidden width as fan-in, like the usual
        // 1/√H recurrent initialization.
        let bound = 1.0 / (self.hidden as f64).sqrt();
        let mut uniform = |rows: usize| -> Result<Tensor> {
            let data = (0..rows * width).map(|_| rng.gen_range(-bound..=bound)).collect();
            Tensor::matrix(rows, width, data)
        };
        store.insert(self.name("W_x"), uniform(self.input)?)?;
        store.insert(self.name("W_h"), uniform(self.hidden)?)?;
        store.init_zeros(self.name("b_x"), &[1, width])?;
        store.init_zeros(self.name("b_h"), &[1, width])
    }

    /// Runs the cell over the rows of `x` (`T×input`), forward in time or
    /// reversed, and returns the `T×H` hidden states in original time order.
    pub fn scan(&self, sess: &mut Session, x: Var, reverse: bool) -> Result<Var> {
        let t_len = sess.tape.value(x).rows();
        if t_len == 0 {
            return Err(Error::EmptySequence("recurrent input"));
        }
        let h = self.hidden;
        let w_x = sess.param(&self.name("W_x"))?;
        let w_h = sess.param(&self.name("W_h"))?;
        let b_x = sess.param(&self.name("b_x"))?;
        let b_h = sess.param(&self.name("b_h"))?;
        let xw = sess.tape.matmul(x, w_x)?;
        let xw = sess.tape.add(xw, b_x)?;

        let mut state = sess.tape.constant(Tensor::zeros(&[1, h]));
        let mut cell = sess.tape.constant(Tensor::zeros(&[1, h]));
        let mut outputs = vec![state; t_len];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..t_len).rev())
        } else {
            Box::new(0..t_len)
        };
        for t in order {
            let xt = sess.tape.slice(xw, 0, t..t + 1)?;
            let hw = sess.tape.matmul(state, w_h)?;
            let hw = sess.tape.add(hw, b_h)?;
            match self.kind {
                CellKind::Gru => {
                    let x_rz = sess.tape.slice(xt, 1, 0..2 * h)?;
                    let h_rz = sess.tape.slice(hw, 1, 0..2 * h)?;
                    let rz = sess.tape.add(x_rz, h_rz)?;
                    let rz = sess.tape.sigmoid(rz);
                    let r = sess.tape.slice(rz, 1, 0..h)?;
                    let z = sess.tape.slice(rz, 1, h..2 * h)?;
                    let x_n = sess.tape.slice(xt, 1, 2 * h..3 * h)?;
                    let h_n = sess.tape.slice(hw, 1, 2 * h..3 * h)?;
                    let gated = sess.tape.mul(r, h_n)?;
                    let n = sess.tape.add(x_n, gated)?;
                    let n = sess.tape.tanh(n);
                    // h' = (1 - z)·n + z·h = n + z·(h - n)
                    let diff = sess.tape.sub(state, n)?;
                    let zd = sess.tape.mul(z, diff)?;
                    state = sess.tape.add(n, zd)?;
                }
                CellKind::Lstm => {
                    let pre = sess.tape.add(xt, hw)?;
                    let ifs = sess.tape.slice(pre, 1, 0..2 * h)?;
                    let ifs = sess.tape.sigmoid(ifs);
                    let i_g = sess.tape.slice(ifs, 1, 0..h)?;
                    let f_g = sess.tape.slice(ifs, 1, h..2 * h)?;
                    let g = sess.tape.slice(pre, 1, 2 * h..3 * h)?;
                    let g = sess.tape.tanh(g);
                    let o = sess.tape.slice(pre, 1, 3 * h..4 * h)?;
                    let o = sess.tape.sigmoid(o);
                    let keep = sess.tape.mul(f_g, cell)?;
                    let write = sess.tape.mul(i_g, g)?;
                    cell = sess.tape.add(keep, write)?;
                    let c_act = sess.tape.tanh(cell);
                    state = sess.tape.mul(o, c_act)?;
                }
            }
            outputs[t] = state;
        }
        sess.tape.concat(&outputs, 0)
    }
}

/// Bidirectional recurrent layer whose concatenated `T×2H` output is
/// projected to `output` columns.
#[derive(Clone, Debug)]
pub struct BiRnn {
    pub fwd: RecurrentCell,
    pub bwd: RecurrentCell,
    pub proj: Linear,
}

impl BiRnn {
    pub fn new(prefix: &str, kind: CellKind, input: usize, hidden: usize, output: usize) -> Self {
        BiRnn {
            fwd: RecurrentCell::new(format!("{prefix}.fwd"), kind, input, hidden),
            bwd: RecurrentCell::new(format!("{prefix}.bwd"), kind, input, hidden),
            proj: Linear::new(format!("{prefix}.proj"), 2 * hidden, output),
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.fwd.init(store, rng)?;
        self.bwd.init(store, rng)?;
        self.proj.init(store, rng)
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let states = birnn_states(sess, x, &self.fwd, &self.bwd)?;
        self.proj.forward(sess, states)
    }
}

/// `[fwd(x) ; bwd(x)]`, the `T×2H` pre-projection output of a bidirectional layer.
pub fn birnn_states(sess: &mut Session, x: Var, fwd: &RecurrentCell, bwd: &RecurrentCell) -> Result<Var> {
    let f = fwd.scan(sess, x, false)?;
    let b = bwd.scan(sess, x, true)?;
    sess.tape.concat(&[f, b], 1)
}

/// Lookup table of `vocab_size × d_model` trainable rows.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub name: String,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<()> {
        // A lookup is a one-hot product, so fan-in is 1: U(-1, 1).
        let data = (0..self.vocab_size * self.dim)
            .map(|_| rng.gen_range(-1.0..=1.0))
            .collect();
        store.insert(
            self.name.clone(),
            Tensor::matrix(self.vocab_size, self.dim, data)?,
        )
    }

    pub fn lookup(&self, sess: &mut Session, tokens: &[usize]) -> Result<Var> {
        if let Some(&id) = tokens.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::Vocabulary {
                id,
                vocab_size: self.vocab_size,
            });
        }
        let table = sess.param(&self.name)?;
        let index: Vec<Option<usize>> = tokens.iter().map(|&id| Some(id)).collect();
        sess.tape.gather_rows(table, &index)
    }
}

#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub input: Linear,
    pub rnn: BiRnn,
    pub max_t: usize,
    pub d_video_in: usize,
}

impl VideoEncoder {
    pub fn new(cfg: &ModelConfig) -> Self {
        VideoEncoder {
            input: Linear::new("video.input", cfg.d_video_in, cfg.d_model),
            rnn: BiRnn::new("video.rnn", CellKind::Gru, cfg.d_model, cfg.hidden, cfg.d_model),
            max_t: cfg.max_t,
            d_video_in: cfg.d_video_in,
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.input.init(store, rng)?;
        self.rnn.init(store, rng)
    }

    /// Encodes `T×D_v` raw frame features into `V: T×D`.
    pub fn encode(&self, sess: &mut Session, raw: &Tensor) -> Result<Var> {
        let (t, dv) = match raw.shape() {
            [t, dv] => (*t, *dv),
            s => return Err(Error::dim("encode_video", s, &[])),
        };
        if t == 0 {
            return Err(Error::EmptySequence("video"));
        }
        if t > self.max_t {
            return Err(Error::Input(format!(
                "video has {t} frames but max_t is {}; subsample or truncate to {} frames",
                self.max_t, self.max_t
            )));
        }
        if dv != self.d_video_in {
            return Err(Error::dim("encode_video", raw.shape(), &[t, self.d_video_in]));
        }
        let x = sess.tape.constant(raw.clone());
        let x = self.input.forward(sess, x)?;
        let pe = sess.tape.constant(positional_encoding(t, self.input.output)?);
        let x = sess.tape.add(x, pe)?;
        self.rnn.forward(sess, x)
    }
}

#[derive(Clone, Debug)]
pub struct QueryEncoder {
    pub embedding: EmbeddingTable,
    pub rnn: BiRnn,
    pub max_n: usize,
}

impl QueryEncoder {
    pub fn new(cfg: &ModelConfig) -> Self {
        QueryEncoder {
            embedding: EmbeddingTable {
                name: "query.embedding".into(),
                vocab_size: cfg.vocab_size,
                dim: cfg.d_model,
            },
            rnn: BiRnn::new("query.rnn", CellKind::Gru, cfg.d_model, cfg.hidden, cfg.d_model),
            max_n: cfg.max_n,
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.embedding.init(store, rng)?;
        self.rnn.init(store, rng)
    }

    /// Encodes `N` token ids into `Q: N×D`.
    pub fn encode(&self, sess: &mut Session, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence("query"));
        }
        if tokens.len() > self.max_n {
            return Err(Error::Input(format!(
                "query has {} tokens but max_n is {}",
                tokens.len(),
                self.max_n
            )));
        }
        let x = self.embedding.lookup(sess, tokens)?;
        let pe = sess
            .tape
            .constant(positional_encoding(tokens.len(), self.embedding.dim)?);
        let x = sess.tape.add(x, pe)?;
        self.rnn.forward(sess, x)
    }
}
