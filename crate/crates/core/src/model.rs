//! The full network: video and query encoders, multi-modal self attention
//! and the multi-context biaffine scorer.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::encoders::{QueryEncoder, VideoEncoder};
use crate::error::Result;
use crate::mcbl::Mcbl;
use crate::mmsa::{mmsa_forward, MmsaParams};
use crate::params::{Mode, ParameterStore, Session};
use crate::seeds::{self, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Cbln {
    pub cfg: ModelConfig,
    pub video: VideoEncoder,
    pub query: QueryEncoder,
    pub mmsa: MmsaParams,
    pub mcbl: Mcbl,
}

impl Cbln {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Cbln {
            cfg: cfg.clone(),
            video: VideoEncoder::new(cfg),
            query: QueryEncoder::new(cfg),
            mmsa: MmsaParams::new("mmsa", cfg.d_model),
            mcbl: Mcbl::new(cfg),
        })
    }

    /// Fresh parameters drawn from the initialization stream of `seed`.
    pub fn init(&self, seed: u64) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        self.init_with(&mut store, &mut seeds::rng(seed, Stream::Init, 0, 0))?;
        Ok(store)
    }

    pub fn init_with(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.video.init(store, rng)?;
        self.query.init(store, rng)?;
        self.mmsa.init(store, rng)?;
        self.mcbl.init(store, rng)
    }

    /// Records the forward pass and returns the `T×T` score map node.
    pub fn forward(&self, sess: &mut Session, features: &Tensor, tokens: &[usize]) -> Result<Var> {
        let v = self.video.encode(sess, features)?;
        let q = self.query.encode(sess, tokens)?;
        let fused = mmsa_forward(sess, v, q, &self.mmsa)?;
        self.mcbl.forward(sess, fused)
    }

    /// Inference-mode score map.
    pub fn predict(&self, store: &ParameterStore, features: &Tensor, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut sess = Session::new(&mut tape, store, Mode::Eval);
        let m = self.forward(&mut sess, features, tokens)?;
        Ok(tape.value(m).clone())
    }
}

/// Small configuration used for finite-difference checks: `D = 4`,
/// `T = 5`, `N = 3`, two local and two global scales.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        d_model: 4,
        d_video_in: 3,
        vocab_size: 10,
        max_t: 5,
        max_n: 3,
        hidden: 4,
        local_scales: vec![1, 3],
        global_scales: vec![1, 2],
        d_context: 4,
        d_boundary: 4,
        ..ModelConfig::default()
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// `Σ y ⊙ w` for a fixed random `w`, a scalar probe of every output entry.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = uniform(tape.value(y).shape(), &mut seeds::rng(seed, Stream::Init, 99, 0));
    let w = tape.constant(w);
    let prod = tape.mul(y, w)?;
    Ok(tape.sum_all(prod))
}

/// Finite-difference checks of each stage of the network under `cfg`, with
/// `t` frames and `n` query tokens: a composite of core tensor ops, both
/// encoders, multi-modal attention, the biaffine scorer and the full loss.
pub fn gradcheck_modules(
    cfg: &ModelConfig,
    t: usize,
    n: usize,
    seed: u64,
    h: f64,
    tol: f64,
) -> Result<Vec<(String, crate::gradcheck::GradCheckReport)>> {
    use crate::data::GroundingExample;
    use crate::gradcheck::finite_diff_check;
    use crate::segment::Segment;
    use crate::tape::ReduceKind;
    use crate::training::loss_gradcheck;

    let model = Cbln::new(cfg)?;
    let store = model.init(seed)?;
    let mut rng = seeds::rng(seed, Stream::Init, 1, 0);
    let d = cfg.d_model;
    let features = uniform(&[t, cfg.d_video_in], &mut rng);
    let tokens: Vec<usize> = (0..n).map(|i| (i * 7 + 1) % cfg.vocab_size).collect();
    let ex = GroundingExample {
        features: features.clone(),
        tokens: tokens.clone(),
        gt: Segment::new(t / 4, t - 1 - t / 4),
        duration_s: t as f64,
    };
    let mut out = Vec::new();

    let x = uniform(&[t, d], &mut rng);
    let gain = uniform(&[1, d], &mut rng);
    out.push((
        "tensor-core".to_owned(),
        finite_diff_check(
            |tape, v| {
                let a = tape.sigmoid(v);
                let vt = tape.transpose(v)?;
                let logits = tape.matmul(a, vt)?;
                let w = tape.softmax(logits, 1)?;
                let th = tape.tanh(v);
                let c = tape.matmul(w, th)?;
                let g = tape.constant(gain.clone());
                let b = tape.constant(Tensor::zeros(&[1, d]));
                let ln = tape.layer_norm(c, g, b, 1e-5)?;
                let pooled = tape.max_pool_rows(ln, 2)?;
                let m = tape.reduce(pooled, ReduceKind::Mean, 0)?;
                probe(tape, m, seed)
            },
            &x,
            h,
            tol,
        )?,
    ));

    for (label, name) in [
        ("video-encoder", "video.input.W"),
        ("query-encoder", "query.embedding"),
    ] {
        let value = store.get(name)?.clone();
        let report = finite_diff_check(
            |tape, v| {
                let mut sess = Session::new(tape, &store, Mode::Eval);
                sess.bind(name, v)?;
                let y = if label == "video-encoder" {
                    model.video.encode(&mut sess, &features)?
                } else {
                    model.query.encode(&mut sess, &tokens)?
                };
                probe(sess.tape, y, seed)
            },
            &value,
            h,
            tol,
        )?;
        out.push((label.to_owned(), report));
    }

    let video = uniform(&[t, d], &mut rng);
    let query = uniform(&[n, d], &mut rng);
    out.push((
        "mmsa".to_owned(),
        finite_diff_check(
            |tape, v| {
                let mut sess = Session::new(tape, &store, Mode::Eval);
                let q = sess.tape.constant(query.clone());
                let y = mmsa_forward(&mut sess, v, q, &model.mmsa)?;
                probe(sess.tape, y, seed)
            },
            &video,
            h,
            tol,
        )?,
    ));

    let fused = uniform(&[t, 2 * d], &mut rng);
    out.push((
        "mcbl".to_owned(),
        finite_diff_check(
            |tape, v| {
                let mut sess = Session::new(tape, &store, Mode::Eval);
                let y = model.mcbl.forward(&mut sess, v)?;
                probe(sess.tape, y, seed)
            },
            &fused,
            h,
            tol,
        )?,
    ));

    let train_cfg = crate::config::TrainConfig::default();
    let mut worst: Option<crate::gradcheck::GradCheckReport> = None;
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for name in &names {
        let r = loss_gradcheck(&model, &store, &ex, &train_cfg, name, h, tol)?;
        if worst.as_ref().is_none_or(|w| r.max_rel_err > w.max_rel_err) {
            worst = Some(r);
        }
    }
    out.push(("loss".to_owned(), worst.expect("model has parameters")));
    Ok(out)
}
