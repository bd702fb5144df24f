use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{ParameterStore, Session};
use crate::tape::Var;

/// Affine map `x·W + b` with parameters `{prefix}.W` and `{prefix}.b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub prefix: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, input: usize, output: usize) -> Self {
        Linear {
            prefix: prefix.into(),
            input,
            output,
        }
    }

    pub fn weight(&self) -> String {
        format!("{}.W", self.prefix)
    }

    pub fn bias(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<()> {
        store.init_weight(self.weight(), self.input, self.output, rng)?;
        store.init_zeros(self.bias(), &[1, self.output])
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let w = sess.param(&self.weight())?;
        let b = sess.param(&self.bias())?;
        let xw = sess.tape.matmul(x, w)?;
        sess.tape.add(xw, b)
    }
}
