//! Run configuration, stored as flat JSON with dotted keys:
//!
//! ```json
//! { "seed": 0, "model.d_model": 32, "train.lr": 0.0008, "data.t": 32 }
//! ```
//!
//! Missing keys fall back to the desk-scale defaults; unknown keys are errors.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Where the sigmoid sits relative to the per-head averaging of biaffine logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmoidPlacement {
    /// Average the heads' logits, then one sigmoid.
    AfterAverage,
    /// Sigmoid inside each head, then average the probabilities.
    PerHead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width `D` of the encoded video and query.
    pub d_model: usize,
    /// Raw per-frame visual feature width.
    pub d_video_in: usize,
    pub vocab_size: usize,
    pub max_t: usize,
    pub max_n: usize,
    /// Hidden width of each recurrent direction.
    pub hidden: usize,
    /// Odd local window sizes; one biaffine head per entry.
    pub local_scales: Vec<usize>,
    /// Global snippet widths shared by every head.
    pub global_scales: Vec<usize>,
    pub d_context: usize,
    pub d_boundary: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    /// When false, heads score plain BiLSTM features (biaffine-only variant).
    pub contexts: bool,
    pub sigmoid: SigmoidPlacement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            d_video_in: 16,
            vocab_size: 64,
            max_t: 64,
            max_n: 16,
            hidden: 16,
            local_scales: vec![1, 3, 5],
            global_scales: vec![1, 2, 4],
            d_context: 32,
            d_boundary: 32,
            dropout: 0.1,
            ln_eps: 1e-5,
            contexts: true,
            sigmoid: SigmoidPlacement::AfterAverage,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return fail(format!("d_model must be even and positive, got {}", self.d_model));
        }
        if self.max_t < 2 {
            return fail(format!("max_t must be >= 2, got {}", self.max_t));
        }
        if self.vocab_size == 0 || self.max_n == 0 || self.hidden == 0 || self.d_video_in == 0 {
            return fail("vocab_size, max_n, hidden and d_video_in must be positive".into());
        }
        if self.d_context == 0 || self.d_boundary == 0 {
            return fail("d_context and d_boundary must be positive".into());
        }
        if self.local_scales.is_empty() || self.global_scales.is_empty() {
            return fail("local_scales and global_scales must be non-empty".into());
        }
        if let Some(k) = self.local_scales.iter().find(|&&k| k == 0 || k % 2 == 0) {
            return fail(format!("local scale {k} must be odd"));
        }
        if self.global_scales.contains(&0) {
            return fail("global scales must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.ln_eps < 0.0 {
            return fail("ln_eps must be >= 0".into());
        }
        Ok(())
    }

    /// Number of biaffine heads.
    pub fn num_heads(&self) -> usize {
        if self.contexts {
            self.local_scales.len()
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Clamp applied to probabilities before the logs of the loss.
    pub log_eps: f64,
    /// Leave `s > e` cells out of the loss instead of training them toward 0.
    pub mask_invalid: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 8e-4,
            batch_size: 8,
            epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            log_eps: 1e-7,
            mask_invalid: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n: Vec<usize>,
    pub iou: Vec<f64>,
    pub nms_iou: f64,
    /// Count a hit only when IoU is strictly greater than the threshold.
    pub strict: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n: vec![1, 5],
            iou: vec![0.3, 0.5, 0.7],
            nms_iou: 0.5,
            strict: false,
        }
    }
}

/// Parameters of the synthetic grounding task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub t: usize,
    pub d_video: usize,
    pub vocab_size: usize,
    pub noise: f64,
    pub query_len: [usize; 2],
    pub segment_len: [usize; 2],
    pub seconds_per_frame: f64,
    pub train_count: usize,
    pub test_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            t: 32,
            d_video: 16,
            vocab_size: 64,
            noise: 0.3,
            query_len: [3, 6],
            segment_len: [4, 12],
            seconds_per_frame: 1.0,
            train_count: 512,
            test_count: 128,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Hyperparameters at the scale reported for ActivityNet Captions.
    /// Valid, but not meant to train on a single CPU core.
    pub fn full_preset() -> Self {
        let mut c = RunConfig::default();
        c.model.d_model = 512;
        c.model.hidden = 512;
        c.model.d_context = 512;
        c.model.d_boundary = 512;
        c.model.d_video_in = 500;
        c.model.vocab_size = 10_000;
        c.model.max_t = 200;
        c.model.max_n = 64;
        c.train.lr = 8e-4;
        c.train.batch_size = 64;
        c.data.t = 200;
        c.data.d_video = 500;
        c.data.vocab_size = 10_000;
        c.data.segment_len = [8, 100];
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.t > self.model.max_t {
            return Err(Error::Config(format!(
                "data.t = {} exceeds model.max_t = {}",
                self.data.t, self.model.max_t
            )));
        }
        if self.data.d_video != self.model.d_video_in || self.data.vocab_size > self.model.vocab_size {
            return Err(Error::Config(
                "data.d_video must equal model.d_video_in and data.vocab_size must fit model.vocab_size"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn to_flat_json(&self) -> Result<Value> {
        let mut out = Map::new();
        flatten("", serde_json::to_value(self)?, &mut out);
        Ok(Value::Object(out))
    }

    pub fn from_flat_json(value: &Value) -> Result<Self> {
        let Value::Object(flat) = value else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let mut base = RunConfig::default().to_flat_json()?;
        let Value::Object(base_map) = &mut base else {
            unreachable!()
        };
        for (k, v) in flat {
            if !base_map.contains_key(k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            base_map.insert(k.clone(), v.clone());
        }
        let nested = unflatten(base_map);
        serde_json::from_value(nested).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key=value` overrides. Values parse as JSON when possible and
    /// as plain strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut flat = self.to_flat_json()?;
        let Value::Object(map) = &mut flat else {
            unreachable!()
        };
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            if !map.contains_key(k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_owned()));
            map.insert(k.to_owned(), v);
        }
        RunConfig::from_flat_json(&flat)
    }
}

fn flatten(prefix: &str, value: Value, out: &mut Map<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_owned(), other);
        }
    }
}

fn unflatten(flat: &Map<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_owned(), v.clone());
            } else {
                node = node
                    .entry(part.to_owned())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("config keys do not collide with sections");
            }
        }
    }
    Value::Object(root)
}
