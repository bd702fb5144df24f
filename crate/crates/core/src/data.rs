//! Grounding examples: a synthetic planted-motif generator, the on-disk
//! dataset format, and ingestion of pre-extracted real features.
//!
//! # Dataset files
//!
//! A dataset is a JSON manifest plus a payload file next to it with the
//! extension replaced by `.f32`:
//!
//! ```text
//! { "version": 1, "count": R, "T": 32, "D_v": 16,
//!   "records": [ { "feature_offset": 0, "N": 4, "tokens": [...],
//!                  "gt_s": 3, "gt_e": 9, "duration_s": 32.0 }, ... ] }
//! ```
//!
//! The payload holds every record's `T×D_v` features row-major as
//! little-endian IEEE-754 binary32, records back to back; `feature_offset`
//! is the byte offset of a record's first value. A record may carry a
//! `"frames"` field when its length differs from the manifest `T`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::seeds::{self, Stream};
use crate::segment::Segment;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingExample {
    /// `T×D_v` frame features.
    pub features: Tensor,
    pub tokens: Vec<usize>,
    pub gt: Segment,
    pub duration_s: f64,
}

impl GroundingExample {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }
}

/// Planted-motif task: every token owns a fixed random motif vector; the
/// ground-truth frames show the mean motif of the query tokens and the
/// remaining frames show one motif absent from the query, all under
/// Gaussian noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub t: usize,
    pub d_video: usize,
    pub vocab_size: usize,
    /// `vocab_size × D_v`.
    pub motifs: Tensor,
    pub noise: f64,
    pub query_len: [usize; 2],
    pub segment_len: [usize; 2],
    pub seconds_per_frame: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(cfg: &DataConfig, seed: u64) -> Result<Self> {
        let mut rng = seeds::rng(seed, Stream::Motifs, 0, 0);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let motifs = (0..cfg.vocab_size * cfg.d_video)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let spec = SyntheticSpec {
            t: cfg.t,
            d_video: cfg.d_video,
            vocab_size: cfg.vocab_size,
            motifs: Tensor::matrix(cfg.vocab_size, cfg.d_video, motifs)?,
            noise: cfg.noise,
            query_len: cfg.query_len,
            segment_len: cfg.segment_len,
            seconds_per_frame: cfg.seconds_per_frame,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let [n_lo, n_hi] = self.query_len;
        let [s_lo, s_hi] = self.segment_len;
        if self.t == 0 || self.d_video == 0 {
            return bad(format!(
                "synthetic T and D_v must be positive, got {} and {}",
                self.t, self.d_video
            ));
        }
        if s_lo == 0 || s_lo > s_hi || s_hi > self.t {
            return bad(format!(
                "segment length range [{s_lo}, {s_hi}] does not fit in T = {}",
                self.t
            ));
        }
        if n_lo == 0 || n_lo > n_hi {
            return bad(format!("query length range [{n_lo}, {n_hi}] is empty"));
        }
        if n_hi + 1 > self.vocab_size {
            return bad(format!(
                "vocabulary of {} cannot hold {n_hi} distinct tokens plus a distractor",
                self.vocab_size
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!(
                "noise must be a finite non-negative number, got {}",
                self.noise
            ));
        }
        if !(self.seconds_per_frame > 0.0 && self.seconds_per_frame.is_finite()) {
            return bad(format!(
                "seconds_per_frame must be positive, got {}",
                self.seconds_per_frame
            ));
        }
        if self.motifs.shape() != [self.vocab_size, self.d_video] {
            return Err(Error::dim(
                "motifs",
                self.motifs.shape(),
                &[self.vocab_size, self.d_video],
            ));
        }
        Ok(())
    }

    /// Mean of the motif rows of `tokens`.
    pub fn motif_mean(&self, tokens: &[usize]) -> Vec<f64> {
        let mut mean = vec![0.0; self.d_video];
        for &tok in tokens {
            for (m, v) in mean.iter_mut().zip(self.motifs.row(tok)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= tokens.len() as f64);
        mean
    }

    /// Record `index` of the dataset defined by this spec.
    pub fn record(&self, index: u64) -> Result<GroundingExample> {
        generate_example(self, &mut seeds::rng(self.seed, Stream::Record, index, 0))
    }

    /// Records `start .. start + count`.
    pub fn records(&self, start: u64, count: usize) -> Result<Vec<GroundingExample>> {
        (start..start + count as u64).map(|i| self.record(i)).collect()
    }
}

/// Draws one example. Feature values are rounded to binary32 so that a
/// saved dataset reloads bit for bit.
pub fn generate_example(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<GroundingExample> {
    spec.validate()?;
    let n = rng.gen_range(spec.query_len[0]..=spec.query_len[1]);
    let picked = sample(rng, spec.vocab_size, n + 1).into_vec();
    let (tokens, distractor) = (picked[..n].to_vec(), picked[n]);
    let len = rng.gen_range(spec.segment_len[0]..=spec.segment_len[1]);
    let start = rng.gen_range(0..=spec.t - len);
    let gt = Segment::new(start, start + len - 1);

    let inside = spec.motif_mean(&tokens);
    let outside = spec.motifs.row(distractor).to_vec();
    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut data = Vec::with_capacity(spec.t * spec.d_video);
    for t in 0..spec.t {
        let base = if t >= gt.start && t <= gt.end {
            &inside
        } else {
            &outside
        };
        for &b in base {
            let noise = if spec.noise > 0.0 { normal.sample(rng) } else { 0.0 };
            data.push((b + noise) as f32 as f64);
        }
    }
    Ok(GroundingExample {
        features: Tensor::matrix(spec.t, spec.d_video, data)?,
        tokens,
        gt,
        duration_s: spec.t as f64 * spec.seconds_per_frame,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    count: usize,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "D_v")]
    d_video: usize,
    records: Vec<RecordEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordEntry {
    feature_offset: u64,
    #[serde(rename = "N")]
    n: usize,
    tokens: Vec<usize>,
    gt_s: usize,
    gt_e: usize,
    duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frames: Option<usize>,
}

/// Payload path belonging to a manifest path.
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("f32")
}

/// Writes the manifest at `path` and the payload beside it.
pub fn save_dataset(examples: &[GroundingExample], path: &Path) -> Result<()> {
    let t = examples.first().map_or(0, GroundingExample::frames);
    let d_video = examples.first().map_or(0, GroundingExample::feature_dim);
    let mut payload = Vec::new();
    let mut records = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        if ex.feature_dim() != d_video {
            return Err(Error::Data(format!(
                "record {i} has feature width {} but record 0 has {d_video}",
                ex.feature_dim()
            )));
        }
        records.push(RecordEntry {
            feature_offset: payload.len() as u64,
            n: ex.tokens.len(),
            tokens: ex.tokens.clone(),
            gt_s: ex.gt.start,
            gt_e: ex.gt.end,
            duration_s: ex.duration_s,
            frames: (ex.frames() != t).then_some(ex.frames()),
        });
        for &v in ex.features.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        count: examples.len(),
        t,
        d_video,
        records,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(path, text)?;
    fs::write(payload_path(path), payload)?;
    Ok(())
}

/// Byte offset of a 1-based line/column position reported by the JSON parser.
fn json_offset(text: &str, err: &serde_json::Error) -> u64 {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(err.line().saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + err.column().saturating_sub(1)) as u64
}

pub fn load_dataset(path: &Path) -> Result<Vec<GroundingExample>> {
    let text = fs::read_to_string(path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(json_offset(&text, &e), format!("malformed manifest: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        let at = text.find("\"version\"").unwrap_or(0) as u64;
        return Err(Error::format(
            at,
            format!(
                "manifest version {} is not supported (expected {FORMAT_VERSION})",
                manifest.version
            ),
        ));
    }
    if manifest.count != manifest.records.len() {
        let at = text.find("\"count\"").unwrap_or(0) as u64;
        return Err(Error::format(
            at,
            format!(
                "count is {} but {} records are listed",
                manifest.count,
                manifest.records.len()
            ),
        ));
    }
    let payload = fs::read(payload_path(path))?;
    let mut expected = 0u64;
    let mut out = Vec::with_capacity(manifest.records.len());
    for (i, r) in manifest.records.iter().enumerate() {
        let frames = r.frames.unwrap_or(manifest.t);
        let bytes = (frames * manifest.d_video * 4) as u64;
        if r.feature_offset != expected {
            return Err(Error::format(
                r.feature_offset,
                format!(
                    "record {i} starts at payload byte {} but {expected} was expected",
                    r.feature_offset
                ),
            ));
        }
        let end = expected + bytes;
        if end > payload.len() as u64 {
            return Err(Error::format(
                payload.len() as u64,
                format!(
                    "payload ends at byte {} but record {i} needs bytes {expected}..{end}",
                    payload.len()
                ),
            ));
        }
        if r.n != r.tokens.len() {
            return Err(Error::Data(format!(
                "record {i} declares N = {} but lists {} tokens",
                r.n,
                r.tokens.len()
            )));
        }
        let gt = Segment::new(r.gt_s, r.gt_e);
        if !gt.fits(frames) {
            return Err(Error::Data(format!(
                "record {i} ground truth {gt} outside {frames} frames"
            )));
        }
        let data = payload[expected as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push(GroundingExample {
            features: Tensor::matrix(frames, manifest.d_video, data)?,
            tokens: r.tokens.clone(),
            gt,
            duration_s: r.duration_s,
        });
        expected = end;
    }
    if expected != payload.len() as u64 {
        return Err(Error::format(
            expected,
            format!(
                "payload has {} bytes but the records cover {expected}",
                payload.len()
            ),
        ));
    }
    Ok(out)
}

/// Manifest for pre-extracted features. Feature paths are resolved against
/// the manifest's directory; each file holds `frames × dim` little-endian
/// binary32 values.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealManifest {
    pub dim: usize,
    pub samples: Vec<RealSample>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealSample {
    pub id: String,
    pub features: PathBuf,
    pub tokens: Vec<usize>,
    pub start_s: f64,
    pub end_s: f64,
    pub duration_s: f64,
}

/// Row indices `floor(i·frames/max_t)` for `i < max_t`, or all rows when
/// the sequence already fits.
pub fn subsample_indices(frames: usize, max_t: usize) -> Vec<usize> {
    if frames <= max_t {
        return (0..frames).collect();
    }
    (0..max_t).map(|i| i * frames / max_t).collect()
}

/// `x` rounded down, treating values within rounding noise of an integer as
/// that integer.
fn floor_snapped(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x.floor()
    }
}

fn ceil_snapped(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x.ceil()
    }
}

/// Frame segment covering `[start_s, end_s]` in a `t`-frame video:
/// `floor(τ_s·T/dur)` to `ceil(τ_e·T/dur) − 1`, clamped to the video.
pub fn timestamps_to_segment(start_s: f64, end_s: f64, t: usize, duration_s: f64) -> Result<Segment> {
    if t == 0 || !(duration_s > 0.0) {
        return Err(Error::Data(format!(
            "cannot map timestamps into {t} frames over {duration_s} s"
        )));
    }
    if !(0.0 <= start_s && start_s <= end_s && end_s <= duration_s) {
        return Err(Error::Data(format!(
            "timestamps ({start_s}, {end_s}) not inside a {duration_s} s video"
        )));
    }
    let scale = t as f64 / duration_s;
    let last = (t - 1) as f64;
    let s = floor_snapped(start_s * scale).clamp(0.0, last);
    let e = (ceil_snapped(end_s * scale) - 1.0).clamp(s, last);
    Ok(Segment::new(s as usize, e as usize))
}

fn read_f32_file(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(
            bytes.len() as u64 - bytes.len() as u64 % 4,
            format!("{} has a trailing partial value", path.display()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Loads real features listed in a manifest, subsampling long videos to
/// `max_t` frames and converting ground-truth timestamps to frames.
pub fn ingest_real_features(manifest_path: &Path, max_t: usize) -> Result<Vec<GroundingExample>> {
    if max_t == 0 {
        return Err(Error::Config("max_t must be positive".into()));
    }
    let text = fs::read_to_string(manifest_path)?;
    let manifest: RealManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(json_offset(&text, &e), format!("malformed feature manifest: {e}")))?;
    if manifest.dim == 0 {
        return Err(Error::Config("feature dim must be positive".into()));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .samples
        .iter()
        .map(|s| {
            let with_id = |e: Error| Error::Data(format!("sample `{}`: {e}", s.id));
            let raw = read_f32_file(&base.join(&s.features)).map_err(with_id)?;
            if raw.len() % manifest.dim != 0 || raw.is_empty() {
                return Err(Error::Data(format!(
                    "sample `{}`: {} values do not form rows of width {}",
                    s.id,
                    raw.len(),
                    manifest.dim
                )));
            }
            let frames = raw.len() / manifest.dim;
            let rows = subsample_indices(frames, max_t);
            let mut data = Vec::with_capacity(rows.len() * manifest.dim);
            for &r in &rows {
                data.extend_from_slice(&raw[r * manifest.dim..(r + 1) * manifest.dim]);
            }
            let gt = timestamps_to_segment(s.start_s, s.end_s, rows.len(), s.duration_s).map_err(with_id)?;
            Ok(GroundingExample {
                features: Tensor::matrix(rows.len(), manifest.dim, data)?,
                tokens: s.tokens.clone(),
                gt,
                duration_s: s.duration_s,
            })
        })
        .collect()
}
