//! Ranked segment predictions from score maps and the `R@n, IoU=m` metric.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::data::GroundingExample;
use crate::error::{Error, Result};
use crate::model::Cbln;
use crate::params::ParameterStore;
use crate::segment::Segment;
use crate::tensor::Tensor;
use crate::training::compute_iou;

/// Segments in rank order with their scores.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Prediction {
    pub ranked: Vec<(Segment, f64)>,
}

impl Prediction {
    pub fn best(&self) -> Option<Segment> {
        self.ranked.first().map(|&(p, _)| p)
    }
}

/// Greedy non-maximum suppression over the `s ≤ e` cells of a `T×T` map.
///
/// Candidates are visited by descending score (ties by start, then end);
/// one is kept unless its IoU with an already kept segment exceeds
/// `nms_iou`. At most `n` segments are returned.
pub fn top_n_segments(m: &Tensor, n: usize, nms_iou: f64) -> Result<Prediction> {
    if n == 0 {
        return Err(Error::Input("top-n needs n >= 1".into()));
    }
    let t = match m.shape() {
        [r, c] if r == c => *r,
        s => return Err(Error::dim("top_n_segments", s, &[])),
    };
    if t == 0 {
        return Err(Error::Input("score map has no valid cells".into()));
    }
    let mut cells: Vec<(Segment, f64)> = (0..t)
        .flat_map(|s| (s..t).map(move |e| Segment::new(s, e)))
        .map(|p| (p, m.at(p.start, p.end)))
        .collect();
    cells.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept: Vec<(Segment, f64)> = Vec::with_capacity(n);
    for (p, score) in cells {
        if kept.len() == n {
            break;
        }
        let suppressed = kept
            .iter()
            .any(|&(q, _)| compute_iou(p, q).is_ok_and(|iou| iou > nms_iou));
        if !suppressed {
            kept.push((p, score));
        }
    }
    Ok(Prediction { ranked: kept })
}

/// Percentage of samples whose first `n` predictions contain a segment with
/// IoU ≥ `m` against the ground truth (IoU > `m` when `strict`).
pub fn recall_at(preds: &[Prediction], gts: &[Segment], n: usize, m: f64, strict: bool) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Metric("recall over an empty dataset".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if n == 0 {
        return Err(Error::Metric("recall needs n >= 1".into()));
    }
    let mut hits = 0usize;
    for (pred, &gt) in preds.iter().zip(gts) {
        let mut hit = false;
        for &(p, _) in pred.ranked.iter().take(n) {
            let iou = compute_iou(p, gt)?;
            if if strict { iou > m } else { iou >= m } {
                hit = true;
                break;
            }
        }
        hits += hit as usize;
    }
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

/// Start and end time in seconds of frames `p` in a `t`-frame video; the end
/// frame is covered up to its upper edge.
pub fn segment_to_timestamps(p: Segment, t: usize, duration_s: f64) -> Result<(f64, f64)> {
    if !(duration_s > 0.0) {
        return Err(Error::Input(format!(
            "duration must be positive, got {duration_s}"
        )));
    }
    if !p.fits(t) {
        return Err(Error::Index(format!("segment {p} outside a video of {t} frames")));
    }
    let scale = duration_s / t as f64;
    Ok((p.start as f64 * scale, (p.end + 1) as f64 * scale))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: Vec<MetricValue>,
}

impl MetricReport {
    pub fn get(&self, n: usize, m: f64) -> Option<f64> {
        let key = metric_name(n, m);
        self.metrics.iter().find(|v| v.metric == key).map(|v| v.value)
    }

    /// One `R@n,IoU=m: value` line per metric.
    pub fn to_text(&self) -> String {
        self.metrics
            .iter()
            .map(|v| format!("{}: {:.2}\n", v.metric, v.value))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.metrics)?)
    }
}

pub fn metric_name(n: usize, m: f64) -> String {
    format!("R@{n},IoU={m}")
}

/// Every `(n, m)` combination of the configuration.
pub fn evaluate(preds: &[Prediction], gts: &[Segment], cfg: &EvalConfig) -> Result<MetricReport> {
    let mut metrics = Vec::new();
    for &n in &cfg.n {
        for &m in &cfg.iou {
            metrics.push(MetricValue {
                metric: metric_name(n, m),
                value: recall_at(preds, gts, n, m, cfg.strict)?,
            });
        }
    }
    Ok(MetricReport { metrics })
}

/// Predictions for every example, keeping as many segments as the largest
/// configured `n`.
pub fn predict_dataset(
    model: &Cbln,
    store: &ParameterStore,
    data: &[GroundingExample],
    cfg: &EvalConfig,
) -> Result<Vec<Prediction>> {
    let n = cfg.n.iter().copied().max().unwrap_or(1);
    data.par_iter()
        .map(|ex| top_n_segments(&model.predict(store, &ex.features, &ex.tokens)?, n, cfg.nms_iou))
        .collect()
}

/// Scores `data` with the model and reports every configured metric.
pub fn evaluate_model(
    model: &Cbln,
    store: &ParameterStore,
    data: &[GroundingExample],
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    let preds = predict_dataset(model, store, data, cfg)?;
    let gts: Vec<Segment> = data.iter().map(|ex| ex.gt).collect();
    evaluate(&preds, &gts, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(s: usize, e: usize) -> Segment {
        Segment::new(s, e)
    }

    fn pred(ps: &[(usize, usize)]) -> Prediction {
        Prediction {
            ranked: ps
                .iter()
                .enumerate()
                .map(|(i, &(s, e))| (seg(s, e), 1.0 - i as f64 * 0.1))
                .collect(),
        }
    }

    #[test]
    fn argmax_is_top_one() {
        let mut m = Tensor::full(&[8, 8], 0.1);
        m.data_mut()[2 * 8 + 6] = 0.9;
        m.data_mut()[6 * 8 + 2] = 0.99; // invalid cell, never returned
        let p = top_n_segments(&m, 1, 0.5).unwrap();
        assert_eq!(p.ranked, vec![(seg(2, 6), 0.9)]);
    }

    #[test]
    fn nms_skips_near_duplicates() {
        let mut m = Tensor::zeros(&[8, 8]);
        m.data_mut()[5] = 0.9; // (0, 5)
        m.data_mut()[4] = 0.85; // (0, 4)
        m.data_mut()[6 * 8 + 7] = 0.6; // (6, 7)
        let p = top_n_segments(&m, 2, 0.5).unwrap();
        assert_eq!(p.ranked, vec![(seg(0, 5), 0.9), (seg(6, 7), 0.6)]);
        assert!((compute_iou(seg(0, 5), seg(0, 4)).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn survivors_are_all_returned() {
        let m = Tensor::full(&[2, 2], 0.5);
        // (0,0), (0,1), (1,1): (0,1) overlaps both singles with IoU 0.5.
        let p = top_n_segments(&m, 10, 0.4).unwrap();
        assert_eq!(p.ranked.len(), 2);
        let p = top_n_segments(&m, 10, 1.0).unwrap();
        assert_eq!(
            p.ranked.iter().map(|r| r.0).collect::<Vec<_>>(),
            vec![seg(0, 0), seg(0, 1), seg(1, 1)]
        );
        assert!(top_n_segments(&m, 0, 0.5).is_err());
        assert!(top_n_segments(&Tensor::zeros(&[0, 0]), 1, 0.5).is_err());
    }

    #[test]
    fn recall_examples() {
        assert_eq!(
            recall_at(&[pred(&[(2, 5)])], &[seg(2, 5)], 1, 0.7, false).unwrap(),
            100.0
        );
        assert!(matches!(
            recall_at(&[], &[], 1, 0.5, false),
            Err(Error::Metric(_))
        ));

        let hits = 2760;
        let preds: Vec<_> = (0..10_000)
            .map(|i| pred(&[if i < hits { (0, 3) } else { (5, 6) }]))
            .collect();
        let gts = vec![seg(0, 3); 10_000];
        let r = recall_at(&preds, &gts, 1, 0.7, false).unwrap();
        assert_eq!(format!("{r:.2}"), "27.60");
    }

    #[test]
    fn hand_counted_fixture() {
        let gts = [seg(0, 3), seg(4, 7), seg(2, 2), seg(0, 9)];
        let preds = [
            pred(&[(0, 3), (5, 9)]), // IoU 1
            pred(&[(0, 1), (4, 6)]), // 0, then 0.75
            pred(&[(1, 3), (2, 2)]), // 1/3, then 1
            pred(&[(0, 4), (0, 9)]), // 0.5, then 1
        ];
        assert_eq!(recall_at(&preds, &gts, 1, 0.5, false).unwrap(), 50.0);
        assert_eq!(recall_at(&preds, &gts, 1, 0.5, true).unwrap(), 25.0);
        assert_eq!(recall_at(&preds, &gts, 2, 0.7, false).unwrap(), 100.0);
    }

    #[test]
    fn timestamps() {
        assert_eq!(segment_to_timestamps(seg(3, 6), 10, 20.0).unwrap(), (6.0, 14.0));
        assert_eq!(segment_to_timestamps(seg(0, 9), 10, 20.0).unwrap(), (0.0, 20.0));
        assert_eq!(segment_to_timestamps(seg(0, 0), 10, 20.0).unwrap().0, 0.0);
        assert!(matches!(
            segment_to_timestamps(seg(3, 10), 10, 20.0),
            Err(Error::Index(_))
        ));
        assert!(segment_to_timestamps(seg(0, 1), 10, 0.0).is_err());
    }

    #[test]
    fn report_formats() {
        let gts = [seg(0, 3)];
        let preds = [pred(&[(0, 3)])];
        let r = evaluate(&preds, &gts, &EvalConfig::default()).unwrap();
        assert_eq!(r.metrics.len(), 6);
        assert!(r.to_text().starts_with("R@1,IoU=0.3: 100.00\n"));
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json[4]["metric"], "R@5,IoU=0.5");
        assert_eq!(r.get(5, 0.7), Some(100.0));
    }
}
