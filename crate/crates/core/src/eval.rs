//! COCO-protocol detection metrics.
//!
//! IoU thresholds `0.50:0.05:0.95`, greedy score-descending matching to the
//! best still-unmatched ground truth, 101-point interpolated precision.
//! Classes without ground truth are left out of the averages.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    #[serde(rename = "class")]
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub class_id: usize,
    pub bbox: [f64; 4],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    #[serde(rename = "AR1")]
    pub ar1: f64,
    #[serde(rename = "AR10")]
    pub ar10: f64,
    /// Detections ignored because a field was out of range.
    pub skipped: usize,
}

pub const RECALL_POINTS: usize = 101;
pub const MAX_DETS: usize = 100;

/// `0.50, 0.55, ..., 0.95`, each computed as `(50 + 5k) / 100`.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |x: [f64; 4]| (x[2] - x[0]) * (x[3] - x[1]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn valid_box(b: [f64; 4]) -> bool {
    b.iter().all(|v| v.is_finite()) && b[0] < b[2] && b[1] < b[3]
}

/// Score descending, then lower image id, then lexicographic box.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image_id.cmp(&b.image_id))
        .then_with(|| {
            a.bbox
                .iter()
                .zip(&b.bbox)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

struct ClassData<'a> {
    gts: BTreeMap<u64, Vec<[f64; 4]>>,
    dets: BTreeMap<u64, Vec<&'a Detection>>,
    num_gt: usize,
}

/// Per-detection match flags (score order) at one threshold using at most
/// `max_dets` detections per image.
fn match_class<'a>(data: &ClassData<'a>, thr: f64, max_dets: usize) -> Vec<(&'a Detection, bool)> {
    let mut out = Vec::new();
    for (img, dets) in &data.dets {
        let gts = data.gts.get(img).map(Vec::as_slice).unwrap_or(&[]);
        let mut taken = vec![false; gts.len()];
        for d in dets.iter().take(max_dets) {
            let mut best = None;
            let mut best_iou = thr;
            for (k, g) in gts.iter().enumerate() {
                if taken[k] {
                    continue;
                }
                let v = iou(d.bbox, *g);
                if v >= best_iou {
                    best_iou = v;
                    best = Some(k);
                }
            }
            if let Some(k) = best {
                taken[k] = true;
            }
            out.push((*d, best.is_some()));
        }
    }
    out.sort_by(|a, b| detection_order(a.0, b.0));
    out
}

fn average_precision(matches: &[(&Detection, bool)], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(matches.len());
    let mut recall = Vec::with_capacity(matches.len());
    let mut tp = 0usize;
    for (k, &(_, hit)) in matches.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for k in (1..precision.len()).rev() {
        if precision[k] > precision[k - 1] {
            precision[k - 1] = precision[k];
        }
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

pub fn evaluate(detections: &[Detection], ground_truth: &[GroundTruth], num_classes: usize) -> EvalResult {
    let mut skipped = 0;
    let mut classes: Vec<ClassData<'_>> = (0..num_classes)
        .map(|_| ClassData {
            gts: BTreeMap::new(),
            dets: BTreeMap::new(),
            num_gt: 0,
        })
        .collect();
    for g in ground_truth {
        if g.class_id < num_classes {
            let c = &mut classes[g.class_id];
            c.gts.entry(g.image_id).or_default().push(g.bbox);
            c.num_gt += 1;
        }
    }
    for d in detections {
        if d.class_id >= num_classes || !valid_box(d.bbox) || !d.score.is_finite() {
            skipped += 1;
            continue;
        }
        classes[d.class_id].dets.entry(d.image_id).or_default().push(d);
    }
    for c in &mut classes {
        for dets in c.dets.values_mut() {
            dets.sort_by(|a, b| detection_order(a, b));
        }
    }

    let thresholds = iou_thresholds();
    let mut ap = [0.0; 10];
    let mut ar1 = 0.0;
    let mut ar10 = 0.0;
    let mut counted = 0usize;
    for c in classes.iter().filter(|c| c.num_gt > 0) {
        counted += 1;
        for (t, &thr) in thresholds.iter().enumerate() {
            let m = match_class(c, thr, MAX_DETS);
            ap[t] += average_precision(&m, c.num_gt);
            let hits = |k| match_class(c, thr, k).iter().filter(|x| x.1).count() as f64;
            ar1 += hits(1) / c.num_gt as f64;
            ar10 += hits(10) / c.num_gt as f64;
        }
    }
    if counted == 0 {
        return EvalResult {
            skipped,
            ..Default::default()
        };
    }
    let n = counted as f64;
    EvalResult {
        map: ap.iter().sum::<f64>() / (10.0 * n),
        ap50: ap[0] / n,
        ap75: ap[5] / n,
        ar1: ar1 / (10.0 * n),
        ar10: ar10 / (10.0 * n),
        skipped,
    }
}

/// One JSON object per line.
pub fn write_detections(mut out: impl Write, detections: &[Detection]) -> Result<()> {
    for d in detections {
        let line = serde_json::to_string(d).expect("detection serializes");
        writeln!(out, "{line}").map_err(|e| Error::io("writing detections", e))?;
    }
    Ok(())
}

pub fn read_detections(input: impl BufRead) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (index, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("reading detections", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let d = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: "detections".into(),
            index,
            reason: e.to_string(),
        })?;
        out.push(d);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(img: u64, b: [f64; 4]) -> GroundTruth {
        GroundTruth {
            image_id: img,
            class_id: 0,
            bbox: b,
        }
    }

    fn det(img: u64, b: [f64; 4], s: f64) -> Detection {
        Detection {
            image_id: img,
            class_id: 0,
            bbox: b,
            score: s,
        }
    }

    #[test]
    fn thresholds_are_exact_decimals() {
        assert_eq!(iou_thresholds()[2], 0.6);
        assert_eq!(iou_thresholds()[9], 0.95);
    }

    #[test]
    fn precision_envelope_is_applied() {
        // hit, miss, hit: raw precision 1, 1/2, 2/3
        let g = [gt(0, [0.0, 0.0, 0.1, 0.1]), gt(0, [0.5, 0.5, 0.6, 0.6])];
        let d = [
            det(0, [0.0, 0.0, 0.1, 0.1], 0.9),
            det(0, [0.8, 0.8, 0.9, 0.9], 0.8),
            det(0, [0.5, 0.5, 0.6, 0.6], 0.7),
        ];
        let r = evaluate(&d, &g, 1);
        // recall points 0..=50 get precision 1, 51..=100 get 2/3
        let expect = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
        assert!((r.ap50 - expect).abs() < 1e-12);
        assert_eq!(r.ar1, 0.5);
        assert_eq!(r.ar10, 1.0);
    }

    #[test]
    fn malformed_detections_are_counted() {
        let g = [gt(0, [0.0, 0.0, 1.0, 1.0])];
        let d = [
            det(0, [0.5, 0.0, 0.2, 1.0], 0.9),
            det(0, [0.0, 0.0, f64::NAN, 1.0], 0.9),
            Detection {
                class_id: 7,
                ..det(0, [0.0, 0.0, 1.0, 1.0], 0.5)
            },
        ];
        let r = evaluate(&d, &g, 1);
        assert_eq!(r.skipped, 3);
        assert_eq!(r.map, 0.0);
    }

    #[test]
    fn jsonl_round_trip() {
        let d = vec![det(3, [0.1, 0.2, 0.3, 0.4], 0.5)];
        let mut buf = Vec::new();
        write_detections(&mut buf, &d).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"class\":0") && text.contains("\"box\""));
        assert_eq!(read_detections(&buf[..]).unwrap(), d);
    }
}
