//! Segment-level precision/recall under overlap matching, and top-k
//! re-identification accuracy.

use std::collections::BTreeMap;
use std::fmt;
use std::io;

use serde::Serialize;

use crate::reid::Prediction;
use crate::segmenter::Segment;

/// Counts under overlap matching. `tp` and `fp` count predicted segments,
/// `fn_` counts ground-truth segments, so `tp + fn_` need not equal |truth|.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn new(tp: usize, fp: usize, fn_: usize) -> Self {
        ConfusionCounts { tp, fp, fn_ }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_)
    }
}

/// A ratio that may have a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Ratio {
    Value(f64),
    Undefined,
}

impl Ratio {
    pub fn of(num: usize, den: usize) -> Ratio {
        if den == 0 {
            Ratio::Undefined
        } else {
            Ratio::Value(num as f64 / den as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Ratio::Value(v) => Some(v),
            Ratio::Undefined => None,
        }
    }

    /// Rounded to a whole percentage.
    pub fn percent(self) -> Option<i64> {
        self.value().map(|v| (v * 100.0).round() as i64)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ratio::Value(v) => write!(f, "{v:.4}"),
            Ratio::Undefined => f.write_str("undefined"),
        }
    }
}

/// Overlap matching over inclusive frame intervals; inputs may be in any order.
pub fn match_intervals(predicted: &[(usize, usize)], truth: &[(usize, usize)]) -> ConfusionCounts {
    let truth_index = OverlapIndex::new(truth);
    let pred_index = OverlapIndex::new(predicted);
    let tp = predicted.iter().filter(|p| any_overlap(p, &truth_index)).count();
    let fn_ = truth.iter().filter(|t| !any_overlap(t, &pred_index)).count();
    ConfusionCounts::new(tp, predicted.len() - tp, fn_)
}

/// Sorted starts with running maximum of ends, answering "does anything
/// overlap [a, b]?" in O(log n).
struct OverlapIndex {
    starts: Vec<usize>,
    max_end: Vec<usize>,
}

impl OverlapIndex {
    fn new(intervals: &[(usize, usize)]) -> Self {
        let mut sorted = intervals.to_vec();
        sorted.sort_unstable();
        let starts = sorted.iter().map(|i| i.0).collect();
        let mut max_end = Vec::with_capacity(sorted.len());
        let mut m = 0;
        for (i, iv) in sorted.iter().enumerate() {
            m = if i == 0 { iv.1 } else { m.max(iv.1) };
            max_end.push(m);
        }
        OverlapIndex { starts, max_end }
    }
}

fn any_overlap(q: &(usize, usize), index: &OverlapIndex) -> bool {
    let n = index.starts.partition_point(|&s| s <= q.1);
    n > 0 && index.max_end[n - 1] >= q.0
}

/// [`match_intervals`] on segments of a single recording.
pub fn match_segments(predicted: &[Segment], truth: &[Segment]) -> ConfusionCounts {
    let iv = |s: &[Segment]| s.iter().map(|s| (s.start_frame, s.end_frame)).collect::<Vec<_>>();
    match_intervals(&iv(predicted), &iv(truth))
}

pub fn precision_recall(c: ConfusionCounts) -> (Ratio, Ratio) {
    (Ratio::of(c.tp, c.tp + c.fp), Ratio::of(c.tp, c.tp + c.fn_))
}

/// Harmonic mean of precision and recall; undefined if either is, or both are 0.
pub fn f1(c: ConfusionCounts) -> Ratio {
    match precision_recall(c) {
        (Ratio::Value(p), Ratio::Value(r)) if p + r > 0.0 => Ratio::Value(2.0 * p * r / (p + r)),
        _ => Ratio::Undefined,
    }
}

/// Fraction of queries whose true id is within the first `k` ranked entries.
/// `k` of 0 or an empty query set is undefined.
pub fn topk_accuracy(predictions: &[(String, Prediction)], k: usize) -> Ratio {
    if k == 0 {
        return Ratio::Undefined;
    }
    let hits = predictions.iter().filter(|(truth, p)| p.hit_within(truth, k)).count();
    Ratio::of(hits, predictions.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordingEvaluation {
    pub recording_id: String,
    pub counts: ConfusionCounts,
}

pub const EVALUATION_HEADER: &str = "recording_id,tp,fp,fn,precision,recall,f1";

/// Matches predicted against truth separately for each recording appearing
/// in either list, in recording order.
pub fn evaluate_by_recording(predicted: &[Segment], truth: &[Segment]) -> Vec<RecordingEvaluation> {
    let mut groups: BTreeMap<&str, (Vec<Segment>, Vec<Segment>)> = BTreeMap::new();
    for s in predicted {
        groups.entry(&s.recording_id).or_default().0.push(s.clone());
    }
    for s in truth {
        groups.entry(&s.recording_id).or_default().1.push(s.clone());
    }
    groups
        .into_iter()
        .map(|(id, (p, t))| RecordingEvaluation {
            recording_id: id.to_string(),
            counts: match_segments(&p, &t),
        })
        .collect()
}

/// One row per recording plus a final `TOTAL` row.
pub fn write_evaluation_csv<W: io::Write>(writer: W, rows: &[RecordingEvaluation]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(EVALUATION_HEADER.split(','))?;
    let total = rows.iter().fold(ConfusionCounts::default(), |a, r| a + r.counts);
    for (id, c) in rows
        .iter()
        .map(|r| (r.recording_id.as_str(), r.counts))
        .chain(std::iter::once(("TOTAL", total)))
    {
        let (p, r) = precision_recall(c);
        w.write_record([
            id.to_string(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            p.to_string(),
            r.to_string(),
            f1(c).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reid::Ranked;
    use proptest::prelude::*;

    fn brute(p: &[(usize, usize)], t: &[(usize, usize)]) -> ConfusionCounts {
        let hit = |a: &(usize, usize), b: &(usize, usize)| a.0 <= b.1 && b.0 <= a.1;
        let tp = p.iter().filter(|a| t.iter().any(|b| hit(a, b))).count();
        let fn_ = t.iter().filter(|b| !p.iter().any(|a| hit(a, b))).count();
        ConfusionCounts::new(tp, p.len() - tp, fn_)
    }

    #[test]
    fn examples() {
        assert_eq!(match_intervals(&[(10, 20)], &[(15, 30)]), ConfusionCounts::new(1, 0, 0));
        assert_eq!(match_intervals(&[(10, 20)], &[(21, 30)]), ConfusionCounts::new(0, 1, 1));
        assert_eq!(match_intervals(&[(0, 5), (6, 10)], &[(0, 10)]), ConfusionCounts::new(2, 0, 0));
        assert_eq!(match_intervals(&[(20, 20)], &[(20, 20)]), ConfusionCounts::new(1, 0, 0));
    }

    #[test]
    fn undefined_ratios() {
        let (p, r) = precision_recall(ConfusionCounts::default());
        assert_eq!((p, r), (Ratio::Undefined, Ratio::Undefined));
        assert_eq!(p.to_string(), "undefined");
        assert_eq!(f1(ConfusionCounts::new(0, 3, 2)), Ratio::Undefined);
        assert_eq!(topk_accuracy(&[], 1), Ratio::Undefined);
    }

    #[test]
    fn topk_counts_by_hand() {
        let pred = |first: &str| Prediction {
            ranked: [first, "X", "Y"]
                .iter()
                .map(|id| Ranked { individual_id: id.to_string(), distance: 0.0 })
                .collect(),
        };
        let mut qs: Vec<(String, Prediction)> = (0..7).map(|_| ("A".into(), pred("A"))).collect();
        qs.extend((0..3).map(|_| ("Y".to_string(), pred("B"))));
        assert_eq!(topk_accuracy(&qs, 1), Ratio::Value(0.7));
        assert_eq!(topk_accuracy(&qs, 3), Ratio::Value(1.0));
        assert_eq!(topk_accuracy(&qs, 50), Ratio::Value(1.0));
    }

    #[test]
    fn per_recording_csv() {
        let seg = |r: &str, a, b| Segment::new(r, a, b, crate::segmenter::Source::Human);
        let rows = evaluate_by_recording(&[seg("R1", 0, 5), seg("R2", 3, 4)], &[seg("R1", 4, 9), seg("R3", 0, 1)]);
        assert_eq!(rows.len(), 3);
        let mut buf = Vec::new();
        write_evaluation_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], EVALUATION_HEADER);
        assert_eq!(lines[1], "R1,1,0,0,1.0000,1.0000,1.0000");
        assert_eq!(lines[3], "R3,0,0,1,undefined,0.0000,undefined");
        assert_eq!(lines[4], "TOTAL,1,1,1,0.5000,0.5000,0.5000");
    }

    fn intervals() -> impl Strategy<Value = Vec<(usize, usize)>> {
        prop::collection::vec((0usize..200, 0usize..15).prop_map(|(s, l)| (s, s + l)), 0..20)
    }

    proptest! {
        #[test]
        fn sweep_equals_double_loop(p in intervals(), t in intervals()) {
            let c = match_intervals(&p, &t);
            prop_assert_eq!(c, brute(&p, &t));
            prop_assert_eq!(c.tp + c.fp, p.len());
            prop_assert!(c.fn_ <= t.len());
        }

        #[test]
        fn identical_lists_are_perfect(t in intervals()) {
            let c = match_intervals(&t, &t);
            prop_assert_eq!(c, ConfusionCounts::new(t.len(), 0, 0));
        }
    }
}
