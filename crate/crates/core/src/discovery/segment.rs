use ndarray::{Array1, Axis};

use super::AcousticSegment;
use crate::error::{Error, Result};
use crate::frontend::{FeatureSequence, Stage};

/// Smoothed frame-to-frame distance contour; entry `t` scores a boundary
/// between frames `t-1` and `t` (entry 0 is unused and zero).
pub fn distance_contour(f: &FeatureSequence) -> Vec<f64> {
    let t_len = f.num_frames();
    let mut raw = vec![0.0; t_len];
    for t in 1..t_len {
        let d = &f.frames.row(t) - &f.frames.row(t - 1);
        raw[t] = d.dot(&d).sqrt();
    }
    // 3-frame moving average over the defined part 1..T
    let mut smooth = vec![0.0; t_len];
    for t in 1..t_len {
        let lo = (t - 1).max(1);
        let hi = (t + 1).min(t_len - 1);
        smooth[t] = raw[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
    }
    smooth
}

/// Splits a normalized utterance at peaks of the distance contour that exceed
/// `mean + sensitivity * stddev`. Stronger boundaries win when two candidates
/// would leave a segment shorter than `min_frames`.
pub fn segment_utterance(f: &FeatureSequence, sensitivity: f64, min_frames: usize) -> Result<Vec<AcousticSegment>> {
    if f.stage != Stage::Normalized {
        return Err(Error::Stage {
            expected: Stage::Normalized.name(),
            found: f.stage.name(),
        });
    }
    if min_frames == 0 {
        return Err(Error::Config("min_frames must be at least 1".into()));
    }
    let t_len = f.num_frames();
    if t_len == 0 {
        return Err(Error::Shape(format!("{} has no frames", f.utterance_id)));
    }
    let mut boundaries: Vec<usize> = Vec::new();
    if t_len >= 2 * min_frames && t_len >= 3 {
        let contour = distance_contour(f);
        let vals = &contour[1..];
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std > 0.0 {
            let thr = mean + sensitivity * std;
            let mut candidates: Vec<usize> = (1..t_len)
                .filter(|&t| {
                    let c = contour[t];
                    let left = if t > 1 { contour[t - 1] } else { f64::NEG_INFINITY };
                    let right = if t + 1 < t_len { contour[t + 1] } else { f64::NEG_INFINITY };
                    c > thr && c > left && c >= right
                })
                .collect();
            candidates.sort_by(|&a, &b| contour[b].total_cmp(&contour[a]).then(a.cmp(&b)));
            for b in candidates {
                if b < min_frames || t_len - b < min_frames {
                    continue;
                }
                if boundaries.iter().all(|&k| k.abs_diff(b) >= min_frames) {
                    boundaries.push(b);
                }
            }
            boundaries.sort_unstable();
        }
    }
    let mut out = Vec::with_capacity(boundaries.len() + 1);
    let mut start = 0;
    for end in boundaries.into_iter().chain(std::iter::once(t_len)) {
        out.push(make_segment(f, start, end));
        start = end;
    }
    Ok(out)
}

pub(crate) fn make_segment(f: &FeatureSequence, start: usize, end: usize) -> AcousticSegment {
    let mean_vector: Array1<f64> = f
        .frames
        .slice(ndarray::s![start..end, ..])
        .mean_axis(Axis(0))
        .expect("segment is nonempty");
    AcousticSegment {
        utterance_id: f.utterance_id.clone(),
        start_frame: start,
        end_frame: end,
        mean_vector,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn norm(frames: Array2<f64>) -> FeatureSequence {
        FeatureSequence::new("u", frames, Stage::Normalized)
    }

    #[test]
    fn constant_sequence_is_one_segment() {
        let segs = segment_utterance(&norm(Array2::from_elem((30, 4), 0.7)), 1.0, 3).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!((segs[0].start_frame, segs[0].end_frame), (0, 30));
    }

    #[test]
    fn single_jump_gives_two_segments() {
        // small deterministic jitter with a 10-sigma jump at frame 17
        let jump = 17;
        let x = Array2::from_shape_fn((40, 3), |(t, d)| {
            let jitter = (((t * 7 + d * 13) % 11) as f64 - 5.0) * 0.02;
            jitter + if t >= jump { 10.0 } else { 0.0 }
        });
        let segs = segment_utterance(&norm(x), 1.0, 3).unwrap();
        assert_eq!(segs.len(), 2, "{segs:?}");
        assert!(segs[1].start_frame.abs_diff(jump) <= 2);
    }

    #[test]
    fn short_utterance_is_single_segment() {
        let x = Array2::from_shape_fn((2, 3), |(t, _)| t as f64);
        let segs = segment_utterance(&norm(x), 1.0, 3).unwrap();
        assert_eq!(segs.len(), 1);
    }

    #[test]
    fn wrong_stage_rejected() {
        let f = FeatureSequence::new("u", Array2::zeros((5, 2)), Stage::Spliced);
        assert!(segment_utterance(&f, 1.0, 3).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn segments_tile_and_respect_min_frames(
            vals in proptest::collection::vec(-3.0f64..3.0, 12..240),
            min_frames in 1usize..6,
            sensitivity in 0.0f64..2.0,
        ) {
            let t_len = vals.len() / 3;
            let x = Array2::from_shape_fn((t_len, 3), |(t, d)| vals[t * 3 + d]);
            let f = norm(x.clone());
            let segs = segment_utterance(&f, sensitivity, min_frames).unwrap();
            prop_assert_eq!(segs[0].start_frame, 0);
            prop_assert_eq!(segs.last().unwrap().end_frame, t_len);
            for w in segs.windows(2) {
                prop_assert_eq!(w[0].end_frame, w[1].start_frame);
            }
            if t_len >= min_frames {
                for s in &segs {
                    prop_assert!(s.end_frame - s.start_frame >= min_frames);
                }
            }
            for s in &segs {
                let m = x.slice(ndarray::s![s.start_frame..s.end_frame, ..]).mean_axis(Axis(0)).unwrap();
                prop_assert!((&m - &s.mean_vector).iter().all(|v| v.abs() < 1e-12));
            }
        }
    }
}
