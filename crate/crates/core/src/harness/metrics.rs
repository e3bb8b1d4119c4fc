use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Fraction of frames whose predicted state equals the reference.
pub fn frame_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} reference frames", predicted.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::Shape("no frames to score".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

pub fn edit_distance(hyp: &[usize], reference: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

/// Levenshtein distance divided by the reference length.
pub fn unit_error_rate(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Target("empty reference sequence".into()));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Corpus-level error rate: total edits over total reference length.
pub fn corpus_unit_error_rate<'a>(pairs: impl IntoIterator<Item = (&'a [usize], &'a [usize])>) -> Result<f64> {
    let (mut edits, mut len) = (0usize, 0usize);
    for (h, r) in pairs {
        edits += edit_distance(h, r);
        len += r.len();
    }
    if len == 0 {
        return Err(Error::Target("empty reference sequences".into()));
    }
    Ok(edits as f64 / len as f64)
}

/// `1 − UER`, clipped at zero so it stays a proportion.
pub fn unit_accuracy(uer: f64) -> f64 {
    (1.0 - uer).max(0.0)
}

/// Normalized mutual information `I(A;B) / sqrt(H(A) H(B))`.
pub fn normalized_mutual_information(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape("label sequences must be non-empty and equally long".into()));
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut pa: BTreeMap<usize, f64> = BTreeMap::new();
    let mut pb: BTreeMap<usize, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0;
        *pa.entry(x).or_default() += 1.0;
        *pb.entry(y).or_default() += 1.0;
    }
    let entropy = |m: &BTreeMap<usize, f64>| -> f64 { m.values().map(|c| -(c / n) * (c / n).ln()).sum() };
    let (ha, hb) = (entropy(&pa), entropy(&pb));
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c / n;
            pxy * (pxy / ((pa[&x] / n) * (pb[&y] / n))).ln()
        })
        .sum();
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[k] } else { 0.5 * (v[k - 1] + v[k]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frame_accuracy_examples() {
        assert_eq!(frame_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(frame_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(frame_accuracy(&[1, 2, 0, 0], &[1, 2, 3, 3]).unwrap(), 0.5);
        assert!(frame_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn uer_examples() {
        assert_eq!(unit_error_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert!((unit_error_rate(&[1, 2, 9, 4, 5], &[1, 2, 3, 4, 5]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(unit_error_rate(&[], &[4, 5, 6]).unwrap(), 1.0);
        assert!(unit_error_rate(&[1], &[]).is_err());
        assert_eq!(unit_accuracy(1.5), 0.0);
    }

    #[test]
    fn nmi_extremes() {
        let a = [0, 0, 1, 1, 2, 2];
        assert!((normalized_mutual_information(&a, &[5, 5, 7, 7, 9, 9]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(normalized_mutual_information(&a, &[0; 6]).unwrap(), 0.0);
        assert!(normalized_mutual_information(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap() < 1e-12);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    proptest! {
        #[test]
        fn edit_distance_is_a_metric(
            a in prop::collection::vec(0usize..4, 0..8),
            b in prop::collection::vec(0usize..4, 0..8),
            c in prop::collection::vec(0usize..4, 0..8),
        ) {
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert_eq!(edit_distance(&a, &a), 0);
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
            prop_assert!(edit_distance(&a, &b) <= a.len().max(b.len()));
            if !b.is_empty() {
                let uer = unit_error_rate(&a, &b).unwrap();
                prop_assert!(uer >= 0.0);
                prop_assert_eq!(uer == 0.0, a == b);
            }
        }

        #[test]
        fn accuracy_is_a_proportion(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..30)) {
            let (p, t): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let acc = frame_accuracy(&p, &t).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
        }
    }
}
