//! Word error rate and real-time factor.

use crate::error::{Error, Result};

/// Virtual frame shift used to turn frame counts into audio seconds.
pub const FRAME_SHIFT_SECONDS: f64 = 0.01;

/// Lowercase and collapse whitespace.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// Levenshtein distance between two token slices, two-row DP.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Errors and reference word count of one pair after normalization.
pub fn word_errors(reference: &str, hypothesis: &str) -> (usize, usize) {
    let (r, h) = (normalize(reference), normalize(hypothesis));
    let rw: Vec<&str> = r.split(' ').filter(|w| !w.is_empty()).collect();
    let hw: Vec<&str> = h.split(' ').filter(|w| !w.is_empty()).collect();
    (edit_distance(&rw, &hw), rw.len())
}

/// Corpus WER: total edits over total reference words.
pub fn wer<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::invalid(format!("{} references vs {} hypotheses", refs.len(), hyps.len())));
    }
    let (mut errors, mut words) = (0, 0);
    for (r, h) in refs.iter().zip(hyps) {
        let (e, n) = word_errors(r.as_ref(), h.as_ref());
        errors += e;
        words += n;
    }
    if words == 0 {
        return Err(Error::invalid("reference set has no words"));
    }
    Ok(errors as f64 / words as f64)
}

/// Decode time over virtual audio duration (`frames` at 10 ms).
pub fn rtf(decode_seconds: f64, frames: usize) -> Result<f64> {
    if !(decode_seconds > 0.0) || frames == 0 {
        return Err(Error::invalid(format!("rtf needs positive time and frames, got {decode_seconds}s / {frames}")));
    }
    Ok(decode_seconds / (frames as f64 * FRAME_SHIFT_SECONDS))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_cases() {
        assert_eq!(wer(&["a b c"], &["a b c"]).unwrap(), 0.0);
        assert!((wer(&["a b c"], &["a x c"]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(wer(&["a"], &["b c d"]).unwrap(), 3.0);
        assert!(wer::<&str, &str>(&[], &[]).is_err());
        assert!(wer(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize("  The  Cat\tsat "), "the cat sat");
        assert_eq!(wer(&["the cat"], &["THE   cat "]).unwrap(), 0.0);
    }

    #[test]
    fn rtf_arithmetic() {
        assert!((rtf(1.0, 100).unwrap() - 1.0).abs() < 1e-12);
        assert!((rtf(1.0, 200).unwrap() - 0.5).abs() < 1e-12);
        assert!(rtf(0.0, 100).is_err());
    }
}
