use std::fmt;

use crate::error::{Error, Result};

/// Just above 1.0: a threshold no score in `[0, 1]` reaches.
pub fn above_one() -> f64 {
    f64::from_bits(1.0f64.to_bits() + 1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    /// Fraction of samples with no class at or above the threshold.
    pub abstain_rate: f64,
}

impl fmt::Display for OperatingPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "threshold\t{}\ntpr\t{}\nfpr\t{}\nabstain_rate\t{}",
            self.threshold, self.tpr, self.fpr, self.abstain_rate
        )
    }
}

/// Rates of the rule "class predicted ⇔ score ≥ t" over every
/// `(sample, class)` cell. Rates with an empty denominator are 0.
pub fn rates_at(scores: &[f64], labels: &[bool], classes: usize, t: f64) -> OperatingPoint {
    let (mut tp, mut fp, mut pos, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        if l {
            pos += 1;
            tp += (s >= t) as usize;
        } else {
            neg += 1;
            fp += (s >= t) as usize;
        }
    }
    let n = scores.len() / classes.max(1);
    let abstain = (0..n)
        .filter(|&i| scores[i * classes..(i + 1) * classes].iter().all(|&s| s < t))
        .count();
    let rate = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    OperatingPoint {
        threshold: t,
        tpr: rate(tp, pos),
        fpr: rate(fp, neg),
        abstain_rate: rate(abstain, n),
    }
}

/// Smallest threshold among the observed scores and [`above_one`] whose
/// false-positive rate is at most `target_fpr`. `scores` and `labels` are
/// row-major `(n, classes)`.
pub fn select_operating_point(
    scores: &[f64],
    labels: &[bool],
    classes: usize,
    target_fpr: f64,
) -> Result<OperatingPoint> {
    if classes == 0 || !scores.len().is_multiple_of(classes) || scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores and {} labels do not form rows of {classes}",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidArgument(format!("score {s} outside [0, 1]")));
    }
    if !(0.0..=1.0).contains(&target_fpr) {
        return Err(Error::InvalidArgument(format!("target fpr {target_fpr} outside [0, 1]")));
    }
    let mut neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    neg.sort_by(f64::total_cmp);
    let mut cands: Vec<f64> = scores.to_vec();
    cands.push(above_one());
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    // fpr is non-increasing in t, so the first passing candidate is the smallest.
    let t = cands
        .into_iter()
        .find(|&t| {
            let fp = neg.len() - neg.partition_point(|&s| s < t);
            neg.is_empty() || fp as f64 / neg.len() as f64 <= target_fpr
        })
        .expect("above_one admits no false positives");
    Ok(rates_at(scores, labels, classes, t))
}
