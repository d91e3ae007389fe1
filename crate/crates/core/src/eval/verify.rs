use std::fmt::Write as _;

use super::metrics::cosine_similarity;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationPair {
    pub embedding_a: Vec<f32>,
    pub embedding_b: Vec<f32>,
    pub same: bool,
    pub split: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitResult {
    pub split: usize,
    /// Chosen on every other split.
    pub threshold: f64,
    pub accuracy: f64,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub splits: Vec<SplitResult>,
    pub mean_accuracy: f64,
}

impl VerifyReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("split\tthreshold\taccuracy\tpairs\n");
        for r in &self.splits {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", r.split, r.threshold, r.accuracy, r.pairs);
        }
        let _ = writeln!(s, "mean\t-\t{}\t-", self.mean_accuracy);
        s
    }
}

/// Best threshold for "same ⇔ score ≥ t" over `(score, same)` samples.
///
/// Candidates are −∞, the midpoints between consecutive distinct sorted
/// scores, and +∞, visited in increasing order; the first one reaching the
/// maximal number of correct decisions wins. Returns `(t, correct)`.
pub fn best_threshold(samples: &[(f64, bool)]) -> (f64, usize) {
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total_same = v.iter().filter(|s| s.1).count();
    // t = -inf: everything predicted same.
    let mut correct = total_same;
    let mut best = (f64::NEG_INFINITY, correct);
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j < v.len() && v[j].0 == v[i].0 {
            // Moving this group below the threshold flips its predictions.
            if v[j].1 {
                correct -= 1;
            } else {
                correct += 1;
            }
            j += 1;
        }
        let t = if j < v.len() {
            (v[i].0 + v[j].0) / 2.0
        } else {
            f64::INFINITY
        };
        if correct > best.1 {
            best = (t, correct);
        }
        i = j;
    }
    best
}

/// Leave-one-split-out verification: for each split, pick the threshold on
/// the union of the others and report accuracy on the held-out split.
pub fn verify(pairs: &[VerificationPair]) -> Result<VerifyReport> {
    let sims = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            cosine_similarity(&p.embedding_a, &p.embedding_b).map_err(|e| e.context(format!("pair {i}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    verify_scores(&sims, pairs.iter().map(|p| (p.same, p.split)).collect::<Vec<_>>().as_slice())
}

/// As [`verify`] with precomputed similarities; `meta` is `(same, split)`.
pub fn verify_scores(sims: &[f64], meta: &[(bool, usize)]) -> Result<VerifyReport> {
    if sims.len() != meta.len() {
        return Err(Error::Shape(format!("{} scores for {} pairs", sims.len(), meta.len())));
    }
    let num_splits = meta.iter().map(|m| m.1 + 1).max().unwrap_or(0);
    if num_splits < 2 {
        return Err(Error::InvalidArgument("verification needs at least 2 splits".into()));
    }
    let mut splits = Vec::with_capacity(num_splits);
    for s in 0..num_splits {
        let held: Vec<(f64, bool)> = sims
            .iter()
            .zip(meta)
            .filter(|(_, m)| m.1 == s)
            .map(|(&x, m)| (x, m.0))
            .collect();
        if held.is_empty() {
            return Err(Error::InvalidArgument(format!("split {s} has no pairs")));
        }
        let rest: Vec<(f64, bool)> = sims
            .iter()
            .zip(meta)
            .filter(|(_, m)| m.1 != s)
            .map(|(&x, m)| (x, m.0))
            .collect();
        let (t, _) = best_threshold(&rest);
        let hits = held.iter().filter(|(x, same)| (*x >= t) == *same).count();
        splits.push(SplitResult {
            split: s,
            threshold: t,
            accuracy: hits as f64 / held.len() as f64,
            pairs: held.len(),
        });
    }
    let mean_accuracy = splits.iter().map(|r| r.accuracy).sum::<f64>() / splits.len() as f64;
    Ok(VerifyReport { splits, mean_accuracy })
}
