//! Three small operations exposed to the browser. Each takes plain text
//! from a form and returns a text report; the `*_text` functions hold the
//! logic and are what the native tests call.

use attrnet::eval::{best_threshold, rates_at, select_operating_point};
use attrnet::graph::{build_trunk, count_flops, evaluate_candidate, ArchConfig, Constraints, FlopConvention};
use wasm_bindgen::prelude::*;

fn numbers<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, String> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| format!("{what}: `{t}` is not a number")))
        .collect()
}

fn four(text: &str, what: &str) -> Result<[usize; 4], String> {
    let v: Vec<usize> = numbers(text, what)?;
    v.try_into().map_err(|v: Vec<usize>| format!("{what}: need 4 values, got {}", v.len()))
}

/// Parameter count, cost, combined four-head ratio and head sizes for a
/// trunk with the given per-stage repeats and bottleneck widths, followed by
/// the per-layer table.
pub fn accounting_text(repeats: &str, bottlenecks: &str, convention: &str) -> Result<String, String> {
    let cfg = ArchConfig::family(four(repeats, "repeats")?, four(bottlenecks, "bottlenecks")?);
    cfg.validate().map_err(|e| e.to_string())?;
    let conv: FlopConvention = convention.parse().map_err(|e: attrnet::Error| e.to_string())?;
    let c = evaluate_candidate(cfg.clone(), &Constraints::default()).map_err(|e| e.to_string())?;
    let graph = build_trunk(&cfg).map_err(|e| e.to_string())?;
    let flops = count_flops(&graph, graph.input_shape(), conv).map_err(|e| e.to_string())?;

    let mut s = format!(
        "convs\t{}\nparams\t{}\n{conv}\t{}\ncombined_ratio\t{}\n",
        c.conv_count,
        c.params,
        flops.total,
        c.combined_ratio.map_or("-".into(), |r| format!("{r:.4}"))
    );
    for r in &c.soft {
        s += &format!(
            "head {}@{}\t{}\n",
            r.target.branch,
            r.target.classes,
            r.actual.map_or("-".into(), |a| a.to_string())
        );
    }
    s += if c.violations.is_empty() {
        "constraints\tmet\n".to_string()
    } else {
        format!("constraints\t{}\n", c.violations.join("; "))
    }
    .as_str();
    s.push('\n');
    s.push_str(&flops.table());
    Ok(s)
}

/// Selected threshold for a score matrix. `labels` are 0/1 in the same
/// row-major order; `classes` is the row width.
pub fn operating_point_text(scores: &str, labels: &str, classes: usize, target_fpr: f64) -> Result<String, String> {
    let s: Vec<f64> = numbers(scores, "scores")?;
    let l: Vec<bool> = numbers::<u8>(labels, "labels")?
        .into_iter()
        .map(|v| match v {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(format!("labels: {v} is not 0 or 1")),
        })
        .collect::<Result<_, _>>()?;
    let op = select_operating_point(&s, &l, classes, target_fpr).map_err(|e| e.to_string())?;
    let mut out = format!("{op}\n\nsweep\nthreshold\ttpr\tfpr\tabstain\n");
    let mut ts = s.clone();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    for t in ts {
        let p = rates_at(&s, &l, classes, t);
        out += &format!("{t}\t{:.4}\t{:.4}\t{:.4}\n", p.tpr, p.fpr, p.abstain_rate);
    }
    Ok(out)
}

/// Best cosine threshold for one set of pairs. `same` is 0/1 per pair.
pub fn threshold_text(similarities: &str, same: &str) -> Result<String, String> {
    let s: Vec<f64> = numbers(similarities, "similarities")?;
    let f: Vec<u8> = numbers(same, "same")?;
    if s.len() != f.len() {
        return Err(format!("{} similarities for {} labels", s.len(), f.len()));
    }
    let pairs: Vec<(f64, bool)> = s.into_iter().zip(f).map(|(v, l)| (v, l == 1)).collect();
    let (t, correct) = best_threshold(&pairs);
    Ok(format!(
        "threshold\t{t}\ncorrect\t{correct} of {}\naccuracy\t{:.4}\n",
        pairs.len(),
        correct as f64 / pairs.len().max(1) as f64
    ))
}

#[wasm_bindgen]
pub fn accounting(repeats: &str, bottlenecks: &str, convention: &str) -> Result<String, JsError> {
    accounting_text(repeats, bottlenecks, convention).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn operating_point(scores: &str, labels: &str, classes: usize, target_fpr: f64) -> Result<String, JsError> {
    operating_point_text(scores, labels, classes, target_fpr).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn verification_threshold(similarities: &str, same: &str) -> Result<String, JsError> {
    threshold_text(similarities, same).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_accounting_meets_constraints() {
        let r = accounting_text("1 1 7 2", "32,128,128,256", "macs").unwrap();
        assert!(r.contains("constraints\tmet"), "{r}");
        assert!(r.contains("convs\t24"));
    }

    #[test]
    fn bad_input_is_an_error_not_a_panic() {
        assert!(accounting_text("1 1 7", "32 128 128 256", "macs").is_err());
        assert!(accounting_text("1 1 7 2", "32 128 128 256", "gflops").is_err());
        assert!(operating_point_text("0.5 x", "1 0", 1, 0.1).is_err());
        assert!(threshold_text("0.1 0.2", "1").is_err());
    }

    #[test]
    fn separable_pairs_get_full_accuracy() {
        let r = threshold_text("0.9 0.8 0.1 0.2", "1 1 0 0").unwrap();
        assert!(r.contains("correct\t4 of 4"), "{r}");
    }

    #[test]
    fn operating_point_sweep_lists_each_score() {
        let r = operating_point_text("0.9 0.1 0.2 0.8", "1 0 0 1", 2, 0.0).unwrap();
        assert!(r.starts_with("threshold\t0.8\n"), "{r}");
        assert_eq!(r.lines().filter(|l| l.starts_with("0.")).count(), 4);
    }
}
