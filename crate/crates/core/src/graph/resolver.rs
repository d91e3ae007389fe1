//! Search over stage repeat counts and undocumented bottleneck widths for
//! trunks that meet the published size and cost budgets.

use std::cmp::Ordering;
use std::fmt::Write as _;

use super::accounting::{count_flops, count_params, head_cost, head_params, FlopConvention};
use super::arch::ArchConfig;
use super::spec::build_trunk;
use crate::data::config::KvConfig;
use crate::error::{Error, Result};

/// Trainable-parameter target for a head at a branch point.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTarget {
    pub branch: String,
    pub classes: usize,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Constraints {
    /// Exact number of non-shortcut convolutions.
    pub conv_count: Option<usize>,
    /// Inclusive window on trunk learnable scalars (identity classifier included).
    pub params: (u64, u64),
    /// Inclusive window on trunk cost under a single convention.
    pub cost: (u64, u64),
    /// Convention for the cost window; `None` tries MACs, then 2×MACs, and
    /// declares the first that admits any candidate.
    pub convention: Option<FlopConvention>,
    /// Upper bound on (trunk + heads) / trunk cost for `budget_heads`.
    pub combined_ratio_max: Option<f64>,
    pub budget_heads: Vec<(String, usize)>,
    pub soft_targets: Vec<SoftTarget>,
    pub repeat_max: usize,
    /// Allowed bottleneck widths per stage (full scale).
    pub bottleneck_choices: Vec<Vec<usize>>,
    /// Template supplying everything the search does not vary.
    pub base: ArchConfig,
}

impl Default for Constraints {
    fn default() -> Self {
        Constraints {
            conv_count: Some(24),
            params: (8_500_000, 10_500_000),
            cost: (800_000_000, 1_000_000_000),
            convention: None,
            combined_ratio_max: Some(1.3),
            budget_heads: vec![
                ("conv19".into(), 7),
                ("conv22".into(), 14),
                ("fc".into(), 9),
                ("fc".into(), 2),
            ],
            soft_targets: vec![
                SoftTarget {
                    branch: "conv19".into(),
                    classes: 7,
                    params: 1_018_055,
                },
                SoftTarget {
                    branch: "conv22".into(),
                    classes: 14,
                    params: 889_230,
                },
            ],
            repeat_max: 8,
            bottleneck_choices: vec![
                vec![16, 32, 64],
                vec![32, 64, 128],
                vec![128],
                vec![128, 256, 512],
            ],
            base: ArchConfig::canonical(),
        }
    }
}

impl Constraints {
    /// No hard limits at all.
    pub fn unconstrained(repeat_max: usize, bottleneck_choices: Vec<Vec<usize>>) -> Self {
        Constraints {
            conv_count: None,
            params: (0, u64::MAX),
            cost: (0, u64::MAX),
            combined_ratio_max: None,
            repeat_max,
            bottleneck_choices,
            ..Constraints::default()
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "conv_count",
        "params_min",
        "params_max",
        "cost_min",
        "cost_max",
        "convention",
        "combined_ratio_max",
        "budget_heads",
        "soft_targets",
        "repeat_max",
        "bottleneck_choices",
    ];

    /// Keys absent from `kv` keep their defaults; `none` disables the
    /// optional limits.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut all = Self::KEYS.to_vec();
        all.extend_from_slice(ArchConfig::KEYS);
        kv.check_keys(&all)?;
        let mut c = Constraints {
            base: ArchConfig::from_kv(kv, &ArchConfig::canonical())?,
            ..Constraints::default()
        };
        if kv.get_str("conv_count") == Some("none") {
            c.conv_count = None;
        } else if let Some(v) = kv.get("conv_count")? {
            c.conv_count = Some(v);
        }
        c.params = (
            kv.get_or("params_min", c.params.0)?,
            kv.get_or("params_max", c.params.1)?,
        );
        c.cost = (
            kv.get_or("cost_min", c.cost.0)?,
            kv.get_or("cost_max", c.cost.1)?,
        );
        match kv.get_str("convention") {
            None | Some("auto") => {}
            Some(_) => c.convention = kv.get("convention")?,
        }
        if kv.get_str("combined_ratio_max") == Some("none") {
            c.combined_ratio_max = None;
        } else if let Some(v) = kv.get("combined_ratio_max")? {
            c.combined_ratio_max = Some(v);
        }
        if let Some(list) = kv.get_list::<String>("budget_heads")? {
            c.budget_heads = list
                .iter()
                .map(|s| {
                    let (b, k) = s.split_once(':').ok_or_else(|| {
                        Error::Config(format!("budget head `{s}` is not branch:classes"))
                    })?;
                    Ok((b.to_string(), k.parse().map_err(|_| Error::Config(format!("bad class count in `{s}`")))?))
                })
                .collect::<Result<_>>()?;
        }
        if let Some(list) = kv.get_list::<String>("soft_targets")? {
            c.soft_targets = list
                .iter()
                .map(|s| {
                    let parts: Vec<&str> = s.split(':').collect();
                    let bad = || Error::Config(format!("soft target `{s}` is not branch:classes:params"));
                    if parts.len() != 3 {
                        return Err(bad());
                    }
                    Ok(SoftTarget {
                        branch: parts[0].to_string(),
                        classes: parts[1].parse().map_err(|_| bad())?,
                        params: parts[2].parse().map_err(|_| bad())?,
                    })
                })
                .collect::<Result<_>>()?;
        }
        c.repeat_max = kv.get_or("repeat_max", c.repeat_max)?;
        if let Some(list) = kv.get_list::<String>("bottleneck_choices")? {
            c.bottleneck_choices = list
                .iter()
                .map(|s| {
                    s.split('/')
                        .map(|v| v.parse().map_err(|_| Error::Config(format!("bad width in `{s}`"))))
                        .collect::<Result<Vec<usize>>>()
                })
                .collect::<Result<_>>()?;
        }
        if c.bottleneck_choices.len() != c.base.stages.len() {
            return Err(Error::Config(format!(
                "bottleneck_choices lists {} stages, architecture has {}",
                c.bottleneck_choices.len(),
                c.base.stages.len()
            )));
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftResidual {
    pub target: SoftTarget,
    /// `None` when the branch point does not exist in the candidate.
    pub actual: Option<u64>,
}

impl SoftResidual {
    pub fn residual(&self) -> Option<i64> {
        self.actual.map(|a| a as i64 - self.target.params as i64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub config: ArchConfig,
    pub conv_count: usize,
    pub params: u64,
    pub macs: u64,
    /// Combined multi-head cost over trunk cost, when computable.
    pub combined_ratio: Option<f64>,
    pub soft: Vec<SoftResidual>,
    /// Sum of absolute soft residuals; infinite when any is undefined.
    pub score: f64,
    /// Hard constraints this candidate violates, cost window excluded.
    pub violations: Vec<String>,
}

impl Candidate {
    fn key(&self) -> (Vec<usize>, Vec<usize>) {
        (self.config.repeats(), self.config.bottlenecks())
    }

    fn order(&self, other: &Candidate) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| self.key().cmp(&other.key()))
    }
}

/// Outcome of a resolver run.
#[derive(Clone, Debug)]
pub struct Resolution {
    /// Feasible candidates, best first.
    pub candidates: Vec<Candidate>,
    pub evaluated: usize,
    /// Convention the cost window was applied under.
    pub convention: FlopConvention,
}

impl Resolution {
    pub fn best(&self) -> &Candidate {
        &self.candidates[0]
    }

    /// Ranked candidate table followed by the full per-layer accounting of
    /// the best candidate.
    pub fn report(&self, top: usize) -> Result<String> {
        let mut s = String::new();
        let _ = writeln!(s, "# convention\t{}", self.convention);
        let _ = writeln!(s, "# evaluated\t{}", self.evaluated);
        let _ = writeln!(s, "# feasible\t{}", self.candidates.len());
        let soft_names: Vec<String> = self.candidates[0]
            .soft
            .iter()
            .map(|r| format!("{}@{}", r.target.branch, r.target.classes))
            .collect();
        let _ = write!(s, "rank\trepeats\tbottlenecks\tconvs\tparams\tmacs\tcombined_ratio");
        for n in &soft_names {
            let _ = write!(s, "\t{n}\t{n}_residual");
        }
        let _ = writeln!(s, "\tscore");
        for (i, c) in self.candidates.iter().take(top).enumerate() {
            let _ = write!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                i + 1,
                join(&c.config.repeats()),
                join(&c.config.bottlenecks()),
                c.conv_count,
                c.params,
                c.macs,
                c.combined_ratio.map_or("-".into(), |r| format!("{r:.4}")),
            );
            for r in &c.soft {
                let _ = write!(
                    s,
                    "\t{}\t{}",
                    r.actual.map_or("-".into(), |a| a.to_string()),
                    r.residual().map_or("-".into(), |a| a.to_string())
                );
            }
            let _ = writeln!(s, "\t{}", c.score);
        }
        let graph = build_trunk(&self.best().config)?;
        let flops = count_flops(&graph, graph.input_shape(), self.convention)?;
        s.push('\n');
        s.push_str(&flops.table());
        Ok(s)
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Accounting and constraint check for one configuration. The cost window
/// is not applied here.
pub fn evaluate_candidate(config: ArchConfig, c: &Constraints) -> Result<Candidate> {
    let graph = build_trunk(&config)?;
    let conv_count = graph.non_shortcut_convs();
    let params = count_params(&graph).total;
    let flops = count_flops(&graph, graph.input_shape(), FlopConvention::Macs)?;
    let macs = flops.total;
    let mut combined = Some(macs as f64);
    for (branch, classes) in &c.budget_heads {
        match head_cost(&graph, &flops, branch, *classes) {
            Ok(h) => combined = combined.map(|t| t + h as f64),
            Err(_) => combined = None,
        }
    }
    let combined_ratio = combined.map(|t| t / macs as f64);
    let soft: Vec<SoftResidual> = c
        .soft_targets
        .iter()
        .map(|t| SoftResidual {
            target: t.clone(),
            actual: head_params(&graph, &t.branch, t.classes).ok(),
        })
        .collect();
    let score = soft
        .iter()
        .map(|r| r.residual().map_or(f64::INFINITY, |v| v.unsigned_abs() as f64))
        .sum();

    let mut violations = Vec::new();
    if let Some(n) = c.conv_count {
        if conv_count != n {
            violations.push(format!("conv count {conv_count} != {n}"));
        }
    }
    if params < c.params.0 || params > c.params.1 {
        violations.push(format!("params {params} outside [{}, {}]", c.params.0, c.params.1));
    }
    if let Some(max) = c.combined_ratio_max {
        match combined_ratio {
            Some(r) if r < max => {}
            Some(r) => violations.push(format!("combined ratio {r:.4} >= {max}")),
            None => violations.push("budget heads reference missing branch points".into()),
        }
    }
    Ok(Candidate {
        config,
        conv_count,
        params,
        macs,
        combined_ratio,
        soft,
        score,
        violations,
    })
}

/// Enumerate repeat counts `1..=repeat_max` per stage and the allowed
/// bottleneck widths, evaluate each trunk's parameter count and cost, keep
/// those meeting every hard constraint, and rank them by soft-target
/// residual (ties broken by lexicographic repeats, then bottlenecks).
///
/// Fails with the nearest misses when nothing is feasible.
pub fn resolve_architecture(c: &Constraints) -> Result<Resolution> {
    let stages = c.base.stages.len();
    if c.bottleneck_choices.len() != stages || c.bottleneck_choices.iter().any(Vec::is_empty) {
        return Err(Error::Config("one non-empty bottleneck choice list per stage".into()));
    }
    if c.repeat_max == 0 {
        return Err(Error::Config("repeat_max must be positive".into()));
    }
    let mut all = Vec::new();
    let mut repeats = vec![1usize; stages];
    loop {
        let blocks: usize = repeats.iter().sum();
        // Cheap arithmetic pre-filter: stem + 2 per block + embedding conv.
        let conv_ok = c.conv_count.is_none_or(|n| 2 + 2 * blocks == n);
        if conv_ok {
            let mut choice = vec![0usize; stages];
            loop {
                let mut cfg = c.base.clone();
                for (i, s) in cfg.stages.iter_mut().enumerate() {
                    s.repeats = repeats[i];
                    s.bottleneck = c.bottleneck_choices[i][choice[i]];
                }
                all.push(evaluate_candidate(cfg, c)?);
                if !advance(&mut choice, |i| c.bottleneck_choices[i].len()) {
                    break;
                }
            }
        }
        if !advance_repeats(&mut repeats, c.repeat_max) {
            break;
        }
    }
    let evaluated = all.len();
    let conventions = match c.convention {
        Some(cv) => vec![cv],
        None => vec![FlopConvention::Macs, FlopConvention::Flops2x],
    };
    let mut misses = Vec::new();
    for &convention in &conventions {
        let (mut feasible, rejected): (Vec<Candidate>, Vec<Candidate>) =
            all.iter().cloned().partition(|cand| {
                cand.violations.is_empty() && in_window(cand.macs, convention, c.cost)
            });
        if !feasible.is_empty() {
            feasible.sort_by(Candidate::order);
            return Ok(Resolution {
                candidates: feasible,
                evaluated,
                convention,
            });
        }
        if misses.is_empty() {
            misses = rejected
                .into_iter()
                .map(|mut m| {
                    if !in_window(m.macs, convention, c.cost) {
                        m.violations.push(format!(
                            "cost {} {convention} outside [{}, {}]",
                            m.macs * convention.factor(),
                            c.cost.0,
                            c.cost.1
                        ));
                    }
                    m
                })
                .collect();
        }
    }
    {
        sort_misses(&mut misses);
        let text = misses
            .iter()
            .take(5)
            .map(|m| {
                format!(
                    "repeats={} bottlenecks={}: {}",
                    join(&m.config.repeats()),
                    join(&m.config.bottlenecks()),
                    m.violations.join("; ")
                )
            })
            .collect::<Vec<_>>()
            .join("\n");
        Err(Error::NoCandidate(text))
    }
}

fn in_window(macs: u64, convention: FlopConvention, window: (u64, u64)) -> bool {
    let cost = macs.saturating_mul(convention.factor());
    cost >= window.0 && cost <= window.1
}

fn sort_misses(m: &mut [Candidate]) {
    m.sort_by(|a, b| a.violations.len().cmp(&b.violations.len()).then_with(|| a.order(b)));
}

fn advance(idx: &mut [usize], len: impl Fn(usize) -> usize) -> bool {
    for i in (0..idx.len()).rev() {
        idx[i] += 1;
        if idx[i] < len(i) {
            return true;
        }
        idx[i] = 0;
    }
    false
}

fn advance_repeats(r: &mut [usize], max: usize) -> bool {
    for i in (0..r.len()).rev() {
        r[i] += 1;
        if r[i] <= max {
            return true;
        }
        r[i] = 1;
    }
    false
}
