use std::fmt;

use crate::data::config::KvConfig;
use crate::error::{Error, Result};

/// Positive rational applied to the input resolution and every channel width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Scale {
    pub num: usize,
    pub den: usize,
}

impl Scale {
    pub const ONE: Scale = Scale { num: 1, den: 1 };
    pub const QUARTER: Scale = Scale { num: 1, den: 4 };

    /// Rounded to nearest, never below 1.
    pub fn apply(&self, x: usize) -> usize {
        ((x * self.num + self.den / 2) / self.den).max(1)
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("scale `{s}` is not a positive rational n/d"));
        let (n, d) = s.split_once('/').unwrap_or((s, "1"));
        let num: usize = n.trim().parse().map_err(|_| bad())?;
        let den: usize = d.trim().parse().map_err(|_| bad())?;
        if num == 0 || den == 0 {
            return Err(bad());
        }
        Ok(Scale { num, den })
    }
}

/// One repeated stage of bottleneck blocks.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StageConfig {
    /// Stage label (`b`, `c`, `d`, `f`).
    pub label: char,
    pub repeats: usize,
    /// Width after the reducing 1x1 convolution.
    pub bottleneck: usize,
    /// Width after the expanding 3x3 convolution.
    pub expanded: usize,
    /// The first block halves the resolution with a stride-2 3x3 convolution.
    pub downsample: bool,
}

/// Stage repeat counts and widths of the identity trunk.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageConfig>,
    pub embedding_dim: usize,
    pub num_identities: usize,
    /// Bias on convolutions that feed a batchnorm.
    pub conv_bias: bool,
    pub scale: Scale,
}

const STAGE_LABELS: [char; 4] = ['b', 'c', 'd', 'f'];

impl ArchConfig {
    /// The full-scale trunk selected by [`crate::graph::resolve_architecture`]
    /// under the default constraints.
    pub fn canonical() -> Self {
        ArchConfig::family([1, 1, 7, 2], [32, 128, 128, 256])
    }

    /// Canonical topology at a quarter of the resolution and widths
    /// (56x56 input, 80-d embedding).
    pub fn desk() -> Self {
        ArchConfig {
            scale: Scale::QUARTER,
            ..Self::canonical()
        }
    }

    /// Four-stage family with expanded widths 64, 128, 256, 512 at
    /// 56, 28, 14 and 7 pixels.
    pub fn family(repeats: [usize; 4], bottlenecks: [usize; 4]) -> Self {
        let expanded = [64, 128, 256, 512];
        let stages = (0..4)
            .map(|i| StageConfig {
                label: STAGE_LABELS[i],
                repeats: repeats[i],
                bottleneck: bottlenecks[i],
                expanded: expanded[i],
                downsample: i > 0,
            })
            .collect();
        ArchConfig {
            input_channels: 3,
            input_size: 224,
            stem_channels: 32,
            stages,
            embedding_dim: 320,
            num_identities: 10_000,
            conv_bias: false,
            scale: Scale::ONE,
        }
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.repeats).sum()
    }

    /// Stem + two per block + the embedding convolution.
    pub fn non_shortcut_convs(&self) -> usize {
        2 + 2 * self.total_blocks()
    }

    pub fn repeats(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.repeats).collect()
    }

    pub fn bottlenecks(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.bottleneck).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_channels", self.input_channels),
            ("input_size", self.input_size),
            ("stem_channels", self.stem_channels),
            ("embedding_dim", self.embedding_dim),
            ("num_identities", self.num_identities),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.num_identities < 2 {
            return Err(Error::Config("num_identities must be at least 2".into()));
        }
        let mut prev = self.stem_channels;
        for s in &self.stages {
            if s.repeats == 0 || s.bottleneck == 0 || s.expanded == 0 {
                return Err(Error::Config(format!(
                    "stage ({}) needs positive repeats and widths",
                    s.label
                )));
            }
            if s.downsample && s.expanded != 2 * prev {
                return Err(Error::Config(format!(
                    "stage ({}) downsamples but its width {} is not double the previous {}",
                    s.label, s.expanded, prev
                )));
            }
            prev = s.expanded;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let join = |v: Vec<usize>| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut kv = KvConfig::default();
        kv.set("input_channels", self.input_channels);
        kv.set("input_size", self.input_size);
        kv.set("stem_channels", self.stem_channels);
        kv.set("stage_labels", self.stages.iter().map(|s| s.label.to_string()).collect::<Vec<_>>().join(","));
        kv.set("repeats", join(self.repeats()));
        kv.set("bottlenecks", join(self.bottlenecks()));
        kv.set("expanded", join(self.stages.iter().map(|s| s.expanded).collect()));
        kv.set(
            "downsample",
            self.stages
                .iter()
                .map(|s| if s.downsample { "1" } else { "0" })
                .collect::<Vec<_>>()
                .join(","),
        );
        kv.set("embedding_dim", self.embedding_dim);
        kv.set("num_identities", self.num_identities);
        kv.set("conv_bias", if self.conv_bias { 1 } else { 0 });
        kv.set("scale", self.scale);
        kv
    }

    pub const KEYS: &'static [&'static str] = &[
        "input_channels",
        "input_size",
        "stem_channels",
        "stage_labels",
        "repeats",
        "bottlenecks",
        "expanded",
        "downsample",
        "embedding_dim",
        "num_identities",
        "conv_bias",
        "scale",
    ];

    /// Read architecture keys from `kv`, starting from `base` for absent keys.
    pub fn from_kv(kv: &KvConfig, base: &ArchConfig) -> Result<Self> {
        let mut cfg = base.clone();
        cfg.input_channels = kv.get_or("input_channels", cfg.input_channels)?;
        cfg.input_size = kv.get_or("input_size", cfg.input_size)?;
        cfg.stem_channels = kv.get_or("stem_channels", cfg.stem_channels)?;
        cfg.embedding_dim = kv.get_or("embedding_dim", cfg.embedding_dim)?;
        cfg.num_identities = kv.get_or("num_identities", cfg.num_identities)?;
        cfg.conv_bias = kv.get_bool("conv_bias")?.unwrap_or(cfg.conv_bias);
        cfg.scale = kv.get_or("scale", cfg.scale)?;
        let n = kv
            .get_list::<usize>("repeats")?
            .map(|v| v.len())
            .unwrap_or(cfg.stages.len());
        let labels: Vec<char> = match kv.get_list::<char>("stage_labels")? {
            Some(l) => l,
            None => (0..n)
                .map(|i| cfg.stages.get(i).map(|s| s.label).unwrap_or(char::from(b'b' + i as u8)))
                .collect(),
        };
        let pick = |key: &str, cur: Vec<usize>| -> Result<Vec<usize>> {
            Ok(kv.get_list::<usize>(key)?.unwrap_or(cur))
        };
        let repeats = pick("repeats", cfg.repeats())?;
        let bottlenecks = pick("bottlenecks", cfg.bottlenecks())?;
        let expanded = pick("expanded", cfg.stages.iter().map(|s| s.expanded).collect())?;
        let downsample = pick(
            "downsample",
            cfg.stages.iter().map(|s| s.downsample as usize).collect(),
        )?;
        if [labels.len(), bottlenecks.len(), expanded.len(), downsample.len()]
            .iter()
            .any(|&l| l != repeats.len())
        {
            return Err(Error::Config(
                "stage_labels, repeats, bottlenecks, expanded and downsample need equal lengths".into(),
            ));
        }
        cfg.stages = (0..repeats.len())
            .map(|i| StageConfig {
                label: labels[i],
                repeats: repeats[i],
                bottleneck: bottlenecks[i],
                expanded: expanded[i],
                downsample: downsample[i] != 0,
            })
            .collect();
        cfg.validate()?;
        Ok(cfg)
    }
}
