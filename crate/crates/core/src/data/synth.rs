//! Synthetic attribute suite: identities are random block glyphs, a
//! nuisance factor adds an oriented intensity ramp chosen independently of
//! identity, a binary factor is fixed per identity, and a multi-label vector
//! is drawn per identity with per-sample flips.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::KvConfig;
use super::container::TensorContainer;
use super::dataset::{Dataset, Labels};
use super::manifest::{DatasetManifest, ManifestEntry, SPLIT};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use crate::train::derive_seed;

pub const IDENTITY: &str = "identity";
pub const NUISANCE: &str = "nuisance";
pub const BINARY: &str = "binary";
pub const MULTILABEL: &str = "multilabel";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub image_size: usize,
    pub channels: usize,
    pub nuisance_levels: usize,
    /// Peak ramp value at the image edge midpoints.
    pub nuisance_amplitude: f64,
    /// Glyph cells per side.
    pub glyph_grid: usize,
    pub multilabel_classes: usize,
    pub flip_rate: f64,
    pub noise_std: f64,
    /// Maximum circular glyph shift in pixels.
    pub jitter: usize,
    pub splits: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_identities: 20,
            samples_per_identity: 50,
            image_size: 56,
            channels: 3,
            nuisance_levels: 7,
            nuisance_amplitude: 1.0,
            glyph_grid: 8,
            multilabel_classes: 9,
            flip_rate: 0.05,
            noise_std: 0.1,
            jitter: 0,
            splits: 10,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub const KEYS: &'static [&'static str] = &[
        "num_identities",
        "samples_per_identity",
        "image_size",
        "channels",
        "nuisance_levels",
        "nuisance_amplitude",
        "glyph_grid",
        "multilabel_classes",
        "flip_rate",
        "noise_std",
        "jitter",
        "splits",
        "seed",
    ];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.check_keys(Self::KEYS)?;
        let d = SynthSpec::default();
        let s = SynthSpec {
            num_identities: kv.get_or("num_identities", d.num_identities)?,
            samples_per_identity: kv.get_or("samples_per_identity", d.samples_per_identity)?,
            image_size: kv.get_or("image_size", d.image_size)?,
            channels: kv.get_or("channels", d.channels)?,
            nuisance_levels: kv.get_or("nuisance_levels", d.nuisance_levels)?,
            nuisance_amplitude: kv.get_or("nuisance_amplitude", d.nuisance_amplitude)?,
            glyph_grid: kv.get_or("glyph_grid", d.glyph_grid)?,
            multilabel_classes: kv.get_or("multilabel_classes", d.multilabel_classes)?,
            flip_rate: kv.get_or("flip_rate", d.flip_rate)?,
            noise_std: kv.get_or("noise_std", d.noise_std)?,
            jitter: kv.get_or("jitter", d.jitter)?,
            splits: kv.get_or("splits", d.splits)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_identities", self.num_identities),
            ("samples_per_identity", self.samples_per_identity),
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("nuisance_levels", self.nuisance_levels),
            ("glyph_grid", self.glyph_grid),
            ("multilabel_classes", self.multilabel_classes),
            ("splits", self.splits),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.num_identities < 2 {
            return Err(Error::Config("need at least 2 identities".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_rate) || !(self.noise_std >= 0.0) {
            return Err(Error::Config("flip_rate must be in [0,1] and noise_std >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub identity: usize,
    pub nuisance: usize,
    pub binary: usize,
    pub multilabel: Vec<bool>,
    pub split: usize,
    /// `(channels, size, size)` pixels.
    pub image: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct SynthSet {
    pub spec: SynthSpec,
    pub samples: Vec<SynthSample>,
}

/// Deterministic per seed; samples are identity-major.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthSet> {
    spec.validate()?;
    let s = spec.image_size;
    let c = spec.channels;
    let g = spec.glyph_grid;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "identities"));

    let glyphs: Vec<Vec<f32>> = (0..spec.num_identities)
        .map(|_| (0..c * g * g).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect())
        .collect();
    let mut order: Vec<usize> = (0..spec.num_identities).collect();
    order.shuffle(&mut rng);
    let mut binary = vec![0usize; spec.num_identities];
    for &i in &order[..spec.num_identities / 2] {
        binary[i] = 1;
    }
    let m = spec.multilabel_classes;
    let base_tags: Vec<Vec<bool>> = (0..spec.num_identities)
        .map(|_| {
            let k = rng.random_range(1..=3.min(m));
            let mut idx: Vec<usize> = (0..m).collect();
            idx.shuffle(&mut rng);
            let mut v = vec![false; m];
            for &j in &idx[..k] {
                v[j] = true;
            }
            v
        })
        .collect();

    let half = (s as f64 - 1.0) / 2.0;
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("valid std");
    let mut samples = Vec::with_capacity(spec.num_identities * spec.samples_per_identity);
    for ident in 0..spec.num_identities {
        for k in 0..spec.samples_per_identity {
            let id = format!("s{:05}", ident * spec.samples_per_identity + k);
            let mut r = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &id));
            let level = k % spec.nuisance_levels;
            let theta = PI * level as f64 / spec.nuisance_levels as f64;
            let (dx, dy) = if spec.jitter > 0 {
                let j = spec.jitter as i64;
                (r.random_range(-j..=j), r.random_range(-j..=j))
            } else {
                (0, 0)
            };
            let mut image = Vec::with_capacity(c * s * s);
            for ch in 0..c {
                for y in 0..s {
                    for x in 0..s {
                        let gx = (x as i64 - dx).rem_euclid(s as i64) as usize * g / s;
                        let gy = (y as i64 - dy).rem_euclid(s as i64) as usize * g / s;
                        let glyph = glyphs[ident][(ch * g + gy) * g + gx] as f64;
                        let ramp = spec.nuisance_amplitude
                            * ((x as f64 - half) * theta.cos() + (y as f64 - half) * theta.sin())
                            / half.max(1.0);
                        let n = if spec.noise_std > 0.0 { noise.sample(&mut r) } else { 0.0 };
                        image.push((glyph + ramp + n) as f32);
                    }
                }
            }
            let multilabel = flip_tags(&base_tags[ident], spec.flip_rate, &mut r);
            samples.push(SynthSample {
                id,
                identity: ident,
                nuisance: level,
                binary: binary[ident],
                multilabel,
                split: k % spec.splits,
                image,
            });
        }
    }
    Ok(SynthSet {
        spec: spec.clone(),
        samples,
    })
}

/// Per-class flips, redrawn until 1 to 3 tags remain active.
fn flip_tags(base: &[bool], rate: f64, r: &mut ChaCha8Rng) -> Vec<bool> {
    for _ in 0..64 {
        let v: Vec<bool> = base.iter().map(|&b| b ^ r.random_bool(rate)).collect();
        let active = v.iter().filter(|&&b| b).count();
        if (1..=3).contains(&active) {
            return v;
        }
    }
    base.to_vec()
}

impl SynthSet {
    pub fn classes(&self, field: &str) -> Result<usize> {
        Ok(match field {
            IDENTITY => self.spec.num_identities,
            NUISANCE => self.spec.nuisance_levels,
            BINARY => 2,
            MULTILABEL => self.spec.multilabel_classes,
            _ => return Err(Error::InvalidArgument(format!("unknown synthetic field `{field}`"))),
        })
    }

    /// In-memory dataset of the samples accepted by `keep`.
    pub fn dataset(&self, field: &str, keep: impl Fn(&SynthSample) -> bool) -> Result<Dataset> {
        let classes = self.classes(field)?;
        let picked: Vec<&SynthSample> = self.samples.iter().filter(|s| keep(s)).collect();
        let s = self.spec.image_size;
        let mut data = Vec::with_capacity(picked.len() * self.spec.channels * s * s);
        for p in &picked {
            data.extend_from_slice(&p.image);
        }
        let images = Tensor::from_vec(Shape::new(picked.len(), self.spec.channels, s, s), data)?;
        let labels = if field == MULTILABEL {
            Labels::multi(
                classes,
                picked
                    .iter()
                    .flat_map(|p| p.multilabel.iter().map(|&b| if b { 1.0 } else { 0.0 }))
                    .collect(),
            )?
        } else {
            Labels::class(
                classes,
                picked
                    .iter()
                    .map(|p| match field {
                        IDENTITY => p.identity,
                        NUISANCE => p.nuisance,
                        _ => p.binary,
                    })
                    .collect(),
            )?
        };
        Dataset::new(images, labels)
    }

    pub fn manifest(&self, root: &Path) -> Result<DatasetManifest> {
        let mut classes = BTreeMap::new();
        classes.insert(IDENTITY.to_string(), self.spec.num_identities);
        classes.insert(NUISANCE.to_string(), self.spec.nuisance_levels);
        classes.insert(BINARY.to_string(), 2);
        let mut multi = BTreeMap::new();
        multi.insert(MULTILABEL.to_string(), self.spec.multilabel_classes);
        let columns = [IDENTITY, NUISANCE, BINARY, MULTILABEL, SPLIT]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let entries = self
            .samples
            .iter()
            .map(|p| ManifestEntry {
                id: p.id.clone(),
                path: PathBuf::from("images").join(format!("{}.tnsr", p.id)),
                fields: vec![
                    p.identity.to_string(),
                    p.nuisance.to_string(),
                    p.binary.to_string(),
                    p.multilabel.iter().map(|&b| if b { '1' } else { '0' }).collect(),
                    p.split.to_string(),
                ],
            })
            .collect();
        DatasetManifest::new(root.to_path_buf(), columns, classes, multi, entries)
    }

    /// Write `images/<id>.tnsr` and `manifest.tsv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images)
            .map_err(|e| Error::from(e).context(format!("creating {}", images.display())))?;
        let s = self.spec.image_size;
        for p in &self.samples {
            TensorContainer::new(vec![self.spec.channels, s, s], p.image.clone())?
                .write(&images.join(format!("{}.tnsr", p.id)))?;
        }
        let manifest = self.manifest(dir)?;
        manifest.write(&dir.join("manifest.tsv"))?;
        Ok(manifest)
    }
}
