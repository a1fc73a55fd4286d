//! Frozen per-layer representations: a synthetic layered generator and a
//! loader/writer for precomputed activations.
//!
//! On-disk layout: a JSON manifest
//! `{version:1, L, K, D, dims:[d_1..d_L], splits:{name:{count,file}}}` plus one
//! binary file per split. Each sample is stored as little-endian `f32` values
//! `[x (D), z^1 (d_1), ..., z^L (d_L)]` followed by `y` as a little-endian `u32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::SeededRng;

pub const SPLIT_NAMES: [&str; 4] = ["train", "val1", "val2", "test"];
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LayeredSample {
    pub id: u64,
    pub x: Vec<f64>,
    /// `z[l]` is the representation after backbone layer `l + 1`.
    pub z: Vec<Vec<f64>>,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub layers: usize,
    pub classes: usize,
    pub input_dim: usize,
    pub dims: Vec<usize>,
}

impl DatasetMeta {
    fn floats_per_sample(&self) -> usize {
        self.input_dim + self.dims.iter().sum::<usize>()
    }

    fn bytes_per_sample(&self) -> usize {
        (self.floats_per_sample() + 1) * 4
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub meta: DatasetMeta,
    pub train: Vec<LayeredSample>,
    pub val1: Vec<LayeredSample>,
    pub val2: Vec<LayeredSample>,
    pub test: Vec<LayeredSample>,
}

impl DatasetSplit {
    pub fn split(&self, name: &str) -> Option<&[LayeredSample]> {
        match name {
            "train" => Some(&self.train),
            "val1" => Some(&self.val1),
            "val2" => Some(&self.val2),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    fn split_mut(&mut self, name: &str) -> &mut Vec<LayeredSample> {
        match name {
            "train" => &mut self.train,
            "val1" => &mut self.val1,
            "val2" => &mut self.val2,
            "test" => &mut self.test,
            _ => unreachable!("unknown split {name}"),
        }
    }

    /// Full validation set `V = V^1 ∪ V^2`.
    pub fn validation(&self) -> Vec<LayeredSample> {
        self.val1.iter().chain(&self.val2).cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val1: usize,
    pub val2: usize,
    pub test: usize,
}

impl SplitSizes {
    /// 70/10/10/10 split of `total` samples.
    pub fn from_total(total: usize) -> Self {
        let val = total / 10;
        Self {
            train: total - 3 * val,
            val1: val,
            val2: val,
            test: val,
        }
    }

    fn get(&self, name: &str) -> usize {
        match name {
            "train" => self.train,
            "val1" => self.val1,
            "val2" => self.val2,
            _ => self.test,
        }
    }
}

/// Synthetic layered data: `z^l = mu_y * s_l * gamma_i + noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub layers: usize,
    pub classes: usize,
    pub dim: usize,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    pub sizes: SplitSizes,
    pub easy_fraction: f64,
    /// Per-layer separability multipliers, nondecreasing in depth.
    pub signal_scale: Vec<f64>,
    pub noise_sigma: f64,
    /// Difficulty multiplier `gamma` of the hard subset (easy samples use 1).
    #[serde(default = "default_hard_gamma")]
    pub hard_gamma: f64,
    /// Share of the noise variance carried by a per-sample component common
    /// to all layers, so that difficulty is nested across depth.
    #[serde(default = "default_noise_persistence")]
    pub noise_persistence: f64,
    pub seed: u64,
}

fn default_input_dim() -> usize {
    8
}

fn default_hard_gamma() -> f64 {
    0.2
}

fn default_noise_persistence() -> f64 {
    0.5
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::desk_default(0)
    }
}

impl SynthConfig {
    /// Linear ramp of separability from `first` to `last`.
    pub fn ramp(first: f64, last: f64, layers: usize) -> Vec<f64> {
        if layers == 1 {
            return vec![last];
        }
        (0..layers)
            .map(|l| first + (last - first) * l as f64 / (layers - 1) as f64)
            .collect()
    }

    /// Desk-scale default with nested difficulty: L=6, K=5, d=16.
    pub fn desk_default(seed: u64) -> Self {
        Self {
            layers: 6,
            classes: 5,
            dim: 16,
            input_dim: default_input_dim(),
            sizes: SplitSizes {
                train: 5000,
                val1: 1000,
                val2: 1000,
                test: 2000,
            },
            easy_fraction: 0.7,
            signal_scale: Self::ramp(0.3, 1.0, 6),
            noise_sigma: 1.0,
            hard_gamma: default_hard_gamma(),
            noise_persistence: default_noise_persistence(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return bad("layers must be >= 1".into());
        }
        if self.classes < 2 {
            return bad(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.dim == 0 || self.input_dim == 0 {
            return bad("dim and input_dim must be >= 1".into());
        }
        if self.signal_scale.len() != self.layers {
            return bad(format!(
                "signal_scale has {} entries, expected {}",
                self.signal_scale.len(),
                self.layers
            ));
        }
        if self.signal_scale.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return bad("signal_scale entries must be finite and nonnegative".into());
        }
        if self.signal_scale.windows(2).any(|w| w[1] < w[0]) {
            return bad("signal_scale must be nondecreasing in depth".into());
        }
        if !(0.0..=1.0).contains(&self.easy_fraction) {
            return bad(format!(
                "easy_fraction {} outside [0,1]",
                self.easy_fraction
            ));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return bad("noise_sigma must be finite and nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.noise_persistence) {
            return bad("noise_persistence must lie in [0, 1]".into());
        }
        if !self.hard_gamma.is_finite() || self.hard_gamma <= 0.0 {
            return bad("hard_gamma must be positive".into());
        }
        if self.sizes.train == 0 {
            return bad("train split must be non-empty".into());
        }
        Ok(())
    }
}

// Stored values are rounded to f32 so that a save/load round trip is exact.
fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let mut rng = SeededRng::derive(cfg.seed, 0);
    let gauss_vec =
        |rng: &mut SeededRng, n: usize| -> Vec<f64> { (0..n).map(|_| rng.normal()).collect() };

    // Class means for the raw input and for the representations; every layer
    // shares the latter and only its separability scale changes.
    let input_means: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| gauss_vec(&mut rng, cfg.input_dim))
        .collect();
    let means: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| gauss_vec(&mut rng, cfg.dim))
        .collect();
    let (keep, fresh) = (
        cfg.noise_persistence.sqrt(),
        (1.0 - cfg.noise_persistence).sqrt(),
    );

    let meta = DatasetMeta {
        layers: cfg.layers,
        classes: cfg.classes,
        input_dim: cfg.input_dim,
        dims: vec![cfg.dim; cfg.layers],
    };
    let mut out = DatasetSplit {
        meta,
        train: Vec::new(),
        val1: Vec::new(),
        val2: Vec::new(),
        test: Vec::new(),
    };

    let mut sample_rng = SeededRng::derive(cfg.seed, 1);
    let mut next_id = 0u64;
    for name in SPLIT_NAMES {
        let n = cfg.sizes.get(name);
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let y = sample_rng.below(cfg.classes);
            let easy = sample_rng.uniform() < cfg.easy_fraction;
            let gamma = if easy { 1.0 } else { cfg.hard_gamma };
            let x = input_means[y]
                .iter()
                .map(|&m| f32_round(m * gamma + cfg.noise_sigma * sample_rng.normal()))
                .collect();
            let persistent = gauss_vec(&mut sample_rng, cfg.dim);
            let z = (0..cfg.layers)
                .map(|l| {
                    let s = cfg.signal_scale[l];
                    means[y]
                        .iter()
                        .zip(&persistent)
                        .map(|(&m, &eta)| {
                            let noise = keep * eta + fresh * sample_rng.normal();
                            f32_round(m * s * gamma + cfg.noise_sigma * noise)
                        })
                        .collect()
                })
                .collect();
            samples.push(LayeredSample {
                id: next_id,
                x,
                z,
                y,
            });
            next_id += 1;
        }
        *out.split_mut(name) = samples;
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitEntry {
    count: usize,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    #[serde(rename = "L")]
    layers: usize,
    #[serde(rename = "K")]
    classes: usize,
    #[serde(rename = "D")]
    input_dim: usize,
    dims: Vec<usize>,
    splits: BTreeMap<String, SplitEntry>,
}

/// Writes `data` under `dir` as `manifest.json` plus `<split>.bin` files and
/// returns the manifest path.
pub fn save_activations(data: &DatasetSplit, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let meta = &data.meta;
    let mut splits = BTreeMap::new();
    for name in SPLIT_NAMES {
        let samples = data.split(name).expect("canonical split");
        let file = format!("{name}.bin");
        let mut buf = Vec::with_capacity(samples.len() * meta.bytes_per_sample());
        for s in samples {
            for v in s.x.iter().chain(s.z.iter().flatten()) {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            buf.extend_from_slice(&(s.y as u32).to_le_bytes());
        }
        fs::write(dir.join(&file), buf)?;
        splits.insert(
            name.to_string(),
            SplitEntry {
                count: samples.len(),
                file,
            },
        );
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        layers: meta.layers,
        classes: meta.classes,
        input_dim: meta.input_dim,
        dims: meta.dims.clone(),
        splits,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

pub fn load_activations(manifest_path: &Path) -> Result<DatasetSplit> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::load("manifest", format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::load("manifest", e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::load(
            "version",
            format!("unsupported version {}", manifest.version),
        ));
    }
    if manifest.layers == 0 {
        return Err(Error::load("L", "must be >= 1"));
    }
    if manifest.classes < 2 {
        return Err(Error::load("K", "must be >= 2"));
    }
    if manifest.dims.len() != manifest.layers {
        return Err(Error::load(
            "dims",
            format!(
                "{} entries but L = {}",
                manifest.dims.len(),
                manifest.layers
            ),
        ));
    }
    if manifest.dims.contains(&0) {
        return Err(Error::load("dims", "zero-width layer"));
    }
    let meta = DatasetMeta {
        layers: manifest.layers,
        classes: manifest.classes,
        input_dim: manifest.input_dim,
        dims: manifest.dims.clone(),
    };
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = DatasetSplit {
        meta: meta.clone(),
        train: Vec::new(),
        val1: Vec::new(),
        val2: Vec::new(),
        test: Vec::new(),
    };
    if let Some(extra) = manifest
        .splits
        .keys()
        .find(|k| !SPLIT_NAMES.contains(&k.as_str()))
    {
        return Err(Error::load(format!("splits.{extra}"), "unknown split name"));
    }
    let mut next_id = 0u64;
    for name in SPLIT_NAMES {
        let entry = manifest
            .splits
            .get(name)
            .ok_or_else(|| Error::load(format!("splits.{name}"), "missing split"))?;
        let field = format!("splits.{name}.file");
        let path = base.join(&entry.file);
        let bytes =
            fs::read(&path).map_err(|e| Error::load(&field, format!("{}: {e}", path.display())))?;
        let expected = entry.count * meta.bytes_per_sample();
        if bytes.len() != expected {
            return Err(Error::load(
                &field,
                format!(
                    "payload is {} bytes, manifest implies {expected} ({} samples x {} bytes)",
                    bytes.len(),
                    entry.count,
                    meta.bytes_per_sample()
                ),
            ));
        }
        let samples = out.split_mut(name);
        for (i, rec) in bytes.chunks_exact(meta.bytes_per_sample()).enumerate() {
            let mut floats = rec[..meta.floats_per_sample() * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
            let x: Vec<f64> = floats.by_ref().take(meta.input_dim).collect();
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::load(
                    format!("splits.{name}[{i}].x"),
                    "non-finite value",
                ));
            }
            let mut z = Vec::with_capacity(meta.layers);
            for (l, &d) in meta.dims.iter().enumerate() {
                let zl: Vec<f64> = floats.by_ref().take(d).collect();
                if zl.iter().any(|v| !v.is_finite()) {
                    return Err(Error::load(
                        format!("splits.{name}[{i}].z[{}]", l + 1),
                        "non-finite value",
                    ));
                }
                z.push(zl);
            }
            let tail = &rec[meta.floats_per_sample() * 4..];
            let y = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]) as usize;
            if y >= meta.classes {
                return Err(Error::load(
                    format!("splits.{name}[{i}].y"),
                    format!("label {y} >= K = {}", meta.classes),
                ));
            }
            samples.push(LayeredSample {
                id: next_id,
                x,
                z,
                y,
            });
            next_id += 1;
        }
    }
    Ok(out)
}
