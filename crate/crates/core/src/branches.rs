//! Exit branches: single-layer softmax inference modules (IMs) and sigmoid
//! gates over four uncertainty statistics of the IM output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, DenseMatrix, SeededRng};

pub const GATE_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceModule {
    /// 1-based exit index.
    pub layer: usize,
    /// `K x d_l`.
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImGrad {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl ImGrad {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            weights: DenseMatrix::zeros(classes, dim),
            bias: vec![0.0; classes],
        }
    }

    pub fn add(&mut self, other: &ImGrad) {
        math::axpy(self.weights.as_mut_slice(), 1.0, other.weights.as_slice());
        math::axpy(&mut self.bias, 1.0, &other.bias);
    }
}

impl InferenceModule {
    pub fn zeros(layer: usize, classes: usize, dim: usize) -> Self {
        Self {
            layer,
            weights: DenseMatrix::zeros(classes, dim),
            bias: vec![0.0; classes],
        }
    }

    /// Small Gaussian initialisation (std 0.01), zero bias.
    pub fn random(layer: usize, classes: usize, dim: usize, rng: &mut SeededRng) -> Self {
        let data = (0..classes * dim).map(|_| 0.01 * rng.normal()).collect();
        Self {
            layer,
            weights: DenseMatrix::from_vec(classes, dim, data).expect("finite init"),
            bias: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub(crate) fn logits_unchecked(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.weights.matvec(z);
        math::axpy(&mut out, 1.0, &self.bias);
        out
    }

    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::invalid(format!(
                "IM {} expects a {}-dim representation, got {}",
                self.layer,
                self.dim(),
                z.len()
            )));
        }
        Ok(self.logits_unchecked(z))
    }

    /// `softmax(W z + b)`.
    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        math::softmax(&self.logits(z)?)
    }

    pub(crate) fn forward_unchecked(&self, z: &[f64]) -> Vec<f64> {
        math::softmax_unchecked(&self.logits_unchecked(z))
    }

    /// Gradient of `weight * CE(softmax(W z + b), y)`.
    pub fn grad(&self, z: &[f64], y: usize, weight: f64) -> Result<ImGrad> {
        let p = self.forward(z)?;
        if y >= p.len() {
            return Err(Error::Index {
                index: y,
                len: p.len(),
            });
        }
        let mut g = ImGrad::zeros(self.classes(), self.dim());
        self.accumulate_grad(z, &p, y, weight, &mut g);
        Ok(g)
    }

    /// Adds `weight * (p - onehot(y)) [zᵀ; 1]` into `acc`, given `p = forward(z)`.
    pub(crate) fn accumulate_grad(
        &self,
        z: &[f64],
        p: &[f64],
        y: usize,
        weight: f64,
        acc: &mut ImGrad,
    ) {
        if weight == 0.0 {
            return;
        }
        let mut delta = p.to_vec();
        delta[y] -= 1.0;
        acc.weights.add_outer(weight, &delta, z);
        math::axpy(&mut acc.bias, weight, &delta);
    }

    pub fn apply_mut(&mut self, mut f: impl FnMut(&mut [f64], &mut [f64])) {
        f(self.weights.as_mut_slice(), &mut self.bias);
    }
}

/// `m = [p_max, h, h_pow, mar]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateFeatures(pub [f64; GATE_FEATURES]);

impl GateFeatures {
    pub fn p_max(&self) -> f64 {
        self.0[0]
    }
    pub fn entropy(&self) -> f64 {
        self.0[1]
    }
    pub fn entropy_pow(&self) -> f64 {
        self.0[2]
    }
    pub fn margin(&self) -> f64 {
        self.0[3]
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Uncertainty statistics of a predicted distribution. Entropies are the
/// nonnegative `-Σ p ln p`; `h_pow` uses the temperature-0.5 sharpened
/// distribution `p_k^2 / Σ p^2`.
pub fn gate_features(p: &[f64]) -> Result<GateFeatures> {
    if p.len() < 2 {
        return Err(Error::invalid(format!(
            "gate features need at least 2 classes, got {}",
            p.len()
        )));
    }
    Ok(gate_features_unchecked(p))
}

pub(crate) fn gate_features_unchecked(p: &[f64]) -> GateFeatures {
    let top = math::argmax(p);
    let p_max = p[top];
    let second = p
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != top)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let sq_total: f64 = p.iter().map(|v| v * v).sum();
    let sharpened: Vec<f64> = p.iter().map(|v| v * v / sq_total).collect();
    GateFeatures([p_max, entropy(p), entropy(&sharpened), p_max - second])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    /// 1-based gate index in `1..L`.
    pub layer: usize,
    pub weights: [f64; GATE_FEATURES],
    pub bias: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GateGrad {
    pub weights: [f64; GATE_FEATURES],
    pub bias: f64,
}

impl GateGrad {
    pub fn add(&mut self, other: &GateGrad) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        self.bias += other.bias;
    }
}

impl Gate {
    pub fn new(layer: usize) -> Self {
        Self {
            layer,
            weights: [0.0; GATE_FEATURES],
            bias: 0.0,
        }
    }

    /// `sigmoid(w·m + b)`.
    pub fn forward(&self, m: &GateFeatures) -> f64 {
        math::sigmoid(math::dot(&self.weights, &m.0) + self.bias)
    }

    /// Gradient of `weight * BCE(t, sigmoid(w·m + b))`.
    pub fn grad(&self, m: &GateFeatures, target: f64, weight: f64) -> GateGrad {
        let delta = weight * (self.forward(m) - target);
        let mut g = GateGrad {
            weights: m.0,
            bias: delta,
        };
        for v in &mut g.weights {
            *v *= delta;
        }
        g
    }

    pub fn apply_mut(&mut self, mut f: impl FnMut(&mut [f64], &mut [f64])) {
        f(&mut self.weights, std::slice::from_mut(&mut self.bias));
    }
}

/// IMs for every exit plus gates for exits `1..L`; `g^L ≡ 1` has no parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitModel {
    pub ims: Vec<InferenceModule>,
    pub gates: Vec<Gate>,
}

impl ExitModel {
    pub fn new(ims: Vec<InferenceModule>, gates: Vec<Gate>) -> Result<Self> {
        if ims.is_empty() {
            return Err(Error::invalid("model needs at least one IM"));
        }
        if gates.len() + 1 != ims.len() {
            return Err(Error::invalid(format!(
                "{} IMs require {} gates, got {}",
                ims.len(),
                ims.len() - 1,
                gates.len()
            )));
        }
        let k = ims[0].classes();
        if ims.iter().any(|im| im.classes() != k) {
            return Err(Error::invalid("IMs disagree on the class count"));
        }
        Ok(Self { ims, gates })
    }

    /// Randomly initialised IMs and neutral gates (`w = 0, b = 0`).
    pub fn init(classes: usize, dims: &[usize], rng: &mut SeededRng) -> Self {
        let ims = dims
            .iter()
            .enumerate()
            .map(|(l, &d)| InferenceModule::random(l + 1, classes, d, rng))
            .collect();
        let gates = (1..dims.len()).map(Gate::new).collect();
        Self { ims, gates }
    }

    pub fn layers(&self) -> usize {
        self.ims.len()
    }

    pub fn classes(&self) -> usize {
        self.ims[0].classes()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.ims.iter().map(|im| im.dim()).collect()
    }

    pub fn final_im(&self) -> &InferenceModule {
        self.ims.last().expect("non-empty")
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImEntry {
    layer: usize,
    classes: usize,
    dim: usize,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GateEntry {
    layer: usize,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    version: u32,
    layers: usize,
    classes: usize,
    ims: Vec<ImEntry>,
    gates: Vec<GateEntry>,
}

fn f32_bytes<'a>(vals: impl Iterator<Item = &'a f64>) -> Vec<u8> {
    vals.flat_map(|v| (*v as f32).to_le_bytes()).collect()
}

fn read_f32s(path: &Path, expected: usize, field: &str) -> Result<Vec<f64>> {
    let bytes =
        fs::read(path).map_err(|e| Error::load(field, format!("{}: {e}", path.display())))?;
    if bytes.len() != expected * 4 {
        return Err(Error::load(
            field,
            format!("blob has {} bytes, expected {}", bytes.len(), expected * 4),
        ));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::load(field, "non-finite parameter"));
    }
    Ok(vals)
}

/// Writes `checkpoint.json` plus one little-endian f32 blob per IM and gate
/// into `dir`; returns the manifest path.
pub fn save_checkpoint(model: &ExitModel, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut ims = Vec::new();
    for im in &model.ims {
        let file = format!("im_{}.bin", im.layer);
        let bytes = f32_bytes(im.weights.as_slice().iter().chain(&im.bias));
        fs::write(dir.join(&file), bytes)?;
        ims.push(ImEntry {
            layer: im.layer,
            classes: im.classes(),
            dim: im.dim(),
            file,
        });
    }
    let mut gates = Vec::new();
    for g in &model.gates {
        let file = format!("gate_{}.bin", g.layer);
        let bytes = f32_bytes(g.weights.iter().chain(std::iter::once(&g.bias)));
        fs::write(dir.join(&file), bytes)?;
        gates.push(GateEntry {
            layer: g.layer,
            file,
        });
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        layers: model.layers(),
        classes: model.classes(),
        ims,
        gates,
    };
    let path = dir.join("checkpoint.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

/// Accepts either the manifest path or the directory containing it.
pub fn load_checkpoint(path: &Path) -> Result<ExitModel> {
    let manifest_path = if path.is_dir() {
        path.join("checkpoint.json")
    } else {
        path.to_path_buf()
    };
    if !manifest_path.is_file() {
        return Err(Error::CheckpointNotFound(manifest_path));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&manifest_path)?)
        .map_err(|e| Error::load("checkpoint", e.to_string()))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::load(
            "version",
            format!("unsupported version {}", manifest.version),
        ));
    }
    if manifest.ims.len() != manifest.layers || manifest.gates.len() + 1 != manifest.layers {
        return Err(Error::load(
            "layers",
            "IM/gate counts disagree with layer count",
        ));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut ims = Vec::new();
    for (i, e) in manifest.ims.iter().enumerate() {
        let field = format!("ims[{i}]");
        if e.classes != manifest.classes || e.layer != i + 1 {
            return Err(Error::load(field, "layer index or class count mismatch"));
        }
        let vals = read_f32s(&base.join(&e.file), e.classes * e.dim + e.classes, &field)?;
        let (w, b) = vals.split_at(e.classes * e.dim);
        ims.push(InferenceModule {
            layer: e.layer,
            weights: DenseMatrix::from_vec(e.classes, e.dim, w.to_vec())?,
            bias: b.to_vec(),
        });
    }
    let mut gates = Vec::new();
    for (i, e) in manifest.gates.iter().enumerate() {
        let field = format!("gates[{i}]");
        if e.layer != i + 1 {
            return Err(Error::load(field, "layer index mismatch"));
        }
        let vals = read_f32s(&base.join(&e.file), GATE_FEATURES + 1, &field)?;
        gates.push(Gate {
            layer: e.layer,
            weights: [vals[0], vals[1], vals[2], vals[3]],
            bias: vals[4],
        });
    }
    ExitModel::new(ims, gates)
}
